//! Transformer building blocks over named parameters.

use crate::error::{config_err, Result};
use crate::numcore::{BoundParams, ParamStore, Rng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

pub fn init_linear(store: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize) -> Result<()> {
    let std = (2.0 / (din + dout) as f64).sqrt();
    store.insert(&format!("{name}.w"), rng.gaussian_scaled(&[din, dout], std))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[dout]))
}

/// `x W + b` over the last axis.
pub fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(&format!("{name}.g"), Tensor::ones(&[dim]))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[dim]))
}

pub fn layer_norm(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    let mean = tape.mean_axis(x, axis)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, axis)?;
    let var = tape.add_scalar(var, LN_EPS);
    let std = tape.sqrt(var);
    let normed = tape.div(centered, std)?;
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    let scaled = tape.mul(normed, g)?;
    tape.add(scaled, b)
}

pub fn init_attention(store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{name}.{part}"), c, c)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention; `query` is `B x Nq x C`,
/// `key` and `value` are `B x Nk x C`.
pub fn attention(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<Var> {
    let qs = tape.shape(query).to_vec();
    let ks = tape.shape(key).to_vec();
    let (b, nq, c, nk) = (qs[0], qs[1], qs[2], ks[1]);
    if c % heads != 0 {
        return Err(config_err!("hidden width {c} is not divisible by {heads} heads"));
    }
    let d = c / heads;
    let q = linear(tape, p, &format!("{name}.q"), query)?;
    let k = linear(tape, p, &format!("{name}.k"), key)?;
    let v = linear(tape, p, &format!("{name}.v"), value)?;
    let q = tape.reshape(q, &[b, nq, heads, d])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[b, nk, heads, d])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[b, nk, heads, d])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax(scores)?;
    let mixed = tape.matmul(attn, v)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[b, nq, c])?;
    linear(tape, p, &format!("{name}.o"), mixed)
}

/// Linear layers of the given widths with ReLU between them.
pub fn init_mlp(store: &mut ParamStore, rng: &mut Rng, name: &str, dims: &[usize]) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, rng, &format!("{name}.{i}"), w[0], w[1])?;
    }
    Ok(())
}

pub fn mlp(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, p, &format!("{name}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn init_encoder_layer(store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize, ffn: usize) -> Result<()> {
    init_attention(store, rng, &format!("{name}.attn"), c)?;
    init_layer_norm(store, &format!("{name}.norm1"), c)?;
    init_mlp(store, rng, &format!("{name}.ffn"), &[c, ffn, c])?;
    init_layer_norm(store, &format!("{name}.norm2"), c)
}

/// Post-norm self-attention block.
pub fn encoder_layer(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, heads: usize) -> Result<Var> {
    let a = attention(tape, p, &format!("{name}.attn"), x, x, x, heads)?;
    let x = tape.add(x, a)?;
    let x = layer_norm(tape, p, &format!("{name}.norm1"), x)?;
    let f = mlp(tape, p, &format!("{name}.ffn"), x, 2)?;
    let x = tape.add(x, f)?;
    layer_norm(tape, p, &format!("{name}.norm2"), x)
}

pub fn init_decoder_layer(store: &mut ParamStore, rng: &mut Rng, name: &str, c: usize, ffn: usize) -> Result<()> {
    init_attention(store, rng, &format!("{name}.self"), c)?;
    init_layer_norm(store, &format!("{name}.norm1"), c)?;
    init_attention(store, rng, &format!("{name}.cross"), c)?;
    init_layer_norm(store, &format!("{name}.norm2"), c)?;
    init_mlp(store, rng, &format!("{name}.ffn"), &[c, ffn, c])?;
    init_layer_norm(store, &format!("{name}.norm3"), c)
}

/// Post-norm decoder block: self-attention over queries, cross-attention
/// into `memory`, then a feed-forward layer.
pub fn decoder_layer(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    tgt: Var,
    memory: Var,
    heads: usize,
) -> Result<Var> {
    let s = attention(tape, p, &format!("{name}.self"), tgt, tgt, tgt, heads)?;
    let t = tape.add(tgt, s)?;
    let t = layer_norm(tape, p, &format!("{name}.norm1"), t)?;
    let c = attention(tape, p, &format!("{name}.cross"), t, memory, memory, heads)?;
    let t = tape.add(t, c)?;
    let t = layer_norm(tape, p, &format!("{name}.norm2"), t)?;
    let f = mlp(tape, p, &format!("{name}.ffn"), t, 2)?;
    let t = tape.add(t, f)?;
    layer_norm(tape, p, &format!("{name}.norm3"), t)
}

/// Fixed 2D sine/cosine encoding for a `grid x grid` raster, `grid² x c`.
/// The first half of the channels encode the row, the second half the column.
pub fn position_encoding(grid: usize, c: usize) -> Tensor {
    let half = c / 2;
    let mut data = vec![0.0; grid * grid * c];
    let encode = |pos: usize, i: usize, width: usize| {
        let freq = 1.0 / 100f64.powf((2 * (i / 2)) as f64 / width.max(1) as f64);
        let a = (pos as f64 + 0.5) * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for r in 0..grid {
        for col in 0..grid {
            let row = &mut data[(r * grid + col) * c..(r * grid + col + 1) * c];
            for i in 0..half {
                row[i] = encode(r, i, half);
            }
            for i in half..c {
                row[i] = encode(col, i - half, c - half);
            }
        }
    }
    Tensor::from_parts(vec![grid * grid, c], data)
}
