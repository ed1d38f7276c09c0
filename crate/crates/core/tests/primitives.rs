//! Every differentiable primitive against central finite differences.

use promptdist::numcore::{gradcheck, Rng, Tape, Tensor, Var};
use promptdist::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-5;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Random weights so the scalar reduction does not hide per-element errors.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = uniform(&mut Rng::new(seed), &shape, -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

fn check_unary(name: &str, lo: f64, hi: f64, op: fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = Rng::new(11);
    let x = uniform(&mut rng, &[3, 4], lo, hi);
    let r = gradcheck(
        |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, 5)
        },
        &[x],
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{name}: {:?}", r.max_rel_error);
}

fn check_binary(name: &str, sa: &[usize], sb: &[usize], op: fn(&mut Tape, Var, Var) -> Result<Var>) {
    let mut rng = Rng::new(12);
    let a = uniform(&mut rng, sa, -2.0, 2.0);
    let b = uniform(&mut rng, sb, 0.5, 2.0);
    let r = gradcheck(
        |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, 6)
        },
        &[a, b],
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{name}: {:?}", r.max_rel_error);
}

#[test]
fn elementwise_unary_primitives() {
    check_unary("neg", -2.0, 2.0, |t, x| Ok(t.neg(x)));
    check_unary("scale", -2.0, 2.0, |t, x| Ok(t.scale(x, -1.7)));
    check_unary("add_scalar", -2.0, 2.0, |t, x| Ok(t.add_scalar(x, 0.3)));
    check_unary("exp", -2.0, 2.0, |t, x| Ok(t.exp(x)));
    check_unary("log", 0.1, 2.0, |t, x| Ok(t.log(x)));
    check_unary("sqrt", 0.1, 2.0, |t, x| Ok(t.sqrt(x)));
    check_unary("abs", -2.0, 2.0, |t, x| Ok(t.abs(x)));
    check_unary("relu", -2.0, 2.0, |t, x| Ok(t.relu(x)));
    check_unary("sigmoid", -2.0, 2.0, |t, x| Ok(t.sigmoid(x)));
    check_unary("softplus", -2.0, 2.0, |t, x| Ok(t.softplus(x)));
    check_unary("square", -2.0, 2.0, |t, x| Ok(t.square(x)));
    check_unary("clamp_min", -2.0, 2.0, |t, x| Ok(t.clamp_min(x, 0.1)));
}

#[test]
fn binary_primitives_with_broadcasting() {
    check_binary("add", &[3, 4], &[3, 4], |t, a, b| t.add(a, b));
    check_binary("add_bcast", &[2, 3, 4], &[3, 1], |t, a, b| t.add(a, b));
    check_binary("sub", &[3, 4], &[4], |t, a, b| t.sub(a, b));
    check_binary("mul", &[3, 4], &[3, 4], |t, a, b| t.mul(a, b));
    check_binary("mul_scalar", &[3, 4], &[], |t, a, b| t.mul(a, b));
    check_binary("div", &[3, 4], &[1, 4], |t, a, b| t.div(a, b));
    check_binary("maximum", &[3, 4], &[3, 4], |t, a, b| t.maximum(a, b));
    check_binary("minimum", &[3, 4], &[3, 4], |t, a, b| t.minimum(a, b));
}

#[test]
fn matmul_shared_and_batched() {
    check_binary("matmul", &[3, 4], &[4, 5], |t, a, b| t.matmul(a, b));
    check_binary("matmul_shared_rhs", &[2, 3, 4], &[4, 2], |t, a, b| t.matmul(a, b));
    check_binary("matmul_batched", &[2, 3, 4], &[2, 4, 2], |t, a, b| t.matmul(a, b));
}

#[test]
fn structural_primitives() {
    check_unary("permute", -2.0, 2.0, |t, x| {
        let r = t.reshape(x, &[3, 2, 2])?;
        t.permute(r, &[2, 0, 1])
    });
    check_unary("transpose", -2.0, 2.0, |t, x| t.transpose(x));
    check_unary("slice", -2.0, 2.0, |t, x| t.slice(x, 1, 1, 2));
    check_unary("concat", -2.0, 2.0, |t, x| {
        let a = t.slice(x, 0, 0, 1)?;
        let sq = t.square(x);
        t.concat(&[sq, a, x], 0)
    });
    check_unary("index_select", -2.0, 2.0, |t, x| t.index_select(x, &[2, 0, 2]));
    check_unary("stack", -2.0, 2.0, |t, x| {
        let e = t.exp(x);
        t.stack(&[x, e])
    });
}

#[test]
fn reductions() {
    check_unary("sum", -2.0, 2.0, |t, x| Ok(t.sum(x)));
    check_unary("mean", -2.0, 2.0, |t, x| Ok(t.mean(x)));
    check_unary("sum_axis0", -2.0, 2.0, |t, x| t.sum_axis(x, 0));
    check_unary("sum_axis1", -2.0, 2.0, |t, x| t.sum_axis(x, 1));
    check_unary("mean_axis", -2.0, 2.0, |t, x| t.mean_axis(x, 0));
    check_unary("max_axis", -2.0, 2.0, |t, x| t.max_axis(x, 1));
    check_unary("norm", -2.0, 2.0, |t, x| Ok(t.norm(x)));
    check_unary("softmax", -2.0, 2.0, |t, x| t.softmax(x));
    check_unary("log_softmax", -2.0, 2.0, |t, x| t.log_softmax(x));
}

#[test]
fn random_three_layer_composition() {
    let mut rng = Rng::new(42);
    let x = uniform(&mut rng, &[5, 4], -2.0, 2.0);
    let w1 = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let w2 = uniform(&mut rng, &[6, 6], -1.0, 1.0);
    let w3 = uniform(&mut rng, &[6, 3], -1.0, 1.0);
    let r = gradcheck(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.sigmoid(h);
            let h = t.matmul(h, v[2])?;
            let h = t.exp(h);
            let h = t.matmul(h, v[3])?;
            let s = t.log_softmax(h)?;
            Ok(t.mean(s))
        },
        &[x, w1, w2, w3],
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{:?}", r.max_rel_error);
}

#[test]
fn evaluation_is_bit_reproducible() {
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(Rng::new(3).gaussian(&[4, 8]));
        let w = t.constant(Rng::new(4).gaussian(&[8, 8]));
        let h = t.matmul(x, w).unwrap();
        let s = t.softmax(h).unwrap();
        t.value(s).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn split_and_concat_preserve_data(
        rows in 1usize..5, cols in 2usize..6, cut in 1usize..5, seed in 0u64..1000
    ) {
        let cut = cut.min(cols - 1);
        let data = Rng::new(seed).gaussian(&[rows, cols]);
        let mut t = Tape::new();
        let x = t.constant(data.clone());
        let a = t.slice(x, 1, 0, cut).unwrap();
        let b = t.slice(x, 1, cut, cols - cut).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        let f = t.reshape(c, &[rows * cols]).unwrap();
        let back = t.reshape(f, &[rows, cols]).unwrap();
        prop_assert_eq!(t.value(back), &data);
    }
}
