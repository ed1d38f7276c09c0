//! Set-prediction loss on matched queries plus the weighted orthogonality
//! term.

use super::boxes::giou_var;
use super::matching::Triplet;
use super::model::Outputs;
use super::LossConfig;
use crate::error::{contract_err, Result};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub obj_ce: Var,
    pub hoi_bce: Var,
    pub l1: Var,
    pub giou: Var,
    /// Weighted sum of the four terms.
    pub hoi: Var,
}

/// Detection loss for a batch. `assignments[b][g]` is the query matched to
/// triplet `g` of scene `b`.
pub fn set_loss(
    tape: &mut Tape,
    out: &Outputs,
    gts: &[Vec<Triplet>],
    assignments: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let os = tape.shape(out.obj_logits).to_vec();
    let hs = tape.shape(out.hoi_logits).to_vec();
    let (b, m, n_cls) = (os[0], os[1], os[2]);
    let n_hoi = hs[2];
    let background = n_cls - 1;
    if gts.len() != b || assignments.len() != b {
        return Err(contract_err!("{} scenes, {} gt lists, {} assignments", b, gts.len(), assignments.len()));
    }

    let mut cls_w = Tensor::zeros(&[b, m, n_cls]);
    let mut hoi_t = Tensor::zeros(&[b, m, n_hoi]);
    let mut rows = Vec::new();
    let mut sub_gt = Vec::new();
    let mut obj_gt = Vec::new();
    let mut matched = vec![None; b * m];
    for (s, (g, a)) in gts.iter().zip(assignments).enumerate() {
        if g.len() != a.len() {
            return Err(contract_err!("scene {s}: {} triplets but {} assignments", g.len(), a.len()));
        }
        for (t, &q) in g.iter().zip(a) {
            if q >= m || matched[s * m + q].is_some() {
                return Err(contract_err!("scene {s}: invalid or repeated query {q}"));
            }
            matched[s * m + q] = Some(t.obj_class);
            hoi_t.data_mut()[(s * m + q) * n_hoi + t.hoi_pair] = 1.0;
            rows.push(s * m + q);
            sub_gt.extend(t.sub_box.to_array());
            obj_gt.extend(t.obj_box.to_array());
        }
    }
    let mut weight_total = 0.0;
    for (i, slot) in matched.iter().enumerate() {
        let (cls, w) = match slot {
            Some(c) => (*c, 1.0),
            None => (background, cfg.eos_coef),
        };
        cls_w.data_mut()[i * n_cls + cls] = w;
        weight_total += w;
    }
    let n_gt = rows.len();
    let norm = n_gt.max(1) as f64;

    let logp = tape.log_softmax(out.obj_logits)?;
    let cls_w = tape.constant(cls_w);
    let picked = tape.mul(logp, cls_w)?;
    let picked = tape.sum(picked);
    let obj_ce = tape.scale(picked, -1.0 / weight_total.max(f64::MIN_POSITIVE));

    let sp = tape.softplus(out.hoi_logits);
    let hoi_t = tape.constant(hoi_t);
    let xy = tape.mul(out.hoi_logits, hoi_t)?;
    let bce = tape.sub(sp, xy)?;
    let bce = tape.sum(bce);
    let hoi_bce = tape.scale(bce, 1.0 / norm);

    let (l1, giou) = if n_gt == 0 {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let mut l1_sum = Vec::new();
        let mut giou_sum = Vec::new();
        for (pred, gt) in [(out.sub_boxes, sub_gt), (out.obj_boxes, obj_gt)] {
            let flat = tape.reshape(pred, &[b * m, 4])?;
            let sel = tape.index_select(flat, &rows)?;
            let gt = tape.constant(Tensor::new(&[n_gt, 4], gt)?);
            let diff = tape.sub(sel, gt)?;
            let ad = tape.abs(diff);
            l1_sum.push(tape.sum(ad));
            let g = giou_var(tape, sel, gt)?;
            let neg = tape.neg(g);
            let one_minus = tape.add_scalar(neg, 1.0);
            giou_sum.push(tape.sum(one_minus));
        }
        let l1 = tape.add(l1_sum[0], l1_sum[1])?;
        let gi = tape.add(giou_sum[0], giou_sum[1])?;
        (tape.scale(l1, 1.0 / norm), tape.scale(gi, 1.0 / norm))
    };

    let a = tape.scale(obj_ce, cfg.w_obj);
    let c = tape.scale(hoi_bce, cfg.w_cls);
    let d = tape.scale(l1, cfg.w_box);
    let e = tape.scale(giou, cfg.w_giou);
    let ac = tape.add(a, c)?;
    let de = tape.add(d, e)?;
    let hoi = tape.add(ac, de)?;
    Ok(LossTerms {
        obj_ce,
        hoi_bce,
        l1,
        giou,
        hoi,
    })
}

/// `hoi + lambda * loss_do`; with `lambda = 0` the result is `hoi` itself.
pub fn total_loss(tape: &mut Tape, hoi: Var, loss_do: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(hoi);
    }
    let reg = tape.scale(loss_do, lambda);
    tape.add(hoi, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::boxes::BBox;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn perfect_predictions_leave_small_residual() {
        let sub = BBox::new(0.4, 0.5, 0.2, 0.4);
        let obj = BBox::new(0.6, 0.5, 0.1, 0.1);
        let gt = Triplet {
            sub_box: sub,
            obj_box: obj,
            obj_class: 1,
            hoi_pair: 2,
        };
        let mut t = Tape::new();
        let (m, n_obj, n_hoi) = (3, 2, 4);
        let mut boxes_s = Vec::new();
        let mut boxes_o = Vec::new();
        for _ in 0..m {
            boxes_s.extend(sub.to_array());
            boxes_o.extend(obj.to_array());
        }
        let mut cls = vec![-20.0; m * (n_obj + 1)];
        for q in 0..m {
            cls[q * 3 + if q == 0 { 1 } else { 2 }] = 20.0;
        }
        let mut hoi = vec![logit(1e-6); m * n_hoi];
        hoi[2] = logit(1.0 - 1e-6);
        let out = Outputs {
            sub_boxes: t.constant(Tensor::new(&[1, m, 4], boxes_s).unwrap()),
            obj_boxes: t.constant(Tensor::new(&[1, m, 4], boxes_o).unwrap()),
            obj_logits: t.constant(Tensor::new(&[1, m, n_obj + 1], cls).unwrap()),
            hoi_logits: t.constant(Tensor::new(&[1, m, n_hoi], hoi).unwrap()),
        };
        let terms = set_loss(&mut t, &out, &[vec![gt]], &[vec![0]], &LossConfig::default()).unwrap();
        assert!(t.value(terms.l1).item().abs() < 1e-12);
        assert!(t.value(terms.giou).item().abs() < 1e-12);
        assert!(t.value(terms.hoi).item() < 1e-4);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let mut t = Tape::new();
        let h = t.scalar(1.25);
        let d = t.scalar(3.0);
        let total = total_loss(&mut t, h, d, 0.0).unwrap();
        assert_eq!(t.value(total).item().to_bits(), 1.25f64.to_bits());
    }
}
