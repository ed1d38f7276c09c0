//! Axis-aligned boxes in normalized `(cx, cy, w, h)` form.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::numcore::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_normalized(self) -> bool {
        let c = self.corners();
        self.w >= 0.0 && self.h >= 0.0 && c.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v))
    }

    pub fn l1(self, other: BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn intersection(a: BBox, b: BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let w = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let h = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    w * h
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let (ca, cb) = (a.corners(), b.corners());
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// Differentiable GIoU between matching rows of two `n x 4` box tensors;
/// returns `n x 1`. Boxes must have positive area.
pub fn giou_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sa[1] != 4 || sa != sb {
        return Err(contract_err!("giou needs two n x 4 tensors, got {:?} and {:?}", sa, sb));
    }
    let corners = |tape: &mut Tape, x: Var| -> Result<[Var; 3]> {
        let c = tape.slice(x, 1, 0, 2)?;
        let wh = tape.slice(x, 1, 2, 2)?;
        let half = tape.scale(wh, 0.5);
        let lo = tape.sub(c, half)?;
        let hi = tape.add(c, half)?;
        let w = tape.slice(wh, 1, 0, 1)?;
        let h = tape.slice(wh, 1, 1, 1)?;
        let area = tape.mul(w, h)?;
        Ok([lo, hi, area])
    };
    let [lo_a, hi_a, area_a] = corners(tape, a)?;
    let [lo_b, hi_b, area_b] = corners(tape, b)?;

    let ilo = tape.maximum(lo_a, lo_b)?;
    let ihi = tape.minimum(hi_a, hi_b)?;
    let iwh = tape.sub(ihi, ilo)?;
    let iwh = tape.clamp_min(iwh, 0.0);
    let iw = tape.slice(iwh, 1, 0, 1)?;
    let ih = tape.slice(iwh, 1, 1, 1)?;
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let hlo = tape.minimum(lo_a, lo_b)?;
    let hhi = tape.maximum(hi_a, hi_b)?;
    let hwh = tape.sub(hhi, hlo)?;
    let hw = tape.slice(hwh, 1, 0, 1)?;
    let hh = tape.slice(hwh, 1, 1, 1)?;
    let hull = tape.mul(hw, hh)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}
