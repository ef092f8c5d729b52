//! Intersection-over-union and its class-wise aggregation.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::codec::BinaryMask;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "fold,class_id,n_shot,iou_accumulated,episodes";

/// `(|pred ∧ gt|, |pred ∨ gt|)`.
pub fn counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    Ok(pred.data.iter().zip(&gt.data).fold((0, 0), |(i, u), (&p, &g)| {
        (i + (p && g) as usize, u + (p || g) as usize)
    }))
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of two masks; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = counts(pred, gt)?;
    Ok(ratio(i, u))
}

/// Mean over classes of the IoU of summed intersections and unions.
pub fn miou(results: &[(usize, usize, usize)]) -> Result<f64> {
    let mut acc = IouAccumulator::default();
    for &(class, i, u) in results {
        acc.add_counts(class, i, u);
    }
    acc.miou()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassStats {
    pub intersection: usize,
    pub union: usize,
    pub episodes: usize,
    /// Sum of per-episode IoUs, for the episode-averaged variant.
    pub iou_sum: f64,
}

impl ClassStats {
    pub fn iou(&self) -> f64 {
        ratio(self.intersection, self.union)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    pub classes: BTreeMap<usize, ClassStats>,
}

impl IouAccumulator {
    /// Records one episode and returns its IoU.
    pub fn add(&mut self, class: usize, pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
        let (i, u) = counts(pred, gt)?;
        self.add_counts(class, i, u);
        Ok(ratio(i, u))
    }

    pub fn add_counts(&mut self, class: usize, intersection: usize, union: usize) {
        let s = self.classes.entry(class).or_default();
        s.intersection += intersection;
        s.union += union;
        s.episodes += 1;
        s.iou_sum += ratio(intersection, union);
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&c, o) in &other.classes {
            let s = self.classes.entry(c).or_default();
            s.intersection += o.intersection;
            s.union += o.union;
            s.episodes += o.episodes;
            s.iou_sum += o.iou_sum;
        }
    }

    pub fn episodes(&self) -> usize {
        self.classes.values().map(|s| s.episodes).sum()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.classes.is_empty() {
            return Err(Error::Empty("no episodes to aggregate".into()));
        }
        Ok(self.classes.values().map(ClassStats::iou).sum::<f64>() / self.classes.len() as f64)
    }

    /// Class mean of per-episode IoU averages.
    pub fn episode_miou(&self) -> Result<f64> {
        if self.classes.is_empty() {
            return Err(Error::Empty("no episodes to aggregate".into()));
        }
        let per: f64 = self.classes.values().map(|s| s.iou_sum / s.episodes as f64).sum();
        Ok(per / self.classes.len() as f64)
    }

    /// One row per class plus a summary row whose class column reads `all`.
    pub fn to_csv(&self, fold: usize, n_shot: usize) -> Result<String> {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (c, s) in &self.classes {
            writeln!(out, "{fold},{c},{n_shot},{:.6},{}", s.iou(), s.episodes).expect("write to string");
        }
        writeln!(out, "{fold},all,{n_shot},{:.6},{}", self.miou()?, self.episodes()).expect("write to string");
        Ok(out)
    }
}
