//! Intersection/union accumulators for mIoU and FB-IoU.

use std::collections::BTreeMap;

use crate::error::{FssError, Result};
use crate::mask::Mask;

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Counts for the foreground (`true`) or background (`false`) of two masks.
fn counts(pred: &Mask, gt: &Mask, fg: bool) -> IouCounts {
    let want = u8::from(fg);
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.as_bytes().iter().zip(gt.as_bytes()) {
        let (a, b) = (p == want, g == want);
        i += u64::from(a && b);
        u += u64::from(a || b);
    }
    IouCounts { intersection: i, union: u }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FoldMetrics {
    pub per_class: BTreeMap<u32, IouCounts>,
    pub foreground: IouCounts,
    pub background: IouCounts,
}

impl FoldMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, class_id: u32, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(FssError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        let fg = counts(pred, gt, true);
        self.per_class.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background.add(counts(pred, gt, false));
        Ok(())
    }

    pub fn merge(&mut self, other: &FoldMetrics) {
        for (&c, &v) in &other.per_class {
            self.per_class.entry(c).or_default().add(v);
        }
        self.foreground.add(other.foreground);
        self.background.add(other.background);
    }

    pub fn merged(mut self, other: &FoldMetrics) -> Self {
        self.merge(other);
        self
    }

    /// IoU per class; classes with zero union are left out.
    pub fn class_iou(&self) -> BTreeMap<u32, f64> {
        let mut out = BTreeMap::new();
        for (&c, v) in &self.per_class {
            match v.iou() {
                Some(iou) => {
                    out.insert(c, iou);
                }
                None => log::warn!("class {c} has zero union and is excluded from mIoU"),
            }
        }
        out
    }

    pub fn miou(&self) -> f64 {
        let ious = self.class_iou();
        if ious.is_empty() {
            return 0.0;
        }
        ious.values().sum::<f64>() / ious.len() as f64
    }

    /// Mean of pooled foreground and background IoU.
    pub fn fbiou(&self) -> f64 {
        let parts: Vec<f64> = [self.foreground.iou(), self.background.iou()].into_iter().flatten().collect();
        if parts.is_empty() {
            return 0.0;
        }
        parts.iter().sum::<f64>() / parts.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_half() {
        let gt = Mask::from_fn(2, 2, |_, _| true);
        let mut m = FoldMetrics::new();
        m.accumulate(3, &gt, &gt).unwrap();
        assert_eq!(m.miou(), 1.0);
        assert_eq!(m.fbiou(), 1.0);

        let pred = Mask::from_fn(2, 2, |y, _| y == 0);
        let mut m = FoldMetrics::new();
        m.accumulate(1, &pred, &gt).unwrap();
        assert_eq!(m.class_iou()[&1], 0.5);
        assert!(m.accumulate(1, &Mask::zeros(3, 3), &gt).is_err());
    }
}
