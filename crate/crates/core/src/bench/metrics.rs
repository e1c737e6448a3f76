use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(invalid("confusion matrix must be square"));
        }
        Ok(Self {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds pixel pairs; truth values `>= num_classes` (the ignore label)
    /// are skipped.
    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} truth pixels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.num_classes {
                continue;
            }
            if p >= self.num_classes {
                return Err(invalid(format!("predicted class {p} out of range")));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU (`None` for classes absent from both truth and prediction)
/// and their mean.
pub fn miou(confusion: &Confusion) -> Result<(Vec<Option<f64>>, f64)> {
    if confusion.total() == 0 {
        return Err(Error::Undefined("mIoU of an empty confusion matrix".into()));
    }
    let c = confusion.num_classes();
    let mut ious = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion.get(k, k);
        let fn_: u64 = (0..c).map(|p| confusion.get(k, p)).sum::<u64>() - tp;
        let fp: u64 = (0..c).map(|t| confusion.get(t, k)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        ious.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((ious, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: Confusion,
    pub latency_ms: f64,
    pub fps: f64,
    pub input_size: [usize; 2],
}

impl EvalReport {
    pub fn new(confusion: Confusion, latency_ms: f64, input_size: [usize; 2]) -> Result<Self> {
        let (per_class_iou, miou) = miou(&confusion)?;
        Ok(Self {
            per_class_iou,
            miou,
            confusion,
            latency_ms,
            fps: fps_from_ms(latency_ms),
            input_size,
        })
    }
}

pub fn fps_from_ms(latency_ms: f64) -> f64 {
    1000.0 / latency_ms
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal() {
        let c = Confusion::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!(miou(&c).unwrap().1, 1.0);
    }

    #[test]
    fn constant_prediction_half_split() {
        let mut c = Confusion::new(2);
        c.accumulate(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let (ious, m) = miou(&c).unwrap();
        assert_eq!(ious, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m, 0.25);
    }

    #[test]
    fn empty_is_undefined() {
        assert!(matches!(miou(&Confusion::new(3)), Err(Error::Undefined(_))));
    }

    #[test]
    fn ignore_pixels_skipped() {
        let mut c = Confusion::new(3);
        c.accumulate(&[0, 255, 2, 255], &[0, 1, 2, 2]).unwrap();
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn absent_class_excluded() {
        let mut c = Confusion::new(3);
        c.accumulate(&[0, 1], &[0, 1]).unwrap();
        let (ious, m) = miou(&c).unwrap();
        assert_eq!(ious[2], None);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn fps_definition() {
        let r = EvalReport::new(Confusion::from_rows(&[vec![1]]).unwrap(), 3.7, [32, 32]).unwrap();
        assert!((r.fps * r.latency_ms - 1000.0).abs() < 1e-9);
    }
}
