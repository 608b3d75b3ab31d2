//! Voxel and classification metrics. Occupancy is thresholded at 0.5.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::shapes::THRESHOLD;
use crate::tensor::{Real, Tensor};

fn check<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `(|a∧b|, |a|, |b|)` at the occupancy threshold.
fn overlap<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> (usize, usize, usize) {
    let t = R::lit(THRESHOLD as f64);
    a.data().iter().zip(b.data()).fold((0, 0, 0), |(i, na, nb), (&x, &y)| {
        let (x, y) = (x > t, y > t);
        (i + usize::from(x && y), na + usize::from(x), nb + usize::from(y))
    })
}

/// `|p∧t| / |p∨t|`, with two empty sets scoring 1.
pub fn iou<R: Real>(pred: &Tensor<R>, target: &Tensor<R>) -> Result<f64> {
    check("iou", pred, target)?;
    let (i, p, t) = overlap(pred, target);
    let u = p + t - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Harmonic mean of voxel precision and recall, with two empty sets scoring 1.
pub fn f_score<R: Real>(pred: &Tensor<R>, target: &Tensor<R>) -> Result<f64> {
    check("f_score", pred, target)?;
    let (i, p, t) = overlap(pred, target);
    Ok(if p + t == 0 { 1.0 } else { 2.0 * i as f64 / (p + t) as f64 })
}

/// Occupied voxel centers of a `C×Dx×Dy×Dz` volume (any channel).
pub fn occupied_points<R: Real>(v: &Tensor<R>) -> Vec<[f64; 3]> {
    let s = v.shape();
    let t = R::lit(THRESHOLD as f64);
    let n = s[1] * s[2] * s[3];
    let mut out = Vec::new();
    for idx in 0..n {
        if (0..s[0]).any(|c| v.data()[c * n + idx] > t) {
            let (x, r) = (idx / (s[2] * s[3]), idx % (s[2] * s[3]));
            out.push([x as f64, (r / s[3]) as f64, (r % s[3]) as f64]);
        }
    }
    out
}

fn mean_nearest(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let nearest = |p: &[f64; 3]| {
        b.iter()
            .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
            .fold(f64::INFINITY, f64::min)
    };
    #[cfg(feature = "parallel")]
    let total: f64 = {
        use rayon::prelude::*;
        a.par_iter().map(nearest).collect::<Vec<_>>().iter().sum()
    };
    #[cfg(not(feature = "parallel"))]
    let total: f64 = a.iter().map(nearest).sum();
    total / a.len() as f64
}

/// Symmetric Chamfer distance: the average of the two directed mean squared
/// nearest-neighbour distances between occupied voxel centers, in squared
/// voxel lengths. Brute force.
pub fn chamfer_l2<R: Real>(pred: &Tensor<R>, target: &Tensor<R>) -> Result<f64> {
    check("chamfer_l2", pred, target)?;
    let (a, b) = (occupied_points(pred), occupied_points(target));
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer_l2", "undefined when either volume is empty"));
    }
    Ok(0.5 * (mean_nearest(&a, &b) + mean_nearest(&b, &a)))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::invalid("accuracy", format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Unweighted mean over classes of the per-class F1; classes absent from
/// both predictions and labels are skipped.
pub fn macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    accuracy(pred, labels)?;
    let mut scores = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let np = pred.iter().filter(|&&p| p == c).count();
        let nl = labels.iter().filter(|&&l| l == c).count();
        if np + nl > 0 {
            scores.push(2.0 * tp as f64 / (np + nl) as f64);
        }
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<R: Real>(logits: &[R]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, R::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Aggregate scores over a split. Dense-task fields are means over samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub f_score: Option<f64>,
    pub iou: Option<f64>,
    pub chamfer_l2: Option<f64>,
    pub loss: Option<f64>,
}

impl MetricSet {
    /// `(name, value)` for each metric present, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("loss", self.loss),
            ("accuracy", self.accuracy),
            ("f_score", self.f_score),
            ("iou", self.iou),
            ("chamfer_l2", self.chamfer_l2),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
    }
}

/// Mean IoU, F-score and Chamfer over paired volumes. Pairs where Chamfer is
/// undefined (an empty side) are left out of the Chamfer mean.
pub fn completion_metrics<R: Real>(pairs: &[(Tensor<R>, Tensor<R>)]) -> Result<MetricSet> {
    if pairs.is_empty() {
        return Err(Error::invalid("completion_metrics", "no samples"));
    }
    let (mut iou_sum, mut f_sum, mut ch_sum, mut ch_n) = (0.0, 0.0, 0.0, 0usize);
    for (p, t) in pairs {
        iou_sum += iou(p, t)?;
        f_sum += f_score(p, t)?;
        if let Ok(c) = chamfer_l2(p, t) {
            ch_sum += c;
            ch_n += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok(MetricSet {
        iou: Some(iou_sum / n),
        f_score: Some(f_sum / n),
        chamfer_l2: (ch_n > 0).then(|| ch_sum / ch_n as f64),
        ..MetricSet::default()
    })
}

pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<MetricSet> {
    Ok(MetricSet {
        accuracy: Some(accuracy(pred, labels)?),
        f_score: Some(macro_f1(pred, labels, classes)?),
        ..MetricSet::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: &[[usize; 3]], d: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[1, d, d, d]);
        for p in points {
            t.set(&[0, p[0], p[1], p[2]], 1.0);
        }
        t
    }

    #[test]
    fn identical_disjoint_and_two_point_cases() {
        let a = grid(&[[0, 0, 0], [1, 2, 3]], 4);
        assert_eq!((iou(&a, &a).unwrap(), f_score(&a, &a).unwrap(), chamfer_l2(&a, &a).unwrap()), (1.0, 1.0, 0.0));
        let b = grid(&[[3, 3, 3]], 4);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(f_score(&a, &b).unwrap(), 0.0);
        let p = grid(&[[0, 0, 0]], 4);
        let t = grid(&[[1, 0, 0]], 4);
        assert_eq!(chamfer_l2(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn empty_cases() {
        let e = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(f_score(&e, &e).unwrap(), 1.0);
        assert!(chamfer_l2(&e, &e).is_err());
        assert!(chamfer_l2(&e, &grid(&[[0, 0, 0]], 3)).is_err());
        assert!(iou(&e, &Tensor::zeros(&[1, 3, 3, 4])).is_err());
    }

    #[test]
    fn classification_scores() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
        // Class 1: tp 1, 1 predicted, 2 true → 2/3. Class 2: tp 1, 2 predicted, 1 true → 2/3.
        let f = macro_f1(&[0, 1, 2, 2], &[0, 1, 1, 2], 3).unwrap();
        assert!((f - (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!(accuracy(&[0], &[]).is_err());
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7, -1.0]), 1);
    }
}
