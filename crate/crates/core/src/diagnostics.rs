//! Segmentation and depth metrics, and the inter-channel correlation
//! statistic used to inspect decoder features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `C×C` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Metric("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix { classes, counts: vec![0; classes * classes] })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Number of valid pixels seen so far.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds aligned label maps. Pixels whose ground truth is `ignore` are
    /// skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c || p >= c {
                return Err(Error::Metric(format!("label {} out of range for {c} classes", g.max(p))));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metric("cannot merge confusion matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP/(TP+FP+FN)` per class; `None` for classes absent from both ground
    /// truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let gt: u64 = (0..c).map(|p| self.count(k, p)).sum();
                let pred: u64 = (0..c).map(|g| self.count(g, k)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur in ground truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Metric("no valid pixels".into()));
        }
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Result<SegmentationScores> {
    let mut cm = ConfusionMatrix::new(classes)?;
    cm.accumulate(pred, gt, ignore)?;
    Ok(SegmentationScores { miou: cm.miou()?, per_class: cm.iou() })
}

/// Standard monocular depth errors and δ-accuracies (`δ < 1.25^k`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub sqrel: f64,
    pub rmse: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

/// Running sums behind [`DepthMetrics`], mergeable across batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    n: u64,
    absrel: f64,
    sqrel: f64,
    sq: f64,
    within: [u64; 3],
}

impl DepthAccumulator {
    /// Adds aligned maps. With no mask every pixel counts; ground truth must
    /// be positive on counted pixels.
    pub fn add<T: Real>(&mut self, pred: &[T], gt: &[T], valid: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
            return Err(Error::Shape("depth maps and mask must be aligned".into()));
        }
        for i in 0..gt.len() {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            let (p, g) = (pred[i].as_f64(), gt[i].as_f64());
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::Metric(format!("ground-truth depth {g} at pixel {i} is not positive")));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("predicted depth"));
            }
            let d = p - g;
            self.n += 1;
            self.absrel += d.abs() / g;
            self.sqrel += d * d / g;
            self.sq += d * d;
            let ratio = if p > 0.0 { (p / g).max(g / p) } else { f64::INFINITY };
            let mut t = 1.0;
            for k in 0..3 {
                t *= 1.25;
                if ratio < t {
                    self.within[k] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.n += other.n;
        self.absrel += other.absrel;
        self.sqrel += other.sqrel;
        self.sq += other.sq;
        for k in 0..3 {
            self.within[k] += other.within[k];
        }
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(Error::Metric("empty depth mask".into()));
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            absrel: self.absrel / n,
            sqrel: self.sqrel / n,
            rmse: Float::sqrt(self.sq / n),
            a1: self.within[0] as f64 / n,
            a2: self.within[1] as f64 / n,
            a3: self.within[2] as f64 / n,
        })
    }
}

pub fn depth_metrics<T: Real>(pred: &[T], gt: &[T], valid: Option<&[bool]>) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, valid)?;
    acc.finish()
}

/// Mean over batch items and ordered channel pairs `(c, i)`, `i ≠ c`, of the
/// entrywise L1 norm of `X_c X_iᵀ`, where `X_c` is channel `c` as an `H×W`
/// matrix.
pub fn inter_channel_correlation<T: Real>(layer: &Tensor<T>) -> Result<f64> {
    let [n, c, h, w] = layer.shape().nchw()?;
    if c < 2 {
        return Err(Error::Metric(format!("inter-channel correlation needs 2+ channels, got {c}")));
    }
    let x: Vec<f64> = layer.data().iter().map(|v| v.as_f64()).collect();
    let hw = h * w;
    let mut total = 0.0;
    for b in 0..n {
        let base = b * c * hw;
        for ci in 0..c {
            let xc = &x[base + ci * hw..base + (ci + 1) * hw];
            for ii in 0..c {
                if ii == ci {
                    continue;
                }
                let xi = &x[base + ii * hw..base + (ii + 1) * hw];
                for r in 0..h {
                    let row = &xc[r * w..(r + 1) * w];
                    for s in 0..h {
                        let dot: f64 = row.iter().zip(&xi[s * w..(s + 1) * w]).map(|(p, q)| p * q).sum();
                        total += dot.abs();
                    }
                }
            }
        }
    }
    Ok(total / (n * c * (c - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform};
    use proptest::prelude::*;

    #[test]
    fn miou_examples() {
        let s = miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, 255).unwrap();
        assert_eq!(s.miou, 1.0);
        assert!(s.per_class.iter().all(|v| *v == Some(1.0)));

        let s = miou(&[0; 4], &[1; 4], 3, 255).unwrap();
        assert_eq!(s.miou, 0.0);
        assert_eq!(s.per_class, vec![Some(0.0), Some(0.0), None]);

        // class 1: gt {0,1}, pred {1,2}: TP 1, FP 1, FN 1
        let s = miou(&[0, 1, 1, 0], &[1, 1, 0, 0], 2, 255).unwrap();
        assert!((s.per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ignored_pixels_and_errors() {
        let s = miou(&[1, 0], &[255, 0], 2, 255).unwrap();
        assert_eq!(s.miou, 1.0);
        assert!(miou(&[0], &[255], 2, 255).is_err());
        assert!(miou(&[0, 0], &[0], 2, 255).is_err());
        assert!(miou(&[3], &[0], 2, 255).is_err());
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let (p1, g1) = ([0u8, 1, 2, 2], [0u8, 2, 2, 1]);
        let (p2, g2) = ([1u8, 1, 0], [1u8, 0, 0]);
        let mut a = ConfusionMatrix::new(3).unwrap();
        a.accumulate(&p1, &g1, 255).unwrap();
        let mut b = ConfusionMatrix::new(3).unwrap();
        b.accumulate(&p2, &g2, 255).unwrap();
        let mut joint = ConfusionMatrix::new(3).unwrap();
        joint.accumulate(&[p1.as_slice(), &p2].concat(), &[g1.as_slice(), &g2].concat(), 255).unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        b.merge(&a).unwrap();
        assert_eq!(ab, joint);
        assert_eq!(b, joint);
        assert_eq!(joint.total(), 7);
    }

    #[test]
    fn depth_examples() {
        let gt = [1.0, 2.0, 4.0, 8.0];
        let m = depth_metrics::<f64>(&gt, &gt, None).unwrap();
        assert_eq!((m.absrel, m.sqrel, m.rmse, m.a1, m.a2, m.a3), (0.0, 0.0, 0.0, 1.0, 1.0, 1.0));

        let p2: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        let m = depth_metrics(&p2, &gt, None).unwrap();
        assert_eq!(m.absrel, 1.0);
        assert_eq!((m.a1, m.a2, m.a3), (0.0, 0.0, 0.0));

        let p12: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        assert_eq!(depth_metrics(&p12, &gt, None).unwrap().a1, 1.0);

        // hand values: errors 1 and -1 against gt 1 and 2
        let m = depth_metrics::<f64>(&[2.0, 1.0, 9.0], &[1.0, 2.0, 0.0], Some(&[true, true, false])).unwrap();
        assert!((m.absrel - 0.75).abs() < 1e-15);
        assert!((m.sqrel - 0.75).abs() < 1e-15);
        assert!((m.rmse - 1.0).abs() < 1e-15);
        assert_eq!(m.a3, 0.0);
    }

    #[test]
    fn depth_errors() {
        assert!(depth_metrics::<f64>(&[1.0], &[1.0], Some(&[false])).is_err());
        assert!(depth_metrics::<f64>(&[1.0], &[0.0], None).is_err());
        assert!(depth_metrics::<f64>(&[1.0, 2.0], &[1.0], None).is_err());
    }

    fn icc_oracle(x: &Tensor<f64>) -> f64 {
        let [n, c, h, w] = x.shape().nchw().unwrap();
        let mut s = 0.0;
        for b in 0..n {
            for ci in 0..c {
                for ii in 0..c {
                    if ii == ci {
                        continue;
                    }
                    for r in 0..h {
                        for q in 0..h {
                            let mut e = 0.0;
                            for k in 0..w {
                                e += x.at(&[b, ci, r, k]) * x.at(&[b, ii, q, k]);
                            }
                            s += e.abs();
                        }
                    }
                }
            }
        }
        s / (n * c * (c - 1)) as f64
    }

    #[test]
    fn icc_examples() {
        let ones = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0).unwrap();
        assert_eq!(inter_channel_correlation(&ones).unwrap(), 8.0);

        // left column vs right column: every row product is zero
        let disjoint = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(inter_channel_correlation(&disjoint).unwrap(), 0.0);

        for seed in 0..5 {
            let x: Tensor<f64> = uniform(&mut rng(seed), &[2, 3, 4, 5], -1.0, 1.0);
            assert!((inter_channel_correlation(&x).unwrap() - icc_oracle(&x)).abs() < 1e-6);
        }
        assert!(inter_channel_correlation(&Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap()).is_err());
    }

    /// `|⟨x_r, y_s⟩| ≤ ‖x_r‖‖y_s‖`, so the statistic is bounded by products of
    /// row norms, with equality for identical rank-one non-negative channels.
    fn row_norm_bound(x: &Tensor<f64>) -> f64 {
        let [n, c, h, w] = x.shape().nchw().unwrap();
        let mut s = 0.0;
        for b in 0..n {
            let sums: Vec<f64> = (0..c)
                .map(|ci| (0..h).map(|r| Float::sqrt((0..w).map(|k| x.at(&[b, ci, r, k]).powi(2)).sum::<f64>())).sum())
                .collect();
            for ci in 0..c {
                for ii in 0..c {
                    if ii != ci {
                        s += sums[ci] * sums[ii];
                    }
                }
            }
        }
        s / (n * c * (c - 1)) as f64
    }

    #[test]
    fn replicated_rank_one_channels_attain_the_bound() {
        let u = [0.5, 1.0, 2.0];
        let v = [1.0, 3.0];
        let x = Tensor::<f64>::from_fn(&[1, 3, 3, 2], |i| {
            let r = (i / 2) % 3;
            u[r] * v[i % 2]
        })
        .unwrap();
        let icc = inter_channel_correlation(&x).unwrap();
        assert!((icc - row_norm_bound(&x)).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn miou_invariant_under_relabeling(seed in 0u64..5000, shift in 1u8..4) {
            use rand::Rng as _;
            let mut r = rng(seed);
            let gt: Vec<u8> = (0..40).map(|_| r.gen_range(0..4)).collect();
            let pred: Vec<u8> = (0..40).map(|_| r.gen_range(0..4)).collect();
            let perm = |v: &[u8]| -> Vec<u8> { v.iter().map(|x| (x + shift) % 4).collect() };
            let a = miou(&pred, &gt, 4, 255).unwrap().miou;
            let b = miou(&perm(&pred), &perm(&gt), 4, 255).unwrap().miou;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn depth_absrel_is_scale_invariant_and_deltas_ordered(seed in 0u64..5000, k in 0.1f64..10.0) {
            let mut r = rng(seed);
            let gt: Tensor<f64> = uniform(&mut r, &[30], 0.5, 20.0);
            let pred: Tensor<f64> = uniform(&mut r, &[30], 0.5, 20.0);
            let m = depth_metrics(pred.data(), gt.data(), None).unwrap();
            let sg: Vec<f64> = gt.data().iter().map(|v| v * k).collect();
            let sp: Vec<f64> = pred.data().iter().map(|v| v * k).collect();
            let ms = depth_metrics(&sp, &sg, None).unwrap();
            prop_assert!((m.absrel - ms.absrel).abs() < 1e-9 * (1.0 + m.absrel));
            prop_assert!(m.a1 <= m.a2 && m.a2 <= m.a3);
        }

        #[test]
        fn icc_within_row_norm_bound(seed in 0u64..5000) {
            let x: Tensor<f64> = uniform(&mut rng(seed), &[1, 3, 3, 4], -1.0, 1.0);
            prop_assert!(inter_channel_correlation(&x).unwrap() <= row_norm_bound(&x) + 1e-12);
        }
    }
}
