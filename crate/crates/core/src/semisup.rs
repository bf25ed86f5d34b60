//! Mean-teacher pieces: EMA teacher weights, argmax pseudo-labels and the
//! two-term semi-supervised segmentation loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamStore, Role};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Teacher weights for a student [`ParamStore`].
///
/// The teacher mirrors every student parameter. Parameters whose role is in
/// `averaged` follow the exponential moving average; the rest are copied from
/// the student on each update so the teacher stays a runnable model.
#[derive(Clone, Debug)]
pub struct TeacherState<T> {
    pub params: ParamStore<T>,
    alpha: T,
    averaged: Vec<Role>,
}

impl<T: Real> TeacherState<T> {
    /// Teacher starting as an exact copy of `student`.
    pub fn new(student: &ParamStore<T>, alpha: f64, averaged: Vec<Role>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA alpha {alpha} outside [0,1]")));
        }
        Ok(TeacherState { params: student.clone(), alpha: T::from_f64(alpha), averaged })
    }

    /// Encoder, segmentation decoder and feature-share block averaged; the
    /// depth decoder is copied.
    pub fn for_segmentation(student: &ParamStore<T>, alpha: f64) -> Result<Self> {
        Self::new(student, alpha, alloc::vec![Role::SharedEncoder, Role::SegmentationDecoder, Role::Ccam, Role::Other])
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn averaged_roles(&self) -> &[Role] {
        &self.averaged
    }
}

/// `θ_T ← α θ_T + (1 − α) θ` for averaged roles, `θ_T ← θ` otherwise.
pub fn ema_update<T: Real>(teacher: &mut TeacherState<T>, student: &ParamStore<T>) -> Result<()> {
    if teacher.params.len() != student.len() {
        return Err(Error::State("teacher and student have different parameter lists".into()));
    }
    let a = teacher.alpha;
    let b = T::one() - a;
    for ((_, t), (_, s)) in teacher.params.iter_mut().zip(student.iter()) {
        if t.name != s.name || t.value.dims() != s.value.dims() {
            return Err(Error::State(format!("teacher parameter '{}' does not mirror student '{}'", t.name, s.name)));
        }
        let avg = teacher.averaged.contains(&t.role);
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = if avg { a * *tv + b * sv } else { sv };
        }
    }
    Ok(())
}

/// Label map predicted for one unlabeled image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// Batch index of the source image.
    pub source: usize,
}

/// Per-pixel argmax of `N×C×H×W` logits, ties going to the lowest class.
pub fn pseudo_labels<T: Real>(logits: &Tensor<T>) -> Result<Vec<PseudoLabel>> {
    let [n, c, h, w] = logits.shape().nchw()?;
    if c == 0 || c > 255 {
        return Err(Error::Input(format!("cannot label {c} classes")));
    }
    logits.check_finite("pseudo-label logits")?;
    let hw = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(b * c + ch) * hw + p] > d[(b * c + best) * hw + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            PseudoLabel { labels, height: h, width: w, source: b }
        })
        .collect())
}

pub struct SslLoss {
    pub loss: Var,
    pub supervised: f64,
    pub unlabeled: f64,
    /// Set when a term had no valid pixels and contributed 0.
    pub supervised_empty: bool,
    pub unlabeled_empty: bool,
}

/// `CE(student(I_L), S_L) + CE(student(I_U), S_U)`.
///
/// `unlabeled` is `None` for an empty unlabeled batch. Both terms are means
/// over non-ignored pixels.
pub fn ssl_loss<T: Real>(
    tape: &mut Tape<T>,
    labeled: (Var, &[u8]),
    unlabeled: Option<(Var, &[u8])>,
    ignore: u8,
) -> Result<SslLoss> {
    let sup = tape.cross_entropy(labeled.0, labeled.1, ignore)?;
    let supervised_empty = labeled.1.iter().all(|&l| l == ignore);
    let supervised = tape.value(sup).item()?.as_f64();
    let (loss, unl, unlabeled_empty) = match unlabeled {
        Some((logits, labels)) => {
            let u = tape.cross_entropy(logits, labels, ignore)?;
            let v = tape.value(u).item()?.as_f64();
            (tape.add(sup, u)?, v, labels.iter().all(|&l| l == ignore))
        }
        None => (sup, 0.0, true),
    };
    Ok(SslLoss { loss, supervised, unlabeled: unl, supervised_empty, unlabeled_empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform};
    use crate::IGNORE_INDEX;
    use alloc::vec;
    use num_traits::Float;
    use proptest::prelude::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("enc", Role::SharedEncoder, Tensor::full(&[2], v).unwrap()).unwrap();
        s.add("dep", Role::DepthDecoder, Tensor::full(&[1], v).unwrap()).unwrap();
        s
    }

    #[test]
    fn ema_examples() {
        let student = store(0.0);
        for (alpha, want) in [(1.0, 1.0), (0.0, 0.0), (0.99, 0.99)] {
            let mut t = TeacherState::new(&store(1.0), alpha, vec![Role::SharedEncoder]).unwrap();
            ema_update(&mut t, &student).unwrap();
            assert_eq!(t.params.get(crate::ParamId(0)).value.data(), &[want, want]);
            // uncovered roles track the student exactly
            assert_eq!(t.params.get(crate::ParamId(1)).value.data(), &[0.0]);
        }
        assert!(TeacherState::new(&student, 1.5, vec![]).is_err());
    }

    #[test]
    fn ema_rejects_mismatched_students() {
        let mut t = TeacherState::for_segmentation(&store(1.0), 0.5).unwrap();
        let mut other = ParamStore::new();
        other.add("enc", Role::SharedEncoder, Tensor::full(&[3], 0.0).unwrap()).unwrap();
        other.add("dep", Role::DepthDecoder, Tensor::full(&[1], 0.0).unwrap()).unwrap();
        assert!(matches!(ema_update(&mut t, &other), Err(Error::State(_))));
        assert!(ema_update(&mut t, &ParamStore::new()).is_err());
    }

    fn scan_oracle(logits: &Tensor<f64>) -> Vec<u8> {
        let [n, c, h, w] = logits.shape().nchw().unwrap();
        let mut out = Vec::new();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let vals: Vec<f64> = (0..c).map(|ch| logits.at(&[b, ch, y, x])).collect();
                    let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    out.push(vals.iter().position(|&v| v == mx).unwrap() as u8);
                }
            }
        }
        out
    }

    #[test]
    fn pseudo_label_examples() {
        let logits = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| if i / 4 == 2 { 5.0 } else { 1.0 }).unwrap();
        assert_eq!(pseudo_labels(&logits).unwrap()[0].labels, vec![2; 4]);

        // quantized logits produce many ties
        let mut r = rng(3);
        let q = uniform::<f64>(&mut r, &[2, 4, 3, 3], 0.0, 3.0);
        let q = Tensor::from_fn(&[2, 4, 3, 3], |i| Float::floor(q.data()[i])).unwrap();
        let got: Vec<u8> = pseudo_labels(&q).unwrap().into_iter().flat_map(|p| p.labels).collect();
        assert_eq!(got, scan_oracle(&q));
    }

    #[test]
    fn ssl_loss_examples() {
        // 1×2×1×2 logits, labels [0, 1]
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_f64(&[1, 2, 1, 2], &[2.0, 0.0, 1.0, 3.0]).unwrap());
        let u = tape.leaf(Tensor::from_f64(&[1, 2, 1, 2], &[0.0, 1.0, 0.0, -1.0]).unwrap());
        let out = ssl_loss(&mut tape, (l, &[0, 1]), Some((u, &[1, IGNORE_INDEX])), IGNORE_INDEX).unwrap();
        let ce = |z: &[f64], k: usize| -> f64 { -(z[k].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln() };
        let sup = (ce(&[2.0, 1.0], 0) + ce(&[0.0, 3.0], 1)) / 2.0;
        let unl = ce(&[0.0, 0.0], 1);
        assert!((tape.value(out.loss).item().unwrap() - (sup + unl)).abs() < 1e-12);
        assert!((out.supervised - sup).abs() < 1e-12 && (out.unlabeled - unl).abs() < 1e-12);
        assert!(!out.unlabeled_empty);

        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[0.0, 1.0]).unwrap());
        let alone = ssl_loss(&mut tape, (l, &[1]), None, IGNORE_INDEX).unwrap();
        assert_eq!(tape.value(alone.loss).item().unwrap(), alone.supervised);
        let u = tape.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[0.0, 9.0]).unwrap());
        let ignored = ssl_loss(&mut tape, (l, &[1]), Some((u, &[IGNORE_INDEX])), IGNORE_INDEX).unwrap();
        assert!(ignored.unlabeled_empty && ignored.unlabeled == 0.0);
        assert_eq!(tape.value(ignored.loss).item().unwrap(), alone.supervised);
    }

    #[test]
    fn perfect_student_has_near_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_f64(&[1, 2, 1, 2], &[40.0, -40.0, -40.0, 40.0]).unwrap());
        let out = ssl_loss(&mut tape, (l, &[0, 1]), Some((l, &[0, 1])), IGNORE_INDEX).unwrap();
        assert!(tape.value(out.loss).item().unwrap() < 1e-30);
    }

    #[test]
    fn teacher_forward_on_constants_records_no_gradient() {
        let s = store(0.5);
        let t = TeacherState::for_segmentation(&s, 0.99).unwrap();
        let mut tape = Tape::<f64>::new();
        let bind = t.params.bind(&mut tape, |_| true);
        let x = tape.mul(bind.var(crate::ParamId(0)), bind.var(crate::ParamId(0))).unwrap();
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(bind.var(crate::ParamId(0))).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ema_is_a_contraction(seed in 0u64..5000, alpha in 0.0f64..=1.0) {
            let mut r = rng(seed);
            let mut t_store = ParamStore::new();
            t_store.add("w", Role::SegmentationDecoder, uniform::<f64>(&mut r, &[6], -3.0, 3.0)).unwrap();
            let mut s_store = ParamStore::new();
            s_store.add("w", Role::SegmentationDecoder, uniform::<f64>(&mut r, &[6], -3.0, 3.0)).unwrap();
            let mut t = TeacherState::for_segmentation(&t_store, alpha).unwrap();
            ema_update(&mut t, &s_store).unwrap();
            let before = t_store.get(crate::ParamId(0)).value.data();
            let after = t.params.get(crate::ParamId(0)).value.data();
            let s = s_store.get(crate::ParamId(0)).value.data();
            for i in 0..6 {
                prop_assert!(((after[i] - s[i]).abs() - alpha * (before[i] - s[i]).abs()).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_under_uniform_monotone_maps(seed in 0u64..5000, shift in -5.0f64..5.0, k in 0.1f64..4.0) {
            let z: Tensor<f64> = uniform(&mut rng(seed), &[2, 5, 3, 3], -2.0, 2.0);
            let m = Tensor::from_fn(&[2, 5, 3, 3], |i| (k * z.data()[i] + shift).exp()).unwrap();
            prop_assert_eq!(pseudo_labels(&z).unwrap(), pseudo_labels(&m).unwrap());
        }
    }
}
