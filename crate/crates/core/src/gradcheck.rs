//! Central finite-difference oracle for tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-parameter comparison of tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Relative error per parameter: `max|analytic − numeric|` divided by the
    /// larger of the two gradients' max-magnitudes (0 when both vanish).
    pub rel_err: Vec<f64>,
    /// Largest absolute entry of each analytic gradient.
    pub grad_scale: Vec<f64>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the gradient of the scalar `f(params)` with
/// `(f(p + eps) − f(p − eps)) / 2eps`, entry by entry, in double precision.
///
/// `f` receives a fresh tape and one leaf per parameter and must be
/// deterministic.
pub fn gradcheck<F>(params: &[Tensor<f64>], eps: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Param("gradcheck eps must be positive".into()));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Oracle("non-finite function value".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut rel_err = Vec::with_capacity(params.len());
    let mut grad_scale = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; n],
        };
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let d = (up - down) / (2.0 * eps);
            if !d.is_finite() {
                return Err(Error::Oracle("non-finite difference quotient".into()));
            }
            numeric.push(d);
        }
        let scale_a = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale_n = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = scale_a.max(scale_n);
        rel_err.push(if scale == 0.0 { diff } else { diff / scale });
        grad_scale.push(scale_a);
    }
    Ok(GradcheckReport { rel_err, grad_scale })
}

/// One named check of [`suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradcheckReport,
}

fn rand_tensor(rng: &mut crate::rng::Rng, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    use rand::Rng as _;
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Gradient checks of every differentiable op, the gated block, the full
/// affinity block and the orthogonality penalty on inputs drawn from `seed`.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::ccam::gated_distillation;
    use crate::regularize::ortho_penalty;

    let r = &mut crate::rng::rng_for(seed, crate::rng::STREAM_GRADCHECK, 0);
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradcheckReport| out.push(SuiteEntry { name, report });

    let x = rand_tensor(r, &[2, 3, 5, 5], -1.0, 1.0)?;
    let k = rand_tensor(r, &[2, 3, 5, 5], -1.0, 1.0)?;
    let w = rand_tensor(r, &[2, 3, 3, 3], -1.0, 1.0)?;
    let b = rand_tensor(r, &[2], -1.0, 1.0)?;
    push(
        "conv2d",
        gradcheck(&[x.clone(), w, b], 1e-5, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        })?,
    );

    let dw = rand_tensor(r, &[3, 1, 3, 3], -1.0, 1.0)?;
    let db = rand_tensor(r, &[3], -1.0, 1.0)?;
    push(
        "depthwise_conv2d",
        gradcheck(&[x.clone(), dw, db], 1e-5, |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1], v[2])?;
            let kk = t.constant(k.clone());
            let y = t.mul(y, kk)?;
            t.sum(y)
        })?,
    );

    let a = rand_tensor(r, &[4, 3], -1.0, 1.0)?;
    let bm = rand_tensor(r, &[3, 4], -1.0, 1.0)?;
    let wm = rand_tensor(r, &[4, 4], -1.0, 1.0)?;
    push(
        "matmul+transpose",
        gradcheck(&[a, bm], 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let yt = t.transpose(y)?;
            let kk = t.constant(wm.clone());
            let y = t.mul(yt, kk)?;
            t.sum(y)
        })?,
    );

    let fx = rand_tensor(r, &[2, 3], -1.0, 1.0)?;
    let fw = rand_tensor(r, &[3, 2], -1.0, 1.0)?;
    let fb = rand_tensor(r, &[2], -1.0, 1.0)?;
    push(
        "fully_connected+sigmoid",
        gradcheck(&[fx, fw, fb], 1e-5, |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2])?;
            let y = t.sigmoid(y)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        })?,
    );

    push(
        "global_avg_pool",
        gradcheck(&[x.clone()], 1e-5, |t, v| {
            let p = t.global_avg_pool(v[0])?;
            let p2 = t.mul(p, p)?;
            t.sum(p2)
        })?,
    );

    push(
        "softmax_channels",
        gradcheck(&[x.clone()], 1e-5, |t, v| {
            let s = t.softmax_channels(v[0])?;
            let kk = t.constant(k.clone());
            let s = t.mul(s, kk)?;
            t.sum(s)
        })?,
    );

    let labels: Vec<u8> = (0..50).map(|i| if i % 7 == 0 { 255 } else { (i % 3) as u8 }).collect();
    push("cross_entropy", gradcheck(&[x.clone()], 1e-5, |t, v| t.cross_entropy(v[0], &labels, 255))?);

    let g1 = rand_tensor(r, &[2, 2, 4, 3], -1.0, 1.0)?;
    let g2 = rand_tensor(r, &[2, 3, 4, 3], -1.0, 1.0)?;
    push(
        "channel_gram",
        gradcheck(&[g1, g2], 1e-5, |t, v| {
            let g = t.channel_gram(v[0], v[1])?;
            let g2 = t.mul(g, g)?;
            t.mean(g2)
        })?,
    );

    let m = rand_tensor(r, &[3, 3], -1.0, 1.0)?;
    push(
        "channel_mix",
        gradcheck(&[m, x.clone()], 1e-5, |t, v| {
            let a = t.channel_mix(v[0], v[1], false)?;
            let b = t.channel_mix(v[0], v[1], true)?;
            let ab = t.mul(a, b)?;
            t.sum(ab)
        })?,
    );

    let pos = rand_tensor(r, &[1, 2, 4, 4], -1.0, 1.0)?;
    let target: Vec<f64> = (0..32).map(|i| 0.5 + i as f64 * 0.1).collect();
    push(
        "avg_pool2+upsample+exp+log_l1",
        gradcheck(&[pos.clone()], 1e-6, |t, v| {
            let p = t.avg_pool2(v[0])?;
            let u = t.upsample(p, 2)?;
            let e = t.exp(u)?;
            t.log_l1(e, &target)
        })?,
    );

    push(
        "relu+scale+sub+add+reshape+batch_mean",
        gradcheck(&[pos], 1e-6, |t, v| {
            let rl = t.relu(v[0])?;
            let s = t.scale(rl, 1.5)?;
            let d = t.sub(s, v[0])?;
            let d = t.add(d, rl)?;
            let d = t.reshape(d, &[2, 16])?;
            let m = t.batch_mean(d)?;
            let m2 = t.mul(m, m)?;
            t.sum(m2)
        })?,
    );

    let c = 4;
    let fa = rand_tensor(r, &[2, c, 4, 4], -1.0, 1.0)?;
    let fbt = rand_tensor(r, &[2, c, 4, 4], -1.0, 1.0)?;
    push("ccam_forward", ccam_check(&fa, &fbt, seed)?);
    let wr = &mut crate::rng::rng_for(seed, crate::rng::STREAM_GRADCHECK, 1);
    let k1 = rand_tensor(wr, &[2, c, 4, 4], -1.0, 1.0)?;
    let k2 = rand_tensor(wr, &[2, c, 4, 4], -1.0, 1.0)?;
    let weigh = |t: &mut Tape<f64>, a: Var, b: Var| -> Result<Var> {
        let (c1, c2) = (t.constant(k1.clone()), t.constant(k2.clone()));
        let a = t.mul(a, c1)?;
        let b = t.mul(b, c2)?;
        let (ma, mb) = (t.mean(a)?, t.mean(b)?);
        t.add(ma, mb)
    };
    let gated_params = [
        fa,
        fbt,
        rand_tensor(r, &[c, c, 3, 3], -0.3, 0.3)?,
        rand_tensor(r, &[c], -0.3, 0.3)?,
        rand_tensor(r, &[c, 1, 3, 3], -0.3, 0.3)?,
        rand_tensor(r, &[c], -0.3, 0.3)?,
    ];
    push(
        "gated_distillation",
        gradcheck(&gated_params, 1e-6, |t, v| {
            let a = gated_distillation(t, v[0], v[1], (v[2], v[3]), (v[4], v[5]))?;
            let b = gated_distillation(t, v[1], v[0], (v[2], v[3]), (v[4], v[5]))?;
            weigh(t, a, b)
        })?,
    );

    let ow = rand_tensor(r, &[3, 2, 3, 3], -0.5, 0.5)?;
    push(
        "ortho_penalty",
        gradcheck(&[ow], 1e-6, |t, v| ortho_penalty(t, v[0], 100_000, 1e-15, None))?,
    );
    Ok(out)
}

/// Gradient check of the full affinity block (spatial attention, affinity
/// matrix, channel mixing) on the given `N×C×H×W` features, with block
/// weights drawn from `seed`. Inputs and weights are all checked.
pub fn ccam_check(a_f: &Tensor<f64>, b_f: &Tensor<f64>, seed: u64) -> Result<GradcheckReport> {
    use crate::ccam::{cross_affinity_matrix, mix_features, spatial_attention, PsiVars};

    if a_f.dims() != b_f.dims() {
        return Err(crate::error::shape_err!("feature shapes differ: {:?} vs {:?}", a_f.dims(), b_f.dims()));
    }
    let [n, c, h, w] = a_f.shape().nchw()?;
    let hidden = (c / 2).max(1);
    let r = &mut crate::rng::rng_for(seed, crate::rng::STREAM_GRADCHECK, 2);
    let params = [
        a_f.clone(),
        b_f.clone(),
        rand_tensor(r, &[c, c, 3, 3], -0.3, 0.3)?,
        rand_tensor(r, &[c], -0.3, 0.3)?,
        rand_tensor(r, &[c, c, 3, 3], -0.3, 0.3)?,
        rand_tensor(r, &[c], -0.3, 0.3)?,
        rand_tensor(r, &[c, hidden], -0.5, 0.5)?,
        rand_tensor(r, &[hidden], -0.5, 0.5)?,
        rand_tensor(r, &[hidden, c], -0.5, 0.5)?,
        rand_tensor(r, &[c], -0.5, 0.5)?,
    ];
    let k1 = rand_tensor(r, &[n, c, h, w], -1.0, 1.0)?;
    let k2 = rand_tensor(r, &[n, c, h, w], -1.0, 1.0)?;
    gradcheck(&params, 1e-6, |t, v| {
        let head = PsiVars { fc1_weight: v[6], fc1_bias: v[7], fc2_weight: v[8], fc2_bias: v[9] };
        let a_sf = spatial_attention(t, v[0], v[2], v[3])?;
        let b_sf = spatial_attention(t, v[1], v[4], v[5])?;
        let m = cross_affinity_matrix(t, a_sf, b_sf, &head)?;
        let (a, b) = mix_features(t, v[0], v[1], m)?;
        let (c1, c2) = (t.constant(k1.clone()), t.constant(k2.clone()));
        let a = t.mul(a, c1)?;
        let b = t.mul(b, c2)?;
        let (ma, mb) = (t.mean(a)?, t.mean(b)?);
        t.add(ma, mb)
    })
}
