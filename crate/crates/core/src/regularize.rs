//! Orthogonal weight regularization `λ(step)·‖WᵀW − I‖_σ`.
//!
//! Weights are viewed as matrices with the thinner dimension as columns, the
//! spectral norm comes from power iteration on `BᵀB`, and its gradient uses
//! the converged singular pair: `∂σ/∂B = u vᵀ`, hence
//! `∂σ/∂W = W (v uᵀ + u vᵀ)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::param::{Bindings, ParamId, ParamStore, Role};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a weight tensor is read as a `rows×cols` matrix (`rows ≥ cols`).
///
/// The base matrix is the row-major reshape of the tensor: `O×(I·k·k)` for a
/// conv kernel, `D×E` for a fully connected weight. When the base is wider
/// than tall it is transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrthoLayout {
    pub rows: usize,
    pub cols: usize,
    base_rows: usize,
    base_cols: usize,
    transposed: bool,
}

impl OrthoLayout {
    /// `None` for biases and single-element tensors.
    pub fn from_dims(dims: &[usize]) -> Option<Self> {
        let (br, bc) = match dims.len() {
            2 => (dims[0], dims[1]),
            4 => (dims[0], dims[1] * dims[2] * dims[3]),
            _ => return None,
        };
        if br * bc <= 1 {
            return None;
        }
        let transposed = bc > br;
        let (rows, cols) = if transposed { (bc, br) } else { (br, bc) };
        Some(OrthoLayout { rows, cols, base_rows: br, base_cols: bc, transposed })
    }

    fn to_matrix<T: Real>(&self, data: &[T]) -> Vec<f64> {
        let mut m = vec![0.0; self.rows * self.cols];
        for r in 0..self.base_rows {
            for c in 0..self.base_cols {
                let v = data[r * self.base_cols + c].as_f64();
                if self.transposed {
                    m[c * self.cols + r] = v;
                } else {
                    m[r * self.cols + c] = v;
                }
            }
        }
        m
    }

    fn from_matrix<T: Real>(&self, m: &[f64]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.base_rows {
            for c in 0..self.base_cols {
                let v = if self.transposed { m[c * self.cols + r] } else { m[r * self.cols + c] };
                out[r * self.base_cols + c] = T::from_f64(v);
            }
        }
        out
    }
}

/// Weight tensor as its regularization matrix, or `None` when excluded.
pub fn reshape_for_ortho<T: Real>(w: &Tensor<T>) -> Option<Tensor<T>> {
    let layout = OrthoLayout::from_dims(w.dims())?;
    let m = layout.to_matrix(w.data());
    Tensor::from_f64(&[layout.rows, layout.cols], &m).ok()
}

/// Largest singular value and right singular vector of a row-major matrix by
/// power iteration on `AᵀA`.
///
/// Starts from `start` or the normalized all-ones vector; stops once two
/// successive estimates differ by less than `tol` or after `iters` rounds.
pub fn power_iteration(a: &[f64], rows: usize, cols: usize, start: Option<&[f64]>, iters: usize, tol: f64) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == cols && norm(s) > 0.0 => s.to_vec(),
        _ => vec![1.0; cols],
    };
    normalize(&mut v);
    let mut av = vec![0.0; rows];
    mat_vec(a, rows, cols, &v, &mut av);
    if norm(&av) == 0.0 {
        // start is in the null space; fall back to the heaviest column
        let heaviest = (0..cols)
            .map(|c| (c, (0..rows).map(|r| a[r * cols + c] * a[r * cols + c]).sum::<f64>()))
            .fold((0, 0.0), |best, x| if x.1 > best.1 { x } else { best });
        if heaviest.1 == 0.0 {
            return (0.0, v);
        }
        v = vec![0.0; cols];
        v[heaviest.0] = 1.0;
    }
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        mat_vec(a, rows, cols, &v, &mut av);
        let est = norm(&av);
        if est == 0.0 {
            return (0.0, v);
        }
        let mut next = vec![0.0; cols];
        mat_t_vec(a, rows, cols, &av, &mut next);
        if norm(&next) == 0.0 {
            return (est, v);
        }
        normalize(&mut next);
        v = next;
        let done = (est - sigma).abs() < tol;
        sigma = est;
        if done {
            break;
        }
    }
    mat_vec(a, rows, cols, &v, &mut av);
    (norm(&av), v)
}

/// Largest singular value of a matrix tensor.
pub fn spectral_norm<T: Real>(a: &Tensor<T>, iters: usize, tol: f64) -> Result<f64> {
    let [r, c] = a.shape().matrix()?;
    a.check_finite("spectral_norm")?;
    let data: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    Ok(power_iteration(&data, r, c, None, iters, tol).0)
}

fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = a[r * cols..(r + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn mat_t_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in 0..rows {
        for c in 0..cols {
            out[c] += a[r * cols + c] * x[r];
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    Float::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Value and weight-gradient of `‖WᵀW − I‖_σ` for one weight tensor.
pub struct PenaltyEval<T> {
    pub value: f64,
    pub grad: Vec<T>,
    /// Right singular vector, reusable as the next warm start.
    pub vector: Vec<f64>,
}

const REPORT_ITERS: usize = 2000;
const REPORT_TOL: f64 = 1e-10;

pub fn penalty_eval<T: Real>(w: &Tensor<T>, iters: usize, tol: f64, warm: Option<&[f64]>) -> Result<PenaltyEval<T>> {
    let layout = OrthoLayout::from_dims(w.dims())
        .ok_or_else(|| Error::Param(format!("{:?} is not a regularizable weight", w.shape())))?;
    let (rows, cols) = (layout.rows, layout.cols);
    let m = layout.to_matrix(w.data());
    // B = MᵀM − I, symmetric cols×cols
    let mut b = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in i..cols {
            let mut s: f64 = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
            if i == j {
                s -= 1.0;
            }
            b[i * cols + j] = s;
            b[j * cols + i] = s;
        }
    }
    let (sigma, v) = power_iteration(&b, cols, cols, warm, iters, tol);
    if sigma == 0.0 {
        return Ok(PenaltyEval { value: 0.0, grad: vec![T::zero(); w.numel()], vector: v });
    }
    let mut u = vec![0.0; cols];
    mat_vec(&b, cols, cols, &v, &mut u);
    u.iter_mut().for_each(|x| *x /= sigma);
    // G = M (v uᵀ + u vᵀ)
    let mut outer = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            outer[i * cols + j] = v[i] * u[j] + u[i] * v[j];
        }
    }
    let mut g = vec![0.0; rows * cols];
    for r in 0..rows {
        for k in 0..cols {
            let mv = m[r * cols + k];
            if mv == 0.0 {
                continue;
            }
            for j in 0..cols {
                g[r * cols + j] += mv * outer[k * cols + j];
            }
        }
    }
    Ok(PenaltyEval { value: sigma, grad: layout.from_matrix(&g), vector: v })
}

/// Differentiable `‖WᵀW − I‖_σ` of the weight behind `w`.
pub fn ortho_penalty<T: Real>(tape: &mut Tape<T>, w: Var, iters: usize, tol: f64, warm: Option<&mut Vec<f64>>) -> Result<Var> {
    let start = warm.as_ref().map(|v| v.as_slice());
    let eval = penalty_eval(tape.value(w), iters, tol, start)?;
    if let Some(state) = warm {
        *state = eval.vector;
    }
    tape.scalar_fn("ortho_penalty", T::from_f64(eval.value), vec![(w, eval.grad)])
}

/// Step-wise penalty weight: `(first step, λ)` pairs, thresholds strictly
/// increasing from 0, λ positive and non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoSchedule {
    entries: Vec<(u64, f64)>,
}

impl OrthoSchedule {
    pub fn new(entries: Vec<(u64, f64)>) -> Result<Self> {
        if entries.first().map(|e| e.0) != Some(0) {
            return Err(Error::Config("ortho schedule must start at step 0".into()));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("ortho schedule steps must increase".into()));
            }
            if w[1].1 > w[0].1 {
                return Err(Error::Config("ortho schedule λ must not increase".into()));
            }
        }
        if entries.iter().any(|e| !(e.1 > 0.0) || !e.1.is_finite()) {
            return Err(Error::Config("ortho schedule λ must be positive".into()));
        }
        Ok(OrthoSchedule { entries })
    }

    /// λ = 1e-4, then 1e-5, 1e-6 and 1e-7 after 10K, 20K and 30K steps.
    pub fn standard() -> Self {
        OrthoSchedule { entries: vec![(0, 1e-4), (10_000, 1e-5), (20_000, 1e-6), (30_000, 1e-7)] }
    }

    /// The standard thresholds with λ starting at `lambda0` and dropping ×10
    /// at each threshold.
    pub fn scaled(lambda0: f64) -> Self {
        OrthoSchedule {
            entries: vec![(0, lambda0), (10_000, lambda0 / 10.0), (20_000, lambda0 / 100.0), (30_000, lambda0 / 1000.0)],
        }
    }

    /// Parses `"step:lambda,step:lambda,..."`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (st, lam) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad schedule entry '{part}'")))?;
            let st: u64 = st.trim().parse().map_err(|_| Error::Config(format!("bad step '{st}'")))?;
            let lam: f64 = lam.trim().parse().map_err(|_| Error::Config(format!("bad lambda '{lam}'")))?;
            entries.push((st, lam));
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        self.entries
            .iter()
            .take_while(|e| e.0 <= step)
            .last()
            .map_or(self.entries[0].1, |e| e.1)
    }
}

impl core::fmt::Display for OrthoSchedule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (i, (s, l)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}:{l:e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrthoConfig {
    pub enabled: bool,
    pub schedule: OrthoSchedule,
    pub roles: Vec<Role>,
    pub power_iters: usize,
    pub tol: f64,
}

impl Default for OrthoConfig {
    fn default() -> Self {
        OrthoConfig {
            enabled: true,
            schedule: OrthoSchedule::standard(),
            roles: vec![Role::SharedEncoder, Role::DepthDecoder, Role::SegmentationDecoder],
            power_iters: 20,
            tol: 1e-6,
        }
    }
}

impl OrthoConfig {
    pub fn validate(&self) -> Result<()> {
        let allowed = [Role::SharedEncoder, Role::DepthDecoder, Role::SegmentationDecoder];
        if let Some(r) = self.roles.iter().find(|r| !allowed.contains(r)) {
            return Err(Error::Config(format!("role '{r}' cannot be orthogonally regularized")));
        }
        if self.power_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("ortho power iteration needs iters > 0 and tol > 0".into()));
        }
        Ok(())
    }
}

pub fn current_lambda(config: &OrthoConfig, step: u64) -> f64 {
    config.schedule.lambda_at(step)
}

/// Result of [`OrthoRegularizer::loss`].
pub struct OrthoLoss {
    /// `λ(step)·Σ penalties`, on the tape.
    pub loss: Var,
    /// Unweighted sum of the penalties.
    pub penalty: f64,
}

/// Applies the penalty to every conv/FC weight of the targeted roles and
/// keeps per-parameter warm-start vectors across steps.
#[derive(Clone, Debug)]
pub struct OrthoRegularizer {
    pub config: OrthoConfig,
    warm: BTreeMap<ParamId, Vec<f64>>,
}

impl OrthoRegularizer {
    pub fn new(config: OrthoConfig) -> Result<Self> {
        config.validate()?;
        Ok(OrthoRegularizer { config, warm: BTreeMap::new() })
    }

    pub fn targets<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| self.config.roles.contains(&p.role) && OrthoLayout::from_dims(p.value.dims()).is_some())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn loss<T: Real>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, bind: &Bindings, step: u64) -> Result<OrthoLoss> {
        let targets = self.targets(store);
        let mut total: Option<Var> = None;
        let mut penalty = 0.0;
        for id in targets {
            let warm = self.warm.entry(id).or_default();
            let start = if warm.is_empty() { None } else { Some(&mut *warm) };
            let p = match start {
                Some(w) => ortho_penalty(tape, bind.var(id), self.config.power_iters, self.config.tol, Some(w))?,
                None => {
                    let mut fresh = Vec::new();
                    let v = ortho_penalty(tape, bind.var(id), self.config.power_iters, self.config.tol, Some(&mut fresh))?;
                    *warm = fresh;
                    v
                }
            };
            penalty += tape.value(p).item()?.as_f64();
            total = Some(match total {
                Some(t) => tape.add(t, p)?,
                None => p,
            });
        }
        let lambda = current_lambda(&self.config, step);
        let loss = match total {
            Some(t) => tape.scale(t, T::from_f64(lambda))?,
            None => tape.constant(Tensor::scalar(T::zero())?),
        };
        Ok(OrthoLoss { loss, penalty })
    }

    /// Unweighted penalty sum for reporting: cold-started and iterated to
    /// convergence, so the value depends only on the weights.
    pub fn penalty<T: Real>(&self, store: &ParamStore<T>) -> Result<f64> {
        let iters = self.config.power_iters.max(REPORT_ITERS);
        let mut s = 0.0;
        for id in self.targets(store) {
            s += penalty_eval(&store.get(id).value, iters, REPORT_TOL, None)?.value;
        }
        Ok(s)
    }
}
