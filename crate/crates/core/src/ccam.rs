//! Cross-channel affinity block and the gated message-passing baseline.
//!
//! The affinity block relates every channel of task A's features to every
//! channel of task B's features:
//!
//! 1. spatial attention on both inputs: `A_SF = σ(W_A ⊗ A_F)`, `B_SF = σ(W_B ⊗ B_F)`;
//! 2. for each channel `i` of `A_SF`, the `H×H` products of its map with the
//!    transposed maps of all `B_SF` channels, squeezed by a channel-attention
//!    head Ψ (pool → FC → relu → FC → sigmoid) into an affinity vector `α_i`;
//! 3. the rows `α_i` stacked into a `C×C` matrix `M`;
//! 4. residual channel mixing `A'_F = A_F + M·B_F`, `B'_F = B_F + Mᵀ·A_F`.
//!
//! The baseline shares features channel by channel through a sigmoid gate:
//! `F'_k = F_k + σ(W_g ⊗ F_k) ⊙ (W_tk ⊗ F_t)` with a per-channel `W_tk`.

use alloc::format;

use crate::error::{shape_err, Result};
use crate::param::{uniform_fan_in, Bindings, ParamId, ParamStore, Role};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One 3×3 convolution (full or depthwise) with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub depthwise: bool,
}

impl ConvUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        role: Role,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            role,
            uniform_fan_in(rng, &[out_channels, in_channels, 3, 3], in_channels * 9)?,
        )?;
        let bias = store.add(&format!("{name}.bias"), role, Tensor::zeros(&[out_channels])?)?;
        Ok(ConvUnit { weight, bias, depthwise: false })
    }

    pub fn depthwise<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        role: Role,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), role, uniform_fan_in(rng, &[channels, 1, 3, 3], 9)?)?;
        let bias = store.add(&format!("{name}.bias"), role, Tensor::zeros(&[channels])?)?;
        Ok(ConvUnit { weight, bias, depthwise: true })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, bind: &Bindings, x: Var) -> Result<Var> {
        let (w, b) = (bind.var(self.weight), bind.var(self.bias));
        if self.depthwise {
            tape.depthwise_conv2d(x, w, b)
        } else {
            tape.conv2d(x, w, b)
        }
    }
}

/// Tape handles of a channel-attention head Ψ.
#[derive(Clone, Copy, Debug)]
pub struct PsiVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Channel-attention head: `C → C/r → C` with a final sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsiHead {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl PsiHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(PsiHead {
            fc1_weight: store.add(
                &format!("{name}.fc1.weight"),
                Role::Ccam,
                uniform_fan_in(rng, &[channels, hidden], channels)?,
            )?,
            fc1_bias: store.add(&format!("{name}.fc1.bias"), Role::Ccam, Tensor::zeros(&[hidden])?)?,
            fc2_weight: store.add(
                &format!("{name}.fc2.weight"),
                Role::Ccam,
                uniform_fan_in(rng, &[hidden, channels], hidden)?,
            )?,
            // zero bias: affinities start near 0.5
            fc2_bias: store.add(&format!("{name}.fc2.bias"), Role::Ccam, Tensor::zeros(&[channels])?)?,
        })
    }

    pub fn vars(&self, bind: &Bindings) -> PsiVars {
        PsiVars {
            fc1_weight: bind.var(self.fc1_weight),
            fc1_bias: bind.var(self.fc1_bias),
            fc2_weight: bind.var(self.fc2_weight),
            fc2_bias: bind.var(self.fc2_bias),
        }
    }
}

/// Ψ applied to an `M×C×H×H` stack of product maps, giving `M×C` in (0,1).
pub fn psi<T: Real>(tape: &mut Tape<T>, stack: Var, head: &PsiVars) -> Result<Var> {
    let pooled = tape.global_avg_pool(stack)?;
    let h = tape.fully_connected(pooled, head.fc1_weight, head.fc1_bias)?;
    let h = tape.relu(h)?;
    let o = tape.fully_connected(h, head.fc2_weight, head.fc2_bias)?;
    tape.sigmoid(o)
}

/// `σ(W ⊗ F)`: same shape as `f`, values in (0,1).
pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, f: Var, weight: Var, bias: Var) -> Result<Var> {
    let c = tape.conv2d(f, weight, bias)?;
    if tape.value(c).shape() != tape.value(f).shape() {
        return Err(shape_err!("spatial attention must preserve channels and resolution"));
    }
    tape.sigmoid(c)
}

/// Affinity vector of one task-A channel `a_i: N×1×H×W` against all channels
/// of `b_sf: N×C×H×W`. Returns a length-`C` vector, averaged over the batch.
pub fn channel_affinity<T: Real>(tape: &mut Tape<T>, a_i: Var, b_sf: Var, head: &PsiVars) -> Result<Var> {
    let [n, one, h, w] = tape.value(a_i).shape().nchw()?;
    let [nb, _, hb, wb] = tape.value(b_sf).shape().nchw()?;
    if one != 1 {
        return Err(shape_err!("channel_affinity takes a single channel, got {one}"));
    }
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!("channel_affinity: spatial/batch dims differ"));
    }
    let products = tape.channel_gram(a_i, b_sf)?;
    let alpha = psi(tape, products, head)?;
    tape.batch_mean(alpha)
}

/// The `C×C` affinity matrix; row `i` is the affinity vector of channel `i`
/// of `a_sf`.
pub fn cross_affinity_matrix<T: Real>(tape: &mut Tape<T>, a_sf: Var, b_sf: Var, head: &PsiVars) -> Result<Var> {
    let sa = tape.value(a_sf).shape();
    if sa != tape.value(b_sf).shape() {
        return Err(shape_err!("cross_affinity_matrix: {:?} vs {:?}", sa, tape.value(b_sf).shape()));
    }
    let [n, c, _, _] = sa.nchw()?;
    let products = tape.channel_gram(a_sf, b_sf)?;
    let rows = psi(tape, products, head)?;
    let per_sample = tape.reshape(rows, &[n, c, c])?;
    tape.batch_mean(per_sample)
}

/// Residual channel-space mixing with the affinity matrix.
///
/// `A'[:,i] = A[:,i] + Σ_j M[i,j]·B[:,j]` and `B'[:,j] = B[:,j] + Σ_i M[i,j]·A[:,i]`.
pub fn mix_features<T: Real>(tape: &mut Tape<T>, a_f: Var, b_f: Var, m: Var) -> Result<(Var, Var)> {
    if tape.value(a_f).shape() != tape.value(b_f).shape() {
        return Err(shape_err!("mix_features: feature shapes differ"));
    }
    let to_a = tape.channel_mix(m, b_f, false)?;
    let to_b = tape.channel_mix(m, a_f, true)?;
    Ok((tape.add(a_f, to_a)?, tape.add(b_f, to_b)?))
}

/// Validated `C×C` matrix with every entry strictly inside (0,1).
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T>(Tensor<T>);

impl<T: Real> AffinityMatrix<T> {
    pub fn new(m: Tensor<T>) -> Result<Self> {
        let [r, c] = m.shape().matrix()?;
        if r != c {
            return Err(shape_err!("affinity matrix must be square, got {r}×{c}"));
        }
        if !m.data().iter().all(|&v| v > T::zero() && v < T::one()) {
            return Err(crate::Error::Input("affinity entries must lie in (0,1)".into()));
        }
        Ok(AffinityMatrix(m))
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.0.data()[i * c..(i + 1) * c]
    }
}

/// Learnable cross-channel affinity block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CcamBlock {
    pub channels: usize,
    pub reduction: usize,
    pub w_a: ConvUnit,
    pub w_b: ConvUnit,
    pub psi: PsiHead,
}

pub struct CcamOutput {
    pub a: Var,
    pub b: Var,
    pub affinity: Var,
}

impl CcamBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(CcamBlock {
            channels,
            reduction,
            w_a: ConvUnit::new(store, &format!("{name}.w_a"), Role::Ccam, channels, channels, rng)?,
            w_b: ConvUnit::new(store, &format!("{name}.w_b"), Role::Ccam, channels, channels, rng)?,
            psi: PsiHead::new(store, &format!("{name}.psi"), channels, reduction, rng)?,
        })
    }

    /// Number of scalar parameters; depends only on `C` and `r`.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let hidden = (c / self.reduction.max(1)).max(1);
        2 * (c * c * 9 + c) + (c * hidden + hidden) + (hidden * c + c)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Bindings, a_f: Var, b_f: Var) -> Result<CcamOutput> {
        let a_sf = spatial_attention(tape, a_f, bind.var(self.w_a.weight), bind.var(self.w_a.bias))?;
        let b_sf = spatial_attention(tape, b_f, bind.var(self.w_b.weight), bind.var(self.w_b.bias))?;
        let m = cross_affinity_matrix(tape, a_sf, b_sf, &self.psi.vars(bind))?;
        let (a, b) = mix_features(tape, a_f, b_f, m)?;
        Ok(CcamOutput { a, b, affinity: m })
    }
}

/// `F'_k = F_k + σ(W_g ⊗ F_k) ⊙ (W_tk ⊗ F_t)`.
pub fn gated_distillation<T: Real>(
    tape: &mut Tape<T>,
    f_k: Var,
    f_t: Var,
    gate: (Var, Var),
    message: (Var, Var),
) -> Result<Var> {
    if tape.value(f_k).shape() != tape.value(f_t).shape() {
        return Err(shape_err!("gated_distillation: feature shapes differ"));
    }
    let g = tape.conv2d(f_k, gate.0, gate.1)?;
    let g = tape.sigmoid(g)?;
    let msg = tape.depthwise_conv2d(f_t, message.0, message.1)?;
    let gm = tape.mul(g, msg)?;
    tape.add(f_k, gm)
}

/// Two-task gated message passing between decoder features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatedBlock {
    pub channels: usize,
    pub gate_a: ConvUnit,
    pub message_to_a: ConvUnit,
    pub gate_b: ConvUnit,
    pub message_to_b: ConvUnit,
}

impl GatedBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(GatedBlock {
            channels,
            gate_a: ConvUnit::new(store, &format!("{name}.gate_a"), Role::Other, channels, channels, rng)?,
            message_to_a: ConvUnit::depthwise(store, &format!("{name}.msg_a"), Role::Other, channels, rng)?,
            gate_b: ConvUnit::new(store, &format!("{name}.gate_b"), Role::Other, channels, channels, rng)?,
            message_to_b: ConvUnit::depthwise(store, &format!("{name}.msg_b"), Role::Other, channels, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        2 * (c * c * 9 + c) + 2 * (c * 9 + c)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Bindings, a_f: Var, b_f: Var) -> Result<(Var, Var)> {
        let pair = |u: &ConvUnit| (bind.var(u.weight), bind.var(u.bias));
        let a = gated_distillation(tape, a_f, b_f, pair(&self.gate_a), pair(&self.message_to_a))?;
        let b = gated_distillation(tape, b_f, a_f, pair(&self.gate_b), pair(&self.message_to_b))?;
        Ok((a, b))
    }
}
