//! Shared encoder, two mirrored decoders and an optional feature-share block
//! between their deepest layers.
//!
//! Input `3×H×W` is pooled to half resolution before the encoder
//! (`8@H/2 → 16@H/4 → 16@H/8`). Each decoder runs `16@H/8 → 8@H/4 → share
//! block → 8@H/4 → head`, with an additive skip from the encoder at `H/4`,
//! and the head output is upsampled back to `H×W`.

use alloc::format;
use alloc::vec::Vec;

use crate::ccam::{CcamBlock, ConvUnit, GatedBlock};
use crate::error::Result;
use crate::param::{Bindings, ParamStore, Role};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::ShareMode;

/// Channels at the share point.
pub const SHARE_CHANNELS: usize = 8;
const ENC1: usize = 8;
const ENC2: usize = 16;
const ENC3: usize = 16;
const DEC3: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum ShareBlock {
    None,
    Gated(GatedBlock),
    Ccam(CcamBlock),
}

impl ShareBlock {
    pub fn param_count(&self) -> usize {
        match self {
            ShareBlock::None => 0,
            ShareBlock::Gated(g) => g.param_count(),
            ShareBlock::Ccam(c) => c.param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    conv1: ConvUnit,
    conv2: ConvUnit,
    conv3: ConvUnit,
    head: ConvUnit,
}

impl Decoder {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, role: Role, out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Decoder {
            conv1: ConvUnit::new(store, &format!("{name}.conv1"), role, ENC3, ENC2, rng)?,
            conv2: ConvUnit::new(store, &format!("{name}.conv2"), role, ENC2, SHARE_CHANNELS, rng)?,
            conv3: ConvUnit::new(store, &format!("{name}.conv3"), role, SHARE_CHANNELS, DEC3, rng)?,
            head: ConvUnit::new(store, &format!("{name}.head"), role, DEC3, out, rng)?,
        })
    }
}

/// Which decoder outputs to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub seg: bool,
    pub depth: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads { seg: true, depth: true };
    pub const SEG: Heads = Heads { seg: true, depth: false };
}

pub struct ModelOutput {
    /// `N×C×H×W` class logits.
    pub seg_logits: Option<Var>,
    /// `N×1×H×W` positive depth.
    pub depth: Option<Var>,
    /// Decoder features entering the share block (post-activation).
    pub seg_features: Var,
    pub depth_features: Var,
    /// `C×C` affinity matrix in ccam mode.
    pub affinity: Option<Var>,
}

/// Parameter layout of the toy multi-task network.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub classes: usize,
    pub mode: ShareMode,
    enc1: ConvUnit,
    enc2: ConvUnit,
    enc3: ConvUnit,
    seg: Decoder,
    depth: Decoder,
    pub share: ShareBlock,
}

impl ToyModel {
    /// Registers all parameters in `store`. The encoder and decoders are
    /// initialized from `rng` before the share block so the three modes
    /// start from identical backbone weights.
    pub fn new<T: Real>(store: &mut ParamStore<T>, classes: usize, mode: ShareMode, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let enc1 = ConvUnit::new(store, "encoder.conv1", Role::SharedEncoder, 3, ENC1, rng)?;
        let enc2 = ConvUnit::new(store, "encoder.conv2", Role::SharedEncoder, ENC1, ENC2, rng)?;
        let enc3 = ConvUnit::new(store, "encoder.conv3", Role::SharedEncoder, ENC2, ENC3, rng)?;
        let seg = Decoder::new(store, "seg", Role::SegmentationDecoder, classes, rng)?;
        let depth = Decoder::new(store, "depth", Role::DepthDecoder, 1, rng)?;
        // start the depth head near a typical scene depth
        let b = store.get_mut(depth.head.bias);
        b.value.data_mut()[0] = T::from_f64(num_traits::Float::ln(8.0f64));
        let share = match mode {
            ShareMode::None => ShareBlock::None,
            ShareMode::Gated => ShareBlock::Gated(GatedBlock::new(store, "share", SHARE_CHANNELS, rng)?),
            ShareMode::Ccam => ShareBlock::Ccam(CcamBlock::new(store, "share", SHARE_CHANNELS, reduction, rng)?),
        };
        Ok(ToyModel { classes, mode, enc1, enc2, enc3, seg, depth, share })
    }

    /// Runs the network on `N×3×H×W` images (values in `[0,1]`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Bindings, images: Var, heads: Heads) -> Result<ModelOutput> {
        let x = tape.value(images);
        let centered = Tensor::from_shape(x.shape(), x.data().iter().map(|&v| v - T::from_f64(0.5)).collect())?;
        let x = tape.constant(centered);
        let x = tape.avg_pool2(x)?;
        let conv_relu = |tape: &mut Tape<T>, u: &ConvUnit, x: Var| -> Result<Var> {
            let y = u.apply(tape, bind, x)?;
            tape.relu(y)
        };
        let e1 = conv_relu(tape, &self.enc1, x)?;
        let p1 = tape.avg_pool2(e1)?;
        let e2 = conv_relu(tape, &self.enc2, p1)?;
        let p2 = tape.avg_pool2(e2)?;
        let e3 = conv_relu(tape, &self.enc3, p2)?;

        let to_share = |tape: &mut Tape<T>, dec: &Decoder| -> Result<Var> {
            let y = conv_relu(tape, &dec.conv1, e3)?;
            let u = tape.upsample(y, 2)?;
            let u = tape.add(u, e2)?;
            dec.conv2.apply(tape, bind, u)
        };
        let s1 = to_share(tape, &self.seg)?;
        let d1 = to_share(tape, &self.depth)?;
        let (s_mix, d_mix, affinity) = match &self.share {
            ShareBlock::None => (s1, d1, None),
            ShareBlock::Gated(g) => {
                let (a, b) = g.forward(tape, bind, s1, d1)?;
                (a, b, None)
            }
            ShareBlock::Ccam(c) => {
                let out = c.forward(tape, bind, s1, d1)?;
                (out.a, out.b, Some(out.affinity))
            }
        };

        let decode = |tape: &mut Tape<T>, dec: &Decoder, f: Var| -> Result<Var> {
            let f = tape.relu(f)?;
            let y = conv_relu(tape, &dec.conv3, f)?;
            let out = dec.head.apply(tape, bind, y)?;
            tape.upsample(out, 4)
        };
        let seg_logits = if heads.seg { Some(decode(tape, &self.seg, s_mix)?) } else { None };
        let depth = if heads.depth {
            let raw = decode(tape, &self.depth, d_mix)?;
            Some(tape.exp(raw)?)
        } else {
            None
        };
        let seg_features = tape.relu(s1)?;
        let depth_features = tape.relu(d1)?;
        Ok(ModelOutput { seg_logits, depth, seg_features, depth_features, affinity })
    }

    /// Parameter count of everything except the share block.
    pub fn backbone_params<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.count(None) - self.share.param_count()
    }
}

/// Mean absolute log-depth error.
pub fn toy_depth_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &[T]) -> Result<Var> {
    tape.log_l1(pred, gt)
}

/// `N×3×H×W` batch tensor from channel-planar images.
pub fn batch_images<T: Real>(images: &[&[f32]], height: usize, width: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = images.iter().flat_map(|im| im.iter().map(|&v| T::from_f64(v as f64))).collect();
    Tensor::new(&[images.len(), 3, height, width], data)
}
