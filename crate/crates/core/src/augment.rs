//! Depth-aware augmentations.
//!
//! AffineMix rescales one movable object by a depth factor `s` about its own
//! centroid (`s < 1` brings it nearer and magnifies it by `1/s`) and pastes it
//! back into the same image wherever the rescaled depth is not behind the
//! existing surface. ColorAug perturbs movable and static regions with
//! independent photometric factors once segmentation is reliable enough.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::IGNORE_INDEX;

/// Depth written where a warp samples outside the frame; never nearer than
/// real content.
pub const DEPTH_SENTINEL: f32 = 1e30;

/// Scales are drawn from this open interval.
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);

/// ColorAug stays off while validation mIoU is below this.
pub const COLORAUG_MIOU_GATE: f64 = 0.60;

/// Range of every ColorAug factor.
pub const COLOR_FACTOR_RANGE: (f32, f32) = (0.8, 1.2);

/// One training image with its per-pixel annotations.
///
/// Planes are row-major; the image and softmax are channel-planar
/// (`3×H×W`, `C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub labels: Vec<u8>,
    pub softmax: Option<Vec<f32>>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks plane sizes, image range, positive depth, labels below
    /// `classes` (or ignored) and softmax normalization.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let hw = self.pixels();
        if hw == 0 || self.image.len() != 3 * hw || self.depth.len() != hw || self.labels.len() != hw {
            return Err(Error::Input(format!("sample planes do not match {}×{}", self.height, self.width)));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values must lie in [0,1]".into()));
        }
        if self.depth.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Input("depth must be positive and finite".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= classes) {
            return Err(Error::Input(format!("label {l} outside [0,{classes})")));
        }
        if let Some(s) = &self.softmax {
            if s.len() % hw != 0 || s.is_empty() {
                return Err(Error::Input("softmax plane count does not match".into()));
            }
            let c = s.len() / hw;
            for p in 0..hw {
                let sum: f32 = (0..c).map(|k| s[k * hw + p]).sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::Input(format!("softmax at pixel {p} sums to {sum}")));
                }
            }
        }
        Ok(())
    }
}

/// Class ids treated as movable objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MovableClassSet(Vec<u8>);

impl MovableClassSet {
    pub fn new(mut ids: Vec<u8>, classes: usize) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Config("movable class set is empty".into()));
        }
        if let Some(c) = ids.iter().find(|&&c| c as usize >= classes || c == IGNORE_INDEX) {
            return Err(Error::Config(format!("movable class {c} outside [0,{classes})")));
        }
        Ok(MovableClassSet(ids))
    }

    pub fn contains(&self, class: u8) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn ids(&self) -> &[u8] {
        &self.0
    }
}

/// A 4-connected region of one movable class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub class: u8,
    /// Flat pixel indices in raster order.
    pub pixels: Vec<usize>,
}

impl Component {
    /// Centroid of the pixel centres, normalized to `[0,1]²`.
    pub fn anchor(&self, height: usize, width: usize) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &p| (sx + (p % width) as f64, sy + (p / width) as f64));
        ((sx / n + 0.5) / width as f64, (sy / n + 0.5) / height as f64)
    }

    pub fn mask(&self, pixels: usize) -> Vec<bool> {
        let mut m = vec![false; pixels];
        self.pixels.iter().for_each(|&p| m[p] = true);
        m
    }
}

/// Movable-class components, ordered by their first pixel in raster order.
pub fn movable_components(labels: &[u8], height: usize, width: usize, movable: &MovableClassSet) -> Vec<Component> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len().min(height * width) {
        let class = labels[start];
        if seen[start] || !movable.contains(class) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        pixels.sort_unstable();
        out.push(Component { class, pixels });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovableObject {
    pub mask: Vec<bool>,
    pub class: u8,
    /// Index into [`movable_components`].
    pub component: usize,
    pub anchor: (f64, f64),
}

/// Picks one movable component uniformly at random.
pub fn select_movable_object(
    labels: &[u8],
    height: usize,
    width: usize,
    movable: &MovableClassSet,
    rng: &mut Rng,
) -> Result<MovableObject> {
    let comps = movable_components(labels, height, width, movable);
    if comps.is_empty() {
        return Err(Error::NoMovableObject);
    }
    let k = rng.gen_range(0..comps.len());
    let c = &comps[k];
    Ok(MovableObject { mask: c.mask(height * width), class: c.class, component: k, anchor: c.anchor(height, width) })
}

/// Normalized translation `t = (1 − 1/s)·o` that keeps the anchor fixed.
pub fn compute_offsets(scale: f64, anchor: (f64, f64)) -> Result<(f64, f64)> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Param(format!("scale {scale} must be positive")));
    }
    let k = 1.0 - 1.0 / scale;
    Ok((k * anchor.0, k * anchor.1))
}

/// Everything needed to replay one AffineMix call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMixParams {
    pub scale: f64,
    pub class: u8,
    pub component: usize,
    pub anchor: (f64, f64),
    pub seed: u64,
}

/// Draws an object and a scale in `(0.5, 1.5)` for `sample` from `seed`.
pub fn sample_affinemix_params(sample: &Sample, movable: &MovableClassSet, seed: u64) -> Result<AffineMixParams> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let obj = select_movable_object(&sample.labels, sample.height, sample.width, movable, &mut rng)?;
    let scale = loop {
        let s = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
        if s > SCALE_RANGE.0 {
            break s;
        }
    };
    Ok(AffineMixParams { scale, class: obj.class, component: obj.component, anchor: obj.anchor, seed })
}

/// Output-to-input pixel mapping of a warp that scales content by
/// `inv_scale` about the origin and then translates by `t` (normalized).
#[derive(Clone, Copy, Debug)]
struct InverseMap {
    s: f64,
    bx: f64,
    by: f64,
}

impl InverseMap {
    fn new(inv_scale: f64, t: (f64, f64), height: usize, width: usize) -> Self {
        let s = 1.0 / inv_scale;
        // u = s(u' − t) with u = (x + 0.5)/W
        InverseMap { s, bx: 0.5 * s - 0.5 - s * t.0 * width as f64, by: 0.5 * s - 0.5 - s * t.1 * height as f64 }
    }

    fn source(&self, x: usize, y: usize) -> (f64, f64) {
        (self.s * x as f64 + self.bx, self.s * y as f64 + self.by)
    }
}

fn in_frame(v: f64, n: usize) -> bool {
    v >= -0.5 && v <= n as f64 - 0.5
}

fn warp_bilinear(src: &[f32], planes: usize, height: usize, width: usize, map: InverseMap, fill: &[f32]) -> Vec<f32> {
    let hw = height * width;
    let mut out = vec![0.0; planes * hw];
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = map.source(x, y);
            let o = y * width + x;
            if !in_frame(sx, width) || !in_frame(sy, height) {
                for c in 0..planes {
                    out[c * hw + o] = fill[c];
                }
                continue;
            }
            let (fx0, fy0) = (Float::floor(sx), Float::floor(sy));
            let (fx, fy) = ((sx - fx0) as f32, (sy - fy0) as f32);
            let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
            let (x0, y0) = (clamp(fx0, width), clamp(fy0, height));
            let (x1, y1) = (clamp(fx0 + 1.0, width), clamp(fy0 + 1.0, height));
            for c in 0..planes {
                let p = &src[c * hw..(c + 1) * hw];
                let top = if fx == 0.0 { p[y0 * width + x0] } else { (1.0 - fx) * p[y0 * width + x0] + fx * p[y0 * width + x1] };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bottom =
                        if fx == 0.0 { p[y1 * width + x0] } else { (1.0 - fx) * p[y1 * width + x0] + fx * p[y1 * width + x1] };
                    (1.0 - fy) * top + fy * bottom
                };
                out[c * hw + o] = v;
            }
        }
    }
    out
}

fn warp_nearest<V: Copy>(src: &[V], height: usize, width: usize, map: InverseMap, fill: V) -> Vec<V> {
    let mut out = vec![fill; height * width];
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = map.source(x, y);
            if !in_frame(sx, width) || !in_frame(sy, height) {
                continue;
            }
            let xi = (Float::round(sx).max(0.0) as usize).min(width - 1);
            let yi = (Float::round(sy).max(0.0) as usize).min(height - 1);
            out[y * width + x] = src[yi * width + xi];
        }
    }
    out
}

/// Bilinear warp of a `3×H×W` image; out-of-frame pixels are black.
pub fn affine_warp_image(image: &[f32], height: usize, width: usize, inv_scale: f64, t: (f64, f64)) -> Vec<f32> {
    warp_bilinear(image, 3, height, width, InverseMap::new(inv_scale, t, height, width), &[0.0; 3])
}

/// Bilinear warp of a depth map; out-of-frame pixels get [`DEPTH_SENTINEL`].
pub fn affine_warp_depth(depth: &[f32], height: usize, width: usize, inv_scale: f64, t: (f64, f64)) -> Vec<f32> {
    warp_bilinear(depth, 1, height, width, InverseMap::new(inv_scale, t, height, width), &[DEPTH_SENTINEL])
}

/// Nearest-neighbour warp of a label map; out-of-frame pixels are ignored.
pub fn affine_warp_labels(labels: &[u8], height: usize, width: usize, inv_scale: f64, t: (f64, f64)) -> Vec<u8> {
    warp_nearest(labels, height, width, InverseMap::new(inv_scale, t, height, width), IGNORE_INDEX)
}

/// Nearest-neighbour warp of a boolean mask; out-of-frame pixels are unset.
pub fn affine_warp_mask(mask: &[bool], height: usize, width: usize, inv_scale: f64, t: (f64, f64)) -> Vec<bool> {
    warp_nearest(mask, height, width, InverseMap::new(inv_scale, t, height, width), false)
}

/// Bilinear warp of a `C×H×W` distribution; out-of-frame pixels are uniform.
pub fn affine_warp_softmax(softmax: &[f32], height: usize, width: usize, inv_scale: f64, t: (f64, f64)) -> Vec<f32> {
    let c = softmax.len() / (height * width);
    let fill = vec![1.0 / c as f32; c];
    warp_bilinear(softmax, c, height, width, InverseMap::new(inv_scale, t, height, width), &fill)
}

/// Result of [`affinemix`]: the mixed sample and the pasted-pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub sample: Sample,
    pub mask: Vec<bool>,
}

/// Rescales the selected object by depth factor `s` and pastes it where
/// `s·warp(D) ≤ D`.
pub fn affinemix(sample: &Sample, movable: &MovableClassSet, params: &AffineMixParams) -> Result<Mixed> {
    let (h, w) = (sample.height, sample.width);
    let hw = h * w;
    let comps = movable_components(&sample.labels, h, w, movable);
    if comps.is_empty() {
        return Err(Error::NoMovableObject);
    }
    let comp = comps
        .get(params.component)
        .filter(|c| c.class == params.class)
        .ok_or_else(|| Error::Input(format!("no movable component {} of class {}", params.component, params.class)))?;
    let s = params.scale;
    let t = compute_offsets(s, params.anchor)?;
    let inv = 1.0 / s;

    let sf = s as f32;
    let depth_a: Vec<f32> = affine_warp_depth(&sample.depth, h, w, inv, t).into_iter().map(|d| sf * d).collect();
    let labels_a = affine_warp_labels(&sample.labels, h, w, inv, t);
    let obj_a = affine_warp_mask(&comp.mask(hw), h, w, inv, t);
    let mask: Vec<bool> =
        (0..hw).map(|p| obj_a[p] && labels_a[p] == comp.class && depth_a[p] <= sample.depth[p]).collect();

    let image_a = affine_warp_image(&sample.image, h, w, inv, t);
    let mut out = sample.clone();
    for p in (0..hw).filter(|&p| mask[p]) {
        out.depth[p] = depth_a[p];
        out.labels[p] = labels_a[p];
        for c in 0..3 {
            out.image[c * hw + p] = image_a[c * hw + p];
        }
    }
    if let Some(soft) = &sample.softmax {
        let soft_a = affine_warp_softmax(soft, h, w, inv, t);
        let dst = out.softmax.as_mut().expect("cloned softmax");
        let c = soft.len() / hw;
        for p in (0..hw).filter(|&p| mask[p]) {
            for k in 0..c {
                dst[k * hw + p] = soft_a[k * hw + p];
            }
        }
    }
    Ok(Mixed { sample: out, mask })
}

/// Brightness, contrast and saturation multipliers for one image region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl ColorFactors {
    pub const IDENTITY: ColorFactors = ColorFactors { brightness: 1.0, contrast: 1.0, saturation: 1.0 };

    pub fn sample(rng: &mut Rng) -> Self {
        let (lo, hi) = COLOR_FACTOR_RANGE;
        ColorFactors { brightness: rng.gen_range(lo..=hi), contrast: rng.gen_range(lo..=hi), saturation: rng.gen_range(lo..=hi) }
    }
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Applies `movable_factors` where `mask` is set and `rest_factors`
/// elsewhere: brightness scaling, contrast about the region mean, then
/// saturation about each pixel's gray level; clamped to `[0,1]`.
pub fn apply_color_aug(image: &[f32], mask: &[bool], movable_factors: ColorFactors, rest_factors: ColorFactors) -> Result<Vec<f32>> {
    let hw = mask.len();
    if image.len() != 3 * hw {
        return Err(Error::Shape(format!("{} image values for {hw} mask pixels", image.len())));
    }
    let mut out = image.to_vec();
    for (region, f) in [(true, movable_factors), (false, rest_factors)] {
        if f == ColorFactors::IDENTITY {
            continue;
        }
        let pix: Vec<usize> = (0..hw).filter(|&p| mask[p] == region).collect();
        if pix.is_empty() {
            continue;
        }
        for &p in &pix {
            for c in 0..3 {
                out[c * hw + p] *= f.brightness;
            }
        }
        let mean = pix.iter().map(|&p| (0..3).map(|c| out[c * hw + p] as f64).sum::<f64>()).sum::<f64>() / (3 * pix.len()) as f64;
        let mean = mean as f32;
        for &p in &pix {
            for c in 0..3 {
                let v = &mut out[c * hw + p];
                *v = (*v - mean) * f.contrast + mean;
            }
            let g = gray(out[p], out[hw + p], out[2 * hw + p]);
            for c in 0..3 {
                let v = &mut out[c * hw + p];
                *v = g + (*v - g) * f.saturation;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Semantics-guided photometric augmentation.
///
/// Returns the image unchanged while `current_miou` is below
/// [`COLORAUG_MIOU_GATE`]; otherwise movable and static regions of the
/// predicted label map each get independently drawn factors.
pub fn coloraug(
    image: &[f32],
    predicted_labels: &[u8],
    movable: &MovableClassSet,
    rng: &mut Rng,
    current_miou: f64,
) -> Result<Vec<f32>> {
    if image.len() != 3 * predicted_labels.len() {
        return Err(Error::Shape("predicted labels do not match the image".into()));
    }
    if current_miou < COLORAUG_MIOU_GATE {
        return Ok(image.to_vec());
    }
    let mask: Vec<bool> = predicted_labels.iter().map(|&l| movable.contains(l)).collect();
    let mf = ColorFactors::sample(rng);
    let rf = ColorFactors::sample(rng);
    apply_color_aug(image, &mask, mf, rf)
}

#[cfg(test)]
mod tests;
