//! Synthetic street-like scenes: a far background ramp, an optional road
//! band and a few rectangles/ellipses at random depths, rasterized with a
//! depth buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::augment::{MovableClassSet, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_STATIC: u8 = 2;
pub const CLASS_MOVABLE_A: u8 = 3;
pub const CLASS_MOVABLE_B: u8 = 4;
pub const NUM_CLASSES: usize = 5;

const BASE_COLORS: [[f32; 3]; NUM_CLASSES] = [
    [0.55, 0.70, 0.90],
    [0.42, 0.40, 0.40],
    [0.75, 0.55, 0.30],
    [0.90, 0.25, 0.20],
    [0.25, 0.35, 0.85],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Per-object offset range added to each base color channel.
    pub color_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { height: 64, width: 64, min_objects: 2, max_objects: 6, depth_min: 1.0, depth_max: 20.0, color_jitter: 0.25 }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn movable(&self) -> MovableClassSet {
        MovableClassSet::new(vec![CLASS_MOVABLE_A, CLASS_MOVABLE_B], NUM_CLASSES).expect("static class set")
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scenes must be at least 8×8".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_max > 2.0 * self.depth_min) {
            return Err(Error::Config("depth range must satisfy 0 < 2·d_min < d_max".into()));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(Error::Config("color_jitter must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    /// Whole frame.
    Plane,
    Rect,
    Ellipse,
}

/// One planar surface: a footprint and a depth that varies linearly with
/// the row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surface {
    pub kind: ShapeKind,
    pub class: u8,
    /// Inclusive pixel bounds of the footprint.
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    /// Depth at row 0 and change per row.
    pub depth_row0: f64,
    pub depth_slope: f64,
    pub color: [f32; 3],
}

impl Surface {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || x > self.x1 || y < self.y0 || y > self.y1 {
            return false;
        }
        match self.kind {
            ShapeKind::Plane | ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let cx = (self.x0 + self.x1) as f64 / 2.0;
                let cy = (self.y0 + self.y1) as f64 / 2.0;
                let rx = (self.x1 - self.x0) as f64 / 2.0 + 0.5;
                let ry = (self.y1 - self.y0) as f64 / 2.0 + 0.5;
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    pub fn depth_at(&self, y: usize) -> f64 {
        self.depth_row0 + self.depth_slope * y as f64
    }
}

/// A generated sample together with the surfaces that produced it; the
/// background plane comes first.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: Sample,
    pub surfaces: Vec<Surface>,
}

fn place(rng: &mut Rng, size: usize, extent: usize) -> (usize, usize) {
    let size = size.clamp(1, extent);
    let start = rng.gen_range(0..=extent - size);
    (start, start + size - 1)
}

pub fn generate_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (dmin, dmax) = (spec.depth_min, spec.depth_max);
    let far_bottom = 0.6 * dmax;
    let mut surfaces = vec![Surface {
        kind: ShapeKind::Plane,
        class: CLASS_BACKGROUND,
        x0: 0,
        x1: w - 1,
        y0: 0,
        y1: h - 1,
        depth_row0: dmax,
        depth_slope: (far_bottom - dmax) / (h - 1) as f64,
        color: BASE_COLORS[CLASS_BACKGROUND as usize],
    }];

    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut has_road = false;
    for _ in 0..count {
        let roll: f64 = rng.gen();
        if !has_road && roll < 0.15 {
            has_road = true;
            let top = rng.gen_range(h / 2..h - h / 8);
            // near at the bottom edge, receding toward the band's top
            let near = 2.0 * dmin;
            let far = 0.5 * dmax;
            let slope = (near - far) / (h - 1 - top).max(1) as f64;
            surfaces.push(Surface {
                kind: ShapeKind::Rect,
                class: CLASS_ROAD,
                x0: 0,
                x1: w - 1,
                y0: top,
                y1: h - 1,
                depth_row0: far - slope * top as f64,
                depth_slope: slope,
                color: BASE_COLORS[CLASS_ROAD as usize],
            });
            continue;
        }
        let class = match roll {
            r if r < 0.40 => CLASS_STATIC,
            r if r < 0.70 => CLASS_MOVABLE_A,
            _ => CLASS_MOVABLE_B,
        };
        let depth = rng.gen_range(1.5 * dmin..0.55 * dmax);
        // apparent size shrinks with distance
        let reach = rng.gen_range(0.6..1.2) * w as f64 * 1.5 / depth.max(1.0);
        let (sw, sh) = match class {
            CLASS_MOVABLE_A => (reach * 0.7, reach * 1.1),
            CLASS_MOVABLE_B => (reach * 1.5, reach * 0.8),
            _ => (reach * 1.0, reach * 1.4),
        };
        let (sw, sh) = ((sw as usize).clamp(3, w / 2), (sh as usize).clamp(3, h / 2));
        let (x0, x1) = place(rng, sw, w);
        let (y0, y1) = place(rng, sh, h);
        let mut color = BASE_COLORS[class as usize];
        if spec.color_jitter > 0.0 {
            for c in &mut color {
                *c = (*c as f64 + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0) as f32;
            }
        }
        surfaces.push(Surface {
            kind: if class == CLASS_MOVABLE_A { ShapeKind::Ellipse } else { ShapeKind::Rect },
            class,
            x0,
            x1,
            y0,
            y1,
            depth_row0: depth,
            depth_slope: 0.0,
            color,
        });
    }

    let hw = h * w;
    let mut depth = vec![f64::INFINITY; hw];
    let mut labels = vec![0u8; hw];
    let mut owner = vec![0usize; hw];
    for (si, s) in surfaces.iter().enumerate() {
        for y in s.y0..=s.y1 {
            let d = s.depth_at(y);
            for x in s.x0..=s.x1 {
                let p = y * w + x;
                if s.covers(x, y) && d < depth[p] {
                    depth[p] = d;
                    labels[p] = s.class;
                    owner[p] = si;
                }
            }
        }
    }

    let mut image = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        let shade = 1.0 - 0.5 * ((depth[p] - dmin) / (dmax - dmin)).clamp(0.0, 1.0);
        let base = surfaces[owner[p]].color;
        for c in 0..3 {
            let noise: f64 = rng.gen_range(-0.04..0.04);
            image[c * hw + p] = (base[c] as f64 * shade + noise).clamp(0.0, 1.0) as f32;
        }
    }
    let sample = Sample {
        height: h,
        width: w,
        image,
        depth: depth.iter().map(|&d| d as f32).collect(),
        labels,
        softmax: None,
    };
    Ok(Scene { sample, surfaces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;

    #[test]
    fn zero_objects_gives_background_ramp() {
        let spec = SceneSpec { min_objects: 0, max_objects: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec, &mut rng(1)).unwrap().sample;
        assert!(s.labels.iter().all(|&l| l == CLASS_BACKGROUND));
        for y in 1..spec.height {
            assert!(s.depth[y * spec.width] < s.depth[(y - 1) * spec.width]);
            assert_eq!(s.depth[y * spec.width], s.depth[y * spec.width + 7]);
        }
    }

    #[test]
    fn objects_are_nearer_than_the_background_they_cover() {
        let spec = SceneSpec { min_objects: 1, max_objects: 1, ..SceneSpec::default() };
        for seed in 0..20 {
            let scene = generate_scene(&spec, &mut rng(seed)).unwrap();
            let bg = scene.surfaces[0];
            let obj = scene.surfaces[1];
            for y in obj.y0..=obj.y1 {
                for x in obj.x0..=obj.x1 {
                    if obj.covers(x, y) {
                        let d = scene.sample.depth[y * spec.width + x] as f64;
                        assert!(d < bg.depth_at(y));
                        assert_eq!(scene.sample.labels[y * spec.width + x], obj.class);
                    }
                }
            }
        }
    }

    #[test]
    fn depth_is_min_over_covering_surfaces() {
        let spec = SceneSpec::default();
        let mut movable_scenes = 0;
        for seed in 0..100 {
            let scene = generate_scene(&spec, &mut rng(seed)).unwrap();
            let s = &scene.sample;
            s.validate(NUM_CLASSES).unwrap();
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let mut best = (f64::INFINITY, 255u8);
                    for surf in &scene.surfaces {
                        if surf.covers(x, y) && surf.depth_at(y) < best.0 {
                            best = (surf.depth_at(y), surf.class);
                        }
                    }
                    let p = y * spec.width + x;
                    assert_eq!(s.depth[p], best.0 as f32);
                    assert_eq!(s.labels[p], best.1);
                }
            }
            if s.labels.iter().any(|&l| spec.movable().contains(l)) {
                movable_scenes += 1;
            }
        }
        assert!(movable_scenes > 80, "{movable_scenes}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, &mut rng(5)).unwrap(), generate_scene(&spec, &mut rng(5)).unwrap());
        assert_ne!(generate_scene(&spec, &mut rng(5)).unwrap(), generate_scene(&spec, &mut rng(6)).unwrap());
    }
}
