//! Scene triplets on disk: `image.ppm`, `depth.pgm` (16-bit, scaled) and
//! `label.pgm`, plus the `params.txt` written by `augment`.

use std::fs;
use std::path::{Path, PathBuf};

use ccam_core::augment::{AffineMixParams, Sample};

use crate::error::{CliError, CliResult};
use crate::pnm::Pnm;

pub const IMAGE: &str = "image.ppm";
pub const DEPTH: &str = "depth.pgm";
pub const LABEL: &str = "label.pgm";
pub const PARAMS: &str = "params.txt";

/// Depth units per 16-bit step used for generated scenes.
pub const DEFAULT_DEPTH_SCALE: &str = "0.001";

pub struct Triplet {
    pub sample: Sample,
    /// The `depth_scale` header value exactly as read.
    pub depth_scale: String,
}

fn read_pnm(path: &Path) -> CliResult<Pnm> {
    let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
    Pnm::decode(&bytes).map_err(|e| CliError::read(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::write(path, e))
}

fn parse_scale(s: &str) -> CliResult<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| *v > 0.0 && v.is_finite())
        .ok_or_else(|| CliError::input(format!("bad depth_scale '{s}'")))
}

pub fn read_triplet(dir: &Path) -> CliResult<Triplet> {
    let img = read_pnm(&dir.join(IMAGE))?;
    let depth = read_pnm(&dir.join(DEPTH))?;
    let label = read_pnm(&dir.join(LABEL))?;
    let (w, h) = (img.width, img.height);
    if img.channels != 3 || depth.channels != 1 || label.channels != 1 {
        return Err(CliError::input(format!("{}: expected P6 image and P5 depth/label", dir.display())));
    }
    if (depth.width, depth.height) != (w, h) || (label.width, label.height) != (w, h) {
        return Err(CliError::input(format!("{}: image, depth and label sizes differ", dir.display())));
    }
    if label.maxval > 255 {
        return Err(CliError::input(format!("{}: label map must be 8-bit", dir.display())));
    }
    let depth_scale = depth
        .comment_value("depth_scale")
        .ok_or_else(|| CliError::input(format!("{}: depth.pgm lacks '# depth_scale=' header", dir.display())))?
        .to_string();
    let scale = parse_scale(&depth_scale)?;
    let hw = w * h;
    let imax = img.maxval as f32;
    let mut image = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            image[c * hw + p] = img.samples[3 * p + c] as f32 / imax;
        }
    }
    let sample = Sample {
        height: h,
        width: w,
        image,
        depth: depth.samples.iter().map(|&v| (v as f64 * scale) as f32).collect(),
        labels: label.samples.iter().map(|&v| v as u8).collect(),
        softmax: None,
    };
    Ok(Triplet { sample, depth_scale })
}

pub fn write_triplet(dir: &Path, sample: &Sample, depth_scale: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
    let scale = parse_scale(depth_scale)?;
    let (w, h) = (sample.width, sample.height);
    let hw = w * h;
    let mut rgb = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            rgb.push((sample.image[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u16);
        }
    }
    let img = Pnm { width: w, height: h, channels: 3, maxval: 255, comments: vec![], samples: rgb };
    let depth = Pnm {
        width: w,
        height: h,
        channels: 1,
        maxval: 65535,
        comments: vec![format!("depth_scale={depth_scale}")],
        samples: sample.depth.iter().map(|&d| (d as f64 / scale).round().clamp(0.0, 65535.0) as u16).collect(),
    };
    let label = Pnm {
        width: w,
        height: h,
        channels: 1,
        maxval: 255,
        comments: vec![],
        samples: sample.labels.iter().map(|&l| l as u16).collect(),
    };
    write_file(&dir.join(IMAGE), &img.encode())?;
    write_file(&dir.join(DEPTH), &depth.encode())?;
    write_file(&dir.join(LABEL), &label.encode())
}

/// `dir` itself when it holds a triplet, otherwise its immediate
/// subdirectories that do, sorted by name.
pub fn find_triplets(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if dir.join(IMAGE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::read(dir, e))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(IMAGE).is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::input(format!("{}: no scene triplets found", dir.display())));
    }
    Ok(found)
}

pub fn params_text(p: &AffineMixParams) -> String {
    format!(
        "seed={}\nscale={:?}\nclass={}\ncomponent={}\nanchor_x={:?}\nanchor_y={:?}\n",
        p.seed, p.scale, p.class, p.component, p.anchor.0, p.anchor.1
    )
}

pub fn parse_params(text: &str) -> CliResult<AffineMixParams> {
    let get = |key: &str| -> CliResult<String> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| CliError::input(format!("params.txt lacks '{key}'")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: String) -> CliResult<T> {
        v.parse().map_err(|_| CliError::input(format!("params.txt: bad {key} '{v}'")))
    }
    Ok(AffineMixParams {
        seed: num("seed", get("seed")?)?,
        scale: num("scale", get("scale")?)?,
        class: num("class", get("class")?)?,
        component: num("component", get("component")?)?,
        anchor: (num("anchor_x", get("anchor_x")?)?, num("anchor_y", get("anchor_y")?)?),
    })
}
