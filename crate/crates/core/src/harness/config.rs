//! Run configuration as `key=value` text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::param::Role;
use crate::regularize::{OrthoConfig, OrthoSchedule};

use super::scene::SceneSpec;

/// Which block links the two decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShareMode {
    None,
    Gated,
    Ccam,
}

impl ShareMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShareMode::None => "none",
            ShareMode::Gated => "gated",
            ShareMode::Ccam => "ccam",
        }
    }
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShareMode::None),
            "gated" => Ok(ShareMode::Gated),
            "ccam" => Ok(ShareMode::Ccam),
            _ => Err(Error::Config(format!("unknown mode '{s}' (none|gated|ccam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub steps: u64,
    pub lr: f64,
    /// Step at which the learning rate drops ×0.1; `None` means half-way.
    pub lr_decay_step: Option<u64>,
    /// Global gradient-norm ceiling; 0 turns clipping off.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub mode: ShareMode,
    pub eval_every: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneSpec,

    pub ortho_enabled: bool,
    pub ortho_lambda0: f64,
    /// Overrides the schedule derived from `ortho_lambda0`.
    pub ortho_schedule: Option<OrthoSchedule>,
    pub ortho_roles: Vec<Role>,

    pub ssl_alpha: f64,
    /// Unlabeled images per labeled image in each step; 0 disables the
    /// unlabeled term.
    pub ssl_unlabeled_ratio: f64,
    /// Pseudo-label term from the mean teacher. When off, unlabeled images
    /// only contribute their depth loss.
    pub ssl_teacher: bool,
    /// Steps before the pseudo-label term is switched on.
    pub ssl_warmup: u64,
    pub affinemix_enabled: bool,
    pub coloraug_enabled: bool,
    pub ccam_reduction: usize,
    /// Output directory, used by the command line.
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 2000,
            lr: 0.03,
            lr_decay_step: None,
            grad_clip: 5.0,
            batch_size: 4,
            labeled_fraction: 0.125,
            seed: 0,
            mode: ShareMode::Ccam,
            eval_every: 250,
            train_scenes: 200,
            val_scenes: 32,
            scene: SceneSpec::default(),
            ortho_enabled: true,
            ortho_lambda0: 1e-4,
            ortho_schedule: None,
            ortho_roles: OrthoConfig::default().roles,
            ssl_alpha: 0.99,
            ssl_unlabeled_ratio: 1.0,
            ssl_teacher: true,
            ssl_warmup: 500,
            affinemix_enabled: true,
            coloraug_enabled: true,
            ccam_reduction: 4,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for {key}"))),
    }
}

/// `0.125` or `1/8`.
fn parse_fraction(key: &str, value: &str) -> Result<f64> {
    match value.split_once('/') {
        Some((a, b)) => {
            let a: f64 = parse(key, a.trim())?;
            let b: f64 = parse(key, b.trim())?;
            Ok(a / b)
        }
        None => parse(key, value),
    }
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "steps",
        "lr",
        "lr_decay_step",
        "grad_clip",
        "batch_size",
        "labeled_fraction",
        "seed",
        "mode",
        "eval_every",
        "scenes.train",
        "scenes.val",
        "scene.height",
        "scene.width",
        "scene.min_objects",
        "scene.max_objects",
        "scene.color_jitter",
        "ortho.enabled",
        "ortho.lambda0",
        "ortho.schedule",
        "ortho.roles",
        "ssl.alpha",
        "ssl.unlabeled_ratio",
        "ssl.teacher",
        "ssl.warmup",
        "ssl.affinemix.enabled",
        "coloraug.enabled",
        "ccam.reduction",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_step" => self.lr_decay_step = if v == "none" { None } else { Some(parse(key, v)?) },
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "labeled_fraction" => self.labeled_fraction = parse_fraction(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "scenes.train" => self.train_scenes = parse(key, v)?,
            "scenes.val" => self.val_scenes = parse(key, v)?,
            "scene.height" => self.scene.height = parse(key, v)?,
            "scene.width" => self.scene.width = parse(key, v)?,
            "scene.min_objects" => self.scene.min_objects = parse(key, v)?,
            "scene.max_objects" => self.scene.max_objects = parse(key, v)?,
            "scene.color_jitter" => self.scene.color_jitter = parse(key, v)?,
            "ortho.enabled" => self.ortho_enabled = parse_bool(key, v)?,
            "ortho.lambda0" => self.ortho_lambda0 = parse(key, v)?,
            "ortho.schedule" => self.ortho_schedule = Some(OrthoSchedule::parse(v)?),
            "ortho.roles" => {
                self.ortho_roles =
                    v.split(',').map(str::trim).filter(|r| !r.is_empty()).map(str::parse).collect::<Result<_>>()?
            }
            "ssl.alpha" => self.ssl_alpha = parse(key, v)?,
            "ssl.unlabeled_ratio" => self.ssl_unlabeled_ratio = parse(key, v)?,
            "ssl.teacher" => self.ssl_teacher = parse_bool(key, v)?,
            "ssl.warmup" => self.ssl_warmup = parse(key, v)?,
            "ssl.affinemix.enabled" => self.affinemix_enabled = parse_bool(key, v)?,
            "coloraug.enabled" => self.coloraug_enabled = parse_bool(key, v)?,
            "ccam.reduction" => self.ccam_reduction = parse(key, v)?,
            "out" => self.out = Some(v.to_string()),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return bad("grad_clip must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction must lie in (0,1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return bad("scene pools must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.ssl_alpha) {
            return bad("ssl.alpha must lie in [0,1]");
        }
        if !(self.ssl_unlabeled_ratio >= 0.0) || self.ssl_unlabeled_ratio > 16.0 {
            return bad("ssl.unlabeled_ratio must lie in [0,16]");
        }
        if self.ccam_reduction == 0 {
            return bad("ccam.reduction must be positive");
        }
        if !(self.ortho_lambda0 > 0.0) {
            return bad("ortho.lambda0 must be positive");
        }
        if self.scene.height % 8 != 0 || self.scene.width % 8 != 0 {
            return bad("scene size must be a multiple of 8");
        }
        self.scene.validate()?;
        self.ortho_config().validate()
    }

    pub fn ortho_config(&self) -> OrthoConfig {
        OrthoConfig {
            enabled: self.ortho_enabled,
            schedule: self.ortho_schedule.clone().unwrap_or_else(|| OrthoSchedule::scaled(self.ortho_lambda0)),
            roles: self.ortho_roles.clone(),
            ..OrthoConfig::default()
        }
    }

    pub fn lr_decay_at(&self) -> u64 {
        self.lr_decay_step.unwrap_or(self.steps / 2)
    }

    /// Number of scenes in the labeled pool (at least one).
    pub fn labeled_count(&self) -> usize {
        let n = num_traits::Float::ceil(self.labeled_fraction * self.train_scenes as f64) as usize;
        n.clamp(1, self.train_scenes)
    }

    pub fn unlabeled_batch(&self) -> usize {
        if self.labeled_count() == self.train_scenes {
            return 0;
        }
        let n = self.ssl_unlabeled_ratio * self.batch_size as f64;
        (n + 0.5) as usize
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("steps", &self.steps);
        kv("lr", &self.lr);
        match self.lr_decay_step {
            Some(d) => kv("lr_decay_step", &d),
            None => kv("lr_decay_step", &"none"),
        }
        kv("grad_clip", &self.grad_clip);
        kv("batch_size", &self.batch_size);
        kv("labeled_fraction", &self.labeled_fraction);
        kv("seed", &self.seed);
        kv("mode", &self.mode);
        kv("eval_every", &self.eval_every);
        kv("scenes.train", &self.train_scenes);
        kv("scenes.val", &self.val_scenes);
        kv("scene.height", &self.scene.height);
        kv("scene.width", &self.scene.width);
        kv("scene.min_objects", &self.scene.min_objects);
        kv("scene.max_objects", &self.scene.max_objects);
        kv("scene.color_jitter", &self.scene.color_jitter);
        kv("ortho.enabled", &self.ortho_enabled);
        kv("ortho.lambda0", &self.ortho_lambda0);
        if let Some(sch) = &self.ortho_schedule {
            kv("ortho.schedule", sch);
        }
        let roles: Vec<&str> = self.ortho_roles.iter().map(|r| r.as_str()).collect();
        kv("ortho.roles", &roles.join(","));
        kv("ssl.alpha", &self.ssl_alpha);
        kv("ssl.unlabeled_ratio", &self.ssl_unlabeled_ratio);
        kv("ssl.teacher", &self.ssl_teacher);
        kv("ssl.warmup", &self.ssl_warmup);
        kv("ssl.affinemix.enabled", &self.affinemix_enabled);
        kv("coloraug.enabled", &self.coloraug_enabled);
        kv("ccam.reduction", &self.ccam_reduction);
        if let Some(o) = &self.out {
            kv("out", o);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn parses_comments_fractions_and_roles() {
        let c = RunConfig::parse(
            "# run\nsteps = 10\nlabeled_fraction=1/8 # trailing\nmode=gated\northo.roles=shared-encoder,depth-decoder\n\n",
        )
        .unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.labeled_fraction, 0.125);
        assert_eq!(c.mode, ShareMode::Gated);
        assert_eq!(c.ortho_roles, vec![Role::SharedEncoder, Role::DepthDecoder]);
        assert_eq!(c.labeled_count(), 25);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("stepz=3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("steps=-1").is_err());
        assert!(RunConfig::parse("mode=fancy").is_err());
        assert!(RunConfig::parse("steps").is_err());
        assert!(RunConfig::parse("ortho.roles=ccam").is_err());
        assert!(RunConfig::parse("labeled_fraction=0").is_err());
        assert!(RunConfig::parse("ortho.enabled=maybe").is_err());
        assert!(RunConfig::parse("grad_clip=-1").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("lr=0.02\northo.schedule=0:1e-3,50:1e-4\nout=runs/a\nlr_decay_step=7\ngrad_clip=0\nssl.warmup=3").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn lambda0_scales_the_default_schedule() {
        let c = RunConfig::parse("ortho.lambda0=1e-2").unwrap();
        let o = c.ortho_config();
        assert_eq!(o.schedule.lambda_at(0), 1e-2);
        assert_eq!(o.schedule.lambda_at(10_000), 1e-3);
        let c = RunConfig::parse("ortho.lambda0=1e-2\northo.schedule=0:5e-1").unwrap();
        assert_eq!(c.ortho_config().schedule.lambda_at(40_000), 5e-1);
    }
}
