//! Experiment configuration: plain-text `key = value` files plus overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossFlags, LossSettings, DEFAULT_LAMBDA_N, DEFAULT_TEMPERATURE};
use crate::msm::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_MAX_OFFSET};
use crate::text_space::{CONTEXT_INIT_STD, DEFAULT_CONTEXT_LEN};

/// How the clip is split into global and dynamic streams when the MSM is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Splitting {
    /// Learned offsets around the interleaved anchors.
    Offsets,
    /// Plain odd/even frame gather.
    Fixed,
    /// Offset path with heads held at zero; equals `Fixed` by construction.
    FrozenOffsets,
}

impl Splitting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Splitting::Offsets => "offsets",
            Splitting::Fixed => "fixed",
            Splitting::FrozenOffsets => "frozen-offsets",
        }
    }
}

impl std::str::FromStr for Splitting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offsets" => Ok(Splitting::Offsets),
            "fixed" => Ok(Splitting::Fixed),
            "frozen-offsets" => Ok(Splitting::FrozenOffsets),
            other => Err(Error::param("splitting", format!("unknown value {other:?}"))),
        }
    }
}

/// Module toggles for one model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub da: bool,
    pub msm: bool,
    pub mab: bool,
    pub splitting: Splitting,
}

impl Architecture {
    pub const FULL: Self = Self {
        da: true,
        msm: true,
        mab: true,
        splitting: Splitting::Offsets,
    };

    pub const BASELINE: Self = Self {
        da: false,
        msm: false,
        mab: false,
        splitting: Splitting::Offsets,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.da {
            parts.push("da");
        }
        if self.msm {
            parts.push("msm");
        }
        if self.mab {
            parts.push("mab");
        }
        let mods = if parts.is_empty() { "clip".to_string() } else { parts.join("+") };
        if self.msm || self.mab {
            format!("{mods}/{}", self.splitting.as_str())
        } else {
            mods
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub k_seen: usize,
    pub k_unseen: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub context_init_std: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_offset: f64,
    pub lambda_n: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub motion_amplitude: f64,
    /// Motion frames injected per video.
    pub motion_frames: usize,
    /// Strength of the random linear distortion between text and visual spaces.
    pub modality_gap: f64,
    /// Norm of the class-independent static offset added to every visual prototype.
    pub background: f64,
    /// Norm scale of the per-video shift of the class prototype (intra-class variation).
    pub intra_class_std: f64,
    /// Maximum pairwise cosine between class prototypes.
    pub separation: f64,
    pub architecture: Architecture,
    pub losses: LossFlags,
    pub classes_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            k_seen: 6,
            k_unseen: 4,
            videos_per_class: 20,
            frames: 8,
            height: 2,
            width: 2,
            channels: 16,
            embed_dim: 16,
            context_len: DEFAULT_CONTEXT_LEN,
            context_init_std: CONTEXT_INIT_STD,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            max_offset: DEFAULT_MAX_OFFSET,
            lambda_n: DEFAULT_LAMBDA_N,
            temperature: DEFAULT_TEMPERATURE,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 0,
            noise_sigma: 0.3,
            motion_amplitude: 1.5,
            motion_frames: 2,
            modality_gap: 2.0,
            background: 1.0,
            intra_class_std: 0.0,
            separation: 0.9,
            architecture: Architecture::FULL,
            losses: LossFlags::ALL,
            classes_file: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Parameter {
            name: "config",
            reason: format!("{key}: expected a boolean, got {v:?}"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parameter {
        name: "config",
        reason: format!("{key}: cannot parse {v:?}"),
    })
}

/// Parses `0,1,2` or a range `0..10`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse_num("seeds", a.trim())?, parse_num("seeds", b.trim())?);
        return Ok((a..b).collect());
    }
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num("seeds", s.trim()))
        .collect()
}

impl ExperimentConfig {
    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda_n: self.lambda_n,
            temperature: self.temperature,
            flags: self.losses,
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seeds" => self.seeds = parse_seeds(v)?,
            "k_seen" => self.k_seen = parse_num(key, v)?,
            "k_unseen" => self.k_unseen = parse_num(key, v)?,
            "videos_per_class" => self.videos_per_class = parse_num(key, v)?,
            "frames" | "T" => self.frames = parse_num(key, v)?,
            "height" | "H" => self.height = parse_num(key, v)?,
            "width" | "W" => self.width = parse_num(key, v)?,
            "channels" | "C" => self.channels = parse_num(key, v)?,
            "embed_dim" | "D" => self.embed_dim = parse_num(key, v)?,
            "context_len" | "M" => self.context_len = parse_num(key, v)?,
            "context_init_std" => self.context_init_std = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "max_offset" | "delta" => self.max_offset = parse_num(key, v)?,
            "lambda_n" => self.lambda_n = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, v)?,
            "motion_amplitude" => self.motion_amplitude = parse_num(key, v)?,
            "motion_frames" => self.motion_frames = parse_num(key, v)?,
            "modality_gap" => self.modality_gap = parse_num(key, v)?,
            "background" => self.background = parse_num(key, v)?,
            "intra_class_std" => self.intra_class_std = parse_num(key, v)?,
            "separation" => self.separation = parse_num(key, v)?,
            "da" => self.architecture.da = parse_bool(key, v)?,
            "msm" => self.architecture.msm = parse_bool(key, v)?,
            "mab" => self.architecture.mab = parse_bool(key, v)?,
            "splitting" => self.architecture.splitting = v.parse()?,
            "loss_ce" => self.losses.ce = parse_bool(key, v)?,
            "loss_cl" => self.losses.cl = parse_bool(key, v)?,
            "loss_clip" => self.losses.clip = parse_bool(key, v)?,
            "loss_proj" => self.losses.proj = parse_bool(key, v)?,
            "loss_neg" => self.losses.neg = parse_bool(key, v)?,
            "classes_file" => self.classes_file = Some(PathBuf::from(v)),
            other => {
                return Err(Error::Parameter {
                    name: "config",
                    reason: format!("unknown key {other:?}"),
                })
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parameter {
                name: "config",
                reason: format!("line {}: expected key = value", n + 1),
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parameter {
            name: "config",
            reason: format!("{}: {e}", path.display()),
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(rel) = cfg.classes_file.take() {
            let resolved = if rel.is_relative() {
                path.parent().map_or(rel.clone(), |p| p.join(&rel))
            } else {
                rel
            };
            cfg.classes_file = Some(resolved);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Parameter { name: "config", reason });
        if self.k_seen < 2 || self.k_unseen < 2 {
            return fail(format!("k_seen ({}) and k_unseen ({}) must be >= 2", self.k_seen, self.k_unseen));
        }
        if self.frames < 4 || self.frames % 2 != 0 {
            return fail(format!("frames ({}) must be even and >= 4", self.frames));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.embed_dim == 0 {
            return fail("spatial, channel and embedding dims must be positive".into());
        }
        if self.architecture.da && self.channels != self.embed_dim {
            return fail(format!(
                "the shared adapter needs channels == embed_dim ({} vs {})",
                self.channels, self.embed_dim
            ));
        }
        if self.videos_per_class == 0 || self.seeds.is_empty() {
            return fail("need at least one video per class and one seed".into());
        }
        if self.motion_frames > self.frames {
            return fail("motion_frames exceeds frames".into());
        }
        if !(self.max_offset > 0.0) || self.alpha < 0.0 || self.beta < 0.0 {
            return fail("max_offset must be > 0, alpha and beta >= 0".into());
        }
        if !(self.temperature > 0.0) || self.lambda_n < 0.0 || self.learning_rate < 0.0 {
            return fail("temperature must be > 0, lambda_n and learning_rate >= 0".into());
        }
        if self.noise_sigma < 0.0
            || self.motion_amplitude < 0.0
            || self.context_init_std < 0.0
            || self.intra_class_std < 0.0
        {
            return fail("noise, amplitude, intra-class and context std must be >= 0".into());
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return fail("separation must be in (0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip_of_defaults() {
        let text = "# defaults with comments\nseeds = 3,4\nk_seen=2\nmab = off\nsplitting = fixed # tail\nloss_neg=false\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.k_seen, 2);
        assert!(!cfg.architecture.mab);
        assert_eq!(cfg.architecture.splitting, Splitting::Fixed);
        assert!(!cfg.losses.neg && cfg.losses.ce);
        assert_eq!(cfg.k_unseen, 4);
    }

    #[test]
    fn seeds_range() {
        assert_eq!(parse_seeds("2..5").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
    }

    #[test]
    fn errors() {
        assert!(ExperimentConfig::parse("nonsense").is_err());
        assert!(ExperimentConfig::parse("unknown_key = 3").is_err());
        assert!(ExperimentConfig::parse("epochs = many").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.k_unseen = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.frames = 6;
        assert!(cfg.validate().is_ok());
        cfg.frames = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.embed_dim = 12;
        assert!(cfg.validate().is_err());
        cfg.architecture.da = false;
        assert!(cfg.validate().is_ok());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn labels() {
        assert_eq!(Architecture::FULL.label(), "da+msm+mab/offsets");
        assert_eq!(Architecture::BASELINE.label(), "clip");
    }
}
