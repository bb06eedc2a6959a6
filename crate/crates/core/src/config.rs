//! Run configuration and its flat text format.
//!
//! The on-disk form is one `section.key = value` per line, `#` for full-line
//! comments, UTF-8. Every key has a default, so a config file only lists
//! what it changes; unknown keys are errors. `to_text` emits the complete
//! effective config in canonical order, which run directories store for
//! self-description.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectorConfig;
use crate::mean_teacher::{AugmentConfig, TrainerConfig};
use crate::monitor::MonitorConfig;
use crate::restore::{RestoreConfig, RestoreMode};
use crate::streams::{DomainSpec, PretrainConfig, StreamSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {why}")]
    BadValue {
        line: usize,
        key: String,
        why: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupervisionSource {
    Teacher,
    Student,
}

/// Which mechanisms are active; rows of the ablation matrices toggle these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub use_ocl: bool,
    pub use_am_threshold: bool,
    pub use_am_skip: bool,
    pub use_kl: bool,
    pub supervision_source: SupervisionSource,
    /// Pseudo-label threshold when dynamic thresholds are off.
    pub fixed_threshold: f64,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_ocl: true,
            use_am_threshold: true,
            use_am_skip: true,
            use_kl: true,
            supervision_source: SupervisionSource::Teacher,
            fixed_threshold: 0.8,
        }
    }
}

/// Stream shape without the seed (the run seed is used).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub domains: Vec<DomainSpec>,
    pub frames_per_domain: usize,
    pub rounds: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        let d = StreamSpec::default();
        StreamSettings {
            domains: d.domains,
            frames_per_domain: d.frames_per_domain,
            rounds: d.rounds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    /// Sub-table this run belongs to in comparison reports.
    pub group: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub source_model: PathBuf,
    /// Detection score floor for teacher predictions (shared by the monitor,
    /// pseudo-labeling, and evaluation).
    pub score_floor: f64,
    pub stream: StreamSettings,
    pub detector: DetectorConfig,
    pub trainer: TrainerConfig,
    pub monitor: MonitorConfig,
    pub restore: RestoreConfig,
    pub variant: VariantFlags,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".to_string(),
            group: String::new(),
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
            source_model: PathBuf::from("models/source.bin"),
            score_floor: 0.05,
            stream: StreamSettings::default(),
            detector: DetectorConfig::default(),
            trainer: TrainerConfig::default(),
            monitor: MonitorConfig::default(),
            restore: RestoreConfig::default(),
            variant: VariantFlags::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// The stream with this run's seed and the detector's frame size.
    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            domains: self.stream.domains.clone(),
            frames_per_domain: self.stream.frames_per_domain,
            rounds: self.stream.rounds,
            seed: self.seed,
            img_size: self.detector.img_size,
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line,
                text: t.to_string(),
            })?;
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    /// A single `section.key=value` override (the CLI's `--set`).
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (key, value) = kv.split_once('=').ok_or_else(|| ConfigError::Malformed {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(key.trim(), value.trim(), 0)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |why: String| ConfigError::BadValue {
            line,
            key: key.to_string(),
            why,
        };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(format!("{e}")))?
            };
        }
        let parse_bool = || -> Result<bool, ConfigError> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(bad(format!("expected true/false, got {other:?}"))),
            }
        };
        match key {
            "run.name" => self.name = value.to_string(),
            "run.group" => self.group = value.to_string(),
            "run.seed" => self.seed = num!(u64),
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "run.source_model" => self.source_model = PathBuf::from(value),
            "run.score_floor" => self.score_floor = num!(f64),

            "stream.domains" => {
                let mut domains = Vec::new();
                for part in value.split(',') {
                    let tag = part.trim();
                    if tag.is_empty() {
                        continue;
                    }
                    domains.push(DomainSpec::parse(tag).map_err(|e| bad(e.to_string()))?);
                }
                if domains.is_empty() {
                    return Err(bad("no domains listed".into()));
                }
                self.stream.domains = domains;
            }
            "stream.frames_per_domain" => self.stream.frames_per_domain = num!(usize),
            "stream.rounds" => self.stream.rounds = num!(usize),

            "detector.img_size" => self.detector.img_size = num!(usize),
            "detector.classes" => self.detector.classes = num!(usize),
            "detector.feat_channels" => self.detector.feat_channels = num!(usize),
            "detector.mid_channels" => self.detector.mid_channels = num!(usize),
            "detector.hidden" => self.detector.hidden = num!(usize),
            "detector.anchor_size" => self.detector.anchor_size = num!(f64),
            "detector.top_l" => self.detector.top_l = num!(usize),
            "detector.nms_iou" => self.detector.nms_iou = num!(f64),

            "trainer.gamma" => self.trainer.gamma = num!(f64),
            "trainer.alpha" => self.trainer.alpha = num!(f64),
            "trainer.lambda_cl" => self.trainer.lambda_cl = num!(f64),
            "trainer.mu_kl" => self.trainer.mu_kl = num!(f64),
            "trainer.tau" => self.trainer.tau = num!(f64),

            "monitor.beta_s" => self.monitor.beta_s = num!(f64),
            "monitor.delta_s" => self.monitor.delta_s = num!(f64),
            "monitor.beta_t" => self.monitor.beta_t = num!(f64),
            "monitor.epsilon" => self.monitor.epsilon = num!(f64),
            "monitor.delta0" => self.monitor.delta0 = num!(f64),
            "monitor.delta_max" => self.monitor.delta_max = num!(f64),
            "monitor.delta_mini" => self.monitor.delta_mini = num!(f64),
            "monitor.ema_update_on_pause" => self.monitor.ema_update_on_pause = parse_bool()?,

            "restore.mode" => {
                self.restore.mode = match value {
                    "arr" => RestoreMode::Arr,
                    "sr" => RestoreMode::Sr,
                    "dr" => RestoreMode::Dr,
                    "none" => RestoreMode::None,
                    other => return Err(bad(format!("expected arr|sr|dr|none, got {other:?}"))),
                }
            }
            "restore.q" => self.restore.q = num!(f64),
            "restore.p_reset" => self.restore.p_reset = num!(f64),
            "restore.trace" => self.restore.trace = parse_bool()?,

            "variant.use_ocl" => self.variant.use_ocl = parse_bool()?,
            "variant.use_am_threshold" => self.variant.use_am_threshold = parse_bool()?,
            "variant.use_am_skip" => self.variant.use_am_skip = parse_bool()?,
            "variant.use_kl" => self.variant.use_kl = parse_bool()?,
            "variant.supervision_source" => {
                self.variant.supervision_source = match value {
                    "teacher" => SupervisionSource::Teacher,
                    "student" => SupervisionSource::Student,
                    other => return Err(bad(format!("expected teacher|student, got {other:?}"))),
                }
            }
            "variant.fixed_threshold" => self.variant.fixed_threshold = num!(f64),

            "augment.weak_sigma" => self.augment.weak_sigma = num!(f64),
            "augment.strong_sigma" => self.augment.strong_sigma = num!(f64),
            "augment.contrast_lo" => self.augment.contrast_lo = num!(f64),
            "augment.contrast_hi" => self.augment.contrast_hi = num!(f64),
            "augment.cutout" => self.augment.cutout = num!(usize),

            "pretrain.frames" => self.pretrain.frames = num!(usize),
            "pretrain.epochs" => self.pretrain.epochs = num!(usize),
            "pretrain.lr" => self.pretrain.lr = num!(f64),
            "pretrain.momentum" => self.pretrain.momentum = num!(f64),
            "pretrain.holdout" => self.pretrain.holdout = num!(usize),
            "pretrain.target_map" => self.pretrain.target_map = num!(f64),
            "pretrain.min_map" => self.pretrain.min_map = num!(f64),
            "pretrain.eval_floor" => self.pretrain.eval_floor = num!(f64),

            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Canonical full rendering; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let domains = self
            .stream
            .domains
            .iter()
            .map(|d| d.tag())
            .collect::<Vec<_>>()
            .join(", ");
        let mode = match self.restore.mode {
            RestoreMode::Arr => "arr",
            RestoreMode::Sr => "sr",
            RestoreMode::Dr => "dr",
            RestoreMode::None => "none",
        };
        let source = match self.variant.supervision_source {
            SupervisionSource::Teacher => "teacher",
            SupervisionSource::Student => "student",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("run.name", self.name.clone());
        kv("run.group", self.group.clone());
        kv("run.seed", self.seed.to_string());
        kv("run.out_dir", self.out_dir.display().to_string());
        kv("run.source_model", self.source_model.display().to_string());
        kv("run.score_floor", self.score_floor.to_string());
        kv("stream.domains", domains);
        kv(
            "stream.frames_per_domain",
            self.stream.frames_per_domain.to_string(),
        );
        kv("stream.rounds", self.stream.rounds.to_string());
        kv("detector.img_size", self.detector.img_size.to_string());
        kv("detector.classes", self.detector.classes.to_string());
        kv(
            "detector.feat_channels",
            self.detector.feat_channels.to_string(),
        );
        kv(
            "detector.mid_channels",
            self.detector.mid_channels.to_string(),
        );
        kv("detector.hidden", self.detector.hidden.to_string());
        kv("detector.anchor_size", self.detector.anchor_size.to_string());
        kv("detector.top_l", self.detector.top_l.to_string());
        kv("detector.nms_iou", self.detector.nms_iou.to_string());
        kv("trainer.gamma", self.trainer.gamma.to_string());
        kv("trainer.alpha", self.trainer.alpha.to_string());
        kv("trainer.lambda_cl", self.trainer.lambda_cl.to_string());
        kv("trainer.mu_kl", self.trainer.mu_kl.to_string());
        kv("trainer.tau", self.trainer.tau.to_string());
        kv("monitor.beta_s", self.monitor.beta_s.to_string());
        kv("monitor.delta_s", self.monitor.delta_s.to_string());
        kv("monitor.beta_t", self.monitor.beta_t.to_string());
        kv("monitor.epsilon", self.monitor.epsilon.to_string());
        kv("monitor.delta0", self.monitor.delta0.to_string());
        kv("monitor.delta_max", self.monitor.delta_max.to_string());
        kv("monitor.delta_mini", self.monitor.delta_mini.to_string());
        kv(
            "monitor.ema_update_on_pause",
            self.monitor.ema_update_on_pause.to_string(),
        );
        kv("restore.mode", mode.to_string());
        kv("restore.q", self.restore.q.to_string());
        kv("restore.p_reset", self.restore.p_reset.to_string());
        kv("restore.trace", self.restore.trace.to_string());
        kv("variant.use_ocl", self.variant.use_ocl.to_string());
        kv(
            "variant.use_am_threshold",
            self.variant.use_am_threshold.to_string(),
        );
        kv("variant.use_am_skip", self.variant.use_am_skip.to_string());
        kv("variant.use_kl", self.variant.use_kl.to_string());
        kv("variant.supervision_source", source.to_string());
        kv(
            "variant.fixed_threshold",
            self.variant.fixed_threshold.to_string(),
        );
        kv("augment.weak_sigma", self.augment.weak_sigma.to_string());
        kv("augment.strong_sigma", self.augment.strong_sigma.to_string());
        kv("augment.contrast_lo", self.augment.contrast_lo.to_string());
        kv("augment.contrast_hi", self.augment.contrast_hi.to_string());
        kv("augment.cutout", self.augment.cutout.to_string());
        kv("pretrain.frames", self.pretrain.frames.to_string());
        kv("pretrain.epochs", self.pretrain.epochs.to_string());
        kv("pretrain.lr", self.pretrain.lr.to_string());
        kv("pretrain.momentum", self.pretrain.momentum.to_string());
        kv("pretrain.holdout", self.pretrain.holdout.to_string());
        kv("pretrain.target_map", self.pretrain.target_map.to_string());
        kv("pretrain.min_map", self.pretrain.min_map.to_string());
        kv("pretrain.eval_floor", self.pretrain.eval_floor.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.name = "probe".into();
        cfg.seed = 17;
        cfg.trainer.gamma = 0.025;
        cfg.restore.mode = RestoreMode::Sr;
        cfg.variant.supervision_source = SupervisionSource::Student;
        cfg.stream.rounds = 10;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let text = "# hello\n\n  # indented comment\nrun.seed = 9\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("run.sede = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let err = RunConfig::parse("\ntrainer.gamma = fast\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("trainer.gamma"), "{msg}");
    }

    #[test]
    fn override_works_like_a_line() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("monitor.delta_s=1.5").unwrap();
        assert_eq!(cfg.monitor.delta_s, 1.5);
        assert!(cfg.apply_override("nonsense").is_err());
    }

    #[test]
    fn domains_parse_list() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("stream.domains = gaussian_noise@3, blur@1")
            .unwrap();
        assert_eq!(cfg.stream.domains.len(), 2);
        assert_eq!(cfg.stream.domains[1].tag(), "blur@1");
        assert!(cfg.apply_override("stream.domains = fog@1").is_err());
    }

    #[test]
    fn stream_spec_carries_run_seed() {
        let mut cfg = RunConfig::default();
        cfg.seed = 123;
        assert_eq!(cfg.stream_spec().seed, 123);
        assert_eq!(cfg.stream_spec().img_size, cfg.detector.img_size);
    }
}
