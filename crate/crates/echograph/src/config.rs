//! Run configuration: a sectioned key/value text file, command-line
//! overrides, and a content hash recorded in every artifact a run produces.
//!
//! Unknown sections or keys are rejected so typos fail fast.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{ThresholdRule, DEFAULT_PERIODICITY_TAU};
use crate::model::ModelConfig;
use crate::synth::{DatasetSpec, GeometryProfile};
use crate::trainer::{fnv1a, Precision, TrainConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ECHOGRAPH_CONFIG";

#[derive(Debug, Clone)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub below40_frac: f64,
    pub zoomed_frac: f64,
    pub seed: u64,
    /// Geometry preset name: desk | paper.
    pub profile: String,
    pub t_total_min: usize,
    pub t_total_max: usize,
    pub period_min: usize,
    pub period_max: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone)]
pub struct ModelSection {
    /// Model preset: desk | paper | micro.
    pub preset: String,
    pub seed: u64,
    /// Override of the preset's clip length (0 keeps the preset value).
    pub t_fixed: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub periodicity_tau: f64,
}

#[derive(Debug, Clone)]
pub struct PathsSection {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = GeometryProfile::desk();
        RunConfig {
            data: DataSection {
                n_train: 64,
                n_val: 16,
                n_test: 32,
                below40_frac: 0.127,
                zoomed_frac: 0.1,
                seed: 1,
                profile: "desk".to_string(),
                t_total_min: desk.t_total.0,
                t_total_max: desk.t_total.1,
                period_min: desk.period.0,
                period_max: desk.period.1,
                noise_std: desk.noise_std,
            },
            model: ModelSection {
                preset: "desk".to_string(),
                seed: 1,
                t_fixed: 0,
            },
            train: TrainConfig::default(),
            eval: EvalSection {
                periodicity_tau: DEFAULT_PERIODICITY_TAU,
            },
            paths: PathsSection {
                dataset_dir: PathBuf::from("runs/dataset"),
                checkpoint_dir: PathBuf::from("runs/checkpoints"),
                report_dir: PathBuf::from("runs/reports"),
            },
        }
    }
}

impl RunConfig {
    /// Parses a sectioned key/value file. Lines are `key = value`, sections
    /// are `[name]`, `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{}:{}: expected key = value", path.display(), ln + 1))
            })?;
            cfg.apply_kv(&section, key.trim(), value.trim())
                .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key = value` assignment (file lines and CLI
    /// overrides go through the same path). Unknown keys are rejected.
    pub fn apply_kv(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value '{value}' for {key}")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::config(format!("bad boolean '{value}' for {key}"))),
            }
        }
        match (section, key) {
            ("data", "n_train") => self.data.n_train = parse(key, value)?,
            ("data", "n_val") => self.data.n_val = parse(key, value)?,
            ("data", "n_test") => self.data.n_test = parse(key, value)?,
            ("data", "below40_frac") => self.data.below40_frac = parse(key, value)?,
            ("data", "zoomed_frac") => self.data.zoomed_frac = parse(key, value)?,
            ("data", "seed") => self.data.seed = parse(key, value)?,
            ("data", "profile") => self.data.profile = value.to_string(),
            ("data", "t_total_min") => self.data.t_total_min = parse(key, value)?,
            ("data", "t_total_max") => self.data.t_total_max = parse(key, value)?,
            ("data", "period_min") => self.data.period_min = parse(key, value)?,
            ("data", "period_max") => self.data.period_max = parse(key, value)?,
            ("data", "noise_std") => self.data.noise_std = parse(key, value)?,
            ("model", "preset") => self.model.preset = value.to_string(),
            ("model", "seed") => self.model.seed = parse(key, value)?,
            ("model", "t_fixed") => self.model.t_fixed = parse(key, value)?,
            ("train", "learning_rate") => self.train.learning_rate = parse(key, value)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, value)?,
            ("train", "epochs") => self.train.epochs = parse(key, value)?,
            ("train", "seed") => self.train.seed = parse(key, value)?,
            ("train", "augment") => self.train.augment = parse_bool(key, value)?,
            ("train", "augment_prob") => self.train.augment_prob = parse(key, value)?,
            ("train", "class_loss") => self.train.class_loss = parse_bool(key, value)?,
            ("train", "lambda_class") => self.train.lambda_class = parse(key, value)?,
            ("train", "pretrain") => self.train.pretrain = parse_bool(key, value)?,
            ("train", "pretrain_epochs") => self.train.pretrain_epochs = parse(key, value)?,
            ("train", "pretrain_sigma") => self.train.pretrain_sigma = parse(key, value)?,
            ("train", "precision") => self.train.precision = Precision::parse(value)?,
            ("eval", "periodicity_tau") => self.eval.periodicity_tau = parse(key, value)?,
            ("paths", "dataset_dir") => self.paths.dataset_dir = PathBuf::from(value),
            ("paths", "checkpoint_dir") => self.paths.checkpoint_dir = PathBuf::from(value),
            ("paths", "report_dir") => self.paths.report_dir = PathBuf::from(value),
            _ => {
                return Err(Error::config(format!(
                    "unknown config key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    /// Canonical text form: every key in a fixed order. The config hash is
    /// the FNV-1a hash of this string.
    pub fn canonical(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        format!(
            "data.n_train={}\ndata.n_val={}\ndata.n_test={}\ndata.below40_frac={}\n\
             data.zoomed_frac={}\ndata.seed={}\ndata.profile={}\ndata.t_total_min={}\n\
             data.t_total_max={}\ndata.period_min={}\ndata.period_max={}\ndata.noise_std={}\n\
             model.preset={}\nmodel.seed={}\nmodel.t_fixed={}\n\
             train.learning_rate={}\ntrain.batch_size={}\ntrain.epochs={}\ntrain.seed={}\n\
             train.augment={}\ntrain.augment_prob={}\ntrain.class_loss={}\ntrain.lambda_class={}\n\
             train.pretrain={}\ntrain.pretrain_epochs={}\ntrain.pretrain_sigma={}\n\
             train.precision={}\neval.periodicity_tau={}\n",
            d.n_train,
            d.n_val,
            d.n_test,
            d.below40_frac,
            d.zoomed_frac,
            d.seed,
            d.profile,
            d.t_total_min,
            d.t_total_max,
            d.period_min,
            d.period_max,
            d.noise_std,
            m.preset,
            m.seed,
            m.t_fixed,
            t.learning_rate,
            t.batch_size,
            t.epochs,
            t.seed,
            t.augment,
            t.augment_prob,
            t.class_loss,
            t.lambda_class,
            t.pretrain,
            t.pretrain_epochs,
            t.pretrain_sigma,
            t.precision.as_str(),
            self.eval.periodicity_tau,
        )
    }

    /// Content hash over the canonical form (paths excluded: moving a run
    /// directory does not change the experiment).
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let mut geometry = match self.data.profile.as_str() {
            "desk" => GeometryProfile::desk(),
            "paper" => GeometryProfile::paper(),
            other => {
                return Err(Error::config(format!(
                    "unknown geometry profile '{other}'"
                )))
            }
        };
        geometry.t_total = (self.data.t_total_min, self.data.t_total_max);
        geometry.period = (self.data.period_min, self.data.period_max);
        geometry.noise_std = self.data.noise_std;
        Ok(DatasetSpec {
            n_train: self.data.n_train,
            n_val: self.data.n_val,
            n_test: self.data.n_test,
            below40_frac: self.data.below40_frac,
            zoomed_frac: self.data.zoomed_frac,
            geometry,
            seed: self.data.seed,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::parse_preset(&self.model.preset)?;
        if self.model.t_fixed > 0 {
            cfg.t_fixed = self.model.t_fixed;
        }
        Ok(cfg)
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        ThresholdRule::MidRange {
            tau: self.eval.periodicity_tau,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# comment\n[data]\nn_train = 12\nseed = 9\n\n[train]\nepochs = 3\naugment = false\n[paths]\ndataset_dir = /tmp/x\n",
        )
        .unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.data.n_train, 12);
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.train.augment);
        assert_eq!(cfg.paths.dataset_dir, PathBuf::from("/tmp/x"));
        // flag-style override
        cfg.apply_kv("train", "epochs", "7").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply_kv("train", "warmup", "5"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.apply_kv("nonsense", "epochs", "5"),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        fs::write(&path, "[train]\nmystery = 1\n").unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content_not_paths() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.paths.report_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash(), "paths must not affect the hash");
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn preset_mapping() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_config().unwrap(), ModelConfig::desk());
        cfg.model.preset = "micro".to_string();
        cfg.model.t_fixed = 10;
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.t_fixed, 10);
        cfg.model.preset = "bogus".to_string();
        assert!(cfg.model_config().is_err());
    }
}
