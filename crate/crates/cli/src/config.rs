use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mtplab::data::CorpusSpec;
use mtplab::eval::EvalSpec;
use mtplab::marginal::MarginalSpec;
use mtplab::model::ModelConfig;
use mtplab::mtp::MtpConfig;
use mtplab::train::{TrainMode, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the directory under which runs are created
/// when neither `--out` nor `output_dir` is given.
pub const RUN_ROOT_ENV: &str = "MTPLAB_RUN_ROOT";

/// Everything one experiment needs. The training plans' `seed` fields are
/// overwritten by the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Save a resumable training state every this many steps.
    pub checkpoint_every: u64,
    /// Allowed gap when checking the strategy-matrix ordering.
    pub report_tolerance: f64,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
    pub mtp: MtpConfig,
    pub eval: EvalSpec,
    pub marginal: MarginalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pretrain = TrainPlan {
            mode: TrainMode::PretrainNtp,
            base_lr: Some(1e-3),
            batch_size: 8,
            ..Default::default()
        };
        let finetune = TrainPlan {
            mode: TrainMode::Joint,
            batch_size: 8,
            ..Default::default()
        };
        RunConfig {
            seed: 0,
            output_dir: None,
            checkpoint_every: 500,
            report_tolerance: 0.02,
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            pretrain,
            finetune,
            mtp: MtpConfig::default(),
            eval: EvalSpec::default(),
            marginal: MarginalSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| CliError::Config(format!("{e:#}")))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let (Some(out), Some(dir)) = (&cfg.output_dir, path.parent()) {
            if out.is_relative() {
                cfg.output_dir = Some(dir.join(out));
            }
        }
        Ok(cfg)
    }

    fn normalize(&mut self) {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.pretrain.mode = TrainMode::PretrainNtp;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: mtplab::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.model.validate())?;
        check(self.corpus.validate())?;
        check(self.pretrain.validate())?;
        check(self.mtp.validate())?;
        check(self.eval.validate())?;
        check(self.marginal.validate())?;
        if self.pretrain.base_lr.is_none() {
            bail!(CliError::Config("pretrain.base_lr is required".into()));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            bail!(CliError::Config(format!(
                "corpus.vocab_size {} differs from model.vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        if self.corpus.max_len() > self.model.max_seq {
            bail!(CliError::Config(format!(
                "corpus sequences reach {} tokens but model.max_seq is {}",
                self.corpus.max_len(),
                self.model.max_seq
            )));
        }
        if self.checkpoint_every == 0 {
            bail!(CliError::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_canonical(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        toml::to_string(&c).expect("config serializes")
    }

    /// Where this run lives: `--out`, then `output_dir`, then the run root.
    pub fn run_dir(&self, out: Option<&Path>, config_path: Option<&Path>) -> anyhow::Result<PathBuf> {
        if let Some(o) = out {
            return Ok(o.to_path_buf());
        }
        if let Some(o) = &self.output_dir {
            return Ok(o.clone());
        }
        let stem = config_path
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(root.join(stem))
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal and
/// falls back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical();
        let back = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical(), text);
    }

    #[test]
    fn overrides_and_seed_propagation() {
        let cfg = RunConfig::parse(
            "seed = 3\n",
            &["corpus.ambiguity=0.2".into(), "finetune.strategies.diff_lr_multiplier=2.0".into()],
        )
        .unwrap();
        assert_eq!(cfg.corpus.ambiguity, 0.2);
        assert_eq!(cfg.finetune.strategies.diff_lr_multiplier, 2.0);
        assert_eq!(cfg.pretrain.seed, 3);
        assert_eq!(cfg.finetune.seed, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for (text, ov) in [("sed = 1\n", vec![]), ("", vec!["corpus.ambiguity=2.0".to_string()])] {
            let err = RunConfig::parse(text, &ov).unwrap_err();
            assert!(matches!(err.downcast_ref::<CliError>(), Some(CliError::Config(_))), "{err:#}");
        }
    }
}
