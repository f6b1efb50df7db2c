use std::path::{Path, PathBuf};

use clap::Args;
use retrocast::continuation::Variant;
use retrocast::fusion::GateMode;
use retrocast::library::Descriptor;
use retrocast::pipeline::{ExperimentConfig, FusionKind};

use crate::CliError;

/// Flags that override values read from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// CSV file; the first column is a timestamp unless --keep-first-column is set.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub keep_first_column: bool,
    /// `train:val:test` ratios, `ett-h` or `ett-m`.
    #[arg(long, global = true)]
    pub split: Option<String>,
    #[arg(long, global = true)]
    pub max_rows: Option<usize>,
    #[arg(long, global = true)]
    pub seq_len: Option<usize>,
    #[arg(long, global = true)]
    pub pred_len: Option<usize>,

    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true, value_parser = parse_with::<Descriptor>)]
    pub descriptor: Option<Descriptor>,

    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub exclude_self: Option<bool>,
    #[arg(long, global = true)]
    pub exclusion_radius: Option<usize>,

    /// ratio, residual, dc, target, random or pbcc.
    #[arg(long, global = true, value_parser = parse_with::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long = "clip-q", global = true)]
    pub clip_q: Option<f64>,
    #[arg(long, global = true)]
    pub no_clip: bool,
    #[arg(long, global = true)]
    pub epsilon_s: Option<f64>,

    /// gated or concat.
    #[arg(long, global = true, value_parser = parse_fusion)]
    pub fusion: Option<FusionKind>,
    /// static or dynamic.
    #[arg(long, global = true, value_parser = parse_with::<GateMode>)]
    pub gate: Option<GateMode>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub kernel: Option<usize>,

    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long, global = true)]
    pub optimizer: Option<String>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub max_train_windows: Option<usize>,
}

fn parse_with<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    match s {
        "gated" => Ok(FusionKind::Gated),
        "concat" | "concatenation" => Ok(FusionKind::Concat),
        other => Err(format!("unknown fusion kind {other:?} (expected gated or concat)")),
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.data.path, self.data);
        if self.keep_first_column {
            cfg.data.drop_first_column = false;
        }
        set!(cfg.data.split, self.split);
        if self.max_rows.is_some() {
            cfg.data.max_rows = self.max_rows;
        }
        set!(cfg.seq_len, self.seq_len);
        set!(cfg.pred_len, self.pred_len);
        set!(cfg.library.stride, self.stride);
        set!(cfg.library.epsilon, self.epsilon);
        if self.descriptor.is_some() {
            cfg.library.descriptor = self.descriptor;
        }
        set!(cfg.retrieval.k, self.top_k);
        set!(cfg.retrieval.tau, self.tau);
        set!(cfg.retrieval.exclude_self, self.exclude_self);
        if self.exclusion_radius.is_some() {
            cfg.retrieval.exclusion_radius = self.exclusion_radius;
        }
        set!(cfg.continuation.variant, self.variant);
        set!(cfg.continuation.clip_quantile, self.clip_q);
        if self.no_clip {
            cfg.continuation.clip = false;
        }
        set!(cfg.continuation.epsilon_s, self.epsilon_s);
        set!(cfg.fusion.kind, self.fusion);
        set!(cfg.fusion.gate, self.gate);
        set!(cfg.fusion.alpha, self.alpha);
        set!(cfg.backbone.kernel, self.kernel);
        set!(cfg.training.learning_rate, self.lr);
        set!(cfg.training.batch_size, self.batch_size);
        set!(cfg.training.epochs, self.epochs);
        set!(cfg.training.patience, self.patience);
        set!(cfg.training.optimizer, self.optimizer);
        if let Some(s) = self.seed {
            cfg.training.seeds = vec![s];
        }
        set!(cfg.training.seeds, self.seeds);
        if self.max_train_windows.is_some() {
            cfg.training.max_train_windows = self.max_train_windows;
        }
    }
}

/// Reads the optional TOML file, applies overrides and validates.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
            let mut cfg: ExperimentConfig =
                toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            // Relative data paths are taken from the config file's directory.
            if cfg.data.path.is_relative() && !cfg.data.path.as_os_str().is_empty() {
                if let Some(dir) = p.parent() {
                    cfg.data.path = dir.join(&cfg.data.path);
                }
            }
            cfg
        }
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    if cfg.data.path.as_os_str().is_empty() {
        return Err(CliError::config(
            "no dataset given: set data.path in the config or pass --data",
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}
