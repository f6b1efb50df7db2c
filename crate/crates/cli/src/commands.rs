use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use retrocast::backbone::LinearBackbone;
use retrocast::evaluation::{
    evaluate, identity_proxy_quality, plot_data, retrieval_quality, rows_to_csv, run_ablation_matrix, run_sweep,
    Ablation, CorrMode, MetricsRow, SweepParam,
};
use retrocast::library::RetrievalLibrary;
use retrocast::pipeline::{Experiment, ExperimentConfig, FusionKind};

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Resolved configuration and its run directory.
pub struct Context {
    cfg: ExperimentConfig,
    hash: String,
    dir: PathBuf,
    plotdata: bool,
}

/// Sidecar recorded next to `library.bin` as `library.meta.json`.
#[derive(Debug, Serialize, Deserialize)]
struct LibraryMeta {
    fingerprint: String,
    entries: usize,
    seq_len: usize,
    channels: usize,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: &Path, plotdata: bool) -> Result<Self> {
        let hash = cfg.hash();
        let dir = out.join(&hash);
        fs::create_dir_all(dir.join("tables"))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        Ok(Self {
            cfg,
            hash,
            dir,
            plotdata,
        })
    }

    fn open(&self) -> Result<Experiment> {
        info!("run directory {}", self.dir.display());
        Ok(Experiment::open(&self.cfg)?)
    }

    /// The library for the base configuration, reused from disk when the
    /// stored fingerprint matches.
    fn library(&self, exp: &mut Experiment) -> Result<(Arc<RetrievalLibrary>, bool)> {
        let bin = self.dir.join("library.bin");
        let meta_path = self.dir.join("library.meta.json");
        if let Some(lib) = self.cached_library(&bin, &meta_path, exp) {
            exp.insert_library(&self.cfg, lib);
            return Ok((exp.library(&self.cfg)?, true));
        }
        let lib = exp.library(&self.cfg)?;
        lib.save(&bin)?;
        let meta = LibraryMeta {
            fingerprint: lib.fingerprint_hex(),
            entries: lib.len(),
            seq_len: lib.seq_len(),
            channels: lib.channels(),
        };
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok((lib, false))
    }

    fn cached_library(&self, bin: &Path, meta_path: &Path, exp: &Experiment) -> Option<RetrievalLibrary> {
        let meta: LibraryMeta = serde_json::from_slice(&fs::read(meta_path).ok()?).ok()?;
        let lib = match RetrievalLibrary::load(bin) {
            Ok(lib) => lib,
            Err(e) => {
                warn!("ignoring cached library: {e}");
                return None;
            }
        };
        let matches = lib.fingerprint_hex() == meta.fingerprint
            && lib.len() == meta.entries
            && lib.seq_len() == self.cfg.seq_len
            && lib.channels() == exp.data().channels()
            && lib.epsilon() == self.cfg.library.epsilon
            && lib.descriptor() == self.cfg.descriptor();
        if !matches {
            warn!("cached library does not match the configuration; rebuilding");
            return None;
        }
        info!("reusing cached library {}", meta.fingerprint);
        Some(lib)
    }

    /// Writes `<name>.json` with the resolved config and library fingerprint,
    /// and echoes it to stdout.
    fn report(&self, name: &str, command: &str, fingerprint: &str, results: Value) -> Result<()> {
        let doc = json!({
            "command": command,
            "config_hash": self.hash,
            "config": self.cfg,
            "library_fingerprint": fingerprint,
            "metrics_scale": "standardized",
            "results": results,
        });
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(self.dir.join(format!("{name}.json")), &text)?;
        println!("{text}");
        Ok(())
    }

    fn table(&self, name: &str, rows: &[MetricsRow]) -> Result<()> {
        fs::write(self.dir.join("tables").join(format!("{name}.csv")), rows_to_csv(rows)?)?;
        if self.plotdata {
            fs::write(
                self.dir.join("tables").join(format!("{name}_plotdata.csv")),
                plot_data(rows),
            )?;
        }
        Ok(())
    }
}

pub fn build_library(ctx: &Context, copy_to: Option<&Path>) -> Result<()> {
    let mut exp = ctx.open()?;
    let (lib, reused) = ctx.library(&mut exp)?;
    if let Some(dest) = copy_to {
        lib.save(dest)?;
    }
    let fingerprint = lib.fingerprint_hex();
    ctx.report(
        "library",
        "build-library",
        &fingerprint,
        json!({
            "entries": lib.len(),
            "seq_len": lib.seq_len(),
            "channels": lib.channels(),
            "epsilon": lib.epsilon(),
            "descriptor": lib.descriptor(),
            "reused": reused,
            "path": ctx.dir.join("library.bin"),
        }),
    )
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut exp = ctx.open()?;
    exp.keep_models(true);
    let (lib, _) = ctx.library(&mut exp)?;
    let seeds = cfg.training.seeds.clone();
    let baseline = seeds
        .iter()
        .map(|&s| exp.run_baseline(cfg, s))
        .collect::<retrocast::Result<Vec<_>>>()?;
    let augmented = seeds
        .iter()
        .map(|&s| exp.run_augmented(cfg, s))
        .collect::<retrocast::Result<Vec<_>>>()?;
    let name = cfg.dataset_name();
    let base_row = MetricsRow::from_runs(&name, "baseline", cfg.pred_len, &baseline, None);
    let full_row = MetricsRow::from_runs(&name, "full", cfg.pred_len, &augmented, Some(base_row.mse));
    let first = seeds[0];
    exp.model("augmented", first)
        .ok_or_else(|| CliError::runtime("augmented model was not kept"))?
        .save(ctx.dir.join("model.ckpt"))?;
    if let Some(m) = exp.model("baseline", first) {
        m.save(ctx.dir.join("baseline.ckpt"))?;
    }
    let rows = vec![base_row, full_row];
    ctx.table("train", &rows)?;
    ctx.report(
        "report",
        "train",
        &lib.fingerprint_hex(),
        json!({ "rows": rows, "baseline_runs": baseline, "augmented_runs": augmented }),
    )
}

pub fn eval(ctx: &Context, checkpoint: Option<&Path>, baseline: bool) -> Result<()> {
    let default = ctx.dir.join(if baseline { "baseline.ckpt" } else { "model.ckpt" });
    let path = checkpoint.unwrap_or(&default);
    if !path.exists() {
        return Err(CliError::runtime(format!(
            "checkpoint {} not found; run `train` with the same configuration first",
            path.display()
        )));
    }
    let model = LinearBackbone::load(path)?;
    let gated = !baseline && ctx.cfg.fusion.kind == FusionKind::Gated;
    if model.is_augmented() != gated {
        return Err(CliError::config(format!(
            "checkpoint {} does not match the requested {} model",
            path.display(),
            if baseline { "baseline" } else { "fused" }
        )));
    }
    let mut exp = ctx.open()?;
    let fingerprint = if baseline {
        String::new()
    } else {
        ctx.library(&mut exp)?.0.fingerprint_hex()
    };
    let set = exp.test_set(&ctx.cfg, !baseline)?;
    let metrics = evaluate(&model, &set)?;
    let csv = format!(
        "dataset,model,horizon,mse,mae,windows\n{},{},{},{},{},{}\n",
        ctx.cfg.dataset_name(),
        if baseline { "baseline" } else { "full" },
        ctx.cfg.pred_len,
        metrics.mse,
        metrics.mae,
        set.len()
    );
    fs::write(ctx.dir.join("tables").join("eval.csv"), csv)?;
    ctx.report(
        "eval",
        "eval",
        &fingerprint,
        json!({ "checkpoint": path, "metrics": metrics, "windows": set.len() }),
    )
}

pub fn ablate(ctx: &Context, names: Option<&[String]>) -> Result<()> {
    let rows: Vec<Ablation> = match names {
        None => Ablation::ALL.to_vec(),
        Some(list) => list.iter().map(|s| s.parse()).collect::<retrocast::Result<_>>()?,
    };
    let mut exp = ctx.open()?;
    let (lib, _) = ctx.library(&mut exp)?;
    let table = run_ablation_matrix(&mut exp, &ctx.cfg, &rows)?;
    ctx.table("ablation", &table)?;
    ctx.report("ablation", "ablate", &lib.fingerprint_hex(), json!({ "rows": table }))
}

pub fn sweep(ctx: &Context, param: &str, grid: Option<&[f64]>) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let grid = grid.map_or_else(|| param.default_grid(), <[f64]>::to_vec);
    for &v in &grid {
        param.apply(&ctx.cfg, v)?;
    }
    let mut exp = ctx.open()?;
    let (lib, _) = ctx.library(&mut exp)?;
    let table = run_sweep(&mut exp, &ctx.cfg, param, &grid)?;
    let name = format!("sweep_{}", param.label(0.0).trim_end_matches("=0"));
    ctx.table(&name, &table)?;
    ctx.report(
        &name,
        "sweep",
        &lib.fingerprint_hex(),
        json!({ "grid": grid, "rows": table }),
    )
}

pub fn quality(ctx: &Context, corr: &str) -> Result<()> {
    let mode: CorrMode = corr.parse()?;
    let mut exp = ctx.open()?;
    let (lib, _) = ctx.library(&mut exp)?;
    let proxy = retrieval_quality(&mut exp, &ctx.cfg, mode)?;
    let identity = identity_proxy_quality(&exp, mode)?;
    let csv = format!(
        "dataset,proxy,mse,mae,corr,queries\n{name},{v},{},{},{},{}\n{name},identity,{},{},{},{}\n",
        proxy.mse,
        proxy.mae,
        proxy.corr,
        proxy.queries,
        identity.mse,
        identity.mae,
        identity.corr,
        identity.queries,
        name = ctx.cfg.dataset_name(),
        v = ctx.cfg.continuation.variant,
    );
    fs::write(ctx.dir.join("tables").join("quality.csv"), csv)?;
    ctx.report(
        "quality",
        "quality",
        &lib.fingerprint_hex(),
        json!({ "corr_mode": mode, "proxy": proxy, "identity": identity }),
    )
}
