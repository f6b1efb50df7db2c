//! Forecast metrics, proxy-quality diagnostics, ablations and tables.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::LinearBackbone;
use crate::continuation::Variant;
use crate::error::{Error, Result};
use crate::pipeline::{Experiment, ExperimentConfig, FusionKind, SeedRun};
use crate::training::{evaluate_set, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Mean MSE and MAE over the windows of `set`.
pub fn evaluate(model: &LinearBackbone, set: &SampleSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let (mse, mae) = evaluate_set(model, set)?;
    Ok(Metrics { mse, mae })
}

/// Relative error reduction in percent; positive means `new` is better.
pub fn improvement_pct(base: f64, new: f64) -> f64 {
    100.0 * (base - new) / base
}

/// Sample standard deviation (`n - 1` denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrMode {
    /// One coefficient over all flattened pairs.
    Pooled,
    /// Mean of per-query coefficients.
    PerQuery,
}

impl std::str::FromStr for CorrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(CorrMode::Pooled),
            "per-query" => Ok(CorrMode::PerQuery),
            other => Err(Error::config(format!("unknown correlation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuality {
    pub mse: f64,
    pub mae: f64,
    pub corr: f64,
    pub queries: usize,
}

/// Unclamped Pearson coefficient; zero when either side is constant.
fn signed_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Agreement between proxies and true continuations.
pub fn quality_from_pairs(
    pairs: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>)],
    mode: CorrMode,
) -> Result<RetrievalQuality> {
    if pairs.is_empty() {
        return Err(Error::NoEligibleQueries("no query has a known continuation".into()));
    }
    let mut z_all = Vec::new();
    let mut f_all = Vec::new();
    let mut per_query = Vec::with_capacity(pairs.len());
    for (z, f) in pairs {
        if z.dim() != f.dim() {
            return Err(Error::shape(format!(
                "proxy {:?} vs continuation {:?}",
                z.dim(),
                f.dim()
            )));
        }
        let zs: Vec<f64> = z.iter().copied().collect();
        let fs: Vec<f64> = f.iter().copied().collect();
        if mode == CorrMode::PerQuery {
            per_query.push(signed_pearson(&zs, &fs));
        }
        z_all.extend(zs);
        f_all.extend(fs);
    }
    let n = z_all.len() as f64;
    let mse = z_all.iter().zip(&f_all).map(|(z, f)| (z - f) * (z - f)).sum::<f64>() / n;
    let mae = z_all.iter().zip(&f_all).map(|(z, f)| (z - f).abs()).sum::<f64>() / n;
    let corr = match mode {
        CorrMode::Pooled => signed_pearson(&z_all, &f_all),
        CorrMode::PerQuery => mean(&per_query),
    };
    Ok(RetrievalQuality {
        mse,
        mae,
        corr,
        queries: pairs.len(),
    })
}

/// Proxy quality over the test windows of an experiment.
pub fn retrieval_quality(exp: &mut Experiment, cfg: &ExperimentConfig, mode: CorrMode) -> Result<RetrievalQuality> {
    let pairs = exp.quality_pairs(cfg)?;
    let views: Vec<_> = pairs.iter().map(|(z, f)| (z.view(), f.view())).collect();
    quality_from_pairs(&views, mode)
}

/// Quality of the trivial proxy that repeats the query window.
pub fn identity_proxy_quality(exp: &Experiment, mode: CorrMode) -> Result<RetrievalQuality> {
    let test = &exp.data().test;
    let pairs: Vec<_> = (0..test.len())
        .filter_map(|i| test.f_true(i).map(|f| (test.x(i), f)))
        .collect();
    quality_from_pairs(&pairs, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub variant: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub mse_std: f64,
    pub mae_std: f64,
    /// Against the baseline's mean MSE; zero for the baseline row.
    pub improvement_pct: f64,
    pub seeds: usize,
    pub per_seed_mse: Vec<f64>,
    pub per_seed_mae: Vec<f64>,
}

impl MetricsRow {
    pub fn from_runs(
        dataset: &str,
        variant: &str,
        horizon: usize,
        runs: &[SeedRun],
        baseline_mse: Option<f64>,
    ) -> Self {
        let mses: Vec<f64> = runs.iter().map(|r| r.test_mse).collect();
        let maes: Vec<f64> = runs.iter().map(|r| r.test_mae).collect();
        let mse = mean(&mses);
        Self {
            dataset: dataset.to_string(),
            variant: variant.to_string(),
            horizon,
            mse,
            mae: mean(&maes),
            mse_std: sample_std(&mses),
            mae_std: sample_std(&maes),
            improvement_pct: baseline_mse.map_or(0.0, |b| improvement_pct(b, mse)),
            seeds: runs.len(),
            per_seed_mse: mses,
            per_seed_mae: maes,
        }
    }
}

/// Ablation rows; each maps the base configuration to a modified one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    Concatenation,
    RandomRetrieval,
    DirectContinuation,
    Target,
    WithoutAlpha,
    WithoutTau,
    WithoutTopK,
    Residual,
    Pbcc,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::Full,
        Ablation::Concatenation,
        Ablation::RandomRetrieval,
        Ablation::DirectContinuation,
        Ablation::Target,
        Ablation::WithoutAlpha,
        Ablation::WithoutTau,
        Ablation::WithoutTopK,
        Ablation::Residual,
        Ablation::Pbcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Concatenation => "concatenation",
            Ablation::RandomRetrieval => "random_retrieval",
            Ablation::DirectContinuation => "direct_continuation",
            Ablation::Target => "target",
            Ablation::WithoutAlpha => "without_alpha",
            Ablation::WithoutTau => "without_tau",
            Ablation::WithoutTopK => "without_top_k",
            Ablation::Residual => "residual",
            Ablation::Pbcc => "pbcc",
        }
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::Concatenation => cfg.fusion.kind = FusionKind::Concat,
            Ablation::RandomRetrieval => cfg.continuation.variant = Variant::RandomRetrieval,
            Ablation::DirectContinuation => cfg.continuation.variant = Variant::DirectContinuation,
            Ablation::Target => cfg.continuation.variant = Variant::Target,
            Ablation::WithoutAlpha => cfg.fusion.alpha = 0.0,
            Ablation::WithoutTau => cfg.retrieval.tau = 1.0,
            Ablation::WithoutTopK => cfg.retrieval.k = 1,
            Ablation::Residual => {
                cfg.continuation.variant = Variant::Residual;
                cfg.library.descriptor = None;
            }
            Ablation::Pbcc => cfg.continuation.variant = Variant::Pbcc,
        }
        cfg
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }
}

/// Baseline over all seeds of `cfg`.
pub fn baseline_row(exp: &mut Experiment, cfg: &ExperimentConfig) -> Result<MetricsRow> {
    let runs = cfg
        .training
        .seeds
        .iter()
        .map(|&s| exp.run_baseline(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRow::from_runs(
        &cfg.dataset_name(),
        "baseline",
        cfg.pred_len,
        &runs,
        None,
    ))
}

/// Augmented model over all seeds of `cfg`, compared with its baseline.
pub fn augmented_row(
    exp: &mut Experiment,
    cfg: &ExperimentConfig,
    label: &str,
    baseline_mse: f64,
) -> Result<MetricsRow> {
    let runs = cfg
        .training
        .seeds
        .iter()
        .map(|&s| exp.run_augmented(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRow::from_runs(
        &cfg.dataset_name(),
        label,
        cfg.pred_len,
        &runs,
        Some(baseline_mse),
    ))
}

/// The baseline row followed by one row per ablation, all over the same seeds.
pub fn run_ablation_matrix(
    exp: &mut Experiment,
    base: &ExperimentConfig,
    rows: &[Ablation],
) -> Result<Vec<MetricsRow>> {
    let baseline = baseline_row(exp, base)?;
    let mut out = vec![baseline.clone()];
    for &ab in rows {
        let cfg = ab.apply(base);
        out.push(augmented_row(exp, &cfg, ab.name(), baseline.mse)?);
    }
    Ok(out)
}

/// A scalar knob to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Tau,
    K,
    ClipQuantile,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "tau" => Ok(SweepParam::Tau),
            "k" | "top_k" => Ok(SweepParam::K),
            "clip_quantile" => Ok(SweepParam::ClipQuantile),
            other => Err(Error::config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl SweepParam {
    /// Default grid for the parameter.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Alpha => vec![0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.0],
            SweepParam::Tau => vec![0.01, 0.05, 0.1, 0.15, 1.0, 5.0, 10.0],
            SweepParam::K => vec![1.0, 3.0, 5.0, 7.0, 9.0],
            SweepParam::ClipQuantile => vec![0.8, 0.85, 0.9, 0.95, 0.99],
        }
    }

    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Alpha => cfg.fusion.alpha = value,
            SweepParam::Tau => cfg.retrieval.tau = value,
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config(format!("k must be a positive integer, got {value}")));
                }
                cfg.retrieval.k = value as usize;
            }
            SweepParam::ClipQuantile => cfg.continuation.clip_quantile = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(self, value: f64) -> String {
        let name = match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Tau => "tau",
            SweepParam::K => "k",
            SweepParam::ClipQuantile => "clip_quantile",
        };
        format!("{name}={value}")
    }
}

/// One augmented row per grid value, after the shared baseline row.
pub fn run_sweep(
    exp: &mut Experiment,
    base: &ExperimentConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<MetricsRow>> {
    let baseline = baseline_row(exp, base)?;
    let mut out = vec![baseline.clone()];
    for &v in grid {
        let cfg = param.apply(base, v)?;
        out.push(augmented_row(exp, &cfg, &param.label(v), baseline.mse)?);
    }
    Ok(out)
}

/// CSV with one line per row.
pub fn rows_to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "variant",
        "horizon",
        "mse",
        "mae",
        "mse_std",
        "mae_std",
        "improvement_pct",
        "seeds",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.variant.clone(),
            r.horizon.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.mse_std.to_string(),
            r.mae_std.to_string(),
            r.improvement_pct.to_string(),
            r.seeds.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Horizon-versus-error series, one line per (variant, horizon).
pub fn plot_data(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.horizon.cmp(&b.horizon)));
    let mut out = String::from("variant,horizon,mse,mae\n");
    for r in sorted {
        let _ = writeln!(out, "{},{},{},{}", r.variant, r.horizon, r.mse, r.mae);
    }
    out
}

/// Per-window forecasts, handy for plotting a few examples.
pub fn forecast_examples(model: &LinearBackbone, set: &SampleSet, indices: &[usize]) -> Result<Vec<Array2<f64>>> {
    indices
        .iter()
        .map(|&i| {
            if i >= set.len() {
                return Err(Error::config(format!("window {i} out of range")));
            }
            model.forward(set.input(i).view(), set.aux(i))
        })
        .collect()
}
