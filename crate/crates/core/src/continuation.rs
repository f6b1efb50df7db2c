//! Building the continuation proxy `Z` for a query window.
//!
//! The default pipeline is search, softmax aggregation of the retrieved
//! descriptors, quantile-tanh clipping, modulation of the query, and finally
//! alignment of the result to the query's per-channel mean and spread. The
//! remaining variants swap out one stage each and exist for ablations.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, LinearBackbone};
use crate::dataset::{Chain, Partition, WindowSet};
use crate::error::{Error, Result};
use crate::library::{Descriptor, RetrievalLibrary};
use crate::search::{search, search_batch, Candidate, CandidateSet, RetrievalConfig, SEARCH_CHUNK};
use crate::training::{train, SampleSet, TrainConfig, TrainReport};

/// How the proxy is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Retrieved ratio descriptors applied multiplicatively.
    Ratio,
    /// Retrieved residual descriptors added to the query.
    Residual,
    /// Weighted average of the retrieved raw continuations.
    #[serde(alias = "dc")]
    DirectContinuation,
    /// Weighted average of the retrieved targets, fitted to the look-back length.
    Target,
    /// Uniformly sampled entries instead of correlation search.
    #[serde(alias = "random")]
    RandomRetrieval,
    /// A trained linear predictor maps the history to its continuation.
    Pbcc,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ratio" => Variant::Ratio,
            "residual" => Variant::Residual,
            "dc" | "direct_continuation" => Variant::DirectContinuation,
            "target" => Variant::Target,
            "random" | "random_retrieval" => Variant::RandomRetrieval,
            "pbcc" => Variant::Pbcc,
            other => return Err(Error::config(format!("unknown variant {other:?}"))),
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ratio => "ratio",
            Variant::Residual => "residual",
            Variant::DirectContinuation => "dc",
            Variant::Target => "target",
            Variant::RandomRetrieval => "random",
            Variant::Pbcc => "pbcc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationConfig {
    /// Softmax temperature.
    pub tau: f64,
    pub clip_quantile: f64,
    /// Turns quantile-tanh clipping off entirely.
    pub clip: bool,
    pub epsilon_s: f64,
    pub align_epsilon: f64,
    pub variant: Variant,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            clip_quantile: 0.9,
            clip: true,
            epsilon_s: 1e-8,
            align_epsilon: 1e-8,
            variant: Variant::Ratio,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.clip_quantile > 0.0 && self.clip_quantile <= 1.0) {
            return Err(Error::config("clip quantile must lie in (0, 1]"));
        }
        if !(self.epsilon_s >= 0.0) {
            return Err(Error::config("epsilon_s must be non-negative"));
        }
        if !(self.align_epsilon > 0.0) {
            return Err(Error::config("alignment epsilon must be positive"));
        }
        Ok(())
    }
}

/// Softmax weights of one channel's candidates, in candidate order.
pub fn softmax_weights(candidates: &[Candidate], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    let max = candidates.iter().map(|c| c.corr).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = candidates.iter().map(|c| ((c.corr - max) / tau).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Per-channel weighted sum of `block(entry)` columns.
fn weighted_columns<'a, F>(candidates: &CandidateSet, weights: &[Vec<f64>], rows: usize, block: F) -> Array2<f64>
where
    F: Fn(usize) -> ArrayView2<'a, f64>,
{
    let mut out = Array2::zeros((rows, candidates.channels()));
    for (c, (cands, ws)) in candidates.per_channel.iter().zip(weights).enumerate() {
        let mut col = out.column_mut(c);
        for (cand, &w) in cands.iter().zip(ws) {
            let src = block(cand.index);
            Zip::from(&mut col).and(src.column(c)).for_each(|acc, &v| *acc += w * v);
        }
    }
    out
}

fn all_weights(candidates: &CandidateSet, tau: f64) -> Result<Vec<Vec<f64>>> {
    candidates
        .per_channel
        .iter()
        .enumerate()
        .map(|(c, cands)| {
            if cands.is_empty() {
                return Err(Error::config(format!("channel {c} has no candidates")));
            }
            softmax_weights(cands, tau)
        })
        .collect()
}

/// Softmax-weighted fusion of the candidates' descriptors.
pub fn aggregate(
    candidates: &CandidateSet,
    library: &RetrievalLibrary,
    tau: f64,
) -> Result<(Array2<f64>, Vec<Vec<f64>>)> {
    let weights = all_weights(candidates, tau)?;
    let fused = weighted_columns(candidates, &weights, library.seq_len(), |j| {
        library.entries()[j].value.view()
    });
    Ok((fused, weights))
}

/// Linear-interpolation quantile of the absolute values, over every element.
pub fn abs_quantile(values: ArrayView2<'_, f64>, q: f64) -> f64 {
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    if abs.is_empty() {
        return 0.0;
    }
    abs.sort_unstable_by(f64::total_cmp);
    let h = (abs.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(abs.len() - 1);
    abs[lo] + (h - lo as f64) * (abs[hi] - abs[lo])
}

/// Soft clipping `R' * tanh(R / R')` with `R'` the `quantile` of `|R|`.
pub fn clip(fused: ArrayView2<'_, f64>, quantile: f64) -> (Array2<f64>, f64) {
    let threshold = abs_quantile(fused, quantile);
    if !(threshold > 0.0) {
        return (Array2::zeros(fused.raw_dim()), 0.0);
    }
    (fused.mapv(|r| threshold * (r / threshold).tanh()), threshold)
}

/// Sign with `sign(0) = 0`, so a zero descriptor leaves the query untouched.
#[inline]
fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies a descriptor to the query window.
pub fn modulate(
    x: ArrayView2<'_, f64>,
    descriptor_values: ArrayView2<'_, f64>,
    epsilon_s: f64,
    descriptor: Descriptor,
) -> Result<Array2<f64>> {
    if x.dim() != descriptor_values.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dim(), descriptor_values.dim())));
    }
    Ok(match descriptor {
        Descriptor::Ratio => Zip::from(&x)
            .and(&descriptor_values)
            .map_collect(|&x, &r| x + (r + epsilon_s * sign_or_zero(r)) * x),
        Descriptor::Residual => &x + &descriptor_values,
    })
}

/// Population mean and standard deviation of each column.
pub(crate) fn column_moments(m: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    let n = m.nrows() as f64;
    m.axis_iter(Axis(1))
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Rescales each channel of `proxy` to the mean and spread of `x`.
pub fn align(proxy: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, epsilon: f64) -> Result<Array2<f64>> {
    if proxy.dim() != x.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", proxy.dim(), x.dim())));
    }
    let from = column_moments(proxy);
    let to = column_moments(x);
    let mut z = proxy.to_owned();
    for (c, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        let (mu_p, sd_p) = from[c];
        let (mu_x, sd_x) = to[c];
        col.mapv_inplace(|v| (v - mu_p) / (sd_p + epsilon) * (sd_x + epsilon) + mu_x);
    }
    Ok(z)
}

/// Pads by repeating the last row, or truncates, to exactly `rows` rows.
pub fn fit_length(m: ArrayView2<'_, f64>, rows: usize) -> Array2<f64> {
    if m.nrows() >= rows {
        return m.slice(s![..rows, ..]).to_owned();
    }
    let last = m.row(m.nrows() - 1);
    let mut out = Array2::zeros((rows, m.ncols()));
    out.slice_mut(s![..m.nrows(), ..]).assign(&m);
    for mut row in out.rows_mut().into_iter().skip(m.nrows()) {
        row.assign(&last);
    }
    out
}

/// Intermediate matrices of the descriptor path.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorTrace {
    pub fused: Array2<f64>,
    pub clipped: Array2<f64>,
    pub clip_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryResult {
    /// The aligned proxy.
    pub z: Array2<f64>,
    /// The proxy before alignment.
    pub unaligned: Array2<f64>,
    pub trace: Option<DescriptorTrace>,
    /// Per-channel `(entry, weight)` pairs for retrieval-based variants.
    pub weights: Option<Vec<Vec<(usize, f64)>>>,
}

/// Identifies a query for exclusion and random-draw seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryId {
    pub start: usize,
    /// Training queries are subject to self-match exclusion.
    pub training: bool,
}

/// Inputs some variants need beyond the library.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstructionContext<'a> {
    /// Training partition, for the variants that read raw targets or continuations.
    pub train_series: Option<&'a Partition>,
    pub pred_len: usize,
    pub predictor: Option<&'a ContinuationPredictor>,
    /// Experiment seed for [`Variant::RandomRetrieval`].
    pub seed: u64,
    /// A previously computed candidate set for this query.
    pub candidates: Option<&'a CandidateSet>,
}

/// Builds the proxy for one query.
pub fn construct(
    x: ArrayView2<'_, f64>,
    query: QueryId,
    library: &RetrievalLibrary,
    retrieval: &RetrievalConfig,
    cfg: &ContinuationConfig,
    ctx: &ConstructionContext<'_>,
) -> Result<AuxiliaryResult> {
    cfg.validate()?;
    if cfg.variant == Variant::Pbcc {
        let predictor = ctx.predictor.ok_or(Error::MissingPredictor)?;
        let unaligned = predictor.forecast_continuation(x)?;
        let z = align(unaligned.view(), x, cfg.align_epsilon)?;
        return Ok(AuxiliaryResult {
            z,
            unaligned,
            trace: None,
            weights: None,
        });
    }

    let candidates = match (cfg.variant, ctx.candidates) {
        (Variant::RandomRetrieval, _) => random_candidates(library, retrieval, query, ctx.seed)?,
        (_, Some(cached)) => cached.clone(),
        _ => search(x, library, retrieval, query.training.then_some(query.start))?,
    };
    let weights = match cfg.variant {
        Variant::RandomRetrieval => candidates
            .per_channel
            .iter()
            .map(|c| vec![1.0 / c.len() as f64; c.len()])
            .collect(),
        _ => all_weights(&candidates, cfg.tau)?,
    };
    let weight_pairs = candidates
        .per_channel
        .iter()
        .zip(&weights)
        .map(|(cands, ws)| cands.iter().map(|c| c.index).zip(ws.iter().copied()).collect())
        .collect();

    let (unaligned, trace) = match cfg.variant {
        Variant::Ratio | Variant::Residual | Variant::RandomRetrieval => {
            let expected = match cfg.variant {
                Variant::Ratio => Some(Descriptor::Ratio),
                Variant::Residual => Some(Descriptor::Residual),
                _ => None,
            };
            if let Some(d) = expected {
                if library.descriptor() != d {
                    return Err(Error::config(format!(
                        "variant {} needs a {d:?} library, found {:?}",
                        cfg.variant,
                        library.descriptor()
                    )));
                }
            }
            let fused = weighted_columns(&candidates, &weights, library.seq_len(), |j| {
                library.entries()[j].value.view()
            });
            let (clipped, clip_threshold) = if cfg.clip {
                clip(fused.view(), cfg.clip_quantile)
            } else {
                (fused.clone(), f64::INFINITY)
            };
            let unaligned = modulate(x, clipped.view(), cfg.epsilon_s, library.descriptor())?;
            let trace = DescriptorTrace {
                fused,
                clipped,
                clip_threshold,
            };
            (unaligned, Some(trace))
        }
        Variant::DirectContinuation | Variant::Target => {
            let series = ctx
                .train_series
                .ok_or(Error::MissingTrainSeries(if cfg.variant == Variant::Target {
                    "target"
                } else {
                    "dc"
                }))?;
            let l = library.seq_len();
            let t = ctx.pred_len;
            if t == 0 {
                return Err(Error::config("pred_len must be set in the construction context"));
            }
            let (skip, rows) = match cfg.variant {
                Variant::Target => (l, t),
                _ => (l + t, l),
            };
            let segments = library
                .entries()
                .iter()
                .map(|e| {
                    series.rows(e.source_start + skip, rows).ok_or_else(|| {
                        Error::shape(format!(
                            "chain at {} is not inside the training partition",
                            e.source_start
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let averaged = weighted_columns(&candidates, &weights, rows, |j| segments[j].view());
            (fit_length(averaged.view(), l), None)
        }
        Variant::Pbcc => unreachable!("handled above"),
    };
    let z = align(unaligned.view(), x, cfg.align_epsilon)?;
    Ok(AuxiliaryResult {
        z,
        unaligned,
        trace,
        weights: Some(weight_pairs),
    })
}

/// `k` distinct entries per channel drawn from a generator keyed by the
/// experiment seed and the query start, so results do not depend on the
/// order queries are processed in.
fn random_candidates(
    library: &RetrievalLibrary,
    retrieval: &RetrievalConfig,
    query: QueryId,
    seed: u64,
) -> Result<CandidateSet> {
    retrieval.validate()?;
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let origin = query.training.then_some(query.start);
    let allowed: Vec<usize> = library
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| !retrieval.excludes(origin, e.source_start))
        .map(|(j, _)| j)
        .collect();
    if allowed.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query.start as u64);
    let k = retrieval.k.min(allowed.len());
    let per_channel = (0..library.channels())
        .map(|_| {
            sample(&mut rng, allowed.len(), k)
                .into_iter()
                .map(|i| Candidate {
                    index: allowed[i],
                    corr: 0.0,
                })
                .collect()
        })
        .collect();
    Ok(CandidateSet { per_channel })
}

/// A linear backbone trained to map a history to its continuation.
#[derive(Debug, Clone)]
pub struct ContinuationPredictor {
    model: LinearBackbone,
    report: TrainReport,
}

impl ContinuationPredictor {
    pub fn model(&self) -> &LinearBackbone {
        &self.model
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Predicted continuation, shaped like the query.
    pub fn forecast_continuation(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.model.forward(x, None)
    }
}

/// Trains a history-to-continuation predictor with the same protocol as the
/// forecasting backbone.
pub fn train_pbcc_predictor(
    train_chains: &[Chain],
    val_chains: &[Chain],
    backbone: &BackboneConfig,
    train_cfg: &TrainConfig,
) -> Result<ContinuationPredictor> {
    let first = train_chains
        .first()
        .ok_or_else(|| Error::config("no training chains for the continuation predictor"))?;
    let (l, channels) = first.history.dim();
    let cfg = BackboneConfig {
        input_len: l,
        output_len: l,
        channels,
        gate: None,
        ..backbone.clone()
    };
    let to_samples = |chains: &[Chain]| {
        SampleSet::from_pairs(
            chains
                .iter()
                .map(|c| (c.history.clone(), c.continuation.clone()))
                .collect(),
        )
    };
    let train_set = to_samples(train_chains)?;
    let val_set = if val_chains.is_empty() {
        train_set.clone()
    } else {
        to_samples(val_chains)?
    };
    let model = LinearBackbone::new(cfg, train_cfg.seed)?;
    let (model, report) = train(model, &train_set, &val_set, train_cfg)?;
    Ok(ContinuationPredictor { model, report })
}

/// Proxies for every window of a set, in window order.
pub fn construct_all(
    windows: &WindowSet,
    training: bool,
    library: &RetrievalLibrary,
    retrieval: &RetrievalConfig,
    cfg: &ContinuationConfig,
    ctx: &ConstructionContext<'_>,
) -> Result<Vec<Array2<f64>>> {
    use rayon::prelude::*;
    let searches = !matches!(cfg.variant, Variant::Pbcc | Variant::RandomRetrieval);
    let mut out = Vec::with_capacity(windows.len());
    for chunk_start in (0..windows.len()).step_by(SEARCH_CHUNK) {
        let idx: Vec<usize> = (chunk_start..(chunk_start + SEARCH_CHUNK).min(windows.len())).collect();
        let found = match (searches, ctx.candidates) {
            (true, None) => {
                let xs: Vec<_> = idx.iter().map(|&i| windows.x(i)).collect();
                let origins: Vec<_> = idx.iter().map(|&i| training.then_some(windows.start(i))).collect();
                Some(search_batch(&xs, &origins, library, retrieval)?)
            }
            _ => None,
        };
        let chunk = idx
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let id = QueryId {
                    start: windows.start(i),
                    training,
                };
                let local = ConstructionContext {
                    candidates: found.as_ref().map(|f| &f[b]).or(ctx.candidates),
                    ..*ctx
                };
                construct(windows.x(i), id, library, retrieval, cfg, &local).map(|r| r.z)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(chunk);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{extract_chains, Chain};
    use crate::library::{build_library, DEFAULT_EPSILON};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn cands(corrs: &[f64]) -> Vec<Candidate> {
        corrs
            .iter()
            .enumerate()
            .map(|(i, &corr)| Candidate { index: i, corr })
            .collect()
    }

    #[test]
    fn single_candidate_gets_all_weight() {
        for tau in [0.01, 1.0, 10.0] {
            assert_eq!(softmax_weights(&cands(&[0.3]), tau).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn equal_correlations_split_evenly() {
        let w = softmax_weights(&cands(&[0.6, 0.6]), 0.05).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn low_temperature_approaches_argmax() {
        let w = softmax_weights(&cands(&[0.9, 0.5]), 0.01).unwrap();
        // exp(-40) is about 4.2e-18.
        assert!(w[0] >= 1.0 - 1e-15);
        assert!(w[1] < 1e-17);
    }

    #[test]
    fn non_positive_tau_is_rejected() {
        assert!(softmax_weights(&cands(&[0.1]), 0.0).is_err());
        let cfg = ContinuationConfig {
            tau: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn two_entry_library() -> RetrievalLibrary {
        let mk = |scale: f64, start| Chain {
            history: array![[1.0, 2.0], [2.0, 1.0], [3.0, 5.0]],
            target: array![[0.0, 0.0]],
            continuation: array![[1.0, 2.0], [2.0, 1.0], [3.0, 5.0]] * scale,
            start,
        };
        build_library(&[mk(2.0, 0), mk(4.0, 10)], 1e-12, Descriptor::Ratio).unwrap()
    }

    #[test]
    fn aggregate_averages_with_equal_weights() {
        let lib = two_entry_library();
        let set = CandidateSet {
            per_channel: vec![cands(&[0.7, 0.7]), cands(&[0.7, 0.7])],
        };
        let (fused, w) = aggregate(&set, &lib, 0.1).unwrap();
        assert_eq!(w, vec![vec![0.5, 0.5]; 2]);
        for v in fused.iter() {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn clipping_degenerate_and_saturated() {
        let (c, t) = clip(Array2::<f64>::zeros((3, 2)).view(), 0.9);
        assert_eq!(t, 0.0);
        assert!(c.iter().all(|&v| v == 0.0));

        // Quantile 0.9 over 11 values 0..=10 lands exactly on 9.
        let r = Array2::from_shape_fn((11, 1), |(i, _)| i as f64);
        let (c, t) = clip(r.view(), 0.9);
        assert_eq!(t, 9.0);
        assert_abs_diff_eq!(c[[9, 0]], 9.0 * 1f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(c[[9, 0]] / 9.0, 0.761_594_155_955_764_9, epsilon = 1e-12);
    }

    #[test]
    fn small_values_pass_almost_unchanged() {
        let r = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 - 9.5);
        let (c, t) = clip(r.view(), 0.9);
        for (&orig, &out) in r.iter().zip(c.iter()) {
            assert!(out.abs() <= t);
            if orig.abs() <= 0.1 * t && orig != 0.0 {
                assert!(((out - orig) / orig).abs() <= 0.0034);
            }
        }
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let m = array![[1.0, -3.0], [2.0, 4.0]];
        // Sorted |m| = 1, 2, 3, 4; h = 3 * 0.5 = 1.5.
        assert_eq!(abs_quantile(m.view(), 0.5), 2.5);
        assert_eq!(abs_quantile(m.view(), 1.0), 4.0);
    }

    #[test]
    fn modulate_zero_ratio_is_identity() {
        let x = array![[1.5, -2.0], [0.25, 3.0]];
        let z = Array2::zeros((2, 2));
        assert_eq!(modulate(x.view(), z.view(), 1e-8, Descriptor::Ratio).unwrap(), x);
        assert_eq!(modulate(x.view(), z.view(), 1e-8, Descriptor::Residual).unwrap(), x);
    }

    #[test]
    fn modulate_cannot_move_zero_history() {
        let x = Array2::zeros((3, 2));
        let r = array![[1.0, -2.0], [0.5, 3.0], [9.0, 9.0]];
        assert!(modulate(x.view(), r.view(), 1e-8, Descriptor::Ratio)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_round_trips_single_entry() {
        let h = array![[0.5, -1.2], [1.1, 0.3], [-0.8, 2.0], [0.05, 1.5]];
        let f = array![[0.7, -1.0], [1.4, 0.25], [-0.6, 1.7], [0.2, 1.9]];
        let chain = Chain {
            history: h.clone(),
            target: array![[0.0, 0.0]],
            continuation: f.clone(),
            start: 0,
        };
        let lib = build_library(&[chain], 1e-9, Descriptor::Ratio).unwrap();
        let cfg = ContinuationConfig {
            clip: false,
            ..Default::default()
        };
        let res = construct(
            h.view(),
            QueryId {
                start: 0,
                training: false,
            },
            &lib,
            &RetrievalConfig::without_exclusion(1),
            &cfg,
            &ConstructionContext::default(),
        )
        .unwrap();
        for ((&hv, &fv), &out) in h.iter().zip(f.iter()).zip(res.unaligned.iter()) {
            if hv.abs() >= 0.1 {
                assert!(((out - fv) / fv).abs() <= 1e-4, "{out} vs {fv}");
            }
        }
        let expected = align(f.view(), h.view(), cfg.align_epsilon).unwrap();
        for (a, b) in res.z.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn align_identity_and_constant_channels() {
        let x = array![[1.0, 4.0], [2.0, -1.0], [6.0, 0.5]];
        let z = align(x.view(), x.view(), 1e-8).unwrap();
        for (a, b) in z.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let flat = array![[3.0, 7.0], [3.0, 7.0], [3.0, 7.0]];
        let z = align(flat.view(), x.view(), 1e-8).unwrap();
        let moments = column_moments(x.view());
        for c in 0..2 {
            for t in 0..3 {
                assert_abs_diff_eq!(z[[t, c]], moments[c].0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fit_length_pads_and_truncates() {
        let m = array![[1.0], [2.0]];
        assert_eq!(fit_length(m.view(), 4), array![[1.0], [2.0], [2.0], [2.0]]);
        assert_eq!(fit_length(m.view(), 1), array![[1.0]]);
        assert_eq!(fit_length(m.view(), 2), m);
    }

    fn toy_setup() -> (Partition, RetrievalLibrary) {
        let values = Array2::from_shape_fn((90, 2), |(t, c)| {
            (t as f64 * 0.3 + c as f64).sin() * 2.0 + 0.5 * (t as f64 * 0.05).cos()
        });
        let part = Partition::new(0, values);
        let lib = build_library(
            &extract_chains(&part, 8, 4, 1).unwrap(),
            DEFAULT_EPSILON,
            Descriptor::Ratio,
        )
        .unwrap();
        (part, lib)
    }

    #[test]
    fn random_variant_is_seeded() {
        let (part, lib) = toy_setup();
        let x = part.rows(40, 8).unwrap();
        let cfg = ContinuationConfig {
            variant: Variant::RandomRetrieval,
            ..Default::default()
        };
        let ctx = ConstructionContext {
            seed: 42,
            ..Default::default()
        };
        let q = QueryId {
            start: 40,
            training: true,
        };
        let ret = RetrievalConfig::new(3, 8, 4);
        let a = construct(x, q, &lib, &ret, &cfg, &ctx).unwrap();
        let b = construct(x, q, &lib, &ret, &cfg, &ctx).unwrap();
        assert_eq!(a, b);
        let other = ConstructionContext { seed: 43, ..ctx };
        let c = construct(x, q, &lib, &ret, &cfg, &other).unwrap();
        assert_ne!(a.weights, c.weights);
        for ch in a.weights.unwrap() {
            for (idx, _) in ch {
                assert!(lib.entries()[idx].source_start.abs_diff(40) >= 12);
            }
        }
    }

    #[test]
    fn target_variant_matches_dc_logic_when_lengths_agree() {
        // With pred_len == seq_len the target path needs no padding; compare it
        // against an explicit weighted average of the retrieved targets.
        let values = Array2::from_shape_fn((80, 1), |(t, _)| (t as f64 * 0.4).sin() + 2.0);
        let part = Partition::new(0, values);
        let lib = build_library(
            &extract_chains(&part, 6, 6, 1).unwrap(),
            DEFAULT_EPSILON,
            Descriptor::Ratio,
        )
        .unwrap();
        let x = part.rows(50, 6).unwrap();
        let ret = RetrievalConfig::without_exclusion(3);
        let ctx = ConstructionContext {
            train_series: Some(&part),
            pred_len: 6,
            ..Default::default()
        };
        let cfg = ContinuationConfig {
            variant: Variant::Target,
            tau: 0.5,
            ..Default::default()
        };
        let res = construct(
            x,
            QueryId {
                start: 50,
                training: false,
            },
            &lib,
            &ret,
            &cfg,
            &ctx,
        )
        .unwrap();
        let mut manual = Array2::<f64>::zeros((6, 1));
        for &(idx, w) in &res.weights.as_ref().unwrap()[0] {
            let s = lib.entries()[idx].source_start;
            manual = manual + part.rows(s + 6, 6).unwrap().mapv(|v| v * w);
        }
        for (a, b) in res.unaligned.iter().zip(manual.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let dc = ContinuationConfig {
            variant: Variant::DirectContinuation,
            ..cfg
        };
        let res_dc = construct(
            x,
            QueryId {
                start: 50,
                training: false,
            },
            &lib,
            &ret,
            &dc,
            &ctx,
        )
        .unwrap();
        assert_eq!(res_dc.weights, res.weights);
        assert_ne!(res_dc.unaligned, res.unaligned);
    }

    #[test]
    fn dc_requires_training_series_and_pbcc_a_predictor() {
        let (part, lib) = toy_setup();
        let x = part.rows(10, 8).unwrap();
        let q = QueryId {
            start: 10,
            training: false,
        };
        let ret = RetrievalConfig::without_exclusion(2);
        for variant in [Variant::DirectContinuation, Variant::Target] {
            let cfg = ContinuationConfig {
                variant,
                ..Default::default()
            };
            assert!(matches!(
                construct(x, q, &lib, &ret, &cfg, &ConstructionContext::default()),
                Err(Error::MissingTrainSeries(_))
            ));
        }
        let cfg = ContinuationConfig {
            variant: Variant::Pbcc,
            ..Default::default()
        };
        assert!(matches!(
            construct(x, q, &lib, &ret, &cfg, &ConstructionContext::default()),
            Err(Error::MissingPredictor)
        ));
    }

    #[test]
    fn descriptor_mismatch_is_a_config_error() {
        let (part, lib) = toy_setup();
        let cfg = ContinuationConfig {
            variant: Variant::Residual,
            ..Default::default()
        };
        let err = construct(
            part.rows(0, 8).unwrap(),
            QueryId {
                start: 0,
                training: false,
            },
            &lib,
            &RetrievalConfig::without_exclusion(1),
            &cfg,
            &ConstructionContext::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn tau_does_not_matter_for_a_single_neighbour() {
        let (part, lib) = toy_setup();
        let x = part.rows(33, 8).unwrap();
        let q = QueryId {
            start: 33,
            training: true,
        };
        let ret = RetrievalConfig::new(1, 8, 4);
        let outs: Vec<_> = [0.01, 1.0, 10.0]
            .into_iter()
            .map(|tau| {
                let cfg = ContinuationConfig {
                    tau,
                    ..Default::default()
                };
                construct(x, q, &lib, &ret, &cfg, &ConstructionContext::default()).unwrap()
            })
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(
            corrs in proptest::collection::vec(0.0f64..1.0, 1..10),
            tau in 0.005f64..20.0,
        ) {
            let w = softmax_weights(&cands(&corrs), tau).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn raising_a_correlation_never_lowers_its_weight(
            corrs in proptest::collection::vec(0.0f64..1.0, 2..8),
            bump in 0.0f64..0.5,
            tau in 0.01f64..5.0,
        ) {
            let before = softmax_weights(&cands(&corrs), tau).unwrap();
            let mut raised = corrs.clone();
            raised[0] = (raised[0] + bump).min(1.0);
            let after = softmax_weights(&cands(&raised), tau).unwrap();
            prop_assert!(after[0] >= before[0] - 1e-15);
        }

        #[test]
        fn clipped_values_stay_within_threshold(
            vals in proptest::collection::vec(-1e3f64..1e3, 4..60),
            q in 0.05f64..1.0,
        ) {
            let m = Array2::from_shape_vec((vals.len(), 1), vals).unwrap();
            let (c, t) = clip(m.view(), q);
            prop_assert!(c.iter().all(|v| v.abs() <= t));
        }

        #[test]
        fn alignment_matches_moments(
            p in proptest::collection::vec(-5.0f64..5.0, 24),
            x in proptest::collection::vec(-5.0f64..5.0, 24),
        ) {
            let p = Array2::from_shape_vec((12, 2), p).unwrap();
            let x = Array2::from_shape_vec((12, 2), x).unwrap();
            let z = align(p.view(), x.view(), 1e-8).unwrap();
            let mz = column_moments(z.view());
            let mx = column_moments(x.view());
            let mp = column_moments(p.view());
            for c in 0..2 {
                if mx[c].1 > 1e-6 && mp[c].1 > 1e-3 {
                    prop_assert!((mz[c].0 - mx[c].0).abs() < 1e-6);
                    prop_assert!((mz[c].1 - mx[c].1).abs() < 1e-6);
                }
            }
        }
    }
}
