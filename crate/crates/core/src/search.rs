//! Channel-wise Pearson similarity search over the library keys.
//!
//! Keys are stored as centered, unit-norm columns so a correlation is a single
//! dot product. Queries are scored in batches with one matrix product per
//! channel; a single search is a batch of one.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::library::{offset_last_step, RetrievalLibrary};

/// Pearson correlation; zero when either input has zero variance.
pub fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson inputs differ in length");
    let (Some(ua), Some(ub)) = (unit_centered(a), unit_centered(b)) else {
        return 0.0;
    };
    dot(&ua, &ub).clamp(-1.0, 1.0)
}

/// `(v - mean) / ||v - mean||`, or `None` for a constant vector.
fn unit_centered(v: ArrayView1<'_, f64>) -> Option<Vec<f64>> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if !(hi > lo) {
        return None;
    }
    let mean = v.sum() / v.len() as f64;
    let mut centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = dot(&centered, &centered).sqrt();
    if !(norm > 0.0) {
        return None;
    }
    centered.iter_mut().for_each(|x| *x /= norm);
    Some(centered)
}

/// Dot product with four interleaved accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unit-centered key columns, one `entries x seq_len` block per channel.
/// Rows of constant key columns are all zero, which yields correlation 0.
#[derive(Debug)]
pub(crate) struct KeyIndex {
    per_channel: Vec<Array2<f64>>,
}

impl KeyIndex {
    pub(crate) fn build(library: &RetrievalLibrary) -> Self {
        let (n, l) = (library.len(), library.seq_len());
        let per_channel = (0..library.channels())
            .into_par_iter()
            .map(|c| {
                let mut block = Array2::zeros((n, l));
                for (j, entry) in library.entries().iter().enumerate() {
                    if let Some(unit) = unit_centered(entry.key.column(c)) {
                        block.row_mut(j).assign(&ArrayView1::from(&unit[..]));
                    }
                }
                block
            })
            .collect();
        Self { per_channel }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    /// Correlation clamped to `[0, 1]`.
    pub corr: f64,
}

/// Per-channel Top-k neighbours, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub per_channel: Vec<Vec<Candidate>>,
}

impl CandidateSet {
    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    pub fn channel(&self, c: usize) -> &[Candidate] {
        &self.per_channel[c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Skip entries whose chain starts within `exclusion_radius` rows of a
    /// training query's own start.
    pub exclude_self_window: bool,
    pub exclusion_radius: usize,
}

impl RetrievalConfig {
    /// Exclusion on, with radius `seq_len + pred_len`: any chain overlapping
    /// the query's own target is skipped.
    pub fn new(k: usize, seq_len: usize, pred_len: usize) -> Self {
        Self {
            k,
            exclude_self_window: true,
            exclusion_radius: seq_len + pred_len,
        }
    }

    pub fn without_exclusion(k: usize) -> Self {
        Self {
            k,
            exclude_self_window: false,
            exclusion_radius: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("top-k must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn excludes(&self, query_start: Option<usize>, source_start: usize) -> bool {
        match query_start {
            Some(q) if self.exclude_self_window => q.abs_diff(source_start) < self.exclusion_radius,
            _ => false,
        }
    }
}

fn check_query(x: ArrayView2<'_, f64>, library: &RetrievalLibrary) -> Result<()> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if x.dim() != (library.seq_len(), library.channels()) {
        return Err(Error::shape(format!(
            "query is {:?}, library entries are ({}, {})",
            x.dim(),
            library.seq_len(),
            library.channels()
        )));
    }
    Ok(())
}

/// Top-k most positively correlated entries per channel.
///
/// `query_start` identifies a training query for self-match exclusion; pass
/// `None` for validation and test queries.
pub fn search(
    x: ArrayView2<'_, f64>,
    library: &RetrievalLibrary,
    cfg: &RetrievalConfig,
    query_start: Option<usize>,
) -> Result<CandidateSet> {
    let mut sets = search_batch(&[x], &[query_start], library, cfg)?;
    Ok(sets.pop().expect("one query in, one set out"))
}

/// [`search`] over many queries at once, one matrix product per channel.
///
/// Each output entry depends only on its own query, so a batch and a
/// sequence of single searches return identical sets.
pub fn search_batch(
    queries: &[ArrayView2<'_, f64>],
    query_starts: &[Option<usize>],
    library: &RetrievalLibrary,
    cfg: &RetrievalConfig,
) -> Result<Vec<CandidateSet>> {
    cfg.validate()?;
    if queries.len() != query_starts.len() {
        return Err(Error::shape(format!(
            "{} queries but {} start rows",
            queries.len(),
            query_starts.len()
        )));
    }
    for x in queries {
        check_query(*x, library)?;
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let index = library.key_index();
    let (l, channels, q) = (library.seq_len(), library.channels(), queries.len());
    let offsets: Vec<Array2<f64>> = queries.iter().map(|x| offset_last_step(*x)).collect();

    let mut per_query: Vec<Vec<Vec<Candidate>>> = vec![Vec::with_capacity(channels); q];
    for c in 0..channels {
        let mut cols = Array2::<f64>::zeros((l, q));
        let mut constant = vec![false; q];
        for (b, off) in offsets.iter().enumerate() {
            match unit_centered(off.column(c)) {
                Some(unit) => cols.column_mut(b).assign(&ArrayView1::from(&unit[..])),
                None => constant[b] = true,
            }
        }
        let scores = index.per_channel[c].dot(&cols);
        let lists: Vec<Vec<Candidate>> = (0..q)
            .into_par_iter()
            .map(|b| {
                let column = scores.column(b);
                let mut scored: Vec<Candidate> = library
                    .entries()
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| !cfg.excludes(query_starts[b], e.source_start))
                    .map(|(j, _)| Candidate {
                        index: j,
                        corr: if constant[b] { 0.0 } else { column[j].clamp(0.0, 1.0) },
                    })
                    .collect();
                top_k(&mut scored, cfg.k);
                scored
            })
            .collect();
        for (dst, list) in per_query.iter_mut().zip(lists) {
            dst.push(list);
        }
    }
    Ok(per_query
        .into_iter()
        .map(|per_channel| CandidateSet { per_channel })
        .collect())
}

/// Keeps the `k` best by descending correlation, ties to the smaller index.
fn top_k(scored: &mut Vec<Candidate>, k: usize) {
    let order = |a: &Candidate, b: &Candidate| b.corr.total_cmp(&a.corr).then_with(|| a.index.cmp(&b.index));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
}

/// Queries per matrix product in batched searches.
pub(crate) const SEARCH_CHUNK: usize = 256;

/// Candidate lists keyed by query start row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateCache {
    map: BTreeMap<usize, CandidateSet>,
}

impl CandidateCache {
    pub fn get(&self, query_start: usize) -> Option<&CandidateSet> {
        self.map.get(&query_start)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &CandidateSet)> {
        self.map.iter()
    }
}

/// Searches every window once. With `training_queries`, exclusion uses each
/// window's start row.
pub fn precompute_candidates(
    windows: &WindowSet,
    library: &RetrievalLibrary,
    cfg: &RetrievalConfig,
    training_queries: bool,
) -> Result<CandidateCache> {
    let mut map = BTreeMap::new();
    for chunk_start in (0..windows.len()).step_by(SEARCH_CHUNK) {
        let idx = chunk_start..(chunk_start + SEARCH_CHUNK).min(windows.len());
        let xs: Vec<_> = idx.clone().map(|i| windows.x(i)).collect();
        let origins: Vec<_> = idx
            .clone()
            .map(|i| training_queries.then_some(windows.start(i)))
            .collect();
        let sets = search_batch(&xs, &origins, library, cfg)?;
        map.extend(idx.map(|i| windows.start(i)).zip(sets));
    }
    Ok(CandidateCache { map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{extract_chains, Chain, Partition};
    use crate::library::{build_library, Descriptor, DEFAULT_EPSILON};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn pearson_basic_cases() {
        let a = array![1.0, 2.0, 3.0];
        assert_abs_diff_eq!(pearson(a.view(), array![2.0, 4.0, 6.0].view()), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(a.view(), array![3.0, 2.0, 1.0].view()), -1.0, epsilon = 1e-15);
        assert_eq!(pearson(array![5.0, 5.0, 5.0].view(), a.view()), 0.0);
        assert_eq!(pearson(a.view(), array![0.1, 0.1, 0.1].view()), 0.0);
    }

    fn wavy(len: usize, channels: usize, phase: f64) -> Array2<f64> {
        Array2::from_shape_fn((len, channels), |(t, c)| {
            (t as f64 * 0.21 + phase + c as f64).sin() + 0.05 * (t as f64 * 1.7).cos()
        })
    }

    fn library_from(values: Array2<f64>, l: usize, t: usize) -> RetrievalLibrary {
        let chains = extract_chains(&Partition::new(0, values), l, t, 1).unwrap();
        build_library(&chains, DEFAULT_EPSILON, Descriptor::Ratio).unwrap()
    }

    #[test]
    fn identical_key_ranks_first() {
        let lib = library_from(wavy(60, 2, 0.0), 8, 4);
        let probe = &lib.entries()[10];
        // Any history whose offset equals the stored key.
        let x = &probe.key + 3.5;
        let set = search(x.view(), &lib, &RetrievalConfig::without_exclusion(3), None).unwrap();
        for c in 0..2 {
            assert_eq!(set.channel(c)[0].index, 10);
            assert_abs_diff_eq!(set.channel(c)[0].corr, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn small_library_caps_candidate_count() {
        let lib = library_from(wavy(2 * 5 + 2 + 1, 1, 0.3), 5, 2);
        assert_eq!(lib.len(), 2);
        let set = search(
            wavy(5, 1, 1.0).view(),
            &lib,
            &RetrievalConfig::without_exclusion(3),
            None,
        )
        .unwrap();
        assert_eq!(set.channel(0).len(), 2);
    }

    #[test]
    fn mismatched_query_shape_is_rejected() {
        let lib = library_from(wavy(40, 2, 0.0), 6, 2);
        let cfg = RetrievalConfig::without_exclusion(1);
        assert!(matches!(
            search(wavy(5, 2, 0.0).view(), &lib, &cfg, None),
            Err(Error::Shape(_))
        ));
        assert!(RetrievalConfig::without_exclusion(0).validate().is_err());
    }

    #[test]
    fn negative_correlations_are_clamped_and_kept() {
        // Two chains: one rising, one falling history.
        let up = Array2::from_shape_fn((4, 1), |(t, _)| t as f64);
        let down = Array2::from_shape_fn((4, 1), |(t, _)| -(t as f64));
        let mk = |h: Array2<f64>, start| Chain {
            history: h.clone(),
            target: h.slice(ndarray::s![..1, ..]).to_owned(),
            continuation: h + 1.0,
            start,
        };
        let lib = build_library(&[mk(down, 0), mk(up.clone(), 100)], DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        let set = search(up.view(), &lib, &RetrievalConfig::without_exclusion(2), None).unwrap();
        let c = set.channel(0);
        assert_eq!(c[0].index, 1);
        assert_eq!(c[1], Candidate { index: 0, corr: 0.0 });
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let h = Array2::from_shape_fn((4, 1), |(t, _)| (t * t) as f64);
        let chains: Vec<Chain> = (0..4)
            .map(|i| Chain {
                history: &h * (i + 1) as f64,
                target: Array2::zeros((1, 1)),
                continuation: h.clone(),
                start: i * 50,
            })
            .collect();
        let lib = build_library(&chains, DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        let set = search(h.view(), &lib, &RetrievalConfig::without_exclusion(2), None).unwrap();
        let idx: Vec<_> = set.channel(0).iter().map(|c| c.index).collect();
        // All four keys are positive rescalings of the query.
        assert!(set.channel(0).iter().all(|c| (c.corr - 1.0).abs() < 1e-12));
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(idx, sorted);
    }

    #[test]
    fn exclusion_skips_overlapping_chains() {
        let (l, t) = (6, 3);
        let values = wavy(80, 2, 0.0);
        let part = Partition::new(0, values);
        let lib = build_library(
            &extract_chains(&part, l, t, 1).unwrap(),
            DEFAULT_EPSILON,
            Descriptor::Ratio,
        )
        .unwrap();
        let windows = WindowSet::new(part, l, t).unwrap();
        let cfg = RetrievalConfig {
            k: 5,
            ..RetrievalConfig::new(5, l, t)
        };
        let cache = precompute_candidates(&windows, &lib, &cfg, true).unwrap();
        for (&start, set) in cache.iter() {
            for c in &set.per_channel {
                for cand in c {
                    let src = lib.entries()[cand.index].source_start;
                    assert!(start.abs_diff(src) >= l + t);
                }
            }
        }
        // Radius 0 emulates no exclusion: the self chain is found.
        let open = RetrievalConfig {
            exclusion_radius: 0,
            ..cfg
        };
        let set = search(windows.x(20), &lib, &open, Some(windows.start(20))).unwrap();
        assert_eq!(set.channel(0)[0].index, 20);
    }

    #[test]
    fn cache_matches_fresh_search() {
        let (l, t) = (7, 2);
        let lib = library_from(wavy(70, 3, 0.4), l, t);
        let windows = WindowSet::new(Partition::new(500, wavy(40, 3, 2.0)), l, t).unwrap();
        let cfg = RetrievalConfig::new(4, l, t);
        let cache = precompute_candidates(&windows, &lib, &cfg, false).unwrap();
        assert_eq!(cache.len(), windows.len());
        for i in 0..windows.len() {
            let fresh = search(windows.x(i), &lib, &cfg, None).unwrap();
            assert_eq!(cache.get(windows.start(i)), Some(&fresh));
        }
    }

    #[test]
    fn long_batches_match_single_queries() {
        let (l, t) = (40, 6);
        let lib = library_from(wavy(400, 2, 0.1), l, t);
        let windows = WindowSet::new(Partition::new(900, wavy(350, 2, 1.3)), l, t).unwrap();
        let cfg = RetrievalConfig::new(5, l, t);
        let cache = precompute_candidates(&windows, &lib, &cfg, true).unwrap();
        for i in (0..windows.len()).step_by(7) {
            let fresh = search(windows.x(i), &lib, &cfg, Some(windows.start(i))).unwrap();
            assert_eq!(cache.get(windows.start(i)), Some(&fresh));
        }
    }

    #[test]
    fn empty_query_list_gives_empty_cache() {
        let lib = library_from(wavy(40, 1, 0.0), 5, 2);
        let windows = WindowSet::new(Partition::new(0, wavy(10, 1, 0.0)), 5, 2)
            .unwrap()
            .truncated(0);
        let cache = precompute_candidates(&windows, &lib, &RetrievalConfig::new(2, 5, 2), true).unwrap();
        assert!(cache.is_empty());
    }

    proptest! {
        #[test]
        fn pearson_is_invariant_to_positive_affine_maps(
            a in proptest::collection::vec(-10.0f64..10.0, 8),
            b in proptest::collection::vec(-10.0f64..10.0, 8),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            let moved = &b * scale + shift;
            let r0 = pearson(a.view(), b.view());
            let r1 = pearson(a.view(), moved.view());
            prop_assert!((r0 - r1).abs() < 1e-9, "{r0} vs {r1}");
        }

        #[test]
        fn level_shift_does_not_change_candidates(shift in -100.0f64..100.0, phase in 0.0f64..6.0) {
            let lib = library_from(wavy(60, 2, 0.0), 8, 3);
            let x = wavy(8, 2, phase);
            let cfg = RetrievalConfig::without_exclusion(4);
            let a = search(x.view(), &lib, &cfg, None).unwrap();
            let b = search((&x + shift).view(), &lib, &cfg, None).unwrap();
            // Offsetting cancels the shift only up to rounding of the subtraction.
            for (ca, cb) in a.per_channel.iter().zip(&b.per_channel) {
                for (p, q) in ca.iter().zip(cb) {
                    prop_assert!((p.corr - q.corr).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn candidate_lists_are_sorted_and_bounded(phase in 0.0f64..6.0, k in 1usize..8) {
            let lib = library_from(wavy(50, 2, 0.7), 6, 2);
            let set = search(wavy(6, 2, phase).view(), &lib, &RetrievalConfig::without_exclusion(k), None).unwrap();
            for c in &set.per_channel {
                prop_assert!(c.len() == k.min(lib.len()));
                prop_assert!(c.windows(2).all(|w| w[0].corr >= w[1].corr));
                prop_assert!(c.iter().all(|x| (0.0..=1.0).contains(&x.corr)));
            }
        }
    }
}
