//! Decomposition-plus-linear forecaster.
//!
//! Each input channel is split into a moving-average trend and the seasonal
//! remainder; two linear maps from `L` to `T` steps are applied to the two
//! parts and summed. When an auxiliary stream is supplied it is decomposed the
//! same way and fused into both parts before the linear maps.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{accumulate_fuse_backward, gated_fuse, GateMode, GateParams};

pub const DEFAULT_KERNEL: usize = 25;

const MAGIC: &[u8; 8] = b"RCASTCKP";
const VERSION: u32 = 1;

/// Moving-average decomposition with replicated edges.
pub fn decompose(x: ArrayView2<'_, f64>, kernel: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::config(format!(
            "moving-average kernel must be odd, got {kernel}"
        )));
    }
    let (len, channels) = x.dim();
    if len == 0 {
        return Err(Error::shape("empty window"));
    }
    let half = (kernel - 1) / 2;
    let mut trend = Array2::zeros((len, channels));
    for c in 0..channels {
        let col = x.column(c);
        for t in 0..len {
            let mut acc = 0.0;
            for j in 0..kernel {
                let idx = (t + j).saturating_sub(half).min(len - 1);
                acc += col[idx];
            }
            trend[[t, c]] = acc / kernel as f64;
        }
    }
    let seasonal = &x - &trend;
    Ok((seasonal, trend))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub mode: GateMode,
    pub alpha: f64,
    /// Separate gates for the seasonal and trend parts.
    pub per_stream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_len: usize,
    pub output_len: usize,
    pub channels: usize,
    pub kernel: usize,
    /// One pair of linear maps per channel instead of a shared pair.
    pub individual: bool,
    pub gate: Option<GateConfig>,
}

impl BackboneConfig {
    pub fn new(input_len: usize, output_len: usize, channels: usize) -> Self {
        Self {
            input_len,
            output_len,
            channels,
            kernel: DEFAULT_KERNEL,
            individual: false,
            gate: None,
        }
    }

    pub fn with_gate(mut self, mode: GateMode, alpha: f64) -> Self {
        self.gate = Some(GateConfig {
            mode,
            alpha,
            per_stream: false,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 || self.channels == 0 {
            return Err(Error::config("lengths and channel count must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "moving-average kernel must be odd, got {}",
                self.kernel
            )));
        }
        if let Some(g) = &self.gate {
            if !(0.0..=1.0).contains(&g.alpha) {
                return Err(Error::config(format!("alpha must lie in [0, 1], got {}", g.alpha)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[output_len × input_len]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }
}

/// Every trainable array of a backbone, also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub seasonal: Vec<Linear>,
    pub trend: Vec<Linear>,
    pub gates: Vec<GateParams>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Linear>| {
            v.iter()
                .map(|l| Linear::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect()
        };
        Self {
            seasonal: z(&self.seasonal),
            trend: z(&self.trend),
            gates: self.gates.iter().map(GateParams::zeros_like).collect(),
        }
    }

    /// Flat views in a fixed order shared by [`Params::slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.seasonal.iter().chain(&self.trend) {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        for g in &self.gates {
            out.extend(g.slices());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.seasonal.iter_mut().chain(self.trend.iter_mut()) {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        for g in &mut self.gates {
            out.extend(g.slices_mut());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBackbone {
    cfg: BackboneConfig,
    params: Params,
}

/// Decomposed (and possibly fused) inputs of a batch, laid out as columns
/// `b * C + c` of `[input_len × B·C]` matrices.
struct BatchFeatures {
    seasonal: Array2<f64>,
    trend: Array2<f64>,
    fused: Vec<FusedSample>,
}

/// Per-sample inputs of the two gates, kept for the backward pass.
struct FusedSample {
    seasonal: (Array2<f64>, Array2<f64>, Array1<f64>),
    trend: (Array2<f64>, Array2<f64>, Array1<f64>),
}

impl LinearBackbone {
    /// Weights uniform in `[-1/L, 1/L]`, biases zero, gates at `γ = 0.5`.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / cfg.input_len as f64;
        let maps = if cfg.individual { cfg.channels } else { 1 };
        let mut draw = || {
            (0..maps)
                .map(|_| Linear {
                    weight: Array2::from_shape_simple_fn((cfg.output_len, cfg.input_len), || {
                        rng.gen_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(cfg.output_len),
                })
                .collect::<Vec<_>>()
        };
        let seasonal = draw();
        let trend = draw();
        let gates = match &cfg.gate {
            None => Vec::new(),
            Some(g) => {
                let n = if g.per_stream { 2 } else { 1 };
                (0..n)
                    .map(|_| GateParams::new(g.mode, cfg.channels, g.alpha))
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            cfg,
            params: Params { seasonal, trend, gates },
        })
    }

    /// A model whose weights, biases and gate logits are all zero.
    pub fn zeros(cfg: BackboneConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.scale(0.0);
        Ok(m)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn is_augmented(&self) -> bool {
        !self.params.gates.is_empty()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
        let want = (self.cfg.input_len, self.cfg.channels);
        if x.dim() != want {
            return Err(Error::shape(format!("{what} is {:?}, model expects {want:?}", x.dim())));
        }
        Ok(())
    }

    fn features(&self, xs: &[ArrayView2<'_, f64>], zs: Option<&[ArrayView2<'_, f64>]>) -> Result<BatchFeatures> {
        if xs.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        match (zs, self.is_augmented()) {
            (Some(_), false) => return Err(Error::MissingGate),
            (None, true) => return Err(Error::config("augmented model needs an auxiliary stream")),
            (Some(z), true) if z.len() != xs.len() => {
                return Err(Error::shape(format!(
                    "{} inputs but {} auxiliary windows",
                    xs.len(),
                    z.len()
                )))
            }
            _ => {}
        }
        let kernel = self.cfg.kernel;
        let gates = &self.params.gates;
        let per_sample: Vec<(Array2<f64>, Array2<f64>, Option<FusedSample>)> = (0..xs.len())
            .into_par_iter()
            .map(|b| {
                self.check_input(xs[b], "input")?;
                let (sx, tx) = decompose(xs[b], kernel)?;
                let Some(zs) = zs else {
                    return Ok((sx, tx, None));
                };
                self.check_input(zs[b], "auxiliary input")?;
                let (sz, tz) = decompose(zs[b], kernel)?;
                let (fs, gs) = gated_fuse(sx.view(), sz.view(), &gates[0])?;
                let (ft, gt) = gated_fuse(tx.view(), tz.view(), &gates[gates.len() - 1])?;
                let cache = FusedSample {
                    seasonal: (sx, sz, gs),
                    trend: (tx, tz, gt),
                };
                Ok((fs, ft, Some(cache)))
            })
            .collect::<Result<_>>()?;

        let c = self.cfg.channels;
        let cols = xs.len() * c;
        let mut seasonal = Array2::zeros((self.cfg.input_len, cols));
        let mut trend = Array2::zeros((self.cfg.input_len, cols));
        let mut fused = Vec::new();
        for (b, (s, t, cache)) in per_sample.into_iter().enumerate() {
            seasonal.slice_mut(s![.., b * c..(b + 1) * c]).assign(&s);
            trend.slice_mut(s![.., b * c..(b + 1) * c]).assign(&t);
            fused.extend(cache);
        }
        Ok(BatchFeatures { seasonal, trend, fused })
    }

    /// Columns of the stacked feature matrix handled by map `m`.
    fn map_columns(&self, m: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
        if self.cfg.individual {
            s![.., m..;self.cfg.channels]
        } else {
            s![.., ..]
        }
    }

    fn apply(&self, f: &BatchFeatures) -> Array2<f64> {
        let cols = f.seasonal.ncols();
        let mut out = Array2::zeros((self.cfg.output_len, cols));
        for (m, (ls, lt)) in self.params.seasonal.iter().zip(&self.params.trend).enumerate() {
            let sel = self.map_columns(m);
            let mut y = ls.weight.dot(&f.seasonal.slice(sel)) + lt.weight.dot(&f.trend.slice(sel));
            let bias = &ls.bias + &lt.bias;
            y += &bias.insert_axis(Axis(1));
            out.slice_mut(sel).assign(&y);
        }
        out
    }

    fn unstack(&self, stacked: Array2<f64>, batch: usize) -> Vec<Array2<f64>> {
        let c = self.cfg.channels;
        (0..batch)
            .map(|b| stacked.slice(s![.., b * c..(b + 1) * c]).to_owned())
            .collect()
    }

    /// Forecast for one window, `[output_len × C]`.
    pub fn forward(&self, x: ArrayView2<'_, f64>, z: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
        let zs = z.map(|z| [z]);
        Ok(self.forward_batch(&[x], zs.as_ref().map(|z| &z[..]))?.remove(0))
    }

    pub fn forward_batch(
        &self,
        xs: &[ArrayView2<'_, f64>],
        zs: Option<&[ArrayView2<'_, f64>]>,
    ) -> Result<Vec<Array2<f64>>> {
        let f = self.features(xs, zs)?;
        Ok(self.unstack(self.apply(&f), xs.len()))
    }

    /// Mean squared error over the batch and its analytic gradient.
    pub fn loss_and_gradients(
        &self,
        xs: &[ArrayView2<'_, f64>],
        zs: Option<&[ArrayView2<'_, f64>]>,
        ys: &[ArrayView2<'_, f64>],
    ) -> Result<(f64, Params)> {
        if ys.len() != xs.len() {
            return Err(Error::shape(format!("{} inputs but {} targets", xs.len(), ys.len())));
        }
        let f = self.features(xs, zs)?;
        let pred = self.apply(&f);
        let c = self.cfg.channels;
        let mut diff = pred;
        for (b, y) in ys.iter().enumerate() {
            if y.dim() != (self.cfg.output_len, c) {
                return Err(Error::shape(format!(
                    "target is {:?}, model predicts {:?}",
                    y.dim(),
                    (self.cfg.output_len, c)
                )));
            }
            let mut block = diff.slice_mut(s![.., b * c..(b + 1) * c]);
            block -= y;
        }
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let upstream = diff.mapv(|d| 2.0 * d / n);

        let mut grads = self.params.zeros_like();
        let mut d_seasonal = self.is_augmented().then(|| Array2::zeros(f.seasonal.raw_dim()));
        let mut d_trend = self.is_augmented().then(|| Array2::zeros(f.trend.raw_dim()));
        for m in 0..self.params.seasonal.len() {
            let sel = self.map_columns(m);
            let g = upstream.slice(sel);
            let db = g.sum_axis(Axis(1));
            let gs = &mut grads.seasonal[m];
            gs.weight = g.dot(&f.seasonal.slice(sel).t());
            gs.bias = db.clone();
            let gt = &mut grads.trend[m];
            gt.weight = g.dot(&f.trend.slice(sel).t());
            gt.bias = db;
            if let (Some(ds), Some(dt)) = (d_seasonal.as_mut(), d_trend.as_mut()) {
                ds.slice_mut(sel).assign(&self.params.seasonal[m].weight.t().dot(&g));
                dt.slice_mut(sel).assign(&self.params.trend[m].weight.t().dot(&g));
            }
        }

        if let (Some(ds), Some(dt)) = (d_seasonal, d_trend) {
            let last = self.params.gates.len() - 1;
            for (b, cache) in f.fused.iter().enumerate() {
                let cols = s![.., b * c..(b + 1) * c];
                let (sx, sz, gs) = &cache.seasonal;
                accumulate_fuse_backward(
                    sx.view(),
                    sz.view(),
                    &self.params.gates[0],
                    gs,
                    ds.slice(cols),
                    &mut grads.gates[0],
                    None,
                );
                let (tx, tz, gt) = &cache.trend;
                accumulate_fuse_backward(
                    tx.view(),
                    tz.view(),
                    &self.params.gates[last],
                    gt,
                    dt.slice(cols),
                    &mut grads.gates[last],
                    None,
                );
            }
        }
        Ok((loss, grads))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|source| Error::Open {
            path: path.to_path_buf(),
            source,
        })?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let cfg = &self.cfg;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for v in [cfg.input_len, cfg.output_len, cfg.channels, cfg.kernel] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let (mode, alpha, per_stream) = match &cfg.gate {
            None => (0u8, 0.0, 0u8),
            Some(g) => (
                match g.mode {
                    GateMode::Static => 1,
                    GateMode::Dynamic => 2,
                },
                g.alpha,
                g.per_stream as u8,
            ),
        };
        out.write_all(&[cfg.individual as u8, mode, per_stream, 0])?;
        out.write_all(&alpha.to_le_bytes())?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for s in self.params.slices() {
            for v in s {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|source| Error::Open {
                path: path.to_path_buf(),
                source,
            })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 4 + 16 + 4 + 8 + 8;
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic { expected: "RCASTCKP" });
        }
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                expected: HEADER as u64,
                actual: bytes.len() as u64,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let [input_len, output_len, channels, kernel] = [12, 16, 20, 24].map(|o| u32_at(o) as usize);
        let flags = &bytes[28..32];
        let alpha = f64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
        let gate = match flags[1] {
            0 => None,
            m @ (1 | 2) => Some(GateConfig {
                mode: if m == 1 { GateMode::Static } else { GateMode::Dynamic },
                alpha,
                per_stream: flags[2] != 0,
            }),
            other => return Err(Error::Malformed(format!("unknown gate mode code {other}"))),
        };
        let cfg = BackboneConfig {
            input_len,
            output_len,
            channels,
            kernel,
            individual: flags[0] != 0,
            gate,
        };
        let mut model = Self::zeros(cfg).map_err(|e| Error::Malformed(e.to_string()))?;
        if model.params.len() as u64 != count {
            return Err(Error::Malformed(format!(
                "header declares {count} parameters, shapes imply {}",
                model.params.len()
            )));
        }
        let expected = HEADER as u64 + 8 * count;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 > expected {
            return Err(Error::Malformed("trailing bytes after parameters".into()));
        }
        let mut chunks = bytes[HEADER..].chunks_exact(8);
        for s in model.params.slices_mut() {
            for v in s.iter_mut() {
                *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
            }
        }
        Ok(model)
    }
}
