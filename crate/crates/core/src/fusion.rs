//! Gated fusion of a main feature stream with an auxiliary one.
//!
//! The gate `γ` mixes the streams convexly and the residual coefficient `α`
//! then pulls the result back towards the main stream:
//! `X' = α·main + (1 − α)·(γ·main + (1 − γ)·aux)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One learnable scalar for every channel and step.
    Static,
    /// Per-channel gate computed from the streams' temporal means.
    Dynamic,
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(GateMode::Static),
            "dynamic" => Ok(GateMode::Dynamic),
            other => Err(Error::config(format!("unknown gate mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mode: GateMode,
    /// Gate logit, used in static mode.
    pub g: f64,
    /// Affine map from the `2C` stream summaries to `C` logits, dynamic mode only.
    pub phi_weight: Array2<f64>,
    pub phi_bias: Array1<f64>,
    pub alpha: f64,
}

impl GateParams {
    /// Gate with `γ = 0.5` everywhere.
    pub fn new(mode: GateMode, channels: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let (w, b) = match mode {
            GateMode::Static => (Array2::zeros((0, 0)), Array1::zeros(0)),
            GateMode::Dynamic => (Array2::zeros((channels, 2 * channels)), Array1::zeros(channels)),
        };
        Ok(Self {
            mode,
            g: 0.0,
            phi_weight: w,
            phi_bias: b,
            alpha,
        })
    }

    /// Zeroed parameters of the same shape, for accumulating gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            g: 0.0,
            phi_weight: Array2::zeros(self.phi_weight.raw_dim()),
            phi_bias: Array1::zeros(self.phi_bias.raw_dim()),
            alpha: self.alpha,
        }
    }

    pub(crate) fn slices(&self) -> [&[f64]; 3] {
        [
            std::slice::from_ref(&self.g),
            self.phi_weight.as_slice().expect("standard layout"),
            self.phi_bias.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [
            std::slice::from_mut(&mut self.g),
            self.phi_weight.as_slice_mut().expect("standard layout"),
            self.phi_bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn column_means(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).expect("non-empty time axis")
}

fn summaries(main: ArrayView2<'_, f64>, aux: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut s = column_means(main).to_vec();
    s.extend(column_means(aux).iter());
    Array1::from(s)
}

/// Per-channel gate values, broadcast along time by [`fuse`].
pub fn gate(main: ArrayView2<'_, f64>, aux: ArrayView2<'_, f64>, params: &GateParams) -> Result<Array1<f64>> {
    if main.dim() != aux.dim() {
        return Err(Error::shape(format!("main {:?} vs aux {:?}", main.dim(), aux.dim())));
    }
    let channels = main.ncols();
    match params.mode {
        GateMode::Static => Ok(Array1::from_elem(channels, sigmoid(params.g))),
        GateMode::Dynamic => {
            if params.phi_weight.dim() != (channels, 2 * channels) {
                return Err(Error::shape(format!(
                    "gate map is {:?}, features have {channels} channels",
                    params.phi_weight.dim()
                )));
            }
            if main.nrows() == 0 {
                return Err(Error::shape("empty time axis"));
            }
            let s = summaries(main, aux);
            let logits = params.phi_weight.dot(&s) + &params.phi_bias;
            Ok(logits.mapv(sigmoid))
        }
    }
}

/// Weight left on the auxiliary stream, `(1 − α)(1 − γ)`.
#[inline]
fn aux_weight(alpha: f64, gamma: f64) -> f64 {
    (1.0 - alpha) * (1.0 - gamma)
}

#[inline]
fn mix(m: f64, a: f64, u: f64) -> f64 {
    if u == 1.0 {
        return a;
    }
    let out = m - u * (m - a);
    // Rounding may step one ulp past the endpoints.
    out.clamp(m.min(a), m.max(a))
}

/// Residual gated fusion. Exact shortcuts: `α = 1` or `aux = main` returns
/// `main`, and `α = 0, γ = 0` returns `aux`.
pub fn fuse(
    main: ArrayView2<'_, f64>,
    aux: ArrayView2<'_, f64>,
    gamma: &Array1<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    if main.dim() != aux.dim() {
        return Err(Error::shape(format!("main {:?} vs aux {:?}", main.dim(), aux.dim())));
    }
    if gamma.len() != main.ncols() {
        return Err(Error::shape(format!(
            "gate has {} channels, features have {}",
            gamma.len(),
            main.ncols()
        )));
    }
    let mut out = main.to_owned();
    for ((mut col, a), &g) in out.axis_iter_mut(Axis(1)).zip(aux.axis_iter(Axis(1))).zip(gamma) {
        let u = aux_weight(alpha, g);
        Zip::from(&mut col).and(&a).for_each(|m, &a| *m = mix(*m, a, u));
    }
    Ok(out)
}

/// Gate followed by fusion.
pub fn gated_fuse(
    main: ArrayView2<'_, f64>,
    aux: ArrayView2<'_, f64>,
    params: &GateParams,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let gamma = gate(main, aux, params)?;
    let out = fuse(main, aux, &gamma, params.alpha)?;
    Ok((out, gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseGradients {
    pub main: Array2<f64>,
    pub aux: Array2<f64>,
    /// Gradient with respect to the gate parameters; `alpha` is left at zero.
    pub params: GateParams,
}

/// Backpropagates `upstream = ∂L/∂X'` through [`gated_fuse`].
pub fn fuse_backward(
    main: ArrayView2<'_, f64>,
    aux: ArrayView2<'_, f64>,
    params: &GateParams,
    gamma: &Array1<f64>,
    upstream: ArrayView2<'_, f64>,
) -> FuseGradients {
    let mut grads = FuseGradients {
        main: Array2::zeros(main.raw_dim()),
        aux: Array2::zeros(aux.raw_dim()),
        params: params.zeros_like(),
    };
    grads.params.alpha = 0.0;
    accumulate_fuse_backward(
        main,
        aux,
        params,
        gamma,
        upstream,
        &mut grads.params,
        Some((&mut grads.main, &mut grads.aux)),
    );
    grads
}

/// Adds the gate-parameter gradient into `param_grads`, and optionally the
/// stream gradients into the given buffers.
pub(crate) fn accumulate_fuse_backward(
    main: ArrayView2<'_, f64>,
    aux: ArrayView2<'_, f64>,
    params: &GateParams,
    gamma: &Array1<f64>,
    upstream: ArrayView2<'_, f64>,
    param_grads: &mut GateParams,
    streams: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) {
    let alpha = params.alpha;
    let channels = main.ncols();
    // ∂L/∂z for each channel's gate logit.
    let mut dlogit = Array1::<f64>::zeros(channels);
    for c in 0..channels {
        let mut dgamma = 0.0;
        for t in 0..main.nrows() {
            dgamma += upstream[[t, c]] * (main[[t, c]] - aux[[t, c]]);
        }
        let g = gamma[c];
        dlogit[c] = dgamma * (1.0 - alpha) * g * (1.0 - g);
    }

    let mut dsummary = None;
    match params.mode {
        GateMode::Static => param_grads.g += dlogit.sum(),
        GateMode::Dynamic => {
            let s = summaries(main, aux);
            for c in 0..channels {
                for j in 0..2 * channels {
                    param_grads.phi_weight[[c, j]] += dlogit[c] * s[j];
                }
                param_grads.phi_bias[c] += dlogit[c];
            }
            if streams.is_some() {
                dsummary = Some(params.phi_weight.t().dot(&dlogit));
            }
        }
    }

    if let Some((dmain, daux)) = streams {
        let n = main.nrows() as f64;
        for c in 0..channels {
            let u = aux_weight(alpha, gamma[c]);
            let (sm, sa) = match &dsummary {
                Some(ds) => (ds[c] / n, ds[channels + c] / n),
                None => (0.0, 0.0),
            };
            for t in 0..main.nrows() {
                let up = upstream[[t, c]];
                dmain[[t, c]] += up * (1.0 - u) + sm;
                daux[[t, c]] += up * u + sa;
            }
        }
    }
}
