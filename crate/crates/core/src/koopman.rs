//! Koopman predictors over segment embeddings.
//!
//! A `(len × N)` window is cut into `len / L` consecutive segments; each
//! segment is flattened (row-major, `L·N` values) and encoded to a
//! `D`-dimensional embedding. Embedding matrices are `D × S`, one column per
//! segment. The stable branch advances embeddings with a learned operator and
//! a learned history-to-horizon mixer; the dynamic branch fits its operator
//! per window by least squares on consecutive snapshot pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{linalg, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Mlp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanConfig {
    pub segment_length: usize,
    pub embed_dim: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Tikhonov term of the snapshot solve.
    pub ridge: f64,
    /// Hidden width of the encoder/decoder MLPs; 0 makes both a single
    /// linear layer.
    pub codec_hidden: usize,
}

impl KoopmanConfig {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        KoopmanConfig {
            segment_length: default_segment_length(lookback, horizon),
            embed_dim: 64,
            lookback,
            horizon,
            ridge: 1e-6,
            codec_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.segment_length;
        if l == 0 || self.lookback % l != 0 || self.horizon % l != 0 {
            return Err(Error::Config(format!(
                "segment length {l} must divide lookback {} and horizon {}",
                self.lookback, self.horizon
            )));
        }
        if self.lookback / l < 2 {
            return Err(Error::Config(format!(
                "lookback {} gives {} segments; at least 2 are needed",
                self.lookback,
                self.lookback / l
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        Ok(())
    }

    pub fn segments_in(&self) -> usize {
        self.lookback / self.segment_length
    }

    pub fn segments_out(&self) -> usize {
        self.horizon / self.segment_length
    }
}

/// Segment length giving 8 input segments when that divides the horizon too,
/// otherwise the largest common divisor of both leaving at least 2 segments.
pub fn default_segment_length(lookback: usize, horizon: usize) -> usize {
    if lookback % 8 == 0 && horizon % (lookback / 8) == 0 && lookback >= 8 {
        return lookback / 8;
    }
    let mut best = 1;
    for l in 1..=lookback / 2 {
        if lookback % l == 0 && horizon % l == 0 && lookback / l >= 8.min(lookback) {
            best = l;
        }
    }
    best
}

/// Encoder, decoder and the stable-branch operators.
#[derive(Clone, Debug)]
pub struct KoopmanParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// `D × D`, initialized to the identity.
    pub k_ts: ParamId,
    /// `S_in × S_out`, initialized to copy the last history segment.
    pub mixer: ParamId,
}

impl KoopmanParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &KoopmanConfig,
        nodes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let width = cfg.segment_length * nodes;
        let (enc, dec): (Vec<usize>, Vec<usize>) = if cfg.codec_hidden == 0 {
            (vec![width, cfg.embed_dim], vec![cfg.embed_dim, width])
        } else {
            (
                vec![width, cfg.codec_hidden, cfg.embed_dim],
                vec![cfg.embed_dim, cfg.codec_hidden, width],
            )
        };
        let encoder = Mlp::new(store, &format!("{prefix}.encoder"), &enc, rng);
        let decoder = Mlp::new(store, &format!("{prefix}.decoder"), &dec, rng);
        let k_ts = store.add(format!("{prefix}.k_ts"), Tensor::identity(cfg.embed_dim));
        let (s_in, s_out) = (cfg.segments_in(), cfg.segments_out());
        let mixer = store.add(
            format!("{prefix}.mixer"),
            Tensor::from_fn(s_in, s_out, |r, _| if r == s_in - 1 { 1.0 } else { 0.0 }),
        );
        KoopmanParams {
            encoder,
            decoder,
            k_ts,
            mixer,
        }
    }
}

/// `D × (len / L)` embeddings of a `(len × N)` window.
pub fn encode_segments<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &KoopmanParams,
    cfg: &KoopmanConfig,
    x: Var,
) -> Result<Var> {
    let (len, n) = g.shape(x);
    let l = cfg.segment_length;
    if l == 0 || len % l != 0 {
        return Err(Error::shape(
            "encode_segments",
            format!("window length {len} not divisible by segment length {l}"),
        ));
    }
    let segments = g.reshape(x, len / l, l * n)?;
    let rows = params.encoder.forward(g, store, segments)?;
    Ok(g.transpose(rows))
}

/// Inverse of [`encode_segments`]'s layout: decodes each column to one
/// segment and stacks them into a `(S·L × N)` window.
pub fn decode_segments<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &KoopmanParams,
    cfg: &KoopmanConfig,
    e: Var,
) -> Result<Var> {
    let s = g.shape(e).1;
    let rows = g.transpose(e);
    let flat = params.decoder.forward(g, store, rows)?;
    let width = g.shape(flat).1;
    let l = cfg.segment_length;
    if width % l != 0 {
        return Err(Error::shape(
            "decode_segments",
            format!("decoder width {width} not divisible by segment length {l}"),
        ));
    }
    g.reshape(flat, s * l, width / l)
}

/// `φ_dec((K_ts · E_in) · M)`, an `(H × N)` window.
pub fn stable_predict<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &KoopmanParams,
    cfg: &KoopmanConfig,
    e_in: Var,
) -> Result<Var> {
    let (d, s) = g.shape(e_in);
    if d != cfg.embed_dim || s != cfg.segments_in() {
        return Err(Error::shape(
            "stable_predict",
            format!("embeddings {d}×{s}, expected {}×{}", cfg.embed_dim, cfg.segments_in()),
        ));
    }
    let k = g.param(store, params.k_ts);
    let m = g.param(store, params.mixer);
    let advanced = g.matmul(k, e_in)?;
    let out = g.matmul(advanced, m)?;
    decode_segments(g, store, params, cfg, out)
}

/// Operator mapping each embedding to the next: the minimum-norm solution of
/// `K · E_hist ≈ E_next`, with `E_hist`/`E_next` the first/last `S − 1`
/// columns of `e`.
pub fn edmd_fit(g: &mut Graph<'_>, e: Var, ridge: f64) -> Result<Var> {
    let s = g.shape(e).1;
    if s < 2 {
        return Err(Error::shape(
            "edmd_fit",
            format!("{s} snapshots; at least 2 are needed"),
        ));
    }
    let rows = g.transpose(e);
    let hist = g.slice_rows(rows, 0, s - 1)?;
    let next = g.slice_rows(rows, 1, s)?;
    let hist = g.transpose(hist);
    let next = g.transpose(next);
    g.least_squares_min_norm(hist, next, ridge)
}

/// Columns `K e, K² e, …, K^steps e`, by repeated multiplication.
pub fn dynamic_rollout(g: &mut Graph<'_>, k: Var, e_last: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::shape("dynamic_rollout", "steps must be >= 1".to_string()));
    }
    let mut cols = Vec::with_capacity(steps);
    let mut cur = e_last;
    for _ in 0..steps {
        cur = g.matmul(k, cur)?;
        cols.push(cur);
    }
    g.concat_cols(&cols)
}

/// Decodes `[ê_1, K·ê_1, …, K·ê_{S−1}]`: each column after the first is the
/// one-step prediction from the previous observed embedding.
pub fn reconstruct_input<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &KoopmanParams,
    cfg: &KoopmanConfig,
    k: Var,
    e: Var,
) -> Result<Var> {
    let s = g.shape(e).1;
    if s < 2 {
        return Err(Error::shape("reconstruct_input", format!("{s} snapshots")));
    }
    let rows = g.transpose(e);
    let first = g.slice_rows(rows, 0, 1)?;
    let hist = g.slice_rows(rows, 0, s - 1)?;
    let hist = g.transpose(hist);
    let stepped = g.matmul(k, hist)?;
    let stepped = g.transpose(stepped);
    let all = g.concat_rows(&[first, stepped])?;
    let all = g.transpose(all);
    decode_segments(g, store, params, cfg, all)
}

/// Graph handles of the dynamic branch.
#[derive(Clone, Copy, Debug)]
pub struct DynamicVars {
    pub embeddings: Var,
    pub operator: Var,
    pub prediction: Var,
    pub reconstruction: Var,
}

/// Fit, roll out and reconstruct for one window's dynamic embeddings.
pub fn dynamic_branch<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &KoopmanParams,
    cfg: &KoopmanConfig,
    e: Var,
) -> Result<DynamicVars> {
    let s = g.shape(e).1;
    let k = edmd_fit(g, e, cfg.ridge)?;
    let rows = g.transpose(e);
    let last = g.slice_rows(rows, s - 1, s)?;
    let last = g.transpose(last);
    let future = dynamic_rollout(g, k, last, cfg.segments_out())?;
    let prediction = decode_segments(g, store, params, cfg, future)?;
    let reconstruction = reconstruct_input(g, store, params, cfg, k, e)?;
    Ok(DynamicVars {
        embeddings: e,
        operator: k,
        prediction,
        reconstruction,
    })
}

/// Plain-tensor snapshot fit on a `D × S` embedding sequence.
pub fn fit_operator(e: &Tensor, ridge: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let ve = g.constant_ref(e);
    let k = edmd_fit(&mut g, ve, ridge)?;
    Ok(g.value(k).clone())
}

/// Plain-tensor rollout from a `D × 1` column.
pub fn rollout(k: &Tensor, e_last: &Tensor, steps: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vk, ve) = (g.constant_ref(k), g.constant_ref(e_last));
    let out = dynamic_rollout(&mut g, vk, ve, steps)?;
    Ok(g.value(out).clone())
}

/// Stability summary of one fitted operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatorDiagnostics {
    pub spectral_radius: f64,
    pub frobenius_norm: f64,
}

pub fn operator_diagnostics(k: &Tensor) -> Result<OperatorDiagnostics> {
    Ok(OperatorDiagnostics {
        spectral_radius: linalg::spectral_radius(k)?,
        frobenius_norm: k.frobenius_norm(),
    })
}
