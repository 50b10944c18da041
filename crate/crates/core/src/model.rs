//! Block assembly, residual chaining and the three-term loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::koopman::{
    default_segment_length, dynamic_branch, encode_segments, stable_predict, DynamicVars,
    KoopmanConfig, KoopmanParams,
};
use crate::spatial::{fuse_spatial, space_dynamic, space_stable, RoadGraph, SpatialConfig, SpatialParams};
use crate::wavelet::{gated_decompose, gated_decompose_node, DecomposedPair, DecomposedVars, GateParams, DEFAULT_LEVELS};

/// Architecture hyperparameters. Flat so it maps one-to-one onto config
/// files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub blocks: usize,
    pub wavelet_levels: usize,
    /// One gate kernel per node instead of one shared kernel.
    pub per_node_gate: bool,
    pub segment_length: usize,
    pub embed_dim: usize,
    pub codec_hidden: usize,
    pub ridge: f64,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub heads: usize,
    pub attn_dim: usize,
    pub fusion_hidden: usize,
    pub se_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(48, 24)
    }
}

impl ModelConfig {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        let k = KoopmanConfig::new(lookback, horizon);
        let s = SpatialConfig::default();
        ModelConfig {
            lookback,
            horizon,
            blocks: 2,
            wavelet_levels: DEFAULT_LEVELS,
            per_node_gate: false,
            segment_length: default_segment_length(lookback, horizon),
            embed_dim: k.embed_dim,
            codec_hidden: k.codec_hidden,
            ridge: k.ridge,
            gcn_layers: s.gcn_layers,
            gcn_hidden: s.gcn_hidden,
            heads: s.heads,
            attn_dim: s.attn_dim,
            fusion_hidden: s.fusion_hidden,
            se_ratio: s.se_ratio,
        }
    }

    pub fn koopman(&self) -> KoopmanConfig {
        KoopmanConfig {
            segment_length: self.segment_length,
            embed_dim: self.embed_dim,
            lookback: self.lookback,
            horizon: self.horizon,
            ridge: self.ridge,
            codec_hidden: self.codec_hidden,
        }
    }

    pub fn spatial(&self) -> SpatialConfig {
        SpatialConfig {
            gcn_layers: self.gcn_layers,
            gcn_hidden: self.gcn_hidden,
            heads: self.heads,
            attn_dim: self.attn_dim,
            fusion_hidden: self.fusion_hidden,
            se_ratio: self.se_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        if self.wavelet_levels == 0 || self.wavelet_levels > 8 {
            return Err(Error::Config(format!(
                "wavelet_levels must be in 1..=8, got {}",
                self.wavelet_levels
            )));
        }
        if self.lookback < 8 || self.horizon < 8 {
            return Err(Error::Config(format!(
                "lookback {} and horizon {} must both be >= 8 for an 8-tap filter",
                self.lookback, self.horizon
            )));
        }
        self.koopman().validate()?;
        self.spatial().validate()
    }
}

/// Parameters of one block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub gate: GateParams,
    pub spatial: SpatialParams,
    pub koopman: KoopmanParams,
}

/// A configured model and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    nodes: usize,
    store: ParamStore,
    blocks: Vec<BlockParams>,
}

impl Model {
    pub fn new(config: ModelConfig, nodes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if nodes == 0 {
            return Err(Error::Config("model needs at least one node".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (kc, sc) = (config.koopman(), config.spatial());
        let blocks = (0..config.blocks)
            .map(|b| {
                let prefix = format!("block{b}");
                BlockParams {
                    gate: GateParams::new(
                        &mut store,
                        &format!("{prefix}.gate"),
                        nodes,
                        config.per_node_gate,
                        &mut rng,
                    ),
                    spatial: SpatialParams::new(&mut store, &prefix, &sc, nodes, &mut rng),
                    koopman: KoopmanParams::new(&mut store, &format!("{prefix}.koopman"), &kc, nodes, &mut rng),
                }
            })
            .collect();
        Ok(Model {
            config,
            nodes,
            store,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    /// Builds the full forward pass for one `(T × N)` window.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, graph: &RoadGraph, x: Var) -> Result<ForwardVars> {
        model_forward(g, &self.store, &self.blocks, &self.config, graph, x)
    }

    /// Summed prediction for one window.
    pub fn predict(&self, graph: &RoadGraph, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vx = g.constant_ref(x);
        let out = self.forward(&mut g, graph, vx)?;
        Ok(g.value(out.y_hat).clone())
    }

    /// Splits a window with the first block's gate (no gradient).
    pub fn decompose(&self, x: &Tensor) -> Result<DecomposedPair> {
        gated_decompose(x, &self.store, &self.blocks[0].gate, self.config.wavelet_levels)
    }

    /// Decomposes consecutive `period`-row chunks of `x` independently and
    /// stacks the results. A trailing partial chunk is dropped.
    pub fn decompose_subsets(&self, x: &Tensor, period: usize) -> Result<DecomposedPair> {
        let chunks = if period == 0 { 0 } else { x.rows() / period };
        if chunks == 0 {
            return Err(Error::Data(format!(
                "{} steps hold no full subset of {period}",
                x.rows()
            )));
        }
        let parts = (0..chunks)
            .map(|c| self.decompose(&x.rows_range(c * period..(c + 1) * period)))
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&DecomposedPair) -> &Tensor| {
            let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
            Tensor::matrix(chunks * period, x.cols(), data)
        };
        Ok(DecomposedPair {
            x_ts: stack(|p| &p.x_ts)?,
            x_td: stack(|p| &p.x_td)?,
            gamma: stack(|p| &p.gamma)?,
            x_low: stack(|p| &p.x_low)?,
        })
    }
}

/// Graph handles of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub decomposed: DecomposedVars,
    pub fused_ts: Var,
    pub fused_td: Var,
    pub stable_embeddings: Var,
    pub dynamic: DynamicVars,
    pub y_ts_hat: Var,
    pub y_td_hat: Var,
    pub x_td_recon: Var,
    pub next_input: Var,
}

/// Gate → spatial paths → fusion → Koopman predictors for one block.
pub fn block_forward<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &BlockParams,
    cfg: &ModelConfig,
    graph: &RoadGraph,
    x: Var,
) -> Result<BlockVars> {
    let (t, n) = g.shape(x);
    if t != cfg.lookback || n != graph.node_count() {
        return Err(Error::shape(
            "block_forward",
            format!(
                "window {t}×{n}, expected {}×{}",
                cfg.lookback,
                graph.node_count()
            ),
        ));
    }
    let kc = cfg.koopman();
    let dec = gated_decompose_node(g, store, &params.gate, x, cfg.wavelet_levels, false)?;

    let spatial = |g: &mut Graph<'p>, stream: Var, fusion| -> Result<Var> {
        let ss = space_stable(g, store, &params.spatial.gcn, graph, stream)?;
        let sd = space_dynamic(g, store, &params.spatial.attention, stream)?;
        Ok(fuse_spatial(g, store, fusion, ss, sd)?.out)
    };
    let fused_ts = spatial(g, dec.x_ts, &params.spatial.fuse_ts)?;
    let fused_td = spatial(g, dec.x_td, &params.spatial.fuse_td)?;

    let e_ts = encode_segments(g, store, &params.koopman, &kc, fused_ts)?;
    let y_ts_hat = stable_predict(g, store, &params.koopman, &kc, e_ts)?;

    let e_td = encode_segments(g, store, &params.koopman, &kc, fused_td)?;
    let dynamic = dynamic_branch(g, store, &params.koopman, &kc, e_td)?;
    let next_input = g.sub(dec.x_td, dynamic.reconstruction)?;

    Ok(BlockVars {
        decomposed: dec,
        fused_ts,
        fused_td,
        stable_embeddings: e_ts,
        dynamic,
        y_ts_hat,
        y_td_hat: dynamic.prediction,
        x_td_recon: dynamic.reconstruction,
        next_input,
    })
}

/// Graph handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub y_hat: Var,
    pub y_ts_hat: Var,
    pub y_td_hat: Var,
    pub blocks: Vec<BlockVars>,
}

/// Chains blocks on the dynamic residual and sums every block's two
/// predictions, in block order, stable before dynamic.
pub fn model_forward<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    blocks: &[BlockParams],
    cfg: &ModelConfig,
    graph: &RoadGraph,
    x: Var,
) -> Result<ForwardVars> {
    if blocks.is_empty() {
        return Err(Error::Config("model has no blocks".into()));
    }
    let mut input = x;
    let mut outs = Vec::with_capacity(blocks.len());
    for (b, params) in blocks.iter().enumerate() {
        let out = block_forward(g, store, params, cfg, graph, input).map_err(|e| Error::Block {
            block: b,
            source: Box::new(e),
        })?;
        input = out.next_input;
        outs.push(out);
    }
    let mut y_ts = outs[0].y_ts_hat;
    let mut y_td = outs[0].y_td_hat;
    let mut y_hat = g.add(outs[0].y_ts_hat, outs[0].y_td_hat)?;
    for out in &outs[1..] {
        y_ts = g.add(y_ts, out.y_ts_hat)?;
        y_td = g.add(y_td, out.y_td_hat)?;
        y_hat = g.add(y_hat, out.y_ts_hat)?;
        y_hat = g.add(y_hat, out.y_td_hat)?;
    }
    Ok(ForwardVars {
        y_hat,
        y_ts_hat: y_ts,
        y_td_hat: y_td,
        blocks: outs,
    })
}

/// Stable, dynamic and cross terms of the squared error of a summed
/// prediction, plus the direct total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ts: f64,
    pub l_td: f64,
    pub l_cross: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// `|l_ts + l_td + l_cross − l_total|` relative to the larger of the two
    /// sides (absolute below 1).
    pub fn identity_gap(&self) -> f64 {
        let sum = self.l_ts + self.l_td + self.l_cross;
        (sum - self.l_total).abs() / self.l_total.abs().max(sum.abs()).max(1.0)
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            l_ts: self.l_ts * f,
            l_td: self.l_td * f,
            l_cross: self.l_cross * f,
            l_total: self.l_total * f,
        }
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.l_ts += o.l_ts;
        self.l_td += o.l_td;
        self.l_cross += o.l_cross;
        self.l_total += o.l_total;
    }
}

/// Target components must reproduce the target within this relative
/// tolerance.
const ADDITIVITY_TOL: f64 = 1e-9;

/// Splits the squared error of `ŷ_ts + ŷ_td` against `y = y_ts + y_td` into
/// `mean r_ts²`, `mean r_td²` and `2·mean(r_ts ⊙ r_td)`; `l_total` is the
/// direct `mean (y − ŷ)²`.
pub fn loss_breakdown(
    y_true: &Tensor,
    y_ts_hat: &Tensor,
    y_td_hat: &Tensor,
    y_ts_true: &Tensor,
    y_td_true: &Tensor,
) -> Result<LossBreakdown> {
    let shape = y_true.shape();
    for t in [y_ts_hat, y_td_hat, y_ts_true, y_td_true] {
        if t.shape() != shape {
            return Err(Error::shape("loss_breakdown", format!("{:?} vs {shape:?}", t.shape())));
        }
    }
    let n = y_true.numel() as f64;
    let (mut l_ts, mut l_td, mut l_cross, mut l_total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..y_true.numel() {
        let y = y_true.data()[i];
        let (ts, td) = (y_ts_true.data()[i], y_td_true.data()[i]);
        if (ts + td - y).abs() > ADDITIVITY_TOL * y.abs().max(1.0) {
            return Err(Error::Data(format!(
                "target components do not add up at entry {i}: {ts} + {td} != {y}"
            )));
        }
        let r_ts = ts - y_ts_hat.data()[i];
        let r_td = td - y_td_hat.data()[i];
        let r = y - (y_ts_hat.data()[i] + y_td_hat.data()[i]);
        l_ts += r_ts * r_ts;
        l_td += r_td * r_td;
        l_cross += 2.0 * r_ts * r_td;
        l_total += r * r;
    }
    Ok(LossBreakdown {
        l_ts: l_ts / n,
        l_td: l_td / n,
        l_cross: l_cross / n,
        l_total: l_total / n,
    })
}
