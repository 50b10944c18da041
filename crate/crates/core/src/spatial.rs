//! Spatial modules: graph convolution over the fixed road network, all-pair
//! attention over learned node similarities, and the gated fusion of the two.
//!
//! Windows are `(time × node)`; both modules act on every timestep with
//! shared weights.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;

/// Road network with its cached weighted normalized adjacency.
#[derive(Clone, Debug)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    adjacency: Tensor,
    alpha: f64,
    normalized: Tensor,
}

impl RoadGraph {
    pub fn new(node_ids: Vec<String>, adjacency: Tensor, alpha: f64) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.shape() != [n, n] {
            return Err(Error::Data(format!(
                "adjacency {:?} does not match {n} nodes",
                adjacency.shape()
            )));
        }
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(Error::Data(format!("node {i} has a self-loop in the adjacency")));
            }
            for j in 0..n {
                let w = adjacency.get(i, j);
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::Data(format!("edge ({i},{j}) has weight {w}")));
                }
                if w != adjacency.get(j, i) {
                    return Err(Error::Data(format!("adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
        let normalized = normalize_adjacency(&adjacency, alpha)?;
        Ok(RoadGraph {
            node_ids,
            adjacency,
            alpha,
            normalized,
        })
    }

    /// Builds a graph from undirected weighted edges over `n` nodes.
    pub fn from_edges(
        node_ids: Vec<String>,
        edges: &[(usize, usize, f64)],
        alpha: f64,
    ) -> Result<Self> {
        let n = node_ids.len();
        let mut a = Tensor::zeros(n, n);
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::Data(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            if i == j {
                continue;
            }
            let w = w.max(a.get(i, j));
            a.set(i, j, w);
            a.set(j, i, w);
        }
        RoadGraph::new(node_ids, a, alpha)
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i, j) > 0.0
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        RoadGraph::new(self.node_ids.clone(), self.adjacency.clone(), alpha)
    }

    /// Induced subgraph on `keep` (indices into the current node list).
    pub fn subgraph(&self, keep: &[usize]) -> Result<Self> {
        let ids = keep.iter().map(|&i| self.node_ids[i].clone()).collect();
        let a = Tensor::from_fn(keep.len(), keep.len(), |r, c| {
            self.adjacency.get(keep[r], keep[c])
        });
        RoadGraph::new(ids, a, self.alpha)
    }

    pub fn load_json(path: &Path, alpha: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_str(&text)?;
        file.into_graph(alpha)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&GraphFile::from_graph(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk adjacency: `{"nodes": [ids...], "edges": [[i, j, w], ...]}` with
/// `i`, `j` indexing into `nodes`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl GraphFile {
    pub fn into_graph(self, alpha: f64) -> Result<RoadGraph> {
        RoadGraph::from_edges(self.nodes, &self.edges, alpha)
    }

    pub fn from_graph(g: &RoadGraph) -> Self {
        let n = g.node_count();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = g.adjacency.get(i, j);
                if w > 0.0 {
                    edges.push((i, j, w));
                }
            }
        }
        GraphFile {
            nodes: g.node_ids.clone(),
            edges,
        }
    }
}

/// `D̃^{-1/2} (αA + (1−α)I) D̃^{-1/2}` with `D̃` the row sums of the weighted
/// self-looped matrix.
pub fn normalize_adjacency(a: &Tensor, alpha: f64) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("normalize_adjacency", format!("{:?}", a.shape())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if a.data().iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Data("adjacency weights must be finite and nonnegative".into()));
    }
    let weighted = Tensor::from_fn(n, n, |r, c| {
        alpha * a.get(r, c) + if r == c { 1.0 - alpha } else { 0.0 }
    });
    let mut inv_sqrt = Vec::with_capacity(n);
    for r in 0..n {
        let deg: f64 = weighted.row(r).iter().sum();
        if deg <= 0.0 {
            return Err(Error::Data(format!("node {r} has zero degree")));
        }
        inv_sqrt.push(1.0 / deg.sqrt());
    }
    Ok(Tensor::from_fn(n, n, |r, c| {
        (inv_sqrt[r] * inv_sqrt[c]) * weighted.get(r, c)
    }))
}

/// Hyperparameters of the spatial modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub heads: usize,
    /// Query/key width; must be divisible by `heads`.
    pub attn_dim: usize,
    pub fusion_hidden: usize,
    pub se_ratio: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            gcn_layers: 2,
            gcn_hidden: 8,
            heads: 4,
            attn_dim: 16,
            fusion_hidden: 8,
            se_ratio: 4,
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be >= 1".into()));
        }
        if self.heads == 0 || self.attn_dim == 0 || self.attn_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} must be a positive multiple of heads {}",
                self.attn_dim, self.heads
            )));
        }
        if self.gcn_hidden == 0 || self.fusion_hidden == 0 || self.se_ratio == 0 {
            return Err(Error::Config("spatial widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// `out[(t,n), :] = Σ_m Â[n,m] · h[(t,m), :]` for rows ordered time-major.
struct NodePropagate {
    /// Nonzero entries of `Â` per row: `(column, weight)`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl NodePropagate {
    fn new(a: &Tensor) -> Self {
        let rows = (0..a.rows())
            .map(|i| {
                a.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(m, w)| (m, *w))
                    .collect()
            })
            .collect();
        NodePropagate { rows }
    }

    /// `Â` is symmetric, so the same kernel serves the backward pass.
    fn apply(&self, h: &[f64], feats: usize) -> Vec<f64> {
        let n = self.rows.len();
        let mut out = vec![0.0; h.len()];
        for (src, dst) in h.chunks(n * feats).zip(out.chunks_mut(n * feats)) {
            for (i, nbrs) in self.rows.iter().enumerate() {
                let o = &mut dst[i * feats..(i + 1) * feats];
                for &(m, w) in nbrs {
                    for (x, y) in o.iter_mut().zip(&src[m * feats..(m + 1) * feats]) {
                        *x += w * y;
                    }
                }
            }
        }
        out
    }
}

impl CustomOp for NodePropagate {
    fn name(&self) -> &'static str {
        "node_propagate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.apply(grad_out, inputs[0].cols()))]
    }
}

fn node_propagate(g: &mut Graph<'_>, h: Var, a_hat: &Tensor) -> Result<Var> {
    let t = g.value(h);
    let n = a_hat.rows();
    if t.rows() % n != 0 {
        return Err(Error::shape(
            "node_propagate",
            format!("{} rows not a multiple of {n} nodes", t.rows()),
        ));
    }
    let op = NodePropagate::new(a_hat);
    let out = Tensor::new(t.shape().to_vec(), op.apply(t.data(), t.cols()))?;
    Ok(g.custom(Box::new(op), vec![h], out))
}

/// Stacked graph-convolution weights: widths `1 → hidden → … → 1`.
#[derive(Clone, Debug)]
pub struct GcnParams {
    pub layers: Vec<Linear>,
}

impl GcnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &SpatialConfig, rng: &mut impl Rng) -> Self {
        let mut widths = vec![1];
        widths.extend(std::iter::repeat_n(cfg.gcn_hidden, cfg.gcn_layers - 1));
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.layer{i}"), w[0], w[1], rng))
            .collect();
        GcnParams { layers }
    }
}

/// Space-stable module: `H^{l+1} = act(Â H^l W^l + b^l)` at every timestep,
/// ReLU between layers and a linear last layer.
pub fn space_stable<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &GcnParams,
    graph: &RoadGraph,
    x: Var,
) -> Result<Var> {
    let (t, n) = g.shape(x);
    if n != graph.node_count() {
        return Err(Error::shape(
            "space_stable",
            format!("window has {n} nodes, graph has {}", graph.node_count()),
        ));
    }
    let mut h = g.reshape(x, t * n, 1)?;
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mixed = node_propagate(g, h, graph.normalized())?;
        h = layer.forward(g, store, mixed)?;
        if i < last {
            h = g.relu(h);
        }
    }
    g.reshape(h, t, n)
}

/// Projections for the all-pair attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &SpatialConfig, rng: &mut impl Rng) -> Self {
        AttentionParams {
            query: Linear::new(store, &format!("{prefix}.query"), 1, cfg.attn_dim, rng),
            key: Linear::new(store, &format!("{prefix}.key"), 1, cfg.attn_dim, rng),
            value: Linear::new(store, &format!("{prefix}.value"), 1, cfg.heads, rng),
            heads: cfg.heads,
        }
    }
}

fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        (v.iter().map(|x| x / norm).collect(), norm)
    } else {
        (vec![0.0; v.len()], 0.0)
    }
}

/// Row-wise, per-head unit vectors of `q` and `k` with their norms.
struct Normalized {
    q: Vec<f64>,
    q_norm: Vec<f64>,
    k: Vec<f64>,
    k_norm: Vec<f64>,
}

fn normalize_heads(t: &Tensor, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dk = t.cols() / heads;
    let mut unit = t.data().to_vec();
    let mut norms = Vec::with_capacity(t.rows() * heads);
    for seg in unit.chunks_mut(dk) {
        let norm = seg.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            seg.iter_mut().for_each(|x| *x /= norm);
        } else {
            seg.iter_mut().for_each(|x| *x = 0.0);
        }
        norms.push(norm);
    }
    (unit, norms)
}

impl Normalized {
    fn new(q: &Tensor, k: &Tensor, heads: usize) -> Self {
        let (q, q_norm) = normalize_heads(q, heads);
        let (k, k_norm) = normalize_heads(k, heads);
        Normalized { q, q_norm, k, k_norm }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Denominators below this fall back to uniform weights.
const DEN_FLOOR: f64 = 1e-12;

/// Linear-complexity attention with similarities `ω_ij = 1 + q̂_i·k̂_j`.
///
/// Rows of `q`, `k` (`[G·N, attn_dim]`) and `v` (`[G·N, heads]`) are grouped
/// into `G` consecutive blocks of `n` nodes. Per block and head, the sums
/// `Σ_j v_j`, `Σ_j k̂_j` and `Σ_j k̂_j v_j` are formed once, so the cost is
/// `O(N·d)` per block rather than `O(N²·d)`. Heads are averaged.
pub fn grouped_attention(q: &Tensor, k: &Tensor, v: &Tensor, n: usize, heads: usize) -> Tensor {
    let groups = q.rows() / n;
    let qc = q.cols();
    let dk = qc / heads;
    let nz = Normalized::new(q, k, heads);
    let mut out = vec![0.0; q.rows()];
    let mut s_k = vec![0.0; dk];
    let mut s_kv = vec![0.0; dk];
    for grp in 0..groups {
        for h in 0..heads {
            let seg = |r: usize| r * qc + h * dk..r * qc + (h + 1) * dk;
            let mut s_v = 0.0;
            s_k.iter_mut().for_each(|x| *x = 0.0);
            s_kv.iter_mut().for_each(|x| *x = 0.0);
            for j in grp * n..(grp + 1) * n {
                let vj = v.get(j, h);
                s_v += vj;
                for (d, kd) in nz.k[seg(j)].iter().enumerate() {
                    s_k[d] += kd;
                    s_kv[d] += kd * vj;
                }
            }
            for i in grp * n..(grp + 1) * n {
                let qi = &nz.q[seg(i)];
                let den = n as f64 + dot(qi, &s_k);
                let o = if den > DEN_FLOOR {
                    (s_v + dot(qi, &s_kv)) / den
                } else {
                    s_v / n as f64
                };
                out[i] += o / heads as f64;
            }
        }
    }
    Tensor::matrix(q.rows(), 1, out).expect("attention output shape")
}

/// Explicit pairwise evaluation of the same attention, returning the output
/// and every block's similarity matrix `ω` (one per group and head).
pub fn dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n: usize,
    heads: usize,
) -> (Tensor, Vec<Tensor>) {
    let groups = q.rows() / n;
    let dk = q.cols() / heads;
    let mut out = vec![0.0; q.rows()];
    let mut omegas = Vec::new();
    for grp in 0..groups {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let unit = |t: &Tensor, r: usize| l2_normalize(&t.row(grp * n + r)[cols.clone()]).0;
            let omega = Tensor::from_fn(n, n, |i, j| 1.0 + dot(&unit(q, i), &unit(k, j)));
            for i in 0..n {
                let den: f64 = omega.row(i).iter().sum();
                let num: f64 = (0..n).map(|j| omega.get(i, j) * v.get(grp * n + j, h)).sum();
                let o = if den > DEN_FLOOR {
                    num / den
                } else {
                    (0..n).map(|j| v.get(grp * n + j, h)).sum::<f64>() / n as f64
                };
                out[grp * n + i] += o / heads as f64;
            }
            omegas.push(omega);
        }
    }
    (Tensor::matrix(q.rows(), 1, out).expect("shape"), omegas)
}

struct GroupedAttentionOp {
    n: usize,
    heads: usize,
}

/// Adds the gradient through `u = x / |x|` into `out`.
fn normalize_backward(unit: &[f64], norm: f64, g_unit: &[f64], out: &mut [f64]) {
    if norm == 0.0 {
        return;
    }
    let proj = dot(unit, g_unit);
    for ((o, u), gu) in out.iter_mut().zip(unit).zip(g_unit) {
        *o += (gu - u * proj) / norm;
    }
}

impl CustomOp for GroupedAttentionOp {
    fn name(&self) -> &'static str {
        "grouped_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, heads) = (self.n, self.heads);
        let qc = q.cols();
        let dk = qc / heads;
        let groups = q.rows() / n;
        let nz = Normalized::new(q, k, heads);
        let mut gq = vec![0.0; q.numel()];
        let mut gk = vec![0.0; k.numel()];
        let mut gv = vec![0.0; v.numel()];
        let mut s_k = vec![0.0; dk];
        let mut s_kv = vec![0.0; dk];
        let mut g_sk = vec![0.0; dk];
        let mut g_skv = vec![0.0; dk];
        let mut g_qhat = vec![0.0; n * dk];
        let mut g_khat = vec![0.0; dk];
        let mut g_v_direct = vec![0.0; n];

        for grp in 0..groups {
            let base = grp * n;
            for h in 0..heads {
                let seg = |r: usize| r * qc + h * dk..r * qc + (h + 1) * dk;
                let mut s_v = 0.0;
                s_k.iter_mut().for_each(|x| *x = 0.0);
                s_kv.iter_mut().for_each(|x| *x = 0.0);
                for j in base..base + n {
                    let vj = v.get(j, h);
                    s_v += vj;
                    for (d, kd) in nz.k[seg(j)].iter().enumerate() {
                        s_k[d] += kd;
                        s_kv[d] += kd * vj;
                    }
                }
                let mut g_sv = 0.0;
                let mut g_direct = 0.0;
                g_sk.iter_mut().for_each(|x| *x = 0.0);
                g_skv.iter_mut().for_each(|x| *x = 0.0);
                g_qhat.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..n {
                    let go = g[base + i] / heads as f64;
                    let qi = &nz.q[seg(base + i)];
                    let den = n as f64 + dot(qi, &s_k);
                    if den <= DEN_FLOOR {
                        g_direct += go / n as f64;
                        continue;
                    }
                    let num = s_v + dot(qi, &s_kv);
                    let g_num = go / den;
                    let g_den = -go * num / (den * den);
                    g_sv += g_num;
                    let gqi = &mut g_qhat[i * dk..(i + 1) * dk];
                    for d in 0..dk {
                        gqi[d] += g_num * s_kv[d] + g_den * s_k[d];
                        g_skv[d] += g_num * qi[d];
                        g_sk[d] += g_den * qi[d];
                    }
                }
                g_v_direct.iter_mut().for_each(|x| *x = g_direct);
                for j in 0..n {
                    let row = base + j;
                    let vj = v.get(row, h);
                    let kj = &nz.k[seg(row)];
                    gv[row * heads + h] += g_sv + dot(&g_skv, kj) + g_v_direct[j];
                    for d in 0..dk {
                        g_khat[d] = g_skv[d] * vj + g_sk[d];
                    }
                    let kn = nz.k_norm[row * heads + h];
                    let qn = nz.q_norm[row * heads + h];
                    normalize_backward(kj, kn, &g_khat, &mut gk[seg(row)]);
                    normalize_backward(&nz.q[seg(row)], qn, &g_qhat[j * dk..(j + 1) * dk], &mut gq[seg(row)]);
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// Differentiable [`grouped_attention`].
pub fn grouped_attention_node(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    n: usize,
    heads: usize,
) -> Result<Var> {
    let (tq, tk, tv) = (g.value(q), g.value(k), g.value(v));
    if tq.shape() != tk.shape()
        || tv.rows() != tq.rows()
        || tv.cols() != heads
        || heads == 0
        || tq.cols() % heads != 0
        || n == 0
        || tq.rows() % n != 0
    {
        return Err(Error::shape(
            "grouped_attention",
            format!(
                "q {:?}, k {:?}, v {:?}, {n} nodes, {heads} heads",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ),
        ));
    }
    let out = grouped_attention(tq, tk, tv, n, heads);
    Ok(g.custom(Box::new(GroupedAttentionOp { n, heads }), vec![q, k, v], out))
}

/// Space-dynamic module: per timestep, project every node to queries, keys
/// and values and propagate over all node pairs.
pub fn space_dynamic<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &AttentionParams,
    x: Var,
) -> Result<Var> {
    let (t, n) = g.shape(x);
    let flat = g.reshape(x, t * n, 1)?;
    let q = params.query.forward(g, store, flat)?;
    let k = params.key.forward(g, store, flat)?;
    let v = params.value.forward(g, store, flat)?;
    let out = grouped_attention_node(g, q, k, v, n, params.heads)?;
    g.reshape(out, t, n)
}

/// Fusion weight MLP plus squeeze-and-excitation over node channels.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    pub se_squeeze: Linear,
    pub se_excite: Linear,
}

impl FusionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SpatialConfig,
        nodes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bottleneck = (nodes / cfg.se_ratio).max(1);
        FusionParams {
            mlp_hidden: Linear::new(store, &format!("{prefix}.beta_hidden"), 2, cfg.fusion_hidden, rng),
            mlp_out: Linear::new(store, &format!("{prefix}.beta_out"), cfg.fusion_hidden, 1, rng),
            se_squeeze: Linear::new(store, &format!("{prefix}.se_squeeze"), nodes, bottleneck, rng),
            se_excite: Linear::new(store, &format!("{prefix}.se_excite"), bottleneck, nodes, rng),
        }
    }
}

/// Graph handles of a fusion, kept for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub beta: Var,
    pub mixed: Var,
    pub se_scale: Var,
    pub out: Var,
}

/// `β = σ(MLP([x_ss, x_sd]))` per entry, `β ⊙ x_ss + (1 − β) ⊙ x_sd`, then
/// channel recalibration by pooled-over-time node statistics.
pub fn fuse_spatial<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &FusionParams,
    x_ss: Var,
    x_sd: Var,
) -> Result<FusionVars> {
    let (t, n) = g.shape(x_ss);
    if g.shape(x_sd) != (t, n) {
        return Err(Error::shape(
            "fuse_spatial",
            format!("{:?} vs {:?}", (t, n), g.shape(x_sd)),
        ));
    }
    let ss = g.reshape(x_ss, t * n, 1)?;
    let sd = g.reshape(x_sd, t * n, 1)?;
    let pair = g.concat_cols(&[ss, sd])?;
    let hidden = params.mlp_hidden.forward(g, store, pair)?;
    let hidden = g.relu(hidden);
    let logits = params.mlp_out.forward(g, store, hidden)?;
    let beta_flat = g.sigmoid(logits);
    let beta = g.reshape(beta_flat, t, n)?;

    let diff = g.sub(x_ss, x_sd)?;
    let weighted = g.mul(beta, diff)?;
    let mixed = g.add(x_sd, weighted)?;

    let pooled = g.mean_rows(mixed);
    let squeezed = params.se_squeeze.forward(g, store, pooled)?;
    let squeezed = g.relu(squeezed);
    let excite = params.se_excite.forward(g, store, squeezed)?;
    let se_scale = g.sigmoid(excite);
    let out = g.mul_row(mixed, se_scale)?;
    Ok(FusionVars {
        beta,
        mixed,
        se_scale,
        out,
    })
}

/// All spatial parameters of one block. The graph convolution and attention
/// are shared by both temporal streams; each stream has its own fusion.
#[derive(Clone, Debug)]
pub struct SpatialParams {
    pub gcn: GcnParams,
    pub attention: AttentionParams,
    pub fuse_ts: FusionParams,
    pub fuse_td: FusionParams,
}

impl SpatialParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SpatialConfig,
        nodes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        SpatialParams {
            gcn: GcnParams::new(store, &format!("{prefix}.gcn"), cfg, rng),
            attention: AttentionParams::new(store, &format!("{prefix}.attn"), cfg, rng),
            fuse_ts: FusionParams::new(store, &format!("{prefix}.fuse_ts"), cfg, nodes, rng),
            fuse_td: FusionParams::new(store, &format!("{prefix}.fuse_td"), cfg, nodes, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, ParamId};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn set(store: &mut ParamStore, id: ParamId, vals: &[f64]) {
        let shape = store.get(id).shape().to_vec();
        store.set_values(id, &shape, vals).unwrap();
    }

    #[test]
    fn alpha_zero_gives_identity() {
        let a = Tensor::from_rows(&[&[0.0, 2.0, 1.0], &[2.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(normalize_adjacency(&a, 0.0).unwrap(), Tensor::identity(3));
    }

    #[test]
    fn two_node_path_half_alpha() {
        let a = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let norm = normalize_adjacency(&a, 0.5).unwrap();
        // Ã = [[.5,.5],[.5,.5]], degrees 1.
        assert!(norm.max_abs_diff(&Tensor::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]])) < 1e-15);
    }

    #[test]
    fn isolated_node_with_alpha_one_rejected() {
        let a = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert!(normalize_adjacency(&a, 1.0).is_err());
        assert!(normalize_adjacency(&a, 0.99).is_ok());
        assert!(normalize_adjacency(&a, 1.5).is_err());
    }

    #[test]
    fn json_round_trip_symmetrizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        std::fs::write(&path, r#"{"nodes":["a","b","c"],"edges":[[0,1,2.0],[2,1,0.5]]}"#).unwrap();
        let g = RoadGraph::load_json(&path, 0.5).unwrap();
        assert_eq!(g.adjacency().get(1, 0), 2.0);
        assert_eq!(g.adjacency().get(1, 2), 0.5);
        g.save_json(&path).unwrap();
        let back = RoadGraph::load_json(&path, 0.5).unwrap();
        assert_eq!(back.adjacency(), g.adjacency());
        assert_eq!(back.node_ids(), g.node_ids());
    }

    #[test]
    fn single_linear_layer_with_identity_graph_is_identity() {
        let cfg = SpatialConfig {
            gcn_layers: 1,
            ..SpatialConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gcn = GcnParams::new(&mut store, "gcn", &cfg, &mut rng);
        set(&mut store, gcn.layers[0].weight, &[1.0]);
        let graph = RoadGraph::from_edges(ids(3), &[(0, 1, 1.0), (1, 2, 1.0)], 0.0).unwrap();
        let x = random(&mut rng, 5, 3);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = space_stable(&mut g, &store, &gcn, &graph, vx).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn two_node_path_averages_neighbours() {
        let cfg = SpatialConfig {
            gcn_layers: 1,
            ..SpatialConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gcn = GcnParams::new(&mut store, "gcn", &cfg, &mut rng);
        set(&mut store, gcn.layers[0].weight, &[1.0]);
        let graph = RoadGraph::from_edges(ids(2), &[(0, 1, 1.0)], 0.5).unwrap();
        let x = random(&mut rng, 4, 2);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = space_stable(&mut g, &store, &gcn, &graph, vx).unwrap();
        for t in 0..4 {
            let mean = 0.5 * (x.get(t, 0) + x.get(t, 1));
            assert!((g.value(y).get(t, 0) - mean).abs() < 1e-15);
            assert!((g.value(y).get(t, 1) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_gcn_is_per_timestep_map() {
        let cfg = SpatialConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gcn = GcnParams::new(&mut store, "gcn", &cfg, &mut rng);
        let graph = RoadGraph::from_edges(ids(1), &[], 0.5).unwrap();
        let x = random(&mut rng, 6, 1);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = space_stable(&mut g, &store, &gcn, &graph, vx).unwrap();
        // Equal inputs at different timesteps map to equal outputs.
        let mut g2 = Graph::new();
        let same = g2.constant(Tensor::from_fn(6, 1, |_, _| x.get(2, 0)));
        let y2 = space_stable(&mut g2, &store, &gcn, &graph, same).unwrap();
        for t in 0..6 {
            assert!((g2.value(y2).get(t, 0) - g.value(y).get(2, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_rejects_node_mismatch() {
        let cfg = SpatialConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gcn = GcnParams::new(&mut store, "gcn", &cfg, &mut rng);
        let graph = RoadGraph::from_edges(ids(3), &[], 0.5).unwrap();
        let mut g = Graph::new();
        let vx = g.constant(Tensor::zeros(4, 2));
        assert!(space_stable(&mut g, &store, &gcn, &graph, vx).is_err());
    }

    #[test]
    fn attention_single_node_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, 3, 8);
        let k = random(&mut rng, 3, 8);
        let v = random(&mut rng, 3, 2);
        let out = grouped_attention(&q, &k, &v, 1, 2);
        for r in 0..3 {
            let expect = 0.5 * (v.get(r, 0) + v.get(r, 1));
            assert!((out.get(r, 0) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_nodes_share_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let attn = AttentionParams::new(&mut store, "attn", &SpatialConfig::default(), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(3, 4, |t, _| 0.3 * t as f64 - 0.2));
        let y = space_dynamic(&mut g, &store, &attn, x).unwrap();
        let v = {
            let w = store.get(attn.value.weight).data().to_vec();
            let b = store.get(attn.value.bias).data().to_vec();
            move |x: f64| w.iter().zip(&b).map(|(w, b)| x * w + b).sum::<f64>() / 4.0
        };
        for t in 0..3 {
            for n in 0..4 {
                let expected = v(0.3 * t as f64 - 0.2);
                assert!((g.value(y).get(t, n) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_rows_fall_back_to_uniform_similarity() {
        let q = Tensor::zeros(3, 2);
        let k = Tensor::zeros(3, 2);
        let v = Tensor::from_rows(&[&[1.0], &[2.0], &[6.0]]);
        let out = grouped_attention(&q, &k, &v, 3, 1);
        for r in 0..3 {
            assert!((out.get(r, 0) - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "attn", &SpatialConfig::default(), &mut rng);
        for id in [attn.query.bias, attn.key.bias, attn.value.bias] {
            let vals: Vec<f64> = (0..store.get(id).numel()).map(|_| rng.random_range(-0.5..0.5)).collect();
            set(&mut store, id, &vals);
        }
        let x = random(&mut rng, 3, 5);
        let target = random(&mut rng, 3, 5);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vx = g.constant(x.clone());
            let y = space_dynamic(g, s, &attn, vx)?;
            let vt = g.constant(target.clone());
            g.mse(y, vt)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn gcn_and_fusion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SpatialConfig::default();
        let mut store = ParamStore::new();
        let sp = SpatialParams::new(&mut store, "sp", &cfg, 4, &mut rng);
        let graph = RoadGraph::from_edges(ids(4), &[(0, 1, 1.0), (1, 2, 0.5), (2, 3, 2.0)], 0.5).unwrap();
        let x = random(&mut rng, 6, 4);
        let target = random(&mut rng, 6, 4);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vx = g.constant(x.clone());
            let ss = space_stable(g, s, &sp.gcn, &graph, vx)?;
            let sd = space_dynamic(g, s, &sp.attention, vx)?;
            let f = fuse_spatial(g, s, &sp.fuse_ts, ss, sd)?;
            let vt = g.constant(target.clone());
            g.mse(f.out, vt)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }

    fn fusion_with_forced_beta(beta_bias: f64, x_ss: &Tensor, x_sd: &Tensor) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SpatialConfig::default();
        let mut store = ParamStore::new();
        let fp = FusionParams::new(&mut store, "f", &cfg, x_ss.cols(), &mut rng);
        let zeros = vec![0.0; store.get(fp.mlp_out.weight).numel()];
        set(&mut store, fp.mlp_out.weight, &zeros);
        set(&mut store, fp.mlp_out.bias, &[beta_bias]);
        let zeros = vec![0.0; store.get(fp.se_excite.weight).numel()];
        set(&mut store, fp.se_excite.weight, &zeros);
        let big = vec![40.0; x_ss.cols()];
        set(&mut store, fp.se_excite.bias, &big);
        let mut g = Graph::new();
        let (a, b) = (g.constant(x_ss.clone()), g.constant(x_sd.clone()));
        let f = fuse_spatial(&mut g, &store, &fp, a, b).unwrap();
        g.value(f.out).clone()
    }

    #[test]
    fn forced_fusion_weights_select_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ss = random(&mut rng, 5, 3);
        let sd = random(&mut rng, 5, 3);
        assert!(fusion_with_forced_beta(40.0, &ss, &sd).max_abs_diff(&ss) < 1e-15);
        assert!(fusion_with_forced_beta(-40.0, &ss, &sd).max_abs_diff(&sd) < 1e-15);
        assert!(fusion_with_forced_beta(0.3, &ss, &ss).max_abs_diff(&ss) < 1e-15);
    }

    #[test]
    fn fusion_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let fp = FusionParams::new(&mut store, "f", &SpatialConfig::default(), 3, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(4, 3));
        let b = g.constant(Tensor::zeros(5, 3));
        assert!(fuse_spatial(&mut g, &store, &fp, a, b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalized_adjacency_is_symmetric(seed in any::<u64>(), n in 1usize..8, alpha in 0.0f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = Tensor::zeros(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.5) {
                        let w = rng.random_range(0.1..3.0);
                        a.set(i, j, w);
                        a.set(j, i, w);
                    }
                }
            }
            let norm = normalize_adjacency(&a, alpha).unwrap();
            prop_assert!(norm.max_abs_diff(&norm.transpose()) == 0.0);
            prop_assert!(norm.is_finite());
        }

        #[test]
        fn grouped_matches_dense(seed in any::<u64>(), n in 1usize..=8, heads_idx in 0usize..3) {
            let heads = [1usize, 2, 4][heads_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, 2 * n, heads * 3);
            let k = random(&mut rng, 2 * n, heads * 3);
            let v = random(&mut rng, 2 * n, heads);
            let fast = grouped_attention(&q, &k, &v, n, heads);
            let (dense, omegas) = dense_attention(&q, &k, &v, n, heads);
            prop_assert!(fast.max_abs_diff(&dense) <= 1e-10);
            for om in &omegas {
                prop_assert!(om.data().iter().all(|&w| w >= 0.0));
                for i in 0..n {
                    let s: f64 = om.row(i).iter().sum();
                    let normalized: f64 = om.row(i).iter().map(|w| w / s).sum();
                    prop_assert!((normalized - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn pre_se_fusion_is_between_inputs(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let fp = FusionParams::new(&mut store, "f", &SpatialConfig::default(), 3, &mut rng);
            let ss = random(&mut rng, 4, 3);
            let sd = random(&mut rng, 4, 3);
            let mut g = Graph::new();
            let (a, b) = (g.constant(ss.clone()), g.constant(sd.clone()));
            let f = fuse_spatial(&mut g, &store, &fp, a, b).unwrap();
            let mixed = g.value(f.mixed);
            for i in 0..mixed.numel() {
                let (lo, hi) = (ss.data()[i].min(sd.data()[i]), ss.data()[i].max(sd.data()[i]));
                prop_assert!(mixed.data()[i] >= lo - 1e-15 && mixed.data()[i] <= hi + 1e-15);
            }
        }
    }
}
