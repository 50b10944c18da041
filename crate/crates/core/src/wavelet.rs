//! Daubechies-4 multilevel DWT and the gated split of a window into its
//! time-stable and time-dynamic parts.
//!
//! Windows are `(time × node)` matrices; every transform acts on each node
//! column independently. A window whose length is not a multiple of `2^J`
//! (or is too short for `J` levels of an 8-tap filter) is extended with
//! half-sample symmetric reflection before analysis and cropped after
//! synthesis. The cascade itself runs on the extended buffer with periodized
//! filters, which keeps every level exactly orthogonal.

use rand::Rng;

use crate::autodiff::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Orthonormal Daubechies lowpass taps with four vanishing moments.
pub const DB4_LOWPASS: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

pub const FILTER_LEN: usize = DB4_LOWPASS.len();

pub const DEFAULT_LEVELS: usize = 4;

/// Quadrature-mirror highpass taps `g[k] = (-1)^k h[L-1-k]`.
pub fn db4_highpass() -> [f64; FILTER_LEN] {
    let mut g = [0.0; FILTER_LEN];
    for (k, gk) in g.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *gk = sign * DB4_LOWPASS[FILTER_LEN - 1 - k];
    }
    g
}

/// Length of the extended buffer the cascade runs on.
pub fn padded_length(len: usize, levels: usize) -> usize {
    let block = 1usize << levels;
    let min = FILTER_LEN << (levels - 1);
    len.div_ceil(block).saturating_mul(block).max(min)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    if m < n {
        m as usize
    } else {
        (2 * n - 1 - m) as usize
    }
}

fn validate(len: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("wavelet levels must be >= 1".into()));
    }
    if levels > 16 {
        return Err(Error::Config(format!("wavelet levels {levels} is too deep")));
    }
    if len < FILTER_LEN {
        return Err(Error::Data(format!(
            "window of length {len} is shorter than the {FILTER_LEN}-tap filter"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    len: usize,
    padded: usize,
    pad_left: usize,
}

impl Layout {
    fn new(len: usize, levels: usize) -> Result<Self> {
        validate(len, levels)?;
        let padded = padded_length(len, levels);
        Ok(Layout {
            len,
            padded,
            pad_left: (padded - len) / 2,
        })
    }

    fn extend(&self, x: &[f64]) -> Vec<f64> {
        (0..self.padded)
            .map(|i| x[reflect(i as isize - self.pad_left as isize, self.len)])
            .collect()
    }

    /// Adjoint of `extend`: folds reflected samples back onto their source.
    fn fold(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (i, v) in y.iter().enumerate() {
            out[reflect(i as isize - self.pad_left as isize, self.len)] += v;
        }
        out
    }

    fn crop(&self, y: &[f64]) -> Vec<f64> {
        y[self.pad_left..self.pad_left + self.len].to_vec()
    }

    /// Adjoint of `crop`: zero embedding.
    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.padded];
        out[self.pad_left..self.pad_left + self.len].copy_from_slice(x);
        out
    }
}

fn analysis_step(x: &[f64], want_detail: bool) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let g = db4_highpass();
    let mut a = vec![0.0; half];
    let mut d = if want_detail { vec![0.0; half] } else { Vec::new() };
    for i in 0..half {
        let mut sa = 0.0;
        let mut sd = 0.0;
        for k in 0..FILTER_LEN {
            let v = x[(2 * i + k) % n];
            sa += DB4_LOWPASS[k] * v;
            sd += g[k] * v;
        }
        a[i] = sa;
        if want_detail {
            d[i] = sd;
        }
    }
    (a, d)
}

/// Transpose of `analysis_step`; `detail` may be empty for an all-zero band.
fn synthesis_step(approx: &[f64], detail: &[f64]) -> Vec<f64> {
    let n = approx.len() * 2;
    let g = db4_highpass();
    let mut x = vec![0.0; n];
    for i in 0..approx.len() {
        let a = approx[i];
        let d = detail.get(i).copied().unwrap_or(0.0);
        for k in 0..FILTER_LEN {
            x[(2 * i + k) % n] += DB4_LOWPASS[k] * a + g[k] * d;
        }
    }
    x
}

/// Approximation-only reconstruction of an already-extended buffer.
fn lowpass_extended(mut buf: Vec<f64>, levels: usize) -> Vec<f64> {
    for _ in 0..levels {
        buf = analysis_step(&buf, false).0;
    }
    for _ in 0..levels {
        buf = synthesis_step(&buf, &[]);
    }
    buf
}

/// Multilevel coefficients of a `(time × node)` window.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs {
    /// Coarsest approximation band, `[len_J, nodes]`.
    pub approx: Tensor,
    /// Detail bands, finest first: `details[j]` is level `j + 1`.
    pub details: Vec<Tensor>,
    pub levels: usize,
    pub original_length: usize,
    pub padded_length: usize,
    pub pad_left: usize,
}

impl WaveletCoeffs {
    /// Coefficient lengths per band: details finest-first, then the approximation.
    pub fn band_lengths(&self) -> Vec<usize> {
        self.details
            .iter()
            .map(Tensor::rows)
            .chain(std::iter::once(self.approx.rows()))
            .collect()
    }

    pub fn with_details_zeroed(&self) -> WaveletCoeffs {
        let mut c = self.clone();
        for d in &mut c.details {
            d.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        c
    }

    pub fn with_approx_zeroed(&self) -> WaveletCoeffs {
        let mut c = self.clone();
        c.approx.data_mut().iter_mut().for_each(|v| *v = 0.0);
        c
    }

    fn layout(&self) -> Layout {
        Layout {
            len: self.original_length,
            padded: self.padded_length,
            pad_left: self.pad_left,
        }
    }
}

fn columns(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.cols()).map(|c| x.column(c)).collect()
}

fn from_columns(cols: &[Vec<f64>]) -> Tensor {
    let rows = cols.first().map_or(0, Vec::len);
    Tensor::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

/// Forward transform of every node column, cascaded `levels` times on the
/// approximation branch.
pub fn dwt(x: &Tensor, levels: usize) -> Result<WaveletCoeffs> {
    let layout = Layout::new(x.rows(), levels)?;
    if !x.is_finite() {
        return Err(Error::NonFinite("dwt input"));
    }
    let mut approx_cols = Vec::with_capacity(x.cols());
    let mut detail_cols: Vec<Vec<Vec<f64>>> = vec![Vec::new(); levels];
    for col in columns(x) {
        let mut buf = layout.extend(&col);
        for band in detail_cols.iter_mut() {
            let (a, d) = analysis_step(&buf, true);
            band.push(d);
            buf = a;
        }
        approx_cols.push(buf);
    }
    Ok(WaveletCoeffs {
        approx: from_columns(&approx_cols),
        details: detail_cols.iter().map(|b| from_columns(b)).collect(),
        levels,
        original_length: layout.len,
        padded_length: layout.padded,
        pad_left: layout.pad_left,
    })
}

/// Inverse transform, cropped back to the original window length.
pub fn idwt(c: &WaveletCoeffs) -> Result<Tensor> {
    if c.details.len() != c.levels {
        return Err(Error::shape(
            "idwt",
            format!("{} detail bands for {} levels", c.details.len(), c.levels),
        ));
    }
    let nodes = c.approx.cols();
    let layout = c.layout();
    let mut out = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let mut buf = c.approx.column(node);
        for level in (0..c.levels).rev() {
            let d = c.details[level].column(node);
            if d.len() != buf.len() {
                return Err(Error::shape("idwt", "band lengths break the dyadic cascade"));
            }
            buf = synthesis_step(&buf, &d);
        }
        out.push(layout.crop(&buf));
    }
    Ok(from_columns(&out))
}

/// Inverse transform with every detail band set to zero.
pub fn lowpass_reconstruct(c: &WaveletCoeffs) -> Result<Tensor> {
    idwt(&c.with_details_zeroed())
}

/// `lowpass_reconstruct(dwt(x))` without materializing the detail bands.
pub fn lowpass(x: &Tensor, levels: usize) -> Result<Tensor> {
    let layout = Layout::new(x.rows(), levels)?;
    let cols: Vec<Vec<f64>> = columns(x)
        .iter()
        .map(|c| layout.crop(&lowpass_extended(layout.extend(c), levels)))
        .collect();
    Ok(from_columns(&cols))
}

fn lowpass_adjoint(g: &Tensor, levels: usize) -> Result<Tensor> {
    let layout = Layout::new(g.rows(), levels)?;
    let cols: Vec<Vec<f64>> = columns(g)
        .iter()
        .map(|c| layout.fold(&lowpass_extended(layout.embed(c), levels)))
        .collect();
    Ok(from_columns(&cols))
}

struct LowpassOp {
    levels: usize,
}

impl CustomOp for LowpassOp {
    fn name(&self) -> &'static str {
        "wavelet_lowpass"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let g = Tensor::new(x.shape().to_vec(), grad_out.to_vec()).expect("lowpass grad shape");
        let adj = lowpass_adjoint(&g, self.levels).expect("layout validated in forward");
        vec![Some(adj.into_data())]
    }
}

/// Differentiable low-frequency estimate `X_low` of a window node.
pub fn lowpass_node(g: &mut Graph<'_>, x: Var, levels: usize) -> Result<Var> {
    let out = lowpass(g.value(x), levels)?;
    Ok(g.custom(Box::new(LowpassOp { levels }), vec![x], out))
}

/// Trainable 1-D convolution over time producing the gate pre-activation from
/// the stacked channels `(X, X_low)`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    /// `[1, 6]` when shared across nodes, `[N, 6]` per node. Columns 0..3 are
    /// the taps on `X` at offsets -1, 0, +1; columns 3..6 the taps on `X_low`.
    pub weight: ParamId,
    /// `[1, 1]` shared or `[N, 1]` per node.
    pub bias: ParamId,
    pub per_node: bool,
}

pub const GATE_KERNEL: usize = 3;

impl GateParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        nodes: usize,
        per_node: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = if per_node { nodes } else { 1 };
        let bound = (1.0 / (2 * GATE_KERNEL) as f64).sqrt();
        let w = Tensor::from_fn(rows, 2 * GATE_KERNEL, |_, _| rng.random_range(-bound..bound));
        GateParams {
            weight: store.add(format!("{prefix}.weight"), w),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(rows, 1)),
            per_node,
        }
    }
}

struct TimeConvOp;

impl TimeConvOp {
    fn forward(x: &Tensor, xl: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (t_len, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; t_len * n];
        for t in 0..t_len {
            for node in 0..n {
                let wr = if w.rows() == 1 { 0 } else { node };
                let wrow = w.row(wr);
                let mut s = b.data()[wr];
                for k in 0..GATE_KERNEL {
                    let src = t as isize + k as isize - 1;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let idx = src as usize * n + node;
                    s += wrow[k] * x.data()[idx] + wrow[GATE_KERNEL + k] * xl.data()[idx];
                }
                out[t * n + node] = s;
            }
        }
        Tensor::matrix(t_len, n, out).expect("time conv shape")
    }
}

impl CustomOp for TimeConvOp {
    fn name(&self) -> &'static str {
        "gate_conv1d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, xl, w, b) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (t_len, n) = (x.rows(), x.cols());
        let mut gx = vec![0.0; x.numel()];
        let mut gxl = vec![0.0; xl.numel()];
        let mut gw = vec![0.0; w.numel()];
        let mut gb = vec![0.0; b.numel()];
        let wc = 2 * GATE_KERNEL;
        for t in 0..t_len {
            for node in 0..n {
                let go = g[t * n + node];
                let wr = if w.rows() == 1 { 0 } else { node };
                gb[wr] += go;
                for k in 0..GATE_KERNEL {
                    let src = t as isize + k as isize - 1;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let idx = src as usize * n + node;
                    gx[idx] += w.data()[wr * wc + k] * go;
                    gxl[idx] += w.data()[wr * wc + GATE_KERNEL + k] * go;
                    gw[wr * wc + k] += x.data()[idx] * go;
                    gw[wr * wc + GATE_KERNEL + k] += xl.data()[idx] * go;
                }
            }
        }
        [gx, gxl, gw, gb]
            .into_iter()
            .zip(needs)
            .map(|(v, &need)| need.then_some(v))
            .collect()
    }
}

fn gate_conv(g: &mut Graph<'_>, x: Var, xl: Var, w: Var, b: Var) -> Result<Var> {
    let (tx, twt, tb) = (g.value(x), g.value(w), g.value(b));
    let n = tx.cols();
    let rows_ok = twt.rows() == 1 || twt.rows() == n;
    if !rows_ok || twt.cols() != 2 * GATE_KERNEL || tb.numel() != twt.rows() {
        return Err(Error::shape(
            "gate_conv1d",
            format!("weight {:?}, bias {:?}, {n} nodes", twt.shape(), tb.shape()),
        ));
    }
    let out = TimeConvOp::forward(tx, g.value(xl), twt, tb);
    Ok(g.custom(Box::new(TimeConvOp), vec![x, xl, w, b], out))
}

/// Graph handles of a decomposition.
#[derive(Clone, Copy, Debug)]
pub struct DecomposedVars {
    pub x_ts: Var,
    pub x_td: Var,
    pub gamma: Var,
    pub x_low: Var,
}

/// `γ = σ(conv(X, X_low))`, `X_td = γ ⊙ (X − X_low)`, `X_ts = X − X_td`.
///
/// With `frozen` set the gate parameters enter the graph as constants.
pub fn gated_decompose_node<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    gate: &GateParams,
    x: Var,
    levels: usize,
    frozen: bool,
) -> Result<DecomposedVars> {
    let (w, b) = if frozen {
        (
            g.param_frozen(store, gate.weight),
            g.param_frozen(store, gate.bias),
        )
    } else {
        (g.param(store, gate.weight), g.param(store, gate.bias))
    };
    let x_low = lowpass_node(g, x, levels)?;
    let pre = gate_conv(g, x, x_low, w, b)?;
    let gamma = g.sigmoid(pre);
    let detail = g.sub(x, x_low)?;
    let x_td = g.mul(gamma, detail)?;
    let x_ts = g.sub(x, x_td)?;
    Ok(DecomposedVars {
        x_ts,
        x_td,
        gamma,
        x_low,
    })
}

/// A window split into its stable and dynamic parts.
#[derive(Clone, Debug)]
pub struct DecomposedPair {
    pub x_ts: Tensor,
    pub x_td: Tensor,
    pub gamma: Tensor,
    pub x_low: Tensor,
}

pub fn gated_decompose(
    x: &Tensor,
    store: &ParamStore,
    gate: &GateParams,
    levels: usize,
) -> Result<DecomposedPair> {
    let mut g = Graph::new();
    let vx = g.constant_ref(x);
    let d = gated_decompose_node(&mut g, store, gate, vx, levels, true)?;
    Ok(DecomposedPair {
        x_ts: g.value(d.x_ts).clone(),
        x_td: g.value(d.x_td).clone(),
        gamma: g.value(d.gamma).clone(),
        x_low: g.value(d.x_low).clone(),
    })
}

fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dt = i as f64 - mean_t;
        sxy += dt * (v - mean_y);
        sxx += dt * dt;
    }
    sxy / sxx
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Splits each component into consecutive `period`-length subsets, fits a
/// least-squares line to each subset and returns the standard deviation of the
/// fitted slopes as `(stable, dynamic)`. A trailing partial subset is ignored.
pub fn degree_of_variation(x_ts: &[f64], x_td: &[f64], period: usize) -> Result<(f64, f64)> {
    if x_ts.len() != x_td.len() {
        return Err(Error::shape(
            "degree_of_variation",
            format!("{} vs {} samples", x_ts.len(), x_td.len()),
        ));
    }
    if period < 2 {
        return Err(Error::Config("period must be at least 2 steps".into()));
    }
    let subsets = x_ts.len() / period;
    if subsets < 2 {
        return Err(Error::Data(format!(
            "{} samples give {subsets} subsets of {period}; need at least 2",
            x_ts.len()
        )));
    }
    let spread = |x: &[f64]| {
        let slopes: Vec<f64> = x.chunks_exact(period).map(slope).collect();
        population_std(&slopes)
    };
    Ok((spread(x_ts), spread(x_td)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
        Tensor::from_fn(t, n, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn taps_satisfy_quadrature_conditions() {
        let h = DB4_LOWPASS;
        let g = db4_highpass();
        assert!((h.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        for shift in 0..4 {
            let hh: f64 = (0..FILTER_LEN - 2 * shift).map(|k| h[k] * h[k + 2 * shift]).sum();
            let expected = if shift == 0 { 1.0 } else { 0.0 };
            assert!((hh - expected).abs() < 1e-12, "shift {shift}: {hh}");
        }
        // Highpass orthogonal to every even shift of the lowpass.
        for shift in -3i32..=3 {
            let s: f64 = (0..FILTER_LEN as i32)
                .filter_map(|k| {
                    let j = k + 2 * shift;
                    (0..FILTER_LEN as i32)
                        .contains(&j)
                        .then(|| h[k as usize] * g[j as usize])
                })
                .sum();
            assert!(s.abs() < 1e-12, "shift {shift}: {s}");
        }
        // Four vanishing moments.
        for p in 0..4 {
            let m: f64 = g.iter().enumerate().map(|(k, v)| (k as f64).powi(p) * v).sum();
            assert!(m.abs() < 1e-9, "moment {p}: {m}");
        }
    }

    #[test]
    fn constant_signal_one_level() {
        let x = Tensor::from_fn(8, 1, |_, _| 1.5);
        let c = dwt(&x, 1).unwrap();
        for v in c.approx.data() {
            assert!((v - 1.5 * 2f64.sqrt()).abs() < 1e-12);
        }
        for v in c.details[0].data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_length_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_window(&mut rng, 64, 3);
        for levels in 1..=4 {
            let back = idwt(&dwt(&x, levels).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-8);
        }
    }

    #[test]
    fn cascade_lengths_for_48_samples() {
        let x = Tensor::zeros(48, 2);
        let c = dwt(&x, 4).unwrap();
        // 48 is extended to 64 = max(ceil(48/16)*16, 8*2^3).
        assert_eq!(c.padded_length, 64);
        assert_eq!(c.pad_left, 8);
        assert_eq!(c.band_lengths(), vec![32, 16, 8, 4, 4]);
        assert_eq!(padded_length(100, 4), 112);
        assert_eq!(padded_length(16, 2), 16);
    }

    #[test]
    fn too_short_window_rejected() {
        assert!(dwt(&Tensor::zeros(7, 1), 1).is_err());
        assert!(dwt(&Tensor::zeros(16, 1), 0).is_err());
    }

    #[test]
    fn lowpass_of_constant_is_identity() {
        let x = Tensor::from_fn(48, 2, |_, c| 3.0 - c as f64);
        let low = lowpass_reconstruct(&dwt(&x, 4).unwrap()).unwrap();
        assert!(low.max_abs_diff(&x) <= 1e-8);
    }

    #[test]
    fn lowpass_kills_alternating_sequence() {
        let x = Tensor::from_fn(64, 1, |r, _| if r % 2 == 0 { 1.0 } else { -1.0 });
        let low = lowpass_reconstruct(&dwt(&x, 1).unwrap()).unwrap();
        // Oracle: orthogonal projection onto the span of the periodized
        // scaling functions φ_i[m] = h[(m - 2i) mod 64].
        let n = 64;
        let mut proj = vec![0.0; n];
        for i in 0..n / 2 {
            let mut phi = vec![0.0; n];
            for (k, hk) in DB4_LOWPASS.iter().enumerate() {
                phi[(2 * i + k) % n] += hk;
            }
            let coef: f64 = phi.iter().zip(x.data()).map(|(p, v)| p * v).sum();
            for (o, p) in proj.iter_mut().zip(&phi) {
                *o += coef * p;
            }
        }
        for (a, b) in low.data().iter().zip(&proj) {
            assert!(a.abs() <= 1e-6);
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn lowpass_plus_detail_reconstruction_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_window(&mut rng, 50, 2);
        let c = dwt(&x, 3).unwrap();
        let low = lowpass_reconstruct(&c).unwrap();
        let high = idwt(&c.with_approx_zeroed()).unwrap();
        let full = idwt(&c).unwrap();
        let sum = Tensor::from_fn(50, 2, |r, k| low.get(r, k) + high.get(r, k));
        assert!(sum.max_abs_diff(&full) <= 1e-8);
        let direct = lowpass(&x, 3).unwrap();
        assert!(direct.max_abs_diff(&low) <= 1e-12);
    }

    #[test]
    fn lowpass_adjoint_is_exact_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [16usize, 23, 48, 70] {
            let x = random_window(&mut rng, len, 1);
            let y = random_window(&mut rng, len, 1);
            let lx = lowpass(&x, 4).unwrap();
            let lty = lowpass_adjoint(&y, 4).unwrap();
            let lhs: f64 = lx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(lty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "len {len}: {lhs} vs {rhs}");
        }
    }

    fn gate_store(nodes: usize, per_node: bool, seed: u64) -> (ParamStore, GateParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = GateParams::new(&mut store, "gate", nodes, per_node, &mut rng);
        (store, gate)
    }

    #[test]
    fn constant_window_has_no_dynamic_part() {
        let (store, gate) = gate_store(3, false, 4);
        let x = Tensor::from_fn(48, 3, |_, c| 0.5 + c as f64);
        let d = gated_decompose(&x, &store, &gate, 4).unwrap();
        assert!(d.x_td.data().iter().all(|v| v.abs() <= 1e-12));
        assert!(d.x_ts.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn saturated_gate_sends_detail_to_dynamic_stream() {
        let (mut store, gate) = gate_store(2, false, 5);
        store.set_values(gate.weight, &[1, 6], &[0.0; 6]).unwrap();
        store.set_values(gate.bias, &[1, 1], &[20.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_window(&mut rng, 32, 2);
        let d = gated_decompose(&x, &store, &gate, 2).unwrap();
        let detail = Tensor::from_fn(32, 2, |r, c| x.get(r, c) - d.x_low.get(r, c));
        assert!(d.x_td.max_abs_diff(&detail) <= 1e-7);
        assert!(d.x_ts.max_abs_diff(&d.x_low) <= 1e-7);
    }

    #[test]
    fn per_node_gate_shapes() {
        let (store, gate) = gate_store(4, true, 7);
        assert_eq!(store.get(gate.weight).shape(), &[4, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_window(&mut rng, 24, 4);
        let d = gated_decompose(&x, &store, &gate, 2).unwrap();
        assert_eq!(d.gamma.shape(), &[24, 4]);
    }

    #[test]
    fn gate_subnetwork_gradients_match_finite_differences() {
        let (mut store, gate) = gate_store(3, false, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        store
            .set_values(gate.bias, &[1, 1], &[0.3])
            .unwrap();
        let x = random_window(&mut rng, 20, 3);
        let target = random_window(&mut rng, 20, 3);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vx = g.constant(x.clone());
            let d = gated_decompose_node(g, s, &gate, vx, 2, false)?;
            let vt = g.constant(target.clone());
            let a = g.mse(d.x_td, vt)?;
            let b = g.mse(d.x_ts, d.gamma)?;
            Ok(g.add(a, b)?)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn gradient_flows_through_lowpass_to_input() {
        let (mut store, gate) = gate_store(2, false, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xin = store.add("x", random_window(&mut rng, 18, 2));
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vx = g.param(s, xin);
            let d = gated_decompose_node(g, s, &gate, vx, 3, false)?;
            let sq = g.mul(d.x_td, d.x_low)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn degree_of_variation_cases() {
        let ramp: Vec<f64> = (0..96).map(|i| 0.1 * i as f64).collect();
        let zeros = vec![0.0; 96];
        let (s, d) = degree_of_variation(&ramp, &zeros, 24).unwrap();
        assert!(s.abs() < 1e-12);
        assert_eq!(d, 0.0);
        assert_eq!(degree_of_variation(&zeros, &zeros, 24).unwrap(), (0.0, 0.0));
        assert!(degree_of_variation(&zeros[..30], &zeros[..30], 24).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let trend: Vec<f64> = (0..240).map(|i| (i as f64 / 40.0).sin()).collect();
        let periodic: Vec<f64> = (0..240).map(|i| (i % 24) as f64 * 0.05).collect();
        let noise: Vec<f64> = (0..240).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (s, d) = degree_of_variation(&periodic, &noise, 24).unwrap();
        assert!(d > s, "{d} <= {s}");
        let smooth: Vec<f64> = trend.iter().map(|v| 0.01 * v).collect();
        let (s, d) = degree_of_variation(&smooth, &noise, 24).unwrap();
        assert!(d > s, "{d} <= {s}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn perfect_reconstruction(seed in any::<u64>(), len in 8usize..150, levels in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_window(&mut rng, len, 2);
            let back = idwt(&dwt(&x, levels).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-8);
        }

        #[test]
        fn decomposition_is_additive_and_gate_is_open(seed in any::<u64>(), len in 8usize..80) {
            let (store, gate) = gate_store(3, false, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = random_window(&mut rng, len, 3);
            let d = gated_decompose(&x, &store, &gate, 4).unwrap();
            for i in 0..x.numel() {
                let sum = d.x_ts.data()[i] + d.x_td.data()[i];
                prop_assert!((sum - x.data()[i]).abs() <= 4.0 * f64::EPSILON * x.data()[i].abs().max(1.0));
                let gam = d.gamma.data()[i];
                prop_assert!(gam > 0.0 && gam < 1.0);
            }
        }
    }
}
