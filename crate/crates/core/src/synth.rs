//! Seeded synthetic road-emission generator.
//!
//! Every node carries a two-peak daily profile. A slowly decorrelating AR(1)
//! fluctuation is added to it, the sum is mixed one diffusion step along the
//! normalized adjacency, and white measurement noise goes on top:
//!
//! ```text
//! z_t = p_t + u_t,   u_t = φ u_{t−1} + σ_u √(1−φ²) ε_t
//! x_t = s ⊙ ((1−κ) z_t + κ Â z_{t−1}) + σ_n η_t
//! ```

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::EmissionDataset;
use crate::error::{Error, Result};
use crate::spatial::RoadGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub step_minutes: u32,
    pub seed: u64,
    /// Standard deviation of the white measurement noise.
    pub noise: f64,
    /// Stationary standard deviation of the AR(1) fluctuation; 0 disables it.
    pub ar: f64,
    /// Per-step autocorrelation of the AR(1) fluctuation.
    pub ar_phi: f64,
    /// Weight `κ` of the diffused previous state.
    pub coupling: f64,
    /// Self-loop mixing used for the diffusion operator.
    pub alpha: f64,
    /// Extra random edges on top of the ring; `None` picks `nodes / 4`.
    pub chords: Option<usize>,
    pub start: NaiveDateTime,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 20,
            days: 31,
            step_minutes: 5,
            seed: 0,
            noise: 0.1,
            ar: 0.2,
            ar_phi: 0.95,
            coupling: 0.4,
            alpha: 0.5,
            chords: None,
            start: NaiveDate::from_ymd_opt(2024, 3, 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("valid start"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(Error::Config(format!("nodes must be >= 2, got {}", self.nodes)));
        }
        if self.days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        if self.step_minutes == 0 || (24 * 60) % self.step_minutes != 0 {
            return Err(Error::Config(format!(
                "step_minutes {} must divide a day",
                self.step_minutes
            )));
        }
        if !(self.noise >= 0.0 && self.ar >= 0.0) {
            return Err(Error::Config("noise and ar must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ar_phi) {
            return Err(Error::Config(format!("ar_phi must lie in [0, 1), got {}", self.ar_phi)));
        }
        if !(0.0..=1.0).contains(&self.coupling) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("coupling and alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ring `0–1–…–(n−1)–0` plus `chords` random non-ring edges.
pub fn ring_with_chords(n: usize, chords: usize, alpha: f64, rng: &mut impl Rng) -> Result<RoadGraph> {
    let ids: Vec<String> = (0..n).map(|i| format!("road_{i:03}")).collect();
    let mut edges: Vec<(usize, usize, f64)> = (0..n)
        .filter(|&i| n > 2 || i == 0)
        .map(|i| (i, (i + 1) % n, 1.0))
        .collect();
    let max_chords = n * n.saturating_sub(3) / 2;
    let mut added = 0;
    while added < chords.min(max_chords) {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let ring = (i + 1) % n == j || (j + 1) % n == i;
        if i == j || ring || edges.iter().any(|&(a, b, _)| (a, b) == (i, j) || (a, b) == (j, i)) {
            continue;
        }
        edges.push((i, j, rng.random_range(0.3..1.0)));
        added += 1;
    }
    RoadGraph::from_edges(ids, &edges, alpha)
}

#[derive(Clone, Copy, Debug)]
struct Peak {
    hour: f64,
    width: f64,
    height: f64,
}

impl Peak {
    fn at(&self, hour: f64) -> f64 {
        let mut d = (hour - self.hour).abs();
        d = d.min(24.0 - d);
        self.height * (-0.5 * (d / self.width).powi(2)).exp()
    }
}

#[derive(Clone, Copy, Debug)]
struct Profile {
    base: f64,
    morning: Peak,
    evening: Peak,
    scale: f64,
}

impl Profile {
    fn random(rng: &mut impl Rng) -> Self {
        Profile {
            base: rng.random_range(0.3..0.6),
            morning: Peak {
                hour: 8.0 + rng.random_range(-0.5..0.5),
                width: rng.random_range(1.0..1.5),
                height: rng.random_range(0.8..1.2),
            },
            evening: Peak {
                hour: 18.0 + rng.random_range(-0.5..0.5),
                width: rng.random_range(1.5..2.2),
                height: rng.random_range(0.6..1.0),
            },
            scale: rng.random_range(5.0..15.0),
        }
    }

    fn at(&self, hour: f64) -> f64 {
        self.base + self.morning.at(hour) + self.evening.at(hour)
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EmissionDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes;
    let graph = ring_with_chords(n, cfg.chords.unwrap_or(n / 4), cfg.alpha, &mut rng)?;
    let a_hat = graph.normalized().clone();
    let profiles: Vec<Profile> = (0..n).map(|_| Profile::random(&mut rng)).collect();

    let per_day = (24 * 60 / cfg.step_minutes) as usize;
    let steps = cfg.days * per_day;
    let daily = Tensor::from_fn(per_day, n, |s, i| {
        profiles[i].at(s as f64 * cfg.step_minutes as f64 / 60.0)
    });

    let innovation = cfg.ar * (1.0 - cfg.ar_phi * cfg.ar_phi).sqrt();
    let mut u = vec![0.0; n];
    let mut z_prev: Vec<f64> = daily.row(per_day - 1).to_vec();
    let mut data = Vec::with_capacity(steps * n);
    for t in 0..steps {
        let p = daily.row(t % per_day);
        let z: Vec<f64> = (0..n)
            .map(|i| {
                if cfg.ar > 0.0 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    u[i] = cfg.ar_phi * u[i] + innovation * e;
                }
                p[i] + u[i]
            })
            .collect();
        for i in 0..n {
            let diffused: f64 = (0..n).map(|j| a_hat.get(i, j) * z_prev[j]).sum();
            let mut x = profiles[i].scale * ((1.0 - cfg.coupling) * z[i] + cfg.coupling * diffused);
            if cfg.noise > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                x += cfg.noise * profiles[i].scale * e;
            }
            data.push(x);
        }
        z_prev = z;
    }
    let step = chrono::Duration::minutes(cfg.step_minutes as i64);
    let timestamps = (0..steps).map(|t| cfg.start + step * t as i32).collect();
    EmissionDataset::new(graph, timestamps, Tensor::matrix(steps, n, data)?)
}
