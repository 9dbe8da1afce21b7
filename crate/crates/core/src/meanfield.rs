//! Signal propagation at initialization.
//!
//! With every weight drawn from `N(0, sigma_w2 / r)` the layer outputs and
//! the backpropagated sensitivities evolve by a per-layer slope factor
//! `s(k) = E(sum_i x(k)_i^2) * sigma_w2`.
//!
//! Conventions (layers numbered `1..N`):
//! - `q(k) = (r / width_k) E|Y(k)|^2`, the bond-normalized squared norm. It
//!   equals `E|Y(k)|^2` on every layer except the last, whose width is `O`.
//!   The recursion starts at `q(1) = s(1)`, the first node applied to a
//!   virtual predecessor of unit norm.
//! - `chi(k) = (1/r) E|dc/dY(k-1)|^2` for `k = 2..N+1`. The upstream
//!   `dc/dY(N)` is drawn with per-component variance `r / O`, so
//!   `chi(N+1) = 1`.
//!
//! Under these conventions:
//! - tt: `q(k) = s(k) q(k-1)` and `chi(k) = s(k) chi(k+1)` on every layer.
//! - restt: `q(k) = (s(k)+1) q(k-1) + s(k)` and `chi(k) = (s(k)+1) chi(k+1)`;
//!   on the last layer the identity is replaced by the final linear node,
//!   which contributes `sigma_w2` in place of the `1`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::trig_embed;
use crate::grad::layer_sensitivities;
use crate::model::{forward, init_params, Topology, TopologyMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Tt,
    Restt,
}

impl ModelKind {
    pub fn of(topology: &Topology) -> Result<Self> {
        match topology.mode {
            TopologyMode::PlainTt => Ok(ModelKind::Tt),
            TopologyMode::Restt => Ok(ModelKind::Restt),
            other => Err(Error::WrongPreset(format!(
                "signal propagation is analysed for plain_tt and restt, got {}",
                other.as_str()
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tt => "tt",
            ModelKind::Restt => "restt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Vanishing,
    Exploding,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Vanishing => "vanishing",
            Verdict::Exploding => "exploding",
        }
    }
}

/// Limits used to classify a slope profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// tt is stable when every `|s(k) - 1|` is at most this.
    pub tt_tolerance: f64,
    /// restt is stable when every `s(k)` is at most this.
    pub restt_smallness: f64,
    /// restt explodes when `prod (1 + s(k))` exceeds this.
    pub restt_growth_limit: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tt_tolerance: 0.05,
            restt_smallness: 0.01,
            restt_growth_limit: 1e6,
        }
    }
}

/// Predicted per-layer statistics. All vectors are indexed by 0-based layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStats {
    pub kind: ModelKind,
    pub sigma_w2: f64,
    pub slope: Vec<f64>,
    pub q: Vec<f64>,
    /// `chi[l] = (1/r) E|dc/dY(l)|^2`; the last entry is 1.
    pub chi: Vec<f64>,
}

impl SignalStats {
    /// `q(l) / q(l-1)` for `l >= 1`.
    pub fn forward_ratio(&self, layer: usize) -> f64 {
        self.q[layer] / self.q[layer - 1]
    }

    /// `chi(l-1) / chi(l)`: growth of the sensitivity across layer `l >= 1`.
    pub fn backward_ratio(&self, layer: usize) -> f64 {
        self.chi[layer - 1] / self.chi[layer]
    }

    pub fn verdict(&self, th: &Thresholds) -> Verdict {
        let tiny = 1e-9;
        match self.kind {
            ModelKind::Tt => {
                if self.slope.iter().all(|s| (s - 1.0).abs() <= th.tt_tolerance + tiny) {
                    Verdict::Stable
                } else if self.slope.iter().map(|s| s.ln()).sum::<f64>() > 0.0 {
                    Verdict::Exploding
                } else {
                    Verdict::Vanishing
                }
            }
            ModelKind::Restt => {
                let max = self.slope.iter().copied().fold(0.0, f64::max);
                let growth: f64 = self.slope.iter().map(|s| (1.0 + s).ln()).sum();
                if max <= th.restt_smallness * (1.0 + tiny) && growth <= th.restt_growth_limit.ln() {
                    Verdict::Stable
                } else {
                    Verdict::Exploding
                }
            }
        }
    }
}

fn check_stats(topology: &Topology, input_stats: &[f64]) -> Result<()> {
    if input_stats.len() != topology.n_nodes() {
        return Err(Error::InputCount {
            expected: topology.n_nodes(),
            actual: input_stats.len(),
        });
    }
    if input_stats.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(Error::ZeroInputStats);
    }
    Ok(())
}

/// Applies the recursions to per-layer input statistics `E(sum_i x_i^2)`.
pub fn predict(topology: &Topology, sigma_w2: f64, input_stats: &[f64]) -> Result<SignalStats> {
    let kind = ModelKind::of(topology)?;
    check_stats(topology, input_stats)?;
    if !(sigma_w2 > 0.0) {
        return Err(Error::NonPositiveVariance(sigma_w2));
    }
    let n = topology.n_nodes();
    let slope: Vec<f64> = input_stats.iter().map(|m| m * sigma_w2).collect();
    // Multiplier applied to the previous layer by the non-chain path.
    let carry = |l: usize| match kind {
        ModelKind::Tt => 0.0,
        ModelKind::Restt if l + 1 == n => sigma_w2,
        ModelKind::Restt => 1.0,
    };
    let offset = |l: usize| match kind {
        ModelKind::Tt => 0.0,
        ModelKind::Restt => slope[l],
    };
    let mut q = vec![slope[0]; n];
    for l in 1..n {
        q[l] = (slope[l] + carry(l)) * q[l - 1] + offset(l);
    }
    let mut chi = vec![1.0; n];
    for l in (1..n).rev() {
        chi[l - 1] = (slope[l] + carry(l)) * chi[l];
    }
    Ok(SignalStats {
        kind,
        sigma_w2,
        slope,
        q,
        chi,
    })
}

/// Initialization variance for a given input profile: `1 / E(sum x^2)` for
/// tt (geometric mean over layers, so the product of slopes is 1) and
/// `0.01 / max E(sum x^2)` for restt.
pub fn recommend_sigma(kind: ModelKind, input_stats: &[f64]) -> Result<f64> {
    recommend_sigma_with(kind, input_stats, Thresholds::default().restt_smallness)
}

pub fn recommend_sigma_with(kind: ModelKind, input_stats: &[f64], smallness: f64) -> Result<f64> {
    if input_stats.is_empty() || input_stats.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(Error::ZeroInputStats);
    }
    Ok(match kind {
        ModelKind::Tt => {
            let mean_log = input_stats.iter().map(|m| m.ln()).sum::<f64>() / input_stats.len() as f64;
            (-mean_log).exp()
        }
        ModelKind::Restt => smallness / input_stats.iter().copied().fold(0.0, f64::max),
    })
}

/// Predicted statistics next to Monte Carlo measurements.
///
/// Ratio estimators differ by model kind. For tt the per-trial gains
/// `q_t(l) / q_t(l-1)` are averaged: each gain has expectation `s(l)`
/// exactly, while the raw squared norms are heavy-tailed in depth. For restt
/// the ratio of the per-layer sample means is used.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldReport {
    pub predicted: SignalStats,
    pub trials: usize,
    pub input_stats: Vec<f64>,
    pub q_measured: Vec<f64>,
    pub chi_measured: Vec<f64>,
    /// Forward ratio per layer (`NaN` at layer 0) and its standard error.
    pub ratio_measured: Vec<f64>,
    pub ratio_se: Vec<f64>,
    /// Backward ratio `chi(l-1)/chi(l)` per layer (`NaN` at layer 0).
    pub chi_ratio_measured: Vec<f64>,
    pub chi_ratio_se: Vec<f64>,
    /// `q(N) / q(1)`, from the same estimator as the ratios.
    pub end_to_end_measured: f64,
    pub verdict: Verdict,
}

impl MeanFieldReport {
    /// Relative deviation of the measured forward ratio from the prediction.
    pub fn rel_err(&self, layer: usize) -> f64 {
        let p = self.predicted.forward_ratio(layer);
        (self.ratio_measured[layer] - p).abs() / p
    }

    pub fn chi_rel_err(&self, layer: usize) -> f64 {
        let p = self.predicted.backward_ratio(layer);
        (self.chi_ratio_measured[layer] - p).abs() / p
    }

    pub fn end_to_end_predicted(&self) -> f64 {
        self.predicted.q[self.predicted.q.len() - 1] / self.predicted.q[0]
    }

    /// One CSV row per layer (1-based `k`), then a `# verdict=..` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "k,s,q_pred,q_meas,chi_pred,chi_meas,ratio_pred,ratio_meas,ratio_se,chi_ratio_pred,chi_ratio_meas,rel_err\n",
        );
        let p = &self.predicted;
        for l in 0..p.q.len() {
            let ratios = if l == 0 {
                ",,,,,".to_string()
            } else {
                format!(
                    "{:e},{:e},{:e},{:e},{:e},{:e}",
                    p.forward_ratio(l),
                    self.ratio_measured[l],
                    self.ratio_se[l],
                    p.backward_ratio(l),
                    self.chi_ratio_measured[l],
                    self.rel_err(l)
                )
            };
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{}",
                l + 1,
                p.slope[l],
                p.q[l],
                self.q_measured[l],
                p.chi[l],
                self.chi_measured[l],
                ratios
            );
        }
        let _ = writeln!(out, "# verdict={}", self.verdict.as_str());
        out
    }
}

struct Trial {
    input: Vec<f64>,
    q: Vec<f64>,
    chi: Vec<f64>,
}

/// Monte Carlo check of [`predict`]: every trial draws fresh weights and a
/// fresh input, runs forward and backward with a random upstream, and
/// records the normalized squared norms. Trial `t` uses stream `t` of a
/// ChaCha generator keyed by `seed`, so results do not depend on threading.
pub fn measure<F>(topology: &Topology, sigma_w2: f64, sampler: F, trials: usize, seed: u64) -> Result<MeanFieldReport>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<Vec<f64>> + Sync,
{
    ModelKind::of(topology)?;
    if trials < 2 {
        return Err(Error::Hyperparameter(format!("need at least 2 trials, got {trials}")));
    }
    let n = topology.n_nodes();
    let r = topology.bond_dim as f64;
    let o = topology.output_dim as f64;
    let up_dist = Normal::new(0.0, (r / o).sqrt()).expect("positive std");

    let runs: Vec<Trial> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let params = init_params(topology, sigma_w2, rng.random())?;
            let x = sampler(&mut rng);
            let (_, trace) = forward(&params, topology, &x)?;
            let upstream: Vec<f64> = (0..topology.output_dim).map(|_| up_dist.sample(&mut rng)).collect();
            let sens = layer_sensitivities(&params, topology, &trace, &upstream)?;
            let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
            Ok(Trial {
                input: x.iter().map(|v| sq(v)).collect(),
                q: (0..n).map(|l| sq(&trace.outputs[l]) * r / topology.layer_width(l) as f64).collect(),
                chi: sens.iter().map(|d| sq(d) / r).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let nt = trials as f64;
    let mean = |f: &dyn Fn(&Trial) -> f64| runs.iter().map(f).sum::<f64>() / nt;
    let input_stats: Vec<f64> = (0..n).map(|l| mean(&|t| t.input[l])).collect();
    let predicted = predict(topology, sigma_w2, &input_stats)?;
    let q_measured: Vec<f64> = (0..n).map(|l| mean(&|t| t.q[l])).collect();
    let chi_measured: Vec<f64> = (0..n).map(|l| mean(&|t| t.chi[l])).collect();

    let mut ratio_measured = vec![f64::NAN; n];
    let mut ratio_se = vec![f64::NAN; n];
    let mut chi_ratio_measured = vec![f64::NAN; n];
    let mut chi_ratio_se = vec![f64::NAN; n];
    for l in 1..n {
        let (fr, fse) = match predicted.kind {
            ModelKind::Tt => mean_of_ratios(&runs, |t| (t.q[l], t.q[l - 1])),
            ModelKind::Restt => ratio_of_means(&runs, |t| (t.q[l], t.q[l - 1])),
        };
        let (br, bse) = match predicted.kind {
            ModelKind::Tt => mean_of_ratios(&runs, |t| (t.chi[l - 1], t.chi[l])),
            ModelKind::Restt => ratio_of_means(&runs, |t| (t.chi[l - 1], t.chi[l])),
        };
        ratio_measured[l] = fr;
        ratio_se[l] = fse;
        chi_ratio_measured[l] = br;
        chi_ratio_se[l] = bse;
    }
    let end_to_end_measured = match predicted.kind {
        ModelKind::Tt => ratio_measured.iter().skip(1).product(),
        ModelKind::Restt => q_measured[n - 1] / q_measured[0],
    };
    let verdict = predicted.verdict(&Thresholds::default());
    Ok(MeanFieldReport {
        predicted,
        trials,
        input_stats,
        q_measured,
        chi_measured,
        ratio_measured,
        ratio_se,
        chi_ratio_measured,
        chi_ratio_se,
        end_to_end_measured,
        verdict,
    })
}

fn mean_of_ratios(runs: &[Trial], f: impl Fn(&Trial) -> (f64, f64)) -> (f64, f64) {
    let n = runs.len() as f64;
    let g: Vec<f64> = runs.iter().map(|t| {
        let (a, b) = f(t);
        a / b
    }).collect();
    let m = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `mean(a) / mean(b)` with a delta-method standard error.
fn ratio_of_means(runs: &[Trial], f: impl Fn(&Trial) -> (f64, f64)) -> (f64, f64) {
    let n = runs.len() as f64;
    let pairs: Vec<(f64, f64)> = runs.iter().map(f).collect();
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        vaa += (a - ma).powi(2);
        vbb += (b - mb).powi(2);
        vab += (a - ma) * (b - mb);
    }
    let (vaa, vbb, vab) = (vaa / (n - 1.0), vbb / (n - 1.0), vab / (n - 1.0));
    let ratio = ma / mb;
    let var = (vaa - 2.0 * ratio * vab + ratio * ratio * vbb) / (mb * mb * n);
    (ratio, var.max(0.0).sqrt())
}

/// Trig-embedded uniform pixels, one per node: unit-norm 2-vectors.
pub fn unit_norm_sampler(n_nodes: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<Vec<f64>> + Sync {
    move |rng| {
        (0..n_nodes)
            .map(|_| trig_embed(&[rng.random::<f64>()]).expect("non-empty").0)
            .collect()
    }
}

/// Independent `N(0, variance)` components.
pub fn gaussian_sampler(input_dims: Vec<usize>, variance: f64) -> impl Fn(&mut ChaCha8Rng) -> Vec<Vec<f64>> + Sync {
    let dist = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    move |rng| {
        input_dims
            .iter()
            .map(|&d| (0..d).map(|_| dist.sample(rng)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn tt_critical_point_is_flat() {
        let topo = Topology::uniform(Preset::PlainTt, 6, 2, 4, 1).unwrap();
        let st = predict(&topo, 1.0, &[1.0; 6]).unwrap();
        assert!(st.q.iter().all(|&q| q == 1.0));
        assert!(st.chi.iter().all(|&c| c == 1.0));
        assert_eq!(st.verdict(&Thresholds::default()), Verdict::Stable);
        let st = predict(&topo, 4.0, &[1.0; 6]).unwrap();
        assert_eq!(st.verdict(&Thresholds::default()), Verdict::Exploding);
        assert_eq!(st.q[5], 4f64.powi(6));
        let st = predict(&topo, 0.5, &[1.0; 6]).unwrap();
        assert_eq!(st.verdict(&Thresholds::default()), Verdict::Vanishing);
    }

    #[test]
    fn restt_recursion_arithmetic() {
        let topo = Topology::uniform(Preset::GeneralRestt, 6, 2, 4, 4).unwrap();
        let st = predict(&topo, 1.0, &[1.0; 6]).unwrap();
        for l in 1..5 {
            assert_eq!(st.q[l], 2.0 * st.q[l - 1] + 1.0);
            assert_eq!(st.chi[l - 1], 2.0 * st.chi[l]);
        }
        assert_eq!(st.q[0], 1.0);
        assert_eq!(st.verdict(&Thresholds::default()), Verdict::Exploding);

        let st = predict(&topo, 0.01, &[1.0; 6]).unwrap();
        assert_eq!(st.verdict(&Thresholds::default()), Verdict::Stable);
        let long = Topology::uniform(Preset::GeneralRestt, 2000, 2, 4, 4).unwrap();
        let st = predict(&long, 0.01, &vec![1.0; 2000]).unwrap();
        assert_eq!(st.verdict(&Thresholds::default()), Verdict::Exploding);
    }

    #[test]
    fn zero_slope_limit_is_identity_propagation() {
        // s = 0 is reached as a limit: tiny weights keep q nearly constant.
        let topo = Topology::uniform(Preset::GeneralRestt, 5, 2, 3, 3).unwrap();
        let st = predict(&topo, 1e-300, &[1.0; 5]).unwrap();
        for l in 1..4 {
            assert!((st.q[l] - st.q[l - 1]).abs() <= 2e-300);
        }
    }

    #[test]
    fn recommendations() {
        assert_eq!(recommend_sigma(ModelKind::Tt, &[1.0; 5]).unwrap(), 1.0);
        assert_eq!(recommend_sigma(ModelKind::Restt, &[1.0; 5]).unwrap(), 0.01);
        assert_eq!(recommend_sigma(ModelKind::Tt, &[4.0; 3]).unwrap(), 0.25);
        assert_eq!(recommend_sigma(ModelKind::Restt, &[1.0, 4.0]).unwrap(), 0.0025);
        assert!(matches!(recommend_sigma(ModelKind::Tt, &[1.0, 0.0]), Err(Error::ZeroInputStats)));
        assert!(recommend_sigma(ModelKind::Tt, &[]).is_err());
    }

    #[test]
    fn rejects_other_topologies() {
        let topo = Topology::uniform(Preset::FullyConnected, 3, 2, 3, 1).unwrap();
        assert!(matches!(predict(&topo, 1.0, &[1.0; 3]), Err(Error::WrongPreset(_))));
        let topo = Topology::uniform(Preset::PlainTt, 3, 2, 3, 1).unwrap();
        assert!(predict(&topo, 1.0, &[1.0; 2]).is_err());
    }

    #[test]
    fn small_measurement_tracks_prediction() {
        let topo = Topology::uniform(Preset::GeneralRestt, 5, 2, 6, 2).unwrap();
        let rep = measure(&topo, 0.3, unit_norm_sampler(5), 4000, 1).unwrap();
        assert!(rep.input_stats.iter().all(|m| (m - 1.0).abs() < 1e-12));
        for l in 1..5 {
            assert!(rep.rel_err(l) < 0.05, "layer {l}: {}", rep.rel_err(l));
            assert!(rep.chi_rel_err(l) < 0.05, "layer {l}: {}", rep.chi_rel_err(l));
        }
        let again = measure(&topo, 0.3, unit_norm_sampler(5), 4000, 1).unwrap();
        assert_eq!(rep.to_csv(), again.to_csv());
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.ends_with("# verdict=exploding\n"));
    }

    #[test]
    fn gaussian_inputs_scale_the_slope() {
        let topo = Topology::uniform(Preset::PlainTt, 4, 3, 5, 1).unwrap();
        let rep = measure(&topo, 1.0, gaussian_sampler(vec![3; 4], 0.5), 4000, 2).unwrap();
        for m in &rep.input_stats {
            assert!((m - 1.5).abs() < 0.1);
        }
        for l in 1..4 {
            assert!(rep.rel_err(l) < 0.1, "layer {l}: {}", rep.rel_err(l));
        }
    }
}
