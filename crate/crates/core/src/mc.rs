//! Monte Carlo reference engine for the tail measures.
//!
//! Two sampling modes share one scenario layout. `Systematic` draws only the
//! factor vector and books every facility at its conditional expected value,
//! which strips all idiosyncratic noise out of the estimate; `Full` also
//! draws the facility drivers and prices realized values. The gap between
//! the two is exactly the granularity premium the analytic adjustments
//! chase, so most diagnostics run both on the same seed.
//!
//! Scenario `i` runs on its own ChaCha stream keyed by (seed, i), with a
//! fixed draw order inside the stream: the factor normals first, then one
//! idiosyncratic normal per facility in portfolio order (full mode only).
//! Estimates are therefore bit-identical regardless of how the scenario
//! range is chunked, and any single scenario can be replayed in isolation.
//! The contribution pass exploits that: pass one keeps portfolio values and
//! the k smallest entries, pass two replays just the tail-window scenarios
//! to accumulate per-facility means.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CriskError, Result};
use crate::gaussian::norm_cdf;
use crate::portfolio::{validate, Facility, Portfolio};
use crate::quadrature::QuadratureRule;
use crate::rng::standard_normal;

/// Fixed conditional-expectation rule for curve-valued facilities in
/// systematic mode. Piecewise-linear integrands converge fast enough here
/// that the node count never shows up next to Monte Carlo noise.
const CURVE_NODES: usize = 128;

/// Fewer tail-window scenarios than this and per-facility means are noise.
const MIN_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    /// Factor draws only; facilities priced at conditional expected value.
    Systematic,
    /// Factor and idiosyncratic draws; facilities priced at realized value.
    Full,
}

/// Simulation request. `window` brackets the loss quantile whose scenarios
/// feed the per-facility contribution estimates; it must contain `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub mode: SimMode,
    pub scenarios: u64,
    pub seed: u64,
    /// Tail level: the reported quantile is the alpha order statistic of
    /// simulated portfolio values from below.
    pub alpha: f64,
    /// Quantile band (lo, hi) in probability units, 0 < lo < alpha < hi < 1.
    pub window: (f64, f64),
    /// Chunking hint for progress or checkpoint layers. The per-scenario
    /// streams make every estimate independent of it by construction.
    pub batch: u64,
}

impl SimConfig {
    /// Config at tail level `alpha` with the window defaulted to +-25%.
    pub fn new(mode: SimMode, scenarios: u64, seed: u64, alpha: f64) -> Self {
        SimConfig {
            mode,
            scenarios,
            seed,
            alpha,
            window: (0.75 * alpha, 1.25 * alpha),
            batch: 1 << 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(CriskError::Config(format!(
                "alpha {} outside (0, 0.5)",
                self.alpha
            )));
        }
        if (self.scenarios as f64) * self.alpha < 10.0 {
            return Err(CriskError::Config(format!(
                "{} scenarios leave fewer than 10 in the alpha {} tail",
                self.scenarios, self.alpha
            )));
        }
        let (lo, hi) = self.window;
        if !(lo > 0.0 && lo < self.alpha && self.alpha < hi && hi < 1.0) {
            return Err(CriskError::Config(format!(
                "window ({lo}, {hi}) must satisfy 0 < lo < alpha < hi < 1"
            )));
        }
        if self.batch == 0 {
            return Err(CriskError::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::new(SimMode::Full, 200_000, 7, 0.01)
    }
}

/// Tail-window contribution of one facility, in portfolio value units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityEstimate {
    pub id: String,
    /// weight * (overall mean value - tail-window mean value).
    pub contribution: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub mode: SimMode,
    pub scenarios: u64,
    pub seed: u64,
    pub alpha: f64,
    /// Sample mean of portfolio value, assembled from per-facility sums.
    pub expected_value: f64,
    /// The alpha order statistic of portfolio value from below.
    pub quantile: f64,
    /// expected_value - quantile.
    pub var_estimate: f64,
    /// Order-statistic standard error via a central spacing density estimate.
    pub var_std_error: f64,
    /// expected_value - mean of the alpha smallest portfolio values.
    pub es_estimate: f64,
    pub es_std_error: f64,
    /// Scenario ranks [lo, hi) that fed the contribution estimates.
    pub window_ranks: (u64, u64),
    /// expected_value - window mean of portfolio value; the contributions
    /// sum to this up to rounding.
    pub window_var_estimate: f64,
    pub contributions: Vec<FacilityEstimate>,
}

/// Neumaier-compensated accumulator. Per-facility sums over millions of
/// scenarios must not drift, or the additivity of contributions degrades.
#[derive(Debug, Clone, Copy, Default)]
struct RunningSum {
    sum: f64,
    comp: f64,
}

impl RunningSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Heap entry ordered by value then scenario index, so the k smallest set
/// is unambiguous even under ties.
#[derive(Debug, Clone, Copy)]
struct TailEntry {
    value: f64,
    index: u64,
}

impl PartialEq for TailEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for TailEntry {}

impl PartialOrd for TailEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TailEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| self.index.cmp(&other.index))
    }
}

/// Per-facility pricing data hoisted out of the scenario loop.
enum CondValue {
    /// Canonical step form. Conditional mean is a sum of survivor terms,
    /// point evaluation a threshold search.
    Steps {
        thresholds: Vec<f64>,
        values: Vec<f64>,
        base: f64,
        jumps: Vec<f64>,
    },
    /// Curve: conditional mean by a fixed quadrature over the driver,
    /// offsets pre-scaled by tau.
    Curve { offsets: Vec<f64>, weights: Vec<f64> },
}

struct Prepared<'a> {
    fac: &'a Facility,
    tau: f64,
    cond: CondValue,
}

impl Prepared<'_> {
    fn build<'a>(fac: &'a Facility, rule: &QuadratureRule) -> Prepared<'a> {
        let tau = (1.0 - fac.rho * fac.rho).sqrt();
        let cond = match fac.value.as_steps() {
            Some((thresholds, values)) => {
                let base = values[0];
                let jumps = values.windows(2).map(|w| w[1] - w[0]).collect();
                CondValue::Steps {
                    thresholds,
                    values,
                    base,
                    jumps,
                }
            }
            None => CondValue::Curve {
                offsets: rule.nodes().iter().map(|&x| tau * x).collect(),
                weights: rule.weights().to_vec(),
            },
        };
        Prepared { fac, tau, cond }
    }

    /// E[v | factor projection = s].
    fn conditional(&self, s: f64) -> f64 {
        let drift = self.fac.rho * s;
        match &self.cond {
            CondValue::Steps {
                thresholds,
                base,
                jumps,
                ..
            } => {
                let mut v = *base;
                for (&t, &j) in thresholds.iter().zip(jumps) {
                    v += j * (1.0 - norm_cdf((t - drift) / self.tau));
                }
                v
            }
            CondValue::Curve { offsets, weights } => {
                let spec = &self.fac.value;
                offsets
                    .iter()
                    .zip(weights)
                    .map(|(&dx, &w)| w * spec.evaluate(drift + dx))
                    .sum()
            }
        }
    }

    /// Realized v at driver rho*s + tau*xi.
    fn sampled(&self, s: f64, xi: f64) -> f64 {
        let eps = self.fac.rho * s + self.tau * xi;
        match &self.cond {
            CondValue::Steps {
                thresholds, values, ..
            } => values[thresholds.partition_point(|&t| t <= eps)],
            CondValue::Curve { .. } => self.fac.value.evaluate(eps),
        }
    }
}

/// Replays scenario `index` into `values` (one entry per facility) and
/// returns the weighted portfolio value. Both passes call this, so a tail
/// entry replays to the bit.
fn run_scenario(
    base: &ChaCha8Rng,
    index: u64,
    mode: SimMode,
    prepared: &[Prepared<'_>],
    dim: usize,
    eta: &mut Vec<f64>,
    values: &mut Vec<f64>,
) -> f64 {
    let mut rng = base.clone();
    rng.set_stream(index);
    eta.clear();
    for _ in 0..dim {
        eta.push(standard_normal(&mut rng));
    }
    values.clear();
    let mut total = 0.0;
    for p in prepared {
        let s = p.fac.project(eta);
        let v = match mode {
            SimMode::Systematic => p.conditional(s),
            SimMode::Full => p.sampled(s, standard_normal(&mut rng)),
        };
        values.push(v);
        total += p.fac.weight * v;
    }
    total
}

/// Runs the configured simulation and estimates the tail measures together
/// with window contributions.
pub fn simulate(portfolio: &Portfolio, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let violations = validate(portfolio);
    if !violations.is_empty() {
        return Err(CriskError::Validation(violations));
    }

    let n = cfg.scenarios;
    let nf = n as f64;
    let dim = portfolio.n_factors();
    let n_fac = portfolio.facilities.len();

    // Rank bookkeeping up front so bad windows fail before the long loop.
    let var_k = ((cfg.alpha * nf).round() as usize).max(1);
    let spacing = (var_k / 20).max(3);
    let lo_rank = (cfg.window.0 * nf).round() as usize;
    let hi_rank = (cfg.window.1 * nf).round() as usize;
    let got = hi_rank.saturating_sub(lo_rank);
    if got < MIN_WINDOW {
        return Err(CriskError::InsufficientTail {
            got,
            need: MIN_WINDOW,
        });
    }
    let k_keep = (var_k + spacing).max(hi_rank).min(n as usize);

    let rule = QuadratureRule::gauss_hermite(CURVE_NODES)?;
    let prepared: Vec<Prepared<'_>> = portfolio
        .facilities
        .iter()
        .map(|f| Prepared::build(f, &rule))
        .collect();

    let base = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eta = Vec::with_capacity(dim);
    let mut values = Vec::with_capacity(n_fac);

    // Pass one: full-sample facility sums plus the k smallest portfolio
    // values. The max-heap evicts its largest element once past capacity.
    let mut fac_sums = vec![RunningSum::default(); n_fac];
    let mut heap: BinaryHeap<TailEntry> = BinaryHeap::with_capacity(k_keep + 1);
    for index in 0..n {
        let total = run_scenario(&base, index, cfg.mode, &prepared, dim, &mut eta, &mut values);
        for (acc, &v) in fac_sums.iter_mut().zip(&values) {
            acc.add(v);
        }
        heap.push(TailEntry { value: total, index });
        if heap.len() > k_keep {
            heap.pop();
        }
    }
    let tail = heap.into_sorted_vec();

    let fac_means: Vec<f64> = fac_sums.iter().map(|a| a.value() / nf).collect();
    let expected_value: f64 = prepared
        .iter()
        .zip(&fac_means)
        .map(|(p, &m)| p.fac.weight * m)
        .sum();

    let quantile = tail[var_k - 1].value;
    let var_estimate = expected_value - quantile;
    // Central spacing density estimate: fhat = (2m/n) / spacing width.
    let width = tail[var_k - 1 + spacing].value - tail[var_k - 1 - spacing].value;
    let var_std_error = if width > 0.0 {
        (cfg.alpha * (1.0 - cfg.alpha) / nf).sqrt() * width * nf / (2.0 * spacing as f64)
    } else {
        0.0
    };

    let mut tail_acc = RunningSum::default();
    for e in &tail[..var_k] {
        tail_acc.add(e.value);
    }
    let tail_mean = tail_acc.value() / var_k as f64;
    let es_estimate = expected_value - tail_mean;
    let mut tail_sq = RunningSum::default();
    for e in &tail[..var_k] {
        let d = e.value - tail_mean;
        tail_sq.add(d * d);
    }
    let es_std_error = (tail_sq.value() / var_k as f64).sqrt() / (var_k as f64).sqrt();

    // Pass two: replay just the window scenarios for facility tail means.
    let mut win_sums = vec![RunningSum::default(); n_fac];
    let mut win_sqs = vec![RunningSum::default(); n_fac];
    for e in &tail[lo_rank..hi_rank] {
        let total = run_scenario(&base, e.index, cfg.mode, &prepared, dim, &mut eta, &mut values);
        debug_assert_eq!(total.to_bits(), e.value.to_bits());
        let _ = total;
        for i in 0..n_fac {
            win_sums[i].add(values[i]);
            win_sqs[i].add(values[i] * values[i]);
        }
    }
    let wn = got as f64;
    let mut contributions = Vec::with_capacity(n_fac);
    for (i, p) in prepared.iter().enumerate() {
        let wm = win_sums[i].value() / wn;
        let var = (win_sqs[i].value() / wn - wm * wm).max(0.0);
        contributions.push(FacilityEstimate {
            id: p.fac.id.clone(),
            contribution: p.fac.weight * (fac_means[i] - wm),
            std_error: p.fac.weight * (var / wn).sqrt(),
        });
    }
    let window_mean: f64 = prepared
        .iter()
        .zip(&win_sums)
        .map(|(p, s)| p.fac.weight * (s.value() / wn))
        .sum();

    Ok(SimResult {
        mode: cfg.mode,
        scenarios: n,
        seed: cfg.seed,
        alpha: cfg.alpha,
        expected_value,
        quantile,
        var_estimate,
        var_std_error,
        es_estimate,
        es_std_error,
        window_ranks: (lo_rank as u64, hi_rank as u64),
        window_var_estimate: expected_value - window_mean,
        contributions,
    })
}

/// `simulate` with the mode forced to factor-only sampling.
pub fn simulate_systematic(portfolio: &Portfolio, cfg: &SimConfig) -> Result<SimResult> {
    let cfg = SimConfig {
        mode: SimMode::Systematic,
        ..*cfg
    };
    simulate(portfolio, &cfg)
}

/// `simulate` with the mode forced to full idiosyncratic sampling.
pub fn simulate_full(portfolio: &Portfolio, cfg: &SimConfig) -> Result<SimResult> {
    let cfg = SimConfig {
        mode: SimMode::Full,
        ..*cfg
    };
    simulate(portfolio, &cfg)
}
