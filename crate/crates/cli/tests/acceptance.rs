//! Acceptance suite: one verdict line per criterion.
//!
//! Each test prints `Criterion N (<label>): PASS|FAIL [elapsed]` and then
//! fails loudly on any violated bound, so `cargo test --test acceptance --
//! --nocapture` doubles as a readable scorecard. The checks pit the
//! analytic stack against closed forms, quadrature oracles, central finite
//! differences, and the Monte Carlo engine, and finish with byte-identity
//! of deterministic command line reruns.

use std::collections::HashMap;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use crisk_core::analyze::{analyze, analyze_full, analyze_with_rotation};
use crisk_core::coeffs::{facility_coefficients, CoefficientSet};
use crisk_core::expansion::{portfolio_tensors, tail_split, ConditionalMoments};
use crisk_core::gaussian::{norm_cdf, norm_inv_cdf};
use crisk_core::hermite::{he, mehler_kernel, triple_product_integral};
use crisk_core::mc::simulate;
use crisk_core::portfolio::{Facility, FactorModel, Portfolio, ValueSpec};
use crisk_core::risk::{portfolio_sigma, quantile_adjustment, OrderFlags};
use crisk_core::rotation::{rotate_portfolio, rotation_from_v1};
use crisk_core::synth::{synthesize_benchmark, BenchmarkKind, BenchmarkSpec};
use crisk_core::{
    ExpansionConfig, GaCaps, QuadratureRule, RiskConfig, RiskReport, SimConfig, SimMode, SimResult,
};

struct Criterion {
    number: u32,
    label: &'static str,
    budget: Option<Duration>,
    started: Instant,
    failures: Vec<String>,
}

impl Criterion {
    fn start(number: u32, label: &'static str, budget_secs: Option<u64>) -> Self {
        Criterion {
            number,
            label,
            budget: budget_secs.map(Duration::from_secs),
            started: Instant::now(),
            failures: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(detail());
        }
    }

    fn finish(mut self) {
        let elapsed = self.started.elapsed();
        if let Some(budget) = self.budget {
            if elapsed > budget {
                self.failures
                    .push(format!("runtime {elapsed:.1?} over budget {budget:?}"));
            }
        }
        let verdict = if self.failures.is_empty() {
            "PASS"
        } else {
            "FAIL"
        };
        println!(
            "Criterion {} ({}): {} [{:.2?}]",
            self.number, self.label, verdict, elapsed
        );
        if !self.failures.is_empty() {
            panic!("criterion {} failed: {}", self.number, self.failures.join("; "));
        }
    }
}

fn model(n: usize) -> FactorModel {
    FactorModel::new((0..n).map(|i| format!("F{i}")).collect()).unwrap()
}

fn indicator(pd: f64) -> ValueSpec {
    ValueSpec::DefaultIndicator {
        pd,
        performing: 1.0,
        defaulted: 0.0,
    }
}

fn facility(
    id: &str,
    weight: f64,
    rho: f64,
    loadings: Vec<(usize, f64)>,
    value: ValueSpec,
) -> Facility {
    Facility {
        id: id.into(),
        weight,
        rho,
        loadings,
        value,
    }
}

fn expand(portfolio: &Portfolio, order: usize) -> Vec<CoefficientSet> {
    portfolio
        .facilities
        .iter()
        .map(|f| facility_coefficients(&f.value, order).unwrap())
        .collect()
}

/// Five-point central difference, O(h^4).
fn five_point(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

fn rel_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1e-12)
}

#[test]
fn criterion_1_vasicek_single_loan() {
    let mut c = Criterion::start(1, "single-loan closed form", Some(1));
    let rho: f64 = 0.6;
    let pd = 0.01;
    let tau = (1.0 - rho * rho).sqrt();
    let threshold = norm_inv_cdf(pd).unwrap();
    let p = Portfolio {
        facilities: vec![facility("loan", 1.0, rho, vec![(0, 1.0)], indicator(pd))],
        factor_model: model(1),
    };

    let expansion = ExpansionConfig {
        tensor_order: 1,
        onef_order: 40,
        cond_cap: 0,
    };
    let coeffs = expand(&p, 40);
    let v1 = portfolio_tensors(&p, &coeffs, 1).unwrap()[0].to_vector();
    let rotation = rotation_from_v1(&v1).unwrap();
    let rotated = rotate_portfolio(&p, &rotation).unwrap();
    let tail = tail_split(&rotated, &coeffs, &expansion).unwrap();

    let mut worst = 0.0f64;
    for k in 0..=1024 {
        let eta = -4.0 + 8.0 * (k as f64) / 1024.0;
        let series = tail.onef_derivative(eta, 0);
        let exact = norm_cdf((rho * eta - threshold) / tau);
        worst = worst.max((series - exact).abs());
    }
    c.require(worst <= 1e-3, || {
        format!("conditional expectation off by {worst:.2e} on [-4,4]")
    });

    let cfg = RiskConfig {
        alpha: 0.001,
        orders: OrderFlags {
            onef: true,
            mf2: false,
            mf3: false,
            ga2: false,
            ga3: false,
        },
        expansion,
        ga: GaCaps::default(),
    };
    let report = analyze(&p, &cfg).unwrap();
    let target = report.expected_value - 0.7225;
    c.require((report.var_total - target).abs() <= 2e-3, || {
        format!("VaR {} vs closed-form {target}", report.var_total)
    });
    c.finish();
}

#[test]
fn criterion_2_hermite_kernel_identities() {
    let mut c = Criterion::start(2, "Hermite kernel identities", Some(10));

    // Orthonormality of He_n / sqrt(n!) under the Gaussian weight.
    let rule = QuadratureRule::gauss_hermite(64).unwrap();
    let root_fact = |n: usize| (1..=n).map(|k| (k as f64).sqrt()).product::<f64>();
    let mut worst_orth = 0.0f64;
    for n in 0..=20usize {
        for m in 0..=20usize {
            let inner = rule.integrate(|x| he(n, x).unwrap() * he(m, x).unwrap())
                / (root_fact(n) * root_fact(m));
            let target = if n == m { 1.0 } else { 0.0 };
            worst_orth = worst_orth.max((inner - target).abs());
        }
    }
    c.require(worst_orth <= 1e-8, || {
        format!("orthonormality defect {worst_orth:.2e}")
    });

    // Mehler partial sums converge to the closed kernel for rho up to 0.9.
    let partial = |eps: f64, eta: f64, rho: f64, terms: usize| -> f64 {
        let (mut a0, mut a1) = (1.0, eps);
        let (mut b0, mut b1) = (1.0, eta);
        let mut r = 1.0;
        let mut sum = a0 * b0;
        r *= rho;
        sum += r * a1 * b1;
        for n in 1..terms {
            let sn = (n as f64).sqrt();
            let sn1 = ((n + 1) as f64).sqrt();
            let a2 = (eps * a1 - sn * a0) / sn1;
            let b2 = (eta * b1 - sn * b0) / sn1;
            r *= rho;
            sum += r * a2 * b2;
            a0 = a1;
            a1 = a2;
            b0 = b1;
            b1 = b2;
        }
        sum
    };
    for &rho in &[0.3, 0.6, 0.9] {
        for &(eps, eta) in &[(0.3, -0.8), (-1.6, 0.4), (2.0, 1.1)] {
            let kernel = mehler_kernel(eps, eta, rho).unwrap();
            let err_short = (partial(eps, eta, rho, 40) - kernel).abs();
            let err_long = (partial(eps, eta, rho, 400) - kernel).abs();
            c.require(err_long <= 1e-8 * kernel.abs().max(1.0), || {
                format!("Mehler sum error {err_long:.2e} at rho={rho}, ({eps},{eta})")
            });
            c.require(err_long <= err_short, || {
                format!("Mehler sum not converging at rho={rho}, ({eps},{eta})")
            });
        }
    }

    // Triple products against quadrature, and the printed value 6. The
    // comparison runs in the orthonormal basis He_n / sqrt(n!): raw values
    // reach n!^(3/2) where absolute quadrature noise dwarfs any fixed
    // tolerance, while the normalized integrand stays O(1)-scaled.
    let rule96 = QuadratureRule::gauss_hermite(96).unwrap();
    let mut worst_triple = 0.0f64;
    for n in 0..=10usize {
        for m in 0..=10usize {
            for k in 0..=10usize {
                let scale = root_fact(n) * root_fact(m) * root_fact(k);
                let exact = triple_product_integral(n, m, k).unwrap() / scale;
                let quad = rule96
                    .integrate(|x| he(n, x).unwrap() * he(m, x).unwrap() * he(k, x).unwrap())
                    / scale;
                worst_triple = worst_triple.max((quad - exact).abs() / exact.abs().max(1.0));
            }
        }
    }
    c.require(worst_triple <= 1e-8, || {
        format!("triple product defect {worst_triple:.2e}")
    });
    let t123 = triple_product_integral(1, 2, 3).unwrap();
    c.require((t123 - 6.0).abs() <= 1e-12, || {
        format!("triple(1,2,3) = {t123}, want 6")
    });
    c.finish();
}

#[test]
fn criterion_3_variance_matches_quadrature() {
    let mut c = Criterion::start(3, "systematic variance vs quadrature", Some(5));
    let p = Portfolio {
        facilities: vec![
            facility("a", 0.8, 0.45, vec![(0, 1.0)], indicator(0.02)),
            facility(
                "b",
                0.5,
                0.6,
                vec![(0, 0.8), (1, 0.6)],
                ValueSpec::StepFunction {
                    thresholds: vec![-2.0, -1.0],
                    values: vec![0.2, 0.6, 1.0],
                },
            ),
            facility("c", 1.2, 0.3, vec![(1, 1.0)], indicator(0.05)),
            facility(
                "d",
                0.7,
                0.65,
                vec![(0, 0.6), (1, -0.8)],
                ValueSpec::StepFunction {
                    thresholds: vec![-1.5],
                    values: vec![0.35, 1.0],
                },
            ),
            facility("e", 0.4, 0.5, vec![(0, 0.28), (1, 0.96)], indicator(0.01)),
        ],
        factor_model: model(2),
    };
    let coeffs = expand(&p, 40);
    let sigma = portfolio_sigma(&p, &coeffs, 40).unwrap();

    // Conditional mean of one facility given the factor vector. The value
    // driver is a = rho * beta . eta + tau * xi with tau^2 = 1 - rho^2 |beta|^2.
    let cond = |f: &Facility, eta: &[f64]| -> f64 {
        let tau = (1.0 - f.rho * f.rho * f.loading_norm_sq()).sqrt();
        let shift = f.rho * f.project(eta);
        match &f.value {
            ValueSpec::DefaultIndicator {
                pd,
                performing,
                defaulted,
            } => {
                let p_def = norm_cdf((norm_inv_cdf(*pd).unwrap() - shift) / tau);
                defaulted * p_def + performing * (1.0 - p_def)
            }
            ValueSpec::StepFunction { thresholds, values } => {
                let mut acc = 0.0;
                let mut prev = 0.0;
                for (j, t) in thresholds.iter().enumerate() {
                    let cum = norm_cdf((t - shift) / tau);
                    acc += values[j] * (cum - prev);
                    prev = cum;
                }
                acc + values[thresholds.len()] * (1.0 - prev)
            }
            ValueSpec::SampledCurve { .. } => unreachable!("toy has no curves"),
        }
    };
    let value = |eta: &[f64]| -> f64 {
        p.facilities
            .iter()
            .map(|f| f.weight * cond(f, eta))
            .sum::<f64>()
    };

    let rule = QuadratureRule::gauss_hermite(160).unwrap();
    let mean = rule.integrate(|x| rule.integrate(|y| value(&[x, y])));
    let second = rule.integrate(|x| {
        rule.integrate(|y| {
            let v = value(&[x, y]);
            v * v
        })
    });
    let variance = second - mean * mean;
    c.require(rel_gap(sigma.variance, variance) <= 1e-6, || {
        format!(
            "sigma^2 {} vs quadrature {} (rel {:.2e})",
            sigma.variance,
            variance,
            rel_gap(sigma.variance, variance)
        )
    });

    let sum_c: f64 = sigma.contributions.iter().sum();
    c.require(rel_gap(sum_c, sigma.sigma) <= 1e-12, || {
        format!("sigma contributions sum {} vs sigma {}", sum_c, sigma.sigma)
    });
    c.finish();
}

#[test]
fn criterion_4_quantile_expansion_error_order() {
    let mut c = Criterion::start(4, "quantile expansion fourth-order error", Some(10));
    let alpha = 0.01;
    let eta = norm_inv_cdf(alpha).unwrap();
    let rule = QuadratureRule::gauss_hermite(128).unwrap();

    // Exact lower quantile of V = x + delta, delta | x ~ N(0, a + b x^2),
    // by quadrature over x and bisection in the quantile.
    let exact_quantile = |a: f64, b: f64| -> f64 {
        let cdf = |q: f64| {
            rule.integrate(|x| {
                let tau = (a + b * x * x).sqrt();
                norm_cdf((q - x) / tau)
            })
        };
        let mut lo = eta - 3.0;
        let mut hi = eta + 3.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    // Adjusted quantile from the engine: V1f(y) = y, so derivs are linear,
    // mu2(y) = a + b y^2, and the symmetric noise kills the mu3 channel.
    let err = |delta: f64| -> f64 {
        let (a, b) = (delta * delta, 0.5 * delta * delta);
        let mu = ConditionalMoments {
            eta1: eta,
            mu2: a + b * eta * eta,
            mu2_prime: 2.0 * b * eta,
            mu3: 0.0,
            mu3_prime: 0.0,
            mu3_second: 0.0,
        };
        let derivs = [eta, 1.0, 0.0, 0.0];
        let adjusted = eta - quantile_adjustment(&mu, &derivs, eta, 2).unwrap();
        (exact_quantile(a, b) - adjusted).abs()
    };

    let ratio = err(0.3) / err(0.15);
    c.require((8.0..=32.0).contains(&ratio), || {
        format!("error ratio {ratio} outside [8, 32]")
    });
    c.finish();
}

fn derivative_toy() -> Portfolio {
    Portfolio {
        facilities: vec![
            facility("t0", 1.1, 0.45, vec![(0, 1.0)], indicator(0.01)),
            facility("t1", 0.6, 0.55, vec![(1, 1.0)], indicator(0.03)),
            facility(
                "t2",
                0.9,
                0.35,
                vec![(0, 0.8), (1, 0.6)],
                ValueSpec::StepFunction {
                    thresholds: vec![-2.2, -1.2],
                    values: vec![0.3, 0.8, 1.0],
                },
            ),
            facility("t3", 0.3, 0.25, vec![(2, 1.0)], indicator(0.005)),
            facility(
                "t4",
                1.4,
                0.6,
                vec![(0, 0.6), (2, 0.8)],
                ValueSpec::StepFunction {
                    thresholds: vec![-1.8],
                    values: vec![0.4, 1.0],
                },
            ),
            facility("t5", 0.5, 0.65, vec![(1, 0.28), (2, 0.96)], indicator(0.06)),
            facility(
                "t6",
                0.8,
                0.5,
                vec![
                    (0, 0.5773502691896258),
                    (1, 0.5773502691896258),
                    (2, 0.5773502691896258),
                ],
                ValueSpec::StepFunction {
                    thresholds: vec![-2.5, -1.5, -0.5],
                    values: vec![0.2, 0.55, 0.85, 1.0],
                },
            ),
            facility("t7", 1.8, 0.4, vec![(0, -0.6), (1, 0.8)], indicator(0.02)),
            facility(
                "t8",
                0.4,
                0.3,
                vec![(2, -1.0)],
                ValueSpec::SampledCurve {
                    eps: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
                    values: vec![0.15, 0.45, 0.75, 0.95, 1.0],
                },
            ),
            facility("t9", 0.7, 0.52, vec![(0, 0.96), (2, -0.28)], indicator(0.04)),
        ],
        factor_model: model(3),
    }
}

#[test]
fn criterion_5_derivative_suite() {
    let mut c = Criterion::start(5, "derivative finite-difference suite", Some(30));
    let p = derivative_toy();
    let cfg = RiskConfig {
        alpha: 0.002,
        ..RiskConfig::default()
    };
    let analysis = analyze_full(&p, &cfg).unwrap();
    let rotation = analysis.rotation.clone().unwrap();
    let report = &analysis.report;

    let order = cfg
        .expansion
        .required_coeff_order()
        .max(cfg.ga.series_order);
    let coeffs = expand(&p, order);
    let rotated = rotate_portfolio(&p, &rotation).unwrap();
    let tail = tail_split(&rotated, &coeffs, &cfg.expansion).unwrap();

    let tol = 1e-4;
    let h = 5e-3;
    for &eta in &[-2.878, -2.2, -1.4] {
        for r in 1..=3usize {
            let fd = five_point(|x| tail.onef_derivative(x, r - 1), eta, h);
            let an = tail.onef_derivative(eta, r);
            c.require((an - fd).abs() <= tol * fd.abs().max(1e-9), || {
                format!("V1f derivative r={r} at eta={eta}: {an} vs fd {fd}")
            });
        }
        let (_, mu2_prime) = tail.conditional_mu2(eta);
        let fd2 = five_point(|x| tail.conditional_mu2(x).0, eta, h);
        c.require((mu2_prime - fd2).abs() <= tol * fd2.abs().max(1e-9), || {
            format!("mu2' at eta={eta}: {mu2_prime} vs fd {fd2}")
        });
        let (_, mu3_prime, mu3_second) = tail.conditional_mu3(eta);
        let fd3 = five_point(|x| tail.conditional_mu3(x).0, eta, h);
        c.require((mu3_prime - fd3).abs() <= tol * fd3.abs().max(1e-9), || {
            format!("mu3' at eta={eta}: {mu3_prime} vs fd {fd3}")
        });
        let fd3p = five_point(|x| tail.conditional_mu3(x).1, eta, h);
        c.require((mu3_second - fd3p).abs() <= tol * fd3p.abs().max(1e-9), || {
            format!("mu3'' at eta={eta}: {mu3_second} vs fd {fd3p}")
        });
    }

    // Euler weight derivatives: bump one weight, rerun the pipeline in the
    // frozen frame, and compare w_i dF/dw_i against every reported slot.
    let hw = 1e-4;
    let floor = 1e-8 * report.var_total.abs();
    for (i, contrib) in report.contributions.iter().enumerate() {
        let run = |scale: f64| -> RiskReport {
            let mut q = p.clone();
            q.facilities[i].weight *= 1.0 + scale;
            analyze_with_rotation(&q, &cfg, &rotation).unwrap()
        };
        let up = run(hw);
        let dn = run(-hw);
        let checks: [(&str, f64, f64); 12] = [
            ("var", contrib.var_c, (up.var_total - dn.var_total) / (2.0 * hw)),
            ("es", contrib.es_c, (up.es_total - dn.es_total) / (2.0 * hw)),
            (
                "var_1f",
                contrib.var_parts.onef,
                (up.var_parts.onef - dn.var_parts.onef) / (2.0 * hw),
            ),
            (
                "var_mf2",
                contrib.var_parts.mf2,
                (up.var_parts.mf2 - dn.var_parts.mf2) / (2.0 * hw),
            ),
            (
                "var_mf3",
                contrib.var_parts.mf3,
                (up.var_parts.mf3 - dn.var_parts.mf3) / (2.0 * hw),
            ),
            (
                "var_ga2",
                contrib.var_parts.ga2,
                (up.var_parts.ga2 - dn.var_parts.ga2) / (2.0 * hw),
            ),
            (
                "var_ga3",
                contrib.var_parts.ga3,
                (up.var_parts.ga3 - dn.var_parts.ga3) / (2.0 * hw),
            ),
            (
                "es_1f",
                contrib.es_parts.onef,
                (up.es_parts.onef - dn.es_parts.onef) / (2.0 * hw),
            ),
            (
                "es_mf2",
                contrib.es_parts.mf2,
                (up.es_parts.mf2 - dn.es_parts.mf2) / (2.0 * hw),
            ),
            (
                "es_mf3",
                contrib.es_parts.mf3,
                (up.es_parts.mf3 - dn.es_parts.mf3) / (2.0 * hw),
            ),
            (
                "es_ga2",
                contrib.es_parts.ga2,
                (up.es_parts.ga2 - dn.es_parts.ga2) / (2.0 * hw),
            ),
            (
                "es_ga3",
                contrib.es_parts.ga3,
                (up.es_parts.ga3 - dn.es_parts.ga3) / (2.0 * hw),
            ),
        ];
        for (what, an, fd) in checks {
            c.require((an - fd).abs() <= tol * fd.abs().max(floor), || {
                format!("facility {i} {what}: {an} vs fd {fd}")
            });
        }
    }
    c.finish();
}

struct ConcentratedBench {
    sim: SimResult,
    report: RiskReport,
}

static CONCENTRATED: OnceLock<ConcentratedBench> = OnceLock::new();

/// Concentrated 300-loan benchmark shared by criteria 6 and 8: 20 factors,
/// a 60-loan block on one region/industry pair, systematic MC at 99.9%.
fn concentrated_bench() -> &'static ConcentratedBench {
    CONCENTRATED.get_or_init(|| {
        let spec = BenchmarkSpec::new(BenchmarkKind::Concentrated { block: 60 }, 10, 10, 300);
        let p = synthesize_benchmark(&spec).unwrap();
        let sim_cfg = SimConfig::new(SimMode::Systematic, 2_000_000, 1, 0.001);
        let sim = simulate(&p, &sim_cfg).unwrap();
        let cfg = RiskConfig {
            alpha: 0.001,
            orders: OrderFlags {
                onef: true,
                mf2: true,
                mf3: true,
                ga2: false,
                ga3: false,
            },
            ..RiskConfig::default()
        };
        let report = analyze(&p, &cfg).unwrap();
        ConcentratedBench { sim, report }
    })
}

#[test]
fn criterion_6_concentrated_vs_systematic_mc() {
    let mut c = Criterion::start(6, "concentrated portfolio vs systematic MC", Some(600));
    let b = concentrated_bench();
    let mc = b.sim.var_estimate;
    let se = b.sim.var_std_error;
    let cum1 = b.report.var_parts.onef;
    let cum2 = cum1 + b.report.var_parts.mf2;
    let cum3 = cum2 + b.report.var_parts.mf3;
    let gap = |x: f64| (x / mc - 1.0).abs();

    c.require(cum1 < mc, || {
        format!("1f VaR {cum1} does not underestimate MC {mc}")
    });
    c.require(gap(cum1) > gap(cum2) && gap(cum2) > gap(cum3), || {
        format!(
            "relative gaps not strictly shrinking: {:.4} -> {:.4} -> {:.4}",
            gap(cum1),
            gap(cum2),
            gap(cum3)
        )
    });
    let bound = (0.006f64).max(3.0 * se / mc);
    c.require(gap(cum3) <= bound, || {
        format!("final gap {:.4} over bound {:.4}", gap(cum3), bound)
    });
    c.finish();
}

#[test]
fn criterion_7_heterogeneous_vs_full_mc() {
    let mut c = Criterion::start(7, "heterogeneous portfolio vs full MC", Some(900));
    let spec = BenchmarkSpec::new(BenchmarkKind::Heterogeneous { dominant: 10 }, 5, 5, 200);
    let p = synthesize_benchmark(&spec).unwrap();
    let sim = simulate(&p, &SimConfig::new(SimMode::Full, 1_000_000, 2, 0.001)).unwrap();
    let cfg = RiskConfig {
        alpha: 0.001,
        ..RiskConfig::default()
    };
    let report = analyze(&p, &cfg).unwrap();

    let mc = sim.var_estimate;
    let se = sim.var_std_error;
    let syst = report.var_parts.onef + report.var_parts.mf2 + report.var_parts.mf3;
    let with_ga2 = syst + report.var_parts.ga2;
    let with_ga3 = with_ga2 + report.var_parts.ga3;

    c.require(syst < mc, || {
        format!("systematic-only VaR {syst} does not underestimate MC {mc}")
    });
    c.require((with_ga2 / mc - 1.0).abs() <= 0.015, || {
        format!(
            "ga2 level off by {:.4} (analytic {with_ga2} vs MC {mc})",
            (with_ga2 / mc - 1.0).abs()
        )
    });
    let bound = (0.008f64).max(3.0 * se / mc);
    c.require((with_ga3 / mc - 1.0).abs() <= bound, || {
        format!(
            "ga3 level off by {:.4} over bound {bound:.4} (analytic {with_ga3} vs MC {mc})",
            (with_ga3 / mc - 1.0).abs()
        )
    });

    // Sign pattern of the granularity contributions: the dominant names pay
    // for their own lumpiness, the small names are relieved.
    let mut order: Vec<usize> = (0..p.facilities.len()).collect();
    order.sort_by(|&i, &j| p.facilities[j].weight.total_cmp(&p.facilities[i].weight));
    let ga_c = |i: usize| {
        report.contributions[i].var_parts.ga2 + report.contributions[i].var_parts.ga3
    };
    for &i in order.iter().take(10) {
        c.require(ga_c(i) > 0.0, || {
            format!(
                "dominant facility {} has non-positive granularity contribution {}",
                p.facilities[i].id,
                ga_c(i)
            )
        });
    }
    let mut all: Vec<f64> = (0..p.facilities.len()).map(ga_c).collect();
    all.sort_by(f64::total_cmp);
    let median = 0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2]);
    c.require(median < 0.0, || {
        format!("median granularity contribution {median} is not negative")
    });
    c.finish();
}

#[test]
fn criterion_8_contribution_agreement() {
    let mut c = Criterion::start(8, "contribution agreement with MC window", None);
    let b = concentrated_bench();
    let analytic: HashMap<&str, f64> = b
        .report
        .contributions
        .iter()
        .map(|f| (f.id.as_str(), f.var_c))
        .collect();
    let n = b.sim.contributions.len();
    let mut within = 0usize;
    for est in &b.sim.contributions {
        let ana = analytic[est.id.as_str()];
        if (ana - est.contribution).abs() <= 3.0 * est.std_error {
            within += 1;
        }
    }
    c.require(within * 10 >= n * 9, || {
        format!("only {within}/{n} facilities within 3 contribution SEs")
    });
    c.finish();
}

#[test]
fn criterion_9_deterministic_reruns() {
    let mut c = Criterion::start(9, "deterministic rerun byte-identity", None);
    let bin = env!("CARGO_BIN_EXE_crisk");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let portfolio = root.join("p.csv");
    let factors = root.join("f.json");

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "crisk {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "generate",
        "--kind",
        "diversified",
        "--regions",
        "3",
        "--industries",
        "3",
        "--portfolio",
        portfolio.to_str().unwrap(),
        "--factors",
        factors.to_str().unwrap(),
    ]);

    let rerun = |sub: &str, extra: &[&str], files: &[&str]| -> Vec<(String, bool)> {
        let mut outs = Vec::new();
        for pass in 0..2 {
            let out = root.join(format!("{sub}{pass}"));
            std::fs::create_dir_all(&out).unwrap();
            let mut args = vec![
                sub,
                "--portfolio",
                portfolio.to_str().unwrap(),
                "--factors",
                factors.to_str().unwrap(),
                "--deterministic",
                "--out",
            ];
            let out_s = out.to_str().unwrap().to_string();
            args.push(Box::leak(out_s.into_boxed_str()));
            args.extend_from_slice(extra);
            run(&args);
            outs.push(out);
        }
        files
            .iter()
            .map(|f| {
                let a = std::fs::read(outs[0].join(f)).unwrap();
                let b = std::fs::read(outs[1].join(f)).unwrap();
                (f.to_string(), a == b)
            })
            .collect()
    };

    for (file, same) in rerun(
        "analyze",
        &["--alpha", "0.002"],
        &["analysis.json", "analysis_contributions.csv"],
    ) {
        c.require(same, || format!("analyze rerun differs in {file}"));
    }
    for (file, same) in rerun(
        "simulate",
        &["--alpha", "0.01", "--scenarios", "20000", "--seed", "9"],
        &["simulation.json", "simulation_contributions.csv"],
    ) {
        c.require(same, || format!("simulate rerun differs in {file}"));
    }
    c.finish();
}
