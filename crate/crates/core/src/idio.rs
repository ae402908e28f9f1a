//! Granularity engine: conditional moments of the idiosyncratic value
//! component and their coupling to the multi-factor residual.
//!
//! Conditioning on the full factor vector leaves each facility a residual
//! g_i = v_i - vbar_i(s_i) around its conditional mean, where s_i is the
//! facility's factor projection. Conditioning on the principal coordinate
//! only, these residuals add to the systematic moments:
//!
//!   mu2 = mu2_mf + mu2_ga,           mu2_ga = sum_i w_i^2 <(mu2)_i>
//!   mu3 = mu3_mf + mixed + mu3_ga,   mu3_ga = sum_i w_i^3 <(mu3)_i>
//!   mixed = 3 <Vmf sum_i w_i^2 (mu2)_i>
//!
//! where <.> averages over the non-principal factors at fixed eta1. The
//! per-facility profiles come from the conditional means of v, v^2, v^3;
//! writing the facility projection as s = b0 eta1 + t z with t = |btilde|
//! and z standard normal, each conditional mean expands in He_k(z) with
//! coefficients
//!
//!   h_k[c](eta1) = t^k sum_{n>=k} C(n,k) rho^n/n! c^(n) b0^(n-k) He_{n-k}(eta1)
//!
//! and orthogonality in z turns products into k!-weighted coefficient sums
//! and triple products into the He triple integrals. The mixed term couples
//! q_k = E[(mu2)_i He_k(z)] to the mf tables through the contraction of the
//! order-k table with the facility's unit non-principal direction; only
//! orders k <= tensor_order survive.
//!
//! Step-valued facilities skip the series: conditional means of step
//! functions are threshold-probability sums, their s-derivatives ride on
//! He_{r-1}(ghat) phi(ghat), and a short Gauss-Hermite rule in z finishes
//! the average. The two routes are cross-checked against each other in the
//! tests; both expose the same eta1-derivative levels.

use serde::{Deserialize, Serialize};

use crate::error::{CriskError, Result};
use crate::expansion::{
    accumulate_rank_one, ConditionalMoments, EulerBundle, FacilityTerms, TailCoefficients,
};
use crate::gaussian::{norm_cdf, norm_pdf};
use crate::hermite::{binomial, factorial, he_row, triple_product_integral, MAX_ORDER};
use crate::portfolio::{Facility, Portfolio};
use crate::quadrature::QuadratureRule;
use crate::risk::{
    check_alpha, es2_gradient, es3_gradient, es_adjustment, quantile_adjustment, var2_gradient,
    var3_gradient,
};
use crate::tensor::SymmetricTensor;

/// Below this non-principal loading norm a facility has no z-dependence.
const DIRECTION_EPS: f64 = 1e-12;

/// Caps for the granularity series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaCaps {
    /// Highest He_k(z) index kept; t^k drives geometric decay for
    /// principal-heavy facilities.
    pub k_cap: usize,
    /// Coefficient order feeding each h_k sum.
    pub series_order: usize,
    /// Gauss-Hermite nodes for the z-average in the step fast path.
    pub z_nodes: usize,
}

impl Default for GaCaps {
    fn default() -> Self {
        GaCaps {
            k_cap: 6,
            series_order: 30,
            z_nodes: 64,
        }
    }
}

impl GaCaps {
    pub fn validate(&self) -> Result<()> {
        if self.k_cap == 0 || self.k_cap > 8 {
            return Err(CriskError::OrderCap {
                requested: self.k_cap,
                cap: 8,
            });
        }
        if self.series_order < self.k_cap || self.series_order > MAX_ORDER {
            return Err(CriskError::OrderCap {
                requested: self.series_order,
                cap: MAX_ORDER,
            });
        }
        if self.z_nodes < 3 || self.z_nodes > 512 {
            return Err(CriskError::Config(format!(
                "granularity z-node count {} outside 3..=512",
                self.z_nodes
            )));
        }
        Ok(())
    }
}

/// One facility's conditional central moment profiles at a fixed eta1.
/// Arrays hold eta1-derivative levels 0..=2. `q[k-1][r]` is the r-th
/// derivative of E[(mu2)_i He_k(z)], the channel the mixed term contracts
/// against the order-k mf table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacilityIdioMoments {
    pub mu2: [f64; 3],
    pub mu3: [f64; 3],
    pub q: [[f64; 3]; 3],
}

/// Portfolio granularity moments at a fixed eta1, derivative levels 0..=2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdioMoments {
    pub eta1: f64,
    /// sum_i w_i^2 <(mu2)_i>; nonnegative at level 0.
    pub mu2_ga: [f64; 3],
    /// sum_i w_i^3 <(mu3)_i>.
    pub mu3_ga: [f64; 3],
    /// 3 <Vmf mu2[Vga]>: the total-cumulance coupling. Always computed,
    /// reported separately in the breakdown.
    pub mixed: [f64; 3],
}

impl IdioMoments {
    pub fn zero(eta1: f64) -> Self {
        IdioMoments {
            eta1,
            mu2_ga: [0.0; 3],
            mu3_ga: [0.0; 3],
            mixed: [0.0; 3],
        }
    }

    /// mu3-channel levels: mixed coupling plus pure granularity.
    pub fn mu3_levels(&self) -> [f64; 3] {
        [
            self.mu3_ga[0] + self.mixed[0],
            self.mu3_ga[1] + self.mixed[1],
            self.mu3_ga[2] + self.mixed[2],
        ]
    }

    /// The granularity moments packaged as ConditionalMoments, for feeding
    /// the adjustment operators on their own.
    pub fn as_conditional(&self) -> ConditionalMoments {
        let m3 = self.mu3_levels();
        ConditionalMoments {
            eta1: self.eta1,
            mu2: self.mu2_ga[0],
            mu2_prime: self.mu2_ga[1],
            mu3: m3[0],
            mu3_prime: m3[1],
            mu3_second: m3[2],
        }
    }
}

fn btilde_norm(term: &FacilityTerms) -> f64 {
    term.btilde.iter().map(|b| b * b).sum::<f64>().sqrt()
}

/// z-expansion rows of a coefficient series: rows[k][r] is the r-th
/// eta1-derivative of h_k[c] at eta1.
fn h_rows(c: &[f64], rho: f64, b0: f64, t: f64, eta1: f64, caps: &GaCaps) -> Vec<[f64; 3]> {
    let n_cap = caps.series_order.min(c.len() - 1);
    let mut he = vec![0.0; n_cap + 1];
    he_row(eta1, &mut he);
    let mut rows = vec![[0.0; 3]; caps.k_cap + 1];
    for (n, &cn) in c.iter().enumerate().take(n_cap + 1) {
        let scale = rho.powi(n as i32) / factorial(n) * cn;
        if scale == 0.0 {
            continue;
        }
        for k in 0..=caps.k_cap.min(n) {
            let base = scale * binomial(n, k) * b0.powi((n - k) as i32) * t.powi(k as i32);
            let row = &mut rows[k];
            for (r, slot) in row.iter_mut().enumerate() {
                if n - k >= r {
                    *slot += base * factorial(n - k) / factorial(n - k - r) * he[n - k - r];
                }
            }
        }
    }
    rows
}

/// T[k][l][m] = E[He_k He_l He_m] for indices up to k_cap.
fn triple_table(k_cap: usize) -> Vec<Vec<Vec<f64>>> {
    let mut t = vec![vec![vec![0.0; k_cap + 1]; k_cap + 1]; k_cap + 1];
    for (a, ta) in t.iter_mut().enumerate() {
        for (b, tb) in ta.iter_mut().enumerate() {
            for (c, slot) in tb.iter_mut().enumerate() {
                *slot = triple_product_integral(a, b, c).expect("k cap within order limit");
            }
        }
    }
    t
}

/// h_k series route, from the facility's v/w/u coefficient sets.
pub fn facility_idio_moments_series(
    term: &FacilityTerms,
    eta1: f64,
    caps: &GaCaps,
) -> Result<FacilityIdioMoments> {
    caps.validate()?;
    if term.coeffs.order() < caps.series_order {
        return Err(CriskError::OrderCap {
            requested: caps.series_order,
            cap: term.coeffs.order(),
        });
    }
    let t = btilde_norm(term);
    let hv = h_rows(&term.coeffs.v, term.rho, term.b0, t, eta1, caps);
    let hw = h_rows(&term.coeffs.w, term.rho, term.b0, t, eta1, caps);
    let hu = h_rows(&term.coeffs.u, term.rho, term.b0, t, eta1, caps);
    let tt = triple_table(caps.k_cap);

    // <v.v> and <v.w> pair off k-by-k with k! weights.
    let mut vv = [0.0; 3];
    let mut vw = [0.0; 3];
    for k in 0..=caps.k_cap {
        let kf = factorial(k);
        vv[0] += kf * hv[k][0] * hv[k][0];
        vv[1] += kf * 2.0 * hv[k][0] * hv[k][1];
        vv[2] += kf * 2.0 * (hv[k][1] * hv[k][1] + hv[k][0] * hv[k][2]);
        vw[0] += kf * hv[k][0] * hw[k][0];
        vw[1] += kf * (hv[k][1] * hw[k][0] + hv[k][0] * hw[k][1]);
        vw[2] += kf * (hv[k][2] * hw[k][0] + 2.0 * hv[k][1] * hw[k][1] + hv[k][0] * hw[k][2]);
    }
    // <v.v.v> runs over all index triples with the He triple integrals; the
    // symmetric derivative sums collapse by relabeling.
    let mut vvv = [0.0; 3];
    for k in 0..=caps.k_cap {
        for l in 0..=caps.k_cap {
            for m in 0..=caps.k_cap {
                let w = tt[k][l][m];
                if w == 0.0 {
                    continue;
                }
                vvv[0] += w * hv[k][0] * hv[l][0] * hv[m][0];
                vvv[1] += w * 3.0 * hv[k][1] * hv[l][0] * hv[m][0];
                vvv[2] += w
                    * (3.0 * hv[k][2] * hv[l][0] * hv[m][0]
                        + 6.0 * hv[k][1] * hv[l][1] * hv[m][0]);
            }
        }
    }

    let mu2 = [
        hw[0][0] - vv[0],
        hw[0][1] - vv[1],
        hw[0][2] - vv[2],
    ];
    let mu3 = [
        hu[0][0] - 3.0 * vw[0] + 2.0 * vvv[0],
        hu[0][1] - 3.0 * vw[1] + 2.0 * vvv[1],
        hu[0][2] - 3.0 * vw[2] + 2.0 * vvv[2],
    ];

    // q_k = k! h_k[w] - sumTT h[v] h[v], for the table-coupled orders.
    let mut q = [[0.0; 3]; 3];
    for (kq, slot) in q.iter_mut().enumerate() {
        let k = kq + 1;
        if k > caps.k_cap {
            break;
        }
        let kf = factorial(k);
        slot[0] = kf * hw[k][0];
        slot[1] = kf * hw[k][1];
        slot[2] = kf * hw[k][2];
        for l in 0..=caps.k_cap {
            for m in 0..=caps.k_cap {
                let w = tt[k][l][m];
                if w == 0.0 {
                    continue;
                }
                slot[0] -= w * hv[l][0] * hv[m][0];
                slot[1] -= w * 2.0 * hv[l][1] * hv[m][0];
                slot[2] -= w * 2.0 * (hv[l][2] * hv[m][0] + hv[l][1] * hv[m][1]);
            }
        }
    }
    Ok(FacilityIdioMoments { mu2, mu3, q })
}

/// Step fast path: exact conditional means from threshold probabilities,
/// averaged over z by quadrature.
pub fn facility_idio_moments_steps(
    term: &FacilityTerms,
    thresholds: &[f64],
    values: &[f64],
    eta1: f64,
    caps: &GaCaps,
) -> Result<FacilityIdioMoments> {
    caps.validate()?;
    let tau2 = 1.0 - term.rho * term.rho;
    if tau2 <= 0.0 {
        return Err(CriskError::Domain {
            what: "idiosyncratic scale of a unit-correlation facility",
            value: term.rho,
        });
    }
    let tau = tau2.sqrt();
    let ratio = term.rho / tau;
    let base = [values[0], values[0].powi(2), values[0].powi(3)];
    let jumps: Vec<[f64; 3]> = values
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            [hi - lo, hi * hi - lo * lo, hi.powi(3) - lo.powi(3)]
        })
        .collect();

    let t = btilde_norm(term);
    let degenerate = t < DIRECTION_EPS;
    let nodes: Vec<(f64, f64)> = if degenerate {
        vec![(0.0, 1.0)]
    } else {
        let rule = QuadratureRule::gauss_hermite(caps.z_nodes)?;
        rule.nodes()
            .iter()
            .copied()
            .zip(rule.weights().iter().copied())
            .collect()
    };

    let mut mu2 = [0.0; 3];
    let mut mu3 = [0.0; 3];
    let mut q = [[0.0; 3]; 3];
    for (z, wt) in nodes {
        let s = term.b0 * eta1 + t * z;
        // m[p][r]: r-th s-derivative of E[v^(p+1) | s].
        let mut m = [[0.0; 3]; 3];
        for (p, row) in m.iter_mut().enumerate() {
            row[0] = base[p];
        }
        for (j, &c) in thresholds.iter().enumerate() {
            let g = (c - term.rho * s) / tau;
            let phi = norm_pdf(g);
            let surv = 1.0 - norm_cdf(g);
            for (p, row) in m.iter_mut().enumerate() {
                row[0] += jumps[j][p] * surv;
                row[1] += jumps[j][p] * ratio * phi;
                row[2] += jumps[j][p] * ratio * ratio * g * phi;
            }
        }
        let g2 = [
            m[1][0] - m[0][0] * m[0][0],
            m[1][1] - 2.0 * m[0][0] * m[0][1],
            m[1][2] - 2.0 * (m[0][1] * m[0][1] + m[0][0] * m[0][2]),
        ];
        let g3 = [
            m[2][0] - 3.0 * m[0][0] * m[1][0] + 2.0 * m[0][0].powi(3),
            m[2][1] - 3.0 * (m[0][1] * m[1][0] + m[0][0] * m[1][1])
                + 6.0 * m[0][0] * m[0][0] * m[0][1],
            m[2][2] - 3.0 * (m[0][2] * m[1][0] + 2.0 * m[0][1] * m[1][1] + m[0][0] * m[1][2])
                + 6.0 * (2.0 * m[0][0] * m[0][1] * m[0][1] + m[0][0] * m[0][0] * m[0][2]),
        ];
        let hez = [z, z * z - 1.0, z * (z * z - 3.0)];
        for r in 0..3 {
            mu2[r] += wt * g2[r];
            mu3[r] += wt * g3[r];
            for (kq, slot) in q.iter_mut().enumerate() {
                slot[r] += wt * g2[r] * hez[kq];
            }
        }
    }
    if degenerate {
        q = [[0.0; 3]; 3];
    }
    // eta1 moves s through b0.
    for r in 0..3 {
        let c = term.b0.powi(r as i32);
        mu2[r] *= c;
        mu3[r] *= c;
        for slot in q.iter_mut() {
            slot[r] *= c;
        }
    }
    Ok(FacilityIdioMoments { mu2, mu3, q })
}

/// Conditional central moment profiles of one facility given the principal
/// coordinate. Step-valued facilities go through the threshold fast path,
/// everything else through the h_k series.
pub fn facility_idio_moments(
    facility: &Facility,
    term: &FacilityTerms,
    eta1: f64,
    caps: &GaCaps,
) -> Result<FacilityIdioMoments> {
    if let Some((thresholds, values)) = facility.value.as_steps() {
        facility_idio_moments_steps(term, &thresholds, &values, eta1, caps)
    } else {
        facility_idio_moments_series(term, eta1, caps)
    }
}

/// Contraction levels of the mf tables against each facility direction:
/// contractions[i][k-1][r] = <table_k^(r), dir_i^(x) k>, zero when the
/// facility has no non-principal loading.
struct MixedContext {
    k_mix: usize,
    contractions: Vec<[[f64; 3]; 3]>,
}

/// Leibniz combination of two level arrays: out[r] = d^r/deta1^r (a b).
fn leibniz(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * b[0],
        a[1] * b[0] + a[0] * b[1],
        a[2] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[2],
    ]
}

fn idio_engine(
    portfolio: &Portfolio,
    tc: &TailCoefficients,
    eta1: f64,
    caps: &GaCaps,
) -> Result<(IdioMoments, Vec<FacilityIdioMoments>, MixedContext)> {
    caps.validate()?;
    if portfolio.facilities.len() != tc.facilities.len() {
        return Err(CriskError::DimensionMismatch {
            expected: tc.facilities.len(),
            got: portfolio.facilities.len(),
        });
    }
    let k_mix = 3.min(tc.config.tensor_order).min(caps.k_cap);
    let mut tables = Vec::with_capacity(k_mix);
    for k in 1..=k_mix {
        let levels: Vec<SymmetricTensor> = (0..3).map(|r| tc.mf_tensor(k, eta1, r)).collect();
        tables.push(levels);
    }

    let mut fims = Vec::with_capacity(tc.facilities.len());
    let mut contractions = vec![[[0.0; 3]; 3]; tc.facilities.len()];
    let mut out = IdioMoments::zero(eta1);
    for (i, (fac, term)) in portfolio.facilities.iter().zip(&tc.facilities).enumerate() {
        let fim = facility_idio_moments(fac, term, eta1, caps)?;
        let w = term.weight;
        for r in 0..3 {
            out.mu2_ga[r] += w * w * fim.mu2[r];
            out.mu3_ga[r] += w * w * w * fim.mu3[r];
        }
        let t = btilde_norm(term);
        if t >= DIRECTION_EPS {
            let dir: Vec<f64> = term.btilde.iter().map(|b| b / t).collect();
            for (kq, levels) in tables.iter().enumerate() {
                for (r, tensor) in levels.iter().enumerate() {
                    contractions[i][kq][r] = tensor.contract_all(&dir);
                }
            }
            for kq in 0..k_mix {
                let prod = leibniz(&fim.q[kq], &contractions[i][kq]);
                for r in 0..3 {
                    out.mixed[r] += 3.0 * w * w * prod[r];
                }
            }
        }
        fims.push(fim);
    }
    Ok((
        out,
        fims,
        MixedContext {
            k_mix,
            contractions,
        },
    ))
}

/// Portfolio granularity moments: weighted sums of the facility profiles
/// plus the mixed coupling to the mf tables.
pub fn portfolio_idio_moments(
    portfolio: &Portfolio,
    tc: &TailCoefficients,
    eta1: f64,
    caps: &GaCaps,
) -> Result<IdioMoments> {
    idio_engine(portfolio, tc, eta1, caps).map(|(m, _, _)| m)
}

/// Systematic plus granularity moments at the same eta1. The mu2 channels
/// add; the mu3 channel picks up both the mixed coupling and the pure
/// granularity third moment.
pub fn combine_moments(
    systematic: &ConditionalMoments,
    idio: &IdioMoments,
) -> Result<ConditionalMoments> {
    if systematic.eta1 != idio.eta1 {
        return Err(CriskError::Config(format!(
            "systematic moments at eta1 = {} cannot combine with granularity moments at eta1 = {}",
            systematic.eta1, idio.eta1
        )));
    }
    let m3 = idio.mu3_levels();
    Ok(ConditionalMoments {
        eta1: systematic.eta1,
        mu2: systematic.mu2 + idio.mu2_ga[0],
        mu2_prime: systematic.mu2_prime + idio.mu2_ga[1],
        mu3: systematic.mu3 + m3[0],
        mu3_prime: systematic.mu3_prime + m3[1],
        mu3_second: systematic.mu3_second + m3[2],
    })
}

/// w_i d/dw_i of the granularity moment levels. mu3 carries the pure
/// granularity part and both mixed channels: the facility's own q-profile
/// and its rank-1 share of every mf table other facilities couple to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaBundle {
    pub mu2: [f64; 3],
    pub mu3: [f64; 3],
}

/// Granularity moments plus per-facility Euler derivatives.
pub fn ga_euler_bundles(
    portfolio: &Portfolio,
    tc: &TailCoefficients,
    eta1: f64,
    caps: &GaCaps,
) -> Result<(IdioMoments, Vec<GaBundle>)> {
    let (moments, fims, ctx) = idio_engine(portfolio, tc, eta1, caps)?;
    let dim = tc.dim;

    // Q[k-1][r]: sum_j w_j^2 q_{j,k}^(r) dir_j^(x) k, the weight every
    // facility's own table share gets contracted against.
    let mut qt: Vec<Vec<SymmetricTensor>> = (1..=ctx.k_mix)
        .map(|k| {
            (0..3)
                .map(|_| SymmetricTensor::zeros(k, dim).expect("order within cap"))
                .collect()
        })
        .collect();
    for (fim, term) in fims.iter().zip(&tc.facilities) {
        let t = btilde_norm(term);
        if t < DIRECTION_EPS {
            continue;
        }
        let support: Vec<(usize, f64)> = term
            .btilde
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(k, &b)| (k, b / t))
            .collect();
        let w2 = term.weight * term.weight;
        for (kq, levels) in qt.iter_mut().enumerate() {
            for (r, tensor) in levels.iter_mut().enumerate() {
                accumulate_rank_one(tensor, &support, w2 * fim.q[kq][r]);
            }
        }
    }

    let cap = tc.config.cond_cap;
    let mut he = vec![0.0; cap + 1];
    he_row(eta1, &mut he);

    let mut bundles = Vec::with_capacity(fims.len());
    for (i, (fim, term)) in fims.iter().zip(&tc.facilities).enumerate() {
        let w = term.weight;
        let mut mu2 = [0.0; 3];
        let mut mu3 = [0.0; 3];
        for r in 0..3 {
            mu2[r] = 2.0 * w * w * fim.mu2[r];
            mu3[r] = 3.0 * w * w * w * fim.mu3[r];
        }
        for kq in 0..ctx.k_mix {
            // own q-profile: the weight-squared prefactor differentiates to 2.
            let own = leibniz(&fim.q[kq], &ctx.contractions[i][kq]);
            // table channel: this facility's rank-1 share of table k as seen
            // by every coupled facility.
            let own_g: [f64; 3] =
                core::array::from_fn(|r| term.own_g(kq + 1, r, cap, &he));
            let qv: [f64; 3] =
                core::array::from_fn(|r| qt[kq][r].contract_all(&term.btilde));
            let channel = leibniz(&qv, &own_g);
            for r in 0..3 {
                mu3[r] += 6.0 * w * w * own[r] + 3.0 * channel[r];
            }
        }
        bundles.push(GaBundle { mu2, mu3 });
    }
    Ok((moments, bundles))
}

/// Granularity VaR/ES adjustments with per-facility Euler contributions.
#[derive(Debug, Clone)]
pub struct IdioAllocation {
    pub eta: f64,
    pub moments: IdioMoments,
    pub var2_total: f64,
    pub var3_total: f64,
    pub es2_total: f64,
    pub es3_total: f64,
    pub var2: Vec<f64>,
    pub var3: Vec<f64>,
    pub es2: Vec<f64>,
    pub es3: Vec<f64>,
}

/// Adjustments computed from the granularity moments alone, allocated by
/// w_i d/dw_i. The gradients act on the moment channels and on the
/// principal-series derivatives, so a facility with no idiosyncratic
/// moments of its own still receives its V'-channel share.
pub fn allocate_idio(
    portfolio: &Portfolio,
    tc: &TailCoefficients,
    alpha: f64,
    caps: &GaCaps,
) -> Result<IdioAllocation> {
    let eta = check_alpha(alpha)?;
    let (moments, ga) = ga_euler_bundles(portfolio, tc, eta, caps)?;
    let derivs = [
        tc.onef_derivative(eta, 0),
        tc.onef_derivative(eta, 1),
        tc.onef_derivative(eta, 2),
        tc.onef_derivative(eta, 3),
    ];
    let im = moments.as_conditional();
    let var2_total = quantile_adjustment(&im, &derivs, eta, 2)?;
    let var3_total = quantile_adjustment(&im, &derivs, eta, 3)?;
    let es2_total = es_adjustment(&im, &derivs, eta, alpha, 2)?;
    let es3_total = es_adjustment(&im, &derivs, eta, alpha, 3)?;

    let gv2 = var2_gradient(&im, &derivs, eta);
    let gv3 = var3_gradient(&im, &derivs, eta);
    let ge2 = es2_gradient(&im, &derivs, eta, alpha);
    let ge3 = es3_gradient(&im, &derivs, eta, alpha);

    let n = ga.len();
    let mut var2 = Vec::with_capacity(n);
    let mut var3 = Vec::with_capacity(n);
    let mut es2 = Vec::with_capacity(n);
    let mut es3 = Vec::with_capacity(n);
    for (b, term) in ga.iter().zip(&tc.facilities) {
        let eb = EulerBundle {
            v1f: [
                term.onef_derivative(eta, 0),
                term.onef_derivative(eta, 1),
                term.onef_derivative(eta, 2),
                term.onef_derivative(eta, 3),
            ],
            mu2: b.mu2[0],
            mu2_prime: b.mu2[1],
            mu3: b.mu3[0],
            mu3_prime: b.mu3[1],
            mu3_second: b.mu3[2],
        };
        var2.push(gv2.contract(&eb));
        var3.push(gv3.contract(&eb));
        es2.push(ge2.contract(&eb));
        es3.push(ge3.contract(&eb));
    }
    Ok(IdioAllocation {
        eta,
        moments,
        var2_total,
        var3_total,
        es2_total,
        es3_total,
        var2,
        var3,
        es2,
        es3,
    })
}
