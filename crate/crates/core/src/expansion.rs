//! Portfolio tensor assembly, the principal-factor tail split, conditional
//! moments of the residual systematic distribution, and the per-facility
//! Euler derivatives of all of it.
//!
//! Conventions. The conditional portfolio value is the multivariate series
//! V(eta) = sum over ordered index tuples of V^(n)_{k1..kn} He-product,
//! where the He-product for a tuple is prod_f He_{mult_f}(eta_f). With the
//! principal factor rotated into slot 0, splitting each tuple by its number
//! of principal slots d gives
//!
//!   V = sum_m v1f[m] He_m(eta1)
//!     + sum_{n>=1} sum_{kappa non-principal} Vmf^(n)_kappa(eta1) He-product,
//!
//! with table entries T[n][d]_kappa = C(n+d, d) V^(n+d)_{0^d kappa} and
//! Vmf^(n)(eta1) = sum_d T[n][d] He_d(eta1). Tables are accumulated directly
//! from facilities, one rank-1 update each, which reaches eta1-degrees the
//! order-capped full tensors cannot.
//!
//! Conditional central moments of the non-principal remainder at fixed eta1:
//!
//!   mu2 = sum_n n! |Vmf^(n)|^2
//!   mu3 = 6 aBa + 36 <a,B,C> + 8 tr B^3   (a, B, C = Vmf^(1..3); full
//!         ordered sums; exact when the expansion ends at order 3 except for
//!         the dropped even family 3 E[B C^2])
//!
//! The scalar check behind the mu3 coefficients: for
//! Y = a He_1 + b He_2 + c He_3, E[Y^3] = 6 a^2 b + 36 abc + 8 b^3 + 108 bc^2,
//! and the c^2 family is the one this truncation drops.

use crate::coeffs::CoefficientSet;
use crate::error::{CriskError, Result};
use crate::hermite::{binomial, factorial, he_row, MAX_ORDER};
use crate::portfolio::Portfolio;
use crate::tensor::{distinct_triple_perms, SymmetricTensor, MAX_TENSOR_ORDER};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    /// Highest multivariate tensor order M kept in the mf expansion.
    pub tensor_order: usize,
    /// Order of the principal-factor series.
    pub onef_order: usize,
    /// Highest He degree in eta1 kept in each mf table.
    pub cond_cap: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            tensor_order: 3,
            onef_order: 30,
            cond_cap: 8,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tensor_order == 0 || self.tensor_order > MAX_TENSOR_ORDER {
            return Err(CriskError::OrderCap {
                requested: self.tensor_order,
                cap: MAX_TENSOR_ORDER,
            });
        }
        if self.onef_order > MAX_ORDER {
            return Err(CriskError::OrderCap {
                requested: self.onef_order,
                cap: MAX_ORDER,
            });
        }
        if self.tensor_order + self.cond_cap > MAX_ORDER {
            return Err(CriskError::OrderCap {
                requested: self.tensor_order + self.cond_cap,
                cap: MAX_ORDER,
            });
        }
        Ok(())
    }

    /// Coefficient order every facility must be expanded to.
    pub fn required_coeff_order(&self) -> usize {
        self.onef_order.max(self.tensor_order + self.cond_cap)
    }
}

/// Per-facility data in the rotated basis, kept around for Euler
/// derivatives and the idiosyncratic moment engine.
#[derive(Debug, Clone)]
pub struct FacilityTerms {
    pub weight: f64,
    pub rho: f64,
    /// Loading on the principal factor.
    pub b0: f64,
    /// Loadings on the non-principal factors; slot 0 is zero.
    pub btilde: Vec<f64>,
    pub coeffs: CoefficientSet,
    /// onef[m] = weight rho^m/m! v^(m) b0^m: the facility's own share of
    /// v1f, which is also w d/dw of the principal series.
    pub onef: Vec<f64>,
}

impl FacilityTerms {
    /// w d/dw of the n-th table entry scale at eta1-degree d: the facility's
    /// rank-1 table contribution is this scalar times btilde^(x) n.
    fn table_scalar(&self, n: usize, d: usize) -> f64 {
        let m = n + d;
        self.weight * self.rho.powi(m as i32) / factorial(m)
            * binomial(m, d)
            * self.coeffs.v[m]
            * self.b0.powi(d as i32)
    }

    /// sum_d table_scalar(n, d) * d-th He level derivative r at eta1.
    pub(crate) fn own_g(&self, n: usize, r: usize, cap: usize, he_eta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for d in r..=cap {
            acc += self.table_scalar(n, d) * factorial(d) / factorial(d - r) * he_eta[d - r];
        }
        acc
    }

    /// r-th eta1-derivative of the facility's own principal series.
    pub fn onef_derivative(&self, eta1: f64, r: usize) -> f64 {
        series_derivative(&self.onef, eta1, r)
    }
}

/// sum_m c[m] * d^r/d eta^r He_m(eta).
fn series_derivative(c: &[f64], eta: f64, r: usize) -> f64 {
    let mut row = vec![0.0; c.len()];
    he_row(eta, &mut row);
    let mut acc = 0.0;
    for (m, &cm) in c.iter().enumerate() {
        if m < r {
            continue;
        }
        acc += cm * factorial(m) / factorial(m - r) * row[m - r];
    }
    acc
}

#[derive(Debug, Clone)]
pub struct TailCoefficients {
    pub config: ExpansionConfig,
    pub dim: usize,
    /// Principal series coefficients, orders 0..=onef_order.
    pub v1f: Vec<f64>,
    /// tables[n-1][d]: order-n tensor over non-principal indices, paired
    /// with He_d(eta1).
    pub tables: Vec<Vec<SymmetricTensor>>,
    pub facilities: Vec<FacilityTerms>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub eta1: f64,
    pub mu2: f64,
    pub mu2_prime: f64,
    pub mu3: f64,
    pub mu3_prime: f64,
    pub mu3_second: f64,
}

/// Rank-1 update: t += c * support (x) order, iterating sorted tuples of the
/// nonzero support.
pub(crate) fn accumulate_rank_one(t: &mut SymmetricTensor, support: &[(usize, f64)], c: f64) {
    match t.order() {
        1 => {
            for &(k, bk) in support {
                t.add(&[k], c * bk);
            }
        }
        2 => {
            for (i, &(k, bk)) in support.iter().enumerate() {
                for &(l, bl) in &support[i..] {
                    t.add(&[k, l], c * bk * bl);
                }
            }
        }
        3 => {
            for (i, &(k, bk)) in support.iter().enumerate() {
                for (j, &(l, bl)) in support[i..].iter().enumerate() {
                    for &(m, bm) in &support[i + j..] {
                        t.add(&[k, l, m], c * bk * bl * bm);
                    }
                }
            }
        }
        n => unreachable!("tensor order {n}"),
    }
}

/// Full-basis coefficient tensors V^(n) for n = 1..=tensor_order:
/// V^(n)_{k1..kn} = sum_i w_i rho_i^n/n! v_i^(n) beta_{k1}..beta_{kn}.
pub fn portfolio_tensors(
    portfolio: &Portfolio,
    coeffs: &[CoefficientSet],
    tensor_order: usize,
) -> Result<Vec<SymmetricTensor>> {
    if tensor_order == 0 || tensor_order > MAX_TENSOR_ORDER {
        return Err(CriskError::OrderCap {
            requested: tensor_order,
            cap: MAX_TENSOR_ORDER,
        });
    }
    if coeffs.len() != portfolio.facilities.len() {
        return Err(CriskError::DimensionMismatch {
            expected: portfolio.facilities.len(),
            got: coeffs.len(),
        });
    }
    let dim = portfolio.n_factors();
    let mut out = Vec::with_capacity(tensor_order);
    for n in 1..=tensor_order {
        out.push(SymmetricTensor::zeros(n, dim)?);
    }
    for (f, cs) in portfolio.facilities.iter().zip(coeffs) {
        if cs.order() < tensor_order {
            return Err(CriskError::OrderCap {
                requested: tensor_order,
                cap: cs.order(),
            });
        }
        for n in 1..=tensor_order {
            let c = f.weight * f.rho.powi(n as i32) / factorial(n) * cs.v[n];
            accumulate_rank_one(&mut out[n - 1], &f.loadings, c);
        }
    }
    Ok(out)
}

/// Tail split of an already-rotated portfolio (principal factor = slot 0):
/// the principal series to onef_order plus the mf coefficient tables, both
/// accumulated facility by facility in input order.
pub fn tail_split(
    rotated: &Portfolio,
    coeffs: &[CoefficientSet],
    config: &ExpansionConfig,
) -> Result<TailCoefficients> {
    config.validate()?;
    if coeffs.len() != rotated.facilities.len() {
        return Err(CriskError::DimensionMismatch {
            expected: rotated.facilities.len(),
            got: coeffs.len(),
        });
    }
    let need = config.required_coeff_order();
    let dim = rotated.n_factors();
    let m_top = config.tensor_order;

    let mut v1f = vec![0.0; config.onef_order + 1];
    let mut tables: Vec<Vec<SymmetricTensor>> = Vec::with_capacity(m_top);
    for n in 1..=m_top {
        let mut row = Vec::with_capacity(config.cond_cap + 1);
        for _ in 0..=config.cond_cap {
            row.push(SymmetricTensor::zeros(n, dim)?);
        }
        tables.push(row);
    }
    let mut terms = Vec::with_capacity(rotated.facilities.len());

    for (f, cs) in rotated.facilities.iter().zip(coeffs) {
        if cs.order() < need {
            return Err(CriskError::OrderCap {
                requested: need,
                cap: cs.order(),
            });
        }
        let dense = f.dense_loadings(dim);
        let b0 = dense[0];
        let mut btilde = dense;
        btilde[0] = 0.0;
        let support: Vec<(usize, f64)> = btilde
            .iter()
            .enumerate()
            .filter(|&(_, &b)| b != 0.0)
            .map(|(k, &b)| (k, b))
            .collect();
        let mut onef = Vec::with_capacity(config.onef_order + 1);
        let mut rho_b0_m = 1.0; // (rho b0)^m
        for m in 0..=config.onef_order {
            onef.push(f.weight * rho_b0_m / factorial(m) * cs.v[m]);
            rho_b0_m *= f.rho * b0;
        }
        for (m, &s) in onef.iter().enumerate() {
            v1f[m] += s;
        }
        let term = FacilityTerms {
            weight: f.weight,
            rho: f.rho,
            b0,
            btilde,
            coeffs: cs.clone(),
            onef,
        };
        for n in 1..=m_top {
            for d in 0..=config.cond_cap {
                let c = term.table_scalar(n, d);
                if c != 0.0 {
                    accumulate_rank_one(&mut tables[n - 1][d], &support, c);
                }
            }
        }
        terms.push(term);
    }

    Ok(TailCoefficients {
        config: *config,
        dim,
        v1f,
        tables,
        facilities: terms,
    })
}

/// Literal re-key of full rotated-basis tensors into tail tables: each
/// sorted tuple with d leading principal slots lands in table[n][d] with the
/// binomial split factor. Reaches only n + d <= tensor order; the production
/// path above reaches d <= cond_cap. Used to cross-check the two.
pub fn rekey_tensors(
    tensors: &[SymmetricTensor],
    config: &ExpansionConfig,
) -> Result<(Vec<f64>, Vec<Vec<SymmetricTensor>>)> {
    let m_top = tensors.len();
    if m_top == 0 {
        return Err(CriskError::Config("no tensors to re-key".into()));
    }
    let dim = tensors[0].dim();
    let mut v1f = vec![0.0; m_top + 1];
    let mut tables: Vec<Vec<SymmetricTensor>> = Vec::new();
    for n in 1..=m_top {
        let mut row = Vec::new();
        for _ in 0..=config.cond_cap {
            row.push(SymmetricTensor::zeros(n, dim)?);
        }
        tables.push(row);
    }
    for t in tensors {
        let m = t.order();
        t.for_each(|idx, val| {
            let d = idx.iter().take_while(|&&k| k == 0).count();
            let kappa = &idx[d..];
            let n = m - d;
            if n == 0 {
                v1f[m] = val;
            } else if d <= config.cond_cap {
                tables[n - 1][d].add(kappa, binomial(m, d) * val);
            }
        });
    }
    Ok((v1f, tables))
}

impl TailCoefficients {
    /// r-th derivative of the principal series at eta1.
    pub fn onef_derivative(&self, eta1: f64, r: usize) -> f64 {
        series_derivative(&self.v1f, eta1, r)
    }

    /// Order-n conditional coefficient tensor at eta1 (r = 0) or its r-th
    /// eta1-derivative. Zero tensor for n beyond the kept order.
    pub fn mf_tensor(&self, n: usize, eta1: f64, r: usize) -> SymmetricTensor {
        let mut out = SymmetricTensor::zeros(n, self.dim).expect("order within cap");
        if n > self.tables.len() {
            return out;
        }
        let mut row = vec![0.0; self.config.cond_cap + 1];
        he_row(eta1, &mut row);
        for (d, t) in self.tables[n - 1].iter().enumerate() {
            if d < r {
                continue;
            }
            out.axpy(factorial(d) / factorial(d - r) * row[d - r], t);
        }
        out
    }

    /// mu2 and its eta1-derivative.
    pub fn conditional_mu2(&self, eta1: f64) -> (f64, f64) {
        let mut mu2 = 0.0;
        let mut mu2p = 0.0;
        for n in 1..=self.tables.len() {
            let v0 = self.mf_tensor(n, eta1, 0);
            let v1 = self.mf_tensor(n, eta1, 1);
            mu2 += factorial(n) * v0.sum_sq();
            mu2p += 2.0 * factorial(n) * v0.dot(&v1);
        }
        (mu2, mu2p)
    }

    /// mu3 and its first two eta1-derivatives.
    pub fn conditional_mu3(&self, eta1: f64) -> (f64, f64, f64) {
        let ws = MomentWorkspace::new(self, eta1);
        ws.mu3()
    }

    /// All conditional moments at once.
    pub fn conditional_moments(&self, eta1: f64) -> ConditionalMoments {
        let (mu2, mu2_prime) = self.conditional_mu2(eta1);
        let (mu3, mu3_prime, mu3_second) = self.conditional_mu3(eta1);
        ConditionalMoments {
            eta1,
            mu2,
            mu2_prime,
            mu3,
            mu3_prime,
            mu3_second,
        }
    }
}

fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| vec_dot(row, x)).collect()
}

/// tr(B1 B2 B3) for symmetric matrices; invariant under any slot order.
fn trace3(b1: &[Vec<f64>], b2: &[Vec<f64>], b3: &[Vec<f64>]) -> f64 {
    let n = b1.len();
    let mut acc = 0.0;
    for k in 0..n {
        for l in 0..n {
            let mut inner = 0.0;
            for m in 0..n {
                inner += b2[l][m] * b3[m][k];
            }
            acc += b1[k][l] * inner;
        }
    }
    acc
}

/// (C : B)_k = sum_{lm} C_klm B_lm and (C . a)_lm = sum_k C_klm a_k,
/// both as full ordered sums via the distinct permutations of each stored
/// sorted triple.
fn c_reductions(c: &SymmetricTensor, b: &[Vec<f64>], a: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = c.dim();
    let mut cb = vec![0.0; dim];
    let mut ca = vec![vec![0.0; dim]; dim];
    c.for_each(|idx, val| {
        if val == 0.0 {
            return;
        }
        let sorted = [idx[0], idx[1], idx[2]];
        for [k, l, m] in distinct_triple_perms(&sorted) {
            cb[k] += val * b[l][m];
            ca[l][m] += val * a[k];
        }
    });
    (cb, ca)
}

/// Portfolio-level tensor layers at a fixed eta1: the order-1..3 conditional
/// coefficient tensors and their first two eta1-derivatives, with the dense
/// reductions the mu3 formulas and the Euler bundles share.
pub struct MomentWorkspace {
    pub eta1: f64,
    /// st[n-1][r]: order-n tensor, r-th derivative level.
    st: Vec<[SymmetricTensor; 3]>,
    a: [Vec<f64>; 3],
    b: [Vec<Vec<f64>>; 3],
    /// ba[q][s] = B_q a_s.
    ba: [[Vec<f64>; 3]; 3],
    /// cb[s][q] = (C_s : B_q); ca[s][p] = (C_s . a_p).
    cb: [[Vec<f64>; 3]; 3],
    ca: [[Vec<Vec<f64>>; 3]; 3],
}

impl MomentWorkspace {
    pub fn new(tc: &TailCoefficients, eta1: f64) -> Self {
        let dim = tc.dim;
        let mut st = Vec::with_capacity(3);
        for n in 1..=3 {
            st.push([
                tc.mf_tensor(n, eta1, 0),
                tc.mf_tensor(n, eta1, 1),
                tc.mf_tensor(n, eta1, 2),
            ]);
        }
        let a = [
            st[0][0].to_vector(),
            st[0][1].to_vector(),
            st[0][2].to_vector(),
        ];
        let b = [
            st[1][0].to_matrix(),
            st[1][1].to_matrix(),
            st[1][2].to_matrix(),
        ];
        let ba = std::array::from_fn(|q| std::array::from_fn(|s| mat_vec(&b[q], &a[s])));
        let mut cb: [[Vec<f64>; 3]; 3] =
            std::array::from_fn(|_| std::array::from_fn(|_| vec![0.0; dim]));
        let mut ca: [[Vec<Vec<f64>>; 3]; 3] =
            std::array::from_fn(|_| std::array::from_fn(|_| vec![vec![0.0; dim]; dim]));
        for s in 0..3 {
            for x in 0..3 {
                let (cbv, cam) = c_reductions(&st[2][s], &b[x], &a[x]);
                cb[s][x] = cbv;
                ca[s][x] = cam;
            }
        }
        MomentWorkspace {
            eta1,
            st,
            a,
            b,
            ba,
            cb,
            ca,
        }
    }

    /// a_p^T B_q a_s.
    fn f1(&self, p: usize, q: usize, s: usize) -> f64 {
        vec_dot(&self.a[p], &self.ba[q][s])
    }

    /// <a_p, B_q, C_s> = sum_k a_p[k] (C_s : B_q)_k.
    fn f2(&self, p: usize, q: usize, s: usize) -> f64 {
        vec_dot(&self.a[p], &self.cb[s][q])
    }

    /// tr(B_p B_q B_s).
    fn f3(&self, p: usize, q: usize, s: usize) -> f64 {
        trace3(&self.b[p], &self.b[q], &self.b[s])
    }

    /// (mu2, mu2') at this eta1, from the cached tensor layers.
    pub fn mu2(&self) -> (f64, f64) {
        let mut mu2 = 0.0;
        let mut mu2p = 0.0;
        for n in 0..3 {
            let nf = factorial(n + 1);
            mu2 += nf * self.st[n][0].sum_sq();
            mu2p += 2.0 * nf * self.st[n][0].dot(&self.st[n][1]);
        }
        (mu2, mu2p)
    }

    /// All conditional moments from the cached layers.
    pub fn moments(&self) -> ConditionalMoments {
        let (mu2, mu2_prime) = self.mu2();
        let (mu3, mu3_prime, mu3_second) = self.mu3();
        ConditionalMoments {
            eta1: self.eta1,
            mu2,
            mu2_prime,
            mu3,
            mu3_prime,
            mu3_second,
        }
    }

    /// (mu3, mu3', mu3'') at this eta1.
    pub fn mu3(&self) -> (f64, f64, f64) {
        let m = 6.0 * self.f1(0, 0, 0) + 36.0 * self.f2(0, 0, 0) + 8.0 * self.f3(0, 0, 0);
        let mp = 6.0 * (2.0 * self.f1(1, 0, 0) + self.f1(0, 1, 0))
            + 36.0 * (self.f2(1, 0, 0) + self.f2(0, 1, 0) + self.f2(0, 0, 1))
            + 24.0 * self.f3(1, 0, 0);
        let mpp = 6.0
            * (2.0 * self.f1(2, 0, 0)
                + 2.0 * self.f1(1, 0, 1)
                + 4.0 * self.f1(1, 1, 0)
                + self.f1(0, 2, 0))
            + 36.0
                * (self.f2(2, 0, 0)
                    + self.f2(0, 2, 0)
                    + self.f2(0, 0, 2)
                    + 2.0 * self.f2(1, 1, 0)
                    + 2.0 * self.f2(1, 0, 1)
                    + 2.0 * self.f2(0, 1, 1))
            + 8.0 * (3.0 * self.f3(2, 0, 0) + 6.0 * self.f3(1, 1, 0));
        (m, mp, mpp)
    }

    /// Per-facility Euler derivatives at this eta1.
    pub fn euler_bundle(&self, tc: &TailCoefficients, index: usize) -> EulerBundle {
        let term = &tc.facilities[index];
        let x = &term.btilde;
        let cap = tc.config.cond_cap;
        let mut he_eta = vec![0.0; cap + 1];
        he_row(self.eta1, &mut he_eta);

        // own table scales g[n][r] for n = 1..=3, r = 0..=2
        let g: [[f64; 3]; 3] =
            std::array::from_fn(|n| std::array::from_fn(|r| term.own_g(n + 1, r, cap, &he_eta)));

        // own principal-series derivative levels
        let v1f = [
            term.onef_derivative(self.eta1, 0),
            term.onef_derivative(self.eta1, 1),
            term.onef_derivative(self.eta1, 2),
            term.onef_derivative(self.eta1, 3),
        ];

        // mu2: 2 sum_n n! g[n][r] <Vmf^(n,r'), x^n> split across levels
        let cx: [[f64; 2]; 3] = std::array::from_fn(|n| {
            [
                self.st[n][0].contract_all(x),
                self.st[n][1].contract_all(x),
            ]
        });
        let mut dmu2 = 0.0;
        let mut dmu2p = 0.0;
        for n in 0..3 {
            let nf = factorial(n + 1);
            dmu2 += 2.0 * nf * g[n][0] * cx[n][0];
            dmu2p += 2.0 * nf * (g[n][0] * cx[n][1] + g[n][1] * cx[n][0]);
        }

        // shared per-facility reductions
        let bx: [Vec<f64>; 3] = std::array::from_fn(|q| mat_vec(&self.b[q], x));
        let xa: [f64; 3] = std::array::from_fn(|p| vec_dot(&self.a[p], x));
        let xba: [[f64; 3]; 3] = std::array::from_fn(|q| {
            std::array::from_fn(|s| vec_dot(x, &self.ba[q][s]))
        });
        let xbbx: [[f64; 3]; 3] =
            std::array::from_fn(|q| std::array::from_fn(|s| vec_dot(&bx[q], &bx[s])));
        let xbx: [f64; 3] = std::array::from_fn(|q| vec_dot(x, &bx[q]));
        let xcb: [[f64; 3]; 3] =
            std::array::from_fn(|s| std::array::from_fn(|q| vec_dot(x, &self.cb[s][q])));
        let xcax: [[f64; 3]; 3] = std::array::from_fn(|s| {
            std::array::from_fn(|p| vec_dot(x, &mat_vec(&self.ca[s][p], x)))
        });

        // w d/dw of a_p B_q a_s: replace each slot by the own rank-1 piece
        let df1 = |p: usize, q: usize, s: usize| {
            g[0][p] * xba[q][s] + g[1][q] * xa[p] * xa[s] + g[0][s] * xba[q][p]
        };
        // w d/dw of <a_p, B_q, C_s>
        let df2 = |p: usize, q: usize, s: usize| {
            g[0][p] * xcb[s][q] + g[1][q] * xcax[s][p] + g[2][s] * xa[p] * xbx[q]
        };
        // w d/dw of tr(B_p B_q B_s)
        let df3 = |p: usize, q: usize, s: usize| {
            g[1][p] * xbbx[q][s] + g[1][q] * xbbx[p][s] + g[1][s] * xbbx[p][q]
        };

        let dmu3 = 6.0 * df1(0, 0, 0) + 36.0 * df2(0, 0, 0) + 8.0 * df3(0, 0, 0);
        let dmu3p = 6.0 * (2.0 * df1(1, 0, 0) + df1(0, 1, 0))
            + 36.0 * (df2(1, 0, 0) + df2(0, 1, 0) + df2(0, 0, 1))
            + 24.0 * df3(1, 0, 0);
        let dmu3pp = 6.0
            * (2.0 * df1(2, 0, 0) + 2.0 * df1(1, 0, 1) + 4.0 * df1(1, 1, 0) + df1(0, 2, 0))
            + 36.0
                * (df2(2, 0, 0)
                    + df2(0, 2, 0)
                    + df2(0, 0, 2)
                    + 2.0 * df2(1, 1, 0)
                    + 2.0 * df2(1, 0, 1)
                    + 2.0 * df2(0, 1, 1))
            + 8.0 * (3.0 * df3(2, 0, 0) + 6.0 * df3(1, 1, 0));

        EulerBundle {
            v1f,
            mu2: dmu2,
            mu2_prime: dmu2p,
            mu3: dmu3,
            mu3_prime: dmu3p,
            mu3_second: dmu3pp,
        }
    }
}

/// w_i d/dw_i of the tail quantities a facility feeds, all at one eta1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerBundle {
    /// Derivative levels 0..=3 of the principal series.
    pub v1f: [f64; 4],
    pub mu2: f64,
    pub mu2_prime: f64,
    pub mu3: f64,
    pub mu3_prime: f64,
    pub mu3_second: f64,
}

/// Convenience wrapper: one facility's bundle. Allocation loops should build
/// one `MomentWorkspace` and reuse it.
pub fn euler_tensor_derivatives(
    tc: &TailCoefficients,
    eta1: f64,
    index: usize,
) -> EulerBundle {
    MomentWorkspace::new(tc, eta1).euler_bundle(tc, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{facility_coefficients, series_value};
    use crate::hermite::he_unchecked;
    use crate::portfolio::{Facility, FactorModel, ValueSpec};
    use crate::quadrature::QuadratureRule;
    use crate::tensor::permutation_multiplicity;
    use approx::assert_relative_eq;

    fn facility(id: &str, weight: f64, rho: f64, loadings: Vec<(usize, f64)>, pd: f64) -> Facility {
        Facility {
            id: id.into(),
            weight,
            rho,
            loadings,
            value: ValueSpec::DefaultIndicator {
                pd,
                performing: 1.0,
                defaulted: 0.0,
            },
        }
    }

    fn model(n: usize) -> FactorModel {
        FactorModel::new((0..n).map(|k| format!("F{k}")).collect()).unwrap()
    }

    /// Two-factor toy in an already-rotated frame (slot 0 = principal).
    fn two_factor_toy() -> Portfolio {
        Portfolio {
            facilities: vec![
                facility("a", 1.0, 0.5, vec![(0, 0.8), (1, 0.6)], 0.02),
                facility("b", 2.0, 0.4, vec![(0, 0.6), (1, -0.8)], 0.05),
            ],
            factor_model: model(2),
        }
    }

    fn three_factor_toy() -> Portfolio {
        Portfolio {
            facilities: vec![
                facility("a", 1.0, 0.5, vec![(0, 0.8), (1, 0.36), (2, 0.48)], 0.02),
                facility("b", 2.0, 0.4, vec![(0, 0.6), (1, -0.64), (2, 0.48)], 0.05),
                facility("c", 0.7, 0.6, vec![(0, 0.5), (1, 0.5), (2, -0.7071067811865476)], 0.01),
            ],
            factor_model: model(3),
        }
    }

    fn coeff_list(p: &Portfolio, order: usize) -> Vec<CoefficientSet> {
        p.facilities
            .iter()
            .map(|f| facility_coefficients(&f.value, order).unwrap())
            .collect()
    }

    /// Direct evaluation of the ordered-tuple series sum_n sum V^(n) He.
    fn eval_tensors(tensors: &[SymmetricTensor], eta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in tensors {
            t.for_each(|idx, val| {
                if val == 0.0 {
                    return;
                }
                let mut prod = 1.0;
                let mut j = 0;
                while j < idx.len() {
                    let k = idx[j];
                    let mut mult = 0;
                    while j < idx.len() && idx[j] == k {
                        mult += 1;
                        j += 1;
                    }
                    prod *= he_unchecked(mult, eta[k]);
                }
                acc += permutation_multiplicity(idx) * val * prod;
            });
        }
        acc
    }

    #[test]
    fn single_facility_first_order_entry() {
        let p = Portfolio {
            facilities: vec![facility("a", 1.5, 0.6, vec![(0, 1.0)], 0.01)],
            factor_model: model(1),
        };
        let cs = coeff_list(&p, 3);
        let t = portfolio_tensors(&p, &cs, 3).unwrap();
        assert_relative_eq!(
            t[0].get(&[0]),
            1.5 * 0.6 * cs[0].v[1],
            epsilon = 1e-15
        );
    }

    #[test]
    fn doubled_weight_equals_two_copies() {
        let one = Portfolio {
            facilities: vec![facility("a", 2.0, 0.5, vec![(0, 0.6), (1, 0.8)], 0.02)],
            factor_model: model(2),
        };
        let two = Portfolio {
            facilities: vec![
                facility("a1", 1.0, 0.5, vec![(0, 0.6), (1, 0.8)], 0.02),
                facility("a2", 1.0, 0.5, vec![(0, 0.6), (1, 0.8)], 0.02),
            ],
            factor_model: model(2),
        };
        let ta = portfolio_tensors(&one, &coeff_list(&one, 3), 3).unwrap();
        let tb = portfolio_tensors(&two, &coeff_list(&two, 3), 3).unwrap();
        for (a, b) in ta.iter().zip(&tb) {
            for ((ia, va), (ib, vb)) in a.collect_entries().iter().zip(b.collect_entries().iter())
            {
                assert_eq!(ia, ib);
                assert_relative_eq!(va, vb, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn order_two_entries_match_brute_force() {
        let p = two_factor_toy();
        let cs = coeff_list(&p, 3);
        let t = portfolio_tensors(&p, &cs, 2).unwrap();
        for k in 0..2 {
            for l in k..2 {
                let mut want = 0.0;
                for (f, c) in p.facilities.iter().zip(&cs) {
                    let dense = f.dense_loadings(2);
                    want += f.weight * f.rho * f.rho / 2.0 * c.v[2] * dense[k] * dense[l];
                }
                assert_relative_eq!(t[1].get(&[k, l]), want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn facility_order_does_not_move_tensor_entries() {
        let mut p = three_factor_toy();
        let t1 = portfolio_tensors(&p, &coeff_list(&p, 3), 3).unwrap();
        p.facilities.reverse();
        let t2 = portfolio_tensors(&p, &coeff_list(&p, 3), 3).unwrap();
        for (a, b) in t1.iter().zip(&t2) {
            for ((_, va), (_, vb)) in a.collect_entries().iter().zip(b.collect_entries().iter()) {
                assert_relative_eq!(va, vb, epsilon = 1e-13, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn one_factor_portfolio_has_empty_mf_tables() {
        let p = Portfolio {
            facilities: vec![facility("a", 1.0, 0.6, vec![(0, 1.0)], 0.01)],
            factor_model: model(1),
        };
        let cs = coeff_list(&p, 38);
        let cfg = ExpansionConfig::default();
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        for row in &tc.tables {
            for t in row {
                assert_eq!(t.sum_sq(), 0.0);
            }
        }
        // v1f is the coefficient series itself
        for m in 0..=cfg.onef_order {
            let want = 0.6f64.powi(m as i32) / factorial(m) * cs[0].v[m];
            assert_relative_eq!(tc.v1f[m], want, epsilon = 1e-15);
        }
        let (mu2, mu2p) = tc.conditional_mu2(0.7);
        assert_eq!((mu2, mu2p), (0.0, 0.0));
        let (m3, m3p, m3pp) = tc.conditional_mu3(0.7);
        assert_eq!((m3, m3p, m3pp), (0.0, 0.0, 0.0));
    }

    #[test]
    fn production_tables_match_tensor_rekey() {
        let p = three_factor_toy();
        let cs = coeff_list(&p, 11);
        let cfg = ExpansionConfig {
            tensor_order: 3,
            onef_order: 11,
            cond_cap: 8,
        };
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        let tensors = portfolio_tensors(&p, &cs, 3).unwrap();
        let (v1f_rk, tables_rk) = rekey_tensors(&tensors, &cfg).unwrap();
        // diagonal entries agree with the principal series
        for m in 1..=3 {
            assert_relative_eq!(tc.v1f[m], v1f_rk[m], epsilon = 1e-15);
        }
        // table entries agree wherever the re-key reaches (n + d <= 3)
        for n in 1..=3usize {
            for d in 0..=(3 - n) {
                let prod = tc.tables[n - 1][d].collect_entries();
                let rk = tables_rk[n - 1][d].collect_entries();
                for ((ia, va), (ib, vb)) in prod.iter().zip(rk.iter()) {
                    assert_eq!(ia, ib);
                    assert_relative_eq!(va, vb, epsilon = 1e-13, max_relative = 1e-13);
                }
            }
        }
    }

    /// With coefficients truncated at the tensor order, the split form is an
    /// exact regrouping of the multivariate series: check on a grid.
    #[test]
    fn split_evaluation_matches_direct_series() {
        let p = three_factor_toy();
        let cs: Vec<CoefficientSet> = coeff_list(&p, 11)
            .into_iter()
            .map(|c| c.truncated(3))
            .collect();
        let cfg = ExpansionConfig {
            tensor_order: 3,
            onef_order: 11,
            cond_cap: 8,
        };
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        for &e1 in &[-2.0, -0.5, 0.0, 1.3] {
            for &e2 in &[-1.5, 0.4] {
                for &e3 in &[-0.3, 2.1] {
                    let eta = [e1, e2, e3];
                    // direct: facility series at the projected argument
                    let mut direct = 0.0;
                    for (f, c) in p.facilities.iter().zip(&cs) {
                        let s = f.project(&eta);
                        direct += f.weight * series_value(&c.v, f.rho, s, 3);
                    }
                    // split: principal series + mf tensors evaluated over eta
                    let mut split = tc.onef_derivative(e1, 0);
                    let mf: Vec<SymmetricTensor> =
                        (1..=3).map(|n| tc.mf_tensor(n, e1, 0)).collect();
                    split += eval_tensors(&mf, &eta);
                    assert_relative_eq!(direct, split, epsilon = 1e-12, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn mu2_matches_quadrature_on_terminating_expansion() {
        let p = two_factor_toy();
        let cs: Vec<CoefficientSet> = coeff_list(&p, 11)
            .into_iter()
            .map(|c| c.truncated(3))
            .collect();
        let cfg = ExpansionConfig {
            tensor_order: 3,
            onef_order: 11,
            cond_cap: 8,
        };
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        let rule = QuadratureRule::gauss_hermite(64).unwrap();
        for &eta1 in &[-2.0, 0.0, 0.5, 1.7] {
            let v1f = tc.onef_derivative(eta1, 0);
            let integral = rule.integrate(|e2| {
                let mut v = 0.0;
                for (f, c) in p.facilities.iter().zip(&cs) {
                    let s = f.project(&[eta1, e2]);
                    v += f.weight * series_value(&c.v, f.rho, s, 3);
                }
                (v - v1f) * (v - v1f)
            });
            let (mu2, _) = tc.conditional_mu2(eta1);
            assert_relative_eq!(mu2, integral, epsilon = 1e-10, max_relative = 1e-8);
        }
    }

    #[test]
    fn mu2_is_nonnegative_on_a_wide_grid() {
        let p = three_factor_toy();
        let cs = coeff_list(&p, 38);
        let tc = tail_split(&p, &cs, &ExpansionConfig::default()).unwrap();
        let mut eta1 = -5.0;
        while eta1 <= 5.0 {
            let (mu2, _) = tc.conditional_mu2(eta1);
            assert!(mu2 >= 0.0, "mu2({eta1}) = {mu2}");
            eta1 += 0.25;
        }
    }

    #[test]
    fn order_one_only_expansion_has_zero_mu3() {
        // keep only v^(0), v^(1): every mu3 family needs an order-2 factor
        let p = two_factor_toy();
        let cs: Vec<CoefficientSet> = coeff_list(&p, 11)
            .into_iter()
            .map(|c| c.truncated(1))
            .collect();
        let cfg = ExpansionConfig {
            tensor_order: 3,
            onef_order: 11,
            cond_cap: 8,
        };
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        let (mu3, mu3p, mu3pp) = tc.conditional_mu3(0.4);
        assert_eq!((mu3, mu3p, mu3pp), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mu3_matches_cubed_quadrature_when_expansion_ends_at_order_two() {
        let p = three_factor_toy();
        let cs: Vec<CoefficientSet> = coeff_list(&p, 11)
            .into_iter()
            .map(|c| c.truncated(2))
            .collect();
        let cfg = ExpansionConfig {
            tensor_order: 3,
            onef_order: 11,
            cond_cap: 8,
        };
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        let rule = QuadratureRule::gauss_hermite(32).unwrap();
        for &eta1 in &[-1.5, 0.0, 0.8] {
            let mf: Vec<SymmetricTensor> = (1..=3).map(|n| tc.mf_tensor(n, eta1, 0)).collect();
            let mut integral = 0.0;
            for (&e2, &w2) in rule.nodes().iter().zip(rule.weights()) {
                for (&e3, &w3) in rule.nodes().iter().zip(rule.weights()) {
                    let r = eval_tensors(&mf, &[eta1, e2, e3]);
                    integral += w2 * w3 * r * r * r;
                }
            }
            let (mu3, _, _) = tc.conditional_mu3(eta1);
            assert_relative_eq!(mu3, integral, epsilon = 1e-10, max_relative = 1e-8);
        }
    }

    /// Pins the 36 coefficient: the part of E[(remainder)^3] that is odd
    /// under C -> -C is exactly 36 <a, B, C>, and the even dropped family is
    /// exactly 3 E[B C^2].
    #[test]
    fn mu3_family_bookkeeping_against_quadrature() {
        let p = three_factor_toy();
        let cs: Vec<CoefficientSet> = coeff_list(&p, 11)
            .into_iter()
            .map(|c| c.truncated(3))
            .collect();
        let cfg = ExpansionConfig {
            tensor_order: 3,
            onef_order: 11,
            cond_cap: 8,
        };
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        let rule = QuadratureRule::gauss_hermite(32).unwrap();
        let eta1 = 0.6;
        let a = tc.mf_tensor(1, eta1, 0);
        let bt = tc.mf_tensor(2, eta1, 0);
        let ct = tc.mf_tensor(3, eta1, 0);
        let ws = MomentWorkspace::new(&tc, eta1);
        let (mu3_formula, _, _) = ws.mu3();
        let term36 = 36.0 * ws.f2(0, 0, 0);

        let mut cube_plus = 0.0;
        let mut cube_minus = 0.0;
        let mut bc2 = 0.0;
        for (&e2, &w2) in rule.nodes().iter().zip(rule.weights()) {
            for (&e3, &w3) in rule.nodes().iter().zip(rule.weights()) {
                let eta = [eta1, e2, e3];
                let va = eval_tensors(std::slice::from_ref(&a), &eta);
                let vb = eval_tensors(std::slice::from_ref(&bt), &eta);
                let vc = eval_tensors(std::slice::from_ref(&ct), &eta);
                let w = w2 * w3;
                let fp = va + vb + vc;
                let fm = va + vb - vc;
                cube_plus += w * fp * fp * fp;
                cube_minus += w * fm * fm * fm;
                bc2 += w * vb * vc * vc;
            }
        }
        let odd = 0.5 * (cube_plus - cube_minus);
        assert_relative_eq!(odd, term36, epsilon = 1e-10, max_relative = 1e-8);
        // total cube = formula + the dropped 3 E[B C^2] family
        assert_relative_eq!(
            cube_plus,
            mu3_formula + 3.0 * bc2,
            epsilon = 1e-10,
            max_relative = 1e-8
        );
    }

    #[test]
    fn moment_derivatives_match_finite_differences() {
        let p = three_factor_toy();
        let cs = coeff_list(&p, 38);
        let tc = tail_split(&p, &cs, &ExpansionConfig::default()).unwrap();
        let h = 1e-4;
        for &eta1 in &[-1.2, 0.3, 1.1] {
            let (mu2_m, _) = tc.conditional_mu2(eta1 - h);
            let (_, mu2p_0) = tc.conditional_mu2(eta1);
            let (mu2_p, _) = tc.conditional_mu2(eta1 + h);
            assert_relative_eq!(mu2p_0, (mu2_p - mu2_m) / (2.0 * h), max_relative = 1e-5);

            let (m3_m, m3p_m, _) = tc.conditional_mu3(eta1 - h);
            let (m3_0, m3p_0, m3pp_0) = tc.conditional_mu3(eta1);
            let (m3_p, m3p_p, _) = tc.conditional_mu3(eta1 + h);
            assert_relative_eq!(m3p_0, (m3_p - m3_m) / (2.0 * h), max_relative = 1e-5);
            assert_relative_eq!(m3pp_0, (m3p_p - m3p_m) / (2.0 * h), max_relative = 1e-5);
            let _ = m3_0;

            // onef series derivatives too
            for r in 0..3 {
                let lo = tc.onef_derivative(eta1 - h, r);
                let hi = tc.onef_derivative(eta1 + h, r);
                let d = tc.onef_derivative(eta1, r + 1);
                assert_relative_eq!(d, (hi - lo) / (2.0 * h), max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn euler_bundles_sum_to_homogeneity_degrees() {
        let p = three_factor_toy();
        let cs = coeff_list(&p, 38);
        let tc = tail_split(&p, &cs, &ExpansionConfig::default()).unwrap();
        let eta1 = -2.3263478740408408;
        let ws = MomentWorkspace::new(&tc, eta1);
        let mut sum = EulerBundle {
            v1f: [0.0; 4],
            mu2: 0.0,
            mu2_prime: 0.0,
            mu3: 0.0,
            mu3_prime: 0.0,
            mu3_second: 0.0,
        };
        for i in 0..tc.facilities.len() {
            let b = ws.euler_bundle(&tc, i);
            for r in 0..4 {
                sum.v1f[r] += b.v1f[r];
            }
            sum.mu2 += b.mu2;
            sum.mu2_prime += b.mu2_prime;
            sum.mu3 += b.mu3;
            sum.mu3_prime += b.mu3_prime;
            sum.mu3_second += b.mu3_second;
        }
        for r in 0..4 {
            assert_relative_eq!(sum.v1f[r], tc.onef_derivative(eta1, r), max_relative = 1e-12);
        }
        let (mu2, mu2p) = tc.conditional_mu2(eta1);
        let (mu3, mu3p, mu3pp) = tc.conditional_mu3(eta1);
        assert_relative_eq!(sum.mu2, 2.0 * mu2, max_relative = 1e-10);
        assert_relative_eq!(sum.mu2_prime, 2.0 * mu2p, max_relative = 1e-10);
        assert_relative_eq!(sum.mu3, 3.0 * mu3, max_relative = 1e-10);
        assert_relative_eq!(sum.mu3_prime, 3.0 * mu3p, max_relative = 1e-10);
        assert_relative_eq!(sum.mu3_second, 3.0 * mu3pp, max_relative = 1e-10);
    }

    #[test]
    fn euler_bundles_match_weight_finite_differences() {
        let p = three_factor_toy();
        let cs = coeff_list(&p, 38);
        let cfg = ExpansionConfig::default();
        let tc = tail_split(&p, &cs, &cfg).unwrap();
        let eta1 = -1.8;
        let ws = MomentWorkspace::new(&tc, eta1);
        let h = 1e-5;
        for i in 0..p.facilities.len() {
            let bundle = ws.euler_bundle(&tc, i);
            let mut hi = p.clone();
            hi.facilities[i].weight *= 1.0 + h;
            let mut lo = p.clone();
            lo.facilities[i].weight *= 1.0 - h;
            let tc_hi = tail_split(&hi, &cs, &cfg).unwrap();
            let tc_lo = tail_split(&lo, &cs, &cfg).unwrap();
            let fd = |f: &dyn Fn(&TailCoefficients) -> f64| (f(&tc_hi) - f(&tc_lo)) / (2.0 * h);

            let fd_v1 = fd(&|t| t.onef_derivative(eta1, 1));
            assert_relative_eq!(bundle.v1f[1], fd_v1, max_relative = 1e-4, epsilon = 1e-12);
            let fd_mu2 = fd(&|t| t.conditional_mu2(eta1).0);
            assert_relative_eq!(bundle.mu2, fd_mu2, max_relative = 1e-4, epsilon = 1e-12);
            let fd_mu2p = fd(&|t| t.conditional_mu2(eta1).1);
            assert_relative_eq!(bundle.mu2_prime, fd_mu2p, max_relative = 1e-4, epsilon = 1e-12);
            let fd_mu3 = fd(&|t| t.conditional_mu3(eta1).0);
            assert_relative_eq!(bundle.mu3, fd_mu3, max_relative = 1e-4, epsilon = 1e-12);
            let fd_mu3p = fd(&|t| t.conditional_mu3(eta1).1);
            assert_relative_eq!(bundle.mu3_prime, fd_mu3p, max_relative = 1e-4, epsilon = 1e-12);
            let fd_mu3pp = fd(&|t| t.conditional_mu3(eta1).2);
            assert_relative_eq!(
                bundle.mu3_second,
                fd_mu3pp,
                max_relative = 1e-4,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn single_facility_bundle_is_twice_mu2() {
        let p = Portfolio {
            facilities: vec![facility("a", 1.3, 0.5, vec![(0, 0.6), (1, 0.8)], 0.02)],
            factor_model: model(2),
        };
        let cs = coeff_list(&p, 38);
        let tc = tail_split(&p, &cs, &ExpansionConfig::default()).unwrap();
        let eta1 = 0.9;
        let b = euler_tensor_derivatives(&tc, eta1, 0);
        let (mu2, _) = tc.conditional_mu2(eta1);
        assert_relative_eq!(b.mu2, 2.0 * mu2, max_relative = 1e-12);
    }

    #[test]
    fn config_caps_are_enforced() {
        let bad = ExpansionConfig {
            tensor_order: 4,
            onef_order: 30,
            cond_cap: 8,
        };
        assert!(bad.validate().is_err());
        let p = two_factor_toy();
        let cs = coeff_list(&p, 10); // too short for the default config
        match tail_split(&p, &cs, &ExpansionConfig::default()) {
            Err(CriskError::OrderCap { .. }) => {}
            other => panic!("expected order-cap error, got {other:?}"),
        }
    }
}
