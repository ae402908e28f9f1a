//! Seeded benchmark portfolio generators.
//!
//! Factors come in two groups, regions followed by industries; every loan
//! loads on one factor from each group plus a macro component spread evenly
//! over all factors. The macro share stands in for factor correlation: in
//! the orthonormal basis the engine works in, correlated sector factors
//! surface as a common direction every loading shares, which is what gives
//! real portfolios their dominant principal factor. Loadings are
//! renormalized to unit norm after blending.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::error::{CriskError, Result};
use crate::portfolio::{Facility, FactorModel, Portfolio, ValueSpec};
use crate::rng::{standard_normal, standard_uniform, uniform_index};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchmarkKind {
    /// One loan per region/industry pair, unit weights.
    Diversified,
    /// Uniformly random pair assignment plus a block of loans pinned to the
    /// first region/industry pair.
    Concentrated { block: usize },
    /// Log-normal weights with a handful of dominant exposures and per-loan
    /// rho drawn from [0.3, 0.7].
    Heterogeneous { dominant: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub kind: BenchmarkKind,
    pub regions: usize,
    pub industries: usize,
    /// Total loan count; ignored for `Diversified`, which is always
    /// regions x industries.
    pub loans: usize,
    pub rho: f64,
    pub pd: f64,
    pub seed: u64,
    /// Fraction of the pair loading variance on the region factor.
    pub region_share: f64,
    /// Variance share of the even macro component blended into every
    /// loading before renormalization. Zero gives bare region/industry
    /// pairs on independent factors.
    pub common_share: f64,
}

impl BenchmarkSpec {
    pub fn new(kind: BenchmarkKind, regions: usize, industries: usize, loans: usize) -> Self {
        BenchmarkSpec {
            kind,
            regions,
            industries,
            loans,
            rho: 0.6,
            pd: 0.01,
            seed: 0,
            region_share: 0.5,
            common_share: 0.6,
        }
    }
}

fn default_loan_value(pd: f64) -> ValueSpec {
    ValueSpec::DefaultIndicator {
        pd,
        performing: 1.0,
        defaulted: 0.0,
    }
}

fn pair_loadings(spec: &BenchmarkSpec, region: usize, industry: usize) -> Vec<(usize, f64)> {
    let local = 1.0 - spec.common_share;
    let br = (local * spec.region_share).sqrt();
    let bi = (local * (1.0 - spec.region_share)).sqrt();
    if spec.common_share == 0.0 {
        return vec![(region, br), (spec.regions + industry, bi)];
    }
    let dim = spec.regions + spec.industries;
    let g = (spec.common_share / dim as f64).sqrt();
    let mut b = vec![g; dim];
    b[region] += br;
    b[spec.regions + industry] += bi;
    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    b.iter().enumerate().map(|(k, &x)| (k, x / norm)).collect()
}

pub fn synthesize_benchmark(spec: &BenchmarkSpec) -> Result<Portfolio> {
    if spec.regions == 0 || spec.industries == 0 {
        return Err(CriskError::Config("factor counts must be at least 1".into()));
    }
    if !(spec.rho.abs() < 1.0) {
        return Err(CriskError::Config(format!("rho {} outside (-1,1)", spec.rho)));
    }
    if !(spec.pd > 0.0 && spec.pd < 1.0) {
        return Err(CriskError::Config(format!("pd {} outside (0,1)", spec.pd)));
    }
    if !(spec.region_share > 0.0 && spec.region_share < 1.0) {
        return Err(CriskError::Config(format!(
            "region share {} outside (0,1)",
            spec.region_share
        )));
    }
    if !(0.0..1.0).contains(&spec.common_share) {
        return Err(CriskError::Config(format!(
            "common share {} outside [0,1)",
            spec.common_share
        )));
    }
    let names: Vec<String> = (0..spec.regions)
        .map(|a| format!("R{a}"))
        .chain((0..spec.industries).map(|b| format!("I{b}")))
        .collect();
    let factor_model = FactorModel::new(names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let facilities = match spec.kind {
        BenchmarkKind::Diversified => {
            let mut out = Vec::with_capacity(spec.regions * spec.industries);
            for a in 0..spec.regions {
                for b in 0..spec.industries {
                    out.push(Facility {
                        id: format!("div-r{a}-i{b}"),
                        weight: 1.0,
                        rho: spec.rho,
                        loadings: pair_loadings(spec, a, b),
                        value: default_loan_value(spec.pd),
                    });
                }
            }
            out
        }
        BenchmarkKind::Concentrated { block } => {
            if spec.loans < block {
                return Err(CriskError::Config(format!(
                    "block {} exceeds loan count {}",
                    block, spec.loans
                )));
            }
            let mut out = Vec::with_capacity(spec.loans);
            for j in 0..spec.loans - block {
                let a = uniform_index(&mut rng, spec.regions);
                let b = uniform_index(&mut rng, spec.industries);
                out.push(Facility {
                    id: format!("rand-{j}"),
                    weight: 1.0,
                    rho: spec.rho,
                    loadings: pair_loadings(spec, a, b),
                    value: default_loan_value(spec.pd),
                });
            }
            for j in 0..block {
                out.push(Facility {
                    id: format!("block-{j}"),
                    weight: 1.0,
                    rho: spec.rho,
                    loadings: pair_loadings(spec, 0, 0),
                    value: default_loan_value(spec.pd),
                });
            }
            out
        }
        BenchmarkKind::Heterogeneous { dominant } => {
            if spec.loans < dominant {
                return Err(CriskError::Config(format!(
                    "dominant count {} exceeds loan count {}",
                    dominant, spec.loans
                )));
            }
            let mut out = Vec::with_capacity(spec.loans);
            for j in 0..spec.loans {
                let a = uniform_index(&mut rng, spec.regions);
                let b = uniform_index(&mut rng, spec.industries);
                // sigma 0.5 keeps the granularity correction perturbative;
                // exp(N(0,1)) tails already push the adjustment series past
                // its radius at a few hundred loans
                let mut weight = (0.5 * standard_normal(&mut rng)).exp();
                if j < dominant {
                    weight *= 6.0;
                }
                let rho = 0.3 + 0.4 * standard_uniform(&mut rng);
                out.push(Facility {
                    id: format!("het-{j}"),
                    weight,
                    rho,
                    loadings: pair_loadings(spec, a, b),
                    value: default_loan_value(spec.pd),
                });
            }
            out
        }
    };

    Ok(Portfolio {
        facilities,
        factor_model,
    })
}
