//! Symmetric coefficient tensors stored once per sorted multi-index.
//!
//! An order-n tensor over `dim` factors keeps one entry per multiset
//! `k1 <= k2 <= ... <= kn`; the value is the same for every permutation, so
//! full-sum contractions recover the ordered-tuple sum by weighting each
//! stored entry with its permutation count. Order is capped at 3: the cost
//! of order n grows like dim^n and everything downstream only consumes
//! tensors up to the third order.

use crate::error::{CriskError, Result};

/// Highest tensor order the storage supports.
pub const MAX_TENSOR_ORDER: usize = 3;

/// Exact small binomial for index ranking.
fn choose(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut num = 1usize;
    for j in 0..k {
        num = num * (n - j) / (j + 1);
    }
    num
}

/// Number of multisets of size `order` over `dim` symbols.
fn multiset_count(dim: usize, order: usize) -> usize {
    choose(dim + order - 1, order)
}

/// Colex rank of a sorted multi-index; inverse of the traversal order used
/// by `for_each`.
fn rank(idx: &[usize]) -> usize {
    idx.iter()
        .enumerate()
        .map(|(j, &k)| choose(k + j, j + 1))
        .sum()
}

/// Ordered-tuple count represented by one sorted entry: n! over the
/// factorials of repeat runs.
pub fn permutation_multiplicity(idx: &[usize]) -> f64 {
    match idx.len() {
        0 | 1 => 1.0,
        2 => {
            if idx[0] == idx[1] {
                1.0
            } else {
                2.0
            }
        }
        3 => {
            if idx[0] == idx[2] {
                1.0
            } else if idx[0] == idx[1] || idx[1] == idx[2] {
                3.0
            } else {
                6.0
            }
        }
        n => unreachable!("tensor order {n} unsupported"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTensor {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl SymmetricTensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        if order == 0 || order > MAX_TENSOR_ORDER {
            return Err(CriskError::OrderCap {
                requested: order,
                cap: MAX_TENSOR_ORDER,
            });
        }
        if dim == 0 {
            return Err(CriskError::Config("tensor dimension must be positive".into()));
        }
        Ok(SymmetricTensor {
            order,
            dim,
            entries: vec![0.0; multiset_count(dim, order)],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn sorted_rank(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        debug_assert!(idx.iter().all(|&k| k < self.dim));
        let mut s = [0usize; MAX_TENSOR_ORDER];
        let s = &mut s[..idx.len()];
        s.copy_from_slice(idx);
        s.sort_unstable();
        rank(s)
    }

    /// Entry at any permutation of a multi-index.
    pub fn get(&self, idx: &[usize]) -> f64 {
        self.entries[self.sorted_rank(idx)]
    }

    pub fn add(&mut self, idx: &[usize], value: f64) {
        let r = self.sorted_rank(idx);
        self.entries[r] += value;
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            *e *= factor;
        }
    }

    /// Visit every stored entry as (sorted multi-index, value).
    pub fn for_each<F: FnMut(&[usize], f64)>(&self, mut f: F) {
        let mut iter = self.entries.iter();
        match self.order {
            1 => {
                for k in 0..self.dim {
                    f(&[k], *iter.next().unwrap());
                }
            }
            2 => {
                for k2 in 0..self.dim {
                    for k1 in 0..=k2 {
                        f(&[k1, k2], *iter.next().unwrap());
                    }
                }
            }
            3 => {
                for k3 in 0..self.dim {
                    for k2 in 0..=k3 {
                        for k1 in 0..=k2 {
                            f(&[k1, k2, k3], *iter.next().unwrap());
                        }
                    }
                }
            }
            n => unreachable!("tensor order {n}"),
        }
    }

    /// self += c * other, entrywise.
    pub fn axpy(&mut self, c: f64, other: &SymmetricTensor) {
        assert_eq!(self.order, other.order);
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += c * b;
        }
    }

    /// Full ordered-tuple sum of entry * other-entry; `sum_sq` with itself.
    pub fn dot(&self, other: &SymmetricTensor) -> f64 {
        assert_eq!(self.order, other.order);
        assert_eq!(self.dim, other.dim);
        let mut acc = 0.0;
        let mut i = 0usize;
        self.for_each(|idx, v| {
            acc += permutation_multiplicity(idx) * v * other.entries[i];
            i += 1;
        });
        acc
    }

    /// Full ordered-tuple sum of squared entries (the n-th Parseval block).
    pub fn sum_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Full contraction against `v` on every slot: sum over ordered tuples
    /// of entry * v[k1] * ... * v[kn].
    pub fn contract_all(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim);
        let mut acc = 0.0;
        self.for_each(|idx, val| {
            let p: f64 = idx.iter().map(|&k| v[k]).product();
            acc += permutation_multiplicity(idx) * val * p;
        });
        acc
    }

    /// Dense square copy of an order-2 tensor.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        assert_eq!(self.order, 2);
        let mut m = vec![vec![0.0; self.dim]; self.dim];
        self.for_each(|idx, v| {
            m[idx[0]][idx[1]] = v;
            m[idx[1]][idx[0]] = v;
        });
        m
    }

    /// Dense vector copy of an order-1 tensor.
    pub fn to_vector(&self) -> Vec<f64> {
        assert_eq!(self.order, 1);
        self.entries.clone()
    }

    /// Entries as (sorted index, value) pairs, for serialization and debug
    /// dumps; the index is rendered by the caller.
    pub fn collect_entries(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::with_capacity(self.entries.len());
        self.for_each(|idx, v| out.push((idx.to_vec(), v)));
        out
    }
}

/// Distinct permutations of a sorted triple, for full-sum contractions that
/// treat the slots asymmetrically (e.g. sum of a_k B_lm C_klm).
pub fn distinct_triple_perms(idx: &[usize; 3]) -> Vec<[usize; 3]> {
    let [i, j, k] = *idx;
    if i == k {
        vec![[i, j, k]]
    } else if i == j {
        vec![[i, i, k], [i, k, i], [k, i, i]]
    } else if j == k {
        vec![[i, j, j], [j, i, j], [j, j, i]]
    } else {
        vec![
            [i, j, k],
            [i, k, j],
            [j, i, k],
            [j, k, i],
            [k, i, j],
            [k, j, i],
        ]
    }
}
