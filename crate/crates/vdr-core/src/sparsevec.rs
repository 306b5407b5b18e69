//! Sparse vocabulary-space vectors, the `elu1p` activation, top-k gating,
//! and exact sparse scoring.
//!
//! Vectors are canonical: dimensions strictly increasing, weights positive,
//! zero weights never stored. All operations are pure.

use crate::{Error, Result};

/// `x + 1` for `x >= 0`, `e^x` otherwise. Strictly positive, monotone, and
/// continuously differentiable at 0.
#[inline]
pub fn elu1p(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Derivative of [`elu1p`]: 1 for `x >= 0`, `e^x` otherwise. Both branches
/// agree at 0.
#[inline]
pub fn elu1p_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Sorted (dimension, weight) pairs; weights strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Build from entries already sorted by strictly increasing dimension.
    /// Zero weights are dropped; negative or non-finite weights are rejected.
    pub fn from_sorted_entries(entries: Vec<(u32, f64)>) -> Result<Self> {
        for pair in entries.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::invalid(format!(
                    "dimensions not strictly increasing: {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for &(dim, w) in &entries {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!(
                    "invalid weight {w} at dimension {dim}"
                )));
            }
        }
        Ok(Self {
            entries: entries.into_iter().filter(|&(_, w)| w != 0.0).collect(),
        })
    }

    /// Build from a dense array, keeping nonzero positions.
    pub fn from_dense(values: &[f64]) -> Result<Self> {
        Self::from_sorted_entries(
            values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect(),
        )
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    /// Scale every weight by a positive factor.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::invalid(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(Self {
            entries: self.entries.iter().map(|&(d, w)| (d, w * factor)).collect(),
        })
    }

    /// Expand to a dense array of the given length.
    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for &(dim, w) in &self.entries {
            out[dim as usize] = w;
        }
        out
    }
}

/// Scale weights by `1 / ||a||`; errors on the empty vector.
pub fn l2_normalize(a: &SparseVector) -> Result<SparseVector> {
    if a.is_empty() {
        return Err(Error::NormalizeZeroVector);
    }
    let inv = 1.0 / a.norm();
    Ok(SparseVector {
        entries: a.entries.iter().map(|&(d, w)| (d, w * inv)).collect(),
    })
}

/// Sum over shared dimensions of the weight products, accumulated in
/// increasing dimension order (two-pointer merge).
pub fn dot(a: &SparseVector, b: &SparseVector) -> f64 {
    let (xs, ys) = (&a.entries, &b.entries);
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < xs.len() && j < ys.len() {
        match xs[i].0.cmp(&ys[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += xs[i].1 * ys[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// A sorted set of gated dimension ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateMask {
    dims: Vec<u32>,
}

impl GateMask {
    pub fn empty() -> Self {
        Self { dims: Vec::new() }
    }

    /// All dimensions `0..vocab_size` (full activation).
    pub fn full(vocab_size: usize) -> Self {
        Self {
            dims: (0..vocab_size as u32).collect(),
        }
    }

    pub fn from_sorted(dims: Vec<u32>) -> Result<Self> {
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("gate dims must be strictly increasing"));
        }
        Ok(Self { dims })
    }

    pub fn from_unsorted(mut dims: Vec<u32>) -> Self {
        dims.sort_unstable();
        dims.dedup();
        Self { dims }
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn contains(&self, dim: u32) -> bool {
        self.dims.binary_search(&dim).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.dims.iter().copied()
    }

    /// Set difference `self \ other`, sorted.
    pub fn difference(&self, other: &GateMask) -> GateMask {
        GateMask {
            dims: self
                .dims
                .iter()
                .copied()
                .filter(|&d| !other.contains(d))
                .collect(),
        }
    }
}

/// Sorted union of two masks.
pub fn gate_union(a: &GateMask, b: &GateMask) -> GateMask {
    let mut dims = Vec::with_capacity(a.len() + b.len());
    let (xs, ys) = (&a.dims, &b.dims);
    let (mut i, mut j) = (0, 0);
    while i < xs.len() && j < ys.len() {
        match xs[i].cmp(&ys[j]) {
            std::cmp::Ordering::Less => {
                dims.push(xs[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                dims.push(ys[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                dims.push(xs[i]);
                i += 1;
                j += 1;
            }
        }
    }
    dims.extend_from_slice(&xs[i..]);
    dims.extend_from_slice(&ys[j..]);
    GateMask { dims }
}

/// Dimensions holding the `k` largest values; ties broken by lower dimension
/// id. `k >= len` selects everything.
pub fn top_k_dims(values: &[f64], k: usize) -> GateMask {
    if k == 0 || values.is_empty() {
        return GateMask::empty();
    }
    if k >= values.len() {
        return GateMask::full(values.len());
    }
    let mut order: Vec<u32> = (0..values.len() as u32).collect();
    // Total order: value descending, then dimension ascending. Values are
    // finite by the encoder's construction.
    let cmp = |&a: &u32, &b: &u32| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .expect("finite values")
            .then(a.cmp(&b))
    };
    order.select_nth_unstable_by(k - 1, cmp);
    let mut dims: Vec<u32> = order[..k].to_vec();
    dims.sort_unstable();
    GateMask { dims }
}

/// Keep exactly the gated positions of a dense nonnegative array, dropping
/// zero values.
pub fn apply_gate(values: &[f64], gate: &GateMask) -> SparseVector {
    SparseVector {
        entries: gate
            .iter()
            .map(|d| (d, values[d as usize]))
            .filter(|&(_, w)| w != 0.0)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elu1p_branch_values() {
        assert_eq!(elu1p(0.0), 1.0);
        assert_eq!(elu1p(2.5), 3.5);
        assert!((elu1p(-1.0) - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn elu1p_grad_branch_values() {
        assert_eq!(elu1p_grad(0.0), 1.0);
        assert_eq!(elu1p_grad(5.0), 1.0);
        assert!((elu1p_grad(-1.0) - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn elu1p_continuity_at_zero() {
        let h = 1e-7;
        assert!((elu1p(h) - elu1p(-h)).abs() <= 2.0 * h + h * h + 1e-12);
        assert!((elu1p_grad(h) - elu1p_grad(-h)).abs() < 1e-6);
    }

    #[test]
    fn top_k_picks_largest() {
        let g = top_k_dims(&[0.1, 0.9, 0.9, 0.2], 2);
        assert_eq!(g.dims(), &[1, 2]);
    }

    #[test]
    fn top_k_ties_prefer_lower_dim() {
        let g = top_k_dims(&[0.5, 0.5, 0.5], 2);
        assert_eq!(g.dims(), &[0, 1]);
    }

    #[test]
    fn top_k_zero_and_overflow() {
        assert!(top_k_dims(&[1.0, 2.0], 0).is_empty());
        assert_eq!(top_k_dims(&[1.0, 2.0], 5).dims(), &[0, 1]);
    }

    #[test]
    fn gate_union_merges_sorted() {
        let a = GateMask::from_sorted(vec![1, 3]).unwrap();
        let b = GateMask::from_sorted(vec![3, 5]).unwrap();
        assert_eq!(gate_union(&a, &b).dims(), &[1, 3, 5]);
        assert_eq!(gate_union(&GateMask::empty(), &b).dims(), &[3, 5]);
        assert_eq!(gate_union(&a, &GateMask::empty()).dims(), &[1, 3]);
    }

    #[test]
    fn apply_gate_selects_and_drops_zeros() {
        let g = GateMask::from_sorted(vec![0, 2]).unwrap();
        let v = apply_gate(&[0.5, 1.5, 0.2], &g);
        assert_eq!(v.entries(), &[(0, 0.5), (2, 0.2)]);

        assert!(apply_gate(&[1.0, 1.0], &GateMask::empty()).is_empty());

        let g = GateMask::from_sorted(vec![0, 1]).unwrap();
        let v = apply_gate(&[0.0, 2.0], &g);
        assert_eq!(v.entries(), &[(1, 2.0)]);
    }

    #[test]
    fn dot_shared_dims_only() {
        let a = SparseVector::from_sorted_entries(vec![(1, 2.0), (3, 1.0)]).unwrap();
        let b = SparseVector::from_sorted_entries(vec![(3, 4.0), (5, 1.0)]).unwrap();
        assert_eq!(dot(&a, &b), 4.0);

        let c = SparseVector::from_sorted_entries(vec![(0, 1.0)]).unwrap();
        assert_eq!(dot(&a, &c), 0.0);
    }

    #[test]
    fn dot_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let dense_a: Vec<f64> = (0..64)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0.0..2.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let dense_b: Vec<f64> = (0..64)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0.0..2.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let a = SparseVector::from_dense(&dense_a).unwrap();
            let b = SparseVector::from_dense(&dense_b).unwrap();
            let expect: f64 = dense_a.iter().zip(&dense_b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let a = SparseVector::from_sorted_entries(vec![(1, 3.0), (2, 4.0)]).unwrap();
        let n = l2_normalize(&a).unwrap();
        assert!((n.entries()[0].1 - 0.6).abs() < 1e-12);
        assert!((n.entries()[1].1 - 0.8).abs() < 1e-12);

        let unit = SparseVector::from_sorted_entries(vec![(0, 1.0)]).unwrap();
        assert_eq!(l2_normalize(&unit).unwrap(), unit);

        assert!(matches!(
            l2_normalize(&SparseVector::empty()),
            Err(Error::NormalizeZeroVector)
        ));
    }

    #[test]
    fn from_sorted_entries_rejects_disorder() {
        assert!(SparseVector::from_sorted_entries(vec![(2, 1.0), (1, 1.0)]).is_err());
        assert!(SparseVector::from_sorted_entries(vec![(1, 1.0), (1, 1.0)]).is_err());
        assert!(SparseVector::from_sorted_entries(vec![(1, -1.0)]).is_err());
    }

    fn arb_sparse(vdim: u32) -> impl Strategy<Value = SparseVector> {
        proptest::collection::btree_map(0..vdim, 0.01f64..10.0, 0..12)
            .prop_map(|m| SparseVector::from_sorted_entries(m.into_iter().collect()).unwrap())
    }

    proptest! {
        #[test]
        fn dot_is_symmetric(a in arb_sparse(32), b in arb_sparse(32)) {
            prop_assert_eq!(dot(&a, &b), dot(&b, &a));
        }

        #[test]
        fn dot_scales_linearly(a in arb_sparse(32), b in arb_sparse(32), c in 0.01f64..8.0) {
            let scaled = b.scaled(c).unwrap();
            prop_assert!((dot(&a, &scaled) - c * dot(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn top_k_size_is_min(values in proptest::collection::vec(-5.0f64..5.0, 1..40), k in 0usize..50) {
            let g = top_k_dims(&values, k);
            prop_assert_eq!(g.len(), k.min(values.len()));
        }

        #[test]
        fn top_k_nesting(values in proptest::collection::vec(-5.0f64..5.0, 1..40), k1 in 0usize..40, extra in 0usize..10) {
            let k2 = k1 + extra;
            let g1 = top_k_dims(&values, k1);
            let g2 = top_k_dims(&values, k2);
            prop_assert!(g1.iter().all(|d| g2.contains(d)));
        }

        #[test]
        fn scaling_preserves_ranking(q in arb_sparse(24), c in 0.01f64..100.0) {
            // Rankings over a fixed doc set are invariant under positive
            // scaling of the query (ties by lower doc id). Exact-equality
            // ties scale to exact-equality ties.
            let docs: Vec<SparseVector> = (0..6u32)
                .map(|i| {
                    SparseVector::from_sorted_entries(
                        (0..24u32).filter(|d| (d + i) % 3 == 0).map(|d| (d, f64::from(d % 5 + 1))).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let rank = |qv: &SparseVector| {
                let mut order: Vec<usize> = (0..docs.len()).collect();
                order.sort_by(|&a, &b| {
                    dot(qv, &docs[b]).partial_cmp(&dot(qv, &docs[a])).unwrap().then(a.cmp(&b))
                });
                order
            };
            // Powers of two scale exactly in binary floating point.
            let exact = 2.0f64.powi((c.log2().round()) as i32);
            let scaled = q.scaled(exact).unwrap();
            prop_assert_eq!(rank(&q), rank(&scaled));
        }
    }
}
