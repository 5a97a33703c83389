//! Set functions on a finite ground set and their Lovász extension.
//!
//! A [`SetFunction`] maps subsets of `{0, .., p-1}` (passed as indicator
//! slices) to reals and must vanish on the empty set. The extension is
//! evaluated by sorting the input decreasingly and summing marginal gains
//! along the resulting chain of prefix sets; the gains form the gradient on
//! the linear piece containing the input.

use std::fmt;
use std::sync::Arc;

use crate::error::{check_finite, check_len, Error, Result};

/// Largest ground set accepted by [`is_submodular`] (the check visits `4^p` pairs).
pub const SUBMODULAR_CHECK_LIMIT: usize = 12;

const SUBMODULAR_TOL: f64 = 1e-12;

type EvalFn = dyn Fn(&[bool]) -> f64 + Send + Sync;

/// A real-valued function on subsets of a ground set of size `p`, normalized
/// so that the empty set maps to zero.
#[derive(Clone)]
pub struct SetFunction {
    ground_set_size: usize,
    eval: Arc<EvalFn>,
}

impl fmt::Debug for SetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SetFunction")
            .field("ground_set_size", &self.ground_set_size)
            .finish_non_exhaustive()
    }
}

impl SetFunction {
    /// Wraps `eval`, rejecting it unless `eval(∅) == 0`.
    pub fn new<F>(ground_set_size: usize, eval: F) -> Result<Self>
    where
        F: Fn(&[bool]) -> f64 + Send + Sync + 'static,
    {
        if ground_set_size == 0 {
            return Err(Error::InvalidInput("ground set must be nonempty".into()));
        }
        let empty = eval(&vec![false; ground_set_size]);
        if empty != 0.0 {
            return Err(Error::NonZeroEmptySet(empty));
        }
        Ok(Self {
            ground_set_size,
            eval: Arc::new(eval),
        })
    }

    /// `S ↦ Σ_{i∈S} w_i`.
    pub fn modular(weights: Vec<f64>) -> Result<Self> {
        let p = weights.len();
        Self::new(p, move |s| {
            s.iter()
                .zip(&weights)
                .filter(|(&inside, _)| inside)
                .map(|(_, w)| w)
                .sum()
        })
    }

    /// `S ↦ |S| / p`, the normalized Hamming loss.
    pub fn hamming(p: usize) -> Result<Self> {
        Self::new(p, move |s| {
            s.iter().filter(|&&b| b).count() as f64 / p as f64
        })
    }

    pub fn ground_set_size(&self) -> usize {
        self.ground_set_size
    }

    /// Evaluates the function on the subset with indicator `subset`.
    ///
    /// Panics if `subset.len()` differs from the ground set size.
    pub fn evaluate(&self, subset: &[bool]) -> f64 {
        assert_eq!(
            subset.len(),
            self.ground_set_size,
            "indicator length must match the ground set"
        );
        (self.eval)(subset)
    }

    fn evaluate_mask(&self, mask: u32, buf: &mut [bool]) -> f64 {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = mask & (1 << i) != 0;
        }
        (self.eval)(buf)
    }
}

/// A bijection on `{0, .., p-1}`; `order[k]` is the index placed at rank `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    /// Sorts indices by decreasing value. Equal values keep their original
    /// relative order.
    pub fn decreasing(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        Self { order }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidInput(format!(
                    "{order:?} is not a permutation"
                )));
            }
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.order.len()];
        for (rank, &i) in self.order.iter().enumerate() {
            inv[i] = rank;
        }
        Self { order: inv }
    }

    /// Gathers `values` into rank order: `out[k] = values[order[k]]`.
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| values[i]).collect()
    }

    /// Inverse of [`gather`](Self::gather): `out[order[k]] = ranked[k]`.
    pub fn scatter<T: Copy + Default>(&self, ranked: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); ranked.len()];
        for (&i, &v) in self.order.iter().zip(ranked) {
            out[i] = v;
        }
        out
    }
}

/// Value of a Lovász extension together with its gradient on the current
/// linear piece.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Evaluates the Lovász extension of `setfn` at `m` by walking the chain of
/// prefix sets of the decreasing sort of `m`. Costs `p` set-function calls.
pub fn lovasz_extension(setfn: &SetFunction, m: &[f64]) -> Result<ExtensionResult> {
    let p = setfn.ground_set_size();
    check_len(p, m.len())?;
    check_finite("m", m)?;

    let perm = Permutation::decreasing(m);
    let mut indicator = vec![false; p];
    let mut previous = 0.0;
    let mut previous_m = 0.0;
    let mut gradient = vec![0.0; p];
    let mut value = 0.0;
    for &i in perm.order() {
        indicator[i] = true;
        let current = setfn.evaluate(&indicator);
        gradient[i] = current - previous;
        // Σ m_i g_i summed by parts: Σ (m_(k) − m_(k+1)) F(prefix_k)
        value += (previous_m - m[i]) * previous;
        previous = current;
        previous_m = m[i];
    }
    value += previous_m * previous;
    Ok(ExtensionResult { value, gradient })
}

/// Evaluates the extension on the unit cube through the level-set integral
/// `∫₀¹ F({i : m_i > θ}) dθ`, summed exactly over the intervals between the
/// distinct values of `m`.
///
/// This deliberately shares no code with [`lovasz_extension`] so it can be
/// used to check it.
pub fn threshold_oracle(setfn: &SetFunction, m: &[f64]) -> Result<f64> {
    let p = setfn.ground_set_size();
    check_len(p, m.len())?;
    if let Some(i) = m.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput(format!(
            "threshold oracle needs m in [0,1]^p, m[{i}] = {}",
            m[i]
        )));
    }

    let mut levels: Vec<f64> = m.to_vec();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();

    let mut total = 0.0;
    let mut indicator = vec![false; p];
    for w in levels.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        for (b, &mi) in indicator.iter_mut().zip(m) {
            *b = mi > lo;
        }
        total += (hi - lo) * setfn.evaluate(&indicator);
    }
    Ok(total)
}

/// Exhaustively checks `F(A) + F(B) ≥ F(A ∪ B) + F(A ∩ B)` over all pairs of
/// subsets. Only ground sets up to [`SUBMODULAR_CHECK_LIMIT`] are accepted.
pub fn is_submodular(setfn: &SetFunction) -> Result<bool> {
    let p = setfn.ground_set_size();
    if p > SUBMODULAR_CHECK_LIMIT {
        return Err(Error::GroundSetTooLarge {
            size: p,
            limit: SUBMODULAR_CHECK_LIMIT,
        });
    }
    let n = 1u32 << p;
    let mut buf = vec![false; p];
    let table: Vec<f64> = (0..n).map(|s| setfn.evaluate_mask(s, &mut buf)).collect();

    for a in 0..n {
        for b in (a + 1)..n {
            let lhs = table[a as usize] + table[b as usize];
            let rhs = table[(a | b) as usize] + table[(a & b) as usize];
            if lhs < rhs - SUBMODULAR_TOL {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn jaccard(delta: Vec<bool>) -> SetFunction {
        crate::jaccard::jaccard_set_function(&delta).unwrap()
    }

    #[test]
    fn modular_extends_linearly() {
        let f = SetFunction::modular(vec![1.0, 2.0]).unwrap();
        let r = lovasz_extension(&f, &[0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(r.value, 1.7, epsilon = 1e-15);
        assert_eq!(r.gradient, vec![1.0, 2.0]);
    }

    #[test]
    fn hand_traced_jaccard_extension() {
        let f = jaccard(vec![true, false, true]);
        let m = [0.9, 0.5, 0.2];
        let r = lovasz_extension(&f, &m).unwrap();
        assert_abs_diff_eq!(r.value, 0.6, epsilon = 1e-15);
        for (g, want) in r.gradient.iter().zip([0.5, 1.0 / 6.0, 1.0 / 3.0]) {
            assert_abs_diff_eq!(*g, want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(threshold_oracle(&f, &m).unwrap(), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn extension_hits_vertex_values() {
        let f = jaccard(vec![true, false, true, true]);
        for mask in 0u32..16 {
            let s: Vec<bool> = (0..4).map(|i| mask & (1 << i) != 0).collect();
            let m: Vec<f64> = s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            assert_eq!(lovasz_extension(&f, &m).unwrap().value, f.evaluate(&s));
        }
    }

    #[test]
    fn oracle_corner_cases() {
        let f = jaccard(vec![true, false, false]);
        assert_eq!(threshold_oracle(&f, &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(
            threshold_oracle(&f, &[1.0; 3]).unwrap(),
            f.evaluate(&[true; 3])
        );
        assert!(threshold_oracle(&f, &[0.5, 1.5, 0.0]).is_err());
        assert!(threshold_oracle(&f, &[0.5, -0.1, 0.0]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = SetFunction::hamming(3).unwrap();
        assert!(matches!(
            lovasz_extension(&f, &[0.1, 0.2]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(lovasz_extension(&f, &[0.1, f64::NAN, 0.2]).is_err());
        assert!(matches!(
            SetFunction::new(2, |_| 1.0),
            Err(Error::NonZeroEmptySet(_))
        ));
    }

    #[test]
    fn submodularity_checks() {
        let card = SetFunction::new(5, |s| s.iter().filter(|&&b| b).count() as f64).unwrap();
        assert!(is_submodular(&card).unwrap());
        let square = SetFunction::new(5, |s| {
            let k = s.iter().filter(|&&b| b).count() as f64;
            k * k
        })
        .unwrap();
        assert!(!is_submodular(&square).unwrap());
        let big = SetFunction::hamming(13).unwrap();
        assert!(matches!(
            is_submodular(&big),
            Err(Error::GroundSetTooLarge { size: 13, limit: 12 })
        ));
    }

    #[test]
    fn permutation_round_trip() {
        let perm = Permutation::decreasing(&[0.2, 0.9, 0.2, 0.5]);
        assert_eq!(perm.order(), &[1, 3, 0, 2]);
        let inv = perm.inverse();
        let composed: Vec<usize> = perm.order().iter().map(|&i| inv.order()[i]).collect();
        assert_eq!(composed, vec![0, 1, 2, 3]);
        let vals = [10, 20, 30, 40];
        assert_eq!(perm.scatter(&perm.gather(&vals)), vals.to_vec());
        assert!(Permutation::from_order(vec![0, 0, 1]).is_err());
    }
}
