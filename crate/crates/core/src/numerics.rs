//! Numerically stable softmax kernels.
//!
//! Every kernel subtracts the maximum before exponentiating, so finite inputs
//! of any magnitude never overflow. Slice functions validate their input; the
//! `*_unchecked` variants are the per-pixel hot paths and assume a non-empty
//! finite slice.

use crate::error::{Error, Result};

/// A finite, non-empty logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_logits(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn logsumexp(&self) -> f64 {
        logsumexp_unchecked(&self.0)
    }

    pub fn softmax(&self) -> SimplexPoint {
        let mut out = vec![0.0; self.0.len()];
        softmax_into_unchecked(&self.0, &mut out);
        SimplexPoint(out)
    }

    pub fn log_softmax(&self) -> Vec<f64> {
        let lse = self.logsumexp();
        self.0.iter().map(|v| v - lse).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax_unchecked(&self.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// A point in the open probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates strict positivity and unit sum (1e-12 absolute).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("simplex point must be non-empty"));
        }
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0 || (*p == 1.0 && probs.len() == 1))) {
            return Err(Error::invalid("simplex components must lie in (0, 1)"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("simplex components sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_logits(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid("logit vector must be non-empty"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("logit vector contains a non-finite value"));
    }
    Ok(())
}

#[inline]
pub fn max_unchecked(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(v_i)` evaluated as `max + log Σ exp(v_i - max)`.
#[inline]
pub fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let m = max_unchecked(v);
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[inline]
pub fn softmax_into_unchecked(v: &[f64], out: &mut [f64]) {
    let m = max_unchecked(v);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    let inv = 1.0 / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Index of the largest component, lowest index on ties.
#[inline]
pub fn argmax_unchecked(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn logsumexp(v: &[f64]) -> Result<f64> {
    check_logits(v)?;
    Ok(logsumexp_unchecked(v))
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_logits(v)?;
    let mut out = vec![0.0; v.len()];
    softmax_into_unchecked(v, &mut out);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_logits(v)?;
    let lse = logsumexp_unchecked(v);
    Ok(v.iter().map(|x| x - lse).collect())
}

pub fn argmax_class(v: &[f64]) -> Result<usize> {
    check_logits(v)?;
    Ok(argmax_unchecked(v))
}

/// Central-difference gradient `(f(v + h e_i) - f(v - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, v: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut x = v.to_vec();
    let mut grad = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - LN2).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!(big.is_finite());
        assert!((big - (1000.0 + LN2)).abs() < 1e-12);
        assert!(matches!(logsumexp(&[]), Err(Error::InvalidArgument(_))));
        assert!(logsumexp(&[f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(s.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        for c in [-700.0, -3.5, 0.0, 12.0, 900.0] {
            let s = softmax(&[c; 5]).unwrap();
            assert!(s.iter().all(|p| (p - 0.2).abs() < 1e-12));
        }
        let target = [0.1, 0.2, 0.7];
        let logs: Vec<f64> = target.iter().map(|p: &f64| p.ln()).collect();
        let s = softmax(&logs).unwrap();
        for (a, b) in s.iter().zip(target) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        assert_eq!(log_softmax(&[0.0]).unwrap(), vec![0.0]);
        let l = log_softmax(&[0.0, 0.0]).unwrap();
        assert!(l.iter().all(|x| (x + LN2).abs() < 1e-15));
        // -ln(1 + e^-2) and -2 - ln(1 + e^-2)
        let l = log_softmax(&[3.0, 1.0]).unwrap();
        assert!((l[0] + 0.126_928_011_042_972_6).abs() < 1e-12);
        assert!((l[1] + 2.126_928_011_042_972_6).abs() < 1e-12);
        assert!((l[0] + 0.1269280).abs() < 1e-7);
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_class(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(argmax_class(&[0.5, 0.5]).unwrap(), 0);
        assert!(argmax_class(&[]).is_err());
    }

    #[test]
    fn argmax_invariant_under_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let k = rng.random_range(1..12);
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
            assert_eq!(argmax_class(&v).unwrap(), argmax_class(&softmax(&v).unwrap()).unwrap());
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.3, -2.0, 7.0], 1e-4).unwrap();
        assert!(g.iter().all(|d| (d - 1.0).abs() < 1e-8));
        let g = finite_diff_grad(|x| logsumexp_unchecked(x), &[0.0, 0.0], 1e-4).unwrap();
        assert!(g.iter().all(|d| (d - 0.5).abs() < 1e-8));
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| x[0], &[1.0], -1e-3).is_err());
    }

    #[test]
    fn lse_gradient_is_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let k = rng.random_range(1..10);
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fd = finite_diff_grad(|x| logsumexp_unchecked(x), &v, 1e-4).unwrap();
            let sm = softmax(&v).unwrap();
            for (a, b) in fd.iter().zip(&sm) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn newtypes_validate() {
        assert!(LogitVector::new(vec![]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
        let v = LogitVector::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(v.argmax(), 1);
        let s = v.softmax();
        assert!(SimplexPoint::new(s.into_vec()).is_ok());
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![0.0, 1.0]).is_err());
    }

    fn simplex_point() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-9f64..1.0, 1..16).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..32)
    }

    proptest! {
        #[test]
        fn surjectivity_round_trip(s in simplex_point()) {
            prop_assume!(s.iter().all(|p| *p >= 1e-9));
            let logs: Vec<f64> = s.iter().map(|p| p.ln()).collect();
            let back = softmax(&logs).unwrap();
            for (a, b) in back.iter().zip(&s) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn shift_invariance(v in logits(), c in -300.0f64..300.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn limiting_non_injectivity(a in -20.0f64..20.0, g1 in 50.0f64..400.0, g2 in 50.0f64..400.0) {
            prop_assume!(g1 != g2);
            let v = [a - g1, a, a, a - g1];
            let w = [a - g2, a, a, a - g2];
            let sv = softmax(&v).unwrap();
            let sw = softmax(&w).unwrap();
            for (x, y) in sv.iter().zip(&sw) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            prop_assert!(sv[1] + sv[2] >= 1.0 - 1e-9);
            prop_assert!((sv[1] - sv[2]).abs() <= 1e-15);
        }

        #[test]
        fn lse_dominates_max(v in logits()) {
            let lse = logsumexp(&v).unwrap();
            let m = max_unchecked(&v);
            prop_assert!(lse >= m);
            prop_assert!(lse <= m + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn log_softmax_nonpositive_and_consistent(v in logits()) {
            let l = log_softmax(&v).unwrap();
            let s = softmax(&v).unwrap();
            for (x, p) in l.iter().zip(&s) {
                prop_assert!(*x <= 0.0);
                prop_assert!((x.exp() - p).abs() <= 1e-12);
            }
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lse_approaches_max_with_gap() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 10.0, 40.0] {
            let excess = logsumexp(&[3.0, 3.0 - gap]).unwrap() - 3.0;
            assert!(excess < prev);
            prev = excess;
        }
        assert!(prev < 1e-15);
    }
}
