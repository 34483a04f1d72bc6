//! Explicit and implicit background heads.
//!
//! Composite logits always put the background component at index 0 followed by
//! the in-distribution components. The explicit head passes the model's `k`
//! logits through unchanged. The implicit head takes `k - 1` in-distribution
//! logits and defines the background logit as `-logsumexp(v_id)`, so
//! `softmax(composite)[0] = 1 / (1 + S^2)` with `S = Σ exp(v_id)`.
//!
//! The implicit composite is not confined to `max >= 0` for `k > 2`:
//! `[-0.1, -0.1]` composes to `[-0.593..., -0.1, -0.1]`. What does hold is the
//! implication form: background wins the argmax, or holds more than half the
//! mass, only if every in-distribution logit is negative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp_unchecked, softmax_into_unchecked};

/// Which background parameterization a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Background is an independent logit channel.
    Explicit,
    /// Background logit is `-logsumexp` of the in-distribution logits.
    Implicit,
}

impl HeadKind {
    pub const ALL: [HeadKind; 2] = [HeadKind::Explicit, HeadKind::Implicit];

    /// Raw model channels needed for `num_classes` composite classes.
    pub fn raw_channels(self, num_classes: usize) -> usize {
        match self {
            HeadKind::Explicit => num_classes,
            HeadKind::Implicit => num_classes - 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Explicit => "explicit",
            HeadKind::Implicit => "implicit",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(HeadKind::Explicit),
            "implicit" => Ok(HeadKind::Implicit),
            other => Err(Error::invalid(format!("unknown head kind `{other}`"))),
        }
    }
}

/// In-distribution logits, length `k - 1 >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdLogits(Vec<f64>);

impl IdLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("in-distribution logits must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("in-distribution logits must be finite"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Background-first logits, length `k >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLogits(Vec<f64>);

impl CompositeLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "composite logits need at least 2 components, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("composite logits must be finite"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn background(&self) -> f64 {
        self.0[0]
    }

    pub fn in_distribution(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Writes `[-lse(v_id), v_id...]` into `out` (length `v_id.len() + 1`).
#[inline]
pub fn implicit_compose_into(v_id: &[f64], out: &mut [f64]) {
    out[0] = -logsumexp_unchecked(v_id);
    out[1..].copy_from_slice(v_id);
}

pub fn implicit_compose(v_id: &IdLogits) -> CompositeLogits {
    let mut out = vec![0.0; v_id.0.len() + 1];
    implicit_compose_into(&v_id.0, &mut out);
    CompositeLogits(out)
}

/// Gradient of `<g, implicit_compose(v_id)>` with respect to `v_id`.
///
/// `d v_bg / d v_id_i = -softmax(v_id)_i`, so `grad_i = g[i+1] - g[0] softmax(v_id)_i`.
pub fn implicit_backward(v_id: &IdLogits, g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != v_id.0.len() + 1 {
        return Err(Error::invalid(format!(
            "upstream gradient has length {}, expected {}",
            g.len(),
            v_id.0.len() + 1
        )));
    }
    let mut out = vec![0.0; v_id.0.len()];
    implicit_backward_into(&v_id.0, g, &mut out);
    Ok(out)
}

/// Unchecked form of [`implicit_backward`]; `out` doubles as softmax scratch.
#[inline]
pub fn implicit_backward_into(v_id: &[f64], g: &[f64], out: &mut [f64]) {
    softmax_into_unchecked(v_id, out);
    let g_bg = g[0];
    for (o, gi) in out.iter_mut().zip(&g[1..]) {
        *o = gi - g_bg * *o;
    }
}

/// `softmax(implicit_compose(v_id))[0]` in closed form, `1 / (1 + S^2)`.
///
/// Evaluated as a logistic of `2 lse(v_id)` so large `S` cannot overflow.
pub fn bg_membership_closed_form(v_id: &IdLogits) -> f64 {
    let two_log_s = 2.0 * logsumexp_unchecked(&v_id.0);
    1.0 / (1.0 + two_log_s.exp())
}

/// Turns raw model logits into composite logits for the given head.
pub fn apply_head(kind: HeadKind, raw: &[f64]) -> Result<CompositeLogits> {
    match kind {
        HeadKind::Explicit => CompositeLogits::new(raw.to_vec()),
        HeadKind::Implicit => Ok(implicit_compose(&IdLogits::new(raw.to_vec())?)),
    }
}

/// Per-pixel form of [`apply_head`]; `out` has the composite length.
#[inline]
pub fn apply_head_into(kind: HeadKind, raw: &[f64], out: &mut [f64]) {
    match kind {
        HeadKind::Explicit => out.copy_from_slice(raw),
        HeadKind::Implicit => implicit_compose_into(raw, out),
    }
}

/// Outcome of [`audit_restriction`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RestrictionAudit {
    pub checked: u64,
    /// Background won the argmax while some in-distribution logit was `>= 0`.
    pub argmax_violations: u64,
    /// Background mass exceeded 0.5 while some in-distribution logit was `>= 0`.
    pub half_mass_violations: u64,
    /// Largest gap between the softmax background mass and `1 / (1 + S^2)`.
    pub max_closed_form_error: f64,
}

impl RestrictionAudit {
    fn merge(mut self, other: Self) -> Self {
        self.checked += other.checked;
        self.argmax_violations += other.argmax_violations;
        self.half_mass_violations += other.half_mass_violations;
        self.max_closed_form_error = self.max_closed_form_error.max(other.max_closed_form_error);
        self
    }
}

/// Fuzzes the implicit head with `n` random in-distribution vectors.
///
/// Dimensions are uniform in `1..=max_dim`; each vector draws a scale in
/// `(0, max_magnitude]` and components uniformly in `[-scale, scale]`, so both
/// near-zero and saturated regimes are covered. Chunks are seeded from
/// `(seed, chunk)` so the result does not depend on the worker count.
pub fn audit_restriction(n: u64, max_dim: usize, max_magnitude: f64, seed: u64) -> RestrictionAudit {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CHUNK: u64 = 4096;
    let chunks = n.div_ceil(CHUNK) as usize;
    let parts = crate::par::map_range(chunks, |ci| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        let count = CHUNK.min(n - ci as u64 * CHUNK);
        let mut audit = RestrictionAudit::default();
        let mut v = Vec::with_capacity(max_dim);
        let mut comp = vec![0.0; max_dim + 1];
        let mut probs = vec![0.0; max_dim + 1];
        for _ in 0..count {
            let dim = rng.random_range(1..=max_dim);
            let scale = max_magnitude * rng.random_range(f64::EPSILON..=1.0);
            v.clear();
            v.extend((0..dim).map(|_| rng.random_range(-scale..=scale)));
            let comp = &mut comp[..=dim];
            let probs = &mut probs[..=dim];
            implicit_compose_into(&v, comp);
            softmax_into_unchecked(comp, probs);
            let all_negative = v.iter().all(|x| *x < 0.0);
            if crate::numerics::argmax_unchecked(comp) == 0 && !all_negative {
                audit.argmax_violations += 1;
            }
            if probs[0] > 0.5 && !all_negative {
                audit.half_mass_violations += 1;
            }
            let closed = 1.0 / (1.0 + (2.0 * logsumexp_unchecked(&v)).exp());
            audit.max_closed_form_error = audit.max_closed_form_error.max((probs[0] - closed).abs());
            audit.checked += 1;
        }
        audit
    });
    parts.into_iter().fold(RestrictionAudit::default(), RestrictionAudit::merge)
}
