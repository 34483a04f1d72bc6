//! Membership indicators and non-distinctiveness.
//!
//! For composite logits `v` (background first):
//! `mu_bg = softmax(v)[0]`, `mu_id = max softmax(v[1..])`, `mu_nd = mu_bg * mu_id`.
//! High `mu_nd` means the pixel is claimed by the background and by some class
//! at the same time.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::CompositeLogits;
use crate::imageio::{dequantize, quantize, write_gray};
use crate::numerics::{max_unchecked, softmax_into_unchecked};
use crate::par;
use crate::tensor::TensorField;

/// How `mu_id` reads the in-distribution softmax.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdSoftmaxMode {
    /// Softmax renormalized over the in-distribution components only.
    #[default]
    #[serde(rename = "sub")]
    SubVector,
    /// Restriction of the full k-way softmax to the in-distribution components.
    #[serde(rename = "full")]
    FullVector,
}

impl IdSoftmaxMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IdSoftmaxMode::SubVector => "sub",
            IdSoftmaxMode::FullVector => "full",
        }
    }
}

impl fmt::Display for IdSoftmaxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IdSoftmaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sub" => Ok(IdSoftmaxMode::SubVector),
            "full" => Ok(IdSoftmaxMode::FullVector),
            other => Err(Error::invalid(format!("unknown id-softmax mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembershipTriple {
    pub mu_id: f64,
    pub mu_bg: f64,
    pub mu_nd: f64,
}

/// Per-pixel membership for a composite vector; `scratch` needs `v.len()` slots.
#[inline]
pub fn membership_unchecked(v: &[f64], mode: IdSoftmaxMode, scratch: &mut [f64]) -> MembershipTriple {
    let k = v.len();
    let probs = &mut scratch[..k];
    softmax_into_unchecked(v, probs);
    let mu_bg = probs[0];
    let mu_id = match mode {
        IdSoftmaxMode::FullVector => max_unchecked(&probs[1..]),
        IdSoftmaxMode::SubVector => {
            // max of a softmax is exp(max - lse) = 1 / Σ exp(v_i - max)
            let m = max_unchecked(&v[1..]);
            let s: f64 = v[1..].iter().map(|x| (x - m).exp()).sum();
            1.0 / s
        }
    };
    MembershipTriple {
        mu_id,
        mu_bg,
        mu_nd: mu_bg * mu_id,
    }
}

pub fn membership(v: &CompositeLogits, mode: IdSoftmaxMode) -> MembershipTriple {
    let mut scratch = vec![0.0; v.as_slice().len()];
    membership_unchecked(v.as_slice(), mode, &mut scratch)
}

/// Three `(1, H, W)` fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMaps {
    pub mu_id: TensorField,
    pub mu_bg: TensorField,
    pub mu_nd: TensorField,
}

impl MembershipMaps {
    pub fn height(&self) -> usize {
        self.mu_nd.height()
    }

    pub fn width(&self) -> usize {
        self.mu_nd.width()
    }

    pub fn pixels(&self) -> usize {
        self.mu_nd.plane()
    }

    /// Pairwise sum of `mu_nd` over the image.
    pub fn nd_sum(&self) -> f64 {
        par::pairwise_sum(self.mu_nd.data())
    }
}

/// Applies [`membership`] at every pixel of a `(k, H, W)` composite field.
pub fn membership_field(logits: &TensorField, mode: IdSoftmaxMode) -> Result<MembershipMaps> {
    let (k, h, w) = logits.shape();
    if k < 2 {
        return Err(Error::invalid(format!(
            "membership needs at least 2 channels, got {k}"
        )));
    }
    // row tiles are independent, so the parallel result equals the serial one
    const TILE_ROWS: usize = 16;
    let tiles = par::map_range(h.div_ceil(TILE_ROWS), |t| {
        let pixels = t * TILE_ROWS * w..((t + 1) * TILE_ROWS).min(h) * w;
        let mut v = vec![0.0; k];
        let mut scratch = vec![0.0; k];
        pixels
            .map(|p| {
                logits.pixel_into(p, &mut v);
                membership_unchecked(&v, mode, &mut scratch)
            })
            .collect::<Vec<_>>()
    });
    let mut mu_id = TensorField::zeros(1, h, w);
    let mut mu_bg = TensorField::zeros(1, h, w);
    let mut mu_nd = TensorField::zeros(1, h, w);
    for (p, m) in tiles.into_iter().flatten().enumerate() {
        mu_id.data_mut()[p] = m.mu_id;
        mu_bg.data_mut()[p] = m.mu_bg;
        mu_nd.data_mut()[p] = m.mu_nd;
    }
    Ok(MembershipMaps { mu_id, mu_bg, mu_nd })
}

/// `100 * Σ sums / Σ counts`, with the sums combined pairwise in order.
pub fn pooled_mean_percent(sums: &[f64], counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if sums.is_empty() || total == 0 {
        return Err(Error::invalid("expected non-distinctiveness needs at least one pixel"));
    }
    Ok(100.0 * par::pairwise_sum(sums) / total as f64)
}

/// Expected Non-Distinctiveness over a dataset, as a percentage.
pub fn expected_nd(maps: &[MembershipMaps]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::invalid("expected non-distinctiveness of an empty dataset"));
    }
    if maps.iter().any(|m| m.pixels() == 0) {
        return Err(Error::invalid("membership map with zero pixels"));
    }
    let sums = par::map(maps, MembershipMaps::nd_sum);
    let counts: Vec<usize> = maps.iter().map(MembershipMaps::pixels).collect();
    pooled_mean_percent(&sums, &counts)
}

/// Output paths `<stem>_mu_{id,bg,nd}.png` inside `dir`.
pub fn membership_png_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{stem}_mu_id.png")),
        dir.join(format!("{stem}_mu_bg.png")),
        dir.join(format!("{stem}_mu_nd.png")),
    ]
}

/// Writes each indicator as an 8-bit grayscale PNG, `round(255 mu)` half up.
///
/// `mu_nd` is rendered from the product of the two rendered maps, which keeps
/// the files consistent to half a gray level; it differs from rounding
/// `mu_nd` directly by at most one level.
pub fn render_membership_png(
    maps: &MembershipMaps,
    dir: &Path,
    stem: &str,
    provenance: Option<&str>,
) -> Result<[PathBuf; 3]> {
    let paths = membership_png_paths(dir, stem);
    let (w, h) = (maps.width() as u32, maps.height() as u32);
    let [id, bg, nd] = rendered_bytes(maps);
    for (bytes, path) in [id, bg, nd].iter().zip(&paths) {
        write_gray(path, w, h, bytes, provenance)?;
    }
    Ok(paths)
}

/// Gray levels for `[mu_id, mu_bg, mu_nd]`.
pub fn rendered_bytes(maps: &MembershipMaps) -> [Vec<u8>; 3] {
    let id: Vec<u8> = maps.mu_id.data().iter().map(|v| quantize(*v)).collect();
    let bg: Vec<u8> = maps.mu_bg.data().iter().map(|v| quantize(*v)).collect();
    let nd = id
        .iter()
        .zip(&bg)
        .map(|(a, b)| quantize(dequantize(*a) * dequantize(*b)))
        .collect();
    [id, bg, nd]
}
