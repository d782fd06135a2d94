//! Latent-space attention: patch-local softmax attention between encoder
//! (query) and decoder (key/value) feature maps.

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, FeatureMap};

fn check_patch(side: usize, patch: usize) -> Result<()> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "patch size {patch} does not divide latent side {side}"
        )));
    }
    Ok(())
}

/// Softmax weights of `alpha * z` over one patch, written into `weights`.
#[inline]
fn patch_softmax(alpha: f64, patch: &[f64], weights: &mut [f64]) {
    let max = patch
        .iter()
        .map(|&z| alpha * z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (w, &z) in weights.iter_mut().zip(patch) {
        *w = (alpha * z - max).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

/// Gathers the `patch × patch` block of plane `c` that contains `(y, x)`.
#[inline]
fn gather_patch(kv: &FeatureMap, c: usize, y: usize, x: usize, patch: usize, out: &mut [f64]) {
    let (py, px) = (y - y % patch, x - x % patch);
    let mut t = 0;
    for dy in 0..patch {
        for dx in 0..patch {
            out[t] = kv.get(c, py + dy, px + dx);
            t += 1;
        }
    }
}

/// Patch attention map: every query value `alpha` attends over the aligned
/// `patch × patch` block `Z` of the key/value map in the same channel and
/// yields `softmax(alpha * Z) · Z`.
pub fn patch_attention(query: &FeatureMap, kv: &FeatureMap, patch: usize) -> Result<FeatureMap> {
    ensure_same_shape(query, kv, "patch attention")?;
    check_patch(query.height, patch)?;
    check_patch(query.width, patch)?;
    let mut out = FeatureMap::zeros(query.channels, query.height, query.width);
    let mut z = vec![0.0; patch * patch];
    let mut w = vec![0.0; patch * patch];
    for c in 0..query.channels {
        for y in 0..query.height {
            for x in 0..query.width {
                gather_patch(kv, c, y, x, patch, &mut z);
                patch_softmax(query.get(c, y, x), &z, &mut w);
                let beta = w.iter().zip(&z).map(|(a, b)| a * b).sum();
                out.set(c, y, x, beta);
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_query, grad_kv)` given the gradient of the attention map.
pub(crate) fn patch_attention_backward(
    query: &FeatureMap,
    kv: &FeatureMap,
    patch: usize,
    grad_out: &FeatureMap,
) -> (FeatureMap, FeatureMap) {
    let mut gq = FeatureMap::zeros(query.channels, query.height, query.width);
    let mut gkv = FeatureMap::zeros(kv.channels, kv.height, kv.width);
    let mut z = vec![0.0; patch * patch];
    let mut w = vec![0.0; patch * patch];
    for c in 0..query.channels {
        for y in 0..query.height {
            for x in 0..query.width {
                let g = grad_out.get(c, y, x);
                if g == 0.0 {
                    continue;
                }
                let alpha = query.get(c, y, x);
                gather_patch(kv, c, y, x, patch, &mut z);
                patch_softmax(alpha, &z, &mut w);
                let beta: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum();
                // d beta / d alpha = E_w[Z^2] - beta^2
                let second: f64 = w.iter().zip(&z).map(|(a, b)| a * b * b).sum();
                let i = gq.index(c, y, x);
                gq.data[i] += g * (second - beta * beta);
                // d beta / d Z_u = w_u (1 + alpha (Z_u - beta))
                let (py, px) = (y - y % patch, x - x % patch);
                let mut t = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let j = gkv.index(c, py + dy, px + dx);
                        gkv.data[j] += g * w[t] * (1.0 + alpha * (z[t] - beta));
                        t += 1;
                    }
                }
            }
        }
    }
    (gq, gkv)
}
