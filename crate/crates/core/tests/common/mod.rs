//! Independent reference implementations shared by the integration tests.
//!
//! Each oracle is written straight from the definition with plain loops and
//! shares no code with the library beyond data types.
#![allow(dead_code)]

use forgery_core::training::{loss_and_gradient, loss_value};
use forgery_core::{FeatureMap, ForgeryNet, Params, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn naive_l1(biases: &[Vec<f64>], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (b, &y) in biases.iter().zip(labels) {
        let mut sq = 0.0;
        for v in b {
            sq += v * v;
        }
        total += (1.0 - f64::from(y)) * sq;
    }
    total / biases.len() as f64
}

pub fn naive_l2(biases: &[Vec<f64>], labels: &[u8], margin: f64) -> f64 {
    let mut total = 0.0;
    for (b, &y) in biases.iter().zip(labels) {
        let mut sq = 0.0;
        for v in b {
            sq += v * v;
        }
        let gap = margin - sq.sqrt();
        let hinge = if gap > 0.0 { gap } else { 0.0 };
        total += f64::from(y) * hinge * hinge;
    }
    total / biases.len() as f64
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut sq = 0.0;
    for x in v {
        sq += x * x;
    }
    let n = sq.sqrt();
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Per-anchor loop over normalized vectors; anchors without a same-class partner are skipped.
pub fn naive_l3(biases: &[Vec<f64>], labels: &[u8], temperature: f64) -> f64 {
    let u: Vec<Vec<f64>> = biases.iter().map(|b| unit(b)).collect();
    let n = u.len();
    let mut sum = 0.0;
    let mut valid = 0usize;
    for i in 0..n {
        let mut partners = Vec::new();
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                partners.push(j);
            }
        }
        if partners.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(&u[i], &u[k]) / temperature).exp();
            }
        }
        let mut anchor = 0.0;
        for &j in &partners {
            let num = (dot(&u[i], &u[j]) / temperature).exp();
            anchor += (num / denom).ln();
        }
        sum += -anchor / partners.len() as f64;
        valid += 1;
    }
    if valid == 0 {
        0.0
    } else {
        sum / valid as f64
    }
}

pub fn naive_cross_entropy(probs: &[f64], labels: &[u8]) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(eps, 1.0 - eps);
        let y = f64::from(y);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / probs.len() as f64
}

/// Triple loop over channels, positions and patch cells.
pub fn naive_patch_attention(query: &FeatureMap, kv: &FeatureMap, patch: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(query.channels, query.height, query.width);
    for c in 0..query.channels {
        for y in 0..query.height {
            for x in 0..query.width {
                let alpha = query.get(c, y, x);
                let (py, px) = (y / patch * patch, x / patch * patch);
                let mut zs = Vec::new();
                for dy in 0..patch {
                    for dx in 0..patch {
                        zs.push(kv.get(c, py + dy, px + dx));
                    }
                }
                let top = zs.iter().map(|z| alpha * z).fold(f64::NEG_INFINITY, f64::max);
                let mut norm = 0.0;
                let mut acc = 0.0;
                for z in &zs {
                    let w = (alpha * z - top).exp();
                    norm += w;
                    acc += w * z;
                }
                out.set(c, y, x, acc / norm);
            }
        }
    }
    out
}

/// O(n²) Mann–Whitney count with ties credited one half.
pub fn pairwise_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn random_map(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
    FeatureMap::from_vec(c, h, w, data).unwrap()
}

pub struct GradCheck {
    pub worst_rel: f64,
    pub checked: usize,
    pub nonzero: usize,
    /// (index, analytic, numeric) of the worst entry
    pub worst_entry: Option<(usize, f64, f64)>,
}

/// Compares the analytic total-loss gradient against central differences for
/// every parameter. The relative error divides by `max(|analytic|, |numeric|,
/// abs_floor)`, so gradients smaller than the floor are held to an absolute
/// tolerance of `abs_floor` times the relative one. Central differences at
/// step `h` carry rounding noise near `eps * loss / h`, which the floor must
/// exceed.
pub fn finite_difference_check(
    net: &ForgeryNet,
    params: &Params,
    cfg: &TrainConfig,
    images: &[FeatureMap],
    labels: &[u8],
    step: f64,
    abs_floor: f64,
) -> GradCheck {
    let (_, analytic) = loss_and_gradient(net, params, cfg, images, labels).unwrap();
    let mut p = params.clone();
    let mut worst_rel: f64 = 0.0;
    let mut nonzero = 0;
    let mut worst_entry = None;
    for i in 0..p.len() {
        let orig = p.0[i];
        p.0[i] = orig + step;
        let up = loss_value(net, &p, cfg, images, labels).unwrap().total;
        p.0[i] = orig - step;
        let down = loss_value(net, &p, cfg, images, labels).unwrap().total;
        p.0[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let diff = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs());
        if scale > abs_floor {
            nonzero += 1;
        }
        let rel = diff / scale.max(abs_floor);
        if rel > worst_rel {
            worst_rel = rel;
            worst_entry = Some((i, analytic[i], numeric));
        }
    }
    GradCheck {
        worst_rel,
        checked: p.len(),
        nonzero,
        worst_entry,
    }
}
