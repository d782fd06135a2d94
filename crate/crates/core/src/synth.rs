//! Deterministic synthetic benchmark: a tightly clustered "real" image
//! distribution and four local tampering families.
//!
//! Every sample is a pure function of `(seed, split, index)`. Pixel values
//! are quantised to 8 bits at generation time so PNG round trips are exact.

pub mod io;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Splice,
    Warp,
    Colorshift,
    Texture,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Splice, Family::Warp, Family::Colorshift, Family::Texture];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Splice => "splice",
            Family::Warp => "warp",
            Family::Colorshift => "colorshift",
            Family::Texture => "texture",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Family::Splice => 11,
            Family::Warp => 12,
            Family::Colorshift => 13,
            Family::Texture => 14,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Samples per class per family in each split.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub families: Vec<Family>,
    pub seed: u64,
    /// Inclusive range of the tampered area as a fraction of the image.
    pub tamper_area_frac: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_train: 400,
            n_val: 100,
            n_test: 100,
            families: vec![Family::Splice],
            seed: 0,
            tamper_area_frac: (0.05, 0.25),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "data.image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        if self.families.is_empty() {
            return Err(Error::Config("data.families must name at least one family".into()));
        }
        let (lo, hi) = self.tamper_area_frac;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "data.tamper_area range ({lo}, {hi}) must satisfy 0 < min <= max < 1"
            )));
        }
        let area = (self.image_size * self.image_size) as f64;
        if (hi * area).floor() < (lo * area).ceil() {
            return Err(Error::Config(format!(
                "no whole-pixel tamper area fits ({lo}, {hi}) at size {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub split: Split,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: FeatureMap,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub family: Option<Family>,
    /// Row-major `H × W` tamper mask of 0/1 values; all zero for reals.
    pub mask: Vec<u8>,
    pub provenance: Provenance,
}

impl SyntheticSample {
    pub fn family_name(&self) -> &'static str {
        self.family.map_or("none", Family::as_str)
    }

    /// File stem used in the on-disk layout, e.g. `splice_00012`.
    pub fn stem(&self) -> String {
        let prefix = self.family.map_or("real", Family::as_str);
        format!("{prefix}_{:05}", self.provenance.index)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, tags…)` coordinate.
pub(crate) fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const REAL_TAG: u64 = 1;
const BASE_TAG: u64 = 2;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Debug, Clone, Copy)]
struct RealParams {
    cx: f64,
    cy: f64,
    sigma: f64,
    gain: f64,
    hue: f64,
}

impl RealParams {
    const TEMPLATE: Self = Self {
        cx: 0.5,
        cy: 0.46,
        sigma: 0.3,
        gain: 1.0,
        hue: 0.0,
    };

    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            cx: 0.5 + rng.random_range(-0.08..0.08),
            cy: 0.46 + rng.random_range(-0.08..0.08),
            sigma: 0.3 + rng.random_range(-0.03..0.03),
            gain: 1.0 + rng.random_range(-0.06..0.06),
            hue: rng.random_range(-0.04..0.04),
        }
    }
}

const FACE: [f64; 3] = [0.78, 0.58, 0.46];
const BACKGROUND: [f64; 3] = [0.22, 0.26, 0.34];
const HUE_AXIS: [f64; 3] = [1.0, 0.0, -1.0];

/// Fixed low-frequency texture shared by every real image.
fn texture_field(c: usize, u: f64, v: f64) -> f64 {
    use std::f64::consts::TAU;
    0.035 * (TAU * (1.5 * u + 0.5 * v) + c as f64).sin() + 0.025 * (TAU * (0.7 * u - 1.2 * v)).cos()
}

fn render_real(size: usize, p: RealParams) -> FeatureMap {
    let mut img = FeatureMap::zeros(CHANNELS, size, size);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let v = (y as f64 + 0.5) / s;
            let r2 = (u - p.cx).powi(2) + (v - p.cy).powi(2);
            let falloff = (-r2 / (2.0 * p.sigma * p.sigma)).exp();
            for c in 0..CHANNELS {
                let face = FACE[c] * p.gain + p.hue * HUE_AXIS[c];
                let val = BACKGROUND[c] + (face - BACKGROUND[c]) * falloff + texture_field(c, u, v);
                img.set(c, y, x, quantize(val));
            }
        }
    }
    img
}

/// Mean pixel value of the jitter-free real template; the population of real
/// samples is centred on it.
pub fn real_template_mean(size: usize) -> f64 {
    render_real(size, RealParams::TEMPLATE).mean()
}

fn real_image(spec: &SyntheticSpec, rng: &mut impl Rng) -> FeatureMap {
    render_real(spec.image_size, RealParams::draw(rng))
}

pub fn gen_real(spec: &SyntheticSpec, split: Split, index: usize) -> SyntheticSample {
    let mut rng = stream(spec.seed, &[split.tag(), REAL_TAG, index as u64]);
    let size = spec.image_size;
    SyntheticSample {
        image: real_image(spec, &mut rng),
        label: 0,
        family: None,
        mask: vec![0; size * size],
        provenance: Provenance {
            seed: spec.seed,
            split,
            index,
        },
    }
}

/// A contiguous axis-aligned rectangle whose area fraction lies in the configured range.
pub(crate) fn sample_rect_mask(size: usize, range: (f64, f64), rng: &mut impl Rng) -> Vec<u8> {
    let area = (size * size) as f64;
    loop {
        let frac = rng.random_range(range.0..=range.1);
        let aspect: f64 = rng.random_range(0.5..2.0);
        let w = ((frac * area * aspect).sqrt().round() as usize).clamp(1, size);
        let h = ((frac * area / w as f64).round() as usize).clamp(1, size);
        let got = (w * h) as f64 / area;
        if got < range.0 || got > range.1 {
            continue;
        }
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let mut mask = vec![0u8; size * size];
        for y in y0..y0 + h {
            mask[y * size + x0..y * size + x0 + w].fill(1);
        }
        return mask;
    }
}

fn bilinear_sample(img: &FeatureMap, c: usize, y: f64, x: f64) -> f64 {
    let max = (img.height - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn signed(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Applies `family` inside `mask` only; pixels outside stay bit-identical to `base`.
pub(crate) fn tamper(
    spec: &SyntheticSpec,
    base: &FeatureMap,
    mask: &[u8],
    family: Family,
    rng: &mut impl Rng,
) -> FeatureMap {
    use std::f64::consts::TAU;
    let size = base.height;
    let mut out = base.clone();
    let inside = |y: usize, x: usize| mask[y * size + x] == 1;
    match family {
        Family::Splice => {
            let donor = real_image(spec, rng);
            let reach = (size / 4).max(3) as i64;
            let mut offset = || {
                let d = rng.random_range(2..=reach);
                if rng.random_bool(0.5) {
                    d
                } else {
                    -d
                }
            };
            let (dy, dx) = (offset(), offset());
            let alpha = rng.random_range(0.75..1.0);
            let last = size as i64 - 1;
            for y in 0..size {
                for x in 0..size {
                    if !inside(y, x) {
                        continue;
                    }
                    let sy = (y as i64 + dy).clamp(0, last) as usize;
                    let sx = (x as i64 + dx).clamp(0, last) as usize;
                    for c in 0..CHANNELS {
                        let v = (1.0 - alpha) * base.get(c, y, x) + alpha * donor.get(c, sy, sx);
                        out.set(c, y, x, quantize(v));
                    }
                }
            }
        }
        Family::Warp => {
            let amp = rng.random_range(1.5..3.0);
            let wavelength = rng.random_range(4.0..8.0);
            let (p1, p2) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            for y in 0..size {
                for x in 0..size {
                    if !inside(y, x) {
                        continue;
                    }
                    let sy = y as f64 + amp * (TAU * x as f64 / wavelength + p1).sin();
                    let sx = x as f64 + amp * (TAU * y as f64 / wavelength + p2).cos();
                    for c in 0..CHANNELS {
                        out.set(c, y, x, quantize(bilinear_sample(base, c, sy, sx)));
                    }
                }
            }
        }
        Family::Colorshift => {
            let gains: Vec<f64> = (0..CHANNELS).map(|_| 1.0 + signed(rng, 0.1, 0.25)).collect();
            let shift = signed(rng, 0.02, 0.06);
            for y in 0..size {
                for x in 0..size {
                    if !inside(y, x) {
                        continue;
                    }
                    for c in 0..CHANNELS {
                        let v = base.get(c, y, x) * gains[c] + shift * HUE_AXIS[c];
                        out.set(c, y, x, quantize(v));
                    }
                }
            }
        }
        Family::Texture => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    let freq = rng.random_range(0.2..0.45);
                    let theta = rng.random_range(0.0..TAU);
                    (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..TAU), rng.random_range(0.5..1.0))
                })
                .collect();
            let norm: f64 = waves.iter().map(|w| w.3).sum();
            let amp = rng.random_range(0.05..0.12);
            let tint: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(0.8..1.2)).collect();
            for y in 0..size {
                for x in 0..size {
                    if !inside(y, x) {
                        continue;
                    }
                    let noise: f64 = waves
                        .iter()
                        .map(|&(fx, fy, ph, w)| w * (TAU * (fx * x as f64 + fy * y as f64) + ph).sin())
                        .sum::<f64>()
                        / norm;
                    for c in 0..CHANNELS {
                        out.set(c, y, x, quantize(base.get(c, y, x) + amp * tint[c] * noise));
                    }
                }
            }
        }
    }
    out
}

/// A fake sample plus the untouched base real image it was derived from.
pub fn gen_fake_with_base(
    spec: &SyntheticSpec,
    family: Family,
    split: Split,
    index: usize,
) -> Result<(SyntheticSample, FeatureMap)> {
    if !spec.families.contains(&family) {
        return Err(Error::Config(format!("family '{family}' is not enabled in this spec")));
    }
    let mut rng = stream(spec.seed, &[split.tag(), BASE_TAG, family.tag(), index as u64]);
    let base = real_image(spec, &mut rng);
    loop {
        let mask = sample_rect_mask(spec.image_size, spec.tamper_area_frac, &mut rng);
        let image = tamper(spec, &base, &mask, family, &mut rng);
        // quantisation can swallow a very weak transform; redraw until visible
        if image != base {
            let sample = SyntheticSample {
                image,
                label: 1,
                family: Some(family),
                mask,
                provenance: Provenance {
                    seed: spec.seed,
                    split,
                    index,
                },
            };
            return Ok((sample, base));
        }
    }
}

pub fn gen_fake(spec: &SyntheticSpec, family: Family, split: Split, index: usize) -> Result<SyntheticSample> {
    gen_fake_with_base(spec, family, split, index).map(|(s, _)| s)
}

/// All samples of one split: `count` reals followed by `count` fakes per family.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let n = spec.count(split);
    let mut out = Vec::with_capacity(n * (1 + spec.families.len()));
    out.extend((0..n).map(|i| gen_real(spec, split, i)));
    for &family in &spec.families {
        for i in 0..n {
            out.push(gen_fake(spec, family, split, i)?);
        }
    }
    Ok(out)
}

/// Random horizontal flip and random erasing, each with probability 1/2.
pub fn augment(image: &FeatureMap, rng: &mut impl Rng) -> FeatureMap {
    let mut out = if rng.random_bool(0.5) {
        image.flip_horizontal()
    } else {
        image.clone()
    };
    if rng.random_bool(0.5) {
        let (h, w) = (out.height, out.width);
        let area = (h * w) as f64;
        let rect = loop {
            let frac = rng.random_range(0.02..=0.10);
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rw = ((frac * area * aspect).sqrt().round() as usize).clamp(1, w);
            let rh = ((frac * area / rw as f64).round() as usize).clamp(1, h);
            let got = (rw * rh) as f64 / area;
            if (0.02..=0.10).contains(&got) {
                break (rw, rh);
            }
        };
        let (rw, rh) = rect;
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let fill = quantize(out.mean());
        for c in 0..out.channels {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    out.set(c, y, x, fill);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(families: Vec<Family>) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 4,
            n_val: 2,
            n_test: 2,
            families,
            seed: 17,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn real_samples_are_deterministic() {
        let s = spec(vec![Family::Splice]);
        let a = gen_real(&s, Split::Train, 3);
        let b = gen_real(&s, Split::Train, 3);
        assert_eq!(a, b);
        assert_eq!(a.label, 0);
        assert!(a.mask.iter().all(|&m| m == 0));
        assert_ne!(a.image, gen_real(&s, Split::Val, 3).image);
    }

    #[test]
    fn tampering_is_local() {
        let s = spec(Family::ALL.to_vec());
        for family in Family::ALL {
            for i in 0..20 {
                let (fake, base) = gen_fake_with_base(&s, family, Split::Test, i).unwrap();
                assert_eq!(fake.label, 1);
                assert!(fake.mask.contains(&1));
                let plane = s.image_size * s.image_size;
                let mut changed = false;
                for (j, (a, b)) in fake.image.data.iter().zip(&base.data).enumerate() {
                    if fake.mask[j % plane] == 0 {
                        assert_eq!(a, b, "{family} changed a pixel outside its mask");
                    } else if a != b {
                        changed = true;
                    }
                }
                assert!(changed);
            }
        }
    }

    #[test]
    fn disabled_family_is_rejected() {
        let s = spec(vec![Family::Warp]);
        assert!(matches!(gen_fake(&s, Family::Splice, Split::Train, 0), Err(Error::Config(_))));
        assert!("blur".parse::<Family>().is_err());
    }

    #[test]
    fn split_layout_and_balance() {
        let s = spec(vec![Family::Splice, Family::Texture]);
        let train = generate_split(&s, Split::Train).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(train.iter().filter(|x| x.label == 0).count(), 4);
        assert_eq!(train.iter().filter(|x| x.family == Some(Family::Texture)).count(), 4);
    }

    #[test]
    fn augment_preserves_shape() {
        let s = spec(vec![Family::Splice]);
        let img = gen_real(&s, Split::Train, 0).image;
        let mut rng = stream(1, &[2]);
        for _ in 0..50 {
            assert_eq!(augment(&img, &mut rng).shape(), img.shape());
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(vec![]);
        assert!(s.validate().is_err());
        s.families = vec![Family::Splice];
        s.tamper_area_frac = (0.3, 0.2);
        assert!(s.validate().is_err());
    }

    #[test]
    fn families_differ_on_a_shared_base() {
        let s = spec(Family::ALL.to_vec());
        for i in 0..1000u64 {
            let mut rng = stream(99, &[i]);
            let base = real_image(&s, &mut rng);
            let mask = sample_rect_mask(s.image_size, s.tamper_area_frac, &mut rng);
            let outs: Vec<FeatureMap> = Family::ALL
                .iter()
                .map(|&f| tamper(&s, &base, &mask, f, &mut stream(7, &[i, f.tag()])))
                .collect();
            for a in 0..outs.len() {
                for b in a + 1..outs.len() {
                    assert_ne!(outs[a], outs[b], "trial {i}");
                }
            }
        }
    }
}
