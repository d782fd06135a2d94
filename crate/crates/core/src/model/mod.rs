//! Auto-encoder with multi-scale latent taps, bias computation, latent-space
//! attention and the MLP head, composed into one differentiable forward pass.
//!
//! Every operation works per sample; a batch is a slice of [`FeatureMap`]s and
//! no state is shared between its rows.

pub mod layers;
pub mod lsa;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, FeatureMap};
use layers::{sigmoid, Conv};

pub use lsa::patch_attention;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub num_scales: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    pub patch_size: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            num_scales: 3,
            base_channels: 8,
            bottleneck_channels: 32,
            patch_size: 2,
            mlp_hidden: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("num_scales", self.num_scales),
            ("base_channels", self.base_channels),
            ("bottleneck_channels", self.bottleneck_channels),
            ("patch_size", self.patch_size),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        let factor = 1usize
            .checked_shl(self.num_scales as u32)
            .filter(|f| *f <= self.image_size)
            .ok_or_else(|| Error::Config("model.num_scales too large for image_size".into()))?;
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "model.image_size {} is not divisible by 2^{}",
                self.image_size, self.num_scales
            )));
        }
        let side = self.latent_side();
        if !side.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "model.patch_size {} does not divide bottleneck side {side}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Spatial side of the bottleneck `z`.
    pub fn latent_side(&self) -> usize {
        self.image_size >> self.num_scales
    }

    /// Spatial side of the encoder tap `z_k`.
    pub fn scale_side(&self, k: usize) -> usize {
        self.image_size >> (k + 1)
    }

    pub fn scale_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }
}

/// What the classifier consumes; selects the ablation variant of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Raw input image, the auto-encoder is bypassed.
    Input,
    /// Reconstruction `x_o`.
    Reconstruction,
    /// Bias image `|x - x_o|`.
    Bias,
    /// Bias image modulated by the latent-space attention mask.
    AttendedBias,
}

/// Flat parameter vector. Layers index into it by offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Params(pub Vec<f64>);

impl Params {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, len: usize, init: Init) -> usize {
        let offset = self.total;
        self.blocks.push(ParamBlock {
            name,
            offset,
            len,
            init,
        });
        self.total += len;
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, transposed: bool) -> Conv {
        let area = kernel * kernel;
        let weight = self.push(
            format!("{name}.weight"),
            cin * cout * area,
            Init::Glorot {
                fan_in: cin * area,
                fan_out: cout * area,
            },
        );
        let bias = self.push(format!("{name}.bias"), cout, Init::Zero);
        Conv {
            cin,
            cout,
            kernel,
            stride,
            pad,
            transposed,
            weight,
            bias,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    inputs: usize,
    hidden: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Encoder taps `z_k`, bottleneck `z` and decoder taps `z'_k`, index-aligned by resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid {
    pub encoder_feats: Vec<FeatureMap>,
    pub bottleneck: FeatureMap,
    pub decoder_feats: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
struct TraceCache {
    pooled_enc: Vec<FeatureMap>,
    pooled_dec: Vec<FeatureMap>,
    queries: Vec<FeatureMap>,
    keys: Vec<FeatureMap>,
    hidden_pre: Vec<f64>,
}

/// Every intermediate of the forward pass for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub input: FeatureMap,
    pub reconstruction: FeatureMap,
    pub bias: FeatureMap,
    pub pyramid: LatentPyramid,
    pub attention: FeatureMap,
    /// Single-channel mask in (0, 1) at image resolution.
    pub mask: FeatureMap,
    pub fused: FeatureMap,
    pub prob: f64,
    cache: TraceCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBundle {
    pub mode: ForwardMode,
    pub samples: Vec<SampleTrace>,
}

impl ForwardBundle {
    pub fn probs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.prob).collect()
    }

    pub fn biases(&self) -> Vec<&FeatureMap> {
        self.samples.iter().map(|s| &s.bias).collect()
    }
}

/// Elementwise `|x - x_o|`.
pub fn compute_bias(input: &FeatureMap, reconstruction: &FeatureMap) -> Result<FeatureMap> {
    ensure_same_shape(input, reconstruction, "bias")?;
    Ok(FeatureMap {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input
            .data
            .iter()
            .zip(&reconstruction.data)
            .map(|(a, b)| (a - b).abs())
            .collect(),
    })
}

/// Collapses `s` to one channel, upsamples it bilinearly to the bias
/// resolution and squashes it with a sigmoid. Returns `(mask, mask ⊙ bias)`.
pub fn apply_attention(attention: &FeatureMap, bias: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    if attention.height != attention.width || attention.channels == 0 {
        return Err(Error::InvalidInput(format!(
            "attention map must be square, got {:?}",
            attention.shape()
        )));
    }
    let side = attention.height;
    let mut mean = vec![0.0; side * side];
    for c in 0..attention.channels {
        for (m, v) in mean.iter_mut().zip(attention.plane(c)) {
            *m += v;
        }
    }
    let inv = 1.0 / attention.channels as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let up = layers::bilinear_resize(&mean, side, bias.height, bias.width);
    let mask = FeatureMap {
        channels: 1,
        height: bias.height,
        width: bias.width,
        data: up.into_iter().map(sigmoid).collect(),
    };
    let mut fused = bias.clone();
    for c in 0..fused.channels {
        for (v, m) in fused.plane_mut(c).iter_mut().zip(&mask.data) {
            *v *= m;
        }
    }
    Ok((mask, fused))
}

/// The full network: layer geometry plus the parameter layout.
#[derive(Debug, Clone)]
pub struct ForgeryNet {
    config: ModelConfig,
    encoder: Vec<Conv>,
    bottleneck: Conv,
    decoder_entry: Conv,
    /// `decoder_up[k]` maps `z'_{k+1}` to `z'_k`.
    decoder_up: Vec<Conv>,
    output: Conv,
    query_proj: Vec<Conv>,
    key_proj: Vec<Conv>,
    mlp: Mlp,
    blocks: Vec<ParamBlock>,
    n_params: usize,
}

impl ForgeryNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_scales;
        let cz = config.bottleneck_channels;
        let mut b = LayoutBuilder::default();
        let mut encoder = Vec::with_capacity(n);
        let mut cin = config.in_channels;
        for k in 0..n {
            let cout = config.scale_channels(k);
            encoder.push(b.conv(&format!("encoder.{k}"), cin, cout, 3, 2, 1, false));
            cin = cout;
        }
        let bottleneck = b.conv("bottleneck", cin, cz, 1, 1, 0, false);
        let decoder_entry = b.conv("decoder.entry", cz, config.scale_channels(n - 1), 3, 1, 1, false);
        let mut decoder_up = Vec::with_capacity(n.saturating_sub(1));
        for k in 0..n - 1 {
            decoder_up.push(b.conv(
                &format!("decoder.up{k}"),
                config.scale_channels(k + 1),
                config.scale_channels(k),
                4,
                2,
                1,
                true,
            ));
        }
        let output = b.conv("decoder.out", config.scale_channels(0), config.in_channels, 4, 2, 1, true);
        let mut query_proj = Vec::with_capacity(n);
        let mut key_proj = Vec::with_capacity(n);
        for k in 0..n {
            let ck = config.scale_channels(k);
            query_proj.push(b.conv(&format!("lsa.query{k}"), ck, cz, 1, 1, 0, false));
            key_proj.push(b.conv(&format!("lsa.key{k}"), ck, cz, 1, 1, 0, false));
        }
        let inputs = config.image_len();
        let hidden = config.mlp_hidden;
        let w1 = b.push(
            "classifier.hidden.weight".into(),
            inputs * hidden,
            Init::Glorot {
                fan_in: inputs,
                fan_out: hidden,
            },
        );
        let b1 = b.push("classifier.hidden.bias".into(), hidden, Init::Zero);
        let w2 = b.push(
            "classifier.out.weight".into(),
            hidden,
            Init::Glorot {
                fan_in: hidden,
                fan_out: 1,
            },
        );
        let b2 = b.push("classifier.out.bias".into(), 1, Init::Zero);
        Ok(Self {
            config,
            encoder,
            bottleneck,
            decoder_entry,
            decoder_up,
            output,
            query_proj,
            key_proj,
            mlp: Mlp {
                inputs,
                hidden,
                w1,
                b1,
                w2,
                b2,
            },
            blocks: b.blocks,
            n_params: b.total,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn param_blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Seeded Glorot-uniform weights with zero biases.
    pub fn init_params(&self) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut data = vec![0.0; self.n_params];
        for block in &self.blocks {
            if let Init::Glorot { fan_in, fan_out } = block.init {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut data[block.offset..block.offset + block.len] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Params(data)
    }

    pub fn zero_params(&self) -> Params {
        Params(vec![0.0; self.n_params])
    }

    /// Parameter block range by name, e.g. `"lsa.query0.weight"`.
    pub fn block(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.offset..b.offset + b.len)
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        if let Some(i) = params.0.iter().position(|v| !v.is_finite()) {
            let name = self
                .blocks
                .iter()
                .find(|b| (b.offset..b.offset + b.len).contains(&i))
                .map_or("?", |b| b.name.as_str());
            return Err(Error::Numerical(format!("parameter {i} ({name}) is not finite")));
        }
        Ok(())
    }

    pub fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let c = &self.config;
        if x.shape() != (c.in_channels, c.image_size, c.image_size) {
            return Err(Error::InvalidInput(format!(
                "expected image of shape ({}, {}, {}), got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                x.shape()
            )));
        }
        Ok(())
    }

    fn reconstruct_one(&self, p: &[f64], x: &FeatureMap) -> (FeatureMap, LatentPyramid) {
        let mut encoder_feats = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for conv in &self.encoder {
            encoder_feats.push(conv.forward(p, h).map(f64::tanh));
            h = encoder_feats.last().unwrap();
        }
        let bottleneck = self.bottleneck.forward(p, h).map(f64::tanh);
        let n = self.config.num_scales;
        let mut decoder_feats = vec![FeatureMap::zeros(0, 0, 0); n];
        decoder_feats[n - 1] = self.decoder_entry.forward(p, &bottleneck).map(f64::tanh);
        for k in (0..n - 1).rev() {
            decoder_feats[k] = self.decoder_up[k].forward(p, &decoder_feats[k + 1]).map(f64::tanh);
        }
        let reconstruction = self.output.forward(p, &decoder_feats[0]).map(sigmoid);
        (
            reconstruction,
            LatentPyramid {
                encoder_feats,
                bottleneck,
                decoder_feats,
            },
        )
    }

    /// Reconstruction `x_o = D(E(x))` together with the latent pyramid, per sample.
    pub fn reconstruct(&self, params: &Params, batch: &[FeatureMap]) -> Result<Vec<(FeatureMap, LatentPyramid)>> {
        self.check_params(params)?;
        batch
            .iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(self.reconstruct_one(&params.0, x))
            })
            .collect()
    }

    fn check_pyramid(&self, pyramid: &LatentPyramid) -> Result<()> {
        let n = self.config.num_scales;
        if pyramid.encoder_feats.len() != n || pyramid.decoder_feats.len() != n {
            return Err(Error::State(format!(
                "latent pyramid has {} encoder and {} decoder levels, expected {n}",
                pyramid.encoder_feats.len(),
                pyramid.decoder_feats.len()
            )));
        }
        for k in 0..n {
            let side = self.config.scale_side(k);
            let ch = self.config.scale_channels(k);
            for f in [&pyramid.encoder_feats[k], &pyramid.decoder_feats[k]] {
                if f.shape() != (ch, side, side) {
                    return Err(Error::State(format!(
                        "latent level {k} has shape {:?}, expected ({ch}, {side}, {side})",
                        f.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    fn fuse_one(&self, p: &[f64], pyramid: &LatentPyramid) -> (FeatureMap, Vec<FeatureMap>, Vec<FeatureMap>, Vec<FeatureMap>, Vec<FeatureMap>) {
        let side = self.config.latent_side();
        let patch = self.config.patch_size;
        let mut s = pyramid.bottleneck.clone();
        let n = self.config.num_scales;
        let (mut pe, mut pd, mut qs, mut ks) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for k in 0..n {
            let pooled_q = layers::adaptive_avg_pool(&pyramid.encoder_feats[k], side);
            let pooled_k = layers::adaptive_avg_pool(&pyramid.decoder_feats[k], side);
            let q = self.query_proj[k].forward(p, &pooled_q);
            let kv = self.key_proj[k].forward(p, &pooled_k);
            // shapes are fixed by the validated config
            let sk = patch_attention(&q, &kv, patch).expect("validated patch size");
            s.add_assign(&sk);
            pe.push(pooled_q);
            pd.push(pooled_k);
            qs.push(q);
            ks.push(kv);
        }
        (s, pe, pd, qs, ks)
    }

    /// `s = Σ_k LSA(pool(z_k), pool(z'_k)) + z`.
    pub fn lsa_fuse(&self, params: &Params, pyramid: &LatentPyramid) -> Result<FeatureMap> {
        self.check_params(params)?;
        self.check_pyramid(pyramid)?;
        Ok(self.fuse_one(&params.0, pyramid).0)
    }

    fn classify_one(&self, p: &[f64], v: &FeatureMap) -> Result<(f64, Vec<f64>)> {
        let m = self.mlp;
        let mut hidden_pre = Vec::with_capacity(m.hidden);
        let mut logit = p[m.b2];
        for h in 0..m.hidden {
            let row = &p[m.w1 + h * m.inputs..m.w1 + (h + 1) * m.inputs];
            let a = p[m.b1 + h] + row.iter().zip(&v.data).map(|(w, x)| w * x).sum::<f64>();
            hidden_pre.push(a);
            logit += p[m.w2 + h] * a.max(0.0);
        }
        if !logit.is_finite() {
            return Err(Error::Numerical("classifier logit is not finite".into()));
        }
        Ok((sigmoid(logit), hidden_pre))
    }

    /// Probability of "fake" for each fused feature map.
    pub fn classify(&self, params: &Params, batch: &[FeatureMap]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        batch
            .iter()
            .map(|v| {
                if v.len() != self.mlp.inputs {
                    return Err(Error::InvalidInput(format!(
                        "classifier expects {} inputs, got {}",
                        self.mlp.inputs,
                        v.len()
                    )));
                }
                Ok(self.classify_one(&params.0, v)?.0)
            })
            .collect()
    }

    fn forward_one(&self, p: &[f64], x: &FeatureMap, mode: ForwardMode) -> Result<SampleTrace> {
        let (reconstruction, pyramid) = self.reconstruct_one(p, x);
        let bias = compute_bias(x, &reconstruction)?;
        let (attention, pooled_enc, pooled_dec, queries, keys) = self.fuse_one(p, &pyramid);
        let (mask, attended) = apply_attention(&attention, &bias)?;
        let fused = match mode {
            ForwardMode::Input => x.clone(),
            ForwardMode::Reconstruction => reconstruction.clone(),
            ForwardMode::Bias => bias.clone(),
            ForwardMode::AttendedBias => attended,
        };
        let (prob, hidden_pre) = self.classify_one(p, &fused)?;
        Ok(SampleTrace {
            input: x.clone(),
            reconstruction,
            bias,
            pyramid,
            attention,
            mask,
            fused,
            prob,
            cache: TraceCache {
                pooled_enc,
                pooled_dec,
                queries,
                keys,
                hidden_pre,
            },
        })
    }

    /// reconstruct → bias → attention → fusion → classifier, keeping every intermediate.
    pub fn forward(&self, params: &Params, batch: &[FeatureMap], mode: ForwardMode) -> Result<ForwardBundle> {
        self.check_params(params)?;
        let samples = batch
            .iter()
            .map(|x| {
                self.check_input(x)?;
                self.forward_one(&params.0, x, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardBundle { mode, samples })
    }

    /// Back-propagates `grad_prob = ∂L/∂p` and the direct loss gradient
    /// `∂L/∂x̂` of one sample, accumulating into `grads`.
    pub fn backward(
        &self,
        params: &Params,
        trace: &SampleTrace,
        mode: ForwardMode,
        grad_bias: Option<&FeatureMap>,
        grad_prob: f64,
        grads: &mut [f64],
    ) {
        let p = &params.0;
        let m = self.mlp;
        let cfg = &self.config;

        // classifier head
        let g_logit = grad_prob * trace.prob * (1.0 - trace.prob);
        grads[m.b2] += g_logit;
        let mut g_v = vec![0.0; m.inputs];
        for h in 0..m.hidden {
            let a = trace.cache.hidden_pre[h];
            grads[m.w2 + h] += g_logit * a.max(0.0);
            if a <= 0.0 {
                continue;
            }
            let g = g_logit * p[m.w2 + h];
            grads[m.b1 + h] += g;
            let row = m.w1 + h * m.inputs;
            for (gw, x) in grads[row..row + m.inputs].iter_mut().zip(&trace.fused.data) {
                *gw += g * x;
            }
            for (gv, w) in g_v.iter_mut().zip(&p[row..row + m.inputs]) {
                *gv += g * w;
            }
        }

        let (c, hgt, wid) = trace.input.shape();
        let mut g_xo = FeatureMap::zeros(c, hgt, wid);
        let mut g_xhat = match grad_bias {
            Some(g) => g.clone(),
            None => FeatureMap::zeros(c, hgt, wid),
        };
        let mut g_s = None;
        match mode {
            ForwardMode::Input => {
                if grad_bias.is_none() {
                    return;
                }
            }
            ForwardMode::Reconstruction => g_xo.data.copy_from_slice(&g_v),
            ForwardMode::Bias => {
                for (a, b) in g_xhat.data.iter_mut().zip(&g_v) {
                    *a += b;
                }
            }
            ForwardMode::AttendedBias => {
                let plane = hgt * wid;
                let mut g_mask = vec![0.0; plane];
                for ch in 0..c {
                    let off = ch * plane;
                    for i in 0..plane {
                        let gv = g_v[off + i];
                        g_xhat.data[off + i] += gv * trace.mask.data[i];
                        g_mask[i] += gv * trace.bias.data[off + i];
                    }
                }
                for (g, mk) in g_mask.iter_mut().zip(&trace.mask.data) {
                    *g *= mk * (1.0 - mk);
                }
                let side = cfg.latent_side();
                let g_mean = layers::bilinear_resize_backward(&g_mask, side, hgt, wid);
                let cz = cfg.bottleneck_channels;
                let mut gs = FeatureMap::zeros(cz, side, side);
                let inv = 1.0 / cz as f64;
                for ch in 0..cz {
                    for (g, gm) in gs.plane_mut(ch).iter_mut().zip(&g_mean) {
                        *g = gm * inv;
                    }
                }
                g_s = Some(gs);
            }
        }

        // x̂ = |x - x_o|, subgradient 0 at ties
        for i in 0..g_xo.data.len() {
            let d = trace.reconstruction.data[i] - trace.input.data[i];
            if d > 0.0 {
                g_xo.data[i] += g_xhat.data[i];
            } else if d < 0.0 {
                g_xo.data[i] -= g_xhat.data[i];
            }
        }

        let n = cfg.num_scales;
        let pyr = &trace.pyramid;
        let mut g_enc: Vec<FeatureMap> = pyr.encoder_feats.iter().map(|f| FeatureMap::zeros(f.channels, f.height, f.width)).collect();
        let mut g_dec: Vec<FeatureMap> = pyr.decoder_feats.iter().map(|f| FeatureMap::zeros(f.channels, f.height, f.width)).collect();
        let mut g_z = FeatureMap::zeros(pyr.bottleneck.channels, pyr.bottleneck.height, pyr.bottleneck.width);

        if let Some(gs) = g_s {
            g_z.add_assign(&gs);
            for k in 0..n {
                let (gq, gkv) = lsa::patch_attention_backward(
                    &trace.cache.queries[k],
                    &trace.cache.keys[k],
                    cfg.patch_size,
                    &gs,
                );
                let gpq = self.query_proj[k]
                    .backward(p, &trace.cache.pooled_enc[k], &gq, grads, true)
                    .unwrap();
                let gpk = self.key_proj[k]
                    .backward(p, &trace.cache.pooled_dec[k], &gkv, grads, true)
                    .unwrap();
                let side = cfg.scale_side(k);
                g_enc[k].add_assign(&layers::adaptive_avg_pool_backward(&gpq, side, side));
                g_dec[k].add_assign(&layers::adaptive_avg_pool_backward(&gpk, side, side));
            }
        }

        // decoder, from the output back to the bottleneck
        let mut g_pre = g_xo;
        for (g, y) in g_pre.data.iter_mut().zip(&trace.reconstruction.data) {
            *g *= y * (1.0 - y);
        }
        let gd0 = self.output.backward(p, &pyr.decoder_feats[0], &g_pre, grads, true).unwrap();
        g_dec[0].add_assign(&gd0);
        for k in 0..n {
            let mut g = std::mem::replace(&mut g_dec[k], FeatureMap::zeros(0, 0, 0));
            tanh_backward(&mut g, &pyr.decoder_feats[k]);
            if k + 1 < n {
                let up = self.decoder_up[k].backward(p, &pyr.decoder_feats[k + 1], &g, grads, true).unwrap();
                g_dec[k + 1].add_assign(&up);
            } else {
                let gz = self.decoder_entry.backward(p, &pyr.bottleneck, &g, grads, true).unwrap();
                g_z.add_assign(&gz);
            }
        }

        tanh_backward(&mut g_z, &pyr.bottleneck);
        let g_last = self.bottleneck.backward(p, &pyr.encoder_feats[n - 1], &g_z, grads, true).unwrap();
        g_enc[n - 1].add_assign(&g_last);
        for k in (0..n).rev() {
            let mut g = std::mem::replace(&mut g_enc[k], FeatureMap::zeros(0, 0, 0));
            tanh_backward(&mut g, &pyr.encoder_feats[k]);
            let input = if k == 0 { &trace.input } else { &pyr.encoder_feats[k - 1] };
            if let Some(gi) = self.encoder[k].backward(p, input, &g, grads, k > 0) {
                g_enc[k - 1].add_assign(&gi);
            }
        }
    }
}

fn tanh_backward(grad: &mut FeatureMap, out: &FeatureMap) {
    for (g, y) in grad.data.iter_mut().zip(&out.data) {
        *g *= 1.0 - y * y;
    }
}
