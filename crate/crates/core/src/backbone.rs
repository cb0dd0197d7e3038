//! Probabilistic U-Net: a deterministic U-Net encoder/decoder with Gaussian
//! prior and posterior heads over a low-dimensional latent space.
//!
//! The latent code is broadcast over the lowest-resolution feature map and
//! channel-concatenated before the first decoder convolution. The posterior
//! network has its own encoder over `[image, mask]`.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat_channels, global_avg_pool, global_avg_pool_backward,
    join, relu_backward, relu_inplace, sigmoid, softplus, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvCache, Linear, Parameters,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2x downsamplings between the input and the latent injection level.
    pub depth: usize,
    pub latent_dim: usize,
    pub posterior_width: usize,
    pub sigma_floor: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            in_channels: 1,
            base_width: 16,
            depth: 3,
            latent_dim: 6,
            posterior_width: 16,
            sigma_floor: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Spatial size of the feature map the latent code is injected into.
    pub fn injection_resolution(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.depth;
        ensure(self.depth >= 1, || "depth must be at least 1".into())?;
        ensure(
            self.height.is_multiple_of(div) && self.width.is_multiple_of(div) && self.height >= div,
            || {
                format!(
                    "image size {}x{} must be a positive multiple of 2^depth = {div}",
                    self.height, self.width
                )
            },
        )?;
        ensure(self.latent_dim >= 1, || "latent_dim must be positive".into())?;
        ensure(self.base_width >= 1 && self.posterior_width >= 1, || {
            "network widths must be positive".into()
        })?;
        ensure(self.sigma_floor > 0.0, || "sigma_floor must be positive".into())
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Array1<f64>, sigma: Array1<f64>) -> Result<Self> {
        ensure(mu.len() == sigma.len(), || {
            format!("mu has {} dims but sigma has {}", mu.len(), sigma.len())
        })?;
        ensure(sigma.iter().all(|&s| s > 0.0 && s.is_finite()), || {
            "sigma must be strictly positive and finite".into()
        })?;
        ensure(mu.iter().all(|m| m.is_finite()), || "mu must be finite".into())?;
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: Array1::zeros(dim),
            sigma: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Reparameterised draw `mu + sigma * noise`.
    pub fn sample(&self, noise: &Array1<f64>, origin: LatentOrigin) -> LatentCode {
        assert_eq!(noise.len(), self.dim(), "noise dimension mismatch");
        LatentCode {
            z: &self.mu + &(&self.sigma * noise),
            origin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOrigin {
    PriorSample,
    PosteriorSample,
    Projected,
    Fused,
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Array1<f64>,
    pub origin: LatentOrigin,
}

impl LatentCode {
    pub fn new(z: Array1<f64>, origin: LatentOrigin) -> Self {
        Self { z, origin }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Standard-normal noise vector for [`LatentGaussian::sample`].
pub fn standard_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Sigmoid output of the decoder together with its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub probs: Array2<f64>,
    pub logits: Option<Array2<f64>>,
}

impl ProbabilityMap {
    pub fn from_logits(logits: Array2<f64>) -> Self {
        Self {
            probs: logits.mapv(sigmoid),
            logits: Some(logits),
        }
    }

    pub fn threshold(&self, t: f64) -> Array2<bool> {
        self.probs.mapv(|p| p >= t)
    }
}

/// Deterministic encoder output: the injection-level feature map and the
/// higher-resolution pyramid kept for skip connections (finest first).
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub features: Array3<f64>,
    pub pyramid: Vec<Array3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    c1: ConvCache,
    a1: Array3<f64>,
    c2: ConvCache,
    a2: Array3<f64>,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, rng),
            conv2: Conv2d::new(out_ch, out_ch, 3, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvBlockCache) {
        let (mut a1, c1) = self.conv1.forward(x);
        relu_inplace(&mut a1);
        let (mut a2, c2) = self.conv2.forward(&a1);
        relu_inplace(&mut a2);
        (a2.clone(), ConvBlockCache { c1, a1, c2, a2 })
    }

    fn backward(
        &self,
        cache: &ConvBlockCache,
        d_out: &Array3<f64>,
        grads: Option<&mut ConvBlock>,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let d2 = relu_backward(&cache.a2, d_out);
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.conv1), Some(&mut g.conv2)),
            None => (None, None),
        };
        let d_a1 = self.conv2.backward(&cache.c2, &d2, g2, true)?;
        let d1 = relu_backward(&cache.a1, &d_a1);
        self.conv1.backward(&cache.c1, &d1, g1, need_input)
    }
}

impl Parameters for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<ConvBlockCache>,
    input_dims: Vec<(usize, usize)>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(in_ch: usize, width: usize, depth: usize, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(depth + 1);
        let mut c_in = in_ch;
        for level in 0..=depth {
            let c_out = width << level;
            blocks.push(ConvBlock::new(c_in, c_out, rng));
            c_in = c_out;
        }
        Self { blocks }
    }

    fn forward(&self, x: &Array3<f64>) -> (EncoderOutput, EncoderCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut dims = Vec::with_capacity(self.blocks.len());
        let mut pyramid = Vec::with_capacity(self.blocks.len() - 1);
        let mut cur = x.clone();
        for (level, block) in self.blocks.iter().enumerate() {
            if level > 0 {
                let prev = pyramid.last().expect("previous level");
                cur = avg_pool2(prev);
            }
            dims.push((cur.dim().1, cur.dim().2));
            let (out, cache) = block.forward(&cur);
            caches.push(cache);
            if level + 1 < self.blocks.len() {
                pyramid.push(out);
            } else {
                cur = out;
            }
        }
        (
            EncoderOutput {
                features: cur,
                pyramid,
            },
            EncoderCache {
                blocks: caches,
                input_dims: dims,
            },
        )
    }

    /// Backpropagates through the encoder. The image gradient is never needed.
    fn backward(
        &self,
        cache: &EncoderCache,
        d_features: &Array3<f64>,
        d_pyramid: Option<&[Array3<f64>]>,
        mut grads: Option<&mut Encoder>,
    ) {
        let mut d = d_features.clone();
        for level in (0..self.blocks.len()).rev() {
            if level + 1 < self.blocks.len() {
                if let Some(dp) = d_pyramid {
                    d += &dp[level];
                }
            }
            let g = grads.as_deref_mut().map(|g| &mut g.blocks[level]);
            let d_in = self.blocks[level].backward(&cache.blocks[level], &d, g, level > 0);
            if level > 0 {
                let (h, w) = cache.input_dims[level - 1];
                d = avg_pool2_backward(&d_in.expect("requested input grad"), h, w);
            }
        }
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Two linear heads on globally pooled features producing `(mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mu: Linear,
    pub sigma: Linear,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pooled: Array1<f64>,
    raw_sigma: Array1<f64>,
    h: usize,
    w: usize,
}

impl GaussianHead {
    fn zeros(in_ch: usize, latent_dim: usize, sigma_floor: f64) -> Self {
        Self {
            mu: Linear::zeros(in_ch, latent_dim),
            sigma: Linear::zeros(in_ch, latent_dim),
            sigma_floor,
        }
    }

    fn forward(&self, features: &Array3<f64>) -> (LatentGaussian, HeadCache) {
        let (_, h, w) = features.dim();
        let pooled = global_avg_pool(features);
        let mu = self.mu.forward(&pooled);
        let raw_sigma = self.sigma.forward(&pooled);
        let floor = self.sigma_floor;
        let sigma = raw_sigma.mapv(|r| softplus(r).max(floor));
        (
            LatentGaussian { mu, sigma },
            HeadCache {
                pooled,
                raw_sigma,
                h,
                w,
            },
        )
    }

    fn backward(
        &self,
        cache: &HeadCache,
        d_mu: &Array1<f64>,
        d_sigma: &Array1<f64>,
        grads: Option<&mut GaussianHead>,
    ) -> Array3<f64> {
        let floor = self.sigma_floor;
        let d_raw = Array1::from_iter(cache.raw_sigma.iter().zip(d_sigma).map(|(&r, &d)| {
            if softplus(r) > floor {
                d * sigmoid(r)
            } else {
                0.0
            }
        }));
        let (gm, gs) = match grads {
            Some(g) => (Some(&mut g.mu), Some(&mut g.sigma)),
            None => (None, None),
        };
        let d_pooled = self.mu.backward(&cache.pooled, d_mu, gm)
            + self.sigma.backward(&cache.pooled, &d_raw, gs);
        global_avg_pool_backward(&d_pooled, cache.h, cache.w)
    }
}

impl Parameters for GaussianHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.mu.visit(&join(prefix, "mu"), f);
        self.sigma.visit(&join(prefix, "sigma"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.mu.visit_mut(&join(prefix, "mu"), f);
        self.sigma.visit_mut(&join(prefix, "sigma"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub inject: Conv2d,
    pub blocks: Vec<ConvBlock>,
    pub head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    feature_channels: usize,
    inject: ConvCache,
    injected: Array3<f64>,
    pyramid_channels: Vec<usize>,
    blocks: Vec<ConvBlockCache>,
    head: ConvCache,
    probs: Array2<f64>,
}

/// Gradients of a decode call with respect to its inputs.
#[derive(Debug, Clone)]
pub struct DecoderInputGrads {
    pub d_features: Array3<f64>,
    pub d_pyramid: Vec<Array3<f64>>,
    pub d_z: Array1<f64>,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(width: usize, depth: usize, latent_dim: usize, rng: &mut R) -> Self {
        let ch = |level: usize| width << level;
        let inject = Conv2d::new(ch(depth) + latent_dim, ch(depth - 1), 3, rng);
        // blocks[0] runs at level depth-1, the last one at full resolution
        let blocks = (0..depth)
            .rev()
            .map(|level| {
                let out = if level == 0 { ch(0) } else { ch(level - 1) };
                ConvBlock::new(2 * ch(level), out, rng)
            })
            .collect();
        Self {
            inject,
            blocks,
            head: Conv2d::new(ch(0), 1, 1, rng),
        }
    }

    fn forward(&self, enc: &EncoderOutput, z: &Array1<f64>) -> (ProbabilityMap, DecoderCache) {
        let (fc, h, w) = enc.features.dim();
        let zmap = Array3::from_shape_fn((z.len(), h, w), |(d, _, _)| z[d]);
        let (mut injected, inject_cache) = self.inject.forward(&concat_channels(&enc.features, &zmap));
        relu_inplace(&mut injected);
        let mut cur = injected.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut pyramid_channels = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = &enc.pyramid[enc.pyramid.len() - 1 - i];
            let up = upsample2(&cur);
            pyramid_channels.push(up.dim().0);
            let (out, cache) = block.forward(&concat_channels(&up, skip));
            caches.push(cache);
            cur = out;
        }
        let (logits, head_cache) = self.head.forward(&cur);
        let logits = logits.index_axis_move(Axis(0), 0);
        let map = ProbabilityMap::from_logits(logits);
        let cache = DecoderCache {
            feature_channels: fc,
            inject: inject_cache,
            injected,
            pyramid_channels,
            blocks: caches,
            head: head_cache,
            probs: map.probs.clone(),
        };
        (map, cache)
    }

    fn backward(
        &self,
        cache: &DecoderCache,
        d_probs: &Array2<f64>,
        mut grads: Option<&mut Decoder>,
    ) -> DecoderInputGrads {
        let d_logits = d_probs * &cache.probs.mapv(|p| p * (1.0 - p));
        let d_logits = d_logits.insert_axis(Axis(0));
        let d_cur = self
            .head
            .backward(&cache.head, &d_logits, grads.as_deref_mut().map(|g| &mut g.head), true)
            .expect("input grad");
        let mut d_cur = d_cur;
        let mut d_pyramid = vec![Array3::zeros((0, 0, 0)); self.blocks.len()];
        for i in (0..self.blocks.len()).rev() {
            let g = grads.as_deref_mut().map(|g| &mut g.blocks[i]);
            let d_in = self.blocks[i]
                .backward(&cache.blocks[i], &d_cur, g, true)
                .expect("input grad");
            let (d_up, d_skip) = split_channels(&d_in, cache.pyramid_channels[i]);
            d_pyramid[self.blocks.len() - 1 - i] = d_skip;
            d_cur = upsample2_backward(&d_up);
        }
        let d_inj = relu_backward(&cache.injected, &d_cur);
        let d_cat = self
            .inject
            .backward(&cache.inject, &d_inj, grads.map(|g| &mut g.inject), true)
            .expect("input grad");
        let (d_features, d_zmap) = split_channels(&d_cat, cache.feature_channels);
        let d_z = d_zmap.sum_axis(Axis(2)).sum_axis(Axis(1));
        DecoderInputGrads {
            d_features,
            d_pyramid,
            d_z,
        }
    }
}

impl Parameters for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.inject.visit(&join(prefix, "inject"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.inject.visit_mut(&join(prefix, "inject"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbUNet {
    pub config: BackboneConfig,
    pub encoder: Encoder,
    pub prior: GaussianHead,
    pub posterior_encoder: Encoder,
    pub posterior: GaussianHead,
    pub decoder: Decoder,
}

/// Everything needed to backpropagate through one encode call.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub output: EncoderOutput,
    cache: EncoderCache,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub gaussian: LatentGaussian,
    cache: HeadCache,
}

#[derive(Debug, Clone)]
pub struct PosteriorTrace {
    pub gaussian: LatentGaussian,
    encoder: EncoderCache,
    head: HeadCache,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub map: ProbabilityMap,
    cache: DecoderCache,
}

impl ProbUNet {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bottleneck = config.base_width << config.depth;
        let post_bottleneck = config.posterior_width << config.depth;
        let encoder = Encoder::new(config.in_channels, config.base_width, config.depth, rng);
        let posterior_encoder = Encoder::new(
            config.in_channels + 1,
            config.posterior_width,
            config.depth,
            rng,
        );
        let decoder = Decoder::new(config.base_width, config.depth, config.latent_dim, rng);
        Ok(Self {
            config,
            encoder,
            prior: GaussianHead::zeros(bottleneck, config.latent_dim, config.sigma_floor),
            posterior_encoder,
            posterior: GaussianHead::zeros(post_bottleneck, config.latent_dim, config.sigma_floor),
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<()> {
        let (h, w) = image.dim();
        ensure((h, w) == (self.config.height, self.config.width), || {
            format!(
                "image is {h}x{w}, model expects {}x{}",
                self.config.height, self.config.width
            )
        })?;
        ensure(image.iter().all(|v| v.is_finite()), || {
            "image contains non-finite values".into()
        })
    }

    pub fn encode(&self, image: &Array2<f64>) -> Result<EncodeTrace> {
        self.check_image(image)?;
        let x = image.clone().insert_axis(Axis(0));
        let (output, cache) = self.encoder.forward(&x);
        Ok(EncodeTrace { output, cache })
    }

    pub fn prior_head(&self, enc: &EncoderOutput) -> HeadTrace {
        let (gaussian, cache) = self.prior.forward(&enc.features);
        HeadTrace { gaussian, cache }
    }

    /// Posterior conditioned on the image and one binary annotation.
    pub fn posterior_head(&self, image: &Array2<f64>, mask: &Array2<f64>) -> Result<PosteriorTrace> {
        self.check_image(image)?;
        ensure(mask.dim() == image.dim(), || {
            format!("mask is {:?}, image is {:?}", mask.dim(), image.dim())
        })?;
        ensure(mask.iter().all(|&m| m == 0.0 || m == 1.0), || {
            "mask values must be 0 or 1".into()
        })?;
        let x = ndarray::stack(Axis(0), &[image.view(), mask.view()]).expect("same shape");
        let (out, encoder) = self.posterior_encoder.forward(&x);
        let (gaussian, head) = self.posterior.forward(&out.features);
        Ok(PosteriorTrace {
            gaussian,
            encoder,
            head,
        })
    }

    pub fn decode(&self, enc: &EncoderOutput, z: &LatentCode) -> Result<DecodeTrace> {
        ensure(z.dim() == self.config.latent_dim, || {
            format!(
                "latent code has {} dims, model expects {}",
                z.dim(),
                self.config.latent_dim
            )
        })?;
        let (map, cache) = self.decoder.forward(enc, &z.z);
        Ok(DecodeTrace { map, cache })
    }

    /// Backprop of one decode call; accumulates decoder gradients when given.
    pub fn decode_backward(
        &self,
        trace: &DecodeTrace,
        d_probs: &Array2<f64>,
        grads: Option<&mut Decoder>,
    ) -> DecoderInputGrads {
        self.decoder.backward(&trace.cache, d_probs, grads)
    }

    pub fn prior_backward(
        &self,
        trace: &HeadTrace,
        d_mu: &Array1<f64>,
        d_sigma: &Array1<f64>,
        grads: Option<&mut GaussianHead>,
    ) -> Array3<f64> {
        self.prior.backward(&trace.cache, d_mu, d_sigma, grads)
    }

    pub fn posterior_backward(
        &self,
        trace: &PosteriorTrace,
        d_mu: &Array1<f64>,
        d_sigma: &Array1<f64>,
        grads: Option<&mut ProbUNet>,
    ) {
        let Some(g) = grads else { return };
        let d_feat = self
            .posterior
            .backward(&trace.head, d_mu, d_sigma, Some(&mut g.posterior));
        self.posterior_encoder
            .backward(&trace.encoder, &d_feat, None, Some(&mut g.posterior_encoder));
    }

    pub fn encode_backward(
        &self,
        trace: &EncodeTrace,
        d_features: &Array3<f64>,
        d_pyramid: &[Array3<f64>],
        grads: &mut Encoder,
    ) {
        self.encoder
            .backward(&trace.cache, d_features, Some(d_pyramid), Some(grads));
    }
}

impl Parameters for ProbUNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.prior.visit(&join(prefix, "prior"), f);
        self.posterior_encoder.visit(&join(prefix, "posterior_encoder"), f);
        self.posterior.visit(&join(prefix, "posterior"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.prior.visit_mut(&join(prefix, "prior"), f);
        self.posterior_encoder
            .visit_mut(&join(prefix, "posterior_encoder"), f);
        self.posterior.visit_mut(&join(prefix, "posterior"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
