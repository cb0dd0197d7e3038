//! Inference over a trained backbone and prompt projection.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    standard_noise, EncoderOutput, LatentCode, LatentGaussian, LatentOrigin, ProbUNet,
    ProbabilityMap,
};
use crate::error::{ensure, Error, Result};
use crate::metrics::{CasePredictions, Segmenter};
use crate::prompt::{
    encode_text, fuse, similarity_profile, ProjectionMlp, SimilarityProfile, TextEncoder,
    TextEncoderSpec,
};

/// Draws `k` codes from `prior` with a generator seeded by `seed`.
pub fn draw_prior_samples(prior: &LatentGaussian, k: usize, seed: u64) -> Result<Vec<LatentCode>> {
    ensure(k >= 1, || "K must be at least 1".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| prior.sample(&standard_noise(prior.dim(), &mut rng), LatentOrigin::PriorSample))
        .collect())
}

/// An image encoded once, with its prior and K shared prior samples.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub encoded: EncoderOutput,
    pub prior: LatentGaussian,
    pub samples: Vec<LatentCode>,
}

/// A prompt-conditioned prediction and how it was formed.
#[derive(Debug, Clone)]
pub struct Personalized {
    pub map: ProbabilityMap,
    pub profile: SimilarityProfile,
    pub z_proj: LatentCode,
    pub z_prompt: LatentCode,
}

pub struct ProsonaModel {
    pub backbone: ProbUNet,
    pub projection: Option<ProjectionMlp>,
    pub encoder_spec: TextEncoderSpec,
    pub text_encoder: Arc<dyn TextEncoder>,
}

impl std::fmt::Debug for ProsonaModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProsonaModel")
            .field("backbone", &self.backbone.config)
            .field("projection", &self.projection.is_some())
            .field("text_encoder", &self.text_encoder.id())
            .finish()
    }
}

impl Clone for ProsonaModel {
    fn clone(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            projection: self.projection.clone(),
            encoder_spec: self.encoder_spec.clone(),
            text_encoder: Arc::clone(&self.text_encoder),
        }
    }
}

impl ProsonaModel {
    pub fn new(
        backbone: ProbUNet,
        projection: Option<ProjectionMlp>,
        encoder_spec: TextEncoderSpec,
    ) -> Result<Self> {
        let text_encoder: Arc<dyn TextEncoder> = Arc::from(encoder_spec.build()?);
        if let Some(p) = &projection {
            ensure(p.input_dim() == text_encoder.dim(), || {
                format!(
                    "projection expects {} embedding dims, encoder {} has {}",
                    p.input_dim(),
                    text_encoder.id(),
                    text_encoder.dim()
                )
            })?;
            ensure(p.latent_dim() == backbone.latent_dim(), || {
                format!(
                    "projection outputs {} dims, backbone latent is {}",
                    p.latent_dim(),
                    backbone.latent_dim()
                )
            })?;
        }
        Ok(Self {
            backbone,
            projection,
            encoder_spec,
            text_encoder,
        })
    }

    pub fn projection(&self) -> Result<&ProjectionMlp> {
        self.projection.as_ref().ok_or_else(|| {
            Error::State("model has no prompt projection; run stage-2 training first".into())
        })
    }

    pub fn prepare(&self, image: &Array2<f64>, k: usize, seed: u64) -> Result<PreparedImage> {
        let encoded = self.backbone.encode(image)?.output;
        let prior = self.backbone.prior_head(&encoded).gaussian;
        let samples = draw_prior_samples(&prior, k, seed)?;
        Ok(PreparedImage {
            encoded,
            prior,
            samples,
        })
    }

    pub fn project_text(&self, prompt: &str) -> Result<LatentCode> {
        let proj = self.projection()?;
        proj.project(&encode_text(prompt, self.text_encoder.as_ref())?)
    }

    /// Scores `z_proj` against the prepared samples, fuses and decodes.
    pub fn predict_from_projection(
        &self,
        prepared: &PreparedImage,
        z_proj: LatentCode,
    ) -> Result<Personalized> {
        let profile = similarity_profile(&z_proj, &prepared.samples)?;
        let z_prompt = fuse(&profile, &prepared.samples)?;
        let map = self.backbone.decode(&prepared.encoded, &z_prompt)?.map;
        Ok(Personalized {
            map,
            profile,
            z_proj,
            z_prompt,
        })
    }

    pub fn personalize_prepared(&self, prepared: &PreparedImage, prompt: &str) -> Result<Personalized> {
        let z_proj = self.project_text(prompt)?;
        self.predict_from_projection(prepared, z_proj)
    }

    /// encode, prior, K samples from `seed`, project the prompt, fuse, decode.
    pub fn personalize(
        &self,
        image: &Array2<f64>,
        prompt: &str,
        k: usize,
        seed: u64,
    ) -> Result<Personalized> {
        self.projection()?;
        let prepared = self.prepare(image, k, seed)?;
        self.personalize_prepared(&prepared, prompt)
    }

    /// Prediction at `z(t) = (1 - t) z_proj(a) + t z_proj(b)` over the K
    /// samples drawn from `seed`. The endpoints reuse the projected codes
    /// unchanged, so they reproduce `personalize` exactly.
    pub fn interpolate_prepared(
        &self,
        prepared: &PreparedImage,
        prompt_a: &str,
        prompt_b: &str,
        t: f64,
    ) -> Result<Personalized> {
        ensure((0.0..=1.0).contains(&t), || format!("t must lie in [0, 1], got {t}"))?;
        let za = self.project_text(prompt_a)?;
        let zb = self.project_text(prompt_b)?;
        let z = if t == 0.0 {
            za
        } else if t == 1.0 {
            zb
        } else {
            LatentCode::new(&za.z * (1.0 - t) + &zb.z * t, LatentOrigin::Interpolated)
        };
        self.predict_from_projection(prepared, z)
    }

    pub fn interpolate(
        &self,
        image: &Array2<f64>,
        prompt_a: &str,
        prompt_b: &str,
        t: f64,
        k: usize,
        seed: u64,
    ) -> Result<Personalized> {
        ensure((0.0..=1.0).contains(&t), || format!("t must lie in [0, 1], got {t}"))?;
        self.projection()?;
        let prepared = self.prepare(image, k, seed)?;
        self.interpolate_prepared(&prepared, prompt_a, prompt_b, t)
    }

    /// One decoded map per prior sample.
    pub fn sample_maps(&self, prepared: &PreparedImage) -> Result<Vec<ProbabilityMap>> {
        prepared
            .samples
            .iter()
            .map(|z| Ok(self.backbone.decode(&prepared.encoded, z)?.map))
            .collect()
    }

    /// Decodes the prior mean.
    pub fn mean_map(&self, prepared: &PreparedImage) -> Result<ProbabilityMap> {
        let z = LatentCode::new(prepared.prior.mu.clone(), LatentOrigin::PriorSample);
        Ok(self.backbone.decode(&prepared.encoded, &z)?.map)
    }
}

impl Segmenter for ProsonaModel {
    fn predict_case(
        &self,
        image: &Array2<f64>,
        prompts: &[String],
        k: usize,
        seed: u64,
    ) -> Result<CasePredictions> {
        let prepared = self.prepare(image, k, seed)?;
        let samples = self.sample_maps(&prepared)?;
        let prompted = prompts
            .iter()
            .map(|p| Ok(self.personalize_prepared(&prepared, p)?.map))
            .collect::<Result<Vec<_>>>()?;
        Ok(CasePredictions { samples, prompted })
    }
}

/// Foreground area of a map at `threshold`.
pub fn map_area(map: &ProbabilityMap, threshold: f64) -> usize {
    map.probs.iter().filter(|&&p| p >= threshold).count()
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    fn ranks(v: &[f64]) -> Array1<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = Array1::zeros(v.len());
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (rx.mean()?, ry.mean()?);
    let (dx, dy) = (rx - mx, ry - my);
    let denom = (dx.dot(&dx) * dy.dot(&dy)).sqrt();
    (denom > 0.0).then(|| dx.dot(&dy) / denom)
}
