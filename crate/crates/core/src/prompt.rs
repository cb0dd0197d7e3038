//! Prompt side of the model: frozen text encoders, the trainable projection
//! into the latent space, and similarity-weighted fusion of prior samples.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{LatentCode, LatentOrigin};
use crate::error::{ensure, Error, Result};
use crate::nn::{join, relu_backward, relu_inplace, Linear, Parameters};

/// A frozen text encoder. Implementations must be deterministic in `text`.
pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Array1<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub e: Array1<f64>,
    pub source_text: String,
    pub encoder_id: String,
}

pub fn encode_text(text: &str, encoder: &dyn TextEncoder) -> Result<PromptEmbedding> {
    ensure(!text.trim().is_empty(), || "prompt text is empty".into())?;
    let e = encoder.embed(text)?;
    ensure(e.len() == encoder.dim(), || {
        format!("encoder {} returned {} dims, declared {}", encoder.id(), e.len(), encoder.dim())
    })?;
    ensure(e.iter().all(|v| v.is_finite()), || {
        format!("encoder {} produced non-finite values", encoder.id())
    })?;
    Ok(PromptEmbedding {
        e,
        source_text: text.to_string(),
        encoder_id: encoder.id().to_string(),
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature-hashing bag of words: lowercase, strip ASCII punctuation,
/// split on whitespace, hash every token into one of `dim` buckets with a
/// hash-derived sign, then L2-normalise.
#[derive(Debug, Clone)]
pub struct HashedBowEncoder {
    dim: usize,
    id: String,
}

impl HashedBowEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("hashed-bow-{dim}-fnv1a"),
        }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        let cleaned: String = text
            .to_lowercase()
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect();
        cleaned.split_whitespace().map(str::to_string).collect()
    }
}

impl Default for HashedBowEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl TextEncoder for HashedBowEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = Self::tokens(text);
        ensure(!tokens.is_empty(), || format!("prompt {text:?} has no tokens"))?;
        let mut v = Array1::<f64>::zeros(self.dim);
        for tok in &tokens {
            let h = fnv1a(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        let norm = v.dot(&v).sqrt();
        ensure(norm > 0.0, || format!("hashed features of {text:?} cancel out"))?;
        Ok(v / norm)
    }
}

/// Externally computed embeddings (e.g. from a CLIP text tower) looked up by
/// exact prompt text.
///
/// File format: `{"id": "...", "dim": d, "embeddings": {"text": [d floats]}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableTextEncoder {
    pub id: String,
    pub dim: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl TableTextEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self =
            serde_json::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))?;
        for (text, v) in &table.embeddings {
            if v.len() != table.dim {
                return Err(Error::format(
                    path,
                    format!("embedding for {text:?} has {} dims, expected {}", v.len(), table.dim),
                ));
            }
        }
        Ok(table)
    }
}

impl TextEncoder for TableTextEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Array1<f64>> {
        self.embeddings
            .get(text.trim())
            .map(|v| Array1::from(v.clone()))
            .ok_or_else(|| Error::Lookup {
                kind: "prompt in embedding table",
                key: text.to_string(),
            })
    }
}

/// Which text encoder a model uses: `fallback` or `external:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextEncoderSpec {
    Fallback { dim: usize },
    External(std::path::PathBuf),
}

impl TextEncoderSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fallback" => Ok(Self::Fallback {
                dim: HashedBowEncoder::DEFAULT_DIM,
            }),
            _ => match s.strip_prefix("external:") {
                Some(path) if !path.is_empty() => Ok(Self::External(path.into())),
                _ => Err(Error::Config(format!(
                    "text_encoder must be `fallback` or `external:<path>`, got {s:?}"
                ))),
            },
        }
    }

    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            Self::Fallback { dim } => Box::new(HashedBowEncoder::new(*dim)),
            Self::External(path) => Box::new(TableTextEncoder::load(path)?),
        })
    }
}

impl std::fmt::Display for TextEncoderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fallback { .. } => write!(f, "fallback"),
            Self::External(p) => write!(f, "external:{}", p.display()),
        }
    }
}

/// Two-layer MLP from text-embedding space to the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMlp {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Array1<f64>,
    hidden: Array1<f64>,
}

impl ProjectionMlp {
    pub const HIDDEN: usize = 128;

    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        latent_dim: usize,
        zero_init_output: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = Linear::new(embed_dim, Self::HIDDEN, (2.0 / embed_dim as f64).sqrt(), rng);
        let out = if zero_init_output {
            Linear::zeros(Self::HIDDEN, latent_dim)
        } else {
            Linear::new(Self::HIDDEN, latent_dim, (1.0 / Self::HIDDEN as f64).sqrt(), rng)
        };
        Self { hidden, out }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.in_features()
    }

    pub fn latent_dim(&self) -> usize {
        self.out.out_features()
    }

    pub fn forward(&self, e: &PromptEmbedding) -> Result<(LatentCode, ProjectionCache)> {
        ensure(e.e.len() == self.input_dim(), || {
            format!(
                "embedding has {} dims, projection expects {}",
                e.e.len(),
                self.input_dim()
            )
        })?;
        let mut h = self.hidden.forward(&e.e);
        relu_inplace(&mut h);
        let z = self.out.forward(&h);
        Ok((
            LatentCode::new(z, LatentOrigin::Projected),
            ProjectionCache {
                input: e.e.clone(),
                hidden: h,
            },
        ))
    }

    pub fn project(&self, e: &PromptEmbedding) -> Result<LatentCode> {
        Ok(self.forward(e)?.0)
    }

    pub fn backward(&self, cache: &ProjectionCache, d_z: &Array1<f64>, grads: &mut ProjectionMlp) {
        let d_h = self.out.backward(&cache.hidden, d_z, Some(&mut grads.out));
        let d_pre = relu_backward(&cache.hidden, &d_h);
        self.hidden.backward(&cache.input, &d_pre, Some(&mut grads.hidden));
    }
}

impl Parameters for ProjectionMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Scaled dot products of a projected prompt against K latent samples and
/// their softmax weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub scores: Array1<f64>,
    pub weights: Array1<f64>,
    pub sample_ids: Vec<usize>,
}

pub fn softmax(s: &Array1<f64>) -> Array1<f64> {
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = s.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

/// Stacks sample codes into a `K x D` matrix.
pub fn stack_samples(samples: &[LatentCode]) -> Result<Array2<f64>> {
    ensure(!samples.is_empty(), || "need at least one latent sample".into())?;
    let d = samples[0].dim();
    ensure(samples.iter().all(|s| s.dim() == d), || {
        "latent samples differ in dimension".into()
    })?;
    let views: Vec<_> = samples.iter().map(|s| s.z.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("same length"))
}

/// `s_k = z_proj . z_k / sqrt(D)`, weights `softmax(s)`.
pub fn similarity_profile(z_proj: &LatentCode, samples: &[LatentCode]) -> Result<SimilarityProfile> {
    let z = stack_samples(samples)?;
    ensure(z.ncols() == z_proj.dim(), || {
        format!(
            "projected code has {} dims, samples have {}",
            z_proj.dim(),
            z.ncols()
        )
    })?;
    Ok(profile_from_matrix(&z_proj.z, &z))
}

pub(crate) fn profile_from_matrix(z_proj: &Array1<f64>, samples: &Array2<f64>) -> SimilarityProfile {
    let scale = 1.0 / (samples.ncols() as f64).sqrt();
    let scores = samples.dot(z_proj) * scale;
    let weights = softmax(&scores);
    SimilarityProfile {
        scores,
        weights,
        sample_ids: (0..samples.nrows()).collect(),
    }
}

/// `z_prompt = sum_k w_k z_k`.
pub fn fuse(profile: &SimilarityProfile, samples: &[LatentCode]) -> Result<LatentCode> {
    let z = stack_samples(samples)?;
    ensure(profile.weights.len() == z.nrows(), || {
        format!(
            "profile has {} weights for {} samples",
            profile.weights.len(),
            z.nrows()
        )
    })?;
    Ok(LatentCode::new(z.t().dot(&profile.weights), LatentOrigin::Fused))
}

/// Gradients of the similarity-then-fuse map.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub d_z_proj: Array1<f64>,
    pub d_samples: Array2<f64>,
}

/// Backpropagates `d_z_prompt` (and an optional direct gradient on the raw
/// scores) through `fuse(similarity_profile(z_proj, samples))`.
pub fn fusion_backward(
    z_proj: &Array1<f64>,
    samples: &Array2<f64>,
    profile: &SimilarityProfile,
    d_z_prompt: &Array1<f64>,
    d_scores_extra: Option<&Array1<f64>>,
) -> FusionGrads {
    let w = &profile.weights;
    let scale = 1.0 / (samples.ncols() as f64).sqrt();
    let d_w = samples.dot(d_z_prompt);
    let mut d_samples = Array2::zeros(samples.dim());
    for (k, mut row) in d_samples.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(w[k], d_z_prompt);
    }
    let inner = w.dot(&d_w);
    let mut d_s = w * &(d_w - inner);
    if let Some(extra) = d_scores_extra {
        d_s += extra;
    }
    let d_z_proj = samples.t().dot(&d_s) * scale;
    for (k, mut row) in d_samples.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(d_s[k] * scale, z_proj);
    }
    FusionGrads {
        d_z_proj,
        d_samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn code(v: Vec<f64>) -> LatentCode {
        LatentCode::new(Array1::from(v), LatentOrigin::PriorSample)
    }

    #[test]
    fn fallback_encoder_is_deterministic_and_unit_norm() {
        let enc = HashedBowEncoder::default();
        let a = encode_text("Conservative mask", &enc).unwrap();
        let b = encode_text("conservative   MASK!", &enc).unwrap();
        assert_eq!(a.e, b.e);
        assert!((a.e.dot(&a.e) - 1.0).abs() < 1e-12);
        let c = encode_text("inclusive mask", &enc).unwrap();
        assert!(a.e.dot(&c.e) < 1.0 - 1e-9);
        assert!(encode_text("", &enc).is_err());
        assert!(encode_text("  ", &enc).is_err());
        assert!(encode_text("?!", &enc).is_err());
    }

    #[test]
    fn encoder_spec_parsing() {
        assert_eq!(
            TextEncoderSpec::parse("fallback").unwrap(),
            TextEncoderSpec::Fallback { dim: 64 }
        );
        assert_eq!(
            TextEncoderSpec::parse("external:/tmp/x.json").unwrap(),
            TextEncoderSpec::External("/tmp/x.json".into())
        );
        assert!(TextEncoderSpec::parse("clip").is_err());
        assert!(TextEncoderSpec::parse("external:").is_err());
    }

    #[test]
    fn zero_output_layer_projects_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = ProjectionMlp::new(64, 6, true, &mut rng);
        let e = encode_text("inclusive mask", &HashedBowEncoder::default()).unwrap();
        assert_eq!(mlp.project(&e).unwrap().z, Array1::<f64>::zeros(6));
        let short = PromptEmbedding {
            e: Array1::zeros(3),
            source_text: "x".into(),
            encoder_id: "t".into(),
        };
        assert!(mlp.project(&short).is_err());
    }

    #[test]
    fn similarity_direct_formula() {
        let zp = code(vec![1.0, 1.0, 1.0, 1.0]);
        let samples = vec![
            code(vec![1.0, 1.0, 1.0, 1.0]),
            code(vec![1.0, -1.0, 0.0, 0.0]),
            code(vec![0.0, 0.0, 1.0, -1.0]),
        ];
        let p = similarity_profile(&zp, &samples).unwrap();
        assert_eq!(p.scores, array![2.0, 0.0, 0.0]);
        assert!((p.weights.sum() - 1.0).abs() < 1e-12);
        let zero = similarity_profile(&code(vec![0.0; 4]), &samples).unwrap();
        assert!(zero.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!(similarity_profile(&zp, &[]).is_err());
    }

    #[test]
    fn fuse_degenerate_and_uniform_cases() {
        let one = vec![code(vec![0.3, -2.0])];
        let p = similarity_profile(&code(vec![5.0, 1.0]), &one).unwrap();
        assert_eq!(fuse(&p, &one).unwrap().z, one[0].z);
        let samples = vec![code(vec![1.0, 2.0]), code(vec![3.0, -2.0])];
        let p = similarity_profile(&code(vec![0.0, 0.0]), &samples).unwrap();
        assert_eq!(fuse(&p, &samples).unwrap().z, array![2.0, 0.0]);
    }

    #[test]
    fn fusion_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 4;
        let d = 3;
        let samples = Array2::from_shape_fn((k, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let zp = Array1::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0);
        let probe = Array1::from_shape_fn(d, |_| rng.random::<f64>());
        let extra = Array1::from_shape_fn(k, |_| rng.random::<f64>());
        let f = |zp: &Array1<f64>, s: &Array2<f64>| {
            let prof = profile_from_matrix(zp, s);
            s.t().dot(&prof.weights).dot(&probe) + prof.scores.dot(&extra)
        };
        let prof = profile_from_matrix(&zp, &samples);
        let g = fusion_backward(&zp, &samples, &prof, &probe, Some(&extra));
        let h = 1e-6;
        for i in 0..d {
            let mut a = zp.clone();
            a[i] += h;
            let mut b = zp.clone();
            b[i] -= h;
            let fd = (f(&a, &samples) - f(&b, &samples)) / (2.0 * h);
            assert!((fd - g.d_z_proj[i]).abs() < 1e-8);
        }
        for idx in [(0, 0), (3, 2), (1, 1)] {
            let mut a = samples.clone();
            a[idx] += h;
            let mut b = samples.clone();
            b[idx] -= h;
            let fd = (f(&zp, &a) - f(&zp, &b)) / (2.0 * h);
            assert!((fd - g.d_samples[idx]).abs() < 1e-8);
        }
    }
}
