//! Two-stage training.
//!
//! Stage 1 trains the backbone on `L_seg + L_KL + L_bound`. Stage 2 trains
//! the prompt projection (and optionally the backbone) on
//! `L_seg + alpha L_text + beta L_sim`. Both loops are single-threaded and
//! consume one seeded generator in a fixed order, so runs are bit-reproducible.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{standard_noise, BackboneConfig, EncoderOutput, LatentGaussian, ProbUNet};
use crate::checkpoint::{self, SaveOptions};
use crate::dataset::{Dataset, Split};
use crate::error::{ensure, Error, Result};
use crate::losses::{
    dice_loss_grad, gram_bce, gram_bce_grad, kl_divergence_grad, normalize_rows,
    normalize_rows_backward, boundary_loss_grad, ContrastiveBatch, EnsemblePrediction,
    ExpertBounds, LossConfig, Stage1Breakdown, Stage2Breakdown,
};
use crate::metrics::{self, EvalConfig};
use crate::model::{draw_prior_samples, ProsonaModel};
use crate::nn::{Adam, Parameters};
use crate::prompt::{
    encode_text, fusion_backward, profile_from_matrix, ProjectionMlp, TextEncoder,
    TextEncoderSpec,
};
use crate::synthetic::Case;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Latent samples per image.
    pub k: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 8,
            k: 10,
        }
    }
}

impl StageConfig {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.epochs >= 1
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size >= 1
            && self.k >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name}: epochs, learning_rate, batch_size and k must be positive"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    Stage2MlpOnly,
    Stage2Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// `fallback` or `external:<path>`.
    pub text_encoder: String,
    /// Height and width are taken from the dataset.
    pub model: BackboneConfig,
    pub loss: LossConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub trainable_set: TrainableSet,
    pub stage1_checkpoint: Option<PathBuf>,
    /// Prompt texts used per annotator in each stage-2 step.
    pub prompt_variants: usize,
    pub zero_init_projection: bool,
    /// Latent samples per image during validation.
    pub eval_k: usize,
    /// Caps the validation split (first cases in manifest order).
    pub max_val_cases: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            text_encoder: "fallback".into(),
            model: BackboneConfig::default(),
            loss: LossConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            trainable_set: TrainableSet::Stage2MlpOnly,
            stage1_checkpoint: None,
            prompt_variants: 2,
            zero_init_projection: false,
            eval_k: 10,
            max_val_cases: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        if self.prompt_variants == 0 || self.eval_k == 0 {
            return Err(Error::Config("prompt_variants and eval_k must be positive".into()));
        }
        TextEncoderSpec::parse(&self.text_encoder)?;
        Ok(())
    }
}

fn scale_params<P: Parameters>(p: &mut P, s: f64) {
    p.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x *= s));
}

/// Noise consumed by one stage-1 case: the annotator whose mask conditions
/// the posterior, the posterior draw, and the K prior draws for `L_bound`.
#[derive(Debug, Clone)]
pub struct Stage1Noise {
    pub annotator: usize,
    pub eps_posterior: Array1<f64>,
    pub eps_prior: Vec<Array1<f64>>,
}

impl Stage1Noise {
    pub fn draw<R: Rng + ?Sized>(annotators: usize, dim: usize, k: usize, rng: &mut R) -> Self {
        let annotator = rng.random_range(0..annotators);
        let eps_posterior = standard_noise(dim, rng);
        let eps_prior = (0..k).map(|_| standard_noise(dim, rng)).collect();
        Self {
            annotator,
            eps_posterior,
            eps_prior,
        }
    }
}

/// Stage-1 loss of one case; with `grads`, also accumulates its gradient.
pub fn stage1_case(
    net: &ProbUNet,
    image: &Array2<f64>,
    masks: &[Array2<f64>],
    noise: &Stage1Noise,
    cfg: &LossConfig,
    grads: Option<&mut ProbUNet>,
) -> Result<Stage1Breakdown> {
    ensure(noise.annotator < masks.len(), || "annotator index out of range".into())?;
    let target = &masks[noise.annotator];
    let enc = net.encode(image)?;
    let prior = net.prior_head(&enc.output);
    let post = net.posterior_head(image, target)?;
    let z_post = post
        .gaussian
        .sample(&noise.eps_posterior, crate::backbone::LatentOrigin::PosteriorSample);
    let dec = net.decode(&enc.output, &z_post)?;
    let (l_seg, d_seg) = dice_loss_grad(dec.map.probs.view(), target.view(), cfg.dice_smooth)?;
    let (l_kl, kl) = kl_divergence_grad(&post.gaussian, &prior.gaussian)?;

    let prior_codes: Vec<_> = noise
        .eps_prior
        .iter()
        .map(|e| prior.gaussian.sample(e, crate::backbone::LatentOrigin::PriorSample))
        .collect();
    let prior_decs = prior_codes
        .iter()
        .map(|z| net.decode(&enc.output, z))
        .collect::<Result<Vec<_>>>()?;
    let ens = EnsemblePrediction::new(prior_decs.iter().map(|d| d.map.probs.clone()).collect())?;
    let bounds = ExpertBounds::from_masks(masks)?;
    let (l_bound, d_bound) = boundary_loss_grad(&ens, &bounds, cfg.dice_smooth)?;
    let breakdown = Stage1Breakdown {
        l_seg,
        l_kl,
        l_bound,
        total: cfg.seg_weight * l_seg + cfg.kl_weight * l_kl + cfg.bound_weight * l_bound,
    };
    let Some(g) = grads else {
        return Ok(breakdown);
    };

    let d_probs = d_seg * cfg.seg_weight;
    let seg = net.decode_backward(&dec, &d_probs, Some(&mut g.decoder));
    let mut d_features = seg.d_features;
    let mut d_pyramid = seg.d_pyramid;
    let d_mu_q = &kl.d_mu_q * cfg.kl_weight + &seg.d_z;
    let d_sigma_q = &kl.d_sigma_q * cfg.kl_weight + &(&seg.d_z * &noise.eps_posterior);
    let mut d_mu_p = &kl.d_mu_p * cfg.kl_weight;
    let mut d_sigma_p = &kl.d_sigma_p * cfg.kl_weight;
    for ((dec_k, d_k), eps) in prior_decs.iter().zip(&d_bound).zip(&noise.eps_prior) {
        let d = d_k * cfg.bound_weight;
        let back = net.decode_backward(dec_k, &d, Some(&mut g.decoder));
        d_features += &back.d_features;
        for (acc, x) in d_pyramid.iter_mut().zip(&back.d_pyramid) {
            *acc += x;
        }
        d_mu_p += &back.d_z;
        d_sigma_p += &(&back.d_z * eps);
    }
    d_features += &net.prior_backward(&prior, &d_mu_p, &d_sigma_p, Some(&mut g.prior));
    net.encode_backward(&enc, &d_features, &d_pyramid, &mut g.encoder);
    net.posterior_backward(&post, &d_mu_q, &d_sigma_q, Some(g));
    Ok(breakdown)
}

/// One prompt in a stage-2 step: its frozen embedding and annotator index.
#[derive(Debug, Clone)]
pub struct PromptItem {
    pub text: String,
    pub embedding: Array1<f64>,
    pub annotator: usize,
}

/// Encoder output and prior of an image under a frozen backbone.
#[derive(Debug, Clone)]
pub struct FrozenImage {
    pub encoded: EncoderOutput,
    pub prior: LatentGaussian,
}

impl FrozenImage {
    pub fn new(net: &ProbUNet, image: &Array2<f64>) -> Result<Self> {
        let encoded = net.encode(image)?.output;
        let prior = net.prior_head(&encoded).gaussian;
        Ok(Self { encoded, prior })
    }
}

/// Gradient accumulators for stage 2; `backbone` is `None` when only the
/// projection is trained.
#[derive(Debug, Clone)]
pub struct Stage2Grads {
    pub projection: ProjectionMlp,
    pub backbone: Option<ProbUNet>,
}

/// Stage-2 loss of one image over `prompts`, all fused from the same K prior
/// samples `mu + sigma * eps_k`. `frozen` skips the encoder when the backbone
/// is not trained.
#[allow(clippy::too_many_arguments)]
pub fn stage2_case(
    net: &ProbUNet,
    projection: &ProjectionMlp,
    image: &Array2<f64>,
    masks: &[Array2<f64>],
    prompts: &[PromptItem],
    eps: &[Array1<f64>],
    frozen: Option<&FrozenImage>,
    cfg: &LossConfig,
    grads: Option<&mut Stage2Grads>,
) -> Result<Stage2Breakdown> {
    ensure(!prompts.is_empty(), || "stage 2 needs at least one prompt".into())?;
    ensure(!eps.is_empty(), || "stage 2 needs at least one latent sample".into())?;
    ensure(prompts.iter().all(|p| p.annotator < masks.len()), || {
        "prompt annotator index out of range".into()
    })?;
    let train_backbone = grads.as_ref().is_some_and(|g| g.backbone.is_some());
    let (enc_trace, encoded, prior_trace, prior) = match frozen {
        Some(f) if !train_backbone => (None, f.encoded.clone(), None, f.prior.clone()),
        _ => {
            let t = net.encode(image)?;
            let p = net.prior_head(&t.output);
            let (o, g) = (t.output.clone(), p.gaussian.clone());
            (Some(t), o, Some(p), g)
        }
    };
    let d = prior.dim();
    let k = eps.len();
    let z = Array2::from_shape_fn((k, d), |(i, j)| prior.mu[j] + prior.sigma[j] * eps[i][j]);

    let p_count = prompts.len();
    let mut projected = Vec::with_capacity(p_count);
    let mut profiles = Vec::with_capacity(p_count);
    let mut decodes = Vec::with_capacity(p_count);
    let mut scores = Array2::zeros((p_count, k));
    for (i, item) in prompts.iter().enumerate() {
        let emb = crate::prompt::PromptEmbedding {
            e: item.embedding.clone(),
            source_text: item.text.clone(),
            encoder_id: String::new(),
        };
        let (z_proj, cache) = projection.forward(&emb)?;
        let profile = profile_from_matrix(&z_proj.z, &z);
        scores.row_mut(i).assign(&profile.scores);
        let z_prompt = crate::backbone::LatentCode::new(
            z.t().dot(&profile.weights),
            crate::backbone::LatentOrigin::Fused,
        );
        decodes.push(net.decode(&encoded, &z_prompt)?);
        projected.push((z_proj, cache));
        profiles.push(profile);
    }

    let mut l_seg = 0.0;
    let mut d_seg = Vec::with_capacity(p_count);
    for (item, dec) in prompts.iter().zip(&decodes) {
        let target = &masks[item.annotator];
        let (l, g) = dice_loss_grad(dec.map.probs.view(), target.view(), cfg.dice_smooth)?;
        l_seg += l;
        d_seg.push(g / p_count as f64);
    }
    l_seg /= p_count as f64;

    let annotators: Vec<usize> = prompts.iter().map(|p| p.annotator).collect();
    let m = ContrastiveBatch::positive_mask(&annotators);
    let l_text = if cfg.alpha != 0.0 {
        let emb = ndarray::stack(
            Axis(0),
            &prompts.iter().map(|p| p.embedding.view()).collect::<Vec<_>>(),
        )
        .expect("equal embedding dims");
        let (e, _) = normalize_rows(emb.view());
        Some(gram_bce(e.view(), m.view(), cfg.tau)?)
    } else {
        None
    };
    let (r, norms) = normalize_rows(scores.view());
    let (l_sim, d_scores) = if cfg.beta != 0.0 {
        let (l, d_r) = gram_bce_grad(r.view(), m.view(), cfg.tau)?;
        let d_r = d_r * cfg.beta;
        (Some(l), Some(normalize_rows_backward(r.view(), &norms, d_r.view())))
    } else {
        (None, None)
    };
    let total = l_seg + cfg.alpha * l_text.unwrap_or(0.0) + cfg.beta * l_sim.unwrap_or(0.0);
    let breakdown = Stage2Breakdown {
        l_seg,
        l_text,
        l_sim,
        total,
    };
    let Some(g) = grads else {
        return Ok(breakdown);
    };

    // L_text depends only on the frozen embeddings and contributes no gradient.
    let mut d_z = Array2::<f64>::zeros((k, d));
    let mut d_features: Option<Array3<f64>> = None;
    let mut d_pyramid: Option<Vec<Array3<f64>>> = None;
    for i in 0..p_count {
        let back = net.decode_backward(
            &decodes[i],
            &d_seg[i],
            g.backbone.as_mut().map(|b| &mut b.decoder),
        );
        let extra = d_scores.as_ref().map(|ds| ds.row(i).to_owned());
        let fg = fusion_backward(&projected[i].0.z, &z, &profiles[i], &back.d_z, extra.as_ref());
        projection.backward(&projected[i].1, &fg.d_z_proj, &mut g.projection);
        d_z += &fg.d_samples;
        if train_backbone {
            match d_features.as_mut() {
                Some(f) => *f += &back.d_features,
                None => d_features = Some(back.d_features),
            }
            match d_pyramid.as_mut() {
                Some(p) => {
                    for (acc, x) in p.iter_mut().zip(&back.d_pyramid) {
                        *acc += x;
                    }
                }
                None => d_pyramid = Some(back.d_pyramid),
            }
        }
    }
    if let (Some(bg), Some(enc), Some(prior_trace)) = (g.backbone.as_mut(), &enc_trace, &prior_trace) {
        let d_mu = d_z.sum_axis(Axis(0));
        let mut d_sigma = Array1::zeros(d);
        for (row, e) in d_z.axis_iter(Axis(0)).zip(eps) {
            d_sigma += &(&row * e);
        }
        let mut d_feat = d_features.expect("accumulated above");
        d_feat += &net.prior_backward(prior_trace, &d_mu, &d_sigma, Some(&mut bg.prior));
        net.encode_backward(enc, &d_feat, &d_pyramid.expect("accumulated above"), &mut bg.encoder);
    }
    Ok(breakdown)
}

/// JSON-lines log writer.
pub struct TrainLog {
    out: std::io::BufWriter<std::fs::File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: std::io::BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(record).expect("log record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("training log", e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_ged: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dice_match: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub best_epoch: usize,
    pub best_val_ged: f64,
    pub history: Vec<EpochRecord>,
    pub final_checksum: String,
}

/// Cases of a split loaded into memory, with masks as 0/1 reals.
pub struct LoadedSplit {
    pub cases: Vec<Case>,
    pub masks: Vec<Vec<Array2<f64>>>,
}

impl LoadedSplit {
    pub fn load(ds: &Dataset, split: Split, limit: Option<usize>) -> Result<Self> {
        let mut ids = ds.split_ids(split);
        if let Some(n) = limit {
            ids.truncate(n);
        }
        if ids.is_empty() {
            return Err(Error::Config(format!("split {split} is empty")));
        }
        let cases = ids
            .iter()
            .map(|id| ds.load_case(id))
            .collect::<Result<Vec<_>>>()?;
        let masks = cases.iter().map(Case::masks_f64).collect();
        Ok(Self { cases, masks })
    }
}

fn non_finite(step: usize, what: &str, value: f64, param_norm: f64) -> Error {
    Error::NonFiniteLoss {
        step,
        diagnostics: format!("{what} = {value}; parameter norm {param_norm:.6e}"),
    }
}

fn val_seed(seed: u64) -> u64 {
    crate::derive_seed(seed, &[0x7a1])
}

/// Mean over cases of the GED between K prior-sample masks and the experts.
pub fn sample_ged(net: &ProbUNet, cases: &[Case], k: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, case) in cases.iter().enumerate() {
        let enc = net.encode(&case.image)?.output;
        let prior = net.prior_head(&enc).gaussian;
        let preds = draw_prior_samples(&prior, k, metrics::case_seed(seed, i))?
            .iter()
            .map(|z| Ok(net.decode(&enc, z)?.map.threshold(0.5)))
            .collect::<Result<Vec<_>>>()?;
        total += metrics::ged(&preds, &case.masks)?;
    }
    Ok(total / cases.len() as f64)
}

fn prepare_dirs(out: &Path) -> Result<(PathBuf, PathBuf)> {
    let best = out.join("best");
    let last = out.join("last");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok((best, last))
}

fn dataset_backbone(cfg: &TrainConfig, ds: &Dataset) -> BackboneConfig {
    let mut b = cfg.model;
    b.height = ds.manifest.config.height;
    b.width = ds.manifest.config.width;
    b
}

/// Stage 1. Writes `out/best`, `out/last` and `out/train_log.jsonl`.
pub fn train_stage1(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_dir)?;
    let train = LoadedSplit::load(&ds, Split::Train, None)?;
    let val = LoadedSplit::load(&ds, Split::Val, cfg.max_val_cases)?;
    let a = ds.manifest.annotators();
    if cfg.stage1.k < 2 {
        return Err(Error::Config("stage-1 k must be at least 2 for the boundary loss".into()));
    }
    let sc = cfg.stage1;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[0x51]));
    let mut init_rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[0x1a]));
    let mut net = ProbUNet::new(dataset_backbone(cfg, &ds), &mut init_rng)?;
    let spec = TextEncoderSpec::parse(&cfg.text_encoder)?;
    let mut opt = Adam::new(sc.learning_rate);
    let (best_dir, last_dir) = prepare_dirs(out)?;
    let mut log = TrainLog::create(&out.join("train_log.jsonl"))?;

    let vseed = val_seed(cfg.seed);
    let initial = sample_ged(&net, &val.cases, cfg.eval_k, vseed)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_ged: initial,
        val_dice_match: None,
    }];
    log.write(&serde_json::json!({"stage": 1, "epoch": 0, "val_ged": initial}))?;

    let mut best = (f64::INFINITY, 0usize);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.cases.len()).collect();
    for epoch in 1..=sc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(sc.batch_size) {
            let mut grads = net.zeros_like();
            let mut sum = Stage1Breakdown {
                l_seg: 0.0,
                l_kl: 0.0,
                l_bound: 0.0,
                total: 0.0,
            };
            for &i in batch {
                let noise = Stage1Noise::draw(a, net.latent_dim(), sc.k, &mut rng);
                let b = stage1_case(
                    &net,
                    &train.cases[i].image,
                    &train.masks[i],
                    &noise,
                    &cfg.loss,
                    Some(&mut grads),
                )?;
                if !b.total.is_finite() {
                    return Err(non_finite(
                        step,
                        &format!("stage-1 loss on {} ({b:?})", train.cases[i].case_id),
                        b.total,
                        net.squared_norm().sqrt(),
                    ));
                }
                sum.l_seg += b.l_seg;
                sum.l_kl += b.l_kl;
                sum.l_bound += b.l_bound;
                sum.total += b.total;
            }
            let n = batch.len() as f64;
            scale_params(&mut grads, 1.0 / n);
            opt.step(&mut net, &grads);
            let mean = Stage1Breakdown {
                l_seg: sum.l_seg / n,
                l_kl: sum.l_kl / n,
                l_bound: sum.l_bound / n,
                total: sum.total / n,
            };
            epoch_loss += sum.total;
            log.write(&serde_json::json!({
                "stage": 1, "epoch": epoch, "step": step,
                "l_seg": mean.l_seg, "l_kl": mean.l_kl, "l_bound": mean.l_bound,
                "total": mean.total,
            }))?;
            step += 1;
        }
        let val_ged = sample_ged(&net, &val.cases, cfg.eval_k, vseed)?;
        let train_loss = epoch_loss / train.cases.len() as f64;
        log.write(&serde_json::json!({
            "stage": 1, "epoch": epoch, "train_loss": train_loss, "val_ged": val_ged,
        }))?;
        history.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_ged,
            val_dice_match: None,
        });
        let model = ProsonaModel::new(net.clone(), None, spec.clone())?;
        if val_ged < best.0 {
            best = (val_ged, epoch);
            checkpoint::save(
                &model,
                &best_dir,
                &SaveOptions {
                    stage: 1,
                    tag: "best".into(),
                    epoch,
                    seed: cfg.seed,
                    parent: None,
                    metrics: serde_json::json!({"val_ged": val_ged}),
                },
            )?;
        }
        if epoch == sc.epochs {
            checkpoint::save(
                &model,
                &last_dir,
                &SaveOptions {
                    stage: 1,
                    tag: "last".into(),
                    epoch,
                    seed: cfg.seed,
                    parent: None,
                    metrics: serde_json::json!({"val_ged": val_ged}),
                },
            )?;
        }
    }
    Ok(TrainOutcome {
        best: best_dir,
        last: last_dir,
        best_epoch: best.1,
        best_val_ged: best.0,
        history,
        final_checksum: checkpoint::parameter_checksum(&net),
    })
}

/// Prompt texts per annotator, in annotator order.
pub fn style_prompts(ds: &Dataset) -> Vec<Vec<String>> {
    ds.manifest
        .styles
        .iter()
        .map(|s| s.prompt_texts.clone())
        .collect()
}

/// The first prompt of every annotator, used for evaluation.
pub fn eval_prompts(ds: &Dataset) -> Vec<String> {
    style_prompts(ds).into_iter().map(|p| p[0].clone()).collect()
}

fn check_catalog<'a>(catalog: &[Vec<String>], cases: impl Iterator<Item = &'a Case>) -> Result<()> {
    if let Some(i) = catalog.iter().position(|p| p.is_empty()) {
        return Err(Error::Config(format!("annotator {i} has no prompt texts")));
    }
    for c in cases {
        if c.annotators() != catalog.len() {
            return Err(Error::Config(format!(
                "prompt catalog covers {} annotators but case {} has {}",
                catalog.len(),
                c.case_id,
                c.annotators()
            )));
        }
    }
    Ok(())
}

fn embed_catalog(
    catalog: &[Vec<String>],
    encoder: &dyn TextEncoder,
) -> Result<Vec<Vec<PromptItem>>> {
    catalog
        .iter()
        .enumerate()
        .map(|(a, texts)| {
            texts
                .iter()
                .map(|t| {
                    Ok(PromptItem {
                        text: t.clone(),
                        embedding: encode_text(t, encoder)?.e,
                        annotator: a,
                    })
                })
                .collect()
        })
        .collect()
}

/// Stage 2 from `cfg.stage1_checkpoint`. Writes `out/best`, `out/last` and
/// `out/train_log.jsonl`; model selection uses the prompted-prediction GED on
/// the validation split.
pub fn train_stage2(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ckpt = cfg.stage1_checkpoint.as_ref().ok_or_else(|| {
        Error::Config("stage 2 requires stage1_checkpoint".into())
    })?;
    let ds = Dataset::open(&cfg.data_dir)?;
    let (stage1, meta) = checkpoint::load(ckpt, None)?;
    if meta.backbone.height != ds.manifest.config.height
        || meta.backbone.width != ds.manifest.config.width
    {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} images, dataset has {}x{}",
            meta.backbone.height,
            meta.backbone.width,
            ds.manifest.config.height,
            ds.manifest.config.width
        )));
    }
    let catalog = style_prompts(&ds);
    let spec = TextEncoderSpec::parse(&cfg.text_encoder)?;
    let encoder = spec.build()?;
    let items = embed_catalog(&catalog, encoder.as_ref())?;
    let train = LoadedSplit::load(&ds, Split::Train, None)?;
    let val = LoadedSplit::load(&ds, Split::Val, cfg.max_val_cases)?;
    check_catalog(&catalog, train.cases.iter().chain(&val.cases))?;
    let sc = cfg.stage2;

    let mut net = stage1.backbone;
    let mut init_rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[0x2a]));
    let mut projection = ProjectionMlp::new(
        encoder.dim(),
        net.latent_dim(),
        cfg.zero_init_projection,
        &mut init_rng,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[0x52]));
    let full = cfg.trainable_set == TrainableSet::Stage2Full;
    let mut opt_proj = Adam::new(sc.learning_rate);
    let mut opt_net = Adam::new(sc.learning_rate);
    let (best_dir, last_dir) = prepare_dirs(out)?;
    let mut log = TrainLog::create(&out.join("train_log.jsonl"))?;
    let frozen: Vec<FrozenImage> = if full {
        Vec::new()
    } else {
        train
            .cases
            .iter()
            .map(|c| FrozenImage::new(&net, &c.image))
            .collect::<Result<_>>()?
    };
    let prompts = eval_prompts(&ds);
    let vseed = val_seed(cfg.seed);
    let parent = Some(meta.checkpoint_id.clone());
    let evaluate = |net: &ProbUNet, projection: &ProjectionMlp| -> Result<(ProsonaModel, metrics::MetricsReport)> {
        let model = ProsonaModel::new(net.clone(), Some(projection.clone()), spec.clone())?;
        let report = metrics::evaluate(
            &model,
            &val.cases,
            EvalConfig::new("val", cfg.eval_k, vseed, prompts.clone()),
        )?;
        Ok((model, report))
    };

    let (_, initial) = evaluate(&net, &projection)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_ged: initial.aggregate.ged,
        val_dice_match: Some(initial.aggregate.dice_match),
    }];
    log.write(&serde_json::json!({
        "stage": 2, "epoch": 0,
        "val_ged": initial.aggregate.ged, "val_dice_match": initial.aggregate.dice_match,
    }))?;

    let mut best = (f64::INFINITY, 0usize);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.cases.len()).collect();
    for epoch in 1..=sc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(sc.batch_size) {
            let mut grads = Stage2Grads {
                projection: projection.zeros_like(),
                backbone: full.then(|| net.zeros_like()),
            };
            let mut sum = (0.0, 0.0, 0.0, 0.0);
            for &i in batch {
                let mut chosen = Vec::new();
                for variants in &items {
                    let mut idx: Vec<usize> = (0..variants.len()).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(cfg.prompt_variants);
                    idx.sort_unstable();
                    chosen.extend(idx.into_iter().map(|j| variants[j].clone()));
                }
                let eps: Vec<_> = (0..sc.k)
                    .map(|_| standard_noise(net.latent_dim(), &mut rng))
                    .collect();
                let b = stage2_case(
                    &net,
                    &projection,
                    &train.cases[i].image,
                    &train.masks[i],
                    &chosen,
                    &eps,
                    frozen.get(i),
                    &cfg.loss,
                    Some(&mut grads),
                )?;
                if !b.total.is_finite() {
                    return Err(non_finite(
                        step,
                        &format!("stage-2 loss on {} ({b:?})", train.cases[i].case_id),
                        b.total,
                        projection.squared_norm().sqrt(),
                    ));
                }
                sum.0 += b.l_seg;
                sum.1 += b.l_text.unwrap_or(0.0);
                sum.2 += b.l_sim.unwrap_or(0.0);
                sum.3 += b.total;
            }
            let n = batch.len() as f64;
            scale_params(&mut grads.projection, 1.0 / n);
            opt_proj.step(&mut projection, &grads.projection);
            if let Some(g) = grads.backbone.as_mut() {
                scale_params(g, 1.0 / n);
                opt_net.step(&mut net, g);
            }
            epoch_loss += sum.3;
            let mut rec = serde_json::json!({
                "stage": 2, "epoch": epoch, "step": step, "l_seg": sum.0 / n,
            });
            if cfg.loss.alpha != 0.0 {
                rec["l_text"] = (sum.1 / n).into();
            }
            if cfg.loss.beta != 0.0 {
                rec["l_sim"] = (sum.2 / n).into();
            }
            rec["alpha"] = cfg.loss.alpha.into();
            rec["beta"] = cfg.loss.beta.into();
            rec["total"] = (sum.3 / n).into();
            log.write(&rec)?;
            step += 1;
        }
        let (model, report) = evaluate(&net, &projection)?;
        let val_ged = report.aggregate.ged;
        let train_loss = epoch_loss / train.cases.len() as f64;
        log.write(&serde_json::json!({
            "stage": 2, "epoch": epoch, "train_loss": train_loss,
            "val_ged": val_ged, "val_dice_match": report.aggregate.dice_match,
        }))?;
        history.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_ged,
            val_dice_match: Some(report.aggregate.dice_match),
        });
        let metrics_json = serde_json::json!({
            "val_ged": val_ged, "val_dice_match": report.aggregate.dice_match,
            "alpha": cfg.loss.alpha, "beta": cfg.loss.beta, "tau": cfg.loss.tau,
        });
        if val_ged < best.0 {
            best = (val_ged, epoch);
            checkpoint::save(
                &model,
                &best_dir,
                &SaveOptions {
                    stage: 2,
                    tag: "best".into(),
                    epoch,
                    seed: cfg.seed,
                    parent: parent.clone(),
                    metrics: metrics_json.clone(),
                },
            )?;
        }
        if epoch == sc.epochs {
            checkpoint::save(
                &model,
                &last_dir,
                &SaveOptions {
                    stage: 2,
                    tag: "last".into(),
                    epoch,
                    seed: cfg.seed,
                    parent: parent.clone(),
                    metrics: metrics_json,
                },
            )?;
        }
    }
    let final_checksum = if full {
        checkpoint::parameter_checksum(&net)
    } else {
        checkpoint::parameter_checksum(&projection)
    };
    Ok(TrainOutcome {
        best: best_dir,
        last: last_dir,
        best_epoch: best.1,
        best_val_ged: best.0,
        history,
        final_checksum,
    })
}
