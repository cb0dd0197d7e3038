//! Multi-rater evaluation metrics and the majority-vote reference.
//!
//! The GED kernel is `d = 1 - IoU` with two empty masks at distance 0. Dice
//! of two empty masks is 1. Dice Soft averages the soft Dice of every
//! (sample, annotator) pair.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::ProbabilityMap;
use crate::error::{ensure, Error, Result};
use crate::synthetic::Case;

fn check_shapes<'a>(masks: impl IntoIterator<Item = &'a Array2<bool>>) -> Result<()> {
    let mut dim = None;
    for m in masks {
        match dim {
            None => dim = Some(m.dim()),
            Some(d) => ensure(d == m.dim(), || {
                format!("mask shape {:?} does not match {:?}", m.dim(), d)
            })?,
        }
    }
    Ok(())
}

fn counts(a: &Array2<bool>, b: &Array2<bool>) -> (usize, usize, usize, usize) {
    let (mut inter, mut union, mut na, mut nb) = (0, 0, 0, 0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        union += (x || y) as usize;
        na += x as usize;
        nb += y as usize;
    });
    (inter, union, na, nb)
}

pub fn iou_distance(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    check_shapes([a, b])?;
    let (inter, union, _, _) = counts(a, b);
    Ok(if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    })
}

pub fn dice_coefficient(pred: &Array2<bool>, target: &Array2<bool>) -> Result<f64> {
    check_shapes([pred, target])?;
    let (inter, _, np, nt) = counts(pred, target);
    Ok(if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    })
}

/// `2 Σ p·a / (Σ p + Σ a)`; 1 when both sums vanish.
pub fn soft_dice(probs: &Array2<f64>, target: &Array2<bool>) -> Result<f64> {
    ensure(probs.dim() == target.dim(), || {
        format!("map shape {:?} does not match mask {:?}", probs.dim(), target.dim())
    })?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    Zip::from(probs).and(target).for_each(|&p, &t| {
        let t = if t { 1.0 } else { 0.0 };
        inter += p * t;
        sp += p;
        st += t;
    });
    Ok(if sp + st == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + st)
    })
}

fn mean_pairwise(a: &[Array2<bool>], b: &[Array2<bool>]) -> Result<f64> {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += iou_distance(x, y)?;
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// Squared-distance form before clamping; may be slightly negative.
pub fn ged_squared(preds: &[Array2<bool>], experts: &[Array2<bool>]) -> Result<f64> {
    ensure(!preds.is_empty() && !experts.is_empty(), || {
        "GED needs at least one prediction and one expert mask".into()
    })?;
    check_shapes(preds.iter().chain(experts))?;
    Ok(2.0 * mean_pairwise(preds, experts)?
        - mean_pairwise(preds, preds)?
        - mean_pairwise(experts, experts)?)
}

pub fn ged(preds: &[Array2<bool>], experts: &[Array2<bool>]) -> Result<f64> {
    Ok(ged_squared(preds, experts)?.max(0.0).sqrt())
}

pub fn dice_soft(samples: &[ProbabilityMap], experts: &[Array2<bool>]) -> Result<f64> {
    ensure(!samples.is_empty() && !experts.is_empty(), || {
        "Dice Soft needs at least one sample and one expert mask".into()
    })?;
    let mut total = 0.0;
    for s in samples {
        for a in experts {
            total += soft_dice(&s.probs, a)?;
        }
    }
    Ok(100.0 * total / (samples.len() * experts.len()) as f64)
}

pub fn dice_max(preds: &[Array2<bool>], experts: &[Array2<bool>]) -> Result<f64> {
    ensure(!preds.is_empty() && !experts.is_empty(), || {
        "Dice Max needs at least one prediction and one expert mask".into()
    })?;
    let mut total = 0.0;
    for a in experts {
        let mut best = 0.0f64;
        for p in preds {
            best = best.max(dice_coefficient(p, a)?);
        }
        total += best;
    }
    Ok(100.0 * total / experts.len() as f64)
}

/// Per-annotator Dice (percent) of the prediction for annotator `i`'s prompt.
pub fn dice_match_per_annotator(
    prompted: &[Array2<bool>],
    experts: &[Array2<bool>],
) -> Result<Vec<f64>> {
    ensure(!experts.is_empty(), || "Dice Match needs expert masks".into())?;
    ensure(prompted.len() == experts.len(), || {
        format!(
            "{} prompted predictions for {} annotators",
            prompted.len(),
            experts.len()
        )
    })?;
    prompted
        .iter()
        .zip(experts)
        .map(|(p, a)| dice_coefficient(p, a).map(|d| 100.0 * d))
        .collect()
}

pub fn dice_match(prompted: &[Array2<bool>], experts: &[Array2<bool>]) -> Result<f64> {
    let per = dice_match_per_annotator(prompted, experts)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MajorityVote {
    pub majority: Array2<bool>,
    /// Union of all annotations minus the majority mask.
    pub omitted: Array2<bool>,
}

/// A pixel is on when strictly more than half of the annotators mark it.
pub fn majority_vote(experts: &[Array2<bool>]) -> Result<MajorityVote> {
    ensure(!experts.is_empty(), || "majority vote needs expert masks".into())?;
    check_shapes(experts)?;
    let dim = experts[0].dim();
    let mut votes = Array2::<usize>::zeros(dim);
    for m in experts {
        Zip::from(&mut votes).and(m).for_each(|v, &b| *v += b as usize);
    }
    let a = experts.len();
    let majority = votes.mapv(|v| 2 * v > a);
    let omitted = Zip::from(&votes)
        .and(&majority)
        .map_collect(|&v, &m| v > 0 && !m);
    Ok(MajorityVote { majority, omitted })
}

/// Predictions for one image: K unconditional samples and one map per prompt,
/// all drawn from the same K prior samples.
#[derive(Debug, Clone)]
pub struct CasePredictions {
    pub samples: Vec<ProbabilityMap>,
    pub prompted: Vec<ProbabilityMap>,
}

/// A model that can be evaluated.
pub trait Segmenter {
    fn predict_case(
        &self,
        image: &Array2<f64>,
        prompts: &[String],
        k: usize,
        seed: u64,
    ) -> Result<CasePredictions>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split: String,
    pub k: usize,
    pub threshold: f64,
    pub seed: u64,
    /// One prompt per annotator, in annotator order.
    pub prompts: Vec<String>,
    /// Which prediction set `ged` compares with the experts.
    pub ged_predictions: String,
    pub ged_kernel: String,
    pub ged_clamped_at_zero: bool,
    pub dice_soft_definition: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ged: f64,
    pub ged_samples: f64,
    pub dice_soft: f64,
    pub dice_max: f64,
    pub dice_match: f64,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// GED between the prompted predictions and the expert masks.
    pub ged: f64,
    /// Raw estimator before clamping.
    pub ged_squared: f64,
    /// GED between the K unconditional samples and the expert masks.
    pub ged_samples: f64,
    pub dice_soft: f64,
    pub dice_max: f64,
    pub dice_match: f64,
    pub dice_match_per_annotator: Vec<f64>,
    /// Foreground pixels of each prompted prediction, in annotator order.
    pub prompted_areas: Vec<usize>,
    pub expert_areas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorMetrics {
    pub annotator: usize,
    pub prompt: String,
    pub dice_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub aggregate: Aggregate,
    pub per_case: Vec<CaseMetrics>,
    pub per_annotator: Vec<AnnotatorMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut s = self.to_json();
        s.push('\n');
        crate::imageio::write_bytes(path, s.as_bytes())
    }
}

/// Seed used for case `index` of an evaluation run.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    crate::derive_seed(seed, &[0xe1, index as u64])
}

/// Evaluates `model` on `cases`; case `i` is predicted with `case_seed(seed, i)`.
pub fn evaluate(
    model: &dyn Segmenter,
    cases: &[Case],
    config: EvalConfig,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Config(format!("split {:?} has no cases", config.split)));
    }
    ensure(config.k >= 1, || "K must be at least 1".into())?;
    let a = cases[0].annotators();
    ensure(config.prompts.len() == a, || {
        format!("{} prompts given for {a} annotators", config.prompts.len())
    })?;
    let mut per_case = Vec::with_capacity(cases.len());
    for (idx, case) in cases.iter().enumerate() {
        ensure(case.annotators() == a, || {
            format!("case {} has {} masks, expected {a}", case.case_id, case.annotators())
        })?;
        let seed = case_seed(config.seed, idx);
        let preds = model.predict_case(&case.image, &config.prompts, config.k, seed)?;
        ensure(preds.prompted.len() == a, || {
            format!("model returned {} prompted maps for {a} prompts", preds.prompted.len())
        })?;
        let samples = preds.samples;
        let binary: Vec<_> = samples.iter().map(|s| s.threshold(config.threshold)).collect();
        let prompted: Vec<_> = preds
            .prompted
            .iter()
            .map(|m| m.threshold(config.threshold))
            .collect();
        let g2 = ged_squared(&prompted, &case.masks)?;
        let per_ann = dice_match_per_annotator(&prompted, &case.masks)?;
        per_case.push(CaseMetrics {
            case_id: case.case_id.clone(),
            ged: g2.max(0.0).sqrt(),
            ged_squared: g2,
            ged_samples: ged(&binary, &case.masks)?,
            dice_soft: dice_soft(&samples, &case.masks)?,
            dice_max: dice_max(&binary, &case.masks)?,
            dice_match: per_ann.iter().sum::<f64>() / a as f64,
            dice_match_per_annotator: per_ann,
            prompted_areas: prompted.iter().map(crate::synthetic::area).collect(),
            expert_areas: case.masks.iter().map(crate::synthetic::area).collect(),
        });
    }
    let n = per_case.len() as f64;
    let mean = |f: fn(&CaseMetrics) -> f64| per_case.iter().map(f).sum::<f64>() / n;
    let per_annotator: Vec<AnnotatorMetrics> = (0..a)
        .map(|i| AnnotatorMetrics {
            annotator: i + 1,
            prompt: config.prompts[i].clone(),
            dice_match: per_case
                .iter()
                .map(|c| c.dice_match_per_annotator[i])
                .sum::<f64>()
                / n,
        })
        .collect();
    let aggregate = Aggregate {
        ged: mean(|c| c.ged),
        ged_samples: mean(|c| c.ged_samples),
        dice_soft: mean(|c| c.dice_soft),
        dice_max: mean(|c| c.dice_max),
        dice_match: mean(|c| c.dice_match),
        mean_dice: per_annotator.iter().map(|p| p.dice_match).sum::<f64>() / a as f64,
    };
    Ok(MetricsReport {
        config,
        aggregate,
        per_case,
        per_annotator,
    })
}

impl EvalConfig {
    pub fn new(split: &str, k: usize, seed: u64, prompts: Vec<String>) -> Self {
        Self {
            split: split.to_string(),
            k,
            threshold: 0.5,
            seed,
            prompts,
            ged_predictions: "one prompted prediction per annotator".into(),
            ged_kernel: "1 - IoU (both empty: 0)".into(),
            ged_clamped_at_zero: true,
            dice_soft_definition: "mean soft Dice over all sample x annotator pairs".into(),
        }
    }
}
