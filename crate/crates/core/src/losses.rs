//! Training objectives for both stages, each paired with its analytic gradient.
//!
//! Stage 1: soft Dice, diagonal-Gaussian KL, and the boundary term that matches
//! the ensemble's soft intersection/union (elementwise min/max over the K
//! sampled maps) to the experts' intersection/union. Stage 2: Dice plus two
//! BCE-with-logits terms over temperature-scaled Gram matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::LatentGaussian;
use crate::error::{ensure, Error, Result};
use crate::nn::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub dice_smooth: f64,
    pub seg_weight: f64,
    pub kl_weight: f64,
    pub bound_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau: 0.1,
            dice_smooth: 1.0,
            seg_weight: 1.0,
            kl_weight: 1.0,
            bound_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.alpha >= 0.0 && self.beta >= 0.0, || {
            "alpha and beta must be non-negative".into()
        })?;
        ensure(self.tau > 0.0, || format!("tau must be positive, got {}", self.tau))?;
        ensure(self.dice_smooth > 0.0, || "dice_smooth must be positive".into())?;
        ensure(
            self.seg_weight >= 0.0 && self.kl_weight >= 0.0 && self.bound_weight >= 0.0,
            || "stage-1 term weights must be non-negative".into(),
        )
    }
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    ensure(a.dim() == b.dim(), || {
        format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())
    })
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, smooth: f64) -> Result<f64> {
    check_same_shape(pred, target)?;
    let inter = (&pred * &target).sum();
    let total = pred.sum() + target.sum();
    Ok(1.0 - (2.0 * inter + smooth) / (total + smooth))
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    smooth: f64,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred, target)?;
    let inter = (&pred * &target).sum();
    let denom = pred.sum() + target.sum() + smooth;
    let numer = 2.0 * inter + smooth;
    let grad = target.mapv(|t| -(2.0 * t * denom - numer) / (denom * denom));
    Ok((1.0 - numer / denom, grad))
}

fn check_gaussians(q: &LatentGaussian, p: &LatentGaussian) -> Result<()> {
    ensure(q.dim() == p.dim(), || {
        format!("latent dims differ: {} vs {}", q.dim(), p.dim())
    })?;
    ensure(
        q.sigma.iter().chain(p.sigma.iter()).all(|&s| s > 0.0),
        || "sigma must be strictly positive".into(),
    )
}

/// `KL(q || p)` between diagonal Gaussians, summed over dimensions.
pub fn kl_divergence(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    check_gaussians(q, p)?;
    let mut acc = 0.0;
    for d in 0..q.dim() {
        let (mq, sq, mp, sp) = (q.mu[d], q.sigma[d], p.mu[d], p.sigma[d]);
        acc += (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(acc)
}

/// Partial derivatives of [`kl_divergence`] with respect to both Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub d_mu_q: Array1<f64>,
    pub d_sigma_q: Array1<f64>,
    pub d_mu_p: Array1<f64>,
    pub d_sigma_p: Array1<f64>,
}

pub fn kl_divergence_grad(q: &LatentGaussian, p: &LatentGaussian) -> Result<(f64, KlGrad)> {
    let value = kl_divergence(q, p)?;
    let n = q.dim();
    let mut g = KlGrad {
        d_mu_q: Array1::zeros(n),
        d_sigma_q: Array1::zeros(n),
        d_mu_p: Array1::zeros(n),
        d_sigma_p: Array1::zeros(n),
    };
    for d in 0..n {
        let (mq, sq, mp, sp) = (q.mu[d], q.sigma[d], p.mu[d], p.sigma[d]);
        let diff = mq - mp;
        let sp2 = sp * sp;
        g.d_mu_q[d] = diff / sp2;
        g.d_mu_p[d] = -diff / sp2;
        g.d_sigma_q[d] = -1.0 / sq + sq / sp2;
        g.d_sigma_p[d] = 1.0 / sp - (sq * sq + diff * diff) / (sp2 * sp);
    }
    Ok((value, g))
}

/// K sampled probability maps with their elementwise min (soft intersection)
/// and max (soft union).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub samples: Vec<Array2<f64>>,
    pub p_intersection: Array2<f64>,
    pub p_union: Array2<f64>,
    argmin: Array2<usize>,
    argmax: Array2<usize>,
}

impl EnsemblePrediction {
    pub fn new(samples: Vec<Array2<f64>>) -> Result<Self> {
        ensure(!samples.is_empty(), || "ensemble needs at least one sample".into())?;
        let dim = samples[0].dim();
        ensure(samples.iter().all(|s| s.dim() == dim), || {
            "ensemble samples differ in shape".into()
        })?;
        let mut p_intersection = samples[0].clone();
        let mut p_union = samples[0].clone();
        let mut argmin = Array2::zeros(dim);
        let mut argmax = Array2::zeros(dim);
        for (k, s) in samples.iter().enumerate().skip(1) {
            Zip::from(&mut p_intersection)
                .and(&mut argmin)
                .and(s)
                .for_each(|m, a, &v| {
                    if v < *m {
                        *m = v;
                        *a = k;
                    }
                });
            Zip::from(&mut p_union)
                .and(&mut argmax)
                .and(s)
                .for_each(|m, a, &v| {
                    if v > *m {
                        *m = v;
                        *a = k;
                    }
                });
        }
        Ok(Self {
            samples,
            p_intersection,
            p_union,
            argmin,
            argmax,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Intersection (AND) and union (OR) of a case's expert masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBounds {
    pub a_intersection: Array2<f64>,
    pub a_union: Array2<f64>,
}

impl ExpertBounds {
    pub fn from_masks(masks: &[Array2<f64>]) -> Result<Self> {
        ensure(!masks.is_empty(), || "need at least one expert mask".into())?;
        let dim = masks[0].dim();
        ensure(masks.iter().all(|m| m.dim() == dim), || {
            "expert masks differ in shape".into()
        })?;
        let mut a_intersection = masks[0].clone();
        let mut a_union = masks[0].clone();
        for m in &masks[1..] {
            Zip::from(&mut a_intersection).and(m).for_each(|a, &b| *a = a.min(b));
            Zip::from(&mut a_union).and(m).for_each(|a, &b| *a = a.max(b));
        }
        Ok(Self {
            a_intersection,
            a_union,
        })
    }
}

pub fn boundary_loss(ens: &EnsemblePrediction, bounds: &ExpertBounds, smooth: f64) -> Result<f64> {
    ensure_ensemble(ens)?;
    Ok(dice_loss(ens.p_intersection.view(), bounds.a_intersection.view(), smooth)?
        + dice_loss(ens.p_union.view(), bounds.a_union.view(), smooth)?)
}

fn ensure_ensemble(ens: &EnsemblePrediction) -> Result<()> {
    if ens.len() < 2 {
        return Err(Error::Config(format!(
            "boundary loss needs K >= 2 samples, got {}",
            ens.len()
        )));
    }
    Ok(())
}

/// Boundary loss and per-sample gradients. Each pixel's intersection
/// (union) gradient is routed to the sample attaining the min (max), first
/// index on ties.
pub fn boundary_loss_grad(
    ens: &EnsemblePrediction,
    bounds: &ExpertBounds,
    smooth: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    ensure_ensemble(ens)?;
    let (li, gi) = dice_loss_grad(ens.p_intersection.view(), bounds.a_intersection.view(), smooth)?;
    let (lu, gu) = dice_loss_grad(ens.p_union.view(), bounds.a_union.view(), smooth)?;
    let mut grads = vec![Array2::zeros(ens.p_union.dim()); ens.len()];
    for ((idx, &k), &g) in ens.argmin.indexed_iter().zip(gi.iter()) {
        grads[k][idx] += g;
    }
    for ((idx, &k), &g) in ens.argmax.indexed_iter().zip(gu.iter()) {
        grads[k][idx] += g;
    }
    Ok((li + lu, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Breakdown {
    pub l_seg: f64,
    pub l_kl: f64,
    pub l_bound: f64,
    pub total: f64,
}

/// `w_seg * Dice(pred, a) + w_kl * KL(q || p) + w_bound * L_bound`; all weights
/// default to one.
pub fn stage1_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    q: &LatentGaussian,
    p: &LatentGaussian,
    ens: &EnsemblePrediction,
    bounds: &ExpertBounds,
    cfg: &LossConfig,
) -> Result<Stage1Breakdown> {
    let l_seg = dice_loss(pred, target, cfg.dice_smooth)?;
    let l_kl = kl_divergence(q, p)?;
    let l_bound = boundary_loss(ens, bounds, cfg.dice_smooth)?;
    Ok(Stage1Breakdown {
        l_seg,
        l_kl,
        l_bound,
        total: cfg.seg_weight * l_seg + cfg.kl_weight * l_kl + cfg.bound_weight * l_bound,
    })
}

/// Row-normalised prompt embeddings `E`, row-normalised similarity profiles
/// `R`, and the positive-pair mask `M` for one contrastive step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub e: Array2<f64>,
    pub r: Array2<f64>,
    pub m: Array2<f64>,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn new(e: Array2<f64>, r: Array2<f64>, m: Array2<f64>, tau: f64) -> Result<Self> {
        let p = m.nrows();
        ensure(tau > 0.0, || format!("tau must be positive, got {tau}"))?;
        ensure(m.dim() == (p, p), || "M must be square".into())?;
        ensure(e.nrows() == p && r.nrows() == p, || {
            format!(
                "E has {} rows and R has {} rows but M is {p}x{p}",
                e.nrows(),
                r.nrows()
            )
        })?;
        for i in 0..p {
            ensure(m[[i, i]] == 1.0, || "M must have a unit diagonal".into())?;
            for j in 0..p {
                ensure(m[[i, j]] == m[[j, i]], || "M must be symmetric".into())?;
                ensure(m[[i, j]] == 0.0 || m[[i, j]] == 1.0, || "M must be binary".into())?;
            }
        }
        for (name, x) in [("E", &e), ("R", &r)] {
            for row in x.axis_iter(Axis(0)) {
                let n = row.dot(&row).sqrt();
                ensure((n - 1.0).abs() < 1e-9, || {
                    format!("rows of {name} must be unit-norm, found norm {n}")
                })?;
            }
        }
        Ok(Self { e, r, m, tau })
    }

    /// `M[i][j] = 1` iff prompts `i` and `j` belong to the same annotator.
    pub fn positive_mask(annotators: &[usize]) -> Array2<f64> {
        let p = annotators.len();
        Array2::from_shape_fn((p, p), |(i, j)| f64::from(annotators[i] == annotators[j]))
    }
}

/// Mean BCE-with-logits between `X X^T / tau` and `M` over all `P^2` entries.
pub fn gram_bce(x: ArrayView2<f64>, m: ArrayView2<f64>, tau: f64) -> Result<f64> {
    ensure(tau > 0.0, || format!("tau must be positive, got {tau}"))?;
    let g = x.dot(&x.t());
    check_same_shape(g.view(), m)?;
    let n = g.len() as f64;
    Ok(Zip::from(&g)
        .and(&m)
        .fold(0.0, |acc, &gij, &mij| {
            let logit = gij / tau;
            acc + softplus(logit) - mij * logit
        })
        / n)
}

/// [`gram_bce`] and its gradient with respect to `X`.
pub fn gram_bce_grad(
    x: ArrayView2<f64>,
    m: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let value = gram_bce(x, m, tau)?;
    let g = x.dot(&x.t());
    let n = g.len() as f64;
    let mut d_g = g.clone();
    Zip::from(&mut d_g)
        .and(&g)
        .and(&m)
        .for_each(|d, &gij, &mij| *d = (sigmoid(gij / tau) - mij) / (tau * n));
    let sym = &d_g + &d_g.t();
    Ok((value, sym.dot(&x)))
}

pub fn text_contrastive(batch: &ContrastiveBatch) -> Result<f64> {
    gram_bce(batch.e.view(), batch.m.view(), batch.tau)
}

pub fn sim_contrastive(batch: &ContrastiveBatch) -> Result<f64> {
    gram_bce(batch.r.view(), batch.m.view(), batch.tau)
}

/// Normalises each row to unit length; rows with norm below `1e-12` are
/// divided by `1e-12` instead.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let mut out = x.to_owned();
    for (mut row, &n) in out.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= n;
    }
    (out, norms)
}

/// Pulls a gradient on normalised rows back to the raw rows.
pub fn normalize_rows_backward(
    normalized: ArrayView2<f64>,
    norms: &Array1<f64>,
    d_normalized: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = d_normalized.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let r = normalized.row(i);
        if norms[i] <= 1e-12 {
            row /= 1e-12;
            continue;
        }
        let proj = r.dot(&row);
        row.scaled_add(-proj, &r);
        row /= norms[i];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Breakdown {
    pub l_seg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sim: Option<f64>,
    pub total: f64,
}

/// `mean_p Dice(pred_p, target_p) + alpha L_text + beta L_sim`. A contrastive
/// term with zero weight is not evaluated and reported as `None`.
pub fn stage2_loss(
    preds: &[(ArrayView2<f64>, ArrayView2<f64>)],
    batch: &ContrastiveBatch,
    cfg: &LossConfig,
) -> Result<Stage2Breakdown> {
    ensure(!preds.is_empty(), || "stage-2 loss needs at least one prediction".into())?;
    let mut l_seg = 0.0;
    for (p, t) in preds {
        l_seg += dice_loss(*p, *t, cfg.dice_smooth)?;
    }
    l_seg /= preds.len() as f64;
    let l_text = (cfg.alpha != 0.0)
        .then(|| text_contrastive(batch))
        .transpose()?;
    let l_sim = (cfg.beta != 0.0).then(|| sim_contrastive(batch)).transpose()?;
    let total = l_seg + cfg.alpha * l_text.unwrap_or(0.0) + cfg.beta * l_sim.unwrap_or(0.0);
    Ok(Stage2Breakdown {
        l_seg,
        l_text,
        l_sim,
        total,
    })
}
