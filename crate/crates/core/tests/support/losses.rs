//! Brute-force loss oracles: explicit index loops, no ndarray arithmetic.

use ndarray::{Array1, Array2};
use prosona_core::backbone::LatentGaussian;
use prosona_core::losses::{
    boundary_loss, dice_loss, gram_bce, kl_divergence, normalize_rows, sim_contrastive,
    stage1_loss, stage2_loss, text_contrastive, ContrastiveBatch, EnsemblePrediction,
    ExpertBounds, LossConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{rand_binary, rand_probs};

pub const TOL: f64 = 1e-10;

pub fn dice(p: &Array2<f64>, t: &Array2<f64>, eps: f64) -> f64 {
    let (h, w) = p.dim();
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            inter += p[[i, j]] * t[[i, j]];
            sp += p[[i, j]];
            st += t[[i, j]];
        }
    }
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

pub fn kl(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..mq.len() {
        let vq = sq[d] * sq[d];
        let vp = sp[d] * sp[d];
        acc += 0.5 * (vq / vp + (mp[d] - mq[d]).powi(2) / vp - 1.0 + (vp / vq).ln());
    }
    acc
}

fn pixelwise(xs: &[Array2<f64>], pick: fn(f64, f64) -> f64) -> Array2<f64> {
    let (h, w) = xs[0].dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut v = xs[0][[i, j]];
            for x in &xs[1..] {
                v = pick(v, x[[i, j]]);
            }
            out[[i, j]] = v;
        }
    }
    out
}

pub fn boundary(samples: &[Array2<f64>], masks: &[Array2<f64>], eps: f64) -> f64 {
    dice(&pixelwise(samples, f64::min), &pixelwise(masks, f64::min), eps)
        + dice(&pixelwise(samples, f64::max), &pixelwise(masks, f64::max), eps)
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn bce_gram(x: &Array2<f64>, m: &Array2<f64>, tau: f64) -> f64 {
    let p = x.nrows();
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..p {
            let mut g = 0.0;
            for c in 0..x.ncols() {
                g += x[[i, c]] * x[[j, c]];
            }
            let logit = g / tau;
            // -[m log s(l) + (1-m) log(1 - s(l))]
            acc += m[[i, j]] * log1p_exp(-logit) + (1.0 - m[[i, j]]) * log1p_exp(logit);
        }
    }
    acc / (p * p) as f64
}

fn unit_rows(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Array2<f64> {
    let mut x = Array2::zeros((p, d));
    for i in 0..p {
        let mut n = 0.0;
        for c in 0..d {
            let v: f64 = rng.sample(StandardNormal);
            x[[i, c]] = v;
            n += v * v;
        }
        let n = n.sqrt();
        for c in 0..d {
            x[[i, c]] /= n;
        }
    }
    x
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> LatentGaussian {
    LatentGaussian::new(
        Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal)),
        Array1::from_shape_fn(d, |_| rng.random_range(0.3..2.5)),
    )
    .unwrap()
}

struct Worst(f64);

impl Worst {
    fn check(&mut self, name: &str, got: f64, want: f64) {
        let e = (got - want).abs();
        assert!(e <= TOL, "{name}: implementation {got} vs oracle {want} (|diff| {e:e})");
        self.0 = self.0.max(e);
    }
}

/// Every loss against its oracle on random instances: grids up to 5x5,
/// K, A, P up to 4, D up to 6.
pub fn check_loss_oracles(instances: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut worst = Worst(0.0);
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let k = rng.random_range(2..=4);
        let a = rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let eps = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(1e-6..2.0) };
        let cfg = LossConfig {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            tau: rng.random_range(0.05..1.0),
            dice_smooth: eps,
            seg_weight: rng.random_range(0.1..2.0),
            kl_weight: rng.random_range(0.1..2.0),
            bound_weight: rng.random_range(0.1..2.0),
        };

        let pred = rand_probs(&mut rng, h, w);
        let target = rand_binary(&mut rng, h, w, 0.5);
        worst.check("dice", dice_loss(pred.view(), target.view(), eps).unwrap(), dice(&pred, &target, eps));

        let q = gaussian(&mut rng, d);
        let p = gaussian(&mut rng, d);
        let kl_ref = kl(
            q.mu.as_slice().unwrap(),
            q.sigma.as_slice().unwrap(),
            p.mu.as_slice().unwrap(),
            p.sigma.as_slice().unwrap(),
        );
        worst.check("kl", kl_divergence(&q, &p).unwrap(), kl_ref);

        let samples: Vec<_> = (0..k).map(|_| rand_probs(&mut rng, h, w)).collect();
        let masks: Vec<_> = (0..a).map(|_| rand_binary(&mut rng, h, w, 0.5)).collect();
        let ens = EnsemblePrediction::new(samples.clone()).unwrap();
        let bounds = ExpertBounds::from_masks(&masks).unwrap();
        let b_ref = boundary(&samples, &masks, eps);
        worst.check("boundary", boundary_loss(&ens, &bounds, eps).unwrap(), b_ref);

        let s1 = stage1_loss(pred.view(), target.view(), &q, &p, &ens, &bounds, &cfg).unwrap();
        let s1_ref = cfg.seg_weight * dice(&pred, &target, eps) + cfg.kl_weight * kl_ref + cfg.bound_weight * b_ref;
        worst.check("stage1", s1.total, s1_ref);

        let np = rng.random_range(1..=4);
        let annotators: Vec<usize> = (0..np).map(|_| rng.random_range(0..a)).collect();
        let m = ContrastiveBatch::positive_mask(&annotators);
        let de = rng.random_range(1..=8);
        let e = unit_rows(&mut rng, np, de);
        let r = unit_rows(&mut rng, np, k);
        let batch = ContrastiveBatch::new(e.clone(), r.clone(), m.clone(), cfg.tau).unwrap();
        let lt = bce_gram(&e, &m, cfg.tau);
        let ls = bce_gram(&r, &m, cfg.tau);
        worst.check("text_contrastive", text_contrastive(&batch).unwrap(), lt);
        worst.check("sim_contrastive", sim_contrastive(&batch).unwrap(), ls);
        worst.check("gram_bce", gram_bce(e.view(), m.view(), cfg.tau).unwrap(), lt);

        let preds: Vec<_> = (0..np).map(|_| rand_probs(&mut rng, h, w)).collect();
        let targets: Vec<_> = (0..np).map(|_| rand_binary(&mut rng, h, w, 0.5)).collect();
        let pairs: Vec<_> = preds.iter().zip(&targets).map(|(p, t)| (p.view(), t.view())).collect();
        let s2 = stage2_loss(&pairs, &batch, &cfg).unwrap();
        let seg: f64 = preds.iter().zip(&targets).map(|(p, t)| dice(p, t, eps)).sum::<f64>() / np as f64;
        worst.check("stage2", s2.total, seg + cfg.alpha * lt + cfg.beta * ls);
        worst.check("stage2 components", s2.total, s2.l_seg + cfg.alpha * s2.l_text.unwrap_or(0.0) + cfg.beta * s2.l_sim.unwrap_or(0.0));
    }
    format!("{instances} random instances, max |diff| {:.1e}", worst.0)
}

/// Row normalisation matches a loop implementation.
pub fn check_normalize_rows(rng: &mut ChaCha8Rng) {
    let x = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
    let (n, norms) = normalize_rows(x.view());
    for i in 0..4 {
        let mut s = 0.0;
        for c in 0..6 {
            s += x[[i, c]] * x[[i, c]];
        }
        assert!((norms[i] - s.sqrt()).abs() < TOL);
        for c in 0..6 {
            assert!((n[[i, c]] - x[[i, c]] / s.sqrt()).abs() < TOL);
        }
    }
}

/// Closed-form KL against a Monte-Carlo estimate `E_q[log q - log p]`.
pub fn check_kl_monte_carlo(pairs: usize, draws: usize, rel_tol: f64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let d = 6;
        let q = gaussian(&mut rng, d);
        let p = gaussian(&mut rng, d);
        let closed = kl_divergence(&q, &p).unwrap();
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut log_ratio = 0.0;
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let x = q.mu[j] + q.sigma[j] * e;
                let zp = (x - p.mu[j]) / p.sigma[j];
                log_ratio += -0.5 * e * e - q.sigma[j].ln() + 0.5 * zp * zp + p.sigma[j].ln();
            }
            acc += log_ratio;
        }
        let mc = acc / draws as f64;
        let rel = (mc - closed).abs() / closed.abs();
        assert!(
            rel <= rel_tol,
            "pair {i}: closed form {closed}, Monte Carlo {mc}, relative error {rel:.4}"
        );
        worst = worst.max(rel);
    }
    format!("{pairs} pairs x {draws} draws, max relative error {:.2}%", 100.0 * worst)
}
