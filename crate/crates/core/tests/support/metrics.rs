//! Brute-force metric oracles over explicit pixel loops.

use ndarray::Array2;
use prosona_core::backbone::ProbabilityMap;
use prosona_core::metrics::{dice_match, dice_max, dice_soft, ged, ged_squared};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rand_mask, rand_probs};

fn iou_dist(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    let (h, w) = a.dim();
    for i in 0..h {
        for j in 0..w {
            inter += usize::from(a[[i, j]] && b[[i, j]]);
            union += usize::from(a[[i, j]] || b[[i, j]]);
        }
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

fn dice_bin(p: &Array2<bool>, t: &Array2<bool>) -> f64 {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    let (h, w) = p.dim();
    for i in 0..h {
        for j in 0..w {
            inter += usize::from(p[[i, j]] && t[[i, j]]);
            np += usize::from(p[[i, j]]);
            nt += usize::from(t[[i, j]]);
        }
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

fn dice_prob(p: &Array2<f64>, t: &Array2<bool>) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    let (h, w) = p.dim();
    for i in 0..h {
        for j in 0..w {
            let tv = if t[[i, j]] { 1.0 } else { 0.0 };
            inter += p[[i, j]] * tv;
            sp += p[[i, j]];
            st += tv;
        }
    }
    if sp + st == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + st)
    }
}

fn mean_dist(a: &[Array2<bool>], b: &[Array2<bool>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += iou_dist(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

pub fn ged2_oracle(s: &[Array2<bool>], y: &[Array2<bool>]) -> f64 {
    2.0 * mean_dist(s, y) - mean_dist(s, s) - mean_dist(y, y)
}

pub fn dice_soft_oracle(s: &[Array2<f64>], y: &[Array2<bool>]) -> f64 {
    let mut total = 0.0;
    for p in s {
        for a in y {
            total += dice_prob(p, a);
        }
    }
    100.0 * total / (s.len() * y.len()) as f64
}

pub fn dice_max_oracle(s: &[Array2<bool>], y: &[Array2<bool>]) -> f64 {
    let mut total = 0.0;
    for a in y {
        let mut best = 0.0f64;
        for p in s {
            best = best.max(dice_bin(p, a));
        }
        total += best;
    }
    100.0 * total / y.len() as f64
}

pub fn dice_match_oracle(s: &[Array2<bool>], y: &[Array2<bool>]) -> f64 {
    let mut total = 0.0;
    for i in 0..y.len() {
        total += 100.0 * dice_bin(&s[i], &y[i]);
    }
    total / y.len() as f64
}

fn to_maps(p: &[Array2<f64>]) -> Vec<ProbabilityMap> {
    p.iter()
        .map(|x| ProbabilityMap {
            probs: x.clone(),
            logits: None,
        })
        .collect()
}

/// Exact agreement with the oracles on random small instances.
pub fn check_metric_oracles(instances: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e);
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let k = rng.random_range(1..=5);
        let a = rng.random_range(1..=4);
        let density = rng.random_range(0.0..1.0);
        let s: Vec<_> = (0..k).map(|_| rand_mask(&mut rng, h, w, density)).collect();
        let y: Vec<_> = (0..a).map(|_| rand_mask(&mut rng, h, w, density)).collect();
        let probs: Vec<_> = (0..k).map(|_| rand_probs(&mut rng, h, w)).collect();
        let prompted: Vec<_> = (0..a).map(|_| rand_mask(&mut rng, h, w, density)).collect();

        let g2 = ged2_oracle(&s, &y);
        assert_eq!(ged_squared(&s, &y).unwrap(), g2);
        assert_eq!(ged(&s, &y).unwrap(), g2.max(0.0).sqrt());
        assert_eq!(dice_soft(&to_maps(&probs), &y).unwrap(), dice_soft_oracle(&probs, &y));
        assert_eq!(dice_max(&s, &y).unwrap(), dice_max_oracle(&s, &y));
        assert_eq!(dice_match(&prompted, &y).unwrap(), dice_match_oracle(&prompted, &y));
    }
    format!("{instances} random instances, exact agreement")
}

/// Structural properties: ged(S,S) = 0, invariance of GED and Dice Max under
/// permutations of either set, Dice Max >= Dice Match.
pub fn check_metric_properties(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let k = rng.random_range(1..=5);
    let a = rng.random_range(1..=4);
    let density = rng.random_range(0.0..1.0);
    let mut s: Vec<_> = (0..k).map(|_| rand_mask(&mut rng, h, w, density)).collect();
    let mut y: Vec<_> = (0..a).map(|_| rand_mask(&mut rng, h, w, density)).collect();

    assert_eq!(ged(&s, &s).unwrap(), 0.0);

    let g = ged_squared(&s, &y).unwrap();
    let dm = dice_max(&s, &y).unwrap();
    let prompted: Vec<_> = y.iter().map(|m| {
        let mut p = m.clone();
        p.iter_mut().for_each(|v| if rng.random_bool(0.2) { *v = !*v });
        p
    }).collect();
    s.shuffle(&mut rng);
    assert!((ged_squared(&s, &y).unwrap() - g).abs() < 1e-12);
    assert!((dice_max(&s, &y).unwrap() - dm).abs() < 1e-12);
    let mut order: Vec<usize> = (0..a).collect();
    order.shuffle(&mut rng);
    y = order.iter().map(|&i| y[i].clone()).collect();
    let prompted: Vec<_> = order.iter().map(|&i| prompted[i].clone()).collect();
    assert!((ged_squared(&s, &y).unwrap() - g).abs() < 1e-12);
    assert!((dice_max(&s, &y).unwrap() - dm).abs() < 1e-12);
    assert!((ged_squared(&y, &s).unwrap() - g).abs() < 1e-12, "GED is symmetric");

    // with the prompted predictions among the candidates, the best match can only improve
    let mut pool = s.clone();
    pool.extend(prompted.iter().cloned());
    assert!(dice_max(&pool, &y).unwrap() + 1e-9 >= dice_match(&prompted, &y).unwrap());
}
