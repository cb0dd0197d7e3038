//! Analytic gradients against central finite differences.

use ndarray::{Array1, Array2};
use prosona_core::backbone::{BackboneConfig, LatentCode, LatentGaussian, LatentOrigin, ProbUNet};
use prosona_core::losses::{
    boundary_loss, boundary_loss_grad, dice_loss, dice_loss_grad, gram_bce, gram_bce_grad,
    kl_divergence, kl_divergence_grad, normalize_rows, normalize_rows_backward,
    EnsemblePrediction, ExpertBounds, LossConfig,
};
use prosona_core::nn::Parameters;
use prosona_core::prompt::{
    encode_text, fuse, fusion_backward, similarity_profile, stack_samples, HashedBowEncoder,
    ProjectionMlp,
};
use prosona_core::train::{stage1_case, stage2_case, FrozenImage, PromptItem, Stage1Noise, Stage2Grads};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{rand_binary, rand_probs};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Tracks the largest relative error seen and fails above [`TOL`].
#[derive(Default)]
pub struct Tracker {
    pub worst: f64,
    pub checks: usize,
}

impl Tracker {
    pub fn check(&mut self, what: &str, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        assert!(e <= TOL, "{what}: analytic {analytic} numeric {numeric} relative error {e:.2e}");
        self.worst = self.worst.max(e);
        self.checks += 1;
    }

    pub fn summary(&self) -> String {
        format!("{} comparisons, max relative error {:.1e}", self.checks, self.worst)
    }
}

fn fd_array(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    Array2::from_shape_fn(x.dim(), |idx| {
        let mut p = x.clone();
        p[idx] += H;
        let mut m = x.clone();
        m[idx] -= H;
        (f(&p) - f(&m)) / (2.0 * H)
    })
}

fn fd_vec(x: &Array1<f64>, f: impl Fn(&Array1<f64>) -> f64) -> Array1<f64> {
    Array1::from_shape_fn(x.len(), |i| {
        let mut p = x.clone();
        p[i] += H;
        let mut m = x.clone();
        m[i] -= H;
        (f(&p) - f(&m)) / (2.0 * H)
    })
}

fn compare_all<'a>(t: &mut Tracker, what: &str, a: impl IntoIterator<Item = &'a f64>, n: impl IntoIterator<Item = &'a f64>) {
    for (i, (x, y)) in a.into_iter().zip(n).enumerate() {
        t.check(&format!("{what}[{i}]"), *x, *y);
    }
}

/// Elementwise checks of every loss-level gradient.
pub fn check_loss_gradients(t: &mut Tracker) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a);
    for _ in 0..10 {
        let pred = rand_probs(&mut rng, 4, 5).mapv(|v| 0.05 + 0.9 * v);
        let target = rand_binary(&mut rng, 4, 5, 0.5);
        let (_, g) = dice_loss_grad(pred.view(), target.view(), 1.0).unwrap();
        let n = fd_array(&pred, |p| dice_loss(p.view(), target.view(), 1.0).unwrap());
        compare_all(t, "dice", g.iter(), n.iter());

        let d = 6;
        let mq = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let sq = Array1::from_shape_fn(d, |_| rng.random_range(0.3..2.0));
        let mp = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let sp = Array1::from_shape_fn(d, |_| rng.random_range(0.3..2.0));
        let kl = |mq: &Array1<f64>, sq: &Array1<f64>, mp: &Array1<f64>, sp: &Array1<f64>| {
            kl_divergence(
                &LatentGaussian::new(mq.clone(), sq.clone()).unwrap(),
                &LatentGaussian::new(mp.clone(), sp.clone()).unwrap(),
            )
            .unwrap()
        };
        let (_, g) = kl_divergence_grad(
            &LatentGaussian::new(mq.clone(), sq.clone()).unwrap(),
            &LatentGaussian::new(mp.clone(), sp.clone()).unwrap(),
        )
        .unwrap();
        compare_all(t, "kl d_mu_q", g.d_mu_q.iter(), fd_vec(&mq, |x| kl(x, &sq, &mp, &sp)).iter());
        compare_all(t, "kl d_sigma_q", g.d_sigma_q.iter(), fd_vec(&sq, |x| kl(&mq, x, &mp, &sp)).iter());
        compare_all(t, "kl d_mu_p", g.d_mu_p.iter(), fd_vec(&mp, |x| kl(&mq, &sq, x, &sp)).iter());
        compare_all(t, "kl d_sigma_p", g.d_sigma_p.iter(), fd_vec(&sp, |x| kl(&mq, &sq, &mp, x)).iter());

        // continuous random samples: ties (where min/max is not differentiable) have probability zero
        let samples: Vec<_> = (0..3).map(|_| rand_probs(&mut rng, 4, 4)).collect();
        let masks: Vec<_> = (0..2).map(|_| rand_binary(&mut rng, 4, 4, 0.5)).collect();
        let bounds = ExpertBounds::from_masks(&masks).unwrap();
        let (_, gs) = boundary_loss_grad(&EnsemblePrediction::new(samples.clone()).unwrap(), &bounds, 1.0).unwrap();
        for k in 0..samples.len() {
            let n = fd_array(&samples[k], |s| {
                let mut all = samples.clone();
                all[k] = s.clone();
                boundary_loss(&EnsemblePrediction::new(all).unwrap(), &bounds, 1.0).unwrap()
            });
            compare_all(t, &format!("boundary sample {k}"), gs[k].iter(), n.iter());
        }

        let annotators = [0, 0, 1, 1];
        let m = prosona_core::losses::ContrastiveBatch::positive_mask(&annotators);
        let x = Array2::from_shape_fn((4, 5), |_| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let (_, g) = gram_bce_grad(x.view(), m.view(), 0.1).unwrap();
        let n = fd_array(&x, |x| gram_bce(x.view(), m.view(), 0.1).unwrap());
        compare_all(t, "gram_bce", g.iter(), n.iter());

        let w = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let (nx, norms) = normalize_rows(x.view());
        let g = normalize_rows_backward(nx.view(), &norms, w.view());
        let n = fd_array(&x, |x| (&normalize_rows(x.view()).0 * &w).sum());
        compare_all(t, "normalize_rows", g.iter(), n.iter());
    }
}

/// Similarity, softmax and fusion pulled back to the projected code, the
/// samples, and an extra score gradient.
pub fn check_fusion_gradients(t: &mut Tracker) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9b);
    let (k, d) = (4, 6);
    let zp = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    let zs = Array2::from_shape_fn((k, d), |_| rng.sample::<f64, _>(StandardNormal));
    let wz = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
    let ws = Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0));
    let codes = |z: &Array2<f64>| -> Vec<LatentCode> {
        z.rows().into_iter().map(|r| LatentCode::new(r.to_owned(), LatentOrigin::PriorSample)).collect()
    };
    let f = |zp: &Array1<f64>, zs: &Array2<f64>| {
        let c = codes(zs);
        let prof = similarity_profile(&LatentCode::new(zp.clone(), LatentOrigin::Projected), &c).unwrap();
        fuse(&prof, &c).unwrap().z.dot(&wz) + prof.scores.dot(&ws)
    };
    let c = codes(&zs);
    let prof = similarity_profile(&LatentCode::new(zp.clone(), LatentOrigin::Projected), &c).unwrap();
    let g = fusion_backward(&zp, &stack_samples(&c).unwrap(), &prof, &wz, Some(&ws));
    compare_all(t, "fusion d_z_proj", g.d_z_proj.iter(), fd_vec(&zp, |x| f(x, &zs)).iter());
    compare_all(t, "fusion d_samples", g.d_samples.iter(), fd_array(&zs, |x| f(&zp, x)).iter());
}

pub fn probe_net(rng: &mut ChaCha8Rng) -> ProbUNet {
    let cfg = BackboneConfig {
        height: 8,
        width: 8,
        base_width: 2,
        posterior_width: 2,
        depth: 2,
        latent_dim: 3,
        ..Default::default()
    };
    let mut net = ProbUNet::new(cfg, rng).unwrap();
    // move away from the zero-initialised heads
    net.visit_mut("", &mut |_, v| {
        for x in v.iter_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    });
    net
}

pub fn image(rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0))
}

pub fn masks() -> Vec<Array2<f64>> {
    let inner = Array2::from_shape_fn((8, 8), |(i, j)| f64::from((2..6).contains(&i) && (2..6).contains(&j)));
    let outer = Array2::from_shape_fn((8, 8), |(i, j)| f64::from((1..7).contains(&i) && (1..6).contains(&j)));
    vec![inner, outer]
}

fn random_direction<P: Parameters>(p: &P, group: &str, rng: &mut ChaCha8Rng) -> P {
    let mut d = p.zeros_like();
    d.visit_mut("", &mut |name, v| {
        if name.starts_with(group) {
            for x in v.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
    });
    d
}

fn dot<P: Parameters>(a: &P, b: &P) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| x * y).sum()
}

fn directional<P: Parameters>(p: &P, dir: &P, f: impl Fn(&P) -> f64) -> f64 {
    let mut plus = p.clone();
    plus.add_scaled(dir, H);
    let mut minus = p.clone();
    minus.add_scaled(dir, -H);
    (f(&plus) - f(&minus)) / (2.0 * H)
}

/// Directional derivative of the stage-1 objective along a random direction
/// inside each parameter group.
pub fn check_stage1_gradients(t: &mut Tracker) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = probe_net(&mut rng);
    let img = image(&mut rng);
    let m = masks();
    let cfg = LossConfig::default();
    let noise = Stage1Noise::draw(2, 3, 4, &mut rng);
    let mut grads = net.zeros_like();
    stage1_case(&net, &img, &m, &noise, &cfg, Some(&mut grads)).unwrap();
    for group in ["encoder", "prior", "posterior_encoder", "posterior.", "decoder"] {
        let dir = random_direction(&net, group, &mut rng);
        let analytic = dot(&grads, &dir);
        let numeric = directional(&net, &dir, |p| {
            stage1_case(p, &img, &m, &noise, &cfg, None).unwrap().total
        });
        assert!(analytic.abs() > 1e-8, "stage1 {group}: vanishing gradient");
        t.check(&format!("stage1 {group}"), analytic, numeric);
    }
}

pub fn prompt_items() -> Vec<PromptItem> {
    let enc = HashedBowEncoder::new(16);
    [("conservative mask", 0), ("tight boundary", 0), ("inclusive mask", 1), ("include subtle regions", 1)]
        .iter()
        .map(|(text, a)| PromptItem {
            text: text.to_string(),
            embedding: encode_text(text, &enc).unwrap().e,
            annotator: *a,
        })
        .collect()
}

fn latent_noise(rng: &mut ChaCha8Rng, k: usize) -> Vec<Array1<f64>> {
    (0..k)
        .map(|_| Array1::from_shape_fn(3, |_| rng.sample(StandardNormal)))
        .collect()
}

/// Stage-2 objective against the projection and every backbone group, for
/// several contrastive weightings.
pub fn check_stage2_gradients(t: &mut Tracker) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = probe_net(&mut rng);
    let proj = ProjectionMlp::new(16, 3, false, &mut rng);
    let img = image(&mut rng);
    let m = masks();
    let items = prompt_items();
    let eps = latent_noise(&mut rng, 4);
    for (alpha, beta) in [(0.0, 0.0), (1.0, 1.0), (0.5, 2.0)] {
        let cfg = LossConfig {
            alpha,
            beta,
            ..Default::default()
        };
        let mut grads = Stage2Grads {
            projection: proj.zeros_like(),
            backbone: Some(net.zeros_like()),
        };
        stage2_case(&net, &proj, &img, &m, &items, &eps, None, &cfg, Some(&mut grads)).unwrap();
        for group in ["hidden", "out"] {
            let dir = random_direction(&proj, group, &mut rng);
            let numeric = directional(&proj, &dir, |p| {
                stage2_case(&net, p, &img, &m, &items, &eps, None, &cfg, None).unwrap().total
            });
            t.check(&format!("stage2 projection.{group} a={alpha} b={beta}"), dot(&grads.projection, &dir), numeric);
        }
        let bg = grads.backbone.as_ref().unwrap();
        for group in ["encoder", "prior", "decoder"] {
            let dir = random_direction(&net, group, &mut rng);
            let numeric = directional(&net, &dir, |n| {
                stage2_case(n, &proj, &img, &m, &items, &eps, None, &cfg, None).unwrap().total
            });
            t.check(&format!("stage2 backbone.{group} a={alpha} b={beta}"), dot(bg, &dir), numeric);
        }
    }
}

/// The personalised map (reduced by a fixed random weighting) against the
/// fused latent code and against the projection parameters.
pub fn check_personalize_gradients(t: &mut Tracker) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = probe_net(&mut rng);
    let proj = ProjectionMlp::new(16, 3, false, &mut rng);
    let img = image(&mut rng);
    let enc = net.encode(&img).unwrap().output;
    let weights = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
    let samples: Vec<LatentCode> = latent_noise(&mut rng, 4)
        .into_iter()
        .map(|z| LatentCode::new(z, LatentOrigin::PriorSample))
        .collect();
    let embedding = encode_text("inclusive mask", &HashedBowEncoder::new(16)).unwrap();

    let z = Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal));
    let decode = |z: &Array1<f64>| {
        let code = LatentCode::new(z.clone(), LatentOrigin::Fused);
        (&net.decode(&enc, &code).unwrap().map.probs * &weights).sum()
    };
    let trace = net.decode(&enc, &LatentCode::new(z.clone(), LatentOrigin::Fused)).unwrap();
    let d_z = net.decode_backward(&trace, &weights, None).d_z;
    compare_all(t, "decode d_z", d_z.iter(), fd_vec(&z, decode).iter());

    let pipeline = |p: &ProjectionMlp| {
        let zp = p.project(&embedding).unwrap();
        let prof = similarity_profile(&zp, &samples).unwrap();
        let fused = fuse(&prof, &samples).unwrap();
        (&net.decode(&enc, &fused).unwrap().map.probs * &weights).sum()
    };
    let (zp, cache) = proj.forward(&embedding).unwrap();
    let prof = similarity_profile(&zp, &samples).unwrap();
    let fused = fuse(&prof, &samples).unwrap();
    let trace = net.decode(&enc, &fused).unwrap();
    let d_fused = net.decode_backward(&trace, &weights, None).d_z;
    let fg = fusion_backward(&zp.z, &stack_samples(&samples).unwrap(), &prof, &d_fused, None);
    let mut g = proj.zeros_like();
    proj.backward(&cache, &fg.d_z_proj, &mut g);
    for group in ["hidden", "out"] {
        let dir = random_direction(&proj, group, &mut rng);
        t.check(&format!("personalize projection.{group}"), dot(&g, &dir), directional(&proj, &dir, pipeline));
    }
}

/// The frozen-encoder cache reproduces the uncached stage-2 loss exactly and
/// produces no backbone gradient.
pub fn check_frozen_cache() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = probe_net(&mut rng);
    let proj = ProjectionMlp::new(16, 3, false, &mut rng);
    let img = image(&mut rng);
    let eps = latent_noise(&mut rng, 3);
    let mut grads = Stage2Grads {
        projection: proj.zeros_like(),
        backbone: None,
    };
    let frozen = FrozenImage::new(&net, &img).unwrap();
    let cfg = LossConfig::default();
    let with_cache = stage2_case(&net, &proj, &img, &masks(), &prompt_items(), &eps, Some(&frozen), &cfg, Some(&mut grads)).unwrap();
    let without = stage2_case(&net, &proj, &img, &masks(), &prompt_items(), &eps, None, &cfg, None).unwrap();
    assert_eq!(with_cache, without);
    assert!(grads.projection.squared_norm() > 0.0);
}

/// Runs every gradient check.
pub fn check_all() -> String {
    let mut t = Tracker::default();
    check_loss_gradients(&mut t);
    check_fusion_gradients(&mut t);
    check_stage1_gradients(&mut t);
    check_stage2_gradients(&mut t);
    check_personalize_gradients(&mut t);
    check_frozen_cache();
    t.summary()
}
