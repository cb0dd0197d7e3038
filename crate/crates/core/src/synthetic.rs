//! Synthetic multi-rater cases: a smooth random blob rendered into a noisy
//! image, and one mask per annotator style obtained by eroding or dilating the
//! blob with a disk and optionally jittering the boundary radially.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

const MAX_ATTEMPTS: usize = 10;

/// One simulated annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_name: String,
    /// Negative erodes, positive dilates (pixels).
    pub morph_radius: i32,
    /// Standard deviation of the radial boundary noise (pixels).
    pub boundary_jitter: f64,
    pub prompt_texts: Vec<String>,
}

impl StyleSpec {
    pub fn new(name: &str, morph_radius: i32, prompts: &[&str]) -> Self {
        Self {
            style_name: name.to_string(),
            morph_radius,
            boundary_jitter: 0.0,
            prompt_texts: prompts.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Built-in annotator catalogue: two styles are conservative (-2) and
/// inclusive (+2); larger sets step the radius by 2 from -2.
pub fn default_styles(annotators: usize) -> Vec<StyleSpec> {
    let conservative = StyleSpec::new(
        "conservative",
        -2,
        &["conservative mask", "tight boundary, small nodule only"],
    );
    let inclusive = StyleSpec::new("inclusive", 2, &["inclusive mask", "include subtle regions"]);
    match annotators {
        0 => Vec::new(),
        1 => vec![conservative],
        2 => vec![conservative, inclusive],
        3 => vec![
            conservative,
            StyleSpec::new("moderate", 0, &["moderate mask", "typical boundary"]),
            inclusive,
        ],
        n => {
            let mut styles = vec![
                conservative,
                StyleSpec::new("moderate", 0, &["moderate mask", "typical boundary"]),
                StyleSpec::new("generous", 2, &["generous mask", "slightly wider margin"]),
                StyleSpec::new("inclusive", 4, &["inclusive mask", "include subtle regions"]),
            ];
            for i in 4..n {
                let r = -2 + 2 * i as i32;
                styles.push(StyleSpec::new(
                    &format!("style{}", i + 1),
                    r,
                    &[&format!("style {} mask", i + 1), &format!("annotator {} boundary", i + 1)],
                ));
            }
            styles
        }
    }
}

/// Validates a style set and returns it sorted by radius (conservative first).
pub fn sorted_styles(styles: &[StyleSpec]) -> Result<Vec<StyleSpec>> {
    ensure(!styles.is_empty(), || "at least one style is required".into())?;
    for s in styles {
        ensure(!s.prompt_texts.is_empty(), || {
            format!("style {} has no prompt texts", s.style_name)
        })?;
        ensure(s.boundary_jitter >= 0.0 && s.boundary_jitter.is_finite(), || {
            format!("style {} has invalid jitter", s.style_name)
        })?;
    }
    let mut sorted = styles.to_vec();
    sorted.sort_by_key(|s| s.morph_radius);
    for pair in sorted.windows(2) {
        ensure(pair[0].morph_radius != pair[1].morph_radius, || {
            format!(
                "styles {} and {} share morph_radius {}",
                pair[0].style_name, pair[1].style_name, pair[0].morph_radius
            )
        })?;
        ensure(pair[0].style_name != pair[1].style_name, || {
            format!("duplicate style name {}", pair[0].style_name)
        })?;
    }
    Ok(sorted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub height: usize,
    pub width: usize,
    pub cases: usize,
    /// Mean blob radius as a fraction of `min(height, width)`.
    pub base_radius: f64,
    pub noise_std: f64,
    /// Cases per shape family; a family is the unit of split assignment.
    pub family_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            cases: 100,
            base_radius: 0.2,
            noise_std: 0.05,
            family_size: 2,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.height >= 32 && self.width >= 32, || {
            format!("images must be at least 32x32, got {}x{}", self.height, self.width)
        })?;
        ensure(self.base_radius > 0.0 && self.base_radius < 0.5, || {
            "base_radius must lie in (0, 0.5)".into()
        })?;
        ensure(self.noise_std >= 0.0, || "noise_std must be non-negative".into())?;
        ensure(self.family_size >= 1, || "family_size must be positive".into())
    }
}

/// Low-frequency radial harmonics shared by every case of a family.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFamily {
    pub amplitudes: [f64; 3],
    pub phases: [f64; 3],
}

impl ShapeFamily {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amplitudes = [0.0; 3];
        let mut phases = [0.0; 3];
        for m in 0..3 {
            amplitudes[m] = rng.random_range(0.0..0.12);
            phases[m] = rng.random_range(0.0..2.0 * PI);
        }
        Self { amplitudes, phases }
    }
}

/// One image with its annotator masks, ordered conservative to inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub image: Array2<f64>,
    pub masks: Vec<Array2<bool>>,
}

impl Case {
    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }

    pub fn annotators(&self) -> usize {
        self.masks.len()
    }

    pub fn masks_f64(&self) -> Vec<Array2<f64>> {
        self.masks.iter().map(mask_to_f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.masks.is_empty(), || "case has no masks".into())?;
        ensure(self.masks.iter().all(|m| m.dim() == self.image.dim()), || {
            format!("case {}: mask and image shapes differ", self.case_id)
        })?;
        ensure(self.image.iter().all(|v| (0.0..=1.0).contains(v)), || {
            format!("case {}: image values outside [0, 1]", self.case_id)
        })
    }
}

pub fn mask_to_f64(m: &Array2<bool>) -> Array2<f64> {
    m.mapv(|b| if b { 1.0 } else { 0.0 })
}

pub fn area(m: &Array2<bool>) -> usize {
    m.iter().filter(|&&b| b).count()
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Binary dilation by a Euclidean disk.
pub fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let offsets = disk_offsets(radius);
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().any(|&(dy, dx)| {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && mask[[sy as usize, sx as usize]]
        })
    })
}

/// Binary erosion by a Euclidean disk; pixels outside the grid count as
/// background.
pub fn erode(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let offsets = disk_offsets(radius);
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().all(|&(dy, dx)| {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && mask[[sy as usize, sx as usize]]
        })
    })
}

pub fn morph(mask: &Array2<bool>, radius: i32) -> Array2<bool> {
    match radius {
        r if r > 0 => dilate(mask, r as usize),
        r if r < 0 => erode(mask, r.unsigned_abs() as usize),
        _ => mask.clone(),
    }
}

/// Moves the boundary of `mask` outward by `offset(theta)` pixels, where theta
/// is the angle of a pixel around `center`. Only pixels within `band` of the
/// boundary can change.
fn radial_jitter(
    mask: &Array2<bool>,
    center: (f64, f64),
    band: usize,
    offset: impl Fn(f64) -> f64,
) -> Array2<bool> {
    let (h, w) = mask.dim();
    let b = band as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let inside = mask[[y, x]];
        // distance to the nearest pixel of the other class
        let mut best = f64::INFINITY;
        for dy in -b..=b {
            for dx in -b..=b {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                let other = if sy < 0 || sx < 0 || sy as usize >= h || sx as usize >= w {
                    inside
                } else {
                    mask[[sy as usize, sx as usize]] != inside
                };
                if other {
                    best = best.min(((dy * dy + dx * dx) as f64).sqrt());
                }
            }
        }
        if !best.is_finite() {
            return inside;
        }
        let signed = if inside { best - 0.5 } else { -(best - 0.5) };
        let theta = (y as f64 + 0.5 - center.0).atan2(x as f64 + 0.5 - center.1);
        signed + offset(theta) > 0.0
    })
}

struct Rendered {
    image: Array2<f64>,
    base: Array2<bool>,
    center: (f64, f64),
}

fn render(
    rng: &mut ChaCha8Rng,
    family: &ShapeFamily,
    cfg: &GenerationConfig,
    radius_scale: f64,
) -> Rendered {
    let (h, w) = (cfg.height, cfg.width);
    let min_side = h.min(w) as f64;
    let cy = h as f64 / 2.0 + rng.random_range(-0.1..0.1) * h as f64;
    let cx = w as f64 / 2.0 + rng.random_range(-0.1..0.1) * w as f64;
    let r0 = cfg.base_radius * min_side * rng.random_range(0.85..1.15) * radius_scale;
    let rotation = rng.random_range(0.0..2.0 * PI);
    let amps: Vec<f64> = family
        .amplitudes
        .iter()
        .map(|a| a * rng.random_range(0.8..1.2))
        .collect();
    let contour = |theta: f64| {
        let mut r = 1.0;
        for (m, (a, p)) in amps.iter().zip(family.phases.iter()).enumerate() {
            r += a * ((m as f64 + 2.0) * (theta + rotation) + p).cos();
        }
        r0 * r
    };
    let background = rng.random_range(0.15..0.3);
    let contrast = rng.random_range(0.35..0.5);
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let grad_amp = rng.random_range(0.0..0.1);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");

    let mut image = Array2::zeros((h, w));
    let mut base = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let d = (py * py + px * px).sqrt();
            let edge = contour(py.atan2(px)) - d;
            base[[y, x]] = edge > 0.0;
            let soft = 1.0 / (1.0 + (-edge / 0.8).exp());
            let ramp = grad_amp
                * ((x as f64 / w as f64 - 0.5) * grad_angle.cos()
                    + (y as f64 / h as f64 - 0.5) * grad_angle.sin());
            let n = if cfg.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            image[[y, x]] = (background + contrast * soft + ramp + n).clamp(0.0, 1.0);
        }
    }
    Rendered {
        image,
        base,
        center: (cy, cx),
    }
}

fn angular_noise(rng: &mut ChaCha8Rng, std: f64) -> impl Fn(f64) -> f64 {
    // four harmonics with N(0, (std/2)^2) coefficients give pointwise std `std`
    let coef = Normal::new(0.0, std / 2.0).expect("valid std");
    let c: Vec<(f64, f64)> = (0..4).map(|_| (coef.sample(rng), coef.sample(rng))).collect();
    move |theta: f64| {
        c.iter()
            .enumerate()
            .map(|(m, (a, b))| {
                let k = (m + 1) as f64;
                a * (k * theta).cos() + b * (k * theta).sin()
            })
            .sum()
    }
}

/// Generates one case whose shape family is derived from the same seed.
pub fn generate_case(seed: u64, cfg: &GenerationConfig, styles: &[StyleSpec]) -> Result<Case> {
    let family = ShapeFamily::sample(crate::derive_seed(seed, &[0xfa]));
    generate_family_case(&format!("case_{seed}"), seed, &family, cfg, styles)
}

/// Generates one case of `family`. Masks follow `styles` sorted by radius.
/// A case whose style transforms empty any mask (or the masks' common
/// intersection) is re-rendered with a larger blob, up to ten times.
pub fn generate_family_case(
    case_id: &str,
    seed: u64,
    family: &ShapeFamily,
    cfg: &GenerationConfig,
    styles: &[StyleSpec],
) -> Result<Case> {
    cfg.validate()?;
    let styles = sorted_styles(styles)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..MAX_ATTEMPTS {
        let scale = 1.25f64.powi(attempt as i32);
        let rendered = render(&mut rng, family, cfg, scale);
        let masks: Vec<Array2<bool>> = styles
            .iter()
            .map(|s| {
                let m = morph(&rendered.base, s.morph_radius);
                if s.boundary_jitter > 0.0 {
                    let noise = angular_noise(&mut rng, s.boundary_jitter);
                    let band = (3.0 * s.boundary_jitter).ceil() as usize + 2;
                    radial_jitter(&m, rendered.center, band, noise)
                } else {
                    m
                }
            })
            .collect();
        let mut common = masks[0].clone();
        for m in &masks[1..] {
            ndarray::Zip::from(&mut common).and(m).for_each(|a, &b| *a = *a && b);
        }
        if masks.iter().all(|m| area(m) > 0) && area(&common) > 0 {
            return Ok(Case {
                case_id: case_id.to_string(),
                image: rendered.image,
                masks,
            });
        }
    }
    Err(Error::DegenerateGeometry {
        attempts: MAX_ATTEMPTS,
    })
}
