//! Sweeps between two prompts at shared latent samples.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::imageio::{encode_png_rgb, overlay, write_bytes};
use crate::model::{map_area, Personalized, ProsonaModel};
use crate::synthetic::Case;

/// `steps` evenly spaced values from 0 to 1 inclusive.
pub fn linspace(steps: usize) -> Result<Vec<f64>> {
    ensure(steps >= 2, || format!("need at least 2 steps, got {steps}"))?;
    Ok((0..steps)
        .map(|i| {
            if i == steps - 1 {
                1.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        })
        .collect())
}

pub fn sweep(
    model: &ProsonaModel,
    image: &ndarray::Array2<f64>,
    prompt_a: &str,
    prompt_b: &str,
    ts: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<Personalized>> {
    let prepared = model.prepare(image, k, seed)?;
    ts.iter()
        .map(|&t| model.interpolate_prepared(&prepared, prompt_a, prompt_b, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub t: f64,
    pub area: usize,
}

const GAP: u32 = 2;

/// Writes `strip.png` (one overlay panel per step) and `curve.csv`
/// (`t,area`) into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn export_interpolation(
    model: &ProsonaModel,
    case: &Case,
    prompt_a: &str,
    prompt_b: &str,
    steps: usize,
    k: usize,
    seed: u64,
    threshold: f64,
    out_dir: &Path,
) -> Result<Vec<CurvePoint>> {
    let ts = linspace(steps)?;
    let preds = sweep(model, &case.image, prompt_a, prompt_b, &ts, k, seed)?;
    let (h, w) = case.image.dim();
    let (h, w) = (h as u32, w as u32);
    let mut strip = RgbImage::from_pixel(steps as u32 * (w + GAP) - GAP, h, Rgb([255, 255, 255]));
    let mut curve = Vec::with_capacity(steps);
    for (i, (t, p)) in ts.iter().zip(&preds).enumerate() {
        let mask = p.map.threshold(threshold);
        let panel = overlay(&case.image, &mask, [230, 60, 40]);
        image::imageops::replace(&mut strip, &panel, i64::from(i as u32 * (w + GAP)), 0);
        curve.push(CurvePoint {
            t: *t,
            area: map_area(&p.map, threshold),
        });
    }
    write_bytes(&out_dir.join("strip.png"), &encode_png_rgb(&strip))?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
    wtr.write_record(["t", "area"]).map_err(csv_err)?;
    for p in &curve {
        wtr.write_record([p.t.to_string(), p.area.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))?;
    write_bytes(&out_dir.join("curve.csv"), &bytes)?;
    Ok(curve)
}
