//! alpha x beta grid over stage-2 training, scored by validation GED.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::{encode_png_rgb, write_bytes};
use crate::train::{train_stage2, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub alpha: f64,
    pub beta: f64,
    pub val_ged: Option<f64>,
    /// `trained`, `cached`, or `failed: <reason>`.
    pub status: String,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub metric: String,
    /// `results[i][j]` is the cell for `alpha_values[i]`, `beta_values[j]`.
    pub results: Vec<Vec<Option<f64>>>,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellRecord {
    config_sha256: String,
    val_ged: f64,
    checkpoint_id: String,
}

pub fn default_values() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}

fn cell_dir(out: &Path, alpha: f64, beta: f64) -> PathBuf {
    out.join("cells").join(format!("alpha_{alpha}_beta_{beta}"))
}

fn config_digest(cfg: &TrainConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

fn cached(dir: &Path, digest: &str) -> Option<CellRecord> {
    let raw = std::fs::read(dir.join("cell.json")).ok()?;
    let rec: CellRecord = serde_json::from_slice(&raw).ok()?;
    let meta = crate::checkpoint::read_meta(&dir.join("best")).ok()?;
    (rec.config_sha256 == digest && rec.checkpoint_id == meta.checkpoint_id).then_some(rec)
}

fn run_cell(cfg: &TrainConfig, dir: &Path, digest: &str) -> Result<CellRecord> {
    let outcome = train_stage2(cfg, dir)?;
    let meta = crate::checkpoint::read_meta(&outcome.best)?;
    let rec = CellRecord {
        config_sha256: digest.to_string(),
        val_ged: outcome.best_val_ged,
        checkpoint_id: meta.checkpoint_id,
    };
    let mut json = serde_json::to_vec_pretty(&rec).expect("cell record serializes");
    json.push(b'\n');
    write_bytes(&dir.join("cell.json"), &json)?;
    Ok(rec)
}

/// Trains (or reuses) one stage-2 model per cell. A failing cell is recorded
/// and the grid continues. Writes `grid.json`, `grid.csv` and `heatmap.png`.
pub fn run_ablation(
    base: &TrainConfig,
    alpha_values: &[f64],
    beta_values: &[f64],
    out: &Path,
) -> Result<AblationGrid> {
    if alpha_values.is_empty() || beta_values.is_empty() {
        return Err(Error::Config("ablation grid needs at least one alpha and one beta".into()));
    }
    let mut results = vec![vec![None; beta_values.len()]; alpha_values.len()];
    let mut cells = Vec::new();
    for (i, &alpha) in alpha_values.iter().enumerate() {
        for (j, &beta) in beta_values.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.loss.alpha = alpha;
            cfg.loss.beta = beta;
            let dir = cell_dir(out, alpha, beta);
            let digest = config_digest(&cfg);
            let (outcome, status) = match cached(&dir, &digest) {
                Some(rec) => (Ok(rec), "cached".to_string()),
                None => (run_cell(&cfg, &dir, &digest), "trained".to_string()),
            };
            let cell = match outcome {
                Ok(rec) => {
                    results[i][j] = Some(rec.val_ged);
                    CellResult {
                        alpha,
                        beta,
                        val_ged: Some(rec.val_ged),
                        status,
                        checkpoint: Some(dir.join("best")),
                    }
                }
                Err(e) => CellResult {
                    alpha,
                    beta,
                    val_ged: None,
                    status: format!("failed: {e}"),
                    checkpoint: None,
                },
            };
            cells.push(cell);
        }
    }
    let grid = AblationGrid {
        alpha_values: alpha_values.to_vec(),
        beta_values: beta_values.to_vec(),
        metric: "val_ged".into(),
        results,
        cells,
    };
    write_grid(&grid, out)?;
    Ok(grid)
}

fn write_grid(grid: &AblationGrid, out: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(grid).expect("grid serializes");
    json.push(b'\n');
    write_bytes(&out.join("grid.json"), &json)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "beta", "val_ged", "status"])
        .and_then(|_| {
            for c in &grid.cells {
                w.write_record([
                    c.alpha.to_string(),
                    c.beta.to_string(),
                    c.val_ged.map(|g| g.to_string()).unwrap_or_default(),
                    c.status.clone(),
                ])?;
            }
            Ok(())
        })
        .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))?;
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))?;
    write_bytes(&out.join("grid.csv"), &bytes)?;
    write_bytes(&out.join("heatmap.png"), &encode_png_rgb(&heatmap(grid)))
}

const CELL: u32 = 48;

/// Rows are alpha values, columns beta values; low GED is dark blue, high
/// GED yellow, failed cells grey.
pub fn heatmap(grid: &AblationGrid) -> RgbImage {
    let values: Vec<f64> = grid.results.iter().flatten().flatten().copied().collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rows = grid.alpha_values.len() as u32;
    let cols = grid.beta_values.len() as u32;
    let mut img = RgbImage::from_pixel(cols * CELL, rows * CELL, Rgb([128, 128, 128]));
    for (i, row) in grid.results.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let Some(v) = v else { continue };
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
            let color = Rgb([mix(20.0, 250.0), mix(30.0, 220.0), mix(120.0, 40.0)]);
            for y in 0..CELL - 2 {
                for x in 0..CELL - 2 {
                    img.put_pixel(j as u32 * CELL + x + 1, i as u32 * CELL + y + 1, color);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_has_one_block_per_cell() {
        let grid = AblationGrid {
            alpha_values: default_values(),
            beta_values: default_values(),
            metric: "val_ged".into(),
            results: vec![vec![Some(0.3), Some(0.2), None], vec![Some(0.1); 3], vec![Some(0.5); 3]],
            cells: Vec::new(),
        };
        let img = heatmap(&grid);
        assert_eq!(img.dimensions(), (3 * CELL, 3 * CELL));
        assert_eq!(img.get_pixel(2 * CELL + 5, 5), &Rgb([128, 128, 128]));
        assert_eq!(img.get_pixel(5, CELL + 5), &Rgb([20, 30, 120]));
        assert_eq!(img.get_pixel(5, 2 * CELL + 5), &Rgb([250, 220, 40]));
    }
}
