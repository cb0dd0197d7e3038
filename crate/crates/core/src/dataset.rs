//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.json
//! DIR/prompts.json              style_name -> prompt texts
//! DIR/cases/<id>/image.png      8-bit grayscale
//! DIR/cases/<id>/mask_<i>.png   8-bit, 0 or 255, i = 1..A
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::imageio;
use crate::synthetic::{self, Case, GenerationConfig, ShapeFamily, StyleSpec};

pub const MANIFEST_VERSION: &str = "prosona-dataset/1";
pub const MIN_CASES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub family: usize,
    pub image: String,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub generator_seed: u64,
    pub config: GenerationConfig,
    pub styles: Vec<StyleSpec>,
    pub cases: Vec<CaseEntry>,
    pub splits: BTreeMap<String, Split>,
    /// sha256 of every file listed in `cases`, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn annotators(&self) -> usize {
        self.styles.len()
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.cases
            .iter()
            .filter(|c| self.splits.get(&c.case_id) == Some(&split))
            .map(|c| c.case_id.clone())
            .collect()
    }

    pub fn entry(&self, case_id: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| Error::Lookup {
                kind: "case",
                key: case_id.to_string(),
            })
    }

    /// Digest of the serialized manifest; equal for byte-identical datasets.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(manifest_bytes(self)))
    }
}

fn manifest_bytes(m: &DatasetManifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

/// Assigns whole families to splits in 70/10/20 proportion, keeping at least
/// one family in each split.
pub fn assign_family_splits(families: usize, seed: u64) -> Result<Vec<Split>> {
    ensure(families >= 3, || {
        format!("need at least 3 shape families to form three splits, got {families}")
    })?;
    let mut order: Vec<usize> = (0..families).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((families as f64 * 0.2).round() as usize).max(1);
    let n_val = ((families as f64 * 0.1).round() as usize).max(1);
    let n_train = families - n_test - n_val;
    ensure(n_train >= 1, || "too few families for a training split".into())?;
    let mut out = vec![Split::Train; families];
    for (rank, &fam) in order.iter().enumerate() {
        out[fam] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Generates `cfg.cases` cases in memory. Case `i` belongs to family
/// `i / family_size` and uses its own derived seed.
pub fn generate_cases(
    seed: u64,
    cfg: &GenerationConfig,
    styles: &[StyleSpec],
) -> Result<Vec<(usize, Case)>> {
    cfg.validate()?;
    ensure(cfg.cases >= MIN_CASES, || {
        format!("at least {MIN_CASES} cases are required, got {}", cfg.cases)
    })?;
    let styles = synthetic::sorted_styles(styles)?;
    (0..cfg.cases)
        .map(|i| {
            let family_idx = i / cfg.family_size;
            let family = ShapeFamily::sample(crate::derive_seed(seed, &[1, family_idx as u64]));
            let case_seed = crate::derive_seed(seed, &[2, i as u64]);
            synthetic::generate_family_case(&case_id(i), case_seed, &family, cfg, &styles)
                .map(|c| (family_idx, c))
        })
        .collect()
}

fn ensure_empty_or_force(out_dir: &Path, force: bool) -> Result<()> {
    match std::fs::read_dir(out_dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                if !force {
                    return Err(Error::DirectoryNotEmpty(out_dir.to_path_buf()));
                }
                std::fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(out_dir, e)),
    }
}

/// Writes a complete dataset to `out_dir`. A non-empty directory is replaced
/// only when `force` is set.
pub fn generate_dataset(
    seed: u64,
    cfg: &GenerationConfig,
    styles: &[StyleSpec],
    out_dir: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    let cases = generate_cases(seed, cfg, styles)?;
    let styles = synthetic::sorted_styles(styles)?;
    ensure_empty_or_force(out_dir, force)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let families = cases.last().map(|(f, _)| f + 1).unwrap_or(0);
    let family_split = assign_family_splits(families, crate::derive_seed(seed, &[3]))?;

    let mut entries = Vec::with_capacity(cases.len());
    let mut splits = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    let mut write = |rel: String, bytes: Vec<u8>| -> Result<String> {
        imageio::write_bytes(&out_dir.join(&rel), &bytes)?;
        checksums.insert(rel.clone(), hex::encode(Sha256::digest(&bytes)));
        Ok(rel)
    };
    for (family, case) in &cases {
        let dir = format!("cases/{}", case.case_id);
        let image = write(
            format!("{dir}/image.png"),
            imageio::encode_png_gray(&imageio::to_gray(&case.image)),
        )?;
        let masks = case
            .masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                write(
                    format!("{dir}/mask_{}.png", i + 1),
                    imageio::encode_png_gray(&imageio::mask_to_gray(m)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        splits.insert(case.case_id.clone(), family_split[*family]);
        entries.push(CaseEntry {
            case_id: case.case_id.clone(),
            family: *family,
            image,
            masks,
        });
    }

    let prompts: BTreeMap<&str, &Vec<String>> = styles
        .iter()
        .map(|s| (s.style_name.as_str(), &s.prompt_texts))
        .collect();
    let mut prompt_bytes = serde_json::to_vec_pretty(&prompts).expect("prompts serialize");
    prompt_bytes.push(b'\n');
    imageio::write_bytes(&out_dir.join("prompts.json"), &prompt_bytes)?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        generator_seed: seed,
        config: *cfg,
        styles,
        cases: entries,
        splits,
        checksums,
    };
    imageio::write_bytes(&out_dir.join("manifest.json"), &manifest_bytes(&manifest))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!(
                    "unsupported manifest version {:?} (expected {MANIFEST_VERSION:?})",
                    manifest.version
                ),
            ));
        }
        if manifest.styles.is_empty() {
            return Err(Error::format(&path, "manifest lists no styles"));
        }
        for c in &manifest.cases {
            if c.masks.len() != manifest.styles.len() {
                return Err(Error::format(
                    &path,
                    format!(
                        "case {} has {} masks but {} styles are declared",
                        c.case_id,
                        c.masks.len(),
                        manifest.styles.len()
                    ),
                ));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.manifest.split_ids(split)
    }

    pub fn load_case(&self, case_id: &str) -> Result<Case> {
        load_case(&self.root, &self.manifest, case_id)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Case>> {
        self.split_ids(split)
            .iter()
            .map(|id| self.load_case(id))
            .collect()
    }
}

pub fn load_case(root: &Path, manifest: &DatasetManifest, case_id: &str) -> Result<Case> {
    let entry = manifest.entry(case_id)?;
    let image_path = root.join(&entry.image);
    let raw = imageio::read_png_gray(&image_path)?;
    let image = raw.mapv(|v| f64::from(v) / 255.0);
    let masks = entry
        .masks
        .iter()
        .map(|rel| {
            let path = root.join(rel);
            let raw = imageio::read_png_gray(&path)?;
            if raw.dim() != image.dim() {
                return Err(Error::format(
                    &path,
                    format!(
                        "mask is {}x{} but image is {}x{}",
                        raw.nrows(),
                        raw.ncols(),
                        image.nrows(),
                        image.ncols()
                    ),
                ));
            }
            binary_mask(&raw, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Case {
        case_id: case_id.to_string(),
        image,
        masks,
    })
}

fn binary_mask(raw: &Array2<u8>, path: &Path) -> Result<Array2<bool>> {
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::format(
            path,
            format!("mask contains value {v}; only 0 and 255 are allowed"),
        ));
    }
    Ok(raw.mapv(|v| v == 255))
}
