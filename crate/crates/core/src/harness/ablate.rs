use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::TrainConfig;
use super::train::{train_with_data, TrainData};
use crate::error::{Error, Result};
use crate::objectives::RotationMode;

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub uda: bool,
    pub rp: bool,
    pub cl: bool,
    pub rotation_mode: RotationMode,
}

impl Variant {
    const fn new(name: &'static str, uda: bool, rp: bool, cl: bool, rotation_mode: RotationMode) -> Self {
        Self { name, uda, rp, cl, rotation_mode }
    }

    /// The base config with this variant's task flags. Weights are kept.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            enable_uda: self.uda,
            enable_rp: self.rp,
            enable_cl: self.cl,
            rotation_mode: self.rotation_mode,
            ..base.clone()
        }
    }
}

pub const VARIANTS: [Variant; 6] = [
    Variant::new("source_only", false, false, false, RotationMode::PropRot),
    Variant::new("uda", true, false, false, RotationMode::PropRot),
    Variant::new("uda_rp", true, true, false, RotationMode::PropRot),
    Variant::new("uda_cl", true, false, true, RotationMode::PropRot),
    Variant::new("uda_rp_cl", true, true, true, RotationMode::PropRot),
    Variant::new("uda_imgrot", true, true, false, RotationMode::ImgRot),
];

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// a seed, or `median`
    pub seed: String,
    pub target_map: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn median(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == "median").and_then(|r| r.target_map)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::parse(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Median of the values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs every variant for every seed. Each run writes into
/// `output_dir/<variant>/seed<seed>`; a failed run is recorded in the
/// table and the grid continues.
pub fn ablate(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    let mut everything = base.clone();
    everything.enable_uda = true;
    everything.enable_rp = true;
    everything.enable_cl = true;
    let data = TrainData::load(&everything)?;
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for v in variants {
        let mut maps = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed: Some(seed),
                output_dir: run_dir(&base.output_dir, v.name, seed),
                ..v.apply(base)
            };
            let row = match train_with_data(&cfg, &data) {
                Ok(summary) => {
                    log::info!("{} seed {seed}: target mAP {:.4}", v.name, summary.final_map());
                    maps.push(summary.final_map());
                    AblationRow { variant: v.name.into(), seed: seed.to_string(), target_map: Some(summary.final_map()), status: "ok".into() }
                }
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", v.name);
                    AblationRow { variant: v.name.into(), seed: seed.to_string(), target_map: None, status: format!("failed: {e}") }
                }
            };
            rows.push(row);
        }
        let status = if maps.len() == seeds.len() { "ok".to_string() } else { format!("{} of {} runs", maps.len(), seeds.len()) };
        medians.push(AblationRow { variant: v.name.into(), seed: "median".into(), target_map: median(&maps), status });
    }
    rows.extend(medians);
    let table = AblationTable { rows };
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    table.write_csv(&base.output_dir.join(ABLATION_FILE))?;
    Ok(table)
}

pub fn run_dir(root: &Path, variant: &str, seed: u64) -> PathBuf {
    root.join(variant).join(format!("seed{seed}"))
}
