//! Paired ablation runs: the decoder grid {bilinear, flow alignment} ×
//! {with, without pyramid pooling}, and a flow-kernel-size sweep.
//!
//! All variants of one seed share that seed, so layers common to two
//! variants start from identical weights.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{count_flops, ModelConfig};
use crate::tensor::Shape;
use crate::train::{train_loop, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub kernels: Vec<usize>,
    /// Schedule length of each kernel-sweep run.
    pub kernel_iters: usize,
    pub kernel_seeds: Vec<u64>,
    pub run_decoder_grid: bool,
    pub run_kernel_grid: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            kernels: vec![1, 3, 5, 7],
            kernel_iters: 1000,
            kernel_seeds: vec![0],
            run_decoder_grid: true,
            run_kernel_grid: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.run_decoder_grid && self.seeds.is_empty() {
            errs.push("ablation.seeds must not be empty".into());
        }
        if self.run_kernel_grid {
            if self.kernel_seeds.is_empty() {
                errs.push("ablation.kernel_seeds must not be empty".into());
            }
            for &k in &self.kernels {
                if ![1, 3, 5, 7].contains(&k) {
                    errs.push(format!("ablation.kernels: {k} is not one of 1, 3, 5, 7"));
                }
            }
        }
        errs
    }
}

/// One trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub variant: String,
    pub use_fam: bool,
    pub use_ppm: bool,
    pub kernel: usize,
    pub seed: u64,
    pub iters: usize,
    pub miou: f64,
    pub best_miou: f64,
    pub gflops: f64,
    pub seconds: f64,
}

/// Mean over seeds of one variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub grid: String,
    pub variant: String,
    pub runs: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub gflops: f64,
}

pub fn variant_name(use_fam: bool, use_ppm: bool) -> &'static str {
    match (use_fam, use_ppm) {
        (false, false) => "FPN-bilinear",
        (true, false) => "FPN+FAM",
        (false, true) => "FPN+PPM",
        (true, true) => "FPN+FAM+PPM",
    }
}

fn train_one(
    data: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    dir: &Path,
    grid: &str,
    variant: String,
) -> Result<AblationRow> {
    let summary = train_loop(data, model, train, dir)?;
    let (h, w) = (data.manifest.height, data.manifest.width);
    let gflops = count_flops(model, Shape::new(1, 3, h, w))?.gflops();
    let row = AblationRow {
        grid: grid.to_string(),
        variant,
        use_fam: model.use_fam,
        use_ppm: model.use_ppm,
        kernel: model.fam.kernel,
        seed: train.seed,
        iters: train.total_iters,
        miou: summary.final_miou.unwrap_or(f64::NAN),
        best_miou: summary.best_miou.unwrap_or(f64::NAN),
        gflops,
        seconds: summary.seconds,
    };
    info!(
        "{grid} {} seed {}: mIoU {:.4} ({:.0}s)",
        row.variant, row.seed, row.miou, row.seconds
    );
    Ok(row)
}

fn append_row(path: &Path, row: &AblationRow) -> Result<()> {
    let line = serde_json::to_string(row).expect("rows serialize");
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| writeln!(f, "{line}"))
        .map_err(|e| Error::io(path, e))
}

/// Train every configured variant. Each run lives in its own directory under
/// `out`; rows are appended to `out/ablation.jsonl` as they finish and the
/// summary table is written to `out/ablation.md`.
pub fn run_ablation(
    data: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    cfg: &AblationConfig,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let mut errs = base_model.validate();
    errs.extend(base_train.validate());
    errs.extend(cfg.validate());
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows_path = out.join("ablation.jsonl");
    if rows_path.exists() {
        fs::remove_file(&rows_path).map_err(|e| Error::io(&rows_path, e))?;
    }
    let mut rows = Vec::new();
    if cfg.run_decoder_grid {
        for &seed in &cfg.seeds {
            for (use_fam, use_ppm) in [(false, false), (true, false), (false, true), (true, true)] {
                let model = ModelConfig {
                    use_fam,
                    use_ppm,
                    ..base_model.clone()
                };
                let train = TrainConfig {
                    seed,
                    ..base_train.clone()
                };
                let name = variant_name(use_fam, use_ppm);
                let dir = out.join("decoder").join(name).join(format!("seed{seed}"));
                let row = train_one(data, &model, &train, &dir, "decoder", name.to_string())?;
                append_row(&rows_path, &row)?;
                rows.push(row);
            }
        }
    }
    if cfg.run_kernel_grid {
        for &seed in &cfg.kernel_seeds {
            for &k in &cfg.kernels {
                let mut model = ModelConfig {
                    use_fam: true,
                    ..base_model.clone()
                };
                model.fam.kernel = k;
                let train = TrainConfig {
                    seed,
                    total_iters: cfg.kernel_iters,
                    eval_interval: base_train.eval_interval.min(cfg.kernel_iters.max(1)),
                    ..base_train.clone()
                };
                let name = format!("k={k}");
                let dir = out.join("kernel").join(&name).join(format!("seed{seed}"));
                let row = train_one(data, &model, &train, &dir, "kernel", name)?;
                append_row(&rows_path, &row)?;
                rows.push(row);
            }
        }
    }
    let table = format_table(&rows, &summarize(&rows));
    let md = out.join("ablation.md");
    fs::write(&md, table).map_err(|e| Error::io(&md, e))?;
    Ok(rows)
}

/// Group rows by (grid, variant) in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.grid.clone(), r.variant.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(grid, variant)| {
            let group: Vec<&AblationRow> = rows.iter().filter(|r| r.grid == grid && r.variant == variant).collect();
            let n = group.len() as f64;
            let mean = group.iter().map(|r| r.miou).sum::<f64>() / n;
            let var = if group.len() > 1 {
                group.iter().map(|r| (r.miou - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            VariantSummary {
                grid,
                variant,
                runs: group.len(),
                mean_miou: mean,
                std_miou: var.sqrt(),
                gflops: group[0].gflops,
            }
        })
        .collect()
}

/// Markdown: one row per run, then per-variant means.
pub fn format_table(rows: &[AblationRow], summary: &[VariantSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| grid | variant | seed | iters | mIoU (%) | best mIoU (%) | GFLOPs |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.2} | {:.2} | {:.4} |",
            r.grid,
            r.variant,
            r.seed,
            r.iters,
            100.0 * r.miou,
            100.0 * r.best_miou,
            r.gflops
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "| grid | variant | runs | mean mIoU (%) | std (%) | GFLOPs |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for v in summary {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} | {:.2} | {:.4} |",
            v.grid,
            v.variant,
            v.runs,
            100.0 * v.mean_miou,
            100.0 * v.std_miou,
            v.gflops
        );
    }
    s
}
