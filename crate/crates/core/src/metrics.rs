//! Confusion-matrix metrics and forward-pass timing.

use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::IGNORE_LABEL;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Counted (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/label pair. Pixels whose label is the ignore value
    /// are only counted as ignored. Nothing changes if any value is invalid.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(invalid!("confusion update: {} predictions for {} labels", pred.len(), gt.len()));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL && (g as usize >= c || p as usize >= c) {
                return Err(invalid!("confusion update: class pair ({g}, {p}) out of range for {c} classes"));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                self.ignored += 1;
            } else {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(invalid!(
                "cannot merge confusion matrices over {} and {} classes",
                self.num_classes,
                other.num_classes
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// Per-class IoU (`None` for classes that never occur in either map) and
    /// their mean over present classes.
    pub fn miou(&self) -> Result<Miou> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(invalid!("mIoU undefined: no class occurs"));
        }
        Ok(Miou {
            mean: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Miou {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Build and machine description stored next to timing numbers.
#[derive(Clone, Debug, Serialize)]
pub struct Environment {
    pub threads_used: usize,
    pub available_parallelism: usize,
    pub profile: &'static str,
    pub target_arch: &'static str,
    pub target_features: Vec<&'static str>,
    pub os: &'static str,
    pub crate_version: &'static str,
}

impl Environment {
    pub fn capture() -> Environment {
        let mut features = Vec::new();
        if cfg!(target_feature = "sse4.2") {
            features.push("sse4.2");
        }
        if cfg!(target_feature = "avx2") {
            features.push("avx2");
        }
        if cfg!(target_feature = "fma") {
            features.push("fma");
        }
        Environment {
            threads_used: 1,
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            profile: if cfg!(debug_assertions) { "dev" } else { "release" },
            target_arch: std::env::consts::ARCH,
            target_features: features,
            os: std::env::consts::OS,
            crate_version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub input: [usize; 4],
    pub runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub fps: f64,
    pub environment: Environment,
}

/// Wall-clock timing of eval-mode inference on a fixed random input.
/// Warm-up runs are excluded; the standard deviation is the sample one.
pub fn benchmark_forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    input: Shape,
    warmup: usize,
    runs: usize,
) -> Result<BenchReport> {
    if runs < 3 {
        return Err(invalid!("benchmark needs at least 3 timed runs, got {runs}"));
    }
    let image = Tensor::uniform(input, 0.0, 1.0, &mut crate::rng::stream(0, "bench.input"));
    for _ in 0..warmup {
        model::predict(params, cfg, &image)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(model::predict(params, cfg, &image)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    Ok(BenchReport {
        input: input.dims(),
        runs,
        warmup,
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        fps: 1e3 * input.n as f64 / mean,
        environment: Environment::capture(),
    })
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    pub pixel_accuracy: Option<f64>,
    pub gflops: f64,
    pub samples: usize,
    pub ignored_pixels: u64,
    pub latency: Option<BenchReport>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        let m = cm.miou().unwrap();
        assert_eq!(m.per_class, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert!((m.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 3) as u8).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&labels, &labels).unwrap();
        assert_eq!((0..4).map(|k| cm.get(k, k)).sum::<u64>(), 100);
        let m = cm.miou().unwrap();
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.per_class[3], None);
    }

    #[test]
    fn all_ignored_leaves_counts_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2], &[IGNORE_LABEL; 3]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored(), 3);
        assert!(cm.miou().is_err());
    }

    #[test]
    fn out_of_range_rejected_atomically() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.update(&[0, 2], &[0, 1]).is_err());
        assert!(cm.update(&[0, 0], &[0, 5]).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn merge_requires_same_classes() {
        let mut a = ConfusionMatrix::new(2);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }
}
