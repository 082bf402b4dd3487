//! Central finite-difference gradient checks.
//!
//! The numeric side only ever runs forward passes, so it shares no code with
//! the backward rules it is checking.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fam::{self, FamConfig};
use crate::model::{self, Mode, ModelConfig};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::warp;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so exact-zero gradients compare
/// by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Input and flat index of the worst element.
    pub worst: (String, usize),
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }

    fn merge(mut self, other: GradReport) -> GradReport {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self
    }
}

/// Which elements of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// Up to this many random elements per input tensor.
    Sample(usize),
}

/// Compare analytic and numeric gradients of the scalar built by `f` w.r.t.
/// every tensor in `inputs`.
pub fn check<F>(name: &str, inputs: &[(String, Tensor)], probe: Probe, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: (String::new(), 0),
    };
    for (k, (input_name, t)) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match probe {
            Probe::All => (0..t.len()).collect(),
            Probe::Sample(m) => {
                let mut v = sample(&mut rng, t.len(), m.min(t.len())).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in indices {
            let orig = t.data()[i];
            values[k].data_mut()[i] = orig + STEP;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - STEP;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = rel;
                report.worst = (input_name.clone(), i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ r ⊙ y` for fixed random weights `r`, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone())?;
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values bounded away from zero by `gap`, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, gap: f64) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Coordinates at least `gap` away from integer lattice lines and from the
/// borders of an `h × w` source.
fn off_lattice_coords(rng: &mut ChaCha8Rng, n: usize, th: usize, tw: usize, h: usize, w: usize, gap: f64) -> Tensor {
    let mut axis = |len: usize| {
        let cell = rng.gen_range(0..len - 1) as f64;
        cell + rng.gen_range(gap..1.0 - gap)
    };
    let mut data = Vec::with_capacity(n * 2 * th * tw);
    for _ in 0..n {
        for _ in 0..th * tw {
            data.push(axis(h));
        }
        for _ in 0..th * tw {
            data.push(axis(w));
        }
    }
    Tensor::new(Shape::new(n, 2, th, tw), data).expect("shape")
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Give every zero-initialised flow conv small random weights. A zero flow at
/// an integer scale puts sampling points exactly on lattice lines, where
/// bilinear interpolation has a kink and central differences disagree with
/// the one-sided analytic derivative.
pub fn randomize_flow_convs(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name.contains(".flow") && t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::uniform(t.shape(), -0.3, 0.3, rng);
        }
    }
}

pub fn check_bilinear_sample(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = rand_tensor(&mut rng, Shape::new(2, 3, 5, 6));
    let coords = off_lattice_coords(&mut rng, 2, 4, 7, 5, 6, 1e-2);
    let proj = rand_tensor(&mut rng, Shape::new(2, 3, 4, 7));
    check(
        "bilinear_sample",
        &named(vec![("source", src), ("coords", coords)]),
        Probe::All,
        seed,
        |t, v| {
            let y = warp::bilinear_sample(t, v[0], v[1])?;
            project(t, y, &proj)
        },
    )
}

pub fn check_conv2d(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, Shape::new(2, 8, 16, 16));
    let w = rand_tensor(&mut rng, Shape::new(4, 8, 3, 3));
    let b = rand_tensor(&mut rng, Shape::new(1, 4, 1, 1));
    let proj = rand_tensor(&mut rng, Shape::new(2, 4, 8, 8));
    check(
        "conv2d",
        &named(vec![("input", x), ("weight", w), ("bias", b)]),
        Probe::Sample(40),
        seed,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, &proj)
        },
    )
}

pub fn check_relu(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&mut rng, Shape::new(2, 3, 4, 4), 1e-3);
    let proj = rand_tensor(&mut rng, x.shape());
    check("relu", &named(vec![("input", x)]), Probe::All, seed, |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, &proj)
    })
}

pub fn check_group_norm(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, Shape::new(2, 8, 6, 6));
    let g = Tensor::uniform(Shape::new(1, 8, 1, 1), 0.5, 1.5, &mut rng);
    let b = rand_tensor(&mut rng, Shape::new(1, 8, 1, 1));
    let proj = rand_tensor(&mut rng, x.shape());
    check(
        "group_norm",
        &named(vec![("input", x), ("scale", g), ("shift", b)]),
        Probe::Sample(60),
        seed,
        |t, v| {
            let y = t.group_norm(v[0], 4, v[1], v[2], 1e-5)?;
            project(t, y, &proj)
        },
    )
}

pub fn check_avg_pool(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, Shape::new(1, 2, 7, 5));
    let proj = rand_tensor(&mut rng, Shape::new(1, 2, 3, 2));
    check("avg_pool_adaptive", &named(vec![("input", x)]), Probe::All, seed, |t, v| {
        let y = t.avg_pool_adaptive(v[0], 3, 2)?;
        project(t, y, &proj)
    })
}

pub fn check_upsample(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, Shape::new(1, 2, 3, 4));
    let proj = rand_tensor(&mut rng, Shape::new(1, 2, 6, 8));
    let proj_r = rand_tensor(&mut rng, Shape::new(1, 2, 5, 7));
    check("upsample_bilinear", &named(vec![("input", x)]), Probe::All, seed, |t, v| {
        let y = warp::upsample_bilinear(t, v[0], 2)?;
        let a = project(t, y, &proj)?;
        let r = warp::resize_bilinear(t, v[0], 5, 7)?;
        let b = project(t, r, &proj_r)?;
        t.add(a, b)
    })
}

pub fn check_loss_ops(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::uniform(Shape::new(2, 4, 3, 3), -2.0, 2.0, &mut rng);
    let labels: Vec<u8> = (0..18)
        .map(|i| if i % 7 == 3 { crate::IGNORE_LABEL } else { rng.gen_range(0..4) })
        .collect();
    let proj = rand_tensor(&mut rng, Shape::new(2, 1, 3, 3));
    let proj_s = rand_tensor(&mut rng, logits.shape());
    check("cross_entropy+softmax", &named(vec![("logits", logits)]), Probe::All, seed, |t, v| {
        let ce = t.cross_entropy(v[0], &labels, crate::IGNORE_LABEL)?;
        let a = project(t, ce, &proj)?;
        let sm = t.softmax_channels(v[0])?;
        let b = project(t, sm, &proj_s)?;
        let m = t.select_mean(ce, vec![0, 4, 9, 17])?;
        let ab = t.add(a, b)?;
        t.add(ab, m)
    })
}

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![4, 4, 8, 8],
        fpn_channels: 4,
        ppm_bins: vec![1, 2, 3, 6],
        num_classes: 3,
        norm_groups: 2,
        ..ModelConfig::default()
    }
}

/// Pyramid pooling head on a 6×6 top-level map so every bin is active.
pub fn check_ppm(seed: u64) -> Result<GradReport> {
    let cfg = small_model_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model::init_params(&cfg, seed)?;
    let mut inputs = vec![("f5".to_string(), rand_tensor(&mut rng, Shape::new(1, 8, 6, 6)))];
    let names: Vec<String> = store.names().filter(|n| n.starts_with("ppm.")).map(str::to_string).collect();
    for n in &names {
        let mut t = store.get(n).unwrap().clone();
        if n.ends_with(".gamma") {
            t = Tensor::uniform(t.shape(), 0.5, 1.5, &mut rng);
        }
        inputs.push((n.clone(), t));
    }
    let proj = rand_tensor(&mut rng, Shape::new(1, cfg.fpn_channels, 6, 6));
    check("ppm", &inputs, Probe::Sample(8), seed, |t, v| {
        let bound = bound_from(&names, &v[1..]);
        let y = model::ppm_forward(t, v[0], &bound, &cfg)?;
        project(t, y, &proj)
    })
}

fn bound_from(names: &[String], vars: &[Var]) -> crate::params::Bound {
    crate::params::Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Flow prediction and warp, w.r.t. both feature inputs and all flow params.
pub fn check_fam(seed: u64) -> Result<GradReport> {
    let cfg = FamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    fam::init_fam_params(&mut store, "fam", 3, &cfg, &mut rng)?;
    randomize_flow_convs(&mut store, &mut rng);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = named(vec![
        ("coarse", rand_tensor(&mut rng, Shape::new(1, 3, 4, 4))),
        ("fine", rand_tensor(&mut rng, Shape::new(1, 3, 8, 8))),
    ]);
    inputs.extend(names.iter().map(|n| (n.clone(), store.get(n).unwrap().clone())));
    let proj = rand_tensor(&mut rng, Shape::new(1, 3, 8, 8));
    let proj_f = rand_tensor(&mut rng, Shape::new(1, 2, 8, 8));
    check("fam", &inputs, Probe::Sample(12), seed, |t, v| {
        let bound = bound_from(&names, &v[2..]);
        let (aligned, flow) = fam::fam_forward(t, v[0], v[1], &bound, "fam", &cfg)?;
        let a = project(t, aligned, &proj)?;
        let b = project(t, flow, &proj_f)?;
        t.add(a, b)
    })
}

/// Whole network in train mode (logits and aux heads) on a 32×32 input.
///
/// The deepest maps are 1×1 here, so a single norm group keeps every group
/// at several elements; normalising two values is close to a step function.
pub fn check_model(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        stage_channels: vec![4, 8, 8, 16],
        fpn_channels: 8,
        ppm_bins: vec![1],
        norm_groups: 1,
        ..small_model_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = model::init_params(&cfg, seed)?;
    randomize_flow_convs(&mut store, &mut rng);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![(
        "image".to_string(),
        Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng),
    )];
    inputs.extend(names.iter().map(|n| (n.clone(), store.get(n).unwrap().clone())));
    let proj = rand_tensor(&mut rng, Shape::new(1, 3, 32, 32));
    let aux_proj: Vec<Tensor> = [8, 4, 2]
        .iter()
        .map(|&s| rand_tensor(&mut rng, Shape::new(1, 3, s, s)))
        .collect();
    check("model", &inputs, Probe::Sample(5), seed, |t, v| {
        let bound = bound_from(&names, &v[1..]);
        let out = model::model_forward(t, v[0], &bound, &cfg, Mode::Train)?;
        let mut total = project(t, out.logits, &proj)?;
        for (a, p) in out.aux.iter().zip(&aux_proj) {
            let s = project(t, *a, p)?;
            total = t.add(total, s)?;
        }
        Ok(total)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Sampler,
    Primitives,
    Fam,
    Model,
    All,
}

pub type Check = fn(u64) -> Result<GradReport>;

pub fn checks(scope: Scope) -> Vec<(&'static str, Check)> {
    let sampler: Vec<(&'static str, Check)> = vec![("bilinear_sample", check_bilinear_sample)];
    let prims: Vec<(&'static str, Check)> = vec![
        ("conv2d", check_conv2d),
        ("relu", check_relu),
        ("group_norm", check_group_norm),
        ("avg_pool_adaptive", check_avg_pool),
        ("upsample_bilinear", check_upsample),
        ("loss_ops", check_loss_ops),
    ];
    let fam: Vec<(&'static str, Check)> = vec![("ppm", check_ppm), ("fam", check_fam)];
    let model: Vec<(&'static str, Check)> = vec![("model", check_model)];
    match scope {
        Scope::Sampler => sampler,
        Scope::Primitives => prims,
        Scope::Fam => fam,
        Scope::Model => model,
        Scope::All => [sampler, prims, fam, model].concat(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub reports: Vec<GradReport>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradReport::passed)
    }
}

/// Run every check in `scope` over `seeds` seeds, one merged report per check.
pub fn run_suite(scope: Scope, seeds: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut reports = Vec::new();
    for (_, check) in checks(scope) {
        let mut merged: Option<GradReport> = None;
        for seed in 0..seeds {
            let r = check(seed)?;
            merged = Some(match merged {
                None => r,
                Some(m) => m.merge(r),
            });
        }
        reports.extend(merged);
    }
    Ok(SuiteResult {
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn detects_wrong_gradient() {
        // Numeric side of x·x is 2x; a deliberately wrong analytic graph
        // (x scaled by 3 through a detached path) must be caught.
        let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![0.3, -0.7]).unwrap();
        let ok = check("square", &named(vec![("x", x.clone())]), Probe::All, 0, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = check("bad", &named(vec![("x", x)]), Probe::All, 0, |t, v| {
            let frozen = t.constant(t.value(v[0]).clone())?;
            let y = t.mul(v[0], frozen)?;
            t.sum(y)
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
