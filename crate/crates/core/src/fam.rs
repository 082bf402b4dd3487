//! Flow alignment module.
//!
//! Given a coarse map and a finer map with the same channel count, the coarse
//! map is upsampled to the fine grid, concatenated with it (coarse first), and
//! a small conv subnet predicts a 2-channel flow field. The coarse map is then
//! warped onto the fine grid along that flow.
//!
//! The last flow conv starts at zero, so an untrained module reproduces plain
//! bilinear upsampling exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamConfig {
    /// Flow-subnet kernel size, one of 1, 3, 5, 7.
    pub kernel: usize,
    /// Number of convs in the flow subnet.
    pub n_layers: usize,
    /// How the coarse map is brought to the fine grid before concatenation.
    pub upsample_mode: UpsampleMode,
}

impl Default for FamConfig {
    fn default() -> Self {
        FamConfig {
            kernel: 3,
            n_layers: 2,
            upsample_mode: UpsampleMode::Bilinear,
        }
    }
}

impl FamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if ![1, 3, 5, 7].contains(&self.kernel) {
            errs.push(format!("fam.kernel must be one of 1, 3, 5, 7 (got {})", self.kernel));
        }
        if self.n_layers == 0 {
            errs.push("fam.n_layers must be at least 1".into());
        }
        errs
    }
}

fn layer_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.flow{}", i + 1)
}

/// Create the flow-subnet parameters under `prefix` for `channels`-deep inputs.
pub fn init_fam_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    cfg: &FamConfig,
    rng: &mut R,
) -> Result<()> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(invalid!("{}", errs.join("; ")));
    }
    let k = cfg.kernel;
    for i in 0..cfg.n_layers {
        let c_in = if i == 0 { 2 * channels } else { channels };
        if i + 1 == cfg.n_layers {
            store.init_conv_zero(&layer_name(prefix, i), c_in, 2, k, true)?;
        } else {
            store.init_conv(&layer_name(prefix, i), c_in, channels, k, true, rng)?;
        }
    }
    Ok(())
}

/// Integer ratio between the fine and coarse grids.
fn grid_ratio(tape: &Tape, coarse: Var, fine: Var) -> Result<usize> {
    let (cs, fs) = (tape.shape(coarse), tape.shape(fine));
    if cs.c != fs.c {
        return Err(shape_err!(
            "flow alignment: coarse has {} channels, fine has {}",
            cs.c,
            fs.c
        ));
    }
    if cs.n != fs.n {
        return Err(shape_err!("flow alignment: batch {} vs {}", cs.n, fs.n));
    }
    if cs.h == 0 || fs.h % cs.h != 0 || fs.w % cs.w != 0 || fs.h / cs.h != fs.w / cs.w || fs.h < cs.h {
        return Err(shape_err!("flow alignment: fine grid {fs} is not an integer multiple of coarse {cs}"));
    }
    Ok(fs.h / cs.h)
}

/// Bring `input` to `factor`× resolution with the configured mode.
pub fn upsample(tape: &mut Tape, input: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
    match mode {
        UpsampleMode::Bilinear => warp::upsample_bilinear(tape, input, factor),
        UpsampleMode::Nearest => tape.upsample_nearest(input, factor),
    }
}

/// Predict the flow field (N×2×H×W on the fine grid).
pub fn predict_flow(
    tape: &mut Tape,
    coarse: Var,
    fine: Var,
    params: &Bound,
    prefix: &str,
    cfg: &FamConfig,
) -> Result<Var> {
    let factor = grid_ratio(tape, coarse, fine)?;
    let up = upsample(tape, coarse, factor, cfg.upsample_mode)?;
    let mut x = tape.concat_channels(&[up, fine])?;
    let pad = cfg.kernel / 2;
    for i in 0..cfg.n_layers {
        let name = layer_name(prefix, i);
        let w = params.var(&format!("{name}.weight"))?;
        let b = params.var(&format!("{name}.bias"))?;
        x = tape.conv2d(x, w, Some(b), 1, pad)?;
        if i + 1 < cfg.n_layers {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Align `coarse` onto `fine`'s grid. Returns `(aligned, flow)`.
pub fn fam_forward(
    tape: &mut Tape,
    coarse: Var,
    fine: Var,
    params: &Bound,
    prefix: &str,
    cfg: &FamConfig,
) -> Result<(Var, Var)> {
    let factor = grid_ratio(tape, coarse, fine)?;
    let flow = predict_flow(tape, coarse, fine, params, prefix, cfg)?;
    let aligned = warp::warp_feature(tape, coarse, flow, factor as f64)?;
    Ok((aligned, flow))
}

/// Analytic FLOPs of one flow alignment at the given fine-grid size:
/// the pre-concat upsampling, the flow subnet, and the final warp.
pub fn fam_flops(channels: usize, batch: usize, h: usize, w: usize, cfg: &FamConfig) -> u64 {
    let px = (batch * h * w) as u64;
    let k2 = (cfg.kernel * cfg.kernel) as u64;
    let c = channels as u64;
    let mut total = 0;
    if cfg.upsample_mode == UpsampleMode::Bilinear {
        total += 8 * c * px;
    }
    for i in 0..cfg.n_layers {
        let c_in = if i == 0 { 2 * c } else { c };
        let c_out = if i + 1 == cfg.n_layers { 2 } else { c };
        total += 2 * k2 * c_in * c_out * px;
    }
    total + 8 * c * px
}
