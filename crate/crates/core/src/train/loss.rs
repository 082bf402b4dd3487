use crate::error::{shape_err, Result};
use crate::model::ModelOutput;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

use super::TrainConfig;

/// Number of pixels kept out of `n_valid`: `ceil(keep_frac · n_valid)`.
/// Products within 1e-9 of an integer are taken as that integer so that,
/// e.g., `0.1 · 70` keeps 7 pixels rather than 8.
pub(crate) fn keep_count(keep_frac: f64, n_valid: usize) -> usize {
    if n_valid == 0 {
        return 0;
    }
    let x = keep_frac * n_valid as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).clamp(1, n_valid)
}

/// Indices of the hardest valid pixels, hardest first. Equal losses are
/// ordered by lower linear index.
pub fn ohem_select(losses: &[f64], labels: &[u8], keep_frac: f64) -> Vec<usize> {
    let mut valid: Vec<usize> = (0..losses.len()).filter(|&i| labels[i] != IGNORE_LABEL).collect();
    let k = keep_count(keep_frac, valid.len());
    let by_loss = |a: &usize, b: &usize| losses[*b].total_cmp(&losses[*a]).then(a.cmp(b));
    if k < valid.len() {
        valid.select_nth_unstable_by(k, by_loss);
        valid.truncate(k);
    }
    valid.sort_by(by_loss);
    valid
}

/// Mean of the hardest `keep_frac` of per-pixel losses. Returns `(loss,
/// empty)`; with no valid pixel the loss is a constant zero and `empty` is set.
pub fn ohem_loss(tape: &mut Tape, per_pixel: Var, labels: &[u8], keep_frac: f64) -> Result<(Var, bool)> {
    let losses = tape.value(per_pixel).data();
    if losses.len() != labels.len() {
        return Err(shape_err!("ohem: {} losses for {} labels", losses.len(), labels.len()));
    }
    let picked = ohem_select(losses, labels, keep_frac);
    if picked.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0))?, true));
    }
    Ok((tape.select_mean(per_pixel, picked)?, false))
}

/// Nearest-neighbour label downsampling: output `(y, x)` reads input
/// `(y·factor, x·factor)`.
pub fn downsample_labels(labels: &[u8], n: usize, h: usize, w: usize, factor: usize) -> Vec<u8> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                out.push(labels[(b * h + y * factor) * w + x * factor]);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub main: f64,
    /// Plain mean cross-entropy of each auxiliary head, unweighted.
    pub aux: Vec<f64>,
    /// Set when no pixel of the batch carried a valid label.
    pub empty: bool,
}

/// OHEM cross-entropy on the final logits plus `aux_weight` times the plain
/// mean cross-entropy of every auxiliary head against downsampled labels.
pub fn total_loss(tape: &mut Tape, out: &ModelOutput, labels: &[u8], cfg: &TrainConfig) -> Result<LossParts> {
    let s = tape.shape(out.logits);
    let ce = tape.cross_entropy(out.logits, labels, IGNORE_LABEL)?;
    let (main, empty) = ohem_loss(tape, ce, labels, cfg.ohem_keep_frac)?;
    let main_value = tape.value(main).item()?;
    let mut total = main;
    let mut aux = Vec::with_capacity(out.aux.len());
    if cfg.aux_weight == 0.0 {
        return Ok(LossParts {
            total,
            main: main_value,
            aux,
            empty,
        });
    }
    for &head in &out.aux {
        let hs = tape.shape(head);
        if hs.h == 0 || s.h % hs.h != 0 || s.h / hs.h != s.w / hs.w {
            return Err(shape_err!("auxiliary logits {hs} do not divide {s}"));
        }
        let small = downsample_labels(labels, s.n, s.h, s.w, s.h / hs.h);
        let valid: Vec<usize> = (0..small.len()).filter(|&i| small[i] != IGNORE_LABEL).collect();
        if valid.is_empty() {
            aux.push(0.0);
            continue;
        }
        let ce = tape.cross_entropy(head, &small, IGNORE_LABEL)?;
        let mean = tape.select_mean(ce, valid)?;
        aux.push(tape.value(mean).item()?);
        let weighted = tape.scalar_mul(mean, cfg.aux_weight)?;
        total = tape.add(total, weighted)?;
    }
    Ok(LossParts {
        total,
        main: main_value,
        aux,
        empty,
    })
}
