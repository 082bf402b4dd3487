use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Statistics saved by the forward pass, one entry per (sample, group).
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn check_groups(shape: Shape, groups: usize) -> Result<()> {
    if groups == 0 || shape.c % groups != 0 {
        return Err(invalid!(
            "group_norm: {} channels not divisible into {groups} groups",
            shape.c
        ));
    }
    Ok(())
}

pub fn group_norm_forward(
    x: &Tensor,
    groups: usize,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupStats)> {
    let s = x.shape();
    check_groups(s, groups)?;
    if !(eps > 0.0) {
        return Err(invalid!("group_norm: eps must be positive, got {eps}"));
    }
    if scale.len() != s.c || shift.len() != s.c {
        return Err(shape_err!(
            "group_norm: scale/shift have {}/{} elements for {} channels",
            scale.len(),
            shift.len(),
            s.c
        ));
    }
    let cpg = s.c / groups;
    let span = cpg * s.plane();
    let mut out = vec![0.0; s.numel()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(s.n * groups),
        rstd: Vec::with_capacity(s.n * groups),
    };
    for (gi, (src, dst)) in x.data().chunks(span).zip(out.chunks_mut(span)).enumerate() {
        let count = span as f64;
        let mean = src.iter().sum::<f64>() / count;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let rstd = 1.0 / (var + eps).sqrt();
        let c0 = (gi % groups) * cpg;
        for (ci, (a, b)) in src.chunks(s.plane()).zip(dst.chunks_mut(s.plane())).enumerate() {
            let (gamma, beta) = (scale.data()[c0 + ci], shift.data()[c0 + ci]);
            for (v, o) in a.iter().zip(b.iter_mut()) {
                *o = (v - mean) * rstd * gamma + beta;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(s, out)?, stats))
}

pub struct GroupNormGrads {
    pub input: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn group_norm_backward(
    x: &Tensor,
    groups: usize,
    scale: &Tensor,
    stats: &GroupStats,
    grad_out: &[f64],
) -> GroupNormGrads {
    let s = x.shape();
    let cpg = s.c / groups;
    let plane = s.plane();
    let span = cpg * plane;
    let mut gx = vec![0.0; s.numel()];
    let mut gscale = vec![0.0; s.c];
    let mut gshift = vec![0.0; s.c];
    for gi in 0..s.n * groups {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let c0 = (gi % groups) * cpg;
        let src = &x.data()[gi * span..(gi + 1) * span];
        let dy = &grad_out[gi * span..(gi + 1) * span];
        // Sums of dxhat and dxhat·xhat over the group.
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ci in 0..cpg {
            let gamma = scale.data()[c0 + ci];
            for p in ci * plane..(ci + 1) * plane {
                let xhat = (src[p] - mean) * rstd;
                gscale[c0 + ci] += dy[p] * xhat;
                gshift[c0 + ci] += dy[p];
                let g = dy[p] * gamma;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        let count = span as f64;
        let (mg, mgx) = (sum_g / count, sum_gx / count);
        let dst = &mut gx[gi * span..(gi + 1) * span];
        for ci in 0..cpg {
            let gamma = scale.data()[c0 + ci];
            for p in ci * plane..(ci + 1) * plane {
                let xhat = (src[p] - mean) * rstd;
                dst[p] = rstd * (dy[p] * gamma - mg - xhat * mgx);
            }
        }
    }
    GroupNormGrads {
        input: gx,
        scale: gscale,
        shift: gshift,
    }
}
