use rand::Rng;

use crate::data::{LabelMap, SegSample};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};
use crate::warp::{self, WarpGrid};
use crate::IGNORE_LABEL;

use super::TrainConfig;

/// An augmented sample with the parameters that produced it.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub sample: SegSample,
    pub flipped: bool,
    pub scale: f64,
    /// Top-left corner of the crop in the rescaled (and padded) sample.
    pub offset: (usize, usize),
}

pub fn flip_horizontal(s: &SegSample) -> SegSample {
    let sh = s.image.shape();
    let image = Tensor::from_fn(sh, |n, c, y, x| s.image.at(n, c, y, sh.w - 1 - x));
    let (h, w) = (s.label.h, s.label.w);
    let data = (0..h * w).map(|i| s.label.at(i / w, w - 1 - i % w)).collect();
    SegSample {
        image,
        label: LabelMap { h, w, data },
    }
}

/// Bilinear resize of the image, nearest-neighbour resize of the labels, on
/// the same coordinate map (target `i` reads source `i · src/dst`).
pub fn resize_sample(s: &SegSample, h: usize, w: usize) -> Result<SegSample> {
    let (sh, sw) = (s.label.h, s.label.w);
    let image = warp::resample_forward(&s.image, &WarpGrid::resize(sh, sw, h, w)?)?;
    let (ry, rx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = ((y as f64 * ry) as usize).min(sh - 1);
        for x in 0..w {
            let sx = ((x as f64 * rx) as usize).min(sw - 1);
            data.push(s.label.at(sy, sx));
        }
    }
    SegSample::new(image, LabelMap::new(h, w, data)?)
}

/// `size × size` window at `(y0, x0)`; outside the source the image is zero
/// and the label is ignore.
fn crop(s: &SegSample, y0: usize, x0: usize, size: usize) -> Result<SegSample> {
    let (h, w) = (s.label.h, s.label.w);
    let inside = |y: usize, x: usize| y0 + y < h && x0 + x < w;
    let image = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        if inside(y, x) {
            s.image.at(0, c, y0 + y, x0 + x)
        } else {
            0.0
        }
    });
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            if inside(y, x) {
                s.label.at(y0 + y, x0 + x)
            } else {
                IGNORE_LABEL
            }
        })
        .collect();
    SegSample::new(image, LabelMap::new(size, size, data)?)
}

/// Random flip, rescale by `s ∈ scale_range` and crop to `crop_size`
/// (padding first if the rescaled sample is smaller).
pub fn augment<R: Rng + ?Sized>(s: &SegSample, cfg: &TrainConfig, rng: &mut R) -> Result<Augmented> {
    let flipped = rng.gen::<f64>() < cfg.flip_prob;
    let [lo, hi] = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let mut out = if flipped { flip_horizontal(s) } else { s.clone() };
    let nh = ((s.label.h as f64 * scale).round() as usize).max(1);
    let nw = ((s.label.w as f64 * scale).round() as usize).max(1);
    if (nh, nw) != (s.label.h, s.label.w) {
        out = resize_sample(&out, nh, nw)?;
    }
    let size = cfg.crop_size;
    let y0 = rng.gen_range(0..=nh.saturating_sub(size));
    let x0 = rng.gen_range(0..=nw.saturating_sub(size));
    let sample = if (nh, nw, y0, x0) == (size, size, 0, 0) {
        out
    } else {
        crop(&out, y0, x0, size)?
    };
    Ok(Augmented {
        sample,
        flipped,
        scale,
        offset: (y0, x0),
    })
}
