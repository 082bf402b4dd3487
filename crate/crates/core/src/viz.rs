//! Renderers for flow fields, feature maps and prediction errors.
//!
//! Flow tensors are `1×2×H×W` with channel 0 the vertical (`dy`, pointing
//! down) and channel 1 the horizontal (`dx`) component. Colour coding uses
//! hue for direction and saturation for magnitude: hue 0° is `+x`, and hue
//! grows counter-clockwise as seen on screen.

use std::path::Path;

use crate::error::{invalid, shape_err, Result};
use crate::pnm::Raster;
use crate::tensor::{Shape, Tensor};
use crate::warp::{self, WarpGrid};
use crate::IGNORE_LABEL;

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];
pub const MID_GRAY: [u8; 3] = [128, 128, 128];

fn check_flow(flow: &Tensor) -> Result<Shape> {
    let s = flow.shape();
    if s.n != 1 || s.c != 2 {
        return Err(shape_err!("expected a 1x2xHxW flow field, got {s}"));
    }
    if !flow.is_finite() {
        return Err(invalid!("flow field contains non-finite values"));
    }
    Ok(s)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Standard sextant HSV to RGB, `h` in degrees, `s` and `v` in [0, 1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let sector = (h.floor() as usize).min(5);
    let f = h - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// Direction of `(dy, dx)` in degrees in `[0, 360)`.
pub fn flow_hue(dy: f64, dx: f64) -> f64 {
    (-dy).atan2(dx).to_degrees().rem_euclid(360.0)
}

/// Nearest-rank 99th percentile of the vector magnitudes.
pub fn magnitude_p99(flow: &Tensor) -> f64 {
    let plane = flow.shape().plane();
    let d = flow.data();
    let mut mags: Vec<f64> = (0..plane).map(|p| d[p].hypot(d[plane + p])).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Colour-code a flow field. `max_mag` is the magnitude rendered at full
/// saturation and defaults to the 99th-percentile magnitude.
pub fn flow_to_color(flow: &Tensor, max_mag: Option<f64>) -> Result<Raster> {
    let s = check_flow(flow)?;
    let max_mag = match max_mag {
        Some(m) if !(m > 0.0) => return Err(invalid!("max_mag must be positive, got {m}")),
        Some(m) => m,
        None => magnitude_p99(flow),
    };
    let plane = s.plane();
    let d = flow.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        let (dy, dx) = (d[p], d[plane + p]);
        let mag = dy.hypot(dx);
        let rgb = if mag == 0.0 || max_mag == 0.0 {
            WHITE
        } else {
            hsv_to_rgb(flow_hue(dy, dx), (mag / max_mag).min(1.0), 1.0)
        };
        out.extend_from_slice(&rgb);
    }
    Raster::rgb(s.w, s.h, out)
}

/// Integer line from `a` to `b`, both endpoints included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
    let (sx, sy) = (if x < b.0 { 1 } else { -1 }, if y < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    let mut pts = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        pts.push((x, y));
        if (x, y) == b {
            return pts;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn plot(img: &mut Raster, (x, y): (i64, i64), rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set_pixel(x as usize, y as usize, &rgb);
    }
}

/// Arrow field on a white background. At every `stride`-th pixel (both
/// coordinates multiples of `stride`) a dot marks the anchor; non-zero
/// vectors get a line to `anchor + round(scale · (dx, dy))` and a two-stroke
/// arrowhead at the tip.
pub fn flow_arrows(flow: &Tensor, stride: usize, scale: f64) -> Result<Raster> {
    let s = check_flow(flow)?;
    if stride == 0 {
        return Err(invalid!("arrow stride must be at least 1"));
    }
    let mut img = Raster::filled(s.w, s.h, WHITE);
    let head_color = [200, 0, 0];
    for y in (0..s.h).step_by(stride) {
        for x in (0..s.w).step_by(stride) {
            let (dy, dx) = (flow.at(0, 0, y, x), flow.at(0, 1, y, x));
            let a = (x as i64, y as i64);
            let b = (
                a.0 + (scale * dx).round() as i64,
                a.1 + (scale * dy).round() as i64,
            );
            if a == b {
                plot(&mut img, a, BLACK);
                continue;
            }
            for p in bresenham(a, b) {
                plot(&mut img, p, BLACK);
            }
            let (vx, vy) = ((b.0 - a.0) as f64, (b.1 - a.1) as f64);
            let len = vx.hypot(vy);
            let head = (0.35 * len).max(2.0);
            let back = vy.atan2(vx) + std::f64::consts::PI;
            for turn in [-0.5, 0.5] {
                let t = back + turn;
                let tip = (
                    b.0 + (head * t.cos()).round() as i64,
                    b.1 + (head * t.sin()).round() as i64,
                );
                for p in bresenham(b, tip) {
                    plot(&mut img, p, head_color);
                }
            }
            plot(&mut img, b, head_color);
            plot(&mut img, a, BLACK);
        }
    }
    Ok(img)
}

const HOT: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.647, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];

/// Black, red, orange, yellow, white, linearly interpolated over `[0, 1]`.
pub fn hot_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (HOT.len() - 1) as f64;
    let i = (t.floor() as usize).min(HOT.len() - 2);
    let f = t - i as f64;
    let mix = |c: usize| to_byte(HOT[i][c] * (1.0 - f) + HOT[i + 1][c] * f);
    [mix(0), mix(1), mix(2)]
}

/// Channel mean of a `1×C×H×W` feature map, min-max normalised and rendered
/// with [`hot_color`]. A constant map renders mid-gray.
pub fn feature_heatmap(features: &Tensor) -> Result<Raster> {
    let s = features.shape();
    if s.n != 1 {
        return Err(shape_err!("feature heatmap takes a single sample, got {s}"));
    }
    let plane = s.plane();
    let d = features.data();
    let mean: Vec<f64> = (0..plane)
        .map(|p| (0..s.c).map(|c| d[c * plane + p]).sum::<f64>() / s.c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(3 * plane);
    for &m in &mean {
        let rgb = if hi > lo { hot_color((m - lo) / (hi - lo)) } else { MID_GRAY };
        out.extend_from_slice(&rgb);
    }
    Raster::rgb(s.w, s.h, out)
}

fn palette_entry(palette: &[[u8; 3]], class: u8) -> Result<[u8; 3]> {
    palette
        .get(class as usize)
        .copied()
        .ok_or_else(|| invalid!("class {class} has no palette entry ({} colours)", palette.len()))
}

/// Black where the prediction is right or the label is ignored; the
/// ground-truth colour elsewhere.
pub fn error_map(pred: &[u8], gt: &[u8], width: usize, height: usize, palette: &[[u8; 3]]) -> Result<Raster> {
    if pred.len() != gt.len() || gt.len() != width * height {
        return Err(shape_err!(
            "error map: {} predictions, {} labels, {width}x{height} image",
            pred.len(),
            gt.len()
        ));
    }
    let mut out = Vec::with_capacity(3 * gt.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let rgb = if g == IGNORE_LABEL || p == g { BLACK } else { palette_entry(palette, g)? };
        out.extend_from_slice(&rgb);
    }
    Raster::rgb(width, height, out)
}

/// Class map in palette colours; ignore renders black.
pub fn label_map(labels: &[u8], width: usize, height: usize, palette: &[[u8; 3]]) -> Result<Raster> {
    if labels.len() != width * height {
        return Err(shape_err!("{} labels for a {width}x{height} image", labels.len()));
    }
    let mut out = Vec::with_capacity(3 * labels.len());
    for &l in labels {
        let rgb = if l == IGNORE_LABEL { BLACK } else { palette_entry(palette, l)? };
        out.extend_from_slice(&rgb);
    }
    Raster::rgb(width, height, out)
}

/// Bilinearly resize a flow field for display. Vectors are rescaled to the
/// target's pixel units. The input is left untouched.
pub fn upsample_flow_for_view(flow: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = check_flow(flow)?;
    if h == 0 || w == 0 {
        return Err(invalid!("cannot resize a flow field to {h}x{w}"));
    }
    let mut out = warp::resample_forward(flow, &WarpGrid::resize(s.h, s.w, h, w)?)?;
    let (ry, rx) = (h as f64 / s.h as f64, w as f64 / s.w as f64);
    let plane = h * w;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= if i < plane { ry } else { rx };
    }
    Ok(out)
}

pub fn write_ppm(image: &Raster, path: &Path) -> Result<()> {
    image.write(path)
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    Raster::read(path)
}
