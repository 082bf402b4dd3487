//! Coordinate mapping and differentiable bilinear sampling.
//!
//! Conventions:
//! - target index `i` maps to source coordinate `(i + Δ) / scale`, origin at
//!   pixel (0, 0), no half-pixel shift;
//! - flow channel 0 is `dy`, channel 1 is `dx`, in target-grid pixels;
//! - coordinates outside `[0, h-1] × [0, w-1]` are clamped to the border, and
//!   the coordinate gradient is zero along a clamped axis.
//!
//! `upsample_bilinear` and `warp_feature` evaluate the same [`Taps`] routine,
//! so warping with a zero flow reproduces bilinear upsampling bit for bit.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Source coordinate reached from target pixel `p` displaced by `delta`.
pub fn map_coords(p: (f64, f64), delta: (f64, f64), scale: f64) -> Result<(f64, f64)> {
    if !(scale > 0.0) {
        return Err(invalid!("map_coords: scale must be positive, got {scale}"));
    }
    Ok(((p.0 + delta.0) / scale, (p.1 + delta.1) / scale))
}

/// The four bilinear neighbours of a (clamped) source coordinate.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    /// Flat plane offsets: top-left, top-right, bottom-left, bottom-right.
    pub idx: [usize; 4],
    pub weights: [f64; 4],
    wy: f64,
    wx: f64,
    clamped_y: bool,
    clamped_x: bool,
}

fn clamp_axis(v: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    let (c, clamped) = if v < 0.0 {
        (0.0, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    };
    let i0 = (c.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as f64, clamped)
}

impl Taps {
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (y0, y1, wy, clamped_y) = clamp_axis(y, h);
        let (x0, x1, wx, clamped_x) = clamp_axis(x, w);
        Taps {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weights: [(1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx],
            wy,
            wx,
            clamped_y,
            clamped_x,
        }
    }

    #[inline]
    pub fn interpolate(&self, plane: &[f64]) -> f64 {
        self.weights[0] * plane[self.idx[0]]
            + self.weights[1] * plane[self.idx[1]]
            + self.weights[2] * plane[self.idx[2]]
            + self.weights[3] * plane[self.idx[3]]
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            plane[self.idx[k]] += self.weights[k] * g;
        }
    }

    /// Partial derivatives of the interpolated value w.r.t. `(y, x)`.
    #[inline]
    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let v = [
            plane[self.idx[0]],
            plane[self.idx[1]],
            plane[self.idx[2]],
            plane[self.idx[3]],
        ];
        let dy = if self.clamped_y {
            0.0
        } else {
            (1.0 - self.wx) * (v[2] - v[0]) + self.wx * (v[3] - v[1])
        };
        let dx = if self.clamped_x {
            0.0
        } else {
            (1.0 - self.wy) * (v[1] - v[0]) + self.wy * (v[3] - v[2])
        };
        (dy, dx)
    }
}

/// Per-target-pixel source coordinates and their bilinear taps.
#[derive(Clone, Debug)]
pub struct WarpGrid {
    pub src_h: usize,
    pub src_w: usize,
    pub h: usize,
    pub w: usize,
    /// `(y, x)` per target pixel, row-major.
    pub coords: Vec<(f64, f64)>,
    pub taps: Vec<Taps>,
}

impl WarpGrid {
    pub fn from_coords(src_h: usize, src_w: usize, h: usize, w: usize, coords: Vec<(f64, f64)>) -> Result<Self> {
        if src_h == 0 || src_w == 0 {
            return Err(shape_err!("warp grid over empty source {src_h}x{src_w}"));
        }
        if coords.len() != h * w {
            return Err(shape_err!("warp grid: {} coordinates for {h}x{w} target", coords.len()));
        }
        let taps = coords.iter().map(|&(y, x)| Taps::new(y, x, src_h, src_w)).collect();
        Ok(WarpGrid {
            src_h,
            src_w,
            h,
            w,
            coords,
            taps,
        })
    }

    /// Grid for zero flow at an integer scale: target `i` reads source `i/scale`.
    pub fn upsample(src_h: usize, src_w: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid!("upsample factor must be ≥ 1"));
        }
        let (h, w) = (src_h * factor, src_w * factor);
        let s = factor as f64;
        let mut coords = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                coords.push(map_coords((y as f64, x as f64), (0.0, 0.0), s)?);
            }
        }
        Self::from_coords(src_h, src_w, h, w, coords)
    }

    /// Grid for resizing to an arbitrary size: target `i` reads `i · src/dst`.
    pub fn resize(src_h: usize, src_w: usize, h: usize, w: usize) -> Result<Self> {
        let (ry, rx) = (src_h as f64 / h as f64, src_w as f64 / w as f64);
        let mut coords = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                coords.push((y as f64 * ry, x as f64 * rx));
            }
        }
        Self::from_coords(src_h, src_w, h, w, coords)
    }
}

pub(crate) fn resample_forward(x: &Tensor, grid: &WarpGrid) -> Result<Tensor> {
    let s = x.shape();
    if (s.h, s.w) != (grid.src_h, grid.src_w) {
        return Err(shape_err!(
            "resample: input {s} does not match grid source {}x{}",
            grid.src_h,
            grid.src_w
        ));
    }
    let out_shape = Shape::new(s.n, s.c, grid.h, grid.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        out.extend(grid.taps.iter().map(|t| t.interpolate(plane)));
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn resample_backward(input: Shape, grid: &WarpGrid, g: &[f64]) -> Vec<f64> {
    let mut gi = vec![0.0; input.numel()];
    for (plane, gp) in gi.chunks_mut(input.plane()).zip(g.chunks(grid.h * grid.w)) {
        for (t, &d) in grid.taps.iter().zip(gp) {
            t.scatter(plane, d);
        }
    }
    gi
}

pub(crate) fn map_coords_forward(flow: &Tensor, scale: f64) -> Result<Tensor> {
    let s = flow.shape();
    if s.c != 2 {
        return Err(shape_err!("flow field must have exactly 2 channels, got {s}"));
    }
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let d = (flow.at(n, 0, y, x), flow.at(n, 1, y, x));
                out.push(map_coords((y as f64, x as f64), d, scale)?.0);
            }
        }
        for y in 0..s.h {
            for x in 0..s.w {
                let d = (flow.at(n, 0, y, x), flow.at(n, 1, y, x));
                out.push(map_coords((y as f64, x as f64), d, scale)?.1);
            }
        }
    }
    Tensor::new(s, out)
}

fn sample_taps(coords: &Tensor, n: usize, src_h: usize, src_w: usize) -> Vec<Taps> {
    let s = coords.shape();
    let plane = s.plane();
    let base = n * 2 * plane;
    let cy = &coords.data()[base..base + plane];
    let cx = &coords.data()[base + plane..base + 2 * plane];
    cy.iter().zip(cx).map(|(&y, &x)| Taps::new(y, x, src_h, src_w)).collect()
}

fn check_sample(source: Shape, coords: Shape) -> Result<()> {
    if coords.c != 2 {
        return Err(shape_err!("sampling coordinates must have 2 channels, got {coords}"));
    }
    if coords.n != source.n {
        return Err(shape_err!("sampling: source batch {} vs coordinate batch {}", source.n, coords.n));
    }
    Ok(())
}

pub(crate) fn sample_forward(source: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (ss, cs) = (source.shape(), coords.shape());
    check_sample(ss, cs)?;
    let out_shape = Shape::new(ss.n, ss.c, cs.h, cs.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..ss.n {
        let taps = sample_taps(coords, n, ss.h, ss.w);
        for c in 0..ss.c {
            let off = ss.index(n, c, 0, 0);
            let plane = &source.data()[off..off + ss.plane()];
            out.extend(taps.iter().map(|t| t.interpolate(plane)));
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn sample_backward(source: &Tensor, coords: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ss, cs) = (source.shape(), coords.shape());
    let tplane = cs.plane();
    let mut gs = vec![0.0; ss.numel()];
    let mut gc = vec![0.0; cs.numel()];
    for n in 0..ss.n {
        let taps = sample_taps(coords, n, ss.h, ss.w);
        for c in 0..ss.c {
            let off = ss.index(n, c, 0, 0);
            let plane = &source.data()[off..off + ss.plane()];
            let gout = &g[(n * ss.c + c) * tplane..(n * ss.c + c + 1) * tplane];
            let gplane = &mut gs[off..off + ss.plane()];
            for (p, (t, &d)) in taps.iter().zip(gout).enumerate() {
                t.scatter(gplane, d);
                let (dy, dx) = t.coord_grad(plane);
                gc[n * 2 * tplane + p] += d * dy;
                gc[(n * 2 + 1) * tplane + p] += d * dx;
            }
        }
    }
    (gs, gc)
}

// ---- tape-level operations ------------------------------------------------

/// Coordinates `(grid + flow) / scale` as an `N×2×H×W` tape variable.
pub fn map_coords_var(tape: &mut Tape, flow: Var, scale: f64) -> Result<Var> {
    if !(scale > 0.0) {
        return Err(invalid!("map_coords: scale must be positive, got {scale}"));
    }
    tape.map_coords_op(flow, scale)
}

/// Sample `source` (N×C×h×w) at per-pixel coordinates (N×2×H×W).
/// Differentiable w.r.t. both the source values and the coordinates.
pub fn bilinear_sample(tape: &mut Tape, source: Var, coords: Var) -> Result<Var> {
    check_sample(tape.shape(source), tape.shape(coords))?;
    tape.bilinear_sample_op(source, coords)
}

fn integer_scale(scale: f64) -> Result<usize> {
    if !(scale >= 1.0) || scale.fract() != 0.0 {
        return Err(invalid!("warp scale must be a positive integer, got {scale}"));
    }
    Ok(scale as usize)
}

/// Warp a coarse feature map onto the flow's (finer) grid.
pub fn warp_feature(tape: &mut Tape, feature: Var, flow: Var, scale: f64) -> Result<Var> {
    let k = integer_scale(scale)?;
    let (fs, ws) = (tape.shape(feature), tape.shape(flow));
    if ws.c != 2 {
        return Err(shape_err!("flow field must have exactly 2 channels, got {ws}"));
    }
    if ws.h != fs.h * k || ws.w != fs.w * k || ws.n != fs.n {
        return Err(invalid!(
            "warp_feature: flow {ws} is not feature {fs} scaled by {scale}"
        ));
    }
    let coords = map_coords_var(tape, flow, scale)?;
    tape.bilinear_sample_op(feature, coords)
}

/// Bilinear upsampling by an integer factor, on the same sampling kernel as
/// [`warp_feature`].
pub fn upsample_bilinear(tape: &mut Tape, input: Var, factor: usize) -> Result<Var> {
    if factor == 0 {
        return Err(invalid!("upsample factor must be ≥ 1"));
    }
    let s = tape.shape(input);
    if factor == 1 {
        return tape.scalar_mul(input, 1.0);
    }
    let grid = Arc::new(WarpGrid::upsample(s.h, s.w, factor)?);
    tape.resample(input, grid)
}

/// Bilinear resize to an arbitrary output size.
pub fn resize_bilinear(tape: &mut Tape, input: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(input);
    if h == 0 || w == 0 {
        return Err(invalid!("resize to empty size {h}x{w}"));
    }
    let grid = Arc::new(WarpGrid::resize(s.h, s.w, h, w)?);
    tape.resample(input, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid2x2() -> Tensor {
        Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    fn sample_at(src: &Tensor, y: f64, x: f64) -> f64 {
        let s = src.shape();
        Taps::new(y, x, s.h, s.w).interpolate(src.data())
    }

    #[test]
    fn map_coords_cases() {
        assert_eq!(map_coords((0.0, 0.0), (0.0, 0.0), 2.0).unwrap(), (0.0, 0.0));
        assert_eq!(map_coords((4.0, 6.0), (2.0, -2.0), 2.0).unwrap(), (3.0, 2.0));
        assert_eq!(map_coords((7.0, 7.0), (0.0, 0.0), 2.0).unwrap(), (3.5, 3.5));
        assert!(map_coords((0.0, 0.0), (0.0, 0.0), 0.0).is_err());
        assert!(map_coords((0.0, 0.0), (0.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn sampling_cases() {
        let g = grid2x2();
        assert_eq!(sample_at(&g, 1.0, 0.0), 3.0);
        assert_eq!(sample_at(&g, 0.5, 0.5), 2.5);
        assert_eq!(sample_at(&g, -0.5, 0.0), 1.0);
    }

    #[test]
    fn clamped_axis_has_zero_coordinate_gradient() {
        let g = grid2x2();
        let t = Taps::new(-0.5, 0.25, 2, 2);
        let (dy, dx) = t.coord_grad(g.data());
        assert_eq!(dy, 0.0);
        assert_eq!(dx, 1.0);
    }

    #[test]
    fn weights_are_a_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            use rand::Rng;
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let t = Taps::new(rng.gen_range(-3.0..12.0), rng.gen_range(-3.0..12.0), h, w);
            let s: f64 = t.weights.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(t.weights.iter().all(|&v| v >= 0.0));
            assert!(t.idx.iter().all(|&i| i < h * w));
        }
    }

    #[test]
    fn upsample_of_two_pixel_row() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap())
            .unwrap();
        let y = upsample_bilinear(&mut tape, x, 2).unwrap();
        // Coordinates 0, 0.5, 1, 1.5; the last clamps to the border value.
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 3.0, 1.0, 2.0, 3.0, 3.0]);
        let id = upsample_bilinear(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
    }

    #[test]
    fn unit_flow_shifts_row_left_with_clamp() {
        let mut tape = Tape::new();
        let f = tape
            .constant(Tensor::new(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let flow = tape
            .constant(Tensor::new(Shape::new(1, 2, 1, 4), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let out = warp_feature(&mut tape, f, flow, 1.0).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn warp_rejects_bad_scale_relation() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 4))).unwrap();
        let flow = tape.constant(Tensor::zeros(Shape::new(1, 2, 6, 6))).unwrap();
        assert!(warp_feature(&mut tape, f, flow, 2.0).is_err());
        assert!(warp_feature(&mut tape, f, flow, 1.5).is_err());
        let bad = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8))).unwrap();
        assert!(warp_feature(&mut tape, f, bad, 2.0).is_err());
    }

    #[test]
    fn resize_to_single_cell_broadcasts() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 1, 1), 4.0)).unwrap();
        let y = resize_bilinear(&mut tape, x, 3, 5).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 2, 3, 5));
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }
}
