//! 2-D convolution via im2col and `dgemm`.
//!
//! Weight layout is `C_out × C_in × k × k`. Columns are rebuilt in the
//! backward pass instead of being cached.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Self> {
        if weight.c != input.c {
            return Err(shape_err!(
                "conv2d: input has {} channels but weight expects C_in = {} (input {input}, weight {weight})",
                input.c,
                weight.c
            ));
        }
        if weight.h != weight.w {
            return Err(shape_err!("conv2d: non-square kernel {}x{}", weight.h, weight.w));
        }
        if weight.h % 2 == 0 {
            return Err(invalid!("conv2d: kernel size {} is even; only odd kernels are supported", weight.h));
        }
        if stride == 0 {
            return Err(invalid!("conv2d: stride must be positive"));
        }
        let k = weight.h;
        if input.h + 2 * padding < k || input.w + 2 * padding < k {
            return Err(shape_err!(
                "conv2d: kernel {k} larger than padded input {}x{} (padding {padding})",
                input.h,
                input.w
            ));
        }
        Ok(ConvGeometry {
            input,
            out_channels: weight.n,
            kernel: k,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.input.h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.input.w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.n, self.out_channels, self.out_h(), self.out_w())
    }

    /// Rows of the column matrix: `C_in · k · k`.
    fn col_rows(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Multiply-add count ×2, the convention used by the FLOPs counter.
    pub fn flops(&self) -> u64 {
        let o = self.output();
        2 * (self.kernel * self.kernel * self.input.c * self.out_channels * o.h * o.w * o.n) as u64
    }
}

fn im2col(g: &ConvGeometry, input: &[f64], col: &mut [f64]) {
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.padding as isize);
    let plane = g.input.plane();
    for ci in 0..g.input.c {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f64], grad_input: &mut [f64]) {
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.padding as isize);
    let plane = g.input.plane();
    for ci in 0..g.input.c {
        let dst = &mut grad_input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * w as usize;
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a·b + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice extents are checked above for the given strides, and `c`
    // is a dense row-major m×n block that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(shape_err!(
                "conv2d: bias has {} elements, expected {}",
                b.len(),
                g.out_channels
            ));
        }
    }
    let out_shape = g.output();
    let ohw = out_shape.plane();
    let kk = g.col_rows();
    let in_per = g.input.c * g.input.plane();
    let out_per = g.out_channels * ohw;
    let mut out = vec![0.0; out_shape.numel()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * ohw] };

    for n in 0..g.input.n {
        let x = &input.data()[n * in_per..(n + 1) * in_per];
        let y = &mut out[n * out_per..(n + 1) * out_per];
        let beta = if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(ohw).enumerate() {
                chunk.fill(b.data()[co]);
            }
            1.0
        } else {
            0.0
        };
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        gemm(g.out_channels, kk, ohw, weight.data(), (kk, 1), cols, (ohw, 1), beta, y);
    }
    Tensor::new(out_shape, out)
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let ohw = g.out_h() * g.out_w();
    let kk = g.col_rows();
    let co = g.out_channels;
    let in_per = g.input.c * g.input.plane();
    let out_per = co * ohw;

    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; co];
    let mut gi = need_input_grad.then(|| vec![0.0; input.len()]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * ohw] };
    let mut gcol = if need_input_grad && !g.is_pointwise() {
        vec![0.0; kk * ohw]
    } else {
        Vec::new()
    };

    for n in 0..g.input.n {
        let x = &input.data()[n * in_per..(n + 1) * in_per];
        let dy = &grad_out[n * out_per..(n + 1) * out_per];
        for (c, chunk) in dy.chunks(ohw).enumerate() {
            gb[c] += chunk.iter().sum::<f64>();
        }
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        // dW[co × kk] += dY[co × ohw] · colᵀ
        gemm(co, ohw, kk, dy, (ohw, 1), cols, (1, ohw), 1.0, &mut gw);

        if let Some(gi) = gi.as_mut() {
            let gx = &mut gi[n * in_per..(n + 1) * in_per];
            // dcol[kk × ohw] = Wᵀ · dY
            if g.is_pointwise() {
                gemm(kk, co, ohw, weight.data(), (1, kk), dy, (ohw, 1), 1.0, gx);
            } else {
                gemm(kk, co, ohw, weight.data(), (1, kk), dy, (ohw, 1), 0.0, &mut gcol);
                col2im(&g, &gcol, gx);
            }
        }
    }
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Seven-loop reference convolution.
    fn naive(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, s: usize, p: usize) -> Tensor {
        let is = input.shape();
        let ws = weight.shape();
        let oh = (is.h + 2 * p - ws.h) / s + 1;
        let ow = (is.w + 2 * p - ws.w) / s + 1;
        Tensor::from_fn(Shape::new(is.n, ws.n, oh, ow), |n, co, oy, ox| {
            let mut acc = bias.map_or(0.0, |b| b.data()[co]);
            for ci in 0..is.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                            acc += weight.at(co, ci, ky, kx) * input.at(n, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_reference_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c_in, c_out, h, w, k, s, p) in &[
            (3, 4, 9, 7, 3, 1, 1),
            (2, 5, 8, 8, 3, 2, 1),
            (4, 3, 6, 5, 1, 1, 0),
            (4, 3, 6, 5, 1, 2, 0),
            (2, 2, 7, 7, 5, 1, 2),
            (1, 2, 5, 6, 3, 1, 0),
            (3, 2, 4, 4, 7, 1, 3),
        ] {
            let x = Tensor::uniform(Shape::new(2, c_in, h, w), -1.0, 1.0, &mut rng);
            let wt = Tensor::uniform(Shape::new(c_out, c_in, k, k), -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(Shape::new(1, c_out, 1, 1), -1.0, 1.0, &mut rng);
            let got = conv2d_forward(&x, &wt, Some(&b), s, p).unwrap();
            let want = naive(&x, &wt, Some(&b), s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn ones_kernel_counts_window() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let even = Tensor::zeros(Shape::new(1, 2, 2, 2));
        assert!(matches!(
            conv2d_forward(&x, &even, None, 1, 0),
            Err(crate::Error::InvalidArgument(_))
        ));
        let wrong = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d_forward(&x, &wrong, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("C_in = 3"), "{err}");
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry::new(Shape::new(1, 1, 17, 10), Shape::new(1, 1, 3, 3), 2, 1).unwrap();
        assert_eq!((g.out_h(), g.out_w()), (9, 5));
    }
}
