use crate::error::{invalid, Result};
use crate::tensor::{Shape, Tensor};

/// Half-open input range covered by output cell `i` of `out` cells over `len`
/// inputs: `[floor(i·len/out), ceil((i+1)·len/out))`.
pub fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub fn check_adaptive(input: Shape, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("avg_pool_adaptive: output size {out_h}x{out_w} has a zero dimension"));
    }
    if out_h > input.h || out_w > input.w {
        return Err(invalid!(
            "avg_pool_adaptive: output {out_h}x{out_w} exceeds input {}x{}",
            input.h,
            input.w
        ));
    }
    Ok(())
}

pub fn avg_pool_adaptive_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    check_adaptive(s, out_h, out_w)?;
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bin(oy, out_h, s.h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bin(ox, out_w, s.w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * s.w + x0..y * s.w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn avg_pool_adaptive_backward(input: Shape, out_h: usize, out_w: usize, grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input.numel()];
    let out_plane = out_h * out_w;
    for (plane, g) in gx.chunks_mut(input.plane()).zip(grad_out.chunks(out_plane)) {
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bin(oy, out_h, input.h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bin(ox, out_w, input.w);
                let share = g[oy * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut plane[y * input.w + x0..y * input.w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_input() {
        for len in 1..20 {
            for out in 1..=len {
                let mut covered = vec![false; len];
                for i in 0..out {
                    let (a, b) = adaptive_bin(i, out, len);
                    assert!(a < b && b <= len);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c), "len={len} out={out}");
            }
        }
    }

    #[test]
    fn global_mean_and_block_means() {
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, _| y as f64);
        let g = avg_pool_adaptive_forward(&x, 1, 1).unwrap();
        assert_eq!(g.data(), &[1.5]);
        let b = avg_pool_adaptive_forward(&x, 2, 2).unwrap();
        assert_eq!(b.data(), &[0.5, 0.5, 2.5, 2.5]);
    }

    #[test]
    fn backward_spreads_uniformly_within_bin() {
        let s = Shape::new(1, 1, 4, 4);
        let g = avg_pool_adaptive_backward(s, 2, 2, &[4.0, 8.0, 0.0, 0.0]);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[3], 2.0);
        assert_eq!(g[15], 0.0);
    }

    #[test]
    fn zero_or_oversized_output_rejected() {
        let x = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(avg_pool_adaptive_forward(&x, 0, 1).is_err());
        assert!(avg_pool_adaptive_forward(&x, 4, 1).is_err());
    }
}
