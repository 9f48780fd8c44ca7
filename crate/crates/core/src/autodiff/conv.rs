//! 3×3 stride-1 "same" convolution with zero padding.
//!
//! Each sample is lowered to a `(C·9) × (H·W)` column matrix and multiplied
//! against the `O × (C·9)` kernel matrix. Samples run in parallel; kernel and
//! bias gradients are reduced in sample order so results do not depend on
//! thread scheduling.

use rayon::prelude::*;

use crate::tensor::{Result, Tensor, TensorError};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Validates input/kernel/bias shapes and returns `[n, c, h, w, o]`.
pub(crate) fn check_shapes(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<[usize; 5]> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [o, kc, kh, kw] = kernel.dims4("conv2d")?;
    if kc != c || kh != KERNEL || kw != KERNEL {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![o, c, KERNEL, KERNEL],
            found: kernel.shape().to_vec(),
        });
    }
    bias.expect_shape("conv2d", &[o])?;
    Ok([n, c, h, w, o])
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// C (m×n, row-major) = alpha·A·B + beta·C with explicit strides for A and B.
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
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    // SAFETY: the slice bounds above cover every element addressed by the
    // given dimensions and strides, and `c` does not alias `a` or `b`.
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

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, c, h, w, o] = check_shapes(input, kernel, bias)?;
    let hw = h * w;
    let k = c * TAPS;
    let mut out = vec![0.0; n * o * hw];
    out.par_chunks_mut(o * hw)
        .zip(input.data().par_chunks(c * hw))
        .for_each_init(
            || vec![0.0; k * hw],
            |col, (y, x)| {
                im2col(x, c, h, w, col);
                for (oc, plane) in y.chunks_mut(hw).enumerate() {
                    plane.fill(bias.data()[oc]);
                }
                gemm(o, k, hw, kernel.data(), (k, 1), col, (hw, 1), 1.0, y);
            },
        );
    Tensor::new(vec![n, o, h, w], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let [n, c, h, w, o] = check_shapes(input, kernel, bias)?;
    grad_out.expect_shape("conv2d backward", &[n, o, h, w])?;
    let hw = h * w;
    let k = c * TAPS;

    let mut grad_input = vec![0.0; n * c * hw];
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_input
        .par_chunks_mut(c * hw)
        .zip(input.data().par_chunks(c * hw))
        .zip(grad_out.data().par_chunks(o * hw))
        .map(|((gx, x), gy)| {
            let mut col = vec![0.0; k * hw];
            im2col(x, c, h, w, &mut col);
            // dK = dY · colᵀ
            let mut gk = vec![0.0; o * k];
            gemm(o, hw, k, gy, (hw, 1), &col, (1, hw), 0.0, &mut gk);
            let gb: Vec<f64> = gy.chunks(hw).map(|p| p.iter().sum()).collect();
            // dcol = Kᵀ · dY, reusing the column buffer
            gemm(k, o, hw, kernel.data(), (1, k), gy, (hw, 1), 0.0, &mut col);
            col2im(&col, c, h, w, gx);
            (gk, gb)
        })
        .collect();

    let mut grad_kernel = vec![0.0; o * k];
    let mut grad_bias = vec![0.0; o];
    for (gk, gb) in &partials {
        grad_kernel.iter_mut().zip(gk).for_each(|(a, b)| *a += b);
        grad_bias.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        kernel: Tensor::new(kernel.shape().to_vec(), grad_kernel)?,
        bias: Tensor::new(vec![o], grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct seven-loop summation with explicit zero padding.
    fn naive(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let [n, c, h, w] = input.dims4("").unwrap();
        let o = kernel.shape()[0];
        let x = input.data();
        let k = kernel.data();
        let mut out = Tensor::zeros(&[n, o, h, w]);
        let y = out.data_mut();
        for ni in 0..n {
            for oi in 0..o {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.data()[oi];
                        for ci in 0..c {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let sy = yy as isize + dy as isize - 1;
                                    let sx = xx as isize + dx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * c + ci) * h + sy as usize) * w + sx as usize]
                                        * k[((oi * c + ci) * 3 + dy) * 3 + dx];
                                }
                            }
                        }
                        y[((ni * o + oi) * h + yy) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_center_nine_corner_four() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let fast = conv2d_forward(&x, &k, &b).unwrap();
        let slow = naive(&x, &k, &b);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn single_column_and_row_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [[1, 2, 1, 6], [1, 2, 6, 1], [1, 1, 1, 1]] {
            let x = random(&shape, &mut rng);
            let k = random(&[2, shape[1], 3, 3], &mut rng);
            let b = random(&[2], &mut rng);
            let fast = conv2d_forward(&x, &k, &b).unwrap();
            let slow = naive(&x, &k, &b);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[3, 4, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }));
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3, 6, 7], &mut rng);
        let b = random(&[2, 3, 6, 7], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[4]);
        let (alpha, beta) = (0.7, -1.3);
        let mix = Tensor::from_fn(a.shape(), |i| alpha * a.data()[i] + beta * b.data()[i]);
        let lhs = conv2d_forward(&mix, &k, &zero).unwrap();
        let ya = conv2d_forward(&a, &k, &zero).unwrap();
        let yb = conv2d_forward(&b, &k, &zero).unwrap();
        for i in 0..lhs.len() {
            let rhs = alpha * ya.data()[i] + beta * yb.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <conv(x), g> must equal <x, dx> + <k, dk> + <b, db> for bilinear conv.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let k = random(&[2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let g = random(&[2, 2, 4, 5], &mut rng);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[2])).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let grads = conv2d_backward(&x, &k, &b, &g).unwrap();
        let via_x: f64 = x.data().iter().zip(grads.input.data()).map(|(a, b)| a * b).sum();
        let via_k: f64 = k.data().iter().zip(grads.kernel.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_k).abs() < 1e-10);
        let gsum: Vec<f64> = (0..2)
            .map(|o| (0..2).flat_map(|n| g.data()[(n * 2 + o) * 20..][..20].to_vec()).sum())
            .collect();
        assert!((grads.bias.data()[0] - gsum[0]).abs() < 1e-12);
        assert!((grads.bias.data()[1] - gsum[1]).abs() < 1e-12);
    }
}
