//! 2D cross-correlation (what deep-learning frameworks call convolution:
//! kernels are not flipped) with stride 1 and symmetric zero padding, plus
//! the three backward passes derived from it.
//!
//! Forward definition, row-major `C×H×W` input and `O×C×K×K` kernels:
//!
//! ```text
//! out[o][y][x] = bias[o] + Σ_c Σ_ky Σ_kx in[c][y+ky-p][x+kx-p] · k[o][c][ky][kx]
//! ```
//!
//! with out-of-range input taken as zero. Differentiating once gives the
//! input gradient (a full correlation against the kernels) and the kernel
//! gradient (a correlation of input against the output gradient); both are
//! implemented directly from the sum above rather than by re-expressing
//! them as forward convolutions, so index handling stays symmetric.

use super::{Scalar, Tensor};
use crate::{Error, Result};
use alloc::format;
use alloc::vec;

/// Output length along one axis: `n + 2·padding - k + 1`.
pub fn conv_output_len(n: usize, k: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding).checked_sub(k).map(|d| d + 1)
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn check_dims<T: Scalar>(
    input_shape: (usize, usize, usize),
    kernels: &Tensor<T>,
    padding: usize,
) -> Result<ConvDims> {
    let (c_in, h, w) = input_shape;
    let (c_out, kc, kh, kw) = kernels.dims4("conv2d kernels")?;
    if kc != c_in {
        return Err(Error::Shape {
            context: "conv2d kernel channels",
            expected: vec![c_in],
            got: vec![kc],
        });
    }
    if kh != kw {
        return Err(Error::Argument {
            context: "conv2d",
            message: format!("kernels must be square, got {kh}x{kw}"),
        });
    }
    if kh % 2 == 0 {
        return Err(Error::Argument {
            context: "conv2d",
            message: format!("kernel size must be odd, got {kh}"),
        });
    }
    let (oh, ow) = match (conv_output_len(h, kh, padding), conv_output_len(w, kw, padding)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::Shape {
                context: "conv2d output extent",
                expected: vec![kh],
                got: vec![h + 2 * padding, w + 2 * padding],
            })
        }
    };
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        oh,
        ow,
    })
}

/// Valid output range for one kernel offset. An output index `y` reads
/// input index `y + k_off - padding`; returns `(out_start, out_end,
/// in_start)` for the in-bounds portion, or `None` when the offset never
/// lands inside the input.
#[inline]
fn overlap(out_len: usize, in_len: usize, k_off: usize, padding: usize) -> Option<(usize, usize, usize)> {
    let shift = k_off as isize - padding as isize;
    let start = (-shift).max(0) as usize;
    let end = (in_len as isize - shift).min(out_len as isize);
    if (start as isize) < end {
        Some((start, end as usize, (start as isize + shift) as usize))
    } else {
        None
    }
}

/// Forward pass. `input` is `C×H×W`, `kernels` `O×C×K×K` (K odd), `bias`
/// has length `O`; the result is `O×H'×W'` with `H' = H + 2·padding - K + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let dims = check_dims(input.dims3("conv2d input")?, kernels, padding)?;
    let blen = bias.dims1("conv2d bias")?;
    if blen != dims.c_out {
        return Err(Error::Shape {
            context: "conv2d bias",
            expected: vec![dims.c_out],
            got: vec![blen],
        });
    }
    let mut out = Tensor::zeros(&[dims.c_out, dims.oh, dims.ow]);
    out.add_channel_bias(bias)?;
    conv2d_acc(&mut out, input, kernels, padding)?;
    Ok(out)
}

/// Accumulates the (bias-free) correlation of `input` with `kernels` into
/// `out`. Lets gate pre-activations sum several convolutions without
/// intermediate buffers.
pub(crate) fn conv2d_acc<T: Scalar>(
    out: &mut Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    padding: usize,
) -> Result<()> {
    let dims = check_dims(input.dims3("conv2d input")?, kernels, padding)?;
    let (oc, oh, ow) = out.dims3("conv2d output")?;
    if (oc, oh, ow) != (dims.c_out, dims.oh, dims.ow) {
        return Err(Error::Shape {
            context: "conv2d output",
            expected: vec![dims.c_out, dims.oh, dims.ow],
            got: vec![oc, oh, ow],
        });
    }
    let (h, w, k) = (dims.h, dims.w, dims.k);
    let in_plane = h * w;
    let out_plane = oh * ow;
    let kdata = kernels.data();
    for o in 0..dims.c_out {
        for c in 0..dims.c_in {
            for ky in 0..k {
                let Some((y0, y1, iy0)) = overlap(oh, h, ky, padding) else {
                    continue;
                };
                for kx in 0..k {
                    let Some((x0, x1, ix0)) = overlap(ow, w, kx, padding) else {
                        continue;
                    };
                    let weight = kdata[((o * dims.c_in + c) * k + ky) * k + kx];
                    if weight == T::zero() {
                        continue;
                    }
                    let n = x1 - x0;
                    for y in y0..y1 {
                        let iy = iy0 + (y - y0);
                        let src_at = c * in_plane + iy * w + ix0;
                        let dst_at = o * out_plane + y * ow + x0;
                        let src = &input.data()[src_at..src_at + n];
                        let dst = &mut out.data_mut()[dst_at..dst_at + n];
                        for i in 0..n {
                            dst[i] = dst[i] + weight * src[i];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradient with respect to the input: `d in[c][iy][ix] = Σ_o Σ_ky Σ_kx
/// d out[o][iy-ky+p][ix-kx+p] · k[o][c][ky][kx]` over in-range terms.
/// `input_hw` restores the forward input extent, which the output shape
/// alone does not determine.
pub fn conv2d_backward_input<T: Scalar>(
    kernels: &Tensor<T>,
    out_grad: &Tensor<T>,
    input_hw: (usize, usize),
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_out, c_in, _, _) = kernels.dims4("conv2d_backward_input kernels")?;
    let dims = check_dims((c_in, input_hw.0, input_hw.1), kernels, padding)?;
    let (gc, gh, gw) = out_grad.dims3("conv2d_backward_input out_grad")?;
    if (gc, gh, gw) != (c_out, dims.oh, dims.ow) {
        return Err(Error::Shape {
            context: "conv2d_backward_input out_grad",
            expected: vec![c_out, dims.oh, dims.ow],
            got: vec![gc, gh, gw],
        });
    }
    let mut din = Tensor::zeros(&[c_in, input_hw.0, input_hw.1]);
    conv2d_backward_input_acc(&mut din, kernels, out_grad, padding)?;
    Ok(din)
}

pub(crate) fn conv2d_backward_input_acc<T: Scalar>(
    din: &mut Tensor<T>,
    kernels: &Tensor<T>,
    out_grad: &Tensor<T>,
    padding: usize,
) -> Result<()> {
    let (c_in, h, w) = din.dims3("conv2d_backward_input din")?;
    let dims = check_dims((c_in, h, w), kernels, padding)?;
    let (gc, gh, gw) = out_grad.dims3("conv2d_backward_input out_grad")?;
    if (gc, gh, gw) != (dims.c_out, dims.oh, dims.ow) {
        return Err(Error::Shape {
            context: "conv2d_backward_input out_grad",
            expected: vec![dims.c_out, dims.oh, dims.ow],
            got: vec![gc, gh, gw],
        });
    }
    let k = dims.k;
    let in_plane = h * w;
    let out_plane = gh * gw;
    let kdata = kernels.data();
    for o in 0..dims.c_out {
        for c in 0..c_in {
            for ky in 0..k {
                let Some((y0, y1, iy0)) = overlap(gh, h, ky, padding) else {
                    continue;
                };
                for kx in 0..k {
                    let Some((x0, x1, ix0)) = overlap(gw, w, kx, padding) else {
                        continue;
                    };
                    let weight = kdata[((o * c_in + c) * k + ky) * k + kx];
                    if weight == T::zero() {
                        continue;
                    }
                    let n = x1 - x0;
                    for y in y0..y1 {
                        let iy = iy0 + (y - y0);
                        let g_at = o * out_plane + y * gw + x0;
                        let d_at = c * in_plane + iy * w + ix0;
                        let g = &out_grad.data()[g_at..g_at + n];
                        let d = &mut din.data_mut()[d_at..d_at + n];
                        for i in 0..n {
                            d[i] = d[i] + weight * g[i];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradient with respect to the kernels: `d k[o][c][ky][kx] = Σ_y Σ_x
/// d out[o][y][x] · in[c][y+ky-p][x+kx-p]` over in-range terms.
pub fn conv2d_backward_kernels<T: Scalar>(
    input: &Tensor<T>,
    out_grad: &Tensor<T>,
    kernel_size: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, _, _) = input.dims3("conv2d_backward_kernels input")?;
    let (c_out, _, _) = out_grad.dims3("conv2d_backward_kernels out_grad")?;
    let mut dk = Tensor::zeros(&[c_out, c_in, kernel_size, kernel_size]);
    conv2d_backward_kernels_acc(&mut dk, input, out_grad, padding)?;
    Ok(dk)
}

pub(crate) fn conv2d_backward_kernels_acc<T: Scalar>(
    dkernels: &mut Tensor<T>,
    input: &Tensor<T>,
    out_grad: &Tensor<T>,
    padding: usize,
) -> Result<()> {
    let dims = check_dims(input.dims3("conv2d_backward_kernels input")?, dkernels, padding)?;
    let (gc, gh, gw) = out_grad.dims3("conv2d_backward_kernels out_grad")?;
    if (gc, gh, gw) != (dims.c_out, dims.oh, dims.ow) {
        return Err(Error::Shape {
            context: "conv2d_backward_kernels out_grad",
            expected: vec![dims.c_out, dims.oh, dims.ow],
            got: vec![gc, gh, gw],
        });
    }
    let (h, w, k) = (dims.h, dims.w, dims.k);
    let in_plane = h * w;
    let out_plane = gh * gw;
    for o in 0..dims.c_out {
        for c in 0..dims.c_in {
            for ky in 0..k {
                let Some((y0, y1, iy0)) = overlap(gh, h, ky, padding) else {
                    continue;
                };
                for kx in 0..k {
                    let Some((x0, x1, ix0)) = overlap(gw, w, kx, padding) else {
                        continue;
                    };
                    let n = x1 - x0;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = iy0 + (y - y0);
                        let g_at = o * out_plane + y * gw + x0;
                        let s_at = c * in_plane + iy * w + ix0;
                        let g = &out_grad.data()[g_at..g_at + n];
                        let s = &input.data()[s_at..s_at + n];
                        for i in 0..n {
                            acc = acc + g[i] * s[i];
                        }
                    }
                    let at = ((o * dims.c_in + c) * k + ky) * k + kx;
                    dkernels.data_mut()[at] = dkernels.data_mut()[at] + acc;
                }
            }
        }
    }
    Ok(())
}

/// Gradient with respect to the bias: per-output-channel sum of `out_grad`.
pub fn conv2d_backward_bias<T: Scalar>(out_grad: &Tensor<T>) -> Result<Tensor<T>> {
    out_grad.channel_sums()
}

pub(crate) fn conv2d_backward_bias_acc<T: Scalar>(
    dbias: &mut Tensor<T>,
    out_grad: &Tensor<T>,
) -> Result<()> {
    let sums = out_grad.channel_sums()?;
    dbias.accumulate(&sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn ones(shape: &[usize]) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    fn zero_bias(c: usize) -> Tensor<f64> {
        Tensor::zeros(&[c])
    }

    // 3x3 input 1..9, 3x3 ones kernel, padding 1. Each output cell is the
    // sum of the in-bounds 3x3 neighborhood; worked out by hand.
    #[test]
    fn padded_ones_kernel_neighborhood_sums() {
        let input = tensor(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let out = conv2d(&input, &ones(&[1, 1, 3, 3]), &zero_bias(1), 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        let expected = [12., 21., 16., 27., 45., 33., 24., 39., 28.];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn unpadded_output_shrinks() {
        let input = tensor(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let out = conv2d(&input, &ones(&[1, 1, 3, 3]), &zero_bias(1), 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[45.0]);
    }

    // A unit impulse at the input origin reproduces the kernel REVERSED
    // around the impulse: out[y][x] = k[1-y][1-x] for the in-range cells.
    // This pins the cross-correlation orientation (no kernel flip); a
    // flipping convolution would emit [5,6,0, 8,9,0, 0,0,0] instead.
    #[test]
    fn impulse_response_pins_orientation() {
        let mut input = Tensor::<f64>::zeros(&[1, 3, 3]);
        input.set(&[0, 0, 0], 1.0);
        let kernel = tensor(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let out = conv2d(&input, &kernel, &zero_bias(1), 1).unwrap();
        let expected = [5., 4., 0., 2., 1., 0., 0., 0., 0.];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn channels_sum_and_outputs_are_independent() {
        // two input channels, two output channels with distinct kernels
        let input = tensor(&[2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]);
        let mut kernels = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        // out0 = 1*ch0 + 2*ch1, out1 = -1*ch1
        kernels.set(&[0, 0, 0, 0], 1.0);
        kernels.set(&[0, 1, 0, 0], 2.0);
        kernels.set(&[1, 1, 0, 0], -1.0);
        let bias = tensor(&[2], &[0.5, 0.0]);
        let out = conv2d(&input, &kernels, &bias, 0).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        assert_eq!(
            out.data(),
            &[21.5, 42.5, 63.5, 84.5, -10., -20., -30., -40.]
        );
    }

    #[test]
    fn bias_is_added_once_per_cell() {
        let input = Tensor::<f64>::zeros(&[1, 4, 4]);
        let bias = tensor(&[1], &[3.25]);
        let out = conv2d(&input, &ones(&[1, 1, 3, 3]), &bias, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    // d k[ky][kx] = Σ_{y,x} g[y][x] · in[y+ky-1][x+kx-1] with g all ones on
    // a 2x2 input [1,2;3,4]; the nine sums worked out by hand.
    #[test]
    fn kernel_gradient_hand_oracle() {
        let input = tensor(&[1, 2, 2], &[1., 2., 3., 4.]);
        let g = ones(&[1, 2, 2]);
        let dk = conv2d_backward_kernels(&input, &g, 3, 1).unwrap();
        assert_eq!(dk.shape(), &[1, 1, 3, 3]);
        let expected = [1., 3., 2., 4., 10., 6., 3., 7., 4.];
        assert_eq!(dk.data(), &expected);
    }

    // d in[iy][ix] = Σ_{ky,kx in range} k[ky][kx] with g all ones and the
    // kernel 1..9; equals a full correlation with the flipped kernel.
    #[test]
    fn input_gradient_hand_oracle() {
        let kernel = tensor(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let g = ones(&[1, 2, 2]);
        let din = conv2d_backward_input(&kernel, &g, (2, 2), 1).unwrap();
        assert_eq!(din.shape(), &[1, 2, 2]);
        assert_eq!(din.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let g = tensor(&[2, 2, 2], &[1., 2., 3., 4., -1., -1., -1., 7.]);
        let db = conv2d_backward_bias(&g).unwrap();
        assert_eq!(db.data(), &[10.0, 4.0]);
    }

    #[test]
    fn rejects_even_and_non_square_kernels() {
        let input = Tensor::<f64>::zeros(&[1, 4, 4]);
        let even = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&input, &even, &zero_bias(1), 0),
            Err(Error::Argument { .. })
        ));
        let rect = Tensor::<f64>::zeros(&[1, 1, 3, 1]);
        assert!(matches!(
            conv2d(&input, &rect, &zero_bias(1), 0),
            Err(Error::Argument { .. })
        ));
    }

    #[test]
    fn rejects_kernel_larger_than_padded_input() {
        let input = Tensor::<f64>::zeros(&[1, 2, 2]);
        let k5 = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&input, &k5, &zero_bias(1), 0),
            Err(Error::Shape { .. })
        ));
        // padding 1 makes it fit: 2 + 2 - 5 + 1 = 0 -> still rejected
        assert!(conv2d(&input, &k5, &zero_bias(1), 1).is_err());
        // padding 2 gives a 2x2 output
        let out = conv2d(&input, &k5, &zero_bias(1), 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::<f64>::zeros(&[3, 4, 4]);
        let kernels = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&input, &kernels, &zero_bias(1), 1),
            Err(Error::Shape { .. })
        ));
    }

    // Correlation is linear in the input: conv(a·x + b·y) = a·conv(x) + b·conv(y).
    #[test]
    fn linear_in_input() {
        let x = tensor(&[1, 3, 3], &[0.5, -1., 2., 3., -0.25, 1., 0., 4., -2.]);
        let y = tensor(&[1, 3, 3], &[1., 1., -3., 0.5, 2., -1., 7., 0., 0.25]);
        let kernel = tensor(&[1, 1, 3, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9]);
        let (a, b) = (2.5, -1.25);
        let combo: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&xv, &yv)| a * xv + b * yv)
            .collect();
        let combo = tensor(&[1, 3, 3], &combo);
        let lhs = conv2d(&combo, &kernel, &zero_bias(1), 1).unwrap();
        let cx = conv2d(&x, &kernel, &zero_bias(1), 1).unwrap();
        let cy = conv2d(&y, &kernel, &zero_bias(1), 1).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }
}

