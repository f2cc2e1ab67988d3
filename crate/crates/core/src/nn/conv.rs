//! Convolution primitives: dense conv (im2col lowering), depthwise conv,
//! the one-pixel diagonal shift used by factorized reductions, and global
//! average pooling. All convolutions use same-padding and carry no bias.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::linalg::{mm_abt_acc, mm_acc, mm_atb_acc};
use crate::tensor::{Tape, Tensor};

/// Output extent and begin-padding for same-padding at a given stride.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, needed / 2)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_t: usize,
    pad_l: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), cin * kh * kw * out_h * out_w);
    let ohw = out_h * out_w;
    for c in 0..cin {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ohw;
                for oi in 0..out_h {
                    let ii = (oi * stride + ki) as isize - pad_t as isize;
                    let dst = row + oi * out_w;
                    if ii < 0 || ii >= h as isize {
                        col[dst..dst + out_w].fill(T::zero());
                        continue;
                    }
                    let src_row = ii as usize * w;
                    for oj in 0..out_w {
                        let jj = (oj * stride + kj) as isize - pad_l as isize;
                        col[dst + oj] = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            plane[src_row + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_t: usize,
    pad_l: usize,
    img: &mut [T],
) {
    let ohw = out_h * out_w;
    for c in 0..cin {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ohw;
                for oi in 0..out_h {
                    let ii = (oi * stride + ki) as isize - pad_t as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = ii as usize * w;
                    for oj in 0..out_w {
                        let jj = (oj * stride + kj) as isize - pad_l as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[src_row + jj as usize] += col[row + oi * out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution, weights `[cout, cin, kh, kw]`, same-padding, no bias.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4()?;
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != cin {
        return Err(Error::shape_mismatch(ws, x.shape(), "conv2d weights vs input"));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("conv stride {stride}")));
    }
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (out_h, pad_t) = same_padding(h, kh, stride);
    let (out_w, pad_l) = same_padding(w, kw, stride);
    let ohw = out_h * out_w;
    let krows = cin * kh * kw;

    let mut out = vec![T::zero(); n * cout * ohw];
    let mut col = vec![T::zero(); krows * ohw];
    for img in 0..n {
        im2col(
            &x.data()[img * cin * h * w..(img + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, out_h, out_w, pad_t, pad_l, &mut col,
        );
        mm_acc(
            weights.data(),
            &col,
            cout,
            krows,
            ohw,
            &mut out[img * cout * ohw..(img + 1) * cout * ohw],
        );
    }

    let (nx, nw) = (x.node(), weights.node());
    let (dx_src, dw_src) = (x.data_arc(), weights.data_arc());
    Ok(tape.record(&[x, weights], vec![n, cout, out_h, out_w], out, || {
        Box::new(move |g, sink| {
            // dW = sum_n dOut_n * col_n^T  (recompute im2col per image)
            sink.with(nw, |dw| {
                let mut col = vec![T::zero(); krows * ohw];
                for img in 0..n {
                    im2col(
                        &dx_src[img * cin * h * w..(img + 1) * cin * h * w],
                        cin, h, w, kh, kw, stride, out_h, out_w, pad_t, pad_l, &mut col,
                    );
                    mm_abt_acc(&g[img * cout * ohw..(img + 1) * cout * ohw], &col, cout, ohw, krows, dw);
                }
            });
            // dX = col2im(W^T * dOut)
            sink.with(nx, |dx| {
                let mut dcol = vec![T::zero(); krows * ohw];
                for img in 0..n {
                    dcol.fill(T::zero());
                    mm_atb_acc(
                        &dw_src,
                        &g[img * cout * ohw..(img + 1) * cout * ohw],
                        cout,
                        krows,
                        ohw,
                        &mut dcol,
                    );
                    col2im_acc(
                        &dcol,
                        cin, h, w, kh, kw, stride, out_h, out_w, pad_t, pad_l,
                        &mut dx[img * cin * h * w..(img + 1) * cin * h * w],
                    );
                }
            });
        })
    }))
}

/// Depthwise 2-d convolution, weights `[c, 1, kh, kw]`, same-padding.
pub fn depthwise_conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let ws = weights.shape();
    if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
        return Err(Error::shape_mismatch(ws, x.shape(), "depthwise weights vs input"));
    }
    let (kh, kw) = (ws[2], ws[3]);
    let (out_h, pad_t) = same_padding(h, kh, stride);
    let (out_w, pad_l) = same_padding(w, kw, stride);
    let ohw = out_h * out_w;

    let run_forward = |src: &[T], wsrc: &[T], out: &mut [T]| {
        for img in 0..n {
            for ch in 0..c {
                let plane = &src[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                let ker = &wsrc[ch * kh * kw..(ch + 1) * kh * kw];
                let dst = &mut out[(img * c + ch) * ohw..(img * c + ch + 1) * ohw];
                for oi in 0..out_h {
                    for oj in 0..out_w {
                        let mut acc = T::zero();
                        for ki in 0..kh {
                            let ii = (oi * stride + ki) as isize - pad_t as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = (oj * stride + kj) as isize - pad_l as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += plane[ii as usize * w + jj as usize] * ker[ki * kw + kj];
                            }
                        }
                        dst[oi * out_w + oj] = acc;
                    }
                }
            }
        }
    };

    let mut out = vec![T::zero(); n * c * ohw];
    run_forward(x.data(), weights.data(), &mut out);

    let (nx, nw) = (x.node(), weights.node());
    let (x_src, w_src) = (x.data_arc(), weights.data_arc());
    Ok(tape.record(&[x, weights], vec![n, c, out_h, out_w], out, || {
        Box::new(move |g, sink| {
            sink.with(nw, |dw| {
                for img in 0..n {
                    for ch in 0..c {
                        let plane = &x_src[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                        let gout = &g[(img * c + ch) * ohw..(img * c + ch + 1) * ohw];
                        let dker = &mut dw[ch * kh * kw..(ch + 1) * kh * kw];
                        for oi in 0..out_h {
                            for oj in 0..out_w {
                                let gv = gout[oi * out_w + oj];
                                if gv == T::zero() {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let ii = (oi * stride + ki) as isize - pad_t as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let jj = (oj * stride + kj) as isize - pad_l as isize;
                                        if jj >= 0 && jj < w as isize {
                                            dker[ki * kw + kj] +=
                                                gv * plane[ii as usize * w + jj as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            sink.with(nx, |dx| {
                for img in 0..n {
                    for ch in 0..c {
                        let ker = &w_src[ch * kh * kw..(ch + 1) * kh * kw];
                        let gout = &g[(img * c + ch) * ohw..(img * c + ch + 1) * ohw];
                        let dplane = &mut dx[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                        for oi in 0..out_h {
                            for oj in 0..out_w {
                                let gv = gout[oi * out_w + oj];
                                if gv == T::zero() {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let ii = (oi * stride + ki) as isize - pad_t as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let jj = (oj * stride + kj) as isize - pad_l as isize;
                                        if jj >= 0 && jj < w as isize {
                                            dplane[ii as usize * w + jj as usize] +=
                                                gv * ker[ki * kw + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        })
    }))
}

/// Shift an activation one pixel up-left: `y[i,j] = x[i+1,j+1]`, zero-filled
/// at the bottom-right border. Feeding this into a stride-2 1x1 convolution
/// samples the odd-offset pixel grid, which is what the second path of a
/// factorized reduction needs.
pub fn shift_one_pixel<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                out[base + i * w + j] = src[base + (i + 1) * w + (j + 1)];
            }
        }
    }
    let nx = x.node();
    Ok(tape.record(&[x], vec![n, c, h, w], out, || {
        Box::new(move |g, sink| {
            sink.with(nx, |dx| {
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for i in 0..h - 1 {
                        for j in 0..w - 1 {
                            dx[base + (i + 1) * w + (j + 1)] += g[base + i * w + j];
                        }
                    }
                }
            });
        })
    }))
}

/// Mean over the spatial extent: `[n,c,h,w] -> [n,c]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let scale = T::from_usize(hw).unwrap();
    let src = x.data();
    let mut out = vec![T::zero(); n * c];
    for (plane, o) in out.iter_mut().enumerate() {
        let base = plane * hw;
        *o = src[base..base + hw].iter().copied().sum::<T>() / scale;
    }
    let nx = x.node();
    Ok(tape.record(&[x], vec![n, c], out, || {
        Box::new(move |g, sink| {
            sink.with(nx, |dx| {
                for plane in 0..n * c {
                    let gv = g[plane] / scale;
                    for d in &mut dx[plane * hw..(plane + 1) * hw] {
                        *d += gv;
                    }
                }
            });
        })
    }))
}
