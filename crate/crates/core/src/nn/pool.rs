//! 3x3 window pooling with same-padding.
//!
//! Padding is never selected: max pooling pads with negative infinity, min
//! pooling with positive infinity (the window scan simply skips out-of-range
//! taps). The average variant divides by the number of valid taps and exists
//! as a non-default stand-in for min pooling.

use crate::error::{Error, Result};
use crate::nn::conv::same_padding;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Min,
    Avg,
}

pub fn pool2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    mode: PoolMode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("pool stride {stride}")));
    }
    let (out_h, pad_t) = same_padding(h, kernel, stride);
    let (out_w, pad_l) = same_padding(w, kernel, stride);
    let ohw = out_h * out_w;
    let src = x.data();

    let mut out = vec![T::zero(); n * c * ohw];
    // For max/min: flat input index of the selected element (first win on
    // ties, scan order row-major). For avg: unused.
    let mut arg: Vec<u32> = if mode == PoolMode::Avg {
        Vec::new()
    } else {
        vec![0; n * c * ohw]
    };

    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut best = match mode {
                    PoolMode::Max => T::neg_infinity(),
                    PoolMode::Min => T::infinity(),
                    PoolMode::Avg => T::zero(),
                };
                let mut best_idx = 0usize;
                let mut count = 0usize;
                for ki in 0..kernel {
                    let ii = (oi * stride + ki) as isize - pad_t as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let jj = (oj * stride + kj) as isize - pad_l as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let idx = base + ii as usize * w + jj as usize;
                        let v = src[idx];
                        count += 1;
                        match mode {
                            PoolMode::Max => {
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                            PoolMode::Min => {
                                if v < best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                            PoolMode::Avg => best += v,
                        }
                    }
                }
                let o = plane * ohw + oi * out_w + oj;
                match mode {
                    PoolMode::Avg => out[o] = best / T::from_usize(count).unwrap(),
                    _ => {
                        out[o] = best;
                        arg[o] = best_idx as u32;
                    }
                }
            }
        }
    }

    let nx = x.node();
    Ok(tape.record(&[x], vec![n, c, out_h, out_w], out, || {
        Box::new(move |g, sink| {
            sink.with(nx, |dx| match mode {
                PoolMode::Avg => {
                    // redo the window scan to know each output's tap count
                    for plane in 0..n * c {
                        for oi in 0..out_h {
                            for oj in 0..out_w {
                                let mut taps = Vec::with_capacity(kernel * kernel);
                                for ki in 0..kernel {
                                    let ii = (oi * stride + ki) as isize - pad_t as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kernel {
                                        let jj = (oj * stride + kj) as isize - pad_l as isize;
                                        if jj >= 0 && jj < w as isize {
                                            taps.push(
                                                plane * h * w + ii as usize * w + jj as usize,
                                            );
                                        }
                                    }
                                }
                                let gv = g[plane * ohw + oi * out_w + oj]
                                    / T::from_usize(taps.len()).unwrap();
                                for idx in taps {
                                    dx[idx] += gv;
                                }
                            }
                        }
                    }
                }
                _ => {
                    for (o, &gv) in g.iter().enumerate() {
                        dx[arg[o] as usize] += gv;
                    }
                }
            });
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_pool_on_constant_stays_constant() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::<f64>::filled(vec![1, 1, 4, 4], 3.5);
        let y = pool2d(&mut tape, &x, 3, 1, PoolMode::Min).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::from_f64_slice(
            vec![1, 1, 3, 3],
            &[1.0, 2.0, 3.0, 4.0, 9.0, 6.0, 7.0, 8.0, 5.0],
        )
        .unwrap();
        let y = pool2d(&mut tape, &x, 3, 1, PoolMode::Max).unwrap();
        // every window containing the center sees 9
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn stride_two_halves_extent() {
        let mut tape = Tape::<f32>::inference();
        let x = Tensor::<f32>::zeros(vec![1, 2, 32, 32]);
        let y = pool2d(&mut tape, &x, 3, 2, PoolMode::Max).unwrap();
        assert_eq!(y.shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn max_pool_gradient_goes_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x0 = Tensor::from_f64_slice(vec![1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]).unwrap();
        let x = tape.watch(&x0);
        let y = pool2d(&mut tape, &x, 3, 2, PoolMode::Max).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_divides_by_valid_taps() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::<f64>::filled(vec![1, 1, 2, 2], 6.0);
        let y = pool2d(&mut tape, &x, 3, 1, PoolMode::Avg).unwrap();
        // all windows clip to the 2x2 extent: mean of 4 (or fewer) sixes is 6
        assert!(y.data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }
}
