//! Batch normalization over the channel axis of 4-d activations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRegistry};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Registry keys of one batch-norm instance: affine gain/bias plus running
/// mean/variance buffers.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnParams {
    pub fn alloc<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(BnParams {
            gain: reg.add_const(&format!("{prefix}/bn/gain"), vec![channels], T::one())?,
            bias: reg.add_const(&format!("{prefix}/bn/bias"), vec![channels], T::zero())?,
            mean: reg.add_buffer(&format!("{prefix}/bn/mean"), vec![channels], T::zero())?,
            var: reg.add_buffer(&format!("{prefix}/bn/var"), vec![channels], T::one())?,
        })
    }

    /// Trainable elements (gain + bias); buffers are not parameters.
    pub fn param_count(channels: usize) -> u64 {
        2 * channels as u64
    }
}

/// Normalize `x` per channel. Training mode uses batch statistics and folds
/// them into the running buffers; evaluation mode uses the buffers.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    reg: &mut ParamRegistry<T>,
    bn: &BnParams,
    x: &Tensor<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if reg.slot(bn.gain).shape != [c] {
        return Err(Error::shape_mismatch(
            &reg.slot(bn.gain).shape,
            x.shape(),
            "batch_norm channels",
        ));
    }
    let gain = tape.lease(reg, bn.gain);
    let bias = tape.lease(reg, bn.bias);
    let hw = h * w;
    let m = n * hw;
    let eps = T::cast(BN_EPS);
    let src = x.data();

    let (mean, inv_std) = if training {
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for &v in &src[base..base + hw] {
                    mean[ch] += v;
                }
            }
        }
        for v in &mut mean {
            *v = *v / mf;
        }
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for &v in &src[base..base + hw] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v / mf;
        }
        // fold batch statistics into the running buffers
        let momentum = T::cast(BN_MOMENTUM);
        let one_minus = T::one() - momentum;
        {
            let buf = &mut reg.slot_mut(bn.mean).value;
            for (b, &s) in buf.iter_mut().zip(&mean) {
                *b = momentum * *b + one_minus * s;
            }
        }
        {
            let buf = &mut reg.slot_mut(bn.var).value;
            for (b, &s) in buf.iter_mut().zip(&var) {
                *b = momentum * *b + one_minus * s;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        (mean, inv_std)
    } else {
        let mean = reg.value(bn.mean).to_vec();
        let inv_std: Vec<T> = reg
            .value(bn.var)
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        (mean, inv_std)
    };

    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); src.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let (mu, istd, ga, bi) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(&src[base..base + hw]) {
                *o = (v - mu) * istd * ga + bi;
            }
        }
    }

    let (nx, ng, nb) = (x.node(), gain.node(), bias.node());
    let x_src = x.data_arc();
    let gain_src = gain.data_arc();
    let mean = Arc::new(mean);
    let inv_std = Arc::new(inv_std);
    Ok(tape.record(&[x, &gain, &bias], vec![n, c, h, w], out, || {
        Box::new(move |g, sink| {
            // per-channel reductions shared by all three gradients
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let (mu, istd) = (mean[ch], inv_std[ch]);
                    for (&gv, &xv) in g[base..base + hw].iter().zip(&x_src[base..base + hw]) {
                        sum_dy[ch] += gv;
                        sum_dy_xhat[ch] += gv * (xv - mu) * istd;
                    }
                }
            }
            sink.with(nb, |db| {
                for (o, &s) in db.iter_mut().zip(&sum_dy) {
                    *o += s;
                }
            });
            sink.with(ng, |dg| {
                for (o, &s) in dg.iter_mut().zip(&sum_dy_xhat) {
                    *o += s;
                }
            });
            sink.with(nx, |dx| {
                if training {
                    let mf = T::from_usize(n * hw).unwrap();
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let (mu, istd, ga) = (mean[ch], inv_std[ch], gain_src[ch]);
                            let k = ga * istd / mf;
                            for i in 0..hw {
                                let xhat = (x_src[base + i] - mu) * istd;
                                dx[base + i] += k
                                    * (mf * g[base + i]
                                        - sum_dy[ch]
                                        - xhat * sum_dy_xhat[ch]);
                            }
                        }
                    }
                } else {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let k = gain_src[ch] * inv_std[ch];
                            for i in 0..hw {
                                dx[base + i] += k * g[base + i];
                            }
                        }
                    }
                }
            });
        })
    }))
}

/// He-normal conv weight helper used across the model builders.
pub fn conv_init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Allocate a conv weight `[cout, cin, k, k]` with He-normal init.
pub fn alloc_conv_weight<T: Scalar>(
    reg: &mut ParamRegistry<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut DetRng,
) -> Result<ParamId> {
    reg.add_normal(name, vec![cout, cin, k, k], conv_init_std(cin * k * k), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(c: usize) -> (ParamRegistry<f64>, BnParams) {
        let mut reg = ParamRegistry::new();
        let bn = BnParams::alloc(&mut reg, "t", c).unwrap();
        (reg, bn)
    }

    #[test]
    fn normalized_input_passes_through() {
        let (mut reg, bn) = setup(1);
        let mut tape = Tape::<f64>::inference();
        // zero-mean unit-variance data, gain 1, bias 0, eval buffers (0,1)
        let x = Tensor::from_f64_slice(vec![1, 1, 2, 2], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = batch_norm(&mut tape, &mut reg, &bn, &x, false).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_becomes_bias() {
        let (mut reg, bn) = setup(2);
        let bias_id = bn.bias;
        reg.slot_mut(bias_id).value = vec![0.25, -0.5];
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::<f64>::filled(vec![2, 2, 3, 3], 7.0);
        let y = batch_norm(&mut tape, &mut reg, &bn, &x, true).unwrap();
        for img in 0..2 {
            for ch in 0..2 {
                for i in 0..9 {
                    let v = y.data()[(img * 2 + ch) * 9 + i];
                    let expect = if ch == 0 { 0.25 } else { -0.5 };
                    assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn training_mode_standardizes_batch() {
        let (mut reg, bn) = setup(3);
        let mut rng = DetRng::new(5, 0);
        let data: Vec<f64> = (0..4 * 3 * 8 * 8).map(|_| rng.normal(3.0, 2.5)).collect();
        let x = Tensor::new(vec![4, 3, 8, 8], data).unwrap();
        let mut tape = Tape::<f64>::inference();
        let y = batch_norm(&mut tape, &mut reg, &bn, &x, true).unwrap();
        let hw = 64;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for img in 0..4 {
                for i in 0..hw {
                    mean += y.data()[(img * 3 + ch) * hw + i];
                }
            }
            mean /= 4.0 * hw as f64;
            for img in 0..4 {
                for i in 0..hw {
                    let d = y.data()[(img * 3 + ch) * hw + i] - mean;
                    var += d * d;
                }
            }
            var /= 4.0 * hw as f64;
            assert!(mean.abs() < 1e-5, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel var {var}");
        }
    }

    #[test]
    fn running_buffers_blend_with_momentum() {
        let (mut reg, bn) = setup(1);
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::<f64>::filled(vec![1, 1, 2, 2], 10.0);
        batch_norm(&mut tape, &mut reg, &bn, &x, true).unwrap();
        // mean buffer: 0.9 * 0 + 0.1 * 10 = 1; var buffer: 0.9 * 1 + 0.1 * 0 = 0.9
        assert!((reg.value(bn.mean)[0] - 1.0).abs() < 1e-12);
        assert!((reg.value(bn.var)[0] - 0.9).abs() < 1e-12);
        assert!(reg.value(bn.var)[0] >= 0.0);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (mut reg, bn) = setup(4);
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        assert!(batch_norm(&mut tape, &mut reg, &bn, &x, true).is_err());
    }
}
