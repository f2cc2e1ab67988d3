//! Drop-path over a cell's loose-end outputs.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// During training, each output is independently kept with probability
/// `keep_prob` (scaled by `1/keep_prob`) or zeroed. If every coin flip
/// fails, one uniformly chosen output is retained so a cell never goes
/// entirely dark. Evaluation mode is the identity.
pub fn drop_path<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[Tensor<T>],
    keep_prob: f64,
    training: bool,
    rng: &mut DetRng,
) -> Result<Vec<Tensor<T>>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "drop-path keep probability {keep_prob} outside (0, 1]"
        )));
    }
    if !training || keep_prob == 1.0 {
        return Ok(outputs.to_vec());
    }
    let mut keep: Vec<bool> = (0..outputs.len())
        .map(|_| rng.bernoulli(keep_prob))
        .collect();
    if keep.iter().all(|&k| !k) {
        let idx = rng.below(outputs.len());
        keep[idx] = true;
    }
    let scale = T::cast(1.0 / keep_prob);
    Ok(outputs
        .iter()
        .zip(keep)
        .map(|(t, k)| tape.scale(t, if k { scale } else { T::zero() }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outs(n: usize) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|i| Tensor::filled(vec![2, 2], 1.0 + i as f64))
            .collect()
    }

    #[test]
    fn keep_prob_one_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut rng = DetRng::new(0, 0);
        let o = outs(3);
        let r = drop_path(&mut tape, &o, 1.0, true, &mut rng).unwrap();
        for (a, b) in o.iter().zip(&r) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn eval_mode_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut rng = DetRng::new(0, 0);
        let o = outs(3);
        let r = drop_path(&mut tape, &o, 0.3, false, &mut rng).unwrap();
        for (a, b) in o.iter().zip(&r) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn invalid_keep_prob_rejected() {
        let mut tape = Tape::<f64>::new();
        let mut rng = DetRng::new(0, 0);
        let o = outs(2);
        assert!(drop_path(&mut tape, &o, 0.0, true, &mut rng).is_err());
        assert!(drop_path(&mut tape, &o, 1.5, true, &mut rng).is_err());
    }

    #[test]
    fn empirical_keep_rate_matches() {
        let mut rng = DetRng::new(11, 0);
        let o = outs(4);
        let keep_prob = 0.8;
        let mut kept = 0usize;
        let mut total = 0usize;
        for _ in 0..2500 {
            let mut tape = Tape::<f64>::new();
            let r = drop_path(&mut tape, &o, keep_prob, true, &mut rng).unwrap();
            for t in &r {
                total += 1;
                if t.data()[0] != 0.0 {
                    kept += 1;
                }
            }
        }
        // the all-dropped rescue nudges the rate up by ~(1-p)^n / n, which is
        // well inside the +-2% band here
        let rate = kept as f64 / total as f64;
        assert!((rate - keep_prob).abs() < 0.02, "keep rate {rate}");
    }

    #[test]
    fn at_least_one_path_survives() {
        let mut rng = DetRng::new(3, 0);
        let o = outs(3);
        for _ in 0..500 {
            let mut tape = Tape::<f64>::new();
            let r = drop_path(&mut tape, &o, 0.05, true, &mut rng).unwrap();
            assert!(r.iter().any(|t| t.data()[0] != 0.0));
        }
    }

    #[test]
    fn kept_paths_are_rescaled() {
        let mut rng = DetRng::new(7, 0);
        let o = outs(1);
        let mut tape = Tape::<f64>::new();
        let r = drop_path(&mut tape, &o, 0.5, true, &mut rng).unwrap();
        // single output: always kept (either by coin flip or by rescue)
        assert_eq!(r[0].data()[0], 2.0);
    }
}
