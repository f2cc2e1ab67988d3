//! Shared test oracles: central finite differences and gradient-check
//! harnesses. These recompute forward passes numerically and never touch the
//! reverse-mode path they are checking.

use cellsearch::params::ParamRegistry;
use cellsearch::rng::DetRng;
use cellsearch::tensor::{Tape, Tensor};
use cellsearch::Result;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case relative disagreement between two gradients.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let denom = 1.0f64.max(inf(analytic)).max(inf(numeric));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / denom
}

/// Check d(loss)/d(input) for a tape-built scalar loss against central
/// finite differences, over `trials` random inputs.
pub fn assert_input_gradcheck(
    name: &str,
    rng: &mut DetRng,
    trials: usize,
    shape: &[usize],
    sample: impl Fn(&mut DetRng) -> f64,
    build: impl Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) {
    let numel: usize = shape.iter().product();
    assert_input_gradcheck_vec(
        name,
        trials,
        shape,
        |t| {
            let _ = t;
            (0..numel).map(|_| sample(rng)).collect()
        },
        build,
    );
}

/// Variant taking a whole-input generator, for operations (pooling) whose
/// finite differences need well-separated element values.
pub fn assert_input_gradcheck_vec(
    name: &str,
    trials: usize,
    shape: &[usize],
    mut gen: impl FnMut(usize) -> Vec<f64>,
    build: impl Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) {
    for trial in 0..trials {
        let numel: usize = shape.iter().product();
        let x0: Vec<f64> = gen(trial);
        assert_eq!(x0.len(), numel, "{name}: generator length");

        let mut tape = Tape::<f64>::new();
        let base = Tensor::new(shape.to_vec(), x0.clone()).unwrap();
        let x = tape.watch(&base);
        let loss = build(&mut tape, &x).unwrap();
        assert!(loss.is_scalar(), "{name}: loss must be scalar");
        assert!(loss.item().is_finite(), "{name}: non-finite loss");
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.of(&x).map(|g| g.to_vec()).unwrap_or(vec![0.0; numel]);
        assert!(
            analytic.iter().all(|v| v.is_finite()),
            "{name}: non-finite gradient"
        );

        let numeric = finite_diff(
            |probe| {
                let mut t = Tape::<f64>::inference();
                let xt = Tensor::new(shape.to_vec(), probe.to_vec()).unwrap();
                build(&mut t, &xt).unwrap().item()
            },
            &x0,
            FD_STEP,
        );
        let err = grad_rel_err(&analytic, &numeric);
        assert!(
            err < GRAD_TOL,
            "{name} trial {trial}: gradient rel err {err:.3e} >= {GRAD_TOL:.0e}"
        );
    }
}

/// Check d(loss)/d(parameter) for every trainable slot of a registry-backed
/// forward pass. The registry is rebuilt per probe so batch-norm buffer
/// updates cannot leak between evaluations.
pub fn assert_param_gradcheck(
    name: &str,
    trials: usize,
    mut setup: impl FnMut(usize) -> (ParamRegistry<f64>, Tensor<f64>),
    forward: impl Fn(&mut Tape<f64>, &mut ParamRegistry<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) {
    for trial in 0..trials {
        let (pristine, x) = setup(trial);

        let mut reg = pristine.clone();
        let mut tape = Tape::<f64>::new();
        let loss = forward(&mut tape, &mut reg, &x).unwrap();
        assert!(loss.is_scalar(), "{name}: loss must be scalar");
        let grads = tape.backward(&loss).unwrap();
        reg.zero_grads();
        tape.accumulate_leases(&grads, &mut reg);

        let ids: Vec<_> = pristine
            .iter()
            .filter(|(_, s)| s.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let slot_name = pristine.slot(id).name.clone();
            let base = pristine.value(id).to_vec();
            let numeric = finite_diff(
                |probe| {
                    let mut r = pristine.clone();
                    r.slot_mut(id).value = probe.to_vec();
                    let mut t = Tape::<f64>::inference();
                    forward(&mut t, &mut r, &x).unwrap().item()
                },
                &base,
                FD_STEP,
            );
            let analytic = reg.slot(id).grad.clone();
            let err = grad_rel_err(&analytic, &numeric);
            assert!(
                err < GRAD_TOL,
                "{name} trial {trial} param {slot_name}: rel err {err:.3e}"
            );
        }
    }
}
