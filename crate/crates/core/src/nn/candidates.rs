//! The six candidate cell operations and the factorized reduction.
//!
//! Every candidate keeps its output channel count equal to its input channel
//! count. Separable convolutions are applied twice (relu, depthwise,
//! pointwise, batch norm per repetition, the stride in the first repetition
//! only); the 1x1 convolution is relu, conv, batch norm; pooling has no
//! parameters; identity is a pass-through at stride 1 and a factorized
//! reduction at stride 2.

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d, depthwise_conv2d, shift_one_pixel};
use crate::nn::norm::{alloc_conv_weight, batch_norm, BnParams};
use crate::nn::pool::{pool2d, PoolMode};
use crate::params::{ParamId, ParamRegistry};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// The candidate operations, in their stable serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationId {
    Sep3,
    Sep5,
    MaxPool3,
    MinPool3,
    Identity,
    Conv1,
}

pub const ALL_OPERATIONS: [OperationId; 6] = [
    OperationId::Sep3,
    OperationId::Sep5,
    OperationId::MaxPool3,
    OperationId::MinPool3,
    OperationId::Identity,
    OperationId::Conv1,
];

impl OperationId {
    pub fn code(self) -> u8 {
        match self {
            OperationId::Sep3 => 0,
            OperationId::Sep5 => 1,
            OperationId::MaxPool3 => 2,
            OperationId::MinPool3 => 3,
            OperationId::Identity => 4,
            OperationId::Conv1 => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        ALL_OPERATIONS
            .into_iter()
            .find(|op| op.code() == code)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operation code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationId::Sep3 => "SEP3",
            OperationId::Sep5 => "SEP5",
            OperationId::MaxPool3 => "MAXPOOL3",
            OperationId::MinPool3 => "MINPOOL3",
            OperationId::Identity => "IDENTITY",
            OperationId::Conv1 => "CONV1",
        }
    }

    /// Lower-case name used in registry keys.
    pub fn key(self) -> &'static str {
        match self {
            OperationId::Sep3 => "sep3",
            OperationId::Sep5 => "sep5",
            OperationId::MaxPool3 => "maxpool3",
            OperationId::MinPool3 => "minpool3",
            OperationId::Identity => "identity",
            OperationId::Conv1 => "conv1",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        ALL_OPERATIONS
            .into_iter()
            .find(|op| op.name() == text)
            .ok_or_else(|| Error::Genotype(format!("unknown operation {text:?}")))
    }

    /// Does this op allocate weights at the given stride?
    pub fn has_params(self, stride: usize) -> bool {
        match self {
            OperationId::Sep3 | OperationId::Sep5 | OperationId::Conv1 => true,
            OperationId::Identity => stride == 2,
            OperationId::MaxPool3 | OperationId::MinPool3 => false,
        }
    }
}

impl std::fmt::Display for OperationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One repetition of a separable convolution.
#[derive(Debug, Clone, Copy)]
pub struct SepRep {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn: BnParams,
}

#[derive(Debug, Clone, Copy)]
pub struct SepParams {
    pub reps: [SepRep; 2],
    pub kernel: usize,
}

impl SepParams {
    pub fn alloc<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        channels: usize,
        kernel: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let mut reps = Vec::with_capacity(2);
        for rep in 0..2 {
            let p = format!("{prefix}/rep{rep}");
            let depthwise = alloc_conv_weight(reg, &format!("{p}/dw"), channels, 1, kernel, rng)?;
            let pointwise = alloc_conv_weight(reg, &format!("{p}/pw"), channels, channels, 1, rng)?;
            let bn = BnParams::alloc(reg, &p, channels)?;
            reps.push(SepRep {
                depthwise,
                pointwise,
                bn,
            });
        }
        Ok(SepParams {
            reps: [reps[0], reps[1]],
            kernel,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBnParams {
    pub weight: ParamId,
    pub bn: BnParams,
}

impl ConvBnParams {
    pub fn alloc<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        Ok(ConvBnParams {
            weight: alloc_conv_weight(reg, &format!("{prefix}/w"), cout, cin, kernel, rng)?,
            bn: BnParams::alloc(reg, prefix, cout)?,
        })
    }
}

/// Factorized reduction: two spatially offset stride-2 1x1 convolutions,
/// each producing half the output channels, concatenated and normalized.
#[derive(Debug, Clone, Copy)]
pub struct FrParams {
    pub even_path: ParamId,
    pub odd_path: ParamId,
    pub bn: BnParams,
}

impl FrParams {
    pub fn alloc<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if cout % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "factorized reduction needs even output channels, got {cout}"
            )));
        }
        Ok(FrParams {
            even_path: alloc_conv_weight(reg, &format!("{prefix}/even"), cout / 2, cin, 1, rng)?,
            odd_path: alloc_conv_weight(reg, &format!("{prefix}/odd"), cout / 2, cin, 1, rng)?,
            bn: BnParams::alloc(reg, prefix, cout)?,
        })
    }
}

pub fn factorized_reduction<T: Scalar>(
    tape: &mut Tape<T>,
    reg: &mut ParamRegistry<T>,
    fr: &FrParams,
    x: &Tensor<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let w1 = tape.lease(reg, fr.even_path);
    let p1 = conv2d(tape, x, &w1, 2)?;
    let shifted = shift_one_pixel(tape, x)?;
    let w2 = tape.lease(reg, fr.odd_path);
    let p2 = conv2d(tape, &shifted, &w2, 2)?;
    let cat = tape.concat(1, &[&p1, &p2])?;
    batch_norm(tape, reg, &fr.bn, &cat, training)
}

/// Parameter sets a block position may draw on. Supernets fill every
/// field the layer kind allows; stand-alone models fill only the selected
/// operation.
#[derive(Debug, Clone, Default)]
pub struct BlockCandidates {
    pub sep3: Option<SepParams>,
    pub sep5: Option<SepParams>,
    pub conv1: Option<ConvBnParams>,
    /// Weights for identity at a stride-2 position (reduction layers only).
    pub identity_fr: Option<FrParams>,
}

fn missing(op: OperationId) -> Error {
    Error::InvalidArgument(format!("no parameters allocated for {op}"))
}

fn apply_sep<T: Scalar>(
    tape: &mut Tape<T>,
    reg: &mut ParamRegistry<T>,
    sep: &SepParams,
    x: &Tensor<T>,
    stride: usize,
    training: bool,
) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for (rep, ids) in sep.reps.iter().enumerate() {
        let s = if rep == 0 { stride } else { 1 };
        let r = tape.relu(&cur);
        let dw = tape.lease(reg, ids.depthwise);
        let d = depthwise_conv2d(tape, &r, &dw, s)?;
        let pw = tape.lease(reg, ids.pointwise);
        let p = conv2d(tape, &d, &pw, 1)?;
        cur = batch_norm(tape, reg, &ids.bn, &p, training)?;
    }
    Ok(cur)
}

/// Run one candidate operation. `stride` is 2 only for blocks of a
/// reduction cell that consume the cell input.
pub fn apply_candidate<T: Scalar>(
    tape: &mut Tape<T>,
    reg: &mut ParamRegistry<T>,
    op: OperationId,
    params: &BlockCandidates,
    x: &Tensor<T>,
    stride: usize,
    training: bool,
    minpool_as_avg: bool,
) -> Result<Tensor<T>> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("candidate stride {stride}")));
    }
    match op {
        OperationId::Sep3 => {
            let sep = params.sep3.as_ref().ok_or_else(|| missing(op))?;
            apply_sep(tape, reg, sep, x, stride, training)
        }
        OperationId::Sep5 => {
            let sep = params.sep5.as_ref().ok_or_else(|| missing(op))?;
            apply_sep(tape, reg, sep, x, stride, training)
        }
        OperationId::MaxPool3 => pool2d(tape, x, 3, stride, PoolMode::Max),
        OperationId::MinPool3 => {
            let mode = if minpool_as_avg { PoolMode::Avg } else { PoolMode::Min };
            pool2d(tape, x, 3, stride, mode)
        }
        OperationId::Identity => {
            if stride == 1 {
                Ok(x.clone())
            } else {
                let fr = params.identity_fr.as_ref().ok_or_else(|| missing(op))?;
                factorized_reduction(tape, reg, fr, x, training)
            }
        }
        OperationId::Conv1 => {
            let cb = params.conv1.as_ref().ok_or_else(|| missing(op))?;
            let r = tape.relu(x);
            let w = tape.lease(reg, cb.weight);
            let c = conv2d(tape, &r, &w, stride)?;
            batch_norm(tape, reg, &cb.bn, &c, training)
        }
    }
}

// Closed-form trainable-parameter counts (batch norm counts gain + bias).

pub fn sep_param_count(channels: u64, kernel: u64) -> u64 {
    2 * (kernel * kernel * channels + channels * channels + 2 * channels)
}

pub fn conv1_param_count(channels: u64) -> u64 {
    channels * channels + 2 * channels
}

pub fn fr_param_count(cin: u64, cout: u64) -> u64 {
    cin * cout + 2 * cout
}

/// Trainable parameters one candidate op allocates at a channel count.
pub fn op_param_count(op: OperationId, channels: u64, stride: usize) -> u64 {
    match op {
        OperationId::Sep3 => sep_param_count(channels, 3),
        OperationId::Sep5 => sep_param_count(channels, 5),
        OperationId::Conv1 => conv1_param_count(channels),
        OperationId::Identity => {
            if stride == 2 {
                fr_param_count(channels, channels)
            } else {
                0
            }
        }
        OperationId::MaxPool3 | OperationId::MinPool3 => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg_and_rng() -> (ParamRegistry<f64>, DetRng) {
        (ParamRegistry::new(), DetRng::new(9, 0))
    }

    #[test]
    fn codes_are_stable() {
        for (i, op) in ALL_OPERATIONS.iter().enumerate() {
            assert_eq!(op.code() as usize, i);
            assert_eq!(OperationId::from_code(op.code()).unwrap(), *op);
            assert_eq!(OperationId::parse(op.name()).unwrap(), *op);
        }
        assert!(OperationId::from_code(6).is_err());
        assert!(OperationId::parse("SEP7").is_err());
    }

    #[test]
    fn identity_stride1_is_bit_exact_passthrough() {
        let (mut reg, _) = reg_and_rng();
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::from_f64_slice(vec![1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = apply_candidate(
            &mut tape,
            &mut reg,
            OperationId::Identity,
            &BlockCandidates::default(),
            &x,
            1,
            false,
            false,
        )
        .unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn sep3_allocates_closed_form_count() {
        let (mut reg, mut rng) = reg_and_rng();
        let c = 4;
        SepParams::alloc(&mut reg, "t/sep3", c, 3, &mut rng).unwrap();
        assert_eq!(reg.trainable_elements(), sep_param_count(c as u64, 3));
        assert_eq!(sep_param_count(4, 3), 120);
    }

    #[test]
    fn fr_allocates_closed_form_count() {
        let (mut reg, mut rng) = reg_and_rng();
        FrParams::alloc(&mut reg, "t/fr", 8, 8, &mut rng).unwrap();
        assert_eq!(reg.trainable_elements(), 80);
        assert_eq!(fr_param_count(8, 8), 80);
        let (mut reg2, mut rng2) = reg_and_rng();
        assert!(FrParams::alloc(&mut reg2, "t", 8, 7, &mut rng2).is_err());
    }

    #[test]
    fn candidates_preserve_channels_and_spatial_contract() {
        let (mut reg, mut rng) = reg_and_rng();
        let c = 6;
        let params = BlockCandidates {
            sep3: Some(SepParams::alloc(&mut reg, "b/sep3", c, 3, &mut rng).unwrap()),
            sep5: Some(SepParams::alloc(&mut reg, "b/sep5", c, 5, &mut rng).unwrap()),
            conv1: Some(ConvBnParams::alloc(&mut reg, "b/conv1", c, c, 1, &mut rng).unwrap()),
            identity_fr: Some(FrParams::alloc(&mut reg, "b/identity", c, c, &mut rng).unwrap()),
        };
        let x = Tensor::<f64>::filled(vec![2, c, 8, 8], 0.5);
        for op in ALL_OPERATIONS {
            for stride in [1usize, 2] {
                let mut tape = Tape::<f64>::inference();
                let y = apply_candidate(
                    &mut tape, &mut reg, op, &params, &x, stride, false, false,
                )
                .unwrap();
                let (n, cc, h, w) = y.dims4().unwrap();
                assert_eq!((n, cc), (2, c), "{op} stride {stride}");
                let expect = if stride == 1 { 8 } else { 4 };
                assert_eq!((h, w), (expect, expect), "{op} stride {stride}");
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn fr_with_identity_kernels_samples_offset_grids() {
        // cin = 2, cout = 4; each path's 1x1 conv is the 2x2 identity, so
        // output channels 0,1 are the even grid and 2,3 the odd grid.
        let (mut reg, mut rng) = reg_and_rng();
        let fr = FrParams::alloc(&mut reg, "fr", 2, 4, &mut rng).unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        reg.slot_mut(fr.even_path).value = eye.clone();
        reg.slot_mut(fr.odd_path).value = eye;

        let mut data = vec![0.0; 2 * 16];
        for ch in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    data[ch * 16 + i * 4 + j] = (100 * ch + 10 * i + j) as f64;
                }
            }
        }
        let x = Tensor::new(vec![1, 2, 4, 4], data).unwrap();
        let mut tape = Tape::<f64>::inference();
        let y = factorized_reduction(&mut tape, &mut reg, &fr, &x, false).unwrap();
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        // undo the eval-mode batch norm (fresh buffers: mean 0, var 1)
        let undo = (1.0f64 + 1e-5).sqrt();
        let v = |ch: usize, i: usize, j: usize| y.data()[ch * 4 + i * 2 + j] * undo;
        // even grid of channel 0: x[0, {0,2}, {0,2}]
        assert!((v(0, 0, 0) - 0.0).abs() < 1e-9);
        assert!((v(0, 0, 1) - 2.0).abs() < 1e-9);
        assert!((v(0, 1, 0) - 20.0).abs() < 1e-9);
        // odd grid of channel 0 lands in output channel 2: x[0, {1,3}, {1,3}]
        assert!((v(2, 0, 0) - 11.0).abs() < 1e-9);
        assert!((v(2, 1, 1) - 33.0).abs() < 1e-9);
    }

    #[test]
    fn op_param_count_covers_identity_cases() {
        assert_eq!(op_param_count(OperationId::Identity, 16, 1), 0);
        assert_eq!(op_param_count(OperationId::Identity, 16, 2), 16 * 16 + 32);
        assert_eq!(op_param_count(OperationId::MaxPool3, 64, 2), 0);
        assert_eq!(op_param_count(OperationId::Conv1, 8, 1), 80);
    }
}
