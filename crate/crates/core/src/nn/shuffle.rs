//! Channel split, concat and shuffle: the macro-level plumbing that gives
//! each cell half of the channels and interleaves the halves afterwards,
//! creating implicit skip connections across layers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Split along the channel axis into two equal halves.
pub fn channel_split<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = x.dims4()?;
    if c % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel_split needs an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    let a = tape.narrow(x, 1, 0, half)?;
    let b = tape.narrow(x, 1, half, half)?;
    Ok((a, b))
}

/// Concatenate along the channel axis.
pub fn channel_concat<T: Scalar>(
    tape: &mut Tape<T>,
    parts: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    tape.concat(1, parts)
}

/// The fixed shuffle permutation: view channels as a `groups x (c/groups)`
/// grid, transpose, flatten. Output position `j` reads input channel
/// `(j % groups) * (c / groups) + j / groups`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{channels} channels not divisible into {groups} groups"
        )));
    }
    let per = channels / groups;
    Ok((0..channels).map(|j| (j % groups) * per + j / groups).collect())
}

pub fn channel_shuffle<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let perm = shuffle_permutation(c, groups)?;
    tape.permute_channels(x, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_tensor(values: &[f64]) -> Tensor<f64> {
        // one pixel per channel keeps the permutations easy to read
        Tensor::from_f64_slice(vec![1, values.len(), 1, 1], values).unwrap()
    }

    #[test]
    fn shuffle_fixture_c6() {
        assert_eq!(shuffle_permutation(6, 2).unwrap(), vec![0, 3, 1, 4, 2, 5]);
        let mut tape = Tape::<f64>::inference();
        let x = channel_tensor(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = channel_shuffle(&mut tape, &x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn shuffle_fixture_c4_is_involution() {
        let mut tape = Tape::<f64>::inference();
        let x = channel_tensor(&[0.0, 1.0, 2.0, 3.0]);
        let y = channel_shuffle(&mut tape, &x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 1.0, 3.0]);
        let z = channel_shuffle(&mut tape, &y, 2).unwrap();
        assert!(z.bit_eq(&x));
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut tape = Tape::<f32>::inference();
        let x = Tensor::new(vec![2, 4, 3, 3], (0..72).map(|v| v as f32).collect()).unwrap();
        let (a, b) = channel_split(&mut tape, &x).unwrap();
        assert_eq!(a.shape(), &[2, 2, 3, 3]);
        let back = channel_concat(&mut tape, &[&a, &b]).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn split_halves_in_order() {
        let mut tape = Tape::<f64>::inference();
        let x = channel_tensor(&[10.0, 11.0, 12.0, 13.0]);
        let (a, b) = channel_split(&mut tape, &x).unwrap();
        assert_eq!(a.data(), &[10.0, 11.0]);
        assert_eq!(b.data(), &[12.0, 13.0]);
    }

    #[test]
    fn odd_channels_rejected() {
        let mut tape = Tape::<f64>::inference();
        let x = channel_tensor(&[1.0, 2.0, 3.0]);
        assert!(channel_split(&mut tape, &x).is_err());
        assert!(shuffle_permutation(3, 2).is_err());
    }
}
