use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("tensor shape has no dimensions")]
    EmptyShape,
    #[error("tensor dimension {index} has size zero")]
    ZeroDimension { index: usize },
    #[error("tensor data has {actual} values but shape implies {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label {value} is not a class index below {num_classes} and not 255")]
    InvalidClassIndex { value: u8, num_classes: usize },
    #[error("invalid {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("attention stack has {stack} heads but combiner has {combiner} weights")]
    HeadCountMismatch { stack: usize, combiner: usize },
    #[error("background thresholds must satisfy 0 < low < high < 1, got low={low} high={high}")]
    ThresholdOrder { low: f32, high: f32 },
    #[error("cannot resample {from_h}x{from_w} labels up to {to_h}x{to_w}")]
    Upsampling {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("confusion matrix holds no observed class")]
    EmptyConfusion,
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
