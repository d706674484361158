//! Scalar abstraction so the numeric core runs in either float width.
//!
//! Everything downstream of the tensor layer is generic over [`Scalar`];
//! the default run width is 64-bit, with 32-bit selectable per run.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Numeric width of a run, recorded in checkpoints and run records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumericWidth {
    Bits32,
    Bits64,
}

impl NumericWidth {
    pub fn bits(self) -> u32 {
        match self {
            NumericWidth::Bits32 => 32,
            NumericWidth::Bits64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(NumericWidth::Bits32),
            64 => Some(NumericWidth::Bits64),
            _ => None,
        }
    }
}

/// Floating-point element type of tensors and planes.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const WIDTH: NumericWidth;

    /// Lossy conversion from f64; every parameter and constant enters
    /// the scalar domain through this single point.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn append_le_bytes(self, out: &mut Vec<u8>);

    /// Reads one value from a little-endian slice of exactly `WIDTH` bytes.
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: NumericWidth = NumericWidth::Bits32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const WIDTH: NumericWidth = NumericWidth::Bits64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
