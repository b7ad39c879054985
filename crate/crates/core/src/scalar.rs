//! Scalar abstraction so the numeric core works over f32 or f64.
//!
//! Weights on disk are stored at a fixed width (4- or 2-byte, see
//! [`crate::store`]); in memory everything is generic over [`Scalar`] and
//! widened on load. f32 is the primary path.

use half::f16;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable throughout the crate: f32 or f64.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from the stored f32 wire value.
    fn from_f32_stored(v: f32) -> Self {
        Self::from_f32(v).expect("f32 converts to any Scalar")
    }

    /// Narrow to the f32 wire value (identity for f32).
    fn to_f32_stored(self) -> f32 {
        self.to_f32().expect("Scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Bytes-per-scalar widths the store accepts.
pub const SUPPORTED_SCALAR_WIDTHS: [u32; 2] = [2, 4];

/// Decode one stored scalar from little-endian bytes at the given width.
///
/// Width 4 is IEEE-754 binary32; width 2 is binary16, widened exactly.
pub fn decode_scalar<T: Scalar>(bytes: &[u8], width: u32) -> T {
    match width {
        4 => T::from_f32_stored(f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])),
        2 => T::from_f32_stored(f16::from_le_bytes([bytes[0], bytes[1]]).to_f32()),
        w => unreachable!("unsupported scalar width {w}"),
    }
}

/// Encode one scalar into little-endian bytes at the given width.
pub fn encode_scalar<T: Scalar>(value: T, width: u32, out: &mut Vec<u8>) {
    match width {
        4 => out.extend_from_slice(&value.to_f32_stored().to_le_bytes()),
        2 => out.extend_from_slice(&f16::from_f32(value.to_f32_stored()).to_le_bytes()),
        w => unreachable!("unsupported scalar width {w}"),
    }
}
