//! Scalar abstraction so the numerical core runs in either f32 or f64.
//!
//! Training uses f32; the finite-difference verification suite runs the same
//! code in f64. Anything that needs a literal goes through [`Scalar::c`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar used throughout the library.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into file headers ("f32" / "f64").
    const DTYPE: &'static str;
    /// Size of one scalar in bytes when serialized.
    const BYTES: usize;

    /// Convert a literal. Panics only if the value is not representable,
    /// which cannot happen for the finite constants used in this crate.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Little-endian byte serialization (bit-exact round trip).
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        let v: f32 = 0.1;
        let mut buf = Vec::new();
        v.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf).to_bits(), v.to_bits());

        let v: f64 = -1.0 / 3.0;
        let mut buf = Vec::new();
        v.write_le(&mut buf);
        assert_eq!(f64::read_le(&buf).to_bits(), v.to_bits());
    }
}
