//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the pipeline is generic over (`f32` or `f64`).
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// PLY property type name used when persisting values of this type.
    const PLY_TYPE: &'static str;

    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must be representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::lit(v as f64)
    }

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()>;
    fn read_le<R: Read>(r: &mut R) -> io::Result<Self>;
}

impl Scalar for f32 {
    const PLY_TYPE: &'static str = "float";

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()> {
        w.write_f32::<LittleEndian>(self)
    }

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self> {
        r.read_f32::<LittleEndian>()
    }
}

impl Scalar for f64 {
    const PLY_TYPE: &'static str = "double";

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()> {
        w.write_f64::<LittleEndian>(self)
    }

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self> {
        r.read_f64::<LittleEndian>()
    }
}

/// Total order on scalars where NaN sorts last. Used for deterministic sorting.
#[inline]
pub(crate) fn total_cmp<T: Scalar>(a: &T, b: &T) -> std::cmp::Ordering {
    a.as_f64().total_cmp(&b.as_f64())
}
