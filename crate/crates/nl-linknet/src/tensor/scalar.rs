//! Scalar element trait: the engine runs in `f32` for training and `f64`
//! for oracle and finite-difference verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Send + Sync + Debug + Display + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from(v).expect("f64 -> scalar conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
