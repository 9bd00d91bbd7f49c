//! 256-bit fixed-point reference arithmetic for checking double-precision
//! formulas.

#![allow(dead_code)]

use num::bigint::BigInt;
use num::{Signed, ToPrimitive, Zero};

const P: u32 = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Fx(BigInt);

impl Fx {
    pub fn from_f64(x: f64) -> Fx {
        if x == 0.0 {
            return Fx(BigInt::zero());
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let shift = e + P as i64;
        assert!(shift >= 0, "value too small for the fixed-point scale");
        Fx(BigInt::from(sign) * (BigInt::from(mant) << shift as usize))
    }

    pub fn one() -> Fx {
        Fx(BigInt::from(1) << P as usize)
    }

    pub fn to_f64(&self) -> f64 {
        // keep 80 significant bits before the lossy conversion
        let bits = self.0.bits() as i64;
        let drop = (bits - 80).max(0);
        let top = (&self.0 >> drop as usize).to_f64().expect("finite");
        top * 2f64.powi((drop - P as i64) as i32)
    }

    pub fn add(&self, o: &Fx) -> Fx {
        Fx(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fx) -> Fx {
        Fx(&self.0 - &o.0)
    }

    pub fn neg(&self) -> Fx {
        Fx(-&self.0)
    }

    pub fn mul(&self, o: &Fx) -> Fx {
        Fx((&self.0 * &o.0) >> P as usize)
    }

    pub fn div(&self, o: &Fx) -> Fx {
        Fx((&self.0 << P as usize) / &o.0)
    }

    pub fn half_pow(&self, k: u32) -> Fx {
        Fx(&self.0 >> k as usize)
    }

    pub fn abs_lt_one(&self) -> bool {
        self.0.abs() < Fx::one().0
    }

    /// `e^x − 1` by Taylor series after halving, then `e^{2y} − 1 = (e^y − 1)(e^y + 1)`.
    pub fn expm1(&self) -> Fx {
        let k = 24;
        let y = self.half_pow(k);
        let mut term = y.clone();
        let mut sum = y.clone();
        for n in 2..60 {
            term = term.mul(&y);
            term = Fx(&term.0 / BigInt::from(n));
            sum = sum.add(&term);
        }
        let two = Fx::one().add(&Fx::one());
        for _ in 0..k {
            sum = sum.mul(&sum.add(&two));
        }
        sum
    }

    pub fn exp(&self) -> Fx {
        self.expm1().add(&Fx::one())
    }

    /// `1/(1 + e^{−x})`.
    pub fn sigmoid(&self) -> Fx {
        Fx::one().div(&Fx::one().add(&self.neg().exp()))
    }
}

pub fn rel_err(approx: f64, exact: f64) -> f64 {
    ((approx - exact) / exact).abs()
}
