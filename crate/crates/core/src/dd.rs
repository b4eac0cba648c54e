//! Double-double arithmetic, just enough to turn summed log-likelihoods into
//! perplexities without losing the last bits: `exp(ln V)` is not `V` in plain
//! `f64`, but it is after rounding a ~32-digit result.

use std::ops::{Add, Mul, Neg, Sub};

/// An unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

impl From<f64> for Dd {
    fn from(hi: f64) -> Self {
        Dd { hi, lo: 0.0 }
    }
}

impl Dd {
    /// Nearest `f64`.
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn mul_f64(self, b: f64) -> Dd {
        let p = self.hi * b;
        let e = self.hi.mul_add(b, -p) + self.lo * b;
        quick_two_sum(p, e)
    }

    pub fn div_f64(self, b: f64) -> Dd {
        let q1 = self.hi / b;
        let r = self - Dd::from(b).mul_f64(q1);
        let q2 = r.hi / b;
        let r = r - Dd::from(b).mul_f64(q2);
        let q3 = r.hi / b;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.8 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Dd::default();
        }
        // e^x = 2^k · (e^(r/1024))^1024 with |r| ≤ ln2/2
        let k = (self.hi / LN2.hi).round();
        let s = (self - LN2.mul_f64(k)).mul_f64(1.0 / 1024.0);
        let mut p = Dd::from(1.0);
        for n in (2..=11).rev() {
            p = Dd::from(1.0) + (p * s).div_f64(n as f64);
        }
        let mut em1 = s * p;
        for _ in 0..10 {
            em1 = em1.mul_f64(2.0) + em1 * em1;
        }
        let e = em1 + Dd::from(1.0);
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: e.hi * scale,
            lo: e.lo * scale,
        }
    }

    /// Natural log of a positive `f64`: one Newton step on the `f64` estimate.
    pub fn ln(x: f64) -> Dd {
        if x <= 0.0 || !x.is_finite() {
            return Dd::from(x.ln());
        }
        let y = Dd::from(x.ln());
        y + ((-y).exp().mul_f64(x) - Dd::from(1.0))
    }
}

impl Add for Dd {
    type Output = Dd;

    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let d = quick_two_sum(s, e + t);
        quick_two_sum(d.hi, d.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;

    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p) + (self.hi * b.lo + self.lo * b.hi);
        quick_two_sum(p, e)
    }
}
