//! Forward-mode automatic differentiation on scalar taping types.
//!
//! Every cost, dynamics and constraint function in this crate is written
//! generically over [`Scalar`], so the same code path produces values
//! (`f64`), first derivatives ([`Dual`]) and second derivatives ([`HDual`]).
//! Derivatives are exact to roundoff; there is no step-size parameter.
//!
//! Branch conditions inside generic code must compare `.value()`s, which
//! makes piecewise-defined functions (range hinges, asymmetric losses)
//! differentiate as the active branch.

use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::SolverError;

/// Coefficients of the Abramowitz–Stegun 7.1.26 rational erf approximation.
/// Max absolute error 1.5e-7 over the real line.
const ERF_P: f64 = 0.327_591_1;
const ERF_A: [f64; 5] = [
    0.254_829_592,
    -0.284_496_736,
    1.421_413_741,
    -1.453_152_027,
    1.061_405_429,
];

/// Fast, differentiable error function (A&S 7.1.26 class).
///
/// The derivative used under AD is the exact `2/sqrt(pi) * exp(-x^2)`,
/// which keeps gradients smooth even though the value is approximate.
pub fn erf_fast(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + ERF_P * x);
    let poly = t * (ERF_A[0] + t * (ERF_A[1] + t * (ERF_A[2] + t * (ERF_A[3] + t * ERF_A[4]))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// d/dx erf(x) = 2/sqrt(pi) * exp(-x^2), exact.
pub fn erf_derivative(x: f64) -> f64 {
    2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp()
}

/// The scalar abstraction all planner math is written against.
///
/// Only smooth primitives are exposed; anything else (abs, floor, ...) is
/// deliberately absent so non-differentiable expressions cannot creep into
/// solver-facing code.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn constant(v: f64) -> Self;
    /// The underlying value (primal part).
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn atan(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// Fast erf with exact-derivative propagation; see [`erf_fast`].
    fn erf(self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn one() -> Self {
        Self::constant(1.0)
    }
    /// x^2 without a pow primitive.
    fn squared(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn erf(self) -> Self {
        erf_fast(self)
    }
}

/// First-order dual number: value plus one directional derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }
    /// Independent variable seeded with derivative 1.
    pub fn seed(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
    fn chain(self, v: f64, dv: f64) -> Self {
        Dual {
            v,
            d: dv * self.d,
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, r: Dual) -> Dual {
        Dual::new(self.v + r.v, self.d + r.d)
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, r: Dual) -> Dual {
        Dual::new(self.v - r.v, self.d - r.d)
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, r: Dual) -> Dual {
        Dual::new(self.v * r.v, self.d * r.v + self.v * r.d)
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, r: Dual) -> Dual {
        let v = self.v / r.v;
        Dual::new(v, (self.d - v * r.d) / r.v)
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}
impl AddAssign for Dual {
    fn add_assign(&mut self, r: Dual) {
        *self = *self + r;
    }
}
impl SubAssign for Dual {
    fn sub_assign(&mut self, r: Dual) {
        *self = *self - r;
    }
}
impl MulAssign for Dual {
    fn mul_assign(&mut self, r: Dual) {
        *self = *self * r;
    }
}
impl DivAssign for Dual {
    fn div_assign(&mut self, r: Dual) {
        *self = *self / r;
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn tan(self) -> Self {
        let c = self.v.cos();
        self.chain(self.v.tan(), 1.0 / (c * c))
    }
    fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn erf(self) -> Self {
        self.chain(erf_fast(self.v), erf_derivative(self.v))
    }
}

/// Second-order dual over two directions `a`, `b`: carries value, the two
/// directional derivatives, and the mixed second derivative `d2f/(da db)`.
/// Seeding `a = b = e_i` yields a diagonal Hessian entry; `e_i`, `e_j`
/// an off-diagonal one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HDual {
    pub v: f64,
    pub da: f64,
    pub db: f64,
    pub dab: f64,
}

impl HDual {
    pub fn new(v: f64, da: f64, db: f64, dab: f64) -> Self {
        HDual { v, da, db, dab }
    }
    /// Independent variable with unit derivative in the selected directions.
    pub fn seed(v: f64, in_a: bool, in_b: bool) -> Self {
        HDual {
            v,
            da: if in_a { 1.0 } else { 0.0 },
            db: if in_b { 1.0 } else { 0.0 },
            dab: 0.0,
        }
    }
    /// Unary chain rule with first and second derivative of the primitive.
    fn chain(self, v: f64, d1: f64, d2: f64) -> Self {
        HDual {
            v,
            da: d1 * self.da,
            db: d1 * self.db,
            dab: d1 * self.dab + d2 * self.da * self.db,
        }
    }
}

impl Add for HDual {
    type Output = HDual;
    fn add(self, r: HDual) -> HDual {
        HDual::new(self.v + r.v, self.da + r.da, self.db + r.db, self.dab + r.dab)
    }
}
impl Sub for HDual {
    type Output = HDual;
    fn sub(self, r: HDual) -> HDual {
        HDual::new(self.v - r.v, self.da - r.da, self.db - r.db, self.dab - r.dab)
    }
}
impl Mul for HDual {
    type Output = HDual;
    fn mul(self, r: HDual) -> HDual {
        HDual::new(
            self.v * r.v,
            self.da * r.v + self.v * r.da,
            self.db * r.v + self.v * r.db,
            self.dab * r.v + self.da * r.db + self.db * r.da + self.v * r.dab,
        )
    }
}
impl Div for HDual {
    type Output = HDual;
    fn div(self, r: HDual) -> HDual {
        // w = u/v  =>  u = w*v, solve the product rule for w's parts.
        let v = self.v / r.v;
        let da = (self.da - v * r.da) / r.v;
        let db = (self.db - v * r.db) / r.v;
        let dab = (self.dab - da * r.db - db * r.da - v * r.dab) / r.v;
        HDual::new(v, da, db, dab)
    }
}
impl Neg for HDual {
    type Output = HDual;
    fn neg(self) -> HDual {
        HDual::new(-self.v, -self.da, -self.db, -self.dab)
    }
}
impl AddAssign for HDual {
    fn add_assign(&mut self, r: HDual) {
        *self = *self + r;
    }
}
impl SubAssign for HDual {
    fn sub_assign(&mut self, r: HDual) {
        *self = *self - r;
    }
}
impl MulAssign for HDual {
    fn mul_assign(&mut self, r: HDual) {
        *self = *self * r;
    }
}
impl DivAssign for HDual {
    fn div_assign(&mut self, r: HDual) {
        *self = *self / r;
    }
}

impl Scalar for HDual {
    fn constant(v: f64) -> Self {
        HDual::new(v, 0.0, 0.0, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        let sec2 = 1.0 + t * t;
        self.chain(t, sec2, 2.0 * t * sec2)
    }
    fn atan(self) -> Self {
        let den = 1.0 + self.v * self.v;
        self.chain(self.v.atan(), 1.0 / den, -2.0 * self.v / (den * den))
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v, -1.0 / (self.v * self.v))
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }
    fn erf(self) -> Self {
        let d1 = erf_derivative(self.v);
        self.chain(erf_fast(self.v), d1, -2.0 * self.v * d1)
    }
}

fn check_finite(tag: &str, v: f64) -> Result<(), SolverError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SolverError::NonFiniteEvaluation {
            context: tag.to_string(),
        })
    }
}

/// Dense gradient of a scalar function via one forward sweep per variable.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<Vec<f64>, SolverError>
where
    F: Fn(&[Dual]) -> Dual,
{
    let mut locals: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        locals[i].d = 1.0;
        let out = f(&locals);
        check_finite("gradient", out.v)?;
        check_finite("gradient", out.d)?;
        g[i] = out.d;
        locals[i].d = 0.0;
    }
    Ok(g)
}

/// Dense Jacobian of a vector function, one forward sweep per variable
/// (each sweep fills a column for every output).
pub fn jacobian<F>(f: F, x: &[f64], m: usize) -> Result<Vec<Vec<f64>>, SolverError>
where
    F: Fn(&[Dual], &mut [Dual]),
{
    let mut locals: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut out = vec![Dual::constant(0.0); m];
    let mut jac = vec![vec![0.0; x.len()]; m];
    for j in 0..x.len() {
        locals[j].d = 1.0;
        f(&locals, &mut out);
        for (r, o) in out.iter().enumerate() {
            check_finite("jacobian", o.v)?;
            check_finite("jacobian", o.d)?;
            jac[r][j] = o.d;
        }
        locals[j].d = 0.0;
    }
    Ok(jac)
}

/// Dense symmetric Hessian via forward-over-forward sweeps on index pairs.
pub fn hessian<F>(f: F, x: &[f64]) -> Result<Vec<Vec<f64>>, SolverError>
where
    F: Fn(&[HDual]) -> HDual,
{
    let n = x.len();
    let mut locals: Vec<HDual> = x.iter().map(|&v| HDual::constant(v)).collect();
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            locals[i].da = 1.0;
            locals[j].db = 1.0;
            let out = f(&locals);
            check_finite("hessian", out.v)?;
            check_finite("hessian", out.dab)?;
            h[i][j] = out.dab;
            h[j][i] = out.dab;
            locals[i].da = 0.0;
            locals[j].db = 0.0;
        }
    }
    Ok(h)
}
