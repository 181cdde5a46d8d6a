//! Arc-length-parameterized centerlines and Cartesian <-> Frenet transforms.
//!
//! A [`Centerline`] is built from waypoints by fitting a chord-length
//! Catmull-Rom spline, measuring its arc length with Gauss-Legendre
//! quadrature, and resampling to a uniform arc-length table. Lookups
//! interpolate that table with cubic Hermite segments whose end slopes are
//! the unit tangents, so position and heading stay C1 in `s` — which the
//! contouring terms differentiate through.

use crate::error::GeometryError;
use crate::solver::ad::Scalar;

/// Signed curvilinear coordinates along a centerline. `d` is positive to
/// the left of the tangent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetPose {
    pub s: f64,
    pub d: f64,
}

/// Reference pose at a given arc length.
#[derive(Clone, Copy, Debug)]
pub struct ReferencePose {
    pub x: f64,
    pub y: f64,
    /// Unwrapped heading, continuous along the whole curve.
    pub heading: f64,
}

/// Default lateral corridor half-width for projections, in meters.
pub const DEFAULT_CORRIDOR_HALF_WIDTH: f64 = 20.0;

/// Spacing of the resampled arc-length table, in meters.
const RESAMPLE_SPACING: f64 = 0.25;

/// Two projection minima within this distance of each other (but on
/// non-adjacent segments) make the transform ambiguous.
const PROJECTION_TIE: f64 = 1e-6;

/// Arc-length-parameterized reference curve.
///
/// Immutable after construction; all lookups take `&self`.
#[derive(Clone, Debug)]
pub struct Centerline {
    /// Cumulative arc length per sample; strictly increasing, starts at 0.
    s: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    /// Unit tangents per sample.
    tx: Vec<f64>,
    ty: Vec<f64>,
    /// Unwrapped heading per sample.
    heading: Vec<f64>,
    length: f64,
}

/// 16-point Gauss-Legendre nodes/weights on [-1, 1].
const GL_NODES: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003_0,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL_WEIGHTS: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_78,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_1,
];

/// Cubic Hermite segment between two fitted waypoints, parameterized on
/// [0, 1] with chord-length-scaled tangents.
#[derive(Clone, Copy)]
struct HermiteSeg {
    p0: (f64, f64),
    p1: (f64, f64),
    m0: (f64, f64),
    m1: (f64, f64),
}

impl HermiteSeg {
    fn eval(&self, u: f64) -> (f64, f64) {
        let h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        let h10 = u * (1.0 - u) * (1.0 - u);
        let h01 = u * u * (3.0 - 2.0 * u);
        let h11 = u * u * (u - 1.0);
        (
            h00 * self.p0.0 + h10 * self.m0.0 + h01 * self.p1.0 + h11 * self.m1.0,
            h00 * self.p0.1 + h10 * self.m0.1 + h01 * self.p1.1 + h11 * self.m1.1,
        )
    }

    fn deriv(&self, u: f64) -> (f64, f64) {
        let d00 = 6.0 * u * u - 6.0 * u;
        let d10 = 3.0 * u * u - 4.0 * u + 1.0;
        let d01 = -6.0 * u * u + 6.0 * u;
        let d11 = 3.0 * u * u - 2.0 * u;
        (
            d00 * self.p0.0 + d10 * self.m0.0 + d01 * self.p1.0 + d11 * self.m1.0,
            d00 * self.p0.1 + d10 * self.m0.1 + d01 * self.p1.1 + d11 * self.m1.1,
        )
    }

    fn speed(&self, u: f64) -> f64 {
        let (dx, dy) = self.deriv(u);
        (dx * dx + dy * dy).sqrt()
    }

    /// Arc length of [0, u] by composite Gauss-Legendre.
    fn arc_len(&self, u: f64) -> f64 {
        // Two panels are enough at waypoint scale; quadrature error is far
        // below the resampling tolerance.
        let mut total = 0.0;
        for panel in 0..2 {
            let a = u * panel as f64 / 2.0;
            let b = u * (panel + 1) as f64 / 2.0;
            let c = 0.5 * (a + b);
            let h = 0.5 * (b - a);
            for k in 0..8 {
                total += h * GL_WEIGHTS[k] * (self.speed(c + h * GL_NODES[k]) + self.speed(c - h * GL_NODES[k]));
            }
        }
        total
    }
}

impl Centerline {
    /// Build from ordered waypoints.
    pub fn from_waypoints(points: &[(f64, f64)]) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let mut chord = Vec::with_capacity(points.len());
        chord.push(0.0);
        for i in 1..points.len() {
            let dx = points[i].0 - points[i - 1].0;
            let dy = points[i].1 - points[i - 1].1;
            let c = (dx * dx + dy * dy).sqrt();
            if c < 1e-12 {
                return Err(GeometryError::CoincidentPoints(i - 1, i));
            }
            chord.push(chord[i - 1] + c);
        }

        // Catmull-Rom tangents w.r.t. chord parameter; second-order
        // one-sided (quadratic-fit) tangents at the ends, since a plain
        // chord direction biases the end heading by half the turn angle.
        let n = points.len();
        let mut tan = vec![(0.0, 0.0); n];
        for i in 1..n.saturating_sub(1) {
            let dt = chord[i + 1] - chord[i - 1];
            tan[i] = (
                (points[i + 1].0 - points[i - 1].0) / dt,
                (points[i + 1].1 - points[i - 1].1) / dt,
            );
        }
        if n == 2 {
            let dt = chord[1] - chord[0];
            let t = ((points[1].0 - points[0].0) / dt, (points[1].1 - points[0].1) / dt);
            tan[0] = t;
            tan[1] = t;
        } else {
            tan[0] = quadratic_end_tangent(
                (chord[0], points[0]),
                (chord[1], points[1]),
                (chord[2], points[2]),
            );
            tan[n - 1] = quadratic_end_tangent(
                (chord[n - 1], points[n - 1]),
                (chord[n - 2], points[n - 2]),
                (chord[n - 3], points[n - 3]),
            );
        }

        let segs: Vec<HermiteSeg> = (0..n - 1)
            .map(|i| {
                let dt = chord[i + 1] - chord[i];
                HermiteSeg {
                    p0: points[i],
                    p1: points[i + 1],
                    m0: (tan[i].0 * dt, tan[i].1 * dt),
                    m1: (tan[i + 1].0 * dt, tan[i + 1].1 * dt),
                }
            })
            .collect();

        // Cumulative arc length at segment boundaries.
        let mut seg_s = Vec::with_capacity(segs.len() + 1);
        seg_s.push(0.0);
        for seg in &segs {
            let l = seg.arc_len(1.0);
            seg_s.push(seg_s.last().unwrap() + l);
        }
        let total = *seg_s.last().unwrap();

        // Resample to uniform arc length.
        let count = ((total / RESAMPLE_SPACING).ceil() as usize).max(8);
        let step = total / count as f64;
        let mut s = Vec::with_capacity(count + 1);
        let mut xs = Vec::with_capacity(count + 1);
        let mut ys = Vec::with_capacity(count + 1);
        let mut txs = Vec::with_capacity(count + 1);
        let mut tys = Vec::with_capacity(count + 1);
        let mut headings = Vec::with_capacity(count + 1);
        let mut prev_heading_raw = 0.0;
        let mut heading_acc = 0.0;
        for m in 0..=count {
            let target = (m as f64 * step).min(total);
            // Locate the segment containing `target`.
            let mut k = match seg_s.binary_search_by(|v| v.partial_cmp(&target).unwrap()) {
                Ok(i) => i.min(segs.len() - 1),
                Err(i) => i - 1,
            };
            if k >= segs.len() {
                k = segs.len() - 1;
            }
            // Invert arc length within the segment by Newton with bisection
            // fallback; the integrand is strictly positive so this converges.
            let want = target - seg_s[k];
            let seg = &segs[k];
            let seg_len = seg_s[k + 1] - seg_s[k];
            let mut u = (want / seg_len).clamp(0.0, 1.0);
            for _ in 0..30 {
                let err = seg.arc_len(u) - want;
                if err.abs() < 1e-12 * total.max(1.0) {
                    break;
                }
                u = (u - err / seg.speed(u)).clamp(0.0, 1.0);
            }
            let (px, py) = seg.eval(u);
            let (dx, dy) = seg.deriv(u);
            let norm = (dx * dx + dy * dy).sqrt();
            let (tx, ty) = (dx / norm, dy / norm);
            let raw = ty.atan2(tx);
            if m == 0 {
                heading_acc = raw;
            } else {
                let mut delta = raw - prev_heading_raw;
                while delta > std::f64::consts::PI {
                    delta -= 2.0 * std::f64::consts::PI;
                }
                while delta < -std::f64::consts::PI {
                    delta += 2.0 * std::f64::consts::PI;
                }
                heading_acc += delta;
            }
            prev_heading_raw = raw;
            s.push(target);
            xs.push(px);
            ys.push(py);
            txs.push(tx);
            tys.push(ty);
            headings.push(heading_acc);
        }

        Ok(Centerline {
            s,
            x: xs,
            y: ys,
            tx: txs,
            ty: tys,
            heading: headings,
            length: total,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Sampled arc lengths (used by tests for invariants).
    pub fn sample_count(&self) -> usize {
        self.s.len()
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let sc = s.clamp(0.0, self.length);
        let last = self.s.len() - 2;
        let idx = match self
            .s
            .binary_search_by(|v| v.partial_cmp(&sc).unwrap())
        {
            Ok(i) => i.min(last),
            Err(i) => (i - 1).min(last),
        };
        let ds = self.s[idx + 1] - self.s[idx];
        ((idx), (sc - self.s[idx]) / ds)
    }

    /// Interpolated reference pose; `s` is clamped to `[0, length]` and the
    /// heading is unwrapped.
    pub fn reference_at(&self, s: f64) -> ReferencePose {
        let (i, _) = self.locate(s);
        let sc = s.clamp(0.0, self.length);
        let (x, y, dx, dy) = self.hermite_in_s(i, Scalar::constant(sc));
        let heading_raw = f64::atan2(dy, dx);
        // Re-anchor to the stored unwrapped value at the left sample.
        let base = self.heading[i];
        let mut delta = heading_raw - wrap_to_pi(base);
        delta = wrap_to_pi(delta);
        ReferencePose {
            x,
            y,
            heading: base + delta,
        }
    }

    /// Generic-scalar reference lookup: position and (unnormalized) tangent
    /// at arc length `s`. Segment choice branches on the primal value, the
    /// polynomial evaluates in `T`, so derivatives w.r.t. `s` are exact.
    pub fn reference_generic<T: Scalar>(&self, s: T) -> (T, T, T, T) {
        let (i, _) = self.locate(s.value());
        self.hermite_in_s(i, s)
    }

    /// Hermite interpolation in arc length on table interval `i`, with end
    /// slopes equal to the stored unit tangents. Returns (x, y, dx/ds, dy/ds).
    fn hermite_in_s<T: Scalar>(&self, i: usize, s: T) -> (T, T, T, T) {
        let s0 = self.s[i];
        let ds = self.s[i + 1] - s0;
        let u = (s - T::constant(s0)) * T::constant(1.0 / ds);
        let one = T::one();
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = T::constant(2.0) * u3 - T::constant(3.0) * u2 + one;
        let h10 = u3 - T::constant(2.0) * u2 + u;
        let h01 = T::constant(-2.0) * u3 + T::constant(3.0) * u2;
        let h11 = u3 - u2;
        let d00 = T::constant(6.0) * u2 - T::constant(6.0) * u;
        let d10 = T::constant(3.0) * u2 - T::constant(4.0) * u + one;
        let d01 = T::constant(-6.0) * u2 + T::constant(6.0) * u;
        let d11 = T::constant(3.0) * u2 - T::constant(2.0) * u;
        let (x0, y0) = (T::constant(self.x[i]), T::constant(self.y[i]));
        let (x1, y1) = (T::constant(self.x[i + 1]), T::constant(self.y[i + 1]));
        // Tangents scaled by the interval so slopes are d/ds.
        let (mx0, my0) = (T::constant(self.tx[i] * ds), T::constant(self.ty[i] * ds));
        let (mx1, my1) = (T::constant(self.tx[i + 1] * ds), T::constant(self.ty[i + 1] * ds));
        let x = h00 * x0 + h10 * mx0 + h01 * x1 + h11 * mx1;
        let y = h00 * y0 + h10 * my0 + h01 * y1 + h11 * my1;
        let inv = T::constant(1.0 / ds);
        let dx = (d00 * x0 + d10 * mx0 + d01 * x1 + d11 * mx1) * inv;
        let dy = (d00 * y0 + d10 * my0 + d01 * y1 + d11 * my1) * inv;
        (x, y, dx, dy)
    }

    /// Map a Frenet pose back to Cartesian: reference(s) + d * left-normal(s).
    pub fn frenet_to_cartesian(&self, p: FrenetPose) -> Result<(f64, f64), GeometryError> {
        if p.s < -1e-12 || p.s > self.length + 1e-12 {
            return Err(GeometryError::OutOfRange {
                s: p.s,
                length: self.length,
            });
        }
        let (i, _) = self.locate(p.s);
        let (x, y, dx, dy) = self.hermite_in_s(i, p.s.clamp(0.0, self.length));
        let norm = (dx * dx + dy * dy).sqrt();
        let (tx, ty) = (dx / norm, dy / norm);
        // Left normal is the tangent rotated +90 degrees.
        Ok((x - p.d * ty, y + p.d * tx))
    }

    /// Project a Cartesian point onto the curve with the default corridor.
    pub fn cartesian_to_frenet(&self, x: f64, y: f64) -> Result<FrenetPose, GeometryError> {
        self.cartesian_to_frenet_within(x, y, DEFAULT_CORRIDOR_HALF_WIDTH)
    }

    /// Project with an explicit corridor half-width.
    ///
    /// Coarse pass over the sample table finds candidate local minima of the
    /// distance; each candidate is refined by Newton on the stationarity
    /// condition `(C(s) - q) . C'(s) = 0`. Two non-adjacent minima tying
    /// within 1e-6 m raise `AmbiguousProjection`.
    pub fn cartesian_to_frenet_within(
        &self,
        x: f64,
        y: f64,
        half_width: f64,
    ) -> Result<FrenetPose, GeometryError> {
        let n = self.s.len();
        let dist2 = |i: usize| {
            let dx = self.x[i] - x;
            let dy = self.y[i] - y;
            dx * dx + dy * dy
        };
        // Candidate vertices: local minima of the sampled distance plus both
        // endpoints (projections may clamp there).
        let mut candidates: Vec<usize> = Vec::new();
        for i in 0..n {
            let here = dist2(i);
            let left_ok = i == 0 || dist2(i - 1) >= here;
            let right_ok = i == n - 1 || dist2(i + 1) >= here;
            if left_ok && right_ok {
                candidates.push(i);
            }
        }

        #[derive(Clone, Copy)]
        struct Refined {
            s: f64,
            dist: f64,
            d_signed: f64,
        }
        let mut refined: Vec<Refined> = Vec::new();
        for &c in &candidates {
            let mut s = self.s[c];
            for _ in 0..40 {
                let (px, py, dx, dy) = self.hermite_in_s(self.locate(s).0, s.clamp(0.0, self.length));
                let rx = px - x;
                let ry = py - y;
                let g = rx * dx + ry * dy;
                // Second derivative of half squared distance, approximated by
                // the dominant |C'|^2 term; exact enough for Newton here.
                let h = dx * dx + dy * dy;
                let step = g / h;
                let next = (s - step).clamp(0.0, self.length);
                if (next - s).abs() < 1e-12 {
                    s = next;
                    break;
                }
                s = next;
            }
            let (px, py, dx, dy) = self.hermite_in_s(self.locate(s).0, s);
            let rx = x - px;
            let ry = y - py;
            let dist = (rx * rx + ry * ry).sqrt();
            let norm = (dx * dx + dy * dy).sqrt();
            let cross = (dx / norm) * ry - (dy / norm) * rx;
            // Signed offset: positive left of tangent. At near-zero distance
            // the sign is irrelevant; use the cross product directly.
            let d_signed = if dist < 1e-12 { 0.0 } else { cross.signum() * dist };
            refined.push(Refined { s, dist, d_signed });
        }
        refined.sort_by(|a, b| a.dist.partial_cmp(&b.dist).unwrap());
        // Collapse duplicates that converged to the same point.
        let best = refined[0];
        for other in refined.iter().skip(1) {
            let separated = (other.s - best.s).abs() > 2.0 * RESAMPLE_SPACING;
            if separated && (other.dist - best.dist).abs() <= PROJECTION_TIE {
                return Err(GeometryError::AmbiguousProjection {
                    s_a: best.s,
                    s_b: other.s,
                    tie: PROJECTION_TIE,
                });
            }
        }
        if best.dist > half_width {
            return Err(GeometryError::OutOfCorridor {
                distance: best.dist,
                half_width,
            });
        }
        Ok(FrenetPose {
            s: best.s,
            d: best.d_signed,
        })
    }
}

/// Derivative at `a.0` of the quadratic through three (parameter, point)
/// pairs; used for end tangents.
fn quadratic_end_tangent(
    a: (f64, (f64, f64)),
    b: (f64, (f64, f64)),
    c: (f64, (f64, f64)),
) -> (f64, f64) {
    let (t0, p0) = a;
    let (t1, p1) = b;
    let (t2, p2) = c;
    let w0 = (2.0 * t0 - t1 - t2) / ((t0 - t1) * (t0 - t2));
    let w1 = (t0 - t2) / ((t1 - t0) * (t1 - t2));
    let w2 = (t0 - t1) / ((t2 - t0) * (t2 - t1));
    (
        w0 * p0.0 + w1 * p1.0 + w2 * p2.0,
        w0 * p0.1 + w1 * p1.1 + w2 * p2.1,
    )
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_to_pi(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if r == 0.0 {
        r = two_pi;
    }
    r - std::f64::consts::PI
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_x_axis(len: f64) -> Centerline {
        let pts: Vec<(f64, f64)> = (0..=10).map(|i| (len * i as f64 / 10.0, 0.0)).collect();
        Centerline::from_waypoints(&pts).unwrap()
    }

    /// Quarter circle of radius 10 centered at the origin from (10,0) going
    /// counter-clockwise, sampled densely.
    fn quarter_circle() -> Centerline {
        let r = 10.0;
        let n = 200;
        let pts: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let th = std::f64::consts::FRAC_PI_2 * i as f64 / n as f64;
                (r * th.cos(), r * th.sin())
            })
            .collect();
        Centerline::from_waypoints(&pts).unwrap()
    }

    /// Analytic projection oracle for the quarter circle above.
    fn circle_oracle(x: f64, y: f64) -> (f64, f64) {
        let r = 10.0;
        let th = y.atan2(x).clamp(0.0, std::f64::consts::FRAC_PI_2);
        let s = r * th;
        let radial = (x * x + y * y).sqrt();
        // Left of the CCW tangent points toward the circle center, so an
        // outward offset is negative.
        let d = r - radial;
        (s, d)
    }

    #[test]
    fn straight_line_on_curve() {
        let c = straight_x_axis(10.0);
        let p = c.cartesian_to_frenet(3.0, 0.0).unwrap();
        assert!((p.s - 3.0).abs() < 1e-9);
        assert!(p.d.abs() < 1e-9);
    }

    #[test]
    fn straight_line_left_offset_positive() {
        let c = straight_x_axis(10.0);
        let p = c.cartesian_to_frenet(3.0, 1.0).unwrap();
        assert!((p.s - 3.0).abs() < 1e-9);
        assert!((p.d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quarter_circle_projection_matches_analytic_oracle() {
        let c = quarter_circle();
        // Endpoint query from the spec family: radially outside the end of
        // the arc. The oracle fixes both the arc length and the sign.
        let (s_exp, d_exp) = circle_oracle(0.0, 10.5);
        assert!((s_exp - 5.0 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(d_exp, -0.5);
        let p = c.cartesian_to_frenet(0.0, 10.5).unwrap();
        assert!((p.s - s_exp).abs() < 1e-4, "s={} expected {}", p.s, s_exp);
        assert!((p.d - d_exp).abs() < 1e-4, "d={} expected {}", p.d, d_exp);

        // Interior queries across the arc.
        for i in 1..8 {
            let th = std::f64::consts::FRAC_PI_2 * i as f64 / 8.0;
            let radial = 10.0 + if i % 2 == 0 { 0.5 } else { -0.7 };
            let (qx, qy) = (radial * th.cos(), radial * th.sin());
            let (s_exp, d_exp) = circle_oracle(qx, qy);
            let p = c.cartesian_to_frenet(qx, qy).unwrap();
            assert!((p.s - s_exp).abs() < 1e-4);
            assert!((p.d - d_exp).abs() < 1e-4);
        }
    }

    #[test]
    fn frenet_to_cartesian_straight() {
        let c = straight_x_axis(10.0);
        let (x, y) = c.frenet_to_cartesian(FrenetPose { s: 3.0, d: 0.0 }).unwrap();
        assert!((x - 3.0).abs() < 1e-9 && y.abs() < 1e-9);
        let (x, y) = c.frenet_to_cartesian(FrenetPose { s: 3.0, d: 1.0 }).unwrap();
        assert!((x - 3.0).abs() < 1e-9 && (y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_s_rejected() {
        let c = straight_x_axis(10.0);
        assert!(matches!(
            c.frenet_to_cartesian(FrenetPose { s: 11.0, d: 0.0 }),
            Err(GeometryError::OutOfRange { .. })
        ));
    }

    #[test]
    fn reference_at_straight_and_clamped() {
        let c = straight_x_axis(10.0);
        let r = c.reference_at(4.2);
        assert!((r.x - 4.2).abs() < 1e-9 && r.y.abs() < 1e-9 && r.heading.abs() < 1e-9);
        let r_end = c.reference_at(50.0);
        assert!((r_end.x - 10.0).abs() < 1e-9);
    }

    #[test]
    fn reference_at_quarter_circle_end() {
        let c = quarter_circle();
        let r = c.reference_at(5.0 * std::f64::consts::PI);
        assert!((r.x - 0.0).abs() < 1e-6, "x={}", r.x);
        assert!((r.y - 10.0).abs() < 1e-6, "y={}", r.y);
        assert!((r.heading - std::f64::consts::PI).abs() < 1e-5, "h={}", r.heading);
    }

    #[test]
    fn round_trip_identity() {
        let c = quarter_circle();
        for i in 0..30 {
            let s = c.length() * (i as f64 + 0.5) / 30.0;
            let d = -1.5 + 3.0 * ((i * 7919) % 97) as f64 / 97.0;
            let (x, y) = c.frenet_to_cartesian(FrenetPose { s, d }).unwrap();
            let p = c.cartesian_to_frenet(x, y).unwrap();
            let (x2, y2) = c.frenet_to_cartesian(p).unwrap();
            let err = ((x - x2).powi(2) + (y - y2).powi(2)).sqrt();
            assert!(err < 1e-9, "round trip err {err} at s={s} d={d}");
        }
    }

    #[test]
    fn projection_monotone_along_curve() {
        let c = quarter_circle();
        let mut last = -1.0;
        for i in 0..=40 {
            let s = c.length() * i as f64 / 40.0;
            let r = c.reference_at(s);
            let p = c.cartesian_to_frenet(r.x, r.y).unwrap();
            assert!(p.s >= last - 1e-9);
            last = p.s;
        }
    }

    #[test]
    fn tangent_consistent_with_position_derivative() {
        let c = quarter_circle();
        let h = 1e-5;
        for i in 1..20 {
            let s = c.length() * i as f64 / 20.0 - 0.3;
            let r = c.reference_at(s);
            let a = c.frenet_to_cartesian(FrenetPose { s: s - h, d: 0.0 }).unwrap();
            let b = c.frenet_to_cartesian(FrenetPose { s: s + h, d: 0.0 }).unwrap();
            let fd_heading = (b.1 - a.1).atan2(b.0 - a.0);
            let diff = wrap_to_pi(r.heading - fd_heading).abs();
            assert!(diff < 1e-6, "heading mismatch {diff} at s={s}");
        }
    }

    #[test]
    fn out_of_corridor_rejected() {
        let c = straight_x_axis(10.0);
        assert!(matches!(
            c.cartesian_to_frenet(5.0, 25.0),
            Err(GeometryError::OutOfCorridor { .. })
        ));
    }

    #[test]
    fn ambiguous_projection_detected() {
        // A U-shaped curve: points equidistant from both legs are ambiguous.
        let mut pts = Vec::new();
        for i in 0..=20 {
            pts.push((i as f64, 0.0));
        }
        for i in 1..=20 {
            let th = std::f64::consts::PI * i as f64 / 20.0;
            pts.push((20.0 + 4.0 * th.sin(), 4.0 - 4.0 * th.cos()));
        }
        for i in 1..=20 {
            pts.push((20.0 - i as f64, 8.0));
        }
        let c = Centerline::from_waypoints(&pts).unwrap();
        let r = c.cartesian_to_frenet(10.0, 4.0);
        assert!(matches!(r, Err(GeometryError::AmbiguousProjection { .. })), "{r:?}");
    }

    #[test]
    fn too_few_and_coincident_points_rejected() {
        assert!(matches!(
            Centerline::from_waypoints(&[(0.0, 0.0)]),
            Err(GeometryError::TooFewPoints(1))
        ));
        assert!(matches!(
            Centerline::from_waypoints(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)]),
            Err(GeometryError::CoincidentPoints(0, 1))
        ));
    }
}
