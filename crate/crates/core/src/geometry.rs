//! Planar primitives: two-way-ranging distance, basis-pair trilateration,
//! mirror disambiguation, closed-form rigid registration and squared-error
//! scoring.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Propagation speed used for all time-of-flight conversions, in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Baselines shorter than this (meters) cannot define a trilateration basis.
pub const EPSILON_BASIS: f64 = 1e-6;

/// Two points closer than this are treated as the same point when checking
/// registration input for degeneracy.
const DISTINCT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (*self - *other).norm()
    }

    pub fn distance_squared(&self, other: &Point2) -> f64 {
        (*self - *other).norm_squared()
    }

    pub fn scale(&self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    /// Reflection across the x axis.
    pub fn mirrored(&self) -> Point2 {
        Point2::new(self.x, -self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Normalizes an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// A proper rigid motion of the plane: rotate by `theta`, then translate by
/// `(tx, ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2 {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
}

impl Default for RigidTransform2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform2 {
    pub const IDENTITY: RigidTransform2 = RigidTransform2 {
        tx: 0.0,
        ty: 0.0,
        theta: 0.0,
    };

    pub fn new(tx: f64, ty: f64, theta: f64) -> Self {
        RigidTransform2 {
            tx,
            ty,
            theta: normalize_angle(theta),
        }
    }

    pub fn rotation(theta: f64) -> Self {
        Self::new(0.0, 0.0, theta)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(tx, ty, 0.0)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(c * p.x - s * p.y + self.tx, s * p.x + c * p.y + self.ty)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform2) -> RigidTransform2 {
        let t = self.apply(Point2::new(other.tx, other.ty));
        RigidTransform2::new(t.x, t.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> RigidTransform2 {
        let back = RigidTransform2::rotation(-self.theta);
        let t = back.apply(Point2::new(-self.tx, -self.ty));
        RigidTransform2::new(t.x, t.y, -self.theta)
    }
}

/// Round-trip timestamps of a two-way ranging exchange.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingPair {
    /// Request-to-reply interval measured at the initiator (s).
    pub t_init: f64,
    /// Processing delay at the responder (s).
    pub t_res: f64,
}

impl TimingPair {
    pub fn new(t_init: f64, t_res: f64) -> Result<Self> {
        let t = TimingPair { t_init, t_res };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.t_init.is_finite()
            && self.t_res.is_finite()
            && self.t_res >= 0.0
            && self.t_init >= self.t_res;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTiming {
                t_init: self.t_init,
                t_res: self.t_res,
            })
        }
    }

    /// One-way flight time, half the net round trip.
    pub fn time_of_flight(&self) -> f64 {
        (self.t_init - self.t_res) / 2.0
    }
}

/// Converts a two-way ranging exchange into a distance in meters.
pub fn tof_distance(t: TimingPair, c: f64) -> Result<f64> {
    t.validate()?;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidSpeed(c));
    }
    Ok(c * t.time_of_flight())
}

/// Result of placing a node relative to a basis pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trilateration {
    pub x: f64,
    /// Nonnegative branch of the y solution.
    pub y_abs: f64,
    /// Set when the ranges cannot close a triangle and `y_abs` was clamped.
    pub inconsistent: bool,
}

/// Places node `i` in the frame where basis node `n` sits at the origin and
/// basis node `m` at `(d_nm, 0)`.
pub fn trilaterate(d_nm: f64, d_ni: f64, d_im: f64) -> Result<Trilateration> {
    if !(d_nm.is_finite() && d_nm > EPSILON_BASIS) {
        return Err(Error::DegenerateBasis(d_nm));
    }
    let x = (d_nm * d_nm + d_ni * d_ni - d_im * d_im) / (2.0 * d_nm);
    let radicand = d_ni * d_ni - x * x;
    if radicand < 0.0 {
        Ok(Trilateration {
            x,
            y_abs: 0.0,
            inconsistent: true,
        })
    } else {
        Ok(Trilateration {
            x,
            y_abs: radicand.sqrt(),
            inconsistent: false,
        })
    }
}

/// Picks the sign of the y coordinate that best agrees with the measured
/// ranges to points placed so far. Ties and an empty prior choose `+y`.
pub fn resolve_mirror(candidate: (f64, f64), placed: &[(Point2, f64)]) -> Point2 {
    let up = Point2::new(candidate.0, candidate.1);
    let down = up.mirrored();
    let cost = |p: Point2| -> f64 {
        placed
            .iter()
            .map(|(q, r)| {
                let e = p.distance(q) - r;
                e * e
            })
            .sum()
    };
    if cost(down) < cost(up) {
        down
    } else {
        up
    }
}

/// Closed-form least-squares proper rigid registration (no scale, no
/// reflection) mapping `source[i]` onto `target[i]`.
pub fn best_rigid_align(source: &[Point2], target: &[Point2]) -> Result<RigidTransform2> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    if source.len() < 2 {
        return Err(Error::DegenerateInput("registration needs at least 2 points"));
    }
    let cs = centroid(source);
    let ct = centroid(target);

    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut spread = 0.0f64;
    for (s, t) in source.iter().zip(target) {
        let a = *s - cs;
        let b = *t - ct;
        dot += a.x * b.x + a.y * b.y;
        cross += a.x * b.y - a.y * b.x;
        spread = spread.max(a.norm());
    }
    if spread < DISTINCT_EPS || !(dot.is_finite() && cross.is_finite()) {
        return Err(Error::DegenerateInput("fewer than 2 distinct source points"));
    }
    let rot = RigidTransform2::rotation(cross.atan2(dot));
    let moved = rot.apply(cs);
    Ok(RigidTransform2::new(ct.x - moved.x, ct.y - moved.y, rot.theta))
}

pub(crate) fn centroid(points: &[Point2]) -> Point2 {
    let n = points.len() as f64;
    let sum = points.iter().fold(Point2::ORIGIN, |acc, p| acc + *p);
    sum.scale(1.0 / n)
}

/// Sum of squared point-wise distances.
pub fn lse(a: &[Point2], b: &[Point2]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(p, q)| p.distance_squared(q)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, SQRT_2};

    const C: f64 = SPEED_OF_LIGHT;

    #[test]
    fn tof_examples() {
        let d = tof_distance(TimingPair::new(20e-9, 10e-9).unwrap(), C).unwrap();
        assert_abs_diff_eq!(d, 1.49896229, epsilon = 1e-8);
        let d = tof_distance(TimingPair::new(10e-9, 10e-9).unwrap(), C).unwrap();
        assert_eq!(d, 0.0);
        // 10 m ground truth inverts to a 66.71 ns net round trip; 76.7 ns
        // total with 10 ns turnaround gives 33.35 ns one way.
        let d = tof_distance(TimingPair::new(76.7e-9, 10e-9).unwrap(), C).unwrap();
        assert!((d - 9.998).abs() < 1e-3, "{d}");
    }

    #[test]
    fn tof_rejects_negative_flight() {
        assert!(matches!(
            TimingPair::new(5e-9, 10e-9),
            Err(Error::InvalidTiming { .. })
        ));
        let raw = TimingPair {
            t_init: 5e-9,
            t_res: 10e-9,
        };
        assert!(tof_distance(raw, C).is_err());
        let ok = TimingPair::new(20e-9, 10e-9).unwrap();
        assert!(matches!(tof_distance(ok, 0.0), Err(Error::InvalidSpeed(_))));
    }

    #[test]
    fn tof_is_linear_in_net_flight() {
        let one = tof_distance(TimingPair::new(30e-9, 10e-9).unwrap(), C).unwrap();
        let two = tof_distance(TimingPair::new(50e-9, 10e-9).unwrap(), C).unwrap();
        assert_abs_diff_eq!(two, 2.0 * one, epsilon = 1e-12);
    }

    #[test]
    fn trilaterate_examples() {
        let t = trilaterate(2.0, SQRT_2, SQRT_2).unwrap();
        assert_abs_diff_eq!(t.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.y_abs, 1.0, epsilon = 1e-12);
        assert!(!t.inconsistent);

        let t = trilaterate(5.0, 3.0, 4.0).unwrap();
        assert_abs_diff_eq!(t.x, 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(t.y_abs, 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!((3.2f64 * 3.2 + 2.4 * 2.4).sqrt(), 4.0, epsilon = 1e-12);

        let t = trilaterate(2.0, 1.0, 1.0).unwrap();
        assert_eq!((t.x, t.y_abs), (1.0, 0.0));
    }

    #[test]
    fn trilaterate_degenerate_and_inconsistent() {
        assert!(matches!(
            trilaterate(1e-7, 1.0, 1.0),
            Err(Error::DegenerateBasis(_))
        ));
        assert!(trilaterate(0.0, 1.0, 1.0).is_err());
        // Circles of radius 1 centred 5 m apart never meet.
        let t = trilaterate(5.0, 1.0, 1.0).unwrap();
        assert!(t.inconsistent);
        assert_eq!(t.y_abs, 0.0);
        assert_abs_diff_eq!(t.x, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn resolve_mirror_examples() {
        let p = resolve_mirror((1.0, 1.0), &[(Point2::new(1.0, 1.5), 0.5)]);
        assert_eq!(p, Point2::new(1.0, 1.0));
        let p = resolve_mirror((1.0, 1.0), &[(Point2::new(1.0, -1.5), 0.5)]);
        assert_eq!(p, Point2::new(1.0, -1.0));
        let p = resolve_mirror((1.8, 2.4), &[]);
        assert_eq!(p, Point2::new(1.8, 2.4));
        // Equidistant prior on the axis is a tie.
        let p = resolve_mirror((1.0, 1.0), &[(Point2::new(3.0, 0.0), 1.0)]);
        assert_eq!(p, Point2::new(1.0, 1.0));
    }

    #[test]
    fn align_identity_and_quarter_turn() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.5),
            Point2::new(-1.0, 3.0),
        ];
        let t = best_rigid_align(&pts, &pts).unwrap();
        assert_abs_diff_eq!(t.tx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.ty, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.theta, 0.0, epsilon = 1e-12);

        let quarter = RigidTransform2::rotation(FRAC_PI_2);
        let src: Vec<_> = pts.iter().map(|p| quarter.apply(*p)).collect();
        let t = best_rigid_align(&src, &pts).unwrap();
        assert_abs_diff_eq!(t.theta, -FRAC_PI_2, epsilon = 1e-9);
        assert_abs_diff_eq!(t.tx, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.ty, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn align_recovers_known_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let src: Vec<Point2> = (0..8)
            .map(|_| Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let truth = RigidTransform2::new(1.0, -2.0, 0.7);
        let dst: Vec<_> = src.iter().map(|p| truth.apply(*p)).collect();
        let t = best_rigid_align(&src, &dst).unwrap();
        assert_abs_diff_eq!(t.tx, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(t.ty, -2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(t.theta, 0.7, epsilon = 1e-6);
    }

    #[test]
    fn align_degenerate_inputs() {
        let p = Point2::new(1.0, 1.0);
        assert!(matches!(
            best_rigid_align(&[p], &[p]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            best_rigid_align(&[p, p, p], &[p, Point2::ORIGIN, p]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            best_rigid_align(&[p, p], &[p]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn lse_examples() {
        let a = vec![Point2::new(0.0, 0.0)];
        let b = vec![Point2::new(3.0, 4.0)];
        assert_eq!(lse(&a, &a).unwrap(), 0.0);
        assert_eq!(lse(&a, &b).unwrap(), 25.0);
        assert!(matches!(
            lse(&a, &[]),
            Err(Error::LengthMismatch { left: 1, right: 0 })
        ));
    }

    #[test]
    fn lse_matches_coordinate_resummation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut pts = || -> Vec<Point2> {
            (0..16)
                .map(|_| Point2::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)))
                .collect()
        };
        let a = pts();
        let b = pts();
        let xs: f64 = a.iter().zip(&b).map(|(p, q)| (p.x - q.x).powi(2)).sum();
        let ys: f64 = a.iter().zip(&b).map(|(p, q)| (p.y - q.y).powi(2)).sum();
        assert_abs_diff_eq!(lse(&a, &b).unwrap(), xs + ys, epsilon = 1e-9);
        assert_abs_diff_eq!(lse(&a, &b).unwrap(), lse(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(0.5 + 4.0 * PI), 0.5, epsilon = 1e-12);
    }

    fn point() -> impl Strategy<Value = Point2> {
        (-20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y)| Point2::new(x, y))
    }

    fn transform() -> impl Strategy<Value = RigidTransform2> {
        (-10.0..10.0f64, -10.0..10.0f64, -4.0..4.0f64)
            .prop_map(|(x, y, t)| RigidTransform2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn transforms_preserve_distances(t in transform(), a in point(), b in point()) {
            let d0 = a.distance(&b);
            let d1 = t.apply(a).distance(&t.apply(b));
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
            prop_assert!(t.theta > -PI && t.theta <= PI);
        }

        #[test]
        fn composition_matches_sequential_application(s in transform(), t in transform(), p in point()) {
            let direct = s.apply(t.apply(p));
            let composed = s.compose(&t).apply(p);
            prop_assert!(direct.distance(&composed) < 1e-9);
            let back = t.inverse().apply(t.apply(p));
            prop_assert!(back.distance(&p) < 1e-9);
        }

        #[test]
        fn alignment_beats_identity(
            src in prop::collection::vec(point(), 3..10),
            t in transform(),
            jitter in prop::collection::vec(point(), 10),
        ) {
            let dst: Vec<_> = src
                .iter()
                .zip(&jitter)
                .map(|(p, j)| t.apply(*p) + j.scale(0.01))
                .collect();
            if let Ok(fit) = best_rigid_align(&src, &dst) {
                let moved: Vec<_> = src.iter().map(|p| fit.apply(*p)).collect();
                let fitted = lse(&moved, &dst).unwrap();
                let identity = lse(&src, &dst).unwrap();
                prop_assert!(fitted <= identity + 1e-9);
                // Residual is unchanged when the source is pre-moved rigidly.
                let pre: Vec<_> = src.iter().map(|p| t.inverse().apply(*p)).collect();
                let refit = best_rigid_align(&pre, &dst).unwrap();
                let moved: Vec<_> = pre.iter().map(|p| refit.apply(*p)).collect();
                prop_assert!((lse(&moved, &dst).unwrap() - fitted).abs() < 1e-7);
            }
        }

        #[test]
        fn trilateration_round_trip(a in point(), b in point(), c in point()) {
            let base = a.distance(&b);
            let area = ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs();
            prop_assume!(base > 0.5 && area > 0.5);
            // Express c in the frame with a at the origin and b on +x.
            let ang = (b.y - a.y).atan2(b.x - a.x);
            let to_frame = RigidTransform2::rotation(-ang).compose(&RigidTransform2::translation(-a.x, -a.y));
            let truth = to_frame.apply(c);
            let t = trilaterate(base, a.distance(&c), c.distance(&b)).unwrap();
            let prior = [(Point2::new(truth.x, truth.y + 3.0), 3.0)];
            let p = resolve_mirror((t.x, t.y_abs), &prior);
            prop_assert!(p.distance(&truth) < 1e-9, "{:?} vs {:?}", p, truth);
        }
    }
}
