//! Polarization states on the Poincaré sphere.
//!
//! Conventions used throughout the crate:
//!
//! * The key basis Z is circular polarization and sits on the ŝ₃ poles; X and Y
//!   are the linear bases on ŝ₁ and ŝ₂.
//! * A physical axial rotation of the transmitter by θ is a rotation of the
//!   Poincaré sphere by 2θ about ŝ₃.
//! * The receiver's six detectors point along ±ŝ₁, ±ŝ₂, ±ŝ₃. The transmitter faces
//!   the receiver, so its diagonal axis is mirrored: it prepares Y± at ∓ŝ₂.
//!   Under this convention a rotated channel produces the correlator pattern
//!   `C_XX = cos φ, C_XY = C_YX = sin φ, C_YY = -cos φ`, for which all four
//!   axial-angle estimator branches coincide (see [`crate::estimators`]).

use std::ops::{Mul, Neg};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point (or, for mixed states, a vector inside) the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareVector {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl PoincareVector {
    pub const S1: Self = Self::new(1.0, 0.0, 0.0);
    pub const S2: Self = Self::new(0.0, 1.0, 0.0);
    pub const S3: Self = Self::new(0.0, 0.0, 1.0);

    pub const fn new(s1: f64, s2: f64, s3: f64) -> Self {
        Self { s1, s2, s3 }
    }

    /// Unit vector from azimuth and polar angle (radians), polar measured from +ŝ₃.
    pub fn from_angles(azimuth: f64, polar: f64) -> Self {
        let (sp, cp) = polar.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        Self::new(sp * ca, sp * sa, cp)
    }

    /// Inverse of [`from_angles`](Self::from_angles); returns `(azimuth, polar)`.
    pub fn to_angles(&self) -> (f64, f64) {
        let n = self.norm();
        let polar = (self.s3 / n).clamp(-1.0, 1.0).acos();
        (self.s2.atan2(self.s1), polar)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.s1 * other.s1 + self.s2 * other.s2 + self.s3 * other.s3
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.s1 / n, self.s2 / n, self.s3 / n)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.s1 * k, self.s2 * k, self.s3 * k)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }
}

impl Neg for PoincareVector {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.s1, -self.s2, -self.s3)
    }
}

/// One of the three protocol bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    X,
    Y,
    Z,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Basis::X => "X",
            Basis::Y => "Y",
            Basis::Z => "Z",
        }
    }
}

/// One of the six polarization states: a basis plus a sign.
///
/// States are indexed `X+, X-, Y+, Y-, Z+, Z-` (0..6) everywhere a 6-array
/// appears in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProtocolState {
    pub basis: Basis,
    pub positive: bool,
}

impl ProtocolState {
    pub const ALL: [ProtocolState; 6] = [
        Self::new(Basis::X, true),
        Self::new(Basis::X, false),
        Self::new(Basis::Y, true),
        Self::new(Basis::Y, false),
        Self::new(Basis::Z, true),
        Self::new(Basis::Z, false),
    ];

    pub const fn new(basis: Basis, positive: bool) -> Self {
        Self { basis, positive }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn index(self) -> usize {
        2 * self.basis.index() + usize::from(!self.positive)
    }

    pub fn sign(self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }

    pub fn label(self) -> &'static str {
        const LABELS: [&str; 6] = ["X+", "X-", "Y+", "Y-", "Z+", "Z-"];
        LABELS[self.index()]
    }

    pub fn parse(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.label() == label)
    }

    fn axis(self) -> PoincareVector {
        match self.basis {
            Basis::X => PoincareVector::S1,
            Basis::Y => PoincareVector::S2,
            Basis::Z => PoincareVector::S3,
        }
    }

    /// Direction measured by the receiver's detector for this state.
    pub fn detector_vector(self) -> PoincareVector {
        self.axis().scaled(self.sign())
    }

    /// Direction of the state emitted by the transmitter (Y mirrored).
    pub fn prepared_vector(self) -> PoincareVector {
        let v = self.detector_vector();
        PoincareVector::new(v.s1, -v.s2, v.s3)
    }
}

/// A proper rotation of the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    m: [[f64; 3]; 3],
}

impl Rotation3 {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    /// Right-handed rotation by `angle` radians about a unit `axis` (Rodrigues).
    pub fn about_axis(axis: PoincareVector, angle: f64) -> Self {
        let k = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let (x, y, z) = (k.s1, k.s2, k.s3);
        Self {
            m: [
                [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
                [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
                [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
            ],
        }
    }

    pub fn apply(&self, v: PoincareVector) -> PoincareVector {
        let a = v.as_array();
        let row = |r: &[f64; 3]| r[0] * a[0] + r[1] * a[1] + r[2] * a[2];
        PoincareVector::new(row(&self.m[0]), row(&self.m[1]), row(&self.m[2]))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn inverse(&self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.m[j][i];
            }
        }
        Self { m }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest deviation of `R·Rᵀ` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let p = self.compose(&self.inverse());
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.m[i][j] - target).abs());
            }
        }
        worst
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        self.compose(&rhs)
    }
}

/// Born-rule click probability for a state `prep` sent through `channel` and
/// projected onto `meas`: ½(1 + (R·prep)·meas).
pub fn detection_probability(
    prep: PoincareVector,
    meas: PoincareVector,
    channel: &Rotation3,
) -> f64 {
    (0.5 * (1.0 + channel.apply(prep).dot(&meas))).clamp(0.0, 1.0)
}

/// Shannon binary entropy in bits, with h(0) = h(1) = 0.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::InvalidProbability(p));
    }
    Ok(binary_entropy_unchecked(p))
}

pub(crate) fn binary_entropy_unchecked(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Poincaré rotation produced by rotating the transmitter by `theta_physical`
/// degrees about the line of sight.
pub fn axial_rotation(theta_physical_deg: f64) -> Rotation3 {
    Rotation3::about_axis(PoincareVector::S3, 2.0 * theta_physical_deg.to_radians())
}

/// Linear retarder: rotation by `retardance_deg` about an equatorial `axis`.
pub fn birefringence_rotation(retardance_deg: f64, axis: PoincareVector) -> Result<Rotation3> {
    if axis.s3.abs() > 1e-9 {
        return Err(Error::NonEquatorialAxis(axis.s3));
    }
    if !axis.is_unit(1e-9) {
        return Err(Error::Config(format!(
            "birefringence axis must be a unit vector (norm {})",
            axis.norm()
        )));
    }
    Ok(Rotation3::about_axis(axis, retardance_deg.to_radians()))
}

/// Wrap an angle in degrees into (-180, 180].
pub fn wrap_degrees(angle: f64) -> f64 {
    let mut a = angle % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Smallest signed difference `a - b` on the circle, in degrees.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    wrap_degrees(a - b)
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: PoincareVector, b: PoincareVector, tol: f64) -> bool {
        (a.s1 - b.s1).abs() < tol && (a.s2 - b.s2).abs() < tol && (a.s3 - b.s3).abs() < tol
    }

    #[test]
    fn born_rule_examples() {
        let id = Rotation3::IDENTITY;
        let z = PoincareVector::S3;
        assert_eq!(detection_probability(z, z, &id), 1.0);
        assert_eq!(detection_probability(z, -z, &id), 0.0);
        assert!((detection_probability(PoincareVector::S1, z, &id) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn binary_entropy_values() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // -0.06 log2 0.06 - 0.94 log2 0.94
        assert!((binary_entropy(0.06).unwrap() - 0.327_445_1).abs() < 1e-6);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn axial_rotation_examples() {
        assert!(axial_rotation(0.0).orthogonality_error() < 1e-12);
        let r0 = axial_rotation(0.0);
        assert!(close(r0.apply(PoincareVector::S1), PoincareVector::S1, 1e-12));
        let r90 = axial_rotation(90.0);
        assert!(close(r90.apply(PoincareVector::S1), -PoincareVector::S1, 1e-12));
        for th in [-170.0, 13.0, 45.0, 271.5] {
            let r = axial_rotation(th);
            assert!((r.apply(PoincareVector::S3).dot(&PoincareVector::S3) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn birefringence_examples() {
        let r = birefringence_rotation(0.0, PoincareVector::S1).unwrap();
        assert!(close(r.apply(PoincareVector::S2), PoincareVector::S2, 1e-12));
        let hwp = birefringence_rotation(180.0, PoincareVector::S1).unwrap();
        assert!(close(hwp.apply(PoincareVector::S3), -PoincareVector::S3, 1e-12));
        let axis = PoincareVector::from_angles(0.7, std::f64::consts::FRAC_PI_2);
        let r = birefringence_rotation(33.0, axis).unwrap();
        let back = r.compose(&r.inverse());
        assert!(back.orthogonality_error() < 1e-9);
        assert!(close(back.apply(PoincareVector::S3), PoincareVector::S3, 1e-9));
        assert!(matches!(
            birefringence_rotation(10.0, PoincareVector::S3),
            Err(Error::NonEquatorialAxis(_))
        ));
    }

    #[test]
    fn canonical_states_are_orthogonal_and_unbiased() {
        for a in ProtocolState::ALL {
            for b in ProtocolState::ALL {
                let d = a.detector_vector().dot(&b.detector_vector());
                let p = a.prepared_vector().dot(&b.prepared_vector());
                if a.basis == b.basis {
                    let expect = if a == b { 1.0 } else { -1.0 };
                    assert_eq!(d, expect);
                    assert_eq!(p, expect);
                } else {
                    assert_eq!(d, 0.0);
                    assert_eq!(p, 0.0);
                    let prob = detection_probability(
                        a.prepared_vector(),
                        b.detector_vector(),
                        &Rotation3::IDENTITY,
                    );
                    assert_eq!(prob, 0.5);
                }
            }
            assert_eq!(ProtocolState::parse(a.label()), Some(a));
            assert_eq!(ProtocolState::from_index(a.index()), a);
        }
    }

    #[test]
    fn wrap_degrees_range() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(540.0), 180.0);
        assert!((wrap_degrees(-190.0) - 170.0).abs() < 1e-12);
        assert!((angle_difference(359.0, 1.0) + 2.0).abs() < 1e-12);
    }

    fn unit_vector() -> impl Strategy<Value = PoincareVector> {
        (0.0..2.0 * PI, 0.0..PI).prop_map(|(a, p)| PoincareVector::from_angles(a, p))
    }

    fn rotation() -> impl Strategy<Value = Rotation3> {
        (unit_vector(), -PI..PI).prop_map(|(axis, ang)| Rotation3::about_axis(axis, ang))
    }

    proptest! {
        #[test]
        fn born_complement_sums_to_one(a in unit_vector(), b in unit_vector(), r in rotation()) {
            let s = detection_probability(a, b, &r) + detection_probability(a, -b, &r);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn z_basis_unaffected_by_axial_rotation(theta in -720.0f64..720.0) {
            let r = axial_rotation(theta);
            for sa in [1.0, -1.0] {
                for sb in [1.0, -1.0] {
                    let a = PoincareVector::S3.scaled(sa);
                    let b = PoincareVector::S3.scaled(sb);
                    let rotated = detection_probability(a, b, &r);
                    let fixed = detection_probability(a, b, &Rotation3::IDENTITY);
                    prop_assert!((rotated - fixed).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn entropy_symmetric(p in 0.0f64..=1.0) {
            let a = binary_entropy(p).unwrap();
            let b = binary_entropy(1.0 - p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn rotations_compose_associatively(a in rotation(), b in rotation(), c in rotation(), v in unit_vector()) {
            let left = (a * b) * c;
            let right = a * (b * c);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((left.matrix()[i][j] - right.matrix()[i][j]).abs() < 1e-9);
                }
            }
            prop_assert!(left.orthogonality_error() < 1e-9);
            prop_assert!((left.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((left.apply(v).norm() - 1.0).abs() < 1e-9);
        }
    }
}
