//! Small exact geometry kernel: vectors, unit quaternions, rigid poses and the
//! sphere/capsule/ray queries used by sensing and contact detection.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction. The zero vector maps to itself.
    #[inline]
    pub fn normalize(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    #[inline]
    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Any unit vector orthogonal to `self` (assumed non-zero).
    pub fn any_orthogonal(self) -> Vec3 {
        let helper = if self.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        self.cross(helper).normalize()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Rotation { w: c, x: a.x * s, y: a.y * s, z: a.z * s }
    }

    /// Rotation whose columns are the given orthonormal frame axes.
    pub fn from_basis(x_axis: Vec3, y_axis: Vec3, z_axis: Vec3) -> Self {
        let (m00, m01, m02) = (x_axis.x, y_axis.x, z_axis.x);
        let (m10, m11, m12) = (x_axis.y, y_axis.y, z_axis.y);
        let (m20, m21, m22) = (x_axis.z, y_axis.z, z_axis.z);
        let trace = m00 + m11 + m22;
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Rotation { w: 0.25 * s, x: (m21 - m12) / s, y: (m02 - m20) / s, z: (m10 - m01) / s }
        } else if m00 > m11 && m00 > m22 {
            let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
            Rotation { w: (m21 - m12) / s, x: 0.25 * s, y: (m01 + m10) / s, z: (m02 + m20) / s }
        } else if m11 > m22 {
            let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
            Rotation { w: (m02 - m20) / s, x: (m01 + m10) / s, y: 0.25 * s, z: (m12 + m21) / s }
        } else {
            let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
            Rotation { w: (m10 - m01) / s, x: (m02 + m20) / s, y: (m12 + m21) / s, z: 0.25 * s }
        };
        q.normalized()
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Rotation { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    #[inline]
    pub fn inverse(self) -> Self {
        Rotation { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * o` (apply `o` first, then `self`).
    #[inline]
    pub fn compose(self, o: Rotation) -> Rotation {
        Rotation {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    #[inline]
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(t)
    }

    #[inline]
    pub fn inverse_rotate(self, v: Vec3) -> Vec3 {
        self.inverse().rotate(v)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, o: Rotation) -> Rotation {
        self.compose(o)
    }
}

/// Rigid transform mapping child-frame coordinates into the parent frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rotation,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: Vec3::ZERO, orientation: Rotation::IDENTITY };

    pub fn new(position: Vec3, orientation: Rotation) -> Self {
        Self { position, orientation }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self { position, orientation: Rotation::IDENTITY }
    }

    pub fn from_rotation(orientation: Rotation) -> Self {
        Self { position: Vec3::ZERO, orientation }
    }

    /// `self ∘ inner`: first apply `inner`, then `self`.
    pub fn compose(&self, inner: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation.rotate(inner.position),
            orientation: self.orientation.compose(inner.orientation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose { position: -inv.rotate(self.position), orientation: inv }
    }

    #[inline]
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }

    #[inline]
    pub fn inverse_transform_point(&self, p: Vec3) -> Vec3 {
        self.orientation.inverse_rotate(p - self.position)
    }

    #[inline]
    pub fn transform_vector(&self, v: Vec3) -> Vec3 {
        self.orientation.rotate(v)
    }
}

/// Free-function forms of the rigid transforms.
pub fn transform_point(pose: &Pose, p: Vec3) -> Vec3 {
    pose.transform_point(p)
}

pub fn inverse_transform_point(pose: &Pose, p: Vec3) -> Vec3 {
    pose.inverse_transform_point(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereShape {
    pub center: Vec3,
    pub radius: f64,
}

impl SphereShape {
    pub fn new(center: Vec3, radius: f64) -> Self {
        debug_assert!(radius > 0.0);
        Self { center, radius }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleShape {
    pub endpoint_a: Vec3,
    pub endpoint_b: Vec3,
    pub radius: f64,
}

impl CapsuleShape {
    pub fn new(endpoint_a: Vec3, endpoint_b: Vec3, radius: f64) -> Self {
        debug_assert!(radius > 0.0);
        Self { endpoint_a, endpoint_b, radius }
    }

    pub fn transformed(&self, pose: &Pose) -> CapsuleShape {
        CapsuleShape {
            endpoint_a: pose.transform_point(self.endpoint_a),
            endpoint_b: pose.transform_point(self.endpoint_b),
            radius: self.radius,
        }
    }

    pub fn length(&self) -> f64 {
        self.endpoint_a.distance(self.endpoint_b)
    }

    /// Lateral (cylinder) plus end-cap (sphere) surface area.
    pub fn surface_area(&self) -> f64 {
        let r = self.radius;
        2.0 * std::f64::consts::PI * r * self.length() + 4.0 * std::f64::consts::PI * r * r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayShape {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl RayShape {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Smallest `t >= 0` at which the ray touches the sphere. An origin inside
/// (or on) the sphere reads 0. Grazing contact (zero discriminant) is a hit.
#[inline]
pub fn ray_sphere_hit(ray: &RayShape, sphere: &SphereShape) -> Option<f64> {
    let m = ray.origin - sphere.center;
    let c = m.norm_squared() - sphere.radius * sphere.radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = m.dot(ray.direction);
    if b > 0.0 {
        // outside and pointing away
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some((-b - disc.sqrt()).max(0.0))
}

/// Signed distance from `p` to the sphere surface (negative inside).
#[inline]
pub fn point_sphere_distance(p: Vec3, sphere: &SphereShape) -> f64 {
    p.distance(sphere.center) - sphere.radius
}

/// Closest point to `p` on the segment `[a, b]`.
#[inline]
pub fn closest_point_on_segment(p: Vec3, a: Vec3, b: Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Penetration depth of a sphere into a capsule, if they overlap.
#[inline]
pub fn capsule_sphere_penetration(cap: &CapsuleShape, sphere: &SphereShape) -> Option<f64> {
    let closest = closest_point_on_segment(sphere.center, cap.endpoint_a, cap.endpoint_b);
    let depth = cap.radius + sphere.radius - closest.distance(sphere.center);
    (depth > 0.0).then_some(depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn sphere(c: (f64, f64, f64), r: f64) -> SphereShape {
        SphereShape::new(Vec3::new(c.0, c.1, c.2), r)
    }

    #[test]
    fn ray_hits_sphere_on_axis() {
        let ray = RayShape::new(Vec3::ZERO, Vec3::X);
        let t = ray_sphere_hit(&ray, &sphere((2.0, 0.0, 0.0), 0.15)).unwrap();
        assert_abs_diff_eq!(t, 1.85, epsilon = 1e-12);
    }

    #[test]
    fn perpendicular_ray_misses() {
        let ray = RayShape::new(Vec3::ZERO, Vec3::Y);
        assert_eq!(ray_sphere_hit(&ray, &sphere((2.0, 0.0, 0.0), 0.15)), None);
    }

    #[test]
    fn origin_inside_reads_zero() {
        let s = sphere((2.0, 0.0, 0.0), 0.15);
        for dir in [Vec3::X, -Vec3::X, Vec3::Y, Vec3::new(1.0, 1.0, 1.0).normalize()] {
            let ray = RayShape::new(Vec3::new(2.0, 0.0, 0.0), dir);
            assert_eq!(ray_sphere_hit(&ray, &s), Some(0.0));
        }
    }

    #[test]
    fn sphere_behind_ray_is_missed() {
        let ray = RayShape::new(Vec3::ZERO, -Vec3::X);
        assert_eq!(ray_sphere_hit(&ray, &sphere((2.0, 0.0, 0.0), 0.15)), None);
    }

    #[test]
    fn grazing_ray_counts_as_hit() {
        let ray = RayShape::new(Vec3::new(0.0, 0.5, 0.0), Vec3::X);
        let t = ray_sphere_hit(&ray, &sphere((2.0, 0.0, 0.0), 0.5)).unwrap();
        assert_abs_diff_eq!(t, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn point_sphere_examples() {
        assert_abs_diff_eq!(point_sphere_distance(Vec3::ZERO, &sphere((0.65, 0.0, 0.0), 0.15)), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(point_sphere_distance(Vec3::new(3.0, 1.0, 2.0), &sphere((3.0, 1.0, 2.0), 0.15)), -0.15);
        assert_abs_diff_eq!(
            point_sphere_distance(Vec3::new(1.0, 1.0, 1.0), &sphere((1.0, 1.0, 1.15), 0.15)),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn capsule_examples() {
        let cap = CapsuleShape::new(Vec3::ZERO, Vec3::Z, 0.1);
        let d = capsule_sphere_penetration(&cap, &sphere((0.2, 0.0, 0.5), 0.15)).unwrap();
        assert_abs_diff_eq!(d, 0.05, epsilon = 1e-12);
        assert_eq!(capsule_sphere_penetration(&cap, &sphere((1.0, 0.0, 0.5), 0.15)), None);
        let d = capsule_sphere_penetration(&cap, &sphere((0.0, 0.0, 0.3), 0.15)).unwrap();
        assert_abs_diff_eq!(d, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn transform_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose::IDENTITY, p), p);
        let shift = Pose::from_translation(Vec3::X);
        assert_eq!(transform_point(&shift, Vec3::ZERO), Vec3::X);
        let yaw = Pose::from_rotation(Rotation::from_axis_angle(Vec3::Z, FRAC_PI_2));
        let q = transform_point(&yaw, Vec3::X);
        assert_abs_diff_eq!(q.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q.y, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q.z, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn basis_roundtrip() {
        let r = Rotation::from_axis_angle(Vec3::new(0.3, -0.2, 0.9), 2.1);
        let back = Rotation::from_basis(r.rotate(Vec3::X), r.rotate(Vec3::Y), r.rotate(Vec3::Z));
        for v in [Vec3::X, Vec3::Y, Vec3::new(0.2, 0.4, -1.0)] {
            assert!(r.rotate(v).distance(back.rotate(v)) < 1e-12);
        }
    }

    fn arb_vec(scale: f64) -> impl Strategy<Value = Vec3> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_vec(5.0), arb_vec(1.0), -6.0f64..6.0).prop_map(|(p, axis, angle)| {
            let axis = if axis.norm() < 1e-3 { Vec3::Z } else { axis };
            Pose::new(p, Rotation::from_axis_angle(axis, angle))
        })
    }

    proptest! {
        #[test]
        fn inverse_transform_undoes_transform(pose in arb_pose(), p in arb_vec(10.0)) {
            let back = inverse_transform_point(&pose, transform_point(&pose, p));
            prop_assert!(back.distance(p) < 1e-9);
        }

        #[test]
        fn pose_composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose(), p in arb_vec(3.0)) {
            let left = a.compose(&b).compose(&c).transform_point(p);
            let right = a.compose(&b.compose(&c)).transform_point(p);
            prop_assert!(left.distance(right) < 1e-9);
        }

        #[test]
        fn pose_times_inverse_is_identity(a in arb_pose(), p in arb_vec(3.0)) {
            let id = a.compose(&a.inverse());
            prop_assert!(id.transform_point(p).distance(p) < 1e-9);
            prop_assert!((id.orientation.w.abs() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn point_sphere_distance_is_lipschitz(p in arb_vec(4.0), q in arb_vec(4.0), c in arb_vec(2.0), r in 0.01f64..1.0) {
            let s = SphereShape::new(c, r);
            let diff = (point_sphere_distance(p, &s) - point_sphere_distance(q, &s)).abs();
            prop_assert!(diff <= p.distance(q) + 1e-12);
        }

        #[test]
        fn capsule_penetration_symmetric_in_endpoints(a in arb_vec(2.0), b in arb_vec(2.0), c in arb_vec(2.0), rc in 0.01f64..0.5, rs in 0.01f64..0.5) {
            let s = SphereShape::new(c, rs);
            let fwd = capsule_sphere_penetration(&CapsuleShape::new(a, b, rc), &s);
            let rev = capsule_sphere_penetration(&CapsuleShape::new(b, a, rc), &s);
            match (fwd, rev) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                other => prop_assert!(false, "asymmetric result {:?}", other),
            }
        }
    }
}
