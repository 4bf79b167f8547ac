//! Safety constraint geometry: the sigmoid funnel around the landing
//! platform, the superellipsoidal inter-agent separation constraint, and
//! landing-geometry validation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Sigmoid exponent clamp; beyond this the sigmoid is flat to well below
/// machine precision.
const EXP_CLAMP: f64 = 50.0;

/// Funnel constraint parameters: safety height, platform radius, slope.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FunnelParams {
    pub safety_height: f64,
    pub platform_radius: f64,
    pub slope: f64,
    /// Vertical offset of the platform deck, default 0.
    #[serde(default)]
    pub platform_height: f64,
}

impl FunnelParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.safety_height <= 0.0 || self.platform_radius <= 0.0 || self.slope <= 0.0 {
            return Err(format!(
                "funnel parameters must be positive: h_s={}, r={}, beta={}",
                self.safety_height, self.platform_radius, self.slope
            ));
        }
        Ok(())
    }
}

/// Inter-follower separation parameters. The shaping factor stretches the
/// vertical axis of the constraint set so a follower cannot sit in another's
/// downwash.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollisionParams {
    pub min_distance: f64,
    pub vertical_shaping: f64,
}

impl CollisionParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_distance <= 0.0 {
            return Err(format!("min_distance must be positive, got {}", self.min_distance));
        }
        if self.vertical_shaping <= 0.0 {
            return Err(format!(
                "vertical_shaping must be positive, got {}",
                self.vertical_shaping
            ));
        }
        Ok(())
    }

    /// Applies C = diag(1, 1, c) to a position difference.
    pub fn shape(&self, d: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(d.x, d.y, self.vertical_shaping * d.z)
    }
}

fn sigmoid(a: f64) -> f64 {
    let a = a.clamp(-EXP_CLAMP, EXP_CLAMP);
    1.0 / (1.0 + (-a).exp())
}

/// Funnel constraint value
///   h_C = p_z - h_s / (1 + exp(-beta * (dx^2 + dy^2 - r^2)))
/// where (dx, dy) is the horizontal offset from the platform center.
/// Nonnegative h_C keeps the vehicle outside the restricted area.
pub fn eval_h_c(follower_pos: &Vector3<f64>, platform_center: &Vector3<f64>, fp: &FunnelParams) -> f64 {
    let dx = follower_pos.x - platform_center.x;
    let dy = follower_pos.y - platform_center.y;
    let arg = fp.slope * (dx * dx + dy * dy - fp.platform_radius * fp.platform_radius);
    (follower_pos.z - fp.platform_height) - fp.safety_height * sigmoid(arg)
}

/// Height of the funnel surface above the platform plane at a given
/// horizontal distance from the platform center; the smallest altitude at
/// which [`eval_h_c`] is nonnegative.
pub fn funnel_floor(radial_distance: f64, fp: &FunnelParams) -> f64 {
    let arg = fp.slope * (radial_distance * radial_distance - fp.platform_radius * fp.platform_radius);
    fp.platform_height + fp.safety_height * sigmoid(arg)
}

/// Analytic gradient of [`eval_h_c`] w.r.t. the follower position.
/// The vertical component is identically 1.
pub fn grad_h_c(
    follower_pos: &Vector3<f64>,
    platform_center: &Vector3<f64>,
    fp: &FunnelParams,
) -> Vector3<f64> {
    let dx = follower_pos.x - platform_center.x;
    let dy = follower_pos.y - platform_center.y;
    let arg = fp.slope * (dx * dx + dy * dy - fp.platform_radius * fp.platform_radius);
    let s = sigmoid(arg);
    // d/d(dx) of -h_s * sigma(arg) = -h_s * sigma' * beta * 2 dx
    let coeff = -fp.safety_height * s * (1.0 - s) * fp.slope * 2.0;
    Vector3::new(coeff * dx, coeff * dy, 1.0)
}

/// Analytic Hessian of [`eval_h_c`] w.r.t. the follower position. The
/// vertical row and column are identically zero.
pub fn hess_h_c(
    follower_pos: &Vector3<f64>,
    platform_center: &Vector3<f64>,
    fp: &FunnelParams,
) -> Matrix3<f64> {
    let dx = follower_pos.x - platform_center.x;
    let dy = follower_pos.y - platform_center.y;
    let arg = fp.slope * (dx * dx + dy * dy - fp.platform_radius * fp.platform_radius);
    let s = sigmoid(arg);
    let s1 = s * (1.0 - s);
    let s2 = s1 * (1.0 - 2.0 * s);
    let a = -2.0 * fp.slope * fp.safety_height * s1;
    let b = -4.0 * fp.slope * fp.slope * fp.safety_height * s2;
    let mut h = Matrix3::zeros();
    h[(0, 0)] = a + b * dx * dx;
    h[(1, 1)] = a + b * dy * dy;
    h[(0, 1)] = b * dx * dy;
    h[(1, 0)] = b * dx * dy;
    h
}

/// Separation constraint value ||C (x_i - z_j)|| - R.
pub fn eval_h_ij(pos_i: &Vector3<f64>, pos_j: &Vector3<f64>, cp: &CollisionParams) -> f64 {
    cp.shape(&(pos_i - pos_j)).norm() - cp.min_distance
}

/// Gradient of [`eval_h_ij`] w.r.t. `pos_i`: C^T C d / ||C d||.
/// Returns zero at coincident positions, where the norm is not differentiable.
pub fn grad_h_ij(pos_i: &Vector3<f64>, pos_j: &Vector3<f64>, cp: &CollisionParams) -> Vector3<f64> {
    let d = pos_i - pos_j;
    let shaped = cp.shape(&d);
    let norm = shaped.norm();
    if norm < 1e-12 {
        return Vector3::zeros();
    }
    Vector3::new(
        d.x / norm,
        d.y / norm,
        cp.vertical_shaping * cp.vertical_shaping * d.z / norm,
    )
}

/// Analytic Hessian of [`eval_h_ij`] w.r.t. `pos_i`:
/// (C^T C - g g^T) / ||C d|| with g the unnormalized gradient direction.
/// Returns zero at coincident positions, matching [`grad_h_ij`].
pub fn hess_h_ij(pos_i: &Vector3<f64>, pos_j: &Vector3<f64>, cp: &CollisionParams) -> Matrix3<f64> {
    let d = pos_i - pos_j;
    let shaped = cp.shape(&d);
    let norm = shaped.norm();
    if norm < 1e-12 {
        return Matrix3::zeros();
    }
    let c2 = cp.vertical_shaping * cp.vertical_shaping;
    let g = Vector3::new(d.x, d.y, c2 * d.z);
    let mut h = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, c2));
    h -= g * g.transpose() / (norm * norm);
    h / norm
}

/// Per-follower landing offsets on the platform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandingGeometry {
    pub platform_radius: f64,
    pub safe_radius: f64,
    pub offsets: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryViolation {
    RadiusOrder { safe_radius: f64, platform_radius: f64 },
    OffsetOutsideBand { index: usize, norm: f64, limit: f64 },
    PairTooClose { i: usize, j: usize, distance: f64, min_distance: f64 },
}

impl std::fmt::Display for GeometryViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeometryViolation::RadiusOrder { safe_radius, platform_radius } => write!(
                f,
                "safe radius {safe_radius} must be strictly smaller than platform radius {platform_radius}"
            ),
            GeometryViolation::OffsetOutsideBand { index, norm, limit } => write!(
                f,
                "offset {index} has norm {norm:.4} outside the allowed ball of radius {limit:.4}"
            ),
            GeometryViolation::PairTooClose { i, j, distance, min_distance } => write!(
                f,
                "offsets {i} and {j} are {distance:.4} apart, need strictly more than {min_distance:.4}"
            ),
        }
    }
}

/// Checks the landing geometry against both initial-condition clauses:
/// offsets inside the shrunk platform disc, and pairwise separation strictly
/// above the collision distance. Violations are data, not errors.
pub fn validate_landing_geometry(
    geom: &LandingGeometry,
    cp: &CollisionParams,
) -> Vec<GeometryViolation> {
    let mut violations = Vec::new();
    if geom.safe_radius >= geom.platform_radius {
        violations.push(GeometryViolation::RadiusOrder {
            safe_radius: geom.safe_radius,
            platform_radius: geom.platform_radius,
        });
    }
    let limit = geom.platform_radius - geom.safe_radius;
    for (i, c) in geom.offsets.iter().enumerate() {
        let norm = Vector3::from(*c).norm();
        if norm > limit {
            violations.push(GeometryViolation::OffsetOutsideBand { index: i, norm, limit });
        }
    }
    for i in 0..geom.offsets.len() {
        for j in (i + 1)..geom.offsets.len() {
            let d = (Vector3::from(geom.offsets[i]) - Vector3::from(geom.offsets[j])).norm();
            if d <= cp.min_distance {
                violations.push(GeometryViolation::PairTooClose {
                    i,
                    j,
                    distance: d,
                    min_distance: cp.min_distance,
                });
            }
        }
    }
    violations
}

/// Equidistant landing offsets on a circle: c_i = radius * (cos, sin)(2 i pi / M).
pub fn make_hexagon_offsets(count: usize, radius: f64) -> Vec<[f64; 3]> {
    assert!(count >= 1);
    (0..count)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect()
}

/// Assignment of landing offsets to agents: agent i gets the diagonally
/// opposite slot. For odd M there is no exact antipode; we use a fixed
/// rotation by floor(M/2).
pub fn diagonal_assignment(count: usize) -> Vec<usize> {
    (0..count).map(|i| (i + count / 2) % count).collect()
}
