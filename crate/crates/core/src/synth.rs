//! Synthetic subjects and exercise streams for tests, fixtures and demos.
//!
//! The camera frame here has z up. A subject at zero yaw faces +y with the
//! right shoulder at `origin`; the arm is driven by joint angles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::body_frame::{Side, SkeletonFrame, LEFT_SHOULDER, RIGHT_HIP, RIGHT_SHOULDER};
use crate::error::{Error, Result};
use crate::motion::{Quat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subject {
    pub upper_arm: f64,
    pub forearm: f64,
    pub shoulder_width: f64,
    pub torso_length: f64,
    /// Right shoulder position in the camera frame.
    pub origin: Vec3,
    /// Rotation about the vertical, degrees.
    pub yaw_deg: f64,
}

impl Subject {
    /// A subject whose straight-arm reach equals `limb_length`.
    pub fn with_limb_length(limb_length: f64) -> Self {
        Self {
            upper_arm: 0.45 * limb_length,
            forearm: 0.55 * limb_length,
            shoulder_width: 0.36,
            torso_length: 0.5,
            origin: Vec3::new(0.2, 1.5, 1.3),
            yaw_deg: 0.0,
        }
    }

    pub fn limb_length(&self) -> f64 {
        self.upper_arm + self.forearm
    }

    /// Body axes (right, down, forward) expressed in the camera frame.
    fn axes(&self) -> [Vec3; 3] {
        let yaw = Quat::from_axis_angle(&Vec3::z_axis(), self.yaw_deg.to_radians());
        [yaw * Vec3::x(), yaw * -Vec3::z(), yaw * Vec3::y()]
    }
}

/// Right-arm joint angles, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmPose {
    /// Upper arm swing from hanging toward the front.
    pub shoulder_flexion: f64,
    /// Tilt of the swing plane toward the body's right.
    pub plane_angle: f64,
    pub elbow_flexion: f64,
    /// Rotation of the knuckle line about the forearm.
    pub forearm_roll: f64,
}

/// `10u^3 - 15u^4 + 6u^5`, clamped to [0, 1].
pub fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Keypoints of `subject` at time `t` with the right arm in `arm`.
pub fn skeleton(subject: &Subject, t: f64, arm: &ArmPose) -> SkeletonFrame {
    let [x, y, z] = subject.axes();
    let o = subject.origin;
    // swing plane spanned by y (down) and z' (front tilted toward the right)
    let zp = z * arm.plane_angle.cos() + x * arm.plane_angle.sin();
    let normal = y.cross(&zp).normalize();
    let dir = |a: f64| y * a.cos() + zp * a.sin();
    let d1 = dir(arm.shoulder_flexion);
    let d2 = dir(arm.shoulder_flexion + arm.elbow_flexion);
    let elbow = o + d1 * subject.upper_arm;
    let wrist = elbow + d2 * subject.forearm;
    let k = normal * arm.forearm_roll.cos() + d2.cross(&normal) * arm.forearm_roll.sin();
    let side = Side::Right;
    SkeletonFrame::new(t)
        .with(RIGHT_SHOULDER, o)
        .with(LEFT_SHOULDER, o - x * subject.shoulder_width)
        .with(RIGHT_HIP, o - x * 0.03 + y * subject.torso_length)
        .with(&side.elbow(), elbow)
        .with(&side.wrist(), wrist)
        .with(&side.index_knuckle(), wrist + d2 * 0.08 - k * 0.04)
        .with(&side.pinky_knuckle(), wrist + d2 * 0.08 + k * 0.04)
}

/// Samples `arm(u)` for normalized time `u` over `duration` at `rate_hz`.
pub fn exercise_stream(
    subject: &Subject,
    duration: f64,
    rate_hz: f64,
    arm: impl Fn(f64) -> ArmPose,
) -> Vec<SkeletonFrame> {
    let n = (duration * rate_hz).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / rate_hz;
            skeleton(subject, t, &arm(i as f64 / n as f64))
        })
        .collect()
}

/// Straight-arm forward raise sweeping `sweep` radians on a plane tilted by
/// `plane_angle`, with a gradual forearm roll. The wrist path length is
/// `limb_length * sweep`.
pub fn reach_arc(sweep: f64, plane_angle: f64) -> impl Fn(f64) -> ArmPose {
    move |u| {
        let m = min_jerk(u);
        ArmPose {
            shoulder_flexion: sweep * m,
            plane_angle,
            elbow_flexion: 0.0,
            forearm_roll: 0.6 * m,
        }
    }
}

/// Elbow flexion through `range` radians with the upper arm hanging.
pub fn elbow_flexion(range: f64) -> impl Fn(f64) -> ArmPose {
    move |u| ArmPose {
        shoulder_flexion: 0.0,
        plane_angle: 0.2,
        elbow_flexion: range * min_jerk(u),
        forearm_roll: 0.3,
    }
}

/// Adds isotropic Gaussian noise of `std` meters to every keypoint.
pub fn add_noise(frames: &[SkeletonFrame], std: f64, seed: u64) -> Result<Vec<SkeletonFrame>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("noise std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(frames
        .iter()
        .map(|f| f.map_points(|p| p + Vec3::from_fn(|_, _| normal.sample(&mut rng))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_frame::{build_body_frame, estimate_limb_length};
    use approx::assert_relative_eq;

    #[test]
    fn body_frame_matches_construction() {
        let mut sub = Subject::with_limb_length(0.6);
        sub.yaw_deg = 30.0;
        let f = skeleton(&sub, 0.0, &ArmPose::default());
        let bf = build_body_frame(&f, Side::Right).unwrap();
        let wrist = bf.point_to_body(&f.get("right_wrist").unwrap());
        assert!((wrist - Vec3::new(0.0, 0.6, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn limb_length_is_recovered() {
        let sub = Subject::with_limb_length(0.55);
        let frames = exercise_stream(&sub, 2.0, 30.0, elbow_flexion(1.5));
        assert_relative_eq!(estimate_limb_length(&frames, Side::Right).unwrap().limb_length, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn min_jerk_endpoints() {
        assert_eq!(min_jerk(0.0), 0.0);
        assert_eq!(min_jerk(1.0), 1.0);
        assert_relative_eq!(min_jerk(0.5), 0.5, epsilon = 1e-15);
    }
}
