//! Geometric value types shared by every stage of the pipeline, the
//! quaternion log/exp pair used by the orientation channel of the DMP, and the
//! recency-weighted smoothing filter applied to demonstrations.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Flips `q` onto the hemisphere with non-negative scalar part.
pub fn canonicalize(q: Quat) -> Quat {
    if q.w < 0.0 {
        let c = q.into_inner();
        UnitQuaternion::new_unchecked(-c)
    } else {
        q
    }
}

/// A 6-DoF sample: position in meters plus a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    #[serde(with = "quat_serde")]
    pub orientation: Quat,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quat) -> Self {
        Self {
            position,
            orientation: canonicalize(orientation),
        }
    }

    pub fn from_position(position: Vec3) -> Self {
        Self::new(position, Quat::identity())
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            position: self.position + offset,
            orientation: self.orientation,
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::from_position(Vec3::zeros())
    }
}

/// Quaternions go to disk as `[w, x, y, z]`.
pub(crate) mod quat_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &Quat, ser: S) -> std::result::Result<S::Ok, S::Error> {
        [q.w, q.i, q.j, q.k].serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Quat, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(de)?;
        let raw = Quaternion::new(w, x, y, z);
        let n = raw.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(serde::de::Error::custom("quaternion must have finite non-zero norm"));
        }
        // Stored quaternions are already unit norm; only renormalize when they are not,
        // so that a write/read cycle reproduces the exact bits.
        if (n - 1.0).abs() <= 1e-12 {
            Ok(UnitQuaternion::new_unchecked(raw))
        } else {
            Ok(UnitQuaternion::from_quaternion(raw))
        }
    }
}

/// Interaction wrench at the end effector. Only the force part is used by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn from_force(force: Vec3) -> Self {
        Self {
            force,
            torque: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameId {
    Camera,
    Body,
    RobotBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedTrajectory {
    pub frame: FrameId,
    pub samples: Vec<(f64, Pose)>,
}

impl TimedTrajectory {
    /// Validates ordering and length.
    pub fn new(frame: FrameId, samples: Vec<(f64, Pose)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidArgument(format!(
                    "timestamps must be strictly increasing (sample {} at {} s follows {} s)",
                    i + 1,
                    w[1].0,
                    w[0].0
                )));
            }
        }
        Ok(Self { frame, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0.0,
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|(t, _)| *t)
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.samples.iter().map(|(_, p)| p.position)
    }

    /// Linear interpolation of position (and slerp of orientation) at time `t`,
    /// clamped to the end samples.
    pub fn pose_at(&self, t: f64) -> Pose {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let hi = s.partition_point(|(ti, _)| *ti <= t);
        let (t0, p0) = s[hi - 1];
        let (t1, p1) = s[hi];
        let a = (t - t0) / (t1 - t0);
        Pose::new(
            p0.position + (p1.position - p0.position) * a,
            p0.orientation.slerp(&canonical_near(&p0.orientation, &p1.orientation), a),
        )
    }
}

/// Returns `q` or `-q`, whichever is closer to `reference`.
fn canonical_near(reference: &Quat, q: &Quat) -> Quat {
    if reference.coords.dot(&q.coords) < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    }
}

/// Rotation vector (axis times angle) of `q * q_ref^-1`. Magnitude is at most pi.
pub fn quat_log(q: &Quat, q_ref: &Quat) -> Vec3 {
    if q.coords == q_ref.coords {
        return Vec3::zeros();
    }
    let rel = canonicalize(q * q_ref.inverse());
    let v = rel.imag();
    let vn = v.norm();
    if vn < 1e-300 {
        return Vec3::zeros();
    }
    let angle = 2.0 * vn.atan2(rel.w);
    v * (angle / vn)
}

/// Unit quaternion for a rotation vector.
pub fn quat_exp(rotvec: &Vec3) -> Quat {
    let angle = rotvec.norm();
    if angle < 1e-300 {
        return Quat::identity();
    }
    let half = 0.5 * angle;
    let axis = rotvec / angle;
    UnitQuaternion::new_unchecked(Quaternion::from_parts(half.cos(), axis * half.sin()))
}

/// Advances `q` by the world-frame angular velocity `omega` over `dt`.
pub fn quat_exp_step(q: &Quat, omega: &Vec3, dt: f64) -> Quat {
    let next = quat_exp(&(omega * dt)) * q;
    canonicalize(UnitQuaternion::new_normalize(next.into_inner()))
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 {
        Err(Error::InvalidArgument("filter window must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn recency_weights(len: usize, power: f64) -> impl Iterator<Item = f64> {
    // oldest sample in the window gets rank 0, the newest rank len-1
    (0..len).map(move |k| ((k + 1) as f64).powf(power))
}

/// Causal recency-weighted moving average. Output `i` is the mean of the last
/// `window` inputs weighted by `(rank + 1)^power`, newest ranked highest; the
/// first `window - 1` outputs use the available prefix.
pub fn power_moving_average(series: &[f64], window: usize, power: f64) -> Result<Vec<f64>> {
    check_window(window)?;
    if series.is_empty() {
        return Err(Error::InvalidArgument("cannot filter an empty series".into()));
    }
    if !(power >= 0.0) {
        return Err(Error::InvalidArgument(format!("filter power must be >= 0, got {power}")));
    }
    Ok((0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let win = &series[lo..=i];
            let (num, den) = recency_weights(win.len(), power)
                .zip(win)
                .fold((0.0, 0.0), |(n, d), (w, x)| (n + w * x, d + w));
            num / den
        })
        .collect())
}

/// Applies [`power_moving_average`] to every position coordinate of a trajectory
/// and the matching recency-weighted quaternion mean to its orientations.
pub fn smooth_trajectory(traj: &TimedTrajectory, window: usize, power: f64) -> Result<TimedTrajectory> {
    let n = traj.samples.len();
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|ax| {
            let col: Vec<f64> = traj.samples.iter().map(|(_, p)| p.position[ax]).collect();
            power_moving_average(&col, window, power)
        })
        .collect::<Result<_>>()?;
    let samples = (0..n)
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let newest = traj.samples[i].1.orientation;
            let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
            for (w, (_, p)) in recency_weights(i + 1 - lo, power).zip(&traj.samples[lo..=i]) {
                acc += canonical_near(&newest, &p.orientation).into_inner() * w;
            }
            let pos = Vec3::new(axes[0][i], axes[1][i], axes[2][i]);
            (traj.samples[i].0, Pose::new(pos, UnitQuaternion::from_quaternion(acc)))
        })
        .collect();
    Ok(TimedTrajectory {
        frame: traj.frame,
        samples,
    })
}
