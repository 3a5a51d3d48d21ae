//! Skeleton keypoint replay: body-centric frames, wrist 6-DoF trajectories,
//! forearm roll, limb length and the virtual goniometer.
//!
//! Keypoint streams are line-delimited JSON, one frame per line:
//!
//! ```text
//! {"time_s": 0.033, "keypoints": {"left_shoulder": [x, y, z], ...}, "confidence": {"left_shoulder": 0.98, ...}}
//! ```
//!
//! Positions are meters in a right-handed camera frame. Landmarks missing from
//! `confidence` are treated as fully confident.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{FrameId, Pose, Quat, TimedTrajectory, Vec3};

pub const LEFT_SHOULDER: &str = "left_shoulder";
pub const RIGHT_SHOULDER: &str = "right_shoulder";
pub const RIGHT_HIP: &str = "right_hip";

/// Landmarks every frame must carry for body-frame construction.
pub const FRAME_ANCHORS: [&str; 3] = [LEFT_SHOULDER, RIGHT_SHOULDER, RIGHT_HIP];

pub const CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const ALIGNMENT_TOLERANCE_S: f64 = 0.05;

const MIN_SHOULDER_SEPARATION: f64 = 0.01;
const MIN_HIP_ANGLE_DEG: f64 = 2.0;
const MIN_KNUCKLE_ANGLE_DEG: f64 = 2.0;
const MIN_POINT_SEPARATION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn shoulder(self) -> String {
        format!("{}_shoulder", self.prefix())
    }

    pub fn elbow(self) -> String {
        format!("{}_elbow", self.prefix())
    }

    pub fn wrist(self) -> String {
        format!("{}_wrist", self.prefix())
    }

    pub fn index_knuckle(self) -> String {
        format!("{}_index_mcp", self.prefix())
    }

    pub fn pinky_knuckle(self) -> String {
        format!("{}_pinky_mcp", self.prefix())
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::InvalidArgument(format!("side must be left or right, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame {
    pub time: f64,
    pub keypoints: BTreeMap<String, Vec3>,
    pub confidence: BTreeMap<String, f64>,
}

impl SkeletonFrame {
    pub fn new(time: f64) -> Self {
        Self {
            time,
            keypoints: BTreeMap::new(),
            confidence: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, p: Vec3) -> Self {
        self.keypoints.insert(name.to_owned(), p);
        self
    }

    pub fn get(&self, name: &str) -> Option<Vec3> {
        self.keypoints.get(name).copied()
    }

    fn require(&self, name: &str) -> Result<Vec3> {
        self.get(name).ok_or_else(|| Error::DegenerateLandmarks(format!("landmark `{name}` not present")))
    }

    /// Applies `f` to every keypoint.
    pub fn map_points(&self, mut f: impl FnMut(&Vec3) -> Vec3) -> Self {
        Self {
            time: self.time,
            keypoints: self.keypoints.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
            confidence: self.confidence.clone(),
        }
    }
}

#[derive(Deserialize)]
struct FrameRecord {
    time_s: f64,
    keypoints: BTreeMap<String, [f64; 3]>,
    #[serde(default)]
    confidence: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct FrameRecordOut<'a> {
    time_s: f64,
    keypoints: BTreeMap<&'a str, [f64; 3]>,
    confidence: BTreeMap<&'a str, f64>,
}

/// Reads a keypoint stream file. See [`parse_keypoint_stream`].
pub fn load_keypoint_stream(path: impl AsRef<Path>) -> Result<Vec<SkeletonFrame>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_keypoint_stream(std::io::BufReader::new(file))
}

/// Parses a keypoint stream, gates landmarks below [`CONFIDENCE_THRESHOLD`],
/// checks the frame anchors and returns frames sorted by time. Frame indices in
/// errors count records in file order from zero.
pub fn parse_keypoint_stream(reader: impl BufRead) -> Result<Vec<SkeletonFrame>> {
    let mut frames = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let index = frames.len();
        if !rec.time_s.is_finite() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "time_s must be finite".into(),
            });
        }
        let mut frame = SkeletonFrame::new(rec.time_s);
        for (name, xyz) in rec.keypoints {
            if xyz.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("landmark `{name}` has non-finite coordinates"),
                });
            }
            let c = rec.confidence.get(&name).copied().unwrap_or(1.0);
            if c >= CONFIDENCE_THRESHOLD {
                frame.confidence.insert(name.clone(), c);
                frame.keypoints.insert(name, Vec3::from(xyz));
            }
        }
        if let Some(missing) = FRAME_ANCHORS.iter().find(|n| !frame.keypoints.contains_key(**n)) {
            return Err(Error::MissingLandmark {
                frame: index,
                landmark: (*missing).to_owned(),
            });
        }
        frames.push(frame);
    }
    frames.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(frames)
}

/// Serializes frames in the stream format, one line each.
pub fn write_keypoint_stream(frames: &[SkeletonFrame], mut out: impl std::io::Write) -> Result<()> {
    for f in frames {
        let rec = FrameRecordOut {
            time_s: f.time,
            keypoints: f.keypoints.iter().map(|(k, v)| (k.as_str(), [v.x, v.y, v.z])).collect(),
            confidence: f
                .keypoints
                .keys()
                .map(|k| (k.as_str(), f.confidence.get(k).copied().unwrap_or(1.0)))
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<stream>", e))?;
    }
    Ok(())
}

/// Body-centric frame: `rotation` columns are the body x, y, z axes in camera
/// coordinates, `origin` is the tracked-side shoulder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyFrame {
    pub origin: Vec3,
    pub orientation: Quat,
}

impl BodyFrame {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    pub fn point_to_body(&self, p: &Vec3) -> Vec3 {
        self.orientation.inverse_transform_vector(&(p - self.origin))
    }

    pub fn vector_to_body(&self, v: &Vec3) -> Vec3 {
        self.orientation.inverse_transform_vector(v)
    }

    pub fn pose_to_body(&self, pose: &Pose) -> Pose {
        Pose::new(self.point_to_body(&pose.position), self.orientation.inverse() * pose.orientation)
    }

    pub fn pose_from_body(&self, pose: &Pose) -> Pose {
        Pose::new(self.origin + self.orientation * pose.position, self.orientation * pose.orientation)
    }
}

/// x runs from the left to the right shoulder, y is the part of
/// (right hip - shoulder midpoint) orthogonal to x (pointing down the trunk),
/// z = x cross y. The origin sits on the tracked-side shoulder.
pub fn build_body_frame(frame: &SkeletonFrame, side: Side) -> Result<BodyFrame> {
    let ls = frame.require(LEFT_SHOULDER)?;
    let rs = frame.require(RIGHT_SHOULDER)?;
    let hip = frame.require(RIGHT_HIP)?;

    let across = rs - ls;
    let width = across.norm();
    if width < MIN_SHOULDER_SEPARATION {
        return Err(Error::DegenerateLandmarks(format!(
            "shoulders {:.4} m apart (minimum {MIN_SHOULDER_SEPARATION} m)",
            width
        )));
    }
    let x = across / width;
    let down = hip - (ls + rs) * 0.5;
    let y_raw = down - x * x.dot(&down);
    let dn = down.norm();
    if dn == 0.0 || y_raw.norm() / dn < MIN_HIP_ANGLE_DEG.to_radians().sin() {
        return Err(Error::DegenerateLandmarks(
            "hip is collinear with the shoulder line".into(),
        ));
    }
    let y = y_raw.normalize();
    let z = x.cross(&y);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let origin = match side {
        Side::Left => ls,
        Side::Right => rs,
    };
    Ok(BodyFrame {
        origin,
        orientation: UnitQuaternion::from_rotation_matrix(&rot),
    })
}

/// Nearest frame by time, if within `tolerance`. `frames` must be sorted.
fn nearest_frame(frames: &[SkeletonFrame], t: f64, tolerance: f64) -> Option<&SkeletonFrame> {
    let i = frames.partition_point(|f| f.time < t);
    let before = i.checked_sub(1).map(|j| &frames[j]);
    let after = frames.get(i);
    let best = match (before, after) {
        (Some(a), Some(b)) => {
            if (t - a.time) <= (b.time - t) {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return None,
    };
    ((best.time - t).abs() <= tolerance).then_some(best)
}

/// Re-expresses camera-frame wrist poses in the body frame of the nearest
/// skeleton frame (within 50 ms).
pub fn to_body_frame(
    wrist: &TimedTrajectory,
    frames: &[SkeletonFrame],
    side: Side,
) -> Result<TimedTrajectory> {
    let samples = wrist
        .samples
        .iter()
        .map(|(t, pose)| {
            let f = nearest_frame(frames, *t, ALIGNMENT_TOLERANCE_S).ok_or(Error::AlignmentGap {
                time: *t,
                tolerance_s: ALIGNMENT_TOLERANCE_S,
            })?;
            let bf = build_body_frame(f, side)?;
            Ok((*t, bf.pose_to_body(pose)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TimedTrajectory {
        frame: FrameId::Body,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraspClass {
    Supinated,
    Pronated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForearmRoll {
    pub angle: f64,
    pub grasp: GraspClass,
}

/// Index-to-pinky knuckle line for the right hand, pinky-to-index for the left,
/// so that both hands share one roll convention.
fn knuckle_vector(frame: &SkeletonFrame, side: Side) -> Result<Vec3> {
    let idx = frame.require(&side.index_knuckle())?;
    let pinky = frame.require(&side.pinky_knuckle())?;
    Ok(match side {
        Side::Right => pinky - idx,
        Side::Left => idx - pinky,
    })
}

fn forearm_axis(frame: &SkeletonFrame, side: Side) -> Result<Vec3> {
    let elbow = frame.require(&side.elbow())?;
    let wrist = frame.require(&side.wrist())?;
    let a = wrist - elbow;
    if a.norm() < MIN_POINT_SEPARATION {
        return Err(Error::DegenerateLandmarks("wrist coincides with elbow".into()));
    }
    Ok(a.normalize())
}

fn project_off(v: &Vec3, axis: &Vec3) -> Vec3 {
    v - axis * axis.dot(v)
}

/// Knuckle line projected onto the plane orthogonal to the forearm, as a unit vector.
fn knuckle_in_plane(frame: &SkeletonFrame, side: Side, axis: &Vec3) -> Result<Vec3> {
    let k = knuckle_vector(frame, side)?;
    let kp = project_off(&k, axis);
    let kn = k.norm();
    if kn == 0.0 || kp.norm() / kn < MIN_KNUCKLE_ANGLE_DEG.to_radians().sin() {
        return Err(Error::DegenerateLandmarks(
            "knuckle line parallel to the forearm axis".into(),
        ));
    }
    Ok(kp.normalize())
}

/// Signed roll of the knuckle line about the forearm axis, measured from the
/// body x-axis transported onto the plane orthogonal to the forearm. When the
/// forearm runs along body x, the body y-axis is transported instead.
/// `|roll| >= pi/2` is classed as pronated.
pub fn forearm_roll(frame: &SkeletonFrame, side: Side) -> Result<ForearmRoll> {
    let bf = build_body_frame(frame, side)?;
    let axis = forearm_axis(frame, side)?;
    let kp = knuckle_in_plane(frame, side, &axis)?;
    let rot = bf.rotation();
    let mut reference = project_off(&rot.column(0).into_owned(), &axis);
    if reference.norm() < MIN_KNUCKLE_ANGLE_DEG.to_radians().sin() {
        reference = project_off(&rot.column(1).into_owned(), &axis);
    }
    let reference = reference.normalize();
    let angle = reference.cross(&kp).dot(&axis).atan2(reference.dot(&kp));
    let grasp = if angle.abs() < std::f64::consts::FRAC_PI_2 {
        GraspClass::Supinated
    } else {
        GraspClass::Pronated
    };
    Ok(ForearmRoll { angle, grasp })
}

/// Camera-frame 6-DoF wrist trajectory: position is the wrist keypoint, the
/// orientation has x along the forearm and y along the in-plane knuckle line.
pub fn wrist_trajectory(frames: &[SkeletonFrame], side: Side) -> Result<TimedTrajectory> {
    let samples = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let missing = |name: String| Error::MissingLandmark { frame: i, landmark: name };
            for name in [side.elbow(), side.wrist(), side.index_knuckle(), side.pinky_knuckle()] {
                if !f.keypoints.contains_key(&name) {
                    return Err(missing(name));
                }
            }
            let x = forearm_axis(f, side)?;
            let y = knuckle_in_plane(f, side, &x)?;
            let z = x.cross(&y);
            let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
            let wrist = f.require(&side.wrist())?;
            Ok((f.time, Pose::new(wrist, UnitQuaternion::from_rotation_matrix(&rot))))
        })
        .collect::<Result<Vec<_>>>()?;
    TimedTrajectory::new(FrameId::Camera, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnthropometricProfile {
    pub limb_length: f64,
    pub side: Side,
}

pub const MIN_LIMB_FRAMES: usize = 10;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over frames of upper-arm plus forearm length.
pub fn estimate_limb_length(frames: &[SkeletonFrame], side: Side) -> Result<AnthropometricProfile> {
    let (sh, el, wr) = (side.shoulder(), side.elbow(), side.wrist());
    let mut lengths: Vec<f64> = frames
        .iter()
        .filter_map(|f| {
            let (s, e, w) = (f.get(&sh)?, f.get(&el)?, f.get(&wr)?);
            Some((s - e).norm() + (e - w).norm())
        })
        .collect();
    if lengths.len() < MIN_LIMB_FRAMES {
        return Err(Error::InsufficientFrames {
            needed: MIN_LIMB_FRAMES,
            got: lengths.len(),
        });
    }
    let limb_length = median(&mut lengths);
    if !(0.3..=1.0).contains(&limb_length) {
        return Err(Error::LimbLengthOutOfRange(limb_length));
    }
    Ok(AnthropometricProfile { limb_length, side })
}

/// Interior angle at `b` between the rays to `a` and `c`, in degrees.
pub fn joint_angle(a: &Vec3, b: &Vec3, c: &Vec3) -> Result<f64> {
    let u = a - b;
    let v = c - b;
    if u.norm() < MIN_POINT_SEPARATION || v.norm() < MIN_POINT_SEPARATION {
        return Err(Error::DegeneratePoints(
            "joint vertex within 1 cm of an end point".into(),
        ));
    }
    // atan2 form stays accurate near 0 and 180 degrees
    Ok(u.cross(&v).norm().atan2(u.dot(&v)).to_degrees())
}

/// Sum of Euclidean distances between consecutive positions.
pub fn path_distance(traj: &TimedTrajectory) -> f64 {
    polyline_length(traj.positions())
}

pub fn polyline_length(points: impl IntoIterator<Item = Vec3>) -> f64 {
    let mut it = points.into_iter();
    let Some(mut prev) = it.next() else {
        return 0.0;
    };
    let mut d = 0.0;
    for p in it {
        d += (p - prev).norm();
        prev = p;
    }
    d
}

/// Normalized reach ratio `distance / limb_length`.
pub fn reach_ratio(distance: f64, limb_length: f64) -> Result<f64> {
    if !(limb_length > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "limb length must be positive, got {limb_length}"
        )));
    }
    Ok(distance / limb_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn t_pose(time: f64) -> SkeletonFrame {
        SkeletonFrame::new(time)
            .with(LEFT_SHOULDER, Vec3::new(-0.2, 0.0, 2.0))
            .with(RIGHT_SHOULDER, Vec3::new(0.2, 0.0, 2.0))
            .with(RIGHT_HIP, Vec3::new(0.1, -0.5, 2.0))
            .with("right_elbow", Vec3::new(0.2, -0.3, 1.9))
            .with("right_wrist", Vec3::new(0.2, -0.3, 1.65))
    }

    #[test]
    fn t_pose_frame_is_axis_relabeling() {
        let bf = build_body_frame(&t_pose(0.0), Side::Right).unwrap();
        let r = bf.rotation();
        // body x = camera x, body y = camera -y (caudal), body z = camera -z
        let want = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        assert_abs_diff_eq!(r, want, epsilon = 1e-12);
        assert_abs_diff_eq!(bf.origin, Vec3::new(0.2, 0.0, 2.0), epsilon = 1e-15);
        let left = build_body_frame(&t_pose(0.0), Side::Left).unwrap();
        assert_abs_diff_eq!(left.origin, Vec3::new(-0.2, 0.0, 2.0), epsilon = 1e-15);
    }

    #[test]
    fn frame_translation_and_rotation_equivariance() {
        let base = t_pose(0.0);
        let bf = build_body_frame(&base, Side::Right).unwrap();
        let t = Vec3::new(0.3, -1.0, 0.7);
        let moved = build_body_frame(&base.map_points(|p| p + t), Side::Right).unwrap();
        assert_abs_diff_eq!(moved.origin, bf.origin + t, epsilon = 1e-12);
        assert!(moved.orientation.angle_to(&bf.orientation) < 1e-12);

        let rz = Quat::from_axis_angle(&Vec3::y_axis(), 0.6);
        let rotated = build_body_frame(&base.map_points(|p| rz * p), Side::Right).unwrap();
        assert!(rotated.orientation.angle_to(&(rz * bf.orientation)) < 1e-12);
    }

    #[test]
    fn degenerate_frames_rejected() {
        let f = t_pose(0.0).with(RIGHT_SHOULDER, Vec3::new(-0.195, 0.0, 2.0));
        assert!(matches!(build_body_frame(&f, Side::Right), Err(Error::DegenerateLandmarks(_))));
        let f = t_pose(0.0).with(RIGHT_HIP, Vec3::new(0.5, 0.001, 2.0));
        assert!(matches!(build_body_frame(&f, Side::Right), Err(Error::DegenerateLandmarks(_))));
    }

    #[test]
    fn to_body_frame_stationary_is_constant() {
        let frames: Vec<_> = (0..5).map(|i| t_pose(i as f64 * 0.033)).collect();
        let wrist = TimedTrajectory::new(
            FrameId::Camera,
            (0..5)
                .map(|i| (i as f64 * 0.033, Pose::from_position(Vec3::new(0.2, -0.3, 1.65))))
                .collect(),
        )
        .unwrap();
        let body = to_body_frame(&wrist, &frames, Side::Right).unwrap();
        for (_, p) in &body.samples {
            assert_abs_diff_eq!(p.position, Vec3::new(0.0, 0.3, 0.35), epsilon = 1e-12);
        }
    }

    #[test]
    fn alignment_gap_detected() {
        let frames = vec![t_pose(0.0), t_pose(1.0)];
        let wrist = TimedTrajectory::new(
            FrameId::Camera,
            vec![(0.0, Pose::default()), (0.5, Pose::default())],
        )
        .unwrap();
        assert!(matches!(
            to_body_frame(&wrist, &frames, Side::Right),
            Err(Error::AlignmentGap { .. })
        ));
    }

    fn with_knuckles(k: Vec3) -> SkeletonFrame {
        // forearm along camera -z, so the plane orthogonal to it contains body x
        let wrist = Vec3::new(0.2, -0.3, 1.65);
        t_pose(0.0)
            .with("right_index_mcp", wrist)
            .with("right_pinky_mcp", wrist + k)
    }

    #[test]
    fn roll_zero_when_knuckles_follow_reference() {
        let r = forearm_roll(&with_knuckles(Vec3::new(0.05, 0.0, 0.0)), Side::Right).unwrap();
        assert_abs_diff_eq!(r.angle, 0.0, epsilon = 1e-12);
        assert_eq!(r.grasp, GraspClass::Supinated);
    }

    #[test]
    fn roll_pi_when_knuckles_reversed() {
        let r = forearm_roll(&with_knuckles(Vec3::new(-0.05, 0.0, 0.0)), Side::Right).unwrap();
        assert_abs_diff_eq!(r.angle.abs(), PI, epsilon = 1e-12);
        assert_eq!(r.grasp, GraspClass::Pronated);
    }

    #[test]
    fn roll_quarter_turn_is_pronated_boundary() {
        // Direct computation: axis a = (0,0,-1), reference x = (1,0,0),
        // knuckles k = (0,1,0): atan2((x cross k).a, x.k) = atan2(-1, 0) = -pi/2.
        let r = forearm_roll(&with_knuckles(Vec3::new(0.0, 0.05, 0.0)), Side::Right).unwrap();
        assert_abs_diff_eq!(r.angle, -FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(r.grasp, GraspClass::Pronated);
    }

    #[test]
    fn roll_degenerate_knuckles() {
        let r = forearm_roll(&with_knuckles(Vec3::new(0.0, 0.0, -0.05)), Side::Right);
        assert!(matches!(r, Err(Error::DegenerateLandmarks(_))));
    }

    fn arm_frames(n: usize) -> Vec<SkeletonFrame> {
        (0..n)
            .map(|i| {
                SkeletonFrame::new(i as f64)
                    .with("right_shoulder", Vec3::zeros())
                    .with("right_elbow", Vec3::new(0.0, 0.0, -0.30))
                    .with("right_wrist", Vec3::new(0.0, 0.0, -0.55))
            })
            .collect()
    }

    #[test]
    fn limb_length_collinear() {
        let p = estimate_limb_length(&arm_frames(10), Side::Right).unwrap();
        assert_abs_diff_eq!(p.limb_length, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn limb_length_ignores_outlier() {
        let mut frames = arm_frames(11);
        frames[4] = frames[4].map_points(|p| p * 10.0);
        let p = estimate_limb_length(&frames, Side::Right).unwrap();
        assert_abs_diff_eq!(p.limb_length, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn limb_length_needs_frames() {
        assert!(matches!(
            estimate_limb_length(&arm_frames(9), Side::Right),
            Err(Error::InsufficientFrames { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn cohort_limb_lengths_accepted() {
        for l in [0.50, 0.53, 0.55, 0.61] {
            let frames: Vec<_> = (0..12)
                .map(|i| {
                    SkeletonFrame::new(i as f64)
                        .with("left_shoulder", Vec3::zeros())
                        .with("left_elbow", Vec3::new(0.0, -l * 0.55, 0.0))
                        .with("left_wrist", Vec3::new(0.0, -l, 0.0))
                })
                .collect();
            let p = estimate_limb_length(&frames, Side::Left).unwrap();
            assert_abs_diff_eq!(p.limb_length, l, epsilon = 1e-12);
        }
    }

    #[test]
    fn goniometer_basic_angles() {
        let o = Vec3::zeros();
        assert_abs_diff_eq!(
            joint_angle(&Vec3::new(-1.0, 0.0, 0.0), &o, &Vec3::new(1.0, 0.0, 0.0)).unwrap(),
            180.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            joint_angle(&Vec3::new(1.0, 0.0, 0.0), &o, &Vec3::new(0.0, 0.5, 0.0)).unwrap(),
            90.0,
            epsilon = 1e-12
        );
        assert!(joint_angle(&o, &o, &Vec3::x()).is_err());
    }

    #[test]
    fn goniometer_synthetic_elbow_exact() {
        // ray to the shoulder is +y, forearm at a known angle from it in the y-z plane
        let shoulder = Vec3::new(0.1, 0.4, 1.0);
        let elbow = shoulder + Vec3::new(0.0, -0.3, 0.0);
        for deg in [30.0f64, 75.0, 110.0, 160.0] {
            let th = deg.to_radians();
            let wrist = elbow + Vec3::new(0.0, th.cos(), th.sin()) * 0.25;
            let got = joint_angle(&shoulder, &elbow, &wrist).unwrap();
            assert_abs_diff_eq!(got, deg, epsilon = 1e-9);
        }
    }

    #[test]
    fn reach_ratio_table_values() {
        assert_abs_diff_eq!(reach_ratio(0.47, 0.61).unwrap(), 0.77, epsilon = 0.005);
        assert_abs_diff_eq!(reach_ratio(0.47, 0.50).unwrap(), 0.94, epsilon = 1e-12);
        assert!(reach_ratio(0.47, 0.0).is_err());
        let line = TimedTrajectory::new(
            FrameId::Body,
            vec![(0.0, Pose::default()), (1.0, Pose::from_position(Vec3::x()))],
        )
        .unwrap();
        assert_abs_diff_eq!(reach_ratio(path_distance(&line), 1.0).unwrap(), 1.0);
    }

    const STREAM: &str = r#"{"time_s": 0.1, "keypoints": {"left_shoulder": [-0.2,0,2], "right_shoulder": [0.2,0,2], "right_hip": [0.1,-0.5,2]}}
{"time_s": 0.0, "keypoints": {"left_shoulder": [-0.2,0,2], "right_shoulder": [0.2,0,2], "right_hip": [0.1,-0.5,2], "right_wrist": [0,0,0]}, "confidence": {"right_wrist": 0.2}}
"#;

    #[test]
    fn parse_sorts_and_gates() {
        let frames = parse_keypoint_stream(STREAM.as_bytes()).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].time, 0.0);
        assert!(frames[0].get("right_wrist").is_none());
    }

    #[test]
    fn parse_reports_missing_anchor() {
        let mut text = String::new();
        for i in 0..7 {
            let hip = if i == 5 { "" } else { r#", "right_hip": [0.1,-0.5,2]"# };
            text.push_str(&format!(
                "{{\"time_s\": {i}, \"keypoints\": {{\"left_shoulder\": [-0.2,0,2], \"right_shoulder\": [0.2,0,2]{hip}}}}}\n"
            ));
        }
        match parse_keypoint_stream(text.as_bytes()) {
            Err(Error::MissingLandmark { frame, landmark }) => {
                assert_eq!(frame, 5);
                assert_eq!(landmark, "right_hip");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_has_line() {
        let err = parse_keypoint_stream("\n{not json}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
