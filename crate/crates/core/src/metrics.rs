//! Scalar summaries of demonstrations, rollouts and simulation traces.

use crate::body_frame::{joint_angle, polyline_length, reach_ratio, SkeletonFrame};
use crate::error::{Error, Result};
use crate::motion::TimedTrajectory;
use crate::sim::{DirectiveKind, SimTrace, TraceRecord};

fn nonempty(trace: &SimTrace) -> Result<&[TraceRecord]> {
    if trace.records.is_empty() {
        Err(Error::EmptyRollout("trace has no records".into()))
    } else {
        Ok(&trace.records)
    }
}

/// Position RMSE after mapping both trajectories onto normalized time and
/// resampling at `max(len)` evenly spaced instants.
pub fn rmse(a: &TimedTrajectory, b: &TimedTrajectory) -> f64 {
    let n = a.len().max(b.len());
    let (a0, ad) = (a.samples[0].0, a.duration());
    let (b0, bd) = (b.samples[0].0, b.duration());
    let sum: f64 = (0..n)
        .map(|i| {
            let u = i as f64 / (n - 1) as f64;
            let pa = a.pose_at(a0 + u * ad).position;
            let pb = b.pose_at(b0 + u * bd).position;
            (pa - pb).norm_squared()
        })
        .sum();
    (sum / n as f64).sqrt()
}

pub fn max_deviation(trace: &SimTrace) -> Result<f64> {
    Ok(nonempty(trace)?.iter().map(|r| r.deviation).fold(0.0, f64::max))
}

/// Time of the first tick at full progress, if the run completed.
pub fn completion_time(trace: &SimTrace) -> Result<Option<f64>> {
    Ok(nonempty(trace)?.iter().find(|r| r.progress >= 1.0).map(|r| r.time))
}

/// Seconds from the first corridor violation to the first reverse or hold
/// directive at or after it. `None` without a violation.
pub fn reaction_time(trace: &SimTrace) -> Result<Option<f64>> {
    let records = nonempty(trace)?;
    let Some(i) = records.iter().position(|r| !r.in_corridor) else {
        return Ok(None);
    };
    let t0 = records[i].time;
    Ok(records[i..]
        .iter()
        .find(|r| r.directive != DirectiveKind::Forward)
        .map(|r| r.time - t0))
}

/// Commanded path length divided by the subject's limb length.
pub fn trace_reach_ratio(trace: &SimTrace, limb_length: f64) -> Result<f64> {
    let records = nonempty(trace)?;
    reach_ratio(polyline_length(records.iter().map(|r| r.pose_cmd.position)), limb_length)
}

/// Range of motion in degrees of the angle at `joint[1]` over the frames.
pub fn rom(frames: &[SkeletonFrame], joint: [&str; 3]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, f) in frames.iter().enumerate() {
        let p = |name: &str| {
            f.get(name).ok_or_else(|| Error::MissingLandmark {
                frame: i,
                landmark: name.to_string(),
            })
        };
        let a = joint_angle(&p(joint[0])?, &p(joint[1])?, &p(joint[2])?)?;
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if frames.is_empty() {
        return Err(Error::EmptyRollout("no frames".into()));
    }
    Ok(hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{FrameId, Pose, Vec3};
    use approx::assert_relative_eq;

    fn line(offset: f64, n: usize, t1: f64) -> TimedTrajectory {
        let samples = (0..n)
            .map(|i| {
                let u = i as f64 / (n - 1) as f64;
                (u * t1, Pose::from_position(Vec3::new(0.3 * u, offset, 0.0)))
            })
            .collect();
        TimedTrajectory::new(FrameId::Body, samples).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        assert_eq!(rmse(&line(0.0, 50, 2.0), &line(0.0, 50, 2.0)), 0.0);
    }

    #[test]
    fn constant_offset() {
        assert_relative_eq!(rmse(&line(0.0, 50, 2.0), &line(0.02, 80, 5.0)), 0.02, epsilon = 1e-12);
    }

    #[test]
    fn empty_trace_is_error() {
        let t = SimTrace {
            meta: Default::default(),
            records: vec![],
        };
        assert!(max_deviation(&t).is_err());
        assert!(completion_time(&t).is_err());
    }

    #[test]
    fn rom_of_sweep() {
        let frames: Vec<SkeletonFrame> = (0..=10)
            .map(|k| {
                let a = (30.0 + 9.0 * k as f64).to_radians();
                SkeletonFrame::new(k as f64 * 0.1)
                    .with("s", Vec3::new(0.0, 0.3, 0.0))
                    .with("e", Vec3::zeros())
                    .with("w", Vec3::new(0.0, a.cos(), a.sin()) * 0.25)
            })
            .collect();
        assert_relative_eq!(rom(&frames, ["s", "e", "w"]).unwrap(), 90.0, epsilon = 1e-9);
    }
}
