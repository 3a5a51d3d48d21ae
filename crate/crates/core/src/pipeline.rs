//! Keypoint stream to body-frame DMP, with a reproduction report.

use serde::{Deserialize, Serialize};

use crate::body_frame::{estimate_limb_length, path_distance, reach_ratio, to_body_frame, wrist_trajectory, Side, SkeletonFrame};
use crate::dmp::{fit_dmp, rollout, DmpModel};
use crate::error::Result;
use crate::metrics::rmse;
use crate::motion::{smooth_trajectory, TimedTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnOptions {
    pub side: Side,
    pub n_basis: usize,
    /// Power moving-average window and exponent; `None` disables smoothing.
    pub filter: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub frames: usize,
    pub duration_s: f64,
    pub limb_length: f64,
    pub path_length: f64,
    pub reach_ratio: f64,
    /// Rollout against the (smoothed) body-frame demonstration, time-normalized.
    pub reproduction_rmse: f64,
}

/// Wrist trajectory of the stream in the body frame, smoothed if requested.
pub fn body_frame_demo(frames: &[SkeletonFrame], side: Side, filter: Option<(usize, f64)>) -> Result<TimedTrajectory> {
    let wrist = wrist_trajectory(frames, side)?;
    let body = to_body_frame(&wrist, frames, side)?;
    match filter {
        Some((window, power)) => smooth_trajectory(&body, window, power),
        None => Ok(body),
    }
}

pub fn learn_demonstration(frames: &[SkeletonFrame], opts: &LearnOptions) -> Result<(DmpModel, LearnReport)> {
    let demo = body_frame_demo(frames, opts.side, opts.filter)?;
    let limb = estimate_limb_length(frames, opts.side)?.limb_length;
    let model = fit_dmp(&demo, opts.n_basis)?.with_limb_length(limb);
    let dt = demo.duration() / (demo.len() - 1) as f64;
    let replay = rollout(&model, dt);
    let path_length = path_distance(&demo);
    let report = LearnReport {
        frames: frames.len(),
        duration_s: demo.duration(),
        limb_length: limb,
        path_length,
        reach_ratio: reach_ratio(path_length, limb)?,
        reproduction_rmse: rmse(&demo, &replay),
    };
    Ok((model, report))
}
