//! Cartesian dynamic movement primitives with a force-coupled canonical system.
//!
//! Position follows a critically damped second-order attractor per axis,
//!
//! ```text
//! tau z' = K (g - y) - D z + s * scale * F(s),     tau y' = z
//! ```
//!
//! and orientation the same law on the quaternion logarithm of the goal error.
//! `F` is a normalized radial basis expansion in phase. The transformation
//! system is integrated in *phase time* (`dt_virtual = tau * ln(s_prev / s)`),
//! so the geometric path depends only on the phase and a stalled phase stalls
//! the reference. Physical velocities are recovered from the actual phase rate.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{canonicalize, quat_exp_step, quat_log, FrameId, Pose, Quat, TimedTrajectory, Vec3};

pub const DEFAULT_STIFFNESS: f64 = 150.0;
pub const DEFAULT_N_BASIS: usize = 25;
pub const DEFAULT_S_MIN: f64 = 0.01;
pub const MIN_BASIS: usize = 5;
pub const DMP_DOCUMENT_VERSION: u32 = 1;

/// Virtual-time substep as a fraction of the nominal time constant.
const SUBSTEP_FRACTION: f64 = 2e-3;
const RANK_TOLERANCE: f64 = 1e-10;

/// Phase of the canonical system, `tau s' = -max(0, epsilon + gamma f_t) s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalState {
    pub s: f64,
    pub tau: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub s_min: f64,
}

impl CanonicalState {
    pub fn new(tau: f64, gamma: f64, epsilon: f64, s_min: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        if !(gamma >= 0.0 && epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma and epsilon must be non-negative, got {gamma}, {epsilon}"
            )));
        }
        if !(s_min > 0.0 && s_min < 1.0) {
            return Err(Error::InvalidArgument(format!("s_min must lie in (0, 1), got {s_min}")));
        }
        Ok(Self {
            s: 1.0,
            tau,
            gamma,
            epsilon,
            s_min,
        })
    }

    /// Clamped progression rate `max(0, epsilon + gamma f_t)`.
    pub fn rate(&self, f_t: f64) -> f64 {
        (self.epsilon + self.gamma * f_t).max(0.0)
    }

    /// Instantaneous `ds/dt` under tangential force `f_t`.
    pub fn phase_velocity(&self, f_t: f64) -> f64 {
        -self.rate(f_t) * self.s / self.tau
    }

    pub fn is_complete(&self) -> bool {
        self.s <= self.s_min
    }
}

/// Exact exponential update for a force held constant over `dt`.
pub fn step_canonical(state: &CanonicalState, f_t: f64, dt: f64) -> CanonicalState {
    debug_assert!(dt > 0.0);
    let rate = state.rate(f_t);
    CanonicalState {
        s: state.s * (-rate * dt / state.tau).exp(),
        ..*state
    }
}

/// Log-phase progress `ln(s) / ln(s_min)` clamped to `[0, 1]`.
pub fn progress(state: &CanonicalState) -> f64 {
    progress_of(state.s, state.s_min)
}

pub fn progress_of(s: f64, s_min: f64) -> f64 {
    (s.ln() / s_min.ln()).clamp(0.0, 1.0)
}

/// Gaussian basis in phase with centers evenly spaced in nominal time.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBasis {
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl PhaseBasis {
    pub fn new(n: usize, s_min: f64) -> Self {
        let alpha = (1.0 / s_min).ln();
        let centers: Vec<f64> = (0..n)
            .map(|i| (-alpha * i as f64 / (n - 1) as f64).exp())
            .collect();
        let widths = (0..n)
            .map(|i| {
                let gap = if i + 1 < n {
                    centers[i] - centers[i + 1]
                } else {
                    centers[i - 1] - centers[i]
                };
                1.0 / (gap * gap)
            })
            .collect();
        Self { centers, widths }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Normalized activations at phase `s`.
    pub fn activations(&self, s: f64) -> Vec<f64> {
        let mut psi: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.widths)
            .map(|(c, h)| (-h * (s - c) * (s - c)).exp())
            .collect();
        let total: f64 = psi.iter().sum();
        if total > 1e-300 {
            psi.iter_mut().for_each(|p| *p /= total);
        }
        psi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpModel {
    pub n_basis: usize,
    /// Per-axis basis weights, 3 rows of `n_basis`.
    pub pos_weights: Vec<Vec<f64>>,
    pub ori_weights: Vec<Vec<f64>>,
    pub y0: Pose,
    pub g: Pose,
    /// Duration of the demonstration in seconds.
    pub tau_demo: f64,
    /// Limb length the positions currently correspond to.
    pub limb_length: f64,
    /// Multiplier on the position forcing term; 1 for a freshly fitted model.
    pub spatial_scale: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub s_min: f64,
    pub frame: FrameId,
}

#[derive(Serialize, Deserialize)]
struct DmpDocument {
    version: u32,
    kind: String,
    model: DmpModel,
}

impl DmpModel {
    /// Time constant under which a constant unit rate replays the demonstration
    /// duration, `tau_demo / ln(1 / s_min)`.
    pub fn nominal_tau(&self) -> f64 {
        self.tau_demo / (1.0 / self.s_min).ln()
    }

    pub fn basis(&self) -> PhaseBasis {
        PhaseBasis::new(self.n_basis, self.s_min)
    }

    fn forcing(weights: &[Vec<f64>], psi: &[f64]) -> Vec3 {
        Vec3::from_fn(|ax, _| weights[ax].iter().zip(psi).map(|(w, p)| w * p).sum())
    }

    /// Initial direction of motion: the attractor pull plus forcing at `s = 1`
    /// when that is a genuine forward pull, otherwise the start-goal chord.
    pub fn initial_tangent(&self) -> Vec3 {
        let psi = self.basis().activations(1.0);
        let pull = (self.g.position - self.y0.position) * self.stiffness
            + Self::forcing(&self.pos_weights, &psi) * self.spatial_scale;
        let chord = self.g.position - self.y0.position;
        // A rest-to-rest demo leaves only a residual pull whose direction is
        // noise; fall back to the chord unless the pull is real and forward.
        let pull_is_real = pull.norm() > 0.01 * self.stiffness * chord.norm() && pull.dot(&chord) > 0.0;
        if pull_is_real {
            pull.normalize()
        } else if chord.norm() > 1e-9 {
            chord.normalize()
        } else {
            Vec3::x()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_basis < MIN_BASIS {
            return bad(format!("n_basis must be at least {MIN_BASIS}, got {}", self.n_basis));
        }
        for w in [&self.pos_weights, &self.ori_weights] {
            if w.len() != 3 || w.iter().any(|r| r.len() != self.n_basis) {
                return bad("weights must be 3 x n_basis".into());
            }
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return bad("weights must be finite".into());
            }
        }
        if !(self.tau_demo > 0.0) {
            return bad(format!("tau_demo must be positive, got {}", self.tau_demo));
        }
        if !(self.limb_length > 0.0 && self.spatial_scale > 0.0) {
            return bad("limb length and spatial scale must be positive".into());
        }
        if !(self.stiffness > 0.0 && self.damping >= 0.0) {
            return bad("gains must be positive".into());
        }
        if !(self.s_min > 0.0 && self.s_min < 1.0) {
            return bad(format!("s_min must lie in (0, 1), got {}", self.s_min));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DmpDocument {
            version: DMP_DOCUMENT_VERSION,
            kind: "cartesian-dmp".into(),
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DmpDocument = serde_json::from_str(text)?;
        if doc.version != DMP_DOCUMENT_VERSION {
            return Err(Error::Version {
                kind: "dmp model",
                found: doc.version,
                expected: DMP_DOCUMENT_VERSION,
            });
        }
        doc.model.validate()?;
        Ok(doc.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                line: j.line(),
                message: format!("{}: {j}", path.display()),
            },
            other => other,
        })
    }
}

/// Second-order finite-difference derivative on a possibly non-uniform grid.
fn gradient(t: &[f64], x: &[Vec3]) -> Vec<Vec3> {
    let n = t.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
                (x[1] - x[0]) * ((2.0 * h1 + h2) / (h1 * (h1 + h2)))
                    - (x[2] - x[1]) * (h1 / (h2 * (h1 + h2)))
            } else if i == n - 1 {
                let (h1, h2) = (t[n - 2] - t[n - 3], t[n - 1] - t[n - 2]);
                (x[n - 1] - x[n - 2]) * ((2.0 * h2 + h1) / (h2 * (h1 + h2)))
                    - (x[n - 2] - x[n - 3]) * (h2 / (h1 * (h1 + h2)))
            } else {
                let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
                (x[i + 1] - x[i]) * (h1 / (h2 * (h1 + h2))) + (x[i] - x[i - 1]) * (h2 / (h1 * (h1 + h2)))
            }
        })
        .collect()
}

/// Least-squares weights for `target_i ~ s_i * sum_j phi_j(s_i) w_j`, one solve per axis.
fn regress_forcing(basis: &PhaseBasis, phases: &[f64], targets: &[Vec3]) -> Result<Vec<Vec<f64>>> {
    let n = phases.len();
    let m = basis.len();
    let mut design = DMatrix::zeros(n, m);
    for (i, s) in phases.iter().enumerate() {
        for (j, a) in basis.activations(*s).into_iter().enumerate() {
            design[(i, j)] = s * a;
        }
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < RANK_TOLERANCE {
        return Err(Error::RankDeficient(format!(
            "{m} basis functions are not supported by {n} samples (condition {:.3e})",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    (0..3)
        .map(|ax| {
            let rhs = DVector::from_iterator(n, targets.iter().map(|v| v[ax]));
            let w = svd
                .solve(&rhs, 0.0)
                .map_err(|e| Error::RankDeficient(e.to_string()))?;
            Ok(w.iter().copied().collect())
        })
        .collect()
}

/// Fits a Cartesian DMP to a demonstration with the default gains.
pub fn fit_dmp(traj: &TimedTrajectory, n_basis: usize) -> Result<DmpModel> {
    fit_dmp_with(traj, n_basis, DEFAULT_STIFFNESS, DEFAULT_S_MIN)
}

pub fn fit_dmp_with(traj: &TimedTrajectory, n_basis: usize, stiffness: f64, s_min: f64) -> Result<DmpModel> {
    if n_basis < MIN_BASIS {
        return Err(Error::InvalidArgument(format!(
            "n_basis must be at least {MIN_BASIS}, got {n_basis}"
        )));
    }
    let n = traj.samples.len();
    let needed = 3 * n_basis;
    if n < needed {
        return Err(Error::TooFewSamples { needed, got: n });
    }
    let checked = TimedTrajectory::new(traj.frame, traj.samples.clone())?;
    let t0 = checked.samples[0].0;
    let times: Vec<f64> = checked.times().map(|t| t - t0).collect();
    let tau_demo = times[n - 1];
    let alpha = (1.0 / s_min).ln();
    let tau = tau_demo / alpha;
    let damping = 2.0 * stiffness.sqrt();
    let phases: Vec<f64> = times.iter().map(|t| (-t / tau).exp()).collect();

    let y0 = checked.samples[0].1;
    let g = checked.samples[n - 1].1;

    let pos: Vec<Vec3> = checked.positions().collect();
    let vel = gradient(&times, &pos);
    let acc = gradient(&times, &vel);
    let pos_targets: Vec<Vec3> = (0..n)
        .map(|i| acc[i] * (tau * tau) - (g.position - pos[i]) * stiffness + vel[i] * (damping * tau))
        .collect();

    // orientation: sign-continuous quaternions, world-frame angular rates
    let mut quats: Vec<Quat> = Vec::with_capacity(n);
    for (_, p) in &checked.samples {
        let q = match quats.last() {
            Some(prev) if prev.coords.dot(&p.orientation.coords) < 0.0 => {
                Quat::new_unchecked(-p.orientation.into_inner())
            }
            _ => p.orientation,
        };
        quats.push(q);
    }
    let omega: Vec<Vec3> = (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            quat_log(&quats[b], &quats[a]) / (times[b] - times[a])
        })
        .collect();
    let omega_dot = gradient(&times, &omega);
    let ori_targets: Vec<Vec3> = (0..n)
        .map(|i| {
            omega_dot[i] * (tau * tau) - quat_log(&g.orientation, &quats[i]) * stiffness
                + omega[i] * (damping * tau)
        })
        .collect();

    let basis = PhaseBasis::new(n_basis, s_min);
    let pos_weights = regress_forcing(&basis, &phases, &pos_targets)?;
    let ori_weights = regress_forcing(&basis, &phases, &ori_targets)?;

    Ok(DmpModel {
        n_basis,
        pos_weights,
        ori_weights,
        y0,
        g,
        tau_demo,
        limb_length: 1.0,
        spatial_scale: 1.0,
        stiffness,
        damping,
        s_min,
        frame: traj.frame,
    })
}

impl DmpModel {
    pub fn with_limb_length(mut self, limb_length: f64) -> Self {
        self.limb_length = limb_length;
        self
    }
}

/// Rescales a model to a patient's limb length and optionally relocates it.
///
/// Displacements from the start are multiplied by `L_patient / L_model`. The
/// goal follows the original chord unless `g_new` is given, in which case it
/// wins. Orientation amplitude is not scaled.
pub fn scale_dmp(model: &DmpModel, limb_length: f64, y0_new: Option<Pose>, g_new: Option<Pose>) -> Result<DmpModel> {
    if !(limb_length > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "limb length must be positive, got {limb_length}"
        )));
    }
    let lambda = limb_length / model.limb_length;
    let y0 = y0_new.unwrap_or(model.y0);
    let g = g_new.unwrap_or_else(|| {
        let chord = model.g.position - model.y0.position;
        Pose::new(
            model.g.position + (y0.position - model.y0.position) + chord * (lambda - 1.0),
            model.g.orientation,
        )
    });
    Ok(DmpModel {
        y0,
        g,
        limb_length,
        spatial_scale: model.spatial_scale * lambda,
        ..model.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub pose_ref: Pose,
    pub v_ref: Vec3,
    pub omega_ref: Vec3,
}

/// Transformation-system state, advanced monotonically in phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmpIntegrator {
    pub s: f64,
    pub y: Vec3,
    pub z: Vec3,
    #[serde(with = "crate::motion::quat_serde")]
    pub q: Quat,
    pub eta: Vec3,
}

impl DmpIntegrator {
    pub fn new(model: &DmpModel) -> Self {
        Self {
            s: 1.0,
            y: model.y0.position,
            z: Vec3::zeros(),
            q: model.y0.orientation,
            eta: Vec3::zeros(),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.y, self.q)
    }

    fn advance(&mut self, model: &DmpModel, basis: &PhaseBasis, s_target: f64) {
        if !(s_target < self.s) {
            return;
        }
        let tau = model.nominal_tau();
        let span = tau * (self.s / s_target).ln();
        let steps = (span / (tau * SUBSTEP_FRACTION)).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        let (k, d) = (model.stiffness, model.damping);
        let g = model.g.position;
        let s0 = self.s;
        let accel = |t: f64, y: &Vec3, z: &Vec3| -> Vec3 {
            let s = s0 * (-t / tau).exp();
            let f = DmpModel::forcing(&model.pos_weights, &basis.activations(s));
            ((g - y) * k - z * d + f * (s * model.spatial_scale)) / tau
        };
        for i in 0..steps {
            let t = i as f64 * h;
            // classic RK4 on (y, z)
            let (y, z) = (self.y, self.z);
            let k1y = z / tau;
            let k1z = accel(t, &y, &z);
            let y2 = y + k1y * (h / 2.0);
            let z2 = z + k1z * (h / 2.0);
            let k2y = z2 / tau;
            let k2z = accel(t + h / 2.0, &y2, &z2);
            let y3 = y + k2y * (h / 2.0);
            let z3 = z + k2z * (h / 2.0);
            let k3y = z3 / tau;
            let k3z = accel(t + h / 2.0, &y3, &z3);
            let y4 = y + k3y * h;
            let z4 = z + k3z * h;
            let k4y = z4 / tau;
            let k4z = accel(t + h, &y4, &z4);
            self.y = y + (k1y + k2y * 2.0 + k3y * 2.0 + k4y) * (h / 6.0);
            self.z = z + (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (h / 6.0);

            // semi-implicit Euler on the orientation channel, forcing at the midpoint
            let s_mid = s0 * (-(t + h / 2.0) / tau).exp();
            let fo = DmpModel::forcing(&model.ori_weights, &basis.activations(s_mid));
            let err = quat_log(&model.g.orientation, &self.q);
            self.eta += (err * k - self.eta * d + fo * s_mid) * (h / tau);
            self.q = quat_exp_step(&self.q, &(self.eta / tau), h);
        }
        self.s = s_target;
    }
}

/// Advances the transformation system to phase `s` and returns the reference
/// pose with physical velocities for the phase rate `s_dot`.
pub fn dmp_query(model: &DmpModel, integ: &mut DmpIntegrator, s: f64, s_dot: f64) -> ReferenceSample {
    let basis = model.basis();
    dmp_query_with(model, &basis, integ, s, s_dot)
}

pub fn dmp_query_with(
    model: &DmpModel,
    basis: &PhaseBasis,
    integ: &mut DmpIntegrator,
    s: f64,
    s_dot: f64,
) -> ReferenceSample {
    integ.advance(model, basis, s);
    // d(virtual time)/dt = -tau * s_dot / s; velocities are z / tau times that
    let speed = -s_dot / s;
    ReferenceSample {
        pose_ref: Pose::new(integ.y, canonicalize(integ.q)),
        v_ref: integ.z * speed,
        omega_ref: integ.eta * speed,
    }
}

/// Replays the model at a constant unit rate (demonstration timing), sampling
/// every `dt` until the phase reaches `s_min`.
pub fn rollout(model: &DmpModel, dt: f64) -> TimedTrajectory {
    let basis = model.basis();
    let mut canon = CanonicalState::new(model.nominal_tau(), 0.0, 1.0, model.s_min)
        .expect("validated model parameters");
    let mut integ = DmpIntegrator::new(model);
    let mut samples = Vec::new();
    let mut k = 0usize;
    loop {
        let r = dmp_query_with(model, &basis, &mut integ, canon.s, canon.phase_velocity(0.0));
        samples.push((k as f64 * dt, r.pose_ref));
        if canon.is_complete() {
            break;
        }
        canon = step_canonical(&canon, 0.0, dt);
        k += 1;
    }
    TimedTrajectory {
        frame: model.frame,
        samples,
    }
}
