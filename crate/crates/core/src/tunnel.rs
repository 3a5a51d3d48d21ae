//! Decoupled hybrid controller: the measured force is split about the
//! reference tangent, the tangential part drives the phase and the orthogonal
//! part moves the command inside a stiff admittance tunnel around the path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dmp::{dmp_query_with, step_canonical, CanonicalState, DmpIntegrator, DmpModel, PhaseBasis, ReferenceSample};
use crate::error::{Error, Result};
use crate::motion::{Pose, Vec3};

/// Below this reference speed (m/s) the tangent is held from the previous tick.
pub const TANGENT_HOLD_SPEED: f64 = 1e-6;
/// The controller also holds the tangent while the nominal reference speed is
/// under this fraction of the demo's mean chord speed. The fitted forcing term
/// leaves a small residual at `s = 1` that can drift the reference backwards
/// for a moment; following it would read a forward push as resistance.
pub const TANGENT_HOLD_FRACTION: f64 = 0.05;
pub const CONTROL_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Passive,
    Assisted,
    Resistive,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Passive => "passive",
            Modality::Assisted => "assisted",
            Modality::Resistive => "resistive",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passive" => Ok(Modality::Passive),
            "assisted" => Ok(Modality::Assisted),
            "resistive" => Ok(Modality::Resistive),
            other => Err(Error::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityParams {
    pub mode: Modality,
    /// Force sensitivity of the phase, 1/N.
    pub gamma: f64,
    /// Baseline progression rate.
    pub epsilon: f64,
    /// Isotropic orthogonal admittance, (m/s)/N.
    pub a_stiff: f64,
    /// Recentering rate of the tunnel deviation, 1/s.
    pub k_return: f64,
}

pub fn modality_preset(mode: Modality) -> ModalityParams {
    let (gamma, epsilon) = match mode {
        Modality::Passive => (0.0, 1.0),
        Modality::Assisted => (0.08, 0.001),
        Modality::Resistive => (0.005, 0.001),
    };
    ModalityParams {
        mode,
        gamma,
        epsilon,
        a_stiff: 0.005,
        k_return: 1.0,
    }
}

impl ModalityParams {
    pub fn validate(&self) -> Result<()> {
        let gains = [self.gamma, self.epsilon, self.a_stiff, self.k_return];
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "modality gains must be finite and non-negative: {self:?}"
            )));
        }
        if self.mode == Modality::Passive && self.gamma != 0.0 {
            return Err(Error::InvalidArgument("passive mode requires gamma = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSplit {
    pub u_t: Vec3,
    pub f_t: f64,
    pub f_o: Vec3,
}

/// Projects `f_ex` onto the reference direction. The tangent is held from
/// `last_tangent` when the reference is (nearly) at rest.
pub fn decompose_force(f_ex: &Vec3, v_ref: &Vec3, last_tangent: &Vec3) -> ForceSplit {
    let speed = v_ref.norm();
    let u_t = if speed >= TANGENT_HOLD_SPEED {
        v_ref / speed
    } else {
        *last_tangent
    };
    split_about(f_ex, &u_t)
}

/// Splits `f_ex` about the unit tangent `u_t`.
pub fn split_about(f_ex: &Vec3, u_t: &Vec3) -> ForceSplit {
    let f_t = f_ex.dot(u_t);
    ForceSplit {
        u_t: *u_t,
        f_t,
        f_o: f_ex - u_t * f_t,
    }
}

/// `A_stiff f_o - k_return deviation`.
pub fn wall_velocity(f_o: &Vec3, params: &ModalityParams, deviation: &Vec3) -> Vec3 {
    f_o * params.a_stiff - deviation * params.k_return
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcpCommand {
    pub pose_cmd: Pose,
    pub v_cmd: Vec3,
    pub omega_cmd: Vec3,
}

impl TcpCommand {
    pub fn hold(pose: Pose) -> Self {
        Self {
            pose_cmd: pose,
            v_cmd: Vec3::zeros(),
            omega_cmd: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub canonical: CanonicalState,
    /// Orthogonal offset of the command from the reference path, m.
    pub deviation: Vec3,
    pub last_tangent: Vec3,
    pub tick: u64,
    pub reference: DmpIntegrator,
    /// Phase rate carried into the next reference query.
    pub phase_rate: f64,
}

impl ControllerState {
    /// Fresh state at `s = 1`. `tau` defaults to the model's nominal time
    /// constant, which replays the demonstration duration at unit rate.
    pub fn new(model: &DmpModel, params: &ModalityParams, tau: Option<f64>) -> Result<Self> {
        params.validate()?;
        let tau = tau.unwrap_or_else(|| model.nominal_tau());
        let canonical = CanonicalState::new(tau, params.gamma, params.epsilon, model.s_min)?;
        Ok(Self {
            phase_rate: canonical.phase_velocity(0.0),
            canonical,
            deviation: Vec3::zeros(),
            last_tangent: model.initial_tangent(),
            tick: 0,
            reference: DmpIntegrator::new(model),
        })
    }
}

/// Reference sample and tangent for the current phase, computed before the
/// interaction force of this tick is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prepared {
    pub reference: ReferenceSample,
    pub integrator: DmpIntegrator,
    pub tangent: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDetail {
    pub reference: ReferenceSample,
    pub split: ForceSplit,
    pub v_wall: Vec3,
}

/// A model bundled with its cached basis and the active modality.
#[derive(Debug, Clone)]
pub struct TunnelController {
    model: DmpModel,
    basis: PhaseBasis,
    hold_speed: f64,
    pub params: ModalityParams,
}

impl TunnelController {
    pub fn new(model: DmpModel, params: ModalityParams) -> Result<Self> {
        model.validate()?;
        params.validate()?;
        Ok(Self {
            basis: model.basis(),
            hold_speed: hold_speed(&model),
            model,
            params,
        })
    }

    pub fn model(&self) -> &DmpModel {
        &self.model
    }

    pub fn initial_state(&self, tau: Option<f64>) -> Result<ControllerState> {
        ControllerState::new(&self.model, &self.params, tau)
    }

    pub fn prepare(&self, state: &ControllerState) -> Prepared {
        let mut integrator = state.reference;
        let reference = dmp_query_with(
            &self.model,
            &self.basis,
            &mut integrator,
            state.canonical.s,
            state.phase_rate,
        );
        // judged at nominal timing so a stalled phase keeps the path direction
        let nominal = integrator.z / self.model.nominal_tau();
        let speed = nominal.norm();
        let tangent = if speed >= self.hold_speed {
            nominal / speed
        } else {
            state.last_tangent
        };
        Prepared {
            reference,
            integrator,
            tangent,
        }
    }

    pub fn finish(
        &self,
        state: &ControllerState,
        prepared: &Prepared,
        f_ex: &Vec3,
        dt: f64,
    ) -> (TcpCommand, ControllerState, StepDetail) {
        debug_assert!(dt > 0.0 && dt <= 0.1, "control period {dt} outside (0, 0.1]");
        let reference = prepared.reference;
        let split = split_about(f_ex, &prepared.tangent);

        let canonical = step_canonical(
            &CanonicalState {
                gamma: self.params.gamma,
                epsilon: self.params.epsilon,
                ..state.canonical
            },
            split.f_t,
            dt,
        );
        let phase_rate = canonical.phase_velocity(split.f_t);

        let v_wall = wall_velocity(&split.f_o, &self.params, &state.deviation);
        let mut deviation = state.deviation + v_wall * dt;
        deviation -= split.u_t * split.u_t.dot(&deviation);

        let command = TcpCommand {
            pose_cmd: reference.pose_ref.translated(&deviation),
            v_cmd: reference.v_ref + v_wall,
            omega_cmd: reference.omega_ref,
        };
        let next = ControllerState {
            canonical,
            deviation,
            last_tangent: split.u_t,
            tick: state.tick + 1,
            reference: prepared.integrator,
            phase_rate,
        };
        (
            command,
            next,
            StepDetail {
                reference,
                split,
                v_wall,
            },
        )
    }

    pub fn step(&self, state: &ControllerState, f_ex: &Vec3, dt: f64) -> (TcpCommand, ControllerState, StepDetail) {
        let prepared = self.prepare(state);
        self.finish(state, &prepared, f_ex, dt)
    }
}

fn hold_speed(model: &DmpModel) -> f64 {
    let chord_speed = (model.g.position - model.y0.position).norm() / model.tau_demo;
    (TANGENT_HOLD_FRACTION * chord_speed).max(TANGENT_HOLD_SPEED)
}

/// One full control tick: reference query, force split, phase update,
/// tunnel admittance and command composition.
pub fn control_step(
    model: &DmpModel,
    state: &ControllerState,
    params: &ModalityParams,
    f_ex: &Vec3,
    dt: f64,
) -> (TcpCommand, ControllerState) {
    let ctrl = TunnelController {
        basis: model.basis(),
        hold_speed: hold_speed(model),
        model: model.clone(),
        params: *params,
    };
    let (cmd, next, _) = ctrl.step(state, f_ex, dt);
    (cmd, next)
}
