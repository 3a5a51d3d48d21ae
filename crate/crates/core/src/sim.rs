//! Deterministic closed-loop harness: kinematic plant, simulated patient,
//! scenario files and per-tick traces.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dmp::{progress_of, scale_dmp, DmpModel};
use crate::error::{Error, Result};
use crate::motion::{Pose, Quat, Vec3};
use crate::safety::{
    corridor_at, corridor_check, fit_gmm, Directive, ForceSample, GmmFit, GmrModel, PathEntry, SafetyConfig,
    SafetyMode, SafetyState, DEFAULT_COMPONENTS, DEFAULT_DWELL_TICKS, DEFAULT_N_SIGMA, SIGMA_FLOOR,
};
use crate::tunnel::{modality_preset, ControllerState, Modality, ModalityParams, TcpCommand, TunnelController, CONTROL_DT};

pub const SCENARIO_VERSION: u32 = 1;
pub const TRACE_VERSION: u32 = 1;
pub const DEFAULT_SERVO_TAU: f64 = 0.02;
pub const DEFAULT_HOLD_TIMEOUT_S: f64 = 10.0;
/// Patient and console forces are clamped to this magnitude per channel, N.
pub const FORCE_LIMIT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub tcp: Pose,
    pub velocity: Vec3,
    pub time: f64,
}

impl PlantState {
    pub fn at(tcp: Pose) -> Self {
        Self {
            tcp,
            velocity: Vec3::zeros(),
            time: 0.0,
        }
    }
}

/// First-order servo toward the commanded pose.
pub fn plant_step(state: &PlantState, cmd: &TcpCommand, dt: f64, servo_tau: f64) -> PlantState {
    let alpha = (dt / servo_tau).min(1.0);
    let position = state.tcp.position + (cmd.pose_cmd.position - state.tcp.position) * alpha;
    let orientation = if alpha >= 1.0 {
        cmd.pose_cmd.orientation
    } else {
        state
            .tcp
            .orientation
            .try_slerp(&cmd.pose_cmd.orientation, alpha, 1e-12)
            .unwrap_or(cmd.pose_cmd.orientation)
    };
    PlantState {
        tcp: Pose::new(position, orientation),
        velocity: (position - state.tcp.position) / dt,
        time: state.time + dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleBasis {
    Time,
    Progress,
}

/// A force held constant over `[start, end)` in time or progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSegment {
    #[serde(default = "default_basis")]
    pub basis: ScheduleBasis,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub tangential: f64,
    #[serde(default)]
    pub orthogonal: f64,
    /// Direction of the orthogonal force about the tangent, degrees from the upward normal.
    #[serde(default)]
    pub orthogonal_angle_deg: f64,
}

fn default_basis() -> ScheduleBasis {
    ScheduleBasis::Time
}

impl ForceSegment {
    fn active(&self, t: f64, progress: f64) -> bool {
        let x = match self.basis {
            ScheduleBasis::Time => t,
            ScheduleBasis::Progress => progress,
        };
        x >= self.start && x < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSpec {
    pub onset_progress: Option<f64>,
    pub onset_time: Option<f64>,
    pub duration: f64,
    #[serde(default)]
    pub tangential: f64,
    #[serde(default)]
    pub orthogonal: f64,
    #[serde(default)]
    pub orthogonal_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PatientModel {
    Scripted {
        /// Tangential force as a polynomial in the phase, lowest order first.
        #[serde(default)]
        tangential_poly: Vec<f64>,
        #[serde(default)]
        segments: Vec<ForceSegment>,
        #[serde(default)]
        noise_std: f64,
    },
    SpringDamperLimb {
        stiffness: f64,
        damping: f64,
        anchor: [f64; 3],
        #[serde(default)]
        noise_std: f64,
    },
    SpasmInjector {
        base: Box<PatientModel>,
        spike: SpikeSpec,
    },
}

impl Default for PatientModel {
    fn default() -> Self {
        PatientModel::Scripted {
            tangential_poly: Vec::new(),
            segments: Vec::new(),
            noise_std: 0.0,
        }
    }
}

impl PatientModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("patient: {msg}")));
        match self {
            PatientModel::Scripted {
                tangential_poly,
                segments,
                noise_std,
            } => {
                if tangential_poly.iter().any(|c| !c.is_finite()) || !(*noise_std >= 0.0 && noise_std.is_finite()) {
                    return bad("non-finite polynomial or noise".into());
                }
                for (i, a) in segments.iter().enumerate() {
                    if !(a.start < a.end) || ![a.tangential, a.orthogonal, a.orthogonal_angle_deg].iter().all(|v| v.is_finite()) {
                        return bad(format!("segment {i} is empty or non-finite"));
                    }
                    for (j, b) in segments.iter().enumerate().skip(i + 1) {
                        if a.basis == b.basis && a.start < b.end && b.start < a.end {
                            return bad(format!("segments {i} and {j} overlap"));
                        }
                    }
                }
                Ok(())
            }
            PatientModel::SpringDamperLimb {
                stiffness,
                damping,
                anchor,
                noise_std,
            } => {
                if !(*stiffness >= 0.0 && *damping >= 0.0 && *noise_std >= 0.0) || anchor.iter().any(|a| !a.is_finite()) {
                    return bad("stiffness, damping and noise must be non-negative and finite".into());
                }
                Ok(())
            }
            PatientModel::SpasmInjector { base, spike } => {
                if matches!(**base, PatientModel::SpasmInjector { .. }) {
                    return bad("nested spasm injectors".into());
                }
                base.validate()?;
                if spike.onset_progress.is_some() == spike.onset_time.is_some() {
                    return bad("spike needs exactly one of onset_progress, onset_time".into());
                }
                if !(spike.duration > 0.0) {
                    return bad("spike duration must be positive".into());
                }
                Ok(())
            }
        }
    }
}

/// Unit normals to `u`: `o1` leans toward up, `o2 = u x o1`.
///
/// The simulation runs in the model's body frame (y down), so up is -y and,
/// for a forward tangent, angles 0/90/180/270 deg point up/right/down/left.
pub fn orthogonal_basis(u: &Vec3) -> (Vec3, Vec3) {
    let up = -Vec3::y();
    let mut o1 = up - u * up.dot(u);
    if o1.norm() < 1e-9 {
        o1 = Vec3::z() - u * u.z;
    }
    let o1 = o1.normalize();
    (o1, u.cross(&o1))
}

/// Maps a tangent-frame force to the base frame.
pub fn tangent_frame_force(u: &Vec3, tangential: f64, orthogonal: f64, angle_deg: f64) -> Vec3 {
    let (o1, o2) = orthogonal_basis(u);
    let a = angle_deg.to_radians();
    u * tangential + (o1 * a.cos() + o2 * a.sin()) * orthogonal
}

/// What the patient sees at the start of a tick.
#[derive(Debug, Clone, Copy)]
pub struct PatientContext {
    pub time: f64,
    pub s: f64,
    pub progress: f64,
    pub tangent: Vec3,
    pub plant: PlantState,
}

/// A patient model with its noise stream and spike latch.
#[derive(Debug, Clone)]
pub struct Patient {
    pub model: PatientModel,
    rng: ChaCha8Rng,
    spike_start: Option<f64>,
}

impl Patient {
    pub fn new(model: PatientModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spike_start: None,
        }
    }

    pub fn spike_started(&self) -> Option<f64> {
        self.spike_start
    }

    pub fn force(&mut self, ctx: &PatientContext) -> Vec3 {
        let model = self.model.clone();
        self.force_of(&model, ctx)
    }

    fn noise(&mut self, std: f64) -> f64 {
        if std > 0.0 {
            Normal::new(0.0, std).expect("validated noise").sample(&mut self.rng)
        } else {
            0.0
        }
    }

    fn force_of(&mut self, model: &PatientModel, ctx: &PatientContext) -> Vec3 {
        match model {
            PatientModel::Scripted {
                tangential_poly,
                segments,
                noise_std,
            } => {
                let mut ft = tangential_poly.iter().rev().fold(0.0, |acc, c| acc * ctx.s + c);
                let mut fo = Vec3::zeros();
                for seg in segments.iter().filter(|g| g.active(ctx.time, ctx.progress)) {
                    ft += seg.tangential;
                    fo += tangent_frame_force(&ctx.tangent, 0.0, seg.orthogonal, seg.orthogonal_angle_deg);
                }
                let nt = self.noise(*noise_std);
                let no = self.noise(*noise_std);
                let (o1, _) = orthogonal_basis(&ctx.tangent);
                clamp_force(ctx.tangent * (ft + nt) + fo + o1 * no)
            }
            PatientModel::SpringDamperLimb {
                stiffness,
                damping,
                anchor,
                noise_std,
            } => {
                let anchor = Vec3::new(anchor[0], anchor[1], anchor[2]);
                let mut f = -(ctx.plant.tcp.position - anchor) * *stiffness - ctx.plant.velocity * *damping;
                for ax in 0..3 {
                    f[ax] += self.noise(*noise_std);
                }
                clamp_force(f)
            }
            PatientModel::SpasmInjector { base, spike } => {
                let f = self.force_of(base, ctx);
                if self.spike_start.is_none() {
                    let trigger = match (spike.onset_progress, spike.onset_time) {
                        (Some(p), _) => ctx.progress >= p,
                        (None, Some(t)) => ctx.time >= t,
                        _ => false,
                    };
                    if trigger {
                        self.spike_start = Some(ctx.time);
                    }
                }
                match self.spike_start {
                    Some(t0) if ctx.time < t0 + spike.duration - 1e-9 => clamp_force(
                        f + tangent_frame_force(&ctx.tangent, spike.tangential, spike.orthogonal, spike.orthogonal_angle_deg),
                    ),
                    _ => f,
                }
            }
        }
    }
}

fn clamp_force(f: Vec3) -> Vec3 {
    f.map(|v| v.clamp(-FORCE_LIMIT, FORCE_LIMIT))
}

/// A force supplied by an external source for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForceInput {
    /// Use the configured patient model.
    Patient,
    /// Tangent-frame force, as commanded from a console.
    TangentFrame {
        tangential: f64,
        orthogonal: f64,
        angle_deg: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectiveKind {
    Forward,
    Reverse,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Paused,
    Estop,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($variant => $text),+ }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(Error::InvalidArgument(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

text_enum!(DirectiveKind { DirectiveKind::Forward => "forward", DirectiveKind::Reverse => "reverse", DirectiveKind::Hold => "hold" });
text_enum!(RunState { RunState::Running => "running", RunState::Paused => "paused", RunState::Estop => "estop" });

impl FromStr for SafetyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FORWARD" => Ok(SafetyMode::Forward),
            "REVERSING" => Ok(SafetyMode::Reversing),
            "HOLD_AT_START" => Ok(SafetyMode::HoldAtStart),
            other => Err(Error::InvalidArgument(format!("unknown safety mode `{other}`"))),
        }
    }
}

/// One control tick. Controller quantities are those used during the tick;
/// `tcp` is the plant pose at its end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub time: f64,
    pub s: f64,
    pub progress: f64,
    pub modality: Modality,
    pub safety: SafetyMode,
    pub directive: DirectiveKind,
    pub run_state: RunState,
    pub in_corridor: bool,
    /// Corridor mean and sigma; NaN when safety is disabled.
    pub corridor_mu: f64,
    pub corridor_sigma: f64,
    pub f_ex: Vec3,
    pub f_t: f64,
    pub f_o_norm: f64,
    pub deviation: f64,
    pub pose_ref: Pose,
    pub pose_cmd: Pose,
    pub tcp: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    DurationLimit,
    HoldTimeout,
}

text_enum!(Outcome { Outcome::Completed => "completed", Outcome::DurationLimit => "duration-limit", Outcome::HoldTimeout => "hold-timeout" });

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct SafetySetup {
    pub gmr: GmrModel,
    pub config: SafetyConfig,
}

/// Everything a simulation needs, already loaded.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub name: String,
    pub model: DmpModel,
    pub params: ModalityParams,
    pub tau: Option<f64>,
    pub patient: PatientModel,
    pub safety: Option<SafetySetup>,
    pub dt: f64,
    pub duration_s: f64,
    pub hold_timeout_s: f64,
    pub servo_tau: f64,
    pub seed: u64,
    pub subject_limb_length: f64,
}

impl SimSetup {
    pub fn new(model: DmpModel, params: ModalityParams) -> Self {
        let limb = model.limb_length;
        Self {
            name: "unnamed".into(),
            model,
            params,
            tau: None,
            patient: PatientModel::default(),
            safety: None,
            dt: CONTROL_DT,
            duration_s: 60.0,
            hold_timeout_s: DEFAULT_HOLD_TIMEOUT_S,
            servo_tau: DEFAULT_SERVO_TAU,
            seed: 0,
            subject_limb_length: limb,
        }
    }
}

/// Closed-loop simulation owning controller, safety and plant state.
#[derive(Debug, Clone)]
pub struct Simulation {
    setup: SimSetup,
    controller: TunnelController,
    state: ControllerState,
    plant: PlantState,
    patient: Patient,
    safety: Option<SafetyState<ControllerState>>,
    last_cmd: TcpCommand,
    tick: u64,
    run_state: RunState,
    hold_since: Option<f64>,
}

impl Simulation {
    pub fn new(setup: SimSetup) -> Result<Self> {
        if !(setup.dt > 0.0 && setup.dt <= 0.1) {
            return Err(Error::Config(format!("dt {} outside (0, 0.1]", setup.dt)));
        }
        if !(setup.duration_s > 0.0) || !(setup.servo_tau > 0.0) || !(setup.hold_timeout_s > 0.0) {
            return Err(Error::Config("duration, servo tau and hold timeout must be positive".into()));
        }
        setup.patient.validate()?;
        if let Some(sf) = &setup.safety {
            sf.gmr.validate()?;
            sf.config.validate()?;
        }
        let controller = TunnelController::new(setup.model.clone(), setup.params).map_err(config)?;
        let state = controller.initial_state(setup.tau).map_err(config)?;
        let start = setup.model.y0;
        Ok(Self {
            patient: Patient::new(setup.patient.clone(), setup.seed),
            safety: setup.safety.as_ref().map(|sf| SafetyState::new(sf.config)),
            plant: PlantState::at(start),
            last_cmd: TcpCommand::hold(start),
            tick: 0,
            run_state: RunState::Running,
            hold_since: None,
            setup,
            controller,
            state,
        })
    }

    pub fn setup(&self) -> &SimSetup {
        &self.setup
    }

    pub fn controller_state(&self) -> &ControllerState {
        &self.state
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    pub fn params(&self) -> ModalityParams {
        self.controller.params
    }

    pub fn safety(&self) -> Option<&SafetyState<ControllerState>> {
        self.safety.as_ref()
    }

    pub fn run_state(&self) -> RunState {
        self.run_state
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.setup.dt
    }

    pub fn is_complete(&self) -> bool {
        self.state.canonical.is_complete()
    }

    pub fn set_modality(&mut self, params: ModalityParams) -> Result<()> {
        params.validate()?;
        self.controller.params = params;
        Ok(())
    }

    /// Halts motion until [`reset`](Self::reset); repeated calls are no-ops.
    pub fn estop(&mut self) {
        self.run_state = RunState::Estop;
    }

    pub fn pause(&mut self) {
        if self.run_state == RunState::Running {
            self.run_state = RunState::Paused;
        }
    }

    pub fn resume(&mut self) {
        if self.run_state == RunState::Paused {
            self.run_state = RunState::Running;
        }
    }

    /// Restarts the exercise from the start pose, keeping the current modality.
    pub fn reset(&mut self) -> Result<()> {
        let mut setup = self.setup.clone();
        setup.params = self.controller.params;
        let tick = self.tick;
        *self = Self::new(setup)?;
        self.tick = tick;
        Ok(())
    }

    fn corridor(&self, s: f64) -> (f64, f64) {
        match &self.setup.safety {
            Some(sf) => {
                let p = corridor_at(&sf.gmr, s, &sf.config);
                (p.mean, p.sigma)
            }
            None => (f64::NAN, f64::NAN),
        }
    }

    fn resolve_force(&mut self, input: ForceInput, ctx: &PatientContext) -> Vec3 {
        match input {
            ForceInput::Patient => self.patient.force(ctx),
            ForceInput::TangentFrame {
                tangential,
                orthogonal,
                angle_deg,
            } => clamp_force(tangent_frame_force(
                &ctx.tangent,
                tangential.clamp(-FORCE_LIMIT, FORCE_LIMIT),
                orthogonal.clamp(-FORCE_LIMIT, FORCE_LIMIT),
                angle_deg,
            )),
        }
    }

    /// Advances one control tick.
    pub fn step(&mut self, input: ForceInput) -> TraceRecord {
        let dt = self.setup.dt;
        let time = self.time();
        let mode = self.safety.as_ref().map_or(SafetyMode::Forward, |sf| sf.mode);
        let halted = self.run_state != RunState::Running;
        let rec = if halted {
            self.step_halted(time)
        } else if mode == SafetyMode::Forward && !self.is_complete() {
            self.step_forward(time, input)
        } else if mode == SafetyMode::Forward {
            self.step_finished(time)
        } else {
            self.step_retreat(time, input)
        };
        self.plant = plant_step(&self.plant, &self.last_cmd, dt, self.setup.servo_tau);
        self.tick += 1;
        TraceRecord {
            tcp: self.plant.tcp,
            ..rec
        }
    }

    fn base_record(&self, time: f64, s: f64) -> TraceRecord {
        TraceRecord {
            tick: self.tick,
            time,
            s,
            progress: progress_of(s, self.setup.model.s_min),
            modality: self.controller.params.mode,
            safety: self.safety.as_ref().map_or(SafetyMode::Forward, |sf| sf.mode),
            directive: DirectiveKind::Forward,
            run_state: self.run_state,
            in_corridor: true,
            corridor_mu: f64::NAN,
            corridor_sigma: f64::NAN,
            f_ex: Vec3::zeros(),
            f_t: 0.0,
            f_o_norm: 0.0,
            deviation: self.state.deviation.norm(),
            pose_ref: self.last_cmd.pose_cmd,
            pose_cmd: self.last_cmd.pose_cmd,
            tcp: self.plant.tcp,
        }
    }

    fn step_halted(&mut self, time: f64) -> TraceRecord {
        let hold = match self.run_state {
            RunState::Estop => self.plant.tcp,
            _ => self.last_cmd.pose_cmd,
        };
        self.last_cmd = TcpCommand::hold(hold);
        TraceRecord {
            directive: DirectiveKind::Hold,
            pose_ref: hold,
            pose_cmd: hold,
            ..self.base_record(time, self.state.canonical.s)
        }
    }

    fn step_finished(&mut self, time: f64) -> TraceRecord {
        self.last_cmd = TcpCommand::hold(self.last_cmd.pose_cmd);
        TraceRecord {
            directive: DirectiveKind::Hold,
            ..self.base_record(time, self.state.canonical.s)
        }
    }

    fn step_forward(&mut self, time: f64, input: ForceInput) -> TraceRecord {
        let dt = self.setup.dt;
        let s = self.state.canonical.s;
        let progress = progress_of(s, self.setup.model.s_min);
        let prepared = self.controller.prepare(&self.state);
        let ctx = PatientContext {
            time,
            s,
            progress,
            tangent: prepared.tangent,
            plant: self.plant,
        };
        let f_ex = self.resolve_force(input, &ctx);
        let (cmd, next, detail) = self.controller.finish(&self.state, &prepared, &f_ex, dt);
        let (mu, sigma) = self.corridor(s);
        let mut rec = TraceRecord {
            f_ex,
            f_t: detail.split.f_t,
            f_o_norm: detail.split.f_o.norm(),
            deviation: next.deviation.norm(),
            pose_ref: detail.reference.pose_ref,
            pose_cmd: cmd.pose_cmd,
            corridor_mu: mu,
            corridor_sigma: sigma,
            ..self.base_record(time, s)
        };
        let Some(safety) = self.safety.as_mut() else {
            self.state = next;
            self.last_cmd = cmd;
            return rec;
        };
        let n_sigma = safety.config.n_sigma;
        rec.in_corridor = corridor_check(f_ex.norm(), mu, sigma, n_sigma);
        let entry = PathEntry {
            s,
            pose: cmd.pose_cmd,
            resume: next,
        };
        match safety.step(rec.in_corridor, Some(entry), dt) {
            Directive::Forward => {
                self.state = next;
                self.last_cmd = cmd;
            }
            Directive::ReverseTo(pose) => {
                self.last_cmd = TcpCommand::hold(pose);
                rec.directive = DirectiveKind::Reverse;
                rec.pose_cmd = pose;
            }
            Directive::Hold => {
                self.last_cmd = TcpCommand::hold(self.last_cmd.pose_cmd);
                rec.directive = DirectiveKind::Hold;
                rec.pose_cmd = self.last_cmd.pose_cmd;
                self.hold_since.get_or_insert(time);
            }
        }
        rec.safety = safety.mode;
        rec
    }

    /// A tick while retracing or holding at the start.
    fn step_retreat(&mut self, time: f64, input: ForceInput) -> TraceRecord {
        let dt = self.setup.dt;
        let safety = self.safety.as_ref().expect("retreat requires safety");
        let s = safety.anchor().map_or(self.state.canonical.s, |a| a.s);
        let progress = progress_of(s, self.setup.model.s_min);
        let ctx = PatientContext {
            time,
            s,
            progress,
            tangent: self.state.last_tangent,
            plant: self.plant,
        };
        let f_ex = self.resolve_force(input, &ctx);
        let (mu, sigma) = self.corridor(s);
        let safety = self.safety.as_mut().expect("retreat requires safety");
        let in_corridor = corridor_check(f_ex.norm(), mu, sigma, safety.config.n_sigma);
        let directive = safety.step(in_corridor, None, dt);
        let f_t = f_ex.dot(&self.state.last_tangent);
        let (kind, pose) = match directive {
            Directive::Forward => {
                let anchor = safety.anchor().expect("resume needs an anchor").clone();
                self.state = anchor.resume;
                self.hold_since = None;
                (DirectiveKind::Forward, anchor.pose)
            }
            Directive::ReverseTo(p) => (DirectiveKind::Reverse, p),
            Directive::Hold => {
                self.hold_since.get_or_insert(time);
                let p = safety.anchor().map_or(self.last_cmd.pose_cmd, |a| a.pose);
                (DirectiveKind::Hold, p)
            }
        };
        let mode = safety.mode;
        self.last_cmd = TcpCommand::hold(pose);
        TraceRecord {
            safety: mode,
            directive: kind,
            in_corridor,
            corridor_mu: mu,
            corridor_sigma: sigma,
            f_ex,
            f_t,
            f_o_norm: (f_ex - self.state.last_tangent * f_t).norm(),
            pose_ref: pose,
            pose_cmd: pose,
            ..self.base_record(time, s)
        }
    }

    /// Seconds spent in the current hold at the start, if any.
    pub fn holding_for(&self) -> Option<f64> {
        match self.safety.as_ref().map(|s| s.mode) {
            Some(SafetyMode::HoldAtStart) => self.hold_since.map(|t0| self.time() - t0),
            _ => None,
        }
    }

    /// Metadata header for a trace recorded from this simulation.
    pub fn trace_meta(&self) -> BTreeMap<String, String> {
        let s = &self.setup;
        let p = self.controller.params;
        let mut meta = BTreeMap::new();
        meta.insert("version".into(), TRACE_VERSION.to_string());
        meta.insert("scenario".into(), s.name.clone());
        meta.insert("seed".into(), s.seed.to_string());
        meta.insert("dt".into(), s.dt.to_string());
        meta.insert("tau".into(), self.state.canonical.tau.to_string());
        meta.insert("modality".into(), p.mode.to_string());
        meta.insert("gamma".into(), p.gamma.to_string());
        meta.insert("epsilon".into(), p.epsilon.to_string());
        meta.insert("a_stiff".into(), p.a_stiff.to_string());
        meta.insert("k_return".into(), p.k_return.to_string());
        meta.insert("s_min".into(), s.model.s_min.to_string());
        meta.insert("model_limb_length".into(), s.model.limb_length.to_string());
        meta.insert("subject_limb_length".into(), s.subject_limb_length.to_string());
        if let Some(sf) = &s.safety {
            meta.insert("n_sigma".into(), sf.config.n_sigma.to_string());
        }
        meta
    }

    /// Runs until completion, the duration limit or a hold-at-start timeout.
    pub fn run(mut self) -> SimTrace {
        let mut meta = self.trace_meta();
        let max_ticks = (self.setup.duration_s / self.setup.dt).round() as u64;
        let mut records = Vec::new();
        let mut outcome = Outcome::DurationLimit;
        while self.tick < max_ticks {
            let rec = self.step(ForceInput::Patient);
            records.push(rec);
            if rec.progress >= 1.0 && rec.safety == SafetyMode::Forward {
                outcome = Outcome::Completed;
                break;
            }
            if self.holding_for().is_some_and(|h| h >= self.setup.hold_timeout_s) {
                outcome = Outcome::HoldTimeout;
                break;
            }
        }
        meta.insert("outcome".into(), outcome.to_string());
        SimTrace { meta, records }
    }
}

fn config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

const COLUMNS: &[&str] = &[
    "tick", "time", "s", "progress", "modality", "safety", "directive", "run_state", "in_corridor", "corridor_mu",
    "corridor_sigma", "f_x", "f_y", "f_z", "f_t", "f_o_norm", "deviation", "ref_x", "ref_y", "ref_z", "ref_qw",
    "ref_qx", "ref_qy", "ref_qz", "cmd_x", "cmd_y", "cmd_z", "cmd_qw", "cmd_qx", "cmd_qy", "cmd_qz", "tcp_x",
    "tcp_y", "tcp_z", "tcp_qw", "tcp_qx", "tcp_qy", "tcp_qz",
];

fn push_pose(row: &mut Vec<String>, p: &Pose) {
    let q = p.orientation.quaternion();
    for v in [p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k] {
        row.push(v.to_string());
    }
}

impl SimTrace {
    pub fn outcome(&self) -> Option<Outcome> {
        self.meta.get("outcome").and_then(|o| o.parse().ok())
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    /// Tab-separated export: `# key value` metadata lines, a header row and one row per tick.
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        for (k, v) in &self.meta {
            writeln!(out, "# {k} {v}")?;
        }
        writeln!(out, "{}", COLUMNS.join("\t"))?;
        for r in &self.records {
            let mut row: Vec<String> = vec![
                r.tick.to_string(),
                r.time.to_string(),
                r.s.to_string(),
                r.progress.to_string(),
                r.modality.to_string(),
                r.safety.as_str().into(),
                r.directive.to_string(),
                r.run_state.to_string(),
                (r.in_corridor as u8).to_string(),
                r.corridor_mu.to_string(),
                r.corridor_sigma.to_string(),
                r.f_ex.x.to_string(),
                r.f_ex.y.to_string(),
                r.f_ex.z.to_string(),
                r.f_t.to_string(),
                r.f_o_norm.to_string(),
                r.deviation.to_string(),
            ];
            push_pose(&mut row, &r.pose_ref);
            push_pose(&mut row, &r.pose_cmd);
            push_pose(&mut row, &r.tcp);
            writeln!(out, "{}", row.join("\t"))?;
        }
        Ok(())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_tsv(std::io::BufReader::new(file))
    }

    pub fn read_tsv(reader: impl BufRead) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut records = Vec::new();
        let mut header_seen = false;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            if !header_seen {
                if line.split('\t').collect::<Vec<_>>() != COLUMNS {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "unexpected trace header".into(),
                    });
                }
                header_seen = true;
                continue;
            }
            records.push(parse_row(&line).map_err(|message| Error::Parse { line: lineno, message })?);
        }
        if let Some(v) = meta.get("version") {
            let found: u32 = v.parse().unwrap_or(0);
            if found != TRACE_VERSION {
                return Err(Error::Version {
                    kind: "trace",
                    found,
                    expected: TRACE_VERSION,
                });
            }
        }
        Ok(SimTrace { meta, records })
    }
}

fn parse_row(line: &str) -> std::result::Result<TraceRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != COLUMNS.len() {
        return Err(format!("expected {} columns, found {}", COLUMNS.len(), cols.len()));
    }
    let num = |i: usize| -> std::result::Result<f64, String> {
        cols[i].parse::<f64>().map_err(|_| format!("column `{}`: bad number `{}`", COLUMNS[i], cols[i]))
    };
    let text = |i: usize| cols[i].to_string();
    let pose = |i: usize| -> std::result::Result<Pose, String> {
        let q = nalgebra::Quaternion::new(num(i + 3)?, num(i + 4)?, num(i + 5)?, num(i + 6)?);
        Ok(Pose {
            position: Vec3::new(num(i)?, num(i + 1)?, num(i + 2)?),
            orientation: Quat::new_unchecked(q),
        })
    };
    Ok(TraceRecord {
        tick: cols[0].parse().map_err(|_| format!("bad tick `{}`", cols[0]))?,
        time: num(1)?,
        s: num(2)?,
        progress: num(3)?,
        modality: text(4).parse().map_err(|e: Error| e.to_string())?,
        safety: text(5).parse().map_err(|e: Error| e.to_string())?,
        directive: text(6).parse().map_err(|e: Error| e.to_string())?,
        run_state: text(7).parse().map_err(|e: Error| e.to_string())?,
        in_corridor: cols[8] == "1",
        corridor_mu: num(9)?,
        corridor_sigma: num(10)?,
        f_ex: Vec3::new(num(11)?, num(12)?, num(13)?),
        f_t: num(14)?,
        f_o_norm: num(15)?,
        deviation: num(16)?,
        pose_ref: pose(17)?,
        pose_cmd: pose(24)?,
        tcp: pose(31)?,
    })
}

// ---------------------------------------------------------------------------
// Scenario files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmpSection {
    pub model: PathBuf,
    /// Rescale the model to this limb length before running.
    pub limb_length: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSection {
    pub limb_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySection {
    pub mode: Modality,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub a_stiff: Option<f64>,
    pub k_return: Option<f64>,
    pub tau: Option<f64>,
}

impl ModalitySection {
    pub fn params(&self) -> ModalityParams {
        let mut p = modality_preset(self.mode);
        p.gamma = self.gamma.unwrap_or(p.gamma);
        p.epsilon = self.epsilon.unwrap_or(p.epsilon);
        p.a_stiff = self.a_stiff.unwrap_or(p.a_stiff);
        p.k_return = self.k_return.unwrap_or(p.k_return);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySection {
    #[serde(default)]
    pub enabled: bool,
    pub gmr: Option<PathBuf>,
    #[serde(default = "default_n_sigma")]
    pub n_sigma: f64,
    #[serde(default = "default_dwell")]
    pub dwell_ticks: u32,
    #[serde(default = "default_floor")]
    pub sigma_floor: f64,
    #[serde(default = "default_hold_timeout")]
    pub hold_timeout_s: f64,
}

fn default_n_sigma() -> f64 {
    DEFAULT_N_SIGMA
}
fn default_dwell() -> u32 {
    DEFAULT_DWELL_TICKS
}
fn default_floor() -> f64 {
    SIGMA_FLOOR
}
fn default_hold_timeout() -> f64 {
    DEFAULT_HOLD_TIMEOUT_S
}

impl Default for SafetySection {
    fn default() -> Self {
        Self {
            enabled: false,
            gmr: None,
            n_sigma: DEFAULT_N_SIGMA,
            dwell_ticks: DEFAULT_DWELL_TICKS,
            sigma_floor: SIGMA_FLOOR,
            hold_timeout_s: DEFAULT_HOLD_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// The robot drives the calibration limb at the passive rate.
    Passive,
    /// The tangential axis is force-transparent; the limb drives the phase.
    Active,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub mode: CalibrationMode,
    #[serde(default = "default_reps")]
    pub repetitions: u32,
    #[serde(default = "default_components")]
    pub components: usize,
    pub patient: PatientModel,
}

fn default_reps() -> u32 {
    3
}
fn default_components() -> usize {
    DEFAULT_COMPONENTS
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub servo_tau: Option<f64>,
}

/// A versioned, self-contained experiment description. Relative file paths
/// are resolved against the directory of the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    pub dt: Option<f64>,
    pub dmp: DmpSection,
    #[serde(default)]
    pub subject: SubjectSection,
    pub modality: ModalitySection,
    #[serde(default)]
    pub patient: PatientModel,
    #[serde(default)]
    pub safety: SafetySection,
    pub calibration: Option<CalibrationSection>,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn toml_line(text: &str, err: &toml::de::Error) -> usize {
    err.span().map_or(0, |span| text[..span.start.min(text.len())].matches('\n').count() + 1)
}

/// Sets `dotted.key` in a TOML tree. The value is parsed as TOML, falling
/// back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}`: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| Error::Parse {
                line: toml_line(text, &e),
                message: e.message().to_string(),
            })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let version = value.get("version").and_then(|v| v.as_integer());
        match version {
            Some(v) if v == SCENARIO_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Version {
                    kind: "scenario",
                    found: v.max(0) as u32,
                    expected: SCENARIO_VERSION,
                })
            }
            None => return Err(Error::Config("scenario is missing `version`".into())),
        }
        let mut sc: Scenario = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| Error::Parse {
                line: toml_line(text, &e),
                message: e.message().to_string(),
            })?
        } else {
            value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?
        };
        sc.base_dir = base_dir.into();
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut sc = Self::parse(&text, base, overrides).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        if sc.name.is_empty() {
            sc.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt <= 0.1) {
                return Err(Error::Config(format!("dt {dt} outside (0, 0.1]")));
            }
        }
        self.modality.params().validate().map_err(config)?;
        if let Some(tau) = self.modality.tau {
            if !(tau > 0.0) {
                return Err(Error::Config(format!("modality.tau must be positive, got {tau}")));
            }
        }
        self.patient.validate()?;
        if self.safety.enabled && self.safety.gmr.is_none() {
            return Err(Error::Config("safety.enabled requires safety.gmr".into()));
        }
        if let Some(cal) = &self.calibration {
            cal.patient.validate()?;
            if cal.repetitions == 0 || cal.components == 0 {
                return Err(Error::Config("calibration repetitions and components must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The model after optional rescaling to `dmp.limb_length`.
    pub fn load_model(&self) -> Result<DmpModel> {
        let model = DmpModel::load(self.resolve(&self.dmp.model))?;
        match self.dmp.limb_length {
            Some(l) => scale_dmp(&model, l, None, None).map_err(config),
            None => Ok(model),
        }
    }

    pub fn safety_config(&self, model: &DmpModel) -> SafetyConfig {
        SafetyConfig {
            n_sigma: self.safety.n_sigma,
            dwell_ticks: self.safety.dwell_ticks,
            sigma_floor: self.safety.sigma_floor,
            reversal_tau: model.nominal_tau(),
        }
    }

    /// Loads every referenced file and builds the simulation inputs.
    pub fn setup(&self) -> Result<SimSetup> {
        let model = self.load_model()?;
        let safety = if self.safety.enabled {
            let path = self.resolve(self.safety.gmr.as_ref().expect("validated"));
            Some(SafetySetup {
                gmr: GmrModel::load(path)?,
                config: self.safety_config(&model),
            })
        } else {
            None
        };
        let mut setup = SimSetup::new(model, self.modality.params());
        setup.name = self.name.clone();
        setup.tau = self.modality.tau;
        setup.patient = self.patient.clone();
        setup.safety = safety;
        setup.dt = self.dt.unwrap_or(CONTROL_DT);
        setup.duration_s = self.duration_s;
        setup.hold_timeout_s = self.safety.hold_timeout_s;
        setup.servo_tau = self.plant.servo_tau.unwrap_or(DEFAULT_SERVO_TAU);
        setup.seed = self.seed;
        if let Some(l) = self.subject.limb_length.or(self.dmp.limb_length) {
            setup.subject_limb_length = l;
        }
        Ok(setup)
    }
}

/// Runs a scenario to completion. Configuration problems surface before the first tick.
pub fn run_scenario(sc: &Scenario) -> Result<SimTrace> {
    Ok(Simulation::new(sc.setup()?)?.run())
}

/// Records `(s, |f_ex|)` for every tick of the calibration runs, pooled over repetitions.
pub fn acquire_baseline(sc: &Scenario) -> Result<Vec<ForceSample>> {
    let cal = sc
        .calibration
        .as_ref()
        .ok_or_else(|| Error::Config("scenario has no [calibration] section".into()))?;
    let model = sc.load_model()?;
    let mut samples = Vec::new();
    for rep in 0..cal.repetitions {
        let params = match cal.mode {
            CalibrationMode::Passive => modality_preset(Modality::Passive),
            CalibrationMode::Active => ModalityParams {
                epsilon: 0.0,
                ..sc.modality.params()
            },
        };
        let mut setup = SimSetup::new(model.clone(), params);
        setup.tau = sc.modality.tau;
        setup.patient = cal.patient.clone();
        setup.dt = sc.dt.unwrap_or(CONTROL_DT);
        setup.duration_s = sc.duration_s;
        setup.seed = sc.seed.wrapping_add(rep as u64);
        let trace = Simulation::new(setup)?.run();
        let moved = trace.records.iter().any(|r| r.progress > 0.0);
        if !moved {
            return Err(Error::EmptyRollout(format!(
                "calibration repetition {rep} never left the start; the limb applies no tangential effort"
            )));
        }
        samples.extend(
            trace
                .records
                .iter()
                .filter(|r| r.progress < 1.0)
                .map(|r| ForceSample {
                    s: r.s,
                    f_mag: r.f_ex.norm(),
                }),
        );
    }
    if samples.is_empty() {
        return Err(Error::EmptyRollout("calibration produced no samples".into()));
    }
    Ok(samples)
}

/// Acquires a baseline and fits the corridor mixture.
pub fn calibrate(sc: &Scenario, components: Option<usize>, seed: u64) -> Result<(Vec<ForceSample>, GmmFit)> {
    let samples = acquire_baseline(sc)?;
    let k = components.unwrap_or_else(|| sc.calibration.as_ref().map_or(DEFAULT_COMPONENTS, |c| c.components));
    let fit = fit_gmm(&samples, k, seed)?;
    Ok((samples, fit))
}
