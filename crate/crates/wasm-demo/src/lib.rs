//! Three small views onto the controller for a static web page: how the phase
//! advances under a steady push, how the tunnel yields to a sideways push, and
//! where the force corridor lies along the exercise.

use rehab_core::dmp::{progress_of, step_canonical, CanonicalState, DmpModel};
use rehab_core::motion::Vec3;
use rehab_core::safety::{corridor_at, corridor_check, GmrModel, SafetyConfig};
use rehab_core::sim::tangent_frame_force;
use rehab_core::tunnel::{modality_preset, Modality, TunnelController, CONTROL_DT};
use wasm_bindgen::prelude::*;

const REACH_MODEL: &str = include_str!("../../../scenarios/data/reach_arc.dmp.json");
const SPASM_CORRIDOR: &str = include_str!("../../../scenarios/data/spasm.gmr.json");

/// Progress after each control tick under a constant tangential force.
/// Stops early once the phase reaches `s_min`.
#[wasm_bindgen]
pub fn phase_progress(epsilon: f64, gamma: f64, f_t: f64, tau: f64, duration: f64) -> Result<Vec<f64>, String> {
    let s_min = rehab_core::dmp::DEFAULT_S_MIN;
    let mut state = CanonicalState::new(tau, gamma, epsilon, s_min).map_err(|e| e.to_string())?;
    let ticks = (duration.max(0.0) / CONTROL_DT).round() as usize;
    let mut out = Vec::with_capacity(ticks + 1);
    out.push(0.0);
    for _ in 0..ticks {
        state = step_canonical(&state, f_t, CONTROL_DT);
        out.push(progress_of(state.s, s_min));
        if state.is_complete() {
            break;
        }
    }
    Ok(out)
}

/// Deviation (mm) of the command from the reach path while a sideways push of
/// `push` newtons acts between `from` and `to` seconds. Runs in passive mode
/// so the phase clock is independent of the push.
#[wasm_bindgen]
pub fn tunnel_deviation(
    push: f64,
    angle_deg: f64,
    a_stiff: f64,
    k_return: f64,
    from: f64,
    to: f64,
    duration: f64,
) -> Result<Vec<f64>, String> {
    let model = DmpModel::from_json(REACH_MODEL).map_err(|e| e.to_string())?;
    let mut params = modality_preset(Modality::Passive);
    params.a_stiff = a_stiff;
    params.k_return = k_return;
    let ctrl = TunnelController::new(model, params).map_err(|e| e.to_string())?;
    let mut state = ctrl.initial_state(None).map_err(|e| e.to_string())?;
    let ticks = (duration.max(0.0) / CONTROL_DT).round() as usize;
    let mut out = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = k as f64 * CONTROL_DT;
        let prepared = ctrl.prepare(&state);
        let f = if t >= from && t < to {
            tangent_frame_force(&prepared.tangent, 0.0, push, angle_deg)
        } else {
            Vec3::zeros()
        };
        let (_, next, _) = ctrl.finish(&state, &prepared, &f, CONTROL_DT);
        state = next;
        out.push(state.deviation.norm() * 1e3);
    }
    Ok(out)
}

/// A force corridor loaded from a mixture document.
#[wasm_bindgen]
pub struct Corridor {
    model: GmrModel,
    cfg: SafetyConfig,
}

#[wasm_bindgen]
impl Corridor {
    /// Parses a mixture document; an empty string loads the bundled spasm
    /// calibration.
    #[wasm_bindgen(constructor)]
    pub fn new(json: &str, n_sigma: f64) -> Result<Corridor, String> {
        let text = if json.trim().is_empty() { SPASM_CORRIDOR } else { json };
        let model = GmrModel::from_json(text).map_err(|e| e.to_string())?;
        let mut cfg = SafetyConfig::new(1.0);
        cfg.n_sigma = n_sigma;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(Corridor { model, cfg })
    }

    pub fn components(&self) -> usize {
        self.model.k()
    }

    /// `points` rows of `[progress, mu, lower, upper]`, flattened, from the
    /// start of the exercise (`s = 1`) to its end (`s = s_min`).
    pub fn band(&self, points: usize) -> Vec<f64> {
        let s_min = rehab_core::dmp::DEFAULT_S_MIN;
        let n = points.max(2);
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            let p = i as f64 / (n - 1) as f64;
            let s = s_min.powf(p);
            let c = corridor_at(&self.model, s, &self.cfg);
            let half = self.cfg.n_sigma * c.sigma;
            out.extend([p, c.mean, c.mean - half, c.mean + half]);
        }
        out
    }

    /// Whether a force magnitude at the given progress lies inside the band.
    pub fn contains(&self, progress: f64, force: f64) -> bool {
        let s = rehab_core::dmp::DEFAULT_S_MIN.powf(progress.clamp(0.0, 1.0));
        let c = corridor_at(&self.model, s, &self.cfg);
        corridor_check(force, c.mean, c.sigma, self.cfg.n_sigma)
    }
}
