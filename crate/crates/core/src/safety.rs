//! Per-patient force baseline and the reversal state machine.
//!
//! A two-dimensional Gaussian mixture over (phase, force magnitude) is fit
//! by expectation-maximization; Gaussian mixture regression then predicts the
//! expected force and its spread at any phase, giving an `n_sigma` corridor.
//! A violation makes the state machine retrace the buffered path backwards
//! until the force has been back inside the corridor for a dwell period.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::Pose;

pub const GMR_DOCUMENT_VERSION: u32 = 1;
pub const DEFAULT_COMPONENTS: usize = 5;
pub const DEFAULT_N_SIGMA: f64 = 5.0;
pub const DEFAULT_DWELL_TICKS: u32 = 30;
pub const SIGMA_FLOOR: f64 = 0.05;

const MIN_EIGENVALUE: f64 = 1e-8;
const PRUNE_WEIGHT: f64 = 1e-4;
const MAX_ITERATIONS: usize = 500;
const CONVERGENCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub s: f64,
    pub f_mag: f64,
}

impl ForceSample {
    fn point(&self) -> Vector2<f64> {
        Vector2::new(self.s, self.f_mag)
    }
}

/// Writes samples as a tab-separated two-column table.
pub fn write_samples(samples: &[ForceSample], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "s\tf_mag")?;
    for p in samples {
        writeln!(out, "{}\t{}", p.s, p.f_mag)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    /// (phase, force)
    pub mean: [f64; 2],
    /// Row-major symmetric covariance.
    pub cov: [[f64; 2]; 2],
}

impl GaussianComponent {
    fn cov_mat(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1])
    }

    fn log_density(&self, s: f64, f: f64) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let (ds, df) = (s - self.mean[0], f - self.mean[1]);
        let maha = (d * ds * ds - 2.0 * b * ds * df + a * df * df) / det;
        -0.5 * maha - 0.5 * det.ln() - LN_2PI
    }
}

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmrModel {
    pub components: Vec<GaussianComponent>,
}

#[derive(Serialize, Deserialize)]
struct GmrDocument {
    version: u32,
    kind: String,
    components: Vec<GaussianComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcePrediction {
    pub mean: f64,
    pub sigma: f64,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl GmrModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidArgument("mixture has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("component weights sum to {total}")));
        }
        for (i, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidArgument(format!("component {i} weight {}", c.weight)));
            }
            let m = c.cov_mat();
            if m[(0, 1)] != m[(1, 0)] {
                return Err(Error::InvalidArgument(format!("component {i} covariance not symmetric")));
            }
            let eig = SymmetricEigen::new(m).eigenvalues.min();
            if !(eig >= MIN_EIGENVALUE) {
                return Err(Error::InvalidArgument(format!(
                    "component {i} covariance not positive definite (min eigenvalue {eig:e})"
                )));
            }
        }
        Ok(())
    }

    /// Mixture log density of a (phase, force) point.
    pub fn log_density(&self, s: f64, f: f64) -> f64 {
        // streaming log-sum-exp, no allocation
        let (mut m, mut sum) = (f64::NEG_INFINITY, 0.0);
        for c in &self.components {
            let v = c.weight.ln() + c.log_density(s, f);
            if v > m {
                sum = sum * (m - v).exp() + 1.0;
                m = v;
            } else {
                sum += (v - m).exp();
            }
        }
        m + sum.ln()
    }

    /// Conditional mean and standard deviation of force given phase.
    pub fn predict(&self, s: f64) -> ForcePrediction {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let var_s = c.cov[0][0];
                let d = s - c.mean[0];
                c.weight.ln() - 0.5 * d * d / var_s - 0.5 * (2.0 * std::f64::consts::PI * var_s).ln()
            })
            .collect();
        let norm = log_sum_exp(&logs);
        let mut mean = 0.0;
        let mut second = 0.0;
        for (c, l) in self.components.iter().zip(&logs) {
            let h = (l - norm).exp();
            let gain = c.cov[1][0] / c.cov[0][0];
            let m = c.mean[1] + gain * (s - c.mean[0]);
            let v = c.cov[1][1] - gain * c.cov[0][1];
            mean += h * m;
            second += h * (v + m * m);
        }
        let var = (second - mean * mean).max(0.0);
        ForcePrediction {
            mean,
            sigma: var.sqrt(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GmrDocument {
            version: GMR_DOCUMENT_VERSION,
            kind: "gmr".into(),
            components: self.components.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GmrDocument = serde_json::from_str(text)?;
        if doc.version != GMR_DOCUMENT_VERSION {
            return Err(Error::Version {
                kind: "gmr model",
                found: doc.version,
                expected: GMR_DOCUMENT_VERSION,
            });
        }
        let model = GmrModel {
            components: doc.components,
        };
        model.validate()?;
        Ok(model)
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

/// `|f - mu| <= n_sigma * sigma`, boundary inclusive.
pub fn corridor_check(f_mag: f64, mu: f64, sigma: f64, n_sigma: f64) -> bool {
    (f_mag - mu).abs() <= n_sigma * sigma
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmrModel,
    /// Mean per-sample log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// False if the log-likelihood ever dropped between iterations without a pruning event.
    pub monotone: bool,
    pub warnings: Vec<String>,
}

fn regularize(c: Matrix2<f64>) -> Matrix2<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let min = SymmetricEigen::new(sym).eigenvalues.min();
    if min < MIN_EIGENVALUE {
        sym + Matrix2::identity() * (MIN_EIGENVALUE - min)
    } else {
        sym
    }
}

fn to_component(weight: f64, mean: Vector2<f64>, cov: Matrix2<f64>) -> GaussianComponent {
    GaussianComponent {
        weight,
        mean: [mean[0], mean[1]],
        cov: [[cov[(0, 0)], cov[(0, 1)]], [cov[(0, 1)], cov[(1, 1)]]],
    }
}

/// Deterministic k-means++ seeding on standardized coordinates followed by
/// hard assignment to initialize means, covariances and weights.
fn initialize(points: &[Vector2<f64>], k: usize, seed: u64) -> Vec<GaussianComponent> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let mut var = Vector2::zeros();
    for p in points {
        var += (p - mean).component_mul(&(p - mean));
    }
    let scale = (var / n).map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let z: Vec<Vector2<f64>> = points.iter().map(|p| (p - mean).component_div(&scale)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![z[rng.gen_range(0..z.len())]];
    let mut d2: Vec<f64> = z.iter().map(|p| (p - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.gen_range(0..z.len())
        };
        centers.push(z[next]);
        for (d, p) in d2.iter_mut().zip(&z) {
            *d = d.min((p - z[next]).norm_squared());
        }
    }

    let mut global_cov = Matrix2::zeros();
    for p in points {
        global_cov += (p - mean) * (p - mean).transpose();
    }
    global_cov /= n;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, p) in z.iter().enumerate() {
        let best = (0..k)
            .min_by(|a, b| (p - centers[*a]).norm_squared().total_cmp(&(p - centers[*b]).norm_squared()))
            .unwrap();
        members[best].push(i);
    }
    // sparse clusters count as one sample and borrow a shrunk global covariance
    let total: f64 = members.iter().map(|m| m.len().max(1) as f64).sum();
    members
        .iter()
        .zip(&centers)
        .map(|(idx, c)| {
            let weight = idx.len().max(1) as f64 / total;
            if idx.len() < 3 {
                let m = mean + c.component_mul(&scale);
                return to_component(weight, m, regularize(global_cov * 0.1));
            }
            let cnt = idx.len() as f64;
            let m = idx.iter().map(|i| points[*i]).sum::<Vector2<f64>>() / cnt;
            let mut cov = Matrix2::zeros();
            for i in idx {
                let d = points[*i] - m;
                cov += d * d.transpose();
            }
            to_component(weight, m, regularize(cov / cnt))
        })
        .collect()
}

/// Fits a `k`-component mixture by EM. Components whose weight falls below
/// 1e-4 are pruned and reported in `warnings`.
pub fn fit_gmm(samples: &[ForceSample], k: usize, seed: u64) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("component count must be at least 1".into()));
    }
    if samples.len() < 10 * k {
        return Err(Error::TooFewSamples {
            needed: 10 * k,
            got: samples.len(),
        });
    }
    if samples.iter().any(|p| !(p.s.is_finite() && p.f_mag.is_finite())) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let points: Vec<Vector2<f64>> = samples.iter().map(ForceSample::point).collect();
    let n = points.len();
    let mut comps = initialize(&points, k, seed);
    let mut history: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    let mut monotone = true;
    let mut pruned_last = false;
    let mut converged = false;
    let mut resp = vec![0.0; n * k];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let kc = comps.len();
        // E-step
        let mut ll = 0.0;
        let mut row = vec![0.0; kc];
        for (i, x) in points.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                row[j] = c.weight.ln() + c.log_density(x[0], x[1]);
            }
            let lse = log_sum_exp(&row);
            ll += lse;
            for j in 0..kc {
                resp[i * kc + j] = (row[j] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if let Some(prev) = history.last().copied() {
            if !pruned_last && ll < prev - 1e-12 * prev.abs().max(1.0) {
                monotone = false;
            }
            if !pruned_last && (ll - prev).abs() < CONVERGENCE {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        // M-step
        let mut next = Vec::with_capacity(kc);
        for j in 0..kc {
            let nk: f64 = (0..n).map(|i| resp[i * kc + j]).sum();
            if nk <= 0.0 {
                next.push(GaussianComponent { weight: 0.0, ..comps[j] });
                continue;
            }
            let (mut ms, mut mf) = (0.0, 0.0);
            for (i, p) in points.iter().enumerate() {
                ms += p[0] * resp[i * kc + j];
                mf += p[1] * resp[i * kc + j];
            }
            let (ms, mf) = (ms / nk, mf / nk);
            let (mut css, mut csf, mut cff) = (0.0, 0.0, 0.0);
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * kc + j];
                let (ds, df) = (p[0] - ms, p[1] - mf);
                css += r * ds * ds;
                csf += r * ds * df;
                cff += r * df * df;
            }
            let cov = Matrix2::new(css, csf, csf, cff) / nk;
            next.push(to_component(nk / n as f64, Vector2::new(ms, mf), regularize(cov)));
        }
        let before = next.len();
        next.retain(|c| c.weight >= PRUNE_WEIGHT);
        pruned_last = next.len() < before;
        if pruned_last {
            let msg = format!(
                "pruned {} degenerate component(s) at iteration {iterations}; K = {}",
                before - next.len(),
                next.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            let total: f64 = next.iter().map(|c| c.weight).sum();
            next.iter_mut().for_each(|c| c.weight /= total);
        }
        if next.is_empty() {
            return Err(Error::InvalidArgument("all mixture components degenerated".into()));
        }
        comps = next;
    }
    debug_assert!(monotone, "EM log-likelihood decreased");
    // keep sum(weights) == 1 tight after floating drift
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= total);
    let model = GmrModel { components: comps };
    model.validate()?;
    Ok(GmmFit {
        model,
        log_likelihood: history,
        iterations,
        converged,
        monotone,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SafetyMode {
    Forward,
    Reversing,
    HoldAtStart,
}

impl SafetyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SafetyMode::Forward => "FORWARD",
            SafetyMode::Reversing => "REVERSING",
            SafetyMode::HoldAtStart => "HOLD_AT_START",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Directive {
    Forward,
    ReverseTo(Pose),
    Hold,
}

/// A traversed point: its phase, the commanded pose, and whatever the caller
/// needs to resume from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry<R> {
    pub s: f64,
    pub pose: Pose,
    pub resume: R,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyConfig {
    pub n_sigma: f64,
    pub dwell_ticks: u32,
    pub sigma_floor: f64,
    /// Phase time constant for retracing; the passive-mode `tau`.
    pub reversal_tau: f64,
}

impl SafetyConfig {
    pub fn new(reversal_tau: f64) -> Self {
        Self {
            n_sigma: DEFAULT_N_SIGMA,
            dwell_ticks: DEFAULT_DWELL_TICKS,
            sigma_floor: SIGMA_FLOOR,
            reversal_tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_sigma > 0.0 && self.sigma_floor >= 0.0 && self.reversal_tau > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid safety settings {self:?}")));
        }
        Ok(())
    }
}

/// Corridor at phase `s`: GMR prediction with the sigma floor applied.
pub fn corridor_at(model: &GmrModel, s: f64, cfg: &SafetyConfig) -> ForcePrediction {
    let p = model.predict(s);
    ForcePrediction {
        mean: p.mean,
        sigma: p.sigma.max(cfg.sigma_floor),
    }
}

#[derive(Debug, Clone)]
pub struct SafetyState<R> {
    pub mode: SafetyMode,
    pub config: SafetyConfig,
    /// Traversed points, phase decreasing from front to back.
    buffer: Vec<PathEntry<R>>,
    anchor: Option<PathEntry<R>>,
    reverse_phase: f64,
    calm_ticks: u32,
}

impl<R: Clone> SafetyState<R> {
    pub fn new(config: SafetyConfig) -> Self {
        Self {
            mode: SafetyMode::Forward,
            config,
            buffer: Vec::new(),
            anchor: None,
            reverse_phase: 0.0,
            calm_ticks: 0,
        }
    }

    pub fn buffer(&self) -> &[PathEntry<R>] {
        &self.buffer
    }

    /// The buffered point the machine currently holds or retraces through.
    pub fn anchor(&self) -> Option<&PathEntry<R>> {
        self.anchor.as_ref()
    }

    /// Starts a new repetition with an empty buffer.
    pub fn reset(&mut self) {
        *self = Self::new(self.config);
    }

    /// Advances the machine one tick. `current` is appended while moving
    /// forward inside the corridor and ignored otherwise. When the returned
    /// directive is `Forward` after a reversal, [`anchor`](Self::anchor) holds
    /// the point to resume from.
    pub fn step(&mut self, in_corridor: bool, current: Option<PathEntry<R>>, dt: f64) -> Directive {
        match self.mode {
            SafetyMode::Forward => {
                if in_corridor {
                    if let Some(entry) = current {
                        debug_assert!(self.buffer.last().is_none_or(|b| entry.s <= b.s));
                        self.buffer.push(entry);
                    }
                    self.anchor = None;
                    return Directive::Forward;
                }
                self.calm_ticks = 0;
                match self.buffer.pop() {
                    Some(prev) => {
                        self.reverse_phase = prev.s;
                        let pose = prev.pose;
                        self.anchor = Some(prev);
                        self.mode = SafetyMode::Reversing;
                        Directive::ReverseTo(pose)
                    }
                    None => {
                        self.mode = SafetyMode::HoldAtStart;
                        if let Some(entry) = current {
                            // nothing traversed yet: hold where we are
                            self.anchor = Some(entry);
                        }
                        Directive::Hold
                    }
                }
            }
            SafetyMode::Reversing => {
                if self.settle(in_corridor) {
                    return Directive::Forward;
                }
                self.reverse_phase *= (dt / self.config.reversal_tau).exp();
                while self.buffer.last().is_some_and(|b| b.s <= self.reverse_phase) {
                    self.anchor = self.buffer.pop();
                }
                if self.buffer.is_empty() {
                    self.mode = SafetyMode::HoldAtStart;
                    return Directive::Hold;
                }
                match &self.anchor {
                    Some(a) => Directive::ReverseTo(a.pose),
                    None => Directive::Hold,
                }
            }
            SafetyMode::HoldAtStart => {
                if self.settle(in_corridor) {
                    Directive::Forward
                } else {
                    Directive::Hold
                }
            }
        }
    }

    fn settle(&mut self, in_corridor: bool) -> bool {
        if in_corridor {
            self.calm_ticks += 1;
        } else {
            self.calm_ticks = 0;
        }
        if self.calm_ticks >= self.config.dwell_ticks {
            self.mode = SafetyMode::Forward;
            self.calm_ticks = 0;
            true
        } else {
            false
        }
    }
}
