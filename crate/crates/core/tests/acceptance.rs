//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rehab_core::body_frame::Side;
use rehab_core::dmp::{rollout, step_canonical, CanonicalState};
use rehab_core::metrics::{completion_time, max_deviation, reaction_time, rmse, trace_reach_ratio};
use rehab_core::motion::{TimedTrajectory, Vec3};
use rehab_core::pipeline::{body_frame_demo, learn_demonstration, LearnOptions};
use rehab_core::safety::{corridor_at, corridor_check, fit_gmm, ForceSample, GaussianComponent, GmrModel, SafetyMode};
use rehab_core::sim::{
    acquire_baseline, calibrate, run_scenario, tangent_frame_force, DirectiveKind, Scenario, SimTrace, Simulation,
};
use rehab_core::synth::{add_noise, exercise_stream, reach_arc, Subject};
use rehab_core::tunnel::{modality_preset, Modality, TunnelController};

type Outcome = Result<String, String>;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(scenarios().join(format!("{name}.toml")), &[]).expect("checked-in scenario")
}

fn run(name: &str) -> SimTrace {
    run_scenario(&scenario(name)).expect("scenario runs")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dmp_reproduction() -> Outcome {
    let subject = Subject::with_limb_length(0.6);
    let frames = exercise_stream(&subject, 12.0, 30.0, reach_arc(0.7, 0.5));
    let opts = LearnOptions {
        side: Side::Right,
        n_basis: 25,
        filter: None,
    };
    let demo = body_frame_demo(&frames, Side::Right, None).map_err(|e| e.to_string())?;
    let extent = demo
        .positions()
        .map(|p| (p - demo.samples[0].1.position).norm())
        .fold(0.0, f64::max);
    let (model, _) = learn_demonstration(&frames, &opts).map_err(|e| e.to_string())?;
    let err = rmse(&demo, &rollout(&model, 0.01));
    ensure(err < 5e-3, || format!("rmse {err:.6} m"))?;
    Ok(format!("{:.0} s arc, extent {extent:.3} m, rmse {:.3} mm", demo.duration(), err * 1e3))
}

fn anatomical_scaling() -> Outcome {
    let target = 0.47 / 0.61;
    let mut ratios = Vec::new();
    for (name, limb) in [("table2_055", 0.55), ("table2_053", 0.53), ("table2_050", 0.50)] {
        let r = trace_reach_ratio(&run(name), limb).map_err(|e| e.to_string())?;
        ensure((r - target).abs() <= 0.01 * target, || format!("{name}: R = {r:.5}"))?;
        ratios.push(r);
    }
    let r = trace_reach_ratio(&run("unscaled_050"), 0.50).map_err(|e| e.to_string())?;
    ensure((r - 0.94).abs() <= 0.005 * 0.94, || format!("unscaled: R = {r:.5}"))?;
    Ok(format!(
        "scaled R = {:.4}/{:.4}/{:.4}, unscaled R = {r:.4}",
        ratios[0], ratios[1], ratios[2]
    ))
}

fn posture_invariance() -> Outcome {
    let trajectories = |noise: Option<f64>| -> Result<Vec<TimedTrajectory>, String> {
        [0.0, -20.0, 15.0]
            .iter()
            .enumerate()
            .map(|(i, yaw)| {
                let mut subject = Subject::with_limb_length(0.6);
                subject.yaw_deg = *yaw;
                let mut frames = exercise_stream(&subject, 12.0, 30.0, reach_arc(0.8, 0.3));
                let filter = noise.map(|_| (15, 1.0));
                if let Some(std) = noise {
                    frames = add_noise(&frames, std, 40 + i as u64).map_err(|e| e.to_string())?;
                }
                body_frame_demo(&frames, Side::Right, filter).map_err(|e| e.to_string())
            })
            .collect()
    };
    let worst = |t: &[TimedTrajectory]| {
        let mut w: f64 = 0.0;
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                w = w.max(rmse(&t[i], &t[j]));
            }
        }
        w
    };
    let clean = worst(&trajectories(None)?);
    ensure(clean < 1e-9, || format!("noiseless rmse {clean:e}"))?;
    let noisy = worst(&trajectories(Some(0.005))?);
    ensure(noisy < 0.01, || format!("noisy rmse {noisy:.5} m"))?;
    Ok(format!("noiseless {clean:.1e} m, 5 mm noise {:.2} mm", noisy * 1e3))
}

fn phase_law() -> Outcome {
    let mut st = CanonicalState::new(1.0, 0.0, 1.0, 0.01).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        st = step_canonical(&st, 0.0, 0.01);
    }
    let e = (st.s - (-1.0f64).exp()).abs();
    ensure(e <= 1e-9, || format!("s(1 s) off by {e:e}"))?;

    let p = modality_preset(Modality::Assisted);
    let frozen = CanonicalState::new(1.0, p.gamma, p.epsilon, 0.01).map_err(|e| e.to_string())?;
    let frozen = CanonicalState { s: 0.37, ..frozen };
    for f_t in [-p.epsilon / p.gamma, -1.0, -40.0, -1e6] {
        let next = step_canonical(&frozen, f_t, 0.01);
        ensure(next.s.to_bits() == frozen.s.to_bits(), || format!("s moved under f_t = {f_t}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100_000 {
        let mut st = CanonicalState::new(
            rng.gen_range(0.2..5.0),
            rng.gen_range(0.0..0.2),
            rng.gen_range(0.0..1.0),
            0.01,
        )
        .map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let next = step_canonical(&st, rng.gen_range(-60.0..60.0), rng.gen_range(1e-4..0.1));
            ensure(next.s <= st.s && next.s > 0.0, || format!("phase rose: {} -> {}", st.s, next.s))?;
            st = next;
        }
    }
    Ok(format!("s(1 s) error {e:.1e}, frozen bitwise, 1e5 random sequences monotone"))
}

fn virtual_tunnel() -> Outcome {
    let trace = run("tunnel_push");
    let at = |t: f64| trace.records.iter().find(|r| r.time >= t - 1e-9).map(|r| r.deviation).unwrap_or(f64::NAN);
    let expected = 0.005 * 7.4 / 1.0;
    let steady = at(8.99);
    ensure((steady - expected).abs() <= 0.05 * expected, || format!("steady deviation {steady:.5} m"))?;
    let peak = max_deviation(&trace).map_err(|e| e.to_string())?;
    ensure((peak - expected).abs() <= 0.05 * expected, || format!("max deviation {peak:.5} m"))?;
    let late = trace
        .records
        .iter()
        .filter(|r| r.time >= 14.0)
        .map(|r| r.deviation)
        .fold(0.0, f64::max);
    ensure(late < 1e-3, || format!("deviation {late:.5} m five seconds after release"))?;

    // force split residual on every tick of the same push
    let sc = scenario("tunnel_push");
    let setup = sc.setup().map_err(|e| e.to_string())?;
    let ctrl = TunnelController::new(setup.model.clone(), setup.params).map_err(|e| e.to_string())?;
    let mut state = ctrl.initial_state(setup.tau).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut k = 0;
    while !state.canonical.is_complete() {
        let prepared = ctrl.prepare(&state);
        let f_ex = tangent_frame_force(&prepared.tangent, rng.gen_range(-20.0..20.0), 7.4, rng.gen_range(0.0..360.0));
        let (_, next, detail) = ctrl.finish(&state, &prepared, &f_ex, 0.01);
        let sp = detail.split;
        worst = worst.max((sp.u_t * sp.f_t + sp.f_o - f_ex).norm());
        state = next;
        k += 1;
    }
    ensure(worst < 1e-9, || format!("decomposition residual {worst:e}"))?;
    Ok(format!(
        "steady {:.2} mm, peak {:.2} mm, after 5 s {:.3} mm, residual {worst:.0e} over {k} ticks",
        steady * 1e3,
        peak * 1e3,
        late * 1e3
    ))
}

fn modality_timing() -> Outcome {
    let time_of = |name: &str| -> Result<f64, String> {
        completion_time(&run(name))
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("{name} did not complete"))
    };
    let assisted = time_of("assisted_effort")?;
    let resistive = time_of("resistive_effort")?;
    ensure(resistive >= 1.5 * assisted, || format!("assisted {assisted} s, resistive {resistive} s"))?;

    let sc = scenario("assisted_stop");
    let slope_limit = sc.modality.params().epsilon / sc.modality.tau.unwrap_or(1.0);
    let trace = run_scenario(&sc).map_err(|e| e.to_string())?;
    let stop: Vec<_> = trace.records.iter().filter(|r| r.time > 3.05 && r.time < 4.95).collect();
    ensure(stop.len() > 100, || "stop interval not reached".into())?;
    let mut steepest: f64 = 0.0;
    for w in stop.windows(2) {
        steepest = steepest.max((w[0].s.ln() - w[1].s.ln()) / (w[1].time - w[0].time));
    }
    ensure(steepest <= slope_limit * (1.0 + 1e-6), || format!("stop slope {steepest:e} > {slope_limit:e}"))?;
    let rise = stop.last().unwrap().progress - stop[0].progress;
    Ok(format!(
        "assisted {assisted:.2} s, resistive {resistive:.2} s ({:.1}x); stop slope {steepest:.1e} <= {slope_limit:.1e}, progress +{rise:.1e}",
        resistive / assisted
    ))
}

/// Conditional mean and sigma of f given s by trapezoid integration of the joint density.
fn quadrature(model: &GmrModel, s: f64) -> (f64, f64) {
    let lo = model.components.iter().map(|c| c.mean[1] - 14.0 * c.cov[1][1].sqrt()).fold(f64::INFINITY, f64::min);
    let hi = model.components.iter().map(|c| c.mean[1] + 14.0 * c.cov[1][1].sqrt()).fold(f64::NEG_INFINITY, f64::max);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let f = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let p = model.log_density(s, f).exp() * w;
        m0 += p;
        m1 += p * f;
        m2 += p * f * f;
    }
    let mean = m1 / m0;
    (mean, (m2 / m0 - mean * mean).max(0.0).sqrt())
}

fn gmr_correctness() -> Outcome {
    let comp = |w, m: [f64; 2], sd_s: f64, sd_f: f64, rho: f64| GaussianComponent {
        weight: w,
        mean: m,
        cov: [[sd_s * sd_s, rho * sd_s * sd_f], [rho * sd_s * sd_f, sd_f * sd_f]],
    };
    let models = [
        GmrModel {
            components: vec![comp(1.0, [0.5, 3.0], 0.25, 0.6, 0.5)],
        },
        GmrModel {
            components: vec![comp(0.4, [0.25, 2.0], 0.12, 0.3, 0.6), comp(0.6, [0.7, 5.0], 0.15, 0.5, -0.4)],
        },
        GmrModel {
            components: vec![
                comp(0.3, [0.15, 2.5], 0.08, 0.3, 0.2),
                comp(0.3, [0.5, 4.0], 0.1, 0.4, 0.7),
                comp(0.4, [0.85, 3.0], 0.09, 0.35, -0.5),
            ],
        },
    ];
    let mut worst: f64 = 0.0;
    for model in &models {
        for i in 0..200 {
            let s = 0.005 + 0.995 * i as f64 / 199.0;
            let p = model.predict(s);
            let (qm, qs) = quadrature(model, s);
            let rel = ((p.mean - qm) / qm).abs().max(((p.sigma - qs) / qs).abs());
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-6, || format!("gmr vs quadrature relative error {worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for (k, model) in models.iter().enumerate() {
        let samples: Vec<ForceSample> = (0..1500)
            .map(|_| {
                let mut pick: f64 = rng.gen();
                let c = model
                    .components
                    .iter()
                    .find(|c| {
                        pick -= c.weight;
                        pick < 0.0
                    })
                    .unwrap_or(&model.components[0]);
                let (a, b): (f64, f64) = (noise.sample(&mut rng), noise.sample(&mut rng));
                let sd_s = c.cov[0][0].sqrt();
                let sd_f = c.cov[1][1].sqrt();
                let rho = c.cov[0][1] / (sd_s * sd_f);
                ForceSample {
                    s: c.mean[0] + sd_s * a,
                    f_mag: c.mean[1] + sd_f * (rho * a + (1.0 - rho * rho).sqrt() * b),
                }
            })
            .collect();
        let fit = fit_gmm(&samples, k + 1, 3).map_err(|e| e.to_string())?;
        let ll = &fit.log_likelihood;
        ensure(fit.monotone && ll.windows(2).all(|w| w[1] >= w[0] - 1e-12), || format!("EM not monotone for K = {}", k + 1))?;
        if k == 0 {
            let n = samples.len() as f64;
            let ms = samples.iter().map(|p| p.s).sum::<f64>() / n;
            let mf = samples.iter().map(|p| p.f_mag).sum::<f64>() / n;
            let cov = |a: &dyn Fn(&ForceSample) -> f64, b: &dyn Fn(&ForceSample) -> f64| {
                samples.iter().map(|p| a(p) * b(p)).sum::<f64>() / n
            };
            let ds = |p: &ForceSample| p.s - ms;
            let df = |p: &ForceSample| p.f_mag - mf;
            let c = fit.model.components[0];
            let errs = [
                (c.mean[0] - ms) / ms,
                (c.mean[1] - mf) / mf,
                (c.cov[0][0] - cov(&ds, &ds)) / cov(&ds, &ds),
                (c.cov[0][1] - cov(&ds, &df)) / cov(&ds, &df),
                (c.cov[1][1] - cov(&df, &df)) / cov(&df, &df),
            ];
            let e = errs.iter().map(|e| e.abs()).fold(0.0, f64::max);
            ensure(e < 1e-10, || format!("K = 1 moments off by {e:e}"))?;
        }
    }
    Ok(format!("max relative error {worst:.1e} over 3 x 200 phases; EM monotone for K = 1, 2, 3; K = 1 exact"))
}

fn safety_reversal() -> Outcome {
    let sc = scenario("spasm");
    let (_, fit) = calibrate(&sc, None, sc.seed).map_err(|e| e.to_string())?;
    let mut setup = sc.setup().map_err(|e| e.to_string())?;
    let checked_in = &setup.safety.as_ref().unwrap().gmr;
    ensure(*checked_in == fit.model, || "checked-in corridor differs from a fresh calibration".into())?;
    setup.safety.as_mut().unwrap().gmr = fit.model.clone();
    let trace = Simulation::new(setup.clone()).map_err(|e| e.to_string())?.run();

    let first_violation = trace.records.iter().position(|r| !r.in_corridor).ok_or("no violation")?;
    let v = &trace.records[first_violation];
    ensure((v.progress - 0.4).abs() < 0.01, || format!("violation at progress {:.3}", v.progress))?;
    let latency = reaction_time(&trace).map_err(|e| e.to_string())?.ok_or("never reversed")?;
    ensure(latency <= 0.02 + 1e-9, || format!("reaction latency {latency} s"))?;

    let mut visited: Vec<Vec3> = Vec::new();
    let mut retraced = 0;
    for r in &trace.records {
        match r.directive {
            DirectiveKind::Forward if r.safety == SafetyMode::Forward => visited.push(r.pose_cmd.position),
            DirectiveKind::Reverse => {
                retraced += 1;
                let p = r.pose_cmd.position;
                ensure(visited.iter().any(|q| (q - p).norm() <= 1e-9), || format!("tick {} left the buffer", r.tick))?;
            }
            _ => {}
        }
    }
    ensure(retraced > 0, || "no reverse directives".into())?;
    let resumed = trace.records[first_violation..].iter().any(|r| r.directive == DirectiveKind::Forward);
    let done = completion_time(&trace).map_err(|e| e.to_string())?;
    ensure(resumed && done.is_some(), || "run did not resume and complete".into())?;

    // fresh in-distribution calibration streams against the corridor
    let mut fresh = sc.clone();
    fresh.seed += 1000;
    let samples = acquire_baseline(&fresh).map_err(|e| e.to_string())?;
    let cfg = setup.safety.as_ref().unwrap().config;
    let misses = samples
        .iter()
        .filter(|p| {
            let c = corridor_at(&fit.model, p.s, &cfg);
            !corridor_check(p.f_mag, c.mean, c.sigma, cfg.n_sigma)
        })
        .count();
    let rate = misses as f64 / samples.len() as f64;
    ensure(rate < 1e-3, || format!("in-distribution violation rate {rate}"))?;
    Ok(format!(
        "violation at progress {:.3}, latency {:.0} ms, {retraced} retrace ticks in buffer, completed at {:.2} s, false alarms {misses}/{}",
        v.progress,
        latency * 1e3,
        done.unwrap(),
        samples.len()
    ))
}

fn determinism() -> Outcome {
    let mut names: Vec<String> = std::fs::read_dir(scenarios())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in &names {
        let a = run(name).to_tsv_string();
        let b = run(name).to_tsv_string();
        ensure(a == b, || format!("{name}: traces differ"))?;
    }
    let golden = SimTrace::load(scenarios().join("golden/spasm.trace.tsv")).map_err(|e| e.to_string())?;
    let now = run("spasm");
    ensure(golden.records.len() == now.records.len(), || "golden trace length changed".into())?;
    let mut worst: f64 = 0.0;
    for (g, n) in golden.records.iter().zip(&now.records) {
        for (a, b) in [(g.pose_cmd, n.pose_cmd), (g.tcp, n.tcp), (g.pose_ref, n.pose_ref)] {
            worst = worst.max((a.position - b.position).norm());
        }
    }
    ensure(worst <= 1e-9, || format!("golden trace drift {worst:e} m"))?;
    let unique: HashSet<_> = names.iter().collect();
    Ok(format!("{} scenarios byte-identical across runs; golden drift {worst:.0e} m", unique.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 9] = [
        ("1 dmp reproduction", dmp_reproduction, 5),
        ("2 anatomical scaling", anatomical_scaling, 10),
        ("3 posture invariance", posture_invariance, 5),
        ("4 phase law", phase_law, 2),
        ("5 virtual tunnel", virtual_tunnel, 5),
        ("6 modality timing", modality_timing, 10),
        ("7 gmr correctness", gmr_correctness, 30),
        ("8 safety reversal", safety_reversal, 10),
        ("9 determinism", determinism, 20),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed > Duration::from_secs(budget) {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget} s"))
            } else {
                Ok(detail)
            }
        });
        match outcome {
            Ok(detail) => println!("PASS  {name:<22} {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<22} {why} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
