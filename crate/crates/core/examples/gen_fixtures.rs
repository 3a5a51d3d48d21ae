//! Regenerates the checked-in synthetic data under `scenarios/`.
//!
//! cargo run -p rehab-core --example gen_fixtures

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use rehab_core::body_frame::{write_keypoint_stream, Side, RIGHT_HIP};
use rehab_core::pipeline::{learn_demonstration, LearnOptions};
use rehab_core::sim::{calibrate, run_scenario, Scenario};
use rehab_core::synth::{elbow_flexion, exercise_stream, reach_arc, Subject};

fn main() -> rehab_core::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let data = root.join("data");
    std::fs::create_dir_all(&data).map_err(|e| rehab_core::Error::io(&data, e))?;
    let write = |name: &str, frames: &[_]| -> rehab_core::Result<()> {
        let path = data.join(name);
        let f = File::create(&path).map_err(|e| rehab_core::Error::io(&path, e))?;
        write_keypoint_stream(frames, BufWriter::new(f))
    };

    let demo_subject = Subject::with_limb_length(0.61);
    let reach = exercise_stream(&demo_subject, 12.0, 30.0, reach_arc(0.47 / 0.61, 0.35));
    write("reach_arc.keypoints.jsonl", &reach)?;

    let elbow_subject = Subject::with_limb_length(0.58);
    let elbow = exercise_stream(&elbow_subject, 10.0, 30.0, elbow_flexion(2.0));
    write("elbow_flexion.keypoints.jsonl", &elbow)?;

    let mut broken = elbow.clone();
    broken[57].keypoints.remove(RIGHT_HIP);
    write("missing_hip.keypoints.jsonl", &broken)?;

    let opts = LearnOptions {
        side: Side::Right,
        n_basis: 25,
        filter: None,
    };
    let (model, report) = learn_demonstration(&reach, &opts)?;
    println!("reach arc: {report:?}");
    model.save(data.join("reach_arc.dmp.json"))?;

    let spasm = Scenario::load(root.join("spasm.toml"), &[])?;
    let (_, fit) = calibrate(&spasm, None, spasm.seed)?;
    println!("calibration: K = {}, {} iterations", fit.model.k(), fit.iterations);
    fit.model.save(data.join("spasm.gmr.json"))?;

    let trace = run_scenario(&Scenario::load(root.join("spasm.toml"), &[])?)?;
    trace.save(root.join("golden/spasm.trace.tsv"))?;
    println!("golden: {} ticks, outcome {:?}", trace.records.len(), trace.outcome());
    Ok(())
}
