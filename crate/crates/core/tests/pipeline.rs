use std::path::PathBuf;

use rehab_core::body_frame::{load_keypoint_stream, Side};
use rehab_core::dmp::DmpModel;
use rehab_core::metrics::rom;
use rehab_core::pipeline::{learn_demonstration, LearnOptions};
use rehab_core::Error;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/data").join(name)
}

fn opts() -> LearnOptions {
    LearnOptions {
        side: Side::Right,
        n_basis: 25,
        filter: None,
    }
}

#[test]
fn checked_in_model_is_reproducible() {
    let frames = load_keypoint_stream(data("reach_arc.keypoints.jsonl")).unwrap();
    let (model, report) = learn_demonstration(&frames, &opts()).unwrap();
    let stored = std::fs::read_to_string(data("reach_arc.dmp.json")).unwrap();
    assert_eq!(model.to_json().unwrap() + "\n", stored);
    assert_eq!(DmpModel::from_json(&stored).unwrap(), model);
    assert!((report.limb_length - 0.61).abs() < 1e-9);
    assert!((report.path_length - 0.47).abs() < 1e-4);
}

#[test]
fn elbow_flexion_fit_is_accurate() {
    let frames = load_keypoint_stream(data("elbow_flexion.keypoints.jsonl")).unwrap();
    let (_, report) = learn_demonstration(&frames, &opts()).unwrap();
    assert!(report.reproduction_rmse < 5e-3, "{report:?}");
    let smoothed = LearnOptions {
        filter: Some((5, 1.0)),
        ..opts()
    };
    let (_, report) = learn_demonstration(&frames, &smoothed).unwrap();
    assert!(report.reproduction_rmse < 5e-3, "{report:?}");
}

#[test]
fn goniometer_reads_elbow_range() {
    let frames = load_keypoint_stream(data("elbow_flexion.keypoints.jsonl")).unwrap();
    let r = rom(&frames, ["right_shoulder", "right_elbow", "right_wrist"]).unwrap();
    assert!((r - 2.0f64.to_degrees()).abs() < 1e-6, "{r}");
}

#[test]
fn missing_hip_is_reported_with_frame() {
    let frames = load_keypoint_stream(data("missing_hip.keypoints.jsonl"));
    match frames {
        Err(Error::MissingLandmark { frame, landmark }) => {
            assert_eq!(frame, 57);
            assert_eq!(landmark, "right_hip");
        }
        other => panic!("unexpected {other:?}"),
    }
}
