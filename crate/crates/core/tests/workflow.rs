use otcil::checkpoint;
use otcil::corpus::{generate_synthetic, load_bundle, write_bundle, SyntheticSpec};
use otcil::evaluator::{read_report, write_reports, Mode, REPORT_JSON};
use otcil::pipeline::{run, RunOptions};
use otcil::semantics::{attribute_requests, build_visual_sample_sets, emit_attribute_manifest, AttributeRequest};
use otcil::trainer::TrainerConfig;
use tempfile::TempDir;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 8,
        per_class: 8,
        dim: 8,
        patches: 6,
        attributes_per_class: 3,
        noise_scale: 0.3,
    }
}

fn options() -> RunOptions {
    RunOptions {
        trainer: TrainerConfig {
            epochs: 2,
            batch_size: 16,
            k: 3,
            n: 2,
            ..TrainerConfig::default()
        },
        base_size: 4,
        increment: 2,
        mode: Mode::Full,
    }
}

#[test]
fn bundle_files_round_trip() {
    let dir = TempDir::new().unwrap();
    let bundle = generate_synthetic(&spec(), 3).unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    assert_eq!(load_bundle(dir.path()).unwrap(), bundle);

    let again = TempDir::new().unwrap();
    write_bundle(&generate_synthetic(&spec(), 3).unwrap(), again.path()).unwrap();
    for f in ["manifest.json", "samples.f32", "labels.u32", "attributes.f32"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn run_resumes_from_a_checkpoint_file() {
    let dir = TempDir::new().unwrap();
    let bundle_dir = dir.path().join("bundle");
    write_bundle(&generate_synthetic(&spec(), 3).unwrap(), &bundle_dir).unwrap();
    let bundle = load_bundle(&bundle_dir).unwrap();

    let ckpt = dir.path().join("session_1.bin");
    let full = run(&bundle, &options(), None, |state, log| {
        if log.session == 1 {
            checkpoint::save(&ckpt, state, b"opts")?;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(full.schedule.sessions.iter().map(Vec::len).collect::<Vec<_>>(), [4, 2, 2]);

    let (state, meta) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(meta, b"opts");
    assert_eq!(state.sessions_trained(), 1);
    let resumed = run(&bundle, &options(), Some(state), |_, _| Ok(())).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.report, full.report);

    write_reports(dir.path(), &full.report, &full.matrix).unwrap();
    let (report, matrix) = read_report(dir.path().join(REPORT_JSON)).unwrap();
    assert_eq!(report, full.report);
    assert_eq!(matrix, full.matrix);
}

#[test]
fn attribute_requests_file_matches_in_memory_requests() {
    let dir = TempDir::new().unwrap();
    let bundle = generate_synthetic(&spec(), 5).unwrap();
    let (train, _) = bundle.train_test_split(1993);
    let sets = build_visual_sample_sets(&bundle, &train, &bundle.class_ids(), 2).unwrap();
    let path = dir.path().join("attribute_requests.json");
    emit_attribute_manifest(&sets, &bundle, &path).unwrap();
    let parsed: Vec<AttributeRequest> = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(parsed, attribute_requests(&sets, &bundle).unwrap());
    assert_eq!(parsed.len(), 8);
    for (request, set) in parsed.iter().zip(&sets) {
        assert_eq!(request.image_ids[0], set.representative_id);
        assert_eq!(request.image_ids.len(), 3);
        assert!(request.prompt.contains(&request.class_name));
    }
}
