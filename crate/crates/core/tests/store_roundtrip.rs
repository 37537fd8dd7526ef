use dd_core::attention::OptConfig;
use dd_core::backend::toy::ToyBackend;
use dd_core::harness::RunStore;
use dd_core::placement::{run_placement_finetune, PlacementRequest};
use dd_core::{run_directed_diffusion, BoundingBox, DdError, DenoiseConfig, RegionDirective};

fn config() -> DenoiseConfig {
    DenoiseConfig {
        total_steps: 8,
        edit_steps: 3,
        seed: 11,
        opt: OptConfig {
            iterations: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn bear() -> Vec<RegionDirective> {
    vec![RegionDirective::new(BoundingBox::new(0.5, 1.0, 0.0, 0.5).unwrap(), vec![3], "bear").unwrap()]
}

#[test]
fn saved_runs_load_bit_exact() {
    let backend = ToyBackend::new();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    let rec = run_directed_diffusion(&backend, "a bear watching a flying bird", &bear(), &config()).unwrap();
    store.save(&rec).unwrap();
    let back = store.load(&rec.run_id).unwrap();
    assert_eq!(back.run_id, rec.run_id);
    assert!(back.same_content(&rec));

    let pf = run_placement_finetune(
        &backend,
        &rec,
        &PlacementRequest {
            source_run_id: rec.run_id.clone(),
            directive_label: "bear".into(),
            dx: -2,
            dy: 1,
            edit_steps: 4,
            threshold_fraction: 0.5,
        },
    )
    .unwrap();
    store.save(&pf).unwrap();
    assert!(store.load(&pf.run_id).unwrap().same_content(&pf));
    assert_eq!(store.list().unwrap(), vec![rec.run_id.clone(), pf.run_id.clone()]);

    let losses = store.losses_jsonl(&rec.run_id).unwrap();
    assert_eq!(losses.lines().count(), 3 * 3);
    assert!(losses.lines().next().unwrap().starts_with(r#"{"step":0,"iter":0,"loss":"#));
}

#[test]
fn store_errors() {
    let backend = ToyBackend::new();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    assert!(matches!(store.load("missing"), Err(DdError::NotFound(_))));
    assert!(matches!(store.load("../etc"), Err(DdError::NotFound(_))));
    let rec = run_directed_diffusion(&backend, "a bear", &[], &config()).unwrap();
    store.save(&rec).unwrap();
    assert!(matches!(store.save(&rec), Err(DdError::Duplicate(_))));

    let blob = dir.path().join("runs").join(&rec.run_id).join("latents.ddlt");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 10]).unwrap();
    let err = store.load(&rec.run_id).unwrap_err();
    assert!(matches!(err, DdError::Format { .. }));
    assert!(err.to_string().contains(&bytes.len().to_string()), "{err}");
}
