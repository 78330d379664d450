use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rulegate::data::{read_canonical, Dataset, Schema};
use rulegate::gate::random_params;
use rulegate::rules::{big_m_for, RuleMatrix};
use rulegate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use rulegate::{Activity, GateParams, RuleId, GATE_FEATURE_NAMES};

fn corpus() -> (GateParams, rulegate::synth::Synthetic) {
    let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let truth = random_params(&mut rng, &RuleId::ALL, &names, 0.5);
    let s = generate_synthetic(
        &truth,
        &SynthConfig {
            n_cells: 4,
            menus_per_cell: 12,
            n_trials: Some(30),
            feature_mode: FeatureMode::Computed,
            ..Default::default()
        },
    )
    .unwrap();
    (truth, s)
}

#[test]
fn canonical_csv_round_trips() {
    let (_, s) = corpus();
    let mut buf = Vec::new();
    s.dataset.write_canonical(&mut buf).unwrap();
    let back = read_canonical(buf.as_slice(), "mem").unwrap();
    assert_eq!(back.menus, s.dataset.menus);
    assert_eq!(back.rescale_factor, s.dataset.rescale_factor);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("menus.csv");
    std::fs::write(&path, &buf).unwrap();
    assert_eq!(Dataset::load(&path, Schema::Canonical).unwrap().menus, s.dataset.menus);
}

#[test]
fn rule_matrix_csv_round_trips() {
    let (_, s) = corpus();
    let mut buf = Vec::new();
    s.matrix.write_csv(&mut buf).unwrap();
    let big_m = big_m_for(&s.dataset.menus);
    let back = RuleMatrix::read_csv(buf.as_slice(), Activity::default(), big_m).unwrap();
    assert_eq!(back.rows, s.matrix.rows);
}

#[test]
fn gate_params_round_trip_through_json() {
    let (truth, _) = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.json");
    truth.save(&path).unwrap();
    assert_eq!(GateParams::load(&path).unwrap(), truth);
    let mut bad: serde_json::Value = serde_json::from_str(&truth.to_json().unwrap()).unwrap();
    bad["version"] = 99.into();
    assert!(GateParams::from_json(&bad.to_string()).is_err());
}
