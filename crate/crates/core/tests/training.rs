use pyraflow::config::{digest_bytes, RunConfig};
use pyraflow::report::MetricsReport;
use pyraflow::train::{train, write_run, CHECKPOINT_FILE, CONFIG_FILE};
use pyraflow::ParamSet;

fn short_run(seed: u64, steps: usize) -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = seed;
    config.train.steps = steps;
    config.eval.every = 0;
    config
}

#[test]
fn loss_falls_over_the_first_two_hundred_steps() {
    for seed in 0..3 {
        let outcome = train(&short_run(seed, 201), &mut |_| {}).unwrap();
        let losses = &outcome.step_losses;
        assert_eq!(losses.len(), 201);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(
            losses[200] < losses[0],
            "seed {seed}: loss went from {} to {}",
            losses[0],
            losses[200]
        );
    }
}

#[test]
fn written_run_round_trips() {
    let mut config = short_run(3, 12);
    config.eval.every = 4;
    config.data.train_scenes = 16;
    config.data.eval_scenes = 8;
    let outcome = train(&config, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&config, &outcome, dir.path()).unwrap();

    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let parsed = MetricsReport::from_json(&json).unwrap();
    assert_eq!(parsed, outcome.report);
    assert_eq!(
        parsed.curves.iter().map(|c| c.step).collect::<Vec<_>>(),
        vec![0, 4, 8, 12]
    );

    let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let step_col = headers.iter().position(|h| h == "step").unwrap();
    let ap_col = headers.iter().position(|h| h == "ap").unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), parsed.curves.len());
    for (row, point) in rows.iter().zip(&parsed.curves) {
        assert_eq!(row[step_col].parse::<usize>().unwrap(), point.step);
        assert_eq!(row[ap_col].parse::<f64>().unwrap(), point.ap.overall);
    }

    let written = std::fs::read(dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(parsed.config_digest, digest_bytes(&written));
    let reloaded = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(reloaded, config);

    let params = ParamSet::load_json(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(params.len(), outcome.params.len());
}

#[test]
fn digest_is_sha256_of_the_canonical_text() {
    use sha2::{Digest, Sha256};
    let config = short_run(5, 10);
    let text = config.to_toml().unwrap();
    let expected: String = Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(config.digest().unwrap(), expected);
}
