use std::fs;
use std::io::BufReader;

use bpsim_core::sim::read_trace_csv;
use bpsim_core::{run_experiment, ExperimentConfig, GeneratorParams, ScenarioSource, SchemeKind};

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(ScenarioSource::Generate(GeneratorParams::new(5, 3.0, 4)));
    c.slots = 60;
    c.runs = 3;
    c.seed = 9;
    c
}

#[test]
fn averaged_curve_is_recomputable_from_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    let result = run_experiment(&c, Some(dir.path())).unwrap();
    for s in &result.schemes {
        let mut sum = vec![0.0; c.slots];
        for r in 0..c.runs {
            let f = fs::File::open(dir.path().join(format!("trace_{}_run{r}.csv", s.scheme))).unwrap();
            let t = read_trace_csv(BufReader::new(f)).unwrap();
            for (acc, x) in sum.iter_mut().zip(&t.total_backlog) {
                *acc += x;
            }
        }
        for (a, b) in sum.iter().zip(&s.mean_curve) {
            assert!((a / c.runs as f64 - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
    let echoed = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&echoed).unwrap(), c);
    assert!(dir.path().join("scenario_run2.toml").exists());
    assert!(dir.path().join("plot_backlog.py").exists());
}

#[test]
fn identical_configs_give_identical_files() {
    let c = config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&c, Some(a.path())).unwrap();
    run_experiment(&c, Some(b.path())).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 10);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn shared_layout_and_file_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config();
    c.layout_per_run = false;
    c.schemes = vec![SchemeKind::IterativeOnce];
    run_experiment(&c, Some(dir.path())).unwrap();
    let path = dir.path().join("scenario.toml");
    assert!(path.exists());
    let mut from_file = c.clone();
    from_file.scenario = ScenarioSource::File { path: path.clone() };
    let a = run_experiment(&c, None).unwrap();
    let b = run_experiment(&from_file, None).unwrap();
    assert_eq!(a.schemes[0].mean_curve, b.schemes[0].mean_curve);
    from_file.scenario = ScenarioSource::File {
        path: dir.path().join("missing.toml"),
    };
    assert!(run_experiment(&from_file, None).is_err());
}
