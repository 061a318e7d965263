use prequal::cli::{run_experiment, RunConfig};
use prequal::workload::Experiment;

#[test]
fn parallel_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Experiment::SelectionRules);
    cfg.seed = 11;
    cfg.replicates = 2;
    cfg.workload.n_clients = 3;
    cfg.workload.n_servers = 4;
    cfg.workload.step_duration_s = 0.3;
    cfg.workload.warmup_s = 0.1;
    cfg.prequal.max_pool_size = 2;
    let serial = run_experiment(cfg.clone(), 1).unwrap();
    let parallel = run_experiment(cfg, 4).unwrap();
    serial.write_to(&dir.path().join("a")).unwrap();
    parallel.write_to(&dir.path().join("b")).unwrap();
    for name in ["selection_rules.csv", "resolved_config.json", "summary.txt"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}
