use martnet_core::networks::{init_networks, Architecture, NetworkBundle};
use martnet_core::problems::{make_problem, Preset, ProblemSpec};
use martnet_core::sde::{build_start_set, simulate_paths, PathBatch, TimeGrid};
use martnet_core::trainer::{train, MetricsRecord, TrainConfig, TrainReport};

fn setup(preset: Preset, d: usize) -> (ProblemSpec, NetworkBundle, PathBatch, TrainConfig) {
    let p = make_problem(preset, d, &[]).unwrap();
    let grid = TimeGrid::uniform(p.horizon, 10).unwrap();
    let start = build_start_set(&p.start, d, 64, 1).unwrap();
    let batch = simulate_paths(&p, &grid, &start, 512, 1).unwrap();
    let arch = Architecture::standard(d, p.control_dim(), 16);
    let nets = init_networks(&arch, p.terminal, p.horizon, p.control.clone(), 2).unwrap();
    let mut cfg = TrainConfig::for_dimension(d);
    cfg.iterations = 30;
    cfg.batch_size = 128;
    cfg.seed = 3;
    (p, nets, batch, cfg)
}

fn run(preset: Preset, threads: usize) -> (TrainReport, NetworkBundle) {
    let (p, mut nets, batch, cfg) = setup(preset, 3);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let report = pool.install(|| train(&p, &mut nets, &batch, &cfg, &mut |_: &mut MetricsRecord, _: &NetworkBundle| Ok(()))).unwrap();
    (report, nets)
}

#[test]
fn pool_size_does_not_change_training() {
    for preset in [Preset::Hjb2, Preset::Semilinear] {
        let (a, na) = run(preset, 1);
        let (b, nb) = run(preset, 3);
        assert_eq!(a.records, b.records, "{preset:?}");
        assert_eq!(na.value.params.data, nb.value.params.data);
        assert_eq!(na.test.params.data, nb.test.params.data);
    }
}

#[test]
fn lambda_is_logged_nondecreasing_and_capped() {
    let (p, mut nets, batch, mut cfg) = setup(Preset::Hjb1, 2);
    cfg.lr_lambda = 1e9;
    cfg.lambda_bar = 50.0;
    let report = train(&p, &mut nets, &batch, &cfg, &mut |_: &mut MetricsRecord, _: &NetworkBundle| Ok(())).unwrap();
    let lambdas: Vec<f64> = report.records.iter().map(|r| r.lambda.unwrap()).collect();
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
    assert!(lambdas.iter().all(|&l| l <= 50.0));
    assert_eq!(*lambdas.last().unwrap(), 50.0);
    assert_eq!(report.lambda, 50.0);
}

#[test]
fn observer_errors_stop_training() {
    let (p, mut nets, batch, cfg) = setup(Preset::Hjb2, 2);
    let mut seen = 0;
    let err = train(&p, &mut nets, &batch, &cfg, &mut |r: &mut MetricsRecord, _: &NetworkBundle| {
        seen += 1;
        if r.iter == 4 {
            Err(martnet_core::Error::InvalidArgument("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
    assert_eq!(seen, 5);
}
