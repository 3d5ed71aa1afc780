use grap::harness::{
    aggregate, fraction_configs, run, run_on, seed_configs, sweep, tuned, write_outputs, BenchConfig, MeanStd, Method,
    RunConfig, Trajectory,
};
use grap::tasks::{self, BatchStream, LossSpec, TaskSpec};
use grap::{checkpoint, DownstreamGrad, Error, NormalizationMode, Rng, UpdateRates};

fn small(method: Method, seed: u64) -> RunConfig {
    RunConfig {
        method,
        steps: 60,
        batch_size: 32,
        eval_every: 7,
        task: TaskSpec {
            n_train: 256,
            n_val: 64,
            ..TaskSpec::default()
        },
        ..RunConfig::default()
    }
    .with_seed(seed)
}

fn param_bits(m: &grap::CompositeModel) -> Vec<u64> {
    std::iter::once(&m.backbone)
        .chain(&m.heads)
        .chain(std::iter::once(&m.downstream_head))
        .flat_map(|h| h.params_flat())
        .map(f64::to_bits)
        .collect()
}

#[test]
fn single_loss_equal_weights_is_plain_sgd() {
    let mut cfg = small(Method::Equal, 3);
    cfg.task.losses = vec![LossSpec::useful("only")];
    cfg.normalization.mode = NormalizationMode::None;
    let out = run(&cfg).unwrap();

    let data = tasks::generate(&cfg.task).unwrap();
    let mut model = grap::harness::build_model(&cfg).unwrap();
    let mut stream = BatchStream::new(&data.train, cfg.batch_size, Rng::new(cfg.seed).substream("batches")).unwrap();
    for _ in 0..cfg.steps {
        let batch = stream.next().unwrap();
        let eg = model.compute_embedding_grads(&batch, DownstreamGrad::IfLabeled).unwrap();
        model
            .apply_update_with_cotangent(&eg, eg.g_tilde.row(0), UpdateRates::uniform(cfg.lr))
            .unwrap();
    }
    assert_eq!(param_bits(&out.model), param_bits(&model));
}

#[test]
fn frozen_grap_weights_reproduce_equal_weights() {
    let mut grap_cfg = small(Method::Grap, 4);
    grap_cfg.lr_w = Some(0.0);
    let equal_cfg = small(Method::Equal, 4);
    let a = run(&grap_cfg).unwrap();
    let b = run(&equal_cfg).unwrap();
    assert_eq!(param_bits(&a.model), param_bits(&b.model));
    assert!(a.weight_history.iter().all(|w| w.iter().all(|v| *v == 1.0)));
}

#[test]
fn pretraining_runs_without_any_labels() {
    let cfg = small(Method::Equal, 5);
    let mut data = tasks::generate(&cfg.task).unwrap();
    data.train.labeled_mask.iter_mut().for_each(|m| *m = false);
    let out = run_on(&cfg, &data).unwrap();
    let initial = grap::harness::build_model(&cfg).unwrap();
    assert_ne!(out.model.backbone, initial.backbone);
    assert_eq!(out.model.downstream_head, initial.downstream_head);
    assert_eq!(out.summary.unlabeled_steps, cfg.steps);
    assert!(out.trajectory.rows.iter().all(|r| r.loss_down_train.is_nan()));
    let first = &out.trajectory.rows[0].losses;
    let last = &out.trajectory.rows.last().unwrap().losses;
    assert!(last.iter().sum::<f64>() < first.iter().sum::<f64>());
}

#[test]
fn every_method_trains_and_logs_well_formed_rows() {
    let methods = [
        Method::Equal,
        Method::Grap,
        Method::GradNorm,
        Method::Dwa,
        Method::Mgda,
        Method::PcGrad,
        Method::Fixed(vec![1.0, 0.5, 0.5, 0.2, 0.2, 0.0]),
    ];
    for method in methods {
        let cfg = small(method.clone(), 6);
        let out = run(&cfg).unwrap();
        let rows = &out.trajectory.rows;
        let steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "{method}");
        assert_eq!(*steps.last().unwrap(), cfg.steps);
        assert_eq!(steps.len(), cfg.steps / cfg.eval_every + 1);
        let csv = out.trajectory.to_csv();
        let width = Trajectory::header(6).split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == width), "{method}");
        assert!(rows.iter().all(|r| r.step_us == 0));
        assert_eq!(out.weight_history.len(), cfg.steps);
    }
}

#[test]
fn identical_configs_give_identical_csv() {
    for method in [Method::Grap, Method::PcGrad, Method::GradNorm] {
        let cfg = small(method, 7);
        assert_eq!(run(&cfg).unwrap().trajectory.to_csv(), run(&cfg).unwrap().trajectory.to_csv());
    }
    let a = run(&small(Method::Grap, 7)).unwrap().trajectory.to_csv();
    let b = run(&small(Method::Grap, 8)).unwrap().trajectory.to_csv();
    assert_ne!(a, b);
}

#[test]
fn csv_header_follows_the_schema() {
    assert_eq!(
        Trajectory::header(2),
        "step,w_1,w_2,loss_1,loss_2,loss_down_train,loss_down_val,metric_val,cosine,comp_norm,step_us"
    );
}

#[test]
fn outputs_and_checkpoint_round_trip() {
    let cfg = small(Method::Grap, 9);
    let out = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&cfg, &out, dir.path()).unwrap();
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj, out.trajectory.to_csv());
    let echo = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(echo.starts_with(&format!("# content-sha256: {}\n", out.config_hash)));
    assert_eq!(RunConfig::from_toml_str(&echo).unwrap(), cfg);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    let (model, hash) = checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(param_bits(&model), param_bits(&out.model));
    assert_eq!(model, out.model);
    assert_eq!(hash, out.config_hash);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let out = run(&small(Method::Equal, 10)).unwrap();
    let bytes = checkpoint::to_bytes(&out.model, &out.config_hash);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(checkpoint::from_bytes(&magic).is_err());
}

#[test]
fn huge_learning_rate_reports_the_divergent_step() {
    let mut cfg = small(Method::Equal, 11);
    cfg.lr = 1e6;
    cfg.normalization.mode = NormalizationMode::None;
    match run(&cfg) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1 && step <= cfg.steps),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.summary)),
    }
}

#[test]
fn config_defaults_and_overrides() {
    let cfg = RunConfig::from_toml_str("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    let cfg = RunConfig::from_toml_str("seed = 5\nlr = 0.1\n[normalization]\ndetach_norm = true\n").unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.task.seed, 5);
    assert_eq!(cfg.lr_w(), 0.1);
    assert!(cfg.normalization.detach_norm);
    let cfg = RunConfig::from_toml_str("seed = 5\n[task]\nseed = 2\n").unwrap();
    assert_eq!((cfg.seed, cfg.task.seed), (5, 2));
    let cfg = RunConfig::from_toml_str("method = \"fixed:1,0,0.5,1,1,0.25\"").unwrap();
    assert_eq!(cfg.method, Method::Fixed(vec![1.0, 0.0, 0.5, 1.0, 1.0, 0.25]));
    assert_eq!(cfg.method.to_string().parse::<Method>().unwrap(), cfg.method);
}

#[test]
fn config_errors_are_config_errors() {
    for bad in [
        "bogus = 1",
        "[task]\nbogus = 1",
        "lr = 0.0",
        "lr = -1.0",
        "steps = 0",
        "method = \"sgd\"",
        "method = \"fixed:1,2\"",
        "burn_in = 1.0",
        "[task]\nlabeled_fraction = 0.0",
        "lr = \"fast\"",
    ] {
        assert!(matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
    }
    assert!(RunConfig::from_toml_str("lr_w = 0.0").is_ok());
}

#[test]
fn content_hash_tracks_the_resolved_config() {
    let a = RunConfig::default();
    let b = RunConfig::from_toml_str("steps = 1500").unwrap();
    assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    let c = RunConfig::from_toml_str("steps = 1499").unwrap();
    assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
}

#[test]
fn single_config_sweep_matches_run() {
    let cfg = small(Method::Grap, 12);
    let s = sweep(std::slice::from_ref(&cfg)).unwrap();
    let r = run(&cfg).unwrap();
    assert_eq!(s.runs.len(), 1);
    assert_eq!(s.runs[0].csv_row(), r.summary.csv_row());
    assert_eq!(s.rows.len(), 1);
    assert_eq!(s.rows[0].metric.mean(), r.summary.final_metric_val);
}

#[test]
fn sweep_std_matches_the_two_pass_formula() {
    let base = small(Method::Equal, 0);
    let s = sweep(&seed_configs(&base, &[0, 1, 2, 3])).unwrap();
    let xs: Vec<f64> = s.runs.iter().map(|r| r.final_loss_down_val).collect();
    let mean = xs.iter().sum::<f64>() / 4.0;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    let row = &s.rows[0];
    assert_eq!(row.loss.count(), 4);
    assert!((row.loss.mean() - mean).abs() <= 1e-12 * mean.abs());
    assert!((row.loss.std() - var.sqrt()).abs() <= 1e-10 * var.sqrt().max(1e-300));
    let ms: MeanStd = [1.0, 2.0, 3.0, 4.0].into_iter().collect();
    assert!((ms.std() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

#[test]
fn fraction_sweep_emits_one_row_per_fraction() {
    let fractions = [0.05, 0.1, 0.2, 0.5, 1.0];
    let mut base = small(Method::Grap, 0);
    base.steps = 15;
    let s = sweep(&fraction_configs(&base, &fractions, &[0, 1])).unwrap();
    assert_eq!(s.runs.len(), 10);
    assert_eq!(s.rows.len(), fractions.len());
    for (row, f) in s.rows.iter().zip(fractions) {
        assert_eq!(row.labeled_fraction, f);
        assert_eq!(row.metric.count(), 2);
    }
    assert_eq!(aggregate(&s.runs).len(), fractions.len());
    assert_eq!(s.to_csv().lines().count(), fractions.len() + 1);
}

#[test]
fn tuned_retrains_with_median_weights() {
    let cfg = small(Method::Grap, 13);
    let t = tuned(&cfg).unwrap();
    assert_eq!(t.weights, grap::baselines::median_weights(&t.tuning.weight_history, cfg.burn_in).unwrap());
    assert!(t.retrained.weight_history.iter().all(|w| *w == t.weights));
    assert_eq!(t.retrained.summary.method, Method::Fixed(t.weights.clone()).to_string());
}

#[test]
fn bench_config_defaults_cover_the_k_grid() {
    let b = BenchConfig::default();
    assert_eq!(b.ks, vec![2, 4, 8, 16]);
    assert!(b.steps >= 200 && b.warmup >= 50);
}
