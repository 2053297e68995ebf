use std::path::Path;

use nextvisit::config::RunConfig;
use nextvisit::model::{load_checkpoint, save_checkpoint};
use nextvisit::pipeline::{
    cmd_eval_pretrain, cmd_eval_zeroshot, cmd_gen, cmd_sweep_delta, cmd_train, cmd_vocab, read_vocab, tokenized_split, train_settings,
    PipelineError, RunPaths,
};
use nextvisit::train::{TrainData, Trainer};

const TINY: &str = r#"
n_patients = 300
n_embd = 16
block_size = 64
max_iters = 200
lr_decay_iters = 200
warmup_iters = 10
eval_interval = 50
bootstrap_resamples = 100
"#;

/// Long trajectories so zero-shot anchors have history and follow-up.
const LONG: &str = r#"
n_patients = 400
mean_visits = 24.0
n_embd = 16
block_size = 64
max_iters = 30
lr_decay_iters = 30
warmup_iters = 5
eval_interval = 15
sporadic_codes = ["dx:RISK p=0.04 once"]
planted_rules = ["dx:RISK -> dx:EARLY lag=1 p=1 chronic", "dx:RISK -> dx:SLOW lag=12 p=0.8 chronic"]
condition = "SLOW"
horizons_days = [730, 1825]
bootstrap_resamples = 100
"#;

fn prepared(cfg: &RunConfig, dir: &Path) -> RunPaths {
    let paths = RunPaths::new(dir);
    cmd_gen(cfg, &paths).unwrap();
    cmd_vocab(cfg, &paths).unwrap();
    paths
}

#[test]
fn smoke_training_lowers_validation_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(TINY).unwrap();
    let paths = prepared(&cfg, tmp.path());
    let report = cmd_train(&cfg, &paths, false).unwrap();
    let vals: Vec<f64> = report.log.iter().filter_map(|r| r.val_loss).collect();
    assert_eq!(report.log.first().unwrap().step, 0);
    assert_eq!(report.log.last().unwrap().step, 200);
    assert!(vals.last().unwrap() < vals.first().unwrap(), "val losses {vals:?}");
    for name in ["best", "last", "final"] {
        assert!(paths.checkpoint(name).exists());
    }
    let log = std::fs::read_to_string(paths.train_dir().join("train_log.tsv")).unwrap();
    assert!(log.starts_with(&format!("# config_hash={}", cfg.hash())));
}

#[test]
fn resume_reproduces_the_next_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(TINY).unwrap();
    let paths = prepared(&cfg, tmp.path());
    let vocab = read_vocab(&paths).unwrap();
    let train = tokenized_split(&paths, "train", &vocab).unwrap();
    let val = tokenized_split(&paths, "val", &vocab).unwrap();
    let settings = train_settings(&cfg, vocab.len()).unwrap();
    let data = TrainData::prepare(&train, &val, &settings).unwrap();

    let mut straight = Trainer::new(settings.clone(), data.clone()).unwrap();
    let losses: Vec<f64> = (0..40).map(|_| straight.train_step().unwrap().loss).collect();

    let mut first = Trainer::new(settings.clone(), data.clone()).unwrap();
    for _ in 0..25 {
        first.train_step().unwrap();
    }
    let path = tmp.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint(&cfg.hash(), &cfg.echo())).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(settings, data, load_checkpoint(&path).unwrap()).unwrap();
    for &expected in &losses[25..] {
        let got = resumed.train_step().unwrap().loss;
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }
    assert_eq!(resumed.params().data, straight.params().data);
}

#[test]
fn pipeline_resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(TINY).unwrap();
    let paths = prepared(&cfg, tmp.path());
    cmd_train(&cfg, &paths, false).unwrap();
    let done = cmd_train(&cfg, &paths, true).unwrap();
    // last.ckpt is already at max_iters: nothing further to do.
    assert!(done.log.is_empty());

    let other = RunConfig {
        learning_rate: 1e-3,
        ..cfg
    };
    assert!(matches!(cmd_train(&other, &paths, true), Err(PipelineError::Config(_))));
}

#[test]
fn echoed_config_reruns_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(TINY).unwrap();
    let a = prepared(&cfg, &tmp.path().join("a"));
    cmd_train(&cfg, &a, false).unwrap();

    let echoed = RunConfig::load(&a.config()).unwrap();
    assert_eq!(echoed.hash(), cfg.hash());
    let b = prepared(&echoed, &tmp.path().join("b"));
    cmd_train(&echoed, &b, false).unwrap();

    for split in ["train", "val", "test"] {
        assert_eq!(std::fs::read(a.split(split)).unwrap(), std::fs::read(b.split(split)).unwrap());
    }
    assert_eq!(std::fs::read(a.vocab()).unwrap(), std::fs::read(b.vocab()).unwrap());
    assert_eq!(
        std::fs::read(a.checkpoint("final")).unwrap(),
        std::fs::read(b.checkpoint("final")).unwrap()
    );
    let ea = cmd_eval_pretrain(&cfg, &a, None).unwrap();
    let eb = cmd_eval_pretrain(&echoed, &b, None).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn sweep_writes_one_row_per_delta_and_unit_decay_matches_plain_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml_str(TINY).unwrap();
    cfg.max_iters = 40;
    cfg.lr_decay_iters = 40;
    cfg.sweep_deltas = vec![1.0, 0.5, 0.25];
    cfg.temporal_decay = 1.0;
    let paths = prepared(&cfg, tmp.path());
    let rows = cmd_sweep_delta(&cfg, &paths).unwrap();
    assert_eq!(rows.iter().map(|r| r.delta).collect::<Vec<_>>(), vec![1.0, 0.5, 0.25]);
    let summary = std::fs::read_to_string(paths.sweep_dir().join("sweep_summary.tsv")).unwrap();
    let lines: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("delta\tprecision\trecall\ton_time_rate"));

    cmd_train(&cfg, &paths, false).unwrap();
    let plain = load_checkpoint(&paths.checkpoint("final")).unwrap();
    let unit = load_checkpoint(&paths.sweep_dir().join("delta_1").join("final.ckpt")).unwrap();
    assert_eq!(plain.params.data, unit.params.data);
    assert_eq!(rows[0].eval, cmd_eval_pretrain(&cfg, &paths, None).unwrap());
}

#[test]
fn zero_shot_artifacts_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(LONG).unwrap();
    let paths = prepared(&cfg, tmp.path());
    cmd_train(&cfg, &paths, false).unwrap();
    let results = cmd_eval_zeroshot(&cfg, &paths, None).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        assert!(r.counts.is_partition());
        assert!(r.counts.included > 0 && r.n_positive > 0);
        assert!(r.auroc_ci.0 <= r.auroc && r.auroc <= r.auroc_ci.1);
        let text = std::fs::read_to_string(paths.zeroshot_dir().join(format!("pr_{}d.tsv", r.horizon_days))).unwrap();
        let mut rows = text.lines().skip_while(|l| l.starts_with('#')).skip(1);
        let mut prev: Option<(f64, f64)> = None;
        for line in rows.by_ref() {
            let v: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap()).collect();
            if let Some((t, rec)) = prev {
                // Thresholds descend, so recall never decreases along the file.
                assert!(v[0] < t && v[2] >= rec);
            }
            prev = Some((v[0], v[2]));
        }
        assert_eq!(prev.unwrap().1, 1.0);
    }
    let metrics = std::fs::read_to_string(paths.zeroshot_dir().join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains(&cfg.hash())));
}

#[test]
fn zero_windows_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    // Short trajectories never reach a year of history.
    let cfg = RunConfig::from_toml_str(&TINY.replace("n_patients = 300", "n_patients = 100\nmean_visits = 3.0\nmax_visits = 3\nmean_gap_days = 30.0"))
        .unwrap();
    let paths = prepared(&cfg, tmp.path());
    let quick = RunConfig {
        max_iters: 2,
        lr_decay_iters: 2,
        warmup_iters: 1,
        ..cfg
    };
    cmd_train(&quick, &paths, false).unwrap();
    match cmd_eval_zeroshot(&quick, &paths, None) {
        Err(PipelineError::Data(msg)) => assert!(msg.contains("candidates"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn unresolvable_label_codes_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = tmp.path().join("labels.tsv");
    std::fs::write(
        &labels,
        "disease\ttype\tdescription\tcode\nEFFECT\tDiagnosis\tplanted\tEFFECT\nEFFECT\tMedication\tnot in data\tNOPE\n",
    )
    .unwrap();
    let mut cfg = RunConfig::from_toml_str(TINY).unwrap();
    cfg.max_iters = 20;
    cfg.lr_decay_iters = 20;
    cfg.eval_interval = 10;
    cfg.label_file = labels.display().to_string();
    let paths = prepared(&cfg, &tmp.path().join("run"));
    cmd_train(&cfg, &paths, false).unwrap();
    let e = cmd_eval_pretrain(&cfg, &paths, None).unwrap();
    assert!(e.n_test_seps > 0);
    assert!(paths.eval_pretrain_dir().join("metrics.jsonl").exists());
}

#[test]
fn missing_artifacts_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(TINY).unwrap();
    let paths = RunPaths::new(tmp.path());
    assert!(matches!(cmd_vocab(&cfg, &paths), Err(PipelineError::Data(_))));
    cmd_gen(&cfg, &paths).unwrap();
    assert!(matches!(cmd_train(&cfg, &paths, false), Err(PipelineError::Data(_))));
    cmd_vocab(&cfg, &paths).unwrap();
    assert!(matches!(cmd_eval_pretrain(&cfg, &paths, None), Err(PipelineError::Data(_))));
}
