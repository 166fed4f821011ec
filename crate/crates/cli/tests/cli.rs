use std::path::Path;
use std::process::Command;

use mstcn::data::{lag1_autocorrelation, ChannelKind, SequenceDataset, Split, SyntheticSpec};
use mstcn::distributions::{HeadKind, PredictiveHead};
use mstcn::model::{presets, KlGrouping, LayerSpec, ModelConfig, Objective};
use mstcn::Tensor;
use mstcn_cli::checkpoint::Checkpoint;
use mstcn_cli::commands::{self, epoch_checkpoint_name, EvalOptions, SampleOptions, TrainOptions, LATEST};
use mstcn_cli::config::{DataConfig, OutputConfig, Precision, RunConfig, TrainConfig};
use mstcn_cli::metrics;

fn model(fw: usize, strides: &[usize], head: HeadKind) -> ModelConfig {
    ModelConfig {
        frame_width: fw,
        channels: 1,
        kernel_size: 2,
        head: PredictiveHead { kind: head, data_dim: fw },
        layers: strides
            .iter()
            .map(|&s| LayerSpec {
                filters: 6,
                latent_dim: 2,
                stride: s,
                bottom_up_dilations: vec![1, 2],
                top_down_blocks: 1,
            })
            .collect(),
    }
}

fn run(dir: &Path, model: ModelConfig, train: SyntheticSpec, epochs: u64) -> RunConfig {
    let valid = SyntheticSpec {
        count: 12,
        seed: train.seed + 1000,
        ..train.clone()
    };
    RunConfig {
        model,
        train: TrainConfig {
            lr0: 2e-3,
            lambda0: 0.5,
            halving_period: 300_000.0,
            epochs,
            batch_size: 8,
            seed: 3,
            precision: Precision::F32,
            objective: Objective::LinearFreeBits,
            kl_grouping: KlGrouping::PerUnit,
            eval_batch_size: 16,
        },
        data: DataConfig {
            noise_width: 0.0,
            synthetic_train: Some(train),
            synthetic_valid: Some(valid),
            ..DataConfig::default()
        },
        output: OutputConfig {
            checkpoint_dir: dir.join("run"),
            metrics: None,
        },
    }
}

fn small(dir: &Path, epochs: u64) -> RunConfig {
    run(dir, model(2, &[1, 2], HeadKind::Gaussian), SyntheticSpec::two_regime(24, 32, 5), epochs)
}

#[test]
fn config_text_round_trips_and_expands_presets() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 2);
    let text = c.to_canonical();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_canonical(), text);

    let mixed = text.replacen("[model]", "[model]\npreset = \"speech_fw2_flat\"", 1);
    assert!(RunConfig::parse(&mixed).is_err());
    let start = text.find("[model]").unwrap();
    let end = text.find("[train]").unwrap();
    let mut doc = text.clone();
    doc.replace_range(start..end, "[model]\npreset = \"speech_fw2_flat\"\n\n");
    let p = RunConfig::parse(&doc).unwrap();
    assert_eq!(p.model, presets::speech_fw2_flat());
    assert!(RunConfig::parse(&doc.replace("speech_fw2_flat", "nope")).is_err());
    assert!(RunConfig::parse(&text.replace("batch_size = 8", "batch_size = 0")).is_err());
    assert!(RunConfig::parse(&text.replace("lr0", "lr_zero")).is_err());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn metrics_rows_round_trip() {
    assert_eq!(metrics::header(2), "iteration,epoch,split,elbo,reconstruction,kl_1,kl_2,lambda,lr,wall_time");
    let row = metrics::MetricsRow {
        iteration: 7,
        epoch: 1,
        split: "valid".into(),
        elbo: -1.0 / 3.0,
        reconstruction: -0.1,
        kl_per_layer: vec![0.2, 1e-12],
        lambda: 0.5,
        lr: 5e-4,
        wall_time: 1.25,
    };
    assert_eq!(metrics::MetricsRow::parse(&row.to_line()).unwrap(), row);
    assert!(metrics::MetricsRow::parse("1,2,x").is_err());
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 0);
    let s = commands::train(&c, &TrainOptions::default()).unwrap();
    assert_eq!((s.epoch, s.iteration), (0, 0));
    let out = &c.output.checkpoint_dir;
    let ck = Checkpoint::load(&out.join(LATEST)).unwrap();
    assert_eq!(ck.epoch, 0);
    assert_eq!(ck.config, c);
    assert!(out.join(epoch_checkpoint_name(0)).exists());
    let (_, rows) = metrics::read(&c.metrics_path()).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn training_writes_one_row_per_evaluation_and_checkpoints_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 3);
    let s = commands::train(&c, &TrainOptions::default()).unwrap();
    assert_eq!(s.epoch, 3);
    assert_eq!(s.iteration, 3 * 3);
    let (header, rows) = metrics::read(&c.metrics_path()).unwrap();
    assert_eq!(header, metrics::header(2));
    // initial train/valid evaluation, then train and valid per epoch
    assert_eq!(rows.len(), 2 * (3 + 1));
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, i as u64 / 2);
        assert_eq!(r.split, if i % 2 == 0 { "train" } else { "valid" });
        assert_eq!(r.kl_per_layer.len(), 2);
    }
    for e in 0..=3 {
        assert_eq!(Checkpoint::load(&c.output.checkpoint_dir.join(epoch_checkpoint_name(e))).unwrap().epoch, e);
    }
    let ck = Checkpoint::load(&c.output.checkpoint_dir.join(LATEST)).unwrap();
    let round = Checkpoint::read_from(&mut {
        let mut b = Vec::new();
        ck.write_to(&mut b).unwrap();
        std::io::Cursor::new(b)
    })
    .unwrap();
    assert_eq!(round, ck);
    assert_eq!(ck.adam.step, 9);
}

#[test]
fn resume_matches_an_uninterrupted_run_bit_for_bit() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small(a.path(), 3);
    let mut cb = small(a.path(), 3);
    cb.output.checkpoint_dir = b.path().join("run");
    commands::train(&ca, &TrainOptions::default()).unwrap();

    let stop = TrainOptions {
        stop_at_epoch: Some(1),
        ..TrainOptions::default()
    };
    commands::train(&cb, &stop).unwrap();
    // a crash after the epoch-2 rows but before its checkpoint
    let mut partial = metrics::read(&ca.metrics_path()).unwrap().1;
    partial.truncate(6);
    metrics::append(&cb.metrics_path(), &partial[4..]).unwrap();
    let s = commands::train(&cb, &TrainOptions::default()).unwrap();
    assert_eq!(s.resumed_from, Some(1));

    for name in [LATEST.to_string(), epoch_checkpoint_name(2), epoch_checkpoint_name(3)] {
        let x = Checkpoint::load(&ca.output.checkpoint_dir.join(&name)).unwrap();
        let mut y = Checkpoint::load(&cb.output.checkpoint_dir.join(&name)).unwrap();
        y.config.output = x.config.output.clone();
        assert_eq!(x, y, "{name}");
    }
    let strip = |rows: Vec<metrics::MetricsRow>| -> Vec<String> {
        rows.into_iter()
            .map(|mut r| {
                r.wall_time = 0.0;
                r.to_line()
            })
            .collect()
    };
    assert_eq!(
        strip(metrics::read(&ca.metrics_path()).unwrap().1),
        strip(metrics::read(&cb.metrics_path()).unwrap().1)
    );
}

#[test]
fn resuming_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1);
    commands::train(&c, &TrainOptions::default()).unwrap();
    let mut other = c.clone();
    other.train.lr0 = 1e-3;
    assert!(commands::train(&other, &TrainOptions::default()).is_err());
    // a larger epoch budget continues the same run
    let mut longer = c;
    longer.train.epochs = 2;
    assert_eq!(commands::train(&longer, &TrainOptions::default()).unwrap().resumed_from, Some(1));
}

#[test]
fn evaluation_is_repeatable_and_checks_channels() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1);
    commands::train(&c, &TrainOptions::default()).unwrap();
    let ck = c.output.checkpoint_dir.join(LATEST);
    let out = dir.path().join("eval.csv");
    let opts = EvalOptions {
        out: Some(out.clone()),
        ..EvalOptions::default()
    };
    let (a, _) = commands::eval(&ck, &opts).unwrap();
    let (b, _) = commands::eval(&ck, &EvalOptions { threads: 1, ..opts.clone() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kl_per_layer.len(), 2);
    assert_eq!(a.sequences, 12);
    let (_, rows) = metrics::read(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].elbo, a.elbo);

    let two = SequenceDataset::new(vec![Tensor::zeros([2, 8])], vec![ChannelKind::Real; 2], Split::Test).unwrap();
    let p = dir.path().join("two.seq");
    two.save(&p).unwrap();
    let bad = EvalOptions {
        data: Some(p),
        ..EvalOptions::default()
    };
    assert!(commands::eval(&ck, &bad).is_err());
}

#[test]
fn untrained_bernoulli_reconstruction_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        binary: true,
        ..SyntheticSpec::two_regime(16, 64, 9)
    };
    let c = run(dir.path(), model(4, &[1, 2], HeadKind::Bernoulli), spec, 0);
    commands::train(&c, &TrainOptions::default()).unwrap();
    let (e, _) = commands::eval(&c.output.checkpoint_dir.join(LATEST), &EvalOptions::default()).unwrap();
    // T·p binary values per sequence
    let uniform = -(64.0 * std::f64::consts::LN_2);
    let rel = (e.reconstruction - uniform).abs() / uniform.abs();
    assert!(rel < 0.2, "{} vs {uniform}", e.reconstruction);
}

fn sample_opts(dir: &Path, name: &str) -> SampleOptions {
    SampleOptions {
        frames: 6,
        prefix: None,
        count: 2,
        seed: 11,
        greedy: false,
        out: dir.join(name),
        text: None,
        threads: 0,
    }
}

#[test]
fn sampling_is_seeded_and_respects_length_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1);
    commands::train(&c, &TrainOptions::default()).unwrap();
    let ck = c.output.checkpoint_dir.join(LATEST);
    let a = commands::sample(&ck, &sample_opts(dir.path(), "a.seq")).unwrap();
    let b = commands::sample(&ck, &sample_opts(dir.path(), "b.seq")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.seq")).unwrap(), std::fs::read(dir.path().join("b.seq")).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert_eq!(a.sequences[0].shape(), [1, 6 * 2]);
    let other = SampleOptions {
        seed: 12,
        ..sample_opts(dir.path(), "c.seq")
    };
    assert_ne!(commands::sample(&ck, &other).unwrap(), a);

    // prefix of 3 frames is kept verbatim and extended by 6
    let prefix = SequenceDataset::new(vec![Tensor::from_f64([1, 6], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()], vec![ChannelKind::Real], Split::Test).unwrap();
    let pp = dir.path().join("prefix.seq");
    prefix.save(&pp).unwrap();
    let text = dir.path().join("s.txt");
    let with = SampleOptions {
        prefix: Some(pp),
        text: Some(text.clone()),
        ..sample_opts(dir.path(), "d.seq")
    };
    let d = commands::sample(&ck, &with).unwrap();
    assert_eq!(d.sequences[0].shape(), [1, 6 + 12]);
    let vals = d.sequences[0].data();
    for (v, p) in vals[..6].iter().zip(prefix.sequences[0].data()) {
        assert_eq!(*v as f32, *p as f32);
    }
    let exported = SequenceDataset::read_text(std::fs::read_to_string(&text).unwrap().as_bytes(), None, Split::Test).unwrap();
    assert_eq!(exported.sequences[0].shape(), [1, 18]);

    let odd = SequenceDataset::new(vec![Tensor::zeros([1, 3])], vec![ChannelKind::Real], Split::Test).unwrap();
    let op = dir.path().join("odd.seq");
    odd.save(&op).unwrap();
    assert!(commands::sample(&ck, &SampleOptions { prefix: Some(op), ..sample_opts(dir.path(), "e.seq") }).is_err());
    let wide = SequenceDataset::new(vec![Tensor::zeros([2, 4])], vec![ChannelKind::Real; 2], Split::Test).unwrap();
    let wp = dir.path().join("wide.seq");
    wide.save(&wp).unwrap();
    assert!(commands::sample(&ck, &SampleOptions { prefix: Some(wp), ..sample_opts(dir.path(), "f.seq") }).is_err());
}

#[test]
fn samples_of_an_ar1_model_keep_its_autocorrelation() {
    let dir = tempfile::tempdir().unwrap();
    let coefficient = 0.8;
    let spec = SyntheticSpec {
        regime_count: 1,
        regime_dwell: 8,
        coefficients: vec![coefficient],
        noise_scales: vec![0.5],
        offsets: vec![],
        length: 128,
        count: 200,
        seed: 21,
        binary: false,
    };
    let mut m = model(1, &[1, 2], HeadKind::Gaussian);
    for l in &mut m.layers {
        l.filters = 8;
        l.bottom_up_dilations = vec![1, 2, 4];
    }
    let mut c = run(dir.path(), m, spec, 8);
    c.train.lr0 = 3e-3;
    c.train.batch_size = 16;
    commands::train(&c, &TrainOptions::default()).unwrap();
    let opts = SampleOptions {
        frames: 400,
        count: 4,
        ..sample_opts(dir.path(), "ar.seq")
    };
    let d = commands::sample(&c.output.checkpoint_dir.join(LATEST), &opts).unwrap();
    let r: f64 = d.sequences.iter().map(|s| lag1_autocorrelation(&s.data()[50..])).sum::<f64>() / d.len() as f64;
    assert!((r - coefficient).abs() < 0.15, "lag-1 autocorrelation {r}");
}

#[test]
fn complexity_report_compares_side_by_side() {
    let report = commands::complexity_report(
        &[
            ("multi".into(), presets::speech_fw2_multiscale()),
            ("flat".into(), presets::speech_fw2_flat()),
        ],
        4000,
    )
    .unwrap();
    assert!(report.contains("526652160"));
    assert!(report.contains("539968000"));
    assert!(report.contains("multi total MACs 526652160 <= flat total MACs 539968000"));
    assert_eq!(report.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 5);
}

#[test]
fn binary_reports_failures_with_nonzero_exit() {
    let exe = env!("CARGO_BIN_EXE_mstcn");
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(exe).args(["train", "--config"]).arg(dir.path().join("none.toml")).output().unwrap();
    assert!(!missing.status.success());
    assert!(!missing.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nframe_width = ").unwrap();
    assert!(!Command::new(exe).args(["train", "--config"]).arg(&bad).output().unwrap().status.success());

    let ok = Command::new(exe).args(["complexity", "--config", "speech_fw2_multiscale", "--compare", "speech_fw2_flat"]).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8(ok.stdout).unwrap().contains("526652160"));

    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, toml::to_string(&SyntheticSpec::two_regime(3, 16, 1)).unwrap()).unwrap();
    let out = dir.path().join("synth.seq");
    let s = Command::new(exe).args(["synth", "--config"]).arg(&spec).arg("--out").arg(&out).output().unwrap();
    assert!(s.status.success());
    assert_eq!(SequenceDataset::load(&out, Split::Train).unwrap().len(), 3);
}
