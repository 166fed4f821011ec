//! The `train`, `eval`, `sample`, `complexity` and `synth` commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mstcn::data::{
    batch_indices, dequantize, frame, generate_synthetic, make_batch, unframe, ChannelKind, SequenceDataset, Split,
    SyntheticSpec,
};
use mstcn::model::{sample_noise, train_step, Adam, AdamConfig, ElboReport, Model, ModelConfig};
use mstcn::rng::{purpose, stream};
use mstcn::{ParameterStore, Scalar, Tensor};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{check_dataset, Precision, RunConfig};
use crate::metrics::{self, MetricsRow};
use crate::CliError;

pub const LATEST: &str = "latest.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Runs `f` on a dedicated pool of `threads` workers (0 picks the default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Per-sequence averages over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub sequences: usize,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl_per_layer: Vec<f64>,
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    elbo: f64,
    reconstruction: f64,
    kl: Vec<f64>,
}

impl Accumulator {
    fn add(&mut self, r: &ElboReport, rows: usize) {
        let w = rows as f64;
        self.kl.resize(r.kl_per_layer.len(), 0.0);
        self.n += rows;
        self.elbo += r.elbo * w;
        self.reconstruction += r.reconstruction * w;
        for (k, v) in self.kl.iter_mut().zip(&r.kl_per_layer) {
            *k += v * w;
        }
    }

    fn finish(self) -> Evaluation {
        let n = self.n.max(1) as f64;
        Evaluation {
            sequences: self.n,
            elbo: self.elbo / n,
            reconstruction: self.reconstruction / n,
            kl_per_layer: self.kl.iter().map(|k| k / n).collect(),
        }
    }
}

/// Single-sample ELBO of every sequence, with noise keyed by `seed` and the
/// batch index. Batches run in parallel and are summed in order, so the
/// result does not depend on the thread count.
pub fn evaluate_dataset<S: Scalar + Send + Sync>(
    model: &Model,
    params: &ParameterStore<S>,
    data: &SequenceDataset,
    batch_size: usize,
    seed: u64,
    noise_width: f64,
) -> Result<Evaluation, CliError> {
    let batches = batch_indices(data.len(), batch_size, false, 0, 0);
    let reports: Vec<(ElboReport, usize)> = batches
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let mut rng = stream(seed, purpose::EVAL_DEQUANTIZE, i as u64);
            let seqs = prepare(data, idx, noise_width, &mut rng)?;
            let batch = make_batch::<S>(&seqs.iter().collect::<Vec<_>>(), model.config.frame_width, model.config.stride_product())?;
            let noise = sample_noise(&model.config, batch.size(), batch.frames(), &mut stream(seed, purpose::EVAL_NOISE, i as u64));
            Ok((model.evaluate(params, &batch, &noise)?, idx.len()))
        })
        .collect::<Result<_, CliError>>()?;
    let mut acc = Accumulator::default();
    for (r, n) in &reports {
        acc.add(r, *n);
    }
    Ok(acc.finish())
}

fn prepare<R: rand::Rng>(data: &SequenceDataset, idx: &[usize], noise_width: f64, rng: &mut R) -> Result<Vec<Tensor<f64>>, CliError> {
    idx.iter()
        .map(|&i| {
            let s = &data.sequences[i];
            if noise_width > 0.0 {
                Ok(dequantize(s, &data.kinds, noise_width, rng)?)
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub threads: usize,
    /// Stop once this epoch is complete, as if interrupted.
    pub stop_at_epoch: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epoch: u64,
    pub iteration: u64,
    pub resumed_from: Option<u64>,
    pub rows: Vec<MetricsRow>,
}

/// Two configs describe the same run if they differ at most in the epoch
/// budget and output locations.
fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    a.train.epochs = b.train.epochs;
    a.output = b.output.clone();
    a == *b
}

pub fn train(config: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    with_threads(opts.threads, || match config.train.precision {
        Precision::F32 => train_impl::<f32>(config, opts),
        Precision::F64 => train_impl::<f64>(config, opts),
    })?
}

fn train_impl<S: Scalar + Send + Sync>(config: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    let start = Instant::now();
    let model = Model::new(config.model.clone())?;
    let train_data = config.dataset(Split::Train)?;
    let valid_data = config.dataset(Split::Valid)?;
    let tc = &config.train;
    let step = tc.step();
    let dir = &config.output.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let metrics_path = config.metrics_path();
    let latest = dir.join(LATEST);
    let layers = model.config.num_layers();
    let eval = |params: &ParameterStore<S>, data: &SequenceDataset| {
        evaluate_dataset(&model, params, data, tc.eval_batch_size, tc.seed, config.data.noise_width)
    };
    let row = |e: Evaluation, split: &str, epoch: u64, iteration: u64| {
        let it = iteration.saturating_sub(1);
        MetricsRow {
            iteration,
            epoch,
            split: split.to_string(),
            elbo: e.elbo,
            reconstruction: e.reconstruction,
            kl_per_layer: e.kl_per_layer,
            lambda: step.lambda(it),
            lr: step.lr(it),
            wall_time: start.elapsed().as_secs_f64(),
        }
    };
    let save = |params: &ParameterStore<S>, adam: &Adam<S>, epoch: u64, iteration: u64| -> Result<(), CliError> {
        let ck = Checkpoint::new(config, epoch, iteration, params, adam);
        ck.save(&dir.join(epoch_checkpoint_name(epoch)))?;
        ck.save(&latest)
    };

    let mut rows = Vec::new();
    let (mut params, mut adam, mut epoch, mut iteration, resumed_from) = if latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        if !same_run(&ck.config, config) {
            return Err(CliError::Checkpoint(format!(
                "{} belongs to a different run configuration",
                latest.display()
            )));
        }
        metrics::truncate_after(&metrics_path, ck.epoch)?;
        (ck.params::<S>(), ck.adam::<S>(), ck.epoch, ck.iteration, Some(ck.epoch))
    } else {
        let params = model.init::<S, _>(&mut stream(tc.seed, purpose::INIT, 0));
        let adam = Adam::new(AdamConfig::default(), &params);
        metrics::create(&metrics_path, layers)?;
        let initial = [row(eval(&params, &train_data)?, "train", 0, 0), row(eval(&params, &valid_data)?, "valid", 0, 0)];
        metrics::append(&metrics_path, &initial)?;
        rows.extend(initial);
        save(&params, &adam, 0, 0)?;
        (params, adam, 0, 0, None)
    };

    let last = opts.stop_at_epoch.map_or(tc.epochs, |s| s.min(tc.epochs));
    while epoch < last {
        epoch += 1;
        let mut acc = Accumulator::default();
        for idx in batch_indices(train_data.len(), tc.batch_size, true, tc.seed, epoch) {
            let seqs = prepare(&train_data, &idx, config.data.noise_width, &mut stream(tc.seed, purpose::DEQUANTIZE, iteration))?;
            let batch = make_batch::<S>(&seqs.iter().collect::<Vec<_>>(), model.config.frame_width, model.config.stride_product())?;
            let noise = sample_noise(&model.config, batch.size(), batch.frames(), &mut stream(tc.seed, purpose::TRAIN_NOISE, iteration));
            let report = train_step(&model, &mut params, &mut adam, &batch, &noise, iteration, &step)
                .map_err(|source| CliError::Diverged { epoch, iteration, source })?;
            acc.add(&report, idx.len());
            iteration += 1;
        }
        // rows go first: a crash before the checkpoint lands is undone by
        // truncation on resume
        let epoch_rows = [row(acc.finish(), "train", epoch, iteration), row(eval(&params, &valid_data)?, "valid", epoch, iteration)];
        metrics::append(&metrics_path, &epoch_rows)?;
        rows.extend(epoch_rows);
        save(&params, &adam, epoch, iteration)?;
    }
    Ok(TrainSummary {
        epoch,
        iteration,
        resumed_from,
        rows,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Sequence file to evaluate; the config's validation data otherwise.
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    /// CSV to write the result row to.
    pub out: Option<PathBuf>,
    pub threads: usize,
}

pub fn eval(checkpoint: &Path, opts: &EvalOptions) -> Result<(Evaluation, MetricsRow), CliError> {
    let start = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let config = &ck.config;
    let model = Model::new(config.model.clone())?;
    let data = match &opts.data {
        Some(p) => {
            let d = SequenceDataset::load(p, Split::Test).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            check_dataset(&config.model, &d)?;
            d
        }
        None => config.dataset(Split::Valid)?,
    };
    let seed = opts.seed.unwrap_or(config.train.seed);
    let (bs, nw) = (config.train.eval_batch_size, config.data.noise_width);
    let e = with_threads(opts.threads, || match config.train.precision {
        Precision::F32 => evaluate_dataset(&model, &ck.params::<f32>(), &data, bs, seed, nw),
        Precision::F64 => evaluate_dataset(&model, &ck.params::<f64>(), &data, bs, seed, nw),
    })??;
    let step = config.train.step();
    let it = ck.iteration.saturating_sub(1);
    let row = MetricsRow {
        iteration: ck.iteration,
        epoch: ck.epoch,
        split: "eval".into(),
        elbo: e.elbo,
        reconstruction: e.reconstruction,
        kl_per_layer: e.kl_per_layer.clone(),
        lambda: step.lambda(it),
        lr: step.lr(it),
        wall_time: start.elapsed().as_secs_f64(),
    };
    if let Some(out) = &opts.out {
        metrics::create(out, model.config.num_layers())?;
        metrics::append(out, std::slice::from_ref(&row))?;
    }
    Ok((e, row))
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub frames: usize,
    /// Sequence file whose sequences (equal lengths, multiples of FW) are
    /// continued.
    pub prefix: Option<PathBuf>,
    /// Unprefixed sequences to draw when no prefix is given.
    pub count: usize,
    pub seed: u64,
    pub greedy: bool,
    pub out: PathBuf,
    pub text: Option<PathBuf>,
    pub threads: usize,
}

pub fn sample(checkpoint: &Path, opts: &SampleOptions) -> Result<SequenceDataset, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let config = &ck.config.model;
    let model = Model::new(config.clone())?;
    let (prefix, kinds) = match &opts.prefix {
        Some(p) => {
            let d = SequenceDataset::load(p, Split::Test).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            if d.channels() != config.channels {
                return Err(CliError::Data(format!(
                    "prefix has {} channels, model expects {}",
                    d.channels(),
                    config.channels
                )));
            }
            (prefix_tensor(config, &d)?, d.kinds)
        }
        None => {
            let kind = if config.head.is_binary() { ChannelKind::Binary } else { ChannelKind::Real };
            (Tensor::zeros([opts.count, config.frame_channels(), 0]), vec![kind; config.channels])
        }
    };
    let generated = with_threads(opts.threads, || match ck.config.train.precision {
        Precision::F32 => model.generate(&ck.params::<f32>(), &prefix.cast(), opts.frames, opts.seed, opts.greedy).map(|t| t.cast()),
        Precision::F64 => model.generate(&ck.params::<f64>(), &prefix, opts.frames, opts.seed, opts.greedy),
    })??;
    let (b, p, t) = generated.dims3("sample")?;
    let mut sequences = Vec::with_capacity(b);
    for row in 0..b {
        let framed = Tensor::new([p, t], generated.data()[row * p * t..][..p * t].to_vec())?;
        sequences.push(unframe(&framed, config.frame_width)?);
    }
    let out = SequenceDataset::new(sequences, kinds, Split::Test)?;
    out.save(&opts.out).map_err(|e| CliError::Data(format!("{}: {e}", opts.out.display())))?;
    if let Some(text) = &opts.text {
        let f = std::fs::File::create(text).map_err(|e| CliError::io(text, e))?;
        let mut w = std::io::BufWriter::new(f);
        out.write_text(&mut w)?;
    }
    Ok(out)
}

fn prefix_tensor(config: &ModelConfig, d: &SequenceDataset) -> Result<Tensor<f64>, CliError> {
    let len = d.sequences.first().map_or(0, |s| s.shape()[1]);
    if d.sequences.iter().any(|s| s.shape()[1] != len) {
        return Err(CliError::Data("prefix sequences must share one length".into()));
    }
    if len % config.frame_width != 0 {
        return Err(CliError::Data(format!(
            "prefix length {len} is not a multiple of the frame width {}",
            config.frame_width
        )));
    }
    let mut data = Vec::with_capacity(d.len() * len * config.channels);
    for s in &d.sequences {
        data.extend_from_slice(frame(s, config.frame_width)?.data());
    }
    Ok(Tensor::new([d.len(), config.frame_channels(), len / config.frame_width], data)?)
}

/// Per-layer and total parameter and multiply-accumulate counts for one
/// or more models side by side.
pub fn complexity_report(models: &[(String, ModelConfig)], frames: usize) -> Result<String, CliError> {
    let mut costs = Vec::with_capacity(models.len());
    for (_, m) in models {
        costs.push(Model::new(m.clone())?.complexity(frames));
    }
    let mut out = String::new();
    writeln!(out, "frames: {frames}").unwrap();
    let layers = models.iter().map(|(_, m)| m.num_layers()).max().unwrap_or(0);
    let mut head = format!("{:<8}", "layer");
    for (name, _) in models {
        head += &format!(" | {:<44}", name);
    }
    writeln!(out, "{head}").unwrap();
    let mut sub = format!("{:<8}", "");
    for _ in models {
        sub += &format!(" | {:>8} {:>14} {:>20}", "S(l)", "params", "MACs");
    }
    writeln!(out, "{sub}").unwrap();
    for l in 0..layers {
        let mut line = format!("{:<8}", l + 1);
        for ((_, m), c) in models.iter().zip(&costs) {
            match c.layers.get(l) {
                Some(lc) => line += &format!(" | {:>8} {:>14} {:>20}", m.cumulative_strides()[l], lc.params, lc.macs),
                None => line += &format!(" | {:>44}", "-"),
            }
        }
        writeln!(out, "{line}").unwrap();
    }
    let mut total = format!("{:<8}", "total");
    for c in &costs {
        total += &format!(" | {:>8} {:>14} {:>20}", "", c.total_params, c.total_macs);
    }
    writeln!(out, "{total}").unwrap();
    if costs.len() >= 2 {
        let (a, b) = (costs[0].total_macs, costs[1].total_macs);
        let rel = if a <= b { "<=" } else { ">" };
        writeln!(out, "{} total MACs {a} {rel} {} total MACs {b}", models[0].0, models[1].0).unwrap();
    }
    Ok(out)
}

/// Generates a synthetic dataset from a TOML `SyntheticSpec`.
pub fn synth(spec_path: &Path, out: &Path, text: Option<&Path>) -> Result<SequenceDataset, CliError> {
    let raw = std::fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let spec: SyntheticSpec = toml::from_str(&raw).map_err(|e| CliError::Config(e.to_string()))?;
    let d = generate_synthetic(&spec, Split::Train)?;
    d.save(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    if let Some(text) = text {
        let f = std::fs::File::create(text).map_err(|e| CliError::io(text, e))?;
        d.write_text(&mut std::io::BufWriter::new(f))?;
    }
    Ok(d)
}
