//! Sequence datasets: framing, padding, dequantization noise, a synthetic
//! regime-switching generator and the on-disk formats.
//!
//! A raw sequence is a `[channels, length]` tensor. Framing groups `FW`
//! consecutive samples of every channel into one model step, giving
//! `[channels·FW, length/FW]` with framed channel `c·FW + j` holding sample
//! `j` of channel `c`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{purpose, stream};
use crate::tensor::{read_u64, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MSTCNSEQ";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Real,
    Binary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<Tensor<f64>>,
    pub kinds: Vec<ChannelKind>,
    pub split: Split,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<Tensor<f64>>, kinds: Vec<ChannelKind>, split: Split) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if s.rank() != 2 || s.shape()[0] != kinds.len() {
                return Err(Error::Format(format!(
                    "sequence {i} has shape {:?}, expected [{}, length]",
                    s.shape(),
                    kinds.len()
                )));
            }
        }
        Ok(Self { sequences, kinds, split })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.kinds.len()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.shape()[1]).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.sequences.len() as u64).to_le_bytes())?;
        w.write_all(&(self.kinds.len() as u64).to_le_bytes())?;
        let flags: Vec<u8> = self.kinds.iter().map(|k| u8::from(*k == ChannelKind::Binary)).collect();
        w.write_all(&flags)?;
        for s in &self.sequences {
            s.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, split: Split) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a sequence file (bad magic)".into()));
        }
        let version = read_u64(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported sequence file version {version}")));
        }
        let count = read_u64(r)? as usize;
        let channels = read_u64(r)? as usize;
        let mut flags = vec![0u8; channels];
        r.read_exact(&mut flags)?;
        let kinds = flags
            .iter()
            .map(|&f| match f {
                0 => Ok(ChannelKind::Real),
                1 => Ok(ChannelKind::Binary),
                _ => Err(Error::Format(format!("unknown channel kind flag {f}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let sequences = (0..count).map(|_| Tensor::read_from(r)).collect::<Result<Vec<_>>>()?;
        Self::new(sequences, kinds, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), split)
    }

    /// Text form: one sequence per line, channels separated by `;`, values
    /// by `,`. A single-channel sequence is a plain comma-separated line.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        for s in &self.sequences {
            let n = s.shape()[1];
            let line: Vec<String> = s
                .data()
                .chunks(n.max(1))
                .take(self.channels())
                .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            writeln!(w, "{}", line.join(";"))?;
        }
        Ok(())
    }

    /// Reads the text form. Blank lines are skipped; every channel is real
    /// unless `kinds` says otherwise.
    pub fn read_text<R: BufRead>(r: R, kinds: Option<Vec<ChannelKind>>, split: Split) -> Result<Self> {
        let mut sequences = Vec::new();
        let mut channels = kinds.as_ref().map(Vec::len);
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rows = line
                .split(';')
                .map(|part| {
                    part.split(',')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|e| Error::Format(format!("line {}: {v:?}: {e}", no + 1)))
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let c = rows.len();
            if *channels.get_or_insert(c) != c {
                return Err(Error::Format(format!("line {}: {c} channels, expected {}", no + 1, channels.unwrap())));
            }
            let n = rows[0].len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::Format(format!("line {}: channels differ in length", no + 1)));
            }
            sequences.push(Tensor::new([c, n], rows.concat())?);
        }
        let kinds = kinds.unwrap_or_else(|| vec![ChannelKind::Real; channels.unwrap_or(1)]);
        Self::new(sequences, kinds, split)
    }
}

/// `[C, L] → [C·FW, L/FW]`.
pub fn frame<S: Scalar>(y: &Tensor<S>, fw: usize) -> Result<Tensor<S>> {
    let (c, l) = dims2(y, "frame")?;
    if fw == 0 || l % fw != 0 {
        return Err(Error::invalid("frame", format!("length {l} is not a multiple of frame width {fw}")));
    }
    let n = l / fw;
    let mut out = vec![S::zero(); c * l];
    for ch in 0..c {
        for t in 0..n {
            for j in 0..fw {
                out[(ch * fw + j) * n + t] = y.data()[ch * l + t * fw + j];
            }
        }
    }
    Tensor::new([c * fw, n], out)
}

/// Inverse of [`frame`].
pub fn unframe<S: Scalar>(y: &Tensor<S>, fw: usize) -> Result<Tensor<S>> {
    let (cf, n) = dims2(y, "unframe")?;
    if fw == 0 || cf % fw != 0 {
        return Err(Error::invalid("unframe", format!("{cf} channels is not a multiple of frame width {fw}")));
    }
    let c = cf / fw;
    let l = n * fw;
    let mut out = vec![S::zero(); c * l];
    for ch in 0..c {
        for t in 0..n {
            for j in 0..fw {
                out[ch * l + t * fw + j] = y.data()[(ch * fw + j) * n + t];
            }
        }
    }
    Tensor::new([c, l], out)
}

/// Right-pads with zeros to the next multiple; returns the original length.
pub fn pad_to_multiple<S: Scalar>(y: &Tensor<S>, multiple: usize) -> Result<(Tensor<S>, usize)> {
    let (c, l) = dims2(y, "pad_to_multiple")?;
    if multiple == 0 {
        return Err(Error::invalid("pad_to_multiple", "multiple must be at least 1"));
    }
    let target = l.div_ceil(multiple) * multiple;
    Ok((pad_to(y, c, l, target), l))
}

fn pad_to<S: Scalar>(y: &Tensor<S>, c: usize, l: usize, target: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); c * target];
    for ch in 0..c {
        out[ch * target..][..l].copy_from_slice(&y.data()[ch * l..][..l]);
    }
    Tensor::new([c, target], out).expect("shape matches")
}

/// A frame is valid when its first sample lies inside the original sequence.
pub fn frame_mask(original_len: usize, fw: usize, frames: usize) -> Vec<f64> {
    (0..frames).map(|t| f64::from(u8::from(t * fw < original_len))).collect()
}

/// Adds `Uniform(−w/2, w/2)` noise to real channels.
pub fn dequantize<R: Rng + ?Sized>(y: &Tensor<f64>, kinds: &[ChannelKind], width: f64, rng: &mut R) -> Result<Tensor<f64>> {
    let (c, l) = dims2(y, "dequantize")?;
    if c != kinds.len() {
        return Err(Error::invalid("dequantize", format!("{c} channels but {} kinds", kinds.len())));
    }
    if !(width >= 0.0 && width.is_finite()) {
        return Err(Error::invalid("dequantize", format!("noise width must be non-negative, got {width}")));
    }
    let mut out = y.clone();
    if width == 0.0 {
        return Ok(out);
    }
    for (ch, kind) in kinds.iter().enumerate() {
        if *kind == ChannelKind::Real {
            for v in &mut out.data_mut()[ch * l..][..l] {
                *v += rng.random_range(-0.5..0.5) * width;
            }
        }
    }
    Ok(out)
}

fn dims2<S: Scalar>(y: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match y.shape() {
        &[c, l] => Ok((c, l)),
        s => Err(Error::invalid(op, format!("expected [channels, length], got {s:?}"))),
    }
}

/// Pads, frames and stacks sequences into one batch.
///
/// All sequences are padded to the longest one, rounded up to a multiple of
/// `fw · multiple`; the mask marks frames that start inside the original
/// sequence.
pub fn make_batch<S: Scalar>(sequences: &[&Tensor<f64>], fw: usize, multiple: usize) -> Result<Batch<S>> {
    let first = sequences.first().ok_or_else(|| Error::invalid("make_batch", "empty batch"))?;
    let c = first.shape()[0];
    let longest = sequences.iter().map(|s| s.shape()[1]).max().unwrap_or(0);
    let unit = fw * multiple;
    let target = longest.div_ceil(unit).max(1) * unit;
    let frames = target / fw;
    let b = sequences.len();
    let mut y = Vec::with_capacity(b * c * target);
    let mut mask = Vec::with_capacity(b * frames);
    for s in sequences {
        let (sc, l) = dims2(s, "make_batch")?;
        if sc != c {
            return Err(Error::invalid("make_batch", format!("sequences have {c} and {sc} channels")));
        }
        let framed = frame(&pad_to(s, c, l, target), fw)?;
        y.extend(framed.data().iter().map(|&v| S::of(v)));
        mask.extend(frame_mask(l, fw, frames).into_iter().map(S::of));
    }
    Ok(Batch {
        y: Tensor::new([b, c * fw, frames], y)?,
        mask: Tensor::new([b, frames], mask)?,
    })
}

/// Sequence indices grouped into batches, shuffled with a stream keyed by
/// `(seed, epoch)` when `shuffle` is set.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut stream(seed, purpose::SHUFFLE, epoch));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub regime_count: usize,
    /// Steps between regime redraws.
    pub regime_dwell: usize,
    /// AR(1) coefficient per regime.
    pub coefficients: Vec<f64>,
    /// Innovation standard deviation per regime.
    pub noise_scales: Vec<f64>,
    /// Per-regime mean the process reverts to.
    #[serde(default)]
    pub offsets: Vec<f64>,
    pub length: usize,
    pub count: usize,
    pub seed: u64,
    /// Emit `1{x > 0}` instead of the real value.
    #[serde(default)]
    pub binary: bool,
}

impl SyntheticSpec {
    /// Two regimes, a smooth and a rough one, around distinct levels.
    pub fn two_regime(count: usize, length: usize, seed: u64) -> Self {
        Self {
            regime_count: 2,
            regime_dwell: 8,
            coefficients: vec![0.9, -0.5],
            noise_scales: vec![0.3, 0.6],
            offsets: vec![1.0, -1.0],
            length,
            count,
            seed,
            binary: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("synthetic", m));
        if self.regime_count == 0 || self.regime_dwell == 0 {
            return bad("regime_count and regime_dwell must be positive".into());
        }
        if self.coefficients.len() != self.regime_count || self.noise_scales.len() != self.regime_count {
            return bad(format!("need {} coefficients and noise scales", self.regime_count));
        }
        if !self.offsets.is_empty() && self.offsets.len() != self.regime_count {
            return bad(format!("need 0 or {} offsets", self.regime_count));
        }
        if self.coefficients.iter().any(|a| !(a.abs() < 1.0)) {
            return bad("AR coefficients must lie in (-1, 1)".into());
        }
        if self.noise_scales.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// Regime-switching AR(1) sequences and the regime active at every step.
///
/// Every `regime_dwell` steps the regime is redrawn uniformly; within a
/// regime `x_t = m + a·(x_{t-1} − m) + σ·ε_t`.
pub fn generate_synthetic_labeled(spec: &SyntheticSpec, split: Split) -> Result<(SequenceDataset, Vec<Vec<usize>>)> {
    spec.validate()?;
    let mut sequences = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = stream(spec.seed, purpose::SYNTHETIC, i as u64);
        let mut x = 0.0;
        let mut regime = 0;
        let mut values = Vec::with_capacity(spec.length);
        let mut regimes = Vec::with_capacity(spec.length);
        for t in 0..spec.length {
            if t % spec.regime_dwell == 0 {
                regime = rng.random_range(0..spec.regime_count);
            }
            let m = spec.offsets.get(regime).copied().unwrap_or(0.0);
            let e: f64 = rng.sample(StandardNormal);
            x = m + spec.coefficients[regime] * (x - m) + spec.noise_scales[regime] * e;
            values.push(if spec.binary { f64::from(u8::from(x > 0.0)) } else { x });
            regimes.push(regime);
        }
        sequences.push(Tensor::new([1, spec.length], values)?);
        labels.push(regimes);
    }
    let kind = if spec.binary { ChannelKind::Binary } else { ChannelKind::Real };
    Ok((SequenceDataset::new(sequences, vec![kind], split)?, labels))
}

pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<SequenceDataset> {
    generate_synthetic_labeled(spec, split).map(|(d, _)| d)
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}
