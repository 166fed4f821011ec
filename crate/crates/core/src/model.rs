//! The multiscale hierarchical VAE.
//!
//! Layer `l` (1-based) runs at `T / S^(l)` steps where `S^(l) = Π_{j≤l} S_j`.
//! The bottom-up pass maps the framed observations to features `d_l`; the
//! top-down pass walks from layer `L` to 1:
//!
//! ```text
//! h_L = Wavenet1x1(Delay(d_L))
//! h_l = Wavenet1x1([g_l, Delay(d_l)])                 l < L
//! p(z_l | h_l)       from h_l
//! q(z_l | h_l, d_l)  from [h_l, d_l]
//! g_{l-1} = CondWavenetUp1x1(h_l, z_l)                upsampled by S_l
//! η = Conv1x1(g_0)
//! ```
//!
//! `Delay` shifts by one step at the layer's own rate, so the prior for a
//! coarse step only sees frames before that step's window.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{kl_diag_gaussians, DiagGaussian, GaussianHead, HeadKind, PredictiveHead};
use crate::error::{Error, Result};
use crate::layers::{Conv1d, Conv1dSpec, Resample, WavenetBlock, WavenetStack, WavenetStackSpec};
use crate::rng::{purpose, stream};
use crate::tensor::{Graph, ParameterStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filters: usize,
    pub latent_dim: usize,
    /// Downsampling factor between the previous layer and this one.
    pub stride: usize,
    pub bottom_up_dilations: Vec<usize>,
    pub top_down_blocks: usize,
}

impl LayerSpec {
    pub fn bottom_up_blocks(&self) -> usize {
        self.bottom_up_dilations.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_width: usize,
    /// Raw channels per sample before framing.
    pub channels: usize,
    pub kernel_size: usize,
    pub head: PredictiveHead,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Channels of a framed observation, `FW · channels`.
    pub fn frame_channels(&self) -> usize {
        self.frame_width * self.channels
    }

    /// Cumulative stride `S^(l)` for `l = 1..=L`.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(1, |acc, l| {
                *acc *= l.stride;
                Some(*acc)
            })
            .collect()
    }

    /// Framed lengths must be multiples of this.
    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_config", msg));
        if self.layers.is_empty() {
            return bad("at least one layer required".into());
        }
        if self.frame_width == 0 || self.channels == 0 || self.kernel_size == 0 {
            return bad("frame_width, channels and kernel_size must be positive".into());
        }
        if self.head.data_dim != self.frame_channels() {
            return bad(format!(
                "head covers {} channels but frames have {} (frame_width {} x channels {})",
                self.head.data_dim,
                self.frame_channels(),
                self.frame_width,
                self.channels
            ));
        }
        if self.layers[0].stride != 1 {
            return bad("the first layer runs at the frame rate; its stride must be 1".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.filters == 0 || l.latent_dim == 0 || l.stride == 0 || l.top_down_blocks == 0 {
                return bad(format!("layer {}: filters, latent_dim, stride and top_down_blocks must be positive", i + 1));
            }
            if l.bottom_up_dilations.is_empty() || l.bottom_up_dilations.contains(&0) {
                return bad(format!("layer {}: bottom-up dilations must be non-empty and positive", i + 1));
            }
        }
        Ok(())
    }
}

/// Named configurations.
pub mod presets {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        frame_width: usize,
        filters: &[usize],
        latents: &[usize],
        strides: &[usize],
        dilations: &[Vec<usize>],
        top_down_blocks: usize,
        head: HeadKind,
    ) -> ModelConfig {
        let layers = (0..filters.len())
            .map(|i| LayerSpec {
                filters: filters[i],
                latent_dim: latents[i],
                stride: strides[i],
                bottom_up_dilations: dilations[i].clone(),
                top_down_blocks,
            })
            .collect();
        ModelConfig {
            frame_width,
            channels: 1,
            kernel_size: 2,
            head: PredictiveHead {
                kind: head,
                data_dim: frame_width,
            },
            layers,
        }
    }

    fn flat_dilations() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 4, 8, 16]; 5]
    }

    /// Unit dilations everywhere except the topmost layer.
    fn multiscale_dilations(top_dilated: bool) -> Vec<Vec<usize>> {
        let mut d = vec![vec![1; 5]; 5];
        if top_dilated {
            d[4] = vec![1, 2, 4, 8, 16];
        }
        d
    }

    pub fn speech_fw200_multiscale() -> ModelConfig {
        build(200, &[256; 5], &[64; 5], &[1, 2, 2, 2, 1], &multiscale_dilations(false), 2, HeadKind::GaussianMixture { components: 10 })
    }

    pub fn speech_fw200_flat() -> ModelConfig {
        build(200, &[256; 5], &[64; 5], &[1; 5], &flat_dilations(), 2, HeadKind::GaussianMixture { components: 10 })
    }

    pub fn speech_fw25_multiscale() -> ModelConfig {
        build(
            25,
            &[96, 128, 192, 256, 256],
            &[24, 32, 48, 64, 64],
            &[1, 2, 2, 2, 1],
            &multiscale_dilations(true),
            2,
            HeadKind::GaussianMixture { components: 10 },
        )
    }

    pub fn speech_fw25_flat() -> ModelConfig {
        build(25, &[96; 5], &[24; 5], &[1; 5], &flat_dilations(), 2, HeadKind::GaussianMixture { components: 10 })
    }

    pub fn speech_fw2_multiscale() -> ModelConfig {
        build(
            2,
            &[26, 58, 128, 256, 256],
            &[1, 5, 25, 64, 64],
            &[1, 5, 5, 4, 1],
            &multiscale_dilations(true),
            2,
            HeadKind::GaussianMixture { components: 2 },
        )
    }

    pub fn speech_fw2_flat() -> ModelConfig {
        build(2, &[26; 5], &[1; 5], &[1; 5], &flat_dilations(), 2, HeadKind::GaussianMixture { components: 2 })
    }

    pub fn by_name(name: &str) -> Option<ModelConfig> {
        Some(match name {
            "speech_fw200_multiscale" => speech_fw200_multiscale(),
            "speech_fw200_flat" => speech_fw200_flat(),
            "speech_fw25_multiscale" => speech_fw25_multiscale(),
            "speech_fw25_flat" => speech_fw25_flat(),
            "speech_fw2_multiscale" => speech_fw2_multiscale(),
            "speech_fw2_flat" => speech_fw2_flat(),
            _ => return None,
        })
    }

    pub const NAMES: &[&str] = &[
        "speech_fw200_multiscale",
        "speech_fw200_flat",
        "speech_fw25_multiscale",
        "speech_fw25_flat",
        "speech_fw2_multiscale",
        "speech_fw2_flat",
    ];
}

/// Framed observations with a per-frame validity mask.
#[derive(Clone, Debug)]
pub struct Batch<S: Scalar> {
    /// `[batch, frame_channels, frames]`
    pub y: Tensor<S>,
    /// `[batch, frames]`, 1 for real frames and 0 for padding.
    pub mask: Tensor<S>,
}

impl<S: Scalar> Batch<S> {
    /// Every frame valid.
    pub fn unmasked(y: Tensor<S>) -> Result<Self> {
        let (b, _, t) = y.dims3("batch")?;
        Ok(Self {
            y,
            mask: Tensor::full([b, t], S::one()),
        })
    }

    pub fn size(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.y.shape()[2]
    }

    /// Rows repeated `k` times each, in place (`r0,r0,..,r1,r1,..`).
    pub fn repeat_rows(&self, k: usize) -> Result<Self> {
        Ok(Self {
            y: repeat_rows(&self.y, k)?,
            mask: repeat_rows(&self.mask, k)?,
        })
    }
}

fn repeat_rows<S: Scalar>(t: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let b = t.shape()[0];
    let row = t.len() / b.max(1);
    let mut data = Vec::with_capacity(t.len() * k);
    for r in t.data().chunks(row.max(1)).take(b) {
        for _ in 0..k {
            data.extend_from_slice(r);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[0] *= k;
    Tensor::new(shape, data)
}

/// Where each layer's latent sequence comes from.
#[derive(Clone, Copy, Debug)]
pub enum LatentSource<'a, S: Scalar> {
    /// Reparameterized posterior draws with the given standard-normal noise.
    Posterior(&'a [Tensor<S>]),
    /// Prior draws; the posterior is not evaluated.
    Prior(&'a [Tensor<S>]),
    /// Fixed latent values; both prior and posterior are evaluated at them.
    Given(&'a [Tensor<S>]),
}

impl<S: Scalar> LatentSource<'_, S> {
    fn tensors(&self) -> &[Tensor<S>] {
        match self {
            Self::Posterior(t) | Self::Prior(t) | Self::Given(t) => t,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatentLayer {
    pub prior: DiagGaussian,
    pub posterior: Option<DiagGaussian>,
    pub z: Var,
}

/// Per-layer prior, posterior and sample of one forward pass.
#[derive(Clone, Debug)]
pub struct LatentBundle {
    /// Index 0 is layer 1.
    pub layers: Vec<LatentLayer>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub d: Vec<Var>,
    pub h: Vec<Var>,
    pub latents: LatentBundle,
    /// Predictive-head features `[batch, feature_dim, frames]`.
    pub eta: Var,
}

/// How per-unit KL values are grouped before thresholding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlGrouping {
    /// One unit per latent dimension and time step.
    #[default]
    PerUnit,
    /// Latent dimensions summed at each time step.
    PerPosition,
    /// Everything in a layer summed per sequence.
    PerLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Elbo,
    FreeBits,
    #[default]
    LinearFreeBits,
}

/// Graph handles for the ELBO pieces of a posterior pass.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub forward: Forward,
    /// Masked log-likelihood summed over time, `[batch]`.
    pub reconstruction_rows: Var,
    /// Batch-mean reconstruction (scalar).
    pub reconstruction: Var,
    /// Masked elementwise KL per layer, `[batch, Z_l, T_l]`.
    pub kl_units: Vec<Var>,
    /// Masks matching `kl_units`.
    pub kl_masks: Vec<Tensor<f64>>,
    /// Batch-mean KL per layer (scalars).
    pub kl: Vec<Var>,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub reconstruction: f64,
    pub kl_per_layer: Vec<f64>,
    pub elbo: f64,
    /// Value of the training objective (equal to `elbo` when it is the ELBO).
    pub objective: f64,
    pub lambda: f64,
}

/// Continuous halving: `v0 · 2^(-iteration / period)`.
pub fn halving_schedule(iteration: u64, v0: f64, period: f64) -> f64 {
    v0 * (-(iteration as f64) / period).exp2()
}

/// Free-bits threshold at an iteration, halving every 300 000 iterations.
pub fn lambda_schedule(iteration: u64, lambda0: f64) -> f64 {
    halving_schedule(iteration, lambda0, 300_000.0)
}

pub fn delay<S: Scalar>(g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
    let t = g.shape(x).get(2).copied().ok_or_else(|| Error::invalid("delay", "expected [batch, channels, time]"))?;
    let padded = g.pad(x, 2, 1, 0)?;
    g.slice(padded, 2, 0, t)
}

/// Standard-normal noise for each layer, `[batch, Z_l, frames / S^(l)]`.
///
/// Values are drawn frame by frame, visiting every layer whose step starts
/// at that frame, so the noise for a shorter sequence is a prefix of the
/// noise for a longer one.
pub fn sample_noise<S: Scalar, R: Rng + ?Sized>(config: &ModelConfig, batch: usize, frames: usize, rng: &mut R) -> Vec<Tensor<S>> {
    let cum = config.cumulative_strides();
    let dims: Vec<(usize, usize)> = config.layers.iter().zip(&cum).map(|(l, &s)| (l.latent_dim, frames / s)).collect();
    let mut data: Vec<Vec<S>> = dims.iter().map(|&(z, t)| vec![S::zero(); batch * z * t]).collect();
    for n in 0..frames {
        for (i, &s) in cum.iter().enumerate() {
            let (z, t) = dims[i];
            if n % s != 0 || n / s >= t {
                continue;
            }
            for b in 0..batch {
                for zz in 0..z {
                    data[i][(b * z + zz) * t + n / s] = S::of(rng.sample(StandardNormal));
                }
            }
        }
    }
    data.into_iter()
        .zip(dims)
        .map(|(d, (z, t))| Tensor::new([batch, z, t], d).expect("shape matches"))
        .collect()
}

pub fn zero_noise<S: Scalar>(config: &ModelConfig, batch: usize, frames: usize) -> Vec<Tensor<S>> {
    config
        .layers
        .iter()
        .zip(config.cumulative_strides())
        .map(|(l, s)| Tensor::zeros([batch, l.latent_dim, frames / s]))
        .collect()
}

/// Parameter and multiply-accumulate counts of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub frames: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
}

#[derive(Clone, Debug)]
struct TopDownLayer {
    h: WavenetStack,
    prior: GaussianHead,
    posterior: GaussianHead,
    /// Produces `g_{l-1}`; for layers above the first the last block
    /// upsamples to the next layer's rate and width.
    out: Vec<WavenetBlock>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    bottom_up: Vec<WavenetStack>,
    top_down: Vec<TopDownLayer>,
    eta: Conv1d,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut bottom_up = Vec::new();
        let mut top_down = Vec::new();
        for (i, l) in config.layers.iter().enumerate() {
            let n = i + 1;
            let below = if i == 0 { config.frame_channels() } else { config.layers[i - 1].filters };
            bottom_up.push(WavenetStack::new(
                &format!("bu{n}"),
                WavenetStackSpec {
                    in_channels: below,
                    cond_channels: 0,
                    filters: l.filters,
                    kernel_size: k,
                    dilations: l.bottom_up_dilations.clone(),
                    one_by_one: false,
                    resample: if i == 0 { Resample::None } else { Resample::Down(l.stride) },
                },
            )?);

            let top = i + 1 == config.num_layers();
            let h = WavenetStack::new(
                &format!("td{n}.h"),
                WavenetStackSpec {
                    in_channels: if top { l.filters } else { 2 * l.filters },
                    cond_channels: 0,
                    filters: l.filters,
                    kernel_size: 1,
                    dilations: vec![1; l.top_down_blocks],
                    one_by_one: true,
                    resample: Resample::None,
                },
            )?;
            let prior = GaussianHead::new(&format!("td{n}.prior"), l.filters, l.latent_dim)?;
            let posterior = GaussianHead::new(&format!("td{n}.post"), 2 * l.filters, l.latent_dim)?;
            let mut out = Vec::new();
            for b in 0..l.top_down_blocks {
                let last = b + 1 == l.top_down_blocks;
                let (filters, resample) = if last && i > 0 {
                    (config.layers[i - 1].filters, Resample::Up(l.stride))
                } else {
                    (l.filters, Resample::None)
                };
                out.push(WavenetBlock::new(
                    &format!("td{n}.out.{b}"),
                    l.filters,
                    l.latent_dim,
                    filters,
                    1,
                    1,
                    resample,
                )?);
            }
            top_down.push(TopDownLayer { h, prior, posterior, out });
        }
        let eta = Conv1d::new("eta", Conv1dSpec::pointwise(config.layers[0].filters, config.head.feature_dim()))?;
        Ok(Self {
            config,
            bottom_up,
            top_down,
            eta,
        })
    }

    /// Fresh parameters in a new store.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterStore<S> {
        let mut store = ParameterStore::new();
        for s in &self.bottom_up {
            s.init(&mut store, rng);
        }
        for l in &self.top_down {
            l.h.init(&mut store, rng);
            l.prior.init(&mut store, rng);
            l.posterior.init(&mut store, rng);
            for b in &l.out {
                b.init(&mut store, rng);
            }
        }
        self.eta.init(&mut store, rng);
        store
    }

    pub fn num_params(&self) -> usize {
        self.complexity(0).total_params
    }

    /// Parameters and forward MACs per layer for one sequence of `frames`
    /// framed steps. The output convolution of an upsampling block is
    /// charged to the layer it writes into, so every layer's count is
    /// proportional to its own length.
    pub fn complexity(&self, frames: usize) -> Complexity {
        let cum = self.config.cumulative_strides();
        let n = self.config.num_layers();
        let mut layers = vec![LayerCost::default(); n];
        for i in 0..n {
            let t = frames / cum[i];
            let t_below = if i == 0 { frames } else { frames / cum[i - 1] };
            let td = &self.top_down[i];
            let c = &mut layers[i];
            c.params += self.bottom_up[i].param_count() + td.h.param_count() + td.prior.param_count() + td.posterior.param_count();
            c.params += td.out.iter().map(WavenetBlock::param_count).sum::<usize>();
            c.macs += self.bottom_up[i].macs(t_below).total() + td.h.macs(t).total() + td.prior.macs(t) + td.posterior.macs(t);
            for b in &td.out {
                let m = b.macs(t);
                layers[i].macs += m.base;
                let dest = if matches!(b.resample, Resample::Up(_)) { i - 1 } else { i };
                layers[dest].macs += m.upsampled;
            }
        }
        layers[0].params += self.eta.spec.param_count();
        layers[0].macs += self.eta.spec.macs(frames);
        Complexity {
            frames,
            total_params: layers.iter().map(|c| c.params).sum(),
            total_macs: layers.iter().map(|c| c.macs).sum(),
            layers,
        }
    }

    fn check_input<S: Scalar>(&self, g: &Graph<'_, S>, y: Var) -> Result<(usize, usize)> {
        let (b, c, t) = g.value(y).dims3("model")?;
        if c != self.config.frame_channels() {
            return Err(Error::invalid(
                "model",
                format!("input has {c} channels, model expects {}", self.config.frame_channels()),
            ));
        }
        let m = self.config.stride_product();
        if t == 0 || t % m != 0 {
            return Err(Error::invalid(
                "model",
                format!("{t} frames is not a positive multiple of the stride product {m}; pad the sequence first"),
            ));
        }
        Ok((b, t))
    }

    /// Features `d_1..d_L`.
    pub fn bottom_up<S: Scalar>(&self, g: &mut Graph<'_, S>, y: Var) -> Result<Vec<Var>> {
        self.check_input(g, y)?;
        let mut d = Vec::with_capacity(self.bottom_up.len());
        let mut x = y;
        for (i, s) in self.bottom_up.iter().enumerate() {
            x = s.forward(g, x, None).map_err(|e| layer_err(i, e))?;
            d.push(x);
        }
        Ok(d)
    }

    pub fn top_down<S: Scalar>(&self, g: &mut Graph<'_, S>, d: &[Var], source: LatentSource<'_, S>) -> Result<(Var, Vec<Var>, LatentBundle)> {
        let n = self.config.num_layers();
        let given = source.tensors();
        if d.len() != n || given.len() != n {
            return Err(Error::invalid(
                "top_down",
                format!("expected {n} layers of features and latents, got {} and {}", d.len(), given.len()),
            ));
        }
        let mut layers = Vec::with_capacity(n);
        let mut hs = Vec::with_capacity(n);
        let mut g_above: Option<Var> = None;
        for i in (0..n).rev() {
            let td = &self.top_down[i];
            let r = (|| -> Result<(Var, LatentLayer, Var)> {
                let delayed = delay(g, d[i])?;
                let h_in = match g_above {
                    Some(ga) => g.concat(&[ga, delayed], 1)?,
                    None => delayed,
                };
                let h = td.h.forward(g, h_in, None)?;
                let prior = td.prior.forward(g, h)?;
                let expect = g.shape(prior.mean).to_vec();
                let t = &given[i];
                if t.shape() != expect.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "latent",
                        lhs: expect,
                        rhs: t.shape().to_vec(),
                    });
                }
                let posterior = match source {
                    LatentSource::Prior(_) => None,
                    _ => {
                        let q_in = g.concat(&[h, d[i]], 1)?;
                        Some(td.posterior.forward(g, q_in)?)
                    }
                };
                let value = g.constant(t.clone());
                let z = match source {
                    LatentSource::Posterior(_) => posterior.expect("evaluated").rsample(g, value)?,
                    LatentSource::Prior(_) => prior.rsample(g, value)?,
                    LatentSource::Given(_) => value,
                };
                let mut x = h;
                for b in &td.out {
                    x = b.forward(g, x, Some(z))?;
                }
                Ok((h, LatentLayer { prior, posterior, z }, x))
            })()
            .map_err(|e| layer_err(i, e))?;
            hs.push(r.0);
            layers.push(r.1);
            g_above = Some(r.2);
        }
        layers.reverse();
        hs.reverse();
        let eta = self.eta.forward(g, g_above.expect("at least one layer"))?;
        Ok((eta, hs, LatentBundle { layers }))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, y: Var, source: LatentSource<'_, S>) -> Result<Forward> {
        let d = self.bottom_up(g, y)?;
        let (eta, h, latents) = self.top_down(g, &d, source)?;
        Ok(Forward { d, h, latents, eta })
    }

    /// Posterior pass with masked reconstruction and KL terms.
    pub fn elbo_terms<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: &Batch<S>, noise: &[Tensor<S>]) -> Result<ElboTerms> {
        self.terms(g, batch, LatentSource::Posterior(noise))
    }

    fn terms<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: &Batch<S>, source: LatentSource<'_, S>) -> Result<ElboTerms> {
        let (b, t) = (batch.size(), batch.frames());
        if batch.mask.shape() != [b, t] {
            return Err(Error::ShapeMismatch {
                op: "elbo",
                lhs: batch.y.shape().to_vec(),
                rhs: batch.mask.shape().to_vec(),
            });
        }
        let y = g.constant(batch.y.clone());
        let forward = self.forward(g, y, source)?;
        let lp = self.config.head.log_prob(g, forward.eta, y)?;
        let mask = g.constant(batch.mask.clone());
        let lp = g.mul(lp, mask)?;
        let reconstruction_rows = g.sum_axis(lp, 1)?;
        let total = g.sum(reconstruction_rows)?;
        let reconstruction = g.scale(total, 1.0 / b as f64)?;

        let mut kl_units = Vec::new();
        let mut kl_masks = Vec::new();
        let mut kl = Vec::new();
        let mask64 = batch.mask.to_f64();
        for (l, s) in forward.latents.layers.iter().zip(self.config.cumulative_strides()) {
            let q = l.posterior.ok_or_else(|| Error::invalid("elbo", "posterior not evaluated"))?;
            let units = kl_diag_gaussians(g, &q, &l.prior)?;
            let shape = g.shape(units).to_vec();
            let (z, tl) = (shape[1], shape[2]);
            let mut m = vec![0.0; b * z * tl];
            for row in 0..b {
                for zz in 0..z {
                    for tt in 0..tl {
                        m[(row * z + zz) * tl + tt] = mask64[row * t + tt * s];
                    }
                }
            }
            let m = Tensor::new(shape, m)?;
            let mv = g.constant(m.cast());
            let units = g.mul(units, mv)?;
            let sum = g.sum(units)?;
            kl.push(g.scale(sum, 1.0 / b as f64)?);
            kl_units.push(units);
            kl_masks.push(m);
        }
        Ok(ElboTerms {
            forward,
            reconstruction_rows,
            reconstruction,
            kl_units,
            kl_masks,
            kl,
            batch: b,
        })
    }

    /// `reconstruction − Σ_l KL_l` as a graph scalar.
    pub fn elbo<S: Scalar>(&self, g: &mut Graph<'_, S>, terms: &ElboTerms) -> Result<Var> {
        let mut acc = terms.reconstruction;
        for &k in &terms.kl {
            acc = g.sub(acc, k)?;
        }
        Ok(acc)
    }

    /// Linear free bits: each group's KL is weighted by the detached factor
    /// `min(KL/λ, 1)`.
    pub fn linear_free_bits<S: Scalar>(&self, g: &mut Graph<'_, S>, terms: &ElboTerms, lambda: f64, grouping: KlGrouping) -> Result<Var> {
        check_lambda(lambda)?;
        let mut acc = terms.reconstruction;
        for i in 0..terms.kl_units.len() {
            let (k, _) = group(g, terms, i, grouping)?;
            let detached = g.stop_gradient(k)?;
            let ratio = g.scale(detached, 1.0 / lambda)?;
            let w = g.clamp(ratio, f64::NEG_INFINITY, 1.0)?;
            let penalty = g.mul(w, k)?;
            let sum = g.sum(penalty)?;
            let mean = g.scale(sum, 1.0 / terms.batch as f64)?;
            acc = g.sub(acc, mean)?;
        }
        Ok(acc)
    }

    /// Free bits: each group's KL is replaced by `max(KL, λ)`; padded groups
    /// contribute nothing.
    pub fn free_bits<S: Scalar>(&self, g: &mut Graph<'_, S>, terms: &ElboTerms, lambda: f64, grouping: KlGrouping) -> Result<Var> {
        check_lambda(lambda)?;
        let mut acc = terms.reconstruction;
        for i in 0..terms.kl_units.len() {
            let (k, m) = group(g, terms, i, grouping)?;
            let floored = g.clamp(k, lambda, f64::INFINITY)?;
            let mv = g.constant(m.cast());
            let penalty = g.mul(floored, mv)?;
            let sum = g.sum(penalty)?;
            let mean = g.scale(sum, 1.0 / terms.batch as f64)?;
            acc = g.sub(acc, mean)?;
        }
        Ok(acc)
    }

    pub fn objective<S: Scalar>(&self, g: &mut Graph<'_, S>, terms: &ElboTerms, kind: Objective, lambda: f64, grouping: KlGrouping) -> Result<Var> {
        match kind {
            Objective::Elbo => self.elbo(g, terms),
            Objective::FreeBits => self.free_bits(g, terms, lambda, grouping),
            Objective::LinearFreeBits => self.linear_free_bits(g, terms, lambda, grouping),
        }
    }

    pub fn report<S: Scalar>(&self, g: &Graph<'_, S>, terms: &ElboTerms, objective: Var, lambda: f64) -> ElboReport {
        let reconstruction = g.value(terms.reconstruction).item().f64();
        let kl_per_layer: Vec<f64> = terms.kl.iter().map(|&k| g.value(k).item().f64()).collect();
        ElboReport {
            reconstruction,
            elbo: reconstruction - kl_per_layer.iter().sum::<f64>(),
            kl_per_layer,
            objective: g.value(objective).item().f64(),
            lambda,
        }
    }

    /// Single-sample ELBO report without gradients.
    pub fn evaluate<S: Scalar>(&self, params: &ParameterStore<S>, batch: &Batch<S>, noise: &[Tensor<S>]) -> Result<ElboReport> {
        let mut g = Graph::with_params(params);
        let terms = self.elbo_terms(&mut g, batch, noise)?;
        let elbo = self.elbo(&mut g, &terms)?;
        Ok(self.report(&g, &terms, elbo, 0.0))
    }

    /// Per-sequence `log p(y, z) − log q(z | y)` at the given source, masked
    /// like the ELBO. `Posterior` draws from q; `Given` evaluates fixed z.
    pub fn log_weights<S: Scalar>(&self, params: &ParameterStore<S>, batch: &Batch<S>, source: LatentSource<'_, S>) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(params);
        let terms = self.terms(&mut g, batch, source)?;
        let mut w = terms.reconstruction_rows;
        for (l, m) in terms.forward.latents.layers.iter().zip(&terms.kl_masks) {
            let q = l.posterior.expect("evaluated");
            let lp = l.prior.log_prob(&mut g, l.z)?;
            let lq = q.log_prob(&mut g, l.z)?;
            let diff = g.sub(lp, lq)?;
            let mv = g.constant(m.cast());
            let diff = g.mul(diff, mv)?;
            let per_pos = g.sum_axis(diff, 2)?;
            let rows = g.sum_axis(per_pos, 1)?;
            w = g.add(w, rows)?;
        }
        Ok(g.value(w).to_f64())
    }

    /// Per-sequence `log p(y, z)` for fixed latents.
    pub fn log_joint<S: Scalar>(&self, params: &ParameterStore<S>, batch: &Batch<S>, z: &[Tensor<S>]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(params);
        let terms = self.terms(&mut g, batch, LatentSource::Given(z))?;
        let mut w = terms.reconstruction_rows;
        for (l, m) in terms.forward.latents.layers.iter().zip(&terms.kl_masks) {
            let lp = l.prior.log_prob(&mut g, l.z)?;
            let mv = g.constant(m.cast());
            let lp = g.mul(lp, mv)?;
            let per_pos = g.sum_axis(lp, 2)?;
            let rows = g.sum_axis(per_pos, 1)?;
            w = g.add(w, rows)?;
        }
        Ok(g.value(w).to_f64())
    }

    /// Importance-weighted log-likelihood estimate with `k` posterior samples
    /// per sequence: `log (1/k) Σ_j p(y, z_j) / q(z_j | y)`.
    pub fn iw_log_likelihood<S: Scalar, R: Rng + ?Sized>(&self, params: &ParameterStore<S>, batch: &Batch<S>, k: usize, rng: &mut R) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::invalid("iw_log_likelihood", "need at least one sample"));
        }
        let rep = batch.repeat_rows(k)?;
        let noise = sample_noise(&self.config, rep.size(), rep.frames(), rng);
        let w = self.log_weights(params, &rep, LatentSource::Posterior(&noise))?;
        Ok(w.chunks(k).map(log_mean_exp).collect())
    }

    /// Ancestral generation.
    ///
    /// `prefix` is `[batch, frame_channels, frames]`; the result holds the
    /// prefix followed by `num_frames` generated frames. Each new frame
    /// reruns the whole network on the history with future frames zeroed,
    /// draws latents from the prior (noise fixed up front for the whole
    /// length) and samples the head at that frame. With `greedy`, latent
    /// noise is zero and the head returns its mode.
    pub fn generate<S: Scalar>(
        &self,
        params: &ParameterStore<S>,
        prefix: &Tensor<S>,
        num_frames: usize,
        seed: u64,
        greedy: bool,
    ) -> Result<Tensor<S>> {
        let (b, c, t0) = prefix.dims3("generate")?;
        if c != self.config.frame_channels() {
            return Err(Error::invalid(
                "generate",
                format!("prefix has {c} channels, model expects {}", self.config.frame_channels()),
            ));
        }
        let total = t0 + num_frames;
        let m = self.config.stride_product();
        let padded = total.div_ceil(m).max(1) * m;
        let noise: Vec<Tensor<S>> = if greedy {
            zero_noise(&self.config, b, padded)
        } else {
            sample_noise(&self.config, b, padded, &mut stream(seed, purpose::PRIOR_NOISE, 0))
        };
        let mut buf = vec![S::zero(); b * c * padded];
        for row in 0..b {
            for ch in 0..c {
                let src = &prefix.data()[(row * c + ch) * t0..][..t0];
                buf[(row * c + ch) * padded..][..t0].copy_from_slice(src);
            }
        }
        for n in t0..total {
            let len = (n + 1).div_ceil(m) * m;
            let mut y = vec![S::zero(); b * c * len];
            for r in 0..b * c {
                y[r * len..][..len].copy_from_slice(&buf[r * padded..][..len]);
            }
            let y = Tensor::new([b, c, len], y)?;
            let cum = self.config.cumulative_strides();
            let z: Vec<Tensor<S>> = noise.iter().zip(&cum).map(|(t, s)| t.slice_time(0, len / s)).collect::<Result<_>>()?;
            let mut g = Graph::with_params(params);
            let yv = g.constant(y);
            let fwd = self.forward(&mut g, yv, LatentSource::Prior(&z))?;
            let mut rng = stream(seed, purpose::SAMPLE, n as u64);
            let frame = self.config.head.sample_frame(g.value(fwd.eta), n, &mut rng, greedy)?;
            for (row, vals) in frame.into_iter().enumerate() {
                for (ch, v) in vals.into_iter().enumerate() {
                    buf[(row * c + ch) * padded + n] = S::of(v);
                }
            }
        }
        Tensor::new([b, c, padded], buf)?.slice_time(0, total)
    }
}

fn layer_err(i: usize, e: Error) -> Error {
    match e {
        Error::Layer { .. } => e,
        other => Error::Layer {
            layer: i + 1,
            msg: other.to_string(),
        },
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("free_bits", format!("threshold must be positive, got {lambda}")))
    }
}

/// Grouped KL values of layer `i` and the matching validity mask.
fn group<S: Scalar>(g: &mut Graph<'_, S>, terms: &ElboTerms, i: usize, grouping: KlGrouping) -> Result<(Var, Tensor<f64>)> {
    let units = terms.kl_units[i];
    let mask = &terms.kl_masks[i];
    let (b, z, t) = mask.dims3("kl_group")?;
    Ok(match grouping {
        KlGrouping::PerUnit => (units, mask.clone()),
        KlGrouping::PerPosition => {
            let k = g.sum_axis(units, 1)?;
            let m: Vec<f64> = (0..b).flat_map(|row| mask.data()[row * z * t..][..t].to_vec()).collect();
            (k, Tensor::new([b, t], m)?)
        }
        KlGrouping::PerLayer => {
            let k = g.sum_axis(units, 1)?;
            let k = g.sum_axis(k, 1)?;
            (k, Tensor::full([b], 1.0))
        }
    })
}

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParameterStore<S>,
    pub v: ParameterStore<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParameterStore<S>) -> Self {
        let mut m = ParameterStore::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One step against `grads`, the gradients of a loss to minimize.
    pub fn update(&mut self, params: &mut ParameterStore<S>, grads: &crate::tensor::Gradients<S>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, eps) = (S::one(), S::of(c.eps));
        let step_size = S::of(lr / bc1);
        let bc2 = S::of(bc2);
        for (name, p) in params.iter_mut() {
            let Some(gr) = grads.param(name) else { continue };
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(gr.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi -= step_size * *mi / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Hyperparameters of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub lr0: f64,
    pub lambda0: f64,
    /// Iterations per halving of both the learning rate and the threshold.
    pub halving_period: f64,
    pub objective: Objective,
    pub grouping: KlGrouping,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            lambda0: 0.5,
            halving_period: 300_000.0,
            objective: Objective::LinearFreeBits,
            grouping: KlGrouping::PerUnit,
        }
    }
}

impl StepConfig {
    pub fn lambda(&self, iteration: u64) -> f64 {
        halving_schedule(iteration, self.lambda0, self.halving_period)
    }

    pub fn lr(&self, iteration: u64) -> f64 {
        halving_schedule(iteration, self.lr0, self.halving_period)
    }
}

/// Maximizes the configured objective on one batch with Adam.
pub fn train_step<S: Scalar>(
    model: &Model,
    params: &mut ParameterStore<S>,
    adam: &mut Adam<S>,
    batch: &Batch<S>,
    noise: &[Tensor<S>],
    iteration: u64,
    step: &StepConfig,
) -> Result<ElboReport> {
    let lambda = step.lambda(iteration);
    let (report, grads) = {
        let mut g = Graph::with_params(params);
        let terms = model.elbo_terms(&mut g, batch, noise)?;
        let obj = model.objective(&mut g, &terms, step.objective, lambda, step.grouping)?;
        let loss = g.neg(obj)?;
        let grads = g.backward(loss)?;
        (model.report(&g, &terms, obj, lambda), grads)
    };
    adam.update(params, &grads, step.lr(iteration))?;
    Ok(report)
}
