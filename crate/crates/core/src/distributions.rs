//! Diagonal Gaussians for latent variables and the predictive heads that turn
//! output features `η` into a likelihood over observations.
//!
//! Feature tensors are `[batch, channels, time]`. Graph-side functions build
//! differentiable expressions; [`PredictiveHead::sample_frame`] works on plain
//! values for generation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv1d, Conv1dSpec};
use crate::tensor::{Graph, ParameterStore, Scalar, Tensor, Var};

/// Lower and upper clamp on every standard deviation.
pub const STD_MIN: f64 = 1e-3;
pub const STD_MAX: f64 = 5.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `clamp(softplus(raw))` on plain values, matching the graph computation.
pub fn std_from_raw(raw: f64) -> f64 {
    softplus(raw).clamp(STD_MIN, STD_MAX)
}

/// Mean and standard deviation handles on a graph.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub std: Var,
}

impl DiagGaussian {
    /// Clamps `std` into `[STD_MIN, STD_MAX]`.
    pub fn new<S: Scalar>(g: &mut Graph<'_, S>, mean: Var, std: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(std) {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                lhs: g.shape(mean).to_vec(),
                rhs: g.shape(std).to_vec(),
            });
        }
        let std = g.clamp(std, STD_MIN, STD_MAX)?;
        Ok(Self { mean, std })
    }

    /// `σ = clamp(softplus(raw))`.
    pub fn from_raw<S: Scalar>(g: &mut Graph<'_, S>, mean: Var, raw_std: Var) -> Result<Self> {
        let std = g.softplus(raw_std)?;
        Self::new(g, mean, std)
    }

    /// `z = μ + σ·ε`.
    pub fn rsample<S: Scalar>(&self, g: &mut Graph<'_, S>, noise: Var) -> Result<Var> {
        let scaled = g.mul(self.std, noise)?;
        g.add(self.mean, scaled)
    }

    /// Elementwise log-density.
    pub fn log_prob<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let diff = g.sub(x, self.mean)?;
        let u = g.div(diff, self.std)?;
        let sq = g.square(u)?;
        let quad = g.scale(sq, -0.5)?;
        let log_std = g.log(self.std)?;
        let out = g.sub(quad, log_std)?;
        g.add_scalar(out, -HALF_LN_2PI)
    }
}

/// Elementwise `KL(q ‖ p)`.
pub fn kl_diag_gaussians<S: Scalar>(g: &mut Graph<'_, S>, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    let log_p = g.log(p.std)?;
    let log_q = g.log(q.std)?;
    let log_ratio = g.sub(log_p, log_q)?;
    let var_q = g.square(q.std)?;
    let diff = g.sub(q.mean, p.mean)?;
    let diff_sq = g.square(diff)?;
    let num = g.add(var_q, diff_sq)?;
    let var_p = g.square(p.std)?;
    let two_var_p = g.scale(var_p, 2.0)?;
    let frac = g.div(num, two_var_p)?;
    let kl = g.add(log_ratio, frac)?;
    g.add_scalar(kl, -0.5)
}

/// Pair of independent pointwise convolutions producing a [`DiagGaussian`].
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Conv1d,
    pub std: Conv1d,
}

impl GaussianHead {
    pub fn new(name: &str, in_channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            mean: Conv1d::new(&format!("{name}.mean"), Conv1dSpec::pointwise(in_channels, dim))?,
            std: Conv1d::new(&format!("{name}.std"), Conv1dSpec::pointwise(in_channels, dim))?,
        })
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) {
        self.mean.init(store, rng);
        self.std.init(store, rng);
    }

    pub fn param_count(&self) -> usize {
        self.mean.spec.param_count() + self.std.spec.param_count()
    }

    pub fn macs(&self, t: usize) -> u64 {
        self.mean.spec.macs(t) + self.std.spec.macs(t)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Result<DiagGaussian> {
        let mean = self.mean.forward(g, h)?;
        let raw = self.std.forward(g, h)?;
        DiagGaussian::from_raw(g, mean, raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum HeadKind {
    Gaussian,
    Bernoulli,
    GaussianMixture { components: usize },
    BernoulliMixture { components: usize },
}

/// Observation likelihood over `data_dim` channels per timestep.
///
/// Feature layouts (channel ranges of `η`):
/// - gaussian: `[means p | raw stds p]`
/// - bernoulli: `[logits p]`
/// - gaussian mixture: `[weight logits n | means n·p | raw stds n·p]`
/// - bernoulli mixture: `[weight logits n | logits n·p]`
///
/// Per-component blocks are component-major: component `c`, channel `j` sits
/// at offset `c·p + j` within its block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictiveHead {
    pub kind: HeadKind,
    pub data_dim: usize,
}

impl PredictiveHead {
    pub fn new(kind: HeadKind, data_dim: usize) -> Result<Self> {
        let n = match kind {
            HeadKind::GaussianMixture { components } | HeadKind::BernoulliMixture { components } => components,
            _ => 1,
        };
        if data_dim == 0 || n == 0 {
            return Err(Error::invalid("predictive_head", "data_dim and components must be positive"));
        }
        Ok(Self { kind, data_dim })
    }

    pub fn feature_dim(&self) -> usize {
        let p = self.data_dim;
        match self.kind {
            HeadKind::Gaussian => 2 * p,
            HeadKind::Bernoulli => p,
            HeadKind::GaussianMixture { components: n } => 2 * p * n + n,
            HeadKind::BernoulliMixture { components: n } => p * n + n,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.kind, HeadKind::Bernoulli | HeadKind::BernoulliMixture { .. })
    }

    fn check(&self, op: &'static str, eta: &[usize], y: &[usize]) -> Result<()> {
        if eta.len() != 3 || eta[1] != self.feature_dim() {
            return Err(Error::invalid(
                op,
                format!(
                    "head needs {} feature channels, got shape {:?}",
                    self.feature_dim(),
                    eta
                ),
            ));
        }
        if y.len() != 3 || y[0] != eta[0] || y[1] != self.data_dim || y[2] != eta[2] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: eta.to_vec(),
                rhs: y.to_vec(),
            });
        }
        Ok(())
    }

    /// Log-likelihood per timestep, shape `[batch, time]`.
    pub fn log_prob<S: Scalar>(&self, g: &mut Graph<'_, S>, eta: Var, y: Var) -> Result<Var> {
        self.check("log_prob", g.shape(eta), g.shape(y))?;
        let p = self.data_dim;
        match self.kind {
            HeadKind::Gaussian => {
                let mean = g.slice(eta, 1, 0, p)?;
                let raw = g.slice(eta, 1, p, 2 * p)?;
                let d = DiagGaussian::from_raw(g, mean, raw)?;
                let lp = d.log_prob(g, y)?;
                g.sum_axis(lp, 1)
            }
            HeadKind::Bernoulli => {
                let lp = bernoulli_log_prob(g, eta, y)?;
                g.sum_axis(lp, 1)
            }
            HeadKind::GaussianMixture { components: n } => {
                let (b, t) = (g.shape(eta)[0], g.shape(eta)[2]);
                let logits = g.slice(eta, 1, 0, n)?;
                let mean = g.slice(eta, 1, n, n + n * p)?;
                let raw = g.slice(eta, 1, n + n * p, n + 2 * n * p)?;
                let d = DiagGaussian::from_raw(g, mean, raw)?;
                let tiled = g.concat(&vec![y; n], 1)?;
                let lp = d.log_prob(g, tiled)?;
                mixture(g, logits, lp, [b, n, p, t])
            }
            HeadKind::BernoulliMixture { components: n } => {
                let (b, t) = (g.shape(eta)[0], g.shape(eta)[2]);
                let logits = g.slice(eta, 1, 0, n)?;
                let comp = g.slice(eta, 1, n, n + n * p)?;
                let tiled = g.concat(&vec![y; n], 1)?;
                let lp = bernoulli_log_prob(g, comp, tiled)?;
                mixture(g, logits, lp, [b, n, p, t])
            }
        }
    }

    /// Draws (or, with `greedy`, takes the mode of) the observation at time
    /// `t` for every batch row. Returns `[batch][data_dim]`.
    ///
    /// Mixtures pick a component from the softmax weights first; the greedy
    /// form uses the heaviest component.
    pub fn sample_frame<S: Scalar, R: Rng + ?Sized>(
        &self,
        eta: &Tensor<S>,
        t: usize,
        rng: &mut R,
        greedy: bool,
    ) -> Result<Vec<Vec<f64>>> {
        let (b, c, len) = eta.dims3("sample")?;
        if c != self.feature_dim() || t >= len {
            return Err(Error::invalid(
                "sample",
                format!("features {:?} do not fit head {:?} at time {t}", eta.shape(), self),
            ));
        }
        let p = self.data_dim;
        let at = |row: usize, ch: usize| eta.data()[(row * c + ch) * len + t].f64();
        let mut out = Vec::with_capacity(b);
        for row in 0..b {
            let (n, offset) = match self.kind {
                HeadKind::GaussianMixture { components } | HeadKind::BernoulliMixture { components } => {
                    (components, components)
                }
                _ => (1, 0),
            };
            let comp = if n == 1 {
                0
            } else {
                let logits: Vec<f64> = (0..n).map(|k| at(row, k)).collect();
                pick_component(&logits, rng, greedy)?
            };
            let frame = (0..p)
                .map(|j| {
                    let k = offset + comp * p + j;
                    if self.is_binary() {
                        let logit = at(row, k);
                        if greedy {
                            f64::from(u8::from(logit > 0.0))
                        } else {
                            f64::from(u8::from(rng.random::<f64>() < sigmoid(logit)))
                        }
                    } else {
                        let mean = at(row, k);
                        let std = std_from_raw(at(row, k + n * p));
                        if greedy {
                            mean
                        } else {
                            let e: f64 = rng.sample(StandardNormal);
                            mean + std * e
                        }
                    }
                })
                .collect();
            out.push(frame);
        }
        Ok(out)
    }

    /// [`sample_frame`](Self::sample_frame) at every timestep, returning `[batch, data_dim, time]`.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, eta: &Tensor<S>, rng: &mut R, greedy: bool) -> Result<Tensor<f64>> {
        let (b, _, len) = eta.dims3("sample")?;
        let p = self.data_dim;
        let mut data = vec![0.0; b * p * len];
        for t in 0..len {
            for (row, frame) in self.sample_frame(eta, t, rng, greedy)?.into_iter().enumerate() {
                for (j, v) in frame.into_iter().enumerate() {
                    data[(row * p + j) * len + t] = v;
                }
            }
        }
        Tensor::new([b, p, len], data)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pick_component<R: Rng + ?Sized>(logits: &[f64], rng: &mut R, greedy: bool) -> Result<usize> {
    if greedy {
        // first maximum, so ties resolve deterministically
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        return Ok(best);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid("sample", e.to_string()))?;
    Ok(dist.sample(rng))
}

/// `y·η − softplus(η)`, elementwise.
fn bernoulli_log_prob<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, y: Var) -> Result<Var> {
    let yl = g.mul(y, logits)?;
    let sp = g.softplus(logits)?;
    g.sub(yl, sp)
}

/// Combines per-dimension component log-densities `[b, n·p, t]` with weight
/// logits `[b, n, t]` into `[b, t]`.
fn mixture<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, per_dim: Var, [b, n, p, t]: [usize; 4]) -> Result<Var> {
    let grouped = g.reshape(per_dim, [b, n, p, t])?;
    let per_comp = g.sum_axis(grouped, 2)?;
    let log_w = g.log_softmax(logits, 1)?;
    let joint = g.add(log_w, per_comp)?;
    g.logsumexp(joint, 1)
}
