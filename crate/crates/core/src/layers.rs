//! Causal convolutions and Wavenet blocks.
//!
//! Every layer is a thin description (shapes plus parameter names); values
//! live in a [`ParameterStore`] and computation is recorded on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub causal: bool,
}

impl Conv1dSpec {
    pub fn causal(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            stride: 1,
            causal: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::causal(in_channels, out_channels, 1, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// `(k-1)·μ + 1` input steps covered by one output.
    pub fn effective_span(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_size + self.out_channels
    }

    pub fn macs(&self, t_in: usize) -> u64 {
        (self.out_channels * self.in_channels * self.kernel_size * (t_in / self.stride)) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.dilation == 0
            || self.stride == 0
        {
            return Err(Error::invalid("conv1d", format!("non-positive extent in {self:?}")));
        }
        if !self.causal && self.stride != 1 {
            return Err(Error::invalid("conv1d", "non-causal convolution supports stride 1 only"));
        }
        Ok(())
    }
}

fn init_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub spec: Conv1dSpec,
    pub weight: String,
    pub bias: String,
}

impl Conv1d {
    pub fn new(name: &str, spec: Conv1dSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        })
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) {
        let s = &self.spec;
        let w = init_uniform(
            &[s.out_channels, s.in_channels, s.kernel_size],
            s.in_channels * s.kernel_size,
            rng,
        );
        store.insert(&self.weight, w);
        store.insert(&self.bias, Tensor::zeros([s.out_channels]));
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied();
        if c != Some(self.spec.in_channels) {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.spec.out_channels, self.spec.in_channels, self.spec.kernel_size],
            });
        }
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        if self.spec.causal {
            return g.conv1d(x, w, b, self.spec.dilation, self.spec.stride);
        }
        // Centred: look ahead half the span, then drop the leading outputs.
        let ahead = (self.spec.effective_span() - 1) / 2;
        let t = g.shape(x)[2];
        let padded = g.pad(x, 2, 0, ahead)?;
        let y = g.conv1d(padded, w, b, self.spec.dilation, 1)?;
        g.slice(y, 2, ahead, ahead + t)
    }
}

/// Transposed convolution whose kernel width equals its stride, so output
/// step `t·S + j` depends on input step `t` alone.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: String,
    pub bias: String,
}

impl ConvTranspose1d {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) {
        let w = init_uniform(&[self.in_channels, self.out_channels, self.stride], self.in_channels, rng);
        store.insert(&self.weight, w);
        store.insert(&self.bias, Tensor::zeros([self.out_channels]));
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.conv_transpose1d(x, w, b, self.stride)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.stride + self.out_channels
    }

    pub fn macs(&self, t_in: usize) -> u64 {
        (self.in_channels * self.out_channels * self.stride * t_in) as u64
    }
}

/// Temporal resampling performed by a Wavenet stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    None,
    /// Downsample by the factor inside the first block.
    Down(usize),
    /// Upsample by the factor inside the last block.
    Up(usize),
}

#[derive(Clone, Debug)]
enum BlockOutput {
    Pointwise(Conv1d),
    Transposed(ConvTranspose1d),
}

/// One gated residual unit:
/// `identity(x) + out(tanh(a) ⊙ σ(b))` with `[a, b] = gate([x, c])`.
///
/// The gate is a single convolution with `2·filters` outputs split into the
/// tanh and sigmoid halves. For `Down(S)` the gate is strided and the
/// identity path averages windows of `S`; for `Up(S)` the output convolution
/// is transposed with stride `S` and the identity path repeats each step `S`
/// times. When the input width differs from `filters` the identity path
/// carries a 1×1 projection applied at the lower of the two rates.
#[derive(Clone, Debug)]
pub struct WavenetBlock {
    pub in_channels: usize,
    pub cond_channels: usize,
    pub filters: usize,
    pub resample: Resample,
    gate: Conv1d,
    out: BlockOutput,
    identity_proj: Option<Conv1d>,
}

impl WavenetBlock {
    pub fn new(
        name: &str,
        in_channels: usize,
        cond_channels: usize,
        filters: usize,
        kernel_size: usize,
        dilation: usize,
        resample: Resample,
    ) -> Result<Self> {
        let down = match resample {
            Resample::Down(s) => s,
            _ => 1,
        };
        let gate = Conv1d::new(
            &format!("{name}.gate"),
            Conv1dSpec::causal(in_channels + cond_channels, 2 * filters, kernel_size, dilation).with_stride(down),
        )?;
        let out = match resample {
            Resample::Up(s) if s > 1 => {
                BlockOutput::Transposed(ConvTranspose1d::new(&format!("{name}.out"), filters, filters, s))
            }
            Resample::Up(0) | Resample::Down(0) => {
                return Err(Error::invalid("wavenet_block", "resampling factor must be positive"))
            }
            _ => BlockOutput::Pointwise(Conv1d::new(&format!("{name}.out"), Conv1dSpec::pointwise(filters, filters))?),
        };
        let identity_proj = (in_channels != filters)
            .then(|| Conv1d::new(&format!("{name}.skip"), Conv1dSpec::pointwise(in_channels, filters)))
            .transpose()?;
        Ok(Self {
            in_channels,
            cond_channels,
            filters,
            resample,
            gate,
            out,
            identity_proj,
        })
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) {
        self.gate.init(store, rng);
        match &self.out {
            BlockOutput::Pointwise(c) => c.init(store, rng),
            BlockOutput::Transposed(c) => c.init(store, rng),
        }
        if let Some(p) = &self.identity_proj {
            p.init(store, rng);
        }
    }

    /// Names of the parameters on the residual branch (gate and output
    /// convolutions).
    pub fn residual_params(&self) -> Vec<&str> {
        let (w, b) = match &self.out {
            BlockOutput::Pointwise(c) => (&c.weight, &c.bias),
            BlockOutput::Transposed(c) => (&c.weight, &c.bias),
        };
        vec![&self.gate.weight, &self.gate.bias, w, b]
    }

    pub fn param_count(&self) -> usize {
        self.gate.spec.param_count()
            + match &self.out {
                BlockOutput::Pointwise(c) => c.spec.param_count(),
                BlockOutput::Transposed(c) => c.param_count(),
            }
            + self.identity_proj.as_ref().map_or(0, |p| p.spec.param_count())
    }

    /// Receptive-field contribution `(k-1)·μ` of the gate convolution.
    pub fn lookback(&self) -> usize {
        self.gate.spec.effective_span() - 1
    }

    /// MACs split into work at the block's input rate and the output
    /// convolution of an upsampling block.
    pub fn macs(&self, t_in: usize) -> MacSplit {
        let t_low = match self.resample {
            Resample::Down(s) => t_in / s,
            _ => t_in,
        };
        let mut m = MacSplit::default();
        m.base += self.gate.spec.macs(t_in);
        let out = match &self.out {
            BlockOutput::Pointwise(c) => c.spec.macs(t_low),
            BlockOutput::Transposed(c) => c.macs(t_low),
        };
        // the output convolution of an upsampling block runs at the
        // destination rate even when the factor is 1
        match self.resample {
            Resample::Up(_) => m.upsampled += out,
            _ => m.base += out,
        }
        if let Some(p) = &self.identity_proj {
            m.base += p.spec.macs(t_low);
        }
        m
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, cond: Option<Var>) -> Result<Var> {
        let (b, c, t) = g.value(x).dims3("wavenet_block")?;
        if c != self.in_channels {
            return Err(Error::invalid(
                "wavenet_block",
                format!("input has {c} channels, block expects {}", self.in_channels),
            ));
        }
        let gate_in = match (cond, self.cond_channels) {
            (None, 0) => x,
            (Some(cv), cc) if cc > 0 => {
                let (cb, ccc, ct) = g.value(cv).dims3("cond_wavenet_block")?;
                if cb != b || ct != t {
                    return Err(Error::ShapeMismatch {
                        op: "cond_wavenet_block",
                        lhs: g.shape(x).to_vec(),
                        rhs: g.shape(cv).to_vec(),
                    });
                }
                if ccc != cc {
                    return Err(Error::invalid(
                        "cond_wavenet_block",
                        format!("conditioning has {ccc} channels, block expects {cc}"),
                    ));
                }
                g.concat(&[x, cv], 1)?
            }
            (None, cc) => {
                return Err(Error::invalid(
                    "cond_wavenet_block",
                    format!("missing conditioning sequence with {cc} channels"),
                ))
            }
            (Some(_), _) => return Err(Error::invalid("wavenet_block", "unexpected conditioning sequence")),
        };

        let gated = self.gate.forward(g, gate_in)?;
        let f = self.filters;
        let a = g.slice(gated, 1, 0, f)?;
        let s = g.slice(gated, 1, f, 2 * f)?;
        let a = g.tanh(a)?;
        let s = g.sigmoid(s)?;
        let h = g.mul(a, s)?;
        let residual = match &self.out {
            BlockOutput::Pointwise(c) => c.forward(g, h)?,
            BlockOutput::Transposed(c) => c.forward(g, h)?,
        };

        let mut identity = x;
        if let Resample::Down(s) = self.resample {
            if s > 1 {
                identity = g.avg_pool(identity, s)?;
            }
        }
        if let Some(p) = &self.identity_proj {
            identity = p.forward(g, identity)?;
        }
        if let Resample::Up(s) = self.resample {
            if s > 1 {
                identity = g.repeat(identity, s)?;
            }
        }
        g.add(identity, residual)
    }
}

/// Multiply-accumulate counts of a layer, split by output rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacSplit {
    pub base: u64,
    pub upsampled: u64,
}

impl MacSplit {
    pub fn total(&self) -> u64 {
        self.base + self.upsampled
    }
}

impl std::ops::AddAssign for MacSplit {
    fn add_assign(&mut self, rhs: Self) {
        self.base += rhs.base;
        self.upsampled += rhs.upsampled;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WavenetStackSpec {
    pub in_channels: usize,
    /// Width of the conditioning sequence; zero for an unconditional stack.
    pub cond_channels: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    /// Replace every dilated convolution with a width-1 convolution.
    pub one_by_one: bool,
    pub resample: Resample,
}

impl WavenetStackSpec {
    pub fn num_blocks(&self) -> usize {
        self.dilations.len()
    }

    pub fn conditional(&self) -> bool {
        self.cond_channels > 0
    }

    fn effective_kernel(&self) -> usize {
        if self.one_by_one {
            1
        } else {
            self.kernel_size
        }
    }
}

/// Number of input steps that can influence one output of a stride-1 stack:
/// `1 + Σ (k-1)·μ_i`.
pub fn receptive_field(spec: &WavenetStackSpec) -> usize {
    let k = spec.effective_kernel();
    1 + spec.dilations.iter().map(|&d| (k - 1) * d).sum::<usize>()
}

#[derive(Clone, Debug)]
pub struct WavenetStack {
    pub spec: WavenetStackSpec,
    pub blocks: Vec<WavenetBlock>,
}

impl WavenetStack {
    pub fn new(name: &str, spec: WavenetStackSpec) -> Result<Self> {
        if spec.dilations.is_empty() {
            return Err(Error::invalid("wavenet_stack", format!("{name}: at least one block required")));
        }
        let n = spec.num_blocks();
        let k = spec.effective_kernel();
        let blocks = spec
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let resample = match spec.resample {
                    Resample::Down(s) if i == 0 => Resample::Down(s),
                    Resample::Up(s) if i == n - 1 => Resample::Up(s),
                    _ => Resample::None,
                };
                let dilation = if spec.one_by_one { 1 } else { d };
                let in_ch = if i == 0 { spec.in_channels } else { spec.filters };
                WavenetBlock::new(
                    &format!("{name}.{i}"),
                    in_ch,
                    spec.cond_channels,
                    spec.filters,
                    k,
                    dilation,
                    resample,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, blocks })
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<S>, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(WavenetBlock::param_count).sum()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.spec)
    }

    pub fn macs(&self, t_in: usize) -> MacSplit {
        let mut t = t_in;
        let mut m = MacSplit::default();
        for b in &self.blocks {
            m += b.macs(t);
            if let Resample::Down(s) = b.resample {
                t /= s;
            }
        }
        m
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, cond: Option<Var>) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, b| b.forward(g, h, cond))
    }
}
