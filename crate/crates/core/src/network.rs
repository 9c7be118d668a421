//! Score network `s(X, sigma)` for the target channel.
//!
//! Two layouts are supported: a dense net over flattened grids (for the
//! low-dimensional oracle problems) and a small convolutional
//! encoder-decoder with skip connections (for images). Both see
//! `[scaled target, guide, sigma embedding]` and produce `F`, from which the
//! score is `s = F * out_scale(sigma)`.
//!
//! Without preconditioning `out_scale = 1/sigma`, i.e. the network output is
//! `raw = sigma * s`. With `sigma_data > 0` the target is additionally scaled
//! on the way in by `1/sqrt(sigma^2 + sigma_data^2)` and
//! `raw = sigma / sqrt(sigma^2 + sigma_data^2) * F`, which for data of
//! standard deviation `sigma_data` makes the ideal `F` independent of sigma.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::joint::JointState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Dense,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingScheme {
    /// `log(sigma)` mapped affinely so `[sigma_min, sigma_max] -> [-1, 1]`.
    LogLinear,
}

/// How sigma enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaEmbedding {
    pub scheme: EmbeddingScheme,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl SigmaEmbedding {
    pub fn log_linear(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::Validation(format!(
                "embedding range needs 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        Ok(SigmaEmbedding {
            scheme: EmbeddingScheme::LogLinear,
            sigma_min,
            sigma_max,
        })
    }

    pub fn embed(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")));
        }
        match self.scheme {
            EmbeddingScheme::LogLinear => {
                let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
                Ok(2.0 * (sigma.ln() - lo) / (hi - lo) - 1.0)
            }
        }
    }
}

/// Architecture description; serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub height: usize,
    pub width: usize,
    /// Dense hidden widths.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Encoder channel widths per resolution level.
    #[serde(default)]
    pub channels: Vec<usize>,
    pub use_guide: bool,
    pub activation: Activation,
    pub embedding: SigmaEmbedding,
    /// Preconditioning scale; `0` disables it.
    #[serde(default)]
    pub sigma_data: f64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("network input size must be positive".into()));
        }
        if !(self.sigma_data >= 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Validation("sigma_data must be finite and >= 0".into()));
        }
        SigmaEmbedding::log_linear(self.embedding.sigma_min, self.embedding.sigma_max)?;
        match self.kind {
            ArchKind::Dense => {
                if self.hidden.contains(&0) {
                    return Err(Error::Validation("dense hidden widths must be positive".into()));
                }
            }
            ArchKind::Unet => {
                if self.channels.is_empty() || self.channels.contains(&0) {
                    return Err(Error::Validation(
                        "unet needs at least one positive channel width".into(),
                    ));
                }
                let factor = 1usize << (self.channels.len() - 1);
                if self.height % factor != 0 || self.width % factor != 0 {
                    return Err(Error::Validation(format!(
                        "unet with {} levels needs sizes divisible by {factor}, got {}x{}",
                        self.channels.len(),
                        self.height,
                        self.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("architecture spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: ArchSpec = toml::from_str(text)
            .map_err(|e| Error::Validation(format!("architecture spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn layers(&self) -> Vec<Layer> {
        let mut plan = LayerPlan::default();
        let in_ch = 1 + usize::from(self.use_guide);
        match self.kind {
            ArchKind::Dense => {
                let d = self.height * self.width;
                let mut width = in_ch * d + 1;
                for &h in &self.hidden {
                    plan.push(LayerKind::Dense, width, h, width == in_ch * d + 1);
                    width = h;
                }
                plan.push(LayerKind::Dense, width, d, self.hidden.is_empty());
            }
            ArchKind::Unet => {
                let ch = &self.channels;
                let mut c_in = in_ch;
                for &c in ch {
                    plan.push(LayerKind::Conv, c_in + 1, c, true);
                    plan.push(LayerKind::Conv, c, c, false);
                    c_in = c;
                }
                for l in (0..ch.len() - 1).rev() {
                    plan.push(LayerKind::Conv, ch[l + 1] + ch[l] + 1, ch[l], true);
                    plan.push(LayerKind::Conv, ch[l], ch[l], false);
                }
                plan.push(LayerKind::Conv, ch[0], 1, false);
            }
        }
        plan.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Dense,
    Conv,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    kind: LayerKind,
    fan_in: usize,
    out: usize,
    weight: usize,
    bias: usize,
    /// The last input channel (or input entry) is the sigma embedding.
    reads_embedding: bool,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.fan_in * self.out
    }

    fn len(&self) -> usize {
        self.weight_len() + self.out
    }

    /// Weight indices (relative to `weight`) that multiply the embedding.
    fn embedding_weights(&self) -> Vec<usize> {
        if !self.reads_embedding {
            return Vec::new();
        }
        let taps = match self.kind {
            LayerKind::Dense => 1,
            LayerKind::Conv => 9,
        };
        (0..self.out)
            .flat_map(|o| {
                let start = (o + 1) * self.fan_in - taps;
                start..start + taps
            })
            .collect()
    }
}

#[derive(Default)]
struct LayerPlan {
    layers: Vec<Layer>,
    offset: usize,
}

impl LayerPlan {
    fn push(&mut self, kind: LayerKind, inputs: usize, out: usize, reads_embedding: bool) {
        let fan_in = match kind {
            LayerKind::Dense => inputs,
            LayerKind::Conv => inputs * 9,
        };
        let layer = Layer {
            kind,
            fan_in,
            out,
            weight: self.offset,
            bias: self.offset + fan_in * out,
            reads_embedding,
        };
        self.offset += layer.len();
        self.layers.push(layer);
    }
}

/// A recorded forward pass, ready for [`ScoreNetwork::backward`].
#[derive(Debug, Clone, Default)]
pub struct Recording {
    tape: Tape,
    output: Option<Var>,
    out_scale: f64,
    height: usize,
    width: usize,
}

impl Recording {
    /// The score estimate for the target channel.
    pub fn score(&self) -> Result<Grid> {
        let out = self.output.ok_or(Error::EmptyTape)?;
        let f = &self.tape.value(out).data;
        Grid::new(
            self.height,
            self.width,
            f.iter().map(|v| v * self.out_scale).collect(),
        )
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Multiplier taking the network output to the score.
    pub fn out_scale(&self) -> f64 {
        self.out_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    spec: ArchSpec,
    theta: Vec<f64>,
}

impl ScoreNetwork {
    /// Fan-in scaled uniform init for hidden layers. The output layer and the
    /// weights reading the sigma embedding start at zero.
    pub fn init<R: Rng + ?Sized>(spec: ArchSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let mut theta = vec![0.0; spec.param_count()];
        let last = layers.len() - 1;
        for layer in &layers[..last] {
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut theta[layer.weight..layer.weight + layer.weight_len()] {
                *w = rng.random_range(-bound..bound);
            }
            for k in layer.embedding_weights() {
                theta[layer.weight + k] = 0.0;
            }
        }
        Ok(ScoreNetwork { spec, theta })
    }

    pub fn from_parameters(spec: ArchSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_count();
        if theta.len() != expected {
            return Err(Error::Dimension(format!(
                "architecture needs {expected} parameters, got {}",
                theta.len()
            )));
        }
        Ok(ScoreNetwork { spec, theta })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[f64] {
        &self.theta
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn embed_sigma(&self, sigma: f64) -> Result<f64> {
        self.spec.embedding.embed(sigma)
    }

    fn scales(&self, sigma: f64) -> (f64, f64) {
        if self.spec.sigma_data > 0.0 {
            let norm = (sigma * sigma + self.spec.sigma_data * self.spec.sigma_data).sqrt();
            (1.0 / norm, 1.0 / norm)
        } else {
            (1.0, 1.0 / sigma)
        }
    }

    /// Runs the network and keeps the tape for a later backward pass.
    pub fn record(&self, state: &JointState, sigma: f64) -> Result<Recording> {
        self.record_with(&self.theta, state, sigma)
    }

    pub(crate) fn record_with(
        &self,
        theta: &[f64],
        state: &JointState,
        sigma: f64,
    ) -> Result<Recording> {
        let emb = self.embed_sigma(sigma)?;
        let (h, w) = state.target().shape();
        if (h, w) != (self.spec.height, self.spec.width) {
            return Err(Error::Dimension(format!(
                "network expects {}x{} inputs, got {h}x{w}",
                self.spec.height, self.spec.width
            )));
        }
        let (in_scale, out_scale) = self.scales(sigma);
        let layers = self.spec.layers();
        let mut tape = Tape::new(theta.len());

        let mut input = Vec::with_capacity(2 * h * w + 1);
        input.extend(state.target().as_slice().iter().map(|v| v * in_scale));
        if self.spec.use_guide {
            input.extend_from_slice(state.guide().as_slice());
        }
        let channels = 1 + usize::from(self.spec.use_guide);

        let output = match self.spec.kind {
            ArchKind::Dense => {
                input.push(emb);
                let mut x = tape.input(Tensor::vector(input));
                let last = layers.len() - 1;
                for (i, l) in layers.iter().enumerate() {
                    x = tape.dense(theta, x, l.weight, l.bias, l.out)?;
                    if i < last {
                        x = tape.silu(x)?;
                    }
                }
                x
            }
            ArchKind::Unet => {
                let mut x = tape.input(Tensor::new(channels, h, w, input)?);
                let mut it = layers.iter();
                let mut conv = |tape: &mut Tape, x: Var, act: bool| -> Result<Var> {
                    let l = it.next().expect("layer plan matches forward");
                    debug_assert_eq!(l.kind, LayerKind::Conv);
                    let y = tape.conv3x3(theta, x, l.weight, l.bias, l.out)?;
                    if act {
                        tape.silu(y)
                    } else {
                        Ok(y)
                    }
                };
                let levels = self.spec.channels.len();
                let mut skips = Vec::with_capacity(levels);
                for level in 0..levels {
                    if level > 0 {
                        x = tape.avg_pool2(x)?;
                    }
                    x = tape.append_channel(x, emb)?;
                    x = conv(&mut tape, x, true)?;
                    x = conv(&mut tape, x, true)?;
                    skips.push(x);
                }
                skips.pop();
                while let Some(skip) = skips.pop() {
                    x = tape.upsample2(x)?;
                    x = tape.concat(x, skip)?;
                    x = tape.append_channel(x, emb)?;
                    x = conv(&mut tape, x, true)?;
                    x = conv(&mut tape, x, true)?;
                }
                conv(&mut tape, x, false)?
            }
        };
        Ok(Recording {
            tape,
            output: Some(output),
            out_scale,
            height: h,
            width: w,
        })
    }

    /// Score estimate for the target channel of `state` at noise level `sigma`.
    pub fn forward(&self, state: &JointState, sigma: f64) -> Result<Grid> {
        self.record(state, sigma)?.score()
    }

    /// Gradient of `<loss_seed, score>` with respect to the parameters, where
    /// `loss_seed` is dLoss/dScore for the recorded pass.
    pub fn backward(&self, recording: &Recording, loss_seed: &Grid) -> Result<Vec<f64>> {
        self.backward_with(&self.theta, recording, loss_seed)
    }

    pub(crate) fn backward_with(
        &self,
        theta: &[f64],
        recording: &Recording,
        loss_seed: &Grid,
    ) -> Result<Vec<f64>> {
        let out = recording.output.ok_or(Error::EmptyTape)?;
        if loss_seed.shape() != (recording.height, recording.width) {
            return Err(Error::Dimension("loss seed does not match the score shape".into()));
        }
        let value = recording.tape.value(out);
        let seed = Tensor {
            data: loss_seed
                .as_slice()
                .iter()
                .map(|d| d * recording.out_scale)
                .collect(),
            ..value.clone()
        };
        recording.tape.backward(theta, out, &seed)
    }
}
