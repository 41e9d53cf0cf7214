//! Shared-encoder network with two decoders that differ only in how they
//! upsample: decoder 1 uses transposed convolutions, decoder 2 uses linear
//! interpolation followed by a pointwise convolution. Each decoder ends in a
//! two-class segmentation head (softmax) and a signed-distance head (tanh).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    #[default]
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            spatial_rank: 2,
            in_channels: 1,
            width: 8,
            depth: 3,
            normalization: Normalization::Instance,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spatial_rank == 2 || self.spatial_rank == 3) {
            return Err(Error::Config(format!(
                "spatial_rank must be 2 or 3, got {}",
                self.spatial_rank
            )));
        }
        if self.depth < 1 || self.width < 2 || self.in_channels < 1 {
            return Err(Error::Config(format!(
                "need depth >= 1, width >= 2, in_channels >= 1 (got {}, {}, {})",
                self.depth, self.width, self.in_channels
            )));
        }
        Ok(())
    }

    /// Crop extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.width << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: usize,
    bias: Option<usize>,
    kind: LayerKind,
    stride: usize,
    pad: usize,
    norm_relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Upsampling {
    Deconvolution,
    Interpolation,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Layer,
    fuse: Layer,
}

#[derive(Clone, Debug)]
struct Decoder {
    upsampling: Upsampling,
    /// Deepest level first.
    levels: Vec<DecoderLevel>,
    seg_head: Layer,
    sdm_head: Layer,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Layer,
    conv: Layer,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Parameter>,
    stem: Layer,
    encoder: Vec<EncoderLevel>,
    decoders: [Decoder; 2],
}

/// The four heads of both decoders, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DualDecoderOutputs {
    /// Two-channel segmentation logits per decoder.
    pub logits: [Var; 2],
    /// Foreground probability `[N, 1, s...]` per decoder.
    pub seg: [Var; 2],
    /// Signed-distance prediction in `(-1, 1)`, `[N, 1, s...]` per decoder.
    pub sdm: [Var; 2],
}

impl DualDecoderOutputs {
    /// Restrict every head to batch items `[start, start + len)`.
    pub fn narrow_batch(&self, tape: &mut Tape, start: usize, len: usize) -> Result<Self> {
        let mut f = |v: Var| tape.narrow(v, 0, start, len);
        Ok(DualDecoderOutputs {
            logits: [f(self.logits[0])?, f(self.logits[1])?],
            seg: [f(self.seg[0])?, f(self.seg[1])?],
            sdm: [f(self.sdm[0])?, f(self.sdm[1])?],
        })
    }
}

/// Concrete head values from a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub seg: [Tensor; 2],
    pub sdm: [Tensor; 2],
}

impl Predictions {
    /// Final segmentation output: decoder 1 (transposed-convolution upsampling).
    pub fn select_final(&self) -> &Tensor {
        &self.seg[0]
    }
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    rank: usize,
    biased_norm: bool,
}

impl Builder {
    fn tensor(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }

    fn layer(
        &mut self,
        name: &str,
        kind: LayerKind,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        norm_relu: bool,
    ) -> Layer {
        let kvol = k.pow(self.rank as u32);
        let mut shape = match kind {
            LayerKind::Conv => vec![c_out, c_in],
            LayerKind::ConvTranspose => vec![c_in, c_out],
        };
        shape.extend(std::iter::repeat_n(k, self.rank));
        let fan_in = match kind {
            LayerKind::Conv => c_in * kvol,
            LayerKind::ConvTranspose => (c_in * kvol / stride.pow(self.rank as u32)).max(1),
        };
        let w = self.tensor(shape, fan_in);
        self.params.push(Parameter::new(format!("{name}.weight"), w));
        let weight = self.params.len() - 1;
        let bias = if !norm_relu || self.biased_norm {
            let b = self.tensor(vec![c_out], fan_in);
            self.params.push(Parameter::new(format!("{name}.bias"), b));
            Some(self.params.len() - 1)
        } else {
            None
        };
        Layer {
            weight,
            bias,
            kind,
            stride,
            pad: if kind == LayerKind::Conv && k == 3 { 1 } else { 0 },
            norm_relu,
        }
    }
}

impl Network {
    /// Builds and initializes every parameter from `config.seed` (uniform fan-in scaling).
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
            rank: config.spatial_rank,
            biased_norm: config.normalization == Normalization::None,
        };
        let c = |l| config.channels(l);
        let stem = b.layer("enc.stem", LayerKind::Conv, config.in_channels, c(0), 3, 1, true);
        let encoder = (1..=config.depth)
            .map(|l| EncoderLevel {
                down: b.layer(&format!("enc.{l}.down"), LayerKind::Conv, c(l - 1), c(l), 2, 2, true),
                conv: b.layer(&format!("enc.{l}.conv"), LayerKind::Conv, c(l), c(l), 3, 1, true),
            })
            .collect();
        let mut decoder = |j: usize, upsampling: Upsampling| {
            let levels = (1..=config.depth)
                .rev()
                .map(|l| {
                    let up = match upsampling {
                        Upsampling::Deconvolution => b.layer(
                            &format!("dec{j}.{l}.up"),
                            LayerKind::ConvTranspose,
                            c(l),
                            c(l - 1),
                            2,
                            2,
                            true,
                        ),
                        Upsampling::Interpolation => b.layer(
                            &format!("dec{j}.{l}.up"),
                            LayerKind::Conv,
                            c(l),
                            c(l - 1),
                            1,
                            1,
                            true,
                        ),
                    };
                    let fuse = b.layer(
                        &format!("dec{j}.{l}.fuse"),
                        LayerKind::Conv,
                        c(l - 1),
                        c(l - 1),
                        3,
                        1,
                        true,
                    );
                    DecoderLevel { up, fuse }
                })
                .collect();
            let seg_head = b.layer(&format!("dec{j}.seg"), LayerKind::Conv, c(0), 2, 1, 1, false);
            let sdm_head = b.layer(&format!("dec{j}.sdm"), LayerKind::Conv, c(0), 1, 1, 1, false);
            Decoder {
                upsampling,
                levels,
                seg_head,
                sdm_head,
            }
        };
        let d1 = decoder(1, Upsampling::Deconvolution);
        let d2 = decoder(2, Upsampling::Interpolation);
        Ok(Network {
            config,
            params: b.params,
            stem,
            encoder,
            decoders: [d1, d2],
        })
    }

    /// Rebuilds the architecture for `config` and installs the given parameters,
    /// which must match by name and shape.
    pub fn from_parameters(config: NetworkConfig, params: Vec<Parameter>) -> Result<Self> {
        let mut net = Network::build(config)?;
        if params.len() != net.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (have, want) in params.iter().zip(&net.params) {
            if have.name != want.name || have.value().shape() != want.value().shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    have.name,
                    have.value().shape(),
                    want.name,
                    want.value().shape()
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.param(p.value().clone()))
            .collect()
    }

    fn register_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value().clone()))
            .collect()
    }

    /// Checks that an input shape `[N, C, s...]` is acceptable.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let rank = self.config.spatial_rank;
        if shape.len() != rank + 2 || shape[1] != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "network expects [N, {}, {} spatial extents], got {shape:?}",
                self.config.in_channels, rank
            )));
        }
        let m = self.config.required_multiple();
        if shape[2..].iter().any(|e| e % m != 0) {
            return Err(Error::Divisibility {
                extents: shape[2..].to_vec(),
                multiple: m,
            });
        }
        Ok(())
    }

    fn apply(&self, tape: &mut Tape, x: Var, layer: &Layer, p: &[Var]) -> Result<Var> {
        let rank = self.config.spatial_rank;
        let stride = vec![layer.stride; rank];
        let bias = layer.bias.map(|b| p[b]);
        let mut y = match layer.kind {
            LayerKind::Conv => tape.conv(x, p[layer.weight], bias, &stride, &vec![layer.pad; rank])?,
            LayerKind::ConvTranspose => tape.conv_transpose(x, p[layer.weight], bias, &stride)?,
        };
        if layer.norm_relu {
            if self.config.normalization == Normalization::Instance {
                y = tape.instance_norm(y)?;
            }
            y = tape.relu(y)?;
        }
        Ok(y)
    }

    /// Forward pass of both decoders on the same encoder features.
    pub fn forward(&self, tape: &mut Tape, input: Var, p: &[Var]) -> Result<DualDecoderOutputs> {
        self.check_input(tape.value(input).shape())?;
        let mut skips = Vec::with_capacity(self.config.depth + 1);
        let mut x = self.apply(tape, input, &self.stem, p)?;
        skips.push(x);
        for level in &self.encoder {
            x = self.apply(tape, x, &level.down, p)?;
            x = self.apply(tape, x, &level.conv, p)?;
            skips.push(x);
        }
        let bottleneck = skips.pop().expect("depth >= 1");
        let mut logits = Vec::with_capacity(2);
        let mut seg = Vec::with_capacity(2);
        let mut sdm = Vec::with_capacity(2);
        for dec in &self.decoders {
            let mut y = bottleneck;
            for (level, skip) in dec.levels.iter().zip(skips.iter().rev()) {
                if dec.upsampling == Upsampling::Interpolation {
                    y = tape.upsample2x(y)?;
                }
                y = self.apply(tape, y, &level.up, p)?;
                y = tape.add(y, *skip)?;
                y = self.apply(tape, y, &level.fuse, p)?;
            }
            let lg = self.apply(tape, y, &dec.seg_head, p)?;
            let probs = tape.softmax_channel(lg)?;
            seg.push(tape.narrow(probs, 1, 1, 1)?);
            logits.push(lg);
            let d = self.apply(tape, y, &dec.sdm_head, p)?;
            sdm.push(tape.tanh(d)?);
        }
        Ok(DualDecoderOutputs {
            logits: [logits[0], logits[1]],
            seg: [seg[0], seg[1]],
            sdm: [sdm[0], sdm[1]],
        })
    }

    /// Gradient-free forward pass on a concrete batch.
    pub fn predict(&self, input: &Tensor) -> Result<Predictions> {
        let mut tape = Tape::new();
        let p = self.register_frozen(&mut tape)?;
        let x = tape.constant(input.clone())?;
        let out = self.forward(&mut tape, x, &p)?;
        Ok(Predictions {
            seg: [tape.value(out.seg[0]).clone(), tape.value(out.seg[1]).clone()],
            sdm: [tape.value(out.sdm[0]).clone(), tape.value(out.sdm[1]).clone()],
        })
    }
}
