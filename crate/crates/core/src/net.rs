//! Separable-3D-convolution encoder-decoder.
//!
//! A separable block factors a 3×3×3 convolution into a 3×3×1 spatial
//! kernel applied to every band followed by a 1×1×5 spectral kernel applied
//! at every pixel, then a leaky rectifier. The network is a U-shaped
//! encoder-decoder over `[C, H, W, B]` feature stacks:
//!
//! * `depth` encoder stages, each two blocks then 2×2 spatial max pooling
//!   (the band axis keeps full resolution throughout),
//! * a two-block bottleneck,
//! * `depth` decoder stages, each nearest upsampling, concatenation with the
//!   matching encoder output, then one block,
//! * a pointwise head to one channel and a sigmoid.
//!
//! [`BlockKind::Full3d`] builds the same topology from plain 3×3×3 blocks,
//! for parameter-count comparisons.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cube::Cube;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const SPATIAL_KERNEL: usize = 3;
const SPECTRAL_KERNEL: usize = 5;
const FULL_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    #[default]
    Separable,
    Full3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub output_channels: usize,
    pub leaky_slope: f64,
    pub block: BlockKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            channels: vec![16, 32, 64],
            input_channels: 1,
            output_channels: 1,
            leaky_slope: 0.1,
            block: BlockKind::Separable,
        }
    }
}

/// Parameters of one separable block with `c_mid` intermediate features.
pub fn separable_block_params(c_in: usize, c_mid: usize, c_out: usize) -> usize {
    SPATIAL_KERNEL * SPATIAL_KERNEL * c_in * c_mid + c_mid + SPECTRAL_KERNEL * c_mid * c_out + c_out
}

/// Parameters of one plain 3×3×3 block.
pub fn full_block_params(c_in: usize, c_out: usize) -> usize {
    FULL_KERNEL.pow(3) * c_in * c_out + c_out
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("network depth must be >= 1"));
        }
        if self.channels.len() != self.depth {
            return Err(Error::invalid(format!(
                "need one channel width per encoder stage: depth {} but {} widths",
                self.depth,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("channel widths must be >= 1"));
        }
        if self.input_channels != 1 || self.output_channels != 1 {
            return Err(Error::invalid(
                "a cube is a single-channel stack: input and output channels must be 1",
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::invalid("leaky slope must be finite and >= 0"));
        }
        Ok(())
    }

    /// `(c_in, c_out)` of every block in build order.
    fn block_channels(&self) -> Vec<(usize, usize)> {
        let ch = &self.channels;
        let d = self.depth;
        let mut out = Vec::new();
        for s in 0..d {
            let c_in = if s == 0 { self.input_channels } else { ch[s - 1] };
            out.push((c_in, ch[s]));
            out.push((ch[s], ch[s]));
        }
        out.push((ch[d - 1], ch[d - 1]));
        out.push((ch[d - 1], ch[d - 1]));
        for s in (0..d).rev() {
            let up = if s == d - 1 { ch[d - 1] } else { ch[s + 1] };
            out.push((up + ch[s], ch[s]));
        }
        out
    }

    /// Closed-form parameter count of the network this config builds.
    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .block_channels()
            .iter()
            .map(|&(ci, co)| match self.block {
                BlockKind::Separable => separable_block_params(ci, co, co),
                BlockKind::Full3d => full_block_params(ci, co),
            })
            .sum();
        blocks + self.channels[0] * self.output_channels + self.output_channels
    }

    /// Smallest multiple of `2^depth` that is `>= n`.
    pub fn padded_extent(&self, n: usize) -> usize {
        let m = 1usize << self.depth;
        n.div_ceil(m) * m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Flat, ordered registry of network parameters and their gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_grad(&mut self, i: usize, grad: Tensor) -> Result<()> {
        let p = &mut self.params[i];
        if grad.shape() != p.value.shape() {
            return Err(Error::mismatch(grad.shape(), p.value.shape()));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// Registers every parameter as a gradient-tracked leaf, in order.
    pub fn track(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    /// Copies leaf gradients from a finished tape into the registry.
    pub fn collect_grads(&mut self, tape: &mut Tape, vars: &[Var]) -> Result<()> {
        for (i, &v) in vars.iter().enumerate() {
            let g = tape
                .take_grad(v)
                .ok_or_else(|| Error::MissingGradient(self.params[i].name.clone()))?;
            self.set_grad(i, g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Separable { spatial: ConvRef, spectral: ConvRef },
    Full { conv: ConvRef },
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[Block; 2]>,
    bottleneck: [Block; 2],
    decoder: Vec<Block>,
    head: ConvRef,
}

/// A built network: architecture, parameters and the input extents it
/// accepts.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    dims: (usize, usize, usize),
    padded: (usize, usize),
    layout: Layout,
    pub params: ParamSet,
}

fn init_conv(
    params: &mut ParamSet,
    rng: &mut Rng,
    name: &str,
    kernel: &[usize],
    gain: f64,
) -> Result<ConvRef> {
    let c_out = kernel[0];
    let fan_in: usize = kernel[1..].iter().product();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let weight = params.push(format!("{name}.weight"), Tensor::uniform(rng, kernel, -bound, bound)?)?;
    let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[c_out])?)?;
    Ok(ConvRef { weight, bias })
}

fn init_block(
    params: &mut ParamSet,
    rng: &mut Rng,
    kind: BlockKind,
    name: &str,
    c_in: usize,
    c_out: usize,
    slope: f64,
) -> Result<Block> {
    let act_gain = (2.0 / (1.0 + slope * slope)).sqrt();
    Ok(match kind {
        BlockKind::Separable => Block::Separable {
            spatial: init_conv(
                params,
                rng,
                &format!("{name}.spatial"),
                &[c_out, c_in, SPATIAL_KERNEL, SPATIAL_KERNEL],
                1.0,
            )?,
            spectral: init_conv(params, rng, &format!("{name}.spectral"), &[c_out, c_out, SPECTRAL_KERNEL], act_gain)?,
        },
        BlockKind::Full3d => Block::Full {
            conv: init_conv(
                params,
                rng,
                &format!("{name}.conv3d"),
                &[c_out, c_in, FULL_KERNEL, FULL_KERNEL, FULL_KERNEL],
                act_gain,
            )?,
        },
    })
}

impl Network {
    /// Builds and initialises a network for `h × w × b` cubes.
    ///
    /// Weights are drawn uniform in `±g·√(3/fan_in)` and biases start at
    /// zero. The gain `g` is `√(2/(1+slope²))` for convolutions followed by
    /// the leaky rectifier and 1 otherwise, so activations keep their scale
    /// with depth.
    pub fn build(cfg: &NetworkConfig, dims: (usize, usize, usize), rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, w, b) = dims;
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::InvalidShape(vec![h, w, b]));
        }
        let padded = (cfg.padded_extent(h), cfg.padded_extent(w));

        let mut params = ParamSet::new();
        let chans = cfg.block_channels();
        let mut it = chans.iter().copied();
        let mut next = |params: &mut ParamSet, rng: &mut Rng, name: String| -> Result<Block> {
            let (ci, co) = it.next().expect("block_channels covers every block");
            init_block(params, rng, cfg.block, &name, ci, co, cfg.leaky_slope)
        };

        let mut encoder = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            let a = next(&mut params, rng, format!("enc{s}.0"))?;
            let b = next(&mut params, rng, format!("enc{s}.1"))?;
            encoder.push([a, b]);
        }
        let bottleneck = [
            next(&mut params, rng, "mid.0".into())?,
            next(&mut params, rng, "mid.1".into())?,
        ];
        let mut decoder = vec![None; cfg.depth];
        for s in (0..cfg.depth).rev() {
            decoder[s] = Some(next(&mut params, rng, format!("dec{s}"))?);
        }
        let decoder = decoder.into_iter().map(|b| b.expect("filled")).collect();
        let head = init_conv(&mut params, rng, "head", &[cfg.output_channels, cfg.channels[0]], 1.0)?;

        Ok(Self {
            cfg: cfg.clone(),
            dims,
            padded,
            layout: Layout {
                encoder,
                bottleneck,
                decoder,
                head,
            },
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Pads `z` to the internal extents and lifts it to `[1, H', W', B]`.
    pub fn input_tensor(&self, z: &Cube) -> Result<Tensor> {
        if z.dims() != self.dims {
            let (h, w, b) = self.dims;
            return Err(Error::mismatch(z.shape(), &[h, w, b]));
        }
        let (hp, wp) = self.padded;
        let padded = z.reflect_pad_to(hp, wp)?;
        padded.into_tensor().reshape(&[1, hp, wp, self.dims.2])
    }

    fn block(&self, tape: &mut Tape, vars: &[Var], x: Var, block: &Block) -> Result<Var> {
        let y = match *block {
            Block::Separable { spatial, spectral } => {
                let s = tape.conv_spatial(x, vars[spatial.weight], vars[spatial.bias])?;
                tape.conv_spectral(s, vars[spectral.weight], vars[spectral.bias])?
            }
            Block::Full { conv } => tape.conv(x, vars[conv.weight], vars[conv.bias])?,
        };
        Ok(tape.leaky_relu(y, self.cfg.leaky_slope))
    }

    /// Records the forward map on `tape`. `vars` are the tracked parameters
    /// from [`ParamSet::track`], `input` the lifted tensor from
    /// [`Network::input_tensor`]. Returns an `[H, W, B]` node.
    pub fn forward_tracked(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter handle count does not match the network"));
        }
        let (hp, wp) = self.padded;
        if tape.value(input).shape() != [1, hp, wp, self.dims.2] {
            return Err(Error::mismatch(tape.value(input).shape(), &[1, hp, wp, self.dims.2]));
        }
        let mut x = input;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for stage in &self.layout.encoder {
            x = self.block(tape, vars, x, &stage[0])?;
            x = self.block(tape, vars, x, &stage[1])?;
            skips.push(x);
            x = tape.maxpool2d_per_band(x)?;
        }
        for b in &self.layout.bottleneck {
            x = self.block(tape, vars, x, b)?;
        }
        for (s, block) in self.layout.decoder.iter().enumerate().rev() {
            let up = tape.upsample2d_per_band(x)?;
            let cat = tape.concat_channels(&[up, skips[s]])?;
            x = self.block(tape, vars, cat, block)?;
        }
        let head = self.layout.head;
        let y = tape.conv(x, vars[head.weight], vars[head.bias])?;
        let y = tape.sigmoid(y);
        let (h, w, b) = self.dims;
        let y = if (h, w) != (hp, wp) { tape.crop_spatial(y, h, w)? } else { y };
        tape.reshape(y, &[h, w, b])
    }

    /// Untracked forward map `f_Θ(z)`.
    pub fn forward(&self, z: &Cube) -> Result<Cube> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let input = tape.constant(self.input_tensor(z)?);
        let out = self.forward_tracked(&mut tape, &vars, input)?;
        Cube::new(tape.value(out).clone())
    }
}
