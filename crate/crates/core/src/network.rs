//! The full network: a one-shot encoder whose output channels are split into
//! `T` groups, one sub-network per timestep built from turn-off blocks, and a
//! turn-on boundary layer at the end of every stage that carries membrane
//! state to the next timestep.
//!
//! Timesteps are zero-based in this module: `t = 0` is the first step and
//! logits are produced at `t = T - 1` only.
//!
//! Stage `s > 0` reads the spikes of stage `s - 1`'s turn-on membrane at the
//! same timestep through a stride-2 pointwise convolution. With multi-level
//! fusion, stage `s`'s turn-on neuron also integrates the previous-timestep
//! membranes of every deeper stage, resized and channel-aligned to its shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::block::{
    block_forward_eff, reparameterize, BlockInternals, BlockWeights, ConvParam, EffectiveBlock,
};
use crate::error::{shape_err, Error, Result};
use crate::neuron::{fire, turn_on_step, NeuronParams};
use crate::real::Real;
use crate::tensor::{
    channel_align, channel_align_backward, conv2d, conv2d_backward_weight, conv_out_len,
    global_avg_pool, linear, pwconv2d, pwconv2d_strided, resize_nearest, resize_nearest_backward,
    Tensor,
};

pub const ENCODER_KERNEL: usize = 3;
pub const ENCODER_PADDING: usize = 1;
pub const DOWNSAMPLE_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
}

/// Which neurons carry state across timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalLinks {
    /// Only the turn-on neurons at stage boundaries.
    #[default]
    Boundary,
    /// Every block's inner neuron is leaky as well (a fully temporal SNN).
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub timesteps: usize,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    pub neuron: NeuronParams,
    /// Encode a static image once and split the channels over timesteps.
    /// When false every timestep encodes its own frame (or the repeated image).
    pub grouped_encoding: bool,
    /// Divide every stage width by `T` so the total width is fixed across `T`.
    pub grouped_width: bool,
    pub encoder_stride: usize,
    pub temporal_links: TemporalLinks,
    /// Reuse one set of turn-off weights at every timestep.
    pub share_weights: bool,
    pub multi_level: bool,
    pub init_alpha: f64,
    pub gain_init: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            timesteps: 4,
            in_channels: 1,
            in_height: 28,
            in_width: 28,
            stages: vec![
                StageConfig {
                    blocks: 1,
                    channels: 16,
                },
                StageConfig {
                    blocks: 1,
                    channels: 32,
                },
            ],
            num_classes: 10,
            neuron: NeuronParams::default(),
            grouped_encoding: true,
            grouped_width: false,
            encoder_stride: 1,
            temporal_links: TemporalLinks::Boundary,
            share_weights: false,
            multi_level: true,
            init_alpha: 0.0,
            gain_init: 4.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.timesteps == 0 {
            return bad("timesteps must be >= 1".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.in_channels == 0 || self.in_height == 0 || self.in_width == 0 {
            return bad("input dimensions must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.encoder_stride == 0 {
            return bad("encoder_stride must be >= 1".into());
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.channels == 0 {
                return bad(format!("stage {s} has zero channels"));
            }
            if self.grouped_width && st.channels % self.timesteps != 0 {
                return bad(format!(
                    "stage {s} width {} is not divisible by T = {}",
                    st.channels, self.timesteps
                ));
            }
        }
        self.neuron.validate(self.stages.len())?;
        if self.multi_level {
            for s in 0..self.stages.len() {
                for i in s + 1..self.stages.len() {
                    let (a, b) = (self.channels(i), self.channels(s));
                    if a % b != 0 && b % a != 0 {
                        return bad(format!(
                            "stage {i} width {a} cannot be aligned to stage {s} width {b}"
                        ));
                    }
                }
            }
        }
        for s in 0..self.stages.len() {
            self.spatial(s)?;
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Width of stage `s` inside one sub-network.
    pub fn channels(&self, s: usize) -> usize {
        let c = self.stages[s].channels;
        if self.grouped_width {
            c / self.timesteps
        } else {
            c
        }
    }

    /// Spatial size of stage `s`.
    pub fn spatial(&self, s: usize) -> Result<(usize, usize)> {
        let mut h = conv_out_len(
            self.in_height,
            ENCODER_KERNEL,
            self.encoder_stride,
            ENCODER_PADDING,
        )?;
        let mut w = conv_out_len(
            self.in_width,
            ENCODER_KERNEL,
            self.encoder_stride,
            ENCODER_PADDING,
        )?;
        for _ in 0..s {
            h = conv_out_len(h, 1, DOWNSAMPLE_STRIDE, 0)?;
            w = conv_out_len(w, 1, DOWNSAMPLE_STRIDE, 0)?;
        }
        Ok((h, w))
    }

    pub fn stage_shape(&self, s: usize, batch: usize) -> Result<[usize; 4]> {
        let (h, w) = self.spatial(s)?;
        Ok([batch, self.channels(s), h, w])
    }

    pub fn encoder_channels(&self) -> usize {
        if self.grouped_encoding {
            self.timesteps * self.channels(0)
        } else {
            self.channels(0)
        }
    }

    pub fn num_subnets(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.timesteps
        }
    }

    pub fn subnet_index(&self, t: usize) -> usize {
        if self.share_weights {
            0
        } else {
            t
        }
    }

    pub fn leaky_blocks(&self) -> bool {
        self.temporal_links == TemporalLinks::All
    }

    /// Levels fused by stage `s`'s turn-on neuron: `s` alone, or `s..S`.
    pub fn fused_levels(&self, s: usize) -> std::ops::Range<usize> {
        if self.multi_level {
            s..self.stages.len()
        } else {
            s..s + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights<R: Real = f32> {
    /// Stride-2 pointwise projection from the previous stage (absent at stage 0).
    pub downsample: Option<ConvParam<R>>,
    pub blocks: Vec<BlockWeights<R>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubnetWeights<R: Real = f32> {
    pub stages: Vec<StageWeights<R>>,
}

/// All trainable parameters. Turn-off weights live in `subnets` (one entry
/// per timestep unless shared); turn-on weights are indexed by stage only.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<R: Real = f32> {
    pub encoder: ConvParam<R>,
    pub subnets: Vec<SubnetWeights<R>>,
    pub turn_on: Vec<ConvParam<R>>,
    /// `[num_classes, C_last]`
    pub head: Tensor<R>,
}

impl<R: Real> ModelWeights<R> {
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = config.gain_init;
        let encoder = ConvParam::randn(
            &[
                config.encoder_channels(),
                config.in_channels,
                ENCODER_KERNEL,
                ENCODER_KERNEL,
            ],
            g,
            &mut rng,
        );
        let subnets = (0..config.num_subnets())
            .map(|_| SubnetWeights {
                stages: (0..config.num_stages())
                    .map(|s| {
                        let c = config.channels(s);
                        StageWeights {
                            downsample: (s > 0).then(|| {
                                ConvParam::randn(&[c, config.channels(s - 1), 1, 1], g, &mut rng)
                            }),
                            blocks: (0..config.stages[s].blocks)
                                .map(|_| BlockWeights::init(c, g, config.init_alpha, &mut rng))
                                .collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let turn_on = (0..config.num_stages())
            .map(|s| {
                let c = config.channels(s);
                ConvParam::randn(&[c, c, 1, 1], g, &mut rng)
            })
            .collect();
        let last = config.channels(config.num_stages() - 1);
        let scale = 1.0 / (last as f64).sqrt();
        let head = Tensor::from_fn(&[config.num_classes, last], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            R::lit(z * scale)
        });
        Ok(Self {
            encoder,
            subnets,
            turn_on,
            head,
        })
    }

    pub fn subnet(&self, config: &NetworkConfig, t: usize) -> &SubnetWeights<R> {
        &self.subnets[config.subnet_index(t)]
    }

    pub fn effective(&self) -> Result<EffectiveModel<R>> {
        Ok(EffectiveModel {
            encoder: self.encoder.effective()?,
            subnets: self
                .subnets
                .iter()
                .map(|sub| {
                    sub.stages
                        .iter()
                        .map(|st| {
                            Ok(EffectiveStage {
                                downsample: st
                                    .downsample
                                    .as_ref()
                                    .map(|d| d.effective())
                                    .transpose()?,
                                blocks: st
                                    .blocks
                                    .iter()
                                    .map(|b| b.effective())
                                    .collect::<Result<_>>()?,
                            })
                        })
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?,
            turn_on: self
                .turn_on
                .iter()
                .map(|p| p.effective())
                .collect::<Result<_>>()?,
            head: self.head.clone(),
        })
    }

    /// Maps gradients on effective weights back to the stored parameters.
    pub fn pullback(&self, d: &EffectiveModel<R>) -> Result<ModelWeights<R>> {
        Ok(ModelWeights {
            encoder: self.encoder.backward(&d.encoder)?,
            subnets: self
                .subnets
                .iter()
                .zip(&d.subnets)
                .map(|(sub, dsub)| {
                    Ok(SubnetWeights {
                        stages: sub
                            .stages
                            .iter()
                            .zip(dsub)
                            .map(|(st, dst)| {
                                let downsample = match (&st.downsample, &dst.downsample) {
                                    (Some(p), Some(g)) => Some(p.backward(g)?),
                                    _ => None,
                                };
                                let blocks = st
                                    .blocks
                                    .iter()
                                    .zip(&dst.blocks)
                                    .map(|(b, g)| {
                                        Ok(BlockWeights {
                                            dw: b.dw.backward(&g.dw)?,
                                            pw: b.pw.backward(&g.pw)?,
                                            alpha: g.alpha,
                                        })
                                    })
                                    .collect::<Result<_>>()?;
                                Ok(StageWeights { downsample, blocks })
                            })
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?,
            turn_on: self
                .turn_on
                .iter()
                .zip(&d.turn_on)
                .map(|(p, g)| p.backward(g))
                .collect::<Result<_>>()?,
            head: d.head.clone(),
        })
    }

    /// Same structure with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, _, data| data.iter_mut().for_each(|x| *x = R::zero()));
        z
    }

    /// Calls `f(name, shape, values)` for every parameter in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[R])) {
        fn conv<R: Real>(f: &mut impl FnMut(&str, &[usize], &[R]), name: &str, p: &ConvParam<R>) {
            f(&format!("{name}.weight"), p.weight.shape(), p.weight.data());
            f(&format!("{name}.gain"), &[p.gain.len()], &p.gain);
        }
        conv(&mut f, "encoder", &self.encoder);
        for (k, sub) in self.subnets.iter().enumerate() {
            for (s, st) in sub.stages.iter().enumerate() {
                if let Some(d) = &st.downsample {
                    conv(&mut f, &format!("sub{k}.stage{s}.down"), d);
                }
                for (b, blk) in st.blocks.iter().enumerate() {
                    let base = format!("sub{k}.stage{s}.block{b}");
                    conv(&mut f, &format!("{base}.dw"), &blk.dw);
                    conv(&mut f, &format!("{base}.pw"), &blk.pw);
                    f(
                        &format!("{base}.alpha"),
                        &[1],
                        std::slice::from_ref(&blk.alpha),
                    );
                }
            }
        }
        for (s, p) in self.turn_on.iter().enumerate() {
            conv(&mut f, &format!("turn_on{s}"), p);
        }
        f("head.weight", self.head.shape(), self.head.data());
    }

    /// Mutable counterpart of [`ModelWeights::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [R])) {
        fn conv<R: Real>(
            f: &mut impl FnMut(&str, &[usize], &mut [R]),
            name: &str,
            p: &mut ConvParam<R>,
        ) {
            let shape = p.weight.shape().to_vec();
            f(&format!("{name}.weight"), &shape, p.weight.data_mut());
            let n = p.gain.len();
            f(&format!("{name}.gain"), &[n], &mut p.gain);
        }
        conv(&mut f, "encoder", &mut self.encoder);
        for (k, sub) in self.subnets.iter_mut().enumerate() {
            for (s, st) in sub.stages.iter_mut().enumerate() {
                if let Some(d) = &mut st.downsample {
                    conv(&mut f, &format!("sub{k}.stage{s}.down"), d);
                }
                for (b, blk) in st.blocks.iter_mut().enumerate() {
                    let base = format!("sub{k}.stage{s}.block{b}");
                    conv(&mut f, &format!("{base}.dw"), &mut blk.dw);
                    conv(&mut f, &format!("{base}.pw"), &mut blk.pw);
                    f(
                        &format!("{base}.alpha"),
                        &[1],
                        std::slice::from_mut(&mut blk.alpha),
                    );
                }
            }
        }
        for (s, p) in self.turn_on.iter_mut().enumerate() {
            conv(&mut f, &format!("turn_on{s}"), p);
        }
        let shape = self.head.shape().to_vec();
        f("head.weight", &shape, self.head.data_mut());
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _, _| names.push(n.to_string()));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, d| n += d.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn cast<S: Real>(&self) -> ModelWeights<S> {
        let conv = |p: &ConvParam<R>| ConvParam {
            weight: p.weight.cast(),
            gain: p.gain.iter().map(|g| S::lit(Real::to_f64(*g))).collect(),
            standardize: p.standardize,
        };
        ModelWeights {
            encoder: conv(&self.encoder),
            subnets: self
                .subnets
                .iter()
                .map(|sub| SubnetWeights {
                    stages: sub
                        .stages
                        .iter()
                        .map(|st| StageWeights {
                            downsample: st.downsample.as_ref().map(conv),
                            blocks: st
                                .blocks
                                .iter()
                                .map(|b| BlockWeights {
                                    dw: conv(&b.dw),
                                    pw: conv(&b.pw),
                                    alpha: S::lit(Real::to_f64(b.alpha)),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
            turn_on: self.turn_on.iter().map(conv).collect(),
            head: self.head.cast(),
        }
    }

    /// Inference form: standardization folded into every convolution and
    /// each block's `alpha` merged into its pointwise weight.
    pub fn reparameterize(&self) -> Result<Self> {
        let fold = |p: &ConvParam<R>| -> Result<ConvParam<R>> {
            let w = p.effective()?;
            Ok(ConvParam {
                gain: vec![R::one(); w.shape()[0]],
                weight: w,
                standardize: false,
            })
        };
        Ok(ModelWeights {
            encoder: fold(&self.encoder)?,
            subnets: self
                .subnets
                .iter()
                .map(|sub| {
                    Ok(SubnetWeights {
                        stages: sub
                            .stages
                            .iter()
                            .map(|st| {
                                Ok(StageWeights {
                                    downsample: st.downsample.as_ref().map(fold).transpose()?,
                                    blocks: st
                                        .blocks
                                        .iter()
                                        .map(reparameterize)
                                        .collect::<Result<_>>()?,
                                })
                            })
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?,
            turn_on: self.turn_on.iter().map(fold).collect::<Result<_>>()?,
            head: self.head.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EffectiveStage<R: Real = f32> {
    pub downsample: Option<Tensor<R>>,
    pub blocks: Vec<EffectiveBlock<R>>,
}

/// Weights as applied in one pass. Also used as the accumulator for
/// gradients with respect to those weights.
#[derive(Clone, Debug)]
pub struct EffectiveModel<R: Real = f32> {
    pub encoder: Tensor<R>,
    pub subnets: Vec<Vec<EffectiveStage<R>>>,
    pub turn_on: Vec<Tensor<R>>,
    pub head: Tensor<R>,
}

impl<R: Real> EffectiveModel<R> {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<R>| Tensor::zeros(t.shape());
        Self {
            encoder: z(&self.encoder),
            subnets: self
                .subnets
                .iter()
                .map(|sub| {
                    sub.iter()
                        .map(|st| EffectiveStage {
                            downsample: st.downsample.as_ref().map(z),
                            blocks: st
                                .blocks
                                .iter()
                                .map(|b| EffectiveBlock {
                                    dw: z(&b.dw),
                                    pw: z(&b.pw),
                                    alpha: R::zero(),
                                })
                                .collect(),
                        })
                        .collect()
                })
                .collect(),
            turn_on: self.turn_on.iter().map(z).collect(),
            head: z(&self.head),
        }
    }

    pub fn subnet(&self, config: &NetworkConfig, t: usize) -> &[EffectiveStage<R>] {
        &self.subnets[config.subnet_index(t)]
    }
}

/// Turn-on membranes `V^s[t]` of every stage at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnOnStateBundle<R: Real = f32> {
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> TurnOnStateBundle<R> {
    pub fn zeros(config: &NetworkConfig, batch: usize) -> Result<Self> {
        Ok(Self {
            v: (0..config.num_stages())
                .map(|s| Ok(Tensor::zeros(&config.stage_shape(s, batch)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<R> {
        let mut m = R::zero();
        for (a, b) in self.v.iter().zip(&other.v) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }

    pub fn nbytes(&self) -> usize {
        self.v.iter().map(Tensor::nbytes).sum()
    }
}

/// Activations of one stage at one timestep.
#[derive(Clone, Debug)]
pub struct StageTrace<R: Real = f32> {
    /// Spikes of the previous stage's turn-on membrane (stage `s > 0`).
    pub input_spikes: Option<Tensor<R>>,
    pub m_in: Tensor<R>,
    pub blocks: Vec<BlockInternals<R>>,
    pub m_out: Tensor<R>,
    pub boundary_spikes: Tensor<R>,
    /// Turn-on drive `W_on S`.
    pub pre: Tensor<R>,
}

impl<R: Real> StageTrace<R> {
    /// Every retained tensor, for memory accounting.
    pub fn tensors(&self) -> Vec<&Tensor<R>> {
        let mut v: Vec<&Tensor<R>> = self.input_spikes.iter().collect();
        v.push(&self.m_in);
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.m_out, &self.boundary_spikes, &self.pre]);
        v
    }
}

#[derive(Clone, Debug)]
pub struct TimestepTrace<R: Real = f32> {
    pub t: usize,
    pub group_input: Tensor<R>,
    pub stages: Vec<StageTrace<R>>,
    pub states: TurnOnStateBundle<R>,
}

impl<R: Real> TimestepTrace<R> {
    /// Inner membranes `u` of every block, the carried state of leaky blocks.
    pub fn inner_state(&self) -> InnerState<R> {
        self.stages
            .iter()
            .map(|st| st.blocks.iter().map(|b| b.u.clone()).collect())
            .collect()
    }
}

/// Per stage, per block inner membranes from the previous timestep.
pub type InnerState<R> = Vec<Vec<Tensor<R>>>;

/// Encoder output for every timestep.
///
/// Grouped mode applies one convolution with `T * C0` outputs and splits the
/// channels contiguously, group `t` feeding sub-network `t`. Otherwise the
/// input is either one image (encoded once and repeated) or `T` frames stacked
/// along the channel axis, each encoded independently.
pub fn encode<R: Real>(
    input: &Tensor<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
) -> Result<Vec<Tensor<R>>> {
    let t_steps = config.timesteps;
    if config.grouped_encoding {
        let full = conv2d(input, &eff.encoder, config.encoder_stride, ENCODER_PADDING)?;
        let c = full.shape()[1];
        if !c.is_multiple_of(t_steps) {
            return shape_err(
                "encode",
                format!("{c} encoder channels are not divisible by T = {t_steps}"),
            );
        }
        let g = c / t_steps;
        (0..t_steps)
            .map(|t| full.slice_channels(t * g, (t + 1) * g))
            .collect()
    } else if input.dims4()?.1 == config.in_channels {
        let once = conv2d(input, &eff.encoder, config.encoder_stride, ENCODER_PADDING)?;
        Ok(vec![once; t_steps])
    } else {
        (0..t_steps)
            .map(|t| encode_group(input, &eff.encoder, config, t))
            .collect()
    }
}

/// Encoder output for timestep `t` alone.
pub fn encode_group<R: Real>(
    input: &Tensor<R>,
    encoder: &Tensor<R>,
    config: &NetworkConfig,
    t: usize,
) -> Result<Tensor<R>> {
    let (x, w) = encoder_operands(input, encoder, config, t)?;
    conv2d(&x, &w, config.encoder_stride, ENCODER_PADDING)
}

/// Adds the encoder-weight gradient from timestep `t`'s group gradient.
pub fn encode_group_backward<R: Real>(
    input: &Tensor<R>,
    encoder: &Tensor<R>,
    config: &NetworkConfig,
    t: usize,
    d_group: &Tensor<R>,
    d_encoder: &mut Tensor<R>,
) -> Result<()> {
    let (x, w) = encoder_operands(input, encoder, config, t)?;
    let (_, _, kh, kw) = w.dims4()?;
    let dw = conv2d_backward_weight(
        &x,
        d_group,
        (kh, kw),
        config.encoder_stride,
        ENCODER_PADDING,
    )?;
    if config.grouped_encoding {
        d_encoder.add_to_outer(t * w.shape()[0], &dw)
    } else {
        d_encoder.add_assign(&dw)
    }
}

fn encoder_operands<R: Real>(
    input: &Tensor<R>,
    encoder: &Tensor<R>,
    config: &NetworkConfig,
    t: usize,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let (_, c, _, _) = input.dims4()?;
    let cin = config.in_channels;
    let t_steps = config.timesteps;
    if config.grouped_encoding {
        let co = encoder.shape()[0];
        if !co.is_multiple_of(t_steps) {
            return shape_err(
                "encode",
                format!("{co} encoder channels are not divisible by T = {t_steps}"),
            );
        }
        if c != cin {
            return shape_err("encode", format!("input has {c} channels, expected {cin}"));
        }
        let g = co / t_steps;
        Ok((input.clone(), encoder.slice_outer(t * g, (t + 1) * g)?))
    } else if c == cin {
        Ok((input.clone(), encoder.clone()))
    } else if c == cin * t_steps {
        Ok((
            input.slice_channels(t * cin, (t + 1) * cin)?,
            encoder.clone(),
        ))
    } else {
        shape_err(
            "encode",
            format!(
                "input has {c} channels, expected {cin} or {} frames",
                cin * t_steps
            ),
        )
    }
}

/// Resizes and channel-aligns stage `from`'s membrane to stage `to`'s shape.
pub fn align_to<R: Real>(v: &Tensor<R>, config: &NetworkConfig, to: usize) -> Result<Tensor<R>> {
    let (h, w) = config.spatial(to)?;
    let (_, _, vh, vw) = v.dims4()?;
    let resized = if (vh, vw) == (h, w) {
        v.clone()
    } else {
        resize_nearest(v, h, w)?
    };
    channel_align(&resized, config.channels(to))
}

/// Adjoint of [`align_to`] from stage `to` back to stage `from`.
pub fn align_to_backward<R: Real>(
    d: &Tensor<R>,
    config: &NetworkConfig,
    from: usize,
) -> Result<Tensor<R>> {
    let (h, w) = config.spatial(from)?;
    let dc = channel_align_backward(d, config.channels(from))?;
    let (_, _, dh, dw) = dc.dims4()?;
    if (dh, dw) == (h, w) {
        Ok(dc)
    } else {
        resize_nearest_backward(&dc, h, w)
    }
}

/// Membrane entering stage `s`: the encoder group at stage 0, otherwise the
/// downsampled spikes of `v_below = V^{s-1}[t]`.
pub fn stage_input<R: Real>(
    s: usize,
    group_input: &Tensor<R>,
    v_below: Option<&Tensor<R>>,
    stage: &EffectiveStage<R>,
    params: &NeuronParams,
) -> Result<(Option<Tensor<R>>, Tensor<R>)> {
    match (s, v_below, &stage.downsample) {
        (0, _, _) => Ok((None, group_input.clone())),
        (_, Some(v), Some(w)) => {
            let spikes = fire(v, params);
            let m = pwconv2d_strided(&spikes, w, DOWNSAMPLE_STRIDE)?;
            Ok((Some(spikes), m))
        }
        _ => Err(Error::Invalid(format!(
            "stage {s} is missing its input or downsample weight"
        ))),
    }
}

/// Runs stage `s`'s turn-off blocks and the turn-on drive, without the
/// temporal fusion.
pub fn run_stage<R: Real>(
    s: usize,
    input_spikes: Option<Tensor<R>>,
    m_in: Tensor<R>,
    stage: &EffectiveStage<R>,
    turn_on: &Tensor<R>,
    config: &NetworkConfig,
    inner_prev: Option<&[Tensor<R>]>,
) -> Result<StageTrace<R>> {
    let params = &config.neuron;
    let mut m = m_in.clone();
    let mut blocks = Vec::with_capacity(stage.blocks.len());
    for (b, blk) in stage.blocks.iter().enumerate() {
        let prev = inner_prev.map(|u| &u[b]);
        let (next, internals) = block_forward_eff(&m, blk, params, prev)?;
        if next.shape() != config.stage_shape(s, m.shape()[0])?.as_slice() {
            return shape_err(
                "run_stage",
                format!("stage {s} produced {:?}", next.shape()),
            );
        }
        blocks.push(internals);
        m = next;
    }
    let boundary_spikes = fire(&m, params);
    let pre = pwconv2d(&boundary_spikes, turn_on)?;
    Ok(StageTrace {
        input_spikes,
        m_in,
        blocks,
        m_out: m,
        boundary_spikes,
        pre,
    })
}

/// Fuses `prev` levels `>= s` with stage `s`'s drive into `V^s[t]`.
pub fn fuse_turn_on<R: Real>(
    s: usize,
    prev: &TurnOnStateBundle<R>,
    pre: &Tensor<R>,
    config: &NetworkConfig,
) -> Result<Tensor<R>> {
    let aligned: Vec<Tensor<R>> = config
        .fused_levels(s)
        .map(|i| {
            if i == s {
                Ok(prev.v[s].clone())
            } else {
                align_to(&prev.v[i], config, s)
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<R>> = aligned.iter().collect();
    Ok(turn_on_step(&refs, pre, &config.neuron, s)?.v)
}

/// Logits from the last stage's turn-on membrane.
pub fn head_forward<R: Real>(v_last: &Tensor<R>, head: &Tensor<R>) -> Result<Tensor<R>> {
    linear(&global_avg_pool(v_last)?, head)
}

/// One sub-network step. `prev` holds `V[t-1]` (zeros at `t = 0`);
/// `inner_prev` is required when blocks are leaky.
pub fn forward_timestep<R: Real>(
    t: usize,
    group_input: &Tensor<R>,
    prev: &TurnOnStateBundle<R>,
    inner_prev: Option<&InnerState<R>>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
) -> Result<(Option<Tensor<R>>, TimestepTrace<R>)> {
    let batch = group_input.shape()[0];
    if prev.v.len() != config.num_stages() {
        return shape_err(
            "forward_timestep",
            format!("{} states for {} stages", prev.v.len(), config.num_stages()),
        );
    }
    for (s, v) in prev.v.iter().enumerate() {
        if v.shape() != config.stage_shape(s, batch)?.as_slice() {
            return shape_err(
                "forward_timestep",
                format!("state {s} has shape {:?}", v.shape()),
            );
        }
    }
    if config.leaky_blocks() && inner_prev.is_none() {
        return Err(Error::Invalid(
            "leaky blocks need the previous inner state".into(),
        ));
    }
    let sub = eff.subnet(config, t);
    let mut stages = Vec::with_capacity(config.num_stages());
    let mut states = Vec::with_capacity(config.num_stages());
    for s in 0..config.num_stages() {
        let (spk, m_in) = stage_input(s, group_input, states.last(), &sub[s], &config.neuron)?;
        let inner = inner_prev.map(|u| u[s].as_slice());
        let trace = run_stage(s, spk, m_in, &sub[s], &eff.turn_on[s], config, inner)?;
        states.push(fuse_turn_on(s, prev, &trace.pre, config)?);
        stages.push(trace);
    }
    let states = TurnOnStateBundle { v: states };
    let logits = if t + 1 == config.timesteps {
        Some(head_forward(
            states.v.last().expect("non-empty"),
            &eff.head,
        )?)
    } else {
        None
    };
    Ok((
        logits,
        TimestepTrace {
            t,
            group_input: group_input.clone(),
            stages,
            states,
        },
    ))
}

/// Zero inner state for leaky blocks.
pub fn zero_inner_state<R: Real>(config: &NetworkConfig, batch: usize) -> Result<InnerState<R>> {
    (0..config.num_stages())
        .map(|s| {
            let shape = config.stage_shape(s, batch)?;
            Ok(vec![Tensor::zeros(&shape); config.stages[s].blocks])
        })
        .collect()
}

/// All timesteps; logits come from the last one.
pub fn forward_full<R: Real>(
    input: &Tensor<R>,
    weights: &ModelWeights<R>,
    config: &NetworkConfig,
) -> Result<(Tensor<R>, Vec<TimestepTrace<R>>)> {
    let eff = weights.effective()?;
    forward_full_eff(input, &eff, config)
}

pub fn forward_full_eff<R: Real>(
    input: &Tensor<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
) -> Result<(Tensor<R>, Vec<TimestepTrace<R>>)> {
    let groups = encode(input, eff, config)?;
    let batch = input.shape()[0];
    let mut prev = TurnOnStateBundle::zeros(config, batch)?;
    let mut inner = config
        .leaky_blocks()
        .then(|| zero_inner_state(config, batch))
        .transpose()?;
    let mut traces = Vec::with_capacity(config.timesteps);
    let mut logits = None;
    for (t, g) in groups.iter().enumerate() {
        let (out, trace) = forward_timestep(t, g, &prev, inner.as_ref(), eff, config)?;
        prev = trace.states.clone();
        if inner.is_some() {
            inner = Some(trace.inner_state());
        }
        logits = out;
        traces.push(trace);
    }
    Ok((logits.expect("T >= 1"), traces))
}

/// Logits only, keeping a single timestep of activations alive.
pub fn predict<R: Real>(
    input: &Tensor<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
) -> Result<Tensor<R>> {
    let batch = input.shape()[0];
    let mut prev = TurnOnStateBundle::zeros(config, batch)?;
    let mut inner = config
        .leaky_blocks()
        .then(|| zero_inner_state(config, batch))
        .transpose()?;
    let mut logits = None;
    for t in 0..config.timesteps {
        let g = encode_group(input, &eff.encoder, config, t)?;
        let (out, trace) = forward_timestep(t, &g, &prev, inner.as_ref(), eff, config)?;
        if inner.is_some() {
            inner = Some(trace.inner_state());
        }
        prev = trace.states;
        logits = out;
    }
    Ok(logits.expect("T >= 1"))
}
