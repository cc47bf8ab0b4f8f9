//! Membrane-shortcut block: spike, 5x5 depthwise conv, spike, pointwise conv,
//! scale by the ReZero gate `alpha`, add to the incoming membrane.
//!
//! There is no batch normalization. Convolution weights are standardized per
//! output channel instead, and `alpha` starts at zero so a freshly
//! initialised block is the identity on its membrane input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::neuron::{fire, surrogate_grad, NeuronParams};
use crate::real::Real;
use crate::tensor::{
    dwconv2d, dwconv2d_backward_input, dwconv2d_backward_weight, pwconv2d, pwconv2d_backward_input,
    pwconv2d_backward_weight, Tensor,
};

pub const WS_EPS: f64 = 1e-5;
pub const DW_KERNEL: usize = 5;
pub const DW_PADDING: usize = 2;

/// Per-output-channel `(w - mean) / sqrt(var + eps) * gain / sqrt(fan_in)`.
///
/// Channels with fan-in below 2 have no usable variance and are only scaled
/// by their gain.
pub fn standardize_weight<R: Real>(w: &Tensor<R>, gain: &[R]) -> Result<Tensor<R>> {
    let cout = w.shape()[0];
    if gain.len() != cout {
        return shape_err(
            "standardize_weight",
            format!("{} gains for {cout} channels", gain.len()),
        );
    }
    let fan_in = w.len() / cout;
    let mut out = w.clone();
    for (c, row) in out.data_mut().chunks_mut(fan_in).enumerate() {
        if fan_in < 2 {
            row.iter_mut().for_each(|x| *x *= gain[c]);
            continue;
        }
        let (mean, sigma) = moments(row);
        let k = gain[c] / (sigma * R::lit(fan_in as f64).sqrt());
        row.iter_mut().for_each(|x| *x = (*x - mean) * k);
    }
    Ok(out)
}

fn moments<R: Real>(row: &[R]) -> (R, R) {
    let n = R::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<R>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<R>() / n;
    (mean, (var + R::lit(WS_EPS)).sqrt())
}

/// Adjoint of [`standardize_weight`]: returns `(d raw weight, d gain)`.
pub fn standardize_weight_backward<R: Real>(
    w: &Tensor<R>,
    gain: &[R],
    d_eff: &Tensor<R>,
) -> Result<(Tensor<R>, Vec<R>)> {
    w.check_same(d_eff, "standardize_weight_backward")?;
    let cout = w.shape()[0];
    let fan_in = w.len() / cout;
    let mut dw = Tensor::zeros(w.shape());
    let mut dgain = vec![R::zero(); cout];
    let n = R::lit(fan_in as f64);
    let rows = w.data().chunks(fan_in).zip(d_eff.data().chunks(fan_in));
    for (c, ((wr, gr), dr)) in rows.zip(dw.data_mut().chunks_mut(fan_in)).enumerate() {
        if fan_in < 2 {
            dgain[c] = wr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            dr.iter_mut().zip(gr).for_each(|(d, &g)| *d = g * gain[c]);
            continue;
        }
        let (mean, sigma) = moments(wr);
        let k = R::one() / n.sqrt();
        let what: Vec<R> = wr.iter().map(|&x| (x - mean) / sigma).collect();
        dgain[c] = k * gr.iter().zip(&what).map(|(&g, &h)| g * h).sum::<R>();
        let dhat: Vec<R> = gr.iter().map(|&g| g * gain[c] * k).collect();
        let mean_d = dhat.iter().copied().sum::<R>() / n;
        let mean_dh = dhat.iter().zip(&what).map(|(&d, &h)| d * h).sum::<R>() / n;
        for ((out, &d), &h) in dr.iter_mut().zip(&dhat).zip(&what) {
            *out = (d - mean_d - h * mean_dh) / sigma;
        }
    }
    Ok((dw, dgain))
}

/// A convolution weight with its standardization gains.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParam<R: Real = f32> {
    pub weight: Tensor<R>,
    pub gain: Vec<R>,
    /// `false` for folded inference weights, which are used as stored (times gain).
    pub standardize: bool,
}

impl<R: Real> ConvParam<R> {
    pub fn new(weight: Tensor<R>, gain: R) -> Self {
        let cout = weight.shape()[0];
        Self {
            weight,
            gain: vec![gain; cout],
            standardize: true,
        }
    }

    pub fn randn(shape: &[usize], gain: f64, rng: &mut impl Rng) -> Self {
        let weight = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            R::lit(z)
        });
        Self::new(weight, R::lit(gain))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            gain: vec![R::zero(); self.gain.len()],
            standardize: self.standardize,
        }
    }

    /// The weight actually applied by the convolution.
    pub fn effective(&self) -> Result<Tensor<R>> {
        if self.standardize {
            standardize_weight(&self.weight, &self.gain)
        } else {
            let per = self.weight.len() / self.gain.len();
            let mut w = self.weight.clone();
            for (row, &g) in w.data_mut().chunks_mut(per).zip(&self.gain) {
                row.iter_mut().for_each(|x| *x *= g);
            }
            Ok(w)
        }
    }

    /// Maps a gradient on the effective weight back to `(weight, gain)`.
    pub fn backward(&self, d_eff: &Tensor<R>) -> Result<ConvParam<R>> {
        let (weight, gain) = if self.standardize {
            standardize_weight_backward(&self.weight, &self.gain, d_eff)?
        } else {
            let per = self.weight.len() / self.gain.len();
            let mut dw = d_eff.clone();
            let mut dg = vec![R::zero(); self.gain.len()];
            let rows = dw
                .data_mut()
                .chunks_mut(per)
                .zip(self.weight.data().chunks(per));
            for (c, (dr, wr)) in rows.enumerate() {
                dg[c] = dr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                dr.iter_mut().for_each(|x| *x *= self.gain[c]);
            }
            (dw, dg)
        };
        Ok(ConvParam {
            weight,
            gain,
            standardize: self.standardize,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<R: Real = f32> {
    /// `[C, 1, 5, 5]`
    pub dw: ConvParam<R>,
    /// `[C, C, 1, 1]`
    pub pw: ConvParam<R>,
    pub alpha: R,
}

impl<R: Real> BlockWeights<R> {
    pub fn init(channels: usize, gain: f64, alpha: f64, rng: &mut impl Rng) -> Self {
        Self {
            dw: ConvParam::randn(&[channels, 1, DW_KERNEL, DW_KERNEL], gain, rng),
            pw: ConvParam::randn(&[channels, channels, 1, 1], gain, rng),
            alpha: R::lit(alpha),
        }
    }

    pub fn effective(&self) -> Result<EffectiveBlock<R>> {
        Ok(EffectiveBlock {
            dw: self.dw.effective()?,
            pw: self.pw.effective()?,
            alpha: self.alpha,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw.weight.shape()[0]
    }
}

/// Weights as applied in one forward pass, standardization already done.
#[derive(Clone, Debug)]
pub struct EffectiveBlock<R: Real = f32> {
    pub dw: Tensor<R>,
    pub pw: Tensor<R>,
    pub alpha: R,
}

/// Activations of one block kept for its backward pass.
#[derive(Clone, Debug)]
pub struct BlockInternals<R: Real = f32> {
    pub m_in: Tensor<R>,
    pub s1: Tensor<R>,
    /// Membrane of the inner neuron (depthwise output, or its leaky integral).
    pub u: Tensor<R>,
    pub s2: Tensor<R>,
    pub y: Tensor<R>,
}

impl<R: Real> BlockInternals<R> {
    pub fn tensors(&self) -> [&Tensor<R>; 5] {
        [&self.m_in, &self.s1, &self.u, &self.s2, &self.y]
    }
}

/// Forward pass with turn-off inner neurons.
pub fn block_forward<R: Real>(
    membrane_in: &Tensor<R>,
    weights: &BlockWeights<R>,
    params: &NeuronParams,
) -> Result<(Tensor<R>, BlockInternals<R>)> {
    block_forward_eff(membrane_in, &weights.effective()?, params, None)
}

/// Forward pass on effective weights. With `inner_prev` the inner neuron is
/// leaky: `u = (1 - 1/tau) u_prev + dw(s1) / tau`.
pub fn block_forward_eff<R: Real>(
    membrane_in: &Tensor<R>,
    eff: &EffectiveBlock<R>,
    params: &NeuronParams,
    inner_prev: Option<&Tensor<R>>,
) -> Result<(Tensor<R>, BlockInternals<R>)> {
    let s1 = fire(membrane_in, params);
    let drive = dwconv2d(&s1, &eff.dw, 1, DW_PADDING)?;
    let u = match inner_prev {
        None => drive,
        Some(prev) => {
            let mut u = drive.scale(R::lit(params.drive_scale()));
            u.axpy(R::lit(1.0 - 1.0 / params.tau), prev)?;
            u
        }
    };
    let s2 = fire(&u, params);
    let y = pwconv2d(&s2, &eff.pw)?;
    if y.shape() != membrane_in.shape() {
        return shape_err(
            "block_forward",
            format!(
                "branch {:?} vs shortcut {:?}",
                y.shape(),
                membrane_in.shape()
            ),
        );
    }
    let mut m_out = membrane_in.clone();
    m_out.axpy(eff.alpha, &y)?;
    Ok((
        m_out,
        BlockInternals {
            m_in: membrane_in.clone(),
            s1,
            u,
            s2,
            y,
        },
    ))
}

/// Gradients with respect to the effective block weights.
#[derive(Clone, Debug)]
pub struct EffectiveBlockGrads<R: Real = f32> {
    pub dw: Tensor<R>,
    pub pw: Tensor<R>,
    pub alpha: R,
}

pub struct BlockBackward<R: Real> {
    pub dm_in: Tensor<R>,
    pub grads: EffectiveBlockGrads<R>,
    /// `dL/du[t]` of the inner neuron, total over spatial and temporal paths.
    pub du: Tensor<R>,
}

/// Backward through one block.
///
/// `lif` selects the leaky inner neuron; `du_future` is the temporal
/// gradient reaching `u[t]` from `u[t+1]` (already multiplied by the decay).
/// `sg_scale` multiplies every surrogate derivative (1.0 in normal use).
pub fn block_backward<R: Real>(
    dm_out: &Tensor<R>,
    internals: &BlockInternals<R>,
    eff: &EffectiveBlock<R>,
    params: &NeuronParams,
    lif: bool,
    du_future: Option<&Tensor<R>>,
    sg_scale: R,
) -> Result<BlockBackward<R>> {
    let (_, _, h, w) = internals.m_in.dims4()?;
    let alpha_grad = dm_out.dot(&internals.y)?;
    let dy = dm_out.scale(eff.alpha);
    let dpw = pwconv2d_backward_weight(&internals.s2, &dy, 1)?;
    let ds2 = pwconv2d_backward_input(&dy, &eff.pw, (h, w), 1)?;
    let mut du = ds2.mul(&surrogate_grad(&internals.u, params))?;
    if sg_scale != R::one() {
        du = du.scale(sg_scale);
    }
    if let Some(f) = du_future {
        du.add_assign(f)?;
    }
    let ddrive = if lif {
        du.scale(R::lit(params.drive_scale()))
    } else {
        du.clone()
    };
    let ddw = dwconv2d_backward_weight(
        &internals.s1,
        &ddrive,
        (DW_KERNEL, DW_KERNEL),
        1,
        DW_PADDING,
    )?;
    let ds1 = dwconv2d_backward_input(&ddrive, &eff.dw, (h, w), 1, DW_PADDING)?;
    let mut dm_in = dm_out.clone();
    let sg = surrogate_grad(&internals.m_in, params);
    dm_in.axpy(sg_scale, &ds1.mul(&sg)?)?;
    Ok(BlockBackward {
        dm_in,
        grads: EffectiveBlockGrads {
            dw: ddw,
            pw: dpw,
            alpha: alpha_grad,
        },
        du,
    })
}

/// Folds the ReZero gate into the pointwise weight for inference.
///
/// The result carries already-standardized weights with unit gains and
/// `alpha = 1`, so inference needs no scaling of the branch output.
pub fn reparameterize<R: Real>(weights: &BlockWeights<R>) -> Result<BlockWeights<R>> {
    let eff = weights.effective()?;
    let ones = |t: &Tensor<R>| vec![R::one(); t.shape()[0]];
    Ok(BlockWeights {
        dw: ConvParam {
            gain: ones(&eff.dw),
            weight: eff.dw,
            standardize: false,
        },
        pw: ConvParam {
            gain: ones(&eff.pw),
            weight: eff.pw.scale(weights.alpha),
            standardize: false,
        },
        alpha: R::one(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(w: Tensor<f32>) -> ConvParam<f32> {
        ConvParam {
            gain: vec![1.0; w.shape()[0]],
            weight: w,
            standardize: false,
        }
    }

    #[test]
    fn standardize_hand_values() {
        let w = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = standardize_weight(&w, &[1.0]).unwrap();
        let undo = 3f64.sqrt();
        let expect = [-1.2247, 0.0, 1.2247];
        for (&v, e) in s.data().iter().zip(expect) {
            assert!((v * undo - e).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn standardize_constant_channel_is_zero() {
        let w = Tensor::new(vec![1, 3], vec![5.0f32; 3]).unwrap();
        assert_eq!(standardize_weight(&w, &[1.0]).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn standardize_is_idempotent_up_to_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvParam::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let once = standardize_weight(&p.weight, &p.gain).unwrap();
        // undo the fan-in scale so the rows are unit variance again
        let unit = once.scale(27f64.sqrt());
        let twice = standardize_weight(&unit, &p.gain)
            .unwrap()
            .scale(27f64.sqrt());
        assert!(twice.max_abs_diff(&unit).unwrap() < 1e-4);
        for row in unit.data().chunks(27) {
            let mean: f64 = row.iter().sum::<f64>() / 27.0;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 27.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn standardize_skips_unit_fan_in() {
        let w = Tensor::new(vec![2, 1, 1, 1], vec![3.0f32, -2.0]).unwrap();
        assert_eq!(
            standardize_weight(&w, &[2.0, 1.0]).unwrap().data(),
            &[6.0, -2.0]
        );
    }

    #[test]
    fn standardize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ConvParam::<f64>::randn(&[3, 2, 2, 2], 1.3, &mut rng);
        let probe = Tensor::from_fn(p.weight.shape(), |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let loss = |q: &ConvParam<f64>| q.effective().unwrap().dot(&probe).unwrap();
        let g = p.backward(&probe).unwrap();
        let h = 1e-5;
        for i in 0..p.weight.len() {
            let mut a = p.clone();
            a.weight.data_mut()[i] += h;
            let mut b = p.clone();
            b.weight.data_mut()[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g.weight.data()[i]).abs() < 1e-7, "weight {i}");
        }
        for c in 0..3 {
            let mut a = p.clone();
            a.gain[c] += h;
            let mut b = p.clone();
            b.gain[c] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g.gain[c]).abs() < 1e-7, "gain {c}");
        }
    }

    #[test]
    fn zero_alpha_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = BlockWeights::<f32>::init(3, 1.0, 0.0, &mut rng);
        let x = Tensor::from_fn(&[2, 3, 6, 6], |i| ((i as f32) * 0.61).sin() * 2.0);
        let (out, _) = block_forward(&x, &w, &NeuronParams::default()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_input_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = BlockWeights::<f32>::init(2, 1.0, 0.7, &mut rng);
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let (out, _) = block_forward(&x, &w, &NeuronParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_traced_single_pixel_block() {
        let mut dw = Tensor::zeros(&[1, 1, 5, 5]);
        dw.data_mut()[12] = 1.0;
        let w = BlockWeights {
            dw: raw(dw),
            pw: raw(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
            alpha: 1.0,
        };
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let (out, int) = block_forward(&x, &w, &NeuronParams::default()).unwrap();
        assert_eq!(int.s1.data(), &[1.0]);
        assert_eq!(int.u.data(), &[1.0]);
        assert_eq!(int.s2.data(), &[1.0]);
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn reparameterize_examples() {
        let zero = BlockWeights {
            dw: raw(Tensor::full(&[1, 1, 5, 5], 0.5)),
            pw: raw(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
            alpha: 0.0f32,
        };
        let r = reparameterize(&zero).unwrap();
        assert_eq!(r.pw.weight.data(), &[0.0]);
        assert_eq!(r.alpha, 1.0);

        let two = BlockWeights { alpha: 2.0, ..zero };
        assert_eq!(reparameterize(&two).unwrap().pw.weight.data(), &[2.0]);
    }

    #[test]
    fn batch_members_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = BlockWeights::<f32>::init(2, 1.0, 0.9, &mut rng);
        let a = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f32 * 0.3).cos() * 2.0);
        let b = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f32 * 0.7).sin() * 2.0);
        let p = NeuronParams::default();
        let (ya, _) = block_forward(&a, &w, &p).unwrap();
        let (yb, _) = block_forward(&b, &w, &p).unwrap();
        let ab = crate::tensor::concat_batch(&[b.clone(), a.clone()]).unwrap();
        let (yab, _) = block_forward(&ab, &w, &p).unwrap();
        assert_eq!(yab, crate::tensor::concat_batch(&[yb, ya]).unwrap());
    }
}
