//! Spike functions and membrane updates.
//!
//! Three neuron behaviours are provided:
//!
//! * turn-off: `V[t] = W S[t]`, stateless across timesteps;
//! * turn-on: `V^l[t+1] = sum_{i>=l} (1 - 1/tau_i) align(V^i[t]) + W S[t+1] / tau_m`,
//!   which with a single level is the ordinary leaky integrate-and-fire update;
//! * the exact inverse of the turn-on update, used to walk membrane
//!   potentials backwards in time.
//!
//! None of the neurons reset after a spike. A hard or soft reset makes the
//! turn-on update non-invertible.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Forward spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpikeFn {
    /// `Theta(v - v_th)` with a rectangular surrogate derivative.
    #[default]
    Heaviside,
    /// `sigmoid((v - v_th) / a)` with its exact derivative. Used to check
    /// hand-written gradients against finite differences.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronParams {
    /// Membrane time constant, scales the synaptic drive by `1 / tau`.
    pub tau: f64,
    /// Decay constant of each turn-on stage; empty means `tau` everywhere.
    pub tau_per_stage: Vec<f64>,
    pub v_th: f64,
    /// Width `a` of the surrogate window (or sigmoid temperature).
    pub surrogate_width: f64,
    pub spike_fn: SpikeFn,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            tau_per_stage: Vec::new(),
            v_th: 1.0,
            surrogate_width: 1.0,
            spike_fn: SpikeFn::Heaviside,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self, stages: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.tau.is_finite() || self.tau <= 1.0 {
            return bad(format!("tau must be > 1, got {}", self.tau));
        }
        if !self.tau_per_stage.is_empty() && self.tau_per_stage.len() != stages {
            return bad(format!(
                "tau_per_stage has {} entries for {stages} stages",
                self.tau_per_stage.len()
            ));
        }
        if let Some(t) = self
            .tau_per_stage
            .iter()
            .find(|&&t| !t.is_finite() || t <= 1.0)
        {
            return bad(format!("turn-on decay constants must be > 1, got {t}"));
        }
        if self.v_th.is_nan() || self.v_th <= 0.0 {
            return bad(format!("v_th must be > 0, got {}", self.v_th));
        }
        if self.surrogate_width.is_nan() || self.surrogate_width <= 0.0 {
            return bad(format!(
                "surrogate_width must be > 0, got {}",
                self.surrogate_width
            ));
        }
        Ok(())
    }

    /// Decay constant of turn-on stage `stage`.
    pub fn stage_tau(&self, stage: usize) -> f64 {
        self.tau_per_stage.get(stage).copied().unwrap_or(self.tau)
    }

    /// Multiplicative retention `1 - 1/tau_stage`.
    pub fn stage_decay(&self, stage: usize) -> f64 {
        1.0 - 1.0 / self.stage_tau(stage)
    }

    pub fn drive_scale(&self) -> f64 {
        1.0 / self.tau
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState<R: Real = f32> {
    pub v: Tensor<R>,
    pub s: Tensor<R>,
}

/// Elementwise `1` where `x >= 0`, else `0`. Note `Theta(0) = 1`.
pub fn heaviside<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| if v >= R::zero() { R::one() } else { R::zero() })
}

/// Spike output for membrane `v` under `params.spike_fn`.
pub fn fire<R: Real>(v: &Tensor<R>, params: &NeuronParams) -> Tensor<R> {
    let th = R::lit(params.v_th);
    match params.spike_fn {
        SpikeFn::Heaviside => v.map(|x| {
            if x - th >= R::zero() {
                R::one()
            } else {
                R::zero()
            }
        }),
        SpikeFn::Sigmoid => {
            let inv_a = R::lit(1.0 / params.surrogate_width);
            v.map(|x| sigmoid((x - th) * inv_a))
        }
    }
}

/// Stand-in for `dS/dV`: `(1/a) 1{|v - v_th| < a/2}` for Heaviside spikes,
/// the true derivative for sigmoid spikes.
pub fn surrogate_grad<R: Real>(v: &Tensor<R>, params: &NeuronParams) -> Tensor<R> {
    let th = R::lit(params.v_th);
    let a = params.surrogate_width;
    let inv_a = R::lit(1.0 / a);
    match params.spike_fn {
        SpikeFn::Heaviside => {
            let half = R::lit(a / 2.0);
            v.map(|x| {
                if (x - th).abs() < half {
                    inv_a
                } else {
                    R::zero()
                }
            })
        }
        SpikeFn::Sigmoid => v.map(|x| {
            let s = sigmoid((x - th) * inv_a);
            s * (R::one() - s) * inv_a
        }),
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

/// Turn-off neuron: the membrane is the synaptic drive itself.
pub fn turn_off_step<R: Real>(pre_activation: &Tensor<R>, params: &NeuronParams) -> NeuronState<R> {
    NeuronState {
        v: pre_activation.clone(),
        s: fire(pre_activation, params),
    }
}

/// Turn-on neuron with multi-level fusion.
///
/// `v_prev_levels[0]` is this stage's own `V^l[t]`; entry `k` is stage
/// `level_index + k` at the previous timestep, already aligned to this
/// stage's shape. `pre_activation` is `W^l S^{l-1}[t+1]`.
pub fn turn_on_step<R: Real>(
    v_prev_levels: &[&Tensor<R>],
    pre_activation: &Tensor<R>,
    params: &NeuronParams,
    level_index: usize,
) -> Result<NeuronState<R>> {
    let v = fuse_levels(v_prev_levels, pre_activation, params, level_index)?;
    let s = fire(&v, params);
    Ok(NeuronState { v, s })
}

pub(crate) fn fuse_levels<R: Real>(
    v_prev_levels: &[&Tensor<R>],
    pre_activation: &Tensor<R>,
    params: &NeuronParams,
    level_index: usize,
) -> Result<Tensor<R>> {
    check_levels(v_prev_levels.len(), params, level_index)?;
    let mut v = pre_activation.scale(R::lit(params.drive_scale()));
    for (k, level) in v_prev_levels.iter().enumerate() {
        if level.shape() != pre_activation.shape() {
            return shape_err(
                "turn_on_step",
                format!(
                    "level {k} is {:?}, drive is {:?}",
                    level.shape(),
                    pre_activation.shape()
                ),
            );
        }
        v.axpy(R::lit(params.stage_decay(level_index + k)), level)?;
    }
    Ok(v)
}

fn check_levels(count: usize, params: &NeuronParams, level_index: usize) -> Result<()> {
    if !params.tau_per_stage.is_empty() && level_index + count > params.tau_per_stage.len() {
        return Err(Error::Invalid(format!(
            "{count} levels from stage {level_index} exceed {} configured stages",
            params.tau_per_stage.len()
        )));
    }
    Ok(())
}

/// Inverse of [`turn_on_step`]: recovers `V^l[t]` from `V^l[t+1]`, the
/// already reconstructed deeper levels `V^i[t]` (`i > l`, aligned) and the
/// recomputed drive `W^l S^{l-1}[t+1]`.
pub fn turn_on_invert<R: Real>(
    v_next: &Tensor<R>,
    deeper_prev_levels: &[&Tensor<R>],
    pre_activation: &Tensor<R>,
    params: &NeuronParams,
    level_index: usize,
) -> Result<Tensor<R>> {
    check_levels(deeper_prev_levels.len() + 1, params, level_index)?;
    let mut rest = v_next.clone();
    rest.axpy(-R::lit(params.drive_scale()), pre_activation)?;
    for (k, level) in deeper_prev_levels.iter().enumerate() {
        if level.shape() != v_next.shape() {
            return shape_err(
                "turn_on_invert",
                format!(
                    "level {} is {:?}, membrane is {:?}",
                    k + 1,
                    level.shape(),
                    v_next.shape()
                ),
            );
        }
        rest.axpy(-R::lit(params.stage_decay(level_index + k + 1)), level)?;
    }
    let decay = params.stage_decay(level_index);
    if decay <= 0.0 {
        return Err(Error::Config(format!(
            "stage {level_index} decay is not invertible"
        )));
    }
    Ok(rest.scale(R::lit(1.0 / decay)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn params() -> NeuronParams {
        NeuronParams::default()
    }

    #[test]
    fn heaviside_closed_at_zero() {
        assert_eq!(heaviside(&t(&[-1.0])).data(), &[0.0]);
        assert_eq!(heaviside(&t(&[0.0])).data(), &[1.0]);
        assert_eq!(heaviside(&t(&[-0.5, 0.0, 0.5])).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn heaviside_symmetry() {
        let x = t(&[-2.0, -1e-6, 0.0, 3.0]);
        let pos = heaviside(&x);
        let neg = heaviside(&x.scale(-1.0));
        for (i, (&a, &b)) in pos.data().iter().zip(neg.data()).enumerate() {
            if x.data()[i] == 0.0 {
                assert_eq!(a + b, 2.0);
            } else {
                assert_eq!(a + b, 1.0);
            }
        }
    }

    #[test]
    fn surrogate_window_values() {
        let p = params();
        assert_eq!(surrogate_grad(&t(&[1.0]), &p).data(), &[1.0]);
        assert_eq!(surrogate_grad(&t(&[11.0]), &p).data(), &[0.0]);
        let wide = NeuronParams {
            surrogate_width: 2.0,
            ..params()
        };
        assert_eq!(surrogate_grad(&t(&[1.5]), &wide).data(), &[0.5]);
    }

    #[test]
    fn surrogate_integrates_to_one() {
        for spike_fn in [SpikeFn::Heaviside, SpikeFn::Sigmoid] {
            let p = NeuronParams {
                spike_fn,
                ..params()
            };
            let step = 1e-4;
            let grid = Tensor::<f64>::from_fn(&[200_000], |i| -9.0 + i as f64 * step);
            let area = surrogate_grad(&grid, &p).sum() * step;
            assert!((area - 1.0).abs() < 1e-3, "{spike_fn:?}: {area}");
        }
    }

    #[test]
    fn turn_off_examples() {
        let p = params();
        let s = turn_off_step(&t(&[0.0]), &p);
        assert_eq!((s.v.data(), s.s.data()), (&[0.0f32][..], &[0.0f32][..]));
        assert_eq!(turn_off_step(&t(&[1.0]), &p).s.data(), &[1.0]);
        assert_eq!(turn_off_step(&t(&[0.5, 1.5]), &p).s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn turn_off_is_stateless() {
        let p = params();
        let a = turn_off_step(&t(&[0.3, 1.2]), &p);
        let _ = turn_off_step(&t(&[5.0, -5.0]), &p);
        assert_eq!(turn_off_step(&t(&[0.3, 1.2]), &p), a);
    }

    #[test]
    fn turn_on_examples() {
        let p = params();
        let st = turn_on_step(&[&t(&[0.5])], &t(&[1.0]), &p, 0).unwrap();
        assert_eq!(st.v.data(), &[0.75]);
        assert_eq!(st.s.data(), &[0.0]);

        let zero = t(&[0.0, 0.0]);
        let st = turn_on_step(&[&zero, &zero], &t(&[0.8, 3.0]), &p, 0).unwrap();
        assert_eq!(st.v.data(), &[0.4, 1.5]);

        let st = turn_on_step(&[&t(&[0.4]), &t(&[0.2])], &t(&[0.0]), &p, 0).unwrap();
        assert!((st.v.data()[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn turn_on_rejects_excess_levels_and_shapes() {
        let p = NeuronParams {
            tau_per_stage: vec![2.0, 2.0],
            ..params()
        };
        let x = t(&[0.0]);
        assert!(turn_on_step(&[&x, &x, &x], &x, &p, 0).is_err());
        assert!(turn_on_step(&[&x, &x], &x, &p, 1).is_err());
        assert!(turn_on_step(&[&t(&[0.0, 1.0])], &x, &p, 0).is_err());
    }

    #[test]
    fn invert_examples() {
        let p = params();
        let v = turn_on_invert(&t(&[0.75]), &[], &t(&[1.0]), &p, 0).unwrap();
        assert_eq!(v.data(), &[0.5]);
        let v = turn_on_invert(&t(&[0.6]), &[&t(&[0.0])], &t(&[1.2]), &p, 0).unwrap();
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn validation_rejects_non_invertible_decay() {
        assert!(NeuronParams {
            tau: 1.0,
            ..params()
        }
        .validate(1)
        .is_err());
        assert!(NeuronParams {
            tau_per_stage: vec![2.0, 1.0],
            ..params()
        }
        .validate(2)
        .is_err());
        assert!(NeuronParams {
            v_th: 0.0,
            ..params()
        }
        .validate(1)
        .is_err());
        assert!(params().validate(3).is_ok());
    }

    /// Direct leaky integrate-and-fire update, kept independent of `turn_on_step`.
    fn lif_reference(v: f32, drive: f32, tau: f32) -> f32 {
        (1.0 - 1.0 / tau) * v + (1.0 / tau) * drive
    }

    proptest! {
        #[test]
        fn single_level_turn_on_is_lif(
            v in prop::collection::vec(-3.0f32..3.0, 1..32),
            tau in prop::sample::select(vec![2.0f64, 4.0, 8.0]),
        ) {
            let p = NeuronParams { tau, ..params() };
            let drive: Vec<f32> = v.iter().map(|x| x * 0.7 + 0.3).collect();
            let st = turn_on_step(&[&t(&v)], &t(&drive), &p, 0).unwrap();
            for ((&out, &vv), &d) in st.v.data().iter().zip(&v).zip(&drive) {
                prop_assert_eq!(out, lif_reference(vv, d, tau as f32));
            }
        }

        #[test]
        fn invert_recovers_previous_membrane(
            seed in prop::collection::vec((-2.0f32..2.0, -2.0f32..2.0, -2.0f32..2.0), 1..64),
            tau_own in 1.5f64..8.0,
            tau_deep in 1.5f64..8.0,
        ) {
            let p = NeuronParams { tau: tau_own, tau_per_stage: vec![tau_own, tau_deep], ..params() };
            let own = t(&seed.iter().map(|s| s.0).collect::<Vec<_>>());
            let deep = t(&seed.iter().map(|s| s.1).collect::<Vec<_>>());
            let drive = t(&seed.iter().map(|s| s.2).collect::<Vec<_>>());
            let next = turn_on_step(&[&own, &deep], &drive, &p, 0).unwrap();
            let back = turn_on_invert(&next.v, &[&deep], &drive, &p, 0).unwrap();
            prop_assert!(back.max_abs_diff(&own).unwrap() < 1e-5);

            let single = turn_on_step(&[&own], &drive, &p, 0).unwrap();
            let back = turn_on_invert(&single.v, &[], &drive, &p, 0).unwrap();
            prop_assert!(back.max_abs_diff(&own).unwrap() < 1e-5);
        }

        #[test]
        fn spikes_are_binary(v in prop::collection::vec(-5.0f32..5.0, 1..64)) {
            let s = fire(&t(&v), &params());
            prop_assert!(s.data().iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }
}
