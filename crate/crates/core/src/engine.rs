//! Explicit gradients: the store-everything STBP sweep, the reversible sweep
//! that keeps only the final turn-on bundle and walks membranes backwards in
//! time, and masked STBP variants that drop selected temporal paths.
//!
//! All three share [`backward_timestep`]; they differ only in where the
//! activations of timestep `t` come from (stored or recomputed) and in which
//! temporal terms are kept.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::block::block_backward;
use crate::error::{Error, Result};
use crate::network::{
    align_to, align_to_backward, encode, encode_group, encode_group_backward, forward_timestep,
    run_stage, stage_input, zero_inner_state, EffectiveModel, InnerState, ModelWeights,
    NetworkConfig, TimestepTrace, TurnOnStateBundle,
};
use crate::neuron::{surrogate_grad, turn_on_invert};
use crate::real::Real;
use crate::tensor::{
    global_avg_pool, global_avg_pool_backward, linear_backward_input, linear_backward_weight,
    pwconv2d_backward_input, pwconv2d_backward_weight, Tensor,
};

pub const DEFAULT_RECON_BOUND: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntryKind {
    Spike,
    Membrane,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub id: u64,
    pub layer: String,
    pub timestep: usize,
    pub kind: EntryKind,
    pub bytes: usize,
}

/// Book-keeping of activations retained for the backward pass.
///
/// Only sizes are tracked; the tensors themselves stay with their owner.
#[derive(Clone, Debug, Default)]
pub struct ActivationLedger {
    live: Vec<LedgerEntry>,
    next_id: u64,
    current_bytes: usize,
    peak_bytes: usize,
    recorded: usize,
    max_live_timesteps: usize,
    limit: Option<usize>,
    pub spike_flip_count: usize,
    pub max_recon_error: f64,
}

impl ActivationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails any `record` that would retain more than `limit` bytes.
    pub fn with_limit(limit: usize) -> Self {
        Self {
            limit: Some(limit),
            ..Self::default()
        }
    }

    /// Clears all counters between passes, keeping the limit.
    pub fn reset(&mut self) {
        *self = Self {
            limit: self.limit,
            ..Self::default()
        };
    }

    pub fn record(
        &mut self,
        layer: impl Into<String>,
        timestep: usize,
        kind: EntryKind,
        bytes: usize,
    ) -> Result<u64> {
        let bytes_after = self.current_bytes + bytes;
        if let Some(limit) = self.limit {
            if bytes_after > limit {
                return Err(Error::LedgerOverflow {
                    bytes: bytes_after,
                    limit,
                });
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.live.push(LedgerEntry {
            id,
            layer: layer.into(),
            timestep,
            kind,
            bytes,
        });
        self.current_bytes = bytes_after;
        self.peak_bytes = self.peak_bytes.max(bytes_after);
        self.recorded += 1;
        self.max_live_timesteps = self.max_live_timesteps.max(self.live_timesteps());
        Ok(id)
    }

    /// Releases every live entry matching `pred`.
    pub fn release_where(&mut self, pred: impl Fn(&LedgerEntry) -> bool) {
        let mut freed = 0;
        self.live.retain(|e| {
            let drop = pred(e);
            if drop {
                freed += e.bytes;
            }
            !drop
        });
        self.current_bytes -= freed;
    }

    pub fn release_timestep(&mut self, timestep: usize) {
        self.release_where(|e| e.timestep == timestep);
    }

    pub fn current_bytes(&self) -> usize {
        self.current_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Number of `record` calls since the last reset.
    pub fn recorded_entries(&self) -> usize {
        self.recorded
    }

    pub fn live_entries(&self) -> &[LedgerEntry] {
        &self.live
    }

    /// Distinct timesteps that currently hold spikes or internal activations.
    /// Turn-on membranes are the carried state and are not counted.
    pub fn live_timesteps(&self) -> usize {
        self.live
            .iter()
            .filter(|e| e.kind != EntryKind::Membrane)
            .map(|e| e.timestep)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Largest value of [`ActivationLedger::live_timesteps`] seen so far.
    pub fn max_live_timesteps(&self) -> usize {
        self.max_live_timesteps
    }

    pub fn limit(&self) -> Option<usize> {
        self.limit
    }
}

fn record_bundle<R: Real>(
    ledger: &mut ActivationLedger,
    bundle: &TurnOnStateBundle<R>,
    t: usize,
) -> Result<()> {
    for (s, v) in bundle.v.iter().enumerate() {
        ledger.record(format!("turn_on{s}.v"), t, EntryKind::Membrane, v.nbytes())?;
    }
    Ok(())
}

fn record_trace<R: Real>(
    ledger: &mut ActivationLedger,
    trace: &TimestepTrace<R>,
    with_states: bool,
) -> Result<()> {
    use EntryKind::*;
    let t = trace.t;
    ledger.record("encoder.out", t, Internal, trace.group_input.nbytes())?;
    for (s, st) in trace.stages.iter().enumerate() {
        if let Some(x) = &st.input_spikes {
            ledger.record(format!("stage{s}.in_spikes"), t, Spike, x.nbytes())?;
            ledger.record(format!("stage{s}.m_in"), t, Internal, st.m_in.nbytes())?;
        }
        for (b, blk) in st.blocks.iter().enumerate() {
            let base = format!("stage{s}.block{b}");
            let kinds = [Internal, Spike, Internal, Spike, Internal];
            for ((name, x), kind) in ["m_in", "s1", "u", "s2", "y"]
                .iter()
                .zip(blk.tensors())
                .zip(kinds)
            {
                if b == 0 && *name == "m_in" {
                    continue;
                }
                ledger.record(format!("{base}.{name}"), t, kind, x.nbytes())?;
            }
        }
        ledger.record(format!("stage{s}.m_out"), t, Internal, st.m_out.nbytes())?;
        ledger.record(
            format!("stage{s}.boundary_spikes"),
            t,
            Spike,
            st.boundary_spikes.nbytes(),
        )?;
        ledger.record(format!("stage{s}.pre"), t, Internal, st.pre.nbytes())?;
    }
    if with_states {
        record_bundle(ledger, &trace.states, t)?;
    }
    Ok(())
}

/// Mean softmax cross-entropy; `smoothing` mixes the one-hot target with
/// the uniform distribution. Returns `(loss, dloss/dlogits)`.
pub fn loss_cross_entropy<R: Real>(
    logits: &Tensor<R>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(R, Tensor<R>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{} labels for {n} logits rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let off = R::lit(smoothing / k as f64);
    let on = R::lit(1.0 - smoothing) + off;
    let inv_n = R::one() / R::lit(n as f64);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = R::zero();
    for (i, (row, g)) in logits
        .data()
        .chunks(k)
        .zip(grad.data_mut().chunks_mut(k))
        .enumerate()
    {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let sum: R = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        for (j, (&z, gj)) in row.iter().zip(g.iter_mut()).enumerate() {
            let q = if j == labels[i] { on } else { off };
            total -= q * (z - lse);
            *gj = ((z - lse).exp() - q) * inv_n;
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}

/// Which temporal gradient paths a backward sweep keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    /// `dV^s[t] -> dV^i[t-1]` through the turn-on neurons at stage boundaries.
    pub boundary: bool,
    /// `du[t] -> du[t-1]` through leaky inner block neurons.
    pub inner: bool,
}

impl TemporalMask {
    pub const FULL: Self = Self {
        boundary: true,
        inner: true,
    };
    /// Keep only the stage-boundary temporal gradients.
    pub const CASE1: Self = Self {
        boundary: true,
        inner: false,
    };
    /// Drop only the stage-boundary temporal gradients.
    pub const CASE2: Self = Self {
        boundary: false,
        inner: true,
    };
    pub const SPATIAL: Self = Self {
        boundary: false,
        inner: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Stbp,
    Reversible,
    Case1,
    Case2,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Stbp => "stbp",
            Mode::Reversible => "reversible",
            Mode::Case1 => "case1",
            Mode::Case2 => "case2",
        }
    }

    /// Mode constraints that can be checked from the configuration alone.
    pub fn validate(self, config: &NetworkConfig) -> Result<()> {
        config.validate()?;
        if self == Mode::Reversible && config.leaky_blocks() {
            return Err(Error::Config(
                "reversible mode needs temporal links at stage boundaries only".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardOptions {
    pub label_smoothing: f64,
    /// Multiplies every surrogate derivative; anything but 1 corrupts gradients.
    pub surrogate_scale: f64,
    /// Largest admissible reconstruction error of the reversible sweep.
    pub recon_bound: f64,
    /// Keep the true forward membranes outside the ledger so the reversible
    /// sweep can report exact reconstruction errors and spike flips.
    pub audit: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            label_smoothing: 0.0,
            surrogate_scale: 1.0,
            recon_bound: DEFAULT_RECON_BOUND,
            audit: false,
        }
    }
}

/// One gradient per trainable parameter, laid out like [`ModelWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<R: Real = f32> {
    pub grads: ModelWeights<R>,
}

impl<R: Real> GradientSet<R> {
    pub fn named(&self) -> Vec<(String, Vec<R>)> {
        let mut out = Vec::new();
        self.grads
            .visit(|n, _, d| out.push((n.to_string(), d.to_vec())));
        out
    }

    pub fn get(&self, name: &str) -> Option<Vec<R>> {
        let mut found = None;
        self.grads.visit(|n, _, d| {
            if n == name {
                found = Some(d.to_vec());
            }
        });
        found
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.grads.visit(|n, _, d| {
            if bad.is_none() && d.iter().any(|x| !x.is_finite()) {
                bad = Some(n.to_string());
            }
        });
        match bad {
            Some(n) => Err(Error::NonFinite(format!("gradient {n}"))),
            None => Ok(()),
        }
    }

    /// Largest per-parameter `max|a - b| / max|b|` (absolute when `b` is zero).
    pub fn max_rel_error(&self, reference: &Self) -> f64 {
        let mine = self.named();
        let theirs = reference.named();
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in mine.iter().zip(&theirs) {
            let scale = b.iter().fold(0.0f64, |m, x| m.max(Real::to_f64(*x).abs()));
            let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| {
                m.max((Real::to_f64(*x) - Real::to_f64(*y)).abs())
            });
            let rel = if scale > 0.0 { diff / scale } else { diff };
            worst = worst.max(rel);
        }
        worst
    }
}

#[derive(Clone, Debug)]
pub struct BackwardResult<R: Real = f32> {
    pub loss: R,
    pub logits: Tensor<R>,
    pub grads: GradientSet<R>,
}

/// Gradients flowing into timestep `t` from later timesteps.
struct Carry<R: Real> {
    dv: Vec<Tensor<R>>,
    du: Option<InnerState<R>>,
}

/// Backward through one timestep, deepest stage first.
///
/// `carry.dv[s]` holds `dL/dV^s[t]` from the head and from timestep `t+1`;
/// the returned carry holds the same quantities for `t-1`.
#[allow(clippy::too_many_arguments)]
fn backward_timestep<R: Real>(
    trace: &TimestepTrace<R>,
    input: &Tensor<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
    mask: TemporalMask,
    sg_scale: R,
    carry: Carry<R>,
    dacc: &mut EffectiveModel<R>,
) -> Result<Carry<R>> {
    let t = trace.t;
    let params = &config.neuron;
    let leaky = config.leaky_blocks();
    let sub_index = config.subnet_index(t);
    let batch = input.shape()[0];
    let Carry { mut dv, du } = carry;
    let mut dv_prev: Vec<Tensor<R>> = dv.iter().map(|d| Tensor::zeros(d.shape())).collect();
    let mut du_prev = if leaky {
        Some(zero_inner_state(config, batch)?)
    } else {
        None
    };
    let inner_decay = R::lit(1.0 - 1.0 / params.tau);
    let drive = R::lit(params.drive_scale());
    for s in (0..config.num_stages()).rev() {
        let st = &trace.stages[s];
        let eff_stage = &eff.subnet(config, t)[s];
        let dvs = std::mem::replace(&mut dv[s], Tensor::zeros(&[1]));
        if mask.boundary && t > 0 {
            for i in config.fused_levels(s) {
                let decay = R::lit(params.stage_decay(i));
                if i == s {
                    dv_prev[i].axpy(decay, &dvs)?;
                } else {
                    dv_prev[i].axpy(decay, &align_to_backward(&dvs, config, i)?)?;
                }
            }
        }
        let (_, _, h, w) = st.m_out.dims4()?;
        let dpre = dvs.scale(drive);
        let dw_on = pwconv2d_backward_weight(&st.boundary_spikes, &dpre, 1)?;
        dacc.turn_on[s].add_assign(&dw_on)?;
        let dspk = pwconv2d_backward_input(&dpre, &eff.turn_on[s], (h, w), 1)?;
        let mut dm = dspk
            .mul(&surrogate_grad(&st.m_out, params))?
            .scale(sg_scale);
        for (b, internals) in st.blocks.iter().enumerate().rev() {
            let du_future = match (&du, mask.inner) {
                (Some(d), true) => Some(&d[s][b]),
                _ => None,
            };
            let out = block_backward(
                &dm,
                internals,
                &eff_stage.blocks[b],
                params,
                leaky,
                du_future,
                sg_scale,
            )?;
            let acc = &mut dacc.subnets[sub_index][s].blocks[b];
            acc.dw.add_assign(&out.grads.dw)?;
            acc.pw.add_assign(&out.grads.pw)?;
            acc.alpha += out.grads.alpha;
            if let Some(dp) = du_prev.as_mut() {
                if mask.inner && t > 0 {
                    dp[s][b] = out.du.scale(inner_decay);
                }
            }
            dm = out.dm_in;
        }
        if s > 0 {
            let spikes = st
                .input_spikes
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("stage {s} trace lacks its input spikes")))?;
            let w_down = eff_stage
                .downsample
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("stage {s} lacks a downsample weight")))?;
            let dwd = pwconv2d_backward_weight(spikes, &dm, crate::network::DOWNSAMPLE_STRIDE)?;
            dacc.subnets[sub_index][s]
                .downsample
                .as_mut()
                .expect("same structure")
                .add_assign(&dwd)?;
            let (hb, wb) = config.spatial(s - 1)?;
            let dx =
                pwconv2d_backward_input(&dm, w_down, (hb, wb), crate::network::DOWNSAMPLE_STRIDE)?;
            let below = &trace.states.v[s - 1];
            dv[s - 1].axpy(sg_scale, &dx.mul(&surrogate_grad(below, params))?)?;
        } else {
            encode_group_backward(input, &eff.encoder, config, t, &dm, &mut dacc.encoder)?;
        }
    }
    Ok(Carry {
        dv: dv_prev,
        du: du_prev,
    })
}

/// Head gradient and the initial carry at the last timestep.
fn backward_head<R: Real>(
    v_last: &Tensor<R>,
    dlogits: &Tensor<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
    dacc: &mut EffectiveModel<R>,
) -> Result<Carry<R>> {
    let batch = v_last.shape()[0];
    let (_, _, h, w) = v_last.dims4()?;
    let pooled = global_avg_pool(v_last)?;
    dacc.head = linear_backward_weight(&pooled, dlogits)?;
    let dpooled = linear_backward_input(dlogits, &eff.head)?;
    let mut dv: Vec<Tensor<R>> = (0..config.num_stages())
        .map(|s| Ok(Tensor::zeros(&config.stage_shape(s, batch)?)))
        .collect::<Result<_>>()?;
    *dv.last_mut().expect("non-empty") = global_avg_pool_backward(&dpooled, h, w)?;
    let du = config
        .leaky_blocks()
        .then(|| zero_inner_state(config, batch))
        .transpose()?;
    Ok(Carry { dv, du })
}

fn finish<R: Real>(
    weights: &ModelWeights<R>,
    dacc: &EffectiveModel<R>,
    loss: R,
    logits: Tensor<R>,
) -> Result<BackwardResult<R>> {
    let grads = GradientSet {
        grads: weights.pullback(dacc)?,
    };
    grads.check_finite()?;
    Ok(BackwardResult {
        loss,
        logits,
        grads,
    })
}

/// Store-everything backward pass with every temporal path.
pub fn backward_stbp<R: Real>(
    input: &Tensor<R>,
    labels: &[usize],
    weights: &ModelWeights<R>,
    config: &NetworkConfig,
    ledger: &mut ActivationLedger,
    opts: &BackwardOptions,
) -> Result<BackwardResult<R>> {
    stbp_sweep(
        input,
        labels,
        weights,
        config,
        ledger,
        opts,
        TemporalMask::FULL,
    )
}

/// STBP with the temporal paths selected by `mask` zeroed.
pub fn backward_masked<R: Real>(
    input: &Tensor<R>,
    labels: &[usize],
    weights: &ModelWeights<R>,
    config: &NetworkConfig,
    ledger: &mut ActivationLedger,
    opts: &BackwardOptions,
    mask: TemporalMask,
) -> Result<BackwardResult<R>> {
    stbp_sweep(input, labels, weights, config, ledger, opts, mask)
}

fn stbp_sweep<R: Real>(
    input: &Tensor<R>,
    labels: &[usize],
    weights: &ModelWeights<R>,
    config: &NetworkConfig,
    ledger: &mut ActivationLedger,
    opts: &BackwardOptions,
    mask: TemporalMask,
) -> Result<BackwardResult<R>> {
    config.validate()?;
    ledger.reset();
    let eff = weights.effective()?;
    let batch = input.dims4()?.0;
    let groups = encode(input, &eff, config)?;
    let mut prev = TurnOnStateBundle::zeros(config, batch)?;
    let mut inner = config
        .leaky_blocks()
        .then(|| zero_inner_state(config, batch))
        .transpose()?;
    let mut traces = Vec::with_capacity(config.timesteps);
    let mut logits = None;
    for (t, g) in groups.iter().enumerate() {
        let (out, trace) = forward_timestep(t, g, &prev, inner.as_ref(), &eff, config)?;
        record_trace(ledger, &trace, true)?;
        prev = trace.states.clone();
        if inner.is_some() {
            inner = Some(trace.inner_state());
        }
        logits = out;
        traces.push(trace);
    }
    drop(groups);
    let logits = logits.expect("T >= 1");
    let (loss, dlogits) = loss_cross_entropy(&logits, labels, opts.label_smoothing)?;
    let mut dacc = eff.zeros_like();
    let v_last = traces
        .last()
        .expect("T >= 1")
        .states
        .v
        .last()
        .expect("non-empty");
    let mut carry = backward_head(v_last, &dlogits, &eff, config, &mut dacc)?;
    let sg = R::lit(opts.surrogate_scale);
    for trace in traces.iter().rev() {
        carry = backward_timestep(trace, input, &eff, config, mask, sg, carry, &mut dacc)?;
        ledger.release_timestep(trace.t);
    }
    finish(weights, &dacc, loss, logits)
}

/// Recomputes timestep `t`'s stage activations from group input `t` and the
/// known bundle `V[t]`.
fn recompute_timestep<R: Real>(
    t: usize,
    input: &Tensor<R>,
    bundle: &TurnOnStateBundle<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
) -> Result<TimestepTrace<R>> {
    let group_input = encode_group(input, &eff.encoder, config, t)?;
    let sub = eff.subnet(config, t);
    let mut stages = Vec::with_capacity(config.num_stages());
    for (s, stage) in sub.iter().enumerate() {
        let below = if s > 0 { Some(&bundle.v[s - 1]) } else { None };
        let (spk, m_in) = stage_input(s, &group_input, below, stage, &config.neuron)?;
        stages.push(run_stage(
            s,
            spk,
            m_in,
            stage,
            &eff.turn_on[s],
            config,
            None,
        )?);
    }
    Ok(TimestepTrace {
        t,
        group_input,
        stages,
        states: bundle.clone(),
    })
}

/// Inverts every turn-on update of timestep `t`, deepest stage first.
pub fn reconstruct_previous<R: Real>(
    bundle: &TurnOnStateBundle<R>,
    pre: &[&Tensor<R>],
    config: &NetworkConfig,
) -> Result<TurnOnStateBundle<R>> {
    let n = config.num_stages();
    let mut rec: Vec<Option<Tensor<R>>> = vec![None; n];
    for s in (0..n).rev() {
        let deeper: Vec<Tensor<R>> = config
            .fused_levels(s)
            .skip(1)
            .map(|i| {
                align_to(
                    rec[i].as_ref().expect("deeper stage reconstructed first"),
                    config,
                    s,
                )
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<R>> = deeper.iter().collect();
        rec[s] = Some(turn_on_invert(
            &bundle.v[s],
            &refs,
            pre[s],
            &config.neuron,
            s,
        )?);
    }
    Ok(TurnOnStateBundle {
        v: rec.into_iter().map(|v| v.expect("filled")).collect(),
    })
}

/// Walks the turn-on membranes back from `V[T-1]`: entry `t` of the
/// result is the reconstructed `V[t]`, with `V[-1]` (ideally zero) last.
pub fn reconstruct_trajectory<R: Real>(
    input: &Tensor<R>,
    eff: &EffectiveModel<R>,
    config: &NetworkConfig,
    last: &TurnOnStateBundle<R>,
) -> Result<Vec<TurnOnStateBundle<R>>> {
    Mode::Reversible.validate(config)?;
    let mut out = vec![last.clone()];
    for t in (0..config.timesteps).rev() {
        let trace = recompute_timestep(t, input, out.last().expect("non-empty"), eff, config)?;
        let pre: Vec<&Tensor<R>> = trace.stages.iter().map(|s| &s.pre).collect();
        let previous = reconstruct_previous(&trace.states, &pre, config)?;
        out.push(previous);
    }
    out.reverse();
    let initial = out.remove(0);
    out.push(initial);
    Ok(out)
}

/// Membrane entries within `margin` of the threshold.
fn near_threshold<R: Real>(bundle: &TurnOnStateBundle<R>, v_th: f64, margin: f64) -> usize {
    bundle
        .v
        .iter()
        .flat_map(|v| v.data().iter())
        .filter(|&&x| (Real::to_f64(x) - v_th).abs() < margin)
        .count()
}

fn spike_flips<R: Real>(a: &TurnOnStateBundle<R>, b: &TurnOnStateBundle<R>, v_th: f64) -> usize {
    let th = R::lit(v_th);
    a.v.iter()
        .zip(&b.v)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .filter(|(&x, &y)| (x >= th) != (y >= th))
        .count()
}

/// Reversible backward pass.
///
/// The forward pass discards every timestep's activations and keeps only
/// `V[T-1]`. The backward sweep then, for `t = T-1 .. 0`, recomputes
/// timestep `t` from its encoder group and `V[t]`, inverts the turn-on
/// updates to obtain `V[t-1]`, backpropagates through timestep `t`, and drops
/// it. At `t = 0` the reconstructed `V[-1]` must be zero; a larger deviation
/// than `opts.recon_bound` aborts.
///
/// Without `opts.audit`, `ledger.spike_flip_count` counts reconstructed
/// membranes that lie within `recon_bound` of the threshold, i.e. spikes the
/// admissible error could flip.
pub fn backward_reversible<R: Real>(
    input: &Tensor<R>,
    labels: &[usize],
    weights: &ModelWeights<R>,
    config: &NetworkConfig,
    ledger: &mut ActivationLedger,
    opts: &BackwardOptions,
) -> Result<BackwardResult<R>> {
    Mode::Reversible.validate(config)?;
    ledger.reset();
    let eff = weights.effective()?;
    let batch = input.dims4()?.0;
    let v_th = config.neuron.v_th;

    let mut audit_states = Vec::new();
    let mut bundle = TurnOnStateBundle::zeros(config, batch)?;
    let mut logits = None;
    for t in 0..config.timesteps {
        let g = encode_group(input, &eff.encoder, config, t)?;
        let (out, trace) = forward_timestep(t, &g, &bundle, None, &eff, config)?;
        record_trace(ledger, &trace, true)?;
        ledger.release_where(|e| {
            e.timestep == t && e.kind != EntryKind::Membrane || e.timestep + 1 == t
        });
        if opts.audit {
            audit_states.push(bundle.clone());
        }
        bundle = trace.states;
        logits = out;
    }
    let logits = logits.expect("T >= 1");
    let (loss, dlogits) = loss_cross_entropy(&logits, labels, opts.label_smoothing)?;
    let mut dacc = eff.zeros_like();
    let mut carry = backward_head(
        bundle.v.last().expect("non-empty"),
        &dlogits,
        &eff,
        config,
        &mut dacc,
    )?;
    let sg = R::lit(opts.surrogate_scale);

    for t in (0..config.timesteps).rev() {
        let trace = recompute_timestep(t, input, &bundle, &eff, config)?;
        record_trace(ledger, &trace, false)?;
        if ledger.live_timesteps() > 1 {
            return Err(Error::Invalid(format!(
                "reversible schedule holds {} timesteps of activations",
                ledger.live_timesteps()
            )));
        }
        let pre: Vec<&Tensor<R>> = trace.stages.iter().map(|s| &s.pre).collect();
        let previous = reconstruct_previous(&bundle, &pre, config)?;
        if opts.audit {
            let truth = &audit_states[t];
            let err = Real::to_f64(previous.max_abs_diff(truth)?);
            ledger.max_recon_error = ledger.max_recon_error.max(err);
            ledger.spike_flip_count += spike_flips(&previous, truth, v_th);
        } else if t > 0 {
            ledger.spike_flip_count += near_threshold(&previous, v_th, opts.recon_bound);
        }
        if t == 0 {
            let err = previous
                .v
                .iter()
                .map(|v| Real::to_f64(v.max_abs()))
                .fold(0.0, f64::max);
            ledger.max_recon_error = ledger.max_recon_error.max(err);
            if err > opts.recon_bound {
                return Err(Error::Reconstruction {
                    error: err,
                    bound: opts.recon_bound,
                });
            }
        } else {
            record_bundle(ledger, &previous, t - 1)?;
        }
        carry = backward_timestep(
            &trace,
            input,
            &eff,
            config,
            TemporalMask::FULL,
            sg,
            carry,
            &mut dacc,
        )?;
        drop(trace);
        ledger.release_timestep(t);
        bundle = previous;
    }
    finish(weights, &dacc, loss, logits)
}

/// Dispatches on `mode`.
pub fn backward<R: Real>(
    mode: Mode,
    input: &Tensor<R>,
    labels: &[usize],
    weights: &ModelWeights<R>,
    config: &NetworkConfig,
    ledger: &mut ActivationLedger,
    opts: &BackwardOptions,
) -> Result<BackwardResult<R>> {
    match mode {
        Mode::Stbp => backward_stbp(input, labels, weights, config, ledger, opts),
        Mode::Reversible => backward_reversible(input, labels, weights, config, ledger, opts),
        Mode::Case1 => backward_masked(
            input,
            labels,
            weights,
            config,
            ledger,
            opts,
            TemporalMask::CASE1,
        ),
        Mode::Case2 => backward_masked(
            input,
            labels,
            weights,
            config,
            ledger,
            opts,
            TemporalMask::CASE2,
        ),
    }
}

/// `m <- momentum * m + g; w <- w - lr * m` for every parameter.
pub fn optimizer_step<R: Real>(
    weights: &mut ModelWeights<R>,
    grads: &GradientSet<R>,
    velocity: &mut ModelWeights<R>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut g_all = Vec::new();
    grads
        .grads
        .visit(|n, _, d| g_all.push((n.to_string(), d.to_vec())));
    let mu = R::lit(momentum);
    let mut v_all = Vec::with_capacity(g_all.len());
    let mut i = 0;
    let mut mismatch = None;
    velocity.visit_mut(|n, _, v| {
        match g_all.get(i) {
            Some((gn, g)) if gn == n && g.len() == v.len() => {
                for (vi, &gi) in v.iter_mut().zip(g) {
                    *vi = mu * *vi + gi;
                }
                v_all.push(v.to_vec());
            }
            _ => mismatch = Some(n.to_string()),
        }
        i += 1;
    });
    if let Some(n) = mismatch.or_else(|| (i != g_all.len()).then(|| "parameter count".to_string()))
    {
        return Err(Error::Invalid(format!(
            "gradient set does not match weights at {n}"
        )));
    }
    let step = R::lit(lr);
    let mut j = 0;
    weights.visit_mut(|_, _, w| {
        if let Some(v) = v_all.get(j) {
            for (wi, &vi) in w.iter_mut().zip(v) {
                *wi -= step * vi;
            }
        }
        j += 1;
    });
    if j != v_all.len() {
        return Err(Error::Invalid("velocity does not match weights".into()));
    }
    Ok(())
}

/// SGD with momentum holding its own velocity buffers.
#[derive(Clone, Debug)]
pub struct Sgd<R: Real = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ModelWeights<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, weights: &mut ModelWeights<R>, grads: &GradientSet<R>) -> Result<()> {
        let v = self.velocity.get_or_insert_with(|| weights.zeros_like());
        optimizer_step(weights, grads, v, self.lr, self.momentum)
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<R: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    moments: Option<(ModelWeights<R>, ModelWeights<R>)>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            moments: None,
        }
    }

    pub fn step(&mut self, weights: &mut ModelWeights<R>, grads: &GradientSet<R>) -> Result<()> {
        let mut g_all = Vec::new();
        grads
            .grads
            .visit(|n, _, d| g_all.push((n.to_string(), d.to_vec())));
        if g_all.len() != weights.param_names().len() {
            return Err(Error::Invalid("gradient set does not match weights".into()));
        }
        let (m, v) = self
            .moments
            .get_or_insert_with(|| (weights.zeros_like(), weights.zeros_like()));
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let mut i = 0;
        let mut mismatch = None;
        m.visit_mut(|n, _, md| {
            match g_all.get(i) {
                Some((gn, g)) if gn == n && g.len() == md.len() => {
                    for (mi, &gi) in md.iter_mut().zip(g) {
                        *mi = R::lit(b1 * Real::to_f64(*mi) + (1.0 - b1) * Real::to_f64(gi));
                    }
                }
                _ => mismatch = Some(n.to_string()),
            }
            i += 1;
        });
        if let Some(n) = mismatch {
            return Err(Error::Invalid(format!(
                "gradient set does not match weights at {n}"
            )));
        }
        let mut i = 0;
        v.visit_mut(|_, _, vd| {
            for (vi, &gi) in vd.iter_mut().zip(&g_all[i].1) {
                let g = Real::to_f64(gi);
                *vi = R::lit(b2 * Real::to_f64(*vi) + (1.0 - b2) * g * g);
            }
            i += 1;
        });
        let mut m_all = Vec::new();
        m.visit(|_, _, d| m_all.push(d.to_vec()));
        let mut v_all = Vec::new();
        v.visit(|_, _, d| v_all.push(d.to_vec()));
        let mut i = 0;
        weights.visit_mut(|_, _, w| {
            for ((wi, &mi), &vi) in w.iter_mut().zip(&m_all[i]).zip(&v_all[i]) {
                let update =
                    self.lr * (Real::to_f64(mi) / c1) / ((Real::to_f64(vi) / c2).sqrt() + self.eps);
                *wi = R::lit(Real::to_f64(*wi) - update);
            }
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::StageConfig;

    fn toy(t: usize) -> NetworkConfig {
        NetworkConfig {
            timesteps: t,
            in_channels: 1,
            in_height: 6,
            in_width: 6,
            stages: vec![
                StageConfig {
                    blocks: 1,
                    channels: 4,
                },
                StageConfig {
                    blocks: 1,
                    channels: 8,
                },
            ],
            num_classes: 3,
            init_alpha: 0.6,
            gain_init: 5.0,
            seed: 4,
            ..NetworkConfig::default()
        }
    }

    fn data(n: usize, cfg: &NetworkConfig) -> (Tensor<f32>, Vec<usize>) {
        let x = Tensor::from_fn(&[n, cfg.in_channels, cfg.in_height, cfg.in_width], |i| {
            ((i as f32 * 0.77).sin() + 1.0) * 1.7
        });
        (x, (0..n).map(|i| i % cfg.num_classes).collect())
    }

    #[test]
    fn loss_examples() {
        let z = Tensor::new(vec![2, 2], vec![0.0f64; 4]).unwrap();
        let (l, g) = loss_cross_entropy(&z, &[0, 0], 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.data(), &[-0.25, 0.25, -0.25, 0.25]);
        let u = Tensor::new(vec![1, 5], vec![0.3f64; 5]).unwrap();
        assert!((loss_cross_entropy(&u, &[2], 0.0).unwrap().0 - 5f64.ln()).abs() < 1e-12);
        let peaked = Tensor::new(vec![1, 3], vec![40.0f64, 0.0, 0.0]).unwrap();
        assert!(loss_cross_entropy(&peaked, &[0], 0.0).unwrap().0 < 1e-12);
        assert!(loss_cross_entropy(&peaked, &[3], 0.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let z = Tensor::new(vec![2, 3], vec![0.2f64, -1.0, 0.7, 1.5, 0.1, -0.4]).unwrap();
        for smoothing in [0.0, 0.1] {
            let (_, g) = loss_cross_entropy(&z, &[2, 0], smoothing).unwrap();
            for i in 0..6 {
                let mut a = z.clone();
                a.data_mut()[i] += 1e-6;
                let mut b = z.clone();
                b.data_mut()[i] -= 1e-6;
                let fd = (loss_cross_entropy(&a, &[2, 0], smoothing).unwrap().0
                    - loss_cross_entropy(&b, &[2, 0], smoothing).unwrap().0)
                    / 2e-6;
                assert!((fd - g.data()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ledger_tracks_peak_and_limit() {
        let mut l = ActivationLedger::with_limit(100);
        l.record("a", 0, EntryKind::Spike, 40).unwrap();
        l.record("b", 1, EntryKind::Internal, 40).unwrap();
        assert_eq!(l.live_timesteps(), 2);
        l.release_timestep(0);
        assert_eq!(l.current_bytes(), 40);
        l.record("c", 1, EntryKind::Membrane, 50).unwrap();
        assert_eq!(l.peak_bytes(), 90);
        assert!(matches!(
            l.record("d", 2, EntryKind::Spike, 20),
            Err(Error::LedgerOverflow { .. })
        ));
        l.reset();
        assert_eq!(
            (l.peak_bytes(), l.current_bytes(), l.limit()),
            (0, 0, Some(100))
        );
    }

    #[test]
    fn zero_alpha_branch_weights_get_zero_gradient() {
        let cfg = NetworkConfig {
            init_alpha: 0.0,
            ..toy(2)
        };
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let (x, y) = data(2, &cfg);
        let r = backward_stbp(
            &x,
            &y,
            &w,
            &cfg,
            &mut ActivationLedger::new(),
            &BackwardOptions::default(),
        )
        .unwrap();
        for (name, g) in r.grads.named() {
            if name.contains(".dw.") || name.contains(".pw.") {
                assert!(g.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(r
            .grads
            .get("head.weight")
            .unwrap()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let cfg = toy(2);
        let mut w = ModelWeights::<f64>::init(&cfg).unwrap();
        let before = w.clone();
        let mut g = w.zeros_like();
        g.visit_mut(|_, _, d| {
            d.iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = if i % 2 == 0 { 3.0 } else { -0.01 })
        });
        let grads = GradientSet { grads: g };
        Adam::new(0.1, 0.9, 0.999).step(&mut w, &grads).unwrap();
        let mut deltas = Vec::new();
        w.visit(|_, _, d| deltas.extend_from_slice(d));
        let mut orig = Vec::new();
        before.visit(|_, _, d| orig.extend_from_slice(d));
        let mut flat = Vec::new();
        grads.grads.visit(|_, _, d| flat.extend_from_slice(d));
        for ((a, b), g) in deltas.iter().zip(&orig).zip(&flat) {
            assert!((b - a - 0.1 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn reversible_matches_stbp() {
        let cfg = toy(3);
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let (x, y) = data(3, &cfg);
        let opts = BackwardOptions::default();
        let a = backward_stbp(&x, &y, &w, &cfg, &mut ActivationLedger::new(), &opts).unwrap();
        let mut ledger = ActivationLedger::new();
        let b = backward_reversible(&x, &y, &w, &cfg, &mut ledger, &opts).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(
            b.grads.max_rel_error(&a.grads) < 1e-4,
            "{}",
            b.grads.max_rel_error(&a.grads)
        );
        assert_eq!(ledger.max_live_timesteps(), 1);
    }

    #[test]
    fn single_timestep_engines_agree_exactly() {
        let cfg = toy(1);
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let (x, y) = data(2, &cfg);
        let opts = BackwardOptions::default();
        let mut la = ActivationLedger::new();
        let mut lb = ActivationLedger::new();
        let a = backward_stbp(&x, &y, &w, &cfg, &mut la, &opts).unwrap();
        let b = backward_reversible(&x, &y, &w, &cfg, &mut lb, &opts).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(la.peak_bytes(), lb.peak_bytes());
        let spatial =
            backward_masked(&x, &y, &w, &cfg, &mut la, &opts, TemporalMask::SPATIAL).unwrap();
        assert_eq!(a.grads, spatial.grads);
    }

    #[test]
    fn masks_on_boundary_only_network() {
        let cfg = toy(3);
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let (x, y) = data(2, &cfg);
        let opts = BackwardOptions::default();
        let mut l = ActivationLedger::new();
        let full = backward_stbp(&x, &y, &w, &cfg, &mut l, &opts).unwrap();
        let c1 = backward_masked(&x, &y, &w, &cfg, &mut l, &opts, TemporalMask::CASE1).unwrap();
        let c2 = backward_masked(&x, &y, &w, &cfg, &mut l, &opts, TemporalMask::CASE2).unwrap();
        let sp = backward_masked(&x, &y, &w, &cfg, &mut l, &opts, TemporalMask::SPATIAL).unwrap();
        assert_eq!(full.grads, c1.grads);
        assert_eq!(c2.grads, sp.grads);
    }

    #[test]
    fn reversible_rejects_leaky_blocks() {
        let cfg = NetworkConfig {
            temporal_links: crate::network::TemporalLinks::All,
            ..toy(2)
        };
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let (x, y) = data(1, &cfg);
        let r = backward_reversible(
            &x,
            &y,
            &w,
            &cfg,
            &mut ActivationLedger::new(),
            &BackwardOptions::default(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn ledger_overflow_aborts() {
        let cfg = toy(2);
        let w = ModelWeights::<f32>::init(&cfg).unwrap();
        let (x, y) = data(1, &cfg);
        let mut l = ActivationLedger::with_limit(256);
        let r = backward_stbp(&x, &y, &w, &cfg, &mut l, &BackwardOptions::default());
        assert!(matches!(r, Err(Error::LedgerOverflow { .. })));
    }

    #[test]
    fn optimizer_examples() {
        let cfg = toy(1);
        let w0 = ModelWeights::<f64>::init(&cfg).unwrap();
        let mut g = w0.zeros_like();
        g.visit_mut(|_, _, d| d.iter_mut().for_each(|x| *x = 0.5));
        let grads = GradientSet { grads: g };

        let mut w = w0.clone();
        Sgd::new(0.0, 0.9).step(&mut w, &grads).unwrap();
        assert_eq!(w, w0);

        let mut w = w0.clone();
        Sgd::new(0.1, 0.0).step(&mut w, &grads).unwrap();
        assert!((w.head.data()[0] - (w0.head.data()[0] - 0.05)).abs() < 1e-15);

        let mut w = w0.clone();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut w, &grads).unwrap();
        opt.step(&mut w, &grads).unwrap();
        let expect = w0.head.data()[0] - 0.1 * 0.5 * 2.9;
        assert!((w.head.data()[0] - expect).abs() < 1e-12);
    }
}
