//! FLOP counting, the MAC/AC inference energy estimate, firing-rate
//! statistics and gradient cosine similarity.
//!
//! The energy model is the usual theoretical estimate for SNNs:
//! `E = E_MAC * FL_enc + E_AC * T * sum_n FL_n * fr_n`. It ignores memory
//! traffic and any particular hardware.

use std::fmt::Write as _;

use crate::block::DW_KERNEL;
use crate::engine::GradientSet;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, TimestepTrace, ENCODER_KERNEL};
use crate::real::Real;

pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

/// Where a layer sits in one sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRef {
    Encoder,
    Downsample(usize),
    Depthwise(usize, usize),
    Pointwise(usize, usize),
    TurnOn(usize),
    Head,
}

impl LayerRef {
    pub fn name(self) -> String {
        match self {
            LayerRef::Encoder => "encoder".into(),
            LayerRef::Downsample(s) => format!("stage{s}.down"),
            LayerRef::Depthwise(s, b) => format!("stage{s}.block{b}.dw"),
            LayerRef::Pointwise(s, b) => format!("stage{s}.block{b}.pw"),
            LayerRef::TurnOn(s) => format!("stage{s}.turn_on"),
            LayerRef::Head => "head".into(),
        }
    }
}

/// Multiply-accumulate on real-valued inputs, or accumulate-only on spikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Mac,
    Ac,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFlops {
    pub layer: LayerRef,
    pub kind: OpKind,
    /// Per sample and per application.
    pub flops: u64,
    /// Applications per inference of a MAC layer (AC layers use `T`).
    pub applications: u64,
}

impl LayerFlops {
    pub fn mac(layer: LayerRef, flops: u64) -> Self {
        Self {
            layer,
            kind: OpKind::Mac,
            flops,
            applications: 1,
        }
    }

    pub fn ac(layer: LayerRef, flops: u64) -> Self {
        Self {
            layer,
            kind: OpKind::Ac,
            flops,
            applications: 1,
        }
    }
}

pub type FlopTable = Vec<LayerFlops>;

/// Per-sample FLOPs of one sub-network, in forward order.
///
/// The encoder reads analog input and is a MAC layer, evaluated once in
/// grouped mode and once per timestep otherwise. The head reads the
/// real-valued last membrane, so it is also MAC, evaluated once. Every other
/// layer reads spikes and is AC.
pub fn count_flops(config: &NetworkConfig) -> Result<FlopTable> {
    config.validate()?;
    let (h0, w0) = config.spatial(0)?;
    let k2 = (ENCODER_KERNEL * ENCODER_KERNEL) as u64;
    let enc = config.encoder_channels() as u64 * config.in_channels as u64 * k2 * (h0 * w0) as u64;
    let mut table = vec![LayerFlops {
        applications: if config.grouped_encoding {
            1
        } else {
            config.timesteps as u64
        },
        ..LayerFlops::mac(LayerRef::Encoder, enc)
    }];
    for s in 0..config.num_stages() {
        let c = config.channels(s) as u64;
        let (h, w) = config.spatial(s)?;
        let hw = (h * w) as u64;
        if s > 0 {
            let cin = config.channels(s - 1) as u64;
            table.push(LayerFlops::ac(LayerRef::Downsample(s), c * cin * hw));
        }
        for b in 0..config.stages[s].blocks {
            table.push(LayerFlops::ac(
                LayerRef::Depthwise(s, b),
                c * (DW_KERNEL * DW_KERNEL) as u64 * hw,
            ));
            table.push(LayerFlops::ac(LayerRef::Pointwise(s, b), c * c * hw));
        }
        table.push(LayerFlops::ac(LayerRef::TurnOn(s), c * c * hw));
    }
    let last = config.channels(config.num_stages() - 1) as u64;
    table.push(LayerFlops::mac(
        LayerRef::Head,
        config.num_classes as u64 * last,
    ));
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: OpKind,
    pub flops: u64,
    pub firing_rate: f64,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub timesteps: usize,
    pub layers: Vec<LayerEnergy>,
    pub total_pj: f64,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,flops,firing_rate,energy_pj\n");
        for l in &self.layers {
            let kind = match l.kind {
                OpKind::Mac => "mac",
                OpKind::Ac => "ac",
            };
            let _ = writeln!(
                out,
                "{},{kind},{},{:.6},{:.6}",
                l.name, l.flops, l.firing_rate, l.energy_pj
            );
        }
        let _ = writeln!(out, "total,,,,{:.6}", self.total_pj);
        out
    }
}

/// Energy in pJ per sample. `firing_rates[i]` is the input firing rate of
/// layer `i`; it is ignored (reported as 1) for MAC layers.
pub fn estimate_energy(
    table: &[LayerFlops],
    firing_rates: &[f64],
    timesteps: usize,
) -> Result<EnergyReport> {
    if table.len() != firing_rates.len() {
        return Err(Error::Invalid(format!(
            "{} firing rates for {} layers",
            firing_rates.len(),
            table.len()
        )));
    }
    if let Some(r) = firing_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Invalid(format!("firing rate {r} outside [0, 1]")));
    }
    let t = timesteps as f64;
    let layers: Vec<LayerEnergy> = table
        .iter()
        .zip(firing_rates)
        .map(|(l, &fr)| {
            let (rate, energy) = match l.kind {
                OpKind::Mac => (1.0, E_MAC_PJ * l.flops as f64 * l.applications as f64),
                OpKind::Ac => (fr, E_AC_PJ * t * l.flops as f64 * fr),
            };
            LayerEnergy {
                name: l.layer.name(),
                kind: l.kind,
                flops: l.flops,
                firing_rate: rate,
                energy_pj: energy,
            }
        })
        .collect();
    let total_pj = layers.iter().map(|l| l.energy_pj).sum();
    Ok(EnergyReport {
        e_mac_pj: E_MAC_PJ,
        e_ac_pj: E_AC_PJ,
        timesteps,
        layers,
        total_pj,
    })
}

/// Running firing-rate statistics over calibration batches, one entry per
/// layer of a [`FlopTable`], averaged over timesteps and samples.
#[derive(Clone, Debug)]
pub struct FiringRates {
    layers: Vec<LayerRef>,
    active: Vec<f64>,
    total: Vec<f64>,
}

impl FiringRates {
    pub fn new(table: &[LayerFlops]) -> Self {
        let n = table.len();
        Self {
            layers: table.iter().map(|l| l.layer).collect(),
            active: vec![0.0; n],
            total: vec![0.0; n],
        }
    }

    pub fn accumulate<R: Real>(&mut self, traces: &[TimestepTrace<R>]) -> Result<()> {
        for trace in traces {
            for (i, layer) in self.layers.iter().enumerate() {
                let spikes = match *layer {
                    LayerRef::Encoder | LayerRef::Head => continue,
                    LayerRef::Downsample(s) => trace.stages[s].input_spikes.as_ref(),
                    LayerRef::Depthwise(s, b) => trace.stages[s].blocks.get(b).map(|x| &x.s1),
                    LayerRef::Pointwise(s, b) => trace.stages[s].blocks.get(b).map(|x| &x.s2),
                    LayerRef::TurnOn(s) => Some(&trace.stages[s].boundary_spikes),
                };
                let spikes = spikes
                    .ok_or_else(|| Error::Invalid(format!("trace lacks {}", layer.name())))?;
                self.active[i] += spikes.data().iter().filter(|&&x| x != R::zero()).count() as f64;
                self.total[i] += spikes.len() as f64;
            }
        }
        Ok(())
    }

    /// Rates per layer; MAC layers and unobserved layers report 1 and 0.
    pub fn rates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .zip(self.active.iter().zip(&self.total))
            .map(|(l, (&a, &n))| match l {
                LayerRef::Encoder | LayerRef::Head => 1.0,
                _ if n == 0.0 => 0.0,
                _ => a / n,
            })
            .collect()
    }

    /// Mean rate over AC layers.
    pub fn aggregate(&self) -> f64 {
        let (a, n) = self
            .layers
            .iter()
            .zip(self.active.iter().zip(&self.total))
            .filter(|(l, _)| !matches!(l, LayerRef::Encoder | LayerRef::Head))
            .fold((0.0, 0.0), |(a, n), (_, (&x, &y))| (a + x, n + y));
        if n == 0.0 {
            0.0
        } else {
            a / n
        }
    }
}

/// `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean gradient entry of every layer, in parameter order. A layer's entries
/// are its kernel together with its per-channel gain.
pub fn gradient_signature<R: Real>(grads: &GradientSet<R>) -> Vec<f64> {
    let mut layers: Vec<(String, f64, usize)> = Vec::new();
    grads.grads.visit(|name, _, d| {
        let Some(layer) = name
            .strip_suffix(".weight")
            .or_else(|| name.strip_suffix(".gain"))
        else {
            return;
        };
        let sum: f64 = d.iter().map(|&x| Real::to_f64(x)).sum();
        match layers.last_mut() {
            Some((l, s, n)) if l == layer => {
                *s += sum;
                *n += d.len();
            }
            _ => layers.push((layer.to_string(), sum, d.len())),
        }
    });
    layers.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineRow {
    pub epoch: usize,
    pub comparison: String,
    pub cosine: f64,
}

/// Per-epoch cosine similarity between a baseline's gradient signatures and
/// those of each variant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CosineReport {
    pub rows: Vec<CosineRow>,
}

impl CosineReport {
    pub fn push(&mut self, epoch: usize, comparison: &str, a: &[f64], b: &[f64]) -> Result<f64> {
        let cosine = cosine_similarity(a, b)?;
        self.rows.push(CosineRow {
            epoch,
            comparison: comparison.to_string(),
            cosine,
        });
        Ok(cosine)
    }

    pub fn mean(&self, comparison: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.comparison == comparison)
            .map(|r| r.cosine)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,comparison,cosine\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.9}", r.epoch, r.comparison, r.cosine);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::StageConfig;
    use proptest::prelude::*;

    #[test]
    fn energy_hand_values() {
        let enc = [LayerFlops::mac(LayerRef::Encoder, 1000)];
        assert_eq!(estimate_energy(&enc, &[1.0], 4).unwrap().total_pj, 4600.0);
        let ac = [LayerFlops::ac(LayerRef::TurnOn(0), 2000)];
        let r = estimate_energy(&ac, &[0.5], 1).unwrap();
        assert!((r.total_pj - 900.0).abs() <= 900.0 * 1e-12);
        let both = [enc[0].clone(), ac[0].clone()];
        let silent = estimate_energy(&both, &[1.0, 0.0], 4).unwrap();
        assert_eq!(silent.total_pj, 4600.0);
        assert!(estimate_energy(&both, &[1.0, 1.5], 4).is_err());
        assert!(estimate_energy(&both, &[1.0], 4).is_err());
    }

    #[test]
    fn flop_formulas() {
        let cfg = NetworkConfig {
            timesteps: 1,
            in_height: 2,
            in_width: 2,
            stages: vec![StageConfig {
                blocks: 1,
                channels: 8,
            }],
            ..NetworkConfig::default()
        };
        let t = count_flops(&cfg).unwrap();
        let pw = t
            .iter()
            .find(|l| l.layer == LayerRef::Pointwise(0, 0))
            .unwrap();
        assert_eq!(pw.flops, 8 * 8 * 4);
        let enc = &t[0];
        assert_eq!(enc.flops, 8 * 9 * 4);
        let big = NetworkConfig {
            in_height: 4,
            in_width: 4,
            ..cfg.clone()
        };
        let t2 = count_flops(&big).unwrap();
        for (a, b) in t.iter().zip(&t2) {
            if a.layer != LayerRef::Head {
                assert_eq!(b.flops, 4 * a.flops);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn signature_examples() {
        let cfg = NetworkConfig {
            timesteps: 1,
            in_height: 4,
            in_width: 4,
            stages: vec![StageConfig {
                blocks: 1,
                channels: 2,
            }],
            ..NetworkConfig::default()
        };
        let w = crate::network::ModelWeights::<f32>::init(&cfg).unwrap();
        let zero = GradientSet {
            grads: w.zeros_like(),
        };
        let sig = gradient_signature(&zero);
        let layers = w
            .param_names()
            .iter()
            .filter(|n| n.ends_with(".weight"))
            .count();
        assert_eq!(sig.len(), layers);
        assert!(sig.iter().all(|&x| x == 0.0));
        let mut g = w.zeros_like();
        g.head = crate::Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(
            *gradient_signature(&GradientSet { grads: g.clone() })
                .last()
                .unwrap(),
            2.0
        );
        g.encoder.weight = crate::Tensor::full(g.encoder.weight.shape(), 1.0);
        g.encoder.gain.iter_mut().for_each(|x| *x = 4.0);
        let (nw, ng) = (g.encoder.weight.len() as f64, g.encoder.gain.len() as f64);
        assert_eq!(
            gradient_signature(&GradientSet { grads: g })[0],
            (nw + 4.0 * ng) / (nw + ng)
        );
    }

    proptest! {
        #[test]
        fn cosine_of_scaled_vector(v in prop::collection::vec(-5.0f64..5.0, 1..16), k in 0.1f64..10.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let neg: Vec<f64> = v.iter().map(|x| -x * k).collect();
            prop_assert!((cosine_similarity(&v, &scaled).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn energy_is_linear(
            f in prop::collection::vec(1u64..10_000, 2..6),
            r in prop::collection::vec(0.0f64..0.5, 6),
            t in 1usize..8,
        ) {
            let table: Vec<LayerFlops> = f.iter().map(|&x| LayerFlops::ac(LayerRef::TurnOn(0), x)).collect();
            let rates = &r[..table.len()];
            let base = estimate_energy(&table, rates, t).unwrap().total_pj;
            let doubled: Vec<f64> = rates.iter().map(|x| 2.0 * x).collect();
            let e2 = estimate_energy(&table, &doubled, t).unwrap().total_pj;
            prop_assert!((e2 - 2.0 * base).abs() <= 1e-9 * base.max(1.0));
            let mut bigger = table.clone();
            bigger[0].flops *= 3;
            let e3 = estimate_energy(&bigger, rates, t).unwrap().total_pj;
            let l0 = E_AC_PJ * t as f64 * table[0].flops as f64 * rates[0];
            prop_assert!((e3 - base - 2.0 * l0).abs() <= 1e-9 * e3.max(1.0));
        }
    }
}
