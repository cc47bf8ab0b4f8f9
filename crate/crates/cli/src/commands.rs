//! The six subcommands. Each returns a report and writes its CSVs under the
//! run's output directory; `main` turns reports into exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trevsnn_core::engine::{
    backward_reversible, backward_stbp, loss_cross_entropy, ActivationLedger, BackwardOptions,
    GradientSet, Mode,
};
use trevsnn_core::metrics::{
    count_flops, estimate_energy, gradient_signature, CosineReport, EnergyReport, FiringRates,
};
use trevsnn_core::network::{forward_full, forward_full_eff, ModelWeights, NetworkConfig};
use trevsnn_core::neuron::SpikeFn;
use trevsnn_core::{Real, Tensor};

use crate::checkpoint::{load_weights, save_weights};
use crate::config::RunConfig;
use crate::data::{load_splits, Dataset};
use crate::train::{accuracy, metrics_csv, EpochOutcome, EpochRecord, Trainer};

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn random_batch<R: Real>(config: &NetworkConfig, n: usize, seed: u64) -> (Tensor<R>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(
        &[n, config.in_channels, config.in_height, config.in_width],
        |_| R::lit(rng.random_range(0.0..2.0)),
    );
    let y = (0..n)
        .map(|_| rng.random_range(0..config.num_classes))
        .collect();
    (x, y)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub weights: ModelWeights,
    pub initial_accuracy: f64,
    pub diverged: Option<String>,
    pub metrics_path: PathBuf,
}

pub fn train(run: &RunConfig) -> Result<TrainSummary> {
    let config = run.network();
    let splits = load_splits(&run.data, &config, run.seed)?;
    let mut trainer = Trainer::new(run, run.mode, splits.train.len())?;
    let out = &run.out_dir;
    write_out(out, "config.toml", &run.to_toml()?)?;
    let initial_accuracy = trainer.accuracy(&splits.test)?;
    println!(
        "{} | {} parameters | {} train / {} test samples | untrained test accuracy {:.4}",
        run.mode.name(),
        trainer.weights.num_params(),
        splits.train.len(),
        splits.test.len(),
        initial_accuracy
    );
    let mut records = Vec::new();
    let mut timing = String::from("epoch,wall_seconds\n");
    let mut diverged = None;
    let metrics_path = out.join("metrics.csv");
    for epoch in 1..=run.train.epochs {
        let start = Instant::now();
        match trainer.epoch(&splits.train, epoch, |_| {})? {
            EpochOutcome::Completed(mut rec) => {
                if run.train.eval_each_epoch || epoch == run.train.epochs {
                    rec.test_accuracy = Some(trainer.accuracy(&splits.test)?);
                }
                let secs = start.elapsed().as_secs_f64();
                println!(
                    "epoch {epoch:>3} loss {:.4} train {:.4} test {} peak {} B ({secs:.1} s)",
                    rec.loss,
                    rec.train_accuracy,
                    rec.test_accuracy
                        .map(|a| format!("{a:.4}"))
                        .unwrap_or_else(|| "-".into()),
                    rec.ledger_peak_bytes
                );
                let _ = writeln!(timing, "{epoch},{secs:.3}");
                records.push(rec);
                write_out(out, "metrics.csv", &metrics_csv(run.mode, &records))?;
                write_out(out, "timing.csv", &timing)?;
            }
            EpochOutcome::Diverged(d) => {
                let path = out.join("last_good.ckpt");
                save_weights(&path, &d.last_good, &config)?;
                let msg = format!(
                    "training diverged at epoch {} step {}: {}; last good weights saved to {}",
                    d.epoch,
                    d.step,
                    d.reason,
                    path.display()
                );
                eprintln!("{msg}");
                diverged = Some(msg);
                break;
            }
        }
    }
    write_out(out, "metrics.csv", &metrics_csv(run.mode, &records))?;
    if diverged.is_none() {
        save_weights(&out.join("model.ckpt"), &trainer.weights, &config)?;
    }
    Ok(TrainSummary {
        records,
        weights: trainer.weights,
        initial_accuracy,
        diverged,
        metrics_path,
    })
}

pub fn weights_for(run: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelWeights> {
    let config = run.network();
    match checkpoint {
        Some(p) => load_weights(p, &config),
        None => Ok(ModelWeights::init(&config)?),
    }
}

pub fn eval(run: &RunConfig, checkpoint: &Path) -> Result<f64> {
    let config = run.network();
    let splits = load_splits(&run.data, &config, run.seed)?;
    let weights = load_weights(checkpoint, &config)?;
    let acc = accuracy(&weights.effective()?, &config, &splits.test)?;
    println!("test accuracy {acc:.4} on {} samples", splits.test.len());
    write_out(
        &run.out_dir,
        "eval.csv",
        &format!("samples,test_accuracy\n{},{acc:.6}\n", splits.test.len()),
    )?;
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub equivalence_max: f64,
    pub bitwise_identical: bool,
    pub fd_max: f64,
    pub fd_worst: String,
    pub fd_entries: usize,
    pub passed: bool,
}

fn loss64(
    w: &ModelWeights<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    config: &NetworkConfig,
    smoothing: f64,
) -> Result<f64> {
    let (logits, _) = forward_full(x, w, config)?;
    Ok(loss_cross_entropy(&logits, y, smoothing)?.0)
}

pub fn gradcheck(run: &RunConfig) -> Result<GradcheckReport> {
    let gc = &run.gradcheck;
    let opts = BackwardOptions {
        surrogate_scale: gc.surrogate_scale,
        ..run.backward_options()
    };
    let base = run.network();
    Mode::Reversible.validate(&base)?;

    let mut equivalence_max = 0.0f64;
    let mut bitwise_identical = true;
    for k in 0..gc.seeds as u64 {
        let config = NetworkConfig {
            seed: base.seed.wrapping_add(k),
            ..base.clone()
        };
        let w = ModelWeights::<f32>::init(&config)?;
        let (x, y) = random_batch::<f32>(&config, gc.batch, config.seed ^ 0xabc);
        let a = backward_stbp(&x, &y, &w, &config, &mut ActivationLedger::new(), &opts)?;
        let b = backward_reversible(&x, &y, &w, &config, &mut ActivationLedger::new(), &opts)?;
        equivalence_max = equivalence_max.max(b.grads.max_rel_error(&a.grads));
        bitwise_identical &= a.grads == b.grads;
    }

    let soft = NetworkConfig {
        neuron: trevsnn_core::neuron::NeuronParams {
            spike_fn: SpikeFn::Sigmoid,
            ..base.neuron.clone()
        },
        ..base.clone()
    };
    let w = ModelWeights::<f64>::init(&soft)?;
    let (x, y) = random_batch::<f64>(&soft, gc.batch, soft.seed ^ 0xfd);
    let analytic: GradientSet<f64> =
        backward_stbp(&x, &y, &w, &soft, &mut ActivationLedger::new(), &opts)?.grads;
    let h = gc.step;
    let smoothing = opts.label_smoothing;
    let (mut fd_max, mut fd_worst, mut fd_entries) = (0.0f64, String::new(), 0usize);
    for (name, grad) in analytic.named() {
        let picks: Vec<usize> = if gc.samples_per_tensor == 0 || gc.samples_per_tensor >= grad.len()
        {
            (0..grad.len()).collect()
        } else {
            (0..gc.samples_per_tensor)
                .map(|j| j * grad.len() / gc.samples_per_tensor)
                .collect()
        };
        for i in picks {
            let at = |delta: f64| {
                let mut p = w.clone();
                p.visit_mut(|n, _, d| {
                    if n == name {
                        d[i] += delta;
                    }
                });
                loss64(&p, &x, &y, &soft, smoothing)
            };
            let fd = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            let rel = (grad[i] - fd).abs() / (fd.abs() + 1e-8);
            fd_entries += 1;
            if rel > fd_max {
                fd_max = rel;
                fd_worst = format!("{name}[{i}] analytic {:e} numeric {fd:e}", grad[i]);
            }
        }
    }
    let passed = equivalence_max < gc.equivalence_tol && fd_max < gc.fd_tol;
    println!(
        "reversible vs STBP over {} seeds: max rel error {equivalence_max:.3e}",
        gc.seeds
    );
    println!("bitwise identical gradients: {bitwise_identical}");
    println!(
        "finite differences over {fd_entries} entries: max rel error {fd_max:.3e} ({fd_worst})"
    );
    println!("{}", if passed { "PASS" } else { "FAIL" });
    let csv = format!(
        "check,value,tolerance\nequivalence_max_rel,{equivalence_max:e},{:e}\nfinite_difference_max_rel,{fd_max:e},{:e}\n",
        gc.equivalence_tol, gc.fd_tol
    );
    write_out(&run.out_dir, "gradcheck.csv", &csv)?;
    Ok(GradcheckReport {
        equivalence_max,
        bitwise_identical,
        fd_max,
        fd_worst,
        fd_entries,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemRow {
    pub timesteps: usize,
    pub stbp_peak: usize,
    pub reversible_peak: usize,
    pub reversible_live_timesteps: usize,
}

#[derive(Clone, Debug)]
pub struct MemReport {
    pub rows: Vec<MemRow>,
    pub reversible_spread: f64,
    pub min_stbp_growth: f64,
    pub passed: bool,
}

/// Ledger peaks at several `T` with the per-timestep sub-network held fixed.
pub fn memcheck(run: &RunConfig) -> Result<MemReport> {
    let base = NetworkConfig {
        grouped_width: false,
        ..run.network()
    };
    let opts = run.backward_options();
    let mut rows = Vec::new();
    for &t in &run.memcheck.timesteps {
        let config = NetworkConfig {
            timesteps: t,
            ..base.clone()
        };
        Mode::Reversible.validate(&config)?;
        let w = ModelWeights::<f32>::init(&config)?;
        let (x, y) = random_batch::<f32>(&config, run.memcheck.batch, base.seed ^ 0x3e3);
        let mut a = ActivationLedger::new();
        backward_stbp(&x, &y, &w, &config, &mut a, &opts)?;
        let mut b = ActivationLedger::new();
        backward_reversible(&x, &y, &w, &config, &mut b, &opts)?;
        rows.push(MemRow {
            timesteps: t,
            stbp_peak: a.peak_bytes(),
            reversible_peak: b.peak_bytes(),
            reversible_live_timesteps: b.max_live_timesteps(),
        });
    }
    let rev: Vec<f64> = rows.iter().map(|r| r.reversible_peak as f64).collect();
    let reversible_spread =
        rev.iter().cloned().fold(0.0, f64::max) / rev.iter().cloned().fold(f64::INFINITY, f64::min);
    // Growth per doubling of T between consecutive rows.
    let min_stbp_growth = rows
        .windows(2)
        .map(|p| {
            let ratio = p[1].stbp_peak as f64 / p[0].stbp_peak as f64;
            let doublings = (p[1].timesteps as f64 / p[0].timesteps as f64).log2();
            ratio.powf(1.0 / doublings)
        })
        .fold(f64::INFINITY, f64::min);
    let passed = reversible_spread < 1.05 && min_stbp_growth >= 1.8;
    let mut csv =
        String::from("timesteps,stbp_peak_bytes,reversible_peak_bytes,reversible_live_timesteps\n");
    println!(
        "{:>4} {:>16} {:>16}",
        "T", "stbp peak B", "reversible peak B"
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.timesteps, r.stbp_peak, r.reversible_peak, r.reversible_live_timesteps
        );
        println!(
            "{:>4} {:>16} {:>16}",
            r.timesteps, r.stbp_peak, r.reversible_peak
        );
    }
    println!(
        "reversible max/min {reversible_spread:.4} (< 1.05), STBP growth per doubling >= {min_stbp_growth:.3} (>= 1.8): {}",
        if passed { "PASS" } else { "FAIL" }
    );
    write_out(&run.out_dir, "memcheck.csv", &csv)?;
    Ok(MemReport {
        rows,
        reversible_spread,
        min_stbp_growth,
        passed,
    })
}

/// Firing rates measured over `samples`, combined with the FLOP table.
pub fn energy_for(
    weights: &ModelWeights,
    config: &NetworkConfig,
    samples: &Dataset,
    count: usize,
) -> Result<EnergyReport> {
    let table = count_flops(config)?;
    let mut rates = FiringRates::new(&table);
    let eff = weights.effective()?;
    let n = count.min(samples.len());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(16) {
        let (x, _) = samples.batch(chunk);
        let (_, traces) = forward_full_eff(&x, &eff, config)?;
        rates.accumulate(&traces)?;
    }
    Ok(estimate_energy(&table, &rates.rates(), config.timesteps)?)
}

pub fn energy(run: &RunConfig, checkpoint: Option<&Path>) -> Result<EnergyReport> {
    let config = run.network();
    let splits = load_splits(&run.data, &config, run.seed)?;
    let weights = weights_for(run, checkpoint)?;
    if splits.test.len() < run.energy.calibration {
        eprintln!(
            "warning: calibration wants {} samples, the test split has {}",
            run.energy.calibration,
            splits.test.len()
        );
    }
    let report = energy_for(&weights, &config, &splits.test, run.energy.calibration)?;
    print!("{}", report.to_csv());
    println!("total {:.3} pJ per sample", report.total_pj);
    write_out(&run.out_dir, "energy.csv", &report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AnalyzeReport {
    pub cosine: CosineReport,
    /// Per run, per epoch (epoch 0 first) layer-mean gradient vectors.
    pub signatures: Vec<(Mode, Vec<Vec<f64>>)>,
    pub mean_case1: f64,
    pub mean_case2: f64,
}

pub const BASELINE_VS_CASE1: &str = "baseline_vs_case1";
pub const BASELINE_VS_CASE2: &str = "baseline_vs_case2";

fn mean_after_epoch0(report: &CosineReport, comparison: &str) -> f64 {
    let v: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.comparison == comparison && r.epoch > 0)
        .map(|r| r.cosine)
        .collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Baseline STBP, case 1 and case 2 trained from one seed; each epoch's
/// signature is the mean over its steps of the per-layer mean gradient.
/// Epoch 0 evaluates the baseline rule on the shared initial weights.
pub fn analyze(run: &RunConfig) -> Result<AnalyzeReport> {
    let config = run.network();
    let splits = load_splits(&run.data, &config, run.seed)?;
    let modes = [Mode::Stbp, Mode::Case1, Mode::Case2];
    let mut trainers = modes
        .iter()
        .map(|&m| Trainer::new(run, m, splits.train.len()))
        .collect::<Result<Vec<_>>>()?;
    let probe: Vec<usize> = (0..run.train.batch_size.min(splits.train.len())).collect();
    let (x0, y0) = splits.train.batch(&probe);
    let mut signatures: Vec<(Mode, Vec<Vec<f64>>)> = Vec::new();
    for tr in &trainers {
        let g = backward_stbp(
            &x0,
            &y0,
            &tr.weights,
            &tr.config,
            &mut ActivationLedger::new(),
            &tr.opts,
        )?;
        signatures.push((tr.mode, vec![gradient_signature(&g.grads)]));
    }
    let mut metrics = String::from("epoch,run,loss,train_accuracy,test_accuracy\n");
    for epoch in 1..=run.train.epochs {
        let start = Instant::now();
        for (k, tr) in trainers.iter_mut().enumerate() {
            let mut sum: Vec<f64> = Vec::new();
            let mut steps = 0usize;
            let outcome = tr.epoch(&splits.train, epoch, |g| {
                let s = gradient_signature(g);
                if sum.is_empty() {
                    sum = vec![0.0; s.len()];
                }
                sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
                steps += 1;
            })?;
            let rec = match outcome {
                EpochOutcome::Completed(r) => r,
                EpochOutcome::Diverged(d) => {
                    anyhow::bail!("{} run diverged: {}", tr.mode.name(), d.reason)
                }
            };
            let test = if run.train.eval_each_epoch {
                tr.accuracy(&splits.test)?
            } else {
                f64::NAN
            };
            let _ = writeln!(
                metrics,
                "{epoch},{},{:.8},{:.6},{test:.6}",
                tr.mode.name(),
                rec.loss,
                rec.train_accuracy
            );
            signatures[k]
                .1
                .push(sum.iter().map(|v| v / steps.max(1) as f64).collect());
        }
        println!(
            "epoch {epoch:>3} done ({:.1} s)",
            start.elapsed().as_secs_f64()
        );
    }
    let mut cosine = CosineReport::default();
    let epochs = signatures[0].1.len();
    for e in 0..epochs {
        let base = &signatures[0].1[e];
        cosine.push(e, BASELINE_VS_CASE1, base, &signatures[1].1[e])?;
        cosine.push(e, BASELINE_VS_CASE2, base, &signatures[2].1[e])?;
    }
    let mean_case1 = mean_after_epoch0(&cosine, BASELINE_VS_CASE1);
    let mean_case2 = mean_after_epoch0(&cosine, BASELINE_VS_CASE2);
    let mut sig_csv = String::from("epoch,run,layer,mean_gradient\n");
    for (mode, per_epoch) in &signatures {
        for (e, v) in per_epoch.iter().enumerate() {
            for (l, g) in v.iter().enumerate() {
                let _ = writeln!(sig_csv, "{e},{},{l},{g:e}", mode.name());
            }
        }
    }
    write_out(&run.out_dir, "cosine.csv", &cosine.to_csv())?;
    write_out(&run.out_dir, "signatures.csv", &sig_csv)?;
    write_out(&run.out_dir, "analyze_metrics.csv", &metrics)?;
    print!("{}", cosine.to_csv());
    println!("mean cosine over epochs >= 1: case1 {mean_case1:.4}, case2 {mean_case2:.4}");
    Ok(AnalyzeReport {
        cosine,
        signatures,
        mean_case1,
        mean_case2,
    })
}
