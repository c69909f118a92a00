//! Release checklist for the trainer: nine end-to-end criteria covering
//! gradient probing, candidate selection, budget accounting, backprop,
//! desk-scale strategy ordering, sweeps, determinism, and round-trips.
//!
//! Everything runs inside one test so the wall-clock measurements never
//! contend with other tests for the machine. Each criterion prints one
//! verdict line and carries a time budget; the test fails if any
//! criterion fails or overruns its budget.

use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use advaug::adapt::{
    adapt_step, estimate_gradient, propose_candidates, AdaptConfig, FixedNoise, LossEvaluator,
    Selection, Strategy, SubstreamNoise,
};
use advaug::augment::adaptable_params;
use advaug::config::TrainerConfig;
use advaug::data::{batches, load_idx, write_idx};
use advaug::nn::{checkpoint, Arch, Model, ModelSpec, OptimConfig, Optimizer};
use advaug::rng::substream;
use advaug::trainer::{run_ablation, run_epsilon_sweep, train, BatchLossEvaluator};
use advaug::{
    apply_pipeline, load_dataset, sample_pipeline, DatasetSpec, Extent, ImageBatch, OpInstance,
    OpKind, ParamLocator, Pipeline, Registry,
};
use ndarray::Array4;
use rand::Rng;

fn es(e: advaug::Error) -> String {
    e.to_string()
}

fn io_err(e: std::io::Error) -> String {
    e.to_string()
}

/// A loss evaluator driven by a scalar function of one lattice level, for
/// checking the probe math against closed-form answers.
struct LevelProbe {
    loc: ParamLocator,
    f: fn(i32) -> f64,
    calls: AtomicU64,
}

impl LevelProbe {
    fn new(loc: ParamLocator, f: fn(i32) -> f64) -> Self {
        LevelProbe {
            loc,
            f,
            calls: AtomicU64::new(0),
        }
    }
}

impl LossEvaluator for LevelProbe {
    fn loss(&self, pipeline: &Pipeline) -> advaug::Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let level = pipeline.level_at(self.loc).expect("probed level exists");
        Ok((self.f)(level))
    }

    fn forward_evals(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Uniform-noise batch with uniform labels, seeded through a named
/// substream so every criterion sees the same data on every run.
fn random_batch(seed: u64, n: usize, ext: Extent, classes: usize) -> ImageBatch {
    let mut rng = substream(seed, "acceptance-batch", &[n as u64]);
    let mut data = Array4::<f32>::zeros((n, 1, ext.height, ext.width));
    for v in data.iter_mut() {
        *v = rng.gen::<f32>();
    }
    let labels = (0..n).map(|_| rng.gen_range(0..classes) as u32).collect();
    ImageBatch::new(data, labels).expect("batch construction")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The desk-scale configuration the ordering and sweep criteria share:
/// five bar classes, a small training set, and a single occlusion
/// operator whose placement the adaptation can steer.
fn desk_scale_config() -> TrainerConfig {
    TrainerConfig {
        data: DatasetSpec {
            classes: 5,
            height: 16,
            width: 16,
            train_count: 96,
            test_count: 1024,
            seed: 1234,
            jitter: 1.0,
            ..Default::default()
        },
        arch: Arch::CnnS,
        optim: OptimConfig {
            lr: 0.1,
            ..Default::default()
        },
        adapt: AdaptConfig {
            epsilon: 3,
            ..Default::default()
        },
        n_ops: 1,
        epochs: 10,
        batch_size: 16,
        seed: 0,
        eval_every: 0,
        timing: false,
        ops: Some(vec![OpKind::Cutout]),
    }
}

/// One audited batch of a hand-rolled training run.
struct BatchAudit {
    base_loss: f64,
    chosen_loss: f64,
    /// Model forward-counter delta across the adapt step.
    counted: u64,
    /// Evaluations the step itself reported.
    reported: u64,
    /// 1 + 2M - cache_hits for the batch's pipeline.
    expected: u64,
}

/// Run a complete training run batch by batch through the public API,
/// recording per-batch losses and evaluation counts while the model
/// genuinely trains.
fn audited_training_run(
    data: &DatasetSpec,
    arch: Arch,
    acfg: &AdaptConfig,
    n_ops: usize,
    epochs: u64,
    batch_size: usize,
    master: u64,
) -> Result<Vec<BatchAudit>, String> {
    let split = load_dataset(data).map_err(es)?;
    let ext = split.train.extent();
    let spec = ModelSpec {
        arch,
        channels: split.train.channels(),
        height: ext.height,
        width: ext.width,
        classes: data.classes,
    };
    let mut model = Model::new(spec, master).map_err(es)?;
    let registry = Registry::full(ext);
    let per_epoch = batches(&split.train, batch_size, master, 0)
        .map_err(es)?
        .batch_count() as u64;
    let mut optimizer =
        Optimizer::new(OptimConfig::default(), &model, epochs * per_epoch).map_err(es)?;

    let mut audits = Vec::new();
    for epoch in 0..epochs {
        for (bi, batch) in batches(&split.train, batch_size, master, epoch)
            .map_err(es)?
            .enumerate()
        {
            let bi = bi as u64;
            let mut prng = substream(master, "audit-pipeline", &[epoch, bi]);
            let pipeline = sample_pipeline(&mut prng, &registry, n_ops).map_err(es)?;
            let m = adaptable_params(&pipeline).len() as u64;
            let noise = SubstreamNoise {
                master,
                epoch,
                batch: bi,
            };
            let before = model.forward_count();
            let outcome = {
                let eval = BatchLossEvaluator {
                    model: &model,
                    batch: &batch,
                };
                adapt_step(&eval, &pipeline, acfg, ext, &noise).map_err(es)?
            };
            audits.push(BatchAudit {
                base_loss: outcome.base_loss,
                chosen_loss: outcome.chosen_loss,
                counted: model.forward_count() - before,
                reported: outcome.forward_evals,
                expected: 1 + 2 * m - outcome.cache_hits,
            });
            let augmented = apply_pipeline(&outcome.chosen, &batch).map_err(es)?;
            let (_, grads) = model.backward(&augmented).map_err(es)?;
            optimizer.step(&mut model, &grads).map_err(es)?;
        }
    }
    Ok(audits)
}

fn quadratic(level: i32) -> f64 {
    let d = level as f64 - 3.0;
    d * d
}

fn flat_loss(_level: i32) -> f64 {
    1.0
}

/// The probe at an interior level returns the closed-form slope exactly,
/// and a probe that would leave the lattice reflects while preserving the
/// reconstruction identity to one ulp.
fn criterion_gradient_probe() -> Result<String, String> {
    let ext = Extent {
        height: 16,
        width: 16,
    };
    let loc = ParamLocator {
        op_index: 0,
        param_index: 0,
    };
    let cfg = AdaptConfig::default();

    // L(level) = (level - 3)^2: the secant from 1 to 2 has slope -3.
    let probe = LevelProbe::new(loc, quadratic);
    let pipe = Pipeline::new(vec![OpInstance::new(OpKind::Rotate, vec![1])]);
    let est = estimate_gradient(&probe, &pipe, loc, quadratic(1), &cfg, ext).map_err(es)?;
    if est.delta_used != 1 {
        return Err(format!("interior probe stepped {:+}, wanted +1", est.delta_used));
    }
    if est.value != -3.0 {
        return Err(format!("interior gradient {}, wanted -3 exactly", est.value));
    }

    // Level 9 cannot step up, so the probe must reflect to -1 and the
    // estimate must reconstruct the perturbed loss from its parts.
    let edge = Pipeline::new(vec![OpInstance::new(OpKind::Rotate, vec![9])]);
    let est9 = estimate_gradient(&probe, &edge, loc, quadratic(9), &cfg, ext).map_err(es)?;
    if est9.delta_used != -1 {
        return Err(format!("edge probe stepped {:+}, wanted -1", est9.delta_used));
    }
    let reconstructed = est9.base_loss + est9.value * est9.delta_used as f64;
    let tolerance = est9.perturbed_loss.abs() * f64::EPSILON;
    if (reconstructed - est9.perturbed_loss).abs() > tolerance {
        return Err(format!(
            "reflected estimate reconstructs {} but the probe saw {}",
            reconstructed, est9.perturbed_loss
        ));
    }
    Ok(format!(
        "interior slope {} with step {:+}; edge step {:+} reconstructs the probed loss exactly",
        est.value, est.delta_used, est9.delta_used
    ))
}

/// On a frozen small convnet, the selected candidate must be exactly the
/// one an exhaustive rescoring of the candidate set picks, including the
/// documented tie order.
fn criterion_selection_exhaustive() -> Result<String, String> {
    let ext = Extent {
        height: 8,
        width: 8,
    };
    let spec = ModelSpec {
        arch: Arch::CnnS,
        channels: 1,
        height: 8,
        width: 8,
        classes: 2,
    };
    let model = Model::new(spec, 2024).map_err(es)?;
    let registry = Registry::full(ext);
    let acfg = AdaptConfig::default();
    let noise = FixedNoise::default();

    let mut agree = 0usize;
    let trials = 50u64;
    for trial in 0..trials {
        let batch = random_batch(9000 + trial, 8, ext, 2);
        let mut rng = substream(31, "selection-pipeline", &[trial]);
        let pipeline = loop {
            let p = sample_pipeline(&mut rng, &registry, 2).map_err(es)?;
            if adaptable_params(&p).len() <= 4 {
                break p;
            }
        };
        let outcome = {
            let eval = BatchLossEvaluator {
                model: &model,
                batch: &batch,
            };
            adapt_step(&eval, &pipeline, &acfg, ext, &noise).map_err(es)?
        };

        // Score the base and every candidate again from scratch, then
        // apply the documented rules: ties go to the earliest candidate
        // and the base only wins strictly.
        let base_ref = model
            .loss_batch(&apply_pipeline(&pipeline, &batch).map_err(es)?)
            .map_err(es)?;
        let candidates =
            propose_candidates(&pipeline, &outcome.gradients, &acfg, ext, &noise).map_err(es)?;
        let mut losses = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let augmented = apply_pipeline(c, &batch).map_err(es)?;
            losses.push(model.loss_batch(&augmented).map_err(es)?);
        }
        let mut best = 0usize;
        for (i, &l) in losses.iter().enumerate().skip(1) {
            if l > losses[best] {
                best = i;
            }
        }
        let (want_selection, want_loss) = if base_ref > losses[best] {
            (Selection::Base, base_ref)
        } else {
            (Selection::Candidate(best), losses[best])
        };

        if outcome.base_loss.to_bits() == base_ref.to_bits()
            && outcome.selection == want_selection
            && outcome.chosen_loss.to_bits() == want_loss.to_bits()
        {
            agree += 1;
        }
    }
    if agree != trials as usize {
        return Err(format!(
            "selection matched the exhaustive rescoring on only {agree}/{trials} instances"
        ));
    }

    // All-tie instance: every loss equal means the first candidate wins
    // and the base does not.
    let loc = ParamLocator {
        op_index: 0,
        param_index: 0,
    };
    let flat = LevelProbe::new(loc, flat_loss);
    let tie_pipe = Pipeline::new(vec![OpInstance::new(OpKind::Rotate, vec![5])]);
    let tie = adapt_step(&flat, &tie_pipe, &acfg, ext, &noise).map_err(es)?;
    if tie.selection != Selection::Candidate(0) {
        return Err(format!(
            "an all-tie selection picked {:?}, wanted the first candidate",
            tie.selection
        ));
    }
    Ok(format!(
        "choice and loss matched the exhaustive rescoring bit for bit on {agree}/{trials} instances; ties go to the first candidate"
    ))
}

/// With loss steering up and the base competing, no batch of a full
/// training run may select a pipeline below its base loss.
fn criterion_never_below_base() -> Result<String, String> {
    let data = DatasetSpec {
        classes: 5,
        height: 16,
        width: 16,
        train_count: 512,
        test_count: 64,
        seed: 77,
        jitter: 1.0,
        ..Default::default()
    };
    let acfg = AdaptConfig::default();
    let audits = audited_training_run(&data, Arch::MlpS, &acfg, 2, 3, 32, 7)?;
    let total = audits.len();
    let held = audits
        .iter()
        .filter(|a| a.chosen_loss >= a.base_loss)
        .count();
    let worst = audits
        .iter()
        .map(|a| a.chosen_loss - a.base_loss)
        .fold(f64::INFINITY, f64::min);
    if held != total {
        return Err(format!(
            "{}/{total} batches selected below the base loss (worst margin {worst:+.3e})",
            total - held
        ));
    }
    Ok(format!(
        "chosen loss never fell below the base on {held}/{total} batches (smallest margin {worst:+.3e})"
    ))
}

/// Analytic gradients of the small dense net agree with central finite
/// differences on every single parameter.
fn criterion_backprop_matches_fd() -> Result<String, String> {
    let ext = Extent {
        height: 8,
        width: 8,
    };
    let spec = ModelSpec {
        arch: Arch::MlpS,
        channels: 1,
        height: 8,
        width: 8,
        classes: 3,
    };
    let mut model = Model::new(spec, 41).map_err(es)?;
    let batch = random_batch(4100, 8, ext, 3);
    let (_, grads) = model.backward(&batch).map_err(es)?;
    let analytic: Vec<Vec<f64>> = grads.flat().iter().map(|s| s.to_vec()).collect();
    let gmax = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |a, &g| a.max(g.abs()));
    // Entries far below the tensor's own scale are compared on that
    // scale instead of their own, so a vanishing gradient cannot inflate
    // the relative error through division by almost zero.
    let floor = 1e-3 * gmax;
    // Small enough that no hidden unit's preactivation sign flips inside
    // the difference interval on this batch; the secant is only a valid
    // gradient oracle while the function stays smooth across it.
    let step = 1e-5f32;
    // The probe evaluates the double-precision forward of the same
    // parameters: certifying 1e-4 agreement needs an oracle whose own
    // noise sits well below that, and the single-precision loss moves by
    // about one ulp of the logits per probe, which divided by the step
    // would already exceed the tolerance on small-gradient entries.

    let n_tensors = model.param_tensors().len();
    if n_tensors != analytic.len() {
        return Err("gradient tensors do not match parameter tensors".into());
    }
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for t in 0..n_tensors {
        let len = model.param_tensors()[t].len();
        if len != analytic[t].len() {
            return Err(format!("tensor {t} length mismatch"));
        }
        for k in 0..len {
            let w0 = model.param_tensors()[t][k];
            let wp = w0 + step;
            let wm = w0 - step;
            model.param_tensors_mut()[t][k] = wp;
            let lp = model.loss_batch_f64(&batch).map_err(es)?;
            model.param_tensors_mut()[t][k] = wm;
            let lm = model.loss_batch_f64(&batch).map_err(es)?;
            model.param_tensors_mut()[t][k] = w0;
            let fd = (lp - lm) / (wp as f64 - wm as f64);
            let g = analytic[t][k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    if max_rel > 1e-4 {
        return Err(format!(
            "worst relative disagreement {max_rel:.3e} over {checked} parameters exceeds 1e-4"
        ));
    }
    Ok(format!(
        "all {checked} parameters agree with central differences; worst relative error {max_rel:.3e}"
    ))
}

/// Every batch spends exactly 1 + 2M - cache_hits forward evaluations,
/// and the wall-clock cost of adaptation with two operators stays within
/// sane bounds of the static baseline.
fn criterion_budget_and_overhead() -> Result<String, String> {
    // Per-batch accounting over a full run with the full operator set,
    // so degenerate parameters and cache hits both occur.
    let data = DatasetSpec {
        classes: 5,
        height: 16,
        width: 16,
        train_count: 512,
        test_count: 16,
        seed: 55,
        jitter: 1.0,
        ..Default::default()
    };
    let acfg = AdaptConfig::default();
    let audits = audited_training_run(&data, Arch::MlpS, &acfg, 2, 2, 32, 19)?;
    let total = audits.len();
    for (i, a) in audits.iter().enumerate() {
        if a.counted != a.reported || a.reported != a.expected {
            return Err(format!(
                "batch {i}: model counted {} forwards, the step reported {}, the budget says {}",
                a.counted, a.reported, a.expected
            ));
        }
    }

    // Wall-clock overhead of the adaptive run against the static one.
    let base = TrainerConfig {
        data: DatasetSpec {
            classes: 5,
            height: 16,
            width: 16,
            train_count: 512,
            test_count: 16,
            seed: 99,
            jitter: 1.0,
            ..Default::default()
        },
        arch: Arch::CnnS,
        optim: OptimConfig {
            lr: 0.05,
            ..Default::default()
        },
        adapt: AdaptConfig {
            epsilon: 2,
            ..Default::default()
        },
        n_ops: 2,
        epochs: 2,
        batch_size: 32,
        seed: 3,
        eval_every: 0,
        timing: false,
        ops: Some(vec![OpKind::Cutout]),
    };
    let started = Instant::now();
    train(&base).map_err(es)?;
    let adaptive_s = started.elapsed().as_secs_f64();

    let mut static_cfg = base.clone();
    static_cfg.adapt.strategy = Strategy::Disabled;
    let started = Instant::now();
    train(&static_cfg).map_err(es)?;
    let static_s = started.elapsed().as_secs_f64();

    let ratio = adaptive_s / static_s;
    if !(2.0..=8.0).contains(&ratio) {
        return Err(format!(
            "adaptive overhead {ratio:.2}x (adaptive {adaptive_s:.2}s, static {static_s:.2}s) left the 2x..8x band"
        ));
    }
    Ok(format!(
        "budget identity held on {total}/{total} batches; adaptive {adaptive_s:.2}s vs static {static_s:.2}s, overhead {ratio:.2}x"
    ))
}

/// At desk scale, steering the loss up beats random steering, and beats
/// steering down by at least two accuracy points, averaged over five
/// seeds.
fn criterion_strategy_ordering() -> Result<String, String> {
    let base = desk_scale_config();
    let seeds = [0, 1, 2, 3, 4];
    let points = run_ablation(
        &base,
        &[
            Strategy::MaximizeLoss,
            Strategy::MinimizeLoss,
            Strategy::RandomSign,
        ],
        &seeds,
    )
    .map_err(es)?;
    let mean_of = |s: Strategy| {
        let accs: Vec<f64> = points
            .iter()
            .filter(|p| p.strategy == s)
            .map(|p| p.final_test_acc)
            .collect();
        (accs.len(), mean(&accs))
    };
    let (n_up, up) = mean_of(Strategy::MaximizeLoss);
    let (n_down, down) = mean_of(Strategy::MinimizeLoss);
    let (n_rand, rand) = mean_of(Strategy::RandomSign);
    if n_up != seeds.len() || n_down != seeds.len() || n_rand != seeds.len() {
        return Err("the ablation grid is missing cells".into());
    }
    if up < rand {
        return Err(format!(
            "steering up averaged {up:.4}, below random steering at {rand:.4}"
        ));
    }
    if up - down < 0.02 {
        return Err(format!(
            "steering up averaged {up:.4} and steering down {down:.4}; the gap {:.4} is under two points",
            up - down
        ));
    }
    Ok(format!(
        "mean test accuracy over 5 seeds: up {up:.4}, random {rand:.4}, down {down:.4} (gap {:.1} points)",
        (up - down) * 100.0
    ))
}

/// The step-size sweep always carries the static baseline as its first
/// row block, keeps a row block per requested step size, and a one-level
/// step does not fall below the baseline.
fn criterion_sweep_shape() -> Result<String, String> {
    let base = desk_scale_config();
    let seeds: [u64; 5] = [0, 1, 2, 3, 4];
    let requested = [1, 2, 3];
    let points = run_epsilon_sweep(&base, &requested, &seeds).map_err(es)?;

    let want_blocks = [0, 1, 2, 3];
    if points.len() != want_blocks.len() * seeds.len() {
        return Err(format!(
            "sweep produced {} rows, wanted {}",
            points.len(),
            want_blocks.len() * seeds.len()
        ));
    }
    let mut means = Vec::new();
    for (bi, &eps) in want_blocks.iter().enumerate() {
        let block = &points[bi * seeds.len()..(bi + 1) * seeds.len()];
        for (p, &seed) in block.iter().zip(&seeds) {
            if p.epsilon != eps || p.seed != seed {
                return Err(format!(
                    "row for step {eps} seed {seed} is out of place (found step {} seed {})",
                    p.epsilon, p.seed
                ));
            }
            let strategy = p.report.config.get("adapt.strategy").map(String::as_str);
            if eps == 0 && strategy != Some("none") {
                return Err("the baseline block was not trained with adaptation off".into());
            }
        }
        means.push(mean(
            &block.iter().map(|p| p.final_test_acc).collect::<Vec<_>>(),
        ));
    }
    if means[1] < means[0] {
        return Err(format!(
            "a one-level step averaged {:.4}, below the static baseline at {:.4}",
            means[1], means[0]
        ));
    }
    Ok(format!(
        "baseline plus one block per step size, 5 seeds each; mean accuracy {:.4} -> {:.4} -> {:.4} -> {:.4}",
        means[0], means[1], means[2], means[3]
    ))
}

const DETERMINISM_CONFIG: &str = "\
data.source = synthetic
data.classes = 3
data.height = 12
data.width = 12
data.train_count = 96
data.test_count = 30
data.seed = 5
train.epochs = 2
train.batch_size = 32
train.seed = 11
train.eval_every = 1
";

/// Two invocations of the installed binary with the same configuration
/// and seed write byte-identical reports and checkpoints, at one worker
/// and at four.
fn criterion_byte_determinism() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_advaug");
    let dir = tempfile::tempdir().map_err(io_err)?;
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, DETERMINISM_CONFIG).map_err(io_err)?;

    let mut outputs = Vec::new();
    for (i, workers) in ["1", "1", "4", "4"].iter().enumerate() {
        let out_dir = dir.path().join(format!("run{i}"));
        let output = Command::new(bin)
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--workers")
            .arg(workers)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .map_err(io_err)?;
        if !output.status.success() {
            return Err(format!(
                "train run {i} failed: {}",
                String::from_utf8_lossy(&output.stderr)
            ));
        }
        let csv = std::fs::read(out_dir.join("epochs.csv")).map_err(io_err)?;
        let ckpt = std::fs::read(out_dir.join("model.ckpt")).map_err(io_err)?;
        outputs.push((csv, ckpt));
    }
    if outputs[0] != outputs[1] {
        return Err("two one-worker runs differ".into());
    }
    if outputs[2] != outputs[3] {
        return Err("two four-worker runs differ".into());
    }
    if outputs[0] != outputs[2] {
        return Err("one-worker and four-worker runs differ".into());
    }
    Ok(format!(
        "four binary invocations produced one identical report ({} bytes) and checkpoint ({} bytes)",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

/// A saved checkpoint restores to bit-identical forward outputs, and a
/// dataset written to IDX files loads back with an identical checksum.
fn criterion_round_trips() -> Result<String, String> {
    let cfg = TrainerConfig {
        data: DatasetSpec {
            classes: 3,
            height: 12,
            width: 12,
            train_count: 64,
            test_count: 16,
            seed: 21,
            jitter: 1.0,
            ..Default::default()
        },
        arch: Arch::MlpS,
        optim: OptimConfig::default(),
        adapt: AdaptConfig::default(),
        n_ops: 2,
        epochs: 1,
        batch_size: 32,
        seed: 9,
        eval_every: 0,
        timing: false,
        ops: None,
    };
    let out = train(&cfg).map_err(es)?;
    let bytes = checkpoint::to_bytes(&out.model).map_err(es)?;
    let restored = checkpoint::from_bytes(&bytes, "in-memory").map_err(es)?;
    let split = load_dataset(&cfg.data).map_err(es)?;
    let a = out.model.forward(&split.test.images).map_err(es)?;
    let b = restored.forward(&split.test.images).map_err(es)?;
    if a.len() != b.len()
        || !a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    {
        return Err("restored checkpoint produced different forward outputs".into());
    }

    let spec = DatasetSpec {
        classes: 4,
        height: 14,
        width: 14,
        train_count: 128,
        test_count: 32,
        seed: 5,
        jitter: 1.0,
        ..Default::default()
    };
    let generated = load_dataset(&spec).map_err(es)?;
    let dir = tempfile::tempdir().map_err(io_err)?;
    let paths = [
        dir.path().join("train-images.idx"),
        dir.path().join("train-labels.idx"),
        dir.path().join("test-images.idx"),
        dir.path().join("test-labels.idx"),
    ];
    write_idx(&generated.train, &paths[0], &paths[1]).map_err(es)?;
    write_idx(&generated.test, &paths[2], &paths[3]).map_err(es)?;
    let train_back = load_idx(&paths[0], &paths[1], spec.classes).map_err(es)?;
    let test_back = load_idx(&paths[2], &paths[3], spec.classes).map_err(es)?;
    if train_back.checksum() != generated.train.checksum()
        || test_back.checksum() != generated.test.checksum()
    {
        return Err("IDX files loaded back with a different checksum".into());
    }
    Ok(format!(
        "checkpoint restores {} forward outputs bit for bit; IDX round trip preserves both split checksums",
        a.len()
    ))
}

#[test]
fn acceptance_criteria() {
    type Check = fn() -> Result<String, String>;
    let checks: [(&str, f64, Check); 9] = [
        (
            "gradient probe is exact and reflects at the lattice edge",
            1.0,
            criterion_gradient_probe,
        ),
        (
            "selection matches an exhaustive rescoring",
            30.0,
            criterion_selection_exhaustive,
        ),
        (
            "steering up never selects below the base loss",
            300.0,
            criterion_never_below_base,
        ),
        (
            "analytic gradients match central finite differences",
            30.0,
            criterion_backprop_matches_fd,
        ),
        (
            "forward budget holds per batch and overhead stays in band",
            600.0,
            criterion_budget_and_overhead,
        ),
        (
            "strategy ordering separates at desk scale",
            1800.0,
            criterion_strategy_ordering,
        ),
        (
            "step-size sweep keeps its layout and beats the baseline",
            3600.0,
            criterion_sweep_shape,
        ),
        (
            "reruns are byte-identical across worker counts",
            600.0,
            criterion_byte_determinism,
        ),
        (
            "checkpoints and datasets round-trip exactly",
            60.0,
            criterion_round_trips,
        ),
    ];

    let mut failures = Vec::new();
    for (i, (name, budget, check)) in checks.iter().enumerate() {
        let n = i + 1;
        let started = Instant::now();
        let outcome = check();
        let elapsed = started.elapsed().as_secs_f64();
        let in_budget = elapsed <= *budget;
        let verdict = if outcome.is_ok() && in_budget {
            "PASS"
        } else {
            "FAIL"
        };
        let detail = match &outcome {
            Ok(d) => d.clone(),
            Err(d) => d.clone(),
        };
        let overrun = if in_budget {
            String::new()
        } else {
            format!(" [exceeded the {budget:.0}s budget]")
        };
        // Written straight to the process stdout so the checklist shows up
        // in a plain `cargo test` run instead of being swallowed by the
        // harness's output capture.
        use std::io::Write;
        let _ = writeln!(
            std::io::stdout(),
            "criterion {n} {verdict} ({elapsed:.1}s) {name}: {detail}{overrun}"
        );
        if verdict == "FAIL" {
            failures.push(n);
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance criteria {failures:?} failed; see the verdict lines above"
    );
}
