//! The training loop: sample a pipeline, adapt it against the model,
//! train on what survives.
//!
//! Every random decision draws from a named substream of the master seed
//! (model init, epoch shuffles, per-batch pipeline sampling, random-sign
//! noise), so a run is a pure function of its configuration. The loop
//! also audits itself: the per-step evaluation budget identity is checked
//! inside `adapt_step`, and at the end of the run every forward pass must
//! be attributable to either adaptation or test evaluation.

use std::time::Instant;

use crate::adapt::{adapt_step, LossEvaluator, Strategy, SubstreamNoise};
use crate::augment::{apply_pipeline, sample_pipeline, OpKind, Pipeline, Registry};
use crate::config::TrainerConfig;
use crate::data::{batches, load_dataset, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec, Optimizer};
use crate::report::{render_csv, EpochRow, RunReport, REPORT_SCHEMA_VERSION};
use crate::rng::substream;

/// Scores a pipeline as the model's mean loss on one augmented batch.
pub struct BatchLossEvaluator<'a> {
    pub model: &'a Model,
    pub batch: &'a ImageBatch,
}

impl LossEvaluator for BatchLossEvaluator<'_> {
    fn loss(&self, pipeline: &Pipeline) -> Result<f64> {
        let augmented = apply_pipeline(pipeline, self.batch)?;
        self.model.loss_batch(&augmented)
    }

    fn forward_evals(&self) -> u64 {
        self.model.forward_count()
    }
}

/// A finished training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
    /// Per-epoch table, byte-deterministic unless timing was requested.
    pub csv: String,
}

/// Train a model from scratch under `cfg`.
pub fn train(cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let wall_start = Instant::now();

    let split = load_dataset(&cfg.data)?;
    let ext = split.train.extent();
    let spec = ModelSpec {
        arch: cfg.arch,
        channels: split.train.channels(),
        height: ext.height,
        width: ext.width,
        classes: cfg.data.classes,
    };
    let mut model = Model::new(spec, cfg.seed)?;

    let kinds = cfg.ops.clone().unwrap_or_else(|| OpKind::ALL.to_vec());
    let registry = Registry::new(kinds, ext)?;

    let batches_per_epoch = batches(&split.train, cfg.batch_size, cfg.seed, 0)?.batch_count();
    let total_steps = cfg.epochs as u64 * batches_per_epoch as u64;
    let mut optimizer = Optimizer::new(cfg.optim.clone(), &model, total_steps)?;

    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs as usize);
    let mut adapt_forwards: u64 = 0;
    let mut eval_forwards: u64 = 0;
    let mut cache_hits_total: u64 = 0;
    let mut global_batch: u64 = 0;
    let mut final_train_loss = f64::NAN;
    let mut last_acc: Option<f64> = None;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr_epoch = optimizer.current_lr();
        let mut loss_sum = 0.0f64;
        let mut gap_sum = 0.0f64;
        let mut batch_count = 0usize;

        for (b, batch) in batches(&split.train, cfg.batch_size, cfg.seed, epoch as u64)?.enumerate()
        {
            let mut sample_rng =
                substream(cfg.seed, "pipeline-sample", &[epoch as u64, b as u64]);
            let pipeline = sample_pipeline(&mut sample_rng, &registry, cfg.n_ops)?;

            let evaluator = BatchLossEvaluator {
                model: &model,
                batch: &batch,
            };
            let noise = SubstreamNoise {
                master: cfg.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let outcome = adapt_step(&evaluator, &pipeline, &cfg.adapt, ext, &noise)?;

            if cfg.adapt.strategy == Strategy::MaximizeLoss
                && cfg.adapt.include_original
                && outcome.chosen_loss < outcome.base_loss
            {
                return Err(Error::Training {
                    batch_index: global_batch,
                    detail: format!(
                        "selection regressed: chose loss {} below the unadapted {} for {}",
                        outcome.chosen_loss, outcome.base_loss, outcome.chosen
                    ),
                });
            }
            adapt_forwards += outcome.forward_evals;
            cache_hits_total += outcome.cache_hits;

            let augmented = apply_pipeline(&outcome.chosen, &batch)?;
            let (loss, grads) = model.backward(&augmented)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    batch_index: global_batch,
                    detail: format!(
                        "non-finite training loss {loss}; pipeline was {}",
                        outcome.chosen
                    ),
                });
            }
            // The adapt step scored this exact pipeline moments ago with
            // the same parameters; a real disagreement means a bug.
            if (loss - outcome.chosen_loss).abs() > 1e-9 * loss.abs().max(1.0) {
                return Err(Error::Training {
                    batch_index: global_batch,
                    detail: format!(
                        "loss mismatch: backward saw {loss}, selection saw {}",
                        outcome.chosen_loss
                    ),
                });
            }
            optimizer.step(&mut model, &grads)?;

            loss_sum += loss;
            gap_sum += outcome.chosen_loss - outcome.base_loss;
            batch_count += 1;
            global_batch += 1;
        }

        let train_loss = loss_sum / batch_count as f64;
        final_train_loss = train_loss;
        let is_last = epoch + 1 == cfg.epochs;
        let do_eval = is_last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let test_acc = if do_eval {
            eval_forwards += 1;
            let acc = model.accuracy(&split.test.images, &split.test.labels)?;
            last_acc = Some(acc);
            Some(acc)
        } else {
            None
        };

        rows.push(EpochRow {
            epoch,
            train_loss,
            loss_gap: gap_sum / batch_count as f64,
            test_acc,
            lr: lr_epoch,
            fwd: model.forward_count(),
            bwd: model.backward_count(),
            cache_hits: cache_hits_total,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }

    let forwards = model.forward_count();
    if forwards != adapt_forwards + eval_forwards {
        return Err(Error::Training {
            batch_index: global_batch,
            detail: format!(
                "forward-pass audit failed: model counted {forwards}, \
                 adaptation accounts for {adapt_forwards} and evaluation for {eval_forwards}"
            ),
        });
    }

    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.to_pairs(),
        config_hash: format!("{:016x}", cfg.config_hash()),
        dataset_checksum: format!(
            "{:016x}-{:016x}",
            split.train.checksum(),
            split.test.checksum()
        ),
        epochs: rows.clone(),
        final_train_loss,
        final_test_acc: last_acc.expect("the final epoch always evaluates"),
        total_forward_evals: forwards,
        total_backward_evals: model.backward_count(),
        total_cache_hits: cache_hits_total,
        wall_seconds: wall_start.elapsed().as_secs_f64(),
        model_checksum: format!("{:016x}", model.checksum()),
    };
    let csv = render_csv(&rows, cfg.timing);

    Ok(TrainOutcome { report, model, csv })
}

/// Top-1 accuracy and mean cross-entropy of a model on a dataset, with
/// no augmentation applied.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    let accuracy = model.accuracy(&dataset.images, &dataset.labels)?;
    let probe = ImageBatch::new(dataset.images.clone(), dataset.labels.clone())?;
    let mean_loss = model.loss_batch(&probe)?;
    Ok((accuracy, mean_loss))
}

/// One cell of an update-step sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// Step size of the run; zero marks the no-adaptation baseline.
    pub epsilon: i32,
    pub seed: u64,
    pub final_test_acc: f64,
    pub final_train_loss: f64,
    pub mean_loss_gap: f64,
    pub report: RunReport,
    /// Per-epoch CSV for this run, ready to write to disk.
    pub csv: String,
}

/// Train once per (epsilon, seed) cell, holding everything else fixed.
///
/// The grid always starts with an epsilon-0 row trained with adaptation
/// off, the reference the step sizes are compared against; the requested
/// step sizes must therefore all be positive. Every row reuses the same
/// seed list so the comparison is paired.
pub fn run_epsilon_sweep(
    base: &TrainerConfig,
    epsilons: &[i32],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if epsilons.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one epsilon and one seed".into(),
        ));
    }
    if let Some(bad) = epsilons.iter().find(|&&e| e < 1) {
        return Err(Error::Config(format!(
            "sweep step sizes must be positive, got {bad}; \
             the zero row is always included as the no-adaptation baseline"
        )));
    }
    let mut out = Vec::with_capacity((1 + epsilons.len()) * seeds.len());
    for &epsilon in std::iter::once(&0).chain(epsilons) {
        for &seed in seeds {
            let mut cfg = base.clone();
            if epsilon == 0 {
                cfg.adapt.strategy = Strategy::Disabled;
            } else {
                cfg.adapt.epsilon = epsilon;
            }
            cfg.seed = seed;
            let run = train(&cfg)?;
            let mean_gap = run.report.epochs.iter().map(|r| r.loss_gap).sum::<f64>()
                / run.report.epochs.len() as f64;
            out.push(SweepPoint {
                epsilon,
                seed,
                final_test_acc: run.report.final_test_acc,
                final_train_loss: run.report.final_train_loss,
                mean_loss_gap: mean_gap,
                report: run.report,
                csv: run.csv,
            });
        }
    }
    Ok(out)
}

/// One cell of a strategy ablation.
#[derive(Debug, Clone)]
pub struct AblationPoint {
    pub strategy: Strategy,
    pub seed: u64,
    pub final_test_acc: f64,
    pub final_train_loss: f64,
    pub report: RunReport,
    /// Per-epoch CSV for this run, ready to write to disk.
    pub csv: String,
}

/// Train once per (strategy, seed) cell, holding everything else fixed.
pub fn run_ablation(
    base: &TrainerConfig,
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<Vec<AblationPoint>> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one strategy and one seed".into(),
        ));
    }
    let mut out = Vec::with_capacity(strategies.len() * seeds.len());
    for &strategy in strategies {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.adapt.strategy = strategy;
            cfg.seed = seed;
            let run = train(&cfg)?;
            out.push(AblationPoint {
                strategy,
                seed,
                final_test_acc: run.report.final_test_acc,
                final_train_loss: run.report.final_train_loss,
                report: run.report,
                csv: run.csv,
            });
        }
    }
    Ok(out)
}
