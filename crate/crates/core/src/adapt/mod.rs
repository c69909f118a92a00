//! Per-batch adversarial adaptation of augmentation parameters.
//!
//! The training loop hands this module a freshly sampled pipeline and a
//! way to score pipelines (train loss on the current batch). One adapt
//! step probes each adaptable lattice parameter with a finite difference,
//! turns the probe into a sign, proposes one single-parameter candidate
//! per probe, and picks the candidate the strategy prefers. Every loss
//! evaluation flows through a per-step cache, so repeated pipelines
//! (candidate equals probe, candidate equals base) cost nothing and the
//! forward budget is exactly `1 + 2M - cache_hits` for M adaptable
//! parameters.
//!
//! Probes reflect off lattice bounds (the step flips sign rather than
//! shrinking), while proposed updates clamp. A parameter whose lattice
//! has a single level cannot be probed at all; it contributes a zero
//! gradient and is booked as a cache hit so the budget identity stays
//! exact.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::augment::{adaptable_params, Extent, ParamLocator, Pipeline};
use crate::error::{Error, Result};
use crate::rng::substream;

/// What the adapted pipeline should do to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Step each parameter toward higher loss and keep the worst candidate.
    MaximizeLoss,
    /// Step toward lower loss and keep the easiest candidate.
    MinimizeLoss,
    /// Step in random directions and keep a random candidate; the control
    /// arm that separates "adversarial" from "any perturbation at all".
    RandomSign,
    /// No adaptation: the sampled pipeline is used as-is.
    Disabled,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::MaximizeLoss => "maximize",
            Strategy::MinimizeLoss => "minimize",
            Strategy::RandomSign => "random",
            Strategy::Disabled => "none",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximize" => Ok(Strategy::MaximizeLoss),
            "minimize" => Ok(Strategy::MinimizeLoss),
            "random" => Ok(Strategy::RandomSign),
            "none" => Ok(Strategy::Disabled),
            other => Err(Error::Config(format!(
                "unknown adaptation strategy '{other}' \
                 (expected maximize, minimize, random, or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Probe step on the lattice, in levels.
    pub delta: i32,
    /// Update step on the lattice, in levels.
    pub epsilon: i32,
    pub strategy: Strategy,
    /// When true the unmodified pipeline competes in the selection.
    pub include_original: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            delta: 1,
            epsilon: 1,
            strategy: Strategy::MaximizeLoss,
            include_original: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 1 {
            return Err(Error::Config(format!(
                "probe step must be at least 1 level, got {}",
                self.delta
            )));
        }
        if self.epsilon < 0 {
            return Err(Error::Config(format!(
                "update step must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Anything that can score a pipeline. Implementations must be safe to
/// call from several threads at once; the counter is a running total of
/// scoring calls actually performed.
pub trait LossEvaluator: Sync {
    fn loss(&self, pipeline: &Pipeline) -> Result<f64>;
    fn forward_evals(&self) -> u64;
}

/// Memoizing wrapper around an evaluator, scoped to one adapt step.
///
/// Within a step, concurrent misses are always for pairwise-distinct
/// pipelines (probes differ from each other and from the base at distinct
/// parameters, and any candidate that coincides with a probe or the base
/// is already cached by then), so no pipeline is ever scored twice and
/// the hit count is independent of scheduling.
pub struct EvalCache<'a> {
    inner: &'a dyn LossEvaluator,
    map: Mutex<HashMap<Pipeline, f64>>,
    hits: AtomicU64,
}

impl<'a> EvalCache<'a> {
    pub fn new(inner: &'a dyn LossEvaluator) -> Self {
        EvalCache {
            inner,
            map: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Book a saved evaluation that never reached the map (degenerate
    /// single-level probes).
    fn add_hits(&self, n: u64) {
        self.hits.fetch_add(n, Ordering::Relaxed);
    }
}

impl LossEvaluator for EvalCache<'_> {
    fn loss(&self, pipeline: &Pipeline) -> Result<f64> {
        if let Some(v) = self.map.lock().expect("cache poisoned").get(pipeline) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*v);
        }
        let v = self.inner.loss(pipeline)?;
        self.map
            .lock()
            .expect("cache poisoned")
            .insert(pipeline.clone(), v);
        Ok(v)
    }

    fn forward_evals(&self) -> u64 {
        self.inner.forward_evals()
    }
}

/// Direction noise for the random-sign strategy. Deterministic
/// implementations key their draws on the parameter location.
pub trait SignNoise: Sync {
    /// A standard normal draw for this parameter; only its sign is used.
    fn normal(&self, loc: ParamLocator) -> f64;
    /// A uniform index in `0..n` used to pick the surviving candidate.
    fn pick(&self, n: usize) -> usize;
}

/// Noise derived from named substreams of the run's master seed, so a
/// random-sign run is reproducible and independent of evaluation order.
pub struct SubstreamNoise {
    pub master: u64,
    pub epoch: u64,
    pub batch: u64,
}

impl SignNoise for SubstreamNoise {
    fn normal(&self, loc: ParamLocator) -> f64 {
        let mut rng = substream(
            self.master,
            "random-sign",
            &[
                self.epoch,
                self.batch,
                loc.op_index as u64,
                loc.param_index as u64,
            ],
        );
        rng.sample(StandardNormal)
    }

    fn pick(&self, n: usize) -> usize {
        let mut rng = substream(self.master, "random-pick", &[self.epoch, self.batch]);
        rng.gen_range(0..n)
    }
}

/// Fixed noise for tests: per-parameter normals with a default, and a
/// constant pick index.
pub struct FixedNoise {
    pub normals: HashMap<(usize, usize), f64>,
    pub default_normal: f64,
    pub pick: usize,
}

impl Default for FixedNoise {
    fn default() -> Self {
        FixedNoise {
            normals: HashMap::new(),
            default_normal: 1.0,
            pick: 0,
        }
    }
}

impl SignNoise for FixedNoise {
    fn normal(&self, loc: ParamLocator) -> f64 {
        *self
            .normals
            .get(&(loc.op_index, loc.param_index))
            .unwrap_or(&self.default_normal)
    }

    fn pick(&self, _n: usize) -> usize {
        self.pick
    }
}

/// One finite-difference probe of a single lattice parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub loc: ParamLocator,
    /// (perturbed - base) / delta_used; zero for degenerate parameters.
    pub value: f64,
    pub base_loss: f64,
    pub perturbed_loss: f64,
    /// Signed probe actually taken: +delta, -delta after reflecting off a
    /// bound, or 0 when the lattice admits no probe at all.
    pub delta_used: i32,
}

/// Probe one parameter. The step reflects off the lattice bounds so its
/// magnitude is preserved; a parameter that cannot move in either
/// direction yields a zero gradient without consuming an evaluation.
pub fn estimate_gradient(
    evaluator: &dyn LossEvaluator,
    pipeline: &Pipeline,
    loc: ParamLocator,
    base_loss: f64,
    cfg: &AdaptConfig,
    ext: Extent,
) -> Result<GradEstimate> {
    let spec = pipeline
        .spec_at(loc, ext)
        .ok_or_else(|| Error::Domain(format!("no parameter at {loc:?}")))?;
    let level = pipeline
        .level_at(loc)
        .ok_or_else(|| Error::Domain(format!("no level at {loc:?}")))?;
    let delta_used = if level + cfg.delta <= spec.max_level {
        cfg.delta
    } else if level - cfg.delta >= spec.min_level {
        -cfg.delta
    } else {
        0
    };
    if delta_used == 0 {
        return Ok(GradEstimate {
            loc,
            value: 0.0,
            base_loss,
            perturbed_loss: base_loss,
            delta_used,
        });
    }
    let perturbed = pipeline.with_level(loc, level + delta_used);
    let perturbed_loss = evaluator.loss(&perturbed)?;
    Ok(GradEstimate {
        loc,
        value: (perturbed_loss - base_loss) / delta_used as f64,
        base_loss,
        perturbed_loss,
        delta_used,
    })
}

fn sign(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// The per-parameter update direction the strategy wants.
fn update_sign(strategy: Strategy, grad: &GradEstimate, noise: &dyn SignNoise) -> i32 {
    match strategy {
        Strategy::MaximizeLoss => sign(grad.value),
        Strategy::MinimizeLoss => -sign(grad.value),
        Strategy::RandomSign => sign(noise.normal(grad.loc)),
        Strategy::Disabled => 0,
    }
}

/// Build one candidate pipeline per probed parameter: the base pipeline
/// with that single level stepped by epsilon in the strategy's direction,
/// clamped to the lattice. A zero sign or a clamp at the boundary can
/// make a candidate identical to the base; it still participates (and is
/// then a guaranteed cache hit).
pub fn propose_candidates(
    pipeline: &Pipeline,
    grads: &[GradEstimate],
    cfg: &AdaptConfig,
    ext: Extent,
    noise: &dyn SignNoise,
) -> Result<Vec<Pipeline>> {
    let mut out = Vec::with_capacity(grads.len());
    for grad in grads {
        let spec = pipeline
            .spec_at(grad.loc, ext)
            .ok_or_else(|| Error::Domain(format!("no parameter at {:?}", grad.loc)))?;
        let level = pipeline
            .level_at(grad.loc)
            .ok_or_else(|| Error::Domain(format!("no level at {:?}", grad.loc)))?;
        let stepped = level + cfg.epsilon * update_sign(cfg.strategy, grad, noise);
        let clamped = stepped.clamp(spec.min_level, spec.max_level);
        out.push(pipeline.with_level(grad.loc, clamped));
    }
    Ok(out)
}

/// Who won the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Base,
    Candidate(usize),
}

/// Pick the surviving pipeline from the candidate losses.
///
/// For the extremal strategies ties go to the earliest candidate in probe
/// order, and the base (when it competes) never wins a tie against a
/// candidate. The random strategy ignores losses entirely and defers to
/// the noise source; the base is not in its urn.
pub fn select_candidate(
    cfg: &AdaptConfig,
    base_loss: f64,
    candidate_losses: &[f64],
    noise: &dyn SignNoise,
) -> Selection {
    if candidate_losses.is_empty() {
        return Selection::Base;
    }
    match cfg.strategy {
        Strategy::MaximizeLoss | Strategy::MinimizeLoss => {
            let better = |a: f64, b: f64| {
                if cfg.strategy == Strategy::MaximizeLoss {
                    a > b
                } else {
                    a < b
                }
            };
            let mut best = 0usize;
            for (i, &l) in candidate_losses.iter().enumerate().skip(1) {
                if better(l, candidate_losses[best]) {
                    best = i;
                }
            }
            if cfg.include_original && better(base_loss, candidate_losses[best]) {
                Selection::Base
            } else {
                Selection::Candidate(best)
            }
        }
        Strategy::RandomSign => Selection::Candidate(noise.pick(candidate_losses.len())),
        Strategy::Disabled => Selection::Base,
    }
}

/// Everything one adapt step produced.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub chosen: Pipeline,
    pub base_loss: f64,
    pub chosen_loss: f64,
    pub gradients: Vec<GradEstimate>,
    pub selection: Selection,
    /// Scoring calls this step actually performed on the evaluator.
    pub forward_evals: u64,
    pub cache_hits: u64,
}

/// Run one full adapt step: score the base pipeline, probe every
/// adaptable parameter (in parallel), propose and score candidates (in
/// parallel), then select. With adaptation disabled this is a single
/// scoring call and nothing else.
pub fn adapt_step(
    evaluator: &dyn LossEvaluator,
    pipeline: &Pipeline,
    cfg: &AdaptConfig,
    ext: Extent,
    noise: &dyn SignNoise,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    pipeline.validate(ext)?;

    if cfg.strategy == Strategy::Disabled {
        let base_loss = evaluator.loss(pipeline)?;
        return Ok(AdaptOutcome {
            chosen: pipeline.clone(),
            base_loss,
            chosen_loss: base_loss,
            gradients: Vec::new(),
            selection: Selection::Base,
            forward_evals: 1,
            cache_hits: 0,
        });
    }

    let evals_before = evaluator.forward_evals();
    let cache = EvalCache::new(evaluator);
    let base_loss = cache.loss(pipeline)?;

    let locs = adaptable_params(pipeline);
    let gradients: Vec<GradEstimate> = locs
        .par_iter()
        .map(|loc| estimate_gradient(&cache, pipeline, *loc, base_loss, cfg, ext))
        .collect::<Result<_>>()?;
    let degenerate = gradients.iter().filter(|g| g.delta_used == 0).count();
    cache.add_hits(degenerate as u64);

    let candidates = propose_candidates(pipeline, &gradients, cfg, ext, noise)?;
    let candidate_losses: Vec<f64> = candidates
        .par_iter()
        .map(|c| cache.loss(c))
        .collect::<Result<_>>()?;

    let selection = select_candidate(cfg, base_loss, &candidate_losses, noise);
    let (chosen, chosen_loss) = match selection {
        Selection::Base => (pipeline.clone(), base_loss),
        Selection::Candidate(i) => (candidates[i].clone(), candidate_losses[i]),
    };

    let forward_evals = evaluator.forward_evals() - evals_before;
    let cache_hits = cache.hits();
    let m = locs.len() as u64;
    assert_eq!(
        forward_evals,
        1 + 2 * m - cache_hits,
        "evaluation budget identity violated (M = {m})"
    );

    Ok(AdaptOutcome {
        chosen,
        base_loss,
        chosen_loss,
        gradients,
        selection,
        forward_evals,
        cache_hits,
    })
}
