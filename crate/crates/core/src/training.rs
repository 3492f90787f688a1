//! Losses, the RMSprop optimizer and the mini-batch training loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};
use crate::params::Parameters;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Squared distance between tag vector and projection.
    Mse,
    /// Negative cosine proximity.
    Cpl,
    /// Cosine margin ranking against a sampled negative lyric.
    Mrl,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Cpl => "cpl",
            LossKind::Mrl => "mrl",
        })
    }
}

fn same_dims(v: &[f64], l: &[f64]) -> Result<()> {
    if v.len() != l.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", v.len(), l.len())));
    }
    Ok(())
}

/// `‖v − l‖²` and its gradient with respect to `l`.
pub fn mse_loss(v: &[f64], l_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_dims(v, l_tilde)?;
    let diff: Vec<f64> = l_tilde.iter().zip(v).map(|(l, v)| l - v).collect();
    let loss = dot(&diff, &diff);
    Ok((loss, diff.into_iter().map(|d| 2.0 * d).collect()))
}

/// Cosine similarity and its gradient with respect to `l`.
fn cosine_with_grad(v: &[f64], l: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_dims(v, l)?;
    let (nv, nl) = (norm(v), norm(l));
    if nv == 0.0 || nl == 0.0 {
        return Err(Error::numeric("cosine of a zero-norm vector"));
    }
    let cos = dot(v, l) / (nv * nl);
    let grad = v
        .iter()
        .zip(l)
        .map(|(vi, li)| vi / (nv * nl) - cos * li / (nl * nl))
        .collect();
    Ok((cos, grad))
}

/// `−cos(v, l)` and its gradient with respect to `l`.
pub fn cosine_loss(v: &[f64], l_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (cos, grad) = cosine_with_grad(v, l_tilde)?;
    Ok((-cos, grad.into_iter().map(|g| -g).collect()))
}

/// Hinge loss `max(0, 1 + cos(v, l⁻) − cos(v, l⁺))` with gradients for the
/// positive and the negative projection.
pub fn margin_loss(v: &[f64], l_pos: &[f64], l_neg: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (cp, gp) = cosine_with_grad(v, l_pos)?;
    let (cn, gn) = cosine_with_grad(v, l_neg)?;
    let loss = 1.0 + cn - cp;
    if loss <= 0.0 {
        return Ok((0.0, vec![0.0; l_pos.len()], vec![0.0; l_neg.len()]));
    }
    Ok((loss, gp.into_iter().map(|g| -g).collect(), gn))
}

/// Hinge loss on raw relevance scores: `max(0, 1 + s⁻ − s⁺)`.
pub fn score_margin_loss(s_pos: f64, s_neg: f64) -> (f64, f64, f64) {
    let loss = 1.0 + s_neg - s_pos;
    if loss <= 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        (loss, -1.0, 1.0)
    }
}

/// Per-parameter squared-gradient averages plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmspropState {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
    pub accumulators: Vec<(String, Matrix)>,
}

impl RmspropState {
    pub fn new<P: Parameters>(params: &P, learning_rate: f64, rho: f64, eps: f64) -> Self {
        let accumulators = params
            .blocks()
            .into_iter()
            .map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols())))
            .collect();
        RmspropState {
            learning_rate,
            rho,
            eps,
            accumulators,
        }
    }

    /// Applies one update. Gradients are checked before anything changes.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grad_blocks = grads.blocks();
        if grad_blocks.len() != self.accumulators.len() {
            return Err(Error::shape(format!(
                "{} gradient blocks for {} accumulators",
                grad_blocks.len(),
                self.accumulators.len()
            )));
        }
        for ((name, g), (acc_name, acc)) in grad_blocks.iter().zip(&self.accumulators) {
            if name != acc_name || g.shape() != acc.shape() {
                return Err(Error::shape(format!("gradient block {name} does not match {acc_name}")));
            }
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for {name}")));
            }
        }
        let (lr, rho, eps) = (self.learning_rate, self.rho, self.eps);
        for (((_, p), (_, g)), (_, acc)) in params
            .blocks_mut()
            .into_iter()
            .zip(grad_blocks)
            .zip(self.accumulators.iter_mut())
        {
            for ((p, g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *a = rho * *a + (1.0 - rho) * g * g;
                *p -= lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mse,
            batch_size: 100,
            epochs: 10,
            seed: 0,
            learning_rate: 0.001,
            rho: 0.9,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let finite = [self.learning_rate, self.rho, self.eps].iter().all(|v| v.is_finite());
        if !finite || self.learning_rate < 0.0 || !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Something that can be trained pair by pair.
///
/// Pair `i` has a positive lyric `positive_lyric(i)`; under the margin loss
/// a negative lyric index is drawn from the other lyrics.
pub trait Objective: Sync {
    type Params: Parameters + Send + Sync;

    fn num_pairs(&self) -> usize;

    fn num_lyrics(&self) -> usize;

    fn positive_lyric(&self, pair: usize) -> usize;

    /// Loss of one pair; gradients are added to `grads`.
    fn pair_loss(
        &self,
        params: &Self::Params,
        pair: usize,
        negative: Option<usize>,
        grads: &mut Self::Params,
    ) -> Result<f64>;
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sum of per-pair losses over the epoch.
    pub loss: f64,
    /// Summed loss of the final batch of the epoch.
    pub last_batch_loss: f64,
    #[serde(skip)]
    pub wallclock_ms: u128,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\t{:.8}\t{}", self.epoch, self.loss, self.wallclock_ms)
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub optimizer: RmspropState,
    pub losses: Vec<f64>,
}

fn sample_negative(rng: &mut Rng, positive: usize, n: usize) -> usize {
    let j = rng.below(n - 1);
    if j >= positive {
        j + 1
    } else {
        j
    }
}

/// Scales `grads` so that its global norm is at most `ceiling`.
pub fn clip_gradients<P: Parameters>(grads: &mut P, ceiling: f64) -> f64 {
    let n = grads.global_norm();
    if n > ceiling {
        grads.scale_all(ceiling / n);
    }
    n
}

/// Runs `config.epochs` further epochs. Each epoch shuffles the pairs with
/// a generator derived from the seed and the epoch number, so a resumed
/// run follows the same trajectory as an uninterrupted one.
pub fn train<O: Objective>(
    objective: &O,
    params: &mut O::Params,
    config: &TrainConfig,
    resume: Option<TrainingState>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingState> {
    config.validate()?;
    let n = objective.num_pairs();
    if n == 0 {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if config.loss == LossKind::Mrl && objective.num_lyrics() < 2 {
        return Err(Error::Parameter("margin loss needs at least two training lyrics".into()));
    }
    let mut state = match resume {
        Some(mut s) => {
            s.optimizer.learning_rate = config.learning_rate;
            s.optimizer.rho = config.rho;
            s.optimizer.eps = config.eps;
            s
        }
        None => TrainingState {
            epochs_done: 0,
            optimizer: RmspropState::new(params, config.learning_rate, config.rho, config.eps),
            losses: Vec::new(),
        },
    };
    let first = state.epochs_done;
    for epoch in first..first + config.epochs {
        let started = Instant::now();
        let mut rng = Rng::derive(config.seed, epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let negatives: Vec<Option<usize>> = order
            .iter()
            .map(|&p| {
                (config.loss == LossKind::Mrl)
                    .then(|| sample_negative(&mut rng, objective.positive_lyric(p), objective.num_lyrics()))
            })
            .collect();
        let mut epoch_loss = 0.0;
        let mut batch_loss = 0.0;
        for (b, (pairs, negs)) in order
            .chunks(config.batch_size)
            .zip(negatives.chunks(config.batch_size))
            .enumerate()
        {
            let context = |e: Error| e.with_context(&format!("epoch {}, batch {}", epoch + 1, b + 1));
            let current: &O::Params = params;
            let per_pair: Vec<Result<(f64, O::Params)>> = pairs
                .par_iter()
                .zip(negs.par_iter())
                .map(|(&p, &neg)| {
                    let mut g = current.zeros_like();
                    let loss = objective.pair_loss(current, p, neg, &mut g)?;
                    Ok((loss, g))
                })
                .collect();
            let mut grads = params.zeros_like();
            batch_loss = 0.0;
            for item in per_pair {
                let (loss, g) = item.map_err(context)?;
                batch_loss += loss;
                grads.accumulate(&g);
            }
            if !batch_loss.is_finite() {
                return Err(context(Error::numeric("non-finite batch loss")));
            }
            if let Some(ceiling) = config.clip_norm {
                clip_gradients(&mut grads, ceiling);
            }
            state.optimizer.step(params, &grads).map_err(context)?;
            epoch_loss += batch_loss;
        }
        state.epochs_done = epoch + 1;
        state.losses.push(epoch_loss);
        on_epoch(&EpochLog {
            epoch: epoch + 1,
            loss: epoch_loss,
            last_batch_loss: batch_loss,
            wallclock_ms: started.elapsed().as_millis(),
        });
    }
    Ok(state)
}
