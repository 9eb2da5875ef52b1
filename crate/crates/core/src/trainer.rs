//! Metric-learning training loop: identity-balanced batches, batch-hard
//! triplets, a combined softmax and triplet objective, and best-checkpoint
//! retention under periodic kNN validation.
//!
//! Identities double as class indices for the classification head, so every
//! training identity must be below the network's `class_count`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloudops::augment_cloud;
use crate::embednet::{backward, embed_batch, forward, ForwardTrace, NetworkParams, ParamGrads};
use crate::error::{Error, Result};
use crate::losses::{batch_hard_mine, combined_loss_grad, LossConfig};
use crate::model::{Gallery, GalleryEntry, IdentityId, PointCloud, Sample};
use crate::openset::knn_predict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// K in P x K batch sampling.
    pub samples_per_identity: usize,
    pub epochs: usize,
    /// Decoupled: applied to weights (not biases) directly, outside the gradient.
    pub weight_decay: f64,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss: LossConfig,
    pub eval_every: usize,
    pub seed: u64,
    /// Jitter std in normalized cloud units; 0 disables jitter.
    pub augment_sigma: f64,
    pub augment_rotation: bool,
    pub knn_k: usize,
    /// Per-identity share of the train side held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 24,
            samples_per_identity: 4,
            epochs: 50,
            weight_decay: 1e-4,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss: LossConfig::default(),
            eval_every: 2,
            seed: 0,
            augment_sigma: 0.02,
            augment_rotation: true,
            knn_k: 5,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.samples_per_identity < 2 || self.batch_size < 2 * self.samples_per_identity {
            return bad("batch_size must hold at least two identities of samples_per_identity >= 2");
        }
        if self.eval_every == 0 || self.knn_k == 0 {
            return bad("eval_every and knn_k must be >= 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.augment_sigma >= 0.0) {
            return bad("weight_decay and augment_sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_epsilon > 0.0)
        {
            return bad("momentum and Adam betas must lie in [0, 1), epsilon > 0");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        self.loss.validate()
    }

    fn identities_per_batch(&self) -> usize {
        self.batch_size / self.samples_per_identity
    }
}

/// Optimizer moments, laid out like the parameter vector.
#[derive(Debug, Clone)]
struct OptimizerState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Parameters plus optimizer state; one exclusive writer per step.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: NetworkParams,
    state: OptimizerState,
    config: TrainConfig,
    decay_mask: Vec<bool>,
}

fn check_classes(params: &NetworkParams, batch: &[&Sample]) -> Result<()> {
    let classes = params.spec().class_count;
    match batch.iter().find(|s| s.identity as usize >= classes) {
        Some(s) => Err(Error::InvalidParam(format!(
            "identity {} has no class slot in a {classes}-class head",
            s.identity
        ))),
        None => Ok(()),
    }
}

/// Loss and upstream gradients of one mined batch. Per-sample gradient
/// buffers hold d loss / d embedding and d loss / d logits.
struct BatchObjective {
    loss: f64,
    d_embedding: Vec<Vec<f64>>,
    d_logits: Vec<Vec<f64>>,
}

fn batch_objective(traces: &[ForwardTrace], labels: &[IdentityId], loss: &LossConfig) -> Result<BatchObjective> {
    let embeddings: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding.clone()).collect();
    let mined = batch_hard_mine(&embeddings, labels)?.mined;
    let mut d_embedding: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; t.embedding.len()]).collect();
    let mut d_logits: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; t.logits.len()]).collect();
    let scale = 1.0 / mined.len() as f64;
    let mut total = 0.0;
    for t in &mined {
        let idx = [t.anchor, t.positive, t.negative];
        let g = combined_loss_grad(
            loss,
            idx.map(|i| traces[i].embedding.as_slice()),
            idx.map(|i| traces[i].logits.as_slice()),
            idx.map(|i| labels[i] as usize),
        )?;
        total += g.loss;
        for (m, &i) in idx.iter().enumerate() {
            for (d, v) in d_embedding[i].iter_mut().zip(&g.embeddings[m]) {
                *d += scale * v;
            }
            for (d, v) in d_logits[i].iter_mut().zip(&g.logits[m]) {
                *d += scale * v;
            }
        }
    }
    Ok(BatchObjective {
        loss: total * scale,
        d_embedding,
        d_logits,
    })
}

fn forward_all(params: &NetworkParams, clouds: &[PointCloud]) -> Result<Vec<ForwardTrace>> {
    clouds.par_iter().map(|c| forward(params, c)).collect()
}

/// Combined loss of a batch without augmentation or parameter updates.
pub fn batch_loss(params: &NetworkParams, batch: &[&Sample], loss: &LossConfig) -> Result<f64> {
    check_classes(params, batch)?;
    let clouds: Vec<PointCloud> = batch.iter().map(|s| s.cloud.clone()).collect();
    let labels: Vec<IdentityId> = batch.iter().map(|s| s.identity).collect();
    let traces = forward_all(params, &clouds)?;
    Ok(batch_objective(&traces, &labels, loss)?.loss)
}

impl Trainer {
    pub fn new(params: NetworkParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = params.param_count();
        let mut decay_mask = vec![false; n];
        for layer in params.layers() {
            decay_mask[layer.weight_range()].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self {
            params,
            state: OptimizerState {
                first: vec![0.0; n],
                second: vec![0.0; n],
                steps: 0,
            },
            config,
            decay_mask,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Augments the batch, mines triplets, backpropagates the mean combined
    /// loss and applies one optimizer update. Returns the batch loss before
    /// the update. `epoch` and `step` only label errors.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &[&Sample], rng: &mut R, epoch: usize, step: usize) -> Result<f64> {
        check_classes(&self.params, batch)?;
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let cfg = &self.config;
        let clouds: Vec<PointCloud> = batch
            .par_iter()
            .zip(&seeds)
            .map(|(s, &seed)| {
                let mut local = ChaCha8Rng::seed_from_u64(seed);
                if cfg.augment_rotation {
                    augment_cloud(&s.cloud, &mut local, cfg.augment_sigma)
                } else {
                    crate::cloudops::augment_with_angle(&s.cloud, &mut local, cfg.augment_sigma, 0.0)
                }
            })
            .collect();
        let labels: Vec<IdentityId> = batch.iter().map(|s| s.identity).collect();
        let traces = forward_all(&self.params, &clouds).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, step },
            other => other,
        })?;
        let objective = batch_objective(&traces, &labels, &cfg.loss)?;
        if !objective.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        let per_sample: Vec<ParamGrads> = traces
            .par_iter()
            .zip(objective.d_embedding.par_iter().zip(&objective.d_logits))
            .map(|(t, (de, dl))| backward(&self.params, t, de, dl).map(|b| b.params))
            .collect::<Result<_>>()?;
        // Sequential reduction keeps the sum independent of thread count.
        let mut grads = ParamGrads::zeros_like(&self.params);
        for g in &per_sample {
            grads.add_assign(g);
        }
        if grads.0.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        self.apply(&grads.0);
        Ok(objective.loss)
    }

    fn apply(&mut self, grads: &[f64]) {
        let cfg = &self.config;
        let lr = cfg.learning_rate;
        let st = &mut self.state;
        st.steps += 1;
        let values = self.params.values_mut();
        match cfg.optimizer {
            OptimizerKind::SgdMomentum => {
                for i in 0..values.len() {
                    st.first[i] = cfg.momentum * st.first[i] + grads[i];
                    values[i] -= lr * st.first[i];
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - cfg.adam_beta1.powf(st.steps as f64);
                let c2 = 1.0 - cfg.adam_beta2.powf(st.steps as f64);
                for i in 0..values.len() {
                    let g = grads[i];
                    st.first[i] = cfg.adam_beta1 * st.first[i] + (1.0 - cfg.adam_beta1) * g;
                    st.second[i] = cfg.adam_beta2 * st.second[i] + (1.0 - cfg.adam_beta2) * g * g;
                    let m = st.first[i] / c1;
                    let v = st.second[i] / c2;
                    values[i] -= lr * m / (v.sqrt() + cfg.adam_epsilon);
                }
            }
        }
        if cfg.weight_decay > 0.0 {
            let shrink = lr * cfg.weight_decay;
            for (v, _) in values.iter_mut().zip(&self.decay_mask).filter(|(_, &m)| m) {
                *v -= shrink * *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean batch loss of each completed epoch, epoch 1 first.
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    /// Evaluations that improved on every earlier one.
    pub checkpoints: Vec<EvalRecord>,
    pub best_epoch: Option<usize>,
    pub best_accuracy: Option<f64>,
}

impl TrainHistory {
    /// `epoch,loss,val_accuracy`; accuracy is blank for unevaluated epochs.
    pub fn to_csv(&self) -> String {
        let evals: BTreeMap<usize, f64> = self.evals.iter().map(|e| (e.epoch, e.accuracy)).collect();
        let mut out = String::from("epoch,loss,val_accuracy\n");
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            let epoch = i + 1;
            let acc = evals.get(&epoch).map_or(String::new(), |a| format!("{a}"));
            let _ = writeln!(out, "{epoch},{loss},{acc}");
        }
        out
    }
}

/// Splits `samples` into (train, validation), holding out
/// `round(fraction * count)` samples per identity but never an identity's last one.
pub fn carve_validation(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_identity: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_identity.entry(s.identity).or_default().push(i);
    }
    let mut held = vec![false; samples.len()];
    for members in by_identity.values_mut() {
        let count = ((fraction * members.len() as f64).round() as usize).min(members.len() - 1);
        members.shuffle(&mut rng);
        for &i in &members[..count] {
            held[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, h) in samples.iter().zip(held) {
        if h { val.push(s.clone()) } else { train.push(s.clone()) }
    }
    (train, val)
}

/// Identity-balanced P x K batches covering roughly one pass over the data.
/// Identities are drawn in shuffled rounds; each contributes up to K samples
/// from its own reshuffled queue.
pub fn epoch_batches<R: Rng + ?Sized>(samples: &[Sample], config: &TrainConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut pools: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        pools.entry(s.identity).or_default().push(i);
    }
    pools.retain(|id, members| {
        if members.len() < 2 {
            log::warn!("identity {id} has a single training sample and is left out of batches");
            false
        } else {
            true
        }
    });
    if pools.len() < 2 {
        return Err(Error::InvalidParam(
            "batch construction needs two identities with at least two samples each".into(),
        ));
    }
    let usable: usize = pools.values().map(Vec::len).sum();
    let batch_count = usable.div_ceil(config.batch_size).max(1);
    let p = config.identities_per_batch().min(pools.len());
    let k = config.samples_per_identity;

    let mut queues: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
    // Popped from the back.
    let mut order: Vec<IdentityId> = Vec::new();
    let mut batches = Vec::with_capacity(batch_count);
    for _ in 0..batch_count {
        let mut batch = Vec::with_capacity(p * k);
        let mut chosen: Vec<IdentityId> = Vec::with_capacity(p);
        let mut deferred: Vec<IdentityId> = Vec::new();
        while chosen.len() < p {
            if order.is_empty() {
                order = pools.keys().copied().collect();
                order.shuffle(rng);
            }
            let id = order.pop().expect("refilled");
            if chosen.contains(&id) {
                deferred.push(id);
                continue;
            }
            chosen.push(id);
            let pool = &pools[&id];
            let queue = queues.entry(id).or_default();
            let mut slot: Vec<usize> = Vec::with_capacity(k);
            while slot.len() < k.min(pool.len()) {
                if queue.is_empty() {
                    *queue = pool.clone();
                    queue.shuffle(rng);
                }
                let next = queue.pop().expect("refilled");
                if !slot.contains(&next) {
                    slot.push(next);
                }
            }
            batch.extend(slot);
        }
        order.extend(deferred.into_iter().rev());
        batches.push(batch);
    }
    Ok(batches)
}

fn knn_accuracy(params: &NetworkParams, gallery: &[Sample], queries: &[Sample], k: usize) -> Result<f64> {
    let g_clouds: Vec<PointCloud> = gallery.iter().map(|s| s.cloud.clone()).collect();
    let q_clouds: Vec<PointCloud> = queries.iter().map(|s| s.cloud.clone()).collect();
    let entries = embed_batch(params, &g_clouds)?
        .into_iter()
        .zip(gallery)
        .map(|(embedding, s)| GalleryEntry {
            embedding,
            identity: s.identity,
            sample_id: Some(s.id.clone()),
        })
        .collect();
    let gallery = Gallery::new(entries, k.min(gallery.len()))?;
    let mut correct = 0usize;
    for (e, s) in embed_batch(params, &q_clouds)?.iter().zip(queries) {
        if knn_predict(&gallery, e)?.identity == s.identity {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best evaluation, or the initial ones when no epoch ran.
    pub params: NetworkParams,
    /// Parameters after the final epoch.
    pub last: NetworkParams,
    pub history: TrainHistory,
}

/// [`fit_with`] without a checkpoint hook.
pub fn fit(initial: NetworkParams, train: &[Sample], validation: &[Sample], config: &TrainConfig) -> Result<FitOutcome> {
    fit_with(initial, train, validation, config, |_, _| Ok(()))
}

/// Trains for `config.epochs` epochs and evaluates every `eval_every`
/// epochs and after the last one. `on_improve` sees each parameter set whose
/// validation accuracy beats all earlier evaluations.
pub fn fit_with<F>(
    initial: NetworkParams,
    train: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
    mut on_improve: F,
) -> Result<FitOutcome>
where
    F: FnMut(&NetworkParams, &EvalRecord) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::EmptyInput("training and validation sets must be nonempty".into()));
    }
    let known: std::collections::BTreeSet<IdentityId> = train.iter().map(|s| s.identity).collect();
    if let Some(s) = validation.iter().find(|s| !known.contains(&s.identity)) {
        return Err(Error::InvalidParam(format!(
            "validation identity {} does not occur in the training set",
            s.identity
        )));
    }
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok(FitOutcome {
            last: initial.clone(),
            params: initial,
            history,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(initial.clone(), config.clone())?;
    let mut best = initial;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(train, config, &mut rng)?;
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            total += trainer.step(&batch, &mut rng, epoch, step)?;
        }
        let mean = total / batches.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        history.epoch_losses.push(mean);
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let accuracy = knn_accuracy(trainer.params(), train, validation, config.knn_k)?;
            log::info!("epoch {epoch}: validation accuracy {accuracy:.4}");
            let record = EvalRecord { epoch, accuracy };
            history.evals.push(record);
            if history.best_accuracy.is_none_or(|b| accuracy > b) {
                history.best_accuracy = Some(accuracy);
                history.best_epoch = Some(epoch);
                history.checkpoints.push(record);
                best = trainer.params().clone();
                on_improve(&best, &record)?;
            }
        }
    }
    Ok(FitOutcome {
        params: best,
        last: trainer.into_params(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::{init_network, NetworkSpec};
    use crate::model::SplitTag;
    use rand_distr::{Distribution, Normal};

    fn spec(classes: usize) -> NetworkSpec {
        NetworkSpec {
            point_mlp_channels: vec![8, 16],
            head_widths: vec![16],
            embedding_dim: 8,
            class_count: classes,
            normalize_embedding: true,
            init_seed: 3,
        }
    }

    fn params(classes: usize) -> NetworkParams {
        init_network(&spec(classes), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    /// Identity i stretches a noisy blob along its own axis.
    fn toy_samples(identities: u32, per_identity: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut out = Vec::new();
        for id in 0..identities {
            let angle = id as f64 * std::f64::consts::PI / identities as f64;
            for f in 0..per_identity {
                let points = (0..24)
                    .map(|j| {
                        let t = j as f64 / 23.0 * 2.0 - 1.0;
                        [
                            t * angle.cos() + noise.sample(&mut rng),
                            t * angle.sin() + noise.sample(&mut rng),
                            0.3 * (id as f64) * t * t + noise.sample(&mut rng),
                        ]
                    })
                    .collect();
                let mut cloud = PointCloud::new(points);
                cloud.sequence_id = format!("id{id}");
                cloud.frame_index = f as u64;
                out.push(Sample {
                    id: format!("id{id}_{f}"),
                    cloud,
                    identity: id,
                    split_tag: SplitTag::Train,
                });
            }
        }
        out
    }

    fn quiet_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            augment_sigma: 0.0,
            augment_rotation: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let samples = toy_samples(2, 4, 1);
        let batch: Vec<&Sample> = samples.iter().collect();
        for optimizer in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let config = TrainConfig {
                learning_rate: 0.0,
                optimizer,
                ..quiet_config()
            };
            let mut t = Trainer::new(params(2), config).unwrap();
            let loss = t.step(&batch, &mut ChaCha8Rng::seed_from_u64(0), 1, 0).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
            assert_eq!(t.params(), &params(2));
        }
    }

    #[test]
    fn single_step_descends() {
        let samples = toy_samples(2, 4, 2);
        let batch: Vec<&Sample> = samples.iter().collect();
        for optimizer in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let config = TrainConfig {
                optimizer,
                ..quiet_config()
            };
            let before = batch_loss(&params(2), &batch, &config.loss).unwrap();
            let mut t = Trainer::new(params(2), config.clone()).unwrap();
            let reported = t.step(&batch, &mut ChaCha8Rng::seed_from_u64(0), 1, 0).unwrap();
            assert_eq!(reported, before);
            let after = batch_loss(t.params(), &batch, &config.loss).unwrap();
            assert!(after < before, "{optimizer:?}: {after} >= {before}");
        }
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_about_lr() {
        let samples = toy_samples(2, 4, 3);
        let batch: Vec<&Sample> = samples.iter().collect();
        let config = TrainConfig {
            weight_decay: 0.0,
            ..quiet_config()
        };
        let mut t = Trainer::new(params(2), config).unwrap();
        t.step(&batch, &mut ChaCha8Rng::seed_from_u64(0), 1, 0).unwrap();
        for (a, b) in t.params().values().iter().zip(params(2).values()) {
            let moved = (a - b).abs();
            // |m / (sqrt(v) + eps)| = |g| / (|g| + eps) <= 1 on the first step.
            assert!(moved <= 1e-3 + 1e-15, "{moved}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights_only() {
        let samples = toy_samples(2, 4, 4);
        let batch: Vec<&Sample> = samples.iter().collect();
        let run = |wd: f64| {
            let config = TrainConfig {
                weight_decay: wd,
                optimizer: OptimizerKind::SgdMomentum,
                ..quiet_config()
            };
            let mut t = Trainer::new(params(2), config).unwrap();
            t.step(&batch, &mut ChaCha8Rng::seed_from_u64(0), 1, 0).unwrap();
            t.into_params()
        };
        let plain = run(0.0);
        let decayed = run(0.5);
        let p = params(2);
        for layer in p.layers() {
            for i in layer.weight_range() {
                let expected = plain.values()[i] - 1e-3 * 0.5 * plain.values()[i];
                assert!((decayed.values()[i] - expected).abs() < 1e-15);
            }
            for i in layer.bias_range() {
                assert_eq!(decayed.values()[i], plain.values()[i]);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let samples = toy_samples(3, 6, 5);
        let (train, val) = carve_validation(&samples, 0.2, 0);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            samples_per_identity: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = fit(params(3), &train, &val, &config).unwrap();
        let b = fit(params(3), &train, &val, &config).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.history, b.history);
        let c = fit(params(3), &train, &val, &TrainConfig { seed: 10, ..config }).unwrap();
        assert_ne!(a.last, c.last);
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let samples = toy_samples(2, 4, 6);
        let (train, val) = carve_validation(&samples, 0.25, 0);
        let out = fit(params(2), &train, &val, &TrainConfig { epochs: 0, ..quiet_config() }).unwrap();
        assert_eq!(out.params, params(2));
        assert_eq!(out.history, TrainHistory::default());
    }

    #[test]
    fn history_bookkeeping_and_learning() {
        let samples = toy_samples(4, 10, 7);
        let (train, val) = carve_validation(&samples, 0.2, 1);
        let config = TrainConfig {
            epochs: 12,
            batch_size: 8,
            eval_every: 3,
            learning_rate: 5e-3,
            seed: 2,
            knn_k: 3,
            ..TrainConfig::default()
        };
        let mut hooked = Vec::new();
        let out = fit_with(params(4), &train, &val, &config, |p, r| {
            hooked.push((p.clone(), *r));
            Ok(())
        })
        .unwrap();
        let h = &out.history;
        assert_eq!(h.epoch_losses.len(), 12);
        assert_eq!(h.evals.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![3, 6, 9, 12]);
        let max = h.evals.iter().map(|e| e.accuracy).fold(f64::MIN, f64::max);
        assert_eq!(h.best_accuracy, Some(max));
        assert!(h.checkpoints.windows(2).all(|w| w[1].accuracy > w[0].accuracy));
        assert_eq!(hooked.last().unwrap().0, out.params);
        assert_eq!(hooked.iter().map(|h| h.1).collect::<Vec<_>>(), h.checkpoints);
        assert!(h.epoch_losses.last().unwrap() < &h.epoch_losses[0]);
        assert!(max >= 0.75, "{max}");
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,loss,val_accuracy\n1,"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn batches_are_identity_balanced() {
        let mut samples = toy_samples(7, 5, 8);
        samples.truncate(samples.len() - 4); // last identity keeps one sample
        let config = TrainConfig::default();
        let batches = epoch_batches(&samples, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batches.len(), (samples.len() - 1).div_ceil(24));
        for b in &batches {
            let mut per: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
            for &i in b {
                per.entry(samples[i].identity).or_default().push(i);
            }
            assert_eq!(per.len(), 6);
            assert!(!per.contains_key(&6));
            for members in per.values() {
                assert_eq!(members.len(), 4);
                let mut d = members.clone();
                d.dedup();
                assert_eq!(d.len(), 4);
            }
        }
        let single = toy_samples(1, 5, 0);
        assert!(epoch_batches(&single, &config, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn validation_carve_is_stratified() {
        let samples = toy_samples(3, 10, 9);
        let (train, val) = carve_validation(&samples, 0.1, 4);
        assert_eq!((train.len(), val.len()), (27, 3));
        for id in 0..3 {
            assert_eq!(val.iter().filter(|s| s.identity == id).count(), 1);
        }
    }

    #[test]
    fn identities_beyond_head_are_rejected() {
        let samples = toy_samples(3, 4, 10);
        let batch: Vec<&Sample> = samples.iter().collect();
        let mut t = Trainer::new(params(2), quiet_config()).unwrap();
        assert!(matches!(
            t.step(&batch, &mut ChaCha8Rng::seed_from_u64(0), 1, 0),
            Err(Error::InvalidParam(_))
        ));
    }
}
