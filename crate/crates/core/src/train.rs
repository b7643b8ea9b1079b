//! Optimizes the pair cross-entropy with momentum SGD under a polynomial
//! learning-rate decay, runs the two-stage hard-negative-mining protocol,
//! and hosts the whole-model gradient check harness.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_translations, generate_pair_indices, IdentityDataset, PairIndex};
use crate::error::{Error, Result};
use crate::graph::{grad_check_fn, shadow, GradCheckReport, ParamStore, Wire};
use crate::mathf;
use crate::mix_seed;
use crate::model::{PairScore, PpmnModel};
use crate::tensor::Tensor;

/// Two-stage hard negative mining settings. After stage-1 training the
/// model scores all negative candidates and only the `retain_fraction`
/// it is most confidently wrong about are kept for stage-2 retraining.
#[derive(Clone, Debug)]
pub struct HnmConfig {
    pub enabled: bool,
    pub retain_fraction: f32,
    /// Candidate cap; above it a seeded uniform pre-sample bounds runtime.
    pub max_candidates: usize,
}

impl Default for HnmConfig {
    fn default() -> Self {
        HnmConfig {
            enabled: false,
            retain_fraction: 0.25,
            max_candidates: 1_000_000,
        }
    }
}

/// Optimizer schedule and sampling settings. The published run uses batch
/// size 100 for 160k iterations; the desk default keeps the same schedule
/// shape at 500 iterations.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub base_lr: f32,
    pub lr_power: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub negative_ratio: usize,
    pub hnm: HnmConfig,
    pub augment: bool,
    pub seed: u64,
    /// Checkpoint cadence in iterations; 0 disables cadence snapshots.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            max_iters: 500,
            base_lr: 0.01,
            lr_power: 0.5,
            momentum: 0.9,
            weight_decay: 0.0002,
            negative_ratio: 3,
            hnm: HnmConfig::default(),
            augment: true,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.hnm.retain_fraction > 0.0 && self.hnm.retain_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "retain_fraction must be in (0, 1], got {}",
                self.hnm.retain_fraction
            )));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, max_iters and log_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean pair cross-entropy over a batch, computed from the logits in the
/// fused log-sum-exp form so no probability is ever passed through a bare
/// logarithm.
pub fn pair_loss(scores: &[PairScore], labels: &[bool]) -> Result<f32> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0f32;
    for (score, &label) in scores.iter().zip(labels.iter()) {
        let (s0, s1) = score.logits;
        let m = s0.max(s1);
        let lse = m + mathf::ln(mathf::exp(s0 - m) + mathf::exp(s1 - m));
        total += lse - if label { s1 } else { s0 };
    }
    Ok(total / scores.len() as f32)
}

/// Loss plus its gradient with respect to the logits,
/// `(softmax_j - [j == label]) / N` per sample.
pub fn pair_loss_grad(scores: &[PairScore], labels: &[bool]) -> Result<(f32, Vec<[f32; 2]>)> {
    let loss = pair_loss(scores, labels)?;
    let n = scores.len() as f32;
    let grads = scores
        .iter()
        .zip(labels.iter())
        .map(|(score, &label)| {
            let (s0, s1) = score.logits;
            let m = s0.max(s1);
            let e0 = mathf::exp(s0 - m);
            let e1 = mathf::exp(s1 - m);
            let p0 = e0 / (e0 + e1);
            let p1 = e1 / (e0 + e1);
            let (t0, t1) = if label { (0.0, 1.0) } else { (1.0, 0.0) };
            [(p0 - t0) / n, (p1 - t1) / n]
        })
        .collect();
    Ok((loss, grads))
}

/// Polynomial decay: `lr = base * (1 - iter/max_iters)^power`.
pub fn poly_lr(iter: usize, max_iters: usize, base_lr: f32, power: f32) -> Result<f32> {
    if iter > max_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} exceeds max_iters {max_iters}"
        )));
    }
    let progress = iter as f32 / max_iters as f32;
    Ok(base_lr * mathf::powf(1.0 - progress, power))
}

/// One momentum-SGD update with L2 weight decay. Per coordinate:
/// `g = grad + mu * value; m = gamma * m + lr * g; value -= m`.
/// Gradients are zeroed afterwards.
pub fn sgd_step(params: &mut ParamStore, lr: f32, momentum: f32, weight_decay: f32) {
    for (_, param) in params.iter_mut() {
        let value = param.value.data_mut();
        let grad = param.grad.data_mut();
        let moment = param.momentum.data_mut();
        for i in 0..value.len() {
            let g = grad[i] + weight_decay * value[i];
            moment[i] = momentum * moment[i] + lr * g;
            value[i] -= moment[i];
            grad[i] = 0.0;
        }
    }
}

/// One logged point of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub lr: f32,
    pub loss: f32,
}

/// Receives loss lines and cadence snapshots during training.
pub trait TrainObserver {
    fn on_log(&mut self, _point: &TracePoint) {}
    fn on_checkpoint(&mut self, _iter: usize, _params: &ParamStore) {}
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Where each epoch's pairs come from: fresh sampling (negatives are
/// re-drawn every epoch) or a fixed mined set that is only reshuffled.
#[derive(Clone, Debug)]
pub enum PairSource {
    Resampled { negative_ratio: usize },
    Fixed(Vec<PairIndex>),
}

impl PairSource {
    fn epoch_pairs(&self, dataset: &IdentityDataset, seed: u64, epoch: u64) -> Result<Vec<PairIndex>> {
        let epoch_seed = mix_seed(seed, 0xE90C_0000 + epoch);
        match self {
            PairSource::Resampled { negative_ratio } => {
                generate_pair_indices(dataset, *negative_ratio, epoch_seed)
            }
            PairSource::Fixed(pairs) => {
                if pairs.is_empty() {
                    return Err(Error::EmptyBatch);
                }
                let mut shuffled = pairs.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
                Ok(shuffled)
            }
        }
    }
}

/// Per-image training pools: the original plus, when augmentation is on,
/// its five translated copies.
struct VariantPool {
    variants: Vec<Vec<Vec<Tensor>>>,
}

impl VariantPool {
    fn build(dataset: &IdentityDataset, augment: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA06));
        let variants = dataset
            .identities
            .iter()
            .map(|ident| {
                ident
                    .images
                    .iter()
                    .map(|img| {
                        let mut pool = alloc::vec![img.image.clone()];
                        if augment {
                            pool.extend(augment_translations(&img.image, &mut rng));
                        }
                        pool
                    })
                    .collect()
            })
            .collect();
        VariantPool { variants }
    }

    fn pick(&self, slot: (usize, usize), rng: &mut impl Rng) -> &Tensor {
        let pool = &self.variants[slot.0][slot.1];
        &pool[rng.gen_range(0..pool.len())]
    }
}

fn stack_batch(images: Vec<&Tensor>) -> Tensor {
    Tensor::stack(&images).expect("training batches stack same-shaped images")
}

/// Runs `max_iters` minibatch steps over shuffled pairs drawn from
/// `source`, logging the pre-update batch loss every `log_every` steps.
/// Aborts with [`Error::Divergence`] if the loss turns non-finite.
/// Fully deterministic given the config seed.
pub fn train_on_pairs(
    model: &mut PpmnModel,
    train_set: &IdentityDataset,
    cfg: &TrainConfig,
    source: &PairSource,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<TracePoint>> {
    cfg.validate()?;
    let pool = VariantPool::build(train_set, cfg.augment, cfg.seed);
    let mut variant_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xBA7C4));

    let mut epoch = 0u64;
    let mut queue = source.epoch_pairs(train_set, cfg.seed, epoch)?;
    let mut cursor = 0usize;
    let mut trace = Vec::new();
    model.params_mut().zero_grads();

    for iter in 0..cfg.max_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == queue.len() {
                epoch += 1;
                queue = source.epoch_pairs(train_set, cfg.seed, epoch)?;
                cursor = 0;
            }
            batch.push(queue[cursor]);
            cursor += 1;
        }

        let image_a = stack_batch(batch.iter().map(|p| pool.pick(p.a, &mut variant_rng)).collect());
        let image_b = stack_batch(batch.iter().map(|p| pool.pick(p.b, &mut variant_rng)).collect());
        let labels: Vec<bool> = batch.iter().map(|p| p.label).collect();

        let (scores, cache) = model.forward_pair_cached(&image_a, &image_b)?;
        let (loss, logit_grads) = pair_loss_grad(&scores, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iter });
        }

        let mut seed_grad = Tensor::zeros([batch.len(), 2, 1, 1]);
        for (i, g) in logit_grads.iter().enumerate() {
            seed_grad.set(i, 0, 0, 0, g[0]);
            seed_grad.set(i, 1, 0, 0, g[1]);
        }
        model.backward_from_logits(&cache, seed_grad)?;

        let lr = poly_lr(iter, cfg.max_iters, cfg.base_lr, cfg.lr_power)?;
        sgd_step(model.params_mut(), lr, cfg.momentum, cfg.weight_decay);

        if iter % cfg.log_every == 0 || iter + 1 == cfg.max_iters {
            let point = TracePoint { iter, lr, loss };
            observer.on_log(&point);
            trace.push(point);
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(iter + 1, model.params());
        }
    }
    Ok(trace)
}

/// Stage-1 entry point: pairs are re-sampled every epoch at the configured
/// negative ratio.
pub fn train(
    model: &mut PpmnModel,
    train_set: &IdentityDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<TracePoint>> {
    let source = PairSource::Resampled {
        negative_ratio: cfg.negative_ratio,
    };
    train_on_pairs(model, train_set, cfg, &source, observer)
}

/// All negative candidates with their same-person scores, sorted worst
/// (most confidently wrong) first.
#[derive(Clone, Debug)]
pub struct MiningOutcome {
    pub scored: Vec<(PairIndex, f32)>,
    pub retained_count: usize,
}

impl MiningOutcome {
    pub fn retained(&self) -> &[(PairIndex, f32)] {
        &self.scored[..self.retained_count]
    }

    pub fn discarded(&self) -> &[(PairIndex, f32)] {
        &self.scored[self.retained_count..]
    }

    pub fn retained_pairs(&self) -> Vec<PairIndex> {
        self.retained().iter().map(|(p, _)| *p).collect()
    }
}

/// Scores every cross-camera negative pair of the train set (capped by a
/// seeded pre-sample at `max_candidates`), ranks them by descending
/// same-person probability and retains the top `retain_fraction`.
pub fn mine_hard_negatives(
    model: &PpmnModel,
    train_set: &IdentityDataset,
    retain_fraction: f32,
    max_candidates: usize,
    seed: u64,
) -> Result<MiningOutcome> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retain_fraction must be in (0, 1], got {retain_fraction}"
        )));
    }
    let per_identity: Vec<(Vec<usize>, Vec<usize>)> = train_set
        .identities
        .iter()
        .map(|ident| {
            (
                ident.camera_images(crate::data::Camera::A),
                ident.camera_images(crate::data::Camera::B),
            )
        })
        .collect();
    let mut candidates = Vec::new();
    for (i, (a_imgs, _)) in per_identity.iter().enumerate() {
        for (j, (_, b_imgs)) in per_identity.iter().enumerate() {
            if i == j {
                continue;
            }
            for &ia in a_imgs {
                for &ib in b_imgs {
                    candidates.push(PairIndex {
                        a: (i, ia),
                        b: (j, ib),
                        label: false,
                    });
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoNegativePairs);
    }
    if candidates.len() > max_candidates {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1111E6));
        let mut keep = rand::seq::index::sample(&mut rng, candidates.len(), max_candidates).into_vec();
        keep.sort_unstable();
        candidates = keep.into_iter().map(|i| candidates[i]).collect();
    }

    let mut scored: Vec<(usize, PairIndex, f32)> = Vec::with_capacity(candidates.len());
    for (chunk_start, chunk) in candidates.chunks(64).enumerate().map(|(k, c)| (k * 64, c)) {
        let image_a = stack_batch(
            chunk
                .iter()
                .map(|p| &train_set.identities[p.a.0].images[p.a.1].image)
                .collect(),
        );
        let image_b = stack_batch(
            chunk
                .iter()
                .map(|p| &train_set.identities[p.b.0].images[p.b.1].image)
                .collect(),
        );
        let scores = model.forward_pair(&image_a, &image_b)?;
        for (offset, (pair, score)) in chunk.iter().zip(scores.iter()).enumerate() {
            scored.push((chunk_start + offset, *pair, score.p));
        }
    }
    // Worst negatives first: descending score, candidate id breaks ties
    // so the ranking is deterministic.
    scored.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    let retained_count = {
        let n = scored.len() as f32 * retain_fraction;
        (crate::mathf::floor(n + 0.999_999) as usize).clamp(1, scored.len())
    };
    Ok(MiningOutcome {
        scored: scored.into_iter().map(|(_, p, s)| (p, s)).collect(),
        retained_count,
    })
}

/// Outcome of the full two-stage protocol.
pub struct TwoStageOutcome {
    pub stage1: Vec<TracePoint>,
    pub mining: Option<MiningOutcome>,
    pub stage2: Option<Vec<TracePoint>>,
}

/// Hard negative mining on a stage-1 model followed by stage-2 finetuning
/// of the same weights: all positives plus the retained negatives, frozen
/// for the stage (reshuffled per epoch, never resampled), fresh schedule.
pub fn mine_and_retrain(
    model: &mut PpmnModel,
    train_set: &IdentityDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(MiningOutcome, Vec<TracePoint>)> {
    let mining = mine_hard_negatives(
        model,
        train_set,
        cfg.hnm.retain_fraction,
        cfg.hnm.max_candidates,
        mix_seed(cfg.seed, 0x34A6E),
    )?;
    let mut pool = generate_pair_indices(train_set, 0, mix_seed(cfg.seed, 0x905))?;
    pool.extend(mining.retained_pairs());
    let mut stage2_cfg = cfg.clone();
    stage2_cfg.seed = mix_seed(cfg.seed, 0x57A6E2);
    let stage2 = train_on_pairs(
        model,
        train_set,
        &stage2_cfg,
        &PairSource::Fixed(pool),
        observer,
    )?;
    Ok((mining, stage2))
}

/// Stage-1 training, then (when enabled) hard negative mining and stage-2
/// finetuning of the stage-1 weights on all positives plus the retained
/// negatives.
pub fn train_two_stage(
    model: &mut PpmnModel,
    train_set: &IdentityDataset,
    cfg: &TrainConfig,
    stage1_observer: &mut dyn TrainObserver,
    stage2_observer: &mut dyn TrainObserver,
) -> Result<TwoStageOutcome> {
    let stage1 = train(model, train_set, cfg, stage1_observer)?;
    if !cfg.hnm.enabled {
        return Ok(TwoStageOutcome {
            stage1,
            mining: None,
            stage2: None,
        });
    }
    let (mining, stage2) = mine_and_retrain(model, train_set, cfg, stage2_observer)?;
    Ok(TwoStageOutcome {
        stage1,
        mining: Some(mining),
        stage2: Some(stage2),
    })
}

/// Whole-model gradient check options.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

fn pair_loss_f64(logits: &[f64], labels: &[bool]) -> f64 {
    let n = labels.len();
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let s0 = logits[2 * i];
        let s1 = logits[2 * i + 1];
        let m = s0.max(s1);
        let lse = m + libm::log(libm::exp(s0 - m) + libm::exp(s1 - m));
        total += lse - if label { s1 } else { s0 };
    }
    total / n as f64
}

/// Central-difference check of every parameter against the scalar batch
/// loss. Analytic gradients come from the f32 backward pass; the loss the
/// checker differentiates is the independent float64 shadow evaluation.
pub fn model_grad_check(
    model: &mut PpmnModel,
    image_a: &Tensor,
    image_b: &Tensor,
    labels: &[bool],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (scores, cache) = model.forward_pair_cached(image_a, image_b)?;
    let (_, logit_grads) = pair_loss_grad(&scores, labels)?;
    let mut seed_grad = Tensor::zeros([labels.len(), 2, 1, 1]);
    for (i, g) in logit_grads.iter().enumerate() {
        seed_grad.set(i, 0, 0, 0, g[0]);
        seed_grad.set(i, 1, 0, 0, g[1]);
    }
    model.params_mut().zero_grads();
    model.backward_from_logits(&cache, seed_grad)?;

    let logits_node = match model.logits_wire() {
        Wire::Node(i) => i,
        Wire::Input(_) => return Err(Error::NonScalarOutput),
    };
    let names: Vec<String> = {
        let (_, params) = model.parts_mut();
        params.names().map(String::from).collect()
    };
    let (graph, params) = model.parts_mut();
    grad_check_fn(params, &names, opts.eps, opts.max_coords, opts.seed, 1e-4, |p| {
        let values = shadow::forward_f64(graph, p, &[("image_a", image_a), ("image_b", image_b)])?;
        Ok(pair_loss_f64(&values[logits_node].data, labels))
    })
}

/// Worst relative error per parameter group.
pub fn group_errors(
    report: &GradCheckReport,
    groups: &[(String, Vec<String>)],
) -> Vec<(String, f64)> {
    groups
        .iter()
        .map(|(group, names)| {
            let worst = report
                .entries
                .iter()
                .filter(|e| names.contains(&e.name))
                .fold(0.0f64, |m, e| m.max(e.max_rel_err));
            (group.clone(), worst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::synth_dataset;

    fn score(s0: f32, s1: f32) -> PairScore {
        let m = s0.max(s1);
        let e0 = mathf::exp(s0 - m);
        let e1 = mathf::exp(s1 - m);
        PairScore {
            p: e1 / (e0 + e1),
            logits: (s0, s1),
        }
    }

    #[test]
    fn balanced_logits_cost_ln_two() {
        let scores = alloc::vec![score(0.0, 0.0); 4];
        let labels = alloc::vec![true, false, true, false];
        let loss = pair_loss(&scores, &labels).unwrap();
        assert!((loss - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let scores = alloc::vec![score(0.0, 20.0), score(20.0, 0.0)];
        let labels = alloc::vec![true, false];
        let loss = pair_loss(&scores, &labels).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn loss_matches_per_sample_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<PairScore> = (0..32)
            .map(|_| score(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let labels: Vec<bool> = (0..32).map(|_| rng.gen_range(0..2) == 1).collect();
        let loss = pair_loss(&scores, &labels).unwrap();
        // Independent scalar route through the probabilities in f64.
        let direct: f64 = scores
            .iter()
            .zip(labels.iter())
            .map(|(s, &l)| {
                let p = s.p as f64;
                if l {
                    -libm::log(p)
                } else {
                    -libm::log(1.0 - p)
                }
            })
            .sum::<f64>()
            / 32.0;
        assert!((loss as f64 - direct).abs() < 1e-5, "{loss} vs {direct}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(pair_loss(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_gradient_sums_to_zero_per_sample() {
        let scores = alloc::vec![score(0.3, -0.4), score(-1.0, 2.0)];
        let labels = alloc::vec![false, true];
        let (_, grads) = pair_loss_grad(&scores, &labels).unwrap();
        for g in grads {
            assert!((g[0] + g[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn schedule_hits_the_published_anchor_points() {
        assert_eq!(poly_lr(0, 400, 0.01, 0.5).unwrap(), 0.01);
        assert_eq!(poly_lr(400, 400, 0.01, 0.5).unwrap(), 0.0);
        assert_eq!(poly_lr(300, 400, 0.01, 0.5).unwrap(), 0.005);
        assert!(poly_lr(401, 400, 0.01, 0.5).is_err());
    }

    #[test]
    fn schedule_is_strictly_decreasing_on_a_grid() {
        let mut last = poly_lr(0, 1000, 0.01, 0.5).unwrap();
        for iter in (10..=1000).step_by(10) {
            let lr = poly_lr(iter, 1000, 0.01, 0.5).unwrap();
            assert!(lr < last, "lr {lr} not below {last} at {iter}");
            last = lr;
        }
    }

    fn scalar_store(value: f32) -> ParamStore {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::new([1, 1, 1, 1], alloc::vec![value]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn idle_step_changes_nothing() {
        let mut store = scalar_store(0.7);
        sgd_step(&mut store, 0.1, 0.9, 0.0);
        assert_eq!(store.get("p").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn two_step_trajectory_matches_hand_recurrence() {
        let mut store = scalar_store(1.0);
        for _ in 0..2 {
            store.get_mut("p").unwrap().grad.data_mut()[0] = 0.5;
            sgd_step(&mut store, 0.1, 0.9, 0.0);
        }
        // m1 = 0.05, v1 = 0.95; m2 = 0.9*0.05 + 0.05 = 0.095, v2 = 0.855.
        let v = store.get("p").unwrap().value.data()[0];
        assert!((v - 0.855).abs() < 1e-6, "v {v}");
        assert_eq!(store.get("p").unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn weight_decay_alone_contracts_toward_zero() {
        let mut store = scalar_store(1.0);
        let mut last = 1.0f32;
        for _ in 0..5 {
            sgd_step(&mut store, 0.1, 0.0, 0.01);
            let v = store.get("p").unwrap().value.data()[0];
            assert!(v.abs() < last.abs());
            last = v;
        }
    }

    #[test]
    fn weight_decay_contributes_exactly_mu_times_value() {
        let (lr, mu, v0) = (0.1f32, 0.01f32, 0.8f32);
        let mut store = scalar_store(v0);
        sgd_step(&mut store, lr, 0.0, mu);
        let m = store.get("p").unwrap().momentum.data()[0];
        assert_eq!(m, lr * (mu * v0));
    }

    fn desk_setup() -> (PpmnModel, IdentityDataset) {
        let model = PpmnModel::build(ModelConfig::desk()).unwrap();
        let data = synth_dataset(4, 2, 3).unwrap().resized(32, 16);
        (model, data)
    }

    #[test]
    fn short_training_runs_are_deterministic() {
        let cfg = TrainConfig {
            batch_size: 4,
            max_iters: 5,
            log_every: 1,
            augment: true,
            ..TrainConfig::default()
        };
        let mut traces = Vec::new();
        let mut finals = Vec::new();
        for _ in 0..2 {
            let (mut model, data) = desk_setup();
            let trace = train(&mut model, &data, &cfg, &mut NullObserver).unwrap();
            traces.push(trace);
            finals.push(model.params().get("fc2.weight").unwrap().value.clone());
        }
        assert_eq!(traces[0], traces[1]);
        assert_eq!(finals[0], finals[1]);
    }

    #[test]
    fn fresh_model_starts_near_ln_two() {
        let cfg = TrainConfig {
            batch_size: 8,
            max_iters: 1,
            log_every: 1,
            ..TrainConfig::default()
        };
        let (mut model, data) = desk_setup();
        let trace = train(&mut model, &data, &cfg, &mut NullObserver).unwrap();
        assert!((trace[0].loss - core::f32::consts::LN_2).abs() < 0.15);
    }

    #[test]
    fn mining_retains_the_top_scored_negatives() {
        let (mut model, data) = desk_setup();
        let cfg = TrainConfig {
            batch_size: 4,
            max_iters: 10,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg, &mut NullObserver).unwrap();

        let all = mine_hard_negatives(&model, &data, 1.0, 1_000_000, 9).unwrap();
        // 4 ids, 2 imgs per camera: 4*3 ordered pairs * 4 image combos.
        assert_eq!(all.scored.len(), 48);
        assert_eq!(all.retained_count, 48);

        let some = mine_hard_negatives(&model, &data, 0.25, 1_000_000, 9).unwrap();
        assert_eq!(some.retained_count, 12);
        let worst_retained = some.retained().iter().map(|(_, s)| *s).fold(f32::INFINITY, f32::min);
        let best_discarded = some
            .discarded()
            .iter()
            .map(|(_, s)| *s)
            .fold(f32::NEG_INFINITY, f32::max);
        assert!(worst_retained >= best_discarded);
        for w in some.scored.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn stage_two_finetunes_the_stage_one_weights() {
        let (mut model, data) = desk_setup();
        let fresh = model.params().get("fc1.weight").unwrap().value.clone();
        let cfg = TrainConfig {
            batch_size: 4,
            max_iters: 40,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg, &mut NullObserver).unwrap();
        let stage1 = model.params().get("fc1.weight").unwrap().value.clone();

        let one_step = TrainConfig { max_iters: 1, ..cfg };
        mine_and_retrain(&mut model, &data, &one_step, &mut NullObserver).unwrap();
        let stage2 = model.params().get("fc1.weight").unwrap().value.clone();

        // One stage-2 step moves the weights a little from the stage-1
        // snapshot, far less than stage 1 moved them from the fresh init.
        let drift = stage2.max_abs_diff(&stage1).unwrap();
        let learned = stage1.max_abs_diff(&fresh).unwrap();
        assert!(drift > 0.0);
        assert!(drift < 0.25 * learned, "drift {drift} vs learned {learned}");
    }

    #[test]
    fn mining_cap_limits_candidates() {
        let (model, data) = desk_setup();
        let capped = mine_hard_negatives(&model, &data, 1.0, 10, 5).unwrap();
        assert_eq!(capped.scored.len(), 10);
    }

    #[test]
    fn whole_model_gradients_survive_a_quick_check() {
        let (mut model, data) = desk_setup();
        let a = &data.identities[0].images[0].image;
        let b = &data.identities[1].images[2].image;
        let image_a = stack_batch(alloc::vec![a, b]);
        let image_b = stack_batch(alloc::vec![b, a]);
        let report = model_grad_check(
            &mut model,
            &image_a,
            &image_b,
            &[true, false],
            GradCheckOptions {
                max_coords: 8,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-3, "rel err {}", report.max_rel_err());
        assert_eq!(report.entries.len(), model.params().len());
    }
}
