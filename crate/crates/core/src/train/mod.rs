//! The pre-training loop: two augmented views per pair, a shared network,
//! a contrastive loss on matched voxels and SGD with polynomial decay.

mod checkpoint;

pub use checkpoint::{read_training_checkpoint, write_training_checkpoint, OPTIMIZER_MAGIC};

use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, AugmentationConfig, AugmentedView};
use crate::dataset::ScenePair;
use crate::loss::{collapse_metric, contrastive_loss, LossConfig};
use crate::nn::{apply_stat_updates, GradientSet, Mode, ParameterSet, StatUpdate, UNet, UNetConfig};
use crate::voxel::{quantize, SparseVoxelTensor};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Pairs whose gradients are averaged into one update.
    pub accumulate: usize,
    pub loss: LossConfig,
    pub augment: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            base_lr: 0.8,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            voxel_size: 0.05,
            seed: 0,
            checkpoint_every: 1000,
            accumulate: 1,
            loss: LossConfig::default(),
            augment: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a CPU run on a small synthetic corpus.
    pub fn desk_scale() -> Self {
        Self {
            max_iters: 500,
            base_lr: 0.1,
            checkpoint_every: 100,
            loss: LossConfig {
                ns: 256,
                ..LossConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("train: max_iters must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("train: base_lr must be positive".into()));
        }
        if !(self.lr_power >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train: need lr_power >= 0, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Config("train: voxel_size must be positive".into()));
        }
        if self.accumulate == 0 {
            return Err(Error::Config("train: accumulate must be at least 1".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// `base_lr · (1 − iter/max_iters)^power`, zero from `max_iters` on.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter >= cfg.max_iters {
        return 0.0;
    }
    cfg.base_lr * (1.0 - iter as f64 / cfg.max_iters as f64).powf(cfg.lr_power)
}

/// Momentum buffers, one per parameter tensor, and the completed-iteration count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub buffers: Vec<Vec<T>>,
    pub iteration: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        Self {
            buffers: params.entries().iter().map(|e| vec![T::zero(); e.data.len()]).collect(),
            iteration: 0,
        }
    }

    pub fn is_congruent(&self, params: &ParameterSet<T>) -> bool {
        self.buffers.len() == params.len()
            && self
                .buffers
                .iter()
                .zip(params.entries())
                .all(|(b, e)| b.len() == e.data.len())
    }
}

/// `g = grad + wd·p; buf = m·buf + g; p −= lr·buf` on trainable tensors.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &GradientSet<T>,
    state: &mut OptimizerState<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if !grads.is_congruent(params) || !state.is_congruent(params) {
        return Err(Error::ParamMismatch("optimizer state or gradients differ from parameters".into()));
    }
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        if !entry.kind.trainable() {
            continue;
        }
        let buf = &mut state.buffers[i];
        for ((p, b), &g) in entry.data.iter_mut().zip(buf.iter_mut()).zip(grads.by_index(i)) {
            let g = g + weight_decay * *p;
            *b = momentum * *b + g;
            *p -= lr * *b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub collapse: f64,
    /// Wall time since the start of the run.
    pub millis: u64,
}

impl TrainLogRecord {
    pub const CSV_HEADER: &'static str = "iter,lr,loss,collapse,millis";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{:e},{}", self.iter, self.lr, self.loss, self.collapse, self.millis)
    }

    /// The deterministic columns only (no wall time).
    pub fn csv_row_deterministic(&self) -> String {
        format!("{},{:e},{:e},{:e}", self.iter, self.lr, self.loss, self.collapse)
    }
}

/// Augmented, voxelized view with a map from original point index to voxel row.
struct PreparedView<T> {
    vox: SparseVoxelTensor<T>,
    row_of_point: Vec<Option<usize>>,
}

fn prepare<T: Scalar>(view: AugmentedView<T>, n_orig: usize, voxel_size: T) -> Result<PreparedView<T>> {
    let vox = quantize(&view.cloud, voxel_size)?;
    let mut row_of_point = vec![None; n_orig];
    for (pos, &orig) in view.kept.iter().enumerate() {
        row_of_point[orig] = Some(vox.origin_map[pos]);
    }
    Ok(PreparedView { vox, row_of_point })
}

/// Point matches mapped to voxel rows; a voxel on either side keeps only its
/// first match, so the result is one-to-one.
pub fn voxel_matches(
    matches: &[(usize, usize)],
    rows1: &[Option<usize>],
    rows2: &[Option<usize>],
    n_vox1: usize,
    n_vox2: usize,
) -> Vec<(usize, usize)> {
    let mut used1 = vec![false; n_vox1];
    let mut used2 = vec![false; n_vox2];
    let mut out = Vec::new();
    for &(i, j) in matches {
        let (Some(a), Some(b)) = (rows1[i], rows2[j]) else { continue };
        if used1[a] || used2[b] {
            continue;
        }
        used1[a] = true;
        used2[b] = true;
        out.push((a, b));
    }
    out
}

/// Loss, collapse metric, gradients and running-stat updates of one pair.
pub struct PairGradients<T> {
    pub loss: T,
    pub collapse: T,
    pub grads: GradientSet<T>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

/// Forward and backward on one pair with both views through the same
/// parameters. `rng_seed` fixes augmentation and sampling.
pub fn pair_gradients<T: Scalar>(
    net: &UNet,
    pair: &ScenePair<T>,
    params: &ParameterSet<T>,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<PairGradients<T>> {
    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(rng_seed, cfg.augment.rng_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let voxel = T::lit(cfg.voxel_size);
    let v1 = prepare(augment_view(&pair.x1, &cfg.augment, &mut aug_rng)?, pair.x1.len(), voxel)?;
    let v2 = prepare(augment_view(&pair.x2, &cfg.augment, &mut aug_rng)?, pair.x2.len(), voxel)?;
    let matches = voxel_matches(
        pair.correspondences.matches(),
        &v1.row_of_point,
        &v2.row_of_point,
        v1.vox.len(),
        v2.vox.len(),
    );
    if matches.is_empty() {
        return Err(Error::SkipStep);
    }
    let (out1, tape1) = net.forward(params, &v1.vox.tensor, Mode::Train)?;
    let (out2, tape2) = net.forward(params, &v2.vox.tensor, Mode::Train)?;
    let loss = contrastive_loss(&out1.features, &out2.features, &matches, &cfg.loss, &mut rng)?;
    let collapse = collapse_metric(&out1.features);
    let mut stat_updates = tape1.stat_updates().to_vec();
    stat_updates.extend_from_slice(tape2.stat_updates());
    let mut grads = GradientSet::zeros_like(params);
    net.backward(params, tape1, &loss.grad1, &mut grads)?;
    net.backward(params, tape2, &loss.grad2, &mut grads)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    Ok(PairGradients {
        loss: loss.loss,
        collapse,
        grads,
        stat_updates,
    })
}

/// One update from one pair at iteration `state.iteration`.
pub fn train_step<T: Scalar>(
    net: &UNet,
    pair: &ScenePair<T>,
    params: &mut ParameterSet<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<TrainLogRecord> {
    let iter = state.iteration as usize;
    let lr = poly_lr(iter, cfg);
    let seed = mix(cfg.seed, iter as u64);
    let g = pair_gradients(net, pair, params, cfg, seed)?;
    sgd_step(params, &g.grads, state, T::lit(lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay))?;
    apply_stat_updates(params, &g.stat_updates, net.config().bn_momentum);
    state.iteration += 1;
    Ok(TrainLogRecord {
        iter,
        lr,
        loss: g.loss.as_f64(),
        collapse: g.collapse.as_f64(),
        millis: 0,
    })
}

/// Splitmix64 finalizer over a pair of words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateful training run over a corpus. Pair order is a fresh seeded shuffle
/// per epoch and every iteration derives its randomness from `(seed, iter)`,
/// so a run resumed from a checkpoint continues bitwise like the original.
pub struct Trainer<'a, T> {
    net: UNet,
    cfg: TrainConfig,
    corpus: &'a [ScenePair<T>],
    params: ParameterSet<T>,
    state: OptimizerState<T>,
    order: Option<(usize, Vec<usize>)>,
    skipped: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(corpus: &'a [ScenePair<T>], net_cfg: &UNetConfig, cfg: TrainConfig) -> Result<Self> {
        let net = UNet::new(net_cfg)?;
        let params = net.init_params(mix(cfg.seed, 0x1417))?;
        Self::resume(corpus, net_cfg, cfg, params, None)
    }

    pub fn resume(
        corpus: &'a [ScenePair<T>],
        net_cfg: &UNetConfig,
        cfg: TrainConfig,
        params: ParameterSet<T>,
        state: Option<OptimizerState<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let net = UNet::new(net_cfg)?;
        net.check_params(&params)?;
        let state = state.unwrap_or_else(|| OptimizerState::new(&params));
        if !state.is_congruent(&params) {
            return Err(Error::ParamMismatch("optimizer buffers differ from parameters".into()));
        }
        Ok(Self {
            net,
            cfg,
            corpus,
            params,
            state,
            order: None,
            skipped: 0,
        })
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration as usize
    }

    pub fn is_done(&self) -> bool {
        self.iteration() >= self.cfg.max_iters
    }

    /// Steps skipped because no match survived voxelization.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn into_parts(self) -> (ParameterSet<T>, OptimizerState<T>) {
        (self.params, self.state)
    }

    /// Corpus index of the `draw`-th pair consumed by the run.
    fn pair_index(&mut self, draw: usize) -> usize {
        let n = self.corpus.len();
        let epoch = draw / n;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed ^ 0x5EED_0DE5, epoch as u64)));
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("order just set").1[draw % n]
    }

    /// Runs one iteration. Returns `None` when every pair of the iteration
    /// was skipped; the iteration still counts.
    pub fn step(&mut self) -> Result<Option<TrainLogRecord>> {
        let iter = self.iteration();
        let k = self.cfg.accumulate;
        let lr = poly_lr(iter, &self.cfg);
        let mut total: Option<GradientSet<T>> = None;
        let mut updates = Vec::new();
        let (mut loss, mut collapse, mut used) = (0.0, 0.0, 0usize);
        for j in 0..k {
            let draw = iter * k + j;
            let idx = self.pair_index(draw);
            let seed = mix(self.cfg.seed, draw as u64);
            match pair_gradients(&self.net, &self.corpus[idx], &self.params, &self.cfg, seed) {
                Ok(g) => {
                    loss += g.loss.as_f64();
                    collapse += g.collapse.as_f64();
                    used += 1;
                    updates.extend(g.stat_updates);
                    match &mut total {
                        Some(t) => t.add_assign(&g.grads),
                        None => total = Some(g.grads),
                    }
                }
                Err(Error::SkipStep) => {
                    warn!("iteration {iter}: pair {idx} has no surviving matches, skipped");
                    self.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        self.state.iteration += 1;
        let Some(mut grads) = total else { return Ok(None) };
        grads.scale(T::one() / T::from_usize_lossy(used));
        sgd_step(
            &mut self.params,
            &grads,
            &mut self.state,
            T::lit(lr),
            T::lit(self.cfg.momentum),
            T::lit(self.cfg.weight_decay),
        )?;
        apply_stat_updates(&mut self.params, &updates, self.net.config().bn_momentum);
        let n = used as f64;
        Ok(Some(TrainLogRecord {
            iter,
            lr,
            loss: loss / n,
            collapse: collapse / n,
            millis: 0,
        }))
    }

    /// Runs to `max_iters`, calling `on_record` after every logged iteration.
    pub fn run<F>(&mut self, mut on_record: F) -> Result<()>
    where
        F: FnMut(&TrainLogRecord, &Self) -> Result<()>,
    {
        let start = Instant::now();
        while !self.is_done() {
            if let Some(mut rec) = self.step()? {
                rec.millis = start.elapsed().as_millis() as u64;
                on_record(&rec, self)?;
            }
        }
        Ok(())
    }

    pub fn wants_checkpoint(&self) -> bool {
        let every = self.cfg.checkpoint_every;
        every > 0 && self.iteration() % every == 0
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        write_training_checkpoint(&self.net, &self.params, &self.state, w)
    }
}

/// Trains from a fresh initialization and returns the parameters and log.
pub fn train<T: Scalar>(
    corpus: &[ScenePair<T>],
    net_cfg: &UNetConfig,
    cfg: &TrainConfig,
) -> Result<(ParameterSet<T>, Vec<TrainLogRecord>)> {
    let mut trainer = Trainer::new(corpus, net_cfg, cfg.clone())?;
    let mut log = Vec::new();
    trainer.run(|rec, _| {
        log.push(*rec);
        Ok(())
    })?;
    Ok((trainer.into_parts().0, log))
}
