//! Offline semi-supervised multi-domain training.
//!
//! Supervised iterations sweep all K domains: per domain, fresh samples
//! are collected around the truth box, negatives feed a rolling scored
//! pool, and a 32+96 minibatch (positives plus mined negatives) trains the
//! domain head together with the shared and private trunks. The pooled
//! shared features feed the domain discriminator, the co-activation
//! penalty ties shared to private features, and each iteration also draws
//! direction clips. One combined backward serves every term.
//!
//! Unsupervised iterations touch the shared trunk and the direction head
//! only, at a smaller trunk rate, from clips of an unlabeled reservoir.
//! Blocks interleave on the supervised:unsupervised = 100:1000 schedule
//! until the supervised budget is spent.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::checkpoint::{self, Manifest};
use crate::engine::{kernels, EngineError, LrSchedule, NodeId, ParameterStore, Rng, Tensor};
use crate::losses::{
    self, combine_on_graph, LossError, LossReport, LossWeights, Phase, TrackLosses,
};
use crate::mining::{self, MiningError, MiningStrategy, ScoredPool};
use crate::model::{
    self, build_model, calibrate_trunk, input, Forward, ModelConfig, ModelError, AOT_HEAD,
    DISCRIMINATOR, SHARED,
};
use crate::video::{self, extract_clip, BBox, Direction, SampleLabel, Sequence, VideoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss term {term} is non-finite at supervised iteration {iteration}")]
    NonFiniteLoss { iteration: usize, term: &'static str },
    #[error("no reservoir sequence is long enough for a {need}-frame clip")]
    NoUsableReservoir { need: usize },
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("resume manifest does not match this run: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mining(#[from] MiningError),
}

// ---------------------------------------------------------------- config --

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Supervised learning rate for the conv trunks.
    pub trunk_lr: f64,
    /// Learning rate for every fully connected head.
    pub head_lr: f64,
    /// Shared-trunk rate during unsupervised iterations.
    pub unsupervised_trunk_lr: f64,
    pub supervised_block: usize,
    pub unsupervised_block: usize,
    /// Total supervised iterations; the schedule ends when this is spent.
    pub supervised_total: usize,
    /// Direction clips per iteration, drawn once forward and once reversed.
    pub clips_each_way: usize,
    pub clip_len: usize,
    /// Samples collected per visited frame.
    pub collect_pos: usize,
    pub collect_neg: usize,
    /// Minibatch composition per domain.
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub neg_pool_cap: usize,
    pub mining: MiningStrategy,
    /// Subset size for the max-of-subset baseline.
    pub hmm_subset: usize,
    /// Also train the discriminator on unlabeled clips (off by default;
    /// the schedule text names only the direction loss).
    pub unsupervised_adv: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::equal_alpha(3, 0.08, 0.01, 0.6).unwrap(),
            trunk_lr: 1e-4,
            head_lr: 1e-3,
            unsupervised_trunk_lr: 1e-5,
            supervised_block: 100,
            unsupervised_block: 1000,
            supervised_total: 2000,
            clips_each_way: 5,
            clip_len: 10,
            collect_pos: 50,
            collect_neg: 200,
            batch_pos: 32,
            batch_neg: 96,
            neg_pool_cap: 1024,
            mining: MiningStrategy::Sunm,
            hmm_subset: 8,
            unsupervised_adv: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        for (name, v) in [
            ("trunk_lr", self.trunk_lr),
            ("head_lr", self.head_lr),
            ("unsupervised_trunk_lr", self.unsupervised_trunk_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v}, want > 0"));
            }
        }
        if self.supervised_block == 0 || self.unsupervised_block == 0 {
            return bad("block sizes must be >= 1".into());
        }
        for (name, v) in [
            ("clips_each_way", self.clips_each_way),
            ("collect_pos", self.collect_pos),
            ("collect_neg", self.collect_neg),
            ("batch_pos", self.batch_pos),
            ("batch_neg", self.batch_neg),
        ] {
            if v == 0 {
                return bad(format!("{name} = 0"));
            }
        }
        if self.batch_pos > self.collect_pos {
            return bad(format!(
                "batch_pos {} exceeds collect_pos {}",
                self.batch_pos, self.collect_pos
            ));
        }
        if self.neg_pool_cap < self.collect_neg {
            return bad(format!(
                "neg_pool_cap {} below collect_neg {}; mining needs the fresh negatives",
                self.neg_pool_cap, self.collect_neg
            ));
        }
        if self.batch_neg > self.collect_neg {
            return bad(format!(
                "batch_neg {} exceeds collect_neg {}",
                self.batch_neg, self.collect_neg
            ));
        }
        if self.clip_len < model.frame_stack {
            return bad(format!(
                "clip_len {} below frame_stack {}",
                self.clip_len, model.frame_stack
            ));
        }
        if self.weights.alpha.len() != model.k_domains {
            return bad(format!(
                "{} alpha weights for {} domains",
                self.weights.alpha.len(),
                model.k_domains
            ));
        }
        if self.weights.lambda1 > 0.0 && model.k_domains < 2 {
            return bad("the discriminator needs at least 2 domains".into());
        }
        Ok(())
    }
}

/// Model-family rows of the ablation table. Each one is a mask over the
/// architecture and loss weights; the schedule and data stay fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// All features shared; heads read the shared trunk alone.
    Fs,
    /// Private trunks, no regularizers.
    Ps,
    /// Private trunks plus the co-activation penalty.
    PsDif,
    /// Private trunks plus the adversarial term.
    ApsMinus,
    /// Both regularizers.
    Aps,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fs => "FS",
            Variant::Ps => "PS",
            Variant::PsDif => "PS+dif",
            Variant::ApsMinus => "APS-",
            Variant::Aps => "APS",
        }
    }

    pub fn fully_shared(self) -> bool {
        matches!(self, Variant::Fs)
    }

    /// Zeroes the lambdas this variant does without; lambda3 passes through.
    pub fn mask(self, w: &LossWeights) -> LossWeights {
        let (l1, l2) = match self {
            Variant::Fs | Variant::Ps => (0.0, 0.0),
            Variant::PsDif => (0.0, w.lambda2),
            Variant::ApsMinus => (w.lambda1, 0.0),
            Variant::Aps => (w.lambda1, w.lambda2),
        };
        LossWeights { lambda1: l1, lambda2: l2, lambda3: w.lambda3, alpha: w.alpha.clone() }
    }
}

// -------------------------------------------------------------- neg pools --

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NegEntry {
    id: u64,
    frame: usize,
    bbox: BBox,
    score: f64,
}

/// Rolling negative pool for one domain: insertion-ordered with oldest
/// eviction, scores cached from the last forward pass that saw the entry
/// (0.5 until then).
#[derive(Clone, Debug, Default)]
struct NegPool {
    order: VecDeque<u64>,
    by_id: BTreeMap<u64, NegEntry>,
}

impl NegPool {
    fn push(&mut self, entry: NegEntry, cap: usize) {
        while self.order.len() >= cap {
            if let Some(old) = self.order.pop_front() {
                self.by_id.remove(&old);
            }
        }
        self.order.push_back(entry.id);
        self.by_id.insert(entry.id, entry);
    }

    fn scored(&self) -> ScoredPool {
        let mut pool = ScoredPool::new();
        for id in &self.order {
            // scores are clamped probabilities, always valid
            pool.push(*id, self.by_id[id].score).unwrap();
        }
        pool
    }

    fn snapshot(&self) -> Vec<NegEntry> {
        self.order.iter().map(|id| self.by_id[id].clone()).collect()
    }

    fn restore(entries: Vec<NegEntry>, cap: usize) -> Self {
        let mut pool = Self::default();
        for e in entries {
            pool.push(e, cap);
        }
        pool
    }
}

// ------------------------------------------------------------------ state --

/// Snapshot of everything besides the parameters that a bitwise resume
/// needs; rides in the checkpoint manifest.
#[derive(Serialize, Deserialize)]
struct StateSnapshot {
    supervised_done: usize,
    unsupervised_done: usize,
    /// Stream position of the training rng, serialized as a string because
    /// it is a 128-bit word offset.
    rng_word_pos: String,
    next_id: u64,
    fully_shared: bool,
    pools: Vec<Vec<NegEntry>>,
}

#[derive(Debug)]
pub struct TrainState {
    pub store: ParameterStore,
    pub rng: Rng,
    pub supervised_done: usize,
    pub unsupervised_done: usize,
    fully_shared: bool,
    pools: Vec<NegPool>,
    next_id: u64,
    supervised_lr: LrSchedule,
    unsupervised_lr: LrSchedule,
}

impl TrainState {
    /// Builds and calibrates a fresh model. The calibration batch is drawn
    /// from the first frames of the training domains, per trunk, so the
    /// folded standardization reflects real input statistics.
    pub fn new(
        cfg: &TrainConfig,
        model_cfg: &ModelConfig,
        fully_shared: bool,
        domains: &[Sequence],
    ) -> Result<Self, TrainError> {
        cfg.validate(model_cfg)?;
        check_domains(model_cfg, domains)?;

        let mut rng = Rng::new(cfg.seed);
        let mut store = build_model(model_cfg, fully_shared, &mut rng)?;

        let mut pooled = Vec::new();
        for seq in domains {
            let batch = calibration_batch(seq, model_cfg, &mut rng)?;
            if !fully_shared {
                let (app, mot) = input::batch_patches(&batch)?;
                calibrate_trunk(&mut store, &model::private_name(seq.domain_id), &app, &mot)?;
            }
            pooled.extend(batch);
        }
        let (app, mot) = input::batch_patches(&pooled)?;
        calibrate_trunk(&mut store, SHARED, &app, &mot)?;

        Ok(Self {
            store,
            rng,
            supervised_done: 0,
            unsupervised_done: 0,
            fully_shared,
            pools: vec![NegPool::default(); domains.len()],
            next_id: 0,
            supervised_lr: supervised_schedule(cfg, model_cfg),
            unsupervised_lr: unsupervised_schedule(cfg),
        })
    }

    pub fn fully_shared(&self) -> bool {
        self.fully_shared
    }

    pub fn neg_pool_len(&self, k: usize) -> usize {
        self.pools[k].order.len()
    }

    /// Cached scores in insertion order; fresh entries sit at 0.5 until a
    /// forward pass sees them.
    pub fn neg_pool_scores(&self, k: usize) -> Vec<f64> {
        self.pools[k].order.iter().map(|id| self.pools[k].by_id[id].score).collect()
    }

    /// Phase the next iteration belongs to; a pure function of the
    /// counters and block sizes.
    pub fn phase(&self, cfg: &TrainConfig) -> Phase {
        phase_of(
            self.supervised_done,
            self.unsupervised_done,
            cfg.supervised_block,
            cfg.unsupervised_block,
        )
    }

    fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            supervised_done: self.supervised_done,
            unsupervised_done: self.unsupervised_done,
            rng_word_pos: self.rng.word_pos().to_string(),
            next_id: self.next_id,
            fully_shared: self.fully_shared,
            pools: self.pools.iter().map(NegPool::snapshot).collect(),
        }
    }

    /// Rebuilds a state from a checkpoint written by [`run_schedule`].
    pub fn resume(
        cfg: &TrainConfig,
        model_cfg: &ModelConfig,
        domains: &[Sequence],
        path: &Path,
    ) -> Result<Self, TrainError> {
        cfg.validate(model_cfg)?;
        check_domains(model_cfg, domains)?;
        let (store, manifest) = checkpoint::load(path)?;
        if manifest.seed != cfg.seed {
            return Err(TrainError::ResumeMismatch(format!(
                "checkpoint seed {} vs configured {}",
                manifest.seed, cfg.seed
            )));
        }
        let snap: StateSnapshot = serde_json::from_value(manifest.extra)
            .map_err(|e| TrainError::ResumeMismatch(format!("state snapshot: {e}")))?;
        let expect = config_hash(cfg, model_cfg, snap.fully_shared);
        if manifest.config_hash != expect {
            return Err(TrainError::ResumeMismatch(format!(
                "config hash {} vs {expect} for the supplied configs",
                manifest.config_hash
            )));
        }
        if snap.pools.len() != domains.len() {
            return Err(TrainError::ResumeMismatch(format!(
                "{} pools for {} domains",
                snap.pools.len(),
                domains.len()
            )));
        }
        let word_pos: u128 = snap
            .rng_word_pos
            .parse()
            .map_err(|e| TrainError::ResumeMismatch(format!("rng position: {e}")))?;
        let mut rng = Rng::new(cfg.seed);
        rng.set_word_pos(word_pos);
        Ok(Self {
            store,
            rng,
            supervised_done: snap.supervised_done,
            unsupervised_done: snap.unsupervised_done,
            fully_shared: snap.fully_shared,
            pools: snap
                .pools
                .into_iter()
                .map(|p| NegPool::restore(p, cfg.neg_pool_cap))
                .collect(),
            next_id: snap.next_id,
            supervised_lr: supervised_schedule(cfg, model_cfg),
            unsupervised_lr: unsupervised_schedule(cfg),
        })
    }
}

fn check_domains(model_cfg: &ModelConfig, domains: &[Sequence]) -> Result<(), TrainError> {
    if domains.len() != model_cfg.k_domains {
        return Err(TrainError::BadConfig(format!(
            "{} domain sequences for k_domains = {}",
            domains.len(),
            model_cfg.k_domains
        )));
    }
    for (k, seq) in domains.iter().enumerate() {
        if seq.domain_id != k {
            return Err(TrainError::BadConfig(format!(
                "sequence at position {k} has domain_id {}",
                seq.domain_id
            )));
        }
    }
    Ok(())
}

fn supervised_schedule(cfg: &TrainConfig, model_cfg: &ModelConfig) -> LrSchedule {
    let mut lr = LrSchedule::new();
    lr.set(SHARED, cfg.trunk_lr).unwrap();
    lr.set(DISCRIMINATOR, cfg.head_lr).unwrap();
    lr.set(AOT_HEAD, cfg.head_lr).unwrap();
    for k in 0..model_cfg.k_domains {
        lr.set(&model::private_name(k), cfg.trunk_lr).unwrap();
        lr.set(&model::head_name(k), cfg.head_lr).unwrap();
    }
    lr
}

fn unsupervised_schedule(cfg: &TrainConfig) -> LrSchedule {
    let mut lr = LrSchedule::new();
    lr.set(SHARED, cfg.unsupervised_trunk_lr).unwrap();
    lr.set(DISCRIMINATOR, cfg.head_lr).unwrap();
    lr.set(AOT_HEAD, cfg.head_lr).unwrap();
    lr
}

/// Which phase the next iteration runs in, given completed counters: after
/// every full supervised block the unsupervised block must complete before
/// supervised work resumes.
pub fn phase_of(
    supervised_done: usize,
    unsupervised_done: usize,
    supervised_block: usize,
    unsupervised_block: usize,
) -> Phase {
    if supervised_done % supervised_block != 0 {
        return Phase::Supervised;
    }
    let full_blocks = supervised_done / supervised_block;
    if supervised_done > 0 && unsupervised_done < full_blocks * unsupervised_block {
        Phase::Unsupervised
    } else {
        Phase::Supervised
    }
}

/// The (phase, length) segments a budget expands into: supervised blocks
/// separated by full unsupervised blocks, no trailing unsupervised work
/// after the budget is spent. `with_reservoir = false` drops the
/// unsupervised segments entirely.
pub fn schedule_trace(
    budget: usize,
    supervised_block: usize,
    unsupervised_block: usize,
    with_reservoir: bool,
) -> Vec<(Phase, usize)> {
    let mut trace = Vec::new();
    let mut left = budget;
    while left > 0 {
        let s = supervised_block.min(left);
        trace.push((Phase::Supervised, s));
        left -= s;
        if left > 0 && with_reservoir {
            trace.push((Phase::Unsupervised, unsupervised_block));
        }
    }
    trace
}

// -------------------------------------------------------------- iteration --

/// Patches from several frames spread across the sequence. A single-frame
/// batch would be degenerate: at frame 0 the history clamp repeats the
/// frame, the motion channels are identically zero, and the folded motion
/// weights all land on the std floor.
fn calibration_batch(
    seq: &Sequence,
    model_cfg: &ModelConfig,
    rng: &mut Rng,
) -> Result<Vec<input::Patch>, TrainError> {
    let picks = 4.min(seq.len());
    let mut out = Vec::new();
    for j in 0..picks {
        let frame = (seq.len() - 1) * (j + 1) / picks;
        let boxes = video::sample_training_boxes(seq, frame, 4, 4, rng)?;
        out.extend(boxes.iter().map(|s| patch_at(seq, frame, &s.bbox, model_cfg)));
    }
    Ok(out)
}

/// Clamp for cached pool scores; keeps the literal tracking metric finite.
fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

struct DomainBatch {
    app: Tensor,
    mot: Tensor,
    labels: Vec<usize>,
    weights: Vec<f64>,
    /// Pool ids of the mined rows, parallel to the negative rows.
    mined_ids: Vec<u64>,
    n_samples: usize,
}

/// Collect fresh samples for one domain, refresh its pool, mine the
/// negatives, and assemble the minibatch tensors.
fn build_domain_batch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    seq: &Sequence,
) -> Result<DomainBatch, TrainError> {
    let k = seq.domain_id;
    let frame = state.rng.below(seq.len());
    let boxes = video::sample_training_boxes(seq, frame, cfg.collect_pos, cfg.collect_neg, &mut state.rng)?;

    let mut pos = Vec::new();
    for s in &boxes {
        match s.label {
            SampleLabel::Positive => pos.push(s.bbox),
            SampleLabel::Negative => {
                let id = state.next_id;
                state.next_id += 1;
                state.pools[k].push(
                    NegEntry { id, frame, bbox: s.bbox, score: 0.5 },
                    cfg.neg_pool_cap,
                );
            }
        }
    }

    let selection = mining::mine(
        cfg.mining,
        &state.pools[k].scored(),
        cfg.batch_neg,
        cfg.hmm_subset,
        &mut state.rng,
    )?;
    let mined = mining::dedup_with_counts(&selection.ids);

    let chosen_pos = state.rng.sample_indices(pos.len(), cfg.batch_pos);

    let mut patches = Vec::with_capacity(cfg.batch_pos + mined.len());
    let mut labels = Vec::with_capacity(patches.capacity());
    let mut weights = Vec::with_capacity(patches.capacity());
    let mut mined_ids = Vec::with_capacity(mined.len());
    for &i in &chosen_pos {
        patches.push(patch_at(seq, frame, &pos[i], model_cfg));
        labels.push(1);
        weights.push(1.0);
    }
    for &(id, count) in &mined {
        let e = &state.pools[k].by_id[&id];
        patches.push(patch_at(seq, e.frame, &e.bbox, model_cfg));
        labels.push(0);
        weights.push(count as f64);
        mined_ids.push(id);
    }
    let (app, mot) = input::batch_patches(&patches)?;
    Ok(DomainBatch {
        app,
        mot,
        labels,
        weights,
        mined_ids,
        n_samples: cfg.batch_pos + cfg.batch_neg,
    })
}

fn patch_at(seq: &Sequence, frame: usize, bbox: &BBox, model_cfg: &ModelConfig) -> input::Patch {
    input::sample_patch(
        &seq.frames,
        frame,
        bbox,
        model_cfg.crop_context,
        model_cfg.input_size,
        model_cfg.frame_stack,
    )
}

fn draw_clips<'s>(
    domains: &'s [Sequence],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<video::Clip>, TrainError> {
    let usable: Vec<&'s Sequence> =
        domains.iter().filter(|s| s.len() >= cfg.clip_len).collect();
    if usable.is_empty() {
        return Err(TrainError::NoUsableReservoir { need: cfg.clip_len });
    }
    let mut clips = Vec::with_capacity(2 * cfg.clips_each_way);
    for direction in [Direction::Forward, Direction::Backward] {
        for _ in 0..cfg.clips_each_way {
            let seq = usable[rng.below(usable.len())];
            let start = rng.below(seq.len() - cfg.clip_len + 1);
            clips.push(extract_clip(seq, start, cfg.clip_len, direction)?);
        }
    }
    Ok(clips)
}

/// Checks every reported term before the parameters move.
fn guard_finite(report: &LossReport, iteration: usize) -> Result<(), TrainError> {
    for (term, v) in [
        ("l_dom", report.l_dom),
        ("l_dom_trained", report.l_dom_trained),
        ("l_adv", report.l_adv),
        ("l_dif", report.l_dif),
        ("l_aot", report.l_aot),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration, term });
        }
    }
    Ok(())
}

/// One supervised iteration over every domain. Terms with a zero weight
/// are skipped wholesale, including their random draws, so a run with
/// masked lambdas is bitwise the run of the reduced objective.
pub fn supervised_iteration(
    state: &mut TrainState,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    domains: &[Sequence],
) -> Result<LossReport, TrainError> {
    let w = &cfg.weights;
    let mut batches = Vec::with_capacity(domains.len());
    for seq in domains {
        batches.push(build_domain_batch(state, cfg, model_cfg, seq)?);
    }
    let clips = if w.lambda3 > 0.0 {
        draw_clips(domains, cfg, &mut state.rng)?
    } else {
        Vec::new()
    };

    let mut fwd = Forward::new(&state.store);
    let mut ce_nodes = Vec::with_capacity(domains.len());
    let mut shared_nodes = Vec::with_capacity(domains.len());
    let mut dif_nodes = Vec::new();
    let mut logit_nodes = Vec::with_capacity(domains.len());
    for (k, b) in batches.iter().enumerate() {
        let feats = fwd.domain_features(k, &b.app, &b.mot, state.fully_shared)?;
        let logits = fwd.domain_head(k, feats.head_in)?;
        let ce = fwd.graph.softmax_cross_entropy(
            logits,
            b.labels.clone(),
            Some(b.weights.clone()),
        )?;
        ce_nodes.push(ce);
        shared_nodes.push(feats.shared);
        logit_nodes.push(logits);
        if w.lambda2 > 0.0 {
            if let Some(private) = feats.private {
                dif_nodes.push(fwd.graph.frobenius_sq_of_product(
                    feats.shared,
                    private,
                    model_cfg.dif_per_sample,
                )?);
            }
        }
    }

    let dom_node = losses::weighted_sum_on_graph(&mut fwd.graph, &ce_nodes, &w.alpha)?;

    let adv_node = if w.lambda1 > 0.0 {
        let all = fwd.graph.concat(&shared_nodes, 0)?;
        let dlogits = fwd.discriminator(model_cfg, all)?;
        let mut domain_of_row = Vec::new();
        for (k, b) in batches.iter().enumerate() {
            domain_of_row.extend(std::iter::repeat(k).take(b.labels.len()));
        }
        Some(fwd.graph.softmax_cross_entropy(dlogits, domain_of_row, None)?)
    } else {
        None
    };

    let dif_node = if dif_nodes.is_empty() {
        None
    } else {
        Some(losses::weighted_sum_on_graph(&mut fwd.graph, &dif_nodes, &vec![1.0; dif_nodes.len()])?)
    };

    let aot_node = if w.lambda3 > 0.0 {
        let refs: Vec<&video::Clip> = clips.iter().collect();
        let (logits, targets) = fwd.aot_logits(model_cfg, &refs)?;
        Some(fwd.graph.sigmoid_cross_entropy(logits, targets, None)?)
    } else {
        None
    };

    let total = combine_on_graph(&mut fwd.graph, Some(dom_node), adv_node, dif_node, aot_node, w)?;

    // the logged tracking metric and the refreshed pool scores both come
    // from the positive-class probabilities of this same forward pass
    let mut per_domain = Vec::with_capacity(domains.len());
    for (k, b) in batches.iter().enumerate() {
        let probs = kernels::softmax_rows(fwd.graph.value(logit_nodes[k]));
        let mut literal = 0.0;
        for (i, &label) in b.labels.iter().enumerate() {
            if label == 1 {
                literal -= clamp_prob(probs.at2(i, 1)).ln();
            }
        }
        literal /= b.n_samples as f64;
        per_domain.push(TrackLosses { literal, trained: fwd.graph.value(ce_nodes[k]).item() });

        let neg_offset = b.labels.iter().filter(|&&l| l == 1).count();
        for (j, &id) in b.mined_ids.iter().enumerate() {
            let score = clamp_prob(probs.at2(neg_offset + j, 1));
            if let Some(e) = state.pools[k].by_id.get_mut(&id) {
                e.score = score;
            }
        }
    }

    let value = |n: Option<NodeId>| n.map_or(0.0, |n| fwd.graph.value(n).item());
    let report = losses::total_loss(
        &per_domain,
        value(adv_node),
        value(dif_node),
        value(aot_node),
        w,
    )?;
    guard_finite(&report, state.supervised_done)?;

    let grads = fwd.graph.backward(total)?;
    state.store.sgd_step(&grads, &state.supervised_lr)?;
    state.supervised_done += 1;
    Ok(report)
}

/// One unsupervised iteration: direction clips from a single reservoir
/// sequence, optionally the discriminator on the same clip features.
/// Private trunks and domain heads receive no gradient and stay bitwise
/// untouched.
pub fn unsupervised_iteration(
    state: &mut TrainState,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    reservoir: &[Sequence],
) -> Result<LossReport, TrainError> {
    let w = &cfg.weights;
    let usable: Vec<&Sequence> = reservoir
        .iter()
        .filter(|s| {
            if s.len() < cfg.clip_len {
                eprintln!(
                    "warning: reservoir sequence (domain {}) has {} frames, needs {}; skipped",
                    s.domain_id,
                    s.len(),
                    cfg.clip_len
                );
                false
            } else {
                true
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(TrainError::NoUsableReservoir { need: cfg.clip_len });
    }
    let seq = usable[state.rng.below(usable.len())];

    let mut clips = Vec::with_capacity(2 * cfg.clips_each_way);
    for direction in [Direction::Forward, Direction::Backward] {
        for _ in 0..cfg.clips_each_way {
            let start = state.rng.below(seq.len() - cfg.clip_len + 1);
            clips.push(extract_clip(seq, start, cfg.clip_len, direction)?);
        }
    }

    let mut fwd = Forward::new(&state.store);
    let refs: Vec<&video::Clip> = clips.iter().collect();
    let feats = fwd.clip_features(model_cfg, &refs)?;
    let logits = fwd.aot_head_on(feats)?;
    let targets: Vec<f64> = clips
        .iter()
        .map(|c| if c.direction == Direction::Forward { 1.0 } else { 0.0 })
        .collect();
    let aot_node = fwd.graph.sigmoid_cross_entropy(logits, targets, None)?;

    let adv_node = if cfg.unsupervised_adv && w.lambda1 > 0.0 {
        if seq.domain_id >= model_cfg.k_domains {
            return Err(TrainError::BadConfig(format!(
                "reservoir domain_id {} outside the {} training domains; \
                 the discriminator has no target for it",
                seq.domain_id, model_cfg.k_domains
            )));
        }
        let dlogits = fwd.discriminator(model_cfg, feats)?;
        let labels = vec![seq.domain_id; clips.len()];
        Some(fwd.graph.softmax_cross_entropy(dlogits, labels, None)?)
    } else {
        None
    };

    let total = combine_on_graph(&mut fwd.graph, None, adv_node, None, Some(aot_node), w)?;

    let value = |n: Option<NodeId>| n.map_or(0.0, |n| fwd.graph.value(n).item());
    let report = losses::total_loss(
        &[],
        value(adv_node),
        0.0,
        fwd.graph.value(aot_node).item(),
        w,
    )?;
    guard_finite(&report, state.supervised_done)?;

    let grads = fwd.graph.backward(total)?;
    state.store.sgd_step(&grads, &state.unsupervised_lr)?;
    state.unsupervised_done += 1;
    Ok(report)
}

// -------------------------------------------------------------- schedule --

pub struct RunArtifacts {
    pub store: ParameterStore,
    pub log_rows: Vec<String>,
    pub trace: Vec<(Phase, usize)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Stable hash of the effective run configuration.
pub fn config_hash(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    fully_shared: bool,
) -> String {
    let blob = serde_json::to_vec(&(cfg, model_cfg, fully_shared)).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&blob);
    format!("{:x}", h.finalize())
}

fn write_checkpoint(
    dir: &Path,
    state: &TrainState,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<PathBuf, TrainError> {
    let name = format!("ckpt_s{:06}_u{:06}.ckpt", state.supervised_done, state.unsupervised_done);
    let path = dir.join(name);
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: config_hash(cfg, model_cfg, state.fully_shared),
        extra: serde_json::to_value(state.snapshot()).expect("snapshot serializes"),
    };
    checkpoint::save(&path, &state.store, &manifest)?;
    Ok(path)
}

/// Runs the interleaved schedule from wherever `state` stands until the
/// supervised budget is spent. Checkpoints land at every block boundary
/// (and once immediately for a fresh state, covering the zero-budget
/// case); the loss log is appended to `training_log.csv` under `out_dir`.
pub fn run_schedule(
    mut state: TrainState,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    domains: &[Sequence],
    reservoir: &[Sequence],
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, TrainError> {
    // unsupervised blocks need a reservoir and a term to train
    let with_unsupervised =
        !reservoir.is_empty() && (cfg.weights.lambda3 > 0.0 || (cfg.unsupervised_adv && cfg.weights.lambda1 > 0.0));

    let mut log_rows = Vec::new();
    let mut trace: Vec<(Phase, usize)> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("training_log.csv");
            let fresh = !path.exists();
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh {
                writeln!(f, "{}", losses::LOG_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    // one trace entry per executed block, partial final block included
    let push_trace = |trace: &mut Vec<(Phase, usize)>, phase: Phase, block: usize| match trace
        .last_mut()
    {
        Some((p, n)) if *p == phase && *n < block => *n += 1,
        _ => trace.push((phase, 1)),
    };
    let record = |rows: &mut Vec<String>,
                      file: &mut Option<fs::File>,
                      iteration: usize,
                      phase: Phase,
                      report: &LossReport|
     -> Result<(), TrainError> {
        let row = losses::log_row(iteration as u64, phase, report);
        if let Some(f) = file {
            writeln!(f, "{row}")?;
        }
        rows.push(row);
        Ok(())
    };

    if state.supervised_done == 0 && state.unsupervised_done == 0 {
        if let Some(dir) = out_dir {
            checkpoints.push(write_checkpoint(dir, &state, cfg, model_cfg)?);
        }
    }

    while state.supervised_done < cfg.supervised_total {
        match state.phase(cfg) {
            Phase::Supervised => {
                let report = supervised_iteration(&mut state, cfg, model_cfg, domains)?;
                record(
                    &mut log_rows,
                    &mut log_file,
                    state.supervised_done,
                    Phase::Supervised,
                    &report,
                )?;
                push_trace(&mut trace, Phase::Supervised, cfg.supervised_block);
                let block_done = state.supervised_done % cfg.supervised_block == 0
                    || state.supervised_done == cfg.supervised_total;
                if block_done {
                    if let Some(dir) = out_dir {
                        checkpoints.push(write_checkpoint(dir, &state, cfg, model_cfg)?);
                    }
                }
            }
            Phase::Unsupervised if with_unsupervised => {
                let report = unsupervised_iteration(&mut state, cfg, model_cfg, reservoir)?;
                record(
                    &mut log_rows,
                    &mut log_file,
                    state.unsupervised_done,
                    Phase::Unsupervised,
                    &report,
                )?;
                push_trace(&mut trace, Phase::Unsupervised, cfg.unsupervised_block);
                if state.unsupervised_done % cfg.unsupervised_block == 0 {
                    if let Some(dir) = out_dir {
                        checkpoints.push(write_checkpoint(dir, &state, cfg, model_cfg)?);
                    }
                }
            }
            Phase::Unsupervised => {
                // no reservoir (or nothing to train on it): account the
                // block as skipped so the phase function moves on
                state.unsupervised_done += cfg.unsupervised_block;
            }
        }
    }

    Ok(RunArtifacts { store: state.store, log_rows, trace, checkpoints })
}

/// Trains one ablation variant: masks the loss weights, drops private
/// trunks for the fully shared row, and runs the schedule.
pub fn train_variant(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    variant: Variant,
    domains: &[Sequence],
    reservoir: &[Sequence],
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, TrainError> {
    let mut cfg = cfg.clone();
    cfg.weights = variant.mask(&cfg.weights);
    let state = TrainState::new(&cfg, model_cfg, variant.fully_shared(), domains)?;
    run_schedule(state, &cfg, model_cfg, domains, reservoir, out_dir)
}
