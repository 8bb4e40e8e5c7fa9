//! Online tracking-by-detection over a frozen shared trunk.
//!
//! Per sequence: a fresh two-class head is trained on the annotated first
//! frame, then every frame is estimated as the highest-scoring of n
//! Gaussian candidates around the previous estimate, refined by ridge
//! regression over the accepted candidates. Accepted frames feed a short
//! window, a long memory, and a scored negative pool; the head is
//! retrained every Δs frames from the window and every Δl frames from the
//! long memory with the most uncertain negatives.
//!
//! Features for every sample come from the frozen trunk exactly once and
//! are cached; head updates never touch a convolution.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Once;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{kernels, EngineError, LrSchedule, ParameterStore, Rng, Tensor};
use crate::losses::LossError;
use crate::mining::{self, MiningError, MiningStrategy, ScoredPool};
use crate::model::{
    fresh_track_head, input, trunk_eval, Forward, ModelConfig, ModelError, SHARED, TRACK_HEAD,
};
use crate::video::{self, BBox, SampleLabel, Sequence, VideoError, MIN_BOX_SIDE};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("bad first-frame box: {0}")]
    BadBox(String),
    #[error("bad tracker config: {0}")]
    BadConfig(String),
    #[error("sequence has {len} frames, cannot step to {frame}")]
    SequenceExhausted { frame: usize, len: usize },
    #[error("sequence carries no first-frame annotation")]
    MissingTruth,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

// ---------------------------------------------------------------- config --

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub init_iterations: usize,
    /// First-frame training rates, hidden vs softmax layer.
    pub init_hidden_lr: f64,
    pub init_output_lr: f64,
    pub update_iterations: usize,
    pub update_hidden_lr: f64,
    pub update_output_lr: f64,
    /// Short-memory update interval Δs.
    pub short_interval: usize,
    /// Long-memory update interval Δl; frames divisible by both run the
    /// long update only.
    pub long_interval: usize,
    pub candidates: usize,
    /// Candidate center spread as a fraction of the box side.
    pub center_sigma: f64,
    /// Log-normal sigma of the candidate scale draw.
    pub scale_sigma: f64,
    /// Samples collected per accepted frame.
    pub collect_pos: usize,
    pub collect_neg: usize,
    /// Update minibatch composition.
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub neg_pool_cap: usize,
    /// Accepted positives kept in long memory before uniform subsampling.
    pub long_pos_cap: usize,
    /// Estimates above this score are accepted into the memories.
    pub accept_threshold: f64,
    /// Negative selection for short-window updates; long updates always
    /// take the scores closest to 0.5.
    pub mining: MiningStrategy,
    pub hmm_subset: usize,
    pub ridge_reg: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            init_iterations: 30,
            init_hidden_lr: 1e-4,
            init_output_lr: 1e-3,
            update_iterations: 10,
            update_hidden_lr: 3e-4,
            update_output_lr: 3e-3,
            short_interval: 15,
            long_interval: 50,
            candidates: 256,
            center_sigma: 0.3,
            scale_sigma: 0.05,
            collect_pos: 50,
            collect_neg: 200,
            batch_pos: 32,
            batch_neg: 96,
            neg_pool_cap: 1024,
            long_pos_cap: 1000,
            accept_threshold: 0.5,
            mining: MiningStrategy::Sunm,
            hmm_subset: 8,
            ridge_reg: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let bad = |msg: String| Err(TrackError::BadConfig(msg));
        if self.short_interval < 1 || self.long_interval <= self.short_interval {
            return bad(format!(
                "intervals must satisfy long > short >= 1, got short {} long {}",
                self.short_interval, self.long_interval
            ));
        }
        if self.neg_pool_cap < self.batch_neg {
            return bad(format!(
                "neg_pool_cap {} below batch_neg {}",
                self.neg_pool_cap, self.batch_neg
            ));
        }
        for (name, v) in [
            ("candidates", self.candidates),
            ("collect_pos", self.collect_pos),
            ("collect_neg", self.collect_neg),
            ("batch_pos", self.batch_pos),
            ("batch_neg", self.batch_neg),
            ("long_pos_cap", self.long_pos_cap),
            ("init_iterations", self.init_iterations),
            ("update_iterations", self.update_iterations),
        ] {
            if v == 0 {
                return bad(format!("{name} = 0"));
            }
        }
        if !(self.accept_threshold > 0.0 && self.accept_threshold < 1.0) {
            return bad(format!(
                "accept_threshold = {}, want within (0, 1)",
                self.accept_threshold
            ));
        }
        for (name, v) in [
            ("init_hidden_lr", self.init_hidden_lr),
            ("init_output_lr", self.init_output_lr),
            ("update_hidden_lr", self.update_hidden_lr),
            ("update_output_lr", self.update_output_lr),
            ("center_sigma", self.center_sigma),
            ("ridge_reg", self.ridge_reg),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v}, want > 0"));
            }
        }
        if self.scale_sigma < 0.0 || !self.scale_sigma.is_finite() {
            return bad(format!("scale_sigma = {}, want >= 0", self.scale_sigma));
        }
        Ok(())
    }
}

// ----------------------------------------------------------------- refiner --

/// Ridge regression from trunk features to r-cnn box deltas
/// (dx, dy, dw, dh): center offsets relative to size, log size ratios.
/// Fitted once on the first-frame positives. Columns are centered at fit
/// time so a feature that never varied there (the motion channels of an
/// all-history-clamped first frame) gets zero weight instead of an
/// arbitrary split with the bias.
#[derive(Clone, Debug, Default)]
pub struct BoxRefiner {
    /// One coefficient row per feature plus a bias row, 4 outputs each.
    coef: Option<Vec<[f64; 4]>>,
    /// Per-column training means subtracted before the product.
    center: Vec<f64>,
}

fn deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fcx, fcy) = from.center();
    let (tcx, tcy) = to.center();
    [
        (tcx - fcx) / from.w,
        (tcy - fcy) / from.h,
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
    ]
}

fn apply_deltas(b: &BBox, d: [f64; 4], fw: f64, fh: f64) -> BBox {
    let (cx, cy) = b.center();
    BBox::from_center(
        cx + d[0] * b.w,
        cy + d[1] * b.h,
        b.w * d[2].exp(),
        b.h * d[3].exp(),
    )
    .clip_to_frame(fw, fh, MIN_BOX_SIDE)
}

/// Cholesky solve of the SPD system a x = b for several right-hand sides;
/// a is overwritten with its factor.
fn cholesky_solve(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) {
    let n = a.len();
    for j in 0..n {
        for k in 0..j {
            let f = a[j][k];
            for i in j..n {
                a[i][j] -= a[i][k] * f;
            }
        }
        // ridge term keeps the pivot strictly positive
        let d = a[j][j].sqrt();
        for i in j..n {
            a[i][j] /= d;
        }
    }
    for rhs in b.iter_mut() {
        for i in 0..n {
            for k in 0..i {
                rhs[i] = rhs[i] - a[i][k] * rhs[k];
            }
            rhs[i] /= a[i][i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                rhs[i] = rhs[i] - a[k][i] * rhs[k];
            }
            rhs[i] /= a[i][i];
        }
    }
}

impl BoxRefiner {
    pub fn unfitted() -> Self {
        Self::default()
    }

    pub fn is_fitted(&self) -> bool {
        self.coef.is_some()
    }

    /// Fits (X^T X + reg I) W = X^T T over one centered feature row per
    /// box, with targets the deltas from each box to `target`. A bias
    /// column is appended to X.
    pub fn fit(features: &[Vec<f64>], boxes: &[BBox], target: &BBox, reg: f64) -> Self {
        assert_eq!(features.len(), boxes.len());
        assert!(!features.is_empty());
        let cols = features[0].len();
        let d = cols + 1;
        let mut center = vec![0.0; cols];
        for f in features {
            for (c, &v) in center.iter_mut().zip(f) {
                *c += v;
            }
        }
        for c in &mut center {
            *c /= features.len() as f64;
        }
        let row = |i: usize| {
            features[i]
                .iter()
                .zip(&center)
                .map(|(v, c)| v - c)
                .chain(std::iter::once(1.0))
        };

        let mut gram = vec![vec![0.0; d]; d];
        let mut rhs = vec![vec![0.0; d]; 4];
        for (i, b) in boxes.iter().enumerate() {
            let t = deltas(b, target);
            for (j, xj) in row(i).enumerate() {
                for (k, xk) in row(i).enumerate().skip(j) {
                    gram[k][j] += xj * xk;
                }
                for out in 0..4 {
                    rhs[out][j] += xj * t[out];
                }
            }
        }
        for j in 0..d {
            gram[j][j] += reg;
            for k in j + 1..d {
                gram[j][k] = gram[k][j];
            }
        }
        cholesky_solve(&mut gram, &mut rhs);
        let coef = (0..d)
            .map(|j| [rhs[0][j], rhs[1][j], rhs[2][j], rhs[3][j]])
            .collect();
        Self { coef: Some(coef), center }
    }

    /// Applies the predicted deltas; an unfitted refiner is the identity
    /// (clipping aside) and warns once.
    pub fn refine(&self, feature: &[f64], raw: &BBox, fw: f64, fh: f64) -> BBox {
        match &self.coef {
            Some(w) => {
                debug_assert_eq!(w.len(), feature.len() + 1);
                let mut d = w[feature.len()];
                for (j, &x) in feature.iter().enumerate() {
                    for out in 0..4 {
                        d[out] += w[j][out] * (x - self.center[j]);
                    }
                }
                apply_deltas(raw, d, fw, fh)
            }
            None => {
                static WARN: Once = Once::new();
                WARN.call_once(|| eprintln!("warning: unfitted box refiner, passing boxes through"));
                raw.clip_to_frame(fw, fh, MIN_BOX_SIDE)
            }
        }
    }
}

// ---------------------------------------------------------------- cadence --

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Short,
    Long,
}

/// Which update a freshly finished frame triggers. Frames divisible by
/// both intervals run the long update only (it subsumes the short one).
pub fn update_kind(t: usize, short_interval: usize, long_interval: usize) -> Option<UpdateKind> {
    if t == 0 {
        None
    } else if t % long_interval == 0 {
        Some(UpdateKind::Long)
    } else if t % short_interval == 0 {
        Some(UpdateKind::Short)
    } else {
        None
    }
}

// ------------------------------------------------------------------ state --

#[derive(Debug)]
struct NegSample {
    feature: Vec<f64>,
    score: f64,
}

/// Scored negative features, insertion-ordered with oldest eviction.
#[derive(Debug, Default)]
struct NegStore {
    order: VecDeque<u64>,
    by_id: BTreeMap<u64, NegSample>,
}

impl NegStore {
    fn push(&mut self, id: u64, sample: NegSample, cap: usize) {
        while self.order.len() >= cap {
            if let Some(old) = self.order.pop_front() {
                self.by_id.remove(&old);
            }
        }
        self.order.push_back(id);
        self.by_id.insert(id, sample);
    }

    fn scored(&self) -> ScoredPool {
        let mut pool = ScoredPool::new();
        for id in &self.order {
            pool.push(*id, self.by_id[id].score).unwrap();
        }
        pool
    }

    fn len(&self) -> usize {
        self.order.len()
    }
}

/// Per-frame outcome: the estimate, its classifier score, and whether the
/// frame was accepted (low-confidence frames keep the previous box).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    pub confident: bool,
}

#[derive(Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    model_cfg: ModelConfig,
    /// Frozen shared trunk plus the live per-sequence head.
    pub store: ParameterStore,
    rng: Rng,
    t: usize,
    last_box: BBox,
    /// Candidate spread multiplier; grows 1.5x per rejected frame, capped
    /// at 3, reset on acceptance.
    sigma_boost: f64,
    short_pos: Vec<Vec<f64>>,
    long_pos: Vec<Vec<f64>>,
    negs: NegStore,
    next_id: u64,
    refiner: BoxRefiner,
    init_lr: LrSchedule,
    update_lr: LrSchedule,
    short_updates: usize,
    long_updates: usize,
    skipped_updates: usize,
}

fn head_schedule(hidden_lr: f64, output_lr: f64) -> LrSchedule {
    // tensors 0..3 are the two hidden layers, 4..5 the softmax layer
    let mut lr = LrSchedule::new();
    lr.set(TRACK_HEAD, hidden_lr).unwrap();
    lr.set_tensor(TRACK_HEAD, 4, output_lr).unwrap();
    lr.set_tensor(TRACK_HEAD, 5, output_lr).unwrap();
    lr
}

fn check_box(b: &BBox, fw: f64, fh: f64) -> Result<(), TrackError> {
    if !(b.x.is_finite() && b.y.is_finite() && b.w.is_finite() && b.h.is_finite()) {
        return Err(TrackError::BadBox(format!("non-finite box {b:?}")));
    }
    if b.w < MIN_BOX_SIDE || b.h < MIN_BOX_SIDE {
        return Err(TrackError::BadBox(format!(
            "{}x{} box below the {MIN_BOX_SIDE} px minimum",
            b.w, b.h
        )));
    }
    if b.x < 0.0 || b.y < 0.0 || b.x + b.w > fw || b.y + b.h > fh {
        return Err(TrackError::BadBox(format!(
            "box {b:?} leaves the {fw}x{fh} frame"
        )));
    }
    Ok(())
}

impl Tracker {
    /// Trains a fresh head on the annotated first frame and fits the box
    /// refiner on its positives. The shared trunk is frozen.
    pub fn init(
        seq: &Sequence,
        truth: &BBox,
        store: &ParameterStore,
        model_cfg: &ModelConfig,
        cfg: &TrackerConfig,
        seed: u64,
    ) -> Result<Self, TrackError> {
        cfg.validate()?;
        let (fw, fh) = (seq.width as f64, seq.height as f64);
        check_box(truth, fw, fh)?;
        if seq.is_empty() {
            return Err(TrackError::SequenceExhausted { frame: 0, len: 0 });
        }

        let mut rng = Rng::new(seed);
        let store = fresh_track_head(store, model_cfg, &mut rng)?;
        let mut tracker = Self {
            cfg: cfg.clone(),
            model_cfg: model_cfg.clone(),
            store,
            rng,
            t: 0,
            last_box: *truth,
            sigma_boost: 1.0,
            short_pos: Vec::new(),
            long_pos: Vec::new(),
            negs: NegStore::default(),
            next_id: 0,
            refiner: BoxRefiner::unfitted(),
            init_lr: head_schedule(cfg.init_hidden_lr, cfg.init_output_lr),
            update_lr: head_schedule(cfg.update_hidden_lr, cfg.update_output_lr),
            short_updates: 0,
            long_updates: 0,
            skipped_updates: 0,
        };

        let (pos_boxes, pos_feats, neg_feats) = tracker.collect(seq, 0, truth)?;
        tracker.absorb(pos_feats.clone(), neg_feats, false);
        tracker.refiner = BoxRefiner::fit(&pos_feats, &pos_boxes, truth, cfg.ridge_reg);

        let lr = tracker.init_lr.clone();
        tracker.train_head(cfg.init_iterations, &lr, NegSelect::Mined)?;
        Ok(tracker)
    }

    pub fn frame(&self) -> usize {
        self.t
    }

    pub fn last_estimate(&self) -> BBox {
        self.last_box
    }

    pub fn short_window_len(&self) -> usize {
        self.short_pos.len()
    }

    pub fn long_memory_len(&self) -> usize {
        self.long_pos.len()
    }

    pub fn neg_pool_len(&self) -> usize {
        self.negs.len()
    }

    pub fn update_counts(&self) -> (usize, usize, usize) {
        (self.short_updates, self.long_updates, self.skipped_updates)
    }

    pub fn search_boost(&self) -> f64 {
        self.sigma_boost
    }

    /// Head scores for arbitrary boxes at a frame.
    pub fn score_boxes(
        &self,
        seq: &Sequence,
        frame: usize,
        boxes: &[BBox],
    ) -> Result<Vec<f64>, TrackError> {
        let feats = self.features_at(seq, frame, boxes)?;
        self.score_features(&feats)
    }

    /// Trunk features for a set of boxes at one frame, one row per box.
    fn features_at(
        &self,
        seq: &Sequence,
        frame: usize,
        boxes: &[BBox],
    ) -> Result<Vec<Vec<f64>>, TrackError> {
        let patches: Vec<input::Patch> = boxes
            .iter()
            .map(|b| {
                input::sample_patch(
                    &seq.frames,
                    frame,
                    b,
                    self.model_cfg.crop_context,
                    self.model_cfg.input_size,
                    self.model_cfg.frame_stack,
                )
            })
            .collect();
        let (app, mot) = input::batch_patches(&patches)?;
        let feats = trunk_eval(&self.store, SHARED, &app, &mot)?;
        let d = feats.shape()[1];
        Ok((0..boxes.len())
            .map(|i| feats.data()[i * d..(i + 1) * d].to_vec())
            .collect())
    }

    /// Head scores (target-class probability) for cached feature rows.
    fn score_features(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, TrackError> {
        let batch = rows_to_tensor(rows);
        let mut fwd = Forward::new(&self.store);
        let x = fwd.graph.input(batch);
        let logits = fwd.track_head(x)?;
        let probs = kernels::softmax_rows(fwd.graph.value(logits));
        Ok((0..rows.len()).map(|i| probs.at2(i, 1)).collect())
    }

    /// Collects IoU-gated samples around `base`, returning positive boxes,
    /// positive features, and scored negative features.
    #[allow(clippy::type_complexity)]
    fn collect(
        &mut self,
        seq: &Sequence,
        frame: usize,
        base: &BBox,
    ) -> Result<(Vec<BBox>, Vec<Vec<f64>>, Vec<(Vec<f64>, f64)>), TrackError> {
        let (fw, fh) = (seq.width as f64, seq.height as f64);
        let samples = video::sample_boxes_around(
            base,
            frame,
            fw,
            fh,
            self.cfg.collect_pos,
            self.cfg.collect_neg,
            &mut self.rng,
        )?;
        let boxes: Vec<BBox> = samples.iter().map(|s| s.bbox).collect();
        let feats = self.features_at(seq, frame, &boxes)?;

        let mut pos_boxes = Vec::with_capacity(self.cfg.collect_pos);
        let mut pos_feats = Vec::with_capacity(self.cfg.collect_pos);
        let mut neg_rows = Vec::with_capacity(self.cfg.collect_neg);
        for (s, f) in samples.iter().zip(feats) {
            match s.label {
                SampleLabel::Positive => {
                    pos_boxes.push(s.bbox);
                    pos_feats.push(f);
                }
                SampleLabel::Negative => neg_rows.push(f),
            }
        }
        // negatives enter the pool with live scores so mining has a
        // gradient to work with from the first update
        let scores = self.score_features(&neg_rows)?;
        let negs = neg_rows.into_iter().zip(scores).collect();
        Ok((pos_boxes, pos_feats, negs))
    }

    /// Files collected samples into the memories and the negative pool.
    /// Init samples skip the short window: it spans only the frames since
    /// the last short update.
    fn absorb(&mut self, pos: Vec<Vec<f64>>, negs: Vec<(Vec<f64>, f64)>, with_window: bool) {
        if with_window {
            self.short_pos.extend(pos.iter().cloned());
        }
        self.long_pos.extend(pos);
        if self.long_pos.len() > self.cfg.long_pos_cap {
            let keep = self
                .rng
                .sample_indices(self.long_pos.len(), self.cfg.long_pos_cap);
            let mut keep = keep;
            keep.sort_unstable();
            self.long_pos = keep.iter().map(|&i| self.long_pos[i].clone()).collect();
        }
        for (feature, score) in negs {
            let id = self.next_id;
            self.next_id += 1;
            self.negs
                .push(id, NegSample { feature, score: score.clamp(1e-12, 1.0 - 1e-12) }, self.cfg.neg_pool_cap);
        }
    }

    /// Minibatch SGD on the head over cached features. Positive rows come
    /// from `pos_source`, negatives from the pool via the configured miner
    /// (or closest-to-0.5 for long updates). Mined scores are refreshed
    /// from each forward pass.
    fn train_head(
        &mut self,
        iterations: usize,
        lr: &LrSchedule,
        select: NegSelect,
    ) -> Result<(), TrackError> {
        for _ in 0..iterations {
            let pos_pool: &[Vec<f64>] = match select {
                NegSelect::Mined => &self.short_pos,
                NegSelect::MostUncertain => &self.long_pos,
            };
            // init runs before any step; its window is the long memory
            let pos_pool = if pos_pool.is_empty() { &self.long_pos } else { pos_pool };
            let picks = pick_indices(pos_pool.len(), self.cfg.batch_pos, &mut self.rng);
            let mut rows: Vec<Vec<f64>> =
                picks.iter().map(|&i| pos_pool[i].clone()).collect();
            let n_pos = rows.len();

            let pool = self.negs.scored();
            let mined = match select {
                NegSelect::Mined => {
                    mining::mine(
                        self.cfg.mining,
                        &pool,
                        self.cfg.batch_neg,
                        self.cfg.hmm_subset,
                        &mut self.rng,
                    )?
                    .ids
                }
                NegSelect::MostUncertain => {
                    mining::grdy_select(&pool, self.cfg.batch_neg.min(pool.len()))?
                }
            };
            let mined = mining::dedup_with_counts(&mined);
            let mut labels = vec![1usize; n_pos];
            let mut weights = vec![1.0; n_pos];
            for &(id, count) in &mined {
                rows.push(self.negs.by_id[&id].feature.clone());
                labels.push(0);
                weights.push(count as f64);
            }

            let batch = rows_to_tensor(&rows);
            let mut fwd = Forward::new(&self.store);
            let x = fwd.graph.input(batch);
            let logits = fwd.track_head(x)?;
            let loss = fwd
                .graph
                .softmax_cross_entropy(logits, labels, Some(weights))?;
            let probs = kernels::softmax_rows(fwd.graph.value(logits));
            for (j, &(id, _)) in mined.iter().enumerate() {
                let s = probs.at2(n_pos + j, 1).clamp(1e-12, 1.0 - 1e-12);
                self.negs.by_id.get_mut(&id).unwrap().score = s;
            }
            let grads = fwd.graph.backward(loss)?;
            self.store.sgd_step(&grads, lr)?;
        }
        Ok(())
    }

    /// Tracks the next frame: score candidates, pick the best, refine over
    /// the accepted ones, update the memories, and run any due retrain.
    pub fn step(&mut self, seq: &Sequence) -> Result<StepResult, TrackError> {
        let frame = self.t + 1;
        if frame >= seq.len() {
            return Err(TrackError::SequenceExhausted { frame, len: seq.len() });
        }
        let (fw, fh) = (seq.width as f64, seq.height as f64);

        let candidates = video::sample_candidates(
            &self.last_box,
            self.cfg.candidates,
            self.cfg.center_sigma * self.sigma_boost,
            self.cfg.scale_sigma * self.sigma_boost,
            fw,
            fh,
            &mut self.rng,
        );
        let feats = self.features_at(seq, frame, &candidates)?;
        let scores = self.score_features(&feats)?;

        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let score = scores[best];
        let confident = score > self.cfg.accept_threshold;

        let estimate = if confident {
            // average the refined accepted candidates for a tight box
            let mut acc = [0.0; 4];
            let mut n = 0.0;
            for (i, &s) in scores.iter().enumerate() {
                if s > self.cfg.accept_threshold {
                    let r = self.refiner.refine(&feats[i], &candidates[i], fw, fh);
                    acc[0] += r.x;
                    acc[1] += r.y;
                    acc[2] += r.w;
                    acc[3] += r.h;
                    n += 1.0;
                }
            }
            BBox::new(acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n)
                .clip_to_frame(fw, fh, MIN_BOX_SIDE)
        } else {
            self.last_box
        };

        if confident {
            self.last_box = estimate;
            self.sigma_boost = 1.0;
            let (_, pos_feats, negs) = self.collect(seq, frame, &estimate)?;
            self.absorb(pos_feats, negs, true);
        } else {
            self.sigma_boost = (self.sigma_boost * 1.5).min(3.0);
        }

        self.t = frame;
        match update_kind(frame, self.cfg.short_interval, self.cfg.long_interval) {
            Some(UpdateKind::Short) => {
                if self.short_pos.is_empty() {
                    eprintln!(
                        "warning: no accepted samples in the last {} frames, skipping the short update at frame {frame}",
                        self.cfg.short_interval
                    );
                    self.skipped_updates += 1;
                } else {
                    let lr = self.update_lr.clone();
                    self.train_head(self.cfg.update_iterations, &lr, NegSelect::Mined)?;
                    self.short_updates += 1;
                }
                self.short_pos.clear();
            }
            Some(UpdateKind::Long) => {
                if self.long_pos.is_empty() {
                    eprintln!("warning: empty long memory, skipping the long update at frame {frame}");
                    self.skipped_updates += 1;
                } else {
                    let lr = self.update_lr.clone();
                    self.train_head(self.cfg.update_iterations, &lr, NegSelect::MostUncertain)?;
                    self.long_updates += 1;
                }
                // the long update subsumes the short one; the window
                // restarts either way
                self.short_pos.clear();
            }
            None => {}
        }

        Ok(StepResult { frame, bbox: estimate, score, confident })
    }
}

#[derive(Clone, Copy)]
enum NegSelect {
    /// Configured mining strategy over the pool.
    Mined,
    /// Ascending |score - 0.5|: the most uncertain negatives.
    MostUncertain,
}

/// Without replacement when the pool suffices, with replacement otherwise.
fn pick_indices(n: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if m <= n {
        rng.sample_indices(n, m)
    } else {
        (0..m).map(|_| rng.below(n)).collect()
    }
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("consistent feature rows")
}

// -------------------------------------------------------------- sequence --

#[derive(Debug)]
pub struct TrackRun {
    pub results: Vec<StepResult>,
    pub short_updates: usize,
    pub long_updates: usize,
    pub skipped_updates: usize,
}

/// One-pass tracking: initialize on the sequence's first annotated frame
/// and run to the end without resets. The first row echoes the annotation.
pub fn track_sequence(
    seq: &Sequence,
    store: &ParameterStore,
    model_cfg: &ModelConfig,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<TrackRun, TrackError> {
    let truth = *seq.truth.first().ok_or(TrackError::MissingTruth)?;
    let mut tracker = Tracker::init(seq, &truth, store, model_cfg, cfg, seed)?;
    let mut results = vec![StepResult { frame: 0, bbox: truth, score: 1.0, confident: true }];
    for _ in 1..seq.len() {
        results.push(tracker.step(seq)?);
    }
    let (short, long, skipped) = tracker.update_counts();
    Ok(TrackRun {
        results,
        short_updates: short,
        long_updates: long,
        skipped_updates: skipped,
    })
}

pub const RESULTS_HEADER: &str = "frame,x,y,w,h,score,confident";

pub fn write_results(path: &Path, results: &[StepResult]) -> Result<(), TrackError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{RESULTS_HEADER}")?;
    for r in results {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.frame,
            r.bbox.x,
            r.bbox.y,
            r.bbox.w,
            r.bbox.h,
            r.score,
            u8::from(r.confident)
        )?;
    }
    Ok(())
}
