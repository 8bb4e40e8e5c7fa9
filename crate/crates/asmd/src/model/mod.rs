//! The shared/private two-stream model family.
//!
//! One trunk maps (appearance stack, motion channels) to a feature vector:
//! two parallel conv streams with residual blocks, motion feeding residual
//! links into appearance, each stream globally average pooled and the
//! results concatenated. The shared trunk is domain-generic; each domain
//! adds a private trunk. Heads: per-domain binary classifiers over
//! [shared|private] features, a K-way domain discriminator behind a
//! gradient reversal, a single-unit direction head over shared features,
//! and the tracker's binary head over frozen shared features.
//!
//! Batch-norm stand-in: after init, a calibration pass folds per-channel
//! standardization of every conv pre-activation into the conv weights and
//! biases. The constants are baked in once and never updated again.

pub mod input;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{kernels, EngineError, Graph, NodeId, ParamKey, ParameterStore, Rng, Tensor};
use crate::video::{Clip, Direction};

pub const SHARED: &str = "shared";
pub const DISCRIMINATOR: &str = "discriminator";
pub const AOT_HEAD: &str = "aot_head";
pub const TRACK_HEAD: &str = "track_head";

pub fn private_name(k: usize) -> String {
    format!("private.{k}")
}

pub fn head_name(k: usize) -> String {
    format!("head.{k}")
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("bad model input: {0}")]
    BadInput(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of training domains K.
    pub k_domains: usize,
    /// Shared feature width d_s.
    pub shared_dim: usize,
    /// Private feature width d_k.
    pub private_dim: usize,
    pub head_hidden: usize,
    pub disc_hidden: usize,
    pub track_hidden: usize,
    /// Gradient reversal strength for the discriminator.
    pub grl_strength: f64,
    /// Side length of resampled box crops.
    pub input_size: usize,
    /// Frames stacked per sample; also the direction-head window length.
    pub frame_stack: usize,
    /// Context multiplier around a box when cropping.
    pub crop_context: f64,
    /// Correlation penalty granularity: per-sample outer products instead of
    /// batch cross-correlation.
    pub dif_per_sample: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_domains: 3,
            shared_dim: 32,
            private_dim: 16,
            head_hidden: 32,
            disc_hidden: 64,
            track_hidden: 32,
            grl_strength: 1.0,
            input_size: 16,
            frame_stack: 5,
            crop_context: 1.4,
            dif_per_sample: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.k_domains == 0 {
            return bad("k_domains must be >= 1".into());
        }
        for (name, v) in [("shared_dim", self.shared_dim), ("private_dim", self.private_dim)] {
            if v < 4 || v % 4 != 0 {
                return bad(format!(
                    "{name} must be a positive multiple of 4 (two streams at quarter and half width), got {v}"
                ));
            }
        }
        for (name, v) in [
            ("head_hidden", self.head_hidden),
            ("disc_hidden", self.disc_hidden),
            ("track_hidden", self.track_hidden),
        ] {
            if v < 2 {
                return bad(format!("{name} must be >= 2, got {v}"));
            }
        }
        if !(self.grl_strength >= 0.0) {
            return bad(format!("grl_strength must be >= 0, got {}", self.grl_strength));
        }
        if self.input_size < 8 {
            return bad(format!("input_size must be >= 8, got {}", self.input_size));
        }
        if self.frame_stack < 2 {
            return bad(format!("frame_stack must be >= 2, got {}", self.frame_stack));
        }
        if !(self.crop_context >= 1.0) {
            return bad(format!("crop_context must be >= 1, got {}", self.crop_context));
        }
        Ok(())
    }

    pub fn appearance_channels(&self) -> usize {
        self.frame_stack
    }

    pub fn motion_channels(&self) -> usize {
        2 * (self.frame_stack - 1)
    }
}

// ------------------------------------------------------------------- init --

fn xavier(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range(-a, a)).collect();
    Tensor::new(shape, data).unwrap()
}

// Conv biases start slightly positive. With zero biases a conv whose whole
// receptive field was clamped by the previous relu emits an exact 0, which
// parks the next relu on its kink; the offset keeps early activations off
// the dead region and keeps pre-activations away from exact zero.
fn conv_init(co: usize, ci: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    (
        xavier(vec![co, ci, 3, 3], ci * 9, co * 9, rng),
        Tensor::full(vec![co], 0.05),
    )
}

fn linear_init(o: usize, i: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    (xavier(vec![o, i], i, o, rng), Tensor::zeros(vec![o]))
}

/// 24 tensors per trunk: 12 per stream, appearance then motion, each stream
/// being conv1, res1(a,b), stride-2 conv2, res2(a,b).
fn trunk_tensors(dim: usize, in_app: usize, in_mot: usize, rng: &mut Rng) -> Vec<Tensor> {
    let c1 = dim / 4;
    let c2 = dim / 2;
    let mut out = Vec::with_capacity(24);
    for in_ch in [in_app, in_mot] {
        for (co, ci) in [
            (c1, in_ch),
            (c1, c1),
            (c1, c1),
            (c2, c1),
            (c2, c2),
            (c2, c2),
        ] {
            let (w, b) = conv_init(co, ci, rng);
            out.push(w);
            out.push(b);
        }
    }
    out
}

fn mlp3_tensors(input: usize, hidden: usize, out: usize, rng: &mut Rng) -> Vec<Tensor> {
    let (w1, b1) = linear_init(hidden, input, rng);
    let (w2, b2) = linear_init(hidden, hidden, rng);
    let (w3, b3) = linear_init(out, hidden, rng);
    vec![w1, b1, w2, b2, w3, b3]
}

/// All partitions for one model, staged for training. `fully_shared` omits
/// the private trunks and sizes heads for shared features alone. The
/// tracker head is not created here: it is stamped per-sequence by
/// [`fresh_track_head`].
pub fn build_model(
    cfg: &ModelConfig,
    fully_shared: bool,
    rng: &mut Rng,
) -> Result<ParameterStore, ModelError> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let (in_app, in_mot) = (cfg.appearance_channels(), cfg.motion_channels());
    store.add_partition(SHARED, trunk_tensors(cfg.shared_dim, in_app, in_mot, rng))?;
    if !fully_shared {
        for k in 0..cfg.k_domains {
            store.add_partition(
                &private_name(k),
                trunk_tensors(cfg.private_dim, in_app, in_mot, rng),
            )?;
        }
    }
    let head_in = if fully_shared {
        cfg.shared_dim
    } else {
        cfg.shared_dim + cfg.private_dim
    };
    for k in 0..cfg.k_domains {
        store.add_partition(&head_name(k), mlp3_tensors(head_in, cfg.head_hidden, 2, rng))?;
    }
    let (dw1, db1) = linear_init(cfg.disc_hidden, cfg.shared_dim, rng);
    let (dw2, db2) = linear_init(cfg.disc_hidden, cfg.disc_hidden, rng);
    let (dw3, db3) = linear_init(cfg.disc_hidden, cfg.disc_hidden, rng);
    let (dw4, db4) = linear_init(cfg.k_domains, cfg.disc_hidden, rng);
    store.add_partition(
        DISCRIMINATOR,
        vec![dw1, db1, dw2, db2, dw3, db3, dw4, db4],
    )?;
    let (aw, ab) = linear_init(1, cfg.shared_dim, rng);
    store.add_partition(AOT_HEAD, vec![aw, ab])?;
    Ok(store)
}

/// Clone of the store with a freshly initialized tracker head and the shared
/// trunk frozen, ready for per-sequence head training.
pub fn fresh_track_head(
    store: &ParameterStore,
    cfg: &ModelConfig,
    rng: &mut Rng,
) -> Result<ParameterStore, ModelError> {
    let mut out = store.clone();
    out.replace_partition(
        TRACK_HEAD,
        mlp3_tensors(cfg.shared_dim, cfg.track_hidden, 2, rng),
    );
    out.set_frozen(SHARED, true)?;
    Ok(out)
}

// -------------------------------------------------------------- graph side --

/// Features produced for one domain batch.
pub struct DomainFeatures {
    /// Shared-trunk features [B, d_s].
    pub shared: NodeId,
    /// Private-trunk features, absent in fully shared mode.
    pub private: Option<NodeId>,
    /// What the domain head consumes ([shared|private] or shared alone).
    pub head_in: NodeId,
}

/// Builds model fragments on a graph, binding store tensors as Param leaves
/// (or Input leaves when the partition is frozen) with caching, so a tensor
/// used twice backpropagates once.
pub struct Forward<'s> {
    pub graph: Graph,
    store: &'s ParameterStore,
    bound: HashMap<ParamKey, NodeId>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    fn bind(&mut self, partition: &str, index: usize) -> Result<NodeId, ModelError> {
        let key = ParamKey::new(partition, index);
        if let Some(&id) = self.bound.get(&key) {
            return Ok(id);
        }
        let value = self.store.tensor(partition, index)?.clone();
        let id = if self.store.is_frozen(partition) {
            self.graph.input(value)
        } else {
            self.graph.param(partition, index, value)
        };
        self.bound.insert(key, id);
        Ok(id)
    }

    fn conv(
        &mut self,
        x: NodeId,
        partition: &str,
        idx: usize,
        stride: usize,
    ) -> Result<NodeId, ModelError> {
        let w = self.bind(partition, idx)?;
        let b = self.bind(partition, idx + 1)?;
        Ok(self.graph.conv2d(x, w, b, stride)?)
    }

    fn res_block(&mut self, x: NodeId, partition: &str, idx: usize) -> Result<NodeId, ModelError> {
        let h = self.conv(x, partition, idx, 1)?;
        let h = self.graph.relu(h);
        let z = self.conv(h, partition, idx + 2, 1)?;
        let sum = self.graph.add(z, x)?;
        Ok(self.graph.relu(sum))
    }

    /// Two-stream trunk over one partition. app/mot are [B, C, H, W].
    pub fn trunk(
        &mut self,
        partition: &str,
        app: &Tensor,
        mot: &Tensor,
    ) -> Result<NodeId, ModelError> {
        let app_in = self.graph.input(app.clone());
        let mot_in = self.graph.input(mot.clone());
        self.trunk_nodes(partition, app_in, mot_in)
    }

    /// Same, but over inputs already on the graph.
    pub fn trunk_nodes(
        &mut self,
        partition: &str,
        app_in: NodeId,
        mot_in: NodeId,
    ) -> Result<NodeId, ModelError> {
        let p = partition;
        let a0 = self.conv(app_in, p, 0, 1)?;
        let a0 = self.graph.relu(a0);
        let a1 = self.res_block(a0, p, 2)?;
        let m0 = self.conv(mot_in, p, 12, 1)?;
        let m0 = self.graph.relu(m0);
        let m1 = self.res_block(m0, p, 14)?;
        let ax = self.graph.add(a1, m1)?; // motion -> appearance link 1
        let a2 = self.conv(ax, p, 6, 2)?;
        let a2 = self.graph.relu(a2);
        let a3 = self.res_block(a2, p, 8)?;
        let m2 = self.conv(m1, p, 18, 2)?;
        let m2 = self.graph.relu(m2);
        let m3 = self.res_block(m2, p, 20)?;
        let a4 = self.graph.add(a3, m3)?; // motion -> appearance link 2
        let fa = self.graph.global_avg_pool(a4)?;
        let fm = self.graph.global_avg_pool(m3)?;
        Ok(self.graph.concat(&[fa, fm], 1)?)
    }

    fn mlp3(&mut self, partition: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w1 = self.bind(partition, 0)?;
        let b1 = self.bind(partition, 1)?;
        let h1 = self.graph.linear(x, w1, b1)?;
        let h1 = self.graph.relu(h1);
        let w2 = self.bind(partition, 2)?;
        let b2 = self.bind(partition, 3)?;
        let h2 = self.graph.linear(h1, w2, b2)?;
        let h2 = self.graph.relu(h2);
        let w3 = self.bind(partition, 4)?;
        let b3 = self.bind(partition, 5)?;
        Ok(self.graph.linear(h2, w3, b3)?)
    }

    /// Shared (and private, unless fully shared) features for one domain
    /// batch, plus the head input.
    pub fn domain_features(
        &mut self,
        k: usize,
        app: &Tensor,
        mot: &Tensor,
        fully_shared: bool,
    ) -> Result<DomainFeatures, ModelError> {
        let app_in = self.graph.input(app.clone());
        let mot_in = self.graph.input(mot.clone());
        let shared = self.trunk_nodes(SHARED, app_in, mot_in)?;
        if fully_shared {
            Ok(DomainFeatures {
                shared,
                private: None,
                head_in: shared,
            })
        } else {
            let private = self.trunk_nodes(&private_name(k), app_in, mot_in)?;
            let head_in = self.graph.concat(&[shared, private], 1)?;
            Ok(DomainFeatures {
                shared,
                private: Some(private),
                head_in,
            })
        }
    }

    /// Binary target/background logits [B, 2] for domain k.
    pub fn domain_head(&mut self, k: usize, head_in: NodeId) -> Result<NodeId, ModelError> {
        self.mlp3(&head_name(k), head_in)
    }

    /// K-way domain logits behind the gradient reversal.
    pub fn discriminator(
        &mut self,
        cfg: &ModelConfig,
        shared: NodeId,
    ) -> Result<NodeId, ModelError> {
        let g = self.graph.grad_reverse(shared, cfg.grl_strength)?;
        let mut h = g;
        for layer in 0..3 {
            let w = self.bind(DISCRIMINATOR, layer * 2)?;
            let b = self.bind(DISCRIMINATOR, layer * 2 + 1)?;
            h = self.graph.linear(h, w, b)?;
            h = self.graph.relu(h);
        }
        let w = self.bind(DISCRIMINATOR, 6)?;
        let b = self.bind(DISCRIMINATOR, 7)?;
        Ok(self.graph.linear(h, w, b)?)
    }

    /// Shared-trunk features [B, dim] for a batch of clips: one trunk pass
    /// per non-overlapping window, averaged across windows.
    pub fn clip_features(
        &mut self,
        cfg: &ModelConfig,
        clips: &[&Clip],
    ) -> Result<NodeId, ModelError> {
        let batches = input::clip_window_batches(clips, cfg.frame_stack)?;
        let mut mean: Option<NodeId> = None;
        for (app, mot) in &batches {
            let f = self.trunk(SHARED, app, mot)?;
            mean = Some(match mean {
                None => f,
                Some(acc) => self.graph.add(acc, f)?,
            });
        }
        let mut mean = mean.expect("clip_window_batches yields at least one window");
        if batches.len() > 1 {
            mean = self.graph.scale(mean, 1.0 / batches.len() as f64);
        }
        Ok(mean)
    }

    /// Single-unit direction head over already-built clip features.
    pub fn aot_head_on(&mut self, features: NodeId) -> Result<NodeId, ModelError> {
        let w = self.bind(AOT_HEAD, 0)?;
        let b = self.bind(AOT_HEAD, 1)?;
        Ok(self.graph.linear(features, w, b)?)
    }

    /// Direction logits [B, 1] for a batch of clips through the single-unit
    /// head over [`Self::clip_features`]. Returns the logits and the
    /// 1.0/0.0 direction targets.
    pub fn aot_logits(
        &mut self,
        cfg: &ModelConfig,
        clips: &[&Clip],
    ) -> Result<(NodeId, Vec<f64>), ModelError> {
        let mean = self.clip_features(cfg, clips)?;
        let logits = self.aot_head_on(mean)?;
        let targets = clips
            .iter()
            .map(|c| if c.direction == Direction::Forward { 1.0 } else { 0.0 })
            .collect();
        Ok((logits, targets))
    }

    /// Tracker head logits [B, 2] over shared features.
    pub fn track_head(&mut self, shared: NodeId) -> Result<NodeId, ModelError> {
        self.mlp3(TRACK_HEAD, shared)
    }
}

// --------------------------------------------------------------- eval side --

/// Graph-free trunk forward. Bitwise-identical to the graph path (same
/// kernels in the same order).
pub fn trunk_eval(
    store: &ParameterStore,
    partition: &str,
    app: &Tensor,
    mot: &Tensor,
) -> Result<Tensor, ModelError> {
    let conv = |x: &Tensor, idx: usize, stride: usize| -> Result<Tensor, ModelError> {
        Ok(kernels::conv2d(
            x,
            store.tensor(partition, idx)?,
            store.tensor(partition, idx + 1)?,
            stride,
        )?)
    };
    let res = |x: &Tensor, idx: usize| -> Result<Tensor, ModelError> {
        let h = kernels::relu(&conv(x, idx, 1)?);
        let z = conv(&h, idx + 2, 1)?;
        Ok(kernels::relu(&kernels::add(&z, x)?))
    };
    let a0 = kernels::relu(&conv(app, 0, 1)?);
    let a1 = res(&a0, 2)?;
    let m0 = kernels::relu(&conv(mot, 12, 1)?);
    let m1 = res(&m0, 14)?;
    let ax = kernels::add(&a1, &m1)?;
    let a2 = kernels::relu(&conv(&ax, 6, 2)?);
    let a3 = res(&a2, 8)?;
    let m2 = kernels::relu(&conv(&m1, 18, 2)?);
    let m3 = res(&m2, 20)?;
    let a4 = kernels::add(&a3, &m3)?;
    let fa = kernels::global_avg_pool(&a4)?;
    let fm = kernels::global_avg_pool(&m3)?;
    Ok(kernels::concat(&[&fa, &fm], 1)?)
}

/// Graph-free three-layer head forward ([B, in] -> [B, out]).
pub fn mlp3_eval(
    store: &ParameterStore,
    partition: &str,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let lin = |x: &Tensor, idx: usize| -> Result<Tensor, ModelError> {
        Ok(kernels::linear(
            x,
            store.tensor(partition, idx)?,
            store.tensor(partition, idx + 1)?,
        )?)
    };
    let h1 = kernels::relu(&lin(x, 0)?);
    let h2 = kernels::relu(&lin(&h1, 2)?);
    lin(&h2, 4)
}

/// Direction logits for clips without building a graph.
pub fn aot_scores(
    store: &ParameterStore,
    cfg: &ModelConfig,
    clips: &[&Clip],
) -> Result<Vec<f64>, ModelError> {
    let batches = input::clip_window_batches(clips, cfg.frame_stack)?;
    let mut mean: Option<Tensor> = None;
    for (app, mot) in &batches {
        let f = trunk_eval(store, SHARED, app, mot)?;
        mean = Some(match mean {
            None => f,
            Some(acc) => kernels::add(&acc, &f)?,
        });
    }
    let mut mean = mean.unwrap();
    if batches.len() > 1 {
        mean = kernels::scale(&mean, 1.0 / batches.len() as f64);
    }
    let logits = kernels::linear(
        &mean,
        store.tensor(AOT_HEAD, 0)?,
        store.tensor(AOT_HEAD, 1)?,
    )?;
    Ok(logits.data().to_vec())
}

// ------------------------------------------------------------- calibration --

/// Per-channel standardization of every conv pre-activation, folded into
/// the conv weights and bias in place. Runs the same two-stream pass the
/// trunk uses, so each conv is folded before anything downstream of it is
/// measured. Channel std is floored to keep dead channels finite.
pub fn calibrate_trunk(
    store: &mut ParameterStore,
    partition: &str,
    app: &Tensor,
    mot: &Tensor,
) -> Result<(), ModelError> {
    const STD_FLOOR: f64 = 1e-3;

    // conv + fold + return standardized pre-activation
    fn step(
        store: &mut ParameterStore,
        partition: &str,
        idx: usize,
        x: &Tensor,
        stride: usize,
    ) -> Result<Tensor, ModelError> {
        let mut z = kernels::conv2d(
            x,
            store.tensor(partition, idx)?,
            store.tensor(partition, idx + 1)?,
            stride,
        )?;
        let (bs, c) = (z.shape()[0], z.shape()[1]);
        let hw = z.shape()[2] * z.shape()[3];
        let n = (bs * hw) as f64;
        let mut mu = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..bs {
            for ch in 0..c {
                let plane = &z.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for &v in plane {
                    mu[ch] += v;
                }
            }
        }
        for m in &mut mu {
            *m /= n;
        }
        for b in 0..bs {
            for ch in 0..c {
                let plane = &z.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for &v in plane {
                    var[ch] += (v - mu[ch]) * (v - mu[ch]);
                }
            }
        }
        let sigma: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();

        {
            let w = store.tensor_mut(partition, idx)?;
            let per_ch = w.numel() / c;
            for ch in 0..c {
                for v in &mut w.data_mut()[ch * per_ch..(ch + 1) * per_ch] {
                    *v /= sigma[ch];
                }
            }
        }
        {
            let b = store.tensor_mut(partition, idx + 1)?;
            for ch in 0..c {
                b.data_mut()[ch] = (b.data()[ch] - mu[ch]) / sigma[ch];
            }
        }
        for b in 0..bs {
            for ch in 0..c {
                let plane =
                    &mut z.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for v in plane {
                    *v = (*v - mu[ch]) / sigma[ch];
                }
            }
        }
        Ok(z)
    }

    fn res_cal(
        store: &mut ParameterStore,
        partition: &str,
        idx: usize,
        x: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let h = kernels::relu(&step(store, partition, idx, x, 1)?);
        let z = step(store, partition, idx + 2, &h, 1)?;
        Ok(kernels::relu(&kernels::add(&z, x)?))
    }

    let a0 = kernels::relu(&step(store, partition, 0, app, 1)?);
    let a1 = res_cal(store, partition, 2, &a0)?;
    let m0 = kernels::relu(&step(store, partition, 12, mot, 1)?);
    let m1 = res_cal(store, partition, 14, &m0)?;
    let ax = kernels::add(&a1, &m1)?;
    let a2 = kernels::relu(&step(store, partition, 6, &ax, 2)?);
    let _a3 = res_cal(store, partition, 8, &a2)?;
    let m2 = kernels::relu(&step(store, partition, 18, &m1, 2)?);
    let _m3 = res_cal(store, partition, 20, &m2)?;
    Ok(())
}
