//! Synthetic grayscale video: domain specs, sequence synthesis, boxes,
//! IoU-gated sample drawing, and direction-labeled clips with motion
//! channels.
//!
//! A domain is a family of sequences sharing target shape, texture,
//! intensity palette, kinematics and clutter statistics. Targets move with
//! constant velocity plus optional per-frame acceleration and reflect off
//! frame edges. Clutter comes in two kinds: static blobs and moving
//! distractors that imitate the target at reduced size.

pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Rng, Tensor};

pub const POS_IOU: f64 = 0.7;
pub const NEG_IOU: f64 = 0.5;
/// Total draws allowed per sample_training_boxes call.
pub const REJECTION_BUDGET: usize = 10_000;
/// Boxes are never clipped below this side length.
pub const MIN_BOX_SIDE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("sequence length {got} below minimum {need}")]
    TooShort { got: usize, need: usize },
    #[error("frame {h}x{w} too small for target of size {need:.1}")]
    FrameTooSmall { h: usize, w: usize, need: f64 },
    #[error(
        "rejection budget {budget} exhausted at frame {frame} \
         ({accepted_pos} positives, {accepted_neg} negatives accepted)"
    )]
    RejectionBudget {
        frame: usize,
        accepted_pos: usize,
        accepted_neg: usize,
        budget: usize,
    },
    #[error("bad domain set: {0}")]
    BadDomainSet(String),
    #[error("clip [{start}, {start}+{len}) outside sequence of {t} frames")]
    ClipOutOfRange { start: usize, len: usize, t: usize },
    #[error("frame index {frame} outside sequence of {t} frames")]
    FrameOutOfRange { frame: usize, t: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {msg}")]
    BadSequenceDir { path: String, msg: String },
}

// ------------------------------------------------------------------ boxes --

/// Axis-aligned box, (x, y) top-left corner, in pixels. Fractional
/// coordinates are meaningful: truth boxes track sub-pixel motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clips to [0, fw] x [0, fh] while keeping at least `min_side` per axis
    /// (the box is shifted inward rather than shrunk below that).
    pub fn clip_to_frame(&self, fw: f64, fh: f64, min_side: f64) -> BBox {
        let w = self.w.min(fw).max(min_side);
        let h = self.h.min(fh).max(min_side);
        let x = self.x.clamp(0.0, fw - w);
        let y = self.y.clamp(0.0, fh - h);
        BBox { x, y, w, h }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }
}

/// Intersection-over-union of two boxes with positive extents.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    debug_assert!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0);
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

// ---------------------------------------------------------------- domains --

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
    Diamond,
    Cross,
}

/// Everything that makes one synthetic domain look and move like itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub shape: ShapeKind,
    /// Texture cycles per pixel along x+y.
    pub texture_freq: f64,
    /// Target fill intensity in [0, 1].
    pub target_intensity: f64,
    pub background_intensity: f64,
    /// Target side length in pixels.
    pub target_size: f64,
    /// Per-axis speed magnitude range, px/frame.
    pub velocity_range: (f64, f64),
    /// Added to the velocity every frame (e.g. gravity (0.0, 0.2)).
    pub acceleration: (f64, f64),
    /// Scales clutter counts; 1.0 gives 6 static blobs and 2 distractors.
    pub clutter_density: f64,
    /// Gaussian pixel noise sigma.
    pub noise_level: f64,
    /// Pin the first-frame target center (tests, demos). Random if absent.
    #[serde(default)]
    pub start_center: Option<(f64, f64)>,
    #[serde(default)]
    pub start_velocity: Option<(f64, f64)>,
}

impl DomainSpec {
    pub fn has_acceleration(&self) -> bool {
        self.acceleration.0 != 0.0 || self.acceleration.1 != 0.0
    }
}

/// A training corpus needs ids matching positions and enough accelerated
/// domains that motion cues cannot be ignored.
pub fn validate_domain_set(domains: &[DomainSpec]) -> Result<(), VideoError> {
    if domains.is_empty() {
        return Err(VideoError::BadDomainSet("no domains configured".into()));
    }
    for (i, d) in domains.iter().enumerate() {
        if d.domain_id != i {
            return Err(VideoError::BadDomainSet(format!(
                "domain at position {i} has id {}, ids must be 0..K-1 in order",
                d.domain_id
            )));
        }
    }
    let accelerated = domains.iter().filter(|d| d.has_acceleration()).count();
    if accelerated * 2 < domains.len() {
        return Err(VideoError::BadDomainSet(format!(
            "{accelerated} of {} domains have nonzero acceleration, need at least half",
            domains.len()
        )));
    }
    Ok(())
}

// --------------------------------------------------------------- sequence --

/// Frames are [H, W] tensors in [0, 1]; truth boxes are exact (pre-noise
/// kinematics, not fitted to pixels).
#[derive(Clone, Debug)]
pub struct Sequence {
    pub domain_id: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Tensor>,
    pub truth: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub const MIN_SEQUENCE_LEN: usize = 10;

struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    size: f64,
    phase: f64,
    intensity: f64,
}

impl Mover {
    /// Advance one frame with reflective bounces that also flip velocity.
    fn step(&mut self, ax: f64, ay: f64, fw: f64, fh: f64) {
        self.cx += self.vx;
        self.cy += self.vy;
        self.vx += ax;
        self.vy += ay;
        let half = self.size / 2.0;
        let (lo_x, hi_x) = (half, fw - half);
        let (lo_y, hi_y) = (half, fh - half);
        // A frame is many target sizes wide, so one reflection suffices for
        // sane velocities; loop anyway to stay total.
        for _ in 0..4 {
            let mut bounced = false;
            if self.cx < lo_x {
                self.cx = 2.0 * lo_x - self.cx;
                self.vx = -self.vx;
                bounced = true;
            } else if self.cx > hi_x {
                self.cx = 2.0 * hi_x - self.cx;
                self.vx = -self.vx;
                bounced = true;
            }
            if self.cy < lo_y {
                self.cy = 2.0 * lo_y - self.cy;
                self.vy = -self.vy;
                bounced = true;
            } else if self.cy > hi_y {
                self.cy = 2.0 * hi_y - self.cy;
                self.vy = -self.vy;
                bounced = true;
            }
            if !bounced {
                break;
            }
        }
    }
}

fn inside_shape(kind: ShapeKind, dx: f64, dy: f64, half: f64) -> bool {
    match kind {
        ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
        ShapeKind::Disc => dx * dx + dy * dy <= half * half,
        ShapeKind::Diamond => dx.abs() + dy.abs() <= half,
        ShapeKind::Cross => {
            let arm = half / 3.0;
            (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
        }
    }
}

fn render_blob(
    frame: &mut Tensor,
    h: usize,
    w: usize,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    intensity: f64,
    texture_amp: f64,
    texture_freq: f64,
    phase: f64,
) {
    let half = size / 2.0;
    let y0 = ((cy - half).floor().max(0.0)) as usize;
    let y1 = ((cy + half).ceil().min(h as f64)) as usize;
    let x0 = ((cx - half).floor().max(0.0)) as usize;
    let x1 = ((cx + half).ceil().min(w as f64)) as usize;
    let data = frame.data_mut();
    for py in y0..y1 {
        for px in x0..x1 {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if inside_shape(kind, dx, dy, half) {
                let tex = (std::f64::consts::TAU * texture_freq * (px + py) as f64 + phase).sin();
                data[py * w + px] = (intensity + texture_amp * tex).clamp(0.0, 1.0);
            }
        }
    }
}

/// Renders `t_len` frames of one sequence. All randomness (start state,
/// clutter placement, pixel noise) comes from `seed`.
pub fn generate_sequence(
    spec: &DomainSpec,
    t_len: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Sequence, VideoError> {
    if t_len < MIN_SEQUENCE_LEN {
        return Err(VideoError::TooShort {
            got: t_len,
            need: MIN_SEQUENCE_LEN,
        });
    }
    let (fw, fh) = (width as f64, height as f64);
    if spec.target_size + 2.0 > fw.min(fh) {
        return Err(VideoError::FrameTooSmall {
            h: height,
            w: width,
            need: spec.target_size + 2.0,
        });
    }
    let mut rng = Rng::new(seed);
    let half = spec.target_size / 2.0;

    let (cx, cy) = spec.start_center.unwrap_or_else(|| {
        (
            rng.range(half, fw - half),
            rng.range(half, fh - half),
        )
    });
    let (vx, vy) = spec.start_velocity.unwrap_or_else(|| {
        let (lo, hi) = spec.velocity_range;
        let mag_x = rng.range(lo, hi);
        let mag_y = rng.range(lo, hi);
        (
            if rng.coin() { mag_x } else { -mag_x },
            if rng.coin() { mag_y } else { -mag_y },
        )
    });
    let mut target = Mover {
        cx,
        cy,
        vx,
        vy,
        size: spec.target_size,
        phase: rng.range(0.0, std::f64::consts::TAU),
        intensity: spec.target_intensity,
    };

    let contrast = spec.target_intensity - spec.background_intensity;
    let n_static = (spec.clutter_density * 6.0).round() as usize;
    let n_distract = (spec.clutter_density * 2.0).floor() as usize;

    struct StaticBlob {
        cx: f64,
        cy: f64,
        size: f64,
        phase: f64,
        intensity: f64,
    }
    let statics: Vec<StaticBlob> = (0..n_static)
        .map(|_| {
            let size = spec.target_size * rng.range(0.5, 0.8);
            StaticBlob {
                cx: rng.range(size / 2.0, fw - size / 2.0),
                cy: rng.range(size / 2.0, fh - size / 2.0),
                size,
                phase: rng.range(0.0, std::f64::consts::TAU),
                intensity: spec.background_intensity + 0.6 * contrast,
            }
        })
        .collect();

    let mut distractors: Vec<Mover> = (0..n_distract)
        .map(|_| {
            let size = spec.target_size * 0.75;
            let dh = size / 2.0;
            let (lo, hi) = spec.velocity_range;
            let mag_x = rng.range(lo, hi);
            let mag_y = rng.range(lo, hi);
            Mover {
                cx: rng.range(dh, fw - dh),
                cy: rng.range(dh, fh - dh),
                vx: if rng.coin() { mag_x } else { -mag_x },
                vy: if rng.coin() { mag_y } else { -mag_y },
                size,
                phase: rng.range(0.0, std::f64::consts::TAU),
                intensity: spec.background_intensity + 0.85 * contrast,
            }
        })
        .collect();

    let texture_amp = 0.25 * contrast.abs();
    let mut frames = Vec::with_capacity(t_len);
    let mut truth = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut frame = Tensor::full(vec![height, width], spec.background_intensity);
        for s in &statics {
            render_blob(
                &mut frame, height, width, spec.shape, s.cx, s.cy, s.size, s.intensity,
                texture_amp, spec.texture_freq, s.phase,
            );
        }
        for d in &distractors {
            render_blob(
                &mut frame, height, width, spec.shape, d.cx, d.cy, d.size, d.intensity,
                texture_amp, spec.texture_freq, d.phase,
            );
        }
        render_blob(
            &mut frame, height, width, spec.shape, target.cx, target.cy, target.size,
            target.intensity, texture_amp, spec.texture_freq, target.phase,
        );
        if spec.noise_level > 0.0 {
            for v in frame.data_mut() {
                *v = (*v + spec.noise_level * rng.normal()).clamp(0.0, 1.0);
            }
        }
        truth.push(BBox::from_center(
            target.cx,
            target.cy,
            spec.target_size,
            spec.target_size,
        ));
        frames.push(frame);

        target.step(spec.acceleration.0, spec.acceleration.1, fw, fh);
        for d in &mut distractors {
            d.step(spec.acceleration.0, spec.acceleration.1, fw, fh);
        }
    }

    Ok(Sequence {
        domain_id: spec.domain_id,
        height,
        width,
        frames,
        truth,
    })
}

// ------------------------------------------------------------------ clips --

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Contiguous frame window with per-pair motion channels and a direction
/// label. Backward clips hold the same frames in reversed order, with motion
/// recomputed, which makes it exactly the negated reversal of the forward
/// motion.
#[derive(Clone, Debug)]
pub struct Clip {
    pub domain_id: usize,
    pub direction: Direction,
    pub frames: Vec<Tensor>,
    /// One [2, H, W] tensor (x channel, y channel) per consecutive pair.
    pub motion: Vec<Tensor>,
}

/// Signed motion channels for one frame pair: displaced mass times the
/// spatial gradient of the pair mean. Built to be exactly antisymmetric
/// under time reversal: swapping a and b negates both channels.
pub fn motion_pair(a: &Tensor, b: &Tensor) -> Tensor {
    let h = a.shape()[0];
    let w = a.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; 2 * h * w];
    let (chx, chy) = out.split_at_mut(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let diff = ad[i] - bd[i];
            let xm = if x > 0 { i - 1 } else { i };
            let xp = if x + 1 < w { i + 1 } else { i };
            let ym = if y > 0 { i - w } else { i };
            let yp = if y + 1 < h { i + w } else { i };
            let gx = ((ad[xp] + bd[xp]) - (ad[xm] + bd[xm])) / 4.0;
            let gy = ((ad[yp] + bd[yp]) - (ad[ym] + bd[ym])) / 4.0;
            chx[i] = diff * gx;
            chy[i] = diff * gy;
        }
    }
    Tensor::new(vec![2, h, w], out).unwrap()
}

pub fn motion_channels(frames: &[Tensor]) -> Vec<Tensor> {
    frames
        .windows(2)
        .map(|p| motion_pair(&p[0], &p[1]))
        .collect()
}

pub fn extract_clip(
    seq: &Sequence,
    start: usize,
    len: usize,
    direction: Direction,
) -> Result<Clip, VideoError> {
    if len < 2 || start + len > seq.len() {
        return Err(VideoError::ClipOutOfRange {
            start,
            len,
            t: seq.len(),
        });
    }
    let mut frames: Vec<Tensor> = seq.frames[start..start + len].to_vec();
    if direction == Direction::Backward {
        frames.reverse();
    }
    let motion = motion_channels(&frames);
    Ok(Clip {
        domain_id: seq.domain_id,
        direction,
        frames,
        motion,
    })
}

// -------------------------------------------------------------- sampling --

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleLabel {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleBox {
    pub bbox: BBox,
    pub label: SampleLabel,
}

/// Gaussian perturbations of the truth box, accepted by IoU gate:
/// positives need IoU >= 0.7, negatives IoU <= 0.5. IoU is measured after
/// clipping to the frame. One shared rejection budget covers the call.
pub fn sample_training_boxes(
    seq: &Sequence,
    frame: usize,
    n_pos: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<Vec<SampleBox>, VideoError> {
    let truth = *seq
        .truth
        .get(frame)
        .ok_or(VideoError::FrameOutOfRange {
            frame,
            t: seq.len(),
        })?;
    sample_boxes_around(
        &truth,
        frame,
        seq.width as f64,
        seq.height as f64,
        n_pos,
        n_neg,
        rng,
    )
}

/// Same IoU-gated sampling around an arbitrary base box; the tracker
/// samples around its own estimate, where no truth exists. `frame` only
/// labels a budget error.
pub fn sample_boxes_around(
    base: &BBox,
    frame: usize,
    fw: f64,
    fh: f64,
    n_pos: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<Vec<SampleBox>, VideoError> {
    let truth = *base;
    let side = (truth.w + truth.h) / 2.0;
    let (tcx, tcy) = truth.center();

    let mut out = Vec::with_capacity(n_pos + n_neg);
    let mut budget = REJECTION_BUDGET;
    let draw = |rng: &mut Rng,
                    sigma_c: f64,
                    sigma_s: f64,
                    want: SampleLabel,
                    budget: &mut usize|
     -> Option<BBox> {
        while *budget > 0 {
            *budget -= 1;
            let cx = tcx + sigma_c * rng.normal();
            let cy = tcy + sigma_c * rng.normal();
            let s = rng.log_normal(sigma_s);
            let cand = BBox::from_center(cx, cy, truth.w * s, truth.h * s)
                .clip_to_frame(fw, fh, MIN_BOX_SIDE);
            let v = iou(&cand, &truth);
            let ok = match want {
                SampleLabel::Positive => v >= POS_IOU,
                SampleLabel::Negative => v <= NEG_IOU,
            };
            if ok {
                return Some(cand);
            }
        }
        None
    };

    for _ in 0..n_pos {
        match draw(rng, 0.1 * side, 0.05, SampleLabel::Positive, &mut budget) {
            Some(bbox) => out.push(SampleBox {
                bbox,
                label: SampleLabel::Positive,
            }),
            None => {
                return Err(VideoError::RejectionBudget {
                    frame,
                    accepted_pos: out.len(),
                    accepted_neg: 0,
                    budget: REJECTION_BUDGET,
                })
            }
        }
    }
    let n_pos_got = out.len();
    for _ in 0..n_neg {
        match draw(rng, 1.2 * side, 0.3, SampleLabel::Negative, &mut budget) {
            Some(bbox) => out.push(SampleBox {
                bbox,
                label: SampleLabel::Negative,
            }),
            None => {
                return Err(VideoError::RejectionBudget {
                    frame,
                    accepted_pos: n_pos_got,
                    accepted_neg: out.len() - n_pos_got,
                    budget: REJECTION_BUDGET,
                })
            }
        }
    }
    Ok(out)
}

/// Tracker candidate cloud: centers drawn from an isotropic Gaussian of
/// sigma = sigma_frac * mean side, one shared log-normal scale per
/// candidate (aspect preserved), all clipped to the frame. sigma 0 returns
/// n copies of the previous box.
pub fn sample_candidates(
    last: &BBox,
    n: usize,
    sigma_frac: f64,
    scale_sigma: f64,
    fw: f64,
    fh: f64,
    rng: &mut Rng,
) -> Vec<BBox> {
    debug_assert!(n >= 1);
    let side = (last.w + last.h) / 2.0;
    let (cx, cy) = last.center();
    (0..n)
        .map(|_| {
            let nx = cx + sigma_frac * side * rng.normal();
            let ny = cy + sigma_frac * side * rng.normal();
            let s = if scale_sigma > 0.0 {
                rng.log_normal(scale_sigma)
            } else {
                1.0
            };
            BBox::from_center(nx, ny, last.w * s, last.h * s).clip_to_frame(fw, fh, MIN_BOX_SIDE)
        })
        .collect()
}
