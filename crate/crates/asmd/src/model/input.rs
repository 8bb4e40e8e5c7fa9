//! From frames and boxes to network input tensors.
//!
//! A sample is a context-expanded crop around a box, resampled to a fixed
//! square, stacked with the previous frames' crops of the same window
//! (appearance channels) and the motion channels computed between those
//! crops. Clips feed the same trunk at native frame resolution.

use crate::engine::Tensor;
use crate::video::{motion_channels, BBox, Clip};

use super::ModelError;

/// Bilinear resample of an [H, W] tensor onto an oh x ow grid spanning the
/// axis-aligned region [x0, x0+w) x [y0, y0+h) in source pixel coordinates.
/// Reads outside the source clamp to the border (half-pixel convention, so
/// an identity-sized resample of the full frame is exact).
pub fn resample_region(
    src: &Tensor,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (sh, sw) = (src.shape()[0], src.shape()[1]);
    let data = src.data();
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = y0 + (oy as f64 + 0.5) * h / oh as f64 - 0.5;
        let fy = sy.floor();
        let ty = sy - fy;
        let y_lo = (fy.max(0.0) as usize).min(sh - 1);
        let y_hi = ((fy + 1.0).max(0.0) as usize).min(sh - 1);
        for ox in 0..ow {
            let sx = x0 + (ox as f64 + 0.5) * w / ow as f64 - 0.5;
            let fx = sx.floor();
            let tx = sx - fx;
            let x_lo = (fx.max(0.0) as usize).min(sw - 1);
            let x_hi = ((fx + 1.0).max(0.0) as usize).min(sw - 1);
            let v00 = data[y_lo * sw + x_lo];
            let v01 = data[y_lo * sw + x_hi];
            let v10 = data[y_hi * sw + x_lo];
            let v11 = data[y_hi * sw + x_hi];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[oy * ow + ox] = top + (bot - top) * ty;
        }
    }
    Tensor::new(vec![oh, ow], out).unwrap()
}

/// Crop a box with multiplicative context around its center, resampled to
/// `out` x `out`.
pub fn crop_patch(frame: &Tensor, b: &BBox, context: f64, out: usize) -> Tensor {
    let (cx, cy) = b.center();
    let w = b.w * context;
    let h = b.h * context;
    resample_region(frame, cx - w / 2.0, cy - h / 2.0, w, h, out, out)
}

/// One network sample: appearance stack plus motion channels, both over the
/// same spatial crop across the last `stack` frames (clamped at the start of
/// the sequence, so early frames repeat frame 0).
#[derive(Clone, Debug)]
pub struct Patch {
    /// [stack, out, out]
    pub appearance: Tensor,
    /// [2*(stack-1), out, out]
    pub motion: Tensor,
}

pub fn sample_patch(
    frames: &[Tensor],
    t: usize,
    b: &BBox,
    context: f64,
    out: usize,
    stack: usize,
) -> Patch {
    debug_assert!(t < frames.len() && stack >= 2);
    let crops: Vec<Tensor> = (0..stack)
        .map(|i| {
            let idx = (t + i + 1).saturating_sub(stack);
            crop_patch(&frames[idx], b, context, out)
        })
        .collect();
    let motion = motion_channels(&crops);

    let hw = out * out;
    let mut app = Vec::with_capacity(stack * hw);
    for c in &crops {
        app.extend_from_slice(c.data());
    }
    let mut mot = Vec::with_capacity(2 * (stack - 1) * hw);
    for m in &motion {
        mot.extend_from_slice(m.data());
    }
    Patch {
        appearance: Tensor::new(vec![stack, out, out], app).unwrap(),
        motion: Tensor::new(vec![2 * (stack - 1), out, out], mot).unwrap(),
    }
}

/// Stacks patches into trunk inputs: ([B, stack, s, s], [B, 2(stack-1), s, s]).
pub fn batch_patches(patches: &[Patch]) -> Result<(Tensor, Tensor), ModelError> {
    if patches.is_empty() {
        return Err(ModelError::BadInput("empty patch batch".into()));
    }
    let ashape = patches[0].appearance.shape().to_vec();
    let mshape = patches[0].motion.shape().to_vec();
    let mut app = Vec::with_capacity(patches.len() * patches[0].appearance.numel());
    let mut mot = Vec::with_capacity(patches.len() * patches[0].motion.numel());
    for p in patches {
        if p.appearance.shape() != ashape || p.motion.shape() != mshape {
            return Err(ModelError::BadInput("ragged patch batch".into()));
        }
        app.extend_from_slice(p.appearance.data());
        mot.extend_from_slice(p.motion.data());
    }
    let mut af = vec![patches.len()];
    af.extend_from_slice(&ashape);
    let mut mf = vec![patches.len()];
    mf.extend_from_slice(&mshape);
    Ok((
        Tensor::new(af, app).unwrap(),
        Tensor::new(mf, mot).unwrap(),
    ))
}

/// Splits each clip into consecutive non-overlapping windows of `stack`
/// frames and batches window w of every clip together, at native frame
/// resolution. Returns one (appearance, motion) input pair per window.
pub fn clip_window_batches(
    clips: &[&Clip],
    stack: usize,
) -> Result<Vec<(Tensor, Tensor)>, ModelError> {
    if clips.is_empty() {
        return Err(ModelError::BadInput("empty clip batch".into()));
    }
    let len = clips[0].frames.len();
    let shape = clips[0].frames[0].shape().to_vec();
    for c in clips {
        if c.frames.len() != len || c.frames[0].shape() != shape {
            return Err(ModelError::BadInput(
                "clips in a batch must share length and frame size".into(),
            ));
        }
    }
    let windows = len / stack;
    if windows == 0 {
        return Err(ModelError::BadInput(format!(
            "clip of {len} frames is shorter than one {stack}-frame window"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let hw = h * w;
    let b = clips.len();
    let mut out = Vec::with_capacity(windows);
    for wi in 0..windows {
        let f0 = wi * stack;
        let mut app = Vec::with_capacity(b * stack * hw);
        let mut mot = Vec::with_capacity(b * 2 * (stack - 1) * hw);
        for c in clips {
            for f in &c.frames[f0..f0 + stack] {
                app.extend_from_slice(f.data());
            }
            for m in &c.motion[f0..f0 + stack - 1] {
                mot.extend_from_slice(m.data());
            }
        }
        out.push((
            Tensor::new(vec![b, stack, h, w], app).unwrap(),
            Tensor::new(vec![b, 2 * (stack - 1), h, w], mot).unwrap(),
        ));
    }
    Ok(out)
}
