//! Forward and backward math for every op.
//!
//! Free functions over [`Tensor`] so the inference paths (tracker scoring,
//! probes) can reuse the exact arithmetic of the training graph. Convolution
//! is written as per-tap axpy over row slices, which the compiler vectorizes
//! well enough for the sizes used here.

use super::tensor::Tensor;
use super::EngineError;

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

// ---------------------------------------------------------------- linear --

/// x: [B, I], w: [O, I], b: [O] -> [B, O].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(shape_err("linear", x, w));
    }
    let (bs, o, i) = (xs[0], ws[0], ws[1]);
    if b.shape() != [o] {
        return Err(shape_err("linear", w, b));
    }
    let mut out = vec![0.0; bs * o];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for bi in 0..bs {
        let xrow = &xd[bi * i..(bi + 1) * i];
        let orow = &mut out[bi * o..(bi + 1) * o];
        for oi in 0..o {
            let wrow = &wd[oi * i..(oi + 1) * i];
            let mut acc = bd[oi];
            for p in 0..i {
                acc += xrow[p] * wrow[p];
            }
            orow[oi] = acc;
        }
    }
    Tensor::new(vec![bs, o], out)
}

/// Returns (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = vec![0.0; bs * i];
    let mut dw = vec![0.0; o * i];
    let mut db = vec![0.0; o];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    for bi in 0..bs {
        let xrow = &xd[bi * i..(bi + 1) * i];
        let dxrow = &mut dx[bi * i..(bi + 1) * i];
        let dyrow = &dyd[bi * o..(bi + 1) * o];
        for oi in 0..o {
            let g = dyrow[oi];
            if g == 0.0 {
                continue;
            }
            db[oi] += g;
            let wrow = &wd[oi * i..(oi + 1) * i];
            let dwrow = &mut dw[oi * i..(oi + 1) * i];
            for p in 0..i {
                dxrow[p] += g * wrow[p];
                dwrow[p] += g * xrow[p];
            }
        }
    }
    (
        Tensor::new(vec![bs, i], dx).unwrap(),
        Tensor::new(vec![o, i], dw).unwrap(),
        Tensor::new(vec![o], db).unwrap(),
    )
}

// ---------------------------------------------------------------- conv2d --

/// Output side length for kernel 3, pad 1 ("same" family): ceil(n / stride).
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Valid output range [start, end) for one kernel tap: input index
/// o*stride + k - 1 must land in [0, n).
#[inline]
fn tap_range(n: usize, k: usize, stride: usize, out_n: usize) -> (usize, usize) {
    let start = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let end = if n >= k { ((n - k) / stride + 1).min(out_n) } else { 0 };
    (start, end)
}

/// x: [B, Ci, H, W], w: [Co, Ci, 3, 3], b: [Co], stride 1 or 2, zero pad 1.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor, EngineError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 {
        return Err(EngineError::BadRank {
            op: "conv2d",
            want: 4,
            got: xs.to_vec(),
        });
    }
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
        return Err(shape_err("conv2d", x, w));
    }
    if !(stride == 1 || stride == 2) {
        return Err(EngineError::BadArgument {
            op: "conv2d",
            msg: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    let (bs, ci, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
    let co = ws[0];
    if b.shape() != [co] {
        return Err(shape_err("conv2d", w, b));
    }
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(wd_, stride));
    let mut out = vec![0.0; bs * co * oh * ow];
    let (xd, wv, bv) = (x.data(), w.data(), b.data());

    for bi in 0..bs {
        for c_out in 0..co {
            let oplane = &mut out[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
            oplane.fill(bv[c_out]);
            for c_in in 0..ci {
                let iplane = &xd[(bi * ci + c_in) * h * wd_..(bi * ci + c_in + 1) * h * wd_];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let tap = wv[((c_out * ci + c_in) * 3 + ky) * 3 + kx];
                        if tap == 0.0 {
                            continue;
                        }
                        let (oy0, oy1) = tap_range(h, ky, stride, oh);
                        let (ox0, ox1) = tap_range(wd_, kx, stride, ow);
                        if ox0 >= ox1 || oy0 >= oy1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - 1;
                            let irow = &iplane[iy * wd_..(iy + 1) * wd_];
                            let orow = &mut oplane[oy * ow + ox0..oy * ow + ox1];
                            if stride == 1 {
                                let ix0 = ox0 + kx - 1;
                                let isl = &irow[ix0..ix0 + (ox1 - ox0)];
                                for (o, &v) in orow.iter_mut().zip(isl) {
                                    *o += tap * v;
                                }
                            } else {
                                for (n, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox0 + n) * stride + kx - 1;
                                    *o += tap * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, co, oh, ow], out)
}

/// Returns (dx, dw, db).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let (bs, ci, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
    let co = w.shape()[0];
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(wd_, stride));
    let mut dx = vec![0.0; bs * ci * h * wd_];
    let mut dw = vec![0.0; co * ci * 9];
    let mut db = vec![0.0; co];
    let (xd, wv, dyd) = (x.data(), w.data(), dy.data());

    for bi in 0..bs {
        for c_out in 0..co {
            let dplane = &dyd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
            db[c_out] += dplane.iter().sum::<f64>();
            for c_in in 0..ci {
                let iplane = &xd[(bi * ci + c_in) * h * wd_..(bi * ci + c_in + 1) * h * wd_];
                let dxplane = &mut dx[(bi * ci + c_in) * h * wd_..(bi * ci + c_in + 1) * h * wd_];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let widx = ((c_out * ci + c_in) * 3 + ky) * 3 + kx;
                        let tap = wv[widx];
                        let (oy0, oy1) = tap_range(h, ky, stride, oh);
                        let (ox0, ox1) = tap_range(wd_, kx, stride, ow);
                        if ox0 >= ox1 || oy0 >= oy1 {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - 1;
                            let drow = &dplane[oy * ow + ox0..oy * ow + ox1];
                            if stride == 1 {
                                let ix0 = ox0 + kx - 1;
                                let irow = &iplane[iy * wd_ + ix0..iy * wd_ + ix0 + drow.len()];
                                let dxrow =
                                    &mut dxplane[iy * wd_ + ix0..iy * wd_ + ix0 + drow.len()];
                                for ((&g, &v), dxv) in drow.iter().zip(irow).zip(dxrow) {
                                    wacc += g * v;
                                    *dxv += tap * g;
                                }
                            } else {
                                for (n, &g) in drow.iter().enumerate() {
                                    let ix = (ox0 + n) * stride + kx - 1;
                                    wacc += g * iplane[iy * wd_ + ix];
                                    dxplane[iy * wd_ + ix] += tap * g;
                                }
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![bs, ci, h, wd_], dx).unwrap(),
        Tensor::new(vec![co, ci, 3, 3], dw).unwrap(),
        Tensor::new(vec![co], db).unwrap(),
    )
}

// ------------------------------------------------------------- pointwise --

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Gradient is zero where the input was <= 0 (subgradient 0 at the kink).
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .iter()
        .zip(dy.iter())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a, b));
    }
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    let data = x.iter().map(|&v| factor * v).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

// ------------------------------------------------------------------ pool --

/// [B, C, H, W] -> [B, C], mean over the spatial plane.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, EngineError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(EngineError::BadRank {
            op: "global_avg_pool",
            want: 4,
            got: xs.to_vec(),
        });
    }
    let (bs, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let inv = 1.0 / hw as f64;
    let mut out = vec![0.0; bs * c];
    for i in 0..bs * c {
        out[i] = x.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() * inv;
    }
    Tensor::new(vec![bs, c], out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (bs, c, hw) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let inv = 1.0 / hw as f64;
    let mut dx = vec![0.0; bs * c * hw];
    for i in 0..bs * c {
        let g = dy.data()[i] * inv;
        dx[i * hw..(i + 1) * hw].fill(g);
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------- concat --

/// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, EngineError> {
    if parts.is_empty() || axis > 1 {
        return Err(EngineError::BadArgument {
            op: "concat",
            msg: format!("need >= 1 rank-2 inputs and axis in {{0,1}}, got {} inputs axis {axis}", parts.len()),
        });
    }
    for p in parts {
        if p.shape().len() != 2 {
            return Err(EngineError::BadRank {
                op: "concat",
                want: 2,
                got: p.shape().to_vec(),
            });
        }
    }
    let other = 1 - axis;
    let fixed = parts[0].shape()[other];
    for p in &parts[1..] {
        if p.shape()[other] != fixed {
            return Err(shape_err("concat", parts[0], p));
        }
    }
    if axis == 0 {
        let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * fixed);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![rows, fixed], data)
    } else {
        let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let rows = fixed;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pc = p.shape()[1];
                data[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&p.data()[r * pc..(r + 1) * pc]);
                off += pc;
            }
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// Splits dy back into per-input gradients.
pub fn concat_backward(shapes: &[&[usize]], axis: usize, dy: &Tensor) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(shapes.len());
    if axis == 0 {
        let cols = shapes[0][1];
        let mut row = 0;
        for s in shapes {
            let r = s[0];
            let part = dy.data()[row * cols..(row + r) * cols].to_vec();
            grads.push(Tensor::new(vec![r, cols], part).unwrap());
            row += r;
        }
    } else {
        let rows = shapes[0][0];
        let cols: usize = shapes.iter().map(|s| s[1]).sum();
        let mut off = 0;
        for s in shapes {
            let pc = s[1];
            let mut part = vec![0.0; rows * pc];
            for r in 0..rows {
                part[r * pc..(r + 1) * pc]
                    .copy_from_slice(&dy.data()[r * cols + off..r * cols + off + pc]);
            }
            grads.push(Tensor::new(vec![rows, pc], part).unwrap());
            off += pc;
        }
    }
    grads
}

// ---------------------------------------------------------------- losses --

/// Row-wise softmax of [B, K] logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (bs, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; bs * k];
    for b in 0..bs {
        let row = &logits.data()[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &l) in out[b * k..(b + 1) * k].iter_mut().zip(row) {
            *o = (l - m).exp();
            z += *o;
        }
        for o in &mut out[b * k..(b + 1) * k] {
            *o /= z;
        }
    }
    Tensor::new(vec![bs, k], out).unwrap()
}

fn check_weights(
    op: &'static str,
    n: usize,
    weights: Option<&[f64]>,
) -> Result<f64, EngineError> {
    match weights {
        None => Ok(n as f64),
        Some(w) => {
            if w.len() != n {
                return Err(EngineError::BadArgument {
                    op,
                    msg: format!("{} weights for {} rows", w.len(), n),
                });
            }
            if w.iter().any(|&v| v < 0.0) {
                return Err(EngineError::BadArgument {
                    op,
                    msg: "negative sample weight".into(),
                });
            }
            let s: f64 = w.iter().sum();
            if s <= 0.0 {
                return Err(EngineError::BadArgument {
                    op,
                    msg: "sample weights sum to zero".into(),
                });
            }
            Ok(s)
        }
    }
}

/// Weighted mean of per-row cross-entropy; logits [B, K], classes[b] < K.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    classes: &[usize],
    weights: Option<&[f64]>,
) -> Result<f64, EngineError> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(EngineError::BadRank {
            op: "softmax_cross_entropy",
            want: 2,
            got: s.to_vec(),
        });
    }
    let (bs, k) = (s[0], s[1]);
    if classes.len() != bs {
        return Err(EngineError::BadArgument {
            op: "softmax_cross_entropy",
            msg: format!("{} class labels for {} rows", classes.len(), bs),
        });
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(EngineError::BadArgument {
            op: "softmax_cross_entropy",
            msg: format!("class index {bad} out of range for {k} classes"),
        });
    }
    let wsum = check_weights("softmax_cross_entropy", bs, weights)?;
    let mut total = 0.0;
    for b in 0..bs {
        let row = &logits.data()[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        let li = lse - row[classes[b]];
        total += li * weights.map_or(1.0, |w| w[b]);
    }
    Ok(total / wsum)
}

/// dlogits for the op above, given upstream scalar gradient g.
pub fn softmax_cross_entropy_backward(
    logits: &Tensor,
    classes: &[usize],
    weights: Option<&[f64]>,
    g: f64,
) -> Tensor {
    let (bs, k) = (logits.shape()[0], logits.shape()[1]);
    let wsum = weights.map_or(bs as f64, |w| w.iter().sum());
    let mut probs = softmax_rows(logits);
    for b in 0..bs {
        let wb = weights.map_or(1.0, |w| w[b]) / wsum;
        let row = &mut probs.data_mut()[b * k..(b + 1) * k];
        row[classes[b]] -= 1.0;
        for v in row.iter_mut() {
            *v *= wb * g;
        }
    }
    probs
}

/// Numerically stable binary cross-entropy on logits [B] or [B, 1];
/// targets in [0, 1]. Returns the weighted mean.
pub fn sigmoid_cross_entropy(
    logits: &Tensor,
    targets: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64, EngineError> {
    let n = logits.numel();
    let ok_shape = logits.shape().len() == 1 || (logits.shape().len() == 2 && logits.shape()[1] == 1);
    if !ok_shape {
        return Err(EngineError::BadRank {
            op: "sigmoid_cross_entropy",
            want: 1,
            got: logits.shape().to_vec(),
        });
    }
    if targets.len() != n {
        return Err(EngineError::BadArgument {
            op: "sigmoid_cross_entropy",
            msg: format!("{} targets for {} logits", targets.len(), n),
        });
    }
    let wsum = check_weights("sigmoid_cross_entropy", n, weights)?;
    let mut total = 0.0;
    for i in 0..n {
        let z = logits.data()[i];
        let t = targets[i];
        let li = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        total += li * weights.map_or(1.0, |w| w[i]);
    }
    Ok(total / wsum)
}

pub fn sigmoid_cross_entropy_backward(
    logits: &Tensor,
    targets: &[f64],
    weights: Option<&[f64]>,
    g: f64,
) -> Tensor {
    let n = logits.numel();
    let wsum = weights.map_or(n as f64, |w| w.iter().sum());
    let mut dz = vec![0.0; n];
    for i in 0..n {
        let z = logits.data()[i];
        let s = 1.0 / (1.0 + (-z).exp());
        let wb = weights.map_or(1.0, |w| w[i]) / wsum;
        dz[i] = (s - targets[i]) * wb * g;
    }
    Tensor::new(logits.shape().to_vec(), dz).unwrap()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Squared Frobenius norm of the feature correlation.
///
/// Batch mode: || Fs^T Fk ||_F^2 over the whole batch.
/// Per-sample mode: sum_i || fs_i fk_i^T ||_F^2 = sum_i |fs_i|^2 |fk_i|^2.
pub fn frobenius_sq_of_product(
    fs: &Tensor,
    fk: &Tensor,
    per_sample: bool,
) -> Result<f64, EngineError> {
    let (a, b) = (fs.shape(), fk.shape());
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(shape_err("frobenius_sq_of_product", fs, fk));
    }
    let (bs, ds, dk) = (a[0], a[1], b[1]);
    if per_sample {
        let mut total = 0.0;
        for i in 0..bs {
            let ns: f64 = fs.data()[i * ds..(i + 1) * ds].iter().map(|v| v * v).sum();
            let nk: f64 = fk.data()[i * dk..(i + 1) * dk].iter().map(|v| v * v).sum();
            total += ns * nk;
        }
        Ok(total)
    } else {
        let mut total = 0.0;
        for p in 0..ds {
            for q in 0..dk {
                let mut m = 0.0;
                for i in 0..bs {
                    m += fs.data()[i * ds + p] * fk.data()[i * dk + q];
                }
                total += m * m;
            }
        }
        Ok(total)
    }
}

/// Returns (dfs, dfk) scaled by upstream gradient g.
pub fn frobenius_sq_of_product_backward(
    fs: &Tensor,
    fk: &Tensor,
    per_sample: bool,
    g: f64,
) -> (Tensor, Tensor) {
    let (bs, ds, dk) = (fs.shape()[0], fs.shape()[1], fk.shape()[1]);
    let mut dfs = vec![0.0; bs * ds];
    let mut dfk = vec![0.0; bs * dk];
    if per_sample {
        for i in 0..bs {
            let srow = &fs.data()[i * ds..(i + 1) * ds];
            let krow = &fk.data()[i * dk..(i + 1) * dk];
            let ns: f64 = srow.iter().map(|v| v * v).sum();
            let nk: f64 = krow.iter().map(|v| v * v).sum();
            for p in 0..ds {
                dfs[i * ds + p] = 2.0 * srow[p] * nk * g;
            }
            for q in 0..dk {
                dfk[i * dk + q] = 2.0 * krow[q] * ns * g;
            }
        }
    } else {
        // m[p][q] = sum_i fs[i,p] fk[i,q]
        let mut m = vec![0.0; ds * dk];
        for i in 0..bs {
            for p in 0..ds {
                let v = fs.data()[i * ds + p];
                for q in 0..dk {
                    m[p * dk + q] += v * fk.data()[i * dk + q];
                }
            }
        }
        for i in 0..bs {
            for p in 0..ds {
                let mut acc = 0.0;
                for q in 0..dk {
                    acc += m[p * dk + q] * fk.data()[i * dk + q];
                }
                dfs[i * ds + p] = 2.0 * acc * g;
            }
            for q in 0..dk {
                let mut acc = 0.0;
                for p in 0..ds {
                    acc += m[p * dk + q] * fs.data()[i * ds + p];
                }
                dfk[i * dk + q] = 2.0 * acc * g;
            }
        }
    }
    (
        Tensor::new(vec![bs, ds], dfs).unwrap(),
        Tensor::new(vec![bs, dk], dfk).unwrap(),
    )
}
