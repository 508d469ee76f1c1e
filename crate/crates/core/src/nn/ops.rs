//! Differentiable operators.
//!
//! Every operator computes its value eagerly and, on recording graphs,
//! pushes a backward closure onto the tape. Backward closures read node
//! values by index, take the (final) output gradient, and accumulate into
//! input gradients.

use crate::error::{Error, Result};
use crate::nn::graph::Tensor;

fn shape_err(expected: impl Into<String>, actual: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

fn same_graph(a: &Tensor, b: &Tensor) {
    assert!(
        a.graph().same_graph(b.graph()),
        "operands belong to different graphs"
    );
}

/// Numerically stable temperature softmax over rows of a `[rows x cols]`
/// matrix.
pub fn softmax_rows(data: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &data[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v / tau - m).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    out
}

/// Row-wise stable log-softmax of `data / tau`.
pub fn log_softmax_rows(data: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &data[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v / tau - m).exp();
        }
        let lse = m + sum.ln();
        for (j, &v) in row.iter().enumerate() {
            out[i * cols + j] = v / tau - lse;
        }
    }
    out
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_graph(x, y);
    if x.shape() != y.shape() {
        return Err(shape_err(format!("{:?}", x.shape()), y.shape()));
    }
    let data: Vec<f64> = {
        let xd = x.data();
        let yd = y.data();
        xd.iter().zip(yd.iter()).map(|(a, b)| a + b).collect()
    };
    let out = x.graph().push_node(x.shape().to_vec(), data);
    let (xi, yi, oi) = (x.idx, y.idx, out.idx);
    x.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        for (g, &v) in grads[xi].iter_mut().zip(go.iter()) {
            *g += v;
        }
        for (g, &v) in grads[yi].iter_mut().zip(go.iter()) {
            *g += v;
        }
    });
    Ok(out)
}

pub fn sub(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_graph(x, y);
    if x.shape() != y.shape() {
        return Err(shape_err(format!("{:?}", x.shape()), y.shape()));
    }
    let data: Vec<f64> = {
        let xd = x.data();
        let yd = y.data();
        xd.iter().zip(yd.iter()).map(|(a, b)| a - b).collect()
    };
    let out = x.graph().push_node(x.shape().to_vec(), data);
    let (xi, yi, oi) = (x.idx, y.idx, out.idx);
    x.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        for (g, &v) in grads[xi].iter_mut().zip(go.iter()) {
            *g += v;
        }
        for (g, &v) in grads[yi].iter_mut().zip(go.iter()) {
            *g -= v;
        }
    });
    Ok(out)
}

pub fn scale(x: &Tensor, c: f64) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    let out = x.graph().push_node(x.shape().to_vec(), data);
    let (xi, oi) = (x.idx, out.idx);
    x.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        for (g, &v) in grads[xi].iter_mut().zip(go.iter()) {
            *g += c * v;
        }
    });
    Ok(out)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = x.graph().push_node(x.shape().to_vec(), data);
    let (xi, oi) = (x.idx, out.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xv = &nodes[xi].data;
        for ((g, &v), &xval) in grads[xi].iter_mut().zip(go.iter()).zip(xv.iter()) {
            if xval > 0.0 {
                *g += v;
            }
        }
    });
    Ok(out)
}

/// Output range `[start, end)` of positions that read a valid input sample
/// for kernel offset `kk`.
fn conv_span(l_in: usize, l_out: usize, stride: usize, pad: usize, kk: usize) -> (usize, usize) {
    let start = if pad > kk {
        (pad - kk + stride - 1) / stride
    } else {
        0
    };
    if l_in + pad <= kk {
        return (0, 0);
    }
    let max_o = (l_in - 1 + pad - kk) / stride;
    let end = (max_o + 1).min(l_out);
    (start.min(end), end)
}

fn conv_out_len(l_in: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if l_in + 2 * pad < k {
        return Err(Error::Config(format!(
            "input length {l_in} with pad {pad} shorter than kernel {k}"
        )));
    }
    Ok((l_in + 2 * pad - k) / stride + 1)
}

/// 1-D convolution: `x [n, ci, l]`, `w [co, ci, k]`, `b [co]`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    same_graph(x, w);
    same_graph(x, b);
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
        return Err(shape_err("x [n,ci,l] and w [co,ci,k]", (xs, ws)));
    }
    let (n, ci, l) = (xs[0], xs[1], xs[2]);
    let (co, k) = (ws[0], ws[2]);
    if b.shape() != [co] {
        return Err(shape_err(format!("bias [{co}]"), b.shape()));
    }
    let lo = conv_out_len(l, k, stride, pad)?;

    let mut out = vec![0.0; n * co * lo];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for bi in 0..n {
            for o in 0..co {
                let orow = &mut out[(bi * co + o) * lo..][..lo];
                orow.fill(bd[o]);
                for c in 0..ci {
                    let xrow = &xd[(bi * ci + c) * l..][..l];
                    for kk in 0..k {
                        let wv = wd[(o * ci + c) * k + kk];
                        let (s0, s1) = conv_span(l, lo, stride, pad, kk);
                        for xo in s0..s1 {
                            orow[xo] += wv * xrow[xo * stride + kk - pad];
                        }
                    }
                }
            }
        }
    }
    let outt = x.graph().push_node(vec![n, co, lo], out);
    let (xi, wi, bi_idx, oi) = (x.idx, w.idx, b.idx, outt.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let wd = &nodes[wi].data;
        // bias grads
        {
            let gb = &mut grads[bi_idx];
            for bi in 0..n {
                for o in 0..co {
                    let grow = &go[(bi * co + o) * lo..][..lo];
                    gb[o] += grow.iter().sum::<f64>();
                }
            }
        }
        // weight grads
        {
            let gw = &mut grads[wi];
            for bi in 0..n {
                for o in 0..co {
                    let grow = &go[(bi * co + o) * lo..][..lo];
                    for c in 0..ci {
                        let xrow = &xd[(bi * ci + c) * l..][..l];
                        for kk in 0..k {
                            let (s0, s1) = conv_span(l, lo, stride, pad, kk);
                            let mut acc = 0.0;
                            for xo in s0..s1 {
                                acc += xrow[xo * stride + kk - pad] * grow[xo];
                            }
                            gw[(o * ci + c) * k + kk] += acc;
                        }
                    }
                }
            }
        }
        // input grads
        {
            let gx = &mut grads[xi];
            for bi in 0..n {
                for o in 0..co {
                    let grow = &go[(bi * co + o) * lo..][..lo];
                    for c in 0..ci {
                        let gxrow = &mut gx[(bi * ci + c) * l..][..l];
                        for kk in 0..k {
                            let wv = wd[(o * ci + c) * k + kk];
                            let (s0, s1) = conv_span(l, lo, stride, pad, kk);
                            for xo in s0..s1 {
                                gxrow[xo * stride + kk - pad] += wv * grow[xo];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(outt)
}

/// 2-D convolution: `x [n, ci, h, w]`, `w [co, ci, kh, kw]`, `b [co]`.
/// Stride and padding apply to both spatial dims.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    same_graph(x, w);
    same_graph(x, b);
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(shape_err("x [n,ci,h,w] and w [co,ci,kh,kw]", (xs, ws)));
    }
    let (n, ci, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    if b.shape() != [co] {
        return Err(shape_err(format!("bias [{co}]"), b.shape()));
    }
    let ho = conv_out_len(h, kh, stride, pad)?;
    let wo = conv_out_len(wid, kw, stride, pad)?;

    let mut out = vec![0.0; n * co * ho * wo];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for bi in 0..n {
            for o in 0..co {
                let oplane = &mut out[(bi * co + o) * ho * wo..][..ho * wo];
                oplane.fill(bd[o]);
                for c in 0..ci {
                    let xplane = &xd[(bi * ci + c) * h * wid..][..h * wid];
                    for ky in 0..kh {
                        let (y0, y1) = conv_span(h, ho, stride, pad, ky);
                        for kx in 0..kw {
                            let wv = wd[((o * ci + c) * kh + ky) * kw + kx];
                            let (x0, x1) = conv_span(wid, wo, stride, pad, kx);
                            for yo in y0..y1 {
                                let yi = yo * stride + ky - pad;
                                let orow = &mut oplane[yo * wo..][..wo];
                                let xrow = &xplane[yi * wid..][..wid];
                                for xo in x0..x1 {
                                    orow[xo] += wv * xrow[xo * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let outt = x.graph().push_node(vec![n, co, ho, wo], out);
    let (xi, wi, bidx, oi) = (x.idx, w.idx, b.idx, outt.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let wd = &nodes[wi].data;
        {
            let gb = &mut grads[bidx];
            for bi in 0..n {
                for o in 0..co {
                    gb[o] += go[(bi * co + o) * ho * wo..][..ho * wo].iter().sum::<f64>();
                }
            }
        }
        {
            let gw = &mut grads[wi];
            for bi in 0..n {
                for o in 0..co {
                    let gplane = &go[(bi * co + o) * ho * wo..][..ho * wo];
                    for c in 0..ci {
                        let xplane = &xd[(bi * ci + c) * h * wid..][..h * wid];
                        for ky in 0..kh {
                            let (y0, y1) = conv_span(h, ho, stride, pad, ky);
                            for kx in 0..kw {
                                let (x0, x1) = conv_span(wid, wo, stride, pad, kx);
                                let mut acc = 0.0;
                                for yo in y0..y1 {
                                    let yi = yo * stride + ky - pad;
                                    let grow = &gplane[yo * wo..][..wo];
                                    let xrow = &xplane[yi * wid..][..wid];
                                    for xo in x0..x1 {
                                        acc += xrow[xo * stride + kx - pad] * grow[xo];
                                    }
                                }
                                gw[((o * ci + c) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        {
            let gx = &mut grads[xi];
            for bi in 0..n {
                for o in 0..co {
                    let gplane = &go[(bi * co + o) * ho * wo..][..ho * wo];
                    for c in 0..ci {
                        let gxplane = &mut gx[(bi * ci + c) * h * wid..][..h * wid];
                        for ky in 0..kh {
                            let (y0, y1) = conv_span(h, ho, stride, pad, ky);
                            for kx in 0..kw {
                                let wv = wd[((o * ci + c) * kh + ky) * kw + kx];
                                let (x0, x1) = conv_span(wid, wo, stride, pad, kx);
                                for yo in y0..y1 {
                                    let yi = yo * stride + ky - pad;
                                    let grow = &gplane[yo * wo..][..wo];
                                    let gxrow = &mut gxplane[yi * wid..][..wid];
                                    for xo in x0..x1 {
                                        gxrow[xo * stride + kx - pad] += wv * grow[xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(outt)
}

/// Fully connected layer: `x [n, in] * w [out, in]^T + b [out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_graph(x, w);
    same_graph(x, b);
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(shape_err("x [n,in] and w [out,in]", (xs, ws)));
    }
    let (n, fin) = (xs[0], xs[1]);
    let fout = ws[0];
    if b.shape() != [fout] {
        return Err(shape_err(format!("bias [{fout}]"), b.shape()));
    }
    let mut out = vec![0.0; n * fout];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for i in 0..n {
            let xrow = &xd[i * fin..][..fin];
            let orow = &mut out[i * fout..][..fout];
            for o in 0..fout {
                let wrow = &wd[o * fin..][..fin];
                let mut acc = bd[o];
                for j in 0..fin {
                    acc += xrow[j] * wrow[j];
                }
                orow[o] = acc;
            }
        }
    }
    let outt = x.graph().push_node(vec![n, fout], out);
    let (xi, wi, bidx, oi) = (x.idx, w.idx, b.idx, outt.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let wd = &nodes[wi].data;
        {
            let gb = &mut grads[bidx];
            for i in 0..n {
                for o in 0..fout {
                    gb[o] += go[i * fout + o];
                }
            }
        }
        {
            let gw = &mut grads[wi];
            for i in 0..n {
                let xrow = &xd[i * fin..][..fin];
                let grow = &go[i * fout..][..fout];
                for o in 0..fout {
                    let g = grow[o];
                    let gwrow = &mut gw[o * fin..][..fin];
                    for j in 0..fin {
                        gwrow[j] += g * xrow[j];
                    }
                }
            }
        }
        {
            let gx = &mut grads[xi];
            for i in 0..n {
                let grow = &go[i * fout..][..fout];
                let gxrow = &mut gx[i * fin..][..fin];
                for o in 0..fout {
                    let g = grow[o];
                    let wrow = &wd[o * fin..][..fin];
                    for j in 0..fin {
                        gxrow[j] += g * wrow[j];
                    }
                }
            }
        }
    });
    Ok(outt)
}

/// Per-channel batch statistics captured during a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err("[n, c, ...]", shape));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, c, spatial.max(1)))
}

/// Batch normalization using batch statistics (training mode). Returns the
/// normalized tensor and the statistics so the caller can update its running
/// buffers; the op itself is a pure function of its inputs.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnStats)> {
    same_graph(x, gamma);
    same_graph(x, beta);
    let shape = x.shape().to_vec();
    let (n, c, spatial) = bn_dims(&shape)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(format!("gamma/beta [{c}]"), (gamma.shape(), beta.shape())));
    }
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut out = vec![0.0; x.numel()];
    {
        let xd = x.data();
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..n {
                let row = &xd[(bi * c + ch) * spatial..][..spatial];
                s += row.iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for bi in 0..n {
                let row = &xd[(bi * c + ch) * spatial..][..spatial];
                for &xv in row {
                    let d = xv - m;
                    v += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let (g, be, m) = (gd[ch], bd[ch], mean[ch]);
                let xrow = &xd[(bi * c + ch) * spatial..][..spatial];
                let orow = &mut out[(bi * c + ch) * spatial..][..spatial];
                for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                    *o = g * (xv - m) * inv + be;
                }
            }
        }
    }
    let outt = x.graph().push_node(shape, out);
    let stats = BnStats {
        mean: mean.clone(),
        var: var.clone(),
    };
    let (xi, gi, bi_idx, oi) = (x.idx, gamma.idx, beta.idx, outt.idx);
    let eps_c = eps;
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let gd = &nodes[gi].data;
        for ch in 0..c {
            let m = mean[ch];
            let inv = 1.0 / (var[ch] + eps_c).sqrt();
            let g = gd[ch];
            // accumulate sums of dxhat and dxhat * xhat
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            let mut dgamma = 0.0;
            let mut dbeta = 0.0;
            for bi in 0..n {
                let base = (bi * c + ch) * spatial;
                for s in 0..spatial {
                    let xh = (xd[base + s] - m) * inv;
                    let gov = go[base + s];
                    let dxh = gov * g;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    dgamma += gov * xh;
                    dbeta += gov;
                }
            }
            grads[gi][ch] += dgamma;
            grads[bi_idx][ch] += dbeta;
            let gx = &mut grads[xi];
            let cnt = count;
            for bi in 0..n {
                let base = (bi * c + ch) * spatial;
                for s in 0..spatial {
                    let xh = (xd[base + s] - m) * inv;
                    let dxh = go[base + s] * g;
                    gx[base + s] += inv / cnt * (cnt * dxh - sum_dxh - xh * sum_dxh_xh);
                }
            }
        }
    });
    Ok((outt, stats))
}

/// Batch normalization as a per-channel affine map using running statistics
/// (evaluation mode).
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    same_graph(x, gamma);
    same_graph(x, beta);
    let shape = x.shape().to_vec();
    let (n, c, spatial) = bn_dims(&shape)?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(shape_err(format!("per-channel [{c}] bn parameters"), shape));
    }
    let inv: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let mut out = vec![0.0; x.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * spatial;
                let (g, be, m, iv) = (gd[ch], bd[ch], mean[ch], inv[ch]);
                for s in 0..spatial {
                    out[base + s] = g * (xd[base + s] - m) * iv + be;
                }
            }
        }
    }
    let outt = x.graph().push_node(shape, out);
    let (xi, gi, bidx, oi) = (x.idx, gamma.idx, beta.idx, outt.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let gd = &nodes[gi].data;
        for ch in 0..c {
            let (m, iv, g) = (mean[ch], inv[ch], gd[ch]);
            let mut dgamma = 0.0;
            let mut dbeta = 0.0;
            for bi in 0..n {
                let base = (bi * c + ch) * spatial;
                for s in 0..spatial {
                    let gov = go[base + s];
                    dgamma += gov * (xd[base + s] - m) * iv;
                    dbeta += gov;
                    grads[xi][base + s] += gov * g * iv;
                }
            }
            grads[gi][ch] += dgamma;
            grads[bidx][ch] += dbeta;
        }
    });
    Ok(outt)
}

/// Mean over all spatial dims: `[n, c, ...] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (n, c, spatial) = bn_dims(&shape)?;
    let mut out = vec![0.0; n * c];
    {
        let xd = x.data();
        for i in 0..n * c {
            out[i] = xd[i * spatial..][..spatial].iter().sum::<f64>() / spatial as f64;
        }
    }
    let outt = x.graph().push_node(vec![n, c], out);
    let (xi, oi) = (x.idx, outt.idx);
    x.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let gx = &mut grads[xi];
        let inv = 1.0 / spatial as f64;
        for i in 0..n * c {
            let g = go[i] * inv;
            for s in 0..spatial {
                gx[i * spatial + s] += g;
            }
        }
    });
    Ok(outt)
}

/// `a` viewed as `[n, f]` times `b` viewed as `[m, f]`, transposed:
/// `out[i, j] = <a_i, b_j>`. Trailing dims are flattened per row.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_graph(a, b);
    if a.shape().is_empty() || b.shape().is_empty() {
        return Err(shape_err("rank >= 1 tensors", (a.shape(), b.shape())));
    }
    let n = a.shape()[0];
    let m = b.shape()[0];
    let fa = a.numel() / n;
    let fb = b.numel() / m;
    if fa != fb {
        return Err(shape_err(
            format!("matching feature dims ({fa})"),
            (a.shape(), b.shape()),
        ));
    }
    let f = fa;
    let mut out = vec![0.0; n * m];
    {
        let ad = a.data();
        let bd = b.data();
        for i in 0..n {
            let arow = &ad[i * f..][..f];
            for j in 0..m {
                let brow = &bd[j * f..][..f];
                let mut acc = 0.0;
                for t in 0..f {
                    acc += arow[t] * brow[t];
                }
                out[i * m + j] = acc;
            }
        }
    }
    let outt = a.graph().push_node(vec![n, m], out);
    let (ai, bi, oi) = (a.idx, b.idx, outt.idx);
    a.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        // dA += go * B
        {
            let bd = &nodes[bi].data;
            let ga = &mut grads[ai];
            for i in 0..n {
                let garow = &mut ga[i * f..][..f];
                for j in 0..m {
                    let g = go[i * m + j];
                    let brow = &bd[j * f..][..f];
                    for t in 0..f {
                        garow[t] += g * brow[t];
                    }
                }
            }
        }
        // dB += go^T * A
        {
            let ad = &nodes[ai].data;
            let gb = &mut grads[bi];
            for j in 0..m {
                let gbrow = &mut gb[j * f..][..f];
                for i in 0..n {
                    let g = go[i * m + j];
                    let arow = &ad[i * f..][..f];
                    for t in 0..f {
                        gbrow[t] += g * arow[t];
                    }
                }
            }
        }
    });
    Ok(outt)
}

const ROW_NORM_EPS: f64 = 1e-24;

/// L2-normalize each row of a `[n, m]` matrix.
pub fn row_l2_normalize(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 2 {
        return Err(shape_err("[n, m]", shape));
    }
    let (n, m) = (shape[0], shape[1]);
    let mut norms = vec![0.0; n];
    let mut out = vec![0.0; n * m];
    {
        let xd = x.data();
        for i in 0..n {
            let row = &xd[i * m..][..m];
            let s: f64 = row.iter().map(|v| v * v).sum();
            let nm = (s + ROW_NORM_EPS).sqrt();
            norms[i] = nm;
            for j in 0..m {
                out[i * m + j] = row[j] / nm;
            }
        }
    }
    let outt = x.graph().push_node(shape, out);
    let (xi, oi) = (x.idx, outt.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let gx = &mut grads[xi];
        for i in 0..n {
            let row = &xd[i * m..][..m];
            let grow = &go[i * m..][..m];
            let nm = norms[i];
            let dot: f64 = row.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
            let scale = dot / (nm * nm * nm);
            for j in 0..m {
                gx[i * m + j] += grow[j] / nm - scale * row[j];
            }
        }
    });
    Ok(outt)
}

/// Per-row partition grams: each row of `x [n, m]` is cut into `k` contiguous
/// segments of length `d = m / k`; the output `[n, k, k]` holds the segment
/// inner products minus the identity.
pub fn patch_gram(x: &Tensor, k: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 2 {
        return Err(shape_err("[n, m]", shape));
    }
    let (n, m) = (shape[0], shape[1]);
    if k == 0 || m % k != 0 {
        return Err(Error::BatchNotDivisible { batch: m, k });
    }
    let d = m / k;
    let mut out = vec![0.0; n * k * k];
    {
        let xd = x.data();
        for i in 0..n {
            let row = &xd[i * m..][..m];
            for c1 in 0..k {
                let s1 = &row[c1 * d..][..d];
                for c2 in 0..k {
                    let s2 = &row[c2 * d..][..d];
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += s1[r] * s2[r];
                    }
                    if c1 == c2 {
                        acc -= 1.0;
                    }
                    out[(i * k + c1) * k + c2] = acc;
                }
            }
        }
    }
    let outt = x.graph().push_node(vec![n, k, k], out);
    let (xi, oi) = (x.idx, outt.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi]);
        let xd = &nodes[xi].data;
        let gx = &mut grads[xi];
        for i in 0..n {
            let row = &xd[i * m..][..m];
            let grow = &mut gx[i * m..][..m];
            for c1 in 0..k {
                for c2 in 0..k {
                    let g = go[(i * k + c1) * k + c2];
                    if g == 0.0 {
                        continue;
                    }
                    for r in 0..d {
                        grow[c1 * d + r] += g * row[c2 * d + r];
                        grow[c2 * d + r] += g * row[c1 * d + r];
                    }
                }
            }
        }
    });
    Ok(outt)
}

/// Sum of all entries, as a scalar.
pub fn sum(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    let out = x.graph().push_node(vec![1], vec![s]);
    let (xi, oi) = (x.idx, out.idx);
    x.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi])[0];
        for g in grads[xi].iter_mut() {
            *g += go;
        }
    });
    Ok(out)
}

/// Sum of squared entries, as a scalar.
pub fn sum_squares(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().map(|v| v * v).sum();
    let out = x.graph().push_node(vec![1], vec![s]);
    let (xi, oi) = (x.idx, out.idx);
    x.graph().record_op(move |nodes, grads| {
        let go = std::mem::take(&mut grads[oi])[0];
        let xd = &nodes[xi].data;
        for (g, &v) in grads[xi].iter_mut().zip(xd.iter()) {
            *g += 2.0 * v * go;
        }
    });
    Ok(out)
}

/// Mean cross-entropy of `logits [n, classes]` against integer labels, with a
/// max-subtracted log-softmax.
pub fn cross_entropy_mean(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    if shape.len() != 2 {
        return Err(shape_err("[n, classes]", shape));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(shape_err(format!("{n} labels"), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_rows(&logits.data(), n, c, 1.0);
    let logp = log_softmax_rows(&logits.data(), n, c, 1.0);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[i * c + y];
    }
    loss /= n as f64;
    let out = logits.graph().push_node(vec![1], vec![loss]);
    let (li, oi) = (logits.idx, out.idx);
    let labels = labels.to_vec();
    logits.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi])[0];
        let gl = &mut grads[li];
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..c {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                gl[i * c + j] += go * (probs[i * c + j] - onehot) * inv_n;
            }
        }
    });
    Ok(out)
}

/// Temperature-softened KL divergence `tau^2 * mean_i KL(p_t_i || p_s_i)`
/// where `p_s = softmax(logits / tau)` and the teacher distribution
/// `p_teacher` (row-major `[n, classes]`) is a constant.
pub fn kd_kl_mean(p_teacher: &[f64], student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    let shape = student_logits.shape().to_vec();
    if shape.len() != 2 {
        return Err(shape_err("[n, classes]", shape));
    }
    let (n, c) = (shape[0], shape[1]);
    if p_teacher.len() != n * c {
        return Err(shape_err(format!("teacher probs [{n} x {c}]"), p_teacher.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let logq = log_softmax_rows(&student_logits.data(), n, c, tau);
    let q = softmax_rows(&student_logits.data(), n, c, tau);
    let mut kl = 0.0;
    for i in 0..n * c {
        let p = p_teacher[i];
        if p > 0.0 {
            kl += p * (p.ln() - logq[i]);
        }
    }
    let loss = tau * tau * kl / n as f64;
    let out = student_logits.graph().push_node(vec![1], vec![loss]);
    let (si, oi) = (student_logits.idx, out.idx);
    let p_teacher = p_teacher.to_vec();
    student_logits.graph().record_op(move |_nodes, grads| {
        let go = std::mem::take(&mut grads[oi])[0];
        let gs = &mut grads[si];
        let coef = go * tau / n as f64;
        for i in 0..n * c {
            gs[i] += coef * (q[i] - p_teacher[i]);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        for tau in [1.0, 4.0] {
            let p = softmax_rows(&logits, 2, 3, tau);
            for i in 0..2 {
                let s: f64 = p[i * 3..(i + 1) * 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_soften_to_uniform() {
        let p = softmax_rows(&[0.0, 0.0], 1, 2, 7.3);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_tau_approaches_uniform() {
        let p = softmax_rows(&[10.0, 0.0], 1, 2, 100.0);
        assert!((p[0] - 0.5).abs() < 0.03);
        assert!((p[1] - 0.5).abs() < 0.03);
    }

    #[test]
    fn cross_entropy_of_perfect_prediction_is_zero() {
        let g = Graph::inference();
        // huge margin -> probability ~1 for the true class
        let logits = g.tensor(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0]);
        let l = cross_entropy_mean(&logits, &[0, 1]).unwrap();
        assert!(l.item() < 1e-6);
    }

    #[test]
    fn kd_loss_zero_for_identical_logits() {
        let g = Graph::inference();
        let logits = vec![0.3, -1.2, 0.4, 2.0, 1.0, 0.0];
        let s = g.tensor(vec![2, 3], logits.clone());
        let p_t = softmax_rows(&logits, 2, 3, 4.0);
        let l = kd_kl_mean(&p_t, &s, 4.0).unwrap();
        assert!(l.item().abs() < 1e-12);
    }

    #[test]
    fn kd_loss_matches_hand_computation() {
        // teacher [ln 3, 0], student [0, 0], tau = 1:
        // p_t = [0.75, 0.25], p_s = [0.5, 0.5]
        // KL = 0.75 ln 1.5 + 0.25 ln 0.5
        let g = Graph::inference();
        let s = g.tensor(vec![1, 2], vec![0.0, 0.0]);
        let p_t = softmax_rows(&[3f64.ln(), 0.0], 1, 2, 1.0);
        let l = kd_kl_mean(&p_t, &s, 1.0).unwrap();
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((l.item() - expect).abs() < 1e-12);
        assert!((l.item() - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kd_temperature_scaling_identity() {
        // kd(tau*t, tau*s, 1) * tau^2 == kd(t, s, tau)
        let tau = 4.0;
        let t = vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0];
        let s = vec![0.5, 0.5, -0.25, 1.0, 0.0, 0.5];
        let g = Graph::inference();
        let st = g.tensor(vec![2, 3], s.clone());
        let direct = kd_kl_mean(&softmax_rows(&t, 2, 3, tau), &st, tau).unwrap().item();

        let t_scaled: Vec<f64> = t.iter().map(|v| v / tau).collect();
        let s_scaled: Vec<f64> = s.iter().map(|v| v / tau).collect();
        let ss = g.tensor(vec![2, 3], s_scaled);
        let scaled = kd_kl_mean(&softmax_rows(&t_scaled, 2, 3, 1.0), &ss, 1.0)
            .unwrap()
            .item()
            * tau
            * tau;
        assert!((direct - scaled).abs() < 1e-12);
    }

    #[test]
    fn patch_gram_of_orthonormal_segments_is_zero() {
        let g = Graph::inference();
        // rows whose two segments are orthonormal
        let x = g.tensor(vec![1, 4], vec![1.0, 0.0, 0.0, 1.0]);
        let pg = patch_gram(&x, 2).unwrap();
        assert!(pg.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn patch_gram_matches_hand_computation() {
        // normalized row [1/sqrt2, 0, 0, 1/sqrt2], k=2 -> PtP - I = -0.5 I
        let g = Graph::inference();
        let x = g.tensor(vec![1, 4], vec![1.0, 0.0, 0.0, 1.0]);
        let xn = row_l2_normalize(&x).unwrap();
        let pg = patch_gram(&xn, 2).unwrap();
        let d = pg.to_vec();
        assert!((d[0] + 0.5).abs() < 1e-12);
        assert!(d[1].abs() < 1e-15);
        assert!(d[2].abs() < 1e-15);
        assert!((d[3] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_nt_matches_hand_product() {
        let g = Graph::inference();
        let a = g.tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let out = matmul_nt(&a, &a).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn conv1d_identity_kernel_preserves_signal() {
        let g = Graph::inference();
        let x = g.tensor(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = g.tensor(vec![1, 1, 3], vec![0.0, 1.0, 0.0]);
        let b = g.tensor(vec![1], vec![0.0]);
        let y = conv1d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_stride_two_halves_length() {
        let g = Graph::inference();
        let x = g.tensor(vec![1, 1, 8], (0..8).map(f64::from).collect());
        let w = g.tensor(vec![1, 1, 3], vec![0.0, 1.0, 0.0]);
        let b = g.tensor(vec![1], vec![0.0]);
        let y = conv1d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.to_vec(), vec![0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn dense_matches_hand_forward() {
        // fixed 2-layer net on input [1, 2]
        let g = Graph::inference();
        let x = g.tensor(vec![1, 2], vec![1.0, 2.0]);
        let w1 = g.tensor(vec![2, 2], vec![1.0, -1.0, 0.5, 0.5]);
        let b1 = g.tensor(vec![2], vec![0.1, -0.1]);
        let h = dense(&x, &w1, &b1).unwrap();
        // h = [1*1 + 2*(-1) + 0.1, 1*0.5 + 2*0.5 - 0.1] = [-0.9, 1.4]
        assert!((h.to_vec()[0] + 0.9).abs() < 1e-12);
        assert!((h.to_vec()[1] - 1.4).abs() < 1e-12);
        let hr = relu(&h).unwrap();
        let w2 = g.tensor(vec![1, 2], vec![2.0, 3.0]);
        let b2 = g.tensor(vec![1], vec![0.0]);
        let y = dense(&hr, &w2, &b2).unwrap();
        // y = 0 * 2 + 1.4 * 3 = 4.2
        assert!((y.to_vec()[0] - 4.2).abs() < 1e-12);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let g = Graph::inference();
        let x = g.tensor(vec![1, 2], vec![1.0, 0.0]);
        let w = g.tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = g.tensor(vec![2], vec![0.0, 0.0]);
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let g = Graph::inference();
        let gamma = g.tensor(vec![2], vec![1.5, 0.5]);
        let beta = g.tensor(vec![2], vec![0.2, -0.3]);
        let rm = vec![0.1, -0.2];
        let rv = vec![1.0, 2.0];
        let f = |data: Vec<f64>| {
            let x = g.tensor(vec![1, 2, 2], data);
            batch_norm_eval(&x, &gamma, &beta, &rm, &rv, 1e-5)
                .unwrap()
                .to_vec()
        };
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![-1.0, 0.5, 2.0, -0.25];
        let fa = f(a.clone());
        let fb = f(b.clone());
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let fmid = f(mid);
        for i in 0..4 {
            assert!((fmid[i] - 0.5 * (fa[i] + fb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_averages_spatial_dims() {
        let g = Graph::inference();
        let x = g.tensor(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0]);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.to_vec(), vec![2.5, 15.0]);
    }
}
