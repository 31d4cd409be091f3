//! Convolution, normalization, pooling and fused loss primitives.
//!
//! Convolution forward and backward are the hot path of a training step;
//! both fan out over the batch dimension through `crate::par`, writing to
//! disjoint per-item chunks and reducing per-item weight-gradient partials
//! in item order so results are bit-identical with and without threads.

use super::{BackStep, Tape, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::config(format!(
            "conv kernel {} exceeds padded input extent {}",
            k, padded
        )));
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::config("conv output extent is zero".to_string()));
    }
    Ok(out)
}

// Valid output range so that 0 <= o*stride + kk - pad < extent.
fn out_range(extent_in: usize, extent_out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk + stride - 1) / stride };
    let hi_in = extent_in + pad;
    let hi = if hi_in > kk { ((hi_in - 1 - kk) / stride + 1).min(extent_out) } else { 0 };
    (lo.min(hi), hi)
}

impl Tape {
    /// 2-D cross-correlation with square kernel, per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        if input.shape().len() != 4 {
            return Err(Error::config(format!("conv2d input rank {} != 4", input.shape().len())));
        }
        if weight.shape().len() != 4 {
            return Err(Error::config(format!("conv2d weight rank {} != 4", weight.shape().len())));
        }
        let (b, c, h, w) = input.dims4();
        let (o, wc, kh, kw) = weight.dims4();
        if wc != c {
            return Err(Error::config(format!(
                "conv2d weight input-channel dim {} != input channel dim {}",
                wc, c
            )));
        }
        if kh != kw {
            return Err(Error::config(format!("conv2d kernel is {}x{}, expected square", kh, kw)));
        }
        if bias.shape() != [o] {
            return Err(Error::config(format!(
                "conv2d bias shape {:?} != output channel dim [{}]",
                bias.shape(),
                o
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive".to_string()));
        }
        let ho = conv_out_extent(h, kh, stride, pad)?;
        let wo = conv_out_extent(w, kw, stride, pad)?;

        let mut out = vec![0.0; b * o * ho * wo];
        {
            let x = &self.nodes[input.id].data;
            let wt = &self.nodes[weight.id].data;
            let bs = &self.nodes[bias.id].data;
            par::for_each_chunk(&mut out, o * ho * wo, |bi, chunk| {
                conv2d_forward_item(chunk, &x[bi * c * h * w..(bi + 1) * c * h * w], wt, bs, c, h, w, o, kh, stride, pad, ho, wo);
            });
        }
        Ok(self.push_op(
            out,
            vec![b, o, ho, wo],
            &[input.id, weight.id, bias.id],
            BackStep::Conv2d { input: input.id, weight: weight.id, bias: bias.id, stride, pad },
        ))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// `training` selects batch statistics (updating `stats` with momentum
    /// when `update_running` is set) versus the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &mut BnStats,
        training: bool,
        update_running: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::config(format!(
                "batch_norm gamma/beta shapes {:?}/{:?} != channel dim [{}]",
                gamma.shape(),
                beta.shape(),
                c
            )));
        }
        if stats.mean.len() != c {
            return Err(Error::config(format!(
                "batch_norm running stats track {} channels, input has {}",
                stats.mean.len(),
                c
            )));
        }
        let m = b * h * w;
        if training && m < 2 {
            return Err(Error::config(
                "batch_norm in training mode needs at least 2 values per channel (variance undefined)"
                    .to_string(),
            ));
        }

        let (mu, var): (Vec<f64>, Vec<f64>) = if training {
            let x = &self.nodes[input.id].data;
            let mut mu = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..h * w {
                        s += x[base + i];
                    }
                }
                let mean = s / m as f64;
                let mut v = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..h * w {
                        let d = x[base + i] - mean;
                        v += d * d;
                    }
                }
                mu[ci] = mean;
                var[ci] = v / m as f64;
            }
            (mu, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };

        if training && update_running {
            // unbiased variance for the running estimate
            let unbias = m as f64 / (m as f64 - 1.0);
            for ci in 0..c {
                stats.mean[ci] = (1.0 - momentum) * stats.mean[ci] + momentum * mu[ci];
                stats.var[ci] = (1.0 - momentum) * stats.var[ci] + momentum * var[ci] * unbias;
            }
        }

        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; b * c * h * w];
        {
            let x = &self.nodes[input.id].data;
            let g = &self.nodes[gamma.id].data;
            let bt = &self.nodes[beta.id].data;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let (gm, bb, mm, iv) = (g[ci], bt[ci], mu[ci], inv[ci]);
                    for i in 0..h * w {
                        out[base + i] = gm * (x[base + i] - mm) * iv + bb;
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            vec![b, c, h, w],
            &[input.id, gamma.id, beta.id],
            BackStep::BatchNorm { x: input.id, gamma: gamma.id, beta: beta.id, mu, inv },
        ))
    }

    /// Average pooling to a fixed `s x s` grid with bin `i` covering
    /// `floor(i*H/s) .. ceil((i+1)*H/s)`.
    pub fn adaptive_avg_pool2d(&mut self, input: &Tensor, s: usize) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4();
        if s == 0 || s > h.min(w) {
            return Err(Error::config(format!(
                "adaptive pool size {} outside 1..=min({}, {})",
                s, h, w
            )));
        }
        let mut out = vec![0.0; b * c * s * s];
        {
            let x = &self.nodes[input.id].data;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let obase = (bi * c + ci) * s * s;
                    for oy in 0..s {
                        let (y0, y1) = bin_range(oy, h, s);
                        for ox in 0..s {
                            let (x0, x1) = bin_range(ox, w, s);
                            let mut acc = 0.0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    acc += x[base + iy * w + ix];
                                }
                            }
                            out[obase + oy * s + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, vec![b, c, s, s], &[input.id], BackStep::AdaptivePool { x: input.id, s }))
    }

    /// Spatial mean per channel: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: &Tensor) -> Tensor {
        let (b, c, h, w) = input.dims4();
        let mut out = vec![0.0; b * c];
        {
            let x = &self.nodes[input.id].data;
            let inv = 1.0 / (h * w) as f64;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let mut acc = 0.0;
                    for i in 0..h * w {
                        acc += x[base + i];
                    }
                    out[bi * c + ci] = acc * inv;
                }
            }
        }
        self.push_op(out, vec![b, c], &[input.id], BackStep::GlobalPool { x: input.id })
    }

    /// Nearest-neighbor 2x spatial upsample.
    pub fn upsample_nearest2x(&mut self, input: &Tensor) -> Tensor {
        let (b, c, h, w) = input.dims4();
        let mut out = vec![0.0; b * c * 4 * h * w];
        {
            let x = &self.nodes[input.id].data;
            for bc in 0..b * c {
                let base = bc * h * w;
                let obase = bc * 4 * h * w;
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        out[obase + oy * 2 * w + ox] = x[base + (oy / 2) * w + ox / 2];
                    }
                }
            }
        }
        self.push_op(out, vec![b, c, 2 * h, 2 * w], &[input.id], BackStep::Upsample2x { x: input.id })
    }

    /// Elementwise binary cross-entropy on logits, computed in the
    /// numerically stable max/log1p form.
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Tensor {
        assert_eq!(logits.shape(), targets.shape());
        let data: Vec<f64> = self.nodes[logits.id]
            .data
            .iter()
            .zip(self.nodes[targets.id].data.iter())
            .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        self.push_op(
            data,
            logits.shape().to_vec(),
            &[logits.id, targets.id],
            BackStep::BceLogits { z: logits.id, t: targets.id },
        )
    }

    /// Elementwise smooth-L1 (Huber with delta 1).
    pub fn smooth_l1(&mut self, pred: &Tensor, target: &Tensor) -> Tensor {
        assert_eq!(pred.shape(), target.shape());
        let data: Vec<f64> = self.nodes[pred.id]
            .data
            .iter()
            .zip(self.nodes[target.id].data.iter())
            .map(|(p, t)| {
                let d = p - t;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .collect();
        self.push_op(
            data,
            pred.shape().to_vec(),
            &[pred.id, target.id],
            BackStep::SmoothL1 { p: pred.id, t: target.id },
        )
    }
}

fn bin_range(i: usize, extent: usize, s: usize) -> (usize, usize) {
    let lo = i * extent / s;
    let hi = ((i + 1) * extent).div_ceil(s);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_item(
    out: &mut [f64],
    x: &[f64],
    wt: &[f64],
    bias: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for oc in 0..o {
        let ob = oc * ho * wo;
        out[ob..ob + ho * wo].fill(bias[oc]);
        for ic in 0..c {
            let xb = ic * h * w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = out_range(h, ho, ky, stride, pad);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = out_range(w, wo, kx, stride, pad);
                    let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = xb + iy * w;
                        let orow = ob + oy * wo;
                        let mut ix = ox_lo * stride + kx - pad;
                        for ox in ox_lo..ox_hi {
                            out[orow + ox] += wv * x[xrow + ix];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    gout: &[f64],
    x: &[f64],
    x_shape: &[usize],
    wt: &[f64],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, _, k, _) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;

    let mut gi = vec![0.0; b * c * h * w];
    par::for_each_chunk(&mut gi, c * h * w, |bi, gx| {
        let g = &gout[bi * o * ho * wo..(bi + 1) * o * ho * wo];
        for oc in 0..o {
            let gb = oc * ho * wo;
            for ic in 0..c {
                let xb = ic * h * w;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = out_range(h, ho, ky, stride, pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = out_range(w, wo, kx, stride, pad);
                        let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = xb + iy * w;
                            let grow = gb + oy * wo;
                            let mut ix = ox_lo * stride + kx - pad;
                            for ox in ox_lo..ox_hi {
                                gx[xrow + ix] += wv * g[grow + ox];
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    });

    // dW and dB: per-item partials summed in item order.
    let wlen = o * c * k * k;
    let partial = par::sum_partials(b, wlen + o, |bi| {
        let g = &gout[bi * o * ho * wo..(bi + 1) * o * ho * wo];
        let xi = &x[bi * c * h * w..(bi + 1) * c * h * w];
        let mut p = vec![0.0; wlen + o];
        for oc in 0..o {
            let gb = oc * ho * wo;
            for ic in 0..c {
                let xb = ic * h * w;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = out_range(h, ho, ky, stride, pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = out_range(w, wo, kx, stride, pad);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = xb + iy * w;
                            let grow = gb + oy * wo;
                            let mut ix = ox_lo * stride + kx - pad;
                            for ox in ox_lo..ox_hi {
                                acc += g[grow + ox] * xi[xrow + ix];
                                ix += stride;
                            }
                        }
                        p[((oc * c + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
            let mut bacc = 0.0;
            for v in &g[gb..gb + ho * wo] {
                bacc += v;
            }
            p[wlen + oc] = bacc;
        }
        p
    });
    let gw = partial[..wlen].to_vec();
    let gbias = partial[wlen..].to_vec();
    (gi, gw, gbias)
}

pub(super) fn batch_norm_backward(
    gout: &[f64],
    x: &[f64],
    x_shape: &[usize],
    gamma: &[f64],
    mu: &[f64],
    inv: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let m = (b * h * w) as f64;
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ci in 0..c {
        let mut s1 = 0.0; // sum g
        let mut s2 = 0.0; // sum g * xhat
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let g = gout[base + i];
                let xh = (x[base + i] - mu[ci]) * inv[ci];
                s1 += g;
                s2 += g * xh;
            }
        }
        gb[ci] = s1;
        gg[ci] = s2;
        let gm = gamma[ci] * inv[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let g = gout[base + i];
                let xh = (x[base + i] - mu[ci]) * inv[ci];
                gx[base + i] = gm * (g - s1 / m - xh * s2 / m);
            }
        }
    }
    (gx, gg, gb)
}

pub(super) fn adaptive_pool_backward(gout: &[f64], x_shape: &[usize], s: usize) -> Vec<f64> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut gx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let base = bc * h * w;
        let obase = bc * s * s;
        for oy in 0..s {
            let (y0, y1) = bin_range(oy, h, s);
            for ox in 0..s {
                let (x0, x1) = bin_range(ox, w, s);
                let g = gout[obase + oy * s + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gx[base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    gx
}

pub(super) fn global_pool_backward(gout: &[f64], x_shape: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let inv = 1.0 / (h * w) as f64;
    let mut gx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let g = gout[bc] * inv;
        gx[bc * h * w..(bc + 1) * h * w].fill(g);
    }
    gx
}

pub(super) fn upsample2x_backward(gout: &[f64], x_shape: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut gx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let base = bc * h * w;
        let obase = bc * 4 * h * w;
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                gx[base + (oy / 2) * w + ox / 2] += gout[obase + oy * 2 * w + ox];
            }
        }
    }
    gx
}

pub(super) fn bce_logits_backward(gout: &[f64], z: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gz: Vec<f64> = gout
        .iter()
        .zip(z.iter().zip(t.iter()))
        .map(|(g, (zi, ti))| g * (super::sigmoid_stable(*zi) - ti))
        .collect();
    let gt: Vec<f64> = gout.iter().zip(z.iter()).map(|(g, zi)| -g * zi).collect();
    (gz, gt)
}

pub(super) fn smooth_l1_backward(gout: &[f64], p: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gp: Vec<f64> = gout
        .iter()
        .zip(p.iter().zip(t.iter()))
        .map(|(g, (pi, ti))| g * (pi - ti).clamp(-1.0, 1.0))
        .collect();
    let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
    (gp, gt)
}
