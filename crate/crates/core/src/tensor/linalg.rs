//! Matrix products, softmax family and cosine-similarity ops.

use super::{BackStep, Tape, Tensor};
use crate::error::{Error, Result};

impl Tape {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2);
        assert_eq!(b.shape().len(), 2);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let data = {
            let ad = &self.nodes[a.id].data;
            let bd = &self.nodes[b.id].data;
            matmul_raw(ad, bd, m, k, n)
        };
        self.push_op(data, vec![m, n], &[a.id, b.id], BackStep::MatMul { a: a.id, b: b.id, m, k, n })
    }

    /// Batched matmul: `[nb,m,k] x [nb,k,p] -> [nb,m,p]`.
    pub fn bmm(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 3);
        assert_eq!(b.shape().len(), 3);
        let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (nb2, k2, p) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(nb, nb2);
        assert_eq!(k, k2);
        let mut data = vec![0.0; nb * m * p];
        {
            let ad = &self.nodes[a.id].data;
            let bd = &self.nodes[b.id].data;
            for i in 0..nb {
                let block = matmul_raw(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * p..(i + 1) * k * p], m, k, p);
                data[i * m * p..(i + 1) * m * p].copy_from_slice(&block);
            }
        }
        self.push_op(data, vec![nb, m, p], &[a.id, b.id], BackStep::Bmm { a: a.id, b: b.id, nb, m, k, p })
    }

    /// Affine map over the last axis of a 2-D tensor:
    /// `y = x w^T + b` with `x: [rows, d_in]`, `w: [d_out, d_in]`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 2);
        let (rows, d_in) = (x.shape()[0], x.shape()[1]);
        let (d_out, d_in2) = (w.shape()[0], w.shape()[1]);
        assert_eq!(d_in, d_in2, "linear weight dim {} vs input dim {}", d_in2, d_in);
        assert_eq!(b.shape(), [d_out]);
        let mut data = vec![0.0; rows * d_out];
        {
            let xd = &self.nodes[x.id].data;
            let wd = &self.nodes[w.id].data;
            let bd = &self.nodes[b.id].data;
            for r in 0..rows {
                for o in 0..d_out {
                    let mut acc = bd[o];
                    let xrow = &xd[r * d_in..(r + 1) * d_in];
                    let wrow = &wd[o * d_in..(o + 1) * d_in];
                    for i in 0..d_in {
                        acc += xrow[i] * wrow[i];
                    }
                    data[r * d_out + o] = acc;
                }
            }
        }
        self.push_op(
            data,
            vec![rows, d_out],
            &[x.id, w.id, b.id],
            BackStep::Linear { x: x.id, w: w.id, b: b.id, rows, d_in, d_out },
        )
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax_lastdim(&mut self, x: &Tensor) -> Tensor {
        let cols = *x.shape().last().expect("softmax on empty shape");
        let rows = x.numel() / cols;
        let mut data = vec![0.0; x.numel()];
        {
            let xd = &self.nodes[x.id].data;
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (i, v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    data[r * cols + i] = e;
                    z += e;
                }
                for i in 0..cols {
                    data[r * cols + i] /= z;
                }
            }
        }
        self.push_op(data, x.shape().to_vec(), &[x.id], BackStep::SoftmaxLast { rows, cols, x: x.id })
    }

    /// Row-wise log-sum-exp of a matrix: `[r,c] -> [r]`, max-shifted.
    pub fn logsumexp_rows(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 2);
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; rows];
        {
            let xd = &self.nodes[x.id].data;
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                data[r] = m + s.ln();
            }
        }
        self.push_op(data, vec![rows], &[x.id], BackStep::LogSumExpRows { x: x.id, rows, cols })
    }

    /// Cosine similarity of two vectors with zero-norm guard `eps`.
    pub fn cosine(&mut self, u: &Tensor, v: &Tensor, eps: f64) -> Tensor {
        assert_eq!(u.shape(), v.shape(), "cosine on mismatched shapes");
        let c = {
            let ud = &self.nodes[u.id].data;
            let vd = &self.nodes[v.id].data;
            cosine_raw(ud, vd, eps)
        };
        self.push_op(vec![c], vec![1], &[u.id, v.id], BackStep::Cosine { u: u.id, v: v.id, eps })
    }

    /// Row-by-row cosine of two `[n, l]` matrices -> `[n]`.
    pub fn rowwise_cosine(&mut self, a: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.shape().len(), 2);
        let (n, l) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; n];
        {
            let ad = &self.nodes[a.id].data;
            let bd = &self.nodes[b.id].data;
            for i in 0..n {
                data[i] = cosine_raw(&ad[i * l..(i + 1) * l], &bd[i * l..(i + 1) * l], eps);
            }
        }
        self.push_op(data, vec![n], &[a.id, b.id], BackStep::RowCosine { a: a.id, b: b.id, eps })
    }

    /// All-pairs cosine matrix: rows of `a` against rows of `b`.
    pub fn cosine_matrix(&mut self, a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::config("cosine_matrix expects rank-2 inputs".to_string()));
        }
        if a.shape()[1] != b.shape()[1] {
            return Err(Error::config(format!(
                "cosine_matrix embedding dims differ: {} vs {}",
                a.shape()[1],
                b.shape()[1]
            )));
        }
        let (n, l) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[0];
        let mut data = vec![0.0; n * m];
        {
            let ad = &self.nodes[a.id].data;
            let bd = &self.nodes[b.id].data;
            for i in 0..n {
                for j in 0..m {
                    data[i * m + j] = cosine_raw(&ad[i * l..(i + 1) * l], &bd[j * l..(j + 1) * l], eps);
                }
            }
        }
        Ok(self.push_op(data, vec![n, m], &[a.id, b.id], BackStep::CosineMatrix { a: a.id, b: b.id, eps }))
    }

    /// Standard multi-head scaled dot-product self-attention on `[B,T,L]`,
    /// composed from matmul/softmax primitives. Projection weights are
    /// `[L,L]` with per-head blocks of width `L/heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_self_attention(
        &mut self,
        x: &Tensor,
        wq: &Tensor,
        bq: &Tensor,
        wk: &Tensor,
        bk: &Tensor,
        wv: &Tensor,
        bv: &Tensor,
        wo: &Tensor,
        bo: &Tensor,
        heads: usize,
    ) -> Result<Tensor> {
        self.mhsa_with_weights(x, wq, bq, wk, bk, wv, bv, wo, bo, heads).map(|(out, _)| out)
    }

    /// Same as [`Tape::multi_head_self_attention`] but also returns the
    /// `[B*heads, T, T]` attention weights for inspection.
    #[allow(clippy::too_many_arguments)]
    pub fn mhsa_with_weights(
        &mut self,
        x: &Tensor,
        wq: &Tensor,
        bq: &Tensor,
        wk: &Tensor,
        bk: &Tensor,
        wv: &Tensor,
        bv: &Tensor,
        wo: &Tensor,
        bo: &Tensor,
        heads: usize,
    ) -> Result<(Tensor, Tensor)> {
        if x.shape().len() != 3 {
            return Err(Error::config(format!("attention input rank {} != 3", x.shape().len())));
        }
        let (b, t, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if heads == 0 || l % heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {} not divisible by {} heads",
                l, heads
            )));
        }
        let d = l / heads;

        let flat = self.reshape(x, &[b * t, l]);
        let q = self.linear(&flat, wq, bq);
        let k = self.linear(&flat, wk, bk);
        let v = self.linear(&flat, wv, bv);

        // [B*T, L] -> [B*H, T, D]
        let split = |tape: &mut Tape, m: &Tensor| {
            let r = tape.reshape(m, &[b, t, heads, d]);
            let p = tape.permute(&r, &[0, 2, 1, 3]);
            tape.reshape(&p, &[b * heads, t, d])
        };
        let qh = split(self, &q);
        let kh = split(self, &k);
        let vh = split(self, &v);

        let kt = self.permute(&kh, &[0, 2, 1]);
        let scores = self.bmm(&qh, &kt);
        let scaled = self.scale(&scores, 1.0 / (d as f64).sqrt());
        let attn = self.softmax_lastdim(&scaled);
        let ctx = self.bmm(&attn, &vh);

        // [B*H, T, D] -> [B*T, L]
        let r = self.reshape(&ctx, &[b, heads, t, d]);
        let p = self.permute(&r, &[0, 2, 1, 3]);
        let merged = self.reshape(&p, &[b * t, l]);
        let out = self.linear(&merged, wo, bo);
        let out3 = self.reshape(&out, &[b, t, l]);
        Ok((out3, attn))
    }
}

pub(super) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(super) fn matmul_backward(
    gout: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    // ga = g b^T, gb = a^T g
    let mut ga = vec![0.0; m * k];
    for i in 0..m {
        for kk in 0..k {
            let mut acc = 0.0;
            let grow = &gout[i * n..(i + 1) * n];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            ga[i * k + kk] = acc;
        }
    }
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let grow = &gout[i * n..(i + 1) * n];
            let brow = &mut gb[kk * n..(kk + 1) * n];
            for j in 0..n {
                brow[j] += av * grow[j];
            }
        }
    }
    (ga, gb)
}

pub(super) fn bmm_backward(
    gout: &[f64],
    a: &[f64],
    b: &[f64],
    nb: usize,
    m: usize,
    k: usize,
    p: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; nb * m * k];
    let mut gb = vec![0.0; nb * k * p];
    for i in 0..nb {
        let (gai, gbi) = matmul_backward(
            &gout[i * m * p..(i + 1) * m * p],
            &a[i * m * k..(i + 1) * m * k],
            &b[i * k * p..(i + 1) * k * p],
            m,
            k,
            p,
        );
        ga[i * m * k..(i + 1) * m * k].copy_from_slice(&gai);
        gb[i * k * p..(i + 1) * k * p].copy_from_slice(&gbi);
    }
    (ga, gb)
}

pub(super) fn linear_backward(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; rows * d_in];
    let mut gw = vec![0.0; d_out * d_in];
    let mut gb = vec![0.0; d_out];
    for r in 0..rows {
        let grow = &gout[r * d_out..(r + 1) * d_out];
        let xrow = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let g = grow[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let wrow = &w[o * d_in..(o + 1) * d_in];
            let gxrow = &mut gx[r * d_in..(r + 1) * d_in];
            for i in 0..d_in {
                gxrow[i] += g * wrow[i];
            }
            let gwrow = &mut gw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                gwrow[i] += g * xrow[i];
            }
        }
    }
    (gx, gw, gb)
}

pub(super) fn softmax_backward(gout: &[f64], y: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut gx = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &gout[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        let gxr = &mut gx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            gxr[j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

pub(super) fn logsumexp_backward(gout: &[f64], x: &[f64], y: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut gx = vec![0.0; rows * cols];
    for r in 0..rows {
        for j in 0..cols {
            gx[r * cols + j] = gout[r] * (x[r * cols + j] - y[r]).exp();
        }
    }
    gx
}

fn cosine_raw(u: &[f64], v: &[f64], eps: f64) -> f64 {
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu.max(eps) * nv.max(eps))
}

/// d cos/d u and d cos/d v for a single pair.
fn cosine_pair_grads(u: &[f64], v: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let au = nu.max(eps);
    let av = nv.max(eps);
    let c = dot / (au * av);
    let inv = 1.0 / (au * av);
    let gu: Vec<f64> = u
        .iter()
        .zip(v.iter())
        .map(|(ui, vi)| vi * inv - if nu > eps { c * ui / (nu * nu) } else { 0.0 })
        .collect();
    let gv: Vec<f64> = u
        .iter()
        .zip(v.iter())
        .map(|(ui, vi)| ui * inv - if nv > eps { c * vi / (nv * nv) } else { 0.0 })
        .collect();
    (gu, gv)
}

pub(super) fn cosine_backward(g: f64, u: &[f64], v: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (mut gu, mut gv) = cosine_pair_grads(u, v, eps);
    for x in gu.iter_mut() {
        *x *= g;
    }
    for x in gv.iter_mut() {
        *x *= g;
    }
    (gu, gv)
}

pub(super) fn row_cosine_backward(
    gout: &[f64],
    a: &[f64],
    b: &[f64],
    l: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = gout.len();
    let mut ga = vec![0.0; n * l];
    let mut gb = vec![0.0; n * l];
    for i in 0..n {
        let (gu, gv) = cosine_pair_grads(&a[i * l..(i + 1) * l], &b[i * l..(i + 1) * l], eps);
        for j in 0..l {
            ga[i * l + j] = gout[i] * gu[j];
            gb[i * l + j] = gout[i] * gv[j];
        }
    }
    (ga, gb)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn cosine_matrix_backward(
    gout: &[f64],
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    l: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; n * l];
    let mut gb = vec![0.0; m * l];
    for i in 0..n {
        for j in 0..m {
            let g = gout[i * m + j];
            if g == 0.0 {
                continue;
            }
            let (gu, gv) = cosine_pair_grads(&a[i * l..(i + 1) * l], &b[j * l..(j + 1) * l], eps);
            for t in 0..l {
                ga[i * l + t] += g * gu[t];
                gb[j * l + t] += g * gv[t];
            }
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn cosine_trivial_cases() {
        let mut tape = Tape::new();
        let u = tape.leaf(vec![1.0, 2.0, -3.0], &[3], true);
        let c = tape.cosine(&u, &u, 1e-8);
        assert!((tape.data(&c)[0] - 1.0).abs() < 1e-12);

        let a = tape.leaf(vec![1.0, 0.0], &[2], true);
        let b = tape.leaf(vec![0.0, 5.0], &[2], true);
        let c2 = tape.cosine(&a, &b, 1e-8);
        assert_eq!(tape.data(&c2)[0], 0.0);

        let neg = tape.neg(&u);
        let c3 = tape.cosine(&u, &neg, 1e-8);
        assert!((tape.data(&c3)[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = randn(&mut rng, 6);
        let v = randn(&mut rng, 6);
        let mut tape = Tape::new();
        let tu = tape.leaf(u.clone(), &[6], true);
        let tv = tape.leaf(v.clone(), &[6], true);
        let c = tape.cosine(&tu, &tv, 1e-8);
        tape.backward(&c).unwrap();
        let gu = tape.grad(&tu).unwrap().to_vec();
        let gv = tape.grad(&tv).unwrap().to_vec();

        let f = |u: &[f64], v: &[f64]| cosine_raw(u, v, 1e-8);
        let h = 1e-6;
        for i in 0..6 {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let nu = (f(&up, &v) - f(&um, &v)) / (2.0 * h);
            assert!((gu[i] - nu).abs() < 1e-8, "gu[{}] {} vs {}", i, gu[i], nu);
            let mut vp = v.clone();
            vp[i] += h;
            let mut vm = v.clone();
            vm[i] -= h;
            let nv = (f(&u, &vp) - f(&u, &vm)) / (2.0 * h);
            assert!((gv[i] - nv).abs() < 1e-8, "gv[{}] {} vs {}", i, gv[i], nv);
        }
    }

    #[test]
    fn cosine_matrix_matches_dot_norm_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = randn(&mut rng, 3 * 5);
        let b = randn(&mut rng, 3 * 5);
        let mut tape = Tape::new();
        let ta = tape.leaf(a.clone(), &[3, 5], true);
        let tb = tape.constant(b.clone(), &[3, 5]);
        let s = tape.cosine_matrix(&ta, &tb, 1e-8).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = cosine_raw(&a[i * 5..(i + 1) * 5], &b[j * 5..(j + 1) * 5], 1e-8);
                assert!((tape.data(&s)[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_matrix_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], &[2, 3], true);
        let b = tape.leaf(vec![0.0; 8], &[2, 4], true);
        assert!(tape.cosine_matrix(&a, &b, 1e-8).is_err());
    }

    #[test]
    fn matmul_and_linear_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 6);
        let b = randn(&mut rng, 12);
        let mix = randn(&mut rng, 8);

        let f = |a: &[f64], b: &[f64]| -> f64 {
            let out = matmul_raw(a, b, 2, 3, 4);
            out.iter().zip(mix.iter()).map(|(x, m)| x * m).sum()
        };
        let mut tape = Tape::new();
        let ta = tape.leaf(a.clone(), &[2, 3], true);
        let tb = tape.leaf(b.clone(), &[3, 4], true);
        let y = tape.matmul(&ta, &tb);
        let tm = tape.constant(mix.clone(), &[2, 4]);
        let p = tape.mul(&y, &tm);
        let s = tape.sum_all(&p);
        tape.backward(&s).unwrap();

        let h = 1e-6;
        let ga = tape.grad(&ta).unwrap();
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let n = (f(&ap, &b) - f(&am, &b)) / (2.0 * h);
            assert!((ga[i] - n).abs() < 1e-8);
        }
        let gb = tape.grad(&tb).unwrap();
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let n = (f(&a, &bp) - f(&a, &bm)) / (2.0 * h);
            assert!((gb[i] - n).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, 4 * 5);
        let mix = randn(&mut rng, 4 * 5);
        let mut tape = Tape::new();
        let tx = tape.leaf(x.clone(), &[4, 5], true);
        let y = tape.softmax_lastdim(&tx);
        for r in 0..4 {
            let s: f64 = tape.data(&y)[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let tm = tape.constant(mix.clone(), &[4, 5]);
        let p = tape.mul(&y, &tm);
        let s = tape.sum_all(&p);
        tape.backward(&s).unwrap();
        let g = tape.grad(&tx).unwrap();

        let f = |v: &[f64]| -> f64 {
            let mut acc = 0.0;
            for r in 0..4 {
                let row = &v[r * 5..(r + 1) * 5];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|a| (a - m).exp()).sum();
                for (j, a) in row.iter().enumerate() {
                    acc += (a - m).exp() / z * mix[r * 5 + j];
                }
            }
            acc
        };
        let h = 1e-6;
        let mut pert = x.clone();
        for i in 0..x.len() {
            pert[i] = x[i] + h;
            let fp = f(&pert);
            pert[i] = x[i] - h;
            let fm = f(&pert);
            pert[i] = x[i];
            let n = (fp - fm) / (2.0 * h);
            assert!((g[i] - n).abs() < 1e-8, "{} vs {}", g[i], n);
        }
    }

    #[test]
    fn logsumexp_matches_direct_and_grad_is_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3], true);
        let y = tape.logsumexp_rows(&x);
        let d0: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((tape.data(&y)[0] - d0).abs() < 1e-12);
        let s = tape.sum_all(&y);
        tape.backward(&s).unwrap();
        let g = tape.grad(&x).unwrap();
        let z: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert!((g[0] - 1f64.exp() / z).abs() < 1e-12);
        assert!((g[2] - 3f64.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn attention_single_token_is_projected_value() {
        // T=1: softmax over one key is 1, so out = wo (wv x + bv) + bo
        let l = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, l);
        let wq = randn(&mut rng, l * l);
        let wk = randn(&mut rng, l * l);
        let wv = randn(&mut rng, l * l);
        let wo = randn(&mut rng, l * l);
        let b0 = vec![0.0; l];

        let mut tape = Tape::new();
        let tx = tape.leaf(x.clone(), &[1, 1, l], true);
        let twq = tape.leaf(wq, &[l, l], true);
        let tbq = tape.leaf(b0.clone(), &[l], true);
        let twk = tape.leaf(wk, &[l, l], true);
        let tbk = tape.leaf(b0.clone(), &[l], true);
        let twv = tape.leaf(wv.clone(), &[l, l], true);
        let tbv = tape.leaf(b0.clone(), &[l], true);
        let two = tape.leaf(wo.clone(), &[l, l], true);
        let tbo = tape.leaf(b0.clone(), &[l], true);
        let (out, attn) = tape
            .mhsa_with_weights(&tx, &twq, &tbq, &twk, &tbk, &twv, &tbv, &two, &tbo, 2)
            .unwrap();
        assert_eq!(tape.data(&attn), &[1.0, 1.0]);

        let mut v = vec![0.0; l];
        for o in 0..l {
            for i in 0..l {
                v[o] += wv[o * l + i] * x[i];
            }
        }
        let mut expect = vec![0.0; l];
        for o in 0..l {
            for i in 0..l {
                expect[o] += wo[o * l + i] * v[i];
            }
        }
        for (a, e) in tape.data(&out).iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula_oracle() {
        // B=1, T=3, L=4, heads=2 against an independent direct computation.
        let (b, t, l, heads) = (1usize, 3usize, 4usize, 2usize);
        let d = l / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = randn(&mut rng, b * t * l);
        let wq = randn(&mut rng, l * l);
        let bq = randn(&mut rng, l);
        let wk = randn(&mut rng, l * l);
        let bk = randn(&mut rng, l);
        let wv = randn(&mut rng, l * l);
        let bv = randn(&mut rng, l);
        let wo = randn(&mut rng, l * l);
        let bo = randn(&mut rng, l);

        // direct: project, per-head attention, concat, out-project
        let proj = |w: &[f64], bias: &[f64], tok: &[f64]| -> Vec<f64> {
            (0..l).map(|o| bias[o] + (0..l).map(|i| w[o * l + i] * tok[i]).sum::<f64>()).collect()
        };
        let toks: Vec<&[f64]> = (0..t).map(|i| &x[i * l..(i + 1) * l]).collect();
        let qs: Vec<Vec<f64>> = toks.iter().map(|tk| proj(&wq, &bq, tk)).collect();
        let ks: Vec<Vec<f64>> = toks.iter().map(|tk| proj(&wk, &bk, tk)).collect();
        let vs: Vec<Vec<f64>> = toks.iter().map(|tk| proj(&wv, &bv, tk)).collect();
        let mut merged = vec![vec![0.0; l]; t];
        for h in 0..heads {
            for qi in 0..t {
                let mut scores = vec![0.0; t];
                for ki in 0..t {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += qs[qi][h * d + j] * ks[ki][h * d + j];
                    }
                    scores[ki] = acc / (d as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for ki in 0..t {
                    let a = (scores[ki] - m).exp() / z;
                    for j in 0..d {
                        merged[qi][h * d + j] += a * vs[ki][h * d + j];
                    }
                }
            }
        }
        let expect: Vec<f64> = (0..t).flat_map(|qi| proj(&wo, &bo, &merged[qi])).collect();

        let mut tape = Tape::new();
        let tx = tape.leaf(x.clone(), &[b, t, l], true);
        let twq = tape.leaf(wq, &[l, l], true);
        let tbq = tape.leaf(bq, &[l], true);
        let twk = tape.leaf(wk, &[l, l], true);
        let tbk = tape.leaf(bk, &[l], true);
        let twv = tape.leaf(wv, &[l, l], true);
        let tbv = tape.leaf(bv, &[l], true);
        let two = tape.leaf(wo, &[l, l], true);
        let tbo = tape.leaf(bo, &[l], true);
        let (out, attn) = tape
            .mhsa_with_weights(&tx, &twq, &tbq, &twk, &tbk, &twv, &tbv, &two, &tbo, heads)
            .unwrap();
        for (a, e) in tape.data(&out).iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-10, "{} vs {}", a, e);
        }
        // row-stochastic attention
        for r in 0..b * heads * t {
            let row = &tape.data(&attn)[r * t..(r + 1) * t];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0; 6], &[1, 2, 3], true);
        let w = tape.leaf(vec![0.0; 9], &[3, 3], true);
        let b = tape.leaf(vec![0.0; 3], &[3], true);
        assert!(tape
            .multi_head_self_attention(&x, &w, &b, &w, &b, &w, &b, &w, &b, 2)
            .is_err());
    }
}
