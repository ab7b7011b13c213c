// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batched forward and reverse pass of the decoder.
//!
//! Sequences in a batch are concatenated row-wise; every linear map runs on
//! the stacked rows and attention runs per sequence segment. Interventions
//! hook into the residual stream and the FFN at named (layer, position)
//! sites, and the reverse pass reports gradients at those sites.

use super::weights::{LayerWeights, Weights};
use super::ModelConfig;
use crate::numerics::{gemm, Matrix};

const LN_EPS: f64 = 1e-5;

/// A hook applied during the forward pass of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Intervention {
    /// Adds `delta` to the FFN output of `layer` at `position`.
    AddFfnOutput {
        layer: usize,
        position: usize,
        delta: Vec<f64>,
    },
    /// Replaces the residual stream leaving block `layer` at `position`.
    SetHidden {
        layer: usize,
        position: usize,
        value: Vec<f64>,
    },
    /// Replaces the FFN inner activation `σ(x·W_fc)` of `layer` at `position`.
    SetActivation {
        layer: usize,
        position: usize,
        value: Vec<f64>,
    },
    /// Adds `delta` to the input embedding at `position`.
    AddEmbedding { position: usize, delta: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SeqInput<'a> {
    pub tokens: &'a [u32],
    pub interventions: &'a [Intervention],
}

pub(crate) struct LayerCache {
    ln1_xhat: Matrix,
    ln1_rstd: Vec<f64>,
    ln1_out: Matrix,
    qkv: Matrix,
    /// Attention probabilities per `(segment, head)`, each `T×T` row-major.
    att: Vec<Vec<f64>>,
    att_out: Matrix,
    ln2_xhat: Matrix,
    ln2_rstd: Vec<f64>,
    ln2_out: Matrix,
    fc_pre: Matrix,
    pub act: Matrix,
    pub ffn_out: Matrix,
    pub x_out: Matrix,
}

pub(crate) struct Activations {
    /// `(first row, length)` per sequence.
    pub segments: Vec<(usize, usize)>,
    tokens: Vec<u32>,
    pub layers: Vec<LayerCache>,
    lnf_xhat: Matrix,
    lnf_rstd: Vec<f64>,
    pub final_out: Matrix,
}

impl Activations {
    pub fn row(&self, segment: usize, position: usize) -> usize {
        self.segments[segment].0 + position
    }

    /// Logits for the requested stacked rows, one output row each.
    pub fn logits(&self, w: &Weights, rows: &[usize]) -> Matrix {
        let d = w.wte.cols();
        let v = w.wte.rows();
        let mut gathered = Matrix::zeros(rows.len(), d);
        for (i, &r) in rows.iter().enumerate() {
            gathered.row_mut(i).copy_from_slice(self.final_out.row(r));
        }
        let mut out = Matrix::zeros(rows.len(), v);
        gemm(
            rows.len(),
            d,
            v,
            1.0,
            (gathered.data(), d, 1),
            (w.wte.data(), 1, d),
            0.0,
            (out.data_mut(), v, 1),
        );
        out
    }
}

/// Gradients produced by [`backward`].
pub(crate) struct Gradients {
    pub params: Option<Weights>,
    /// Per sequence, per intervention: the gradient at its site when the
    /// intervention carries one.
    pub sites: Vec<Vec<Option<Vec<f64>>>>,
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// `x·Wᵀ + b` for a row batch `x` and an `out × in` weight.
fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let (n, k) = x.shape();
    let out = w.rows();
    let mut y = Matrix::zeros(n, out);
    for r in 0..n {
        y.row_mut(r).copy_from_slice(b);
    }
    gemm(
        n,
        k,
        out,
        1.0,
        (x.data(), k, 1),
        (w.data(), 1, k),
        1.0,
        (y.data_mut(), out, 1),
    );
    y
}

/// Reverse of [`linear`]: returns `dx` and accumulates `dW`, `db` if given.
fn linear_back(
    dy: &Matrix,
    x: &Matrix,
    w: &Matrix,
    grads: Option<(&mut Matrix, &mut [f64])>,
) -> Matrix {
    let (n, out) = dy.shape();
    let k = w.cols();
    let mut dx = Matrix::zeros(n, k);
    gemm(
        n,
        out,
        k,
        1.0,
        (dy.data(), out, 1),
        (w.data(), k, 1),
        0.0,
        (dx.data_mut(), k, 1),
    );
    if let Some((dw, db)) = grads {
        gemm(
            out,
            n,
            k,
            1.0,
            (dy.data(), 1, out),
            (x.data(), k, 1),
            1.0,
            (dw.data_mut(), k, 1),
        );
        for r in 0..n {
            for (b, g) in db.iter_mut().zip(dy.row(r)) {
                *b += g;
            }
        }
    }
    dx
}

fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for (i, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xh[i] * g[i] + b[i];
        }
    }
    (out, xhat, rstd)
}

fn layer_norm_back(
    dy: &Matrix,
    xhat: &Matrix,
    rstd: &[f64],
    g: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut grads = grads;
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        if let Some((dg, db)) = grads.as_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xh[i];
                db[i] += dyr[i];
            }
        }
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let out = dx.row_mut(r);
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            out[i] = rstd[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

pub(crate) fn forward(cfg: &ModelConfig, w: &Weights, batch: &[SeqInput<'_>]) -> Activations {
    let d = cfg.d_model;
    let mut segments = Vec::with_capacity(batch.len());
    let mut tokens = Vec::new();
    let mut start = 0;
    for seq in batch {
        segments.push((start, seq.tokens.len()));
        start += seq.tokens.len();
        tokens.extend_from_slice(seq.tokens);
    }
    let rows = start;

    let mut x = Matrix::zeros(rows, d);
    for (s, seq) in batch.iter().enumerate() {
        let (first, len) = segments[s];
        for p in 0..len {
            let out = x.row_mut(first + p);
            let te = w.wte.row(seq.tokens[p] as usize);
            let pe = w.wpe.row(p);
            for i in 0..d {
                out[i] = te[i] + pe[i];
            }
        }
        for iv in seq.interventions {
            if let Intervention::AddEmbedding { position, delta } = iv {
                for (o, v) in x.row_mut(first + position).iter_mut().zip(delta) {
                    *o += v;
                }
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let cache = block_forward(cfg, lw, l, &x, &segments, batch);
        x = cache.x_out.clone();
        layers.push(cache);
    }
    let (final_out, lnf_xhat, lnf_rstd) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    Activations {
        segments,
        tokens,
        layers,
        lnf_xhat,
        lnf_rstd,
        final_out,
    }
}

fn block_forward(
    cfg: &ModelConfig,
    lw: &LayerWeights,
    l: usize,
    x_in: &Matrix,
    segments: &[(usize, usize)],
    batch: &[SeqInput<'_>],
) -> LayerCache {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (ln1_out, ln1_xhat, ln1_rstd) = layer_norm(x_in, &lw.ln1_g, &lw.ln1_b);
    let qkv = linear(&ln1_out, &lw.attn_w, &lw.attn_b);
    let mut att_out = Matrix::zeros(x_in.rows(), d);
    let mut att = Vec::with_capacity(segments.len() * heads);
    for &(first, len) in segments {
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut probs = vec![0.0; len * len];
            for i in 0..len {
                let q = &qkv.row(first + i)[qo..qo + dh];
                let row = &mut probs[i * len..(i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv.row(first + j)[ko..ko + dh];
                    let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for v in row[..=i].iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row[..=i].iter_mut() {
                    *v /= total;
                }
                let out = &mut att_out.row_mut(first + i)[qo..qo + dh];
                for j in 0..=i {
                    let p = probs[i * len + j];
                    let v = &qkv.row(first + j)[vo..vo + dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            att.push(probs);
        }
    }
    let attn = linear(&att_out, &lw.attn_proj_w, &lw.attn_proj_b);
    let x_mid = x_in.add(&attn).expect("same shape");

    let (ln2_out, ln2_xhat, ln2_rstd) = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b);
    let fc_pre = linear(&ln2_out, &lw.fc_w, &lw.fc_b);
    let mut act = fc_pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    for (s, seq) in batch.iter().enumerate() {
        for iv in seq.interventions {
            if let Intervention::SetActivation {
                layer,
                position,
                value,
            } = iv
            {
                if *layer == l {
                    act.row_mut(segments[s].0 + position).copy_from_slice(value);
                }
            }
        }
    }
    let ffn_out = linear(&act, &lw.proj_w, &lw.proj_b);
    let mut x_out = x_mid.add(&ffn_out).expect("same shape");
    for (s, seq) in batch.iter().enumerate() {
        for iv in seq.interventions {
            if let Intervention::AddFfnOutput {
                layer,
                position,
                delta,
            } = iv
            {
                if *layer == l {
                    for (o, v) in x_out.row_mut(segments[s].0 + position).iter_mut().zip(delta) {
                        *o += v;
                    }
                }
            }
        }
        for iv in seq.interventions {
            if let Intervention::SetHidden {
                layer,
                position,
                value,
            } = iv
            {
                if *layer == l {
                    x_out.row_mut(segments[s].0 + position).copy_from_slice(value);
                }
            }
        }
    }

    LayerCache {
        ln1_xhat,
        ln1_rstd,
        ln1_out,
        qkv,
        att,
        att_out,
        ln2_xhat,
        ln2_rstd,
        ln2_out,
        fc_pre,
        act,
        ffn_out,
        x_out,
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Reverse pass from logit gradients at selected rows.
///
/// With `param_grads == false` the pass stops as soon as every requested
/// intervention gradient is known.
pub(crate) fn backward(
    cfg: &ModelConfig,
    w: &Weights,
    acts: &Activations,
    batch: &[SeqInput<'_>],
    dlogits: &[(usize, Vec<f64>)],
    param_grads: bool,
) -> Gradients {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let rows = acts.final_out.rows();
    let mut grads = param_grads.then(|| Weights::zeros(cfg));
    let mut sites: Vec<Vec<Option<Vec<f64>>>> =
        batch.iter().map(|s| vec![None; s.interventions.len()]).collect();

    // Lowest layer whose block internals must be visited.
    let mut lowest = cfg.n_layers;
    for seq in batch {
        for iv in seq.interventions {
            match iv {
                Intervention::AddFfnOutput { layer, .. } => lowest = lowest.min(layer + 1),
                Intervention::SetActivation { layer, .. } => lowest = lowest.min(*layer),
                _ => {}
            }
        }
    }
    if param_grads {
        lowest = 0;
    }

    // Head (tied to wte).
    let mut d_final = Matrix::zeros(rows, d);
    if !dlogits.is_empty() {
        let n = dlogits.len();
        let mut dl = Matrix::zeros(n, v);
        let mut h = Matrix::zeros(n, d);
        for (i, (r, g)) in dlogits.iter().enumerate() {
            dl.row_mut(i).copy_from_slice(g);
            h.row_mut(i).copy_from_slice(acts.final_out.row(*r));
        }
        let mut dh = Matrix::zeros(n, d);
        gemm(n, v, d, 1.0, (dl.data(), v, 1), (w.wte.data(), d, 1), 0.0, (dh.data_mut(), d, 1));
        for (i, (r, _)) in dlogits.iter().enumerate() {
            for (o, g) in d_final.row_mut(*r).iter_mut().zip(dh.row(i)) {
                *o += g;
            }
        }
        if let Some(g) = grads.as_mut() {
            gemm(v, n, d, 1.0, (dl.data(), 1, v), (h.data(), d, 1), 1.0, (g.wte.data_mut(), d, 1));
        }
    }
    let mut dx = layer_norm_back(
        &d_final,
        &acts.lnf_xhat,
        &acts.lnf_rstd,
        &w.lnf_g,
        grads.as_mut().map(|g| (g.lnf_g.as_mut_slice(), g.lnf_b.as_mut_slice())),
    );

    for l in (0..cfg.n_layers).rev() {
        // Sites on the block output.
        for (s, seq) in batch.iter().enumerate() {
            for iv in seq.interventions {
                if let Intervention::SetHidden { layer, position, .. } = iv {
                    if *layer == l {
                        dx.row_mut(acts.row(s, *position)).fill(0.0);
                    }
                }
            }
            for (k, iv) in seq.interventions.iter().enumerate() {
                if let Intervention::AddFfnOutput { layer, position, .. } = iv {
                    if *layer == l {
                        sites[s][k] = Some(dx.row(acts.row(s, *position)).to_vec());
                    }
                }
            }
        }
        if l < lowest {
            break;
        }
        let cache = &acts.layers[l];
        let lw = &w.layers[l];
        let x_in = if l == 0 { None } else { Some(&acts.layers[l - 1].x_out) };
        let lg = grads.as_mut().map(|g| &mut g.layers[l]);
        dx = block_backward(cfg, lw, l, cache, &acts.segments, batch, dx, lg, &mut sites, x_in.is_some());
    }

    if let Some(g) = grads.as_mut() {
        for (s, &(first, len)) in acts.segments.iter().enumerate() {
            let _ = s;
            for p in 0..len {
                let r = first + p;
                let tok = acts.tokens[r] as usize;
                for (o, gv) in g.wte.row_mut(tok).iter_mut().zip(dx.row(r)) {
                    *o += gv;
                }
                for (o, gv) in g.wpe.row_mut(p).iter_mut().zip(dx.row(r)) {
                    *o += gv;
                }
            }
        }
    }

    Gradients {
        params: grads,
        sites,
    }
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    cfg: &ModelConfig,
    lw: &LayerWeights,
    l: usize,
    cache: &LayerCache,
    segments: &[(usize, usize)],
    batch: &[SeqInput<'_>],
    d_out: Matrix,
    mut g: Option<&mut LayerWeights>,
    sites: &mut [Vec<Option<Vec<f64>>>],
    _has_prev: bool,
) -> Matrix {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // FFN.
    let mut d_act = linear_back(
        &d_out,
        &cache.act,
        &lw.proj_w,
        g.as_mut().map(|g| (&mut g.proj_w, g.proj_b.as_mut_slice())),
    );
    for (s, seq) in batch.iter().enumerate() {
        for (k, iv) in seq.interventions.iter().enumerate() {
            if let Intervention::SetActivation { layer, position, .. } = iv {
                if *layer == l {
                    let r = segments[s].0 + position;
                    sites[s][k] = Some(d_act.row(r).to_vec());
                    d_act.row_mut(r).fill(0.0);
                }
            }
        }
    }
    let mut d_pre = d_act;
    for (dp, x) in d_pre.data_mut().iter_mut().zip(cache.fc_pre.data()) {
        *dp *= gelu_grad(*x);
    }
    let d_ln2 = linear_back(
        &d_pre,
        &cache.ln2_out,
        &lw.fc_w,
        g.as_mut().map(|g| (&mut g.fc_w, g.fc_b.as_mut_slice())),
    );
    let d_mid_ffn = layer_norm_back(
        &d_ln2,
        &cache.ln2_xhat,
        &cache.ln2_rstd,
        &lw.ln2_g,
        g.as_mut().map(|g| (g.ln2_g.as_mut_slice(), g.ln2_b.as_mut_slice())),
    );
    let d_mid = d_out.add(&d_mid_ffn).expect("same shape");

    // Attention.
    let d_att_out = linear_back(
        &d_mid,
        &cache.att_out,
        &lw.attn_proj_w,
        g.as_mut().map(|g| (&mut g.attn_proj_w, g.attn_proj_b.as_mut_slice())),
    );
    let qkv = &cache.qkv;
    let mut d_qkv = Matrix::zeros(qkv.rows(), 3 * d);
    let mut idx = 0;
    for &(first, len) in segments {
        for h in 0..heads {
            let probs = &cache.att[idx];
            idx += 1;
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut ds = vec![0.0; len];
            for i in 0..len {
                let dout = &d_att_out.row(first + i)[qo..qo + dh];
                let prow = &probs[i * len..(i + 1) * len];
                let mut dot_pp = 0.0;
                for j in 0..=i {
                    let vj = &qkv.row(first + j)[vo..vo + dh];
                    let dp: f64 = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    dot_pp += dp * prow[j];
                    // dV_j += p_ij · dO_i
                    let dv = &mut d_qkv.row_mut(first + j)[vo..vo + dh];
                    for (o, a) in dv.iter_mut().zip(dout) {
                        *o += prow[j] * a;
                    }
                }
                for j in 0..=i {
                    ds[j] = prow[j] * (ds[j] - dot_pp) * scale;
                }
                for j in 0..=i {
                    if ds[j] == 0.0 {
                        continue;
                    }
                    let kj: Vec<f64> = qkv.row(first + j)[ko..ko + dh].to_vec();
                    let qi: Vec<f64> = qkv.row(first + i)[qo..qo + dh].to_vec();
                    {
                        let dq = &mut d_qkv.row_mut(first + i)[qo..qo + dh];
                        for (o, k) in dq.iter_mut().zip(&kj) {
                            *o += ds[j] * k;
                        }
                    }
                    let dk = &mut d_qkv.row_mut(first + j)[ko..ko + dh];
                    for (o, q) in dk.iter_mut().zip(&qi) {
                        *o += ds[j] * q;
                    }
                }
            }
        }
    }
    let d_ln1 = linear_back(
        &d_qkv,
        &cache.ln1_out,
        &lw.attn_w,
        g.as_mut().map(|g| (&mut g.attn_w, g.attn_b.as_mut_slice())),
    );
    let d_in_att = layer_norm_back(
        &d_ln1,
        &cache.ln1_xhat,
        &cache.ln1_rstd,
        &lw.ln1_g,
        g.as_mut().map(|g| (g.ln1_g.as_mut_slice(), g.ln1_b.as_mut_slice())),
    );
    d_mid.add(&d_in_att).expect("same shape")
}
