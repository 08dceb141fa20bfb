//! Batched forward pass with head taps, and its hand-derived backward pass.
//!
//! Sequences in one group share a length `T`; activations are laid out as
//! `[B*T, width]` row-major so every dense layer is a single GEMM.

use std::collections::BTreeMap;

use super::params::{LayerParams, Parameters};
use super::taps::{HeadLocation, PatchPosition, TapSet};
use crate::error::{Error, Result};
use crate::math::{gemm, gemm_view, log_sum_exp, softmax_in_place, View, LN_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` dominated the step time.
fn tanh(y: f64) -> f64 {
    let e = (-2.0 * y.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(y)
}

/// Returns the inner `tanh` too, which the backward pass reuses.
fn gelu(u: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (u + GELU_A * u * u * u));
    (0.5 * u * (1.0 + t), t)
}

fn gelu_grad(u: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_forward(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn ln_backward(
    dy: &[f64],
    cache: &LnCache,
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `out[rows, n] = x[rows, k] * w[k, n] + b`
fn linear(x: &[f64], rows: usize, k: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        out[r * n..(r + 1) * n].copy_from_slice(b);
    }
    gemm(false, false, rows, n, k, 1.0, x, w, 1.0, &mut out);
    out
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    k: usize,
    n: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(true, false, k, n, rows, 1.0, x, dy, 1.0, dw);
    for r in 0..rows {
        for j in 0..n {
            db[j] += dy[r * n + j];
        }
    }
    let mut dx = vec![0.0; rows * k];
    gemm(false, true, rows, k, n, 1.0, dy, w, 0.0, &mut dx);
    dx
}

/// Causal attention for one sequence and head: writes the probabilities at
/// `probs[p_off..]` (`t×t`, zero above the diagonal) and the head output into `z`.
#[allow(clippy::too_many_arguments)]
fn attend(
    qkv: &[f64],
    probs: &mut [f64],
    p_off: usize,
    z: &mut [f64],
    bi: usize,
    h: usize,
    t: usize,
    d: usize,
    dh: usize,
    scale: f64,
) {
    let row0 = bi * t;
    let q = View::new(row0 * 3 * d + h * dh, 3 * d, 1);
    let k_t = View::new(row0 * 3 * d + d + h * dh, 1, 3 * d);
    let v = View::new(row0 * 3 * d + 2 * d + h * dh, 3 * d, 1);
    let pv = View::new(p_off, t, 1);
    gemm_view(t, t, dh, scale, qkv, q, qkv, k_t, 0.0, probs, pv);
    for i in 0..t {
        let row = &mut probs[p_off + i * t..p_off + (i + 1) * t];
        softmax_in_place(&mut row[..=i]);
        row[i + 1..].fill(0.0);
    }
    gemm_view(
        t,
        dh,
        t,
        1.0,
        probs,
        pv,
        qkv,
        v,
        0.0,
        z,
        View::new(row0 * d + h * dh, d, 1),
    );
}

/// Gradients of [`attend`] with respect to q, k and v, accumulated into `dqkv`.
#[allow(clippy::too_many_arguments)]
fn attend_backward(
    qkv: &[f64],
    probs: &[f64],
    dz: &[f64],
    dqkv: &mut [f64],
    ds: &mut [f64],
    bi: usize,
    h: usize,
    t: usize,
    d: usize,
    dh: usize,
    scale: f64,
) {
    let row0 = bi * t;
    let q_off = row0 * 3 * d + h * dh;
    let k_off = q_off + d;
    let v_off = q_off + 2 * d;
    let dzv = View::new(row0 * d + h * dh, d, 1);
    let sq = View::new(0, t, 1);
    let sq_t = View::new(0, 1, t);
    // dP = dZ V^T
    gemm_view(
        t,
        t,
        dh,
        1.0,
        dz,
        dzv,
        qkv,
        View::new(v_off, 1, 3 * d),
        0.0,
        ds,
        sq,
    );
    // dV += P^T dZ
    gemm_view(
        t,
        dh,
        t,
        1.0,
        probs,
        sq_t,
        dz,
        dzv,
        1.0,
        dqkv,
        View::new(v_off, 3 * d, 1),
    );
    for i in 0..t {
        let p = &probs[i * t..i * t + i + 1];
        let row = &mut ds[i * t..(i + 1) * t];
        let dot: f64 = p.iter().zip(&row[..=i]).map(|(a, b)| a * b).sum();
        for (g, &pj) in row[..=i].iter_mut().zip(p) {
            *g = pj * (*g - dot) * scale;
        }
        row[i + 1..].fill(0.0);
    }
    // dQ += dS K, dK += dS^T Q
    gemm_view(
        t,
        dh,
        t,
        1.0,
        ds,
        sq,
        qkv,
        View::new(k_off, 3 * d, 1),
        1.0,
        dqkv,
        View::new(q_off, 3 * d, 1),
    );
    gemm_view(
        t,
        dh,
        t,
        1.0,
        ds,
        sq_t,
        qkv,
        View::new(q_off, 3 * d, 1),
        1.0,
        dqkv,
        View::new(k_off, 3 * d, 1),
    );
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    z: Vec<f64>,
    ln2: LnCache,
    m: Vec<f64>,
    u: Vec<f64>,
    tanh_u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct GroupOutput {
    /// `[B*T, V]`
    pub logits: Vec<f64>,
    pub captured: Vec<BTreeMap<HeadLocation, Vec<f64>>>,
    caches: Option<(Vec<LayerCache>, LnCache, Vec<f64>)>,
}

fn patched_rows(pos: PatchPosition, t: usize) -> std::ops::Range<usize> {
    match pos {
        PatchPosition::Last => t - 1..t,
        PatchPosition::From(p) => p.min(t)..t,
    }
}

/// Forward over equal-length sequences.
pub(crate) fn run_group(
    params: &Parameters,
    seqs: &[&[u32]],
    taps: &TapSet,
    keep_cache: bool,
) -> Result<GroupOutput> {
    let cfg = &params.config;
    let (d, nh, dh, v, f) = (
        cfg.d_model,
        cfg.n_heads,
        cfg.d_head(),
        cfg.vocab_size,
        cfg.d_mlp(),
    );
    let b = seqs.len();
    let t = seqs[0].len();
    let bt = b * t;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; bt * d];
    for (bi, s) in seqs.iter().enumerate() {
        for (ti, &tok) in s.iter().enumerate() {
            let row = &mut x[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            let e = params.tok_emb.row(tok as usize);
            let p = params.pos_emb.row(ti);
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
        }
    }

    let mut captured = vec![BTreeMap::new(); b];
    let mut caches = Vec::new();

    for (li, lp) in params.layers.iter().enumerate() {
        let (a, ln1) = ln_forward(&x, d, lp.ln1_gain.data(), lp.ln1_bias.data());
        let qkv = linear(&a, bt, d, lp.w_qkv.data(), lp.b_qkv.data(), 3 * d);
        let mut z = vec![0.0; bt * d];
        let mut probs = vec![0.0; if keep_cache { b * nh * t * t } else { t * t }];
        for bi in 0..b {
            for h in 0..nh {
                let p_off = if keep_cache { (bi * nh + h) * t * t } else { 0 };
                attend(&qkv, &mut probs, p_off, &mut z, bi, h, t, d, dh, scale);
            }
        }

        for (loc, patch) in taps
            .patches()
            .range(HeadLocation::new(li, 0)..HeadLocation::new(li + 1, 0))
        {
            for bi in 0..b {
                for i in patched_rows(patch.position, t) {
                    z[(bi * t + i) * d + loc.head * dh..][..dh].copy_from_slice(&patch.vector);
                }
            }
        }
        for loc in taps
            .captures()
            .range(HeadLocation::new(li, 0)..HeadLocation::new(li + 1, 0))
        {
            for (bi, cap) in captured.iter_mut().enumerate() {
                let row = bi * t + t - 1;
                cap.insert(*loc, z[row * d + loc.head * dh..][..dh].to_vec());
            }
        }

        let o = linear(&z, bt, d, lp.w_out.data(), lp.b_out.data(), d);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }
        let (m, ln2) = ln_forward(&x, d, lp.ln2_gain.data(), lp.ln2_bias.data());
        let u = linear(&m, bt, d, lp.w_fc.data(), lp.b_fc.data(), f);
        let (g, tanh_u): (Vec<f64>, Vec<f64>) = u.iter().map(|&e| gelu(e)).unzip();
        let out = linear(&g, bt, f, lp.w_proj.data(), lp.b_proj.data(), d);
        for (xv, ov) in x.iter_mut().zip(&out) {
            *xv += ov;
        }
        if keep_cache {
            caches.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                z,
                ln2,
                m,
                u,
                tanh_u,
                g,
            });
        }
    }

    let (hf, lnf) = ln_forward(&x, d, params.lnf_gain.data(), params.lnf_bias.data());
    let logits = linear(
        &hf,
        bt,
        d,
        params.w_unembed.data(),
        params.b_unembed.data(),
        v,
    );
    if logits.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(GroupOutput {
        logits,
        captured,
        caches: keep_cache.then_some((caches, lnf, hf)),
    })
}

fn layer_backward(
    lp: &LayerParams,
    gl: &mut LayerParams,
    c: &LayerCache,
    dx: Vec<f64>,
    b: usize,
    t: usize,
    nh: usize,
    dh: usize,
) -> Vec<f64> {
    let d = nh * dh;
    let bt = b * t;
    let f = 4 * d;
    let scale = 1.0 / (dh as f64).sqrt();

    // x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    let dg = linear_backward(
        &c.g,
        &dx,
        bt,
        f,
        d,
        lp.w_proj.data(),
        gl.w_proj.data_mut(),
        gl.b_proj.data_mut(),
    );
    let du: Vec<f64> = dg
        .iter()
        .zip(c.u.iter().zip(&c.tanh_u))
        .map(|(g, (&u, &t))| g * gelu_grad(u, t))
        .collect();
    let dm = linear_backward(
        &c.m,
        &du,
        bt,
        d,
        f,
        lp.w_fc.data(),
        gl.w_fc.data_mut(),
        gl.b_fc.data_mut(),
    );
    let dmid_ln = ln_backward(
        &dm,
        &c.ln2,
        d,
        lp.ln2_gain.data(),
        gl.ln2_gain.data_mut(),
        gl.ln2_bias.data_mut(),
    );
    let dmid: Vec<f64> = dx.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();

    // x_mid = x_in + out(attn(ln1(x_in)))
    let dz = linear_backward(
        &c.z,
        &dmid,
        bt,
        d,
        d,
        lp.w_out.data(),
        gl.w_out.data_mut(),
        gl.b_out.data_mut(),
    );
    let mut dqkv = vec![0.0; bt * 3 * d];
    let mut ds = vec![0.0; t * t];
    for bi in 0..b {
        for h in 0..nh {
            let p_off = (bi * nh + h) * t * t;
            attend_backward(
                &c.qkv,
                &c.probs[p_off..p_off + t * t],
                &dz,
                &mut dqkv,
                &mut ds,
                bi,
                h,
                t,
                d,
                dh,
                scale,
            );
        }
    }
    let da = linear_backward(
        &c.a,
        &dqkv,
        bt,
        d,
        3 * d,
        lp.w_qkv.data(),
        gl.w_qkv.data_mut(),
        gl.b_qkv.data_mut(),
    );
    let din_ln = ln_backward(
        &da,
        &c.ln1,
        d,
        lp.ln1_gain.data(),
        gl.ln1_gain.data_mut(),
        gl.ln1_bias.data_mut(),
    );
    dmid.iter().zip(&din_ln).map(|(a, b)| a + b).collect()
}

/// Mean cross-entropy over `targets` (pairs of logits row and token) for one
/// group; accumulates gradients scaled by `1/total_targets`.
pub(crate) fn group_loss_and_grad(
    params: &Parameters,
    grads: &mut Parameters,
    seqs: &[&[u32]],
    targets: &[&[(usize, u32)]],
    total_targets: usize,
) -> Result<f64> {
    let cfg = &params.config;
    let (d, nh, dh, v) = (cfg.d_model, cfg.n_heads, cfg.d_head(), cfg.vocab_size);
    let b = seqs.len();
    let t = seqs[0].len();
    let bt = b * t;
    let out = run_group(params, seqs, &TapSet::new(), true)?;
    let (caches, lnf, hf) = out.caches.expect("cache requested");

    let norm = 1.0 / total_targets as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; bt * v];
    for (bi, tg) in targets.iter().enumerate() {
        for &(pos, tok) in tg.iter() {
            let row = bi * t + pos;
            let lg = &out.logits[row * v..(row + 1) * v];
            let lse = log_sum_exp(lg);
            loss += lse - lg[tok as usize];
            let dl = &mut dlogits[row * v..(row + 1) * v];
            for k in 0..v {
                dl[k] += norm * (lg[k] - lse).exp();
            }
            dl[tok as usize] -= norm;
        }
    }

    let dhf = linear_backward(
        &hf,
        &dlogits,
        bt,
        d,
        v,
        params.w_unembed.data(),
        grads.w_unembed.data_mut(),
        grads.b_unembed.data_mut(),
    );
    let mut dx = ln_backward(
        &dhf,
        &lnf,
        d,
        params.lnf_gain.data(),
        grads.lnf_gain.data_mut(),
        grads.lnf_bias.data_mut(),
    );
    for li in (0..params.layers.len()).rev() {
        dx = layer_backward(
            &params.layers[li],
            &mut grads.layers[li],
            &caches[li],
            dx,
            b,
            t,
            nh,
            dh,
        );
    }
    for (bi, s) in seqs.iter().enumerate() {
        for (ti, &tok) in s.iter().enumerate() {
            let src = &dx[(bi * t + ti) * d..][..d];
            let te = grads.tok_emb.row_mut(tok as usize);
            for j in 0..d {
                te[j] += src[j];
            }
            let pe = grads.pos_emb.row_mut(ti);
            for j in 0..d {
                pe[j] += src[j];
            }
        }
    }
    Ok(loss * norm)
}
