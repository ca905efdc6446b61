//! Forward/backward passes, scoring, and generation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Decode, Model};
use crate::tensor::{matmul, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_row};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug)]
struct LnCache {
    xhat: Vec<f64>, // rows normalized before gain/bias
    rstd: Vec<f64>,
}

/// LayerNorm over the last dimension; returns a = xhat * gain + bias.
fn ln_forward(x: &[f64], gain: &[f64], bias: &[f64], t: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Backward through layernorm; returns dx, accumulates dgain/dbias.
fn ln_backward(
    dout: &[f64],
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    t: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    for i in 0..t {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dy = &dout[i * d..(i + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dy[j] * xh[j];
            dbias[j] += dy[j];
            let dxh = dy[j] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        let m1 = sum_dxhat / d as f64;
        let m2 = sum_dxhat_xhat / d as f64;
        for j in 0..d {
            let dxh = dy[j] * gain[j];
            dx[i * d + j] = cache.rstd[i] * (dxh - m1 - xh[j] * m2);
        }
    }
    dx
}

fn add_bias(x: &mut [f64], bias: &[f64], t: usize, d: usize) {
    for i in 0..t {
        for j in 0..d {
            x[i * d + j] += bias[j];
        }
    }
}

fn colsum_acc(x: &[f64], t: usize, d: usize, out: &mut [f64]) {
    for i in 0..t {
        for j in 0..d {
            out[j] += x[i * d + j];
        }
    }
}

#[derive(Debug)]
struct BlockCache {
    x_in: Vec<f64>,
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // H * T * T causal attention weights
    att_concat: Vec<f64>,
    ln2: LnCache,
    m1: Vec<f64>,
    gelu_out: Vec<f64>,
    x_post: Vec<f64>,
    ad_pre: Option<Vec<f64>>,
    ad_act: Option<Vec<f64>>,
}

#[derive(Debug)]
struct SeqCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y: Vec<f64>,
    probs: Vec<f64>, // T x V softmax rows
}

#[derive(Debug)]
pub(crate) struct BatchCache {
    seqs: Vec<SeqCache>,
    total_preds: usize,
    /// effective q/k/v/o weights per block (Some only where LoRA applies)
    eff: Vec<[Option<Vec<f64>>; 4]>,
}

const PROJ: [&str; 4] = ["q", "k", "v", "o"];

fn effective_weights(model: &Model) -> Result<Vec<[Option<Vec<f64>>; 4]>> {
    let d = model.config.d_model;
    let mut eff: Vec<[Option<Vec<f64>>; 4]> = Vec::with_capacity(model.config.n_layers);
    for i in 0..model.config.n_layers {
        let mut slot: [Option<Vec<f64>>; 4] = [None, None, None, None];
        if let Some(lora) = &model.lora {
            for target in &lora.targets {
                let pi = PROJ.iter().position(|p| p == target).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown lora target `{target}`"))
                })?;
                let w = model.params.get(&format!("block.{i}.attn.w_{target}"))?;
                let down = model.params.get(&format!("block.{i}.attn.lora_{target}.w_down"))?;
                let up = model.params.get(&format!("block.{i}.attn.lora_{target}.w_up"))?;
                let r = lora.rank;
                let mut w_eff = w.data.clone();
                matmul_acc(&down.data, &up.data, d, r, d, &mut w_eff);
                slot[pi] = Some(w_eff);
            }
        }
        eff.push(slot);
    }
    Ok(eff)
}

struct SeqForward {
    cache: SeqCache,
    nll: f64,
    preds: usize,
}

/// One sequence forward. `eff` holds LoRA-composed projection weights.
fn forward_seq(model: &Model, ids: &[u32], eff: &[[Option<Vec<f64>>; 4]]) -> Result<SeqForward> {
    let cfg = &model.config;
    let (d, h, dh, v) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.vocab_size);
    let t = ids.len();
    if t > cfg.context_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {t} exceeds context_len {}",
            cfg.context_len
        )));
    }
    for &id in ids {
        if id as usize >= v {
            return Err(Error::InvalidInput(format!("token id {id} out of vocab range {v}")));
        }
    }
    let tok = &model.params.get("embed.tok.w")?.data;
    let pos = &model.params.get("embed.pos.w")?.data;
    let mut x = vec![0.0; t * d];
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            x[i * d + j] = tok[id as usize * d + j] + pos[i * d + j];
        }
    }

    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for bi in 0..cfg.n_layers {
        let p = format!("block.{bi}");
        let g1 = &model.params.get(&format!("{p}.ln1.gain"))?.data;
        let b1 = &model.params.get(&format!("{p}.ln1.bias"))?.data;
        let (a1, ln1) = ln_forward(&x, g1, b1, t, d);

        let mut qkv: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (pi, proj) in PROJ.iter().enumerate().take(3) {
            let w = match &eff[bi][pi] {
                Some(w_eff) => w_eff,
                None => &model.params.get(&format!("{p}.attn.w_{proj}"))?.data,
            };
            let b = &model.params.get(&format!("{p}.attn.b_{proj}"))?.data;
            let mut out = vec![0.0; t * d];
            matmul(&a1, w, t, d, d, &mut out);
            add_bias(&mut out, b, t, d);
            qkv.push(out);
        }
        let (q, k, vv) = (qkv.remove(0), qkv.remove(0), qkv.remove(0));

        let mut probs = vec![0.0; h * t * t];
        let mut att = vec![0.0; t * d];
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..t {
                let row = &mut probs[head * t * t + i * t..head * t * t + i * t + i + 1];
                for (j, slot) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i * d + c0 + c] * k[j * d + c0 + c];
                    }
                    *slot = s * inv_sqrt_dh;
                }
                softmax_row(row);
                for j in 0..=i {
                    let pij = probs[head * t * t + i * t + j];
                    for c in 0..dh {
                        att[i * d + c0 + c] += pij * vv[j * d + c0 + c];
                    }
                }
            }
        }
        let w_o = match &eff[bi][3] {
            Some(w_eff) => w_eff,
            None => &model.params.get(&format!("{p}.attn.w_o"))?.data,
        };
        let b_o = &model.params.get(&format!("{p}.attn.b_o"))?.data;
        let mut attn_out = vec![0.0; t * d];
        matmul(&att, w_o, t, d, d, &mut attn_out);
        add_bias(&mut attn_out, b_o, t, d);

        let mut x_mid = x.clone();
        for (xm, ao) in x_mid.iter_mut().zip(&attn_out) {
            *xm += ao;
        }

        let g2 = &model.params.get(&format!("{p}.ln2.gain"))?.data;
        let b2 = &model.params.get(&format!("{p}.ln2.bias"))?.data;
        let (a2, ln2) = ln_forward(&x_mid, g2, b2, t, d);
        let ff = 4 * d;
        let w_fc = &model.params.get(&format!("{p}.mlp.w_fc"))?.data;
        let b_fc = &model.params.get(&format!("{p}.mlp.b_fc"))?.data;
        let mut m1 = vec![0.0; t * ff];
        matmul(&a2, w_fc, t, d, ff, &mut m1);
        add_bias(&mut m1, b_fc, t, ff);
        let gelu_out: Vec<f64> = m1.iter().map(|&z| gelu(z)).collect();
        let w_proj = &model.params.get(&format!("{p}.mlp.w_proj"))?.data;
        let b_proj = &model.params.get(&format!("{p}.mlp.b_proj"))?.data;
        let mut m2 = vec![0.0; t * d];
        matmul(&gelu_out, w_proj, t, ff, d, &mut m2);
        add_bias(&mut m2, b_proj, t, d);

        let mut x_post = x_mid.clone();
        for (xp, mm) in x_post.iter_mut().zip(&m2) {
            *xp += mm;
        }

        let (x_next, ad_pre, ad_act) = if let Some(spec) = &model.adapter {
            let w = spec.width;
            let w_down = &model.params.get(&format!("{p}.adapter.w_down"))?.data;
            let w_up = &model.params.get(&format!("{p}.adapter.w_up"))?.data;
            let mut pre = vec![0.0; t * w];
            matmul(&x_post, w_down, t, d, w, &mut pre);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let mut up = vec![0.0; t * d];
            matmul(&act, w_up, t, w, d, &mut up);
            let mut xn = x_post.clone();
            for (a, b) in xn.iter_mut().zip(&up) {
                *a += b;
            }
            (xn, Some(pre), Some(act))
        } else {
            (x_post.clone(), None, None)
        };

        blocks.push(BlockCache {
            x_in: std::mem::replace(&mut x, x_next),
            ln1,
            q,
            k,
            v: vv,
            probs,
            att_concat: att,
            ln2,
            m1,
            gelu_out,
            x_post,
            ad_pre,
            ad_act,
        });
    }

    let gf = &model.params.get("ln_f.gain")?.data;
    let bf = &model.params.get("ln_f.bias")?.data;
    let (y, lnf) = ln_forward(&x, gf, bf, t, d);
    let head_w = &model.params.get("head.w")?.data;
    let head_b = &model.params.get("head.b")?.data;
    let mut logits = vec![0.0; t * v];
    matmul(&y, head_w, t, d, v, &mut logits);
    add_bias(&mut logits, head_b, t, v);
    for i in 0..t {
        softmax_row(&mut logits[i * v..(i + 1) * v]);
    }

    let mut nll = 0.0;
    for i in 0..t.saturating_sub(1) {
        let target = ids[i + 1] as usize;
        nll -= logits[i * v + target].max(1e-300).ln();
    }
    Ok(SeqForward {
        nll,
        preds: t.saturating_sub(1),
        cache: SeqCache { ids: ids.to_vec(), blocks, lnf, y, probs: logits },
    })
}

pub(crate) fn forward_loss(model: &mut Model, batch: &[TokenSequence]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let eff = effective_weights(model)?;
    let mut seqs = Vec::with_capacity(batch.len());
    let mut nll = 0.0;
    let mut total = 0usize;
    for s in batch {
        let f = forward_seq(model, &s.ids, &eff)?;
        nll += f.nll;
        total += f.preds;
        seqs.push(f.cache);
    }
    if total == 0 {
        return Err(Error::InvalidInput("batch has no predictable tokens".into()));
    }
    model.cache = Some(BatchCache { seqs, total_preds: total, eff });
    Ok(nll / total as f64)
}

pub(crate) fn backward(model: &mut Model) -> Result<()> {
    let cache = model.cache.take().ok_or(Error::NoForwardCache)?;
    let cfg = model.config;
    let (d, h, dh, v) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.vocab_size);
    let inv_n = 1.0 / cache.total_preds as f64;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let ff = 4 * d;

    // scratch gradient store; only trainable entries are committed at the end
    use std::collections::BTreeMap;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    fn acc<'a>(
        grads: &'a mut BTreeMap<String, Vec<f64>>,
        name: String,
        n: usize,
    ) -> &'a mut Vec<f64> {
        grads.entry(name).or_insert_with(|| vec![0.0; n])
    }
    // gradients of LoRA-composed effective weights, routed after the loop
    let mut deff: Vec<[Option<Vec<f64>>; 4]> =
        (0..cfg.n_layers).map(|_| [None, None, None, None]).collect();

    for seq in &cache.seqs {
        let t = seq.ids.len();
        // cross-entropy backward
        let mut dlogits = vec![0.0; t * v];
        for i in 0..t.saturating_sub(1) {
            let target = seq.ids[i + 1] as usize;
            for j in 0..v {
                dlogits[i * v + j] = seq.probs[i * v + j] * inv_n;
            }
            dlogits[i * v + target] -= inv_n;
        }
        let head_w = model.params.get("head.w")?.data.clone();
        matmul_at_acc(&seq.y, &dlogits, t, d, v, acc(&mut grads, "head.w".into(), d * v));
        colsum_acc(&dlogits, t, v, acc(&mut grads, "head.b".into(), v));
        let mut dy = vec![0.0; t * d];
        matmul_bt_acc(&dlogits, &head_w, t, v, d, &mut dy);

        let gf = model.params.get("ln_f.gain")?.data.clone();
        let mut dgf_local = vec![0.0; d];
        let mut dbf_local = vec![0.0; d];
        let mut dx = ln_backward(&dy, &seq.lnf, &gf, &mut dgf_local, &mut dbf_local, t, d);
        for (a, b) in acc(&mut grads, "ln_f.gain".into(), d).iter_mut().zip(&dgf_local) {
            *a += b;
        }
        for (a, b) in acc(&mut grads, "ln_f.bias".into(), d).iter_mut().zip(&dbf_local) {
            *a += b;
        }

        for bi in (0..cfg.n_layers).rev() {
            let p = format!("block.{bi}");
            let blk = &seq.blocks[bi];

            // adapter
            if let Some(spec) = &model.adapter {
                let w = spec.width;
                let ad_pre = blk.ad_pre.as_ref().unwrap();
                let ad_act = blk.ad_act.as_ref().unwrap();
                let w_up = model.params.get(&format!("{p}.adapter.w_up"))?.data.clone();
                let w_down = model.params.get(&format!("{p}.adapter.w_down"))?.data.clone();
                // du = dx (residual branch)
                matmul_at_acc(ad_act, &dx, t, w, d, acc(&mut grads, format!("{p}.adapter.w_up"), w * d));
                let mut dact = vec![0.0; t * w];
                matmul_bt_acc(&dx, &w_up, t, d, w, &mut dact);
                for (da, &z) in dact.iter_mut().zip(ad_pre) {
                    *da *= gelu_grad(z);
                }
                matmul_at_acc(&blk.x_post, &dact, t, d, w, acc(&mut grads, format!("{p}.adapter.w_down"), d * w));
                let mut dx_extra = vec![0.0; t * d];
                matmul_bt_acc(&dact, &w_down, t, w, d, &mut dx_extra);
                for (a, b) in dx.iter_mut().zip(&dx_extra) {
                    *a += b;
                }
            }

            // mlp: dx is grad at x_post = x_mid + m2
            let w_proj = model.params.get(&format!("{p}.mlp.w_proj"))?.data.clone();
            let w_fc = model.params.get(&format!("{p}.mlp.w_fc"))?.data.clone();
            matmul_at_acc(&blk.gelu_out, &dx, t, ff, d, acc(&mut grads, format!("{p}.mlp.w_proj"), ff * d));
            colsum_acc(&dx, t, d, acc(&mut grads, format!("{p}.mlp.b_proj"), d));
            let mut dg = vec![0.0; t * ff];
            matmul_bt_acc(&dx, &w_proj, t, d, ff, &mut dg);
            for (dgi, &z) in dg.iter_mut().zip(&blk.m1) {
                *dgi *= gelu_grad(z);
            }
            // a2 recomputed from cached xhat
            let g2 = model.params.get(&format!("{p}.ln2.gain"))?.data.clone();
            let b2 = model.params.get(&format!("{p}.ln2.bias"))?.data.clone();
            let mut a2 = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..d {
                    a2[i * d + j] = blk.ln2.xhat[i * d + j] * g2[j] + b2[j];
                }
            }
            matmul_at_acc(&a2, &dg, t, d, ff, acc(&mut grads, format!("{p}.mlp.w_fc"), d * ff));
            colsum_acc(&dg, t, ff, acc(&mut grads, format!("{p}.mlp.b_fc"), ff));
            let mut da2 = vec![0.0; t * d];
            matmul_bt_acc(&dg, &w_fc, t, ff, d, &mut da2);
            let mut dg2 = vec![0.0; d];
            let mut db2 = vec![0.0; d];
            let dx_ln2 = ln_backward(&da2, &blk.ln2, &g2, &mut dg2, &mut db2, t, d);
            for (a, b) in acc(&mut grads, format!("{p}.ln2.gain"), d).iter_mut().zip(&dg2) {
                *a += b;
            }
            for (a, b) in acc(&mut grads, format!("{p}.ln2.bias"), d).iter_mut().zip(&db2) {
                *a += b;
            }
            let mut dx_mid = dx; // residual path
            for (a, b) in dx_mid.iter_mut().zip(&dx_ln2) {
                *a += b;
            }

            // attention output projection
            let w_o = match &cache.eff[bi][3] {
                Some(w_eff) => w_eff.clone(),
                None => model.params.get(&format!("{p}.attn.w_o"))?.data.clone(),
            };
            let mut dwo = vec![0.0; d * d];
            matmul_at_acc(&blk.att_concat, &dx_mid, t, d, d, &mut dwo);
            if cache.eff[bi][3].is_some() {
                let slot = deff[bi][3].get_or_insert_with(|| vec![0.0; d * d]);
                for (a, b) in slot.iter_mut().zip(&dwo) {
                    *a += b;
                }
            } else {
                for (a, b) in acc(&mut grads, format!("{p}.attn.w_o"), d * d).iter_mut().zip(&dwo) {
                    *a += b;
                }
            }
            colsum_acc(&dx_mid, t, d, acc(&mut grads, format!("{p}.attn.b_o"), d));
            let mut datt = vec![0.0; t * d];
            matmul_bt_acc(&dx_mid, &w_o, t, d, d, &mut datt);

            // per-head attention backward
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..t {
                    let prow = &blk.probs[head * t * t + i * t..head * t * t + i * t + i + 1];
                    let mut dp = vec![0.0; i + 1];
                    for j in 0..=i {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += datt[i * d + c0 + c] * blk.v[j * d + c0 + c];
                            dv[j * d + c0 + c] += prow[j] * datt[i * d + c0 + c];
                        }
                        dp[j] = s;
                    }
                    let dot: f64 = prow.iter().zip(&dp).map(|(&p, &g)| p * g).sum();
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot) * inv_sqrt_dh;
                        for c in 0..dh {
                            dq[i * d + c0 + c] += ds * blk.k[j * d + c0 + c];
                            dk[j * d + c0 + c] += ds * blk.q[i * d + c0 + c];
                        }
                    }
                }
            }

            // back into a1 and projection weights
            let g1 = model.params.get(&format!("{p}.ln1.gain"))?.data.clone();
            let b1 = model.params.get(&format!("{p}.ln1.bias"))?.data.clone();
            let mut a1 = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..d {
                    a1[i * d + j] = blk.ln1.xhat[i * d + j] * g1[j] + b1[j];
                }
            }
            let mut da1 = vec![0.0; t * d];
            for (pi, (proj, dmat)) in PROJ.iter().zip([&dq, &dk, &dv]).enumerate() {
                let mut dw = vec![0.0; d * d];
                matmul_at_acc(&a1, dmat, t, d, d, &mut dw);
                if cache.eff[bi][pi].is_some() {
                    let slot = deff[bi][pi].get_or_insert_with(|| vec![0.0; d * d]);
                    for (a, b) in slot.iter_mut().zip(&dw) {
                        *a += b;
                    }
                } else {
                    for (a, b) in
                        acc(&mut grads, format!("{p}.attn.w_{proj}"), d * d).iter_mut().zip(&dw)
                    {
                        *a += b;
                    }
                }
                colsum_acc(dmat, t, d, acc(&mut grads, format!("{p}.attn.b_{proj}"), d));
                let w = match &cache.eff[bi][pi] {
                    Some(w_eff) => w_eff.clone(),
                    None => model.params.get(&format!("{p}.attn.w_{proj}"))?.data.clone(),
                };
                matmul_bt_acc(dmat, &w, t, d, d, &mut da1);
            }
            let mut dg1 = vec![0.0; d];
            let mut db1 = vec![0.0; d];
            let dx_ln1 = ln_backward(&da1, &blk.ln1, &g1, &mut dg1, &mut db1, t, d);
            for (a, b) in acc(&mut grads, format!("{p}.ln1.gain"), d).iter_mut().zip(&dg1) {
                *a += b;
            }
            for (a, b) in acc(&mut grads, format!("{p}.ln1.bias"), d).iter_mut().zip(&db1) {
                *a += b;
            }
            dx = dx_mid;
            for (a, b) in dx.iter_mut().zip(&dx_ln1) {
                *a += b;
            }
            let _ = &blk.x_in;
        }

        // embeddings
        let dtok = acc(&mut grads, "embed.tok.w".into(), v * d);
        for (i, &id) in seq.ids.iter().enumerate() {
            for j in 0..d {
                dtok[id as usize * d + j] += dx[i * d + j];
            }
        }
        let dpos = acc(&mut grads, "embed.pos.w".into(), cfg.context_len * d);
        for i in 0..t {
            for j in 0..d {
                dpos[i * d + j] += dx[i * d + j];
            }
        }
    }

    // route effective-weight gradients into base and LoRA factors
    if let Some(lora) = model.lora.clone() {
        let r = lora.rank;
        for bi in 0..cfg.n_layers {
            for (pi, proj) in PROJ.iter().enumerate() {
                if let Some(dweff) = &deff[bi][pi] {
                    let p = format!("block.{bi}");
                    let down = model.params.get(&format!("{p}.attn.lora_{proj}.w_down"))?.data.clone();
                    let up = model.params.get(&format!("{p}.attn.lora_{proj}.w_up"))?.data.clone();
                    // dW = dW_eff
                    for (a, b) in acc(&mut grads, format!("{p}.attn.w_{proj}"), d * d).iter_mut().zip(dweff) {
                        *a += b;
                    }
                    // d_down = dW_eff @ up^T ; d_up = down^T @ dW_eff
                    matmul_bt_acc(dweff, &up, d, d, r, acc(&mut grads, format!("{p}.attn.lora_{proj}.w_down"), d * r));
                    matmul_at_acc(&down, dweff, d, r, d, acc(&mut grads, format!("{p}.attn.lora_{proj}.w_up"), r * d));
                }
            }
        }
    }

    // commit to trainable parameters only; frozen ones keep no grad
    for (name, g) in grads {
        if model.params.is_trainable(&name) {
            let t = model.params.get_mut(&name)?;
            let buf = t.grad_mut();
            for (a, b) in buf.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    Ok(())
}

/// Read-only NLL of a sequence: (sum NLL, number of predicted tokens).
pub(crate) fn seq_nll(model: &Model, ids: &[u32]) -> Result<(f64, usize)> {
    let eff = effective_weights(model)?;
    let f = forward_seq(model, ids, &eff)?;
    Ok((f.nll, f.preds))
}

/// Pre-softmax scores for the next token at the last position.
pub(crate) fn next_token_logits(model: &Model, ids: &[u32]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::InvalidInput(
            "empty prefix requires a begin-of-text token, which is not configured".into(),
        ));
    }
    let eff = effective_weights(model)?;
    let window = if ids.len() > model.config.context_len {
        &ids[ids.len() - model.config.context_len..]
    } else {
        ids
    };
    let f = forward_seq(model, window, &eff)?;
    let (d, v, t) = (model.config.d_model, model.config.vocab_size, window.len());
    let y_last = &f.cache.y[(t - 1) * d..t * d];
    let head_w = &model.params.get("head.w")?.data;
    let head_b = &model.params.get("head.b")?.data;
    let mut logits = vec![0.0; v];
    matmul(y_last, head_w, 1, d, v, &mut logits);
    for (l, b) in logits.iter_mut().zip(head_b) {
        *l += b;
    }
    Ok(logits)
}

pub(crate) fn next_token_probs(model: &Model, ids: &[u32]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::InvalidInput(
            "empty prefix requires a begin-of-text token, which is not configured".into(),
        ));
    }
    let eff = effective_weights(model)?;
    let window = if ids.len() > model.config.context_len {
        &ids[ids.len() - model.config.context_len..]
    } else {
        ids
    };
    let f = forward_seq(model, window, &eff)?;
    let v = model.config.vocab_size;
    let t = window.len();
    Ok(f.cache.probs[(t - 1) * v..t * v].to_vec())
}

pub(crate) fn generate(
    model: &Model,
    prefix: &[u32],
    max_len: usize,
    decode: &Decode,
    seed: u64,
    eos: Option<u32>,
) -> Result<TokenSequence> {
    if prefix.is_empty() {
        return Err(Error::InvalidInput(
            "empty prefix requires a begin-of-text token, which is not configured".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut ids = prefix.to_vec();
    while ids.len() < max_len {
        let probs = next_token_probs(model, &ids)?;
        let next = match decode {
            Decode::Greedy => {
                let mut best = 0usize;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best as u32
            }
            Decode::Sample { temperature, top_k } => {
                sample_token(&probs, *temperature, *top_k, &mut rng)
            }
        };
        ids.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(TokenSequence { ids, source_id: seed })
}

fn sample_token<R: Rng>(probs: &[f64], temperature: f64, top_k: Option<usize>, rng: &mut R) -> u32 {
    // re-temper the softmax output: p^(1/T) renormalized
    let mut weighted: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, p.max(1e-300).powf(1.0 / temperature.max(1e-9))))
        .collect();
    if let Some(k) = top_k {
        weighted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        weighted.truncate(k.max(1));
    }
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut dart = rng.gen::<f64>() * total;
    for (i, w) in &weighted {
        dart -= w;
        if dart <= 0.0 {
            return *i as u32;
        }
    }
    weighted.last().map(|(i, _)| *i as u32).unwrap_or(0)
}

/// Single-query multi-head attention as a standalone kernel: per-head
/// projections of a query vector against an l x d context, concatenated and
/// mixed through a shared output matrix.
pub fn mha_forward(
    context: &[f64], // l x d
    query: &[f64],   // d
    w_q: &[Vec<f64>], // per head, d x dh
    w_k: &[Vec<f64>],
    w_v: &[Vec<f64>],
    w_o: &[f64], // d x d
) -> Result<Vec<f64>> {
    let d = query.len();
    if d == 0 || context.len() % d != 0 {
        return Err(Error::ShapeMismatch("context rows must have query dimension".into()));
    }
    let l = context.len() / d;
    let h = w_q.len();
    if h == 0 || w_k.len() != h || w_v.len() != h || w_o.len() != d * d {
        return Err(Error::ShapeMismatch("inconsistent head weight counts".into()));
    }
    let dh = w_q[0].len() / d;
    if dh * h != d || w_q.iter().chain(w_k).chain(w_v).any(|w| w.len() != d * dh) {
        return Err(Error::ShapeMismatch("head dims must tile d_model".into()));
    }
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; d];
    for head in 0..h {
        let mut qh = vec![0.0; dh];
        matmul(query, &w_q[head], 1, d, dh, &mut qh);
        let mut kh = vec![0.0; l * dh];
        matmul(context, &w_k[head], l, d, dh, &mut kh);
        let mut vh = vec![0.0; l * dh];
        matmul(context, &w_v[head], l, d, dh, &mut vh);
        let mut scores = vec![0.0; l];
        for j in 0..l {
            let mut s = 0.0;
            for c in 0..dh {
                s += qh[c] * kh[j * dh + c];
            }
            scores[j] = s * inv_sqrt_dh;
        }
        softmax_row(&mut scores);
        for j in 0..l {
            for c in 0..dh {
                concat[head * dh + c] += scores[j] * vh[j * dh + c];
            }
        }
    }
    let mut out = vec![0.0; d];
    matmul(&concat, w_o, 1, d, d, &mut out);
    Ok(out)
}
