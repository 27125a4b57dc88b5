//! Forward pass, hand-written reverse-mode gradients, greedy decoding, and
//! perplexity for the pre-norm rotary decoder.
//!
//! Angle tables are always computed in f64; activations use the generic
//! scalar. Every loop that runs in parallel writes disjoint rows, so results
//! do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::math::*;
use super::{ModelCheckpoint, ModelConfig, ModelError, Params};
use crate::corpus::Token;
use crate::rope::{rescaled_angles, RescaleFactors, RotaryConfig};

/// Row-major [len x vocab] logits.
#[derive(Debug, Clone)]
pub struct Logits {
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Deterministic parameter initialization: same (config, seed) pairs yield
/// byte-identical tensors.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelCheckpoint, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, 0.02).expect("valid stddev");
    // Residual-branch outputs are scaled down so depth does not inflate the
    // stream variance at initialization.
    let resid = Normal::new(0.0f64, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid");

    let mut params: Params<f32> = Params::zeros(cfg);
    let fill = |data: &mut [f32], dist: &Normal<f64>, rng: &mut ChaCha12Rng| {
        for v in data.iter_mut() {
            *v = dist.sample(rng) as f32;
        }
    };
    fill(&mut params.wte.data, &base, &mut rng);
    for layer in params.layers.iter_mut() {
        layer.attn_norm.fill(1.0);
        fill(&mut layer.wq.data, &base, &mut rng);
        fill(&mut layer.wk.data, &base, &mut rng);
        fill(&mut layer.wv.data, &base, &mut rng);
        fill(&mut layer.wo.data, &resid, &mut rng);
        layer.mlp_norm.fill(1.0);
        fill(&mut layer.w_up.data, &base, &mut rng);
        fill(&mut layer.w_down.data, &resid, &mut rng);
    }
    params.final_norm.fill(1.0);
    if let Some(head) = params.lm_head.as_mut() {
        fill(&mut head.data, &base, &mut rng);
    }

    Ok(ModelCheckpoint {
        config: cfg.clone(),
        params,
        train_steps: 0,
        rescale_used: None,
        rng_seed: seed,
    })
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[Token]) -> Result<(), ModelError> {
    for (index, &token) in tokens.iter().enumerate() {
        if (token as usize) >= cfg.vocab_size {
            return Err(ModelError::Vocab {
                index,
                token,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

fn validate_factors_shape(
    cfg: &ModelConfig,
    rf: Option<&RescaleFactors>,
) -> Result<(), ModelError> {
    if let Some(rf) = rf {
        let expected = cfg.rotary.num_pairs();
        if rf.factors().len() != expected {
            return Err(ModelError::FactorShape {
                expected,
                got: rf.factors().len(),
            });
        }
    }
    Ok(())
}

fn context_cap(cfg: &ModelConfig, rf: Option<&RescaleFactors>) -> usize {
    rf.map(|r| r.target_len()).unwrap_or(cfg.trained_len)
}

/// Interleaved (cos, sin) per position and rotary pair, f64 precision.
fn rope_tables(rotary: &RotaryConfig, rf: Option<&RescaleFactors>, len: usize) -> Vec<(f64, f64)> {
    let pairs = rotary.num_pairs();
    let mut out = Vec::with_capacity(len * pairs);
    for t in 0..len {
        let angles = match rf {
            Some(rf) => rescaled_angles(rotary, rf, t as f64),
            None => crate::rope::rope_angles(rotary, t as f64),
        };
        for &a in &angles {
            let (s, c) = a.sin_cos();
            out.push((c, s));
        }
    }
    out
}

/// Rotate q or k rows in place; pairs are interleaved within each head.
fn rotate_rows<T: Real>(
    x: &mut [T],
    tables: &[(f64, f64)],
    t_len: usize,
    n_heads: usize,
    head_dim: usize,
) {
    let d = n_heads * head_dim;
    let pairs = head_dim / 2;
    for t in 0..t_len {
        let trow = &tables[t * pairs..(t + 1) * pairs];
        for h in 0..n_heads {
            let off = t * d + h * head_dim;
            for i in 0..pairs {
                let (c, s) = trow[i];
                let a = x[off + 2 * i].to_f64();
                let b = x[off + 2 * i + 1].to_f64();
                x[off + 2 * i] = T::from_f64(a * c - b * s);
                x[off + 2 * i + 1] = T::from_f64(a * s + b * c);
            }
        }
    }
}

/// Rotate gradients back through the rope application (inverse rotation).
fn rotate_rows_backward<T: Real>(
    x: &mut [T],
    tables: &[(f64, f64)],
    t_len: usize,
    n_heads: usize,
    head_dim: usize,
) {
    let d = n_heads * head_dim;
    let pairs = head_dim / 2;
    for t in 0..t_len {
        let trow = &tables[t * pairs..(t + 1) * pairs];
        for h in 0..n_heads {
            let off = t * d + h * head_dim;
            for i in 0..pairs {
                let (c, s) = trow[i];
                let a = x[off + 2 * i].to_f64();
                let b = x[off + 2 * i + 1].to_f64();
                x[off + 2 * i] = T::from_f64(a * c + b * s);
                x[off + 2 * i + 1] = T::from_f64(-a * s + b * c);
            }
        }
    }
}

pub(crate) struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    xn1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    mix: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    xn2: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

pub(crate) struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    x_last: Vec<T>,
    invf: Vec<T>,
    xf: Vec<T>,
}

fn rmsnorm_rows<T: Real>(x: &[T], gain: &[T], t_len: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); t_len * d];
    let mut invs = vec![T::zero(); t_len];
    for t in 0..t_len {
        let (row, inv) = rmsnorm_forward(&x[t * d..(t + 1) * d], gain);
        out[t * d..(t + 1) * d].copy_from_slice(&row);
        invs[t] = inv;
    }
    (out, invs)
}

/// Gather one head's rows into a contiguous [t_len x head_dim] buffer.
fn to_head_major<T: Real>(x: &[T], h: usize, t_len: usize, n_heads: usize, head_dim: usize) -> Vec<T> {
    let d = n_heads * head_dim;
    let mut out = vec![T::zero(); t_len * head_dim];
    for t in 0..t_len {
        out[t * head_dim..(t + 1) * head_dim]
            .copy_from_slice(&x[t * d + h * head_dim..t * d + (h + 1) * head_dim]);
    }
    out
}

/// One attention row: scores against keys 0..=t, softmax, value mix.
/// Identical operation order everywhere this arithmetic appears (full pass,
/// cached pass, incremental decode), so the paths agree bitwise.
#[inline]
fn attention_row<T: Real>(
    q_row: &[T],
    k_head: &[T],
    v_head: &[T],
    t: usize,
    head_dim: usize,
    scale: T,
    scores: &mut Vec<T>,
    out: &mut [T],
) {
    scores.clear();
    for k_row in k_head.chunks_exact(head_dim).take(t + 1) {
        scores.push(dot(q_row, k_row) * scale);
    }
    softmax_in_place(scores);
    for (u, v_row) in v_head.chunks_exact(head_dim).take(t + 1).enumerate() {
        axpy(out, scores[u], v_row);
    }
}

/// Causal multi-head attention over interleaved [t x d] q/k/v. Heads are
/// processed one at a time against contiguous per-head key/value buffers;
/// rows run in parallel (each writes only its own output row) unless the
/// probability matrix is being recorded for the backward pass.
fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    t_len: usize,
    n_heads: usize,
    head_dim: usize,
    mut probs_out: Option<&mut Vec<T>>,
) -> Vec<T> {
    let d = n_heads * head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut mix = vec![T::zero(); t_len * d];

    if let Some(probs) = probs_out.as_mut() {
        probs.clear();
        probs.resize(n_heads * t_len * t_len, T::zero());
    }

    for h in 0..n_heads {
        let k_head = to_head_major(k, h, t_len, n_heads, head_dim);
        let v_head = to_head_major(v, h, t_len, n_heads, head_dim);
        let mut mix_head = vec![T::zero(); t_len * head_dim];
        match probs_out.as_mut() {
            Some(probs) => {
                let mut scores: Vec<T> = Vec::with_capacity(t_len);
                for (t, out) in mix_head.chunks_exact_mut(head_dim).enumerate() {
                    let q_row = &q[t * d + h * head_dim..t * d + (h + 1) * head_dim];
                    attention_row(q_row, &k_head, &v_head, t, head_dim, scale, &mut scores, out);
                    let dst = h * t_len * t_len + t * t_len;
                    probs[dst..dst + t + 1].copy_from_slice(&scores);
                }
            }
            None => {
                mix_head
                    .par_chunks_exact_mut(head_dim)
                    .enumerate()
                    .for_each_init(
                        || Vec::with_capacity(t_len),
                        |scores, (t, out)| {
                            let q_row = &q[t * d + h * head_dim..t * d + (h + 1) * head_dim];
                            attention_row(
                                q_row, &k_head, &v_head, t, head_dim, scale, scores, out,
                            );
                        },
                    );
            }
        }
        for t in 0..t_len {
            mix[t * d + h * head_dim..t * d + (h + 1) * head_dim]
                .copy_from_slice(&mix_head[t * head_dim..(t + 1) * head_dim]);
        }
    }
    mix
}

/// Generic forward pass. Returns logits and, when requested, the caches the
/// backward pass needs.
pub(crate) fn forward_t<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
    want_cache: bool,
) -> Result<(Vec<T>, Option<ForwardCache<T>>), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::TooShort { len: 0, min: 1 });
    }
    validate_tokens(cfg, tokens)?;
    validate_factors_shape(cfg, rf)?;
    let cap = context_cap(cfg, rf);
    if tokens.len() > cap {
        return Err(ModelError::Length {
            len: tokens.len(),
            max: cap,
        });
    }

    let t_len = tokens.len();
    let d = cfg.d_model;
    let tables = rope_tables(&cfg.rotary, rf, t_len);

    let mut x = vec![T::zero(); t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        x[t * d..(t + 1) * d].copy_from_slice(params.wte.row(tok as usize));
    }

    let mut caches: Vec<LayerCache<T>> = Vec::new();
    for layer in &params.layers {
        let x_in = x;
        let (xn1, inv1) = rmsnorm_rows(&x_in, &layer.attn_norm, t_len, d);
        let mut q = linear_forward(&xn1, &layer.wq, t_len);
        let mut k = linear_forward(&xn1, &layer.wk, t_len);
        let v = linear_forward(&xn1, &layer.wv, t_len);
        rotate_rows(&mut q, &tables, t_len, cfg.n_heads, cfg.head_dim);
        rotate_rows(&mut k, &tables, t_len, cfg.n_heads, cfg.head_dim);

        let mut probs: Vec<T> = Vec::new();
        let mix = attention(
            &q,
            &k,
            &v,
            t_len,
            cfg.n_heads,
            cfg.head_dim,
            want_cache.then_some(&mut probs),
        );
        let attn_out = linear_forward(&mix, &layer.wo, t_len);
        let mut x_mid = x_in.clone();
        for (m, a) in x_mid.iter_mut().zip(attn_out.iter()) {
            *m = *m + *a;
        }

        let (xn2, inv2) = rmsnorm_rows(&x_mid, &layer.mlp_norm, t_len, d);
        let up = linear_forward(&xn2, &layer.w_up, t_len);
        let act: Vec<T> = up.iter().map(|&u| silu(u)).collect();
        let down = linear_forward(&act, &layer.w_down, t_len);
        let mut x_out = x_mid.clone();
        for (o, dn) in x_out.iter_mut().zip(down.iter()) {
            *o = *o + *dn;
        }

        if want_cache {
            caches.push(LayerCache {
                x_in,
                inv1,
                xn1,
                q,
                k,
                v,
                probs,
                mix,
                x_mid,
                inv2,
                xn2,
                up,
                act,
            });
        }
        x = x_out;
    }

    let x_last = x;
    let (xf, invf) = rmsnorm_rows(&x_last, &params.final_norm, t_len, d);
    let head = params.lm_head.as_ref().unwrap_or(&params.wte);
    let logits = linear_forward(&xf, head, t_len);

    let cache = want_cache.then_some(ForwardCache {
        layers: caches,
        x_last,
        invf,
        xf,
    });
    Ok((logits, cache))
}

/// Causal forward pass: logits at position t depend only on tokens[0..=t].
pub fn forward(
    ckpt: &ModelCheckpoint,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
) -> Result<Logits, ModelError> {
    let (data, _) = forward_t(&ckpt.config, &ckpt.params, tokens, rf, false)?;
    Ok(Logits {
        len: tokens.len(),
        vocab: ckpt.config.vocab_size,
        data,
    })
}

/// Mean next-token negative log-likelihood over all T-1 scored positions,
/// accumulated in f64.
pub(crate) fn nll_from_logits<T: Real>(logits: &[T], tokens: &[Token], vocab: usize) -> f64 {
    let t_len = tokens.len();
    let mut total = 0.0f64;
    for t in 0..t_len - 1 {
        let row = &logits[t * vocab..(t + 1) * vocab];
        total -= log_prob_f64(row, tokens[t + 1] as usize);
    }
    total / (t_len - 1) as f64
}

/// Loss without gradients, at whatever precision `T` is. This is the
/// evaluation path finite-difference checks perturb.
pub fn compute_loss<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
) -> Result<f64, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::TooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let (logits, _) = forward_t(cfg, params, tokens, rf, false)?;
    Ok(nll_from_logits(&logits, tokens, cfg.vocab_size))
}

/// Total NLL over the targets at local indices [first_target, len): each
/// window position t >= first_target is predicted from logits row t-1.
/// Used by sliding-window evaluation, which scores only a tail of each
/// window.
pub fn compute_loss_window<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
    first_target: usize,
) -> Result<f64, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::TooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    assert!(
        first_target >= 1 && first_target < tokens.len(),
        "first_target {first_target} outside [1, {})",
        tokens.len()
    );
    let (logits, _) = forward_t(cfg, params, tokens, rf, false)?;
    let vocab = cfg.vocab_size;
    let mut total = 0.0f64;
    for t in first_target..tokens.len() {
        let row = &logits[(t - 1) * vocab..t * vocab];
        total -= log_prob_f64(row, tokens[t] as usize);
    }
    Ok(total)
}

/// Reverse-mode gradients of the mean next-token cross-entropy with respect
/// to every parameter tensor.
pub fn compute_loss_and_grads<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
) -> Result<(f64, Params<T>), ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::TooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let (logits, cache) = forward_t(cfg, params, tokens, rf, true)?;
    let cache = cache.expect("cache requested");
    let t_len = tokens.len();
    let d = cfg.d_model;
    let vocab = cfg.vocab_size;
    let n_scored = (t_len - 1) as f64;
    let loss = nll_from_logits(&logits, tokens, vocab);

    let mut grads: Params<T> = Params::zeros(cfg);
    let tables = rope_tables(&cfg.rotary, rf, t_len);

    // d_logits rows: (softmax - onehot) / n_scored; final row unscored.
    let mut d_logits = vec![T::zero(); t_len * vocab];
    for t in 0..t_len - 1 {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v.to_f64());
        }
        let mut sum = 0.0f64;
        let mut exps = Vec::with_capacity(vocab);
        for &v in row {
            let e = (v.to_f64() - max).exp();
            exps.push(e);
            sum += e;
        }
        let target = tokens[t + 1] as usize;
        let drow = &mut d_logits[t * vocab..(t + 1) * vocab];
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum;
            let grad = (p - if c == target { 1.0 } else { 0.0 }) / n_scored;
            drow[c] = T::from_f64(grad);
        }
    }

    // Output head.
    let tied = params.lm_head.is_none();
    let head = params.lm_head.as_ref().unwrap_or(&params.wte);
    let mut d_head = Mat::zeros(head.rows, head.cols);
    let d_xf = linear_backward(&cache.xf, head, &d_logits, &mut d_head, t_len);
    if tied {
        for (g, h) in grads.wte.data.iter_mut().zip(d_head.data.iter()) {
            *g = *g + *h;
        }
    } else {
        grads.lm_head = Some(d_head);
    }

    // Final norm.
    let mut d_x = vec![T::zero(); t_len * d];
    for t in 0..t_len {
        let dx_row = rmsnorm_backward(
            &d_xf[t * d..(t + 1) * d],
            &cache.x_last[t * d..(t + 1) * d],
            &params.final_norm,
            cache.invf[t],
            &mut grads.final_norm,
        );
        d_x[t * d..(t + 1) * d].copy_from_slice(&dx_row);
    }

    let scale = T::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP branch: x_out = x_mid + w_down(silu(w_up(xn2))).
        let d_down = &d_x; // gradient into the down-projection output
        let d_act = linear_backward(&lc.act, &layer.w_down, d_down, &mut lg.w_down, t_len);
        let d_up: Vec<T> = d_act
            .iter()
            .zip(lc.up.iter())
            .map(|(&g, &u)| g * silu_grad(u))
            .collect();
        let d_xn2 = linear_backward(&lc.xn2, &layer.w_up, &d_up, &mut lg.w_up, t_len);
        let mut d_x_mid = d_x.clone(); // residual path
        for t in 0..t_len {
            let dx_row = rmsnorm_backward(
                &d_xn2[t * d..(t + 1) * d],
                &lc.x_mid[t * d..(t + 1) * d],
                &layer.mlp_norm,
                lc.inv2[t],
                &mut lg.mlp_norm,
            );
            axpy(&mut d_x_mid[t * d..(t + 1) * d], T::one(), &dx_row);
        }

        // Attention branch: x_mid = x_in + wo(mix).
        let d_mix = linear_backward(&lc.mix, &layer.wo, &d_x_mid, &mut lg.wo, t_len);
        let mut d_q = vec![T::zero(); t_len * d];
        let mut d_k = vec![T::zero(); t_len * d];
        let mut d_v = vec![T::zero(); t_len * d];
        for h in 0..cfg.n_heads {
            let hd = cfg.head_dim;
            for t in 0..t_len {
                let mix_g = &d_mix[t * d + h * hd..t * d + (h + 1) * hd];
                let prow = &lc.probs[h * t_len * t_len + t * t_len..][..t + 1];
                let mut d_scores: Vec<T> = Vec::with_capacity(t + 1);
                for u in 0..=t {
                    let v_row = &lc.v[u * d + h * hd..u * d + (h + 1) * hd];
                    d_scores.push(dot(mix_g, v_row));
                    axpy(&mut d_v[u * d + h * hd..u * d + (h + 1) * hd], prow[u], mix_g);
                }
                let mut p_dot = T::zero();
                for u in 0..=t {
                    p_dot = p_dot + prow[u] * d_scores[u];
                }
                for u in 0..=t {
                    d_scores[u] = prow[u] * (d_scores[u] - p_dot);
                }
                let q_row: Vec<T> = lc.q[t * d + h * hd..t * d + (h + 1) * hd].to_vec();
                for u in 0..=t {
                    let k_row = &lc.k[u * d + h * hd..u * d + (h + 1) * hd];
                    axpy(
                        &mut d_q[t * d + h * hd..t * d + (h + 1) * hd],
                        scale * d_scores[u],
                        k_row,
                    );
                    axpy(
                        &mut d_k[u * d + h * hd..u * d + (h + 1) * hd],
                        scale * d_scores[u],
                        &q_row,
                    );
                }
            }
        }
        rotate_rows_backward(&mut d_q, &tables, t_len, cfg.n_heads, cfg.head_dim);
        rotate_rows_backward(&mut d_k, &tables, t_len, cfg.n_heads, cfg.head_dim);

        let mut d_xn1 = linear_backward(&lc.xn1, &layer.wq, &d_q, &mut lg.wq, t_len);
        let d_xn1_k = linear_backward(&lc.xn1, &layer.wk, &d_k, &mut lg.wk, t_len);
        let d_xn1_v = linear_backward(&lc.xn1, &layer.wv, &d_v, &mut lg.wv, t_len);
        for ((a, b), c) in d_xn1.iter_mut().zip(d_xn1_k.iter()).zip(d_xn1_v.iter()) {
            *a = *a + *b + *c;
        }

        let mut d_x_in = d_x_mid; // residual path
        for t in 0..t_len {
            let dx_row = rmsnorm_backward(
                &d_xn1[t * d..(t + 1) * d],
                &lc.x_in[t * d..(t + 1) * d],
                &layer.attn_norm,
                lc.inv1[t],
                &mut lg.attn_norm,
            );
            axpy(&mut d_x_in[t * d..(t + 1) * d], T::one(), &dx_row);
        }
        d_x = d_x_in;
    }

    // Embedding scatter.
    for (t, &tok) in tokens.iter().enumerate() {
        axpy(grads.wte.row_mut(tok as usize), T::one(), &d_x[t * d..(t + 1) * d]);
    }

    Ok((loss, grads))
}

/// Scalar next-token cross-entropy and named gradient tensors for one
/// sequence.
pub fn loss_and_grads(
    ckpt: &ModelCheckpoint,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
) -> Result<(f64, Params<f32>), ModelError> {
    compute_loss_and_grads(&ckpt.config, &ckpt.params, tokens, rf)
}

/// exp(mean next-token NLL) over positions 1..len.
pub fn perplexity(
    ckpt: &ModelCheckpoint,
    tokens: &[Token],
    rf: Option<&RescaleFactors>,
) -> Result<f64, ModelError> {
    Ok(compute_loss(&ckpt.config, &ckpt.params, tokens, rf)?.exp())
}

/// Incremental decode state: per-layer rotary key/value caches. Appending a
/// token reproduces exactly the arithmetic the full forward pass runs for
/// that row, so incremental and full recomputation agree bitwise.
pub struct IncrementalState<'a> {
    ckpt: &'a ModelCheckpoint,
    rf: Option<&'a RescaleFactors>,
    /// Per layer, per head, contiguous [t x head_dim] key/value history.
    k_cache: Vec<Vec<Vec<f32>>>,
    v_cache: Vec<Vec<Vec<f32>>>,
    len: usize,
}

impl<'a> IncrementalState<'a> {
    pub fn new(
        ckpt: &'a ModelCheckpoint,
        rf: Option<&'a RescaleFactors>,
    ) -> Result<Self, ModelError> {
        validate_factors_shape(&ckpt.config, rf)?;
        let per_layer = vec![vec![Vec::new(); ckpt.config.n_heads]; ckpt.config.n_layers];
        Ok(Self {
            ckpt,
            rf,
            k_cache: per_layer.clone(),
            v_cache: per_layer,
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Advance by one token; returns that position's logits row only when
    /// `want_logits` is set (the projection is the most expensive step).
    pub fn append(&mut self, token: Token, want_logits: bool) -> Result<Option<Vec<f32>>, ModelError> {
        let cfg = &self.ckpt.config;
        let params = &self.ckpt.params;
        validate_tokens(cfg, &[token])?;
        let cap = context_cap(cfg, self.rf);
        if self.len + 1 > cap {
            return Err(ModelError::Length {
                len: self.len + 1,
                max: cap,
            });
        }
        let t = self.len;
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let pairs = cfg.rotary.num_pairs();
        let angles = match self.rf {
            Some(rf) => rescaled_angles(&cfg.rotary, rf, t as f64),
            None => crate::rope::rope_angles(&cfg.rotary, t as f64),
        };
        let table: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let (s, c) = a.sin_cos();
                (c, s)
            })
            .collect();

        let scale = f32::from_f64(1.0 / (hd as f64).sqrt());

        let mut x: Vec<f32> = params.wte.row(token as usize).to_vec();
        for (li, layer) in params.layers.iter().enumerate() {
            let (xn1, _) = rmsnorm_forward(&x, &layer.attn_norm);
            let mut q = linear_forward(&xn1, &layer.wq, 1);
            let mut k = linear_forward(&xn1, &layer.wk, 1);
            let v = linear_forward(&xn1, &layer.wv, 1);
            rotate_rows(&mut q, &table[..pairs], 1, cfg.n_heads, hd);
            rotate_rows(&mut k, &table[..pairs], 1, cfg.n_heads, hd);
            for h in 0..cfg.n_heads {
                self.k_cache[li][h].extend_from_slice(&k[h * hd..(h + 1) * hd]);
                self.v_cache[li][h].extend_from_slice(&v[h * hd..(h + 1) * hd]);
            }

            // Shared row kernel, so the incremental path matches the full
            // recompute bit for bit.
            let mut mix_row = vec![0.0f32; d];
            let mut scores: Vec<f32> = Vec::with_capacity(t + 1);
            for h in 0..cfg.n_heads {
                let q_row = &q[h * hd..(h + 1) * hd];
                attention_row(
                    q_row,
                    &self.k_cache[li][h],
                    &self.v_cache[li][h],
                    t,
                    hd,
                    scale,
                    &mut scores,
                    &mut mix_row[h * hd..(h + 1) * hd],
                );
            }
            let attn_out = linear_forward(&mix_row, &layer.wo, 1);
            for (xi, a) in x.iter_mut().zip(attn_out.iter()) {
                *xi += *a;
            }
            let (xn2, _) = rmsnorm_forward(&x, &layer.mlp_norm);
            let up = linear_forward(&xn2, &layer.w_up, 1);
            let act: Vec<f32> = up.iter().map(|&u| silu(u)).collect();
            let down = linear_forward(&act, &layer.w_down, 1);
            for (xi, dn) in x.iter_mut().zip(down.iter()) {
                *xi += *dn;
            }
        }
        self.len += 1;

        if want_logits {
            let (xf, _) = rmsnorm_forward(&x, &params.final_norm);
            let head = params.lm_head.as_ref().unwrap_or(&params.wte);
            Ok(Some(linear_forward(&xf, head, 1)))
        } else {
            Ok(None)
        }
    }
}

/// Append argmax tokens one at a time; ties break toward the lowest id.
pub fn generate_greedy(
    ckpt: &ModelCheckpoint,
    prompt: &[Token],
    rf: Option<&RescaleFactors>,
    max_new: usize,
) -> Result<Vec<Token>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::TooShort { len: 0, min: 1 });
    }
    validate_tokens(&ckpt.config, prompt)?;
    validate_factors_shape(&ckpt.config, rf)?;
    let cap = context_cap(&ckpt.config, rf);
    if prompt.len() + max_new > cap {
        return Err(ModelError::GenerationOverflow {
            prompt: prompt.len(),
            max_new,
            max: cap,
        });
    }
    let mut out = prompt.to_vec();
    if max_new == 0 {
        return Ok(out);
    }
    let mut state = IncrementalState::new(ckpt, rf)?;
    let mut last_logits = None;
    for (i, &tok) in prompt.iter().enumerate() {
        last_logits = state.append(tok, i + 1 == prompt.len())?;
    }
    for _ in 0..max_new {
        let logits = last_logits.take().expect("logits present for last token");
        let next = argmax_lowest(&logits);
        out.push(next);
        if out.len() == prompt.len() + max_new {
            break;
        }
        last_logits = state.append(next, true)?;
    }
    Ok(out)
}

fn argmax_lowest(row: &[f32]) -> Token {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best as Token
}

#[cfg(test)]
pub(crate) fn attention_probs_for_test(
    ckpt: &ModelCheckpoint,
    tokens: &[Token],
) -> Vec<Vec<f32>> {
    let (_, cache) = forward_t(&ckpt.config, &ckpt.params, tokens, None, true).unwrap();
    let cache = cache.unwrap();
    let t_len = tokens.len();
    let h = ckpt.config.n_heads;
    let mut rows = Vec::new();
    for lc in &cache.layers {
        for head in 0..h {
            for t in 0..t_len {
                rows.push(lc.probs[head * t_len * t_len + t * t_len..][..t + 1].to_vec());
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RotaryConfig;

    fn tiny_config(tied: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 12,
            trained_len: 16,
            tied_embeddings: tied,
            rotary: RotaryConfig::with_default_base(4, 16).unwrap(),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config(false);
        let a = init_model(&cfg, 7).unwrap();
        let b = init_model(&cfg, 7).unwrap();
        for ((na, ta), (_, tb)) in a.params.named_tensors().iter().zip(b.params.named_tensors()) {
            assert_eq!(ta, &tb, "tensor {na} differs");
        }
        let c = init_model(&cfg, 8).unwrap();
        assert_ne!(a.params.wte.data, c.params.wte.data);
    }

    #[test]
    fn init_rejects_inconsistent_dims() {
        let mut cfg = tiny_config(false);
        cfg.d_model = 100;
        cfg.n_heads = 3;
        cfg.head_dim = 32;
        cfg.rotary = RotaryConfig::with_default_base(32, 16).unwrap();
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let cfg = tiny_config(false);
        let ckpt = ModelCheckpoint {
            config: cfg.clone(),
            params: Params::zeros(&cfg),
            train_steps: 0,
            rescale_used: None,
            rng_seed: 0,
        };
        let tokens: Vec<Token> = vec![1, 2, 3, 4, 5];
        let (loss, _) = loss_and_grads(&ckpt, &tokens, None).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-9);
        let ppl = perplexity(&ckpt, &tokens, None).unwrap();
        assert!((ppl - cfg.vocab_size as f64).abs() < 1e-6);
    }

    #[test]
    fn causal_prefix_is_exact() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 3).unwrap();
        let a: Vec<Token> = vec![1, 2, 3, 4, 5, 6];
        let mut b = a.clone();
        b[4] = 9;
        let la = forward(&ckpt, &a, None).unwrap();
        let lb = forward(&ckpt, &b, None).unwrap();
        for t in 0..4 {
            assert_eq!(la.row(t), lb.row(t), "row {t} changed by suffix edit");
        }
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn single_token_forward_is_finite() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 3).unwrap();
        let l = forward(&ckpt, &[5], None).unwrap();
        assert_eq!(l.len, 1);
        assert!(l.row(0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_factors_match_no_factors() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 11).unwrap();
        let rf = RescaleFactors::identity(&cfg.rotary, cfg.trained_len);
        let tokens: Vec<Token> = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let a = forward(&ckpt, &tokens, None).unwrap();
        let b = forward(&ckpt, &tokens, Some(&rf)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn input_validation_errors() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 1).unwrap();
        assert!(matches!(
            forward(&ckpt, &[99], None),
            Err(ModelError::Vocab { token: 99, .. })
        ));
        let long: Vec<Token> = vec![0; 17];
        assert!(matches!(
            forward(&ckpt, &long, None),
            Err(ModelError::Length { len: 17, max: 16 })
        ));
        let bad_rf = RescaleFactors::new(vec![1.0; 5], 0, 32, 16).unwrap();
        assert!(matches!(
            forward(&ckpt, &[1], Some(&bad_rf)),
            Err(ModelError::FactorShape { expected: 2, got: 5 })
        ));
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 5).unwrap();
        let tokens: Vec<Token> = vec![1, 7, 2, 8, 3];
        for row in attention_probs_for_test(&ckpt, &tokens) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    /// Central finite differences in f64 against the analytic reverse-mode
    /// gradients, sampling every tensor role.
    #[test]
    fn gradients_match_finite_differences() {
        for tied in [false, true] {
            let cfg = tiny_config(tied);
            let ckpt = init_model(&cfg, 42).unwrap();
            let params64: Params<f64> = ckpt.params.cast();
            let rf = crate::rope::pi_factors(&cfg.rotary, 2.0).unwrap();
            let tokens: Vec<Token> = vec![1, 5, 2, 7, 3, 11, 0, 4];

            let (_, grads) =
                compute_loss_and_grads(&cfg, &params64, &tokens, Some(&rf)).unwrap();
            let n_tensors = grads.named_tensors().len();
            let h = 1e-4;
            for ti in 0..n_tensors {
                let len = grads.named_tensors()[ti].1.len();
                for &idx in &[0usize, len / 2, len - 1] {
                    let analytic = grads.named_tensors()[ti].1[idx];
                    let mut perturbed = params64.clone();
                    perturbed.named_tensors_mut()[ti].1[idx] += h;
                    let up = compute_loss(&cfg, &perturbed, &tokens, Some(&rf)).unwrap();
                    let mut perturbed = params64.clone();
                    perturbed.named_tensors_mut()[ti].1[idx] -= h;
                    let down = compute_loss(&cfg, &perturbed, &tokens, Some(&rf)).unwrap();
                    let fd = (up - down) / (2.0 * h);
                    let denom = fd.abs().max(analytic.abs()).max(1e-8);
                    let rel = (fd - analytic).abs() / denom;
                    let name = &grads.named_tensors()[ti].0;
                    assert!(
                        rel < 1e-3,
                        "tied={tied} tensor {name}[{idx}]: fd={fd} analytic={analytic} rel={rel}"
                    );
                }
            }
        }
    }

    #[test]
    fn incremental_decode_matches_full_recompute() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 9).unwrap();
        let prompt: Vec<Token> = vec![2, 4, 6];
        // Full-recompute greedy: rerun forward over the whole sequence for
        // every new token.
        let mut full = prompt.clone();
        for _ in 0..10 {
            let logits = forward(&ckpt, &full, None).unwrap();
            let row = logits.row(full.len() - 1);
            let mut best = 0usize;
            let mut best_val = f32::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best = i;
                }
            }
            full.push(best as Token);
        }
        let incremental = generate_greedy(&ckpt, &prompt, None, 10).unwrap();
        assert_eq!(full, incremental);
    }

    #[test]
    fn generate_contract_edges() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 9).unwrap();
        let prompt: Vec<Token> = vec![1, 2, 3];
        assert_eq!(generate_greedy(&ckpt, &prompt, None, 0).unwrap(), prompt);
        assert!(matches!(
            generate_greedy(&ckpt, &prompt, None, 14),
            Err(ModelError::GenerationOverflow { .. })
        ));
        // Uniform logits (zero params): every position ties, so the lowest
        // token id must win.
        let zero = ModelCheckpoint {
            config: cfg.clone(),
            params: Params::zeros(&cfg),
            train_steps: 0,
            rescale_used: None,
            rng_seed: 0,
        };
        let out = generate_greedy(&zero, &[5], None, 3).unwrap();
        assert_eq!(out, vec![5, 0, 0, 0]);
    }

    #[test]
    fn perplexity_matches_loss_exp() {
        let cfg = tiny_config(false);
        let ckpt = init_model(&cfg, 21).unwrap();
        let tokens: Vec<Token> = vec![1, 2, 3, 4, 5, 6, 7];
        let (loss, _) = loss_and_grads(&ckpt, &tokens, None).unwrap();
        let ppl = perplexity(&ckpt, &tokens, None).unwrap();
        assert!((ppl - loss.exp()).abs() < 1e-9 * ppl);
    }
}
