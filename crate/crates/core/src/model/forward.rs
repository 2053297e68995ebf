use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{view, view_mut, ModelError, ModelParams, RotaryTable, Slot};
use crate::loss_opt::{slot_loss_from_logits, LossConfig};
use crate::sequence::{AttentionMask, PackedBatch};
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: ArrayView2<f64>, bias: Option<ArrayView2<f64>>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let mut out = &xhat * &gain;
    if let Some(b) = bias {
        out += &b;
    }
    (out, LnCache { xhat, rstd })
}

/// Returns `dx` and accumulates the gain (and bias) gradients.
fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache, gain: Slot, bias: Option<Slot>, params: &[f64], grads: &mut [f64]) -> Array2<f64> {
    let g = view(params, gain);
    {
        let mut dg = view_mut(grads, gain);
        dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if let Some(b) = bias {
        let mut db = view_mut(grads, b);
        db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let dxhat = dy * &g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (t, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let r = cache.rstd[t];
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &b| *o = r * (a - mean_dh - b * mean_dhx));
    }
    dx
}

fn add_bias(x: &mut Array2<f64>, bias: Option<Slot>, params: &[f64]) {
    if let Some(b) = bias {
        *x += &view(params, b);
    }
}

fn accumulate_matmul(grads: &mut [f64], slot: Slot, a_t: ArrayView2<f64>, b: ArrayView2<f64>) {
    let mut g = view_mut(grads, slot);
    general_mat_mul(1.0, &a_t, &b, 1.0, &mut g);
}

fn accumulate_bias(grads: &mut [f64], slot: Option<Slot>, dy: &Array2<f64>) {
    if let Some(b) = slot {
        let mut g = view_mut(grads, b);
        g += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    y: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    mlp_drop: Option<Array2<f64>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    rot: RotaryTable,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final normalized hidden states, `[seq, n_embd]`.
    pub xf: Array2<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Attention probabilities of one head, `[query, key]`.
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].att[head]
    }
}

/// Row-wise softmax restricted to allowed keys; disallowed entries become
/// exactly zero, and a row with no allowed key is all zero.
fn masked_softmax(scores: &mut Array2<f64>, mask: &AttentionMask) {
    for (q, mut row) in scores.rows_mut().into_iter().enumerate() {
        let allowed = mask.row(q);
        let mut max = f64::NEG_INFINITY;
        for (s, &a) in row.iter().zip(allowed) {
            if a && *s > max {
                max = *s;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (s, &a) in row.iter_mut().zip(allowed) {
            *s = if a { (*s - max).exp() } else { 0.0 };
            sum += *s;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Runs the transformer trunk, returning the final normalized hidden states
/// and everything needed for [`backward`]. Dropout is only applied when an RNG
/// is supplied and the configured rate is positive.
pub fn forward_cached(
    params: &ModelParams,
    tokens: &[TokenId],
    positions: &[f64],
    mask: &AttentionMask,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache, ModelError> {
    let cfg = &params.config;
    let n = tokens.len();
    if n > cfg.block_size {
        return Err(ModelError::TooLong {
            len: n,
            block_size: cfg.block_size,
        });
    }
    if mask.len() != n || positions.len() != n {
        return Err(ModelError::MaskShape { mask: mask.len(), len: n });
    }
    let d = cfg.n_embd;
    let hd = cfg.head_dim();
    let lay = &params.layout;
    let data = &params.data;
    let wte = view(data, lay.wte);

    let mut x = Array2::zeros((n, d));
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: tok,
                position: t,
                vocab_size: cfg.vocab_size,
            });
        }
        x.row_mut(t).assign(&wte.row(tok as usize));
    }

    let rot = RotaryTable::new(positions, hd, cfg.rotary_base);
    let scale = 1.0 / (hd as f64).sqrt();
    let drop_rate = cfg.dropout;
    let mut layers = Vec::with_capacity(cfg.n_layer);
    for ls in &lay.layers {
        let (h1, ln1) = layer_norm(&x, view(data, ls.ln1_g), ls.ln1_b.map(|b| view(data, b)));
        let mut qkv = h1.dot(&view(data, ls.attn_w));
        add_bias(&mut qkv, ls.attn_b, data);
        let mut q = qkv.slice(s![.., 0..d]).to_owned();
        let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
        let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();
        rot.rotate(&mut q.view_mut());
        rot.rotate(&mut k.view_mut());

        let mut y = Array2::zeros((n, d));
        let mut att = Vec::with_capacity(cfg.n_head);
        for h in 0..cfg.n_head {
            let cols = h * hd..(h + 1) * hd;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            masked_softmax(&mut scores, mask);
            y.slice_mut(s![.., cols]).assign(&scores.dot(&vh));
            att.push(scores);
        }
        let mut a = y.dot(&view(data, ls.attn_proj_w));
        add_bias(&mut a, ls.attn_proj_b, data);
        let attn_drop = match dropout.as_deref_mut() {
            Some(rng) if drop_rate > 0.0 => {
                let m = dropout_mask((n, d), drop_rate, rng);
                a *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &a;

        let (h2, ln2) = layer_norm(&x, view(data, ls.ln2_g), ls.ln2_b.map(|b| view(data, b)));
        let mut f = h2.dot(&view(data, ls.fc_w));
        add_bias(&mut f, ls.fc_b, data);
        let g = f.mapv(gelu);
        let mut m = g.dot(&view(data, ls.mlp_proj_w));
        add_bias(&mut m, ls.mlp_proj_b, data);
        let mlp_drop = match dropout.as_deref_mut() {
            Some(rng) if drop_rate > 0.0 => {
                let mask = dropout_mask((n, d), drop_rate, rng);
                m *= &mask;
                Some(mask)
            }
            _ => None,
        };
        x += &m;

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            att,
            y,
            attn_drop,
            ln2,
            h2,
            f,
            g,
            mlp_drop,
        });
    }
    let (xf, lnf) = layer_norm(&x, view(data, lay.lnf_g), lay.lnf_b.map(|b| view(data, b)));
    if !xf.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite {
            stage: "final layer norm".into(),
        });
    }
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        rot,
        layers,
        lnf,
        xf,
    })
}

fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Output projection of the given hidden-state rows.
pub fn head_logits(params: &ModelParams, hidden: ArrayView2<f64>) -> Array2<f64> {
    let mut logits = hidden.dot(&params.view(params.layout.head_w));
    add_bias(&mut logits, params.layout.head_b, &params.data);
    logits
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[block_size, vocab_size]`; rows at padding are zero.
    pub logits: Array2<f64>,
}

/// Logits at every position of a packed batch.
pub fn forward(params: &ModelParams, batch: &PackedBatch) -> Result<ForwardOutput, ModelError> {
    let n = batch.seq.real_len();
    let mask = batch.attention_mask().truncated(n);
    let cache = forward_cached(params, &batch.seq.token_ids[..n], &batch.seq.positions[..n], &mask, None)?;
    let real = head_logits(params, cache.xf.view());
    if !real.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite { stage: "logits".into() });
    }
    let mut logits = Array2::zeros((batch.block_size(), params.config.vocab_size));
    logits.slice_mut(s![..n, ..]).assign(&real);
    Ok(ForwardOutput { logits })
}

/// Logits at selected rows of an arbitrary sequence.
pub fn forward_rows(
    params: &ModelParams,
    tokens: &[TokenId],
    positions: &[f64],
    mask: &AttentionMask,
    rows: &[usize],
) -> Result<Array2<f64>, ModelError> {
    let cache = forward_cached(params, tokens, positions, mask, None)?;
    let logits = head_logits(params, select_rows(&cache.xf, rows).view());
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite { stage: "logits".into() });
    }
    Ok(logits)
}

/// Backpropagates `dlogits` (one row per entry of `rows`) through the head and
/// trunk, accumulating into the flat `grads` buffer.
pub fn backward(params: &ModelParams, cache: &ForwardCache, rows: &[usize], dlogits: &Array2<f64>, grads: &mut [f64]) {
    let cfg = &params.config;
    let lay = &params.layout;
    let data = &params.data;
    let n = cache.len();
    let d = cfg.n_embd;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let xsel = select_rows(&cache.xf, rows);
    accumulate_matmul(grads, lay.head_w, xsel.t(), dlogits.view());
    accumulate_bias(grads, lay.head_b, dlogits);
    let dxsel = dlogits.dot(&view(data, lay.head_w).t());
    let mut dxf = Array2::zeros((n, d));
    for (i, &r) in rows.iter().enumerate() {
        let mut row = dxf.row_mut(r);
        row += &dxsel.row(i);
    }
    let mut dx = layer_norm_backward(&dxf, &cache.lnf, lay.lnf_g, lay.lnf_b, data, grads);

    for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // MLP branch.
        let mut dm = dx.clone();
        if let Some(mask) = &lc.mlp_drop {
            dm *= mask;
        }
        accumulate_matmul(grads, ls.mlp_proj_w, lc.g.t(), dm.view());
        accumulate_bias(grads, ls.mlp_proj_b, &dm);
        let mut df = dm.dot(&view(data, ls.mlp_proj_w).t());
        Zip::from(&mut df).and(&lc.f).for_each(|g, &f| *g *= gelu_grad(f));
        accumulate_matmul(grads, ls.fc_w, lc.h2.t(), df.view());
        accumulate_bias(grads, ls.fc_b, &df);
        let dh2 = df.dot(&view(data, ls.fc_w).t());
        dx += &layer_norm_backward(&dh2, &lc.ln2, ls.ln2_g, ls.ln2_b, data, grads);

        // Attention branch.
        let mut da = dx.clone();
        if let Some(mask) = &lc.attn_drop {
            da *= mask;
        }
        accumulate_matmul(grads, ls.attn_proj_w, lc.y.t(), da.view());
        accumulate_bias(grads, ls.attn_proj_b, &da);
        let dy = da.dot(&view(data, ls.attn_proj_w).t());

        let mut dqkv = Array2::zeros((n, 3 * d));
        for h in 0..cfg.n_head {
            let cols = h * hd..(h + 1) * hd;
            let p = &lc.att[h];
            let dyh = dy.slice(s![.., cols.clone()]);
            let qh = lc.q.slice(s![.., cols.clone()]);
            let kh = lc.k.slice(s![.., cols.clone()]);
            let vh = lc.v.slice(s![.., cols.clone()]);
            let dp = dyh.dot(&vh.t());
            let dvh = p.t().dot(&dyh);
            let mut ds = Array2::zeros((n, n));
            for ((mut out, prow), dprow) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
                let inner = prow.dot(&dprow);
                Zip::from(&mut out).and(&prow).and(&dprow).for_each(|o, &pp, &g| *o = pp * (g - inner) * scale);
            }
            let dqh = ds.dot(&kh);
            let dkh = ds.t().dot(&qh);
            dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dqh);
            dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&dkh);
            dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dvh);
        }
        {
            let mut dq: ArrayViewMut2<f64> = dqkv.slice_mut(s![.., 0..d]);
            cache.rot.rotate_inverse(&mut dq);
        }
        {
            let mut dk: ArrayViewMut2<f64> = dqkv.slice_mut(s![.., d..2 * d]);
            cache.rot.rotate_inverse(&mut dk);
        }
        accumulate_matmul(grads, ls.attn_w, lc.h1.t(), dqkv.view());
        accumulate_bias(grads, ls.attn_b, &dqkv);
        let dh1 = dqkv.dot(&view(data, ls.attn_w).t());
        dx += &layer_norm_backward(&dh1, &lc.ln1, ls.ln1_g, ls.ln1_b, data, grads);
    }

    let wte = lay.wte;
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let start = wte.offset + tok as usize * d;
        for (g, &v) in grads[start..start + d].iter_mut().zip(dx.row(t)) {
            *g += v;
        }
    }
}

/// Summed (not averaged) loss of one batch and its gradient accumulated into
/// `grads`; returns `(loss_sum, n_slots)`.
pub fn accumulate_loss_and_grads(
    params: &ModelParams,
    batch: &PackedBatch,
    loss: &LossConfig,
    grads: &mut [f64],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, usize), ModelError> {
    let slots = &batch.seq.sep_slots;
    if slots.len() != batch.targets.len() {
        return Err(ModelError::MissingTargets {
            slots: slots.len(),
            targets: batch.targets.len(),
        });
    }
    if slots.is_empty() {
        return Ok((0.0, 0));
    }
    let n = batch.seq.real_len();
    let mask = batch.attention_mask().truncated(n);
    let cache = forward_cached(params, &batch.seq.token_ids[..n], &batch.seq.positions[..n], &mask, dropout)?;
    let rows: Vec<usize> = slots.iter().map(|s| s.index).collect();
    let logits = head_logits(params, select_rows(&cache.xf, &rows).view());
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite { stage: "logits".into() });
    }
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((z, mut g), target) in logits.rows().into_iter().zip(dlogits.rows_mut()).zip(&batch.targets) {
        total += slot_loss_from_logits(
            z.as_slice().expect("contiguous logits"),
            target,
            loss.eps,
            1.0,
            g.as_slice_mut().expect("contiguous grads"),
        );
    }
    if !total.is_finite() {
        return Err(ModelError::NonFinite { stage: "loss".into() });
    }
    backward(params, &cache, &rows, &dlogits, grads);
    Ok((total, slots.len()))
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    /// Mean over separator slots of the per-slot weighted BCE (summed over
    /// the vocabulary).
    pub loss: f64,
    pub n_slots: usize,
    pub grads: Vec<f64>,
}

/// Mean-reduced loss and exact gradients for one batch, dropout off.
pub fn loss_and_grads(params: &ModelParams, batch: &PackedBatch, loss: &LossConfig) -> Result<LossGrads, ModelError> {
    let mut grads = params.zeros_like();
    let (sum, n_slots) = accumulate_loss_and_grads(params, batch, loss, &mut grads, None)?;
    if n_slots == 0 {
        return Ok(LossGrads {
            loss: 0.0,
            n_slots,
            grads,
        });
    }
    let inv = 1.0 / n_slots as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    Ok(LossGrads {
        loss: sum * inv,
        n_slots,
        grads,
    })
}
