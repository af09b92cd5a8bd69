//! Hand-scheduled forward and backward passes. Activations are cached per
//! layer during the forward pass (llm.c style flat buffers); the backward
//! pass replays the graph in reverse, accumulating into parameter grads.

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::ops::*;
use crate::numerics::{Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct LayerCache<T> {
    x_in: Vec<T>,         // [BT, C] block input, before LN1 (the captured signal)
    ln1_out: Vec<T>,      // [BT, C]
    ln1_mean: Vec<T>,     // [BT]
    ln1_rstd: Vec<T>,     // [BT]
    qkv: Vec<T>,          // [BT, 3C]
    probs: Vec<T>,        // [B*H*T*T] post-softmax, pre-dropout
    attn_mask: Vec<u8>,   // [B*H*T*T]
    atty: Vec<T>,         // [BT, C]
    resid1_mask: Vec<u8>, // [BT, C]
    x_mid: Vec<T>,        // [BT, C]
    ln2_out: Vec<T>,      // [BT, C]
    ln2_mean: Vec<T>,     // [BT]
    ln2_rstd: Vec<T>,     // [BT]
    up: Vec<T>,           // [BT, F]
    gel: Vec<T>,          // [BT, F]
    resid2_mask: Vec<u8>, // [BT, C]
}

impl<T: Scalar> LayerCache<T> {
    fn new(cfg: &ModelConfig, b: usize, t: usize) -> Self {
        let bt = b * t;
        let (c, f, h) = (cfg.d_model, cfg.mlp_hidden(), cfg.n_heads);
        LayerCache {
            x_in: vec![T::zero(); bt * c],
            ln1_out: vec![T::zero(); bt * c],
            ln1_mean: vec![T::zero(); bt],
            ln1_rstd: vec![T::zero(); bt],
            qkv: vec![T::zero(); bt * 3 * c],
            probs: vec![T::zero(); b * h * t * t],
            attn_mask: vec![1u8; b * h * t * t],
            atty: vec![T::zero(); bt * c],
            resid1_mask: vec![1u8; bt * c],
            x_mid: vec![T::zero(); bt * c],
            ln2_out: vec![T::zero(); bt * c],
            ln2_mean: vec![T::zero(); bt],
            ln2_rstd: vec![T::zero(); bt],
            up: vec![T::zero(); bt * f],
            gel: vec![T::zero(); bt * f],
            resid2_mask: vec![1u8; bt * c],
        }
    }
}

/// All activations of one forward pass, reusable across steps of equal shape.
pub struct ForwardCache<T = f32> {
    cfg: ModelConfig,
    pub batch: usize,
    pub seq: usize,
    emb_mask: Vec<u8>, // [BT, C]
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,   // [BT, C]
    lnf_out: Vec<T>,   // [BT, C]
    lnf_mean: Vec<T>,  // [BT]
    lnf_rstd: Vec<T>,  // [BT]
    head_wt: Vec<T>,   // [C, V] transposed token embedding
    pub logits: Vec<T>, // [BT, V]
    // attention scratch tiles
    q_tile: Vec<T>,  // [T, HS]
    k_tile: Vec<T>,  // [T, HS]
    v_tile: Vec<T>,  // [T, HS]
    kt_tile: Vec<T>, // [HS, T]
    s_tile: Vec<T>,  // [T, T]
    pd_tile: Vec<T>, // [T, T]
    o_tile: Vec<T>,  // [T, HS]
}

impl<T: Scalar> ForwardCache<T> {
    pub fn new(cfg: ModelConfig, batch: usize, seq: usize) -> Self {
        let bt = batch * seq;
        let (c, v, hs) = (cfg.d_model, cfg.vocab_size, cfg.head_size());
        ForwardCache {
            cfg,
            batch,
            seq,
            emb_mask: vec![1u8; bt * c],
            layers: (0..cfg.n_layers).map(|_| LayerCache::new(&cfg, batch, seq)).collect(),
            x_final: vec![T::zero(); bt * c],
            lnf_out: vec![T::zero(); bt * c],
            lnf_mean: vec![T::zero(); bt],
            lnf_rstd: vec![T::zero(); bt],
            head_wt: vec![T::zero(); c * v],
            logits: vec![T::zero(); bt * v],
            q_tile: vec![T::zero(); seq * hs],
            k_tile: vec![T::zero(); seq * hs],
            v_tile: vec![T::zero(); seq * hs],
            kt_tile: vec![T::zero(); hs * seq],
            s_tile: vec![T::zero(); seq * seq],
            pd_tile: vec![T::zero(); seq * seq],
            o_tile: vec![T::zero(); seq * hs],
        }
    }

    fn fits(&self, batch: usize, seq: usize) -> bool {
        self.batch == batch && self.seq == seq
    }
}

/// Copy head `h`'s column band out of a [T, 3C] qkv region.
fn gather_head<T: Scalar>(dst: &mut [T], qkv: &[T], t: usize, c3: usize, col0: usize, hs: usize) {
    for row in 0..t {
        dst[row * hs..(row + 1) * hs]
            .copy_from_slice(&qkv[row * c3 + col0..row * c3 + col0 + hs]);
    }
}

/// Accumulate a [T, HS] tile back into a [T, 3C] gradient region.
fn scatter_head<T: Scalar>(dst: &mut [T], tile: &[T], t: usize, c3: usize, col0: usize, hs: usize) {
    for row in 0..t {
        for j in 0..hs {
            dst[row * c3 + col0 + j] = dst[row * c3 + col0 + j] + tile[row * hs + j];
        }
    }
}

fn maybe_dropout<T: Scalar, R: Rng>(
    out: &mut [T],
    mask: &mut [u8],
    x: &[T],
    p: f32,
    rng: &mut Option<&mut R>,
) {
    match rng.as_deref_mut() {
        Some(r) if p > 0.0 => dropout_fwd(out, mask, x, p, r),
        _ => {
            out.copy_from_slice(x);
            mask.fill(1);
        }
    }
}

/// Forward pass over `tokens` ([batch, seq] row-major ids). Logits land in
/// `cache.logits`. With `capture` set (eval, batch 1), returns the residual
/// stream entering each block's first layer norm as a [T, L, C] tensor.
pub fn forward_pass<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    tokens: &[u32],
    batch: usize,
    mode: Mode,
    capture: bool,
    mut rng: Option<&mut R>,
    cache: &mut ForwardCache<T>,
) -> Result<Option<Tensor<T>>> {
    let cfg = params.config;
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::contract("token buffer does not tile into batches"));
    }
    let t = tokens.len() / batch;
    if t > cfg.block_size {
        return Err(Error::contract(format!(
            "sequence length {} exceeds block size {}",
            t, cfg.block_size
        )));
    }
    for &id in tokens {
        if id as usize >= cfg.vocab_size {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                value: id as usize,
                limit: cfg.vocab_size,
            });
        }
    }
    if capture && (batch != 1 || mode != Mode::Eval) {
        return Err(Error::contract("capture requires eval mode and batch 1"));
    }
    if mode == Mode::Train && cfg.dropout > 0.0 && rng.is_none() {
        return Err(Error::contract("train mode with dropout requires an RNG"));
    }
    if !cache.fits(batch, t) {
        *cache = ForwardCache::new(cfg, batch, t);
    }
    let dropout_p = if mode == Mode::Train { cfg.dropout } else { 0.0 };
    let (c, h, hs, f, v, l_count) = (
        cfg.d_model,
        cfg.n_heads,
        cfg.head_size(),
        cfg.mlp_hidden(),
        cfg.vocab_size,
        cfg.n_layers,
    );
    let bt = batch * t;
    let scale = T::of_f64(1.0 / (hs as f64).sqrt());

    // token + position embedding, then embedding dropout
    {
        let first = &mut cache.layers[0].x_in;
        for (bt_i, &tok) in tokens.iter().enumerate() {
            let pos = bt_i % t;
            let dst = &mut first[bt_i * c..(bt_i + 1) * c];
            let te = &params.tok_emb.data()[tok as usize * c..(tok as usize + 1) * c];
            let pe = &params.pos_emb.data()[pos * c..(pos + 1) * c];
            for j in 0..c {
                dst[j] = te[j] + pe[j];
            }
        }
        if dropout_p > 0.0 {
            let src = first.clone();
            maybe_dropout(first, &mut cache.emb_mask, &src, dropout_p, &mut rng);
        } else {
            cache.emb_mask.fill(1);
        }
    }

    let mut hidden = if capture {
        Some(vec![T::zero(); t * l_count * c])
    } else {
        None
    };

    for l in 0..l_count {
        // split so the next layer's x_in can be written while reading this one
        let (head_layers, tail_layers) = cache.layers.split_at_mut(l + 1);
        let lc = &mut head_layers[l];
        let block = &params.blocks[l];

        if let Some(hbuf) = hidden.as_mut() {
            // batch == 1: row index is the token position
            for pos in 0..t {
                hbuf[(pos * l_count + l) * c..(pos * l_count + l + 1) * c]
                    .copy_from_slice(&lc.x_in[pos * c..(pos + 1) * c]);
            }
        }

        layer_norm_fwd(
            &mut lc.ln1_out,
            &mut lc.ln1_mean,
            &mut lc.ln1_rstd,
            &lc.x_in,
            block.ln1.gamma.data(),
            block.ln1.beta.data(),
            c,
            T::of_f64(1e-5),
        );
        matmul_fwd(&mut lc.qkv, &lc.ln1_out, block.qkv_w.data(), bt, c, 3 * c);
        bias_add(&mut lc.qkv, block.qkv_b.data());

        // self-attention, head by head
        for b_i in 0..batch {
            let qkv_rows = &lc.qkv[b_i * t * 3 * c..(b_i + 1) * t * 3 * c];
            for h_i in 0..h {
                gather_head(&mut cache.q_tile, qkv_rows, t, 3 * c, h_i * hs, hs);
                gather_head(&mut cache.k_tile, qkv_rows, t, 3 * c, c + h_i * hs, hs);
                gather_head(&mut cache.v_tile, qkv_rows, t, 3 * c, 2 * c + h_i * hs, hs);
                transpose(&mut cache.kt_tile, &cache.k_tile, t, hs);
                matmul_fwd(&mut cache.s_tile, &cache.q_tile, &cache.kt_tile, t, hs, t);
                for s in cache.s_tile.iter_mut() {
                    *s = *s * scale;
                }
                let head_off = (b_i * h + h_i) * t * t;
                let probs = &mut lc.probs[head_off..head_off + t * t];
                causal_softmax_fwd(probs, &cache.s_tile, t);
                let mask = &mut lc.attn_mask[head_off..head_off + t * t];
                maybe_dropout(&mut cache.pd_tile, mask, probs, dropout_p, &mut rng);
                matmul_fwd(&mut cache.o_tile, &cache.pd_tile, &cache.v_tile, t, t, hs);
                // scatter the head output into atty[BT, C]
                for row in 0..t {
                    lc.atty[(b_i * t + row) * c + h_i * hs..(b_i * t + row) * c + (h_i + 1) * hs]
                        .copy_from_slice(&cache.o_tile[row * hs..(row + 1) * hs]);
                }
            }
        }

        // attention projection + residual (x_mid reused as the proj scratch)
        matmul_fwd(&mut lc.x_mid, &lc.atty, block.proj_w.data(), bt, c, c);
        bias_add(&mut lc.x_mid, block.proj_b.data());
        if dropout_p > 0.0 {
            let src = lc.x_mid.clone();
            maybe_dropout(&mut lc.x_mid, &mut lc.resid1_mask, &src, dropout_p, &mut rng);
        } else {
            lc.resid1_mask.fill(1);
        }
        for (m, &x) in lc.x_mid.iter_mut().zip(lc.x_in.iter()) {
            *m = *m + x;
        }

        layer_norm_fwd(
            &mut lc.ln2_out,
            &mut lc.ln2_mean,
            &mut lc.ln2_rstd,
            &lc.x_mid,
            block.ln2.gamma.data(),
            block.ln2.beta.data(),
            c,
            T::of_f64(1e-5),
        );
        matmul_fwd(&mut lc.up, &lc.ln2_out, block.up_w.data(), bt, c, f);
        bias_add(&mut lc.up, block.up_b.data());
        gelu_fwd(&mut lc.gel, &lc.up);

        // mlp down projection + residual into the next block's input
        let x_out: &mut Vec<T> = if l + 1 < l_count {
            &mut tail_layers[0].x_in
        } else {
            &mut cache.x_final
        };
        matmul_fwd(x_out, &lc.gel, block.down_w.data(), bt, f, c);
        bias_add(x_out, block.down_b.data());
        if dropout_p > 0.0 {
            let src = x_out.clone();
            maybe_dropout(x_out, &mut lc.resid2_mask, &src, dropout_p, &mut rng);
        } else {
            lc.resid2_mask.fill(1);
        }
        for (o, &m) in x_out.iter_mut().zip(lc.x_mid.iter()) {
            *o = *o + m;
        }
    }

    layer_norm_fwd(
        &mut cache.lnf_out,
        &mut cache.lnf_mean,
        &mut cache.lnf_rstd,
        &cache.x_final,
        params.lnf.gamma.data(),
        params.lnf.beta.data(),
        c,
        T::of_f64(1e-5),
    );
    // weight-tied LM head: logits = lnf . tok_emb^T
    transpose(&mut cache.head_wt, params.tok_emb.data(), v, c);
    matmul_fwd(&mut cache.logits, &cache.lnf_out, &cache.head_wt, bt, c, v);

    Ok(hidden.map(|hbuf| {
        Tensor::from_vec(&[t, l_count, c], hbuf).expect("capture buffer shape")
    }))
}

/// Scratch buffers for one backward pass.
pub struct BackwardScratch<T = f32> {
    dlogits: Vec<T>,  // [BT, V]
    d_wt: Vec<T>,     // [C, V]
    dx: Vec<T>,       // [BT, C]
    dx_mid: Vec<T>,   // [BT, C]
    dx_next: Vec<T>,  // [BT, C]
    dres: Vec<T>,     // [BT, C]
    dgel: Vec<T>,     // [BT, F]
    dup: Vec<T>,      // [BT, F]
    dln: Vec<T>,      // [BT, C]
    datty: Vec<T>,    // [BT, C]
    dqkv: Vec<T>,     // [BT, 3C]
    demb: Vec<T>,     // [BT, C]
    q_tile: Vec<T>,
    k_tile: Vec<T>,
    v_tile: Vec<T>,
    vt_tile: Vec<T>,  // [HS, T]
    pd_tile: Vec<T>,  // [T, T]
    pdt_tile: Vec<T>, // [T, T]
    dp_tile: Vec<T>,  // [T, T]
    ds_tile: Vec<T>,  // [T, T]
    dst_tile: Vec<T>, // [T, T]
    dh_tile: Vec<T>,  // [T, HS]
    batch: usize,
    seq: usize,
}

impl<T: Scalar> BackwardScratch<T> {
    pub fn new(cfg: ModelConfig, batch: usize, seq: usize) -> Self {
        let bt = batch * seq;
        let (c, f, v, hs, t) = (
            cfg.d_model,
            cfg.mlp_hidden(),
            cfg.vocab_size,
            cfg.head_size(),
            seq,
        );
        BackwardScratch {
            dlogits: vec![T::zero(); bt * v],
            d_wt: vec![T::zero(); c * v],
            dx: vec![T::zero(); bt * c],
            dx_mid: vec![T::zero(); bt * c],
            dx_next: vec![T::zero(); bt * c],
            dres: vec![T::zero(); bt * c],
            dgel: vec![T::zero(); bt * f],
            dup: vec![T::zero(); bt * f],
            dln: vec![T::zero(); bt * c],
            datty: vec![T::zero(); bt * c],
            dqkv: vec![T::zero(); bt * 3 * c],
            demb: vec![T::zero(); bt * c],
            q_tile: vec![T::zero(); t * hs],
            k_tile: vec![T::zero(); t * hs],
            v_tile: vec![T::zero(); t * hs],
            vt_tile: vec![T::zero(); hs * t],
            pd_tile: vec![T::zero(); t * t],
            pdt_tile: vec![T::zero(); t * t],
            dp_tile: vec![T::zero(); t * t],
            ds_tile: vec![T::zero(); t * t],
            dst_tile: vec![T::zero(); t * t],
            dh_tile: vec![T::zero(); t * hs],
            batch,
            seq,
        }
    }

    fn fits(&self, batch: usize, seq: usize) -> bool {
        self.batch == batch && self.seq == seq
    }
}

/// Backward pass for the mean cross-entropy loss over `targets`, replaying
/// the cached forward. Accumulates into every parameter's grad buffer
/// (which must be present, see [`ModelParams::zero_grads`]).
pub fn backward_pass<T: Scalar>(
    params: &mut ModelParams<T>,
    tokens: &[u32],
    targets: &[u32],
    cache: &ForwardCache<T>,
    scratch: &mut BackwardScratch<T>,
) -> Result<()> {
    let cfg = params.config;
    let (batch, t) = (cache.batch, cache.seq);
    let bt = batch * t;
    if targets.len() != bt || tokens.len() != bt {
        return Err(Error::contract("targets must match the cached batch shape"));
    }
    if !scratch.fits(batch, t) {
        *scratch = BackwardScratch::new(cfg, batch, t);
    }
    let (c, h, hs, f, v) = (
        cfg.d_model,
        cfg.n_heads,
        cfg.head_size(),
        cfg.mlp_hidden(),
        cfg.vocab_size,
    );
    let scale = T::of_f64(1.0 / (hs as f64).sqrt());
    let inv_keep = T::of_f64(1.0 / (1.0 - cfg.dropout as f64));

    // loss -> logits
    scratch.dlogits.fill(T::zero());
    cross_entropy_bwd(&mut scratch.dlogits, &cache.logits, targets, v);

    // logits = lnf . tok_emb^T
    scratch.dres.fill(T::zero()); // borrow as dlnf
    scratch.d_wt.fill(T::zero());
    matmul_bwd(
        &mut scratch.dres,
        &mut scratch.d_wt,
        &scratch.dlogits,
        &cache.lnf_out,
        &cache.head_wt,
        bt,
        c,
        v,
    );
    {
        let tok_grad = params.tok_emb.ensure_grad();
        for ci in 0..c {
            for vi in 0..v {
                tok_grad[vi * c + ci] = tok_grad[vi * c + ci] + scratch.d_wt[ci * v + vi];
            }
        }
    }

    // final layer norm
    scratch.dx.fill(T::zero());
    {
        let (g_data, g_grad) = params.lnf.gamma.data_and_grad_mut();
        let b_grad = params.lnf.beta.ensure_grad();
        layer_norm_bwd(
            &mut scratch.dx,
            g_grad,
            b_grad,
            &scratch.dres,
            &cache.x_final,
            g_data,
            &cache.lnf_mean,
            &cache.lnf_rstd,
            c,
        );
    }

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let block = &mut params.blocks[l];

        // x_out = x_mid + dropout(mlp_down): split the residual
        scratch.dres.fill(T::zero());
        dropout_bwd(&mut scratch.dres, &lc.resid2_mask, &scratch.dx, cfg.dropout);

        // mlp down
        scratch.dgel.fill(T::zero());
        {
            let (w_data, w_grad) = block.down_w.data_and_grad_mut();
            matmul_bwd(&mut scratch.dgel, w_grad, &scratch.dres, &lc.gel, w_data, bt, f, c);
            bias_bwd(block.down_b.ensure_grad(), &scratch.dres);
        }
        scratch.dup.fill(T::zero());
        gelu_bwd(&mut scratch.dup, &lc.up, &scratch.dgel);
        scratch.dln.fill(T::zero());
        {
            let (w_data, w_grad) = block.up_w.data_and_grad_mut();
            matmul_bwd(&mut scratch.dln, w_grad, &scratch.dup, &lc.ln2_out, w_data, bt, c, f);
            bias_bwd(block.up_b.ensure_grad(), &scratch.dup);
        }
        scratch.dx_mid.fill(T::zero());
        {
            let (g_data, g_grad) = block.ln2.gamma.data_and_grad_mut();
            layer_norm_bwd(
                &mut scratch.dx_mid,
                g_grad,
                block.ln2.beta.ensure_grad(),
                &scratch.dln,
                &lc.x_mid,
                g_data,
                &lc.ln2_mean,
                &lc.ln2_rstd,
                c,
            );
        }
        // residual passthrough of dx into dx_mid
        for (m, &g) in scratch.dx_mid.iter_mut().zip(scratch.dx.iter()) {
            *m = *m + g;
        }

        // x_mid = x_in + dropout(attn_proj)
        scratch.dres.fill(T::zero());
        dropout_bwd(&mut scratch.dres, &lc.resid1_mask, &scratch.dx_mid, cfg.dropout);

        scratch.datty.fill(T::zero());
        {
            let (w_data, w_grad) = block.proj_w.data_and_grad_mut();
            matmul_bwd(&mut scratch.datty, w_grad, &scratch.dres, &lc.atty, w_data, bt, c, c);
            bias_bwd(block.proj_b.ensure_grad(), &scratch.dres);
        }

        // attention core, head by head
        scratch.dqkv.fill(T::zero());
        for b_i in 0..batch {
            let qkv_rows = &lc.qkv[b_i * t * 3 * c..(b_i + 1) * t * 3 * c];
            let dqkv_rows = &mut scratch.dqkv[b_i * t * 3 * c..(b_i + 1) * t * 3 * c];
            for h_i in 0..h {
                gather_head(&mut scratch.q_tile, qkv_rows, t, 3 * c, h_i * hs, hs);
                gather_head(&mut scratch.k_tile, qkv_rows, t, 3 * c, c + h_i * hs, hs);
                gather_head(&mut scratch.v_tile, qkv_rows, t, 3 * c, 2 * c + h_i * hs, hs);
                let head_off = (b_i * h + h_i) * t * t;
                let probs = &lc.probs[head_off..head_off + t * t];
                let mask = &lc.attn_mask[head_off..head_off + t * t];

                // datty rows for this head
                for row in 0..t {
                    let src = &scratch.datty
                        [(b_i * t + row) * c + h_i * hs..(b_i * t + row) * c + (h_i + 1) * hs];
                    scratch.dh_tile[row * hs..(row + 1) * hs].copy_from_slice(src);
                }

                // reconstruct dropped probs: pd = probs * mask / keep
                if cfg.dropout > 0.0 {
                    for i in 0..t * t {
                        scratch.pd_tile[i] = if mask[i] == 1 {
                            probs[i] * inv_keep
                        } else {
                            T::zero()
                        };
                    }
                } else {
                    scratch.pd_tile.copy_from_slice(probs);
                }

                // att_out = pd . v
                transpose(&mut scratch.vt_tile, &scratch.v_tile, t, hs);
                matmul_fwd(&mut scratch.dp_tile, &scratch.dh_tile, &scratch.vt_tile, t, hs, t);
                transpose(&mut scratch.pdt_tile, &scratch.pd_tile, t, t);
                // dv = pd^T . datty
                matmul_fwd(&mut scratch.v_tile, &scratch.pdt_tile, &scratch.dh_tile, t, t, hs);
                scatter_head(dqkv_rows, &scratch.v_tile, t, 3 * c, 2 * c + h_i * hs, hs);

                // through dropout and softmax back to scores
                scratch.ds_tile.fill(T::zero());
                if cfg.dropout > 0.0 {
                    scratch.dst_tile.fill(T::zero());
                    dropout_bwd(&mut scratch.dst_tile, mask, &scratch.dp_tile, cfg.dropout);
                    causal_softmax_bwd(&mut scratch.ds_tile, probs, &scratch.dst_tile, t);
                } else {
                    causal_softmax_bwd(&mut scratch.ds_tile, probs, &scratch.dp_tile, t);
                }
                for s in scratch.ds_tile.iter_mut() {
                    *s = *s * scale;
                }

                // dq = ds . k ; dk = ds^T . q
                matmul_fwd(&mut scratch.dh_tile, &scratch.ds_tile, &scratch.k_tile, t, t, hs);
                scatter_head(dqkv_rows, &scratch.dh_tile, t, 3 * c, h_i * hs, hs);
                transpose(&mut scratch.dst_tile, &scratch.ds_tile, t, t);
                matmul_fwd(&mut scratch.dh_tile, &scratch.dst_tile, &scratch.q_tile, t, t, hs);
                scatter_head(dqkv_rows, &scratch.dh_tile, t, 3 * c, c + h_i * hs, hs);
            }
        }

        // qkv projection
        scratch.dln.fill(T::zero());
        {
            let (w_data, w_grad) = block.qkv_w.data_and_grad_mut();
            matmul_bwd(&mut scratch.dln, w_grad, &scratch.dqkv, &lc.ln1_out, w_data, bt, c, 3 * c);
            bias_bwd(block.qkv_b.ensure_grad(), &scratch.dqkv);
        }

        // first layer norm, then fold in the residual passthrough
        scratch.dx_next.fill(T::zero());
        {
            let (g_data, g_grad) = block.ln1.gamma.data_and_grad_mut();
            layer_norm_bwd(
                &mut scratch.dx_next,
                g_grad,
                block.ln1.beta.ensure_grad(),
                &scratch.dln,
                &lc.x_in,
                g_data,
                &lc.ln1_mean,
                &lc.ln1_rstd,
                c,
            );
        }
        for (nx, &m) in scratch.dx_next.iter_mut().zip(scratch.dx_mid.iter()) {
            *nx = *nx + m;
        }
        std::mem::swap(&mut scratch.dx, &mut scratch.dx_next);
    }

    // embedding
    scratch.demb.fill(T::zero());
    dropout_bwd(&mut scratch.demb, &cache.emb_mask, &scratch.dx, cfg.dropout);
    {
        let tok_grad = params.tok_emb.ensure_grad();
        let pos_grad = params.pos_emb.ensure_grad();
        for (bt_i, &tok) in tokens.iter().enumerate() {
            let pos = bt_i % t;
            let src = &scratch.demb[bt_i * c..(bt_i + 1) * c];
            let tg = &mut tok_grad[tok as usize * c..(tok as usize + 1) * c];
            for j in 0..c {
                tg[j] = tg[j] + src[j];
            }
            let pg = &mut pos_grad[pos * c..(pos + 1) * c];
            for j in 0..c {
                pg[j] = pg[j] + src[j];
            }
        }
    }
    Ok(())
}

/// Forward in train mode, mean cross-entropy against `targets`, backward.
/// Returns the loss. Gradients accumulate into `params`.
pub fn loss_and_grad<T: Scalar, R: Rng>(
    params: &mut ModelParams<T>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    rng: Option<&mut R>,
    cache: &mut ForwardCache<T>,
    scratch: &mut BackwardScratch<T>,
) -> Result<T> {
    forward_pass(params, tokens, batch, Mode::Train, false, rng, cache)?;
    let loss = cross_entropy_fwd(&cache.logits, targets, params.config.vocab_size)?;
    backward_pass(params, tokens, targets, cache, scratch)?;
    Ok(loss)
}

/// Spec-shaped convenience wrapper: fresh cache, logits as a tensor.
pub fn forward<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    tokens: &[u32],
    batch: usize,
    mode: Mode,
    capture: bool,
    rng: Option<&mut R>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let t = if batch > 0 && tokens.len() % batch == 0 {
        tokens.len() / batch
    } else {
        return Err(Error::contract("token buffer does not tile into batches"));
    };
    let mut cache = ForwardCache::new(params.config, batch, t);
    let hidden = forward_pass(params, tokens, batch, mode, capture, rng, &mut cache)?;
    let logits = Tensor::from_vec(
        &[batch, t, params.config.vocab_size],
        std::mem::take(&mut cache.logits),
    )?;
    Ok((logits, hidden))
}
