//! Full-sequence forward pass with stored activations and its backward pass.
//! Used for training, held-out evaluation and gradient checking.

use super::mask::{DecodeOrder, MaskSpec};
use super::*;
use crate::frame::Frame;
use crate::nn::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, log_softmax};
use crate::tokenizer::{read_patch, TokenGrid};

/// Marker for positions without a location or query embedding.
pub const NO_LOC: u32 = u32::MAX;

/// One model input sequence with its training targets.
///
/// Positions before `prefix` attend to each other freely; later positions
/// see the whole prefix and earlier non-prefix positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tok: Vec<u32>,
    pub loc: Vec<u32>,
    pub qry: Vec<u32>,
    pub seg: Vec<u8>,
    pub prefix: usize,
    /// Scored positions.
    pub targets: Vec<usize>,
    /// Target token per scored position (distributional variants).
    pub target_tokens: Vec<u32>,
    /// Target patch pixels in `[0, 1]`, `out_dim` per scored position (deterministic variant).
    pub target_pixels: Vec<f32>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.tok.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tok.is_empty()
    }

    fn push(&mut self, tok: u32, loc: u32, qry: u32, seg: u8) {
        self.tok.push(tok);
        self.loc.push(loc);
        self.qry.push(qry);
        self.seg.push(seg);
    }

    /// Frame-1 tokens and revealed frame-2 tokens, the shared context of every variant.
    pub(crate) fn context(cfg: &ModelConfig, f1: &TokenGrid, f2: &TokenGrid, mask: &MaskSpec) -> Result<Sequence> {
        let n = cfg.cells();
        if f1.len() != n || f2.len() != n || mask.cells != n || [f1.gh, f1.gw] != cfg.grid {
            return Err(Error::dim(format!(
                "token grids {}x{} / {} cells do not match model grid {:?}",
                f1.gh,
                f1.gw,
                f2.len(),
                cfg.grid
            )));
        }
        let mut s = Sequence {
            tok: Vec::with_capacity(2 * n),
            loc: Vec::with_capacity(2 * n),
            qry: Vec::with_capacity(2 * n),
            seg: Vec::with_capacity(2 * n),
            prefix: 0,
            targets: Vec::new(),
            target_tokens: Vec::new(),
            target_pixels: Vec::new(),
        };
        for (i, &t) in f1.tokens.iter().enumerate() {
            s.push(t, i as u32, NO_LOC, SEG_FRAME1);
        }
        for &i in &mask.revealed {
            s.push(f2.tokens[i], i as u32, NO_LOC, SEG_REVEALED);
        }
        s.prefix = s.len();
        Ok(s)
    }

    /// Teacher-forced decode sequence: step `k` carries the token decoded at
    /// step `k-1` at its location plus the query for `order[k]`.
    pub fn distributional(
        cfg: &ModelConfig,
        f1: &TokenGrid,
        f2: &TokenGrid,
        mask: &MaskSpec,
        order: &DecodeOrder,
    ) -> Result<Sequence> {
        if !cfg.variant.is_distributional() {
            return Err(Error::config("decode sequences need a distributional variant"));
        }
        if mask.mode != super::RevealMode::OverwriteDuringRollout {
            order.validate(mask)?;
        }
        let mut s = Sequence::context(cfg, f1, f2, mask)?;
        let mut prev: Option<usize> = None;
        for &h in &order.order {
            match prev {
                None => s.push(cfg.bos(), NO_LOC, h as u32, SEG_DECODE),
                Some(p) => s.push(f2.tokens[p], p as u32, h as u32, SEG_DECODE),
            }
            s.targets.push(s.len() - 1);
            s.target_tokens.push(f2.tokens[h]);
            prev = Some(h);
        }
        Ok(s)
    }

    /// Single-pass sequence for the deterministic variant: every hidden cell is
    /// a MASK token at its location; all positions attend to all others.
    pub fn deterministic(
        cfg: &ModelConfig,
        f1: &TokenGrid,
        f2: &TokenGrid,
        f2_pixels: Option<&Frame>,
        mask: &MaskSpec,
    ) -> Result<Sequence> {
        if cfg.variant != Variant::DeterministicL2 {
            return Err(Error::config("pixel sequences need the deterministic variant"));
        }
        let mut s = Sequence::context(cfg, f1, f2, mask)?;
        let p = cfg.patch;
        let mut buf = vec![0f32; cfg.out_dim()];
        for h in mask.hidden() {
            s.push(cfg.mask_token(), h as u32, NO_LOC, SEG_DECODE);
            s.targets.push(s.len() - 1);
            if let Some(frame) = f2_pixels {
                if frame.width() != cfg.grid[1] * p || frame.height() != cfg.grid[0] * p {
                    return Err(Error::dim("target frame does not match the model grid"));
                }
                read_patch(frame, p, h % cfg.grid[1], h / cfg.grid[1], &mut buf);
                s.target_pixels.extend(buf.iter().map(|v| v / 255.0));
            }
        }
        s.prefix = s.len();
        Ok(s)
    }

    /// Highest position index row `i` may attend to, exclusive.
    #[inline]
    pub(crate) fn attend_limit(&self, i: usize) -> usize {
        self.prefix.max(i + 1)
    }
}

/// Sum of the embedding rows for every position.
pub(crate) fn embed<T: Scalar>(params: &Params<T>, cfg: &ModelConfig, seq: &Sequence, x: &mut [T]) {
    let d = cfg.model_dim;
    let (tok, loc, qry, seg) = (params.t(TOK), params.t(LOC), params.t(QRY), params.t(SEG));
    for i in 0..seq.len() {
        let row = &mut x[i * d..(i + 1) * d];
        let t = seq.tok[i] as usize;
        row.copy_from_slice(&tok[t * d..(t + 1) * d]);
        let s = seq.seg[i] as usize;
        for (r, &v) in row.iter_mut().zip(&seg[s * d..(s + 1) * d]) {
            *r += v;
        }
        if seq.loc[i] != NO_LOC {
            let l = seq.loc[i] as usize;
            for (r, &v) in row.iter_mut().zip(&loc[l * d..(l + 1) * d]) {
                *r += v;
            }
        }
        if seq.qry[i] != NO_LOC {
            let q = seq.qry[i] as usize;
            for (r, &v) in row.iter_mut().zip(&qry[q * d..(q + 1) * d]) {
                *r += v;
            }
        }
    }
}

struct LayerActs<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    ln1_y: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    ln2_y: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

struct Acts<T> {
    layers: Vec<LayerActs<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    head_in: Vec<T>,
    out: Vec<T>,
}

fn attention_forward<T: Scalar>(cfg: &ModelConfig, seq: &Sequence, qkv: &[T], probs: &mut [T], attn: &mut [T]) {
    let (d, dh, l) = (cfg.model_dim, cfg.head_dim(), seq.len());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    for h in 0..cfg.heads {
        let p = &mut probs[h * l * l..(h + 1) * l * l];
        T::gemm(
            l,
            dh,
            l,
            scale,
            &qkv[h * dh..],
            3 * d as isize,
            1,
            &qkv[d + h * dh..],
            1,
            3 * d as isize,
            T::ZERO,
            p,
            l as isize,
            1,
        );
        for i in 0..l {
            let lim = seq.attend_limit(i);
            let row = &mut p[i * l..(i + 1) * l];
            crate::nn::ops::softmax_inplace(&mut row[..lim]);
            row[lim..].iter_mut().for_each(|v| *v = T::ZERO);
        }
        T::gemm(
            l,
            l,
            dh,
            T::ONE,
            p,
            l as isize,
            1,
            &qkv[2 * d + h * dh..],
            3 * d as isize,
            1,
            T::ZERO,
            &mut attn[h * dh..],
            d as isize,
            1,
        );
    }
}

fn attention_backward<T: Scalar>(
    cfg: &ModelConfig,
    seq: &Sequence,
    qkv: &[T],
    probs: &[T],
    d_attn: &[T],
    d_qkv: &mut [T],
    scratch: &mut [T],
) {
    let (d, dh, l) = (cfg.model_dim, cfg.head_dim(), seq.len());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let s3 = 3 * d as isize;
    for h in 0..cfg.heads {
        let p = &probs[h * l * l..(h + 1) * l * l];
        let dp = &mut scratch[..l * l];
        // dP = dO V^T
        T::gemm(l, dh, l, T::ONE, &d_attn[h * dh..], d as isize, 1, &qkv[2 * d + h * dh..], 1, s3, T::ZERO, dp, l as isize, 1);
        // dV = P^T dO
        T::gemm(l, l, dh, T::ONE, p, 1, l as isize, &d_attn[h * dh..], d as isize, 1, T::ZERO, &mut d_qkv[2 * d + h * dh..], s3, 1);
        for i in 0..l {
            let lim = seq.attend_limit(i);
            let pr = &p[i * l..i * l + lim];
            let dr = &mut dp[i * l..(i + 1) * l];
            let mut dot = T::ZERO;
            for j in 0..lim {
                dot += pr[j] * dr[j];
            }
            for j in 0..lim {
                dr[j] = pr[j] * (dr[j] - dot) * scale;
            }
            dr[lim..].iter_mut().for_each(|v| *v = T::ZERO);
        }
        let ds = &scratch[..l * l];
        // dQ = dS K
        T::gemm(l, l, dh, T::ONE, ds, l as isize, 1, &qkv[d + h * dh..], s3, 1, T::ZERO, &mut d_qkv[h * dh..], s3, 1);
        // dK = dS^T Q
        T::gemm(l, l, dh, T::ONE, ds, 1, l as isize, &qkv[h * dh..], s3, 1, T::ZERO, &mut d_qkv[d + h * dh..], s3, 1);
    }
}

fn forward<T: Scalar>(model: &Model<T>, seq: &Sequence) -> Acts<T> {
    let cfg = &model.config;
    let p = &model.params;
    let (d, l, hid) = (cfg.model_dim, seq.len(), cfg.hidden_dim());
    let mut x = vec![T::ZERO; l * d];
    embed(p, cfg, seq, &mut x);
    let mut layers = Vec::with_capacity(cfg.layers);
    for li in 0..cfg.layers {
        let b = layer_base(li);
        let mut a = LayerActs {
            ln1_xhat: vec![T::ZERO; l * d],
            ln1_rstd: vec![T::ZERO; l],
            ln1_y: vec![T::ZERO; l * d],
            qkv: vec![T::ZERO; l * 3 * d],
            probs: vec![T::ZERO; cfg.heads * l * l],
            attn: vec![T::ZERO; l * d],
            ln2_xhat: vec![T::ZERO; l * d],
            ln2_rstd: vec![T::ZERO; l],
            ln2_y: vec![T::ZERO; l * d],
            h_pre: vec![T::ZERO; l * hid],
            h_act: vec![T::ZERO; l * hid],
        };
        layer_norm(&x, p.t(b + LN1_G), p.t(b + LN1_B), &mut a.ln1_y, &mut a.ln1_xhat, &mut a.ln1_rstd, d);
        linear(&a.ln1_y, p.t(b + W_QKV), p.t(b + B_QKV), &mut a.qkv, l, d, 3 * d);
        attention_forward(cfg, seq, &a.qkv, &mut a.probs, &mut a.attn);
        let mut proj = vec![T::ZERO; l * d];
        linear(&a.attn, p.t(b + W_O), p.t(b + B_O), &mut proj, l, d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += *pv;
        }
        layer_norm(&x, p.t(b + LN2_G), p.t(b + LN2_B), &mut a.ln2_y, &mut a.ln2_xhat, &mut a.ln2_rstd, d);
        linear(&a.ln2_y, p.t(b + W_1), p.t(b + B_1), &mut a.h_pre, l, d, hid);
        for (o, &v) in a.h_act.iter_mut().zip(&a.h_pre) {
            *o = gelu(v);
        }
        linear(&a.h_act, p.t(b + W_2), p.t(b + B_2), &mut proj, l, hid, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += *pv;
        }
        layers.push(a);
    }
    let f = final_base(cfg);
    let (mut lnf_xhat, mut lnf_rstd) = (Vec::new(), Vec::new());
    let y = if cfg.final_norm {
        let mut y = vec![T::ZERO; l * d];
        lnf_xhat = vec![T::ZERO; l * d];
        lnf_rstd = vec![T::ZERO; l];
        layer_norm(&x, p.t(f), p.t(f + 1), &mut y, &mut lnf_xhat, &mut lnf_rstd, d);
        y
    } else {
        x
    };
    let nt = seq.targets.len();
    let mut head_in = vec![T::ZERO; nt * d];
    for (r, &pos) in seq.targets.iter().enumerate() {
        head_in[r * d..(r + 1) * d].copy_from_slice(&y[pos * d..(pos + 1) * d]);
    }
    let od = cfg.out_dim();
    let mut out = vec![T::ZERO; nt * od];
    linear(&head_in, p.t(f + 2), p.t(f + 3), &mut out, nt, d, od);
    Acts {
        layers,
        lnf_xhat,
        lnf_rstd,
        head_in,
        out,
    }
}

/// Head outputs (logits or pixels) for every scored position, `targets.len() x out_dim`.
pub fn outputs<T: Scalar>(model: &Model<T>, seq: &Sequence) -> Vec<T> {
    forward(model, seq).out
}

/// Per-target losses from head outputs, plus the output gradient of their sum when requested.
fn target_losses<T: Scalar>(cfg: &ModelConfig, seq: &Sequence, out: &[T], mut grad: Option<&mut [T]>) -> Result<f64> {
    let od = cfg.out_dim();
    let mut total = 0.0;
    if cfg.variant.is_distributional() {
        if seq.target_tokens.len() != seq.targets.len() {
            return Err(Error::dim("sequence lacks target tokens"));
        }
        let mut ls = vec![T::ZERO; od];
        for (r, &tok) in seq.target_tokens.iter().enumerate() {
            let row = &out[r * od..(r + 1) * od];
            log_softmax(row, &mut ls);
            total -= ls[tok as usize].to_f64();
            if let Some(g) = grad.as_deref_mut() {
                let gr = &mut g[r * od..(r + 1) * od];
                for (gv, &lv) in gr.iter_mut().zip(&ls) {
                    *gv = lv.exp();
                }
                gr[tok as usize] -= T::ONE;
            }
        }
    } else {
        if seq.target_pixels.len() != seq.targets.len() * od {
            return Err(Error::dim("sequence lacks target pixels"));
        }
        let inv = 1.0 / od as f64;
        for (i, (&o, &t)) in out.iter().zip(&seq.target_pixels).enumerate() {
            let e = o.to_f64() - t as f64;
            total += e * e * inv;
            if let Some(g) = grad.as_deref_mut() {
                g[i] = T::from_f64(2.0 * e * inv);
            }
        }
    }
    Ok(total)
}

fn pair_mut<T>(p: &mut Params<T>, a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a < b);
    let (lo, hi) = p.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

/// Summed per-target loss of one sequence; adds `scale * d(sum)/d(theta)` into `grads`.
pub fn loss_and_grad<T: Scalar>(model: &Model<T>, seq: &Sequence, scale: f64, grads: &mut Params<T>) -> Result<f64> {
    let cfg = &model.config;
    let p = &model.params;
    let (d, l, hid, od) = (cfg.model_dim, seq.len(), cfg.hidden_dim(), cfg.out_dim());
    let acts = forward(model, seq);
    let nt = seq.targets.len();
    let mut d_out = vec![T::ZERO; nt * od];
    let loss = target_losses(cfg, seq, &acts.out, Some(&mut d_out))?;
    let sc = T::from_f64(scale);
    d_out.iter_mut().for_each(|v| *v *= sc);

    let f = final_base(cfg);
    let mut d_head_in = vec![T::ZERO; nt * d];
    {
        let (dw, db) = pair_mut(grads, f + 2, f + 3);
        linear_backward(&acts.head_in, p.t(f + 2), &d_out, dw, db, Some(&mut d_head_in), nt, d, od);
    }
    let mut dy = vec![T::ZERO; l * d];
    for (r, &pos) in seq.targets.iter().enumerate() {
        for j in 0..d {
            dy[pos * d + j] += d_head_in[r * d + j];
        }
    }
    let mut dx = if cfg.final_norm {
        let mut dx = vec![T::ZERO; l * d];
        let (dg, db) = pair_mut(grads, f, f + 1);
        layer_norm_backward(&dy, &acts.lnf_xhat, &acts.lnf_rstd, p.t(f), dg, db, &mut dx, d);
        dx
    } else {
        dy
    };

    let mut d_h = vec![T::ZERO; l * hid];
    let mut d_ln = vec![T::ZERO; l * d];
    let mut d_attn = vec![T::ZERO; l * d];
    let mut d_qkv = vec![T::ZERO; l * 3 * d];
    let mut scratch = vec![T::ZERO; l * l];
    for li in (0..cfg.layers).rev() {
        let b = layer_base(li);
        let a = &acts.layers[li];
        // MLP branch
        {
            let (dw, db) = pair_mut(grads, b + W_2, b + B_2);
            linear_backward(&a.h_act, p.t(b + W_2), &dx, dw, db, Some(&mut d_h), l, hid, d);
        }
        for (g, &v) in d_h.iter_mut().zip(&a.h_pre) {
            *g *= gelu_grad(v);
        }
        {
            let (dw, db) = pair_mut(grads, b + W_1, b + B_1);
            linear_backward(&a.ln2_y, p.t(b + W_1), &d_h, dw, db, Some(&mut d_ln), l, d, hid);
        }
        {
            let (dg, db) = pair_mut(grads, b + LN2_G, b + LN2_B);
            layer_norm_backward(&d_ln, &a.ln2_xhat, &a.ln2_rstd, p.t(b + LN2_G), dg, db, &mut dx, d);
        }
        // attention branch
        {
            let (dw, db) = pair_mut(grads, b + W_O, b + B_O);
            linear_backward(&a.attn, p.t(b + W_O), &dx, dw, db, Some(&mut d_attn), l, d, d);
        }
        attention_backward(cfg, seq, &a.qkv, &a.probs, &d_attn, &mut d_qkv, &mut scratch);
        {
            let (dw, db) = pair_mut(grads, b + W_QKV, b + B_QKV);
            linear_backward(&a.ln1_y, p.t(b + W_QKV), &d_qkv, dw, db, Some(&mut d_ln), l, d, 3 * d);
        }
        {
            let (dg, db) = pair_mut(grads, b + LN1_G, b + LN1_B);
            layer_norm_backward(&d_ln, &a.ln1_xhat, &a.ln1_rstd, p.t(b + LN1_G), dg, db, &mut dx, d);
        }
    }

    // embeddings
    for i in 0..l {
        let row = &dx[i * d..(i + 1) * d];
        let add = |t: &mut [T], r: usize| {
            for (g, &v) in t[r * d..(r + 1) * d].iter_mut().zip(row) {
                *g += v;
            }
        };
        add(grads.t_mut(TOK), seq.tok[i] as usize);
        add(grads.t_mut(SEG), seq.seg[i] as usize);
        if seq.loc[i] != NO_LOC {
            add(grads.t_mut(LOC), seq.loc[i] as usize);
        }
        if seq.qry[i] != NO_LOC {
            add(grads.t_mut(QRY), seq.qry[i] as usize);
        }
    }
    Ok(loss)
}

/// Mean per-target loss over a batch of sequences (no gradients).
pub fn batch_loss<T: Scalar>(model: &Model<T>, seqs: &[Sequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        let acts = forward(model, s);
        total += target_losses(&model.config, s, &acts.out, None)?;
        count += s.targets.len();
    }
    if count == 0 {
        return Err(Error::Data("batch has no scored positions".into()));
    }
    Ok(total / count as f64)
}
