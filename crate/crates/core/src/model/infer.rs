//! Incremental inference with per-sequence key/value caches.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::forward::{Sequence, NO_LOC};
use super::mask::{DecodeOrder, MaskSpec, RevealMode};
use super::*;
use crate::nn::ops::{gelu, layer_norm_infer, linear, softmax_inplace};
use crate::tokenizer::TokenGrid;

/// Token sampling used during rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub temperature: f64,
    /// 0 keeps the full distribution.
    pub top_k: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 1.0,
            top_k: 50,
        }
    }
}

/// Per-cell categorical logits; cells without a prediction are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    pub gh: usize,
    pub gw: usize,
    pub k: usize,
    pub logits: Vec<f32>,
    pub valid: Vec<bool>,
}

impl LogitsGrid {
    pub fn empty(gh: usize, gw: usize, k: usize) -> Self {
        LogitsGrid {
            gh,
            gw,
            k,
            logits: vec![0.0; gh * gw * k],
            valid: vec![false; gh * gw],
        }
    }

    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }

    pub fn row(&self, cell: usize) -> &[f32] {
        &self.logits[cell * self.k..(cell + 1) * self.k]
    }

    pub fn row_mut(&mut self, cell: usize) -> &mut [f32] {
        &mut self.logits[cell * self.k..(cell + 1) * self.k]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub logits: LogitsGrid,
    /// Revealed cells hold the given tokens, hidden cells the sampled ones.
    pub predicted: TokenGrid,
}

/// Inputs of one rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutJob<'a> {
    pub f1: &'a TokenGrid,
    /// Only revealed and overwritten cells are read.
    pub f2: &'a TokenGrid,
    pub mask: &'a MaskSpec,
    pub order: &'a DecodeOrder,
    pub sampling_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attend {
    /// New rows see the whole cache and each other.
    Block,
    /// New row `i` sees the cache and new rows up to `i`.
    Causal,
    /// New row `i` sees the old cache and itself; rows are dropped afterwards.
    Isolated,
}

struct Cache<T> {
    len: usize,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Cache<T> {
    fn new(layers: usize, cap: usize) -> Self {
        Cache {
            len: 0,
            k: (0..layers).map(|_| Vec::with_capacity(cap)).collect(),
            v: (0..layers).map(|_| Vec::with_capacity(cap)).collect(),
        }
    }
}

type Row = (u32, u32, u32, u8);

fn rows_of(seq: &Sequence) -> Vec<Row> {
    (0..seq.len())
        .map(|i| (seq.tok[i], seq.loc[i], seq.qry[i], seq.seg[i]))
        .collect()
}

impl<T: Scalar> Model<T> {
    fn embed_rows(&self, rows: &[Row]) -> Vec<T> {
        let s = Sequence {
            tok: rows.iter().map(|r| r.0).collect(),
            loc: rows.iter().map(|r| r.1).collect(),
            qry: rows.iter().map(|r| r.2).collect(),
            seg: rows.iter().map(|r| r.3).collect(),
            prefix: 0,
            targets: Vec::new(),
            target_tokens: Vec::new(),
            target_pixels: Vec::new(),
        };
        let mut x = vec![T::ZERO; rows.len() * self.config.model_dim];
        super::forward::embed(&self.params, &self.config, &s, &mut x);
        x
    }

    /// Attention of `n` query rows (`qkv` rows of width 3d) against one cache
    /// whose last `n` entries are the new rows.
    fn attend(&self, layer: usize, cache: &Cache<T>, qkv: &[T], n: usize, mode: Attend, out: &mut [T]) {
        let cfg = &self.config;
        let (d, dh) = (cfg.model_dim, cfg.head_dim());
        let ctx = cache.len;
        let base = ctx - n;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut s = vec![T::ZERO; n * ctx];
        for h in 0..cfg.heads {
            T::gemm(
                n,
                dh,
                ctx,
                scale,
                &qkv[h * dh..],
                3 * d as isize,
                1,
                &cache.k[layer][h * dh..],
                1,
                d as isize,
                T::ZERO,
                &mut s,
                ctx as isize,
                1,
            );
            for i in 0..n {
                let row = &mut s[i * ctx..(i + 1) * ctx];
                match mode {
                    Attend::Block => softmax_inplace(row),
                    Attend::Causal => {
                        let lim = base + i + 1;
                        softmax_inplace(&mut row[..lim]);
                        row[lim..].iter_mut().for_each(|v| *v = T::ZERO);
                    }
                    Attend::Isolated => {
                        let own = row[base + i];
                        row[base..].iter_mut().for_each(|v| *v = T::ZERO);
                        let mut m = own;
                        for &v in &row[..base] {
                            m = m.max(v);
                        }
                        let mut sum = (own - m).exp();
                        for v in &mut row[..base] {
                            *v = (*v - m).exp();
                            sum += *v;
                        }
                        let inv = T::ONE / sum;
                        row[..base].iter_mut().for_each(|v| *v *= inv);
                        row[base + i] = (own - m).exp() * inv;
                    }
                }
            }
            T::gemm(
                n,
                ctx,
                dh,
                T::ONE,
                &s,
                ctx as isize,
                1,
                &cache.v[layer][h * dh..],
                d as isize,
                1,
                T::ZERO,
                &mut out[h * dh..],
                d as isize,
                1,
            );
        }
    }

    /// Runs new rows through every layer. `groups[g] = (cache index, row count)`
    /// splits the rows of `x` between caches, in order. Returns the final
    /// hidden states (after the output norm).
    fn run(&self, caches: &mut [Cache<T>], groups: &[(usize, usize)], mut x: Vec<T>, mode: Attend) -> Vec<T> {
        let cfg = &self.config;
        let p = &self.params;
        let (d, hid) = (cfg.model_dim, cfg.hidden_dim());
        let n = x.len() / d;
        let mut h = vec![T::ZERO; n * d];
        let mut qkv = vec![T::ZERO; n * 3 * d];
        let mut att = vec![T::ZERO; n * d];
        let mut proj = vec![T::ZERO; n * d];
        let mut mid = vec![T::ZERO; n * hid];
        for l in 0..cfg.layers {
            let b = layer_base(l);
            layer_norm_infer(&x, p.t(b + LN1_G), p.t(b + LN1_B), &mut h, d);
            linear(&h, p.t(b + W_QKV), p.t(b + B_QKV), &mut qkv, n, d, 3 * d);
            let mut r0 = 0;
            for &(ci, cnt) in groups {
                let c = &mut caches[ci];
                for r in r0..r0 + cnt {
                    c.k[l].extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                    c.v[l].extend_from_slice(&qkv[r * 3 * d + 2 * d..(r + 1) * 3 * d]);
                }
                c.len = c.k[l].len() / d;
                self.attend(l, c, &qkv[r0 * 3 * d..], cnt, mode, &mut att[r0 * d..(r0 + cnt) * d]);
                if mode == Attend::Isolated {
                    let keep = (c.len - cnt) * d;
                    c.k[l].truncate(keep);
                    c.v[l].truncate(keep);
                    c.len -= cnt;
                }
                r0 += cnt;
            }
            linear(&att, p.t(b + W_O), p.t(b + B_O), &mut proj, n, d, d);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            layer_norm_infer(&x, p.t(b + LN2_G), p.t(b + LN2_B), &mut h, d);
            linear(&h, p.t(b + W_1), p.t(b + B_1), &mut mid, n, d, hid);
            mid.iter_mut().for_each(|v| *v = gelu(*v));
            linear(&mid, p.t(b + W_2), p.t(b + B_2), &mut proj, n, hid, d);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
        if cfg.layers == 0 {
            // Caches still track positions for consistency.
            for &(ci, cnt) in groups {
                if mode != Attend::Isolated {
                    caches[ci].len += cnt;
                }
            }
        }
        if cfg.final_norm {
            let f = final_base(cfg);
            layer_norm_infer(&x, p.t(f), p.t(f + 1), &mut h, d);
            h
        } else {
            x
        }
    }

    fn head(&self, hidden: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let (d, od) = (cfg.model_dim, cfg.out_dim());
        let n = hidden.len() / d;
        let f = final_base(cfg);
        let mut out = vec![T::ZERO; n * od];
        linear(hidden, self.params.t(f + 2), self.params.t(f + 3), &mut out, n, d, od);
        out
    }

    fn check_job(&self, job: &RolloutJob) -> Result<()> {
        let cfg = &self.config;
        let mask = job.mask;
        match cfg.variant {
            Variant::DeterministicL2 => {
                return Err(Error::config("the deterministic variant has no token rollout"));
            }
            Variant::DistributionalRaster => {
                if mask.mode == RevealMode::RandomSubset {
                    return Err(Error::config(
                        "the raster variant only conditions on raster_prefix or full masks",
                    ));
                }
                if job.order.order.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::config("the raster variant decodes in raster order only"));
                }
            }
            Variant::DistributionalRandomAccess => {}
        }
        if mask.mode == RevealMode::OverwriteDuringRollout {
            let mut sorted = job.order.order.clone();
            sorted.sort_unstable();
            if sorted != (0..mask.cells).collect::<Vec<_>>() {
                return Err(Error::config("overwrite rollouts must visit every cell"));
            }
        } else {
            job.order.validate(mask)?;
        }
        Ok(())
    }

    fn prefill(&self, cache: &mut Cache<T>, ctx: &Sequence) {
        let x = self.embed_rows(&rows_of(ctx));
        self.run(std::slice::from_mut(cache), &[(0, ctx.len())], x, Attend::Block);
    }

    /// Sequential rollout of several jobs at once. Jobs are independent; the
    /// batch only shares matrix products.
    pub fn rollout_batch(&self, jobs: &[RolloutJob], sampling: &Sampling) -> Result<Vec<Rollout>> {
        let cfg = &self.config;
        let (gh, gw, k) = (cfg.grid[0], cfg.grid[1], cfg.vocab);
        let mut caches = Vec::with_capacity(jobs.len());
        let mut outs = Vec::with_capacity(jobs.len());
        let mut rngs = Vec::with_capacity(jobs.len());
        let mut fed: Vec<Vec<u32>> = Vec::with_capacity(jobs.len());
        for job in jobs {
            self.check_job(job)?;
            let ctx = Sequence::context(cfg, job.f1, job.f2, job.mask)?;
            let mut cache = Cache::new(cfg.layers, 2 * cfg.cells() * cfg.model_dim);
            self.prefill(&mut cache, &ctx);
            caches.push(cache);
            let mut predicted = job.f2.clone();
            for &h in &job.order.order {
                predicted.tokens[h] = 0;
            }
            outs.push(Rollout {
                logits: LogitsGrid::empty(gh, gw, k),
                predicted,
            });
            rngs.push(seed::rng(job.sampling_seed, Stream::Sampling, 0));
            fed.push(Vec::with_capacity(job.order.order.len()));
        }
        let steps = jobs.iter().map(|j| j.order.order.len()).max().unwrap_or(0);
        for s in 0..steps {
            let active: Vec<usize> = (0..jobs.len()).filter(|&j| s < jobs[j].order.order.len()).collect();
            let rows: Vec<Row> = active
                .iter()
                .map(|&j| {
                    let ord = &jobs[j].order.order;
                    if s == 0 {
                        (cfg.bos(), NO_LOC, ord[0] as u32, SEG_DECODE)
                    } else {
                        (fed[j][s - 1], ord[s - 1] as u32, ord[s] as u32, SEG_DECODE)
                    }
                })
                .collect();
            let groups: Vec<(usize, usize)> = active.iter().map(|&j| (j, 1)).collect();
            let x = self.embed_rows(&rows);
            let hidden = self.run(&mut caches, &groups, x, Attend::Causal);
            let logits = self.head(&hidden);
            for (r, &j) in active.iter().enumerate() {
                let cell = jobs[j].order.order[s];
                let row = &logits[r * k..(r + 1) * k];
                let out = &mut outs[j];
                for (dst, &v) in out.logits.row_mut(cell).iter_mut().zip(row) {
                    *dst = v.to_f64() as f32;
                }
                out.logits.valid[cell] = true;
                let u: f64 = rngs[j].random();
                let mut tok = sample_token(out.logits.row(cell), sampling, u);
                if jobs[j].mask.overwrite.binary_search(&cell).is_ok() {
                    tok = jobs[j].f2.tokens[cell];
                }
                out.predicted.tokens[cell] = tok;
                fed[j].push(tok);
            }
        }
        Ok(outs)
    }

    pub fn rollout(&self, job: &RolloutJob, sampling: &Sampling) -> Result<Rollout> {
        Ok(self.rollout_batch(std::slice::from_ref(job), sampling)?.remove(0))
    }

    /// Predicts every hidden cell in one pass, each conditioned only on the
    /// context (no sequential feedback).
    pub fn predict_parallel(
        &self,
        f1: &TokenGrid,
        f2: &TokenGrid,
        mask: &MaskSpec,
        sampling: &Sampling,
        sampling_seed: u64,
    ) -> Result<Rollout> {
        let cfg = &self.config;
        if !cfg.variant.is_distributional() {
            return Err(Error::config("the deterministic variant has no token rollout"));
        }
        let hidden_cells = mask.hidden();
        let order = DecodeOrder::raster(mask);
        self.check_job(&RolloutJob {
            f1,
            f2,
            mask,
            order: &order,
            sampling_seed,
        })?;
        let ctx = Sequence::context(cfg, f1, f2, mask)?;
        let mut caches = vec![Cache::new(cfg.layers, 2 * cfg.cells() * cfg.model_dim)];
        self.prefill(&mut caches[0], &ctx);
        let rows: Vec<Row> = hidden_cells
            .iter()
            .map(|&h| (cfg.bos(), NO_LOC, h as u32, SEG_DECODE))
            .collect();
        let x = self.embed_rows(&rows);
        let hidden = self.run(&mut caches, &[(0, rows.len())], x, Attend::Isolated);
        let logits = self.head(&hidden);
        let k = cfg.vocab;
        let mut out = Rollout {
            logits: LogitsGrid::empty(cfg.grid[0], cfg.grid[1], k),
            predicted: f2.clone(),
        };
        let mut rng = seed::rng(sampling_seed, Stream::Sampling, 0);
        for (r, &cell) in hidden_cells.iter().enumerate() {
            for (dst, &v) in out.logits.row_mut(cell).iter_mut().zip(&logits[r * k..(r + 1) * k]) {
                *dst = v.to_f64() as f32;
            }
            out.logits.valid[cell] = true;
            let u: f64 = rng.random();
            out.predicted.tokens[cell] = sample_token(out.logits.row(cell), sampling, u);
        }
        Ok(out)
    }

    /// Deterministic variant: pixel predictions in `[0, 1]` for every hidden
    /// cell (ascending), `out_dim` values each.
    pub fn predict_pixels(&self, f1: &TokenGrid, f2: &TokenGrid, mask: &MaskSpec) -> Result<(Vec<usize>, Vec<f32>)> {
        let cfg = &self.config;
        let seq = Sequence::deterministic(cfg, f1, f2, None, mask)?;
        let mut caches = vec![Cache::new(cfg.layers, seq.len() * cfg.model_dim)];
        let x = self.embed_rows(&rows_of(&seq));
        let hidden = self.run(&mut caches, &[(0, seq.len())], x, Attend::Block);
        let d = cfg.model_dim;
        let start = seq.targets.first().copied().unwrap_or(seq.len());
        let out = self.head(&hidden[start * d..]);
        Ok((mask.hidden(), out.iter().map(|v| v.to_f64() as f32).collect()))
    }
}

/// Draws a token from `softmax(logits / temperature)` restricted to the
/// `top_k` largest logits (ties to the lower index), by inverse CDF at `u`.
pub fn sample_token(logits: &[f32], sampling: &Sampling, u: f64) -> u32 {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if sampling.temperature <= 0.0 {
        return idx[0] as u32;
    }
    let k = if sampling.top_k == 0 {
        logits.len()
    } else {
        sampling.top_k.min(logits.len())
    };
    let top = &idx[..k];
    let m = logits[top[0]] as f64;
    let w: Vec<f64> = top
        .iter()
        .map(|&i| ((logits[i] as f64 - m) / sampling.temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (&i, &wi) in top.iter().zip(&w) {
        acc += wi;
        if target < acc {
            return i as u32;
        }
    }
    top[k - 1] as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_respects_top_k_and_u() {
        let logits = [0.0f32, 3.0, 1.0, 3.0];
        let s = Sampling {
            temperature: 1.0,
            top_k: 1,
        };
        assert_eq!(sample_token(&logits, &s, 0.99), 1);
        let greedy = Sampling {
            temperature: 0.0,
            top_k: 0,
        };
        assert_eq!(sample_token(&logits, &greedy, 0.5), 1);
        let two = Sampling {
            temperature: 1.0,
            top_k: 2,
        };
        assert_eq!(sample_token(&logits, &two, 0.25), 1);
        assert_eq!(sample_token(&logits, &two, 0.75), 3);
    }
}
