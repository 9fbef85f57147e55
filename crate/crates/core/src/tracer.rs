//! Perturb-and-track flow readout: inject a white bump into frame 1, run the
//! conditioned predictor on the clean and the perturbed frame with the same
//! mask, order and sampling seed, and locate where the two predictions differ.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::model::{DecodeOrder, LogitsGrid, MaskSpec, Model, RevealMode, RolloutJob, Sampling, Variant};
use crate::seed::{self, Stream};
use crate::tokenizer::{Codebook, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// `[x, y]` in pixels; pixel centres sit on integer coordinates.
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

impl PerturbSpec {
    pub fn at(x: f64, y: f64) -> Self {
        PerturbSpec {
            center: [x, y],
            sigma: 2.0,
            amplitude: 255.0,
        }
    }
}

/// Adds `amplitude * exp(-|x - c|^2 / (2 sigma^2))` to every channel, clamped
/// to `[0, 255]`.
pub fn inject_perturbation(frame: &Frame, p: &PerturbSpec) -> Result<Frame> {
    if !(p.sigma > 0.0) || !p.amplitude.is_finite() {
        return Err(Error::config("perturbation needs sigma > 0 and a finite amplitude"));
    }
    let [cx, cy] = p.center;
    if !(cx >= 0.0 && cy >= 0.0 && cx <= (frame.width() - 1) as f64 && cy <= (frame.height() - 1) as f64) {
        return Err(Error::config(format!(
            "perturbation centre ({cx}, {cy}) outside the {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let mut out = frame.clone();
    if p.amplitude == 0.0 {
        return Ok(out);
    }
    let inv = 1.0 / (2.0 * p.sigma * p.sigma);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let add = p.amplitude * (-d2 * inv).exp();
            let rgb = frame.get(x, y).map(|c| (c as f64 + add).round().clamp(0.0, 255.0) as u8);
            out.set(x, y, rgb);
        }
    }
    Ok(out)
}

/// Non-negative per-cell divergence with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMap {
    pub gh: usize,
    pub gw: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Per-cell KL divergence, in nats.
pub type KlMap = PatchMap;

impl PatchMap {
    pub fn zeros(gh: usize, gw: usize) -> Self {
        PatchMap {
            gh,
            gw,
            values: vec![0.0; gh * gw],
            valid: vec![false; gh * gw],
        }
    }

    /// Highest valid cell, ties to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in 0..self.values.len() {
            if self.valid[i] && best.is_none_or(|b| self.values[i] > self.values[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// `KL(softmax(clean) || softmax(pert))` for every cell valid in both grids.
pub fn kl_map(clean: &LogitsGrid, pert: &LogitsGrid) -> Result<KlMap> {
    if (clean.gh, clean.gw, clean.k) != (pert.gh, pert.gw, pert.k) {
        return Err(Error::dim("logit grids differ in shape"));
    }
    if clean.valid != pert.valid {
        return Err(Error::dim("logit grids differ in validity"));
    }
    let mut map = PatchMap::zeros(clean.gh, clean.gw);
    let (mut lp, mut lq) = (vec![0.0f64; clean.k], vec![0.0f64; clean.k]);
    for cell in 0..clean.cells() {
        if !clean.valid[cell] {
            continue;
        }
        log_softmax64(clean.row(cell), &mut lp);
        log_softmax64(pert.row(cell), &mut lq);
        let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
        if !kl.is_finite() {
            return Err(Error::Numerical(format!("KL divergence of cell {cell} is {kl}")));
        }
        map.values[cell] = kl.max(0.0);
        map.valid[cell] = true;
    }
    Ok(map)
}

fn log_softmax64(row: &[f32], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let s: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
    let lse = m + s.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v as f64 - lse;
    }
}

/// Mean absolute channel difference per `patch x patch` cell.
pub fn rgb_diff_map(a: &Frame, b: &Frame, patch: usize) -> Result<PatchMap> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::dim("frames differ in size"));
    }
    if patch == 0 || a.width() % patch != 0 || a.height() % patch != 0 {
        return Err(Error::dim(format!("{}x{} frame is not a grid of {patch}-pixel patches", a.width(), a.height())));
    }
    let (gh, gw) = (a.height() / patch, a.width() / patch);
    let mut map = PatchMap::zeros(gh, gw);
    let norm = (patch * patch * 3) as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let mut s = 0u64;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    let (p, q) = (a.get(x, y), b.get(x, y));
                    s += (0..3).map(|c| p[c].abs_diff(q[c]) as u64).sum::<u64>();
                }
            }
            map.values[gy * gw + gx] = s as f64 / norm;
            map.valid[gy * gw + gx] = true;
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Kl,
    Rgb,
}

impl TraceMode {
    pub fn name(self) -> &'static str {
        match self {
            TraceMode::Kl => "kl",
            TraceMode::Rgb => "rgb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Hidden cells decoded one by one, each sample fed back.
    Sequential,
    /// All hidden cells predicted from the context alone.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSettings {
    pub num_masks: usize,
    /// Zoom factors; 1.0 is the whole frame, 0.5 a half-size window around the query.
    pub scales: Vec<f64>,
    pub reveal_fraction: f64,
    pub reveal_mode: RevealMode,
    /// Peaks below this are reported occluded. `None` never flags occlusion.
    pub occlusion_threshold: Option<f64>,
    pub mode: TraceMode,
    pub rng_seed: u64,
    pub sigma: f64,
    pub amplitude: f64,
    pub sampling: Sampling,
    pub decoding: Decoding,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            num_masks: 1,
            scales: vec![1.0],
            reveal_fraction: 0.1,
            reveal_mode: RevealMode::RandomSubset,
            occlusion_threshold: None,
            mode: TraceMode::Kl,
            rng_seed: 0,
            sigma: 2.0,
            amplitude: 255.0,
            sampling: Sampling::default(),
            decoding: Decoding::Sequential,
        }
    }
}

impl TraceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.num_masks == 0 {
            return Err(Error::config("num_masks must be at least 1"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::config("scales must be non-empty and lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.reveal_fraction) {
            return Err(Error::config("reveal_fraction must lie in [0, 1)"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma must be positive"));
        }
        Ok(())
    }

    /// Short content digest recorded next to every prediction.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable settings");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEstimate {
    pub query: [f64; 2],
    pub target: [f64; 2],
    pub occluded: bool,
    /// Peak of the aggregated map.
    pub confidence: f64,
}

/// Both readouts of one clean/perturbed pair and the two predicted frames.
/// `kl` is absent for the deterministic variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMaps {
    pub kl: Option<KlMap>,
    pub rgb: PatchMap,
    pub clean: Frame,
    pub perturbed: Frame,
}

impl TraceMaps {
    pub fn get(&self, mode: TraceMode) -> Result<&PatchMap> {
        match mode {
            TraceMode::Kl => self
                .kl
                .as_ref()
                .ok_or_else(|| Error::config("KL tracing needs a distributional model")),
            TraceMode::Rgb => Ok(&self.rgb),
        }
    }
}

/// One frame pair at model resolution together with its mask and seeds.
#[derive(Debug, Clone)]
pub struct TraceInput<'a> {
    pub f1: &'a Frame,
    pub f2: &'a Frame,
    pub perturb: PerturbSpec,
    pub mask: &'a MaskSpec,
    pub order: &'a DecodeOrder,
    pub sampling_seed: u64,
}

/// A trained model and the codebook it was trained against.
#[derive(Debug, Clone, Copy)]
pub struct Tracer<'a> {
    pub model: &'a Model<f32>,
    pub codebook: &'a Codebook,
}

impl<'a> Tracer<'a> {
    pub fn new(model: &'a Model<f32>, codebook: &'a Codebook) -> Result<Self> {
        let cfg = &model.config;
        if codebook.len() != cfg.vocab || codebook.patch() != cfg.patch {
            return Err(Error::Numerical(format!(
                "codebook (K={}, patch {}) does not fit the model (K={}, patch {})",
                codebook.len(),
                codebook.patch(),
                cfg.vocab,
                cfg.patch
            )));
        }
        Ok(Tracer { model, codebook })
    }

    pub fn frame_size(&self) -> (usize, usize) {
        let c = &self.model.config;
        (c.grid[1] * c.patch, c.grid[0] * c.patch)
    }

    /// The mask and decode order the model family uses for mask `index`.
    pub fn mask_and_order(&self, settings: &TraceSettings, seed: u64) -> Result<(MaskSpec, DecodeOrder)> {
        let cells = self.model.config.cells();
        let mode = settings.reveal_mode;
        let mask = MaskSpec::new(mode, cells, settings.reveal_fraction, seed::derive(seed, Stream::Mask, 0))?;
        let order = match (self.model.config.variant, mode) {
            (Variant::DistributionalRaster, _) | (_, RevealMode::RasterPrefix) => DecodeOrder::raster(&mask),
            (_, RevealMode::OverwriteDuringRollout) => {
                let all = MaskSpec {
                    revealed: Vec::new(),
                    ..mask.clone()
                };
                DecodeOrder::random(&all, seed::derive(seed, Stream::Order, 0))
            }
            _ => DecodeOrder::random(&mask, seed::derive(seed, Stream::Order, 0)),
        };
        Ok((mask, order))
    }

    /// Runs every clean/perturbed pair, batched, and returns both maps per pair.
    pub fn trace_batch(&self, inputs: &[TraceInput], settings: &TraceSettings) -> Result<Vec<TraceMaps>> {
        let cfg = &self.model.config;
        let mut grids = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let pert = inject_perturbation(inp.f1, &inp.perturb)?;
            grids.push((
                self.codebook.encode(inp.f1)?,
                self.codebook.encode(&pert)?,
                self.codebook.encode(inp.f2)?,
            ));
        }
        for (a, _, _) in &grids {
            if [a.gh, a.gw] != cfg.grid {
                return Err(Error::dim(format!(
                    "frames tokenize to a {}x{} grid, the model expects {:?}",
                    a.gh, a.gw, cfg.grid
                )));
            }
        }
        if cfg.variant == Variant::DeterministicL2 {
            return inputs
                .iter()
                .zip(&grids)
                .map(|(inp, (c, p, f2))| {
                    let clean = self.pixels_frame(c, f2, inp.mask)?;
                    let pert = self.pixels_frame(p, f2, inp.mask)?;
                    Ok(TraceMaps {
                        kl: None,
                        rgb: rgb_diff_map(&clean, &pert, cfg.patch)?,
                        clean,
                        perturbed: pert,
                    })
                })
                .collect();
        }
        let rollouts = match settings.decoding {
            Decoding::Sequential => {
                let jobs: Vec<RolloutJob> = inputs
                    .iter()
                    .zip(&grids)
                    .flat_map(|(inp, (c, p, f2))| {
                        [c, p].map(|f1| RolloutJob {
                            f1,
                            f2,
                            mask: inp.mask,
                            order: inp.order,
                            sampling_seed: inp.sampling_seed,
                        })
                    })
                    .collect();
                self.model.rollout_batch(&jobs, &settings.sampling)?
            }
            Decoding::Parallel => {
                let mut out = Vec::with_capacity(2 * inputs.len());
                for (inp, (c, p, f2)) in inputs.iter().zip(&grids) {
                    for f1 in [c, p] {
                        out.push(
                            self.model
                                .predict_parallel(f1, f2, inp.mask, &settings.sampling, inp.sampling_seed)?,
                        );
                    }
                }
                out
            }
        };
        rollouts
            .chunks_exact(2)
            .map(|pair| {
                let (clean, pert) = (&pair[0], &pair[1]);
                let a = self.codebook.decode(&clean.predicted)?;
                let b = self.codebook.decode(&pert.predicted)?;
                Ok(TraceMaps {
                    kl: Some(kl_map(&clean.logits, &pert.logits)?),
                    rgb: rgb_diff_map(&a, &b, cfg.patch)?,
                    clean: a,
                    perturbed: b,
                })
            })
            .collect()
    }

    /// A single clean/perturbed pair, read out in `mode`.
    pub fn trace_once(&self, input: &TraceInput, mode: TraceMode, settings: &TraceSettings) -> Result<PatchMap> {
        let maps = self.trace_batch(std::slice::from_ref(input), settings)?;
        maps[0].get(mode).cloned()
    }

    /// Frame 2 with hidden cells replaced by the deterministic prediction.
    fn pixels_frame(&self, f1: &TokenGrid, f2: &TokenGrid, mask: &MaskSpec) -> Result<Frame> {
        let p = self.model.config.patch;
        let (cells, px) = self.model.predict_pixels(f1, f2, mask)?;
        let mut frame = self.codebook.decode(f2)?;
        let od = p * p * 3;
        for (r, &cell) in cells.iter().enumerate() {
            let (gx, gy) = (cell % f2.gw, cell / f2.gw);
            for y in 0..p {
                for x in 0..p {
                    let o = r * od + (y * p + x) * 3;
                    let rgb = [0, 1, 2].map(|c| (px[o + c] as f64 * 255.0).round().clamp(0.0, 255.0) as u8);
                    frame.set(gx * p + x, gy * p + y, rgb);
                }
            }
        }
        Ok(frame)
    }

    /// Aggregated maps for one query over all masks and scales, on the patch
    /// grid of the clip frame, one per requested readout mode.
    pub fn aggregate(
        &self,
        f1: &Frame,
        f2: &Frame,
        query: [f64; 2],
        settings: &TraceSettings,
        modes: &[TraceMode],
    ) -> Result<Vec<Aggregate>> {
        Ok(self
            .aggregate_prefixes(f1, f2, query, settings, modes, &[settings.num_masks])?
            .remove(0))
    }

    /// Like [`Tracer::aggregate`] for several mask counts at once. Mask `m`
    /// is the same whatever the count, so the average over the first `n`
    /// masks is exactly what a run with `num_masks = n` produces. Indexed
    /// `[count][mode]`.
    pub fn aggregate_prefixes(
        &self,
        f1: &Frame,
        f2: &Frame,
        query: [f64; 2],
        settings: &TraceSettings,
        modes: &[TraceMode],
        mask_counts: &[usize],
    ) -> Result<Vec<Vec<Aggregate>>> {
        settings.validate()?;
        check_query(f1, query)?;
        if (f1.width(), f1.height()) != (f2.width(), f2.height()) {
            return Err(Error::dim("frames differ in size"));
        }
        if mask_counts.iter().any(|&n| n == 0) {
            return Err(Error::config("mask counts must be at least 1"));
        }
        let total = mask_counts.iter().copied().max().unwrap_or(0);
        let (mw, mh) = self.frame_size();
        let patch = self.model.config.patch;
        let (gh, gw) = (f1.height().div_ceil(patch), f1.width().div_ceil(patch));
        let windows: Vec<Window> = settings
            .scales
            .iter()
            .map(|&s| Window::around(f1.width(), f1.height(), query, s))
            .collect();
        let crops: Vec<(Frame, Frame, PerturbSpec)> = windows
            .iter()
            .map(|w| {
                let a = f1.crop(w.x0, w.y0, w.w, w.h)?.resize_nearest(mw, mh);
                let b = f2.crop(w.x0, w.y0, w.w, w.h)?.resize_nearest(mw, mh);
                let c = w.to_model(query, mw, mh);
                let p = PerturbSpec {
                    center: [c[0].clamp(0.0, (mw - 1) as f64), c[1].clamp(0.0, (mh - 1) as f64)],
                    sigma: settings.sigma,
                    amplitude: settings.amplitude,
                };
                Ok((a, b, p))
            })
            .collect::<Result<_>>()?;
        let mut plans = Vec::new();
        for m in 0..total {
            for si in 0..windows.len() {
                let s = seed::derive(settings.rng_seed, Stream::Trace, (m * 64 + si) as u64);
                let (mask, order) = self.mask_and_order(settings, s)?;
                plans.push((si, mask, order, seed::derive(s, Stream::Sampling, 0)));
            }
        }
        let inputs: Vec<TraceInput> = plans
            .iter()
            .map(|(si, mask, order, ss)| TraceInput {
                f1: &crops[*si].0,
                f2: &crops[*si].1,
                perturb: crops[*si].2,
                mask,
                order,
                sampling_seed: *ss,
            })
            .collect();
        let maps = self.trace_batch(&inputs, settings)?;
        let mut out = vec![Vec::with_capacity(modes.len()); mask_counts.len()];
        for &mode in modes {
            // Per scale: running sums over masks on the clip grid.
            let mut sum = vec![0.0; gh * gw];
            let mut count = vec![0usize; gh * gw];
            let mut snapshots: Vec<Option<PatchMap>> = vec![None; total + 1];
            for (m, (group, chunk)) in plans.chunks(windows.len()).zip(maps.chunks(windows.len())).enumerate() {
                for ((si, _, _, _), pair) in group.iter().zip(chunk) {
                    windows[*si].accumulate(pair.get(mode)?, f1.width(), patch, mw, mh, &mut sum, &mut count);
                }
                let mut agg = PatchMap::zeros(gh, gw);
                for i in 0..gh * gw {
                    if count[i] > 0 {
                        agg.values[i] = sum[i] / count[i] as f64;
                        agg.valid[i] = true;
                    }
                }
                snapshots[m + 1] = Some(agg);
            }
            for (ci, &n) in mask_counts.iter().enumerate() {
                out[ci].push(Aggregate {
                    mode,
                    cell: patch,
                    map: snapshots[n].clone().expect("snapshot for every count"),
                });
            }
        }
        Ok(out)
    }

    /// Flow for one query in `settings.mode`.
    pub fn extract_flow(&self, f1: &Frame, f2: &Frame, query: [f64; 2], settings: &TraceSettings) -> Result<FlowEstimate> {
        let agg = self.aggregate(f1, f2, query, settings, &[settings.mode])?;
        Ok(agg[0].estimate(query, settings.occlusion_threshold))
    }
}

fn check_query(frame: &Frame, q: [f64; 2]) -> Result<()> {
    if !(q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (frame.width() - 1) as f64 && q[1] <= (frame.height() - 1) as f64) {
        return Err(Error::config(format!("query ({}, {}) outside the frame", q[0], q[1])));
    }
    Ok(())
}

/// An aggregated map on the clip's patch grid; cells are `cell` pixels wide.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mode: TraceMode,
    pub cell: usize,
    pub map: PatchMap,
}

impl Aggregate {
    /// Argmax cell refined by the map-weighted centroid of its 3x3
    /// neighbourhood; occluded when the peak falls below `threshold`.
    pub fn estimate(&self, query: [f64; 2], threshold: Option<f64>) -> FlowEstimate {
        let map = &self.map;
        let Some(peak) = map.argmax() else {
            return FlowEstimate {
                query,
                target: query,
                occluded: threshold.is_some_and(|t| 0.0 < t),
                confidence: 0.0,
            };
        };
        let center = |i: usize| {
            let c = self.cell as f64;
            [(i % map.gw) as f64 * c + (c - 1.0) / 2.0, (i / map.gw) as f64 * c + (c - 1.0) / 2.0]
        };
        let (px, py) = ((peak % map.gw) as i64, (peak / map.gw) as i64);
        let (mut wx, mut wy, mut wt) = (0.0, 0.0, 0.0);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (px + dx, py + dy);
                if x < 0 || y < 0 || x >= map.gw as i64 || y >= map.gh as i64 {
                    continue;
                }
                let i = y as usize * map.gw + x as usize;
                if !map.valid[i] {
                    continue;
                }
                let w = map.values[i];
                let c = center(i);
                wx += w * c[0];
                wy += w * c[1];
                wt += w;
            }
        }
        let target = if wt > 0.0 { [wx / wt, wy / wt] } else { center(peak) };
        let confidence = map.values[peak];
        FlowEstimate {
            query,
            target,
            occluded: threshold.is_some_and(|t| confidence < t),
            confidence,
        }
    }
}

/// A zoom window in clip pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Window {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Window {
    fn around(width: usize, height: usize, q: [f64; 2], scale: f64) -> Self {
        let w = ((width as f64 * scale).round() as usize).clamp(1, width);
        let h = ((height as f64 * scale).round() as usize).clamp(1, height);
        let x0 = (q[0] - w as f64 / 2.0).round().clamp(0.0, (width - w) as f64) as usize;
        let y0 = (q[1] - h as f64 / 2.0).round().clamp(0.0, (height - h) as f64) as usize;
        Window { x0, y0, w, h }
    }

    /// Clip coordinates to model-resolution coordinates of the resampled window.
    fn to_model(&self, p: [f64; 2], mw: usize, mh: usize) -> [f64; 2] {
        [
            (p[0] - self.x0 as f64 + 0.5) * mw as f64 / self.w as f64 - 0.5,
            (p[1] - self.y0 as f64 + 0.5) * mh as f64 / self.h as f64 - 0.5,
        ]
    }

    /// Adds the mean of `map` over every clip cell's pixels that fall inside
    /// the window.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        map: &PatchMap,
        width: usize,
        cell: usize,
        mw: usize,
        mh: usize,
        sum: &mut [f64],
        count: &mut [usize],
    ) {
        let gw = width.div_ceil(cell);
        let mp_w = mw / map.gw;
        let mp_h = mh / map.gh;
        let mut acc = vec![(0.0, 0usize); sum.len()];
        for y in self.y0..self.y0 + self.h {
            let my = ((y - self.y0) * mh) / self.h;
            for x in self.x0..self.x0 + self.w {
                let mx = ((x - self.x0) * mw) / self.w;
                let src = (my / mp_h) * map.gw + mx / mp_w;
                if !map.valid[src] {
                    continue;
                }
                let dst = (y / cell) * gw + x / cell;
                acc[dst].0 += map.values[src];
                acc[dst].1 += 1;
            }
        }
        for (i, (s, n)) in acc.into_iter().enumerate() {
            if n > 0 {
                sum[i] += s / n as f64;
                count[i] += 1;
            }
        }
    }
}

/// Chooses the smallest threshold that maximises occlusion accuracy when
/// points with `peak < threshold` are called occluded. Candidates lie below
/// the smallest peak, between consecutive distinct peaks and above the
/// largest. Returns the threshold and its accuracy.
pub fn calibrate_occlusion_threshold(samples: &[(f64, bool)]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("empty calibration split".into()));
    }
    if samples.iter().any(|(p, _)| !p.is_finite()) {
        return Err(Error::Numerical("non-finite peak in the calibration split".into()));
    }
    let mut peaks: Vec<f64> = samples.iter().map(|s| s.0).collect();
    peaks.sort_by(f64::total_cmp);
    peaks.dedup();
    let mut candidates = vec![peaks[0] - 1.0];
    candidates.extend(peaks.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(peaks[peaks.len() - 1] + 1.0);
    let mut best = (candidates[0], -1.0);
    for &t in &candidates {
        let oa = occlusion_accuracy_at(samples, t);
        if oa > best.1 {
            best = (t, oa);
        }
    }
    Ok(best)
}

/// Accuracy of `peak < threshold` as an occlusion call.
pub fn occlusion_accuracy_at(samples: &[(f64, bool)], threshold: f64) -> f64 {
    let hits = samples.iter().filter(|(p, occ)| (*p < threshold) == *occ).count();
    hits as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_values() {
        let f = Frame::filled(9, 9, [10, 20, 30]);
        let out = inject_perturbation(&f, &PerturbSpec::at(4.0, 4.0)).unwrap();
        assert_eq!(out.get(4, 4), [255, 255, 255]);
        let add = 255.0 * (-0.5f64).exp();
        assert!((add - 154.67).abs() < 0.01);
        assert_eq!(out.get(6, 4), [(10.0 + add).round() as u8, (20.0 + add).round() as u8, (30.0 + add).round() as u8]);
        let zero = PerturbSpec {
            amplitude: 0.0,
            ..PerturbSpec::at(1.5, 2.5)
        };
        assert_eq!(inject_perturbation(&f, &zero).unwrap(), f);
        assert!(inject_perturbation(&f, &PerturbSpec::at(9.0, 0.0)).is_err());
    }

    #[test]
    fn kl_two_categories() {
        let mut a = LogitsGrid::empty(1, 2, 2);
        let mut b = a.clone();
        a.valid = vec![true, false];
        b.valid = vec![true, false];
        b.row_mut(0)[0] = 3f32.ln();
        let m = kl_map(&a, &b).unwrap();
        let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((m.values[0] - want).abs() < 1e-6);
        assert!((want - 0.14384).abs() < 1e-5);
        assert!(!m.valid[1]);
        assert_eq!(kl_map(&a, &a).unwrap().values, vec![0.0, 0.0]);
        b.valid[1] = true;
        assert!(kl_map(&a, &b).is_err());
    }

    #[test]
    fn rgb_patch_difference() {
        let a = Frame::filled(8, 4, [100, 100, 100]);
        let mut b = a.clone();
        for y in 0..4 {
            for x in 4..8 {
                b.set(x, y, [130, 100, 100]);
            }
        }
        let m = rgb_diff_map(&a, &b, 4).unwrap();
        assert_eq!(m.values, vec![0.0, 10.0]);
        assert_eq!(rgb_diff_map(&b, &a, 4).unwrap(), m);
        assert!(rgb_diff_map(&a, &Frame::filled(4, 4, [0; 3]), 4).is_err());
    }

    #[test]
    fn argmax_ties_and_refinement() {
        let mut map = PatchMap::zeros(3, 3);
        map.valid = vec![true; 9];
        map.values[4] = 2.0;
        map.values[5] = 2.0;
        assert_eq!(map.argmax(), Some(4));
        let agg = Aggregate {
            mode: TraceMode::Kl,
            cell: 4,
            map: map.clone(),
        };
        let est = agg.estimate([0.0, 0.0], Some(1.0));
        // centroid of cells 4 and 5 (centres x = 5.5 and 9.5, y = 5.5)
        assert!((est.target[0] - 7.5).abs() < 1e-12 && (est.target[1] - 5.5).abs() < 1e-12);
        assert!(!est.occluded);
        assert!(agg.estimate([0.0, 0.0], Some(2.5)).occluded);
        map.values = vec![0.0; 9];
        let flat = Aggregate { map, ..agg };
        assert_eq!(flat.estimate([3.0, 3.0], None).target, [1.5, 1.5]);
    }

    #[test]
    fn calibration_cases() {
        let vis = [(0.5, false), (2.0, false), (0.1, false)];
        let (t, oa) = calibrate_occlusion_threshold(&vis).unwrap();
        assert!(t < 0.1 && oa == 1.0);
        let sep = [(0.1, true), (0.2, true), (1.0, false), (3.0, false)];
        let (t, oa) = calibrate_occlusion_threshold(&sep).unwrap();
        assert_eq!(oa, 1.0);
        assert!((t - 0.6).abs() < 1e-12);
        assert_eq!(occlusion_accuracy_at(&sep, t), oa);
        assert!(calibrate_occlusion_threshold(&[]).is_err());
    }

    #[test]
    fn window_maps_round_trip() {
        let w = Window::around(32, 32, [30.0, 2.0], 0.5);
        assert_eq!((w.x0, w.y0, w.w, w.h), (16, 0, 16, 16));
        let m = w.to_model([30.0, 2.0], 32, 32);
        assert!((m[0] - 28.5).abs() < 1e-12 && (m[1] - 4.5).abs() < 1e-12);
        let full = Window::around(32, 32, [5.0, 5.0], 1.0);
        assert_eq!(full.to_model([5.0, 7.0], 32, 32), [5.0, 7.0]);
    }
}
