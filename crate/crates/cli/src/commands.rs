//! The harness subcommands. Each works inside one run directory and returns a
//! JSON summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kltrace_core::io::{self, Dataset};
use kltrace_core::metrics::{EvalRecord, MetricsReport};
use kltrace_core::model::{
    batch_loss, heldout_sequences, train, AdamState, Checkpoint, Model, RevealMode, Sequence, TrainConfig,
    TrainExample, Variant,
};
use kltrace_core::synth::{generate_dataset, QueryRecord};
use kltrace_core::tokenizer::{fit_codebook, reconstruction_mse, Codebook};
use kltrace_core::tracer::{
    calibrate_occlusion_threshold, inject_perturbation, Aggregate, PerturbSpec, TraceInput, TraceMode, TraceSettings,
    Tracer,
};
use kltrace_core::{seed, Error, Frame, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, Split};
use crate::log::Logger;
use crate::plot;

pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

/// Resolved config, run directory, logger and worker pool.
pub struct Context {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub log: Logger,
    pool: rayon::ThreadPool,
}

impl Context {
    /// Creates the run directory and stores the resolved config in it.
    pub fn new(cfg: RunConfig, run_dir: PathBuf, log: Logger) -> Result<Self> {
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        io::write_bytes(&run_dir.join("config.json"), cfg.to_json().as_bytes())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::config(format!("cannot start {} workers: {e}", cfg.workers)))?;
        Ok(Context {
            cfg,
            run_dir,
            log,
            pool,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.run_dir.join("data").join(split.name())
    }

    /// Global trace settings with the per-run seed folded in.
    fn trace_settings(&self) -> TraceSettings {
        TraceSettings {
            rng_seed: seed::derive(self.cfg.seed, seed::Stream::Trace, self.cfg.trace.rng_seed),
            ..self.cfg.trace.clone()
        }
    }
}

fn or_default(p: Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.unwrap_or(default)
}

pub fn gen_data(ctx: &Context, split: Option<Split>) -> Result<Value> {
    let splits = match split {
        Some(s) => vec![s],
        None => Split::ALL.to_vec(),
    };
    let mut out = serde_json::Map::new();
    for s in splits {
        let spec = ctx.cfg.dataset_spec(s);
        if spec.total_clips() == 0 {
            ctx.log.event("gen_data_skip", json!({"split": s.name(), "reason": "no clips configured"}));
            continue;
        }
        let t0 = Instant::now();
        let (clips, queries) = generate_dataset(&spec)?;
        let dir = ctx.split_dir(s);
        let manifest = io::write_dataset(&dir, spec.seed, &clips, &queries)?;
        let occluded = queries.iter().filter(|q| q.occluded).count();
        ctx.log.event(
            "gen_data",
            json!({"split": s.name(), "clips": clips.len(), "queries": queries.len(),
                   "occluded": occluded, "seconds": t0.elapsed().as_secs_f64()}),
        );
        out.insert(
            s.name().into(),
            json!({"dir": dir, "clips": clips.len(), "queries": queries.len(), "occluded": occluded,
                   "scenarios": manifest.scenarios}),
        );
    }
    Ok(Value::Object(out))
}

fn load_dataset(ctx: &Context, dir: &Path) -> Result<Dataset> {
    let ds = io::read_dataset(dir)?;
    let w = &ctx.cfg.data.world;
    if let Some(c) = ds.clips.iter().find(|c| c.frames.is_empty()) {
        return Err(Error::Data(format!("clip {} has no frames", c.id)));
    }
    ctx.log.event(
        "dataset",
        json!({"dir": dir, "clips": ds.clips.len(), "queries": ds.queries.len(), "world": [w.width, w.height]}),
    );
    Ok(ds)
}

/// Every `stride`-th clip is held out, so each scenario contributes.
fn heldout_stride(fraction: f64) -> Option<usize> {
    (fraction > 0.0).then(|| (1.0 / fraction).round().max(2.0) as usize)
}

fn is_heldout(i: usize, stride: Option<usize>) -> bool {
    stride.is_some_and(|s| i % s == s - 1)
}

pub fn fit_tokenizer(ctx: &Context, data: Option<PathBuf>, heldout: Option<PathBuf>) -> Result<Value> {
    let dir = or_default(data, ctx.split_dir(Split::Train));
    let ds = load_dataset(ctx, &dir)?;
    let tc = &ctx.cfg.tokenizer;
    let mut frames: Vec<Frame> = ds.clips.iter().flat_map(|c| c.frames.iter().cloned()).collect();
    if tc.max_frames > 0 && frames.len() > tc.max_frames {
        let n = frames.len();
        frames = (0..tc.max_frames).map(|i| frames[i * n / tc.max_frames].clone()).collect();
    }
    let t0 = Instant::now();
    let cb = fit_codebook(
        &frames,
        tc.patch,
        tc.codes,
        tc.iters,
        seed::derive(ctx.cfg.seed, seed::Stream::Codebook, 0),
    )?;
    let path = ctx.path(CODEBOOK_FILE);
    cb.save(&path)?;
    let train_mse = mean_mse(&cb, frames.iter())?;
    let held_dir = heldout.or_else(|| Some(ctx.split_dir(Split::Eval)).filter(|d| d.join("manifest.json").exists()));
    let held_mse = match held_dir {
        Some(d) => {
            let h = io::read_dataset(&d)?;
            Some(mean_mse(&cb, h.clips.iter().flat_map(|c| c.frames.iter()))?)
        }
        None => None,
    };
    let summary = json!({"codebook": path, "digest": cb.digest_hex(), "codes": cb.len(), "frames": frames.len(),
                         "train_mse": train_mse, "heldout_mse": held_mse, "seconds": t0.elapsed().as_secs_f64()});
    ctx.log.event("fit_tokenizer", summary.clone());
    Ok(summary)
}

fn mean_mse<'a>(cb: &Codebook, frames: impl Iterator<Item = &'a Frame>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in frames {
        sum += reconstruction_mse(cb, f)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no frames to measure reconstruction error on".into()));
    }
    Ok(sum / n as f64)
}

fn check_world(ctx: &Context, ds: &Dataset) -> Result<()> {
    let w = &ctx.cfg.data.world;
    for c in &ds.clips {
        if (c.width(), c.height()) != (w.width, w.height) {
            return Err(Error::Data(format!(
                "clip {} is {}x{}, the config expects {}x{}",
                c.id,
                c.width(),
                c.height(),
                w.width,
                w.height
            )));
        }
    }
    Ok(())
}

/// Consecutive frame pairs of the given clips in token form.
fn examples<'a>(cb: &Codebook, clips: impl Iterator<Item = &'a kltrace_core::synth::Clip>, pixels: bool) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for c in clips {
        for pair in c.frames.windows(2) {
            out.push(TrainExample {
                f1: cb.encode(&pair[0])?,
                f2: cb.encode(&pair[1])?,
                f2_frame: pixels.then(|| pair[1].clone()),
            });
        }
    }
    Ok(out)
}

pub fn train_model(
    ctx: &Context,
    data: Option<PathBuf>,
    codebook: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    resume: bool,
) -> Result<Value> {
    let dir = or_default(data, ctx.split_dir(Split::Train));
    let ds = load_dataset(ctx, &dir)?;
    check_world(ctx, &ds)?;
    let cb = Codebook::load(&or_default(codebook, ctx.path(CODEBOOK_FILE)))?;
    let mcfg = ctx.cfg.model_config();
    if cb.len() != mcfg.vocab || cb.patch() != mcfg.patch {
        return Err(Error::config(format!(
            "codebook has {} codes of patch {}, the config asks for {} of patch {}",
            cb.len(),
            cb.patch(),
            mcfg.vocab,
            mcfg.patch
        )));
    }
    let ck_path = or_default(checkpoint, ctx.path(CHECKPOINT_FILE));
    let stride = heldout_stride(ctx.cfg.data.heldout_fraction);
    let pixels = !mcfg.variant.is_distributional();
    let train_clips = ds.clips.iter().enumerate().filter(|(i, _)| !is_heldout(*i, stride)).map(|(_, c)| c);
    let held_clips = ds.clips.iter().enumerate().filter(|(i, _)| is_heldout(*i, stride)).map(|(_, c)| c);
    let data = examples(&cb, train_clips, pixels)?;
    let held = examples(&cb, held_clips, pixels)?;
    let tc = TrainConfig {
        seed: seed::derive(ctx.cfg.seed, seed::Stream::Batch, ctx.cfg.train.seed),
        ..ctx.cfg.train.clone()
    };
    let held_seqs = heldout_sequences(&mcfg, &held, tc.reveal_max, seed::derive(tc.seed, seed::Stream::Batch, 1))?;
    let (mut model, mut adam) = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        ck.require_codebook(&cb.digest_hex())?;
        if ck.model.config != mcfg {
            return Err(Error::config("checkpoint model config differs from the run config"));
        }
        let adam = ck
            .adam
            .ok_or_else(|| Error::Data(format!("{} holds no optimizer state to resume from", ck_path.display())))?;
        (ck.model, adam)
    } else {
        let m = Model::<f32>::init(mcfg.clone())?;
        let a = AdamState::new(&mcfg);
        (m, a)
    };
    let start = adam.step;
    let initial = if start == 0 && !held_seqs.is_empty() {
        Some(batch_loss(&model, &held_seqs)?)
    } else {
        None
    };
    ctx.log.event(
        "train_start",
        json!({"variant": mcfg.variant.name(), "params": mcfg.param_count(), "examples": data.len(),
               "heldout": held.len(), "from_step": start, "steps": tc.steps, "initial_heldout": initial}),
    );
    let loss_path = ctx.path("loss.jsonl");
    let mut lines = if resume && start > 0 {
        fs::read_to_string(&loss_path).unwrap_or_default()
    } else {
        String::new()
    };
    let t0 = Instant::now();
    let outcome = train(&mut model, &mut adam, &data, &held_seqs, &tc, |p| {
        lines.push_str(&serde_json::to_string(p).expect("serializable loss point"));
        lines.push('\n');
        if let Some(h) = p.heldout_loss {
            ctx.log.event(
                "train_progress",
                json!({"step": p.step + 1, "train_loss": p.train_loss, "heldout_loss": h, "lr": p.lr,
                       "seconds": t0.elapsed().as_secs_f64()}),
            );
        }
    })?;
    io::write_bytes(&loss_path, lines.as_bytes())?;
    let ck = Checkpoint {
        model,
        codebook_digest: cb.digest_hex(),
        step: adam.step,
        adam: Some(adam),
        meta: json!({"train": tc, "config_digest": ctx.cfg.digest(), "data_seed": ds.manifest.seed,
                     "heldout_fraction": ctx.cfg.data.heldout_fraction}),
    };
    ck.save(&ck_path)?;
    let summary = json!({"checkpoint": ck_path, "variant": mcfg.variant.name(), "steps": ck.step,
                         "initial_heldout": initial, "final_heldout": outcome.final_heldout,
                         "seconds": t0.elapsed().as_secs_f64()});
    ctx.log.event("train_done", summary.clone());
    Ok(summary)
}

/// A checkpoint and the codebook it was trained against.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub codebook: Codebook,
}

impl Loaded {
    pub fn open(checkpoint: &Path, codebook: &Path) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let cb = Codebook::load(codebook)?;
        ck.require_codebook(&cb.digest_hex())?;
        Ok(Loaded {
            checkpoint: ck,
            codebook: cb,
        })
    }

    pub fn tracer(&self) -> Result<Tracer<'_>> {
        Tracer::new(&self.checkpoint.model, &self.codebook)
    }

    pub fn variant(&self) -> Variant {
        self.checkpoint.model.config.variant
    }
}

fn open_model(ctx: &Context, checkpoint: Option<PathBuf>, codebook: Option<PathBuf>) -> Result<Loaded> {
    Loaded::open(
        &or_default(checkpoint, ctx.path(CHECKPOINT_FILE)),
        &or_default(codebook, ctx.path(CODEBOOK_FILE)),
    )
}

/// Frame pair and query point of one query.
fn query_frames<'a>(ds: &'a Dataset, index: &BTreeMap<&str, usize>, q: &QueryRecord) -> Result<(&'a Frame, &'a Frame)> {
    let ci = *index
        .get(q.clip.as_str())
        .ok_or_else(|| Error::Data(format!("query refers to unknown clip {}", q.clip)))?;
    let clip = &ds.clips[ci];
    let get = |k: usize| {
        clip.frames
            .get(k)
            .ok_or_else(|| Error::Data(format!("clip {} has no frame {k}", clip.id)))
    };
    Ok((get(q.frame_a)?, get(q.frame_b)?))
}

fn clip_index(ds: &Dataset) -> BTreeMap<&str, usize> {
    ds.clips.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect()
}

/// Per-query aggregates `[query][count][mode]`, in query order. Each query
/// gets its own seed so the result does not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn trace_queries(
    ctx: &Context,
    tracer: &Tracer,
    ds: &Dataset,
    queries: &[QueryRecord],
    settings: &TraceSettings,
    modes: &[TraceMode],
    counts: &[usize],
) -> Result<Vec<Vec<Vec<Aggregate>>>> {
    let index = clip_index(ds);
    ctx.pool.install(|| {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let t0 = Instant::now();
                let (f1, f2) = query_frames(ds, &index, q)?;
                let st = TraceSettings {
                    rng_seed: seed::derive(settings.rng_seed, seed::Stream::Query, i as u64),
                    ..settings.clone()
                };
                let out = tracer.aggregate_prefixes(f1, f2, [q.x, q.y], &st, modes, counts)?;
                ctx.log.event(
                    "query",
                    json!({"index": i, "clip": q.clip, "ms": (t0.elapsed().as_secs_f64() * 1e6).round() / 1e3}),
                );
                Ok(out)
            })
            .collect()
    })
}

/// One prediction as stored in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query: usize,
    pub clip: String,
    pub frame_a: usize,
    pub frame_b: usize,
    pub x: f64,
    pub y: f64,
    pub mode: TraceMode,
    pub variant: Variant,
    pub pred_x: f64,
    pub pred_y: f64,
    pub occluded: bool,
    pub confidence: f64,
    pub settings_digest: String,
    /// Clip pixels per model pixel along x and y.
    pub resample: [f64; 2],
}

pub fn read_records(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let r = serde_json::from_str(line.trim())
                .map_err(|e| Error::malformed(path, offset, format!("bad record: {e}")))?;
            out.push(r);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

fn records_jsonl(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("serializable record"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub oa: f64,
    pub samples: usize,
    pub occluded: usize,
    pub mode: TraceMode,
    pub settings_digest: String,
}

fn resample(tracer: &Tracer, frame: &Frame) -> [f64; 2] {
    let (mw, mh) = tracer.frame_size();
    [frame.width() as f64 / mw as f64, frame.height() as f64 / mh as f64]
}

pub fn extract(
    ctx: &Context,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    calibration: Option<PathBuf>,
) -> Result<Value> {
    let ds = load_dataset(ctx, &or_default(data, ctx.split_dir(Split::Eval)))?;
    let loaded = open_model(ctx, checkpoint, codebook)?;
    let tracer = loaded.tracer()?;
    let mut settings = ctx.trace_settings();
    if settings.occlusion_threshold.is_none() {
        let path = calibration.unwrap_or_else(|| ctx.path(CALIBRATION_FILE));
        if path.exists() {
            let cal: Calibration = io::read_json(&path)?;
            if cal.mode != settings.mode {
                return Err(Error::config(format!(
                    "calibration was fitted for {} maps, extraction uses {}",
                    cal.mode.name(),
                    settings.mode.name()
                )));
            }
            ctx.log.event("calibration", json!({"file": path, "threshold": cal.threshold}));
            settings.occlusion_threshold = Some(cal.threshold);
        }
    }
    let digest = settings.digest();
    let t0 = Instant::now();
    let aggs = trace_queries(ctx, &tracer, &ds, &ds.queries, &settings, &[settings.mode], &[settings.num_masks])?;
    let index = clip_index(&ds);
    let records = ds
        .queries
        .iter()
        .zip(aggs)
        .enumerate()
        .map(|(i, (q, a))| {
            let est = a[0][0].estimate([q.x, q.y], settings.occlusion_threshold);
            let (f1, _) = query_frames(&ds, &index, q)?;
            Ok(TraceRecord {
                query: i,
                clip: q.clip.clone(),
                frame_a: q.frame_a,
                frame_b: q.frame_b,
                x: q.x,
                y: q.y,
                mode: settings.mode,
                variant: loaded.variant(),
                pred_x: est.target[0],
                pred_y: est.target[1],
                occluded: est.occluded,
                confidence: est.confidence,
                settings_digest: digest.clone(),
                resample: resample(&tracer, f1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = ctx.path(RECORDS_FILE);
    io::write_bytes(&path, records_jsonl(&records).as_bytes())?;
    let summary = json!({"records": path, "count": records.len(), "mode": settings.mode.name(),
                         "variant": loaded.variant().name(), "settings_digest": digest,
                         "seconds": t0.elapsed().as_secs_f64()});
    ctx.log.event("extract", summary.clone());
    Ok(summary)
}

/// Records paired with their ground truth, checked against the query file.
fn pair_records(records: &[TraceRecord], queries: &[QueryRecord]) -> Result<Vec<EvalRecord>> {
    if records.len() != queries.len() {
        return Err(Error::Data(format!(
            "{} records for {} queries",
            records.len(),
            queries.len()
        )));
    }
    records
        .iter()
        .zip(queries)
        .enumerate()
        .map(|(i, (r, q))| {
            if r.query != i || r.clip != q.clip || r.x != q.x || r.y != q.y {
                return Err(Error::Data(format!("record {i} does not match query {i} of the dataset")));
            }
            Ok(EvalRecord {
                query: i,
                pred: [r.pred_x, r.pred_y],
                pred_occluded: r.occluded,
                gt: [q.gt_x, q.gt_y],
                gt_occluded: q.occluded,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub settings_digest: String,
    pub mode: TraceMode,
    pub variant: Variant,
    pub thresholds: Vec<f64>,
    /// Distinct clip-to-model resampling factors seen in the records.
    pub resample: Vec<[f64; 2]>,
    pub overall: MetricsReport,
    pub per_scenario: BTreeMap<String, MetricsReport>,
}

pub fn evaluate(ctx: &Context, data: Option<PathBuf>, records: Option<PathBuf>) -> Result<Value> {
    let ds = load_dataset(ctx, &or_default(data, ctx.split_dir(Split::Eval)))?;
    let records = read_records(&or_default(records, ctx.path(RECORDS_FILE)))?;
    let first = records
        .first()
        .ok_or_else(|| Error::Data("records file is empty".into()))?;
    if records
        .iter()
        .any(|r| r.settings_digest != first.settings_digest || r.mode != first.mode || r.variant != first.variant)
    {
        return Err(Error::Data("records mix several trace configurations".into()));
    }
    let paired = pair_records(&records, &ds.queries)?;
    let thresholds = &ctx.cfg.metrics.thresholds;
    let overall = MetricsReport::compute(&paired, thresholds)?;
    let scenario: BTreeMap<&str, &str> = ds.clips.iter().map(|c| (c.id.as_str(), c.scenario.name())).collect();
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for (r, e) in records.iter().zip(&paired) {
        let name = scenario.get(r.clip.as_str()).copied().unwrap_or("unknown");
        groups.entry(name.to_string()).or_default().push(e.clone());
    }
    let per_scenario = groups
        .into_iter()
        .map(|(k, v)| Ok((k, MetricsReport::compute(&v, thresholds)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut resample: Vec<[f64; 2]> = Vec::new();
    for r in &records {
        if !resample.contains(&r.resample) {
            resample.push(r.resample);
        }
    }
    let report = Report {
        config_digest: ctx.cfg.digest(),
        settings_digest: first.settings_digest.clone(),
        mode: first.mode,
        variant: first.variant,
        thresholds: thresholds.clone(),
        resample,
        overall,
        per_scenario,
    };
    let path = ctx.path(REPORT_FILE);
    io::write_json(&path, &report)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv_row(&mut csv, &["scope", "queries", "visible", "ad", "aj", "delta_avg", "oa"])?;
    let scopes = std::iter::once(("all", &report.overall)).chain(report.per_scenario.iter().map(|(k, v)| (k.as_str(), v)));
    for (scope, m) in scopes {
        csv_row(
            &mut csv,
            &[
                scope.to_string(),
                m.queries.to_string(),
                m.visible.to_string(),
                opt(m.ad),
                m.aj.to_string(),
                opt(m.delta_avg),
                m.oa.to_string(),
            ],
        )?;
    }
    write_csv(&ctx.path("report.csv"), csv)?;
    let digest = hex::encode(&<sha2::Sha256 as sha2::Digest>::digest(fs::read(&path).map_err(|e| Error::io(&path, e))?)[..]);
    let summary = json!({"report": path, "report_sha256": digest, "ad": report.overall.ad, "aj": report.overall.aj,
                         "delta_avg": report.overall.delta_avg, "oa": report.overall.oa});
    ctx.log.event("eval", summary.clone());
    Ok(summary)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row<T: AsRef<[u8]>>(w: &mut csv::Writer<Vec<u8>>, row: &[T]) -> Result<()> {
    w.write_record(row)
        .map_err(|e| Error::Data(format!("cannot format csv row: {e}")))
}

fn write_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("cannot format csv: {e}")))?;
    io::write_bytes(path, &bytes)
}

pub fn calibrate(
    ctx: &Context,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
) -> Result<Value> {
    let ds = load_dataset(ctx, &or_default(data, ctx.split_dir(Split::Calibration)))?;
    let loaded = open_model(ctx, checkpoint, codebook)?;
    let tracer = loaded.tracer()?;
    let settings = TraceSettings {
        occlusion_threshold: None,
        ..ctx.trace_settings()
    };
    let aggs = trace_queries(ctx, &tracer, &ds, &ds.queries, &settings, &[settings.mode], &[settings.num_masks])?;
    let samples: Vec<(f64, bool)> = ds
        .queries
        .iter()
        .zip(&aggs)
        .map(|(q, a)| (a[0][0].estimate([q.x, q.y], None).confidence, q.occluded))
        .collect();
    let (threshold, oa) = calibrate_occlusion_threshold(&samples)?;
    let cal = Calibration {
        threshold,
        oa,
        samples: samples.len(),
        occluded: samples.iter().filter(|s| s.1).count(),
        mode: settings.mode,
        settings_digest: settings.digest(),
    };
    let path = ctx.path(CALIBRATION_FILE);
    io::write_json(&path, &cal)?;
    let summary = json!({"calibration": path, "threshold": threshold, "oa": oa, "samples": cal.samples,
                         "occluded": cal.occluded});
    ctx.log.event("calibrate_occlusion", summary.clone());
    Ok(summary)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mode: TraceMode,
    pub reveal_mode: RevealMode,
    pub reveal_fraction: f64,
    pub num_masks: usize,
    pub num_scales: usize,
    /// `ok`, `unsupported` or `missing_checkpoint`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub metrics: Option<MetricsReport>,
    /// Held-out hidden-token cross-entropy under this row's mask family.
    pub heldout_ce: Option<f64>,
}

impl AblationRow {
    fn ad(&self) -> Option<f64> {
        self.metrics.as_ref().and_then(|m| m.ad)
    }
}

/// Mean cross-entropy of hidden tokens over every query pair's frames, with
/// the mask and order the tracer would use.
pub fn heldout_ce(tracer: &Tracer, ds: &Dataset, settings: &TraceSettings) -> Result<Option<f64>> {
    let cfg = &tracer.model.config;
    if !cfg.variant.is_distributional() || settings.reveal_mode == RevealMode::Full {
        return Ok(None);
    }
    let (mw, mh) = tracer.frame_size();
    let mut seqs = Vec::new();
    for (i, clip) in ds.clips.iter().enumerate() {
        for (k, pair) in clip.frames.windows(2).enumerate() {
            let s = seed::derive(settings.rng_seed, seed::Stream::Mask, (i * 64 + k) as u64);
            let (mask, order) = tracer.mask_and_order(settings, s)?;
            let f1 = tracer.codebook.encode(&pair[0].resize_nearest(mw, mh))?;
            let f2 = tracer.codebook.encode(&pair[1].resize_nearest(mw, mh))?;
            seqs.push(Sequence::distributional(cfg, &f1, &f2, &mask, &order)?);
        }
    }
    if seqs.iter().all(|s| s.targets.is_empty()) {
        return Ok(None);
    }
    Ok(Some(batch_loss(tracer.model, &seqs)?))
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if p.is_file() && (name == CHECKPOINT_FILE || name.starts_with("checkpoint-")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn ablate(
    ctx: &Context,
    data: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    codebook: Option<PathBuf>,
) -> Result<Value> {
    let grid = &ctx.cfg.ablation;
    let ds = load_dataset(ctx, &or_default(data, ctx.split_dir(Split::Eval)))?;
    let queries: &[QueryRecord] = if grid.max_queries > 0 && ds.queries.len() > grid.max_queries {
        &ds.queries[..grid.max_queries]
    } else {
        &ds.queries
    };
    let cb_path = or_default(codebook, ctx.path(CODEBOOK_FILE));
    let paths = if checkpoints.is_empty() {
        checkpoints_in(&ctx.run_dir)?
    } else {
        checkpoints
    };
    let mut models: BTreeMap<Variant, (PathBuf, Loaded)> = BTreeMap::new();
    for p in paths {
        let l = Loaded::open(&p, &cb_path)?;
        let v = l.variant();
        if let Some((prev, _)) = models.get(&v) {
            return Err(Error::config(format!(
                "two checkpoints for {}: {} and {}",
                v.name(),
                prev.display(),
                p.display()
            )));
        }
        models.insert(v, (p, l));
    }
    let base = ctx.trace_settings();
    let mut rows = Vec::new();
    let t0 = Instant::now();
    for &variant in &grid.variants {
        let loaded = models.get(&variant).map(|(_, l)| l);
        for &reveal_mode in &grid.reveal_modes {
            for &fraction in &grid.reveal_fractions {
                for &ns in &grid.num_scales {
                    let settings = TraceSettings {
                        reveal_mode,
                        reveal_fraction: fraction,
                        scales: grid.scales(ns),
                        decoding: grid.decoding,
                        num_masks: *grid.num_masks.iter().max().expect("validated grid"),
                        occlusion_threshold: None,
                        ..base.clone()
                    };
                    let row = |mode: TraceMode, mm: usize, status: &str, reason: Option<String>| AblationRow {
                        variant,
                        mode,
                        reveal_mode,
                        reveal_fraction: fraction,
                        num_masks: mm,
                        num_scales: ns,
                        status: status.into(),
                        reason,
                        metrics: None,
                        heldout_ce: None,
                    };
                    let Some(loaded) = loaded else {
                        for &mode in &grid.modes {
                            for &mm in &grid.num_masks {
                                rows.push(row(mode, mm, "missing_checkpoint", Some(format!("no {} checkpoint given", variant.name()))));
                            }
                        }
                        continue;
                    };
                    if variant == Variant::DistributionalRaster
                        && !matches!(reveal_mode, RevealMode::RasterPrefix | RevealMode::Full)
                    {
                        for &mode in &grid.modes {
                            for &mm in &grid.num_masks {
                                rows.push(row(
                                    mode,
                                    mm,
                                    "unsupported",
                                    Some(format!("the raster model cannot condition on {}", reveal_mode.name())),
                                ));
                            }
                        }
                        continue;
                    }
                    let tracer = loaded.tracer()?;
                    let modes: Vec<TraceMode> = grid
                        .modes
                        .iter()
                        .copied()
                        .filter(|&m| m == TraceMode::Rgb || variant.is_distributional())
                        .collect();
                    let ce = heldout_ce(&tracer, &ds, &settings)?;
                    let aggs = if modes.is_empty() {
                        Vec::new()
                    } else {
                        trace_queries(ctx, &tracer, &ds, queries, &settings, &modes, &grid.num_masks)?
                    };
                    for &mode in &grid.modes {
                        for (ci, &mm) in grid.num_masks.iter().enumerate() {
                            let Some(mi) = modes.iter().position(|&m| m == mode) else {
                                rows.push(row(
                                    mode,
                                    mm,
                                    "unsupported",
                                    Some(format!("{} maps need a distributional model", mode.name())),
                                ));
                                continue;
                            };
                            let records: Vec<EvalRecord> = queries
                                .iter()
                                .zip(&aggs)
                                .enumerate()
                                .map(|(i, (q, a))| {
                                    let e = a[ci][mi].estimate([q.x, q.y], None);
                                    EvalRecord {
                                        query: i,
                                        pred: e.target,
                                        pred_occluded: e.occluded,
                                        gt: [q.gt_x, q.gt_y],
                                        gt_occluded: q.occluded,
                                    }
                                })
                                .collect();
                            let mut r = row(mode, mm, "ok", None);
                            r.metrics = Some(MetricsReport::compute(&records, &ctx.cfg.metrics.thresholds)?);
                            r.heldout_ce = ce;
                            rows.push(r);
                        }
                    }
                    ctx.log.event(
                        "ablate_cell",
                        json!({"variant": variant.name(), "reveal_mode": reveal_mode.name(), "reveal_fraction": fraction,
                               "num_scales": ns, "seconds": t0.elapsed().as_secs_f64()}),
                    );
                }
            }
        }
    }
    sort_rows(&mut rows);
    io::write_json(&ctx.path("ablation.json"), &rows)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv_row(
        &mut csv,
        &[
            "variant", "mode", "reveal_mode", "reveal_fraction", "num_masks", "num_scales", "status", "ad", "aj",
            "delta_avg", "oa", "heldout_ce", "reason",
        ],
    )?;
    for r in &rows {
        let m = r.metrics.as_ref();
        csv_row(
            &mut csv,
            &[
                r.variant.name().to_string(),
                r.mode.name().to_string(),
                r.reveal_mode.name().to_string(),
                r.reveal_fraction.to_string(),
                r.num_masks.to_string(),
                r.num_scales.to_string(),
                r.status.clone(),
                opt(m.and_then(|m| m.ad)),
                opt(m.map(|m| m.aj)),
                opt(m.and_then(|m| m.delta_avg)),
                opt(m.map(|m| m.oa)),
                opt(r.heldout_ce),
                r.reason.clone().unwrap_or_default(),
            ],
        )?;
    }
    write_csv(&ctx.path("ablation.csv"), csv)?;
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    let summary = json!({"rows": rows.len(), "ok": ok, "table": ctx.path("ablation.csv"),
                         "best": rows.first().filter(|r| r.status == "ok")});
    ctx.log.event("ablate", json!({"rows": rows.len(), "ok": ok}));
    Ok(summary)
}

/// Rows with an AD first, ascending; the rest keep grid order.
pub fn sort_rows(rows: &mut [AblationRow]) {
    rows.sort_by(|a, b| match (a.ad(), b.ad()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

pub fn plot_run(
    ctx: &Context,
    data: Option<PathBuf>,
    records: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    limit: usize,
) -> Result<Value> {
    let ds = load_dataset(ctx, &or_default(data, ctx.split_dir(Split::Eval)))?;
    let records = read_records(&or_default(records, ctx.path(RECORDS_FILE)))?;
    let paired = pair_records(&records, &ds.queries)?;
    let dir = ctx.path("plots");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let index = clip_index(&ds);
    let zoom = 4;
    for (r, e) in records.iter().zip(&paired) {
        let (_, f2) = query_frames(&ds, &index, &ds.queries[r.query])?;
        let gt = (!e.gt_occluded).then_some(e.gt);
        let img = plot::overlay(f2, [r.x, r.y], e.pred, gt, zoom);
        io::write_frame(&dir.join(format!("overlay_{:04}.png", r.query)), &img)?;
    }
    let ck = or_default(checkpoint, ctx.path(CHECKPOINT_FILE));
    let mut panels = 0;
    if ck.exists() && limit > 0 {
        let loaded = Loaded::open(&ck, &or_default(codebook, ctx.path(CODEBOOK_FILE)))?;
        let tracer = loaded.tracer()?;
        let settings = ctx.trace_settings();
        let mode = if loaded.variant().is_distributional() {
            settings.mode
        } else {
            TraceMode::Rgb
        };
        let (mw, mh) = tracer.frame_size();
        for (i, q) in ds.queries.iter().enumerate().take(limit) {
            let (f1, f2) = query_frames(&ds, &index, q)?;
            let aggs = tracer.aggregate(
                f1,
                f2,
                [q.x, q.y],
                &TraceSettings {
                    rng_seed: seed::derive(settings.rng_seed, seed::Stream::Query, i as u64),
                    ..settings.clone()
                },
                &[mode],
            )?;
            let heat = plot::heatmap(&aggs[0].map, f1.width() * zoom, f1.height() * zoom);
            io::write_frame(&dir.join(format!("heatmap_{i:04}.png")), &heat)?;
            let a = f1.resize_nearest(mw, mh);
            let b = f2.resize_nearest(mw, mh);
            let sx = mw as f64 / f1.width() as f64;
            let sy = mh as f64 / f1.height() as f64;
            let perturb = PerturbSpec {
                center: [(q.x + 0.5) * sx - 0.5, (q.y + 0.5) * sy - 0.5],
                sigma: settings.sigma,
                amplitude: settings.amplitude,
            };
            let s = seed::derive(settings.rng_seed, seed::Stream::Query, i as u64);
            let (mask, order) = tracer.mask_and_order(&settings, s)?;
            let input = TraceInput {
                f1: &a,
                f2: &b,
                perturb,
                mask: &mask,
                order: &order,
                sampling_seed: seed::derive(s, seed::Stream::Sampling, 0),
            };
            let maps = tracer.trace_batch(std::slice::from_ref(&input), &settings)?.remove(0);
            let pert = inject_perturbation(&a, &perturb)?;
            let map_img = plot::heatmap(maps.get(mode)?, mw, mh);
            let panel = plot::panel(&[a, pert, maps.clean.clone(), maps.perturbed.clone(), map_img]);
            let big = panel.resize_nearest(panel.width() * zoom, panel.height() * zoom);
            io::write_frame(&dir.join(format!("panel_{i:04}.png")), &big)?;
            panels += 1;
        }
    }
    let summary = json!({"plots": dir, "overlays": records.len(), "heatmaps": panels, "panels": panels});
    ctx.log.event("plot", summary.clone());
    Ok(summary)
}

/// Run directory name: UTC timestamp and config digest.
pub fn run_dir_name(cfg: &RunConfig) -> String {
    let now = time::OffsetDateTime::now_utc();
    let fmt = time::macros::format_description!("[year][month][day]T[hour][minute][second]Z");
    let ts = now.format(&fmt).expect("fixed timestamp format");
    format!("{ts}-{}", &cfg.digest()[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heldout_selection_spreads_over_slots() {
        let s = heldout_stride(0.1);
        assert_eq!(s, Some(10));
        let held: Vec<usize> = (0..30).filter(|&i| is_heldout(i, s)).collect();
        assert_eq!(held, vec![9, 19, 29]);
        assert!(!(0..30).any(|i| is_heldout(i, heldout_stride(0.0))));
    }

    #[test]
    fn rows_sort_by_ad_with_failures_last() {
        let mk = |ad: Option<f64>, status: &str| AblationRow {
            variant: Variant::DistributionalRandomAccess,
            mode: TraceMode::Kl,
            reveal_mode: RevealMode::RandomSubset,
            reveal_fraction: 0.1,
            num_masks: 1,
            num_scales: 1,
            status: status.into(),
            reason: None,
            metrics: ad.map(|a| MetricsReport {
                ad: Some(a),
                aj: 0.0,
                delta_avg: Some(0.0),
                oa: 0.0,
                per_threshold: Vec::new(),
                queries: 1,
                visible: 1,
            }),
            heldout_ce: None,
        };
        let mut rows = vec![mk(None, "unsupported"), mk(Some(3.0), "ok"), mk(Some(1.0), "ok")];
        sort_rows(&mut rows);
        assert_eq!(rows.iter().map(|r| r.ad()).collect::<Vec<_>>(), vec![Some(1.0), Some(3.0), None]);
    }

    #[test]
    fn run_dir_name_shape() {
        let n = run_dir_name(&RunConfig::default());
        assert_eq!(n.len(), 16 + 1 + 8);
        assert!(n.ends_with(&RunConfig::default().digest()[..8]));
    }
}
