//! Run configuration: versioned JSON, layered file and dotted-path overrides.

use std::collections::BTreeMap;
use std::path::Path;

use kltrace_core::model::{ModelConfig, RevealMode, TrainConfig, Variant};
use kltrace_core::synth::{DatasetSpec, QuerySpec, Scenario, WorldParams};
use kltrace_core::tracer::{Decoding, TraceMode, TraceSettings};
use kltrace_core::{seed, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Worker threads for extraction and sweeps; 0 uses every core.
    pub workers: usize,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub trace: TraceSettings,
    pub metrics: MetricsConfig,
    pub ablation: AblationGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub world: WorldParams,
    pub train: SplitConfig,
    pub eval: SplitConfig,
    pub calibration: SplitConfig,
    /// Share of the training clips kept aside for the held-out loss.
    pub heldout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub scenarios: BTreeMap<Scenario, usize>,
    pub queries: QuerySpec,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            scenarios: Scenario::ALL.iter().map(|&s| (s, 0)).collect(),
            queries: QuerySpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Calibration,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Calibration];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Calibration => "calibration",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}`")))
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        let counts = |n: [usize; 6]| Scenario::ALL.iter().copied().zip(n).collect();
        let mut calibration = BTreeMap::new();
        for s in Scenario::ALL {
            calibration.insert(s, if s == Scenario::OccluderPass { 40 } else { 0 });
        }
        DataConfig {
            world: WorldParams::default(),
            train: SplitConfig {
                scenarios: counts([200; 6]),
                queries: QuerySpec::default(),
            },
            eval: SplitConfig {
                scenarios: counts([34, 33, 34, 33, 33, 33]),
                queries: QuerySpec::default(),
            },
            calibration: SplitConfig {
                scenarios: calibration,
                queries: QuerySpec {
                    visible_fraction: 0.5,
                    ..QuerySpec::default()
                },
            },
            heldout_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn split(&self, split: Split) -> &SplitConfig {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::Calibration => &self.calibration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub codes: usize,
    pub iters: usize,
    pub patch: usize,
    /// Training frames used for k-means; 0 uses all of them.
    pub max_frames: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codes: kltrace_core::tokenizer::DEFAULT_CODES,
            iters: kltrace_core::tokenizer::DEFAULT_ITERS,
            patch: kltrace_core::tokenizer::DEFAULT_PATCH,
            max_frames: 0,
        }
    }
}

/// Architecture settings; vocabulary, grid and patch follow from the
/// tokenizer and world sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub variant: Variant,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            variant: m.variant,
            layers: m.layers,
            model_dim: m.model_dim,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub thresholds: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            thresholds: kltrace_core::metrics::DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

/// Axes of the ablation sweep. Every combination becomes one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub modes: Vec<TraceMode>,
    pub variants: Vec<Variant>,
    pub reveal_modes: Vec<RevealMode>,
    pub num_masks: Vec<usize>,
    /// Number of zoom levels, taking the first entries of `scale_ladder`.
    pub num_scales: Vec<usize>,
    pub scale_ladder: Vec<f64>,
    pub reveal_fractions: Vec<f64>,
    pub decoding: Decoding,
    /// Cap on evaluation queries per row; 0 keeps all.
    pub max_queries: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            modes: vec![TraceMode::Kl, TraceMode::Rgb],
            variants: vec![
                Variant::DistributionalRandomAccess,
                Variant::DistributionalRaster,
                Variant::DeterministicL2,
            ],
            reveal_modes: RevealMode::ALL.to_vec(),
            num_masks: vec![1, 5],
            num_scales: vec![1, 2],
            scale_ladder: vec![1.0, 0.5, 0.25],
            reveal_fractions: vec![0.1],
            decoding: Decoding::Sequential,
            max_queries: 0,
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = self.modes.is_empty()
            || self.variants.is_empty()
            || self.reveal_modes.is_empty()
            || self.num_masks.is_empty()
            || self.num_scales.is_empty()
            || self.reveal_fractions.is_empty();
        if empty {
            return Err(Error::config("every ablation axis needs at least one value"));
        }
        if self.num_masks.contains(&0) {
            return Err(Error::config("ablation num_masks entries must be at least 1"));
        }
        if self.num_scales.iter().any(|&n| n == 0 || n > self.scale_ladder.len()) {
            return Err(Error::config(format!(
                "ablation num_scales entries must lie in 1..={}",
                self.scale_ladder.len()
            )));
        }
        Ok(())
    }

    pub fn scales(&self, n: usize) -> Vec<f64> {
        self.scale_ladder[..n].to_vec()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            workers: 0,
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            trace: TraceSettings::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationGrid::default(),
        }
    }
}

impl RunConfig {
    /// Default config, then `base` layered on top, then each `key=value`.
    pub fn resolve(base: Option<Value>, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("serializable config");
        if let Some(b) = base {
            merge(&mut v, b, "")?;
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))?;
            set_path(&mut v, key, parse_value(raw))?;
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::config(format!("config does not match the schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_value(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let w = &self.data.world;
        let p = self.tokenizer.patch;
        if p == 0 || w.width % p != 0 || w.height % p != 0 {
            return Err(Error::config(format!(
                "frame size {}x{} is not a multiple of the patch size {p}",
                w.width, w.height
            )));
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(Error::config("heldout_fraction must lie in [0, 1)"));
        }
        if self.metrics.thresholds.is_empty() {
            return Err(Error::config("metrics.thresholds is empty"));
        }
        self.model_config().validate()?;
        self.train.validate()?;
        self.trace.validate()?;
        self.ablation.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let w = &self.data.world;
        let p = self.tokenizer.patch;
        ModelConfig {
            layers: self.model.layers,
            model_dim: self.model.model_dim,
            heads: self.model.heads,
            vocab: self.tokenizer.codes,
            grid: [w.height / p, w.width / p],
            patch: p,
            variant: self.model.variant,
            rng_seed: seed::derive(self.seed, seed::Stream::Init, 0),
            mlp_ratio: self.model.mlp_ratio,
            final_norm: true,
        }
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        let s = self.data.split(split);
        DatasetSpec {
            seed: seed::derive(self.seed, seed::Stream::Clip, split as u64),
            scenarios: s.scenarios.iter().filter(|(_, &n)| n > 0).map(|(&k, &n)| (k, n)).collect(),
            world: self.data.world.clone(),
            queries: s.queries.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON, hex.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable config");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Overlay `src` on `dst`. Objects merge key by key and every key must
/// already exist; anything else replaces the old value.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = d
                    .get_mut(&k)
                    .ok_or_else(|| Error::config(format!("unknown config key `{p}`")))?;
                merge(slot, v, &p)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
    }
    *cur = value;
    Ok(())
}
