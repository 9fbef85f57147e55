//! On-disk dataset layout: PNG frames, Middlebury `.flo` flow, grayscale
//! occlusion PNGs, `queries.jsonl` and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{FlowField, Frame, OcclusionMask};
use crate::synth::{Clip, QueryRecord, Scenario, SceneSpec};

pub const FLO_MAGIC: f32 = 202021.25;
pub const DATASET_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::dim(format!("png header: {e}")))?;
        w.write_image_data(data)
            .map_err(|e| Error::dim(format!("png data: {e}")))?;
    }
    Ok(out)
}

fn decode_png(path: &Path, bytes: &[u8], want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: String| Error::malformed(path, 0, reason);
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit {want:?}, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

pub fn frame_png(frame: &Frame) -> Result<Vec<u8>> {
    encode_png(frame.width(), frame.height(), png::ColorType::Rgb, frame.pixels())
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_bytes(path, &frame_png(frame)?)
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let bytes = read_bytes(path)?;
    let (w, h, px) = decode_png(path, &bytes, png::ColorType::Rgb)?;
    Frame::from_raw(w, h, px)
}

pub fn occlusion_png(occ: &OcclusionMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = occ.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode_png(occ.width, occ.height, png::ColorType::Grayscale, &data)
}

pub fn read_occlusion(path: &Path) -> Result<OcclusionMask> {
    let bytes = read_bytes(path)?;
    let (width, height, data) = decode_png(path, &bytes, png::ColorType::Grayscale)?;
    let mut mask = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        match v {
            0 => mask.push(false),
            255 => mask.push(true),
            _ => {
                return Err(Error::malformed(
                    path,
                    0,
                    format!("occlusion pixel {i} has value {v}, expected 0 or 255"),
                ))
            }
        }
    }
    Ok(OcclusionMask { width, height, mask })
}

/// Middlebury `.flo` bytes: magic float, i32 width, i32 height, interleaved `(u, v)` f32.
pub fn flo_bytes(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.vectors.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for [u, v] in &flow.vectors {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_flo(path: &Path, bytes: &[u8]) -> Result<FlowField> {
    let word = |off: usize| -> Result<[u8; 4]> {
        bytes
            .get(off..off + 4)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| Error::malformed(path, off as u64, "unexpected end of file"))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(Error::malformed(path, 0, "missing PIEH magic"));
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 || h <= 0 {
        return Err(Error::malformed(path, 4, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expect = 12 + w * h * 8;
    if bytes.len() != expect {
        let off = bytes.len().min(expect);
        return Err(Error::malformed(
            path,
            off as u64,
            format!("expected {expect} bytes for {w}x{h}, found {}", bytes.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let off = 12 + i * 8;
        let u = f32::from_le_bytes(word(off)?);
        let v = f32::from_le_bytes(word(off + 4)?);
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::malformed(path, off as u64, "non-finite flow vector"));
        }
        vectors.push([u, v]);
    }
    Ok(FlowField {
        width: w,
        height: h,
        vectors,
    })
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    parse_flo(path, &read_bytes(path)?)
}

/// Convert a serde_json line/column position into a byte offset within `text`.
fn json_offset(text: &str, err: &serde_json::Error) -> u64 {
    let line = err.line().max(1);
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + err.column().saturating_sub(1)) as u64
}

pub fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::malformed(path, json_offset(text, &e), e.to_string()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::malformed(path, e.valid_up_to() as u64, "invalid utf-8"))?;
    parse_json(path, text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn queries_jsonl(queries: &[QueryRecord]) -> String {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::to_string(q).expect("serializable query"));
        out.push('\n');
    }
    out
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::malformed(path, e.valid_up_to() as u64, "invalid utf-8"))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end();
        if !body.is_empty() {
            let q = serde_json::from_str(body).map_err(|e| {
                Error::malformed(path, (offset + e.column().saturating_sub(1)) as u64, e.to_string())
            })?;
            out.push(q);
        }
        offset += line.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub scenario: Scenario,
    pub frames: usize,
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub scenarios: BTreeMap<Scenario, usize>,
    /// Datasets with point labels only carry no dense flow or occlusion files.
    #[serde(default)]
    pub point_labeled: bool,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<Clip>,
    pub queries: Vec<QueryRecord>,
}

/// Content digest of a clip's frames and ground truth (hex, 16 chars).
pub fn clip_digest(clip: &Clip) -> String {
    let mut h = Sha256::new();
    for f in &clip.frames {
        h.update((f.width() as u64).to_le_bytes());
        h.update((f.height() as u64).to_le_bytes());
        h.update(f.pixels());
    }
    for flow in &clip.flows {
        h.update(flo_bytes(flow));
    }
    for occ in &clip.occlusions {
        let bits: Vec<u8> = occ.mask.iter().map(|&m| m as u8).collect();
        h.update(bits);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:03}.png")
}

pub fn flow_name(a: usize, b: usize) -> String {
    format!("flow_{a:03}_{b:03}.flo")
}

pub fn occ_name(a: usize, b: usize) -> String {
    format!("occ_{a:03}_{b:03}.png")
}

pub fn manifest_for(seed: u64, clips: &[Clip]) -> Manifest {
    let mut scenarios = BTreeMap::new();
    for c in clips {
        *scenarios.entry(c.scenario).or_insert(0) += 1;
    }
    Manifest {
        version: DATASET_VERSION,
        seed,
        scenarios,
        point_labeled: false,
        clips: clips
            .iter()
            .map(|c| ClipEntry {
                id: c.id.clone(),
                scenario: c.scenario,
                frames: c.frames.len(),
                digest: clip_digest(c),
                spec: c.spec.clone(),
            })
            .collect(),
    }
}

/// Write clip directories, `queries.jsonl` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, seed: u64, clips: &[Clip], queries: &[QueryRecord]) -> Result<Manifest> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(dir)?;
    for clip in clips {
        let cdir = dir.join(&clip.id);
        mk(&cdir)?;
        for (k, f) in clip.frames.iter().enumerate() {
            write_frame(&cdir.join(frame_name(k)), f)?;
        }
        for (k, (flow, occ)) in clip.flows.iter().zip(&clip.occlusions).enumerate() {
            write_bytes(&cdir.join(flow_name(k, k + 1)), &flo_bytes(flow))?;
            write_bytes(&cdir.join(occ_name(k, k + 1)), &occlusion_png(occ)?)?;
        }
    }
    write_bytes(&dir.join("queries.jsonl"), queries_jsonl(queries).as_bytes())?;
    let manifest = manifest_for(seed, clips);
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_clip(dir: &Path, entry: &ClipEntry, dense: bool) -> Result<Clip> {
    let cdir = dir.join(&entry.id);
    let frames = (0..entry.frames)
        .map(|k| read_frame(&cdir.join(frame_name(k))))
        .collect::<Result<Vec<_>>>()?;
    let (mut flows, mut occlusions) = (Vec::new(), Vec::new());
    if dense {
        for k in 0..entry.frames.saturating_sub(1) {
            flows.push(read_flo(&cdir.join(flow_name(k, k + 1)))?);
            occlusions.push(read_occlusion(&cdir.join(occ_name(k, k + 1)))?);
        }
    }
    Ok(Clip {
        id: entry.id.clone(),
        scenario: entry.scenario,
        spec: entry.spec.clone(),
        frames,
        flows,
        occlusions,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::malformed(
            dir.join("manifest.json"),
            0,
            format!("unsupported dataset version {}", manifest.version),
        ));
    }
    let clips = manifest
        .clips
        .iter()
        .map(|e| read_clip(dir, e, !manifest.point_labeled))
        .collect::<Result<Vec<_>>>()?;
    let queries = read_queries(&dir.join("queries.jsonl"))?;
    Ok(Dataset {
        manifest,
        clips,
        queries,
    })
}
