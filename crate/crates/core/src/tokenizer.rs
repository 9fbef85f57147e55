//! Local patch tokenizer: k-means vector quantisation of raw RGB patches.
//!
//! Every patch is coded from its own pixels only, so an edit inside one patch
//! can change at most one token.

use std::collections::HashMap;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::seed::{self, Stream};

pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_CODES: usize = 512;
pub const DEFAULT_ITERS: usize = 20;

const MAGIC: &[u8; 4] = b"KLCB";
const VERSION: u32 = 1;

/// Frozen set of patch centroids.
#[derive(Clone, PartialEq)]
pub struct Codebook {
    patch: usize,
    codes: Vec<f32>,
    digest: [u8; 8],
}

impl std::fmt::Debug for Codebook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Codebook(K={}, patch={}, {})", self.len(), self.patch, self.digest_hex())
    }
}

/// Grid of code indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub gh: usize,
    pub gw: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(gh: usize, gw: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != gh * gw {
            return Err(Error::dim(format!("{} tokens for a {gh}x{gw} grid", tokens.len())));
        }
        Ok(TokenGrid { gh, gw, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn header_bytes(k: usize, dim: usize, codes: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + codes.len() * 4 + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for c in codes {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

fn digest_of(bytes: &[u8]) -> [u8; 8] {
    let full = Sha256::digest(bytes);
    let mut d = [0u8; 8];
    d.copy_from_slice(&full[..8]);
    d
}

impl Codebook {
    pub fn new(patch: usize, codes: Vec<f32>) -> Result<Self> {
        let dim = patch * patch * 3;
        if patch == 0 || codes.is_empty() || codes.len() % dim != 0 {
            return Err(Error::dim(format!("{} values do not form {dim}-wide codes", codes.len())));
        }
        if codes.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite centroid".into()));
        }
        let digest = digest_of(&header_bytes(codes.len() / dim, dim, &codes));
        Ok(Codebook { patch, codes, digest })
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Values per code (`patch * patch * 3`).
    pub fn dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn code(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.codes[i * d..(i + 1) * d]
    }

    pub fn codes(&self) -> &[f32] {
        &self.codes
    }

    pub fn digest(&self) -> [u8; 8] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header_bytes(self.len(), self.dim(), &self.codes);
        out.extend_from_slice(&self.digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |offset: usize, reason: &str| Error::malformed(path, offset as u64, reason);
        if bytes.len() < 16 {
            return Err(bad(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(0, "bad magic, expected KLCB"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad(4, "unsupported version"));
        }
        let k = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let patch = ((dim / 3) as f64).sqrt().round() as usize;
        if k == 0 || patch == 0 || patch * patch * 3 != dim {
            return Err(bad(8, "code count or patch width invalid"));
        }
        let end = 16 + k * dim * 4;
        if bytes.len() != end + 8 {
            return Err(bad(bytes.len().min(end), "payload length does not match header"));
        }
        let codes: Vec<f32> = bytes[16..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = codes.iter().position(|c| !c.is_finite()) {
            return Err(bad(16 + i * 4, "non-finite centroid"));
        }
        let cb = Codebook::new(patch, codes)?;
        if cb.digest[..] != bytes[end..] {
            return Err(bad(end, "digest mismatch"));
        }
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Codebook::from_bytes(&bytes, path)
    }

    /// Index of the nearest code (squared Euclidean), ties to the lowest index.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, c) in self.codes.chunks_exact(self.dim()).enumerate() {
            let d = sq_dist(patch, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn encode(&self, frame: &Frame) -> Result<TokenGrid> {
        let p = self.patch;
        if frame.width() % p != 0 || frame.height() % p != 0 {
            return Err(Error::dim(format!(
                "{}x{} frame is not divisible into {p}x{p} patches",
                frame.width(),
                frame.height()
            )));
        }
        let (gh, gw) = (frame.height() / p, frame.width() / p);
        let mut buf = vec![0f32; self.dim()];
        let mut tokens = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                read_patch(frame, p, gx, gy, &mut buf);
                tokens.push(self.nearest(&buf) as u32);
            }
        }
        Ok(TokenGrid { gh, gw, tokens })
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Frame> {
        let p = self.patch;
        let k = self.len();
        if let Some(bad) = grid.tokens.iter().find(|&&t| t as usize >= k) {
            return Err(Error::dim(format!("token {bad} out of range for K={k}")));
        }
        let mut frame = Frame::filled(grid.gw * p, grid.gh * p, [0; 3]);
        for gy in 0..grid.gh {
            for gx in 0..grid.gw {
                let code = self.code(grid.tokens[gy * grid.gw + gx] as usize);
                for y in 0..p {
                    for x in 0..p {
                        let o = (y * p + x) * 3;
                        let rgb = [0, 1, 2].map(|c| code[o + c].round().clamp(0.0, 255.0) as u8);
                        frame.set(gx * p + x, gy * p + y, rgb);
                    }
                }
            }
        }
        Ok(frame)
    }
}

#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Copy patch `(gx, gy)` into `out` as `[y][x][rgb]` floats.
pub fn read_patch(frame: &Frame, p: usize, gx: usize, gy: usize, out: &mut [f32]) {
    for y in 0..p {
        for x in 0..p {
            let rgb = frame.get(gx * p + x, gy * p + y);
            let o = (y * p + x) * 3;
            out[o] = rgb[0] as f32;
            out[o + 1] = rgb[1] as f32;
            out[o + 2] = rgb[2] as f32;
        }
    }
}

/// Distinct patches of a frame sample with multiplicities, in byte order.
fn unique_patches(frames: &[Frame], p: usize) -> Result<(Vec<Vec<u8>>, Vec<f64>)> {
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for f in frames {
        if f.width() % p != 0 || f.height() % p != 0 {
            return Err(Error::dim("sample frame not divisible into patches"));
        }
        for gy in 0..f.height() / p {
            for gx in 0..f.width() / p {
                let mut key = Vec::with_capacity(p * p * 3);
                for y in 0..p {
                    for x in 0..p {
                        key.extend_from_slice(&f.get(gx * p + x, gy * p + y));
                    }
                }
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(Vec<u8>, u64)> = counts.into_iter().collect();
    entries.sort_unstable();
    let weights = entries.iter().map(|(_, c)| *c as f64).collect();
    Ok((entries.into_iter().map(|(k, _)| k).collect(), weights))
}

/// Fit a `k`-code codebook with Lloyd iterations over the patches of `frames`.
pub fn fit_codebook(frames: &[Frame], patch: usize, k: usize, iters: usize, rng_seed: u64) -> Result<Codebook> {
    fit_codebook_traced(frames, patch, k, iters, rng_seed).map(|(cb, _)| cb)
}

/// As [`fit_codebook`], also returning the mean squared patch distance before
/// the first update and after every iteration (`iters + 1` values).
///
/// Clusters that lose all members are re-seeded with the points farthest from
/// their current centroid, which can only lower the objective.
pub fn fit_codebook_traced(
    frames: &[Frame],
    patch: usize,
    k: usize,
    iters: usize,
    rng_seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    if frames.is_empty() {
        return Err(Error::Data("empty frame sample".into()));
    }
    if k == 0 || iters == 0 {
        return Err(Error::config("K and iters must be at least 1"));
    }
    let dim = patch * patch * 3;
    let (uniq, weights) = unique_patches(frames, patch)?;
    if uniq.len() < k {
        return Err(Error::Data(format!(
            "sample has {} distinct patches, fewer than K={k}",
            uniq.len()
        )));
    }
    let n = uniq.len();
    let points: Vec<f32> = uniq.iter().flat_map(|p| p.iter().map(|&b| b as f32)).collect();
    let total_w: f64 = weights.iter().sum();

    let mut centroids = seed_centroids(&points, &weights, dim, k, rng_seed);

    let point_norms: Vec<f32> = points.chunks_exact(dim).map(|p| p.iter().map(|v| v * v).sum()).collect();
    let mut assign = vec![0usize; n];
    let mut dist = vec![0f64; n];
    let mut trace = Vec::with_capacity(iters + 1);
    let mut scores = vec![0f32; n * k];

    let assign_all = |centroids: &[f32], assign: &mut [usize], dist: &mut [f64], scores: &mut [f32]| -> f64 {
        let cn: Vec<f32> = centroids.chunks_exact(dim).map(|c| c.iter().map(|v| v * v).sum()).collect();
        // scores = points · centroidsᵀ
        unsafe {
            matrixmultiply::sgemm(
                n,
                dim,
                k,
                1.0,
                points.as_ptr(),
                dim as isize,
                1,
                centroids.as_ptr(),
                1,
                dim as isize,
                0.0,
                scores.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let mut obj = 0.0;
        for i in 0..n {
            let row = &scores[i * k..(i + 1) * k];
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (j, s) in row.iter().enumerate() {
                let d = point_norms[i] - 2.0 * s + cn[j];
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assign[i] = best;
            let p = &points[i * dim..(i + 1) * dim];
            let c = &centroids[best * dim..(best + 1) * dim];
            dist[i] = p.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            obj += weights[i] * dist[i];
        }
        obj / total_w
    };

    trace.push(assign_all(&centroids, &mut assign, &mut dist, &mut scores));
    for _ in 0..iters {
        let mut sums = vec![0f64; k * dim];
        let mut mass = vec![0f64; k];
        for i in 0..n {
            let c = assign[i];
            mass[c] += weights[i];
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                *s += weights[i] * v as f64;
            }
        }
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let mut far_iter = far.into_iter();
        for c in 0..k {
            let dst = &mut centroids[c * dim..(c + 1) * dim];
            if mass[c] > 0.0 {
                for (d, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = (s / mass[c]) as f32;
                }
            } else if let Some(i) = far_iter.next() {
                dst.copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
        trace.push(assign_all(&centroids, &mut assign, &mut dist, &mut scores));
    }
    Ok((Codebook::new(patch, centroids)?, trace))
}

/// k-means++ seeding: distinct sample patches drawn with probability
/// proportional to multiplicity times squared distance to the chosen set.
fn seed_centroids(points: &[f32], weights: &[f64], dim: usize, k: usize, rng_seed: u64) -> Vec<f32> {
    let n = weights.len();
    let mut rng = seed::rng(rng_seed, Stream::Codebook, 0);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let total: f64 = weights.iter().sum();
    let pick = |scores: &[f64], taken: &[bool], rng: &mut rand_chacha::ChaCha8Rng| -> usize {
        let sum: f64 = scores.iter().zip(taken).filter(|(_, t)| !**t).map(|(s, _)| s).sum();
        if sum <= 0.0 {
            return (0..n).find(|&i| !taken[i]).unwrap();
        }
        let mut u = rng.random::<f64>() * sum;
        let mut last = 0;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            last = i;
            u -= scores[i];
            if u < 0.0 {
                return i;
            }
        }
        last
    };
    let first = pick(&weights.iter().map(|w| w / total).collect::<Vec<_>>(), &taken, &mut rng);
    chosen.push(first);
    taken[first] = true;
    let mut best = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let c = &points[chosen[chosen.len() - 1] * dim..][..dim];
        for i in 0..n {
            let d = sq_dist(&points[i * dim..(i + 1) * dim], c) as f64;
            if d < best[i] {
                best[i] = d;
            }
        }
        let scores: Vec<f64> = best.iter().zip(weights).map(|(d, w)| d * w).collect();
        let next = pick(&scores, &taken, &mut rng);
        chosen.push(next);
        taken[next] = true;
    }
    chosen.iter().flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied()).collect()
}

/// Mean squared error per channel value between a frame and its reconstruction.
pub fn reconstruction_mse(cb: &Codebook, frame: &Frame) -> Result<f64> {
    let rec = cb.decode(&cb.encode(frame)?)?;
    let se: f64 = frame
        .pixels()
        .iter()
        .zip(rec.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(se / frame.pixels().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_color_frames() -> Vec<Frame> {
        let mut f = Frame::filled(8, 8, [10, 20, 30]);
        for y in 0..4 {
            for x in 0..8 {
                f.set(x, y, [200, 100, 0]);
            }
        }
        vec![f]
    }

    #[test]
    fn single_code_is_the_mean_patch() {
        let frames = two_color_frames();
        let cb = fit_codebook(&frames, 4, 1, 3, 0).unwrap();
        let c = cb.code(0);
        assert!((c[0] - 105.0).abs() < 1e-4);
        assert!((c[1] - 60.0).abs() < 1e-4);
        assert!((c[2] - 15.0).abs() < 1e-4);
    }

    #[test]
    fn two_colors_two_codes_are_exact() {
        let frames = two_color_frames();
        let cb = fit_codebook(&frames, 4, 2, 5, 1).unwrap();
        let mut firsts: Vec<[f32; 3]> = (0..2).map(|i| [cb.code(i)[0], cb.code(i)[1], cb.code(i)[2]]).collect();
        firsts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(firsts, vec![[10.0, 20.0, 30.0], [200.0, 100.0, 0.0]]);
        assert_eq!(reconstruction_mse(&cb, &frames[0]).unwrap(), 0.0);
    }

    #[test]
    fn fitting_errors() {
        assert!(matches!(fit_codebook(&[], 4, 1, 1, 0), Err(Error::Data(_))));
        let frames = two_color_frames();
        assert!(matches!(fit_codebook(&frames, 4, 3, 1, 0), Err(Error::Data(_))));
        assert!(fit_codebook(&frames, 4, 1, 0, 0).is_err());
    }

    #[test]
    fn checkerboard_alternates() {
        let black = vec![0.0; 48];
        let white = vec![255.0; 48];
        let cb = Codebook::new(4, [black, white].concat()).unwrap();
        let mut f = Frame::filled(16, 8, [0; 3]);
        for gy in 0..2 {
            for gx in 0..4 {
                if (gx + gy) % 2 == 1 {
                    for y in 0..4 {
                        for x in 0..4 {
                            f.set(gx * 4 + x, gy * 4 + y, [255; 3]);
                        }
                    }
                }
            }
        }
        let g = cb.encode(&f).unwrap();
        assert_eq!(g.tokens, vec![0, 1, 0, 1, 1, 0, 1, 0]);
        assert_eq!(cb.decode(&g).unwrap(), f);
    }

    #[test]
    fn constant_frame_single_index() {
        let codes: Vec<f32> = [[0.0f32; 48], [77.0; 48], [200.0; 48]].concat();
        let cb = Codebook::new(4, codes).unwrap();
        let g = cb.encode(&Frame::filled(8, 8, [77; 3])).unwrap();
        assert!(g.tokens.iter().all(|&t| t == 1));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let codes: Vec<f32> = [[0.0f32; 48], [20.0; 48]].concat();
        let cb = Codebook::new(4, codes).unwrap();
        assert_eq!(cb.nearest(&[10.0; 48]), 0);
    }

    #[test]
    fn decode_rejects_bad_tokens() {
        let cb = Codebook::new(4, vec![0.0; 48]).unwrap();
        let g = TokenGrid::new(1, 1, vec![1]).unwrap();
        assert!(matches!(cb.decode(&g), Err(Error::Dimension(_))));
        assert!(cb.encode(&Frame::filled(6, 4, [0; 3])).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let codes: Vec<f32> = (0..96).map(|i| i as f32 * 1.5).collect();
        let cb = Codebook::new(4, codes).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(bytes.len(), 16 + 96 * 4 + 8);
        let back = Codebook::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, cb);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        match Codebook::from_bytes(&bad, Path::new("x")) {
            Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 16 + 96 * 4),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(
            Codebook::from_bytes(&bad, Path::new("x")),
            Err(Error::Malformed { offset: 0, .. })
        ));
    }

    fn random_frames(seed: u64) -> Vec<Frame> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..2)
            .map(|_| {
                let px: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.random_range(0..4u8) * 60).collect();
                Frame::from_raw(16, 16, px).unwrap()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn objective_never_increases(seed in 0u64..1000, k in 1usize..12) {
            let frames = random_frames(seed);
            let (_, trace) = fit_codebook_traced(&frames, 4, k, 6, seed).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "{trace:?}");
            }
        }

        #[test]
        fn quantizer_is_idempotent_and_optimal(seed in 0u64..1000) {
            let frames = random_frames(seed);
            let cb = fit_codebook(&frames, 4, 6, 3, seed).unwrap();
            let g = cb.encode(&frames[0]).unwrap();
            let again = cb.encode(&cb.decode(&g).unwrap()).unwrap();
            prop_assert_eq!(&again, &g);
            let mut buf = vec![0f32; 48];
            for (i, &t) in g.tokens.iter().enumerate() {
                read_patch(&frames[0], 4, i % 4, i / 4, &mut buf);
                let d = sq_dist(&buf, cb.code(t as usize));
                for j in 0..cb.len() {
                    prop_assert!(d <= sq_dist(&buf, cb.code(j)));
                }
            }
        }

        #[test]
        fn edits_stay_local(seed in 0u64..1000, px in 0usize..16, py in 0usize..16, v in any::<[u8; 3]>()) {
            let frames = random_frames(seed);
            let cb = fit_codebook(&frames, 4, 8, 3, seed).unwrap();
            let before = cb.encode(&frames[0]).unwrap();
            let mut edited = frames[0].clone();
            edited.set(px, py, v);
            let after = cb.encode(&edited).unwrap();
            let changed: Vec<usize> = (0..16).filter(|&i| before.tokens[i] != after.tokens[i]).collect();
            prop_assert!(changed.len() <= 1);
            if let Some(&i) = changed.first() {
                prop_assert_eq!(i, (py / 4) * 4 + px / 4);
            }
        }
    }
}
