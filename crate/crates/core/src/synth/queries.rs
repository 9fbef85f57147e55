use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::Clip;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// One point query: a frame-a pixel and its ground-truth location in frame b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub clip: String,
    pub frame_a: usize,
    pub frame_b: usize,
    pub x: f64,
    pub y: f64,
    pub gt_x: f64,
    pub gt_y: f64,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    pub per_clip: usize,
    pub visible_fraction: f64,
    /// Share of the visible queries drawn from moving pixels, when the clip has any.
    pub moving_fraction: f64,
    /// Index of the first frame of the queried pair.
    pub frame_a: usize,
}

impl Default for QuerySpec {
    fn default() -> Self {
        QuerySpec {
            per_clip: 10,
            visible_fraction: 0.8,
            moving_fraction: 0.75,
            frame_a: 0,
        }
    }
}

fn choose(pool: &mut Vec<usize>, n: usize, rng: &mut impl RngExt) -> Vec<usize> {
    // partial Fisher-Yates
    let n = n.min(pool.len());
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool[..n].to_vec()
}

/// Draw `spec.per_clip` queries from frame `spec.frame_a` of `clip`.
///
/// `round(n * visible_fraction)` queries land on pixels that stay visible in
/// the next frame, the rest on occluded pixels. Visible queries favour
/// moving pixels (static background points carry no motion signal) and fall
/// back to static ones when the clip has too few.
pub fn sample_queries(clip: &Clip, spec: &QuerySpec, rng_seed: u64) -> Result<Vec<QueryRecord>> {
    if !(0.0..=1.0).contains(&spec.visible_fraction) || !(0.0..=1.0).contains(&spec.moving_fraction) {
        return Err(Error::config("query fractions must lie in [0, 1]"));
    }
    let n = spec.per_clip;
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = spec.frame_a;
    let (flow, occ) = match (clip.flows.get(a), clip.occlusions.get(a)) {
        (Some(f), Some(o)) => (f, o),
        _ => return Err(Error::Data(format!("clip {} has no ground truth for frame {a}", clip.id))),
    };
    let n_vis = (n as f64 * spec.visible_fraction).round() as usize;
    let n_occ = n - n_vis;

    let mut moving = Vec::new();
    let mut still = Vec::new();
    let mut hidden = Vec::new();
    for (i, (&o, v)) in occ.mask.iter().zip(&flow.vectors).enumerate() {
        if o {
            hidden.push(i);
        } else if v[0] != 0.0 || v[1] != 0.0 {
            moving.push(i);
        } else {
            still.push(i);
        }
    }
    if moving.len() + still.len() < n_vis {
        return Err(Error::Data(format!(
            "clip {} has {} visible pixels, {n_vis} requested",
            clip.id,
            moving.len() + still.len()
        )));
    }
    if hidden.len() < n_occ {
        return Err(Error::Data(format!(
            "clip {} has {} occluded pixels, {n_occ} requested",
            clip.id,
            hidden.len()
        )));
    }

    let mut rng = seed::rng(rng_seed, Stream::Query, 0);
    let want_moving = ((n_vis as f64) * spec.moving_fraction).round() as usize;
    let mut picked = choose(&mut moving, want_moving, &mut rng);
    let rest = n_vis - picked.len();
    if rest > 0 {
        // Remaining visible queries come from whatever visible pixels are left.
        let mut pool: Vec<usize> = moving[picked.len()..].iter().chain(still.iter()).copied().collect();
        picked.extend(choose(&mut pool, rest, &mut rng));
    }
    let occluded = choose(&mut hidden, n_occ, &mut rng);

    let w = clip.width();
    let make = |i: usize, occluded: bool| {
        let (x, y) = (i % w, i / w);
        let [u, v] = flow.vectors[i];
        QueryRecord {
            clip: clip.id.clone(),
            frame_a: a,
            frame_b: a + 1,
            x: x as f64,
            y: y as f64,
            gt_x: x as f64 + u as f64,
            gt_y: y as f64 + v as f64,
            occluded,
        }
    };
    Ok(picked
        .into_iter()
        .map(|i| make(i, false))
        .chain(occluded.into_iter().map(|i| make(i, true)))
        .collect())
}
