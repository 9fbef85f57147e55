//! Synthetic two-frame (and short multi-frame) worlds with exact ground truth.
//!
//! A clip is a stack of layers: a background plane followed by sprites in
//! ascending z order. Every layer carries a rigid placement per frame, and
//! rendering is nearest-neighbour so that integer motion reproduces frame-1
//! pixels exactly in frame 2. Flow and occlusion are computed from the layer
//! transforms, never inferred from pixels.

mod queries;
pub mod texture;

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FlowField, Frame, OcclusionMask};
use crate::seed::{self, Stream};

pub use queries::{sample_queries, QueryRecord, QuerySpec};
pub use texture::{Marking, Rgb, StripeDirection, Texture};

/// Frame dimensions must be multiples of this (the tokenizer patch size).
pub const FRAME_ALIGN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Translate,
    RotateInplace,
    OccluderPass,
    TexturelessRegion,
    TwinSwap,
    CameraPan,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Translate,
        Scenario::RotateInplace,
        Scenario::OccluderPass,
        Scenario::TexturelessRegion,
        Scenario::TwinSwap,
        Scenario::CameraPan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Translate => "translate",
            Scenario::RotateInplace => "rotate_inplace",
            Scenario::OccluderPass => "occluder_pass",
            Scenario::TexturelessRegion => "textureless_region",
            Scenario::TwinSwap => "twin_swap",
            Scenario::CameraPan => "camera_pan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Rect,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub shape: SpriteShape,
    /// Bounding-box side in pixels.
    pub size: u32,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Per-frame displacement in pixels, `[dx, dy]`.
    pub displacement: [i32; 2],
    /// Per-frame in-place rotation in degrees (rotate_inplace only).
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scenario: Scenario,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sprite: SpriteParams,
    pub motion: MotionParams,
    pub background_seed: u64,
    /// White surface markings painted on random surfaces.
    pub markings: u32,
    pub rng_seed: u64,
}

/// Ranges used when drawing random scene specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub max_displacement: i32,
    pub min_displacement: i32,
    /// Drawn displacements are multiples of this; the patch size gives
    /// patch-aligned motion.
    pub displacement_step: i32,
    pub sprite_size: [u32; 2],
    pub max_rotation_deg: f64,
    pub max_markings: u32,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            width: 64,
            height: 64,
            frames: 2,
            max_displacement: 8,
            min_displacement: 2,
            displacement_step: 1,
            sprite_size: [12, 20],
            max_rotation_deg: 30.0,
            max_markings: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub scenario: Scenario,
    pub spec: Option<SceneSpec>,
    pub frames: Vec<Frame>,
    /// `flows[k]` maps frame k to frame k+1.
    pub flows: Vec<FlowField>,
    pub occlusions: Vec<OcclusionMask>,
}

impl Clip {
    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

fn pick_displacement(rng: &mut ChaCha8Rng, world: &WorldParams) -> [i32; 2] {
    let m = world.max_displacement.max(world.min_displacement);
    let step = world.displacement_step.max(1);
    let k = (m / step).max(1);
    let lo = world.min_displacement.max(if step > 1 { step } else { 0 });
    loop {
        let d = [rng.random_range(-k..=k) * step, rng.random_range(-k..=k) * step];
        if d[0].abs().max(d[1].abs()) >= lo {
            return d;
        }
    }
}

/// `v` moved toward zero onto a multiple of `step`, keeping at least one step.
fn snap(v: i32, step: i32) -> i32 {
    if step <= 1 {
        return v;
    }
    let q = (v.abs() / step).max(1) * step;
    q * v.signum()
}

impl SceneSpec {
    /// Draw a random, valid spec for `scenario`; every choice derives from `rng_seed`.
    pub fn sample(scenario: Scenario, rng_seed: u64, world: &WorldParams) -> SceneSpec {
        let mut rng = seed::rng(rng_seed, Stream::Scene, 0);
        let size = rng.random_range(world.sprite_size[0]..=world.sprite_size[1]);
        let shape = match scenario {
            Scenario::RotateInplace => SpriteShape::Disk,
            _ if rng.random::<bool>() => SpriteShape::Disk,
            _ => SpriteShape::Rect,
        };
        let mut displacement = pick_displacement(&mut rng, world);
        let mut rotation_deg = 0.0;
        match scenario {
            Scenario::RotateInplace => {
                displacement = [0, 0];
                let mag = rng.random_range(10.0..=world.max_rotation_deg.max(10.0));
                rotation_deg = if rng.random::<bool>() { mag } else { -mag };
            }
            Scenario::OccluderPass => {
                let m = world.max_displacement.max(4);
                let dx = snap(rng.random_range(4..=m), world.displacement_step);
                let sx = if rng.random::<bool>() { dx } else { -dx };
                let dy = rng.random_range(-1..=1);
                displacement = [sx, if world.displacement_step > 1 { 0 } else { dy }];
            }
            Scenario::TwinSwap => {
                // Twins must not overlap; swap distance bounded by half the frame.
                let half = (world.width.min(world.height) / 2) as i32;
                let lo = size as i32 + 2;
                let step = world.displacement_step.max(1);
                let dx = (rng.random_range(lo..=half.max(lo)) + step - 1) / step * step;
                let dy = rng.random_range(-(half / 2)..=(half / 2));
                let dy = (dy as f64 / step as f64).round() as i32 * step;
                displacement = [if rng.random::<bool>() { dx } else { -dx }, dy];
            }
            _ => {}
        }
        let markings = if world.max_markings == 0 {
            0
        } else {
            rng.random_range(0..=world.max_markings)
        };
        SceneSpec {
            scenario,
            width: world.width,
            height: world.height,
            frames: world.frames,
            sprite: SpriteParams {
                shape,
                size,
                texture_seed: rng.random(),
            },
            motion: MotionParams {
                displacement,
                rotation_deg,
            },
            background_seed: rng.random(),
            markings,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width, self.height);
        if w < 8 || h < 8 || w % FRAME_ALIGN != 0 || h % FRAME_ALIGN != 0 {
            return Err(Error::config(format!(
                "frame {w}x{h} must be at least 8x8 and a multiple of {FRAME_ALIGN}"
            )));
        }
        if self.frames < 2 {
            return Err(Error::config("a clip needs at least two frames"));
        }
        let s = self.sprite.size as usize;
        if s < 2 || s > w || s > h {
            return Err(Error::config(format!("sprite size {s} does not fit a {w}x{h} frame")));
        }
        let [dx, dy] = self.motion.displacement;
        if dx.unsigned_abs() as usize > w / 2 || dy.unsigned_abs() as usize > h / 2 {
            return Err(Error::config(format!(
                "displacement ({dx},{dy}) exceeds half the frame extent"
            )));
        }
        if !self.motion.rotation_deg.is_finite() || self.motion.rotation_deg.abs() > 90.0 {
            return Err(Error::config("rotation must be finite and at most 90 degrees per frame"));
        }
        match self.scenario {
            Scenario::RotateInplace if self.sprite.shape != SpriteShape::Disk => {
                Err(Error::config("rotate_inplace needs a disk sprite"))
            }
            Scenario::OccluderPass if dx == 0 => {
                Err(Error::config("occluder_pass needs horizontal motion"))
            }
            Scenario::TwinSwap
                if (dx.unsigned_abs() as usize) <= s && (dy.unsigned_abs() as usize) <= s =>
            {
                Err(Error::config("twin_swap displacement must separate the twins"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Placement {
    x: i64,
    y: i64,
    angle_deg: f64,
}

#[derive(Debug, Clone)]
struct Layer {
    shape: SpriteShape,
    w: i64,
    h: i64,
    texture: Texture,
    markings: Vec<Marking>,
    placements: Vec<Placement>,
}

impl Layer {
    fn contains_local(&self, lx: i64, ly: i64) -> bool {
        if lx < 0 || ly < 0 || lx >= self.w || ly >= self.h {
            return false;
        }
        match self.shape {
            SpriteShape::Rect => true,
            SpriteShape::Disk => {
                let ex = 2 * lx - (self.w - 1);
                let ey = 2 * ly - (self.h - 1);
                ex * ex + ey * ey <= self.w * self.w
            }
        }
    }

    fn center(&self, p: &Placement) -> (f64, f64) {
        (
            p.x as f64 + (self.w - 1) as f64 / 2.0,
            p.y as f64 + (self.h - 1) as f64 / 2.0,
        )
    }

    /// Colour at image pixel `(qx, qy)` in frame `k`, if the layer covers it.
    fn sample(&self, k: usize, qx: i64, qy: i64) -> Option<Rgb> {
        let p = &self.placements[k];
        let (lx, ly) = (qx - p.x, qy - p.y);
        if !self.contains_local(lx, ly) {
            return None;
        }
        let (sx, sy) = if p.angle_deg == 0.0 {
            (lx, ly)
        } else {
            let (cx, cy) = ((self.w - 1) as f64 / 2.0, (self.h - 1) as f64 / 2.0);
            let (s, c) = p.angle_deg.to_radians().sin_cos();
            let (dx, dy) = (lx as f64 - cx, ly as f64 - cy);
            let sx = (c * dx + s * dy + cx).round() as i64;
            let sy = (-s * dx + c * dy + cy).round() as i64;
            (sx.clamp(0, self.w - 1), sy.clamp(0, self.h - 1))
        };
        Some(texture::shade(&self.texture, &self.markings, sx, sy))
    }

    /// Where the surface point under pixel `(px, py)` in frame `a` lands in frame `b`.
    fn transport(&self, a: usize, b: usize, px: i64, py: i64) -> (f64, f64) {
        let (pa, pb) = (&self.placements[a], &self.placements[b]);
        let dtheta = pb.angle_deg - pa.angle_deg;
        if dtheta == 0.0 {
            return ((px + pb.x - pa.x) as f64, (py + pb.y - pa.y) as f64);
        }
        let (cax, cay) = self.center(pa);
        let (cbx, cby) = self.center(pb);
        let (s, c) = dtheta.to_radians().sin_cos();
        let (dx, dy) = (px as f64 - cax, py as f64 - cay);
        (cbx + c * dx - s * dy, cby + s * dx + c * dy)
    }
}

#[derive(Debug, Clone)]
struct Scene {
    width: usize,
    height: usize,
    frames: usize,
    background: Texture,
    background_markings: Vec<Marking>,
    /// Image offset of the background plane per frame.
    background_offset: Vec<(i64, i64)>,
    layers: Vec<Layer>,
}

impl Scene {
    /// Render frame `k` together with the id of the topmost surface per pixel
    /// (0 = background, i + 1 = layer i).
    fn render(&self, k: usize) -> (Frame, Vec<u16>) {
        let mut frame = Frame::filled(self.width, self.height, [0; 3]);
        let mut ids = vec![0u16; self.width * self.height];
        let (ox, oy) = self.background_offset[k];
        for y in 0..self.height {
            for x in 0..self.width {
                let (qx, qy) = (x as i64, y as i64);
                let mut rgb = texture::shade(&self.background, &self.background_markings, qx - ox, qy - oy);
                let mut id = 0u16;
                for (li, layer) in self.layers.iter().enumerate() {
                    if let Some(c) = layer.sample(k, qx, qy) {
                        rgb = c;
                        id = li as u16 + 1;
                    }
                }
                frame.set(x, y, rgb);
                ids[y * self.width + x] = id;
            }
        }
        (frame, ids)
    }

    fn ground_truth(&self, a: usize, b: usize, ids_a: &[u16], ids_b: &[u16]) -> (FlowField, OcclusionMask) {
        let (w, h) = (self.width, self.height);
        let mut flow = FlowField::zeros(w, h);
        let mut occ = OcclusionMask::none(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let id = ids_a[i];
                let (tx, ty) = if id == 0 {
                    let (oax, oay) = self.background_offset[a];
                    let (obx, oby) = self.background_offset[b];
                    ((x as i64 + obx - oax) as f64, (y as i64 + oby - oay) as f64)
                } else {
                    self.layers[id as usize - 1].transport(a, b, x as i64, y as i64)
                };
                flow.vectors[i] = [(tx - x as f64) as f32, (ty - y as f64) as f32];
                let (rx, ry) = (tx.round(), ty.round());
                occ.mask[i] = if rx < 0.0 || ry < 0.0 || rx >= w as f64 || ry >= h as f64 {
                    true
                } else {
                    ids_b[ry as usize * w + rx as usize] > id
                };
            }
        }
        (flow, occ)
    }
}

fn sprite_texture(seed: u64, uniform: bool) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = texture::SPRITE_PALETTE[rng.random_range(0..texture::SPRITE_PALETTE.len())];
    // Pattern pairs are a colour and its darker shade.
    let b = a.map(|c| (c as f64 * 0.6).round() as u8);
    if uniform {
        return Texture::Uniform(a);
    }
    match rng.random_range(0..3) {
        0 => Texture::Stripes {
            a,
            b,
            period: 8,
            direction: StripeDirection::Horizontal,
        },
        1 => Texture::Stripes {
            a,
            b,
            period: 8,
            direction: StripeDirection::Vertical,
        },
        _ => Texture::Checker { a, b, cell: 4 },
    }
}

fn background_texture(seed: u64, uniform: bool) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = texture::BACKGROUND_PALETTE.len();
    if uniform {
        return Texture::Uniform(texture::BACKGROUND_PALETTE[rng.random_range(0..n)]);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..3 {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    Texture::Blocks {
        colors: idx[..3].iter().map(|&i| texture::BACKGROUND_PALETTE[i]).collect(),
        cell: 16,
        seed: rng.random(),
    }
}

/// Range of top-left positions keeping a box of `size` inside `[0, extent)`
/// while it moves by `step` per frame over `frames` frames.
fn placement_range(extent: i64, size: i64, step: i64, frames: usize) -> Option<(i64, i64)> {
    let travel = step * (frames as i64 - 1);
    let lo = (-travel).max(0);
    let hi = extent - size - travel.max(0);
    (lo <= hi).then_some((lo, hi))
}

fn moving_layer(
    shape: SpriteShape,
    w: i64,
    h: i64,
    texture: Texture,
    x0: i64,
    y0: i64,
    d: [i32; 2],
    rotation: f64,
    frames: usize,
) -> Layer {
    let placements = (0..frames)
        .map(|k| Placement {
            x: x0 + d[0] as i64 * k as i64,
            y: y0 + d[1] as i64 * k as i64,
            angle_deg: rotation * k as f64,
        })
        .collect();
    Layer {
        shape,
        w,
        h,
        texture,
        markings: Vec::new(),
        placements,
    }
}

fn out_of_bounds(spec: &SceneSpec) -> Error {
    Error::config(format!(
        "{} motion {:?} moves the sprite out of the {}x{} frame",
        spec.scenario.name(),
        spec.motion.displacement,
        spec.width,
        spec.height
    ))
}

fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seed::rng(spec.rng_seed, Stream::Scene, 1);
    let (w, h) = (spec.width as i64, spec.height as i64);
    let n = spec.frames;
    let size = spec.sprite.size as i64;
    let d = spec.motion.displacement;
    let textureless = spec.scenario == Scenario::TexturelessRegion;
    let sprite_tex = sprite_texture(spec.sprite.texture_seed, textureless);
    let (sw, sh) = match spec.sprite.shape {
        SpriteShape::Disk => (size, size),
        SpriteShape::Rect => (size, rng.random_range((size * 2 / 3).max(2)..=size)),
    };

    let mut scene = Scene {
        width: spec.width,
        height: spec.height,
        frames: n,
        background: background_texture(spec.background_seed, textureless),
        background_markings: Vec::new(),
        background_offset: vec![(0, 0); n],
        layers: Vec::new(),
    };

    let place = |rng: &mut ChaCha8Rng, step: [i32; 2], bw: i64, bh: i64| -> Result<(i64, i64)> {
        let (xl, xh) = placement_range(w, bw, step[0] as i64, n).ok_or_else(|| out_of_bounds(spec))?;
        let (yl, yh) = placement_range(h, bh, step[1] as i64, n).ok_or_else(|| out_of_bounds(spec))?;
        Ok((rng.random_range(xl..=xh), rng.random_range(yl..=yh)))
    };

    match spec.scenario {
        Scenario::Translate | Scenario::TexturelessRegion => {
            if spec.scenario == Scenario::Translate && rng.random::<bool>() {
                // A static distractor below the mover.
                let ds = rng.random_range(8..=size.max(8));
                let (x, y) = place(&mut rng, [0, 0], ds, ds)?;
                let tex = sprite_texture(rng.random(), false);
                scene
                    .layers
                    .push(moving_layer(SpriteShape::Rect, ds, ds, tex, x, y, [0, 0], 0.0, n));
            }
            let (x, y) = place(&mut rng, d, sw, sh)?;
            scene
                .layers
                .push(moving_layer(spec.sprite.shape, sw, sh, sprite_tex, x, y, d, 0.0, n));
        }
        Scenario::RotateInplace => {
            let (x, y) = place(&mut rng, [0, 0], sw, sh)?;
            scene.layers.push(moving_layer(
                SpriteShape::Disk,
                sw,
                sh,
                sprite_tex,
                x,
                y,
                [0, 0],
                spec.motion.rotation_deg,
                n,
            ));
        }
        Scenario::CameraPan => {
            let (x, y) = place(&mut rng, d, sw, sh)?;
            scene
                .layers
                .push(moving_layer(spec.sprite.shape, sw, sh, sprite_tex, x, y, d, 0.0, n));
            scene.background_offset = (0..n)
                .map(|k| (d[0] as i64 * k as i64, d[1] as i64 * k as i64))
                .collect();
        }
        Scenario::TwinSwap => {
            // Twin A starts at p, twin B at p + d; they trade places every frame.
            let (xl, xh) = placement_range(w, sw, d[0] as i64, 2).ok_or_else(|| out_of_bounds(spec))?;
            let (yl, yh) = placement_range(h, sh, d[1] as i64, 2).ok_or_else(|| out_of_bounds(spec))?;
            let (x, y) = (rng.random_range(xl..=xh), rng.random_range(yl..=yh));
            let a = (x, y);
            let b = (x + d[0] as i64, y + d[1] as i64);
            for start in [a, b] {
                let placements = (0..n)
                    .map(|k| {
                        let at_start = k % 2 == 0;
                        let (px, py) = if at_start { start } else if start == a { b } else { a };
                        Placement {
                            x: px,
                            y: py,
                            angle_deg: 0.0,
                        }
                    })
                    .collect();
                scene.layers.push(Layer {
                    shape: spec.sprite.shape,
                    w: sw,
                    h: sh,
                    texture: sprite_tex.clone(),
                    markings: Vec::new(),
                    placements,
                });
            }
        }
        Scenario::OccluderPass => {
            let (x, y) = place(&mut rng, d, sw, sh)?;
            let mover = moving_layer(spec.sprite.shape, sw, sh, sprite_tex, x, y, d, 0.0, n);
            // Bar straddles the mover's leading edge in frame 2 so that part of
            // the visible frame-1 sprite ends up behind it.
            let bar_w = rng.random_range(6..=8);
            let lead = if d[0] > 0 { x + sw + d[0] as i64 } else { x + d[0] as i64 };
            let span = (d[0].unsigned_abs() as i64).max(2);
            let centre = if d[0] > 0 {
                lead - rng.random_range(1..=span)
            } else {
                lead + rng.random_range(1..=span)
            };
            let bx = (centre - bar_w / 2).clamp(0, w - bar_w);
            let bar = Layer {
                shape: SpriteShape::Rect,
                w: bar_w,
                h,
                texture: texture::OCCLUDER_TEXTURE,
                markings: Vec::new(),
                placements: vec![
                    Placement {
                        x: bx,
                        y: 0,
                        angle_deg: 0.0,
                    };
                    n
                ],
            };
            scene.layers.push(mover);
            scene.layers.push(bar);
        }
    }

    for _ in 0..spec.markings {
        let surface = rng.random_range(0..=scene.layers.len());
        if surface == 0 {
            scene.background_markings.push(Marking {
                x: rng.random_range(0..w),
                y: rng.random_range(0..h),
            });
            continue;
        }
        let layer = &scene.layers[surface - 1];
        // Markings stay off the occluder so the bar keeps a fixed look.
        if layer.texture == texture::OCCLUDER_TEXTURE {
            continue;
        }
        let (lw, lh) = (layer.w, layer.h);
        let m = Marking {
            x: rng.random_range(lw / 4..=(3 * lw / 4).max(lw / 4)),
            y: rng.random_range(lh / 4..=(3 * lh / 4).max(lh / 4)),
        };
        if spec.scenario == Scenario::TwinSwap {
            // Twins stay identical.
            for l in scene.layers.iter_mut() {
                l.markings.push(m);
            }
        } else {
            scene.layers[surface - 1].markings.push(m);
        }
    }
    Ok(scene)
}

/// Render a clip and its exact ground truth. Deterministic in `spec`.
pub fn generate_clip(spec: &SceneSpec) -> Result<Clip> {
    let scene = build_scene(spec)?;
    let rendered: Vec<(Frame, Vec<u16>)> = (0..scene.frames).map(|k| scene.render(k)).collect();
    let mut flows = Vec::with_capacity(scene.frames - 1);
    let mut occlusions = Vec::with_capacity(scene.frames - 1);
    for k in 0..scene.frames - 1 {
        let (f, o) = scene.ground_truth(k, k + 1, &rendered[k].1, &rendered[k + 1].1);
        flows.push(f);
        occlusions.push(o);
    }
    if spec.scenario == Scenario::OccluderPass && occlusions[0].count() == 0 {
        return Err(Error::config("occluder_pass geometry produced no occluded pixels"));
    }
    Ok(Clip {
        id: format!("{}-{:016x}", spec.scenario.name(), spec.rng_seed),
        scenario: spec.scenario,
        spec: Some(spec.clone()),
        frames: rendered.into_iter().map(|(f, _)| f).collect(),
        flows,
        occlusions,
    })
}

/// How many clips of each scenario a dataset holds, plus world and query settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub scenarios: BTreeMap<Scenario, usize>,
    pub world: WorldParams,
    pub queries: QuerySpec,
}

impl DatasetSpec {
    pub fn total_clips(&self) -> usize {
        self.scenarios.values().sum()
    }
}

/// Generate the clip for slot `index` of a dataset. Clips whose random draw is
/// geometrically impossible are redrawn with the next attempt counter.
pub fn generate_slot(spec: &DatasetSpec, scenario: Scenario, index: u64) -> Result<Clip> {
    slot_with(spec, scenario, index, |_| Ok(())).map(|(c, _)| c)
}

fn slot_with<R>(
    spec: &DatasetSpec,
    scenario: Scenario,
    index: u64,
    mut accept: impl FnMut(&Clip) -> Result<R>,
) -> Result<(Clip, R)> {
    let base = seed::derive(spec.seed, Stream::Scene, scenario as u64);
    for attempt in 0..64u64 {
        let clip_seed = seed::derive(base, Stream::Clip, index * 64 + attempt);
        let scene = SceneSpec::sample(scenario, clip_seed, &spec.world);
        match generate_clip(&scene).and_then(|c| accept(&c).map(|r| (c, r))) {
            Ok(v) => return Ok(v),
            Err(Error::Config(_) | Error::Data(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::config(format!(
        "could not draw a valid {} scene with the given world and query parameters",
        scenario.name()
    )))
}

/// Generate every clip of a dataset and its queries, in slot order. Clips
/// without any occluded pixel get visible queries only; a clip that has some
/// but too few for the requested mix is redrawn.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<Clip>, Vec<QueryRecord>)> {
    let mut counters: BTreeMap<Scenario, u64> = BTreeMap::new();
    let mut clips = Vec::with_capacity(spec.total_clips());
    let mut queries = Vec::new();
    for (slot, sc) in slot_scenarios(spec).into_iter().enumerate() {
        let idx = counters.entry(sc).or_insert(0);
        let qseed = seed::derive(spec.seed, Stream::Query, slot as u64);
        let (clip, q) = slot_with(spec, sc, *idx, |c| {
            if c.occlusions.get(spec.queries.frame_a).is_some_and(|o| o.count() == 0) {
                let all_visible = QuerySpec {
                    visible_fraction: 1.0,
                    ..spec.queries.clone()
                };
                sample_queries(c, &all_visible, qseed)
            } else {
                sample_queries(c, &spec.queries, qseed)
            }
        })?;
        *idx += 1;
        queries.extend(q);
        clips.push(clip);
    }
    Ok((clips, queries))
}

/// Scenario of every dataset slot, in slot order.
pub fn slot_scenarios(spec: &DatasetSpec) -> Vec<Scenario> {
    spec.scenarios
        .iter()
        .flat_map(|(&s, &n)| std::iter::repeat_n(s, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(scenario: Scenario, d: [i32; 2]) -> SceneSpec {
        SceneSpec {
            scenario,
            width: 64,
            height: 64,
            frames: 2,
            sprite: SpriteParams {
                shape: SpriteShape::Rect,
                size: 14,
                texture_seed: 11,
            },
            motion: MotionParams {
                displacement: d,
                rotation_deg: 0.0,
            },
            background_seed: 5,
            markings: 0,
            rng_seed: 99,
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let c = generate_clip(&spec(Scenario::Translate, [0, 0])).unwrap();
        assert!(c.flows[0].vectors.iter().all(|v| *v == [0.0, 0.0]));
        assert_eq!(c.occlusions[0].count(), 0);
        assert_eq!(c.frames[0], c.frames[1]);
    }

    #[test]
    fn translated_sprite_flow() {
        let c = generate_clip(&spec(Scenario::Translate, [3, -2])).unwrap();
        let f = &c.flows[0];
        let moving = f.vectors.iter().filter(|v| **v == [3.0, -2.0]).count();
        let still = f.vectors.iter().filter(|v| **v == [0.0, 0.0]).count();
        assert!(moving > 0);
        assert_eq!(moving + still, 64 * 64);
        // warp identity on visible pixels
        for y in 0..64 {
            for x in 0..64 {
                if c.occlusions[0].at(x, y) {
                    continue;
                }
                let [u, v] = f.at(x, y);
                let (tx, ty) = ((x as f32 + u) as usize, (y as f32 + v) as usize);
                assert_eq!(c.frames[1].get(tx, ty), c.frames[0].get(x, y));
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(Scenario::Translate, [0, 0]);
        s.sprite.size = 80;
        assert!(generate_clip(&s).is_err());
        let mut s = spec(Scenario::Translate, [30, 0]);
        s.frames = 3;
        assert!(matches!(generate_clip(&s), Err(Error::Config(_))));
        let mut s = spec(Scenario::RotateInplace, [0, 0]);
        s.motion.rotation_deg = 20.0;
        assert!(generate_clip(&s).is_err());
        s.sprite.shape = SpriteShape::Disk;
        assert!(generate_clip(&s).is_ok());
        assert!(generate_clip(&spec(Scenario::TwinSwap, [4, 0])).is_err());
    }

    #[test]
    fn twin_swap_follows_identity() {
        let c = generate_clip(&spec(Scenario::TwinSwap, [20, 3])).unwrap();
        let f = &c.flows[0];
        assert!(f.vectors.iter().any(|v| *v == [20.0, 3.0]));
        assert!(f.vectors.iter().any(|v| *v == [-20.0, -3.0]));
        // identical twins swapped: the frames look the same
        assert_eq!(c.frames[0], c.frames[1]);
    }

    #[test]
    fn camera_pan_moves_everything() {
        let c = generate_clip(&spec(Scenario::CameraPan, [2, 1])).unwrap();
        assert!(c.flows[0].vectors.iter().all(|v| *v == [2.0, 1.0]));
        // the right and bottom borders leave the view
        assert!(c.occlusions[0].at(63, 10));
        assert!(c.occlusions[0].at(10, 63));
        assert!(!c.occlusions[0].at(10, 10));
    }

    #[test]
    fn sampled_specs_generate() {
        let world = WorldParams::default();
        for sc in Scenario::ALL {
            let ds = DatasetSpec {
                seed: 3,
                scenarios: [(sc, 1)].into_iter().collect(),
                world: world.clone(),
                queries: QuerySpec::default(),
            };
            for i in 0..8 {
                let c = generate_slot(&ds, sc, i).unwrap();
                assert_eq!(c.frames.len(), 2);
                assert_eq!(c.scenario, sc);
            }
        }
    }
}
