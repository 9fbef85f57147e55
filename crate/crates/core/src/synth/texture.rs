//! Procedural surface textures. All textures are functions of integer
//! surface coordinates so that rigidly moved surfaces reproduce exactly.

use serde::{Deserialize, Serialize};

pub type Rgb = [u8; 3];

/// Saturated sprite colours. Kept away from white so that markings and probe
/// bumps stay distinguishable in code space.
pub const SPRITE_PALETTE: [Rgb; 5] = [
    [200, 60, 50],
    [60, 150, 70],
    [50, 80, 190],
    [210, 170, 40],
    [140, 70, 160],
];

/// Muted background colours.
pub const BACKGROUND_PALETTE: [Rgb; 4] = [
    [30, 40, 50],
    [70, 60, 45],
    [40, 75, 55],
    [85, 85, 95],
];

pub const OCCLUDER_TEXTURE: Texture = Texture::Stripes {
    a: [25, 25, 25],
    b: [170, 170, 180],
    period: 4,
    direction: StripeDirection::Horizontal,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripeDirection {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Uniform(Rgb),
    Stripes {
        a: Rgb,
        b: Rgb,
        period: u32,
        direction: StripeDirection,
    },
    Checker {
        a: Rgb,
        b: Rgb,
        cell: u32,
    },
    /// Axis-aligned blocks whose colours are hashed from the block index.
    Blocks {
        colors: Vec<Rgb>,
        cell: u32,
        seed: u64,
    },
}

fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    let mut h = seed ^ 0x51_7cc1_b727_220a_95;
    for v in [x as u64, y as u64] {
        h ^= v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h = h.rotate_left(31).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 29;
    }
    h
}

impl Texture {
    pub fn sample(&self, x: i64, y: i64) -> Rgb {
        match self {
            Texture::Uniform(c) => *c,
            Texture::Stripes {
                a,
                b,
                period,
                direction,
            } => {
                let p = (*period).max(2) as i64;
                let t = match direction {
                    StripeDirection::Horizontal => y,
                    StripeDirection::Vertical => x,
                    StripeDirection::Diagonal => x + y,
                };
                if t.rem_euclid(p) < p / 2 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Checker { a, b, cell } => {
                let c = (*cell).max(1) as i64;
                if (x.div_euclid(c) + y.div_euclid(c)).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Blocks { colors, cell, seed } => {
                let c = (*cell).max(1) as i64;
                let h = hash2(*seed, x.div_euclid(c), y.div_euclid(c));
                colors[(h % colors.len() as u64) as usize]
            }
        }
    }
}

/// A white Gaussian marking painted on a surface, in surface coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marking {
    pub x: i64,
    pub y: i64,
}

pub const MARKING_SIGMA: f64 = 2.0;
pub const MARKING_AMPLITUDE: f64 = 255.0;

/// Texture colour with markings composited on top.
pub fn shade(texture: &Texture, markings: &[Marking], x: i64, y: i64) -> Rgb {
    let base = texture.sample(x, y);
    if markings.is_empty() {
        return base;
    }
    let mut add = 0.0;
    for m in markings {
        let dx = (x - m.x) as f64;
        let dy = (y - m.y) as f64;
        add += MARKING_AMPLITUDE * (-(dx * dx + dy * dy) / (2.0 * MARKING_SIGMA * MARKING_SIGMA)).exp();
    }
    base.map(|c| (c as f64 + add).round().clamp(0.0, 255.0) as u8)
}
