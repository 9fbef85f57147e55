//! Heatmaps, query/target overlays and side-by-side panels.

use kltrace_core::tracer::PatchMap;
use kltrace_core::Frame;

// Viridis sampled at nine evenly spaced stops.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Colour for `t` in `[0, 1]`, linear between stops.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    [0, 1, 2].map(|c| (VIRIDIS[i][c] + f * (VIRIDIS[i + 1][c] - VIRIDIS[i][c])).round() as u8)
}

/// The map scaled to its own maximum and drawn at `width x height`; invalid
/// cells are black.
pub fn heatmap(map: &PatchMap, width: usize, height: usize) -> Frame {
    let max = map
        .values
        .iter()
        .zip(&map.valid)
        .filter(|(_, &v)| v)
        .fold(0.0f64, |m, (&x, _)| m.max(x));
    let mut out = Frame::filled(width, height, [0; 3]);
    for y in 0..height {
        let gy = y * map.gh / height;
        for x in 0..width {
            let i = gy * map.gw + x * map.gw / width;
            if map.valid[i] {
                let t = if max > 0.0 { map.values[i] / max } else { 0.0 };
                out.set(x, y, viridis(t));
            }
        }
    }
    out
}

fn put(frame: &mut Frame, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < frame.width() && (y as usize) < frame.height() {
        frame.set(x as usize, y as usize, rgb);
    }
}

/// Bresenham line between two points.
pub fn draw_line(frame: &mut Frame, a: [f64; 2], b: [f64; 2], rgb: [u8; 3]) {
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(frame, x0, y0, rgb);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

pub fn draw_cross(frame: &mut Frame, p: [f64; 2], rgb: [u8; 3]) {
    let (x, y) = (p[0].round() as i64, p[1].round() as i64);
    for d in -1..=1 {
        put(frame, x + d, y, rgb);
        put(frame, x, y + d, rgb);
    }
}

/// Frame 2 with the query (red), predicted target (green), ground truth
/// (blue) and the query-to-prediction line, upscaled by `zoom`.
pub fn overlay(frame: &Frame, query: [f64; 2], pred: [f64; 2], gt: Option<[f64; 2]>, zoom: usize) -> Frame {
    let z = zoom.max(1);
    let mut out = frame.resize_nearest(frame.width() * z, frame.height() * z);
    let s = |p: [f64; 2]| [p[0] * z as f64 + (z as f64 - 1.0) / 2.0, p[1] * z as f64 + (z as f64 - 1.0) / 2.0];
    draw_line(&mut out, s(query), s(pred), [255, 255, 0]);
    if let Some(g) = gt {
        draw_cross(&mut out, s(g), [40, 90, 255]);
    }
    draw_cross(&mut out, s(query), [255, 40, 40]);
    draw_cross(&mut out, s(pred), [40, 230, 40]);
    out
}

/// Frames side by side, top aligned, separated by a 2-pixel gap.
pub fn panel(frames: &[Frame]) -> Frame {
    let gap = 2;
    let w = frames.iter().map(|f| f.width()).sum::<usize>() + gap * frames.len().saturating_sub(1);
    let h = frames.iter().map(|f| f.height()).max().unwrap_or(0);
    let mut out = Frame::filled(w.max(1), h.max(1), [255; 3]);
    let mut x0 = 0;
    for f in frames {
        for y in 0..f.height() {
            for x in 0..f.width() {
                out.set(x0 + x, y, f.get(x, y));
            }
        }
        x0 += f.width() + gap;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_ends() {
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
        assert_eq!(viridis(f64::NAN), [68, 1, 84]);
    }

    #[test]
    fn heatmap_has_frame_size() {
        let mut m = PatchMap::zeros(2, 2);
        m.valid = vec![true, true, false, true];
        m.values = vec![0.0, 2.0, 0.0, 1.0];
        let h = heatmap(&m, 8, 8);
        assert_eq!((h.width(), h.height()), (8, 8));
        assert_eq!(h.get(7, 0), viridis(1.0));
        assert_eq!(h.get(0, 7), [0, 0, 0]);
    }

    #[test]
    fn line_endpoints() {
        let mut f = Frame::filled(10, 10, [0; 3]);
        draw_line(&mut f, [1.0, 1.0], [8.0, 4.0], [9, 9, 9]);
        assert_eq!(f.get(1, 1), [9, 9, 9]);
        assert_eq!(f.get(8, 4), [9, 9, 9]);
        let p = panel(&[f.clone(), Frame::filled(3, 4, [1; 3])]);
        assert_eq!((p.width(), p.height()), (15, 10));
    }
}
