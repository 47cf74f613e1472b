//! Freehand strokes to the 32x32 sketch raster posted to `POST /sketch`.
//!
//! Strokes are polylines in raster units (`0..32` on both axes, x right,
//! y down). Each is drawn as a round-capped band of width [`STROKE_WIDTH`]
//! on a supersampled canvas that is box-filtered down to the raster.

use serde::{Deserialize, Serialize};
use sketchguide::sketch::IMAGE_SIZE;

pub const STROKE_WIDTH: f64 = 1.5;
pub const SUPERSAMPLE: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<[f64; 2]>,
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Row-major raster of `IMAGE_SIZE * IMAGE_SIZE` values in `[0, 1]`: the
/// inked fraction of each pixel.
pub fn rasterize(strokes: &[Stroke]) -> Vec<f64> {
    let n = IMAGE_SIZE * SUPERSAMPLE;
    let step = 1.0 / SUPERSAMPLE as f64;
    let half = STROKE_WIDTH / 2.0;
    let mut ink = vec![false; n * n];
    for stroke in strokes {
        let pts = &stroke.points;
        let segments: Vec<([f64; 2], [f64; 2])> = match pts.len() {
            0 => continue,
            1 => vec![(pts[0], pts[0])],
            _ => pts.windows(2).map(|w| (w[0], w[1])).collect(),
        };
        for (a, b) in segments {
            // only visit the supersampled cells near the segment
            let lo = |u: f64, v: f64| (((u.min(v) - half) / step).floor().max(0.0) as usize).min(n);
            let hi = |u: f64, v: f64| (((u.max(v) + half) / step).ceil().max(0.0) as usize).min(n);
            for sy in lo(a[1], b[1])..hi(a[1], b[1]) {
                for sx in lo(a[0], b[0])..hi(a[0], b[0]) {
                    let p = [(sx as f64 + 0.5) * step, (sy as f64 + 0.5) * step];
                    if segment_distance(p, a, b) <= half {
                        ink[sy * n + sx] = true;
                    }
                }
            }
        }
    }
    let area = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for (i, v) in out.iter_mut().enumerate() {
        let (py, px) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
        let mut count = 0usize;
        for sy in py * SUPERSAMPLE..(py + 1) * SUPERSAMPLE {
            count += ink[sy * n + px * SUPERSAMPLE..][..SUPERSAMPLE].iter().filter(|&&b| b).count();
        }
        *v = count as f64 / area;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(a: [f64; 2], b: [f64; 2]) -> Stroke {
        Stroke { points: vec![a, b] }
    }

    #[test]
    fn empty_canvas_is_blank() {
        assert!(rasterize(&[]).iter().all(|&v| v == 0.0));
        assert!(rasterize(&[Stroke::default()]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_stroke_mass_matches_band_area() {
        // band of width w and length l with round caps covers w*l + pi*w^2/4
        let r = rasterize(&[line([6.0, 16.3], [26.0, 16.3])]);
        let want = STROKE_WIDTH * 20.0 + std::f64::consts::PI * STROKE_WIDTH * STROKE_WIDTH / 4.0;
        let got: f64 = r.iter().sum();
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
        assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // nothing far from the line
        assert_eq!(r[5 * IMAGE_SIZE + 16], 0.0);
    }

    #[test]
    fn dot_and_clipping() {
        let dot = rasterize(&[Stroke { points: vec![[16.0, 16.0]] }]);
        let want = std::f64::consts::PI * STROKE_WIDTH * STROKE_WIDTH / 4.0;
        assert!((dot.iter().sum::<f64>() - want).abs() / want < 0.05);
        let off = rasterize(&[line([-10.0, -10.0], [40.0, 40.0])]);
        assert!(off.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(off[0] > 0.0 && off[IMAGE_SIZE * IMAGE_SIZE - 1] > 0.0);
    }
}
