//! Procedural shape images.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ToyImage, CLASS_NAMES, IMAGE_SIZE, NUM_CLASSES};
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
const BACKGROUND: f64 = -1.0;

#[derive(Clone, Copy, Debug)]
struct ShapeParams {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
    aspect: f64,
    fill: f64,
    tex_amp: f64,
    tex_freq: (f64, f64),
    tex_phase: f64,
}

impl ShapeParams {
    fn draw(class: usize, rng: &mut impl Rng) -> Self {
        let n = IMAGE_SIZE as f64;
        let scale = rng.gen_range(0.3..=0.8);
        let radius = scale * n / 2.0;
        let slack = (1.0 - scale) * n / 2.0;
        Self {
            class,
            cx: n / 2.0 + rng.gen_range(-slack..=slack),
            cy: n / 2.0 + rng.gen_range(-slack..=slack),
            radius,
            rotation: rng.gen_range(0.0..std::f64::consts::TAU),
            aspect: match class {
                0 => rng.gen_range(0.5..=0.7),
                _ => rng.gen_range(0.8..=1.0),
            },
            fill: rng.gen_range(0.2..=0.9),
            tex_amp: rng.gen_range(0.02..=0.08),
            tex_freq: (rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.2)),
            tex_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Inside test in the shape's own unit frame.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = (x - self.cx) / self.radius;
        let dy = (y - self.cy) / self.radius;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.class {
            0 => u * u + (v / self.aspect).powi(2) <= 1.0,
            1 => u.abs() <= 0.85 && v.abs() <= 0.85 * self.aspect,
            2 => {
                // equilateral triangle inscribed in the unit circle
                let verts = [90f64, 210.0, 330.0].map(|d| {
                    let r = d.to_radians();
                    (r.cos(), r.sin())
                });
                (0..3).all(|i| {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
                })
            }
            _ => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        }
    }

    fn render(&self) -> Vec<f64> {
        let n = IMAGE_SIZE;
        let mut out = Vec::with_capacity(n * n);
        let step = 1.0 / SUPERSAMPLE as f64;
        for i in 0..n {
            for j in 0..n {
                let mut hits = 0usize;
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let y = i as f64 + (si as f64 + 0.5) * step;
                        let x = j as f64 + (sj as f64 + 0.5) * step;
                        hits += self.contains(x, y) as usize;
                    }
                }
                let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let tex = self.tex_amp
                    * (self.tex_freq.0 * j as f64 + self.tex_freq.1 * i as f64 + self.tex_phase).sin();
                let v = BACKGROUND * (1.0 - cover) + (self.fill + tex) * cover;
                out.push(v.clamp(-1.0, 1.0));
            }
        }
        out
    }
}

/// Renders one image of `class` with parameters drawn from `rng`.
pub fn render_shape(class: usize, rng: &mut impl Rng) -> ToyImage {
    assert!(class < NUM_CLASSES, "class {class} out of range");
    let params = ShapeParams::draw(class, rng);
    ToyImage {
        raster: Tensor::from_parts(vec![1, IMAGE_SIZE, IMAGE_SIZE], params.render()),
        label: class,
    }
}

/// `n` images cycling through the classes in order, so every class gets
/// `n / 4` or `n / 4 + 1` members. Fully determined by `seed`.
pub fn gen_dataset(n: usize, seed: u64) -> Vec<ToyImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| render_shape(i % NUM_CLASSES, &mut rng)).collect()
}

pub fn class_name(label: usize) -> &'static str {
    CLASS_NAMES.get(label).copied().unwrap_or("unknown")
}
