//! Procedural ten-class image set for desk-scale runs. Shapes and textures
//! with random colours, contrast, placement and a background gradient;
//! several classes differ only in fine structure.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::rng;

pub const CLASSES: [&str; 10] = [
    "disk", "ring", "square", "triangle", "hstripes", "vstripes", "checker", "cross", "diagonal", "dots",
];

pub const IMAGE_SIZE: usize = 32;

/// Shape parameters drawn once per image.
struct Layout {
    cy: f64,
    cx: f64,
    scale: f64,
    angle: f64,
    period: f64,
    phase: f64,
    thickness: f64,
}

/// Coverage of the foreground at `(y, x)` in pixel units, in `[0, 1]`.
fn inside(class: usize, l: &Layout, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - l.cy, x - l.cx);
    let (s, c) = l.angle.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    let r = (dx * dx + dy * dy).sqrt();
    match class {
        0 => r <= l.scale,
        1 => (r - l.scale).abs() <= l.thickness / 2.0,
        2 => u.abs() <= l.scale * 0.85 && v.abs() <= l.scale * 0.85,
        3 => {
            let h = l.scale * 1.6;
            let top = -h * 0.6;
            let t = (v - top) / h;
            (0.0..=1.0).contains(&t) && u.abs() <= t * l.scale
        }
        4 => ((y + l.phase) / l.period).rem_euclid(1.0) < 0.5,
        5 => ((x + l.phase) / l.period).rem_euclid(1.0) < 0.5,
        6 => {
            let a = ((y + l.phase) / l.period).floor() as i64;
            let b = ((x + l.phase) / l.period).floor() as i64;
            (a + b).rem_euclid(2) == 0
        }
        7 => (u.abs() <= l.thickness / 2.0 && v.abs() <= l.scale) || (v.abs() <= l.thickness / 2.0 && u.abs() <= l.scale),
        8 => ((x + y * l.angle.signum() + l.phase) / l.period).rem_euclid(1.0) < 0.5,
        9 => {
            let fy = ((y + l.phase) / l.period).rem_euclid(1.0) - 0.5;
            let fx = ((x + l.phase) / l.period).rem_euclid(1.0) - 0.5;
            (fy * fy + fx * fx).sqrt() * l.period <= l.thickness
        }
        _ => false,
    }
}

fn colour(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

/// One `3 × size × size` sample of `class`.
pub fn render(class: usize, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if class >= CLASSES.len() {
        return Err(Error::invalid(format!("desk class {class} out of range")));
    }
    let f = size as f64 / IMAGE_SIZE as f64;
    let mid = size as f64 / 2.0;
    let l = Layout {
        cy: mid + rng.random_range(-4.0..4.0) * f,
        cx: mid + rng.random_range(-4.0..4.0) * f,
        scale: rng.random_range(7.0..11.0) * f,
        angle: rng.random_range(-PI / 8.0..PI / 8.0) + if class == 8 && rng.random_bool(0.5) { PI } else { 0.0 },
        period: rng.random_range(4.0..7.0) * f,
        phase: rng.random_range(0.0..8.0) * f,
        thickness: rng.random_range(1.0..1.8) * f * if class == 9 { 1.0 } else { 2.0 },
    };
    let bg = colour(rng);
    let contrast = rng.random_range(0.25..0.7);
    let dir = colour(rng).map(|v| if v < 0.5 { -1.0 } else { 1.0 });
    let fg: [f64; 3] = std::array::from_fn(|c| {
        let up = bg[c] + dir[c] * contrast;
        if (0.0..=1.0).contains(&up) {
            up
        } else {
            bg[c] - dir[c] * contrast
        }
    });
    let grad = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for soft edges.
            let mut m = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                m += f64::from(u8::from(inside(class, &l, y as f64 + oy, x as f64 + ox))) / 4.0;
            }
            let shade = grad[0] * (y as f64 / size as f64 - 0.5) + grad[1] * (x as f64 / size as f64 - 0.5);
            for c in 0..3 {
                let v = bg[c] * (1.0 - m) + fg[c] * m + shade;
                data[(c * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(3, size, size, data)
}

/// `per_class` images of every class, in class-major order.
pub fn generate(per_class: usize, size: usize, seed: u64) -> Result<Vec<(ImageTensor, usize)>> {
    let mut out = Vec::with_capacity(per_class * CLASSES.len());
    for (k, name) in CLASSES.iter().enumerate() {
        for i in 0..per_class {
            let mut r = rng::stream(seed, &[rng::label_key(name), i as u64]);
            out.push((render(k, size, &mut r)?, k));
        }
    }
    Ok(out)
}

/// Writes `root/<class>/<class>_<i>.png`; returns the number of files.
pub fn write_dataset(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<usize> {
    let images = generate(per_class, size, seed)?;
    for (i, (img, k)) in images.iter().enumerate() {
        let dir = root.join(CLASSES[*k]);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        img.save_png(&dir.join(format!("{}_{:04}.png", CLASSES[*k], i % per_class)))?;
    }
    Ok(images.len())
}
