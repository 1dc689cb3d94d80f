//! Synthetic scenes: a tilted background plane with occluding planar
//! objects, rendered with a z-buffer into mutually consistent maps.

use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

const MAX_RETRIES: usize = 10;
/// Scene width spanned by the image, in meters.
const SCENE_WIDTH: f64 = 4.0;

/// Metric size of one pixel for an image `w` pixels wide.
pub fn pixel_pitch(w: usize) -> f64 {
    SCENE_WIDTH / w as f64
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    class: u8,
    depth: f64,
    slope: (f64, f64),
    color: [f64; 3],
}

impl Object {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.shape {
            Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn depth_at(&self, y: usize, x: usize, pitch: f64) -> f64 {
        self.depth + pitch * (self.slope.0 * (y as f64 - self.cy) + self.slope.1 * (x as f64 - self.cx))
    }
}

/// Base color of a class; background is class 0.
fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.50],
        [0.85, 0.20, 0.15],
        [0.15, 0.70, 0.25],
        [0.20, 0.30, 0.85],
        [0.90, 0.80, 0.15],
        [0.75, 0.25, 0.80],
        [0.15, 0.80, 0.80],
        [0.95, 0.55, 0.10],
    ];
    let c = PALETTE[class as usize % PALETTE.len()];
    if (class as usize) < PALETTE.len() {
        c
    } else {
        // beyond the palette, rotate channels so colors stay class-dependent
        let r = class as usize / PALETTE.len();
        [c[r % 3], c[(r + 1) % 3], c[(r + 2) % 3]]
    }
}

/// Surface normals of a depth map by central differences (one-sided at the
/// border), with `pitch` meters per pixel. Returns `[H·W·3]` unit vectors.
pub fn normals_from_depth(depth: &[f32], h: usize, w: usize, pitch: f64) -> Vec<f32> {
    let d = |y: usize, x: usize| depth[y * w + x] as f64;
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = if x1 > x0 { (d(y, x1) - d(y, x0)) / ((x1 - x0) as f64 * pitch) } else { 0.0 };
            let gy = if y1 > y0 { (d(y1, x) - d(y0, x)) / ((y1 - y0) as f64 * pitch) } else { 0.0 };
            let n = (gx * gx + gy * gy + 1.0).sqrt();
            out.extend_from_slice(&[(-gx / n) as f32, (-gy / n) as f32, (1.0 / n) as f32]);
        }
    }
    out
}

/// Pixels whose closed 4-neighborhood holds at least two distinct labels.
pub fn label_edges(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x];
            let differs = |yy: usize, xx: usize| labels[yy * w + xx] != c;
            let edge = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
            out[y * w + x] = edge as u8;
        }
    }
    out
}

/// Render one scene. `n_objects` is reduced and the layout redrawn when the
/// objects leave no background visible.
pub fn gen_scene(seed: u64, h: usize, w: usize, k: usize, n_objects: usize) -> Result<Sample> {
    if k < 2 {
        return Err(Error::config(format!("scenes need at least 2 classes, got {k}")));
    }
    if k > 255 {
        return Err(Error::config(format!("at most 255 classes fit a u8 label map, got {k}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::config(format!("image {h}×{w} is too small")));
    }
    let mut n = n_objects;
    for attempt in 0..=MAX_RETRIES {
        if let Some(s) = render(seed, attempt, h, w, k, n) {
            return Ok(s);
        }
        n = n.saturating_sub(1);
    }
    Err(Error::Data(format!("scene {seed}: no background visible after {MAX_RETRIES} retries")))
}

fn render(seed: u64, attempt: usize, h: usize, w: usize, k: usize, n_objects: usize) -> Option<Sample> {
    let mut r = rng::stream(seed, &format!("scene.{attempt}"));
    let pitch = pixel_pitch(w);
    let (hf, wf) = (h as f64, w as f64);

    // background plane, tilt ≤ 20°
    let base = r.gen_range(3.4..3.8);
    let tilt = r.gen_range(0.0..20f64.to_radians()).tan();
    let dir = r.gen_range(0.0..std::f64::consts::TAU);
    let bg_slope = (tilt * dir.sin(), tilt * dir.cos());
    let bg_depth = |y: usize, x: usize| {
        base + pitch * (bg_slope.0 * (y as f64 + 0.5 - hf / 2.0) + bg_slope.1 * (x as f64 + 0.5 - wf / 2.0))
    };

    let objects: Vec<Object> = (0..n_objects)
        .map(|_| {
            let ry = r.gen_range(hf / 10.0..hf / 4.0);
            let rx = r.gen_range(wf / 10.0..wf / 4.0);
            let class = r.gen_range(1..k) as u8;
            let base_color = class_color(class);
            let jitter: [f64; 3] = std::array::from_fn(|_| r.gen_range(-0.05..0.05));
            Object {
                shape: if r.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
                cy: r.gen_range(0.0..hf),
                cx: r.gen_range(0.0..wf),
                ry,
                rx,
                class,
                depth: r.gen_range(1.5..2.0),
                slope: (r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3)),
                color: std::array::from_fn(|c| base_color[c] + jitter[c]),
            }
        })
        .collect();

    let mut depth = vec![0f32; h * w];
    let mut semseg = vec![0u8; h * w];
    let mut surface = vec![0usize; h * w];
    let mut color = vec![[0f64; 3]; h * w];
    let bg_color = class_color(0);
    for y in 0..h {
        for x in 0..w {
            let mut best = (bg_depth(y, x), 0usize);
            for (i, o) in objects.iter().enumerate() {
                if o.covers(y, x) {
                    let d = o.depth_at(y, x, pitch);
                    if d < best.0 {
                        best = (d, i + 1);
                    }
                }
            }
            let p = y * w + x;
            depth[p] = best.0 as f32;
            surface[p] = best.1;
            if best.1 == 0 {
                // faint stripes make the background plane's orientation visible
                let stripe = 0.08 * ((x as f64 + y as f64) * 0.5).sin();
                color[p] = bg_color.map(|c| c + stripe);
            } else {
                let o = &objects[best.1 - 1];
                semseg[p] = o.class;
                color[p] = o.color;
            }
        }
    }
    if surface.iter().all(|&s| s != 0) {
        return None;
    }

    // nearer surfaces render brighter
    let image = Tensor::from_fn(&[h, w, 3], |i| {
        let p = i / 3;
        let shade = 1.15 - 0.1 * depth[p] as f64;
        let noise = r.gen_range(-0.04..0.04);
        ((color[p][i % 3] * shade + noise).clamp(0.0, 1.0)) as f32
    });
    let normal = normals_from_depth(&depth, h, w, pitch);
    let normal_mask = label_edges(&surface_labels(&surface), h, w)
        .into_iter()
        .map(|e| 1 - e)
        .collect();
    let saliency = surface.iter().map(|&s| (s != 0) as u8).collect();
    Some(Sample {
        height: h,
        width: w,
        image,
        edge: label_edges(&semseg, h, w),
        semseg,
        depth: Tensor::new(&[h, w], depth).expect("sized"),
        normal: Tensor::new(&[h, w, 3], normal).expect("sized"),
        normal_mask,
        saliency: Some(saliency),
    })
}

/// Surface ids folded into u8 for neighborhood comparison. Ids differ
/// between neighbors only where the surfaces differ, and at most 255
/// objects are drawn in practice.
fn surface_labels(surface: &[usize]) -> Vec<u8> {
    surface.iter().map(|&s| (s % 256) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_a_plain_plane() {
        let s = gen_scene(3, 16, 16, 5, 0).unwrap();
        assert!(s.semseg.iter().all(|&c| c == 0));
        assert!(s.edge.iter().all(|&e| e == 0));
        let n0 = &s.normal.data()[..3];
        for px in s.normal.data().chunks(3) {
            for c in 0..3 {
                assert!((px[c] - n0[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let a = gen_scene(11, 32, 32, 5, 4).unwrap();
        let b = gen_scene(11, 32, 32, 5, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.image.bit_eq(&b.image));
    }

    #[test]
    fn maps_are_consistent() {
        for seed in 0..20 {
            let s = gen_scene(seed, 32, 32, 5, 5).unwrap();
            for px in s.normal.data().chunks(3) {
                let n: f32 = px.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
            assert!(s.depth.data().iter().all(|&d| (1.0..=5.0).contains(&d)));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.semseg.iter().any(|&c| c == 0));
        }
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        assert!(gen_scene(0, 8, 8, 1, 1).is_err());
    }
}
