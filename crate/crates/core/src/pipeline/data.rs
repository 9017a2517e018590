//! Procedural multi-task scenes: anti-aliased geometric shapes on a
//! small canvas with mutually consistent per-pixel targets. Stands in
//! for a real dense-prediction dataset at desk scale; deterministic in
//! the seed.

use alloc::vec;
use alloc::vec::Vec;

// float intrinsics in no_std builds; std test builds shadow it
#[allow(unused_imports)]
use num_traits::Float;

use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};

/// Shape classes map to segmentation labels 1..=3; 0 is background.
#[derive(Clone, Copy, Debug)]
enum Kind {
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Tri {
        ax: f64,
        ay: f64,
        bx: f64,
        by: f64,
        cx: f64,
        cy: f64,
    },
}

#[derive(Clone, Debug)]
struct Shape {
    kind: Kind,
    /// Depth plane `z0 + gx * (x/w - 0.5) + gy * (y/h - 0.5)`.
    z0: f64,
    gx: f64,
    gy: f64,
    color: [f64; 3],
}

impl Shape {
    fn class(&self) -> usize {
        match self.kind {
            Kind::Disk { .. } => 1,
            Kind::Rect { .. } => 2,
            Kind::Tri { .. } => 3,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            Kind::Disk { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Kind::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Kind::Tri {
                ax,
                ay,
                bx,
                by,
                cx,
                cy,
            } => {
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx, cy);
                let d3 = sign(cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    /// Depth at normalized coordinates, clamped away from the far plane.
    fn depth(&self, xn: f64, yn: f64) -> f64 {
        (self.z0 + self.gx * (xn - 0.5) + self.gy * (yn - 0.5)).clamp(0.05, 0.95)
    }

    /// Unit normal of the depth plane (gradient fixed over the shape).
    fn normal(&self) -> [f64; 3] {
        let k = 4.0;
        let (nx, ny, nz) = (-self.gx * k, -self.gy * k, 1.0);
        let len = (nx * nx + ny * ny + nz * nz).sqrt();
        [nx / len, ny / len, nz / len]
    }

    /// Supersampled coverage of one pixel (anti-aliasing).
    fn coverage(&self, px: usize, py: usize) -> f64 {
        const SS: usize = 4;
        let mut hits = 0;
        for sy in 0..SS {
            for sx in 0..SS {
                let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SS * SS) as f64
    }
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub h: usize,
    pub w: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub with_normals: bool,
}

impl DataConfig {
    pub fn new(h: usize, w: usize) -> Self {
        DataConfig {
            h,
            w,
            min_shapes: 2,
            max_shapes: 4,
            with_normals: false,
        }
    }
}

/// Per-pixel ground truth for every task the generator supports.
#[derive(Clone, Debug)]
pub struct TaskTargets<T> {
    /// Class index per pixel, row-major; 0 = background.
    pub seg: Vec<usize>,
    /// `1 x h x w` depth in (0, 1]; background sits at the far plane.
    pub depth: Tensor<T>,
    /// 1 where the 4-neighborhood crosses a segmentation label change.
    pub boundary: Vec<usize>,
    /// `3 x h x w` unit normals of the visible depth plane.
    pub normal: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// `3 x h x w` RGB in [0, 1].
    pub image: Tensor<T>,
    pub targets: TaskTargets<T>,
}

const BG_DEPTH: f64 = 1.0;
const BG_GRAY: f64 = 0.15;

fn random_shape(rng: &mut SeedRng, h: f64, w: f64) -> Shape {
    let kind = match rng.below(3) {
        0 => {
            let r = rng.range_f64(0.12, 0.3) * w.min(h);
            Kind::Disk {
                cx: rng.range_f64(r, w - r),
                cy: rng.range_f64(r, h - r),
                r,
            }
        }
        1 => {
            let x0 = rng.range_f64(0.0, w * 0.6);
            let y0 = rng.range_f64(0.0, h * 0.6);
            Kind::Rect {
                x0,
                y0,
                x1: x0 + rng.range_f64(w * 0.2, w * 0.4),
                y1: y0 + rng.range_f64(h * 0.2, h * 0.4),
            }
        }
        _ => {
            let cx = rng.range_f64(w * 0.2, w * 0.8);
            let cy = rng.range_f64(h * 0.2, h * 0.8);
            let r = rng.range_f64(0.15, 0.35) * w.min(h);
            Kind::Tri {
                ax: cx,
                ay: cy - r,
                bx: cx - r,
                by: cy + r * 0.8,
                cx: cx + r,
                cy: cy + r * 0.7,
            }
        }
    };
    Shape {
        kind,
        z0: rng.range_f64(0.2, 0.8),
        gx: rng.range_f64(-0.3, 0.3),
        gy: rng.range_f64(-0.3, 0.3),
        color: [
            rng.range_f64(0.2, 1.0),
            rng.range_f64(0.2, 1.0),
            rng.range_f64(0.2, 1.0),
        ],
    }
}

fn render<T: Real>(shapes: &[Shape], cfg: &DataConfig) -> Sample<T> {
    let (h, w) = (cfg.h, cfg.w);
    let hw = h * w;
    let mut image = vec![0.0f64; 3 * hw];
    let mut seg = vec![0usize; hw];
    let mut depth = vec![BG_DEPTH; hw];
    let mut normal = vec![0.0f64; 3 * hw];

    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let xn = (px as f64 + 0.5) / w as f64;
            let yn = (py as f64 + 0.5) / h as f64;

            // visible shape for targets: nearest among solid covers
            let mut best: Option<(usize, f64)> = None;
            let mut covers: Vec<(usize, f64, f64)> = Vec::new(); // (idx, coverage, z)
            for (si, s) in shapes.iter().enumerate() {
                let c = s.coverage(px, py);
                if c > 0.0 {
                    let z = s.depth(xn, yn);
                    covers.push((si, c, z));
                    if c >= 0.5 && best.map_or(true, |(_, bz)| z < bz) {
                        best = Some((si, z));
                    }
                }
            }

            if let Some((si, z)) = best {
                seg[p] = shapes[si].class();
                depth[p] = z;
                let n = shapes[si].normal();
                for c in 0..3 {
                    normal[c * hw + p] = n[c];
                }
            } else {
                normal[2 * hw + p] = 1.0;
            }

            // composite far-to-near for the anti-aliased image
            covers.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite depths"));
            let mut rgb = [BG_GRAY; 3];
            for (si, c, z) in covers {
                let shade = (1.2 - 0.6 * z).clamp(0.0, 1.2);
                for ch in 0..3 {
                    let col = (shapes[si].color[ch] * shade).clamp(0.0, 1.0);
                    rgb[ch] = (1.0 - c) * rgb[ch] + c * col;
                }
            }
            for ch in 0..3 {
                image[ch * hw + p] = rgb[ch];
            }
        }
    }

    // boundaries are exactly the 4-neighborhood label transitions
    let mut boundary = vec![0usize; hw];
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let here = seg[p];
            let mut edge = false;
            if px + 1 < w && seg[p + 1] != here {
                edge = true;
            }
            if px > 0 && seg[p - 1] != here {
                edge = true;
            }
            if py + 1 < h && seg[p + w] != here {
                edge = true;
            }
            if py > 0 && seg[p - w] != here {
                edge = true;
            }
            boundary[p] = edge as usize;
        }
    }

    let to_tensor = |data: Vec<f64>, shape: &[usize]| {
        Tensor::from_vec(shape, data.into_iter().map(T::val).collect())
            .expect("render buffers are sized by construction")
    };

    Sample {
        image: to_tensor(image, &[3, h, w]),
        targets: TaskTargets {
            seg,
            depth: to_tensor(depth, &[1, h, w]),
            boundary,
            normal: cfg.with_normals.then(|| to_tensor(normal, &[3, h, w])),
        },
    }
}

/// Renders `n` deterministic scenes of `min_shapes..=max_shapes` shapes.
pub fn synth_dataset<T: Real>(seed: u64, n: usize, cfg: &DataConfig) -> Vec<Sample<T>> {
    let mut rng = SeedRng::new(seed);
    (0..n)
        .map(|_| {
            let count = if cfg.max_shapes > cfg.min_shapes {
                cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1)
            } else {
                cfg.min_shapes
            };
            let shapes: Vec<Shape> = (0..count)
                .map(|_| random_shape(&mut rng, cfg.h as f64, cfg.w as f64))
                .collect();
            render(&shapes, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = DataConfig::new(16, 16);
        let a = synth_dataset::<f64>(7, 3, &cfg);
        let b = synth_dataset::<f64>(7, 3, &cfg);
        for (sa, sb) in a.iter().zip(&b) {
            assert!(sa.image.bitwise_eq(&sb.image));
            assert_eq!(sa.targets.seg, sb.targets.seg);
            assert_eq!(sa.targets.boundary, sb.targets.boundary);
            assert!(sa.targets.depth.bitwise_eq(&sb.targets.depth));
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let mut cfg = DataConfig::new(12, 12);
        cfg.min_shapes = 0;
        cfg.max_shapes = 0;
        let data = synth_dataset::<f64>(3, 1, &cfg);
        assert!(data[0].targets.seg.iter().all(|&c| c == 0));
        assert!(data[0].targets.boundary.iter().all(|&b| b == 0));
        assert!(data[0]
            .targets
            .depth
            .data()
            .iter()
            .all(|&z| (z - BG_DEPTH).abs() < 1e-12));
    }

    #[test]
    fn boundaries_coincide_with_segmentation_transitions() {
        let cfg = DataConfig::new(24, 24);
        for sample in synth_dataset::<f64>(11, 4, &cfg) {
            let seg = &sample.targets.seg;
            for py in 0..24usize {
                for px in 0..24usize {
                    let p = py * 24 + px;
                    let mut edge = false;
                    for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                        let (ny, nx) = (py as i64 + dy, px as i64 + dx);
                        if ny >= 0 && ny < 24 && nx >= 0 && nx < 24 {
                            edge |= seg[ny as usize * 24 + nx as usize] != seg[p];
                        }
                    }
                    assert_eq!(sample.targets.boundary[p], edge as usize);
                }
            }
        }
    }

    #[test]
    fn scenes_contain_foreground_and_finite_values() {
        let cfg = DataConfig::new(32, 32);
        let data = synth_dataset::<f32>(42, 4, &cfg);
        for s in &data {
            assert!(s.image.all_finite());
            assert!(s.targets.seg.iter().any(|&c| c > 0), "scene has shapes");
            assert!(s.targets.seg.iter().all(|&c| c < 4));
        }
    }

    #[test]
    fn normals_are_unit_length_when_requested() {
        let mut cfg = DataConfig::new(16, 16);
        cfg.with_normals = true;
        let data = synth_dataset::<f64>(5, 2, &cfg);
        let n = data[0].targets.normal.as_ref().unwrap();
        let hw = 256;
        for p in 0..hw {
            let len: f64 = (0..3).map(|c| n.data()[c * hw + p].powi(2)).sum();
            assert!((len - 1.0).abs() < 1e-9);
        }
    }
}
