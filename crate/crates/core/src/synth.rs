//! Seeded synthetic building scenes.
//!
//! Buildings are (optionally rotated) rectangles with distinct roof colours
//! on a textured ground, with darker shadow bands next to some buildings and
//! road-like stripes that are not buildings. A pixel belongs to a building
//! iff its centre `(x + 0.5, y + 0.5)` lies inside the polygon, using
//! half-open crossings so shared edges are owned by exactly one side.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::io::{self, ManifestEntry};
use crate::model::baseline::EXTENT_MULTIPLE;
use crate::parallel::Exec;
use crate::seed;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub extent: usize,
    /// Inclusive range of building counts.
    pub building_count: (usize, usize),
    /// Inclusive range of rectangle side lengths in pixels.
    pub size: (f64, f64),
    pub rotation: bool,
    pub noise: f64,
    pub shadow_probability: f64,
    pub distractor_probability: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: 64,
            building_count: (2, 5),
            size: (8.0, 20.0),
            rotation: true,
            noise: 0.04,
            shadow_probability: 0.5,
            distractor_probability: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Param(msg));
        if self.extent == 0 || !self.extent.is_multiple_of(EXTENT_MULTIPLE) {
            return bad(format!(
                "scene extent {} must be a positive multiple of {EXTENT_MULTIPLE}",
                self.extent
            ));
        }
        if self.building_count.0 > self.building_count.1 {
            return bad(format!("empty building_count range {:?}", self.building_count));
        }
        if !(self.size.0 > 0.0 && self.size.0 <= self.size.1 && self.size.1.is_finite()) {
            return bad(format!("size range {:?} must be positive and non-empty", self.size));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside [0, 1]", self.noise));
        }
        for (name, p) in [
            ("shadow", self.shadow_probability),
            ("distractor", self.distractor_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor<T>,
    /// `1 x H x W`, values in `{0, 1}`.
    pub mask: Tensor<T>,
    pub seed: u64,
    /// Building rectangles in pixel units; empty for scenes read from disk.
    pub footprints: Vec<Polygon>,
}

pub type Polygon = Vec<(f64, f64)>;

/// Corners of a `w x h` rectangle centred at `(cx, cy)`, rotated by `theta`.
pub fn rectangle(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Polygon {
    let (s, c) = theta.sin_cos();
    [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
        .iter()
        .map(|&(u, v)| {
            let (dx, dy) = (u * w, v * h);
            (cx + dx * c - dy * s, cy + dx * s + dy * c)
        })
        .collect()
}

/// Scanline fill: calls `put(x, y)` for every pixel whose centre is inside `poly`.
pub fn rasterize(poly: &[(f64, f64)], width: usize, height: usize, mut put: impl FnMut(usize, usize)) {
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..poly.len() {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % poly.len()];
            if (y0 <= yc) != (y1 <= yc) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // centres with span[0] <= xc < span[1]
            let first = (span[0] - 0.5).ceil().max(0.0) as usize;
            for x in first..width {
                let xc = x as f64 + 0.5;
                if xc >= span[1] {
                    break;
                }
                if xc >= span[0] {
                    put(x, y);
                }
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill(&mut self, poly: &[(f64, f64)], colour: [f64; 3]) {
        let (w, h) = (self.w, self.h);
        rasterize(poly, w, h, |x, y| self.rgb[y * w + x] = colour);
    }

    fn darken(&mut self, poly: &[(f64, f64)], factor: f64) {
        let (w, h) = (self.w, self.h);
        rasterize(poly, w, h, |x, y| {
            for c in &mut self.rgb[y * w + x] {
                *c *= factor;
            }
        });
    }
}

pub fn generate_scene<T: Element>(spec: &SceneSpec, scene_seed: u64) -> Result<Scene<T>> {
    spec.validate()?;
    let n = spec.extent;
    let mut rng = seed::rng(scene_seed, "scene");
    let ground = [
        rng.gen_range(0.30..0.45),
        rng.gen_range(0.40..0.55),
        rng.gen_range(0.25..0.35),
    ];
    let mut canvas = Canvas {
        w: n,
        h: n,
        rgb: vec![ground; n * n],
    };
    let extent = n as f64;

    if rng.gen_bool(spec.distractor_probability) {
        let width = rng.gen_range(3.0..6.0);
        let theta = if spec.rotation { rng.gen_range(0.0..PI) } else { 0.0 };
        let (cx, cy) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
        let tone = rng.gen_range(0.45..0.6);
        canvas.fill(
            &rectangle(cx, cy, 3.0 * extent, width, theta),
            [tone, tone, tone * 0.95],
        );
    }

    let count = rng.gen_range(spec.building_count.0..=spec.building_count.1);
    let mut buildings = Vec::with_capacity(count);
    for _ in 0..count {
        let (bw, bh) = (uniform(&mut rng, spec.size), uniform(&mut rng, spec.size));
        let cx = rng.gen_range(0.0..extent);
        let cy = rng.gen_range(0.0..extent);
        let theta = if spec.rotation { rng.gen_range(0.0..PI) } else { 0.0 };
        let poly = rectangle(cx, cy, bw, bh, theta);
        if rng.gen_bool(spec.shadow_probability) {
            let (dx, dy) = (rng.gen_range(2.0..4.0), rng.gen_range(2.0..4.0));
            let shadow: Polygon = poly.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
            canvas.darken(&shadow, 0.45);
        }
        let hue = rng.gen_range(0..3);
        let mut roof = [rng.gen_range(0.55..0.75); 3];
        roof[hue] = rng.gen_range(0.8..0.95);
        buildings.push((poly, roof));
    }
    let mut mask = vec![0.0f64; n * n];
    for (poly, roof) in &buildings {
        canvas.fill(poly, *roof);
        rasterize(poly, n, n, |x, y| mask[y * n + x] = 1.0);
    }

    let mut image = vec![0.0f64; 3 * n * n];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for (c, &v) in px.iter().enumerate() {
            let noisy = v + spec.noise * rng.gen_range(-1.0..=1.0);
            image[c * n * n + i] = noisy.clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        image: Tensor::from_f64(&[3, n, n], &image)?,
        mask: Tensor::from_f64(&[1, n, n], &mask)?,
        seed: scene_seed,
        footprints: buildings.into_iter().map(|(poly, _)| poly).collect(),
    })
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed::derive(seed, &format!("scene{index}"))
}

/// Scenes `0..count`; index `i` uses [`scene_seed`]`(seed, i)`.
pub fn generate_dataset<T: Element>(spec: &SceneSpec, seed: u64, count: usize, exec: Exec) -> Result<Vec<Scene<T>>> {
    spec.validate()?;
    exec.map(count, |i| generate_scene(spec, scene_seed(seed, i)))
        .into_iter()
        .collect()
}

/// Even indices train, odd indices validate.
pub fn split_even_odd<S>(scenes: Vec<S>) -> (Vec<S>, Vec<S>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in scenes.into_iter().enumerate() {
        if i % 2 == 0 {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    (train, val)
}

/// Writes `scene_XXXX.uatn` / `scene_XXXX.pgm` files plus the manifest at `manifest`.
pub fn write_dataset<T: Element>(dir: &Path, manifest: &str, scenes: &[Scene<T>], offset: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("scene_{:04}", offset + i);
        let image = PathBuf::from(format!("{stem}.uatn"));
        let mask = PathBuf::from(format!("{stem}.pgm"));
        io::write_container(&dir.join(&image), &s.image)?;
        io::write_pgm(&dir.join(&mask), &io::mask_to_image(&s.mask)?)?;
        entries.push(ManifestEntry {
            image,
            mask,
            seed: s.seed,
        });
    }
    let path = dir.join(manifest);
    fs::write(&path, io::format_manifest(&entries))?;
    Ok(path)
}

pub fn load_dataset<T: Element>(manifest: &Path) -> Result<Vec<Scene<T>>> {
    io::read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let image: Tensor<T> = io::read_container(&e.image)?;
            let mask = io::image_to_mask(&io::read_pgm(&e.mask)?);
            let (_, h, w) = image.chw()?;
            if mask.shape() != [1, h, w] {
                return Err(TensorError::Shape(format!(
                    "{}: mask {:?} does not match image {:?}",
                    e.mask.display(),
                    mask.shape(),
                    image.shape()
                )));
            }
            Ok(Scene {
                image,
                mask,
                seed: e.seed,
                footprints: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_buildings_no_mask() {
        let spec = SceneSpec {
            building_count: (0, 0),
            ..SceneSpec::default()
        };
        let s: Scene<f32> = generate_scene(&spec, 4).unwrap();
        assert_eq!(s.mask.sum(), 0.0);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a: Scene<f32> = generate_scene(&spec, 11).unwrap();
        let b: Scene<f32> = generate_scene(&spec, 11).unwrap();
        let c: Scene<f32> = generate_scene(&spec, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn value_ranges() {
        let s: Scene<f64> = generate_scene(&SceneSpec::default(), 3).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.mask.sum() > 0.0);
    }

    #[test]
    fn axis_aligned_square_area() {
        // [2, 6) x [1, 4): centres 2.5..5.5 and 1.5..3.5
        let poly = vec![(2.0, 1.0), (6.0, 1.0), (6.0, 4.0), (2.0, 4.0)];
        let mut n = 0;
        rasterize(&poly, 10, 10, |_, _| n += 1);
        assert_eq!(n, 12);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SceneSpec {
                extent: 40,
                ..SceneSpec::default()
            },
            SceneSpec {
                building_count: (3, 2),
                ..SceneSpec::default()
            },
            SceneSpec {
                size: (0.0, 4.0),
                ..SceneSpec::default()
            },
            SceneSpec {
                shadow_probability: 1.5,
                ..SceneSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(generate_scene::<f32>(&spec, 0), Err(TensorError::Param(_))));
        }
    }

    #[test]
    fn split_parity() {
        let (a, b) = split_even_odd((0..5).collect());
        assert_eq!(a, vec![0, 2, 4]);
        assert_eq!(b, vec![1, 3]);
    }
}
