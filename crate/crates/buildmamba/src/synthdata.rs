//! Procedural scene generator: rotated rectangular buildings over textured
//! ground, per-building heights from a long-tailed log-normal law, optional
//! cast shadows and label corruption. Also the raster preprocessing ops
//! (NaN imputation, semantic binarization, random crops) and the on-disk
//! dataset layout.

use crate::error::{Error, Result};
use crate::params::Rng64;
use crate::tensor::{read_bmt, write_bmt, Tensor};
use rand::{Rng, SeedableRng};
use std::path::Path;

// ── types ──

/// One training example. Image values live in [0,1]; heights are meters and
/// nonzero only where the mask is set.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: Tensor,  // [3,H,W]
    pub mask: Tensor,   // [1,H,W], {0,1}
    pub height: Tensor, // [1,H,W], >= 0
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        let (is, ms, hs) = (self.image.shape(), self.mask.shape(), self.height.shape());
        if is.len() != 3 || is[0] != 3 || ms != [1, is[1], is[2]] || hs != ms {
            return Err(Error::invalid(
                "scene",
                format!("inconsistent shapes image {:?} mask {:?} height {:?}", is, ms, hs),
            ));
        }
        for &v in self.image.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("scene", format!("image value {} outside [0,1]", v)));
            }
        }
        for (&m, &h) in self.mask.data().iter().zip(self.height.data()) {
            if m != 0.0 && m != 1.0 {
                return Err(Error::invalid("scene", format!("non-binary mask value {}", m)));
            }
            if h < 0.0 || (m == 0.0 && h != 0.0) || (h > 0.0 && m != 1.0) {
                return Err(Error::invalid("scene", format!("mask/height pair ({}, {})", m, h)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    /// Square extent, H = W.
    pub extent: usize,
    pub buildings_min: usize,
    pub buildings_max: usize,
    /// ln(height) ~ N(height_mu, height_sigma^2).
    pub height_mu: f64,
    pub height_sigma: f64,
    pub shadows: bool,
    /// Per-building probability of a corrupted label (dropped or rescaled).
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: 64,
            buildings_min: 2,
            buildings_max: 6,
            height_mu: 10.0f64.ln(), // median 10 m
            height_sigma: 0.5,
            shadows: true,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 32 {
            return Err(Error::invalid("scene_config", format!("extent {} < 32", self.extent)));
        }
        if self.buildings_min > self.buildings_max {
            return Err(Error::invalid("scene_config", "empty building count range"));
        }
        if self.height_sigma <= 0.0 {
            return Err(Error::invalid("scene_config", "height_sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::invalid("scene_config", "label_noise must lie in [0,1]"));
        }
        Ok(())
    }

    /// Analytic moments of the configured log-normal height law.
    pub fn height_moments(&self) -> (f64, f64) {
        let s2 = self.height_sigma * self.height_sigma;
        let mean = (self.height_mu + 0.5 * s2).exp();
        let var = (s2.exp() - 1.0) * (2.0 * self.height_mu + s2).exp();
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SceneStats {
    pub buildings: usize,
    pub corrupted: usize,
}

// ── generation ──

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn scene_rng(cfg_seed: u64, scene_seed: u64) -> Rng64 {
    Rng64::seed_from_u64(splitmix(cfg_seed) ^ splitmix(scene_seed.wrapping_mul(0xA24BAED4963EE407)))
}

fn normal(rng: &mut Rng64) -> f64 {
    // Box-Muller; u1 shifted off zero
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Building {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    cos_t: f64,
    sin_t: f64,
    height: f64,
    albedo: f64,
    // corruption flags; the image always shows the true building
    label_dropped: bool,
    label_height: f64,
}

impl Building {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (py, px) = (r as f64 + 0.5 - self.cy, c as f64 + 0.5 - self.cx);
        let u = px * self.cos_t + py * self.sin_t;
        let v = -px * self.sin_t + py * self.cos_t;
        u.abs() <= self.half_w && v.abs() <= self.half_h
    }
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    Ok(generate_scene_with_stats(cfg, seed)?.0)
}

/// Like `generate_scene` but also reports how many buildings were drawn and
/// how many had their labels corrupted.
pub fn generate_scene_with_stats(cfg: &SceneConfig, seed: u64) -> Result<(SceneSample, SceneStats)> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, seed);
    let e = cfg.extent;
    let ef = e as f64;

    let count = rng.gen_range(cfg.buildings_min..=cfg.buildings_max);
    let mut buildings = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.gen_range(0.15 * ef..0.85 * ef);
        let cy = rng.gen_range(0.15 * ef..0.85 * ef);
        let half_w = rng.gen_range(3.0..ef / 6.0);
        let half_h = rng.gen_range(3.0..ef / 6.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let height = (cfg.height_mu + cfg.height_sigma * normal(&mut rng)).exp();
        let albedo = rng.gen_range(0.5..0.85);
        let corrupt = rng.gen::<f64>() < cfg.label_noise;
        let (label_dropped, label_height) = if corrupt {
            if rng.gen::<bool>() {
                (true, 0.0) // missing annotation
            } else {
                (false, height * rng.gen_range(0.5..2.0)) // mismeasured height
            }
        } else {
            (false, height)
        };
        buildings.push(Building {
            cx,
            cy,
            half_w,
            half_h,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            height,
            albedo,
            label_dropped,
            label_height,
        });
    }
    let corrupted = buildings.iter().filter(|b| b.label_dropped || b.label_height != b.height).count();

    // paint order resolves overlaps: the last building wins a pixel
    let mut owner = vec![usize::MAX; e * e];
    for (i, b) in buildings.iter().enumerate() {
        for r in 0..e {
            for c in 0..e {
                if b.contains(r, c) {
                    owner[r * e + c] = i;
                }
            }
        }
    }

    // cast shadows fall along the fixed sun azimuth (down-right), scaled by
    // the true building height, and darken only ground pixels
    let mut shadow = vec![false; e * e];
    if cfg.shadows {
        for r in 0..e {
            for c in 0..e {
                let i = owner[r * e + c];
                if i == usize::MAX {
                    continue;
                }
                let steps = (buildings[i].height * 0.4).ceil() as usize;
                for s in 1..=steps {
                    let (sr, sc) = (r + s, c + s);
                    if sr >= e || sc >= e {
                        break;
                    }
                    if owner[sr * e + sc] == usize::MAX {
                        shadow[sr * e + sc] = true;
                    }
                }
            }
        }
    }

    let mut image = vec![0.0; 3 * e * e];
    let mut mask = vec![0.0; e * e];
    let mut height = vec![0.0; e * e];
    for r in 0..e {
        for c in 0..e {
            let px = r * e + c;
            let noise = rng.gen_range(-0.01..0.01);
            let (rv, gv, bv) = match owner[px] {
                usize::MAX => {
                    // greenish ground with low-frequency texture
                    let v = 0.30 + 0.05 * (0.11 * r as f64 + 0.05 * c as f64).sin() + noise;
                    (0.88 * v, v, 0.85 * v)
                }
                i => {
                    let b = &buildings[i];
                    // brightness rises with height: the monocular height cue
                    let bf = 0.55 + 0.45 * b.height / (b.height + 20.0);
                    let v = b.albedo * bf + noise;
                    (v, 0.82 * v, 0.78 * v)
                }
            };
            let dark = if shadow[px] { 0.5 } else { 1.0 };
            image[px] = (rv * dark).clamp(0.0, 1.0);
            image[e * e + px] = (gv * dark).clamp(0.0, 1.0);
            image[2 * e * e + px] = (bv * dark).clamp(0.0, 1.0);

            if owner[px] != usize::MAX {
                let b = &buildings[owner[px]];
                if !b.label_dropped && b.label_height > 0.0 {
                    mask[px] = 1.0;
                    height[px] = b.label_height;
                }
            }
        }
    }

    let sample = SceneSample {
        image: Tensor::new(image, &[3, e, e])?,
        mask: Tensor::new(mask, &[1, e, e])?,
        height: Tensor::new(height, &[1, e, e])?,
    };
    Ok((sample, SceneStats { buildings: count, corrupted }))
}

// ── preprocessing ops ──

/// Replace every NaN with the value of the nearest finite pixel (Euclidean
/// distance; ties prefer the smaller row, then the smaller column). The map
/// is the last two dims of a single-plane tensor.
pub fn impute_nan_nearest(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::invalid("impute_nan", format!("expected one plane, got {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let src = t.data();
    let finite: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| src[i].is_finite())
        .map(|i| (i / w, i % w))
        .collect();
    if finite.is_empty() {
        return Err(Error::invalid("impute_nan", "all pixels are NaN"));
    }
    let mut out = src.to_vec();
    for r in 0..h {
        for c in 0..w {
            if out[r * w + c].is_finite() {
                continue;
            }
            let mut best = (usize::MAX, 0usize, 0usize);
            for &(fr, fc) in &finite {
                let dr = fr.abs_diff(r);
                let dc = fc.abs_diff(c);
                let key = (dr * dr + dc * dc, fr, fc);
                if key < best {
                    best = key;
                }
            }
            out[r * w + c] = src[best.1 * w + best.2];
        }
    }
    Tensor::new(out, s)
}

/// 1 where the class id matches `building_id`, else 0.
pub fn binarize_semantic(map: &Tensor, building_id: usize) -> Tensor {
    let id = building_id as f64;
    let data: Vec<f64> = map.data().iter().map(|&v| if v == id { 1.0 } else { 0.0 }).collect();
    Tensor::new(data, map.shape()).expect("shape is preserved")
}

/// `count` square crops at independent uniform offsets.
pub fn random_crops(sample: &SceneSample, crop: usize, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
    sample.validate()?;
    let e = sample.mask.shape()[1];
    if crop == 0 || crop > e {
        return Err(Error::invalid("random_crops", format!("crop {} outside 1..={}", crop, e)));
    }
    let mut rng = Rng64::seed_from_u64(splitmix(seed));
    let slice_plane = |src: &[f64], plane: usize, r0: usize, c0: usize, out: &mut Vec<f64>| {
        for r in 0..crop {
            let base = plane * e * e + (r0 + r) * e + c0;
            out.extend_from_slice(&src[base..base + crop]);
        }
    };
    let mut crops = Vec::with_capacity(count);
    for _ in 0..count {
        let r0 = rng.gen_range(0..=e - crop);
        let c0 = rng.gen_range(0..=e - crop);
        let mut img = Vec::with_capacity(3 * crop * crop);
        for p in 0..3 {
            slice_plane(sample.image.data(), p, r0, c0, &mut img);
        }
        let mut m = Vec::with_capacity(crop * crop);
        let mut hgt = Vec::with_capacity(crop * crop);
        slice_plane(sample.mask.data(), 0, r0, c0, &mut m);
        slice_plane(sample.height.data(), 0, r0, c0, &mut hgt);
        crops.push(SceneSample {
            image: Tensor::new(img, &[3, crop, crop])?,
            mask: Tensor::new(m, &[1, crop, crop])?,
            height: Tensor::new(hgt, &[1, crop, crop])?,
        });
    }
    Ok(crops)
}

// ── on-disk dataset ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source: e }
}

/// Generate and persist a dataset: one directory per sample with BMT1
/// triplets, plus `index.csv` recording seed and split. Train and val draw
/// from disjoint seed ranges.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, n_train: usize, n_val: usize) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut index = String::from("name,seed,split\n");
    let emit = |name: String, seed: u64, split: Split, index: &mut String| -> Result<()> {
        let sample = generate_scene(cfg, seed)?;
        let sub = dir.join(&name);
        std::fs::create_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
        write_bmt(&sub.join("image.bmt"), &sample.image)?;
        write_bmt(&sub.join("mask.bmt"), &sample.mask)?;
        write_bmt(&sub.join("height.bmt"), &sample.height)?;
        index.push_str(&format!("{},{},{}\n", name, seed, split.as_str()));
        Ok(())
    };
    for i in 0..n_train {
        emit(format!("train_{:04}", i), i as u64, Split::Train, &mut index)?;
    }
    for j in 0..n_val {
        emit(format!("val_{:04}", j), (n_train + j) as u64, Split::Val, &mut index)?;
    }
    let ipath = dir.join("index.csv");
    std::fs::write(&ipath, index).map_err(|e| io_err(&ipath, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let ipath = dir.join("index.csv");
    let text = std::fs::read_to_string(&ipath).map_err(|e| io_err(&ipath, e))?;
    let fail = |msg: String| Error::Format { path: ipath.display().to_string(), msg };
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "name,seed,split" {
                return Err(fail(format!("bad header '{}'", line)));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(fail(format!("line {}: expected 3 fields", ln + 1)));
        }
        let seed: u64 = parts[1].parse().map_err(|_| fail(format!("line {}: bad seed", ln + 1)))?;
        let split = match parts[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(fail(format!("line {}: unknown split '{}'", ln + 1, other))),
        };
        entries.push(IndexEntry { name: parts[0].to_string(), seed, split });
    }
    Ok(entries)
}

pub fn load_sample(dir: &Path, name: &str) -> Result<SceneSample> {
    let sub = dir.join(name);
    let sample = SceneSample {
        image: read_bmt(&sub.join("image.bmt"))?,
        mask: read_bmt(&sub.join("mask.bmt"))?,
        height: read_bmt(&sub.join("height.bmt"))?,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    read_index(dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_sample(dir, &e.name))
        .collect()
}
