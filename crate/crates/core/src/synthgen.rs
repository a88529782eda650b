//! Synthetic prompt-conditioned counting scenes.
//!
//! Each scene holds Gaussian blobs from one or more object categories. Every
//! category has a fixed RGB-like appearance signature, and a fourth image
//! channel carries the prompt (which category to count). The ground-truth
//! density only contains blobs of the prompted category.
//!
//! Layout: single-category scenes cluster horizontally around the image
//! center (x ~ N(center, W/16)); multi-category scenes give each category its
//! own vertical strip. The prompted category sits in the leftmost or
//! rightmost strip and the others fill the rest in random order.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CATEGORIES: usize = 5;
pub const MAX_BLOBS_PER_CATEGORY: usize = 12;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_BLOB_SIGMA: f64 = 1.5;
/// Appearance channels plus the prompt channel.
pub const IMAGE_CHANNELS: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Appearance signature per catalog category.
pub const SIGNATURES: [[f64; 3]; MAX_CATEGORIES] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.2, 1.0],
    [1.0, 1.0, 0.2],
    [0.2, 1.0, 1.0],
];

/// Prompt-channel value for a catalog category.
pub fn prompt_value(catalog_id: usize) -> f64 {
    catalog_id as f64 / (MAX_CATEGORIES - 1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Catalog id (signature index) of each category present, in scene order.
    pub category_ids: Vec<usize>,
    /// Blob count per scene category, aligned with `category_ids`.
    pub blob_counts: Vec<usize>,
    /// Index into `category_ids` of the prompted category.
    pub specified_category: usize,
    pub blob_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Spec with catalog ids `0..K` and default size and sigma.
    pub fn new(blob_counts: Vec<usize>, specified_category: usize, seed: u64) -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            category_ids: (0..blob_counts.len()).collect(),
            blob_counts,
            specified_category,
            blob_sigma: DEFAULT_BLOB_SIGMA,
            seed,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.category_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_categories();
        if !(1..=MAX_CATEGORIES).contains(&k) {
            return Err(Error::Contract(format!(
                "scene needs 1..={MAX_CATEGORIES} categories, got {k}"
            )));
        }
        if self.blob_counts.len() != k {
            return Err(Error::Contract(format!(
                "{} blob counts for {k} categories",
                self.blob_counts.len()
            )));
        }
        if let Some(c) = self
            .blob_counts
            .iter()
            .find(|c| !(1..=MAX_BLOBS_PER_CATEGORY).contains(*c))
        {
            return Err(Error::Contract(format!(
                "blob count {c} outside 1..={MAX_BLOBS_PER_CATEGORY}"
            )));
        }
        let mut ids = self.category_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != k || ids.iter().any(|&i| i >= MAX_CATEGORIES) {
            return Err(Error::Contract(format!(
                "category ids {:?} must be distinct and < {MAX_CATEGORIES}",
                self.category_ids
            )));
        }
        if self.specified_category >= k {
            return Err(Error::Contract(format!(
                "specified category {} out of range for {k} categories",
                self.specified_category
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Contract(format!(
                "image size {} below the minimum of 8",
                self.image_size
            )));
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return Err(Error::Contract(format!(
                "blob sigma {} must be positive",
                self.blob_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    /// Index into the scene's `category_ids`.
    pub category: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// `[4, H, W]`: three appearance channels and the prompt channel.
    pub image: Tensor,
    /// `[H, W]`, unit mass per prompted blob.
    pub gt_density: Tensor,
    pub counts: Vec<usize>,
    pub total_count: usize,
    pub blobs: Vec<Blob>,
}

impl Scene {
    pub fn num_categories(&self) -> usize {
        self.spec.num_categories()
    }

    pub fn specified_count(&self) -> usize {
        self.counts[self.spec.specified_category]
    }

    pub fn nonspecified_count(&self) -> usize {
        self.total_count - self.specified_count()
    }
}

fn place_blobs(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let size = spec.image_size as f64;
    let k = spec.num_categories();
    let min_dist = 3.0 * spec.blob_sigma;
    let mut strips: Vec<usize> = (0..k).collect();
    strips.shuffle(rng);
    if k > 1 {
        // the prompted category takes one of the two edge strips
        let edge = if rng.gen_bool(0.5) { 0 } else { k - 1 };
        let at = strips.iter().position(|&s| s == edge).expect("edge strip exists");
        strips.swap(at, spec.specified_category);
    }
    let centered = Normal::new((size - 1.0) / 2.0, size / 16.0).expect("valid normal");
    let mut blobs: Vec<Blob> = Vec::new();
    for (category, &count) in spec.blob_counts.iter().enumerate() {
        let strip_w = size / k as f64;
        let lo = strips[category] as f64 * strip_w;
        for blob in 0..count {
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x = if k == 1 {
                    centered.sample(rng)
                } else {
                    rng.gen_range(lo..lo + strip_w)
                };
                let y = rng.gen_range(0.0..size - 1.0);
                if !(0.0..=size - 1.0).contains(&x) {
                    continue;
                }
                let clear = blobs
                    .iter()
                    .all(|b| (b.x - x).hypot(b.y - y) >= min_dist);
                if clear {
                    placed = Some(Blob { category, x, y });
                    break;
                }
            }
            match placed {
                Some(b) => blobs.push(b),
                None => {
                    return Err(Error::Placement {
                        blob,
                        category,
                        attempts: PLACEMENT_ATTEMPTS,
                    })
                }
            }
        }
    }
    Ok(blobs)
}

/// Pixels within `3 sigma` of the blob center and their unnormalized
/// Gaussian weights `exp(-d^2 / 2 sigma^2)`.
fn blob_footprint(blob: &Blob, size: usize, sigma: f64) -> Vec<(usize, f64)> {
    let radius = 3.0 * sigma;
    let x0 = (blob.x - radius).floor().max(0.0) as usize;
    let x1 = ((blob.x + radius).ceil() as usize).min(size - 1);
    let y0 = (blob.y - radius).floor().max(0.0) as usize;
    let y1 = ((blob.y + radius).ceil() as usize).min(size - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - blob.x).powi(2) + (y as f64 - blob.y).powi(2);
            if d2 <= radius * radius {
                out.push((y * size + x, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = place_blobs(spec, &mut rng)?;
    let size = spec.image_size;
    let plane = size * size;
    let mut image = vec![0.0; IMAGE_CHANNELS * plane];
    let mut density = vec![0.0; plane];
    for blob in &blobs {
        let footprint = blob_footprint(blob, size, spec.blob_sigma);
        let signature = SIGNATURES[spec.category_ids[blob.category]];
        for &(idx, g) in &footprint {
            for (c, s) in signature.iter().enumerate() {
                image[c * plane + idx] += s * g;
            }
        }
        if blob.category == spec.specified_category {
            let mass: f64 = footprint.iter().map(|(_, g)| g).sum();
            for &(idx, g) in &footprint {
                density[idx] += g / mass;
            }
        }
    }
    let prompt = prompt_value(spec.category_ids[spec.specified_category]);
    image[3 * plane..].iter_mut().for_each(|v| *v = prompt);
    Ok(Scene {
        spec: spec.clone(),
        image: Tensor::new(vec![IMAGE_CHANNELS, size, size], image)?,
        gt_density: Tensor::new(vec![size, size], density)?,
        counts: spec.blob_counts.clone(),
        total_count: spec.blob_counts.iter().sum(),
        blobs,
    })
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-category blob cap for a scene with `k` categories, chosen so that
/// strips can always hold their blobs at the minimum spacing. Single-category
/// scenes share the cap so that per-category counts do not depend on `k`.
fn count_cap(k: usize) -> usize {
    match k {
        1..=4 => 6,
        _ => 5,
    }
}

fn random_spec(k: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..MAX_CATEGORIES).collect();
    ids.shuffle(&mut rng);
    ids.truncate(k);
    let cap = count_cap(k);
    let blob_counts = (0..k).map(|_| rng.gen_range(1..=cap)).collect();
    SceneSpec {
        image_size: DEFAULT_IMAGE_SIZE,
        category_ids: ids,
        blob_counts,
        specified_category: rng.gen_range(0..k),
        blob_sigma: DEFAULT_BLOB_SIGMA,
        seed: derive_seed(seed, 0),
    }
}

/// Scene specs for a corpus: `round(n * fraction)` single-category scenes at
/// seeded positions, the rest with `K` uniform on `2..=5`. Every returned spec
/// is guaranteed to generate.
pub fn corpus_specs(n: usize, single_category_fraction: f64, seed: u64) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::Contract("corpus size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&single_category_fraction) {
        return Err(Error::Contract(format!(
            "single-category fraction {single_category_fraction} outside [0, 1]"
        )));
    }
    let singles = (n as f64 * single_category_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let mut is_single = vec![false; n];
    for &i in &order[..singles] {
        is_single[i] = true;
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let scene_seed = derive_seed(seed, i as u64);
            let k = if is_single[i] {
                1
            } else {
                ChaCha8Rng::seed_from_u64(scene_seed).gen_range(2..=MAX_CATEGORIES)
            };
            // Re-derive until the layout is placeable; a handful of retries
            // is plenty at these densities.
            for attempt in 0..64u64 {
                let spec = random_spec(k, derive_seed(scene_seed, attempt + 1));
                if generate_scene(&spec).is_ok() {
                    return Ok(spec);
                }
            }
            Err(Error::Contract(format!("scene {i}: no placeable layout")))
        })
        .collect()
}

pub fn generate_corpus(n: usize, single_category_fraction: f64, seed: u64) -> Result<Vec<Scene>> {
    let specs = corpus_specs(n, single_category_fraction, seed)?;
    generate_scenes(&specs)
}

pub fn generate_scenes(specs: &[SceneSpec]) -> Result<Vec<Scene>> {
    specs.par_iter().map(generate_scene).collect()
}

/// SHA-256 over every scene's image and density bytes, hex encoded.
pub fn corpus_hash(scenes: &[Scene]) -> String {
    let mut hasher = Sha256::new();
    for scene in scenes {
        for v in scene.image.data().iter().chain(scene.gt_density.data()) {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub const PROBE_PROMPTED_HEIGHT: f64 = 0.9;
pub const PROBE_OTHER_HEIGHT: f64 = 0.15;

/// Hand-built prompt-conditioned feature map for attribute probing:
/// one channel per catalog category, each blob drawn as a Gaussian bump of
/// height [`PROBE_PROMPTED_HEIGHT`] for the prompted category and
/// [`PROBE_OTHER_HEIGHT`] for the others.
pub fn probe_features(scene: &Scene) -> Result<Tensor> {
    let size = scene.spec.image_size;
    let plane = size * size;
    let mut data = vec![0.0; MAX_CATEGORIES * plane];
    for blob in &scene.blobs {
        let height = if blob.category == scene.spec.specified_category {
            PROBE_PROMPTED_HEIGHT
        } else {
            PROBE_OTHER_HEIGHT
        };
        let channel = scene.spec.category_ids[blob.category];
        for (idx, g) in blob_footprint(blob, size, scene.spec.blob_sigma) {
            let v = &mut data[channel * plane + idx];
            *v = (*v + height * g).min(1.0);
        }
    }
    Tensor::new(vec![MAX_CATEGORIES, size, size], data)
}

pub const CORPUS_HEADER: &str =
    "index,seed,image_size,num_categories,specified_category,blob_sigma,category_ids,counts,total_count";

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_corpus_csv(path: &Path, specs: &[SceneSpec]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CORPUS_HEADER}")?;
    for (i, s) in specs.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{}",
            s.seed,
            s.image_size,
            s.num_categories(),
            s.specified_category,
            s.blob_sigma,
            join(&s.category_ids),
            join(&s.blob_counts),
            s.blob_counts.iter().sum::<usize>()
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus_csv(path: &Path) -> Result<Vec<SceneSpec>> {
    let name = path.display().to_string();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut specs = Vec::new();
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: name.clone(),
        line,
        reason,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != CORPUS_HEADER {
                return Err(parse_err(lineno, format!("unexpected header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(parse_err(lineno, format!("expected 9 fields, got {}", fields.len())));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| parse_err(lineno, format!("bad integer `{s}`")))
        };
        let list = |s: &str| -> Result<Vec<usize>> { s.split(';').map(num).collect() };
        let spec = SceneSpec {
            seed: fields[1]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad seed `{}`", fields[1])))?,
            image_size: num(fields[2])?,
            specified_category: num(fields[4])?,
            blob_sigma: fields[5]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad sigma `{}`", fields[5])))?,
            category_ids: list(fields[6])?,
            blob_counts: list(fields[7])?,
        };
        if spec.num_categories() != num(fields[3])?
            || spec.blob_counts.iter().sum::<usize>() != num(fields[8])?
        {
            return Err(parse_err(lineno, "category or total count mismatch".into()));
        }
        spec.validate()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        specs.push(spec);
    }
    Ok(specs)
}
