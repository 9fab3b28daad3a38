//! Deterministic 3-slice phantoms with elliptical pseudo-lesions, plus the
//! on-disk dataset layout (16-bit PNG slices, JSON manifest, JSON-lines
//! annotations).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::BoundingBox;
use crate::froc::Annotation;
use crate::io::save_annotations_jsonl;
use crate::tensor::{FeatureMap, Shape};
use crate::{Error, Result};

pub const SLICES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Inclusive range of lesions attempted per image.
    pub lesions_per_image: [usize; 2],
    /// Long-axis diameters are log-uniform on `[d_min_mm, d_max_mm]`.
    pub d_min_mm: f64,
    pub d_max_mm: f64,
    pub mm_per_pixel: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_level: f64,
    /// Lesion intensity above background, sampled uniformly.
    pub contrast: [f64; 2],
    /// Smallest short-to-long axis ratio.
    pub min_aspect: f64,
    /// Width in pixels of the soft lesion edge.
    pub edge_softness_px: f64,
    /// Fractional intensity drop of the lesion on the neighbouring slices, sampled uniformly.
    pub neighbor_attenuation: [f64; 2],
    pub max_placement_retries: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 512,
            lesions_per_image: [1, 3],
            d_min_mm: 4.0,
            d_max_mm: 360.0,
            mm_per_pixel: 0.8,
            noise_level: 0.02,
            contrast: [0.25, 0.45],
            min_aspect: 0.6,
            edge_softness_px: 0.5,
            neighbor_attenuation: [0.05, 0.2],
            max_placement_retries: 50,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if self.lesions_per_image[0] > self.lesions_per_image[1] {
            return bad("lesions_per_image range is reversed".into());
        }
        if !(self.d_min_mm > 0.0 && self.d_min_mm < self.d_max_mm) {
            return bad(format!(
                "need 0 < d_min_mm < d_max_mm, got {} and {}",
                self.d_min_mm, self.d_max_mm
            ));
        }
        if !(self.mm_per_pixel > 0.0) {
            return bad("mm_per_pixel must be positive".into());
        }
        if self.d_max_mm / self.mm_per_pixel > (self.image_size - 2) as f64 {
            return bad(format!(
                "largest lesion ({} px) does not fit in a {} px image",
                self.d_max_mm / self.mm_per_pixel,
                self.image_size
            ));
        }
        if !(self.noise_level >= 0.0) || !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return bad("noise_level must be >= 0 and min_aspect in (0, 1]".into());
        }
        if self.contrast[0] > self.contrast[1] || self.neighbor_attenuation[0] > self.neighbor_attenuation[1] {
            return bad("contrast and attenuation ranges must be ordered".into());
        }
        if !(self.edge_softness_px > 0.0) {
            return bad("edge_softness_px must be positive".into());
        }
        Ok(())
    }
}

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    /// Half extent along x.
    pub rx: f64,
    /// Half extent along y.
    pub ry: f64,
    pub contrast: f64,
    /// Intensity multiplier on the two neighbouring slices.
    pub neighbor_scale: f64,
}

impl Lesion {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.cx - self.rx,
            y_min: self.cy - self.ry,
            x_max: self.cx + self.rx,
            y_max: self.cy + self.ry,
        }
    }

    pub fn long_axis_px(&self) -> f64 {
        2.0 * self.rx.max(self.ry)
    }
}

/// One generated stack with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// `(1, 3, S, S)`, values in `[0, 1]`; channel 1 is the annotated slice.
    pub stack: FeatureMap<f32>,
    pub lesions: Vec<Lesion>,
    pub annotations: Vec<Annotation>,
    /// Lesions dropped because no free position was found.
    pub placement_failures: usize,
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Background {
    base: f64,
    waves: Vec<(f64, f64, f64, f64)>, // amplitude, fx, fy, phase
    slice_gain: [f64; SLICES],
}

impl Background {
    fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let waves = (0..4)
            .map(|_| {
                let amp = rng.random_range(0.02..0.06);
                let fx = rng.random_range(0.5..3.0) / size as f64;
                let fy = rng.random_range(0.5..3.0) / size as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (amp, fx, fy, phase)
            })
            .collect();
        let slice_gain = [
            rng.random_range(0.97..1.03),
            1.0,
            rng.random_range(0.97..1.03),
        ];
        Self {
            base: rng.random_range(0.25..0.35),
            waves,
            slice_gain,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|&(a, fx, fy, p)| a * (std::f64::consts::TAU * (fx * x + fy * y) + p).sin())
                .sum::<f64>()
    }
}

/// Soft ellipse membership in `(0, 1)`; about 0.5 on the boundary.
fn lesion_profile(l: &Lesion, x: f64, y: f64, softness: f64) -> f64 {
    let u = (x - l.cx) / l.rx;
    let v = (y - l.cy) / l.ry;
    let rho = (u * u + v * v).sqrt();
    let signed_px = (1.0 - rho) * l.rx.min(l.ry);
    1.0 / (1.0 + (-signed_px / softness).exp())
}

/// Renders a stack with the given lesions. Background texture and noise are
/// drawn from `rng`.
pub fn render_phantom<R: Rng>(spec: &PhantomSpec, lesions: &[Lesion], rng: &mut R) -> Result<Phantom> {
    spec.validate()?;
    let s = spec.image_size;
    let bg = Background::sample(rng, s);
    let noise = Normal::new(0.0, spec.noise_level.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut data = vec![0f32; SLICES * s * s];
    for slice in 0..SLICES {
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = bg.at(px, py) * bg.slice_gain[slice];
                for l in lesions {
                    if px < l.cx - l.rx - 4.0 * spec.edge_softness_px - 1.0
                        || px > l.cx + l.rx + 4.0 * spec.edge_softness_px + 1.0
                        || py < l.cy - l.ry - 4.0 * spec.edge_softness_px - 1.0
                        || py > l.cy + l.ry + 4.0 * spec.edge_softness_px + 1.0
                    {
                        continue;
                    }
                    let scale = if slice == 1 { 1.0 } else { l.neighbor_scale };
                    v += l.contrast * scale * lesion_profile(l, px, py, spec.edge_softness_px);
                }
                if spec.noise_level > 0.0 {
                    v += noise.sample(rng);
                }
                data[(slice * s + y) * s + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let stack = FeatureMap::new(Shape::new(1, SLICES, s, s), data)?;
    Ok(Phantom {
        stack,
        lesions: lesions.to_vec(),
        annotations: Vec::new(),
        placement_failures: 0,
    })
}

fn sample_lesions<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> (Vec<Lesion>, usize) {
    let s = spec.image_size as f64;
    let count = rng.random_range(spec.lesions_per_image[0]..=spec.lesions_per_image[1]);
    let (ln_lo, ln_hi) = (spec.d_min_mm.ln(), spec.d_max_mm.ln());
    let mut placed: Vec<Lesion> = Vec::with_capacity(count);
    let mut failures = 0;
    for _ in 0..count {
        let d_mm = rng.random_range(ln_lo..=ln_hi).exp();
        let major = d_mm / spec.mm_per_pixel / 2.0;
        let minor = major * rng.random_range(spec.min_aspect..=1.0);
        let (rx, ry) = if rng.random_bool(0.5) {
            (major, minor)
        } else {
            (minor, major)
        };
        let contrast = rng.random_range(spec.contrast[0]..=spec.contrast[1]);
        let neighbor_scale =
            1.0 - rng.random_range(spec.neighbor_attenuation[0]..=spec.neighbor_attenuation[1]);
        let mut ok = None;
        for _ in 0..spec.max_placement_retries.max(1) {
            let cand = Lesion {
                cx: rng.random_range(rx..=s - rx),
                cy: rng.random_range(ry..=s - ry),
                rx,
                ry,
                contrast,
                neighbor_scale,
            };
            let margin = 2.0;
            let b = cand.bbox();
            let clear = placed.iter().all(|p| {
                let o = p.bbox();
                b.x_max + margin <= o.x_min
                    || o.x_max + margin <= b.x_min
                    || b.y_max + margin <= o.y_min
                    || o.y_max + margin <= b.y_min
            });
            if clear {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(l) => placed.push(l),
            None => failures += 1,
        }
    }
    (placed, failures)
}

/// Ground truth of a lesion: its tight box and long axis in millimetres.
pub fn annotate(image_id: &str, lesion: &Lesion, mm_per_pixel: f64) -> Annotation {
    Annotation {
        image_id: image_id.to_string(),
        bbox: lesion.bbox(),
        diameter_mm: lesion.long_axis_px() * mm_per_pixel,
    }
}

/// Stack number `index` of the series defined by `spec`. A pure function of
/// `(spec, index)`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64, image_id: &str) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = image_rng(spec.seed, index);
    let (lesions, failures) = sample_lesions(spec, &mut rng);
    let mut p = render_phantom(spec, &lesions, &mut rng)?;
    p.annotations = lesions
        .iter()
        .map(|l| annotate(image_id, l, spec.mm_per_pixel))
        .collect();
    p.placement_failures = failures;
    Ok(p)
}

/// Zero-mean, unit-variance rescaling of a whole stack.
pub fn normalize_stack(stack: &FeatureMap<f32>) -> FeatureMap<f32> {
    let n = stack.len() as f64;
    let mean = stack.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = stack
        .as_slice()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / var.sqrt().max(1e-6);
    stack.map(|v| ((v as f64 - mean) * inv) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 200,
            val: 20,
            test: 200,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Image ids and generator indices of every split; indices never repeat.
    pub fn plan(&self) -> Vec<(Split, u64, String)> {
        let mut out = Vec::new();
        let mut index = 0u64;
        for split in Split::ALL {
            for k in 0..self.get(split) {
                out.push((split, index, format!("{}_{k:05}", split.as_str())));
                index += 1;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub split: Split,
    pub index: u64,
    /// Slice files relative to the dataset root, slice order.
    pub files: Vec<String>,
    pub annotations: Vec<Annotation>,
    pub placement_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub mm_per_pixel: f64,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub images: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.images.iter().filter(move |e| e.split == split)
    }

    pub fn annotations(&self, split: Split) -> Vec<Annotation> {
        self.split(split).flat_map(|e| e.annotations.clone()).collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn slice_file(image_id: &str, slice: usize) -> String {
    format!("images/{image_id}_{slice}.png")
}

fn write_png16(path: &Path, values: &[f32], size: usize) -> Result<()> {
    let pixels: Vec<u16> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(size as u32, size as u32, pixels).expect("buffer matches size");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

fn read_png16(path: &Path, size: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(Error::corrupt(path, "slice file listed in the manifest is missing"));
    }
    let img = image::open(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::corrupt(
                path,
                format!("expected 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::corrupt(
            path,
            format!("expected {size}x{size}, found {}x{}", img.width(), img.height()),
        ));
    }
    Ok(img.into_raw().into_iter().map(|p| (p as f64 / 65535.0) as f32).collect())
}

/// Generates every split and writes images, annotations and the manifest
/// under `out_dir`.
pub fn write_dataset(spec: &PhantomSpec, counts: &SplitCounts, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let s = spec.image_size;
    let mut images = Vec::new();
    for (split, index, image_id) in counts.plan() {
        let p = generate_phantom(spec, index, &image_id)?;
        let mut files = Vec::with_capacity(SLICES);
        for slice in 0..SLICES {
            let rel = slice_file(&image_id, slice);
            let plane = &p.stack.as_slice()[slice * s * s..(slice + 1) * s * s];
            write_png16(&out_dir.join(&rel), plane, s)?;
            files.push(rel);
        }
        images.push(ManifestEntry {
            image_id,
            split,
            index,
            files,
            annotations: p.annotations,
            placement_failures: p.placement_failures,
        });
    }
    let manifest = DatasetManifest {
        mm_per_pixel: spec.mm_per_pixel,
        seed: spec.seed,
        spec: spec.clone(),
        images,
    };
    for split in Split::ALL {
        let path = out_dir.join(format!("{}_annotations.jsonl", split.as_str()));
        save_annotations_jsonl(&path, &manifest.annotations(split))?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads `manifest.json` from a dataset directory.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// A stack read back from disk, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub stack: FeatureMap<f32>,
    pub annotations: Vec<Annotation>,
}

pub fn load_entry(manifest: &DatasetManifest, root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let s = manifest.spec.image_size;
    if entry.files.len() != SLICES {
        return Err(Error::corrupt(
            root.join(MANIFEST_FILE),
            format!("{} lists {} slices, expected {SLICES}", entry.image_id, entry.files.len()),
        ));
    }
    let mut data = Vec::with_capacity(SLICES * s * s);
    for f in &entry.files {
        data.extend(read_png16(&root.join(f), s)?);
    }
    Ok(Sample {
        image_id: entry.image_id.clone(),
        stack: FeatureMap::new(Shape::new(1, SLICES, s, s), data)?,
        annotations: entry.annotations.clone(),
    })
}

/// Lazily loads every stack of `split` (all splits when `None`).
pub fn load_dataset<'a>(
    manifest: &'a DatasetManifest,
    root: &'a Path,
    split: Option<Split>,
) -> impl Iterator<Item = Result<Sample>> + 'a {
    manifest
        .images
        .iter()
        .filter(move |e| split.is_none_or(|s| e.split == s))
        .map(move |e| load_entry(manifest, root, e))
}

/// Resolves a dataset argument that may name the directory or its manifest.
pub fn dataset_root(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

/// Generates one split in memory, with the ids and indices `write_dataset`
/// would use.
pub fn generate_split(spec: &PhantomSpec, counts: &SplitCounts, split: Split) -> Result<Vec<(String, Phantom)>> {
    counts
        .plan()
        .into_iter()
        .filter(|(s, _, _)| *s == split)
        .map(|(_, index, id)| generate_phantom(spec, index, &id).map(|p| (id, p)))
        .collect()
}
