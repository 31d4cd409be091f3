//! Synthetic low-contrast scene generation, COCO-style annotation ingestion
//! and deterministic batching.
//!
//! Scenes are a pure function of `(spec, index)`: a seeded per-index RNG
//! draws a smoothed-noise background and places ellipse/rectangle objects
//! with a small additive intensity delta, recording boxes tight to the
//! drawn pixels. Placements overlapping an accepted box above IoU 0.3 are
//! retried and eventually skipped, so every image's boxes stay mutually
//! sparse.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{caption_record, BBox, CaptionRecord, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::par;

/// Shape family an object category is drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    EllipseTall,
    EllipseSmall,
    RectWide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeFamily,
    pub size_min: f64,
    pub size_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

/// Full description of a synthetic dataset; `(spec, index)` determines an
/// image bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub categories: Vec<CategorySpec>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub background_base: f64,
    pub noise_amp: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive".to_string()));
        }
        if self.categories.is_empty() {
            return Err(Error::config("at least one category is required".to_string()));
        }
        if self.objects_max < self.objects_min {
            return Err(Error::config("objects_max < objects_min".to_string()));
        }
        if self.noise_amp <= 0.0 {
            return Err(Error::config("noise_amp must be positive".to_string()));
        }
        for c in &self.categories {
            if c.size_min <= 0.0 || c.size_max < c.size_min {
                return Err(Error::config(format!("bad size range for category {}", c.name)));
            }
            // low-contrast regime: object delta bounded by 3x the noise amplitude
            if c.delta_max / self.noise_amp > 3.0 + 1e-12 {
                return Err(Error::config(format!(
                    "category {}: delta {} exceeds 3x noise amplitude {}",
                    c.name, c.delta_max, self.noise_amp
                )));
            }
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

/// Three FLIR-like categories scaled to the image size.
pub fn default_categories(image_size: usize) -> Vec<CategorySpec> {
    let s = image_size as f64;
    vec![
        CategorySpec {
            name: "person".to_string(),
            shape: ShapeFamily::EllipseTall,
            size_min: 0.16 * s,
            size_max: 0.28 * s,
            delta_min: 0.14,
            delta_max: 0.22,
        },
        CategorySpec {
            name: "car".to_string(),
            shape: ShapeFamily::RectWide,
            size_min: 0.19 * s,
            size_max: 0.34 * s,
            delta_min: 0.12,
            delta_max: 0.20,
        },
        CategorySpec {
            name: "bicycle".to_string(),
            shape: ShapeFamily::EllipseSmall,
            size_min: 0.11 * s,
            size_max: 0.19 * s,
            delta_min: 0.10,
            delta_max: 0.16,
        },
    ]
}

impl SceneSpec {
    pub fn default_for_size(image_size: usize, seed: u64) -> Self {
        SceneSpec {
            image_size,
            categories: default_categories(image_size),
            objects_min: 1,
            objects_max: 4,
            background_base: 0.35,
            noise_amp: 0.12,
            seed,
        }
    }
}

/// Single-channel image with its ground-truth boxes.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image_id: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major pixels in [0, 1].
    pub pixels: Vec<f64>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    pub categories: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn seed_bytes(seed: u64, stream: u64) -> [u8; 32] {
    // splitmix64 chain over (seed, stream)
    let mut out = [0u8; 32];
    let mut z = seed ^ stream.rotate_left(32) ^ 0x9e3779b97f4a7c15;
    for chunk in out.chunks_exact_mut(8) {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        let mut s = z;
        s = (s ^ (s >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        s = (s ^ (s >> 27)).wrapping_mul(0x94d049bb133111eb);
        s ^= s >> 31;
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(seed_bytes(seed, stream))
}

fn box_blur3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        src[yc * w + xc]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += at(x + dx, y + dy);
                }
            }
            out[y as usize * w + x as usize] = acc / 9.0;
        }
    }
    out
}

/// Pixels covered by a shape instance, as (x, y) pairs.
fn rasterize(shape: ShapeFamily, x0: f64, y0: f64, w: f64, h: f64, image: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
    let (a, b) = (w / 2.0, h / 2.0);
    let xs = x0.floor().max(0.0) as usize;
    let xe = ((x0 + w).ceil() as usize).min(image);
    let ys = y0.floor().max(0.0) as usize;
    let ye = ((y0 + h).ceil() as usize).min(image);
    for py in ys..ye {
        for pxx in xs..xe {
            let fx = pxx as f64 + 0.5;
            let fy = py as f64 + 0.5;
            let inside = match shape {
                ShapeFamily::RectWide => fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h,
                ShapeFamily::EllipseTall | ShapeFamily::EllipseSmall => {
                    let dx = (fx - cx) / a;
                    let dy = (fy - cy) / b;
                    dx * dx + dy * dy <= 1.0
                }
            };
            if inside {
                px.push((pxx, py));
            }
        }
    }
    px
}

fn object_dims(shape: ShapeFamily, size: f64) -> (f64, f64) {
    match shape {
        ShapeFamily::EllipseTall => (size * 0.5, size),
        ShapeFamily::EllipseSmall => (size, size),
        ShapeFamily::RectWide => (size, size * 0.55),
    }
}

/// Generate one scene. Pure in `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> AnnotatedImage {
    let s = spec.image_size;
    let mut rng = rng_for(spec.seed, index as u64);

    // smoothed background noise: box-blur of white noise, 3 passes
    let mut noise: Vec<f64> = (0..s * s)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * spec.noise_amp)
        .collect();
    for _ in 0..3 {
        noise = box_blur3(&noise, s, s);
    }
    let mut pixels: Vec<f64> = noise.iter().map(|n| spec.background_base + n).collect();

    let n_objects = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..n_objects {
        let cat_id = rng.gen_range(0..spec.categories.len());
        let cat = &spec.categories[cat_id];
        let size = rng.gen_range(cat.size_min..=cat.size_max);
        let delta = rng.gen_range(cat.delta_min..=cat.delta_max);
        let (w, h) = object_dims(cat.shape, size);
        if w >= s as f64 || h >= s as f64 {
            continue;
        }
        let mut placed = false;
        for _attempt in 0..=20 {
            let x0 = rng.gen_range(0.0..(s as f64 - w));
            let y0 = rng.gen_range(0.0..(s as f64 - h));
            let covered = rasterize(cat.shape, x0, y0, w, h, s);
            if covered.is_empty() {
                continue;
            }
            let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for &(px, py) in &covered {
                xmin = xmin.min(px);
                ymin = ymin.min(py);
                xmax = xmax.max(px);
                ymax = ymax.max(py);
            }
            let tight = BBox::new(
                xmin as f64,
                ymin as f64,
                (xmax - xmin + 1) as f64,
                (ymax - ymin + 1) as f64,
                cat_id,
            );
            if boxes.iter().any(|b| iou(b, &tight) > 0.3) {
                continue;
            }
            for &(px, py) in &covered {
                pixels[py * s + px] += delta;
            }
            boxes.push(tight);
            placed = true;
            break;
        }
        let _ = placed; // placement failures simply skip the object
    }

    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    AnnotatedImage { image_id: index, width: s, height: s, pixels, boxes }
}

/// Generate `count` scenes starting at `start_index`, in parallel.
pub fn generate_dataset(spec: &SceneSpec, start_index: usize, count: usize) -> Dataset {
    let images = par::map_indexed(count, |i| generate_scene(spec, start_index + i));
    Dataset { images, categories: spec.category_names() }
}

pub fn generate_dataset_seq(spec: &SceneSpec, start_index: usize, count: usize) -> Dataset {
    let images = par::map_indexed_seq(count, |i| generate_scene(spec, start_index + i));
    Dataset { images, categories: spec.category_names() }
}

// ── batching ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Batch {
    pub image_ids: Vec<usize>,
    /// Flat `[B, 1, H, W]` pixel data.
    pub images: Vec<f64>,
    pub size: usize,
    pub boxes: Vec<Vec<BBox>>,
    pub captions: Vec<CaptionRecord>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.image_ids.len()
    }
}

/// Epoch shuffle order: a permutation drawn from a PRNG seeded by
/// `(seed, epoch)`.
pub fn batch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, 0x6261_7463_6800_0000 ^ epoch);
    order.shuffle(&mut rng);
    order
}

/// Batches for one epoch. Training drops the final partial batch (batch
/// statistics and the in-batch contrastive loss need full batches);
/// evaluation keeps it. Captions are generated on the fly.
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    train: bool,
    encoder: &dyn TextEncoder,
) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(Error::config("dataset is empty".to_string()));
    }
    if train && batch_size < 2 {
        return Err(Error::config("training batch_size must be >= 2".to_string()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive".to_string()));
    }
    let order = if train {
        batch_order(ds.len(), seed, epoch)
    } else {
        (0..ds.len()).collect()
    };
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if train && chunk.len() < batch_size {
            break;
        }
        let size = ds.images[chunk[0]].width;
        let mut images = Vec::with_capacity(chunk.len() * size * size);
        let mut boxes = Vec::with_capacity(chunk.len());
        let mut captions = Vec::with_capacity(chunk.len());
        let mut ids = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let img = &ds.images[i];
            if img.width != size || img.height != size {
                return Err(Error::config(format!(
                    "image {} is {}x{}, batch expects {}x{}",
                    img.image_id, img.width, img.height, size, size
                )));
            }
            images.extend_from_slice(&img.pixels);
            boxes.push(img.boxes.clone());
            captions.push(caption_record(&img.boxes, img.width, img.height, &ds.categories, encoder)?);
            ids.push(img.image_id);
        }
        batches.push(Batch { image_ids: ids, images, size, boxes, captions });
    }
    Ok(batches)
}

// ── PGM I/O ────────────────────────────────────────────────────────────────

pub fn write_pgm(path: &Path, pixels: &[f64], w: usize, h: usize) -> Result<()> {
    assert_eq!(pixels.len(), w * h);
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    // header: "P5" <ws> width <ws> height <ws> maxval <single ws> data
    let mut pos = 0usize;
    let token = |raw: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse(p.clone(), "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
    };
    let magic = token(&raw, &mut pos)?;
    if magic != "P5" {
        return Err(Error::parse(p, format!("not a binary PGM (magic {})", magic)));
    }
    let w: usize = token(&raw, &mut pos)?.parse().map_err(|_| Error::parse(p.clone(), "bad width"))?;
    let h: usize = token(&raw, &mut pos)?.parse().map_err(|_| Error::parse(p.clone(), "bad height"))?;
    let maxval: usize =
        token(&raw, &mut pos)?.parse().map_err(|_| Error::parse(p.clone(), "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::parse(p, format!("expected 8-bit grayscale, maxval {}", maxval)));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + w * h {
        return Err(Error::parse(p, "PGM data shorter than header promises"));
    }
    let pixels: Vec<f64> = raw[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((pixels, w, h))
}

// ── COCO-style annotations ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Write the dataset as PGM images plus a COCO-style annotation file.
/// Bit-reproducible for a fixed dataset.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1usize;
    for img in &ds.images {
        let file_name = format!("img_{:06}.pgm", img.image_id);
        write_pgm(&dir.join(&file_name), &img.pixels, img.width, img.height)?;
        images.push(CocoImage {
            id: img.image_id,
            file_name,
            width: img.width,
            height: img.height,
        });
        for b in &img.boxes {
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: img.image_id,
                // COCO ids are 1-based
                category_id: b.category_id + 1,
                bbox: [b.x, b.y, b.w, b.h],
            });
            ann_id += 1;
        }
    }
    let categories = ds
        .categories
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory { id: i + 1, name: name.clone() })
        .collect();
    let file = CocoFile { images, annotations, categories };
    let json = serde_json::to_string_pretty(&file).expect("serializable");
    let path = dir.join("annotations.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// An image entry of a COCO-style annotation file, before pixels load.
#[derive(Debug, Clone)]
pub struct AnnotationEntry {
    pub image_id: usize,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BBox>,
}

/// Parse a COCO-style annotation file without touching image files.
/// Boxes are clipped to the image bounds; zero-area boxes are dropped and
/// counted.
pub fn load_coco_annotations(
    annotation_path: &Path,
) -> Result<(Vec<AnnotationEntry>, Vec<String>, usize)> {
    let text = std::fs::read_to_string(annotation_path)
        .map_err(|e| Error::io(annotation_path.display().to_string(), e))?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            annotation_path.display().to_string(),
            format!("{} (line {}, column {})", e, e.line(), e.column()),
        )
    })?;

    let mut cats: Vec<(usize, String)> =
        file.categories.iter().map(|c| (c.id, c.name.clone())).collect();
    cats.sort_by_key(|(id, _)| *id);
    let categories: Vec<String> = cats.iter().map(|(_, n)| n.clone()).collect();
    let cat_index: HashMap<usize, usize> =
        cats.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();

    let mut by_image: HashMap<usize, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }

    let mut dropped = 0usize;
    let mut entries = Vec::with_capacity(file.images.len());
    for ci in &file.images {
        let mut boxes = Vec::new();
        for a in by_image.get(&ci.id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let cat = *cat_index.get(&a.category_id).ok_or_else(|| {
                Error::parse(
                    annotation_path.display().to_string(),
                    format!("annotation {} references unknown category {}", a.id, a.category_id),
                )
            })?;
            let [x, y, bw, bh] = a.bbox;
            let x0 = x.max(0.0);
            let y0 = y.max(0.0);
            let x1 = (x + bw).min(ci.width as f64);
            let y1 = (y + bh).min(ci.height as f64);
            if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
                dropped += 1;
                continue;
            }
            boxes.push(BBox::new(x0, y0, x1 - x0, y1 - y0, cat));
        }
        entries.push(AnnotationEntry {
            image_id: ci.id,
            file_name: ci.file_name.clone(),
            width: ci.width,
            height: ci.height,
            boxes,
        });
    }
    Ok((entries, categories, dropped))
}

/// Load a COCO-style annotation file plus its 8-bit grayscale images.
/// Returns the dataset and the number of dropped zero-area boxes.
pub fn load_coco(annotation_path: &Path, image_dir: &Path) -> Result<(Dataset, usize)> {
    let (entries, categories, dropped) = load_coco_annotations(annotation_path)?;
    let mut images = Vec::with_capacity(entries.len());
    for e in entries {
        let img_path = image_dir.join(&e.file_name);
        if !img_path.exists() {
            return Err(Error::config(format!(
                "image file {} for image id {} does not exist",
                img_path.display(),
                e.image_id
            )));
        }
        let (pixels, w, h) = read_pgm(&img_path)?;
        if w != e.width || h != e.height {
            return Err(Error::parse(
                img_path.display().to_string(),
                format!("image is {}x{}, annotations say {}x{}", w, h, e.width, e.height),
            ));
        }
        images.push(AnnotatedImage { image_id: e.image_id, width: w, height: h, pixels, boxes: e.boxes });
    }
    Ok((Dataset { images, categories }, dropped))
}
