//! Rule-based caption generation from bounding-box annotations, plus the
//! deterministic text encoder that turns captions into fixed-length
//! embeddings.
//!
//! A caption lists, per (category, image region) group, a count phrase, the
//! category name and one of nine 3x3 grid regions, e.g.
//! `an infrared image with two cars in the top left, one person in the
//! middle center.` Counts above ten collapse to "a large number of". All of
//! this is a pure function of the annotations, so regenerating a caption is
//! byte-identical across runs and platforms.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates with a category index.
#[derive(Debug, Clone, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub category_id: usize,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, category_id: usize) -> Self {
        BBox { x, y, w, h, category_id }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// A generated caption with its token list and text embedding.
#[derive(Debug, Clone)]
pub struct CaptionRecord {
    pub text: String,
    pub tokens: Vec<String>,
    pub embedding: Vec<f64>,
}

/// Deterministic map from token lists to fixed-length unit embeddings.
/// A model is constructed against exactly one encoder.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Vec<f64>;
}

const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
const COL_WORDS: [&str; 3] = ["left", "center", "right"];
const NUMBER_WORDS: [&str; 10] =
    ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// Index 0..9 into the 3x3 grid, row-major. Centers exactly on a grid line
/// fall into the lower bucket index.
pub fn spatial_bucket_index(b: &BBox, image_w: usize, image_h: usize) -> Result<usize> {
    let (cx, cy) = b.center();
    if cx < 0.0 || cx > image_w as f64 || cy < 0.0 || cy > image_h as f64 {
        return Err(Error::config(format!(
            "box center ({}, {}) outside {}x{} image",
            cx, cy, image_w, image_h
        )));
    }
    let third = |c: f64, extent: usize| -> usize {
        if 3.0 * c <= extent as f64 {
            0
        } else if 3.0 * c <= 2.0 * extent as f64 {
            1
        } else {
            2
        }
    };
    Ok(third(cy, image_h) * 3 + third(cx, image_w))
}

/// Region phrase like "middle center" for the box's center.
pub fn spatial_bucket(b: &BBox, image_w: usize, image_h: usize) -> Result<String> {
    let idx = spatial_bucket_index(b, image_w, image_h)?;
    Ok(format!("{} {}", ROW_WORDS[idx / 3], COL_WORDS[idx % 3]))
}

/// English count phrase; counts strictly above ten use a generalized term.
pub fn count_phrase(n: usize) -> Result<&'static str> {
    if n < 1 {
        return Err(Error::config("count phrase requires n >= 1".to_string()));
    }
    Ok(if n <= 10 { NUMBER_WORDS[n - 1] } else { "a large number of" })
}

/// Full caption for one image's annotations.
pub fn generate_caption(
    annotations: &[BBox],
    image_w: usize,
    image_h: usize,
    categories: &[String],
) -> Result<String> {
    if annotations.is_empty() {
        return Ok("an infrared image with no objects.".to_string());
    }
    // counts keyed by (category, bucket), emitted in that order
    let mut groups: Vec<Vec<usize>> = vec![vec![0; 9]; categories.len()];
    for b in annotations {
        if b.category_id >= categories.len() {
            return Err(Error::config(format!(
                "category id {} outside table of {} categories",
                b.category_id,
                categories.len()
            )));
        }
        let bucket = spatial_bucket_index(b, image_w, image_h)?;
        groups[b.category_id][bucket] += 1;
    }
    let mut clauses = Vec::new();
    for (cat, buckets) in groups.iter().enumerate() {
        for (bucket, &n) in buckets.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let noun = if n > 1 {
                format!("{}s", categories[cat])
            } else {
                categories[cat].clone()
            };
            clauses.push(format!(
                "{} {} in the {} {}",
                count_phrase(n)?,
                noun,
                ROW_WORDS[bucket / 3],
                COL_WORDS[bucket % 3]
            ));
        }
    }
    Ok(format!("an infrared image with {}.", clauses.join(", ")))
}

/// Lowercase, split on anything that is not alphanumeric, drop the rest.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

// FNV-1a with two different offset bases: one stream picks the bucket, the
// other the sign. Rust's SipHash is not stable across releases, so the hash
// is pinned here.
const FNV_PRIME: u64 = 0x100000001b3;
const BUCKET_OFFSET: u64 = 0xcbf29ce484222325;
const SIGN_OFFSET: u64 = 0x9e3779b97f4a7c15;

fn fnv1a(offset: u64, bytes: &[u8]) -> u64 {
    let mut h = offset;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn token_bucket(token: &str, dim: usize) -> usize {
    let h = fnv1a(BUCKET_OFFSET, token.as_bytes());
    ((h ^ (h >> 32)) % dim as u64) as usize
}

pub fn token_sign(token: &str) -> f64 {
    if fnv1a(SIGN_OFFSET, token.as_bytes()) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Signed bag-of-words hashing into `dim` buckets, l2-normalized. The empty
/// token list maps to the fixed basis vector e0.
pub fn hash_encode(tokens: &[String], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if tokens.is_empty() {
        v[0] = 1.0;
        return v;
    }
    for t in tokens {
        v[token_bucket(t, dim)] += token_sign(t);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // signed counts cancelled out exactly; fall back to the basis vector
        v[0] = 1.0;
        return v;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// The default desk-scale text encoder.
pub struct HashEncoder {
    dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::config(format!("hash encoder dim {} < 8", dim)));
        }
        Ok(HashEncoder { dim })
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[String]) -> Vec<f64> {
        hash_encode(tokens, self.dim)
    }
}

/// Caption text, tokens and embedding for one image.
pub fn caption_record(
    annotations: &[BBox],
    image_w: usize,
    image_h: usize,
    categories: &[String],
    encoder: &dyn TextEncoder,
) -> Result<CaptionRecord> {
    let text = generate_caption(annotations, image_w, image_h, categories)?;
    let tokens = tokenize(&text);
    let embedding = encoder.encode(&tokens);
    debug_assert_eq!(embedding.len(), encoder.dim());
    Ok(CaptionRecord { text, tokens, embedding })
}
