//! Facial priors: face detection, cropping with fallback, detection caching,
//! and the facial expert that turns a face crop into token embeddings and
//! decodes landmarks plus coarse attributes back out of those embeddings.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_ctx, Error, Result};
use crate::media::{crop, resize_bilinear, Frame};
use crate::scalar::{s, to_f64, Scalar};

/// Pixel-space rectangle (top-left corner plus extent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Rect,
    /// Detector confidence in [0, 1].
    pub confidence: f64,
}

/// A face region resized to the expert input size.
#[derive(Debug, Clone)]
pub struct FaceCrop {
    pub pixels: RgbImage,
    pub bbox: Rect,
    pub confidence: f64,
    /// True when no face was found and the center-crop fallback was used.
    pub fallback: bool,
}

pub trait FaceDetector: Send + Sync {
    fn detect(&self, frame: &Frame) -> Vec<Detection>;
}

/// Brightness-blob detector for the synthetic fixtures: thresholds luminance,
/// finds 4-connected components, and scores each box by its fill ratio.
pub struct BlobDetector {
    pub threshold: u8,
    pub min_area: usize,
}

impl Default for BlobDetector {
    fn default() -> Self {
        BlobDetector {
            threshold: 128,
            min_area: 16,
        }
    }
}

impl FaceDetector for BlobDetector {
    fn detect(&self, frame: &Frame) -> Vec<Detection> {
        let img = &frame.pixels;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bright: Vec<bool> = img
            .pixels()
            .map(|p| {
                let lum = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                lum >= self.threshold as f64
            })
            .collect();
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if !bright[start] || seen[start] {
                continue;
            }
            // Flood fill one component.
            let mut stack = vec![start];
            seen[start] = true;
            let (mut min_x, mut min_y, mut max_x, mut max_y) =
                (usize::MAX, usize::MAX, 0usize, 0usize);
            let mut area = 0usize;
            while let Some(at) = stack.pop() {
                let (x, y) = (at % w, at / w);
                area += 1;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
                let mut push = |nx: usize, ny: usize| {
                    let ni = ny * w + nx;
                    if bright[ni] && !seen[ni] {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
            if area < self.min_area {
                continue;
            }
            let bw = (max_x - min_x + 1) as u32;
            let bh = (max_y - min_y + 1) as u32;
            let fill = area as f64 / (bw as f64 * bh as f64);
            out.push(Detection {
                bbox: Rect {
                    x: min_x as u32,
                    y: min_y as u32,
                    w: bw,
                    h: bh,
                },
                confidence: fill.clamp(0.0, 1.0),
            });
        }
        out
    }
}

/// Returns a fixed detection list for every frame; used by tests.
pub struct ScriptedDetector {
    pub detections: Vec<Detection>,
}

impl FaceDetector for ScriptedDetector {
    fn detect(&self, _frame: &Frame) -> Vec<Detection> {
        self.detections.clone()
    }
}

/// Wraps a detector and counts invocations; used to verify cache hits.
pub struct CountingDetector<D> {
    pub inner: D,
    pub calls: AtomicUsize,
}

impl<D> CountingDetector<D> {
    pub fn new(inner: D) -> Self {
        CountingDetector {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<D: FaceDetector> FaceDetector for CountingDetector<D> {
    fn detect(&self, frame: &Frame) -> Vec<Detection> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.detect(frame)
    }
}

/// Picks the most confident detection and resizes its region to
/// `target` = (width, height). With no detections the central square is
/// used instead, flagged with confidence zero.
pub fn detect_and_crop(
    frame: &Frame,
    detector: &dyn FaceDetector,
    target: (u32, u32),
) -> FaceCrop {
    let detections = detector.detect(frame);
    let best = detections
        .into_iter()
        .max_by(|a, b| a.confidence.partial_cmp(&b.confidence).expect("finite"));
    crop_from_detection(frame, best, target)
}

/// Applies an already-chosen detection (e.g. from the cache) to a frame;
/// `None` takes the center-square fallback path.
pub fn crop_from_detection(
    frame: &Frame,
    best: Option<Detection>,
    target: (u32, u32),
) -> FaceCrop {
    let (bbox, confidence, fallback) = match best {
        Some(d) => (d.bbox, d.confidence, false),
        None => (center_square(frame), 0.0, true),
    };
    let region = crop(&frame.pixels, bbox.x, bbox.y, bbox.w, bbox.h);
    FaceCrop {
        pixels: resize_bilinear(&region, target.0, target.1),
        bbox,
        confidence,
        fallback,
    }
}

fn center_square(frame: &Frame) -> Rect {
    let side = frame.width().min(frame.height());
    Rect {
        x: (frame.width() - side) / 2,
        y: (frame.height() - side) / 2,
        w: side,
        h: side,
    }
}

/// One cached detection result per (media id, frame index): either the best
/// bounding box or the fact that nothing was found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CachedDetection {
    pub best: Option<Detection>,
}

/// Binary on-disk cache of detection outcomes. Writes go through a
/// temp-file rename so concurrent readers never observe a partial record.
pub struct DetectionCache {
    dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 4] = b"FDC1";

impl DetectionCache {
    pub fn open(dir: &Path) -> Result<Self> {
        io_ctx(std::fs::create_dir_all(dir), dir)?;
        Ok(DetectionCache {
            dir: dir.to_path_buf(),
        })
    }

    fn record_path(&self, media_id: &str, frame_index: usize) -> PathBuf {
        let digest = Sha256::digest(media_id.as_bytes());
        let short: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("{short}_{frame_index}.det"))
    }

    pub fn load(&self, media_id: &str, frame_index: usize) -> Result<Option<CachedDetection>> {
        let path = self.record_path(media_id, frame_index);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        };
        parse_record(&bytes)
            .map(Some)
            .ok_or_else(|| Error::input(format!("corrupt detection record {}", path.display())))
    }

    pub fn store(&self, media_id: &str, frame_index: usize, det: &CachedDetection) -> Result<()> {
        let path = self.record_path(media_id, frame_index);
        let tmp = path.with_extension("tmp");
        io_ctx(std::fs::write(&tmp, encode_record(det)), &tmp)?;
        io_ctx(std::fs::rename(&tmp, &path), &path)
    }

    /// Returns the cached best detection, running the detector on a miss.
    pub fn get_or_detect(
        &self,
        media_id: &str,
        frame_index: usize,
        frame: &Frame,
        detector: &dyn FaceDetector,
    ) -> Result<CachedDetection> {
        if let Some(hit) = self.load(media_id, frame_index)? {
            return Ok(hit);
        }
        let detections = detector.detect(frame);
        let best = detections
            .into_iter()
            .max_by(|a, b| a.confidence.partial_cmp(&b.confidence).expect("finite"));
        let record = CachedDetection { best };
        self.store(media_id, frame_index, &record)?;
        Ok(record)
    }
}

fn encode_record(det: &CachedDetection) -> Vec<u8> {
    let mut out = Vec::with_capacity(29);
    out.extend_from_slice(CACHE_MAGIC);
    match det.best {
        None => out.push(0),
        Some(d) => {
            out.push(1);
            for v in [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&d.confidence.to_le_bytes());
        }
    }
    out
}

fn parse_record(bytes: &[u8]) -> Option<CachedDetection> {
    if bytes.len() < 5 || &bytes[..4] != CACHE_MAGIC {
        return None;
    }
    match bytes[4] {
        0 if bytes.len() == 5 => Some(CachedDetection { best: None }),
        1 if bytes.len() == 5 + 16 + 8 => {
            let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            let conf = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
            Some(CachedDetection {
                best: Some(Detection {
                    bbox: Rect {
                        x: u(5),
                        y: u(9),
                        w: u(13),
                        h: u(17),
                    },
                    confidence: conf,
                }),
            })
        }
        _ => None,
    }
}

/// Facial landmarks in normalized coordinates: row k holds (x_k, y_k) in
/// [0, 1] relative to the face crop.
#[derive(Debug, Clone)]
pub struct LandmarkSet<T: Scalar> {
    pub points: Array2<T>,
    pub visibility: Vec<bool>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Coarse demographic attributes decoded alongside the landmarks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgrAttributes {
    pub age: String,
    pub gender: String,
    pub race: String,
}

pub const AGE_BUCKETS: [&str; 3] = ["child", "adult", "senior"];
pub const GENDER_BUCKETS: [&str; 3] = ["female", "male", "unspecified"];
pub const RACE_BUCKETS: [&str; 3] = ["group-A", "group-B", "group-C"];

/// Frozen face encoder/decoder. Implementations must be deterministic:
/// the same crop always yields the same embedding.
pub trait FacialExpert<T: Scalar>: Send + Sync {
    /// Expected crop size as (width, height).
    fn input_size(&self) -> (u32, u32);
    /// Number of facial tokens per crop.
    fn token_count(&self) -> usize;
    /// Embedding width.
    fn channel_dim(&self) -> usize;
    /// Number of landmarks decoded per crop.
    fn landmark_count(&self) -> usize;
    /// Facial token grid as (rows, cols); `rows * cols == token_count`.
    fn token_grid(&self) -> (usize, usize);
    /// Landmark grid as (rows, cols); `rows * cols == landmark_count`.
    fn landmark_grid(&self) -> (usize, usize);
    /// Crop -> facial token embeddings, shape `token_count x channel_dim`.
    fn encode(&self, face: &FaceCrop) -> Result<Array2<T>>;
    /// Embeddings -> (landmarks, attributes). Consumes only the embedding.
    fn decode(&self, embedding: &Array2<T>) -> Result<(LandmarkSet<T>, AgrAttributes)>;
}

const TOY_STATS: usize = 5; // mean r, mean g, mean b, centroid x, centroid y
const TOY_INPUT_W: u32 = 34;
const TOY_INPUT_H: u32 = 32;
const TOY_TOKEN_ROWS: usize = 4;
const TOY_TOKEN_COLS: usize = 2;
const TOY_LM_ROWS: usize = 4;
const TOY_LM_COLS: usize = 17;
/// Identity seed of the frozen toy expert; independent of the model seed so
/// cached features stay comparable across model configurations.
const TOY_EXPERT_SEED: u64 = 0xFACE;

/// Deterministic stand-in for a pretrained face encoder.
///
/// Each of the 8 facial tokens summarizes one cell of a 4 x 2 grid over the
/// crop by five statistics (mean RGB plus luminance centroid), then projects
/// them through a fixed row-orthonormal matrix into the channel space. The
/// projection is invertible on its range, so `decode` recovers the statistics
/// exactly and derives 68 grid-anchored landmarks plus bucketed attributes
/// from them.
pub struct ToyExpert<T: Scalar> {
    channel_dim: usize,
    /// Row-orthonormal projection, stats -> channels (5 x C), kept in f64.
    w: Array2<f64>,
    _marker: std::marker::PhantomData<T>,
}

#[derive(Serialize, Deserialize)]
struct SavedExpert {
    channel_dim: usize,
    w: Vec<Vec<f64>>,
}

impl<T: Scalar> ToyExpert<T> {
    pub fn new(channel_dim: usize) -> Result<Self> {
        Self::with_seed(channel_dim, TOY_EXPERT_SEED)
    }

    pub fn with_seed(channel_dim: usize, seed: u64) -> Result<Self> {
        if channel_dim < TOY_STATS {
            return Err(Error::config(format!(
                "toy expert needs channel_dim >= {TOY_STATS}, got {channel_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0).expect("valid std");
        let raw = Array2::from_shape_fn((TOY_STATS, channel_dim), |_| normal.sample(&mut rng));
        let w = orthonormalize_rows(&raw).ok_or_else(|| {
            Error::numeric("toy expert projection rows are linearly dependent")
        })?;
        Ok(ToyExpert {
            channel_dim,
            w,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let saved = SavedExpert {
            channel_dim: self.channel_dim,
            w: self.w.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        let json = serde_json::to_string(&saved).expect("expert serializes");
        io_ctx(std::fs::write(path, json), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io_ctx(std::fs::read_to_string(path), path)?;
        let saved: SavedExpert = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("malformed expert weights {}: {e}", path.display())))?;
        if saved.w.len() != TOY_STATS || saved.w.iter().any(|r| r.len() != saved.channel_dim) {
            return Err(Error::input(format!(
                "expert weights {} have inconsistent shape",
                path.display()
            )));
        }
        let mut w = Array2::zeros((TOY_STATS, saved.channel_dim));
        for (i, row) in saved.w.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                w[[i, j]] = v;
            }
        }
        Ok(ToyExpert {
            channel_dim: saved.channel_dim,
            w,
            _marker: std::marker::PhantomData,
        })
    }

    /// Per-token statistics in f64: (mean r, mean g, mean b, centroid x,
    /// centroid y), colors in [0, 1], centroids in global crop coordinates.
    fn stats(&self, img: &RgbImage) -> Array2<f64> {
        let cell_h = TOY_INPUT_H as usize / TOY_TOKEN_ROWS;
        let cell_w = TOY_INPUT_W as usize / TOY_TOKEN_COLS;
        let mut out = Array2::zeros((TOY_TOKEN_ROWS * TOY_TOKEN_COLS, TOY_STATS));
        for tr in 0..TOY_TOKEN_ROWS {
            for tc in 0..TOY_TOKEN_COLS {
                let mut sums = [0.0f64; 3];
                let mut wsum = 0.0f64;
                let (mut wx, mut wy) = (0.0f64, 0.0f64);
                for dy in 0..cell_h {
                    for dx in 0..cell_w {
                        let x = (tc * cell_w + dx) as u32;
                        let y = (tr * cell_h + dy) as u32;
                        let p = img.get_pixel(x, y);
                        for c in 0..3 {
                            sums[c] += p[c] as f64 / 255.0;
                        }
                        let lum = (0.299 * p[0] as f64
                            + 0.587 * p[1] as f64
                            + 0.114 * p[2] as f64)
                            / 255.0
                            + 1e-6;
                        wsum += lum;
                        wx += lum * (x as f64 + 0.5) / TOY_INPUT_W as f64;
                        wy += lum * (y as f64 + 0.5) / TOY_INPUT_H as f64;
                    }
                }
                let n = (cell_h * cell_w) as f64;
                let t = tr * TOY_TOKEN_COLS + tc;
                out[[t, 0]] = sums[0] / n;
                out[[t, 1]] = sums[1] / n;
                out[[t, 2]] = sums[2] / n;
                out[[t, 3]] = wx / wsum;
                out[[t, 4]] = wy / wsum;
            }
        }
        out
    }
}

impl<T: Scalar> FacialExpert<T> for ToyExpert<T> {
    fn input_size(&self) -> (u32, u32) {
        (TOY_INPUT_W, TOY_INPUT_H)
    }

    fn token_count(&self) -> usize {
        TOY_TOKEN_ROWS * TOY_TOKEN_COLS
    }

    fn channel_dim(&self) -> usize {
        self.channel_dim
    }

    fn landmark_count(&self) -> usize {
        TOY_LM_ROWS * TOY_LM_COLS
    }

    fn token_grid(&self) -> (usize, usize) {
        (TOY_TOKEN_ROWS, TOY_TOKEN_COLS)
    }

    fn landmark_grid(&self) -> (usize, usize) {
        (TOY_LM_ROWS, TOY_LM_COLS)
    }

    fn encode(&self, face: &FaceCrop) -> Result<Array2<T>> {
        if face.pixels.width() != TOY_INPUT_W || face.pixels.height() != TOY_INPUT_H {
            return Err(Error::input(format!(
                "expert expects {}x{} crops, got {}x{}",
                TOY_INPUT_W,
                TOY_INPUT_H,
                face.pixels.width(),
                face.pixels.height()
            )));
        }
        let stats = self.stats(&face.pixels);
        let emb = stats.dot(&self.w);
        Ok(emb.mapv(|v| s::<T>(v)))
    }

    fn decode(&self, embedding: &Array2<T>) -> Result<(LandmarkSet<T>, AgrAttributes)> {
        let n = TOY_TOKEN_ROWS * TOY_TOKEN_COLS;
        if embedding.nrows() != n || embedding.ncols() != self.channel_dim {
            return Err(Error::input(format!(
                "expert expects {n}x{} embeddings, got {}x{}",
                self.channel_dim,
                embedding.nrows(),
                embedding.ncols()
            )));
        }
        // Rows of `w` are orthonormal, so its transpose inverts the
        // projection on its range.
        let emb64 = embedding.mapv(|v| to_f64(v));
        let stats = emb64.dot(&self.w.t());

        let k = TOY_LM_ROWS * TOY_LM_COLS;
        let mut points = Array2::zeros((k, 2));
        for kr in 0..TOY_LM_ROWS {
            for kc in 0..TOY_LM_COLS {
                let idx = kr * TOY_LM_COLS + kc;
                let cell_x = (kc as f64 + 0.5) / TOY_LM_COLS as f64;
                let cell_y = (kr as f64 + 0.5) / TOY_LM_ROWS as f64;
                // Token cell covering this landmark cell.
                let tr = kr * TOY_TOKEN_ROWS / TOY_LM_ROWS;
                let tc = kc * TOY_TOKEN_COLS / TOY_LM_COLS;
                let t = tr * TOY_TOKEN_COLS + tc;
                let px = 0.5 * cell_x + 0.5 * stats[[t, 3]];
                let py = 0.5 * cell_y + 0.5 * stats[[t, 4]];
                points[[idx, 0]] = s::<T>(px.clamp(0.0, 1.0));
                points[[idx, 1]] = s::<T>(py.clamp(0.0, 1.0));
            }
        }
        let landmarks = LandmarkSet {
            points,
            visibility: vec![true; k],
        };

        let mean = |col: usize| -> f64 {
            (0..n).map(|t| stats[[t, col]]).sum::<f64>() / n as f64
        };
        let bucket = |v: f64| -> usize { ((v.clamp(0.0, 1.0)) * 3.0).floor().min(2.0) as usize };
        let agr = AgrAttributes {
            age: AGE_BUCKETS[bucket(mean(0))].to_string(),
            gender: GENDER_BUCKETS[bucket(mean(1))].to_string(),
            race: RACE_BUCKETS[bucket(mean(2))].to_string(),
        };
        Ok((landmarks, agr))
    }
}

/// Wraps an expert, forcing fixed attributes (and optionally landmarks);
/// used by protocol and masking tests.
pub struct ScriptedExpert<T: Scalar> {
    pub inner: Box<dyn FacialExpert<T>>,
    pub agr: AgrAttributes,
    pub landmarks: Option<Array2<T>>,
}

impl<T: Scalar> FacialExpert<T> for ScriptedExpert<T> {
    fn input_size(&self) -> (u32, u32) {
        self.inner.input_size()
    }

    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    fn channel_dim(&self) -> usize {
        self.inner.channel_dim()
    }

    fn landmark_count(&self) -> usize {
        self.inner.landmark_count()
    }

    fn token_grid(&self) -> (usize, usize) {
        self.inner.token_grid()
    }

    fn landmark_grid(&self) -> (usize, usize) {
        self.inner.landmark_grid()
    }

    fn encode(&self, face: &FaceCrop) -> Result<Array2<T>> {
        self.inner.encode(face)
    }

    fn decode(&self, embedding: &Array2<T>) -> Result<(LandmarkSet<T>, AgrAttributes)> {
        let (mut landmarks, _) = self.inner.decode(embedding)?;
        if let Some(points) = &self.landmarks {
            landmarks = LandmarkSet {
                points: points.clone(),
                visibility: vec![true; points.nrows()],
            };
        }
        Ok((landmarks, self.agr.clone()))
    }
}

/// Builds an expert from a config spec: `"toy"` for the built-in seeded
/// expert, anything else is treated as a path to saved expert weights.
pub fn construct_expert<T: Scalar>(
    spec: &str,
    channel_dim: usize,
) -> Result<Box<dyn FacialExpert<T>>> {
    if spec == "toy" {
        return Ok(Box::new(ToyExpert::<T>::new(channel_dim)?));
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::config(format!(
            "expert spec {spec:?} is neither 'toy' nor an existing weights file"
        )));
    }
    let expert = ToyExpert::<T>::load(path)?;
    if expert.channel_dim != channel_dim {
        return Err(Error::config(format!(
            "expert weights use channel_dim {}, model expects {}",
            expert.channel_dim, channel_dim
        )));
    }
    Ok(Box::new(expert))
}

/// Gram-Schmidt on the rows; `None` if any row collapses.
fn orthonormalize_rows(m: &Array2<f64>) -> Option<Array2<f64>> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        for j in 0..i {
            let dot: f64 = (0..out.ncols()).map(|c| out[[i, c]] * out[[j, c]]).sum();
            for c in 0..out.ncols() {
                let prev = out[[j, c]];
                out[[i, c]] -= dot * prev;
            }
        }
        let norm: f64 = (0..out.ncols())
            .map(|c| out[[i, c]] * out[[i, c]])
            .sum::<f64>()
            .sqrt();
        if norm < 1e-9 {
            return None;
        }
        for c in 0..out.ncols() {
            out[[i, c]] /= norm;
        }
    }
    Some(out)
}
