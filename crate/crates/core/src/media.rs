//! Media loading: still images and directory-backed video clips.
//!
//! A video clip is a directory containing numbered PNG frames plus a
//! `media.json` with `{"duration_seconds": <f64>}`. Frames are assumed to be
//! uniformly spaced over the clip duration; [`sample_frames`] picks one frame
//! per `1/fps` seconds, always returning at least one frame.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{io_ctx, Error, Result};

/// One decoded RGB frame plus its index in the sampled sequence.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pixels: RgbImage,
    /// Position of this frame within the sampled sequence (0-based).
    pub index: usize,
}

impl Frame {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// Reference to a media item on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MediaHandle {
    Image(PathBuf),
    VideoDir(PathBuf),
}

impl MediaHandle {
    /// Classifies a path: directories are video clips, files are images.
    pub fn from_path(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(MediaHandle::VideoDir(path.to_path_buf()))
        } else if path.is_file() {
            Ok(MediaHandle::Image(path.to_path_buf()))
        } else {
            Err(Error::input(format!("media not found: {}", path.display())))
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            MediaHandle::Image(p) | MediaHandle::VideoDir(p) => p,
        }
    }

    pub fn is_video(&self) -> bool {
        matches!(self, MediaHandle::VideoDir(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoMeta {
    pub duration_seconds: f64,
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = io_ctx(std::fs::read(path), path)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::input(format!("undecodable image {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::input(format!(
            "image {} has a zero dimension",
            path.display()
        )));
    }
    Ok(rgb)
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::input(format!("write png {}: {e}", path.display())))
}

pub fn load_video_meta(dir: &Path) -> Result<VideoMeta> {
    let path = dir.join("media.json");
    let text = io_ctx(std::fs::read_to_string(&path), &path)?;
    let meta: VideoMeta = serde_json::from_str(&text)
        .map_err(|e| Error::input(format!("malformed {}: {e}", path.display())))?;
    if !(meta.duration_seconds.is_finite() && meta.duration_seconds > 0.0) {
        return Err(Error::input(format!(
            "{}: duration_seconds must be positive",
            path.display()
        )));
    }
    Ok(meta)
}

/// PNG frame files of a clip directory, in lexicographic order.
pub fn list_video_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = io_ctx(std::fs::read_dir(dir), dir)?;
    let mut frames: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = io_ctx(entry, dir)?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            frames.push(path);
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(Error::input(format!(
            "video dir {} contains no png frames",
            dir.display()
        )));
    }
    Ok(frames)
}

/// Decodes the frames to process for one media item.
///
/// Images yield exactly one frame. Videos yield `max(1,
/// floor(duration * fps))` frames taken evenly from the stored sequence.
pub fn sample_frames(handle: &MediaHandle, fps: f64) -> Result<Vec<Frame>> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::config(format!("fps must be positive, got {fps}")));
    }
    match handle {
        MediaHandle::Image(path) => Ok(vec![Frame {
            pixels: load_image(path)?,
            index: 0,
        }]),
        MediaHandle::VideoDir(dir) => {
            let meta = load_video_meta(dir)?;
            let files = list_video_frames(dir)?;
            let count = ((meta.duration_seconds * fps).floor() as usize).max(1);
            let mut frames = Vec::with_capacity(count);
            for k in 0..count {
                let src = (k * files.len()) / count;
                frames.push(Frame {
                    pixels: load_image(&files[src])?,
                    index: k,
                });
            }
            Ok(frames)
        }
    }
}

/// Copies a sub-rectangle, clamping it to the image bounds.
/// The clamped region must be non-empty.
pub fn crop(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
    let x0 = x.min(img.width().saturating_sub(1));
    let y0 = y.min(img.height().saturating_sub(1));
    let x1 = (x.saturating_add(w)).min(img.width()).max(x0 + 1);
    let y1 = (y.saturating_add(h)).min(img.height()).max(y0 + 1);
    let mut out = RgbImage::new(x1 - x0, y1 - y0);
    for yy in y0..y1 {
        for xx in x0..x1 {
            out.put_pixel(xx - x0, yy - y0, *img.get_pixel(xx, yy));
        }
    }
    out
}

/// Bilinear resampling to an exact target size.
pub fn resize_bilinear(img: &RgbImage, new_w: u32, new_h: u32) -> RgbImage {
    assert!(new_w > 0 && new_h > 0, "resize target must be non-empty");
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut out = RgbImage::new(new_w, new_h);
    for oy in 0..new_h {
        for ox in 0..new_w {
            // Pixel-center sampling keeps the identity transform exact.
            let sx = ((ox as f64 + 0.5) * w / new_w as f64 - 0.5).clamp(0.0, w - 1.0);
            let sy = ((oy as f64 + 0.5) * h / new_h as f64 - 0.5).clamp(0.0, h - 1.0);
            let x0 = sx.floor() as u32;
            let y0 = sy.floor() as u32;
            let x1 = (x0 + 1).min(img.width() - 1);
            let y1 = (y0 + 1).min(img.height() - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let mut rgb = [0u8; 3];
            for (c, out_c) in rgb.iter_mut().enumerate() {
                let p00 = img.get_pixel(x0, y0)[c] as f64;
                let p10 = img.get_pixel(x1, y0)[c] as f64;
                let p01 = img.get_pixel(x0, y1)[c] as f64;
                let p11 = img.get_pixel(x1, y1)[c] as f64;
                let top = p00 * (1.0 - fx) + p10 * fx;
                let bot = p01 * (1.0 - fx) + p11 * fx;
                *out_c = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, image::Rgb(rgb));
        }
    }
    out
}

/// Writes a clip directory (frames + metadata) for fixtures and tests.
pub fn write_video_dir(dir: &Path, frames: &[RgbImage], duration_seconds: f64) -> Result<()> {
    io_ctx(std::fs::create_dir_all(dir), dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_png(&dir.join(format!("frame_{i:04}.png")), f)?;
    }
    let meta = VideoMeta { duration_seconds };
    let path = dir.join("media.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    io_ctx(std::fs::write(&path, json), &path)
}
