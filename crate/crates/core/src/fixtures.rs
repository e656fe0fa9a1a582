//! Synthetic face corpora for tests and desk-scale experiments: seven
//! expression classes with distinct facial geometry, an imbalanced binary
//! set, a set whose class signal lives only inside a small face on a noisy
//! background, and video variants with per-second captions.
//!
//! Faces are bright connected blobs (detector-friendly) on dark
//! backgrounds; expression features are drawn strictly inside the face so
//! the bright region stays connected.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{write_captions, Dataset, DatasetSample, DatasetSpec, Modality};
use crate::error::{io_ctx, Result};
use crate::media::{save_png, write_video_dir};
use crate::param::fnv1a;

/// The fixture expression vocabulary, alphabetical.
pub const SEVEN_CLASSES: [&str; 7] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "neutral",
    "sadness",
    "surprise",
];

/// Human-readable cue for each class, used in sample descriptions.
pub fn class_cue(class: &str) -> &'static str {
    match class {
        "anger" => "slanted dark brows pressed together",
        "disgust" => "a green-tinged wrinkled nose",
        "fear" => "wide pale eyes",
        "happiness" => "a wide bright smile",
        "neutral" => "a plain even expression",
        "sadness" => "a downturned mouth with tear streaks",
        "surprise" => "a round open mouth",
        _ => "a facial expression",
    }
}

fn clamp8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

fn jitter_color(rng: &mut ChaCha8Rng, base: (i32, i32, i32), spread: i32) -> Rgb<u8> {
    Rgb([
        clamp8(base.0 + rng.random_range(-spread..=spread)),
        clamp8(base.1 + rng.random_range(-spread..=spread)),
        clamp8(base.2 + rng.random_range(-spread..=spread)),
    ])
}

fn fill_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i32, img.height() as i32);
    let x0 = ((cx - rx).floor() as i32).max(0);
    let x1 = ((cx + rx).ceil() as i32).min(w - 1);
    let y0 = ((cy - ry).floor() as i32).max(0);
    let y1 = ((cy + ry).ceil() as i32).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn fill_circle(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: Rgb<u8>) {
    fill_ellipse(img, cx, cy, r, r, color);
}

/// Thick line segment drawn as overlapping discs.
fn thick_segment(
    img: &mut RgbImage,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    half_width: f64,
    color: Rgb<u8>,
) {
    let steps = ((x1 - x0).hypot(y1 - y0).ceil() as usize * 2).max(2);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        fill_circle(img, x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, half_width, color);
    }
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

/// Draws one expression face filling most of a `size` x `size` canvas with
/// a dark flat background.
pub fn draw_face(size: u32, class: &str, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, jitter_color(rng, (18, 22, 30), 6));
    let s = size as f64;
    let geo = FaceGeometry {
        cx: s * (0.5 + rng.random_range(-0.04..0.04)),
        cy: s * (0.5 + rng.random_range(-0.04..0.04)),
        rx: s * (0.38 + rng.random_range(-0.025..0.025)),
        ry: s * (0.44 + rng.random_range(-0.025..0.025)),
    };
    draw_face_into(&mut img, &geo, class, rng);
    img
}

/// Draws the face (skin plus expression features) into an existing canvas.
fn draw_face_into(img: &mut RgbImage, geo: &FaceGeometry, class: &str, rng: &mut ChaCha8Rng) {
    let FaceGeometry { cx, cy, rx, ry } = *geo;
    let skin = jitter_color(rng, (208, 172, 140), 10);
    fill_ellipse(img, cx, cy, rx, ry, skin);

    // Eye anchors; every feature stays well inside the ellipse so the
    // bright blob remains a single connected component.
    let (ex, ey) = (rx * 0.42, -ry * 0.28);
    let mouth_y = cy + ry * 0.45;
    let jx = rng.random_range(-1.0..1.0);
    let jy = rng.random_range(-1.0..1.0);

    let dark_eye = jitter_color(rng, (40, 32, 30), 8);
    match class {
        "anger" => {
            let brow = jitter_color(rng, (140, 22, 22), 12);
            for side in [-1.0, 1.0] {
                let bx = cx + side * ex;
                let by = cy + ey - ry * 0.16;
                thick_segment(
                    img,
                    bx - side * rx * 0.18,
                    by + ry * 0.10,
                    bx + side * rx * 0.18,
                    by - ry * 0.02,
                    rx * 0.06,
                    brow,
                );
                fill_circle(img, bx + jx, cy + ey, rx * 0.09, dark_eye);
            }
            thick_segment(
                img,
                cx - rx * 0.30,
                mouth_y + jy,
                cx + rx * 0.30,
                mouth_y + jy,
                ry * 0.045,
                jitter_color(rng, (70, 30, 30), 8),
            );
        }
        "disgust" => {
            let patch = jitter_color(rng, (95, 150, 60), 12);
            fill_ellipse(img, cx + jx, cy + ry * 0.08, rx * 0.30, ry * 0.22, patch);
            for side in [-1.0, 1.0] {
                thick_segment(
                    img,
                    cx + side * ex - rx * 0.12,
                    cy + ey,
                    cx + side * ex + rx * 0.12,
                    cy + ey,
                    rx * 0.045,
                    dark_eye,
                );
            }
            thick_segment(
                img,
                cx - rx * 0.22,
                mouth_y,
                cx + rx * 0.22,
                mouth_y - ry * 0.05,
                ry * 0.04,
                jitter_color(rng, (90, 60, 50), 8),
            );
        }
        "fear" => {
            let white = jitter_color(rng, (240, 242, 248), 6);
            fill_ellipse(img, cx + jx, cy - ry * 0.55, rx * 0.45, ry * 0.13, {
                jitter_color(rng, (175, 195, 230), 10)
            });
            for side in [-1.0, 1.0] {
                fill_circle(img, cx + side * ex, cy + ey, rx * 0.17, white);
                fill_circle(img, cx + side * ex, cy + ey, rx * 0.06, dark_eye);
            }
            fill_ellipse(
                img,
                cx,
                mouth_y + jy,
                rx * 0.14,
                ry * 0.10,
                jitter_color(rng, (80, 50, 55), 8),
            );
        }
        "happiness" => {
            let smile = jitter_color(rng, (235, 192, 60), 12);
            thick_segment(
                img,
                cx - rx * 0.34,
                mouth_y - ry * 0.10 + jy,
                cx,
                mouth_y + ry * 0.06 + jy,
                ry * 0.07,
                smile,
            );
            thick_segment(
                img,
                cx,
                mouth_y + ry * 0.06 + jy,
                cx + rx * 0.34,
                mouth_y - ry * 0.10 + jy,
                ry * 0.07,
                smile,
            );
            for side in [-1.0, 1.0] {
                fill_circle(img, cx + side * ex + jx, cy + ey, rx * 0.08, dark_eye);
            }
        }
        "sadness" => {
            let blue = jitter_color(rng, (55, 75, 175), 12);
            thick_segment(
                img,
                cx - rx * 0.28,
                mouth_y + ry * 0.05 + jy,
                cx,
                mouth_y - ry * 0.08 + jy,
                ry * 0.055,
                blue,
            );
            thick_segment(
                img,
                cx,
                mouth_y - ry * 0.08 + jy,
                cx + rx * 0.28,
                mouth_y + ry * 0.05 + jy,
                ry * 0.055,
                blue,
            );
            for side in [-1.0, 1.0] {
                fill_circle(img, cx + side * ex, cy + ey, rx * 0.08, dark_eye);
                thick_segment(
                    img,
                    cx + side * ex,
                    cy + ey + ry * 0.12,
                    cx + side * ex + jx,
                    cy + ey + ry * 0.30,
                    rx * 0.035,
                    blue,
                );
            }
        }
        "surprise" => {
            fill_ellipse(
                img,
                cx + jx,
                mouth_y - ry * 0.05,
                rx * 0.18,
                ry * 0.16,
                jitter_color(rng, (45, 30, 32), 8),
            );
            let rim = jitter_color(rng, (165, 60, 165), 12);
            for side in [-1.0, 1.0] {
                fill_circle(img, cx + side * ex, cy + ey, rx * 0.14, rim);
                fill_circle(img, cx + side * ex, cy + ey, rx * 0.08, dark_eye);
                fill_circle(
                    img,
                    cx + side * ex,
                    cy + ey - ry * 0.22,
                    rx * 0.05,
                    rim,
                );
            }
        }
        // "neutral" and anything unrecognized: plain face.
        _ => {
            for side in [-1.0, 1.0] {
                fill_circle(img, cx + side * ex + jx, cy + ey, rx * 0.07, dark_eye);
            }
            thick_segment(
                img,
                cx - rx * 0.22,
                mouth_y + jy,
                cx + rx * 0.22,
                mouth_y + jy,
                ry * 0.035,
                jitter_color(rng, (95, 82, 75), 8),
            );
        }
    }
}

fn sample_rng(seed: u64, sample_key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(sample_key))
}

fn description_for(class: &str) -> String {
    format!("a synthetic face with {}", class_cue(class))
}

fn build_dataset(
    dir: &Path,
    name: &str,
    classes: &[&str],
    modality: Modality,
    conversation_eligible: bool,
    samples: Vec<DatasetSample>,
) -> Result<Dataset> {
    let ds = Dataset {
        dir: dir.to_path_buf(),
        spec: DatasetSpec {
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            modality,
            conversation_eligible,
            samples,
        },
    };
    ds.save()?;
    ds.validate()?;
    Ok(ds)
}

/// Seven-class image corpus, `per_class` faces per class, 48 x 48 px.
pub fn seven_class_images(dir: &Path, per_class: usize, seed: u64) -> Result<Dataset> {
    let images = dir.join("images");
    io_ctx(std::fs::create_dir_all(&images), &images)?;
    let mut samples = Vec::new();
    for class in SEVEN_CLASSES {
        for i in 0..per_class {
            let key = format!("{class}-{i}");
            let mut rng = sample_rng(seed, &key);
            let img = draw_face(48, class, &mut rng);
            let media = format!("images/{key}.png");
            save_png(&dir.join(&media), &img)?;
            samples.push(DatasetSample {
                id: key,
                media,
                label: class.to_string(),
                description: Some(description_for(class)),
            });
        }
    }
    build_dataset(dir, "seven-class-images", &SEVEN_CLASSES, Modality::Image, true, samples)
}

/// Two-class image corpus with a configurable imbalance
/// (e.g. 38 happiness vs 2 sadness for a 95/5 split).
pub fn binary_imbalanced_images(
    dir: &Path,
    majority: usize,
    minority: usize,
    seed: u64,
) -> Result<Dataset> {
    let images = dir.join("images");
    io_ctx(std::fs::create_dir_all(&images), &images)?;
    let classes = ["happiness", "sadness"];
    let mut samples = Vec::new();
    for (class, count) in classes.iter().zip([majority, minority]) {
        for i in 0..count {
            let key = format!("{class}-{i}");
            let mut rng = sample_rng(seed, &key);
            let img = draw_face(48, class, &mut rng);
            let media = format!("images/{key}.png");
            save_png(&dir.join(&media), &img)?;
            samples.push(DatasetSample {
                id: key,
                media,
                label: class.to_string(),
                description: Some(description_for(class)),
            });
        }
    }
    build_dataset(dir, "binary-imbalanced", &classes, Modality::Image, true, samples)
}

/// Two-class corpus where the class signal exists only inside a small face
/// at a random position over per-pixel noise: global image statistics are
/// class-agnostic, so only the cropped face carries the label.
pub fn face_only_signal_images(dir: &Path, per_class: usize, seed: u64) -> Result<Dataset> {
    let images = dir.join("images");
    io_ctx(std::fs::create_dir_all(&images), &images)?;
    let classes = ["happiness", "sadness"];
    let size = 64u32;
    let mut samples = Vec::new();
    for class in classes {
        for i in 0..per_class {
            let key = format!("{class}-{i}");
            let mut rng = sample_rng(seed, &key);
            // Noise background kept below the detector's brightness
            // threshold (max luminance ~ 90).
            let mut img = RgbImage::from_fn(size, size, |_, _| Rgb([0, 0, 0]));
            for p in img.pixels_mut() {
                *p = Rgb([
                    rng.random_range(0..90),
                    rng.random_range(0..90),
                    rng.random_range(0..90),
                ]);
            }
            let r = size as f64 * 0.17;
            let cx = rng.random_range(r + 2.0..size as f64 - r - 2.0);
            let cy = rng.random_range(r * 1.15 + 2.0..size as f64 - r * 1.15 - 2.0);
            let geo = FaceGeometry {
                cx,
                cy,
                rx: r,
                ry: r * 1.15,
            };
            draw_face_into(&mut img, &geo, class, &mut rng);
            let media = format!("images/{key}.png");
            save_png(&dir.join(&media), &img)?;
            samples.push(DatasetSample {
                id: key,
                media,
                label: class.to_string(),
                description: Some(description_for(class)),
            });
        }
    }
    build_dataset(dir, "face-only-signal", &classes, Modality::Image, true, samples)
}

/// Seven-class video corpus: each clip is a drifting face, `seconds` long at
/// `source_fps` stored frames, with one caption per second.
pub fn seven_class_videos(
    dir: &Path,
    per_class: usize,
    seconds: f64,
    source_fps: u32,
    seed: u64,
) -> Result<Dataset> {
    let clips = dir.join("clips");
    io_ctx(std::fs::create_dir_all(&clips), &clips)?;
    let n_frames = ((seconds * source_fps as f64).round() as usize).max(1);
    let mut samples = Vec::new();
    for class in SEVEN_CLASSES {
        for i in 0..per_class {
            let key = format!("{class}-{i}");
            let mut rng = sample_rng(seed, &key);
            let mut frames = Vec::with_capacity(n_frames);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for f in 0..n_frames {
                let mut frame_rng = sample_rng(seed, &format!("{key}-f{f}"));
                let mut img = RgbImage::from_pixel(
                    48,
                    48,
                    jitter_color(&mut frame_rng, (18, 22, 30), 6),
                );
                let t = f as f64 / n_frames.max(1) as f64;
                let drift = (phase + t * std::f64::consts::TAU).sin() * 2.0;
                let geo = FaceGeometry {
                    cx: 24.0 + drift,
                    cy: 24.0 + drift * 0.5,
                    rx: 48.0 * 0.36,
                    ry: 48.0 * 0.42,
                };
                draw_face_into(&mut img, &geo, class, &mut frame_rng);
                frames.push(img);
            }
            let media = format!("clips/{key}");
            let clip_dir = dir.join(&media);
            write_video_dir(&clip_dir, &frames, seconds)?;
            let captions: Vec<String> = (0..(seconds.floor() as usize).max(1))
                .map(|k| format!("second {k}: a face holding {}", class_cue(class)))
                .collect();
            write_captions(&clip_dir, &captions)?;
            samples.push(DatasetSample {
                id: key,
                media,
                label: class.to_string(),
                description: Some(description_for(class)),
            });
        }
    }
    build_dataset(dir, "seven-class-videos", &SEVEN_CLASSES, Modality::Video, true, samples)
}
