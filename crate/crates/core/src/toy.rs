//! Procedural scene-text corpora with exact ground truth.
//!
//! Glyphs are stroke drawings built from a segment alphabet inside character
//! cells; words are runs of cells. The two domains differ in rendering:
//!
//! * synthetic: smooth two-color gradient backgrounds, flat text colors with
//!   high contrast, no noise, many words;
//! * real: blotchy backgrounds with strong surface texture, clutter strokes,
//!   flat ink, lens blur and mild sensor noise, fewer words.
//!
//! Character boxes are the cells; glyph truth is the set of stroke pixels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{label_map, write_annotations, AnnotationSet};
use crate::augment::gaussian_blur;
use crate::error::{Error, Result};
use crate::geometry::QuadBox;
use crate::raster::{luma, BinaryMask, Image, Raster};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyDomain {
    Synthetic,
    Real,
}

impl ToyDomain {
    fn stream(self) -> u64 {
        match self {
            ToyDomain::Synthetic => 1,
            ToyDomain::Real => 2,
        }
    }
}

impl std::str::FromStr for ToyDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" | "synth" => Ok(ToyDomain::Synthetic),
            "real" => Ok(ToyDomain::Real),
            other => Err(Error::Config(format!("unknown toy domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub image: Image,
    pub char_boxes: Vec<QuadBox>,
    pub word_boxes: Vec<QuadBox>,
    /// Stroke pixels.
    pub glyph_truth: BinaryMask,
}

impl ToyScene {
    /// Union of the character boxes.
    pub fn char_label(&self) -> BinaryMask {
        label_map(&self.char_boxes, self.image.width(), self.image.height())
    }

    pub fn annotation(&self, image_path: impl Into<PathBuf>) -> AnnotationSet {
        AnnotationSet {
            image_path: image_path.into(),
            char_boxes: self.char_boxes.clone(),
            word_boxes: self.word_boxes.clone(),
            transcriptions: None,
        }
    }
}

// Segment alphabet in unit-cell coordinates.
const SEGMENTS: [((f64, f64), (f64, f64)); 10] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((0.0, 0.5), (1.0, 0.5)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.5)),
    ((0.0, 0.5), (0.0, 1.0)),
    ((1.0, 0.0), (1.0, 0.5)),
    ((1.0, 0.5), (1.0, 1.0)),
    ((0.0, 0.0), (1.0, 1.0)),
    ((1.0, 0.0), (0.0, 1.0)),
    ((0.5, 0.0), (0.5, 1.0)),
];

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Marks the strokes of one random glyph inside the cell `[x0, x0 + cw) x [y0, y0 + ch)`.
fn draw_glyph(mask: &mut BinaryMask, x0: usize, y0: usize, cw: usize, ch: usize, rng: &mut Rng) {
    let stroke = (ch as f64 * 0.3).max(1.0);
    let half = stroke / 2.0;
    // One pixel of cell margin stays background.
    let left = x0 as f64 + 1.0 + half - 0.5;
    let top = y0 as f64 + 1.0 + half - 0.5;
    let right = (x0 + cw) as f64 - 2.0 - half + 0.5;
    let bottom = (y0 + ch) as f64 - 2.0 - half + 0.5;
    let (sx, sy) = ((right - left).max(0.0), (bottom - top).max(0.0));
    let count = rng.random_range(3..=5);
    let mut chosen = Vec::with_capacity(count);
    while chosen.len() < count {
        let s = rng.random_range(0..SEGMENTS.len());
        if !chosen.contains(&s) {
            chosen.push(s);
        }
    }
    let map = |p: (f64, f64)| (left + p.0 * sx, top + p.1 * sy);
    for y in y0 + 1..y0 + ch - 1 {
        for x in x0 + 1..x0 + cw - 1 {
            let hit = chosen.iter().any(|&s| {
                let (a, b) = SEGMENTS[s];
                segment_distance(x as f64, y as f64, map(a), map(b)) <= half
            });
            if hit {
                mask.set(x, y, true);
            }
        }
    }
}

struct Layout {
    char_cells: Vec<(usize, usize, usize, usize)>,
    words: Vec<(usize, usize, usize, usize)>,
}

fn layout(w: usize, h: usize, target_words: usize, rng: &mut Rng) -> Layout {
    let mut words: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut char_cells = Vec::new();
    let ch_min = ((h as f64 * 0.14).round() as usize).max(5);
    let ch_max = ((h as f64 * 0.22).round() as usize).max(ch_min);
    for _ in 0..target_words * 20 {
        if words.len() == target_words {
            break;
        }
        let ch = rng.random_range(ch_min..=ch_max);
        let cw = ((ch as f64 * rng.random_range(0.6..0.8)).round() as usize).max(4);
        let n = rng.random_range(2..=5usize);
        let gap = (ch / 10).max(1);
        let ww = n * cw + (n - 1) * gap;
        if ww + 2 > w || ch + 2 > h {
            continue;
        }
        let x = rng.random_range(1..=w - ww - 1);
        let y = rng.random_range(1..=h - ch - 1);
        let clear = words.iter().all(|&(ox, oy, ow, oh)| {
            x + ww + 2 <= ox || ox + ow + 2 <= x || y + ch + 2 <= oy || oy + oh + 2 <= y
        });
        if !clear {
            continue;
        }
        words.push((x, y, ww, ch));
        for i in 0..n {
            char_cells.push((x + i * (cw + gap), y, cw, ch));
        }
    }
    Layout { char_cells, words }
}

fn cell_quad(&(x, y, w, h): &(usize, usize, usize, usize)) -> QuadBox {
    QuadBox::rect(x as f64, y as f64, (x + w - 1) as f64, (y + h - 1) as f64)
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [
        rng.random_range(0.0..256.0),
        rng.random_range(0.0..256.0),
        rng.random_range(0.0..256.0),
    ]
}

fn color_luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Text color whose luma sits `contrast` away from `background`, on a random side when both fit.
fn text_color(background: f64, contrast: f64, rng: &mut Rng) -> [f64; 3] {
    let up = background + contrast <= 250.0;
    let down = background - contrast >= 5.0;
    let target = match (up, down) {
        (true, true) => {
            if rng.random_bool(0.5) {
                background + contrast
            } else {
                background - contrast
            }
        }
        (true, false) => background + contrast,
        (false, true) => background - contrast,
        (false, false) => {
            if background < 128.0 {
                250.0
            } else {
                5.0
            }
        }
    };
    // Gray axis plus a small tint.
    let tint = [
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
    ];
    let shift = target - color_luma(tint);
    [tint[0] + shift, tint[1] + shift, tint[2] + shift]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn synthetic_scene(w: usize, h: usize, rng: &mut Rng) -> ToyScene {
    let words = rng.random_range(3..=5);
    let lay = layout(w, h, words, rng);
    let c1 = random_color(rng);
    let shift = [
        rng.random_range(-30.0..30.0),
        rng.random_range(-30.0..30.0),
        rng.random_range(-30.0..30.0),
    ];
    let c2 = [c1[0] + shift[0], c1[1] + shift[1], c1[2] + shift[2]];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (w as f64 * dx.abs() + h as f64 * dy.abs()).max(1.0);
    let mut data = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / span + 0.5;
            for k in 0..3 {
                data[(y * w + x) * 3 + k] = to_u8(c1[k] + (c2[k] - c1[k]) * t);
            }
        }
    }
    let mut glyph_truth = BinaryMask::zeros(w, h);
    for word in &lay.words {
        let bg = {
            let (x, y) = (word.0 + word.2 / 2, word.1 + word.3 / 2);
            let p = &data[(y * w + x) * 3..(y * w + x) * 3 + 3];
            luma(p[0], p[1], p[2]) as f64
        };
        let color = text_color(bg, rng.random_range(90.0..180.0), rng);
        let mut strokes = BinaryMask::zeros(w, h);
        for cell in lay.char_cells.iter().filter(|c| c.1 == word.1 && c.0 >= word.0 && c.0 < word.0 + word.2) {
            draw_glyph(&mut strokes, cell.0, cell.1, cell.2, cell.3, rng);
        }
        for (i, &b) in strokes.bits().iter().enumerate() {
            if b == 1 {
                for k in 0..3 {
                    data[i * 3 + k] = to_u8(color[k]);
                }
            }
        }
        glyph_truth.or_assign(&strokes).expect("same dims");
    }
    ToyScene {
        image: Image::new(w, h, 3, data).expect("shape"),
        char_boxes: lay.char_cells.iter().map(cell_quad).collect(),
        word_boxes: lay.words.iter().map(cell_quad).collect(),
        glyph_truth,
    }
}

/// Range of the per-scene surface texture amplitude.
const TEXTURE_SIGMA: (f64, f64) = (30.0, 50.0);
/// Range of the per-scene sensor noise amplitude.
const SENSOR_SIGMA: (f64, f64) = (2.0, 6.0);

fn real_scene(w: usize, h: usize, rng: &mut Rng) -> ToyScene {
    let words = rng.random_range(1..=3);
    let lay = layout(w, h, words, rng);
    let base = random_color(rng);
    let mut field = vec![0.0f64; w * h];
    // Low-frequency blotches.
    for _ in 0..6 {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let radius = rng.random_range(0.1..0.35) * w.max(h) as f64;
        let amp = rng.random_range(-45.0..45.0);
        let inv = 1.0 / (2.0 * radius * radius);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                field[y * w + x] += amp * (-d2 * inv).exp();
            }
        }
    }
    let mut rgb: Vec<f64> = (0..w * h)
        .flat_map(|i| [base[0] + field[i], base[1] + field[i], base[2] + field[i]])
        .collect();
    // Clutter strokes that are not text.
    let scale = (h as f64 / 64.0).max(1.0);
    for _ in 0..rng.random_range(4..=8) {
        let a = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let b = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let shade = rng.random_range(-40.0..40.0);
        let half = 0.5 * scale;
        for y in 0..h {
            for x in 0..w {
                if segment_distance(x as f64, y as f64, a, b) <= half {
                    for k in 0..3 {
                        rgb[(y * w + x) * 3 + k] += shade;
                    }
                }
            }
        }
    }
    let mut glyph_truth = BinaryMask::zeros(w, h);
    for word in &lay.words {
        let (x, y) = (word.0 + word.2 / 2, word.1 + word.3 / 2);
        let p = &rgb[(y * w + x) * 3..(y * w + x) * 3 + 3];
        let bg = color_luma([p[0], p[1], p[2]]).clamp(0.0, 255.0);
        let color = text_color(bg, rng.random_range(90.0..180.0), rng);
        let mut strokes = BinaryMask::zeros(w, h);
        for cell in lay.char_cells.iter().filter(|c| c.1 == word.1 && c.0 >= word.0 && c.0 < word.0 + word.2) {
            draw_glyph(&mut strokes, cell.0, cell.1, cell.2, cell.3, rng);
        }
        for (i, &b) in strokes.bits().iter().enumerate() {
            if b == 1 {
                rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
        glyph_truth.or_assign(&strokes).expect("same dims");
    }
    let clean = Image::new(w, h, 3, rgb.iter().map(|&v| to_u8(v)).collect()).expect("shape");
    let blurred = gaussian_blur(&clean, 0.7 * scale);
    // Surface texture lives under the ink; sensor noise covers everything.
    let ink = gaussian_blur(&glyph_truth.to_image(), 0.7 * scale);
    let texture = Normal::new(0.0, rng.random_range(TEXTURE_SIGMA.0..TEXTURE_SIGMA.1)).expect("positive sigma");
    let sensor = Normal::new(0.0, rng.random_range(SENSOR_SIGMA.0..SENSOR_SIGMA.1)).expect("positive sigma");
    let data = blurred
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let bare = 1.0 - f64::from(ink.data()[i / 3]) / 255.0;
            to_u8(v as f64 + bare * texture.sample(rng) + sensor.sample(rng))
        })
        .collect();
    ToyScene {
        image: Image::new(w, h, 3, data).expect("shape"),
        char_boxes: lay.char_cells.iter().map(cell_quad).collect(),
        word_boxes: lay.words.iter().map(cell_quad).collect(),
        glyph_truth,
    }
}

/// One scene of `domain`, fully determined by `rng`.
pub fn toy_scene(domain: ToyDomain, width: usize, height: usize, rng: &mut Rng) -> ToyScene {
    match domain {
        ToyDomain::Synthetic => synthetic_scene(width, height, rng),
        ToyDomain::Real => real_scene(width, height, rng),
    }
}

/// `count` scenes; scene `i` depends only on `(seed, domain, i)`.
pub fn toy_corpus(domain: ToyDomain, count: usize, width: usize, height: usize, seed: u64) -> Vec<ToyScene> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| toy_scene(domain, width, height, &mut Rng::derive(seed, &[domain.stream(), i as u64])))
        .collect()
}

/// Writes `images/NNNNN.png` and `annotations.jsonl` under `dir`. Image paths in
/// the annotation file are relative to `dir`.
pub fn write_toy_corpus(scenes: &[ToyScene], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:05}.png"));
        scene.image.save_png(dir.join(&rel))?;
        records.push(scene.annotation(rel));
    }
    let path = dir.join("annotations.jsonl");
    write_annotations(&records, &path)?;
    Ok(path)
}
