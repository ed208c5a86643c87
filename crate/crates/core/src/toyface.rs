//! Procedural grayscale "faces": an elliptical head on a textured background,
//! two dark eye blobs and a mouth bar, with the component boxes recorded.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_atomic, Image};

/// Axis-aligned rectangle in normalized `[0, 1]²` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxRect {
    pub fn centered(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Self {
        Self {
            x0: (cx - half_w).max(0.0),
            y0: (cy - half_h).max(0.0),
            x1: (cx + half_w).min(1.0),
            y1: (cy + half_h).min(1.0),
        }
    }

    pub fn full() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn is_inside_unit(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn intersects(&self, other: &BoxRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Grow by `margin` on every side, clamped to the unit square.
    pub fn dilate(&self, margin: f64) -> Self {
        Self {
            x0: (self.x0 - margin).max(0.0),
            y0: (self.y0 - margin).max(0.0),
            x1: (self.x1 + margin).min(1.0),
            y1: (self.y1 + margin).min(1.0),
        }
    }

    /// Whether the centre of pixel `(y, x)` of an `h×w` grid lies inside.
    pub fn contains_pixel(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentBoxes {
    pub left_eye: BoxRect,
    pub right_eye: BoxRect,
    pub mouth: BoxRect,
}

impl ComponentBoxes {
    pub const NAMES: [&'static str; 3] = ["left_eye", "right_eye", "mouth"];

    pub fn as_array(&self) -> [BoxRect; 3] {
        [self.left_eye, self.right_eye, self.mouth]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in Self::NAMES.iter().zip(self.as_array()) {
            if !b.is_inside_unit() {
                return Err(Error::InvalidArgument(format!("{name} box {b:?} leaves the unit square")));
            }
            if b.area() <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} box {b:?} has zero area")));
            }
        }
        if self.left_eye.intersects(&self.right_eye) {
            return Err(Error::InvalidArgument("eye boxes overlap".into()));
        }
        Ok(())
    }

    /// Layout of an undisturbed face; used when per-image boxes are unknown.
    pub fn canonical() -> Self {
        Self {
            left_eye: BoxRect::centered(0.35, 0.42, 0.11, 0.11),
            right_eye: BoxRect::centered(0.65, 0.42, 0.11, 0.11),
            mouth: BoxRect::centered(0.5, 0.72, 0.18, 0.09),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyFace {
    pub image: Image,
    pub boxes: ComponentBoxes,
    pub seed: u64,
}

/// SplitMix64 finalizer; derives independent per-item seeds from a master.
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render one face from its own seed.
pub fn toy_face(size: usize, seed: u64) -> Result<ToyFace> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("toy faces need size ≥ 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = rng.gen_range(0.2..0.35);
    let (fx, fy) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let (ph1, ph2) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let cx = 0.5 + rng.gen_range(-0.04..0.04);
    let cy = 0.52 + rng.gen_range(-0.04..0.04);
    let rx = rng.gen_range(0.30..0.36);
    let ry = rng.gen_range(0.38..0.44);
    let skin = rng.gen_range(0.6..0.85);
    let shade = rng.gen_range(-0.08..0.08);
    let ex = rng.gen_range(0.13..0.17);
    let ey = cy - rng.gen_range(0.08..0.12);
    let core = rng.gen_range(0.025..0.035);
    let pupils = [rng.gen_range(0.02..0.1), rng.gen_range(0.02..0.1)];
    let mouth_y = cy + rng.gen_range(0.17..0.22);
    let mouth_hw = rng.gen_range(0.10..0.15);
    let mouth_hh = rng.gen_range(0.025..0.04);
    let mouth_v = rng.gen_range(0.15..0.3);
    let eyes = [(cx - ex, ey), (cx + ex, ey)];
    let px = 1.0 / size as f64;

    let texture: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let image = Image::from_fn(size, size, 1, |y, x, _| {
        let u = (x as f64 + 0.5) * px;
        let v = (y as f64 + 0.5) * px;
        let tau = std::f64::consts::TAU;
        let mut val = bg + 0.06 * (fx * u * tau + ph1).sin() * (fy * v * tau + ph2).cos() + texture[y * size + x];
        let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
        let head = 1.0 - smoothstep(1.0 - px / rx, 1.0 + px / rx, d);
        let face = skin + shade * (u - cx) / rx;
        val = val * (1.0 - head) + face * head;
        for (&(ecx, ecy), &p) in eyes.iter().zip(&pupils) {
            let r = ((u - ecx).powi(2) + (v - ecy).powi(2)).sqrt();
            let w = 1.0 - smoothstep(core, 2.0 * core, r);
            val = val * (1.0 - w) + p * w;
        }
        let mx = 1.0 - smoothstep(mouth_hw - px, mouth_hw + px, (u - cx).abs());
        let my = 1.0 - smoothstep(mouth_hh - px, mouth_hh + px, (v - mouth_y).abs());
        let w = mx * my;
        val = val * (1.0 - w) + mouth_v * w;
        val.clamp(0.0, 1.0) as f32
    });
    let boxes = ComponentBoxes {
        left_eye: BoxRect::centered(eyes[0].0, eyes[0].1, 0.11, 0.11),
        right_eye: BoxRect::centered(eyes[1].0, eyes[1].1, 0.11, 0.11),
        mouth: BoxRect::centered(cx, mouth_y, mouth_hw + 0.04, mouth_hh + 0.06),
    };
    boxes.validate()?;
    Ok(ToyFace { image, boxes, seed })
}

/// `count` faces; item `i` is rendered from `split_seed(seed, i)`, so the
/// corpus is identical whether generated serially or in parallel.
pub fn gen_toyfaces(count: usize, size: usize, seed: u64) -> Result<Vec<ToyFace>> {
    let one = |i: usize| toy_face(size, split_seed(seed, i as u64));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(one).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub seed: u64,
    pub boxes: ComponentBoxes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub size: usize,
    pub images: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write `face_NNNNN.pgm` files plus `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, faces: &[ToyFace], seed: u64, size: usize) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(faces.len());
    for (i, face) in faces.iter().enumerate() {
        let name = format!("face_{i:05}.pgm");
        face.image.save(dir.join(&name))?;
        images.push(ManifestEntry { path: name, seed: face.seed, boxes: face.boxes });
    }
    let manifest = CorpusManifest { seed, size, images };
    write_atomic(&dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Load a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<ToyFace>> {
    let manifest: CorpusManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_NAME))?)?;
    manifest
        .images
        .iter()
        .map(|e| Ok(ToyFace { image: Image::load(dir.join(&e.path))?, boxes: e.boxes, seed: e.seed }))
        .collect()
}
