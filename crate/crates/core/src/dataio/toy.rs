//! Desk-scale synthetic dataset: stick figures whose limb proportions are
//! fixed per identity and whose clothing colors are fixed per outfit.
//!
//! Identity signal lives only in body shape; outfit color is the nuisance a
//! cloth-changing model must ignore. Cameras change background shade and add
//! small rotation/translation jitter. Keypoints are emitted exactly from the
//! renderer geometry.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    format_record, load_dataset, parse_record, split_identities, AnnotationRecord, DatasetIndex,
    KeypointTable, Split, Vocabularies,
};
use crate::error::{ReidError, Result};
use crate::eval::{is_valid_match, Protocol};
use crate::keypoints::NUM_RAW_POINTS;
use crate::seeds::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDatasetConfig {
    pub num_identities: usize,
    pub outfits_per_identity: usize,
    pub images_per_outfit: usize,
    pub num_cameras: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ReidError::InvalidConfig(m));
        if self.num_identities < 2 {
            return bad(format!("need at least 2 identities, got {}", self.num_identities));
        }
        if self.outfits_per_identity < 2 {
            return bad(format!(
                "need at least 2 outfits per identity, got {}",
                self.outfits_per_identity
            ));
        }
        if self.images_per_outfit < 1 {
            return bad("need at least 1 image per outfit".into());
        }
        if self.num_cameras < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.num_cameras));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 8 {
            return bad(format!("image size {h}x{w} is below the 16x8 minimum"));
        }
        Ok(())
    }
}

/// One rendered image with its labels and raw keypoints.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub split: Split,
    pub file_name: String,
    pub record: AnnotationRecord,
    pub image: RgbImage,
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub train: DatasetIndex,
    pub query: DatasetIndex,
    pub gallery: DatasetIndex,
    pub keypoints_path: PathBuf,
}

/// Limb lengths in units of the figure's height budget.
#[derive(Clone, Copy, Debug)]
struct BodyShape {
    height_fraction: f64,
    head_radius: f64,
    neck: f64,
    torso: f64,
    thigh: f64,
    shin: f64,
    upper_arm: f64,
    forearm: f64,
    shoulder_half: f64,
    hip_half: f64,
}

impl BodyShape {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            height_fraction: rng.random_range(0.70..0.92),
            head_radius: rng.random_range(0.05..0.08),
            neck: rng.random_range(0.08..0.13),
            torso: rng.random_range(0.24..0.38),
            thigh: rng.random_range(0.17..0.28),
            shin: rng.random_range(0.17..0.28),
            upper_arm: rng.random_range(0.12..0.20),
            forearm: rng.random_range(0.11..0.19),
            shoulder_half: rng.random_range(0.06..0.13),
            hip_half: rng.random_range(0.035..0.08),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Outfit {
    top: [f64; 3],
    bottom: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hues shared by every identity's wardrobe, so that a colour alone does
/// not single out a person.
const PALETTE_HUES: [f64; 4] = [0.0, 0.16, 0.33, 0.6];

impl Outfit {
    /// Distinct (top, bottom) hue pairs for one identity's outfits.
    fn wardrobe(rng: &mut ChaCha8Rng, count: usize) -> Vec<Self> {
        let n = PALETTE_HUES.len();
        let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|t| (0..n).map(move |b| (t, b))).collect();
        pairs.shuffle(rng);
        (0..count)
            .map(|i| {
                let (t, b) = pairs[i % pairs.len()];
                let mut color = |hue: f64| {
                    hsv_to_rgb(
                        hue,
                        rng.random_range(0.6..0.9),
                        rng.random_range(0.55..0.9),
                    )
                };
                Self {
                    top: color(PALETTE_HUES[t]),
                    bottom: color(PALETTE_HUES[b]),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct CameraStyle {
    background: [f64; 3],
    dx: f64,
    dy: f64,
    rotation: f64,
}

impl CameraStyle {
    fn draw(seed: u64, camera: usize, num_cameras: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[stream::CAMERA, camera as u64]));
        let shade = 0.2 + 0.6 * camera as f64 / (num_cameras.max(2) - 1) as f64;
        let tint: [f64; 3] = [
            rng.random_range(-0.06..0.06),
            rng.random_range(-0.06..0.06),
            rng.random_range(-0.06..0.06),
        ];
        Self {
            background: tint.map(|t| (shade + t).clamp(0.0, 1.0)),
            dx: rng.random_range(-0.015..0.015),
            dy: rng.random_range(-0.01..0.01),
            rotation: rng.random_range(-1.0f64..1.0).to_radians(),
        }
    }
}

const SKIN: [f64; 3] = [0.87, 0.72, 0.6];

/// Raw detector-order keypoints, in figure-local coordinates before scaling.
fn pose_points(shape: &BodyShape, rng: &mut ChaCha8Rng) -> [(f64, f64); NUM_RAW_POINTS] {
    let hip = (0.0, 0.0);
    let shoulder_y = -shape.torso;
    let face = (0.0, shoulder_y - shape.neck);
    let r = shape.head_radius;
    let l_sh = (hip.0 + shape.shoulder_half, shoulder_y);
    let r_sh = (hip.0 - shape.shoulder_half, shoulder_y);
    let l_hip = (shape.hip_half, 0.0);
    let r_hip = (-shape.hip_half, 0.0);
    let limb = |from: (f64, f64), len: f64, angle: f64| (from.0 + len * angle.sin(), from.1 + len * angle.cos());
    let mut deg = |lo: f64, hi: f64| rng.random_range(lo..hi).to_radians();
    let l_arm = deg(11.0, 13.0);
    let r_arm = -deg(11.0, 13.0);
    let l_bend = l_arm + deg(1.0, 3.0);
    let r_bend = r_arm - deg(1.0, 3.0);
    let l_leg = deg(3.5, 4.5);
    let r_leg = -deg(3.5, 4.5);
    let l_knee_bend = l_leg + deg(-1.0, 1.0);
    let r_knee_bend = r_leg + deg(-1.0, 1.0);
    let l_el = limb(l_sh, shape.upper_arm, l_arm);
    let r_el = limb(r_sh, shape.upper_arm, r_arm);
    let l_wr = limb(l_el, shape.forearm, l_bend);
    let r_wr = limb(r_el, shape.forearm, r_bend);
    let l_kn = limb(l_hip, shape.thigh, l_leg);
    let r_kn = limb(r_hip, shape.thigh, r_leg);
    let l_an = limb(l_kn, shape.shin, l_knee_bend);
    let r_an = limb(r_kn, shape.shin, r_knee_bend);
    [
        face,
        (face.0 + 0.35 * r, face.1 - 0.2 * r),
        (face.0 - 0.35 * r, face.1 - 0.2 * r),
        (face.0 + 0.9 * r, face.1),
        (face.0 - 0.9 * r, face.1),
        l_sh,
        r_sh,
        l_el,
        r_el,
        l_wr,
        r_wr,
        l_hip,
        r_hip,
        l_kn,
        r_kn,
        l_an,
        r_an,
    ]
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn inside_convex(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

enum Primitive {
    Segment { a: (f64, f64), b: (f64, f64), radius: f64, color: [f64; 3] },
    Polygon { points: Vec<(f64, f64)>, color: [f64; 3] },
    Disc { center: (f64, f64), radius: f64, color: [f64; 3] },
}

impl Primitive {
    fn covers(&self, p: (f64, f64)) -> bool {
        match self {
            Primitive::Segment { a, b, radius, .. } => segment_distance(p, *a, *b) <= *radius,
            Primitive::Polygon { points, .. } => inside_convex(p, points),
            Primitive::Disc { center, radius, .. } => {
                let (dx, dy) = (p.0 - center.0, p.1 - center.1);
                dx * dx + dy * dy <= radius * radius
            }
        }
    }

    fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Segment { color, .. }
            | Primitive::Polygon { color, .. }
            | Primitive::Disc { color, .. } => *color,
        }
    }
}

struct ImageSpec {
    shape: BodyShape,
    outfit: Outfit,
    camera: CameraStyle,
    render_seed: u64,
}

fn render_image(spec: &ImageSpec, size: (usize, usize)) -> (RgbImage, Vec<[f64; 3]>) {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.render_seed);
    let local = pose_points(&spec.shape, &mut rng);
    let s = &spec.shape;

    // Scale the figure (head top to lowest ankle) to its height fraction.
    let top = local[0].1 - s.head_radius;
    let bottom = local[15].1.max(local[16].1);
    let scale = h * s.height_fraction / (bottom - top);
    let jitter_x = rng.random_range(-0.01..0.01) * w;
    let jitter_y = rng.random_range(-0.005..0.005) * h;
    let angle = spec.camera.rotation + rng.random_range(-0.5f64..0.5).to_radians();
    let center_local = (0.0, (top + bottom) / 2.0);
    let center_px = (w / 2.0 + spec.camera.dx * w + jitter_x, h / 2.0 + spec.camera.dy * h + jitter_y);
    let (sin, cos) = angle.sin_cos();
    let to_px = |p: (f64, f64)| {
        let x = (p.0 - center_local.0) * scale;
        let y = (p.1 - center_local.1) * scale;
        (center_px.0 + x * cos - y * sin, center_px.1 + x * sin + y * cos)
    };
    let px: Vec<(f64, f64)> = local.iter().map(|&p| to_px(p)).collect();

    let limb_r = 0.035 * scale;
    let arm_r = 0.026 * scale;
    let prims = vec![
        Primitive::Segment { a: px[11], b: px[13], radius: limb_r, color: spec.outfit.bottom },
        Primitive::Segment { a: px[13], b: px[15], radius: limb_r, color: spec.outfit.bottom },
        Primitive::Segment { a: px[12], b: px[14], radius: limb_r, color: spec.outfit.bottom },
        Primitive::Segment { a: px[14], b: px[16], radius: limb_r, color: spec.outfit.bottom },
        Primitive::Polygon {
            points: vec![px[5], px[6], px[12], px[11]],
            color: spec.outfit.top,
        },
        Primitive::Segment { a: px[5], b: px[7], radius: arm_r, color: spec.outfit.top },
        Primitive::Segment { a: px[7], b: px[9], radius: arm_r, color: SKIN },
        Primitive::Segment { a: px[6], b: px[8], radius: arm_r, color: spec.outfit.top },
        Primitive::Segment { a: px[8], b: px[10], radius: arm_r, color: SKIN },
        Primitive::Segment {
            a: to_px((0.0, -s.torso)),
            b: px[0],
            radius: arm_r * 0.8,
            color: SKIN,
        },
        Primitive::Disc { center: px[0], radius: s.head_radius * scale, color: SKIN },
    ];

    let bg = spec.camera.background;
    let mut img = RgbImage::new(size.1 as u32, size.0 as u32);
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..size.0 {
        for x in 0..size.1 {
            let noise = rng.random_range(-0.03..0.03);
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let p = (x as f64 + sx, y as f64 + sy);
                    let color = prims
                        .iter()
                        .rev()
                        .find(|prim| prim.covers(p))
                        .map(|prim| prim.color())
                        .unwrap_or(bg);
                    for k in 0..3 {
                        acc[k] += color[k] / 4.0;
                    }
                }
            }
            let rgb = acc.map(|v| ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }

    let points = px
        .iter()
        .map(|&(x, y)| {
            let inside = (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
            [x, y, if inside { 1.0 } else { 0.0 }]
        })
        .collect();
    (img, points)
}

/// Renders the whole dataset in memory.
///
/// Identities are split in half (stratified) into disjoint train and test
/// sets. For each test identity the first quarter of each outfit's images
/// (at least one) become queries, except for the last outfit which stays
/// entirely in the gallery; any query left without a cross-camera,
/// cross-outfit match is moved to the gallery.
pub fn render_toy(config: &ToyDatasetConfig) -> Result<Vec<ToySample>> {
    config.validate()?;
    let ids: Vec<u32> = (0..config.num_identities as u32).collect();
    let (train_ids, _) = split_identities(&ids, &ids, 0.5, config.seed)?;
    let cameras: Vec<CameraStyle> = (0..config.num_cameras)
        .map(|c| CameraStyle::draw(config.seed, c, config.num_cameras))
        .collect();
    let queries_per_outfit = (config.images_per_outfit / 4).max(1);
    let (h, w) = config.image_size;

    let mut samples = Vec::new();
    let mut frame = 0u64;
    for &pid in &ids {
        let mut shape_rng = ChaCha8Rng::seed_from_u64(seeds::derive(
            config.seed,
            &[stream::IDENTITY_SHAPE, pid as u64],
        ));
        let shape = BodyShape::draw(&mut shape_rng);
        let is_train = train_ids.binary_search(&pid).is_ok();
        let mut outfit_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, &[stream::OUTFIT_COLOR, pid as u64]));
        let wardrobe = Outfit::wardrobe(&mut outfit_rng, config.outfits_per_identity);
        for (o, &outfit) in wardrobe.iter().enumerate() {
            let cloth_id = pid * config.outfits_per_identity as u32 + o as u32;
            for k in 0..config.images_per_outfit {
                let camera = (o + k + pid as usize) % config.num_cameras;
                let spec = ImageSpec {
                    shape,
                    outfit,
                    camera: cameras[camera],
                    render_seed: seeds::derive(config.seed, &[stream::IMAGE_RENDER, frame]),
                };
                let (image, points) = render_image(&spec, config.image_size);
                let split = if is_train {
                    Split::Train
                } else if o + 1 < config.outfits_per_identity && k < queries_per_outfit {
                    Split::Query
                } else {
                    Split::Gallery
                };
                let file_name = format_record(pid, cloth_id, camera as u32, frame, "png");
                let record = parse_record(&file_name, (h as u32, w as u32))?;
                samples.push(ToySample {
                    split,
                    file_name,
                    record,
                    image,
                    points,
                });
                frame += 1;
            }
        }
    }

    let gallery: Vec<AnnotationRecord> = samples
        .iter()
        .filter(|s| s.split == Split::Gallery)
        .map(|s| s.record.clone())
        .collect();
    for s in samples.iter_mut().filter(|s| s.split == Split::Query) {
        let has_match = gallery.iter().any(|g| {
            g.person_id == s.record.person_id && is_valid_match(&s.record, g, Protocol::ClothChanging)
        });
        if !has_match {
            s.split = Split::Gallery;
        }
    }
    if !samples.iter().any(|s| s.split == Split::Query) {
        return Err(ReidError::InvalidConfig(
            "configuration admits no cloth-changing query".into(),
        ));
    }
    Ok(samples)
}

/// Renders the dataset to `out_dir/{train,query,gallery}/` and writes the
/// keypoint file to `out_dir/keypoints.jsonl`.
pub fn generate_toy_dataset(config: &ToyDatasetConfig, out_dir: &Path) -> Result<ToyDataset> {
    let samples = render_toy(config)?;
    for split in Split::ALL {
        fs::create_dir_all(out_dir.join(split.as_str()))?;
    }
    let mut table = KeypointTable::default();
    for s in &samples {
        s.image.save(out_dir.join(s.split.as_str()).join(&s.file_name))?;
        table.insert(s.file_name.clone(), s.points.clone());
    }
    let keypoints_path = out_dir.join("keypoints.jsonl");
    table.save(&keypoints_path)?;
    let train = load_dataset(out_dir, Split::Train, true, None)?;
    let query = load_dataset(out_dir, Split::Query, true, None)?;
    let test_vocab: Vocabularies = query.vocab.clone();
    let gallery = load_dataset(out_dir, Split::Gallery, true, Some(&test_vocab))?;
    Ok(ToyDataset {
        train,
        query,
        gallery,
        keypoints_path,
    })
}
