//! Probabilistic image augmentation and corpus expansion.
//!
//! A pipeline is an ordered list of [`AugmentOp`]s. Each op fires
//! independently with its own probability; geometric ops resample back into
//! the original frame so the output always has the input's shape.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, Manifest, ManifestEntry, Origin, Split};
use crate::image::{load_image, save_image, ImageError, ImageTensor};
use crate::parallel::{map_indexed, try_map_indexed, Exec};
use crate::rng::{streams, SeededRng};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation op: {0}")]
    InvalidOp(String),
    #[error("cannot read source image {path}: {source}")]
    Source {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("cannot write augmented image {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("two source images share the file stem `{0}`; augmented names would collide")]
    DuplicateStem(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// The transform an op performs when it fires, with its magnitude ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Angle uniform in `[-max_degrees, max_degrees]`, reflect padding.
    Rotation { max_degrees: f64 },
    /// Scale uniform in `[min_scale, max_scale]`, center crop back to frame.
    RandomZoom { min_scale: f64, max_scale: f64 },
    FlipHorizontal,
    FlipVertical,
    /// Elastic warp: a `grid_rows x grid_cols` lattice of control nodes spans
    /// the image, each displaced uniformly in `[-magnitude, magnitude]`
    /// pixels per axis; the field is bilinear between nodes.
    RandomDistortion {
        grid_rows: usize,
        grid_cols: usize,
        magnitude: f64,
    },
    /// `v' = clamp(gain * v^gamma)` with gain and gamma drawn per image.
    LightingVariance { gain: [f64; 2], gamma: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub probability: f64,
    #[serde(flatten)]
    pub transform: Transform,
}

impl AugmentOp {
    pub fn new(transform: Transform, probability: f64) -> Result<Self, AugmentError> {
        let op = Self { probability, transform };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidOp(m));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        match self.transform {
            Transform::Rotation { max_degrees } if !(max_degrees >= 0.0 && max_degrees.is_finite()) => {
                bad(format!("rotation max-degrees {max_degrees} must be >= 0"))
            }
            Transform::RandomZoom { min_scale, max_scale }
                if !(min_scale > 0.0 && min_scale <= max_scale && max_scale.is_finite()) =>
            {
                bad(format!("zoom range [{min_scale}, {max_scale}] must satisfy 0 < min <= max"))
            }
            Transform::RandomDistortion { grid_rows, grid_cols, magnitude } => {
                if grid_rows < 2 || grid_cols < 2 {
                    bad(format!("distortion grid {grid_rows}x{grid_cols} needs at least 2x2 nodes"))
                } else if !(magnitude >= 0.0 && magnitude.is_finite()) {
                    bad(format!("distortion magnitude {magnitude} must be >= 0"))
                } else {
                    Ok(())
                }
            }
            Transform::LightingVariance { gain, gamma } => {
                for (name, [lo, hi]) in [("gain", gain), ("gamma", gamma)] {
                    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                        return bad(format!("lighting {name} range [{lo}, {hi}] must be positive and ordered"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Ordered ops; the empty pipeline is the identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentPipeline {
    pub ops: Vec<AugmentOp>,
}

impl AugmentPipeline {
    pub fn new(ops: Vec<AugmentOp>) -> Result<Self, AugmentError> {
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Same ops with every probability set to `p`.
    pub fn with_probability(&self, p: f64) -> Self {
        Self {
            ops: self
                .ops
                .iter()
                .map(|op| AugmentOp {
                    probability: p,
                    transform: op.transform.clone(),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, AugmentError> {
        let p: Self = serde_json::from_str(text).map_err(|e| AugmentError::InvalidOp(e.to_string()))?;
        Self::new(p.ops)
    }
}

/// The six-transform lesion pipeline: rotation 0.5, zoom 0.4, horizontal
/// flip 0.7, vertical flip 0.5, distortion 0.8, lighting 0.5.
pub fn default_pipeline() -> AugmentPipeline {
    AugmentPipeline {
        ops: vec![
            AugmentOp {
                probability: 0.5,
                transform: Transform::Rotation { max_degrees: 45.0 },
            },
            AugmentOp {
                probability: 0.4,
                transform: Transform::RandomZoom {
                    min_scale: 1.0,
                    max_scale: 1.3,
                },
            },
            AugmentOp {
                probability: 0.7,
                transform: Transform::FlipHorizontal,
            },
            AugmentOp {
                probability: 0.5,
                transform: Transform::FlipVertical,
            },
            AugmentOp {
                probability: 0.8,
                transform: Transform::RandomDistortion {
                    grid_rows: 4,
                    grid_cols: 4,
                    magnitude: 8.0,
                },
            },
            AugmentOp {
                probability: 0.5,
                transform: Transform::LightingVariance {
                    gain: [0.7, 1.3],
                    gamma: [0.8, 1.25],
                },
            },
        ],
    }
}

/// Maps a continuous coordinate into `[0, n-1]` by mirroring at the edges.
fn reflect(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let r = x.rem_euclid(period);
    if r > last {
        period - r
    } else {
        r
    }
}

/// Resamples `img` through an inverse map from output to source coordinates.
fn warp<F>(img: &ImageTensor, map: F) -> ImageTensor
where
    F: Fn(usize, usize) -> (f64, f64),
{
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            let (sy, sx) = (reflect(sy, h), reflect(sx, w));
            for ch in 0..c {
                data.push(img.sample_bilinear(sy, sx, ch) as f32);
            }
        }
    }
    ImageTensor::from_raw_clamped(h, w, c, data)
}

fn flip(img: &ImageTensor, horizontal: bool) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            for ch in 0..c {
                data.push(img.get(sy, sx, ch));
            }
        }
    }
    ImageTensor::from_raw_clamped(h, w, c, data)
}

fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (cy, cx) = ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0);
    let (sin, cos) = (degrees * PI / 180.0).sin_cos();
    warp(img, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
    })
}

fn zoom(img: &ImageTensor, scale: f64) -> ImageTensor {
    let (cy, cx) = ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0);
    warp(img, |y, x| (cy + (y as f64 - cy) / scale, cx + (x as f64 - cx) / scale))
}

fn distort(img: &ImageTensor, rows: usize, cols: usize, magnitude: f64, rng: &mut SeededRng) -> ImageTensor {
    let nodes: Vec<(f64, f64)> = (0..rows * cols)
        .map(|_| (rng.uniform(-magnitude, magnitude), rng.uniform(-magnitude, magnitude)))
        .collect();
    if magnitude == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let to_grid = |p: usize, n: usize, k: usize| {
        if n == 1 {
            0.0
        } else {
            p as f64 * (k - 1) as f64 / (n - 1) as f64
        }
    };
    warp(img, |y, x| {
        let gy = to_grid(y, h, rows);
        let gx = to_grid(x, w, cols);
        let (r0, c0) = ((gy.floor() as usize).min(rows - 2), (gx.floor() as usize).min(cols - 2));
        let (fy, fx) = (gy - r0 as f64, gx - c0 as f64);
        let node = |r: usize, c: usize| nodes[r * cols + c];
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(node(r0, c0), node(r0, c0 + 1), fx);
        let bottom = lerp(node(r0 + 1, c0), node(r0 + 1, c0 + 1), fx);
        let (dy, dx) = lerp(top, bottom, fy);
        (y as f64 + dy, x as f64 + dx)
    })
}

fn lighting(img: &ImageTensor, gain: f64, gamma: f64) -> ImageTensor {
    let data = img
        .data()
        .iter()
        .map(|&v| (gain * f64::from(v).powf(gamma)) as f32)
        .collect();
    ImageTensor::from_raw_clamped(img.height(), img.width(), img.channels(), data)
}

/// Applies one op: a Bernoulli draw decides whether it fires, then its
/// magnitudes are drawn from the same stream.
pub fn apply_op(op: &AugmentOp, img: &ImageTensor, rng: &mut SeededRng) -> ImageTensor {
    if !rng.bernoulli(op.probability) {
        return img.clone();
    }
    match op.transform {
        Transform::Rotation { max_degrees } => {
            let angle = rng.uniform(-max_degrees, max_degrees);
            if angle == 0.0 {
                img.clone()
            } else {
                rotate(img, angle)
            }
        }
        Transform::RandomZoom { min_scale, max_scale } => {
            let s = rng.uniform(min_scale, max_scale);
            if s == 1.0 {
                img.clone()
            } else {
                zoom(img, s)
            }
        }
        Transform::FlipHorizontal => flip(img, true),
        Transform::FlipVertical => flip(img, false),
        Transform::RandomDistortion {
            grid_rows,
            grid_cols,
            magnitude,
        } => distort(img, grid_rows.max(2), grid_cols.max(2), magnitude, rng),
        Transform::LightingVariance { gain, gamma } => {
            let g = rng.uniform(gain[0], gain[1]);
            let gm = rng.uniform(gamma[0], gamma[1]);
            lighting(img, g, gm)
        }
    }
}

/// Runs the ops in order; op `i` draws from `rng.child(i)`.
pub fn run_pipeline(p: &AugmentPipeline, img: &ImageTensor, rng: &SeededRng) -> ImageTensor {
    p.ops.iter().enumerate().fold(img.clone(), |acc, (i, op)| {
        let mut op_rng = rng.child(i as u64);
        apply_op(op, &acc, &mut op_rng)
    })
}

/// The stream for augmented child `k` of the record at `record_index`.
pub fn child_stream(seed: u64, record_index: usize, k: usize) -> SeededRng {
    SeededRng::new(seed, streams::AUGMENT)
        .child(record_index as u64)
        .child(k as u64)
}

/// In-memory expansion: `factor` augmented copies of every image, grouped by
/// source. Image `i` plays the role of record index `i`.
pub fn augment_images(images: &[ImageTensor], factor: usize, p: &AugmentPipeline, seed: u64, exec: Exec) -> Vec<ImageTensor> {
    map_indexed(exec, images.len() * factor, |j| {
        let (i, k) = (j / factor, j % factor);
        run_pipeline(p, &images[i], &child_stream(seed, i, k))
    })
}

pub fn augmented_name(parent: &Path, k: usize) -> String {
    let stem = parent.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    format!("{stem}_aug{k}.png")
}

/// Expands every original entry of `split` with `factor` augmented children.
///
/// Child `k` of the entry at manifest index `i` is rendered with
/// [`child_stream`]`(seed, i, k)` and written to
/// `out_dir/<parent-stem>_aug<k>.png`. Children inherit class and split,
/// carry `origin = augmented` and the parent's path, and are appended after
/// the existing entries in parent order. Output is independent of `exec`.
pub fn augment_corpus(
    m: &Manifest,
    split: Split,
    factor: usize,
    p: &AugmentPipeline,
    seed: u64,
    out_dir: &Path,
    exec: Exec,
) -> Result<Manifest, AugmentError> {
    let parents: Vec<usize> = m
        .in_split(split)
        .filter(|(_, e)| e.origin == Origin::Original)
        .map(|(i, _)| i)
        .collect();
    let mut out = m.clone();
    let stamp = format!("augment_corpus split={split} factor={factor} seed={seed} ops={}", p.len());
    if factor == 0 || parents.is_empty() {
        out.stamp(stamp);
        return Ok(out);
    }
    let mut stems: HashMap<String, usize> = HashMap::new();
    for &i in &parents {
        let name = augmented_name(Path::new(&m.entries()[i].path), 0);
        if stems.insert(name.clone(), i).is_some() {
            return Err(AugmentError::DuplicateStem(
                Path::new(&m.entries()[i].path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or(name),
            ));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DatasetError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let out_abs = std::path::absolute(out_dir).unwrap_or_else(|_| out_dir.to_path_buf());
    let base_abs = m.base_dir().map(|b| std::path::absolute(b).unwrap_or_else(|_| b.to_path_buf()));
    let children = try_map_indexed(exec, parents.len(), |j| {
        let idx = parents[j];
        let parent = &m.entries()[idx];
        let src = m.resolve(&parent.path);
        let img = load_image(&src).map_err(|source| AugmentError::Source {
            path: src.clone(),
            source,
        })?;
        (0..factor)
            .map(|k| {
                let aug = run_pipeline(p, &img, &child_stream(seed, idx, k));
                let name = augmented_name(Path::new(&parent.path), k);
                let dest = out_abs.join(&name);
                save_image(&aug, &dest).map_err(|source| AugmentError::Write {
                    path: dest.clone(),
                    source,
                })?;
                let rel = match &base_abs {
                    Some(b) => dest.strip_prefix(b).map(Path::to_path_buf).unwrap_or(dest.clone()),
                    None => dest.clone(),
                };
                Ok(ManifestEntry {
                    path: rel.to_string_lossy().into_owned(),
                    class_id: parent.class_id,
                    class_name: parent.class_name.clone(),
                    split: parent.split,
                    origin: Origin::Augmented,
                    parent: Some(parent.path.clone()),
                    source_tag: parent.source_tag.clone(),
                })
            })
            .collect::<Result<Vec<_>, AugmentError>>()
    })?;
    for e in children.into_iter().flatten() {
        out.push(e)?;
    }
    out.stamp(stamp);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img2x2(a: f32, b: f32, c: f32, d: f32) -> ImageTensor {
        ImageTensor::new(2, 2, 1, vec![a, b, c, d]).unwrap()
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut r = SeededRng::new(seed, 99);
        ImageTensor::new(h, w, c, (0..h * w * c).map(|_| r.unit() as f32).collect()).unwrap()
    }

    fn always(t: Transform) -> AugmentOp {
        AugmentOp::new(t, 1.0).unwrap()
    }

    #[test]
    fn default_pipeline_matches_table() {
        let p = default_pipeline();
        assert_eq!(p.len(), 6);
        let probs: Vec<f64> = p.ops.iter().map(|o| o.probability).collect();
        assert_eq!(probs, vec![0.5, 0.4, 0.7, 0.5, 0.8, 0.5]);
        assert!(matches!(p.ops[0].transform, Transform::Rotation { .. }));
        assert!(matches!(p.ops[5].transform, Transform::LightingVariance { .. }));
        AugmentPipeline::new(p.ops).unwrap();
    }

    #[test]
    fn zero_probability_pipeline_is_identity() {
        let p = default_pipeline().with_probability(0.0);
        let img = random_image(9, 7, 3, 1);
        for s in 0..20 {
            assert_eq!(run_pipeline(&p, &img, &SeededRng::new(s, 0)), img);
        }
    }

    #[test]
    fn horizontal_flip_reflects_and_is_involution() {
        let op = always(Transform::FlipHorizontal);
        let img = img2x2(0.1, 0.2, 0.3, 0.4);
        let mut r = SeededRng::new(0, 0);
        let once = apply_op(&op, &img, &mut r);
        assert_eq!(once, img2x2(0.2, 0.1, 0.4, 0.3));
        assert_eq!(apply_op(&op, &once, &mut r), img);
        let p = AugmentPipeline::new(vec![op.clone(), op]).unwrap();
        assert_eq!(run_pipeline(&p, &img, &SeededRng::new(5, 5)), img);
    }

    #[test]
    fn vertical_flip() {
        let img = img2x2(0.1, 0.2, 0.3, 0.4);
        let out = apply_op(&always(Transform::FlipVertical), &img, &mut SeededRng::new(0, 0));
        assert_eq!(out, img2x2(0.3, 0.4, 0.1, 0.2));
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let img = random_image(11, 8, 3, 2);
        let out = apply_op(&always(Transform::Rotation { max_degrees: 0.0 }), &img, &mut SeededRng::new(1, 1));
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Going through the warp path with a zero angle is exact as well.
        let warped = rotate(&img, 0.0);
        for (a, b) in warped.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_by_180_reverses_pixels() {
        let img = random_image(5, 4, 1, 3);
        let out = rotate(&img, 180.0);
        for y in 0..5 {
            for x in 0..4 {
                assert!((out.get(y, x, 0) - img.get(4 - y, 3 - x, 0)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn lighting_gain_on_constant_image() {
        for (v, g) in [(0.5f32, 1.2f64), (0.9, 1.3), (0.2, 0.7)] {
            let img = ImageTensor::filled(4, 4, 3, v).unwrap();
            let op = always(Transform::LightingVariance {
                gain: [g, g],
                gamma: [1.0, 1.0],
            });
            let out = apply_op(&op, &img, &mut SeededRng::new(0, 0));
            let expected = ((f64::from(v) * g) as f32).clamp(0.0, 1.0);
            assert!(out.data().iter().all(|&o| (o - expected).abs() < 1e-6), "v={v} g={g}");
        }
    }

    #[test]
    fn zoom_and_distortion_degenerate_to_identity() {
        let img = random_image(6, 6, 1, 4);
        let z = always(Transform::RandomZoom {
            min_scale: 1.0,
            max_scale: 1.0,
        });
        assert_eq!(apply_op(&z, &img, &mut SeededRng::new(0, 0)), img);
        let d = always(Transform::RandomDistortion {
            grid_rows: 4,
            grid_cols: 4,
            magnitude: 0.0,
        });
        assert_eq!(apply_op(&d, &img, &mut SeededRng::new(0, 0)), img);
    }

    #[test]
    fn distortion_moves_pixels_but_keeps_constants() {
        let img = random_image(16, 16, 1, 5);
        let d = always(Transform::RandomDistortion {
            grid_rows: 4,
            grid_cols: 4,
            magnitude: 3.0,
        });
        assert_ne!(apply_op(&d, &img, &mut SeededRng::new(0, 0)), img);
        let flat = ImageTensor::filled(16, 16, 3, 0.3).unwrap();
        let out = apply_op(&d, &flat, &mut SeededRng::new(0, 0));
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn invalid_ops_rejected() {
        assert!(AugmentOp::new(Transform::FlipVertical, 1.5).is_err());
        assert!(AugmentOp::new(Transform::RandomZoom { min_scale: 1.3, max_scale: 1.0 }, 0.5).is_err());
        assert!(AugmentOp::new(Transform::RandomZoom { min_scale: 0.0, max_scale: 1.0 }, 0.5).is_err());
        assert!(AugmentOp::new(Transform::Rotation { max_degrees: -1.0 }, 0.5).is_err());
        assert!(AugmentOp::new(
            Transform::LightingVariance {
                gain: [0.0, 1.0],
                gamma: [1.0, 1.0]
            },
            0.5
        )
        .is_err());
        assert!(AugmentOp::new(
            Transform::RandomDistortion {
                grid_rows: 1,
                grid_cols: 4,
                magnitude: 1.0
            },
            0.5
        )
        .is_err());
    }

    #[test]
    fn pipeline_json_round_trip() {
        let p = default_pipeline();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"kind\":\"random_distortion\""));
        assert_eq!(AugmentPipeline::from_json(&text).unwrap(), p);
    }

    #[test]
    fn reflect_mirrors_at_edges() {
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
        assert_eq!(reflect(2.5, 5), 2.5);
        assert_eq!(reflect(-7.0, 1), 0.0);
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let img = random_image(3, 3, 3, 9);
        assert_eq!(run_pipeline(&AugmentPipeline::default(), &img, &SeededRng::new(1, 2)), img);
    }

    #[test]
    fn parallel_and_sequential_expansion_agree() {
        let imgs: Vec<_> = (0..4).map(|i| random_image(12, 12, 3, i)).collect();
        let p = default_pipeline();
        let a = augment_images(&imgs, 3, &p, 11, Exec::Sequential);
        let b = augment_images(&imgs, 3, &p, 11, Exec::Parallel);
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
    }
}
