//! GradCAM heat-maps, three-panel overlays and example mining.

use std::sync::OnceLock;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::ManifestEntry;
use crate::image::{normalize, resize_bilinear, ImageError, ImageTensor, NormalizationSpec};
use crate::metrics::argmax;
use crate::model::{softmax, Mode, ModelError, Network, Tensor};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("target class {target} out of range for {classes} classes")]
    Class { target: usize, classes: usize },
    #[error("heat-map is {map_h}x{map_w}, image is {img_h}x{img_w}")]
    Dims { map_h: usize, map_w: usize, img_h: usize, img_w: usize },
    #[error("blend fraction {0} outside [0, 1]")]
    Alpha(f64),
    #[error("{what} has {got} entries, expected {expected}")]
    Length { what: &'static str, got: usize, expected: usize },
}

/// Non-negative map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    fn normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
        self
    }

    /// Bilinear resize (pixel-centre aligned), renormalized so the maximum
    /// stays exactly 1 when the map is non-zero.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Self, ExplainError> {
        let img = ImageTensor::new(self.height, self.width, 1, self.values.iter().map(|&v| v as f32).collect())?;
        let up = resize_bilinear(&img, height, width)?;
        Ok(Self {
            height,
            width,
            values: up.data().iter().map(|&v| f64::from(v)).collect(),
        }
        .normalized())
    }
}

/// GradCAM from one sample's activations and gradients, both `[c, h, w]`:
/// `α_k` is the spatial mean of gradient channel `k`, the map is
/// `max(0, Σ_k α_k·A_k)` divided by its maximum (all-zero maps stay zero).
pub fn gradcam_from_maps(acts: &[f64], grads: &[f64], channels: usize, height: usize, width: usize) -> HeatMap {
    let hw = height * width;
    debug_assert_eq!(acts.len(), channels * hw);
    debug_assert_eq!(grads.len(), channels * hw);
    let mut values = vec![0.0; hw];
    for k in 0..channels {
        let g = &grads[k * hw..(k + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (v, a) in values.iter_mut().zip(&acts[k * hw..(k + 1) * hw]) {
            *v += alpha * a;
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    HeatMap { height, width, values }.normalized()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCam {
    pub layer: String,
    pub target: usize,
    /// Map at the layer's resolution.
    pub coarse: HeatMap,
    /// Map upsampled to the network input size.
    pub map: HeatMap,
    /// Eval-mode class probabilities for the image.
    pub probs: Vec<f64>,
}

/// Converts an image to the network's input tensor, resizing and converting
/// channels as needed.
pub fn image_to_input(net: &Network, img: &ImageTensor) -> Result<(ImageTensor, Tensor), ExplainError> {
    let d = net.config().input;
    let img = if img.channels() != d.channels { img.with_channels(d.channels)? } else { img.clone() };
    let img = if (img.height(), img.width()) != (d.height, d.width) {
        resize_bilinear(&img, d.height, d.width)?
    } else {
        img
    };
    let x = normalize(&img, &NormalizationSpec::symmetric(d.channels))?.to_chw();
    let t = Tensor::new(vec![1, d.channels, d.height, d.width], x)?;
    Ok((img, t))
}

/// GradCAM for `target` on `layer` (the last block when `None`), using the
/// pre-softmax score and eval-mode batch norm.
pub fn gradcam(net: &Network, img: &ImageTensor, target: usize, layer: Option<&str>) -> Result<GradCam, ExplainError> {
    let classes = net.config().num_classes;
    if target >= classes {
        return Err(ExplainError::Class { target, classes });
    }
    let layer = layer.unwrap_or(net.default_cam_layer()).to_string();
    let (_, x) = image_to_input(net, img)?;
    let pass = net.forward(&x, Mode::Eval)?;
    let mut onehot = Tensor::zeros(vec![1, classes]);
    onehot.data_mut()[target] = 1.0;
    let (_, grads) = net.backward_capture(&pass.cache, &onehot, &layer)?;
    let acts = net.activation(&pass.cache, &layer)?;
    let (_, c, h, w) = acts.dims4();
    let coarse = gradcam_from_maps(acts.data(), grads.data(), c, h, w);
    let d = net.config().input;
    let map = coarse.upsample(d.height, d.width)?;
    Ok(GradCam {
        layer,
        target,
        coarse,
        map,
        probs: softmax(&pass.logits).data().to_vec(),
    })
}

fn colormap_table() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0u8; 3]; 256];
        let text = include_str!("../data/colormap_bluered.txt");
        let mut n = 0;
        for (row, line) in t.iter_mut().zip(text.lines()) {
            for (c, tok) in row.iter_mut().zip(line.split_whitespace()) {
                *c = tok.parse().expect("colormap entries are bytes");
            }
            n += 1;
        }
        assert_eq!(n, 256, "colormap must have 256 entries");
        t
    })
}

/// Colour for a heat value in `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let i = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    colormap_table()[i]
}

/// Original, blend and colour-mapped heat-map side by side (RGB, 3× width).
pub fn overlay(img: &ImageTensor, map: &HeatMap, alpha: f64) -> Result<ImageTensor, ExplainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ExplainError::Alpha(alpha));
    }
    if (map.height, map.width) != (img.height(), img.width()) {
        return Err(ExplainError::Dims {
            map_h: map.height,
            map_w: map.width,
            img_h: img.height(),
            img_w: img.width(),
        });
    }
    let rgb = if img.channels() == 3 { img.clone() } else { img.with_channels(3)? };
    let (h, w) = (img.height(), img.width());
    let a = alpha as f32;
    let mut out = vec![0.0f32; h * w * 3 * 3];
    for y in 0..h {
        for x in 0..w {
            let cm = colormap(map.values[y * w + x]);
            for c in 0..3 {
                let o = rgb.get(y, x, c);
                let m = f32::from(cm[c]) / 255.0;
                let row = y * 3 * w;
                out[(row + x) * 3 + c] = o;
                out[(row + w + x) * 3 + c] = (1.0 - a) * o + a * m;
                out[(row + 2 * w + x) * 3 + c] = m;
            }
        }
    }
    Ok(ImageTensor::new(h, 3 * w, 3, out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    MostWrong,
    MostCorrect,
}

impl std::str::FromStr for RankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "most-wrong" => Ok(RankMode::MostWrong),
            "most-correct" => Ok(RankMode::MostCorrect),
            other => Err(format!("unknown mode `{other}` (expected most-wrong or most-correct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedExample {
    /// Position in the scored set (and its manifest entry list).
    pub index: usize,
    pub path: Option<String>,
    pub predicted: usize,
    pub truth: usize,
    /// Probability of the predicted class.
    pub confidence: f64,
}

/// Misclassified (`MostWrong`) or correctly classified (`MostCorrect`)
/// examples by descending confidence, ties in input order, at most `n`.
pub fn rank_examples(
    probs: &[Vec<f64>],
    labels: &[usize],
    entries: Option<&[ManifestEntry]>,
    mode: RankMode,
    n: usize,
) -> Result<Vec<RankedExample>, ExplainError> {
    if labels.len() != probs.len() {
        return Err(ExplainError::Length {
            what: "labels",
            got: labels.len(),
            expected: probs.len(),
        });
    }
    if let Some(e) = entries.filter(|e| e.len() != probs.len()) {
        return Err(ExplainError::Length {
            what: "entries",
            got: e.len(),
            expected: probs.len(),
        });
    }
    let mut picked: Vec<RankedExample> = probs
        .iter()
        .zip(labels)
        .enumerate()
        .filter_map(|(i, (row, &truth))| {
            let predicted = argmax(row);
            let wrong = predicted != truth;
            (wrong == (mode == RankMode::MostWrong)).then(|| RankedExample {
                index: i,
                path: entries.map(|e| e[i].path.clone()),
                predicted,
                truth,
                confidence: row[predicted].clamp(0.0, 1.0),
            })
        })
        .collect();
    picked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    picked.truncate(n);
    Ok(picked)
}

/// Sidecar record written next to each rendered explanation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplanationRecord {
    pub rank: usize,
    pub source: Option<String>,
    pub layer: String,
    pub true_class: String,
    pub predicted_class: String,
    pub confidence: f64,
    pub target_class: String,
}
