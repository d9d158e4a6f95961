//! Residual network descriptions and their parameter layout.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub width: usize,
    /// 3x3 stride-2 max pooling after the stem activation.
    #[serde(default)]
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions plus shortcut.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (x4) plus shortcut.
    Bottleneck,
    /// A single 3x3 conv-bn-relu unit without shortcut, for toy networks.
    Plain,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Bottleneck => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block: BlockKind,
    pub blocks: usize,
    pub width: usize,
    /// Stride of the first block in the stage.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input: InputDims,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::DenseWeight)
    }
}

/// One named tensor in the network's parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Index of the unit (stem = 0, blocks in order, head last) that owns it.
    pub unit: usize,
    /// Learning-rate multiplier applied unless the solver overrides it.
    pub default_lr_mult: f64,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_head(&self) -> bool {
        self.name.starts_with(HEAD_PREFIX)
    }
}

pub const HEAD_PREFIX: &str = "head.";
pub const HEAD_LR_MULT: f64 = 10.0;

/// Output size of a convolution or pooling window with `pad = kernel / 2`.
pub fn conv_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    let pad = kernel / 2;
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvLayout {
    pub name: String,
    pub weight: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BnLayout {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvBn {
    pub conv: ConvLayout,
    pub bn: BnLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub name: String,
    pub kind: BlockKind,
    pub convs: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum UnitLayout {
    Stem { conv: ConvBn, max_pool: bool },
    Block(BlockLayout),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadLayout {
    pub weight: usize,
    pub bias: usize,
    pub in_features: usize,
    pub classes: usize,
}

/// Compiled view of a config: parameter table plus unit wiring.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub units: Vec<UnitLayout>,
    pub head: HeadLayout,
    /// Activation names that are conv feature maps, with their unit index.
    pub feature_maps: Vec<(String, usize)>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    unit: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        let default_lr_mult = if name.starts_with(HEAD_PREFIX) { HEAD_LR_MULT } else { 1.0 };
        self.specs.push(ParamSpec {
            name,
            shape,
            kind,
            unit: self.unit,
            default_lr_mult,
        });
        self.specs.len() - 1
    }

    fn conv_bn(&mut self, conv_name: &str, bn_name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> ConvBn {
        let weight = self.add(format!("{conv_name}.weight"), vec![out_c, in_c, kernel, kernel], ParamKind::ConvWeight);
        let gamma = self.add(format!("{bn_name}.gamma"), vec![out_c], ParamKind::BnGamma);
        let beta = self.add(format!("{bn_name}.beta"), vec![out_c], ParamKind::BnBeta);
        let mean = self.add(format!("{bn_name}.running_mean"), vec![out_c], ParamKind::BnRunningMean);
        let var = self.add(format!("{bn_name}.running_var"), vec![out_c], ParamKind::BnRunningVar);
        ConvBn {
            conv: ConvLayout {
                name: conv_name.to_string(),
                weight,
                in_c,
                out_c,
                kernel,
                stride,
            },
            bn: BnLayout {
                gamma,
                beta,
                mean,
                var,
                channels: out_c,
            },
        }
    }
}

impl NetworkConfig {
    /// Desk-scale preset: 3x3 stem of width 16, three stages of two basic
    /// blocks at widths 16/32/64 with strides 1/2/2.
    pub fn resnet_tiny(input: InputDims, num_classes: usize) -> Self {
        Self {
            input,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                width: 16,
                max_pool: false,
            },
            stages: vec![
                StageSpec { block: BlockKind::Basic, blocks: 2, width: 16, stride: 1 },
                StageSpec { block: BlockKind::Basic, blocks: 2, width: 32, stride: 2 },
                StageSpec { block: BlockKind::Basic, blocks: 2, width: 64, stride: 2 },
            ],
            num_classes,
        }
    }

    /// A two-stage, one-block-per-stage network for quick experiments.
    pub fn resnet_toy(input: InputDims, num_classes: usize) -> Self {
        Self {
            input,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                width: 8,
                max_pool: false,
            },
            stages: vec![
                StageSpec { block: BlockKind::Basic, blocks: 1, width: 8, stride: 2 },
                StageSpec { block: BlockKind::Basic, blocks: 1, width: 16, stride: 2 },
            ],
            num_classes,
        }
    }

    /// The 152-layer bottleneck layout (3/8/36/3 blocks, 7x7 stem with
    /// pooling). Intended for shape validation; no weights ship with it.
    pub fn resnet152_shape(input: InputDims, num_classes: usize) -> Self {
        let stage = |blocks, width, stride| StageSpec {
            block: BlockKind::Bottleneck,
            blocks,
            width,
            stride,
        };
        Self {
            input,
            stem: StemSpec {
                kernel: 7,
                stride: 2,
                width: 64,
                max_pool: true,
            },
            stages: vec![stage(3, 64, 1), stage(8, 128, 2), stage(36, 256, 2), stage(3, 512, 2)],
            num_classes,
        }
    }

    pub fn preset(name: &str, input: InputDims, num_classes: usize) -> Result<Self, ModelError> {
        match name {
            "resnet-tiny" => Ok(Self::resnet_tiny(input, num_classes)),
            "resnet-toy" => Ok(Self::resnet_toy(input, num_classes)),
            "resnet-152-shape" => Ok(Self::resnet152_shape(input, num_classes)),
            other => Err(ModelError::Config(format!(
                "unknown preset `{other}` (expected resnet-tiny, resnet-toy or resnet-152-shape)"
            ))),
        }
    }

    /// Channel width entering the dense head.
    pub fn feature_width(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem.width, |s| s.width * s.block.expansion())
    }

    /// Spatial size after every unit, `(height, width)`, stem first.
    pub fn spatial_dims(&self) -> Result<Vec<(usize, usize)>, ModelError> {
        let err = |what: String| ModelError::Config(format!("spatial size collapses at {what}"));
        let mut h = conv_out(self.input.height, self.stem.kernel, self.stem.stride).ok_or_else(|| err("stem".into()))?;
        let mut w = conv_out(self.input.width, self.stem.kernel, self.stem.stride).ok_or_else(|| err("stem".into()))?;
        if self.stem.max_pool {
            h = conv_out(h, 3, 2).ok_or_else(|| err("stem pool".into()))?;
            w = conv_out(w, 3, 2).ok_or_else(|| err("stem pool".into()))?;
        }
        let mut dims = vec![(h, w)];
        for (si, st) in self.stages.iter().enumerate() {
            for b in 0..st.blocks {
                let s = if b == 0 { st.stride } else { 1 };
                h = conv_out(h, 3, s).ok_or_else(|| err(format!("stage{}", si + 1)))?;
                w = conv_out(w, 3, s).ok_or_else(|| err(format!("stage{}", si + 1)))?;
                dims.push((h, w));
            }
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            return bad("input dims must be positive");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.stem.kernel == 0 || self.stem.stride == 0 || self.stem.width == 0 {
            return bad("stem kernel, stride and width must be positive");
        }
        for st in &self.stages {
            if st.blocks == 0 || st.width == 0 || st.stride == 0 {
                return bad("stage blocks, width and stride must be positive");
            }
        }
        self.spatial_dims()?;
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).into()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layout().specs
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn learnable_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| s.kind.learnable())
            .map(ParamSpec::numel)
            .sum()
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut b = Builder {
            specs: Vec::new(),
            unit: 0,
        };
        let mut units = Vec::new();
        let mut feature_maps = vec![("stem.conv".to_string(), 0), ("stem".to_string(), 0)];
        let stem = b.conv_bn("stem.conv", "stem.bn", self.input.channels, self.stem.width, self.stem.kernel, self.stem.stride);
        units.push(UnitLayout::Stem {
            conv: stem,
            max_pool: self.stem.max_pool,
        });
        let mut in_c = self.stem.width;
        for (si, st) in self.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                b.unit = units.len();
                let name = format!("stage{}.block{}", si + 1, bi);
                let stride = if bi == 0 { st.stride } else { 1 };
                let out_c = st.width * st.block.expansion();
                let p = |s: &str| format!("{name}.{s}");
                let convs = match st.block {
                    BlockKind::Basic => vec![
                        b.conv_bn(&p("conv1"), &p("bn1"), in_c, st.width, 3, stride),
                        b.conv_bn(&p("conv2"), &p("bn2"), st.width, st.width, 3, 1),
                    ],
                    BlockKind::Bottleneck => vec![
                        b.conv_bn(&p("conv1"), &p("bn1"), in_c, st.width, 1, 1),
                        b.conv_bn(&p("conv2"), &p("bn2"), st.width, st.width, 3, stride),
                        b.conv_bn(&p("conv3"), &p("bn3"), st.width, out_c, 1, 1),
                    ],
                    BlockKind::Plain => vec![b.conv_bn(&p("conv1"), &p("bn1"), in_c, st.width, 3, stride)],
                };
                let shortcut = (st.block != BlockKind::Plain && (stride != 1 || in_c != out_c))
                    .then(|| b.conv_bn(&p("shortcut.conv"), &p("shortcut.bn"), in_c, out_c, 1, stride));
                for c in convs.iter().chain(shortcut.iter()) {
                    feature_maps.push((c.conv.name.clone(), units.len()));
                }
                feature_maps.push((name.clone(), units.len()));
                units.push(UnitLayout::Block(BlockLayout {
                    name,
                    kind: st.block,
                    convs,
                    shortcut,
                }));
                in_c = out_c;
            }
        }
        b.unit = units.len();
        let weight = b.add("head.fc.weight".into(), vec![self.num_classes, in_c], ParamKind::DenseWeight);
        let bias = b.add("head.fc.bias".into(), vec![self.num_classes], ParamKind::DenseBias);
        Layout {
            specs: b.specs,
            units,
            head: HeadLayout {
                weight,
                bias,
                in_features: in_c,
                classes: self.num_classes,
            },
            feature_maps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: usize, c: usize) -> InputDims {
        InputDims {
            height: h,
            width: h,
            channels: c,
        }
    }

    #[test]
    fn tiny_preset_layout() {
        let cfg = NetworkConfig::resnet_tiny(dims(64, 3), 12);
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_width(), 64);
        assert_eq!(cfg.spatial_dims().unwrap().last(), Some(&(16, 16)));
        let specs = cfg.param_specs();
        let fc = specs.iter().find(|s| s.name == "head.fc.weight").unwrap();
        assert_eq!(fc.shape, vec![12, 64]);
        assert_eq!(fc.default_lr_mult, 10.0);
        // Projection shortcuts only where the shape changes.
        assert!(specs.iter().any(|s| s.name == "stage2.block0.shortcut.conv.weight"));
        assert!(!specs.iter().any(|s| s.name == "stage1.block0.shortcut.conv.weight"));
        assert!(!specs.iter().any(|s| s.name == "stage2.block1.shortcut.conv.weight"));
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn resnet152_shape_matches_reference_parameter_count() {
        let cfg = NetworkConfig::resnet152_shape(dims(224, 3), 1000);
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_width(), 2048);
        assert_eq!(cfg.spatial_dims().unwrap().last(), Some(&(7, 7)));
        // Published learnable-parameter count of the 152-layer model.
        assert_eq!(cfg.learnable_count(), 60_192_808);
        let convs = cfg.param_specs().iter().filter(|s| s.kind == ParamKind::ConvWeight).count();
        // 1 stem + 3 per bottleneck x 50 + 4 projections.
        assert_eq!(convs, 1 + 150 + 4);
        let head = NetworkConfig::resnet152_shape(dims(224, 3), 12);
        let fc = head.param_specs().into_iter().find(|s| s.name == "head.fc.weight").unwrap();
        assert_eq!(fc.shape, vec![12, 2048]);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = NetworkConfig::resnet_tiny(dims(8, 1), 2);
        cfg.input.height = 0;
        assert!(cfg.validate().is_err());
        // Same-padding keeps every map at least 1x1, however deep.
        let mut cfg = NetworkConfig::resnet_tiny(dims(1, 1), 2);
        cfg.stem.kernel = 11;
        assert_eq!(cfg.spatial_dims().unwrap().last(), Some(&(1, 1)));
        let mut cfg = NetworkConfig::resnet_tiny(dims(8, 1), 0);
        assert!(cfg.validate().is_err());
        cfg.num_classes = 2;
        cfg.stages[0].blocks = 0;
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::preset("vgg", dims(8, 1), 2).is_err());
    }

    #[test]
    fn conv_out_sizes() {
        assert_eq!(conv_out(8, 3, 1), Some(8));
        assert_eq!(conv_out(8, 3, 2), Some(4));
        assert_eq!(conv_out(7, 3, 2), Some(4));
        assert_eq!(conv_out(224, 7, 2), Some(112));
        assert_eq!(conv_out(1, 1, 2), Some(1));
    }

    #[test]
    fn digest_tracks_config() {
        let a = NetworkConfig::resnet_tiny(dims(8, 1), 2);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.num_classes = 3;
        assert_ne!(a.digest(), b.digest());
    }
}
