//! Declarative description of the encoder / merger / decoder networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels of every input plane: LDR RGB followed by HDR-domain RGB.
pub const INPUT_CHANNELS: usize = 6;
pub const OUTPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unet,
    Resnet,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Unet => 0,
            Variant::Resnet => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Unet),
            1 => Some(Variant::Resnet),
            _ => None,
        }
    }

    /// Number of stride-2 encoding layers, including the two per-exposure ones.
    pub fn encoder_depth(self) -> usize {
        match self {
            Variant::Unet => 8,
            Variant::Resnet => 3,
        }
    }

    /// Input sides must be multiples of this.
    pub fn divisor(self) -> usize {
        1 << self.encoder_depth()
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Variant::Unet),
            "resnet" => Ok(Variant::Resnet),
            other => Err(Error::Parameter(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Unet => "unet",
            Variant::Resnet => "resnet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Deconv,
    BatchNorm,
    LeakyRelu,
    Relu,
    Sigmoid,
    ConcatSkip,
    ResidualBlock,
}

/// Spatial scale factor of a layer: 2 halves, `Half` (1/2) doubles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stride {
    Two,
    Half,
    One,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: Stride,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder level concatenated by a `ConcatSkip`.
    pub skip_from: Option<usize>,
}

impl LayerSpec {
    fn conv(kernel: usize, stride: Stride, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind: if stride == Stride::Half {
                LayerKind::Deconv
            } else {
                LayerKind::Conv
            },
            kernel,
            stride,
            in_channels,
            out_channels,
            skip_from: None,
        }
    }

    fn pointwise(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            kernel: 1,
            stride: Stride::One,
            in_channels: channels,
            out_channels: channels,
            skip_from: None,
        }
    }

    fn residual(kernel: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ResidualBlock,
            kernel,
            ..Self::pointwise(LayerKind::ResidualBlock, channels)
        }
    }

    fn concat(in_channels: usize, skip_channels: usize, level: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ConcatSkip,
            kernel: 1,
            stride: Stride::One,
            in_channels,
            out_channels: in_channels + skip_channels,
            skip_from: Some(level),
        }
    }

    /// Applies this layer's shape rule to `(c, h, w)`.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        debug_assert_eq!(c, self.in_channels);
        let (h, w) = match self.stride {
            Stride::Two => (h.div_ceil(2), w.div_ceil(2)),
            Stride::Half => (h * 2, w * 2),
            Stride::One => (h, w),
        };
        (self.out_channels, h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Encoder level this stage's output is recorded as, for skip connections.
    pub level: Option<usize>,
}

impl StageSpec {
    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }
}

/// Width and depth knobs. The defaults give the full-size networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetOptions {
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub residual_blocks: usize,
    pub residual_kernel: usize,
    pub init_std: f64,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            base_channels: 64,
            max_channels: 512,
            kernel: 5,
            residual_blocks: 9,
            residual_kernel: 3,
            init_std: 0.02,
        }
    }
}

impl NetOptions {
    /// Default geometry with every channel count divided by `divisor`.
    pub fn reduced(divisor: usize) -> Self {
        let d = NetOptions::default();
        NetOptions {
            base_channels: (d.base_channels / divisor).max(1),
            max_channels: (d.max_channels / divisor).max(1),
            ..d
        }
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Parameter(format!(
                "invalid channel range {}..{}",
                self.base_channels, self.max_channels
            )));
        }
        if self.kernel.is_multiple_of(2) || self.residual_kernel.is_multiple_of(2) {
            return Err(Error::Parameter("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    /// Per-branch channels at encoder level `level`: doubling from the base, capped.
    fn level_channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(16)).min(self.max_channels)
    }
}

/// Full network description: per-exposure encoder stages (shared structure,
/// separate weights), merger stages and decoder stages ending in the output
/// layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub k_inputs: usize,
    pub patch: usize,
    pub options: NetOptions,
    pub encoder: Vec<StageSpec>,
    pub merger: Vec<StageSpec>,
    pub decoder: Vec<StageSpec>,
}

pub fn build_unet(k: usize, patch: usize) -> Result<NetworkSpec> {
    NetworkSpec::build(Variant::Unet, k, patch, NetOptions::default())
}

pub fn build_resnet(k: usize, patch: usize) -> Result<NetworkSpec> {
    NetworkSpec::build(Variant::Resnet, k, patch, NetOptions::default())
}

impl NetworkSpec {
    pub fn build(variant: Variant, k: usize, patch: usize, options: NetOptions) -> Result<Self> {
        options.validate()?;
        if k < 1 {
            return Err(Error::Parameter("need at least one input exposure".into()));
        }
        let div = variant.divisor();
        if patch == 0 || !patch.is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "{variant} patch size must be a positive multiple of {div}, got {patch}"
            )));
        }
        let o = options;
        let ks = o.kernel;
        let depth = variant.encoder_depth();
        let ch = |level| o.level_channels(level);
        // Channels of the recorded activation at each encoder level; the two
        // per-exposure levels are concatenated across the k branches.
        let level_width = |level: usize| if level < 2 { ch(level) * k } else { ch(level) };

        let encoder = (0..2)
            .map(|level| {
                let cin = if level == 0 { INPUT_CHANNELS } else { ch(0) };
                let mut layers = vec![LayerSpec::conv(ks, Stride::Two, cin, ch(level))];
                if level > 0 {
                    layers.push(LayerSpec::pointwise(LayerKind::BatchNorm, ch(level)));
                }
                layers.push(LayerSpec::pointwise(LayerKind::LeakyRelu, ch(level)));
                StageSpec {
                    name: format!("enc{}", level + 1),
                    layers,
                    level: Some(level),
                }
            })
            .collect();

        let mut merger = Vec::new();
        for level in 2..depth {
            let c = ch(level);
            merger.push(StageSpec {
                name: format!("enc{}", level + 1),
                layers: vec![
                    LayerSpec::conv(ks, Stride::Two, level_width(level - 1), c),
                    LayerSpec::pointwise(LayerKind::BatchNorm, c),
                    LayerSpec::pointwise(LayerKind::LeakyRelu, c),
                ],
                level: Some(level),
            });
        }
        if variant == Variant::Resnet {
            let c = ch(depth - 1);
            merger.push(StageSpec {
                name: "residual".into(),
                layers: (0..o.residual_blocks)
                    .map(|_| LayerSpec::residual(o.residual_kernel, c))
                    .collect(),
                level: None,
            });
        }

        let mut decoder = Vec::new();
        let mut cur = level_width(depth - 1);
        for j in 1..=depth {
            let out = if j < depth {
                ch(depth - 1 - j)
            } else {
                o.base_channels
            };
            let mut layers = Vec::new();
            if j >= 2 {
                let level = depth - j;
                layers.push(LayerSpec::concat(cur, level_width(level), level));
                cur += level_width(level);
            }
            layers.push(LayerSpec::conv(ks, Stride::Half, cur, out));
            layers.push(LayerSpec::pointwise(LayerKind::BatchNorm, out));
            layers.push(LayerSpec::pointwise(LayerKind::Relu, out));
            decoder.push(StageSpec {
                name: format!("dec{j}"),
                layers,
                level: None,
            });
            cur = out;
        }
        decoder.push(StageSpec {
            name: "output".into(),
            layers: vec![
                LayerSpec::conv(ks, Stride::One, cur, OUTPUT_CHANNELS),
                LayerSpec::pointwise(LayerKind::Sigmoid, OUTPUT_CHANNELS),
            ],
            level: None,
        });

        Ok(NetworkSpec {
            variant,
            k_inputs: k,
            patch,
            options,
            encoder,
            merger,
            decoder,
        })
    }

    /// Shape algebra over the layer list: `(stage name, (c, h, w))` after every
    /// stage, for an `h x w` input. Per-exposure stages report one branch.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(String, (usize, usize, usize))> {
        let mut out = Vec::new();
        let mut levels = Vec::new();
        let mut s = (INPUT_CHANNELS, h, w);
        for stage in &self.encoder {
            for l in &stage.layers {
                s = l.output_shape(s);
            }
            out.push((stage.name.clone(), s));
            levels.push((s.0 * self.k_inputs, s.1, s.2));
        }
        s = *levels.last().expect("two encoder stages");
        for stage in &self.merger {
            for l in &stage.layers {
                s = l.output_shape(s);
            }
            out.push((stage.name.clone(), s));
            if stage.level.is_some() {
                levels.push(s);
            }
        }
        for stage in &self.decoder {
            for l in &stage.layers {
                if let Some(level) = l.skip_from {
                    let skip = levels[level];
                    assert_eq!(
                        (skip.1, skip.2),
                        (s.1, s.2),
                        "skip size mismatch at {}",
                        stage.name
                    );
                    s = (s.0 + skip.0, s.1, s.2);
                } else {
                    s = l.output_shape(s);
                }
            }
            out.push((stage.name.clone(), s));
        }
        out
    }

    /// Shape of the block between the merger and the decoder for a square patch.
    pub fn bottleneck_shape(&self, patch: usize) -> (usize, usize, usize) {
        let name = &self.merger.last().expect("merger stages").name;
        self.stage_shapes(patch, patch)
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .expect("bottleneck stage")
    }

    pub fn parameter_count(&self) -> usize {
        let per_layer = |l: &LayerSpec| match l.kind {
            LayerKind::Conv | LayerKind::Deconv => {
                l.in_channels * l.out_channels * l.kernel * l.kernel + l.out_channels
            }
            LayerKind::BatchNorm => 2 * l.out_channels,
            LayerKind::ResidualBlock => {
                2 * (l.in_channels * l.in_channels * l.kernel * l.kernel + 3 * l.in_channels)
            }
            _ => 0,
        };
        let sum = |stages: &[StageSpec]| -> usize {
            stages.iter().flat_map(|s| &s.layers).map(per_layer).sum()
        };
        sum(&self.encoder) * self.k_inputs + sum(&self.merger) + sum(&self.decoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet_full_size_geometry() {
        let spec = build_unet(3, 256).unwrap();
        assert_eq!(spec.bottleneck_shape(256), (512, 1, 1));
        let shapes = spec.stage_shapes(256, 256);
        assert_eq!(shapes[0], ("enc1".into(), (64, 128, 128)));
        assert_eq!(shapes[1], ("enc2".into(), (128, 64, 64)));
        let enc_channels: Vec<usize> = shapes[..8].iter().map(|s| s.1 .0).collect();
        assert_eq!(enc_channels, vec![64, 128, 256, 512, 512, 512, 512, 512]);
        let dec: Vec<(usize, usize)> = shapes[8..16].iter().map(|s| (s.1 .0, s.1 .1)).collect();
        assert_eq!(
            dec,
            vec![
                (512, 2),
                (512, 4),
                (512, 8),
                (512, 16),
                (256, 32),
                (128, 64),
                (64, 128),
                (64, 256)
            ]
        );
        assert_eq!(shapes.last().unwrap().1, (3, 256, 256));
        // first layer has no batch norm, every other encoder layer does
        assert!(spec.encoder[0]
            .layers
            .iter()
            .all(|l| l.kind != LayerKind::BatchNorm));
        assert!(spec.encoder[1]
            .layers
            .iter()
            .any(|l| l.kind == LayerKind::BatchNorm));
        let out = spec.decoder.last().unwrap();
        assert!(out.layers.iter().all(|l| l.kind != LayerKind::BatchNorm));
        assert_eq!(out.layers.last().unwrap().kind, LayerKind::Sigmoid);
    }

    #[test]
    fn resnet_full_size_geometry() {
        let spec = build_resnet(3, 256).unwrap();
        assert_eq!(spec.bottleneck_shape(256), (256, 32, 32));
        let residual = spec.merger.last().unwrap();
        assert_eq!(residual.layers.len(), 9);
        assert!(residual
            .layers
            .iter()
            .all(|l| l.kind == LayerKind::ResidualBlock && l.kernel == 3));
        let shapes = spec.stage_shapes(256, 256);
        let names: Vec<&str> = shapes.iter().map(|s| s.0.as_str()).collect();
        assert_eq!(
            names,
            ["enc1", "enc2", "enc3", "residual", "dec1", "dec2", "dec3", "output"]
        );
        assert_eq!(shapes.last().unwrap().1, (3, 256, 256));
    }

    #[test]
    fn skip_sources_are_size_compatible() {
        for k in [2, 3, 5] {
            for spec in [build_unet(k, 256).unwrap(), build_resnet(k, 256).unwrap()] {
                // stage_shapes asserts every concatenation is spatially compatible
                let shapes = spec.stage_shapes(512, 512);
                assert_eq!(shapes.last().unwrap().1, (3, 512, 512));
            }
        }
    }

    #[test]
    fn rejects_indivisible_patches() {
        assert!(matches!(build_unet(3, 128), Err(Error::Shape(_))));
        assert!(matches!(build_unet(3, 300), Err(Error::Shape(_))));
        assert!(matches!(build_resnet(3, 60), Err(Error::Shape(_))));
        assert!(build_resnet(3, 64).is_ok());
    }

    #[test]
    fn kernel_sizes() {
        let spec = build_unet(3, 256).unwrap();
        for stage in spec.encoder.iter().chain(&spec.merger).chain(&spec.decoder) {
            for l in &stage.layers {
                if matches!(l.kind, LayerKind::Conv | LayerKind::Deconv) {
                    assert_eq!(l.kernel, 5);
                }
            }
        }
    }
}
