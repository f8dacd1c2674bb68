//! Architecture descriptions and flat parameter vectors.

use serde::{Deserialize, Serialize};

use super::{NetError, Result};
use crate::tensor::conv_out;

/// The single activation shared by every hidden layer of a target network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn flat_dim(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense { in_features: usize, out_features: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: usize, padding: usize },
    GlobalAvgPool,
}

/// One layer. Dense and conv layers always carry a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec { kind: LayerKind::Dense { in_features, out_features } }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: usize, padding: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } }
    }

    pub fn gap() -> Self {
        LayerSpec { kind: LayerKind::GlobalAvgPool }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self.kind, LayerKind::GlobalAvgPool)
    }

    /// Output units seen by the weight graph: features for dense, channels
    /// for conv.
    pub fn out_units(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { out_features, .. } => Some(out_features),
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            LayerKind::GlobalAvgPool => None,
        }
    }

    pub fn in_units(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { in_features, .. } => Some(in_features),
            LayerKind::Conv2d { in_channels, .. } => Some(in_channels),
            LayerKind::GlobalAvgPool => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_features, out_features } => out_features * (in_features + 1),
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * (in_channels * kernel.0 * kernel.1 + 1)
            }
            LayerKind::GlobalAvgPool => 0,
        }
    }
}

/// A whole target network: input shape, layer stack, class count, and the one
/// network-wide activation (applied after every parameterized layer except
/// the final classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, activation: Activation) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h));
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, num_classes));
        ArchSpec { input: InputShape::Flat(input_dim), layers, num_classes, activation }
    }

    /// The reference MLP: 64 -> 48 -> 32 -> 16 -> 10 with tanh (5,386 params).
    pub fn mlp_zoo() -> Self {
        ArchSpec::mlp(64, &[48, 32, 16], 10, Activation::Tanh)
    }

    /// The reference CNN head: three 16-channel 3x3 convolutions (stride 2,
    /// padding 1 here; only the kernel size is pinned by the 4,970 parameter
    /// total), global average pooling and a 10-way classifier.
    pub fn cnn_zoo(activation: Activation, height: usize, width: usize) -> Self {
        ArchSpec {
            input: InputShape::Image { channels: 1, height, width },
            layers: vec![
                LayerSpec::conv2d(1, 16, (3, 3), 2, 1),
                LayerSpec::conv2d(16, 16, (3, 3), 2, 1),
                LayerSpec::conv2d(16, 16, (3, 3), 2, 1),
                LayerSpec::gap(),
                LayerSpec::dense(16, 10),
            ],
            num_classes: 10,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Layers that carry parameters, in network order.
    pub fn param_layers(&self) -> Vec<LayerSpec> {
        self.layers.iter().filter(|l| l.has_params()).cloned().collect()
    }

    /// Vertex counts per graph layer: input units followed by the output
    /// units of each parameterized layer. Pooling contributes no vertices.
    pub fn graph_layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        let first_is_conv = self
            .layers
            .iter()
            .find(|l| l.has_params())
            .map(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .unwrap_or(false);
        let input_units = match self.input {
            InputShape::Image { channels, .. } if first_is_conv => channels,
            other => other.flat_dim(),
        };
        sizes.push(input_units);
        for l in &self.layers {
            if let Some(u) = l.out_units() {
                sizes.push(u);
            }
        }
        sizes
    }

    pub fn is_cnn(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
    }

    /// Check layer composability and geometry.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NetError::InvalidArch("no layers".into()));
        }
        enum Flow {
            Flat(usize),
            Image(usize, usize, usize),
        }
        let mut flow = match self.input {
            InputShape::Flat(d) => Flow::Flat(d),
            InputShape::Image { channels, height, width } => Flow::Image(channels, height, width),
        };
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Dense { in_features, out_features } => {
                    let avail = match flow {
                        Flow::Flat(d) => d,
                        Flow::Image(c, h, w) => c * h * w,
                    };
                    if avail != in_features {
                        return Err(NetError::InvalidArch(format!(
                            "layer {}: dense expects {} inputs, gets {}",
                            i, in_features, avail
                        )));
                    }
                    flow = Flow::Flat(out_features);
                }
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    if kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
                        return Err(NetError::InvalidArch(format!("layer {}: degenerate conv geometry", i)));
                    }
                    let (c, h, w) = match flow {
                        Flow::Image(c, h, w) => (c, h, w),
                        Flow::Flat(_) => {
                            return Err(NetError::InvalidArch(format!("layer {}: conv after flat data", i)))
                        }
                    };
                    if c != in_channels {
                        return Err(NetError::InvalidArch(format!(
                            "layer {}: conv expects {} channels, gets {}",
                            i, in_channels, c
                        )));
                    }
                    let (oh, ow) = conv_out(h, w, kernel.0, kernel.1, stride, padding)
                        .ok_or_else(|| NetError::InvalidArch(format!("layer {}: empty conv output", i)))?;
                    flow = Flow::Image(out_channels, oh, ow);
                }
                LayerKind::GlobalAvgPool => {
                    let c = match flow {
                        Flow::Image(c, _, _) => c,
                        Flow::Flat(_) => {
                            return Err(NetError::InvalidArch(format!("layer {}: pool after flat data", i)))
                        }
                    };
                    flow = Flow::Flat(c);
                }
            }
        }
        let out = match flow {
            Flow::Flat(d) => d,
            Flow::Image(c, h, w) => c * h * w,
        };
        if out != self.num_classes {
            return Err(NetError::InvalidArch(format!(
                "network emits {} values, expected {} classes",
                out, self.num_classes
            )));
        }
        Ok(())
    }

    /// Stride/padding sanity for every conv layer: stride no larger than the
    /// kernel extent, so consecutive output rows of the materialized matrix
    /// keep sharing kernel weights.
    pub fn reasonable_convs(&self) -> bool {
        self.layers.iter().all(|l| match l.kind {
            LayerKind::Conv2d { kernel, stride, .. } => stride <= kernel.0 && stride <= kernel.1,
            _ => true,
        })
    }
}

/// Where one layer's weight block and bias block live inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub weight_offset: usize,
    pub weight_shape: Vec<usize>,
    pub bias_offset: usize,
    pub bias_len: usize,
}

/// Flat parameter vector plus the per-layer layout that maps it back to
/// weight/bias blocks. Weight blocks are row-major `[out, in]` for dense and
/// `[out_c, in_c, kh, kw]` for conv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Vec<LayerLayout>,
}

impl ParamVector {
    pub fn layout_of(arch: &ArchSpec) -> Vec<LayerLayout> {
        let mut layout = Vec::new();
        let mut off = 0;
        for l in arch.param_layers() {
            let (wshape, blen) = match l.kind {
                LayerKind::Dense { in_features, out_features } => (vec![out_features, in_features], out_features),
                LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                    (vec![out_channels, in_channels, kernel.0, kernel.1], out_channels)
                }
                LayerKind::GlobalAvgPool => unreachable!(),
            };
            let wlen: usize = wshape.iter().product();
            layout.push(LayerLayout {
                weight_offset: off,
                weight_shape: wshape,
                bias_offset: off + wlen,
                bias_len: blen,
            });
            off += wlen + blen;
        }
        layout
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        let layout = Self::layout_of(arch);
        let len = arch.param_count();
        ParamVector { values: vec![0.0; len], layout }
    }

    pub fn from_values(arch: &ArchSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(NetError::LayoutMismatch(format!(
                "{} values for an architecture with {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(ParamVector { values, layout: Self::layout_of(arch) })
    }

    pub fn matches(&self, arch: &ArchSpec) -> bool {
        self.layout == Self::layout_of(arch) && self.values.len() == arch.param_count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let l = &self.layout[layer];
        let n: usize = l.weight_shape.iter().product();
        &self.values[l.weight_offset..l.weight_offset + n]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout[layer].clone();
        let n: usize = l.weight_shape.iter().product();
        &mut self.values[l.weight_offset..l.weight_offset + n]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = &self.layout[layer];
        &self.values[l.bias_offset..l.bias_offset + l.bias_len]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout[layer].clone();
        &mut self.values[l.bias_offset..l.bias_offset + l.bias_len]
    }

    pub fn weight_shape(&self, layer: usize) -> &[usize] {
        &self.layout[layer].weight_shape
    }

    /// Unflatten into per-layer `(weights, bias)` copies.
    pub fn per_layer(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..self.layout.len())
            .map(|i| (self.weight(i).to_vec(), self.bias(i).to_vec()))
            .collect()
    }

    /// Flatten per-layer blocks back into a vector; exact inverse of
    /// [`ParamVector::per_layer`].
    pub fn from_layers(arch: &ArchSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let layout = Self::layout_of(arch);
        if layers.len() != layout.len() {
            return Err(NetError::LayoutMismatch(format!(
                "{} layer blocks for {} layers",
                layers.len(),
                layout.len()
            )));
        }
        let mut values = vec![0.0; arch.param_count()];
        for (l, (w, b)) in layout.iter().zip(layers) {
            let n: usize = l.weight_shape.iter().product();
            if w.len() != n || b.len() != l.bias_len {
                return Err(NetError::LayoutMismatch("layer block size mismatch".into()));
            }
            values[l.weight_offset..l.weight_offset + n].copy_from_slice(w);
            values[l.bias_offset..l.bias_offset + l.bias_len].copy_from_slice(b);
        }
        Ok(ParamVector { values, layout })
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Round every value through f32, the precision used by on-disk blobs.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_zoo_parameter_count() {
        assert_eq!(ArchSpec::mlp_zoo().param_count(), 5386);
    }

    #[test]
    fn cnn_zoo_parameter_count() {
        assert_eq!(ArchSpec::cnn_zoo(Activation::Tanh, 8, 8).param_count(), 4970);
        assert_eq!(ArchSpec::cnn_zoo(Activation::Relu, 32, 32).param_count(), 4970);
    }

    #[test]
    fn validate_catches_bad_composition() {
        let mut arch = ArchSpec::mlp_zoo();
        assert!(arch.validate().is_ok());
        arch.layers[1] = LayerSpec::dense(40, 32);
        assert!(arch.validate().is_err());
    }

    #[test]
    fn graph_layer_sizes_match_reference_archs() {
        assert_eq!(ArchSpec::mlp_zoo().graph_layer_sizes(), vec![64, 48, 32, 16, 10]);
        assert_eq!(ArchSpec::cnn_zoo(Activation::Tanh, 8, 8).graph_layer_sizes(), vec![1, 16, 16, 16, 10]);
    }

    #[test]
    fn unflatten_flatten_roundtrip_is_bitwise() {
        let arch = ArchSpec::mlp(6, &[5, 4], 3, Activation::Tanh);
        let mut theta = ParamVector::zeros(&arch);
        for (i, v) in theta.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let blocks = theta.per_layer();
        let back = ParamVector::from_layers(&arch, &blocks).unwrap();
        assert_eq!(theta, back);
    }
}
