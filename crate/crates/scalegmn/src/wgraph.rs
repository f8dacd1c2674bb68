//! Bidirectional codec between `(ArchSpec, ParamVector)` and the graph the
//! metanetwork operates on: biases become vertex features, weights become
//! edge features padded to a fixed width, vertices group into per-layer
//! ranges with edges only between consecutive layers.

use std::ops::Range;

use thiserror::Error;

use crate::nets::{ArchSpec, LayerKind, ParamVector};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] crate::nets::NetError),
    #[error("incompatible graph: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Fixed feature widths for one architecture family: edge features hold a
/// kernel zero-padded to the maximum extents seen anywhere in the network
/// (dense weights count as 1x1), vertex features hold the scalar bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphEncodingSpec {
    pub w_max: usize,
    pub h_max: usize,
    pub d_e: usize,
    pub d_v: usize,
}

impl GraphEncodingSpec {
    pub fn of(arch: &ArchSpec) -> Self {
        let mut w_max = 1;
        let mut h_max = 1;
        for l in &arch.layers {
            if let LayerKind::Conv2d { kernel, .. } = l.kind {
                h_max = h_max.max(kernel.0);
                w_max = w_max.max(kernel.1);
            }
        }
        GraphEncodingSpec { w_max, h_max, d_e: w_max * h_max, d_v: 1 }
    }

    /// Row-major index of the padded grid's center cell, where dense weights
    /// live. Even extents tie-break toward the lower index of the two middle
    /// cells per axis.
    pub fn center(&self) -> usize {
        (self.h_max / 2) * self.w_max + self.w_max / 2
    }

    /// Row-major indices of the top-left `kh x kw` block holding a conv
    /// kernel.
    pub fn kernel_cells(&self, kh: usize, kw: usize) -> Vec<usize> {
        let mut cells = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            for kx in 0..kw {
                cells.push(ky * self.w_max + kx);
            }
        }
        cells
    }
}

/// The graph view of one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGraph {
    /// `[V, 1]` biases; input-layer rows are zero.
    pub vertex_features: Tensor,
    /// `[E, d_e]` padded flattened kernels/weights.
    pub edge_features: Tensor,
    /// Per edge: vertex id in the previous layer.
    pub senders: Vec<usize>,
    /// Per edge: vertex id in the next layer.
    pub receivers: Vec<usize>,
    /// Vertex id range of each graph layer (input first, output last).
    pub layer_ranges: Vec<Range<usize>>,
    /// Edge row range of each parameterized layer.
    pub edge_ranges: Vec<Range<usize>>,
    pub enc: GraphEncodingSpec,
}

impl WeightGraph {
    pub fn num_vertices(&self) -> usize {
        self.vertex_features.shape()[0]
    }

    pub fn num_edges(&self) -> usize {
        self.edge_features.shape()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_ranges.len()
    }

    /// Graph layer of each vertex.
    pub fn vertex_layers(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_vertices()];
        for (li, r) in self.layer_ranges.iter().enumerate() {
            for v in r.clone() {
                out[v] = li;
            }
        }
        out
    }
}

/// Map parameters onto the graph. Conv kernels fill the top-left block of the
/// padded grid; dense weights sit alone at the center cell.
pub fn encode(arch: &ArchSpec, theta: &ParamVector) -> Result<WeightGraph> {
    if !theta.matches(arch) {
        return Err(GraphError::Incompatible("parameters do not fit architecture".into()));
    }
    let enc = GraphEncodingSpec::of(arch);
    let sizes = arch.graph_layer_sizes();
    let mut layer_ranges = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in &sizes {
        layer_ranges.push(off..off + s);
        off += s;
    }
    let v_total = off;
    let mut vertex = vec![0.0; v_total];
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    let mut edge = Vec::new();
    let mut edge_ranges = Vec::new();
    let layers = arch.param_layers();
    for (li, layer) in layers.iter().enumerate() {
        let n_in = sizes[li];
        let n_out = sizes[li + 1];
        let (in_units, out_units) = (layer.in_units().unwrap(), layer.out_units().unwrap());
        if in_units != n_in || out_units != n_out {
            return Err(GraphError::Incompatible(format!(
                "layer {} units {}x{} vs graph sizes {}x{}",
                li, out_units, in_units, n_out, n_in
            )));
        }
        let b = theta.bias(li);
        for (j, &bv) in b.iter().enumerate() {
            vertex[layer_ranges[li + 1].start + j] = bv;
        }
        let w = theta.weight(li);
        let start = senders.len();
        match layer.kind {
            LayerKind::Dense { .. } => {
                let center = enc.center();
                for r in 0..n_out {
                    for s in 0..n_in {
                        senders.push(layer_ranges[li].start + s);
                        receivers.push(layer_ranges[li + 1].start + r);
                        let mut feat = vec![0.0; enc.d_e];
                        feat[center] = w[r * n_in + s];
                        edge.extend_from_slice(&feat);
                    }
                }
            }
            LayerKind::Conv2d { kernel: (kh, kw), .. } => {
                if kh > enc.h_max || kw > enc.w_max {
                    return Err(GraphError::Incompatible(format!(
                        "kernel {}x{} exceeds padded grid {}x{}",
                        kh, kw, enc.h_max, enc.w_max
                    )));
                }
                let cells = enc.kernel_cells(kh, kw);
                for r in 0..n_out {
                    for s in 0..n_in {
                        senders.push(layer_ranges[li].start + s);
                        receivers.push(layer_ranges[li + 1].start + r);
                        let mut feat = vec![0.0; enc.d_e];
                        let k = &w[(r * n_in + s) * kh * kw..(r * n_in + s + 1) * kh * kw];
                        for (cell, &kv) in cells.iter().zip(k) {
                            feat[*cell] = kv;
                        }
                        edge.extend_from_slice(&feat);
                    }
                }
            }
            LayerKind::GlobalAvgPool => unreachable!(),
        }
        edge_ranges.push(start..senders.len());
    }
    Ok(WeightGraph {
        vertex_features: Tensor::new(vec![v_total, 1], vertex)?,
        edge_features: Tensor::new(vec![senders.len(), enc.d_e], edge)?,
        senders,
        receivers,
        layer_ranges,
        edge_ranges,
        enc,
    })
}

/// Exact inverse of [`encode`] on its image: reads the center cell (dense) or
/// the top-left kernel block (conv) of each edge feature and the vertex
/// features as biases. Cells outside the valid region are ignored.
pub fn decode(arch: &ArchSpec, g: &WeightGraph) -> Result<ParamVector> {
    check_compatible(arch, g)?;
    let sizes = arch.graph_layer_sizes();
    let mut theta = ParamVector::zeros(arch);
    let layers = arch.param_layers();
    for (li, layer) in layers.iter().enumerate() {
        let n_in = sizes[li];
        let vstart = g.layer_ranges[li + 1].start;
        for j in 0..sizes[li + 1] {
            theta.bias_mut(li)[j] = g.vertex_features.data()[vstart + j];
        }
        let estart = g.edge_ranges[li].start;
        let d_e = g.enc.d_e;
        match layer.kind {
            LayerKind::Dense { .. } => {
                let center = g.enc.center();
                let w = theta.weight_mut(li);
                for (i, wv) in w.iter_mut().enumerate() {
                    // edge rows are receiver-major: i = r * n_in + s
                    *wv = g.edge_features.data()[(estart + i) * d_e + center];
                }
                let _ = n_in;
            }
            LayerKind::Conv2d { kernel: (kh, kw), .. } => {
                let cells = g.enc.kernel_cells(kh, kw);
                let w = theta.weight_mut(li);
                for i in 0..w.len() / (kh * kw) {
                    let row = &g.edge_features.data()[(estart + i) * d_e..(estart + i + 1) * d_e];
                    for (kpos, &cell) in cells.iter().enumerate() {
                        w[i * kh * kw + kpos] = row[cell];
                    }
                }
            }
            LayerKind::GlobalAvgPool => unreachable!(),
        }
    }
    Ok(theta)
}

fn check_compatible(arch: &ArchSpec, g: &WeightGraph) -> Result<()> {
    let sizes = arch.graph_layer_sizes();
    if g.layer_ranges.len() != sizes.len()
        || g.layer_ranges.iter().zip(&sizes).any(|(r, &s)| r.len() != s)
    {
        return Err(GraphError::Incompatible("layer sizes differ from architecture".into()));
    }
    let enc = GraphEncodingSpec::of(arch);
    if g.enc.d_e < enc.d_e {
        return Err(GraphError::Incompatible(format!(
            "edge width {} cannot hold kernels needing {}",
            g.enc.d_e, enc.d_e
        )));
    }
    let expected_edges: usize = sizes.windows(2).map(|w| w[0] * w[1]).sum();
    if g.num_edges() != expected_edges {
        return Err(GraphError::Incompatible(format!(
            "{} edges, expected {}",
            g.num_edges(),
            expected_edges
        )));
    }
    Ok(())
}

/// One-hot layer index per vertex, `[V, num_layers]`. Identical for every
/// vertex of a layer, so within-layer permutation equivariance is untouched.
pub fn layer_positional_encoding(g: &WeightGraph) -> Tensor {
    let v = g.num_vertices();
    let l = g.num_layers();
    let mut data = vec![0.0; v * l];
    for (li, r) in g.layer_ranges.iter().enumerate() {
        for vid in r.clone() {
            data[vid * l + li] = 1.0;
        }
    }
    Tensor::new(vec![v, l], data).expect("pos encoding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, Activation, InitKind};
    use crate::rng::substream;
    use rand::Rng;

    fn random_theta(arch: &ArchSpec, seed: u64) -> ParamVector {
        let mut rng = substream(seed, "wgraph-test");
        init_params(arch, InitKind::Normal, 0.25, &mut rng).unwrap()
    }

    #[test]
    fn dense_weight_lands_at_center_of_3x3_grid() {
        // A mixed net with a 3x3 conv forces d_e = 9 for the dense layers.
        let arch = ArchSpec {
            input: crate::nets::InputShape::Image { channels: 1, height: 4, width: 4 },
            layers: vec![
                crate::nets::LayerSpec::conv2d(1, 2, (3, 3), 1, 1),
                crate::nets::LayerSpec::gap(),
                crate::nets::LayerSpec::dense(2, 2),
            ],
            num_classes: 2,
            activation: Activation::Tanh,
        };
        arch.validate().unwrap();
        let mut theta = ParamVector::zeros(&arch);
        theta.weight_mut(1)[0] = 7.5; // dense w[0,0]
        let g = encode(&arch, &theta).unwrap();
        let row = g.edge_ranges[1].start;
        let feat = &g.edge_features.data()[row * 9..(row + 1) * 9];
        assert_eq!(feat, &[0.0, 0.0, 0.0, 0.0, 7.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_kernel_flattens_row_major_without_padding() {
        let arch = ArchSpec::cnn_zoo(Activation::Tanh, 8, 8);
        let mut theta = ParamVector::zeros(&arch);
        let k: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        theta.weight_mut(0)[..9].copy_from_slice(&k);
        let g = encode(&arch, &theta).unwrap();
        let feat = &g.edge_features.data()[..9];
        assert_eq!(feat, k.as_slice());
    }

    #[test]
    fn cnn_zoo_graph_has_reference_vertex_counts() {
        let arch = ArchSpec::cnn_zoo(Activation::Tanh, 8, 8);
        let g = encode(&arch, &ParamVector::zeros(&arch)).unwrap();
        let sizes: Vec<usize> = g.layer_ranges.iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![1, 16, 16, 16, 10]);
        assert_eq!(g.num_edges(), 16 + 256 + 256 + 160);
        assert_eq!(g.enc.d_e, 9);
    }

    #[test]
    fn decode_encode_roundtrip_is_bitwise() {
        for (i, arch) in [ArchSpec::mlp(6, &[5, 4], 3, Activation::Tanh), ArchSpec::cnn_zoo(Activation::Relu, 8, 8)]
            .iter()
            .enumerate()
        {
            for t in 0..20 {
                let theta = random_theta(arch, (i * 100 + t) as u64);
                let g = encode(arch, &theta).unwrap();
                let back = decode(arch, &g).unwrap();
                assert_eq!(theta, back);
            }
        }
    }

    #[test]
    fn encode_decode_on_image_roundtrips() {
        let arch = ArchSpec::mlp(6, &[4], 3, Activation::Tanh);
        let theta = random_theta(&arch, 5);
        let g = encode(&arch, &theta).unwrap();
        let g2 = encode(&arch, &decode(&arch, &g).unwrap()).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn zero_graph_decodes_to_zero_theta() {
        let arch = ArchSpec::mlp_zoo();
        let mut g = encode(&arch, &random_theta(&arch, 9)).unwrap();
        g.vertex_features = Tensor::zeros(g.vertex_features.shape());
        g.edge_features = Tensor::zeros(g.edge_features.shape());
        let theta = decode(&arch, &g).unwrap();
        assert!(theta.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_layer_vertex_features_are_zero_and_edges_link_consecutive_layers() {
        let arch = ArchSpec::mlp_zoo();
        let g = encode(&arch, &random_theta(&arch, 13)).unwrap();
        for v in g.layer_ranges[0].clone() {
            assert_eq!(g.vertex_features.data()[v], 0.0);
        }
        let layers = g.vertex_layers();
        for e in 0..g.num_edges() {
            assert_eq!(layers[g.senders[e]] + 1, layers[g.receivers[e]]);
        }
    }

    #[test]
    fn positional_encoding_is_per_layer_one_hot() {
        let arch = ArchSpec::mlp_zoo();
        let g = encode(&arch, &ParamVector::zeros(&arch)).unwrap();
        let pos = layer_positional_encoding(&g);
        assert_eq!(pos.shape(), &[g.num_vertices(), 5]);
        // identical inside a layer
        let r1 = &g.layer_ranges[1];
        let first = pos.data()[r1.start * 5..(r1.start + 1) * 5].to_vec();
        for v in r1.clone() {
            assert_eq!(&pos.data()[v * 5..(v + 1) * 5], first.as_slice());
        }
        assert_eq!(first, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn swapping_two_hidden_neurons_permutes_rows_only() {
        let arch = ArchSpec::mlp(4, &[3], 2, Activation::Tanh);
        let theta = random_theta(&arch, 21);
        // build theta' with hidden neurons 0 and 1 swapped by hand
        let mut swapped = theta.clone();
        {
            let w = swapped.weight_mut(0);
            for c in 0..4 {
                w.swap(c, 4 + c);
            }
        }
        swapped.bias_mut(0).swap(0, 1);
        {
            let w = swapped.weight_mut(1);
            for r in 0..2 {
                w.swap(r * 3, r * 3 + 1);
            }
        }
        let g = encode(&arch, &theta).unwrap();
        let gs = encode(&arch, &swapped).unwrap();
        // vertex rows for the two hidden neurons swap, rest unchanged
        let h = g.layer_ranges[1].start;
        assert_eq!(gs.vertex_features.data()[h], g.vertex_features.data()[h + 1]);
        assert_eq!(gs.vertex_features.data()[h + 1], g.vertex_features.data()[h]);
        // layer-0 edge block: receiver-major rows swap in groups of 4
        let d = g.enc.d_e;
        for s in 0..4 {
            assert_eq!(
                gs.edge_features.data()[s * d..(s + 1) * d],
                g.edge_features.data()[(4 + s) * d..(5 + s) * d]
            );
        }
    }

    #[test]
    fn random_arch_roundtrip_proptest_style() {
        let mut rng = substream(64, "arch-gen");
        for _ in 0..20 {
            let n_hidden = rng.random_range(1..=3usize);
            let hidden: Vec<usize> = (0..n_hidden).map(|_| rng.random_range(2..=6)).collect();
            let arch = ArchSpec::mlp(rng.random_range(2..=8), &hidden, rng.random_range(2..=5), Activation::Tanh);
            let theta = random_theta(&arch, rng.random());
            let back = decode(&arch, &encode(&arch, &theta).unwrap()).unwrap();
            assert_eq!(theta, back);
        }
    }
}
