//! Weight-space gauge transformations: per-layer permutations and diagonal
//! scalings that leave the network function unchanged, applied to parameter
//! vectors and to weight graphs, plus the brute-force admissibility analysis
//! of which scalings preserve structured (convolutional) weight matrices.

mod bruteforce;

pub use bruteforce::{
    admissible_scalings_bruteforce, cnn_vs_mlp_subset, AdmissibleSet, ScaleValues, ScalingSpace, StructureClass,
    SubsetVerdict, DEFAULT_POSITIVE_GRID,
};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::nets::{forward_logits, Activation, ArchSpec, ImageBatch, LayerKind, ParamVector};
use crate::wgraph::WeightGraph;

#[derive(Debug, Error)]
pub enum GaugeError {
    #[error("gauge incompatible with architecture: {0}")]
    Incompatible(String),
    #[error("zero scale entry in layer {0}")]
    ZeroScale(usize),
    #[error("activation constraint violated in layer {layer}: {detail}")]
    IllegalScale { layer: usize, detail: String },
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Net(#[from] crate::nets::NetError),
}

pub type Result<T> = std::result::Result<T, GaugeError>;

/// Gauge data for one hidden layer: `perm[new] = old` relabeling and one
/// scale per vertex, indexed by the old vertex id. For conv layers vertices
/// are channels, so this is exactly one scalar per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGauge {
    pub perm: Vec<usize>,
    pub scale: Vec<f64>,
}

impl LayerGauge {
    pub fn identity(n: usize) -> Self {
        LayerGauge { perm: (0..n).collect(), scale: vec![1.0; n] }
    }

    fn is_identity_perm(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// A full network gauge: one [`LayerGauge`] per hidden graph layer. Input and
/// output layers are pinned to the identity so logits are literally
/// preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeTransform {
    pub hidden: Vec<LayerGauge>,
}

impl GaugeTransform {
    pub fn identity(arch: &ArchSpec) -> Self {
        let sizes = arch.graph_layer_sizes();
        GaugeTransform {
            hidden: sizes[1..sizes.len() - 1].iter().map(|&n| LayerGauge::identity(n)).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.hidden
            .iter()
            .all(|l| l.is_identity_perm() && l.scale.iter().all(|&q| q == 1.0))
    }

    /// Check bijectivity, nonzero scales and layer sizes against `arch`.
    pub fn check_shape(&self, arch: &ArchSpec) -> Result<()> {
        let sizes = arch.graph_layer_sizes();
        if self.hidden.len() + 2 != sizes.len() {
            return Err(GaugeError::Incompatible(format!(
                "{} hidden gauges for {} graph layers",
                self.hidden.len(),
                sizes.len()
            )));
        }
        for (li, lg) in self.hidden.iter().enumerate() {
            let n = sizes[li + 1];
            if lg.perm.len() != n || lg.scale.len() != n {
                return Err(GaugeError::Incompatible(format!("layer {} expects {} entries", li, n)));
            }
            let mut seen = vec![false; n];
            for &p in &lg.perm {
                if p >= n || seen[p] {
                    return Err(GaugeError::Incompatible(format!("layer {} permutation not a bijection", li)));
                }
                seen[p] = true;
            }
            if lg.scale.iter().any(|&q| q == 0.0) {
                return Err(GaugeError::ZeroScale(li));
            }
        }
        Ok(())
    }

    /// Check the activation-specific group constraint: `{-1, +1}` entries for
    /// tanh, strictly positive entries for relu.
    pub fn check_legal(&self, activation: Activation) -> Result<()> {
        for (li, lg) in self.hidden.iter().enumerate() {
            match activation {
                Activation::Tanh => {
                    if let Some(&q) = lg.scale.iter().find(|&&q| q != 1.0 && q != -1.0) {
                        return Err(GaugeError::IllegalScale {
                            layer: li,
                            detail: format!("{} not in {{-1, +1}}", q),
                        });
                    }
                }
                Activation::Relu => {
                    if let Some(&q) = lg.scale.iter().find(|&&q| q <= 0.0) {
                        return Err(GaugeError::IllegalScale {
                            layer: li,
                            detail: format!("{} not strictly positive", q),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// The gauge equal to applying `other` first, then `self`.
    pub fn compose(&self, other: &GaugeTransform) -> GaugeTransform {
        assert_eq!(self.hidden.len(), other.hidden.len());
        let hidden = self
            .hidden
            .iter()
            .zip(&other.hidden)
            .map(|(second, first)| {
                let n = first.perm.len();
                let mut perm = vec![0; n];
                let mut scale = vec![0.0; n];
                for i in 0..n {
                    perm[i] = first.perm[second.perm[i]];
                }
                for mid in 0..n {
                    let old = first.perm[mid];
                    scale[old] = second.scale[mid] * first.scale[old];
                }
                LayerGauge { perm, scale }
            })
            .collect();
        GaugeTransform { hidden }
    }

    pub fn inverse(&self) -> GaugeTransform {
        let hidden = self
            .hidden
            .iter()
            .map(|lg| {
                let n = lg.perm.len();
                let mut perm = vec![0; n];
                let mut scale = vec![0.0; n];
                for (new, &old) in lg.perm.iter().enumerate() {
                    perm[old] = new;
                }
                for j in 0..n {
                    scale[perm[j]] = 1.0 / lg.scale[j];
                }
                LayerGauge { perm, scale }
            })
            .collect();
        GaugeTransform { hidden }
    }
}

/// Uniform draw from the activation-legal gauge group: uniform permutations;
/// signs uniform on `{-1,+1}` for tanh, scales log-uniform on `[0.1, 10]` for
/// relu.
pub fn sample_gauge<R: Rng>(arch: &ArchSpec, rng: &mut R) -> GaugeTransform {
    let sizes = arch.graph_layer_sizes();
    let hidden = sizes[1..sizes.len() - 1]
        .iter()
        .map(|&n| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let scale: Vec<f64> = (0..n)
                .map(|_| match arch.activation {
                    Activation::Tanh => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Activation::Relu => {
                        let ln = rng.random_range(0.1f64.ln()..10.0f64.ln());
                        ln.exp()
                    }
                })
                .collect();
            LayerGauge { perm, scale }
        })
        .collect();
    GaugeTransform { hidden }
}

/// Permutation-only gauge (all scales one).
pub fn sample_permutation<R: Rng>(arch: &ArchSpec, rng: &mut R) -> GaugeTransform {
    let mut g = sample_gauge(arch, rng);
    for lg in &mut g.hidden {
        lg.scale.iter_mut().for_each(|q| *q = 1.0);
    }
    g
}

/// Apply the gauge after checking both shape and the activation constraint.
pub fn apply_to_params(arch: &ArchSpec, theta: &ParamVector, psi: &GaugeTransform) -> Result<ParamVector> {
    psi.check_shape(arch)?;
    psi.check_legal(arch.activation)?;
    Ok(apply_to_params_unchecked(arch, theta, psi))
}

/// Apply without the activation-legality check. Used to probe what happens
/// under transformations outside the legal group.
pub fn apply_to_params_unchecked(arch: &ArchSpec, theta: &ParamVector, psi: &GaugeTransform) -> ParamVector {
    let sizes = arch.graph_layer_sizes();
    let n_hidden = sizes.len() - 2;
    let identity_in = LayerGauge::identity(sizes[0]);
    let identity_out = LayerGauge::identity(sizes[sizes.len() - 1]);
    let gauge_of = |graph_layer: usize| -> &LayerGauge {
        if graph_layer == 0 {
            &identity_in
        } else if graph_layer <= n_hidden {
            &psi.hidden[graph_layer - 1]
        } else {
            &identity_out
        }
    };
    let mut out = theta.clone();
    for (li, layer) in arch.param_layers().iter().enumerate() {
        let recv = gauge_of(li + 1);
        let send = gauge_of(li);
        let inv_qs: Vec<f64> = send.scale.iter().map(|q| 1.0 / q).collect();
        let n_in = sizes[li];
        let n_out = sizes[li + 1];
        let cell = match layer.kind {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv2d { kernel, .. } => kernel.0 * kernel.1,
            LayerKind::GlobalAvgPool => unreachable!(),
        };
        let w_src = theta.weight(li).to_vec();
        let b_src = theta.bias(li).to_vec();
        {
            let w = out.weight_mut(li);
            for r in 0..n_out {
                let old_r = recv.perm[r];
                let qr = recv.scale[old_r];
                for s in 0..n_in {
                    let old_s = send.perm[s];
                    let f = inv_qs[old_s];
                    for k in 0..cell {
                        let v = w_src[(old_r * n_in + old_s) * cell + k];
                        w[(r * n_in + s) * cell + k] = qr * v * f;
                    }
                }
            }
        }
        let b = out.bias_mut(li);
        for r in 0..n_out {
            let old_r = recv.perm[r];
            b[r] = recv.scale[old_r] * b_src[old_r];
        }
    }
    out
}

/// The same transformation expressed directly on graph features: vertex `i`
/// takes the feature of `perm(i)` scaled by its gauge, edge `(r,s)` takes the
/// relabeled feature scaled by `q_r / q_s`.
pub fn apply_to_graph(g: &WeightGraph, psi: &GaugeTransform) -> WeightGraph {
    let mut perm_all: Vec<usize> = (0..g.num_vertices()).collect();
    let mut scale_all: Vec<f64> = vec![1.0; g.num_vertices()];
    for (hi, lg) in psi.hidden.iter().enumerate() {
        let range = &g.layer_ranges[hi + 1];
        for (new, &old) in lg.perm.iter().enumerate() {
            perm_all[range.start + new] = range.start + old;
        }
        for (old, &q) in lg.scale.iter().enumerate() {
            scale_all[range.start + old] = q;
        }
    }
    let inv_all: Vec<f64> = scale_all.iter().map(|q| 1.0 / q).collect();

    let mut vertex = g.vertex_features.clone();
    for (new, &old) in perm_all.iter().enumerate() {
        vertex.data_mut()[new] = scale_all[old] * g.vertex_features.data()[old];
    }

    // old vertex id -> new vertex id, to relabel edge endpoints
    let mut unperm = vec![0usize; g.num_vertices()];
    for (new, &old) in perm_all.iter().enumerate() {
        unperm[old] = new;
    }

    // The canonical edge order is receiver-major per layer; build the new
    // edge rows in that same order by locating, for each new (r,s) pair, the
    // old edge (perm(r), perm(s)).
    let d_e = g.enc.d_e;
    let mut edge = vec![0.0; g.num_edges() * d_e];
    let mut senders = vec![0usize; g.num_edges()];
    let mut receivers = vec![0usize; g.num_edges()];
    for (li, erange) in g.edge_ranges.iter().enumerate() {
        let send_range = &g.layer_ranges[li];
        let n_in = send_range.len();
        // index old edges of this layer by (old_r_local, old_s_local)
        let estart = erange.start;
        for e in erange.clone() {
            let old_r = g.receivers[e];
            let old_s = g.senders[e];
            let new_r = unperm[old_r];
            let new_s = unperm[old_s];
            let r_local = new_r - g.layer_ranges[li + 1].start;
            let s_local = new_s - send_range.start;
            let new_e = estart + r_local * n_in + s_local;
            senders[new_e] = new_s;
            receivers[new_e] = new_r;
            let qr = scale_all[old_r];
            let f = inv_all[old_s];
            let src = &g.edge_features.data()[e * d_e..(e + 1) * d_e];
            for (k, &v) in src.iter().enumerate() {
                edge[new_e * d_e + k] = qr * v * f;
            }
        }
    }
    WeightGraph {
        vertex_features: vertex,
        edge_features: crate::tensor::Tensor::new(vec![g.num_edges(), d_e], edge).expect("edge shape"),
        senders,
        receivers,
        layer_ranges: g.layer_ranges.clone(),
        edge_ranges: g.edge_ranges.clone(),
        enc: g.enc,
    }
}

/// Max logit deviation between the original and transformed network over a
/// batch of inputs.
pub fn function_preserved(
    arch: &ArchSpec,
    theta: &ParamVector,
    theta_t: &ParamVector,
    batch: &ImageBatch,
) -> Result<f64> {
    let a = forward_logits(arch, theta, batch)?;
    let b = forward_logits(arch, theta_t, batch)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

/// Theoretical scaling gauge freedom of a whole network: the total conv
/// channel count for CNNs, input plus hidden unit counts for MLPs (for tanh
/// these count independent sign choices). A single isolated layer has both
/// sides free.
pub fn gauge_dimension(arch: &ArchSpec) -> usize {
    if arch.is_cnn() {
        return arch
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .sum();
    }
    let sizes = arch.graph_layer_sizes();
    if sizes.len() == 2 {
        sizes[0] + sizes[1]
    } else {
        sizes[..sizes.len() - 1].iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, toy_dataset, InitKind};
    use crate::rng::substream;
    use crate::wgraph::{decode, encode};

    fn random_theta(arch: &ArchSpec, seed: u64) -> ParamVector {
        let mut rng = substream(seed, "gauge-test");
        init_params(arch, InitKind::Normal, 0.3, &mut rng).unwrap()
    }

    #[test]
    fn identity_gauge_is_a_no_op() {
        let arch = ArchSpec::mlp_zoo();
        let theta = random_theta(&arch, 1);
        let psi = GaugeTransform::identity(&arch);
        assert_eq!(apply_to_params(&arch, &theta, &psi).unwrap(), theta);
    }

    #[test]
    fn swap_bookkeeping_on_single_hidden_layer() {
        let arch = ArchSpec::mlp(3, &[2], 2, Activation::Tanh);
        let theta = random_theta(&arch, 2);
        let mut psi = GaugeTransform::identity(&arch);
        psi.hidden[0].perm = vec![1, 0];
        let t = apply_to_params(&arch, &theta, &psi).unwrap();
        // rows of W1 and entries of b1 swapped
        assert_eq!(t.weight(0)[..3], theta.weight(0)[3..6]);
        assert_eq!(t.weight(0)[3..6], theta.weight(0)[..3]);
        assert_eq!(t.bias(0)[0], theta.bias(0)[1]);
        // columns of W2 swapped
        for r in 0..2 {
            assert_eq!(t.weight(1)[r * 2], theta.weight(1)[r * 2 + 1]);
            assert_eq!(t.weight(1)[r * 2 + 1], theta.weight(1)[r * 2]);
        }
    }

    #[test]
    fn tanh_gauge_preserves_function_on_zoo_mlp() {
        let arch = ArchSpec::mlp_zoo();
        let data = toy_dataset(3, 64, 10, 10).unwrap();
        let mut rng = substream(4, "psi");
        for trial in 0..5 {
            let theta = random_theta(&arch, 100 + trial);
            let psi = sample_gauge(&arch, &mut rng);
            let t = apply_to_params(&arch, &theta, &psi).unwrap();
            let dev = function_preserved(&arch, &theta, &t, &data.train).unwrap();
            assert!(dev <= 1e-12, "trial {} deviation {}", trial, dev);
        }
    }

    #[test]
    fn relu_gauge_preserves_function_on_cnn() {
        let arch = ArchSpec::cnn_zoo(Activation::Relu, 8, 8);
        let data = toy_dataset(5, 16, 10, 10).unwrap();
        let mut rng = substream(6, "psi-cnn");
        for trial in 0..3 {
            let theta = random_theta(&arch, 200 + trial);
            let psi = sample_gauge(&arch, &mut rng);
            let t = apply_to_params(&arch, &theta, &psi).unwrap();
            let dev = function_preserved(&arch, &theta, &t, &data.train).unwrap();
            assert!(dev <= 1e-10, "trial {} deviation {}", trial, dev);
        }
    }

    #[test]
    fn illegal_negative_scale_breaks_relu_nets() {
        let arch = ArchSpec::mlp(64, &[6, 5], 10, Activation::Relu);
        let data = toy_dataset(7, 32, 10, 10).unwrap();
        let theta = random_theta(&arch, 3);
        let mut psi = GaugeTransform::identity(&arch);
        psi.hidden[0].scale[2] = -1.0;
        assert!(apply_to_params(&arch, &theta, &psi).is_err());
        let t = apply_to_params_unchecked(&arch, &theta, &psi);
        let dev = function_preserved(&arch, &theta, &t, &data.train).unwrap();
        assert!(dev > 1e-3, "deviation {} unexpectedly small", dev);
    }

    #[test]
    fn commuting_square_with_encode_is_bitwise() {
        for arch in [ArchSpec::mlp(5, &[4, 3], 2, Activation::Tanh), ArchSpec::cnn_zoo(Activation::Tanh, 8, 8)] {
            let mut rng = substream(9, "square");
            for trial in 0..5 {
                let theta = random_theta(&arch, 300 + trial);
                let psi = sample_gauge(&arch, &mut rng);
                let a = encode(&arch, &apply_to_params(&arch, &theta, &psi).unwrap()).unwrap();
                let b = apply_to_graph(&encode(&arch, &theta).unwrap(), &psi);
                assert_eq!(a, b, "trial {}", trial);
            }
        }
    }

    #[test]
    fn sign_flip_on_one_vertex_flips_its_features() {
        let arch = ArchSpec::mlp(3, &[2], 2, Activation::Tanh);
        let theta = random_theta(&arch, 11);
        let g = encode(&arch, &theta).unwrap();
        let mut psi = GaugeTransform::identity(&arch);
        psi.hidden[0].scale[0] = -1.0;
        let gt = apply_to_graph(&g, &psi);
        let v = g.layer_ranges[1].start;
        assert_eq!(gt.vertex_features.data()[v], -g.vertex_features.data()[v]);
        for e in 0..g.num_edges() {
            let flip = (g.receivers[e] == v) as i32 - (g.senders[e] == v) as i32;
            let want = if flip == 0 { 1.0 } else { -1.0 };
            for k in 0..g.enc.d_e {
                assert_eq!(gt.edge_features.data()[e * g.enc.d_e + k], want * g.edge_features.data()[e * g.enc.d_e + k]);
            }
        }
        // decoding the transformed graph matches transforming the params
        assert_eq!(decode(&arch, &gt).unwrap(), apply_to_params(&arch, &theta, &psi).unwrap());
    }

    #[test]
    fn sampled_gauges_respect_constraints_and_seed() {
        let arch = ArchSpec::mlp_zoo();
        let a = sample_gauge(&arch, &mut substream(5, "s"));
        let b = sample_gauge(&arch, &mut substream(5, "s"));
        assert_eq!(a, b);
        for lg in &a.hidden {
            assert!(lg.scale.iter().all(|&q| q == 1.0 || q == -1.0));
        }
        let relu = ArchSpec::mlp(8, &[4], 3, Activation::Relu);
        let c = sample_gauge(&relu, &mut substream(5, "s"));
        for lg in &c.hidden {
            assert!(lg.scale.iter().all(|&q| q > 0.0 && (0.1..=10.0).contains(&q)));
        }
    }

    #[test]
    fn group_laws_hold() {
        let arch = ArchSpec::mlp(6, &[5, 4], 3, Activation::Relu);
        let theta = random_theta(&arch, 17);
        let mut rng = substream(21, "laws");
        let p1 = sample_gauge(&arch, &mut rng);
        let p2 = sample_gauge(&arch, &mut rng);
        let seq = apply_to_params(&arch, &apply_to_params(&arch, &theta, &p1).unwrap(), &p2).unwrap();
        let composed = apply_to_params(&arch, &theta, &p2.compose(&p1)).unwrap();
        for (a, b) in seq.values.iter().zip(&composed.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let back = apply_to_params(&arch, &apply_to_params(&arch, &theta, &p1).unwrap(), &p1.inverse()).unwrap();
        for (a, b) in back.values.iter().zip(&theta.values) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_formulas_match_reference_archs() {
        assert_eq!(gauge_dimension(&ArchSpec::mlp_zoo()), 160);
        assert_eq!(gauge_dimension(&ArchSpec::cnn_zoo(Activation::Tanh, 8, 8)), 48);
        assert_eq!(gauge_dimension(&ArchSpec::mlp(2, &[], 3, Activation::Tanh)), 5);
    }
}
