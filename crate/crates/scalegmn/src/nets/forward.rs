//! Tape-recorded forward pass of a target network, differentiable with
//! respect to its parameters and anything upstream of them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Activation, ArchSpec, ImageBatch, InputShape, LayerKind, NetError, ParamVector, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// Per-layer weight/bias variables on a tape, aligned with
/// [`ArchSpec::param_layers`].
#[derive(Debug, Clone)]
pub struct ThetaVars {
    pub weights: Vec<VarId>,
    pub biases: Vec<VarId>,
}

/// Record a parameter vector onto a tape as per-layer leaves.
pub fn bind_params(tape: &mut Tape, arch: &ArchSpec, theta: &ParamVector, requires_grad: bool) -> Result<ThetaVars> {
    if !theta.matches(arch) {
        return Err(NetError::LayoutMismatch("parameters do not fit architecture".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..theta.num_layers() {
        let w = Tensor::new(theta.weight_shape(l).to_vec(), theta.weight(l).to_vec())?;
        let b = Tensor::vector(theta.bias(l));
        weights.push(tape.leaf(w, requires_grad)?);
        biases.push(tape.leaf(b, requires_grad)?);
    }
    Ok(ThetaVars { weights, biases })
}

enum Flow {
    Flat(VarId),
    Image(VarId),
}

/// Forward pass producing `[batch, num_classes]` logits.
pub fn forward(tape: &mut Tape, arch: &ArchSpec, theta: &ThetaVars, batch: &ImageBatch) -> Result<VarId> {
    let expected: usize = arch.param_layers().len();
    if theta.weights.len() != expected || theta.biases.len() != expected {
        return Err(NetError::LayoutMismatch(format!(
            "{} weight vars for {} parameterized layers",
            theta.weights.len(),
            expected
        )));
    }
    let b = batch.len();
    let x0 = tape.constant(batch.pixels.clone())?;
    let mut flow = match arch.input {
        InputShape::Flat(d) => Flow::Flat(tape.reshape(x0, vec![b, d])?),
        InputShape::Image { .. } => Flow::Image(x0),
    };
    let last_param = arch.layers.iter().rposition(|l| l.has_params()).unwrap();
    let mut pi = 0;
    for (i, layer) in arch.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Dense { in_features, .. } => {
                let x = match flow {
                    Flow::Flat(v) => v,
                    Flow::Image(v) => tape.reshape(v, vec![b, in_features])?,
                };
                let z = tape.matmul_nt(x, theta.weights[pi])?;
                let z = tape.add_row(z, theta.biases[pi])?;
                let z = if i < last_param { activate(tape, arch.activation, z)? } else { z };
                flow = Flow::Flat(z);
                pi += 1;
            }
            LayerKind::Conv2d { stride, padding, .. } => {
                let x = match flow {
                    Flow::Image(v) => v,
                    Flow::Flat(_) => return Err(NetError::InvalidArch("conv after flat data".into())),
                };
                let z = tape.conv2d(x, theta.weights[pi], stride, padding)?;
                let z = tape.channel_bias(z, theta.biases[pi])?;
                let z = if i < last_param { activate(tape, arch.activation, z)? } else { z };
                flow = Flow::Image(z);
                pi += 1;
            }
            LayerKind::GlobalAvgPool => {
                let x = match flow {
                    Flow::Image(v) => v,
                    Flow::Flat(_) => return Err(NetError::InvalidArch("pool after flat data".into())),
                };
                flow = Flow::Flat(tape.gap(x)?);
            }
        }
    }
    let logits = match flow {
        Flow::Flat(v) => v,
        Flow::Image(v) => tape.reshape(v, vec![b, arch.num_classes])?,
    };
    if tape.shape(logits) != [b, arch.num_classes] {
        return Err(NetError::InvalidArch(format!(
            "logits shape {:?}, expected [{}, {}]",
            tape.shape(logits),
            b,
            arch.num_classes
        )));
    }
    Ok(logits)
}

fn activate(tape: &mut Tape, act: Activation, z: VarId) -> crate::tensor::Result<VarId> {
    match act {
        Activation::Tanh => tape.tanh(z),
        Activation::Relu => tape.relu(z),
    }
}

/// Convenience: logits as a plain tensor, no gradients kept.
pub fn forward_logits(arch: &ArchSpec, theta: &ParamVector, batch: &ImageBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, arch, theta, false)?;
    let logits = forward(&mut tape, arch, &vars, batch)?;
    Ok(tape.value(logits).clone())
}

/// Fraction of the batch classified correctly (argmax logits).
pub fn accuracy(arch: &ArchSpec, theta: &ParamVector, batch: &ImageBatch) -> Result<f64> {
    let logits = forward_logits(arch, theta, batch)?;
    let c = arch.num_classes;
    let mut hits = 0usize;
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Weight-initializer families used when spawning fresh target networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    XavierNormal,
    HeNormal,
    Orthogonal,
    Normal,
    TruncatedNormal,
}

/// Draw parameters for `arch`. `variance` scales each family's base spread:
/// it is the variance of plain normal draws and the squared gain for the
/// fan-scaled and orthogonal families. Biases start at zero.
pub fn init_params<R: Rng>(arch: &ArchSpec, kind: InitKind, variance: f64, rng: &mut R) -> Result<ParamVector> {
    let mut theta = ParamVector::zeros(arch);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (li, layer) in arch.param_layers().iter().enumerate() {
        let (fan_in, fan_out) = match layer.kind {
            LayerKind::Dense { in_features, out_features } => (in_features, out_features),
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                (in_channels * kernel.0 * kernel.1, out_channels * kernel.0 * kernel.1)
            }
            LayerKind::GlobalAvgPool => unreachable!(),
        };
        let w = theta.weight_mut(li);
        match kind {
            InitKind::Normal => {
                let std = variance.sqrt();
                for v in w.iter_mut() {
                    *v = std * std_normal.sample(rng);
                }
            }
            InitKind::TruncatedNormal => {
                let std = variance.sqrt();
                for v in w.iter_mut() {
                    let mut z = std_normal.sample(rng);
                    while z.abs() > 2.0 {
                        z = std_normal.sample(rng);
                    }
                    *v = std * z;
                }
            }
            InitKind::XavierNormal => {
                let std = (variance * 2.0 / (fan_in + fan_out) as f64).sqrt();
                for v in w.iter_mut() {
                    *v = std * std_normal.sample(rng);
                }
            }
            InitKind::HeNormal => {
                let std = (variance * 2.0 / fan_in as f64).sqrt();
                for v in w.iter_mut() {
                    *v = std * std_normal.sample(rng);
                }
            }
            InitKind::Orthogonal => {
                let rows = w.len() / fan_in.max(1);
                orthogonal_fill(w, rows, fan_in, variance.sqrt(), rng);
            }
        }
    }
    Ok(theta)
}

/// Fill `w` (viewed as `rows x cols`) with a gain-scaled orthonormal-row
/// matrix via modified Gram-Schmidt on gaussian draws. When `rows > cols`
/// orthonormality holds per `cols`-sized group of rows.
fn orthogonal_fill<R: Rng>(w: &mut [f64], rows: usize, cols: usize, gain: f64, rng: &mut R) {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut done = 0;
    while done < rows {
        let group = (rows - done).min(cols);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(group);
        for _ in 0..group {
            loop {
                let mut v: Vec<f64> = (0..cols).map(|_| std_normal.sample(rng)).collect();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= dot * bi;
                    }
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    for vi in &mut v {
                        *vi /= norm;
                    }
                    basis.push(v);
                    break;
                }
            }
        }
        for (r, v) in basis.into_iter().enumerate() {
            let row = done + r;
            for (c, x) in v.into_iter().enumerate() {
                w[row * cols + c] = gain * x;
            }
        }
        done += group;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::toy_dataset;
    use crate::rng::substream;

    #[test]
    fn zero_parameters_give_zero_logits() {
        let arch = ArchSpec::mlp(64, &[16], 10, Activation::Tanh);
        let theta = ParamVector::zeros(&arch);
        let data = toy_dataset(3, 20, 10, 10).unwrap();
        let logits = forward_logits(&arch, &theta, &data.val).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_forward_shapes_compose() {
        let arch = ArchSpec::cnn_zoo(Activation::Relu, 8, 8);
        arch.validate().unwrap();
        let mut rng = substream(11, "init");
        let theta = init_params(&arch, InitKind::HeNormal, 0.5, &mut rng).unwrap();
        let data = toy_dataset(5, 20, 10, 10).unwrap();
        let logits = forward_logits(&arch, &theta, &data.test).unwrap();
        assert_eq!(logits.shape(), &[10, 10]);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let arch = ArchSpec::mlp(8, &[4], 3, Activation::Tanh);
        let other = ArchSpec::mlp(8, &[5], 3, Activation::Tanh);
        let theta = ParamVector::zeros(&other);
        let mut tape = Tape::new();
        assert!(bind_params(&mut tape, &arch, &theta, false).is_err());
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut w = vec![0.0; 4 * 6];
        let mut rng = substream(2, "orth");
        orthogonal_fill(&mut w, 4, 6, 1.0, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..6).map(|c| w[i * 6 + c] * w[j * 6 + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "rows {} {}", i, j);
            }
        }
    }
}
