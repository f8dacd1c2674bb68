//! Exhaustive admissibility analysis of diagonal scaling pairs. A pair
//! `(Q_rows, Q_cols)` is admissible for a weight space when
//! `Q_rows . W . Q_cols^-1` stays inside the space for every sampled member
//! `W`; for convolutional spaces that means cells tied to the same kernel
//! weight stay equal.

use rand::Rng;

use super::{GaugeError, Result};
use crate::nets::ConvMatrix;

/// Candidate values per diagonal entry: the sign group, or a positive grid
/// standing in for the continuous positive group.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleValues {
    Signs,
    PositiveGrid(Vec<f64>),
}

pub const DEFAULT_POSITIVE_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl ScaleValues {
    pub fn values(&self) -> Vec<f64> {
        match self {
            ScaleValues::Signs => vec![-1.0, 1.0],
            ScaleValues::PositiveGrid(g) => g.clone(),
        }
    }

    pub fn positive_default() -> Self {
        ScaleValues::PositiveGrid(DEFAULT_POSITIVE_GRID.to_vec())
    }
}

/// The structure class being preserved.
///
/// A dense layer is an unconstrained matrix with one free bias per output.
/// A conv layer is a kernel-tied matrix together with a shared bias
/// replicated across all spatial positions of the feature map; a scaling
/// pair keeps the layer convolutional only if both structures survive.
/// Weights-only preservation would also admit spatial sign modulations
/// (alternating row/column signs that remap the kernel), which the shared
/// bias rules out.
#[derive(Debug, Clone)]
pub enum StructureClass {
    /// Unconstrained dense matrices.
    Dense,
    /// Matrices realizable by a kernel through a fixed convolution
    /// structure, with a shared replicated bias.
    Conv(ConvMatrix),
}

/// A weight space `rows x cols` with its structure class.
#[derive(Debug, Clone)]
pub struct ScalingSpace {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub class: StructureClass,
}

impl ScalingSpace {
    pub fn mlp(rows: usize, cols: usize) -> Self {
        ScalingSpace { name: format!("mlp-{}x{}", rows, cols), rows, cols, class: StructureClass::Dense }
    }

    pub fn cnn(structure: ConvMatrix) -> Self {
        ScalingSpace {
            name: format!("cnn-{}x{}", structure.rows, structure.cols),
            rows: structure.rows,
            cols: structure.cols,
            class: StructureClass::Conv(structure),
        }
    }

    /// Draw one member of the class with entries bounded away from zero:
    /// the weight matrix plus the shared bias value (conv) or `None`
    /// (dense, where biases are per-output and unconstrained).
    fn sample<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Option<f64>) {
        let draw = |rng: &mut R| {
            let mag = rng.random_range(0.5..2.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        };
        match &self.class {
            StructureClass::Dense => ((0..self.rows * self.cols).map(|_| draw(rng)).collect(), None),
            StructureClass::Conv(m) => {
                let kernel: Vec<f64> = (0..m.kernel_len).map(|_| draw(rng)).collect();
                (m.with_kernel(&kernel).data, Some(draw(rng)))
            }
        }
    }

    /// Cells grouped by shared kernel weight; `None` for dense (no ties).
    fn tie_groups(&self) -> Option<Vec<Vec<usize>>> {
        match &self.class {
            StructureClass::Dense => None,
            StructureClass::Conv(m) => {
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m.kernel_len];
                for (cell, ki) in m.kernel_index.iter().enumerate() {
                    if let Some(k) = ki {
                        groups[*k].push(cell);
                    }
                }
                Some(groups)
            }
        }
    }
}

/// One admissible `(row scales, column scales)` pair.
pub type ScalePattern = (Vec<f64>, Vec<f64>);

/// Result of the exhaustive enumeration.
#[derive(Debug, Clone)]
pub struct AdmissibleSet {
    pub space: String,
    pub admissible: Vec<ScalePattern>,
    pub total_patterns: usize,
    pub value_count: usize,
    /// Admissible patterns whose weight action is the identity on every
    /// sampled member (the bias may still move).
    pub stabilizer: usize,
    /// `log_v(count)`: free value choices among the diagonal entries.
    pub dimension: f64,
    /// `log_v(count / stabilizer)`: freedom that actually moves the weights.
    pub effective_dimension: f64,
}

const ENUMERATION_BUDGET: usize = 2_000_000;
const TIE_TOL: f64 = 1e-9;

/// Enumerate every scaling pattern over the value set and keep those that map
/// all `n_samples` sampled members of the space back into the space.
pub fn admissible_scalings_bruteforce<R: Rng>(
    space: &ScalingSpace,
    values: &ScaleValues,
    n_samples: usize,
    rng: &mut R,
) -> Result<AdmissibleSet> {
    let vals = values.values();
    let digits = space.rows + space.cols;
    let total = (vals.len() as f64).powi(digits as i32);
    if total > ENUMERATION_BUDGET as f64 {
        return Err(GaugeError::TooLarge(format!(
            "{}^{} patterns exceed the {} budget",
            vals.len(),
            digits,
            ENUMERATION_BUDGET
        )));
    }
    let total = total as usize;
    let samples: Vec<(Vec<f64>, Option<f64>)> = (0..n_samples).map(|_| space.sample(rng)).collect();
    let groups = space.tie_groups();

    let mut admissible = Vec::new();
    let mut stabilizer = 0usize;
    let mut pattern = vec![0usize; digits];
    let mut q = vec![0.0f64; space.rows];
    let mut c_inv = vec![0.0f64; space.cols];
    for _ in 0..total {
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = vals[pattern[i]];
        }
        for (j, cj) in c_inv.iter_mut().enumerate() {
            *cj = 1.0 / vals[pattern[space.rows + j]];
        }
        let mut ok = true;
        let mut fixes_weights = true;
        'samples: for (w, bias) in &samples {
            match &groups {
                None => {
                    // dense space: membership is automatic; only the
                    // stabilizer needs the per-cell comparison
                    for r in 0..space.rows {
                        for cc in 0..space.cols {
                            let v = w[r * space.cols + cc];
                            let t = q[r] * v * c_inv[cc];
                            if (t - v).abs() > TIE_TOL * v.abs().max(1.0) {
                                fixes_weights = false;
                                break;
                            }
                        }
                        if !fixes_weights {
                            break;
                        }
                    }
                    if !fixes_weights {
                        break 'samples;
                    }
                }
                Some(groups) => {
                    // shared bias: q_i * b must stay equal across rows
                    if let Some(b) = bias {
                        let ref_b = q[0] * b;
                        for &qi in &q[1..] {
                            if (qi * b - ref_b).abs() > TIE_TOL * ref_b.abs().max(1.0) {
                                ok = false;
                                break 'samples;
                            }
                        }
                    }
                    for cells in groups {
                        if cells.is_empty() {
                            continue;
                        }
                        let first = cells[0];
                        let (r0, c0) = (first / space.cols, first % space.cols);
                        let ref_v = q[r0] * w[first] * c_inv[c0];
                        if (ref_v - w[first]).abs() > TIE_TOL * w[first].abs().max(1.0) {
                            fixes_weights = false;
                        }
                        for &cell in &cells[1..] {
                            let (r, cc) = (cell / space.cols, cell % space.cols);
                            let t = q[r] * w[cell] * c_inv[cc];
                            if (t - ref_v).abs() > TIE_TOL * ref_v.abs().max(1.0) {
                                ok = false;
                                break;
                            }
                            if (t - w[cell]).abs() > TIE_TOL * w[cell].abs().max(1.0) {
                                fixes_weights = false;
                            }
                        }
                        if !ok {
                            break 'samples;
                        }
                    }
                }
            }
        }
        if ok {
            let qv = q.clone();
            let cv: Vec<f64> = pattern[space.rows..].iter().map(|&p| vals[p]).collect();
            admissible.push((qv, cv));
            if fixes_weights {
                stabilizer += 1;
            }
        }
        // increment mixed-radix counter
        for d in pattern.iter_mut() {
            *d += 1;
            if *d < vals.len() {
                break;
            }
            *d = 0;
        }
    }
    let count = admissible.len().max(1) as f64;
    let base = (vals.len() as f64).ln();
    Ok(AdmissibleSet {
        space: space.name.clone(),
        dimension: count.ln() / base,
        effective_dimension: (count / stabilizer.max(1) as f64).ln() / base,
        admissible,
        total_patterns: total,
        value_count: vals.len(),
        stabilizer,
    })
}

/// Verdict of the structured-vs-dense comparison on identical dimensions.
#[derive(Debug, Clone)]
pub struct SubsetVerdict {
    pub mlp: AdmissibleSet,
    pub cnn: AdmissibleSet,
    /// Every CNN-admissible pattern is MLP-admissible.
    pub contained: bool,
    /// An MLP-admissible pattern rejected by the CNN space, when one exists.
    pub witness: Option<ScalePattern>,
    pub strict: bool,
}

/// Run both spaces at the conv structure's dimensions and compare.
pub fn cnn_vs_mlp_subset<R: Rng>(
    structure: &ConvMatrix,
    values: &ScaleValues,
    n_samples: usize,
    rng: &mut R,
) -> Result<SubsetVerdict> {
    let cnn_space = ScalingSpace::cnn(structure.clone());
    let mlp_space = ScalingSpace::mlp(structure.rows, structure.cols);
    let cnn = admissible_scalings_bruteforce(&cnn_space, values, n_samples, rng)?;
    let mlp = admissible_scalings_bruteforce(&mlp_space, values, n_samples, rng)?;
    let contained = cnn.admissible.iter().all(|p| mlp.admissible.contains(p));
    let witness = mlp.admissible.iter().find(|p| !cnn.admissible.contains(p)).cloned();
    let strict = contained && witness.is_some();
    Ok(SubsetVerdict { mlp, cnn, contained, witness, strict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::toeplitz_matrix;
    use crate::rng::substream;

    /// The 3x3-input 2x2-kernel stride-1 structure whose 4x9 matrix anchors
    /// the scaling analysis.
    fn reference_structure() -> ConvMatrix {
        toeplitz_matrix(3, 3, 2, 2, 1, 0, &[1.0, -1.0, 2.0, -2.0]).unwrap()
    }

    #[test]
    fn mlp_sign_space_admits_every_pattern() {
        let space = ScalingSpace::mlp(3, 4);
        let set = admissible_scalings_bruteforce(&space, &ScaleValues::Signs, 5, &mut substream(1, "bf")).unwrap();
        assert_eq!(set.admissible.len(), 128);
        assert_eq!(set.total_patterns, 128);
        assert!((set.dimension - 7.0).abs() < 1e-12);
        assert_eq!(set.stabilizer, 2); // all +1 and all -1
        assert!((set.effective_dimension - 6.0).abs() < 1e-12);
    }

    #[test]
    fn cnn_sign_space_admits_only_uniform_signs() {
        let space = ScalingSpace::cnn(reference_structure());
        let set = admissible_scalings_bruteforce(&space, &ScaleValues::Signs, 5, &mut substream(2, "bf")).unwrap();
        assert_eq!(set.admissible.len(), 4);
        for (q, c) in &set.admissible {
            assert!(q.iter().all(|&v| v == q[0]), "rows not uniform: {:?}", q);
            assert!(c.iter().all(|&v| v == c[0]), "cols not uniform: {:?}", c);
        }
        assert!((set.dimension - 2.0).abs() < 1e-12);
        assert_eq!(set.stabilizer, 2); // (+,+) and (-,-)
        assert!((set.effective_dimension - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cnn_positive_grid_admits_only_uniform_scales() {
        // a 1-D structure small enough for the 5-value grid: length-4 input,
        // width-2 kernel, stride 1 -> 3x4 matrix whose ties chain every
        // column together, 5^7 patterns
        let structure = toeplitz_matrix(1, 4, 1, 2, 1, 0, &[1.0, 2.0]).unwrap();
        assert_eq!((structure.rows, structure.cols), (3, 4));
        let space = ScalingSpace::cnn(structure);
        let set =
            admissible_scalings_bruteforce(&space, &ScaleValues::positive_default(), 5, &mut substream(3, "bf"))
                .unwrap();
        assert_eq!(set.admissible.len(), 25);
        for (q, c) in &set.admissible {
            assert!(q.iter().all(|&v| v == q[0]));
            assert!(c.iter().all(|&v| v == c[0]));
        }
        assert!((set.effective_dimension - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mlp_positive_grid_is_unconstrained() {
        let space = ScalingSpace::mlp(2, 3);
        let set =
            admissible_scalings_bruteforce(&space, &ScaleValues::positive_default(), 5, &mut substream(4, "bf"))
                .unwrap();
        assert_eq!(set.admissible.len(), 5usize.pow(5));
        assert!((set.dimension - 5.0).abs() < 1e-12);
    }

    #[test]
    fn strict_subset_verdict_on_reference_structure() {
        let verdict = cnn_vs_mlp_subset(&reference_structure(), &ScaleValues::Signs, 5, &mut substream(5, "bf")).unwrap();
        assert_eq!(verdict.mlp.admissible.len(), 1 << 13);
        assert_eq!(verdict.cnn.admissible.len(), 4);
        assert!(verdict.contained);
        assert!(verdict.witness.is_some());
        assert!(verdict.strict);
    }

    #[test]
    fn oversized_enumeration_is_rejected() {
        let space = ScalingSpace::mlp(10, 10);
        let err = admissible_scalings_bruteforce(&space, &ScaleValues::positive_default(), 5, &mut substream(6, "bf"));
        assert!(err.is_err());
    }
}
