//! Materialized matrix view of 2-D convolutions. A stride-1 unpadded
//! convolution yields a doubly-block Toeplitz matrix; general stride/padding
//! keeps the weight-sharing structure this module tracks cell by cell.

use super::{NetError, Result};
use crate::tensor::conv_out;

/// Dense matrix `M` with `vec(conv(x)) = M . vec(x)` for one channel pair,
/// plus the structural map recording which kernel position each cell holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
    /// For each cell, the kernel index (`ky*kw + kx`) it carries, or `None`
    /// for structural zeros.
    pub kernel_index: Vec<Option<usize>>,
    pub kernel_len: usize,
}

impl ConvMatrix {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `M . v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] = row.iter().zip(v).map(|(m, x)| m * x).sum();
        }
        out
    }

    /// Kernel indices structurally present in one row.
    fn row_weights(&self, r: usize) -> Vec<usize> {
        let mut w: Vec<usize> = self.kernel_index[r * self.cols..(r + 1) * self.cols]
            .iter()
            .flatten()
            .copied()
            .collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    /// Rebuild the value buffer from a kernel through the structural map.
    /// Used by the gauge admissibility checks to sample the structure class.
    pub fn with_kernel(&self, kernel: &[f64]) -> ConvMatrix {
        assert_eq!(kernel.len(), self.kernel_len);
        let data = self
            .kernel_index
            .iter()
            .map(|ki| ki.map_or(0.0, |k| kernel[k]))
            .collect();
        ConvMatrix { data, ..self.clone() }
    }
}

/// Build the matrix realizing a single-channel 2-D cross-correlation of an
/// `in_h x in_w` input with the given kernel.
pub fn toeplitz_matrix(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    kernel: &[f64],
) -> Result<ConvMatrix> {
    if kernel.len() != kh * kw {
        return Err(NetError::BadConv(format!("kernel has {} values, expected {}", kernel.len(), kh * kw)));
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(NetError::BadConv("kernel extents and stride must be >= 1".into()));
    }
    let (oh, ow) =
        conv_out(in_h, in_w, kh, kw, stride, pad).ok_or_else(|| NetError::BadConv("non-positive output extent".into()))?;
    let rows = oh * ow;
    let cols = in_h * in_w;
    let mut data = vec![0.0; rows * cols];
    let mut kernel_index = vec![None; rows * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let r = oy * ow + ox;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let c = iy as usize * in_w + ix as usize;
                    let k = ky * kw + kx;
                    data[r * cols + c] = kernel[k];
                    kernel_index[r * cols + c] = Some(k);
                }
            }
        }
    }
    Ok(ConvMatrix { rows, cols, data, kernel_index, kernel_len: kh * kw })
}

/// True when every pair of consecutive output rows shares at least one kernel
/// weight, the weight-sharing property the scaling analysis relies on. A
/// single-row matrix has no cross-row sharing and reports `false`.
pub fn shares_rows(m: &ConvMatrix) -> bool {
    if m.rows < 2 {
        return false;
    }
    let mut prev = m.row_weights(0);
    for r in 1..m.rows {
        let cur = m.row_weights(r);
        if !prev.iter().any(|w| cur.binary_search(w).is_ok()) {
            return false;
        }
        prev = cur;
    }
    true
}

/// Full multichannel conv-layer matrix: a `[out_c, in_c]` grid of per-channel
/// Toeplitz blocks acting on channel-major vectorized input.
pub fn conv_layer_matrix(
    in_c: usize,
    out_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    kernels: &[f64],
) -> Result<(Vec<f64>, usize, usize)> {
    if kernels.len() != out_c * in_c * kh * kw {
        return Err(NetError::BadConv("kernel buffer size mismatch".into()));
    }
    let (oh, ow) =
        conv_out(in_h, in_w, kh, kw, stride, pad).ok_or_else(|| NetError::BadConv("non-positive output extent".into()))?;
    let block_rows = oh * ow;
    let block_cols = in_h * in_w;
    let rows = out_c * block_rows;
    let cols = in_c * block_cols;
    let mut data = vec![0.0; rows * cols];
    for o in 0..out_c {
        for i in 0..in_c {
            let k = &kernels[(o * in_c + i) * kh * kw..(o * in_c + i + 1) * kh * kw];
            let block = toeplitz_matrix(in_h, in_w, kh, kw, stride, pad, k)?;
            for br in 0..block_rows {
                let dst = (o * block_rows + br) * cols + i * block_cols;
                data[dst..dst + block_cols].copy_from_slice(&block.data[br * block_cols..(br + 1) * block_cols]);
            }
        }
    }
    Ok((data, rows, cols))
}

/// The fixed linear map realizing global average pooling over channel-major
/// `[c, h, w]` input: a `[c, c*h*w]` matrix with `1/(h*w)` entries.
pub fn gap_matrix(c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let hw = h * w;
    let mut data = vec![0.0; c * c * hw];
    for ch in 0..c {
        for i in 0..hw {
            data[ch * c * hw + ch * hw + i] = 1.0 / hw as f64;
        }
    }
    (data, c, c * hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    /// Direct sliding-window cross-correlation, the independent oracle.
    fn conv_direct(x: &[f64], in_h: usize, in_w: usize, k: &[f64], kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<f64> {
        let (oh, ow) = conv_out(in_h, in_w, kh, kw, stride, pad).unwrap();
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && iy < in_h as isize && ix >= 0 && ix < in_w as isize {
                            acc += k[ky * kw + kx] * x[iy as usize * in_w + ix as usize];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn reference_two_by_two_kernel_matrix() {
        // 3x3 input, 2x2 kernel (k1..k4), stride 1, no padding -> 4x9.
        let (k1, k2, k3, k4) = (1.0, -1.0, 2.0, -2.0);
        let m = toeplitz_matrix(3, 3, 2, 2, 1, 0, &[k1, k2, k3, k4]).unwrap();
        assert_eq!((m.rows, m.cols), (4, 9));
        let want = [
            [k1, k2, 0., k3, k4, 0., 0., 0., 0.],
            [0., k1, k2, 0., k3, k4, 0., 0., 0.],
            [0., 0., 0., k1, k2, 0., k3, k4, 0.],
            [0., 0., 0., 0., k1, k2, 0., k3, k4],
        ];
        for r in 0..4 {
            for c in 0..9 {
                assert_eq!(m.at(r, c), want[r][c], "cell ({}, {})", r, c);
            }
        }
        assert!(shares_rows(&m));
    }

    #[test]
    fn one_by_one_kernel_is_scaled_identity() {
        let m = toeplitz_matrix(3, 3, 1, 1, 1, 0, &[2.5]).unwrap();
        assert_eq!((m.rows, m.cols), (9, 9));
        for r in 0..9 {
            for c in 0..9 {
                assert_eq!(m.at(r, c), if r == c { 2.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn degenerate_stride_has_no_row_sharing() {
        let m = toeplitz_matrix(2, 2, 1, 1, 2, 0, &[1.0]).unwrap();
        assert!(!shares_rows(&m));
    }

    #[test]
    fn matvec_matches_direct_convolution() {
        let mut rng = substream(17, "toeplitz");
        for trial in 0..50 {
            let kh = rng.random_range(1..=3usize);
            let kw = rng.random_range(1..=3usize);
            let stride = rng.random_range(1..=kh.min(kw));
            // half-kernel padding keeps edge rows overlapping on kernel weights
            let pad = rng.random_range(0..=(kh.min(kw) - 1) / 2);
            let in_h = rng.random_range(kh.max(2)..=7usize);
            let in_w = rng.random_range(kw.max(2)..=7usize);
            let kernel: Vec<f64> = (0..kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..in_h * in_w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = toeplitz_matrix(in_h, in_w, kh, kw, stride, pad, &kernel).unwrap();
            let via_matrix = m.matvec(&x);
            let direct = conv_direct(&x, in_h, in_w, &kernel, kh, kw, stride, pad);
            for (a, b) in via_matrix.iter().zip(&direct) {
                assert!((a - b).abs() <= 1e-12, "trial {}", trial);
            }
            if m.rows >= 2 {
                assert!(
                    shares_rows(&m),
                    "trial {} lost row sharing: k {}x{} stride {} pad {} input {}x{}",
                    trial, kh, kw, stride, pad, in_h, in_w
                );
            }
        }
    }

    #[test]
    fn strided_five_by_five_case() {
        let mut rng = substream(33, "stride2");
        let kernel: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = toeplitz_matrix(5, 5, 3, 3, 2, 0, &kernel).unwrap();
        let direct = conv_direct(&x, 5, 5, &kernel, 3, 3, 2, 0);
        for (a, b) in m.matvec(&x).iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_output_is_an_error() {
        assert!(toeplitz_matrix(2, 2, 3, 3, 1, 0, &[0.0; 9]).is_err());
    }

    #[test]
    fn multichannel_blocks_match_direct_conv() {
        let mut rng = substream(8, "multi");
        let (inc, outc, h, w, kh, kw, s, p) = (2, 3, 5, 4, 2, 2, 1, 0);
        let kernels: Vec<f64> = (0..outc * inc * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..inc * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (m, rows, cols) = conv_layer_matrix(inc, outc, h, w, kh, kw, s, p, &kernels).unwrap();
        let mut via = vec![0.0; rows];
        for r in 0..rows {
            via[r] = m[r * cols..(r + 1) * cols].iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        let (oh, ow) = conv_out(h, w, kh, kw, s, p).unwrap();
        for o in 0..outc {
            let mut acc = vec![0.0; oh * ow];
            for i in 0..inc {
                let k = &kernels[(o * inc + i) * kh * kw..(o * inc + i + 1) * kh * kw];
                let part = conv_direct(&x[i * h * w..(i + 1) * h * w], h, w, k, kh, kw, s, p);
                for (a, b) in acc.iter_mut().zip(&part) {
                    *a += b;
                }
            }
            for (j, want) in acc.iter().enumerate() {
                assert!((via[o * oh * ow + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gap_matrix_averages_channels() {
        let (m, rows, cols) = gap_matrix(2, 2, 2);
        assert_eq!((rows, cols), (2, 8));
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        for r in 0..rows {
            let got: f64 = m[r * cols..(r + 1) * cols].iter().zip(&x).map(|(a, b)| a * b).sum();
            let want = if r == 0 { 2.5 } else { 10.0 };
            assert!((got - want).abs() < 1e-15);
        }
    }
}
