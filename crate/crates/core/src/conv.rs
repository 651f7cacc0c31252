//! Multi-channel 2-D convolution in three equivalent forms: the direct sum,
//! unfold followed by one matrix product, and the masked product.
//!
//! Stride is 1 and padding is "same" (`kh / 2`, `kw / 2`), so a `b x d`
//! input produces `L = b * d` output positions. Kernels must have odd
//! height and width. Unfold rows and weight-matrix columns share the
//! `(channel, kernel row, kernel col)` order.

use crate::error::{Error, Result};
use crate::matrix::{dense_row, Matrix};
use crate::nm_patterns::BitMask;

/// A `channels x height x width` row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c_out` kernels of shape `c_in x kh x kw`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    data: Vec<f64>,
}

impl KernelStack {
    pub fn new(c_out: usize, c_in: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        check_odd(kh, kw)?;
        if data.len() != c_out * c_in * kh * kw {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {c_out} kernels of {c_in}x{kh}x{kw}",
                data.len()
            )));
        }
        Ok(Self {
            c_out,
            c_in,
            kh,
            kw,
            data,
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn get(&self, o: usize, c: usize, u: usize, s: usize) -> f64 {
        self.data[((o * self.c_in + c) * self.kh + u) * self.kw + s]
    }

    /// Kernel stack whose taps are zeroed wherever `mask` (over the
    /// flattened weight matrix) is zero.
    pub fn masked(&self, mask: &BitMask) -> Result<KernelStack> {
        let k = self.c_in * self.kh * self.kw;
        if mask.rows() != self.c_out || mask.cols() < k {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} for {} kernels of {k} taps",
                mask.shape(),
                self.c_out
            )));
        }
        let mut out = self.clone();
        for o in 0..self.c_out {
            for t in 0..k {
                if mask.get(o, t) == 0 {
                    out.data[o * k + t] = 0.0;
                }
            }
        }
        Ok(out)
    }
}

fn check_odd(kh: usize, kw: usize) -> Result<()> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::EvenKernel {
            height: kh,
            width: kw,
        });
    }
    Ok(())
}

/// Number of output positions for a `b x d` input, `kh x kw` kernel and
/// paddings `(ph, pw)` at stride 1.
pub fn output_positions(b: usize, d: usize, kh: usize, kw: usize, ph: usize, pw: usize) -> usize {
    (b + 2 * ph + 1).saturating_sub(kh) * (d + 2 * pw + 1).saturating_sub(kw)
}

/// Direct evaluation of the convolution sum with zero padding.
pub fn conv_direct(x: &Tensor3, kernels: &KernelStack) -> Result<Tensor3> {
    if x.channels != kernels.c_in {
        return Err(Error::DimensionMismatch(format!(
            "input has {} channels, kernels expect {}",
            x.channels, kernels.c_in
        )));
    }
    let (b, d) = (x.height, x.width);
    let (ph, pw) = (kernels.kh / 2, kernels.kw / 2);
    let mut out = Tensor3::zeros(kernels.c_out, b, d);
    for o in 0..kernels.c_out {
        for i in 0..b {
            for j in 0..d {
                let mut acc = 0.0;
                for c in 0..kernels.c_in {
                    for u in 0..kernels.kh {
                        let Some(r) = (i + u).checked_sub(ph).filter(|&r| r < b) else {
                            continue;
                        };
                        for s in 0..kernels.kw {
                            let Some(q) = (j + s).checked_sub(pw).filter(|&q| q < d) else {
                                continue;
                            };
                            acc += kernels.get(o, c, u, s) * x.get(c, r, q);
                        }
                    }
                }
                out.data[(o * b + i) * d + j] = acc;
            }
        }
    }
    Ok(out)
}

/// The unfolded input: one column of `c_in * kh * kw` taps per output
/// position, plus the spatial size needed to reshape the product.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedInput {
    matrix: Matrix,
    height: usize,
    width: usize,
}

impl UnfoldedInput {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of output positions `L`.
    pub fn positions(&self) -> usize {
        self.matrix.cols()
    }

    /// Appends all-zero rows so the row count matches an augmented weight
    /// width.
    pub fn padded_to(&self, rows: usize) -> Result<UnfoldedInput> {
        if rows < self.matrix.rows() {
            return Err(Error::DimensionMismatch(format!(
                "cannot pad {} rows to {rows}",
                self.matrix.rows()
            )));
        }
        let mut data = self.matrix.as_slice().to_vec();
        data.resize(rows * self.matrix.cols(), 0.0);
        Ok(UnfoldedInput {
            matrix: Matrix::from_vec(rows, self.matrix.cols(), data)?,
            height: self.height,
            width: self.width,
        })
    }
}

/// Unfold (im2col) with same zero padding.
pub fn unfold(x: &Tensor3, kernel_dims: (usize, usize)) -> Result<UnfoldedInput> {
    let (kh, kw) = kernel_dims;
    check_odd(kh, kw)?;
    if x.channels == 0 || x.height == 0 || x.width == 0 {
        return Err(Error::EmptyInput(format!("input {:?}", x.dims())));
    }
    let mut m = Matrix::zeros(x.channels * kh * kw, x.height * x.width);
    unfold_into(&x.data, x.dims(), kernel_dims, &mut m);
    Ok(UnfoldedInput {
        matrix: m,
        height: x.height,
        width: x.width,
    })
}

/// Writes the unfolded taps of `x` into `out`, which must be
/// `(c * kh * kw) x (b * d)`.
pub(crate) fn unfold_into(
    x: &[f64],
    (c_in, b, d): (usize, usize, usize),
    (kh, kw): (usize, usize),
    out: &mut Matrix,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let l = b * d;
    let data = out.as_mut_slice();
    for c in 0..c_in {
        let plane = &x[c * b * d..(c + 1) * b * d];
        for u in 0..kh {
            for s in 0..kw {
                let row = &mut data[((c * kh + u) * kw + s) * l..][..l];
                for i in 0..b {
                    let dst = &mut row[i * d..(i + 1) * d];
                    let Some(r) = (i + u).checked_sub(ph).filter(|&r| r < b) else {
                        dst.fill(0.0);
                        continue;
                    };
                    let src = &plane[r * d..(r + 1) * d];
                    for (j, v) in dst.iter_mut().enumerate() {
                        *v = match (j + s).checked_sub(pw) {
                            Some(q) if q < d => src[q],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unfold_into`]: scatters tap gradients back onto the input
/// and accumulates into `out`.
pub(crate) fn fold_add(
    cols: &Matrix,
    (c_in, b, d): (usize, usize, usize),
    (kh, kw): (usize, usize),
    out: &mut [f64],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let l = b * d;
    let data = cols.as_slice();
    for c in 0..c_in {
        let plane = &mut out[c * b * d..(c + 1) * b * d];
        for u in 0..kh {
            for s in 0..kw {
                let row = &data[((c * kh + u) * kw + s) * l..][..l];
                for i in 0..b {
                    let Some(r) = (i + u).checked_sub(ph).filter(|&r| r < b) else {
                        continue;
                    };
                    for j in 0..d {
                        if let Some(q) = (j + s).checked_sub(pw).filter(|&q| q < d) {
                            plane[r * d + q] += row[i * d + j];
                        }
                    }
                }
            }
        }
    }
}

/// Flattened kernels, optionally with trailing structural-zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    matrix: Matrix,
    real_cols: usize,
}

impl WeightMatrix {
    /// Wraps a matrix whose columns past `real_cols` are structural zeros.
    pub fn new(matrix: Matrix, real_cols: usize) -> Result<Self> {
        if real_cols > matrix.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{real_cols} real columns in a {}-wide matrix",
                matrix.cols()
            )));
        }
        for r in 0..matrix.rows() {
            if matrix.row(r)[real_cols..].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidParameter(
                    "structural columns must be zero".into(),
                ));
            }
        }
        Ok(Self { matrix, real_cols })
    }

    /// A matrix with no structural columns.
    pub fn dense(matrix: Matrix) -> Self {
        let real_cols = matrix.cols();
        Self { matrix, real_cols }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn real_cols(&self) -> usize {
        self.real_cols
    }

    pub fn structural_cols(&self) -> usize {
        self.matrix.cols() - self.real_cols
    }

    /// The matrix without its structural columns.
    pub fn unaugmented(&self) -> Matrix {
        Matrix::from_fn(self.rows(), self.real_cols, |r, c| self.matrix[(r, c)])
    }
}

/// Row `r` is kernel `r` flattened in `(channel, row, col)` order. With
/// `align4`, zero columns pad the width up to a multiple of 4.
pub fn kernels_to_weight_matrix(kernels: &KernelStack, align4: bool) -> WeightMatrix {
    let k = kernels.c_in * kernels.kh * kernels.kw;
    let cols = if align4 { k.div_ceil(4) * 4 } else { k };
    let matrix = Matrix::from_fn(kernels.c_out, cols, |r, c| {
        if c < k {
            kernels.data[r * k + c]
        } else {
            0.0
        }
    });
    WeightMatrix {
        matrix,
        real_cols: k,
    }
}

/// `W U(X)` reshaped to `c_out x b x d`. `u` may have either the real or the
/// augmented row count; structural columns always meet zero rows.
pub fn conv_matmul(w: &WeightMatrix, u: &UnfoldedInput) -> Result<Tensor3> {
    product_reshaped(w.matrix(), w.real_cols, u)
}

fn product_reshaped(w: &Matrix, real_cols: usize, u: &UnfoldedInput) -> Result<Tensor3> {
    let urows = u.matrix.rows();
    if urows != real_cols && urows != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "weights {:?} ({real_cols} real) vs unfolded {:?}",
            w.shape(),
            u.matrix.shape()
        )));
    }
    let l = u.matrix.cols();
    let mut out = vec![0.0; w.rows() * l];
    for (r, out_row) in out.chunks_mut(l.max(1)).enumerate().take(w.rows()) {
        dense_row(&w.row(r)[..urows], &u.matrix, out_row);
    }
    Tensor3::new(w.rows(), u.height, u.width, out)
}

/// A real-valued (soft) or binary (hard) mask over a weight matrix.
#[derive(Debug, Clone, Copy)]
pub enum MaskRef<'a> {
    Soft(&'a Matrix),
    Hard(&'a BitMask),
}

/// `(M ⊙ W) U(X)`.
pub fn masked_conv(w: &WeightMatrix, mask: MaskRef<'_>, u: &UnfoldedInput) -> Result<Tensor3> {
    let effective = match mask {
        MaskRef::Soft(m) => w.matrix().hadamard(m)?,
        MaskRef::Hard(b) => b.apply(w.matrix())?,
    };
    product_reshaped(&effective, w.real_cols, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm_patterns::NmConfig;

    fn seq(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..n).map(f).collect()
    }

    #[test]
    fn scaling_kernel() {
        let x = Tensor3::new(1, 2, 3, seq(6, |i| i as f64 - 2.0)).unwrap();
        let k = KernelStack::new(1, 1, 1, 1, vec![2.0]).unwrap();
        let y = conv_direct(&x, &k).unwrap();
        assert_eq!(y.as_slice(), seq(6, |i| 2.0 * (i as f64 - 2.0)).as_slice());
    }

    #[test]
    fn all_ones_three_by_three_on_two_by_two() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = KernelStack::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(conv_direct(&x, &k).unwrap().as_slice(), &[10.0; 4]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor3::new(2, 3, 4, seq(24, |i| (i * i) as f64 * 0.1)).unwrap();
        let mut taps = vec![0.0; 2 * 2 * 9];
        taps[4] = 1.0; // out 0 <- in 0 centre
        taps[9 + 9 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let k = KernelStack::new(2, 2, 3, 3, taps).unwrap();
        assert_eq!(conv_direct(&x, &k).unwrap(), x);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            KernelStack::new(1, 1, 2, 3, vec![0.0; 6]),
            Err(Error::EvenKernel { .. })
        ));
        let x = Tensor3::zeros(2, 3, 3);
        let k = KernelStack::new(1, 1, 3, 3, vec![0.0; 9]).unwrap();
        assert!(matches!(
            conv_direct(&x, &k),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            unfold(&Tensor3::zeros(1, 0, 3), (3, 3)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn unfold_one_by_one() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = unfold(&x, (1, 1)).unwrap();
        assert_eq!(u.matrix().shape(), (1, 4));
        assert_eq!(u.matrix().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_three_by_three_padding() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = unfold(&x, (3, 3)).unwrap();
        assert_eq!(u.matrix().shape(), (9, 4));
        assert_eq!(u.positions(), 4);
        // window centred on (0,0): taps (u,s) read (u-1, s-1)
        let col0: Vec<f64> = (0..9).map(|r| u.matrix()[(r, 0)]).collect();
        let mut expected = vec![0.0; 9];
        for uu in 0..3 {
            for ss in 0..3 {
                let (r, q) = (uu as isize - 1, ss as isize - 1);
                if (0..2).contains(&r) && (0..2).contains(&q) {
                    expected[uu * 3 + ss] = x.get(0, r as usize, q as usize);
                }
            }
        }
        assert_eq!(col0, expected);
        assert_eq!(col0, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn output_positions_same_padding() {
        for k in [1, 3, 5, 7] {
            assert_eq!(output_positions(9, 6, k, k, k / 2, k / 2), 54);
        }
        assert_eq!(output_positions(5, 5, 3, 3, 0, 0), 9);
    }

    #[test]
    fn weight_matrix_shapes() {
        let k = KernelStack::new(1, 1, 1, 1, vec![5.0]).unwrap();
        assert_eq!(
            kernels_to_weight_matrix(&k, false).matrix().as_slice(),
            &[5.0]
        );
        let k = KernelStack::new(4, 1, 3, 3, vec![1.0; 36]).unwrap();
        let w = kernels_to_weight_matrix(&k, false);
        assert_eq!(w.matrix().shape(), (4, 9));
        let w = kernels_to_weight_matrix(&k, true);
        assert_eq!(w.matrix().shape(), (4, 12));
        assert_eq!(w.structural_cols(), 3);
        assert_eq!(w.unaugmented().shape(), (4, 9));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = Tensor3::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let u = unfold(&x, (3, 3)).unwrap();
        let w = WeightMatrix::dense(Matrix::zeros(2, 9));
        assert_eq!(conv_matmul(&w, &u).unwrap(), Tensor3::zeros(2, 3, 3));
    }

    #[test]
    fn identity_one_by_one_kernels() {
        let x = Tensor3::new(3, 2, 2, seq(12, |i| i as f64)).unwrap();
        let u = unfold(&x, (1, 1)).unwrap();
        let w = WeightMatrix::dense(Matrix::identity(3));
        assert_eq!(conv_matmul(&w, &u).unwrap(), x);
    }

    #[test]
    fn masked_conv_identity_and_zero_masks() {
        let x = Tensor3::new(1, 3, 3, seq(9, |i| i as f64)).unwrap();
        let k = KernelStack::new(2, 1, 3, 3, seq(18, |i| (i % 5) as f64 - 2.0)).unwrap();
        let w = kernels_to_weight_matrix(&k, true);
        let u = unfold(&x, (3, 3)).unwrap();
        let ones = BitMask::ones(2, 12, NmConfig::two_four()).unwrap();
        assert_eq!(
            masked_conv(&w, MaskRef::Hard(&ones), &u).unwrap(),
            conv_matmul(&w, &u).unwrap()
        );
        let zeros = Matrix::zeros(2, 12);
        assert_eq!(
            masked_conv(&w, MaskRef::Soft(&zeros), &u).unwrap(),
            Tensor3::zeros(2, 3, 3)
        );
        let wrong = Matrix::zeros(2, 9);
        assert!(masked_conv(&w, MaskRef::Soft(&wrong), &u).is_err());
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        // <unfold(x), y> == <x, fold(y)>
        let dims = (2, 4, 5);
        let x: Vec<f64> = seq(40, |i| ((i * 7) % 11) as f64 - 5.0);
        let mut u = Matrix::zeros(18, 20);
        unfold_into(&x, dims, (3, 3), &mut u);
        let y = Matrix::from_fn(18, 20, |r, c| ((r * 3 + c * 5) % 7) as f64 - 3.0);
        let lhs: f64 = u
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let mut folded = vec![0.0; 40];
        fold_add(&y, dims, (3, 3), &mut folded);
        let rhs: f64 = x.iter().zip(&folded).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
