//! Dense 2D real and complex fields plus integer label masks.
//!
//! Layout is row-major and fixed: index `(row, col)` lives at
//! `row * width + col`. Real grids store `f32`; reductions accumulate in
//! `f64`. Spectra store `f64` complex pairs so downstream loss gradients
//! are not limited by storage precision.

use num_complex::Complex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("data length {len} does not match {height}x{width}")]
    LengthMismatch {
        len: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },
    #[error("label {label} at index {index} exceeds maximum class {max_class}")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        max_class: usize,
    },
}

/// H×W single-precision real field: images, probability maps, gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    /// All-zeros grid. Dimensions must be positive.
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Wraps row-major data, validating length and finiteness.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self, GridError> {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        if data.len() != height * width {
            return Err(GridError::LengthMismatch {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &Grid) -> Result<(), GridError> {
        if !self.same_shape(other) {
            return Err(GridError::ShapeMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    /// Elementwise sum. Inputs untouched.
    pub fn add(&self, other: &Grid) -> Result<Grid, GridError> {
        self.check_shape(other)?;
        self.zip(other, |a, b| a + b)
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Grid) -> Result<Grid, GridError> {
        self.check_shape(other)?;
        self.zip(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Grid) -> Result<Grid, GridError> {
        self.check_shape(other)?;
        self.zip(other, |a, b| a * b)
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, factor: f32) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn zip(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid, GridError> {
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements, accumulated in double precision.
    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Sum of squares, accumulated in double precision.
    pub fn reduce_sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// H×W complex field, the output of a 2D DFT.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    height: usize,
    width: usize,
    data: Vec<Complex<f64>>,
}

impl SpectrumGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![Complex::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        data: Vec<Complex<f64>>,
    ) -> Result<Self, GridError> {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        if data.len() != height * width {
            return Err(GridError::LengthMismatch {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some(i) = data
            .iter()
            .position(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<f64>] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Complex<f64> {
        self.data[row * self.width + col]
    }

    /// Sum of squared magnitudes over all bins (double accumulation).
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// H×W hard class labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMask {
    /// All-background (class 0) mask.
    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        assert!(
            num_classes >= 1 && num_classes <= 256,
            "num_classes must be in 1..=256"
        );
        Self {
            height,
            width,
            num_classes,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<u8>,
    ) -> Result<Self, GridError> {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        assert!(
            num_classes >= 1 && num_classes <= 256,
            "num_classes must be in 1..=256"
        );
        if data.len() != height * width {
            return Err(GridError::LengthMismatch {
                len: data.len(),
                height,
                width,
            });
        }
        if let Some((i, &label)) = data
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(GridError::LabelOutOfRange {
                label,
                index: i,
                max_class: num_classes - 1,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        debug_assert!((label as usize) < self.num_classes);
        self.data[row * self.width + col] = label;
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Number of pixels carrying the given class.
    pub fn class_count(&self, class_index: usize) -> usize {
        self.data
            .iter()
            .filter(|&&l| l as usize == class_index)
            .count()
    }
}

/// Indicator grid of one class: 1.0 where the mask equals `class_index`.
pub fn one_hot(mask: &LabelMask, class_index: usize) -> Result<Grid, GridError> {
    if class_index >= mask.num_classes {
        return Err(GridError::ClassOutOfRange {
            index: class_index,
            num_classes: mask.num_classes,
        });
    }
    let data = mask
        .data
        .iter()
        .map(|&l| if l as usize == class_index { 1.0 } else { 0.0 })
        .collect();
    Ok(Grid {
        height: mask.height,
        width: mask.width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_picks_the_class() {
        let mask = LabelMask::from_vec(1, 2, 2, vec![0, 1]).unwrap();
        let g = one_hot(&mask, 1).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn one_hot_all_zero_mask_class_zero_is_ones() {
        let mask = LabelMask::zeros(2, 2, 1);
        let g = one_hot(&mask, 0).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
    }

    #[test]
    fn one_hot_multiclass_example() {
        let mask = LabelMask::from_vec(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let g = one_hot(&mask, 1).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range_class() {
        let mask = LabelMask::zeros(2, 2, 2);
        assert_eq!(
            one_hot(&mask, 2),
            Err(GridError::ClassOutOfRange {
                index: 2,
                num_classes: 2
            })
        );
    }

    #[test]
    fn one_hot_channels_partition_unity() {
        let mask = LabelMask::from_vec(2, 3, 4, vec![0, 3, 1, 2, 2, 0]).unwrap();
        let mut total = Grid::zeros(2, 3);
        for c in 0..4 {
            total = total.add(&one_hot(&mask, c).unwrap()).unwrap();
        }
        assert_eq!(total.data(), &[1.0; 6]);
    }

    #[test]
    fn reduce_sum_of_ones() {
        assert_eq!(Grid::filled(2, 2, 1.0).reduce_sum(), 4.0);
    }

    #[test]
    fn scale_halves() {
        let g = Grid::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(g.scale(0.5).data(), &[0.5, 1.0]);
    }

    #[test]
    fn add_elementwise() {
        let a = Grid::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Grid::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let a = Grid::zeros(2, 2);
        let b = Grid::zeros(2, 3);
        assert!(matches!(a.add(&b), Err(GridError::ShapeMismatch(..))));
        assert!(matches!(a.sub(&b), Err(GridError::ShapeMismatch(..))));
        assert!(matches!(a.mul(&b), Err(GridError::ShapeMismatch(..))));
    }

    #[test]
    fn ops_are_pure() {
        let a = Grid::from_vec(1, 2, vec![1.5, -2.5]).unwrap();
        let b = Grid::from_vec(1, 2, vec![0.25, 4.0]).unwrap();
        let r1 = a.mul(&b).unwrap();
        let r2 = a.mul(&b).unwrap();
        assert_eq!(r1.data(), r2.data());
        assert_eq!(a.data(), &[1.5, -2.5]);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert_eq!(
            Grid::from_vec(1, 2, vec![1.0, f32::NAN]),
            Err(GridError::NonFinite(1))
        );
    }

    #[test]
    fn label_mask_rejects_out_of_range_labels() {
        assert!(matches!(
            LabelMask::from_vec(1, 2, 2, vec![0, 2]),
            Err(GridError::LabelOutOfRange { label: 2, .. })
        ));
    }
}
