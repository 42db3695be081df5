//! Logical tensors: axis semantics, shapes, data types and 4-channel slice arithmetic.
//!
//! Every logical tensor is stored on the host as a flat `f32` sequence in
//! B-major `BHWDC` order. Axes absent for a given rank are fixed at extent 1,
//! so a rank-3 `HWC` tensor is simply a `BHWDC` tensor with `b = d = 1`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of lanes in one slice (one texel).
pub const LANES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("unsupported rank {0}, expected 0..=5")]
    UnsupportedRank(usize),
    #[error("invalid extent {extent} for axis {axis}")]
    InvalidExtent { axis: Axis, extent: i64 },
    #[error("value count {got} does not match shape {shape} ({expected} elements)")]
    ValueCount {
        shape: LogicalShape,
        expected: usize,
        got: usize,
    },
    #[error("coordinate {coord:?} out of range for shape {shape}")]
    OutOfRange { coord: [usize; 5], shape: LogicalShape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    B,
    H,
    W,
    D,
    C,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::B => "B",
            Axis::H => "H",
            Axis::W => "W",
            Axis::D => "D",
            Axis::C => "C",
        };
        f.write_str(s)
    }
}

/// Axis names carried by a tensor of a given rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisSemantics {
    rank: usize,
    axes: &'static [Axis],
}

impl AxisSemantics {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn axes(&self) -> &'static [Axis] {
        self.axes
    }
}

/// Fixed axis meaning per rank. Rank 1 is treated as a channel vector.
pub fn axis_semantics(rank: usize) -> Result<AxisSemantics, TensorError> {
    use Axis::*;
    let axes: &'static [Axis] = match rank {
        0 => &[],
        1 => &[C],
        2 => &[H, W],
        3 => &[H, W, C],
        4 => &[B, H, W, C],
        5 => &[B, H, W, D, C],
        _ => return Err(TensorError::UnsupportedRank(rank)),
    };
    Ok(AxisSemantics { rank, axes })
}

/// Number of 4-lane slices needed for `c` channels.
pub fn slice_count(c: i64) -> Result<usize, TensorError> {
    if c <= 0 {
        return Err(TensorError::InvalidExtent {
            axis: Axis::C,
            extent: c,
        });
    }
    Ok((c as usize).div_ceil(LANES))
}

/// Extents of the five logical axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogicalShape {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub c: usize,
}

impl fmt::Display for LogicalShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{},{})", self.b, self.h, self.w, self.d, self.c)
    }
}

impl LogicalShape {
    pub fn new(b: usize, h: usize, w: usize, d: usize, c: usize) -> Result<Self, TensorError> {
        let shape = LogicalShape { b, h, w, d, c };
        for (axis, extent) in shape.extents_by_axis() {
            if extent == 0 {
                return Err(TensorError::InvalidExtent { axis, extent: 0 });
            }
        }
        Ok(shape)
    }

    /// Builds a shape from a dimension list interpreted with [`axis_semantics`].
    pub fn from_dims(dims: &[usize]) -> Result<Self, TensorError> {
        let sem = axis_semantics(dims.len())?;
        let mut ext = [1usize; 5];
        for (axis, &n) in sem.axes().iter().zip(dims) {
            ext[*axis as usize] = n;
        }
        Self::new(ext[0], ext[1], ext[2], ext[3], ext[4])
    }

    /// Shorthand for the common rank-4 `BHWC` case.
    pub fn bhwc(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self::new(b, h, w, 1, c).expect("non-zero extents")
    }

    pub fn extents(&self) -> [usize; 5] {
        [self.b, self.h, self.w, self.d, self.c]
    }

    fn extents_by_axis(&self) -> [(Axis, usize); 5] {
        [
            (Axis::B, self.b),
            (Axis::H, self.h),
            (Axis::W, self.w),
            (Axis::D, self.d),
            (Axis::C, self.c),
        ]
    }

    pub fn element_count(&self) -> usize {
        self.b * self.h * self.w * self.d * self.c
    }

    pub fn slices(&self) -> usize {
        self.c.div_ceil(LANES)
    }

    /// Channel count rounded up to whole slices.
    pub fn padded_c(&self) -> usize {
        self.slices() * LANES
    }

    pub fn padded_element_count(&self) -> usize {
        self.b * self.h * self.w * self.d * self.padded_c()
    }

    /// Number of positions that share one channel vector (`B*H*W*D`).
    pub fn rows(&self) -> usize {
        self.b * self.h * self.w * self.d
    }

    pub fn with_c(&self, c: usize) -> Self {
        LogicalShape { c, ..*self }
    }

    pub fn contains(&self, coord: [usize; 5]) -> bool {
        coord.iter().zip(self.extents()).all(|(&i, n)| i < n)
    }

    /// Flat index of `(b,h,w,d,c)` in B-major order.
    pub fn offset(&self, coord: [usize; 5]) -> usize {
        let [b, h, w, d, c] = coord;
        (((b * self.h + h) * self.w + w) * self.d + d) * self.c + c
    }

    pub fn coord_of(&self, mut index: usize) -> [usize; 5] {
        let c = index % self.c;
        index /= self.c;
        let d = index % self.d;
        index /= self.d;
        let w = index % self.w;
        index /= self.w;
        let h = index % self.h;
        index /= self.h;
        [index, h, w, d, c]
    }

    /// Iterates all coordinates in storage order.
    pub fn coords(&self) -> impl Iterator<Item = [usize; 5]> + '_ {
        (0..self.element_count()).map(|i| self.coord_of(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    #[default]
    F32,
    /// Half precision emulated on `f32` storage.
    F16,
    I8,
    I4,
}

impl DataType {
    pub fn bits(self) -> u32 {
        match self {
            DataType::F32 => 32,
            DataType::F16 => 16,
            DataType::I8 => 8,
            DataType::I4 => 4,
        }
    }

    /// Bytes needed to store `count` elements.
    pub fn storage_bytes(self, count: usize) -> usize {
        (count * self.bits() as usize).div_ceil(8)
    }

    /// Largest magnitude representable by the symmetric integer types.
    pub fn int_limit(self) -> Option<i32> {
        match self {
            DataType::I8 => Some(127),
            DataType::I4 => Some(7),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::F32 => "f32",
            DataType::F16 => "f16",
            DataType::I8 => "i8",
            DataType::I4 => "i4",
        }
    }
}

/// Rounds to the nearest representable f16 value (ties to even).
pub fn round_f16(x: f32) -> f32 {
    half::f16::from_f32(x).to_f32()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicalTensor {
    shape: LogicalShape,
    dtype: DataType,
    values: Vec<f32>,
}

impl LogicalTensor {
    pub fn new(shape: LogicalShape, dtype: DataType, values: Vec<f32>) -> Result<Self, TensorError> {
        if values.len() != shape.element_count() {
            return Err(TensorError::ValueCount {
                shape,
                expected: shape.element_count(),
                got: values.len(),
            });
        }
        let values = match dtype {
            DataType::F16 => values.into_iter().map(round_f16).collect(),
            DataType::I8 | DataType::I4 => {
                let lim = dtype.int_limit().unwrap() as f32;
                values
                    .into_iter()
                    .map(|v| v.round_ties_even().clamp(-lim, lim))
                    .collect()
            }
            DataType::F32 => values,
        };
        Ok(LogicalTensor {
            shape,
            dtype,
            values,
        })
    }

    pub fn from_f32(shape: LogicalShape, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, DataType::F32, values)
    }

    pub fn zeros(shape: LogicalShape) -> Self {
        LogicalTensor {
            shape,
            dtype: DataType::F32,
            values: vec![0.0; shape.element_count()],
        }
    }

    pub fn from_fn(shape: LogicalShape, mut f: impl FnMut([usize; 5]) -> f32) -> Self {
        let values = shape.coords().map(&mut f).collect();
        LogicalTensor {
            shape,
            dtype: DataType::F32,
            values,
        }
    }

    pub fn shape(&self) -> LogicalShape {
        self.shape
    }

    pub fn dtype(&self) -> DataType {
        self.dtype
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, coord: [usize; 5]) -> Result<f32, TensorError> {
        if !self.shape.contains(coord) {
            return Err(TensorError::OutOfRange {
                coord,
                shape: self.shape,
            });
        }
        Ok(self.values[self.shape.offset(coord)])
    }

    /// Same data reinterpreted under another shape with equal element count.
    pub fn reshaped(&self, shape: LogicalShape) -> Result<Self, TensorError> {
        Self::new(shape, self.dtype, self.values.clone())
    }

    pub(crate) fn from_parts_unchecked(shape: LogicalShape, dtype: DataType, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), shape.element_count());
        LogicalTensor {
            shape,
            dtype,
            values,
        }
    }
}

/// Zero-pads the channel axis up to a whole number of slices.
pub fn pad_channels(tensor: &LogicalTensor) -> LogicalTensor {
    let shape = tensor.shape();
    let padded = shape.with_c(shape.padded_c());
    if padded == shape {
        return tensor.clone();
    }
    let mut values = vec![0.0; padded.element_count()];
    for row in 0..shape.rows() {
        let src = &tensor.values[row * shape.c..(row + 1) * shape.c];
        values[row * padded.c..row * padded.c + shape.c].copy_from_slice(src);
    }
    LogicalTensor::from_parts_unchecked(padded, tensor.dtype(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_semantics_by_rank() {
        assert_eq!(axis_semantics(4).unwrap().axes(), &[Axis::B, Axis::H, Axis::W, Axis::C]);
        assert!(axis_semantics(0).unwrap().axes().is_empty());
        assert_eq!(axis_semantics(1).unwrap().axes(), &[Axis::C]);
        assert_eq!(
            axis_semantics(5).unwrap().axes(),
            &[Axis::B, Axis::H, Axis::W, Axis::D, Axis::C]
        );
        assert_eq!(axis_semantics(6), Err(TensorError::UnsupportedRank(6)));
    }

    #[test]
    fn slices() {
        assert_eq!(slice_count(5).unwrap(), 2);
        assert_eq!(slice_count(4).unwrap(), 1);
        assert_eq!(slice_count(7).unwrap(), 2);
        assert!(matches!(slice_count(0), Err(TensorError::InvalidExtent { .. })));
        assert!(slice_count(-3).is_err());
        for c in 1..=64 {
            let pad = 4 * slice_count(c).unwrap() as i64 - c;
            assert!((0..=3).contains(&pad));
        }
    }

    #[test]
    fn from_dims_fills_absent_axes() {
        let s = LogicalShape::from_dims(&[2, 3]).unwrap();
        assert_eq!(s.extents(), [1, 2, 3, 1, 1]);
        let s = LogicalShape::from_dims(&[7]).unwrap();
        assert_eq!(s.extents(), [1, 1, 1, 1, 7]);
        let s = LogicalShape::from_dims(&[]).unwrap();
        assert_eq!(s.element_count(), 1);
        assert!(LogicalShape::from_dims(&[1, 0, 2]).is_err());
    }

    #[test]
    fn pad_five_channels() {
        let shape = LogicalShape::bhwc(1, 2, 3, 5);
        let t = LogicalTensor::from_fn(shape, |c| (shape.offset(c) + 1) as f32);
        let p = pad_channels(&t);
        assert_eq!(p.shape().c, 8);
        for coord in shape.coords() {
            assert_eq!(p.get(coord).unwrap(), t.get(coord).unwrap());
        }
        let zeros = p.values().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 3 * shape.rows());
    }

    #[test]
    fn pad_exact_multiple_is_identity() {
        let shape = LogicalShape::bhwc(2, 1, 2, 4);
        let t = LogicalTensor::from_fn(shape, |c| c[4] as f32);
        assert_eq!(pad_channels(&t), t);
    }

    #[test]
    fn pad_seven_ones() {
        let shape = LogicalShape::new(2, 2, 3, 2, 7).unwrap();
        let t = LogicalTensor::from_fn(shape, |_| 1.0);
        let p = pad_channels(&t);
        for b in 0..2 {
            for h in 0..2 {
                for w in 0..3 {
                    for d in 0..2 {
                        assert_eq!(p.get([b, h, w, d, 7]).unwrap(), 0.0);
                        for c in 0..7 {
                            assert_eq!(p.get([b, h, w, d, c]).unwrap(), 1.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn int_dtypes_are_symmetric() {
        let shape = LogicalShape::from_dims(&[3]).unwrap();
        let t = LogicalTensor::new(shape, DataType::I8, vec![-200.0, 126.6, 300.0]).unwrap();
        assert_eq!(t.values(), &[-127.0, 127.0, 127.0]);
        let t = LogicalTensor::new(shape, DataType::I4, vec![-8.0, 2.5, 9.0]).unwrap();
        assert_eq!(t.values(), &[-7.0, 2.0, 7.0]);
    }

    #[test]
    fn f16_rounding_on_construction() {
        let shape = LogicalShape::from_dims(&[1]).unwrap();
        let t = LogicalTensor::new(shape, DataType::F16, vec![1.0 + 1.0 / 4096.0]).unwrap();
        assert_eq!(t.values()[0], 1.0);
    }

    proptest::proptest! {
        #[test]
        fn pad_is_idempotent(b in 1usize..3, h in 1usize..4, w in 1usize..4, d in 1usize..3, c in 1usize..12) {
            let shape = LogicalShape::new(b, h, w, d, c).unwrap();
            let t = LogicalTensor::from_fn(shape, |x| shape.offset(x) as f32 * 0.5 - 3.0);
            let once = pad_channels(&t);
            proptest::prop_assert_eq!(pad_channels(&once), once.clone());
            for coord in shape.coords() {
                proptest::prop_assert_eq!(once.get(coord).unwrap(), t.get(coord).unwrap());
            }
        }
    }
}
