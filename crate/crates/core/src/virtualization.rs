//! Tensor virtualization: one logical tensor realized by one or more physical
//! objects, with a static index rule resolving logical coordinates to
//! `(object, address, lane)`.
//!
//! Weight tensors are stored `OHWDI` on the host and reuse the `BHWDC` slots of
//! [`LogicalShape`] (`b = O`, `c = I`). They are rearranged into a permutation
//! of `(G, S_O, O4, HWD, S_I, I4)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{
    pack, physical_extent, LayoutDescriptor, LayoutError, PackedObject, PhysicalCoord, StorageType,
};
use crate::tensor::{LogicalShape, LogicalTensor, TensorError, LANES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VirtError {
    #[error("group count {g} does not divide {slices} output slices")]
    InvalidGrouping { g: usize, slices: usize },
    #[error("cannot split {slices} slices across {objects} objects")]
    DegenerateSplit { objects: usize, slices: usize },
    #[error("coordinate {coord:?} out of range for {shape}")]
    OutOfBounds { coord: [usize; 5], shape: LogicalShape },
    #[error("invalid weight permutation: {0}")]
    InvalidPermutation(String),
    #[error("weights of shape {found} do not match layout planned for {expected}")]
    ShapeMismatch {
        expected: LogicalShape,
        found: LogicalShape,
    },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightShape {
    pub o: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub i: usize,
}

impl WeightShape {
    pub fn new(o: usize, h: usize, w: usize, d: usize, i: usize) -> Self {
        assert!(o > 0 && h > 0 && w > 0 && d > 0 && i > 0, "weight extents must be positive");
        WeightShape { o, h, w, d, i }
    }

    pub fn from_logical(shape: &LogicalShape) -> Self {
        WeightShape::new(shape.b, shape.h, shape.w, shape.d, shape.c)
    }

    pub fn logical(&self) -> LogicalShape {
        LogicalShape::new(self.o, self.h, self.w, self.d, self.i).expect("positive extents")
    }

    pub fn hwd(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn o_slices(&self) -> usize {
        self.o.div_ceil(LANES)
    }

    pub fn i_slices(&self) -> usize {
        self.i.div_ceil(LANES)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightToken {
    G,
    SO,
    O4,
    HWD,
    SI,
    I4,
}

impl fmt::Display for WeightToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            WeightToken::G => "G",
            WeightToken::SO => "S_O",
            WeightToken::O4 => "O4",
            WeightToken::HWD => "HWD",
            WeightToken::SI => "S_I",
            WeightToken::I4 => "I4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightLayout {
    pub shape: WeightShape,
    pub g: usize,
    pub s_o: usize,
    pub hwd: usize,
    pub s_i: usize,
    pub permutation: Vec<WeightToken>,
}

impl WeightLayout {
    pub const O4: usize = LANES;
    pub const I4: usize = LANES;

    pub const DEFAULT_PERMUTATION: [WeightToken; 6] = [
        WeightToken::G,
        WeightToken::SO,
        WeightToken::SI,
        WeightToken::HWD,
        WeightToken::O4,
        WeightToken::I4,
    ];

    pub fn padded_o(&self) -> usize {
        self.g * self.s_o * LANES
    }

    pub fn padded_i(&self) -> usize {
        self.s_i * LANES
    }

    pub fn padded_elements(&self) -> usize {
        self.padded_o() * self.hwd * self.padded_i()
    }

    fn token_extent(&self, t: WeightToken) -> usize {
        match t {
            WeightToken::G => self.g,
            WeightToken::SO => self.s_o,
            WeightToken::O4 => LANES,
            WeightToken::HWD => self.hwd,
            WeightToken::SI => self.s_i,
            WeightToken::I4 => LANES,
        }
    }

    /// Element index inside the linear rearrangement.
    pub fn linear_index(&self, o: usize, hwd: usize, i: usize) -> usize {
        let so_global = o / LANES;
        let mut index = 0;
        for &t in &self.permutation {
            let v = match t {
                WeightToken::G => so_global / self.s_o,
                WeightToken::SO => so_global % self.s_o,
                WeightToken::O4 => o % LANES,
                WeightToken::HWD => hwd,
                WeightToken::SI => i / LANES,
                WeightToken::I4 => i % LANES,
            };
            index = index * self.token_extent(t) + v;
        }
        index
    }
}

pub fn plan_weight_layout(
    shape: WeightShape,
    g: usize,
    permutation: &[WeightToken],
) -> Result<WeightLayout, VirtError> {
    let slices = shape.o_slices();
    if g == 0 || !slices.is_multiple_of(g) {
        return Err(VirtError::InvalidGrouping { g, slices });
    }
    if permutation.len() != 6 {
        return Err(VirtError::InvalidPermutation(format!(
            "expected 6 tokens, got {}",
            permutation.len()
        )));
    }
    for t in WeightLayout::DEFAULT_PERMUTATION {
        if permutation.iter().filter(|&&p| p == t).count() != 1 {
            return Err(VirtError::InvalidPermutation(format!("{t} must appear exactly once")));
        }
    }
    if !matches!(permutation[5], WeightToken::O4 | WeightToken::I4) {
        return Err(VirtError::InvalidPermutation(
            "innermost token must be O4 or I4".into(),
        ));
    }
    Ok(WeightLayout {
        shape,
        g,
        s_o: slices / g,
        hwd: shape.hwd(),
        s_i: shape.i_slices(),
        permutation: permutation.to_vec(),
    })
}

/// How logical coordinates map onto the objects of a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IndexRule {
    /// A single object in the given layout.
    Single { descriptor: LayoutDescriptor },
    /// Slices distributed contiguously: object `k` holds
    /// `[k * slices_per_object, (k + 1) * slices_per_object)`.
    SliceSplit {
        descriptor: LayoutDescriptor,
        slices_per_object: usize,
        object_shapes: Vec<LogicalShape>,
    },
    /// One 2D texture per `(s_o, s_i)` pair, indexed `s_o * S_I + s_i`;
    /// texel `(o4, hwd)` holds four input lanes.
    WeightSlicePairs { layout: WeightLayout },
    /// One buffer in the layout's permutation order.
    WeightLinear { layout: WeightLayout },
}

/// Where one logical element lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Location {
    pub object: usize,
    pub coord: PhysicalCoord,
    pub lane: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalObjectSet {
    pub shape: LogicalShape,
    pub objects: Vec<PackedObject>,
    pub rule: IndexRule,
}

impl PhysicalObjectSet {
    pub fn single(tensor: &LogicalTensor, descriptor: &LayoutDescriptor) -> Self {
        PhysicalObjectSet {
            shape: tensor.shape(),
            objects: vec![pack(tensor, descriptor)],
            rule: IndexRule::Single {
                descriptor: descriptor.clone(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn total_texels(&self) -> usize {
        self.objects.iter().map(|o| o.data.len()).sum()
    }

    pub fn resolve(&self, coord: [usize; 5]) -> Result<Location, VirtError> {
        resolve(coord, self)
    }

    pub fn read(&self, coord: [usize; 5]) -> Result<f32, VirtError> {
        let loc = self.resolve(coord)?;
        Ok(self.objects[loc.object].texel(loc.coord)[loc.lane])
    }

    pub fn write(&mut self, coord: [usize; 5], value: f32) -> Result<(), VirtError> {
        let loc = self.resolve(coord)?;
        self.objects[loc.object].texel_mut(loc.coord)[loc.lane] = value;
        Ok(())
    }

    /// Reassembles the logical tensor through [`resolve`].
    pub fn to_logical(&self) -> LogicalTensor {
        LogicalTensor::from_fn(self.shape, |c| self.read(c).expect("in-range coordinate"))
    }
}

pub fn resolve(coord: [usize; 5], set: &PhysicalObjectSet) -> Result<Location, VirtError> {
    let shape = &set.shape;
    if !shape.contains(coord) {
        return Err(VirtError::OutOfBounds {
            coord,
            shape: *shape,
        });
    }
    let [b, h, w, d, c] = coord;
    match &set.rule {
        IndexRule::Single { descriptor } => Ok(Location {
            object: 0,
            coord: descriptor.translate(shape, b, w, h, d, c / LANES)?,
            lane: c % LANES,
        }),
        IndexRule::SliceSplit {
            descriptor,
            slices_per_object,
            object_shapes,
        } => {
            let s = c / LANES;
            let object = s / slices_per_object;
            let local = s % slices_per_object;
            Ok(Location {
                object,
                coord: descriptor.translate(&object_shapes[object], b, w, h, d, local)?,
                lane: c % LANES,
            })
        }
        IndexRule::WeightSlicePairs { layout } => {
            let hwd = (h * shape.w + w) * shape.d + d;
            Ok(Location {
                object: (b / LANES) * layout.s_i + c / LANES,
                coord: PhysicalCoord::Tex2d { u: b % LANES, v: hwd },
                lane: c % LANES,
            })
        }
        IndexRule::WeightLinear { layout } => {
            let hwd = (h * shape.w + w) * shape.d + d;
            let index = layout.linear_index(b, hwd, c);
            Ok(Location {
                object: 0,
                coord: PhysicalCoord::Linear(index / LANES),
                lane: index % LANES,
            })
        }
    }
}

fn check_weights(weights: &LogicalTensor, layout: &WeightLayout) -> Result<(), VirtError> {
    let expected = layout.shape.logical();
    if weights.shape() != expected {
        return Err(VirtError::ShapeMismatch {
            expected,
            found: weights.shape(),
        });
    }
    Ok(())
}

/// Splits weights into one 2D texture per `(s_o, s_i)` slice pair.
pub fn rearrange_weights(weights: &LogicalTensor, layout: &WeightLayout) -> Result<PhysicalObjectSet, VirtError> {
    check_weights(weights, layout)?;
    let shape = weights.shape();
    let s_o_total = layout.g * layout.s_o;
    // Each object is a (1, hwd, 4, 1, 4) tensor in the default 2D texture
    // layout, which puts o4 on the width axis and hwd on the height axis.
    let sub_shape = LogicalShape::new(1, layout.hwd, LANES, 1, LANES)?;
    let descriptor = LayoutDescriptor::canonical(StorageType::Texture2d);
    let mut objects = Vec::with_capacity(s_o_total * layout.s_i);
    for so in 0..s_o_total {
        for si in 0..layout.s_i {
            let sub = LogicalTensor::from_fn(sub_shape, |[_, hwd, o4, _, i4]| {
                let o = so * LANES + o4;
                let i = si * LANES + i4;
                if o >= shape.b || i >= shape.c {
                    return 0.0;
                }
                let h = hwd / (shape.w * shape.d);
                let w = (hwd / shape.d) % shape.w;
                let d = hwd % shape.d;
                weights.values()[shape.offset([o, h, w, d, i])]
            });
            objects.push(pack(&sub, &descriptor));
        }
    }
    Ok(PhysicalObjectSet {
        shape,
        objects,
        rule: IndexRule::WeightSlicePairs {
            layout: layout.clone(),
        },
    })
}

/// Writes weights into a single buffer following the layout permutation.
pub fn linearize_weights(weights: &LogicalTensor, layout: &WeightLayout) -> Result<PhysicalObjectSet, VirtError> {
    check_weights(weights, layout)?;
    let shape = weights.shape();
    let buf_shape = LogicalShape::new(1, 1, 1, 1, layout.padded_elements())?;
    let descriptor = LayoutDescriptor::canonical(StorageType::Buffer1d);
    let extent = physical_extent(&buf_shape, StorageType::Buffer1d);
    let mut set = PhysicalObjectSet {
        shape,
        objects: vec![PackedObject::zeroed(descriptor, extent)],
        rule: IndexRule::WeightLinear {
            layout: layout.clone(),
        },
    };
    for (coord, &v) in shape.coords().zip(weights.values()) {
        set.write(coord, v)?;
    }
    Ok(set)
}

/// Realizes an activation tensor as `objects` physical objects split along slices.
pub fn virtualize(
    tensor: &LogicalTensor,
    storage: StorageType,
    objects: usize,
) -> Result<PhysicalObjectSet, VirtError> {
    let shape = tensor.shape();
    let slices = shape.slices();
    let descriptor = LayoutDescriptor::canonical(storage);
    if objects == 0 || objects > slices {
        return Err(VirtError::DegenerateSplit { objects, slices });
    }
    if objects == 1 {
        return Ok(PhysicalObjectSet::single(tensor, &descriptor));
    }
    let per = slices.div_ceil(objects);
    if (objects - 1) * per >= slices {
        return Err(VirtError::DegenerateSplit { objects, slices });
    }
    let mut packed = Vec::with_capacity(objects);
    let mut object_shapes = Vec::with_capacity(objects);
    for k in 0..objects {
        let c0 = k * per * LANES;
        let c1 = ((k + 1) * per * LANES).min(shape.c);
        let sub_shape = shape.with_c(c1 - c0);
        let sub = LogicalTensor::from_fn(sub_shape, |[b, h, w, d, c]| {
            tensor.values()[shape.offset([b, h, w, d, c0 + c])]
        });
        packed.push(pack(&sub, &descriptor));
        object_shapes.push(sub_shape);
    }
    Ok(PhysicalObjectSet {
        shape,
        objects: packed,
        rule: IndexRule::SliceSplit {
            descriptor,
            slices_per_object: per,
            object_shapes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::unpack;
    use std::collections::HashSet;

    fn ohwi(o: usize, h: usize, w: usize, i: usize) -> LogicalTensor {
        let shape = LogicalShape::new(o, h, w, 1, i).unwrap();
        LogicalTensor::from_fn(shape, |c| (shape.offset(c) + 1) as f32)
    }

    #[test]
    fn plan_small_conv_weights() {
        let l = plan_weight_layout(WeightShape::new(5, 2, 1, 1, 7), 2, &WeightLayout::DEFAULT_PERMUTATION).unwrap();
        assert_eq!((l.s_o, l.s_i, l.hwd), (1, 2, 2));
        assert_eq!((l.padded_o(), l.padded_i()), (8, 8));
        let l = plan_weight_layout(WeightShape::new(4, 1, 1, 1, 4), 1, &WeightLayout::DEFAULT_PERMUTATION).unwrap();
        assert_eq!((l.s_o, l.s_i, l.hwd), (1, 1, 1));
        assert_eq!(l.padded_elements() / 4, 4);
    }

    #[test]
    fn grouping_must_divide() {
        let e = plan_weight_layout(WeightShape::new(5, 1, 1, 1, 4), 3, &WeightLayout::DEFAULT_PERMUTATION);
        assert_eq!(e, Err(VirtError::InvalidGrouping { g: 3, slices: 2 }));
        assert!(plan_weight_layout(WeightShape::new(5, 1, 1, 1, 4), 0, &WeightLayout::DEFAULT_PERMUTATION).is_err());
    }

    #[test]
    fn permutation_validation() {
        use WeightToken::*;
        let s = WeightShape::new(4, 1, 1, 1, 4);
        assert!(plan_weight_layout(s, 1, &[G, SO, SI, HWD, O4]).is_err());
        assert!(plan_weight_layout(s, 1, &[G, SO, SI, HWD, O4, O4]).is_err());
        assert!(plan_weight_layout(s, 1, &[G, SO, SI, O4, I4, HWD]).is_err());
        assert!(plan_weight_layout(s, 1, &[HWD, G, SO, SI, I4, O4]).is_ok());
    }

    #[test]
    fn four_textures_of_eight_texels() {
        let wts = ohwi(5, 2, 1, 7);
        let layout = plan_weight_layout(WeightShape::new(5, 2, 1, 1, 7), 1, &WeightLayout::DEFAULT_PERMUTATION).unwrap();
        let set = rearrange_weights(&wts, &layout).unwrap();
        assert_eq!(set.len(), 4);
        for o in &set.objects {
            assert_eq!(o.extent.dims(), &[4, 2]);
            assert_eq!(o.data.len(), 8);
        }
        assert_eq!(set.total_texels(), 32);
        let loc = set.resolve([4, 0, 0, 0, 6]).unwrap();
        assert_eq!(loc.object, 3);
        // Padding sits exactly where o >= 5 or i >= 7.
        let mut nonzero = 0;
        for (k, obj) in set.objects.iter().enumerate() {
            let (so, si) = (k / 2, k % 2);
            for (t, texel) in obj.data.iter().enumerate() {
                let (o4, hwd) = (t % 4, t / 4);
                let _ = hwd;
                for (lane, &v) in texel.iter().enumerate() {
                    let o = so * 4 + o4;
                    let i = si * 4 + lane;
                    if o >= 5 || i >= 7 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_ne!(v, 0.0);
                        nonzero += 1;
                    }
                }
            }
        }
        assert_eq!(nonzero, 70);
        assert_eq!(set.to_logical(), wts);
    }

    #[test]
    fn exact_multiple_weights() {
        let wts = ohwi(4, 1, 1, 4);
        let layout = plan_weight_layout(WeightShape::new(4, 1, 1, 1, 4), 1, &WeightLayout::DEFAULT_PERMUTATION).unwrap();
        let set = rearrange_weights(&wts, &layout).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.objects[0].data.len(), 4);
        assert!(set.objects[0].data.iter().flatten().all(|&v| v != 0.0));
    }

    #[test]
    fn rearrange_rejects_wrong_shape() {
        let layout = plan_weight_layout(WeightShape::new(4, 1, 1, 1, 4), 1, &WeightLayout::DEFAULT_PERMUTATION).unwrap();
        assert!(matches!(
            rearrange_weights(&ohwi(4, 1, 1, 5), &layout),
            Err(VirtError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_weights_all_permutations_are_injective() {
        use WeightToken::*;
        let wts = ohwi(9, 2, 2, 6);
        let perms: [[WeightToken; 6]; 3] = [
            [G, SO, SI, HWD, O4, I4],
            [HWD, SI, G, SO, I4, O4],
            [SI, G, HWD, O4, SO, I4],
        ];
        for p in perms {
            let layout = plan_weight_layout(WeightShape::new(9, 2, 2, 1, 6), 3, &p).unwrap();
            let set = linearize_weights(&wts, &layout).unwrap();
            assert_eq!(set.total_texels() * 4, layout.padded_elements());
            let locs: HashSet<_> = wts.shape().coords().map(|c| set.resolve(c).unwrap()).collect();
            assert_eq!(locs.len(), wts.shape().element_count());
            assert_eq!(set.to_logical(), wts);
        }
    }

    #[test]
    fn single_object_split_matches_pack() {
        let shape = LogicalShape::bhwc(1, 2, 3, 5);
        let t = LogicalTensor::from_fn(shape, |c| shape.offset(c) as f32);
        let set = virtualize(&t, StorageType::Texture2d, 1).unwrap();
        assert_eq!(set.objects[0], pack(&t, &LayoutDescriptor::canonical(StorageType::Texture2d)));
        for c in shape.coords() {
            assert_eq!(set.resolve(c).unwrap().object, 0);
        }
    }

    #[test]
    fn two_object_split() {
        let shape = LogicalShape::bhwc(1, 2, 3, 8);
        let t = LogicalTensor::from_fn(shape, |c| shape.offset(c) as f32 + 0.5);
        let set = virtualize(&t, StorageType::Texture3d, 2).unwrap();
        assert_eq!(set.len(), 2);
        for (k, o) in set.objects.iter().enumerate() {
            assert_eq!(o.data.len(), 6);
            let sub_shape = shape.with_c(4);
            let sub = unpack(o, &sub_shape).unwrap();
            for [b, h, w, d, c] in sub_shape.coords() {
                assert_eq!(sub.get([b, h, w, d, c]).unwrap(), t.get([b, h, w, d, k * 4 + c]).unwrap());
            }
        }
        assert_eq!(set.to_logical(), t);
    }

    #[test]
    fn degenerate_splits() {
        let t = LogicalTensor::zeros(LogicalShape::bhwc(1, 1, 1, 4));
        assert_eq!(
            virtualize(&t, StorageType::Texture2d, 2),
            Err(VirtError::DegenerateSplit { objects: 2, slices: 1 })
        );
        assert!(virtualize(&t, StorageType::Texture2d, 0).is_err());
        // 5 slices over 4 objects would leave the last object empty.
        let t = LogicalTensor::zeros(LogicalShape::bhwc(1, 1, 1, 20));
        assert!(virtualize(&t, StorageType::Texture2d, 4).is_err());
        assert_eq!(virtualize(&t, StorageType::Texture2d, 3).unwrap().len(), 3);
    }

    #[test]
    fn out_of_range_resolve() {
        let t = LogicalTensor::zeros(LogicalShape::bhwc(1, 2, 2, 4));
        let set = virtualize(&t, StorageType::Buffer1d, 1).unwrap();
        assert!(matches!(set.resolve([0, 2, 0, 0, 0]), Err(VirtError::OutOfBounds { .. })));
    }
}
