//! Single-object physical layouts: slice packing, physical extents and
//! coordinate translation from logical `(b, x, y, s)` to storage coordinates.
//!
//! A layout is a storage kind plus an outer-to-inner permutation of the tokens
//! `B H W D S C4`. `C4` (the lane inside a slice) is always innermost, so every
//! texel holds four consecutive channels. The linear texel index is the mixed
//! radix number formed by the remaining five tokens; texture coordinates are
//! that index unravelled over the extent with width fastest.
//!
//! The default permutations reproduce the classic coordinate table:
//!
//! | storage            | coordinates                       |
//! |--------------------|-----------------------------------|
//! | buffer / image buf | `((s*H + y)*W + x)*B + b`         |
//! | 2D texture         | `(x*B + b, y*S + s)`              |
//! | 3D texture / array | `(x*B + b, y, s)`                 |
//!
//! A depth axis `D > 1` is folded next to batch on the width axis:
//! `u = (x*B + b)*D + d`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{pad_channels, LogicalShape, LogicalTensor, LANES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("coordinate (b={b}, x={x}, y={y}, d={d}, s={s}) out of bounds for shape {shape}")]
    OutOfBounds {
        b: usize,
        x: usize,
        y: usize,
        d: usize,
        s: usize,
        shape: LogicalShape,
    },
    #[error("invalid layout permutation: {0}")]
    InvalidPermutation(String),
    #[error("object extent {found:?} does not match shape {shape} (expected {expected:?})")]
    ExtentMismatch {
        shape: LogicalShape,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown storage type `{0}`")]
    UnknownStorage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageType {
    Buffer1d,
    ImageBuffer1d,
    Texture2d,
    Texture3d,
    TextureArray2d,
}

impl StorageType {
    pub const ALL: [StorageType; 5] = [
        StorageType::Buffer1d,
        StorageType::ImageBuffer1d,
        StorageType::Texture2d,
        StorageType::Texture3d,
        StorageType::TextureArray2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StorageType::Buffer1d => "buffer-1d",
            StorageType::ImageBuffer1d => "image-buffer-1d",
            StorageType::Texture2d => "texture-2d",
            StorageType::Texture3d => "texture-3d",
            StorageType::TextureArray2d => "texture-array-2d",
        }
    }

    pub fn is_texture(self) -> bool {
        !matches!(self, StorageType::Buffer1d)
    }
}

impl fmt::Display for StorageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StorageType {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StorageType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| LayoutError::UnknownStorage(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutToken {
    B,
    H,
    W,
    D,
    S,
    C4,
}

impl LayoutToken {
    fn symbol(self) -> &'static str {
        match self {
            LayoutToken::B => "B",
            LayoutToken::H => "H",
            LayoutToken::W => "W",
            LayoutToken::D => "D",
            LayoutToken::S => "S",
            LayoutToken::C4 => "C4",
        }
    }

    fn extent(self, shape: &LogicalShape) -> usize {
        match self {
            LayoutToken::B => shape.b,
            LayoutToken::H => shape.h,
            LayoutToken::W => shape.w,
            LayoutToken::D => shape.d,
            LayoutToken::S => shape.slices(),
            LayoutToken::C4 => LANES,
        }
    }
}

/// Storage kind plus memory order of the logical axes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    storage: StorageType,
    permutation: Vec<LayoutToken>,
}

impl LayoutDescriptor {
    pub fn new(storage: StorageType, permutation: Vec<LayoutToken>) -> Result<Self, LayoutError> {
        use LayoutToken::*;
        if permutation.len() != 6 {
            return Err(LayoutError::InvalidPermutation(format!(
                "expected 6 tokens, got {}",
                permutation.len()
            )));
        }
        for tok in [B, H, W, D, S, C4] {
            if permutation.iter().filter(|&&t| t == tok).count() != 1 {
                return Err(LayoutError::InvalidPermutation(format!(
                    "token {} must appear exactly once",
                    tok.symbol()
                )));
            }
        }
        if permutation[5] != C4 {
            return Err(LayoutError::InvalidPermutation("C4 must be innermost".into()));
        }
        Ok(LayoutDescriptor {
            storage,
            permutation,
        })
    }

    /// Default layout for a storage kind.
    pub fn canonical(storage: StorageType) -> Self {
        use LayoutToken::*;
        let permutation = match storage {
            StorageType::Texture2d => vec![H, S, W, B, D, C4],
            _ => vec![S, H, W, B, D, C4],
        };
        LayoutDescriptor {
            storage,
            permutation,
        }
    }

    /// Parses names such as `HSWBDC4` or `DSHWBC4`.
    pub fn named(storage: StorageType, name: &str) -> Result<Self, LayoutError> {
        use LayoutToken::*;
        let body = name
            .strip_suffix("C4")
            .ok_or_else(|| LayoutError::InvalidPermutation(format!("`{name}` must end in C4")))?;
        let mut perm = body
            .chars()
            .map(|ch| match ch {
                'B' => Ok(B),
                'H' => Ok(H),
                'W' => Ok(W),
                'D' => Ok(D),
                'S' => Ok(S),
                other => Err(LayoutError::InvalidPermutation(format!(
                    "unexpected axis `{other}` in `{name}`"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        perm.push(C4);
        Self::new(storage, perm)
    }

    pub fn storage(&self) -> StorageType {
        self.storage
    }

    pub fn permutation(&self) -> &[LayoutToken] {
        &self.permutation
    }

    pub fn name(&self) -> String {
        self.permutation.iter().map(|t| t.symbol()).collect()
    }

    pub fn is_canonical(&self) -> bool {
        *self == Self::canonical(self.storage)
    }

    /// Linear texel index of slice `s` at `(b, h, w, d)`.
    pub fn texel_index(&self, shape: &LogicalShape, b: usize, h: usize, w: usize, d: usize, s: usize) -> usize {
        let mut index = 0;
        for &tok in &self.permutation[..5] {
            let i = match tok {
                LayoutToken::B => b,
                LayoutToken::H => h,
                LayoutToken::W => w,
                LayoutToken::D => d,
                LayoutToken::S => s,
                LayoutToken::C4 => unreachable!(),
            };
            index = index * tok.extent(shape) + i;
        }
        index
    }

    /// Physical coordinate of a linear texel index.
    pub fn coord_of_texel(&self, shape: &LogicalShape, index: usize) -> PhysicalCoord {
        let extent = physical_extent(shape, self.storage);
        extent.unravel(self.storage, index)
    }

    /// Coordinate translation including the depth axis.
    pub fn translate(
        &self,
        shape: &LogicalShape,
        b: usize,
        x: usize,
        y: usize,
        d: usize,
        s: usize,
    ) -> Result<PhysicalCoord, LayoutError> {
        if b >= shape.b || x >= shape.w || y >= shape.h || d >= shape.d || s >= shape.slices() {
            return Err(LayoutError::OutOfBounds {
                b,
                x,
                y,
                d,
                s,
                shape: *shape,
            });
        }
        Ok(self.coord_of_texel(shape, self.texel_index(shape, b, y, x, d, s)))
    }
}

impl fmt::Display for LayoutDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.storage, self.name())
    }
}

/// Size of a physical object in texels, listed as `[width, height, depth]`
/// (or fewer dims for 1D/2D kinds).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhysicalExtent {
    dims: Vec<usize>,
}

impl PhysicalExtent {
    pub fn new(dims: Vec<usize>) -> Self {
        PhysicalExtent { dims }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims.get(1).copied().unwrap_or(1)
    }

    pub fn depth(&self) -> usize {
        self.dims.get(2).copied().unwrap_or(1)
    }

    pub fn texels(&self) -> usize {
        self.dims.iter().product()
    }

    fn unravel(&self, storage: StorageType, index: usize) -> PhysicalCoord {
        let (w, h) = (self.width(), self.height());
        match storage {
            StorageType::Buffer1d | StorageType::ImageBuffer1d => PhysicalCoord::Linear(index),
            StorageType::Texture2d => PhysicalCoord::Tex2d {
                u: index % w,
                v: index / w,
            },
            StorageType::Texture3d => PhysicalCoord::Tex3d {
                u: index % w,
                v: (index / w) % h,
                w: index / (w * h),
            },
            StorageType::TextureArray2d => PhysicalCoord::Layer {
                u: index % w,
                v: (index / w) % h,
                layer: index / (w * h),
            },
        }
    }

    /// Row-major (width fastest) position of a coordinate in the texel data.
    pub fn linear(&self, coord: PhysicalCoord) -> usize {
        let (w, h) = (self.width(), self.height());
        match coord {
            PhysicalCoord::Linear(i) => i,
            PhysicalCoord::Tex2d { u, v } => v * w + u,
            PhysicalCoord::Tex3d { u, v, w: z } => (z * h + v) * w + u,
            PhysicalCoord::Layer { u, v, layer } => (layer * h + v) * w + u,
        }
    }
}

/// Address inside one physical object, in texel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhysicalCoord {
    /// Texel (4-element group) index of a 1D buffer or image buffer.
    Linear(usize),
    Tex2d { u: usize, v: usize },
    Tex3d { u: usize, v: usize, w: usize },
    Layer { u: usize, v: usize, layer: usize },
}

impl PhysicalCoord {
    pub fn components(&self) -> Vec<usize> {
        match *self {
            PhysicalCoord::Linear(i) => vec![i],
            PhysicalCoord::Tex2d { u, v } => vec![u, v],
            PhysicalCoord::Tex3d { u, v, w } => vec![u, v, w],
            PhysicalCoord::Layer { u, v, layer } => vec![u, v, layer],
        }
    }
}

pub fn physical_extent(shape: &LogicalShape, storage: StorageType) -> PhysicalExtent {
    let s = shape.slices();
    let width = shape.w * shape.b * shape.d;
    let dims = match storage {
        StorageType::Buffer1d | StorageType::ImageBuffer1d => vec![shape.rows() * s],
        StorageType::Texture2d => vec![width, shape.h * s],
        StorageType::Texture3d | StorageType::TextureArray2d => vec![width, shape.h, s],
    };
    PhysicalExtent { dims }
}

/// Coordinate translation for a 4D `BHWC` tensor with the default layout.
pub fn translate_coords(
    b: usize,
    x: usize,
    y: usize,
    s: usize,
    shape: &LogicalShape,
    storage: StorageType,
) -> Result<PhysicalCoord, LayoutError> {
    LayoutDescriptor::canonical(storage).translate(shape, b, x, y, 0, s)
}

pub type Texel = [f32; LANES];

/// One physical object holding packed slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedObject {
    pub descriptor: LayoutDescriptor,
    pub extent: PhysicalExtent,
    pub data: Vec<Texel>,
}

impl PackedObject {
    pub fn zeroed(descriptor: LayoutDescriptor, extent: PhysicalExtent) -> Self {
        let data = vec![[0.0; LANES]; extent.texels()];
        PackedObject {
            descriptor,
            extent,
            data,
        }
    }

    pub fn texel(&self, coord: PhysicalCoord) -> Texel {
        self.data[self.extent.linear(coord)]
    }

    pub fn texel_mut(&mut self, coord: PhysicalCoord) -> &mut Texel {
        let i = self.extent.linear(coord);
        &mut self.data[i]
    }
}

pub fn pack(tensor: &LogicalTensor, descriptor: &LayoutDescriptor) -> PackedObject {
    let shape = tensor.shape();
    let padded = pad_channels(tensor);
    let extent = physical_extent(&shape, descriptor.storage());
    let mut object = PackedObject::zeroed(descriptor.clone(), extent);
    let pc = shape.padded_c();
    for (row, chunk) in padded.values().chunks(pc).enumerate() {
        let [b, h, w, d, _] = shape.with_c(1).coord_of(row);
        for (s, lanes) in chunk.chunks(LANES).enumerate() {
            let idx = descriptor.texel_index(&shape, b, h, w, d, s);
            object.data[idx].copy_from_slice(lanes);
        }
    }
    object
}

pub fn unpack(object: &PackedObject, shape: &LogicalShape) -> Result<LogicalTensor, LayoutError> {
    let expected = physical_extent(shape, object.descriptor.storage());
    if expected != object.extent || object.data.len() != expected.texels() {
        return Err(LayoutError::ExtentMismatch {
            shape: *shape,
            expected: expected.dims,
            found: object.extent.dims.clone(),
        });
    }
    let desc = &object.descriptor;
    let values = shape
        .coords()
        .map(|[b, h, w, d, c]| object.data[desc.texel_index(shape, b, h, w, d, c / LANES)][c % LANES])
        .collect();
    Ok(LogicalTensor::from_parts_unchecked(*shape, crate::tensor::DataType::F32, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn shape_1235() -> LogicalShape {
        LogicalShape::bhwc(1, 2, 3, 5)
    }

    #[test]
    fn extents_of_small_tensor() {
        let s = shape_1235();
        let e = physical_extent(&s, StorageType::Texture3d);
        assert_eq!((e.width(), e.height(), e.depth()), (3, 2, 2));
        assert_eq!(physical_extent(&s, StorageType::ImageBuffer1d).dims(), &[12]);
        let e = physical_extent(&s, StorageType::Texture2d);
        assert_eq!((e.width(), e.height()), (3, 4));
    }

    #[test]
    fn table_examples() {
        let s = LogicalShape::bhwc(1, 2, 3, 5);
        assert_eq!(
            translate_coords(0, 1, 1, 1, &s, StorageType::Buffer1d).unwrap(),
            PhysicalCoord::Linear(10)
        );
        assert_eq!(
            translate_coords(0, 2, 0, 1, &s, StorageType::Texture2d).unwrap(),
            PhysicalCoord::Tex2d { u: 2, v: 1 }
        );
        let s = LogicalShape::bhwc(2, 3, 1, 4);
        assert_eq!(
            translate_coords(1, 0, 2, 0, &s, StorageType::Texture3d).unwrap(),
            PhysicalCoord::Tex3d { u: 1, v: 2, w: 0 }
        );
    }

    #[test]
    fn out_of_range_coordinate() {
        let s = shape_1235();
        assert!(matches!(
            translate_coords(0, 3, 0, 0, &s, StorageType::Texture2d),
            Err(LayoutError::OutOfBounds { .. })
        ));
        assert!(translate_coords(0, 0, 0, 2, &s, StorageType::Buffer1d).is_err());
        assert!(translate_coords(1, 0, 0, 0, &s, StorageType::Texture3d).is_err());
    }

    #[test]
    fn named_layouts() {
        let d = LayoutDescriptor::named(StorageType::Texture2d, "HSWBDC4").unwrap();
        assert!(d.is_canonical());
        assert_eq!(d.name(), "HSWBDC4");
        let d = LayoutDescriptor::named(StorageType::Texture3d, "DSHWBC4").unwrap();
        assert_eq!(d.permutation()[0], LayoutToken::D);
        assert!(LayoutDescriptor::named(StorageType::Texture3d, "DSHWB").is_err());
        assert!(LayoutDescriptor::named(StorageType::Texture3d, "SSHWBC4").is_err());
        use LayoutToken::*;
        assert!(LayoutDescriptor::new(StorageType::Buffer1d, vec![C4, S, H, W, B, D]).is_err());
    }

    #[test]
    fn single_slice_texel() {
        let shape = LogicalShape::new(1, 1, 1, 1, 4).unwrap();
        let t = LogicalTensor::from_f32(shape, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for st in [StorageType::Texture2d, StorageType::Texture3d, StorageType::TextureArray2d] {
            let o = pack(&t, &LayoutDescriptor::canonical(st));
            assert_eq!(o.data, vec![[1.0, 2.0, 3.0, 4.0]]);
        }
    }

    #[test]
    fn texture2d_padding_pattern() {
        // Oracle: place every element through translate_coords and count
        // texels whose lanes 1..4 stay zero.
        let shape = shape_1235();
        let t = LogicalTensor::from_fn(shape, |c| (shape.offset(c) + 1) as f32);
        let o = pack(&t, &LayoutDescriptor::canonical(StorageType::Texture2d));
        assert_eq!(o.data.len(), 12);
        let mut expected = vec![[0.0f32; 4]; 12];
        for coord in shape.coords() {
            let [b, y, x, _, c] = coord;
            let pc = translate_coords(b, x, y, c / 4, &shape, StorageType::Texture2d).unwrap();
            let PhysicalCoord::Tex2d { u, v } = pc else { panic!() };
            expected[v * 3 + u][c % 4] = t.get(coord).unwrap();
        }
        assert_eq!(o.data, expected);
        let partial = o
            .data
            .iter()
            .filter(|t| t[0] != 0.0 && t[1] == 0.0 && t[2] == 0.0 && t[3] == 0.0)
            .count();
        assert_eq!(partial, 6);
    }

    #[test]
    fn all_storage_kinds_round_trip() {
        let shape = shape_1235();
        let t = LogicalTensor::from_fn(shape, |c| shape.offset(c) as f32 - 7.5);
        for st in StorageType::ALL {
            let o = pack(&t, &LayoutDescriptor::canonical(st));
            assert_eq!(unpack(&o, &shape).unwrap(), t, "{st}");
        }
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let shape = shape_1235();
        let t = LogicalTensor::from_fn(shape, |_| 1.0);
        let o = pack(&t, &LayoutDescriptor::canonical(StorageType::Texture2d));
        let other = LogicalShape::bhwc(1, 3, 2, 5);
        assert!(matches!(unpack(&o, &other), Err(LayoutError::ExtentMismatch { .. })));
    }

    #[test]
    fn translation_is_injective() {
        let shape = LogicalShape::new(2, 3, 4, 2, 9).unwrap();
        for st in StorageType::ALL {
            let desc = LayoutDescriptor::canonical(st);
            let mut seen = HashSet::new();
            for b in 0..2 {
                for y in 0..3 {
                    for x in 0..4 {
                        for d in 0..2 {
                            for s in 0..3 {
                                assert!(seen.insert(desc.translate(&shape, b, x, y, d, s).unwrap()));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn extents_are_tight() {
        for c in 1..10 {
            let shape = LogicalShape::bhwc(2, 3, 2, c);
            for st in StorageType::ALL {
                let e = physical_extent(&shape, st);
                assert_eq!(e.texels() * 4, shape.padded_element_count());
            }
        }
    }

    #[test]
    fn storage_names_parse() {
        for st in StorageType::ALL {
            assert_eq!(st.name().parse::<StorageType>().unwrap(), st);
        }
        assert!("texture-4d".parse::<StorageType>().is_err());
    }
}
