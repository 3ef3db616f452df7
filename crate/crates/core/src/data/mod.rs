//! Multi-modal volumes, preprocessing and per-view slicing.
//!
//! Volumes are channel-first `[C, X, Y, Z]`. The three anatomical views slice
//! along one spatial axis each:
//!
//! | view     | axis | slice shape |
//! |----------|------|-------------|
//! | sagittal | X    | `[C, Y, Z]` |
//! | coronal  | Y    | `[C, X, Z]` |
//! | axial    | Z    | `[C, X, Y]` |

mod io;
mod phantom;

pub use io::{decode_smmv, encode_smmv, read_smmv, read_volume, write_pgm, write_smmv, write_volume, SmmvFile, SmmvHeader, SMMV_MAGIC};
pub use phantom::{synth_phantom, PhantomConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MODALITIES: [&str; 4] = ["T1", "T2", "T1-Gd", "FLAIR"];
pub const LABEL_CHANNELS: [&str; 3] = ["ET", "TC", "WT"];
/// Native acquisition grid.
pub const BRATS_SHAPE: [usize; 3] = [240, 240, 155];
/// Central region kept by the crop.
pub const CROP_SHAPE: [usize; 3] = [160, 192, 152];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sagittal,
    Coronal,
    Axial,
}

impl View {
    pub const ALL: [View; 3] = [View::Sagittal, View::Coronal, View::Axial];

    /// Spatial axis (0 = X, 1 = Y, 2 = Z) the view slices along.
    pub fn axis(self) -> usize {
        match self {
            View::Sagittal => 0,
            View::Coronal => 1,
            View::Axial => 2,
        }
    }

    /// `(slice count, height, width)` for a volume with spatial extent `dims`.
    pub fn slice_geometry(self, dims: [usize; 3]) -> (usize, usize, usize) {
        let [x, y, z] = dims;
        match self {
            View::Sagittal => (x, y, z),
            View::Coronal => (y, x, z),
            View::Axial => (z, x, y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
            View::Axial => "axial",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" => Ok(View::Sagittal),
            "coronal" => Ok(View::Coronal),
            "axial" => Ok(View::Axial),
            other => Err(Error::invalid(format!("unknown view `{other}`"))),
        }
    }
}

/// Preprocessing stages, in the only order they may be applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cropped,
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    /// `[4, X, Y, Z]` in T1, T2, T1-Gd, FLAIR order.
    pub intensities: Tensor<f32>,
    /// `[3, X, Y, Z]` binary masks in ET, TC, WT order.
    pub labels: Tensor<f32>,
    /// Voxel spacing in mm, informational only.
    pub spacing: [f32; 3],
    pub pipeline: Vec<Stage>,
}

impl MultiModalVolume {
    pub fn new(intensities: Tensor<f32>, labels: Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        let v = Self { intensities, labels, spacing, pipeline: Vec::new() };
        v.validate()?;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        spatial_dims(self.intensities.shape()).unwrap_or([0, 0, 0])
    }

    pub fn validate(&self) -> Result<()> {
        let d = spatial_dims(self.intensities.shape())?;
        if self.intensities.shape()[0] != MODALITIES.len() {
            return Err(Error::ShapeMismatch {
                op: "volume",
                axis: "modalities",
                expected: MODALITIES.len(),
                actual: self.intensities.shape()[0],
            });
        }
        let ld = spatial_dims(self.labels.shape())?;
        if self.labels.shape()[0] != LABEL_CHANNELS.len() || ld != d {
            return Err(Error::ShapeMismatch {
                op: "volume",
                axis: "labels",
                expected: 3 * d.iter().product::<usize>(),
                actual: self.labels.len(),
            });
        }
        if self.labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("labels must be binary"));
        }
        if !labels_nested(&self.labels) {
            return Err(Error::invalid("labels violate ET ⊆ TC ⊆ WT"));
        }
        Ok(())
    }

    /// Fraction of voxels inside the whole-tumor mask.
    pub fn lesion_fraction(&self) -> f64 {
        let per = self.labels.len() / 3;
        let wt = &self.labels.data()[2 * per..];
        wt.iter().filter(|&&v| v == 1.0).count() as f64 / per as f64
    }
}

/// Whether ET ⊆ TC ⊆ WT holds voxelwise for a `[3, ...]` label tensor.
pub fn labels_nested<T: Scalar>(labels: &Tensor<T>) -> bool {
    let per = labels.len() / 3;
    let d = labels.data();
    (0..per).all(|i| d[i] <= d[per + i] && d[per + i] <= d[2 * per + i])
}

fn spatial_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [_, x, y, z] => Ok([x, y, z]),
        _ => Err(Error::Rank { op: "volume", expected: 4, actual: shape.to_vec() }),
    }
}

/// Per-axis offsets of the centered crop, `floor((src - tgt) / 2)`.
pub fn crop_offsets(src: [usize; 3], target: [usize; 3]) -> Result<[usize; 3]> {
    let mut off = [0; 3];
    for a in 0..3 {
        if target[a] > src[a] {
            return Err(Error::invalid(format!(
                "crop target {:?} exceeds source {:?} on axis {a}",
                target, src
            )));
        }
        if target[a] == 0 {
            return Err(Error::invalid("crop target must be non-empty"));
        }
        off[a] = (src[a] - target[a]) / 2;
    }
    Ok(off)
}

fn crop_tensor<T: Scalar>(t: &Tensor<T>, off: [usize; 3], target: [usize; 3]) -> Result<Tensor<T>> {
    let c = t.shape()[0];
    let [_, sy, sz] = spatial_dims(t.shape())?;
    let sx = t.shape()[1];
    let mut out = Vec::with_capacity(c * target.iter().product::<usize>());
    let d = t.data();
    for ch in 0..c {
        for x in off[0]..off[0] + target[0] {
            for y in off[1]..off[1] + target[1] {
                let base = ((ch * sx + x) * sy + y) * sz;
                out.extend_from_slice(&d[base + off[2]..base + off[2] + target[2]]);
            }
        }
    }
    Tensor::new(vec![c, target[0], target[1], target[2]], out)
}

/// Keep the central `target` region of intensities and labels.
pub fn center_crop(volume: &MultiModalVolume, target: [usize; 3]) -> Result<MultiModalVolume> {
    if !volume.pipeline.is_empty() {
        return Err(Error::Pipeline(format!("crop must come first, volume already {:?}", volume.pipeline)));
    }
    let off = crop_offsets(volume.dims(), target)?;
    let mut pipeline = volume.pipeline.clone();
    pipeline.push(Stage::Cropped);
    Ok(MultiModalVolume {
        intensities: crop_tensor(&volume.intensities, off, target)?,
        labels: crop_tensor(&volume.labels, off, target)?,
        spacing: volume.spacing,
        pipeline,
    })
}

/// Min-max scale each channel of a channel-first tensor over all its voxels.
/// A constant channel maps to zeros.
pub fn minmax_channels(t: &Tensor<f32>) -> Tensor<f32> {
    let c = t.shape()[0].max(1);
    let per = t.len() / c;
    let mut out = t.clone();
    for chunk in out.data_mut().chunks_mut(per.max(1)) {
        let (lo, hi) = chunk
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            let range = hi - lo;
            chunk.iter_mut().for_each(|v| *v = (*v - lo) / range);
        } else {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Per-modality min-max normalization over the whole 3D volume. Labels are untouched.
pub fn minmax_normalize(volume: &MultiModalVolume) -> Result<MultiModalVolume> {
    if volume.pipeline != [Stage::Cropped] {
        return Err(Error::Pipeline(format!(
            "normalize expects a cropped volume, pipeline is {:?}",
            volume.pipeline
        )));
    }
    let mut out = volume.clone();
    out.intensities = minmax_channels(&volume.intensities);
    out.pipeline.push(Stage::Normalized);
    Ok(out)
}

/// Crop then normalize.
pub fn preprocess(volume: &MultiModalVolume, target: [usize; 3]) -> Result<MultiModalVolume> {
    minmax_normalize(&center_crop(volume, target)?)
}

/// Cut a `[C, X, Y, Z]` tensor into the view's `[C, H, W]` planes.
pub fn extract_planes<T: Scalar>(t: &Tensor<T>, view: View) -> Result<Vec<Tensor<T>>> {
    let c = t.shape()[0];
    let dims = spatial_dims(t.shape())?;
    let [_, sy, sz] = dims;
    let (n, h, w) = view.slice_geometry(dims);
    let d = t.data();
    let idx = |ch: usize, x: usize, y: usize, z: usize| ((ch * dims[0] + x) * sy + y) * sz + z;
    let mut planes = Vec::with_capacity(n);
    for s in 0..n {
        let mut p = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = match view {
                        View::Sagittal => d[idx(ch, s, i, j)],
                        View::Coronal => d[idx(ch, i, s, j)],
                        View::Axial => d[idx(ch, i, j, s)],
                    };
                    p.push(v);
                }
            }
        }
        planes.push(Tensor::new(vec![c, h, w], p)?);
    }
    Ok(planes)
}

/// Inverse of [`extract_planes`] for a `[S, C, H, W]` stack.
pub fn restack_planes<T: Scalar>(stack: &Tensor<T>, view: View) -> Result<Tensor<T>> {
    let [s, c, h, w] = match *stack.shape() {
        [s, c, h, w] => [s, c, h, w],
        ref other => return Err(Error::Rank { op: "restack", expected: 4, actual: other.to_vec() }),
    };
    let dims = match view {
        View::Sagittal => [s, h, w],
        View::Coronal => [h, s, w],
        View::Axial => [h, w, s],
    };
    let [dx, dy, dz] = dims;
    let mut out = vec![T::zero(); c * dx * dy * dz];
    let src = stack.data();
    for si in 0..s {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (x, y, z) = match view {
                        View::Sagittal => (si, i, j),
                        View::Coronal => (i, si, j),
                        View::Axial => (i, j, si),
                    };
                    out[((ch * dx + x) * dy + y) * dz + z] = src[((si * c + ch) * h + i) * w + j];
                }
            }
        }
    }
    Tensor::new(vec![c, dx, dy, dz], out)
}

/// Slice sequence of one volume along one view, with matching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSlices {
    pub view: View,
    pub id: String,
    /// `[4, H, W]` per slice.
    pub slices: Vec<Tensor<f32>>,
    /// `[3, H, W]` per slice.
    pub labels: Vec<Tensor<f32>>,
    pub dims: [usize; 3],
}

impl ViewSlices {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// `(height, width)` of every slice.
    pub fn slice_hw(&self) -> (usize, usize) {
        let (_, h, w) = self.view.slice_geometry(self.dims);
        (h, w)
    }
}

/// Slice a preprocessed volume along `view`.
pub fn extract_slices(volume: &MultiModalVolume, view: View, id: impl Into<String>) -> Result<ViewSlices> {
    if volume.pipeline != [Stage::Cropped, Stage::Normalized] {
        return Err(Error::Pipeline(format!(
            "slicing expects crop -> normalize, pipeline is {:?}",
            volume.pipeline
        )));
    }
    Ok(ViewSlices {
        view,
        id: id.into(),
        slices: extract_planes(&volume.intensities, view)?,
        labels: extract_planes(&volume.labels, view)?,
        dims: volume.dims(),
    })
}
