//! Three-view ensemble: per-view inference, alignment back to volume axes and
//! voxel-wise averaging.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_slices, restack_planes, MultiModalVolume, SmmvFile, SmmvHeader, View, LABEL_CHANNELS};
use crate::error::{Error, Result};
use crate::flops::{flops_count, FlopsReport};
use crate::metrics::{dice_ratio_3d, nll, ClassDice, FlopsSummary, MetricsReport};
use crate::model::SpikingUSegNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class probabilities `[3, X, Y, Z]` in canonical volume axes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume<T> {
    pub probs: Tensor<T>,
    /// View name, or `"ensemble"` for fused output.
    pub provenance: String,
}

impl<T: Scalar> ProbVolume<T> {
    pub fn new(probs: Tensor<T>, provenance: impl Into<String>) -> Result<Self> {
        if probs.rank() != 4 || probs.shape()[0] != LABEL_CHANNELS.len() {
            return Err(Error::Rank { op: "ProbVolume", expected: 4, actual: probs.shape().to_vec() });
        }
        if probs.data().iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(Self { probs, provenance: provenance.into() })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    /// SMMV form: probabilities in the intensity slot, no labels.
    pub fn to_smmv(&self) -> SmmvFile {
        let probs = self.probs.cast::<f32>();
        SmmvFile {
            header: SmmvHeader {
                shape: self.dims(),
                modalities: LABEL_CHANNELS.iter().map(|s| s.to_string()).collect(),
                label_channels: Vec::new(),
                spacing: [1.0; 3],
                pipeline: Vec::new(),
                provenance: Some(self.provenance.clone()),
            },
            intensities: probs,
            labels: None,
        }
    }
}

/// Put a `[S, 3, H, W]` stack of per-slice maps back into canonical axes.
pub fn align_to_canonical<T: Scalar>(stack: &Tensor<T>, view: View) -> Result<ProbVolume<T>> {
    ProbVolume::new(restack_planes(stack, view)?, view.name())
}

/// Voxel-wise arithmetic mean of three aligned volumes.
pub fn fuse_mean<T: Scalar>(a: &ProbVolume<T>, b: &ProbVolume<T>, c: &ProbVolume<T>) -> Result<ProbVolume<T>> {
    for other in [b, c] {
        if other.probs.shape() != a.probs.shape() {
            return Err(Error::ShapeMismatch {
                op: "fuse_mean",
                axis: "volume extent",
                expected: a.probs.len(),
                actual: other.probs.len(),
            });
        }
    }
    let data = a
        .probs
        .data()
        .iter()
        .zip(b.probs.data())
        .zip(c.probs.data())
        .map(|((&x, &y), &z)| mean3(x, y, z))
        .collect();
    Ok(ProbVolume { probs: Tensor::new(a.probs.shape().to_vec(), data)?, provenance: "ensemble".into() })
}

/// Order-independent mean that returns `x` exactly when all three agree and
/// never leaves `[min, max]`.
fn mean3<T: Scalar>(x: T, y: T, z: T) -> T {
    let lo = x.min(y).min(z);
    let hi = x.max(y).max(z);
    let mid = x.min(y).max(x.max(y).min(z));
    (lo + ((mid - lo) + (hi - lo)) / T::lit(3.0)).min(hi)
}

/// Per-voxel population variance of three aligned volumes.
pub fn disagreement<T: Scalar>(views: [&ProbVolume<T>; 3]) -> Result<Tensor<T>> {
    let fused = fuse_mean(views[0], views[1], views[2])?;
    let three = T::lit(3.0);
    let data = (0..fused.probs.len())
        .map(|i| {
            let m = fused.probs.data()[i];
            views.iter().map(|v| (v.probs.data()[i] - m).powi(2)).sum::<T>() / three
        })
        .collect();
    Tensor::new(fused.probs.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub dice: ClassDice,
    pub nll: f64,
    pub flops: FlopsSummary,
}

/// Metrics of one ensemble run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub views: Vec<ViewMetrics>,
    pub ensemble: MetricsReport,
    pub mean_view_nll: f64,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput<T> {
    pub fused: ProbVolume<T>,
    /// Sagittal, coronal, axial.
    pub views: Vec<ProbVolume<T>>,
    pub disagreement: Tensor<T>,
    pub flops: Vec<FlopsReport>,
    pub report: EnsembleReport,
}

/// Run one model on one view of a preprocessed volume.
pub fn predict_view<T: Scalar>(
    model: &SpikingUSegNet<T>,
    volume: &MultiModalVolume,
    view: View,
) -> Result<(ProbVolume<T>, FlopsReport)> {
    let vs = extract_slices(volume, view, "")?;
    let (h, w) = vs.slice_hw();
    let cfg = model.config();
    if (cfg.height, cfg.width) != (h, w) {
        return Err(Error::invalid(format!(
            "{view} model expects {}x{} slices, volume gives {h}x{w}",
            cfg.height, cfg.width
        )));
    }
    let slices: Vec<Tensor<T>> = vs.slices.iter().map(Tensor::cast).collect();
    let mut rec = model.new_recorder();
    let stack = model.forward_volume(&slices, Some(&mut rec))?;
    Ok((align_to_canonical(&stack, view)?, flops_count(&rec)?))
}

/// Models are given in sagittal, coronal, axial order.
pub fn predict_ensemble<T: Scalar>(models: [&SpikingUSegNet<T>; 3], volume: &MultiModalVolume) -> Result<EnsembleOutput<T>> {
    let per_view = View::ALL
        .par_iter()
        .zip(models.par_iter())
        .map(|(&view, model)| predict_view(model, volume, view))
        .collect::<Result<Vec<_>>>()?;
    let (views, flops): (Vec<_>, Vec<_>) = per_view.into_iter().unzip();
    let fused = fuse_mean(&views[0], &views[1], &views[2])?;
    let disagreement = disagreement([&views[0], &views[1], &views[2]])?;

    let labels: Tensor<T> = volume.labels.cast();
    let mut view_metrics = Vec::with_capacity(3);
    for ((v, f), view) in views.iter().zip(&flops).zip(View::ALL) {
        view_metrics.push(ViewMetrics {
            view: view.name().into(),
            dice: dice_ratio_3d(&v.probs, &labels)?,
            nll: nll(&v.probs, &labels)?,
            flops: FlopsSummary::from(f),
        });
    }
    let combined = FlopsReport::combine(&flops);
    let mut sparsity_per_layer = BTreeMap::new();
    for (view, f) in View::ALL.iter().zip(&flops) {
        for l in &f.layers {
            sparsity_per_layer.insert(format!("{}.{}", view.name(), l.name), l.sparsity);
        }
    }
    let ensemble = MetricsReport {
        dice: dice_ratio_3d(&fused.probs, &labels)?,
        nll: nll(&fused.probs, &labels)?,
        flops: FlopsSummary::from(&combined),
        sparsity_per_layer,
    };
    let mean_view_nll = view_metrics.iter().map(|m| m.nll).sum::<f64>() / 3.0;
    Ok(EnsembleOutput {
        fused,
        views,
        disagreement,
        flops,
        report: EnsembleReport { views: view_metrics, ensemble, mean_view_nll },
    })
}
