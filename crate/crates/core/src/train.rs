//! Epoch-level training loop for one view model.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{restack_planes, ViewSlices, View};
use crate::error::{Error, Result};
use crate::fptt::{train_sequence, FpttState, PlateauScheduler, StepRecord, TrainConfig};
use crate::metrics::{dice_ratio_3d, ClassDice};
use crate::model::SpikingUSegNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "epoch,volume,t,task_loss,r,total,grad_norm,lr";

/// Generator for one epoch: a fixed seed with the epoch as stream id, so an
/// epoch can be replayed without running the ones before it.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub mean_task_loss: f64,
    pub lr: f64,
    pub val_dice: Option<ClassDice>,
    pub improved: bool,
}

pub struct Trainer<T> {
    pub model: SpikingUSegNet<T>,
    pub fptt: FpttState<T>,
    cfg: TrainConfig,
    view: View,
    seed: u64,
    scheduler: PlateauScheduler,
    /// Completed epochs.
    epoch: usize,
    best: Option<(f64, SpikingUSegNet<T>)>,
    csv: String,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SpikingUSegNet<T>, cfg: TrainConfig, view: View, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fptt = FpttState::new(model.params(), cfg.alpha, cfg.lr)?;
        let scheduler = PlateauScheduler::new(cfg.plateau.clone(), cfg.lr);
        Ok(Self {
            model,
            fptt,
            cfg,
            view,
            seed,
            scheduler,
            epoch: 0,
            best: None,
            csv: format!("{CSV_HEADER}\n"),
        })
    }

    /// Continue after `completed` epochs with weights loaded from a checkpoint.
    /// Optimizer moments start from zero.
    pub fn resume(model: SpikingUSegNet<T>, cfg: TrainConfig, view: View, seed: u64, completed: usize) -> Result<Self> {
        let mut t = Self::new(model, cfg, view, seed)?;
        t.epoch = completed;
        Ok(t)
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn csv(&self) -> &str {
        &self.csv
    }

    /// Best model by validation Dice, or the current one when no validation ran.
    pub fn best_model(&self) -> &SpikingUSegNet<T> {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|(s, _)| *s)
    }

    /// One pass over `train` in shuffled batches of same-shaped volumes.
    pub fn run_epoch(&mut self, train: &[ViewSlices], val: &[ViewSlices]) -> Result<EpochSummary> {
        if train.is_empty() {
            return Err(Error::invalid("no training volumes"));
        }
        for vs in train.iter().chain(val) {
            if vs.view != self.view {
                return Err(Error::invalid(format!("{} slices given to a {} trainer", vs.view, self.view)));
            }
        }
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        self.fptt.re_anchor(self.model.params())?;
        self.fptt.lr = self.scheduler.lr();

        let mut steps = 0;
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let members: Vec<&ViewSlices> = batch.iter().map(|&i| &train[i]).collect();
            let (inputs, targets) = stack_batch(&members)?;
            let records = train_sequence(&mut self.model, &mut self.fptt, &inputs, &targets, &self.cfg, &mut rng)?;
            let id = members.iter().map(|m| m.id.as_str()).collect::<Vec<_>>().join("+");
            for r in &records {
                self.push_row(epoch, &id, r);
                loss_sum += r.task_loss;
            }
            steps += records.len();
        }

        let val_dice = if val.is_empty() { None } else { Some(evaluate(&self.model, val)?) };
        let mean_task_loss = loss_sum / steps as f64;
        let score = val_dice.as_ref().map(ClassDice::mean);
        let improved = match (score, &self.best) {
            (Some(s), Some((b, _))) => s > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best = Some((score.unwrap(), self.model.clone()));
        }
        let lr = self.fptt.lr;
        self.scheduler.step(score.map_or(mean_task_loss, |s| 1.0 - s));
        self.epoch = epoch;
        Ok(EpochSummary { epoch, steps, mean_task_loss, lr, val_dice, improved })
    }

    fn push_row(&mut self, epoch: usize, id: &str, r: &StepRecord) {
        let _ = writeln!(
            self.csv,
            "{epoch},{id},{},{},{},{},{},{}",
            r.t, r.task_loss, r.reg, r.total, r.grad_norm, r.lr
        );
    }
}

/// Stack the per-slice tensors of several volumes into `[N, C, H, W]` time steps.
fn stack_batch<T: Scalar>(members: &[&ViewSlices]) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let first = members[0];
    for m in members {
        if m.len() != first.len() || m.slice_hw() != first.slice_hw() {
            return Err(Error::invalid(format!(
                "volume `{}` does not share the slice geometry of `{}`",
                m.id, first.id
            )));
        }
    }
    let step = |t: usize, pick: fn(&ViewSlices) -> &[Tensor<f32>]| -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = members.iter().map(|m| pick(m)[t].cast()).collect();
        Tensor::stack(&items)
    };
    let inputs = (0..first.len()).map(|t| step(t, |m| &m.slices)).collect::<Result<_>>()?;
    let targets = (0..first.len()).map(|t| step(t, |m| &m.labels)).collect::<Result<_>>()?;
    Ok((inputs, targets))
}

/// Mean per-class 3D Dice of a single view model over whole volumes.
pub fn evaluate<T: Scalar>(model: &SpikingUSegNet<T>, volumes: &[ViewSlices]) -> Result<ClassDice> {
    let scores = volumes
        .iter()
        .map(|vs| {
            let slices: Vec<Tensor<T>> = vs.slices.iter().map(Tensor::cast).collect();
            let labels: Vec<Tensor<T>> = vs.labels.iter().map(Tensor::cast).collect();
            let probs = restack_planes(&model.forward_volume(&slices, None)?, vs.view)?;
            let truth = restack_planes(&Tensor::stack(&labels)?, vs.view)?;
            dice_ratio_3d(&probs, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassDice::average(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_slices, preprocess, synth_phantom, PhantomConfig};
    use crate::model::ModelConfig;

    fn tiny(view: View, n: usize) -> Vec<ViewSlices> {
        (0..n)
            .map(|i| {
                let v = synth_phantom(i as u64, [8, 8, 8], &PhantomConfig::default()).unwrap();
                let v = preprocess(&v, [8, 8, 8]).unwrap();
                extract_slices(&v, view, format!("p{i}")).unwrap()
            })
            .collect()
    }

    fn trainer(seed: u64) -> Trainer<f32> {
        let cfg = ModelConfig { depth: 2, base_channels: 4, groups: 2, ..ModelConfig::default() }.with_slice(8, 8);
        let model = SpikingUSegNet::build(cfg, 1).unwrap();
        let tc = TrainConfig { batch_size: 2, epochs: 2, ..TrainConfig::default() };
        Trainer::new(model, tc, View::Axial, seed).unwrap()
    }

    #[test]
    fn csv_is_reproducible_and_shaped() {
        let data = tiny(View::Axial, 3);
        let mut a = trainer(9);
        let mut b = trainer(9);
        for _ in 0..2 {
            a.run_epoch(&data, &data[..1]).unwrap();
            b.run_epoch(&data, &data[..1]).unwrap();
        }
        assert_eq!(a.csv(), b.csv());
        let lines: Vec<&str> = a.csv().lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        // 2 epochs x 2 batches x 8 slices
        assert_eq!(lines.len(), 1 + 2 * 2 * 8);
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
        assert_eq!(a.completed_epochs(), 2);
        assert!(a.best_score().is_some());
    }

    #[test]
    fn wrong_view_is_rejected() {
        let data = tiny(View::Coronal, 1);
        assert!(trainer(0).run_epoch(&data, &[]).is_err());
    }

    #[test]
    fn epoch_streams_differ() {
        use rand::RngCore;
        assert_ne!(epoch_rng(1, 1).next_u64(), epoch_rng(1, 2).next_u64());
        assert_eq!(epoch_rng(1, 3).next_u64(), epoch_rng(1, 3).next_u64());
    }
}
