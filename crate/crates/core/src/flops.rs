//! Spike-aware FLOPs accounting for the convolution layers.
//!
//! A multiply-accumulate counts as two FLOPs. A layer fed by binary spikes
//! only performs work for active inputs, so its cost is the dense cost scaled
//! by the fraction of nonzero inputs. Layers fed by analog values are dense.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static geometry of one convolution layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerInfo {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Input is an analog signal rather than spikes.
    pub analog_input: bool,
}

impl ConvLayerInfo {
    /// `2 * k^2 * C_in * C_out * H * W` for one sample.
    pub fn dense_flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.kernel * self.kernel) as u64 * self.c_in as u64 * self.c_out as u64 * (h * w) as u64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCounters {
    pub dense_flops: u64,
    pub input_nonzero: u64,
    pub input_total: u64,
    pub steps: u64,
}

/// Per-layer counters filled in by instrumented forward passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsRecorder {
    pub layers: Vec<ConvLayerInfo>,
    pub counters: Vec<LayerCounters>,
}

impl FlopsRecorder {
    pub fn new(layers: Vec<ConvLayerInfo>) -> Self {
        let counters = vec![LayerCounters::default(); layers.len()];
        Self { layers, counters }
    }

    /// Record one conv invocation over `samples` images of `h x w`.
    pub fn record(&mut self, layer: usize, samples: usize, h: usize, w: usize, input_nonzero: usize, input_total: usize) {
        let dense = self.layers[layer].dense_flops(h, w) * samples as u64;
        let c = &mut self.counters[layer];
        c.dense_flops += dense;
        c.input_nonzero += input_nonzero as u64;
        c.input_total += input_total as u64;
        c.steps += 1;
    }

    pub fn total_steps(&self) -> u64 {
        self.counters.iter().map(|c| c.steps).max().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &FlopsRecorder) -> Result<()> {
        if self.layers != other.layers {
            return Err(Error::invalid("cannot merge FLOPs recorders of different models"));
        }
        for (a, b) in self.counters.iter_mut().zip(&other.counters) {
            a.dense_flops += b.dense_flops;
            a.input_nonzero += b.input_nonzero;
            a.input_total += b.input_total;
            a.steps += b.steps;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub dense: f64,
    pub spiking: f64,
    /// Fraction of nonzero inputs, forced to 1 for analog-input layers.
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub dense_total: f64,
    pub spiking_total: f64,
}

impl FlopsReport {
    pub fn reduction_pct(&self) -> f64 {
        if self.dense_total == 0.0 {
            0.0
        } else {
            100.0 * (1.0 - self.spiking_total / self.dense_total)
        }
    }

    /// Element-wise sum of reports, used for the ensemble column.
    pub fn combine(reports: &[FlopsReport]) -> FlopsReport {
        let layers = reports
            .iter()
            .flat_map(|r| r.layers.iter().cloned())
            .collect();
        FlopsReport {
            layers,
            dense_total: reports.iter().map(|r| r.dense_total).sum(),
            spiking_total: reports.iter().map(|r| r.spiking_total).sum(),
        }
    }
}

/// Turn recorded activity into dense and spike-driven FLOPs totals.
pub fn flops_count(recorder: &FlopsRecorder) -> Result<FlopsReport> {
    if recorder.layers.is_empty() || recorder.total_steps() == 0 {
        return Err(Error::MissingInstrumentation(
            "no instrumented forward pass was recorded".into(),
        ));
    }
    let mut layers = Vec::with_capacity(recorder.layers.len());
    for (info, c) in recorder.layers.iter().zip(&recorder.counters) {
        if c.steps == 0 {
            return Err(Error::MissingInstrumentation(format!("layer `{}` never ran", info.name)));
        }
        let rho = if info.analog_input || c.input_total == 0 {
            1.0
        } else {
            c.input_nonzero as f64 / c.input_total as f64
        };
        let dense = c.dense_flops as f64;
        layers.push(LayerFlops {
            name: info.name.clone(),
            dense,
            spiking: dense * rho,
            sparsity: rho,
        });
    }
    Ok(FlopsReport {
        dense_total: layers.iter().map(|l| l.dense).sum(),
        spiking_total: layers.iter().map(|l| l.spiking).sum(),
        layers,
    })
}
