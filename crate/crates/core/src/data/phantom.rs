//! Seeded tumor phantoms.
//!
//! A smooth-noise "brain" ellipsoid carries one or more lesions made of three
//! concentric ellipsoids: whole tumor ⊃ tumor core ⊃ enhancing tumor. Each
//! region shifts the modalities the way the real contrasts behave: edema is
//! bright on T2 and FLAIR, the core is dark on T1 and enhancing tissue is
//! bright on T1-Gd. Labels are the exact ellipsoid memberships.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MultiModalVolume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub lesions: usize,
    /// Allowed whole-tumor voxel fraction.
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Lesion semi-axes as a fraction of the volume extent.
    pub radius_range: (f64, f64),
    pub core_scale: f64,
    pub enhancing_scale: f64,
    pub noise: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            lesions: 1,
            min_fraction: 0.01,
            max_fraction: 0.15,
            radius_range: (0.14, 0.22),
            core_scale: 0.75,
            enhancing_scale: 0.55,
            noise: 0.03,
        }
    }
}

// base tissue level and (edema, core, enhancing) offsets per modality
const BASE: [f32; 4] = [0.55, 0.45, 0.50, 0.40];
const EDEMA: [f32; 4] = [-0.10, 0.30, 0.00, 0.45];
const CORE: [f32; 4] = [-0.20, 0.10, 0.05, -0.10];
const ENHANCING: [f32; 4] = [0.05, 0.00, 0.50, 0.00];

struct Lesion {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Lesion {
    /// Normalized squared radius of a voxel.
    fn rho2(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a]) / self.radii[a];
                d * d
            })
            .sum()
    }
}

/// Trilinear value noise on a coarse lattice.
struct ValueNoise {
    grid: Vec<f32>,
    g: [usize; 3],
    cell: f64,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3], cell: f64) -> Self {
        let g = dims.map(|d| (d as f64 / cell).ceil() as usize + 2);
        let grid = (0..g[0] * g[1] * g[2]).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Self { grid, g, cell }
    }

    fn at(&self, p: [usize; 3]) -> f32 {
        let f = p.map(|v| v as f64 / self.cell);
        let i = f.map(|v| v.floor() as usize);
        let t = [0, 1, 2].map(|a| {
            let x = (f[a] - i[a] as f64) as f32;
            x * x * (3.0 - 2.0 * x)
        });
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if o[a] == 1 { t[a] } else { 1.0 - t[a] };
            }
            let idx = ((i[0] + o[0]) * self.g[1] + i[1] + o[1]) * self.g[2] + i[2] + o[2];
            acc += w * self.grid[idx];
        }
        acc
    }
}

/// Generate one phantom. Identical seeds give bit-identical volumes.
pub fn synth_phantom(seed: u64, dims: [usize; 3], cfg: &PhantomConfig) -> Result<MultiModalVolume> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::invalid(format!("phantom extent {dims:?} must be at least 8 per axis")));
    }
    if cfg.lesions == 0 {
        return Err(Error::invalid("phantom needs at least one lesion"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let total = n as f64;

    let member = {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::invalid("could not place lesions within the configured fraction"));
            }
            let lesions: Vec<Lesion> = (0..cfg.lesions).map(|_| place_lesion(&mut rng, dims, cfg)).collect();
            let member = memberships(&lesions, dims, cfg);
            let wt = member.iter().filter(|&&m| m >= 1).count() as f64 / total;
            if (cfg.min_fraction..=cfg.max_fraction).contains(&wt) {
                break member;
            }
        }
    };

    let brain_r = dims.map(|d| 0.46 * d as f64);
    let brain_c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let noises: Vec<ValueNoise> = (0..4).map(|_| ValueNoise::new(&mut rng, dims, 6.0)).collect();

    let mut intens = vec![0.0f32; 4 * n];
    let mut labels = vec![0.0f32; 3 * n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = (x * ny + y) * nz + z;
                let p = [x, y, z];
                let m = member[v];
                let inside_brain = (0..3)
                    .map(|a| ((p[a] as f64 - brain_c[a]) / brain_r[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0;
                for c in 0..4 {
                    let jitter = rng.gen_range(-1.0f32..1.0) * cfg.noise;
                    if !inside_brain && m == 0 {
                        intens[c * n + v] = jitter.abs() * 0.5;
                        continue;
                    }
                    let mut val = BASE[c] + 0.08 * noises[c].at(p) + jitter;
                    if m >= 1 {
                        val += EDEMA[c];
                    }
                    if m >= 2 {
                        val += CORE[c];
                    }
                    if m >= 3 {
                        val += ENHANCING[c];
                    }
                    intens[c * n + v] = val.max(0.0);
                }
                // channel order ET, TC, WT
                labels[v] = (m >= 3) as u8 as f32;
                labels[n + v] = (m >= 2) as u8 as f32;
                labels[2 * n + v] = (m >= 1) as u8 as f32;
            }
        }
    }
    MultiModalVolume::new(
        Tensor::new(vec![4, nx, ny, nz], intens)?,
        Tensor::new(vec![3, nx, ny, nz], labels)?,
        [1.0; 3],
    )
}

fn place_lesion(rng: &mut ChaCha8Rng, dims: [usize; 3], cfg: &PhantomConfig) -> Lesion {
    let (lo, hi) = cfg.radius_range;
    let radii = dims.map(|d| rng.gen_range(lo..=hi) * d as f64);
    let mut center = [0.0; 3];
    for a in 0..3 {
        let margin = radii[a] + 1.0;
        let (c0, c1) = (margin, dims[a] as f64 - 1.0 - margin);
        center[a] = if c1 > c0 { rng.gen_range(c0..c1) } else { (dims[a] as f64 - 1.0) / 2.0 };
    }
    Lesion { center, radii }
}

/// Deepest region index per voxel: 0 healthy, 1 WT, 2 TC, 3 ET.
fn memberships(lesions: &[Lesion], dims: [usize; 3], cfg: &PhantomConfig) -> Vec<u8> {
    let [nx, ny, nz] = dims;
    let core2 = cfg.core_scale * cfg.core_scale;
    let enh2 = cfg.enhancing_scale * cfg.enhancing_scale;
    let mut out = vec![0u8; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut m = 0u8;
                for l in lesions {
                    let r2 = l.rho2([x, y, z]);
                    let level = if r2 <= enh2 {
                        3
                    } else if r2 <= core2 {
                        2
                    } else if r2 <= 1.0 {
                        1
                    } else {
                        0
                    };
                    m = m.max(level);
                }
                out[(x * ny + y) * nz + z] = m;
            }
        }
    }
    out
}
