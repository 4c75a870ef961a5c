//! Participant datasets: the GZFL container, the synthetic non-IID
//! generator, noise injection and distribution statistics.

mod gzfl;
mod stats;
mod synth;

pub use gzfl::{decode_participant, encode_participant, load_dir, load_participant, write_participant, GZFL_MAGIC, GZFL_VERSION};
pub use stats::{partition_stats, ParticipantStats, PartitionStats, HIST_BINS};
pub use synth::{
    centroid_decode, derive_seed, imbalance_counts, render_eye, synth_participant, GazeBox,
    SkewConfig, SynthPreset,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const EYE_WIDTH: usize = 60;
pub const EYE_HEIGHT: usize = 36;
pub const EYE_PIXELS: usize = EYE_WIDTH * EYE_HEIGHT;

pub type ParticipantId = u16;

/// Head rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadPose {
    pub pitch: f32,
    pub yaw: f32,
}

/// Gaze direction in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GazeAngles {
    pub yaw: f32,
    pub pitch: f32,
}

/// One normalized observation: a 60×36 grayscale eye image stored row-major
/// (36 rows of 60 pixels), the head pose and the gaze label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub eye: Vec<f32>,
    pub head: HeadPose,
    pub gaze: GazeAngles,
}

impl Sample {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.eye.len() != EYE_PIXELS {
            return Err(format!("eye has {} pixels, expected {EYE_PIXELS}", self.eye.len()));
        }
        if let Some(i) = self.eye.iter().position(|p| !p.is_finite()) {
            return Err(format!("pixel {i} is not finite"));
        }
        let angles = [self.head.pitch, self.head.yaw, self.gaze.yaw, self.gaze.pitch];
        if angles.iter().any(|a| !a.is_finite() || a.abs() >= std::f32::consts::PI) {
            return Err(format!("angles {angles:?} outside (-π, π)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Loaded,
    Synthetic,
    Noisy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantDataset {
    pub id: ParticipantId,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl ParticipantDataset {
    pub fn new(id: ParticipantId, samples: Vec<Sample>, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid(
                "participant dataset",
                format!("participant {id} has no samples"),
            ));
        }
        Ok(Self {
            id,
            samples,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seeded train/validation split. Both parts are sorted; validation gets
    /// `round(n·fraction)` samples, clamped so training keeps at least one.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        split_indices(self.len(), val_fraction, derive_seed(seed, 0x5917 ^ self.id as u64))
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(
            "split",
            format!("validation fraction {val_fraction} outside [0, 1)"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    Ok((idx, val))
}

/// Adds i.i.d. `N(0, σ²)` noise to every eye pixel. Labels and head pose are
/// untouched; `σ = 0` returns the input unchanged.
pub fn inject_noise(ds: &ParticipantDataset, sigma: f64, seed: u64) -> Result<ParticipantDataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("inject_noise", format!("sigma {sigma} must be ≥ 0")));
    }
    if sigma == 0.0 {
        return Ok(ds.clone());
    }
    let normal = Normal::new(0.0f64, sigma).expect("sigma validated above");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9015e ^ ds.id as u64));
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            eye: s
                .eye
                .iter()
                .map(|&p| (p as f64 + normal.sample(&mut rng)) as f32)
                .collect(),
            ..s.clone()
        })
        .collect();
    Ok(ParticipantDataset {
        id: ds.id,
        samples,
        provenance: Provenance::Noisy,
    })
}
