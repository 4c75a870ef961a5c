//! Synthetic non-IID participants.
//!
//! Each participant's eye images show a dark Gaussian iris blob on a flat
//! background. The blob centre encodes the true gaze; its width and the
//! background level encode an appearance style. Per-participant knobs cover
//! feature skew (brightness/contrast), label skew (gaze box), both concept
//! shifts (style, label offset), availability and quantity imbalance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    GazeAngles, HeadPose, ParticipantDataset, ParticipantId, Provenance, Sample, EYE_HEIGHT,
    EYE_PIXELS, EYE_WIDTH,
};

/// Horizontal pixels per radian of yaw.
const PX_PER_RAD_YAW: f64 = 36.0;
/// Vertical pixels per radian of pitch.
const PX_PER_RAD_PITCH: f64 = 20.0;
const IRIS_SIGMA: f64 = 3.0;
const IRIS_DEPTH: f64 = 0.55;
const BACKGROUND: f64 = 0.75;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for an independent random stream.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(master ^ mix(stream))
}

/// Axis-aligned box of gaze angles (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeBox {
    pub yaw: (f32, f32),
    pub pitch: (f32, f32),
}

impl GazeBox {
    pub fn square(half: f32) -> Self {
        Self {
            yaw: (-half, half),
            pitch: (-half, half),
        }
    }

    pub fn contains(&self, g: GazeAngles) -> bool {
        (self.yaw.0..=self.yaw.1).contains(&g.yaw) && (self.pitch.0..=self.pitch.1).contains(&g.pitch)
    }

    fn is_valid(&self) -> bool {
        self.yaw.0 < self.yaw.1 && self.pitch.0 < self.pitch.1
    }
}

/// Generator knobs for one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewConfig {
    /// Added to every pixel after rendering (feature skew).
    pub brightness: f32,
    /// Scales pixel deviation from 0.5 (feature skew).
    pub contrast: f32,
    /// Support of the gaze labels (label skew).
    pub gaze_box: GazeBox,
    /// Appearance style in [-1, 1]: iris width and background level
    /// (same label, different features).
    pub style: f32,
    /// Added to stored labels only (same features, different label).
    pub label_bias: GazeAngles,
    pub head_mean: HeadPose,
    pub head_std: f32,
    /// Relative cohort-sampling weight (violation of independence).
    pub availability: f64,
    /// Number of samples (quantity imbalance).
    pub samples: usize,
    pub seed: u64,
}

impl Default for SkewConfig {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            gaze_box: GazeBox::square(0.4),
            style: 0.0,
            label_bias: GazeAngles::default(),
            head_mean: HeadPose::default(),
            head_std: 0.05,
            availability: 1.0,
            samples: 100,
            seed: 0,
        }
    }
}

impl SkewConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.samples == 0 {
            return Err("sample count must be ≥ 1".into());
        }
        if !self.gaze_box.is_valid() {
            return Err(format!("empty gaze box {:?}", self.gaze_box));
        }
        if !(self.availability >= 0.0) {
            return Err(format!("availability {} must be ≥ 0", self.availability));
        }
        if !(self.head_std >= 0.0) || !(self.contrast > 0.0) {
            return Err("head_std must be ≥ 0 and contrast > 0".into());
        }
        Ok(())
    }
}

fn iris_centre(yaw: f64, pitch: f64) -> (f64, f64) {
    let cx = (EYE_WIDTH as f64 - 1.0) / 2.0 + yaw * PX_PER_RAD_YAW;
    let cy = (EYE_HEIGHT as f64 - 1.0) / 2.0 - pitch * PX_PER_RAD_PITCH;
    (cx, cy)
}

/// Renders a clean eye image for the given true gaze and style, before any
/// brightness/contrast transform. Values lie in `[0.1, 0.85]`.
pub fn render_eye(gaze: GazeAngles, style: f32) -> Vec<f32> {
    let (cx, cy) = iris_centre(gaze.yaw as f64, gaze.pitch as f64);
    let sigma = IRIS_SIGMA * (1.0 + 0.2 * style as f64);
    let bg = BACKGROUND + 0.1 * style as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut eye = Vec::with_capacity(EYE_PIXELS);
    for y in 0..EYE_HEIGHT {
        let dy = y as f64 - cy;
        for x in 0..EYE_WIDTH {
            let dx = x as f64 - cx;
            eye.push((bg - IRIS_DEPTH * (-(dx * dx + dy * dy) * inv).exp()) as f32);
        }
    }
    eye
}

/// Recovers gaze from an eye image via the darkness-weighted centroid of
/// the iris blob. Invariant to brightness offset and contrast scaling.
pub fn centroid_decode(eye: &[f32]) -> GazeAngles {
    let bg = eye.iter().copied().fold(f32::MIN, f32::max) as f64;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &p) in eye.iter().enumerate() {
        let w = (bg - p as f64).max(0.0);
        sw += w;
        sx += w * (i % EYE_WIDTH) as f64;
        sy += w * (i / EYE_WIDTH) as f64;
    }
    if sw == 0.0 {
        return GazeAngles::default();
    }
    let (cx0, cy0) = iris_centre(0.0, 0.0);
    GazeAngles {
        yaw: ((sx / sw - cx0) / PX_PER_RAD_YAW) as f32,
        pitch: ((cy0 - sy / sw) / PX_PER_RAD_PITCH) as f32,
    }
}

/// Generates participant `id`. A pure function of `(cfg, id)`.
///
/// Panics if `cfg` fails [`SkewConfig::validate`].
pub fn synth_participant(cfg: &SkewConfig, id: ParticipantId) -> ParticipantDataset {
    if let Err(e) = cfg.validate() {
        panic!("invalid skew config for participant {id}: {e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, id as u64));
    let head = Normal::new(0.0f64, cfg.head_std as f64).expect("validated head_std");
    let (c, b) = (cfg.contrast as f64, cfg.brightness as f64);
    let samples = (0..cfg.samples)
        .map(|_| {
            let gaze = GazeAngles {
                yaw: rng.random_range(cfg.gaze_box.yaw.0..=cfg.gaze_box.yaw.1),
                pitch: rng.random_range(cfg.gaze_box.pitch.0..=cfg.gaze_box.pitch.1),
            };
            let head = HeadPose {
                pitch: cfg.head_mean.pitch + head.sample(&mut rng) as f32,
                yaw: cfg.head_mean.yaw + head.sample(&mut rng) as f32,
            };
            let eye = render_eye(gaze, cfg.style)
                .into_iter()
                .map(|p| (((p as f64 - 0.5) * c + 0.5 + b).clamp(0.0, 1.0)) as f32)
                .collect();
            Sample {
                eye,
                head,
                gaze: GazeAngles {
                    yaw: gaze.yaw + cfg.label_bias.yaw,
                    pitch: gaze.pitch + cfg.label_bias.pitch,
                },
            }
        })
        .collect();
    ParticipantDataset {
        id,
        samples,
        provenance: Provenance::Synthetic,
    }
}

/// Log-uniform sample counts in `[min, max]`.
pub fn imbalance_counts(n: usize, min: usize, max: usize, seed: u64) -> Vec<usize> {
    assert!(1 <= min && min <= max, "need 1 ≤ min ≤ max, got {min}..{max}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC0_0A75));
    let (lo, hi) = ((min as f64).ln(), (max as f64).ln());
    (0..n)
        .map(|_| {
            if min == max {
                return min;
            }
            let v: f64 = rng.random_range(lo..=hi);
            (v.exp().round() as usize).clamp(min, max)
        })
        .collect()
}

/// Recipe for a whole synthetic federation.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPreset {
    pub participants: usize,
    pub seed: u64,
    pub min_count: usize,
    pub max_count: usize,
    pub label_skew: bool,
    pub feature_skew: bool,
    pub style_skew: bool,
    /// Maximum per-axis label offset; 0 disables label concept shift.
    pub label_bias: f32,
    pub availability_skew: bool,
}

impl SynthPreset {
    /// 15 participants with sample counts a tenth of MPIIGaze's
    /// (1,498–34,745), label and feature skew enabled.
    pub fn desk() -> Self {
        Self {
            participants: 15,
            seed: 1,
            min_count: 150,
            max_count: 3475,
            label_skew: true,
            feature_skew: true,
            style_skew: false,
            label_bias: 0.0,
            availability_skew: false,
        }
    }

    /// Full MPIIGaze-sized counts.
    pub fn full() -> Self {
        Self {
            min_count: 1498,
            max_count: 34745,
            ..Self::desk()
        }
    }

    pub fn skew_configs(&self) -> Vec<SkewConfig> {
        let counts = imbalance_counts(self.participants, self.min_count, self.max_count, self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x5E7));
        counts
            .into_iter()
            .map(|samples| {
                // fixed draw order keeps configs stable when knobs are toggled
                let centre = (rng.random_range(-0.25f32..0.25), rng.random_range(-0.25f32..0.25));
                let half = (rng.random_range(0.12f32..0.25), rng.random_range(0.12f32..0.25));
                let brightness = rng.random_range(-0.1f32..0.1);
                let contrast = rng.random_range(0.8f32..1.2);
                let style = rng.random_range(-1.0f32..1.0);
                let bias = (rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0));
                let availability = rng.random_range(0.2f64..1.0);
                let head_mean = HeadPose {
                    pitch: rng.random_range(-0.2..0.2),
                    yaw: rng.random_range(-0.2..0.2),
                };
                let gaze_box = if self.label_skew {
                    GazeBox {
                        yaw: ((centre.0 - half.0).max(-0.5), (centre.0 + half.0).min(0.5)),
                        pitch: ((centre.1 - half.1).max(-0.5), (centre.1 + half.1).min(0.5)),
                    }
                } else {
                    GazeBox::square(0.4)
                };
                SkewConfig {
                    brightness: if self.feature_skew { brightness } else { 0.0 },
                    contrast: if self.feature_skew { contrast } else { 1.0 },
                    gaze_box,
                    style: if self.style_skew { style } else { 0.0 },
                    label_bias: GazeAngles {
                        yaw: bias.0 * self.label_bias,
                        pitch: bias.1 * self.label_bias,
                    },
                    head_mean,
                    head_std: 0.05,
                    availability: if self.availability_skew { availability } else { 1.0 },
                    samples,
                    seed: self.seed,
                }
            })
            .collect()
    }

    /// Generates every participant, ids `0..participants`.
    pub fn generate(&self) -> Vec<ParticipantDataset> {
        self.skew_configs()
            .iter()
            .enumerate()
            .map(|(id, cfg)| synth_participant(cfg, id as ParticipantId))
            .collect()
    }
}
