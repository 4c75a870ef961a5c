use std::io::Write;

use super::{ParticipantDataset, ParticipantId};
use crate::error::Result;

/// Bins per axis of the yaw-pitch label histogram.
pub const HIST_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantStats {
    pub id: ParticipantId,
    pub count: usize,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub yaw_mean: f64,
    pub yaw_std: f64,
    pub pitch_mean: f64,
    pub pitch_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub participants: Vec<ParticipantStats>,
    /// Pairwise L1 distance between normalized label histograms, in `[0, 2]`.
    pub label_distance: Vec<Vec<f64>>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn partition_stats(federation: &[ParticipantDataset]) -> PartitionStats {
    let participants = federation
        .iter()
        .map(|ds| {
            let (pixel_mean, pixel_std) =
                mean_std(ds.samples.iter().flat_map(|s| s.eye.iter().map(|&p| p as f64)));
            let (yaw_mean, yaw_std) = mean_std(ds.samples.iter().map(|s| s.gaze.yaw as f64));
            let (pitch_mean, pitch_std) = mean_std(ds.samples.iter().map(|s| s.gaze.pitch as f64));
            ParticipantStats {
                id: ds.id,
                count: ds.len(),
                pixel_mean,
                pixel_std,
                yaw_mean,
                yaw_std,
                pitch_mean,
                pitch_std,
            }
        })
        .collect();

    let range = |f: &dyn Fn(&super::Sample) -> f32| {
        let (lo, hi) = federation
            .iter()
            .flat_map(|d| d.samples.iter().map(f))
            .fold((f32::MAX, f32::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi > lo {
            (lo as f64, hi as f64)
        } else {
            (lo as f64 - 0.5, lo as f64 + 0.5)
        }
    };
    let yaw_range = range(&|s| s.gaze.yaw);
    let pitch_range = range(&|s| s.gaze.pitch);
    let bin = |v: f32, (lo, hi): (f64, f64)| {
        (((v as f64 - lo) / (hi - lo) * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
    };
    let hists: Vec<Vec<f64>> = federation
        .iter()
        .map(|ds| {
            let mut h = vec![0.0; HIST_BINS * HIST_BINS];
            for s in &ds.samples {
                h[bin(s.gaze.yaw, yaw_range) * HIST_BINS + bin(s.gaze.pitch, pitch_range)] += 1.0;
            }
            let n = ds.len().max(1) as f64;
            h.iter_mut().for_each(|v| *v /= n);
            h
        })
        .collect();
    let label_distance = hists
        .iter()
        .map(|a| {
            hists
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
                .collect()
        })
        .collect();
    PartitionStats {
        participants,
        label_distance,
    }
}

impl PartitionStats {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "participant",
            "count",
            "pixel_mean",
            "pixel_std",
            "yaw_mean",
            "yaw_std",
            "pitch_mean",
            "pitch_std",
        ])?;
        for p in &self.participants {
            out.write_record(&[
                p.id.to_string(),
                p.count.to_string(),
                p.pixel_mean.to_string(),
                p.pixel_std.to_string(),
                p.yaw_mean.to_string(),
                p.yaw_std.to_string(),
                p.pitch_mean.to_string(),
                p.pitch_std.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_distance_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["participant".to_string()];
        header.extend(self.participants.iter().map(|p| p.id.to_string()));
        out.write_record(&header)?;
        for (p, row) in self.participants.iter().zip(&self.label_distance) {
            let mut rec = vec![p.id.to_string()];
            rec.extend(row.iter().map(|d| d.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_participant, GazeBox, SkewConfig};

    fn ds(id: ParticipantId, gaze_box: GazeBox, samples: usize) -> ParticipantDataset {
        synth_participant(
            &SkewConfig {
                gaze_box,
                samples,
                ..SkewConfig::default()
            },
            id,
        )
    }

    #[test]
    fn identical_datasets_have_zero_distance() {
        let a = ds(0, GazeBox::square(0.3), 40);
        let mut b = a.clone();
        b.id = 1;
        let stats = partition_stats(&[a, b]);
        assert_eq!(stats.label_distance[0][1], 0.0);
        assert_eq!(stats.label_distance[1][0], 0.0);
    }

    #[test]
    fn counts_echo_sizes() {
        let stats = partition_stats(&[ds(0, GazeBox::square(0.3), 12), ds(1, GazeBox::square(0.3), 30)]);
        let counts: Vec<usize> = stats.participants.iter().map(|p| p.count).collect();
        assert_eq!(counts, vec![12, 30]);
    }

    #[test]
    fn disjoint_boxes_are_maximally_distant() {
        let left = GazeBox {
            yaw: (-0.5, -0.1),
            pitch: (-0.2, 0.2),
        };
        let right = GazeBox {
            yaw: (0.1, 0.5),
            pitch: (-0.2, 0.2),
        };
        let stats = partition_stats(&[ds(0, left, 200), ds(1, right, 200)]);
        assert!((stats.label_distance[0][1] - 2.0).abs() < 1e-12);
        assert_eq!(stats.label_distance[0][0], 0.0);
    }

    #[test]
    fn csv_has_one_row_per_participant() {
        let stats = partition_stats(&[ds(0, GazeBox::square(0.3), 5), ds(1, GazeBox::square(0.2), 5)]);
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
        let mut buf = Vec::new();
        stats.write_distance_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("participant,0,1\n"));
    }
}
