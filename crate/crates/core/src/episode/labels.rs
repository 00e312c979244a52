//! Linear progress labels and trace-to-frame time alignment.

use serde::{Deserialize, Serialize};

use super::trace::SensorTrace;
use crate::error::{Error, Result};

/// Ground-truth progress for frames `t_s..=t_e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressLabels {
    pub t_s: usize,
    pub t_e: usize,
    pub labels: Vec<f64>,
}

impl ProgressLabels {
    /// `labels[i - t_s] = (i - t_s) / (t_e - t_s)` for `i` in `t_s..=t_e`.
    pub fn linear(t_s: usize, t_e: usize) -> Result<Self> {
        if t_s >= t_e {
            return Err(Error::Config(format!(
                "start frame {t_s} must precede end frame {t_e}"
            )));
        }
        let span = (t_e - t_s) as f64;
        let labels = (0..=t_e - t_s).map(|k| k as f64 / span).collect();
        Ok(ProgressLabels { t_s, t_e, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Frame indices covered by the labels.
    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.t_s..=self.t_e
    }
}

/// Labels for an episode with `n_frames` frames, checking `t_e <= n_frames - 1`.
pub fn label_progress_span(n_frames: usize, t_s: usize, t_e: usize) -> Result<ProgressLabels> {
    if t_e >= n_frames {
        return Err(Error::Config(format!(
            "end frame {t_e} is outside an episode of {n_frames} frames"
        )));
    }
    ProgressLabels::linear(t_s, t_e)
}

/// Frame whose timestamp is nearest to the time of trace sample `trace_idx`; ties go to
/// the earlier frame. `timestamps` must be sorted ascending.
pub fn map_trace_index_to_frame(
    trace_idx: usize,
    trace: &SensorTrace,
    timestamps: &[f64],
) -> usize {
    nearest_frame(trace.time_of(trace_idx), timestamps)
}

pub(crate) fn nearest_frame(t: f64, timestamps: &[f64]) -> usize {
    assert!(!timestamps.is_empty(), "no frame timestamps");
    let after = timestamps.partition_point(|&ts| ts < t);
    if after == 0 {
        return 0;
    }
    if after == timestamps.len() {
        return timestamps.len() - 1;
    }
    let before = after - 1;
    if t - timestamps[before] <= timestamps[after] - t {
        before
    } else {
        after
    }
}
