//! Robot telemetry: base velocities plus per-joint position, velocity and effort for
//! both 7-DoF arms.

use std::path::Path;
use std::sync::LazyLock;

use crate::error::{Error, Result};

pub const ARMS: [&str; 2] = ["left", "right"];
pub const JOINTS: [&str; 7] = [
    "waist",
    "shoulder",
    "elbow",
    "forearm",
    "wrist_angle",
    "wrist_rotate",
    "gripper",
];
pub const QUANTITIES: [&str; 3] = ["position", "velocity", "effort"];

static CHANNELS: LazyLock<Vec<String>> = LazyLock::new(|| {
    let mut names = vec![
        "base_linear_velocity".to_string(),
        "base_angular_velocity".to_string(),
    ];
    for arm in ARMS {
        for joint in JOINTS {
            for q in QUANTITIES {
                names.push(format!("{arm}_{joint}_{q}"));
            }
        }
    }
    names
});

/// The 44 channel names in file order.
pub fn channel_names() -> &'static [String] {
    &CHANNELS
}

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNELS.iter().position(|c| c == name)
}

/// Equal-length series for every channel of the schema, sampled at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorTrace {
    sample_rate_hz: f64,
    columns: Vec<Vec<f64>>,
}

impl SensorTrace {
    /// `columns` must follow [`channel_names`] order.
    pub fn new(sample_rate_hz: f64, columns: Vec<Vec<f64>>) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if columns.len() != CHANNELS.len() {
            return Err(Error::Config(format!(
                "trace needs {} channels, got {}",
                CHANNELS.len(),
                columns.len()
            )));
        }
        let len = columns[0].len();
        if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(Error::Config(format!(
                "channel `{}` has {} samples, expected {len}",
                CHANNELS[i],
                c.len()
            )));
        }
        if len < 2 {
            return Err(Error::Config(format!(
                "trace needs at least 2 samples, got {len}"
            )));
        }
        Ok(SensorTrace {
            sample_rate_hz,
            columns,
        })
    }

    /// All channels zero for `len` samples.
    pub fn zeros(sample_rate_hz: f64, len: usize) -> Result<Self> {
        Self::new(sample_rate_hz, vec![vec![0.0; len]; CHANNELS.len()])
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Time of sample `i` in seconds.
    pub fn time_of(&self, i: usize) -> f64 {
        i as f64 / self.sample_rate_hz
    }

    /// Time of the last sample.
    pub fn duration(&self) -> f64 {
        self.time_of(self.len() - 1)
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        channel_index(name).map(|i| self.columns[i].as_slice())
    }

    pub fn channel_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        channel_index(name).map(|i| self.columns[i].as_mut_slice())
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Reads a CSV with one header row of channel names (any order) and one row per sample.
    pub fn read_csv(path: &Path, sample_rate_hz: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let mut slot_of_column = Vec::with_capacity(header.len());
        let mut seen = vec![false; CHANNELS.len()];
        for name in header.iter() {
            let idx = channel_index(name).ok_or_else(|| {
                Error::format(path, format!("unknown channel `{name}` in header"))
            })?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::format(
                    path,
                    format!("channel `{name}` appears twice in header"),
                ));
            }
            slot_of_column.push(idx);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::format(
                path,
                format!("missing channel `{}`", CHANNELS[missing]),
            ));
        }
        let mut columns = vec![Vec::new(); CHANNELS.len()];
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            for (field, &slot) in record.iter().zip(&slot_of_column) {
                let v: f64 = field.parse().map_err(|_| {
                    Error::format(
                        path,
                        format!(
                            "row {}: `{field}` in `{}` is not a number",
                            row + 2,
                            CHANNELS[slot]
                        ),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        path,
                        format!("row {}: non-finite value", row + 2),
                    ));
                }
                columns[slot].push(v);
            }
        }
        Self::new(sample_rate_hz, columns).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Writes schema-ordered CSV. Floats use the shortest representation that round-trips.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        writer
            .write_record(CHANNELS.iter())
            .map_err(|e| csv_error(path, e))?;
        let mut row = Vec::with_capacity(CHANNELS.len());
        for i in 0..self.len() {
            row.clear();
            row.extend(self.columns.iter().map(|c| format!("{:?}", c[i])));
            writer.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_has_44_channels() {
        let names = channel_names();
        assert_eq!(names.len(), 44);
        assert_eq!(names[0], "base_linear_velocity");
        assert_eq!(names[2], "left_waist_position");
        assert_eq!(names[43], "right_gripper_effort");
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let cols: Vec<Vec<f64>> = (0..44)
            .map(|c| {
                (0..7)
                    .map(|i| (c * 7 + i) as f64 * 0.1 - 3.3 + 1e-17 * i as f64)
                    .collect()
            })
            .collect();
        let trace = SensorTrace::new(20.0, cols).unwrap();
        trace.write_csv(&path).unwrap();
        assert_eq!(SensorTrace::read_csv(&path, 20.0).unwrap(), trace);
    }

    #[test]
    fn header_columns_may_be_reordered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let mut names: Vec<&str> = channel_names().iter().map(|s| s.as_str()).collect();
        names.reverse();
        let mut text = names.join(",") + "\n";
        for i in 0..2 {
            let row: Vec<String> = (0..44).map(|c| format!("{}", 43 - c + i)).collect();
            text += &(row.join(",") + "\n");
        }
        std::fs::write(&path, text).unwrap();
        let trace = SensorTrace::read_csv(&path, 10.0).unwrap();
        assert_eq!(trace.channel("base_linear_velocity").unwrap(), &[0.0, 1.0]);
        assert_eq!(
            trace.channel("right_gripper_effort").unwrap(),
            &[43.0, 44.0]
        );
    }

    #[test]
    fn bad_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        std::fs::write(&path, "base_linear_velocity,bogus\n1,2\n").unwrap();
        let err = SensorTrace::read_csv(&path, 10.0).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(SensorTrace::zeros(10.0, 1).is_err());
        assert!(SensorTrace::zeros(0.0, 5).is_err());
    }
}
