//! Episodes on disk: `manifest.json`, `trace.csv` and `frames/<view>/<index>.ppm`.

mod labels;
mod ppm;
mod rules;
mod trace;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use labels::{label_progress_span, map_trace_index_to_frame, ProgressLabels};
pub use ppm::{Image, PpmError};
pub use rules::{
    builtin_rules, detect_boundaries, detect_boundaries_or_last, BoundaryRule, Comparator,
    Condition, TraceBoundaries, DEFAULT_SUSTAIN,
};
pub use trace::{channel_index, channel_names, SensorTrace, ARMS, JOINTS, QUANTITIES};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::view::{View, ViewMask};

/// Width of zero-padded frame file names.
const FRAME_NAME_DIGITS: usize = 6;

/// Action span in frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameBoundaries {
    pub t_s_frame: usize,
    pub t_e_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub action: String,
    pub n_frames: usize,
    pub views: Vec<View>,
    pub frame_timestamps: Vec<f64>,
    pub trace_sample_rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<FrameBoundaries>,
}

/// Synchronized multi-view frames plus telemetry for one demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub action: String,
    pub views: BTreeMap<View, Vec<Image>>,
    pub trace: SensorTrace,
    pub timestamps: Vec<f64>,
    /// Explicit action span; takes precedence over rule-based detection.
    pub boundaries: Option<FrameBoundaries>,
}

impl Episode {
    pub fn n_frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn view_mask(&self) -> Result<ViewMask> {
        ViewMask::new(&self.views.keys().copied().collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_frames();
        if n == 0 {
            return Err(Error::Config(format!(
                "episode `{}` has no frames",
                self.id
            )));
        }
        if self.views.is_empty() {
            return Err(Error::Config(format!("episode `{}` has no views", self.id)));
        }
        let size = {
            let first = self.views.values().next().and_then(|f| f.first());
            first.map(|f| (f.width, f.height))
        };
        for (view, frames) in &self.views {
            if frames.len() != n {
                return Err(Error::Config(format!(
                    "view `{view}` has {} frames, expected {n}",
                    frames.len()
                )));
            }
            if frames.iter().any(|f| Some((f.width, f.height)) != size) {
                return Err(Error::Config(format!(
                    "view `{view}` has frames of differing size"
                )));
            }
        }
        if self.timestamps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Config(
                "frame timestamps must be finite and non-negative".into(),
            ));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "frame timestamps must be strictly increasing".into(),
            ));
        }
        let last = self.timestamps[n - 1];
        if self.trace.duration() + 1e-9 < last {
            return Err(Error::Config(format!(
                "trace ends at {:.6} s but frames run to {last:.6} s",
                self.trace.duration()
            )));
        }
        if let Some(b) = self.boundaries {
            label_progress_span(n, b.t_s_frame, b.t_e_frame)?;
        }
        Ok(())
    }

    /// Frames `range` of `view` as a `[T, 3, H, W]` tensor in `[0, 1]`.
    pub fn frames_tensor(&self, view: View, range: std::ops::Range<usize>) -> Result<Tensor> {
        let frames = self
            .views
            .get(&view)
            .ok_or_else(|| Error::Config(format!("episode `{}` has no `{view}` view", self.id)))?;
        self.indexed_tensor(view, range.map(|i| &frames[i]))
    }

    /// Frames at arbitrary `indices` (repeats allowed) of `view`.
    pub fn frames_at(&self, view: View, indices: &[usize]) -> Result<Tensor> {
        let frames = self
            .views
            .get(&view)
            .ok_or_else(|| Error::Config(format!("episode `{}` has no `{view}` view", self.id)))?;
        self.indexed_tensor(view, indices.iter().map(|&i| &frames[i]))
    }

    fn indexed_tensor<'a>(
        &self,
        view: View,
        frames: impl Iterator<Item = &'a Image>,
    ) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut count = 0;
        let (mut w, mut h) = (0, 0);
        for f in frames {
            (w, h) = (f.width, f.height);
            f.push_planar(&mut data);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Config(format!(
                "no `{view}` frames selected in `{}`",
                self.id
            )));
        }
        Tensor::new([count, 3, h, w], data)
    }

    /// Frames at `indices` for every view in `mask`, in canonical view order.
    pub fn view_frames(&self, mask: ViewMask, indices: &[usize]) -> Result<Vec<(View, Tensor)>> {
        mask.views()
            .into_iter()
            .map(|v| Ok((v, self.frames_at(v, indices)?)))
            .collect()
    }

    /// Linear labels over `[t_s, t_e]` frames.
    pub fn label_progress(&self, t_s: usize, t_e: usize) -> Result<ProgressLabels> {
        label_progress_span(self.n_frames(), t_s, t_e)
    }

    /// Maps a trace-domain span to frames.
    pub fn trace_to_frames(&self, b: TraceBoundaries) -> FrameBoundaries {
        FrameBoundaries {
            t_s_frame: map_trace_index_to_frame(b.t_s, &self.trace, &self.timestamps),
            t_e_frame: map_trace_index_to_frame(b.t_e, &self.trace, &self.timestamps),
        }
    }

    /// Action span: the explicit boundaries if present, otherwise detection with `rule`
    /// (or the built-in rule for this action) mapped to frames.
    pub fn resolve_boundaries(&self, rule: Option<&BoundaryRule>) -> Result<FrameBoundaries> {
        if let Some(b) = self.boundaries {
            return Ok(b);
        }
        let builtin;
        let rule = match rule {
            Some(r) => r,
            None => {
                builtin = builtin_rules().remove(&self.action).ok_or_else(|| {
                    Error::Config(format!("no boundary rule for action `{}`", self.action))
                })?;
                &builtin
            }
        };
        let detected = detect_boundaries(&self.trace, rule)?;
        Ok(self.trace_to_frames(detected))
    }

    /// Labels over the resolved action span.
    pub fn labels(&self, rule: Option<&BoundaryRule>) -> Result<ProgressLabels> {
        let b = self.resolve_boundaries(rule)?;
        self.label_progress(b.t_s_frame, b.t_e_frame)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            id: self.id.clone(),
            action: self.action.clone(),
            n_frames: self.n_frames(),
            views: self.views.keys().copied().collect(),
            frame_timestamps: self.timestamps.clone(),
            trace_sample_rate_hz: self.trace.sample_rate_hz(),
            boundaries: self.boundaries,
        }
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:0width$}.ppm", width = FRAME_NAME_DIGITS)
}

/// Writes `episode` under `dir`, creating it if needed.
pub fn write_episode(episode: &Episode, dir: &Path) -> Result<()> {
    episode.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(&episode.manifest(), dir)?;
    episode.trace.write_csv(&dir.join("trace.csv"))?;
    for (view, frames) in &episode.views {
        let vdir = dir.join("frames").join(view.name());
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (i, f) in frames.iter().enumerate() {
            let p = vdir.join(frame_file_name(i));
            fs::write(&p, f.encode_ppm()).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(())
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn frame_index(path: &Path) -> Option<usize> {
    if path.extension()? != "ppm" {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

fn load_view(dir: &Path, view: View, n_frames: usize) -> Result<Vec<Image>> {
    let vdir = dir.join("frames").join(view.name());
    if !vdir.is_dir() {
        return Err(Error::format(&vdir, format!("view `{view}` is missing")));
    }
    let mut indexed = Vec::new();
    for entry in fs::read_dir(&vdir).map_err(|e| Error::io(&vdir, e))? {
        let path = entry.map_err(|e| Error::io(&vdir, e))?.path();
        if let Some(i) = frame_index(&path) {
            indexed.push((i, path));
        }
    }
    indexed.sort();
    if indexed.len() != n_frames {
        return Err(Error::format(
            &vdir,
            format!(
                "view `{view}` has {} frames on disk, manifest declares {n_frames}",
                indexed.len()
            ),
        ));
    }
    if let Some((expect, (got, _))) = indexed.iter().enumerate().find(|(k, (i, _))| k != i) {
        return Err(Error::format(
            &vdir,
            format!("view `{view}` frame {expect} missing (found {got})"),
        ));
    }
    indexed
        .into_iter()
        .map(|(_, path)| {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Image::decode_ppm(&bytes).map_err(|e| Error::format(&path, e.to_string()))
        })
        .collect()
}

/// Loads and validates the episode stored in `dir`.
pub fn load_episode(dir: &Path) -> Result<Episode> {
    let manifest = read_manifest(dir)?;
    if manifest.frame_timestamps.len() != manifest.n_frames {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!(
                "frame_timestamps has {} entries, n_frames is {}",
                manifest.frame_timestamps.len(),
                manifest.n_frames
            ),
        ));
    }
    if manifest.views.is_empty() {
        return Err(Error::format(
            dir.join("manifest.json"),
            "views list is empty",
        ));
    }
    ViewMask::new(&manifest.views)
        .map_err(|e| Error::format(dir.join("manifest.json"), e.to_string()))?;
    let trace = SensorTrace::read_csv(&dir.join("trace.csv"), manifest.trace_sample_rate_hz)?;
    let mut views = BTreeMap::new();
    for &view in &manifest.views {
        views.insert(view, load_view(dir, view, manifest.n_frames)?);
    }
    let episode = Episode {
        id: manifest.id,
        action: manifest.action,
        views,
        trace,
        timestamps: manifest.frame_timestamps,
        boundaries: manifest.boundaries,
    };
    episode.validate().map_err(|e| match e {
        Error::Config(detail) => Error::format(dir, detail),
        other => other,
    })?;
    Ok(episode)
}
