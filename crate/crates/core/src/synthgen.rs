//! Synthetic multi-view episodes with known ground truth.
//!
//! Each view draws a progress cue (a filling bar, a moving disc or a rotating dial) at
//! the frame's true progress, seen from a different layout per camera. Idle frames
//! before and after the action show the cue at 0 and 1. Views can be occluded per frame
//! and pixel noise added. The sensor trace is built phase by phase so that the boundary
//! rule fires exactly at the true start and end.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{episode_dir, DatasetManifest, Splits};
use crate::episode::{
    builtin_rules, channel_names, write_episode, BoundaryRule, Comparator, Condition, Episode,
    FrameBoundaries, Image, SensorTrace,
};
use crate::error::{Error, Result};
use crate::fusion::mix;
use crate::view::View;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CueStyle {
    #[default]
    FillingBar,
    MovingDisc,
    RotatingDial,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionMode {
    /// Independent coin flip per frame.
    #[default]
    Bernoulli,
    /// Runs of occluded frames with mean length `occlusion_block_len`.
    Block,
}

/// One action name for every episode, or a list cycled by episode index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionSpec {
    One(String),
    Many(Vec<String>),
}

impl ActionSpec {
    pub fn names(&self) -> Vec<String> {
        match self {
            ActionSpec::One(a) => vec![a.clone()],
            ActionSpec::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_episodes: usize,
    pub action: ActionSpec,
    pub image_size: usize,
    /// Frames in the action span `[t_S, t_E]`, inclusive.
    pub duration_range: [usize; 2],
    pub idle_prefix_range: [usize; 2],
    pub idle_suffix_range: [usize; 2],
    /// Per-view probability that a frame's cue is covered.
    pub occlusion: BTreeMap<View, f64>,
    pub occlusion_mode: OcclusionMode,
    pub occlusion_block_len: f64,
    pub cue_style: CueStyle,
    /// Standard deviation of additive pixel noise, as a fraction of full scale.
    pub noise_level: f64,
    /// Rule the trace must satisfy; defaults to the built-in rule of each action.
    pub trace_rule: Option<BoundaryRule>,
    pub frame_rate_hz: f64,
    /// Trace samples per frame interval.
    pub trace_oversample: usize,
    /// Train/val/test fractions, assigned by episode index.
    pub split: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_episodes: 20,
            action: ActionSpec::One("use_cabinet".into()),
            image_size: 32,
            duration_range: [40, 120],
            idle_prefix_range: [4, 12],
            idle_suffix_range: [4, 12],
            occlusion: BTreeMap::new(),
            occlusion_mode: OcclusionMode::Bernoulli,
            occlusion_block_len: 8.0,
            cue_style: CueStyle::FillingBar,
            noise_level: 0.0,
            trace_rule: None,
            frame_rate_hz: 10.0,
            trace_oversample: 2,
            split: [0.8, 0.1, 0.1],
        }
    }
}

fn check_range(name: &str, r: [usize; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Config(format!(
            "{name} [{}, {}] is not ordered",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_range("duration_range", self.duration_range)?;
        check_range("idle_prefix_range", self.idle_prefix_range)?;
        check_range("idle_suffix_range", self.idle_suffix_range)?;
        if self.duration_range[0] < 2 {
            return Err(Error::Config(
                "duration_range must start at 2 frames or more".into(),
            ));
        }
        for (v, p) in &self.occlusion {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!(
                    "occlusion probability for `{v}` must lie in [0, 1], got {p}"
                )));
            }
        }
        if self.occlusion_block_len.is_nan() || self.occlusion_block_len < 1.0 {
            return Err(Error::Config(
                "occlusion_block_len must be at least 1".into(),
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(format!(
                "noise_level must be non-negative, got {}",
                self.noise_level
            )));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(Error::Config("frame_rate_hz must be positive".into()));
        }
        if self.trace_oversample == 0 {
            return Err(Error::Config("trace_oversample must be at least 1".into()));
        }
        Layout::new(self.image_size, self.cue_style)?;
        let actions = self.action.names();
        if actions.is_empty() {
            return Err(Error::Config("action list is empty".into()));
        }
        for a in &actions {
            let rule = self.rule_for(a)?;
            TracePlan::new(&rule)?;
            let m = self.trace_oversample;
            let w_start = rule.start[0].sustain;
            let w_end = rule.end[0].sustain;
            if m * (self.duration_range[0] - 1) < w_start {
                return Err(Error::Config(format!(
                    "shortest action span ({} frames) is too short for a start window of {w_start} samples",
                    self.duration_range[0]
                )));
            }
            if m * self.idle_suffix_range[0] + 1 < w_end {
                return Err(Error::Config(format!(
                    "shortest idle suffix ({} frames) is too short for an end window of {w_end} samples",
                    self.idle_suffix_range[0]
                )));
            }
        }
        Splits::by_index(&[], self.split)?;
        Ok(())
    }

    pub fn rule_for(&self, action: &str) -> Result<BoundaryRule> {
        if let Some(r) = &self.trace_rule {
            r.validate()?;
            return Ok(r.clone());
        }
        builtin_rules().remove(action).ok_or_else(|| {
            Error::Config(format!(
                "no built-in rule for action `{action}`; set trace_rule"
            ))
        })
    }

    pub fn occlusion_prob(&self, view: View) -> f64 {
        self.occlusion.get(&view).copied().unwrap_or(0.0)
    }
}

/// Cue placement shared by every frame of an image size.
#[derive(Clone, Copy, Debug)]
struct Layout {
    size: usize,
    margin: usize,
    style: CueStyle,
}

impl Layout {
    fn new(size: usize, style: CueStyle) -> Result<Self> {
        let margin = size / 8;
        if margin == 0 || size > 1024 {
            return Err(Error::Config(format!(
                "image_size {size} cannot hold the cue (needs 8 to 1024 pixels)"
            )));
        }
        Ok(Layout {
            size,
            margin,
            style,
        })
    }

    /// Length and thickness of the central filling bar, in pixels.
    fn bar(&self) -> (usize, usize) {
        (self.size - 2 * self.margin, self.margin)
    }
}

/// Length and thickness of the central-view filling bar for `image_size`.
pub fn central_bar_geometry(image_size: usize) -> Result<(usize, usize)> {
    Ok(Layout::new(image_size, CueStyle::FillingBar)?.bar())
}

#[derive(Clone, Copy, Debug)]
struct Palette {
    background: [u8; 3],
    track: [u8; 3],
    lit: [u8; 3],
    dx: i64,
    dy: i64,
}

impl Palette {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let mut pick = |lo: u8, hi: u8| {
            [
                rng.random_range(lo..=hi),
                rng.random_range(lo..=hi),
                rng.random_range(lo..=hi),
            ]
        };
        let background = pick(10, 45);
        let track = pick(70, 100);
        let lit = pick(180, 255);
        let j = (size / 16) as i64;
        Palette {
            background,
            track,
            lit,
            dx: rng.random_range(-j..=j),
            dy: rng.random_range(-j..=j),
        }
    }
}

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new(size: usize, bg: [u8; 3]) -> Self {
        Canvas {
            img: Image::filled(size, size, bg),
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        let s = self.img.width as i64;
        if (0..s).contains(&x) && (0..s).contains(&y) {
            self.img.set(x as usize, y as usize, rgb);
        }
    }

    fn rect(&mut self, r: Rect, rgb: [u8; 3]) {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                self.put(x, y, rgb);
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, radius: f64, rgb: [u8; 3]) {
        let (x0, x1) = ((cx - radius).floor() as i64, (cx + radius).ceil() as i64);
        let (y0, y1) = ((cy - radius).floor() as i64, (cy + radius).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if px * px + py * py <= radius * radius {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    fn line(&mut self, from: (f64, f64), to: (f64, f64), rgb: [u8; 3]) {
        let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()) * 4.0)
            .ceil()
            .max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let x = from.0 + t * (to.0 - from.0);
            let y = from.1 + t * (to.1 - from.1);
            self.put(x.floor() as i64, y.floor() as i64, rgb);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl Rect {
    fn grow(self, by: i64) -> Rect {
        Rect {
            x: self.x - by,
            y: self.y - by,
            w: self.w + 2 * by,
            h: self.h + 2 * by,
        }
    }
}

/// Stretch of the action each side camera sees; the central camera sees all of it.
pub const SIDE_WINDOWS: [(View, f64, f64); 2] = [(View::Left, 0.0, 0.5), (View::Right, 0.5, 1.0)];

/// Cue level shown by `view` at progress `p`. Side views saturate outside their window, so
/// neither alone tracks the whole action but together they do.
pub fn view_progress(view: View, p: f64) -> f64 {
    match SIDE_WINDOWS.iter().find(|w| w.0 == view) {
        Some(&(_, lo, hi)) => ((p - lo) / (hi - lo)).clamp(0.0, 1.0),
        None => p,
    }
}

/// Draws the cue for `view` at progress `p`; returns the image and the cue's bounding box.
fn render(layout: &Layout, view: View, p: f64, pal: &Palette) -> (Canvas, Rect) {
    let p = view_progress(view, p);
    let s = layout.size as i64;
    let m = layout.margin as i64;
    let mut c = Canvas::new(layout.size, pal.background);
    let (dx, dy) = (pal.dx, pal.dy);
    match layout.style {
        CueStyle::FillingBar => {
            let (len, thick) = layout.bar();
            let (len, thick) = (len as i64, thick as i64);
            let lit = (p * len as f64).round() as i64;
            let bbox = match view {
                View::Central => {
                    let r = Rect {
                        x: m + dx,
                        y: s / 2 - thick / 2 + dy,
                        w: len,
                        h: thick,
                    };
                    c.rect(r, pal.track);
                    c.rect(Rect { w: lit, ..r }, pal.lit);
                    r
                }
                View::Left => {
                    // vertical, filling upward
                    let r = Rect {
                        x: m + dx,
                        y: m + dy,
                        w: thick,
                        h: len,
                    };
                    c.rect(r, pal.track);
                    c.rect(
                        Rect {
                            y: r.y + len - lit,
                            h: lit,
                            ..r
                        },
                        pal.lit,
                    );
                    r
                }
                View::Right => {
                    // thinner, low in the frame, filling right to left
                    let t = (thick / 2).max(1);
                    let r = Rect {
                        x: m + dx,
                        y: 3 * s / 4 + dy,
                        w: len,
                        h: t,
                    };
                    c.rect(r, pal.track);
                    c.rect(
                        Rect {
                            x: r.x + len - lit,
                            w: lit,
                            ..r
                        },
                        pal.lit,
                    );
                    r
                }
            };
            (c, bbox)
        }
        CueStyle::MovingDisc => {
            let r = (layout.size as f64 / 10.0).max(1.0);
            let lo = m as f64 + r;
            let hi = (s - m) as f64 - r;
            let (start, end) = match view {
                View::Central => ((lo, s as f64 / 2.0), (hi, s as f64 / 2.0)),
                View::Left => ((s as f64 / 3.0, hi), (s as f64 / 3.0, lo)),
                View::Right => ((lo, hi), (hi, lo)),
            };
            let shift = |(x, y): (f64, f64)| (x + dx as f64, y + dy as f64);
            let (start, end) = (shift(start), shift(end));
            c.line(start, end, pal.track);
            let pos = (
                start.0 + p * (end.0 - start.0),
                start.1 + p * (end.1 - start.1),
            );
            c.disc(pos.0, pos.1, r, pal.lit);
            let x0 = start.0.min(end.0) - r;
            let y0 = start.1.min(end.1) - r;
            let bbox = Rect {
                x: x0.floor() as i64,
                y: y0.floor() as i64,
                w: ((start.0 - end.0).abs() + 2.0 * r).ceil() as i64 + 1,
                h: ((start.1 - end.1).abs() + 2.0 * r).ceil() as i64 + 1,
            };
            (c, bbox)
        }
        CueStyle::RotatingDial => {
            let cx = s as f64 / 2.0 + dx as f64;
            let cy = s as f64 / 2.0 + dy as f64;
            let radius = (s / 2 - m - 1).max(1) as f64;
            let sweep = 1.8 * std::f64::consts::PI;
            let phi = match view {
                View::Central => p * sweep,
                View::Left => std::f64::consts::PI + p * sweep,
                View::Right => -p * sweep,
            };
            for k in 0..64 {
                let a = k as f64 / 64.0 * 2.0 * std::f64::consts::PI;
                c.put(
                    (cx + radius * a.sin()).floor() as i64,
                    (cy - radius * a.cos()).floor() as i64,
                    pal.track,
                );
            }
            let tip = (cx + radius * phi.sin(), cy - radius * phi.cos());
            c.line((cx, cy), tip, pal.lit);
            c.line((cx + 0.5, cy), (tip.0 + 0.5, tip.1), pal.lit);
            let r = radius.ceil() as i64;
            let bbox = Rect {
                x: cx.floor() as i64 - r,
                y: cy.floor() as i64 - r,
                w: 2 * r + 1,
                h: 2 * r + 1,
            };
            (c, bbox)
        }
    }
}

fn occlusion_schedule(
    n: usize,
    p: f64,
    mode: OcclusionMode,
    block: f64,
    rng: &mut impl Rng,
) -> Vec<bool> {
    if p <= 0.0 {
        return vec![false; n];
    }
    if p >= 1.0 {
        return vec![true; n];
    }
    match mode {
        OcclusionMode::Bernoulli => (0..n).map(|_| rng.random_bool(p)).collect(),
        OcclusionMode::Block => {
            // alternating runs with geometric lengths; long-run occluded fraction is p
            let visible_mean = block * (1.0 - p) / p;
            let mut occluded = rng.random_bool(p);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let mean = if occluded { block } else { visible_mean };
                let stop = (1.0 / mean).min(1.0);
                let mut len = 1;
                while !rng.random_bool(stop) {
                    len += 1;
                }
                out.extend(std::iter::repeat_n(occluded, len.min(n - out.len())));
                occluded = !occluded;
            }
            out
        }
    }
}

/// Allowed open interval for one channel during one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    const ANY: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    fn require(&mut self, c: &Condition, holds: bool) {
        match (c.op, holds) {
            (Comparator::Greater, true) | (Comparator::Less, false) => {
                self.lo = self.lo.max(c.threshold)
            }
            (Comparator::Less, true) | (Comparator::Greater, false) => {
                self.hi = self.hi.min(c.threshold)
            }
        }
    }

    fn is_free(&self) -> bool {
        *self == Interval::ANY
    }

    /// A value strictly inside the interval; `u` in `[0, 1]` picks the position.
    fn pick(&self, u: f64) -> f64 {
        let u = 0.15 + 0.7 * u.clamp(0.0, 1.0);
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, true) => self.lo + u * (self.hi - self.lo),
            (true, false) => self.lo + (self.lo.abs() * 0.5).max(0.2) * (0.2 + u),
            (false, true) => self.hi - (self.hi.abs() * 0.5).max(0.2) * (0.2 + u),
            (false, false) => u - 0.5,
        }
    }
}

/// Per-channel intervals for the idle prefix, the action and the idle suffix.
struct TracePlan {
    phases: [Vec<Interval>; 3],
}

impl TracePlan {
    fn new(rule: &BoundaryRule) -> Result<Self> {
        rule.validate()?;
        let n = channel_names().len();
        let mut phases = [
            vec![Interval::ANY; n],
            vec![Interval::ANY; n],
            vec![Interval::ANY; n],
        ];
        let idx =
            |c: &Condition| crate::episode::channel_index(&c.channel).expect("validated channel");
        for c in &rule.start {
            phases[0][idx(c)].require(c, false);
        }
        phases[1][idx(&rule.start[0])].require(&rule.start[0], true);
        for c in &rule.end {
            phases[1][idx(c)].require(c, false);
        }
        phases[2][idx(&rule.end[0])].require(&rule.end[0], true);
        for (p, name) in phases.iter().zip(["idle prefix", "action", "idle suffix"]) {
            if let Some(i) = p.iter().position(|iv| iv.lo >= iv.hi) {
                return Err(Error::Config(format!(
                    "rule is unsatisfiable on `{}` during the {name}",
                    channel_names()[i]
                )));
            }
        }
        Ok(TracePlan { phases })
    }

    /// Trace with `len` samples whose action phase covers samples `s_start..s_end`.
    fn build(
        &self,
        rate: f64,
        len: usize,
        s_start: usize,
        s_end: usize,
        rng: &mut impl Rng,
    ) -> Result<SensorTrace> {
        let n = channel_names().len();
        let jitter = Normal::new(0.0, 0.08).expect("valid normal");
        let mut columns = Vec::with_capacity(n);
        for ch in 0..n {
            let centers = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            let amp = rng.random_range(0.1..1.0);
            let freq = rng.random_range(0.02..0.2);
            let phase = rng.random_range(0.0..6.3);
            let col = (0..len)
                .map(|i| {
                    let ph = if i < s_start {
                        0
                    } else if i < s_end {
                        1
                    } else {
                        2
                    };
                    let iv = self.phases[ph][ch];
                    if iv.is_free() {
                        amp * (freq * i as f64 + phase).sin() + 0.05 * jitter.sample(rng)
                    } else {
                        iv.pick(centers[ph] + jitter.sample(rng))
                    }
                })
                .collect();
            columns.push(col);
        }
        SensorTrace::new(rate, columns)
    }
}

/// Ground-truth progress for every frame, including idle frames (0 before, 1 after).
pub fn frame_progress(n_frames: usize, t_s: usize, t_e: usize) -> Vec<f64> {
    (0..n_frames)
        .map(|i| {
            if i <= t_s {
                0.0
            } else if i >= t_e {
                1.0
            } else {
                (i - t_s) as f64 / (t_e - t_s) as f64
            }
        })
        .collect()
}

/// Generates one episode from its own seed.
pub fn generate_episode(cfg: &SynthConfig, id: &str, action: &str, seed: u64) -> Result<Episode> {
    let layout = Layout::new(cfg.image_size, cfg.cue_style)?;
    let rule = cfg.rule_for(action)?;
    let plan = TracePlan::new(&rule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(cfg.duration_range[0]..=cfg.duration_range[1]);
    let prefix = rng.random_range(cfg.idle_prefix_range[0]..=cfg.idle_prefix_range[1]);
    let suffix = rng.random_range(cfg.idle_suffix_range[0]..=cfg.idle_suffix_range[1]);
    let n = prefix + d + suffix;
    let (t_s, t_e) = (prefix, prefix + d - 1);
    let progress = frame_progress(n, t_s, t_e);
    let noise = (cfg.noise_level > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_level * 255.0).expect("valid std"));

    let mut views = BTreeMap::new();
    for view in View::ALL {
        let pal = Palette::random(cfg.image_size, &mut rng);
        let hidden = occlusion_schedule(
            n,
            cfg.occlusion_prob(view),
            cfg.occlusion_mode,
            cfg.occlusion_block_len,
            &mut rng,
        );
        let mut frames = Vec::with_capacity(n);
        for (&p, &occluded) in progress.iter().zip(&hidden) {
            let (mut canvas, bbox) = render(&layout, view, p, &pal);
            if occluded {
                let g = rng.random_range(60..=170u8);
                canvas.rect(bbox.grow(1), [g, g, g]);
            }
            let mut img = canvas.img;
            if let Some(noise) = &noise {
                for px in img.pixels.iter_mut() {
                    *px = (*px as f64 + noise.sample(&mut rng))
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
            }
            frames.push(img);
        }
        views.insert(view, frames);
    }

    let m = cfg.trace_oversample;
    let rate = cfg.frame_rate_hz * m as f64;
    let trace = plan.build(rate, (n - 1) * m + 1, m * t_s, m * t_e, &mut rng)?;
    let episode = Episode {
        id: id.to_string(),
        action: action.to_string(),
        views,
        trace,
        timestamps: (0..n).map(|k| k as f64 / cfg.frame_rate_hz).collect(),
        boundaries: Some(FrameBoundaries {
            t_s_frame: t_s,
            t_e_frame: t_e,
        }),
    };
    episode.validate()?;
    Ok(episode)
}

pub fn episode_id(index: usize) -> String {
    format!("ep{index:04}")
}

/// Seed for episode `index`, derived from the master seed.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    mix(master ^ mix(index as u64 + 1))
}

/// All episodes of the configured dataset, in index order.
pub fn generate_episodes(cfg: &SynthConfig) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let actions = cfg.action.names();
    (0..cfg.n_episodes)
        .map(|i| {
            generate_episode(
                cfg,
                &episode_id(i),
                &actions[i % actions.len()],
                episode_seed(cfg.seed, i),
            )
        })
        .collect()
}

/// Generates and writes the dataset under `out`: `episodes/<id>/`, `dataset.json` and
/// the config as `synth.json`.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let actions = cfg.action.names();
    let mut ids = Vec::with_capacity(cfg.n_episodes);
    for i in 0..cfg.n_episodes {
        let id = episode_id(i);
        let ep = generate_episode(
            cfg,
            &id,
            &actions[i % actions.len()],
            episode_seed(cfg.seed, i),
        )?;
        write_episode(&ep, &episode_dir(out, &id))?;
        ids.push(id);
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        splits: Splits::by_index(&ids, cfg.split)?,
        episodes: ids,
    };
    manifest.write(out)?;
    let cfg_path = out.join("synth.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n")
        .map_err(|e| Error::io(cfg_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::detect_boundaries;

    fn small(style: CueStyle) -> SynthConfig {
        SynthConfig {
            n_episodes: 3,
            duration_range: [10, 20],
            cue_style: style,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn episodes_are_valid_and_deterministic() {
        for style in [
            CueStyle::FillingBar,
            CueStyle::MovingDisc,
            CueStyle::RotatingDial,
        ] {
            let cfg = small(style);
            let a = generate_episodes(&cfg).unwrap();
            let b = generate_episodes(&cfg).unwrap();
            assert_eq!(a, b);
            for ep in &a {
                ep.validate().unwrap();
                assert_eq!(ep.views.len(), 3);
            }
        }
    }

    #[test]
    fn every_builtin_rule_is_recovered() {
        for action in builtin_rules().keys() {
            let cfg = SynthConfig {
                action: ActionSpec::One(action.clone()),
                n_episodes: 4,
                duration_range: [5, 30],
                idle_prefix_range: [0, 6],
                idle_suffix_range: [2, 6],
                ..SynthConfig::default()
            };
            for ep in generate_episodes(&cfg).unwrap() {
                let rule = builtin_rules()[action].clone();
                let found = ep.trace_to_frames(detect_boundaries(&ep.trace, &rule).unwrap());
                assert_eq!(Some(found), ep.boundaries, "{action} {}", ep.id);
            }
        }
    }

    #[test]
    fn unsatisfiable_rule_is_a_config_error() {
        let rule = BoundaryRule {
            start: vec![Condition::new(
                "base_linear_velocity",
                Comparator::Greater,
                1.0,
            )],
            end: vec![Condition::new(
                "base_linear_velocity",
                Comparator::Greater,
                0.0,
            )],
        };
        let cfg = SynthConfig {
            trace_rule: Some(rule),
            ..SynthConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("unsatisfiable"));
    }

    #[test]
    fn config_errors() {
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.image_size = 4));
        assert!(bad(|c| c.duration_range = [50, 40]));
        assert!(bad(|c| {
            c.occlusion.insert(View::Left, 1.5);
        }));
        assert!(bad(|c| c.noise_level = -1.0));
        assert!(bad(|c| c.action = ActionSpec::One("juggle".into())));
        assert!(bad(|c| c.idle_suffix_range = [0, 3]));
        assert!(SynthConfig::from_json(
            r#"{"cue_style": "moving-disc", "occlusion": {"central": 0.6}}"#
        )
        .is_ok());
        assert!(SynthConfig::from_json(r#"{"action": ["wash_pan", "push_chair"]}"#).is_ok());
    }

    #[test]
    fn occlusion_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [OcclusionMode::Bernoulli, OcclusionMode::Block] {
            let s = occlusion_schedule(20_000, 0.3, mode, 8.0, &mut rng);
            let frac = s.iter().filter(|&&o| o).count() as f64 / s.len() as f64;
            assert!((frac - 0.3).abs() < 0.05, "{mode:?} {frac}");
        }
        let s = occlusion_schedule(20_000, 0.3, OcclusionMode::Block, 8.0, &mut rng);
        let switches = s.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(switches < 2_000, "{switches}");
    }

    #[test]
    fn occluded_frames_hide_the_cue() {
        let mut cfg = small(CueStyle::FillingBar);
        cfg.occlusion.insert(View::Central, 1.0);
        let ep = generate_episodes(&cfg).unwrap().remove(0);
        let b = ep.boundaries.unwrap();
        let first = &ep.views[&View::Central][b.t_s_frame];
        let last = &ep.views[&View::Central][b.t_e_frame];
        // occluder gray differs per frame but neither shows the lit bar
        let lit = |img: &Image| {
            img.pixels
                .chunks(3)
                .filter(|p| p.iter().all(|&v| v >= 180))
                .count()
        };
        assert_eq!(lit(first), 0);
        assert_eq!(lit(last), 0);
    }
}
