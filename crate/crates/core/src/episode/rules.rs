//! Threshold rules that locate the start and end of an action in a sensor trace.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trace::{channel_index, SensorTrace, ARMS};
use crate::error::{Error, Result};

pub const DEFAULT_SUSTAIN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = "<")]
    Less,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Greater => value > threshold,
            Comparator::Less => value < threshold,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Greater => ">",
            Comparator::Less => "<",
        })
    }
}

fn default_sustain() -> usize {
    DEFAULT_SUSTAIN
}

/// `channel op threshold`, held for `sustain` consecutive samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub channel: String,
    pub op: Comparator,
    pub threshold: f64,
    #[serde(default = "default_sustain")]
    pub sustain: usize,
}

impl Condition {
    pub fn new(channel: impl Into<String>, op: Comparator, threshold: f64) -> Self {
        Condition {
            channel: channel.into(),
            op,
            threshold,
            sustain: DEFAULT_SUSTAIN,
        }
    }

    pub fn holds(&self, value: f64) -> bool {
        self.op.holds(value, self.threshold)
    }

    /// First window start `>= from` where the predicate holds for `sustain` samples.
    fn first_window(&self, series: &[f64], from: usize) -> Option<usize> {
        let mut run = 0;
        for (i, &v) in series.iter().enumerate().skip(from) {
            if self.holds(v) {
                run += 1;
                if run == self.sustain {
                    return Some(i + 1 - self.sustain);
                }
            } else {
                run = 0;
            }
        }
        None
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} (x{})",
            self.channel, self.op, self.threshold, self.sustain
        )
    }
}

/// Start and end conditions. Each side is an OR-list: it fires at the earliest window
/// where any member holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRule {
    pub start: Vec<Condition>,
    pub end: Vec<Condition>,
}

impl BoundaryRule {
    pub fn validate(&self) -> Result<()> {
        for (side, list) in [("start", &self.start), ("end", &self.end)] {
            if list.is_empty() {
                return Err(Error::Config(format!("rule has no {side} condition")));
            }
            for c in list {
                if channel_index(&c.channel).is_none() {
                    return Err(Error::Config(format!(
                        "unknown channel `{}` in {side} condition",
                        c.channel
                    )));
                }
                if c.sustain == 0 {
                    return Err(Error::Config(format!(
                        "{side} condition on `{}` has sustain 0",
                        c.channel
                    )));
                }
                if !c.threshold.is_finite() {
                    return Err(Error::Config(format!(
                        "{side} condition on `{}` has a non-finite threshold",
                        c.channel
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same rule with every sustain window set to `w`.
    pub fn with_sustain(mut self, w: usize) -> Self {
        for c in self.start.iter_mut().chain(self.end.iter_mut()) {
            c.sustain = w;
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rule: BoundaryRule = serde_json::from_str(text)?;
        rule.validate()?;
        Ok(rule)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::format(path, other.to_string()),
        })
    }
}

/// Trace sample indices of the detected action start and end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceBoundaries {
    pub t_s: usize,
    pub t_e: usize,
}

fn earliest(conds: &[Condition], trace: &SensorTrace, from: usize) -> Result<Option<usize>> {
    let mut best: Option<usize> = None;
    for c in conds {
        let series = trace
            .channel(&c.channel)
            .ok_or_else(|| Error::Config(format!("unknown channel `{}`", c.channel)))?;
        if let Some(i) = c.first_window(series, from) {
            best = Some(best.map_or(i, |b| b.min(i)));
        }
    }
    Ok(best)
}

/// Finds `t_S`, the first sustained start window, and `t_E`, the first sustained end
/// window starting strictly after `t_S`. Both are reported at the first sample of their
/// window.
pub fn detect_boundaries(trace: &SensorTrace, rule: &BoundaryRule) -> Result<TraceBoundaries> {
    rule.validate()?;
    let t_s = earliest(&rule.start, trace, 0)?.ok_or(Error::NoStart)?;
    let t_e = earliest(&rule.end, trace, t_s + 1)?.ok_or(Error::NoEnd { t_start: t_s })?;
    Ok(TraceBoundaries { t_s, t_e })
}

/// Like [`detect_boundaries`], but a missing end falls back to the last sample. The flag
/// reports whether the fallback was used.
pub fn detect_boundaries_or_last(
    trace: &SensorTrace,
    rule: &BoundaryRule,
) -> Result<(TraceBoundaries, bool)> {
    match detect_boundaries(trace, rule) {
        Err(Error::NoEnd { t_start }) if t_start + 1 < trace.len() => Ok((
            TraceBoundaries {
                t_s: t_start,
                t_e: trace.len() - 1,
            },
            true,
        )),
        other => other.map(|b| (b, false)),
    }
}

fn both_arms(joints: &[&str], quantity: &str, op: Comparator, threshold: f64) -> Vec<Condition> {
    ARMS.iter()
        .flat_map(|arm| {
            joints
                .iter()
                .map(move |j| Condition::new(format!("{arm}_{j}_{quantity}"), op, threshold))
        })
        .collect()
}

/// The six reference action rules, keyed by action name. Conditions that name a joint
/// without an arm apply to either arm.
pub fn builtin_rules() -> BTreeMap<String, BoundaryRule> {
    use Comparator::{Greater, Less};
    let rule = |start: Vec<Condition>, end: Vec<Condition>| BoundaryRule { start, end };
    let mut rules = BTreeMap::new();
    rules.insert(
        "use_cabinet".to_string(),
        rule(
            vec![Condition::new("base_linear_velocity", Greater, 0.2)],
            both_arms(&["shoulder", "elbow"], "velocity", Less, 0.4),
        ),
    );
    rules.insert(
        "push_chair".to_string(),
        rule(
            vec![Condition::new("base_angular_velocity", Greater, 0.3)],
            both_arms(&["gripper"], "effort", Less, -500.0),
        ),
    );
    rules.insert(
        "take_elevator".to_string(),
        rule(
            vec![Condition::new("base_linear_velocity", Greater, 0.3)],
            vec![Condition::new("base_angular_velocity", Less, 0.3)],
        ),
    );
    rules.insert(
        "cook_shrimp".to_string(),
        rule(
            vec![Condition::new("right_gripper_effort", Greater, 200.0)],
            vec![Condition::new("left_gripper_effort", Less, 600.0)],
        ),
    );
    rules.insert(
        "wash_pan".to_string(),
        rule(
            vec![Condition::new("left_gripper_effort", Greater, 150.0)],
            vec![Condition::new("left_gripper_effort", Less, 100.0)],
        ),
    );
    rules.insert(
        "wipe_wine".to_string(),
        rule(
            vec![Condition::new("base_linear_velocity", Greater, 0.25)],
            both_arms(&["shoulder", "elbow", "wrist_angle"], "velocity", Less, 0.5),
        ),
    );
    rules
}
