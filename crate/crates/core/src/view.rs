//! Camera identities and camera subsets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the three synchronized robot cameras.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Central,
    Right,
}

impl View {
    /// Canonical fusion order.
    pub const ALL: [View; 3] = [View::Left, View::Central, View::Right];

    pub fn index(self) -> usize {
        match self {
            View::Left => 0,
            View::Central => 1,
            View::Right => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Left => "left",
            View::Central => "central",
            View::Right => "right",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "left" => Ok(View::Left),
            "central" => Ok(View::Central),
            "right" => Ok(View::Right),
            other => Err(Error::Config(format!("unknown view `{other}`"))),
        }
    }
}

/// Non-empty subset of views the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewMask(u8);

impl ViewMask {
    pub const ALL: ViewMask = ViewMask(0b111);

    pub fn new(views: &[View]) -> Result<Self, Error> {
        let mut bits = 0u8;
        for v in views {
            let b = 1 << v.index();
            if bits & b != 0 {
                return Err(Error::Config(format!("view `{v}` listed twice")));
            }
            bits |= b;
        }
        if bits == 0 {
            return Err(Error::Config("view mask must not be empty".into()));
        }
        Ok(ViewMask(bits))
    }

    pub fn single(view: View) -> Self {
        ViewMask(1 << view.index())
    }

    pub fn contains(self, view: View) -> bool {
        self.0 & (1 << view.index()) != 0
    }

    /// Active views in canonical order.
    pub fn views(self) -> Vec<View> {
        View::ALL
            .into_iter()
            .filter(|v| self.contains(*v))
            .collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl Default for ViewMask {
    fn default() -> Self {
        ViewMask::ALL
    }
}

impl fmt::Display for ViewMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == ViewMask::ALL {
            return f.write_str("all");
        }
        let names: Vec<_> = self.views().iter().map(|v| v.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ViewMask {
    type Err = Error;

    /// Accepts `all` or a comma/`|`-separated list of view names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "all" {
            return Ok(ViewMask::ALL);
        }
        let views = s
            .split([',', '|', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(View::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        ViewMask::new(&views)
    }
}

impl Serialize for ViewMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ViewMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
