use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six kinds of swappable parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    #[serde(rename = "conv_w")]
    ConvW,
    #[serde(rename = "conv_b")]
    ConvB,
    #[serde(rename = "bn_rm")]
    BnRM,
    #[serde(rename = "bn_rv")]
    BnRV,
    #[serde(rename = "bn_rw")]
    BnRW,
    #[serde(rename = "bn_rb")]
    BnRB,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] =
        [ParamKind::ConvW, ParamKind::ConvB, ParamKind::BnRM, ParamKind::BnRV, ParamKind::BnRW, ParamKind::BnRB];
    pub const CONV: [ParamKind; 2] = [ParamKind::ConvW, ParamKind::ConvB];
    pub const BN: [ParamKind; 4] = [ParamKind::BnRM, ParamKind::BnRV, ParamKind::BnRW, ParamKind::BnRB];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::ConvW => "conv_w",
            ParamKind::ConvB => "conv_b",
            ParamKind::BnRM => "bn_rm",
            ParamKind::BnRV => "bn_rv",
            ParamKind::BnRW => "bn_rw",
            ParamKind::BnRB => "bn_rb",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ParamKind::ConvW | ParamKind::ConvB)
    }

    /// Running statistics are data, not trainable weights.
    pub fn is_running_stat(self) -> bool {
        matches!(self, ParamKind::BnRM | ParamKind::BnRV)
    }

    /// Parses a comma-separated list such as `conv_w,bn_rm`; `all` selects every kind.
    pub fn parse_list(s: &str) -> Result<Vec<ParamKind>> {
        if s.trim() == "all" {
            return Ok(ParamKind::ALL.to_vec());
        }
        let mut kinds: Vec<ParamKind> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
        kinds.sort();
        kinds.dedup();
        Ok(kinds)
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown parameter kind {s:?}")))
    }
}

/// Address of one parameter tensor: 1-based layer ordinal (conv and BN layers
/// are numbered independently, front to back) and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer_id: usize,
    pub kind: ParamKind,
}

impl ParamKey {
    pub fn new(layer_id: usize, kind: ParamKind) -> Self {
        Self { layer_id, kind }
    }
}

// Grouped by kind, then front to back.
impl Ord for ParamKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.kind, self.layer_id).cmp(&(other.kind, other.layer_id))
    }
}

impl PartialOrd for ParamKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer_id, self.kind)
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    /// Parses the canonical `L{layer_id}.{kind}` form.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed parameter key {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (id, kind) = rest.split_once('.').ok_or_else(bad)?;
        let layer_id: usize = id.parse().map_err(|_| bad())?;
        if layer_id == 0 {
            return Err(bad());
        }
        Ok(ParamKey::new(layer_id, kind.parse()?))
    }
}
