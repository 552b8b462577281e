use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::Error;

/// Backbone layouts compared by parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// 9 language layers and 5 object-relationship layers before the cross
    /// layers.
    #[serde(rename = "LXMERT_FULL")]
    LxmertFull,
    /// Cross layers only.
    #[serde(rename = "LXMERT_S")]
    LxmertS,
}

pub const FULL_LANGUAGE_LAYERS: usize = 9;
pub const FULL_OBJECT_LAYERS: usize = 5;

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::LxmertFull => "LXMERT_FULL",
            Architecture::LxmertS => "LXMERT_S",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "LXMERT_FULL" | "LXMERT" => Ok(Architecture::LxmertFull),
            "LXMERT_S" => Ok(Architecture::LxmertS),
            _ => Err(Error::UnknownArchitecture(s.to_string())),
        }
    }
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn attention(h: usize) -> usize {
    4 * linear(h, h) + 2 * h
}

fn ffn(h: usize, f: usize) -> usize {
    linear(h, f) + linear(f, h) + 2 * h
}

/// Encoder parameters of `arch` at the widths in `config`.
///
/// Counted: visual feature and box projections with their layer norms, and
/// every transformer layer. Not counted: word and position embeddings, the
/// pooler and task heads.
pub fn count_parameters(arch: Architecture, config: &ModelConfig) -> usize {
    let h = config.hidden_size;
    let f = config.ffn_size;
    let visual = linear(config.d_roi, h) + 2 * h + linear(4, h) + 2 * h;
    // One cross-attention module serves both directions, then self-attention
    // and a feed-forward block per modality.
    let xlayer = 3 * attention(h) + 2 * ffn(h, f);
    let cross = visual + config.num_xlayers * xlayer;
    match arch {
        Architecture::LxmertS => cross,
        Architecture::LxmertFull => {
            cross + (FULL_LANGUAGE_LAYERS + FULL_OBJECT_LAYERS) * (attention(h) + ffn(h, f))
        }
    }
}
