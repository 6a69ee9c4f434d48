use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetId;
use crate::error::{Error, Result};

/// Order in which the two single-axis attentions of a divided block run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnVariant {
    /// Temporal, then spatial.
    #[serde(rename = "ts")]
    Ts,
    /// Spatial, then temporal.
    #[serde(rename = "st")]
    St,
    /// Both on the block input, summed.
    #[serde(rename = "agg_ts")]
    AggTs,
}

impl AttnVariant {
    pub const ALL: [AttnVariant; 3] = [AttnVariant::Ts, AttnVariant::St, AttnVariant::AggTs];

    pub fn name(self) -> &'static str {
        match self {
            AttnVariant::Ts => "ts",
            AttnVariant::St => "st",
            AttnVariant::AggTs => "agg_ts",
        }
    }
}

impl fmt::Display for AttnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ts" => Ok(Self::Ts),
            "st" => Ok(Self::St),
            "agg_ts" | "aggts" | "agg" => Ok(Self::AggTs),
            other => Err(Error::Config(format!("unknown attention variant '{other}'"))),
        }
    }
}

/// Whether future steps are produced in one pass or one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Parallel,
    Autoregressive,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Parallel => "parallel",
            DecodeMode::Autoregressive => "ar",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parallel" | "par" => Ok(Self::Parallel),
            "ar" | "autoregressive" => Ok(Self::Autoregressive),
            other => Err(Error::Config(format!("unknown decode mode '{other}'"))),
        }
    }
}

/// How self-attention covers the agent × time grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnLayout {
    /// Separate temporal and spatial attention (ordered by [`AttnVariant`]).
    Divided,
    /// One joint attention over all flattened agent-time tokens.
    Merged,
    /// Temporal attention only; agents never interact.
    TemporalOnly,
}

impl fmt::Display for AttnLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnLayout::Divided => "divided",
            AttnLayout::Merged => "merged",
            AttnLayout::TemporalOnly => "temporal",
        })
    }
}

impl FromStr for AttnLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "divided" => Ok(Self::Divided),
            "merged" => Ok(Self::Merged),
            "temporal" | "temporal_only" => Ok(Self::TemporalOnly),
            other => Err(Error::Config(format!("unknown attention layout '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_max: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub variant: AttnVariant,
    pub decode: DecodeMode,
    pub layout: AttnLayout,
    /// Dropout probability applied after attention and feed-forward outputs while training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_ff: 512,
            heads: 8,
            layers: 1,
            n_max: 20,
            t_obs: 8,
            t_pred: 12,
            d_in: 4,
            d_out: 2,
            variant: AttnVariant::St,
            decode: DecodeMode::Parallel,
            layout: AttnLayout::Divided,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Default configuration for the fold holding out `test`: two layers for
    /// Univ (densest crowds), one elsewhere.
    pub fn for_fold(test: DatasetId) -> Self {
        Self { layers: if test == DatasetId::Univ { 2 } else { 1 }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.n_max == 0 || self.t_obs == 0 || self.t_pred == 0 {
            return fail("d_ff, n_max, t_obs and t_pred must be positive".into());
        }
        if self.d_in != 4 || self.d_out != 2 {
            return fail("inputs are (x, y, vx, vy) and outputs (x, y)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Short stable hash of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Scalar parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ff = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let ln = 2 * d;
        let enc_layer = 2 * attn + ff + 3 * ln;
        let dec_layer = 3 * attn + ff + 4 * ln;
        (self.d_in * d + d)
            + self.t_obs * d
            + self.t_pred * d
            + self.n_max * d
            + self.t_pred * self.n_max * d
            + self.layers * (enc_layer + dec_layer)
            + (d * self.d_out + self.d_out)
    }
}
