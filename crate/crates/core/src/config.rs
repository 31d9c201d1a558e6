//! Run configuration: a flat `key = value` file, one key per line, `#`
//! starting a comment.
//!
//! ```text
//! mode = scotti
//! model = mlp{64,32,16,4}
//! dataset = synthetic-blobs{4,64,2000}
//! epochs = 60
//! eta_alpha = 1e-4   # eta_epsilon defaults to half of this
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optimizer::EpsilonSign;

pub const OUTPUT_DIR_ENV: &str = "SCOTTI_OUTPUT_DIR";

/// Baseline learning-rate milestones as fractions of the run length.
pub const DEFAULT_MILESTONES: [f64; 2] = [0.4, 0.6];
/// Factor applied to the learning rate at each milestone.
pub const MILESTONE_DECAY: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain SGD with a step schedule; nothing frozen, nothing learned.
    Baseline,
    /// Freezing at a fixed threshold.
    FixedEps,
    /// Learned learning rate, no freezing.
    Ultimate,
    /// Learned learning rate and learned threshold.
    #[default]
    Scotti,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::FixedEps, Mode::Ultimate, Mode::Scotti];

    pub fn freezes(self) -> bool {
        matches!(self, Mode::FixedEps | Mode::Scotti)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::FixedEps => "fixed_eps",
            Mode::Ultimate => "ultimate",
            Mode::Scotti => "scotti",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (baseline, fixed_eps, ultimate, scotti)"))
    }
}

fn as_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn from_display<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
where
    T: FromStr,
    T::Err: fmt::Display,
    D: Deserializer<'de>,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(serialize_with = "as_display", deserialize_with = "from_display")]
    pub model: ModelSpec,
    #[serde(serialize_with = "as_display", deserialize_with = "from_display")]
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: Mode,
    pub epsilon0: f64,
    pub eta_alpha: f64,
    pub eta_epsilon: f64,
    pub mu_eq: f64,
    pub probe_size: usize,
    pub epsilon_update_sign: EpsilonSign,
    pub count_probe_overhead: bool,
    /// Fractions of `epochs` at which the baseline learning rate drops.
    pub lr_milestones: Vec<f64>,
    pub output_dir: PathBuf,
}

const DEFAULT_ETA_ALPHA: f64 = 1.5e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::Mlp(vec![64, 32, 16, 4]),
            dataset: DatasetSpec::SyntheticBlobs {
                classes: 4,
                dims: 64,
                samples: 2000,
            },
            epochs: 60,
            batch_size: 32,
            alpha0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            mode: Mode::Scotti,
            epsilon0: 0.0,
            eta_alpha: DEFAULT_ETA_ALPHA,
            eta_epsilon: DEFAULT_ETA_ALPHA / 2.0,
            mu_eq: 0.5,
            probe_size: 50,
            epsilon_update_sign: EpsilonSign::Paper,
            count_probe_overhead: false,
            lr_milestones: Vec::new(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: [&str; 18] = [
    "seed",
    "model",
    "dataset",
    "epochs",
    "batch_size",
    "alpha0",
    "momentum",
    "weight_decay",
    "mode",
    "epsilon0",
    "eta_alpha",
    "eta_epsilon",
    "mu_eq",
    "probe_size",
    "epsilon_update_sign",
    "count_probe_overhead",
    "lr_milestones",
    "output_dir",
];

impl TrainConfig {
    /// Defaults for `mode`, with the mode's forced values applied.
    pub fn for_mode(mode: Mode) -> Self {
        let mut c = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        match mode {
            Mode::Baseline => {
                c.eta_alpha = 0.0;
                c.eta_epsilon = 0.0;
                c.lr_milestones = DEFAULT_MILESTONES.to_vec();
            }
            Mode::FixedEps => {
                c.eta_alpha = 0.0;
                c.eta_epsilon = 0.0;
            }
            Mode::Ultimate => c.eta_epsilon = 0.0,
            Mode::Scotti => {}
        }
        c
    }

    /// Sets η_α and, following the default recipe, η_ε = η_α / 2 where the
    /// mode learns ε.
    pub fn with_eta_alpha(mut self, eta_alpha: f64) -> Self {
        self.eta_alpha = eta_alpha;
        if self.mode == Mode::Scotti {
            self.eta_epsilon = eta_alpha / 2.0;
        }
        self
    }

    /// Checks ranges and mode consistency.
    pub fn validate(&self) -> Result<()> {
        self.validate_at(&BTreeMap::new())
    }

    fn validate_at(&self, lines: &BTreeMap<&str, usize>) -> Result<()> {
        let err = |key: &str, msg: String| Error::config(key, lines.get(key).copied().unwrap_or(0), msg);
        for (key, v) in [
            ("alpha0", self.alpha0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("epsilon0", self.epsilon0),
            ("eta_alpha", self.eta_alpha),
            ("eta_epsilon", self.eta_epsilon),
            ("mu_eq", self.mu_eq),
        ] {
            if !v.is_finite() {
                return Err(err(key, format!("must be finite, got {v}")));
            }
        }
        for (key, v) in [("epochs", self.epochs), ("batch_size", self.batch_size), ("probe_size", self.probe_size)] {
            if v == 0 {
                return Err(err(key, "must be at least 1".into()));
            }
        }
        if self.alpha0 <= 0.0 {
            return Err(err("alpha0", format!("must be positive, got {}", self.alpha0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(err("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        for (key, v) in [
            ("weight_decay", self.weight_decay),
            ("eta_alpha", self.eta_alpha),
            ("eta_epsilon", self.eta_epsilon),
        ] {
            if v < 0.0 {
                return Err(err(key, format!("must be non-negative, got {v}")));
            }
        }
        if let Some(m) = self.lr_milestones.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
            return Err(err("lr_milestones", format!("milestones are fractions in (0, 1), got {m}")));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err("lr_milestones", "milestones must be strictly increasing".into()));
        }

        let mode = self.mode;
        if mode == Mode::Baseline && self.eta_alpha != 0.0 {
            return Err(err("eta_alpha", "baseline mode does not learn the learning rate".into()));
        }
        if mode != Mode::Scotti && self.eta_epsilon != 0.0 {
            return Err(err("eta_epsilon", format!("{mode} mode does not learn epsilon")));
        }
        if mode != Mode::Baseline && !self.lr_milestones.is_empty() {
            return Err(err("lr_milestones", "learning-rate milestones apply to baseline mode only".into()));
        }
        Ok(())
    }

    /// Epochs (0-based) at which the baseline learning rate drops.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.lr_milestones
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }

    /// Baseline learning rate for `epoch`.
    pub fn scheduled_alpha(&self, epoch: usize) -> f64 {
        let drops = self.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
        (0..drops).fold(self.alpha0, |a, _| a * MILESTONE_DECAY)
    }
}

fn strip_quotes(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

fn parse_value<T: FromStr>(key: &str, line: usize, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::config(key, line, format!("invalid value `{v}`: {e}")))
}

fn parse_milestones(line: usize, v: &str) -> Result<Vec<f64>> {
    let body = v.trim();
    let body = body
        .strip_prefix('[')
        .and_then(|b| b.strip_suffix(']'))
        .unwrap_or(body)
        .trim();
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split(',')
        .map(|p| parse_value::<f64>("lr_milestones", line, p.trim()))
        .collect()
}

/// Parses config text. Absent keys take their defaults, and the chosen mode
/// fills in the values it forces. An explicit value contradicting the mode
/// is an error.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let (k, v) = (k.trim(), strip_quotes(v.trim()));
        let Some(key) = KEYS.iter().copied().find(|known| *known == k) else {
            return Err(Error::config(k, line, "unknown key"));
        };
        if entries.insert(key, (line, v)).is_some() {
            return Err(Error::config(key, line, "duplicate key"));
        }
    }

    let mode = match entries.get("mode") {
        Some(&(line, v)) => parse_value::<Mode>("mode", line, v)?,
        None => Mode::default(),
    };
    let mut c = TrainConfig::for_mode(mode);
    let mut lines = BTreeMap::new();
    for (&key, &(line, v)) in &entries {
        lines.insert(key, line);
        match key {
            "seed" => c.seed = parse_value(key, line, v)?,
            "model" => c.model = parse_value(key, line, v)?,
            "dataset" => c.dataset = parse_value(key, line, v)?,
            "epochs" => c.epochs = parse_value(key, line, v)?,
            "batch_size" => c.batch_size = parse_value(key, line, v)?,
            "alpha0" => c.alpha0 = parse_value(key, line, v)?,
            "momentum" => c.momentum = parse_value(key, line, v)?,
            "weight_decay" => c.weight_decay = parse_value(key, line, v)?,
            "mode" => {}
            "epsilon0" => c.epsilon0 = parse_value(key, line, v)?,
            "eta_alpha" => c.eta_alpha = parse_value(key, line, v)?,
            "eta_epsilon" => c.eta_epsilon = parse_value(key, line, v)?,
            "mu_eq" => c.mu_eq = parse_value(key, line, v)?,
            "probe_size" => c.probe_size = parse_value(key, line, v)?,
            "epsilon_update_sign" => c.epsilon_update_sign = parse_value(key, line, v)?,
            "count_probe_overhead" => c.count_probe_overhead = parse_value(key, line, v)?,
            "lr_milestones" => c.lr_milestones = parse_milestones(line, v)?,
            "output_dir" => c.output_dir = PathBuf::from(v),
            _ => unreachable!("key list and match arms agree"),
        }
    }
    if mode == Mode::Scotti && !entries.contains_key("eta_epsilon") {
        c.eta_epsilon = c.eta_alpha / 2.0;
    }
    c.validate_at(&lines)?;
    Ok(c)
}

/// Reads and parses a config file, then applies the output-directory
/// environment override.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut c = parse_config(&text)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        c.output_dir = PathBuf::from(dir);
    }
    Ok(c)
}

/// Renders a config back into the file format; parsing the result yields
/// the same config.
pub fn render_config(c: &TrainConfig) -> String {
    let milestones = c
        .lr_milestones
        .iter()
        .map(|m| format!("{m:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    put("mode", c.mode.to_string());
    put("seed", c.seed.to_string());
    put("model", c.model.to_string());
    put("dataset", c.dataset.to_string());
    put("epochs", c.epochs.to_string());
    put("batch_size", c.batch_size.to_string());
    put("alpha0", format!("{:?}", c.alpha0));
    put("momentum", format!("{:?}", c.momentum));
    put("weight_decay", format!("{:?}", c.weight_decay));
    put("epsilon0", format!("{:?}", c.epsilon0));
    put("eta_alpha", format!("{:?}", c.eta_alpha));
    put("eta_epsilon", format!("{:?}", c.eta_epsilon));
    put("mu_eq", format!("{:?}", c.mu_eq));
    put("probe_size", c.probe_size.to_string());
    put("epsilon_update_sign", c.epsilon_update_sign.to_string());
    put("count_probe_overhead", c.count_probe_overhead.to_string());
    put("lr_milestones", format!("[{milestones}]"));
    put("output_dir", c.output_dir.display().to_string());
    out
}
