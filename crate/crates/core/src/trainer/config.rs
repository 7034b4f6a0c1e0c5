//! Line-based `key = value` config with `[section]` headers, plus the model
//! and training configs that serialize into it.

use std::fmt;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Ordered sections of ordered `key = value` entries, backed by `rust-ini`.
/// `#` and `;` start comment lines; a repeated key or section keeps the
/// last value.
#[derive(Debug, Clone, Default)]
pub struct Ini(ini::Ini);

impl PartialEq for Ini {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

impl Ini {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let opt = ini::ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..Default::default()
        };
        let raw = ini::Ini::load_from_str_opt(text, opt).map_err(|e| Error::Config(e.to_string()))?;
        if let Some((k, _)) = raw.general_section().iter().next() {
            return Err(Error::Config(format!("key {k:?} outside any section")));
        }
        let mut out = Ini::new();
        for (section, props) in raw.iter() {
            let Some(section) = section else { continue };
            if section.trim().is_empty() {
                return Err(Error::Config("empty section name".into()));
            }
            out.0.with_section(Some(section));
            for (k, v) in props.iter() {
                out.set(section, k, v);
            }
        }
        Ok(out)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.0.with_section(Some(section)).set(key, value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.0.get_from(Some(section), key)
    }

    pub fn sections(&self) -> impl Iterator<Item = &str> {
        self.0.sections().flatten()
    }

    pub fn keys(&self, section: &str) -> Vec<&str> {
        self.0
            .section(Some(section))
            .map(|p| p.iter().map(|(k, _)| k).collect())
            .unwrap_or_default()
    }

    /// Parses `section.key` if present.
    pub fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("[{section}] {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    /// Errors on any key of `section` not listed in `known`.
    pub fn check_keys(&self, section: &str, known: &[&str]) -> Result<()> {
        match self.keys(section).into_iter().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key [{section}] {k}"))),
            None => Ok(()),
        }
    }

    /// Copies every section of `other` over this one.
    pub fn merge(&mut self, other: &Ini) {
        for section in other.sections() {
            for k in other.keys(section) {
                if let Some(v) = other.get(section, k) {
                    self.set(section, k, v);
                }
            }
        }
    }
}

impl fmt::Display for Ini {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = ini::WriteOption {
            escape_policy: ini::EscapePolicy::Nothing,
            line_separator: ini::LineSeparator::CR,
            kv_separator: " = ",
        };
        let mut buf = Vec::new();
        self.0.write_to_opt(&mut buf, opt).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

/// Training regime; decides which heads exist and where the stop-gradient sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// CE trains encoder + guidance; CTC trains the GCN head on detached features.
    Gtc,
    /// As `Gtc` with a plain BiLSTM CTC head.
    GtcNoGcn,
    /// CTC end to end, no graph layer, no guidance.
    CtcOnly,
    /// CTC end to end with the graph layer.
    CtcPlusGcn,
    /// CE end to end, no CTC head.
    AttentionOnly,
    /// CTC trains encoder + head; guidance learns on detached features and is
    /// the evaluated head.
    CtcGuidesAttention,
}

/// Which decoder produces predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Ctc,
    Attention,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Gtc,
        Mode::GtcNoGcn,
        Mode::CtcOnly,
        Mode::CtcPlusGcn,
        Mode::AttentionOnly,
        Mode::CtcGuidesAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Gtc => "gtc",
            Mode::GtcNoGcn => "gtc_no_gcn",
            Mode::CtcOnly => "ctc_only",
            Mode::CtcPlusGcn => "ctc_plus_gcn",
            Mode::AttentionOnly => "attention_only",
            Mode::CtcGuidesAttention => "ctc_guides_attention",
        }
    }

    pub fn has_guidance(self) -> bool {
        !matches!(self, Mode::CtcOnly | Mode::CtcPlusGcn)
    }

    pub fn has_ctc_head(self) -> bool {
        self != Mode::AttentionOnly
    }

    pub fn uses_gcn(self) -> bool {
        matches!(self, Mode::Gtc | Mode::CtcPlusGcn | Mode::CtcGuidesAttention)
    }

    /// The CTC head sees `detach(h)`.
    pub fn ctc_detached(self) -> bool {
        matches!(self, Mode::Gtc | Mode::GtcNoGcn)
    }

    /// The guidance sees `detach(h)`.
    pub fn ce_detached(self) -> bool {
        self == Mode::CtcGuidesAttention
    }

    pub fn is_guided(self) -> bool {
        matches!(self, Mode::Gtc | Mode::GtcNoGcn)
    }

    pub fn eval_head(self) -> Head {
        match self {
            Mode::AttentionOnly | Mode::CtcGuidesAttention => Head::Attention,
            _ => Head::Ctc,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Ctc => "ctc",
            Head::Attention => "attention",
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(Head::Ctc),
            "attention" => Ok(Head::Attention),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub alphabet: String,
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub max_decode_len: usize,
    /// Width of the similarity projection; `None` means the feature width.
    pub projection_dim: Option<usize>,
    pub use_mix_weight: bool,
    pub lstm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alphabet: "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".into(),
            encoder: EncoderConfig::default(),
            embed_dim: 32,
            attention_hidden: 64,
            max_decode_len: 32,
            projection_dim: None,
            use_mix_weight: true,
            lstm_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn write_ini(&self, ini: &mut Ini) {
        ini.set("model", "alphabet", &self.alphabet);
        let e = &self.encoder;
        ini.set("encoder", "height", e.height);
        ini.set("encoder", "min_width", e.min_width);
        ini.set("encoder", "max_width", e.max_width);
        ini.set("encoder", "layers", e.layers_string());
        ini.set("guidance", "embed_dim", self.embed_dim);
        ini.set("guidance", "hidden", self.attention_hidden);
        ini.set("guidance", "max_decode_len", self.max_decode_len);
        let proj = self.projection_dim.map_or_else(|| "auto".to_string(), |d| d.to_string());
        ini.set("gcn", "projection_dim", proj);
        ini.set("gcn", "mix_weight", self.use_mix_weight);
        ini.set("gcn", "hidden", self.lstm_hidden);
    }

    /// Missing keys keep their defaults; unknown keys are errors.
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        ini.check_keys("model", &["alphabet"])?;
        ini.check_keys("encoder", &["height", "min_width", "max_width", "layers"])?;
        ini.check_keys("guidance", &["embed_dim", "hidden", "max_decode_len"])?;
        ini.check_keys("gcn", &["projection_dim", "mix_weight", "hidden"])?;
        let mut c = Self::default();
        if let Some(a) = ini.get("model", "alphabet") {
            c.alphabet = a.to_string();
        }
        let e = &mut c.encoder;
        e.height = ini.parsed("encoder", "height")?.unwrap_or(e.height);
        e.min_width = ini.parsed("encoder", "min_width")?.unwrap_or(e.min_width);
        e.max_width = ini.parsed("encoder", "max_width")?.unwrap_or(e.max_width);
        if let Some(l) = ini.get("encoder", "layers") {
            e.layers = EncoderConfig::parse_layers(l)?;
        }
        c.embed_dim = ini.parsed("guidance", "embed_dim")?.unwrap_or(c.embed_dim);
        c.attention_hidden = ini.parsed("guidance", "hidden")?.unwrap_or(c.attention_hidden);
        c.max_decode_len = ini.parsed("guidance", "max_decode_len")?.unwrap_or(c.max_decode_len);
        c.projection_dim = match ini.get("gcn", "projection_dim") {
            None | Some("auto") => None,
            Some(_) => ini.parsed("gcn", "projection_dim")?,
        };
        c.use_mix_weight = ini.parsed("gcn", "mix_weight")?.unwrap_or(c.use_mix_weight);
        c.lstm_hidden = ini.parsed("gcn", "hidden")?.unwrap_or(c.lstm_hidden);
        Ok(c)
    }
}

/// Optimization schedule and loss routing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    /// Multiplier applied every `decay_interval` steps.
    pub lr_decay: f64,
    pub decay_interval: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Locality scale of the distance gate.
    pub beta: f64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub ce_weight: f64,
    pub ctc_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gtc,
            lr: 1e-3,
            lr_decay: 0.1,
            decay_interval: 2000,
            batch_size: 8,
            max_steps: 200,
            seed: 0,
            beta: 2.0,
            eval_interval: 0,
            ce_weight: 1.0,
            ctc_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        if !(self.ce_weight >= 0.0 && self.ctc_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Step-decayed learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.lr_decay.powi((step / self.decay_interval) as i32)
    }

    pub fn write_ini(&self, ini: &mut Ini) {
        ini.set("train", "mode", self.mode);
        ini.set("train", "lr", self.lr);
        ini.set("train", "lr_decay", self.lr_decay);
        ini.set("train", "decay_interval", self.decay_interval);
        ini.set("train", "batch_size", self.batch_size);
        ini.set("train", "max_steps", self.max_steps);
        ini.set("train", "seed", self.seed);
        ini.set("train", "beta", self.beta);
        ini.set("train", "eval_interval", self.eval_interval);
        ini.set("train", "ce_weight", self.ce_weight);
        ini.set("train", "ctc_weight", self.ctc_weight);
    }

    pub fn from_ini(ini: &Ini) -> Result<Self> {
        ini.check_keys(
            "train",
            &[
                "mode",
                "lr",
                "lr_decay",
                "decay_interval",
                "batch_size",
                "max_steps",
                "seed",
                "beta",
                "eval_interval",
                "ce_weight",
                "ctc_weight",
            ],
        )?;
        let d = Self::default();
        let c = Self {
            mode: ini.parsed("train", "mode")?.unwrap_or(d.mode),
            lr: ini.parsed("train", "lr")?.unwrap_or(d.lr),
            lr_decay: ini.parsed("train", "lr_decay")?.unwrap_or(d.lr_decay),
            decay_interval: ini.parsed("train", "decay_interval")?.unwrap_or(d.decay_interval),
            batch_size: ini.parsed("train", "batch_size")?.unwrap_or(d.batch_size),
            max_steps: ini.parsed("train", "max_steps")?.unwrap_or(d.max_steps),
            seed: ini.parsed("train", "seed")?.unwrap_or(d.seed),
            beta: ini.parsed("train", "beta")?.unwrap_or(d.beta),
            eval_interval: ini.parsed("train", "eval_interval")?.unwrap_or(d.eval_interval),
            ce_weight: ini.parsed("train", "ce_weight")?.unwrap_or(d.ce_weight),
            ctc_weight: ini.parsed("train", "ctc_weight")?.unwrap_or(d.ctc_weight),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Text form of a model + training config pair, as echoed into checkpoints.
pub fn config_echo(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut ini = Ini::new();
    model.write_ini(&mut ini);
    train.write_ini(&mut ini);
    ini.to_string()
}

pub fn parse_echo(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let ini = Ini::parse(text)?;
    Ok((ModelConfig::from_ini(&ini)?, TrainConfig::from_ini(&ini)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_parse_and_render() {
        let ini = Ini::parse("# c\n[a]\nx = 1\ny=two words\n\n[b]\n; c\nz = 3\n[a]\nx = 4\n").unwrap();
        assert_eq!(ini.get("a", "x"), Some("4"));
        assert_eq!(ini.get("a", "y"), Some("two words"));
        assert_eq!(ini.get("b", "z"), Some("3"));
        assert_eq!(ini.to_string(), "[a]\ny = two words\nx = 4\n\n[b]\nz = 3\n");
        assert_eq!(Ini::parse(&ini.to_string()).unwrap(), ini);
    }

    #[test]
    fn ini_errors() {
        assert!(Ini::parse("x = 1").is_err());
        assert!(Ini::parse("[a]\nnot a pair").is_err());
        assert!(Ini::parse("[]\n").is_err());
    }

    #[test]
    fn config_round_trip() {
        let model = ModelConfig {
            alphabet: "AB".into(),
            projection_dim: Some(16),
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            mode: Mode::CtcGuidesAttention,
            lr: 3e-4,
            seed: 99,
            ..TrainConfig::default()
        };
        let (m, t) = parse_echo(&config_echo(&model, &train)).unwrap();
        assert_eq!((m, t), (model, train));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_ini(&Ini::parse("[train]\nspeed = 2").unwrap()).is_err());
        assert!(TrainConfig::from_ini(&Ini::parse("[train]\nlr = -1").unwrap()).is_err());
        assert!(TrainConfig::from_ini(&Ini::parse("[train]\nmode = fast").unwrap()).is_err());
        assert!(TrainConfig::from_ini(&Ini::parse("[train]\nlr_decay = 1.5").unwrap()).is_err());
    }

    #[test]
    fn lr_schedule_steps_down() {
        let t = TrainConfig {
            lr: 1e-3,
            lr_decay: 0.1,
            decay_interval: 2000,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 1e-3);
        assert_eq!(t.lr_at(1999), 1e-3);
        assert!((t.lr_at(2000) - 1e-4).abs() < 1e-18);
        assert!((t.lr_at(4000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn mode_routing_table() {
        assert!(Mode::Gtc.ctc_detached() && !Mode::Gtc.ce_detached());
        assert!(Mode::CtcGuidesAttention.ce_detached() && !Mode::CtcGuidesAttention.ctc_detached());
        assert!(!Mode::CtcOnly.has_guidance() && !Mode::CtcOnly.uses_gcn());
        assert!(!Mode::AttentionOnly.has_ctc_head());
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
    }
}
