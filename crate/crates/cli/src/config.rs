//! Resolved command-line configuration: defaults, then the config file, then
//! flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use gtc_core::dataset::CorpusSpec;
use gtc_core::trainer::{Ini, ModelConfig, TrainConfig};

const SECTIONS: &[&str] = &["corpus", "model", "encoder", "guidance", "gcn", "train", "paths"];

const CORPUS_KEYS: &[&str] = &[
    "alphabet",
    "count",
    "min_len",
    "max_len",
    "noise",
    "jitter",
    "spacing_min",
    "spacing_max",
    "seed",
    "height",
    "max_width",
    "glyph_scale",
    "frame_stride",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.gtcc".into(),
            checkpoint: "model.gtck".into(),
            metrics: "metrics.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl CliConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        if let Some(s) = ini.sections().find(|s| !SECTIONS.contains(s)) {
            bail!("unknown config section [{s}]");
        }
        ini.check_keys("corpus", CORPUS_KEYS)?;
        ini.check_keys("paths", &["corpus", "checkpoint", "metrics"])?;
        let mut c = CorpusSpec::default();
        if let Some(a) = ini.get("corpus", "alphabet") {
            c.alphabet = a.to_string();
        }
        c.count = ini.parsed("corpus", "count")?.unwrap_or(c.count);
        c.min_len = ini.parsed("corpus", "min_len")?.unwrap_or(c.min_len);
        c.max_len = ini.parsed("corpus", "max_len")?.unwrap_or(c.max_len);
        c.noise = ini.parsed("corpus", "noise")?.unwrap_or(c.noise);
        c.jitter = ini.parsed("corpus", "jitter")?.unwrap_or(c.jitter);
        c.spacing_min = ini.parsed("corpus", "spacing_min")?.unwrap_or(c.spacing_min);
        c.spacing_max = ini.parsed("corpus", "spacing_max")?.unwrap_or(c.spacing_max);
        c.seed = ini.parsed("corpus", "seed")?.unwrap_or(c.seed);
        c.height = ini.parsed("corpus", "height")?.unwrap_or(c.height);
        c.max_width = ini.parsed("corpus", "max_width")?.unwrap_or(c.max_width);
        c.glyph_scale = ini.parsed("corpus", "glyph_scale")?.unwrap_or(c.glyph_scale);
        c.frame_stride = ini.parsed("corpus", "frame_stride")?.unwrap_or(c.frame_stride);
        let mut paths = Paths::default();
        for (key, slot) in [
            ("corpus", &mut paths.corpus),
            ("checkpoint", &mut paths.checkpoint),
            ("metrics", &mut paths.metrics),
        ] {
            if let Some(p) = ini.get("paths", key) {
                *slot = p.into();
            }
        }
        Ok(Self {
            corpus: c,
            model: ModelConfig::from_ini(ini)?,
            train: TrainConfig::from_ini(ini)?,
            paths,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let ini = Ini::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Self::from_ini(&ini).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::new();
        let c = &self.corpus;
        ini.set("corpus", "alphabet", &c.alphabet);
        ini.set("corpus", "count", c.count);
        ini.set("corpus", "min_len", c.min_len);
        ini.set("corpus", "max_len", c.max_len);
        ini.set("corpus", "noise", c.noise);
        ini.set("corpus", "jitter", c.jitter);
        ini.set("corpus", "spacing_min", c.spacing_min);
        ini.set("corpus", "spacing_max", c.spacing_max);
        ini.set("corpus", "seed", c.seed);
        ini.set("corpus", "height", c.height);
        ini.set("corpus", "max_width", c.max_width);
        ini.set("corpus", "glyph_scale", c.glyph_scale);
        ini.set("corpus", "frame_stride", c.frame_stride);
        self.model.write_ini(&mut ini);
        self.train.write_ini(&mut ini);
        ini.set("paths", "corpus", self.paths.corpus.display());
        ini.set("paths", "checkpoint", self.paths.checkpoint.display());
        ini.set("paths", "metrics", self.paths.metrics.display());
        ini
    }
}
