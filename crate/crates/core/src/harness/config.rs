//! Experiment configuration: a TOML file, command-line overrides, and the
//! `SPLITLEAK_SEED` environment variable, resolved into one value that the
//! manifest records verbatim.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::defense::{DefenseKind, DefenseSpec, L0RankOrder};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};

pub const SEED_ENV: &str = "SPLITLEAK_SEED";

/// Metric names accepted in `metrics`.
pub const KNOWN_METRICS: [&str; 4] = ["precision", "recall", "rouge_l", "utility"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Load weights from here instead of initializing and training.
    pub checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub config: ModelConfig,
    /// Training steps applied after initialization; 0 keeps random weights.
    pub train_steps: usize,
    pub train_lr: f64,
    pub train_batch: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            checkpoint: None,
            config: ModelConfig::default(),
            train_steps: t.steps,
            train_lr: t.lr,
            train_batch: t.batch,
        }
    }
}

impl ModelSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            lr: self.train_lr,
            batch: self.train_batch,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// JSON Lines file; `None` selects the bundled corpus.
    pub path: Option<PathBuf>,
    pub prompts: usize,
    /// Prompts are truncated to this many tokens (and to the model context).
    pub max_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            prompts: 50,
            max_len: 16,
        }
    }
}

/// Settings shared by every PriPert spec in the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// Cells for `attack`, written as `kind:parameter`.
    pub specs: Vec<String>,
    /// Kinds swept over their five-level ladder by `defend-grid`.
    pub grid: Vec<DefenseKind>,
    /// Fixed defense for `q1-ablation` and `bypass`.
    pub ablation: String,
    pub steps: usize,
    pub epsilon: f64,
    pub l0_rank_order: L0RankOrder,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            specs: vec!["none".into()],
            grid: vec![
                DefenseKind::Gaussian,
                DefenseKind::ElementSparsify,
                DefenseKind::TokenSparsify,
                DefenseKind::PripertL0,
            ],
            ablation: "element-sparsify:0.5".into(),
            steps: 2,
            epsilon: 1.0,
            l0_rank_order: L0RankOrder::MaxImpactZeroed,
        }
    }
}

impl DefenseSection {
    /// Parses `text` and applies the shared PriPert settings.
    pub fn spec(&self, text: &str) -> Result<DefenseSpec> {
        let mut spec: DefenseSpec = text.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        self.finish(&mut spec);
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn finish(&self, spec: &mut DefenseSpec) {
        spec.steps = self.steps;
        spec.epsilon = self.epsilon;
        spec.l0_rank_order = self.l0_rank_order;
    }

    pub fn attack_specs(&self) -> Result<Vec<DefenseSpec>> {
        self.specs.iter().map(|s| self.spec(s)).collect()
    }

    /// A `none` baseline followed by every ladder in `grid`.
    pub fn grid_specs(&self) -> Vec<DefenseSpec> {
        let mut out = vec![DefenseSpec::none()];
        for &kind in &self.grid {
            for mut s in DefenseSpec::ladder(kind) {
                self.finish(&mut s);
                out.push(s);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PafSection {
    pub draws: usize,
    pub max_inputs: usize,
    /// `block<N>.<kind>` names; empty means every client-side layer.
    pub layers: Vec<String>,
    pub cap: usize,
}

impl Default for PafSection {
    fn default() -> Self {
        let p = crate::sensitivity::PafConfig::default();
        Self {
            draws: p.draws,
            max_inputs: p.max_inputs,
            layers: Vec::new(),
            cap: p.cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    pub trials: usize,
    /// Prompts processed per trial.
    pub batch: usize,
    pub specs: Vec<String>,
    /// Protected-row ratios for the selective PriPert runs.
    pub ratios: Vec<f64>,
    /// The PriPert spec used for the selective runs.
    pub selective: String,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            trials: 30,
            batch: 4,
            specs: vec![
                "none".into(),
                "gaussian:0.01".into(),
                "element-sparsify:0.5".into(),
                "token-sparsify:0.5".into(),
                "pripert-l0:0.5".into(),
                "pripert-l2:1".into(),
            ],
            ratios: vec![0.0, 0.05, 0.25, 1.0],
            selective: "pripert-l0:0.5".into(),
        }
    }
}

/// Where the resolved seed came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedSource {
    #[default]
    Default,
    File,
    Environment,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub metrics: Vec<String>,
    pub q1_sweep: Vec<usize>,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub attack: AttackConfig,
    pub defense: DefenseSection,
    pub paf: PafSection,
    pub timing: TimingSection,
    /// Reported in the manifest, not part of the file format.
    #[serde(skip)]
    pub seed_source: SeedSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("splitleak-out"),
            workers: 0,
            metrics: KNOWN_METRICS.iter().map(|s| s.to_string()).collect(),
            q1_sweep: vec![1, 2, 3, 4, 5],
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            attack: AttackConfig::default(),
            defense: DefenseSection::default(),
            paf: PafSection::default(),
            timing: TimingSection::default(),
            seed_source: SeedSource::Default,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub prompts: Option<usize>,
    pub max_len: Option<usize>,
    pub iterations: Option<usize>,
    pub train_steps: Option<usize>,
    pub split_point: Option<usize>,
    pub defenses: Vec<String>,
    pub q1_sweep: Vec<usize>,
    pub trials: Option<usize>,
    pub draws: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let has_seed = text.parse::<toml::Table>().map(|t| t.contains_key("seed")).unwrap_or(false);
        cfg.seed_source = if has_seed { SeedSource::File } else { SeedSource::Default };
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// Layers the file (if any), the environment seed and the flags, in
    /// that order of increasing precedence, then validates.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?;
            cfg.seed_source = SeedSource::Environment;
        }
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
            self.seed_source = SeedSource::Flag;
        }
        if let Some(p) = &ov.output_dir {
            self.output_dir = p.clone();
        }
        if let Some(w) = ov.workers {
            self.workers = w;
        }
        if let Some(p) = &ov.checkpoint {
            self.model.checkpoint = Some(p.clone());
        }
        if let Some(p) = &ov.corpus {
            self.corpus.path = Some(p.clone());
        }
        if let Some(n) = ov.prompts {
            self.corpus.prompts = n;
        }
        if let Some(n) = ov.max_len {
            self.corpus.max_len = n;
        }
        if let Some(n) = ov.iterations {
            self.attack.iterations = n;
        }
        if let Some(n) = ov.train_steps {
            self.model.train_steps = n;
        }
        if let Some(q) = ov.split_point {
            self.model.config.split_point = q;
        }
        if !ov.defenses.is_empty() {
            self.defense.specs = ov.defenses.clone();
        }
        if !ov.q1_sweep.is_empty() {
            self.q1_sweep = ov.q1_sweep.clone();
        }
        if let Some(n) = ov.trials {
            self.timing.trials = n;
        }
        if let Some(n) = ov.draws {
            self.paf.draws = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if let Some(p) = &self.model.checkpoint {
            if !p.is_file() {
                return cfg_err(format!("checkpoint {} does not exist", p.display()));
            }
        } else {
            self.model.config.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(p) = &self.corpus.path {
            if !p.is_file() {
                return cfg_err(format!("corpus {} does not exist", p.display()));
            }
        }
        if self.corpus.prompts == 0 || self.corpus.max_len == 0 {
            return cfg_err("corpus.prompts and corpus.max_len must be >= 1".into());
        }
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        for m in &self.metrics {
            if !KNOWN_METRICS.contains(&m.as_str()) {
                return cfg_err(format!("unknown metric {m:?}"));
            }
        }
        if self.q1_sweep.is_empty() {
            return cfg_err("q1_sweep is empty".into());
        }
        if self.model.checkpoint.is_none() {
            let q = self.model.config.num_blocks;
            if let Some(bad) = self.q1_sweep.iter().find(|&&q1| q1 == 0 || q1 >= q) {
                return cfg_err(format!("q1_sweep value {bad} outside [1, {q})"));
            }
        }
        self.defense.attack_specs()?;
        self.defense.spec(&self.defense.ablation)?;
        self.defense.spec(&self.timing.selective)?;
        for s in &self.timing.specs {
            self.defense.spec(s)?;
        }
        if self.timing.trials == 0 || self.timing.batch == 0 {
            return cfg_err("timing.trials and timing.batch must be >= 1".into());
        }
        if let Some(r) = self.timing.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return cfg_err(format!("timing ratio {r} outside [0, 1]"));
        }
        if self.paf.draws == 0 || self.paf.max_inputs == 0 {
            return cfg_err("paf.draws and paf.max_inputs must be >= 1".into());
        }
        for l in &self.paf.layers {
            l.parse::<crate::model::LayerRef>().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn wants(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }
}
