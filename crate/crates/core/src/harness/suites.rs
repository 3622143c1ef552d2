use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::corpus::{bundled_corpus, load_corpus, select_prompts, Prompt};
use super::manifest::{sha256_hex, RunManifest, SampleSeed};
use super::output::{
    fmt_float, summarize, write_results, write_summary, write_table, write_timings, CellKey, Outcome, ResultRow,
    SummaryRow,
};
use super::svg::{Bar, BarChart};
use crate::attack::actinv;
use crate::defense::{apply_defense, DefenseContext, DefenseSpec};
use crate::error::{Error, Result};
use crate::metrics::{recon_score, utility_proxy, MeanStd};
use crate::model::{checkpoint::encode_checkpoint, load_checkpoint, toy_train, LayerRef, Precision, SplitModel, Tokenizer};
use crate::rng::Rng;
use crate::sensitivity::{bypass_study, paf_estimate, BypassStudy, PafConfig, PafReport};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMINGS_FILE: &str = "timings.csv";

const UTILITY_STREAM: u64 = 0x7574_696c;
const PAF_STREAM: u64 = 0x7061_6600;
const BYPASS_STREAM: u64 = 0x6279_7073;

/// Everything a suite needs: resolved config, model, tokenized prompts and
/// a bounded worker pool.
pub struct Lab {
    pub config: ExperimentConfig,
    pub model: SplitModel,
    pub tokenizer: Tokenizer,
    pub corpus: Vec<String>,
    pub prompts: Vec<Prompt>,
    pub model_sha256: String,
    /// Seconds spent loading or training the model.
    pub setup_seconds: f64,
    pool: rayon::ThreadPool,
}

impl Lab {
    pub fn prepare(mut config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let start = Instant::now();
        let corpus = match &config.corpus.path {
            Some(p) => load_corpus(p)?,
            None => bundled_corpus(),
        };
        if corpus.is_empty() {
            return Err(Error::Config("corpus has no prompts".into()));
        }
        let mut model = match &config.model.checkpoint {
            Some(p) => load_checkpoint(p)?,
            None => SplitModel::init(config.model.config.clone())?,
        };
        let mc = model.config().clone();
        let tokenizer = Tokenizer::build(&corpus, mc.vocab_size)?;
        if config.model.checkpoint.is_none() && config.model.train_steps > 0 {
            let seqs = training_sequences(&corpus, &tokenizer, mc.max_seq_len);
            toy_train(&mut model, &seqs, &config.model.train_config(mc.seed))?;
        }
        if config.model.checkpoint.is_some() {
            if config.model.config.split_point != mc.split_point
                && config.model.config.split_point < mc.num_blocks
            {
                model = model.with_split(config.model.config.split_point)?;
            }
            config.model.config = model.config().clone();
            let q = config.model.config.num_blocks;
            if let Some(bad) = config.q1_sweep.iter().find(|&&q1| q1 == 0 || q1 >= q) {
                return Err(Error::Config(format!("q1_sweep value {bad} outside [1, {q})")));
            }
        }
        let max_len = config.corpus.max_len.min(mc.max_seq_len);
        let prompts = select_prompts(&corpus, &tokenizer, config.corpus.prompts, max_len);
        if prompts.is_empty() {
            return Err(Error::Config("no prompt tokenizes to a nonempty sequence".into()));
        }
        let model_sha256 = sha256_hex(&encode_checkpoint(&model, Precision::F64));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            config,
            model,
            tokenizer,
            corpus,
            prompts,
            model_sha256,
            setup_seconds: start.elapsed().as_secs_f64(),
            pool,
        })
    }

    pub fn root_rng(&self) -> Rng {
        Rng::new(self.config.seed)
    }

    /// Stream for prompt `p`, shared by every cell so that cells differ only
    /// in the defense and split point.
    pub fn sample_rng(&self, p: &Prompt) -> Rng {
        self.root_rng().derive(p.id as u64)
    }

    fn ids(&self) -> Vec<Vec<usize>> {
        self.prompts.iter().map(|p| p.ids.clone()).collect()
    }

    fn out_dir(&self, command: &str) -> Result<PathBuf> {
        let dir = self.config.output_dir.join(command);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, &self.config, self.model_sha256.clone());
        m.samples = self
            .prompts
            .iter()
            .map(|p| SampleSeed {
                sample_id: p.id,
                seed: self.sample_rng(p).seed(),
            })
            .collect();
        m.time("setup", self.setup_seconds);
        m
    }

    fn run_one(&self, model: &SplitModel, spec: &DefenseSpec, p: &Prompt) -> ResultRow {
        let mut rng = self.sample_rng(p);
        let cell = CellKey::new(spec, model.config().split_point);
        let mut times = (f64::NAN, f64::NAN);
        let outcome = (|| -> Result<Outcome> {
            let h0 = model.embed(&p.ids)?;
            let h = model.client_forward(&h0)?;
            let ctx = DefenseContext::new(model, &h0);
            let t = Instant::now();
            let hd = apply_defense(&h, spec, Some(&ctx), &mut rng)?;
            times.0 = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let res = actinv(model, &hd, &self.config.attack, &mut rng, None)?;
            times.1 = t.elapsed().as_secs_f64();
            let s = recon_score(&res.tokens, &p.ids)?;
            Ok(Outcome::Ok {
                precision: s.precision,
                recall: s.recall,
                rouge_l: s.rouge_l,
                distance: res.distance,
                recovered: res.tokens,
            })
        })()
        .unwrap_or_else(|e| Outcome::Error(e.to_string()));
        ResultRow {
            sample_id: p.id,
            cell,
            outcome,
            defense_seconds: times.0,
            attack_seconds: times.1,
        }
    }

    /// Runs every (cell, prompt) pair on the pool. Rows come back ordered by
    /// cell, then by prompt.
    pub fn run_cells(&self, cells: &[(SplitModel, DefenseSpec)]) -> Vec<ResultRow> {
        let items: Vec<(usize, &Prompt)> = (0..cells.len())
            .flat_map(|c| self.prompts.iter().map(move |p| (c, p)))
            .collect();
        self.pool.install(|| {
            items
                .par_iter()
                .map(|&(c, p)| self.run_one(&cells[c].0, &cells[c].1, p))
                .collect()
        })
    }

    fn emit_rows(&self, command: &str, rows: Vec<ResultRow>, mut summary: Vec<SummaryRow>, extra: Vec<PathBuf>, started: Instant) -> Result<SuiteOutput> {
        let dir = self.out_dir(command)?;
        if summary.is_empty() {
            summary = summarize(&rows);
        }
        write_results(&dir.join(RESULTS_FILE), &rows)?;
        write_summary(&dir.join(SUMMARY_FILE), &summary)?;
        write_timings(&dir.join(TIMINGS_FILE), &rows)?;
        let mut manifest = self.manifest(command);
        for f in [RESULTS_FILE, SUMMARY_FILE, TIMINGS_FILE] {
            manifest.add_file(&dir, f)?;
        }
        for f in extra {
            manifest.add_file(&dir, f)?;
        }
        let defense: f64 = rows.iter().map(|r| r.defense_seconds).filter(|t| t.is_finite()).sum();
        let attack: f64 = rows.iter().map(|r| r.attack_seconds).filter(|t| t.is_finite()).sum();
        manifest.time("defense-total", defense);
        manifest.time("attack-total", attack);
        manifest.time("wall", started.elapsed().as_secs_f64());
        manifest.write(&dir)?;
        let errors = rows.iter().filter(|r| r.is_error()).count();
        Ok(SuiteOutput {
            dir,
            rows,
            summary,
            manifest,
            errors,
        })
    }

    fn cells_at_split(&self, specs: Vec<DefenseSpec>) -> Vec<(SplitModel, DefenseSpec)> {
        specs.into_iter().map(|s| (self.model.clone(), s)).collect()
    }

    /// Attack under each configured defense at the model's split point.
    pub fn run_attack_suite(&self) -> Result<SuiteOutput> {
        let started = Instant::now();
        let cells = self.cells_at_split(self.config.defense.attack_specs()?);
        let rows = self.run_cells(&cells);
        self.emit_rows("attack", rows, Vec::new(), Vec::new(), started)
    }

    /// Every level of every grid kind, plus a `none` baseline, with the
    /// utility proxy per cell and the privacy/utility frontier.
    pub fn run_defense_grid(&self) -> Result<SuiteOutput> {
        let started = Instant::now();
        let specs = self.config.defense.grid_specs();
        let cells = self.cells_at_split(specs.clone());
        let rows = self.run_cells(&cells);
        let mut summary = summarize(&rows);
        if self.config.wants("utility") {
            let ids = self.ids();
            let urng = self.root_rng().derive(UTILITY_STREAM);
            let utils: Vec<Result<_>> = self.pool.install(|| {
                specs
                    .par_iter()
                    .map(|s| utility_proxy(&self.model, &ids, s, &urng))
                    .collect()
            });
            for (row, u) in summary.iter_mut().zip(utils) {
                row.utility = Some(u?);
            }
        }
        let dir = self.out_dir("defend-grid")?;
        let frontier = frontier_rows(&summary);
        write_table(
            &dir.join("frontier.csv"),
            &["defense", "parameter", "rouge_l_mean", "agreement", "kl_divergence", "pareto"],
            &frontier,
        )?;
        self.emit_rows("defend-grid", rows, summary, vec!["frontier.csv".into()], started)
    }

    /// One cell per split point under the fixed ablation defense.
    pub fn run_q1_ablation(&self) -> Result<SuiteOutput> {
        let started = Instant::now();
        let spec = self.config.defense.spec(&self.config.defense.ablation)?;
        let cells = self
            .config
            .q1_sweep
            .iter()
            .map(|&q1| Ok((self.model.with_split(q1)?, spec.clone())))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.run_cells(&cells);
        self.emit_rows("q1-ablation", rows, Vec::new(), Vec::new(), started)
    }

    fn layers(&self) -> Result<Vec<LayerRef>> {
        if self.config.paf.layers.is_empty() {
            Ok(self.model.client_layers())
        } else {
            self.config.paf.layers.iter().map(|l| l.parse()).collect()
        }
    }

    fn paf_config(&self) -> PafConfig {
        PafConfig {
            draws: self.config.paf.draws,
            max_inputs: self.config.paf.max_inputs,
            cap: self.config.paf.cap,
        }
    }

    pub fn run_paf_study(&self) -> Result<PafOutput> {
        let started = Instant::now();
        let layers = self.layers()?;
        let ids = self.ids();
        let cfg = self.paf_config();
        let root = self.root_rng().derive(PAF_STREAM);
        let reports = self.pool.install(|| {
            layers
                .iter()
                .enumerate()
                .map(|(k, &l)| paf_estimate(&self.model, l, &ids, &cfg, &root.derive(k as u64)))
                .collect::<Result<Vec<PafReport>>>()
        })?;
        let dir = self.out_dir("paf")?;
        let rows: Vec<Vec<String>> = reports
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    fmt_float(r.mean),
                    fmt_float(r.stderr),
                    r.draws.to_string(),
                    r.inputs.to_string(),
                    fmt_float(r.max_paf),
                    fmt_float(r.aligned_paf),
                    fmt_float(r.spectral_norm),
                    fmt_float(r.eig_min),
                    fmt_float(r.eig_max),
                    r.degenerate.to_string(),
                ]
            })
            .collect();
        write_table(&dir.join("paf.csv"), &PAF_COLUMNS, &rows)?;
        let chart = BarChart {
            title: "PAF per client-side layer (mean, Max-PAF)".into(),
            y_label: "amplification".into(),
            bars: reports
                .iter()
                .map(|r| Bar {
                    label: r.layer.to_string(),
                    value: r.mean,
                    secondary: Some(r.max_paf),
                })
                .collect(),
        };
        std::fs::write(dir.join("paf.svg"), chart.to_svg())?;
        let mut manifest = self.manifest("paf");
        manifest.add_file(&dir, "paf.csv")?;
        manifest.add_file(&dir, "paf.svg")?;
        manifest.time("wall", started.elapsed().as_secs_f64());
        manifest.write(&dir)?;
        Ok(PafOutput { dir, reports, manifest })
    }

    pub fn run_bypass_study(&self) -> Result<BypassOutput> {
        let started = Instant::now();
        let layers = self.layers()?;
        let spec = self.config.defense.spec(&self.config.defense.ablation)?;
        let ids = self.ids();
        let cfg = self.paf_config();
        let rng = self.root_rng().derive(BYPASS_STREAM);
        let study = self
            .pool
            .install(|| bypass_study(&self.model, &layers, &ids, &self.config.attack, &spec, &cfg, &rng))?;
        let dir = self.out_dir("bypass")?;
        let rows: Vec<Vec<String>> = study
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    fmt_float(r.paf),
                    fmt_float(r.paf_stderr),
                    fmt_float(r.rouge_l_mean),
                    fmt_float(r.rouge_l_std),
                ]
            })
            .collect();
        write_table(&dir.join("bypass.csv"), &BYPASS_COLUMNS, &rows)?;
        std::fs::write(dir.join("bypass.json"), serde_json::to_string_pretty(&study)? + "\n")?;
        let chart = BarChart {
            title: format!("Bypassed-layer attack ROUGE-L (Pearson R = {:.3})", study.r),
            y_label: "ROUGE-L".into(),
            bars: study
                .rows
                .iter()
                .map(|r| Bar {
                    label: r.layer.to_string(),
                    value: r.rouge_l_mean,
                    secondary: None,
                })
                .collect(),
        };
        std::fs::write(dir.join("bypass.svg"), chart.to_svg())?;
        let mut manifest = self.manifest("bypass");
        for f in ["bypass.csv", "bypass.json", "bypass.svg"] {
            manifest.add_file(&dir, f)?;
        }
        manifest.time("wall", started.elapsed().as_secs_f64());
        manifest.write(&dir)?;
        Ok(BypassOutput { dir, study, manifest })
    }
}

/// Every corpus line that tokenizes to something, truncated to `max_len`.
pub fn training_sequences(corpus: &[String], tok: &Tokenizer, max_len: usize) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .map(|l| {
            let mut ids = tok.encode(l);
            ids.truncate(max_len);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect()
}

pub const PAF_COLUMNS: [&str; 11] = [
    "layer",
    "mean",
    "stderr",
    "draws",
    "inputs",
    "max_paf",
    "aligned_paf",
    "spectral_norm",
    "eig_min",
    "eig_max",
    "degenerate",
];

pub const BYPASS_COLUMNS: [&str; 5] = ["layer", "paf", "paf_stderr", "rouge_l_mean", "rouge_l_std"];

/// A cell is on the frontier when no other cell has both lower ROUGE-L and
/// higher agreement (with at least one strict).
fn frontier_rows(summary: &[SummaryRow]) -> Vec<Vec<String>> {
    let pts: Vec<(f64, f64)> = summary
        .iter()
        .map(|s| (s.rouge_l.mean, s.utility.map(|u| u.agreement).unwrap_or(f64::NAN)))
        .collect();
    summary
        .iter()
        .zip(&pts)
        .map(|(s, &(r, a))| {
            let dominated = pts
                .iter()
                .any(|&(r2, a2)| r2 <= r && a2 >= a && (r2 < r || a2 > a));
            vec![
                s.cell.defense.clone(),
                fmt_float(s.cell.parameter),
                fmt_float(r),
                s.utility.map(|u| fmt_float(u.agreement)).unwrap_or_default(),
                s.utility.map(|u| fmt_float(u.kl_divergence)).unwrap_or_default(),
                (!dominated && a.is_finite()).to_string(),
            ]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SuiteOutput {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub manifest: RunManifest,
    /// Rows whose sample failed.
    pub errors: usize,
}

impl SuiteOutput {
    pub fn cell(&self, defense: &str, parameter: f64, q1: usize) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.cell.defense == defense && s.cell.parameter == parameter && s.cell.q1 == q1)
    }

    pub fn results_path(&self) -> PathBuf {
        self.dir.join(RESULTS_FILE)
    }
}

#[derive(Clone, Debug)]
pub struct PafOutput {
    pub dir: PathBuf,
    pub reports: Vec<PafReport>,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug)]
pub struct BypassOutput {
    pub dir: PathBuf,
    pub study: BypassStudy,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub defense: String,
    pub parameter: f64,
    /// Fraction of token rows protected; `None` outside the selective runs.
    pub protected_ratio: Option<f64>,
    pub trials: usize,
    /// Client-side seconds per 1000 tokens.
    pub per_1k: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub a: f64,
    pub b: f64,
    /// (ratio, measured mean, fitted) per selective run.
    pub residuals: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    pub fit: Option<LinearFit>,
    /// Seconds per 1000 tokens with no defense.
    pub baseline: f64,
}

impl TimingReport {
    pub fn selective(&self, ratio: f64) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.protected_ratio == Some(ratio))
    }
}

/// Least-squares line through `(x, y)` points.
pub fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

const TIMING_STREAM: u64 = 0x7469_6d65;

impl Lab {
    /// Client-side seconds per 1000 tokens for each trial. With `ratio`, the
    /// first `ceil(ratio·L)` rows of each prompt are protected.
    fn time_spec(&self, spec: &DefenseSpec, ratio: Option<f64>, trials: usize) -> Result<Vec<f64>> {
        let batch: Vec<&Prompt> = self.prompts.iter().take(self.config.timing.batch).collect();
        let tokens: usize = batch.iter().map(|p| p.ids.len()).sum();
        let specs: Vec<DefenseSpec> = batch
            .iter()
            .map(|p| match ratio {
                Some(r) => {
                    let k = ((r * p.ids.len() as f64) - 1e-9).ceil().max(0.0) as usize;
                    spec.clone().with_protected((0..k.min(p.ids.len())).collect())
                }
                None => spec.clone(),
            })
            .collect();
        let mut rng = self.root_rng().derive(TIMING_STREAM);
        let mut out = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t = Instant::now();
            for (p, s) in batch.iter().zip(&specs) {
                let h0 = self.model.embed(&p.ids)?;
                let h = self.model.client_forward(&h0)?;
                let ctx = DefenseContext::new(&self.model, &h0);
                std::hint::black_box(apply_defense(&h, s, Some(&ctx), &mut rng)?);
            }
            out.push(t.elapsed().as_secs_f64() * 1000.0 / tokens as f64);
        }
        Ok(out)
    }

    /// Per-defense client cost and the selective-protection cost model.
    /// Runs on the calling thread so trials do not compete for cores.
    pub fn run_timing(&self) -> Result<TimingOutput> {
        let started = Instant::now();
        let tc = &self.config.timing;
        let mut rows = Vec::new();
        let baseline_spec = DefenseSpec::none();
        let base = self.time_spec(&baseline_spec, None, tc.trials)?;
        let baseline = MeanStd::of(&base).mean;
        for text in &tc.specs {
            let spec = self.config.defense.spec(text)?;
            let times = if spec == baseline_spec { base.clone() } else { self.time_spec(&spec, None, tc.trials)? };
            rows.push(TimingRow {
                label: spec.to_string(),
                defense: spec.kind.name().into(),
                parameter: spec.parameter(),
                protected_ratio: None,
                trials: times.len(),
                per_1k: MeanStd::of(&times),
            });
        }
        let selective = self.config.defense.spec(&tc.selective)?;
        let mut points = Vec::new();
        for &r in &tc.ratios {
            let times = self.time_spec(&selective, Some(r), tc.trials)?;
            points.extend(times.iter().map(|&t| (r, t)));
            rows.push(TimingRow {
                label: format!("{selective}@{r}"),
                defense: selective.kind.name().into(),
                parameter: selective.parameter(),
                protected_ratio: Some(r),
                trials: times.len(),
                per_1k: MeanStd::of(&times),
            });
        }
        let fit = fit_line(&points).map(|(a, b)| LinearFit {
            a,
            b,
            residuals: rows
                .iter()
                .filter_map(|row| row.protected_ratio.map(|r| (r, row.per_1k.mean, a + b * r)))
                .collect(),
        });
        let report = TimingReport { rows, fit, baseline };
        let dir = self.out_dir("timing")?;
        let table: Vec<Vec<String>> = report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.defense.clone(),
                    fmt_float(r.parameter),
                    r.protected_ratio.map(fmt_float).unwrap_or_default(),
                    r.trials.to_string(),
                    fmt_float(r.per_1k.mean),
                    fmt_float(r.per_1k.std),
                ]
            })
            .collect();
        write_table(
            &dir.join("timing.csv"),
            &["label", "defense", "parameter", "protected_ratio", "trials", "seconds_per_1k_mean", "seconds_per_1k_std"],
            &table,
        )?;
        std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        let mut manifest = self.manifest("timing");
        manifest.add_file(&dir, "timing.csv")?;
        manifest.add_file(&dir, "timing.json")?;
        manifest.time("wall", started.elapsed().as_secs_f64());
        manifest.write(&dir)?;
        Ok(TimingOutput { dir, report, manifest })
    }
}

#[derive(Clone, Debug)]
pub struct TimingOutput {
    pub dir: PathBuf,
    pub report: TimingReport,
    pub manifest: RunManifest,
}
