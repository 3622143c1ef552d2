//! Experiment orchestration: corpus ingestion, suites, manifests and reports.

mod config;
mod corpus;
mod manifest;
mod output;
mod report;
mod suites;
mod svg;

pub use config::{
    CorpusSection, DefenseSection, ExperimentConfig, ModelSection, Overrides, PafSection, SeedSource, TimingSection,
    KNOWN_METRICS, SEED_ENV,
};
pub use corpus::{bundled_corpus, load_corpus, parse_corpus, select_prompts, Prompt, BUNDLED_CORPUS};
pub use manifest::{sha256_hex, FileRecord, Platform, RunManifest, SampleSeed, TimingRecord, MANIFEST_FILE};
pub use output::{
    fmt_float, parse_float, read_results, read_summary, read_table, summarize, write_results, write_summary,
    CellKey, Outcome, ResultRow, SummaryRow, CSV_SCHEMA_VERSION, RESULT_COLUMNS, SUMMARY_COLUMNS,
};
pub use report::{report, run_dirs, Check, Report, REPORT_FILE};
pub use suites::{
    fit_line, training_sequences, BypassOutput, Lab, LinearFit, PafOutput, SuiteOutput, TimingOutput, TimingReport, TimingRow,
    RESULTS_FILE, SUMMARY_FILE, TIMINGS_FILE,
};
pub use svg::{Bar, BarChart};

#[cfg(test)]
mod tests;
