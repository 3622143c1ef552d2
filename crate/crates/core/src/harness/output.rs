//! Result tables. Floats are written with 17 significant digits so that a
//! written value parses back to the same bits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::defense::DefenseSpec;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, UtilityScore};

/// Bumped whenever a column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 11] = [
    "sample_id",
    "defense",
    "parameter",
    "q1",
    "status",
    "precision",
    "recall",
    "rouge_l",
    "distance",
    "recovered",
    "error",
];

pub const SUMMARY_COLUMNS: [&str; 15] = [
    "defense",
    "parameter",
    "q1",
    "n",
    "errors",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "rouge_l_mean",
    "rouge_l_std",
    "distance_mean",
    "distance_std",
    "agreement",
    "kl_divergence",
];

pub const TIMING_COLUMNS: [&str; 6] = ["sample_id", "defense", "parameter", "q1", "defense_seconds", "attack_seconds"];

pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("not a number: {s:?}")))
}

fn opt_float(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

fn parse_opt_float(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_float(s).map(Some)
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("not an integer: {s:?}")))
}

/// Identifies one experimental cell: defense kind and parameter at a split point.
#[derive(Clone, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CellKey {
    pub defense: String,
    pub parameter: f64,
    pub q1: usize,
}

impl CellKey {
    pub fn new(spec: &DefenseSpec, q1: usize) -> Self {
        Self {
            defense: spec.kind.name().to_string(),
            parameter: spec.parameter(),
            q1,
        }
    }

    fn sort_key(&self) -> (String, String, usize) {
        (self.defense.clone(), fmt_float(self.parameter), self.q1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Ok {
        precision: f64,
        recall: f64,
        rouge_l: f64,
        distance: f64,
        recovered: Vec<usize>,
    },
    Error(String),
}

/// One (sample, defense, Q1) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sample_id: usize,
    pub cell: CellKey,
    pub outcome: Outcome,
    /// Wall times go to the timing table, never into the result table.
    pub defense_seconds: f64,
    pub attack_seconds: f64,
}

impl ResultRow {
    pub fn rouge_l(&self) -> Option<f64> {
        match &self.outcome {
            Outcome::Ok { rouge_l, .. } => Some(*rouge_l),
            Outcome::Error(_) => None,
        }
    }

    pub fn recall(&self) -> Option<f64> {
        match &self.outcome {
            Outcome::Ok { recall, .. } => Some(*recall),
            Outcome::Error(_) => None,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.outcome, Outcome::Error(_))
    }

    fn record(&self) -> Vec<String> {
        let c = &self.cell;
        let head = vec![
            self.sample_id.to_string(),
            c.defense.clone(),
            fmt_float(c.parameter),
            c.q1.to_string(),
        ];
        let tail = match &self.outcome {
            Outcome::Ok {
                precision,
                recall,
                rouge_l,
                distance,
                recovered,
            } => vec![
                "ok".into(),
                fmt_float(*precision),
                fmt_float(*recall),
                fmt_float(*rouge_l),
                fmt_float(*distance),
                recovered.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
                String::new(),
            ],
            Outcome::Error(msg) => {
                let mut v = vec!["error".to_string()];
                v.extend(std::iter::repeat(String::new()).take(5));
                v.push(msg.clone());
                v
            }
        };
        head.into_iter().chain(tail).collect()
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != RESULT_COLUMNS.len() {
            return Err(Error::InvalidArgument(format!("result row has {} fields", r.len())));
        }
        let cell = CellKey {
            defense: r[1].to_string(),
            parameter: parse_float(&r[2])?,
            q1: parse_usize(&r[3])?,
        };
        let outcome = match &r[4] {
            "ok" => Outcome::Ok {
                precision: parse_float(&r[5])?,
                recall: parse_float(&r[6])?,
                rouge_l: parse_float(&r[7])?,
                distance: parse_float(&r[8])?,
                recovered: r[9].split_whitespace().map(parse_usize).collect::<Result<_>>()?,
            },
            "error" => Outcome::Error(r[10].to_string()),
            s => return Err(Error::InvalidArgument(format!("unknown row status {s:?}"))),
        };
        Ok(Self {
            sample_id: parse_usize(&r[0])?,
            cell,
            outcome,
            defense_seconds: f64::NAN,
            attack_seconds: f64::NAN,
        })
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_path(path)?)
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).from_path(path)?)
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, want: &[&str], path: &Path) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(want.iter().copied()) {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected header (schema version {CSV_SCHEMA_VERSION} expected)",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = reader(path)?;
    check_header(&mut rdr, &RESULT_COLUMNS, path)?;
    rdr.records().map(|r| ResultRow::from_record(&r?)).collect()
}

pub fn write_timings(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TIMING_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.sample_id.to_string(),
            r.cell.defense.clone(),
            fmt_float(r.cell.parameter),
            r.cell.q1.to_string(),
            fmt_float(r.defense_seconds),
            fmt_float(r.attack_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean ± std of every metric over the successful rows of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: CellKey,
    pub n: usize,
    pub errors: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub rouge_l: MeanStd,
    pub distance: MeanStd,
    pub utility: Option<UtilityScore>,
}

impl SummaryRow {
    fn record(&self) -> Vec<String> {
        let c = &self.cell;
        let (agreement, kl) = match self.utility {
            Some(u) => (Some(u.agreement), Some(u.kl_divergence)),
            None => (None, None),
        };
        vec![
            c.defense.clone(),
            fmt_float(c.parameter),
            c.q1.to_string(),
            self.n.to_string(),
            self.errors.to_string(),
            fmt_float(self.precision.mean),
            fmt_float(self.precision.std),
            fmt_float(self.recall.mean),
            fmt_float(self.recall.std),
            fmt_float(self.rouge_l.mean),
            fmt_float(self.rouge_l.std),
            fmt_float(self.distance.mean),
            fmt_float(self.distance.std),
            opt_float(agreement),
            opt_float(kl),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != SUMMARY_COLUMNS.len() {
            return Err(Error::InvalidArgument(format!("summary row has {} fields", r.len())));
        }
        let n = parse_usize(&r[3])?;
        let ms = |m: &str, s: &str| -> Result<MeanStd> {
            Ok(MeanStd {
                mean: parse_float(m)?,
                std: parse_float(s)?,
                n,
            })
        };
        let utility = match (parse_opt_float(&r[13])?, parse_opt_float(&r[14])?) {
            (Some(agreement), Some(kl_divergence)) => Some(UtilityScore {
                agreement,
                kl_divergence,
            }),
            _ => None,
        };
        Ok(Self {
            cell: CellKey {
                defense: r[0].to_string(),
                parameter: parse_float(&r[1])?,
                q1: parse_usize(&r[2])?,
            },
            n,
            errors: parse_usize(&r[4])?,
            precision: ms(&r[5], &r[6])?,
            recall: ms(&r[7], &r[8])?,
            rouge_l: ms(&r[9], &r[10])?,
            distance: ms(&r[11], &r[12])?,
            utility,
        })
    }
}

/// Groups rows by cell in first-appearance order and aggregates each group.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let k = r.cell.sort_key();
        if !groups.contains_key(&k) {
            order.push(r.cell.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|cell| {
            let g = &groups[&cell.sort_key()];
            let mut cols: [Vec<f64>; 4] = Default::default();
            let mut errors = 0;
            for r in g {
                match &r.outcome {
                    Outcome::Ok {
                        precision,
                        recall,
                        rouge_l,
                        distance,
                        ..
                    } => {
                        for (c, v) in cols.iter_mut().zip([precision, recall, rouge_l, distance]) {
                            c.push(*v);
                        }
                    }
                    Outcome::Error(_) => errors += 1,
                }
            }
            let [p, rc, rl, d] = cols.map(|c| MeanStd::of(&c));
            SummaryRow {
                cell,
                n: p.n,
                errors,
                precision: p,
                recall: rc,
                rouge_l: rl,
                distance: d,
                utility: None,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = reader(path)?;
    check_header(&mut rdr, &SUMMARY_COLUMNS, path)?;
    rdr.records().map(|r| SummaryRow::from_record(&r?)).collect()
}

/// Writes arbitrary string records under `header`.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}
