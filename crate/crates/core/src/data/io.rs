//! CSV and JSONL readers and writers for score tables.
//!
//! CSV: header `id,group,label,p0,...,p{K-1}`; lines starting with `#` are
//! comments. JSONL: one object per line with keys `id`, `group`, `label`,
//! `probs` and optional `mc` (array of per-pass vectors).

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{mean_probs, DataError, ScoreRecord, ScoreScale, ScoreTable, MISSING_GROUP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Jsonl,
}

impl TableFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

/// Column mapping for tabular input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub id: String,
    pub group: String,
    pub label: String,
    /// Score columns are `{prefix}0 .. {prefix}{K-1}`.
    pub prob_prefix: String,
    pub scale: ScoreScale,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            group: "group".into(),
            label: "label".into(),
            prob_prefix: "p".into(),
            scale: ScoreScale::Probability,
        }
    }
}

impl ColumnSchema {
    pub fn with_scale(scale: ScoreScale) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }
}

pub fn parse_score_table(path: &Path, format: TableFormat, schema: &ColumnSchema) -> Result<ScoreTable, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        TableFormat::Csv => read_csv(file, schema),
        TableFormat::Jsonl => read_jsonl(BufReader::new(file), schema),
    }
}

fn group_token(raw: &str) -> String {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        MISSING_GROUP.to_string()
    } else {
        trimmed.to_string()
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<ScoreTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(format!("missing column {name:?}")))
    };
    let id_col = column(&schema.id)?;
    let group_col = column(&schema.group)?;
    let label_col = column(&schema.label)?;

    let mut prob_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(col, h)| {
            let suffix = h.strip_prefix(schema.prob_prefix.as_str())?;
            if suffix.is_empty() || !suffix.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some((suffix.parse().ok()?, col))
        })
        .collect();
    prob_cols.sort_unstable();
    if prob_cols.is_empty() {
        return Err(DataError::Schema(format!(
            "no score columns named {}0..",
            schema.prob_prefix
        )));
    }
    if let Some((pos, (idx, _))) = prob_cols.iter().enumerate().find(|(pos, (idx, _))| pos != idx) {
        return Err(DataError::Schema(format!(
            "score columns must be {p}0..{p}{}, found {p}{idx} at position {pos}",
            prob_cols.len() - 1,
            p = schema.prob_prefix
        )));
    }
    let k = prob_cols.len();

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| DataError::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |col: usize| row.get(col).unwrap_or("");
        let label = field(label_col).parse::<usize>().map_err(|e| DataError::Parse {
            row: row_no,
            message: format!("label {:?}: {e}", field(label_col)),
        })?;
        let probs = prob_cols
            .iter()
            .map(|&(idx, col)| {
                field(col).parse::<f64>().map_err(|e| DataError::Parse {
                    row: row_no,
                    message: format!("{}{idx} {:?}: {e}", schema.prob_prefix, field(col)),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        records.push(ScoreRecord::new(field(id_col), group_token(field(group_col)), label, probs));
    }
    ScoreTable::new(records, k, schema.scale)
}

#[derive(Deserialize)]
struct JsonRecord {
    id: Value,
    #[serde(default)]
    group: Value,
    label: u64,
    #[serde(default)]
    probs: Option<Vec<f64>>,
    #[serde(default)]
    mc: Option<Vec<Vec<f64>>>,
}

fn token(value: &Value) -> String {
    match value {
        Value::Null => MISSING_GROUP.to_string(),
        Value::String(s) => group_token(s),
        other => other.to_string(),
    }
}

pub fn read_jsonl<R: BufRead>(reader: R, schema: &ColumnSchema) -> Result<ScoreTable, DataError> {
    let mut records = Vec::new();
    let mut k = None;
    for (i, line) in reader.lines().enumerate() {
        let row_no = i + 1;
        let line = line.map_err(|e| DataError::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        let id = match &raw.id {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let mut record = ScoreRecord {
            id,
            group: token(&raw.group),
            label: raw.label as usize,
            probs: raw.probs.unwrap_or_default(),
            mc_samples: raw.mc,
        };
        if record.probs.is_empty() {
            record.probs = mean_probs(&record).map_err(|e| DataError::Parse {
                row: row_no,
                message: e.to_string(),
            })?;
        }
        let width = record.probs.len();
        match k {
            None => k = Some(width),
            Some(k) if k != width => {
                return Err(DataError::Schema(format!(
                    "row {row_no} has {width} scores but earlier rows have K = {k}"
                )))
            }
            _ => {}
        }
        records.push(record);
    }
    let k = k.ok_or_else(|| DataError::Schema("empty JSONL input: cannot infer K".into()))?;
    ScoreTable::new(records, k, schema.scale)
}

/// Writes `table` in the given format. CSV output cannot carry Monte-Carlo samples.
pub fn write_score_table<W: Write>(table: &ScoreTable, mut out: W, format: TableFormat) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: "<output>".into(),
        source,
    };
    match format {
        TableFormat::Csv => {
            if table.records().iter().any(|r| r.mc_samples.is_some()) {
                return Err(DataError::Schema(
                    "CSV cannot hold Monte-Carlo samples; write JSONL instead".into(),
                ));
            }
            let mut header = String::from("id,group,label");
            for c in 0..table.k() {
                header.push_str(&format!(",p{c}"));
            }
            writeln!(out, "{header}").map_err(io_err)?;
            let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            for r in table.records() {
                let mut fields = vec![r.id.clone(), r.group.clone(), r.label.to_string()];
                fields.extend(r.probs.iter().map(|p| p.to_string()));
                wtr.write_record(&fields).map_err(|e| DataError::Io {
                    path: "<output>".into(),
                    source: e.into(),
                })?;
            }
            wtr.flush().map_err(io_err)?;
        }
        TableFormat::Jsonl => {
            for r in table.records() {
                let line = serde_json::to_string(r).map_err(|e| DataError::Io {
                    path: "<output>".into(),
                    source: e.into(),
                })?;
                writeln!(out, "{line}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}
