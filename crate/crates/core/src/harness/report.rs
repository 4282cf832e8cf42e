use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{MethodId, SignMode};
use crate::error::{Error, LoadError, Result};
use crate::metrics::{aggregate, best_sign_mode, AggregateRow, MetricRecord};

pub const METRICS_HEADER: [&str; 7] = ["example_id", "method", "sign_mode", "loc", "hit", "degradation", "skipped"];
pub const REPORT_HEADER: [&str; 8] = ["method", "sign_mode", "loc", "pointing", "degradation", "average", "examples", "skipped"];
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";

/// Per-example records as CSV. Floats use the shortest exact representation so
/// aggregates can be recomputed from the file.
pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_io(path, e))?;
    for r in records {
        let row = [
            r.example_id.to_string(),
            r.method.name().to_string(),
            r.sign_mode.name().to_string(),
            r.loc.to_string(),
            u8::from(r.hit).to_string(),
            r.degradation.map(|d| d.to_string()).unwrap_or_default(),
            u8::from(r.skipped()).to_string(),
        ];
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let malformed = |reason: String| Error::from(LoadError::MalformedManifest { path: path.to_path_buf(), reason });
    let header = r.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(malformed(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| malformed(format!("record {line}: bad {what} `{}`", rec.iter().collect::<Vec<_>>().join(",")));
        let flag = |i: usize, what: &str| match field(i) {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(what)),
        };
        let skipped = flag(6, "skipped flag")?;
        let degradation = if field(5).is_empty() { None } else { Some(field(5).parse().map_err(|_| bad("degradation"))?) };
        if skipped != degradation.is_none() {
            return Err(bad("skipped flag"));
        }
        out.push(MetricRecord {
            example_id: field(0).parse().map_err(|_| bad("example id"))?,
            method: field(1).parse().map_err(|_| bad("method"))?,
            sign_mode: field(2).parse().map_err(|_| bad("sign mode"))?,
            loc: field(3).parse().map_err(|_| bad("loc"))?,
            hit: flag(4, "hit")?,
            degradation,
        });
    }
    Ok(out)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    pub seed: u64,
    /// Distinct examples with at least one record.
    pub examples: usize,
    pub rows: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    /// One row per method, in its better sign mode.
    pub rows: Vec<AggregateRow>,
    /// Both sign modes of every method, averaged over repeats.
    pub all_rows: Vec<AggregateRow>,
    pub repeats: Vec<RepeatStats>,
}

impl ResultsTable {
    /// Aggregates each repeat's records, then takes the unweighted mean of the
    /// repeat aggregates.
    pub fn from_repeats(repeats: &[(u64, Vec<MetricRecord>)]) -> Self {
        let stats: Vec<RepeatStats> = repeats
            .iter()
            .map(|(seed, records)| RepeatStats {
                seed: *seed,
                examples: records.iter().map(|r| r.example_id).collect::<BTreeSet<_>>().len(),
                rows: aggregate(records),
            })
            .collect();
        let all_rows = mean_over_repeats(stats.iter().map(|s| s.rows.as_slice()));
        ResultsTable { rows: best_sign_mode(&all_rows), all_rows, repeats: stats }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.repeats.iter().map(|r| r.seed).collect()
    }

    pub fn row(&self, method: MethodId) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Mean of each (method, sign mode) row over the repeats that have it. The
/// average column is recomputed from the three means; counts are summed.
pub fn mean_over_repeats<'a>(repeats: impl IntoIterator<Item = &'a [AggregateRow]>) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(MethodId, SignMode), Vec<&AggregateRow>> = BTreeMap::new();
    for rows in repeats {
        for row in rows {
            groups.entry((row.method, row.sign_mode)).or_default().push(row);
        }
    }
    groups
        .into_iter()
        .map(|((method, sign_mode), rows)| {
            let n = rows.len() as f64;
            let mean = |f: fn(&AggregateRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            AggregateRow {
                examples: rows.iter().map(|r| r.examples).sum(),
                skipped: rows.iter().map(|r| r.skipped).sum(),
                ..AggregateRow::new(method, sign_mode, mean(|r| r.loc), mean(|r| r.pointing), mean(|r| r.degradation))
            }
        })
        .collect()
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn report_cells(row: &AggregateRow) -> [String; 8] {
    [
        row.method.name().to_string(),
        row.sign_mode.name().to_string(),
        fmt6(row.loc),
        fmt6(row.pointing),
        fmt6(row.degradation),
        fmt6(row.average),
        row.examples.to_string(),
        row.skipped.to_string(),
    ]
}

pub fn report_csv(rows: &[AggregateRow]) -> String {
    let mut out = REPORT_HEADER.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&report_cells(row).join(","));
        out.push('\n');
    }
    out
}

pub fn report_markdown(rows: &[AggregateRow]) -> String {
    let mut out = format!("| {} |\n", REPORT_HEADER.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(REPORT_HEADER.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", report_cells(row).join(" | ")));
    }
    out
}

/// Writes `report.csv` and `report.md` (one row per method, better sign mode).
pub fn render_report(table: &ResultsTable, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let md_path = dir.join(REPORT_MD);
    std::fs::write(&csv_path, report_csv(&table.rows)).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&md_path, report_markdown(&table.rows)).map_err(|e| Error::io(&md_path, e))?;
    Ok((csv_path, md_path))
}

/// Cells of every data row of a report table (CSV or Markdown), header excluded.
pub fn parse_report(text: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let markdown = text.trim_start().starts_with('|');
    let split = |line: &str| -> Vec<String> {
        if markdown {
            line.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
        } else {
            line.split(',').map(str::to_string).collect()
        }
    };
    let header = lines.next().map(split).unwrap_or_default();
    if header.iter().map(String::as_str).ne(REPORT_HEADER) {
        return Err(Error::Input(format!("unexpected report header {header:?}")));
    }
    if markdown {
        lines.next();
    }
    Ok(lines.map(split).collect())
}
