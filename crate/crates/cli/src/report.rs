//! Per-instance CSV records and the tables recomputed from them.

use std::fmt::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use gase::trainer::mean_gap;

use crate::CliError;

pub const PER_INSTANCE_FILE: &str = "per_instance.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const TABLE_FILE: &str = "table.txt";
pub const MODEL_METHOD: &str = "gase";
pub const NN_METHOD: &str = "nearest_neighbor";

/// One decoded instance of an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub method: String,
    pub length: f64,
    pub reference: Option<f64>,
    pub gap_pct: Option<f64>,
}

/// Total wall time of one method over the whole set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub method: String,
    pub instances: usize,
    pub wall_time_s: f64,
}

/// One CVRPLIB file under one method, lengths in the library's integer
/// distance convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryRecord {
    pub instance: String,
    pub customers: usize,
    pub method: String,
    pub length: f64,
    pub optimum: Option<f64>,
    pub gap_pct: Option<f64>,
}

pub fn gap_pct(length: f64, reference: Option<f64>) -> Option<f64> {
    reference.map(|r| 100.0 * (length - r) / r)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(err)
}

/// Reference lengths, one row per instance in set order, from a column
/// named `reference` or `length`.
pub fn read_refs(path: &Path) -> Result<Vec<f64>, CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let headers = r.headers().map_err(err)?.clone();
    let col = ["reference", "length"]
        .iter()
        .find_map(|want| headers.iter().position(|h| h.trim() == *want))
        .ok_or_else(|| CliError::Data(format!("{}: no `reference` or `length` column", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(err)?;
        let field = rec.get(col).unwrap_or("").trim();
        let v: f64 = field
            .parse()
            .map_err(|_| CliError::Data(format!("{}: line {}: bad reference {field:?}", path.display(), i + 2)))?;
        if v.is_nan() || v <= 0.0 {
            return Err(CliError::Data(format!("{}: line {}: reference must be positive", path.display(), i + 2)));
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetRow {
    pub method: String,
    pub mean_length: f64,
    pub gap_pct: Option<f64>,
    pub wall_time_s: f64,
}

/// Per-method mean length, gap of means against the references (blank
/// unless every instance has one) and total time.
pub fn set_rows(records: &[InstanceRecord], timings: &[TimingRecord]) -> Vec<SetRow> {
    let mut by_method: IndexMap<&str, Vec<&InstanceRecord>> = IndexMap::new();
    for r in records {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, rs)| {
            let lengths: Vec<f64> = rs.iter().map(|r| r.length).collect();
            let refs: Option<Vec<f64>> = rs.iter().map(|r| r.reference).collect();
            let wall_time_s = timings.iter().filter(|t| t.method == method).map(|t| t.wall_time_s).sum();
            SetRow {
                method: method.to_string(),
                mean_length: lengths.iter().sum::<f64>() / lengths.len() as f64,
                gap_pct: refs.map(|r| 100.0 * mean_gap(&lengths, &r)),
                wall_time_s,
            }
        })
        .collect()
}

pub fn render_set_table(rows: &[SetRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>10} {:>8} {:>10}", "Method", "Length", "Gap(%)", "Time");
    for r in rows {
        let gap = r.gap_pct.map(|g| format!("{g:.2}")).unwrap_or_default();
        let _ = writeln!(s, "{:<18} {:>10.4} {:>8} {:>9.2}s", r.method, r.mean_length, gap, r.wall_time_s);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct LibraryRow {
    pub instance: String,
    pub customers: usize,
    pub optimum: Option<f64>,
    /// (length, gap) per method, in column order.
    pub cells: Vec<(f64, Option<f64>)>,
}

/// Per-file rows plus the average gap of each method over files with a
/// known optimum.
pub fn library_rows(records: &[LibraryRecord]) -> (Vec<String>, Vec<LibraryRow>, Vec<Option<f64>>) {
    let mut methods: Vec<String> = Vec::new();
    let mut rows: IndexMap<&str, LibraryRow> = IndexMap::new();
    for r in records {
        let col = match methods.iter().position(|m| *m == r.method) {
            Some(c) => c,
            None => {
                methods.push(r.method.clone());
                methods.len() - 1
            }
        };
        let row = rows.entry(r.instance.as_str()).or_insert_with(|| LibraryRow {
            instance: r.instance.clone(),
            customers: r.customers,
            optimum: r.optimum,
            cells: Vec::new(),
        });
        if row.cells.len() <= col {
            row.cells.resize(col + 1, (f64::NAN, None));
        }
        row.cells[col] = (r.length, gap_pct(r.length, r.optimum));
    }
    let rows: Vec<LibraryRow> = rows.into_values().collect();
    let averages = (0..methods.len())
        .map(|c| {
            let gaps: Vec<f64> = rows.iter().filter_map(|r| r.cells.get(c).and_then(|x| x.1)).collect();
            (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
        })
        .collect();
    (methods, rows, averages)
}

pub fn render_library_table(methods: &[String], rows: &[LibraryRow], averages: &[Option<f64>]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<14} {:>9} {:>9}", "Instance", "Customers", "Optimal");
    for m in methods {
        let _ = write!(s, " {:>18} {:>8}", m, "Gap(%)");
    }
    s.push('\n');
    for r in rows {
        let opt = r.optimum.map(|o| format!("{o:.0}")).unwrap_or_default();
        let _ = write!(s, "{:<14} {:>9} {:>9}", r.instance, r.customers, opt);
        for &(len, gap) in &r.cells {
            let gap = gap.map(|g| format!("{g:.2}")).unwrap_or_default();
            let _ = write!(s, " {:>18.0} {:>8}", len, gap);
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<14} {:>9} {:>9}", "Average Gap", "", "");
    for a in averages {
        let gap = a.map(|g| format!("{g:.2}")).unwrap_or_default();
        let _ = write!(s, " {:>18} {:>8}", "", gap);
    }
    s.push('\n');
    s
}
