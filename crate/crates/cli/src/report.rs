//! `report`: stacks CSV files into one table with a `source` column.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";

fn collect(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .filter(|f| f.file_name().is_some_and(|n| n != SUMMARY_CSV))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Union of the input columns in first-seen order; missing cells stay empty.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// `(source, row index, (column, value) cells)` of one input record.
type Record = (String, usize, Vec<(String, String)>);

pub fn merge(files: &[PathBuf]) -> Result<Table> {
    let mut columns = vec!["source".to_string(), "row".to_string()];
    let mut raw: Vec<Record> = Vec::new();
    for f in files {
        let mut r = csv::Reader::from_path(f).with_context(|| format!("reading {}", f.display()))?;
        let headers = r.headers()?.clone();
        for h in &headers {
            if !columns.iter().any(|c| c == h) {
                columns.push(h.to_string());
            }
        }
        for (i, rec) in r.records().enumerate() {
            let rec = rec.with_context(|| format!("parsing {}", f.display()))?;
            let cells = headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect();
            raw.push((f.display().to_string(), i, cells));
        }
    }
    let rows = raw
        .into_iter()
        .map(|(src, i, cells)| {
            columns
                .iter()
                .map(|c| match c.as_str() {
                    "source" => src.clone(),
                    "row" => i.to_string(),
                    _ => cells
                        .iter()
                        .find(|(h, _)| h == c)
                        .map(|(_, v)| v.clone())
                        .unwrap_or_default(),
                })
                .collect()
        })
        .collect();
    Ok(Table { columns, rows })
}

fn markdown(t: &Table) -> String {
    let widths: Vec<usize> = (0..t.columns.len())
        .map(|j| {
            t.rows
                .iter()
                .map(|r| r[j].len())
                .chain([t.columns[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(&t.columns);
    s += &line(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
    for r in &t.rows {
        s += &line(r);
    }
    s
}

pub fn run(out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let files = collect(inputs)?;
    let table = merge(&files)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = csv::Writer::from_path(out.join(SUMMARY_CSV))?;
    w.write_record(&table.columns)?;
    for r in &table.rows {
        w.write_record(r)?;
    }
    w.flush()?;
    let md = markdown(&table);
    fs::write(out.join(SUMMARY_MD), &md)?;
    print!("{md}");
    Ok(())
}
