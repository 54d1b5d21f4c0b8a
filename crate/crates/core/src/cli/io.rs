use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::dg::{AblationTable, CellStats, LooTable, RunReport};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

pub const FORMAT_VERSION: u32 = 1;

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(line, e.to_string())
}

/// Reads an `x1,...,xd,weight` cloud. Weights are normalized to sum to one.
pub fn read_point_cloud<R: Read>(reader: R) -> Result<EmpiricalMeasure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let cols = header.len();
    if cols < 2 || &header[cols - 1] != "weight" {
        return Err(parse_err(1, "header must be x1,...,xd,weight"));
    }
    let d = cols - 1;
    let (mut pts, mut w) = (vec![], vec![]);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut vals = Vec::with_capacity(cols);
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("'{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, "non-finite value"));
            }
            vals.push(v);
        }
        let weight = vals[d];
        if weight < 0.0 {
            return Err(parse_err(line, "negative weight"));
        }
        pts.extend_from_slice(&vals[..d]);
        w.push(weight);
    }
    let total: f64 = w.iter().sum();
    if w.is_empty() || total <= 0.0 {
        return Err(parse_err(1, "cloud has no mass"));
    }
    let n = w.len();
    EmpiricalMeasure::new(
        Tensor::matrix(n, d, pts)?,
        w.iter().map(|x| x / total).collect(),
    )
}

pub fn load_point_cloud(path: &Path) -> Result<EmpiricalMeasure> {
    let f = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    read_point_cloud(f)
}

pub fn write_point_cloud<W: Write>(m: &EmpiricalMeasure, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=m.dim()).map(|i| format!("x{i}")).collect();
    header.push("weight".into());
    w.write_record(&header).map_err(io_err)?;
    for i in 0..m.len() {
        let mut row: Vec<String> = m.point(i).iter().map(|v| v.to_string()).collect();
        row.push(m.weights()[i].to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `x,y,weight` rows for plotting a support of dimension one or two.
pub fn write_plot_rows<W: Write>(m: &EmpiricalMeasure, writer: W) -> Result<()> {
    if m.dim() > 2 {
        return Err(Error::invalid("plot rows need a support of dimension ≤ 2"));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y", "weight"]).map_err(io_err)?;
    for i in 0..m.len() {
        let p = m.point(i);
        let y = p.get(1).copied().unwrap_or(0.0);
        w.write_record([p[0].to_string(), y.to_string(), m.weights()[i].to_string()])
            .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,L_c,L_wb,L_r|L_i,val_acc`; absent losses are empty fields.
pub fn write_metrics<W: Write>(r: &RunReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "L_c", "L_wb", r.aux_loss.as_str(), "val_acc"])
        .map_err(io_err)?;
    for e in &r.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.l_c.to_string(),
            opt(e.l_wb),
            opt(e.l_aux),
            e.val_acc.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cell(c: &CellStats) -> String {
    format!("{:.4} ± {:.4}", c.mean, c.std)
}

/// One row per method: a `mean ± std` column per held-out domain, then `Avg`.
pub fn write_loo_table<W: Write>(tables: &[LooTable], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = tables.first() else {
        return Err(Error::invalid("no tables"));
    };
    let mut header = vec!["method".to_string()];
    header.extend(first.rows.iter().map(|(name, _)| name.clone()));
    w.write_record(&header).map_err(io_err)?;
    for t in tables {
        let mut row = vec![t.method.name().to_string()];
        row.extend(t.rows.iter().map(|(_, c)| cell(c)));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format per-seed accuracies behind a leave-one-out table.
pub fn write_loo_runs<W: Write>(t: &LooTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "unseen", "seed", "test_acc"])
        .map_err(io_err)?;
    for (name, c) in t.rows.iter().filter(|(name, _)| name != "Avg") {
        for (seed, acc) in t.seeds.iter().zip(&c.runs) {
            w.write_record([t.method.name(), name, &seed.to_string(), &acc.to_string()])
                .map_err(io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_table<W: Write>(
    t: &AblationTable,
    holdout_name: &str,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unseen".to_string()];
    header.extend(t.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(io_err)?;
    let mut row = vec![holdout_name.to_string()];
    row.extend(t.columns.iter().map(|c| cell(&c.stats)));
    w.write_record(&row).map_err(io_err)?;
    w.flush()?;
    Ok(())
}

/// JSON envelope shared by every command's report.
#[derive(Serialize)]
pub struct Report<'a, C: Serialize, T: Serialize> {
    pub format_version: u32,
    pub command: &'a str,
    pub config: &'a C,
    pub warnings: &'a [String],
    pub result: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
