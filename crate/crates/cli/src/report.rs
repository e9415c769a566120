//! CSV and JSON-lines writers. Every table is written in key order with a
//! fixed float format, so equal inputs give byte-identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use particle_pde::analysis::{format_float, ErrorRecord, LemmaReport};
use particle_pde::geometry::RiemannRow;
use particle_pde::particle::ParticleState;
use serde_json::Value;

use crate::{CliError, Result};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?))
}

/// `t,i,x_tag,xi_0,...` (or `x_tag_0,...` on multi-dimensional domains).
pub fn write_trajectory(path: &Path, snapshots: &[ParticleState]) -> Result<()> {
    let mut out = csv_writer(path)?;
    let Some(first) = snapshots.first() else {
        out.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        return Ok(());
    };
    let space = first.partition().dim();
    let d = first.dim();
    let mut header = vec!["t".to_string(), "i".to_string()];
    if space == 1 {
        header.push("x_tag".into());
    } else {
        header.extend((0..space).map(|k| format!("x_tag_{k}")));
    }
    header.extend((0..d).map(|k| format!("xi_{k}")));
    out.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for state in snapshots {
        let t = format_float(state.t);
        for (i, tag) in state.partition().tags().enumerate() {
            row.clear();
            row.push(t.clone());
            row.push(i.to_string());
            row.extend(tag.iter().map(|&x| format_float(x)));
            row.extend(state.xi()[i * d..(i + 1) * d].iter().map(|&v| format_float(v)));
            out.write_record(&row)?;
        }
    }
    out.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// `N,epsilon,t,err_L2,err_Linf,bound_rhs,holds`.
pub fn write_errors(path: &Path, records: &[ErrorRecord]) -> Result<()> {
    let mut out = csv_writer(path)?;
    out.write_record(ErrorRecord::CSV_HEADER)?;
    for record in records {
        out.write_record(record.csv_fields())?;
    }
    out.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_lemmas(path: &Path, report: &LemmaReport) -> Result<()> {
    let mut out = csv_writer(path)?;
    out.write_record(["lemma", "epsilon", "measured", "threshold", "passed", "note"])?;
    for check in &report.checks {
        out.write_record([
            check.lemma.clone(),
            check.epsilon.map_or_else(String::new, format_float),
            format_float(check.measured),
            format_float(check.threshold),
            check.passed.to_string(),
            check.note.clone(),
        ])?;
    }
    out.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_riemann(path: &Path, rows: &[RiemannRow]) -> Result<()> {
    let mut out = csv_writer(path)?;
    out.write_record(["function", "N", "lhs", "rhs", "tolerance", "holds"])?;
    for row in rows {
        out.write_record([
            row.label.clone(),
            row.particles.to_string(),
            format_float(row.check.lhs),
            format_float(row.check.rhs),
            format_float(row.check.tolerance),
            row.check.holds.to_string(),
        ])?;
    }
    out.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// One JSON object per line.
pub fn write_summary(path: &Path, lines: &[Value]) -> Result<()> {
    let mut out = create(path)?;
    let io = |source| CliError::Io { path: path.to_path_buf(), source };
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// `stem_suffix.ext` next to `name`.
pub fn suffixed(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    let path = Path::new(name);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => dir.join(format!("{stem}_{suffix}.{ext}")),
        None => dir.join(format!("{stem}_{suffix}")),
    }
}
