use std::fs;
use std::path::{Path, PathBuf};

use ncs_core::SimulationTrace;
use serde::Serialize;

use crate::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))
}

/// Pretty JSON with shortest round-trip float formatting and a trailing newline.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::input(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// One row per k = 0..=N+1. The last row has the terminal state and empty
/// input and stage-cost fields.
pub fn write_trace(dir: &Path, trace: &SimulationTrace) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("trace_{}.csv", trace.trial));
    let err = |e: csv::Error| CliError::input(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    let nl = trace.x[0].len();
    let ml = trace.u.first().map_or(0, Vec::len);
    let l = trace.gamma[0].len();
    let mut header = vec!["k".to_string()];
    header.extend((1..=nl).map(|j| format!("x_{j}")));
    header.extend((1..=nl).map(|j| format!("xhat_{j}")));
    header.extend((1..=ml).map(|j| format!("u_{j}")));
    header.extend((1..=l).map(|j| format!("gamma_{j}")));
    header.push("stage_cost".into());
    w.write_record(&header).map_err(err)?;
    for k in 0..trace.x.len() {
        let mut row = vec![k.to_string()];
        row.extend(trace.x[k].iter().map(f64::to_string));
        row.extend(trace.xhat[k].iter().map(f64::to_string));
        match trace.u.get(k) {
            Some(u) => row.extend(u.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), ml)),
        }
        row.extend(trace.gamma[k].iter().map(|&g| u8::from(g).to_string()));
        row.push(
            trace
                .stage_cost
                .get(k)
                .map_or(String::new(), f64::to_string),
        );
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::input(e.to_string()))?;
    Ok(path)
}
