use std::path::Path;

use super::Task;
use crate::error::{Error, Result};
use crate::nn::{BatchInput, Targets};

/// Reads a `x1,...,xD,y` file. Class labels must be non-negative integers;
/// the class count is one more than the largest label.
pub fn load_csv(path: &Path, task: Task) -> Result<BatchInput> {
    let err = |line: u64, column: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, 0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| err(1, 0, e.to_string()))?
        .clone();
    let cols = header.len();
    if cols < 2 {
        return Err(err(1, 0, "expected a header `x1,...,xD,y`".into()));
    }
    let d = cols - 1;
    let mut inputs = Vec::new();
    let mut ys = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols {
            return Err(err(
                line,
                rec.len().min(cols) + 1,
                format!("expected {cols} fields, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(line, j + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, j + 1, format!("`{cell}` is not finite")));
            }
            if j < d {
                inputs.push(v);
            } else {
                if task == Task::Classification && (v < 0.0 || v.fract() != 0.0) {
                    return Err(err(
                        line,
                        j + 1,
                        format!("class label `{cell}` is not a non-negative integer"),
                    ));
                }
                ys.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(err(1, 0, "no data rows".into()));
    }
    let targets = match task {
        Task::Regression => Targets::Values { dim: 1, values: ys },
        Task::Classification => {
            let labels: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
            let n_classes = labels.iter().max().copied().unwrap_or(0) + 1;
            Targets::Classes { n_classes, labels }
        }
    };
    BatchInput::new(d, inputs, Some(targets))
}

/// Inverse of [`load_csv`]; values are written in shortest round-trip form.
pub fn write_csv(path: &Path, data: &BatchInput) -> Result<()> {
    let targets = data
        .targets()
        .ok_or_else(|| Error::InvalidArgument("cannot write a dataset without targets".into()))?;
    if let Targets::Values { dim, .. } = targets {
        if *dim != 1 {
            return Err(Error::InvalidArgument(format!(
                "CSV holds one target column, data has {dim}"
            )));
        }
    }
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        row.push(match targets {
            Targets::Values { values, .. } => values[i].to_string(),
            Targets::Classes { labels, .. } => labels[i].to_string(),
        });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
