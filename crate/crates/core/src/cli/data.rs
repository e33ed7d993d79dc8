use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dataset, Target, TestPoint};

enum Column {
    Feature(usize),
    Label,
    Target(usize),
}

fn column(name: &str) -> Option<Column> {
    let name = name.trim();
    if name == "label" {
        return Some(Column::Label);
    }
    let (kind, idx) = name.split_at_checked(1)?;
    let idx: usize = idx.parse().ok()?;
    match kind {
        "x" => Some(Column::Feature(idx)),
        "y" => Some(Column::Target(idx)),
        _ => None,
    }
}

/// Reads `x0, …, x{d−1}` plus either `label` (classification) or
/// `y0, …` (regression). Column order is free; indices must be contiguous.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(|e| Error::malformed(path, e))?.clone();
    let cols: Vec<Column> = headers
        .iter()
        .map(|h| column(h).ok_or_else(|| Error::malformed(path, format!("unknown column `{h}`"))))
        .collect::<Result<_>>()?;
    let d = cols.iter().filter(|c| matches!(c, Column::Feature(_))).count();
    let m = cols.iter().filter(|c| matches!(c, Column::Target(_))).count();
    let has_label = cols.iter().any(|c| matches!(c, Column::Label));
    if d == 0 || has_label == (m > 0) {
        return Err(Error::malformed(path, "need x columns and either a label column or y columns"));
    }
    for c in &cols {
        if matches!(c, Column::Feature(i) if *i >= d) || matches!(c, Column::Target(i) if *i >= m) {
            return Err(Error::malformed(path, "column indices must run from 0 without gaps"));
        }
    }
    let mut points = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::malformed(path, e))?;
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; m];
        let mut label = 0usize;
        for (c, field) in cols.iter().zip(rec.iter()) {
            let bad = |e: &dyn std::fmt::Display| Error::malformed(path, format!("row {}: `{field}`: {e}", row + 1));
            match c {
                Column::Feature(i) => x[*i] = field.trim().parse().map_err(|e| bad(&e))?,
                Column::Target(i) => y[*i] = field.trim().parse().map_err(|e| bad(&e))?,
                Column::Label => label = field.trim().parse().map_err(|e| bad(&e))?,
            }
        }
        points.push(TestPoint {
            x,
            y: if has_label { Target::Class(label) } else { Target::Values(y) },
        });
    }
    if points.is_empty() {
        return Err(Error::malformed(path, "no rows"));
    }
    Ok(Dataset::new(points))
}

/// Inverse of [`load_dataset_csv`].
pub fn write_dataset_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = dataset.points().first().ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    let mut header: Vec<String> = (0..first.x.len()).map(|i| format!("x{i}")).collect();
    match &first.y {
        Target::Class(_) => header.push("label".into()),
        Target::Values(v) => header.extend((0..v.len()).map(|i| format!("y{i}"))),
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::malformed(path, e))?;
    w.write_record(&header).map_err(|e| Error::malformed(path, e))?;
    for p in dataset.points() {
        let mut rec: Vec<String> = p.x.iter().map(|v| format!("{v:?}")).collect();
        match &p.y {
            Target::Class(c) => rec.push(c.to_string()),
            Target::Values(v) => rec.extend(v.iter().map(|v| format!("{v:?}"))),
        }
        w.write_record(&rec).map_err(|e| Error::malformed(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
