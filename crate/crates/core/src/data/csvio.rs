//! CSV interchange: header `f0,...,f{D-1}[,label]`, one example per row.

use std::path::Path;

use super::{LabeledSet, UnlabeledSet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn header(dim: usize, labeled: bool) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    if labeled {
        h.push("label".into());
    }
    h
}

fn write_rows(path: &Path, x: Option<&Tensor>, y: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = x.map_or(0, |t| t.shape()[1]);
    w.write_record(header(dim, y.is_some()))?;
    if let Some(x) = x {
        for i in 0..x.shape()[0] {
            let mut rec: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(y) = y {
                rec.push(y[i].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labeled_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    write_rows(path, set.x.as_ref(), Some(&set.y))
}

pub fn write_unlabeled_csv(path: &Path, set: &UnlabeledSet) -> Result<()> {
    write_rows(path, set.x.as_ref(), None)
}

/// Feature rows, labels when present, and the feature dimension.
type Rows = (Vec<Vec<f64>>, Option<Vec<usize>>, usize);

fn read_rows(path: &Path) -> Result<Rows> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let labeled = headers.iter().next_back() == Some("label");
    let dim = headers.len() - usize::from(labeled);
    for (i, h) in headers.iter().take(dim).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Usage(format!(
                "{}: column {i} is {h:?}, expected \"f{i}\"",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut labels = labeled.then(Vec::new);
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |field: &str| {
            Error::Usage(format!(
                "{}: data row {} has unparsable field {field:?}",
                path.display(),
                line + 1
            ))
        };
        let row = rec
            .iter()
            .take(dim)
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(f)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(labels) = labels.as_mut() {
            let f = rec.get(dim).unwrap_or_default();
            labels.push(f.trim().parse::<usize>().map_err(|_| parse_err(f))?);
        }
        rows.push(row);
    }
    Ok((rows, labels, dim))
}

/// Reads a labeled CSV; the class count is `max(label) + 1`, at least 2.
pub fn read_labeled_csv(path: &Path) -> Result<LabeledSet> {
    let (rows, labels, _) = read_rows(path)?;
    let labels = labels.ok_or_else(|| {
        Error::Usage(format!("{}: no trailing `label` column", path.display()))
    })?;
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    if rows.is_empty() {
        return Ok(LabeledSet::empty(k));
    }
    LabeledSet::new(Tensor::from_rows(&rows)?, labels, k)
}

/// Reads an unlabeled CSV; a `label` column, if present, is ignored.
pub fn read_unlabeled_csv(path: &Path) -> Result<UnlabeledSet> {
    let (rows, _, _) = read_rows(path)?;
    if rows.is_empty() {
        return Ok(UnlabeledSet::empty());
    }
    UnlabeledSet::new(Tensor::from_rows(&rows)?)
}
