//! Feature-file IO for externally extracted features.
//!
//! A bundle CSV has columns `id,label,dino_0..dino_{C-1},res_0..res_{R-1}`;
//! per-branch files have `id,label,f_0..f_{n-1}` and are joined on `id`.
//! Vectors are already pooled, so they load as 1x1 grids with a zero
//! token-branch grid.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::model::{FeatureBundle, Grid};
use super::FusionError;
use crate::data::ClassLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBundle {
    pub id: String,
    pub label: ClassLabel,
    pub bundle: FeatureBundle,
}

fn err(msg: impl Into<String>) -> FusionError {
    FusionError::Features(msg.into())
}

/// Column indices of `prefix0, prefix1, ...` in header order.
fn prefixed_columns(header: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>, FusionError> {
    let mut cols: Vec<(usize, usize)> = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if let Some(rest) = name.trim().strip_prefix(prefix) {
            let k: usize = rest
                .parse()
                .map_err(|_| err(format!("bad feature column {name:?}")))?;
            cols.push((k, i));
        }
    }
    cols.sort();
    for (expect, (k, _)) in cols.iter().enumerate() {
        if *k != expect {
            return Err(err(format!("feature columns {prefix}* are not contiguous from 0")));
        }
    }
    if cols.is_empty() {
        return Err(err(format!("no {prefix}* columns")));
    }
    Ok(cols.into_iter().map(|(_, i)| i).collect())
}

fn column(header: &csv::StringRecord, name: &str) -> Result<usize, FusionError> {
    header
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or_else(|| err(format!("missing column {name:?}")))
}

struct Table {
    rows: Vec<(String, ClassLabel, Vec<f64>)>,
}

fn read_table<R: Read>(input: R, prefixes: &[&str]) -> Result<(Table, Vec<usize>), FusionError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let id_col = column(&header, "id")?;
    let label_col = column(&header, "label")?;
    let mut cols = Vec::new();
    let mut widths = Vec::new();
    for p in prefixes {
        let c = prefixed_columns(&header, p)?;
        widths.push(c.len());
        cols.extend(c);
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row = line + 2;
        let label: ClassLabel = rec[label_col]
            .parse()
            .map_err(|_| err(format!("row {row}: unknown label {:?}", &rec[label_col])))?;
        let values = cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("row {row}: bad value {:?}", &rec[c])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((rec[id_col].to_string(), label, values));
    }
    if rows.is_empty() {
        return Err(err("no rows"));
    }
    Ok((Table { rows }, widths))
}

fn make_bundle(dino: Vec<f64>, res: Vec<f64>) -> FeatureBundle {
    let c = dino.len();
    FeatureBundle {
        f_cls: dino,
        f_grid_dino: Grid::zeros(1, 1, c),
        f_grid_res: Grid::from_vector(res),
    }
}

pub fn read_feature_bundle<R: Read>(input: R) -> Result<Vec<LabeledBundle>, FusionError> {
    let (table, widths) = read_table(input, &["dino_", "res_"])?;
    let c = widths[0];
    Ok(table
        .rows
        .into_iter()
        .map(|(id, label, mut v)| {
            let res = v.split_off(c);
            LabeledBundle {
                id,
                label,
                bundle: make_bundle(v, res),
            }
        })
        .collect())
}

/// Joins a token-branch file and a convolutional-branch file on `id`.
/// Rows follow the first file; labels must agree.
pub fn read_branch_pair<R1: Read, R2: Read>(dino: R1, res: R2) -> Result<Vec<LabeledBundle>, FusionError> {
    let (d, _) = read_table(dino, &["f_"])?;
    let (r, _) = read_table(res, &["f_"])?;
    let mut by_id: HashMap<String, (ClassLabel, Vec<f64>)> = HashMap::new();
    for (id, label, v) in r.rows {
        by_id.insert(id, (label, v));
    }
    let mut out = Vec::new();
    for (id, label, v) in d.rows {
        let (rl, rv) = by_id
            .remove(&id)
            .ok_or_else(|| err(format!("id {id:?} missing from second file")))?;
        if rl != label {
            return Err(err(format!("id {id:?} has labels {label} and {rl}")));
        }
        out.push(LabeledBundle {
            id,
            label,
            bundle: make_bundle(v, rv),
        });
    }
    Ok(out)
}

/// Writes pooled vectors (`f_cls + mean(grid)` and the mean convolutional grid).
pub fn write_feature_bundle<W: Write>(rows: &[LabeledBundle], out: W) -> Result<(), FusionError> {
    let first = rows.first().ok_or_else(|| err("no rows"))?;
    let c = first.bundle.f_cls.len();
    let r = first.bundle.f_grid_res.c;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..c).map(|i| format!("dino_{i}")));
    header.extend((0..r).map(|i| format!("res_{i}")));
    w.write_record(&header).map_err(|e| err(e.to_string()))?;
    for row in rows {
        let dino = super::model::combine_dino(&row.bundle.f_grid_dino, &row.bundle.f_cls)?;
        let res = row.bundle.f_grid_res.spatial_mean();
        if dino.len() != c || res.len() != r {
            return Err(err(format!("row {:?} has inconsistent widths", row.id)));
        }
        let mut rec = vec![row.id.clone(), row.label.as_str().to_string()];
        rec.extend(dino.iter().chain(&res).map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}
