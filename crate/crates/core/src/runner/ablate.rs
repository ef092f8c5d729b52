//! Grid sweeps over configuration keys.

use std::path::Path;

use crate::data::DatasetIndex;
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::train::{evaluate, fold_spec, train};

/// One grid cell: the assignments applied on top of the base config.
pub type Delta = Vec<(String, String)>;

/// Expands `"a=1,2;b=x,y"` into the cartesian product, first key slowest.
pub fn expand_grid(spec: &str) -> Result<Vec<Delta>> {
    let mut cells: Vec<Delta> = vec![Vec::new()];
    for axis in spec.split(';').map(str::trim).filter(|a| !a.is_empty()) {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{axis}` is not key=v1,v2,...")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{}` has no values", key.trim())));
        }
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.trim().to_string(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    if cells.len() == 1 && cells[0].is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(cells)
}

pub fn delta_label(delta: &Delta) -> String {
    delta.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub miou: f64,
}

/// Resolves every cell first, so a bad key fails before any training starts.
pub fn resolve(base: &RunConfig, grid: &[Delta]) -> Result<Vec<RunConfig>> {
    grid.iter()
        .map(|delta| {
            let mut cfg = base.clone();
            for (k, v) in delta {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Trains and evaluates each cell with the base seed. Final checkpoints are
/// written to `out` as `cell_NN.ckpt` when given.
pub fn ablate(base: &RunConfig, grid: &[Delta], ds: &DatasetIndex, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let configs = resolve(base, grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (k, (delta, cfg)) in grid.iter().zip(configs).enumerate() {
        let report = train(&cfg, ds, None)?;
        if let Some(dir) = out {
            report.checkpoint.save(&dir.join(format!("cell_{k:02}.ckpt")))?;
        }
        let model = report.checkpoint.model()?;
        let ev = evaluate(&model, &cfg, ds, &fold_spec(&cfg)?, cfg.n_shot_infer)?;
        let row = AblationRow { label: delta_label(delta), miou: ev.acc.miou()? };
        log::info!("{}: mIoU {:.4}", row.label, row.miou);
        rows.push(row);
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,miou\n");
    for r in rows {
        out.push_str(&format!("\"{}\",{:.6}\n", r.label, r.miou));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let g = expand_grid("interaction=fsa,tca; injection=concatenation,multiplication,attention_mask,addition").unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(delta_label(&g[0]), "interaction=fsa;injection=concatenation");
        assert_eq!(delta_label(&g[7]), "interaction=tca;injection=addition");
        assert!(expand_grid("").is_err());
        assert!(expand_grid("lr").is_err());
        assert!(expand_grid("lr=").is_err());
    }

    #[test]
    fn bad_cells_fail_before_training() {
        let grid = expand_grid("interaction=fsa,nope").unwrap();
        assert!(matches!(resolve(&RunConfig::default(), &grid), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let rows = vec![
            AblationRow { label: "a=1".into(), miou: 0.5 },
            AblationRow { label: "a=2".into(), miou: 0.25 },
        ];
        assert_eq!(rows_to_csv(&rows), "config,miou\n\"a=1\",0.500000\n\"a=2\",0.250000\n");
    }
}
