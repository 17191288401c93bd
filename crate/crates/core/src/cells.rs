//! Per-cell outcome index shared by the moment machinery and the
//! implication checks: for every covariate cell, instrument arm, and
//! treatment, the sorted outcomes and their sum. Built once per dataset;
//! lookups are binary searches.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nuisance::{cell_key, CellKey, Dataset};
use crate::typeconfig::TypeConfig;

#[derive(Debug, Clone, Default)]
pub(crate) struct TzBucket {
    /// Outcomes sorted ascending.
    pub ys: Vec<f64>,
    pub ysum: f64,
}

impl TzBucket {
    pub fn count(&self) -> usize {
        self.ys.len()
    }

    /// Number of outcomes `<= v`.
    pub fn count_le(&self, v: f64) -> usize {
        self.ys.partition_point(|&y| y <= v)
    }

    /// Number of outcomes in `[lo, hi)`; `None` bounds are unbounded.
    pub fn count_in(&self, lo: Option<f64>, hi: Option<f64>) -> usize {
        let upper = match hi {
            Some(h) => self.ys.partition_point(|&y| y < h),
            None => self.ys.len(),
        };
        let lower = match lo {
            Some(l) => self.ys.partition_point(|&y| y < l),
            None => 0,
        };
        upper - lower
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CellData {
    pub n: usize,
    pub z_counts: Vec<usize>,
    /// t-major buckets: `tz[t * n_z + z]`.
    pub tz: Vec<TzBucket>,
}

#[derive(Debug, Clone)]
pub(crate) struct CellIndex {
    pub n_z: usize,
    pub cells: Vec<CellData>,
    /// Row index of the dataset -> cell index.
    pub row_cell: Vec<usize>,
    /// Representative covariate vector per cell (first occurrence).
    pub x_repr: Vec<Vec<f64>>,
}

impl CellIndex {
    /// Groups the dataset by canonical covariate cell; every cell must have
    /// at least one observation under every instrument level.
    pub fn build(data: &Dataset, config: &TypeConfig) -> Result<Self> {
        let n_t = config.n_treatments();
        let n_z = config.n_instruments();
        let mut lookup: BTreeMap<CellKey, usize> = BTreeMap::new();
        let mut cells: Vec<CellData> = Vec::new();
        let mut x_repr: Vec<Vec<f64>> = Vec::new();
        let mut row_cell = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            let key = cell_key(data.x_row(i));
            let idx = *lookup.entry(key).or_insert_with(|| {
                cells.push(CellData {
                    n: 0,
                    z_counts: vec![0; n_z],
                    tz: vec![TzBucket::default(); n_t * n_z],
                });
                x_repr.push(data.x_row(i).to_vec());
                cells.len() - 1
            });
            row_cell.push(idx);
            let cell = &mut cells[idx];
            cell.n += 1;
            cell.z_counts[data.z(i)] += 1;
            let bucket = &mut cell.tz[data.t(i) * n_z + data.z(i)];
            bucket.ys.push(data.y(i));
            bucket.ysum += data.y(i);
        }
        for cell in &mut cells {
            for bucket in &mut cell.tz {
                bucket.ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
        }
        for (idx, cell) in cells.iter().enumerate() {
            for z in 0..n_z {
                if cell.z_counts[z] == 0 {
                    return Err(Error::EmptyInstrumentCell(format!(
                        "cell x=({}) has no observations with instrument `{}`",
                        x_repr[idx]
                            .iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                        config.instruments()[z]
                    )));
                }
            }
        }
        Ok(Self { n_z, cells, row_cell, x_repr })
    }

    /// Trimmed propensity vector for one cell.
    pub fn pi_trimmed(&self, cell: usize, floor: f64) -> Vec<f64> {
        let c = &self.cells[cell];
        c.z_counts
            .iter()
            .map(|&k| (k as f64 / c.n as f64).max(floor))
            .collect()
    }

    /// Cell weight: share of the sample in this cell.
    pub fn weight(&self, cell: usize, n_total: usize) -> f64 {
        self.cells[cell].n as f64 / n_total as f64
    }
}
