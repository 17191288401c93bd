//! Type-configuration algebra.
//!
//! A configuration lists the treatment levels, the instrument levels, and the
//! support of the latent response type: one column per type, giving the
//! treatment the type takes at each instrument level. Everything the
//! estimators need — the binary response matrices `B_t`, their
//! Moore–Penrose inverses, the count partitions `Sigma_{t,k}`, the
//! identification contractions `btilde_{t,k}`, and the `W` instrument sets —
//! is derived from this one object.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative cutoff below which singular values are treated as zero.
const SVD_CUTOFF: f64 = 1e-12;

/// Treatment levels, instrument levels, and the known type support.
///
/// Immutable after construction; all derived algebra is recomputed on demand
/// (the matrices involved are tiny).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeConfig {
    treatments: Vec<String>,
    instruments: Vec<String>,
    /// Column-major type support: `types[j][i]` is the treatment index taken
    /// by type `j` when the instrument is at level `i`.
    types: Vec<Vec<usize>>,
}

/// Serialized form: type columns carry treatment labels, not indices.
#[derive(Serialize, Deserialize)]
struct TypeConfigJson {
    treatments: Vec<String>,
    instruments: Vec<String>,
    types: Vec<Vec<String>>,
}

impl Serialize for TypeConfig {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let types = self
            .types
            .iter()
            .map(|col| col.iter().map(|&t| self.treatments[t].clone()).collect())
            .collect();
        TypeConfigJson {
            treatments: self.treatments.clone(),
            instruments: self.instruments.clone(),
            types,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for TypeConfig {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = TypeConfigJson::deserialize(de)?;
        TypeConfig::new(raw.treatments, raw.instruments, raw.types).map_err(serde::de::Error::custom)
    }
}

impl TypeConfig {
    /// Builds and validates a configuration from labeled type columns.
    pub fn new(
        treatments: Vec<String>,
        instruments: Vec<String>,
        type_columns: Vec<Vec<String>>,
    ) -> Result<Self> {
        if treatments.len() < 2 {
            return Err(Error::InvalidConfig("need at least two treatment levels".into()));
        }
        if instruments.len() < 2 {
            return Err(Error::InvalidConfig("need at least two instrument levels".into()));
        }
        if type_columns.is_empty() {
            return Err(Error::InvalidConfig("type support is empty".into()));
        }
        for labels in [&treatments, &instruments] {
            let set: BTreeSet<&String> = labels.iter().collect();
            if set.len() != labels.len() {
                return Err(Error::InvalidConfig("duplicate labels".into()));
            }
        }
        let lookup = |label: &str| -> Result<usize> {
            treatments
                .iter()
                .position(|t| t == label)
                .ok_or_else(|| Error::UnknownTreatment(label.to_string()))
        };
        let mut types = Vec::with_capacity(type_columns.len());
        for col in &type_columns {
            if col.len() != instruments.len() {
                return Err(Error::InvalidConfig(format!(
                    "type column has {} entries, expected one per instrument ({})",
                    col.len(),
                    instruments.len()
                )));
            }
            types.push(col.iter().map(|l| lookup(l)).collect::<Result<Vec<_>>>()?);
        }
        for j in 0..types.len() {
            for j2 in (j + 1)..types.len() {
                if types[j] == types[j2] {
                    return Err(Error::InvalidConfig(format!(
                        "type columns {} and {} are identical",
                        j + 1,
                        j2 + 1
                    )));
                }
            }
        }
        Ok(Self { treatments, instruments, types })
    }

    /// The three-treatment / two-instrument configuration with five types:
    /// two always-taker-style types, one never-switching `t3` type, and the
    /// two switcher types `(t3,t1)` and `(t3,t2)`.
    pub fn main_example() -> Self {
        let t = |s: &str| s.to_string();
        Self::new(
            vec![t("t1"), t("t2"), t("t3")],
            vec![t("z1"), t("z2")],
            vec![
                vec![t("t1"), t("t1")],
                vec![t("t2"), t("t2")],
                vec![t("t3"), t("t3")],
                vec![t("t3"), t("t1")],
                vec![t("t3"), t("t2")],
            ],
        )
        .expect("preset is valid")
    }

    /// Classical binary setup: always-taker, complier, never-taker.
    pub fn binary_late() -> Self {
        let t = |s: &str| s.to_string();
        Self::new(
            vec![t("t0"), t("t1")],
            vec![t("z0"), t("z1")],
            vec![
                vec![t("t1"), t("t1")],
                vec![t("t0"), t("t1")],
                vec![t("t0"), t("t0")],
            ],
        )
        .expect("preset is valid")
    }

    /// Looks a preset up by name (`main_example`, `binary_late`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "main_example" => Some(Self::main_example()),
            "binary_late" => Some(Self::binary_late()),
            _ => None,
        }
    }

    pub fn treatments(&self) -> &[String] {
        &self.treatments
    }

    pub fn instruments(&self) -> &[String] {
        &self.instruments
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    /// Treatment index taken by type `j` at instrument `i`.
    pub fn type_entry(&self, instrument: usize, type_col: usize) -> usize {
        self.types[type_col][instrument]
    }

    pub fn treatment_index(&self, label: &str) -> Result<usize> {
        self.treatments
            .iter()
            .position(|t| t == label)
            .ok_or_else(|| Error::UnknownTreatment(label.to_string()))
    }

    pub fn instrument_index(&self, label: &str) -> Result<usize> {
        self.instruments
            .iter()
            .position(|z| z == label)
            .ok_or_else(|| Error::UnknownInstrument(label.to_string()))
    }

    /// Human-readable form of a type column, e.g. `(t3,t1)`.
    pub fn type_label(&self, type_col: usize) -> String {
        let parts: Vec<&str> = self.types[type_col]
            .iter()
            .map(|&t| self.treatments[t].as_str())
            .collect();
        format!("({})", parts.join(","))
    }

    /// True when every response matrix is lonesum, i.e. no treatment admits a
    /// 2x2 permutation submatrix across instruments and types.
    pub fn check_unordered_monotonicity(&self) -> bool {
        self.monotonicity_violation().is_none()
    }

    /// Locates one offending 2x2 submatrix if monotonicity fails.
    ///
    /// For each treatment, lonesum-ness of `B_t` is equivalent to the row
    /// supports ("which types take t at this instrument") being nested across
    /// instruments; the exhaustive scan keeps the correspondence with the
    /// indicator-ordering form of the assumption direct.
    pub fn monotonicity_violation(&self) -> Option<MonotonicityViolation> {
        let n_z = self.n_instruments();
        let n_s = self.n_types();
        for t in 0..self.n_treatments() {
            for i in 0..n_z {
                for i2 in (i + 1)..n_z {
                    for j in 0..n_s {
                        for j2 in (j + 1)..n_s {
                            let a = self.types[j][i] == t;
                            let b = self.types[j2][i] == t;
                            let c = self.types[j][i2] == t;
                            let d = self.types[j2][i2] == t;
                            // [[1,0],[0,1]] or [[0,1],[1,0]]
                            if (a && d && !b && !c) || (b && c && !a && !d) {
                                return Some(MonotonicityViolation {
                                    treatment: self.treatments[t].clone(),
                                    instrument_a: self.instruments[i].clone(),
                                    instrument_b: self.instruments[i2].clone(),
                                    type_a: self.type_label(j),
                                    type_b: self.type_label(j2),
                                });
                            }
                        }
                    }
                }
            }
        }
        None
    }

    /// The binary response matrix `B_t` (instruments x types).
    pub fn response_matrix(&self, treatment: &str) -> Result<BinaryResponseMatrix> {
        let t = self.treatment_index(treatment)?;
        Ok(self.response_matrix_by_index(t))
    }

    pub(crate) fn response_matrix_by_index(&self, t: usize) -> BinaryResponseMatrix {
        let entries = DMatrix::from_fn(self.n_instruments(), self.n_types(), |i, j| {
            if self.types[j][i] == t {
                1.0
            } else {
                0.0
            }
        });
        BinaryResponseMatrix { treatment: self.treatments[t].clone(), entries }
    }

    /// Partitions the type columns by how often `treatment` appears in them.
    pub fn partition(&self, treatment: &str) -> Result<TypePartition> {
        let t = self.treatment_index(treatment)?;
        Ok(self.partition_by_index(t))
    }

    pub(crate) fn partition_by_index(&self, t: usize) -> TypePartition {
        let n_z = self.n_instruments();
        let mut sets = vec![Vec::new(); n_z + 1];
        for (j, col) in self.types.iter().enumerate() {
            let count = col.iter().filter(|&&e| e == t).count();
            sets[count].push(j);
        }
        TypePartition { treatment: self.treatments[t].clone(), sets }
    }

    pub(crate) fn sigma_by_index(&self, t: usize, k: usize) -> Result<Vec<usize>> {
        if k < 1 || k > self.n_instruments() {
            return Err(Error::KOutOfRange { k, max: self.n_instruments() });
        }
        Ok(self.partition_by_index(t).sets[k].clone())
    }

    /// The identification contraction `btilde_{t,k} = b_{t,k} B_t^+`.
    pub fn btilde(&self, treatment: &str, k: usize) -> Result<RowDVector<f64>> {
        let t = self.treatment_index(treatment)?;
        self.btilde_by_index(t, k)
    }

    pub(crate) fn btilde_by_index(&self, t: usize, k: usize) -> Result<RowDVector<f64>> {
        if k < 1 || k > self.n_instruments() {
            return Err(Error::KOutOfRange { k, max: self.n_instruments() });
        }
        let b_t = self.response_matrix_by_index(t);
        let pinv = pseudoinverse(&b_t.entries);
        let sigma = self.partition_by_index(t).sets[k].clone();
        let mut indicator = RowDVector::zeros(self.n_types());
        for j in sigma {
            indicator[j] = 1.0;
        }
        Ok(indicator * pinv)
    }

    /// The uniform instrument set `W_{t',t,k}` of the treated-subpopulation
    /// identification result.
    ///
    /// Returns `Ok(None)` when the types in `Sigma_{t,k}` disagree about
    /// where they take `t'` (the parameter is then not identified), and
    /// `Ok(Some(empty))` when none of them ever takes `t'` (the associated
    /// probability is zero by construction). Errors when `Sigma_{t,k}` is
    /// empty.
    pub fn w_set(
        &self,
        t_prime: &str,
        treatment: &str,
        k: usize,
    ) -> Result<Option<BTreeSet<usize>>> {
        let tp = self.treatment_index(t_prime)?;
        let t = self.treatment_index(treatment)?;
        self.w_set_by_index(tp, t, k)
    }

    pub(crate) fn w_set_by_index(
        &self,
        t_prime: usize,
        t: usize,
        k: usize,
    ) -> Result<Option<BTreeSet<usize>>> {
        let sigma = self.sigma_by_index(t, k)?;
        if sigma.is_empty() {
            return Err(Error::EmptySigma { treatment: self.treatments[t].clone(), k });
        }
        let w_of = |j: usize| -> BTreeSet<usize> {
            (0..self.n_instruments())
                .filter(|&i| self.types[j][i] == t_prime)
                .collect()
        };
        let w = w_of(sigma[0]);
        for &j in &sigma[1..] {
            if w_of(j) != w {
                return Ok(None);
            }
        }
        Ok(Some(w))
    }

    /// Instrument labels for a `w_set` result.
    pub fn instrument_labels(&self, set: &BTreeSet<usize>) -> Vec<String> {
        set.iter().map(|&i| self.instruments[i].clone()).collect()
    }

    /// Linear equality relations among the type-probability cells implied by
    /// coinciding unions of the `Sigma_{t,k}` sets (plus `p = 0` for cells
    /// whose type set is empty).
    pub fn find_equality_restrictions(&self) -> Vec<EqualityRestriction> {
        let n_z = self.n_instruments();
        let mut restrictions = Vec::new();

        // (t, k, bitmask over type columns), k >= 1
        let mut cells: Vec<(usize, usize, u64)> = Vec::new();
        for t in 0..self.n_treatments() {
            let part = self.partition_by_index(t);
            for k in 1..=n_z {
                let mask = part.sets[k].iter().fold(0u64, |m, &j| m | (1 << j));
                if mask == 0 {
                    restrictions.push(EqualityRestriction {
                        lhs: vec![(self.treatments[t].clone(), k)],
                        rhs: Vec::new(),
                    });
                } else {
                    cells.push((t, k, mask));
                }
            }
        }

        // Enumerate families of pairwise-disjoint cells, grouped by union.
        let mut families: Vec<(u64, Vec<usize>)> = Vec::new();
        let mut stack: Vec<(usize, u64, Vec<usize>)> = vec![(0, 0, Vec::new())];
        while let Some((next, mask, members)) = stack.pop() {
            if !members.is_empty() {
                families.push((mask, members.clone()));
            }
            for (idx, &(_, _, m)) in cells.iter().enumerate().skip(next) {
                if m & mask == 0 {
                    let mut ext = members.clone();
                    ext.push(idx);
                    stack.push((idx + 1, mask | m, ext));
                }
            }
        }
        families.sort();

        let union_of = |fam: &[usize]| fam.iter().fold(0u64, |m, &i| m | cells[i].2);
        let mut seen: BTreeSet<(Vec<usize>, Vec<usize>)> = BTreeSet::new();
        for a in 0..families.len() {
            for b in (a + 1)..families.len() {
                if families[a].0 != families[b].0 {
                    continue;
                }
                let mut lhs: Vec<usize> = families[a].1.clone();
                let mut rhs: Vec<usize> = families[b].1.clone();
                // Drop shared cells.
                lhs.retain(|i| !families[b].1.contains(i));
                rhs.retain(|i| !families[a].1.contains(i));
                if lhs.is_empty() || rhs.is_empty() {
                    continue;
                }
                if decomposes(&lhs, &rhs, &cells, &union_of) {
                    continue;
                }
                let key = if lhs <= rhs { (lhs.clone(), rhs.clone()) } else { (rhs.clone(), lhs.clone()) };
                if seen.insert(key.clone()) {
                    let to_labels = |fam: &[usize]| {
                        fam.iter()
                            .map(|&i| (self.treatments[cells[i].0].clone(), cells[i].1))
                            .collect()
                    };
                    restrictions.push(EqualityRestriction {
                        lhs: to_labels(&key.0),
                        rhs: to_labels(&key.1),
                    });
                }
            }
        }
        restrictions
    }

    /// Samples a configuration satisfying unordered monotonicity by rejection:
    /// candidate type columns are kept only while every response matrix stays
    /// lonesum. Constant types are always admissible, so the result is never
    /// empty.
    pub fn random_monotone<R: Rng>(
        rng: &mut R,
        n_treatments: usize,
        n_instruments: usize,
        target_types: usize,
    ) -> Self {
        assert!(n_treatments >= 2 && n_instruments >= 2 && target_types >= 1);
        let treatments: Vec<String> = (1..=n_treatments).map(|i| format!("t{i}")).collect();
        let instruments: Vec<String> = (1..=n_instruments).map(|i| format!("z{i}")).collect();
        let mut cols: Vec<Vec<usize>> = Vec::new();
        let mut tries = 0usize;
        while cols.len() < target_types && tries < 400 * target_types {
            tries += 1;
            let cand: Vec<usize> =
                (0..n_instruments).map(|_| rng.random_range(0..n_treatments)).collect();
            if cols.contains(&cand) {
                continue;
            }
            cols.push(cand);
            let probe = Self {
                treatments: treatments.clone(),
                instruments: instruments.clone(),
                types: cols.clone(),
            };
            if !probe.check_unordered_monotonicity() {
                cols.pop();
            }
        }
        if cols.is_empty() {
            cols.push(vec![0; n_instruments]);
        }
        Self { treatments, instruments, types: cols }
    }
}

/// True when the relation `sum_lhs = sum_rhs` is a sum of two smaller valid
/// relations, in which case only the smaller ones are reported.
fn decomposes(
    lhs: &[usize],
    rhs: &[usize],
    cells: &[(usize, usize, u64)],
    union_of: &dyn Fn(&[usize]) -> u64,
) -> bool {
    let subsets = |fam: &[usize]| -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for bits in 0..(1u32 << fam.len()) {
            out.push(
                fam.iter()
                    .enumerate()
                    .filter(|(i, _)| bits & (1 << i) != 0)
                    .map(|(_, &c)| c)
                    .collect(),
            );
        }
        out
    };
    let _ = cells;
    for a in subsets(lhs) {
        for b in subsets(rhs) {
            if a.len() == lhs.len() && b.len() == rhs.len() {
                continue;
            }
            if a.is_empty() && b.is_empty() {
                continue;
            }
            if union_of(&a) == union_of(&b) {
                return true;
            }
        }
    }
    false
}

/// One offending 2x2 permutation submatrix, for error reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotonicityViolation {
    pub treatment: String,
    pub instrument_a: String,
    pub instrument_b: String,
    pub type_a: String,
    pub type_b: String,
}

impl From<MonotonicityViolation> for Error {
    fn from(v: MonotonicityViolation) -> Self {
        Error::MonotonicityViolated {
            treatment: v.treatment,
            instrument_a: v.instrument_a,
            instrument_b: v.instrument_b,
            type_a: v.type_a,
            type_b: v.type_b,
        }
    }
}

/// `B_t`: instruments x types 0/1 matrix for a fixed treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryResponseMatrix {
    pub treatment: String,
    pub entries: DMatrix<f64>,
}

impl BinaryResponseMatrix {
    /// Column sums, i.e. how often the treatment appears in each type.
    pub fn column_counts(&self) -> Vec<usize> {
        (0..self.entries.ncols())
            .map(|j| self.entries.column(j).iter().filter(|&&v| v == 1.0).count())
            .collect()
    }
}

/// The index sets `Sigma_{t,0}, ..., Sigma_{t,N_Z}` over type columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypePartition {
    pub treatment: String,
    /// `sets[k]` holds the type-column indices in which the treatment appears
    /// exactly `k` times; disjoint with union covering all columns.
    pub sets: Vec<Vec<usize>>,
}

/// `sum of p over lhs = sum of p over rhs` (empty rhs means `= 0`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EqualityRestriction {
    pub lhs: Vec<(String, usize)>,
    pub rhs: Vec<(String, usize)>,
}

impl fmt::Display for EqualityRestriction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |cells: &[(String, usize)]| {
            if cells.is_empty() {
                "0".to_string()
            } else {
                cells
                    .iter()
                    .map(|(t, k)| format!("p[{t},{k}]"))
                    .collect::<Vec<_>>()
                    .join(" + ")
            }
        };
        write!(f, "{} = {}", side(&self.lhs), side(&self.rhs))
    }
}

/// Moore–Penrose pseudoinverse via SVD, with singular values below
/// `1e-12` (relative to the largest) treated as zero.
pub fn pseudoinverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = if max_sv > 0.0 { SVD_CUTOFF * max_sv.max(1.0) } else { SVD_CUTOFF };
    svd.pseudo_inverse(eps).expect("svd computed with u and v_t")
}
