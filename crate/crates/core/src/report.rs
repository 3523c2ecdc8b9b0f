//! Aggregation of per-run results into mean/std tables and CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackReport, RateRow};
use crate::error::{Error, Result};
use crate::gadgets::GadgetKind;

/// One measured value, e.g. a fold's misclassification rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: GadgetKind,
    pub density: f64,
    pub series: String,
    pub value: f64,
}

impl From<&RateRow> for Observation {
    fn from(r: &RateRow) -> Self {
        Self {
            kind: r.kind,
            density: r.density,
            series: r.series.clone(),
            value: r.rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub kind: GadgetKind,
    pub density: f64,
    pub series: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub rows: Vec<TableRow>,
}

impl EvaluationTable {
    pub fn get(&self, kind: GadgetKind, density: f64, series: &str) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.density == density && r.series == series)
    }

    pub const CSV_HEADER: &'static str = "kind,density,series,mean,std_population,n";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.kind, r.density, r.series, r.mean, r.std, r.n).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean and population standard deviation of `values`.
///
/// Values are sorted before summing so the result does not depend on
/// input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / n).sqrt())
}

type Key = (GadgetKind, u64, String);

fn table_from(groups: BTreeMap<Key, Vec<f64>>) -> EvaluationTable {
    EvaluationTable {
        rows: groups
            .into_iter()
            .map(|((kind, bits, series), values)| {
                let (mean, std) = mean_std(&values);
                TableRow {
                    kind,
                    density: f64::from_bits(bits),
                    series,
                    mean,
                    std,
                    n: values.len(),
                }
            })
            .collect(),
    }
}

/// Groups observations by (kind, density, series).
pub fn aggregate(observations: &[Observation]) -> Result<EvaluationTable> {
    if observations.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for o in observations {
        groups
            .entry((o.kind, o.density.to_bits(), o.series.clone()))
            .or_default()
            .push(o.value);
    }
    Ok(table_from(groups))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub kind: GadgetKind,
    pub density: f64,
    pub model_epochs: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Runs that hit the iteration cap without reaching tau.
    pub capped: usize,
}

pub const ITERATIONS_CSV_HEADER: &str = "kind,density,model_epochs,mean_iterations,std_population,n,capped";

/// Mean iterations per (kind, density, substitute epochs).
pub fn iterations_by_density(reports: &[AttackReport]) -> Result<Vec<IterationRow>> {
    if reports.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut groups: BTreeMap<(GadgetKind, u64, usize), Vec<&AttackReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.kind, r.density.to_bits(), r.model_epochs))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((kind, bits, model_epochs), rs)| {
            let values: Vec<f64> = rs.iter().map(|r| r.iterations_used as f64).collect();
            let (mean, std) = mean_std(&values);
            IterationRow {
                kind,
                density: f64::from_bits(bits),
                model_epochs,
                mean,
                std,
                n: rs.len(),
                capped: rs.iter().filter(|r| !r.reached_tau).count(),
            }
        })
        .collect())
}

pub fn iterations_csv(rows: &[IterationRow]) -> String {
    let mut out = format!("{ITERATIONS_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.kind, r.density, r.model_epochs, r.mean, r.std, r.n, r.capped
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(series: &str, value: f64) -> Observation {
        Observation {
            kind: GadgetKind::Se,
            density: 0.02,
            series: series.into(),
            value,
        }
    }

    #[test]
    fn hand_computed_statistics() {
        let t = aggregate(&[obs("a", 0.0), obs("a", 1.0), obs("b", 0.3)]).unwrap();
        let a = t.get(GadgetKind::Se, 0.02, "a").unwrap();
        assert_eq!((a.mean, a.std, a.n), (0.5, 0.5, 2));
        let b = t.get(GadgetKind::Se, 0.02, "b").unwrap();
        assert_eq!((b.mean, b.std, b.n), (0.3, 0.0, 1));
        let same = aggregate(&[obs("a", 0.7), obs("a", 0.7)]).unwrap();
        assert_eq!(same.rows[0].std, 0.0);
        assert!(matches!(aggregate(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn permutation_invariant() {
        let vals = [0.1, 0.7, 0.2, 0.9, 0.35, 0.0001, 0.5];
        let fwd: Vec<_> = vals.iter().map(|&v| obs("s", v)).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        rev.swap(1, 4);
        assert_eq!(aggregate(&fwd).unwrap(), aggregate(&rev).unwrap());
    }

    #[test]
    fn csv_has_stable_header() {
        let t = aggregate(&[obs("original", 0.0)]).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(EvaluationTable::CSV_HEADER));
        assert_eq!(lines.next(), Some("se,0.02,original,0,0,1"));
    }
}
