//! Evaluation report document.

use confgen::metrics::{summarize, Summary};
use confgen::Element;
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub format_version: u32,
    pub delta: f64,
    pub delta_sweep: Vec<f64>,
    pub mmd_settings: MmdSettings,
    pub molecules: Vec<MoleculeRow>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdSettings {
    pub kernel: String,
    pub bandwidth: String,
    pub unbiased: bool,
    pub atom_filter: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeRow {
    pub id: String,
    pub n_generated: usize,
    pub n_reference: usize,
    /// Set when the molecule could not be scored; the metric fields are then
    /// absent and the molecule is left out of the aggregate.
    pub error: Option<String>,
    pub cov: Option<f64>,
    pub mat: Option<f64>,
    pub junk: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    pub diversity: Option<Diversity>,
    pub mmd: Option<MmdRow>,
    /// Why `mmd` is absent for an otherwise scored molecule.
    pub mmd_error: Option<String>,
}

impl MoleculeRow {
    pub fn failed(id: String, n_generated: usize, n_reference: usize, error: String) -> Self {
        MoleculeRow {
            id,
            n_generated,
            n_reference,
            error: Some(error),
            cov: None,
            mat: None,
            junk: None,
            sweep: Vec::new(),
            diversity: None,
            mmd: None,
            mmd_error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub delta: f64,
    pub cov: f64,
    pub junk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diversity {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdRow {
    pub single: Summary,
    pub pair: Option<Summary>,
    pub all: f64,
    pub pair_count: usize,
    pub n_generated_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAggregate {
    pub delta: f64,
    pub cov: Summary,
    pub junk: Summary,
}

/// Mean and median across scored molecules. Summaries are absent when no
/// molecule contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub molecules: usize,
    pub scored: usize,
    pub errors: usize,
    pub cov: Option<Summary>,
    pub mat: Option<Summary>,
    pub junk: Option<Summary>,
    pub diversity: Option<Summary>,
    pub mmd_single: Option<Summary>,
    pub mmd_pair: Option<Summary>,
    pub mmd_all: Option<Summary>,
    pub sweep: Vec<SweepAggregate>,
}

pub fn aggregate(rows: &[MoleculeRow], sweep: &[f64]) -> Aggregate {
    let scored: Vec<&MoleculeRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let col = |f: &dyn Fn(&MoleculeRow) -> Option<f64>| -> Option<Summary> {
        let v: Vec<f64> = scored.iter().filter_map(|r| f(r)).collect();
        summarize(&v)
    };
    let sweep = sweep
        .iter()
        .enumerate()
        .filter_map(|(k, &delta)| {
            Some(SweepAggregate {
                delta,
                cov: col(&|r| r.sweep.get(k).map(|p| p.cov))?,
                junk: col(&|r| r.sweep.get(k).map(|p| p.junk))?,
            })
        })
        .collect();
    Aggregate {
        molecules: rows.len(),
        scored: scored.len(),
        errors: rows.len() - scored.len(),
        cov: col(&|r| r.cov),
        mat: col(&|r| r.mat),
        junk: col(&|r| r.junk),
        diversity: col(&|r| r.diversity.map(|d| d.mean)),
        mmd_single: col(&|r| r.mmd.as_ref().map(|m| m.single.mean)),
        mmd_pair: col(&|r| r.mmd.as_ref().and_then(|m| m.pair.map(|p| p.mean))),
        mmd_all: col(&|r| r.mmd.as_ref().map(|m| m.all)),
        sweep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, cov: f64) -> MoleculeRow {
        MoleculeRow {
            cov: Some(cov),
            mat: Some(1.0 - cov),
            junk: Some(0.0),
            error: None,
            sweep: vec![SweepPoint { delta: 0.1, cov, junk: 0.5 }],
            ..MoleculeRow::failed(id.into(), 2, 1, String::new())
        }
    }

    #[test]
    fn aggregate_skips_error_rows() {
        let rows = vec![
            row("a", 1.0),
            row("b", 0.0),
            row("c", 0.5),
            MoleculeRow::failed("d".into(), 0, 1, "no generated conformations".into()),
        ];
        let a = aggregate(&rows, &[0.1]);
        assert_eq!((a.molecules, a.scored, a.errors), (4, 3, 1));
        assert_eq!(a.cov, Some(Summary { mean: 0.5, median: 0.5 }));
        assert_eq!(a.sweep[0].junk, Summary { mean: 0.5, median: 0.5 });
        assert!(a.mmd_all.is_none());
    }

    #[test]
    fn all_errors_give_empty_summaries() {
        let rows = vec![MoleculeRow::failed("a".into(), 0, 3, "x".into())];
        let a = aggregate(&rows, &[]);
        assert_eq!(a.scored, 0);
        assert!(a.cov.is_none() && a.mat.is_none());
    }
}
