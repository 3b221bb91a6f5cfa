use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::error::{Error, Result};

const SHIPPED_REFERENCE: &str = include_str!("../../data/reference_dice.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDice {
    pub dataset: String,
    pub model: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceParams {
    pub model: String,
    pub params: u64,
}

/// Externally reported numbers, kept apart from anything measured here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    pub label: String,
    pub caveat: String,
    pub dice: Vec<ReferenceDice>,
    pub parameters: Vec<ReferenceParams>,
}

impl ReferenceTable {
    /// The reference table bundled with the crate.
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_REFERENCE).expect("bundled reference table parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("reference table: {e}")))
    }

    /// Model columns in first-appearance order.
    pub fn models(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.dice
            .iter()
            .filter(|r| seen.insert(r.model.clone()))
            .map(|r| r.model.clone())
            .collect()
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.dice
            .iter()
            .filter(|r| seen.insert(r.dataset.clone()))
            .map(|r| r.dataset.clone())
            .collect()
    }

    pub fn get(&self, dataset: &str, model: &str) -> Option<f64> {
        self.dice
            .iter()
            .find(|r| r.dataset == dataset && r.model == model)
            .map(|r| r.dice)
    }
}

/// One dataset row: the measured mean (if any) beside every reference value,
/// with `measured − reference` deltas when both exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub measured_model: Option<String>,
    pub measured_mean: Option<f64>,
    pub reference: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub eval_results: Vec<EvalResult>,
    /// Parameter counts measured on instantiated models.
    pub parameter_counts: BTreeMap<String, u64>,
    pub reference_table: Option<ReferenceTable>,
    pub comparison: Vec<ComparisonRow>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

pub fn compare_report(
    results: Vec<EvalResult>,
    reference: Option<ReferenceTable>,
    parameter_counts: BTreeMap<String, u64>,
) -> RunReport {
    let mut datasets: Vec<String> = reference.as_ref().map(ReferenceTable::datasets).unwrap_or_default();
    for r in &results {
        if !datasets.contains(&r.dataset_name) {
            datasets.push(r.dataset_name.clone());
        }
    }
    let mut comparison = Vec::new();
    for ds in &datasets {
        let refs: BTreeMap<String, f64> = reference
            .as_ref()
            .map(|t| {
                t.dice
                    .iter()
                    .filter(|r| &r.dataset == ds)
                    .map(|r| (r.model.clone(), r.dice))
                    .collect()
            })
            .unwrap_or_default();
        let measured: Vec<&EvalResult> = results.iter().filter(|r| &r.dataset_name == ds).collect();
        if measured.is_empty() {
            comparison.push(ComparisonRow {
                dataset: ds.clone(),
                measured_model: None,
                measured_mean: None,
                reference: refs,
                delta: BTreeMap::new(),
            });
            continue;
        }
        for m in measured {
            let delta = refs.iter().map(|(k, v)| (k.clone(), m.mean_dice - v)).collect();
            comparison.push(ComparisonRow {
                dataset: ds.clone(),
                measured_model: Some(m.model.clone()),
                measured_mean: Some(m.mean_dice),
                reference: refs.clone(),
                delta,
            });
        }
    }
    RunReport {
        eval_results: results,
        parameter_counts,
        reference_table: reference,
        comparison,
        artifacts: BTreeMap::new(),
    }
}

impl RunReport {
    /// Markdown rendering: measured results, the comparison table (reference
    /// values printed exactly as shipped) and parameter counts.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n");
        if !self.eval_results.is_empty() {
            s.push_str("## Measured\n\n| dataset | model | n | mean Dice | std Dice | prompt | threshold |\n|---|---|---|---|---|---|---|\n");
            for r in &self.eval_results {
                s.push_str(&format!(
                    "| {} | {} | {} | {:.4} | {:.4} | {:?} | {} |\n",
                    r.dataset_name, r.model, r.n_samples, r.mean_dice, r.std_dice, r.prompt_policy, r.threshold
                ));
            }
            s.push('\n');
        }
        let models = self
            .reference_table
            .as_ref()
            .map(ReferenceTable::models)
            .unwrap_or_default();
        if let Some(t) = &self.reference_table {
            s.push_str(&format!("## Comparison\n\nReference columns: {}.\n\n", t.label));
            s.push_str("| dataset | measured model | measured |");
            for m in &models {
                s.push_str(&format!(" {m} (reference) |"));
            }
            for m in &models {
                s.push_str(&format!(" Δ vs {m} |"));
            }
            s.push_str(&format!("\n|{}\n", "---|".repeat(3 + 2 * models.len())));
            for row in &self.comparison {
                let cell = |v: Option<f64>, signed: bool| match v {
                    Some(v) if signed => format!("{v:+.4}"),
                    Some(v) => format!("{v:.4}"),
                    None => "—".into(),
                };
                s.push_str(&format!(
                    "| {} | {} | {} |",
                    row.dataset,
                    row.measured_model.as_deref().unwrap_or("—"),
                    cell(row.measured_mean, false)
                ));
                for m in &models {
                    s.push_str(&format!(" {} |", cell(row.reference.get(m).copied(), false)));
                }
                for m in &models {
                    s.push_str(&format!(" {} |", cell(row.delta.get(m).copied(), true)));
                }
                s.push('\n');
            }
            s.push_str(&format!("\n{}\n\n", t.caveat));
        }
        s.push_str("## Parameters\n\n| model | parameters | source |\n|---|---|---|\n");
        for (m, p) in &self.parameter_counts {
            s.push_str(&format!("| {m} | {p} | measured |\n"));
        }
        if let Some(t) = &self.reference_table {
            for p in &t.parameters {
                s.push_str(&format!("| {} | {} | reference |\n", p.model, p.params));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_only_report_has_no_deltas() {
        let r = compare_report(vec![], Some(ReferenceTable::shipped()), BTreeMap::new());
        assert_eq!(r.comparison.len(), 4);
        assert!(r
            .comparison
            .iter()
            .all(|c| c.delta.is_empty() && c.reference.len() == 3));
    }
}
