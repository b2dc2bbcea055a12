//! Accuracy as a function of the latent token budget.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::decode::{accuracy, decode_all, DecodeOptions};
use super::intervention::InterventionMode;
use crate::data::{is_square_budget, TrainingExample};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pca::PcaBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    // Shifted by the first value so identical inputs give exactly that mean and zero spread.
    let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepTable {
    /// One summary per budget, in first-seen order.
    pub fn summary(&self) -> Vec<BudgetSummary> {
        let mut budgets: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !budgets.contains(&r.budget) {
                budgets.push(r.budget);
            }
        }
        budgets
            .into_iter()
            .map(|b| {
                let acc: Vec<f64> = self.rows.iter().filter(|r| r.budget == b).map(|r| r.accuracy).collect();
                let (mean, std) = mean_std(&acc);
                BudgetSummary {
                    budget: b,
                    mean,
                    std,
                    n_seeds: acc.len(),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in self.summary() {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Every budget must be 0 or a perfect square; checked before any decoding.
pub fn check_budgets(budgets: &[usize]) -> Result<()> {
    match budgets.iter().find(|&&b| b != 0 && !is_square_budget(b)) {
        Some(&b) => Err(Error::BudgetNotSquare(b)),
        None => Ok(()),
    }
}

/// Decodes the whole eval set for each (budget, seed). Budget 0 runs in
/// zero-latent mode; other budgets use `template.mode`.
pub fn budget_sweep(
    params: &ModelParams,
    basis: &PcaBasis,
    eval_set: &[TrainingExample],
    budgets: &[usize],
    seeds: &[u64],
    template: &DecodeOptions,
    workers: usize,
) -> Result<SweepTable> {
    check_budgets(budgets)?;
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty eval set".into()));
    }
    let mut rows = Vec::new();
    for &budget in budgets {
        let options = DecodeOptions {
            budget,
            mode: if budget == 0 { InterventionMode::ZeroLatent } else { template.mode },
            ..template.clone()
        };
        for &seed in seeds {
            let transcripts = decode_all(params, basis, eval_set, &options, seed, workers)?;
            rows.push(SweepRow {
                budget,
                seed,
                accuracy: accuracy(&transcripts, eval_set),
                n_examples: eval_set.len(),
            });
        }
    }
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_validation() {
        assert!(check_budgets(&[0, 4, 16, 36, 64, 144]).is_ok());
        let err = check_budgets(&[4, 5]).unwrap_err();
        assert!(matches!(err, Error::BudgetNotSquare(5)));
        assert!(err.to_string().contains("budget must be a perfect square"));
    }

    #[test]
    fn summary_statistics() {
        let t = SweepTable {
            rows: vec![
                SweepRow { budget: 4, seed: 1, accuracy: 0.5, n_examples: 2 },
                SweepRow { budget: 4, seed: 2, accuracy: 1.0, n_examples: 2 },
                SweepRow { budget: 0, seed: 1, accuracy: 0.0, n_examples: 2 },
            ],
        };
        let s = t.summary();
        assert_eq!(s[0].budget, 4);
        assert_eq!(s[0].mean, 0.75);
        assert_eq!(s[0].std, 0.25);
        assert_eq!(s[1].std, 0.0);
        assert_eq!(mean_std(&[0.72; 3]), (0.72, 0.0));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("budget,seed,accuracy,n_examples"));
        assert_eq!(text.lines().count(), 4);
    }
}
