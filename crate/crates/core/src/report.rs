//! Metric rows, CSV output and strategy comparison tables.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::Strategy;
use crate::models::SubModelKind;
use crate::trainer::{mean, EpochMetrics};

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mant}e{sign}{:02}", exp.abs());
    }
    trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Validation(format!("writing {}: {other:?}", path.display())),
    }
}

/// One metrics.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub epoch: usize,
    pub accuracies: Vec<f64>,
    pub avg_accuracy: f64,
    pub loss: f64,
    pub terms: Vec<(String, f64)>,
    pub lr: f64,
}

impl MetricsRecord {
    pub fn from_epoch(run_id: &str, strategy: Strategy, seed: u64, m: &EpochMetrics) -> Self {
        Self {
            run_id: run_id.to_string(),
            strategy,
            seed,
            epoch: m.epoch,
            accuracies: m.accuracies.clone(),
            avg_accuracy: m.avg_accuracy,
            loss: m.loss,
            terms: m.terms.clone(),
            lr: m.lr,
        }
    }

    pub fn header(&self, kind: SubModelKind) -> Vec<String> {
        let mut h: Vec<String> = ["run_id", "strategy", "seed", "epoch"].map(String::from).to_vec();
        h.extend((1..=self.accuracies.len()).map(|i| kind.label(i)));
        h.push("avg".into());
        h.push("loss".into());
        h.extend(self.terms.iter().map(|(n, _)| n.clone()));
        h.push("lr".into());
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.run_id.clone(),
            self.strategy.to_string(),
            self.seed.to_string(),
            self.epoch.to_string(),
        ];
        f.extend(self.accuracies.iter().map(|&a| fmt_g(a)));
        f.push(fmt_g(self.avg_accuracy));
        f.push(fmt_g(self.loss));
        f.extend(self.terms.iter().map(|(_, v)| fmt_g(*v)));
        f.push(fmt_g(self.lr));
        f
    }
}

pub fn write_metrics_csv(path: &Path, kind: SubModelKind, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if let Some(first) = rows.first() {
        w.write_record(first.header(kind)).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.write_record(r.fields()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Sample standard deviation (`n − 1` denominator); 0 for one value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Best-epoch accuracies of every (strategy, seed) run, arranged like the
/// accuracy tables of flexible-model papers: one row per sub-model plus an
/// average row, one column per strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub kind: SubModelKind,
    pub strategies: Vec<Strategy>,
    /// `runs[s]`: best-epoch per-sub-model accuracies of each seed under
    /// strategy `s`.
    pub runs: Vec<Vec<Vec<f64>>>,
}

/// Mean and sample std over seeds, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

impl Comparison {
    pub fn new(kind: SubModelKind, strategies: Vec<Strategy>, runs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if strategies.is_empty() || strategies.len() != runs.len() || runs.iter().any(Vec::is_empty) {
            return Err(Error::Validation("comparison needs at least one run per strategy".into()));
        }
        let n = runs[0][0].len();
        if runs.iter().flatten().any(|r| r.len() != n) {
            return Err(Error::Validation("runs disagree on the number of sub-models".into()));
        }
        Ok(Self { kind, strategies, runs })
    }

    pub fn num_submodels(&self) -> usize {
        self.runs[0][0].len()
    }

    /// Row labels: sub-models then `Avg`.
    pub fn row_labels(&self) -> Vec<String> {
        let mut l: Vec<String> = (1..=self.num_submodels()).map(|i| self.kind.label(i)).collect();
        l.push("Avg".into());
        l
    }

    /// Cell for row `r` (sub-model `r + 1`, or the average when
    /// `r == n`) and strategy column `s`.
    pub fn cell(&self, r: usize, s: usize) -> Cell {
        let per_seed: Vec<f64> = self.runs[s]
            .iter()
            .map(|acc| 100.0 * if r == acc.len() { mean(acc) } else { acc[r] })
            .collect();
        Cell {
            mean: mean(&per_seed),
            std: sample_std(&per_seed),
        }
    }

    /// Strategies with the highest mean in row `r`, joined by `+` on ties.
    pub fn best(&self, r: usize) -> String {
        let means: Vec<f64> = (0..self.strategies.len()).map(|s| self.cell(r, s).mean).collect();
        let top = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.strategies
            .iter()
            .zip(&means)
            .filter(|(_, &m)| m == top)
            .map(|(s, _)| s.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["sub_model".to_string()];
        h.extend(self.strategies.iter().map(|s| s.to_string()));
        h.push("best".into());
        h
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        self.row_labels()
            .into_iter()
            .enumerate()
            .map(|(r, label)| {
                let mut row = vec![label];
                row.extend((0..self.strategies.len()).map(|s| {
                    let c = self.cell(r, s);
                    format!("{}±{}", fmt_g(c.mean), fmt_g(c.std))
                }));
                row.push(self.best(r));
                row
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(self.header()).map_err(|e| csv_err(path, e))?;
        for row in self.rows() {
            w.write_record(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Plain-text rendering with aligned columns.
    pub fn render(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows());
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(v, &w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Mean average accuracy (percent) of TAM and NONE when both were run.
    pub fn tam_vs_none(&self) -> Option<(f64, f64)> {
        let n = self.num_submodels();
        let col = |s: Strategy| self.strategies.iter().position(|&x| x == s);
        Some((self.cell(n, col(Strategy::Tam)?).mean, self.cell(n, col(Strategy::None)?).mean))
    }

    /// One-line verdict on the directional claim "TAM ≥ NONE on average".
    pub fn verdict(&self) -> Option<String> {
        self.tam_vs_none().map(|(tam, none)| {
            let rel = if tam >= none { ">=" } else { "<" };
            format!(
                "average accuracy: TAM {} vs NONE {} -> TAM {rel} NONE (directional check, not a gate)",
                fmt_g(tam),
                fmt_g(none)
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_format_matches_c_printf() {
        // reference strings from printf("%g")
        for (x, want) in [
            (0.405465108108, "0.405465"),
            (93.1, "93.1"),
            (1.0, "1"),
            (123456789.0, "1.23457e+08"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (100.0, "100"),
            (0.1 * 0.1, "0.01"),
        ] {
            assert_eq!(fmt_g(x), want, "{x}");
        }
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[7.0]), 0.0);
    }

    #[test]
    fn single_strategy_table() {
        let c = Comparison::new(SubModelKind::Exit, vec![Strategy::None], vec![vec![vec![0.5, 0.75, 1.0]]]).unwrap();
        let rows = c.rows();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3], vec!["Avg", "75±0", "NONE"]);
        assert_eq!(c.header(), vec!["sub_model", "NONE", "best"]);
        assert!(c.verdict().is_none());
    }

    #[test]
    fn ties_list_every_best_strategy() {
        let acc = vec![vec![0.6, 0.8]];
        let c = Comparison::new(
            SubModelKind::Switch,
            vec![Strategy::Ipkd, Strategy::Ta1, Strategy::Tam],
            vec![acc.clone(), acc.clone(), acc],
        )
        .unwrap();
        assert_eq!(c.best(0), "IPKD+TA1+TAM");
        assert_eq!(c.row_labels()[1], "switch2");
    }
}
