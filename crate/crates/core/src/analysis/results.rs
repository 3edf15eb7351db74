use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::welch_t_test;
use crate::error::{Error, Result};
use crate::training::MethodVariant;

/// Name of the row averaging every scheme seed by seed.
pub const AVG_SCHEME: &str = "Avg";

/// One finished run: a transfer scheme, a variant and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: String,
    pub variant: MethodVariant,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub scheme: String,
    pub variant: MethodVariant,
    pub mean: f64,
    /// Sample standard deviation, zero for a single seed.
    pub std: f64,
    /// `(seed, accuracy)` in seed order.
    pub seeds: Vec<(u64, f64)>,
    /// Welch p-value against Ada-TSA in the same scheme.
    pub p_vs_ada_tsa: Option<f64>,
}

impl CellStats {
    fn marker(&self) -> &'static str {
        match self.p_vs_ada_tsa {
            Some(p) if p < 0.01 => "\u{2021}",
            Some(p) if p < 0.05 => "\u{2020}",
            _ => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schemes: Vec<String>,
    pub variants: Vec<MethodVariant>,
    pub cells: Vec<CellStats>,
}

impl ResultTable {
    pub fn cell(&self, scheme: &str, variant: MethodVariant) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.variant == variant)
    }

    /// One row per cell; per-seed accuracies are `;`-separated `seed:acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,variant,n,mean,std,p_vs_ada_tsa,seeds\n");
        for c in &self.cells {
            let p = c
                .p_vs_ada_tsa
                .map(|p| format!("{p:.6}"))
                .unwrap_or_default();
            let seeds: Vec<String> = c.seeds.iter().map(|(s, a)| format!("{s}:{a:.6}")).collect();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{}\n",
                c.scheme,
                c.variant.label(),
                c.seeds.len(),
                c.mean,
                c.std,
                p,
                seeds.join(";")
            ));
        }
        out
    }

    /// Schemes as rows, variants as columns, accuracy in percent. A dagger
    /// marks cells whose difference from Ada-TSA is significant at 0.05, a
    /// double dagger at 0.01.
    pub fn to_text(&self) -> String {
        let width = self
            .schemes
            .iter()
            .map(|s| s.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!("{:width$}", "scheme");
        for v in &self.variants {
            out.push_str(&format!(" | {:>14}", v.label()));
        }
        out.push('\n');
        out.push_str(&"-".repeat(width + self.variants.len() * 17));
        out.push('\n');
        for s in &self.schemes {
            out.push_str(&format!("{s:width$}"));
            for v in &self.variants {
                let text = match self.cell(s, *v) {
                    Some(c) => format!(
                        "{:.2}\u{00b1}{:.2}{}",
                        100.0 * c.mean,
                        100.0 * c.std,
                        c.marker()
                    ),
                    None => "-".to_string(),
                };
                out.push_str(&format!(" | {text:>14}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs into cells, adds the seed-wise average row, and tests every
/// variant against Ada-TSA. Schemes keep their first-appearance order.
pub fn aggregate_results(records: &[RunRecord]) -> Result<ResultTable> {
    if records.is_empty() {
        return Err(Error::Data("no results to aggregate".into()));
    }
    let mut schemes: Vec<String> = Vec::new();
    let mut by_cell: BTreeMap<(usize, MethodVariant), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records {
        if !r.accuracy.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} {} seed {}",
                r.scheme,
                r.variant.label(),
                r.seed
            )));
        }
        if r.scheme == AVG_SCHEME {
            return Err(Error::Data(format!(
                "scheme name `{AVG_SCHEME}` is reserved"
            )));
        }
        let idx = match schemes.iter().position(|s| *s == r.scheme) {
            Some(i) => i,
            None => {
                schemes.push(r.scheme.clone());
                schemes.len() - 1
            }
        };
        if by_cell
            .entry((idx, r.variant))
            .or_default()
            .insert(r.seed, r.accuracy)
            .is_some()
        {
            return Err(Error::Data(format!(
                "duplicate run {} {} seed {}",
                r.scheme,
                r.variant.label(),
                r.seed
            )));
        }
    }
    let variants: Vec<MethodVariant> = MethodVariant::ALL
        .into_iter()
        .filter(|v| by_cell.keys().any(|(_, cv)| cv == v))
        .collect();

    // average row: for each seed present in every scheme, the mean over schemes
    let avg_idx = schemes.len();
    for &v in &variants {
        let cols: Vec<&BTreeMap<u64, f64>> =
            (0..avg_idx).filter_map(|i| by_cell.get(&(i, v))).collect();
        if cols.len() != avg_idx {
            continue;
        }
        let avg: BTreeMap<u64, f64> = cols[0]
            .keys()
            .filter(|s| cols.iter().all(|c| c.contains_key(s)))
            .map(|&s| (s, cols.iter().map(|c| c[&s]).sum::<f64>() / avg_idx as f64))
            .collect();
        if !avg.is_empty() {
            by_cell.insert((avg_idx, v), avg);
        }
    }
    schemes.push(AVG_SCHEME.to_string());

    let mut cells = Vec::new();
    for (i, scheme) in schemes.iter().enumerate() {
        let reference: Option<Vec<f64>> = by_cell
            .get(&(i, MethodVariant::AdaTsa))
            .map(|m| m.values().copied().collect());
        for &v in &variants {
            let Some(runs) = by_cell.get(&(i, v)) else {
                continue;
            };
            let values: Vec<f64> = runs.values().copied().collect();
            let (mean, std) = mean_std(&values);
            let p_vs_ada_tsa = match &reference {
                Some(r) if v != MethodVariant::AdaTsa => welch_t_test(&values, r).ok().map(|w| w.p),
                _ => None,
            };
            cells.push(CellStats {
                scheme: scheme.clone(),
                variant: v,
                mean,
                std,
                seeds: runs.iter().map(|(&s, &a)| (s, a)).collect(),
                p_vs_ada_tsa,
            });
        }
    }
    Ok(ResultTable {
        schemes,
        variants,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scheme: &str, variant: MethodVariant, seed: u64, accuracy: f64) -> RunRecord {
        RunRecord {
            scheme: scheme.into(),
            variant,
            seed,
            accuracy,
        }
    }

    #[test]
    fn mean_std_and_average_row() {
        let recs = vec![
            rec("a->b", MethodVariant::AdaTsa, 1, 0.8),
            rec("a->b", MethodVariant::AdaTsa, 2, 0.9),
            rec("a->c", MethodVariant::AdaTsa, 1, 0.6),
            rec("a->c", MethodVariant::AdaTsa, 2, 0.7),
        ];
        let t = aggregate_results(&recs).unwrap();
        assert_eq!(t.schemes, vec!["a->b", "a->c", AVG_SCHEME]);
        let c = t.cell("a->b", MethodVariant::AdaTsa).unwrap();
        assert!((c.mean - 0.85).abs() < 1e-12);
        assert!((c.std - (0.005f64).sqrt()).abs() < 1e-12);
        let avg = t.cell(AVG_SCHEME, MethodVariant::AdaTsa).unwrap();
        assert_eq!(avg.seeds, vec![(1, 0.7), (2, 0.8)]);
    }

    #[test]
    fn significance_markers() {
        let mut recs = Vec::new();
        for s in 0..5 {
            let jitter = s as f64 * 0.001;
            recs.push(rec("x", MethodVariant::AdaTsa, s, 0.9 + jitter));
            recs.push(rec("x", MethodVariant::FullFt, s, 0.7 + jitter * 2.0));
            recs.push(rec("x", MethodVariant::AdaFt, s, 0.9 + jitter * 1.5));
        }
        let t = aggregate_results(&recs).unwrap();
        assert!(
            t.cell("x", MethodVariant::FullFt)
                .unwrap()
                .p_vs_ada_tsa
                .unwrap()
                < 0.01
        );
        assert!(t
            .cell("x", MethodVariant::AdaTsa)
            .unwrap()
            .p_vs_ada_tsa
            .is_none());
        let text = t.to_text();
        assert!(text.contains('\u{2021}'));
        assert_eq!(
            t.variants,
            vec![
                MethodVariant::FullFt,
                MethodVariant::AdaFt,
                MethodVariant::AdaTsa
            ]
        );
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        assert!(aggregate_results(&[]).is_err());
        let r = rec("x", MethodVariant::AdaFt, 1, 0.5);
        assert!(aggregate_results(&[r.clone(), r]).is_err());
    }

    #[test]
    fn csv_is_stable() {
        let recs = vec![rec("x", MethodVariant::FullFt, 3, 0.5)];
        let a = aggregate_results(&recs).unwrap().to_csv();
        let b = aggregate_results(&recs).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with("scheme,variant,n,mean,std,p_vs_ada_tsa,seeds\nx,Full-FT,1,0.500000,0.000000,,3:0.500000\n"));
    }
}
