//! Mean and standard deviation over seeds, one row per dataset and variant.

use std::fmt::Write as _;

use lapnet_core::metrics::LedgerSummary;

use crate::engine::{JobResult, Outcome, Variant};

/// Summary columns, in CSV order. `final_*` are last-step values; `traj_*`
/// average over every evaluation of a run.
pub const MEASURES: [&str; 8] = [
    "final_base",
    "final_new",
    "final_overall",
    "final_forgetting",
    "final_intransigence",
    "traj_base",
    "traj_new",
    "traj_overall",
];

fn measures(s: &LedgerSummary) -> [f64; 8] {
    [
        s.base_final,
        s.new_final,
        s.overall_final,
        s.forgetting_final,
        s.intransigence_final,
        s.base_mean,
        s.new_mean,
        s.overall_mean,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    /// `(mean, std)` per entry of [`MEASURES`].
    pub stats: [(f64, f64); 8],
}

impl SummaryRow {
    pub fn get(&self, measure: &str) -> (f64, f64) {
        let i = MEASURES.iter().position(|m| *m == measure).unwrap_or_else(|| panic!("unknown measure {measure}"));
        self.stats[i]
    }
}

/// Mean and sample standard deviation; the deviation is 0 for fewer than
/// two values and both are 0 for none.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Rows ordered by dataset (in job order) and then variant.
pub fn aggregate(variants: &[Variant], jobs: &[JobResult]) -> Vec<SummaryRow> {
    let mut datasets: Vec<&str> = Vec::new();
    for j in jobs {
        if !datasets.contains(&j.dataset.as_str()) {
            datasets.push(&j.dataset);
        }
    }
    let mut rows = Vec::new();
    for d in datasets {
        for (i, v) in variants.iter().enumerate() {
            let outcomes: Vec<&Outcome> = jobs.iter().filter(|j| j.dataset == d).map(|j| &j.outcomes[i]).collect();
            let done: Vec<[f64; 8]> = outcomes
                .iter()
                .filter_map(|o| match o {
                    Outcome::Done(s) => Some(measures(s)),
                    Outcome::Failed(_) => None,
                })
                .collect();
            let stats = core::array::from_fn(|m| mean_std(&done.iter().map(|r| r[m]).collect::<Vec<_>>()));
            rows.push(SummaryRow {
                dataset: d.to_string(),
                variant: v.clone(),
                runs: done.len(),
                failed: outcomes.len() - done.len(),
                stats,
            });
        }
    }
    rows
}

/// CSV with fixed six-decimal values. Sweep rows lead with `param,value`.
pub fn to_csv(rows: &[SummaryRow]) -> String {
    let sweep = rows.first().is_some_and(|r| r.variant.sweep.is_some());
    let mut s = String::new();
    if sweep {
        s.push_str("param,value,");
    }
    s.push_str("dataset,method,runs,failed");
    for m in MEASURES {
        write!(s, ",{m}_mean,{m}_std").unwrap();
    }
    s.push('\n');
    for r in rows {
        if let Some((p, v)) = r.variant.sweep {
            write!(s, "{},{v},", p.name()).unwrap();
        }
        write!(s, "{},{},{},{}", r.dataset, r.variant.method, r.runs, r.failed).unwrap();
        for (m, sd) in r.stats {
            write!(s, ",{m:.6},{sd:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Aligned plain-text table of the headline numbers.
pub fn to_table(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<14} {:<34} {:>5} {:>15} {:>15} {:>15} {:>15}",
        "dataset", "method", "runs", "base", "new", "overall", "forgetting"
    )
    .unwrap();
    for r in rows {
        let mut name = r.variant.method.to_string();
        if let Some((p, v)) = r.variant.sweep {
            write!(name, " {}={v}", p.name()).unwrap();
        }
        let cell = |m: &str| {
            let (a, b) = r.get(m);
            format!("{a:.3} ± {b:.3}")
        };
        writeln!(
            s,
            "{:<14} {:<34} {:>5} {:>15} {:>15} {:>15} {:>15}",
            r.dataset,
            name,
            format!("{}/{}", r.runs, r.runs + r.failed),
            cell("final_base"),
            cell("final_new"),
            cell("final_overall"),
            cell("final_forgetting")
        )
        .unwrap();
    }
    s
}
