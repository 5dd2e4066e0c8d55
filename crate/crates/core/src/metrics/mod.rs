//! Clustering quality and fairness metrics.
//!
//! Label-based metrics (accuracy, NMI, balance, MNCE, GDP) work on integer
//! label slices; correlation metrics ([`rho_star_neural`], [`rho_star_ace_oracle`])
//! work on raw feature matrices. Everything that aggregates into a report
//! goes through [`MetricsReport`], which serializes to a flat text form
//! (percent values, one decimal) and to JSON at full precision.
//!
//! Entropies and mutual information use natural logarithms unless a metric
//! is explicitly base-invariant (MNCE normalizes a ratio of entropies, so
//! the base cancels).

mod bound;
mod hungarian;
mod rho;

pub use bound::{bound_report, BoundReport};
pub use hungarian::assign_min;
pub use rho::{
    column_matrix, one_hot, rho_star_ace_oracle, rho_star_neural, RhoStarConfig, RHO_MIN_SAMPLES,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint count table between two integer labelings, with cached totals.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// counts[[a, b]] = number of samples with first label a, second label b.
    pub counts: Array2<f64>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub total: f64,
}

impl ContingencyTable {
    /// Builds the table from two equal-length label slices. Dimensions are
    /// inferred as `max(label) + 1` on each side.
    pub fn from_labels(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::invalid(format!(
                "label slices disagree in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::invalid("label slices are empty"));
        }
        let n_a = a.iter().max().unwrap() + 1;
        let n_b = b.iter().max().unwrap() + 1;
        let mut counts = Array2::zeros((n_a, n_b));
        for (&x, &y) in a.iter().zip(b) {
            counts[[x, y]] += 1.0;
        }
        Ok(Self::from_counts(counts))
    }

    /// Wraps an existing count matrix.
    pub fn from_counts(counts: Array2<f64>) -> Self {
        let row_sums: Vec<f64> = counts.rows().into_iter().map(|r| r.sum()).collect();
        let col_sums: Vec<f64> = counts.columns().into_iter().map(|c| c.sum()).collect();
        let total = row_sums.iter().sum();
        Self {
            counts,
            row_sums,
            col_sums,
            total,
        }
    }
}

/// Unsupervised clustering accuracy: the best one-to-one matching between
/// cluster ids and class labels, as a fraction of samples.
pub fn acc(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(clusters, labels)?;
    Ok(hungarian::best_match_count(&table.counts) / table.total)
}

/// x * ln(x) with the continuous extension 0 at x = 0.
fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats of a count vector.
fn entropy_from_counts(counts: &[f64], total: f64) -> f64 {
    -counts.iter().map(|&c| xlnx(c / total)).sum::<f64>()
}

/// Plug-in mutual information in nats between two labelings.
///
/// Exactly zero (not merely tiny) when every joint count equals the
/// product of its marginals over the total, which holds for the integer
/// tables used in tests because the ratio computes to 1.0 in f64.
pub fn mi_plugin(a: &[usize], b: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(a, b)?;
    Ok(mi_from_table(&table))
}

fn mi_from_table(table: &ContingencyTable) -> f64 {
    let n = table.total;
    let mut mi = 0.0;
    for ((i, j), &c) in table.counts.indexed_iter() {
        if c > 0.0 {
            let ratio = c * n / (table.row_sums[i] * table.col_sums[j]);
            // ratio == 1.0 exactly for product-form integer tables.
            mi += (c / n) * ratio.ln();
        }
    }
    mi
}

/// Normalized mutual information with geometric-mean normalization:
/// I(A;B) / sqrt(H(A) H(B)). Returns 0 when either entropy is 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(a, b)?;
    let h_a = entropy_from_counts(&table.row_sums, table.total);
    let h_b = entropy_from_counts(&table.col_sums, table.total);
    if h_a <= 0.0 || h_b <= 0.0 {
        return Ok(0.0);
    }
    Ok(mi_from_table(&table) / (h_a * h_b).sqrt())
}

/// Minimum over clusters and groups of the within-cluster group fraction
/// |C_k ∩ G_t| / |C_k|. An empty cluster id (no samples assigned) yields 0.
pub fn balance(clusters: &[usize], groups: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(clusters, groups)?;
    let mut bal = f64::INFINITY;
    for (k, row) in table.counts.rows().into_iter().enumerate() {
        let size = table.row_sums[k];
        if size == 0.0 {
            return Ok(0.0);
        }
        for &c in row.iter() {
            bal = bal.min(c / size);
        }
    }
    Ok(bal)
}

/// Minimal normalized conditional entropy: min_k H(G | C = k) / H(G).
///
/// Base-invariant (the ratio cancels the log base). Individual per-cluster
/// ratios can exceed 1, but the min cannot: min_k H(G|C=k) <= H(G|C) <= H(G).
/// Errors when G has a single global group (H(G) = 0).
pub fn mnce(clusters: &[usize], groups: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(clusters, groups)?;
    let h_g = entropy_from_counts(&table.col_sums, table.total);
    if h_g <= 0.0 {
        return Err(Error::invalid(
            "MNCE is undefined when all samples share one sensitive group",
        ));
    }
    let mut min_ratio = f64::INFINITY;
    for (k, row) in table.counts.rows().into_iter().enumerate() {
        let size = table.row_sums[k];
        if size == 0.0 {
            continue;
        }
        let h_cond = entropy_from_counts(&row.to_vec(), size);
        min_ratio = min_ratio.min(h_cond / h_g);
    }
    Ok(min_ratio)
}

/// Weighted harmonic mean of NMI and MNCE:
/// (1 + m^2) * nmi * mnce / (m^2 * nmi + mnce). Returns 0 when the
/// denominator is 0.
pub fn f_measure(nmi: f64, mnce: f64, m: f64) -> f64 {
    let denom = m * m * nmi + mnce;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 + m * m) * nmi * mnce / denom
}

/// Generalized demographic-parity gap: the largest difference, over output
/// values and ordered group pairs, of P(Y = l | G = t) - P(Y = l | G = t').
/// Errors when any group id in 0..max has no samples.
pub fn gdp(outputs: &[usize], groups: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(outputs, groups)?;
    let n_groups = table.counts.ncols();
    if n_groups < 2 {
        return Err(Error::invalid(
            "GDP needs at least two sensitive groups",
        ));
    }
    for (t, &s) in table.col_sums.iter().enumerate() {
        if s == 0.0 {
            return Err(Error::invalid(format!("sensitive group {t} has no samples")));
        }
    }
    let mut gap: f64 = 0.0;
    for l in 0..table.counts.nrows() {
        for t in 0..n_groups {
            for t2 in 0..n_groups {
                if t == t2 {
                    continue;
                }
                let p_t = table.counts[[l, t]] / table.col_sums[t];
                let p_t2 = table.counts[[l, t2]] / table.col_sums[t2];
                gap = gap.max(p_t - p_t2);
            }
        }
    }
    Ok(gap)
}

/// Lower-bound transform h(v) = max(ln((2+v)/(2-v)) - 2v/(2+v),
/// (144 v^2 + 8 v^4 + v^6) / 288), defined on [0, 2).
///
/// The polynomial branch is written over the common denominator 288 so
/// that h(1) = 153/288 = 0.53125 lands exactly in f64.
pub fn h_lemma1(v: f64) -> Result<f64> {
    if !(0.0..2.0).contains(&v) {
        return Err(Error::invalid(format!(
            "h is defined on [0, 2), got {v}"
        )));
    }
    let log_branch = ((2.0 + v) / (2.0 - v)).ln() - 2.0 * v / (2.0 + v);
    let v2 = v * v;
    let poly_branch = (144.0 * v2 + 8.0 * v2 * v2 + v2 * v2 * v2) / 288.0;
    Ok(log_branch.max(poly_branch))
}

/// Evaluation summary. Fields are `None` when the metric does not apply
/// to the run (for example GDP without discrete groups, or MNCE with a
/// single global group).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub bal: Option<f64>,
    pub mnce: Option<f64>,
    pub f_m: Option<f64>,
    pub gdp: Option<f64>,
    pub rho_star_cg: Option<f64>,
    pub rho_star_zg: Option<f64>,
    pub mi_cg_plugin: Option<f64>,
    pub bound: Option<BoundReport>,
}

impl MetricsReport {
    /// Flat `name=value` listing. Values are percentages with one decimal;
    /// absent metrics are omitted. The `bound_flagged` line is 0 or 1.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{name}={:.1}\n", v * 100.0));
            }
        };
        push("acc", self.acc);
        push("nmi", self.nmi);
        push("bal", self.bal);
        push("mnce", self.mnce);
        push("f_m", self.f_m);
        push("gdp", self.gdp);
        push("rho_star_cg", self.rho_star_cg);
        push("rho_star_zg", self.rho_star_zg);
        push("mi_cg_plugin", self.mi_cg_plugin);
        if let Some(b) = &self.bound {
            push("bound_eta", Some(b.eta));
            push("bound_gdp", Some(b.gdp));
            push("bound_lower", Some(b.lower));
            push("bound_club", Some(b.club_estimate));
            out.push_str(&format!("bound_flagged={}\n", u8::from(b.flagged)));
        }
        out
    }

    /// Full-precision JSON form.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
