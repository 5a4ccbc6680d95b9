// SPDX-License-Identifier: MIT OR Apache-2.0

//! Leave-one-group-out Sharpe attribution.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{annualized_sharpe, jk_memmel_test, Alternative};
use crate::error::{Error, Result};
use crate::io::{csv_field, fmt_opt, CsvBuilder};

/// Long-short returns keyed by trading day, days strictly increasing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DailyReturns {
    pub days: Vec<usize>,
    pub returns: Vec<f64>,
}

impl DailyReturns {
    pub fn sharpe(&self) -> Option<f64> {
        annualized_sharpe(&self.returns).ok().and_then(|r| r.sharpe)
    }

    /// Returns of both series on the days they share.
    pub fn paired(&self, other: &DailyReturns) -> (Vec<f64>, Vec<f64>) {
        let theirs: BTreeMap<usize, f64> = other.days.iter().copied().zip(other.returns.iter().copied()).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (d, r) in self.days.iter().zip(&self.returns) {
            if let Some(o) = theirs.get(d) {
                a.push(*r);
                b.push(*o);
            }
        }
        (a, b)
    }
}

/// One pipeline run restricted to a feature subset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunOutcome {
    pub returns: DailyReturns,
    /// Mean over days of the share of correctly signed news predictions.
    pub avg_daily_accuracy: Option<f64>,
    /// Share of correctly signed predictions pooled over all news-days.
    pub total_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyRow {
    pub group: String,
    /// `SR_full − SR_without`.
    pub shapley_sharpe: Option<f64>,
    pub sharpe_without: Option<f64>,
    /// Sharpe of the model using only this group.
    pub individual_sharpe: Option<f64>,
    pub avg_daily_accuracy: Option<f64>,
    pub total_accuracy: Option<f64>,
    pub n_features: usize,
    /// Stars for the leave-out run against the full run.
    pub significance: String,
    pub individual_significance: String,
    pub empty: bool,
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

fn stars(full: &DailyReturns, other: &DailyReturns) -> String {
    let (a, b) = full.paired(other);
    match jk_memmel_test(&a, &b, Alternative::TwoSided) {
        Ok(r) => significance_stars(r.p_value).to_string(),
        Err(_) => String::new(),
    }
}

fn optional(run: Result<RunOutcome>) -> Result<Option<RunOutcome>> {
    match run {
        Ok(o) => Ok(Some(o)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs the pipeline on all features, on each group alone, and on all
/// features but each group. `run` receives a sorted feature subset; it may
/// return [`Error::Degenerate`] when a subset cannot produce a portfolio.
pub fn shapley_sharpe_table<F>(groups: &[(String, Vec<usize>)], run: F) -> Result<(RunOutcome, Vec<ShapleyRow>)>
where
    F: Fn(&[usize]) -> Result<RunOutcome> + Sync,
{
    let mut all = BTreeSet::new();
    for (name, feats) in groups {
        for f in feats {
            if !all.insert(*f) {
                return Err(Error::invalid(format!("feature {f} appears in more than one group (second: {name})")));
            }
        }
    }
    let all: Vec<usize> = all.into_iter().collect();
    let full = run(&all)?;
    let full_sr = full.returns.sharpe();
    let rows: Vec<ShapleyRow> = groups
        .par_iter()
        .map(|(name, feats)| -> Result<ShapleyRow> {
            if feats.is_empty() {
                return Ok(ShapleyRow {
                    group: name.clone(),
                    shapley_sharpe: None,
                    sharpe_without: None,
                    individual_sharpe: None,
                    avg_daily_accuracy: None,
                    total_accuracy: None,
                    n_features: 0,
                    significance: String::new(),
                    individual_significance: String::new(),
                    empty: true,
                });
            }
            let drop: BTreeSet<usize> = feats.iter().copied().collect();
            let rest: Vec<usize> = all.iter().copied().filter(|f| !drop.contains(f)).collect();
            let mut only: Vec<usize> = feats.clone();
            only.sort_unstable();
            let without = optional(run(&rest))?;
            let alone = optional(run(&only))?;
            let sharpe_without = without.as_ref().and_then(|o| o.returns.sharpe());
            Ok(ShapleyRow {
                group: name.clone(),
                shapley_sharpe: full_sr.zip(sharpe_without).map(|(f, w)| f - w),
                sharpe_without,
                individual_sharpe: alone.as_ref().and_then(|o| o.returns.sharpe()),
                avg_daily_accuracy: alone.as_ref().and_then(|o| o.avg_daily_accuracy),
                total_accuracy: alone.as_ref().and_then(|o| o.total_accuracy),
                n_features: feats.len(),
                significance: without.as_ref().map(|o| stars(&full.returns, &o.returns)).unwrap_or_default(),
                individual_significance: alone.as_ref().map(|o| stars(&full.returns, &o.returns)).unwrap_or_default(),
                empty: false,
            })
        })
        .collect::<Result<_>>()?;
    Ok((full, rows))
}

pub fn shapley_csv(rows: &[ShapleyRow]) -> String {
    let mut b = CsvBuilder::new(&[
        "group",
        "shapley_sharpe",
        "individual_sharpe",
        "accuracy",
        "total_accuracy",
        "n_features",
        "significance",
    ]);
    for r in rows {
        b.row(vec![
            csv_field(&r.group),
            fmt_opt(r.shapley_sharpe),
            fmt_opt(r.individual_sharpe),
            fmt_opt(r.avg_daily_accuracy),
            fmt_opt(r.total_accuracy),
            r.n_features.to_string(),
            r.significance.clone(),
        ]);
    }
    b.finish()
}
