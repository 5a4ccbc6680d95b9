// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rolling-window logistic return prediction and equal-weighted long-short
//! portfolios.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasim::{NewsItem, ReturnPanel, Sentiment};
use crate::error::{Error, Result};
use crate::io::{csv_field, fmt_f, fmt_opt, CsvBuilder};
use crate::numerics::{fit_logistic_early_stopping, LogisticModel, LogisticOptions, Matrix, Standardizer};
use crate::stats::DailyReturns;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RollingConfig {
    pub train_days: usize,
    pub validation_days: usize,
    pub refit_days: usize,
    /// Share of firms in each leg.
    pub quantile: f64,
    pub min_names: usize,
    pub logistic: LogisticOptions,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            train_days: 200,
            validation_days: 50,
            refit_days: 50,
            quantile: 0.2,
            min_names: 3,
            logistic: LogisticOptions {
                max_iter: 1000,
                ..Default::default()
            },
        }
    }
}

impl RollingConfig {
    pub fn validate(&self, total_days: usize) -> Result<()> {
        if self.train_days == 0 || self.refit_days == 0 {
            return Err(Error::Config("train_days and refit_days must be positive".into()));
        }
        if self.train_days + self.validation_days >= total_days {
            return Err(Error::Config(format!(
                "train + validation ({}) must be shorter than the {total_days}-day sample",
                self.train_days + self.validation_days
            )));
        }
        if !(self.quantile > 0.0 && self.quantile <= 0.5) {
            return Err(Error::Config("quantile must be in (0, 0.5]".into()));
        }
        if self.min_names == 0 {
            return Err(Error::Config("min_names must be at least 1".into()));
        }
        Ok(())
    }
}

/// News metadata, embeddings and return-sign labels in one table.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub news: Vec<NewsItem>,
    /// Row `i` belongs to `news[i]`.
    pub features: Matrix,
    /// Sign of the forward return; `None` when it is not observable.
    pub labels: Vec<Option<bool>>,
}

impl Timeline {
    pub fn new(news: Vec<NewsItem>, features: Matrix, panel: &ReturnPanel, horizon: usize) -> Result<Self> {
        if features.rows() != news.len() {
            return Err(Error::shape("timeline", format!("{} news vs {} feature rows", news.len(), features.rows())));
        }
        let labels = news.iter().map(|n| panel.forward_return(n.firm, n.day, horizon).map(|r| r > 0.0)).collect();
        Ok(Self { news, features, labels })
    }

    pub fn num_days(&self) -> usize {
        self.news.iter().map(|n| n.day + 1).max().unwrap_or(0)
    }

    fn rows_in(&self, days: std::ops::Range<usize>) -> Vec<usize> {
        (0..self.news.len())
            .filter(|&i| days.contains(&self.news[i].day) && self.labels[i].is_some())
            .collect()
    }

    /// Same timeline restricted to a column subset.
    pub fn with_columns(&self, cols: &[usize]) -> Self {
        Self {
            news: self.news.clone(),
            features: self.features.select_columns(cols),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub train_start: usize,
    /// Exclusive; validation runs from here to `validation_end`.
    pub train_end: usize,
    pub validation_end: usize,
    /// Days scored by this window's model: `validation_end..predict_end`.
    pub predict_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowModel {
    pub window: Window,
    /// Columns of the timeline the model uses.
    pub features: Vec<usize>,
    pub standardizer: Standardizer,
    pub model: LogisticModel,
    pub train_accuracy: f64,
    pub converged: bool,
}

impl WindowModel {
    pub fn probability(&self, row: &[f64]) -> f64 {
        let sel: Vec<f64> = self.features.iter().map(|&c| row[c]).collect();
        self.model.probability(&self.standardizer.transform_row(&sel))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingFit {
    pub models: Vec<WindowModel>,
    /// Windows skipped, with the reason.
    pub skipped: Vec<(Window, String)>,
}

/// All windows for a `total_days` sample.
pub fn windows(config: &RollingConfig, total_days: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let train_end = start + config.train_days;
        let validation_end = train_end + config.validation_days;
        if validation_end >= total_days {
            break;
        }
        out.push(Window {
            train_start: start,
            train_end,
            validation_end,
            predict_end: (validation_end + config.refit_days).min(total_days),
        });
        start += config.refit_days;
    }
    out
}

/// Fits one model per window. `select` picks the columns used in a window
/// from that window's training rows only; return all columns to disable
/// selection.
pub fn fit_rolling<S>(config: &RollingConfig, timeline: &Timeline, select: S) -> Result<RollingFit>
where
    S: Fn(&Matrix, &[bool]) -> Result<Vec<usize>> + Sync,
{
    let total = timeline.num_days();
    config.validate(total)?;
    let results: Vec<std::result::Result<WindowModel, (Window, String)>> = windows(config, total)
        .into_par_iter()
        .map(|w| -> Result<_> {
            let train = timeline.rows_in(w.train_start..w.train_end);
            let val = timeline.rows_in(w.train_end..w.validation_end);
            let y: Vec<bool> = train.iter().map(|&i| timeline.labels[i].expect("filtered")).collect();
            let yv: Vec<bool> = val.iter().map(|&i| timeline.labels[i].expect("filtered")).collect();
            if y.iter().all(|v| *v) || y.iter().all(|v| !*v) {
                return Ok(Err((w, "single-class training labels".to_string())));
            }
            let x_all = timeline.features.select_rows(&train);
            let features = match select(&x_all, &y) {
                Ok(f) => f,
                Err(Error::Degenerate(msg)) => return Ok(Err((w, msg))),
                Err(e) => return Err(e),
            };
            let x = x_all.select_columns(&features);
            let standardizer = Standardizer::fit(&x);
            if standardizer.kept.is_empty() {
                return Ok(Err((w, "no non-constant features in window".to_string())));
            }
            let xs = standardizer.transform(&x);
            let xv = standardizer.transform(&timeline.features.select_rows(&val).select_columns(&features));
            let fit = if val.is_empty() {
                crate::numerics::fit_logistic(&xs, &y, &config.logistic)?
            } else {
                fit_logistic_early_stopping(&xs, &y, &xv, &yv, &config.logistic)?
            };
            let correct = (0..xs.rows()).filter(|&r| (fit.model.probability(xs.row(r)) >= 0.5) == y[r]).count();
            Ok(Ok(WindowModel {
                window: w,
                features,
                standardizer,
                model: fit.model,
                train_accuracy: correct as f64 / y.len() as f64,
                converged: fit.converged,
            }))
        })
        .collect::<Result<_>>()?;
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(m) => models.push(m),
            Err(s) => skipped.push(s),
        }
    }
    Ok(RollingFit { models, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub news_id: usize,
    pub firm: usize,
    pub day: usize,
    pub prob: f64,
}

/// Scores each news item with the model whose prediction range covers its
/// day. Returns the records and the number of items left uncovered.
pub fn predict(fit: &RollingFit, timeline: &Timeline) -> (Vec<PredictionRecord>, usize) {
    let mut out = Vec::new();
    let mut excluded = 0;
    for (i, n) in timeline.news.iter().enumerate() {
        let model = fit
            .models
            .iter()
            .find(|m| (m.window.validation_end..m.window.predict_end).contains(&n.day));
        match model {
            Some(m) => {
                debug_assert!(m.window.validation_end <= n.day);
                out.push(PredictionRecord {
                    news_id: n.id,
                    firm: n.firm,
                    day: n.day,
                    prob: m.probability(timeline.features.row(i)),
                });
            }
            None => excluded += 1,
        }
    }
    (out, excluded)
}

pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let mut b = CsvBuilder::new(&["news_id", "firm", "day", "prob"]);
    for r in records {
        b.row(vec![r.news_id.to_string(), r.firm.to_string(), r.day.to_string(), fmt_f(r.prob)]);
    }
    b.finish()
}

/// Mean daily and pooled shares of predictions whose `prob >= 0.5` matches
/// the label.
pub fn accuracy(records: &[PredictionRecord], timeline: &Timeline) -> (Option<f64>, Option<f64>) {
    let labels: BTreeMap<usize, bool> = timeline
        .news
        .iter()
        .zip(&timeline.labels)
        .filter_map(|(n, l)| l.map(|l| (n.id, l)))
        .collect();
    let mut by_day: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        if let Some(&l) = labels.get(&r.news_id) {
            let e = by_day.entry(r.day).or_default();
            e.0 += usize::from((r.prob >= 0.5) == l);
            e.1 += 1;
        }
    }
    if by_day.is_empty() {
        return (None, None);
    }
    let daily = by_day.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / by_day.len() as f64;
    let (c, n) = by_day.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (Some(daily), Some(c as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioDay {
    pub day: usize,
    pub long: Vec<usize>,
    pub short: Vec<usize>,
    /// Mean next-day return of the long leg minus that of the short leg.
    pub ret: Option<f64>,
    pub skipped: Option<String>,
}

impl PortfolioDay {
    fn skip(day: usize, reason: &str) -> Self {
        Self {
            day,
            long: Vec::new(),
            short: Vec::new(),
            ret: None,
            skipped: Some(reason.to_string()),
        }
    }

    /// Signed weights per firm: `+1/|long|` and `−1/|short|`.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        let mut w: Vec<(usize, f64)> = self.long.iter().map(|f| (*f, 1.0 / self.long.len() as f64)).collect();
        w.extend(self.short.iter().map(|f| (*f, -1.0 / self.short.len() as f64)));
        w
    }
}

fn settle(day: usize, long: Vec<usize>, short: Vec<usize>, panel: &ReturnPanel, min_names: usize) -> PortfolioDay {
    let leg = |firms: Vec<usize>| -> Vec<(usize, f64)> {
        firms
            .into_iter()
            .filter_map(|f| panel.ret(f, day + 1).map(|r| (f, r)))
            .collect()
    };
    let l = leg(long);
    let s = leg(short);
    if l.len() < min_names || s.len() < min_names {
        return PortfolioDay::skip(day, "fewer than min_names firms in a leg");
    }
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    PortfolioDay {
        day,
        ret: Some(mean(&l) - mean(&s)),
        long: l.into_iter().map(|x| x.0).collect(),
        short: s.into_iter().map(|x| x.0).collect(),
        skipped: None,
    }
}

/// Daily quantile portfolios on firm-level mean probabilities.
pub fn build_portfolios(records: &[PredictionRecord], panel: &ReturnPanel, config: &RollingConfig) -> Vec<PortfolioDay> {
    let mut by_day: BTreeMap<usize, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in records {
        let e = by_day.entry(r.day).or_default().entry(r.firm).or_insert((0.0, 0));
        e.0 += r.prob;
        e.1 += 1;
    }
    by_day
        .into_iter()
        .map(|(day, firms)| {
            let mut probs: Vec<(usize, f64)> = firms.into_iter().map(|(f, (s, n))| (f, s / n as f64)).collect();
            if probs.windows(2).all(|w| w[0].1 == w[1].1) {
                return PortfolioDay::skip(day, "all firms tied");
            }
            let size = ((config.quantile * probs.len() as f64) + 1e-9).floor() as usize;
            if size < config.min_names {
                return PortfolioDay::skip(day, "fewer than min_names firms in a leg");
            }
            probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let long: Vec<usize> = probs[..size].iter().map(|x| x.0).collect();
            probs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let short: Vec<usize> = probs[..size].iter().map(|x| x.0).collect();
            settle(day, long, short, panel, config.min_names)
        })
        .collect()
}

/// Long firms whose news that day is net Positive, short net Negative.
pub fn classification_portfolio(
    news: &[NewsItem],
    labels: &[Sentiment],
    panel: &ReturnPanel,
    config: &RollingConfig,
) -> Result<Vec<PortfolioDay>> {
    if news.len() != labels.len() {
        return Err(Error::shape("classification_portfolio", format!("{} news vs {} labels", news.len(), labels.len())));
    }
    let mut by_day: BTreeMap<usize, BTreeMap<usize, i64>> = BTreeMap::new();
    for (n, l) in news.iter().zip(labels) {
        *by_day.entry(n.day).or_default().entry(n.firm).or_insert(0) += if l.is_positive() { 1 } else { -1 };
    }
    Ok(by_day
        .into_iter()
        .map(|(day, firms)| {
            let long = firms.iter().filter(|(_, v)| **v > 0).map(|(f, _)| *f).collect();
            let short = firms.iter().filter(|(_, v)| **v < 0).map(|(f, _)| *f).collect();
            settle(day, long, short, panel, config.min_names)
        })
        .collect())
}

pub fn portfolio_returns(days: &[PortfolioDay]) -> DailyReturns {
    let mut out = DailyReturns::default();
    for d in days {
        if let Some(r) = d.ret {
            out.days.push(d.day);
            out.returns.push(r);
        }
    }
    out
}

pub fn portfolio_csv(days: &[PortfolioDay]) -> String {
    let mut b = CsvBuilder::new(&["day", "n_long", "n_short", "ret", "skipped", "reason"]);
    for d in days {
        b.row(vec![
            d.day.to_string(),
            d.long.len().to_string(),
            d.short.len().to_string(),
            fmt_opt(d.ret),
            d.skipped.is_some().to_string(),
            csv_field(d.skipped.as_deref().unwrap_or("")),
        ]);
    }
    b.finish()
}
