// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::manifest::{sha256_hex, RunManifest, StageTiming, MANIFEST_FILE};
use super::ExperimentConfig;
use crate::datasim::{allocation_template, generate_world, import_world, lm_training_corpus, GroundTruth, NewsItem, ReturnPanel, TokenClass, Vocabulary};
use crate::error::{Error, Result};
use crate::featselect::{embed_corpus, rank_features, ranking_csv, select_top_k};
use crate::io::{fmt_f, fmt_opt, parse_csv, write_atomic, CsvBuilder};
use crate::labeling::{apply_label_overrides, build_dossier, dossier_purity, dossiers_from_jsonl, dossiers_to_jsonl, matched_features, scan_features, scan_records, FeatureDossier};
use crate::numerics::Matrix;
use crate::predictor::{accuracy, build_portfolios, classification_portfolio, fit_rolling, portfolio_csv, portfolio_returns, predict, predictions_csv, windows, PredictionRecord, Timeline};
use crate::sae::{metrics_csv, train_sae, Sae, SaeMetrics};
use crate::stats::{apply_merge_map, cluster_labels, label_embedding, parse_merge_map, LABEL_EMBEDDING_DIM};
use crate::stats::{shapley_csv, shapley_sharpe_table, DailyReturns, RunOutcome};
use crate::stats::{alpha_regression, jk_memmel_test, sharpe_standard_error, Alternative};
use crate::steering::{allocation_experiment, steering_grid_classification};
use crate::svg::{line_chart, Series};
use crate::tinylm::{collect_residuals, train_lm, ResidualDataset, TinyLm};

/// Name of the Shapley group holding features that never fire on news.
pub const INACTIVE_GROUP: &str = "inactive on news";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    TrainLm,
    TrainSae,
    Label,
    RankFeatures,
    Backtest,
    Cluster,
    Shapley,
    Steer,
}

impl Stage {
    /// Stages of a full run after the world exists.
    pub const PIPELINE: [Stage; 8] = [
        Stage::TrainLm,
        Stage::TrainSae,
        Stage::Label,
        Stage::RankFeatures,
        Stage::Backtest,
        Stage::Cluster,
        Stage::Shapley,
        Stage::Steer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainLm => "train-lm",
            Stage::TrainSae => "train-sae",
            Stage::Label => "label",
            Stage::RankFeatures => "rank-features",
            Stage::Backtest => "backtest",
            Stage::Cluster => "cluster",
            Stage::Shapley => "shapley",
            Stage::Steer => "steer",
        }
    }

    /// Files written by the stage, relative to the run directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Simulate => &["world/news.jsonl", "world/returns.csv", "world/truth.jsonl"],
            Stage::TrainLm => &["lm.json", "lm_report.json"],
            Stage::TrainSae => &["sae.json", "sae_metrics.csv", "sae_report.json"],
            Stage::Label => &["dossiers.jsonl", "matched_features.json"],
            Stage::RankFeatures => &["feature_ranking.csv"],
            Stage::Backtest => &["sharpe_by_k.csv", "sharpe_by_k.svg", "predictions.csv", "portfolio.csv"],
            Stage::Cluster => &["clusters.csv", "clusters.json"],
            Stage::Shapley => &["shapley.csv"],
            Stage::Steer => &[
                "steering_returns.csv",
                "sharpe_alpha_steering.csv",
                "sharpe_alpha_steering.svg",
                "allocations.csv",
                "allocations.svg",
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SaeSummary {
    rows: usize,
    final_metrics: SaeMetrics,
    total_variance: f64,
    fraction_unexplained: f64,
    dead_features: Vec<usize>,
}

/// One row of `matched_features.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedFeature {
    pub class: TokenClass,
    pub feature: usize,
    pub label: String,
    pub purity: f64,
}

struct WorldData {
    news: Vec<NewsItem>,
    panel: ReturnPanel,
    truth: Option<GroundTruth>,
}

#[derive(Default)]
struct Cache {
    world: Option<WorldData>,
    corpus: Option<Vec<Vec<u32>>>,
    lm: Option<TinyLm>,
    sae: Option<Sae>,
    timeline: Option<Timeline>,
}

/// A run directory plus the resolved config driving it.
pub struct Run {
    config: ExperimentConfig,
    dir: PathBuf,
    force: bool,
    manifest: RunManifest,
    written: Vec<String>,
    vocab: Vocabulary,
    cache: Cache,
}

fn total_variance(x: &Matrix) -> f64 {
    let means = x.column_means();
    let n = x.rows().max(1) as f64;
    (0..x.rows())
        .map(|r| x.row(r).iter().zip(&means).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum::<f64>()
        / n
}

fn json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

impl Run {
    /// Validates and resolves `config`. An existing manifest in the output
    /// directory must carry the same resolved config unless `force` is set.
    pub fn new(config: &ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let dir = config.output_dir.clone();
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let old = RunManifest::read(&path).map_err(|e| Error::Config(format!("unreadable manifest {}: {e}", path.display())))?;
            if old.config == config {
                old
            } else if force {
                RunManifest::new(&config)
            } else {
                return Err(Error::Config(format!(
                    "{} holds a run with a different config; pass --force to overwrite",
                    dir.display()
                )));
            }
        } else {
            RunManifest::new(&config)
        };
        Ok(Self {
            config,
            dir,
            force,
            manifest,
            written: Vec::new(),
            vocab: Vocabulary::standard(),
            cache: Cache::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn has_world(&self) -> bool {
        Stage::Simulate.outputs().iter().take(2).all(|f| self.dir.join(f).exists())
    }

    /// Runs stages in order. On failure every file written by this call is
    /// moved under `failed/` and the error is returned.
    pub fn execute(&mut self, stages: &[Stage]) -> Result<()> {
        for &stage in stages {
            if !self.force {
                if let Some(f) = stage.outputs().iter().find(|f| self.dir.join(f).exists()) {
                    return Err(Error::Config(format!(
                        "{} already exists; pass --force to overwrite",
                        self.dir.join(f).display()
                    )));
                }
            }
        }
        self.written.clear();
        for &stage in stages {
            let t = Instant::now();
            if let Err(e) = self.run_stage(stage) {
                self.quarantine()?;
                return Err(e);
            }
            self.manifest.timings.retain(|s| s.stage != stage.name());
            self.manifest.timings.push(StageTiming {
                stage: stage.name().to_string(),
                seconds: t.elapsed().as_secs_f64(),
            });
            self.manifest.write(&self.dir)?;
        }
        Ok(())
    }

    fn quarantine(&mut self) -> Result<()> {
        if self.written.is_empty() {
            return Ok(());
        }
        let failed = self.dir.join("failed");
        if failed.exists() {
            fs::remove_dir_all(&failed)?;
        }
        for rel in std::mem::take(&mut self.written) {
            let src = self.dir.join(&rel);
            if src.exists() {
                let dst = failed.join(&rel);
                if let Some(p) = dst.parent() {
                    fs::create_dir_all(p)?;
                }
                fs::rename(&src, &dst)?;
            }
            self.manifest.outputs.remove(&rel);
        }
        self.manifest.write(&self.dir)
    }

    fn emit(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(rel), bytes)?;
        self.record(rel, bytes);
        Ok(())
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(bytes));
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    fn read_input(&mut self, path: &Path) -> Result<String> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn require(&self, rel: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if !p.exists() {
            return Err(Error::Config(format!("{} is missing; run `{}` first", p.display(), stage.name())));
        }
        Ok(p)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::TrainLm => self.train_lm(),
            Stage::TrainSae => self.train_sae(),
            Stage::Label => self.label(),
            Stage::RankFeatures => self.rank(),
            Stage::Backtest => self.backtest(),
            Stage::Cluster => self.cluster(),
            Stage::Shapley => self.shapley(),
            Stage::Steer => self.steer(),
        }
    }

    fn simulate(&mut self) -> Result<()> {
        let world = generate_world(&self.config.world)?;
        let files = world.export(&self.dir.join("world"))?;
        for f in files {
            let rel = format!("world/{f}");
            let bytes = fs::read(self.dir.join(&rel))?;
            self.record(&rel, &bytes);
        }
        self.cache = Cache::default();
        Ok(())
    }

    fn world(&mut self) -> Result<&WorldData> {
        if self.cache.world.is_none() {
            self.require("world/news.jsonl", Stage::Simulate)?;
            let (news, panel, truth) = import_world(&self.dir.join("world"), self.config.world.horizon)?;
            self.cache.world = Some(WorldData { news, panel, truth });
        }
        Ok(self.cache.world.as_ref().expect("just loaded"))
    }

    fn corpus(&mut self) -> Result<&[Vec<u32>]> {
        if self.cache.corpus.is_none() {
            let c = lm_training_corpus(&self.config.world, &self.config.corpus)?;
            self.cache.corpus = Some(c.into_iter().map(|(_, s)| s).collect());
        }
        Ok(self.cache.corpus.as_deref().expect("just built"))
    }

    fn lm(&mut self) -> Result<&TinyLm> {
        if self.cache.lm.is_none() {
            let p = self.require("lm.json", Stage::TrainLm)?;
            self.cache.lm = Some(TinyLm::load(&p)?);
        }
        Ok(self.cache.lm.as_ref().expect("just loaded"))
    }

    fn sae(&mut self) -> Result<&Sae> {
        if self.cache.sae.is_none() {
            let p = self.require("sae.json", Stage::TrainSae)?;
            self.cache.sae = Some(Sae::load(&p)?);
        }
        Ok(self.cache.sae.as_ref().expect("just loaded"))
    }

    fn train_lm(&mut self) -> Result<()> {
        let corpus = self.corpus()?.to_vec();
        let (model, report) = train_lm(self.config.lm.clone(), &corpus, &self.config.lm_train)?;
        let path = self.dir.join("lm.json");
        model.save(&path)?;
        let bytes = fs::read(&path)?;
        self.record("lm.json", &bytes);
        self.emit("lm_report.json", &json_pretty(&report)?)?;
        self.cache.lm = Some(model);
        self.cache.sae = None;
        self.cache.timeline = None;
        Ok(())
    }

    fn sae_residuals(&mut self) -> Result<(ResidualDataset, Vec<Vec<u32>>)> {
        let n = self.config.sae_sequences;
        let tap = self.config.tap();
        let sub: Vec<Vec<u32>> = self.corpus()?[..n].to_vec();
        let ds = collect_residuals(self.lm()?, &sub, tap)?;
        Ok((ds, sub))
    }

    fn train_sae(&mut self) -> Result<()> {
        let (ds, _) = self.sae_residuals()?;
        let (sae, report) = train_sae(self.config.sae.clone(), &ds.vectors)?;
        let path = self.dir.join("sae.json");
        sae.save(&path)?;
        let bytes = fs::read(&path)?;
        self.record("sae.json", &bytes);
        self.emit("sae_metrics.csv", metrics_csv(&report.history).as_bytes())?;
        let last = *report.history.last().expect("history has the initial entry");
        let var = total_variance(&ds.vectors);
        let summary = SaeSummary {
            rows: ds.len(),
            final_metrics: last,
            total_variance: var,
            fraction_unexplained: if var > 0.0 { last.reconstruction_mse / var } else { 0.0 },
            dead_features: report.dead_features,
        };
        self.emit("sae_report.json", &json_pretty(&summary)?)?;
        self.cache.sae = Some(sae);
        self.cache.timeline = None;
        Ok(())
    }

    fn label(&mut self) -> Result<()> {
        let (ds, sub) = self.sae_residuals()?;
        let top_n = self.config.labeling.top_n;
        let sae = self.sae()?.clone();
        let scan = scan_features(&sae, &ds, &sub, &self.vocab, top_n)?;
        let mut dossiers = (0..sae.latent_dim())
            .map(|j| build_dossier(j, scan_records(&scan, &sub, j)?, &self.vocab))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = self.config.labeling.overrides.clone() {
            let text = self.read_input(&p)?;
            apply_label_overrides(&mut dossiers, &text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        }
        let matched: Vec<MatchedFeature> = matched_features(&scan)
            .into_iter()
            .map(|(class, j)| MatchedFeature {
                class,
                feature: j,
                label: dossiers[j].label.clone(),
                purity: dossier_purity(&dossiers[j], &self.vocab),
            })
            .collect();
        self.emit("dossiers.jsonl", dossiers_to_jsonl(&dossiers)?.as_bytes())?;
        self.emit("matched_features.json", &json_pretty(&matched)?)?;
        Ok(())
    }

    pub fn load_dossiers(&self) -> Result<Vec<FeatureDossier>> {
        let p = self.require("dossiers.jsonl", Stage::Label)?;
        dossiers_from_jsonl(&fs::read_to_string(p)?)
    }

    pub fn load_matched(&self) -> Result<Vec<MatchedFeature>> {
        let p = self.require("matched_features.json", Stage::Label)?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    /// News embeddings with return-sign labels, computed once per process.
    pub fn timeline(&mut self) -> Result<&Timeline> {
        if self.cache.timeline.is_none() {
            let tap = self.config.tap();
            let pooling = self.config.features.pooling;
            let horizon = self.config.world.horizon;
            self.lm()?;
            self.sae()?;
            self.world()?;
            let (lm, sae, w) = (
                self.cache.lm.as_ref().expect("loaded"),
                self.cache.sae.as_ref().expect("loaded"),
                self.cache.world.as_ref().expect("loaded"),
            );
            let x = embed_corpus(lm, sae, tap, &w.news, pooling)?;
            self.cache.timeline = Some(Timeline::new(w.news.clone(), x, &w.panel, horizon)?);
        }
        Ok(self.cache.timeline.as_ref().expect("just built"))
    }

    fn rank(&mut self) -> Result<()> {
        let rolling = self.config.rolling;
        let opts = self.config.features.rank;
        let tl = self.timeline()?;
        let first = windows(&rolling, tl.num_days())
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("rolling config yields no window".into()))?;
        let rows: Vec<usize> = (0..tl.news.len())
            .filter(|&i| (first.train_start..first.train_end).contains(&tl.news[i].day) && tl.labels[i].is_some())
            .collect();
        let y: Vec<bool> = rows.iter().map(|&i| tl.labels[i].expect("filtered")).collect();
        let mut ranking = rank_features(&tl.features.select_rows(&rows), &y, &opts)?;
        ranking.window = Some(format!("days {}..{}", first.train_start, first.train_end));
        self.emit("feature_ranking.csv", ranking_csv(&ranking).as_bytes())
    }

    fn backtest(&mut self) -> Result<()> {
        let rolling = self.config.rolling;
        let opts = self.config.features.rank;
        let mut budgets = self.config.features.budgets.clone();
        budgets.sort_unstable();
        budgets.dedup();
        self.world()?;
        self.timeline()?;
        let tl = self.cache.timeline.as_ref().expect("loaded");
        let w = self.cache.world.as_ref().expect("loaded");

        struct BudgetRun {
            budget: usize,
            n_features: usize,
            returns: DailyReturns,
            acc: (Option<f64>, Option<f64>),
            records: Vec<PredictionRecord>,
            days: Vec<crate::predictor::PortfolioDay>,
        }
        let mut runs = Vec::new();
        for &k in &budgets {
            let fit = fit_rolling(&rolling, tl, |x, y| Ok(select_top_k(&rank_features(x, y, &opts)?, k)?.features))?;
            let (records, _) = predict(&fit, tl);
            let days = build_portfolios(&records, &w.panel, &rolling);
            runs.push(BudgetRun {
                budget: k,
                n_features: fit.models.iter().map(|m| m.features.len()).max().unwrap_or(0),
                returns: portfolio_returns(&days),
                acc: accuracy(&records, tl),
                records,
                days,
            });
        }
        let full = runs.last().expect("budgets are non-empty");
        let oracle = w.truth.as_ref().map(|t| {
            let recs: Vec<PredictionRecord> = full
                .records
                .iter()
                .map(|r| PredictionRecord {
                    prob: (1.0 + t.latent_sentiment[r.news_id]) / 2.0,
                    ..r.clone()
                })
                .collect();
            let days = build_portfolios(&recs, &w.panel, &rolling);
            (portfolio_returns(&days), accuracy(&recs, tl))
        });

        let mut csv = CsvBuilder::new(&[
            "budget",
            "n_features",
            "sharpe",
            "sharpe_se",
            "p_vs_full",
            "avg_daily_accuracy",
            "total_accuracy",
            "days",
        ]);
        let row = |name: String, n: String, r: &DailyReturns, acc: (Option<f64>, Option<f64>)| -> Vec<String> {
            let sr = r.sharpe();
            let (a, b) = r.paired(&full.returns);
            let p = jk_memmel_test(&a, &b, Alternative::TwoSided).ok().map(|j| j.p_value);
            vec![
                name,
                n,
                fmt_opt(sr),
                fmt_opt(sr.map(|s| sharpe_standard_error(s, r.returns.len()))),
                fmt_opt(p),
                fmt_opt(acc.0),
                fmt_opt(acc.1),
                r.returns.len().to_string(),
            ]
        };
        for r in &runs {
            csv.row(row(r.budget.to_string(), r.n_features.to_string(), &r.returns, r.acc));
        }
        if let Some((ret, acc)) = &oracle {
            csv.row(row("oracle".into(), String::new(), ret, *acc));
        }
        let mut series = vec![Series::new(
            "model",
            runs.iter().filter_map(|r| r.returns.sharpe().map(|s| (r.budget as f64, s))).collect(),
        )];
        if let Some(s) = oracle.as_ref().and_then(|(r, _)| r.sharpe()) {
            series.push(Series::new("oracle", budgets.iter().map(|&k| (k as f64, s)).collect()));
        }
        let svg = line_chart("Long-short Sharpe by feature budget", "feature budget", "annualized Sharpe", &series);
        let predictions = predictions_csv(&full.records);
        let portfolio = portfolio_csv(&full.days);
        self.emit("sharpe_by_k.csv", csv.finish().as_bytes())?;
        self.emit("sharpe_by_k.svg", svg.as_bytes())?;
        self.emit("predictions.csv", predictions.as_bytes())?;
        self.emit("portfolio.csv", portfolio.as_bytes())
    }

    fn cluster(&mut self) -> Result<()> {
        let dossiers = self.load_dossiers()?;
        let labels: Vec<String> = dossiers.iter().map(|d| d.label.clone()).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|l| label_embedding(l, LABEL_EMBEDDING_DIM)).collect();
        let emb = Matrix::from_rows(&rows)?;
        let mut assignment = cluster_labels(&emb, &self.config.cluster)?;
        match self.config.merge_map.clone() {
            Some(p) => {
                let text = self.read_input(&p)?;
                let map = parse_merge_map(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                apply_merge_map(&mut assignment, &map).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            }
            None => {
                let names = group_names(&assignment.assignment, &labels);
                assignment.groups = assignment.assignment.iter().map(|a| names[a].clone()).collect();
            }
        }
        let mut csv = CsvBuilder::new(&["feature", "label", "cluster", "group"]);
        for (i, d) in dossiers.iter().enumerate() {
            csv.row(vec![
                d.feature.to_string(),
                d.label.clone(),
                assignment.assignment[i].to_string(),
                assignment.groups[i].clone(),
            ]);
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            k: usize,
            silhouette: f64,
            silhouette_by_k: &'a [(usize, f64)],
            warnings: &'a [String],
        }
        let summary = Summary {
            k: assignment.k,
            silhouette: assignment.silhouette,
            silhouette_by_k: &assignment.silhouette_by_k,
            warnings: &assignment.warnings,
        };
        self.emit("clusters.csv", csv.finish().as_bytes())?;
        self.emit("clusters.json", &json_pretty(&summary)?)
    }

    /// Feature groups from `clusters.csv`, with features whose news
    /// embedding column is constant moved to [`INACTIVE_GROUP`].
    pub fn shapley_groups(&mut self) -> Result<Vec<(String, Vec<usize>)>> {
        let p = self.require("clusters.csv", Stage::Cluster)?;
        let rows = parse_csv(&fs::read_to_string(p)?)?;
        let tl = self.timeline()?;
        let x = &tl.features;
        let constant = |c: usize| (1..x.rows()).all(|r| x.get(r, c) == x.get(0, c));
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for r in rows.iter().skip(1) {
            let [feature, _, _, group] = r.as_slice() else {
                return Err(Error::Format(format!("clusters.csv row has {} fields", r.len())));
            };
            let f: usize = feature.parse().map_err(|_| Error::Format(format!("bad feature id {feature:?}")))?;
            if f >= x.cols() {
                return Err(Error::Format(format!("feature {f} out of range")));
            }
            let g = if constant(f) { INACTIVE_GROUP.to_string() } else { group.clone() };
            groups.entry(g).or_default().push(f);
        }
        Ok(groups.into_iter().collect())
    }

    /// Rolling logistic model on a fixed column subset.
    pub fn subset_outcome(&mut self, cols: &[usize]) -> Result<RunOutcome> {
        let rolling = self.config.rolling;
        self.world()?;
        self.timeline()?;
        let tl = self.cache.timeline.as_ref().expect("loaded");
        let panel = &self.cache.world.as_ref().expect("loaded").panel;
        subset_outcome(tl, panel, &rolling, cols)
    }

    fn shapley(&mut self) -> Result<()> {
        let groups = self.shapley_groups()?;
        let rolling = self.config.rolling;
        let tl = self.cache.timeline.as_ref().expect("loaded");
        let panel = &self.cache.world.as_ref().expect("loaded").panel;
        let (_, rows) = shapley_sharpe_table(&groups, |cols| subset_outcome(tl, panel, &rolling, cols))?;
        self.emit("shapley.csv", shapley_csv(&rows).as_bytes())
    }

    fn steering_feature(&self, class: TokenClass, explicit: Option<usize>) -> Result<usize> {
        if let Some(f) = explicit {
            return Ok(f);
        }
        self.load_matched()?
            .into_iter()
            .find(|m| m.class == class)
            .map(|m| m.feature)
            .ok_or_else(|| Error::Degenerate(format!("no feature matched to {} tokens", class.name())))
    }

    fn steer(&mut self) -> Result<()> {
        let sc = self.config.steering.clone();
        let rolling = self.config.rolling;
        let tap = self.config.tap();
        let cls_feature = self.steering_feature(TokenClass::PositiveSentiment, sc.classification_feature)?;
        let alloc_feature = self.steering_feature(TokenClass::Risk, sc.allocation_feature)?;
        self.lm()?;
        self.sae()?;
        self.world()?;
        let lm = self.cache.lm.as_ref().expect("loaded");
        let sae = self.cache.sae.as_ref().expect("loaded");
        let w = self.cache.world.as_ref().expect("loaded");
        let news: Vec<NewsItem> = w.news.iter().filter(|n| w.panel.forward_return(n.firm, n.day, 1).is_some()).cloned().collect();
        let grid = steering_grid_classification(lm, sae, cls_feature, tap, &news, &w.panel, &sc.classification_grid)?;
        let zero = sc.classification_grid.iter().position(|s| *s == 0.0).expect("validated");
        let returns: Vec<DailyReturns> = grid
            .labels
            .iter()
            .map(|l| classification_portfolio(&news, l, &w.panel, &rolling).map(|d| portfolio_returns(&d)))
            .collect::<Result<_>>()?;
        let mut csv = CsvBuilder::new(&[
            "strength",
            "pos_frac",
            "sharpe",
            "delta_sharpe",
            "z",
            "p_value",
            "alpha_annual",
            "t_alpha",
            "beta",
            "days",
        ]);
        let mut sharpe_pts = Vec::new();
        let mut alpha_pts = Vec::new();
        for (i, r) in grid.rows.iter().enumerate() {
            let (a, b) = returns[i].paired(&returns[zero]);
            let jk = jk_memmel_test(&a, &b, Alternative::Greater).ok();
            let alpha = alpha_regression(&a, &b).ok();
            let sr = returns[i].sharpe();
            if let Some(s) = sr {
                sharpe_pts.push((r.strength, s));
            }
            if let Some(al) = &alpha {
                alpha_pts.push((r.strength, 100.0 * al.alpha_annual));
            }
            csv.row(vec![
                fmt_f(r.strength),
                fmt_f(r.pos_frac),
                fmt_opt(sr),
                fmt_opt(jk.as_ref().map(|j| j.delta_sharpe)),
                fmt_opt(jk.as_ref().map(|j| j.z)),
                fmt_opt(jk.as_ref().map(|j| j.p_value)),
                fmt_opt(alpha.as_ref().map(|a| a.alpha_annual)),
                fmt_opt(alpha.as_ref().and_then(|a| a.t_alpha)),
                fmt_opt(alpha.as_ref().map(|a| a.beta)),
                returns[i].returns.len().to_string(),
            ]);
        }
        let svg = line_chart(
            &format!("Steering feature {cls_feature}: classification portfolio"),
            "steering strength",
            "Sharpe / annual alpha (%)",
            &[Series::new("Sharpe", sharpe_pts), Series::new("alpha vs unsteered (%)", alpha_pts)],
        );
        let alloc = allocation_experiment(
            lm,
            sae,
            &allocation_template(&self.vocab),
            alloc_feature,
            tap,
            &sc.allocation_grid,
            sc.repetitions,
            sc.decoding,
            sc.seed,
        )?;
        let alloc_svg = line_chart(
            &format!("Steering feature {alloc_feature}: equity allocation"),
            "steering strength",
            "mean allocation bucket",
            &[Series::new(
                "mean allocation",
                alloc.rows.iter().filter_map(|r| r.mean_alloc.map(|m| (r.strength, m))).collect(),
            )],
        );
        let grid_csv = grid.to_csv();
        self.emit("steering_returns.csv", grid_csv.as_bytes())?;
        self.emit("sharpe_alpha_steering.csv", csv.finish().as_bytes())?;
        self.emit("sharpe_alpha_steering.svg", svg.as_bytes())?;
        self.emit("allocations.csv", alloc.to_csv().as_bytes())?;
        self.emit("allocations.svg", alloc_svg.as_bytes())
    }
}

/// Rolling logistic fit on `cols` without further selection. Returns
/// [`Error::Degenerate`] when no window can be fitted.
pub fn subset_outcome(tl: &Timeline, panel: &ReturnPanel, rolling: &crate::predictor::RollingConfig, cols: &[usize]) -> Result<RunOutcome> {
    if cols.is_empty() {
        return Err(Error::Degenerate("empty feature subset".into()));
    }
    let sub = tl.with_columns(cols);
    let fit = fit_rolling(rolling, &sub, |x, _| Ok((0..x.cols()).collect()))?;
    if fit.models.is_empty() {
        return Err(Error::Degenerate("no window could be fitted".into()));
    }
    let (records, _) = predict(&fit, &sub);
    let days = build_portfolios(&records, panel, rolling);
    let (daily, total) = accuracy(&records, &sub);
    Ok(RunOutcome {
        returns: portfolio_returns(&days),
        avg_daily_accuracy: daily,
        total_accuracy: total,
    })
}

/// Names each raw cluster after its most frequent member label (ties to the
/// lexicographically smallest). Repeated names get the cluster id appended.
fn group_names(assignment: &[usize], labels: &[String]) -> BTreeMap<usize, String> {
    let mut counts: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    for (a, l) in assignment.iter().zip(labels) {
        *counts.entry(*a).or_default().entry(l.as_str()).or_insert(0) += 1;
    }
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for (a, c) in &counts {
        let best = c.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0))).map(|(l, _)| l.to_string()).unwrap_or_default();
        names.insert(*a, best);
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for n in names.values() {
        *seen.entry(n.clone()).or_insert(0) += 1;
    }
    for (a, n) in names.iter_mut() {
        if seen[n.as_str()] > 1 {
            *n = format!("{n} #{a}");
        }
    }
    names
}
