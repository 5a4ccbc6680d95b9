// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! a summary. Exits non-zero only when a check cannot be evaluated at all,
//! or when `SAELAB_ACCEPTANCE_STRICT=1` and a criterion fails.
//!
//! The three full-size labs (400-day worlds, master seeds 7, 8 and 9) take
//! roughly 15-25 minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use saelab_core::datasim::{classification_prompt, generate_residual_dataset, import_world, NewsItem, PlantedDictionarySpec, TokenClass};
use saelab_core::experiment::{ExperimentConfig, MatchedFeature, Run, RunManifest, Stage, INACTIVE_GROUP, MANIFEST_FILE};
use saelab_core::io::parse_csv;
use saelab_core::numerics::{Matrix, Rng, RngSeed};
use saelab_core::predictor::{accuracy, build_portfolios, fit_rolling, portfolio_returns, predict, Timeline};
use saelab_core::sae::{match_dictionary, sweep_lambda, train_sae, Sae, SaeConfig};
use saelab_core::stats::{
    alpha_regression, cluster_labels, jk_memmel_test, shapley_sharpe_table, spearman, Alternative, ClusterOptions, RunOutcome,
};
use saelab_core::steering::{answer_from_distribution, steered_forward, SteeringSpec};
use saelab_core::tinylm::{TapPoint, TinyLm, TinyLmConfig};

const LAB_SEEDS: [u64; 3] = [7, 8, 9];
const BUDGETS: [usize; 5] = [5, 10, 30, 100, 300];

const IDENTITY_TOL: f64 = 1e-9;
const DECOMPOSITION_TOL: f64 = 1e-9;
const FD_REL_TOL: f64 = 1e-4;
const RECOVERY_MIN_COSINE: f64 = 0.9;
const PURITY_MIN: f64 = 0.8;
const MONOTONE_SEEDS_MIN: usize = 2;
const POOLED_RHO_MIN: f64 = 0.9;
const BIAS_P_MAX: f64 = 0.10;
const NOISE_P: f64 = 0.05;
const JK_TRIALS: usize = 10_000;
const JK_REJECT_RANGE: (f64, f64) = (0.04, 0.06);
const ALPHA_TOL: f64 = 1e-10;
const SMOKE_LIMIT_SECS: f64 = 300.0;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

type Check = Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Lab {
    seed: u64,
    run: Run,
    lm: TinyLm,
    sae: Sae,
    news: Vec<NewsItem>,
}

impl Lab {
    fn build(root: &Path, seed: u64) -> Result<Self, String> {
        let mut cfg = ExperimentConfig {
            seed: Some(seed),
            output_dir: root.join(format!("lab-{seed}")),
            ..Default::default()
        };
        cfg.features.budgets = BUDGETS.to_vec();
        let t = Instant::now();
        let mut run = Run::new(&cfg, false).map_err(err)?;
        run.execute(&[Stage::Simulate]).map_err(err)?;
        run.execute(&Stage::PIPELINE).map_err(err)?;
        eprintln!("lab {seed}: pipeline {:.0}s", t.elapsed().as_secs_f64());
        let dir = run.dir().to_path_buf();
        let lm = TinyLm::load(&dir.join("lm.json")).map_err(err)?;
        let sae = Sae::load(&dir.join("sae.json")).map_err(err)?;
        let (news, _, _) = import_world(&dir.join("world"), 1).map_err(err)?;
        Ok(Self { seed, run, lm, sae, news })
    }

    fn csv(&self, name: &str) -> Result<Vec<BTreeMap<String, String>>, String> {
        let text = fs::read_to_string(self.run.dir().join(name)).map_err(|e| format!("{name}: {e}"))?;
        let rows = parse_csv(&text).map_err(err)?;
        let header = rows.first().ok_or(format!("{name} is empty"))?.clone();
        Ok(rows[1..].iter().map(|r| header.iter().cloned().zip(r.iter().cloned()).collect()).collect())
    }

    fn matched(&self) -> Result<Vec<MatchedFeature>, String> {
        self.run.load_matched().map_err(err)
    }

    fn tap(&self) -> TapPoint {
        self.run.config().tap()
    }
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    let v = row.get(key).ok_or(format!("missing column {key}"))?;
    v.parse().map_err(|_| format!("{key}={v:?} is not a number"))
}

fn opt_num(row: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    row.get(key).and_then(|v| v.parse().ok())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn residual_fidelity(lab: &Lab) -> Check {
    let random = TinyLm::init(TinyLmConfig {
        seed: RngSeed(99),
        ..Default::default()
    })
    .map_err(err)?;
    let mut rng = Rng::new(RngSeed(1));
    let (mut worst, mut passes, mut injections_ok) = (0.0f64, 0usize, true);
    for model in [&lab.lm, &random] {
        let layers = model.config.num_layers;
        for item in lab.news.iter().take(200) {
            let prompt = classification_prompt(&item.tokens);
            let base = model.forward(&prompt).map_err(err)?;
            passes += 1;
            for l in 0..layers {
                let step: Vec<f64> = base.residuals[l + 1].data().iter().zip(base.residuals[l].data()).map(|(b, a)| b - a).collect();
                let standalone = model.block(l, &base.residuals[l]).map_err(err)?;
                worst = worst.max(max_abs_diff(&step, standalone.data()));
                worst = worst.max(max_abs_diff(&step, base.block_outputs[l].data()));
            }
            let tap = rng.below(layers + 1);
            let delta: Vec<f64> = (0..model.config.hidden_dim).map(|_| rng.normal()).collect();
            let inj = model.forward_with_injection(&prompt, TapPoint(tap), &delta).map_err(err)?;
            let earlier_same = (0..tap).all(|l| inj.residuals[l] == base.residuals[l] && inj.block_outputs[l] == base.block_outputs[l]);
            let changed = inj.residuals[tap] != base.residuals[tap];
            injections_ok &= earlier_same && changed;
        }
    }
    Ok(outcome(
        "residual-stream fidelity",
        worst <= IDENTITY_TOL && injections_ok,
        format!("{passes} forward passes, max identity error {worst:.2e} (tol {IDENTITY_TOL:.0e}); injection leaves earlier layers bit-identical: {injections_ok}"),
    ))
}

fn planted_sae(seed: u64, lambda: f64) -> Result<(Sae, Matrix, Matrix), String> {
    let spec = PlantedDictionarySpec {
        dim: 32,
        atoms: 16,
        seed: RngSeed(seed),
        ..Default::default()
    };
    let data = generate_residual_dataset(&spec, 8000).map_err(err)?;
    let cfg = SaeConfig {
        input_dim: 32,
        latent_dim: 64,
        sparsity_weight: lambda,
        seed: RngSeed(seed).derive_str("sae"),
        ..Default::default()
    };
    let (sae, _) = train_sae(cfg, &data.vectors).map_err(err)?;
    let dict = data.truth.dictionary.ok_or("planted data without dictionary")?;
    Ok((sae, data.vectors, dict))
}

fn param_mut(s: &mut Sae, which: usize) -> &mut Matrix {
    match which {
        0 => &mut s.w_enc,
        1 => &mut s.b_enc,
        2 => &mut s.w_dec,
        _ => &mut s.b_dec,
    }
}

fn finite_difference_error(sae: &mut Sae, x: &Matrix, rng: &mut Rng) -> Result<f64, String> {
    let (_, g) = sae.gradients(x).map_err(err)?;
    let (d, k) = (sae.input_dim(), sae.latent_dim());
    let pre: Vec<f64> = (0..x.rows())
        .flat_map(|r| {
            let row = x.row(r).to_vec();
            let (w, b) = (&sae.w_enc, &sae.b_enc);
            (0..k).map(move |j| (0..d).map(|c| w.get(j, c) * row[c]).sum::<f64>() + b.data()[j]).collect::<Vec<_>>()
        })
        .collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 32 {
        let which = rng.below(4);
        let len = [&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec][which].len();
        let idx = rng.below(len);
        if which <= 1 {
            let j = if which == 0 { idx / d } else { idx };
            if (0..x.rows()).any(|r| pre[r * k + j].abs() < 1e-3) {
                continue;
            }
        }
        let orig = param_mut(sae, which).data()[idx];
        param_mut(sae, which).data_mut()[idx] = orig + eps;
        let lp = sae.loss(x).map_err(err)?.loss;
        param_mut(sae, which).data_mut()[idx] = orig - eps;
        let lm = sae.loss(x).map_err(err)?.loss;
        param_mut(sae, which).data_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let an = [&g.w_enc, &g.b_enc, &g.w_dec, &g.b_dec][which].data()[idx];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        checked += 1;
    }
    Ok(worst)
}

fn sae_correctness() -> Check {
    let mut cosines = Vec::new();
    let mut decomposition: f64 = 0.0;
    let mut fd: f64 = 0.0;
    let mut rng = Rng::new(RngSeed(17));
    for seed in 1..=3 {
        let (mut sae, data, dict) = planted_sae(seed, 0.1)?;
        let c = match_dictionary(&dict, &sae.w_dec).map_err(err)?;
        cosines.push(c.iter().sum::<f64>() / c.len() as f64);

        let batch = data.select_rows(&(0..256).collect::<Vec<_>>());
        let m = sae.loss(&batch).map_err(err)?;
        let (mut sq, mut l1) = (0.0, 0.0);
        for r in 0..batch.rows() {
            let code = sae.encode(batch.row(r)).map_err(err)?;
            let rec = sae.decode(&code).map_err(err)?;
            sq += batch.row(r).iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            l1 += code.l1();
        }
        let n = batch.rows() as f64;
        decomposition = decomposition
            .max((m.loss - (m.reconstruction_mse + sae.config.sparsity_weight * m.mean_l1)).abs())
            .max((m.reconstruction_mse - sq / n).abs())
            .max((m.mean_l1 - l1 / n).abs());

        let small = data.select_rows(&(0..16).collect::<Vec<_>>());
        fd = fd.max(finite_difference_error(&mut sae, &small, &mut rng)?);
    }
    let spec = PlantedDictionarySpec {
        seed: RngSeed(1),
        ..Default::default()
    };
    let data = generate_residual_dataset(&spec, 8000).map_err(err)?;
    let base = SaeConfig {
        input_dim: 32,
        latent_dim: 64,
        seed: RngSeed(1),
        ..Default::default()
    };
    let lambdas = [0.01, 0.03, 0.1, 0.3, 1.0];
    let l0: Vec<f64> = sweep_lambda(&base, &data.vectors, &lambdas).map_err(err)?.iter().map(|p| p.metrics.mean_l0).collect();
    let sweep_ok = l0.windows(2).all(|w| w[1] <= w[0]);
    let recovery_ok = cosines.iter().all(|c| *c > RECOVERY_MIN_COSINE);
    Ok(outcome(
        "SAE correctness",
        decomposition <= DECOMPOSITION_TOL && fd < FD_REL_TOL && sweep_ok && recovery_ok,
        format!(
            "decomposition error {decomposition:.1e}; finite-difference rel error {fd:.1e}; mean L0 over lambda {lambdas:?} = [{}]; matched cosine per seed [{}] (> {RECOVERY_MIN_COSINE})",
            l0.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", "),
            cosines.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
        ),
    ))
}

fn labeling(labs: &[Lab]) -> Check {
    let mut per_seed = Vec::new();
    let mut all = Vec::new();
    for lab in labs {
        let m = lab.matched()?;
        let p: Vec<f64> = m.iter().map(|f| f.purity).collect();
        per_seed.push(format!("seed {}: {:.3} over {} classes", lab.seed, p.iter().sum::<f64>() / p.len().max(1) as f64, p.len()));
        all.extend(p);
    }
    let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
    Ok(outcome(
        "labeling purity",
        !all.is_empty() && mean > PURITY_MIN,
        format!("mean purity of matched features {mean:.3} (> {PURITY_MIN}); {}", per_seed.join("; ")),
    ))
}

fn steering_validity(labs: &[Lab]) -> Check {
    let mut monotone = 0;
    let mut pooled_s = Vec::new();
    let mut pooled_shift = Vec::new();
    let mut details = Vec::new();
    let mut exact = true;
    for lab in labs {
        let rows = lab.csv("steering_returns.csv")?;
        let mut grid: Vec<(f64, f64, f64)> = Vec::new();
        for r in &rows {
            grid.push((num(r, "strength")?, num(r, "pos_frac")?, num(r, "n_pos")?));
        }
        let zero = grid.iter().find(|g| g.0 == 0.0).ok_or("grid has no zero strength")?;
        let in_range: Vec<&(f64, f64, f64)> = grid.iter().filter(|g| (-3.0..=3.0).contains(&g.0)).collect();
        let mono = in_range.windows(2).all(|w| w[1].1 >= w[0].1);
        monotone += usize::from(mono);
        for g in &in_range {
            pooled_s.push(g.0);
            pooled_shift.push(g.1 - zero.1);
        }
        details.push(format!(
            "seed {}: pos_frac {} ({})",
            lab.seed,
            in_range.iter().map(|g| format!("{:.3}", g.1)).collect::<Vec<_>>().join(" "),
            if mono { "monotone" } else { "not monotone" }
        ));

        let feature = lab
            .matched()?
            .into_iter()
            .find(|m| m.class == TokenClass::PositiveSentiment)
            .ok_or("no positive-sentiment feature")?
            .feature;
        let world = lab.run.dir().join("world");
        let (_, panel, _) = import_world(&world, 1).map_err(err)?;
        let traded: Vec<&NewsItem> = lab.news.iter().filter(|n| panel.forward_return(n.firm, n.day, 1).is_some()).collect();
        let mut n_pos = 0usize;
        for (i, n) in traded.iter().enumerate() {
            let prompt = classification_prompt(&n.tokens);
            let plain = lab.lm.forward(&prompt).map_err(err)?.distribution;
            if answer_from_distribution(&plain).is_positive() {
                n_pos += 1;
            }
            if i < 300 {
                let spec = SteeringSpec {
                    feature,
                    strength: 0.0,
                    tap: lab.tap(),
                };
                let s = steered_forward(&lab.lm, &lab.sae, &prompt, &spec).map_err(err)?;
                exact &= s.steered == plain && s.baseline == plain;
            }
        }
        exact &= n_pos as f64 == zero.2;
    }
    let rho = spearman(&pooled_s, &pooled_shift).map(|s| s.rho).unwrap_or(f64::NAN);
    Ok(outcome(
        "steering validity",
        monotone >= MONOTONE_SEEDS_MIN && rho > POOLED_RHO_MIN && exact,
        format!(
            "{monotone}/{} seeds monotone (need {MONOTONE_SEEDS_MIN}); pooled Spearman of pos_frac shift vs strength {rho:.3} (> {POOLED_RHO_MIN}); s=0 bit-exact: {exact}; {}",
            labs.len(),
            details.join("; ")
        ),
    ))
}

fn optimism_bias(labs: &[Lab]) -> Check {
    let mut gains = Vec::new();
    let mut ps = Vec::new();
    let mut details = Vec::new();
    for lab in labs {
        let rows = lab.csv("sharpe_alpha_steering.csv")?;
        let base = rows.iter().find(|r| num(r, "strength").ok() == Some(0.0)).ok_or("no s=0 row")?;
        let base_sr = num(base, "sharpe")?;
        let best = rows
            .iter()
            .filter(|r| num(r, "strength").map(|s| s < 0.0).unwrap_or(false))
            .filter_map(|r| opt_num(r, "sharpe").map(|s| (s, r)))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .ok_or("no negative strengths with a Sharpe ratio")?;
        let p = opt_num(best.1, "p_value").unwrap_or(1.0);
        gains.push(best.0 - base_sr);
        ps.push(p);
        details.push(format!(
            "seed {}: unsteered {base_sr:.2}, best negative s={} Sharpe {:.2} (p {p:.3})",
            lab.seed,
            best.1["strength"],
            best.0
        ));
    }
    let gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let p = ps.iter().sum::<f64>() / ps.len() as f64;
    Ok(outcome(
        "optimism-bias correction",
        gain > 0.0 && p < BIAS_P_MAX,
        format!("mean Sharpe gain {gain:+.3} (> 0), mean one-sided p {p:.3} (< {BIAS_P_MAX}); {}", details.join("; ")),
    ))
}

fn feature_sweep(labs: &[Lab]) -> Check {
    let mut ok = true;
    let mut details = Vec::new();
    for lab in labs {
        let rows = lab.csv("sharpe_by_k.csv")?;
        let mut sweep = Vec::new();
        for r in rows.iter().filter(|r| r["budget"] != "oracle") {
            sweep.push((num(r, "budget")?, num(r, "sharpe")?, num(r, "sharpe_se")?));
        }
        let oracle = rows.iter().find(|r| r["budget"] == "oracle").ok_or("no oracle row")?;
        let (oracle_sr, oracle_p) = (num(oracle, "sharpe")?, num(oracle, "p_vs_full")?);
        let non_decreasing = sweep.windows(2).all(|w| w[1].1 >= w[0].1 - w[0].2);
        let highest = sweep.iter().all(|s| oracle_sr > s.1);
        let full = sweep.last().ok_or("empty sweep")?.1;
        let near = oracle_p >= NOISE_P;
        ok &= non_decreasing && highest && near;
        details.push(format!(
            "seed {}: Sharpe by budget [{}], oracle {oracle_sr:.2}; non-decreasing within 1 SE {non_decreasing}, oracle highest {highest}, full {full:.2} vs oracle p {oracle_p:.3} (within noise if >= {NOISE_P})",
            lab.seed,
            sweep.iter().map(|s| format!("{}:{:.2}", s.0, s.1)).collect::<Vec<_>>().join(" ")
        ));
    }
    Ok(outcome("feature-count sweep", ok, details.join("; ")))
}

fn inert_shapley(lab: &mut Lab) -> Result<f64, String> {
    let groups = lab.run.shapley_groups().map_err(err)?;
    let rolling = lab.run.config().rolling;
    let tl = lab.run.timeline().map_err(err)?.clone();
    let (_, panel, _) = import_world(&lab.run.dir().join("world"), 1).map_err(err)?;
    let k = tl.features.cols();
    let mut data = Vec::with_capacity(tl.features.rows() * (k + 1));
    for r in 0..tl.features.rows() {
        data.extend_from_slice(tl.features.row(r));
        data.push(0.0);
    }
    let augmented = Timeline {
        features: Matrix::from_vec(tl.features.rows(), k + 1, data).map_err(err)?,
        ..tl
    };
    let all: Vec<usize> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let table = vec![("signal".to_string(), all), ("inert".to_string(), vec![k])];
    let (_, rows) = shapley_sharpe_table(&table, |cols| {
        let sub = augmented.with_columns(cols);
        let fit = fit_rolling(&rolling, &sub, |x, _| Ok((0..x.cols()).collect()))?;
        if fit.models.is_empty() {
            return Err(saelab_core::Error::Degenerate("no window could be fitted".into()));
        }
        let (records, _) = predict(&fit, &sub);
        let (daily, total) = accuracy(&records, &sub);
        Ok(RunOutcome {
            returns: portfolio_returns(&build_portfolios(&records, &panel, &rolling)),
            avg_daily_accuracy: daily,
            total_accuracy: total,
        })
    })
    .map_err(err)?;
    rows[1].shapley_sharpe.ok_or_else(|| "inert group has no Shapley value".into())
}

fn shapley_attribution(labs: &mut [Lab]) -> Check {
    let mut ok = true;
    let mut details = Vec::new();
    for lab in labs.iter_mut() {
        let feature = lab
            .matched()?
            .into_iter()
            .find(|m| m.class == TokenClass::PositiveSentiment)
            .ok_or("no positive-sentiment feature")?
            .feature;
        let clusters = lab.csv("clusters.csv")?;
        let group = clusters
            .iter()
            .find(|r| r["feature"] == feature.to_string())
            .map(|r| r["group"].clone())
            .ok_or("positive-sentiment feature not clustered")?;
        let rows = lab.csv("shapley.csv")?;
        let mut ranked: Vec<(String, f64)> = rows.iter().filter_map(|r| opt_num(r, "shapley_sharpe").map(|v| (r["group"].clone(), v))).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let rank = ranked.iter().position(|g| g.0 == group).map(|i| i + 1);
        let natural = rows.iter().find(|r| r["group"] == INACTIVE_GROUP).and_then(|r| opt_num(r, "shapley_sharpe"));
        let appended = inert_shapley(lab)?;
        let inert_zero = appended == 0.0 && natural.is_none_or(|v| v == 0.0);
        ok &= rank == Some(1) && inert_zero;
        details.push(format!(
            "seed {}: planted group {group:?} ranks {} of {}; inert group Shapley {}{}",
            lab.seed,
            rank.map(|r| r.to_string()).unwrap_or("-".into()),
            ranked.len(),
            appended,
            natural.map(|v| format!(", inactive features {v}")).unwrap_or_default()
        ));
    }
    Ok(outcome("Shapley attribution", ok, details.join("; ")))
}

fn statistics_calibration() -> Check {
    let mut rng = Rng::new(RngSeed(2024));
    let n = 500;
    let mut rejections = 0usize;
    for _ in 0..JK_TRIALS {
        let a: Vec<f64> = (0..n).map(|_| 0.0005 + 0.01 * rng.normal()).collect();
        let b: Vec<f64> = (0..n).map(|_| 0.0005 + 0.01 * rng.normal()).collect();
        if jk_memmel_test(&a, &b, Alternative::TwoSided).map_err(err)?.p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / JK_TRIALS as f64;

    let x: Vec<f64> = (0..300).map(|_| 0.01 * rng.normal()).collect();
    let reg = alpha_regression(&x, &x).map_err(err)?;
    let alpha_ok = reg.alpha_daily.abs() <= ALPHA_TOL && (reg.beta - 1.0).abs() <= ALPHA_TOL;

    let centers = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 5.0]];
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        rows.push(centers[c].iter().map(|v| v + 0.3 * rng.normal()).collect::<Vec<f64>>());
        truth.push(c);
    }
    let fit = cluster_labels(
        &Matrix::from_rows(&rows).map_err(err)?,
        &ClusterOptions {
            k_min: 2,
            k_max: 6,
            ..Default::default()
        },
    )
    .map_err(err)?;
    let mut map = BTreeMap::new();
    let consistent = truth.iter().zip(&fit.assignment).all(|(t, a)| *map.entry(*a).or_insert(*t) == *t);
    let cluster_ok = fit.k == 3 && consistent && map.len() == 3;
    Ok(outcome(
        "statistics calibration",
        (JK_REJECT_RANGE.0..=JK_REJECT_RANGE.1).contains(&rate) && alpha_ok && cluster_ok,
        format!(
            "JK null rejection {rate:.4} over {JK_TRIALS} trials (in [{}, {}]); alpha {:.1e}, beta-1 {:.1e}; blobs -> K={} assignment recovered {}",
            JK_REJECT_RANGE.0,
            JK_REJECT_RANGE.1,
            reg.alpha_daily,
            reg.beta - 1.0,
            fit.k,
            consistent
        ),
    ))
}

fn saelab(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_saelab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SAELAB_SEED")
        .status()
        .map_err(err)?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("saelab {args:?} exited with {status}"))
    }
}

fn reproducibility(root: &Path) -> Check {
    let first = root.join("smoke-a");
    let second = root.join("smoke-b");
    let t = Instant::now();
    saelab(&["pipeline", "--smoke", "--simulate"], &first)?;
    let secs = t.elapsed().as_secs_f64();
    let manifest_path = first.join(MANIFEST_FILE);
    saelab(&["pipeline", "--simulate", "--config", manifest_path.to_str().ok_or("non-UTF-8 path")?], &second)?;
    let a = RunManifest::read(&manifest_path).map_err(err)?;
    let b = RunManifest::read(&second.join(MANIFEST_FILE)).map_err(err)?;
    let mut differing = Vec::new();
    for rel in a.outputs.keys() {
        let (x, y) = (fs::read(first.join(rel)), fs::read(second.join(rel)));
        if x.is_err() || x.ok() != y.ok() {
            differing.push(rel.clone());
        }
    }
    let identical = differing.is_empty() && a.outputs == b.outputs && a.outputs.len() >= 20;
    Ok(outcome(
        "reproducibility",
        secs < SMOKE_LIMIT_SECS && identical,
        format!(
            "smoke pipeline {secs:.1}s (< {SMOKE_LIMIT_SECS}s); rerun from manifest: {} artifacts, {}",
            a.outputs.len(),
            if differing.is_empty() { "all byte-identical".to_string() } else { format!("differ: {}", differing.join(", ")) }
        ),
    ))
}

fn report(results: &mut Vec<Outcome>, name: &'static str, r: Check) {
    let o = r.unwrap_or_else(|e| outcome(name, false, format!("could not evaluate: {e}")));
    println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    results.push(o);
}

fn main() -> ExitCode {
    let root: PathBuf = match tempfile::tempdir() {
        Ok(d) => d.keep(),
        Err(e) => {
            eprintln!("tempdir: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut results = Vec::new();
    report(&mut results, "statistics calibration", statistics_calibration());
    report(&mut results, "SAE correctness", sae_correctness());
    report(&mut results, "reproducibility", reproducibility(&root));

    let mut labs = Vec::new();
    for seed in LAB_SEEDS {
        match Lab::build(&root, seed) {
            Ok(l) => labs.push(l),
            Err(e) => eprintln!("lab {seed} failed: {e}"),
        }
    }
    if labs.len() == LAB_SEEDS.len() {
        report(&mut results, "residual-stream fidelity", residual_fidelity(&labs[0]));
        report(&mut results, "labeling purity", labeling(&labs));
        report(&mut results, "steering validity", steering_validity(&labs));
        report(&mut results, "optimism-bias correction", optimism_bias(&labs));
        report(&mut results, "feature-count sweep", feature_sweep(&labs));
        report(&mut results, "Shapley attribution", shapley_attribution(&mut labs));
    } else {
        for name in [
            "residual-stream fidelity",
            "labeling purity",
            "steering validity",
            "optimism-bias correction",
            "feature-count sweep",
            "Shapley attribution",
        ] {
            report(&mut results, name, Err("lab construction failed".into()));
        }
    }
    let _ = fs::remove_dir_all(&root);

    let passed = results.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let unevaluated = results.iter().any(|o| o.detail.starts_with("could not evaluate"));
    let strict = std::env::var("SAELAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if unevaluated || (strict && passed < results.len()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
