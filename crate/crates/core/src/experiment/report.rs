// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write;
use std::fs;
use std::path::Path;

use super::manifest::{RunManifest, MANIFEST_FILE};
use crate::error::Result;
use crate::io::{parse_csv, write_atomic};

pub const REPORT_FILE: &str = "report.md";
const PREVIEW_ROWS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Artifact {
    pub path: &'static str,
    pub title: &'static str,
    pub description: &'static str,
}

/// Tables and charts a complete run produces, in report order.
pub fn expected_artifacts() -> &'static [Artifact] {
    &[
        Artifact {
            path: "sharpe_by_k.csv",
            title: "Feature-budget sweep",
            description: "Out-of-sample Sharpe of the rolling long-short strategy for each top-k feature budget, with the ground-truth oracle as the last row.",
        },
        Artifact {
            path: "sharpe_by_k.svg",
            title: "Feature-budget sweep chart",
            description: "Model Sharpe against the feature budget; the oracle is drawn flat.",
        },
        Artifact {
            path: "steering_returns.csv",
            title: "Steering validation",
            description: "Share of news classified Positive and the mean next-day return per predicted class at each steering strength of the positive-sentiment feature.",
        },
        Artifact {
            path: "sharpe_alpha_steering.csv",
            title: "Steered classification portfolios",
            description: "Sharpe of the classification portfolio at each strength, its one-sided Sharpe-difference test against the unsteered portfolio and the annualized alpha from regressing steered on unsteered returns.",
        },
        Artifact {
            path: "sharpe_alpha_steering.svg",
            title: "Steered portfolio chart",
            description: "Sharpe and annual alpha (percent) against steering strength.",
        },
        Artifact {
            path: "shapley.csv",
            title: "Feature-group attribution",
            description: "Leave-one-group-out Sharpe change and single-group Sharpe for each label cluster.",
        },
        Artifact {
            path: "allocations.csv",
            title: "Allocation steering",
            description: "Mean sampled equity-allocation bucket at each steering strength of the risk feature.",
        },
        Artifact {
            path: "allocations.svg",
            title: "Allocation steering chart",
            description: "Mean allocation bucket against steering strength.",
        },
        Artifact {
            path: "dossiers.jsonl",
            title: "Feature dossiers",
            description: "Top-activating contexts and the template label of every SAE feature.",
        },
        Artifact {
            path: "matched_features.json",
            title: "Matched features",
            description: "The most selective feature for each token class, with its label and purity.",
        },
        Artifact {
            path: "feature_ranking.csv",
            title: "Feature ranking",
            description: "Back-projected importance of each feature on the first training window.",
        },
        Artifact {
            path: "clusters.csv",
            title: "Label clusters",
            description: "Cluster and group name of every feature label.",
        },
    ]
}

fn markdown_table(rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let Some(header) = rows.first() else {
        return out;
    };
    let esc = |s: &String| s.replace('|', "\\|");
    let _ = writeln!(out, "| {} |", header.iter().map(esc).collect::<Vec<_>>().join(" | "));
    let _ = writeln!(out, "|{}", " --- |".repeat(header.len()));
    for r in rows.iter().skip(1).take(PREVIEW_ROWS) {
        let _ = writeln!(out, "| {} |", r.iter().map(esc).collect::<Vec<_>>().join(" | "));
    }
    if rows.len() > PREVIEW_ROWS + 1 {
        let _ = writeln!(out, "\n({} more rows)", rows.len() - PREVIEW_ROWS - 1);
    }
    out
}

/// Writes `report.md` into `dir` and returns the missing artifacts. The
/// report is a pure function of the directory contents.
pub fn write_report(dir: &Path) -> Result<Vec<&'static str>> {
    let mut out = String::from("# Run report\n\n");
    let manifest = RunManifest::read(&dir.join(MANIFEST_FILE)).ok();
    match &manifest {
        Some(m) => {
            let _ = writeln!(out, "Code version {}.", m.code_version);
            let seeds: Vec<String> = m.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "Seeds: {}.\n", seeds.join(", "));
        }
        None => out.push_str("No manifest found; the run cannot be reproduced from this directory.\n\n"),
    }
    let missing: Vec<&'static str> = expected_artifacts()
        .iter()
        .filter(|a| !dir.join(a.path).exists())
        .map(|a| a.path)
        .collect();
    if missing.is_empty() {
        out.push_str("All expected artifacts are present.\n\n");
    } else {
        out.push_str("## Missing artifacts\n\n");
        for m in &missing {
            let _ = writeln!(out, "- `{m}`");
        }
        out.push('\n');
    }
    for a in expected_artifacts() {
        let _ = writeln!(out, "## {}\n\n`{}`: {}\n", a.title, a.path, a.description);
        let p = dir.join(a.path);
        if !p.exists() {
            out.push_str("Not produced.\n\n");
            continue;
        }
        if a.path.ends_with(".svg") {
            let _ = writeln!(out, "![{}]({})\n", a.title, a.path);
        } else if a.path.ends_with(".csv") {
            let rows = parse_csv(&fs::read_to_string(&p)?)?;
            out.push_str(&markdown_table(&rows));
            out.push('\n');
        } else {
            let lines = fs::read_to_string(&p)?.lines().count();
            let _ = writeln!(out, "{lines} lines.\n");
        }
    }
    write_atomic(&dir.join(super::REPORT_FILE), out.as_bytes())?;
    Ok(missing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_are_listed_and_report_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("sharpe_by_k.csv"), "budget,sharpe\r\n5,1.5\r\n").unwrap();
        let missing = write_report(dir.path()).unwrap();
        assert!(missing.contains(&"shapley.csv"));
        assert!(!missing.contains(&"sharpe_by_k.csv"));
        let first = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(first.contains("- `shapley.csv`"));
        assert!(first.contains("| 5 | 1.5 |"));
        write_report(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap(), first);
    }

    #[test]
    fn complete_run_references_every_csv() {
        let dir = tempfile::tempdir().unwrap();
        for a in expected_artifacts() {
            fs::write(dir.path().join(a.path), "a,b\r\n1,2\r\n").unwrap();
        }
        assert!(write_report(dir.path()).unwrap().is_empty());
        let text = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        for a in expected_artifacts().iter().filter(|a| a.path.ends_with(".csv")) {
            assert!(text.contains(a.path), "{}", a.path);
        }
    }
}
