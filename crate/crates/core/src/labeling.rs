// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature dossiers: top-activating contexts and template labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasim::{TokenClass, Vocabulary};
use crate::error::{Error, Result};
use crate::io::{from_jsonl, to_jsonl};
use crate::sae::Sae;
use crate::tinylm::{Provenance, ResidualDataset};

/// Default number of records per dossier.
pub const DEFAULT_TOP_N: usize = 20;
/// Context tokens kept on each side of the activating position.
pub const WINDOW: usize = 4;
/// Share of records the modal class needs for a single-class label.
pub const MAJORITY: f64 = 0.6;
pub const DEAD_LABEL: &str = "dead-feature";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub feature: usize,
    pub activation: f64,
    pub provenance: Provenance,
    /// The token at the activating position.
    pub token: u32,
    /// Tokens from `position - WINDOW` to `position + WINDOW`, clipped.
    pub window: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    Template,
    GroundTruth,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDossier {
    pub feature: usize,
    pub records: Vec<ActivationRecord>,
    pub label: String,
    pub label_source: LabelSource,
}

/// Per-feature evidence gathered in one pass over the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScan {
    /// Top records per feature, sorted by activation descending then
    /// provenance ascending. Only positive activations are kept.
    pub top: Vec<Vec<(f64, Provenance)>>,
    /// `class_sums[j][c]`: summed activation of feature `j` over positions
    /// whose token is in class `c` (index into [`TokenClass::ALL`]).
    pub class_sums: Vec<[f64; 11]>,
    pub class_counts: [usize; 11],
}

fn class_index(c: TokenClass) -> usize {
    TokenClass::ALL.iter().position(|x| *x == c).expect("class listed in ALL")
}

fn better(a: (f64, Provenance), b: (f64, Provenance)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn insert_top(list: &mut Vec<(f64, Provenance)>, item: (f64, Provenance), n: usize) {
    if list.len() == n {
        if !better(item, list[n - 1]) {
            return;
        }
        list.pop();
    }
    let pos = list.iter().position(|x| better(item, *x)).unwrap_or(list.len());
    list.insert(pos, item);
}

/// Streams the dataset through the SAE in chunks, collecting the top-`n`
/// records and class-conditional activation sums for every feature.
pub fn scan_features(sae: &Sae, dataset: &ResidualDataset, corpus: &[Vec<u32>], vocab: &Vocabulary, n: usize) -> Result<FeatureScan> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let k = sae.latent_dim();
    let mut top = vec![Vec::with_capacity(n); k];
    let mut class_sums = vec![[0.0; 11]; k];
    let mut class_counts = [0usize; 11];
    const CHUNK: usize = 2048;
    let rows: Vec<usize> = (0..dataset.len()).collect();
    for chunk in rows.chunks(CHUNK) {
        let codes = sae.encode_batch(&dataset.vectors.select_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let prov = dataset.provenance[i];
            let token = token_at(corpus, prov)?;
            let ci = class_index(vocab.class_of(token).ok_or_else(|| Error::invalid(format!("token {token} not in vocabulary")))?);
            class_counts[ci] += 1;
            for (j, &z) in codes.row(r).iter().enumerate() {
                if z > 0.0 {
                    class_sums[j][ci] += z;
                    insert_top(&mut top[j], (z, prov), n);
                }
            }
        }
    }
    Ok(FeatureScan {
        top,
        class_sums,
        class_counts,
    })
}

fn token_at(corpus: &[Vec<u32>], p: Provenance) -> Result<u32> {
    corpus
        .get(p.sequence)
        .and_then(|s| s.get(p.position))
        .copied()
        .ok_or_else(|| Error::invalid(format!("provenance {p:?} does not resolve to a corpus location")))
}

fn record(feature: usize, activation: f64, p: Provenance, corpus: &[Vec<u32>]) -> Result<ActivationRecord> {
    let seq = &corpus[p.sequence];
    let lo = p.position.saturating_sub(WINDOW);
    let hi = (p.position + WINDOW + 1).min(seq.len());
    Ok(ActivationRecord {
        feature,
        activation,
        provenance: p,
        token: token_at(corpus, p)?,
        window: seq[lo..hi].to_vec(),
    })
}

/// The `n` records with the largest activation of `feature`.
pub fn top_activations(
    sae: &Sae,
    dataset: &ResidualDataset,
    corpus: &[Vec<u32>],
    feature: usize,
    n: usize,
) -> Result<Vec<ActivationRecord>> {
    if feature >= sae.latent_dim() {
        return Err(Error::invalid(format!("feature {feature} out of range")));
    }
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut list = Vec::with_capacity(n);
    for (i, &p) in dataset.provenance.iter().enumerate() {
        let z = sae.encode(dataset.vectors.row(i))?.z[feature];
        if z > 0.0 {
            insert_top(&mut list, (z, p), n);
        }
    }
    list.into_iter().map(|(z, p)| record(feature, z, p, corpus)).collect()
}

/// Records from a scan, ready for [`build_dossier`].
pub fn scan_records(scan: &FeatureScan, corpus: &[Vec<u32>], feature: usize) -> Result<Vec<ActivationRecord>> {
    scan.top[feature].iter().map(|&(z, p)| record(feature, z, p, corpus)).collect()
}

fn class_histogram(records: &[ActivationRecord], vocab: &Vocabulary) -> Vec<(TokenClass, usize)> {
    let mut counts: BTreeMap<TokenClass, usize> = BTreeMap::new();
    for r in records {
        if let Some(c) = vocab.class_of(r.token) {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut v: Vec<(TokenClass, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Labels a feature from the token classes of its records: "tokens of class
/// C" if the modal class covers at least 60% of records, otherwise "mixed"
/// with the two most common classes; "dead-feature" without records.
pub fn build_dossier(feature: usize, records: Vec<ActivationRecord>, vocab: &Vocabulary) -> Result<FeatureDossier> {
    if let Some(r) = records.iter().find(|r| r.feature != feature) {
        return Err(Error::invalid(format!("record for feature {} in dossier of feature {feature}", r.feature)));
    }
    let hist = class_histogram(&records, vocab);
    let label = match hist.as_slice() {
        [] => DEAD_LABEL.to_string(),
        [(c, n), rest @ ..] => {
            if *n as f64 >= MAJORITY * records.len() as f64 {
                format!("tokens of class {}", c.name())
            } else {
                let second = rest.first().map(|(c, _)| c.name()).unwrap_or("none");
                format!("mixed: {}, {}", c.name(), second)
            }
        }
    };
    Ok(FeatureDossier {
        feature,
        records,
        label,
        label_source: LabelSource::Template,
    })
}

/// Fraction of records whose token belongs to the modal class; 0 for an
/// empty dossier.
pub fn dossier_purity(dossier: &FeatureDossier, vocab: &Vocabulary) -> f64 {
    let hist = class_histogram(&dossier.records, vocab);
    match hist.first() {
        Some((_, n)) => *n as f64 / dossier.records.len() as f64,
        None => 0.0,
    }
}

/// Modal token class of a dossier's records.
pub fn modal_class(dossier: &FeatureDossier, vocab: &Vocabulary) -> Option<TokenClass> {
    class_histogram(&dossier.records, vocab).first().map(|(c, _)| *c)
}

/// For each class seen in the scan, the feature with the largest gap between
/// its mean activation on that class and on all other positions. Classes with
/// no positive gap are omitted.
pub fn matched_features(scan: &FeatureScan) -> BTreeMap<TokenClass, usize> {
    let total: usize = scan.class_counts.iter().sum();
    let mut out = BTreeMap::new();
    for (ci, class) in TokenClass::ALL.iter().enumerate() {
        let n_in = scan.class_counts[ci];
        let n_out = total - n_in;
        if n_in == 0 || n_out == 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (j, sums) in scan.class_sums.iter().enumerate() {
            let s_in = sums[ci];
            let s_all: f64 = sums.iter().sum();
            let gap = s_in / n_in as f64 - (s_all - s_in) / n_out as f64;
            if gap > 0.0 && best.is_none_or(|(g, _)| gap > g) {
                best = Some((gap, j));
            }
        }
        if let Some((_, j)) = best {
            out.insert(*class, j);
        }
    }
    out
}

pub fn dossiers_to_jsonl(dossiers: &[FeatureDossier]) -> Result<String> {
    to_jsonl(dossiers)
}

pub fn dossiers_from_jsonl(text: &str) -> Result<Vec<FeatureDossier>> {
    from_jsonl(text)
}

/// Applies `{ "feature_id": "label" }` overrides.
pub fn apply_label_overrides(dossiers: &mut [FeatureDossier], overrides_json: &str) -> Result<usize> {
    let map: BTreeMap<String, String> = serde_json::from_str(overrides_json)?;
    let mut applied = 0;
    for (key, label) in map {
        let id: usize = key
            .parse()
            .map_err(|_| Error::Format(format!("override key {key:?} is not a feature id")))?;
        if label.trim().is_empty() {
            return Err(Error::Format(format!("empty override label for feature {id}")));
        }
        let d = dossiers
            .iter_mut()
            .find(|d| d.feature == id)
            .ok_or_else(|| Error::Format(format!("override for unknown feature {id}")))?;
        d.label = label;
        d.label_source = LabelSource::Manual;
        applied += 1;
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, RngSeed};
    use crate::sae::SaeConfig;
    use crate::tinylm::TapPoint;

    fn rec(feature: usize, activation: f64, sequence: usize, position: usize, token: u32) -> ActivationRecord {
        ActivationRecord {
            feature,
            activation,
            provenance: Provenance { sequence, position },
            token,
            window: vec![token],
        }
    }

    fn toy() -> (Sae, ResidualDataset, Vec<Vec<u32>>) {
        let mut sae = Sae::init(SaeConfig {
            input_dim: 2,
            latent_dim: 3,
            seed: RngSeed(1),
            ..Default::default()
        })
        .unwrap();
        sae.w_enc = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let corpus = vec![vec![17, 18, 25, 40], vec![19, 26, 33, 34]];
        let mut rows = Vec::new();
        let mut prov = Vec::new();
        for (s, seq) in corpus.iter().enumerate() {
            for (p, _) in seq.iter().enumerate() {
                rows.push(vec![(s * 4 + p) as f64 % 3.0, 1.0 - p as f64 * 0.5]);
                prov.push(Provenance { sequence: s, position: p });
            }
        }
        let ds = ResidualDataset {
            tap: TapPoint(0),
            vectors: Matrix::from_rows(&rows).unwrap(),
            provenance: prov,
        };
        (sae, ds, corpus)
    }

    #[test]
    fn dead_feature_has_no_records() {
        let (sae, ds, corpus) = toy();
        assert!(top_activations(&sae, &ds, &corpus, 2, 5).unwrap().is_empty());
        let d = build_dossier(2, vec![], &Vocabulary::standard()).unwrap();
        assert_eq!(d.label, DEAD_LABEL);
    }

    #[test]
    fn top_n_matches_full_sort_and_scan() {
        let (sae, ds, corpus) = toy();
        let v = Vocabulary::standard();
        let scan = scan_features(&sae, &ds, &corpus, &v, 3).unwrap();
        for j in 0..3 {
            let got = top_activations(&sae, &ds, &corpus, j, 3).unwrap();
            let mut all: Vec<(f64, Provenance)> = ds
                .provenance
                .iter()
                .enumerate()
                .map(|(i, p)| (sae.encode(ds.vectors.row(i)).unwrap().z[j], *p))
                .filter(|(z, _)| *z > 0.0)
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            all.truncate(3);
            let got_pairs: Vec<(f64, Provenance)> = got.iter().map(|r| (r.activation, r.provenance)).collect();
            assert_eq!(got_pairs, all);
            assert_eq!(scan.top[j], all);
        }
        // Truncation: asking for more than exist returns all activating records.
        let many = top_activations(&sae, &ds, &corpus, 0, 100).unwrap();
        assert_eq!(many.len(), 5);
    }

    #[test]
    fn label_rules() {
        let v = Vocabulary::standard();
        let pos = v.ids_in(TokenClass::PositiveSentiment);
        let topic = v.ids_in(TokenClass::Topic);
        let quant = v.ids_in(TokenClass::Quantitative);
        let records: Vec<ActivationRecord> = (0..5).map(|i| rec(1, 5.0 - i as f64, i, 0, pos[i % pos.len()])).collect();
        let d = build_dossier(1, records, &v).unwrap();
        assert!(d.label.contains("positive-sentiment"));
        assert_eq!(dossier_purity(&d, &v), 1.0);

        let mixed = vec![
            rec(1, 5.0, 0, 0, pos[0]),
            rec(1, 4.0, 0, 1, pos[1]),
            rec(1, 3.0, 0, 2, topic[0]),
            rec(1, 2.0, 0, 3, topic[1]),
            rec(1, 1.0, 0, 4, quant[0]),
        ];
        let d = build_dossier(1, mixed, &v).unwrap();
        assert_eq!(d.label, "mixed: positive-sentiment, topic");
        assert!((dossier_purity(&d, &v) - 0.4).abs() < 1e-12);

        let split = vec![
            rec(1, 5.0, 0, 0, pos[0]),
            rec(1, 4.0, 0, 1, pos[1]),
            rec(1, 3.0, 0, 2, pos[2]),
            rec(1, 2.0, 0, 3, topic[1]),
            rec(1, 1.0, 0, 4, topic[0]),
        ];
        let d = build_dossier(1, split, &v).unwrap();
        assert!((dossier_purity(&d, &v) - 0.6).abs() < 1e-12);
        assert_eq!(d.label, "tokens of class positive-sentiment");
        assert!(build_dossier(2, vec![rec(1, 1.0, 0, 0, pos[0])], &v).is_err());
    }

    #[test]
    fn overrides_and_jsonl() {
        let v = Vocabulary::standard();
        let mut ds = vec![build_dossier(0, vec![], &v).unwrap(), build_dossier(3, vec![], &v).unwrap()];
        assert_eq!(apply_label_overrides(&mut ds, r#"{"3": "earnings beats"}"#).unwrap(), 1);
        assert_eq!(ds[1].label, "earnings beats");
        assert_eq!(ds[1].label_source, LabelSource::Manual);
        assert!(apply_label_overrides(&mut ds, r#"{"9": "x"}"#).is_err());
        let text = dossiers_to_jsonl(&ds).unwrap();
        assert_eq!(dossiers_from_jsonl(&text).unwrap(), ds);
    }

    #[test]
    fn scan_is_deterministic() {
        let (sae, ds, corpus) = toy();
        let v = Vocabulary::standard();
        assert_eq!(
            scan_features(&sae, &ds, &corpus, &v, 2).unwrap(),
            scan_features(&sae, &ds, &corpus, &v, 2).unwrap()
        );
    }
}
