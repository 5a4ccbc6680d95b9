// SPDX-License-Identifier: MIT OR Apache-2.0

//! k-means++ with silhouette model selection over hashed label embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, RngSeed};

pub const LABEL_EMBEDDING_DIM: usize = 64;

/// Template words that carry no meaning of their own.
const STOP_WORDS: &[&str] = &["tokens", "of", "class", "mixed", "the", "and", "a"];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of the label's words (lowercased, split on
/// whitespace, commas, colons, semicolons and hyphens), L2-normalized. Labels with no
/// content words map to the zero vector.
pub fn label_embedding(label: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    let lower = label.to_lowercase();
    for word in lower.split(|c: char| c.is_whitespace() || matches!(c, ',' | ':' | ';' | '-')) {
        if word.is_empty() || STOP_WORDS.contains(&word) {
            continue;
        }
        let h = fnv1a(word.as_bytes());
        let idx = (h % dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    /// `k × d`
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(row, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let (n, d) = data.shape();
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut dist: Vec<f64> = (0..n).map(|r| sq_dist(data.row(r), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 { rng.categorical(&dist) } else { rng.below(n) };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (r, dr) in dist.iter_mut().enumerate() {
            *dr = dr.min(sq_dist(data.row(r), centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(data: &Matrix, mut centroids: Matrix, max_iter: usize) -> KMeans {
    let (n, d) = data.shape();
    let k = centroids.rows();
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let mut changed = false;
        for (r, a) in assignment.iter_mut().enumerate() {
            let (c, _) = nearest(data.row(r), &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (r, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums.row_mut(a).iter_mut().zip(data.row(r)) {
                *s += x;
            }
        }
        for (c, &count) in counts.iter().enumerate().take(k) {
            // Empty clusters keep their previous centroid.
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let inertia = (0..n).map(|r| sq_dist(data.row(r), centroids.row(assignment[r]))).sum();
    KMeans {
        assignment,
        centroids,
        inertia,
        iterations,
    }
}

/// Best of `restarts` k-means++ runs by inertia (first wins ties).
pub fn kmeans(data: &Matrix, k: usize, restarts: usize, max_iter: usize, seed: RngSeed) -> Result<KMeans> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} with {n} points")));
    }
    if restarts == 0 || max_iter == 0 {
        return Err(Error::invalid("restarts and max_iter must be positive"));
    }
    if let Some(index) = data.first_non_finite() {
        return Err(Error::NonFinite { what: "cluster input", index });
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts {
        let mut rng = Rng::new(seed.derive_path(&[k as u64, r as u64]));
        let init = plus_plus_init(data, k, &mut rng);
        let run = lloyd(data, init, max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette with Euclidean distance; points in singleton clusters
/// score 0. `None` unless there are at least two non-empty clusters.
pub fn silhouette(data: &Matrix, assignment: &[usize]) -> Option<f64> {
    let n = data.rows();
    let k = assignment.iter().copied().max()? + 1;
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[assignment[j]] += sq_dist(data.row(i), data.row(j)).sqrt();
            }
        }
        let own = assignment[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: RngSeed,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 12,
            restarts: 10,
            max_iter: 300,
            seed: RngSeed(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Raw cluster id per input row.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    pub silhouette: f64,
    pub silhouette_by_k: Vec<(usize, f64)>,
    /// Named group per input row; raw ids until a merge map is applied.
    pub groups: Vec<String>,
    pub warnings: Vec<String>,
}

/// k-means for every `K` in `k_min..=k_max`, keeping the `K` with the
/// highest mean silhouette (smallest `K` on ties).
pub fn cluster_labels(embeddings: &Matrix, opts: &ClusterOptions) -> Result<ClusterAssignment> {
    let n = embeddings.rows();
    if opts.k_min < 2 || opts.k_min > opts.k_max {
        return Err(Error::Config(format!("invalid K range {}..={}", opts.k_min, opts.k_max)));
    }
    if n < opts.k_max + 1 {
        return Err(Error::invalid(format!("{n} points cannot support K up to {}", opts.k_max)));
    }
    let distinct: BTreeSet<Vec<u64>> = (0..n).map(|r| embeddings.row(r).iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("all label embeddings are identical; silhouette is undefined".into()));
    }
    let mut warnings = Vec::new();
    if distinct.len() < opts.k_max {
        warnings.push(format!(
            "only {} distinct points for K up to {}; some clusters will be degenerate",
            distinct.len(),
            opts.k_max
        ));
    }
    let mut best: Option<(f64, usize, KMeans)> = None;
    let mut by_k = Vec::new();
    for k in opts.k_min..=opts.k_max {
        let km = kmeans(embeddings, k, opts.restarts, opts.max_iter, opts.seed)?;
        let Some(s) = silhouette(embeddings, &km.assignment) else {
            continue;
        };
        by_k.push((k, s));
        if best.as_ref().is_none_or(|(bs, _, _)| s > *bs) {
            best = Some((s, k, km));
        }
    }
    let (s, k, km) = best.ok_or_else(|| Error::Degenerate("no K produced two non-empty clusters".into()))?;
    Ok(ClusterAssignment {
        groups: km.assignment.iter().map(|a| format!("cluster-{a}")).collect(),
        centroids: (0..k).map(|c| km.centroids.row(c).to_vec()).collect(),
        assignment: km.assignment,
        k,
        silhouette: s,
        silhouette_by_k: by_k,
        warnings,
    })
}

struct NoDuplicates(Vec<(String, String)>);

impl<'de> Deserialize<'de> for NoDuplicates {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = NoDuplicates;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from raw cluster id to group name")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<NoDuplicates, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    out.push((k, v));
                }
                Ok(NoDuplicates(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parses `{ "raw_cluster_id": "group name" }`, rejecting duplicate keys.
pub fn parse_merge_map(json: &str) -> Result<BTreeMap<usize, String>> {
    let NoDuplicates(pairs) = serde_json::from_str(json)?;
    let mut out = BTreeMap::new();
    for (k, v) in pairs {
        let id: usize = k.parse().map_err(|_| Error::Format(format!("merge map key {k:?} is not a cluster id")))?;
        if v.trim().is_empty() {
            return Err(Error::Format(format!("empty group name for cluster {id}")));
        }
        if out.insert(id, v).is_some() {
            return Err(Error::Format(format!("duplicate merge map entry for cluster {id}")));
        }
    }
    Ok(out)
}

/// Renames raw clusters to named groups. Every raw id in use must be mapped.
pub fn apply_merge_map(assignment: &mut ClusterAssignment, map: &BTreeMap<usize, String>) -> Result<()> {
    let groups = assignment
        .assignment
        .iter()
        .map(|a| map.get(a).cloned().ok_or_else(|| Error::Format(format!("merge map has no entry for cluster {a}"))))
        .collect::<Result<Vec<_>>>()?;
    assignment.groups = groups;
    Ok(())
}
