//! Knowledge banks: greedy k-center coreset construction, exact k-NN
//! retrieval, the EVKB file format and nearest-neighbour denoising.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{aggregate_local, Label, LabeledCase};
use crate::util::{ceil_fraction, euclidean, floor_fraction, seeded_rng, squared_euclidean, unit_normalized};

pub const EVKB_MAGIC: &[u8; 4] = b"EVKB";
pub const EVKB_VERSION: u32 = 1;

/// A multiset of patch vectors pooled from cases of one label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    vectors: Vec<f32>,
    source_label: Label,
}

impl FeatureSet {
    pub fn new(dim: usize, vectors: Vec<f32>, source_label: Label) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Input(format!(
                "feature set: {} scalars do not form vectors of dimension {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature set contains non-finite values".into()));
        }
        Ok(Self {
            dim,
            vectors,
            source_label,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn source_label(&self) -> Label {
        self.source_label
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.vectors
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.vectors.chunks_exact(self.dim)
    }

    /// Appends vectors of the same dimension, keeping this set's label.
    pub fn extend_from(&mut self, other: &[f32]) -> Result<()> {
        if other.len() % self.dim != 0 {
            return Err(Error::Input("appended scalars are not whole vectors".into()));
        }
        self.vectors.extend_from_slice(other);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_label: Label,
    pub subsample_ratio: f64,
    pub seed: u64,
    pub normalized: bool,
    pub source_count: u64,
}

/// An immutable bank of patch vectors. Vectors are stored in coreset
/// selection order, so any prefix is itself a greedy coreset.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBank {
    dim: usize,
    vectors: Vec<f32>,
    provenance: Provenance,
}

/// The `k` nearest bank vectors of one query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub indices: Vec<usize>,
    pub neighbors: Vec<f32>,
    pub distances: Vec<f64>,
    pub dim: usize,
}

impl Evidence {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbor(&self, i: usize) -> &[f32] {
        &self.neighbors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }
}

impl KnowledgeBank {
    /// Builds a bank directly from vectors, validating the normalization claim.
    pub fn from_parts(dim: usize, vectors: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return Err(Error::Input(format!(
                "knowledge bank needs at least one whole vector of dimension {dim}"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("knowledge bank contains non-finite values".into()));
        }
        if provenance.normalized {
            for (i, v) in vectors.chunks_exact(dim).enumerate() {
                let norm = squared_euclidean(v, &vec![0.0; dim]).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Input(format!(
                        "bank flagged normalized but vector {i} has norm {norm}"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            vectors,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_normalized(&self) -> bool {
        self.provenance.normalized
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.vectors
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.vectors.chunks_exact(self.dim)
    }

    /// The first `n` vectors in selection order.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "cannot truncate a bank of {} vectors to {n}",
                self.len()
            )));
        }
        let mut provenance = self.provenance.clone();
        provenance.subsample_ratio = n as f64 / provenance.source_count.max(1) as f64;
        Ok(Self {
            dim: self.dim,
            vectors: self.vectors[..n * self.dim].to_vec(),
            provenance,
        })
    }

    fn prepare_query<'q>(&self, query: &'q [f32]) -> Result<std::borrow::Cow<'q, [f32]>> {
        if query.len() != self.dim {
            return Err(Error::Query(format!(
                "query has dimension {} but the bank has dimension {}",
                query.len(),
                self.dim
            )));
        }
        if self.provenance.normalized {
            unit_normalized(query)
                .map(std::borrow::Cow::Owned)
                .ok_or_else(|| Error::Query("cannot normalize a zero query vector".into()))
        } else {
            Ok(std::borrow::Cow::Borrowed(query))
        }
    }

    /// Exact k-NN by linear scan. Distances are accumulated in double
    /// precision; equal distances keep the lower bank index first.
    pub fn knn_query(&self, query: &[f32], k: usize) -> Result<Evidence> {
        if k == 0 || k > self.len() {
            return Err(Error::Query(format!(
                "k={k} is outside 1..={} (bank size)",
                self.len()
            )));
        }
        let query = self.prepare_query(query)?;
        // (squared distance, index), kept sorted ascending.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (idx, v) in self.iter().enumerate() {
            let d2 = squared_euclidean(&query, v);
            if best.len() == k && d2 >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(b, _)| b <= d2);
            best.insert(pos, (d2, idx));
            best.truncate(k);
        }
        let mut neighbors = Vec::with_capacity(k * self.dim);
        for &(_, idx) in &best {
            neighbors.extend_from_slice(self.vector(idx));
        }
        Ok(Evidence {
            indices: best.iter().map(|&(_, i)| i).collect(),
            distances: best.iter().map(|&(d2, _)| d2.sqrt()).collect(),
            neighbors,
            dim: self.dim,
        })
    }

    /// Mean Euclidean distance to the `k` nearest bank vectors.
    pub fn knn_avg_distance(&self, query: &[f32], k: usize) -> Result<f64> {
        Ok(self.knn_query(query, k)?.mean_distance())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.provenance;
        let mut out = Vec::with_capacity(46 + self.vectors.len() * 4);
        out.extend_from_slice(EVKB_MAGIC);
        out.extend_from_slice(&EVKB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(p.normalized as u8);
        out.push(p.source_label.as_u8());
        out.extend_from_slice(&p.subsample_ratio.to_le_bytes());
        out.extend_from_slice(&p.seed.to_le_bytes());
        out.extend_from_slice(&p.source_count.to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 4 + 8 + 1 + 1 + 8 + 8 + 8;
        if bytes.len() < 4 {
            return Err(Error::load(path, "truncated EVKB header"));
        }
        if &bytes[..4] != EVKB_MAGIC {
            return Err(Error::load(path, "bad magic (expected EVKB)"));
        }
        if bytes.len() < HEADER {
            return Err(Error::load(path, "truncated EVKB header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != EVKB_VERSION {
            return Err(Error::load(
                path,
                format!("unsupported EVKB version {version} (expected {EVKB_VERSION})"),
            ));
        }
        let dim = u32_at(8) as usize;
        let n = u64_at(12) as usize;
        let normalized = match bytes[20] {
            0 => false,
            1 => true,
            b => return Err(Error::load(path, format!("invalid normalized flag {b}"))),
        };
        let source_label = Label::from_u8(bytes[21])
            .ok_or_else(|| Error::load(path, format!("invalid source label {}", bytes[21])))?;
        let subsample_ratio = f64::from_le_bytes(bytes[22..30].try_into().unwrap());
        let seed = u64_at(30);
        let source_count = u64_at(38);
        let payload = &bytes[HEADER..];
        let expected = n
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::load(path, "header sizes overflow"))?;
        if payload.len() != expected {
            return Err(Error::load(
                path,
                format!(
                    "payload holds {} bytes but header declares {n} vectors of dimension {dim} ({expected} bytes)",
                    payload.len()
                ),
            ));
        }
        let vectors = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(
            dim,
            vectors,
            Provenance {
                source_label,
                subsample_ratio,
                seed,
                normalized,
                source_count,
            },
        )
        .map_err(|e| Error::load(path, e.to_string()))
    }
}

/// The normal and pathological banks used together at screening time.
#[derive(Debug, Clone, PartialEq)]
pub struct BankPair {
    pub normal: KnowledgeBank,
    pub pathological: KnowledgeBank,
}

impl BankPair {
    pub fn new(normal: KnowledgeBank, pathological: KnowledgeBank) -> Result<Self> {
        if normal.dim() != pathological.dim() {
            return Err(Error::Input(format!(
                "bank dimensions differ: normal d={}, pathological d={}",
                normal.dim(),
                pathological.dim()
            )));
        }
        Ok(Self { normal, pathological })
    }

    pub fn dim(&self) -> usize {
        self.normal.dim()
    }

    pub fn min_len(&self) -> usize {
        self.normal.len().min(self.pathological.len())
    }
}

pub fn save_bank(bank: &KnowledgeBank, path: &Path) -> Result<()> {
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<KnowledgeBank> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, format!("cannot read file: {e}")))?;
    KnowledgeBank::from_bytes(&bytes, path)
}

/// Pools the aggregated patch vectors of same-label cases.
pub fn collect_features(cases: &[LabeledCase], window: usize) -> Result<FeatureSet> {
    let first = cases
        .first()
        .ok_or_else(|| Error::Input("cannot collect features from an empty case list".into()))?;
    let (dim, label) = (first.features.dim(), first.label);
    let mut vectors = Vec::new();
    for case in cases {
        if case.label != label {
            return Err(Error::Input(format!(
                "mixed labels: case {} is {:?}, expected {label:?}",
                case.case_id(),
                case.label
            )));
        }
        if case.features.dim() != dim {
            return Err(Error::Input(format!(
                "mixed feature dimensions: case {} has d={}, expected {dim}",
                case.case_id(),
                case.features.dim()
            )));
        }
        vectors.extend_from_slice(aggregate_local(&case.features, window)?.data());
    }
    FeatureSet::new(dim, vectors, label)
}

/// Greedy farthest-point (k-center) ordering starting from `start`.
/// Returns `target` distinct indices into `points`; ties pick the lower index.
pub fn greedy_farthest_order(points: &[f32], dim: usize, target: usize, start: usize) -> Vec<usize> {
    let n = points.len() / dim;
    assert!(start < n && target <= n, "coreset target/start out of range");
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut selected = Vec::with_capacity(target);
    if target == 0 {
        return selected;
    }
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        min_d2[current] = f64::NEG_INFINITY;
        if selected.len() == target {
            break;
        }
        let anchor = point(current);
        min_d2
            .par_iter_mut()
            .enumerate()
            .with_min_len(1024)
            .for_each(|(i, m)| {
                let d2 = squared_euclidean(point(i), anchor);
                if d2 < *m {
                    *m = d2;
                }
            });
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        current = best;
    }
    selected
}

/// Covering radius `max_u min_{c ∈ centers} ‖u − c‖` of a coreset.
pub fn covering_radius(points: &[f32], dim: usize, centers: &[usize]) -> f64 {
    points
        .chunks_exact(dim)
        .map(|u| {
            centers
                .iter()
                .map(|&c| euclidean(u, &points[c * dim..(c + 1) * dim]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn normalized_copy(set: &FeatureSet) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(set.vectors.len());
    for (i, v) in set.iter().enumerate() {
        let u = unit_normalized(v)
            .ok_or_else(|| Error::Input(format!("cannot normalize zero vector at index {i}")))?;
        out.extend(u);
    }
    Ok(out)
}

/// Greedy coreset of exactly `target` vectors from a seeded random start.
pub fn coreset_with_size(
    set: &FeatureSet,
    target: usize,
    seed: u64,
    normalize: bool,
) -> Result<KnowledgeBank> {
    if set.is_empty() {
        return Err(Error::Input("cannot subsample an empty feature set".into()));
    }
    if target == 0 || target > set.len() {
        return Err(Error::Config(format!(
            "coreset size {target} outside 1..={}",
            set.len()
        )));
    }
    let owned;
    let points: &[f32] = if normalize {
        owned = normalized_copy(set)?;
        &owned
    } else {
        &set.vectors
    };
    let start = seeded_rng(seed).random_range(0..set.len());
    let order = greedy_farthest_order(points, set.dim, target, start);
    let mut vectors = Vec::with_capacity(target * set.dim);
    for i in order {
        vectors.extend_from_slice(&points[i * set.dim..(i + 1) * set.dim]);
    }
    KnowledgeBank::from_parts(
        set.dim,
        vectors,
        Provenance {
            source_label: set.source_label,
            subsample_ratio: target as f64 / set.len() as f64,
            seed,
            normalized: normalize,
            source_count: set.len() as u64,
        },
    )
}

/// Greedy coreset keeping `⌈ratio · |set|⌉` vectors.
pub fn coreset_subsample(
    set: &FeatureSet,
    ratio: f64,
    seed: u64,
    normalize: bool,
) -> Result<KnowledgeBank> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("subsample ratio must lie in (0, 1], got {ratio}")));
    }
    let target = ceil_fraction(ratio, set.len()).max(1);
    let mut bank = coreset_with_size(set, target, seed, normalize)?;
    bank.provenance.subsample_ratio = ratio;
    Ok(bank)
}

/// Nearest-neighbour outlier removal: scores each vector by its mean
/// distance to its `k_inner` nearest other vectors and drops the
/// `⌊q · |set|⌋` highest scores (ties drop the lower index first).
pub fn denoise_bank(set: &FeatureSet, q: f64, k_inner: usize) -> Result<FeatureSet> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Config(format!("denoise fraction must lie in [0, 1), got {q}")));
    }
    if k_inner == 0 {
        return Err(Error::Config("k_inner must be positive".into()));
    }
    let n = set.len();
    if n <= k_inner + 1 {
        return Err(Error::Input(format!(
            "denoising needs more than k_inner + 1 = {} vectors, got {n}",
            k_inner + 1
        )));
    }
    let drop = floor_fraction(q, n);
    if drop == 0 {
        return Ok(set.clone());
    }
    let scores = neighbour_scores(set, k_inner);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    let vectors = set
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .flat_map(|(v, _)| v.iter().copied())
        .collect();
    FeatureSet::new(set.dim, vectors, set.source_label)
}

fn neighbour_scores(set: &FeatureSet, k: usize) -> Vec<f64> {
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let v = set.vector(i);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for (j, u) in set.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d2 = squared_euclidean(v, u);
                if best.len() == k && d2 >= best[k - 1] {
                    continue;
                }
                let pos = best.partition_point(|&b| b <= d2);
                best.insert(pos, d2);
                best.truncate(k);
            }
            best.iter().map(|d2| d2.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::FeatureMap;

    fn bank(dim: usize, vectors: Vec<f32>) -> KnowledgeBank {
        KnowledgeBank::from_parts(
            dim,
            vectors,
            Provenance {
                source_label: Label::Normal,
                subsample_ratio: 1.0,
                seed: 0,
                normalized: false,
                source_count: 0,
            },
        )
        .unwrap()
    }

    fn line(points: &[f32]) -> FeatureSet {
        FeatureSet::new(1, points.to_vec(), Label::Normal).unwrap()
    }

    #[test]
    fn knn_three_four_five() {
        let b = bank(2, vec![0.0, 0.0, 3.0, 4.0, 6.0, 8.0]);
        let ev = b.knn_query(&[0.0, 0.0], 2).unwrap();
        assert_eq!(ev.indices, vec![0, 1]);
        assert_eq!(ev.neighbors, vec![0.0, 0.0, 3.0, 4.0]);
        assert_eq!(ev.distances, vec![0.0, 5.0]);
        assert_eq!(b.knn_avg_distance(&[0.0, 0.0], 2).unwrap(), 2.5);
        assert_eq!(b.knn_avg_distance(&[0.0, 0.0], 3).unwrap(), 5.0);
        assert_eq!(b.knn_avg_distance(&[3.0, 4.0], 1).unwrap(), 0.0);
        let all = b.knn_query(&[6.0, 8.0], 3).unwrap();
        assert_eq!(all.indices, vec![2, 1, 0]);
        assert_eq!(all.distances, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let b = bank(1, vec![2.0, -1.0, 1.0, -1.0, 1.0]);
        let ev = b.knn_query(&[0.0], 4).unwrap();
        assert_eq!(ev.indices, vec![1, 2, 3, 4]);
    }

    #[test]
    fn knn_errors() {
        let b = bank(2, vec![0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(b.knn_query(&[0.0, 0.0], 3), Err(Error::Query(_))));
        assert!(matches!(b.knn_query(&[0.0, 0.0], 0), Err(Error::Query(_))));
        assert!(matches!(b.knn_query(&[0.0], 1), Err(Error::Query(_))));
    }

    #[test]
    fn collect_counts_and_errors() {
        let fm = |id: &str| FeatureMap::new(id, 2, 2, 3, vec![1.0; 12]).unwrap();
        let cases = vec![
            LabeledCase::new(fm("a"), Label::Normal),
            LabeledCase::new(fm("b"), Label::Normal),
        ];
        assert_eq!(collect_features(&cases, 1).unwrap().len(), 8);
        assert!(matches!(collect_features(&[], 1), Err(Error::Input(_))));
        let mixed = vec![cases[0].clone(), LabeledCase::new(fm("c"), Label::Pathological)];
        assert!(matches!(collect_features(&mixed, 1), Err(Error::Input(_))));
        let other_dim = LabeledCase::new(FeatureMap::new("d", 1, 1, 2, vec![0.0; 2]).unwrap(), Label::Normal);
        assert!(matches!(collect_features(&[cases[0].clone(), other_dim], 1), Err(Error::Input(_))));

        let single = LabeledCase::new(FeatureMap::new("s", 1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap(), Label::Normal);
        assert_eq!(collect_features(&[single], 1).unwrap().as_flat(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn greedy_trace_on_a_line() {
        let pts = [0.0f32, 1.0, 9.0, 10.0];
        assert_eq!(greedy_farthest_order(&pts, 1, 2, 0), vec![0, 3]);
        assert_eq!(greedy_farthest_order(&pts, 1, 4, 0), vec![0, 3, 1, 2]);
    }

    #[test]
    fn duplicates_are_never_selected_twice() {
        let pts = [1.0f32, 1.0, 1.0, 2.0];
        let order = greedy_farthest_order(&pts, 1, 4, 0);
        assert_eq!(order, vec![0, 3, 1, 2]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let s = line(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        let b = coreset_subsample(&s, 1.0, 11, false).unwrap();
        let mut got: Vec<f32> = b.as_flat().to_vec();
        got.sort_by(f32::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(b.provenance().source_count, 5);
    }

    #[test]
    fn coreset_size_is_ceiling() {
        let s = line(&(0..10).map(|v| v as f32).collect::<Vec<_>>());
        assert_eq!(coreset_subsample(&s, 0.3, 0, false).unwrap().len(), 3);
        assert_eq!(coreset_subsample(&s, 0.25, 0, false).unwrap().len(), 3);
        assert!(matches!(coreset_subsample(&s, 0.0, 0, false), Err(Error::Config(_))));
        assert!(matches!(coreset_subsample(&s, 1.5, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn normalized_bank_holds_unit_vectors() {
        let s = FeatureSet::new(2, vec![3.0, 4.0, 0.0, 2.0, -1.0, 0.0], Label::Pathological).unwrap();
        let b = coreset_subsample(&s, 1.0, 0, true).unwrap();
        for v in b.iter() {
            let n = (v[0] as f64).hypot(v[1] as f64);
            assert!((n - 1.0).abs() < 1e-6);
        }
        let a = b.knn_query(&[6.0, 8.0], 1).unwrap();
        assert_eq!(a.neighbor(0), &[0.6, 0.8]);
        assert!(matches!(b.knn_query(&[0.0, 0.0], 1), Err(Error::Query(_))));
    }

    #[test]
    fn bank_bytes_roundtrip_and_errors() {
        let s = FeatureSet::new(3, (0..30).map(|v| v as f32 * 0.1).collect(), Label::Pathological).unwrap();
        let b = coreset_subsample(&s, 0.5, 9, false).unwrap();
        let p = Path::new("mem.evkb");
        let bytes = b.to_bytes();
        assert_eq!(KnowledgeBank::from_bytes(&bytes, p).unwrap(), b);
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(KnowledgeBank::from_bytes(&bad, p).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(KnowledgeBank::from_bytes(&bad, p).unwrap_err().to_string().contains("version"));
        assert!(KnowledgeBank::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(KnowledgeBank::from_bytes(&[], p).is_err());
    }

    #[test]
    fn denoise_drops_the_outlier() {
        let s = line(&[0.0, 0.1, 0.2, 100.0]);
        let out = denoise_bank(&s, 0.25, 1).unwrap();
        assert_eq!(out.as_flat(), &[0.0, 0.1, 0.2]);
        assert_eq!(denoise_bank(&s, 0.0, 1).unwrap(), s);
        assert_eq!(denoise_bank(&s, 0.75, 1).unwrap().len(), 1);
        assert!(matches!(denoise_bank(&s, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(denoise_bank(&s, 0.5, 3), Err(Error::Input(_))));
    }

    #[test]
    fn truncation_is_a_prefix() {
        let s = line(&(0..50).map(|v| ((v * 37) % 50) as f32).collect::<Vec<_>>());
        let b = coreset_subsample(&s, 0.5, 4, false).unwrap();
        let t = b.truncated(5).unwrap();
        assert_eq!(t.as_flat(), &b.as_flat()[..5]);
        assert!(b.truncated(26).is_err());
    }
}
