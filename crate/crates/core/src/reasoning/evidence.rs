use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;
use crate::knowledge_bank::{BankPair, KnowledgeBank};

use super::tensor::Matrix;

/// Per-patch retrieved evidence from one bank: `h × w × k` vectors of
/// dimension `d`, nearest first, with their distances.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSet {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub distances: Vec<f64>,
}

impl EvidenceSet {
    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    /// The `k` evidence vectors of one patch, flattened.
    pub fn patch(&self, patch: usize) -> &[f32] {
        let n = self.k * self.dim;
        &self.vectors[patch * n..(patch + 1) * n]
    }

    /// All evidence as a `(h·w·k) × d` matrix, patch-major.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_f32(self.num_patches() * self.k, self.dim, &self.vectors)
    }

    /// Evidence made of the query patch itself repeated `k` times, used to
    /// isolate the reasoning head from retrieval.
    pub fn replicated_query(fm: &FeatureMap, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("evidence k must be positive".into()));
        }
        let mut vectors = Vec::with_capacity(fm.num_patches() * k * fm.dim());
        for patch in fm.patches() {
            for _ in 0..k {
                vectors.extend_from_slice(patch);
            }
        }
        Ok(Self {
            height: fm.height(),
            width: fm.width(),
            k,
            dim: fm.dim(),
            vectors,
            distances: vec![0.0; fm.num_patches() * k],
        })
    }

    pub(crate) fn check_matches(&self, fm: &FeatureMap, feature_dim: usize) -> Result<()> {
        if (self.height, self.width) != (fm.height(), fm.width()) || self.dim != feature_dim || self.k == 0 {
            return Err(Error::Input(format!(
                "evidence shape {}x{}x{}x{} does not match case {} ({}x{}, d={feature_dim})",
                self.height,
                self.width,
                self.k,
                self.dim,
                fm.case_id(),
                fm.height(),
                fm.width()
            )));
        }
        if self.vectors.len() != self.num_patches() * self.k * self.dim {
            return Err(Error::Input("evidence payload length is inconsistent".into()));
        }
        Ok(())
    }
}

fn retrieve_from(fm: &FeatureMap, bank: &KnowledgeBank, k: usize) -> Result<EvidenceSet> {
    let mut vectors = Vec::with_capacity(fm.num_patches() * k * fm.dim());
    let mut distances = Vec::with_capacity(fm.num_patches() * k);
    for (idx, patch) in fm.patches().enumerate() {
        let ev = bank.knn_query(patch, k).map_err(|e| {
            Error::Query(format!(
                "case {} patch ({}, {}): {e}",
                fm.case_id(),
                idx / fm.width(),
                idx % fm.width()
            ))
        })?;
        vectors.extend_from_slice(&ev.neighbors);
        distances.extend_from_slice(&ev.distances);
    }
    Ok(EvidenceSet {
        height: fm.height(),
        width: fm.width(),
        k,
        dim: fm.dim(),
        vectors,
        distances,
    })
}

/// k-NN evidence for every patch from the normal and pathological banks.
pub fn retrieve_evidence(fm: &FeatureMap, banks: &BankPair, k: usize) -> Result<(EvidenceSet, EvidenceSet)> {
    Ok((
        retrieve_from(fm, &banks.normal, k)?,
        retrieve_from(fm, &banks.pathological, k)?,
    ))
}
