//! Per-case regional feature maps: the EVFM file format, dataset manifests,
//! locally aware aggregation and the stratified bank/reasoning split.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{ceil_fraction, seeded_rng};

pub const EVFM_MAGIC: &[u8; 4] = b"EVFM";
pub const EVFM_VERSION: u32 = 1;
const UNLABELED: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Pathological,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Pathological => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Pathological),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Pathological
    }
}

/// An `h × w` grid of `d`-dimensional patch vectors, stored row-major with
/// each vector contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    case_id: String,
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        case_id: impl Into<String>,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Input(format!(
                "feature map {case_id}: dimensions must be positive (h={height}, w={width}, d={dim})"
            )));
        }
        let expected = height * width * dim;
        if data.len() != expected {
            return Err(Error::Input(format!(
                "feature map {case_id}: dimension mismatch, {height}x{width}x{dim} = {expected} scalars but {} supplied",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "feature map {case_id}: non-finite value at scalar index {pos}"
            )));
        }
        Ok(Self {
            case_id,
            height,
            width,
            dim,
            data,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Patch vectors in row-major order.
    pub fn patches(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn with_case_id(mut self, case_id: impl Into<String>) -> Self {
        self.case_id = case_id.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub features: FeatureMap,
    pub label: Label,
}

impl LabeledCase {
    pub fn new(features: FeatureMap, label: Label) -> Self {
        Self { features, label }
    }

    pub fn case_id(&self) -> &str {
        self.features.case_id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub bank_subset: Vec<LabeledCase>,
    pub reasoning_subset: Vec<LabeledCase>,
    pub split_seed: u64,
    pub split_ratio: f64,
}

/// Encodes one feature map (and optional label) as an EVFM byte stream.
pub fn encode_feature_map(fm: &FeatureMap, label: Option<Label>) -> Vec<u8> {
    let id = fm.case_id.as_bytes();
    let mut out = Vec::with_capacity(23 + id.len() + fm.data.len() * 4);
    out.extend_from_slice(EVFM_MAGIC);
    out.extend_from_slice(&EVFM_VERSION.to_le_bytes());
    out.extend_from_slice(&(fm.height as u32).to_le_bytes());
    out.extend_from_slice(&(fm.width as u32).to_le_bytes());
    out.extend_from_slice(&(fm.dim as u32).to_le_bytes());
    out.push(label.map_or(UNLABELED, Label::as_u8));
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    for v in &fm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Decodes an EVFM byte stream. `path` only labels error messages.
pub fn decode_feature_map(bytes: &[u8], path: &Path) -> Result<(FeatureMap, Option<Label>)> {
    let mut r = Reader { bytes, pos: 0 };
    let header = |what: &str| Error::load(path, format!("malformed header: truncated {what}"));
    let magic = r.take(4).ok_or_else(|| header("magic"))?;
    if magic != EVFM_MAGIC {
        return Err(Error::load(path, "malformed header: bad magic (expected EVFM)"));
    }
    let version = r.u32().ok_or_else(|| header("version"))?;
    if version != EVFM_VERSION {
        return Err(Error::load(
            path,
            format!("unsupported EVFM version {version} (expected {EVFM_VERSION})"),
        ));
    }
    let h = r.u32().ok_or_else(|| header("height"))? as usize;
    let w = r.u32().ok_or_else(|| header("width"))? as usize;
    let d = r.u32().ok_or_else(|| header("dim"))? as usize;
    let label_byte = r.u8().ok_or_else(|| header("label"))?;
    let label = match label_byte {
        UNLABELED => None,
        v => Some(
            Label::from_u8(v)
                .ok_or_else(|| Error::load(path, format!("malformed header: label byte {v}")))?,
        ),
    };
    let id_len = r.u16().ok_or_else(|| header("case id length"))? as usize;
    let id = r.take(id_len).ok_or_else(|| header("case id"))?;
    let case_id = std::str::from_utf8(id)
        .map_err(|_| Error::load(path, "malformed header: case id is not UTF-8"))?
        .to_owned();
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::load(
            path,
            format!("malformed header: zero dimension (h={h}, w={w}, d={d})"),
        ));
    }
    let remaining = r.remaining();
    if remaining % 4 != 0 || remaining / 4 != h * w * d {
        return Err(Error::load(
            path,
            format!(
                "dimension mismatch: header declares {h}x{w}x{d} = {} scalars, payload holds {} bytes",
                h * w * d,
                remaining
            ),
        ));
    }
    let data: Vec<f32> = r
        .take(remaining)
        .unwrap()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let fm = FeatureMap::new(case_id, h, w, d, data).map_err(|e| Error::load(path, e.to_string()))?;
    Ok((fm, label))
}

pub fn read_feature_file(path: &Path) -> Result<(FeatureMap, Option<Label>)> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, format!("cannot read file: {e}")))?;
    decode_feature_map(&bytes, path)
}

pub fn write_feature_file(path: &Path, fm: &FeatureMap, label: Option<Label>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_feature_map(fm, label))
        .map_err(|e| Error::io(path, e))
}

/// Reads a manifest: one feature-file path per line, blank lines and `#`
/// comments ignored. Relative paths resolve against the manifest's directory.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::load(manifest_path, format!("cannot read manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Loads every entry of a manifest, labeled or not, in manifest order.
/// All maps must share the feature dimension.
pub fn load_feature_maps(manifest_path: &Path) -> Result<Vec<(FeatureMap, Option<Label>)>> {
    let paths = read_manifest(manifest_path)?;
    let loaded: Vec<_> = paths
        .par_iter()
        .map(|p| read_feature_file(p))
        .collect::<Result<_>>()?;
    if let Some((first, _)) = loaded.first() {
        let d = first.dim();
        for ((fm, _), path) in loaded.iter().zip(&paths) {
            if fm.dim() != d {
                return Err(Error::load(
                    path,
                    format!(
                        "dimension mismatch across cases: d={} but the first case has d={d}",
                        fm.dim()
                    ),
                ));
            }
        }
    }
    Ok(loaded)
}

/// Loads a labeled dataset. Unlabeled entries are rejected.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<LabeledCase>> {
    let paths = read_manifest(manifest_path)?;
    let maps = load_feature_maps(manifest_path)?;
    maps.into_iter()
        .zip(paths)
        .map(|((fm, label), path)| match label {
            Some(label) => Ok(LabeledCase::new(fm, label)),
            None => Err(Error::load(path, "case is unlabeled (label byte 255)")),
        })
        .collect()
}

/// Writes one EVFM file per case into `dir` plus a `manifest.txt` listing them.
pub fn write_dataset(dir: &Path, cases: &[LabeledCase]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, case) in cases.iter().enumerate() {
        let name = format!("{i:05}_{}.evfm", sanitize(case.case_id()));
        write_feature_file(&dir.join(&name), &case.features, Some(case.label))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Locally aware aggregation: each output vector is the mean of the input
/// vectors in the `window × window` neighbourhood, clipped at the borders.
pub fn aggregate_local(fm: &FeatureMap, window: usize) -> Result<FeatureMap> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("aggregation window must be odd, got {window}")));
    }
    let (h, w, d) = (fm.height, fm.width, fm.dim);
    if window > h.max(w) {
        return Err(Error::Config(format!(
            "aggregation window {window} exceeds grid {h}x{w}"
        )));
    }
    if window == 1 {
        return Ok(fm.clone());
    }
    let r = window / 2;
    let mut out = Vec::with_capacity(fm.data.len());
    let mut acc = vec![0.0f64; d];
    for i in 0..h {
        for j in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let (r0, r1) = (i.saturating_sub(r), (i + r).min(h - 1));
            let (c0, c1) = (j.saturating_sub(r), (j + r).min(w - 1));
            for ii in r0..=r1 {
                for jj in c0..=c1 {
                    for (a, &v) in acc.iter_mut().zip(fm.patch(ii, jj)) {
                        *a += v as f64;
                    }
                }
            }
            let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            out.extend(acc.iter().map(|a| (a / count) as f32));
        }
    }
    FeatureMap::new(fm.case_id.clone(), h, w, d, out)
}

/// Stratified seeded split: within each label, a seeded permutation sends
/// `⌈ratio · n_class⌉` cases to the bank subset. Both subsets keep input order.
pub fn split_dataset(cases: &[LabeledCase], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut rng = seeded_rng(seed);
    let mut to_bank = vec![false; cases.len()];
    for label in [Label::Normal, Label::Pathological] {
        let mut idx: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].label == label).collect();
        if idx.len() < 2 {
            return Err(Error::Split(format!(
                "need at least 2 {label:?} cases to split, found {}",
                idx.len()
            )));
        }
        let take = ceil_fraction(ratio, idx.len());
        idx.shuffle(&mut rng);
        for &i in &idx[..take] {
            to_bank[i] = true;
        }
    }
    let (bank, reasoning): (Vec<_>, Vec<_>) = cases
        .iter()
        .zip(&to_bank)
        .partition(|(_, &b)| b);
    Ok(DatasetSplit {
        bank_subset: bank.into_iter().map(|(c, _)| c.clone()).collect(),
        reasoning_subset: reasoning.into_iter().map(|(c, _)| c.clone()).collect(),
        split_seed: seed,
        split_ratio: ratio,
    })
}
