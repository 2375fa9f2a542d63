//! Training-free screening by contrastive retrieval against the dual banks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;
use crate::knowledge_bank::{BankPair, KnowledgeBank};

/// A non-negative `h × w` grid of per-patch values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Per-patch mean k-NN distance to one bank.
pub type DistanceMap = Grid;
/// Rectified difference of the normal and pathological distance maps.
pub type AbnormalityMap = Grid;

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Input(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("grid values must be finite and non-negative".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One CSV line per grid row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Standalone SVG heatmap, one square per patch, scaled to the grid maximum.
    pub fn to_svg(&self, title: &str) -> String {
        const CELL: usize = 24;
        let (w, h) = (self.width * CELL, self.height * CELL + 20);
        let peak = self.max();
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<text x=\"2\" y=\"14\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
            xml_escape(title)
        );
        for i in 0..self.height {
            for j in 0..self.width {
                let t = if peak > 0.0 { self.get(i, j) / peak } else { 0.0 };
                let (r, g, b) = heat_colour(t);
                svg.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({r},{g},{b})\"><title>{:.6}</title></rect>\n",
                    j * CELL,
                    i * CELL + 20,
                    self.get(i, j)
                ));
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn heat_colour(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    // dark blue -> yellow -> red
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (30.0 + u * 225.0, 30.0 + u * 190.0, 120.0 - u * 80.0)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0, 220.0 - u * 190.0, 40.0 - u * 20.0)
    };
    (r as u8, g as u8, b as u8)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// How an abnormality map is reduced to one case score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Mean,
    TopKMean(usize),
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::Max => f.write_str("max"),
            Pooling::Mean => f.write_str("mean"),
            Pooling::TopKMean(t) => write!(f, "topk:{t}"),
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            _ => {
                let t = s
                    .strip_prefix("topk:")
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("unknown pooling '{s}' (expected max, mean or topk:T)"))
                    })?;
                if t == 0 {
                    return Err(Error::Config("topk pooling needs t >= 1".into()));
                }
                Ok(Pooling::TopKMean(t))
            }
        }
    }
}

impl Serialize for Pooling {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Pooling {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreeningMethod {
    Contrastive,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningResult {
    pub case_id: String,
    pub score: f64,
    pub abnormality_map: Option<AbnormalityMap>,
    pub method: ScreeningMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub k: usize,
    pub pooling: Pooling,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            k: 3,
            pooling: Pooling::Max,
        }
    }
}

/// Mean k-NN distance of every patch to one bank.
pub fn distance_map(fm: &FeatureMap, bank: &KnowledgeBank, k: usize) -> Result<DistanceMap> {
    let mut values = Vec::with_capacity(fm.num_patches());
    for (idx, patch) in fm.patches().enumerate() {
        let d = bank.knn_avg_distance(patch, k).map_err(|e| {
            Error::Query(format!(
                "case {} patch ({}, {}): {e}",
                fm.case_id(),
                idx / fm.width(),
                idx % fm.width()
            ))
        })?;
        values.push(d);
    }
    Grid::new(fm.height(), fm.width(), values)
}

/// Distance maps against the normal and pathological banks.
pub fn distance_maps(fm: &FeatureMap, banks: &BankPair, k: usize) -> Result<(DistanceMap, DistanceMap)> {
    Ok((
        distance_map(fm, &banks.normal, k)?,
        distance_map(fm, &banks.pathological, k)?,
    ))
}

/// `max(0, M_N − M_P)` elementwise.
pub fn abnormality_map(m_n: &DistanceMap, m_p: &DistanceMap) -> Result<AbnormalityMap> {
    if (m_n.height, m_n.width) != (m_p.height, m_p.width) {
        return Err(Error::Input(format!(
            "distance map shapes differ: {}x{} vs {}x{}",
            m_n.height, m_n.width, m_p.height, m_p.width
        )));
    }
    let values = m_n
        .values
        .iter()
        .zip(&m_p.values)
        .map(|(n, p)| (n - p).max(0.0))
        .collect();
    Grid::new(m_n.height, m_n.width, values)
}

pub fn pool_score(m: &Grid, pooling: Pooling) -> Result<f64> {
    let n = m.values.len();
    match pooling {
        Pooling::Max => Ok(m.max()),
        Pooling::Mean => Ok(m.values.iter().sum::<f64>() / n as f64),
        Pooling::TopKMean(t) => {
            if t == 0 || t > n {
                return Err(Error::Config(format!("topk pooling needs 1 <= t <= {n}, got {t}")));
            }
            if t == n {
                return pool_score(m, Pooling::Mean);
            }
            let mut sorted = m.values.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            Ok(sorted[..t].iter().sum::<f64>() / t as f64)
        }
    }
}

/// Full training-free pipeline: distance maps, contrast, pooling.
pub fn screen_training_free(
    fm: &FeatureMap,
    banks: &BankPair,
    config: &ContrastiveConfig,
) -> Result<ScreeningResult> {
    let (m_n, m_p) = distance_maps(fm, banks, config.k)?;
    let map = abnormality_map(&m_n, &m_p)?;
    let score = pool_score(&map, config.pooling)?;
    Ok(ScreeningResult {
        case_id: fm.case_id().to_owned(),
        score,
        abnormality_map: Some(map),
        method: ScreeningMethod::Contrastive,
    })
}

/// Deviation-only ablation: pools the normal-bank distance map alone.
pub fn screen_normal_only(
    fm: &FeatureMap,
    normal: &KnowledgeBank,
    config: &ContrastiveConfig,
) -> Result<ScreeningResult> {
    let m_n = distance_map(fm, normal, config.k)?;
    let score = pool_score(&m_n, config.pooling)?;
    Ok(ScreeningResult {
        case_id: fm.case_id().to_owned(),
        score,
        abnormality_map: Some(m_n),
        method: ScreeningMethod::Contrastive,
    })
}
