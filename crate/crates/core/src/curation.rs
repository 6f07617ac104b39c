//! Popularity scoring for dance-video curation: log normalization, the
//! affine popularity function, its regression fit, the platform
//! recommendation ratio and the selection rules.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Engagement counters in the order the recommendation weights use.
pub const COUNTERS: [&str; 7] = ["coins", "favorites", "danmu_counts", "comments", "views", "likes", "shares"];
pub const POPULARITY_FEATURES: [&str; 5] = ["favorites", "danmu_counts", "views", "likes", "shares"];
pub const POPULARITY_WEIGHTS: [f64; 5] = [0.0251, 0.0095, 0.8033, 0.0967, 0.0243];
pub const POPULARITY_BIAS: f64 = 0.0443;
pub const POP_THRESHOLD: f64 = 0.85;
pub const RECOMMENDATION_WEIGHTS: [f64; 7] = [1.2, 0.9, 1.2, 1.2, 0.75, 1.2, 1.8];
/// Two-sided confidence level for coefficient intervals.
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VideoStats {
    #[serde(default)]
    pub id: String,
    pub coins: u64,
    pub favorites: u64,
    pub danmu_counts: u64,
    pub comments: u64,
    pub views: u64,
    pub likes: u64,
    pub shares: u64,
    pub followers: u64,
}

impl VideoStats {
    pub fn counter(&self, name: &str) -> Option<u64> {
        Some(match name {
            "coins" => self.coins,
            "favorites" => self.favorites,
            "danmu_counts" => self.danmu_counts,
            "comments" => self.comments,
            "views" => self.views,
            "likes" => self.likes,
            "shares" => self.shares,
            "followers" => self.followers,
            _ => return None,
        })
    }

    /// The seven counters in [`COUNTERS`] order.
    pub fn counters(&self) -> [f64; 7] {
        COUNTERS.map(|c| self.counter(c).expect("known counter") as f64)
    }
}

/// `log(v + offset)` rescaled so the batch minimum maps to 0 and the maximum
/// to 1. The offset is 1 when the fitted batch contained a zero, else 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalizer {
    pub offset: f64,
    pub min: f64,
    pub max: f64,
}

impl LogNormalizer {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("cannot normalize an empty batch".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("counts must be finite and non-negative".into()));
        }
        let offset = if values.iter().any(|&v| v == 0.0) { 1.0 } else { 0.0 };
        let logs = values.iter().map(|v| (v + offset).ln());
        let (min, max) = logs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(l), hi.max(l)));
        Ok(Self { offset, min, max })
    }

    /// Zero range maps everything to 0. Values outside the fitted range
    /// extrapolate linearly in log space.
    pub fn apply(&self, v: f64) -> f64 {
        let range = self.max - self.min;
        if range == 0.0 {
            return 0.0;
        }
        ((v + self.offset).ln() - self.min) / range
    }
}

pub fn log_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let n = LogNormalizer::fit(values)?;
    Ok(values.iter().map(|&v| n.apply(v)).collect())
}

/// `Pop = W . n + b` over log-normalized counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityModel {
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Frozen per-feature normalization. Without it every scored batch is
    /// normalized against itself.
    #[serde(default)]
    pub bounds: Option<Vec<LogNormalizer>>,
}

impl Default for PopularityModel {
    fn default() -> Self {
        Self {
            features: POPULARITY_FEATURES.iter().map(|s| s.to_string()).collect(),
            weights: POPULARITY_WEIGHTS.to_vec(),
            bias: POPULARITY_BIAS,
            bounds: None,
        }
    }
}

impl PopularityModel {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.features.len() {
            return Err(Error::config(
                "weights",
                format!("{} weights for {} features", self.weights.len(), self.features.len()),
            ));
        }
        let probe = VideoStats::default();
        if let Some(f) = self.features.iter().find(|f| f.as_str() == "followers" || probe.counter(f).is_none()) {
            return Err(Error::config("features", format!("unknown counter `{f}`")));
        }
        if let Some(b) = &self.bounds {
            if b.len() != self.features.len() {
                return Err(Error::config("bounds", format!("{} bounds for {} features", b.len(), self.features.len())));
            }
        }
        if self.weights.iter().chain([&self.bias]).any(|w| !w.is_finite()) {
            return Err(Error::config("weights", "must be finite"));
        }
        Ok(())
    }

    /// Popularity of one already-normalized feature vector.
    pub fn score(&self, normalized: &[f64]) -> Result<f64> {
        if normalized.len() != self.weights.len() {
            return Err(Error::shape("normalized features", self.weights.len(), normalized.len()));
        }
        Ok(self.weights.iter().zip(normalized).map(|(w, n)| w * n).sum::<f64>() + self.bias)
    }

    fn columns(&self, rows: &[VideoStats]) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .map(|f| rows.iter().map(|r| r.counter(f).expect("validated") as f64).collect())
            .collect()
    }

    /// Normalizers fitted on `rows`, one per feature.
    pub fn fit_bounds(&self, rows: &[VideoStats]) -> Result<Vec<LogNormalizer>> {
        self.validate()?;
        self.columns(rows).iter().map(|c| LogNormalizer::fit(c)).collect()
    }

    /// Normalized feature matrix (row per video) using the frozen bounds, or
    /// bounds fitted on this batch.
    pub fn normalize(&self, rows: &[VideoStats]) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let bounds = match &self.bounds {
            Some(b) => b.clone(),
            None => self.fit_bounds(rows)?,
        };
        let cols = self.columns(rows);
        Ok((0..rows.len())
            .map(|i| bounds.iter().zip(&cols).map(|(b, c)| b.apply(c[i])).collect())
            .collect())
    }

    pub fn score_batch(&self, rows: &[VideoStats]) -> Result<Vec<f64>> {
        self.normalize(rows)?.iter().map(|n| self.score(n)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Popularity of a normalized `[favorites, danmu, views, likes, shares]`
/// vector under `model`.
pub fn popularity(normalized: &[f64], model: &PopularityModel) -> Result<f64> {
    model.score(normalized)
}

/// Weighted engagement growth per view. `growth` is in [`COUNTERS`] order.
pub fn recommendation(growth: &[f64; 7]) -> Result<f64> {
    let views = growth[4];
    if views == 0.0 {
        return Err(Error::Invalid("recommendation is undefined for zero view growth".into()));
    }
    Ok(recommendation_total(growth) / views)
}

/// The recommendation numerator alone: weighted engagement totals, used as
/// the regression target when fitting a popularity function.
pub fn recommendation_total(counts: &[f64; 7]) -> f64 {
    RECOMMENDATION_WEIGHTS.iter().zip(counts).map(|(w, c)| w * c).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Coefficient {
    pub fn spans_zero(&self) -> bool {
        self.lower <= 0.0 && self.upper >= 0.0
    }
}

/// Ordinary least squares with an intercept and two-sided t intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub intercept: Coefficient,
    pub coefficients: Vec<Coefficient>,
    pub residual_variance: f64,
    pub dof: usize,
    pub level: f64,
    pub residuals: Vec<f64>,
}

impl RegressionFit {
    /// Features whose interval covers zero.
    pub fn eliminated(&self) -> Vec<String> {
        self.coefficients
            .iter()
            .filter(|c| c.spans_zero())
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn to_model(&self) -> PopularityModel {
        PopularityModel {
            features: self.coefficients.iter().map(|c| c.name.clone()).collect(),
            weights: self.coefficients.iter().map(|c| c.estimate).collect(),
            bias: self.intercept.estimate,
            bounds: None,
        }
    }
}

/// Fits `y ~ b + X w`. `x` holds one row per observation, columns named by
/// `names`. Needs at least `names.len() + 2` rows and a full-rank design.
pub fn fit_popularity(names: &[&str], x: &[Vec<f64>], y: &[f64], level: f64) -> Result<RegressionFit> {
    let (n, p) = (x.len(), names.len());
    if y.len() != n {
        return Err(Error::shape("regression targets", n, y.len()));
    }
    if let Some(r) = x.iter().find(|r| r.len() != p) {
        return Err(Error::shape("regression row", p, r.len()));
    }
    if n < p + 2 {
        return Err(Error::Invalid(format!("{n} rows cannot fit {p} features with an intercept")));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::config("level", "must be in (0, 1)"));
    }
    let cols = p + 1;
    let design = DMatrix::from_fn(n, cols, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let target = DVector::from_column_slice(y);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = n.max(cols) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < cols {
        return Err(Error::RankDeficient { rank, cols });
    }
    let beta = svd.solve(&target, tol).map_err(|e| Error::Invalid(e.to_string()))?;
    let resid = &target - &design * &beta;
    let dof = n - cols;
    let sigma2 = resid.norm_squared() / dof as f64;
    // (X^T X)^-1 = V S^-2 V^T
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let inv_s2 = DVector::from_iterator(cols, svd.singular_values.iter().map(|s| 1.0 / (s * s)));
    let cov_diag: Vec<f64> = (0..cols)
        .map(|j| (0..cols).map(|k| v_t[(k, j)] * v_t[(k, j)] * inv_s2[k]).sum::<f64>() * sigma2)
        .collect();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Invalid(e.to_string()))?;
    let q = dist.inverse_cdf(0.5 + level / 2.0);
    let coef = |j: usize, name: &str| {
        let se = cov_diag[j].sqrt();
        let est = beta[j];
        let t = if se > 0.0 { est / se } else if est == 0.0 { 0.0 } else { f64::INFINITY.copysign(est) };
        Coefficient {
            name: name.to_string(),
            estimate: est,
            std_error: se,
            t_stat: t,
            p_value: 2.0 * (1.0 - dist.cdf(t.abs())),
            lower: est - q * se,
            upper: est + q * se,
        }
    };
    debug!("regression on {n} rows, {p} features, residual variance {sigma2:e}");
    Ok(RegressionFit {
        intercept: coef(0, "intercept"),
        coefficients: names.iter().enumerate().map(|(j, nm)| coef(j + 1, nm)).collect(),
        residual_variance: sigma2,
        dof,
        level,
        residuals: resid.iter().cloned().collect(),
    })
}

/// Fits on every feature, drops those whose interval covers zero, and refits
/// on the rest. Returns both fits.
pub fn fit_with_selection(names: &[&str], x: &[Vec<f64>], y: &[f64], level: f64) -> Result<(RegressionFit, RegressionFit)> {
    let first = fit_popularity(names, x, y, level)?;
    let dropped = first.eliminated();
    let keep: Vec<usize> = (0..names.len()).filter(|&j| !dropped.iter().any(|d| d == names[j])).collect();
    if keep.is_empty() {
        return Err(Error::Invalid("every feature was eliminated".into()));
    }
    let kept_names: Vec<&str> = keep.iter().map(|&j| names[j]).collect();
    let sub: Vec<Vec<f64>> = x.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect();
    let second = fit_popularity(&kept_names, &sub, y, level)?;
    Ok((first, second))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "popularity rule")]
    Popularity,
    #[serde(rename = "follower rule")]
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub index: usize,
    pub id: String,
    pub popularity: f64,
    pub kept: bool,
    /// Every rule the row failed; empty when kept.
    pub failed: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub threshold: f64,
    pub decisions: Vec<Decision>,
}

impl Audit {
    pub fn kept(&self) -> impl Iterator<Item = &Decision> {
        self.decisions.iter().filter(|d| d.kept)
    }

    pub fn rejected(&self) -> impl Iterator<Item = &Decision> {
        self.decisions.iter().filter(|d| !d.kept)
    }
}

/// Keeps rows with popularity strictly above `threshold` and more views than
/// followers.
pub fn filter_videos(rows: &[VideoStats], popularity: &[f64], threshold: f64) -> Result<Audit> {
    if rows.len() != popularity.len() {
        return Err(Error::shape("popularity scores", rows.len(), popularity.len()));
    }
    let decisions = rows
        .iter()
        .zip(popularity)
        .enumerate()
        .map(|(index, (r, &pop))| {
            let mut failed = Vec::new();
            if !(pop > threshold) {
                failed.push(Rule::Popularity);
            }
            if r.views <= r.followers {
                failed.push(Rule::Follower);
            }
            Decision {
                index,
                id: r.id.clone(),
                popularity: pop,
                kept: failed.is_empty(),
                failed,
            }
        })
        .collect();
    Ok(Audit { threshold, decisions })
}

/// Scores a batch with `model` and applies the selection rules.
pub fn curate(rows: &[VideoStats], model: &PopularityModel) -> Result<Audit> {
    let pops = model.score_batch(rows)?;
    filter_videos(rows, &pops, POP_THRESHOLD)
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<VideoStats>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Writes the kept rows with their popularity appended.
pub fn write_selected_csv(path: &Path, rows: &[VideoStats], audit: &Audit) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    // csv cannot serialize flattened structs, so write records by hand
    let mut header = vec!["id"];
    header.extend(COUNTERS);
    header.extend(["followers", "popularity"]);
    w.write_record(&header)?;
    for d in audit.kept() {
        let r = &rows[d.index];
        let mut rec = vec![r.id.clone()];
        rec.extend(COUNTERS.iter().chain(&["followers"]).map(|c| r.counter(c).expect("known counter").to_string()));
        rec.push(d.popularity.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
