//! Environment diversity reports and ablation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ks_two_sample;

/// Pairwise K-S comparison of one scalar feature across environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub strategy: String,
    /// Environment ids present in the assignment, ascending.
    pub envs: Vec<usize>,
    /// Feature values per environment, aligned with `envs`.
    pub features: Vec<Vec<f64>>,
    /// K-S statistic per pair; zero diagonal. Skipped pairs hold 0.
    pub d: Vec<Vec<f64>>,
    /// K-S p-value per pair; `None` on the diagonal and for skipped pairs.
    pub p: Vec<Vec<Option<f64>>>,
    /// Mean of `d` over compared (off-diagonal, non-skipped) pairs.
    pub inter_env_distance: f64,
    /// Pairs not compared because one side had fewer than two samples.
    pub skipped: Vec<(usize, usize)>,
}

/// Minimum samples an environment needs to enter a comparison.
pub const MIN_ENV_SAMPLES: usize = 2;

/// Compares the per-environment distributions of `features`.
///
/// Pairs where either environment has fewer than [`MIN_ENV_SAMPLES`] samples
/// are skipped with a warning. When no pair can be compared the distance
/// is 0.
pub fn diversity_report(strategy: &str, features: &[f64], envs: &[usize]) -> Result<DiversityReport> {
    if features.len() != envs.len() {
        return Err(Error::Contract(format!(
            "{} features for {} environment labels",
            features.len(),
            envs.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::Contract("diversity report over an empty sample".into()));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&f, &e) in features.iter().zip(envs) {
        groups.entry(e).or_default().push(f);
    }
    let ids: Vec<usize> = groups.keys().copied().collect();
    let feats: Vec<Vec<f64>> = groups.into_values().collect();
    let n = ids.len();
    let mut d = vec![vec![0.0; n]; n];
    let mut p = vec![vec![None; n]; n];
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if feats[i].len() < MIN_ENV_SAMPLES || feats[j].len() < MIN_ENV_SAMPLES {
                log::warn!(
                    "{strategy}: skipping environments {} and {} ({} and {} samples)",
                    ids[i],
                    ids[j],
                    feats[i].len(),
                    feats[j].len()
                );
                skipped.push((ids[i], ids[j]));
                continue;
            }
            let (dij, pij) = ks_two_sample(&feats[i], &feats[j])?;
            d[i][j] = dij;
            d[j][i] = dij;
            p[i][j] = Some(pij);
            p[j][i] = Some(pij);
            sum += dij;
            pairs += 1;
        }
    }
    if pairs == 0 {
        log::warn!("{strategy}: fewer than two usable environments, inter-env distance set to 0");
    }
    Ok(DiversityReport {
        strategy: strategy.to_string(),
        envs: ids,
        features: feats,
        d,
        p,
        inter_env_distance: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        skipped,
    })
}

impl DiversityReport {
    /// `env,value,count` rows, sorted by environment then value.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("env,value,count\n");
        for (e, vals) in self.envs.iter().zip(&self.features) {
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            let mut i = 0;
            while i < sorted.len() {
                let v = sorted[i];
                let run = sorted[i..].iter().take_while(|&&x| x == v).count();
                let _ = writeln!(out, "{e},{v},{run}");
                i += run;
            }
        }
        out
    }
}

/// One metric/strategy row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two seeds.
    pub std: f64,
}

impl AblationRow {
    pub fn new(strategy: &str, metric: &str, seeds: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if seeds.len() != values.len() || values.is_empty() {
            return Err(Error::Contract(format!(
                "{} seeds for {} values",
                seeds.len(),
                values.len()
            )));
        }
        let (mean, std) = mean_std(&values);
        Ok(Self {
            strategy: strategy.to_string(),
            metric: metric.to_string(),
            seeds,
            values,
            mean,
            std,
        })
    }
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
