//! Multi-run sweeps aggregated as mean and sample standard deviation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::config::{Method, RunConfig};
use super::run::{run, RunSummary};
use crate::error::Result;

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanStd {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; zero for fewer than two values.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for MeanStd {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = MeanStd::default();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// One aggregated row: all runs sharing a method and labeled fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub labeled_fraction: f64,
    pub metric: MeanStd,
    pub loss: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub runs: Vec<RunSummary>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,labeled_fraction,runs,metric_mean,metric_std,loss_down_val_mean,loss_down_val_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.labeled_fraction,
                r.metric.count(),
                r.metric.mean(),
                r.metric.std(),
                r.loss.mean(),
                r.loss.std()
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Aggregates summaries by (method, labeled fraction) in first-seen order.
pub fn aggregate(runs: &[RunSummary]) -> Vec<SweepRow> {
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in runs {
        let key = (r.method.clone(), r.labeled_fraction.to_bits());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), Vec::new())
        });
        entry.0.push(r.final_metric_val);
        entry.1.push(r.final_loss_down_val);
    }
    order
        .into_iter()
        .map(|key| {
            let (m, l) = &groups[&key];
            SweepRow {
                method: key.0.clone(),
                labeled_fraction: f64::from_bits(key.1),
                metric: m.iter().copied().collect(),
                loss: l.iter().copied().collect(),
            }
        })
        .collect()
}

/// Runs every config in isolation (in parallel) and aggregates.
pub fn sweep(configs: &[RunConfig]) -> Result<SweepResult> {
    let runs = configs
        .par_iter()
        .map(|c| run(c).map(|o| o.summary))
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&runs);
    Ok(SweepResult { runs, rows })
}

/// `base` once per seed.
pub fn seed_configs(base: &RunConfig, seeds: &[u64]) -> Vec<RunConfig> {
    seeds.iter().map(|&s| base.clone().with_seed(s)).collect()
}

/// `base` for every labeled fraction and seed.
pub fn fraction_configs(base: &RunConfig, fractions: &[f64], seeds: &[u64]) -> Vec<RunConfig> {
    fractions
        .iter()
        .flat_map(|&f| {
            let mut c = base.clone();
            c.task.labeled_fraction = f;
            seed_configs(&c, seeds)
        })
        .collect()
}

/// Coarse search over fixed weights: every vector with entries from
/// `values`, excluding the all-zero vector.
pub fn fixed_grid_configs(base: &RunConfig, values: &[f64]) -> Vec<RunConfig> {
    let k = base.task.num_losses();
    let total = values.len().pow(k as u32);
    (0..total)
        .filter_map(|mut idx| {
            let w: Vec<f64> = (0..k)
                .map(|_| {
                    let v = values[idx % values.len()];
                    idx /= values.len();
                    v
                })
                .collect();
            w.iter().any(|v| *v > 0.0).then(|| RunConfig {
                method: Method::Fixed(w),
                ..base.clone()
            })
        })
        .collect()
}
