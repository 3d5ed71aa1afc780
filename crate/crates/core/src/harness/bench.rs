//! Per-step cost of plain training, the embedding-space tuner and the naive
//! parameter-space tuner as the number of losses grows.

use std::fmt::Write as _;
use std::time::Instant;

use super::config::{Method, ModelConfig, RunConfig};
use super::run::build_model;
use super::sweep::MeanStd;
use crate::error::{Error, Result};
use crate::mlp::Activation;
use crate::model::{CompositeModel, DownstreamGrad, UpdateRates};
use crate::oracles::suites::fit_slope;
use crate::rng::Rng;
use crate::tasks::{self, BatchStream, TaskSpec};
use crate::tuner::{self, Normalization, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Equal weights, one combined backbone backward.
    Plain,
    /// Weight step on embedding-space gradients, one backbone backward.
    Embedding,
    /// Weight step on parameter-space gradients, `K + 1` backbone backwards.
    Naive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    /// Upper limit for automatic batch growth.
    pub max_batch_size: usize,
    /// Plain steps faster than this are considered below timer resolution.
    pub min_step_us: f64,
    pub model: ModelConfig,
    pub n_features: usize,
    pub d: usize,
    pub target_dim: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ks: vec![2, 4, 8, 16],
            steps: 200,
            warmup: 50,
            batch_size: 128,
            max_batch_size: 4096,
            min_step_us: 50.0,
            model: ModelConfig {
                hidden: vec![128, 128, 128],
                activation: Activation::Relu,
                ..ModelConfig::default()
            },
            n_features: 20,
            d: 16,
            target_dim: 4,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Median step times in microseconds for one `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub batch_size: usize,
    pub plain_us: f64,
    pub embedding_us: f64,
    pub naive_us: f64,
}

impl BenchRow {
    pub fn embedding_overhead(&self) -> f64 {
        self.embedding_us / self.plain_us
    }

    pub fn naive_overhead(&self) -> f64 {
        self.naive_us / self.plain_us
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slopes of step time against `K`.
    pub plain_slope: f64,
    pub embedding_slope: f64,
    pub naive_slope: f64,
}

impl BenchReport {
    pub fn mean_embedding_overhead(&self) -> f64 {
        self.rows.iter().map(BenchRow::embedding_overhead).collect::<MeanStd>().mean()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,batch_size,plain_us,embedding_us,naive_us,embedding_over_plain,naive_over_plain\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{:.3},{:.4},{:.4}",
                r.k,
                r.batch_size,
                r.plain_us,
                r.embedding_us,
                r.naive_us,
                r.embedding_overhead(),
                r.naive_overhead()
            );
        }
        out
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_csv())?;
        write!(
            f,
            "slopes in K: plain {:.3}, embedding {:.3}, naive {:.3}; mean embedding overhead {:.1}%",
            self.plain_slope,
            self.embedding_slope,
            self.naive_slope,
            100.0 * (self.mean_embedding_overhead() - 1.0)
        )
    }
}

fn bench_run_config(cfg: &BenchConfig, k: usize, batch_size: usize) -> RunConfig {
    RunConfig {
        method: Method::Equal,
        seed: cfg.seed,
        batch_size,
        lr: cfg.lr,
        model: cfg.model.clone(),
        task: TaskSpec {
            n_features: cfg.n_features,
            d: cfg.d,
            target_dim: cfg.target_dim,
            losses: tasks::mixed_losses(k),
            labeled_fraction: 0.5,
            n_train: (4 * batch_size).max(1024),
            n_val: 64,
            seed: cfg.seed,
            ..TaskSpec::default()
        },
        ..RunConfig::default()
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One training step of `variant` at backbone rate `lr`; the embedding and
/// naive variants need at least one labeled row.
pub fn variant_step(variant: Variant, model: &mut CompositeModel, w: &mut WeightVector, batch: &crate::Batch, lr: f64) -> Result<()> {
    let rates = UpdateRates::uniform(lr);
    let norm_cfg = Normalization::default();
    match variant {
        Variant::Plain => {
            let eg = model.compute_embedding_grads(batch, DownstreamGrad::IfLabeled)?;
            let ones = vec![1.0; eg.num_losses()];
            let w_bar = tuner::normalized_weights(&ones, &eg.g_tilde)?;
            let c = eg.combine(&w_bar)?;
            model.apply_update_with_cotangent(&eg, &c, rates)
        }
        Variant::Embedding => {
            let eg = model.compute_embedding_grads(batch, DownstreamGrad::Required)?;
            let w_bar = tuner::normalized_weights(w.values(), &eg.g_tilde)?;
            let gd = eg.g_tilde_down.as_deref().ok_or(Error::EmptyLabeledSubset)?;
            tuner::weight_step(w, &eg.g_tilde, gd, norm_cfg)?;
            let c = eg.combine(&w_bar)?;
            model.apply_update_with_cotangent(&eg, &c, rates)
        }
        Variant::Naive => {
            let eg = model.compute_embedding_grads(batch, DownstreamGrad::Required)?;
            let pg = model.param_grads_from(&eg)?;
            let w_bar = tuner::normalized_weights(w.values(), &pg.g)?;
            tuner::weight_step(w, &pg.g, &pg.g_down, norm_cfg)?;
            let dir = pg.g.matvec_t(&w_bar)?;
            model.step_backbone_params(&dir, lr)?;
            model.step_heads(&eg, rates)
        }
    }
}

/// Models, weights and fully labeled batches for one `K`; fully labeled
/// batches keep every variant on the same code path at every step.
struct Lane {
    k: usize,
    models: [CompositeModel; 3],
    weights: [WeightVector; 3],
    batches: Vec<crate::Batch>,
    times: [Vec<f64>; 3],
}

const VARIANTS: [Variant; 3] = [Variant::Plain, Variant::Embedding, Variant::Naive];

impl Lane {
    fn new(cfg: &BenchConfig, k: usize, batch_size: usize, n_batches: usize) -> Result<Self> {
        let rc = bench_run_config(cfg, k, batch_size);
        let data = tasks::generate(&rc.task)?;
        let model = build_model(&rc)?;
        let w = WeightVector::ones(k, cfg.lr, 0.0)?;
        let stream = BatchStream::new(&data.train, batch_size, Rng::new(cfg.seed).substream("bench-batches"))?;
        let batches = stream
            .take(n_batches)
            .map(|mut b| {
                b.labeled_mask.iter_mut().for_each(|m| *m = true);
                b
            })
            .collect();
        Ok(Lane {
            k,
            models: [model.clone(), model.clone(), model],
            weights: [w.clone(), w.clone(), w],
            batches,
            times: Default::default(),
        })
    }

    fn step(&mut self, v: usize, i: usize, lr: f64) -> Result<f64> {
        let t = Instant::now();
        variant_step(VARIANTS[v], &mut self.models[v], &mut self.weights[v], &self.batches[i], lr)?;
        Ok(t.elapsed().as_secs_f64() * 1e6)
    }
}

/// Smallest batch size (doubling from the configured one, with a warning)
/// at which a plain step at the smallest `K` takes `min_step_us`.
fn calibrate_batch_size(cfg: &BenchConfig) -> Result<usize> {
    let k = *cfg.ks.iter().min().expect("non-empty K list");
    let probe_steps = cfg.warmup.clamp(1, 20);
    let mut batch_size = cfg.batch_size;
    loop {
        let mut lane = Lane::new(cfg, k, batch_size, 2 * probe_steps)?;
        let times = (0..2 * probe_steps)
            .map(|i| lane.step(0, i, cfg.lr))
            .collect::<Result<Vec<_>>>()?;
        let plain = median(times[probe_steps..].to_vec());
        if plain >= cfg.min_step_us || batch_size * 2 > cfg.max_batch_size {
            return Ok(batch_size);
        }
        log::warn!(
            "plain step of {plain:.1} us is below the timing floor; batch size {batch_size} -> {}",
            batch_size * 2
        );
        batch_size *= 2;
    }
}

/// Median step time of every variant for each `K`. Steps are interleaved
/// round-robin over all `(K, variant)` pairs so that slow drifts in machine
/// speed affect every measurement alike.
pub fn benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.ks.is_empty() || cfg.steps == 0 || cfg.ks.contains(&0) {
        return Err(Error::Config("benchmark needs K values >= 1 and steps > 0".into()));
    }
    let batch_size = calibrate_batch_size(cfg)?;
    let total = cfg.warmup + cfg.steps;
    let mut lanes = cfg
        .ks
        .iter()
        .map(|&k| Lane::new(cfg, k, batch_size, total))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..total {
        for lane in &mut lanes {
            for v in 0..VARIANTS.len() {
                let us = lane.step(v, i, cfg.lr)?;
                if i >= cfg.warmup {
                    lane.times[v].push(us);
                }
            }
        }
    }
    let rows: Vec<BenchRow> = lanes
        .into_iter()
        .map(|lane| {
            let [plain, embedding, naive] = lane.times.map(median);
            BenchRow {
                k: lane.k,
                batch_size,
                plain_us: plain,
                embedding_us: embedding,
                naive_us: naive,
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| (r.k as f64).ln()).collect();
    let slope = |f: fn(&BenchRow) -> f64| {
        if rows.len() < 2 {
            f64::NAN
        } else {
            fit_slope(&xs, &rows.iter().map(|r| f(r).ln()).collect::<Vec<_>>())
        }
    };
    Ok(BenchReport {
        plain_slope: slope(|r| r.plain_us),
        embedding_slope: slope(|r| r.embedding_us),
        naive_slope: slope(|r| r.naive_us),
        rows,
    })
}
