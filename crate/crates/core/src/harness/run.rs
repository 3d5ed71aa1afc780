//! The training loop: embedding-space gradients, a method-specific backbone
//! cotangent, and the composite parameter update, with trajectory logging.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::config::{Method, RunConfig};
use crate::baselines::{self, DwaState, GradNormState};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::mlp::{Activation, Mlp};
use crate::model::{CompositeModel, DownstreamGrad, UpdateRates};
use crate::rng::Rng;
use crate::tasks::{self, BatchStream, Dataset};
use crate::tuner::{self, NormalizationMode, WeightVector, EPS_NORM};

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub weights: Vec<f64>,
    /// Pretraining losses on the step's batch, before the update.
    pub losses: Vec<f64>,
    /// Downstream loss on the labeled rows of the batch; NaN without labels.
    pub loss_down_train: f64,
    /// Downstream validation loss and metric after the update.
    pub loss_down_val: f64,
    pub metric_val: f64,
    /// `cos(w^T G~, g~_down)` for the step's weights; NaN without labels.
    pub cosine: f64,
    /// `||w^T G~||` for the step's weights.
    pub comp_norm: f64,
    pub step_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub num_losses: usize,
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn header(k: usize) -> String {
        let mut cols = vec!["step".to_string()];
        cols.extend((1..=k).map(|i| format!("w_{i}")));
        cols.extend((1..=k).map(|i| format!("loss_{i}")));
        cols.extend(
            ["loss_down_train", "loss_down_val", "metric_val", "cosine", "comp_norm", "step_us"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    /// CSV text; floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.num_losses);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.step);
            for v in r.weights.iter().chain(&r.losses) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{}",
                r.loss_down_train, r.loss_down_val, r.metric_val, r.cosine, r.comp_norm, r.step_us
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub steps: usize,
    pub final_loss_down_val: f64,
    pub final_metric_val: f64,
    pub final_weights: Vec<f64>,
    /// Coordinate-wise median of the per-step weights after burn-in.
    pub median_weights: Vec<f64>,
    pub degenerate_steps: usize,
    pub weight_resets: usize,
    /// Steps whose batch had no labeled row.
    pub unlabeled_steps: usize,
}

impl RunSummary {
    pub fn csv_header(k: usize) -> String {
        let mut cols: Vec<String> = [
            "method",
            "seed",
            "labeled_fraction",
            "steps",
            "final_loss_down_val",
            "final_metric_val",
            "degenerate_steps",
            "weight_resets",
            "unlabeled_steps",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((1..=k).map(|i| format!("median_w_{i}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.labeled_fraction,
            self.steps,
            self.final_loss_down_val,
            self.final_metric_val,
            self.degenerate_steps,
            self.weight_resets,
            self.unlabeled_steps
        );
        for v in &self.median_weights {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub model: CompositeModel,
    pub summary: RunSummary,
    /// Weights used at every step, in order.
    pub weight_history: Vec<Vec<f64>>,
    pub config_hash: String,
}

fn head(d: usize, hidden: &[usize], out: usize, act: Activation, rng: &mut Rng) -> Result<Mlp> {
    let sizes: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).chain([out]).collect();
    Mlp::init(&sizes, act, Activation::Identity, rng)
}

/// Freshly initialized model for `cfg`, drawn from the run's `init` stream.
pub fn build_model(cfg: &RunConfig) -> Result<CompositeModel> {
    let mut rng = Rng::new(cfg.seed).substream("init");
    let t = &cfg.task;
    let m = &cfg.model;
    let sizes: Vec<usize> = std::iter::once(t.n_features)
        .chain(m.hidden.iter().copied())
        .chain([t.d])
        .collect();
    let backbone = Mlp::init(&sizes, m.activation, m.embedding_activation, &mut rng)?;
    let heads = (0..t.num_losses())
        .map(|_| head(t.d, &m.head_hidden, t.target_dim, m.activation, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let down = head(t.d, &m.downstream_hidden, t.downstream.head_outputs(), m.activation, &mut rng)?;
    CompositeModel::new(backbone, heads, down, t.loss_kinds(), t.downstream.loss_kind())
}

enum MethodState {
    Fixed(Vec<f64>),
    Grap(WeightVector),
    GradNorm(GradNormState),
    Dwa(DwaState),
    Mgda,
    PcGrad(Box<Rng>),
}

fn diverged(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| {
        if e.is_numerical() {
            Error::Diverged {
                step,
                source: Box::new(e),
            }
        } else {
            e
        }
    }
}

/// Rescales a combined cotangent built from implicit unit weights.
fn normalize_direction(mut c: Vec<f64>, k: usize, mode: NormalizationMode) -> Vec<f64> {
    let s = match mode {
        NormalizationMode::None => 1.0,
        NormalizationMode::WeightSum => k as f64,
        NormalizationMode::WeightNorm => (k as f64).sqrt(),
        NormalizationMode::CompositeGrad => norm(&c),
    };
    if s >= EPS_NORM {
        c.iter_mut().for_each(|v| *v /= s);
    }
    c
}

/// Generates the task and trains on it.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = tasks::generate(&cfg.task)?;
    run_on(cfg, &data)
}

/// Trains a fresh model on an existing dataset.
pub fn run_on(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let k = cfg.task.num_losses();
    let mut model = build_model(cfg)?;
    let root = Rng::new(cfg.seed);
    let mut stream = BatchStream::new(&data.train, cfg.batch_size, root.substream("batches"))?;
    let norm_cfg = cfg.normalization.normalization();
    let mode = norm_cfg.mode;
    let rates = UpdateRates {
        backbone: cfg.lr,
        heads: cfg.lr_heads(),
        downstream: cfg.lr_downstream(),
    };
    let mut state = match &cfg.method {
        Method::Equal => MethodState::Fixed(vec![1.0; k]),
        Method::Fixed(w) => MethodState::Fixed(w.clone()),
        Method::Grap => MethodState::Grap(WeightVector::ones(k, cfg.lr_w(), cfg.normalization.floor)?),
        Method::GradNorm => MethodState::GradNorm(GradNormState::new(k, cfg.baselines.gradnorm_alpha)),
        Method::Dwa => MethodState::Dwa(DwaState::new(k, cfg.baselines.dwa_window, cfg.baselines.dwa_temperature)),
        Method::Mgda => MethodState::Mgda,
        Method::PcGrad => MethodState::PcGrad(Box::new(root.substream("pcgrad"))),
    };

    let mut trajectory = Trajectory {
        num_losses: k,
        rows: Vec::with_capacity(cfg.steps / cfg.eval_every + 1),
    };
    let mut history = Vec::with_capacity(cfg.steps);
    let (mut degenerate_steps, mut resets, mut unlabeled) = (0, 0, 0);

    for step in 1..=cfg.steps {
        let start = cfg.log_timing.then(Instant::now);
        let batch = stream.next().expect("batch stream is endless");
        let eg = model
            .compute_embedding_grads(&batch, DownstreamGrad::IfLabeled)
            .map_err(diverged(step))?;
        let g = &eg.g_tilde;
        let g_down = eg.g_tilde_down.as_deref();
        if g_down.is_none() {
            unlabeled += 1;
        }

        let (weights, cotangent) = match &mut state {
            MethodState::PcGrad(rng) => {
                let c = baselines::pcgrad_combine(g, rng).map_err(diverged(step))?;
                (vec![1.0; k], normalize_direction(c, k, mode))
            }
            other => {
                let w = match other {
                    MethodState::Fixed(w) => w.clone(),
                    MethodState::Grap(wv) => {
                        let w = wv.values().to_vec();
                        if let Some(gd) = g_down {
                            let diag = tuner::weight_step(wv, g, gd, norm_cfg).map_err(diverged(step))?;
                            degenerate_steps += usize::from(diag.degenerate);
                            resets += usize::from(diag.reset);
                        }
                        w
                    }
                    MethodState::GradNorm(gn) => {
                        let w = gn.weights().to_vec();
                        let norms: Vec<f64> = g.row_iter().map(norm).collect();
                        gn.step(&norms, &eg.losses, cfg.lr_w()).map_err(diverged(step))?;
                        w
                    }
                    MethodState::Dwa(dwa) => {
                        let w = dwa.weights();
                        dwa.observe(&eg.losses);
                        w
                    }
                    MethodState::Mgda => baselines::mgda_weights(g).map_err(diverged(step))?,
                    MethodState::PcGrad(_) => unreachable!(),
                };
                let w_bar = match tuner::scale_weights(&w, g, mode) {
                    Ok(v) => v,
                    Err(Error::DegenerateNorm(_)) => w.clone(),
                    Err(e) => return Err(e),
                };
                let c = eg.combine(&w_bar)?;
                (w, c)
            }
        };

        model
            .apply_update_with_cotangent(&eg, &cotangent, rates)
            .map_err(diverged(step))?;
        let step_us = start.map_or(0, |t| t.elapsed().as_micros() as u64);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (loss_down_val, metric_val) = model.evaluate_downstream(&data.val).map_err(diverged(step))?;
            let u = g.matvec_t(&weights)?;
            let comp = if matches!(state, MethodState::PcGrad(_)) {
                normalize_direction(cotangent.clone(), k, NormalizationMode::None)
            } else {
                u
            };
            trajectory.rows.push(TrajectoryRow {
                step,
                weights: weights.clone(),
                losses: eg.losses.clone(),
                loss_down_train: eg.downstream_loss.unwrap_or(f64::NAN),
                loss_down_val,
                metric_val,
                cosine: g_down.map_or(f64::NAN, |gd| cosine(&comp, gd)),
                comp_norm: norm(&comp),
                step_us,
            });
        }
        history.push(weights);
    }

    let last = trajectory.rows.last().expect("at least one logged row");
    let final_weights = match &state {
        MethodState::Grap(wv) => wv.values().to_vec(),
        MethodState::GradNorm(gn) => gn.weights().to_vec(),
        MethodState::Dwa(d) => d.weights(),
        _ => history.last().cloned().unwrap_or_default(),
    };
    let summary = RunSummary {
        method: cfg.method.to_string(),
        seed: cfg.seed,
        labeled_fraction: cfg.task.labeled_fraction,
        steps: cfg.steps,
        final_loss_down_val: last.loss_down_val,
        final_metric_val: last.metric_val,
        final_weights,
        median_weights: baselines::median_weights(&history, cfg.burn_in)?,
        degenerate_steps,
        weight_resets: resets,
        unlabeled_steps: unlabeled,
    };
    Ok(RunOutput {
        trajectory,
        model,
        summary,
        weight_history: history,
        config_hash: cfg.content_hash()?,
    })
}

/// Writes `trajectory.csv`, `summary.csv`, `config.toml` and `model.ckpt`
/// into `dir`.
pub fn write_outputs(cfg: &RunConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.trajectory.write_csv(&dir.join("trajectory.csv"))?;
    let k = cfg.task.num_losses();
    std::fs::write(
        dir.join("summary.csv"),
        format!("{}\n{}\n", RunSummary::csv_header(k), out.summary.csv_row()),
    )?;
    std::fs::write(dir.join("config.toml"), cfg.echo()?)?;
    checkpoint::save(&dir.join("model.ckpt"), &out.model, &out.config_hash)?;
    Ok(())
}

/// Output of the two-phase tuned protocol.
#[derive(Clone, Debug)]
pub struct TunedOutput {
    pub tuning: RunOutput,
    pub retrained: RunOutput,
    pub weights: Vec<f64>,
}

/// Tunes weights online, then retrains from scratch with the median
/// weights of the tuning run held fixed.
pub fn tuned(cfg: &RunConfig) -> Result<TunedOutput> {
    let data = tasks::generate(&cfg.task)?;
    tuned_on(cfg, &data)
}

pub fn tuned_on(cfg: &RunConfig, data: &Dataset) -> Result<TunedOutput> {
    let phase1 = RunConfig {
        method: Method::Grap,
        ..cfg.clone()
    };
    let tuning = run_on(&phase1, data)?;
    let weights = baselines::median_weights(&tuning.weight_history, cfg.burn_in)?;
    let phase2 = RunConfig {
        method: Method::Fixed(weights.clone()),
        ..cfg.clone()
    };
    let retrained = run_on(&phase2, data)?;
    Ok(TunedOutput {
        tuning,
        retrained,
        weights,
    })
}
