//! Deterministic synthetic multi-loss tasks.
//!
//! Inputs are standard normal; a linear latent `s = A x` drives both the
//! downstream label and the targets of the "useful" pretraining losses.
//! Redundant losses are noisy affine copies of another loss's signal, and
//! noise losses are independent of everything else. Every loss draws from
//! its own named random stream, so reordering the loss list permutes the
//! targets and nothing else.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::loss::LossKind;
use crate::model::Batch;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Useful,
    Redundant,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub name: String,
    #[serde(default = "default_loss_kind")]
    pub kind: LossKind,
    pub link: LinkKind,
    /// Loss whose signal a redundant loss copies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

fn default_loss_kind() -> LossKind {
    LossKind::SquaredError
}

impl LossSpec {
    pub fn useful(name: &str) -> Self {
        LossSpec {
            name: name.into(),
            kind: LossKind::SquaredError,
            link: LinkKind::Useful,
            source: None,
        }
    }

    pub fn redundant(name: &str, source: &str) -> Self {
        LossSpec {
            name: name.into(),
            kind: LossKind::SquaredError,
            link: LinkKind::Redundant,
            source: Some(source.into()),
        }
    }

    pub fn noise(name: &str) -> Self {
        LossSpec {
            name: name.into(),
            kind: LossKind::SquaredError,
            link: LinkKind::Noise,
            source: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamKind {
    BinaryClassification,
    Regression,
}

impl DownstreamKind {
    pub fn loss_kind(self) -> LossKind {
        match self {
            DownstreamKind::BinaryClassification => LossKind::CrossEntropy,
            DownstreamKind::Regression => LossKind::SquaredError,
        }
    }

    pub fn head_outputs(self) -> usize {
        match self {
            DownstreamKind::BinaryClassification => 2,
            DownstreamKind::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_features: usize,
    /// Embedding width of the backbone trained on this task.
    pub d: usize,
    pub latent_dim: usize,
    /// Output width of every pretraining head (number of classes for a
    /// cross-entropy loss).
    pub target_dim: usize,
    pub losses: Vec<LossSpec>,
    pub downstream: DownstreamKind,
    pub labeled_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Std of the observation noise added to useful-loss signals.
    pub target_noise: f64,
    /// Std of the noise added to redundant copies.
    pub redundant_noise: f64,
    /// Scale of the logistic link (classification) or inverse noise std
    /// (regression).
    pub label_sharpness: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_features: 20,
            d: 16,
            latent_dim: 4,
            target_dim: 4,
            losses: default_losses(),
            downstream: DownstreamKind::BinaryClassification,
            labeled_fraction: 0.2,
            n_train: 4096,
            n_val: 1024,
            target_noise: 0.1,
            redundant_noise: 0.05,
            label_sharpness: 8.0,
            seed: 0,
        }
    }
}

/// Three useful losses, two redundant copies and one pure-noise loss.
pub fn default_losses() -> Vec<LossSpec> {
    vec![
        LossSpec::useful("useful_0"),
        LossSpec::useful("useful_1"),
        LossSpec::useful("useful_2"),
        LossSpec::redundant("redundant_0", "useful_0"),
        LossSpec::redundant("redundant_1", "useful_1"),
        LossSpec::noise("noise_0"),
    ]
}

/// `k` losses cycling through useful, useful, redundant, noise.
pub fn mixed_losses(k: usize) -> Vec<LossSpec> {
    (0..k)
        .map(|i| match i % 4 {
            0 | 1 => LossSpec::useful(&format!("useful_{i}")),
            2 => LossSpec::redundant(&format!("redundant_{i}"), &format!("useful_{}", i - 2)),
            _ => LossSpec::noise(&format!("noise_{i}")),
        })
        .collect()
}

impl TaskSpec {
    pub fn num_losses(&self) -> usize {
        self.losses.len()
    }

    pub fn loss_kinds(&self) -> Vec<LossKind> {
        self.losses.iter().map(|l| l.kind).collect()
    }

    pub fn indices_of(&self, link: LinkKind) -> Vec<usize> {
        (0..self.losses.len()).filter(|&i| self.losses[i].link == link).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_features == 0 || self.d == 0 || self.latent_dim == 0 || self.target_dim == 0 {
            return bad("task dimensions must be positive".into());
        }
        if self.n_train == 0 || self.n_val == 0 {
            return bad("task needs non-empty train and validation splits".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("labeled_fraction {} outside (0, 1]", self.labeled_fraction));
        }
        for (name, v) in [
            ("target_noise", self.target_noise),
            ("redundant_noise", self.redundant_noise),
            ("label_sharpness", self.label_sharpness),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v}"));
            }
        }
        if self.losses.iter().all(|l| l.link != LinkKind::Useful) {
            return bad("task needs at least one useful loss".into());
        }
        let mut names = HashSet::new();
        for l in &self.losses {
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate loss name {}", l.name));
            }
            if l.kind == LossKind::CrossEntropy && self.target_dim < 2 {
                return bad(format!("cross-entropy loss {} needs target_dim >= 2", l.name));
            }
        }
        for l in &self.losses {
            match (l.link, &l.source) {
                (LinkKind::Redundant, Some(src)) => {
                    let ok = self
                        .losses
                        .iter()
                        .any(|s| &s.name == src && s.link == LinkKind::Useful);
                    if !ok {
                        return bad(format!("redundant loss {} copies unknown useful loss {src}", l.name));
                    }
                }
                (LinkKind::Redundant, None) => return bad(format!("redundant loss {} has no source", l.name)),
                (_, Some(_)) => return bad(format!("only redundant losses take a source ({})", l.name)),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Train/validation splits plus the generative ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Batch,
    pub val: Batch,
    pub latent_train: Mat,
    pub latent_val: Mat,
    /// Unit direction in latent space that drives the downstream label.
    pub downstream_direction: Vec<f64>,
}

struct Generator {
    latent_map: Mat,
    direction: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
}

impl Generator {
    fn new(spec: &TaskSpec, root: &Rng) -> Self {
        let mut rng = root.substream("latent_map");
        let latent_map = Mat::random_normal(
            spec.latent_dim,
            spec.n_features,
            (1.0 / spec.n_features as f64).sqrt(),
            &mut rng,
        );
        let mut rng = root.substream("downstream_direction");
        let mut direction: Vec<f64> = (0..spec.latent_dim).map(|_| rng.normal()).collect();
        let n = crate::linalg::norm(&direction).max(f64::MIN_POSITIVE);
        direction.iter_mut().for_each(|v| *v /= n);
        Generator { latent_map, direction }
    }

    fn split(&self, spec: &TaskSpec, root: &Rng, split: &str, n: usize) -> Result<(Batch, Mat)> {
        let mut rng = root.substream(&format!("inputs/{split}"));
        let inputs = Mat::random_normal(n, spec.n_features, 1.0, &mut rng);
        let latent = inputs.matmul_nt(&self.latent_map)?;

        // per-loss continuous signals, generated useful-first so that
        // redundant losses can copy their source
        let mut signals: Vec<Option<Mat>> = vec![None; spec.losses.len()];
        let order = spec
            .losses
            .iter()
            .enumerate()
            .filter(|(_, l)| l.link != LinkKind::Redundant)
            .chain(spec.losses.iter().enumerate().filter(|(_, l)| l.link == LinkKind::Redundant));
        for (k, l) in order {
            let stream = root.substream(&format!("loss/{}", l.name));
            let mut noise = stream.substream(&format!("noise/{split}"));
            let sig = match l.link {
                LinkKind::Useful => {
                    let mut prng = stream.substream("projection");
                    let proj = Mat::random_normal(
                        spec.target_dim,
                        spec.latent_dim,
                        (1.0 / spec.latent_dim as f64).sqrt(),
                        &mut prng,
                    );
                    let mut s = latent.matmul_nt(&proj)?;
                    for v in s.as_mut_slice() {
                        *v = (1.5 * *v).tanh() + spec.target_noise * noise.normal();
                    }
                    s
                }
                LinkKind::Redundant => {
                    let src_name = l.source.as_deref().unwrap_or_default();
                    let src = spec
                        .losses
                        .iter()
                        .position(|s| s.name == src_name)
                        .and_then(|i| signals[i].as_ref())
                        .ok_or_else(|| Error::InvalidArgument(format!("missing source {src_name}")))?;
                    let mut arng = stream.substream("affine");
                    let scale = arng.uniform_in(0.5, 1.5);
                    let shift: Vec<f64> = (0..spec.target_dim).map(|_| 0.5 * arng.normal()).collect();
                    let mut s = src.clone();
                    for r in 0..s.rows() {
                        for (v, b) in s.row_mut(r).iter_mut().zip(&shift) {
                            *v = scale * *v + b + spec.redundant_noise * noise.normal();
                        }
                    }
                    s
                }
                LinkKind::Noise => Mat::random_normal(n, spec.target_dim, 1.0, &mut noise),
            };
            signals[k] = Some(sig);
        }
        let targets = spec
            .losses
            .iter()
            .zip(signals)
            .map(|(l, s)| {
                let s = s.expect("every loss generated");
                match l.kind {
                    LossKind::SquaredError => s,
                    LossKind::CrossEntropy => Mat::from_fn(n, 1, |r, _| argmax(s.row(r)) as f64),
                }
            })
            .collect();

        let mut lrng = root.substream(&format!("labels/{split}"));
        let downstream = Mat::from_fn(n, 1, |r, _| {
            let score: f64 = crate::linalg::dot(latent.row(r), &self.direction);
            match spec.downstream {
                DownstreamKind::BinaryClassification => {
                    let p = 1.0 / (1.0 + (-spec.label_sharpness * score).exp());
                    if lrng.uniform() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
                DownstreamKind::Regression => {
                    score + lrng.normal() / spec.label_sharpness.max(f64::MIN_POSITIVE)
                }
            }
        });
        let batch = Batch::new(inputs, targets, downstream, vec![true; n])?;
        Ok((batch, latent))
    }
}

/// Generates the dataset for `spec`; identical specs give bit-identical data.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed).substream("task");
    let generator = Generator::new(spec, &root);
    let (mut train, latent_train) = generator.split(spec, &root, "train", spec.n_train)?;
    let (val, latent_val) = generator.split(spec, &root, "val", spec.n_val)?;

    let n_labeled = ((spec.labeled_fraction * spec.n_train as f64).ceil() as usize).clamp(1, spec.n_train);
    let mut idx: Vec<usize> = (0..spec.n_train).collect();
    root.substream("labeled_subset").shuffle(&mut idx);
    train.labeled_mask = vec![false; spec.n_train];
    for &i in &idx[..n_labeled] {
        train.labeled_mask[i] = true;
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        latent_train,
        latent_val,
        downstream_direction: generator.direction,
    })
}

/// Endless stream of shuffled minibatches; each epoch is a fresh
/// Fisher-Yates permutation. A batch size covering the whole split yields
/// the split itself, unshuffled.
pub struct BatchStream<'a> {
    data: &'a Batch,
    batch_size: usize,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Batch, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 || data.is_empty() {
            return Err(Error::InvalidArgument("batch size and split must be non-empty".into()));
        }
        Ok(BatchStream {
            data,
            batch_size,
            rng,
            order: (0..data.len()).collect(),
            pos: data.len(),
            epoch: 0,
        })
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch_size >= self.data.len()
    }

    /// Completed epochs (a partially consumed epoch counts once started).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Index order of the current epoch.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.is_full_batch() {
            self.epoch += 1;
            return Some(self.data.clone());
        }
        if self.pos >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// The minibatches of one epoch.
pub fn batches(data: &Batch, batch_size: usize, rng: Rng) -> Result<Vec<Batch>> {
    let stream = BatchStream::new(data, batch_size, rng)?;
    let n = if stream.is_full_batch() {
        1
    } else {
        data.len().div_ceil(batch_size)
    };
    Ok(stream.take(n).collect())
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes both splits as CSV with columns
/// `split,x_0..,t{k}_{j}..,y,labeled`; floats carry 17 significant digits.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let train = &dataset.train;
    let mut header = vec!["split".to_string()];
    header.extend((0..train.inputs.cols()).map(|i| format!("x_{i}")));
    for (k, t) in train.targets.iter().enumerate() {
        header.extend((0..t.cols()).map(|j| format!("t{k}_{j}")));
    }
    header.push("y".into());
    header.push("labeled".into());
    w.write_record(&header)?;
    for (name, b) in [("train", &dataset.train), ("val", &dataset.val)] {
        for r in 0..b.len() {
            let mut rec = vec![name.to_string()];
            rec.extend(b.inputs.row(r).iter().map(|v| fmt17(*v)));
            for t in &b.targets {
                rec.extend(t.row(r).iter().map(|v| fmt17(*v)));
            }
            rec.push(fmt17(b.downstream[(r, 0)]));
            rec.push(if b.labeled_mask[r] { "1" } else { "0" }.into());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_dataset_csv`] back into `(train, val)`.
pub fn read_dataset_csv(path: &Path) -> Result<(Batch, Batch)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let parse_err = |m: String| Error::InvalidArgument(format!("dataset CSV: {m}"));
    let n_features = header.iter().filter(|h| h.starts_with("x_")).count();
    let mut widths: Vec<usize> = Vec::new();
    for h in header.iter().filter(|h| h.starts_with('t')) {
        let (k, _) = h[1..]
            .split_once('_')
            .ok_or_else(|| parse_err(format!("bad column {h}")))?;
        let k: usize = k.parse().map_err(|_| parse_err(format!("bad column {h}")))?;
        if k >= widths.len() {
            widths.resize(k + 1, 0);
        }
        widths[k] += 1;
    }
    let expected = 1 + n_features + widths.iter().sum::<usize>() + 2;
    if header.len() != expected || header.get(0) != Some("split") {
        return Err(parse_err("unexpected header".into()));
    }

    #[derive(Default)]
    struct Cols {
        x: Vec<f64>,
        t: Vec<Vec<f64>>,
        y: Vec<f64>,
        mask: Vec<bool>,
    }
    let mut splits = [Cols::default(), Cols::default()];
    for s in &mut splits {
        s.t = vec![Vec::new(); widths.len()];
    }
    for rec in r.records() {
        let rec = rec?;
        let s = match rec.get(0) {
            Some("train") => &mut splits[0],
            Some("val") => &mut splits[1],
            other => return Err(parse_err(format!("unknown split {other:?}"))),
        };
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| parse_err(format!("bad number in column {i}")))
        };
        let mut at = 1;
        for _ in 0..n_features {
            s.x.push(num(at)?);
            at += 1;
        }
        for (k, w) in widths.iter().enumerate() {
            for _ in 0..*w {
                s.t[k].push(num(at)?);
                at += 1;
            }
        }
        s.y.push(num(at)?);
        s.mask.push(rec.get(at + 1) == Some("1"));
    }
    let build = |c: Cols| -> Result<Batch> {
        let n = c.y.len();
        let targets = c
            .t
            .into_iter()
            .zip(&widths)
            .map(|(v, w)| Mat::from_vec(n, *w, v))
            .collect::<Result<Vec<_>>>()?;
        Batch::new(Mat::from_vec(n, n_features, c.x)?, targets, Mat::from_vec(n, 1, c.y)?, c.mask)
    };
    let [train, val] = splits;
    Ok((build(train)?, build(val)?))
}
