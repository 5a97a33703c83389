//! Desk-scale experiments: synthetic segmentation data, exhaustive bias
//! sweeps of a thresholding classifier, class-cycling sampling, a per-pixel
//! linear classifier trainer, and probes contrasting image- and
//! dataset-level IoU.
//!
//! Everything is a pure function of its inputs and seed. Per-image random
//! streams are derived from `(seed, image index)`, so parallel generation
//! gives the same bytes as sequential generation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::jaccard::{self, ClassMode};
use crate::metrics::{self, ConfusionAccumulator, IoUReport};
use crate::optim::{prox_hinge_direction, Momentum, PolySchedule, ProxConfig};

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One image: per-pixel class labels and a `pixels × channels` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub features: Array2<f64>,
}

impl Image {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub num_classes: usize,
}

impl Dataset {
    /// Training and validation indices; the last 20% (at least one image)
    /// are held out.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.images.len();
        let n_val = ((n as f64 * 0.2).round() as usize).clamp(1, n);
        ((0..n - n_val).collect(), (n - n_val..n).collect())
    }

    pub fn total_pixels(&self) -> usize {
        self.images.iter().map(Image::pixels).sum()
    }
}

/// Labels `0 / 1` mapped to `-1 / +1`.
pub fn binary_labels(labels: &[usize]) -> Vec<i8> {
    labels.iter().map(|&l| if l == 1 { 1 } else { -1 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Feature mean is `+gap` on the foreground and `-gap` on the background.
    pub feature_mean_gap: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub bias_grid: Vec<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 10,
            height: 50,
            width: 50,
            feature_mean_gap: 0.5,
            noise_std: 1.0,
            seed: 0,
            bias_grid: bias_grid(-3.0, 3.0, 0.01),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidInput("image count and size must be positive".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        validate_grid(&self.bias_grid)
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("bias grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("bias grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `lo, lo + step, ..` up to `hi` inclusive, computed as `lo + k·step` so the
/// points do not drift.
pub fn bias_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && hi >= lo, "invalid grid [{lo}, {hi}] step {step}");
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

/// Filled disks on a background. Radius is uniform in `[0.1, 0.4]·min(h, w)`
/// and the centre uniform over the image; one feature per pixel,
/// `±gap + noise_std · N(0, 1)`.
pub fn generate_circles(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let images = (0..cfg.n_images)
        .into_par_iter()
        .map(|idx| {
            let mut rng = image_rng(cfg.seed, idx);
            let (h, w) = (cfg.height, cfg.width);
            let radius = rng.random_range(0.1..=0.4) * h.min(w) as f64;
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let mut labels = Vec::with_capacity(h * w);
            let mut features = Array2::zeros((h * w, 1));
            for row in 0..h {
                for col in 0..w {
                    let dx = col as f64 + 0.5 - cx;
                    let dy = row as f64 + 0.5 - cy;
                    let fg = dx * dx + dy * dy <= radius * radius;
                    let noise: f64 = rng.sample(StandardNormal);
                    let mean = if fg { cfg.feature_mean_gap } else { -cfg.feature_mean_gap };
                    features[[labels.len(), 0]] = mean + cfg.noise_std * noise;
                    labels.push(fg as usize);
                }
            }
            Image {
                height: h,
                width: w,
                labels,
                features,
            }
        })
        .collect();
    Ok(Dataset {
        images,
        num_classes: 2,
    })
}

/// Three-class data: background (0), a common disk class (1) in every image
/// and a small rare disk class (2) in a fraction of the images. Features are
/// one channel per class, `gap` on the pixel's class channel plus noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub feature_mean_gap: f64,
    pub noise_std: f64,
    /// Probability that an image contains the rare class.
    pub rare_rate: f64,
    pub seed: u64,
}

impl Default for MulticlassConfig {
    fn default() -> Self {
        Self {
            n_images: 20,
            height: 32,
            width: 32,
            feature_mean_gap: 1.0,
            noise_std: 1.0,
            rare_rate: 0.3,
            seed: 0,
        }
    }
}

pub fn generate_multiclass(cfg: &MulticlassConfig) -> Result<Dataset> {
    if cfg.n_images == 0 || cfg.height == 0 || cfg.width == 0 || !(cfg.noise_std > 0.0) {
        return Err(Error::InvalidInput("invalid multiclass config".into()));
    }
    let images = (0..cfg.n_images)
        .into_par_iter()
        .map(|idx| {
            let mut rng = image_rng(cfg.seed, idx);
            let (h, w) = (cfg.height, cfg.width);
            let side = h.min(w) as f64;
            let big_r = rng.random_range(0.2..=0.4) * side;
            let big_c = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            // index 0 forces the rare class to appear at least once in the dataset
            let has_rare = idx == 0 || rng.random::<f64>() < cfg.rare_rate;
            let small_r = rng.random_range(0.05..=0.12) * side;
            let small_c = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let mut labels = Vec::with_capacity(h * w);
            let mut features = Array2::zeros((h * w, 3));
            for row in 0..h {
                for col in 0..w {
                    let inside = |c: (f64, f64), r: f64| {
                        let dx = col as f64 + 0.5 - c.0;
                        let dy = row as f64 + 0.5 - c.1;
                        dx * dx + dy * dy <= r * r
                    };
                    let label = if has_rare && inside(small_c, small_r) {
                        2
                    } else if inside(big_c, big_r) {
                        1
                    } else {
                        0
                    };
                    let i = labels.len();
                    for ch in 0..3 {
                        let noise: f64 = rng.sample(StandardNormal);
                        let mean = if ch == label { cfg.feature_mean_gap } else { 0.0 };
                        features[[i, ch]] = mean + cfg.noise_std * noise;
                    }
                    labels.push(label);
                }
            }
            Image {
                height: h,
                width: w,
                labels,
                features,
            }
        })
        .collect();
    Ok(Dataset {
        images,
        num_classes: 3,
    })
}

/// Losses evaluated by [`bias_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SweepLoss {
    CrossEntropy,
    Hinge,
    LovaszHinge,
    RahmanWang,
    /// Discrete Jaccard loss of the thresholded labeling.
    Jaccard,
}

impl SweepLoss {
    pub const ALL: [SweepLoss; 5] = [
        SweepLoss::CrossEntropy,
        SweepLoss::Hinge,
        SweepLoss::LovaszHinge,
        SweepLoss::RahmanWang,
        SweepLoss::Jaccard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossEntropy => "cross_entropy",
            Self::Hinge => "hinge",
            Self::LovaszHinge => "lovasz_hinge",
            Self::RahmanWang => "rahman_wang",
            Self::Jaccard => "jaccard",
        }
    }
}

impl fmt::Display for SweepLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown sweep loss {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub loss: SweepLoss,
    pub bias: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn column(&self, loss: SweepLoss) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.loss == loss)
            .map(|r| (r.bias, r.value))
            .collect()
    }

    /// Bias minimizing `loss`; the smallest such bias on ties.
    pub fn argmin(&self, loss: SweepLoss) -> Option<f64> {
        self.column(loss)
            .into_iter()
            .fold(None, |best: Option<(f64, f64)>, (b, v)| match best {
                Some((_, bv)) if bv <= v => best,
                _ => Some((b, v)),
            })
            .map(|(b, _)| b)
    }

    /// `loss,bias,value` rows; values use the shortest round-tripping form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["loss", "bias", "value"])?;
        for r in &self.rows {
            w.write_record([r.loss.name().to_string(), r.bias.to_string(), r.value.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()? != vec!["loss", "bias", "value"] {
            return Err(Error::Format("expected header loss,bias,value".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number in {rec:?}")))
            };
            rows.push(SweepRow {
                loss: rec.get(0).unwrap_or("").parse()?,
                bias: num(1)?,
                value: num(2)?,
            });
        }
        Ok(Self { rows })
    }
}

/// Evaluates every loss of the classifier `F_i = f_i + b` (first feature
/// channel) for each bias in `grid`, with the pixels of all images pooled
/// into one ground set. The Jaccard column scores the labeling `F_i > 0`
/// against the foreground class.
pub fn bias_sweep(data: &Dataset, losses: &[SweepLoss], grid: &[f64]) -> Result<SweepTable> {
    validate_grid(grid)?;
    if data.num_classes != 2 {
        return Err(Error::InvalidInput("bias sweep needs binary data".into()));
    }
    if data.images.is_empty() {
        return Err(Error::InvalidInput("bias sweep needs at least one image".into()));
    }
    let features: Vec<f64> = data
        .images
        .iter()
        .flat_map(|img| img.features.column(0).to_vec())
        .collect();
    let labels: Vec<i8> = data
        .images
        .iter()
        .flat_map(|img| binary_labels(&img.labels))
        .collect();

    let per_bias: Vec<Vec<SweepRow>> = grid
        .par_iter()
        .map(|&bias| {
            let scores: Vec<f64> = features.iter().map(|f| f + bias).collect();
            losses
                .iter()
                .map(|&loss| {
                    Ok(SweepRow {
                        loss,
                        bias,
                        value: sweep_value(loss, &scores, &labels)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(grid.len() * losses.len());
    for &loss in losses {
        for chunk in &per_bias {
            rows.extend(chunk.iter().filter(|r| r.loss == loss).cloned());
        }
    }
    Ok(SweepTable { rows })
}

fn sweep_value(loss: SweepLoss, scores: &[f64], labels: &[i8]) -> Result<f64> {
    Ok(match loss {
        SweepLoss::CrossEntropy => jaccard::binary_cross_entropy(scores, labels)?.value,
        SweepLoss::Hinge => jaccard::hinge(scores, labels)?.value,
        SweepLoss::LovaszHinge => jaccard::lovasz_hinge(scores, labels)?.value,
        SweepLoss::RahmanWang => jaccard::rahman_wang_from_scores(scores, labels)?.value,
        SweepLoss::Jaccard => {
            let gt: Vec<usize> = labels.iter().map(|&y| (y == 1) as usize).collect();
            let pred: Vec<usize> = scores.iter().map(|&s| (s > 0.0) as usize).collect();
            1.0 - metrics::jaccard_index(&gt, &pred, 1)?
        }
    })
}

/// Endless class-cycling sampler. Classes are visited in a fixed
/// seed-dependent order, so any `|C|` consecutive draws cover every class;
/// samples within a class are drawn without replacement, reshuffling when a
/// class's pool is exhausted.
#[derive(Debug, Clone)]
pub struct Equibatch {
    cycle: Vec<usize>,
    pools: BTreeMap<usize, Vec<usize>>,
    cursors: BTreeMap<usize, usize>,
    position: usize,
    rng: ChaCha8Rng,
}

impl Equibatch {
    pub fn new(class_index: &BTreeMap<usize, Vec<usize>>, seed: u64) -> Result<Self> {
        if class_index.is_empty() {
            return Err(Error::InvalidInput("equibatch needs at least one class".into()));
        }
        if let Some((c, _)) = class_index.iter().find(|(_, ids)| ids.is_empty()) {
            return Err(Error::InvalidInput(format!("class {c} has no samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cycle: Vec<usize> = class_index.keys().copied().collect();
        cycle.shuffle(&mut rng);
        let mut pools = class_index.clone();
        for pool in pools.values_mut() {
            pool.shuffle(&mut rng);
        }
        let cursors = pools.keys().map(|&c| (c, 0)).collect();
        Ok(Self {
            cycle,
            pools,
            cursors,
            position: 0,
            rng,
        })
    }

    pub fn class_cycle(&self) -> &[usize] {
        &self.cycle
    }
}

impl Iterator for Equibatch {
    /// `(class drawn for, sample id)`
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let class = self.cycle[self.position % self.cycle.len()];
        self.position += 1;
        let pool = self.pools.get_mut(&class)?;
        let cursor = self.cursors.get_mut(&class)?;
        if *cursor == pool.len() {
            pool.shuffle(&mut self.rng);
            *cursor = 0;
        }
        let id = pool[*cursor];
        *cursor += 1;
        Some((class, id))
    }
}

/// Image indices containing each class.
pub fn class_index(data: &Dataset, images: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in images {
        let mut seen = vec![false; data.num_classes];
        for &l in &data.images[i].labels {
            seen[l] = true;
        }
        for (c, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
            index.entry(c).or_default().push(i);
        }
    }
    index
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    CrossEntropy,
    Hinge,
    LovaszHinge,
    LovaszSoftmaxAll,
    LovaszSoftmaxPresent,
    RahmanWang,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::CrossEntropy,
        LossKind::Hinge,
        LossKind::LovaszHinge,
        LossKind::LovaszSoftmaxAll,
        LossKind::LovaszSoftmaxPresent,
        LossKind::RahmanWang,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossEntropy => "cross_entropy",
            Self::Hinge => "hinge",
            Self::LovaszHinge => "lovasz_hinge",
            Self::LovaszSoftmaxAll => "lovasz_softmax_all",
            Self::LovaszSoftmaxPresent => "lovasz_softmax_present",
            Self::RahmanWang => "rahman_wang",
        }
    }

    fn multiclass_head(self, num_classes: usize) -> bool {
        match self {
            Self::LovaszSoftmaxAll | Self::LovaszSoftmaxPresent => true,
            Self::CrossEntropy => num_classes > 2,
            _ => false,
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    /// Proximal loss-layer direction (Lovász hinge only), no momentum.
    Prox,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "prox" => Ok(Self::Prox),
            _ => Err(Error::InvalidInput(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    /// Images per minibatch; losses are computed on the pooled pixels.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_base: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub prox_lambda: f64,
    pub equibatch: bool,
    /// Keep the binary model's weights at 1 and learn only the bias, i.e.
    /// the thresholding classifier `f + b` of the bias sweep.
    pub bias_only: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::LovaszHinge,
            optimizer: OptimizerKind::Momentum,
            batch_size: 1,
            epochs: 30,
            lr_base: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            prox_lambda: 10.0,
            equibatch: false,
            bias_only: false,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::InvalidInput(
                "batch_size, epochs and eval_every must be at least 1".into(),
            ));
        }
        if self.optimizer == OptimizerKind::Prox && self.loss != LossKind::LovaszHinge {
            return Err(Error::InvalidInput(
                "the prox optimizer is only defined for the Lovász hinge".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel linear classifier. A binary model has one output score
/// (foreground iff positive); a multiclass model one score per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `outputs × channels`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearModel {
    pub fn scores(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, features: &Array2<f64>) -> Vec<usize> {
        let scores = self.scores(features);
        if self.weights.nrows() == 1 {
            scores.column(0).iter().map(|&s| (s > 0.0) as usize).collect()
        } else {
            scores
                .axis_iter(Axis(0))
                .map(|row| {
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect()
        }
    }

    fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(self.bias.iter()).copied().collect()
    }

    fn apply(&mut self, delta: &[f64]) {
        let nw = self.weights.len();
        for (w, d) in self.weights.iter_mut().zip(&delta[..nw]) {
            *w += d;
        }
        for (b, d) in self.bias.iter_mut().zip(&delta[nw..]) {
            *b += d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub loss: f64,
    pub image_miou: f64,
    pub dataset_miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<StepRecord>,
    pub final_report: IoUReport,
    pub model: LinearModel,
}

impl ExperimentResult {
    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("at least one record")
    }

    /// `step,loss,image_miou,dataset_miou` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_records(&self.records, out)
    }
}

pub fn write_records<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "image_miou", "dataset_miou"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.image_miou.to_string(),
            r.dataset_miou.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()? != vec!["step", "loss", "image_miou", "dataset_miou"] {
        return Err(Error::Format("expected header step,loss,image_miou,dataset_miou".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let bad = || Error::Format(format!("bad record {rec:?}"));
            let num = |k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
            Ok(StepRecord {
                step: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                loss: num(1)?,
                image_miou: num(2)?,
                dataset_miou: num(3)?,
            })
        })
        .collect()
}

/// Classes scored during evaluation: the foreground for a binary model,
/// every class otherwise.
fn eval_classes(model: &LinearModel, num_classes: usize) -> Vec<usize> {
    if model.weights.nrows() == 1 {
        vec![1]
    } else {
        (0..num_classes).collect()
    }
}

/// Image-mIoU, per-class dataset report and dataset-mIoU of `model` on `images`.
pub fn evaluate(model: &LinearModel, data: &Dataset, images: &[usize]) -> Result<(f64, IoUReport)> {
    let classes = eval_classes(model, data.num_classes);
    let preds: Vec<Vec<usize>> = images
        .par_iter()
        .map(|&i| model.predict(&data.images[i].features))
        .collect();
    let gts: Vec<&[usize]> = images.iter().map(|&i| data.images[i].labels.as_slice()).collect();
    let image = metrics::image_miou(&gts, &preds, &classes)?;
    let mut acc = ConfusionAccumulator::new(data.num_classes);
    for (gt, pred) in gts.iter().zip(&preds) {
        acc.accumulate(gt, pred)?;
    }
    Ok((image, metrics::dataset_miou_over(&acc, &classes)))
}

fn batch_loss(
    model: &LinearModel,
    cfg: &TrainConfig,
    prox: &ProxConfig,
    features: &Array2<f64>,
    labels: &[usize],
    step: usize,
) -> Result<(f64, Array2<f64>)> {
    let scores = model.scores(features);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Diverged { step });
    }
    if model.weights.nrows() == 1 {
        let s: Vec<f64> = scores.column(0).to_vec();
        let y = binary_labels(labels);
        let out = match (cfg.loss, cfg.optimizer) {
            (LossKind::LovaszHinge, OptimizerKind::Prox) => prox_hinge_direction(&s, &y, prox)?,
            (LossKind::LovaszHinge, _) => jaccard::lovasz_hinge(&s, &y)?,
            (LossKind::Hinge, _) => jaccard::hinge(&s, &y)?,
            (LossKind::CrossEntropy, _) => jaccard::binary_cross_entropy(&s, &y)?,
            (LossKind::RahmanWang, _) => jaccard::rahman_wang_from_scores(&s, &y)?,
            (kind, _) => unreachable!("{kind:?} uses a multiclass head"),
        };
        let grad = Array2::from_shape_vec((s.len(), 1), out.grad).expect("shape matches");
        Ok((out.value, grad))
    } else {
        let out = match cfg.loss {
            LossKind::LovaszSoftmaxAll => jaccard::lovasz_softmax(scores.view(), labels, ClassMode::All)?,
            LossKind::LovaszSoftmaxPresent => {
                jaccard::lovasz_softmax(scores.view(), labels, ClassMode::Present)?
            }
            LossKind::CrossEntropy => jaccard::cross_entropy(scores.view(), labels)?,
            kind => {
                return Err(Error::InvalidInput(format!(
                    "{} needs binary data",
                    kind.name()
                )))
            }
        };
        Ok((out.value, out.grad))
    }
}

/// Trains a [`LinearModel`] on the training split with minibatch
/// first-order updates and a poly learning-rate schedule, evaluating on the
/// validation split every `eval_every` steps and at the end.
pub fn train_linear(data: &Dataset, cfg: &TrainConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (train, val) = data.split();
    if train.is_empty() {
        return Err(Error::InvalidInput("need at least two images to train".into()));
    }
    let channels = data.images[0].features.ncols();
    let outputs = if cfg.loss.multiclass_head(data.num_classes) {
        data.num_classes
    } else {
        1
    };
    if cfg.bias_only && outputs != 1 {
        return Err(Error::InvalidInput("bias_only needs a binary model".into()));
    }
    if outputs == 1 && data.num_classes != 2 {
        return Err(Error::InvalidInput(format!(
            "{} needs binary data",
            cfg.loss.name()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = LinearModel {
        weights: Array2::from_shape_fn((outputs, channels), |_| {
            if cfg.bias_only {
                1.0
            } else {
                0.01 * rng.sample::<f64, _>(StandardNormal)
            }
        }),
        bias: Array1::zeros(outputs),
    };

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let schedule = PolySchedule::new(cfg.lr_base, total_steps, cfg.lr_power)?;
    let alpha = match cfg.optimizer {
        OptimizerKind::Momentum => cfg.momentum,
        _ => 0.0,
    };
    let mut momentum = Momentum::new(model.params().len(), alpha);
    let prox = ProxConfig::new(cfg.prox_lambda)?;

    let mut sampler = if cfg.equibatch {
        Some(Equibatch::new(&class_index(data, &train), cfg.seed)?)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order: Vec<usize> = match sampler.as_mut() {
            Some(s) => s.by_ref().take(train.len()).map(|(_, id)| id).collect(),
            None => {
                let mut o = train.clone();
                o.shuffle(&mut rng);
                o
            }
        };
        for batch in order.chunks(cfg.batch_size) {
            let pixels: usize = batch.iter().map(|&i| data.images[i].pixels()).sum();
            let mut features = Array2::zeros((pixels, channels));
            let mut labels = Vec::with_capacity(pixels);
            let mut row = 0;
            for &i in batch {
                let img = &data.images[i];
                features
                    .slice_mut(ndarray::s![row..row + img.pixels(), ..])
                    .assign(&img.features);
                labels.extend_from_slice(&img.labels);
                row += img.pixels();
            }

            let (value, d_scores) = batch_loss(&model, cfg, &prox, &features, &labels, step)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            let mut d_weights = d_scores.t().dot(&features);
            if cfg.bias_only {
                d_weights.fill(0.0);
            }
            let d_bias = d_scores.sum_axis(Axis(0));
            let grad: Vec<f64> = d_weights.iter().chain(d_bias.iter()).copied().collect();
            let delta = momentum.step(&grad, schedule.lr(step)?)?;
            model.apply(&delta);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { step });
            }

            step += 1;
            loss_sum += value;
            loss_count += 1;
            if step % cfg.eval_every == 0 || step == total_steps {
                let (image_miou, report) = evaluate(&model, data, &val)?;
                records.push(StepRecord {
                    step,
                    loss: loss_sum / loss_count as f64,
                    image_miou,
                    dataset_miou: report.mean_iou,
                });
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
    }

    let (_, final_report) = evaluate(&model, data, &val)?;
    Ok(ExperimentResult {
        records,
        final_report,
        model,
    })
}

/// Effect of relabeling a few pixels of one image to a class that image's
/// ground truth does not contain.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub class: usize,
    pub image_iou_before: f64,
    pub image_iou_after: f64,
    /// Pooled `(intersection, union)` for the class over the whole dataset.
    pub dataset_counts_before: (u64, u64),
    pub dataset_counts_after: (u64, u64),
    pub total_pixels: u64,
}

impl ProbeReport {
    pub fn image_delta(&self) -> f64 {
        self.image_iou_after - self.image_iou_before
    }

    fn iou((i, u): (u64, u64)) -> f64 {
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    pub fn dataset_delta(&self) -> f64 {
        Self::iou(self.dataset_counts_after) - Self::iou(self.dataset_counts_before)
    }

    /// Exact check of `|Δ dataset IoU| ≤ num / (den · total_pixels)` in
    /// integer arithmetic.
    pub fn dataset_delta_within(&self, num: u64, den: u64) -> bool {
        let as_frac = |(i, u): (u64, u64)| if u == 0 { (1u128, 1u128) } else { (i as u128, u as u128) };
        let (i0, u0) = as_frac(self.dataset_counts_before);
        let (i1, u1) = as_frac(self.dataset_counts_after);
        let diff = (i1 * u0).abs_diff(i0 * u1);
        diff * den as u128 * self.total_pixels as u128 <= num as u128 * u0 * u1
    }
}

/// Flips `pixels` of image `image` to `class` in a copy of `pred_base` and
/// reports the class's image IoU and pooled dataset IoU before and after.
/// The class must be absent from that image's ground truth.
pub fn absent_class_probe(
    gt: &[Vec<usize>],
    pred_base: &[Vec<usize>],
    num_classes: usize,
    image: usize,
    pixels: &[usize],
    class: usize,
) -> Result<ProbeReport> {
    check_len(gt.len(), pred_base.len())?;
    if image >= gt.len() || class >= num_classes {
        return Err(Error::InvalidInput("image or class out of range".into()));
    }
    if gt[image].contains(&class) {
        return Err(Error::InvalidInput(format!(
            "class {class} is present in image {image}"
        )));
    }
    let mut pred = pred_base.to_vec();
    for &px in pixels {
        let slot = pred[image]
            .get_mut(px)
            .ok_or_else(|| Error::InvalidInput(format!("pixel {px} out of range")))?;
        *slot = class;
    }
    let pooled = |preds: &[Vec<usize>]| -> Result<(u64, u64)> {
        let mut acc = ConfusionAccumulator::new(num_classes);
        for (g, p) in gt.iter().zip(preds) {
            acc.accumulate(g, p)?;
        }
        Ok((acc.intersection()[class], acc.union()[class]))
    };
    Ok(ProbeReport {
        class,
        image_iou_before: metrics::jaccard_index(&gt[image], &pred_base[image], class)?,
        image_iou_after: metrics::jaccard_index(&gt[image], &pred[image], class)?,
        dataset_counts_before: pooled(pred_base)?,
        dataset_counts_after: pooled(&pred)?,
        total_pixels: gt.iter().map(|g| g.len() as u64).sum(),
    })
}

/// Two predictors on the same two-image ground truth whose order under
/// image-mIoU is the reverse of their order under dataset-mIoU.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceWitness {
    pub gt: Vec<Vec<usize>>,
    pub pred_a: Vec<Vec<usize>>,
    pub pred_b: Vec<Vec<usize>>,
    pub image_miou: (f64, f64),
    pub dataset_miou: (f64, f64),
}

/// Image 1 holds two foreground pixels out of four, image 2 none.
/// Predictor A is exact on image 1 but adds one false foreground pixel to
/// image 2; predictor B is exact on image 2 but misses one foreground pixel
/// of image 1.
pub fn divergence_witness() -> Result<DivergenceWitness> {
    let gt = vec![vec![1, 1, 0, 0], vec![0, 0, 0, 0]];
    let pred_a = vec![vec![1, 1, 0, 0], vec![1, 0, 0, 0]];
    let pred_b = vec![vec![1, 0, 0, 0], vec![0, 0, 0, 0]];
    let classes = [0, 1];
    let dataset = |pred: &[Vec<usize>]| -> Result<f64> {
        let mut acc = ConfusionAccumulator::new(2);
        for (g, p) in gt.iter().zip(pred) {
            acc.accumulate(g, p)?;
        }
        Ok(metrics::dataset_miou(&acc).mean_iou)
    };
    Ok(DivergenceWitness {
        image_miou: (
            metrics::image_miou(&gt, &pred_a, &classes)?,
            metrics::image_miou(&gt, &pred_b, &classes)?,
        ),
        dataset_miou: (dataset(&pred_a)?, dataset(&pred_b)?),
        gt,
        pred_a,
        pred_b,
    })
}
