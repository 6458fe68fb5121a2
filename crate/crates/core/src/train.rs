//! Tonemapped L2 loss, Adam, the training loop and a finite-difference
//! gradient checker.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PatchRecord;
use crate::error::{Error, Result};
use crate::net::{
    Checkpoint, Float, Mode, Model, NetOptions, Network, NetworkSpec, OptimizerState, Tensor,
    Variant,
};
use crate::radiance::{
    mu_law, mu_law_derivative, RadianceImage, TonemapParams, DEFAULT_GAMMA, DEFAULT_MU,
};

/// How the tonemapped difference is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// `||T(p) - T(t)||_2`.
    #[default]
    Sum,
    /// The same norm divided by `sqrt(n)`, i.e. the root mean square.
    Mean,
}

/// Loss value and its gradient with respect to the prediction.
pub fn loss_and_grad<T: Float>(
    predicted: &[T],
    target: &[T],
    mu: f64,
    reduction: Reduction,
) -> (f64, Vec<T>) {
    assert_eq!(
        predicted.len(),
        target.len(),
        "loss operands differ in length"
    );
    let diffs: Vec<f64> = predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| mu_law(p.to_f64_lossy(), mu) - mu_law(t.to_f64_lossy(), mu))
        .collect();
    let sum_sq: f64 = diffs.iter().map(|d| d * d).sum();
    let n = predicted.len().max(1) as f64;
    let loss = match reduction {
        Reduction::Sum => sum_sq.sqrt(),
        Reduction::Mean => (sum_sq / n).sqrt(),
    };
    let scale = match reduction {
        Reduction::Sum => loss,
        Reduction::Mean => loss * n,
    };
    let grad = if loss == 0.0 {
        vec![T::zero(); predicted.len()]
    } else {
        diffs
            .iter()
            .zip(predicted)
            .map(|(d, &p)| T::from_f64_lossy(d * mu_law_derivative(p.to_f64_lossy(), mu) / scale))
            .collect()
    };
    (loss, grad)
}

/// `||T(predicted) - T(target)||_2` on mu-law tonemapped images.
pub fn loss(
    predicted: &RadianceImage,
    target: &RadianceImage,
    params: TonemapParams,
) -> Result<f64> {
    loss_with(predicted, target, params, Reduction::Sum)
}

pub fn loss_with(
    predicted: &RadianceImage,
    target: &RadianceImage,
    params: TonemapParams,
    reduction: Reduction,
) -> Result<f64> {
    if predicted.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "loss operands {:?} and {:?}",
            predicted.dims(),
            target.dims()
        )));
    }
    let (l, _) = loss_and_grad(
        predicted.pixels().data(),
        target.pixels().data(),
        params.mu(),
        reduction,
    );
    Ok(l)
}

/// Mean over samples of the per-sample loss, with the matching gradient.
pub fn batch_loss_and_grad<T: Float>(
    predicted: &Tensor<T>,
    target: &Tensor<T>,
    mu: f64,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let n = predicted.shape().first().copied().unwrap_or(1).max(1);
    let per = predicted.len() / n;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(predicted.len());
    let inv = T::from_f64_lossy(1.0 / n as f64);
    for (p, t) in predicted.data().chunks(per).zip(target.data().chunks(per)) {
        let (l, g) = loss_and_grad(p, t, mu, reduction);
        total += l;
        grad.extend(g.into_iter().map(|v| v * inv));
    }
    Ok((
        total / n as f64,
        Tensor::from_vec(predicted.shape().to_vec(), grad)?,
    ))
}

fn default_width_divisor() -> usize {
    1
}
fn default_residual_blocks() -> usize {
    9
}
fn default_threshold() -> f64 {
    0.2
}
fn default_factor() -> usize {
    2
}
fn default_interval() -> u64 {
    1000
}

/// Training hyperparameters, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub mu: f64,
    pub gamma: f64,
    /// Motion score above which a patch is replicated.
    #[serde(default = "default_threshold")]
    pub oversample_threshold: f64,
    #[serde(default = "default_factor")]
    pub oversample_factor: usize,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub reduction: Reduction,
    /// Divides every channel count of the network.
    #[serde(default = "default_width_divisor")]
    pub width_divisor: usize,
    #[serde(default = "default_residual_blocks")]
    pub residual_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Resnet,
            k: 3,
            learning_rate: 1e-4,
            batch_size: 4,
            iterations: 10_000,
            seed: 0,
            mu: DEFAULT_MU,
            gamma: DEFAULT_GAMMA,
            oversample_threshold: default_threshold(),
            oversample_factor: default_factor(),
            checkpoint_interval: default_interval(),
            reduction: Reduction::Sum,
            width_divisor: 1,
            residual_blocks: 9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if self.oversample_factor == 0 {
            return Err(Error::Parameter(
                "oversample factor must be at least 1".into(),
            ));
        }
        if self.width_divisor == 0 {
            return Err(Error::Parameter("width divisor must be at least 1".into()));
        }
        TonemapParams::new(self.mu)?;
        Ok(())
    }

    pub fn net_options(&self) -> NetOptions {
        NetOptions {
            residual_blocks: self.residual_blocks,
            ..NetOptions::reduced(self.width_divisor)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            state: OptimizerState {
                step: 0,
                first_moment: Vec::new(),
                second_moment: Vec::new(),
            },
        }
    }

    pub fn step<M: Model<f32>>(&mut self, model: &mut M) {
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let lr = self.learning_rate;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let mut idx = 0;
        model.visit_params(&mut |_, p| {
            if !p.trainable {
                return;
            }
            if st.first_moment.len() <= idx {
                st.first_moment.push(vec![0.0; p.len()]);
                st.second_moment.push(vec![0.0; p.len()]);
            }
            let m = &mut st.first_moment[idx];
            let v = &mut st.second_moment[idx];
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                p.value[i] -= (lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            }
            idx += 1;
        });
    }
}

/// Stacks records into `[n, k, s, s, 6]` inputs and `[n, s, s, 3]` targets.
pub fn collate(batch: &[&PatchRecord]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let (k, s) = (first.k, first.size);
    let mut inputs = Vec::with_capacity(batch.len() * first.inputs.len());
    let mut targets = Vec::with_capacity(batch.len() * first.target.len());
    for r in batch {
        if r.k != k || r.size != s {
            return Err(Error::Shape(format!(
                "batch mixes k={}/{} and size={}/{}",
                k, r.k, s, r.size
            )));
        }
        inputs.extend_from_slice(&r.inputs);
        targets.extend_from_slice(&r.target);
    }
    let n = batch.len();
    Ok((
        Tensor::from_vec(vec![n, k, s, s, 6], inputs)?,
        Tensor::from_vec(vec![n, s, s, 3], targets)?,
    ))
}

/// Per-iteration record for the CSV log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub loss: f64,
    pub seconds: f64,
}

pub fn write_log_header<W: Write>(mut w: W) -> std::io::Result<()> {
    writeln!(w, "iteration,loss,wall_clock")
}

pub fn write_log_row<W: Write>(mut w: W, row: &StepLog) -> std::io::Result<()> {
    writeln!(w, "{},{:.9e},{:.3}", row.iteration, row.loss, row.seconds)
}

/// Network plus optimizer state; one [`Trainer::train_step`] is one Adam update.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig, patch: usize) -> Result<Self> {
        config.validate()?;
        let spec = NetworkSpec::build(config.variant, config.k, patch, config.net_options())?;
        Ok(Trainer {
            network: Network::new(spec, config.seed),
            optimizer: Adam::new(config.learning_rate),
            config,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = Adam::new(config.learning_rate);
        if let Some(state) = checkpoint.optimizer {
            optimizer.state = state;
        }
        Ok(Trainer {
            network: checkpoint.network,
            optimizer,
            config,
        })
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.optimizer.state.step
    }

    /// One update on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&PatchRecord]) -> Result<f64> {
        let (x, target) = collate(batch)?;
        let y = self.network.forward(&x, Mode::Train)?;
        let (loss, grad) = batch_loss_and_grad(&y, &target, self.config.mu, self.config.reduction)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: format!("loss at iteration {}", self.iteration()),
            });
        }
        self.network.zero_grad();
        self.network.backward(&grad)?;
        self.network.clear_cache();
        self.optimizer.learning_rate = self.config.learning_rate;
        self.optimizer.step(&mut self.network);
        Ok(loss)
    }

    /// Record indices of the batch used at `iteration`. Each epoch is a
    /// permutation keyed by `(seed, epoch)`, so resuming reproduces the order.
    pub fn batch_indices(seed: u64, iteration: u64, batch_size: usize, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..batch_size as u64 {
            let pos = iteration * batch_size as u64 + j;
            let epoch = pos / len as u64;
            let within = (pos % len as u64) as usize;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("filled").1[within]);
        }
        out
    }

    /// Runs until `self.config.iterations` updates have been made in total,
    /// calling `on_step` after each one.
    pub fn run(
        &mut self,
        records: &[PatchRecord],
        mut on_step: impl FnMut(&mut Trainer, StepLog) -> Result<()>,
    ) -> Result<()> {
        if records.is_empty() {
            return Err(Error::Parameter("no training records".into()));
        }
        let start = Instant::now();
        while self.iteration() < self.config.iterations {
            let it = self.iteration();
            let idx =
                Self::batch_indices(self.config.seed, it, self.config.batch_size, records.len());
            let batch: Vec<&PatchRecord> = idx.iter().map(|&i| &records[i]).collect();
            let loss = self.train_step(&batch)?;
            let log = StepLog {
                iteration: it + 1,
                loss,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_step(self, log)?;
        }
        Ok(())
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter, index)` pairs whose perturbation crossed a rectifier kink.
    pub excluded: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on coordinates checked; sampled uniformly when exceeded.
    pub max_coordinates: usize,
    pub seed: u64,
    pub mode: Mode,
    pub reduction: Reduction,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coordinates: usize::MAX,
            seed: 0,
            mode: Mode::Train,
            reduction: Reduction::Sum,
        }
    }
}

fn eval_loss<M: Model<f64>>(
    model: &mut M,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    mu: f64,
    opts: &GradCheckOptions,
) -> Result<(f64, u64)> {
    let y = model.forward(input, opts.mode)?;
    let (l, _) = batch_loss_and_grad(&y, target, mu, opts.reduction)?;
    Ok((l, model.kink_signature()))
}

fn with_coordinate<M: Model<f64>>(model: &mut M, flat: usize, f: impl FnOnce(&mut f64)) {
    let mut remaining = flat;
    let mut f = Some(f);
    model.visit_params(&mut |_, p| {
        if !p.trainable || f.is_none() {
            return;
        }
        if remaining < p.len() {
            (f.take().expect("once"))(&mut p.value[remaining]);
        } else {
            remaining -= p.len();
        }
    });
}

/// Compares backpropagated gradients of the tonemapped loss against central
/// finite differences at `f64`. Coordinates where `+step` and `-step` land on
/// different rectifier pieces are reported as excluded.
pub fn gradient_check<M: Model<f64>>(
    model: &mut M,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    params: TonemapParams,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mu = params.mu();
    model.zero_grad();
    let y = model.forward(input, opts.mode)?;
    let (_, g) = batch_loss_and_grad(&y, target, mu, opts.reduction)?;
    model.backward(&g)?;
    let base_signature = model.kink_signature();

    let mut names = Vec::new();
    let mut analytic = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.trainable {
            for (i, &gv) in p.grad.iter().enumerate() {
                names.push((name.to_string(), i));
                analytic.push(gv);
            }
        }
    });

    let total = analytic.len();
    let mut coords: Vec<usize> = (0..total).collect();
    if total > opts.max_coordinates {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_coordinates);
        coords.sort_unstable();
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    for flat in coords {
        let mut original = 0.0;
        with_coordinate(model, flat, |v| {
            original = *v;
            *v = original + opts.step;
        });
        let (plus, sig_plus) = eval_loss(model, input, target, mu, &opts)?;
        with_coordinate(model, flat, |v| *v = original - opts.step);
        let (minus, sig_minus) = eval_loss(model, input, target, mu, &opts)?;
        with_coordinate(model, flat, |v| *v = original);
        if sig_plus != sig_minus || sig_plus != base_signature {
            report.excluded.push(names[flat].clone());
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[flat];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        report.max_relative_error = report.max_relative_error.max((a - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}

/// Random `[n, k, s, s, 6]` input and `[n, s, s, 3]` target in `(0, 1)`.
pub fn random_problem(n: usize, k: usize, size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * k * size * size * 6)
        .map(|_| rng.gen_range(0.02..0.98))
        .collect();
    let t = (0..n * size * size * 3)
        .map(|_| rng.gen_range(0.02..0.98))
        .collect();
    (
        Tensor::from_vec(vec![n, k, size, size, 6], x).expect("sizes agree"),
        Tensor::from_vec(vec![n, size, size, 3], t).expect("sizes agree"),
    )
}
