//! Mini-batch Adam training and evaluation metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Embedded;
use crate::error::{Error, Result};
use crate::grad::{batch_loss_and_grad, Loss};
use crate::kv::KvWriter;
use crate::model::{predict, ResTTParams, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            other => Err(Error::Parse(format!("unknown task '{other}'"))),
        }
    }

    pub fn default_loss(self) -> Loss {
        match self {
            Task::Classification => Loss::SoftmaxCrossEntropy,
            Task::Regression => Loss::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub loss: Loss,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for the per-epoch shuffles. Initialization has its own seed.
    pub shuffle_seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
}

impl TrainSpec {
    pub fn new(learning_rate: f64, loss: Loss) -> Self {
        Self {
            learning_rate,
            epochs: 100,
            batch_size: 512,
            weight_decay: 1e-6,
            loss,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle_seed: 0,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: String| Err(Error::Hyperparameter(format!("{what} = {v}")));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", self.learning_rate.to_string());
        }
        if self.epochs == 0 {
            return bad("epochs", "0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay.to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta", format!("({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad("eps", self.eps.to_string());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "0".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvWriter) {
        kv.set("learning_rate", self.learning_rate)
            .set("epochs", self.epochs)
            .set("batch_size", self.batch_size)
            .set("weight_decay", self.weight_decay)
            .set("loss", self.loss.as_str())
            .set("beta1", self.beta1)
            .set("beta2", self.beta2)
            .set("eps", self.eps)
            .set("shuffle_seed", self.shuffle_seed)
            .set("eval_every", self.eval_every);
    }
}

/// First and second moment estimates, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ResTTParams,
    pub v: ResTTParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(topology: &Topology) -> Self {
        Self {
            m: ResTTParams::zeros(topology),
            v: ResTTParams::zeros(topology),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with `weight_decay * w` added to the
/// gradient.
pub fn adam_step(params: &mut ResTTParams, grads: &ResTTParams, state: &mut AdamState, spec: &TrainSpec) -> Result<()> {
    let g: Vec<_> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    let p = params.tensors_mut();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    if p.len() != g.len() || m.len() != g.len() || v.len() != g.len() {
        return Err(Error::ShapeMismatch("optimizer state and gradients differ in structure".into()));
    }
    for (((p, g), m), v) in p.iter().zip(&g).zip(&m).zip(&v) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - spec.beta1.powi(t);
    let c2 = 1.0 - spec.beta2.powi(t);
    for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let grad = g.data()[i] + spec.weight_decay * pd[i];
            md[i] = spec.beta1 * md[i] + (1.0 - spec.beta1) * grad;
            vd[i] = spec.beta2 * vd[i] + (1.0 - spec.beta2) * grad * grad;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= spec.learning_rate * mh / (vh.sqrt() + spec.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metrics {
    Classification { accuracy: f64 },
    Regression { rmse: f64, r2: f64 },
}

impl Metrics {
    /// Accuracy or RMSE.
    pub fn primary(&self) -> f64 {
        match *self {
            Metrics::Classification { accuracy } => accuracy,
            Metrics::Regression { rmse, .. } => rmse,
        }
    }

    pub fn primary_name(&self) -> &'static str {
        match self {
            Metrics::Classification { .. } => "accuracy",
            Metrics::Regression { .. } => "rmse",
        }
    }
}

pub fn accuracy(outputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = outputs.iter().zip(labels).filter(|(o, &l)| argmax(o) == l).count();
    Ok(hits as f64 / outputs.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// RMSE and R2 over all output components; SS_tot is taken about the mean of
/// the given targets.
pub fn rmse_r2(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pred.len() != target.len() {
        return Err(Error::TargetLength {
            output: pred.len(),
            target: target.len(),
        });
    }
    let n = pred.len() as f64;
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(((ss_res / n).sqrt(), r2))
}

pub fn predict_all(params: &ResTTParams, topology: &Topology, data: &Embedded) -> Result<Vec<Vec<f64>>> {
    data.xs.par_iter().map(|x| predict(params, topology, x)).collect()
}

pub fn evaluate(params: &ResTTParams, topology: &Topology, data: &Embedded, task: Task) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out = predict_all(params, topology, data)?;
    match task {
        Task::Classification => {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::Parse("classification needs class labels".into()))?;
            Ok(Metrics::Classification {
                accuracy: accuracy(&out, labels)?,
            })
        }
        Task::Regression => {
            let p: Vec<f64> = out.into_iter().flatten().collect();
            let t: Vec<f64> = data.targets.iter().flatten().copied().collect();
            let (rmse, r2) = rmse_r2(&p, &t)?;
            Ok(Metrics::Regression { rmse, r2 })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cost over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    pub eval: Option<Metrics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<EpochRecord>,
}

impl RunLog {
    pub fn last_eval(&self) -> Option<Metrics> {
        self.rows.iter().rev().find_map(|r| r.eval)
    }

    /// Losses and metrics without timings, for reproducibility checks.
    pub fn trajectory(&self) -> Vec<(usize, u64, Option<(u64, u64)>)> {
        self.rows
            .iter()
            .map(|r| {
                let eval = r.eval.map(|m| match m {
                    Metrics::Classification { accuracy } => (accuracy.to_bits(), 0),
                    Metrics::Regression { rmse, r2 } => (rmse.to_bits(), r2.to_bits()),
                });
                (r.epoch, r.train_loss.to_bits(), eval)
            })
            .collect()
    }

    /// `epoch,train_loss,eval_metric,seconds`, plus `eval_r2` for regression.
    pub fn to_csv(&self) -> String {
        let regression = matches!(self.last_eval(), Some(Metrics::Regression { .. }));
        let mut out = String::from("epoch,train_loss,eval_metric,seconds");
        out.push_str(if regression { ",eval_r2\n" } else { "\n" });
        for r in &self.rows {
            let metric = r.eval.map(|m| format!("{}", m.primary())).unwrap_or_default();
            let _ = write!(out, "{},{},{},{:.3}", r.epoch, r.train_loss, metric, r.seconds);
            if regression {
                let r2 = match r.eval {
                    Some(Metrics::Regression { r2, .. }) => r2.to_string(),
                    _ => String::new(),
                };
                let _ = write!(out, ",{r2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Mini-batch Adam. Batches are drawn from a fresh permutation every epoch
/// (stream `epoch` of a generator keyed by `spec.shuffle_seed`).
///
/// Aborts with [`Error::Diverged`] as soon as a batch cost is not finite.
pub fn fit(
    params: &mut ResTTParams,
    topology: &Topology,
    train: &Embedded,
    eval: Option<&Embedded>,
    task: Task,
    spec: &TrainSpec,
) -> Result<RunLog> {
    fit_with(params, topology, train, eval, task, spec, |_| {})
}

pub fn fit_with(
    params: &mut ResTTParams,
    topology: &Topology,
    train: &Embedded,
    eval: Option<&Embedded>,
    task: Task,
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunLog> {
    spec.validate()?;
    params.check_shapes(topology)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut state = AdamState::new(topology);
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    for epoch in 1..=spec.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(spec.batch_size).enumerate() {
            let xs: Vec<&Vec<Vec<f64>>> = idx.iter().map(|&i| &train.xs[i]).collect();
            let ts: Vec<&Vec<f64>> = idx.iter().map(|&i| &train.targets[i]).collect();
            let (cost, grad) = batch_loss_and_grad(params, topology, &xs, &ts, spec.loss)?;
            if !cost.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss: cost,
                });
            }
            total += cost * idx.len() as f64;
            adam_step(params, &grad, &mut state, spec)?;
        }
        let evaluate_now = epoch % spec.eval_every == 0 || epoch == spec.epochs;
        let metrics = match eval {
            Some(e) if evaluate_now => Some(evaluate(params, topology, e, task)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            eval: metrics,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.rows.push(rec);
    }
    Ok(log)
}
