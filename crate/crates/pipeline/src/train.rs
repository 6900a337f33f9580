//! Plain SGD on density MSE, and count-error evaluation.

use std::collections::HashMap;

use csca_core::metrics::{game, mae, rmse};
use csca_core::rng::indexed_substream;
use csca_core::scalar::lit;
use csca_core::{Error, Module, ParamId, Result, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;

use crate::dataset::Sample;
use crate::network::Network;
use crate::synth::Illumination;

/// Mean over the batch of per-image density MSE, on a fresh tape.
fn batch_loss<T: Scalar>(net: &Network<T>, tape: &mut Tape<T>, batch: &[&Sample<T>]) -> Result<csca_core::Var> {
    let mut total = None;
    for s in batch {
        let a = tape.constant(s.x_a.clone());
        let b = tape.constant(s.x_b.clone());
        let gt = tape.constant(s.gt.clone());
        let pred = net.forward(tape, a, b)?;
        let l = tape.mse(pred, gt)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty training batch".into()))?;
    Ok(tape.scale(total, lit(1.0 / batch.len() as f64)))
}

/// Loss of `samples` without touching the parameters.
pub fn dataset_loss<T: Scalar>(net: &Network<T>, samples: &[&Sample<T>]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut tape = Tape::inference();
        let l = batch_loss(net, &mut tape, &[s])?;
        sum += tape.value(l).data()[0].to_f64().unwrap_or(f64::NAN);
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// One SGD step; returns the loss before the update. A non-finite loss or
/// gradient aborts with a numeric error and leaves the parameters untouched.
pub fn train_step<T: Scalar>(net: &mut Network<T>, batch: &[&Sample<T>], lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = batch_loss(net, &mut tape, batch)?;
    let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    let mut grads: HashMap<ParamId, Tensor<T>> = HashMap::new();
    let mut bad = None;
    net.visit_params("", &mut |name, p| {
        if let Some(g) = tape.param_grad(p) {
            if !g.is_finite() && bad.is_none() {
                bad = Some(name.to_string());
            }
            grads.insert(p.id(), g);
        }
    });
    if let Some(name) = bad {
        return Err(Error::Numeric(format!("non-finite gradient for {name}")));
    }
    let step: T = lit(lr);
    net.visit_params_mut("", &mut |_, p| {
        if let Some(g) = grads.get(&p.id()) {
            for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v = *v - step * d;
            }
        }
    });
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// seeds the per-epoch shuffling
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.2,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// training-set loss before the first step
    pub initial_loss: f64,
    /// mean step loss per epoch
    pub epoch_losses: Vec<f64>,
    /// training-set loss after the last step
    pub final_loss: f64,
}

/// Shuffled mini-batch SGD for `opts.epochs` epochs.
pub fn train<T: Scalar>(net: &mut Network<T>, samples: &[&Sample<T>], opts: &TrainOptions) -> Result<TrainLog> {
    train_with(net, samples, opts, |_, _, _| Ok(()))
}

/// [`train`] with `after_epoch(epoch, mean_step_loss, net)` called after every epoch.
pub fn train_with<T, F>(net: &mut Network<T>, samples: &[&Sample<T>], opts: &TrainOptions, mut after_epoch: F) -> Result<TrainLog>
where
    T: Scalar,
    F: FnMut(usize, f64, &Network<T>) -> Result<()>,
{
    if samples.is_empty() || opts.batch_size == 0 {
        return Err(Error::Config("training needs samples and a positive batch size".into()));
    }
    let initial_loss = dataset_loss(net, samples)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut rng = indexed_substream(opts.seed, "shuffle", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| samples[i]).collect();
            sum += train_step(net, &batch, opts.lr)?;
            steps += 1;
        }
        let mean = sum / steps as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
        after_epoch(epoch, mean, net)?;
    }
    Ok(TrainLog {
        initial_loss,
        epoch_losses,
        final_loss: dataset_loss(net, samples)?,
    })
}

/// One evaluation number; `level` is set for GAME rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub subset: String,
    pub metric: &'static str,
    pub level: Option<u32>,
    pub value: f64,
}

/// GAME(0..=l_max), MAE and RMSE over all samples and per illumination,
/// with predictions supplied by `predict`.
pub fn evaluate_with<T, F>(samples: &[&Sample<T>], l_max: u32, mut predict: F) -> Result<Vec<EvalRow>>
where
    T: Scalar,
    F: FnMut(&Sample<T>) -> Result<Tensor<T>>,
{
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict(s)?);
    }
    let mut rows = Vec::new();
    let subsets: [(&str, Option<Illumination>); 3] = [
        ("all", None),
        ("bright", Some(Illumination::Bright)),
        ("dark", Some(Illumination::Dark)),
    ];
    for (name, filter) in subsets {
        let (p, g): (Vec<Tensor<T>>, Vec<Tensor<T>>) = samples
            .iter()
            .zip(&preds)
            .filter(|(s, _)| filter.map_or(true, |f| s.illumination == f))
            .map(|(s, p)| (p.clone(), s.gt.clone()))
            .unzip();
        if p.is_empty() {
            continue;
        }
        for level in 0..=l_max {
            rows.push(EvalRow {
                subset: name.into(),
                metric: "game",
                level: Some(level),
                value: game(&p, &g, level)?,
            });
        }
        rows.push(EvalRow {
            subset: name.into(),
            metric: "mae",
            level: None,
            value: mae(&p, &g)?,
        });
        rows.push(EvalRow {
            subset: name.into(),
            metric: "rmse",
            level: None,
            value: rmse(&p, &g)?,
        });
    }
    Ok(rows)
}

pub fn evaluate<T: Scalar>(net: &Network<T>, samples: &[&Sample<T>], l_max: u32) -> Result<Vec<EvalRow>> {
    evaluate_with(samples, l_max, |s| net.predict(&s.x_a, &s.x_b))
}

/// `subset,metric,L,value` with an empty `L` for MAE and RMSE.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("subset,metric,L,value\n");
    for r in rows {
        let level = r.level.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.subset, r.metric, level, r.value));
    }
    out
}

pub fn find_row<'a>(rows: &'a [EvalRow], subset: &str, metric: &str) -> Option<&'a EvalRow> {
    rows.iter().find(|r| r.subset == subset && r.metric == metric)
}
