use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::objectives::{batch_autoregressive_loss, routing_loss, total_loss_var, LossReport};
use crate::params::Binder;
use crate::synth::{embed_sample, mix_seed, write_dataset, Tag};
use crate::transformer::{Model, Routing};

use super::eval::{evaluate, EvalReport};
use super::optim::RmsProp;
use super::stats::write_traces;
use super::ExperimentConfig;

/// Salt separating the training stream from the initialization seed.
const STREAM_SALT: u64 = 0x7EA1_0000;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        loss: LossReport,
        grad_norm: f64,
        lr: f64,
    },
    Eval {
        step: usize,
        accuracy: f64,
        per_tag: BTreeMap<Tag, f64>,
        mean_expected_compression: BTreeMap<Tag, f64>,
        mean_flops_ratio: f64,
    },
}

impl MetricRecord {
    fn eval(step: usize, r: &EvalReport) -> Self {
        MetricRecord::Eval {
            step,
            accuracy: r.accuracy.overall(),
            per_tag: r.accuracy.per_tag.keys().filter_map(|&t| Some((t, r.accuracy.tag(t)?))).collect(),
            mean_expected_compression: r.mean_expected_compression.clone(),
            mean_flops_ratio: r.flops.mean_ratio,
        }
    }
}

/// Re-reads a metrics stream.
pub fn parse_metrics(input: impl BufRead) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    /// Evaluation after the last step.
    pub final_eval: EvalReport,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    sample_seeds: Vec<u64>,
    autoregressive: f64,
    routing: Option<f64>,
    total: f64,
    non_finite_params: Vec<&'a str>,
}

/// Trains in memory, streaming one JSON record per line to `metrics`.
///
/// Fails with [`Error::NonFinite`] when a loss or gradient stops being finite;
/// its detail is a JSON dump of the offending step.
pub fn train_model(config: &ExperimentConfig, mut metrics: impl Write) -> Result<TrainOutcome> {
    config.validate()?;
    let opt_cfg = &config.optimizer;
    let pyramid = &config.pyramid;
    let mut model = Model::new(config.dims, pyramid, opt_cfg.seed)?;
    let mut opt = RmsProp::new(opt_cfg.clone());
    let routing = if pyramid.dpe_layers.is_empty() { Routing::Plain } else { Routing::Dynamic(pyramid) };
    let stream = mix_seed(opt_cfg.seed, STREAM_SALT);
    let eval_set = config.task.dataset(config.eval.seed, config.eval.samples.max(1))?;
    let mut records = Vec::new();
    let mut emit = |r: MetricRecord, records: &mut Vec<MetricRecord>| -> Result<()> {
        serde_json::to_writer(&mut metrics, &r)?;
        metrics.write_all(b"\n")?;
        records.push(r);
        Ok(())
    };

    for step in 0..opt_cfg.steps {
        let samples = (0..opt_cfg.batch)
            .map(|b| config.task.sample(stream, (step * opt_cfg.batch + b) as u64))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, true);
        let mut items = Vec::with_capacity(samples.len());
        let mut probs = Vec::new();
        let mut decisions = Vec::new();
        for s in &samples {
            let (input, _) = embed_sample(s, model.dims.max_grid)?;
            let fwd = model.forward(&mut tape, &mut binder, &input, routing, None)?;
            items.push((fwd.logits, fwd.layout, s.answer.clone()));
            probs.extend(fwd.probs);
            decisions.extend(fwd.decisions);
        }
        let la = batch_autoregressive_loss(&mut tape, &items)?;
        let lr_var =
            if probs.is_empty() { None } else { Some(routing_loss(&mut tape, &probs, &pyramid.experts, pyramid.target)?) };
        let total = total_loss_var(&mut tape, la, lr_var, pyramid.lambda)?;
        let (a, r, t) = (tape.data(la)[0], lr_var.map(|v| tape.data(v)[0]), tape.data(total)[0]);
        let diagnose = |bad: Vec<&str>| {
            let d = Diagnostic {
                step,
                sample_seeds: samples.iter().map(|s| s.seed).collect(),
                autoregressive: a,
                routing: r,
                total: t,
                non_finite_params: bad,
            };
            Error::NonFinite { step, detail: serde_json::to_string(&d).unwrap_or_default() }
        };
        if !t.is_finite() {
            return Err(diagnose(Vec::new()));
        }
        tape.backward(total)?;
        let grads = binder.grads(&tape);
        let bad: Vec<&str> =
            grads.iter().filter(|(_, g)| g.iter().any(|x| !x.is_finite())).map(|(n, _)| n.as_str()).collect();
        if !bad.is_empty() {
            return Err(diagnose(bad));
        }
        let lr = opt.current_lr();
        let grad_norm = opt.step(&mut model.params, &grads)?;
        let mean_c = crate::objectives::mean_expected_compression(&decisions, &pyramid.experts).unwrap_or(1.0);
        let loss = LossReport { autoregressive: a, routing: r.unwrap_or(0.0), total: t, mean_expected_compression: mean_c };
        emit(MetricRecord::Step { step, loss, grad_norm, lr }, &mut records)?;
        let done = step + 1;
        if config.eval.every > 0 && done % config.eval.every == 0 && done < opt_cfg.steps {
            let r = evaluate(&model, pyramid, &eval_set)?;
            emit(MetricRecord::eval(done, &r), &mut records)?;
        }
    }
    let final_eval = evaluate(&model, pyramid, &eval_set)?;
    emit(MetricRecord::eval(opt_cfg.steps, &final_eval), &mut records)?;
    Ok(TrainOutcome { model, metrics: records, final_eval })
}

/// Files written by [`train`] under the configured output directory.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub eval: PathBuf,
    pub traces: PathBuf,
    pub eval_set: PathBuf,
}

/// Trains and writes `config.json`, `metrics.jsonl`, `model.ckpt`,
/// `eval.json`, `traces.jsonl` and the held-out `eval_set.jsonl`. A
/// non-finite step leaves its dump in `nonfinite.json`.
pub fn train(config: &ExperimentConfig) -> Result<(TrainOutcome, RunFiles)> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let files = RunFiles {
        config: dir.join("config.json"),
        metrics: dir.join("metrics.jsonl"),
        checkpoint: dir.join("model.ckpt"),
        eval: dir.join("eval.json"),
        traces: dir.join("traces.jsonl"),
        eval_set: dir.join("eval_set.jsonl"),
    };
    fs::write(&files.config, config.to_json()?)?;
    let eval_set = config.task.dataset(config.eval.seed, config.eval.samples.max(1))?;
    write_dataset(BufWriter::new(fs::File::create(&files.eval_set)?), &config.task, config.eval.seed, &eval_set)?;
    let mut sink = BufWriter::new(fs::File::create(&files.metrics)?);
    let outcome = match train_model(config, &mut sink) {
        Ok(o) => o,
        Err(Error::NonFinite { step, detail }) => {
            sink.flush()?;
            fs::write(dir.join("nonfinite.json"), &detail)?;
            return Err(Error::NonFinite { step, detail });
        }
        Err(e) => return Err(e),
    };
    sink.flush()?;
    Checkpoint::new(outcome.model.clone(), config.optimizer.steps as u64).save(&files.checkpoint)?;
    fs::write(&files.eval, serde_json::to_string_pretty(&outcome.final_eval)?)?;
    write_traces(BufWriter::new(fs::File::create(&files.traces)?), &outcome.final_eval.traces)?;
    Ok((outcome, files))
}
