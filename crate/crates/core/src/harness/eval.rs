use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dpe::PyramidConfig;
use crate::error::{Error, Result};
use crate::flops::{schedule_flops, CostDims};
use crate::synth::{prompt_input, read_dataset, SyntheticSample, Tag};
use crate::transformer::{Model, Routing};

use super::stats::{RoutingStats, TraceRecord};
use super::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per tag.
    pub per_tag: BTreeMap<Tag, (usize, usize)>,
}

impl AccuracyReport {
    pub fn overall(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    pub fn tag(&self, tag: Tag) -> Option<f64> {
        self.per_tag.get(&tag).map(|&(c, t)| ratio(c, t))
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-sample prefill FLOPs averaged over the evaluated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub mean_total: f64,
    pub mean_baseline: f64,
    /// Mean of per-sample ratios.
    pub mean_ratio: f64,
    pub per_tag_mean_total: BTreeMap<Tag, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    /// Mean `Σ p_i·C_i` per tag (1 for samples without DPE layers).
    pub mean_expected_compression: BTreeMap<Tag, f64>,
    /// Mean compression rate of the selected experts per tag.
    pub mean_selected_compression: BTreeMap<Tag, f64>,
    pub flops: FlopsSummary,
    pub routing: RoutingStats,
    #[serde(skip)]
    pub traces: Vec<TraceRecord>,
}

/// Greedy-decodes every sample under `pyramid`'s routing and scores exact
/// matches, routing behaviour and prefill FLOPs.
pub fn evaluate(model: &Model, pyramid: &PyramidConfig, samples: &[SyntheticSample]) -> Result<EvalReport> {
    model.check_pyramid(pyramid)?;
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let routing = if pyramid.dpe_layers.is_empty() { Routing::Plain } else { Routing::Dynamic(pyramid) };
    let cost = CostDims::from(&model.dims);
    let mut per_tag: BTreeMap<Tag, (usize, usize)> = BTreeMap::new();
    let mut expected: BTreeMap<Tag, (f64, usize)> = BTreeMap::new();
    let mut selected: BTreeMap<Tag, (f64, usize)> = BTreeMap::new();
    let mut flops_by_tag: BTreeMap<Tag, (f64, usize)> = BTreeMap::new();
    let mut traces = Vec::new();
    let (mut total, mut baseline, mut ratios) = (0.0, 0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let (input, layout) = prompt_input(s, model.dims.max_grid)?;
        let gen = model.generate(&input, routing, s.answer.len())?;
        let e = per_tag.entry(s.tag).or_default();
        e.0 += usize::from(gen.tokens == s.answer);
        e.1 += 1;
        let report = schedule_flops(cost, pyramid, &layout, &gen.decisions)?;
        total += report.total as f64;
        baseline += report.baseline_total as f64;
        ratios += report.ratio;
        let f = flops_by_tag.entry(s.tag).or_default();
        f.0 += report.total as f64;
        f.1 += 1;
        let (ex, sel) = if gen.decisions.is_empty() {
            (1.0, 1.0)
        } else {
            let k = gen.decisions.len() as f64;
            (
                gen.decisions.iter().map(|d| d.expected_compression(&pyramid.experts)).sum::<f64>() / k,
                gen.decisions.iter().map(|d| pyramid.experts[d.selected].compression).sum::<f64>() / k,
            )
        };
        let a = expected.entry(s.tag).or_default();
        a.0 += ex;
        a.1 += 1;
        let b = selected.entry(s.tag).or_default();
        b.0 += sel;
        b.1 += 1;
        traces.extend(gen.decisions.iter().map(|d| TraceRecord::from_decision(i, s.tag, d)));
    }
    let n = samples.len() as f64;
    let mean = |m: BTreeMap<Tag, (f64, usize)>| m.into_iter().map(|(t, (s, c))| (t, s / c as f64)).collect();
    let routing = RoutingStats::from_traces(&traces, &pyramid.dpe_layers, pyramid.experts.len())?;
    Ok(EvalReport {
        accuracy: AccuracyReport {
            correct: per_tag.values().map(|p| p.0).sum(),
            total: samples.len(),
            per_tag,
        },
        mean_expected_compression: mean(expected),
        mean_selected_compression: mean(selected),
        flops: FlopsSummary {
            mean_total: total / n,
            mean_baseline: baseline / n,
            mean_ratio: ratios / n,
            per_tag_mean_total: mean(flops_by_tag),
        },
        routing,
        traces,
    })
}

/// Loads a checkpoint and a dataset file and evaluates under `config`.
pub fn evaluate_checkpoint(
    checkpoint: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
    config: &ExperimentConfig,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.dims != config.dims {
        return Err(Error::Config(format!(
            "checkpoint dimensions {:?} differ from config {:?}",
            ck.model.dims, config.dims
        )));
    }
    let file = std::io::BufReader::new(std::fs::File::open(dataset)?);
    let (_, samples) = read_dataset(file)?;
    evaluate(&ck.model, &config.pyramid, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TaskConfig;
    use crate::transformer::ModelDims;

    fn dims(task: &TaskConfig) -> ModelDims {
        ModelDims {
            n_layers: 2,
            d: 8,
            n_heads: 2,
            m: 16,
            vocab: task.vocab(),
            max_grid: task.grid,
            max_tail: task.max_tail(),
            patch_codes: task.n_codes,
        }
    }

    #[test]
    fn identity_only_has_unit_ratio_and_one_pattern() {
        let task = TaskConfig { grid: (4, 4), ..TaskConfig::default() };
        let cfg = PyramidConfig::identity_only(vec![1]);
        let model = Model::new(dims(&task), &cfg, 1).unwrap();
        let samples = task.dataset(5, 20).unwrap();
        let r = evaluate(&model, &cfg, &samples).unwrap();
        assert_eq!(r.flops.mean_ratio, 1.0);
        assert_eq!(r.routing.distinct_patterns(), 1);
        assert_eq!(r.accuracy.total, 20);
        assert_eq!(r.traces.len(), 20);
        for t in r.routing.per_tag.values() {
            for row in &t.frequencies {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plain_model_reports_no_routing() {
        let task = TaskConfig { grid: (4, 4), ..TaskConfig::default() };
        let cfg = PyramidConfig::none();
        let model = Model::new(dims(&task), &cfg, 2).unwrap();
        let r = evaluate(&model, &cfg, &task.dataset(1, 6).unwrap()).unwrap();
        assert_eq!(r.flops.mean_ratio, 1.0);
        assert!(r.traces.is_empty());
        assert!(r.mean_expected_compression.values().all(|&c| c == 1.0));
    }

    #[test]
    fn mismatched_pyramid_is_config_error() {
        let task = TaskConfig { grid: (4, 4), ..TaskConfig::default() };
        let model = Model::new(dims(&task), &PyramidConfig::new(vec![1]), 3).unwrap();
        let samples = task.dataset(1, 2).unwrap();
        assert!(matches!(evaluate(&model, &PyramidConfig::new(vec![0]), &samples), Err(Error::Config(_))));
    }
}
