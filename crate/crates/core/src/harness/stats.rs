use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dpe::RouterDecision;
use crate::error::{Error, Result};
use crate::synth::Tag;

/// One routing decision of one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample: usize,
    pub tag: Tag,
    pub layer: usize,
    pub probs: Vec<f64>,
    pub selected: usize,
    pub pre_grid: (usize, usize),
    pub post_grid: (usize, usize),
}

impl TraceRecord {
    pub fn from_decision(sample: usize, tag: Tag, d: &RouterDecision) -> Self {
        Self {
            sample,
            tag,
            layer: d.layer,
            probs: d.probs.clone(),
            selected: d.selected,
            pre_grid: d.pre_grid,
            post_grid: d.post_grid,
        }
    }
}

pub fn write_traces(mut out: impl Write, traces: &[TraceRecord]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces(input: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Selection counts for one task tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagRouting {
    pub samples: usize,
    /// `counts[k][e]`: times expert `e` won at the `k`-th DPE layer.
    pub counts: Vec<Vec<u64>>,
    pub frequencies: Vec<Vec<f64>>,
    /// Selected expert per DPE layer, joined with `-`, with its sample count.
    pub patterns: BTreeMap<String, u64>,
}

impl TagRouting {
    pub fn distinct_patterns(&self) -> usize {
        self.patterns.len()
    }
}

/// Expert-activation statistics per task tag, DPE layer and expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub layers: Vec<usize>,
    pub n_experts: usize,
    pub per_tag: BTreeMap<Tag, TagRouting>,
}

impl RoutingStats {
    /// Aggregates traces. Every sample must carry exactly one record per layer
    /// of `layers`.
    pub fn from_traces(traces: &[TraceRecord], layers: &[usize], n_experts: usize) -> Result<Self> {
        let mut by_sample: BTreeMap<usize, (Tag, Vec<Option<usize>>)> = BTreeMap::new();
        for t in traces {
            let k = layers
                .iter()
                .position(|&l| l == t.layer)
                .ok_or_else(|| Error::Contract(format!("trace for layer {} outside DPE layers {layers:?}", t.layer)))?;
            if t.selected >= n_experts || t.probs.len() != n_experts {
                return Err(Error::Contract(format!("trace selects {} of {} experts", t.selected, t.probs.len())));
            }
            let entry = by_sample.entry(t.sample).or_insert_with(|| (t.tag, vec![None; layers.len()]));
            if entry.0 != t.tag || entry.1[k].replace(t.selected).is_some() {
                return Err(Error::Contract(format!("conflicting traces for sample {} layer {}", t.sample, t.layer)));
            }
        }
        let mut per_tag: BTreeMap<Tag, TagRouting> = BTreeMap::new();
        for (sample, (tag, sel)) in by_sample {
            let sel: Vec<usize> = sel
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Contract(format!("sample {sample} is missing a layer")))?;
            let e = per_tag.entry(tag).or_insert_with(|| TagRouting {
                samples: 0,
                counts: vec![vec![0; n_experts]; layers.len()],
                frequencies: Vec::new(),
                patterns: BTreeMap::new(),
            });
            e.samples += 1;
            for (k, &s) in sel.iter().enumerate() {
                e.counts[k][s] += 1;
            }
            let key = sel.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
            *e.patterns.entry(key).or_default() += 1;
        }
        for e in per_tag.values_mut() {
            e.frequencies =
                e.counts.iter().map(|row| row.iter().map(|&c| c as f64 / e.samples as f64).collect()).collect();
        }
        Ok(Self { layers: layers.to_vec(), n_experts, per_tag })
    }

    /// Distinct routing patterns over all tags.
    pub fn distinct_patterns(&self) -> usize {
        let mut all: Vec<&String> = self.per_tag.values().flat_map(|t| t.patterns.keys()).collect();
        all.sort();
        all.dedup();
        all.len()
    }

    /// Plain-text table: one row per (tag, layer), one column per expert.
    pub fn table(&self) -> String {
        let mut s = format!("{:<7} {:>5}", "tag", "layer");
        for e in 0..self.n_experts {
            s.push_str(&format!(" {:>8}", format!("e{e}")));
        }
        s.push_str(&format!(" {:>8}\n", "patterns"));
        for (tag, t) in &self.per_tag {
            for (k, row) in t.frequencies.iter().enumerate() {
                s.push_str(&format!("{:<7} {:>5}", tag.as_str(), self.layers[k]));
                for f in row {
                    s.push_str(&format!(" {f:>8.4}"));
                }
                s.push_str(&format!(" {:>8}\n", t.distinct_patterns()));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(sample: usize, tag: Tag, layer: usize, selected: usize) -> TraceRecord {
        let mut probs = vec![0.1; 3];
        probs[selected] = 0.8;
        TraceRecord { sample, tag, layer, probs, selected, pre_grid: (4, 4), post_grid: (4, 4) }
    }

    #[test]
    fn counts_frequencies_and_patterns() {
        let traces = vec![
            rec(0, Tag::Fine, 1, 0),
            rec(0, Tag::Fine, 2, 0),
            rec(1, Tag::Fine, 1, 0),
            rec(1, Tag::Fine, 2, 2),
            rec(2, Tag::Coarse, 1, 2),
            rec(2, Tag::Coarse, 2, 2),
        ];
        let s = RoutingStats::from_traces(&traces, &[1, 2], 3).unwrap();
        let fine = &s.per_tag[&Tag::Fine];
        assert_eq!(fine.samples, 2);
        assert_eq!(fine.counts, vec![vec![2, 0, 0], vec![1, 0, 1]]);
        assert_eq!(fine.distinct_patterns(), 2);
        assert_eq!(s.per_tag[&Tag::Coarse].patterns["2-2"], 1);
        assert_eq!(s.distinct_patterns(), 3);
        for t in s.per_tag.values() {
            for row in &t.frequencies {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(s.table().lines().count(), 1 + 4);
    }

    #[test]
    fn traces_round_trip_through_jsonl() {
        let traces = vec![rec(0, Tag::Fine, 1, 0), rec(1, Tag::Coarse, 1, 2)];
        let mut buf = Vec::new();
        write_traces(&mut buf, &traces).unwrap();
        assert_eq!(read_traces(buf.as_slice()).unwrap(), traces);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        assert!(RoutingStats::from_traces(&[rec(0, Tag::Fine, 5, 0)], &[1], 3).is_err());
        assert!(RoutingStats::from_traces(&[rec(0, Tag::Fine, 1, 0)], &[1, 2], 3).is_err());
        let dup = [rec(0, Tag::Fine, 1, 0), rec(0, Tag::Fine, 1, 1)];
        assert!(RoutingStats::from_traces(&dup, &[1], 3).is_err());
    }
}
