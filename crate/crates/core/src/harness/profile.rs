use serde::{Deserialize, Serialize};

use crate::dpe::{PoolingExpert, PyramidConfig, SequenceLayout};
use crate::error::Result;
use crate::flops::{schedule_flops, static_decisions, CostDims, FlopsReport};

/// FLOPs of a static schedule where every DPE layer picks `expert`. Needs no
/// weights.
pub fn profile(dims: CostDims, pyramid: &PyramidConfig, layout: &SequenceLayout, expert: usize) -> Result<FlopsReport> {
    pyramid.validate(dims.n_layers)?;
    let decisions = if pyramid.dpe_layers.is_empty() { Vec::new() } else { static_decisions(pyramid, layout.grid(), expert)? };
    schedule_flops(dims, pyramid, layout, &decisions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layers: Vec<usize>,
    pub kernel: (usize, usize),
    pub total: u64,
    pub baseline_total: u64,
    pub ratio: f64,
}

/// One row per (placement, kernel), each kernel applied at every placed layer.
pub fn sweep(
    dims: CostDims,
    layout: &SequenceLayout,
    placements: &[Vec<usize>],
    kernels: &[(usize, usize)],
) -> Result<Vec<ProfileRow>> {
    let mut rows = Vec::with_capacity(placements.len() * kernels.len());
    for layers in placements {
        for &kernel in kernels {
            let expert = PoolingExpert::from_kernel(kernel.0, kernel.1)?;
            let cfg = PyramidConfig::new(layers.clone()).with_experts(vec![expert]);
            let r = profile(dims, &cfg, layout, 0)?;
            rows.push(ProfileRow {
                layers: layers.clone(),
                kernel,
                total: r.total,
                baseline_total: r.baseline_total,
                ratio: r.ratio,
            });
        }
    }
    Ok(rows)
}

impl ProfileRow {
    pub fn table(rows: &[ProfileRow]) -> String {
        let mut s = format!("{:<14} {:>6} {:>20} {:>10}\n", "layers", "kernel", "flops", "ratio");
        for r in rows {
            let layers = r.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            s.push_str(&format!(
                "{:<14} {:>6} {:>20} {:>10.6}\n",
                layers,
                format!("{}x{}", r.kernel.0, r.kernel.1),
                r.total,
                r.ratio
            ));
        }
        s
    }
}
