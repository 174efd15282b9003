//! Rule-based grid tasks with exact answers.
//!
//! * **fine**: one marker cell (code 0) among random background codes; the
//!   answer is its `(row, col)`. Max-pooling the code grid with any kernel
//!   larger than one cell erases the marker.
//! * **coarse**: one code covers at least 60% of the cells and is the largest
//!   code present; the answer is that code. Generation rejects grids whose
//!   majority does not survive every configured pooling kernel.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpe::SequenceLayout;
use crate::error::{Error, Result};
use crate::transformer::ModelInput;

pub const GENERATOR_VERSION: u32 = 1;

/// Begin-of-answer marker.
pub const BOA: usize = 0;
pub const Q_FINE: usize = 1;
pub const Q_COARSE: usize = 2;
/// Coordinate tokens `NUM_BASE + k` for `k < MAX_COORD`.
pub const NUM_BASE: usize = 3;
pub const MAX_COORD: usize = 16;
/// Code-answer tokens `CODE_BASE + code`.
pub const CODE_BASE: usize = NUM_BASE + MAX_COORD;
pub const MARKER: usize = 0;
/// Minimum share of cells held by the coarse majority code.
pub const COARSE_MARGIN: f64 = 0.6;

pub fn vocab_size(n_codes: usize) -> usize {
    CODE_BASE + n_codes
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Fine,
    Coarse,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Fine => "fine",
            Tag::Coarse => "coarse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub grid: (usize, usize),
    /// Row-major cell codes.
    pub cells: Vec<usize>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub tag: Tag,
    pub seed: u64,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub grid: (usize, usize),
    /// Cell codes `0..n_codes`; code 0 is the fine-task marker.
    pub n_codes: usize,
    pub fine_fraction: f64,
    /// Kernels the coarse answer must survive.
    pub pooling_kernels: Vec<(usize, usize)>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { grid: (8, 8), n_codes: 6, fine_fraction: 0.5, pooling_kernels: vec![(1, 2), (2, 1), (2, 2), (4, 4)] }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_grid(self.grid.0, self.grid.1)?;
        if self.n_codes < 3 {
            return Err(Error::Config(format!("need at least 3 cell codes, got {}", self.n_codes)));
        }
        if !(0.0..=1.0).contains(&self.fine_fraction) {
            return Err(Error::Config(format!("fine fraction {} outside [0, 1]", self.fine_fraction)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        vocab_size(self.n_codes)
    }

    /// Longest tail a sample can need: prompt, routing token and answer marker
    /// plus the longest teacher-forced answer.
    pub fn max_tail(&self) -> usize {
        1 + 1 + 2
    }

    /// Sample `index` of the mixed stream identified by `stream_seed`.
    pub fn sample(&self, stream_seed: u64, index: u64) -> Result<SyntheticSample> {
        let seed = mix_seed(stream_seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = self.grid;
        if rng.gen_bool(self.fine_fraction) {
            gen_fine_with(seed, h, w, self.n_codes)
        } else {
            gen_coarse_with(seed, h, w, self.n_codes, &self.pooling_kernels)
        }
    }

    pub fn dataset(&self, stream_seed: u64, count: usize) -> Result<Vec<SyntheticSample>> {
        (0..count as u64).map(|i| self.sample(stream_seed, i)).collect()
    }
}

/// SplitMix64 finalizer over a stream seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_grid(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::Contract(format!("grid {h}x{w} is degenerate; need at least 2x2")));
    }
    if h > MAX_COORD || w > MAX_COORD {
        return Err(Error::Contract(format!("grid {h}x{w} exceeds {MAX_COORD}x{MAX_COORD}")));
    }
    Ok(())
}

pub fn gen_fine(seed: u64, h: usize, w: usize) -> Result<SyntheticSample> {
    gen_fine_with(seed, h, w, TaskConfig::default().n_codes)
}

pub fn gen_fine_with(seed: u64, h: usize, w: usize, n_codes: usize) -> Result<SyntheticSample> {
    check_grid(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let marker = rng.gen_range(0..h * w);
    let cells: Vec<usize> =
        (0..h * w).map(|i| if i == marker { MARKER } else { rng.gen_range(1..n_codes) }).collect();
    let (r, c) = (marker / w, marker % w);
    Ok(SyntheticSample {
        grid: (h, w),
        cells,
        prompt: vec![Q_FINE],
        answer: vec![NUM_BASE + r, NUM_BASE + c],
        tag: Tag::Fine,
        seed,
    })
}

pub fn gen_coarse(seed: u64, h: usize, w: usize) -> Result<SyntheticSample> {
    let cfg = TaskConfig::default();
    gen_coarse_with(seed, h, w, cfg.n_codes, &cfg.pooling_kernels)
}

pub fn gen_coarse_with(
    seed: u64,
    h: usize,
    w: usize,
    n_codes: usize,
    kernels: &[(usize, usize)],
) -> Result<SyntheticSample> {
    check_grid(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let min_major = (COARSE_MARGIN * n as f64).ceil() as usize;
    loop {
        let code = rng.gen_range(2..n_codes);
        let major = rng.gen_range(min_major..=n);
        let mut cells = vec![code; n];
        // partial Fisher-Yates: the first n - major shuffled slots get minority codes
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n - major {
            let j = rng.gen_range(i..n);
            order.swap(i, j);
            cells[order[i]] = rng.gen_range(1..code);
        }
        let answer = vec![CODE_BASE + code];
        let survives = kernels.iter().all(|&k| {
            let (pooled, ph, pw) = pool_codes(&cells, (h, w), k);
            evaluate_rule(Tag::Coarse, &pooled, (ph, pw)).as_deref() == Some(&answer[..])
        });
        if survives {
            return Ok(SyntheticSample { grid: (h, w), cells, prompt: vec![Q_COARSE], answer, tag: Tag::Coarse, seed });
        }
    }
}

/// Recomputes the answer from the cells. `None` when the rule has no unique
/// answer (no single marker, or no strict most-frequent code).
pub fn evaluate_rule(tag: Tag, cells: &[usize], (h, w): (usize, usize)) -> Option<Vec<usize>> {
    match tag {
        Tag::Fine => {
            let mut hits = cells.iter().enumerate().filter(|(_, &c)| c == MARKER);
            let (idx, _) = hits.next()?;
            if hits.next().is_some() || h > MAX_COORD || w > MAX_COORD {
                return None;
            }
            Some(vec![NUM_BASE + idx / w, NUM_BASE + idx % w])
        }
        Tag::Coarse => {
            let max_code = cells.iter().copied().max()?;
            let mut counts = vec![0usize; max_code + 1];
            for &c in cells {
                counts[c] += 1;
            }
            let best = counts.iter().copied().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &k)| k == best);
            let (code, _) = winners.next()?;
            if winners.next().is_some() {
                return None;
            }
            Some(vec![CODE_BASE + code])
        }
    }
}

/// Ceil-mode max-pool of an integer code grid.
pub fn pool_codes(cells: &[usize], (h, w): (usize, usize), (kh, kw): (usize, usize)) -> (Vec<usize>, usize, usize) {
    let (oh, ow) = (h.div_ceil(kh), w.div_ceil(kw));
    let mut out = Vec::with_capacity(oh * ow);
    for pr in 0..oh {
        for pc in 0..ow {
            let mut best = 0;
            for r in pr * kh..((pr + 1) * kh).min(h) {
                for c in pc * kw..((pc + 1) * kw).min(w) {
                    best = best.max(cells[r * w + c]);
                }
            }
            out.push(best);
        }
    }
    (out, oh, ow)
}

/// Teacher-forced model input: the answer segment is `[BOA, a_0 .. a_{k-2}]`
/// so that position `j` of the segment predicts `a_j`.
pub fn embed_sample(sample: &SyntheticSample, max_grid: (usize, usize)) -> Result<(ModelInput, SequenceLayout)> {
    let mut answer = Vec::with_capacity(sample.answer.len());
    answer.push(BOA);
    answer.extend_from_slice(&sample.answer[..sample.answer.len().saturating_sub(1)]);
    build_input(sample, answer, max_grid)
}

/// Generation prompt: the answer segment holds only the marker.
pub fn prompt_input(sample: &SyntheticSample, max_grid: (usize, usize)) -> Result<(ModelInput, SequenceLayout)> {
    build_input(sample, vec![BOA], max_grid)
}

fn build_input(
    sample: &SyntheticSample,
    answer: Vec<usize>,
    max_grid: (usize, usize),
) -> Result<(ModelInput, SequenceLayout)> {
    let (h, w) = sample.grid;
    if h > max_grid.0 || w > max_grid.1 {
        return Err(Error::Capacity(format!("grid {h}x{w} does not fit max grid {max_grid:?}")));
    }
    let input = ModelInput { grid: sample.grid, cells: sample.cells.clone(), text: sample.prompt.clone(), answer };
    let layout = input.layout()?;
    Ok((input, layout))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub generator_version: u32,
    pub stream_seed: u64,
    pub task: TaskConfig,
    pub count: usize,
}

/// Header line followed by one JSON sample per line.
pub fn write_dataset(
    mut out: impl Write,
    task: &TaskConfig,
    stream_seed: u64,
    samples: &[SyntheticSample],
) -> Result<()> {
    let header = DatasetHeader {
        generator_version: GENERATOR_VERSION,
        stream_seed,
        task: task.clone(),
        count: samples.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<(DatasetHeader, Vec<SyntheticSample>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    let mut samples = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    if samples.len() != header.count {
        return Err(Error::Format(format!("header promises {} samples, found {}", header.count, samples.len())));
    }
    Ok((header, samples))
}
