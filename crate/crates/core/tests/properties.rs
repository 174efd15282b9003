use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use dpn::checkpoint::Checkpoint;
use dpn::dpe::PyramidConfig;
use dpn::harness::{parse_metrics, ExperimentConfig, MetricRecord};
use dpn::objectives::LossReport;
use dpn::synth::{self, Tag, TaskConfig, MARKER};
use dpn::transformer::{Model, ModelDims, ModelInput};

#[test]
fn fine_marker_position_is_uniform() {
    let (h, w) = (8, 8);
    let mut counts = vec![0u64; h * w];
    let n = 10_000u64;
    for seed in 0..n {
        let s = synth::gen_fine(seed, h, w).unwrap();
        let pos = s.cells.iter().position(|&c| c == MARKER).unwrap();
        counts[pos] += 1;
    }
    let expected = n as f64 / (h * w) as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((h * w - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}");
}

#[test]
fn toy_config_file_matches_builtin() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.json");
    assert_eq!(ExperimentConfig::load(path).unwrap(), ExperimentConfig::toy());
}

#[test]
fn seven_b_config_is_valid() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/7b_scale.json");
    let cfg = ExperimentConfig::load(path).unwrap();
    assert_eq!(cfg.pyramid.dpe_layers, vec![8, 16, 24]);
    assert_eq!(cfg.dims.n_layers, 32);
}

fn small_dims() -> ModelDims {
    ModelDims { n_layers: 3, d: 8, n_heads: 2, m: 12, vocab: 9, max_grid: (5, 5), max_tail: 6, patch_codes: 4 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarse_answers_survive_pooling(seed in any::<u64>(), h in 2usize..=10, w in 2usize..=10) {
        let s = synth::gen_coarse(seed, h, w).unwrap();
        prop_assert_eq!(synth::evaluate_rule(Tag::Coarse, &s.cells, s.grid), Some(s.answer.clone()));
        for kernel in TaskConfig::default().pooling_kernels {
            let (pooled, ph, pw) = synth::pool_codes(&s.cells, s.grid, kernel);
            prop_assert_eq!(synth::evaluate_rule(Tag::Coarse, &pooled, (ph, pw)), Some(s.answer.clone()));
        }
    }

    #[test]
    fn fine_answers_follow_the_rule(seed in any::<u64>(), h in 2usize..=16, w in 2usize..=16) {
        let s = synth::gen_fine(seed, h, w).unwrap();
        prop_assert_eq!(synth::evaluate_rule(Tag::Fine, &s.cells, s.grid), Some(s.answer.clone()));
        prop_assert_eq!(s.cells.iter().filter(|&&c| c == MARKER).count(), 1);
    }

    #[test]
    fn dataset_stream_is_deterministic(seed in any::<u64>()) {
        let cfg = TaskConfig::default();
        prop_assert_eq!(cfg.dataset(seed, 6).unwrap(), cfg.dataset(seed, 6).unwrap());
        prop_assert_eq!(cfg.sample(seed, 3).unwrap(), cfg.dataset(seed, 6).unwrap()[3].clone());
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), step in any::<u64>()) {
        let cfg = PyramidConfig::new(vec![1]);
        let ck = Checkpoint::new(Model::new(small_dims(), &cfg, seed).unwrap(), step);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn metrics_lines_reparse(losses in prop::collection::vec((0.0f64..10.0, 0.0f64..2.0, 1.0f64..4.0), 1..8)) {
        let records: Vec<MetricRecord> = losses
            .iter()
            .enumerate()
            .map(|(i, &(a, r, c))| MetricRecord::Step {
                step: i,
                loss: LossReport { autoregressive: a, routing: r, total: a + 0.01 * r, mean_expected_compression: c },
                grad_norm: a * r,
                lr: 1e-3,
            })
            .collect();
        let text: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        prop_assert_eq!(parse_metrics(text.as_bytes()).unwrap(), records);
    }

    #[test]
    fn plain_forward_is_causal(seed in any::<u64>(), h in 1usize..=5, w in 1usize..=5) {
        let model = Model::new(small_dims(), &PyramidConfig::none(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ModelInput {
            grid: (h, w),
            cells: (0..h * w).map(|_| rng.gen_range(0..4)).collect(),
            text: vec![rng.gen_range(1..9)],
            answer: vec![0, rng.gen_range(1..9), rng.gen_range(1..9)],
        };
        let mut y = x.clone();
        y.answer[2] = (x.answer[2] % 8) + 1;
        let a = model.forward_plain(&x).unwrap();
        let b = model.forward_plain(&y).unwrap();
        let n = a.shape()[0];
        for row in 0..n - 1 {
            prop_assert_eq!(a.row(row), b.row(row));
        }
    }
}
