use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpn::dpe::SequenceLayout;
use dpn::flops::CostDims;
use dpn::harness::{self, ExperimentConfig, ProfileRow, RoutingStats};

#[derive(Parser)]
#[command(name = "dpn", version, about = "Dynamic pyramid network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in toy setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the optimizer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> dpn::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::toy(),
        };
        if let Some(s) = self.seed {
            cfg.optimizer.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoint, metrics, evaluation and traces.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Analytic FLOPs of a static schedule, or a placement x kernel sweep.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Expert every DPE layer selects.
        #[arg(long, default_value_t = 0)]
        expert: usize,
        /// Text tokens before the routing token.
        #[arg(long, default_value_t = 1)]
        text_len: usize,
        #[arg(long, default_value_t = 0)]
        answer_len: usize,
        /// Visual grid as HxW; defaults to the task grid.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(usize, usize)>,
        /// Sweep placements {8,16,24} and {4,8,12} over kernels 1x2 and 2x2.
        #[arg(long)]
        sweep: bool,
    },
    /// Expert-activation statistics from a trace file.
    RoutingStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: PathBuf,
    },
}

fn run(cli: Cli) -> dpn::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let (out, files) = harness::train(&cfg)?;
            let r = &out.final_eval;
            println!("accuracy {:.4}", r.accuracy.overall());
            for (tag, acc) in r.accuracy.per_tag.keys().filter_map(|&t| Some((t, r.accuracy.tag(t)?))) {
                println!("  {:<7} {acc:.4}", tag.as_str());
            }
            println!("flops ratio {:.4}", r.flops.mean_ratio);
            print!("{}", r.routing.table());
            println!("wrote {}", files.checkpoint.display());
        }
        Command::Eval { common, checkpoint, dataset } => {
            let cfg = common.load()?;
            let r = harness::evaluate_checkpoint(&checkpoint, &dataset, &cfg)?;
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("eval.json"), serde_json::to_string_pretty(&r)?)?;
            harness::write_traces(fs::File::create(cfg.output_dir.join("traces.jsonl"))?, &r.traces)?;
            println!("accuracy {:.4} ({}/{})", r.accuracy.overall(), r.accuracy.correct, r.accuracy.total);
            println!("mean flops {:.0} of {:.0}, ratio {:.4}", r.flops.mean_total, r.flops.mean_baseline, r.flops.mean_ratio);
            print!("{}", r.routing.table());
        }
        Command::Profile { common, expert, text_len, answer_len, grid, sweep } => {
            let cfg = common.load()?;
            let dims = CostDims::from(&cfg.dims);
            let layout = SequenceLayout::new(grid.unwrap_or(cfg.task.grid), text_len, answer_len)?;
            fs::create_dir_all(&cfg.output_dir)?;
            if sweep {
                let rows = harness::sweep(dims, &layout, &[vec![8, 16, 24], vec![4, 8, 12]], &[(1, 2), (2, 2)])?;
                print!("{}", ProfileRow::table(&rows));
                fs::write(cfg.output_dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
            } else {
                let report = harness::profile(dims, &cfg.pyramid, &layout, expert)?;
                println!("{report}");
                fs::write(cfg.output_dir.join("profile.json"), serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::RoutingStats { common, traces } => {
            let cfg = common.load()?;
            let records = harness::read_traces(std::io::BufReader::new(fs::File::open(traces)?))?;
            let stats = RoutingStats::from_traces(&records, &cfg.pyramid.dpe_layers, cfg.pyramid.experts.len())?;
            print!("{}", stats.table());
            for (tag, t) in &stats.per_tag {
                println!("{} patterns: {:?}", tag.as_str(), t.patterns);
            }
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("routing_stats.json"), serde_json::to_string_pretty(&stats)?)?;
        }
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.trim().parse().map_err(|e| format!("{e}"))?;
    let w = w.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((h, w))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
