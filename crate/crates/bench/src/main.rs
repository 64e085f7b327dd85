use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use timba::checkpoint;
use timba::gradcheck::{gradient_suite, TOLERANCE};
use timba::mamba::Direction;
use timba::model::Timba;
use timba::pipeline::data::{write_adjacency_csv, write_dataset_csv};
use timba::pipeline::{impute, metrics, MetricsRecord};
use timba::ssm::scan_equivalence;
use timba::Result;

use timba_bench::ablation::run_ablation;
use timba_bench::config::{BenchConfig, NodeChoice};
use timba_bench::downstream::{resolve_node, run_downstream};
use timba_bench::experiment::{evaluate_case, sub_seed, train_model, DeskData, ModelCache};
use timba_bench::manifest::Manifest;
use timba_bench::sensitivity::run_sensitivity;
use timba_bench::synthetic::generate_synthetic;

const SCAN_TOLERANCE: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "timba", version, about = "Diffusion imputation of multivariate time series with bidirectional Mamba blocks")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset CSV (header of node ids, empty cell = missing) instead of synthetic data.
    #[arg(long, global = true, requires = "adjacency")]
    data: Option<PathBuf>,
    /// Headerless N x N adjacency CSV for `--data`.
    #[arg(long, global = true, requires = "data")]
    adjacency: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic dataset: truth, observed values, and adjacency.
    Generate,
    /// Train a model and save its best-validation checkpoint.
    Train {
        #[arg(long, value_enum)]
        direction: Option<Dir>,
    },
    /// Impute the whole series with a trained checkpoint.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score the model against the mean and linear baselines on the test split.
    Evaluate {
        /// Trains one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Uni- versus bidirectional blocks over the configured seeds.
    Ablate,
    /// MAE/MSE over point-missing rates.
    Sensitivity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Downstream node-value prediction from imputed data.
    Downstream {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Node index, overriding the configured choice.
        #[arg(long)]
        node: Option<usize>,
    },
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Parallel against sequential scan.
    Scancheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dir {
    Uni,
    Bi,
}

impl From<Dir> for Direction {
    fn from(d: Dir) -> Self {
        match d {
            Dir::Uni => Direction::Uni,
            Dir::Bi => Direction::Bi,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<timba::Error> for Failure {
    fn from(e: timba::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<BenchConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => BenchConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => BenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(cli: &Cli, cfg: &BenchConfig) -> Result<DeskData> {
    match (&cli.data, &cli.adjacency) {
        (Some(d), Some(a)) => DeskData::from_csv(cfg, d, a),
        _ => DeskData::synthetic(cfg),
    }
}

fn model_for(cli_ckpt: Option<&Path>, cfg: &BenchConfig, data: &DeskData, m: &mut Manifest) -> Result<Timba> {
    match cli_ckpt {
        Some(p) => checkpoint::load(p),
        None => {
            let out = m.time("train", || train_model(cfg, data, cfg.model.direction, cfg.seed))?;
            Ok(out.model)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize, m: &mut Manifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    m.output(path);
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<ExitCode, Failure> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let name = format!("{:?}", cli.command).split_whitespace().next().unwrap_or("").to_lowercase();
    let mut m = Manifest::new(&name, &cfg);
    let mut code = ExitCode::SUCCESS;
    match &cli.command {
        Cmd::Generate => {
            let mut spec = cfg.data.clone();
            spec.seed = sub_seed(cfg.seed, 0) ^ cfg.data.seed;
            let syn = m.time("generate", || generate_synthetic(&spec))?;
            let data = DeskData::synthetic(&cfg)?;
            let full = timba::masking::Mask::full(syn.truth.nodes(), syn.truth.steps(), true);
            for (file, mask) in [("truth.csv", &full), ("data.csv", &data.observed)] {
                let p = out.join(file);
                write_dataset_csv(&p, &syn.ids, &syn.truth, mask)?;
                m.output(p);
            }
            let p = out.join("adjacency.csv");
            write_adjacency_csv(&p, &syn.graph.adjacency)?;
            m.output(p);
            println!("wrote {} nodes x {} steps to {}", syn.truth.nodes(), syn.truth.steps(), out.display());
        }
        Cmd::Train { direction } => {
            let data = load_data(&cli, &cfg)?;
            let dir = direction.map(Direction::from).unwrap_or(cfg.model.direction);
            let outcome = m.time("train", || train_model(&cfg, &data, dir, cfg.seed))?;
            let p = out.join("model.ckpt");
            checkpoint::save(&p, &outcome.model)?;
            m.output(p);
            write_json(&out.join("history.json"), &outcome.history, &mut m)?;
            for h in &outcome.history {
                println!(
                    "epoch {:>3}  lr {:.0e}  train {:.5}  val {}",
                    h.epoch,
                    h.learning_rate,
                    h.train_loss,
                    h.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
                );
            }
            println!("best epoch: {:?}", outcome.best_epoch);
        }
        Cmd::Impute { checkpoint: ckpt } => {
            let data = load_data(&cli, &cfg)?;
            let model = checkpoint::load(ckpt)?;
            let mut visible = data.truth.clone();
            for n in 0..visible.nodes() {
                for s in 0..visible.steps() {
                    if !data.observed.get(n, s) {
                        visible.set(n, s, 0.0);
                    }
                }
            }
            let res = m.time("impute", || {
                impute(&model, &visible, &data.observed, &data.normalizer, &data.graph.normalized, cfg.impute.samples, cfg.seed)
            })?;
            let full = timba::masking::Mask::full(visible.nodes(), visible.steps(), true);
            let p = out.join("imputed.csv");
            write_dataset_csv(&p, &data.ids, &res.imputed, &full)?;
            m.output(p);
            let targets = data.known.and_not(&data.observed);
            if !targets.is_empty() {
                let mm = metrics(&res.imputed, &data.truth, &targets)?;
                println!("held-out entries: {}  MAE {:.5}  MSE {:.5}", mm.count, mm.mae, mm.mse);
                let mut w = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
                MetricsRecord::new("series", "timba", cfg.seed, mm, res.wall_time_s).write_line(&mut w)?;
                w.flush()?;
                m.output(out.join("metrics.jsonl"));
            }
        }
        Cmd::Evaluate { checkpoint: ckpt } => {
            let data = load_data(&cli, &cfg)?;
            let model = model_for(ckpt.as_deref(), &cfg, &data, &mut m)?;
            let case = data.test_case();
            let (report, res) = m.time("evaluate", || evaluate_case(&model, &data, &case, cfg.impute.samples, cfg.seed))?;
            let p = out.join("metrics.jsonl");
            let mut w = BufWriter::new(File::create(&p)?);
            println!("{:<8} {:>10} {:>10} {:>8}", "method", "MAE", "MSE", "targets");
            for (method, mm, t) in [
                ("timba", report.timba, res.wall_time_s),
                ("mean", report.mean, 0.0),
                ("linear", report.linear, 0.0),
            ] {
                println!("{method:<8} {:>10.5} {:>10.5} {:>8}", mm.mae, mm.mse, mm.count);
                MetricsRecord::new("test", method, cfg.seed, mm, t).write_line(&mut w)?;
            }
            w.flush()?;
            m.output(p);
        }
        Cmd::Ablate => {
            let data = load_data(&cli, &cfg)?;
            let mut cache = ModelCache::new();
            let report = m.time("ablate", || run_ablation(&cfg, &data, &mut cache))?;
            println!("{:>6} {:<4} {:>10} {:>10}", "seed", "dir", "MAE", "MSE");
            for r in &report.rows {
                println!("{:>6} {:<4} {:>10.5} {:>10.5}", r.seed, format!("{:?}", r.direction).to_lowercase(), r.mae, r.mse);
            }
            println!("bi <= uni in {} of {} seeds", report.bi_wins, report.seeds);
            write_json(&out.join("ablation.json"), &report, &mut m)?;
        }
        Cmd::Sensitivity { checkpoint: ckpt } => {
            let data = load_data(&cli, &cfg)?;
            let model = model_for(ckpt.as_deref(), &cfg, &data, &mut m)?;
            let report = m.time("sensitivity", || {
                run_sensitivity(&model, &data, &cfg.study.rates, cfg.impute.samples, cfg.seed)
            })?;
            println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "rate", "MAE", "MSE", "mean MAE", "lin MAE");
            for p in &report.points {
                println!("{:>5.2} {:>10.5} {:>10.5} {:>10.5} {:>10.5}", p.rate, p.mae, p.mse, p.mean_mae, p.linear_mae);
            }
            println!(
                "inversions: {}  nondecreasing within tolerance: {}",
                report.inversions.len(),
                report.nondecreasing_within_tolerance
            );
            write_json(&out.join("sensitivity.json"), &report, &mut m)?;
        }
        Cmd::Downstream { checkpoint: ckpt, node } => {
            let data = load_data(&cli, &cfg)?;
            let model = model_for(ckpt.as_deref(), &cfg, &data, &mut m)?;
            let choice = node.map(NodeChoice::Index).unwrap_or(cfg.study.downstream_node);
            let target = resolve_node(choice, &data.graph)?;
            let case = data.test_case();
            let report = m.time("downstream", || -> Result<_> {
                let res = timba_bench::experiment::impute_case(&model, &data, &case, cfg.impute.samples, cfg.seed)?;
                run_downstream(&cfg.study, &data, &case, Some(&res.imputed), target)
            })?;
            println!("node {} ({})", report.node, report.node_id);
            println!("{:>6} {:<8} {:>10} {:>10}", "seed", "imputer", "MAE", "MSE");
            for r in &report.rows {
                println!("{:>6} {:<8} {:>10.5} {:>10.5}", r.seed, format!("{:?}", r.imputer).to_lowercase(), r.mae, r.mse);
            }
            println!("oracle best in every seed: {}", report.oracle_best_every_seed);
            write_json(&out.join("downstream.json"), &report, &mut m)?;
        }
        Cmd::Gradcheck => {
            let checks = m.time("gradcheck", || gradient_suite(cfg.seed))?;
            let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            for c in &checks {
                println!("{:<28} {:.3e} {}", c.name, c.max_rel_error, if c.passed() { "ok" } else { "FAIL" });
            }
            println!("max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})");
            write_json(&out.join("gradcheck.json"), &checks.iter().map(|c| (&c.name, c.max_rel_error)).collect::<Vec<_>>(), &mut m)?;
            if !checks.iter().all(|c| c.passed()) {
                code = ExitCode::from(2);
            }
        }
        Cmd::Scancheck => {
            let check = m.time("scancheck", || scan_equivalence(cfg.seed, 100, 16, &[8, 64, 256, 1024]));
            println!(
                "{} instances, max deviation {:.3e} (worst L = {}, chunk = {})",
                check.instances, check.max_dev, check.worst.0, check.worst.1
            );
            if check.max_dev >= SCAN_TOLERANCE {
                code = ExitCode::from(2);
            }
        }
    }
    m.write(&out)?;
    Ok(code)
}
