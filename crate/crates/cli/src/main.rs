use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mge_core::autodiff::FaultInjection;
use mge_core::harness::experiments::{self, CropConfig, Example1Config, VarianceConfig};
use mge_core::harness::{report, TaskKind, TaskSpec};
use mge_core::models::{build, checkpoint, ModelConfig, ModelKind};
use mge_core::trainer::{dry_run, train, TrainConfig};
use mge_core::verify::{self, Suite};
use mge_core::wu::{format_rational, Strategy};

mod config;

use config::Config;

#[derive(Parser)]
#[command(name = "mge", version, about = "Multiscale gradient estimation and coarse-to-fine training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write history, ledger and checkpoint.
    Train(Overrides),
    /// Run the invariant suites.
    Verify(Overrides),
    /// Run an analysis experiment: example1, coarsen_crop or variance.
    Experiment {
        name: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to runs/<command>-<unix time>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    n1: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    /// Per-stage iterations for full_multiscale, coarsest stage first.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    suite: Option<String>,
    /// Charge the ledger from the schedule without training.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    sigmas: Option<String>,
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    /// Scale the conv kernel gradient (negative control for `verify`).
    #[arg(long, hide = true)]
    inject_conv_grad_scale: Option<f64>,
}

enum Fail {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

type Outcome<T> = Result<T, Fail>;

fn usage<T>(r: anyhow::Result<T>) -> Outcome<T> {
    r.map_err(Fail::Usage)
}

fn run<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Outcome<T> {
    r.map_err(|e| Fail::Run(e.into()))
}

impl Overrides {
    fn config(&self, levels_key: &str) -> anyhow::Result<Config> {
        let mut c = Config::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            c.merge_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        let flags = [
            ("run.seed", &self.seed),
            ("train.strategy", &self.strategy),
            (levels_key, &self.levels),
            ("train.n1", &self.n1),
            ("train.iters", &self.iters),
            ("train.schedule", &self.schedule),
            ("task.kind", &self.task),
            ("task.size", &self.size),
            ("model.kind", &self.model),
            ("train.optimizer", &self.optimizer),
            ("train.lr", &self.lr),
            ("verify.suite", &self.suite),
            ("example1.sigmas", &self.sigmas),
            ("coarsen_crop.sizes", &self.sizes),
            ("variance.repeats", &self.repeats),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                c.set(key, v.as_str())?;
            }
        }
        if self.dry_run {
            c.set("train.dry_run", "true")?;
        }
        Ok(c)
    }

    fn out_dir(&self, command: &str) -> anyhow::Result<PathBuf> {
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                PathBuf::from("runs").join(format!("{command}-{secs}"))
            }
        };
        if dir.exists() {
            let non_empty = fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
            if non_empty && !self.force {
                bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
            }
        }
        Ok(dir)
    }
}

fn prepare(o: &Overrides, command: &str, levels_key: &str) -> Outcome<(Config, PathBuf)> {
    let cfg = usage(o.config(levels_key))?;
    let dir = usage(o.out_dir(command))?;
    Ok((cfg, dir))
}

fn write_effective(dir: &Path, cfg: &Config) -> Outcome<()> {
    run(fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())))?;
    run(fs::write(dir.join("effective_config"), cfg.to_text()).context("writing effective_config"))
}

fn train_config(c: &Config) -> anyhow::Result<TrainConfig> {
    let strategy: Strategy = c.get("train.strategy")?;
    let levels: usize = c.get("mge.levels")?;
    let schedule: Vec<u64> = c.list("train.schedule")?;
    let iters: u64 = c.get("train.iters")?;
    let iters = match (strategy, schedule.is_empty()) {
        (Strategy::FullMultiscale, true) => (0..levels).map(|s| (iters >> s).max(1)).collect(),
        (Strategy::FullMultiscale, false) => schedule,
        (_, true) => vec![iters],
        (_, false) => bail!("train.schedule only applies to full_multiscale"),
    };
    let tc = TrainConfig {
        strategy,
        levels,
        n1: c.get("train.n1")?,
        iters,
        optimizer: c.get("train.optimizer")?,
        lr: c.get("train.lr")?,
        lr_schedule: c.get("train.lr_schedule")?,
        seed: c.get("run.seed")?,
        eval_every: c.get("train.eval_every")?,
        metric: c.get("train.metric")?,
        reset_optimizer: c.get("train.reset_optimizer")?,
        probe_size: c.get("train.probe_size")?,
        wall_time: c.get("run.wall_time")?,
    };
    tc.validate().context("train config")?;
    Ok(tc)
}

fn task_spec(c: &Config) -> anyhow::Result<TaskSpec> {
    let kind: TaskKind = c.get("task.kind")?;
    let mut spec = TaskSpec::new(kind, c.get("task.size")?, c.get("task.n_train")?, c.get("task.n_eval")?, c.get("run.seed")?);
    spec.blur_sigma = c.get("task.blur_sigma")?;
    spec.blur_noise = c.get("task.blur_noise")?;
    Ok(spec)
}

fn model_config(c: &Config, c_in: usize, c_out: usize) -> anyhow::Result<ModelConfig> {
    let kind: ModelKind = c.get("model.kind")?;
    let channels: Vec<usize> = c.list("model.channels")?;
    let mut m = ModelConfig::default_for(kind, c_in, c_out);
    if !channels.is_empty() {
        if kind != ModelKind::ConvStack {
            bail!("model.channels only applies to convstack");
        }
        m = ModelConfig::convstack(channels);
    }
    let m = m.with_zero_final(c.get("model.zero_final")?);
    m.validate().context("model config")?;
    if m.in_channels() != c_in || m.out_channels() != c_out {
        bail!("model.channels must start with {c_in} and end with {c_out} for this task");
    }
    Ok(m)
}

fn cmd_train(o: &Overrides) -> Outcome<ExitCode> {
    let (cfg, dir) = prepare(o, "train", "mge.levels")?;
    let tc = usage(train_config(&cfg))?;
    if usage(cfg.get::<bool>("train.dry_run"))? {
        let ledger = usage(dry_run(&tc).map_err(anyhow::Error::from))?;
        write_effective(&dir, &cfg)?;
        run(report::ledger(&ledger).write(&dir.join("ledger.csv")))?;
        println!("total WU: {}", format_rational(ledger.total()));
        return Ok(ExitCode::SUCCESS);
    }
    let spec = usage(task_spec(&cfg))?;
    let n_train = spec.n_train;
    let rasters: Vec<PathBuf> = usage(cfg.list("task.rasters"))?;
    let task = if rasters.is_empty() {
        usage(spec.build().map_err(anyhow::Error::from))?
    } else {
        let paths: Vec<&Path> = rasters.iter().map(PathBuf::as_path).collect();
        run(spec.build_from_rasters(&paths))?
    };
    let biggest = usage(tc.stages().map_err(anyhow::Error::from))?
        .iter()
        .flat_map(|s| s.plan.batch_sizes().to_vec())
        .max()
        .unwrap_or(0);
    if biggest > task.train.len() {
        return Err(Fail::Usage(anyhow!(
            "train.n1 needs batches of {biggest} images but task.n_train gives {} (requested {n_train})",
            task.train.len()
        )));
    }
    let mc = usage(model_config(&cfg, task.train.model_input_channels(), task.train.target_channels()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let (model, init) = run(build(mc.clone(), &mut rng))?;
    write_effective(&dir, &cfg)?;
    let history = run(train(&tc, &model, init, &task.train, &task.eval))?;
    run(report::history(&history).write(&dir.join("history.csv")))?;
    run(report::ledger(&history.ledger).write(&dir.join("ledger.csv")))?;
    run(checkpoint::save(&dir.join("checkpoint.txt"), &history.params, Some(&mc)))?;
    println!("total WU: {}", format_rational(history.ledger.total()));
    if let Some(r) = history.final_record() {
        println!("final {}: {:.6e}", tc.metric, r.metric);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(o: &Overrides) -> Outcome<ExitCode> {
    let (cfg, dir) = prepare(o, "verify", "mge.levels")?;
    let which = cfg.raw("verify.suite").to_string();
    let suites: Vec<Suite> = if which == "all" {
        Suite::ALL.to_vec()
    } else {
        usage(which.split(',').map(|s| s.trim().parse::<Suite>().map_err(anyhow::Error::from)).collect())?
    };
    write_effective(&dir, &cfg)?;
    let faults = FaultInjection { conv_kernel_grad_scale: o.inject_conv_grad_scale };
    let mut all_ok = true;
    for suite in suites {
        let r = run(verify::run(suite, faults))?;
        let failed: Vec<_> = r.failures().collect();
        println!("{} {suite} ({} checks)", if failed.is_empty() { "PASS" } else { "FAIL" }, r.checks.len());
        for c in &failed {
            println!("  failed: {}: {}", c.name, c.detail);
        }
        all_ok &= failed.is_empty();
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_experiment(name: &str, o: &Overrides) -> Outcome<ExitCode> {
    if !["example1", "coarsen_crop", "variance"].contains(&name) {
        return Err(Fail::Usage(anyhow!("unknown experiment {name:?} (expected example1, coarsen_crop or variance)")));
    }
    let (cfg, dir) = prepare(o, name, "example1.levels")?;
    let seed: u64 = usage(cfg.get("run.seed"))?;
    let table = match name {
        "example1" => {
            let ec = Example1Config {
                n: usage(cfg.get("example1.n"))?,
                sigmas: usage(cfg.list("example1.sigmas"))?,
                levels: usage(cfg.get("example1.levels"))?,
                seed,
            };
            write_effective(&dir, &cfg)?;
            let r = run(experiments::example1(&ec))?;
            println!("max |autodiff - closed form|: {:.3e}", r.max_oracle_gap);
            report::example1(&r.rows)
        }
        "coarsen_crop" => {
            let cc = CropConfig {
                sizes: usage(cfg.list("coarsen_crop.sizes"))?,
                n_samples: usage(cfg.get("coarsen_crop.n_samples"))?,
                crop_fraction: usage(cfg.get("coarsen_crop.crop_fraction"))?,
                crop_draws: usage(cfg.get("coarsen_crop.crop_draws"))?,
                seed,
                ..CropConfig::default()
            };
            write_effective(&dir, &cfg)?;
            report::coarsen_crop(&run(experiments::coarsen_vs_crop(&cc))?)
        }
        _ => {
            let vc = VarianceConfig {
                size: usage(cfg.get("variance.size"))?,
                n_data: usage(cfg.get("variance.n_data"))?,
                batch: usage(cfg.get("variance.batch"))?,
                repeats: usage(cfg.get("variance.repeats"))?,
                seed,
                ..VarianceConfig::default()
            };
            write_effective(&dir, &cfg)?;
            let r = run(experiments::variance(&vc))?;
            println!("variance ratio N vs 4N: {:.3}", r.ratio());
            report::variance(&r)
        }
    };
    let path = dir.join(format!("{name}.csv"));
    run(table.write(&path))?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(o) => cmd_train(o),
        Command::Verify(o) => cmd_verify(o),
        Command::Experiment { name, overrides } => cmd_experiment(name, overrides),
    };
    match outcome {
        Ok(code) => code,
        Err(Fail::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Fail::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
