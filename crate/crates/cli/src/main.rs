mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use uwdt_core::dataset::{inspect, read_dataset, Dataset};
use uwdt_core::eval::{emit_results, entropy_stats, run_eval, EvalGroup, MetricsRecord};
use uwdt_core::mcts::generate_dataset;
use uwdt_core::nn::checkpoint;
use uwdt_core::nn::{train, Mode, ModelConfig, SeqModel, TrainLog};
use uwdt_core::rollout::{ConstantPolicy, MctsPolicy, ModelPolicy, RandomPolicy};
use uwdt_core::sim::{Action, ScenarioOptions};
use uwdt_core::uwdt::{measure_teacher_entropy, train_student, WeightSchedule};

use config::RunConfig;
use error::CliError;
use manifest::{beside, Manifest};

#[derive(Parser)]
#[command(name = "uwdt", version, about = "Roundabout decision-transformer pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the file and UWDT_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for episode generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    /// Passes over every training window.
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate after warmup.
    #[arg(long)]
    lr: Option<f64>,
    /// Windows per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert dataset with the tree-search planner.
    GenData {
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
        /// Number of expert episodes, seeds `seed..seed + episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Planner simulations per decision.
        #[arg(long)]
        simulations: Option<u32>,
    },
    /// Train the return-conditioned teacher.
    TrainTeacher {
        /// Expert dataset.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the behaviour-cloning baseline (no return tokens).
    TrainBc {
        /// Expert dataset.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Measure the teacher's entropy range and write the weight schedule.
    MeasureEntropy {
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Weight schedule JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Greedy rollouts used to find the entropy range.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Distil a student with entropy-weighted cross-entropy.
    TrainStudent {
        /// Expert dataset.
        #[arg(long)]
        data: PathBuf,
        /// Frozen teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Schedule written by measure-entropy.
        #[arg(long)]
        schedule: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Start from the teacher's parameters instead of a fresh draw.
        #[arg(long)]
        init_from_teacher: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate checkpoints and baselines at each density level.
    Evaluate {
        /// `name=checkpoint`, repeatable.
        #[arg(long = "model", value_name = "NAME=PATH")]
        models: Vec<String>,
        /// Built-in policies: random, cruise, mcts.
        #[arg(long = "baseline")]
        baselines: Vec<String>,
        /// Episodes per density level.
        #[arg(long)]
        episodes: Option<usize>,
        /// Directory for summary.csv, profiles.csv, entropy.csv and the manifest.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a summary of a dataset file.
    DatasetInspect {
        #[arg(long)]
        data: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) {
    let t = &mut cfg.model.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.apply_env()?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::GenData {
            episodes, simulations, ..
        } => {
            if let Some(n) = episodes {
                cfg.mcts.episodes = *n;
            }
            if let Some(s) = simulations {
                cfg.mcts.search.simulations = *s;
            }
        }
        Command::TrainTeacher { train, .. } | Command::TrainBc { train, .. } => apply_train(&mut cfg, train),
        Command::TrainStudent {
            train,
            init_from_teacher,
            ..
        } => {
            apply_train(&mut cfg, train);
            cfg.uwdt.init_from_teacher |= *init_from_teacher;
        }
        Command::MeasureEntropy { episodes, .. } => {
            if let Some(n) = episodes {
                cfg.uwdt.entropy_episodes = *n;
            }
        }
        Command::Evaluate { episodes, out_dir, .. } => {
            if let Some(n) = episodes {
                cfg.eval.episodes = *n;
            }
            if let Some(d) = out_dir {
                cfg.eval.out_dir = d.clone();
            }
        }
        Command::DatasetInspect { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData { out, .. } => gen_data(&cfg, out),
        Command::TrainTeacher { data, out, .. } => train_sequence(&cfg, data, out, Mode::ReturnConditioned),
        Command::TrainBc { data, out, .. } => train_sequence(&cfg, data, out, Mode::Bc),
        Command::MeasureEntropy { teacher, out, .. } => measure_entropy(&cfg, teacher, out),
        Command::TrainStudent {
            data,
            teacher,
            schedule,
            out,
            ..
        } => student(&cfg, data, teacher, schedule, out),
        Command::Evaluate { models, baselines, .. } => evaluate(&cfg, models, baselines),
        Command::DatasetInspect { data, json } => dataset_inspect(data, *json),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let eps = generate_dataset(out, cfg.mcts.episodes, &cfg.mcts.search, cfg.seed)?;
    let steps: usize = eps.iter().map(|e| e.len()).sum();
    eprintln!("wrote {} episodes ({steps} steps) to {}", eps.len(), out.display());
    Manifest::new("gen-data", cfg).output(out)?.write(&beside(out))
}

fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset, CliError> {
    require(path)?;
    Ok(Dataset::new(read_dataset(path)?, cfg.model.arch.context)?)
}

fn write_log<X: serde::Serialize>(out: &Path, log: &TrainLog<X>) -> Result<PathBuf, CliError> {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    let path = PathBuf::from(s);
    let mut text = String::new();
    for step in &log.steps {
        text += &serde_json::to_string(step).expect("log serializes");
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| uwdt_core::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn report_epochs<X>(log: &TrainLog<X>) {
    for (i, l) in log.epoch_losses().iter().enumerate() {
        eprintln!("epoch {:>3}  loss {l:.5}", i + 1);
    }
}

fn model_config(cfg: &RunConfig, mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        ..cfg.model.arch.clone()
    }
}

fn train_sequence(cfg: &RunConfig, data: &Path, out: &Path, mode: Mode) -> Result<(), CliError> {
    let ds = load_dataset(cfg, data)?;
    eprintln!("training on {} windows from {} episodes", ds.n_windows(), ds.episodes.len());
    let (model, log) = train::<f32>(&ds, model_config(cfg, mode), &cfg.model.train, cfg.seed)?;
    report_epochs(&log);
    checkpoint::save(out, &model)?;
    let log_path = write_log(out, &log)?;
    let command = if mode == Mode::Bc { "train-bc" } else { "train-teacher" };
    Manifest::new(command, cfg)
        .input(data)?
        .output(out)?
        .output(&log_path)?
        .write(&beside(out))
}

fn load_model(path: &Path) -> Result<SeqModel<f32>, CliError> {
    require(path)?;
    Ok(checkpoint::load(path, None)?)
}

fn measure_entropy(cfg: &RunConfig, teacher: &Path, out: &Path) -> Result<(), CliError> {
    let model = Arc::new(load_model(teacher)?);
    let base = cfg.seed.wrapping_add(cfg.scenario.entropy_seed_offset);
    let seeds: Vec<u64> = (0..cfg.uwdt.entropy_episodes as u64).map(|i| base.wrapping_add(i)).collect();
    let range = measure_teacher_entropy(&model, &seeds, &ScenarioOptions::new(cfg.scenario.density.interact()))?;
    eprintln!("teacher entropy range [{:.5}, {:.5}] nats", range.h_min, range.h_max);
    let schedule = WeightSchedule::from_range(cfg.uwdt.r, cfg.uwdt.w_max, &range)?;
    eprintln!("beta = {:.5}", schedule.beta);
    schedule.save(out)?;
    Manifest::new("measure-entropy", cfg)
        .input(teacher)?
        .output(out)?
        .write(&beside(out))
}

fn student(cfg: &RunConfig, data: &Path, teacher: &Path, schedule: &Path, out: &Path) -> Result<(), CliError> {
    let t = load_model(teacher)?;
    require(schedule)?;
    let sched = WeightSchedule::load(schedule)?;
    let ds = load_dataset(cfg, data)?;
    let init = cfg.uwdt.init_from_teacher.then_some(&t);
    let (model, log) = train_student(&t, &ds, t.cfg().clone(), &cfg.model.train, &sched, cfg.seed, init)?;
    report_epochs(&log);
    let clipped: f64 = log.steps.iter().map(|s| s.extra.frac_clipped).sum::<f64>() / log.steps.len() as f64;
    eprintln!("mean fraction of clipped weights {clipped:.4}");
    checkpoint::save(out, &model)?;
    let log_path = write_log(out, &log)?;
    Manifest::new("train-student", cfg)
        .input(data)?
        .input(teacher)?
        .input(schedule)?
        .output(out)?
        .output(&log_path)?
        .write(&beside(out))
}

fn eval_policy(cfg: &RunConfig, name: &str, ckpt: Option<&Path>) -> Result<Vec<EvalGroup>, CliError> {
    let model = ckpt.map(load_model).transpose()?.map(Arc::new);
    let mut groups = vec![];
    for &density in &cfg.eval.densities {
        let (n, seed) = (cfg.eval.episodes, cfg.seed.wrapping_add(cfg.scenario.eval_seed_offset));
        let records: Vec<MetricsRecord> = match (name, &model) {
            (_, Some(m)) => run_eval(&ModelPolicy::greedy(m.clone()), density, n, seed)?,
            ("random", None) => run_eval(&RandomPolicy, density, n, seed)?,
            ("cruise", None) => run_eval(&ConstantPolicy(Action::Cruise), density, n, seed)?,
            ("mcts", None) => run_eval(&MctsPolicy(cfg.mcts.search), density, n, seed)?,
            _ => return Err(CliError::Config(format!("unknown baseline {name:?}"))),
        };
        groups.push(EvalGroup {
            policy: name.to_string(),
            density,
            records,
        });
    }
    Ok(groups)
}

fn evaluate(cfg: &RunConfig, models: &[String], baselines: &[String]) -> Result<(), CliError> {
    if models.is_empty() && baselines.is_empty() {
        return Err(CliError::Config("nothing to evaluate: pass --model or --baseline".into()));
    }
    let mut specs = vec![];
    for m in models {
        let (name, path) = m
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--model expects NAME=PATH, got {m:?}")))?;
        require(Path::new(path))?;
        specs.push((name.to_string(), Some(PathBuf::from(path))));
    }
    specs.extend(baselines.iter().map(|b| (b.clone(), None)));
    let mut groups = vec![];
    for (name, path) in &specs {
        groups.extend(eval_policy(cfg, name, path.as_deref())?);
    }
    let dir = &cfg.eval.out_dir;
    emit_results(&groups, dir)?;
    let mut entropy = String::from("policy,density,min,max,mean,std\n");
    for g in &groups {
        if let Ok(s) = entropy_stats(&g.records) {
            entropy += &format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                g.policy,
                g.density.name(),
                s.min,
                s.max,
                s.mean.mean,
                s.mean.std
            );
        }
    }
    let ent_path = dir.join("entropy.csv");
    std::fs::write(&ent_path, entropy).map_err(|e| uwdt_core::Error::Io {
        path: ent_path.clone(),
        source: e,
    })?;
    print!("{}", std::fs::read_to_string(dir.join("summary.csv")).unwrap_or_default());
    let mut manifest = Manifest::new("evaluate", cfg);
    for (_, p) in &specs {
        if let Some(p) = p {
            manifest = manifest.input(p)?;
        }
    }
    manifest
        .output(&dir.join("summary.csv"))?
        .output(&dir.join("profiles.csv"))?
        .output(&ent_path)?
        .write(&dir.join("manifest.json"))
}

fn dataset_inspect(data: &Path, json: bool) -> Result<(), CliError> {
    require(data)?;
    let s = inspect(data)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        return Ok(());
    }
    println!("version      {}", s.version);
    println!("episodes     {}", s.episodes.len());
    println!("steps        {}", s.total_steps);
    println!("checksum     {:#010x}", s.checksum);
    let mut causes = [0usize; 3];
    let mut actions = [0usize; 5];
    let mut reward = 0.0;
    for e in &s.episodes {
        causes[e.cause as usize] += 1;
        for (a, n) in actions.iter_mut().zip(e.action_counts) {
            *a += n;
        }
        reward += e.total_reward;
    }
    println!("collision    {}", causes[0]);
    println!("exit         {}", causes[1]);
    println!("horizon      {}", causes[2]);
    println!("mean reward  {:.4}", reward / s.episodes.len().max(1) as f64);
    for (a, n) in Action::ALL.iter().zip(actions) {
        println!("action {:<6} {n}", a.name());
    }
    Ok(())
}
