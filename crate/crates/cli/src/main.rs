//! `spare-lab`: data generation, training, evaluation and experiments for
//! sparse relational transition models on the blocks domain.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spare_core::baseline::{train_baseline, BaselineConfig, Ordering};
use spare_core::density::Scope;
use spare_core::em::{run_em, EmConfig, EmOutcome, InitMode, Membership};
use spare_core::harness::{self, Experiment, ExperimentConfig};
use spare_core::modelfile::{MixtureModel, ModelBody, ModelFile};
use spare_core::relational::{Domain, Experience};
use spare_core::rule::{train_single, GreedyConfig};
use spare_core::sim::{blocks_domain, generate_dataset, pushed_stack, SceneConfig, StackMix};
use spare_core::dataset;

#[derive(Parser)]
#[command(name = "spare-lab", version, about = "Sparse relational transition models on a blocks-pushing domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Layered configuration shared by the training commands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn file(&self) -> Result<Option<String>> {
        self.config
            .as_ref()
            .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
            .transpose()
    }

    fn layered<T: serde::Serialize + serde::de::DeserializeOwned>(&self, defaults: &T) -> Result<T> {
        Ok(harness::layered(defaults, self.file()?.as_deref(), &self.set)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an experience file.
    GenData {
        #[arg(long, default_value_t = 3)]
        stack_height: usize,
        #[arg(long, default_value_t = 0)]
        extras: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stack-height mixture such as `2:0.15,3:0.15,4:0.70`; overrides
        /// `--stack-height`.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Learn a single rule by greedy reference selection.
    TrainSingle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "push")]
        template: String,
        #[arg(long)]
        max_refs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Learn a mixture of rules with EM.
    TrainEm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "push")]
        template: String,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        init: Option<InitArg>,
        #[arg(long)]
        loglik_scale: Option<f64>,
        /// Initialize memberships from stack heights with this probability
        /// on each sample's own height instead of clustering.
        #[arg(long)]
        label_init: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration membership trace (CSV).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the monolithic baseline.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        /// Object ordering: none, xtheny or stack.
        #[arg(long, default_value = "xtheny")]
        ordering: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mean test log-likelihood of a model on an experience file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ScopeArg::StackOnly)]
        scope: ScopeArg,
    },
    /// Run or check one of the packaged experiments.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    /// Run an experiment and write its metrics table.
    Run {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Exit nonzero when the acceptance trend does not hold.
        #[arg(long)]
        check: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check the acceptance trend, on a saved table or a fresh run.
    Check {
        name: String,
        /// Metrics CSV written by `experiment run`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the default configuration.
    Defaults { name: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    StackOnly,
    AllObjects,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::StackOnly => Scope::StackOnly,
            ScopeArg::AllObjects => Scope::AllObjects,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Discrete,
    InvDist,
    InvSqDist,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Discrete => InitMode::Discrete,
            InitArg::InvDist => InitMode::InvDist,
            InitArg::InvSqDist => InitMode::InvSqDist,
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SPARE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("SPARE_LAB_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    log::debug!("worker threads capped at {n}");
    Ok(())
}

fn load_data(path: &Path, domain: &Domain) -> Result<Vec<Experience>> {
    let exps = dataset::load(path, domain).with_context(|| format!("loading {}", path.display()))?;
    if exps.is_empty() {
        bail!("{} holds no experiences", path.display());
    }
    Ok(exps)
}

fn template_id(domain: &Domain, name: &str) -> Result<usize> {
    domain
        .template_id(name)
        .with_context(|| format!("unknown action template `{name}`"))
}

fn save_model(path: &Path, domain: &Domain, seed: u64, body: ModelBody) -> Result<()> {
    ModelFile::new(domain, seed, body)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Index of each sample's pushed-stack height among the distinct heights,
/// plus those heights ascending.
fn height_groups(domain: &Domain, exps: &[Experience]) -> (Vec<usize>, Vec<usize>) {
    let heights: Vec<usize> = exps.iter().map(|e| pushed_stack(domain, e).len()).collect();
    let mut distinct = heights.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let groups = heights
        .iter()
        .map(|h| distinct.binary_search(h).expect("listed"))
        .collect();
    (groups, distinct)
}

fn write_trace(path: &Path, out: &EmOutcome, heights: &[usize]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# spare-em-trace v1")?;
    writeln!(w, "iteration,rule,top_weights,stack_height,membership")?;
    for it in &out.trace {
        for (j, table) in it.group_table.iter().enumerate() {
            let weights: Vec<String> = it.top_weights[j].iter().map(|v| v.to_string()).collect();
            for (g, m) in table.iter().enumerate() {
                writeln!(w, "{},{j},{},{},{m}", it.iteration, weights.join(";"), heights[g])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn print_summary(rows: &[harness::MetricsRow]) {
    println!("{:<14} {:>8}  {:<26} {:<18} {:>12} {:>10}", "variable", "x", "model", "metric", "mean", "std");
    for s in harness::summarize(rows) {
        println!(
            "{:<14} {:>8}  {:<26} {:<18} {:>12.4} {:>10.4}",
            s.variable, s.x, s.model, s.metric, s.mean, s.std
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let domain = blocks_domain();
    match cli.command {
        Command::GenData {
            stack_height,
            extras,
            count,
            seed,
            mix,
            out,
            cfg,
        } => {
            let scene = cfg.layered(&SceneConfig {
                stack_height,
                extras,
                ..SceneConfig::default()
            })?;
            scene.validate()?;
            let mix = match mix {
                Some(m) => StackMix::parse(&m)?,
                None => StackMix::single(scene.stack_height),
            };
            let exps = generate_dataset(&domain, &scene, &mix, count, seed)?;
            dataset::save(&out, &domain, &exps).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {} experiences to {}", exps.len(), out.display());
        }
        Command::TrainSingle {
            data,
            template,
            max_refs,
            seed,
            out,
            cfg,
        } => {
            let exps = load_data(&data, &domain)?;
            let mut g: GreedyConfig = cfg.layered(&GreedyConfig::default())?;
            if let Some(n) = max_refs {
                g.max_refs = n;
            }
            g.train.seed = seed;
            let outcome = train_single(&domain, &exps, template_id(&domain, &template)?, &g)?;
            for s in &outcome.steps {
                println!(
                    "{:<50} val_nll {:>10.4} {}",
                    s.shell.display(&domain).to_string(),
                    s.val_loss,
                    if s.accepted { "accepted" } else { "rejected" }
                );
            }
            println!("selected {}", outcome.gamma.display(&domain));
            save_model(&out, &domain, seed, ModelBody::single(&outcome))?;
        }
        Command::TrainEm {
            data,
            template,
            k,
            kappa,
            iters,
            init,
            loglik_scale,
            label_init,
            seed,
            out,
            trace,
            cfg,
        } => {
            let exps = load_data(&data, &domain)?;
            let mut em: EmConfig = cfg.layered(&EmConfig::default())?;
            if let Some(v) = k {
                em.k = v;
            }
            if let Some(v) = kappa {
                em.kappa = v;
            }
            if let Some(v) = iters {
                em.iters = v;
            }
            if let Some(v) = init {
                em.init.mode = v.into();
            }
            if let Some(v) = loglik_scale {
                em.init.loglik_scale = v;
            }
            em.greedy.train.seed = seed;
            let (groups, heights) = height_groups(&domain, &exps);
            let z0 = match label_init {
                Some(p) => {
                    if heights.len() != em.k {
                        bail!("--label-init needs one stack height per rule: {} heights, K = {}", heights.len(), em.k);
                    }
                    Some(Membership::from_labels(&groups, em.k, p)?)
                }
                None => None,
            };
            let outcome = run_em(&domain, &exps, template_id(&domain, &template)?, &em, z0, Some(&groups))?;
            for (j, r) in outcome.rules.iter().enumerate() {
                let top: Vec<String> = r
                    .phi
                    .iter()
                    .map(|(s, _)| format!("{} ({:.3})", r.pi.shells[*s].display(&domain), r.pi.weights[*s]))
                    .collect();
                println!("rule {j}: {}", top.join(", "));
            }
            if let Some(t) = trace {
                write_trace(&t, &outcome, &heights).with_context(|| format!("writing {}", t.display()))?;
            }
            save_model(&out, &domain, seed, ModelBody::Mixture(MixtureModel::from_outcome(&outcome)))?;
        }
        Command::TrainBaseline {
            data,
            ordering,
            seed,
            out,
            cfg,
        } => {
            let exps = load_data(&data, &domain)?;
            let mut b: BaselineConfig = cfg.layered(&BaselineConfig::default())?;
            b.ordering = ordering.parse::<Ordering>()?;
            b.train.seed = seed;
            let model = train_baseline(&domain, &exps, &b)?;
            save_model(&out, &domain, seed, ModelBody::Baseline(model))?;
        }
        Command::Eval { model, data, scope } => {
            let f = ModelFile::load(&model, &domain).with_context(|| format!("loading {}", model.display()))?;
            let exps = load_data(&data, &domain)?;
            let ll = f.model.log_densities(&domain, &exps, scope.into())?;
            let mean = ll.iter().sum::<f64>() / ll.len() as f64;
            println!("{} model, {} samples, mean log-likelihood {mean:.6}", f.model.kind(), ll.len());
        }
        Command::Experiment { action } => return experiment(action),
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment(action: ExperimentAction) -> Result<ExitCode> {
    match action {
        ExperimentAction::Run {
            name,
            out,
            json,
            check,
            cfg,
        } => {
            let e: Experiment = name.parse()?;
            let c = ExperimentConfig::load(e, cfg.file()?.as_deref(), &cfg.set)?;
            let rows = harness::run_experiment(&c)?;
            if let Some(p) = &out {
                let f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
                harness::write_csv(std::io::BufWriter::new(f), &rows)?;
            }
            if let Some(p) = &json {
                fs::write(p, harness::to_json(&rows)?).with_context(|| format!("writing {}", p.display()))?;
            }
            print_summary(&rows);
            if check {
                let v = harness::check(e, &rows)?;
                println!("{v}");
                if !v.passed {
                    return Ok(ExitCode::from(2));
                }
            }
        }
        ExperimentAction::Check { name, metrics, cfg } => {
            let e: Experiment = name.parse()?;
            let rows = match metrics {
                Some(p) => harness::read_csv(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => harness::run_experiment(&ExperimentConfig::load(e, cfg.file()?.as_deref(), &cfg.set)?)?,
            };
            let v = harness::check(e, &rows)?;
            println!("{v}");
            if !v.passed {
                return Ok(ExitCode::from(2));
            }
        }
        ExperimentAction::Defaults { name } => {
            let e: Experiment = name.parse()?;
            print!("{}", ExperimentConfig::defaults(e).to_toml()?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
