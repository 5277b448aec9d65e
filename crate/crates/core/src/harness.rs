//! Experiment recipes, metric tables and trend checks.
//!
//! Every experiment turns an [`ExperimentConfig`] into a flat list of
//! [`MetricsRow`]s. The checks in [`check`] read only those rows, so a
//! table written by one run can be checked later without retraining.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baseline::{train_baseline, BaselineConfig, Ordering};
use crate::density::Scope;
use crate::em::{init_membership, run_em, EmConfig, InitConfig, InitMode, Membership};
use crate::error::{Result, SpareError};
use crate::relational::{Domain, Experience};
use crate::rule::{train_single, GreedyConfig, SpareModel};
use crate::seed::derive_seed;
use crate::sim::{blocks_domain, generate_dataset, pushed_stack, SceneConfig, StackMix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    RefAblation,
    DistractorSweep,
    SampleEfficiency,
    EmSeparation,
    OrderingStudy,
    InitTables,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Self::RefAblation,
        Self::DistractorSweep,
        Self::SampleEfficiency,
        Self::EmSeparation,
        Self::OrderingStudy,
        Self::InitTables,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RefAblation => "ref-ablation",
            Self::DistractorSweep => "distractor-sweep",
            Self::SampleEfficiency => "sample-efficiency",
            Self::EmSeparation => "em-separation",
            Self::OrderingStudy => "ordering-study",
            Self::InitTables => "init-tables",
        }
    }

    /// Acceptance criterion checked by [`check`].
    pub fn criterion(self) -> usize {
        match self {
            Self::RefAblation => 1,
            Self::DistractorSweep => 2,
            Self::SampleEfficiency => 3,
            Self::EmSeparation => 4,
            Self::InitTables => 5,
            Self::OrderingStudy => 6,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = SpareError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|e| e.name()).collect();
            SpareError::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Stack-height mixture of the generated data.
    pub mix: String,
    /// Extra blocks per scene; a sweep for distractor-sweep and
    /// ordering-study, a single value otherwise.
    pub extras: Vec<usize>,
    /// SPARE training-set sizes for sample-efficiency.
    pub train_sizes: Vec<usize>,
    /// Baseline training-set sizes for sample-efficiency.
    pub baseline_train_sizes: Vec<usize>,
    pub orderings: Vec<Ordering>,
    /// Initial membership of each sample in its own height's rule.
    pub target_membership: f64,
    pub init_modes: Vec<InitMode>,
    pub loglik_scales: Vec<f64>,
    pub scene: SceneConfig,
    /// Single-rule learning, used by every experiment except the EM ones.
    pub greedy: GreedyConfig,
    pub baseline: BaselineConfig,
    /// EM settings; its `greedy` block drives the seed rule and the
    /// per-rule shell searches.
    pub em: EmConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `experiment`.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = Self {
            experiment,
            seeds: vec![0, 1, 2],
            n_train: 1250,
            n_test: 250,
            mix: "3:1".into(),
            extras: vec![0],
            train_sizes: vec![],
            baseline_train_sizes: vec![],
            orderings: vec![],
            target_membership: 0.7,
            init_modes: vec![],
            loglik_scales: vec![],
            scene: SceneConfig::default(),
            greedy: GreedyConfig::default(),
            baseline: BaselineConfig::default(),
            em: EmConfig::default(),
        };
        match experiment {
            Experiment::RefAblation => c.greedy.continue_after_reject = true,
            Experiment::DistractorSweep => c.extras = vec![0, 2, 4, 6],
            Experiment::SampleEfficiency => {
                c.extras = vec![4];
                c.train_sizes = vec![100, 250, 500, 1000, 1250];
                c.baseline_train_sizes = vec![100, 250, 500, 1000, 1250, 5000];
            }
            Experiment::EmSeparation => {
                c.n_train = 1000;
                c.mix = "2:0.15,3:0.15,4:0.70".into();
            }
            Experiment::OrderingStudy => {
                c.extras = vec![0, 2, 4, 6];
                c.orderings = vec![Ordering::Random, Ordering::SortedByPose, Ordering::OracleStack];
            }
            Experiment::InitTables => {
                c.n_train = 1200;
                c.mix = "2:0.333333,3:0.333333,4:0.333334".into();
                c.init_modes = vec![InitMode::Discrete, InitMode::InvDist, InitMode::InvSqDist];
                c.loglik_scales = vec![1.0, 5.0];
            }
        }
        c
    }

    /// Defaults for `experiment`, then the TOML document `file` (if any),
    /// then `key.path=value` overrides in order.
    pub fn load(experiment: Experiment, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        if let Some(text) = file {
            let doc: toml::Table = text.parse().map_err(|e| SpareError::Config(format!("config file: {e}")))?;
            if let Some(name) = doc.get("experiment") {
                if name.as_str() != Some(experiment.name()) {
                    return Err(SpareError::Config(format!(
                        "config file is for experiment {name}, not `{experiment}`"
                    )));
                }
            }
        }
        let cfg = layered(&Self::defaults(experiment), file, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SpareError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(SpareError::Config("seeds must be nonempty".into()));
        }
        if self.n_train < 2 || self.n_test == 0 {
            return Err(SpareError::Config("need at least two training and one test sample".into()));
        }
        let mix = StackMix::parse(&self.mix)?;
        if self.extras.is_empty() {
            return Err(SpareError::Config("extras must be nonempty".into()));
        }
        self.scene.validate()?;
        self.greedy.train.validate()?;
        self.baseline.train.validate()?;
        self.em.validate()?;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(SpareError::Config(format!("{} needs {what}", self.experiment)))
            }
        };
        match self.experiment {
            Experiment::SampleEfficiency => {
                need(!self.train_sizes.is_empty() && !self.baseline_train_sizes.is_empty(), "training sizes")?;
                need(self.train_sizes.iter().chain(&self.baseline_train_sizes).all(|&n| n >= 2), "sizes of at least 2")
            }
            Experiment::OrderingStudy => need(!self.orderings.is_empty(), "orderings"),
            Experiment::EmSeparation | Experiment::InitTables => {
                need(mix.entries.len() == self.em.k, "one mix entry per EM rule")?;
                need(
                    self.experiment == Experiment::EmSeparation
                        || (!self.init_modes.is_empty() && !self.loglik_scales.is_empty()),
                    "init modes and loglik scales",
                )
            }
            _ => Ok(()),
        }
    }
}

/// `defaults`, then the TOML document `file` (if any), then `key.path=value`
/// overrides in order.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&str>, overrides: &[String]) -> Result<T> {
    let mut table =
        toml::Table::try_from(defaults).map_err(|e| SpareError::Config(format!("cannot encode defaults: {e}")))?;
    if let Some(text) = file {
        let doc: toml::Table = text.parse().map_err(|e| SpareError::Config(format!("config file: {e}")))?;
        merge(&mut table, doc);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| SpareError::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Apply `a.b.c=value`; the value is read as TOML and falls back to a
/// plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| SpareError::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| SpareError::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// One measured value. Log-likelihoods are per-sample means of summed
/// per-cell log-densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub seed: u64,
    /// Name of the swept quantity, e.g. `extras` or `iteration`.
    pub variable: String,
    pub x: f64,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

fn row(e: Experiment, seed: u64, variable: &str, x: f64, model: &str, metric: &str, value: f64) -> MetricsRow {
    MetricsRow {
        experiment: e.name().into(),
        seed,
        variable: variable.into(),
        x,
        model: model.into(),
        metric: metric.into(),
        value,
    }
}

pub const METRICS_FORMAT: &str = "spare-metrics";
pub const METRICS_VERSION: u32 = 1;
const CSV_BANNER: &str = "# spare-metrics v1; log-likelihoods are per-sample means of summed per-cell log-densities";

pub fn write_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{CSV_BANNER}")?;
    let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(&mut w);
    cw.write_record(["experiment", "seed", "variable", "x", "model", "metric", "value"])
        .map_err(csv_err)?;
    for r in rows {
        cw.serialize(r).map_err(csv_err)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    if first.trim_end() != CSV_BANNER {
        let v = first.strip_prefix("# spare-metrics v").unwrap_or("?");
        return Err(SpareError::Format(format!("not a version {METRICS_VERSION} metrics table (found `{v}`)")));
    }
    csv::Reader::from_reader(rest.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> SpareError {
    SpareError::Format(format!("metrics csv: {e}"))
}

#[derive(Serialize, Deserialize)]
struct MetricsJson {
    format: String,
    version: u32,
    rows: Vec<MetricsRow>,
}

pub fn to_json(rows: &[MetricsRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&MetricsJson {
        format: METRICS_FORMAT.into(),
        version: METRICS_VERSION,
        rows: rows.to_vec(),
    })?)
}

pub fn from_json(text: &str) -> Result<Vec<MetricsRow>> {
    let m: MetricsJson = serde_json::from_str(text)?;
    if m.format != METRICS_FORMAT || m.version != METRICS_VERSION {
        return Err(SpareError::Format(format!("unsupported metrics file {} v{}", m.format, m.version)));
    }
    Ok(m.rows)
}

/// Mean and sample standard deviation across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variable: String,
    pub x: f64,
    pub model: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut groups: Vec<(&MetricsRow, Vec<f64>)> = Vec::new();
    for r in rows {
        match groups
            .iter_mut()
            .find(|(g, _)| g.variable == r.variable && g.x == r.x && g.model == r.model && g.metric == r.metric)
        {
            Some((_, v)) => v.push(r.value),
            None => groups.push((r, vec![r.value])),
        }
    }
    groups
        .into_iter()
        .map(|(g, v)| {
            let (mean, std) = mean_std(&v);
            Summary {
                variable: g.variable.clone(),
                x: g.x,
                model: g.model.clone(),
                metric: g.metric.clone(),
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn data(domain: &Domain, cfg: &ExperimentConfig, extras: usize, count: usize, seed: u64, role: u64) -> Result<Vec<Experience>> {
    let scene = SceneConfig {
        extras,
        ..cfg.scene.clone()
    };
    let s = derive_seed(derive_seed(derive_seed(seed, 0xda7a), role), extras as u64);
    generate_dataset(domain, &scene, &StackMix::parse(&cfg.mix)?, count, s)
}

fn push_template(domain: &Domain) -> Result<usize> {
    domain
        .template_id(crate::sim::PUSH)
        .ok_or_else(|| SpareError::Domain("domain has no push template".into()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ll(model: &SpareModel, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<f64> {
    Ok(-model.loss(domain, exps, scope)?)
}

fn greedy_with_seed(g: &GreedyConfig, seed: u64) -> GreedyConfig {
    GreedyConfig {
        train: g.train.with_seed(seed),
        ..g.clone()
    }
}

fn baseline_with(b: &BaselineConfig, ordering: Ordering, seed: u64) -> BaselineConfig {
    BaselineConfig {
        ordering,
        train: b.train.with_seed(seed),
    }
}

fn ref_ablation(d: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let e = Experiment::RefAblation;
    let train = data(d, cfg, cfg.extras[0], cfg.n_train, seed, 0)?;
    let test = data(d, cfg, cfg.extras[0], cfg.n_test, seed, 1)?;
    let out = train_single(d, &train, push_template(d)?, &greedy_with_seed(&cfg.greedy, seed))?;
    let mut rows = Vec::new();
    for (k, step) in out.steps.iter().enumerate() {
        let x = k as f64;
        rows.push(row(e, seed, "refs", x, "spare", "val_nll", step.val_loss));
        rows.push(row(e, seed, "refs", x, "spare", "accepted", f64::from(u8::from(step.accepted))));
        let Some(rule) = &step.rule else { continue };
        let mut rules = vec![rule.clone()];
        if k > 0 {
            rules.push(out.empty_rule.clone());
        }
        let model = SpareModel {
            rules,
            default_variance: out.default_variance.clone(),
        };
        rows.push(row(e, seed, "refs", x, "spare", "test_nll", -ll(&model, d, &test, Scope::AllObjects)?));
        let sd = mean(&rule.v_default.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
        rows.push(row(e, seed, "refs", x, "spare", "default_std", sd));
    }
    Ok(rows)
}

fn distractor_sweep(d: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let e = Experiment::DistractorSweep;
    let template = push_template(d)?;
    let per: Vec<Vec<MetricsRow>> = cfg
        .extras
        .par_iter()
        .map(|&extras| {
            let train = data(d, cfg, extras, cfg.n_train, seed, 0)?;
            let test = data(d, cfg, extras, cfg.n_test, seed, 1)?;
            let x = extras as f64;
            let spare = train_single(d, &train, template, &greedy_with_seed(&cfg.greedy, seed))?.model();
            let bcfg = baseline_with(&cfg.baseline, cfg.baseline.ordering, seed);
            let base = train_baseline(d, &train, &bcfg)?;
            let bname = format!("baseline-{}", bcfg.ordering.name());
            Ok(vec![
                row(e, seed, "extras", x, "spare", "test_ll_stack", ll(&spare, d, &test, Scope::StackOnly)?),
                row(e, seed, "extras", x, "spare", "test_ll_all", ll(&spare, d, &test, Scope::AllObjects)?),
                row(e, seed, "extras", x, &bname, "test_ll_stack", base.evaluate(d, &test, Scope::StackOnly)?),
                row(e, seed, "extras", x, &bname, "test_ll_all", base.evaluate(d, &test, Scope::AllObjects)?),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

fn sample_efficiency(d: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let e = Experiment::SampleEfficiency;
    let template = push_template(d)?;
    let n_max = cfg.train_sizes.iter().chain(&cfg.baseline_train_sizes).copied().max().unwrap_or(0);
    let train = data(d, cfg, cfg.extras[0], n_max, seed, 0)?;
    let test = data(d, cfg, cfg.extras[0], cfg.n_test, seed, 1)?;
    let bcfg = baseline_with(&cfg.baseline, cfg.baseline.ordering, seed);
    let bname = format!("baseline-{}", bcfg.ordering.name());
    let jobs: Vec<(bool, usize)> = cfg
        .train_sizes
        .iter()
        .map(|&n| (true, n))
        .chain(cfg.baseline_train_sizes.iter().map(|&n| (false, n)))
        .collect();
    let per: Vec<Vec<MetricsRow>> = jobs
        .par_iter()
        .map(|&(spare, n)| {
            let x = n as f64;
            let sub = &train[..n];
            if spare {
                let m = train_single(d, sub, template, &greedy_with_seed(&cfg.greedy, seed))?.model();
                Ok(vec![
                    row(e, seed, "n_train", x, "spare", "test_ll_stack", ll(&m, d, &test, Scope::StackOnly)?),
                    row(e, seed, "n_train", x, "spare", "test_ll_all", ll(&m, d, &test, Scope::AllObjects)?),
                ])
            } else {
                let b = train_baseline(d, sub, &bcfg)?;
                Ok(vec![
                    row(e, seed, "n_train", x, &bname, "test_ll_stack", b.evaluate(d, &test, Scope::StackOnly)?),
                    row(e, seed, "n_train", x, &bname, "test_ll_all", b.evaluate(d, &test, Scope::AllObjects)?),
                ])
            }
        })
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

/// Index of each sample's pushed-stack height among the mix entries.
fn height_groups(d: &Domain, exps: &[Experience], mix: &StackMix) -> Result<Vec<usize>> {
    exps.iter()
        .map(|e| {
            let h = pushed_stack(d, e).len();
            mix.entries
                .iter()
                .position(|&(mh, _)| mh == h)
                .ok_or_else(|| SpareError::Dataset(format!("stack of height {h} is not in the mix")))
        })
        .collect()
}

fn em_separation(d: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let e = Experiment::EmSeparation;
    let mix = StackMix::parse(&cfg.mix)?;
    let train = data(d, cfg, cfg.extras[0], cfg.n_train, seed, 0)?;
    let groups = height_groups(d, &train, &mix)?;
    let z0 = Membership::from_labels(&groups, cfg.em.k, cfg.target_membership)?;
    let em = EmConfig {
        greedy: greedy_with_seed(&cfg.em.greedy, seed),
        ..cfg.em.clone()
    };
    let out = run_em(d, &train, push_template(d)?, &em, Some(z0), Some(&groups))?;
    let mut rows = Vec::new();
    for it in &out.trace {
        let x = it.iteration as f64;
        for (g, m) in it.target_membership.iter().enumerate() {
            let metric = format!("membership_h{}", mix.entries[g].0);
            rows.push(row(e, seed, "iteration", x, "em", &metric, *m));
        }
        for (j, w) in it.top_weights.iter().enumerate() {
            for (r, v) in w.iter().enumerate() {
                rows.push(row(e, seed, "iteration", x, "em", &format!("top_weight_r{j}_{r}"), *v));
            }
        }
    }
    Ok(rows)
}

fn ordering_study(d: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let e = Experiment::OrderingStudy;
    let jobs: Vec<(usize, Ordering)> = cfg
        .extras
        .iter()
        .flat_map(|&x| cfg.orderings.iter().map(move |&o| (x, o)))
        .collect();
    let per: Vec<Vec<MetricsRow>> = jobs
        .par_iter()
        .map(|&(extras, ordering)| {
            let train = data(d, cfg, extras, cfg.n_train, seed, 0)?;
            let test = data(d, cfg, extras, cfg.n_test, seed, 1)?;
            let b = train_baseline(d, &train, &baseline_with(&cfg.baseline, ordering, seed))?;
            let name = format!("baseline-{}", ordering.name());
            let x = extras as f64;
            Ok(vec![
                row(e, seed, "extras", x, &name, "test_ll_stack", b.evaluate(d, &test, Scope::StackOnly)?),
                row(e, seed, "extras", x, &name, "test_ll_all", b.evaluate(d, &test, Scope::AllObjects)?),
            ])
        })
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

fn init_tables(d: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let e = Experiment::InitTables;
    let mix = StackMix::parse(&cfg.mix)?;
    let train = data(d, cfg, cfg.extras[0], cfg.n_train, seed, 0)?;
    let groups = height_groups(d, &train, &mix)?;
    let seed_rule = train_single(d, &train, push_template(d)?, &greedy_with_seed(&cfg.em.greedy, seed))?;
    let mut rows = Vec::new();
    for &scale in &cfg.loglik_scales {
        for &mode in &cfg.init_modes {
            let ic = InitConfig {
                mode,
                loglik_scale: scale,
                ..cfg.em.init.clone()
            };
            // same k-means seed for every mode, so modes differ only in
            // how distances become memberships
            let (z, _) = init_membership(d, &train, &seed_rule, cfg.em.k, &ic, derive_seed(seed, 0x1417))?;
            let table = z.group_table(&groups, mix.entries.len());
            let model = format!("{}@{}", mode.name(), scale);
            for (c, col) in table.iter().enumerate() {
                for (g, v) in col.iter().enumerate() {
                    let metric = format!("cluster_{c}");
                    rows.push(row(e, seed, "stack_height", mix.entries[g].0 as f64, &model, &metric, *v));
                }
            }
        }
    }
    Ok(rows)
}

/// Run every seed of `cfg` on the blocks domain. Rows come back grouped by
/// seed in configuration order regardless of thread count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let d = blocks_domain();
    let f = match cfg.experiment {
        Experiment::RefAblation => ref_ablation,
        Experiment::DistractorSweep => distractor_sweep,
        Experiment::SampleEfficiency => sample_efficiency,
        Experiment::EmSeparation => em_separation,
        Experiment::OrderingStudy => ordering_study,
        Experiment::InitTables => init_tables,
    };
    let per: Vec<Vec<MetricsRow>> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            log::info!("{} seed {s}: start", cfg.experiment);
            let r = f(&d, cfg, s).map_err(|e| SpareError::Training(format!("{} seed {s}: {e}", cfg.experiment)));
            log::info!("{} seed {s}: done", cfg.experiment);
            r
        })
        .collect::<Result<_>>()?;
    let rows = per.concat();
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(SpareError::Training(format!(
            "{} seed {}: non-finite {} at {} = {}",
            r.experiment, r.seed, r.metric, r.variable, r.x
        )));
    }
    Ok(rows)
}

/// Outcome of one acceptance check.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub criterion: usize,
    pub experiment: Experiment,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "criterion {} [{}] {status}: {}", self.criterion, self.experiment, self.detail)
    }
}

/// `values[seed][x]` for one model and metric, seeds and `x` ascending.
fn series(rows: &[MetricsRow], model: &str, metric: &str) -> BTreeMap<u64, BTreeMap<i64, f64>> {
    let mut out: BTreeMap<u64, BTreeMap<i64, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.model == model && r.metric == metric) {
        out.entry(r.seed).or_default().insert(r.x.round() as i64, r.value);
    }
    out
}

fn seed_means(s: &BTreeMap<u64, BTreeMap<i64, f64>>) -> BTreeMap<i64, f64> {
    let mut acc: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for per in s.values() {
        for (&x, &v) in per {
            acc.entry(x).or_default().push(v);
        }
    }
    acc.into_iter().map(|(x, v)| (x, mean(&v))).collect()
}

fn missing(what: &str) -> SpareError {
    SpareError::Format(format!("metrics table has no {what}"))
}

/// Relative change tolerated between consecutive default deviations once
/// three references are in.
pub const LEVEL_OFF_TOL: f64 = 0.10;
/// Largest relative spread of SPARE's stack-only log-likelihood across the
/// distractor sweep.
pub const SPREAD_TOL: f64 = 0.10;
pub const MEMBERSHIP_TARGET: f64 = 0.85;
pub const DISCRETE_DIAGONAL_MIN: f64 = 0.70;

fn check_ref_ablation(rows: &[MetricsRow]) -> Result<(bool, String)> {
    let val = series(rows, "spare", "val_nll");
    let acc = series(rows, "spare", "accepted");
    let sd = series(rows, "spare", "default_std");
    if val.is_empty() {
        return Err(missing("val_nll rows"));
    }
    let mut ok_all = true;
    let mut notes = Vec::new();
    for (seed, v) in &val {
        let a = acc.get(seed).ok_or_else(|| missing("accepted rows"))?;
        let s = sd.get(seed).ok_or_else(|| missing("default_std rows"))?;
        let accepted: Vec<i64> = a.iter().filter(|(_, &f)| f > 0.5).map(|(&k, _)| k).collect();
        let n_refs = accepted.iter().copied().max().unwrap_or(0);
        let first_two = (1..=2).all(|k| {
            accepted.contains(&k) && matches!((v.get(&(k - 1)), v.get(&k)), (Some(p), Some(c)) if c < p)
        });
        let declines_fourth = n_refs < 4;
        let acc_sd: Vec<f64> = accepted.iter().filter_map(|k| s.get(k).copied()).collect();
        let non_increasing = acc_sd.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        let tail: Vec<f64> = s.range(3..).map(|(_, &v)| v).collect();
        let level = tail.windows(2).all(|w| (w[1] - w[0]).abs() <= LEVEL_OFF_TOL * w[0]);
        let ok = first_two && declines_fourth && non_increasing && level;
        ok_all &= ok;
        notes.push(format!(
            "seed {seed}: {n_refs} refs accepted, first two improve {first_two}, std non-increasing {non_increasing}, levels off {level}"
        ));
    }
    Ok((ok_all, notes.join("; ")))
}

fn check_distractor_sweep(rows: &[MetricsRow]) -> Result<(bool, String)> {
    let spare = series(rows, "spare", "test_ll_stack");
    let bname = rows
        .iter()
        .map(|r| r.model.as_str())
        .find(|m| m.starts_with("baseline"))
        .ok_or_else(|| missing("baseline rows"))?;
    let base = series(rows, bname, "test_ll_stack");
    let sm = seed_means(&spare);
    if sm.is_empty() {
        return Err(missing("SPARE rows"));
    }
    let vals: Vec<f64> = sm.values().copied().collect();
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (hi - lo) / mean(&vals).abs();
    let inversions: usize = base
        .values()
        .map(|per| {
            let v: Vec<f64> = per.values().copied().collect();
            v.windows(2).filter(|w| w[1] >= w[0]).count()
        })
        .sum();
    let ok = spread < SPREAD_TOL && inversions <= 1;
    Ok((
        ok,
        format!(
            "SPARE stack-only means {:?}, relative spread {spread:.4} (< {SPREAD_TOL}); baseline inversions {inversions} (<= 1), means {:?}",
            fmt_map(&sm),
            fmt_map(&seed_means(&base))
        ),
    ))
}

fn fmt_map(m: &BTreeMap<i64, f64>) -> Vec<String> {
    m.iter().map(|(x, v)| format!("{x}: {v:.3}")).collect()
}

fn check_sample_efficiency(rows: &[MetricsRow]) -> Result<(bool, String)> {
    let spare = series(rows, "spare", "test_ll_stack");
    let bname = rows
        .iter()
        .map(|r| r.model.as_str())
        .find(|m| m.starts_with("baseline"))
        .ok_or_else(|| missing("baseline rows"))?;
    let base = series(rows, bname, "test_ll_stack");
    let mut wins = 0;
    let mut notes = Vec::new();
    for (seed, s) in &spare {
        let sv = *s.get(&1000).ok_or_else(|| missing("SPARE row at 1000 samples"))?;
        let b = base.get(seed).ok_or_else(|| missing("baseline rows for every seed"))?;
        let (&bn, &bv) = b.iter().next_back().ok_or_else(|| missing("baseline rows"))?;
        if sv > bv {
            wins += 1;
        }
        notes.push(format!("seed {seed}: SPARE@1000 {sv:.3} vs baseline@{bn} {bv:.3}"));
    }
    let need = (2 * spare.len()).div_ceil(3);
    Ok((wins >= need, format!("{wins}/{} seeds win (need {need}); {}", spare.len(), notes.join("; "))))
}

fn check_em_separation(rows: &[MetricsRow]) -> Result<(bool, String)> {
    let mut metrics: Vec<&str> = rows
        .iter()
        .filter(|r| r.metric.starts_with("membership_h"))
        .map(|r| r.metric.as_str())
        .collect();
    metrics.sort_unstable();
    metrics.dedup();
    if metrics.is_empty() {
        return Err(missing("membership rows"));
    }
    let mut ok_all = true;
    let mut notes = Vec::new();
    for m in metrics {
        for (seed, per) in series(rows, "em", m) {
            let v = |i: i64| per.get(&i).copied();
            let rising = (1..=3).all(|i| matches!((v(i - 1), v(i)), (Some(a), Some(b)) if b > a));
            let end = v(10);
            let high = end.is_some_and(|x| x > MEMBERSHIP_TARGET);
            ok_all &= rising && high;
            notes.push(format!(
                "seed {seed} {}: {:.3} -> {:.3} -> {:.3} -> {:.3}, it10 {}",
                &m["membership_".len()..],
                v(0).unwrap_or(f64::NAN),
                v(1).unwrap_or(f64::NAN),
                v(2).unwrap_or(f64::NAN),
                v(3).unwrap_or(f64::NAN),
                end.map_or("missing".into(), |x| format!("{x:.3}"))
            ));
        }
    }
    Ok((ok_all, notes.join("; ")))
}

/// `table[c][g]` for every seed of one init model.
fn init_tables_for(rows: &[MetricsRow], model: &str) -> BTreeMap<u64, Vec<Vec<f64>>> {
    let mut heights: Vec<i64> = rows.iter().map(|r| r.x.round() as i64).collect();
    heights.sort_unstable();
    heights.dedup();
    let mut out: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.model == model) {
        let Some(c) = r.metric.strip_prefix("cluster_").and_then(|c| c.parse::<usize>().ok()) else {
            continue;
        };
        let g = heights.binary_search(&(r.x.round() as i64)).expect("height listed");
        let t = out.entry(r.seed).or_default();
        if t.len() <= c {
            t.resize(c + 1, vec![0.0; heights.len()]);
        }
        t[c][g] = r.value;
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Per-group proportion in the cluster matched to that group, under the
/// cluster relabelling with the largest total.
pub fn matched_diagonal(table: &[Vec<f64>]) -> Vec<f64> {
    let n = table.len();
    let perm = permutations(n)
        .into_iter()
        .map(|p| {
            let s: f64 = p.iter().enumerate().map(|(g, &c)| table[c][g]).sum();
            (s, p)
        })
        .fold(None::<(f64, Vec<usize>)>, |best, cand| match best {
            Some(b) if b.0 >= cand.0 => Some(b),
            _ => Some(cand),
        })
        .map(|b| b.1)
        .unwrap_or_default();
    perm.iter().enumerate().map(|(g, &c)| table[c][g]).collect()
}

fn check_init_tables(rows: &[MetricsRow]) -> Result<(bool, String)> {
    let diag = |model: &str| -> Result<BTreeMap<u64, Vec<f64>>> {
        let t = init_tables_for(rows, model);
        if t.is_empty() {
            return Err(missing(&format!("{model} rows")));
        }
        Ok(t.into_iter().map(|(s, t)| (s, matched_diagonal(&t))).collect())
    };
    let discrete = diag("discrete@1")?;
    let inv = diag("inv-dist@1")?;
    let inv_sq = diag("inv-sq-dist@1")?;
    let inv_sq5 = diag("inv-sq-dist@5")?;
    let n_seeds = discrete.len();
    let need = (2 * n_seeds).div_ceil(3);
    let mut disc_mean = vec![0.0; discrete.values().next().map_or(0, Vec::len)];
    for d in discrete.values() {
        for (m, v) in disc_mean.iter_mut().zip(d) {
            *m += v / n_seeds as f64;
        }
    }
    let disc_ok = disc_mean.iter().all(|&v| v >= DISCRETE_DIAGONAL_MIN);
    let beats = |a: &BTreeMap<u64, Vec<f64>>, b: &BTreeMap<u64, Vec<f64>>| {
        a.iter()
            .filter(|(s, da)| b.get(s).is_some_and(|db| da.iter().zip(db).all(|(x, y)| x > y)))
            .count()
    };
    let sq_wins = beats(&inv_sq, &inv);
    let scale_wins = beats(&inv_sq5, &inv_sq);
    let ok = disc_ok && sq_wins >= need && scale_wins >= need;
    let f = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    Ok((
        ok,
        format!(
            "discrete mean diagonal {} (>= {DISCRETE_DIAGONAL_MIN}); inv-sq beats inv on {sq_wins} seeds, scale 5 beats 1 on {scale_wins} seeds (need {need})",
            f(&disc_mean)
        ),
    ))
}

fn check_ordering_study(rows: &[MetricsRow]) -> Result<(bool, String)> {
    let m = |o: Ordering| seed_means(&series(rows, &format!("baseline-{}", o.name()), "test_ll_stack"));
    let (r, s, o) = (m(Ordering::Random), m(Ordering::SortedByPose), m(Ordering::OracleStack));
    if r.is_empty() || s.is_empty() || o.is_empty() {
        return Err(missing("rows for all three orderings"));
    }
    let mut ok = true;
    let mut notes = Vec::new();
    for (&x, &ov) in o.range(2..) {
        let (sv, rv) = (s.get(&x).copied(), r.get(&x).copied());
        let (Some(sv), Some(rv)) = (sv, rv) else {
            return Err(missing(&format!("all orderings at {x} extras")));
        };
        let good = ov >= sv && sv >= rv;
        ok &= good;
        notes.push(format!("{x} extras: stack {ov:.3}, xtheny {sv:.3}, none {rv:.3}"));
    }
    if notes.is_empty() {
        return Err(missing("rows with two or more extras"));
    }
    Ok((ok, notes.join("; ")))
}

/// Check the acceptance trend for `experiment` on its metrics rows.
pub fn check(experiment: Experiment, rows: &[MetricsRow]) -> Result<Verdict> {
    let rows: Vec<MetricsRow> = rows.iter().filter(|r| r.experiment == experiment.name()).cloned().collect();
    let (passed, detail) = match experiment {
        Experiment::RefAblation => check_ref_ablation(&rows),
        Experiment::DistractorSweep => check_distractor_sweep(&rows),
        Experiment::SampleEfficiency => check_sample_efficiency(&rows),
        Experiment::EmSeparation => check_em_separation(&rows),
        Experiment::OrderingStudy => check_ordering_study(&rows),
        Experiment::InitTables => check_init_tables(&rows),
    }?;
    Ok(Verdict {
        criterion: experiment.criterion(),
        experiment,
        passed,
        detail,
    })
}
