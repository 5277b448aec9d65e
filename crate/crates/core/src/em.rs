//! Learning several rules per template with an EM-style loop.
//!
//! Every rule carries a distribution over shells (candidate reference
//! lists) and trained predictors for its `kappa` heaviest shells. Samples
//! hold soft memberships over rules; the loop alternates between refitting
//! each rule on its weighted samples and rescaling memberships by how well
//! each rule explains each sample.

use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{log_sum_exp, Scope, StateDistribution};
use crate::error::{Result, SpareError};
use crate::kmeans::{kmeans, sq_distances};
use crate::relational::{
    build_prefix, extract_input_padded, extract_output_padded, Domain, Experience, ReferenceList,
};
use crate::rule::{
    fit_default_variance, greedy_select, learn_dist, shell_seed, train_single, GreedyConfig, GreedyOutcome,
    ShellRecord, TransitionRule,
};
use crate::seed::derive_seed;

const ROW_TOL: f64 = 1e-9;

/// How k-means distances become initial memberships.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// One-hot on the nearest center.
    Discrete,
    /// Proportional to `1 / d`.
    InvDist,
    /// Proportional to `1 / d^2`.
    InvSqDist,
}

impl FromStr for InitMode {
    type Err = SpareError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Self::Discrete),
            "inv-dist" => Ok(Self::InvDist),
            "inv-sq-dist" => Ok(Self::InvSqDist),
            _ => Err(SpareError::Config(format!(
                "unknown init mode {s:?} (expected discrete, inv-dist or inv-sq-dist)"
            ))),
        }
    }
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Discrete => "discrete",
            Self::InvDist => "inv-dist",
            Self::InvSqDist => "inv-sq-dist",
        }
    }
}

/// Soft assignment of samples to rules; rows sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Membership {
    z: Array2<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Membership {
    type Error = SpareError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let z = Array2::from_shape_vec((n, k), rows.concat())
            .map_err(|_| SpareError::Format("membership rows differ in length".into()))?;
        Self::new(z)
    }
}

impl From<Membership> for Vec<Vec<f64>> {
    fn from(m: Membership) -> Self {
        m.z.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

impl Membership {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.ncols() == 0 {
            return Err(SpareError::Config("membership needs at least one rule".into()));
        }
        for (i, row) in z.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(SpareError::Domain(format!("membership row {i} has a negative or non-finite entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(SpareError::Domain(format!("membership row {i} sums to {s}")));
            }
        }
        Ok(Self { z })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            z: Array2::from_elem((n, k), 1.0 / k as f64),
        }
    }

    /// `p` on each sample's labelled rule, the rest spread evenly.
    pub fn from_labels(labels: &[usize], k: usize, p: f64) -> Result<Self> {
        if k == 1 {
            return Ok(Self::uniform(labels.len(), 1));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(SpareError::Config(format!("label probability {p} outside [0, 1]")));
        }
        let rest = (1.0 - p) / (k - 1) as f64;
        let mut z = Array2::from_elem((labels.len(), k), rest);
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(SpareError::Config(format!("label {l} out of range for {k} rules")));
            }
            z[[i, l]] = p;
        }
        Self::new(z)
    }

    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_rules(&self) -> usize {
        self.z.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.z.column(j).to_vec()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.z[[i, j]]
    }

    /// Mean membership in rule `groups[i]` over the samples of each group.
    pub fn target_means(&self, groups: &[usize]) -> Vec<f64> {
        let k = self.n_rules();
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (i, &g) in groups.iter().enumerate() {
            if g < k {
                sum[g] += self.z[[i, g]];
                count[g] += 1;
            }
        }
        sum.iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect()
    }

    /// `table[j][g]`: mean membership in rule `j` of the samples in group `g`.
    pub fn group_table(&self, groups: &[usize], n_groups: usize) -> Vec<Vec<f64>> {
        let k = self.n_rules();
        let mut t = vec![vec![0.0; n_groups]; k];
        let mut count = vec![0usize; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            count[g] += 1;
            for (j, row) in t.iter_mut().enumerate() {
                row[g] += self.z[[i, j]];
            }
        }
        for row in &mut t {
            for (v, &c) in row.iter_mut().zip(&count) {
                if c > 0 {
                    *v /= c as f64;
                }
            }
        }
        t
    }
}

/// Memberships from sample-to-center distances (not squared).
pub fn memberships_from_distances(dist: &Array2<f64>, mode: InitMode) -> Membership {
    let (n, k) = dist.dim();
    let mut z = Array2::zeros((n, k));
    for i in 0..n {
        let row = dist.row(i);
        let mut nearest = 0;
        for j in 1..k {
            if row[j] < row[nearest] {
                nearest = j;
            }
        }
        if mode == InitMode::Discrete || row[nearest] == 0.0 {
            z[[i, nearest]] = 1.0;
            continue;
        }
        let pow = if mode == InitMode::InvDist { 1 } else { 2 };
        let inv: Vec<f64> = row.iter().map(|d| d.powi(-pow)).collect();
        let total: f64 = inv.iter().sum();
        for j in 0..k {
            z[[i, j]] = inv[j] / total;
        }
    }
    Membership { z }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub mode: InitMode,
    /// Multiplier on the standardized per-sample loss feature.
    pub loglik_scale: f64,
    pub kmeans_iters: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mode: InitMode::InvSqDist,
            loglik_scale: 1.0,
            kmeans_iters: 100,
        }
    }
}

/// Per-sample clustering features `[x | y | loss]` under the seed rule,
/// z-scored column-wise, with the loss column then scaled by `loglik_scale`.
/// Samples where the seed rule resolves only partially are zero-padded.
pub fn clustering_features(
    domain: &Domain,
    exps: &[Experience],
    seed: &GreedyOutcome,
    loglik_scale: f64,
) -> Result<Array2<f64>> {
    let gamma = &seed.gamma;
    let losses = seed.model().log_densities(domain, exps, Scope::AllObjects)?;
    let mut rows = Vec::with_capacity(exps.len());
    for (e, ll) in exps.iter().zip(&losses) {
        let n_slots = e.action.targets.len() + gamma.len();
        let lists = build_prefix(domain, gamma, &e.action.targets, &e.state);
        let mut r = extract_input_padded(domain, &lists, n_slots, &e.state, &e.action);
        r.extend(extract_output_padded(&lists, n_slots, &e.next_state));
        r.push(-ll);
        rows.push(r);
    }
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(SpareError::Dataset("clustering features need one action dimension and arity".into()));
    }
    let mut f = Array2::from_shape_vec((rows.len(), dim), rows.concat())
        .map_err(|_| SpareError::Dataset("no samples to cluster".into()))?;
    for mut col in f.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    if dim > 0 {
        f.column_mut(dim - 1).mapv_inplace(|v| v * loglik_scale);
    }
    Ok(f)
}

/// Initial memberships from k-means on [`clustering_features`]. Returns
/// the memberships and the hard cluster of each sample.
pub fn init_membership(
    domain: &Domain,
    exps: &[Experience],
    seed: &GreedyOutcome,
    k: usize,
    cfg: &InitConfig,
    rng_seed: u64,
) -> Result<(Membership, Vec<usize>)> {
    let f = clustering_features(domain, exps, seed, cfg.loglik_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let km = kmeans(&f, k, cfg.kmeans_iters, &mut rng)?;
    let dist = sq_distances(&f, &km.centers).mapv(f64::sqrt);
    Ok((memberships_from_distances(&dist, cfg.mode), km.assignments))
}

/// Number of distinct shells with at most `max_refs` steps, counting the
/// lists [`crate::rule::candidate_steps`] can grow.
pub fn count_shells(domain: &Domain, n_targets: usize, max_refs: usize) -> f64 {
    let mut total = 1.0;
    let mut level = 1.0;
    for t in 1..=max_refs {
        let slots = (n_targets + t - 1) as i32;
        let options: f64 = domain
            .references()
            .iter()
            .map(|r| (slots as f64).powi(r.arity() as i32))
            .sum::<f64>()
            - (t - 1) as f64;
        level *= options.max(0.0);
        total += level;
    }
    total
}

/// Distribution over shells: explored shells carry `1 - epsilon` in
/// proportion to `exp(-loss)`; the rest is spread over unexplored shells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellDistribution {
    pub shells: Vec<ReferenceList>,
    pub weights: Vec<f64>,
    /// Mass shared by the unexplored shells.
    pub epsilon: f64,
    pub unexplored: f64,
}

impl ShellDistribution {
    /// Build from explored shells. Repeated shells keep their first loss.
    pub fn from_losses(records: &[ShellRecord], epsilon: f64, total_shells: f64) -> Result<Self> {
        let mut shells: Vec<ReferenceList> = Vec::new();
        let mut losses = Vec::new();
        for r in records {
            if !shells.contains(&r.shell) {
                shells.push(r.shell.clone());
                losses.push(r.val_loss);
            }
        }
        if shells.is_empty() {
            return Err(SpareError::Domain("shell distribution needs an explored shell".into()));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(SpareError::Config(format!("epsilon {epsilon} outside [0, 1)")));
        }
        let unexplored = (total_shells - shells.len() as f64).max(0.0);
        let epsilon = if unexplored > 0.0 { epsilon } else { 0.0 };
        let logits: Vec<f64> = losses.iter().map(|l| -l).collect();
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(SpareError::NonFinite("shell losses"));
        }
        let weights = logits.iter().map(|l| (1.0 - epsilon) * (l - lse).exp()).collect();
        Ok(Self {
            shells,
            weights,
            epsilon,
            unexplored,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.epsilon
    }

    /// Weight of one unexplored shell.
    pub fn unexplored_weight(&self) -> f64 {
        if self.unexplored > 0.0 {
            self.epsilon / self.unexplored
        } else {
            0.0
        }
    }

    /// Indices of the `kappa` heaviest explored shells, heaviest first;
    /// ties keep exploration order.
    pub fn top(&self, kappa: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.shells.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        idx.truncate(kappa);
        idx
    }
}

/// Redistribute the mass of the shells in `top` in proportion to `votes`.
/// All-zero votes leave the weights untouched.
pub fn reweight_by_votes(weights: &mut [f64], top: &[usize], votes: &[f64]) {
    let total_votes: f64 = votes.iter().sum();
    if !(total_votes > 0.0) {
        return;
    }
    let mass: f64 = top.iter().map(|&k| weights[k]).sum();
    for (&k, v) in top.iter().zip(votes) {
        weights[k] = mass * v / total_votes;
    }
}

/// A rule with a distribution over shells and predictors for the heaviest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRule {
    pub template: usize,
    pub pi: ShellDistribution,
    /// Trained predictors for `pi.top(kappa)`, in that order. `None` for a
    /// shell that applied to fewer than two weighted samples.
    pub phi: Vec<(usize, Option<TransitionRule>)>,
}

impl MixtureRule {
    /// Top-shell weights renormalized over `phi`.
    pub fn phi_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = self.phi.iter().map(|(k, _)| self.pi.weights[*k]).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / w.len() as f64; w.len()]
        }
    }

    /// Per-sample log-likelihood: the weighted mixture of the top shells'
    /// densities, where an inapplicable shell contributes the centered
    /// default Gaussian.
    pub fn log_densities(&self, domain: &Domain, exps: &[Experience], default_variance: &[f64]) -> Result<Vec<f64>> {
        let fallback: Vec<f64> = exps
            .iter()
            .map(|e| StateDistribution::fallback(&e.state, default_variance).log_density(&e.next_state, None))
            .collect::<Result<_>>()?;
        let per_shell: Vec<Vec<f64>> = self
            .phi
            .iter()
            .map(|(_, r)| match r {
                Some(r) => Ok(r
                    .log_densities(domain, exps, Scope::AllObjects)?
                    .into_iter()
                    .zip(&fallback)
                    .map(|(l, f)| l.unwrap_or(*f))
                    .collect()),
                None => Ok(fallback.clone()),
            })
            .collect::<Result<_>>()?;
        let w = self.phi_weights();
        Ok((0..exps.len())
            .map(|i| {
                let terms: Vec<f64> = w.iter().zip(&per_shell).map(|(w, l)| w.ln() + l[i]).collect();
                log_sum_exp(&terms)
            })
            .collect())
    }
}

/// Rescale memberships by per-rule log-likelihoods, `loglik[(i, j)]`, and
/// renormalize rows. A row whose likelihoods all vanish resets to uniform.
pub fn e_step(z: &Membership, loglik: &Array2<f64>) -> Result<Membership> {
    if loglik.dim() != z.z.dim() {
        return Err(SpareError::Dimension {
            expected: z.z.len(),
            got: loglik.len(),
            context: "per-rule log-likelihoods",
        });
    }
    let k = z.n_rules();
    let mut out = Array2::zeros(z.z.raw_dim());
    for i in 0..z.n_samples() {
        let logs: Vec<f64> = (0..k).map(|j| z.z[[i, j]].ln() + loglik[[i, j]]).collect();
        let norm = log_sum_exp(&logs);
        if !norm.is_finite() {
            log::warn!("sample {i}: every rule has zero likelihood, resetting its membership to uniform");
            out.row_mut(i).fill(1.0 / k as f64);
            continue;
        }
        for j in 0..k {
            out[[i, j]] = (logs[j] - norm).exp();
        }
        let s = out.row(i).sum();
        out.row_mut(i).mapv_inplace(|v| v / s);
    }
    Membership::new(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub kappa: usize,
    pub iters: usize,
    pub epsilon: f64,
    pub init: InitConfig,
    /// Stop early once no membership moves by more than this.
    pub z_change_tol: Option<f64>,
    pub greedy: GreedyConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            kappa: 3,
            iters: 10,
            epsilon: 0.05,
            init: InitConfig::default(),
            z_change_tol: None,
            greedy: GreedyConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.kappa == 0 {
            return Err(SpareError::Config("k and kappa must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(SpareError::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        self.greedy.train.validate()
    }
}

/// State after one EM iteration (iteration 0 is the initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    /// Per rule: weights of its top shells, heaviest first.
    pub top_weights: Vec<Vec<f64>>,
    /// Per group: mean membership in that group's rule.
    pub target_membership: Vec<f64>,
    /// `[j][g]`: mean membership in rule `j` over group `g`.
    pub group_table: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOutcome {
    pub rules: Vec<MixtureRule>,
    pub membership: Membership,
    pub default_variance: Vec<f64>,
    pub trace: Vec<EmIteration>,
}

struct EmContext<'a> {
    domain: &'a Domain,
    exps: &'a [Experience],
    template: usize,
    cfg: &'a EmConfig,
}

impl EmContext<'_> {
    fn fit(&self, shell: &ReferenceList, weights: &[f64], seed: u64) -> Result<Option<TransitionRule>> {
        let tc = self.cfg.greedy.train.with_seed(shell_seed(seed, shell));
        learn_dist(self.domain, self.exps, weights, self.template, shell, shell, &tc)
    }

    fn init_rule(&self, j: usize, weights: &[f64]) -> Result<MixtureRule> {
        let mut g = self.cfg.greedy.clone();
        g.train.seed = derive_seed(self.cfg.greedy.train.seed, 1 + j as u64);
        let out = greedy_select(self.domain, self.exps, weights, self.template, &g)?;
        let n_targets = self.domain.template(self.template)?.arity;
        let total = count_shells(self.domain, n_targets, g.max_refs);
        let pi = ShellDistribution::from_losses(&out.explored, self.cfg.epsilon, total)?;
        Ok(MixtureRule {
            template: self.template,
            pi,
            phi: Vec::new(),
        })
    }

    /// Refit the top shells, let samples vote, reweight, and fit any shell
    /// that entered the top set.
    fn m_step(&self, rule: &mut MixtureRule, weights: &[f64], seed: u64) -> Result<()> {
        let top = rule.pi.top(self.cfg.kappa);
        let fitted: Vec<Option<TransitionRule>> = top
            .iter()
            .map(|&k| self.fit(&rule.pi.shells[k], weights, seed))
            .collect::<Result<_>>()?;
        let mut votes = vec![0.0; top.len()];
        let per_shell: Vec<Vec<Option<f64>>> = fitted
            .iter()
            .map(|r| match r {
                Some(r) => r.log_densities(self.domain, self.exps, Scope::AllObjects),
                None => Ok(vec![None; self.exps.len()]),
            })
            .collect::<Result<_>>()?;
        for (i, &w) in weights.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (k, lls) in per_shell.iter().enumerate() {
                if let Some(ll) = lls[i] {
                    if best.is_none_or(|(_, b)| ll > b) {
                        best = Some((k, ll));
                    }
                }
            }
            if let Some((k, _)) = best {
                votes[k] += w;
            }
        }
        reweight_by_votes(&mut rule.pi.weights, &top, &votes);
        let new_top = rule.pi.top(self.cfg.kappa);
        let mut phi = Vec::with_capacity(new_top.len());
        for &k in &new_top {
            let r = match top.iter().position(|&t| t == k) {
                Some(pos) => fitted[pos].clone(),
                None => self.fit(&rule.pi.shells[k], weights, seed)?,
            };
            phi.push((k, r));
        }
        rule.phi = phi;
        Ok(())
    }
}

fn snapshot(iteration: usize, rules: &[MixtureRule], z: &Membership, groups: Option<&[usize]>, kappa: usize) -> EmIteration {
    EmIteration {
        iteration,
        top_weights: rules
            .iter()
            .map(|r| r.pi.top(kappa).iter().map(|&k| r.pi.weights[k]).collect())
            .collect(),
        target_membership: groups.map(|g| z.target_means(g)).unwrap_or_default(),
        group_table: groups
            .map(|g| z.group_table(g, g.iter().max().map_or(0, |m| m + 1)))
            .unwrap_or_default(),
    }
}

/// Full EM pipeline for one template. With `init` unset the memberships
/// come from k-means over a single seed rule learned on all samples.
/// `groups`, when given, names each sample's intended rule and feeds the
/// membership trace.
pub fn run_em(
    domain: &Domain,
    exps: &[Experience],
    template: usize,
    cfg: &EmConfig,
    init: Option<Membership>,
    groups: Option<&[usize]>,
) -> Result<EmOutcome> {
    cfg.validate()?;
    if exps.is_empty() {
        return Err(SpareError::Dataset("EM needs at least one experience".into()));
    }
    if let Some(g) = groups {
        if g.len() != exps.len() {
            return Err(SpareError::Dimension {
                expected: exps.len(),
                got: g.len(),
                context: "sample groups",
            });
        }
    }
    let mut z = match init {
        Some(z) => z,
        None => {
            let seed_rule = train_single(domain, exps, template, &cfg.greedy)?;
            init_membership(domain, exps, &seed_rule, cfg.k, &cfg.init, derive_seed(cfg.greedy.train.seed, 0x1417))?.0
        }
    };
    if z.n_samples() != exps.len() || z.n_rules() != cfg.k {
        return Err(SpareError::Dimension {
            expected: exps.len() * cfg.k,
            got: z.z.len(),
            context: "initial membership",
        });
    }
    let default_variance = fit_default_variance(domain, exps, &vec![1.0; exps.len()], cfg.greedy.train.variance_floor);
    let ctx = EmContext {
        domain,
        exps,
        template,
        cfg,
    };
    let mut rules: Vec<MixtureRule> = (0..cfg.k)
        .into_par_iter()
        .map(|j| ctx.init_rule(j, &z.column(j)))
        .collect::<Result<_>>()?;
    for r in &mut rules {
        r.phi = r.pi.top(cfg.kappa).into_iter().map(|k| (k, None)).collect();
    }
    let mut trace = vec![snapshot(0, &rules, &z, groups, cfg.kappa)];
    for it in 1..=cfg.iters {
        let base = derive_seed(cfg.greedy.train.seed, 0x3e00 + it as u64);
        rules = rules
            .into_par_iter()
            .enumerate()
            .map(|(j, mut r)| {
                ctx.m_step(&mut r, &z.column(j), derive_seed(base, j as u64))?;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let cols: Vec<Vec<f64>> = rules
            .par_iter()
            .map(|r| r.log_densities(domain, exps, &default_variance))
            .collect::<Result<_>>()?;
        let loglik = Array2::from_shape_fn((exps.len(), cfg.k), |(i, j)| cols[j][i]);
        let next = e_step(&z, &loglik)?;
        let change = (&next.z - &z.z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        z = next;
        trace.push(snapshot(it, &rules, &z, groups, cfg.kappa));
        log::info!("EM iteration {it}: max membership change {change:.3e}");
        if cfg.z_change_tol.is_some_and(|tol| change < tol) {
            break;
        }
    }
    Ok(EmOutcome {
        rules,
        membership: z,
        default_variance,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::blocks_domain;
    use ndarray::array;
    use proptest::prelude::*;

    fn record(shell: ReferenceList, val_loss: f64) -> ShellRecord {
        ShellRecord { shell, val_loss }
    }

    fn shells(n: usize) -> Vec<ReferenceList> {
        let d = blocks_domain();
        let mut out = vec![ReferenceList::empty()];
        for f in 0..n.saturating_sub(1) {
            out.push(ReferenceList::new(&d, 1, vec![crate::relational::DeicticStep::new(f % 4, vec![0])]).unwrap());
        }
        out
    }

    #[test]
    fn single_explored_shell_gets_one_minus_epsilon() {
        let s = shells(1);
        let pi = ShellDistribution::from_losses(&[record(s[0].clone(), 3.0)], 0.05, 100.0).unwrap();
        assert!((pi.weights[0] - 0.95).abs() < 1e-15);
        assert!((pi.total_mass() - 1.0).abs() < 1e-12);
        assert!((pi.unexplored_weight() - 0.05 / 99.0).abs() < 1e-15);
    }

    #[test]
    fn equal_losses_share_equally_and_ln2_gives_two_to_one() {
        let s = shells(2);
        let pi = ShellDistribution::from_losses(&[record(s[0].clone(), 1.0), record(s[1].clone(), 1.0)], 0.05, 10.0)
            .unwrap();
        assert!((pi.weights[0] - pi.weights[1]).abs() < 1e-15);
        let pi = ShellDistribution::from_losses(
            &[record(s[0].clone(), 1.0), record(s[1].clone(), 1.0 + 2f64.ln())],
            0.05,
            10.0,
        )
        .unwrap();
        assert!((pi.weights[0] / pi.weights[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn votes_reweight_with_mass_preserved() {
        let mut w = vec![0.6, 0.3, 0.1];
        reweight_by_votes(&mut w[..2], &[0, 1], &[3.0, 1.0]);
        assert!((w[0] - 0.675).abs() < 1e-12 && (w[1] - 0.225).abs() < 1e-12);

        let mut w = vec![0.6, 0.3, 0.1];
        reweight_by_votes(&mut w, &[0, 1], &[5.0, 0.0]);
        assert_eq!(w[1], 0.0);
        assert!((w[0] - 0.9).abs() < 1e-12);

        let mut w = vec![0.6, 0.3, 0.1];
        reweight_by_votes(&mut w, &[0, 1], &[0.0, 0.0]);
        assert_eq!(w, vec![0.6, 0.3, 0.1]);

        // votes proportional to the weights are a fixed point
        let mut w = vec![0.6, 0.3, 0.1];
        reweight_by_votes(&mut w, &[0, 1], &[2.0, 1.0]);
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn membership_modes() {
        let d = array![[1.0, 1.0, 1.0], [1.0, 2.0, 4.0], [0.0, 3.0, 1.0]];
        let disc = memberships_from_distances(&d, InitMode::Discrete);
        assert_eq!(disc.matrix().row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        let inv = memberships_from_distances(&d, InitMode::InvDist);
        for j in 0..3 {
            assert!((inv.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = 1.0 + 0.5 + 0.25;
        assert!((inv.get(1, 1) - 0.5 / s).abs() < 1e-15);
        let sq = memberships_from_distances(&d, InitMode::InvSqDist);
        let s = 1.0 + 0.25 + 0.0625;
        assert!((sq.get(1, 2) - 0.0625 / s).abs() < 1e-15);
        // a sample sitting on a center belongs to it
        assert_eq!(sq.matrix().row(2).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn e_step_scales_odds() {
        let z = Membership::from_labels(&[0, 1], 2, 0.7).unwrap();
        let same = Array2::from_elem((2, 2), -3.0);
        let out = e_step(&z, &same).unwrap();
        for (a, b) in out.matrix().iter().zip(z.matrix()) {
            assert!((a - b).abs() < 1e-15);
        }
        let ll = array![[0.0, -1.0], [-5.0, -5.0]];
        let out = e_step(&z, &ll).unwrap();
        let odds_before = 0.7 / 0.3;
        let odds_after = out.get(0, 0) / out.get(0, 1);
        assert!((odds_after / odds_before - std::f64::consts::E).abs() < 1e-12);
        // single rule stays at one
        let z1 = Membership::uniform(3, 1);
        let out = e_step(&z1, &array![[-1.0], [-50.0], [3.0]]).unwrap();
        assert!(out.matrix().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn underflowing_row_resets_to_uniform() {
        let z = Membership::from_labels(&[0], 2, 0.5).unwrap();
        let out = e_step(&z, &array![[f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert_eq!(out.matrix().row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn shell_counts() {
        let d = blocks_domain();
        assert_eq!(count_shells(&d, 1, 0), 1.0);
        assert_eq!(count_shells(&d, 1, 1), 5.0);
        // 4 steps from one slot, then 4 * 2 - 1 from two slots
        assert_eq!(count_shells(&d, 1, 2), 1.0 + 4.0 + 4.0 * 7.0);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(Membership::new(array![[0.5, 0.6]]).is_err());
        assert!(Membership::new(array![[1.5, -0.5]]).is_err());
        let m: Membership = serde_json::from_str("[[0.25,0.75]]").unwrap();
        assert_eq!(m.get(0, 1), 0.75);
        assert!(serde_json::from_str::<Membership>("[[0.2,0.7]]").is_err());
    }

    proptest! {
        #[test]
        fn e_step_rows_stay_normalized(
            raw in prop::collection::vec((0.01f64..1.0, -200.0f64..50.0), 12),
        ) {
            let z = Array2::from_shape_fn((4, 3), |(i, j)| raw[i * 3 + j].0);
            let z = z.clone() / z.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
            let z = Membership::new(z).unwrap();
            let ll = Array2::from_shape_fn((4, 3), |(i, j)| raw[i * 3 + j].1);
            let out = e_step(&z, &ll).unwrap();
            for row in out.matrix().rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn votes_preserve_total_mass(
            w in prop::collection::vec(0.0f64..1.0, 3..8),
            votes in prop::collection::vec(0.0f64..10.0, 3),
        ) {
            let total: f64 = w.iter().sum();
            let mut w: Vec<f64> = w.iter().map(|v| 0.95 * v / total.max(1e-12)).collect();
            let top = [0, 1, 2];
            let before: f64 = top.iter().map(|&k| w[k]).sum();
            let all_before: f64 = w.iter().sum();
            reweight_by_votes(&mut w, &top, &votes);
            let after: f64 = top.iter().map(|&k| w[k]).sum();
            prop_assert!((after - before).abs() <= 1e-9);
            prop_assert!((w.iter().sum::<f64>() - all_before).abs() <= 1e-9);
        }
    }
}
