//! Transition rules, SPARE models and greedy selection of reference lists.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{Cell, Component, Normal, Scope, StateDistribution};
use crate::error::{Result, SpareError};
use crate::predictor::{self, GaussianPredictor, ResidualTable, TrainConfig, TrainData};
use crate::relational::{
    build_object_lists, extract_input, extract_output, ActionInstance, DeicticStep, Domain,
    Experience, ObjectLists, ReferenceList, State,
};
use crate::seed::{derive_seed, hash_bytes};
use crate::sim::scope_objects;

/// Score of a rule with the given list lengths on a state where it applies.
pub fn applicable_score(gamma: &ReferenceList, delta: &ReferenceList) -> usize {
    gamma.len() + delta.len() + 1
}

/// Input and output object lists of a rule signature, or `None` when the
/// rule does not apply (wrong template or an empty reference).
pub fn resolve(
    domain: &Domain,
    template: usize,
    gamma: &ReferenceList,
    delta: &ReferenceList,
    state: &State,
    action: &ActionInstance,
) -> Option<(ObjectLists, ObjectLists)> {
    if action.template != template {
        return None;
    }
    let input = build_object_lists(domain, gamma, &action.targets, state)?;
    let output = if gamma == delta {
        input.clone()
    } else {
        build_object_lists(domain, delta, &action.targets, state)?
    };
    Some((input, output))
}

/// `C(T, s)`: zero when the rule does not apply, else `|gamma| + |delta| + 1`.
pub fn score(
    domain: &Domain,
    template: usize,
    gamma: &ReferenceList,
    delta: &ReferenceList,
    state: &State,
    action: &ActionInstance,
) -> usize {
    match resolve(domain, template, gamma, delta, state, action) {
        Some(_) => applicable_score(gamma, delta),
        None => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRule {
    pub template: usize,
    pub gamma: ReferenceList,
    pub delta: ReferenceList,
    pub predictor: GaussianPredictor,
    /// Per-property variance for objects outside every output slot.
    pub v_default: Vec<f64>,
}

impl TransitionRule {
    pub fn score(&self, domain: &Domain, state: &State, action: &ActionInstance) -> usize {
        score(domain, self.template, &self.gamma, &self.delta, state, action)
    }

    /// Predicted component for every item, `None` where the rule does not
    /// apply. Objects in several output slots get a uniform mixture of the
    /// slots' predictions; set slots assign their prediction to every member.
    pub fn predict_batch(
        &self,
        domain: &Domain,
        items: &[(&State, &ActionInstance)],
    ) -> Result<Vec<Option<Component>>> {
        let resolved: Vec<_> = items
            .iter()
            .map(|(s, a)| resolve(domain, self.template, &self.gamma, &self.delta, s, a))
            .collect();
        let rows: Vec<Vec<f64>> = resolved
            .iter()
            .zip(items)
            .filter_map(|(r, (s, a))| r.as_ref().map(|(inp, _)| extract_input(domain, inp, s, a)))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        if rows.is_empty() {
            out.resize(items.len(), None);
            return Ok(out);
        }
        let dim = rows[0].len();
        let x = ndarray::Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(|_| {
            SpareError::Dimension {
                expected: self.predictor.input_dim(),
                got: dim,
                context: "rule input",
            }
        })?;
        let (mu, var) = self.predictor.forward_batch(&x)?;
        let np = domain.n_props();
        let mut k = 0;
        for (r, (s, _)) in resolved.into_iter().zip(items) {
            let Some((_, output)) = r else {
                out.push(None);
                continue;
            };
            let (mu, var) = (mu.row(k), var.row(k));
            k += 1;
            if mu.len() != np * output.len() {
                return Err(SpareError::Dimension {
                    expected: mu.len(),
                    got: np * output.len(),
                    context: "rule output",
                });
            }
            let mut c = Component::centered(s, &self.v_default);
            for o in 0..s.n_objects() {
                let slots: Vec<usize> = output.slots_containing(o).collect();
                if slots.is_empty() {
                    continue;
                }
                for p in 0..np {
                    let parts = slots
                        .iter()
                        .map(|&j| Normal::new(mu[j * np + p], var[j * np + p]))
                        .collect();
                    *c.cell_mut(o, p) = Cell(parts);
                }
            }
            out.push(Some(c));
        }
        Ok(out)
    }

    /// Log-density of each next state under this rule alone, `None` where
    /// it does not apply.
    pub fn log_densities(&self, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<Vec<Option<f64>>> {
        let items: Vec<_> = exps.iter().map(|e| (&e.state, &e.action)).collect();
        let comps = self.predict_batch(domain, &items)?;
        comps
            .into_iter()
            .zip(exps)
            .map(|(c, e)| {
                c.map(|c| {
                    let objs = scope_objects(domain, e, scope);
                    StateDistribution::single(e.state.n_objects(), c).log_density(&e.next_state, objs.as_deref())
                })
                .transpose()
            })
            .collect()
    }
}

/// A set of rules plus the variance used when none of them applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpareModel {
    pub rules: Vec<TransitionRule>,
    /// Diagonal of the no-rule covariance, one variance per property.
    pub default_variance: Vec<f64>,
}

impl SpareModel {
    pub fn predict(&self, domain: &Domain, state: &State, action: &ActionInstance) -> Result<StateDistribution> {
        Ok(self.predict_batch(domain, &[(state, action)])?.pop().expect("one item"))
    }

    /// Highest-scoring rules averaged with equal weight; the centered
    /// default Gaussian when no rule applies.
    pub fn predict_batch(
        &self,
        domain: &Domain,
        items: &[(&State, &ActionInstance)],
    ) -> Result<Vec<StateDistribution>> {
        if self.default_variance.len() != domain.n_props() {
            return Err(SpareError::Dimension {
                expected: domain.n_props(),
                got: self.default_variance.len(),
                context: "default variance",
            });
        }
        let per_rule: Vec<Vec<Option<Component>>> = self
            .rules
            .iter()
            .map(|r| r.predict_batch(domain, items))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(items.len());
        for (i, (s, _)) in items.iter().enumerate() {
            let scores: Vec<usize> = self
                .rules
                .iter()
                .zip(&per_rule)
                .map(|(r, c)| match c[i] {
                    Some(_) => applicable_score(&r.gamma, &r.delta),
                    None => 0,
                })
                .collect();
            let best = scores.iter().copied().max().unwrap_or(0);
            if best == 0 {
                out.push(StateDistribution::fallback(s, &self.default_variance));
                continue;
            }
            let comps: Vec<(f64, Component)> = scores
                .iter()
                .zip(&per_rule)
                .filter(|(sc, _)| **sc == best)
                .map(|(_, c)| (1.0, c[i].clone().expect("applicable")))
                .collect();
            out.push(StateDistribution::mixture(s.n_objects(), comps)?);
        }
        Ok(out)
    }

    pub fn log_densities(&self, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<Vec<f64>> {
        let items: Vec<_> = exps.iter().map(|e| (&e.state, &e.action)).collect();
        self.predict_batch(domain, &items)?
            .iter()
            .zip(exps)
            .map(|(d, e)| d.log_density(&e.next_state, scope_objects(domain, e, scope).as_deref()))
            .collect()
    }

    /// Mean negative log-likelihood of the next states.
    pub fn loss(&self, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<f64> {
        if exps.is_empty() {
            return Err(SpareError::Dataset("loss needs at least one experience".into()));
        }
        let ll = self.log_densities(domain, exps, scope)?;
        Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
    }
}

/// Fit a rule's predictor and default variances on the weighted samples it
/// applies to. `None` when fewer than two samples with positive weight apply.
pub fn learn_dist(
    domain: &Domain,
    exps: &[Experience],
    weights: &[f64],
    template: usize,
    gamma: &ReferenceList,
    delta: &ReferenceList,
    cfg: &TrainConfig,
) -> Result<Option<TransitionRule>> {
    let np = domain.n_props();
    let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    let mut residuals = ResidualTable::new(np);
    for (e, &w) in exps.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let Some((input, output)) = resolve(domain, template, gamma, delta, &e.state, &e.action) else {
            continue;
        };
        xs.push(extract_input(domain, &input, &e.state, &e.action));
        ys.push(extract_output(&output, &e.next_state));
        ws.push(w);
        for o in 0..e.state.n_objects() {
            if output.slots_containing(o).next().is_none() {
                for p in 0..np {
                    residuals.push(p, e.next_state.get(o, p) - e.state.get(o, p), w);
                }
            }
        }
    }
    if ws.len() < 2 {
        return Ok(None);
    }
    let data = TrainData::from_rows(&xs, &ys, ws)?;
    let predictor = predictor::train(&data, cfg)?;
    Ok(Some(TransitionRule {
        template,
        gamma: gamma.clone(),
        delta: delta.clone(),
        predictor,
        v_default: residuals.fit_default_variance(cfg.variance_floor),
    }))
}

/// Weighted per-property mean of `(s' - s)^2` over every object, floored.
pub fn fit_default_variance(domain: &Domain, exps: &[Experience], weights: &[f64], floor: f64) -> Vec<f64> {
    let mut t = ResidualTable::new(domain.n_props());
    for (e, &w) in exps.iter().zip(weights) {
        for o in 0..e.state.n_objects() {
            for p in 0..domain.n_props() {
                t.push(p, e.next_state.get(o, p) - e.state.get(o, p), w);
            }
        }
    }
    t.fit_default_variance(floor)
}

/// Every one-step extension of `current`: each reference function applied
/// to each tuple of already designated slots, in lexicographic order of
/// `(function, args)`. Steps already in `current` are skipped, since adding
/// them again leaves the list unchanged as a set.
pub fn candidate_steps(domain: &Domain, n_targets: usize, current: &ReferenceList) -> Vec<DeicticStep> {
    let n_slots = n_targets + current.len();
    let mut out = Vec::new();
    for (f, r) in domain.references().iter().enumerate() {
        let m = r.arity() as u32;
        // tuples in lexicographic order are the base-`n_slots` numerals
        for code in 0..n_slots.pow(m) {
            let args = (0..m).rev().map(|k| code / n_slots.pow(k) % n_slots).collect();
            let step = DeicticStep::new(f, args);
            if !current.steps().contains(&step) {
                out.push(step);
            }
        }
    }
    out
}

/// Seed used to train the predictor of one shell, independent of the
/// order in which shells are explored.
pub fn shell_seed(base: u64, shell: &ReferenceList) -> u64 {
    let key = serde_json::to_vec(shell).expect("reference lists serialize");
    derive_seed(base, hash_bytes(&key))
}

/// Deterministic train/validation split of `n` samples.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * validation_fraction).round() as usize).min(n.saturating_sub(2));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyConfig {
    pub max_refs: usize,
    pub validation_fraction: f64,
    /// Keep extending with the best candidate after the first rejection, so
    /// that losses for longer lists are recorded. Acceptance is unchanged.
    pub continue_after_reject: bool,
    pub train: TrainConfig,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            max_refs: 4,
            validation_fraction: 0.15,
            continue_after_reject: false,
            train: TrainConfig::default(),
        }
    }
}

/// One evaluated shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellRecord {
    pub shell: ReferenceList,
    pub val_loss: f64,
}

/// Best candidate of one greedy step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub shell: ReferenceList,
    pub val_loss: f64,
    pub accepted: bool,
    pub rule: Option<TransitionRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    pub gamma: ReferenceList,
    pub rule: TransitionRule,
    pub empty_rule: TransitionRule,
    pub default_variance: Vec<f64>,
    /// Step 0 is the empty list; later steps hold each step's best candidate.
    pub steps: Vec<GreedyStep>,
    pub explored: Vec<ShellRecord>,
}

impl GreedyOutcome {
    /// Validation losses of the accepted lists, starting with the empty one.
    pub fn accepted_losses(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.accepted).map(|s| s.val_loss).collect()
    }

    /// The learned rule with the empty-list rule as fallback.
    pub fn model(&self) -> SpareModel {
        let mut rules = vec![self.rule.clone()];
        if !self.gamma.is_empty() {
            rules.push(self.empty_rule.clone());
        }
        SpareModel {
            rules,
            default_variance: self.default_variance.clone(),
        }
    }
}

fn weighted_loss(model: &SpareModel, domain: &Domain, exps: &[Experience], weights: &[f64]) -> Result<f64> {
    let ll = model.log_densities(domain, exps, Scope::AllObjects)?;
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(SpareError::Training("validation split has no weight".into()));
    }
    Ok(-ll.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / wsum)
}

/// Greedy construction of the input list with the output list tied to it.
/// Each step trains one rule per candidate extension on the training split
/// and scores `{T, T_empty}` on the validation split; the best candidate is
/// kept only if it lowers the validation loss.
pub fn greedy_select(
    domain: &Domain,
    exps: &[Experience],
    weights: &[f64],
    template: usize,
    cfg: &GreedyConfig,
) -> Result<GreedyOutcome> {
    if weights.len() != exps.len() {
        return Err(SpareError::Dimension {
            expected: exps.len(),
            got: weights.len(),
            context: "sample weights",
        });
    }
    let n_targets = domain.template(template)?.arity;
    let (train_idx, val_idx) = split_indices(exps.len(), cfg.validation_fraction, derive_seed(cfg.train.seed, 0x5b1));
    let pick = |idx: &[usize]| -> (Vec<Experience>, Vec<f64>) {
        let mut es = Vec::new();
        let mut ws = Vec::new();
        for &i in idx {
            if exps[i].action.template == template && weights[i] > 0.0 {
                es.push(exps[i].clone());
                ws.push(weights[i]);
            }
        }
        (es, ws)
    };
    let (train, train_w) = pick(&train_idx);
    let (val, val_w) = pick(&val_idx);
    if val.is_empty() {
        return Err(SpareError::Training("no validation samples for this template".into()));
    }
    let default_variance = fit_default_variance(domain, &train, &train_w, cfg.train.variance_floor);

    let fit = |shell: &ReferenceList| {
        let tc = cfg.train.with_seed(shell_seed(cfg.train.seed, shell));
        learn_dist(domain, &train, &train_w, template, shell, shell, &tc)
    };
    let empty = ReferenceList::empty();
    let empty_rule = fit(&empty)?
        .ok_or_else(|| SpareError::Training("fewer than two training samples for the template".into()))?;
    let evaluate = |rule: Option<&TransitionRule>| -> Result<f64> {
        let mut rules = Vec::with_capacity(2);
        rules.extend(rule.cloned());
        rules.push(empty_rule.clone());
        let model = SpareModel {
            rules,
            default_variance: default_variance.clone(),
        };
        weighted_loss(&model, domain, &val, &val_w)
    };

    let l0 = evaluate(None)?;
    let mut explored = vec![ShellRecord {
        shell: empty.clone(),
        val_loss: l0,
    }];
    let mut steps = vec![GreedyStep {
        shell: empty.clone(),
        val_loss: l0,
        accepted: true,
        rule: Some(empty_rule.clone()),
    }];
    let mut gamma = empty.clone();
    let mut rule = empty_rule.clone();
    let mut current = empty;
    let mut prev = l0;
    let mut stopped = false;
    for _ in 0..cfg.max_refs {
        let shells: Vec<ReferenceList> = candidate_steps(domain, n_targets, &current)
            .into_iter()
            .map(|s| current.extended(s))
            .collect();
        if shells.is_empty() {
            break;
        }
        let results: Vec<(Option<TransitionRule>, f64)> = shells
            .par_iter()
            .map(|shell| {
                let r = fit(shell)?;
                let loss = evaluate(r.as_ref())?;
                Ok((r, loss))
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (i, (_, loss)) in results.iter().enumerate() {
            if *loss < results[best].1 {
                best = i;
            }
        }
        for (shell, (_, loss)) in shells.iter().zip(&results) {
            explored.push(ShellRecord {
                shell: shell.clone(),
                val_loss: *loss,
            });
        }
        let (best_rule, best_loss) = results.into_iter().nth(best).expect("nonempty");
        let best_shell = shells[best].clone();
        log::debug!("greedy step {}: best loss {best_loss} (prev {prev})", current.len() + 1);
        if !stopped && best_loss < prev {
            gamma = best_shell.clone();
            rule = best_rule.clone().expect("an improving shell has a trained rule");
        } else {
            stopped = true;
        }
        steps.push(GreedyStep {
            shell: best_shell.clone(),
            val_loss: best_loss,
            accepted: !stopped,
            rule: best_rule,
        });
        if stopped && !cfg.continue_after_reject {
            break;
        }
        current = best_shell;
        prev = best_loss;
    }
    Ok(GreedyOutcome {
        gamma,
        rule,
        empty_rule,
        default_variance,
        steps,
        explored,
    })
}

/// Learn a single-rule SPARE model for `template` on unit-weighted data.
pub fn train_single(domain: &Domain, exps: &[Experience], template: usize, cfg: &GreedyConfig) -> Result<GreedyOutcome> {
    greedy_select(domain, exps, &vec![1.0; exps.len()], template, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, Mlp};
    use crate::predictor::Standardizer;
    use crate::sim::{blocks_domain, refs, PROPERTIES};
    use ndarray::{Array1, Array2};

    fn stack_state(heights: &[f64]) -> State {
        // blocks 0..n stacked at the origin, bottom first
        let mut z = 0.0;
        let rows: Vec<Vec<f64>> = heights
            .iter()
            .map(|&h| {
                let r = vec![0.1, 0.1, h, 0.0, 0.0, z];
                z += h;
                r
            })
            .collect();
        State::from_rows(PROPERTIES.len(), &rows).unwrap()
    }

    fn push(target: usize) -> ActionInstance {
        ActionInstance {
            template: 0,
            alpha: vec![0.0; 4],
            targets: vec![target],
        }
    }

    fn list(steps: &[(usize, usize)]) -> ReferenceList {
        ReferenceList::new(
            &blocks_domain(),
            1,
            steps.iter().map(|&(f, a)| DeicticStep::new(f, vec![a])).collect(),
        )
        .unwrap()
    }

    /// Rule whose predictor outputs constant means `mu` and variances `var`
    /// for every output slot, ignoring its input.
    fn constant_rule(gamma: ReferenceList, mu: Vec<f64>, var: f64, v_default: Vec<f64>) -> TransitionRule {
        let np = PROPERTIES.len();
        let din = 4 + np * (1 + gamma.len());
        let dout = mu.len();
        let mean = Mlp::from_layers(
            vec![Dense {
                w: Array2::zeros((din, dout)),
                b: Array1::from(mu),
            }],
            Activation::Relu,
        )
        .unwrap();
        let raw = var.exp_m1().ln();
        let vnet = Mlp::from_layers(
            vec![Dense {
                w: Array2::zeros((din, dout)),
                b: Array1::from_elem(dout, raw),
            }],
            Activation::Relu,
        )
        .unwrap();
        let p = GaussianPredictor::from_parts(
            mean,
            vnet,
            Standardizer::identity(din),
            Standardizer::identity(dout),
            1e-300,
        )
        .unwrap();
        TransitionRule {
            template: 0,
            delta: gamma.clone(),
            gamma,
            predictor: p,
            v_default,
        }
    }

    #[test]
    fn score_values() {
        let d = blocks_domain();
        let s = stack_state(&[0.05, 0.05, 0.05]);
        let g = list(&[(refs::ABOVE, 0), (refs::ABOVE, 1)]);
        assert_eq!(score(&d, 0, &g, &g, &s, &push(0)), 5);
        assert_eq!(score(&d, 1, &g, &g, &s, &push(0)), 0);
        let e = ReferenceList::empty();
        assert_eq!(score(&d, 0, &e, &e, &s, &push(0)), 1);
        // nothing above the top block
        assert_eq!(score(&d, 0, &g, &g, &s, &push(2)), 0);
    }

    #[test]
    fn empty_model_is_the_default_gaussian() {
        let d = blocks_domain();
        let s = stack_state(&[0.05, 0.07]);
        let var = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let m = SpareModel {
            rules: vec![],
            default_variance: var.clone(),
        };
        assert_eq!(m.predict(&d, &s, &push(0)).unwrap(), StateDistribution::fallback(&s, &var));
    }

    #[test]
    fn never_applicable_rule_changes_nothing() {
        let d = blocks_domain();
        let s = stack_state(&[0.05, 0.07]);
        let e = ReferenceList::empty();
        let base = SpareModel {
            rules: vec![constant_rule(e, vec![0.3; 6], 0.5, vec![0.01; 6])],
            default_variance: vec![1.0; 6],
        };
        let mut with_dead = base.clone();
        // three `above` steps never resolve on a two-block stack
        let g = list(&[(refs::ABOVE, 0), (refs::ABOVE, 1), (refs::ABOVE, 2)]);
        with_dead.rules.push(constant_rule(g, vec![0.0; 6 * 4], 1.0, vec![1.0; 6]));
        assert_eq!(
            base.predict(&d, &s, &push(0)).unwrap(),
            with_dead.predict(&d, &s, &push(0)).unwrap()
        );
    }

    #[test]
    fn tied_rules_average_and_unpredicted_objects_stay_centered() {
        let d = blocks_domain();
        let s = stack_state(&[0.05, 0.07, 0.04]);
        let g1 = list(&[(refs::ABOVE, 0)]);
        let g2 = list(&[(refs::ABOVE_STAR, 0)]);
        let a = constant_rule(g1, vec![1.0; 12], 1.0, vec![0.5; 6]);
        let b = constant_rule(g2, vec![3.0; 12], 1.0, vec![0.5; 6]);
        let m = SpareModel {
            rules: vec![a, b],
            default_variance: vec![1.0; 6],
        };
        let dist = m.predict(&d, &s, &push(0)).unwrap();
        assert_eq!(dist.components().len(), 2);
        assert!((dist.components()[0].0 - 0.5).abs() < 1e-15);
        // target predicted at 1 by one rule and 3 by the other
        assert!((dist.cell_mean(0, 3) - 2.0).abs() < 1e-12);
        // the top block is outside the first rule's lists: centered there
        assert_eq!(dist.components()[0].1.cell(2, 5).mean(), s.get(2, 5));
        // above* designates {1, 2} as one set slot; both receive its prediction
        assert_eq!(dist.components()[1].1.cell(2, 5).mean(), 3.0);
    }

    #[test]
    fn object_in_two_output_slots_gets_mixture() {
        let d = blocks_domain();
        let s = stack_state(&[0.05, 0.07]);
        // slot 1 = above(target) = {1}, slot 2 = above*(target) = {1}
        let g = list(&[(refs::ABOVE, 0), (refs::ABOVE_STAR, 0)]);
        let mut mu = vec![0.0; 18];
        mu[6..12].fill(0.0);
        mu[12..18].fill(2.0);
        let r = constant_rule(g, mu, 1.0, vec![1.0; 6]);
        let c = r.predict_batch(&d, &[(&s, &push(0))]).unwrap().pop().unwrap().unwrap();
        let phi = |v: f64| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let got = c.cell(1, 0).log_pdf(1.0).exp();
        assert!((got - (0.5 * phi(1.0) + 0.5 * phi(-1.0))).abs() < 1e-15);
    }

    #[test]
    fn exact_prediction_with_unit_variance_has_closed_form_loss() {
        let d = blocks_domain();
        let s = stack_state(&[0.05, 0.07]);
        let e = Experience {
            instance: 0,
            objects: vec![0, 1],
            state: s.clone(),
            action: push(0),
            next_state: s.clone(),
        };
        let m = SpareModel {
            rules: vec![],
            default_variance: vec![1.0; 6],
        };
        let expected = 6.0 * 2.0 / 2.0 * (2.0 * std::f64::consts::PI).ln();
        let l = m.loss(&d, std::slice::from_ref(&e), Scope::AllObjects).unwrap();
        assert!((l - expected).abs() < 1e-12);
        let twice = vec![e.clone(), e];
        assert!((m.loss(&d, &twice, Scope::AllObjects).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn candidates_are_lexicographic() {
        let d = blocks_domain();
        let c = candidate_steps(&d, 1, &list(&[(refs::ABOVE, 0)]));
        // 4 functions x 2 slots, minus the step already present
        assert_eq!(c.len(), 7);
        assert_eq!(c[0], DeicticStep::new(0, vec![1]));
        assert_eq!(c[1], DeicticStep::new(1, vec![0]));
        let mut sorted = c.clone();
        sorted.sort();
        assert_eq!(sorted, c);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t, v) = split_indices(100, 0.15, 3);
        assert_eq!(v.len(), 15);
        assert_eq!(t.len(), 85);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(100, 0.15, 3), (t, v));
    }
}
