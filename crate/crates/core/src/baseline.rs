//! Monolithic baseline: one Gaussian regressor from the whole ordered
//! state (plus action parameters) to the whole ordered next state.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{Cell, Component, Normal, Scope, StateDistribution};
use crate::error::{Result, SpareError};
use crate::predictor::{self, GaussianPredictor, TrainConfig, TrainData};
use crate::relational::{Domain, Experience};
use crate::seed::derive_seed;
use crate::sim::{pushed_stack, scope_objects};

/// How non-target objects are laid out in the flat vectors. Targets
/// always come first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Uniformly shuffled per sample.
    Random,
    /// Sorted by `x`, then `y`, then `z`, then object index.
    SortedByPose,
    /// The pushed stack bottom-up, then the rest sorted by pose.
    OracleStack,
}

impl FromStr for Ordering {
    type Err = SpareError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "none" => Ok(Self::Random),
            "sorted-by-pose" | "xtheny" => Ok(Self::SortedByPose),
            "oracle-stack" | "stack" => Ok(Self::OracleStack),
            _ => Err(SpareError::Config(format!(
                "unknown ordering {s:?} (expected none, xtheny or stack)"
            ))),
        }
    }
}

impl Ordering {
    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::SortedByPose => "sorted-by-pose",
            Self::OracleStack => "oracle-stack",
        }
    }
}

/// Object permutation for `e`: position `k` of the flat vectors holds
/// object `perm[k]`. `seed` only matters for [`Ordering::Random`].
pub fn order_objects(domain: &Domain, e: &Experience, ordering: Ordering, seed: u64) -> Vec<usize> {
    let targets = &e.action.targets;
    let mut rest: Vec<usize> = (0..e.state.n_objects()).filter(|o| !targets.contains(o)).collect();
    match ordering {
        Ordering::Random => rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        Ordering::SortedByPose => sort_by_pose(domain, e, &mut rest),
        Ordering::OracleStack => {
            let mut head: Vec<usize> = pushed_stack(domain, e).into_iter().filter(|o| !targets.contains(o)).collect();
            rest.retain(|o| !head.contains(o));
            sort_by_pose(domain, e, &mut rest);
            head.extend(rest);
            rest = head;
        }
    }
    let mut perm = targets.clone();
    perm.extend(rest);
    perm
}

/// x, then y, then z, then object index.
fn sort_by_pose(domain: &Domain, e: &Experience, objs: &mut [usize]) {
    let l = domain.layout();
    let key = |o: usize| [e.state.get(o, l.x), e.state.get(o, l.y), e.state.get(o, l.z)];
    objs.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka[0]
            .total_cmp(&kb[0])
            .then(ka[1].total_cmp(&kb[1]))
            .then(ka[2].total_cmp(&kb[2]))
            .then(a.cmp(&b))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub ordering: Ordering,
    pub train: TrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ordering: Ordering::SortedByPose,
            train: TrainConfig {
                epochs: 300,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub ordering: Ordering,
    pub n_objects: usize,
    pub predictor: GaussianPredictor,
    /// Base seed for per-sample random orderings.
    pub order_seed: u64,
}

fn uniform_objects(exps: &[Experience]) -> Result<usize> {
    let n = exps
        .first()
        .ok_or_else(|| SpareError::Dataset("baseline needs at least one experience".into()))?
        .state
        .n_objects();
    if let Some(e) = exps.iter().find(|e| e.state.n_objects() != n) {
        return Err(SpareError::Dataset(format!(
            "baseline needs a fixed object count: found {} and {n}",
            e.state.n_objects()
        )));
    }
    Ok(n)
}

fn input_row(e: &Experience, perm: &[usize]) -> Vec<f64> {
    let mut x = e.action.alpha.clone();
    for &o in perm {
        x.extend_from_slice(e.state.row(o));
    }
    x
}

fn output_row(e: &Experience, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&o| e.next_state.row(o).iter().copied()).collect()
}

impl BaselineModel {
    fn order(&self, domain: &Domain, e: &Experience, index: usize) -> Vec<usize> {
        order_objects(domain, e, self.ordering, derive_seed(self.order_seed, index as u64))
    }

    /// Predicted distribution for each sample. `first_index` offsets the
    /// seeds of random orderings.
    pub fn predict_batch(&self, domain: &Domain, exps: &[Experience], first_index: usize) -> Result<Vec<StateDistribution>> {
        if exps.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(e) = exps.iter().find(|e| e.state.n_objects() != self.n_objects) {
            return Err(SpareError::Dimension {
                expected: self.n_objects,
                got: e.state.n_objects(),
                context: "baseline object count",
            });
        }
        let perms: Vec<Vec<usize>> = exps
            .iter()
            .enumerate()
            .map(|(i, e)| self.order(domain, e, first_index + i))
            .collect();
        let rows: Vec<Vec<f64>> = exps.iter().zip(&perms).map(|(e, p)| input_row(e, p)).collect();
        let dim = rows[0].len();
        let x = ndarray::Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(|_| SpareError::Dimension {
            expected: self.predictor.input_dim(),
            got: dim,
            context: "baseline input",
        })?;
        let (mu, var) = self.predictor.forward_batch(&x)?;
        let np = domain.n_props();
        Ok(exps
            .iter()
            .zip(&perms)
            .enumerate()
            .map(|(i, (e, perm))| {
                let mut c = Component::centered(&e.state, &vec![1.0; np]);
                for (k, &o) in perm.iter().enumerate() {
                    for p in 0..np {
                        *c.cell_mut(o, p) = Cell::single(Normal::new(mu[[i, k * np + p]], var[[i, k * np + p]]));
                    }
                }
                StateDistribution::single(e.state.n_objects(), c)
            })
            .collect())
    }

    /// Per-sample log-likelihood of the next states under `scope`.
    pub fn log_densities(&self, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<Vec<f64>> {
        self.predict_batch(domain, exps, 0)?
            .iter()
            .zip(exps)
            .map(|(d, e)| d.log_density(&e.next_state, scope_objects(domain, e, scope).as_deref()))
            .collect()
    }

    /// Mean log-likelihood over samples.
    pub fn evaluate(&self, domain: &Domain, exps: &[Experience], scope: Scope) -> Result<f64> {
        if exps.is_empty() {
            return Err(SpareError::Dataset("evaluation needs at least one experience".into()));
        }
        let ll = self.log_densities(domain, exps, scope)?;
        Ok(ll.iter().sum::<f64>() / ll.len() as f64)
    }
}

/// Train the baseline regressor on unit-weighted samples.
pub fn train_baseline(domain: &Domain, exps: &[Experience], cfg: &BaselineConfig) -> Result<BaselineModel> {
    let n_objects = uniform_objects(exps)?;
    let order_seed = derive_seed(cfg.train.seed, 0x0bde);
    let (mut xs, mut ys) = (Vec::with_capacity(exps.len()), Vec::with_capacity(exps.len()));
    for (i, e) in exps.iter().enumerate() {
        let perm = order_objects(domain, e, cfg.ordering, derive_seed(order_seed, i as u64));
        xs.push(input_row(e, &perm));
        ys.push(output_row(e, &perm));
    }
    let data = TrainData::from_rows(&xs, &ys, vec![1.0; exps.len()])?;
    Ok(BaselineModel {
        ordering: cfg.ordering,
        n_objects,
        predictor: predictor::train(&data, &cfg.train)?,
        order_seed,
    })
}
