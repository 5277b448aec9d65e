//! Deictic reference functions and the aggregators attached to them.
//!
//! A reference function maps an ordered tuple of object sets to a new object
//! set. Relations are evaluated on property values only; nothing is stored
//! about pairwise relations between objects.

use serde::{Deserialize, Serialize};

use super::{PoseLayout, State};
use crate::error::{Result, SpareError};

/// Sorted, duplicate-free list of object indices within one instance.
pub type ObjectSet = Vec<usize>;

/// Vertical contact tolerance (meters) for `above`/`below`.
pub const CONTACT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Max,
    Cardinality,
}

impl Aggregator {
    /// Collapse the values of `members` for property `prop` into one number.
    pub fn aggregate(self, state: &State, members: &[usize], prop: usize) -> f64 {
        debug_assert!(!members.is_empty());
        match self {
            Aggregator::Mean => {
                members.iter().map(|&o| state.get(o, prop)).sum::<f64>() / members.len() as f64
            }
            Aggregator::Max => members
                .iter()
                .map(|&o| state.get(o, prop))
                .fold(f64::NEG_INFINITY, f64::max),
            Aggregator::Cardinality => members.len() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Relation {
    /// Objects resting directly on top of the argument.
    Above,
    /// Transitive closure of `Above`.
    AboveStar,
    /// Objects the argument rests on.
    Below,
    /// The closest other object by center distance.
    Nearest,
    /// Every other object whose location is strictly within `radius`.
    WithinRadius { radius: f64 },
}

impl Relation {
    pub fn arity(&self) -> usize {
        1
    }

    fn eval_single(&self, layout: &PoseLayout, state: &State, o: usize) -> ObjectSet {
        match *self {
            Relation::Above => directly_above(layout, state, o),
            Relation::Below => (0..state.n_objects())
                .filter(|&p| p != o && rests_on(layout, state, o, p))
                .collect(),
            Relation::AboveStar => {
                let mut seen = vec![false; state.n_objects()];
                let mut frontier = vec![o];
                while let Some(cur) = frontier.pop() {
                    for p in directly_above(layout, state, cur) {
                        if !seen[p] && p != o {
                            seen[p] = true;
                            frontier.push(p);
                        }
                    }
                }
                (0..state.n_objects()).filter(|&p| seen[p]).collect()
            }
            Relation::WithinRadius { radius } => {
                let lo = layout.location(state, o);
                (0..state.n_objects())
                    .filter(|&p| p != o && dist(lo, layout.location(state, p)) < radius)
                    .collect()
            }
            Relation::Nearest => unreachable!("nearest is evaluated on whole sets"),
        }
    }

    /// Evaluate on a set argument: union of the per-member results, except
    /// for `Nearest`, which picks the non-member closest to any member.
    pub fn eval(&self, layout: &PoseLayout, state: &State, arg: &[usize]) -> ObjectSet {
        if let Relation::Nearest = self {
            let mut best: Option<(f64, usize)> = None;
            for p in 0..state.n_objects() {
                if arg.contains(&p) {
                    continue;
                }
                let cp = layout.center(state, p);
                let d = arg
                    .iter()
                    .map(|&o| dist(cp, layout.center(state, o)))
                    .fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, p));
                }
            }
            return best.map(|(_, p)| vec![p]).unwrap_or_default();
        }
        let mut out: ObjectSet = arg
            .iter()
            .flat_map(|&o| self.eval_single(layout, state, o))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// True when `top` rests on `base`: its bottom face touches the top face of
/// `base` and its center lies over the footprint of `base`.
fn rests_on(layout: &PoseLayout, state: &State, top: usize, base: usize) -> bool {
    let g = |o: usize, p: usize| state.get(o, p);
    let top_of_base = g(base, layout.z) + g(base, layout.height);
    (g(top, layout.z) - top_of_base).abs() <= CONTACT_TOL
        && (g(top, layout.x) - g(base, layout.x)).abs() <= 0.5 * g(base, layout.width) + CONTACT_TOL
        && (g(top, layout.y) - g(base, layout.y)).abs() <= 0.5 * g(base, layout.length) + CONTACT_TOL
}

fn directly_above(layout: &PoseLayout, state: &State, o: usize) -> ObjectSet {
    (0..state.n_objects())
        .filter(|&p| p != o && rests_on(layout, state, p, o))
        .collect()
}

/// A named reference function together with the aggregator used when it
/// designates more than one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFn {
    pub name: String,
    pub relation: Relation,
    pub aggregator: Aggregator,
}

impl ReferenceFn {
    pub fn new(name: impl Into<String>, relation: Relation, aggregator: Aggregator) -> Self {
        Self {
            name: name.into(),
            relation,
            aggregator,
        }
    }

    pub fn arity(&self) -> usize {
        self.relation.arity()
    }

    pub fn apply(&self, layout: &PoseLayout, state: &State, args: &[&[usize]]) -> Result<ObjectSet> {
        if args.len() != self.arity() {
            return Err(SpareError::Domain(format!(
                "reference `{}` takes {} argument(s), got {}",
                self.name,
                self.arity(),
                args.len()
            )));
        }
        for a in args {
            if a.is_empty() || a.iter().any(|&o| o >= state.n_objects()) {
                return Err(SpareError::Domain(format!(
                    "reference `{}` applied to an empty or out-of-range object set",
                    self.name
                )));
            }
        }
        Ok(self.relation.eval(layout, state, args[0]))
    }
}
