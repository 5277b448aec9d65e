//! Reference lists, object-list construction and feature extraction.
//!
//! Slot layout: slots `0..n` hold the action targets as singletons and slot
//! `n + t - 1` holds the result of the `t`-th reference. Feature vectors are
//! laid out as `alpha` followed by every slot's properties in slot-major,
//! property-minor order.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActionInstance, Aggregator, Domain, ObjectSet, State};
use crate::error::{Result, SpareError};

/// One deictic reference: apply `function` to the objects in slots `args`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeicticStep {
    pub function: usize,
    pub args: Vec<usize>,
}

impl DeicticStep {
    pub fn new(function: usize, args: Vec<usize>) -> Self {
        Self { function, args }
    }
}

/// Ordered list of deictic references (an input list or an output list).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceList {
    steps: Vec<DeicticStep>,
}

impl ReferenceList {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build and validate against a domain and template arity.
    pub fn new(domain: &Domain, n_targets: usize, steps: Vec<DeicticStep>) -> Result<Self> {
        let list = Self { steps };
        list.validate(domain, n_targets)?;
        Ok(list)
    }

    pub fn validate(&self, domain: &Domain, n_targets: usize) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            let f = domain
                .reference(step.function)
                .map_err(|e| SpareError::ReferenceList(e.to_string()))?;
            if step.args.len() != f.arity() {
                return Err(SpareError::ReferenceList(format!(
                    "step {} passes {} args to `{}` (arity {})",
                    t + 1,
                    step.args.len(),
                    f.name,
                    f.arity()
                )));
            }
            // step t (0-based) may only read slots designated before it
            if let Some(&k) = step.args.iter().find(|&&k| k >= n_targets + t) {
                return Err(SpareError::ReferenceList(format!(
                    "step {} reads slot {k}, only {} designated so far",
                    t + 1,
                    n_targets + t
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[DeicticStep] {
        &self.steps
    }

    /// A new list with `step` appended.
    pub fn extended(&self, step: DeicticStep) -> Self {
        let mut steps = self.steps.clone();
        steps.push(step);
        Self { steps }
    }

    /// Human-readable form, e.g. `[above(O1), above(O2)]` (slots 1-based).
    pub fn display<'a>(&'a self, domain: &'a Domain) -> impl fmt::Display + 'a {
        ListDisplay { list: self, domain }
    }
}

struct ListDisplay<'a> {
    list: &'a ReferenceList,
    domain: &'a Domain,
}

impl fmt::Display for ListDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, s) in self.list.steps.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            let name = self
                .domain
                .references()
                .get(s.function)
                .map(|r| r.name.as_str())
                .unwrap_or("?");
            let args: Vec<String> = s.args.iter().map(|k| format!("O{}", k + 1)).collect();
            write!(f, "{name}({})", args.join(","))?;
        }
        write!(f, "]")
    }
}

/// A designated object set and the aggregator that summarizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub members: ObjectSet,
    pub aggregator: Aggregator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLists {
    slots: Vec<Slot>,
}

impl ObjectLists {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Indices of the slots that contain object `o`.
    pub fn slots_containing(&self, o: usize) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.members.binary_search(&o).is_ok())
            .map(|(j, _)| j)
    }
}

fn target_slots(targets: &[usize]) -> Vec<Slot> {
    targets
        .iter()
        .map(|&o| Slot {
            members: vec![o],
            aggregator: Aggregator::Mean,
        })
        .collect()
}

fn next_slot(domain: &Domain, step: &DeicticStep, slots: &[Slot], state: &State) -> Option<Slot> {
    let f = domain.reference(step.function).ok()?;
    let args: Vec<&[usize]> = step.args.iter().map(|&k| slots[k].members.as_slice()).collect();
    let members = f.apply(domain.layout(), state, &args).ok()?;
    if members.is_empty() {
        None
    } else {
        Some(Slot {
            members,
            aggregator: f.aggregator,
        })
    }
}

/// Resolve `refs` from `targets`. `None` when any reference designates the
/// empty set, in which case the rule does not apply.
///
/// `refs` must have been validated for `targets.len()`.
pub fn build_object_lists(
    domain: &Domain,
    refs: &ReferenceList,
    targets: &[usize],
    state: &State,
) -> Option<ObjectLists> {
    let lists = build_prefix(domain, refs, targets, state);
    (lists.len() == targets.len() + refs.len()).then_some(lists)
}

/// Resolve as many references as possible, stopping before the first one
/// that designates the empty set.
pub fn build_prefix(
    domain: &Domain,
    refs: &ReferenceList,
    targets: &[usize],
    state: &State,
) -> ObjectLists {
    let mut slots = target_slots(targets);
    for step in refs.steps() {
        match next_slot(domain, step, &slots, state) {
            Some(s) => slots.push(s),
            None => break,
        }
    }
    ObjectLists { slots }
}

/// Input vector `[alpha | P(O_1) .. P(O_k)]`; set slots use their aggregator.
pub fn extract_input(
    domain: &Domain,
    lists: &ObjectLists,
    state: &State,
    action: &ActionInstance,
) -> Vec<f64> {
    let np = domain.n_props();
    let mut x = Vec::with_capacity(action.alpha.len() + np * lists.len());
    x.extend_from_slice(&action.alpha);
    for slot in &lists.slots {
        for p in 0..np {
            x.push(slot.aggregator.aggregate(state, &slot.members, p));
        }
    }
    x
}

/// Output vector over `lists`; set slots are averaged.
pub fn extract_output(lists: &ObjectLists, next_state: &State) -> Vec<f64> {
    let np = next_state.n_props();
    let mut y = Vec::with_capacity(np * lists.len());
    for slot in &lists.slots {
        for p in 0..np {
            y.push(Aggregator::Mean.aggregate(next_state, &slot.members, p));
        }
    }
    y
}

/// Like [`extract_input`] for a possibly partial list, zero-filling the
/// features of the `n_slots - lists.len()` unresolved slots.
pub fn extract_input_padded(
    domain: &Domain,
    lists: &ObjectLists,
    n_slots: usize,
    state: &State,
    action: &ActionInstance,
) -> Vec<f64> {
    let mut x = extract_input(domain, lists, state, action);
    x.resize(action.alpha.len() + domain.n_props() * n_slots, 0.0);
    x
}

pub fn extract_output_padded(lists: &ObjectLists, n_slots: usize, next_state: &State) -> Vec<f64> {
    let mut y = extract_output(lists, next_state);
    y.resize(next_state.n_props() * n_slots, 0.0);
    y
}
