//! Relational data model: domains, problem instances, states, actions and
//! experience tuples, plus deictic reference evaluation and feature
//! extraction for transition rules.

mod lists;
mod reference;

pub use lists::{
    build_object_lists, build_prefix, extract_input, extract_input_padded, extract_output,
    extract_output_padded, DeicticStep, ObjectLists, ReferenceList, Slot,
};
pub use reference::{Aggregator, ObjectSet, ReferenceFn, Relation, CONTACT_TOL};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpareError};

pub type ObjectId = u32;

/// Column indices of the pose and shape properties that spatial relations
/// read. Resolved from property names when the domain is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseLayout {
    pub width: usize,
    pub length: usize,
    pub height: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl PoseLayout {
    fn resolve(props: &[String]) -> Option<Self> {
        let idx = |n: &str| props.iter().position(|p| p == n);
        Some(Self {
            width: idx("width")?,
            length: idx("length")?,
            height: idx("height")?,
            x: idx("x")?,
            y: idx("y")?,
            z: idx("z")?,
        })
    }

    /// `(x, y, z)` as stored; `z` is the elevation of the bottom face.
    pub fn location(&self, s: &State, o: usize) -> [f64; 3] {
        [s.get(o, self.x), s.get(o, self.y), s.get(o, self.z)]
    }

    pub fn center(&self, s: &State, o: usize) -> [f64; 3] {
        [
            s.get(o, self.x),
            s.get(o, self.y),
            s.get(o, self.z) + 0.5 * s.get(o, self.height),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub name: String,
    /// Number of continuous parameters.
    pub param_dim: usize,
    /// Number of target objects.
    pub arity: usize,
    /// Identifier of the control program that executes the action.
    pub program: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    properties: Vec<String>,
    references: Vec<ReferenceFn>,
    templates: Vec<ActionTemplate>,
    layout: PoseLayout,
}

impl Domain {
    pub fn new(
        properties: Vec<String>,
        references: Vec<ReferenceFn>,
        templates: Vec<ActionTemplate>,
    ) -> Result<Self> {
        for (i, p) in properties.iter().enumerate() {
            if properties[..i].contains(p) {
                return Err(SpareError::Domain(format!("duplicate property `{p}`")));
            }
        }
        for (i, r) in references.iter().enumerate() {
            if references[..i].iter().any(|q| q.name == r.name) {
                return Err(SpareError::Domain(format!("duplicate reference `{}`", r.name)));
            }
            if r.arity() == 0 {
                return Err(SpareError::Domain(format!("reference `{}` has arity 0", r.name)));
            }
        }
        for t in &templates {
            if t.arity == 0 {
                return Err(SpareError::Domain(format!("template `{}` has arity 0", t.name)));
            }
        }
        let layout = PoseLayout::resolve(&properties).ok_or_else(|| {
            SpareError::Domain(
                "spatial relations need width, length, height, x, y, z properties".into(),
            )
        })?;
        Ok(Self {
            properties,
            references,
            templates,
            layout,
        })
    }

    pub fn n_props(&self) -> usize {
        self.properties.len()
    }

    pub fn properties(&self) -> &[String] {
        &self.properties
    }

    pub fn references(&self) -> &[ReferenceFn] {
        &self.references
    }

    pub fn reference(&self, id: usize) -> Result<&ReferenceFn> {
        self.references
            .get(id)
            .ok_or_else(|| SpareError::Domain(format!("unknown reference function id {id}")))
    }

    pub fn templates(&self) -> &[ActionTemplate] {
        &self.templates
    }

    pub fn template(&self, id: usize) -> Result<&ActionTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| SpareError::Domain(format!("unknown action template id {id}")))
    }

    pub fn template_id(&self, name: &str) -> Option<usize> {
        self.templates.iter().position(|t| t.name == name)
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    /// Evaluate reference function `id` on `args`.
    pub fn apply_reference(&self, id: usize, state: &State, args: &[&[usize]]) -> Result<ObjectSet> {
        self.reference(id)?.apply(&self.layout, state, args)
    }
}

/// Property table of one state: `n_objects` rows of `n_props` values.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    n_props: usize,
    values: Vec<f64>,
}

impl State {
    pub fn from_rows(n_props: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(SpareError::Dataset("state needs at least one object".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * n_props);
        for r in rows {
            if r.len() != n_props {
                return Err(SpareError::Dimension {
                    expected: n_props,
                    got: r.len(),
                    context: "state row",
                });
            }
            values.extend_from_slice(r);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpareError::NonFinite("state"));
        }
        Ok(Self { n_props, values })
    }

    pub fn n_objects(&self) -> usize {
        self.values.len() / self.n_props
    }

    pub fn n_props(&self) -> usize {
        self.n_props
    }

    #[inline]
    pub fn get(&self, o: usize, p: usize) -> f64 {
        self.values[o * self.n_props + p]
    }

    #[inline]
    pub fn set(&mut self, o: usize, p: usize, v: f64) {
        self.values[o * self.n_props + p] = v;
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.values[o * self.n_props..(o + 1) * self.n_props]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_props)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionInstance {
    pub template: usize,
    pub alpha: Vec<f64>,
    /// Object indices within the instance.
    pub targets: Vec<usize>,
}

/// One `(s, a, s')` tuple; both states belong to the same instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub instance: u64,
    pub objects: Vec<ObjectId>,
    pub state: State,
    pub action: ActionInstance,
    pub next_state: State,
}

impl Experience {
    pub fn validate(&self, domain: &Domain) -> Result<()> {
        let n = self.objects.len();
        if n == 0 {
            return Err(SpareError::Dataset("instance has no objects".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].contains(o) {
                return Err(SpareError::Dataset(format!("duplicate object id {o}")));
            }
        }
        if self.state.n_objects() != n || self.next_state.n_objects() != n {
            return Err(SpareError::Dataset(
                "state and next state must cover the instance's objects".into(),
            ));
        }
        if self.state.n_props() != domain.n_props() || self.next_state.n_props() != domain.n_props() {
            return Err(SpareError::Dimension {
                expected: domain.n_props(),
                got: self.state.n_props(),
                context: "properties per object",
            });
        }
        let t = domain.template(self.action.template)?;
        if self.action.alpha.len() != t.param_dim {
            return Err(SpareError::Dimension {
                expected: t.param_dim,
                got: self.action.alpha.len(),
                context: "action parameters",
            });
        }
        if self.action.targets.len() != t.arity || self.action.targets.iter().any(|&o| o >= n) {
            return Err(SpareError::Dataset("action targets must be instance objects".into()));
        }
        if self.action.alpha.iter().any(|v| !v.is_finite()) {
            return Err(SpareError::NonFinite("action parameters"));
        }
        Ok(())
    }
}
