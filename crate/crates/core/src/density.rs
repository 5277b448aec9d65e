//! Predictive distributions over state tables.
//!
//! A [`StateDistribution`] is a weighted mixture of factored components.
//! Inside a component every `(object, property)` cell is an independent,
//! uniformly weighted mixture of 1-D Gaussians. SPARE models and the
//! baseline both evaluate next states through [`StateDistribution::log_density`].

use std::f64::consts::PI;

use crate::error::{Result, SpareError};
use crate::relational::State;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normal {
    pub mean: f64,
    pub var: f64,
}

impl Normal {
    pub fn new(mean: f64, var: f64) -> Self {
        debug_assert!(var > 0.0, "variance must be positive");
        Self { mean, var }
    }

    pub fn log_pdf(&self, v: f64) -> f64 {
        log_normal(v, self.mean, self.var)
    }
}

/// Log-density of `N(mean, var)` at `v`.
#[inline]
pub fn log_normal(v: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (v - mean).powi(2) / var)
}

pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Uniform mixture of 1-D Gaussians for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell(pub Vec<Normal>);

impl Cell {
    pub fn single(n: Normal) -> Self {
        Cell(vec![n])
    }

    pub fn log_pdf(&self, v: f64) -> f64 {
        match self.0.as_slice() {
            [n] => n.log_pdf(v),
            parts => {
                let logs: Vec<f64> = parts.iter().map(|n| n.log_pdf(v)).collect();
                log_sum_exp(&logs) - (parts.len() as f64).ln()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|n| n.mean).sum::<f64>() / self.0.len() as f64
    }
}

/// Factored prediction: `n_objects * n_props` cells, object-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub n_props: usize,
    pub cells: Vec<Cell>,
}

impl Component {
    /// `N(s[o, p], var[p])` in every cell.
    pub fn centered(state: &State, var: &[f64]) -> Self {
        let np = state.n_props();
        let cells = state
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| Cell::single(Normal::new(v, var[i % np])))
            .collect();
        Self { n_props: np, cells }
    }

    pub fn cell(&self, o: usize, p: usize) -> &Cell {
        &self.cells[o * self.n_props + p]
    }

    pub fn cell_mut(&mut self, o: usize, p: usize) -> &mut Cell {
        &mut self.cells[o * self.n_props + p]
    }

    fn log_density(&self, next: &State, objects: Option<&[usize]>) -> f64 {
        let np = self.n_props;
        let row = |o: usize| (0..np).map(move |p| self.cell(o, p).log_pdf(next.get(o, p)));
        match objects {
            Some(objs) => objs.iter().flat_map(|&o| row(o)).sum(),
            None => (0..next.n_objects()).flat_map(row).sum(),
        }
    }
}

/// Which objects enter a log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Only the pushed stack: the target and everything above it.
    StackOnly,
    AllObjects,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateDistribution {
    n_objects: usize,
    n_props: usize,
    /// `(weight, component)`; weights sum to one.
    components: Vec<(f64, Component)>,
}

impl StateDistribution {
    pub fn single(n_objects: usize, c: Component) -> Self {
        Self {
            n_objects,
            n_props: c.n_props,
            components: vec![(1.0, c)],
        }
    }

    /// Mixture of `components` with the given weights, renormalized.
    pub fn mixture(n_objects: usize, components: Vec<(f64, Component)>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.0).sum();
        let Some(first) = components.first() else {
            return Err(SpareError::Domain("mixture needs at least one component".into()));
        };
        let n_props = first.1.n_props;
        if !(total > 0.0) || components.iter().any(|c| c.0 < 0.0) {
            return Err(SpareError::Domain("mixture weights must be nonnegative with positive sum".into()));
        }
        if components
            .iter()
            .any(|c| c.1.n_props != n_props || c.1.cells.len() != n_objects * n_props)
        {
            return Err(SpareError::Domain("mixture components disagree on shape".into()));
        }
        let components = components.into_iter().map(|(w, c)| (w / total, c)).collect();
        Ok(Self {
            n_objects,
            n_props,
            components,
        })
    }

    /// `N(s, diag(var))`, the prediction used when no rule applies.
    pub fn fallback(state: &State, var: &[f64]) -> Self {
        Self::single(state.n_objects(), Component::centered(state, var))
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn components(&self) -> &[(f64, Component)] {
        &self.components
    }

    /// Log-density of `next`, restricted to `objects` when given.
    pub fn log_density(&self, next: &State, objects: Option<&[usize]>) -> Result<f64> {
        if next.n_objects() != self.n_objects || next.n_props() != self.n_props {
            return Err(SpareError::Dimension {
                expected: self.n_objects * self.n_props,
                got: next.values().len(),
                context: "next state vs predicted distribution",
            });
        }
        if let Some(&o) = objects.and_then(|objs| objs.iter().find(|&&o| o >= self.n_objects)) {
            return Err(SpareError::Domain(format!("object index {o} out of range")));
        }
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|(w, c)| w.ln() + c.log_density(next, objects))
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// Marginal density of cell `(o, p)` at `v`.
    pub fn cell_pdf(&self, o: usize, p: usize, v: f64) -> f64 {
        self.components
            .iter()
            .map(|(w, c)| w * c.cell(o, p).log_pdf(v).exp())
            .sum()
    }

    /// Marginal mean of cell `(o, p)`.
    pub fn cell_mean(&self, o: usize, p: usize) -> f64 {
        self.components.iter().map(|(w, c)| w * c.cell(o, p).mean()).sum()
    }
}
