//! Kinematic surrogate of the tabletop pushing domain.
//!
//! Scenes hold one stable stack of blocks plus free-standing distractors on a
//! 1 m x 1 m table. A push translates the target block and everything
//! stacked on it along the gripper-to-target direction; there is no
//! friction, toppling or rotation. A scalar Gaussian perturbation of the push
//! distance models execution noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Scope;
use crate::error::{Result, SpareError};
use crate::relational::{
    ActionInstance, ActionTemplate, Aggregator, Domain, Experience, PoseLayout, ReferenceFn,
    Relation, State,
};
use crate::seed::derive_seed;

/// Property order of the blocks domain.
pub const PROPERTIES: [&str; 6] = ["width", "length", "height", "x", "y", "z"];

pub const PUSH: &str = "push";

/// Reference ids of [`blocks_domain`].
pub mod refs {
    pub const ABOVE: usize = 0;
    pub const ABOVE_STAR: usize = 1;
    pub const BELOW: usize = 2;
    pub const NEAREST: usize = 3;
}

/// Blocks domain: six shape/pose properties, the `above`, `above*`, `below`
/// and `nearest` references, and a single `push` template with parameters
/// `(x_g, y_g, z_g, d)` acting on one target.
pub fn blocks_domain() -> Domain {
    Domain::new(
        PROPERTIES.iter().map(|s| s.to_string()).collect(),
        vec![
            ReferenceFn::new("above", Relation::Above, Aggregator::Mean),
            ReferenceFn::new("above*", Relation::AboveStar, Aggregator::Mean),
            ReferenceFn::new("below", Relation::Below, Aggregator::Mean),
            ReferenceFn::new("nearest", Relation::Nearest, Aggregator::Mean),
        ],
        vec![ActionTemplate {
            name: PUSH.into(),
            param_dim: 4,
            arity: 1,
            program: "kinematic_push".into(),
        }],
    )
    .expect("blocks domain is well formed")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub id: u32,
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Block {
    fn row(&self) -> Vec<f64> {
        vec![self.width, self.length, self.height, self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushAction {
    pub gripper: [f64; 3],
    pub distance: f64,
    /// Object index of the pushed block.
    pub target: usize,
}

impl PushAction {
    pub fn alpha(&self) -> Vec<f64> {
        vec![self.gripper[0], self.gripper[1], self.gripper[2], self.distance]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetChoice {
    /// Always push the bottom block of the stack.
    #[default]
    Bottom,
    /// Push a uniformly chosen block of the stack.
    AnyStackBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub stack_height: usize,
    pub extras: usize,
    /// Block edge length range (m), shared by width, length and height.
    pub edge_range: (f64, f64),
    /// Side of the square table (m).
    pub table_size: f64,
    /// Stack base center keeps this distance from the table edge (m).
    pub stack_margin: f64,
    /// Minimum horizontal center distance between a distractor and any stack
    /// block (m).
    pub clearance: f64,
    /// Fraction of the supporting half-extent a stacked block's center may
    /// be offset by.
    pub stack_offset_frac: f64,
    pub push_range: (f64, f64),
    /// Horizontal gripper distance from the target center at push start (m).
    pub gripper_offset_range: (f64, f64),
    pub gripper_z_range: (f64, f64),
    pub action_noise_std: f64,
    pub target: TargetChoice,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            stack_height: 3,
            extras: 0,
            edge_range: (0.04, 0.10),
            table_size: 1.0,
            stack_margin: 0.3,
            clearance: 0.3,
            stack_offset_frac: 0.8,
            push_range: (0.02, 0.15),
            gripper_offset_range: (0.08, 0.08),
            gripper_z_range: (0.005, 0.035),
            action_noise_std: 0.005,
            target: TargetChoice::Bottom,
            max_retries: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.stack_height == 0 {
            return Err(SpareError::Config("stack height must be at least 1".into()));
        }
        if !ordered(self.edge_range) || self.edge_range.0 <= 0.0 {
            return Err(SpareError::Config("edge range must be positive and ordered".into()));
        }
        if !ordered(self.push_range) || self.push_range.0 < 0.0 {
            return Err(SpareError::Config("push range must be nonnegative and ordered".into()));
        }
        if !ordered(self.gripper_offset_range) || self.gripper_offset_range.0 <= 0.0 {
            return Err(SpareError::Config("gripper offset range must be positive".into()));
        }
        if !ordered(self.gripper_z_range) {
            return Err(SpareError::Config("gripper height range must be ordered".into()));
        }
        if !(self.action_noise_std >= 0.0) {
            return Err(SpareError::Config("action noise must be nonnegative".into()));
        }
        if 2.0 * self.stack_margin >= self.table_size {
            return Err(SpareError::Config("stack margin leaves no room on the table".into()));
        }
        if !(0.0..=1.0).contains(&self.stack_offset_frac) {
            return Err(SpareError::Config("stack offset fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A sampled scene; `stack` lists object indices bottom-up.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub blocks: Vec<Block>,
    pub stack: Vec<usize>,
}

impl Scene {
    pub fn state(&self) -> State {
        let rows: Vec<Vec<f64>> = self.blocks.iter().map(Block::row).collect();
        State::from_rows(PROPERTIES.len(), &rows).expect("finite block poses")
    }

    pub fn object_ids(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.id).collect()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn footprints_overlap(a: &Block, b: &Block, margin: f64) -> bool {
    (a.x - b.x).abs() < 0.5 * (a.width + b.width) + margin
        && (a.y - b.y).abs() < 0.5 * (a.length + b.length) + margin
}

/// Sample a scene: a stable stack of `stack_height` blocks and `extras`
/// non-overlapping distractors at least `clearance` from the stack base.
/// Object order within the instance is shuffled.
pub fn sample_instance<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let mut blocks: Vec<Block> = Vec::with_capacity(cfg.stack_height + cfg.extras);
    let lo = cfg.stack_margin;
    let hi = cfg.table_size - cfg.stack_margin;
    let mut z = 0.0;
    for k in 0..cfg.stack_height {
        let (width, length, height) = (
            uniform(rng, cfg.edge_range),
            uniform(rng, cfg.edge_range),
            uniform(rng, cfg.edge_range),
        );
        let (x, y) = match blocks.last() {
            None => (uniform(rng, (lo, hi)), uniform(rng, (lo, hi))),
            Some(below) => {
                let hx = 0.5 * below.width * cfg.stack_offset_frac;
                let hy = 0.5 * below.length * cfg.stack_offset_frac;
                (
                    below.x + uniform(rng, (-hx, hx)),
                    below.y + uniform(rng, (-hy, hy)),
                )
            }
        };
        blocks.push(Block {
            id: k as u32,
            width,
            length,
            height,
            x,
            y,
            z,
        });
        z += height;
    }

    let max_edge = cfg.edge_range.1;
    for _ in 0..cfg.extras {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let cand = Block {
                id: blocks.len() as u32,
                width: uniform(rng, cfg.edge_range),
                length: uniform(rng, cfg.edge_range),
                height: uniform(rng, cfg.edge_range),
                x: uniform(rng, (0.5 * max_edge, cfg.table_size - 0.5 * max_edge)),
                y: uniform(rng, (0.5 * max_edge, cfg.table_size - 0.5 * max_edge)),
                z: 0.0,
            };
            let far = blocks[..cfg.stack_height]
                .iter()
                .all(|b| ((cand.x - b.x).powi(2) + (cand.y - b.y).powi(2)).sqrt() >= cfg.clearance);
            let free = blocks.iter().all(|b| !footprints_overlap(b, &cand, 0.005));
            if far && free {
                blocks.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SpareError::Generation {
                attempts: cfg.max_retries,
                reason: format!("could not place distractor {} of {}", blocks.len() - cfg.stack_height + 1, cfg.extras),
            });
        }
    }

    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(rng);
    // order[new] = old
    let mut new_of_old = vec![0; blocks.len()];
    for (new, &old) in order.iter().enumerate() {
        new_of_old[old] = new;
    }
    let stack = (0..cfg.stack_height).map(|k| new_of_old[k]).collect();
    let blocks = order
        .iter()
        .enumerate()
        .map(|(new, &old)| Block {
            id: new as u32,
            ..blocks[old].clone()
        })
        .collect();
    Ok(Scene { blocks, stack })
}

/// Sample push parameters toward `target`.
pub fn sample_push<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    state: &State,
    layout: &PoseLayout,
    target: usize,
    rng: &mut R,
) -> PushAction {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let r = uniform(rng, cfg.gripper_offset_range);
    let tx = state.get(target, layout.x);
    let ty = state.get(target, layout.y);
    PushAction {
        gripper: [
            tx - r * theta.cos(),
            ty - r * theta.sin(),
            uniform(rng, cfg.gripper_z_range),
        ],
        distance: uniform(rng, cfg.push_range),
        target,
    }
}

fn vertical_overlap(state: &State, l: &PoseLayout, a: usize, b: usize) -> bool {
    let (za, ha) = (state.get(a, l.z), state.get(a, l.height));
    let (zb, hb) = (state.get(b, l.z), state.get(b, l.height));
    za < zb + hb && zb < za + ha
}

/// Earliest `t` in `[0, max_t]` at which block `m`, moving along `u`, first
/// touches static block `q` (footprints as axis-aligned rectangles).
fn contact_time(state: &State, l: &PoseLayout, m: usize, q: usize, u: [f64; 2], max_t: f64) -> Option<f64> {
    let half = [
        0.5 * (state.get(m, l.width) + state.get(q, l.width)),
        0.5 * (state.get(m, l.length) + state.get(q, l.length)),
    ];
    let rel = [
        state.get(m, l.x) - state.get(q, l.x),
        state.get(m, l.y) - state.get(q, l.y),
    ];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for ax in 0..2 {
        if u[ax].abs() < 1e-15 {
            if rel[ax].abs() >= half[ax] {
                return None;
            }
            continue;
        }
        let t1 = (-half[ax] - rel[ax]) / u[ax];
        let t2 = (half[ax] - rel[ax]) / u[ax];
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    // already interpenetrating at t = 0 is not treated as a contact
    (t_enter < t_exit && t_enter >= 0.0 && t_enter <= max_t).then_some(t_enter)
}

/// Advance the surrogate dynamics by one push.
///
/// The target and everything transitively stacked on it translate by
/// `(d + eps) * u` with `u` the unit vector from the gripper to the target
/// and `eps ~ N(0, noise_std^2)` drawn once. If the moving blocks would hit
/// a static block, they stop at contact and the struck block (with whatever
/// rests on it) takes the remaining displacement.
pub fn step<R: Rng + ?Sized>(
    state: &State,
    layout: &PoseLayout,
    action: &PushAction,
    noise_std: f64,
    rng: &mut R,
) -> State {
    let mut next = state.clone();
    let t = action.target;
    let dir = [
        state.get(t, layout.x) - action.gripper[0],
        state.get(t, layout.y) - action.gripper[1],
    ];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    let eps = if noise_std > 0.0 {
        Normal::new(0.0, noise_std).expect("valid std").sample(rng)
    } else {
        0.0
    };
    let total = action.distance + eps;
    if norm < 1e-12 || total == 0.0 {
        return next;
    }
    let u = [dir[0] / norm, dir[1] / norm];

    let mut moving = Relation::AboveStar.eval(layout, state, &[t]);
    moving.push(t);
    moving.sort_unstable();

    let mut hit: Option<(f64, usize)> = None;
    if total > 0.0 {
        for &m in &moving {
            for q in 0..state.n_objects() {
                if moving.binary_search(&q).is_ok() || !vertical_overlap(state, layout, m, q) {
                    continue;
                }
                if let Some(tc) = contact_time(state, layout, m, q, u, total) {
                    if hit.is_none_or(|(bt, _)| tc < bt) {
                        hit = Some((tc, q));
                    }
                }
            }
        }
    }

    let travel = hit.map_or(total, |(tc, _)| tc);
    translate(&mut next, layout, &moving, u, travel);
    if let Some((tc, q)) = hit {
        let mut struck = Relation::AboveStar.eval(layout, state, &[q]);
        struck.push(q);
        struck.retain(|o| moving.binary_search(o).is_err());
        translate(&mut next, layout, &struck, u, total - tc);
    }
    next
}

fn translate(s: &mut State, l: &PoseLayout, objs: &[usize], u: [f64; 2], dist: f64) {
    for &o in objs {
        s.set(o, l.x, s.get(o, l.x) + dist * u[0]);
        s.set(o, l.y, s.get(o, l.y) + dist * u[1]);
    }
}

/// Stack-height mixture, e.g. `2:0.15,3:0.15,4:0.70`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMix {
    pub entries: Vec<(usize, f64)>,
}

impl StackMix {
    pub fn single(height: usize) -> Self {
        Self {
            entries: vec![(height, 1.0)],
        }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (h, f) = part
                .split_once(':')
                .ok_or_else(|| SpareError::Config(format!("bad mix entry `{part}`")))?;
            let h: usize = h
                .trim()
                .parse()
                .map_err(|_| SpareError::Config(format!("bad stack height in `{part}`")))?;
            let f: f64 = f
                .trim()
                .parse()
                .map_err(|_| SpareError::Config(format!("bad fraction in `{part}`")))?;
            if h == 0 || !(f >= 0.0) {
                return Err(SpareError::Config(format!("bad mix entry `{part}`")));
            }
            entries.push((h, f));
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if entries.is_empty() || (total - 1.0).abs() > 1e-6 {
            return Err(SpareError::Config(format!("mix fractions must sum to 1, got {total}")));
        }
        Ok(Self { entries })
    }

    /// Per-entry counts for `n` samples (largest remainder rounding).
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let raw: Vec<f64> = self.entries.iter().map(|e| e.1 * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        counts
    }
}

/// Generate one experience from scene config `cfg` with its own RNG.
pub fn generate_one(domain: &Domain, cfg: &SceneConfig, instance: u64, seed: u64) -> Result<Experience> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_instance(cfg, &mut rng)?;
    let state = scene.state();
    let target = match cfg.target {
        TargetChoice::Bottom => scene.stack[0],
        TargetChoice::AnyStackBlock => scene.stack[rng.random_range(0..scene.stack.len())],
    };
    let push = sample_push(cfg, &state, domain.layout(), target, &mut rng);
    let next_state = step(&state, domain.layout(), &push, cfg.action_noise_std, &mut rng);
    let template = domain
        .template_id(PUSH)
        .ok_or_else(|| SpareError::Domain("domain has no push template".into()))?;
    Ok(Experience {
        instance,
        objects: scene.object_ids(),
        state,
        action: ActionInstance {
            template,
            alpha: push.alpha(),
            targets: vec![target],
        },
        next_state,
    })
}

/// Generate `count` experiences, one per freshly sampled instance. The
/// stack height of each sample follows `mix` (shuffled deterministically).
/// Output depends only on `(cfg, mix, count, seed)`, not on thread count.
pub fn generate_dataset(
    domain: &Domain,
    cfg: &SceneConfig,
    mix: &StackMix,
    count: usize,
    seed: u64,
) -> Result<Vec<Experience>> {
    if count == 0 {
        return Err(SpareError::Config("dataset count must be at least 1".into()));
    }
    let mut heights: Vec<usize> = mix
        .entries
        .iter()
        .zip(mix.counts(count))
        .flat_map(|(&(h, _), c)| std::iter::repeat_n(h, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    heights.shuffle(&mut rng);
    heights
        .par_iter()
        .enumerate()
        .map(|(i, &h)| {
            let c = SceneConfig {
                stack_height: h,
                ..cfg.clone()
            };
            generate_one(domain, &c, i as u64, derive_seed(seed, i as u64))
        })
        .collect()
}

/// Stack containing the pushed target, bottom-up: the target followed by
/// everything stacked on it, ordered by elevation.
pub fn pushed_stack(domain: &Domain, e: &Experience) -> Vec<usize> {
    let l = domain.layout();
    let t = e.action.targets[0];
    let mut above = Relation::AboveStar.eval(l, &e.state, &[t]);
    above.sort_by(|&a, &b| {
        e.state
            .get(a, l.z)
            .partial_cmp(&e.state.get(b, l.z))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![t];
    out.extend(above);
    out
}

/// Objects whose cells enter a log-likelihood under `scope`; `None` means
/// every object.
pub fn scope_objects(domain: &Domain, e: &Experience, scope: Scope) -> Option<Vec<usize>> {
    match scope {
        Scope::StackOnly => Some(pushed_stack(domain, e)),
        Scope::AllObjects => None,
    }
}
