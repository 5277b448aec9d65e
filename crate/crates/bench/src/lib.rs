//! Shared fixtures for the benchmarks.

use spare_core::relational::{DeicticStep, Domain, Experience, ReferenceList};
use spare_core::sim::{blocks_domain, generate_dataset, refs, SceneConfig, StackMix};

/// Blocks domain plus `count` three-stack experiences with `extras`
/// distractors.
pub fn stack_data(count: usize, extras: usize, seed: u64) -> (Domain, Vec<Experience>) {
    let d = blocks_domain();
    let cfg = SceneConfig {
        extras,
        ..SceneConfig::default()
    };
    let exps = generate_dataset(&d, &cfg, &StackMix::single(3), count, seed).expect("valid scene config");
    (d, exps)
}

/// `[above(O1), above(O2)]`, the list that covers a three-stack.
pub fn stack_list(d: &Domain) -> ReferenceList {
    ReferenceList::new(
        d,
        1,
        vec![DeicticStep::new(refs::ABOVE, vec![0]), DeicticStep::new(refs::ABOVE, vec![1])],
    )
    .expect("valid list")
}
