//! Fixtures shared by the benchmarks.

use gyrocal::preprocess::center;
use gyrocal::sim::{make_scenario, MotionProfile, Scenario};
use gyrocal::AlignedPairs;

/// Default noisy scenario with `n` samples at 100 Hz.
pub fn scenario_pairs(n: usize) -> AlignedPairs {
    let sc = Scenario {
        profile: MotionProfile {
            duration: n as f64 / 100.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let (p, _) = make_scenario(&sc, 1).expect("default scenario is valid");
    p
}

/// Centered version of [`scenario_pairs`], as the least-squares solve expects.
pub fn centered_pairs(n: usize) -> AlignedPairs {
    center(&scenario_pairs(n))
}
