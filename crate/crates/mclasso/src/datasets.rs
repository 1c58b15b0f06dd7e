//! Small bundled datasets used by the test suites and CLI examples.

use crate::chain::{TransitionCounts, TransitionMatrix, ValidityMode};

/// Transition counts of a 10,000-length ACGT promoter sequence
/// (states A, C, G, T mapped to 1..4).
pub fn acgt_counts() -> TransitionCounts {
    TransitionCounts::new(&[
        vec![896, 478, 625, 927],
        vec![665, 462, 218, 579],
        vec![645, 440, 466, 531],
        vec![720, 543, 774, 1030],
    ])
    .expect("static counts are square")
}

/// Reference 3-state chain with four pairs of exactly equal transition
/// probabilities, used by the simulation study.
pub fn sim_truth() -> TransitionMatrix {
    TransitionMatrix::new(
        &[
            vec![0.4, 0.2, 0.4],
            vec![0.5, 0.3, 0.2],
            vec![0.4, 0.34, 0.26],
        ],
        ValidityMode::StrictErgodic,
    )
    .expect("static matrix is valid")
}

/// Reference 3-state chain with a single equal pair p_12 = p_32 = 0.1,
/// used for MLE equality-detection and difference-distribution checks.
pub fn equal_pair_truth() -> TransitionMatrix {
    TransitionMatrix::new(
        &[
            vec![0.4, 0.1, 0.5],
            vec![0.45, 0.3, 0.25],
            vec![0.2, 0.1, 0.7],
        ],
        ValidityMode::StrictErgodic,
    )
    .expect("static matrix is valid")
}

/// Counts observed from a 50,000-length realization of [`sim_truth`].
pub fn sim_counts() -> TransitionCounts {
    TransitionCounts::new(&[
        vec![8508, 4277, 8583],
        vec![6823, 3985, 2684],
        vec![6038, 5230, 3871],
    ])
    .expect("static counts are square")
}
