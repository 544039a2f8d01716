//! Protocol invariants checked over randomly generated command traces.

mod common;

use common::{check_all, fixture, op, scripted_trace, Trace};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_traces_respect_protocol_invariants(which in any::<bool>(), ops in prop::collection::vec(op(), 1..120)) {
        let mut trace = Trace::new(fixture(which));
        for op in &ops {
            trace.apply(op);
        }
        check_all(&trace);
    }

    /// Traces biased toward progress: the scripted fixture run with random
    /// noise injected into the labels and random extra reads.
    #[test]
    fn noisy_scripted_traces_respect_protocol_invariants(
        which in any::<bool>(),
        noise in prop::collection::vec(prop::collection::vec((0usize..200, 0usize..4), 0..6), 8),
        reads in prop::collection::vec((0usize..8, 0usize..8), 8),
    ) {
        let trace = scripted_trace(which, &noise, &reads);
        check_all(&trace);
    }
}
