//! The analytical FLOPs model against the flops actually executed by the
//! forward pass (every matmul counts 2·m·k·n, recovery combines elementwise).

mod common;

use common::{executed, random_case};
use funnel::cost_model::flops_estimate;
use funnel::funnel_ops::FunnelConfig;
use funnel::model::{HeadKind, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn estimate_matches_executed_flops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for case in 0..24 {
        let (mc, fc, seq) = random_case(&mut rng);
        let state = ModelState::init(mc.clone(), fc.clone(), case).unwrap();
        for head in [HeadKind::Sentence, HeadKind::Token] {
            let report = flops_estimate(&mc, &fc, seq, head).unwrap();
            let batch = rng.random_range(1..=3);
            let got = executed(&state, seq, batch, head, &mut rng);
            assert_eq!(
                got,
                batch as u64 * report.total,
                "case {case} {head:?}: {mc:?} {fc:?} seq {seq}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn baseline_total_matches_unfunneled_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..5 {
        let (mc, fc, seq) = random_case(&mut rng);
        let report = flops_estimate(&mc, &fc, seq, HeadKind::Sentence).unwrap();
        let base = ModelState::init(mc.clone(), FunnelConfig::no_funnel(mc.n_layers), case).unwrap();
        assert_eq!(executed(&base, seq, 1, HeadKind::Sentence, &mut rng), report.baseline_total);
    }
}
