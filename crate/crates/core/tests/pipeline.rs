use kcm::pipeline::{ablate, ablation_csv, evaluate, prune, synth, PruneOptions, SynthOptions};
use kcm::ranker::Strategy;
use kcm::tensorstore::{duplicate_groups, synth_model};
use kcm::{Error, ModelConfig};

fn fixture(seed: u64) -> (kcm::ModelBundle, kcm::TokenBatch) {
    synth(&SynthOptions {
        seed,
        redundancy: 0.3,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn more_budget_never_costs_more_loss() {
    let (m, b) = fixture(2);
    let rows = ablate(&m, &b, &[0.9, 0.6], &Strategy::ALL, &PruneOptions::default()).unwrap();
    for pair in rows.chunks(2) {
        assert_eq!(pair[0].strategy, pair[1].strategy);
        assert!(pair[0].k > pair[1].k);
        assert!(
            pair[0].total_loss <= pair[1].total_loss,
            "{}: {} > {}",
            pair[0].strategy,
            pair[0].total_loss,
            pair[1].total_loss
        );
    }
}

#[test]
fn ablation_lists_every_arm_in_order() {
    let (m, b) = fixture(3);
    let arms = [Strategy::R2Only, Strategy::D2Only, Strategy::R2d2];
    let csv = ablation_csv(&ablate(&m, &b, &[0.8], &arms, &PruneOptions::default()).unwrap());
    let first: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["r2_only", "d2_only", "r2d2"]);
}

#[test]
fn synth_duplicate_count() {
    let m = synth_model(0, &ModelConfig::new(3, 8, 16, 2, 10, 4), 0.5).unwrap();
    for layer in &m.layers {
        let dups: usize = duplicate_groups(layer).iter().map(|g| g.len() - 1).sum();
        assert_eq!(dups, 8);
    }
}

#[test]
fn synth_tokens_stay_in_vocab() {
    let (_, b) = synth(&SynthOptions {
        vocab: 7,
        num_sequences: 40,
        ..Default::default()
    })
    .unwrap();
    assert!(b.sequences.iter().flat_map(|s| &s.ids).all(|&id| id < 7));
}

#[test]
fn every_strategy_runs_end_to_end() {
    let (m, b) = fixture(4);
    for strategy in Strategy::ALL {
        let out = prune(
            &m,
            &b,
            &PruneOptions {
                flops: 0.75,
                strategy,
                ..Default::default()
            },
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(r.retained_per_layer.iter().sum::<usize>(), r.k);
        assert!(r.achieved_relative_flops <= 0.75);
        assert_eq!(r.kcha.is_some(), strategy.uses_kernel());
        let e = evaluate(&m, &out.pruned, &b, None).unwrap();
        assert_eq!(e.achieved_relative_flops, r.achieved_relative_flops);
    }
}

#[test]
fn num_samples_takes_a_prefix() {
    let (m, b) = fixture(5);
    let opts = PruneOptions {
        num_samples: 10,
        ..Default::default()
    };
    let a = prune(&m, &b, &opts).unwrap();
    let c = prune(&m, &b.first(10), &opts).unwrap();
    assert_eq!(a.report.num_sequences, 10);
    assert_eq!(a.report.pruned_hash, c.report.pruned_hash);
}

#[test]
fn eval_rejects_mismatched_models() {
    let (m, b) = fixture(6);
    let other = synth_model(6, &ModelConfig::new(3, 16, 64, 2, 100, 16), 0.0).unwrap();
    assert!(matches!(evaluate(&m, &other, &b, None), Err(Error::ModelMismatch(_))));
}

#[test]
fn non_convergence_is_reported_not_fatal() {
    let (m, b) = fixture(7);
    let mut opts = PruneOptions::default();
    opts.kernel.max_iters = 2;
    let out = prune(&m, &b, &opts).unwrap();
    let layers = &out.report.kcha.unwrap().layers;
    assert!(layers.iter().all(|l| !l.converged && l.iterations == 2));
}
