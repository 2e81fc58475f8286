mod common;

use lahcn::classifier::Variant;
use lahcn::corpus::{Document, Vocabulary};
use lahcn::synthetic::{generate, SyntheticSpec};
use lahcn::training::{
    batch_loss, init_params, loss_and_gradients, optimizer_step, OptimizerKind, OptimizerState, TrainConfig,
};

/// Central differences against the tape, allowing for the rounding noise of
/// two f64 loss evaluations (`ε·|L|/h` each) on top of a 1e-4 relative
/// budget. A wrong gradient shows up orders of magnitude above this bound.
#[test]
fn end_to_end_gradients_match_within_roundoff() {
    let step = 1e-5;
    for variant in [Variant::Full, Variant::Nc, Variant::Local, Variant::Global] {
        for seed in [7, 11, 23] {
            let cfg = TrainConfig { seed, variant, ..common::micro_config() };
            let (hier, docs, params) = common::micro_model(&cfg);
            let batch: Vec<&Document> = docs.iter().collect();
            let (loss, grads) = loss_and_gradients(&params, &batch, &hier).unwrap();
            let noise = 10.0 * f64::EPSILON * loss.abs() / step;
            let names = params.tensors.names();
            for (k, analytic) in grads.tensors().into_iter().enumerate() {
                for r in 0..analytic.rows() {
                    for c in 0..analytic.cols() {
                        let mut probe = params.clone();
                        let orig = probe.tensors.tensors()[k].get(r, c);
                        probe.tensors.tensors_mut()[k].set(r, c, orig + step);
                        let up = batch_loss(&probe, &batch, &hier).unwrap();
                        probe.tensors.tensors_mut()[k].set(r, c, orig - step);
                        let down = batch_loss(&probe, &batch, &hier).unwrap();
                        let numeric = (up - down) / (2.0 * step);
                        let a = analytic.get(r, c);
                        let bound = 1e-4 * a.abs().max(numeric.abs()) + noise;
                        assert!(
                            (a - numeric).abs() <= bound,
                            "{} seed {seed} {}[{r},{c}]: analytic {a:e} numeric {numeric:e}",
                            variant.as_str(),
                            names[k]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn roundoff_shrinks_with_larger_steps() {
    // rounding error scales like 1/h, truncation like h²; the disagreement
    // at 1e-5 must therefore drop when the step grows to 1e-4
    let cfg = common::micro_config();
    let (hier, docs, params) = common::micro_model(&cfg);
    let batch: Vec<&Document> = docs.iter().collect();
    let (_, grads) = loss_and_gradients(&params, &batch, &hier).unwrap();
    let worst_at = |step: f64| {
        let mut worst = 0.0f64;
        for (k, analytic) in grads.tensors().into_iter().enumerate() {
            for r in 0..analytic.rows() {
                for c in 0..analytic.cols() {
                    let mut probe = params.clone();
                    let orig = probe.tensors.tensors()[k].get(r, c);
                    probe.tensors.tensors_mut()[k].set(r, c, orig + step);
                    let up = batch_loss(&probe, &batch, &hier).unwrap();
                    probe.tensors.tensors_mut()[k].set(r, c, orig - step);
                    let down = batch_loss(&probe, &batch, &hier).unwrap();
                    worst = worst.max((analytic.get(r, c) - (up - down) / (2.0 * step)).abs());
                }
            }
        }
        worst
    };
    let fine = worst_at(1e-5);
    let coarse = worst_at(1e-4);
    assert!(coarse < fine / 3.0, "1e-5: {fine:e}, 1e-4: {coarse:e}");
}

#[test]
fn single_descent_step_does_not_increase_the_objective() {
    let corpus = generate(&SyntheticSpec { documents: 12, ..SyntheticSpec::default() }).unwrap();
    let vocab = Vocabulary::build(&corpus.documents, 1).unwrap();
    let variants = [Variant::Full, Variant::Nc, Variant::Local, Variant::Global];
    for seed in 0..20u64 {
        let cfg = TrainConfig {
            seed,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            dim: [4, 8, 16][seed as usize % 3],
            components: vec![1 + seed as usize % 4],
            variant: variants[seed as usize % 4],
            ..TrainConfig::default()
        };
        let mut params = init_params(&cfg, &corpus.hierarchy, &vocab, None).unwrap();
        let start = (seed as usize * 5) % corpus.documents.len();
        let batch: Vec<&Document> = corpus.documents.iter().cycle().skip(start).take(4).collect();
        let (before, grads) = loss_and_gradients(&params, &batch, &corpus.hierarchy).unwrap();
        let mut state = OptimizerState::new(cfg.optimizer, &params.tensors);
        optimizer_step(&mut params.tensors, &grads, &mut state, &cfg).unwrap();
        let after = batch_loss(&params, &batch, &corpus.hierarchy).unwrap();
        assert!(after <= before, "seed {seed}: {before} -> {after}");
    }
}
