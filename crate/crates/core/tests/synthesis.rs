use triplet_texture::evaluation::colocated_exemplar;
use triplet_texture::synthesis::{
    initialize, synthesize, synthesize_with, trace_to_csv, InitMode, Objective, Parameterization, SynthesisConfig,
};
use triplet_texture::{FeatureExtractor, MaterialStack, TexturalLoss};

fn toy_config(steps: usize) -> SynthesisConfig {
    SynthesisConfig {
        height: 32,
        width: 32,
        steps,
        seed: 11,
        ..Default::default()
    }
}

fn exact_loss(ex: &FeatureExtractor, a: &MaterialStack, b: &MaterialStack) -> f64 {
    TexturalLoss::new(ex).exact(a, b, 6).unwrap().total
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ex = FeatureExtractor::mock();
    let exemplar = colocated_exemplar(32, 1);
    let config = toy_config(30);
    let a = synthesize(&exemplar, &config, &ex).unwrap();
    let b = synthesize(&exemplar, &config, &ex).unwrap();
    assert_eq!(a.stack, b.stack);
    assert_eq!(a.trace, b.trace);
    assert_eq!(trace_to_csv(&a.trace), trace_to_csv(&b.trace));

    let other = synthesize(&exemplar, &SynthesisConfig { seed: 12, ..config }, &ex).unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn exact_loss_trends_down_during_optimization() {
    let ex = FeatureExtractor::mock();
    let exemplar = colocated_exemplar(32, 2);
    let config = SynthesisConfig {
        exact_every: 50,
        ..toy_config(200)
    };
    let out = synthesize(&exemplar, &config, &ex).unwrap();
    let exact: Vec<f64> = out.trace.iter().filter_map(|e| e.exact).collect();
    assert_eq!(exact.len(), 5);
    for w in exact.windows(2) {
        assert!(w[1] < w[0], "exact loss went up: {exact:?}");
    }
    let estimates: Vec<f64> = out.trace.iter().filter_map(|e| e.estimate).collect();
    let head = estimates[..20].iter().sum::<f64>();
    let tail = estimates[estimates.len() - 20..].iter().sum::<f64>();
    assert!(tail < head);
}

#[test]
fn stochastic_objective_lands_within_twice_the_exact_objective() {
    let ex = FeatureExtractor::mock();
    let exemplar = colocated_exemplar(32, 3);
    let stochastic = synthesize(&exemplar, &toy_config(200), &ex).unwrap();
    let exact = synthesize(
        &exemplar,
        &SynthesisConfig {
            objective: Objective::Exact,
            ..toy_config(200)
        },
        &ex,
    )
    .unwrap();
    let ls = exact_loss(&ex, &stochastic.stack, &exemplar);
    let le = exact_loss(&ex, &exact.stack, &exemplar);
    assert!(ls <= 2.0 * le, "stochastic {ls} vs exact {le}");
}

#[test]
fn every_objective_and_parameterization_reduces_the_loss() {
    let ex = FeatureExtractor::mock();
    let exemplar = colocated_exemplar(32, 4);
    let variants = [
        SynthesisConfig {
            parameterization: Parameterization::Clamped,
            ..toy_config(100)
        },
        SynthesisConfig {
            init: InitMode::UniformNoise,
            ..toy_config(100)
        },
        SynthesisConfig {
            objective: Objective::Separate {
                groups: vec![vec![0], vec![1]],
            },
            ..toy_config(100)
        },
        SynthesisConfig {
            objective: Objective::Stochastic { k: 4 },
            ..toy_config(100)
        },
    ];
    for config in variants {
        let init = initialize(&exemplar, &config).unwrap();
        let out = synthesize(&exemplar, &config, &ex).unwrap();
        let before = exact_loss(&ex, &init, &exemplar);
        let after = exact_loss(&ex, &out.stack, &exemplar);
        assert!(after < before, "{config:?}: {before} -> {after}");
        assert!(out.stack.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn checkpoints_arrive_at_the_configured_cadence() {
    let ex = FeatureExtractor::mock();
    let exemplar = colocated_exemplar(16, 5);
    let config = SynthesisConfig {
        height: 16,
        width: 16,
        checkpoint_every: 4,
        ..toy_config(10)
    };
    let mut steps = Vec::new();
    let out = synthesize_with(&exemplar, &config, &ex, &mut |step, stack| {
        assert_eq!(stack.data().dim(), (2, 16, 16));
        steps.push(step);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, [4, 8, 10]);
    assert_eq!(out.trace.len(), 11);
    assert_eq!(out.trace.last().unwrap().step, 10);
}

#[test]
fn output_size_is_independent_of_exemplar_size() {
    let ex = FeatureExtractor::mock();
    let exemplar = colocated_exemplar(16, 6);
    let config = SynthesisConfig {
        height: 24,
        width: 40,
        ..toy_config(3)
    };
    let out = synthesize(&exemplar, &config, &ex).unwrap();
    assert_eq!(out.stack.data().dim(), (2, 24, 40));
}
