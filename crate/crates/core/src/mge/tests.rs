use super::*;
use crate::data::Sample;
use crate::models::{build, ModelConfig, ModelKind};
use crate::tensor::Tensor;
use num_bigint::BigInt;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn toy_data(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| Sample {
            input: Tensor::from_fn(&[1, 1, size, size], |_| rng.random_range(0.0..1.0)),
            target: Tensor::from_fn(&[1, 1, size, size], |_| rng.random_range(0.0..1.0)),
            noise_level: None,
        })
        .collect();
    Dataset::new(samples).unwrap()
}

fn small_model(kind: ModelKind) -> ModelConfig {
    let cfg = match kind {
        ModelKind::ConvStack => ModelConfig::convstack(vec![1, 4, 1]),
        ModelKind::ResNet => ModelConfig::resnet(1, 4, 1, 1),
        ModelKind::UNet => ModelConfig::unet(1, &[3, 4], 1),
    };
    cfg.with_zero_final(false)
}

#[test]
fn plan_examples() {
    assert_eq!(LevelPlan::doubling(4, 16).unwrap().batch_sizes(), [16, 32, 64, 128]);
    assert_eq!(LevelPlan::doubling(1, 7).unwrap().batch_sizes(), [7]);
    let p = LevelPlan::explicit(vec![16, 64]).unwrap();
    assert_eq!(p.batch_sizes(), [16, 64]);
    assert_eq!(p.rule(), PlanRule::Explicit);
    assert!(LevelPlan::doubling(0, 1).is_err());
    assert!(LevelPlan::explicit(vec![]).is_err());
    assert!(LevelPlan::explicit(vec![1, 0]).is_err());
}

#[test]
fn truncation_keeps_coarse_batches() {
    let p = LevelPlan::doubling(4, 2).unwrap();
    let t = p.truncate(MeshLevel::new(3).unwrap()).unwrap();
    assert_eq!(t.batch_sizes(), [8, 16]);
    assert_eq!(t.finest().index(), 3);
    assert_eq!(t.coarsest().index(), 4);
    assert_eq!(t.batch(MeshLevel::new(4).unwrap()), Some(16));
    assert_eq!(t.batch(MeshLevel::FINEST), None);
    assert!(p.truncate(MeshLevel::new(5).unwrap()).is_err());
    assert_eq!(t.step_cost(), q(1, 1) * q(2 * 7, 16));
}

#[test]
fn step_costs() {
    assert_eq!(LevelPlan::doubling(4, 16).unwrap().step_cost(), q(37, 1));
    assert_eq!(LevelPlan::explicit(vec![16, 64]).unwrap().step_cost(), q(9 * 64, 16));
    assert_eq!(LevelPlan::doubling(1, 5).unwrap().step_cost(), q(5, 1));
}

#[test]
fn estimator_charges_the_plan_cost() {
    let data = toy_data(8, 16, 0);
    let (m, p) = build(small_model(ModelKind::ConvStack), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let plan = LevelPlan::explicit(vec![1, 4]).unwrap();
    let mut s = RandomSampler::new(ChaCha8Rng::seed_from_u64(2));
    let est = mge_gradient(&m, &p, &data, &mut s, &plan).unwrap();
    assert_eq!(*est.wu_cost(), q(9 * 4, 16));
    let single = single_scale_gradient(&m, &p, &data, &mut s, 4, MeshLevel::new(2).unwrap()).unwrap();
    assert_eq!(*single.wu_cost(), q(1, 1));
    let fine = single_scale_gradient(&m, &p, &data, &mut s, 4, MeshLevel::FINEST).unwrap();
    assert_eq!(*fine.wu_cost(), q(4, 1));
}

#[test]
fn one_level_is_single_scale_bitwise() {
    let data = toy_data(6, 8, 3);
    let (m, p) = build(small_model(ModelKind::ResNet), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let plan = LevelPlan::doubling(1, 3).unwrap();
    let a = mge_gradient(&m, &p, &data, &mut RandomSampler::new(ChaCha8Rng::seed_from_u64(5)), &plan).unwrap();
    let b = single_scale_gradient(&m, &p, &data, &mut RandomSampler::new(ChaCha8Rng::seed_from_u64(5)), 3, MeshLevel::FINEST)
        .unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.grads.flatten(), b.grads.flatten());
    assert_eq!(a.terms, b.terms);
}

#[test]
fn full_batch_telescopes_to_fine_loss() {
    let data = toy_data(3, 32, 6);
    for kind in [ModelKind::ConvStack, ModelKind::ResNet, ModelKind::UNet] {
        let (m, p) = build(small_model(kind), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let (fine, _) = crate::models::loss_and_grad(&m, &p, &data.batch(&all, MeshLevel::FINEST).unwrap()).unwrap();
        for levels in 1..=4 {
            let plan = LevelPlan::doubling(levels, 1).unwrap();
            let est = mge_gradient(&m, &p, &data, &mut FullBatch, &plan).unwrap();
            assert!((est.loss - fine).abs() < 1e-12, "{kind} L={levels}: {} vs {fine}", est.loss);
        }
    }
}

#[test]
fn draw_order_is_base_then_fine_to_coarse() {
    let plan = LevelPlan::explicit(vec![1, 2, 3]).unwrap();
    let mut s = ScriptedSampler::new([vec![0, 1, 2], vec![3], vec![4, 5]]);
    let terms = draw_terms(&mut s, &plan, 6).unwrap();
    assert_eq!(terms[0].kind, TermKind::Base);
    assert_eq!(terms[0].fine.index(), 3);
    assert_eq!(terms[0].sample_ids, [0, 1, 2]);
    assert_eq!((terms[1].fine.index(), terms[1].coarse.map(|c| c.index())), (1, Some(2)));
    assert_eq!(terms[1].sample_ids, [3]);
    assert_eq!((terms[2].fine.index(), terms[2].coarse.map(|c| c.index())), (2, Some(3)));
    assert!(draw_terms(&mut s, &plan, 6).is_err());
}

#[test]
fn random_sampler_is_seeded_and_without_replacement() {
    let mut a = RandomSampler::new(ChaCha8Rng::seed_from_u64(9));
    let mut b = RandomSampler::new(ChaCha8Rng::seed_from_u64(9));
    for _ in 0..20 {
        let x = a.draw(5, 8).unwrap();
        assert_eq!(x, b.draw(5, 8).unwrap());
        let mut s = x.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);
    }
    assert!(a.draw(9, 8).is_err());
    assert!(a.draw(0, 8).is_err());
}

/// Averaging over every equally likely draw recovers the fine gradient.
#[test]
fn exhaustive_average_is_unbiased() {
    let data = toy_data(4, 8, 10);
    let (m, p) = build(small_model(ModelKind::ConvStack), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let plan = LevelPlan::explicit(vec![1, 2]).unwrap();
    let pairs: Vec<Vec<usize>> = (0..4).flat_map(|a| (a + 1..4).map(move |b| vec![a, b])).collect();
    let mut sum = vec![0.0; p.num_scalars()];
    let mut count = 0.0;
    for base in &pairs {
        for d in 0..4 {
            let mut s = ScriptedSampler::new([base.clone(), vec![d]]);
            let g = mge_gradient(&m, &p, &data, &mut s, &plan).unwrap().grads.flatten();
            sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            count += 1.0;
        }
    }
    let all: Vec<usize> = (0..4).collect();
    let (_, full) = crate::models::loss_and_grad(&m, &p, &data.batch(&all, MeshLevel::FINEST).unwrap()).unwrap();
    for (a, b) in sum.iter().zip(full.flatten()) {
        assert!((a / count - b).abs() < 1e-10);
    }
}

#[test]
fn full_batch_variance_is_zero() {
    let data = toy_data(3, 8, 12);
    let (m, p) = build(small_model(ModelKind::ConvStack), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let plan = LevelPlan::doubling(2, 1).unwrap();
    let v = estimate_term_variance(&m, &p, &data, &mut FullBatch, &plan, 3).unwrap();
    assert_eq!(v.len(), 2);
    assert!(v.iter().all(|t| t.variance == 0.0 && t.mean_norm > 0.0));
    assert!(estimate_term_variance(&m, &p, &data, &mut FullBatch, &plan, 1).is_err());
}

#[test]
fn stats_report_each_term() {
    let data = toy_data(4, 16, 14);
    let (m, p) = build(small_model(ModelKind::ConvStack), &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let plan = LevelPlan::doubling(3, 1).unwrap();
    let est = mge_gradient_with_stats(&m, &p, &data, &mut FullBatch, &plan).unwrap();
    let stats = est.term_stats.unwrap();
    assert_eq!(stats.len(), 3);
    assert_eq!(stats[0].kind, TermKind::Base);
}

#[test]
fn rejects_too_coarse_plans() {
    let data = toy_data(2, 8, 16);
    let (m, p) = build(ModelConfig::unet(1, &[2, 2], 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let plan = LevelPlan::doubling(3, 1).unwrap();
    assert!(matches!(mge_gradient(&m, &p, &data, &mut FullBatch, &plan), Err(Error::TooCoarse { level: 3, .. })));
}

#[test]
fn error_budget_examples() {
    let fit = |b: f64, p: f64| RnormFit { b, p, residuals: vec![] };
    let plan = LevelPlan::explicit(vec![16, 64]).unwrap();
    let e = error_budget(2.0, &fit(0.0, 1.0), &plan, 0.5).unwrap();
    assert!((e.total - 2.0 / 8.0).abs() < 1e-15);
    assert!((e.equivalent_fine_batch.unwrap() - 16.0).abs() < 1e-12);
    assert!((equivalent_fine_batch(1.0, 1.0, 0.5, 64.0) - 64.0).abs() < 1e-12);
    let e = error_budget(1.0, &fit(1.0, 1.0), &plan, 0.5).unwrap();
    assert!((e.total - (1.0 / 8.0 + 0.5 / 4.0)).abs() < 1e-15);
    assert!(error_budget(0.0, &fit(1.0, 1.0), &plan, 0.5).is_err());
}

proptest! {
    #[test]
    fn budget_decreases_in_every_batch(sizes in prop::collection::vec(1usize..200, 1..5), which in 0usize..5, b in 0.0f64..3.0) {
        let which = which % sizes.len();
        let fit = RnormFit { b, p: 1.0, residuals: vec![] };
        let base = error_budget(1.0, &fit, &LevelPlan::explicit(sizes.clone()).unwrap(), 0.25).unwrap();
        let mut more = sizes.clone();
        more[which] += 1;
        let bigger = error_budget(1.0, &fit, &LevelPlan::explicit(more).unwrap(), 0.25).unwrap();
        prop_assert!(bigger.total <= base.total);
    }

    #[test]
    fn step_cost_matches_closed_form(n1 in 1usize..40, levels in 1usize..6) {
        let plan = LevelPlan::doubling(levels, n1).unwrap();
        prop_assert_eq!(plan.step_cost(), wu::closed_form(wu::Strategy::Multiscale, n1 as u64, &[1], levels).unwrap());
    }
}
