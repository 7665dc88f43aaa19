mod common;

use common::{tiny_batch, tiny_model_config};
use mebt::model::{MaskedBatch, MebtModel};
use mebt::nn::Fwd;
use mebt::tokenizer::TokenGrid;
use mebt::trainer::{train_mebt, MetricRecord, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(model: &MebtModel, batch: &MaskedBatch) -> Vec<f64> {
    let mut fx = Fwd::eval(&model.store);
    let l = model.forward(&mut fx, batch).unwrap();
    fx.tape.value(l).data().to_vec()
}

fn latents(model: &MebtModel, batch: &MaskedBatch) -> Vec<f64> {
    let mut fx = Fwd::eval(&model.store);
    let (ctx, _) = model.embed(&mut fx, batch).unwrap();
    let z = model.encoder_forward(&mut fx, ctx).unwrap();
    fx.tape.value(z).data().to_vec()
}

#[test]
fn context_order_does_not_change_outputs() {
    let model = MebtModel::new(tiny_model_config(), 3).unwrap();
    let base = tiny_batch(true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let mut ctx = base.context.clone();
        ctx.shuffle(&mut rng);
        let b = MaskedBatch::new(ctx, base.masked.clone(), base.targets.clone(), base.interval, 6).unwrap();
        assert_eq!(latents(&model, &b), latents(&model, &base));
        assert_eq!(logits(&model, &b), logits(&model, &base));
    }
}

#[test]
fn masked_slot_values_never_reach_other_slots() {
    let model = MebtModel::new(tiny_model_config(), 4).unwrap();
    let base = tiny_batch(true);
    let mut other = base.clone();
    for t in other.targets.iter_mut() {
        *t = (*t + 2) % 5;
    }
    assert_eq!(logits(&model, &base), logits(&model, &other));
    // which positions are masked does matter
    let fewer = MaskedBatch::new(
        base.context.clone(),
        base.masked[..4].to_vec(),
        base.targets[..4].to_vec(),
        base.interval,
        6,
    )
    .unwrap();
    let a = logits(&model, &base);
    let b = logits(&model, &fewer);
    assert_ne!(&a[..4 * 5], &b[..]);
}

fn toy_grids(seed: u64) -> Vec<TokenGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| TokenGrid::new(2, 2, 3, 5, (0..12).map(|_| rng.random_range(0..5)).collect()).unwrap())
        .collect()
}

#[test]
fn equal_seeds_give_equal_runs() {
    let grids = toy_grids(1);
    let cfg = TrainConfig {
        steps: 12,
        batch: 2,
        curriculum: mebt::schedules::Curriculum::Uniform,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut log: Vec<MetricRecord> = Vec::new();
        let m = train_mebt(&grids, &tiny_model_config(), &cfg, None, |r| log.push(r.clone())).unwrap();
        for r in log.iter_mut() {
            r.wall_ms = 0.0;
        }
        (m.store, log)
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(s1, s2);
    let other = train_mebt(
        &grids,
        &tiny_model_config(),
        &TrainConfig {
            seed: 10,
            ..cfg.clone()
        },
        None,
        |_| {},
    )
    .unwrap();
    assert_ne!(other.store, s1);
}

#[test]
fn zero_steps_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 0,
        seed: 5,
        ..Default::default()
    };
    train_mebt(&toy_grids(2), &tiny_model_config(), &cfg, Some(dir.path()), |_| {}).unwrap();
    let loaded = MebtModel::load(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.store, MebtModel::new(tiny_model_config(), 5).unwrap().store);
}
