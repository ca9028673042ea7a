use raca_core::arena::{Arena, ArenaConfig};
use raca_core::learner::{
    run_episode, td_loss_on, td_targets, Model, PaddedBatch, Variant, Widths,
};
use raca_core::numerics::gradcheck::check_store;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn td_loss_gradients_match_finite_differences() {
    let widths = Widths {
        d_k: 4,
        d_h: 3,
        d_mix: 3,
        d_gcn: 3,
    };
    for variant in Variant::ALL {
        let mut arena = Arena::new(ArenaConfig::rangers(3, 3)).unwrap();
        let model = Model::new(variant, &widths, 3, arena.state_dim()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = model.init(&mut rng);
        let target = model.init(&mut rng);
        let eps: Vec<_> = (0..2)
            .map(|s| run_episode(&mut arena, &model.agent, &params, 0.5, s, &mut rng).unwrap())
            .collect();
        let refs: Vec<_> = eps.iter().collect();
        let batch = PaddedBatch::new(&refs).unwrap();
        let y = td_targets(&model, &target, &batch, 0.9).unwrap();
        let report = check_store(&params, 1e-5, 6, |g, s| {
            Ok(td_loss_on(g, &model, s, &batch, &y)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
    }
}
