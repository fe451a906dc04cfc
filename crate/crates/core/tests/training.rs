use fsad_core::config::TrainConfig;
use fsad_core::data::{generate_synthetic, make_kshot_split, SyntheticConfig};
use fsad_core::eval::load_test_set;
use fsad_core::model::AnomalyModel;
use fsad_core::train::train;

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        image_size: 64,
        d_prime: 16,
        reduction_width: 16,
        max_epochs: 10,
        patience: 10,
        seed,
        k: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_descends_and_scores_separate_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(&SyntheticConfig::new(200, 40, 64, 7), dir.path()).unwrap();
    let split = make_kshot_split(&index, 8, 7).unwrap();
    for seed in [1, 2, 3] {
        let cfg = config(seed);
        let frozen = AnomalyModel::new(&cfg).unwrap().backbone;
        let out = train(&split, &cfg).unwrap();
        assert_eq!(out.log.len(), 10, "seed {seed}: stopped early ({:?})", out.stop);
        let (first, tenth) = (out.log[0].total, out.log[9].total);
        assert!(tenth < first, "seed {seed}: epoch 10 loss {tenth} not below epoch 1 loss {first}");
        assert_eq!(out.model.backbone, frozen, "seed {seed}: backbone changed");

        if seed == 1 {
            let test = load_test_set(&split, &out.model).unwrap();
            let labels = test.labels();
            let mut sums = [0.0; 2];
            let mut counts = [0usize; 2];
            for (f, &l) in test.features.iter().zip(&labels) {
                sums[usize::from(l)] += out.model.score_features(f).unwrap().1.s1;
                counts[usize::from(l)] += 1;
            }
            let (normal, anomalous) = (sums[0] / counts[0] as f64, sums[1] / counts[1] as f64);
            assert!(anomalous > normal, "mean s1: anomalous {anomalous}, normal {normal}");
        }
    }
}
