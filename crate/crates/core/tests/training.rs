use softguard::data::{GeneratorSpec, SceneSpec};
use softguard::model::{train, TrainConfig};
use softguard::HeadKind;

fn scenes(height: usize, width: usize, first_index: u64, count: usize) -> softguard::data::Dataset {
    GeneratorSpec::Scenes {
        spec: SceneSpec { height, width, ..SceneSpec::default() },
        first_index,
        count,
    }
    .generate("train")
    .unwrap()
}

#[test]
fn overfits_a_single_image() {
    let ds = scenes(64, 64, 3, 1);
    for head in HeadKind::ALL {
        let cfg = TrainConfig { head, epochs: 500, batch_size: 1, ..TrainConfig::default() };
        let (_, log) = train(&cfg, &ds, 5).unwrap();
        let best = log.iter().map(|r| r.pixel_accuracy).fold(0.0, f64::max);
        assert!(best >= 0.99, "{head}: best pixel accuracy {best}");
        assert!(log.last().unwrap().loss.is_finite());
    }
}

#[test]
fn loss_decreases_over_first_ten_epochs() {
    let ds = scenes(32, 32, 0, 512);
    for seed in [1, 2, 3] {
        let cfg = TrainConfig { seed, epochs: 10, ..TrainConfig::default() };
        let (_, log) = train(&cfg, &ds, 5).unwrap();
        let (first, last) = (log[0].loss, log[9].loss);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}
