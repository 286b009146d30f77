use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplet_texture::evaluation::{chi_square_uniform, colocated_exemplar, triplet_histogram};
use triplet_texture::generator::{train_generator, GeneratorArch, TrainConfig};
use triplet_texture::loss::sample_triplet;
use triplet_texture::{Error, FeatureExtractor, MaterialStack, TripletIndex};

#[test]
fn nine_channel_support_is_all_729_ordered_triplets() {
    let mut rng = ChaCha8Rng::seed_from_u64(729);
    let draws: Vec<TripletIndex> = (0..270_000).map(|_| sample_triplet(9, &mut rng).unwrap()).collect();
    let support: HashSet<TripletIndex> = draws.iter().copied().collect();
    assert_eq!(support.len(), 729);
    assert!(draws.iter().all(|t| t.channels().iter().all(|&c| c < 9)));

    let report = chi_square_uniform(&triplet_histogram(&draws, 9), 0.001);
    assert_eq!(report.degrees_of_freedom, 728);
    assert!(report.passes, "{report:?}");
}

#[test]
fn chi_square_rejects_a_skewed_sampler() {
    let mut counts = vec![370u64; 729];
    counts[0] = 3000;
    assert!(!chi_square_uniform(&counts, 0.001).passes);
}

#[test]
fn ranks_cover_the_space_in_lexicographic_order() {
    let all: Vec<TripletIndex> = TripletIndex::all(3).collect();
    assert_eq!(all.len(), 27);
    assert_eq!(all[0], TripletIndex::new([0, 0, 0]));
    assert_eq!(all[1], TripletIndex::new([0, 0, 1]));
    assert_eq!(all[26], TripletIndex::new([2, 2, 2]));
    for (r, t) in all.iter().enumerate() {
        assert_eq!(t.rank(3), r);
    }
}

#[test]
fn degenerate_channel_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_eq!(sample_triplet(1, &mut rng).unwrap(), TripletIndex::new([0, 0, 0]));
    }
    assert!(matches!(sample_triplet(0, &mut rng), Err(Error::ChannelCount(0, _))));
}

#[test]
fn generator_training_draws_uniform_triplets() {
    let ex = FeatureExtractor::mock();
    let base = colocated_exemplar(8, 2);
    let planes: Vec<_> = (0..9).map(|c| base.plane(c % 2).to_owned()).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let exemplar = MaterialStack::from_planes(ndarray::stack(ndarray::Axis(0), &views).unwrap()).unwrap();
    let config = TrainConfig {
        steps: 1000,
        batch_size: 1,
        crop_size: 8,
        architecture: GeneratorArch {
            scales: 2,
            branch_width: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let outcome = train_generator(&exemplar, &config, &ex).unwrap();
    let drawn: Vec<TripletIndex> = outcome.trace.iter().flat_map(|e| e.triplets.clone()).collect();
    assert_eq!(drawn.len(), 1000);
    let report = chi_square_uniform(&triplet_histogram(&drawn, 9), 0.001);
    assert!(report.passes, "{report:?}");
}
