use activebed::bayes_grid::{
    bayes_update_log, bayes_update_with_predictions, kld_grid, kld_mass, log_likelihoods,
    top_m_mean, NoiseModel, ParamGrid, ParamPosterior,
};
use proptest::prelude::*;

const N: usize = 6;

fn predictions() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, N * N)
}

fn masses() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, N * N).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-3)
}

fn posterior(w: Vec<f64>) -> ParamPosterior {
    ParamPosterior::from_weights(ParamGrid::uniform(0.0, 1.0, N).unwrap(), w).unwrap()
}

proptest! {
    #[test]
    fn sequential_updates_equal_one_batch_update(
        data in prop::collection::vec((predictions(), -1.0f64..1.0), 4),
        sigma in 0.2f64..1.0,
    ) {
        let noise = NoiseModel::new(sigma).unwrap();
        let prior = ParamPosterior::uniform(ParamGrid::uniform(0.0, 1.0, N).unwrap());
        let mut seq = prior.clone();
        let mut total = vec![0.0; N * N];
        for (p, y) in &data {
            seq = bayes_update_with_predictions(&seq, *y, p, &noise).unwrap().posterior;
            for (t, l) in total.iter_mut().zip(log_likelihoods(*y, p, &noise)) {
                *t += l;
            }
        }
        let batch = bayes_update_log(&prior, &total).unwrap().posterior;
        for (a, b) in seq.mass().iter().zip(batch.mass()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_mass_is_normalized(p in predictions(), y in -1.0f64..1.0) {
        let prior = ParamPosterior::uniform(ParamGrid::uniform(0.0, 1.0, N).unwrap());
        let post = bayes_update_with_predictions(&prior, y, &p, &NoiseModel::new(0.3).unwrap()).unwrap().posterior;
        prop_assert!((post.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(post.mass().iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn grid_kld_is_nonnegative(p in masses(), q in prop::collection::vec(1e-3f64..1.0, N * N)) {
        let (p, q) = (posterior(p), posterior(q));
        prop_assert!(kld_grid(&p, &q).unwrap() >= -1e-15);
        prop_assert!(kld_grid(&q, &q).unwrap().abs() < 1e-15);
    }

    #[test]
    fn top_m_mean_stays_in_the_box(w in masses(), m in 1usize..=N * N) {
        let (x, y) = top_m_mean(&posterior(w), m).unwrap();
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
    }
}

#[test]
fn kld_of_point_mass_against_uniform_is_log_n() {
    let mut p = vec![0.0; 10];
    p[3] = 1.0;
    let q = vec![0.1; 10];
    assert!((kld_mass(&p, &q).unwrap() - 10f64.ln()).abs() < 1e-14);
}
