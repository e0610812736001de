use activebed::bed_design::{candidates, Design, DesignConstraint};
use proptest::prelude::*;

proptest! {
    #[test]
    fn candidates_respect_the_movement_box(
        x in 0.0f64..=1.0,
        y in 0.0f64..=1.0,
        stage in 0usize..10,
        n in 1usize..8,
    ) {
        let c = DesignConstraint::default();
        let prev = Design::new(x, y, c.stage_time(stage));
        let cands = candidates(&prev, &c, n);
        prop_assert!(!cands.is_empty() && cands.len() <= n * n);
        for d in &cands {
            prop_assert!(c.complies(&prev, d), "{d:?} from {prev:?}");
            prop_assert!((0.0..=1.0).contains(&d.d_x) && (0.0..=1.0).contains(&d.d_y));
            prop_assert!((d.d_t - c.stage_time(stage + 1)).abs() < 1e-12);
        }
        for (i, a) in cands.iter().enumerate() {
            for b in &cands[i + 1..] {
                prop_assert!(a.location() != b.location());
            }
        }
    }
}

#[test]
fn interior_lattice_is_full() {
    let c = DesignConstraint::default();
    let cands = candidates(&c.initial_design(), &c, 5);
    assert_eq!(cands.len(), 25);
}
