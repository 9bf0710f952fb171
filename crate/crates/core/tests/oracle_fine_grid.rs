//! Cross-checks the shrinking grid search against a much finer single-pass
//! lattice on a 2-dimensional slice of the action box.

use adlab_core::auction::{ActionBox, RewardConfig};
use adlab_core::market::{generate_market, MarketConfig};
use adlab_core::oracle::{grid_search_in_box, GridSpec};
use adlab_core::sim::SessionConfig;

#[test]
fn coarse_optimum_sits_within_one_cell_of_fine_lattice_optimum() {
    let session = SessionConfig::default();
    let reward = RewardConfig::default();
    let market = generate_market(&MarketConfig::default()).unwrap();
    // Freeze the three exponents so the lattice only sweeps a2 and a4.
    let slice = ActionBox {
        lo: [1.0, 0.0, 1.0, 0.0, 1.0],
        hi: [1.0, 2.0, 1.0, 2.0, 1.0],
    };
    let coarse = grid_search_in_box(
        &market,
        &GridSpec {
            points_per_dim: 10,
            refinement_rounds: 1,
            ..GridSpec::default()
        },
        &session,
        &reward,
        &slice,
    )
    .unwrap();
    let fine = grid_search_in_box(
        &market,
        &GridSpec {
            points_per_dim: 100,
            refinement_rounds: 1,
            ..GridSpec::default()
        },
        &session,
        &reward,
        &slice,
    )
    .unwrap();
    // A 10-point axis over [0, 2] has spacing 2/9; the coarse argmax can
    // sit at most half a cell from the true optimum, and the fine lattice
    // pins that optimum to within its own spacing.
    let tol = 0.5 * (2.0 / 9.0) + 2.0 / 99.0 + 1e-12;
    let c = coarse.best.as_array();
    let f = fine.best.as_array();
    for d in [1, 3] {
        assert!(
            (c[d] - f[d]).abs() <= tol,
            "dim {d}: coarse {} vs fine {} exceeds {tol}",
            c[d],
            f[d]
        );
    }
    for d in [0, 2, 4] {
        assert_eq!(c[d], 1.0);
        assert_eq!(f[d], 1.0);
    }
    assert!(fine.best_reward >= coarse.best_reward - 1e-9);
    // Shrinking rounds never lose ground on the incumbent.
    let full = grid_search_in_box(
        &market,
        &GridSpec::default(),
        &session,
        &reward,
        &slice,
    )
    .unwrap();
    for w in full.round_incumbent_rewards.windows(2) {
        assert!(w[1] >= w[0]);
    }
    assert!(full.best_reward >= coarse.best_reward - 0.05 * coarse.best_reward.abs());
}
