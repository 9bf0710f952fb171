//! Shrinking grid search over the ranking-parameter box: evaluates a full
//! lattice of constant-action policies under common random numbers, then
//! repeatedly re-centers a shrunken window on the incumbent. Its best
//! reward is the yardstick the learned policies are judged against.

use serde::{Deserialize, Serialize};

use crate::auction::{ActionBox, Metrics, RankingParams, RewardConfig, ACTION_DIM};
use crate::market::Market;
use crate::sim::{evaluate_policy, SessionConfig, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub points_per_dim: usize,
    /// Total lattice rounds, the full-box pass included.
    pub refinement_rounds: usize,
    /// Window extent multiplier applied per round.
    pub shrink_factor: f64,
    pub episodes_per_point: usize,
    /// Worker threads for lattice evaluation; results are
    /// schedule-independent.
    pub threads: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_dim: 5,
            refinement_rounds: 3,
            shrink_factor: 0.5,
            episodes_per_point: 20,
            threads: 1,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.points_per_dim < 2 {
            return bad("points_per_dim must be at least 2");
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return bad("shrink_factor must lie in (0, 1)");
        }
        if self.refinement_rounds == 0 {
            return bad("refinement_rounds must be at least 1");
        }
        if self.episodes_per_point == 0 {
            return bad("episodes_per_point must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        Ok(())
    }
}

/// One evaluated lattice point.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub params: RankingParams,
    pub reward: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: RankingParams,
    pub best_reward: f64,
    pub best_metrics: Metrics,
    /// Every evaluated point, in round-then-lattice order.
    pub samples: Vec<SurfaceSample>,
    /// Incumbent reward at the end of each round (non-decreasing).
    pub round_incumbent_rewards: Vec<f64>,
}

fn lex_less(a: &RankingParams, b: &RankingParams) -> bool {
    a.as_array()
        .iter()
        .zip(b.as_array())
        .find_map(|(x, y)| {
            if x < &y {
                Some(true)
            } else if x > &y {
                Some(false)
            } else {
                None
            }
        })
        .unwrap_or(false)
}

/// Per-dimension lattice values for a window centered on `center` with the
/// given per-dim extents, translated to stay inside the outer box.
fn lattice_axes(
    box_: &ActionBox,
    center: &RankingParams,
    extent_frac: f64,
    points_per_dim: usize,
) -> Vec<Vec<f64>> {
    let c = center.as_array();
    (0..ACTION_DIM)
        .map(|d| {
            let full = box_.hi[d] - box_.lo[d];
            let extent = full * extent_frac;
            if extent < 1e-15 || full < 1e-15 {
                return vec![c[d].clamp(box_.lo[d], box_.hi[d])];
            }
            let lo = (c[d] - extent / 2.0).clamp(box_.lo[d], box_.hi[d] - extent);
            (0..points_per_dim)
                .map(|i| lo + extent * i as f64 / (points_per_dim - 1) as f64)
                .collect()
        })
        .collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<RankingParams> {
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut point = [0.0; ACTION_DIM];
        for d in (0..ACTION_DIM).rev() {
            let n = axes[d].len();
            point[d] = axes[d][idx % n];
            idx /= n;
        }
        out.push(RankingParams::from_array(point));
    }
    out
}

fn evaluate_lattice(
    market: &Market,
    points: &[RankingParams],
    eval_cfg: &SessionConfig,
    reward_cfg: &RewardConfig,
    threads: usize,
) -> Result<Vec<SurfaceSample>, SimError> {
    let eval_one = |p: RankingParams| -> Result<SurfaceSample, SimError> {
        let report = evaluate_policy(market, |_| p, eval_cfg, reward_cfg)?;
        Ok(SurfaceSample {
            params: p,
            reward: report.mean_episode_reward,
            metrics: report.metrics,
        })
    };
    if threads <= 1 || points.len() < 2 {
        return points.iter().map(|&p| eval_one(p)).collect();
    }
    let workers = threads.min(points.len());
    let chunk = points.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|ps| scope.spawn(move || ps.iter().map(|&p| eval_one(p)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(points.len());
        for h in handles {
            for r in h.join().expect("lattice worker panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

/// Full search over a caller-supplied box (dimensions with `lo == hi` stay
/// frozen at that value).
pub fn grid_search_in_box(
    market: &Market,
    spec: &GridSpec,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
    search_box: &ActionBox,
) -> Result<GridSearchResult, SimError> {
    spec.validate()?;
    let eval_cfg = SessionConfig {
        episodes_per_eval: spec.episodes_per_point,
        ..*session
    };
    let mut incumbent: Option<(RankingParams, f64, Metrics)> = None;
    let mut samples = Vec::new();
    let mut round_incumbent_rewards = Vec::with_capacity(spec.refinement_rounds);
    let mut extent = 1.0;
    for round in 0..spec.refinement_rounds {
        let center = match &incumbent {
            Some((p, _, _)) => *p,
            None => search_box.midpoint(),
        };
        // The first round always sweeps the whole box.
        let frac = if round == 0 { 1.0 } else { extent };
        let axes = lattice_axes(search_box, &center, frac, spec.points_per_dim);
        let points = cartesian(&axes);
        let round_samples =
            evaluate_lattice(market, &points, &eval_cfg, reward_cfg, spec.threads)?;
        for s in &round_samples {
            let better = match &incumbent {
                None => true,
                Some((bp, br, _)) => {
                    s.reward > *br || (s.reward == *br && lex_less(&s.params, bp))
                }
            };
            if better {
                incumbent = Some((s.params, s.reward, s.metrics));
            }
        }
        samples.extend(round_samples);
        round_incumbent_rewards.push(incumbent.as_ref().unwrap().1);
        extent *= spec.shrink_factor;
    }
    let (best, best_reward, best_metrics) = incumbent.expect("at least one round");
    Ok(GridSearchResult {
        best,
        best_reward,
        best_metrics,
        samples,
        round_incumbent_rewards,
    })
}

/// Search over the standard action box.
pub fn grid_search(
    market: &Market,
    spec: &GridSpec,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
) -> Result<GridSearchResult, SimError> {
    grid_search_in_box(market, spec, session, reward_cfg, &ActionBox::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_market, MarketConfig};

    fn small_spec() -> GridSpec {
        GridSpec {
            points_per_dim: 2,
            refinement_rounds: 3,
            episodes_per_point: 5,
            ..GridSpec::default()
        }
    }

    #[test]
    fn evaluation_count_is_rounds_times_lattice_size() {
        let market = generate_market(&MarketConfig::default()).unwrap();
        let spec = small_spec();
        let r = grid_search(
            &market,
            &spec,
            &SessionConfig::default(),
            &RewardConfig::default(),
        )
        .unwrap();
        assert_eq!(r.samples.len(), 3 * 32);
    }

    #[test]
    fn incumbent_reward_is_non_decreasing_across_rounds() {
        let market = generate_market(&MarketConfig::default()).unwrap();
        let r = grid_search(
            &market,
            &GridSpec {
                points_per_dim: 3,
                refinement_rounds: 4,
                episodes_per_point: 8,
                ..GridSpec::default()
            },
            &SessionConfig::default(),
            &RewardConfig::default(),
        )
        .unwrap();
        assert_eq!(r.round_incumbent_rewards.len(), 4);
        for w in r.round_incumbent_rewards.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(*r.round_incumbent_rewards.last().unwrap(), r.best_reward);
    }

    #[test]
    fn single_ad_market_has_a_flat_surface() {
        let cfg = MarketConfig {
            num_queries: 4,
            ads_per_query: 1,
            positions_k: 1,
            position_bias: vec![1.0],
            ..MarketConfig::default()
        };
        let market = generate_market(&cfg).unwrap();
        let r = grid_search(
            &market,
            &small_spec(),
            &SessionConfig::default(),
            &RewardConfig::default(),
        )
        .unwrap();
        // One candidate per query and one slot: the ranking parameters
        // cannot matter, so every lattice point sees the same reward.
        let lo = r.samples.iter().map(|s| s.reward).fold(f64::INFINITY, f64::min);
        let hi = r
            .samples
            .iter()
            .map(|s| s.reward)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-12, "surface not flat: {lo}..{hi}");
        assert!((r.best_reward - hi).abs() < 1e-12);
    }

    #[test]
    fn threaded_and_serial_searches_agree_exactly() {
        let market = generate_market(&MarketConfig::default()).unwrap();
        let serial = grid_search(
            &market,
            &small_spec(),
            &SessionConfig::default(),
            &RewardConfig::default(),
        )
        .unwrap();
        let threaded = grid_search(
            &market,
            &GridSpec {
                threads: 3,
                ..small_spec()
            },
            &SessionConfig::default(),
            &RewardConfig::default(),
        )
        .unwrap();
        assert_eq!(serial, threaded);
    }

    #[test]
    fn frozen_dimensions_stay_frozen() {
        let market = generate_market(&MarketConfig::default()).unwrap();
        let mut box_ = ActionBox::default();
        // Freeze a1, a3, a5 at 1.0.
        for d in [0, 2, 4] {
            box_.lo[d] = 1.0;
            box_.hi[d] = 1.0;
        }
        let r = grid_search_in_box(
            &market,
            &GridSpec {
                points_per_dim: 3,
                refinement_rounds: 2,
                episodes_per_point: 4,
                ..GridSpec::default()
            },
            &SessionConfig::default(),
            &RewardConfig::default(),
            &box_,
        )
        .unwrap();
        // Lattice collapses to 3×3 in the two free dimensions.
        assert_eq!(r.samples.len(), 2 * 9);
        for s in &r.samples {
            assert_eq!(s.params.a1, 1.0);
            assert_eq!(s.params.a3, 1.0);
            assert_eq!(s.params.a5, 1.0);
        }
    }

    #[test]
    fn lattice_windows_stay_inside_the_box() {
        let box_ = ActionBox::default();
        // Center on a corner; the shrunken window must translate inside.
        let corner = RankingParams::from_array([0.5, 0.0, 2.0, 2.0, 0.5]);
        let axes = lattice_axes(&box_, &corner, 0.25, 5);
        for (d, axis) in axes.iter().enumerate() {
            assert_eq!(axis.len(), 5);
            for &v in axis {
                assert!(v >= box_.lo[d] - 1e-12 && v <= box_.hi[d] + 1e-12);
            }
            let width = axis.last().unwrap() - axis.first().unwrap();
            let expect = (box_.hi[d] - box_.lo[d]) * 0.25;
            assert!((width - expect).abs() < 1e-12);
        }
    }
}
