//! Parametric ranking score, GSP click pricing, per-impression reward, and
//! the CTR/PPC/RPM/GMV metric definitions.
//!
//! The ranking score of an ad is
//!
//! ```text
//! phi = ctr^a1 * bid  +  a2 * (ctr * cvr^a3)  +  a4 * (cvr^a5 * price)
//! ```
//!
//! and the winner of a slot pays the smallest click price that would keep
//! its score at or above the next-ranked score (generalized second price,
//! solved through the formula above for the bid term).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::AdCandidate;

pub const ACTION_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum AuctionError {
    #[error("cannot rank an empty candidate list")]
    NoCandidates,
    #[error("slot count k must be at least 1")]
    ZeroSlots,
}

/// Per-dimension bounds of the ranking-parameter space. Exponents
/// (`a1`, `a3`, `a5`) live in `[0.5, 2]`, mixing weights (`a2`, `a4`)
/// in `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub lo: [f64; ACTION_DIM],
    pub hi: [f64; ACTION_DIM],
}

impl Default for ActionBox {
    fn default() -> Self {
        Self {
            lo: [0.5, 0.0, 0.5, 0.0, 0.5],
            hi: [2.0, 2.0, 2.0, 2.0, 2.0],
        }
    }
}

impl ActionBox {
    pub fn contains(&self, p: &RankingParams) -> bool {
        p.as_array()
            .iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn midpoint(&self) -> RankingParams {
        let mut a = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            a[i] = 0.5 * (self.lo[i] + self.hi[i]);
        }
        RankingParams::from_array(a)
    }

    pub fn clamp(&self, p: &RankingParams) -> RankingParams {
        let mut a = p.as_array();
        for i in 0..ACTION_DIM {
            a[i] = a[i].clamp(self.lo[i], self.hi[i]);
        }
        RankingParams::from_array(a)
    }

    /// Uniform sample over the box.
    pub fn sample_uniform(&self, rng: &mut crate::rng::Rng) -> RankingParams {
        use rand::Rng as _;
        let mut a = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            a[i] = rng.gen_range(self.lo[i]..=self.hi[i]);
        }
        RankingParams::from_array(a)
    }
}

/// The five parameters of the ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
}

impl RankingParams {
    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        Self {
            a1: a[0],
            a2: a[1],
            a3: a[2],
            a4: a[3],
            a5: a[4],
        }
    }

    pub fn as_array(&self) -> [f64; ACTION_DIM] {
        [self.a1, self.a2, self.a3, self.a4, self.a5]
    }
}

/// One filled slot on the result page: the candidate, its 0-based position,
/// its score, and the click price it pays.
#[derive(Debug, Clone)]
pub struct RankedSlot {
    pub candidate: AdCandidate,
    pub position: usize,
    pub score: f64,
    pub click_price: f64,
}

/// Weight of the pure-CTR term in the per-impression reward.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub delta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

/// Raw counts and money totals accumulated from simulated sessions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FeedbackCounts {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    pub revenue: f64,
    pub gmv: f64,
}

impl FeedbackCounts {
    pub fn merge(&mut self, other: &FeedbackCounts) {
        self.impressions += other.impressions;
        self.clicks += other.clicks;
        self.conversions += other.conversions;
        self.revenue += other.revenue;
        self.gmv += other.gmv;
    }
}

/// Aggregate marketplace metrics. `ctr = clicks/impressions`,
/// `ppc = revenue/clicks`, `rpm = 1000 * revenue/impressions`; ratios are 0
/// when their denominator is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    pub revenue: f64,
    pub gmv: f64,
    pub ctr: f64,
    pub ppc: f64,
    pub rpm: f64,
}

/// Sums session feedback and derives the ratio metrics.
pub fn aggregate_metrics(feedback: &[FeedbackCounts]) -> Metrics {
    let mut total = FeedbackCounts::default();
    for f in feedback {
        total.merge(f);
    }
    let ctr = if total.impressions > 0 {
        total.clicks as f64 / total.impressions as f64
    } else {
        0.0
    };
    let ppc = if total.clicks > 0 {
        total.revenue / total.clicks as f64
    } else {
        0.0
    };
    let rpm = if total.impressions > 0 {
        1000.0 * total.revenue / total.impressions as f64
    } else {
        0.0
    };
    Metrics {
        impressions: total.impressions,
        clicks: total.clicks,
        conversions: total.conversions,
        revenue: total.revenue,
        gmv: total.gmv,
        ctr,
        ppc,
        rpm,
    }
}

/// The quality factor multiplying the bid: `ctr^a1`.
#[inline]
fn bid_factor(params: &RankingParams, c: &AdCandidate) -> f64 {
    c.pred_ctr.powf(params.a1)
}

/// The two score terms that do not involve the bid:
/// `a2 * ctr * cvr^a3 + a4 * cvr^a5 * price`.
#[inline]
fn non_bid_terms(params: &RankingParams, c: &AdCandidate) -> f64 {
    params.a2 * c.pred_ctr * c.pred_cvr.powf(params.a3)
        + params.a4 * c.pred_cvr.powf(params.a5) * c.price
}

/// Ranking score of one candidate under the given parameters. Uses the
/// candidate's predicted (calibrated, when calibration is active) rates.
pub fn score(params: &RankingParams, c: &AdCandidate) -> f64 {
    bid_factor(params, c) * c.bid + non_bid_terms(params, c)
}

/// Top-`k` candidates by score, descending; ties broken by lower `ad_id`.
/// Slots carry scores but a zero click price until priced.
pub fn rank(
    params: &RankingParams,
    candidates: &[AdCandidate],
    k: usize,
) -> Result<Vec<RankedSlot>, AuctionError> {
    if candidates.is_empty() {
        return Err(AuctionError::NoCandidates);
    }
    if k == 0 {
        return Err(AuctionError::ZeroSlots);
    }
    let mut order: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (score(params, c), i))
        .collect();
    order.sort_by(|(sa, ia), (sb, ib)| {
        sb.total_cmp(sa)
            .then_with(|| candidates[*ia].ad_id.cmp(&candidates[*ib].ad_id))
    });
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(position, (slot_score, idx))| RankedSlot {
            candidate: candidates[idx].clone(),
            position,
            score: slot_score,
            click_price: 0.0,
        })
        .collect())
}

/// GSP click price for one slot given the next-ranked score.
///
/// The raw price solves `score(candidate with bid := price) = next_score`
/// for the price; the result is clamped to `[reserve, bid]` (the bid cap
/// wins if the reserve exceeds the bid).
pub fn click_price(
    params: &RankingParams,
    slot: &RankedSlot,
    next_score: f64,
    reserve: f64,
) -> f64 {
    let quality = bid_factor(params, &slot.candidate);
    let raw = (next_score - non_bid_terms(params, &slot.candidate)) / quality;
    raw.max(reserve).min(slot.candidate.bid)
}

/// Ranks the top `k` candidates and prices every slot.
///
/// Slot `i` is priced against the score of the ad ranked `i + 1` among all
/// candidates; the last displayed slot uses the first non-displayed ad when
/// one exists and pays the reserve otherwise.
pub fn run_auction(
    params: &RankingParams,
    candidates: &[AdCandidate],
    k: usize,
    reserve: f64,
) -> Result<Vec<RankedSlot>, AuctionError> {
    let k = k.min(candidates.len());
    let take = (k + 1).min(candidates.len());
    let mut slots = rank(params, candidates, take)?;
    let runner_up = if slots.len() > k {
        slots.pop().map(|s| s.score)
    } else {
        None
    };
    let n = slots.len();
    for i in 0..n {
        let next_score = if i + 1 < n {
            Some(slots[i + 1].score)
        } else {
            runner_up
        };
        slots[i].click_price = match next_score {
            Some(s) => click_price(params, &slots[i], s, reserve),
            // No competitor below the last displayed slot: pay the reserve,
            // never more than the bid.
            None => reserve.min(slots[i].candidate.bid),
        };
    }
    Ok(slots)
}

/// Expected per-impression reward: `ctr * click_price + delta * ctr`.
pub fn reward(ctr: f64, click_price: f64, cfg: &RewardConfig) -> f64 {
    ctr * click_price + cfg.delta * ctr
}
