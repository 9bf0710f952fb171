//! Seeded synthetic marketplace: query contexts, per-query ad inventories
//! with ground-truth and systematically distorted predicted rates, and the
//! position-bias curve used by the user model.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{child_rng, Rng};

/// Sampled rates are kept strictly inside (0,1) by this margin.
pub const RATE_CLAMP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market config: {0}")]
    InvalidConfig(String),
    #[error("rate {0} outside the open interval (0,1)")]
    RateDomain(f64),
    #[error("unknown query id {0}")]
    UnknownQuery(usize),
}

/// One search request: which query it is and where it falls in the user's
/// session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchContext {
    pub query_id: usize,
    pub session_pos: usize,
}

/// One ad eligible for a query. `pred_*` rates are what the ranking sees
/// (the distorted prediction, later replaced by its calibrated version);
/// `true_*` rates drive realized clicks and conversions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub ad_id: u64,
    pub bid: f64,
    pub price: f64,
    pub true_ctr: f64,
    pub true_cvr: f64,
    pub pred_ctr: f64,
    pub pred_cvr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketConfig {
    pub num_queries: usize,
    pub ads_per_query: usize,
    /// Number of slots on the result page (K).
    pub positions_k: usize,
    /// Click-probability multiplier per position; starts at 1.0 and
    /// strictly decreases.
    pub position_bias: Vec<f64>,
    /// Bids are log-uniform over this range (money per click).
    pub bid_range: [f64; 2],
    /// Item prices are log-uniform over this range.
    pub price_range: [f64; 2],
    /// Beta(α, β) shape parameters for true click-through rates.
    pub ctr_beta: [f64; 2],
    /// Beta(α, β) shape parameters for true conversion rates.
    pub cvr_beta: [f64; 2],
    /// Predicted rate = true rate ^ exponent; 1.0 means perfectly
    /// calibrated predictions.
    pub prediction_distortion_exponent: f64,
    pub reserve_price: f64,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            num_queries: 10,
            ads_per_query: 20,
            positions_k: 5,
            position_bias: vec![1.0, 0.7, 0.5, 0.35, 0.25],
            bid_range: [0.1, 5.0],
            price_range: [1.0, 100.0],
            ctr_beta: [2.0, 20.0],
            cvr_beta: [2.0, 30.0],
            prediction_distortion_exponent: 0.8,
            reserve_price: 0.01,
            seed: 1,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |msg: String| Err(MarketError::InvalidConfig(msg));
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.ads_per_query == 0 {
            return bad("ads_per_query must be at least 1".into());
        }
        if self.positions_k == 0 {
            return bad("positions_k must be at least 1".into());
        }
        if self.positions_k > self.ads_per_query {
            return bad(format!(
                "positions_k ({}) exceeds ads_per_query ({})",
                self.positions_k, self.ads_per_query
            ));
        }
        if self.position_bias.len() < self.positions_k {
            return bad(format!(
                "position_bias has {} entries but positions_k is {}",
                self.position_bias.len(),
                self.positions_k
            ));
        }
        if (self.position_bias[0] - 1.0).abs() > 1e-12 {
            return bad("position_bias[0] must be 1.0".into());
        }
        for w in self.position_bias.windows(2) {
            if w[1] >= w[0] {
                return bad("position_bias must be strictly decreasing".into());
            }
        }
        if self.position_bias.iter().any(|&b| b <= 0.0 || b > 1.0) {
            return bad("position_bias entries must lie in (0, 1]".into());
        }
        for (name, [lo, hi]) in [("bid_range", self.bid_range), ("price_range", self.price_range)]
        {
            if !(lo > 0.0 && hi > lo) {
                return bad(format!("{name} must satisfy 0 < lo < hi"));
            }
        }
        for (name, [a, b]) in [("ctr_beta", self.ctr_beta), ("cvr_beta", self.cvr_beta)] {
            if !(a > 0.0 && b > 0.0) {
                return bad(format!("{name} shape parameters must be positive"));
            }
        }
        if self.prediction_distortion_exponent <= 0.0 {
            return bad("prediction_distortion_exponent must be positive".into());
        }
        if self.reserve_price < 0.0 {
            return bad("reserve_price must be non-negative".into());
        }
        Ok(())
    }
}

/// Immutable marketplace: the config plus one fixed candidate list per
/// query. Safe to share across threads once generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub config: MarketConfig,
    candidates: Vec<Vec<AdCandidate>>,
}

/// Power distortion `rate^exponent`; the systematic miscalibration that
/// isotonic calibration must undo.
pub fn distort(rate: f64, exponent: f64) -> Result<f64, MarketError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(MarketError::RateDomain(rate));
    }
    Ok(rate.powf(exponent))
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn sample_rate(rng: &mut Rng, shape: [f64; 2]) -> f64 {
    let beta = Beta::new(shape[0], shape[1]).expect("validated shape parameters");
    beta.sample(rng).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP)
}

/// Builds the marketplace deterministically from `config.seed`.
pub fn generate_market(config: &MarketConfig) -> Result<Market, MarketError> {
    config.validate()?;
    let mut rng = child_rng(config.seed, "market-gen", 0);
    let e = config.prediction_distortion_exponent;
    let mut candidates = Vec::with_capacity(config.num_queries);
    for q in 0..config.num_queries {
        let mut list = Vec::with_capacity(config.ads_per_query);
        for j in 0..config.ads_per_query {
            let true_ctr = sample_rate(&mut rng, config.ctr_beta);
            let true_cvr = sample_rate(&mut rng, config.cvr_beta);
            list.push(AdCandidate {
                ad_id: (q * config.ads_per_query + j) as u64,
                bid: log_uniform(&mut rng, config.bid_range[0], config.bid_range[1]),
                price: log_uniform(&mut rng, config.price_range[0], config.price_range[1]),
                true_ctr,
                true_cvr,
                pred_ctr: distort(true_ctr, e)?,
                pred_cvr: distort(true_cvr, e)?,
            });
        }
        candidates.push(list);
    }
    Ok(Market {
        config: config.clone(),
        candidates,
    })
}

impl Market {
    /// Uniform draw over query ids; the caller owns the session position.
    pub fn sample_context(&self, rng: &mut Rng) -> SearchContext {
        SearchContext {
            query_id: rng.gen_range(0..self.config.num_queries),
            session_pos: 0,
        }
    }

    pub fn candidates_for(&self, ctx: &SearchContext) -> Result<&[AdCandidate], MarketError> {
        self.candidates
            .get(ctx.query_id)
            .map(|v| v.as_slice())
            .ok_or(MarketError::UnknownQuery(ctx.query_id))
    }

    pub fn num_queries(&self) -> usize {
        self.config.num_queries
    }

    /// Replaces every candidate's predicted rates through the given maps
    /// (used after calibration fitting).
    pub fn with_recalibrated_predictions(
        &self,
        map_ctr: impl Fn(f64) -> f64,
        map_cvr: impl Fn(f64) -> f64,
    ) -> Market {
        let mut out = self.clone();
        for list in &mut out.candidates {
            for c in list {
                c.pred_ctr = map_ctr(c.pred_ctr).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
                c.pred_cvr = map_cvr(c.pred_cvr).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
            }
        }
        out
    }
}
