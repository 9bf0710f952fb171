//! Seeded user-session simulator: runs a policy against the market page by
//! page, realizes clicks and conversions from ground-truth rates, and
//! records transition tuples for offline learning.

use std::io::{BufRead, Write};

use rand::Rng as _;

use crate::auction::{
    aggregate_metrics, run_auction, ActionBox, AuctionError, FeedbackCounts, Metrics,
    RankedSlot, RankingParams, RewardConfig,
};
use crate::market::{Market, MarketError, SearchContext};
use crate::rng::{child_rng, Rng};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Auction(#[from] AuctionError),
    #[error("policy produced out-of-bounds action {0:?}")]
    OutOfBox(Box<RankingParams>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed transition row {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One recorded step: context, action taken, realized reward, and the next
/// context (`None` at session end).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub ctx: SearchContext,
    pub action: RankingParams,
    pub reward: f64,
    pub next: Option<SearchContext>,
}

/// One simulated user session: its ordered transitions plus the realized
/// click/conversion feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub feedback: FeedbackCounts,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Pages per user session.
    pub session_len: usize,
    /// Episodes averaged per policy evaluation.
    pub episodes_per_eval: usize,
    /// Base seed for evaluation episode streams.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_len: 5,
            episodes_per_eval: 50,
            seed: 7,
        }
    }
}

/// Realizes user behavior on a priced page: position-biased clicks from
/// ground-truth rates, conversions on click, revenue from click prices,
/// GMV from item prices.
pub fn simulate_user(slots: &[RankedSlot], bias: &[f64], rng: &mut Rng) -> FeedbackCounts {
    let mut fb = FeedbackCounts::default();
    for slot in slots {
        fb.impressions += 1;
        let p_click = (bias[slot.position] * slot.candidate.true_ctr).clamp(0.0, 1.0);
        if rng.gen_bool(p_click) {
            fb.clicks += 1;
            fb.revenue += slot.click_price;
            if rng.gen_bool(slot.candidate.true_cvr.clamp(0.0, 1.0)) {
                fb.conversions += 1;
                fb.gmv += slot.candidate.price;
            }
        }
    }
    fb
}

/// Expected page reward: each slot contributes `ctr·click_price + δ·ctr`
/// with ctr = position bias × predicted (calibrated) CTR.
pub fn page_reward(slots: &[RankedSlot], bias: &[f64], cfg: &RewardConfig) -> f64 {
    slots
        .iter()
        .map(|s| {
            let ctr = bias[s.position] * s.candidate.pred_ctr;
            crate::auction::reward(ctr, s.click_price, cfg)
        })
        .sum()
}

/// Runs one session: `session_len` context draws, one auction per context,
/// reward per page, stochastic feedback from ground truth. Contexts come
/// from `ctx_rng` and user behavior from `user_rng`, so two policies
/// evaluated under the same seeds face the same query sequence.
pub fn simulate_session(
    market: &Market,
    mut policy: impl FnMut(&SearchContext) -> RankingParams,
    cfg: &SessionConfig,
    reward_cfg: &RewardConfig,
    ctx_rng: &mut Rng,
    user_rng: &mut Rng,
) -> Result<Episode, SimError> {
    let box_ = ActionBox::default();
    let k = market.config.positions_k;
    let bias = &market.config.position_bias;
    let reserve = market.config.reserve_price;

    let mut transitions = Vec::with_capacity(cfg.session_len);
    let mut feedback = FeedbackCounts::default();
    let mut ctx = market.sample_context(ctx_rng);
    for t in 0..cfg.session_len {
        ctx.session_pos = t;
        let action = policy(&ctx);
        if !box_.contains(&action) {
            return Err(SimError::OutOfBox(Box::new(action)));
        }
        let slots = run_auction(&action, market.candidates_for(&ctx)?, k, reserve)?;
        let reward = page_reward(&slots, bias, reward_cfg);
        feedback.merge(&simulate_user(&slots, bias, user_rng));
        let next = if t + 1 < cfg.session_len {
            let mut n = market.sample_context(ctx_rng);
            n.session_pos = t + 1;
            Some(n)
        } else {
            None
        };
        transitions.push(Transition {
            ctx,
            action,
            reward,
            next,
        });
        if let Some(n) = next {
            ctx = n;
        }
    }
    Ok(Episode {
        transitions,
        feedback,
    })
}

/// Per-impression and per-click observations for calibration: each entry
/// is (predicted rate, observed outcome, weight).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateObservations {
    /// One entry per impression: (pred_ctr, clicked/position_bias, 1).
    /// Dividing the 0/1 click by the position bias makes the observed
    /// value an unbiased estimate of the ad's position-free CTR.
    pub ctr: Vec<(f64, f64, f64)>,
    /// One entry per click: (pred_cvr, converted, 1).
    pub cvr: Vec<(f64, f64, f64)>,
    pub impressions: u64,
    pub clicks: u64,
}

/// Runs seeded sessions under `policy` until at least `min_impressions`
/// impressions are recorded, keeping one calibration instance per
/// impression (and per click for conversions).
pub fn collect_rate_observations(
    market: &Market,
    mut policy: impl FnMut(&SearchContext) -> RankingParams,
    min_impressions: usize,
    cfg: &SessionConfig,
    seed: u64,
) -> Result<RateObservations, SimError> {
    let box_ = ActionBox::default();
    let k = market.config.positions_k;
    let bias = &market.config.position_bias;
    let reserve = market.config.reserve_price;
    let mut ctx_rng = child_rng(seed, "calib-ctx", 0);
    let mut user_rng = child_rng(seed, "calib-user", 0);
    let mut obs = RateObservations::default();
    while (obs.impressions as usize) < min_impressions {
        for _ in 0..cfg.session_len {
            let mut ctx = market.sample_context(&mut ctx_rng);
            ctx.session_pos = 0;
            let action = policy(&ctx);
            if !box_.contains(&action) {
                return Err(SimError::OutOfBox(Box::new(action)));
            }
            let slots = run_auction(&action, market.candidates_for(&ctx)?, k, reserve)?;
            for slot in &slots {
                obs.impressions += 1;
                let b = bias[slot.position];
                let p_click = (b * slot.candidate.true_ctr).clamp(0.0, 1.0);
                let clicked = user_rng.gen_bool(p_click);
                obs.ctr
                    .push((slot.candidate.pred_ctr, if clicked { 1.0 / b } else { 0.0 }, 1.0));
                if clicked {
                    obs.clicks += 1;
                    let converted = user_rng.gen_bool(slot.candidate.true_cvr.clamp(0.0, 1.0));
                    obs.cvr.push((
                        slot.candidate.pred_cvr,
                        if converted { 1.0 } else { 0.0 },
                        1.0,
                    ));
                }
            }
        }
    }
    Ok(obs)
}

/// A flat store of transitions, persistable as CSV
/// (query_id, a1..a5, r, next_query_id, terminal).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionSet {
    pub transitions: Vec<Transition>,
}

impl TransitionSet {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), SimError> {
        writeln!(w, "query_id,a1,a2,a3,a4,a5,r,next_query_id,terminal")?;
        for t in &self.transitions {
            let a = t.action.as_array();
            let (next_id, terminal) = match t.next {
                Some(n) => (n.query_id as i64, 0),
                None => (-1, 1),
            };
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
                t.ctx.query_id, a[0], a[1], a[2], a[3], a[4], t.reward, next_id, terminal
            )?;
        }
        Ok(())
    }

    /// Reads the CSV written by `write_csv`. Session positions are not
    /// persisted (the learners consume only query ids) and load as 0.
    pub fn read_csv(r: impl BufRead) -> Result<Self, SimError> {
        let mut transitions = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if !line.starts_with("query_id,") {
                    return Err(SimError::Csv {
                        line: 1,
                        reason: "missing header".into(),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| SimError::Csv {
                line: i + 1,
                reason: reason.into(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let query_id: usize = fields[0].parse().map_err(|_| bad("query_id"))?;
            let mut a = [0.0; 5];
            for (j, slot) in a.iter_mut().enumerate() {
                *slot = fields[1 + j].parse().map_err(|_| bad("action"))?;
            }
            let reward: f64 = fields[6].parse().map_err(|_| bad("reward"))?;
            let next_id: i64 = fields[7].parse().map_err(|_| bad("next_query_id"))?;
            let terminal: u8 = fields[8].parse().map_err(|_| bad("terminal"))?;
            let next = match (terminal, next_id) {
                (1, _) => None,
                (0, id) if id >= 0 => Some(SearchContext {
                    query_id: id as usize,
                    session_pos: 0,
                }),
                _ => return Err(bad("inconsistent terminal marker")),
            };
            transitions.push(Transition {
                ctx: SearchContext {
                    query_id,
                    session_pos: 0,
                },
                action: RankingParams::from_array(a),
                reward,
                next,
            });
        }
        Ok(Self { transitions })
    }
}

/// Collects exactly `num_transitions` transitions under the exploration
/// behavior policy (uniform over the action box), running whole sessions
/// and truncating the tail.
pub fn generate_dataset(
    market: &Market,
    num_transitions: usize,
    cfg: &SessionConfig,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<TransitionSet, SimError> {
    let box_ = ActionBox::default();
    let mut ctx_rng = child_rng(seed, "dataset-ctx", 0);
    let mut user_rng = child_rng(seed, "dataset-user", 0);
    let mut action_rng = child_rng(seed, "dataset-action", 0);
    let mut transitions = Vec::with_capacity(num_transitions);
    while transitions.len() < num_transitions {
        let ep = simulate_session(
            market,
            |_| box_.sample_uniform(&mut action_rng),
            cfg,
            reward_cfg,
            &mut ctx_rng,
            &mut user_rng,
        )?;
        transitions.extend(ep.transitions);
    }
    transitions.truncate(num_transitions);
    Ok(TransitionSet { transitions })
}

/// Policy evaluation summary: realized metrics over all evaluation
/// episodes plus the mean cumulative per-episode reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub mean_episode_reward: f64,
}

/// Averages the policy over `episodes_per_eval` seeded sessions. Episode
/// seeds derive from `cfg.seed` by index, so evaluations of different
/// policies under one config share their random streams.
pub fn evaluate_policy(
    market: &Market,
    mut policy: impl FnMut(&SearchContext) -> RankingParams,
    cfg: &SessionConfig,
    reward_cfg: &RewardConfig,
) -> Result<EvalReport, SimError> {
    let mut feedback = Vec::with_capacity(cfg.episodes_per_eval);
    let mut reward_sum = 0.0;
    for i in 0..cfg.episodes_per_eval {
        let mut ctx_rng = child_rng(cfg.seed, "eval-ctx", i as u64);
        let mut user_rng = child_rng(cfg.seed, "eval-user", i as u64);
        let ep = simulate_session(market, &mut policy, cfg, reward_cfg, &mut ctx_rng, &mut user_rng)?;
        reward_sum += ep.total_reward();
        feedback.push(ep.feedback);
    }
    Ok(EvalReport {
        metrics: aggregate_metrics(&feedback),
        mean_episode_reward: reward_sum / cfg.episodes_per_eval as f64,
    })
}
