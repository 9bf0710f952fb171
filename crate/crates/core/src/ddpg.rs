//! Offline actor-critic learner: replay sampling, bootstrapped critic
//! targets, per-worker gradient computation, and a parameter server that
//! accumulates worker gradients, applies them every N steps, and maintains
//! Polyak-averaged target networks. Workers exchange parameter snapshots
//! and gradient messages with the server; nothing shares mutable state.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{ActionBox, RankingParams, RewardConfig};
use crate::market::{Market, SearchContext};
use crate::net::{soft_update, Head, Net, NetError, NetworkSpec, ParamVector};
use crate::rng::{child_rng, child_seed, Rng};
use crate::sim::{
    evaluate_policy, simulate_session, EvalReport, SessionConfig, SimError, Transition,
    TransitionSet,
};

#[derive(Debug, Error)]
pub enum DdpgError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("training diverged at step {step}: critic loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient layout mismatch from worker {0}")]
    Protocol(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    /// Discount γ.
    pub gamma: f64,
    /// Target-network tracking rate τ.
    pub tau: f64,
    /// Samples per gradient step (m).
    pub batch_size: usize,
    /// Worker steps accumulated per global parameter update (N).
    pub update_period: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub workers: usize,
    pub total_steps: usize,
    /// Convergence-log cadence, in worker steps.
    pub eval_interval: usize,
    pub embedding_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Dueling critic head (value + advantage branches) when true.
    pub dueling: bool,
    pub replay_capacity: usize,
    /// Collect fresh sessions with exploration noise while training
    /// (sequential driver only).
    pub live: bool,
    /// Exploration noise stddev per box-normalized action dimension.
    pub exploration_sigma: f64,
    /// Critic loss above this for `divergence_window` consecutive steps
    /// aborts training.
    pub divergence_loss: f64,
    pub divergence_window: usize,
    /// Stop as soon as an evaluation reaches this mean episode reward.
    pub target_reward: Option<f64>,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            tau: 0.01,
            batch_size: 256,
            update_period: 4,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            workers: 4,
            total_steps: 6_000,
            eval_interval: 1_000,
            embedding_dim: 8,
            hidden_sizes: vec![32, 32],
            dueling: true,
            replay_capacity: 200_000,
            live: false,
            exploration_sigma: 0.1,
            divergence_loss: 1e6,
            divergence_window: 50,
            target_reward: None,
            seed: 11,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<(), DdpgError> {
        let bad = |m: &str| Err(DdpgError::Config(m.into()));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.update_period == 0 || self.workers == 0 {
            return bad("batch_size, update_period, and workers must be ≥ 1");
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be ≥ 1");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be ≥ 1");
        }
        if self.live && self.workers > 1 {
            return bad("live data collection requires workers = 1");
        }
        Ok(())
    }
}

/// Bounded ring of transitions with uniform-with-replacement sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            items: Vec::new(),
            capacity,
            cursor: 0,
        }
    }

    pub fn from_set(set: &TransitionSet, capacity: usize) -> Self {
        let mut buf = Self::new(capacity.max(1));
        for t in &set.transitions {
            buf.push(*t);
        }
        buf
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample with replacement; errors only on an empty buffer.
    pub fn sample_batch(&self, m: usize, rng: &mut Rng) -> Result<Vec<Transition>, DdpgError> {
        if self.items.is_empty() {
            return Err(DdpgError::EmptyBuffer);
        }
        Ok((0..m)
            .map(|_| self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }
}

/// The actor and critic architectures used by one training run.
#[derive(Debug, Clone)]
pub struct Nets {
    pub actor: Net,
    pub critic: Net,
}

impl Nets {
    pub fn for_market(num_queries: usize, cfg: &DdpgConfig) -> Result<Self, DdpgError> {
        let actor = Net::new(NetworkSpec::new(
            num_queries,
            cfg.embedding_dim,
            &cfg.hidden_sizes,
            Head::Actor,
        ))?;
        let critic_head = if cfg.dueling {
            Head::CriticDueling
        } else {
            Head::CriticPlain
        };
        let critic = Net::new(NetworkSpec::new(
            num_queries,
            cfg.embedding_dim,
            &cfg.hidden_sizes,
            critic_head,
        ))?;
        Ok(Nets { actor, critic })
    }
}

/// Online and target parameters for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpgState {
    pub actor: ParamVector,
    pub critic: ParamVector,
    pub target_actor: ParamVector,
    pub target_critic: ParamVector,
}

impl DdpgState {
    /// Seeded initialization; targets start as copies of the online nets.
    pub fn init(nets: &Nets, seed: u64) -> Self {
        let actor = nets
            .actor
            .init_params(&mut child_rng(seed, "ddpg-init-actor", 0));
        let critic = nets
            .critic
            .init_params(&mut child_rng(seed, "ddpg-init-critic", 0));
        Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
        }
    }
}

/// Wraps an actor parameter vector as a policy closure.
pub fn actor_policy<'a>(
    net: &'a Net,
    params: &'a ParamVector,
    box_: &'a ActionBox,
) -> impl Fn(&SearchContext) -> RankingParams + 'a {
    move |ctx| {
        net.actor_forward(params, box_, ctx)
            .expect("finite actor parameters")
            .0
    }
}

/// Bootstrapped targets: Q*ᵢ = rᵢ + γ·Q′(s′ᵢ, π′(s′ᵢ)), and plain rᵢ on
/// terminal transitions.
pub fn critic_targets(
    nets: &Nets,
    state: &DdpgState,
    batch: &[Transition],
    gamma: f64,
) -> Result<Vec<f64>, DdpgError> {
    let box_ = ActionBox::default();
    batch
        .iter()
        .map(|t| match &t.next {
            None => Ok(t.reward),
            Some(next) => {
                let (a_next, _) = nets.actor.actor_forward(&state.target_actor, &box_, next)?;
                let (q_next, _) =
                    nets.critic
                        .critic_forward(&state.target_critic, next, &a_next)?;
                Ok(t.reward + gamma * q_next)
            }
        })
        .collect()
}

/// One worker step's result: batch-summed gradients plus the mean
/// per-sample critic loss. The actor gradient points in the direction of
/// increasing Q (the server adds it).
#[derive(Debug, Clone)]
pub struct GradientMessage {
    pub worker_id: usize,
    pub grad_critic: ParamVector,
    pub grad_actor: ParamVector,
    pub critic_loss: f64,
    pub batch_size: usize,
    pub version: u64,
}

/// Computes critic and actor gradients on one batch against a parameter
/// snapshot. Pure with respect to the server: nothing is mutated.
pub fn worker_step(
    nets: &Nets,
    state: &DdpgState,
    batch: &[Transition],
    gamma: f64,
    worker_id: usize,
    version: u64,
) -> Result<GradientMessage, DdpgError> {
    let box_ = ActionBox::default();
    let targets = critic_targets(nets, state, batch, gamma)?;
    let mut grad_critic = ParamVector::zeros(Arc::clone(&state.critic.layout));
    let mut grad_actor = ParamVector::zeros(Arc::clone(&state.actor.layout));
    let mut loss_sum = 0.0;
    for (t, q_star) in batch.iter().zip(&targets) {
        // Critic: L = ½(Q(s,a) − Q*)², dL/dQ = Q − Q*.
        let (q, cache) = nets.critic.critic_forward(&state.critic, &t.ctx, &t.action)?;
        let err = q - q_star;
        loss_sum += 0.5 * err * err;
        nets.critic
            .critic_backward(&state.critic, &cache, err, Some(&mut grad_critic));

        // Actor: ascend Q(s, π(s)) through the frozen online critic.
        let (a_pi, acache) = nets.actor.actor_forward(&state.actor, &box_, &t.ctx)?;
        let (_, ccache) = nets.critic.critic_forward(&state.critic, &t.ctx, &a_pi)?;
        let dq_da = nets.critic.critic_backward(&state.critic, &ccache, 1.0, None);
        nets.actor
            .actor_backward(&state.actor, &acache, &dq_da, &box_, &mut grad_actor);
    }
    let critic_loss = loss_sum / batch.len() as f64;
    if !critic_loss.is_finite() {
        return Err(DdpgError::Diverged {
            step: version,
            loss: critic_loss,
        });
    }
    Ok(GradientMessage {
        worker_id,
        grad_critic,
        grad_actor,
        critic_loss,
        batch_size: batch.len(),
        version,
    })
}

/// Authoritative parameter holder. Accumulates gradient messages and,
/// every `update_period` worker steps, applies the mean gradients with
/// the configured learning rates, soft-updates both targets, and bumps
/// the version.
pub struct ParameterServer {
    state: DdpgState,
    version: u64,
    cfg: DdpgConfig,
    acc_critic: ParamVector,
    acc_actor: ParamVector,
    acc_samples: usize,
    acc_msgs: usize,
    msgs_seen: u64,
    high_loss_streak: usize,
}

impl ParameterServer {
    pub fn new(nets: &Nets, cfg: DdpgConfig) -> Self {
        let state = DdpgState::init(nets, cfg.seed);
        Self {
            acc_critic: state.critic.zeros_like(),
            acc_actor: state.actor.zeros_like(),
            state,
            version: 0,
            cfg,
            acc_samples: 0,
            acc_msgs: 0,
            msgs_seen: 0,
            high_loss_streak: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn state(&self) -> &DdpgState {
        &self.state
    }

    pub fn snapshot(&self) -> DdpgState {
        self.state.clone()
    }

    /// Ingests one gradient message. Returns true when this message
    /// triggered a global parameter update. Messages more than two
    /// versions stale are dropped without effect.
    pub fn apply(&mut self, msg: &GradientMessage) -> Result<bool, DdpgError> {
        if !msg.grad_critic.same_layout(&self.state.critic)
            || !msg.grad_actor.same_layout(&self.state.actor)
        {
            return Err(DdpgError::Protocol(msg.worker_id));
        }
        self.msgs_seen += 1;
        if msg.critic_loss > self.cfg.divergence_loss {
            self.high_loss_streak += 1;
            if self.high_loss_streak >= self.cfg.divergence_window {
                return Err(DdpgError::Diverged {
                    step: self.msgs_seen,
                    loss: msg.critic_loss,
                });
            }
        } else {
            self.high_loss_streak = 0;
        }
        if self.version > msg.version + 2 {
            return Ok(false);
        }
        self.acc_critic.axpy(1.0, &msg.grad_critic)?;
        self.acc_actor.axpy(1.0, &msg.grad_actor)?;
        self.acc_samples += msg.batch_size;
        self.acc_msgs += 1;
        if self.acc_msgs < self.cfg.update_period {
            return Ok(false);
        }
        let scale = 1.0 / self.acc_samples as f64;
        self.state
            .critic
            .axpy(-self.cfg.critic_lr * scale, &self.acc_critic)?;
        self.state
            .actor
            .axpy(self.cfg.actor_lr * scale, &self.acc_actor)?;
        soft_update(&mut self.state.target_critic, &self.state.critic, self.cfg.tau)?;
        soft_update(&mut self.state.target_actor, &self.state.actor, self.cfg.tau)?;
        self.acc_critic.fill_zero();
        self.acc_actor.fill_zero();
        self.acc_samples = 0;
        self.acc_msgs = 0;
        self.version += 1;
        if self.state.critic.check_finite().is_err() || self.state.actor.check_finite().is_err()
        {
            return Err(DdpgError::Diverged {
                step: self.msgs_seen,
                loss: f64::INFINITY,
            });
        }
        Ok(true)
    }
}

/// One convergence-log row: training step, mean critic loss since the
/// previous row, and the held-out evaluation (reward, ctr, ppc, rpm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub step: u64,
    pub loss: f64,
    pub reward: f64,
    pub ctr: f64,
    pub ppc: f64,
    pub rpm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub actor: ParamVector,
    pub critic: ParamVector,
    pub log: Vec<ConvergenceRow>,
    pub steps_run: u64,
    pub reached_target: bool,
    pub final_eval: EvalReport,
}

struct EvalHarness<'a> {
    market: &'a Market,
    nets: &'a Nets,
    session: SessionConfig,
    reward_cfg: &'a RewardConfig,
    box_: ActionBox,
}

impl<'a> EvalHarness<'a> {
    fn new(
        market: &'a Market,
        nets: &'a Nets,
        session: &SessionConfig,
        reward_cfg: &'a RewardConfig,
        seed: u64,
    ) -> Self {
        Self {
            market,
            nets,
            session: SessionConfig {
                seed: child_seed(seed, "ddpg-eval", 0),
                ..*session
            },
            reward_cfg,
            box_: ActionBox::default(),
        }
    }

    fn eval(&self, actor: &ParamVector) -> Result<EvalReport, DdpgError> {
        Ok(evaluate_policy(
            self.market,
            actor_policy(&self.nets.actor, actor, &self.box_),
            &self.session,
            self.reward_cfg,
        )?)
    }

    fn row(&self, step: u64, mean_loss: f64, report: &EvalReport) -> ConvergenceRow {
        ConvergenceRow {
            step,
            loss: mean_loss,
            reward: report.mean_episode_reward,
            ctr: report.metrics.ctr,
            ppc: report.metrics.ppc,
            rpm: report.metrics.rpm,
        }
    }
}

/// Trains against a transition dataset (plus optional live collection in
/// the sequential driver). `cfg.workers == 1` runs the bit-reproducible
/// sequential driver; more workers run the asynchronous parameter-server
/// driver.
pub fn train(
    market: &Market,
    data: &TransitionSet,
    cfg: &DdpgConfig,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
) -> Result<TrainResult, DdpgError> {
    cfg.validate()?;
    if data.is_empty() && !cfg.live {
        return Err(DdpgError::EmptyBuffer);
    }
    let nets = Nets::for_market(market.num_queries(), cfg)?;
    if cfg.workers <= 1 {
        train_sequential(market, data, cfg, session, reward_cfg, &nets)
    } else {
        train_async(market, data, cfg, session, reward_cfg, &nets)
    }
}

fn train_sequential(
    market: &Market,
    data: &TransitionSet,
    cfg: &DdpgConfig,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
    nets: &Nets,
) -> Result<TrainResult, DdpgError> {
    let mut server = ParameterServer::new(nets, cfg.clone());
    let mut buffer = ReplayBuffer::from_set(data, cfg.replay_capacity.max(data.len()));
    let mut rng = child_rng(cfg.seed, "ddpg-worker", 0);
    let mut live_ctx_rng = child_rng(cfg.seed, "ddpg-live-ctx", 0);
    let mut live_user_rng = child_rng(cfg.seed, "ddpg-live-user", 0);
    let mut noise_rng = child_rng(cfg.seed, "ddpg-live-noise", 0);
    let harness = EvalHarness::new(market, nets, session, reward_cfg, cfg.seed);
    let box_ = ActionBox::default();

    let mut log = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0u64;
    let mut reached_target = false;
    let mut steps_run = 0u64;
    for step in 1..=cfg.total_steps as u64 {
        if cfg.live {
            let noise = Normal::new(0.0, cfg.exploration_sigma).expect("valid sigma");
            let snapshot = server.snapshot();
            let ep = simulate_session(
                market,
                |ctx| {
                    let (a, _) = nets
                        .actor
                        .actor_forward(&snapshot.actor, &box_, ctx)
                        .expect("finite actor parameters");
                    let mut arr = a.as_array();
                    for (d, v) in arr.iter_mut().enumerate() {
                        *v += noise.sample(&mut noise_rng) * (box_.hi[d] - box_.lo[d]);
                    }
                    box_.clamp(&RankingParams::from_array(arr))
                },
                session,
                reward_cfg,
                &mut live_ctx_rng,
                &mut live_user_rng,
            )?;
            for t in ep.transitions {
                buffer.push(t);
            }
        }
        let batch = buffer.sample_batch(cfg.batch_size, &mut rng)?;
        let msg = worker_step(nets, server.state(), &batch, cfg.gamma, 0, server.version())?;
        loss_acc += msg.critic_loss;
        loss_n += 1;
        server.apply(&msg)?;
        steps_run = step;
        if step % cfg.eval_interval as u64 == 0 || step == cfg.total_steps as u64 {
            let report = harness.eval(&server.state().actor)?;
            log.push(harness.row(step, loss_acc / loss_n.max(1) as f64, &report));
            loss_acc = 0.0;
            loss_n = 0;
            if let Some(target) = cfg.target_reward {
                if report.mean_episode_reward >= target {
                    reached_target = true;
                    break;
                }
            }
        }
    }
    let state = server.snapshot();
    let final_eval = harness.eval(&state.actor)?;
    Ok(TrainResult {
        actor: state.actor,
        critic: state.critic,
        log,
        steps_run,
        reached_target,
        final_eval,
    })
}

fn train_async(
    market: &Market,
    data: &TransitionSet,
    cfg: &DdpgConfig,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
    nets: &Nets,
) -> Result<TrainResult, DdpgError> {
    let mut server = ParameterServer::new(nets, cfg.clone());
    let buffer = Arc::new(ReplayBuffer::from_set(
        data,
        cfg.replay_capacity.max(data.len()),
    ));
    let harness = EvalHarness::new(market, nets, session, reward_cfg, cfg.seed);
    let published: Arc<Mutex<(u64, Arc<DdpgState>)>> =
        Arc::new(Mutex::new((0, Arc::new(server.snapshot()))));
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::sync_channel::<Result<GradientMessage, DdpgError>>(cfg.workers * 2);

    let result = std::thread::scope(|scope| {
        for worker_id in 0..cfg.workers {
            let buffer = Arc::clone(&buffer);
            let published = Arc::clone(&published);
            let stop = Arc::clone(&stop);
            let tx = tx.clone();
            let nets = nets.clone();
            let gamma = cfg.gamma;
            let batch_size = cfg.batch_size;
            let seed = cfg.seed;
            scope.spawn(move || {
                let mut rng = child_rng(seed, "ddpg-worker", worker_id as u64);
                while !stop.load(Ordering::Relaxed) {
                    let (version, state) = {
                        let guard = published.lock().expect("publish lock");
                        (guard.0, Arc::clone(&guard.1))
                    };
                    let out = buffer
                        .sample_batch(batch_size, &mut rng)
                        .and_then(|batch| {
                            worker_step(&nets, &state, &batch, gamma, worker_id, version)
                        });
                    let failed = out.is_err();
                    if tx.send(out).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(tx);

        let mut log = Vec::new();
        let mut loss_acc = 0.0;
        let mut loss_n = 0u64;
        let mut reached_target = false;
        let mut steps_run = 0u64;
        let mut outcome: Result<(), DdpgError> = Ok(());
        while steps_run < cfg.total_steps as u64 {
            let msg = match rx.recv() {
                Ok(Ok(m)) => m,
                Ok(Err(e)) => {
                    outcome = Err(e);
                    break;
                }
                Err(_) => break,
            };
            steps_run += 1;
            loss_acc += msg.critic_loss;
            loss_n += 1;
            let updated = match server.apply(&msg) {
                Ok(u) => u,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            if updated {
                let mut guard = published.lock().expect("publish lock");
                *guard = (server.version(), Arc::new(server.snapshot()));
            }
            if steps_run % cfg.eval_interval as u64 == 0
                || steps_run == cfg.total_steps as u64
            {
                let report = match harness.eval(&server.state().actor) {
                    Ok(r) => r,
                    Err(e) => {
                        outcome = Err(e);
                        break;
                    }
                };
                log.push(harness.row(steps_run, loss_acc / loss_n.max(1) as f64, &report));
                loss_acc = 0.0;
                loss_n = 0;
                if let Some(target) = cfg.target_reward {
                    if report.mean_episode_reward >= target {
                        reached_target = true;
                        break;
                    }
                }
            }
        }
        stop.store(true, Ordering::Relaxed);
        // Drain pending messages so senders unblock and join.
        while rx.try_recv().is_ok() {}
        drop(rx);
        outcome.map(|()| (log, steps_run, reached_target))
    });

    let (log, steps_run, reached_target) = result?;
    let state = server.snapshot();
    let final_eval = harness.eval(&state.actor)?;
    Ok(TrainResult {
        actor: state.actor,
        critic: state.critic,
        log,
        steps_run,
        reached_target,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_market, MarketConfig};
    use crate::rng::make_rng;
    use crate::sim::generate_dataset;

    fn tiny_market() -> Market {
        generate_market(&MarketConfig {
            num_queries: 2,
            ads_per_query: 4,
            positions_k: 2,
            position_bias: vec![1.0, 0.6],
            ..MarketConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> DdpgConfig {
        DdpgConfig {
            embedding_dim: 2,
            hidden_sizes: vec![3],
            batch_size: 8,
            workers: 1,
            total_steps: 50,
            eval_interval: 25,
            ..DdpgConfig::default()
        }
    }

    fn tiny_data(market: &Market, n: usize) -> TransitionSet {
        generate_dataset(
            market,
            n,
            &SessionConfig::default(),
            &RewardConfig::default(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn replay_samples_single_item_with_replacement() {
        let market = tiny_market();
        let data = tiny_data(&market, 1);
        let buf = ReplayBuffer::from_set(&data, 10);
        let batch = buf.sample_batch(3, &mut make_rng(1)).unwrap();
        assert_eq!(batch.len(), 3);
        for t in &batch {
            assert_eq!(*t, data.transitions[0]);
        }
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let market = tiny_market();
        let data = tiny_data(&market, 10);
        let buf = ReplayBuffer::from_set(&data, 10);
        let mut rng = make_rng(2);
        let mut counts = vec![0u32; 10];
        let draws = 100_000;
        let batch = buf.sample_batch(draws, &mut rng).unwrap();
        for t in batch {
            let idx = data
                .transitions
                .iter()
                .position(|d| d == &t)
                .expect("sampled item came from the buffer");
            counts[idx] += 1;
        }
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - draws as f64 / 10.0).abs() < 5.0 * sigma,
                "item {i} sampled {c} times"
            );
        }
    }

    #[test]
    fn replay_sampling_reproduces_under_seed_and_rejects_empty() {
        let market = tiny_market();
        let data = tiny_data(&market, 20);
        let buf = ReplayBuffer::from_set(&data, 32);
        let b1 = buf.sample_batch(16, &mut make_rng(5)).unwrap();
        let b2 = buf.sample_batch(16, &mut make_rng(5)).unwrap();
        assert_eq!(b1, b2);

        let empty = ReplayBuffer::new(4);
        assert!(matches!(
            empty.sample_batch(1, &mut make_rng(1)),
            Err(DdpgError::EmptyBuffer)
        ));
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let market = tiny_market();
        let data = tiny_data(&market, 6);
        let mut buf = ReplayBuffer::new(4);
        for t in &data.transitions {
            buf.push(*t);
        }
        assert_eq!(buf.len(), 4);
        // Items 0 and 1 were overwritten by 4 and 5.
        let mut rng = make_rng(9);
        let sample = buf.sample_batch(200, &mut rng).unwrap();
        for t in sample {
            assert!(data.transitions[2..].contains(&t));
        }
    }

    #[test]
    fn myopic_targets_equal_rewards() {
        let market = tiny_market();
        let cfg = tiny_cfg();
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let state = DdpgState::init(&nets, 7);
        let data = tiny_data(&market, 12);
        let targets = critic_targets(&nets, &state, &data.transitions, 0.0).unwrap();
        for (t, q) in data.transitions.iter().zip(targets) {
            assert_eq!(q, t.reward);
        }
    }

    #[test]
    fn terminal_targets_ignore_gamma() {
        let market = tiny_market();
        let cfg = tiny_cfg();
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let state = DdpgState::init(&nets, 7);
        let data = tiny_data(&market, 20);
        let terminals: Vec<Transition> = data
            .transitions
            .iter()
            .filter(|t| t.next.is_none())
            .copied()
            .collect();
        assert!(!terminals.is_empty());
        let targets = critic_targets(&nets, &state, &terminals, 0.97).unwrap();
        for (t, q) in terminals.iter().zip(targets) {
            assert_eq!(q, t.reward);
        }
    }

    #[test]
    fn targets_match_hand_composition() {
        let market = tiny_market();
        let cfg = tiny_cfg();
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let state = DdpgState::init(&nets, 7);
        let data = tiny_data(&market, 10);
        let batch: Vec<Transition> = data
            .transitions
            .iter()
            .filter(|t| t.next.is_some())
            .take(2)
            .copied()
            .collect();
        assert_eq!(batch.len(), 2);
        let gamma = 0.9;
        let targets = critic_targets(&nets, &state, &batch, gamma).unwrap();
        let box_ = ActionBox::default();
        for (t, q_star) in batch.iter().zip(targets) {
            let next = t.next.unwrap();
            let a = nets
                .actor
                .actor_forward(&state.target_actor, &box_, &next)
                .unwrap()
                .0;
            let q = nets
                .critic
                .critic_forward(&state.target_critic, &next, &a)
                .unwrap()
                .0;
            assert!((q_star - (t.reward + gamma * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_gives_zero_loss_and_zero_critic_gradient() {
        let market = tiny_market();
        let cfg = tiny_cfg();
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let state = DdpgState::init(&nets, 13);
        let data = tiny_data(&market, 8);
        // γ=0 and reward set to the critic's own prediction: Q* ≡ Q.
        let batch: Vec<Transition> = data
            .transitions
            .iter()
            .map(|t| {
                let q = nets
                    .critic
                    .critic_forward(&state.critic, &t.ctx, &t.action)
                    .unwrap()
                    .0;
                Transition { reward: q, ..*t }
            })
            .collect();
        let msg = worker_step(&nets, &state, &batch, 0.0, 0, 0).unwrap();
        assert_eq!(msg.critic_loss, 0.0);
        assert!(msg.grad_critic.values.iter().all(|&g| g == 0.0));
        // The actor gradient is generically nonzero even at a perfect fit.
        assert!(msg.grad_actor.values.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn actor_gradient_matches_finite_differences_through_both_nets() {
        let market = tiny_market();
        let cfg = tiny_cfg();
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let state = DdpgState::init(&nets, 17);
        let data = tiny_data(&market, 4);
        let batch = &data.transitions[..4];
        let msg = worker_step(&nets, &state, batch, 0.9, 0, 0).unwrap();

        let box_ = ActionBox::default();
        let sum_q = |actor: &ParamVector| -> f64 {
            batch
                .iter()
                .map(|t| {
                    let a = nets.actor.actor_forward(actor, &box_, &t.ctx).unwrap().0;
                    nets.critic
                        .critic_forward(&state.critic, &t.ctx, &a)
                        .unwrap()
                        .0
                })
                .sum()
        };
        let h = 1e-5;
        let mut probe = state.actor.clone();
        let mut worst: f64 = 0.0;
        for idx in 0..probe.len() {
            let orig = probe.values[idx];
            probe.values[idx] = orig + h;
            let up = sum_q(&probe);
            probe.values[idx] = orig - h;
            let down = sum_q(&probe);
            probe.values[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = msg.grad_actor.values[idx];
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-10 {
                worst = worst.max((analytic - numeric).abs() / denom.max(1e-6));
            }
        }
        assert!(worst < 1e-3, "composed gradient rel err {worst}");
    }

    #[test]
    fn identical_batch_items_sum_linearly() {
        let market = tiny_market();
        let cfg = tiny_cfg();
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let state = DdpgState::init(&nets, 19);
        let data = tiny_data(&market, 1);
        let one = data.transitions[0];
        let single = worker_step(&nets, &state, &[one], 0.9, 0, 0).unwrap();
        let triple = worker_step(&nets, &state, &[one, one, one], 0.9, 0, 0).unwrap();
        for (s, t) in single
            .grad_critic
            .values
            .iter()
            .zip(&triple.grad_critic.values)
        {
            assert!((3.0 * s - t).abs() < 1e-12 * (1.0 + t.abs()));
        }
        for (s, t) in single
            .grad_actor
            .values
            .iter()
            .zip(&triple.grad_actor.values)
        {
            assert!((3.0 * s - t).abs() < 1e-12 * (1.0 + t.abs()));
        }
        // Mean per-sample loss is unchanged; batch size triples.
        assert!((single.critic_loss - triple.critic_loss).abs() < 1e-12);
        assert_eq!(triple.batch_size, 3);
    }

    #[test]
    fn zero_gradients_change_nothing_but_the_version() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            update_period: 1,
            ..tiny_cfg()
        };
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let mut server = ParameterServer::new(&nets, cfg);
        let before = server.snapshot();
        let msg = GradientMessage {
            worker_id: 0,
            grad_critic: before.critic.zeros_like(),
            grad_actor: before.actor.zeros_like(),
            critic_loss: 0.0,
            batch_size: 8,
            version: 0,
        };
        assert!(server.apply(&msg).unwrap());
        assert_eq!(server.version(), 1);
        let after = server.snapshot();
        assert_eq!(after.critic, before.critic);
        assert_eq!(after.actor, before.actor);
        // Targets still take one (numerically trivial) tracking step.
        let mut expect_tc = before.target_critic.clone();
        let mut expect_ta = before.target_actor.clone();
        soft_update(&mut expect_tc, &before.critic, 0.01).unwrap();
        soft_update(&mut expect_ta, &before.actor, 0.01).unwrap();
        assert_eq!(after.target_critic, expect_tc);
        assert_eq!(after.target_actor, expect_ta);
    }

    #[test]
    fn tau_one_snaps_targets_to_online() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            update_period: 1,
            tau: 1.0,
            ..tiny_cfg()
        };
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let mut server = ParameterServer::new(&nets, cfg.clone());
        let state = server.snapshot();
        let data = tiny_data(&market, 8);
        let msg = worker_step(&nets, &state, &data.transitions, cfg.gamma, 0, 0).unwrap();
        server.apply(&msg).unwrap();
        let after = server.snapshot();
        assert_eq!(after.target_critic, after.critic);
        assert_eq!(after.target_actor, after.actor);
    }

    #[test]
    fn stale_messages_are_dropped() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            update_period: 1,
            ..tiny_cfg()
        };
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let mut server = ParameterServer::new(&nets, cfg.clone());
        let data = tiny_data(&market, 8);
        // Advance the server several versions.
        for _ in 0..4 {
            let msg =
                worker_step(&nets, server.state(), &data.transitions, cfg.gamma, 0, server.version())
                    .unwrap();
            server.apply(&msg).unwrap();
        }
        assert_eq!(server.version(), 4);
        let before = server.snapshot();
        // A message from version 0 is more than two versions old.
        let stale = worker_step(&nets, &before, &data.transitions, cfg.gamma, 1, 0).unwrap();
        assert!(!server.apply(&stale).unwrap());
        assert_eq!(server.snapshot(), before);
        assert_eq!(server.version(), 4);
    }

    #[test]
    fn accumulation_defers_updates_until_period() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            update_period: 3,
            ..tiny_cfg()
        };
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let mut server = ParameterServer::new(&nets, cfg.clone());
        let before = server.snapshot();
        let data = tiny_data(&market, 8);
        let msg = worker_step(&nets, &before, &data.transitions, cfg.gamma, 0, 0).unwrap();
        assert!(!server.apply(&msg).unwrap());
        assert!(!server.apply(&msg).unwrap());
        assert_eq!(server.snapshot(), before);
        assert!(server.apply(&msg).unwrap());
        assert_ne!(server.snapshot(), before);
        assert_eq!(server.version(), 1);
    }

    #[test]
    fn server_loop_matches_hand_rolled_updates() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            update_period: 1,
            ..tiny_cfg()
        };
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let mut server = ParameterServer::new(&nets, cfg.clone());
        let mut manual = server.snapshot();
        let data = tiny_data(&market, 64);
        let mut rng = make_rng(23);
        let buf = ReplayBuffer::from_set(&data, 64);
        for _ in 0..20 {
            let batch = buf.sample_batch(cfg.batch_size, &mut rng).unwrap();
            let msg =
                worker_step(&nets, server.state(), &batch, cfg.gamma, 0, server.version()).unwrap();
            // Manual update with the same message.
            let scale = 1.0 / msg.batch_size as f64;
            manual.critic.axpy(-cfg.critic_lr * scale, &msg.grad_critic).unwrap();
            manual.actor.axpy(cfg.actor_lr * scale, &msg.grad_actor).unwrap();
            soft_update(&mut manual.target_critic, &manual.critic, cfg.tau).unwrap();
            soft_update(&mut manual.target_actor, &manual.actor, cfg.tau).unwrap();
            server.apply(&msg).unwrap();
            assert_eq!(server.snapshot(), manual);
        }
    }

    #[test]
    fn critic_only_descent_on_a_frozen_batch() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            update_period: 1,
            critic_lr: 1e-3,
            actor_lr: 1e-12, // effectively critic-only
            gamma: 0.0,      // fixed targets
            tau: 1e-12,
            ..tiny_cfg()
        };
        let nets = Nets::for_market(market.num_queries(), &cfg).unwrap();
        let mut server = ParameterServer::new(&nets, cfg.clone());
        let data = tiny_data(&market, 16);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let msg =
                worker_step(&nets, server.state(), &data.transitions, cfg.gamma, 0, server.version())
                    .unwrap();
            losses.push(msg.critic_loss);
            server.apply(&msg).unwrap();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss did not strictly decrease: {w:?}");
        }
    }

    #[test]
    fn sequential_training_is_bit_reproducible() {
        let market = tiny_market();
        let data = tiny_data(&market, 400);
        let cfg = DdpgConfig {
            total_steps: 120,
            eval_interval: 40,
            update_period: 1,
            ..tiny_cfg()
        };
        let session = SessionConfig {
            episodes_per_eval: 4,
            ..SessionConfig::default()
        };
        let r1 = train(&market, &data, &cfg, &session, &RewardConfig::default()).unwrap();
        let r2 = train(&market, &data, &cfg, &session, &RewardConfig::default()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.log.len(), 3);
        assert_eq!(r1.steps_run, 120);
    }

    #[test]
    fn async_training_runs_to_completion() {
        let market = tiny_market();
        let data = tiny_data(&market, 400);
        let cfg = DdpgConfig {
            workers: 3,
            total_steps: 150,
            eval_interval: 50,
            ..tiny_cfg()
        };
        let session = SessionConfig {
            episodes_per_eval: 4,
            ..SessionConfig::default()
        };
        let r = train(&market, &data, &cfg, &session, &RewardConfig::default()).unwrap();
        assert_eq!(r.steps_run, 150);
        assert!(!r.log.is_empty());
        r.actor.check_finite().unwrap();
        r.critic.check_finite().unwrap();
    }

    #[test]
    fn live_mode_collects_fresh_transitions() {
        let market = tiny_market();
        let cfg = DdpgConfig {
            live: true,
            workers: 1,
            total_steps: 30,
            eval_interval: 30,
            batch_size: 4,
            ..tiny_cfg()
        };
        let session = SessionConfig {
            episodes_per_eval: 2,
            ..SessionConfig::default()
        };
        // No offline data at all: everything comes from live sessions.
        let empty = TransitionSet::default();
        let r = train(&market, &empty, &cfg, &session, &RewardConfig::default()).unwrap();
        assert_eq!(r.steps_run, 30);
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let market = tiny_market();
        let data = tiny_data(&market, 200);
        let cfg = DdpgConfig {
            critic_lr: 1e9,
            divergence_loss: 1e4,
            divergence_window: 5,
            total_steps: 5_000,
            eval_interval: 1_000,
            ..tiny_cfg()
        };
        let session = SessionConfig {
            episodes_per_eval: 2,
            ..SessionConfig::default()
        };
        match train(&market, &data, &cfg, &session, &RewardConfig::default()) {
            Err(DdpgError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let cases = [
            DdpgConfig {
                gamma: 1.0,
                ..DdpgConfig::default()
            },
            DdpgConfig {
                tau: 0.0,
                ..DdpgConfig::default()
            },
            DdpgConfig {
                batch_size: 0,
                ..DdpgConfig::default()
            },
            DdpgConfig {
                live: true,
                workers: 2,
                ..DdpgConfig::default()
            },
        ];
        for cfg in cases {
            assert!(cfg.validate().is_err(), "accepted {cfg:?}");
        }
    }
}
