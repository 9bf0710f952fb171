//! Derivative-free online policy refinement. Each iteration perturbs the
//! actor parameters with Gaussian noise, scores every candidate by mean
//! episode reward on common seeded sessions, and takes the step
//! θ′ = θ + η·(1/nσ)·Σᵢ Rᵢ·εᵢ. No gradients are computed anywhere;
//! evaluators report a single scalar per candidate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{ActionBox, RewardConfig};
use crate::market::Market;
use crate::net::{Net, NetError, ParamVector};
use crate::rng::{child_rng, child_seed, Rng};
use crate::sim::{evaluate_policy, EvalReport, SessionConfig, SimError};

#[derive(Debug, Error)]
pub enum EsError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("perturbation layout does not match the policy parameters")]
    LayoutMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FitnessShaping {
    /// Use raw mean episode rewards in the update.
    #[default]
    Off,
    /// Replace fitnesses by centered ranks in [-0.5, 0.5]; the update
    /// becomes exactly invariant to constant fitness shifts.
    CenteredRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsConfig {
    /// Perturbations per iteration.
    pub n: usize,
    /// Noise stddev per parameter coordinate.
    pub sigma: f64,
    /// Learning rate η.
    pub eta: f64,
    pub iterations: usize,
    /// Seeded sessions averaged into each candidate's fitness.
    pub episodes_per_fitness: usize,
    pub fitness_shaping: FitnessShaping,
    /// Draw antithetic pairs (ε, −ε) instead of independent noise.
    pub mirrored: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            n: 20,
            sigma: 0.05,
            eta: 0.01,
            iterations: 100,
            episodes_per_fitness: 50,
            fitness_shaping: FitnessShaping::Off,
            mirrored: false,
            threads: 1,
            seed: 17,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), EsError> {
        let bad = |m: &str| Err(EsError::Config(m.into()));
        if self.n < 2 {
            return bad("n must be ≥ 2");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be positive and finite");
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("eta must be non-negative and finite");
        }
        if self.mirrored && self.n % 2 != 0 {
            return bad("mirrored sampling requires an even n");
        }
        if self.episodes_per_fitness == 0 {
            return bad("episodes_per_fitness must be ≥ 1");
        }
        if self.threads == 0 {
            return bad("threads must be ≥ 1");
        }
        Ok(())
    }
}

/// One candidate: the noise applied to θ and the fitness it earned.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub eps: ParamVector,
    pub fitness: f64,
}

/// The only thing an evaluator sends back to the updater: a candidate
/// index and its scalar fitness. Deliberately carries no parameters and
/// no gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessMessage {
    pub candidate: usize,
    pub fitness: f64,
}

/// Draws the iteration's noise vectors: n i.i.d. Gaussian(0, σ²)
/// coordinates per candidate, or n/2 antithetic pairs laid out
/// adjacently when mirrored.
pub fn perturb(
    theta: &ParamVector,
    cfg: &EsConfig,
    rng: &mut Rng,
) -> Result<Vec<ParamVector>, EsError> {
    cfg.validate()?;
    let draws = if cfg.mirrored { cfg.n / 2 } else { cfg.n };
    let normal = rand_distr::Normal::new(0.0, cfg.sigma).expect("validated sigma");
    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..draws {
        let mut eps = theta.zeros_like();
        for v in &mut eps.values {
            *v = rand_distr::Distribution::sample(&normal, rng);
        }
        if cfg.mirrored {
            let mut neg = eps.clone();
            for v in &mut neg.values {
                *v = -*v;
            }
            out.push(eps);
            out.push(neg);
        } else {
            out.push(eps);
        }
    }
    Ok(out)
}

/// Scores one candidate parameter vector by mean episode reward over
/// `episodes_per_fitness` sessions seeded from `eval_seed`.
fn fitness_of(
    market: &Market,
    net: &Net,
    params: &ParamVector,
    cfg: &EsConfig,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
    eval_seed: u64,
) -> Result<EvalReport, EsError> {
    let box_ = ActionBox::default();
    let eval_session = SessionConfig {
        episodes_per_eval: cfg.episodes_per_fitness,
        seed: eval_seed,
        ..*session
    };
    Ok(evaluate_policy(
        market,
        |ctx| {
            net.actor_forward(params, &box_, ctx)
                .expect("finite candidate parameters")
                .0
        },
        &eval_session,
        reward_cfg,
    )?)
}

/// Evaluates every candidate θ+εᵢ on the same seeded sessions (common
/// random numbers, so candidates differ only through their actions).
/// Results are ordered by candidate index regardless of the thread
/// schedule, and each carries only a scalar fitness.
pub fn evaluate_population(
    market: &Market,
    net: &Net,
    theta: &ParamVector,
    eps: &[ParamVector],
    cfg: &EsConfig,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
    eval_seed: u64,
) -> Result<Vec<FitnessMessage>, EsError> {
    for e in eps {
        if !e.same_layout(theta) {
            return Err(EsError::LayoutMismatch);
        }
    }
    let candidate = |i: usize| -> Result<FitnessMessage, EsError> {
        let mut params = theta.clone();
        params.axpy(1.0, &eps[i])?;
        let report = fitness_of(market, net, &params, cfg, session, reward_cfg, eval_seed)?;
        Ok(FitnessMessage {
            candidate: i,
            fitness: report.mean_episode_reward,
        })
    };
    if cfg.threads <= 1 || eps.len() <= 1 {
        return (0..eps.len()).map(candidate).collect();
    }
    let threads = cfg.threads.min(eps.len());
    let chunk = eps.len().div_ceil(threads);
    let mut out: Vec<Option<FitnessMessage>> = vec![None; eps.len()];
    std::thread::scope(|scope| -> Result<(), EsError> {
        let mut handles = Vec::new();
        for (t, slot_chunk) in out.chunks_mut(chunk).enumerate() {
            let candidate = &candidate;
            handles.push(scope.spawn(move || -> Result<(), EsError> {
                for (j, slot) in slot_chunk.iter_mut().enumerate() {
                    *slot = Some(candidate(t * chunk + j)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("evaluator thread panicked")?;
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|m| m.expect("all slots filled")).collect())
}

fn shaped_fitnesses(perturbations: &[Perturbation], shaping: FitnessShaping) -> Vec<f64> {
    match shaping {
        FitnessShaping::Off => perturbations.iter().map(|p| p.fitness).collect(),
        FitnessShaping::CenteredRank => {
            let n = perturbations.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                perturbations[a]
                    .fitness
                    .total_cmp(&perturbations[b].fitness)
                    .then(a.cmp(&b))
            });
            let mut shaped = vec![0.0; n];
            for (rank, &idx) in order.iter().enumerate() {
                shaped[idx] = rank as f64 / (n - 1) as f64 - 0.5;
            }
            shaped
        }
    }
}

/// The update rule: θ′ = θ + η·(1/nσ)·Σᵢ Rᵢ·εᵢ, with Rᵢ optionally
/// replaced by centered ranks.
pub fn es_update(
    theta: &ParamVector,
    perturbations: &[Perturbation],
    cfg: &EsConfig,
) -> Result<ParamVector, EsError> {
    if perturbations.len() < 2 {
        return Err(EsError::Config("need at least 2 perturbations".into()));
    }
    for p in perturbations {
        if !p.eps.same_layout(theta) {
            return Err(EsError::LayoutMismatch);
        }
    }
    let fitnesses = shaped_fitnesses(perturbations, cfg.fitness_shaping);
    let mut sum = theta.zeros_like();
    for (p, r) in perturbations.iter().zip(&fitnesses) {
        sum.axpy(*r, &p.eps)?;
    }
    let mut next = theta.clone();
    let scale = cfg.eta / (perturbations.len() as f64 * cfg.sigma);
    next.axpy(scale, &sum)?;
    Ok(next)
}

/// One trajectory row: the iteration's population mean fitness plus the
/// post-update policy's own evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsRow {
    pub iteration: u64,
    pub fitness: f64,
    pub ctr: f64,
    pub ppc: f64,
    pub rpm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsRunResult {
    pub theta: ParamVector,
    pub log: Vec<EsRow>,
    pub final_eval: EvalReport,
}

/// Runs the full perturb → evaluate → update loop. Evaluation seeds are
/// shared across candidates within an iteration and refreshed between
/// iterations.
pub fn es_run(
    market: &Market,
    net: &Net,
    theta0: &ParamVector,
    cfg: &EsConfig,
    session: &SessionConfig,
    reward_cfg: &RewardConfig,
) -> Result<EsRunResult, EsError> {
    cfg.validate()?;
    let mut theta = theta0.clone();
    let mut rng = child_rng(cfg.seed, "es-perturb", 0);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let eval_seed = child_seed(cfg.seed, "es-eval", iter as u64);
        let eps = perturb(&theta, cfg, &mut rng)?;
        let fits = evaluate_population(
            market, net, &theta, &eps, cfg, session, reward_cfg, eval_seed,
        )?;
        let mean_fitness =
            fits.iter().map(|m| m.fitness).sum::<f64>() / fits.len() as f64;
        let perturbations: Vec<Perturbation> = eps
            .into_iter()
            .zip(&fits)
            .map(|(eps, m)| Perturbation {
                eps,
                fitness: m.fitness,
            })
            .collect();
        theta = es_update(&theta, &perturbations, cfg)?;
        let report = fitness_of(market, net, &theta, cfg, session, reward_cfg, eval_seed)?;
        log.push(EsRow {
            iteration: iter as u64,
            fitness: mean_fitness,
            ctr: report.metrics.ctr,
            ppc: report.metrics.ppc,
            rpm: report.metrics.rpm,
        });
    }
    let final_seed = child_seed(cfg.seed, "es-eval", cfg.iterations as u64);
    let final_eval = fitness_of(market, net, &theta, cfg, session, reward_cfg, final_seed)?;
    Ok(EsRunResult {
        theta,
        log,
        final_eval,
    })
}
