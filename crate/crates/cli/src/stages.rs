//! Pipeline stages and their artifacts. Every stage reads what earlier
//! stages wrote into the output directory, and drops a manifest beside
//! its outputs so a run can be reproduced from the directory alone.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use adlab_core::auction::{ActionBox, Metrics, RankingParams};
use adlab_core::calib::{fit_isotonic, CalibPoint};
use adlab_core::ddpg::{
    critic_targets, train, DdpgError, DdpgState, Nets, ReplayBuffer, TrainResult,
};
use adlab_core::es::{es_run, EsError};
use adlab_core::market::{generate_market, Market, MarketError};
use adlab_core::net::{Head, Net, NetError, NetworkSpec, ParamVector};
use adlab_core::oracle::grid_search;
use adlab_core::rng::child_rng;
use adlab_core::sim::{
    collect_rate_observations, generate_dataset, SimError, TransitionSet,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Unusable configuration — exit 2.
    Config(String),
    /// A pipeline artifact that an earlier stage should have written is
    /// absent — exit 3.
    MissingInput(String),
    /// Training blew up numerically — exit 4.
    Diverged(String),
    /// Anything else — exit 1.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::MissingInput(m) => write!(f, "missing input: {m}"),
            CliError::Diverged(m) => write!(f, "{m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.to_string()),
            SimError::Market(m) => m.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<DdpgError> for CliError {
    fn from(e: DdpgError) -> Self {
        match e {
            DdpgError::Diverged { .. } => CliError::Diverged(e.to_string()),
            DdpgError::Net(NetError::NonFinite(_)) => CliError::Diverged(e.to_string()),
            DdpgError::Config(_) => CliError::Config(e.to_string()),
            DdpgError::Sim(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EsError> for CliError {
    fn from(e: EsError) -> Self {
        match e {
            EsError::Config(_) => CliError::Config(e.to_string()),
            EsError::Net(NetError::NonFinite(_)) => CliError::Diverged(e.to_string()),
            EsError::Sim(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite(_) => CliError::Diverged(e.to_string()),
            NetError::BadSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn other(e: impl std::fmt::Display, path: &Path) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn read_input(path: &Path, hint: &str) -> Result<String, CliError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(CliError::MissingInput(
            format!("{} — {hint}", path.display()),
        )),
        Err(e) => Err(other(e, path)),
    }
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| other(e, path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn to_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| other(e, path))?;
    s.push('\n');
    Ok(s)
}

fn from_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| other(e, path))
}

/// `{command, version, master_seed, config_sha256}` dropped beside each
/// stage's outputs. The hash covers the fully resolved config, so a run
/// is reproducible from the directory contents alone.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: String,
    master_seed: u64,
    config_sha256: String,
}

fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<(), CliError> {
    // JSON rather than TOML: the derived child seeds use the full u64
    // range, which TOML integers cannot carry.
    let cfg_text = serde_json::to_string(cfg)
        .map_err(|e| CliError::Other(format!("cannot serialize config: {e}")))?;
    let manifest = Manifest {
        command,
        version: format!("adlab {}", env!("CARGO_PKG_VERSION")),
        master_seed: cfg.master_seed,
        config_sha256: hex(&Sha256::digest(cfg_text.as_bytes())),
    };
    let path = cfg
        .output_dir
        .join(format!("manifest_{}.json", command.replace('-', "_")));
    write_output(&path, &to_json_pretty(&manifest, &path)?)
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Loads the calibrated market when `calibrate` has run, the raw one
/// otherwise.
fn load_market(cfg: &ExperimentConfig) -> Result<Market, CliError> {
    let calibrated = cfg.output_dir.join("market_calibrated.json");
    if calibrated.exists() {
        println!("using {}", calibrated.display());
        return from_json(&read_input(&calibrated, "unreachable")?, &calibrated);
    }
    let raw = cfg.output_dir.join("market.json");
    from_json(&read_input(&raw, "run `adlab gen-market` first")?, &raw)
}

pub fn gen_market(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let market = generate_market(&cfg.market)?;
    let path = cfg.output_dir.join("market.json");
    write_output(&path, &to_json_pretty(&market, &path)?)?;
    // A calibrated copy of an older market must not shadow this one.
    let stale = cfg.output_dir.join("market_calibrated.json");
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| other(e, &stale))?;
        println!("removed stale {}", stale.display());
    }
    write_manifest(cfg, "gen-market")
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let market = load_market(cfg)?;
    let set = generate_dataset(
        &market,
        cfg.dataset_transitions,
        &cfg.session,
        &cfg.reward,
        cfg.dataset_seed(),
    )?;
    let path = cfg.output_dir.join("transitions.csv");
    let mut buf = Vec::new();
    set.write_csv(&mut buf)?;
    write_output(&path, std::str::from_utf8(&buf).expect("ascii csv"))?;
    write_manifest(cfg, "simulate")
}

fn weighted_sse_raw(points: &[CalibPoint]) -> f64 {
    points.iter().map(|&(p, y, w)| w * (p - y) * (p - y)).sum()
}

#[derive(Serialize)]
struct CalibrationSummary {
    impressions: u64,
    clicks: u64,
    ctr_raw_sse: f64,
    ctr_fitted_sse: f64,
    cvr_raw_sse: f64,
    cvr_fitted_sse: f64,
}

pub fn calibrate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    // Always calibrate the raw market; re-fitting on top of an already
    // calibrated copy would compound the maps.
    let raw_path = cfg.output_dir.join("market.json");
    let market: Market = from_json(
        &read_input(&raw_path, "run `adlab gen-market` first")?,
        &raw_path,
    )?;
    let mid = ActionBox::default().midpoint();
    let obs = collect_rate_observations(
        &market,
        |_| mid,
        cfg.calibration_impressions,
        &cfg.session,
        cfg.calibration_seed(),
    )?;
    let ctr_map = fit_isotonic(&obs.ctr)
        .map_err(|e| CliError::Other(format!("ctr calibration: {e}")))?;
    // With very few clicks there may be nothing to fit; fall back to the
    // identity for conversions.
    let cvr_map = if obs.cvr.is_empty() {
        None
    } else {
        Some(
            fit_isotonic(&obs.cvr)
                .map_err(|e| CliError::Other(format!("cvr calibration: {e}")))?,
        )
    };
    let summary = CalibrationSummary {
        impressions: obs.impressions,
        clicks: obs.clicks,
        ctr_raw_sse: weighted_sse_raw(&obs.ctr),
        ctr_fitted_sse: ctr_map.weighted_sse(&obs.ctr),
        cvr_raw_sse: weighted_sse_raw(&obs.cvr),
        cvr_fitted_sse: cvr_map
            .as_ref()
            .map_or_else(|| weighted_sse_raw(&obs.cvr), |m| m.weighted_sse(&obs.cvr)),
    };
    let calibrated = market.with_recalibrated_predictions(
        |p| ctr_map.apply(p),
        |p| cvr_map.as_ref().map_or(p, |m| m.apply(p)),
    );
    let path = cfg.output_dir.join("market_calibrated.json");
    write_output(&path, &to_json_pretty(&calibrated, &path)?)?;
    let spath = cfg.output_dir.join("calibration.json");
    write_output(&spath, &to_json_pretty(&summary, &spath)?)?;
    write_manifest(cfg, "calibrate")
}

#[derive(Serialize, Deserialize)]
struct GridBest {
    params: RankingParams,
    reward: f64,
    metrics: Metrics,
}

pub fn grid_search_stage(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let market = load_market(cfg)?;
    let res = grid_search(&market, &cfg.grid, &cfg.session, &cfg.reward)?;
    let mut csv = String::from("a1,a2,a3,a4,a5,reward,ctr,ppc,rpm\n");
    for s in &res.samples {
        let a = s.params.as_array();
        writeln!(
            csv,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            a[0], a[1], a[2], a[3], a[4], s.reward, s.metrics.ctr, s.metrics.ppc, s.metrics.rpm
        )
        .unwrap();
    }
    let surface = cfg.output_dir.join("grid_surface.csv");
    write_output(&surface, &csv)?;
    let best = GridBest {
        params: res.best,
        reward: res.best_reward,
        metrics: res.best_metrics,
    };
    let bpath = cfg.output_dir.join("grid_best.json");
    write_output(&bpath, &to_json_pretty(&best, &bpath)?)?;
    write_manifest(cfg, "grid-search")
}

/// Serialized actor: enough to rebuild the network and its parameters.
#[derive(Serialize, Deserialize)]
struct ActorArtifact {
    spec: NetworkSpec,
    values: Vec<f64>,
}

fn load_actor(path: &Path) -> Result<(Net, ParamVector), CliError> {
    let artifact: ActorArtifact = from_json(
        &read_input(path, "run `adlab train-ddpg` first")?,
        path,
    )?;
    if artifact.spec.head != Head::Actor {
        return Err(CliError::Other(format!(
            "{}: artifact does not hold an actor network",
            path.display()
        )));
    }
    let net = Net::new(artifact.spec)?;
    let mut theta = net.zeros();
    if artifact.values.len() != theta.len() {
        return Err(CliError::Other(format!(
            "{}: {} parameter values for a {}-parameter network",
            path.display(),
            artifact.values.len(),
            theta.len()
        )));
    }
    theta.values = artifact.values;
    theta.check_finite()?;
    Ok((net, theta))
}

fn convergence_csv(result: &TrainResult) -> String {
    let mut csv = String::from("step,loss,reward,ctr,ppc,rpm\n");
    for r in &result.log {
        writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.loss, r.reward, r.ctr, r.ppc, r.rpm
        )
        .unwrap();
    }
    csv
}

fn load_transitions(cfg: &ExperimentConfig) -> Result<TransitionSet, CliError> {
    let path = cfg.output_dir.join("transitions.csv");
    let text = read_input(&path, "run `adlab simulate` first")?;
    TransitionSet::read_csv(text.as_bytes()).map_err(|e| other(e, &path))
}

pub fn train_ddpg(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let market = load_market(cfg)?;
    let set = load_transitions(cfg)?;
    let mut primary: Option<TrainResult> = None;
    for dueling in [true, false] {
        let dcfg = adlab_core::ddpg::DdpgConfig {
            dueling,
            ..cfg.ddpg.clone()
        };
        let result = train(&market, &set, &dcfg, &cfg.session, &cfg.reward)?;
        let name = if dueling {
            "convergence_dueling.csv"
        } else {
            "convergence_plain.csv"
        };
        let path = cfg.output_dir.join(name);
        write_output(&path, &convergence_csv(&result))?;
        println!(
            "{} head: reward {:?} after {} steps",
            if dueling { "dueling" } else { "plain" },
            result.final_eval.mean_episode_reward,
            result.steps_run
        );
        if dueling == cfg.ddpg.dueling {
            primary = Some(result);
        }
    }
    let primary = primary.expect("one head matches cfg.ddpg.dueling");

    let artifact = ActorArtifact {
        spec: NetworkSpec::new(
            market.num_queries(),
            cfg.ddpg.embedding_dim,
            &cfg.ddpg.hidden_sizes,
            Head::Actor,
        ),
        values: primary.actor.values.clone(),
    };
    let apath = cfg.output_dir.join("actor.json");
    write_output(&apath, &to_json_pretty(&artifact, &apath)?)?;

    write_output(
        &cfg.output_dir.join("batch_variance.csv"),
        &batch_variance_csv(cfg, &market, &set, &primary)?,
    )?;
    write_manifest(cfg, "train-ddpg")
}

/// Critic loss of the frozen final parameters on freshly resampled
/// batches, across batch sizes — the raw data behind the batch-size
/// variance comparison.
fn batch_variance_csv(
    cfg: &ExperimentConfig,
    market: &Market,
    set: &TransitionSet,
    trained: &TrainResult,
) -> Result<String, CliError> {
    let nets = Nets::for_market(market.num_queries(), &cfg.ddpg)?;
    let state = DdpgState {
        actor: trained.actor.clone(),
        critic: trained.critic.clone(),
        target_actor: trained.actor.clone(),
        target_critic: trained.critic.clone(),
    };
    let replay = ReplayBuffer::from_set(set, cfg.ddpg.replay_capacity);
    let mut csv = String::from("batch_size,resample,loss\n");
    for m in [32usize, 256, 1024] {
        let mut rng = child_rng(cfg.batch_variance_seed(m), "resample", 0);
        for resample in 0..200 {
            let batch = replay.sample_batch(m, &mut rng)?;
            let targets = critic_targets(&nets, &state, &batch, cfg.ddpg.gamma)?;
            let mut loss = 0.0;
            for (t, q_star) in batch.iter().zip(&targets) {
                let (q, _) = nets.critic.critic_forward(&state.critic, &t.ctx, &t.action)?;
                let e = q - q_star;
                loss += 0.5 * e * e;
            }
            loss /= m as f64;
            writeln!(csv, "{m},{resample},{loss:?}").unwrap();
        }
    }
    Ok(csv)
}

pub fn run_es(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let market = load_market(cfg)?;
    let (net, theta) = load_actor(&cfg.output_dir.join("actor.json"))?;
    let res = es_run(&market, &net, &theta, &cfg.es, &cfg.session, &cfg.reward)?;
    let mut csv = String::from("iteration,fitness,ctr,ppc,rpm\n");
    for r in &res.log {
        writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?}",
            r.iteration, r.fitness, r.ctr, r.ppc, r.rpm
        )
        .unwrap();
    }
    write_output(&cfg.output_dir.join("es_trajectory.csv"), &csv)?;
    let artifact = ActorArtifact {
        spec: NetworkSpec::new(
            market.num_queries(),
            cfg.ddpg.embedding_dim,
            &cfg.ddpg.hidden_sizes,
            Head::Actor,
        ),
        values: res.theta.values.clone(),
    };
    let apath = cfg.output_dir.join("actor_es.json");
    write_output(&apath, &to_json_pretty(&artifact, &apath)?)?;
    println!(
        "final policy reward {:?}",
        res.final_eval.mean_episode_reward
    );
    write_manifest(cfg, "run-es")
}

// ---- report ----

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn parse_table(text: &str, path: &Path) -> Result<Table, CliError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| other("empty file", path))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let row = row.map_err(|e| other(format!("row {}: {e}", i + 2), path))?;
        if row.len() != header.len() {
            return Err(other(
                format!("row {}: {} fields, expected {}", i + 2, row.len(), header.len()),
                path,
            ));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn read_table(path: &Path, hint: &str) -> Result<Table, CliError> {
    parse_table(&read_input(path, hint)?, path)
}

fn read_table_optional(path: &Path) -> Result<Option<Table>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(parse_table(
        &read_input(path, "unreachable")?,
        path,
    )?))
}

/// RPM is redundant given CTR and PPC (revenue/impressions =
/// clicks/impressions × revenue/clicks); every log row must agree.
fn check_rpm_identity(table: &Table, path: &Path) -> Result<(), CliError> {
    let (Some(c), Some(p), Some(r)) = (table.col("ctr"), table.col("ppc"), table.col("rpm"))
    else {
        return Err(other("missing ctr/ppc/rpm columns", path));
    };
    for (i, row) in table.rows.iter().enumerate() {
        let err = (row[r] - 1000.0 * row[c] * row[p]).abs();
        if err > 1e-9 {
            return Err(other(
                format!(
                    "row {}: rpm {} inconsistent with 1000*ctr*ppc (|err| = {err:e})",
                    i + 2,
                    row[r]
                ),
                path,
            ));
        }
    }
    Ok(())
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let bpath = out.join("grid_best.json");
    let best: GridBest = from_json(
        &read_input(&bpath, "run `adlab grid-search` first")?,
        &bpath,
    )?;
    if (best.metrics.rpm - 1000.0 * best.metrics.ctr * best.metrics.ppc).abs() > 1e-9 {
        return Err(other("rpm inconsistent with 1000*ctr*ppc", &bpath));
    }

    let dpath = out.join("convergence_dueling.csv");
    let ppath = out.join("convergence_plain.csv");
    let dueling = read_table(&dpath, "run `adlab train-ddpg` first")?;
    let plain = read_table(&ppath, "run `adlab train-ddpg` first")?;
    check_rpm_identity(&dueling, &dpath)?;
    check_rpm_identity(&plain, &ppath)?;
    for (t, p) in [(&dueling, &dpath), (&plain, &ppath)] {
        if t.header != ["step", "loss", "reward", "ctr", "ppc", "rpm"] {
            return Err(other("unexpected convergence-log header", p));
        }
        if t.rows.is_empty() {
            return Err(other("no convergence rows", p));
        }
    }

    let es_path = out.join("es_trajectory.csv");
    let es = read_table_optional(&es_path)?;
    if let Some(t) = &es {
        check_rpm_identity(t, &es_path)?;
    }
    let surface_path = out.join("grid_surface.csv");
    if let Some(t) = read_table_optional(&surface_path)? {
        check_rpm_identity(&t, &surface_path)?;
    }

    // Headline numbers.
    let primary = if cfg.ddpg.dueling { &dueling } else { &plain };
    let reward_col = primary.col("reward").expect("validated header");
    let learned = primary.rows.last().expect("nonempty")[reward_col];
    let mut summary = String::from("metric,value\n");
    writeln!(summary, "oracle_reward,{:?}", best.reward).unwrap();
    writeln!(summary, "ddpg_final_reward,{learned:?}").unwrap();
    writeln!(
        summary,
        "ratio_learned_over_oracle,{:?}",
        learned / best.reward
    )
    .unwrap();
    if let Some(t) = &es {
        let fit = t.col("fitness").ok_or_else(|| other("missing fitness column", &es_path))?;
        if let Some(last) = t.rows.last() {
            writeln!(summary, "es_final_fitness,{:?}", last[fit]).unwrap();
            writeln!(
                summary,
                "ratio_es_over_oracle,{:?}",
                last[fit] / best.reward
            )
            .unwrap();
        }
    }
    write_output(&out.join("report_summary.csv"), &summary)?;

    // Head-to-head on the steps both logs share.
    let mut csv = String::from("step,loss_dueling,reward_dueling,loss_plain,reward_plain\n");
    for drow in &dueling.rows {
        if let Some(prow) = plain.rows.iter().find(|r| r[0] == drow[0]) {
            writeln!(
                csv,
                "{},{:?},{:?},{:?},{:?}",
                drow[0] as u64, drow[1], drow[2], prow[1], prow[2]
            )
            .unwrap();
        }
    }
    write_output(&out.join("dueling_vs_plain.csv"), &csv)?;

    let bv_path = out.join("batch_variance.csv");
    if let Some(bv) = read_table_optional(&bv_path)? {
        let (Some(bcol), Some(lcol)) = (bv.col("batch_size"), bv.col("loss")) else {
            return Err(other("missing batch_size/loss columns", &bv_path));
        };
        let mut sizes: Vec<u64> = bv.rows.iter().map(|r| r[bcol] as u64).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut csv = String::from("batch_size,mean_loss,loss_variance\n");
        for m in sizes {
            let losses: Vec<f64> = bv
                .rows
                .iter()
                .filter(|r| r[bcol] as u64 == m)
                .map(|r| r[lcol])
                .collect();
            let (mean, var) = mean_and_variance(&losses);
            writeln!(csv, "{m},{mean:?},{var:?}").unwrap();
        }
        write_output(&out.join("batch_sweep.csv"), &csv)?;
    }

    if let Some(t) = &es {
        let fit = t.col("fitness").expect("checked above");
        let first = t.rows.first().map(|r| r[fit]).unwrap_or(0.0);
        let mut csv = String::from("iteration,fitness,gain_from_start\n");
        for row in &t.rows {
            writeln!(csv, "{},{:?},{:?}", row[0] as u64, row[fit], row[fit] - first).unwrap();
        }
        write_output(&out.join("es_trend.csv"), &csv)?;
    }

    println!("learned/oracle reward ratio: {:?}", learned / best.reward);
    write_manifest(cfg, "report")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Table {
        parse_table(text, Path::new("test.csv")).unwrap()
    }

    #[test]
    fn rpm_identity_accepts_consistent_rows_and_flags_bad_ones() {
        let good = table("step,ctr,ppc,rpm\n1,0.25,2.0,500.0\n2,0.0,0.0,0.0\n");
        check_rpm_identity(&good, Path::new("good.csv")).unwrap();
        let bad = table("step,ctr,ppc,rpm\n1,0.25,2.0,500.1\n");
        assert!(check_rpm_identity(&bad, Path::new("bad.csv")).is_err());
    }

    #[test]
    fn table_parser_rejects_ragged_rows() {
        let res = parse_table("a,b\n1.0,2.0\n3.0\n", Path::new("t.csv"));
        assert!(res.is_err());
    }

    #[test]
    fn variance_matches_hand_computation() {
        let (mean, var) = mean_and_variance(&[1.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert_eq!(var, 1.0);
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::MissingInput(String::new()).exit_code(), 3);
        assert_eq!(CliError::Diverged(String::new()).exit_code(), 4);
        assert_eq!(CliError::Other(String::new()).exit_code(), 1);
    }

    #[test]
    fn actor_artifact_round_trips_through_json() {
        let spec = NetworkSpec::new(3, 4, &[8], Head::Actor);
        let net = Net::new(spec.clone()).unwrap();
        let mut rng = child_rng(5, "artifact", 0);
        let theta = net.init_params(&mut rng);
        let artifact = ActorArtifact {
            spec,
            values: theta.values.clone(),
        };
        let text = serde_json::to_string(&artifact).unwrap();
        let dir = std::env::temp_dir().join("adlab-artifact-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("actor.json");
        fs::write(&path, &text).unwrap();
        let (net2, theta2) = load_actor(&path).unwrap();
        assert_eq!(theta2.values, theta.values);
        assert_eq!(net2.zeros().len(), theta.len());
    }
}
