//! Minimal neural toolkit: a query-ID embedding table feeding small
//! tanh multilayer perceptrons, with three heads — an actor squashed onto
//! the action box, a plain scalar critic, and a dueling critic
//! Q(s,a) = V(s) + A(s,a). Forward passes cache activations; backward
//! passes are hand-written reverse mode, verified against central finite
//! differences.

use std::io::{BufRead, Write as IoWrite};
use std::ops::Range;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{ActionBox, RankingParams, ACTION_DIM};
use crate::market::SearchContext;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("parameter layouts do not match")]
    LayoutMismatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Actor,
    CriticPlain,
    CriticDueling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Rows of the query-ID embedding table.
    pub num_queries: usize,
    pub embedding_dim: usize,
    /// Hidden layer widths; empty means a single linear layer.
    pub hidden_sizes: Vec<usize>,
    pub head: Head,
}

impl NetworkSpec {
    pub fn new(num_queries: usize, embedding_dim: usize, hidden: &[usize], head: Head) -> Self {
        Self {
            num_queries,
            embedding_dim,
            hidden_sizes: hidden.to_vec(),
            head,
        }
    }
}

/// One named index range of a flat parameter vector; weight matrices are
/// row-major `rows × cols`, biases are `rows × 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.segments
            .last()
            .map(|s| s.offset + s.rows * s.cols)
            .unwrap_or(0)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.offset..s.offset + s.rows * s.cols)
    }
}

/// Flat parameter vector tied to a layout. Value type: snapshots travel
/// between workers and the parameter server by copy, never by shared
/// mutation.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        *self.layout == *other.layout && self.values == other.values
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(Arc::clone(&self.layout))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        *self.layout == *other.layout
    }

    /// self += alpha · other
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<(), NetError> {
        if !self.same_layout(other) {
            return Err(NetError::LayoutMismatch);
        }
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += alpha * o;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn fill_zero(&mut self) {
        self.values.fill(0.0);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<(), NetError> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NetError::NonFinite("parameter vector"))
        }
    }

    pub fn seg(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn seg_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.range(name)?;
        Some(&mut self.values[r])
    }
}

#[derive(Debug, Clone)]
struct LayerPlan {
    w: Range<usize>,
    b: Range<usize>,
    rows: usize,
    cols: usize,
    /// Scale the init of this layer down (used for the actor output layer).
    init_scale: f64,
}

#[derive(Debug, Clone)]
struct StackPlan {
    layers: Vec<LayerPlan>,
}

/// A network instance: the spec plus a resolved parameter layout and
/// per-layer index plans, so forward/backward passes never search by name.
#[derive(Debug, Clone)]
pub struct Net {
    pub spec: NetworkSpec,
    layout: Arc<Layout>,
    embed: Range<usize>,
    /// Actor/plain critic use stack 0; dueling uses 0 = V branch,
    /// 1 = A branch.
    stacks: Vec<StackPlan>,
}

fn push_segment(segments: &mut Vec<Segment>, name: String, rows: usize, cols: usize) {
    let offset = segments
        .last()
        .map(|s| s.offset + s.rows * s.cols)
        .unwrap_or(0);
    segments.push(Segment {
        name,
        offset,
        rows,
        cols,
    });
}

fn push_stack(
    segments: &mut Vec<Segment>,
    prefix: &str,
    in_dim: usize,
    hidden: &[usize],
    out_dim: usize,
) {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(in_dim);
    sizes.extend_from_slice(hidden);
    sizes.push(out_dim);
    for i in 0..sizes.len() - 1 {
        push_segment(segments, format!("{prefix}l{i}.w"), sizes[i + 1], sizes[i]);
        push_segment(segments, format!("{prefix}l{i}.b"), sizes[i + 1], 1);
    }
}

pub fn layout_for(spec: &NetworkSpec) -> Layout {
    let mut segments = Vec::new();
    push_segment(
        &mut segments,
        "embed".into(),
        spec.num_queries,
        spec.embedding_dim,
    );
    let e = spec.embedding_dim;
    let h = &spec.hidden_sizes;
    match spec.head {
        Head::Actor => push_stack(&mut segments, "", e, h, ACTION_DIM),
        Head::CriticPlain => push_stack(&mut segments, "", e + ACTION_DIM, h, 1),
        Head::CriticDueling => {
            push_stack(&mut segments, "v.", e, h, 1);
            push_stack(&mut segments, "a.", e + ACTION_DIM, h, 1);
        }
    }
    Layout { segments }
}

impl Net {
    pub fn new(spec: NetworkSpec) -> Result<Net, NetError> {
        if spec.num_queries == 0 {
            return Err(NetError::BadSpec("num_queries must be ≥ 1".into()));
        }
        if spec.embedding_dim == 0 {
            return Err(NetError::BadSpec("embedding_dim must be ≥ 1".into()));
        }
        if spec.hidden_sizes.iter().any(|&s| s == 0) {
            return Err(NetError::BadSpec("hidden sizes must be ≥ 1".into()));
        }
        let layout = Arc::new(layout_for(&spec));
        let embed = layout.range("embed").expect("embed segment");
        let prefixes: &[&str] = match spec.head {
            Head::Actor | Head::CriticPlain => &[""],
            Head::CriticDueling => &["v.", "a."],
        };
        let actor_out_scale = match spec.head {
            Head::Actor => 1e-3,
            _ => 1.0,
        };
        let nlayers = spec.hidden_sizes.len() + 1;
        let stacks = prefixes
            .iter()
            .map(|p| StackPlan {
                layers: (0..nlayers)
                    .map(|i| {
                        let wname = format!("{p}l{i}.w");
                        let seg = layout
                            .segments
                            .iter()
                            .find(|s| s.name == wname)
                            .expect("weight segment");
                        LayerPlan {
                            w: seg.offset..seg.offset + seg.rows * seg.cols,
                            b: layout.range(&format!("{p}l{i}.b")).expect("bias segment"),
                            rows: seg.rows,
                            cols: seg.cols,
                            init_scale: if i == nlayers - 1 { actor_out_scale } else { 1.0 },
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(Net {
            spec,
            layout,
            embed,
            stacks,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(Arc::clone(&self.layout))
    }

    /// Uniform ±1/√fan_in weight init, zero biases, embedding rows
    /// uniform ±1/√dim; the actor's output layer is shrunk by 1e-3 so the
    /// initial policy sits near the box midpoint.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut p = self.zeros();
        let bound = 1.0 / (self.spec.embedding_dim as f64).sqrt();
        for v in &mut p.values[self.embed.clone()] {
            *v = rng.gen_range(-bound..=bound);
        }
        for stack in &self.stacks {
            for layer in &stack.layers {
                let bound = layer.init_scale / (layer.cols as f64).sqrt();
                for v in &mut p.values[layer.w.clone()] {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
        }
        p
    }

    fn embed_row(&self, params: &ParamVector, query_id: usize) -> Vec<f64> {
        assert!(
            query_id < self.spec.num_queries,
            "query_id {query_id} out of range"
        );
        let e = self.spec.embedding_dim;
        let start = self.embed.start + query_id * e;
        params.values[start..start + e].to_vec()
    }

    fn stack_forward(&self, stack: usize, params: &ParamVector, input: Vec<f64>) -> MlpCache {
        let plan = &self.stacks[stack];
        let n = plan.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(input);
        for (i, layer) in plan.layers.iter().enumerate() {
            let w = &params.values[layer.w.clone()];
            let b = &params.values[layer.b.clone()];
            let x = acts.last().unwrap();
            let mut z = vec![0.0; layer.rows];
            for r in 0..layer.rows {
                let row = &w[r * layer.cols..(r + 1) * layer.cols];
                let mut acc = b[r];
                for (wc, xc) in row.iter().zip(x.iter()) {
                    acc += wc * xc;
                }
                z[r] = if i + 1 < n { acc.tanh() } else { acc };
            }
            acts.push(z);
        }
        MlpCache { acts }
    }

    /// Reverse pass through one stack. `dout` is dL/d(output). Parameter
    /// gradients accumulate into `grad` when given; the return value is
    /// dL/d(input).
    fn stack_backward(
        &self,
        stack: usize,
        params: &ParamVector,
        cache: &MlpCache,
        dout: Vec<f64>,
        mut grad: Option<&mut ParamVector>,
    ) -> Vec<f64> {
        let plan = &self.stacks[stack];
        let n = plan.layers.len();
        debug_assert_eq!(cache.acts.len(), n + 1);
        let mut d = dout;
        for i in (0..n).rev() {
            let layer = &plan.layers[i];
            let x = &cache.acts[i];
            let a = &cache.acts[i + 1];
            // Hidden layers applied tanh; the final layer is linear.
            let dz: Vec<f64> = if i + 1 < n {
                d.iter().zip(a).map(|(dd, av)| dd * (1.0 - av * av)).collect()
            } else {
                d
            };
            if let Some(g) = grad.as_deref_mut() {
                let gw = &mut g.values[layer.w.clone()];
                for r in 0..layer.rows {
                    let grow = &mut gw[r * layer.cols..(r + 1) * layer.cols];
                    for (gc, xc) in grow.iter_mut().zip(x.iter()) {
                        *gc += dz[r] * xc;
                    }
                }
                let gb = &mut g.values[layer.b.clone()];
                for (gbr, dzr) in gb.iter_mut().zip(dz.iter()) {
                    *gbr += dzr;
                }
            }
            let w = &params.values[layer.w.clone()];
            let mut dx = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let row = &w[r * layer.cols..(r + 1) * layer.cols];
                for (dxc, wc) in dx.iter_mut().zip(row.iter()) {
                    *dxc += wc * dz[r];
                }
            }
            d = dx;
        }
        d
    }

    fn add_embed_grad(&self, grad: &mut ParamVector, query_id: usize, d_emb: &[f64]) {
        let e = self.spec.embedding_dim;
        let start = self.embed.start + query_id * e;
        for (g, d) in grad.values[start..start + e].iter_mut().zip(d_emb) {
            *g += d;
        }
    }

    /// Policy forward pass: embed the query, run the stack, squash each
    /// output dimension onto the action box by an affine map of tanh.
    pub fn actor_forward(
        &self,
        params: &ParamVector,
        box_: &ActionBox,
        ctx: &SearchContext,
    ) -> Result<(RankingParams, ActorCache), NetError> {
        assert!(matches!(self.spec.head, Head::Actor), "not an actor net");
        let mlp = self.stack_forward(0, params, self.embed_row(params, ctx.query_id));
        let z = mlp.acts.last().unwrap();
        let mut tanh_z = [0.0; ACTION_DIM];
        let mut a = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            tanh_z[i] = z[i].tanh();
            let mid = 0.5 * (box_.lo[i] + box_.hi[i]);
            let half = 0.5 * (box_.hi[i] - box_.lo[i]);
            a[i] = mid + half * tanh_z[i];
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("actor output"));
        }
        Ok((
            RankingParams::from_array(a),
            ActorCache {
                query_id: ctx.query_id,
                mlp,
                tanh_z,
            },
        ))
    }

    /// Accumulates dL/dθπ into `grad` given dL/d(action).
    pub fn actor_backward(
        &self,
        params: &ParamVector,
        cache: &ActorCache,
        dl_da: &[f64; ACTION_DIM],
        box_: &ActionBox,
        grad: &mut ParamVector,
    ) {
        let mut dz = vec![0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let half = 0.5 * (box_.hi[i] - box_.lo[i]);
            dz[i] = dl_da[i] * half * (1.0 - cache.tanh_z[i] * cache.tanh_z[i]);
        }
        let d_emb = self.stack_backward(0, params, &cache.mlp, dz, Some(grad));
        self.add_embed_grad(grad, cache.query_id, &d_emb);
    }

    /// Q(s, a). Plain head: one stack on [embedding ‖ action]. Dueling
    /// head: Q = V(s) + A(s, a).
    pub fn critic_forward(
        &self,
        params: &ParamVector,
        ctx: &SearchContext,
        action: &RankingParams,
    ) -> Result<(f64, CriticCache), NetError> {
        let emb = self.embed_row(params, ctx.query_id);
        let with_action = |emb: &[f64]| {
            let mut x = Vec::with_capacity(emb.len() + ACTION_DIM);
            x.extend_from_slice(emb);
            x.extend_from_slice(&action.as_array());
            x
        };
        let (q, cache) = match self.spec.head {
            Head::CriticPlain => {
                let mlp = self.stack_forward(0, params, with_action(&emb));
                let q = mlp.acts.last().unwrap()[0];
                (
                    q,
                    CriticCache::Plain {
                        query_id: ctx.query_id,
                        mlp,
                    },
                )
            }
            Head::CriticDueling => {
                let v = self.stack_forward(0, params, emb.clone());
                let a = self.stack_forward(1, params, with_action(&emb));
                let q = v.acts.last().unwrap()[0] + a.acts.last().unwrap()[0];
                (
                    q,
                    CriticCache::Dueling {
                        query_id: ctx.query_id,
                        v,
                        a,
                    },
                )
            }
            Head::Actor => panic!("not a critic net"),
        };
        if !q.is_finite() {
            return Err(NetError::NonFinite("critic output"));
        }
        Ok((q, cache))
    }

    /// Reverse pass from a scalar upstream dL/dQ. Parameter gradients
    /// accumulate into `grad` when given (pass `None` to get only the
    /// action gradient, e.g. for the policy update); returns dL/d(action).
    pub fn critic_backward(
        &self,
        params: &ParamVector,
        cache: &CriticCache,
        upstream: f64,
        mut grad: Option<&mut ParamVector>,
    ) -> [f64; ACTION_DIM] {
        let e = self.spec.embedding_dim;
        let mut da = [0.0; ACTION_DIM];
        match cache {
            CriticCache::Plain { query_id, mlp } => {
                let dinput =
                    self.stack_backward(0, params, mlp, vec![upstream], grad.as_deref_mut());
                if let Some(g) = grad {
                    self.add_embed_grad(g, *query_id, &dinput_embed(&dinput, e));
                }
                da.copy_from_slice(&dinput[e..e + ACTION_DIM]);
            }
            CriticCache::Dueling { query_id, v, a } => {
                let dv = self.stack_backward(0, params, v, vec![upstream], grad.as_deref_mut());
                let da_in =
                    self.stack_backward(1, params, a, vec![upstream], grad.as_deref_mut());
                if let Some(g) = grad {
                    let mut d_emb = dinput_embed(&dv, e);
                    for (x, y) in d_emb.iter_mut().zip(&da_in[..e]) {
                        *x += y;
                    }
                    self.add_embed_grad(g, *query_id, &d_emb);
                }
                da.copy_from_slice(&da_in[e..e + ACTION_DIM]);
            }
        }
        da
    }
}

fn dinput_embed(dinput: &[f64], e: usize) -> Vec<f64> {
    dinput[..e].to_vec()
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// acts[0] is the stack input; acts[i+1] the output of layer i
    /// (tanh applied on hidden layers, linear on the last).
    acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ActorCache {
    query_id: usize,
    mlp: MlpCache,
    tanh_z: [f64; ACTION_DIM],
}

#[derive(Debug, Clone)]
pub enum CriticCache {
    Plain { query_id: usize, mlp: MlpCache },
    Dueling { query_id: usize, v: MlpCache, a: MlpCache },
}

/// Polyak target tracking: target ← (1−τ)·target + τ·online.
pub fn soft_update(target: &mut ParamVector, online: &ParamVector, tau: f64) -> Result<(), NetError> {
    if !target.same_layout(online) {
        return Err(NetError::LayoutMismatch);
    }
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1]");
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        *t = (1.0 - tau) * *t + tau * *o;
    }
    Ok(())
}

// ---- checkpoint io ----

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    count: usize,
}

/// Writes a single-line JSON header followed by the raw little-endian
/// f64 parameter values.
pub fn save_checkpoint(
    w: &mut impl IoWrite,
    spec: &NetworkSpec,
    params: &ParamVector,
) -> Result<(), NetError> {
    let header = CheckpointHeader {
        spec: spec.clone(),
        count: params.len(),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| NetError::BadCheckpoint(e.to_string()))?;
    w.write_all(json.as_bytes())?;
    w.write_all(b"\n")?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(r: &mut impl BufRead) -> Result<(NetworkSpec, ParamVector), NetError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| NetError::BadCheckpoint(format!("header: {e}")))?;
    let layout = Arc::new(layout_for(&header.spec));
    if layout.total() != header.count {
        return Err(NetError::BadCheckpoint(format!(
            "count {} does not match spec layout {}",
            header.count,
            layout.total()
        )));
    }
    let mut values = vec![0.0; header.count];
    let mut buf = [0u8; 8];
    for v in &mut values {
        r.read_exact(&mut buf)
            .map_err(|_| NetError::BadCheckpoint("truncated parameter data".into()))?;
        *v = f64::from_le_bytes(buf);
    }
    let params = ParamVector { layout, values };
    params.check_finite()?;
    Ok((header.spec, params))
}

// ---- gradient verification ----

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_segment: Vec<(String, f64)>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - n).abs() / denom.max(1e-6)
    }
}

/// Compares the analytic gradient of a scalar probe loss (summed over every
/// query id so all embedding rows participate) against central finite
/// differences, per parameter, reporting the worst relative error per
/// segment.
pub fn grad_check(spec: &NetworkSpec, seed: u64, h: f64) -> Result<GradCheckReport, NetError> {
    let net = Net::new(spec.clone())?;
    let mut rng = crate::rng::child_rng(seed, "grad-check", 0);
    let params = net.init_params(&mut rng);
    let box_ = ActionBox::default();

    // Fixed probe coefficients and actions.
    let probes: Vec<(SearchContext, RankingParams, [f64; ACTION_DIM])> = (0..spec.num_queries)
        .map(|q| {
            let ctx = SearchContext {
                query_id: q,
                session_pos: 0,
            };
            let action = box_.sample_uniform(&mut rng);
            let mut c = [0.0; ACTION_DIM];
            for v in &mut c {
                *v = rng.gen_range(-1.0..=1.0);
            }
            (ctx, action, c)
        })
        .collect();

    let loss = |p: &ParamVector| -> f64 {
        probes
            .iter()
            .map(|(ctx, action, c)| match spec.head {
                Head::Actor => {
                    let (a, _) = net.actor_forward(p, &box_, ctx).expect("finite");
                    a.as_array().iter().zip(c).map(|(ai, ci)| ai * ci).sum::<f64>()
                }
                _ => net.critic_forward(p, ctx, action).expect("finite").0,
            })
            .sum()
    };

    let mut analytic = net.zeros();
    for (ctx, action, c) in &probes {
        match spec.head {
            Head::Actor => {
                let (_, cache) = net.actor_forward(&params, &box_, ctx)?;
                net.actor_backward(&params, &cache, c, &box_, &mut analytic);
            }
            _ => {
                let (_, cache) = net.critic_forward(&params, ctx, action)?;
                net.critic_backward(&params, &cache, 1.0, Some(&mut analytic));
            }
        }
    }

    let mut per_segment = Vec::new();
    let mut max_rel = 0.0f64;
    let mut probe_params = params.clone();
    for seg in &params.layout.segments {
        let mut seg_max = 0.0f64;
        for idx in seg.offset..seg.offset + seg.rows * seg.cols {
            let orig = probe_params.values[idx];
            probe_params.values[idx] = orig + h;
            let up = loss(&probe_params);
            probe_params.values[idx] = orig - h;
            let down = loss(&probe_params);
            probe_params.values[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            seg_max = seg_max.max(rel_err(analytic.values[idx], numeric));
        }
        per_segment.push((seg.name.clone(), seg_max));
        max_rel = max_rel.max(seg_max);
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_segment,
    })
}
