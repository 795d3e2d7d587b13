//! The recurrent recommender: parameters, temporal states and one day of
//! the recurrence (evolve → fuse → predict → instant update).
//!
//! All computation runs on a [`Tape`] so that training and evaluation share
//! one forward path; evaluation simply never calls `backward`.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, BiAdjacency, EdgeStore, ViewCursor, ALPHA0};
use crate::params::{ParamId, ParameterSet};
use crate::series::GainAxis;
use crate::sparse::SparseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Latent dimension.
    pub d: usize,
    /// Context window length in days.
    pub s_days: u32,
    /// Series truncation order of the evolution operator.
    pub k: usize,
    pub disable_ctx: bool,
    pub disable_his: bool,
    pub disable_fusion: bool,
    /// Apply the self-map to every row at each update, not just to the rows
    /// touched by the day's interactions.
    pub literal_update: bool,
    pub gain_axis: GainAxis,
    pub fusion_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            s_days: 5,
            k: 6,
            disable_ctx: false,
            disable_his: false,
            disable_fusion: false,
            literal_update: false,
            gain_axis: GainAxis::Columns,
            fusion_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("model.d must be at least 1".into()));
        }
        if self.s_days == 0 {
            return Err(Error::Config("model.s_days must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if self.disable_ctx && self.disable_his {
            return Err(Error::Config(
                "model.disable_ctx and model.disable_his cannot both be set".into(),
            ));
        }
        Ok(())
    }

    pub fn enabled(&self, s: Scenario) -> bool {
        match s {
            Scenario::His => !self.disable_his,
            Scenario::Ctx => !self.disable_ctx,
        }
    }

    /// Ablation variant this configuration corresponds to, if any.
    pub fn variant(&self) -> Variant {
        if self.disable_ctx {
            Variant::WoCtx
        } else if self.disable_his {
            Variant::WoHis
        } else if self.disable_fusion {
            Variant::WoFusion
        } else {
            Variant::Full
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.disable_ctx = v == Variant::WoCtx;
        self.disable_his = v == Variant::WoHis;
        self.disable_fusion = v == Variant::WoFusion;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    WoCtx,
    WoHis,
    WoFusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WoCtx, Variant::WoHis, Variant::WoFusion];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "wo_ctx" => Ok(Variant::WoCtx),
            "wo_his" => Ok(Variant::WoHis),
            "wo_fusion" => Ok(Variant::WoFusion),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, wo_ctx, wo_his or wo_fusion)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoCtx => "wo_ctx",
            Variant::WoHis => "wo_his",
            Variant::WoFusion => "wo_fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two temporal scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    His,
    Ctx,
}

impl Scenario {
    pub const BOTH: [Scenario; 2] = [Scenario::His, Scenario::Ctx];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::His => "his",
            Scenario::Ctx => "ctx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// Fusion tasks; the last one produces the final representation.
const TASKS: [&str; 3] = ["his", "ctx", "final"];

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct FusionIds {
    experts: [Option<LinearIds>; 3],
    gates: [Option<LinearIds>; 3],
    shared: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct UpdateIds {
    i2u: ParamId,
    u2u: ParamId,
    u2i: ParamId,
    i2i: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    embedding: ParamId,
    alpha: [Option<ParamId>; 2],
    update: [Option<UpdateIds>; 2],
    fusion: [Option<FusionIds>; 2],
    predict: [LinearIds; 2],
}

fn scenario_index(s: Scenario) -> usize {
    match s {
        Scenario::His => 0,
        Scenario::Ctx => 1,
    }
}

fn side_index(s: Side) -> usize {
    match s {
        Side::User => 0,
        Side::Item => 1,
    }
}

/// Position of a recurrence in time. `At(day)` means the states have been
/// evolved to the start of `day` (predictions happen here); `Post(day)`
/// means `day`'s interactions have been absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Origin,
    At(u32),
    Post(u32),
}

/// Value-level snapshot of the temporal states of all nodes (users first).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalStates {
    pub his: Rc<Tensor>,
    pub ctx: Rc<Tensor>,
    pub clock: Clock,
}

impl TemporalStates {
    pub fn max_abs(&self) -> f64 {
        self.his.max_abs().max(self.ctx.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.his.all_finite() && self.ctx.all_finite()
    }
}

/// Temporal states recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveStates {
    pub his: Var,
    pub ctx: Var,
    pub clock: Clock,
}

/// Parameters registered on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ParameterSet) -> Self {
        Bound {
            vars: params.ids().map(|id| tape.param(params, id)).collect(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Normalized adjacencies in force while evolving towards a day.
#[derive(Debug, Clone)]
pub struct DayGraphs {
    pub day: u32,
    pub history: Option<Rc<SparseMatrix>>,
    pub context: Option<Rc<SparseMatrix>>,
}

/// Outputs of [`Cpmr::advance`].
#[derive(Debug, Clone, Copy)]
pub struct Advanced {
    /// Evolved states before fusion (`None` for a disabled scenario).
    pub his_minus: Option<Var>,
    pub ctx_minus: Option<Var>,
    /// Final representation of every node, used for prediction.
    pub z: Var,
}

/// Fusion outputs for one side.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub his: Option<Var>,
    pub ctx: Option<Var>,
    pub z: Var,
}

/// A model shape bound to a dataset's user and item counts.
#[derive(Debug, Clone)]
pub struct Cpmr {
    config: ModelConfig,
    n_users: usize,
    n_items: usize,
}

impl Cpmr {
    pub fn new(config: ModelConfig, n_users: usize, n_items: usize) -> Result<Self> {
        config.validate()?;
        if n_users == 0 || n_items == 0 {
            return Err(Error::Config("model needs at least one user and one item".into()));
        }
        Ok(Cpmr {
            config,
            n_users,
            n_items,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    fn fusion_width(&self) -> usize {
        if self.config.disable_ctx || self.config.disable_his {
            self.config.d
        } else {
            2 * self.config.d
        }
    }

    /// `(name, rows, cols, init)` for every parameter, in a fixed order.
    fn layout(&self) -> Vec<(String, usize, usize, Init)> {
        let d = self.config.d;
        let mut out = vec![("embedding".to_string(), self.n_nodes(), d, Init::Uniform)];
        for s in Scenario::BOTH {
            if self.config.enabled(s) {
                out.push((format!("alpha.{}", s.as_str()), self.n_nodes(), 1, Init::Zero));
            }
        }
        let linear = |out: &mut Vec<_>, name: String, o: usize, i: usize, bias: bool| {
            out.push((format!("{name}.w"), o, i, Init::Uniform));
            if bias {
                out.push((format!("{name}.b"), 1, o, Init::Zero));
            }
        };
        if !self.config.disable_fusion {
            let w = self.fusion_width();
            let bias = self.config.fusion_bias;
            for side in [Side::User, Side::Item] {
                let p = format!("fusion.{}", side.as_str());
                for (t, task) in TASKS.iter().enumerate() {
                    if self.task_enabled(t) {
                        linear(&mut out, format!("{p}.expert.{task}"), d, w, bias);
                        linear(&mut out, format!("{p}.gate.{task}"), 2, w, bias);
                    }
                }
                linear(&mut out, format!("{p}.expert.shared"), d, w, bias);
            }
        }
        for s in Scenario::BOTH {
            if self.config.enabled(s) {
                for m in ["i2u", "u2u", "u2i", "i2i"] {
                    out.push((format!("update.{}.{m}", s.as_str()), d, d, Init::Uniform));
                }
            }
        }
        for side in [Side::User, Side::Item] {
            linear(&mut out, format!("predict.{}", side.as_str()), d, 2 * d, true);
        }
        out
    }

    fn task_enabled(&self, t: usize) -> bool {
        match t {
            0 => !self.config.disable_his,
            1 => !self.config.disable_ctx,
            _ => true,
        }
    }

    /// Fresh parameters: embeddings and weight matrices uniform in
    /// `±1/√d`, spectral radii and biases zero.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.config.d as f64).sqrt();
        let mut params = ParameterSet::new();
        for (name, r, c, init) in self.layout() {
            let t = match init {
                Init::Zero => Tensor::zeros(r, c),
                Init::Uniform => Tensor::from_fn(r, c, |_, _| rng.random_range(-bound..bound)),
            };
            params.insert(&name, t).expect("layout names are unique");
        }
        params
    }

    /// Checks that `params` has exactly this model's layout.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::Dimension(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                layout.len()
            )));
        }
        for (name, r, c, _) in layout {
            match params.by_name(&name) {
                None => return Err(Error::Dimension(format!("checkpoint lacks parameter `{name}`"))),
                Some(t) if t.shape() != (r, c) => {
                    return Err(Error::Dimension(format!(
                        "parameter `{name}` is {:?}, model expects {:?}",
                        t.shape(),
                        (r, c)
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn ids(&self, params: &ParameterSet) -> Ids {
        let id = |name: String| {
            params
                .id(&name)
                .unwrap_or_else(|| panic!("parameter `{name}` missing; call check_params first"))
        };
        let lin = |name: String, bias: bool| LinearIds {
            w: id(format!("{name}.w")),
            b: bias.then(|| id(format!("{name}.b"))),
        };
        let mut alpha = [None; 2];
        let mut update = [None; 2];
        for s in Scenario::BOTH {
            if self.config.enabled(s) {
                let k = scenario_index(s);
                alpha[k] = Some(id(format!("alpha.{}", s.as_str())));
                let u = |m: &str| id(format!("update.{}.{m}", s.as_str()));
                update[k] = Some(UpdateIds {
                    i2u: u("i2u"),
                    u2u: u("u2u"),
                    u2i: u("u2i"),
                    i2i: u("i2i"),
                });
            }
        }
        let mut fusion = [None; 2];
        if !self.config.disable_fusion {
            let bias = self.config.fusion_bias;
            for side in [Side::User, Side::Item] {
                let p = format!("fusion.{}", side.as_str());
                let mut experts = [None; 3];
                let mut gates = [None; 3];
                for (t, task) in TASKS.iter().enumerate() {
                    if self.task_enabled(t) {
                        experts[t] = Some(lin(format!("{p}.expert.{task}"), bias));
                        gates[t] = Some(lin(format!("{p}.gate.{task}"), bias));
                    }
                }
                fusion[side_index(side)] = Some(FusionIds {
                    experts,
                    gates,
                    shared: lin(format!("{p}.expert.shared"), bias),
                });
            }
        }
        Ids {
            embedding: id("embedding".into()),
            alpha,
            update,
            fusion,
            predict: [lin("predict.user".into(), true), lin("predict.item".into(), true)],
        }
    }

    /// Both states start as value copies of the static embeddings.
    pub fn init_states(&self, params: &ParameterSet) -> TemporalStates {
        let e = params.by_name("embedding").expect("embedding parameter");
        TemporalStates {
            his: Rc::new(e.clone()),
            ctx: Rc::new(e.clone()),
            clock: Clock::Origin,
        }
    }

    /// Re-enters value states on `tape` as constants (a truncation boundary).
    pub fn enter(&self, tape: &mut Tape, states: &TemporalStates) -> LiveStates {
        LiveStates {
            his: tape.constant_shared(Rc::clone(&states.his)),
            ctx: tape.constant_shared(Rc::clone(&states.ctx)),
            clock: states.clock,
        }
    }

    /// Enters states at the start of a training segment. At the origin the
    /// states *are* the static embeddings, so they are bound to the
    /// embedding parameter and the loss reaches it through the recurrence;
    /// anywhere else they enter as constants.
    pub fn enter_segment(&self, tape: &mut Tape, params: &ParameterSet, b: &Bound, states: &TemporalStates) -> LiveStates {
        match states.clock {
            Clock::Origin => {
                let e = b.var(self.ids(params).embedding);
                LiveStates {
                    his: e,
                    ctx: e,
                    clock: Clock::Origin,
                }
            }
            _ => self.enter(tape, states),
        }
    }

    pub fn exit(&self, tape: &Tape, live: &LiveStates) -> TemporalStates {
        TemporalStates {
            his: tape.shared_value(live.his),
            ctx: tape.shared_value(live.ctx),
            clock: live.clock,
        }
    }

    fn linear(tape: &mut Tape, b: &Bound, x: Var, l: LinearIds) -> Result<Var> {
        tape.linear(x, b.var(l.w), l.b.map(|id| b.var(id)))
    }

    /// Closed-form evolution of one scenario's state over `dt` on the
    /// normalized adjacency scaled by `sigmoid(α)`.
    pub fn evolve(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        scenario: Scenario,
        x: Var,
        adj: Rc<SparseMatrix>,
        dt: f64,
    ) -> Result<Var> {
        let ids = self.ids(params);
        let alpha = ids.alpha[scenario_index(scenario)]
            .ok_or_else(|| Error::Config(format!("scenario {} is disabled", scenario.as_str())))?;
        let gain = tape.sigmoid(b.var(alpha));
        tape.evolve(
            x,
            b.var(ids.embedding),
            gain,
            adj,
            self.config.gain_axis,
            dt,
            self.config.k,
            ALPHA0,
        )
    }

    /// Gated multi-expert fusion for one side. Inputs are that side's rows
    /// of the evolved states; a disabled scenario is passed as `None`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        side: Side,
        his: Option<Var>,
        ctx: Option<Var>,
    ) -> Result<Fused> {
        let ids = self.ids(params);
        let Some(f) = ids.fusion[side_index(side)] else {
            let z = match (his, ctx) {
                (Some(h), Some(c)) => tape.add(h, c)?,
                (Some(x), None) | (None, Some(x)) => x,
                (None, None) => return Err(Error::Config("fusion needs at least one scenario".into())),
            };
            return Ok(Fused {
                his: his.map(|_| z),
                ctx: ctx.map(|_| z),
                z,
            });
        };
        let x_in = match (his, ctx) {
            (Some(h), Some(c)) => tape.concat_cols(h, c)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => return Err(Error::Config("fusion needs at least one scenario".into())),
        };
        let shared = Self::linear(tape, b, x_in, f.shared)?;
        let mut outs = [None; 3];
        for t in 0..3 {
            let (Some(e), Some(g)) = (f.experts[t], f.gates[t]) else {
                continue;
            };
            let expert = Self::linear(tape, b, x_in, e)?;
            let logits = Self::linear(tape, b, x_in, g)?;
            let w = tape.softmax_rows(logits);
            let w0 = tape.column(w, 0)?;
            let w1 = tape.column(w, 1)?;
            let a = tape.scale_rows(expert, w0)?;
            let s = tape.scale_rows(shared, w1)?;
            outs[t] = Some(tape.add(a, s)?);
        }
        Ok(Fused {
            his: his.and(outs[0]),
            ctx: ctx.and(outs[1]),
            z: outs[2].expect("final task always present"),
        })
    }

    /// Discrete jump of one scenario's states driven by the instant graph.
    pub fn update_instant(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        scenario: Scenario,
        x: Var,
        instant: &BiAdjacency,
    ) -> Result<Var> {
        let u = self.ids(params).update[scenario_index(scenario)]
            .ok_or_else(|| Error::Config(format!("scenario {} is disabled", scenario.as_str())))?;
        let nu = self.n_users;
        let n = self.n_nodes();
        if self.config.literal_update {
            let mean = Rc::new(crate::graph::instant_mean_operator(instant));
            let g = tape.spmm(mean, x)?;
            let xu = tape.slice_rows(x, 0, nu)?;
            let xi = tape.slice_rows(x, nu, n)?;
            let gu = tape.slice_rows(g, 0, nu)?;
            let gi = tape.slice_rows(g, nu, n)?;
            let du = instant.user_degrees();
            let di = instant.item_degrees();
            let base_u = tape.linear(xu, b.var(u.u2u), None)?;
            let delta_u = tape.linear(gu, b.var(u.i2u), None)?;
            let delta_u = tape.relu(delta_u);
            let new_u = tape.masked_add(base_u, Rc::new(du.iter().map(|&d| d > 0).collect()), delta_u)?;
            let base_i = tape.linear(xi, b.var(u.i2i), None)?;
            let delta_i = tape.linear(gi, b.var(u.u2i), None)?;
            let delta_i = tape.relu(delta_i);
            let new_i = tape.masked_add(base_i, Rc::new(di.iter().map(|&d| d > 0).collect()), delta_i)?;
            return tape.concat_rows(new_u, new_i);
        }
        if instant.is_empty() {
            return Ok(x);
        }
        let (users, items, mu, mi) = involved_operators(instant);
        let ug: Rc<Vec<usize>> = Rc::new(users.iter().map(|&u| u as usize).collect());
        let ig: Rc<Vec<usize>> = Rc::new(items.iter().map(|&i| nu + i as usize).collect());

        let xu = tape.row_select(x, Rc::clone(&ug))?;
        let gu = tape.spmm(Rc::new(mu), x)?;
        let self_u = tape.linear(xu, b.var(u.u2u), None)?;
        let delta_u = tape.linear(gu, b.var(u.i2u), None)?;
        let delta_u = tape.relu(delta_u);
        let new_u = tape.add(self_u, delta_u)?;

        let xi = tape.row_select(x, Rc::clone(&ig))?;
        let gi = tape.spmm(Rc::new(mi), x)?;
        let self_i = tape.linear(xi, b.var(u.i2i), None)?;
        let delta_i = tape.linear(gi, b.var(u.u2i), None)?;
        let delta_i = tape.relu(delta_i);
        let new_i = tape.add(self_i, delta_i)?;

        let x1 = tape.scatter_rows(x, ug, new_u)?;
        tape.scatter_rows(x1, ig, new_i)
    }

    /// Evolves both scenarios to `graphs.day` and fuses them. The clock must
    /// be at the origin or after an earlier day; it moves to `At(day)`.
    pub fn advance(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        live: &mut LiveStates,
        graphs: &DayGraphs,
        day_unit: f64,
    ) -> Result<Advanced> {
        let day = graphs.day;
        let dt = match live.clock {
            Clock::Origin => day as f64 * day_unit,
            Clock::Post(prev) if prev < day => (day - prev) as f64 * day_unit,
            other => {
                return Err(Error::Sequencing(format!(
                    "cannot advance to day {day} from clock {other:?}"
                )))
            }
        };
        let mut minus = [None; 2];
        for s in Scenario::BOTH {
            if !self.config.enabled(s) {
                continue;
            }
            let (x, adj) = match s {
                Scenario::His => (live.his, graphs.history.as_ref()),
                Scenario::Ctx => (live.ctx, graphs.context.as_ref()),
            };
            let adj = adj.ok_or_else(|| {
                Error::Sequencing(format!("no {} adjacency supplied for day {day}", s.as_str()))
            })?;
            minus[scenario_index(s)] = Some(self.evolve(tape, params, b, s, x, Rc::clone(adj), dt)?);
        }
        let nu = self.n_users;
        let n = self.n_nodes();
        let mut parts: Vec<Fused> = Vec::with_capacity(2);
        for (side, lo, hi) in [(Side::User, 0, nu), (Side::Item, nu, n)] {
            let h = minus[0].map(|v| tape.slice_rows(v, lo, hi)).transpose()?;
            let c = minus[1].map(|v| tape.slice_rows(v, lo, hi)).transpose()?;
            parts.push(self.fuse(tape, params, b, side, h, c)?);
        }
        let join = |tape: &mut Tape, a: Option<Var>, b: Option<Var>| -> Result<Option<Var>> {
            match (a, b) {
                (Some(a), Some(b)) => Ok(Some(tape.concat_rows(a, b)?)),
                _ => Ok(None),
            }
        };
        if let Some(h) = join(tape, parts[0].his, parts[1].his)? {
            live.his = h;
        }
        if let Some(c) = join(tape, parts[0].ctx, parts[1].ctx)? {
            live.ctx = c;
        }
        let z = tape.concat_rows(parts[0].z, parts[1].z)?;
        live.clock = Clock::At(day);
        Ok(Advanced {
            his_minus: minus[0],
            ctx_minus: minus[1],
            z,
        })
    }

    /// Absorbs the day's interactions into both scenarios; clock `At(day)`
    /// moves to `Post(day)`.
    pub fn apply_instant(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        live: &mut LiveStates,
        instant: &BiAdjacency,
    ) -> Result<()> {
        let Clock::At(day) = live.clock else {
            return Err(Error::Sequencing(format!(
                "instant update requires an evolved clock, found {:?}",
                live.clock
            )));
        };
        if self.config.enabled(Scenario::His) {
            live.his = self.update_instant(tape, params, b, Scenario::His, live.his, instant)?;
        }
        if self.config.enabled(Scenario::Ctx) {
            live.ctx = self.update_instant(tape, params, b, Scenario::Ctx, live.ctx, instant)?;
        }
        live.clock = Clock::Post(day);
        Ok(())
    }

    /// Prediction-layer projections `FC(E ‖ Z)` for the given entity-local
    /// indices on one side.
    pub fn project(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        z: Var,
        side: Side,
        index: &[usize],
    ) -> Result<Var> {
        let ids = self.ids(params);
        let offset = match side {
            Side::User => 0,
            Side::Item => self.n_users,
        };
        let global: Rc<Vec<usize>> = Rc::new(index.iter().map(|&k| k + offset).collect());
        let e = tape.row_select(b.var(ids.embedding), Rc::clone(&global))?;
        let zr = tape.row_select(z, global)?;
        let cat = tape.concat_cols(e, zr)?;
        Self::linear(tape, b, cat, ids.predict[side_index(side)])
    }

    /// `λ = FC_U(E_u ‖ Z_u) · FC_I(E_i ‖ Z_i)` for each `(users[k], items[k])`,
    /// as an m×1 column.
    pub fn score_pairs(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        b: &Bound,
        z: Var,
        users: &[usize],
        items: &[usize],
    ) -> Result<Var> {
        let hu = self.project(tape, params, b, z, Side::User, users)?;
        let hi = self.project(tape, params, b, z, Side::Item, items)?;
        tape.row_dot(hu, hi)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    Uniform,
}

/// Involved users and items of an instant graph (ascending) with the
/// compact row-normalized operators that average each one's neighbours.
fn involved_operators(instant: &BiAdjacency) -> (Vec<u32>, Vec<u32>, SparseMatrix, SparseMatrix) {
    let nu = instant.n_users();
    let n = instant.n_nodes();
    let mut by_user: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut by_item: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(u, i) in instant.edges() {
        by_user.entry(u).or_default().push(i);
        by_item.entry(i).or_default().push(u);
    }
    let mut tu = Vec::new();
    for (r, items) in by_user.values().enumerate() {
        let w = 1.0 / items.len() as f64;
        tu.extend(items.iter().map(|&i| (r as u32, (nu + i as usize) as u32, w)));
    }
    let mut ti = Vec::new();
    for (r, users) in by_item.values().enumerate() {
        let w = 1.0 / users.len() as f64;
        ti.extend(users.iter().map(|&u| (r as u32, u, w)));
    }
    let mu = SparseMatrix::from_triplets(by_user.len(), n, tu);
    let mi = SparseMatrix::from_triplets(by_item.len(), n, ti);
    (
        by_user.into_keys().collect(),
        by_item.into_keys().collect(),
        mu,
        mi,
    )
}

/// Walks the interaction days of an [`EdgeStore`] in order, yielding the
/// adjacencies each day's evolution needs.
pub struct Timeline<'a> {
    store: &'a EdgeStore,
    cursor: ViewCursor<'a>,
    need_history: bool,
    need_context: bool,
}

impl<'a> Timeline<'a> {
    pub fn new(store: &'a EdgeStore, config: &ModelConfig) -> Self {
        Timeline {
            store,
            cursor: store.cursor(config.s_days),
            need_history: config.enabled(Scenario::His),
            need_context: config.enabled(Scenario::Ctx),
        }
    }

    pub fn store(&self) -> &'a EdgeStore {
        self.store
    }

    /// Moves to `day` (never backwards) and builds its adjacencies: history
    /// strictly before `day`, context within `[day − s, day)`.
    pub fn graphs_for(&mut self, day: u32) -> Result<DayGraphs> {
        self.cursor.advance_to(day)?;
        let history = self
            .need_history
            .then(|| Rc::new(normalize_adjacency(&self.cursor.history()).matrix));
        let context = self
            .need_context
            .then(|| Rc::new(normalize_adjacency(&self.cursor.context()).matrix));
        Ok(DayGraphs { day, history, context })
    }

    /// The day's interactions (available only after [`Self::graphs_for`]).
    pub fn instant(&self) -> &'a [Interaction] {
        self.cursor.instant()
    }

    pub fn instant_biadjacency(&self) -> BiAdjacency {
        BiAdjacency::from_pairs(
            self.store.n_users(),
            self.store.n_items(),
            self.instant().iter().map(|x| (x.user, x.item)),
        )
    }
}

/// Runs the recurrence over `days` with frozen parameters, starting from
/// `states`, and returns the states after the last day.
pub fn replay(
    model: &Cpmr,
    params: &ParameterSet,
    timeline: &mut Timeline<'_>,
    days: &[u32],
    day_unit: f64,
    mut states: TemporalStates,
) -> Result<TemporalStates> {
    for &day in days {
        let graphs = timeline.graphs_for(day)?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params);
        let mut live = model.enter(&mut tape, &states);
        model.advance(&mut tape, params, &b, &mut live, &graphs, day_unit)?;
        let instant = timeline.instant_biadjacency();
        model.apply_instant(&mut tape, params, &b, &mut live, &instant)?;
        states = model.exit(&tape, &live);
    }
    Ok(states)
}

/// End-to-end gradient check of a short unrolled recurrence.
pub mod check {
    use super::*;
    use crate::gradcheck::grad_check;

    /// Four users, four items, four days.
    pub fn toy_log() -> Vec<Interaction> {
        let raw = [
            (0, 0, 0),
            (1, 1, 0),
            (2, 0, 0),
            (0, 2, 1),
            (3, 3, 1),
            (1, 0, 2),
            (2, 3, 2),
            (3, 1, 2),
            (0, 1, 3),
            (1, 2, 3),
        ];
        raw.iter()
            .map(|&(user, item, day)| Interaction {
                user,
                item,
                day,
                t_norm: day as f64 / 3.0,
            })
            .collect()
    }

    /// Random non-degenerate parameters (spectral radii and biases too).
    pub fn random_params(model: &Cpmr, seed: u64) -> ParameterSet {
        let mut params = model.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if params.name(id).starts_with("alpha") || params.name(id).ends_with(".b") {
                for v in params.get_mut(id).data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        params
    }

    /// Mean InfoNCE loss over days 1..=3 of [`toy_log`], unrolled from the
    /// origin on one tape, with fixed negatives.
    pub fn toy_loss(model: &Cpmr, store: &EdgeStore, tape: &mut Tape, params: &ParameterSet) -> Result<Var> {
        let day_unit = 0.4;
        let b = Bound::new(tape, params);
        let mut timeline = Timeline::new(store, model.config());
        let mut live = model.enter_segment(tape, params, &b, &model.init_states(params));
        let mut losses = Vec::new();
        let days: Vec<u32> = store.days().collect();
        for day in days {
            let graphs = timeline.graphs_for(day)?;
            let adv = model.advance(tape, params, &b, &mut live, &graphs, day_unit)?;
            if day > 0 {
                let edges: Vec<(u32, u32)> = timeline.instant().iter().map(|x| (x.user, x.item)).collect();
                let negs: Vec<(Vec<u32>, Vec<u32>)> = edges
                    .iter()
                    .map(|&(u, i)| (vec![(u + 1) % 4, (u + 2) % 4], vec![(i + 1) % 4, (i + 3) % 4]))
                    .collect();
                losses.push(crate::training::batch_loss_var(model, tape, params, &b, adv.z, &edges, &negs)?);
            }
            let instant = timeline.instant_biadjacency();
            model.apply_instant(tape, params, &b, &mut live, &instant)?;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / losses.len() as f64))
    }

    /// Max relative error of the unrolled step loss against central
    /// differences, for a 4×4 toy at latent size `d`.
    pub fn step_loss_grad_error(seed: u64, d: usize, h: f64) -> Result<f64> {
        let config = ModelConfig {
            d,
            s_days: 2,
            k: 4,
            ..ModelConfig::default()
        };
        let model = Cpmr::new(config, 4, 4)?;
        let store = EdgeStore::new(&toy_log(), 4, 4)?;
        let params = random_params(&model, seed);
        grad_check(|tape, p| toy_loss(&model, &store, tape, p), &params, h)
    }

    /// Per-parameter breakdown of [`step_loss_grad_error`].
    pub fn step_loss_grad_report(seed: u64, d: usize, h: f64) -> Result<Vec<crate::gradcheck::CheckResult>> {
        let config = ModelConfig {
            d,
            s_days: 2,
            k: 4,
            ..ModelConfig::default()
        };
        let model = Cpmr::new(config, 4, 4)?;
        let store = EdgeStore::new(&toy_log(), 4, 4)?;
        let params = random_params(&model, seed);
        crate::gradcheck::grad_check_by_param(|tape, p| toy_loss(&model, &store, tape, p), &params, h)
    }
}
