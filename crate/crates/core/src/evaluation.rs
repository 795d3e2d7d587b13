//! Frozen-parameter incremental evaluation (MRR, Recall@K), plus the
//! drivers for ablations, context-window sweeps and truncation-length
//! sweeps, and a synthetic data generator with planted temporal structure.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{canonicalize, k_core_filter, Dataset, RawEvent, Split, DEFAULT_K_CORE, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::graph::{EdgeStore, HistoryIndex};
use crate::model::{replay, Bound, Clock, Cpmr, ModelConfig, Side, TemporalStates, Timeline, Variant};
use crate::params::ParameterSet;
use crate::tape::Tape;
use crate::training::{split_days, train, TrainConfig};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Drop items the user interacted with before the event's day from the
    /// candidate list (the target itself always stays).
    pub filter_seen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub user: u32,
    pub day: u32,
    pub item: u32,
    /// 1-based rank among all items.
    pub rank: usize,
}

/// `1 + #strictly higher + ⌈#other ties / 2⌉`.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (k, &s) in scores.iter().enumerate() {
        if s > t {
            higher += 1;
        } else if s == t && k != target {
            ties += 1;
        }
    }
    1 + higher + ties.div_ceil(2)
}

pub fn mrr(records: &[RankRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no ranked events".into()));
    }
    Ok(records.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / records.len() as f64)
}

pub fn recall_at_k(records: &[RankRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no ranked events".into()));
    }
    Ok(records.iter().filter(|r| r.rank <= k).count() as f64 / records.len() as f64)
}

/// Runs `days` with frozen parameters from `states`: evolve and fuse, rank
/// every event of the day against all items, then absorb the day. `history`
/// must hold every interaction before `days[0]` and is extended as days pass.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_days(
    model: &Cpmr,
    params: &ParameterSet,
    timeline: &mut Timeline<'_>,
    days: &[u32],
    day_unit: f64,
    mut states: TemporalStates,
    options: &EvalOptions,
    history: Option<&mut HistoryIndex>,
) -> Result<(Vec<RankRecord>, TemporalStates)> {
    let mut own = None;
    let history = match history {
        Some(h) => h,
        None => own.insert(HistoryIndex::new(model.n_users(), model.n_items())),
    };
    let all_items: Vec<usize> = (0..model.n_items()).collect();
    let mut records = Vec::new();
    for &day in days {
        let graphs = timeline.graphs_for(day)?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params);
        let mut live = model.enter(&mut tape, &states);
        let adv = model.advance(&mut tape, params, &b, &mut live, &graphs, day_unit)?;
        if live.clock != Clock::At(day) {
            return Err(Error::Sequencing(format!("ranking day {day} at clock {:?}", live.clock)));
        }
        let events = timeline.instant();
        let mut users: Vec<usize> = events.iter().map(|x| x.user as usize).collect();
        users.sort_unstable();
        users.dedup();
        let hu = model.project(&mut tape, params, &b, adv.z, Side::User, &users)?;
        let hi = model.project(&mut tape, params, &b, adv.z, Side::Item, &all_items)?;
        let scores = tape.value(hu).matmul_nt(tape.value(hi))?;
        for x in events {
            let row = users.binary_search(&(x.user as usize)).expect("user collected above");
            let mut s = scores.row(row).to_vec();
            if options.filter_seen {
                for (i, v) in s.iter_mut().enumerate() {
                    if i != x.item as usize && history.contains(x.user, i as u32) {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            records.push(RankRecord {
                user: x.user,
                day,
                item: x.item,
                rank: rank_of(&s, x.item as usize),
            });
        }
        let inst = timeline.instant_biadjacency();
        model.apply_instant(&mut tape, params, &b, &mut live, &inst)?;
        history.extend(events);
        states = model.exit(&tape, &live);
    }
    Ok((records, states))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub recall_at_10: f64,
    pub n_events: usize,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn from_records(records: &[RankRecord], seed: u64, config: BTreeMap<String, String>) -> Result<Self> {
        Ok(MetricsReport {
            mrr: mrr(records)?,
            recall_at_10: recall_at_k(records, DEFAULT_K)?,
            n_events: records.len(),
            seed,
            config,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mrr={:.6} recall_at_10={:.6} n_events={} seed={}",
            self.mrr, self.recall_at_10, self.n_events, self.seed
        )
    }
}

/// Replays every day before `split` from the origin with frozen parameters,
/// then ranks the split's events day by day.
pub fn incremental_eval(
    dataset: &Dataset,
    model: &Cpmr,
    params: &ParameterSet,
    split: Split,
    options: &EvalOptions,
) -> Result<Vec<RankRecord>> {
    model.check_params(params)?;
    let days = split_days(dataset, split);
    let Some(&first) = days.first() else {
        return Err(Error::Empty(format!("{split} split has no interactions")));
    };
    let store = EdgeStore::from_dataset(dataset)?;
    let before: Vec<u32> = store.days().take_while(|&d| d < first).collect();
    let mut timeline = Timeline::new(&store, model.config());
    let states = replay(model, params, &mut timeline, &before, dataset.day_unit, model.init_states(params))?;
    let mut history = HistoryIndex::new(dataset.n_users, dataset.n_items);
    history.extend(&dataset.interactions[..dataset.range(split).start]);
    let (records, _) = evaluate_days(
        model,
        params,
        &mut timeline,
        &days,
        dataset.day_unit,
        states,
        options,
        Some(&mut history),
    )?;
    Ok(records)
}

/// Planted-structure generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_days: u32,
    /// Days each item stays trendy.
    pub trend_window: u32,
    /// Probability that an interaction goes to a currently trendy item
    /// rather than one of the user's static favourites.
    pub mix: f64,
    /// Items trendy at any time.
    pub concurrent_trends: usize,
    /// Static favourites per user.
    pub favourites: usize,
    /// Mean interactions per day.
    pub events_per_day: usize,
    pub seed: u64,
}

impl Default for TrendSpec {
    fn default() -> Self {
        TrendSpec {
            n_users: 60,
            n_items: 40,
            n_days: 120,
            trend_window: 10,
            mix: 0.5,
            concurrent_trends: 4,
            favourites: 3,
            events_per_day: 12,
            seed: 0,
        }
    }
}

/// Interactions mixing static per-user favourites with a rotating set of
/// trendy items: days are grouped into blocks of `trend_window` days, and
/// each block has its own `concurrent_trends` trendy items (consecutive
/// blocks are disjoint whenever the catalogue allows). A trendy interaction
/// picks uniformly among the current block's items, so recent activity
/// identifies the current trends. The result is 5-core filtered and
/// canonicalized.
pub fn synthetic_trend_dataset(spec: &TrendSpec) -> Result<Dataset> {
    if spec.n_users == 0 || spec.n_items == 0 || spec.n_days < 2 || spec.trend_window == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.mix) {
        return Err(Error::Config(format!("trend mix {} outside [0, 1]", spec.mix)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let favourites: Vec<Vec<u32>> = (0..spec.n_users)
        .map(|_| {
            (0..spec.favourites.max(1))
                .map(|_| rng.random_range(0..spec.n_items as u32))
                .collect()
        })
        .collect();
    // A fixed random item order decouples trends from favourites.
    let mut order: Vec<u32> = (0..spec.n_items as u32).collect();
    order.shuffle(&mut rng);
    let c = spec.concurrent_trends.clamp(1, spec.n_items);
    let trendy_at = |day: u32| -> Vec<u32> {
        let block = (day / spec.trend_window) as usize;
        (0..c).map(|j| order[(block * c + j) % spec.n_items]).collect()
    };
    let mut events = Vec::new();
    for day in 0..spec.n_days {
        let trendy = trendy_at(day);
        let n = spec.events_per_day.max(1);
        for k in 0..n {
            let u = rng.random_range(0..spec.n_users);
            let item = if rng.random_bool(spec.mix) {
                trendy[rng.random_range(0..trendy.len())]
            } else {
                favourites[u][rng.random_range(0..favourites[u].len())]
            };
            events.push(RawEvent {
                user_key: format!("u{u}"),
                item_key: format!("i{item}"),
                timestamp: day as i64 * SECONDS_PER_DAY + k as i64,
                rating: None,
            });
        }
    }
    let core = k_core_filter(events, DEFAULT_K_CORE);
    canonicalize(&core)
}

/// Resolved-configuration echo stored with every report.
pub fn config_echo(model: &ModelConfig, train: &TrainConfig, split: Split, options: &EvalOptions) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("model.d", model.d.to_string());
    put("model.s_days", model.s_days.to_string());
    put("model.k", model.k.to_string());
    put("model.disable_ctx", model.disable_ctx.to_string());
    put("model.disable_his", model.disable_his.to_string());
    put("model.disable_fusion", model.disable_fusion.to_string());
    put("model.literal_update", model.literal_update.to_string());
    put("model.gain_axis", model.gain_axis.as_str().to_string());
    put("model.fusion_bias", model.fusion_bias.to_string());
    put("train.lr", train.lr.to_string());
    put("train.weight_decay", train.weight_decay.to_string());
    put("train.lr_decay_factor", train.lr_decay_factor.to_string());
    put("train.lr_decay_period", train.lr_decay_period.to_string());
    put("train.n_tbptt", train.n_tbptt.to_string());
    put("train.n_neg", train.n_neg.to_string());
    put("train.max_epochs", train.max_epochs.to_string());
    put("train.patience", train.patience.to_string());
    put("eval.split", split.as_str().to_string());
    put("eval.filter_seen", options.filter_seen.to_string());
    put("eval.unit", "interaction".to_string());
    m
}

/// Trains one configuration and evaluates it on the test split.
pub fn train_and_test(dataset: &Dataset, model: &ModelConfig, train_cfg: &TrainConfig) -> Result<MetricsReport> {
    let cpmr = Cpmr::new(model.clone(), dataset.n_users, dataset.n_items)?;
    let outcome = train(dataset, &cpmr, train_cfg)?;
    let options = EvalOptions::default();
    let records = incremental_eval(dataset, &cpmr, &outcome.params, Split::Test, &options)?;
    MetricsReport::from_records(
        &records,
        train_cfg.seed,
        config_echo(model, train_cfg, Split::Test, &options),
    )
}

pub fn ablation_run(dataset: &Dataset, variant: Variant, model: &ModelConfig, train_cfg: &TrainConfig) -> Result<MetricsReport> {
    train_and_test(dataset, &model.clone().with_variant(variant), train_cfg)
}

/// One row of a sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: u64,
    pub mrr: f64,
    pub recall_at_10: f64,
}

/// Sweepable hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    SDays,
    NTbptt,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s_days" => Ok(SweepParam::SDays),
            "n_tbptt" => Ok(SweepParam::NTbptt),
            other => Err(Error::Config(format!("cannot sweep `{other}` (expected s_days or n_tbptt)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::SDays => "s_days",
            SweepParam::NTbptt => "n_tbptt",
        }
    }

    /// Configuration key the parameter lives under.
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::SDays => "model.s_days",
            SweepParam::NTbptt => "train.n_tbptt",
        }
    }

    pub fn apply(self, value: u64, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
        if value == 0 {
            return Err(Error::Config(format!("{} must be at least 1", self.as_str())));
        }
        match self {
            SweepParam::SDays => {
                model.s_days = u32::try_from(value).map_err(|_| Error::Config(format!("s_days {value} too large")))?
            }
            SweepParam::NTbptt => train.n_tbptt = value as usize,
        }
        Ok(())
    }
}

/// Trains and tests one configuration per value, in the given order.
pub fn sweep(
    dataset: &Dataset,
    param: SweepParam,
    values: &[u64],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&v| {
            let (mut m, mut t) = (model.clone(), train_cfg.clone());
            param.apply(v, &mut m, &mut t)?;
            let r = train_and_test(dataset, &m, &t)?;
            Ok(SweepRow {
                value: v,
                mrr: r.mrr,
                recall_at_10: r.recall_at_10,
            })
        })
        .collect()
}

pub fn window_sweep(dataset: &Dataset, s_values: &[u64], model: &ModelConfig, train_cfg: &TrainConfig) -> Result<Vec<SweepRow>> {
    sweep(dataset, SweepParam::SDays, s_values, model, train_cfg)
}

/// Plot-ready CSV: `<param>,mrr,recall_at_10`.
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},mrr,recall_at_10\n", param.as_str());
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.mrr, r.recall_at_10));
    }
    out
}
