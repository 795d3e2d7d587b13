//! Training: negative sampling, the contrastive loss and the truncated
//! backpropagation-through-time loop with Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_days, mrr, recall_at_k, EvalOptions};
use crate::graph::{EdgeStore, HistoryIndex};
use crate::model::{Bound, Cpmr, TemporalStates, Timeline};
#[cfg(test)]
use crate::model::Clock;
use crate::optim::{adam_step, AdamState};
use crate::params::ParameterSet;
use crate::tape::{logsumexp, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by this every `lr_decay_period` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    /// Interaction days per truncated-backprop segment.
    pub n_tbptt: usize,
    /// Negatives per side; each positive is contrasted with `2·n_neg`.
    pub n_neg: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping (0 disables).
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_period: 10,
            n_tbptt: 20,
            n_neg: 8,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tbptt == 0 {
            return Err(Error::Config("train.n_tbptt must be at least 1".into()));
        }
        if self.n_neg == 0 {
            return Err(Error::Config("train.n_neg must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train.max_epochs must be at least 1".into()));
        }
        if self.lr_decay_period == 0 {
            return Err(Error::Config("train.lr_decay_period must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.lr and train.weight_decay must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_period) as i32)
    }
}

/// Negatives for one positive interaction `(u, i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    /// Users that had not interacted with `i` before the day.
    pub users: Vec<u32>,
    /// Items `u` had not interacted with before the day.
    pub items: Vec<u32>,
    /// A pool was empty and the unrestricted fallback was used.
    pub fallback: bool,
}

/// Draws `n` entries: without replacement when the pool is large enough,
/// with replacement from a smaller pool, and uniformly from `0..total`
/// minus `positive` when the pool is empty.
fn draw(pool: &mut Vec<u32>, n: usize, total: u32, positive: u32, rng: &mut ChaCha8Rng) -> (Vec<u32>, bool) {
    if pool.len() >= n {
        let (picked, _) = pool.partial_shuffle(rng, n);
        return (picked.to_vec(), false);
    }
    if !pool.is_empty() {
        return ((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect(), false);
    }
    let others: Vec<u32> = (0..total).filter(|&x| x != positive || total == 1).collect();
    ((0..n).map(|_| others[rng.random_range(0..others.len())]).collect(), true)
}

pub fn sample_negatives(
    user: u32,
    item: u32,
    history: &HistoryIndex,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> NegativeSample {
    let mut pool = history.unseen_users(item, user);
    let (users, fb_u) = draw(&mut pool, n_neg, history.n_users() as u32, user, rng);
    if fb_u {
        log::warn!("item {item}: no negative-user candidates, sampling from all users");
    }
    let mut pool = history.unseen_items(user, item);
    let (items, fb_i) = draw(&mut pool, n_neg, history.n_items() as u32, item, rng);
    if fb_i {
        log::warn!("user {user}: no negative-item candidates, sampling from all items");
    }
    NegativeSample {
        users,
        items,
        fallback: fb_u || fb_i,
    }
}

/// `−log(e^{pos} / (e^{pos} + Σ e^{neg}))`, evaluated with a shifted
/// log-sum-exp.
pub fn infonce_loss(pos: f64, negs: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    logsumexp(&all) - pos
}

/// Mean contrastive loss over a day's positives. `negs[k]` holds the
/// negative users and items of `edges[k]`; every entry must have the same
/// counts.
pub fn batch_loss_var(
    model: &Cpmr,
    tape: &mut Tape,
    params: &ParameterSet,
    b: &Bound,
    z: Var,
    edges: &[(u32, u32)],
    negs: &[(Vec<u32>, Vec<u32>)],
) -> Result<Var> {
    if edges.is_empty() || edges.len() != negs.len() {
        return Err(Error::Empty(format!(
            "batch loss needs one negative set per positive ({} positives, {} sets)",
            edges.len(),
            negs.len()
        )));
    }
    let (nu, ni) = (negs[0].0.len(), negs[0].1.len());
    let width = 1 + nu + ni;
    let mut users = Vec::with_capacity(edges.len() * width);
    let mut items = Vec::with_capacity(edges.len() * width);
    for (&(u, i), (nus, nis)) in edges.iter().zip(negs) {
        if nus.len() != nu || nis.len() != ni {
            return Err(Error::Dimension("ragged negative sets in one batch".into()));
        }
        users.push(u as usize);
        items.push(i as usize);
        for &n in nus {
            users.push(n as usize);
            items.push(i as usize);
        }
        for &n in nis {
            users.push(u as usize);
            items.push(n as usize);
        }
    }
    let scores = model.score_pairs(tape, params, b, z, &users, &items)?;
    let logits = tape.reshape(scores, edges.len(), width)?;
    let lse = tape.logsumexp_rows(logits);
    let pos = tape.column(logits, 0)?;
    let per_edge = tape.sub(lse, pos)?;
    Ok(tape.mean(per_edge))
}

/// One record per truncated-backprop segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub epoch: usize,
    pub day_start: u32,
    pub day_end: u32,
    pub n_days: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the epoch's segment losses.
    pub train_loss: f64,
    pub lr: f64,
    pub val_mrr: Option<f64>,
    pub val_recall_at_10: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch when there is
    /// no validation split).
    pub params: ParameterSet,
    pub initial_digest: u64,
    pub segments: Vec<SegmentRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
}

impl TrainOutcome {
    pub fn loss_trajectory(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.loss).collect()
    }
}

/// Trains with default logging (none).
pub fn train(dataset: &Dataset, model: &Cpmr, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, model, config, &mut |_| {})
}

/// Days of `split`, ascending.
pub fn split_days(dataset: &Dataset, split: Split) -> Vec<u32> {
    let mut days: Vec<u32> = dataset.split(split).iter().map(|x| x.day).collect();
    days.dedup();
    days
}

pub fn train_with(
    dataset: &Dataset,
    model: &Cpmr,
    config: &TrainConfig,
    on_segment: &mut dyn FnMut(&SegmentRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.n_users() != dataset.n_users || model.n_items() != dataset.n_items {
        return Err(Error::Dimension(format!(
            "model is {}×{}, dataset is {}×{}",
            model.n_users(),
            model.n_items(),
            dataset.n_users,
            dataset.n_items
        )));
    }
    let train_days = split_days(dataset, Split::Train);
    if train_days.is_empty() {
        return Err(Error::Empty("training split has no interactions".into()));
    }
    let val_days = split_days(dataset, Split::Validation);
    let store = EdgeStore::from_dataset(dataset)?;

    let mut params = model.init_params(config.seed);
    let initial_digest = params.digest();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut segments = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;

    for epoch in 0..config.max_epochs {
        let lr = config.lr_at(epoch);
        let mut timeline = Timeline::new(&store, model.config());
        let mut history = HistoryIndex::new(dataset.n_users, dataset.n_items);
        let mut states = model.init_states(&params);
        let mut epoch_losses = Vec::new();
        for chunk in train_days.chunks(config.n_tbptt) {
            let started = Instant::now();
            let (loss, next_states, grads) = run_segment(
                model,
                &params,
                &mut timeline,
                &mut history,
                chunk,
                dataset.day_unit,
                states,
                config.n_neg,
                &mut rng,
                epoch,
                lr,
            )?;
            // States carried forward were produced by the pre-step parameters.
            adam_step(&mut params, &grads, lr, config.weight_decay, &mut adam);
            states = next_states;
            let rec = SegmentRecord {
                epoch,
                day_start: chunk[0],
                day_end: *chunk.last().unwrap(),
                n_days: chunk.len(),
                loss,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            on_segment(&rec);
            epoch_losses.push(loss);
            segments.push(rec);
        }
        let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;

        let (val_mrr, val_recall) = if val_days.is_empty() {
            (None, None)
        } else {
            let (records, _) = evaluate_days(
                model,
                &params,
                &mut timeline,
                &val_days,
                dataset.day_unit,
                states,
                &EvalOptions::default(),
                Some(&mut history),
            )?;
            (Some(mrr(&records)?), Some(recall_at_k(&records, 10)?))
        };
        log::info!(
            "epoch {epoch}: train_loss={train_loss:.6} lr={lr:e} val_mrr={}",
            val_mrr.map_or("-".to_string(), |m| format!("{m:.5}"))
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            lr,
            val_mrr,
            val_recall_at_10: val_recall,
        });

        match val_mrr {
            Some(m) => {
                let improved = best.as_ref().is_none_or(|(b, _, _)| m > *b);
                if improved {
                    best = Some((m, epoch, params.clone()));
                } else if config.patience > 0 && epoch - best.as_ref().unwrap().1 >= config.patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
            None => best = Some((f64::NAN, epoch, params.clone())),
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        params,
        initial_digest,
        segments,
        epochs,
        best_epoch,
        optimizer_steps: adam.step_count(),
    })
}

/// Forward over one segment of days and its gradient. Returns the mean
/// segment loss, the (detached) states after the last day and the
/// gradients; `history` absorbs each day after its negatives are drawn.
#[allow(clippy::too_many_arguments)]
fn run_segment(
    model: &Cpmr,
    params: &ParameterSet,
    timeline: &mut Timeline<'_>,
    history: &mut HistoryIndex,
    days: &[u32],
    day_unit: f64,
    states: TemporalStates,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    lr: f64,
) -> Result<(f64, TemporalStates, Gradients)> {
    let entry_max = states.max_abs();
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params);
    let mut live = model.enter_segment(&mut tape, params, &b, &states);
    let mut losses = Vec::with_capacity(days.len());
    for &day in days {
        let graphs = timeline.graphs_for(day)?;
        let adv = model.advance(&mut tape, params, &b, &mut live, &graphs, day_unit)?;
        let instant: &[Interaction] = timeline.instant();
        let edges: Vec<(u32, u32)> = instant.iter().map(|x| (x.user, x.item)).collect();
        let negs: Vec<(Vec<u32>, Vec<u32>)> = edges
            .iter()
            .map(|&(u, i)| {
                let s = sample_negatives(u, i, history, n_neg, rng);
                debug_assert!(
                    s.fallback
                        || (s.users.iter().all(|&n| !history.contains(n, i))
                            && s.items.iter().all(|&n| !history.contains(u, n))),
                    "negative sampled from the history graph"
                );
                (s.users, s.items)
            })
            .collect();
        losses.push(batch_loss_var(model, &mut tape, params, &b, adv.z, &edges, &negs)?);
        let inst = timeline.instant_biadjacency();
        model.apply_instant(&mut tape, params, &b, &mut live, &inst)?;
        history.extend(instant);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let seg = tape.scale(total, 1.0 / losses.len() as f64);
    let loss = tape.value(seg).item();
    let next = model.exit(&tape, &live);
    let diverged = |detail: String| Error::Diverged {
        epoch,
        day_start: days[0],
        day_end: *days.last().unwrap(),
        detail,
    };
    if let Some((node, op)) = tape.first_non_finite() {
        let detail = format!(
            "non-finite value from `{op}` (node {node}); segment loss {loss}; lr {lr:e}; entry |state| max {entry_max:e}; exit |state| max {:e}",
            next.max_abs()
        );
        log::error!("{detail}");
        return Err(diverged(detail));
    }
    let grads = tape.backward(seg, params)?;
    if !grads.all_finite() {
        let detail = format!("non-finite gradient; segment loss {loss}; lr {lr:e}; entry |state| max {entry_max:e}");
        log::error!("{detail}");
        return Err(diverged(detail));
    }
    Ok((loss, next, grads))
}

/// Gradients of a segment loss that ignores the segment's own days and only
/// reads the states it was entered with; used to confirm that truncation
/// blocks all earlier contributions.
pub fn entry_state_gradients(model: &Cpmr, params: &ParameterSet, states: &TemporalStates) -> Result<Gradients> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params);
    let live = model.enter_segment(&mut tape, params, &b, states);
    let s = tape.add(live.his, live.ctx)?;
    let loss = tape.sum(s);
    tape.backward(loss, params)
}
