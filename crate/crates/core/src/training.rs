//! Batch sampling, Adam, and the epoch loop with validation, early stopping
//! and checkpointing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, HsicRepr, TrainConfig};
use crate::data::{split_leave_one_out, write_atomic, DataError, Dataset, Edge};
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::evaluation::{evaluate, EvalError, Protocol, RankingResult};
use crate::model::{AdamState, GateMode, Model, ModelError, ModelState, ParamVars};
use crate::objectives::{bpr_loss, contrastive_loss, ib_loss, total_loss, LossError, LossTerms};

pub const NEGATIVE_CAP: usize = 100;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Mixed into the seed of the validation carve-out.
const VALIDATION_SALT: u64 = 0x5eed_0f_7a11;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no target training edges")]
    NoPositives,
    #[error("user {0}: no negative found after {NEGATIVE_CAP} draws")]
    NegativeSampling(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("gradient/parameter shape mismatch at {0}")]
    Shape(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
    /// Node rows (users first, items offset by M), sorted.
    pub hsic_nodes: Vec<usize>,
}

/// Rejection sampler over items outside each user's training targets.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    positives: Vec<Vec<usize>>,
    num_items: usize,
}

impl NegativeSampler {
    pub fn new(ds: &Dataset) -> NegativeSampler {
        NegativeSampler {
            positives: ds.target_items_by_user(),
            num_items: ds.num_items,
        }
    }

    pub fn sample(&self, user: usize, rng: &mut impl Rng) -> Result<usize, TrainError> {
        let pos = &self.positives[user];
        for _ in 0..NEGATIVE_CAP {
            let i = rng.random_range(0..self.num_items);
            if pos.binary_search(&i).is_err() {
                return Ok(i);
            }
        }
        Err(TrainError::NegativeSampling(user))
    }
}

/// Completes a batch from its positive edges: one negative each, plus the
/// HSIC node sample.
pub fn build_batch(
    sampler: &NegativeSampler,
    positives: &[Edge],
    num_users: usize,
    num_nodes: usize,
    hsic_batch: usize,
    rng: &mut impl Rng,
) -> Result<TrainBatch, TrainError> {
    let users: Vec<usize> = positives.iter().map(|&(u, _)| u).collect();
    let pos_items: Vec<usize> = positives.iter().map(|&(_, i)| i).collect();
    let neg_items = users
        .iter()
        .map(|&u| sampler.sample(u, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let present: BTreeSet<usize> = users
        .iter()
        .copied()
        .chain(pos_items.iter().chain(&neg_items).map(|&i| num_users + i))
        .collect();
    let mut hsic_nodes: Vec<usize> = if present.len() >= 2 {
        let pool: Vec<usize> = present.into_iter().collect();
        if pool.len() <= hsic_batch {
            pool
        } else {
            index::sample(rng, pool.len(), hsic_batch)
                .into_iter()
                .map(|j| pool[j])
                .collect()
        }
    } else {
        index::sample(rng, num_nodes, hsic_batch.min(num_nodes)).into_vec()
    };
    hsic_nodes.sort_unstable();
    Ok(TrainBatch {
        users,
        pos_items,
        neg_items,
        hsic_nodes,
    })
}

/// `batch_size` positives drawn uniformly (with replacement) from the target
/// training edges.
pub fn sample_batch(
    ds: &Dataset,
    batch_size: usize,
    hsic_batch: usize,
    rng: &mut impl Rng,
) -> Result<TrainBatch, TrainError> {
    let edges = &ds.edges[ds.target];
    if edges.is_empty() {
        return Err(TrainError::NoPositives);
    }
    let picks: Vec<Edge> = (0..batch_size)
        .map(|_| edges[rng.random_range(0..edges.len())])
        .collect();
    build_batch(
        &NegativeSampler::new(ds),
        &picks,
        ds.num_users,
        ds.num_nodes(),
        hsic_batch,
        rng,
    )
}

/// One Adam update with bias correction. Parameters are left untouched when
/// any gradient is non-finite.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].shape() != g.shape() {
            return Err(TrainError::Shape(k));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(k));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k].data, &mut state.v[k].data);
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// The dataset the model is fit on: training edges of `ds`, and, when
/// validation is enabled, one more target edge per eligible user held out
/// as `test_items`.
pub fn fit_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Dataset, TrainError> {
    let base = ds.without_test();
    if cfg.eval_every == 0 {
        return Ok(base);
    }
    Ok(split_leave_one_out(&base, cfg.hyper.seed ^ VALIDATION_SALT)?.0)
}

/// Model whose graphs match what `train` fits on for `(ds, cfg)`.
pub fn model_for(ds: &Dataset, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let fit = fit_dataset(ds, cfg)?;
    Ok(Model::new(&fit, &cfg.hyper, cfg.ablation)?)
}

fn finite(tape: &Tape, v: Var, term: &'static str) -> Result<(), LossError> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite(term))
    }
}

/// Total training loss of one batch on `tape`. The confidence MLPs are
/// regularized only when the ablation uses gates.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    cfg: &TrainConfig,
    vars: &ParamVars,
    batch: &TrainBatch,
    noise: &[Vec<f64>],
) -> Result<(Var, LossTerms), TrainError> {
    let h = &cfg.hyper;
    let beta = cfg.effective_beta();
    let lambda = cfg.effective_lambda();
    let f = model.forward(tape, vars, GateMode::Train(noise), beta > 0.0)?;
    let pos = model.score(tape, f.fused, &batch.users, &batch.pos_items)?;
    let neg = model.score(tape, f.fused, &batch.users, &batch.neg_items)?;
    let bpr = bpr_loss(tape, pos, neg)?;
    finite(tape, bpr, "bpr")?;
    let ib = if beta > 0.0 {
        let mut pairs = Vec::with_capacity(f.aux.len());
        for a in &f.aux {
            let raw = a.ungated.as_ref().expect("ungated stack requested");
            let pair = match h.hsic_repr {
                HsicRepr::Last => (*a.gated.last().unwrap(), *raw.last().unwrap()),
                HsicRepr::Mean => (a.z, model.readout(tape, raw)?),
            };
            pairs.push(pair);
        }
        let ib = ib_loss(tape, &pairs, &batch.hsic_nodes, h.rbf_sigma)?;
        finite(tape, ib, "ib")?;
        Some(ib)
    } else {
        None
    };
    let cl = if lambda > 0.0 {
        let users: Vec<usize> = batch.users.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let items: Vec<usize> = batch
            .pos_items
            .iter()
            .chain(&batch.neg_items)
            .map(|&i| model.graphs.num_users + i)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Some(contrastive_loss(tape, f.z_tgt, f.z_aux, &users, &items, h.tau)?)
    } else {
        None
    };
    let reg = if cfg.ablation.uses_gates() { vars.all() } else { vec![vars.embeddings] };
    Ok(total_loss(tape, bpr, ib, cl, &reg, beta, lambda, h.gamma)?)
}

/// Loss terms of one batch, and gradients aligned with
/// [`ModelParams::tensors`](crate::model::ModelParams::tensors).
pub fn batch_gradients(
    model: &Model,
    cfg: &TrainConfig,
    state: &ModelState,
    batch: &TrainBatch,
    noise: &[Vec<f64>],
) -> Result<(LossTerms, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &state.params, true);
    let (total, terms) = batch_loss(&mut tape, model, cfg, &vars, batch, noise)?;
    let grads = tape.backward(total)?;
    Ok((terms, vars.all().iter().map(|&v| grads.wrt(v)).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub terms: LossTerms,
    /// Validation metrics on evaluation epochs.
    pub metrics: Option<RankingResult>,
}

pub fn metric_log_csv(log: &[EpochRecord], cutoffs: &[usize]) -> String {
    let mut out = String::from("epoch,loss_bpr,loss_ib,loss_cl,loss_total");
    for k in cutoffs {
        let _ = write!(out, ",hr@{k},ndcg@{k}");
    }
    out.push('\n');
    for r in log {
        let t = &r.terms;
        let _ = write!(out, "{},{:.9},{:.9},{:.9},{:.9}", r.epoch, t.bpr, t.ib, t.cl, t.total);
        for k in cutoffs {
            match &r.metrics {
                Some(m) => {
                    let _ = write!(out, ",{:.6},{:.6}", m.hr[k], m.ndcg[k]);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    /// Best validated state, or the final one when validation is off.
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn stamp(mut c: Checkpoint, meta: &BTreeMap<String, String>) -> Checkpoint {
    c.meta = meta.clone();
    c
}

/// Validation score used for model selection: HR@10 if requested, else HR at
/// the first cutoff.
fn selection_metric(r: &RankingResult) -> f64 {
    r.hr.get(&10).or_else(|| r.hr.values().next()).copied().unwrap_or(0.0)
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_meta(ds, cfg, &BTreeMap::new())
}

/// [`train`], stamping `meta` into every checkpoint written.
pub fn train_with_meta(
    ds: &Dataset,
    cfg: &TrainConfig,
    meta: &BTreeMap<String, String>,
) -> Result<TrainOutcome, TrainError> {
    cfg.hyper.validate()?;
    let h = &cfg.hyper;
    let fit = fit_dataset(ds, cfg)?;
    let model = Model::new(&fit, h, cfg.ablation)?;
    let mut positives = fit.edges[fit.target].clone();
    if positives.is_empty() {
        return Err(TrainError::NoPositives);
    }
    let sampler = NegativeSampler::new(&fit);
    let validate = cfg.eval_every > 0 && fit.has_split();
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| DataError::Io {
            path: dir.clone(),
            source: e,
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let mut state = ModelState::init(&fit, h, &mut rng);
    let mut best = state.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=h.epochs {
        positives.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let mut batches = 0usize;
        for chunk in positives.chunks(h.batch_size) {
            let batch = build_batch(&sampler, chunk, fit.num_users, fit.num_nodes(), h.hsic_batch, &mut rng)?;
            let noise = if cfg.ablation.uses_gates() {
                model.draw_noise(&mut rng)
            } else {
                Vec::new()
            };
            let (terms, grads) = batch_gradients(&model, cfg, &state, &batch, &noise)?;
            let mut params = state.params.tensors_mut();
            adam_step(&mut params, &grads, &mut state.adam, h.lr)?;
            sums.bpr += terms.bpr;
            sums.ib += terms.ib;
            sums.cl += terms.cl;
            sums.reg += terms.reg;
            sums.total += terms.total;
            batches += 1;
        }
        let n = batches as f64;
        let terms = LossTerms {
            bpr: sums.bpr / n,
            ib: sums.ib / n,
            cl: sums.cl / n,
            reg: sums.reg / n,
            total: sums.total / n,
        };
        epochs_run = epoch;

        let mut metrics = None;
        let mut stop = false;
        if validate && epoch % cfg.eval_every == 0 {
            let emb = model.embed(&state.params)?;
            let r = evaluate(&emb, &fit, &h.eval_cutoffs, Protocol::Full)?;
            let score = selection_metric(&r);
            if score > best_score {
                best_score = score;
                best = state.clone();
                best_epoch = epoch;
                stale = 0;
                if let Some(dir) = &cfg.checkpoint_dir {
                    stamp(Checkpoint::new(cfg, epoch, &state, &rng), meta).save(&dir.join("best.ckpt"))?;
                }
            } else {
                stale += 1;
                stop = cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience;
            }
            metrics = Some(r);
        }
        log.push(EpochRecord {
            epoch,
            terms,
            metrics,
        });
        if stop {
            break;
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        stamp(Checkpoint::new(cfg, epochs_run, &state, &rng), meta).save(&dir.join("last.ckpt"))?;
        if !validate {
            stamp(Checkpoint::new(cfg, epochs_run, &state, &rng), meta).save(&dir.join("best.ckpt"))?;
        }
        write_atomic(
            &dir.join("metrics.csv"),
            metric_log_csv(&log, &h.eval_cutoffs).as_bytes(),
        )?;
    }
    if !validate || best_epoch == 0 {
        best = state;
        best_epoch = epochs_run;
    }
    Ok(TrainOutcome {
        model,
        state: best,
        log,
        best_epoch,
        epochs_run,
    })
}
