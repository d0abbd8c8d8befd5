//! Leave-one-out ranking metrics, edge-retention statistics and the
//! clean/noisy robustness comparison.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{Ablation, TrainConfig};
use crate::data::{inject_noise, DataError, Dataset, Edge};
use crate::model::{Embeddings, Model, ModelError, ModelParams};
use crate::par;
use crate::training::{train, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("held-out item {0} is not a candidate")]
    NotCandidate(usize),
    #[error("no evaluated users")]
    NoUsers,
    #[error("cutoff K must be >= 1")]
    ZeroCutoff,
    #[error("dataset has no held-out split")]
    NoSplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

/// 1-based rank of `held_out` among the candidates: every item not in
/// `excluded` (sorted), plus `held_out`. Ties go to the smaller item index.
pub fn rank_user(scores: &[f64], held_out: usize, excluded: &[usize]) -> Result<usize, EvalError> {
    if held_out >= scores.len() || excluded.binary_search(&held_out).is_ok() {
        return Err(EvalError::NotCandidate(held_out));
    }
    let s = scores[held_out];
    let mut ex = excluded.iter().peekable();
    let mut rank = 1;
    for (j, &v) in scores.iter().enumerate() {
        while ex.peek().is_some_and(|&&e| e < j) {
            ex.next();
        }
        if ex.peek() == Some(&&j) {
            continue;
        }
        if v > s || (v == s && j < held_out) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Same contract as [`rank_user`] restricted to an explicit candidate list
/// (which must contain `held_out`).
pub fn rank_among(scores: &[f64], held_out: usize, candidates: &[usize]) -> Result<usize, EvalError> {
    if !candidates.contains(&held_out) || held_out >= scores.len() {
        return Err(EvalError::NotCandidate(held_out));
    }
    let s = scores[held_out];
    let ahead = candidates
        .iter()
        .filter(|&&j| j != held_out && (scores[j] > s || (scores[j] == s && j < held_out)))
        .count();
    Ok(ahead + 1)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    if ranks.is_empty() {
        return Err(EvalError::NoUsers);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    if ranks.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Protocol {
    /// Rank against every non-training item.
    Full,
    /// Rank against `n` sampled non-training items.
    Sampled { n: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// (user, rank) for every evaluated user.
    pub ranks: Vec<(usize, usize)>,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub evaluated_users: usize,
}

impl RankingResult {
    pub fn from_ranks(ranks: Vec<(usize, usize)>, cutoffs: &[usize]) -> Result<RankingResult, EvalError> {
        let only: Vec<usize> = ranks.iter().map(|&(_, r)| r).collect();
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in cutoffs {
            hr.insert(k, hr_at_k(&only, k)?);
            ndcg.insert(k, ndcg_at_k(&only, k)?);
        }
        Ok(RankingResult {
            evaluated_users: only.len(),
            ranks,
            hr,
            ndcg,
        })
    }

    /// `metric,K,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,K,value\n");
        for (k, v) in &self.hr {
            let _ = writeln!(out, "HR,{k},{v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "NDCG,{k},{v:.6}");
        }
        out
    }
}

/// Ranks every user with a held-out item in `ds`. Training target items of
/// `ds` are excluded from the candidates.
pub fn evaluate(
    emb: &Embeddings,
    ds: &Dataset,
    cutoffs: &[usize],
    protocol: Protocol,
) -> Result<RankingResult, EvalError> {
    let pairs = ds.test_pairs();
    if pairs.is_empty() {
        return Err(EvalError::NoSplit);
    }
    let train = ds.target_items_by_user();
    let n = ds.num_items;
    let ranks = par::map_slice(&pairs, |&(u, held)| -> Result<(usize, usize), EvalError> {
        let scores: Vec<f64> = (0..n).map(|i| emb.score(u, i)).collect();
        let rank = match protocol {
            Protocol::Full => rank_user(&scores, held, &train[u])?,
            Protocol::Sampled { n: count, seed } => {
                let pool: Vec<usize> = (0..n)
                    .filter(|&i| i != held && train[u].binary_search(&i).is_err())
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u as u64);
                let take = count.min(pool.len());
                let mut cands: Vec<usize> = index::sample(&mut rng, pool.len(), take)
                    .into_iter()
                    .map(|j| pool[j])
                    .collect();
                cands.push(held);
                rank_among(&scores, held, &cands)?
            }
        };
        Ok((u, rank))
    });
    let ranks = ranks.into_iter().collect::<Result<Vec<_>, _>>()?;
    RankingResult::from_ranks(ranks, cutoffs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionRow {
    pub behavior: String,
    pub edges: usize,
    pub mean_gate: f64,
    pub hard_retention: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Known-noise edges of a behavior: planted labels plus injected edges.
fn noise_set(ds: &Dataset, behavior: usize) -> Option<HashSet<Edge>> {
    let planted = ds.noise_labels.as_ref().map(|l| l[behavior].clone());
    let injected = &ds.injected[behavior];
    if planted.is_none() && injected.is_empty() {
        return None;
    }
    let mut set: HashSet<Edge> = planted.unwrap_or_default().into_iter().collect();
    set.extend(injected.iter().copied());
    Some(set)
}

/// Deterministic gate statistics per auxiliary behavior. An edge is retained
/// when its gate is `>= theta`.
pub fn retention_report(
    model: &Model,
    params: &ModelParams,
    ds: &Dataset,
    theta: f64,
) -> Result<Vec<RetentionRow>, EvalError> {
    let emb = model.embed(params)?;
    let mut rows = Vec::new();
    for (k, g) in emb.gates.iter().enumerate() {
        let graph = &model.graphs.auxiliary[k];
        let gates = g.gate.clone().unwrap_or_else(|| vec![1.0; graph.num_edges()]);
        let edges = gates.len();
        let mean_gate = gates.iter().sum::<f64>() / edges.max(1) as f64;
        let kept: Vec<bool> = gates.iter().map(|&v| v >= theta).collect();
        let retained = kept.iter().filter(|&&b| b).count();
        let (precision, recall) = match noise_set(ds, g.behavior) {
            Some(noise) => {
                let relevant: Vec<bool> = graph.edges.iter().map(|e| !noise.contains(e)).collect();
                let hits = kept.iter().zip(&relevant).filter(|&(&k, &r)| k && r).count();
                let rel = relevant.iter().filter(|&&r| r).count();
                (
                    (retained > 0).then(|| hits as f64 / retained as f64),
                    (rel > 0).then(|| hits as f64 / rel as f64),
                )
            }
            None => (None, None),
        };
        rows.push(RetentionRow {
            behavior: ds.behavior_names[g.behavior].clone(),
            edges,
            mean_gate,
            hard_retention: retained as f64 / edges.max(1) as f64,
            precision,
            recall,
        });
    }
    Ok(rows)
}

pub fn retention_csv(rows: &[RetentionRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("behavior,mean_gate,hard_retention,precision,recall\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.behavior,
            r.mean_gate,
            r.hard_retention,
            opt(r.precision),
            opt(r.recall)
        );
    }
    out
}

/// Relative change `(noisy - clean) / clean`.
pub fn relative_change(clean: f64, noisy: f64) -> f64 {
    (noisy - clean) / clean
}

pub const ROBUSTNESS_CUTOFFS: [usize; 2] = [10, 20];

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub variant: Ablation,
    pub clean: RankingResult,
    pub noisy: RankingResult,
}

impl RobustnessRow {
    /// HR@10, NDCG@10, HR@20, NDCG@20.
    pub fn values(r: &RankingResult) -> [f64; 4] {
        [r.hr[&10], r.ndcg[&10], r.hr[&20], r.ndcg[&20]]
    }

    pub fn changes(&self) -> [f64; 4] {
        let (c, n) = (Self::values(&self.clean), Self::values(&self.noisy));
        [0, 1, 2, 3].map(|j| relative_change(c[j], n[j]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub ratio: f64,
    pub behaviors: Vec<String>,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,row,HR@10,NDCG@10,HR@20,NDCG@20\n");
        for row in &self.rows {
            let name = if row.variant == Ablation::None {
                "GCIB"
            } else {
                row.variant.label()
            };
            for (label, vals) in [
                ("Clean", RobustnessRow::values(&row.clean)),
                ("+ Noise", RobustnessRow::values(&row.noisy)),
            ] {
                let v: Vec<String> = vals.iter().map(|x| format!("{x:.4}")).collect();
                let _ = writeln!(out, "{name},{label},{}", v.join(","));
            }
            let c: Vec<String> = row.changes().iter().map(|x| format!("{:.2}%", 100.0 * x)).collect();
            let _ = writeln!(out, "{name},Rel. Change,{}", c.join(","));
        }
        out
    }
}

/// Trains full and no-IB models on `ds` and on `ds` with `ratio` noise
/// injected into `behaviors` (all auxiliary behaviors when empty), all under
/// the same seed, and evaluates each on the held-out split.
pub fn robustness_compare(
    ds: &Dataset,
    cfg: &TrainConfig,
    behaviors: &[usize],
    ratio: f64,
) -> Result<RobustnessReport, EvalError> {
    let targets = if behaviors.is_empty() {
        ds.auxiliary_behaviors()
    } else {
        behaviors.to_vec()
    };
    let mut noisy = ds.clone();
    for &b in &targets {
        noisy = inject_noise(&noisy, b, ratio, cfg.hyper.seed ^ (b as u64 + 1))?.0;
    }
    let runs: Vec<(Ablation, bool)> = vec![
        (Ablation::None, false),
        (Ablation::None, true),
        (Ablation::NoIb, false),
        (Ablation::NoIb, true),
    ];
    let results = par::map_slice(&runs, |&(ablation, is_noisy)| -> Result<RankingResult, EvalError> {
        let data = if is_noisy { &noisy } else { ds };
        let mut c = cfg.clone();
        c.ablation = ablation;
        c.checkpoint_dir = None;
        let out = train(data, &c).map_err(Box::new)?;
        let emb = out.model.embed(&out.state.params)?;
        evaluate(&emb, data, &ROBUSTNESS_CUTOFFS, Protocol::Full)
    });
    let mut it = results.into_iter();
    let mut rows = Vec::new();
    for variant in [Ablation::None, Ablation::NoIb] {
        let clean = it.next().unwrap()?;
        let noisy = it.next().unwrap()?;
        rows.push(RobustnessRow {
            variant,
            clean,
            noisy,
        });
    }
    Ok(RobustnessReport {
        ratio,
        behaviors: targets.iter().map(|&b| ds.behavior_names[b].clone()).collect(),
        rows,
    })
}
