//! Interaction data: ingestion, id remapping, leave-one-out splitting,
//! planted synthetic datasets and auxiliary noise injection.
//!
//! All behaviors share one user index space `0..num_users` and one item
//! index space `0..num_items`. Edge lists are kept sorted by `(user, item)`
//! and free of duplicates.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use thiserror::Error;

/// A `(user, item)` pair in internal index space.
pub type Edge = (usize, usize);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("target behavior `{target}` not found (available: {available:?})")]
    MissingTarget { target: String, available: Vec<String> },
    #[error("{path}:{line}: malformed record `{content}`")]
    Malformed {
        path: PathBuf,
        line: usize,
        content: String,
    },
    #[error("behavior file {0} has no interactions")]
    EmptyBehavior(PathBuf),
    #[error("no interaction files found in {0}")]
    NoBehaviors(PathBuf),
    #[error("dataset already has a held-out split")]
    AlreadySplit,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("behavior {0} is the target behavior; noise goes into auxiliary behaviors only")]
    TargetBehavior(usize),
    #[error("behavior index {0} out of range")]
    UnknownBehavior(usize),
    #[error("unknown behavior name `{0}`")]
    UnknownBehaviorName(String),
    #[error("noise ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("only {available} unobserved pairs remain, cannot inject {requested}")]
    InsufficientPairs { requested: usize, available: usize },
    #[error("malformed dataset directory {path}: {reason}")]
    BadLayout { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One observed interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
}

/// Users, items, and per-behavior interaction edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub behavior_names: Vec<String>,
    pub target: usize,
    /// Per-behavior sorted edge lists. For the target behavior these are
    /// training edges only.
    pub edges: Vec<Vec<Edge>>,
    /// Held-out target item per user, `None` for users excluded from evaluation.
    pub test_items: Vec<Option<usize>>,
    /// Internal index -> raw id.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Planted noise edges per behavior, known only for synthetic data.
    pub noise_labels: Option<Vec<Vec<Edge>>>,
    /// Edges added by [`inject_noise`], per behavior.
    pub injected: Vec<Vec<Edge>>,
}

impl Dataset {
    pub fn num_behaviors(&self) -> usize {
        self.behavior_names.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn auxiliary_behaviors(&self) -> Vec<usize> {
        (0..self.num_behaviors()).filter(|&b| b != self.target).collect()
    }

    pub fn behavior_index(&self, name: &str) -> Result<usize, DataError> {
        self.behavior_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownBehaviorName(name.to_string()))
    }

    pub fn has_split(&self) -> bool {
        self.test_items.iter().any(Option::is_some)
    }

    pub fn test_pairs(&self) -> Vec<Edge> {
        self.test_items
            .iter()
            .enumerate()
            .filter_map(|(u, i)| i.map(|i| (u, i)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = InteractionRecord> + '_ {
        self.edges.iter().enumerate().flat_map(|(behavior, list)| {
            list.iter().map(move |&(user, item)| InteractionRecord {
                user,
                item,
                behavior,
            })
        })
    }

    /// Training target items of each user, as sorted lists.
    pub fn target_items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.edges[self.target] {
            out[u].push(i);
        }
        out
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_ids.binary_search_by(|s| s.as_str().cmp(raw)).ok()
    }

    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_ids.binary_search_by(|s| s.as_str().cmp(raw)).ok()
    }

    /// Copy of this dataset with the held-out split removed (test edges are
    /// dropped, not merged back).
    pub fn without_test(&self) -> Dataset {
        let mut ds = self.clone();
        ds.test_items = vec![None; ds.num_users];
        ds
    }

    /// Writes the prepared layout read back by [`Dataset::load_prepared`].
    ///
    /// ```text
    /// dataset.meta              key=value header
    /// behaviors/<name>.txt      training edges, internal ids
    /// test.txt                  held-out (user, item) pairs
    /// users.map / items.map     internal id -> raw id
    /// labels/<name>.txt         planted noise edges (synthetic only)
    /// audit/<name>.txt          injected noise edges
    /// ```
    pub fn write_prepared(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir.join("behaviors")).map_err(io_err(dir))?;
        let mut meta = String::new();
        meta.push_str(&format!("users={}\n", self.num_users));
        meta.push_str(&format!("items={}\n", self.num_items));
        meta.push_str(&format!("behaviors={}\n", self.behavior_names.join(",")));
        meta.push_str(&format!("target={}\n", self.behavior_names[self.target]));
        meta.push_str(&format!("labels={}\n", self.noise_labels.is_some()));
        write_atomic(&dir.join("dataset.meta"), meta.as_bytes())?;
        for (b, name) in self.behavior_names.iter().enumerate() {
            write_edges(&dir.join("behaviors").join(format!("{name}.txt")), &self.edges[b])?;
        }
        write_edges(&dir.join("test.txt"), &self.test_pairs())?;
        write_atomic(&dir.join("users.map"), id_map_text(&self.user_ids).as_bytes())?;
        write_atomic(&dir.join("items.map"), id_map_text(&self.item_ids).as_bytes())?;
        if let Some(labels) = &self.noise_labels {
            fs::create_dir_all(dir.join("labels")).map_err(io_err(dir))?;
            for (b, name) in self.behavior_names.iter().enumerate() {
                write_edges(&dir.join("labels").join(format!("{name}.txt")), &labels[b])?;
            }
        }
        if self.injected.iter().any(|e| !e.is_empty()) {
            fs::create_dir_all(dir.join("audit")).map_err(io_err(dir))?;
            for (b, name) in self.behavior_names.iter().enumerate() {
                write_edges(&dir.join("audit").join(format!("{name}.txt")), &self.injected[b])?;
            }
        }
        Ok(())
    }

    pub fn load_prepared(dir: &Path) -> Result<Dataset, DataError> {
        let meta_path = dir.join("dataset.meta");
        let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let mut meta = BTreeMap::new();
        for (n, line) in meta_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| DataError::Malformed {
                path: meta_path.clone(),
                line: n + 1,
                content: line.to_string(),
            })?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        let bad = |reason: &str| DataError::BadLayout {
            path: dir.to_path_buf(),
            reason: reason.to_string(),
        };
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(&format!("missing key `{k}`")));
        let num_users: usize = get("users")?.parse().map_err(|_| bad("bad `users`"))?;
        let num_items: usize = get("items")?.parse().map_err(|_| bad("bad `items`"))?;
        let behavior_names: Vec<String> =
            get("behaviors")?.split(',').map(str::to_string).collect();
        let target_name = get("target")?;
        let target = behavior_names
            .iter()
            .position(|n| n == target_name)
            .ok_or_else(|| bad("target not among behaviors"))?;
        let has_labels = meta.get("labels").map(|v| v == "true").unwrap_or(false);

        let check = |edges: &[Edge], path: &Path| -> Result<(), DataError> {
            if edges.iter().any(|&(u, i)| u >= num_users || i >= num_items) {
                return Err(DataError::BadLayout {
                    path: path.to_path_buf(),
                    reason: "edge index out of range".into(),
                });
            }
            Ok(())
        };
        let mut edges = Vec::with_capacity(behavior_names.len());
        for name in &behavior_names {
            let p = dir.join("behaviors").join(format!("{name}.txt"));
            let e = read_edges(&p)?;
            check(&e, &p)?;
            edges.push(e);
        }
        let test_path = dir.join("test.txt");
        let mut test_items = vec![None; num_users];
        for (u, i) in read_edges(&test_path)? {
            if u >= num_users || i >= num_items {
                return Err(bad("test pair out of range"));
            }
            test_items[u] = Some(i);
        }
        let user_ids = read_id_map(&dir.join("users.map"), num_users)?;
        let item_ids = read_id_map(&dir.join("items.map"), num_items)?;
        let noise_labels = if has_labels {
            let mut all = Vec::new();
            for name in &behavior_names {
                all.push(read_edges(&dir.join("labels").join(format!("{name}.txt")))?);
            }
            Some(all)
        } else {
            None
        };
        let mut injected = vec![Vec::new(); behavior_names.len()];
        if dir.join("audit").is_dir() {
            for (b, name) in behavior_names.iter().enumerate() {
                let p = dir.join("audit").join(format!("{name}.txt"));
                if p.exists() {
                    injected[b] = read_edges(&p)?;
                }
            }
        }
        Ok(Dataset {
            num_users,
            num_items,
            behavior_names,
            target,
            edges,
            test_items,
            user_ids,
            item_ids,
            noise_labels,
            injected,
        })
    }
}

fn id_map_text(ids: &[String]) -> String {
    let mut s = String::new();
    for (i, raw) in ids.iter().enumerate() {
        s.push_str(&format!("{i}\t{raw}\n"));
    }
    s
}

fn read_id_map(path: &Path, expected: usize) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut ids = Vec::with_capacity(expected);
    for (n, line) in text.lines().enumerate() {
        let malformed = || DataError::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            content: line.to_string(),
        };
        let (idx, raw) = line.split_once('\t').ok_or_else(malformed)?;
        if idx.parse::<usize>().map_err(|_| malformed())? != ids.len() {
            return Err(malformed());
        }
        ids.push(raw.to_string());
    }
    if ids.len() != expected {
        return Err(DataError::BadLayout {
            path: path.to_path_buf(),
            reason: format!("expected {expected} ids, found {}", ids.len()),
        });
    }
    Ok(ids)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Two-column `<user>\t<item>` edge file.
pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<(), DataError> {
    let mut s = String::with_capacity(edges.len() * 10);
    for &(u, i) in edges {
        s.push_str(&format!("{u}\t{i}\n"));
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_edges(path: &Path) -> Result<Vec<Edge>, DataError> {
    let mut out = Vec::new();
    for (line_no, a, b) in read_pairs(path)? {
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| DataError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                content: format!("{a}\t{b}"),
            })
        };
        out.push((parse(&a)?, parse(&b)?));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Reads raw two-column records, skipping blank and `#` lines.
fn read_pairs(path: &Path) -> Result<Vec<(usize, String, String)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                out.push((n + 1, a.to_string(), b.to_string()))
            }
            _ => {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line: n + 1,
                    content: line.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Reads one `<behavior>.txt` file per behavior from `dir` and remaps raw ids
/// to contiguous indices assigned in sorted raw-id order.
pub fn load_dataset(dir: &Path, target_name: &str) -> Result<Dataset, DataError> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem() {
                files.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    if files.is_empty() {
        return Err(DataError::NoBehaviors(dir.to_path_buf()));
    }
    files.sort();
    let behavior_names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    let target = behavior_names
        .iter()
        .position(|n| n == target_name)
        .ok_or_else(|| DataError::MissingTarget {
            target: target_name.to_string(),
            available: behavior_names.clone(),
        })?;

    let mut raw: Vec<Vec<(String, String)>> = Vec::with_capacity(files.len());
    let mut users = BTreeSet::new();
    let mut items = BTreeSet::new();
    for (_, path) in &files {
        let pairs = read_pairs(path)?;
        if pairs.is_empty() {
            return Err(DataError::EmptyBehavior(path.clone()));
        }
        let pairs: Vec<(String, String)> = pairs.into_iter().map(|(_, a, b)| (a, b)).collect();
        for (u, i) in &pairs {
            users.insert(u.clone());
            items.insert(i.clone());
        }
        raw.push(pairs);
    }
    let user_ids: Vec<String> = users.into_iter().collect();
    let item_ids: Vec<String> = items.into_iter().collect();
    let lookup = |ids: &[String], key: &str| {
        ids.binary_search_by(|s| s.as_str().cmp(key))
            .expect("id collected above")
    };
    let edges = raw
        .iter()
        .map(|pairs| {
            let mut e: Vec<Edge> = pairs
                .iter()
                .map(|(u, i)| (lookup(&user_ids, u), lookup(&item_ids, i)))
                .collect();
            e.sort_unstable();
            e.dedup();
            e
        })
        .collect();
    let k = behavior_names.len();
    Ok(Dataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        behavior_names,
        target,
        edges,
        test_items: vec![None; user_ids.len()],
        user_ids,
        item_ids,
        noise_labels: None,
        injected: vec![Vec::new(); k],
    })
}

/// Outcome counts of a leave-one-out split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitReport {
    pub held_out: usize,
    /// Users with at least one but fewer than two target interactions.
    pub excluded: usize,
}

/// Moves one uniformly chosen target edge per eligible user (two or more
/// target interactions) into `test_items`.
pub fn split_leave_one_out(ds: &Dataset, seed: u64) -> Result<(Dataset, SplitReport), DataError> {
    if ds.has_split() {
        return Err(DataError::AlreadySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_user = ds.target_items_by_user();
    let mut out = ds.clone();
    let mut train = Vec::with_capacity(ds.edges[ds.target].len());
    let mut report = SplitReport {
        held_out: 0,
        excluded: 0,
    };
    for (u, items) in by_user.iter().enumerate() {
        if items.len() >= 2 {
            let pick = rng.random_range(0..items.len());
            out.test_items[u] = Some(items[pick]);
            report.held_out += 1;
            train.extend(
                items
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != pick)
                    .map(|(_, &i)| (u, i)),
            );
        } else {
            if !items.is_empty() {
                report.excluded += 1;
            }
            train.extend(items.iter().map(|&i| (u, i)));
        }
    }
    out.edges[ds.target] = train;
    Ok((out, report))
}

/// Parameters of the planted preference generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub latent_dim: usize,
    /// Per-behavior edge density; the last entry is the target behavior.
    pub densities: Vec<f64>,
    /// Share of auxiliary edges drawn uniformly at random instead of from the
    /// preference model.
    pub noise_fraction: f64,
    /// Standard deviation of the per-item popularity offset.
    pub item_bias: f64,
    /// Inverse temperature for sampling relevant auxiliary edges.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 200,
            num_items: 300,
            num_behaviors: 3,
            latent_dim: 8,
            densities: vec![0.08, 0.05, 0.03],
            noise_fraction: 0.5,
            item_bias: 1.0,
            sharpness: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_users == 0 || self.num_items == 0 {
            return bad("user and item counts must be positive".into());
        }
        if self.num_behaviors < 2 {
            return bad("need a target and at least one auxiliary behavior".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.densities.len() != self.num_behaviors {
            return bad(format!(
                "{} densities for {} behaviors",
                self.densities.len(),
                self.num_behaviors
            ));
        }
        if let Some(d) = self.densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return bad(format!("density {d} outside (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return bad(format!("noise_fraction {} outside [0, 1)", self.noise_fraction));
        }
        if !(self.item_bias >= 0.0 && self.sharpness >= 0.0) {
            return bad("item_bias and sharpness must be non-negative".into());
        }
        let target_count = self.per_user_count(self.num_behaviors - 1);
        if target_count < 2 || target_count >= self.num_items {
            return bad(format!(
                "target density yields {target_count} items per user; need 2..{}",
                self.num_items
            ));
        }
        Ok(())
    }

    fn per_user_count(&self, behavior: usize) -> usize {
        (self.densities[behavior] * self.num_items as f64).round() as usize
    }

    /// Reads a flat `key=value` spec file. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<SyntheticSpec, DataError> {
        let mut spec = SyntheticSpec::default();
        let mut densities = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| DataError::InvalidSpec(format!("line {}: {m}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad("expected a number"));
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad("expected an integer"));
            match k {
                "users" => spec.num_users = int(v)?,
                "items" => spec.num_items = int(v)?,
                "behaviors" => spec.num_behaviors = int(v)?,
                "latent_dim" => spec.latent_dim = int(v)?,
                "densities" => {
                    densities = Some(
                        v.split(',')
                            .map(|s| num(s.trim()))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                "noise_fraction" => spec.noise_fraction = num(v)?,
                "item_bias" => spec.item_bias = num(v)?,
                "sharpness" => spec.sharpness = num(v)?,
                "seed" => spec.seed = v.parse().map_err(|_| bad("expected an integer"))?,
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        if let Some(d) = densities {
            spec.densities = d;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Builds a dataset from a planted low-rank preference model.
///
/// Scores are `u·v/√r + b_item`. Each user's target edges are their top
/// scoring items. Auxiliary behaviors mix relevant edges, drawn by
/// Gumbel-top-k sampling at inverse temperature `sharpness` over the same
/// scores, with uniform noise edges; the noise count per user is
/// `Binomial(n, noise_fraction)` and noise edges are recorded in
/// `noise_labels`. Behaviors are named `aux1..auxK-1` plus `target` (last).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (m, n, k, r) = (spec.num_users, spec.num_items, spec.num_behaviors, spec.latent_dim);
    let target = k - 1;
    for b in 0..target {
        if spec.per_user_count(b) > n {
            return Err(DataError::InvalidSpec(format!("density of behavior {b} exceeds item count")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let users: Vec<f64> = (0..m * r).map(|_| normal(&mut rng)).collect();
    let items: Vec<f64> = (0..n * r).map(|_| normal(&mut rng)).collect();
    let bias: Vec<f64> = (0..n).map(|_| spec.item_bias * normal(&mut rng)).collect();
    let scale = 1.0 / (r as f64).sqrt();
    let score = |u: usize, i: usize| -> f64 {
        let dot: f64 = users[u * r..(u + 1) * r]
            .iter()
            .zip(&items[i * r..(i + 1) * r])
            .map(|(a, b)| a * b)
            .sum();
        dot * scale + bias[i]
    };

    let mut edges = vec![Vec::new(); k];
    let mut labels = vec![Vec::new(); k];
    let target_count = spec.per_user_count(target);
    for u in 0..m {
        let scores: Vec<f64> = (0..n).map(|i| score(u, i)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        edges[target].extend(order[..target_count].iter().map(|&i| (u, i)));

        for b in 0..target {
            let count = spec.per_user_count(b);
            let noise = if spec.noise_fraction > 0.0 && count > 0 {
                Binomial::new(count as u64, spec.noise_fraction)
                    .expect("validated probability")
                    .sample(&mut rng) as usize
            } else {
                0
            };
            let relevant = count - noise;
            // Gumbel-top-k == sampling without replacement from softmax(sharpness * score).
            let mut keys: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let g: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    (spec.sharpness * scores[i] - (-g.ln()).ln(), i)
                })
                .collect();
            keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let chosen: Vec<usize> = keys[..relevant].iter().map(|&(_, i)| i).collect();
            let taken: HashSet<usize> = chosen.iter().copied().collect();
            let mut rest: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
            rest.partial_shuffle(&mut rng, noise);
            edges[b].extend(chosen.iter().map(|&i| (u, i)));
            for &i in &rest[..noise] {
                edges[b].push((u, i));
                labels[b].push((u, i));
            }
        }
    }
    for list in edges.iter_mut().chain(labels.iter_mut()) {
        list.sort_unstable();
    }
    let mut behavior_names: Vec<String> = (1..k).map(|b| format!("aux{b}")).collect();
    behavior_names.push("target".to_string());
    Ok(Dataset {
        num_users: m,
        num_items: n,
        behavior_names,
        target,
        edges,
        test_items: vec![None; m],
        user_ids: numeric_ids("u", m),
        item_ids: numeric_ids("i", n),
        noise_labels: Some(labels),
        injected: vec![Vec::new(); k],
    })
}

/// Zero-padded ids so lexicographic order matches index order.
fn numeric_ids(prefix: &str, count: usize) -> Vec<String> {
    let width = count.saturating_sub(1).to_string().len();
    (0..count).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Adds `floor(ratio * |E_behavior|)` edges sampled uniformly without
/// replacement from the pairs unobserved in `behavior`. The new edges are
/// recorded in `injected` (and in `noise_labels` when present).
pub fn inject_noise(
    ds: &Dataset,
    behavior: usize,
    ratio: f64,
    seed: u64,
) -> Result<(Dataset, Vec<Edge>), DataError> {
    if behavior >= ds.num_behaviors() {
        return Err(DataError::UnknownBehavior(behavior));
    }
    if behavior == ds.target {
        return Err(DataError::TargetBehavior(behavior));
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let existing = &ds.edges[behavior];
    let requested = (ratio * existing.len() as f64).floor() as usize;
    let total = ds.num_users * ds.num_items;
    let available = total - existing.len();
    if requested > available {
        return Err(DataError::InsufficientPairs {
            requested,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed: HashSet<Edge> = existing.iter().copied().collect();
    let mut added: Vec<Edge> = if requested * 4 >= available {
        let mut pool: Vec<Edge> = (0..ds.num_users)
            .flat_map(|u| (0..ds.num_items).map(move |i| (u, i)))
            .filter(|e| !observed.contains(e))
            .collect();
        let (picked, _) = pool.partial_shuffle(&mut rng, requested);
        picked.to_vec()
    } else {
        let mut seen = HashSet::with_capacity(requested);
        let mut out = Vec::with_capacity(requested);
        while out.len() < requested {
            let e = (
                rng.random_range(0..ds.num_users),
                rng.random_range(0..ds.num_items),
            );
            if !observed.contains(&e) && seen.insert(e) {
                out.push(e);
            }
        }
        out
    };
    added.sort_unstable();

    let mut out = ds.clone();
    out.edges[behavior].extend_from_slice(&added);
    out.edges[behavior].sort_unstable();
    out.injected[behavior].extend_from_slice(&added);
    out.injected[behavior].sort_unstable();
    if let Some(labels) = out.noise_labels.as_mut() {
        labels[behavior].extend_from_slice(&added);
        labels[behavior].sort_unstable();
    }
    Ok((out, added))
}
