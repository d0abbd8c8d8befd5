//! The network: shared embeddings, global/target/auxiliary LightGCN encoders,
//! per-behavior edge denoisers, readouts, fusion and scoring.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::config::{Ablation, GateInput, Hyperparams};
use crate::data::Dataset;
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::graph::{build_behavior_graph, build_global_graph, BipartiteGraph, GraphError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dataset has no auxiliary behavior")]
    NoAuxiliary,
    #[error("behavior {0} is the target, not auxiliary")]
    TargetBehavior(usize),
    #[error("concrete temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("gate noise for behavior {behavior} has {got} entries, expected {expected}")]
    NoiseLength {
        behavior: usize,
        got: usize,
        expected: usize,
    },
    #[error("parameters do not match the dataset: {0}")]
    Mismatch(String),
    #[error("node index {index} out of range for {len} nodes")]
    Index { index: usize, len: usize },
}

/// One-layer edge scorer `[e_a; e_b] -> sigmoid(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMlp {
    /// `2d x 1`
    pub weight: Tensor,
    /// `1 x 1`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `(M+N) x d`, users first.
    pub embeddings: Tensor,
    /// One per auxiliary behavior, in ascending behavior order.
    pub confidence: Vec<ConfidenceMlp>,
}

impl ModelParams {
    pub fn init(num_nodes: usize, num_aux: usize, dim: usize, std: f64, rng: &mut impl Rng) -> ModelParams {
        let embeddings = Tensor::randn(num_nodes, dim, std, rng);
        let confidence = (0..num_aux)
            .map(|_| ConfidenceMlp {
                weight: Tensor::randn(2 * dim, 1, std, rng),
                bias: Tensor::zeros(1, 1),
            })
            .collect();
        ModelParams {
            embeddings,
            confidence,
        }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    /// Flat view in a fixed order: embeddings, then weight/bias per MLP.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embeddings];
        for m in &self.confidence {
            out.push(&m.weight);
            out.push(&m.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embeddings];
        for m in &mut self.confidence {
            out.push(&mut m.weight);
            out.push(&mut m.bias);
        }
        out
    }

    pub fn from_tensors(mut list: Vec<Tensor>) -> Result<ModelParams, ModelError> {
        if list.is_empty() || list.len() % 2 == 0 {
            return Err(ModelError::Mismatch(format!("{} parameter tensors", list.len())));
        }
        let rest = list.split_off(1);
        let embeddings = list.pop().unwrap();
        let d = embeddings.cols;
        let mut confidence = Vec::new();
        let mut it = rest.into_iter();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            if weight.shape() != (2 * d, 1) || bias.shape() != (1, 1) {
                return Err(ModelError::Mismatch("confidence MLP shape".into()));
            }
            confidence.push(ConfidenceMlp { weight, bias });
        }
        Ok(ModelParams {
            embeddings,
            confidence,
        })
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum()
    }
}

/// Adam moments, aligned with [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ModelParams,
    pub adam: AdamState,
}

impl ModelState {
    pub fn init(ds: &Dataset, hyper: &Hyperparams, rng: &mut impl Rng) -> ModelState {
        let params = ModelParams::init(
            ds.num_nodes(),
            ds.auxiliary_behaviors().len(),
            hyper.dim,
            hyper.init_std,
            rng,
        );
        let adam = AdamState::new(&params);
        ModelState { params, adam }
    }
}

/// Graphs derived from one dataset's training edges.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub num_users: usize,
    pub num_items: usize,
    pub global: Arc<BipartiteGraph>,
    pub target: Arc<BipartiteGraph>,
    pub aux_behaviors: Vec<usize>,
    pub auxiliary: Vec<Arc<BipartiteGraph>>,
}

impl GraphSet {
    pub fn build(ds: &Dataset) -> Result<GraphSet, ModelError> {
        let aux_behaviors = ds.auxiliary_behaviors();
        if aux_behaviors.is_empty() {
            return Err(ModelError::NoAuxiliary);
        }
        let auxiliary = aux_behaviors
            .iter()
            .map(|&b| build_behavior_graph(ds, b).map(Arc::new))
            .collect::<Result<_, _>>()?;
        Ok(GraphSet {
            num_users: ds.num_users,
            num_items: ds.num_items,
            global: Arc::new(build_global_graph(ds)),
            target: Arc::new(build_behavior_graph(ds, ds.target)?),
            aux_behaviors,
            auxiliary,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Position of a behavior among the auxiliary graphs.
    pub fn aux_position(&self, behavior: usize) -> Result<usize, ModelError> {
        self.aux_behaviors
            .iter()
            .position(|&b| b == behavior)
            .ok_or(ModelError::TargetBehavior(behavior))
    }
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embeddings: Var,
    pub confidence: Vec<(Var, Var)>,
}

impl ParamVars {
    /// `trainable = false` registers constants, for evaluation passes.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embeddings = reg(&params.embeddings);
        let confidence = params
            .confidence
            .iter()
            .map(|m| (reg(&m.weight), reg(&m.bias)))
            .collect();
        ParamVars {
            embeddings,
            confidence,
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embeddings];
        for &(w, b) in &self.confidence {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Gate sampling mode. `Train` carries `logit(δ)` per edge for every
/// auxiliary behavior.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    Train(&'a [Vec<f64>]),
    Eval,
}

/// `logit(δ)` for `δ ~ U(0,1)`, one per edge.
pub fn draw_gate_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let d: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            d.ln() - (1.0 - d).ln()
        })
        .collect()
}

/// Confidence of every edge of one auxiliary behavior.
#[derive(Clone, Copy, Debug)]
pub struct EdgeConfidence {
    /// Pre-sigmoid activation.
    pub pre: Var,
    /// `sigmoid(pre)`, in (0,1).
    pub w: Var,
}

#[derive(Clone, Debug)]
pub struct AuxForward {
    pub behavior: usize,
    pub confidence: Option<EdgeConfidence>,
    pub gates: Option<Var>,
    /// Stack on the gated graph, `L_M` layers counting layer 0.
    pub gated: Vec<Var>,
    /// Stack on the raw graph; equals `gated` when gating is disabled.
    pub ungated: Option<Vec<Var>>,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Layer-0 input of the domain encoders.
    pub base: Var,
    pub target_stack: Vec<Var>,
    pub z_tgt: Var,
    pub aux: Vec<AuxForward>,
    pub z_aux: Var,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub graphs: GraphSet,
    pub hyper: Hyperparams,
    pub ablation: Ablation,
}

impl Model {
    pub fn new(ds: &Dataset, hyper: &Hyperparams, ablation: Ablation) -> Result<Model, ModelError> {
        Ok(Model {
            graphs: GraphSet::build(ds)?,
            hyper: hyper.clone(),
            ablation,
        })
    }

    /// Mean of layers `0..=L_G` on the union graph.
    pub fn encode_global(&self, tape: &mut Tape, e0: Var) -> Result<Var, ModelError> {
        let mut layers = vec![e0];
        for _ in 0..self.hyper.global_layers {
            let next = tape.propagate(&self.graphs.global, *layers.last().unwrap(), None)?;
            layers.push(next);
        }
        Ok(tape.mean_of(&layers)?)
    }

    fn stack(
        &self,
        tape: &mut Tape,
        graph: &Arc<BipartiteGraph>,
        base: Var,
        gates: Option<Var>,
    ) -> Result<Vec<Var>, ModelError> {
        let mut layers = vec![base];
        for _ in 1..self.hyper.domain_layers {
            let next = tape.propagate(graph, *layers.last().unwrap(), gates)?;
            layers.push(next);
        }
        Ok(layers)
    }

    pub fn encode_target(&self, tape: &mut Tape, base: Var) -> Result<Vec<Var>, ModelError> {
        let g = self.graphs.target.clone();
        self.stack(tape, &g, base, None)
    }

    pub fn readout(&self, tape: &mut Tape, stack: &[Var]) -> Result<Var, ModelError> {
        Ok(tape.mean_of(stack)?)
    }

    /// Edge confidence `w = sigmoid(W [z_a; z_b] + b)` for auxiliary behavior
    /// `behavior`, read from target-domain readouts.
    pub fn edge_confidence(
        &self,
        tape: &mut Tape,
        behavior: usize,
        z_tgt: Var,
        mlp: (Var, Var),
    ) -> Result<EdgeConfidence, ModelError> {
        let k = self.graphs.aux_position(behavior)?;
        let g = &self.graphs.auxiliary[k];
        let m = self.graphs.num_users;
        let users: Vec<usize> = g.edges.iter().map(|&(u, _)| u).collect();
        let items: Vec<usize> = g.edges.iter().map(|&(_, i)| m + i).collect();
        let a = tape.gather_rows(z_tgt, &users)?;
        let b = tape.gather_rows(z_tgt, &items)?;
        let x = tape.concat_cols(a, b)?;
        let lin = tape.matmul(x, mlp.0)?;
        let pre = tape.add_row(lin, mlp.1)?;
        let w = tape.sigmoid(pre);
        Ok(EdgeConfidence { pre, w })
    }

    /// Concrete gates: `sigmoid((logit(δ) + input)/t)` in training,
    /// `sigmoid(input/t)` in evaluation, where `input` is `w` or its logit
    /// depending on `gate_input`.
    pub fn sample_gates(
        &self,
        tape: &mut Tape,
        conf: EdgeConfidence,
        noise: Option<&[f64]>,
    ) -> Result<Var, ModelError> {
        let t = self.hyper.concrete_temp;
        if !(t > 0.0) {
            return Err(ModelError::Temperature(t));
        }
        let input = match self.hyper.gate_input {
            GateInput::Prob => conf.w,
            GateInput::Logit => conf.pre,
        };
        let shifted = match noise {
            Some(n) => {
                let len = tape.shape(input).0;
                if n.len() != len {
                    return Err(ModelError::NoiseLength {
                        behavior: 0,
                        got: n.len(),
                        expected: len,
                    });
                }
                let c = tape.constant(Tensor::column(n.to_vec()));
                tape.add(input, c)?
            }
            None => input,
        };
        let scaled = tape.scale(shifted, 1.0 / t);
        Ok(tape.sigmoid(scaled))
    }

    /// Gated and ungated stacks of one auxiliary behavior. The ungated stack
    /// is built only when `want_ungated`.
    pub fn encode_auxiliary(
        &self,
        tape: &mut Tape,
        behavior: usize,
        gates: Option<Var>,
        base: Var,
        want_ungated: bool,
    ) -> Result<(Vec<Var>, Option<Vec<Var>>), ModelError> {
        let k = self.graphs.aux_position(behavior)?;
        let g = self.graphs.auxiliary[k].clone();
        let gated = self.stack(tape, &g, base, gates)?;
        let ungated = match (gates, want_ungated) {
            (_, false) => None,
            (None, true) => Some(gated.clone()),
            (Some(_), true) => Some(self.stack(tape, &g, base, None)?),
        };
        Ok((gated, ungated))
    }

    pub fn aggregate_auxiliary(&self, tape: &mut Tape, zs: &[Var]) -> Result<Var, ModelError> {
        if zs.is_empty() {
            return Err(ModelError::NoAuxiliary);
        }
        Ok(tape.mean_of(zs)?)
    }

    /// `e = (z_tgt + z_aux) / 2`.
    pub fn fuse(&self, tape: &mut Tape, z_tgt: Var, z_aux: Var) -> Result<Var, ModelError> {
        let s = tape.add(z_tgt, z_aux)?;
        Ok(tape.scale(s, 0.5))
    }

    /// `e_u · e_i` per (user, item) pair, `n x 1`.
    pub fn score(&self, tape: &mut Tape, fused: Var, users: &[usize], items: &[usize]) -> Result<Var, ModelError> {
        let m = self.graphs.num_users;
        let nodes = self.graphs.num_nodes();
        for &u in users {
            if u >= m {
                return Err(ModelError::Index { index: u, len: m });
            }
        }
        let rows: Vec<usize> = items.iter().map(|&i| m + i).collect();
        if let Some(&r) = rows.iter().find(|&&r| r >= nodes) {
            return Err(ModelError::Index { index: r - m, len: self.graphs.num_items });
        }
        let eu = tape.gather_rows(fused, users)?;
        let ei = tape.gather_rows(fused, &rows)?;
        Ok(tape.row_dot(eu, ei)?)
    }

    /// Whole forward pass up to fused embeddings.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        mode: GateMode<'_>,
        want_ungated: bool,
    ) -> Result<Forward, ModelError> {
        if tape.shape(vars.embeddings).0 != self.graphs.num_nodes() {
            return Err(ModelError::Mismatch("embedding rows".into()));
        }
        if vars.confidence.len() != self.graphs.auxiliary.len() {
            return Err(ModelError::Mismatch("confidence MLP count".into()));
        }
        let base = if self.ablation.uses_global() {
            self.encode_global(tape, vars.embeddings)?
        } else {
            vars.embeddings
        };
        let target_stack = self.encode_target(tape, base)?;
        let z_tgt = self.readout(tape, &target_stack)?;
        let mut aux = Vec::with_capacity(self.graphs.auxiliary.len());
        for (k, &behavior) in self.graphs.aux_behaviors.clone().iter().enumerate() {
            let (confidence, gates) = if self.ablation.uses_gates() {
                let conf = self.edge_confidence(tape, behavior, z_tgt, vars.confidence[k])?;
                let noise = match mode {
                    GateMode::Train(all) => {
                        let n = all.get(k).ok_or(ModelError::NoiseLength {
                            behavior,
                            got: 0,
                            expected: self.graphs.auxiliary[k].num_edges(),
                        })?;
                        Some(n.as_slice())
                    }
                    GateMode::Eval => None,
                };
                let gates = self.sample_gates(tape, conf, noise).map_err(|e| match e {
                    ModelError::NoiseLength { got, expected, .. } => ModelError::NoiseLength {
                        behavior,
                        got,
                        expected,
                    },
                    other => other,
                })?;
                (Some(conf), Some(gates))
            } else {
                (None, None)
            };
            let (gated, ungated) = self.encode_auxiliary(tape, behavior, gates, base, want_ungated)?;
            let z = self.readout(tape, &gated)?;
            aux.push(AuxForward {
                behavior,
                confidence,
                gates,
                gated,
                ungated,
                z,
            });
        }
        let zs: Vec<Var> = aux.iter().map(|a| a.z).collect();
        let z_aux = self.aggregate_auxiliary(tape, &zs)?;
        let fused = self.fuse(tape, z_tgt, z_aux)?;
        Ok(Forward {
            base,
            target_stack,
            z_tgt,
            aux,
            z_aux,
            fused,
        })
    }

    /// Fresh training-mode gate noise for every auxiliary graph.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        self.graphs
            .auxiliary
            .iter()
            .map(|g| draw_gate_noise(g.num_edges(), rng))
            .collect()
    }

    /// Deterministic (evaluation-mode) embeddings.
    pub fn embed(&self, params: &ModelParams) -> Result<Embeddings, ModelError> {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, params, false);
        let f = self.forward(&mut tape, &vars, GateMode::Eval, false)?;
        let gates = f
            .aux
            .iter()
            .map(|a| AuxGates {
                behavior: a.behavior,
                w: a.confidence.map(|c| tape.value(c.w).data.clone()),
                gate: a.gates.map(|g| tape.value(g).data.clone()),
            })
            .collect();
        Ok(Embeddings {
            num_users: self.graphs.num_users,
            z_tgt: tape.value(f.z_tgt).clone(),
            z_aux: tape.value(f.z_aux).clone(),
            fused: tape.value(f.fused).clone(),
            gates,
        })
    }
}

/// Evaluation-mode edge values of one auxiliary behavior; `None` when
/// gating is ablated.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxGates {
    pub behavior: usize,
    pub w: Option<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub num_users: usize,
    pub z_tgt: Tensor,
    pub z_aux: Tensor,
    pub fused: Tensor,
    pub gates: Vec<AuxGates>,
}

impl Embeddings {
    pub fn user(&self, u: usize) -> &[f64] {
        self.fused.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.fused.row(self.num_users + i)
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        self.user(u).iter().zip(self.item(i)).map(|(a, b)| a * b).sum()
    }
}
