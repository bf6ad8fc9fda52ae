//! Small pre-norm decoder-only transformer with tied embeddings.
//!
//! Each block is `x + Attn(RMSNorm(x))` followed by `x + MLP(RMSNorm(x))`
//! with a SiLU-gated MLP. Attention is either plain causal or LRSA-masked.
//!
//! Two evaluation paths share the same tensor kernels: [`Model::forward`]
//! builds an autodiff graph over the whole sequence, while the row helpers
//! (`attn_inputs`, `attn_output`, ...) drive the cache-backed prefill and
//! decode in [`crate::attention::prefill`].

pub mod checkpoint;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::attention::{causal_mask, retentions_for_sequence, rope_apply, visibility_mask, AttnConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lagkv::{LagkvParams, RetentionSet};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use optim::{AdamW, LrSchedule, TrainConfig};
pub use train::{grad_check, train, GradCheckReport, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub attn: AttnConfig,
    pub mlp_hidden: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            layers: 2,
            attn: AttnConfig::default(),
            mlp_hidden: 256,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.attn.problems();
        if self.vocab == 0 {
            out.push("model.vocab must be >= 1".into());
        }
        if self.layers == 0 {
            out.push("model.layers must be >= 1".into());
        }
        if self.mlp_hidden == 0 {
            out.push("model.mlp_hidden must be >= 1".into());
        }
        if !(self.norm_eps > 0.0) {
            out.push("model.norm_eps must be > 0".into());
        }
        out
    }

    pub fn d_model(&self) -> usize {
        self.attn.d_model
    }
}

/// How attention is masked during a full-sequence forward.
#[derive(Clone, Copy, Debug)]
pub enum MaskMode<'a> {
    Vanilla,
    /// Retention sets are scored from the (detached) K/V of this very pass.
    Lrsa(&'a LagkvParams),
    /// Reuse retention sets from an earlier pass, e.g. during finite differences.
    Frozen(&'a LagkvParams, &'a RetentionPlan),
}

/// Retention sets used by one forward pass, `layers[l][c-1]` for chunk `c`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub layers: Vec<Vec<RetentionSet>>,
}

/// Per-KV-head keys (after rotation) and values of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T> {
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

const LAYER_FIELDS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Every trainable tensor. The output head is tied to `embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Tensors in canonical order: embedding, then per layer the block
    /// weights, then the final norm.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Names matching [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for i in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        out.push("final_norm".into());
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug)]
struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Parameter leaves of one graph, plus the flat list in canonical order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    embedding: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    pub all: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

fn init_matrix<T: Real>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    Tensor::new(
        vec![rows, cols],
        rng.normal_vec(rows * cols, std).into_iter().map(T::lit).collect(),
    )
    .expect("shape matches")
}

impl<T: Real> Model<T> {
    /// Random initialisation. Draws happen in f64, so f32 and f64 models
    /// built from one seed hold the same weights up to rounding.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let p = config.problems();
        if !p.is_empty() {
            return Err(Error::InvalidConfig(p));
        }
        let d = config.d_model();
        let a = &config.attn;
        let kv = a.kv_heads * a.head_dim;
        let fan_in = 1.0 / (d as f64).sqrt();
        let residual = fan_in / (2.0 * config.layers as f64).sqrt();
        let embedding = init_matrix(rng, config.vocab, d, fan_in);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: init_matrix(rng, d, a.heads * a.head_dim, fan_in),
                wk: init_matrix(rng, d, kv, fan_in),
                wv: init_matrix(rng, d, kv, fan_in),
                wo: init_matrix(rng, d, d, residual),
                mlp_norm: Tensor::full(&[d], T::one()),
                w_gate: init_matrix(rng, d, config.mlp_hidden, fan_in),
                w_up: init_matrix(rng, d, config.mlp_hidden, fan_in),
                w_down: init_matrix(rng, config.mlp_hidden, d, 1.0 / (config.mlp_hidden as f64).sqrt() / (2.0 * config.layers as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            config,
            params: ModelParams {
                embedding,
                layers,
                final_norm: Tensor::full(&[d], T::one()),
            },
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let cast_layer = |l: &LayerParams<T>| LayerParams {
            attn_norm: l.attn_norm.cast(),
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            mlp_norm: l.mlp_norm.cast(),
            w_gate: l.w_gate.cast(),
            w_up: l.w_up.cast(),
            w_down: l.w_down.cast(),
        };
        Model {
            config: self.config,
            params: ModelParams {
                embedding: self.params.embedding.cast(),
                layers: self.params.layers.iter().map(cast_layer).collect(),
                final_norm: self.params.final_norm.cast(),
            },
        }
    }

    fn eps(&self) -> T {
        T::lit(self.config.norm_eps)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> ParamVars {
        let mut all = Vec::new();
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = g.leaf(t.clone(), requires_grad);
            all.push(v);
            v
        };
        let embedding = leaf(g, &self.params.embedding);
        let layers = self
            .params
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(g, &l.attn_norm),
                wq: leaf(g, &l.wq),
                wk: leaf(g, &l.wk),
                wv: leaf(g, &l.wv),
                wo: leaf(g, &l.wo),
                mlp_norm: leaf(g, &l.mlp_norm),
                w_gate: leaf(g, &l.w_gate),
                w_up: leaf(g, &l.w_up),
                w_down: leaf(g, &l.w_down),
            })
            .collect();
        let final_norm = leaf(g, &self.params.final_norm);
        ParamVars {
            embedding,
            layers,
            final_norm,
            all,
        }
    }

    /// Builds the full-sequence forward graph and returns the logits node and
    /// the retention sets used for masking.
    pub fn build_forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        tokens: &[usize],
        mode: MaskMode<'_>,
    ) -> Result<(Var, RetentionPlan)> {
        self.build_traced(g, vars, tokens, mode, None)
    }

    /// Rotated keys and values of every layer, `[layer][kv_head]`, as seen by
    /// a forward pass in `mode`.
    pub fn layer_kv(&self, tokens: &[usize], mode: MaskMode<'_>) -> Result<Vec<LayerKv<T>>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let mut trace = Vec::new();
        self.build_traced(&mut g, &vars, tokens, mode, Some(&mut trace))?;
        Ok(trace)
    }

    fn build_traced(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        tokens: &[usize],
        mode: MaskMode<'_>,
        mut trace: Option<&mut Vec<LayerKv<T>>>,
    ) -> Result<(Var, RetentionPlan)> {
        self.check_tokens(tokens)?;
        let a = self.config.attn;
        let dh = a.head_dim;
        let n = tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let mut plan = RetentionPlan::default();
        let mut x = g.embedding(vars.embedding, tokens)?;
        for (li, lv) in vars.layers.iter().enumerate() {
            let h = g.rms_norm(x, lv.attn_norm, self.eps())?;
            let q = g.matmul(h, lv.wq)?;
            let k = g.matmul(h, lv.wk)?;
            let v = g.matmul(h, lv.wv)?;
            let mut k_heads = Vec::with_capacity(a.kv_heads);
            let mut v_heads = Vec::with_capacity(a.kv_heads);
            for j in 0..a.kv_heads {
                let kj = g.slice_cols(k, j * dh, dh)?;
                k_heads.push(g.rope(kj, &positions, a.rope_base)?);
                v_heads.push(g.slice_cols(v, j * dh, dh)?);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerKv {
                    keys: k_heads.iter().map(|&v| g.value(v).clone()).collect(),
                    values: v_heads.iter().map(|&v| g.value(v).clone()).collect(),
                });
            }
            let masks = match mode {
                MaskMode::Vanilla => {
                    let (m, _) = causal_mask::<T>(&positions, &positions)?;
                    vec![m; a.kv_heads]
                }
                MaskMode::Lrsa(params) | MaskMode::Frozen(params, _) => {
                    let sets = match mode {
                        MaskMode::Frozen(_, frozen) => frozen.layers.get(li).cloned().ok_or_else(|| {
                            Error::Sequencing(format!("frozen plan has no layer {li}"))
                        })?,
                        _ => {
                            // Scored on detached values: the mask is a constant of the graph.
                            let kd: Vec<Tensor<T>> = k_heads.iter().map(|&v| g.value(v).clone()).collect();
                            let vd: Vec<Tensor<T>> = v_heads.iter().map(|&v| g.value(v).clone()).collect();
                            retentions_for_sequence(&kd, &vd, params)?
                        }
                    };
                    let masks = (0..a.kv_heads)
                        .map(|j| {
                            visibility_mask::<T>(j, &positions, &positions, &sets, params, a.kv_heads).map(|(m, _)| m)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    plan.layers.push(sets);
                    masks
                }
            };
            let mut outs = Vec::with_capacity(a.heads);
            for i in 0..a.heads {
                let j = a.kv_head_of(i);
                let qi = g.slice_cols(q, i * dh, dh)?;
                let qi = g.rope(qi, &positions, a.rope_base)?;
                let kt = g.transpose(k_heads[j])?;
                let s = g.matmul(qi, kt)?;
                let s = g.scale(s, crate::attention::attention_scale(dh));
                let s = g.add_const(s, &masks[j])?;
                let w = g.softmax(s, 1)?;
                outs.push(g.matmul(w, v_heads[j])?);
            }
            let o = g.concat_cols(&outs)?;
            let o = g.matmul(o, lv.wo)?;
            x = g.add(x, o)?;
            x = self.build_mlp(g, lv, x)?;
        }
        let xf = g.rms_norm(x, vars.final_norm, self.eps())?;
        let et = g.transpose(vars.embedding)?;
        Ok((g.matmul(xf, et)?, plan))
    }

    fn build_mlp(&self, g: &mut Graph<T>, lv: &LayerVars, x: Var) -> Result<Var> {
        let h = g.rms_norm(x, lv.mlp_norm, self.eps())?;
        let gate = g.matmul(h, lv.w_gate)?;
        let gate = g.silu(gate);
        let up = g.matmul(h, lv.w_up)?;
        let u = g.mul(gate, up)?;
        let down = g.matmul(u, lv.w_down)?;
        g.add(x, down)
    }

    /// Full-sequence logits (`n × vocab`).
    pub fn forward(&self, tokens: &[usize], mode: MaskMode<'_>) -> Result<Tensor<T>> {
        Ok(self.forward_with_plan(tokens, mode)?.0)
    }

    pub fn forward_with_plan(&self, tokens: &[usize], mode: MaskMode<'_>) -> Result<(Tensor<T>, RetentionPlan)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let (logits, plan) = self.build_forward(&mut g, &vars, tokens, mode)?;
        Ok((g.value(logits).clone(), plan))
    }

    /// Mean cross-entropy and its gradient for every parameter (canonical order).
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[Option<usize>],
        mode: MaskMode<'_>,
    ) -> Result<(T, Vec<Tensor<T>>, RetentionPlan)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, true);
        let (logits, plan) = self.build_forward(&mut g, &vars, tokens, mode)?;
        let loss = g.cross_entropy(logits, targets)?;
        g.backward(loss)?;
        let grads = vars
            .all
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        Ok((g.value(loss).item(), grads, plan))
    }

    pub fn loss(&self, tokens: &[usize], targets: &[Option<usize>], mode: MaskMode<'_>) -> Result<T> {
        let logits = self.forward(tokens, mode)?;
        crate::autodiff::cross_entropy(&logits, targets)
    }

    // Row-level kernels for the cache-backed path. They replay the exact
    // kernel sequence of `build_forward`.

    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        self.params.embedding.select_rows(tokens)
    }

    /// Rotated per-head queries, rotated per-KV-head keys, and values.
    #[allow(clippy::type_complexity)]
    pub fn attn_inputs(
        &self,
        layer: usize,
        x: &Tensor<T>,
        positions: &[usize],
    ) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let lp = &self.params.layers[layer];
        let a = self.config.attn;
        let dh = a.head_dim;
        let h = x.rms_norm(&lp.attn_norm, self.eps())?;
        let q = h.matmul(&lp.wq)?;
        let k = h.matmul(&lp.wk)?;
        let v = h.matmul(&lp.wv)?;
        let mut ks = Vec::with_capacity(a.kv_heads);
        let mut vs = Vec::with_capacity(a.kv_heads);
        for j in 0..a.kv_heads {
            ks.push(rope_apply(&k.slice_cols(j * dh, dh)?, positions, a.rope_base)?);
            vs.push(v.slice_cols(j * dh, dh)?);
        }
        let qs = (0..a.heads)
            .map(|i| rope_apply(&q.slice_cols(i * dh, dh)?, positions, a.rope_base))
            .collect::<Result<Vec<_>>>()?;
        Ok((qs, ks, vs))
    }

    /// Output projection, residual add and MLP block.
    pub fn attn_output(&self, layer: usize, x: &Tensor<T>, head_outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let lp = &self.params.layers[layer];
        let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
        let o = Tensor::concat_cols(&refs)?.matmul(&lp.wo)?;
        let x = x.add(&o)?;
        let h = x.rms_norm(&lp.mlp_norm, self.eps())?;
        let gate = h.matmul(&lp.w_gate)?.silu();
        let up = h.matmul(&lp.w_up)?;
        let down = gate.mul(&up)?.matmul(&lp.w_down)?;
        x.add(&down)
    }

    pub fn final_hidden(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.rms_norm(&self.params.final_norm, self.eps())
    }

    pub fn logits(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        hidden.matmul(&self.params.embedding.transpose()?)
    }
}
