//! Pre-norm decoder-only transformer whose attention pattern and positional
//! indices come from the ICL scheme.

pub mod checkpoint;
pub mod probes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{assign_positions, build_layout, position_table_size, PeScheme, SequenceLayout, SlotRole};
use crate::masks::{scheme_token_mask, SchemeId, TokenMask};
use crate::numerics::{Graph, Tensor, Var};
use crate::tasks::TaskInstance;

/// Parameter tensors per decoder block.
const BLOCK_PARAMS: usize = 16;
/// Standard deviation of the position table at initialization.
pub const PE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scheme: SchemeId,
    pub pe: PeScheme,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Capacity of an absolute position table; other encodings ignore it.
    pub max_examples: usize,
}

impl ModelConfig {
    /// 3 layers, 4 heads, width 64.
    pub fn test_scale(scheme: SchemeId, pe: PeScheme, d: usize, max_examples: usize) -> Self {
        Self {
            scheme,
            pe,
            d,
            layers: 3,
            heads: 4,
            embed_dim: 64,
            max_examples,
        }
    }

    /// 12 layers, 8 heads, width 256.
    pub fn full_scale(scheme: SchemeId, pe: PeScheme, d: usize, max_examples: usize) -> Self {
        Self {
            layers: 12,
            heads: 8,
            embed_dim: 256,
            ..Self::test_scale(scheme, pe, d, max_examples)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "d, layers, heads and embed_dim must be positive: {self:?}"
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.pe == PeScheme::Absolute && self.max_examples == 0 {
            return Err(Error::Config("absolute positions need max_examples >= 1".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn position_rows(&self) -> usize {
        position_table_size(self.pe, self.scheme, self.max_examples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// `N(0, 1 / fan_in)` with `fan_in` the leading dimension.
    FanIn,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Names, shapes and initializers in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let e = cfg.embed_dim;
    let h = cfg.mlp_dim();
    let spec = |name: String, shape: Vec<usize>, init| ParamSpec { name, shape, init };
    let mut out = vec![
        spec("read_in.weight".into(), vec![cfg.d + 1, e], Init::FanIn),
        spec("read_in.bias".into(), vec![e], Init::Zeros),
    ];
    if cfg.pe != PeScheme::None {
        out.push(spec("pe.table".into(), vec![cfg.position_rows(), e], Init::Normal(PE_INIT_STD)));
    }
    for l in 0..cfg.layers {
        let p = |s: &str| format!("block{l}.{s}");
        out.extend([
            spec(p("ln1.gain"), vec![e], Init::Ones),
            spec(p("ln1.shift"), vec![e], Init::Zeros),
            spec(p("attn.wq"), vec![e, e], Init::FanIn),
            spec(p("attn.bq"), vec![e], Init::Zeros),
            spec(p("attn.wk"), vec![e, e], Init::FanIn),
            spec(p("attn.bk"), vec![e], Init::Zeros),
            spec(p("attn.wv"), vec![e, e], Init::FanIn),
            spec(p("attn.bv"), vec![e], Init::Zeros),
            spec(p("attn.proj"), vec![e, e], Init::Zeros),
            spec(p("attn.proj_bias"), vec![e], Init::Zeros),
            spec(p("ln2.gain"), vec![e], Init::Ones),
            spec(p("ln2.shift"), vec![e], Init::Zeros),
            spec(p("mlp.w1"), vec![e, h], Init::FanIn),
            spec(p("mlp.b1"), vec![h], Init::Zeros),
            spec(p("mlp.w2"), vec![h, e], Init::Zeros),
            spec(p("mlp.b2"), vec![e], Init::Zeros),
        ]);
    }
    out.extend([
        spec("ln_f.gain".into(), vec![e], Init::Ones),
        spec("ln_f.shift".into(), vec![e], Init::Zeros),
        spec("read_out.weight".into(), vec![e, 1], Init::FanIn),
        spec("read_out.bias".into(), vec![1], Init::Zeros),
    ]);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl ModelState {
    /// Training initialization: fan-in scaled weights, zero biases, and
    /// zero output projections in every residual branch.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::FanIn => normal_vec(&mut rng, numel, (1.0 / spec.shape[0] as f64).sqrt()),
                Init::Normal(std) => normal_vec(&mut rng, numel, std),
            };
            params.push(Tensor::new(spec.shape, data)?);
            names.push(spec.name);
        }
        Ok(Self { config, names, params })
    }

    /// Every entry random, including biases, norm parameters and the
    /// residual projections. Used by the structural property checks, where
    /// an exactly-zero branch would hide dependencies.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut state = Self::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for (name, p) in state.names.iter().zip(state.params.iter_mut()) {
            let shape = p.shape().to_vec();
            let data = p.data_mut();
            if name.ends_with("gain") {
                data.iter_mut().for_each(|v| *v = 1.0 + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            } else if shape.len() == 1 {
                data.iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            } else {
                let std = if name == "pe.table" { 1.0 } else { (1.0 / shape[0] as f64).sqrt() };
                data.iter_mut().for_each(|v| *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
        }
        Ok(state)
    }

    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", specs.len(), named.len())));
        }
        for (spec, (name, t)) in specs.iter().zip(&named) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "expected {} {:?}, got {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config, names, params })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Sets the read-out to zero so every prediction is 0.
    pub fn zero_readout(&mut self) {
        for name in ["read_out.weight", "read_out.bias"] {
            if let Some(t) = self.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Layout, mask and positions for `n` context examples.
    pub fn prepare(&self, n: usize) -> Result<Prepared> {
        let cfg = &self.config;
        let layout = build_layout(cfg.scheme, n);
        if cfg.pe == PeScheme::Absolute && n > cfg.max_examples {
            return Err(Error::PositionCapacity {
                tokens: layout.total_tokens,
                capacity: cfg.position_rows(),
            });
        }
        let mask = scheme_token_mask(cfg.scheme, &layout)?;
        let positions = assign_positions(cfg.pe, &layout).0;
        let readout_tokens = readout_tokens(&layout);
        Ok(Prepared {
            layout,
            mask,
            positions,
            readout_tokens,
        })
    }

    pub fn forward(&self, inst: &TaskInstance) -> Result<ForwardOutput> {
        let prep = self.prepare(inst.n())?;
        Ok(self.forward_batch(std::slice::from_ref(inst), &prep, false)?.remove(0))
    }

    /// Runs every instance (all with `prep.layout.n` examples) in one pass.
    pub fn forward_batch(&self, insts: &[TaskInstance], prep: &Prepared, capture_hidden: bool) -> Result<Vec<ForwardOutput>> {
        if insts.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let built = self.build(&mut g, insts, prep, capture_hidden)?;
        let len = prep.layout.total_tokens;
        let e = self.config.embed_dim;
        let preds = g.value(built.readout).data();
        let outputs = (0..insts.len())
            .map(|b| {
                let predictions: Vec<(usize, f64)> =
                    prep.readout_tokens.iter().map(|&t| (t, preds[b * len + t])).collect();
                let hidden = capture_hidden.then(|| {
                    built
                        .hidden
                        .iter()
                        .map(|&v| {
                            let rows = &g.value(v).data()[b * len * e..(b + 1) * len * e];
                            Tensor::new(vec![len, e], rows.to_vec()).expect("row block")
                        })
                        .collect()
                });
                ForwardOutput { predictions, hidden }
            })
            .collect();
        Ok(outputs)
    }

    /// Query predictions for a batch, evaluated in chunks of `chunk`.
    pub fn predict_queries(&self, insts: &[TaskInstance], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(insts.len());
        let mut start = 0;
        while start < insts.len() {
            let n = insts[start].n();
            let mut end = start + 1;
            while end < insts.len() && end - start < chunk.max(1) && insts[end].n() == n {
                end += 1;
            }
            let prep = self.prepare(n)?;
            for o in self.forward_batch(&insts[start..end], &prep, false)? {
                out.push(o.query());
            }
            start = end;
        }
        Ok(out)
    }

    /// Mean squared error over the prediction positions of `insts`, and
    /// the gradient for every parameter in storage order. With `guard`
    /// set, first checks that no prediction position can reach its label.
    pub fn loss_and_grads(
        &self,
        insts: &[TaskInstance],
        prep: &Prepared,
        query_only: bool,
        guard: bool,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let targets = training_targets(self.config.scheme, &prep.layout, query_only);
        if guard {
            check_non_leaking(&prep.mask, &prep.layout, &targets)?;
        }
        let len = prep.layout.total_tokens;
        let mut rows = Vec::with_capacity(insts.len() * targets.len());
        let mut wanted = Vec::with_capacity(rows.capacity());
        for (b, inst) in insts.iter().enumerate() {
            for &(token, target) in &targets {
                rows.push(b * len + token);
                wanted.push(match target {
                    Target::Example(i) => inst.y[i],
                    Target::Query => inst.y_t,
                });
            }
        }
        let mut g = Graph::new();
        let built = self.build(&mut g, insts, prep, false)?;
        let picked = g.gather_rows(built.readout, &rows)?;
        let loss = g.mse(picked, &wanted)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let out = built
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v, p.numel()))
            .collect();
        Ok((value, out))
    }

    fn build<'g>(
        &'g self,
        g: &mut Graph<'g>,
        insts: &[TaskInstance],
        prep: &'g Prepared,
        capture_hidden: bool,
    ) -> Result<Built> {
        let cfg = &self.config;
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p)).collect();
        let tokens = embed_batch(insts, &prep.layout, cfg.d)?;
        let x = g.leaf(tokens);
        let mut idx = 0;
        let mut next = || {
            idx += 1;
            params[idx - 1]
        };
        let (w_in, b_in) = (next(), next());
        let h0 = g.matmul(x, w_in)?;
        let mut h = g.add_row(h0, b_in)?;
        if cfg.pe != PeScheme::None {
            let table = next();
            let pos = prep.positions.as_ref().expect("positions for a position table");
            let rows: Vec<usize> = (0..insts.len()).flat_map(|_| pos.iter().copied()).collect();
            let pe = g.gather_rows(table, &rows)?;
            h = g.add(h, pe)?;
        }
        let mut hidden = Vec::new();
        if capture_hidden {
            hidden.push(h);
        }
        for _ in 0..cfg.layers {
            let p: Vec<Var> = (0..BLOCK_PARAMS).map(|_| next()).collect();
            let a = g.layer_norm(h, p[0], p[1])?;
            let q0 = g.matmul(a, p[2])?;
            let q = g.add_row(q0, p[3])?;
            let k0 = g.matmul(a, p[4])?;
            let k = g.add_row(k0, p[5])?;
            let v0 = g.matmul(a, p[6])?;
            let v = g.add_row(v0, p[7])?;
            let att = g.attention(q, k, v, cfg.heads, &prep.mask)?;
            let o0 = g.matmul(att, p[8])?;
            let o = g.add_row(o0, p[9])?;
            h = g.add(h, o)?;
            let m = g.layer_norm(h, p[10], p[11])?;
            let f0 = g.matmul(m, p[12])?;
            let f1 = g.add_row(f0, p[13])?;
            let f = g.gelu(f1);
            let f2 = g.matmul(f, p[14])?;
            let f3 = g.add_row(f2, p[15])?;
            h = g.add(h, f3)?;
            if capture_hidden {
                hidden.push(h);
            }
        }
        let (gain, shift, w_out, b_out) = (next(), next(), next(), next());
        let hf = g.layer_norm(h, gain, shift)?;
        let r0 = g.matmul(hf, w_out)?;
        let readout = g.add_row(r0, b_out)?;
        Ok(Built { params, readout, hidden })
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

struct Built {
    params: Vec<Var>,
    /// `[batch * L, 1]`.
    readout: Var,
    hidden: Vec<Var>,
}

/// Layout-dependent pieces shared by every forward pass at one length.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub layout: SequenceLayout,
    pub mask: TokenMask,
    pub positions: Option<Vec<usize>>,
    pub readout_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `(token, prediction)` for every x-carrying token and the query.
    pub predictions: Vec<(usize, f64)>,
    /// Per-layer `[L, E]` states; entry 0 is the embedding, entry `l` the
    /// output of block `l`.
    pub hidden: Option<Vec<Tensor>>,
}

impl ForwardOutput {
    pub fn query(&self) -> f64 {
        self.predictions.last().expect("query prediction").1
    }

    pub fn at(&self, token: usize) -> Option<f64> {
        self.predictions.iter().find(|(t, _)| *t == token).map(|(_, p)| *p)
    }
}

/// Tokens carrying an input: every context x-token and the query.
pub fn readout_tokens(layout: &SequenceLayout) -> Vec<usize> {
    let mut out: Vec<usize> = layout.slots.iter().map(|s| s.tokens[0]).collect();
    out.sort_unstable();
    out
}

/// `(x_i, 0)`, `(0, y_i)` per example and `(x_t, 0)` for the query.
pub fn embed_sequence(inst: &TaskInstance, layout: &SequenceLayout) -> Result<Tensor> {
    embed_batch(std::slice::from_ref(inst), layout, inst.d())
}

fn embed_batch(insts: &[TaskInstance], layout: &SequenceLayout, d: usize) -> Result<Tensor> {
    let width = d + 1;
    let len = layout.total_tokens;
    let mut data = vec![0.0; insts.len() * len * width];
    for (b, inst) in insts.iter().enumerate() {
        if inst.d() != d || inst.x.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("instance has d = {}, model expects {d}", inst.d())));
        }
        if inst.n() != layout.n {
            return Err(Error::Shape(format!("instance has n = {}, layout expects {}", inst.n(), layout.n)));
        }
        let base = b * len * width;
        for slot in &layout.slots {
            match slot.role {
                SlotRole::Context { example, .. } => {
                    let (xt, yt) = (slot.tokens[0], slot.tokens[1]);
                    data[base + xt * width..base + xt * width + d].copy_from_slice(&inst.x[example]);
                    data[base + yt * width + d] = inst.y[example];
                }
                SlotRole::Query => {
                    let t = slot.tokens[0];
                    data[base + t * width..base + t * width + d].copy_from_slice(&inst.x_t);
                }
            }
        }
    }
    Tensor::new(vec![insts.len() * len, width], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Example(usize),
    Query,
}

/// Tokens whose read-out is trained, with the label each one predicts.
pub fn prediction_positions(scheme: SchemeId, layout: &SequenceLayout) -> Vec<(usize, Target)> {
    let mut out = Vec::new();
    match scheme {
        SchemeId::Ar => out.extend((0..layout.n).map(|i| (layout.pair(i, 0).0, Target::Example(i)))),
        SchemeId::InvIcl => out.extend((0..layout.n).map(|i| (layout.pair(i, 1).0, Target::Example(i)))),
        SchemeId::Prefix | SchemeId::Boe => {}
    }
    out.push((layout.query_token(), Target::Query));
    out
}

pub fn training_targets(scheme: SchemeId, layout: &SequenceLayout, query_only: bool) -> Vec<(usize, Target)> {
    let mut t = prediction_positions(scheme, layout);
    if query_only {
        t.retain(|(_, target)| *target == Target::Query);
    }
    t
}

/// Tokens holding the label of `example` (one per copy).
pub fn label_tokens(layout: &SequenceLayout, example: usize) -> Vec<usize> {
    let copies = if layout.duplicated { 2 } else { 1 };
    (0..copies).map(|c| layout.pair(example, c).1).collect()
}

/// Fails if any prediction position can reach its own label through any
/// chain of attention edges.
pub fn check_non_leaking(mask: &TokenMask, layout: &SequenceLayout, targets: &[(usize, Target)]) -> Result<()> {
    for &(token, target) in targets {
        if let Target::Example(i) = target {
            let seen = mask.reachable_from(token);
            if let Some(&label) = label_tokens(layout, i).iter().find(|&&t| seen[t]) {
                return Err(Error::Leakage { token, label });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{sample_task, TaskConfig};

    fn tiny(scheme: SchemeId, pe: PeScheme) -> ModelConfig {
        ModelConfig {
            scheme,
            pe,
            d: 2,
            layers: 2,
            heads: 2,
            embed_dim: 8,
            max_examples: 4,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(SchemeId::Ar, PeScheme::None);
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embedding_packs_tokens() {
        let inst = TaskInstance::from_parts(vec![vec![1.0, 2.0]], vec![1.0, 1.0], 0.0, vec![0.0, 0.0]);
        let layout = build_layout(SchemeId::Ar, 1);
        let t = embed_sequence(&inst, &layout).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0, 0.0]);
        assert_eq!(t.row(1), &[0.0, 0.0, 3.0]);
        assert_eq!(t.row(2), &[0.0, 0.0, 0.0]);
        let dup = embed_sequence(&inst, &build_layout(SchemeId::InvIcl, 1)).unwrap();
        assert_eq!(dup.row(0), dup.row(2));
        assert_eq!(dup.row(1), dup.row(3));
    }

    #[test]
    fn embedding_rejects_wrong_dimension() {
        let inst = sample_task(&TaskConfig::linreg(3, 2, 0)).unwrap();
        assert!(embed_batch(&[inst], &build_layout(SchemeId::Ar, 2), 2).is_err());
    }

    #[test]
    fn zero_readout_predicts_zero() {
        let mut state = ModelState::random(tiny(SchemeId::InvIcl, PeScheme::Symmetric), 1).unwrap();
        state.zero_readout();
        let out = state.forward(&sample_task(&TaskConfig::linreg(2, 3, 1)).unwrap()).unwrap();
        assert!(out.predictions.iter().all(|&(_, p)| p == 0.0));
    }

    #[test]
    fn prediction_positions_per_scheme() {
        let ar = build_layout(SchemeId::Ar, 2);
        let toks: Vec<usize> = prediction_positions(SchemeId::Ar, &ar).iter().map(|p| p.0).collect();
        assert_eq!(toks, vec![0, 2, 4]);
        let inv = build_layout(SchemeId::InvIcl, 2);
        let p = prediction_positions(SchemeId::InvIcl, &inv);
        assert_eq!(p, vec![(4, Target::Example(0)), (6, Target::Example(1)), (8, Target::Query)]);
        let pre = build_layout(SchemeId::Prefix, 2);
        assert_eq!(prediction_positions(SchemeId::Prefix, &pre), vec![(4, Target::Query)]);
        assert_eq!(training_targets(SchemeId::InvIcl, &inv, true), vec![(8, Target::Query)]);
    }

    #[test]
    fn leakage_guard() {
        for scheme in [SchemeId::Ar, SchemeId::InvIcl] {
            let layout = build_layout(scheme, 4);
            let mask = scheme_token_mask(scheme, &layout).unwrap();
            assert!(check_non_leaking(&mask, &layout, &prediction_positions(scheme, &layout)).is_ok());
        }
        let layout = build_layout(SchemeId::Prefix, 3);
        let mask = scheme_token_mask(SchemeId::Prefix, &layout).unwrap();
        let dense = vec![(layout.pair(0, 0).0, Target::Example(0))];
        assert!(matches!(
            check_non_leaking(&mask, &layout, &dense),
            Err(Error::Leakage { .. })
        ));
    }

    #[test]
    fn absolute_capacity() {
        let state = ModelState::init(tiny(SchemeId::Ar, PeScheme::Absolute), 0).unwrap();
        assert!(state.prepare(4).is_ok());
        assert!(matches!(state.prepare(5), Err(Error::PositionCapacity { .. })));
        let sym = ModelState::init(tiny(SchemeId::Ar, PeScheme::Symmetric), 0).unwrap();
        assert!(sym.prepare(40).is_ok());
    }

    #[test]
    fn batched_forward_matches_single() {
        let state = ModelState::random(tiny(SchemeId::InvIcl, PeScheme::Symmetric), 3).unwrap();
        let insts: Vec<_> = (0..3)
            .map(|s| sample_task(&TaskConfig::linreg(2, 3, s)).unwrap())
            .collect();
        let prep = state.prepare(3).unwrap();
        let batch = state.forward_batch(&insts, &prep, true).unwrap();
        for (inst, out) in insts.iter().zip(&batch) {
            let single = state.forward_batch(std::slice::from_ref(inst), &prep, true).unwrap().remove(0);
            for ((_, a), (_, b)) in out.predictions.iter().zip(&single.predictions) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(out.hidden.as_ref().unwrap().len(), 3);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            layers: 1,
            ..tiny(SchemeId::InvIcl, PeScheme::Symmetric)
        };
        let state = ModelState::random(cfg, 5).unwrap();
        let insts: Vec<_> = (0..2)
            .map(|s| sample_task(&TaskConfig::linreg(2, 2, 10 + s)).unwrap())
            .collect();
        let prep = state.prepare(2).unwrap();
        let (_, grads) = state.loss_and_grads(&insts, &prep, false, true).unwrap();
        let h = 1e-5;
        for (pi, g) in grads.iter().enumerate() {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut plus = state.clone();
                plus.params_mut()[pi].data_mut()[idx] += h;
                let mut minus = state.clone();
                minus.params_mut()[pi].data_mut()[idx] -= h;
                let lp = plus.loss_and_grads(&insts, &prep, false, true).unwrap().0;
                let lm = minus.loss_and_grads(&insts, &prep, false, true).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(g[idx].abs()).max(1e-6);
                assert!(
                    (fd - g[idx]).abs() / denom < 1e-4,
                    "{} [{idx}]: fd {fd} vs {}",
                    state.names()[pi],
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn guard_does_not_change_gradients() {
        for scheme in [SchemeId::Ar, SchemeId::InvIcl] {
            let state = ModelState::random(tiny(scheme, PeScheme::Symmetric), 8).unwrap();
            let insts = vec![sample_task(&TaskConfig::linreg(2, 3, 4)).unwrap()];
            let prep = state.prepare(3).unwrap();
            let a = state.loss_and_grads(&insts, &prep, false, true).unwrap();
            let b = state.loss_and_grads(&insts, &prep, false, false).unwrap();
            assert_eq!(a, b);
        }
    }
}
