//! Time-conditioned transformer over spectrogram frames.
//!
//! Tokens are time frames; each token is the column of `F` bin magnitudes
//! at that frame. Grids enter and leave as `[batch, frames, bins]`.

mod config;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::checkpoint::{self, CheckpointHeader};
use crate::diff::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::flow::{gaussian_noise, interpolate, VarianceSchedule, VelocityField};
use crate::signal::Spectrogram;

pub use config::{ModelConfig, TimeInjection};

/// Flow time is multiplied by this before the sinusoidal embedding so that
/// the `[0, 1]` range spans many periods of the fastest frequency.
pub const TIME_SCALE: f64 = 1000.0;
const TIME_BASE: f64 = 10_000.0;

/// Interleaved `[sin(w_0 t), cos(w_0 t), sin(w_1 t), ...]` with
/// `t = TIME_SCALE * s` and `w_i = TIME_BASE^(-2i / dim)`.
pub fn time_embed(s: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("flow time {s} outside [0, 1]")));
    }
    let t = TIME_SCALE * s;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = TIME_BASE.powf(-2.0 * i as f64 / dim as f64);
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    Ok(out)
}

/// Stacks equally shaped spectrograms into a frame-major `[batch, frames, bins]`
/// tensor.
pub fn batch_tensor<'a, T: Real>(items: impl IntoIterator<Item = &'a Spectrogram>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut geom = None;
    let mut n = 0;
    for sp in items {
        let g = (sp.frames(), sp.bins());
        match geom {
            None => geom = Some(g),
            Some(prev) if prev != g => {
                return Err(Error::ShapeMismatch {
                    op: "batch_tensor",
                    lhs: vec![prev.0, prev.1],
                    rhs: vec![g.0, g.1],
                })
            }
            _ => {}
        }
        data.extend(sp.to_frame_major().into_iter().map(T::lit));
        n += 1;
    }
    let (frames, bins) = geom.ok_or_else(|| invalid("batch_tensor needs at least one item"))?;
    Tensor::new(vec![n, frames, bins], data)
}

/// Whether stochastic layers are active, and the seed their masks derive from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, seed: 0 };

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Post-block residual streams. Entry `l - 1` is the output of block `l`,
/// i.e. the input to block `l + 1`.
#[derive(Clone, Debug)]
pub struct HiddenStates<V> {
    pub taps: Vec<V>,
}

impl<V> HiddenStates<V> {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Tap for 1-based layer `l`.
    pub fn layer(&self, l: usize) -> Result<&V> {
        if l == 0 || l > self.taps.len() {
            return Err(invalid(format!("layer {l} outside 1..={}", self.taps.len())));
        }
        Ok(&self.taps[l - 1])
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    lift_w: ParamId,
    lift_b: ParamId,
    time: Option<(ParamId, ParamId)>,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Every parameter with its shape and initializer, in storage order.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, e, ff) = (c.d_model, c.freq_bins, c.time_embed_dim, c.d_ff);
    let gain = c.init_gain;
    let w = |fan_in: usize| Init::FanInUniform { fan_in, gain };
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let lift_in = match c.time_injection {
        TimeInjection::Concat => f + e,
        TimeInjection::Add => f,
    };
    push("lift.w".into(), vec![lift_in, d], w(lift_in));
    push("lift.b".into(), vec![d], Init::Zeros);
    if c.time_injection == TimeInjection::Add {
        push("time.w".into(), vec![e, d], w(e));
        push("time.b".into(), vec![d], Init::Zeros);
    }
    push("pos".into(), vec![c.max_frames, d], Init::UniformStd(c.pos_init_std));
    for l in 0..c.num_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        push(p("ln1.g"), vec![d], Init::Ones);
        push(p("ln1.b"), vec![d], Init::Zeros);
        for m in ["q", "k", "v", "o"] {
            push(p(&format!("attn.{m}.w")), vec![d, d], w(d));
            push(p(&format!("attn.{m}.b")), vec![d], Init::Zeros);
        }
        push(p("ln2.g"), vec![d], Init::Ones);
        push(p("ln2.b"), vec![d], Init::Zeros);
        push(p("ff1.w"), vec![d, ff], w(d));
        push(p("ff1.b"), vec![ff], Init::Zeros);
        push(p("ff2.w"), vec![ff, d], w(ff));
        push(p("ff2.b"), vec![d], Init::Zeros);
    }
    push("out.w".into(), vec![d, f], w(d));
    push("out.b".into(), vec![f], Init::Zeros);
    out
}

fn resolve<T: Real>(c: &ModelConfig, store: &ParamStore<T>) -> Result<Ids> {
    let expected = layout(c);
    if store.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape, _) in &expected {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let have = store.get(id).value.shape();
        if have != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {have:?}, expected {shape:?}"
            )));
        }
    }
    let id = |name: &str| store.find(name).expect("checked above");
    let blocks = (0..c.num_layers)
        .map(|l| {
            let b = |s: &str| id(&format!("blocks.{l}.{s}"));
            BlockIds {
                ln1_g: b("ln1.g"),
                ln1_b: b("ln1.b"),
                wq: b("attn.q.w"),
                bq: b("attn.q.b"),
                wk: b("attn.k.w"),
                bk: b("attn.k.b"),
                wv: b("attn.v.w"),
                bv: b("attn.v.b"),
                wo: b("attn.o.w"),
                bo: b("attn.o.b"),
                ln2_g: b("ln2.g"),
                ln2_b: b("ln2.b"),
                w1: b("ff1.w"),
                b1: b("ff1.b"),
                w2: b("ff2.w"),
                b2: b("ff2.b"),
            }
        })
        .collect();
    Ok(Ids {
        lift_w: id("lift.w"),
        lift_b: id("lift.b"),
        time: match c.time_injection {
            TimeInjection::Concat => None,
            TimeInjection::Add => Some((id("time.w"), id("time.b"))),
        },
        pos: id("pos"),
        blocks,
        out_w: id("out.w"),
        out_b: id("out.b"),
    })
}

/// Output of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    pub hidden: HiddenStates<Var>,
}

#[derive(Clone, Debug)]
pub struct FlowTransformer<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

impl<T: Real> FlowTransformer<T> {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            params.add(name, init.tensor(&shape, &mut rng))?;
        }
        let ids = resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let ids = resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Zeroes the final projection, so the initial output is exactly zero.
    pub fn zero_output_projection(&mut self) {
        for id in [self.ids.out_w, self.ids.out_b] {
            self.params.get_mut(id).value.fill(T::zero());
        }
    }

    /// Records the network on `graph` for `input` of shape `[B, T, F]` and
    /// one flow time per batch item.
    pub fn forward(&self, graph: &mut Graph<T>, input: Var, s: &[f64], mode: Mode) -> Result<Forward> {
        let c = &self.config;
        let shape = graph.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != c.freq_bins || shape[1] > c.max_frames {
            return Err(invalid(format!(
                "input shape {shape:?} incompatible with [batch, <= {}, {}]",
                c.max_frames, c.freq_bins
            )));
        }
        let (batch, frames) = (shape[0], shape[1]);
        if s.len() != batch {
            return Err(invalid(format!("{} flow times for a batch of {batch}", s.len())));
        }
        let e = c.time_embed_dim;
        let embeds = s.iter().map(|&sb| time_embed(sb, e)).collect::<Result<Vec<_>>>()?;
        let p = |g: &mut Graph<T>, id| g.param(&self.params, id);

        let mut h = match self.ids.time {
            None => {
                let mut te = Vec::with_capacity(batch * frames * e);
                for emb in &embeds {
                    for _ in 0..frames {
                        te.extend(emb.iter().map(|&x| T::lit(x)));
                    }
                }
                let te = graph.constant(Tensor::new(vec![batch, frames, e], te)?);
                let x = graph.concat(&[input, te], 2)?;
                let w = p(graph, self.ids.lift_w);
                let b = p(graph, self.ids.lift_b);
                let h = graph.matmul(x, w)?;
                graph.add(h, b)?
            }
            Some((tw, tb)) => {
                let w = p(graph, self.ids.lift_w);
                let b = p(graph, self.ids.lift_b);
                let h = graph.matmul(input, w)?;
                let h = graph.add(h, b)?;
                let te: Vec<T> = embeds.iter().flatten().map(|&x| T::lit(x)).collect();
                let te = graph.constant(Tensor::new(vec![batch, 1, e], te)?);
                let tw = p(graph, tw);
                let tb = p(graph, tb);
                let t = graph.matmul(te, tw)?;
                let t = graph.add(t, tb)?;
                graph.add(h, t)?
            }
        };
        let pos = p(graph, self.ids.pos);
        let pos = if frames < c.max_frames {
            graph.narrow(pos, 0, 0, frames)?
        } else {
            pos
        };
        h = graph.add(h, pos)?;

        let mut drop_counter = 0u64;
        let mut drop = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            drop_counter += 1;
            let seed = mode.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(drop_counter);
            g.dropout(x, c.dropout, mode.train, seed)
        };

        let (heads, dh) = (c.num_heads, c.head_dim());
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        let mut taps = Vec::with_capacity(c.num_layers);
        for b in &self.ids.blocks {
            let (g1, b1) = (p(graph, b.ln1_g), p(graph, b.ln1_b));
            let x = graph.layer_norm(h, g1, b1)?;
            let proj = |g: &mut Graph<T>, w: ParamId, bias: ParamId| -> Result<Var> {
                let (w, bias) = (g.param(&self.params, w), g.param(&self.params, bias));
                let y = g.matmul(x, w)?;
                let y = g.add(y, bias)?;
                g.reshape(y, &[batch, frames, heads, dh])
            };
            let q = proj(graph, b.wq, b.bq)?;
            let k = proj(graph, b.wk, b.bk)?;
            let v = proj(graph, b.wv, b.bv)?;
            let q = graph.permute(q, &[0, 2, 1, 3])?;
            let k = graph.permute(k, &[0, 2, 3, 1])?;
            let v = graph.permute(v, &[0, 2, 1, 3])?;
            let scores = graph.matmul(q, k)?;
            let scores = graph.scale(scores, inv_sqrt);
            let attn = graph.softmax(scores, 3)?;
            let ctx = graph.matmul(attn, v)?;
            let ctx = graph.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = graph.reshape(ctx, &[batch, frames, c.d_model])?;
            let (wo, bo) = (p(graph, b.wo), p(graph, b.bo));
            let a = graph.matmul(ctx, wo)?;
            let a = graph.add(a, bo)?;
            let a = drop(graph, a)?;
            h = graph.add(h, a)?;

            let (g2, b2) = (p(graph, b.ln2_g), p(graph, b.ln2_b));
            let x = graph.layer_norm(h, g2, b2)?;
            let (w1, bb1) = (p(graph, b.w1), p(graph, b.b1));
            let y = graph.matmul(x, w1)?;
            let y = graph.add(y, bb1)?;
            let y = graph.gelu(y);
            let (w2, bb2) = (p(graph, b.w2), p(graph, b.b2));
            let y = graph.matmul(y, w2)?;
            let y = graph.add(y, bb2)?;
            let y = drop(graph, y)?;
            h = graph.add(h, y)?;
            taps.push(h);
        }
        let (ow, ob) = (p(graph, self.ids.out_w), p(graph, self.ids.out_b));
        let out = graph.matmul(h, ow)?;
        let output = graph.add(out, ob)?;
        Ok(Forward {
            output,
            hidden: HiddenStates { taps },
        })
    }

    /// Eval-mode forward on concrete values.
    pub fn infer(&self, input: &Tensor<T>, s: &[f64]) -> Result<(Tensor<T>, HiddenStates<Tensor<T>>)> {
        let mut graph = Graph::new();
        let x = graph.constant(input.clone());
        let fwd = self.forward(&mut graph, x, s, Mode::EVAL)?;
        let taps = fwd.hidden.taps.iter().map(|&v| graph.value(v).clone()).collect();
        Ok((graph.value(fwd.output).clone(), HiddenStates { taps }))
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.config.num_layers {
            return Err(invalid(format!("layer {l} outside 1..={}", self.config.num_layers)));
        }
        Ok(())
    }

    /// Tap `l` for the clean spectrogram conditioned on flow time `s`, as a
    /// `[frames, d_model]` grid.
    pub fn extract_features(&self, phi: &Spectrogram, l: usize, s: f64) -> Result<Tensor<T>> {
        self.check_layer(l)?;
        let input = batch_tensor([phi])?;
        self.tap(&input, l, s)
    }

    /// Tap `l` for the interpolant `s * phi + sigma(s) * eps` with `eps` drawn
    /// from `noise_seed`.
    pub fn extract_features_noisy(
        &self,
        phi: &Spectrogram,
        l: usize,
        s: f64,
        schedule: VarianceSchedule,
        noise_seed: u64,
    ) -> Result<Tensor<T>> {
        self.check_layer(l)?;
        let clean = batch_tensor([phi])?;
        let eps = gaussian_noise(clean.shape(), &mut ChaCha8Rng::seed_from_u64(noise_seed));
        let g = interpolate(&clean, &eps, s, schedule)?;
        self.tap(&g, l, s)
    }

    fn tap(&self, input: &Tensor<T>, l: usize, s: f64) -> Result<Tensor<T>> {
        let (_, mut hidden) = self.infer(input, &[s])?;
        let tap = hidden.taps.swap_remove(l - 1);
        let shape = [tap.shape()[1], tap.shape()[2]];
        tap.reshaped(&shape)
    }

    /// Writes weights and architecture under `dir`.
    pub fn save(&self, dir: &Path, kind: &str) -> Result<CheckpointHeader> {
        checkpoint::save(dir, kind, &self.config, &self.params)
    }

    /// Loads a checkpoint, verifying the stored config hash. With `expected`
    /// given, the stored architecture must match it.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<(Self, CheckpointHeader)> {
        let (header, params) = checkpoint::load::<T>(dir)?;
        let config: ModelConfig = serde_json::from_value(header.config.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable model config: {e}")))?;
        let hash = checkpoint::config_hash(&config)?;
        if hash != header.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: header says {}, config hashes to {hash}",
                header.config_hash
            )));
        }
        if let Some(want) = expected {
            let want_hash = checkpoint::config_hash(want)?;
            if want_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint architecture {hash} does not match the requested {want_hash}"
                )));
            }
        }
        Ok((Self::from_params(config, params)?, header))
    }
}

/// Eval-mode velocity.
impl<T: Real> VelocityField<T> for FlowTransformer<T> {
    fn velocity(&self, graph: &mut Graph<T>, g: Var, s: &[f64]) -> Result<Var> {
        Ok(self.forward(graph, g, s, Mode::EVAL)?.output)
    }
}

/// Velocity with stochastic layers active, for training.
pub struct Training<'a, T: Real> {
    pub model: &'a FlowTransformer<T>,
    pub seed: u64,
}

impl<T: Real> VelocityField<T> for Training<'_, T> {
    fn velocity(&self, graph: &mut Graph<T>, g: Var, s: &[f64]) -> Result<Var> {
        Ok(self.model.forward(graph, g, s, Mode::train(self.seed))?.output)
    }
}
