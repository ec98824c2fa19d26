//! Cross-attention DiT predicting the flow velocity.
//!
//! Latent tokens (one per grid cell) are projected to `d_model`, given
//! learned positions and an additive time embedding, then pass through `D`
//! pre-norm blocks of self-attention → cross-attention → MLP. Block `d`
//! cross-attends to its own fused condition `H_cond(t, d)`. A final
//! LayerNorm and a zero-initialized projection return to latent channels,
//! so a fresh model predicts a zero field.

pub mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder_sim::{derive_seed, SynthEncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{self, ParamId, ParamSet, Real, Tape, Tensor, Var, LN_EPS};
use crate::routing::{self, Gate, LayerBank, StrategyConfig, StrategyKind};

/// Epsilon of the per-head RMS normalization of queries and keys.
pub const QK_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Latent grid side `G`; the model sees `G·G` tokens.
    pub grid: usize,
    pub latent_channels: usize,
    pub qk_norm: bool,
    pub mlp_ratio: usize,
    /// Sinusoidal width of the trunk's own time embedding.
    pub time_embed_dim: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            d_model: 64,
            heads: 4,
            grid: 8,
            latent_channels: 1,
            qk_norm: true,
            mlp_ratio: 4,
            time_embed_dim: 128,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("backbone needs at least one block"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.grid == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("grid, latent_channels and mlp_ratio must be positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim must be even and positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn latent_len(&self) -> usize {
        self.tokens() * self.latent_channels
    }
}

/// Everything needed to rebuild a model's shapes and its encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: SynthEncoderConfig,
    pub backbone: DiTConfig,
    pub strategy: StrategyConfig,
}

impl ModelSpec {
    /// The gradient-check shapes: D=2, d_model=16, G=2, L=4, N=2.
    pub fn tiny(kind: StrategyKind) -> Self {
        Self {
            encoder: SynthEncoderConfig {
                layers: 4,
                tokens: 2,
                channels: 8,
                vocab: 2,
                layer_assignment: vec![1, 2],
                noise_layers: vec![0, 3],
                noise_scale: 1.0,
                data_sigma: 0.05,
                seed: 5,
            },
            backbone: DiTConfig {
                blocks: 2,
                d_model: 16,
                heads: 2,
                grid: 2,
                latent_channels: 1,
                qk_norm: true,
                mlp_ratio: 2,
                time_embed_dim: 2,
            },
            strategy: StrategyConfig {
                kind,
                gate_embed_dim: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        self.strategy.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    attn: [ParamId; 4],
    norm2: (ParamId, ParamId),
    xattn: [ParamId; 4],
    norm3: (ParamId, ParamId),
    mlp: [ParamId; 4],
}

#[derive(Clone, Debug, PartialEq)]
struct TrunkIds {
    in_w: ParamId,
    in_b: ParamId,
    pos: ParamId,
    time: [ParamId; 4],
    blocks: Vec<BlockIds>,
    out_w: ParamId,
    out_b: ParamId,
}

impl TrunkIds {
    fn bind<T: Real>(params: &ParamSet<T>, spec: &ModelSpec) -> Result<Self> {
        let b = &spec.backbone;
        let (dm, hid, c) = (b.d_model, b.d_model * b.mlp_ratio, spec.encoder.channels);
        let find = |name: String, shape: Vec<usize>| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::input(format!("missing parameter {name}")))?;
            if params.get(id).shape != shape {
                return Err(Error::input(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape
                )));
            }
            Ok(id)
        };
        let norm = |p: &str| -> Result<(ParamId, ParamId)> {
            Ok((find(format!("{p}.g"), vec![dm])?, find(format!("{p}.b"), vec![dm])?))
        };
        let blocks = (1..=b.blocks)
            .map(|d| {
                let p = format!("block.{d}");
                Ok(BlockIds {
                    norm1: norm(&format!("{p}.norm1"))?,
                    attn: [
                        find(format!("{p}.attn.wq"), vec![dm, dm])?,
                        find(format!("{p}.attn.wk"), vec![dm, dm])?,
                        find(format!("{p}.attn.wv"), vec![dm, dm])?,
                        find(format!("{p}.attn.wo"), vec![dm, dm])?,
                    ],
                    norm2: norm(&format!("{p}.norm2"))?,
                    xattn: [
                        find(format!("{p}.xattn.wq"), vec![dm, dm])?,
                        find(format!("{p}.xattn.wk"), vec![c, dm])?,
                        find(format!("{p}.xattn.wv"), vec![c, dm])?,
                        find(format!("{p}.xattn.wo"), vec![dm, dm])?,
                    ],
                    norm3: norm(&format!("{p}.norm3"))?,
                    mlp: [
                        find(format!("{p}.mlp.w1"), vec![dm, hid])?,
                        find(format!("{p}.mlp.b1"), vec![hid])?,
                        find(format!("{p}.mlp.w2"), vec![hid, dm])?,
                        find(format!("{p}.mlp.b2"), vec![dm])?,
                    ],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            in_w: find("in.w".into(), vec![b.latent_channels, dm])?,
            in_b: find("in.b".into(), vec![dm])?,
            pos: find("pos".into(), vec![b.tokens(), dm])?,
            time: [
                find("time.w1".into(), vec![b.time_embed_dim, dm])?,
                find("time.b1".into(), vec![dm])?,
                find("time.w2".into(), vec![dm, dm])?,
                find("time.b2".into(), vec![dm])?,
            ],
            blocks,
            out_w: find("out.w".into(), vec![dm, b.latent_channels])?,
            out_b: find("out.b".into(), vec![b.latent_channels])?,
        })
    }
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect()
}

fn register_trunk<T: Real>(params: &mut ParamSet<T>, spec: &ModelSpec, seed: u64) {
    let b = &spec.backbone;
    let (dm, hid, c, cl) = (
        b.d_model,
        b.d_model * b.mlp_ratio,
        spec.encoder.channels,
        b.latent_channels,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeros = |n: usize| vec![T::zero(); n];
    let ones = |n: usize| vec![T::one(); n];

    params.add("in.w", vec![cl, dm], glorot(&mut rng, cl, dm));
    params.add("in.b", vec![dm], zeros(dm));
    let pos = (0..b.tokens() * dm)
        .map(|_| T::lit(0.3 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    params.add("pos", vec![b.tokens(), dm], pos);
    params.add(
        "time.w1",
        vec![b.time_embed_dim, dm],
        glorot(&mut rng, b.time_embed_dim, dm),
    );
    params.add("time.b1", vec![dm], zeros(dm));
    params.add("time.w2", vec![dm, dm], glorot(&mut rng, dm, dm));
    params.add("time.b2", vec![dm], zeros(dm));
    for d in 1..=b.blocks {
        let p = format!("block.{d}");
        params.add(format!("{p}.norm1.g"), vec![dm], ones(dm));
        params.add(format!("{p}.norm1.b"), vec![dm], zeros(dm));
        for w in ["wq", "wk", "wv", "wo"] {
            params.add(format!("{p}.attn.{w}"), vec![dm, dm], glorot(&mut rng, dm, dm));
        }
        params.add(format!("{p}.norm2.g"), vec![dm], ones(dm));
        params.add(format!("{p}.norm2.b"), vec![dm], zeros(dm));
        params.add(format!("{p}.xattn.wq"), vec![dm, dm], glorot(&mut rng, dm, dm));
        params.add(format!("{p}.xattn.wk"), vec![c, dm], glorot(&mut rng, c, dm));
        params.add(format!("{p}.xattn.wv"), vec![c, dm], glorot(&mut rng, c, dm));
        params.add(format!("{p}.xattn.wo"), vec![dm, dm], glorot(&mut rng, dm, dm));
        params.add(format!("{p}.norm3.g"), vec![dm], ones(dm));
        params.add(format!("{p}.norm3.b"), vec![dm], zeros(dm));
        params.add(format!("{p}.mlp.w1"), vec![dm, hid], glorot(&mut rng, dm, hid));
        params.add(format!("{p}.mlp.b1"), vec![hid], zeros(hid));
        params.add(format!("{p}.mlp.w2"), vec![hid, dm], glorot(&mut rng, hid, dm));
        params.add(format!("{p}.mlp.b2"), vec![dm], zeros(dm));
    }
    params.add("out.w", vec![dm, cl], zeros(dm * cl));
    params.add("out.b", vec![cl], zeros(cl));
}

/// One batch of forward inputs. All slices are per-sample, in batch order.
pub struct ForwardBatch<'a, T> {
    /// `B · G² · C_lat` latent values.
    pub x_t: &'a [T],
    /// Trunk time per sample.
    pub t: &'a [f64],
    /// Gate time per sample (equal to `t` unless the shift is applied).
    pub gate_t: &'a [f64],
    pub banks: &'a [&'a LayerBank],
}

/// Backbone + gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: ParamSet<T>,
    trunk: TrunkIds,
    gate: Gate,
}

impl<T: Real> Model<T> {
    /// Fresh model. Trunk and gate draw from independent seed streams, so two
    /// strategies initialized from one seed share identical trunk weights.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        register_trunk(&mut params, &spec, derive_seed(seed, 1));
        let gate = Gate::register(
            &mut params,
            &spec.strategy,
            spec.encoder.layers,
            spec.backbone.blocks,
            derive_seed(seed, 2),
        )?;
        let trunk = TrunkIds::bind(&params, &spec)?;
        Ok(Self {
            spec,
            params,
            trunk,
            gate,
        })
    }

    /// Rebuilds a model around existing parameters, checking every shape.
    pub fn from_params(spec: ModelSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        let trunk = TrunkIds::bind(&params, &spec)?;
        let gate = Gate::bind(&params, &spec.strategy, spec.encoder.layers, spec.backbone.blocks)?;
        let expected = {
            let mut n = trunk_names(&spec);
            n.extend(gate.param_ids().iter().map(|&id| params.get(id).name.clone()));
            n.len()
        };
        if expected != params.len() {
            return Err(Error::input(format!(
                "parameter set has {} tensors, model expects {expected}",
                params.len()
            )));
        }
        Ok(Self {
            spec,
            params,
            trunk,
            gate,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &DiTConfig {
        &self.spec.backbone
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            gate: self.gate.clone(),
        }
    }

    fn check_bank(&self, bank: &LayerBank) -> Result<()> {
        let e = &self.spec.encoder;
        if (bank.layers(), bank.tokens(), bank.channels()) != (e.layers, e.tokens, e.channels) {
            return Err(Error::input(format!(
                "bank is {}x{}x{}, model expects {}x{}x{}",
                bank.layers(),
                bank.tokens(),
                bank.channels(),
                e.layers,
                e.tokens,
                e.channels
            )));
        }
        Ok(())
    }

    fn ln_affine(&self, tape: &mut Tape<T>, x: Var, ids: (ParamId, ParamId)) -> Var {
        let g = tape.param(&self.params, ids.0);
        let b = tape.param(&self.params, ids.1);
        let h = tape.layer_norm(x, LN_EPS);
        let h = tape.mul_row(h, g);
        tape.add_row(h, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        context: Var,
        w: &[ParamId; 4],
        q_len: usize,
        k_len: usize,
    ) -> Var {
        let cfg = &self.spec.backbone;
        let [wq, wk, wv, wo] = w.map(|id| tape.param(&self.params, id));
        let mut q = tape.matmul(queries, wq);
        let mut k = tape.matmul(context, wk);
        let v = tape.matmul(context, wv);
        if cfg.qk_norm {
            let hd = cfg.d_model / cfg.heads;
            q = tape.rms_segments(q, hd, QK_EPS);
            k = tape.rms_segments(k, hd, QK_EPS);
        }
        let a = tape.attention(q, k, v, cfg.heads, q_len, k_len);
        tape.matmul(a, wo)
    }

    /// One pre-norm block: self-attention, cross-attention to `cond`, MLP.
    ///
    /// `tokens` is `[(B·G²) × d_model]` and `cond` is `[(B·N) × C]`.
    pub fn block_forward(&self, tape: &mut Tape<T>, block: usize, tokens: Var, cond: Var) -> Result<Var> {
        let ids = self
            .trunk
            .blocks
            .get(block.wrapping_sub(1))
            .ok_or_else(|| Error::input(format!("block {block} out of range")))?;
        let seq = self.spec.backbone.tokens();
        let n = self.spec.encoder.tokens;

        let h = self.ln_affine(tape, tokens, ids.norm1);
        let a = self.attend(tape, h, h, &ids.attn, seq, seq);
        let x = tape.add(tokens, a);

        let h = self.ln_affine(tape, x, ids.norm2);
        let a = self.attend(tape, h, cond, &ids.xattn, seq, n);
        let x = tape.add(x, a);

        let h = self.ln_affine(tape, x, ids.norm3);
        let [w1, b1, w2, b2] = ids.mlp.map(|id| tape.param(&self.params, id));
        let m = tape.matmul(h, w1);
        let m = tape.add_row(m, b1);
        let m = tape.silu(m);
        let m = tape.matmul(m, w2);
        let m = tape.add_row(m, b2);
        Ok(tape.add(x, m))
    }

    /// Records the batched forward pass; returns the velocity `[(B·G²) × C_lat]`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, batch: &ForwardBatch<'_, T>) -> Result<Var> {
        let cfg = &self.spec.backbone;
        let enc = &self.spec.encoder;
        let b = batch.t.len();
        let seq = cfg.tokens();
        if b == 0 {
            return Err(Error::input("empty batch"));
        }
        if batch.gate_t.len() != b || batch.banks.len() != b || batch.x_t.len() != b * cfg.latent_len() {
            return Err(Error::input(format!(
                "batch of {b}: got {} gate times, {} banks, {} latent values (need {})",
                batch.gate_t.len(),
                batch.banks.len(),
                batch.x_t.len(),
                b * cfg.latent_len()
            )));
        }
        if batch.x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite latent input"));
        }
        let mut layers = Vec::with_capacity(b * enc.layers * enc.tokens * enc.channels);
        for bank in batch.banks {
            self.check_bank(bank)?;
            layers.extend(bank.normalized().into_iter().map(T::lit));
        }
        let layers = tape.constant(b * enc.layers, enc.tokens * enc.channels, layers);

        let weights = self.gate.weights_on_tape(tape, &self.params, batch.gate_t)?;
        let mut conds: Vec<Var> = Vec::with_capacity(weights.len());
        for (i, &w) in weights.iter().enumerate() {
            match weights[..i].iter().position(|&prev| prev == w) {
                Some(j) => conds.push(conds[j]),
                None => conds.push(routing::fuse_on_tape(tape, w, layers, enc.tokens, enc.channels)),
            }
        }

        let mut temb = Vec::with_capacity(b * cfg.time_embed_dim);
        for &t in batch.t {
            temb.extend(
                numerics::sinusoidal_embed(t, cfg.time_embed_dim)?
                    .into_iter()
                    .map(T::lit),
            );
        }
        let temb = tape.constant(b, cfg.time_embed_dim, temb);
        let [tw1, tb1, tw2, tb2] = self.trunk.time.map(|id| tape.param(&self.params, id));
        let e = tape.matmul(temb, tw1);
        let e = tape.add_row(e, tb1);
        let e = tape.silu(e);
        let e = tape.matmul(e, tw2);
        let e = tape.add_row(e, tb2);

        let x = tape.constant(b * seq, cfg.latent_channels, batch.x_t.to_vec());
        let in_w = tape.param(&self.params, self.trunk.in_w);
        let in_b = tape.param(&self.params, self.trunk.in_b);
        let h = tape.matmul(x, in_w);
        let h = tape.add_row(h, in_b);
        let pos = tape.param(&self.params, self.trunk.pos);
        let pos = tape.reshape(pos, 1, seq * cfg.d_model);
        let pos = tape.repeat_rows(pos, b);
        let pos = tape.reshape(pos, b * seq, cfg.d_model);
        let h = tape.add(h, pos);
        let mut h = tape.add_group_rows(h, e, seq);

        for (d, &cond) in (1..=cfg.blocks).zip(&conds) {
            h = self.block_forward(tape, d, h, cond)?;
            if tape.value(h).iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("non-finite activations after block {d}")));
            }
        }

        let h = tape.layer_norm(h, LN_EPS);
        let out_w = tape.param(&self.params, self.trunk.out_w);
        let out_b = tape.param(&self.params, self.trunk.out_b);
        let v = tape.matmul(h, out_w);
        Ok(tape.add_row(v, out_b))
    }

    /// Velocities for a batch, `B · G² · C_lat` values.
    pub fn forward_batch(&self, batch: &ForwardBatch<'_, T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let v = self.forward_on_tape(&mut tape, batch)?;
        Ok(tape.value(v).to_vec())
    }

    /// Single-sample velocity `v(x_t, t, c)`; `gate_t` overrides the gate input.
    pub fn forward(&self, x_t: &Tensor<T>, t: f64, bank: &LayerBank, gate_t: Option<f64>) -> Result<Tensor<T>> {
        let cfg = &self.spec.backbone;
        if x_t.len() != cfg.latent_len() {
            return Err(Error::input(format!(
                "latent has {} values, model expects {}",
                x_t.len(),
                cfg.latent_len()
            )));
        }
        let v = self.forward_batch(&ForwardBatch {
            x_t: x_t.data(),
            t: &[t],
            gate_t: &[gate_t.unwrap_or(t)],
            banks: &[bank],
        })?;
        Tensor::from_rows(cfg.tokens(), cfg.latent_channels, v)
    }
}

fn trunk_names(spec: &ModelSpec) -> Vec<String> {
    let mut p = ParamSet::<f32>::new();
    register_trunk(&mut p, spec, 0);
    p.iter().map(|(_, p)| p.name.clone()).collect()
}

/// AdamW moments and step counter, aligned with a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn zeros(params: &ParamSet<T>) -> Self {
        let z: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// The unit of checkpointing: model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Real> ModelState<T> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let model = Model::init(spec, seed)?;
        let optimizer = OptimizerState::zeros(model.params());
        Ok(Self { model, optimizer })
    }
}
