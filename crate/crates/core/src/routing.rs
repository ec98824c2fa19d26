//! Normalized convex fusion of encoder layers and the six gating strategies.
//!
//! Every strategy reduces to a weight vector on the simplex over encoder
//! layers for each `(t, block)` pair. The fused condition is the weighted
//! sum of per-token LayerNorm'd layers, so it stays inside the convex hull
//! of the normalized layer features.
//!
//! | kind          | logits for `(t, d)`    |
//! |---------------|------------------------|
//! | `penultimate` | one-hot at `L−2`       |
//! | `uniform`     | `1/L` everywhere       |
//! | `static`      | `β`                    |
//! | `time_wise`   | `g(φ(t))`              |
//! | `depth_wise`  | `β_d`                  |
//! | `joint`       | `g_d(φ(t))`            |
//!
//! Blocks are numbered from 1.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, kernels, ParamId, ParamSet, Real, Tape, Tensor, Var, LN_EPS};

/// Hidden states of every encoder layer for one prompt, stored layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBank {
    layers: usize,
    tokens: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LayerBank {
    pub fn new(layers: usize, tokens: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if layers < 2 {
            return Err(Error::input("a layer bank needs at least two layers"));
        }
        if data.len() != layers * tokens * channels {
            return Err(Error::input(format!(
                "bank of {layers}x{tokens}x{channels} needs {} values, got {}",
                layers * tokens * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("layer bank contains non-finite values"));
        }
        Ok(Self {
            layers,
            tokens,
            channels,
            data,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let w = self.tokens * self.channels;
        &self.data[l * w..(l + 1) * w]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let w = self.tokens * self.channels;
        &mut self.data[l * w..(l + 1) * w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-token LayerNorm of every layer, same layout as [`Self::data`].
    pub fn normalized(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        kernels::layer_norm_rows(
            &self.data,
            self.layers * self.tokens,
            self.channels,
            LN_EPS,
            &mut out,
            None,
        );
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Penultimate,
    Uniform,
    Static,
    TimeWise,
    DepthWise,
    Joint,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Penultimate,
        StrategyKind::Uniform,
        StrategyKind::Static,
        StrategyKind::TimeWise,
        StrategyKind::DepthWise,
        StrategyKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Penultimate => "penultimate",
            StrategyKind::Uniform => "uniform",
            StrategyKind::Static => "static",
            StrategyKind::TimeWise => "time_wise",
            StrategyKind::DepthWise => "depth_wise",
            StrategyKind::Joint => "joint",
        }
    }

    /// Whether the weights are produced by a softmax over learnable logits.
    pub fn is_learned(self) -> bool {
        !matches!(self, StrategyKind::Penultimate | StrategyKind::Uniform)
    }

    pub fn depends_on_time(self) -> bool {
        matches!(self, StrategyKind::TimeWise | StrategyKind::Joint)
    }

    pub fn depends_on_depth(self) -> bool {
        matches!(self, StrategyKind::DepthWise | StrategyKind::Joint)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    /// Accepts the snake_case names and the short labels `b1`..`b3`, `s1`..`s3`.
    fn from_str(s: &str) -> Result<Self> {
        let k = match s.to_ascii_lowercase().as_str() {
            "penultimate" | "b1" => StrategyKind::Penultimate,
            "uniform" | "b2" => StrategyKind::Uniform,
            "static" | "b3" => StrategyKind::Static,
            "time_wise" | "timewise" | "s1" => StrategyKind::TimeWise,
            "depth_wise" | "depthwise" | "s2" => StrategyKind::DepthWise,
            "joint" | "s3" => StrategyKind::Joint,
            other => return Err(Error::input(format!("unknown strategy {other:?}"))),
        };
        Ok(k)
    }
}

/// The strategy block of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Sinusoidal embedding width fed to the time-conditioned gates.
    pub gate_embed_dim: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::DepthWise,
            gate_embed_dim: 128,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind.depends_on_time() && (self.gate_embed_dim == 0 || !self.gate_embed_dim.is_multiple_of(2)) {
            return Err(Error::config(format!(
                "gate_embed_dim must be even and positive, got {}",
                self.gate_embed_dim
            )));
        }
        Ok(())
    }
}

/// Raw fusion logits for one `(t, block)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLogits(pub Vec<f64>);

/// A point on the simplex over encoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights(pub Vec<f64>);

impl FusionWeights {
    pub fn alpha(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedCondition {
    /// `[N × C]`.
    pub h_cond: Tensor<f64>,
    pub t: f64,
    pub block: usize,
    pub kind: StrategyKind,
}

/// Parameters of one time-conditioned fusion gate: `W2·SiLU(W1·φ(t) + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TcfgParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum GateState {
    Fixed,
    Static(ParamId),
    DepthWise(Vec<ParamId>),
    TimeWise(TcfgParams),
    Joint(Vec<TcfgParams>),
}

/// A strategy bound to its parameters inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    kind: StrategyKind,
    layers: usize,
    blocks: usize,
    embed_dim: usize,
    state: GateState,
}

fn tcfg_names(prefix: &str) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|s| format!("{prefix}.{s}"))
}

impl Gate {
    /// Registers freshly initialized gate parameters.
    ///
    /// Logit tables start at zero and every TCFG output layer is zero, so all
    /// learned strategies begin at exactly uniform weights. The TCFG input
    /// layer uses a seeded Glorot-uniform draw.
    pub fn register<T: Real>(
        params: &mut ParamSet<T>,
        cfg: &StrategyConfig,
        layers: usize,
        blocks: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if layers < 2 || blocks == 0 {
            return Err(Error::config("a gate needs at least two layers and one block"));
        }
        let dt = cfg.gate_embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tcfg = |params: &mut ParamSet<T>, prefix: &str| {
            let hidden = 4 * dt;
            let bound = (6.0 / (dt + hidden) as f64).sqrt();
            let w1 = (0..dt * hidden)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect();
            let [n1, nb1, n2, nb2] = tcfg_names(prefix);
            TcfgParams {
                w1: params.add(n1, vec![dt, hidden], w1),
                b1: params.add(nb1, vec![hidden], vec![T::zero(); hidden]),
                w2: params.add(n2, vec![hidden, layers], vec![T::zero(); hidden * layers]),
                b2: params.add(nb2, vec![layers], vec![T::zero(); layers]),
            }
        };
        let state = match cfg.kind {
            StrategyKind::Penultimate | StrategyKind::Uniform => GateState::Fixed,
            StrategyKind::Static => GateState::Static(params.add("gate.beta", vec![layers], vec![T::zero(); layers])),
            StrategyKind::DepthWise => GateState::DepthWise(
                (1..=blocks)
                    .map(|d| params.add(format!("gate.beta.{d}"), vec![layers], vec![T::zero(); layers]))
                    .collect(),
            ),
            StrategyKind::TimeWise => GateState::TimeWise(tcfg(params, "gate.tcfg")),
            StrategyKind::Joint => {
                GateState::Joint((1..=blocks).map(|d| tcfg(params, &format!("gate.tcfg.{d}"))).collect())
            }
        };
        Ok(Self {
            kind: cfg.kind,
            layers,
            blocks,
            embed_dim: dt,
            state,
        })
    }

    /// Finds existing gate parameters by name, checking their shapes.
    pub fn bind<T: Real>(params: &ParamSet<T>, cfg: &StrategyConfig, layers: usize, blocks: usize) -> Result<Self> {
        cfg.validate()?;
        let dt = cfg.gate_embed_dim;
        let find = |name: &str, shape: Vec<usize>| -> Result<ParamId> {
            let id = params
                .find(name)
                .ok_or_else(|| Error::input(format!("missing gate parameter {name}")))?;
            if params.get(id).shape != shape {
                return Err(Error::input(format!(
                    "gate parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape
                )));
            }
            Ok(id)
        };
        let tcfg = |prefix: &str| -> Result<TcfgParams> {
            let [n1, nb1, n2, nb2] = tcfg_names(prefix);
            Ok(TcfgParams {
                w1: find(&n1, vec![dt, 4 * dt])?,
                b1: find(&nb1, vec![4 * dt])?,
                w2: find(&n2, vec![4 * dt, layers])?,
                b2: find(&nb2, vec![layers])?,
            })
        };
        let state = match cfg.kind {
            StrategyKind::Penultimate | StrategyKind::Uniform => GateState::Fixed,
            StrategyKind::Static => GateState::Static(find("gate.beta", vec![layers])?),
            StrategyKind::DepthWise => GateState::DepthWise(
                (1..=blocks)
                    .map(|d| find(&format!("gate.beta.{d}"), vec![layers]))
                    .collect::<Result<_>>()?,
            ),
            StrategyKind::TimeWise => GateState::TimeWise(tcfg("gate.tcfg")?),
            StrategyKind::Joint => GateState::Joint(
                (1..=blocks)
                    .map(|d| tcfg(&format!("gate.tcfg.{d}")))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            kind: cfg.kind,
            layers,
            blocks,
            embed_dim: dt,
            state,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.state {
            GateState::Fixed => Vec::new(),
            GateState::Static(id) => vec![*id],
            GateState::DepthWise(ids) => ids.clone(),
            GateState::TimeWise(p) => vec![p.w1, p.b1, p.w2, p.b2],
            GateState::Joint(ps) => ps.iter().flat_map(|p| [p.w1, p.b1, p.w2, p.b2]).collect(),
        }
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block == 0 || block > self.blocks {
            return Err(Error::input(format!("block {block} out of range 1..={}", self.blocks)));
        }
        Ok(())
    }

    fn tcfg_on_tape<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, p: &TcfgParams, embed: Var) -> Var {
        let w1 = tape.param(params, p.w1);
        let b1 = tape.param(params, p.b1);
        let w2 = tape.param(params, p.w2);
        let b2 = tape.param(params, p.b2);
        let h = tape.matmul(embed, w1);
        let h = tape.add_row(h, b1);
        let h = tape.silu(h);
        let z = tape.matmul(h, w2);
        tape.add_row(z, b2)
    }

    fn embed_rows<T: Real>(&self, tape: &mut Tape<T>, gate_ts: &[f64]) -> Result<Var> {
        let mut rows = Vec::with_capacity(gate_ts.len() * self.embed_dim);
        for &t in gate_ts {
            rows.extend(numerics::sinusoidal_embed(t, self.embed_dim)?.into_iter().map(T::lit));
        }
        Ok(tape.constant(gate_ts.len(), self.embed_dim, rows))
    }

    /// Logits `[B×L]` for each block, one row per entry of `gate_ts`.
    ///
    /// Blocks that share parameters share the same node. Fixed strategies
    /// return zero logits.
    pub fn logits_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        gate_ts: &[f64],
    ) -> Result<Vec<Var>> {
        let b = gate_ts.len();
        let l = self.layers;
        Ok(match &self.state {
            GateState::Fixed => {
                let z = tape.constant(b, l, vec![T::zero(); b * l]);
                vec![z; self.blocks]
            }
            GateState::Static(id) => {
                let beta = tape.param(params, *id);
                let z = tape.repeat_rows(beta, b);
                vec![z; self.blocks]
            }
            GateState::DepthWise(ids) => ids
                .iter()
                .map(|&id| {
                    let beta = tape.param(params, id);
                    tape.repeat_rows(beta, b)
                })
                .collect(),
            GateState::TimeWise(p) => {
                let e = self.embed_rows(tape, gate_ts)?;
                let z = self.tcfg_on_tape(tape, params, p, e);
                vec![z; self.blocks]
            }
            GateState::Joint(ps) => {
                let e = self.embed_rows(tape, gate_ts)?;
                ps.iter().map(|p| self.tcfg_on_tape(tape, params, p, e)).collect()
            }
        })
    }

    /// Fusion weights `[B×L]` for each block.
    pub fn weights_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        gate_ts: &[f64],
    ) -> Result<Vec<Var>> {
        let b = gate_ts.len();
        let l = self.layers;
        if !self.kind.is_learned() {
            let row = fixed_weights(self.kind, l);
            let w = tape.constant(b, l, row.into_iter().map(T::lit).collect::<Vec<_>>().repeat(b));
            return Ok(vec![w; self.blocks]);
        }
        let logits = self.logits_on_tape(tape, params, gate_ts)?;
        let mut out: Vec<Var> = Vec::with_capacity(logits.len());
        for (i, &z) in logits.iter().enumerate() {
            match logits[..i].iter().position(|&prev| prev == z) {
                Some(j) => out.push(out[j]),
                None => out.push(tape.softmax(z)),
            }
        }
        Ok(out)
    }
}

fn fixed_weights(kind: StrategyKind, layers: usize) -> Vec<f64> {
    match kind {
        StrategyKind::Penultimate => {
            let mut w = vec![0.0; layers];
            w[layers - 2] = 1.0;
            w
        }
        _ => vec![1.0 / layers as f64; layers],
    }
}

/// Logits of `gate` at `(t, block)`.
pub fn gate_logits<T: Real>(gate: &Gate, params: &ParamSet<T>, t: f64, block: usize) -> Result<FusionLogits> {
    gate.check_block(block)?;
    let mut tape = Tape::new();
    let z = gate.logits_on_tape(&mut tape, params, &[t])?;
    Ok(FusionLogits(
        tape.value(z[block - 1]).iter().map(|v| v.as_f64()).collect(),
    ))
}

/// Softmax for learned strategies; exact one-hot / uniform for the fixed ones.
pub fn weights_from_logits(kind: StrategyKind, logits: &FusionLogits, layers: usize) -> Result<FusionWeights> {
    if logits.0.len() != layers {
        return Err(Error::input(format!("{} logits for {layers} layers", logits.0.len())));
    }
    if layers < 2 {
        return Err(Error::input("fusion needs at least two layers"));
    }
    if !kind.is_learned() {
        return Ok(FusionWeights(fixed_weights(kind, layers)));
    }
    let s = numerics::softmax(&Tensor::vector(logits.0.clone()))?;
    Ok(FusionWeights(s.into_data()))
}

/// `Σ_l α_l · LN(H_l)`.
pub fn fuse(bank: &LayerBank, weights: &FusionWeights) -> Result<Tensor<f64>> {
    if weights.0.len() != bank.layers() {
        return Err(Error::input(format!(
            "{} weights for a {}-layer bank",
            weights.0.len(),
            bank.layers()
        )));
    }
    let norm = bank.normalized();
    let w = bank.tokens() * bank.channels();
    let mut out = vec![0.0; w];
    for (l, &a) in weights.0.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(&norm[l * w..(l + 1) * w]) {
            *o += a * x;
        }
    }
    Tensor::from_rows(bank.tokens(), bank.channels(), out)
}

/// Full gate → weights → fusion path at one `(t, block)`.
pub fn fused_condition<T: Real>(
    gate: &Gate,
    params: &ParamSet<T>,
    bank: &LayerBank,
    t: f64,
    block: usize,
) -> Result<FusedCondition> {
    let z = gate_logits(gate, params, t, block)?;
    let w = weights_from_logits(gate.kind(), &z, gate.layers())?;
    Ok(FusedCondition {
        h_cond: fuse(bank, &w)?,
        t,
        block,
        kind: gate.kind(),
    })
}

/// Batched fusion on the tape.
///
/// `weights` is `[B×L]` and `layers` is `[(B·L) × (N·C)]` holding normalized
/// banks; the result is `[(B·N) × C]`.
pub fn fuse_on_tape<T: Real>(tape: &mut Tape<T>, weights: Var, layers: Var, tokens: usize, channels: usize) -> Var {
    let (b, _) = tape.dims(weights);
    let fused = tape.fuse(weights, layers);
    tape.reshape(fused, b * tokens, channels)
}

/// Gate-input recalibration: `t + 0.01·(1 − cos(π·(t − 0.2)/0.8))` past `t = 0.2`.
///
/// The result is not clamped, so `t = 1` maps to `1.02`.
pub fn shift_timestep(t: f64) -> f64 {
    t + shift_delta(t)
}

pub fn shift_delta(t: f64) -> f64 {
    if t <= 0.2 {
        0.0
    } else {
        // Same value as 0.01·(1 − cos θ), but rounds to exactly 0.01 at θ = π/2.
        0.01 - 0.01 * (std::f64::consts::PI * (t - 0.2) / 0.8).cos()
    }
}

/// Fusion weights over a `(t, block)` grid, stored `[t][block][layer]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightProfile {
    pub kind: StrategyKind,
    pub layers: usize,
    pub times: Vec<f64>,
    pub blocks: Vec<usize>,
    pub weights: Vec<f64>,
}

pub const PROFILE_HEADER: &str = "strategy,t,d,layer,weight";

impl WeightProfile {
    pub fn alpha(&self, ti: usize, bi: usize) -> &[f64] {
        let o = (ti * self.blocks.len() + bi) * self.layers;
        &self.weights[o..o + self.layers]
    }

    /// `(t, block, layer, weight)` rows in grid order.
    pub fn rows(&self) -> impl Iterator<Item = (f64, usize, usize, f64)> + '_ {
        self.times.iter().enumerate().flat_map(move |(ti, &t)| {
            self.blocks
                .iter()
                .enumerate()
                .flat_map(move |(bi, &d)| self.alpha(ti, bi).iter().enumerate().map(move |(l, &w)| (t, d, l, w)))
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{PROFILE_HEADER}")?;
        for (t, d, l, w) in self.rows() {
            writeln!(out, "{},{},{},{},{:e}", self.kind, t, d, l, w)?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`Self::write_csv`]; the grid must be complete.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::input(e.to_string()))?
            .ok_or_else(|| Error::input("empty weight profile"))?;
        if header.trim() != PROFILE_HEADER {
            return Err(Error::input(format!("unexpected profile header {header:?}")));
        }
        let mut kind = None;
        let mut rows: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::input(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::input(format!("malformed profile row {}: {line:?}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let k: StrategyKind = f[0].parse()?;
            if *kind.get_or_insert(k) != k {
                return Err(Error::input("profile mixes strategies"));
            }
            rows.push((
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
                f[4].parse().map_err(|_| bad())?,
            ));
        }
        let kind = kind.ok_or_else(|| Error::input("weight profile has no rows"))?;
        let mut times: Vec<f64> = Vec::new();
        let mut blocks: Vec<usize> = Vec::new();
        let mut layers = 0;
        for &(t, d, l, _) in &rows {
            if !times.contains(&t) {
                times.push(t);
            }
            if !blocks.contains(&d) {
                blocks.push(d);
            }
            layers = layers.max(l + 1);
        }
        let n = times.len() * blocks.len() * layers;
        if rows.len() != n {
            return Err(Error::input(format!(
                "profile grid {}x{}x{layers} needs {n} rows, found {}",
                times.len(),
                blocks.len(),
                rows.len()
            )));
        }
        let mut weights = vec![f64::NAN; n];
        for &(t, d, l, w) in &rows {
            let ti = times.iter().position(|&x| x == t).unwrap();
            let bi = blocks.iter().position(|&x| x == d).unwrap();
            weights[(ti * blocks.len() + bi) * layers + l] = w;
        }
        if weights.iter().any(|w| w.is_nan()) {
            return Err(Error::input("profile grid has duplicate or missing rows"));
        }
        let profile = Self {
            kind,
            layers,
            times,
            blocks,
            weights,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Every weight vector lies on the simplex within `1e-6`.
    pub fn validate(&self) -> Result<()> {
        for ti in 0..self.times.len() {
            for bi in 0..self.blocks.len() {
                let a = self.alpha(ti, bi);
                let s: f64 = a.iter().sum();
                if (s - 1.0).abs() > 1e-6 || a.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                    return Err(Error::input(format!(
                        "weights at t={} d={} are off the simplex (sum {s})",
                        self.times[ti], self.blocks[bi]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Evaluates `gate` over the `(t_grid × blocks)` grid.
pub fn export_weight_profile<T: Real>(
    gate: &Gate,
    params: &ParamSet<T>,
    t_grid: &[f64],
    blocks: &[usize],
) -> Result<WeightProfile> {
    let mut weights = Vec::with_capacity(t_grid.len() * blocks.len() * gate.layers());
    for &t in t_grid {
        for &d in blocks {
            let z = gate_logits(gate, params, t, d)?;
            weights.extend(weights_from_logits(gate.kind(), &z, gate.layers())?.0);
        }
    }
    Ok(WeightProfile {
        kind: gate.kind(),
        layers: gate.layers(),
        times: t_grid.to_vec(),
        blocks: blocks.to_vec(),
        weights,
    })
}

/// `0, step, 2·step, …, 1` with the last point pinned to exactly 1.
pub fn unit_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::input(format!("grid step {step} must lie in (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    if ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("grid step {step} does not divide [0, 1]")));
    }
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate(kind: StrategyKind, layers: usize, blocks: usize) -> (Gate, ParamSet<f64>) {
        let mut p = ParamSet::new();
        let cfg = StrategyConfig {
            kind,
            gate_embed_dim: 16,
        };
        let g = Gate::register(&mut p, &cfg, layers, blocks, 3).unwrap();
        (g, p)
    }

    fn bank_from(layers: Vec<Vec<f64>>, tokens: usize, channels: usize) -> LayerBank {
        let l = layers.len();
        LayerBank::new(l, tokens, channels, layers.concat()).unwrap()
    }

    #[test]
    fn static_zero_logits() {
        let (g, p) = gate(StrategyKind::Static, 5, 3);
        for (t, d) in [(0.0, 1), (0.7, 3), (1.02, 2)] {
            assert_eq!(gate_logits(&g, &p, t, d).unwrap().0, vec![0.0; 5]);
        }
    }

    #[test]
    fn zero_init_tcfg_gives_zero_logits() {
        let (g, p) = gate(StrategyKind::TimeWise, 6, 2);
        for t in [0.0, 0.33, 1.0] {
            assert_eq!(gate_logits(&g, &p, t, 1).unwrap().0, vec![0.0; 6]);
        }
    }

    #[test]
    fn depth_wise_is_a_table_lookup() {
        let (g, mut p) = gate(StrategyKind::DepthWise, 4, 5);
        let b3 = p.find("gate.beta.3").unwrap();
        p.get_mut(b3).data = vec![1.0, 0.0, 0.0, 0.0];
        let b4 = p.find("gate.beta.4").unwrap();
        p.get_mut(b4).data = vec![0.0, 2.0, 0.0, -1.0];
        assert_eq!(gate_logits(&g, &p, 0.7, 3).unwrap().0, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(gate_logits(&g, &p, 0.7, 4).unwrap().0, vec![0.0, 2.0, 0.0, -1.0]);
    }

    #[test]
    fn block_out_of_range() {
        let (g, p) = gate(StrategyKind::DepthWise, 4, 2);
        assert!(gate_logits(&g, &p, 0.5, 0).is_err());
        assert!(gate_logits(&g, &p, 0.5, 3).is_err());
    }

    #[test]
    fn fixed_strategies_are_exact() {
        let z = FusionLogits(vec![0.0; 8]);
        let w = weights_from_logits(StrategyKind::Penultimate, &z, 8).unwrap();
        let mut want = vec![0.0; 8];
        want[6] = 1.0;
        assert_eq!(w.0, want);
        let w = weights_from_logits(StrategyKind::Uniform, &FusionLogits(vec![0.0; 5]), 5).unwrap();
        assert_eq!(w.0, vec![0.2; 5]);
    }

    #[test]
    fn static_softmax_by_hand() {
        let w = weights_from_logits(StrategyKind::Static, &FusionLogits(vec![2f64.ln(), 0.0]), 2).unwrap();
        assert!((w.0[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.0[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_examples() {
        let bank = bank_from(vec![vec![3.0, 5.0, 7.0, 1.0], vec![0.5, -0.5, 2.0, 2.0]], 2, 2);
        let one_hot = fuse(&bank, &FusionWeights(vec![0.0, 1.0])).unwrap();
        let norm = bank.normalized();
        assert_eq!(one_hot.data(), &norm[4..8]);

        let same = bank_from(vec![vec![1.0, 4.0], vec![1.0, 4.0]], 1, 2);
        let u = fuse(&same, &FusionWeights(vec![0.5, 0.5])).unwrap();
        assert_eq!(u.data(), &same.normalized()[..2]);

        // [1, -1] and [-1, 1] are LayerNorm fixed points (up to eps)
        let b = bank_from(vec![vec![1.0, -1.0], vec![-1.0, 1.0]], 1, 2);
        let y = fuse(&b, &FusionWeights(vec![0.25, 0.75])).unwrap();
        assert!((y.data()[0] + 0.5).abs() < 1e-6);
        assert!((y.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn fuse_dimension_mismatch() {
        let b = bank_from(vec![vec![1.0, -1.0], vec![-1.0, 1.0]], 1, 2);
        assert!(fuse(&b, &FusionWeights(vec![1.0])).is_err());
    }

    #[test]
    fn shift_values() {
        assert_eq!(shift_timestep(0.2), 0.2);
        assert_eq!(shift_timestep(0.0), 0.0);
        assert!((shift_timestep(0.6) - 0.61).abs() < 1e-15);
        assert_eq!(shift_timestep(1.0), 1.02);
        assert_eq!(shift_delta(0.6), 0.01);
        assert_eq!(shift_delta(1.0), 0.02);
    }

    #[test]
    fn profile_invariances() {
        let (g, mut p) = gate(StrategyKind::DepthWise, 4, 3);
        let id = p.find("gate.beta.2").unwrap();
        p.get_mut(id).data = vec![0.3, -1.0, 2.0, 0.1];
        let grid = unit_grid(0.2).unwrap();
        let prof = export_weight_profile(&g, &p, &grid, &[1, 2, 3]).unwrap();
        for ti in 1..grid.len() {
            for bi in 0..3 {
                assert_eq!(prof.alpha(ti, bi), prof.alpha(0, bi));
            }
        }

        let (g, mut p) = gate(StrategyKind::TimeWise, 4, 3);
        let id = p.find("gate.tcfg.w2").unwrap();
        p.get_mut(id)
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let prof = export_weight_profile(&g, &p, &grid, &[1, 2, 3]).unwrap();
        for ti in 0..grid.len() {
            for bi in 1..3 {
                assert_eq!(prof.alpha(ti, bi), prof.alpha(ti, 0));
            }
        }
    }

    #[test]
    fn zero_init_joint_profile_is_uniform() {
        let (g, p) = gate(StrategyKind::Joint, 5, 3);
        let prof = export_weight_profile(&g, &p, &unit_grid(0.05).unwrap(), &[1, 2, 3]).unwrap();
        assert!(prof.weights.iter().all(|&w| w == 0.2));
    }

    #[test]
    fn profile_csv_round_trip() {
        let (g, mut p) = gate(StrategyKind::Joint, 3, 2);
        for id in g.param_ids() {
            p.get_mut(id)
                .data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += 0.01 * (i as f64).cos());
        }
        let prof = export_weight_profile(&g, &p, &unit_grid(0.25).unwrap(), &[1, 2]).unwrap();
        let mut buf = Vec::new();
        prof.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("strategy,t,d,layer,weight\n"));
        let back = WeightProfile::read_csv(&buf[..]).unwrap();
        assert_eq!(back.times, prof.times);
        assert_eq!(back.blocks, prof.blocks);
        for (a, b) in back.weights.iter().zip(&prof.weights) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_grid_points() {
        let g = unit_grid(0.05).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[20], 1.0);
        assert!((g[7] - 0.35).abs() < 1e-15);
        assert!(unit_grid(0.3).is_err());
    }

    #[test]
    fn bind_finds_registered_params() {
        let (g, p) = gate(StrategyKind::Joint, 4, 3);
        let cfg = StrategyConfig {
            kind: StrategyKind::Joint,
            gate_embed_dim: 16,
        };
        assert_eq!(Gate::bind(&p, &cfg, 4, 3).unwrap(), g);
        assert!(Gate::bind(&p, &cfg, 5, 3).is_err());
    }
}
