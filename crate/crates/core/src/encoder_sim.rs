//! A seeded stand-in for a multi-layer text encoder and its paired data.
//!
//! Each prompt is a tuple of `K` categorical slots. Slot `k` is written into
//! exactly one interior encoder layer; the boundary layers carry a fixed,
//! prompt-independent noise pattern; the remaining layers hold that noise plus
//! a quarter-amplitude copy of their informative neighbours. The target
//! latent for a prompt is a grid split into `K` bands whose levels encode the
//! slot values.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::routing::LayerBank;

/// Amplitude of the neighbour copies held by non-assigned, non-noise layers.
pub const REDUNDANT_COPY_AMPLITUDE: f64 = 0.25;

/// SplitMix64 finalizer, used to derive independent RNG seeds from one seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub attributes: Vec<usize>,
    pub is_null: bool,
}

impl Prompt {
    pub fn new(attributes: Vec<usize>) -> Self {
        Self {
            attributes,
            is_null: false,
        }
    }

    /// The dropped-prompt condition.
    pub fn null() -> Self {
        Self {
            attributes: Vec::new(),
            is_null: true,
        }
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null {
            return f.write_str("null");
        }
        let parts: Vec<String> = self.attributes.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Prompt {
    type Err = Error;

    /// Parses `2,0,3,1`, or `null` for the unconditional prompt.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("null") {
            return Ok(Prompt::null());
        }
        let attributes = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::input(format!("bad prompt slot {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prompt::new(attributes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthEncoderConfig {
    /// Encoder depth `L`.
    pub layers: usize,
    /// Sequence length `N`.
    pub tokens: usize,
    /// Hidden width `C`.
    pub channels: usize,
    /// Values per slot `V`.
    pub vocab: usize,
    /// Slot `k` is written into layer `layer_assignment[k]`; its length is `K`.
    pub layer_assignment: Vec<usize>,
    pub noise_layers: Vec<usize>,
    pub noise_scale: f64,
    /// Per-element jitter of rendered targets.
    pub data_sigma: f64,
    pub seed: u64,
}

impl Default for SynthEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            tokens: 8,
            channels: 32,
            vocab: 4,
            layer_assignment: vec![2, 3, 4, 6],
            noise_layers: vec![0, 7],
            noise_scale: 1.0,
            data_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthEncoderConfig {
    pub fn slots(&self) -> usize {
        self.layer_assignment.len()
    }

    fn slot_of(&self, layer: usize) -> Option<usize> {
        self.layer_assignment.iter().position(|&l| l == layer)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers;
        if l < 4 {
            return Err(Error::config(format!("encoder needs at least 4 layers, got {l}")));
        }
        if self.tokens == 0 || self.channels == 0 {
            return Err(Error::config("encoder tokens and channels must be positive"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        if self.layer_assignment.is_empty() {
            return Err(Error::config("layer_assignment needs at least one slot"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be finite and non-negative"));
        }
        if !(self.data_sigma >= 0.0 && self.data_sigma.is_finite()) {
            return Err(Error::config("data_sigma must be finite and non-negative"));
        }
        for (k, &layer) in self.layer_assignment.iter().enumerate() {
            if layer == 0 || layer >= l - 1 {
                return Err(Error::config(format!(
                    "slot {k} assigned to layer {layer}; only interior layers 1..{} may be informative",
                    l - 2
                )));
            }
            if self.layer_assignment[..k].contains(&layer) {
                return Err(Error::config(format!("layer {layer} assigned to two slots")));
            }
            if self.noise_layers.contains(&layer) {
                return Err(Error::config(format!("layer {layer} is both informative and noise")));
            }
        }
        if self.noise_layers.iter().any(|&n| n >= l) {
            return Err(Error::config("noise layer index out of range"));
        }
        if !self.noise_layers.contains(&0) || !self.noise_layers.contains(&(l - 1)) {
            return Err(Error::config("noise_layers must include layer 0 and the last layer"));
        }
        let pen = l - 2;
        let pen_informative = self.slot_of(pen).is_some()
            || (!self.noise_layers.contains(&pen)
                && (self.slot_of(pen - 1).is_some() || self.slot_of(pen + 1).is_some()));
        if !pen_informative {
            return Err(Error::config(format!(
                "penultimate layer {pen} carries no slot information"
            )));
        }
        Ok(())
    }

    pub fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.is_null {
            return Ok(());
        }
        if prompt.attributes.len() != self.slots() {
            return Err(Error::input(format!(
                "prompt has {} slots, encoder expects {}",
                prompt.attributes.len(),
                self.slots()
            )));
        }
        if let Some((k, &a)) = prompt.attributes.iter().enumerate().find(|(_, &a)| a >= self.vocab) {
            return Err(Error::input(format!(
                "slot {k} value {a} out of range 0..{}",
                self.vocab
            )));
        }
        Ok(())
    }
}

/// Precomputed projections and noise for one [`SynthEncoderConfig`].
#[derive(Clone, Debug)]
pub struct SynthEncoder {
    cfg: SynthEncoderConfig,
    /// `[slot][value]` → an `N·C` pattern.
    patterns: Vec<Vec<Vec<f64>>>,
    /// Prompt-independent background per layer (empty for assigned layers).
    background: Vec<Vec<f64>>,
    null: LayerBank,
}

impl SynthEncoder {
    pub fn new(cfg: SynthEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.tokens * cfg.channels;
        let patterns = (0..cfg.slots())
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100 + k as u64));
                (0..cfg.vocab).map(|_| gaussian(&mut rng, width, 1.0)).collect()
            })
            .collect();
        let background = (0..cfg.layers)
            .map(|l| {
                if cfg.slot_of(l).is_some() {
                    Vec::new()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + l as u64));
                    gaussian(&mut rng, width, cfg.noise_scale)
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 7));
        let null = LayerBank::new(
            cfg.layers,
            cfg.tokens,
            cfg.channels,
            gaussian(&mut rng, cfg.layers * width, 1.0),
        )?;
        Ok(Self {
            cfg,
            patterns,
            background,
            null,
        })
    }

    pub fn config(&self) -> &SynthEncoderConfig {
        &self.cfg
    }

    /// The fixed unconditional bank.
    pub fn null_bank(&self) -> &LayerBank {
        &self.null
    }

    pub fn encode(&self, prompt: &Prompt) -> Result<LayerBank> {
        self.cfg.check_prompt(prompt)?;
        if prompt.is_null {
            return Ok(self.null.clone());
        }
        let cfg = &self.cfg;
        let width = cfg.tokens * cfg.channels;
        let mut data = Vec::with_capacity(cfg.layers * width);
        for l in 0..cfg.layers {
            if let Some(k) = cfg.slot_of(l) {
                data.extend_from_slice(&self.patterns[k][prompt.attributes[k]]);
                continue;
            }
            let mut layer = self.background[l].clone();
            if !cfg.noise_layers.contains(&l) {
                for n in [l.checked_sub(1), Some(l + 1)].into_iter().flatten() {
                    if let Some(k) = cfg.slot_of(n) {
                        let src = &self.patterns[k][prompt.attributes[k]];
                        for (d, &s) in layer.iter_mut().zip(src) {
                            *d += REDUNDANT_COPY_AMPLITUDE * s;
                        }
                    }
                }
            }
            data.extend_from_slice(&layer);
        }
        LayerBank::new(cfg.layers, cfg.tokens, cfg.channels, data)
    }

    /// Uniformly random non-null prompt.
    pub fn sample_prompt<R: Rng>(&self, rng: &mut R) -> Prompt {
        Prompt::new(
            (0..self.cfg.slots())
                .map(|_| rng.random_range(0..self.cfg.vocab))
                .collect(),
        )
    }

    /// Every non-null prompt in lexicographic order.
    pub fn all_prompts(&self) -> Vec<Prompt> {
        let (k, v) = (self.cfg.slots(), self.cfg.vocab);
        let total = v.pow(k as u32);
        (0..total)
            .map(|mut i| {
                let mut attrs = vec![0; k];
                for slot in (0..k).rev() {
                    attrs[slot] = i % v;
                    i /= v;
                }
                Prompt::new(attrs)
            })
            .collect()
    }
}

/// One-shot convenience over [`SynthEncoder::encode`].
pub fn encode(prompt: &Prompt, cfg: &SynthEncoderConfig) -> Result<LayerBank> {
    SynthEncoder::new(cfg.clone())?.encode(prompt)
}

/// One-shot convenience over [`SynthEncoder::null_bank`].
pub fn null_bank(cfg: &SynthEncoderConfig) -> Result<LayerBank> {
    Ok(SynthEncoder::new(cfg.clone())?.null.clone())
}

/// Geometry of rendered target latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSpec {
    pub grid: usize,
    pub channels: usize,
    pub vocab: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSample {
    /// `[G·G × C_lat]`, row-major over the grid.
    pub latent: Tensor<f64>,
}

/// Region of grid cell `cell` when `cells` cells are split into `slots` bands.
pub fn region_of(cell: usize, cells: usize, slots: usize) -> usize {
    cell * slots / cells
}

/// Renders the band image for `prompt` plus seeded Gaussian jitter.
pub fn render_target(prompt: &Prompt, spec: &TargetSpec, jitter_seed: u64) -> Result<TargetSample> {
    if prompt.is_null {
        return Err(Error::input("the null prompt has no target"));
    }
    let k = prompt.attributes.len();
    let cells = spec.grid * spec.grid;
    if k == 0 || k > cells {
        return Err(Error::input(format!("cannot split {cells} cells into {k} regions")));
    }
    if let Some(&a) = prompt.attributes.iter().find(|&&a| a >= spec.vocab) {
        return Err(Error::input(format!("slot value {a} out of range 0..{}", spec.vocab)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let mut data = Vec::with_capacity(cells * spec.channels);
    for cell in 0..cells {
        let a = prompt.attributes[region_of(cell, cells, k)];
        let level = (a + 1) as f64 / spec.vocab as f64;
        for _ in 0..spec.channels {
            let jitter = if spec.sigma > 0.0 {
                spec.sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            data.push(level + jitter);
        }
    }
    Ok(TargetSample {
        latent: Tensor::from_rows(cells, spec.channels, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> TargetSpec {
        TargetSpec {
            grid: 8,
            channels: 1,
            vocab: 4,
            sigma,
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthEncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        let base = SynthEncoderConfig::default();
        let cases = [
            SynthEncoderConfig {
                layers: 3,
                layer_assignment: vec![1],
                noise_layers: vec![0, 2],
                ..base.clone()
            },
            SynthEncoderConfig {
                layer_assignment: vec![2, 2, 3, 6],
                ..base.clone()
            },
            SynthEncoderConfig {
                layer_assignment: vec![0, 3, 4, 6],
                ..base.clone()
            },
            SynthEncoderConfig {
                noise_layers: vec![0],
                ..base.clone()
            },
            SynthEncoderConfig {
                layer_assignment: vec![1, 2, 3],
                noise_layers: vec![0, 6, 7],
                ..base.clone()
            },
            SynthEncoderConfig {
                layer_assignment: vec![1, 2, 3],
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?} should be rejected");
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = SynthEncoderConfig::default();
        let p = Prompt::new(vec![2, 0, 3, 1]);
        assert_eq!(encode(&p, &cfg).unwrap(), encode(&p, &cfg).unwrap());
    }

    #[test]
    fn single_slot_change_touches_only_its_layers() {
        let cfg = SynthEncoderConfig {
            layer_assignment: vec![2, 3, 4, 5],
            ..Default::default()
        };
        let enc = SynthEncoder::new(cfg).unwrap();
        let a = enc.encode(&Prompt::new(vec![0, 0, 0, 0])).unwrap();
        let b = enc.encode(&Prompt::new(vec![1, 0, 0, 0])).unwrap();
        let differing: Vec<usize> = (0..8).filter(|&l| a.layer(l) != b.layer(l)).collect();
        // layer 2 holds slot 0; layer 1 is its redundant copy
        assert_eq!(differing, vec![1, 2]);
        assert_eq!(a.layer(5), b.layer(5));
    }

    #[test]
    fn null_bank_properties() {
        let cfg = SynthEncoderConfig::default();
        let a = null_bank(&cfg).unwrap();
        assert_eq!(a, null_bank(&cfg).unwrap());
        assert_eq!(encode(&Prompt::null(), &cfg).unwrap(), a);
        for l in 0..cfg.layers {
            let norm = a.layer(l).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm.is_finite() && norm > 0.0);
        }
    }

    #[test]
    fn out_of_range_slot_is_rejected() {
        let cfg = SynthEncoderConfig::default();
        assert!(encode(&Prompt::new(vec![4, 0, 0, 0]), &cfg).is_err());
        assert!(encode(&Prompt::new(vec![0, 0]), &cfg).is_err());
    }

    #[test]
    fn jitter_free_levels() {
        let t = render_target(&Prompt::new(vec![0, 1, 2, 3]), &spec(0.0), 9).unwrap();
        assert_eq!(t.latent.data()[0], 0.25);
        let t = render_target(&Prompt::new(vec![3, 3, 3, 3]), &spec(0.0), 9).unwrap();
        assert!(t.latent.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn null_prompt_has_no_target() {
        assert!(render_target(&Prompt::null(), &spec(0.05), 0).is_err());
    }

    #[test]
    fn region_means_within_three_sigma() {
        let p = Prompt::new(vec![0, 1, 2, 3]);
        let s = spec(0.05);
        let region_size = 16.0;
        let bound = 3.0 * s.sigma / f64::sqrt(region_size);
        let mut outside = 0;
        for seed in 0..1000 {
            let t = render_target(&p, &s, seed).unwrap();
            for k in 0..4 {
                let mean = t.latent.data()[k * 16..(k + 1) * 16].iter().sum::<f64>() / region_size;
                let level = (k + 1) as f64 / 4.0;
                if (mean - level).abs() > bound {
                    outside += 1;
                }
            }
        }
        // 3σ bands leave ~0.27% outside; 4000 region means → expect ≈ 11
        assert!(outside < 30, "{outside} region means outside 3σ");
    }

    #[test]
    fn prompt_parsing() {
        let p: Prompt = "2,0,3,1".parse().unwrap();
        assert_eq!(p.attributes, vec![2, 0, 3, 1]);
        assert_eq!(p.to_string(), "2,0,3,1");
        assert!("null".parse::<Prompt>().unwrap().is_null);
        assert!("2,x".parse::<Prompt>().is_err());
    }

    #[test]
    fn all_prompts_enumerates_grid() {
        let enc = SynthEncoder::new(SynthEncoderConfig::default()).unwrap();
        let all = enc.all_prompts();
        assert_eq!(all.len(), 256);
        assert_eq!(all[1].attributes, vec![0, 0, 0, 1]);
    }
}
