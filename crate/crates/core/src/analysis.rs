//! Diagnostics over learned fusion weights and sampled trajectories.
//!
//! Weight vectors are read as distributions over normalized layer positions
//! `l_i = i/(L−1)`: their mean is the semantic center and their variance the
//! semantic dispersion. Profiles are compared across depth or time with a
//! Jensen–Shannon similarity and across consecutive timesteps with the
//! 1-Wasserstein distance on that support. Trajectories are compared with
//! the straight-line path from their own starting noise to their own result.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flowmatch::TrajectoryRecord;
use crate::numerics::Real;
use crate::routing::{unit_grid, WeightProfile};

/// Normalization guard added to the weight sum.
pub const STATS_EPS: f64 = 1e-12;

/// Spacing of the timestep grid expected by [`wasserstein_drift`].
pub const DRIFT_STEP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistributionStats {
    /// `µ̂ = Σ p_i l_i ∈ [0, 1]`.
    pub center: f64,
    /// `σ̂² = Σ p_i (l_i − µ̂)² ∈ [0, 0.25]`.
    pub dispersion: f64,
}

fn support(layers: usize) -> impl Iterator<Item = f64> {
    (0..layers).map(move |i| {
        if layers == 1 {
            0.0
        } else {
            i as f64 / (layers - 1) as f64
        }
    })
}

/// Semantic center and dispersion of a non-negative weight vector.
pub fn semantic_stats(w: &[f64], eps: f64) -> Result<DistributionStats> {
    if w.is_empty() {
        return Err(Error::input("weight vector is empty"));
    }
    if let Some(&bad) = w.iter().find(|&&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::input(format!(
            "weights must be finite and non-negative, found {bad}"
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::input("eps must be positive"));
    }
    let z = w.iter().sum::<f64>() + eps;
    let center: f64 = w.iter().zip(support(w.len())).map(|(&x, l)| x / z * l).sum();
    let dispersion = w
        .iter()
        .zip(support(w.len()))
        .map(|(&x, l)| x / z * (l - center) * (l - center))
        .sum();
    Ok(DistributionStats { center, dispersion })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Jensen–Shannon divergence in nats, `H(m) − (H(p) + H(q))/2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::input(format!(
            "comparing distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((entropy(&m) - 0.5 * (entropy(p) + entropy(q))).max(0.0))
}

/// `1 − JSD/ln 2`, clamped to `[0, 1]` against rounding.
pub fn js_similarity(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok((1.0 - js_divergence(p, q)? / std::f64::consts::LN_2).clamp(0.0, 1.0))
}

/// `W1` on the support `i/(L−1)`: `Σ_i |CDF_p(i) − CDF_q(i)| / (L−1)`.
pub fn wasserstein1(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() < 2 {
        return Err(Error::input("W1 needs two distributions of equal length >= 2"));
    }
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q).take(p.len() - 1) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total / (p.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Depth,
    Time,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::Time => "time",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" | "d" => Ok(Axis::Depth),
            "time" | "t" => Ok(Axis::Time),
            other => Err(Error::input(format!("unknown axis {other:?} (expected depth or time)"))),
        }
    }
}

/// One weight vector per point of `axis`, averaged over the other axis.
pub fn marginal(profile: &WeightProfile, axis: Axis) -> Vec<Vec<f64>> {
    let (nt, nb, l) = (profile.times.len(), profile.blocks.len(), profile.layers);
    let (outer, inner) = match axis {
        Axis::Depth => (nb, nt),
        Axis::Time => (nt, nb),
    };
    (0..outer)
        .map(|i| {
            let mut acc = vec![0.0; l];
            for j in 0..inner {
                let a = match axis {
                    Axis::Depth => profile.alpha(j, i),
                    Axis::Time => profile.alpha(i, j),
                };
                acc.iter_mut().zip(a).for_each(|(s, &x)| *s += x);
            }
            acc.iter_mut().for_each(|s| *s /= inner as f64);
            acc
        })
        .collect()
}

fn axis_labels(profile: &WeightProfile, axis: Axis) -> Vec<String> {
    match axis {
        Axis::Depth => profile.blocks.iter().map(|d| format!("d={d}")).collect(),
        Axis::Time => profile.times.iter().map(|t| format!("t={t:.2}")).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub axis: Axis,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Square table with a labeled header row and a label column.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{},{}", self.axis, self.labels.join(","))?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            write!(out, "{label}")?;
            for v in row {
                write!(out, ",{v:.12}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Pairwise JS similarity of the marginal weight vectors along `axis`.
pub fn js_similarity_matrix(profile: &WeightProfile, axis: Axis) -> Result<SimilarityMatrix> {
    profile.validate()?;
    let rows = marginal(profile, axis);
    if rows.len() < 2 {
        return Err(Error::input(format!("the {axis} axis needs at least two points")));
    }
    let n = rows.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = js_similarity(&rows[i], &rows[j])?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        axis,
        labels: axis_labels(profile, axis),
        values,
    })
}

/// `W1` between consecutive timesteps of the depth-averaged profile,
/// labeled by the earlier timestep. Needs the 21-point grid `0:0.05:1`.
pub fn wasserstein_drift(profile: &WeightProfile) -> Result<Vec<(f64, f64)>> {
    profile.validate()?;
    let grid = unit_grid(DRIFT_STEP)?;
    if profile.times.len() != grid.len() || profile.times.iter().zip(&grid).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::input(format!(
            "drift needs the {}-point grid 0:{DRIFT_STEP}:1, profile has {} timesteps",
            grid.len(),
            profile.times.len()
        )));
    }
    let rows = marginal(profile, Axis::Time);
    rows.windows(2)
        .zip(&profile.times)
        .map(|(w, &t)| Ok((t, wasserstein1(&w[0], &w[1])?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub axis: Axis,
    /// Block number (depth) or timestep index (time).
    pub index: usize,
    pub stats: DistributionStats,
}

/// Semantic statistics of the depth marginals, then the time marginals.
pub fn profile_stats(profile: &WeightProfile) -> Result<Vec<StatsRow>> {
    profile.validate()?;
    let mut out = Vec::new();
    for (axis, indices) in [
        (Axis::Depth, profile.blocks.clone()),
        (Axis::Time, (0..profile.times.len()).collect()),
    ] {
        for (w, index) in marginal(profile, axis).iter().zip(indices) {
            out.push(StatsRow {
                axis,
                index,
                stats: semantic_stats(w, STATS_EPS)?,
            });
        }
    }
    Ok(out)
}

pub fn write_stats_csv<W: Write>(rows: &[StatsRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "axis,index,center,dispersion")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.12},{:.12}",
            r.axis, r.index, r.stats.center, r.stats.dispersion
        )?;
    }
    Ok(())
}

pub fn write_drift_csv<W: Write>(drift: &[(f64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,w1")?;
    for (t, w) in drift {
        writeln!(out, "{t:.2},{w:.12}")?;
    }
    Ok(())
}

/// `x_ref(t) = (1−t)·x(0) + t·x̂_1` at every recorded nominal time.
pub fn reference_trajectory<T: Real>(rec: &TrajectoryRecord<T>) -> Result<Vec<(f64, Vec<f64>)>> {
    if !rec.is_complete() {
        return Err(Error::input("trajectory record is missing intermediate states"));
    }
    Ok(rec
        .steps
        .iter()
        .map(|s| {
            let x = rec
                .x0
                .iter()
                .zip(&rec.final_latent)
                .map(|(&a, &b)| (1.0 - s.t) * a.as_f64() + s.t * b.as_f64())
                .collect();
            (s.t, x)
        })
        .collect())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10·log10(R²/MSE)`, `+∞` when the MSE is zero.
pub fn psnr(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    /// Deviation of the sampled state from the straight reference path.
    pub mse: f64,
    pub psnr: f64,
    /// Distance of the sampled state from the final latent.
    pub mse_to_final: f64,
    pub psnr_to_final: f64,
    /// Distance of the reference state from the final latent.
    pub ref_mse_to_final: f64,
    pub ref_psnr_to_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    /// PSNR range: dynamic range `max − min` of the final latent.
    pub range: f64,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryMetrics {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,t,mse,psnr")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.12e},{}", r.step, r.t, r.mse, fmt_psnr(r.psnr))?;
        }
        Ok(())
    }

    /// Sampled and reference distances to the final latent.
    pub fn write_to_final_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,t,mse_inference,psnr_inference,mse_reference,psnr_reference")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.12e},{},{:.12e},{}",
                r.step,
                r.t,
                r.mse_to_final,
                fmt_psnr(r.psnr_to_final),
                r.ref_mse_to_final,
                fmt_psnr(r.ref_psnr_to_final)
            )?;
        }
        Ok(())
    }
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p:.6}")
    }
}

/// Per-step trajectory diagnostics for one sampled record.
pub fn trajectory_metrics<T: Real>(rec: &TrajectoryRecord<T>) -> Result<TrajectoryMetrics> {
    let reference = reference_trajectory(rec)?;
    let last: Vec<f64> = rec.final_latent.iter().map(|v| v.as_f64()).collect();
    let (lo, hi) = last.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::input("final latent is constant; PSNR range is zero"));
    }
    let rows = rec
        .steps
        .iter()
        .zip(&reference)
        .map(|(s, (_, x_ref))| {
            let x: Vec<f64> = s.x.iter().map(|v| v.as_f64()).collect();
            let dev = mse(&x, x_ref);
            let to_final = mse(&x, &last);
            let ref_to_final = mse(x_ref, &last);
            TrajectoryRow {
                step: s.step,
                t: s.t,
                mse: dev,
                psnr: psnr(dev, range),
                mse_to_final: to_final,
                psnr_to_final: psnr(to_final, range),
                ref_mse_to_final: ref_to_final,
                ref_psnr_to_final: psnr(ref_to_final, range),
            }
        })
        .collect();
    Ok(TrajectoryMetrics { range, rows })
}

/// Step-wise mean over several trajectories of equal length; PSNR values
/// are averaged in dB.
pub fn mean_metrics(all: &[TrajectoryMetrics]) -> Result<TrajectoryMetrics> {
    let first = all.first().ok_or_else(|| Error::input("no trajectories to average"))?;
    if all.iter().any(|m| m.rows.len() != first.rows.len()) {
        return Err(Error::input("trajectories have different lengths"));
    }
    let n = all.len() as f64;
    let avg = |f: &dyn Fn(&TrajectoryRow) -> f64, i: usize| all.iter().map(|m| f(&m.rows[i])).sum::<f64>() / n;
    let rows = (0..first.rows.len())
        .map(|i| TrajectoryRow {
            step: first.rows[i].step,
            t: first.rows[i].t,
            mse: avg(&|r| r.mse, i),
            psnr: avg(&|r| r.psnr, i),
            mse_to_final: avg(&|r| r.mse_to_final, i),
            psnr_to_final: avg(&|r| r.psnr_to_final, i),
            ref_mse_to_final: avg(&|r| r.ref_mse_to_final, i),
            ref_psnr_to_final: avg(&|r| r.ref_psnr_to_final, i),
        })
        .collect();
    Ok(TrajectoryMetrics {
        range: all.iter().map(|m| m.range).sum::<f64>() / n,
        rows,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::input("spearman needs two equal-length series of length >= 2"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::input("spearman input contains NaN"));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::input("spearman of a constant series is undefined"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Conventions written next to every analysis output.
#[derive(Clone, Debug, Serialize)]
pub struct AnalysisMetadata {
    pub command: String,
    pub strategy: Option<String>,
    pub similarity_transform: &'static str,
    pub divergence_log_base: &'static str,
    pub wasserstein_support: &'static str,
    pub stats_eps: f64,
    pub psnr_range: &'static str,
    pub reference_trajectory: &'static str,
}

impl AnalysisMetadata {
    pub fn new(command: &str, strategy: Option<String>) -> Self {
        Self {
            command: command.into(),
            strategy,
            similarity_transform: "1 - JSD / ln 2",
            divergence_log_base: "natural",
            wasserstein_support: "normalized layer positions i/(L-1)",
            stats_eps: STATS_EPS,
            psnr_range: "max(final latent) - min(final latent), per trajectory",
            reference_trajectory: "(1 - t) * x(0) + t * final latent",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::TrajectoryStep;
    use crate::routing::StrategyKind;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn stats_closed_forms() {
        for l in 2..10 {
            close(semantic_stats(&vec![1.0 / l as f64; l], STATS_EPS).unwrap().center, 0.5);
        }
        let mut onehot = vec![0.0; 6];
        onehot[5] = 1.0;
        let s = semantic_stats(&onehot, STATS_EPS).unwrap();
        close(s.center, 1.0);
        close(s.dispersion, 0.0);
        let s = semantic_stats(&[1.0 / 3.0; 3], STATS_EPS).unwrap();
        close(s.dispersion, 1.0 / 6.0);
        let s = semantic_stats(&[0.7], STATS_EPS).unwrap();
        close(s.center, 0.0);
        assert!(semantic_stats(&[0.5, -0.1], STATS_EPS).is_err());
        assert!(semantic_stats(&[], STATS_EPS).is_err());
    }

    #[test]
    fn js_closed_forms() {
        let p = [0.5, 0.5];
        let q = [1.0, 0.0];
        close(js_similarity(&p, &p).unwrap(), 1.0);
        close(js_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // Entropy oracle with m = (0.75, 0.25).
        let h = |v: &[f64]| -v.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        let jsd = h(&[0.75, 0.25]) - 0.5 * (h(&p) + h(&q));
        close(js_divergence(&p, &q).unwrap(), jsd);
        close(js_similarity(&p, &q).unwrap(), 1.0 - jsd / 2f64.ln());
    }

    #[test]
    fn wasserstein_closed_forms() {
        let mut a = vec![0.0; 5];
        let mut b = vec![0.0; 5];
        a[0] = 1.0;
        b[4] = 1.0;
        close(wasserstein1(&a, &b).unwrap(), 1.0);
        let mut c = vec![0.0; 5];
        c[1] = 1.0;
        close(wasserstein1(&a, &c).unwrap(), 0.25);
        close(wasserstein1(&a, &a).unwrap(), 0.0);
    }

    fn profile(
        kind: StrategyKind,
        times: Vec<f64>,
        blocks: usize,
        f: impl Fn(f64, usize) -> Vec<f64>,
    ) -> WeightProfile {
        let layers = f(0.0, 1).len();
        let weights = times
            .iter()
            .flat_map(|&t| (1..=blocks).flat_map(|d| f(t, d)).collect::<Vec<_>>())
            .collect();
        WeightProfile {
            kind,
            layers,
            times,
            blocks: (1..=blocks).collect(),
            weights,
        }
    }

    #[test]
    fn drift_of_time_constant_profile_is_zero() {
        let p = profile(StrategyKind::DepthWise, unit_grid(0.05).unwrap(), 3, |_, d| {
            let mut w = vec![0.1; 4];
            w[d] = 0.7;
            w
        });
        let drift = wasserstein_drift(&p).unwrap();
        assert_eq!(drift.len(), 20);
        assert!(drift.iter().all(|&(_, w)| w == 0.0));
        close(drift[3].0, 0.15);
    }

    #[test]
    fn drift_rejects_other_grids() {
        let p = profile(StrategyKind::TimeWise, unit_grid(0.1).unwrap(), 1, |_, _| {
            vec![0.5, 0.5]
        });
        assert!(wasserstein_drift(&p).is_err());
    }

    #[test]
    fn joint_profiles_are_marginalized_over_depth() {
        // Block 1 puts all mass on layer 0, block 2 on layer 2; the
        // depth-average is constant in t, so the drift vanishes.
        let p = profile(StrategyKind::Joint, unit_grid(0.05).unwrap(), 2, |_, d| {
            if d == 1 {
                vec![1.0, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 1.0]
            }
        });
        assert!(wasserstein_drift(&p).unwrap().iter().all(|&(_, w)| w == 0.0));
        let m = js_similarity_matrix(&p, Axis::Depth).unwrap();
        close(m.values[0][1], 0.0);
        let m = js_similarity_matrix(&p, Axis::Time).unwrap();
        assert!(m.values.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn similarity_matrix_layout() {
        let p = profile(StrategyKind::Joint, vec![0.0, 0.5, 1.0], 2, |t, d| {
            vec![t * 0.5, 0.5 - t * 0.5 + 0.0 * d as f64, 0.5]
        });
        let m = js_similarity_matrix(&p, Axis::Time).unwrap();
        assert_eq!(m.labels, vec!["t=0.00", "t=0.50", "t=1.00"]);
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("time,t=0.00,t=0.50,t=1.00\nt=0.00,1.000000000000,"));
        assert!(js_similarity_matrix(
            &profile(StrategyKind::Static, vec![0.0], 1, |_, _| vec![1.0, 0.0]),
            Axis::Time
        )
        .is_err());
    }

    #[test]
    fn stats_rows_cover_both_axes() {
        let p = profile(StrategyKind::Uniform, vec![0.0, 1.0], 3, |_, _| vec![0.25; 4]);
        let rows = profile_stats(&p).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| (r.stats.center - 0.5).abs() < 1e-12));
        let mut out = Vec::new();
        write_stats_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("axis,index,center,dispersion\ndepth,1,"), "{text}");
        assert_eq!(text.lines().count(), 6);
    }

    fn record(x0: Vec<f64>, last: Vec<f64>, steps: usize, offset: f64) -> TrajectoryRecord<f64> {
        let states = (0..steps)
            .map(|k| {
                let t = k as f64 / steps as f64;
                let x = x0
                    .iter()
                    .zip(&last)
                    .map(|(a, b)| (1.0 - t) * a + t * b + if k == 0 { 0.0 } else { offset })
                    .collect();
                TrajectoryStep { step: k, t, x }
            })
            .collect();
        TrajectoryRecord {
            x0,
            steps: states,
            final_latent: last,
            total_steps: steps,
        }
    }

    #[test]
    fn reference_trajectory_endpoints_and_collinearity() {
        let rec = record(vec![1.0, -2.0, 0.5], vec![0.0, 1.0, 2.0], 4, 0.0);
        let r = reference_trajectory(&rec).unwrap();
        assert_eq!(r[0].1, rec.x0);
        assert_eq!(r[2].1, vec![0.5, -0.5, 1.25]);
        for (t, x) in &r {
            // Projection oracle: x − x0 is parallel to x̂1 − x0 with coefficient t.
            let d: Vec<f64> = rec.final_latent.iter().zip(&rec.x0).map(|(b, a)| b - a).collect();
            let rel: Vec<f64> = x.iter().zip(&rec.x0).map(|(x, a)| x - a).collect();
            let coef = rel.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / d.iter().map(|b| b * b).sum::<f64>();
            close(coef, *t);
            let resid: f64 = rel
                .iter()
                .zip(&d)
                .map(|(a, b)| (a - coef * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(resid < 1e-9);
        }
        let mut broken = rec.clone();
        broken.steps.pop();
        assert!(reference_trajectory(&broken).is_err());
    }

    #[test]
    fn trajectory_metrics_closed_forms() {
        let rec = record(vec![0.0, 1.0, -1.0], vec![1.0, -1.0, 0.5], 5, 0.0);
        assert!(trajectory_metrics(&rec)
            .unwrap()
            .rows
            .iter()
            .all(|r| r.mse == 0.0 && r.psnr.is_infinite()));

        // Offset 0.1 everywhere after the start, final range 2 → 10·log10(400).
        let rec = record(vec![0.0, 1.0, -1.0], vec![1.0, -1.0, 0.5], 5, 0.1);
        let m = trajectory_metrics(&rec).unwrap();
        close(m.range, 2.0);
        for r in &m.rows[1..] {
            close(r.mse, 0.01);
            close(r.psnr, 10.0 * 400f64.log10());
        }
        close(m.rows[1].psnr, 26.020599913279625);
        assert!(trajectory_metrics(&record(vec![0.0; 2], vec![3.0; 2], 2, 0.0)).is_err());
    }

    #[test]
    fn reference_distance_to_final_shrinks_quadratically() {
        let rec = record(vec![0.0, 1.0, -1.0], vec![1.0, -1.0, 0.5], 10, 0.0);
        let m = trajectory_metrics(&rec).unwrap();
        let base = m.rows[0].ref_mse_to_final;
        for r in &m.rows {
            close(r.ref_mse_to_final, (1.0 - r.t).powi(2) * base);
            close(r.mse_to_final, r.ref_mse_to_final);
        }
    }

    #[test]
    fn spearman_basics() {
        close(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]).unwrap(), 1.0);
        close(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, f64::NEG_INFINITY]).unwrap(),
            -1.0,
        );
        close(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]).unwrap(),
            0.894427190999916,
        );
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn metadata_names_conventions() {
        let json = AnalysisMetadata::new("similarity", Some("joint".into())).to_json();
        assert!(json.contains("\"similarity_transform\": \"1 - JSD / ln 2\""));
        assert!(json.contains("psnr_range"));
    }
}
