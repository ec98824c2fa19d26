//! Central-difference verification of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// A scalar objective over a parameter set with an analytic gradient.
pub trait Differentiable {
    fn loss(&self, params: &ParamSet<f64>) -> Result<f64>;

    /// Dense gradients in parameter registration order.
    fn gradient(&self, params: &ParamSet<f64>) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, within `[1e-6, 1e-4]`.
    pub step: f64,
    pub tolerance: f64,
    /// Groups larger than this are checked on a seeded subsample of this size.
    pub max_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_per_group: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub abs_error_at_max: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `f.gradient` against `(f(θ+h) − f(θ−h)) / 2h` scalar by scalar.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: Differentiable + ?Sized>(
    f: &F,
    params: &ParamSet<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::input(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let base = f.loss(params)?;
    if !base.is_finite() {
        return Err(Error::numerical("loss is non-finite at the check point"));
    }
    let analytic = f.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::input("gradient group count differs from parameter count"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for ((id, p), grad) in params.iter().zip(&analytic) {
        let n = p.data.len();
        let mut picks: Vec<usize> = if n <= opts.max_per_group {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, opts.max_per_group).into_vec()
        };
        picks.sort_unstable();

        let mut worst = GroupReport {
            name: p.name.clone(),
            checked: picks.len(),
            max_rel_error: 0.0,
            abs_error_at_max: 0.0,
        };
        for i in picks {
            let orig = p.data[i];
            work.get_mut(id).data[i] = orig + opts.step;
            let up = f.loss(&work)?;
            work.get_mut(id).data[i] = orig - opts.step;
            let down = f.loss(&work)?;
            work.get_mut(id).data[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss while perturbing {}[{i}]",
                    p.name
                )));
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let abs = (grad[i] - numeric).abs();
            let rel = abs / grad[i].abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.abs_error_at_max = abs;
            }
        }
        groups.push(worst);
    }

    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    struct HalfSquare;

    impl Differentiable for HalfSquare {
        fn loss(&self, p: &ParamSet<f64>) -> Result<f64> {
            Ok(0.5 * p.iter().flat_map(|(_, p)| &p.data).map(|v| v * v).sum::<f64>())
        }
        fn gradient(&self, p: &ParamSet<f64>) -> Result<Vec<Vec<f64>>> {
            Ok(p.iter().map(|(_, p)| p.data.clone()).collect())
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let mut set = ParamSet::new();
        set.add("theta", vec![2], vec![1.0, 2.0]);
        let r = grad_check(&HalfSquare, &set, &GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let mut set = ParamSet::new();
        set.add("theta", vec![1], vec![1.0]);
        let opts = GradCheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&HalfSquare, &set, &opts).is_err());
    }

    struct Diverges;

    impl Differentiable for Diverges {
        fn loss(&self, _: &ParamSet<f64>) -> Result<f64> {
            Ok(f64::INFINITY)
        }
        fn gradient(&self, p: &ParamSet<f64>) -> Result<Vec<Vec<f64>>> {
            Ok(p.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect())
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut set = ParamSet::new();
        set.add("theta", vec![1], vec![1.0]);
        let err = grad_check(&Diverges, &set, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    /// `mse(softmax(x·W + b), c)` with seeded parameters.
    struct SoftmaxLinear {
        x: Vec<f64>,
        c: Vec<f64>,
    }

    impl SoftmaxLinear {
        fn build(&self, p: &ParamSet<f64>) -> (Tape<f64>, crate::numerics::Var) {
            let mut tape = Tape::new();
            let x = tape.constant(3, 4, self.x.clone());
            let w = tape.param(p, p.find("w").unwrap());
            let b = tape.param(p, p.find("b").unwrap());
            let h = tape.matmul(x, w);
            let h = tape.add_row(h, b);
            let s = tape.softmax(h);
            let loss = tape.mse(s, self.c.clone());
            (tape, loss)
        }
    }

    impl Differentiable for SoftmaxLinear {
        fn loss(&self, p: &ParamSet<f64>) -> Result<f64> {
            let (tape, l) = self.build(p);
            Ok(tape.scalar(l))
        }
        fn gradient(&self, p: &ParamSet<f64>) -> Result<Vec<Vec<f64>>> {
            let (tape, l) = self.build(p);
            Ok(tape.backward(l).dense(p))
        }
    }

    #[test]
    fn softmax_linear_passes() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut normal = || rng.random_range(-1.0..1.0);
        let mut set = ParamSet::new();
        set.add("w", vec![4, 5], (0..20).map(|_| normal()).collect());
        set.add("b", vec![5], (0..5).map(|_| normal()).collect());
        let f = SoftmaxLinear {
            x: (0..12).map(|_| normal()).collect(),
            c: (0..15).map(|_| normal()).collect(),
        };
        let r = grad_check(&f, &set, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
