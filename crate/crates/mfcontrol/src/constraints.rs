//! Law-constraint functionals and the exact positive-part penalties built
//! from them.
//!
//! A constraint is a functional `Psi(t, mu)` on empirical measures whose sign
//! encodes feasibility: `Psi <= 0` means satisfied at `(t, mu)` (the boundary
//! counts as satisfied). Constraints that only apply at certain times report
//! `None` off those times, which aggregates as "no contribution".
//!
//! Pathwise training needs gradients with respect to the support points; each
//! catalog entry supplies its almost-everywhere gradient. Indicator-valued
//! functionals (`ProbabilityOfSet`, `TerminalLawSet`-style sets) have zero
//! pathwise gradient and are therefore evaluation/penalty-only: they
//! contribute to reported constraint values but not to the gradient signal.

use std::fmt;
use std::sync::Arc;

use crate::measures::{self, EmpiricalMeasure};
use crate::{Error, Result};

/// Where in time a constraint value is being requested.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx {
    /// Step index in `1..=n_steps` (constraints are checked after each step).
    pub step: usize,
    pub n_steps: usize,
    pub t: f64,
    pub dt: f64,
}

impl EvalCtx {
    pub fn is_terminal(&self) -> bool {
        self.step == self.n_steps
    }
}

type CustomEval = dyn Fn(f64, &EmpiricalMeasure) -> f64 + Send + Sync;
/// Accumulates `scale * dPsi/dx_j` for coordinate `c` into `out[c][j]`.
type CustomGrad = dyn Fn(f64, &EmpiricalMeasure, f64, &mut [Vec<f64>]) + Send + Sync;

/// The constraint catalog.
#[derive(Clone)]
pub enum ConstraintSpec {
    /// `p - mu([lo, hi])` on coordinate 0: the set `[lo, hi]` must carry
    /// probability at least `p`. Indicator-valued; zero pathwise gradient.
    ProbabilityOfSet { lo: f64, hi: f64, p: f64 },
    /// Expected distance to the interval `[lo, hi]` on coordinate 0
    /// (almost-sure band constraint in integrated form).
    AsDistance { lo: f64, hi: f64 },
    /// `W2(mu, eta) - radius` against a fixed one-dimensional benchmark
    /// sample `eta`.
    WassersteinBall { benchmark: Vec<f64>, radius: f64 },
    /// `(delta - E[X | X <= theta]) P(X <= theta)` in product form, coord 0.
    TailConditional { theta: f64, delta: f64 },
    /// `Var(mu) - cap` on coordinate 0.
    VarianceCap { cap: f64 },
    /// `E[(lo - x)_+^2 + (x - hi)_+^2]` on coordinate 0.
    SquaredExcursion { lo: f64, hi: f64 },
    /// Constant value, independent of the measure (test and null specs).
    Constant { value: f64 },
    /// `Psi_kappa(t, mu) = Psi(t, mu) - kappa 1{Psi <= 0}`; same sign, same
    /// feasible set, but bounded away from zero on the feasible side.
    KappaModified {
        inner: Box<ConstraintSpec>,
        kappa: f64,
    },
    /// Active only at the final step.
    TerminalOnly { inner: Box<ConstraintSpec> },
    /// Active only at steps whose time matches one of `times` (within dt/2).
    DiscreteTimes {
        inner: Box<ConstraintSpec>,
        times: Vec<f64>,
    },
    /// Arbitrary user functional, with an optional support-point gradient.
    /// Without a gradient the constraint still penalizes but contributes no
    /// pathwise gradient signal.
    Custom {
        name: String,
        eval: Arc<CustomEval>,
        grad: Option<Arc<CustomGrad>>,
    },
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ProbabilityOfSet { lo, hi, p } => {
                write!(f, "ProbabilityOfSet[{lo},{hi}]>= {p}")
            }
            Self::AsDistance { lo, hi } => write!(f, "AsDistance[{lo},{hi}]"),
            Self::WassersteinBall { benchmark, radius } => {
                write!(f, "WassersteinBall(n={}, r={radius})", benchmark.len())
            }
            Self::TailConditional { theta, delta } => {
                write!(f, "TailConditional(theta={theta}, delta={delta})")
            }
            Self::VarianceCap { cap } => write!(f, "VarianceCap({cap})"),
            Self::SquaredExcursion { lo, hi } => write!(f, "SquaredExcursion[{lo},{hi}]"),
            Self::Constant { value } => write!(f, "Constant({value})"),
            Self::KappaModified { inner, kappa } => {
                write!(f, "KappaModified({inner:?}, kappa={kappa})")
            }
            Self::TerminalOnly { inner } => write!(f, "TerminalOnly({inner:?})"),
            Self::DiscreteTimes { inner, times } => {
                write!(f, "DiscreteTimes({inner:?}, {times:?})")
            }
            Self::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// Sign-preserving modification `Psi - kappa 1{Psi <= 0}` used to keep
/// feasible values bounded away from zero.
pub fn kappa_modify(inner: ConstraintSpec, kappa: f64) -> Result<ConstraintSpec> {
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
    }
    Ok(ConstraintSpec::KappaModified {
        inner: Box::new(inner),
        kappa,
    })
}

impl ConstraintSpec {
    /// Constraint value at `(ctx, mu)`, or `None` when the constraint does
    /// not apply at this time.
    pub fn evaluate(&self, ctx: &EvalCtx, mu: &EmpiricalMeasure) -> Result<Option<f64>> {
        let v = match self {
            Self::ProbabilityOfSet { lo, hi, p } => {
                let inside = mu
                    .coord(0)
                    .iter()
                    .filter(|&&x| x >= *lo && x <= *hi)
                    .count() as f64
                    / mu.len() as f64;
                p - inside
            }
            Self::AsDistance { lo, hi } => {
                mu.coord(0)
                    .iter()
                    .map(|&x| (lo - x).max(0.0) + (x - hi).max(0.0))
                    .sum::<f64>()
                    / mu.len() as f64
            }
            Self::WassersteinBall { benchmark, radius } => {
                w2_to_benchmark(mu, benchmark)? - radius
            }
            Self::TailConditional { theta, delta } => {
                measures::tail_conditional(mu, *theta, *delta)
            }
            Self::VarianceCap { cap } => measures::variance(mu)[0] - cap,
            Self::SquaredExcursion { lo, hi } => measures::squared_excursion(mu, *lo, *hi)?,
            Self::Constant { value } => *value,
            Self::KappaModified { inner, kappa } => {
                match inner.evaluate(ctx, mu)? {
                    Some(v) if v <= 0.0 => v - kappa,
                    Some(v) => v,
                    None => return Ok(None),
                }
            }
            Self::TerminalOnly { inner } => {
                if ctx.is_terminal() {
                    return inner.evaluate(ctx, mu);
                }
                return Ok(None);
            }
            Self::DiscreteTimes { inner, times } => {
                if times.iter().any(|&ti| (ctx.t - ti).abs() < 0.5 * ctx.dt) {
                    return inner.evaluate(ctx, mu);
                }
                return Ok(None);
            }
            Self::Custom { eval, .. } => eval(ctx.t, mu),
        };
        Ok(Some(v))
    }

    /// Accumulates `scale * dPsi/dx_j` into `out[c][j]` (coordinate-major,
    /// `out[c].len() >= mu.len()`). Almost-everywhere gradients; indicator
    /// kinds contribute nothing.
    pub fn grad_support(
        &self,
        ctx: &EvalCtx,
        mu: &EmpiricalMeasure,
        scale: f64,
        out: &mut [Vec<f64>],
    ) -> Result<()> {
        let n = mu.len();
        let inv = scale / n as f64;
        match self {
            Self::ProbabilityOfSet { .. } | Self::Constant { .. } => {}
            Self::AsDistance { lo, hi } => {
                for (j, &x) in mu.coord(0).iter().enumerate() {
                    if x < *lo {
                        out[0][j] -= inv;
                    } else if x > *hi {
                        out[0][j] += inv;
                    }
                }
            }
            Self::WassersteinBall { benchmark, .. } => {
                let w = w2_to_benchmark(mu, benchmark)?;
                if w > 0.0 {
                    // Sorted coupling: particle of rank r pairs with the
                    // benchmark quantile of rank r.
                    let xs = mu.coord(0);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
                    let mut eta = benchmark.clone();
                    eta.sort_by(f64::total_cmp);
                    for (rank, &j) in order.iter().enumerate() {
                        let q = quantile_of_sorted(&eta, rank, n);
                        out[0][j] += scale * (xs[j] - q) / (n as f64 * w);
                    }
                }
            }
            Self::TailConditional { theta, .. } => {
                for (j, &x) in mu.coord(0).iter().enumerate() {
                    if x <= *theta {
                        out[0][j] -= inv;
                    }
                }
            }
            Self::VarianceCap { .. } => {
                let m = measures::mean(mu)[0];
                for (j, &x) in mu.coord(0).iter().enumerate() {
                    out[0][j] += inv * 2.0 * (x - m);
                }
            }
            Self::SquaredExcursion { lo, hi } => {
                for (j, &x) in mu.coord(0).iter().enumerate() {
                    out[0][j] += inv * (2.0 * (x - hi).max(0.0) - 2.0 * (lo - x).max(0.0));
                }
            }
            Self::KappaModified { inner, .. } => {
                // The indicator jump sits on a null set; gradient of the
                // inner functional elsewhere.
                inner.grad_support(ctx, mu, scale, out)?;
            }
            Self::TerminalOnly { inner } => {
                if ctx.is_terminal() {
                    inner.grad_support(ctx, mu, scale, out)?;
                }
            }
            Self::DiscreteTimes { inner, times } => {
                if times.iter().any(|&ti| (ctx.t - ti).abs() < 0.5 * ctx.dt) {
                    inner.grad_support(ctx, mu, scale, out)?;
                }
            }
            Self::Custom { grad, .. } => {
                if let Some(g) = grad {
                    g(ctx.t, mu, scale, out);
                }
            }
        }
        Ok(())
    }

    /// True if the constraint contains a time-sparse component (discrete
    /// times or terminal-only), which the integral penalty cannot see.
    pub fn has_time_sparse_part(&self) -> bool {
        match self {
            Self::TerminalOnly { .. } | Self::DiscreteTimes { .. } => true,
            Self::KappaModified { inner, .. } => inner.has_time_sparse_part(),
            _ => false,
        }
    }
}

fn quantile_of_sorted(sorted: &[f64], rank: usize, n: usize) -> f64 {
    // Left-continuous empirical quantile at (rank + 1/2)/n.
    let q = (rank as f64 + 0.5) / n as f64;
    let idx = ((q * sorted.len() as f64) as usize).min(sorted.len() - 1);
    sorted[idx]
}

fn w2_to_benchmark(mu: &EmpiricalMeasure, benchmark: &[f64]) -> Result<f64> {
    if benchmark.is_empty() {
        return Err(Error::Config("empty benchmark sample".into()));
    }
    if mu.len() == benchmark.len() {
        let eta = EmpiricalMeasure::from_slice(benchmark)?;
        return measures::wasserstein2_1d(mu, &eta);
    }
    // Unequal sizes: couple sorted samples with benchmark quantiles.
    let mut xs = mu.coord(0).to_vec();
    xs.sort_by(f64::total_cmp);
    let mut eta = benchmark.to_vec();
    eta.sort_by(f64::total_cmp);
    let n = xs.len();
    let ms = xs
        .iter()
        .enumerate()
        .map(|(r, &x)| {
            let q = quantile_of_sorted(&eta, r, n);
            (x - q) * (x - q)
        })
        .sum::<f64>()
        / n as f64;
    Ok(ms.sqrt())
}

/// How positive parts of per-step constraint values enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    /// `Lambda * sum_i {psi_i}_+ dt` (plus terminal term).
    Integral,
    /// `Lambda * max_i {psi_i}_+` (plus terminal term).
    Supremum,
    /// Terminal term only.
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyMode {
    pub kind: PenaltyKind,
    pub lambda: f64,
}

impl PenaltyMode {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!(
                "penalty weight must be positive, got {lambda}"
            )));
        }
        Ok(Self { kind, lambda })
    }

    /// Configuration-time check: the integral penalty integrates to zero over
    /// time-sparse constraints, so that combination is rejected outright.
    pub fn validate_constraint(&self, spec: &ConstraintSpec) -> Result<()> {
        if self.kind == PenaltyKind::Integral && spec.has_time_sparse_part() {
            return Err(Error::Config(
                "discrete-time or terminal-only constraints cannot use the integral penalty; \
                 use the supremum mode or move the terminal part to the terminal constraint"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Collapses per-step constraint values (steps `1..=n_steps`; `None` where
/// the constraint does not apply) and an optional terminal-constraint value
/// into the nonnegative penalty term.
pub fn aggregate_penalty(
    values: &[Option<f64>],
    mode: PenaltyMode,
    dt: f64,
    terminal_value: Option<f64>,
) -> f64 {
    let lambda = mode.lambda;
    let terminal = lambda * terminal_value.map_or(0.0, |v| v.max(0.0));
    match mode.kind {
        PenaltyKind::Integral => {
            let run: f64 = values
                .iter()
                .flatten()
                .map(|v| v.max(0.0))
                .sum::<f64>()
                * dt;
            lambda * run + terminal
        }
        PenaltyKind::Supremum => {
            let run = values
                .iter()
                .flatten()
                .map(|v| v.max(0.0))
                .fold(0.0f64, f64::max);
            lambda * run + terminal
        }
        PenaltyKind::Terminal => terminal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx_running() -> EvalCtx {
        EvalCtx {
            step: 3,
            n_steps: 10,
            t: 0.3,
            dt: 0.1,
        }
    }

    fn ctx_terminal() -> EvalCtx {
        EvalCtx {
            step: 10,
            n_steps: 10,
            t: 1.0,
            dt: 0.1,
        }
    }

    fn measure(samples: &[f64]) -> EmpiricalMeasure<'_> {
        EmpiricalMeasure::from_slice(samples).unwrap()
    }

    #[test]
    fn probability_of_set_boundary_case() {
        let spec = ConstraintSpec::ProbabilityOfSet {
            lo: 0.0,
            hi: f64::INFINITY,
            p: 0.5,
        };
        let v = spec
            .evaluate(&ctx_running(), &measure(&[-1.0, 1.0]))
            .unwrap()
            .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tail_conditional_delegates_to_measures() {
        let spec = ConstraintSpec::TailConditional {
            theta: 0.9,
            delta: 0.8,
        };
        let s = [0.5, 1.0, 1.5];
        let v = spec.evaluate(&ctx_running(), &measure(&s)).unwrap().unwrap();
        assert_eq!(v, measures::tail_conditional(&measure(&s), 0.9, 0.8));
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn variance_cap_example() {
        // Two points 1 +/- sqrt(0.06): population variance exactly 0.06.
        let r = 0.06f64.sqrt();
        let spec = ConstraintSpec::VarianceCap { cap: 0.0504 };
        let v = spec
            .evaluate(&ctx_terminal(), &measure(&[1.0 - r, 1.0 + r]))
            .unwrap()
            .unwrap();
        assert!((v - 0.0096).abs() < 1e-12, "{v}");
    }

    #[test]
    fn kappa_modification_cases() {
        let base = |value| ConstraintSpec::Constant { value };
        let m = measure(&[0.0]);
        let v = kappa_modify(base(0.3), 1.0)
            .unwrap()
            .evaluate(&ctx_running(), &m)
            .unwrap()
            .unwrap();
        assert_eq!(v, 0.3); // violated: indicator off
        let v = kappa_modify(base(0.0), 1.0)
            .unwrap()
            .evaluate(&ctx_running(), &m)
            .unwrap()
            .unwrap();
        assert_eq!(v, -1.0); // boundary counts as satisfied
        let v = kappa_modify(base(-0.2), 0.5)
            .unwrap()
            .evaluate(&ctx_running(), &m)
            .unwrap()
            .unwrap();
        assert_eq!(v, -0.7);
        assert!(kappa_modify(base(0.0), 0.0).is_err());
        assert!(kappa_modify(base(0.0), -1.0).is_err());
    }

    #[test]
    fn terminal_only_truly_terminal() {
        let spec = ConstraintSpec::TerminalOnly {
            inner: Box::new(ConstraintSpec::Constant { value: 5.0 }),
        };
        let m = measure(&[0.0]);
        assert_eq!(spec.evaluate(&ctx_running(), &m).unwrap(), None);
        assert_eq!(spec.evaluate(&ctx_terminal(), &m).unwrap(), Some(5.0));
    }

    #[test]
    fn discrete_times_activate_by_window() {
        let spec = ConstraintSpec::DiscreteTimes {
            inner: Box::new(ConstraintSpec::Constant { value: 1.0 }),
            times: vec![0.3, 0.7],
        };
        let m = measure(&[0.0]);
        assert_eq!(spec.evaluate(&ctx_running(), &m).unwrap(), Some(1.0));
        let off = EvalCtx {
            step: 5,
            n_steps: 10,
            t: 0.5,
            dt: 0.1,
        };
        assert_eq!(spec.evaluate(&off, &m).unwrap(), None);
    }

    #[test]
    fn aggregate_penalty_examples() {
        let vals = [Some(-1.0), Some(0.3), Some(-0.2)];
        let integral = PenaltyMode::new(PenaltyKind::Integral, 10.0).unwrap();
        let v = aggregate_penalty(&vals, integral, 0.1, None);
        assert!((v - 0.3).abs() < 1e-15);
        let sup = PenaltyMode::new(PenaltyKind::Supremum, 1.0).unwrap();
        assert!((aggregate_penalty(&vals, sup, 0.1, None) - 0.3).abs() < 1e-15);
        // Feasible everywhere: exactly zero in every mode.
        let ok = [Some(-1.0), Some(0.0), None];
        for mode in [
            integral,
            sup,
            PenaltyMode::new(PenaltyKind::Terminal, 7.0).unwrap(),
        ] {
            assert_eq!(aggregate_penalty(&ok, mode, 0.1, Some(-0.5)), 0.0);
        }
    }

    #[test]
    fn integral_mode_rejects_time_sparse_constraints() {
        let spec = ConstraintSpec::DiscreteTimes {
            inner: Box::new(ConstraintSpec::Constant { value: 1.0 }),
            times: vec![0.5],
        };
        let integral = PenaltyMode::new(PenaltyKind::Integral, 1.0).unwrap();
        assert!(integral.validate_constraint(&spec).is_err());
        let sup = PenaltyMode::new(PenaltyKind::Supremum, 1.0).unwrap();
        assert!(sup.validate_constraint(&spec).is_ok());
    }

    #[test]
    fn penalty_weight_must_be_positive() {
        assert!(PenaltyMode::new(PenaltyKind::Integral, 0.0).is_err());
        assert!(PenaltyMode::new(PenaltyKind::Integral, -3.0).is_err());
    }

    /// Finite-difference check of every differentiable catalog entry.
    #[test]
    fn support_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let specs: Vec<ConstraintSpec> = vec![
            ConstraintSpec::AsDistance { lo: -0.5, hi: 0.5 },
            ConstraintSpec::WassersteinBall {
                benchmark: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                radius: 0.1,
            },
            ConstraintSpec::TailConditional {
                theta: 0.2,
                delta: 0.1,
            },
            ConstraintSpec::VarianceCap { cap: 0.05 },
            ConstraintSpec::SquaredExcursion { lo: -0.4, hi: 0.6 },
        ];
        let ctx = ctx_running();
        for spec in &specs {
            let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut grad = vec![vec![0.0; xs.len()]];
            spec.grad_support(&ctx, &measure(&xs), 1.0, &mut grad)
                .unwrap();
            for j in 0..xs.len() {
                let h = 1e-6;
                let mut xp = xs.clone();
                xp[j] += h;
                let mut xm = xs.clone();
                xm[j] -= h;
                let fp = spec.evaluate(&ctx, &measure(&xp)).unwrap().unwrap();
                let fm = spec.evaluate(&ctx, &measure(&xm)).unwrap().unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let ad = grad[0][j];
                assert!(
                    (ad - fd).abs() < 1e-6 * ad.abs().max(fd.abs()).max(1.0),
                    "{spec:?} coord {j}: ad={ad} fd={fd}"
                );
            }
        }
    }

    proptest! {
        /// Sign equivalence of the kappa modification.
        #[test]
        fn kappa_preserves_feasibility(value in -10.0f64..10.0, kappa in 1e-6f64..5.0) {
            let spec = kappa_modify(ConstraintSpec::Constant { value }, kappa).unwrap();
            let m = measure(&[0.0]);
            let v = spec.evaluate(&ctx_running(), &m).unwrap().unwrap();
            prop_assert_eq!(v <= 0.0, value <= 0.0);
        }

        /// Exactness: penalty vanishes iff every positive part vanishes.
        #[test]
        fn penalty_zero_iff_feasible(
            vals in prop::collection::vec(-1.0f64..1.0, 1..20),
            phi in -1.0f64..1.0,
            lambda in 0.1f64..100.0,
        ) {
            let opts: Vec<Option<f64>> = vals.iter().copied().map(Some).collect();
            for kind in [PenaltyKind::Integral, PenaltyKind::Supremum] {
                let mode = PenaltyMode::new(kind, lambda).unwrap();
                let p = aggregate_penalty(&opts, mode, 0.05, Some(phi));
                let feasible = vals.iter().all(|&v| v <= 0.0) && phi <= 0.0;
                prop_assert!(p >= 0.0);
                prop_assert_eq!(p == 0.0, feasible);
            }
        }

        /// Penalty is nondecreasing in Lambda.
        #[test]
        fn penalty_monotone_in_lambda(
            vals in prop::collection::vec(-1.0f64..1.0, 1..10),
            l1 in 0.1f64..50.0,
            bump in 0.0f64..50.0,
        ) {
            let opts: Vec<Option<f64>> = vals.iter().copied().map(Some).collect();
            for kind in [PenaltyKind::Integral, PenaltyKind::Supremum, PenaltyKind::Terminal] {
                let a = aggregate_penalty(&opts, PenaltyMode::new(kind, l1).unwrap(), 0.1, Some(0.2));
                let b = aggregate_penalty(&opts, PenaltyMode::new(kind, l1 + bump).unwrap(), 0.1, Some(0.2));
                prop_assert!(b >= a);
            }
        }
    }
}
