//! Model coefficients as block kernels with hand-derived adjoints.
//!
//! A [`Model`] supplies drift/diffusion stepping, the interaction-statistic
//! basis through which coefficients see the empirical joint law, and the
//! per-particle running cost. Every kernel comes in a forward and a VJP
//! (vector-Jacobian product) flavor; the VJPs are what backpropagation through
//! time consumes, and they are validated against finite differences of the
//! full simulation loss in the level-set tests.
//!
//! Kernels operate on lanes (`[f64; LANES]`, one entry per particle of a
//! block). Group-level quantities (interaction statistics, common-noise
//! increments) arrive already gathered into lanes. All `d_*` outputs
//! accumulate.

use crate::measures::EmpiricalMeasure;
use crate::nn::{Lane, LANES};

/// Shape card of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// State dimension d.
    pub state: usize,
    /// Control dimension q.
    pub control: usize,
    /// Idiosyncratic Brownian coordinates consumed per particle per step.
    pub idio: usize,
    /// Common Brownian coordinates consumed per group per step.
    pub common: usize,
    /// Interaction statistics (empirical averages) the coefficients read.
    pub stats: usize,
}

/// Everything a step kernel sees for one block of particles.
pub struct StepCtx<'a> {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    /// State coordinates, `[state]` lanes.
    pub x: &'a [Lane],
    /// Controls, `[control]` lanes.
    pub a: &'a [Lane],
    /// Group statistics gathered per lane, `[stats]` lanes.
    pub stats: &'a [Lane],
    /// Idiosyncratic increments, `[idio]` lanes (variance dt).
    pub dw: &'a [Lane],
    /// Common increments gathered per lane, `[common]` lanes (variance dt).
    pub dw0: &'a [Lane],
}

pub trait Model: Send + Sync {
    fn dims(&self) -> ModelDims;

    /// Statistic basis `phi_k(t, x_j, a_j)`; group statistics are the
    /// masked within-group averages of these values.
    fn stat_basis(&self, t: f64, x: &[Lane], a: &[Lane], out: &mut [Lane]);

    /// Adjoint of the basis: accumulate `w_k * dphi_k/d(x,a)` into `d_x`,
    /// `d_a`, where `w` carries the group weight `lambda_stat / n` already.
    fn stat_basis_vjp(
        &self,
        t: f64,
        x: &[Lane],
        a: &[Lane],
        w: &[Lane],
        d_x: &mut [Lane],
        d_a: &mut [Lane],
    );

    /// Advance one block: `x_next = step(x, a, stats, noise)`.
    fn step_block(&self, ctx: &StepCtx, x_next: &mut [Lane]);

    /// Adjoint of `step_block`: given `lambda = dL/dx_next`, accumulate
    /// contributions into `d_x`, `d_a` and per-lane `d_stats`.
    fn step_vjp(
        &self,
        ctx: &StepCtx,
        lambda: &[Lane],
        d_x: &mut [Lane],
        d_a: &mut [Lane],
        d_stats: &mut [Lane],
    );

    fn has_running_cost(&self) -> bool {
        false
    }

    /// Per-particle running cost `f(t, x_j, a_j, stats)`.
    fn running_cost(&self, _ctx: &StepCtx, _out: &mut Lane) {}

    /// Adjoint of the running cost with per-lane weight `w_j`.
    fn running_cost_vjp(
        &self,
        _ctx: &StepCtx,
        _w: &Lane,
        _d_x: &mut [Lane],
        _d_a: &mut [Lane],
        _d_stats: &mut [Lane],
    ) {
    }
}

/// Terminal cost as a functional of the (conditional) terminal empirical law:
/// the loss only ever consumes the within-group average of `g`, so the
/// functional form is what gets implemented and differentiated.
pub trait TerminalCost: Send + Sync {
    fn value(&self, mu: &EmpiricalMeasure) -> f64;
    /// Accumulate `scale * d value/dx_j` into `out[c][j]`.
    fn grad(&self, mu: &EmpiricalMeasure, scale: f64, out: &mut [Vec<f64>]);
}

/// `g == 0` (pure running-cost objectives).
pub struct ZeroTerminal;

impl TerminalCost for ZeroTerminal {
    fn value(&self, _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    fn grad(&self, _mu: &EmpiricalMeasure, _scale: f64, _out: &mut [Vec<f64>]) {}
}

/// Constant offset (used by control-variate shifted objectives).
pub struct ConstantTerminal(pub f64);

impl TerminalCost for ConstantTerminal {
    fn value(&self, _mu: &EmpiricalMeasure) -> f64 {
        self.0
    }
    fn grad(&self, _mu: &EmpiricalMeasure, _scale: f64, _out: &mut [Vec<f64>]) {}
}

/// `lambda Var(mu) - E[mu]` on coordinate 0 (risk-adjusted wealth criterion).
pub struct MeanVarianceTerminal {
    pub lambda: f64,
}

impl TerminalCost for MeanVarianceTerminal {
    fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        let stats = crate::measures::variance(mu);
        let mean = crate::measures::mean(mu);
        self.lambda * stats[0] - mean[0]
    }
    fn grad(&self, mu: &EmpiricalMeasure, scale: f64, out: &mut [Vec<f64>]) {
        let n = mu.len() as f64;
        let mean = crate::measures::mean(mu)[0];
        for (j, &x) in mu.coord(0).iter().enumerate() {
            out[0][j] += scale * (2.0 * self.lambda * (x - mean) - 1.0) / n;
        }
    }
}

/// `-E[mu]` on coordinate 0 (wealth maximization written as a cost).
pub struct NegativeMeanTerminal;

impl TerminalCost for NegativeMeanTerminal {
    fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        -crate::measures::mean(mu)[0]
    }
    fn grad(&self, mu: &EmpiricalMeasure, scale: f64, out: &mut [Vec<f64>]) {
        let n = mu.len() as f64;
        for g in out[0][..mu.len()].iter_mut() {
            *g -= scale / n;
        }
    }
}

/// Optional quadratic running cost for [`LinearModel`]:
/// `f = 1/2 x'diag(qx) x + 1/2 a'diag(qa) a + lx.x + la.a + ls.stats
///    + cross.1 * x_0 * stats[cross.0]`.
#[derive(Debug, Clone, Default)]
pub struct QuadraticCost {
    pub qx: Vec<f64>,
    pub qa: Vec<f64>,
    pub lx: Vec<f64>,
    pub la: Vec<f64>,
    pub l_stats: Vec<f64>,
    pub cross: Option<(usize, f64)>,
}

/// Linear-interaction model family: drift and (diagonal) diffusion affine in
/// the state, the control and their empirical means,
///
/// `b_k = beta_k + (B x)_k + (C a)_k + (Bm mean_x)_k + (Cm mean_a)_k`,
/// `vol_k = gamma_k + (D x)_k + (F a)_k + (Dm mean_x)_k + (Fm mean_a)_k`,
/// `x'_k = x_k + b_k dt + vol_k dW_k + (S0 dW0)_k`,
///
/// with constant common-noise loadings `S0` (d x p). Covers the portfolio
/// benchmarks (d = q = 1, `C = [r]`, `F = [sigma]`) and the synthetic
/// interaction models used to probe every gradient channel.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub d: usize,
    pub q: usize,
    pub drift_const: Vec<f64>,
    pub drift_x: Vec<f64>,
    pub drift_a: Vec<f64>,
    pub drift_mean_x: Vec<f64>,
    pub drift_mean_a: Vec<f64>,
    pub diff_const: Vec<f64>,
    pub diff_x: Vec<f64>,
    pub diff_a: Vec<f64>,
    pub diff_mean_x: Vec<f64>,
    pub diff_mean_a: Vec<f64>,
    /// d x p constant loadings on the common increments; empty for none.
    pub diff_common: Vec<f64>,
    pub common_dim: usize,
    pub cost: Option<QuadraticCost>,
}

impl LinearModel {
    /// All-zero coefficients (frozen dynamics).
    pub fn zeros(d: usize, q: usize) -> Self {
        Self {
            d,
            q,
            drift_const: vec![0.0; d],
            drift_x: vec![0.0; d * d],
            drift_a: vec![0.0; d * q],
            drift_mean_x: vec![0.0; d * d],
            drift_mean_a: vec![0.0; d * q],
            diff_const: vec![0.0; d],
            diff_x: vec![0.0; d * d],
            diff_a: vec![0.0; d * q],
            diff_mean_x: vec![0.0; d * d],
            diff_mean_a: vec![0.0; d * q],
            diff_common: Vec::new(),
            common_dim: 0,
            cost: None,
        }
    }

    /// Wealth dynamics `dX = a r dt + a sigma dW` of the portfolio problems.
    pub fn wealth(r: f64, sigma: f64) -> Self {
        let mut m = Self::zeros(1, 1);
        m.drift_a = vec![r];
        m.diff_a = vec![sigma];
        m
    }

    fn uses_stats(&self) -> bool {
        let mean_coeffs = self
            .drift_mean_x
            .iter()
            .chain(&self.drift_mean_a)
            .chain(&self.diff_mean_x)
            .chain(&self.diff_mean_a)
            .any(|&c| c != 0.0);
        let cost_stats = self.cost.as_ref().is_some_and(|c| {
            c.l_stats.iter().any(|&v| v != 0.0) || c.cross.is_some()
        });
        mean_coeffs || cost_stats
    }

    fn n_stats(&self) -> usize {
        if self.uses_stats() {
            self.d + self.q
        } else {
            0
        }
    }

    /// drift and volatility lanes for coordinate k.
    #[inline(always)]
    fn coeffs_for(&self, k: usize, ctx: &StepCtx) -> (Lane, Lane) {
        let mut b = [self.drift_const[k]; LANES];
        let mut v = [self.diff_const[k]; LANES];
        for i in 0..self.d {
            let (bx, vx) = (self.drift_x[k * self.d + i], self.diff_x[k * self.d + i]);
            for l in 0..LANES {
                b[l] = bx.mul_add(ctx.x[i][l], b[l]);
                v[l] = vx.mul_add(ctx.x[i][l], v[l]);
            }
        }
        for i in 0..self.q {
            let (ba, va) = (self.drift_a[k * self.q + i], self.diff_a[k * self.q + i]);
            for l in 0..LANES {
                b[l] = ba.mul_add(ctx.a[i][l], b[l]);
                v[l] = va.mul_add(ctx.a[i][l], v[l]);
            }
        }
        if !ctx.stats.is_empty() {
            for i in 0..self.d {
                let (bm, vm) = (
                    self.drift_mean_x[k * self.d + i],
                    self.diff_mean_x[k * self.d + i],
                );
                for l in 0..LANES {
                    b[l] = bm.mul_add(ctx.stats[i][l], b[l]);
                    v[l] = vm.mul_add(ctx.stats[i][l], v[l]);
                }
            }
            for i in 0..self.q {
                let (bm, vm) = (
                    self.drift_mean_a[k * self.q + i],
                    self.diff_mean_a[k * self.q + i],
                );
                for l in 0..LANES {
                    b[l] = bm.mul_add(ctx.stats[self.d + i][l], b[l]);
                    v[l] = vm.mul_add(ctx.stats[self.d + i][l], v[l]);
                }
            }
        }
        (b, v)
    }
}

impl Model for LinearModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            state: self.d,
            control: self.q,
            idio: self.d,
            common: self.common_dim,
            stats: self.n_stats(),
        }
    }

    fn stat_basis(&self, _t: f64, x: &[Lane], a: &[Lane], out: &mut [Lane]) {
        for k in 0..self.d {
            out[k] = x[k];
        }
        for k in 0..self.q {
            out[self.d + k] = a[k];
        }
    }

    fn stat_basis_vjp(
        &self,
        _t: f64,
        _x: &[Lane],
        _a: &[Lane],
        w: &[Lane],
        d_x: &mut [Lane],
        d_a: &mut [Lane],
    ) {
        for k in 0..self.d {
            for l in 0..LANES {
                d_x[k][l] += w[k][l];
            }
        }
        for k in 0..self.q {
            for l in 0..LANES {
                d_a[k][l] += w[self.d + k][l];
            }
        }
    }

    fn step_block(&self, ctx: &StepCtx, x_next: &mut [Lane]) {
        for k in 0..self.d {
            let (b, v) = self.coeffs_for(k, ctx);
            let mut nx = ctx.x[k];
            for l in 0..LANES {
                nx[l] = b[l].mul_add(ctx.dt, nx[l]);
                nx[l] = v[l].mul_add(ctx.dw[k][l], nx[l]);
            }
            if self.common_dim > 0 {
                for c in 0..self.common_dim {
                    let s0 = self.diff_common[k * self.common_dim + c];
                    for l in 0..LANES {
                        nx[l] = s0.mul_add(ctx.dw0[c][l], nx[l]);
                    }
                }
            }
            x_next[k] = nx;
        }
    }

    fn step_vjp(
        &self,
        ctx: &StepCtx,
        lambda: &[Lane],
        d_x: &mut [Lane],
        d_a: &mut [Lane],
        d_stats: &mut [Lane],
    ) {
        let use_stats = !ctx.stats.is_empty();
        for k in 0..self.d {
            // Weight on drift args: lambda_k dt; on vol args: lambda_k dW_k.
            let lam = lambda[k];
            let mut wb = [0.0; LANES];
            let mut wv = [0.0; LANES];
            for l in 0..LANES {
                wb[l] = lam[l] * ctx.dt;
                wv[l] = lam[l] * ctx.dw[k][l];
                // Identity part of the Euler map.
                d_x[k][l] += lam[l];
            }
            for i in 0..self.d {
                let (bx, vx) = (self.drift_x[k * self.d + i], self.diff_x[k * self.d + i]);
                for l in 0..LANES {
                    d_x[i][l] += bx * wb[l] + vx * wv[l];
                }
            }
            for i in 0..self.q {
                let (ba, va) = (self.drift_a[k * self.q + i], self.diff_a[k * self.q + i]);
                for l in 0..LANES {
                    d_a[i][l] += ba * wb[l] + va * wv[l];
                }
            }
            if use_stats {
                for i in 0..self.d {
                    let (bm, vm) = (
                        self.drift_mean_x[k * self.d + i],
                        self.diff_mean_x[k * self.d + i],
                    );
                    for l in 0..LANES {
                        d_stats[i][l] += bm * wb[l] + vm * wv[l];
                    }
                }
                for i in 0..self.q {
                    let (bm, vm) = (
                        self.drift_mean_a[k * self.q + i],
                        self.diff_mean_a[k * self.q + i],
                    );
                    for l in 0..LANES {
                        d_stats[self.d + i][l] += bm * wb[l] + vm * wv[l];
                    }
                }
            }
        }
    }

    fn has_running_cost(&self) -> bool {
        self.cost.is_some()
    }

    fn running_cost(&self, ctx: &StepCtx, out: &mut Lane) {
        let Some(c) = &self.cost else { return };
        let mut f = [0.0; LANES];
        for k in 0..self.d {
            let (qk, lk) = (c.qx[k], c.lx[k]);
            for l in 0..LANES {
                f[l] += 0.5 * qk * ctx.x[k][l] * ctx.x[k][l] + lk * ctx.x[k][l];
            }
        }
        for k in 0..self.q {
            let (qk, lk) = (c.qa[k], c.la[k]);
            for l in 0..LANES {
                f[l] += 0.5 * qk * ctx.a[k][l] * ctx.a[k][l] + lk * ctx.a[k][l];
            }
        }
        if !ctx.stats.is_empty() {
            for (s, &ls) in c.l_stats.iter().enumerate() {
                for l in 0..LANES {
                    f[l] += ls * ctx.stats[s][l];
                }
            }
            if let Some((s, coef)) = c.cross {
                for l in 0..LANES {
                    f[l] += coef * ctx.x[0][l] * ctx.stats[s][l];
                }
            }
        }
        for l in 0..LANES {
            out[l] += f[l];
        }
    }

    fn running_cost_vjp(
        &self,
        ctx: &StepCtx,
        w: &Lane,
        d_x: &mut [Lane],
        d_a: &mut [Lane],
        d_stats: &mut [Lane],
    ) {
        let Some(c) = &self.cost else { return };
        for k in 0..self.d {
            let (qk, lk) = (c.qx[k], c.lx[k]);
            for l in 0..LANES {
                d_x[k][l] += w[l] * (qk * ctx.x[k][l] + lk);
            }
        }
        for k in 0..self.q {
            let (qk, lk) = (c.qa[k], c.la[k]);
            for l in 0..LANES {
                d_a[k][l] += w[l] * (qk * ctx.a[k][l] + lk);
            }
        }
        if !ctx.stats.is_empty() {
            for (s, &ls) in c.l_stats.iter().enumerate() {
                for l in 0..LANES {
                    d_stats[s][l] += w[l] * ls;
                }
            }
            if let Some((s, coef)) = c.cross {
                for l in 0..LANES {
                    d_x[0][l] += w[l] * coef * ctx.stats[s][l];
                    d_stats[s][l] += w[l] * coef * ctx.x[0][l];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane(v: f64) -> Lane {
        [v; LANES]
    }

    #[test]
    fn frozen_dynamics_leave_state_unchanged() {
        let m = LinearModel::zeros(2, 1);
        let ctx = StepCtx {
            step: 0,
            t: 0.0,
            dt: 0.1,
            x: &[lane(1.0), lane(-2.0)],
            a: &[lane(5.0)],
            stats: &[],
            dw: &[lane(0.3), lane(-0.7)],
            dw0: &[],
        };
        let mut next = [lane(0.0), lane(0.0)];
        m.step_block(&ctx, &mut next);
        assert_eq!(next[0], lane(1.0));
        assert_eq!(next[1], lane(-2.0));
    }

    #[test]
    fn explicit_euler_single_coordinate() {
        // b = x (drift_x = 1), sigma = 0, dt = 0.1, x0 = 1 -> x1 = 1.1.
        let mut m = LinearModel::zeros(1, 1);
        m.drift_x = vec![1.0];
        let ctx = StepCtx {
            step: 0,
            t: 0.0,
            dt: 0.1,
            x: &[lane(1.0)],
            a: &[lane(0.0)],
            stats: &[],
            dw: &[lane(0.55)],
            dw0: &[],
        };
        let mut next = [lane(0.0)];
        m.step_block(&ctx, &mut next);
        for l in 0..LANES {
            assert!((next[0][l] - 1.1).abs() < 1e-15);
        }
    }

    #[test]
    fn wealth_model_null_control_freezes_wealth() {
        let m = LinearModel::wealth(0.15, 0.35);
        let ctx = StepCtx {
            step: 0,
            t: 0.0,
            dt: 0.02,
            x: &[lane(1.0)],
            a: &[lane(0.0)],
            stats: &[],
            dw: &[lane(1.3)],
            dw0: &[],
        };
        let mut next = [lane(0.0)];
        m.step_block(&ctx, &mut next);
        assert_eq!(next[0], lane(1.0));
    }

    #[test]
    fn stats_gate_only_opens_when_used() {
        let mut m = LinearModel::wealth(0.1, 0.2);
        assert_eq!(m.dims().stats, 0);
        m.drift_mean_x = vec![0.5];
        assert_eq!(m.dims().stats, 2); // mean_x and mean_a
    }
}
