//! The level-set solver: train candidate-indexed policies to drive the
//! exactly-penalized auxiliary loss to zero over a grid of target values,
//! then read the constrained optimal value off the zero level-set and
//! recover the optimal feedback control.
//!
//! One network family conditioned on the auxiliary level serves the whole
//! grid; the training objective is the sum of the per-grid-point losses with
//! shared minibatch noise (common random numbers), so a single run produces
//! the whole curve.
//!
//! Gradients are pathwise: noise draws are constants and sensitivities flow
//! through the coefficient evaluations, the empirical-measure averages, and
//! the auxiliary recursion, by one reverse sweep per grid point
//! ([`backward_pass`]). The sweep stores only per-step checkpoints and
//! recomputes network activations, so memory stays linear in the path length.

mod curve;

pub use curve::{AffineExtraction, LevelSetCurve};

use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{aggregate_penalty, EvalCtx, PenaltyKind, PenaltyMode};
use crate::dynamics::{
    self, common_lanes, derive_seed, forward_pass, gather_stats, lanes_at, noise_lanes,
    ForwardOptions, Layout, NoisePlan, Policies, ProblemSpec, SimRecord, StepCtx,
};
use crate::nn::{
    AdamParams, AdamState, Activation, InputScaling, Lane, NetScratch, OutputTransform,
    PolicyNetwork, LANES, ZERO_LANE,
};
use crate::{Error, Result};

/// A problem wired for the solver: the (internally minimizing) training
/// spec, an optional raw-cost spec for audits when the training objective
/// carries a control variate, and presentation metadata.
pub struct SolverProblem {
    pub name: String,
    pub spec: ProblemSpec,
    /// Audit-time cost model; `None` means audit with `spec` itself. Must
    /// share dimensions and statistic basis with `spec`.
    pub audit_spec: Option<ProblemSpec>,
    /// Input normalization for the state coordinates of the policy nets.
    pub state_scaling: InputScaling,
    /// Train martingale-control networks (common-noise formulation).
    pub beta_enabled: bool,
    /// True when the original problem maximizes; costs in `spec` are already
    /// negated and the grid is mirrored internally.
    pub negated: bool,
}

impl SolverProblem {
    fn train_dims(&self) -> dynamics::ModelDims {
        self.spec.model.dims()
    }

    /// Grid in internal (minimization) orientation, ascending.
    pub fn internal_grid(&self, reported: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = if self.negated {
            reported.iter().map(|z| -z).collect()
        } else {
            reported.to_vec()
        };
        g.sort_by(f64::total_cmp);
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Cosine decay from 1 down to `floor` over the run.
    Cosine { floor: f64 },
}

/// Everything the trainer needs besides the problem itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Particles per common-noise group.
    pub batch: usize,
    /// Common-noise groups per iteration (1 without common noise).
    pub groups: usize,
    /// Time steps.
    pub n_steps: usize,
    /// Candidate-value grid in the problem's own orientation.
    pub grid: Vec<f64>,
    /// Penalty weight Lambda.
    pub lambda: f64,
    /// Penalty aggregation: "integral", "supremum" or "terminal".
    pub penalty: String,
    /// Zero level-set threshold.
    pub epsilon: f64,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamParams,
    pub lr_decay: LrDecay,
    pub seed: u64,
    /// Post-training curve evaluation batch (particles per group).
    pub eval_batch: usize,
    pub eval_groups: usize,
    pub eval_replications: usize,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn penalty_mode(&self) -> Result<PenaltyMode> {
        let kind = match self.penalty.as_str() {
            "integral" => PenaltyKind::Integral,
            "supremum" => PenaltyKind::Supremum,
            "terminal" => PenaltyKind::Terminal,
            other => {
                return Err(Error::Config(format!(
                    "unknown penalty mode '{other}' (integral|supremum|terminal)"
                )))
            }
        };
        PenaltyMode::new(kind, self.lambda)
    }

    pub fn validate(&self, problem: &SolverProblem) -> Result<()> {
        if self.batch == 0 || self.groups == 0 || self.n_steps == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "batch, groups, n_steps and iterations must be positive".into(),
            ));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("empty candidate grid".into()));
        }
        if self.grid.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::Config("grid must be strictly increasing".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("threshold must be positive".into()));
        }
        if self.grid.iter().any(|z| !z.is_finite()) {
            return Err(Error::Config("grid bounds must be finite".into()));
        }
        let mode = self.penalty_mode()?;
        if let Some(c) = &problem.spec.constraint {
            mode.validate_constraint(c)?;
        }
        problem.spec.validate()?;
        let dims = problem.train_dims();
        if problem.beta_enabled && dims.common == 0 {
            return Err(Error::Config(
                "beta networks need a model with common noise".into(),
            ));
        }
        if dims.common == 0 && self.groups != 1 {
            return Err(Error::Config(
                "multiple groups only make sense with common noise".into(),
            ));
        }
        Ok(())
    }

    fn dt(&self, horizon: f64) -> f64 {
        horizon / self.n_steps as f64
    }
}

/// One control network per step plus optional martingale-control networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyStack {
    pub alpha: Vec<PolicyNetwork>,
    pub beta: Option<Vec<PolicyNetwork>>,
}

impl PolicyStack {
    pub fn num_params(&self) -> usize {
        self.nets().map(|n| n.num_params()).sum()
    }

    fn nets_mut(&mut self) -> impl Iterator<Item = &mut PolicyNetwork> {
        self.alpha
            .iter_mut()
            .chain(self.beta.iter_mut().flat_map(|n| n.iter_mut()))
    }

    fn nets(&self) -> impl Iterator<Item = &PolicyNetwork> {
        self.alpha
            .iter()
            .chain(self.beta.iter().flat_map(|n| n.iter()))
    }

    /// Flat-gradient offset of each network, alphas first.
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut acc = 0;
        for n in self.nets() {
            out.push(acc);
            acc += n.num_params();
        }
        out
    }

    pub fn get_param(&self, k: usize) -> f64 {
        let mut idx = k;
        for n in self.nets() {
            if idx < n.num_params() {
                return n.params()[idx];
            }
            idx -= n.num_params();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, k: usize, v: f64) {
        let mut idx = k;
        for n in self.nets_mut() {
            if idx < n.num_params() {
                n.params_mut()[idx] = v;
                return;
            }
            idx -= n.num_params();
        }
        panic!("parameter index out of range");
    }

    /// One shared Adam state over the concatenated parameter vector.
    fn apply_adam(&mut self, grads: &[f64], state: &mut AdamState, lr_scale: f64) {
        let offsets = self.offsets();
        state.t += 1;
        let h = state.hyper;
        let bc1 = 1.0 - h.beta1.powi(state.t as i32);
        let bc2 = 1.0 - h.beta2.powi(state.t as i32);
        let lr = h.learning_rate * lr_scale;
        let mut oi = 0;
        for n in self.nets_mut() {
            let off = offsets[oi];
            oi += 1;
            for (k, p) in n.params_mut().iter_mut().enumerate() {
                let g = grads[off + k];
                let m = &mut state.m[off + k];
                let v = &mut state.v[off + k];
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + h.epsilon);
            }
        }
    }
}

/// Loss of one simulated batch, split into its exact-penalty parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub shortfall: f64,
    pub penalty: f64,
    /// Terminal cost functional per group.
    pub gbar: Vec<f64>,
    /// Terminal constraint value per group.
    pub phi: Vec<Option<f64>>,
}

/// Assemble the auxiliary loss from a recorded simulation:
/// mean over groups of `{gbar - Z_T}_+ + penalty`.
pub fn loss_from_record(
    spec: &ProblemSpec,
    mode: PenaltyMode,
    record: &SimRecord,
) -> Result<LossBreakdown> {
    let groups = record.layout.groups;
    let n = record.n_steps;
    let mut gbar = vec![0.0; groups];
    let mut phi = vec![None; groups];
    let ctx = EvalCtx {
        step: n,
        n_steps: n,
        t: n as f64 * record.dt,
        dt: record.dt,
    };
    let mut shortfall_sum = 0.0;
    let mut penalty_sum = 0.0;
    for g in 0..groups {
        let mu = record.measure_at(n, g)?;
        gbar[g] = spec.terminal_cost.value(&mu);
        if let Some(tc) = &spec.terminal_constraint {
            phi[g] = tc.evaluate(&ctx, &mu)?;
        }
        let shortfall = (gbar[g] - record.z[n][g]).max(0.0);
        let psi_col: Vec<Option<f64>> = (0..n).map(|i| record.psi[i][g]).collect();
        let pen = aggregate_penalty(&psi_col, mode, record.dt, phi[g]);
        shortfall_sum += shortfall;
        penalty_sum += pen;
    }
    let inv_g = 1.0 / groups as f64;
    let total = (shortfall_sum + penalty_sum) * inv_g;
    if !total.is_finite() {
        let (step, particle) = record.locate_nonfinite().unwrap_or((n, 0));
        return Err(Error::NonFiniteState { step, particle });
    }
    Ok(LossBreakdown {
        total,
        shortfall: shortfall_sum * inv_g,
        penalty: penalty_sum * inv_g,
        gbar,
        phi,
    })
}

/// Forward-only auxiliary loss at one candidate value.
pub fn auxiliary_loss(
    spec: &ProblemSpec,
    policies: &Policies,
    z0: f64,
    plan: &NoisePlan,
    initial: &[f64],
    mode: PenaltyMode,
) -> Result<(LossBreakdown, SimRecord)> {
    let record = forward_pass(spec, policies, z0, plan, initial, &ForwardOptions::default())?;
    let loss = loss_from_record(spec, mode, &record)?;
    Ok((loss, record))
}

/// Positive-part subgradient weights of the running penalty, per
/// `(step index i in 0..n_steps  <->  level i+1, group)`.
fn penalty_weights(record: &SimRecord, mode: PenaltyMode) -> Vec<Vec<f64>> {
    let groups = record.layout.groups;
    let n = record.n_steps;
    let mut w = vec![vec![0.0; groups]; n];
    match mode.kind {
        PenaltyKind::Integral => {
            for i in 0..n {
                for g in 0..groups {
                    if let Some(v) = record.psi[i][g] {
                        if v > 0.0 {
                            w[i][g] = mode.lambda * record.dt;
                        }
                    }
                }
            }
        }
        PenaltyKind::Supremum => {
            // Subgradient at the (first) running maximum only.
            for g in 0..groups {
                let mut best = 0.0;
                let mut arg = None;
                for i in 0..n {
                    if let Some(v) = record.psi[i][g] {
                        if v > best {
                            best = v;
                            arg = Some(i);
                        }
                    }
                }
                if let Some(i) = arg {
                    w[i][g] = mode.lambda;
                }
            }
        }
        PenaltyKind::Terminal => {}
    }
    w
}

/// Scatter per-group support gradients into a coordinate-major adjoint
/// buffer without allocating per call.
struct SupportGradScratch {
    bufs: Vec<Vec<f64>>,
}

impl SupportGradScratch {
    fn new(d: usize, per_group: usize) -> Self {
        Self {
            bufs: vec![vec![0.0; per_group]; d],
        }
    }

    fn apply<F>(
        &mut self,
        lambda_x: &mut [f64],
        padded: usize,
        offset: usize,
        fill: F,
    ) -> Result<()>
    where
        F: FnOnce(&mut [Vec<f64>]) -> Result<()>,
    {
        for b in self.bufs.iter_mut() {
            b.fill(0.0);
        }
        fill(&mut self.bufs)?;
        for (c, buf) in self.bufs.iter().enumerate() {
            let dst = &mut lambda_x[c * padded + offset..c * padded + offset + buf.len()];
            for (d, s) in dst.iter_mut().zip(buf) {
                *d += s;
            }
        }
        Ok(())
    }
}

/// Reverse sweep through one recorded simulation; accumulates parameter
/// gradients (flat, alphas then betas) into `grads`.
pub fn backward_pass(
    spec: &ProblemSpec,
    stack: &PolicyStack,
    record: &SimRecord,
    plan: &NoisePlan,
    mode: PenaltyMode,
    loss: &LossBreakdown,
    grads: &mut [f64],
) -> Result<()> {
    let dims = record.dims;
    let layout = record.layout;
    let padded = layout.padded();
    let groups = layout.groups;
    let per_group = layout.per_group;
    let n_steps = record.n_steps;
    let dt = record.dt;
    let model = spec.model.as_ref();
    let inv_g = 1.0 / groups as f64;
    let inv_n = 1.0 / per_group as f64;
    let offsets = stack.offsets();
    let n_alpha = stack.alpha.len();

    let w_pen = penalty_weights(record, mode);

    let mut lam_x_next = vec![0.0; dims.state * padded];
    let mut lam_x_cur = vec![0.0; dims.state * padded];
    let mut lam_z_next = vec![0.0; groups];
    let mut lam_z_cur = vec![0.0; groups];
    let mut support = SupportGradScratch::new(dims.state, per_group);

    // Terminal level: shortfall gate, terminal cost, terminal constraint and
    // the last running-penalty slot.
    let ctx_term = EvalCtx {
        step: n_steps,
        n_steps,
        t: n_steps as f64 * dt,
        dt,
    };
    for g in 0..groups {
        let gate = if loss.gbar[g] - record.z[n_steps][g] > 0.0 {
            1.0
        } else {
            0.0
        };
        lam_z_next[g] = -gate * inv_g;
        let mu = record.measure_at(n_steps, g)?;
        if gate > 0.0 {
            support.apply(&mut lam_x_next, padded, g * per_group, |bufs| {
                spec.terminal_cost.grad(&mu, inv_g, bufs);
                Ok(())
            })?;
        }
        if let (Some(tc), Some(phi)) = (&spec.terminal_constraint, loss.phi[g]) {
            if phi > 0.0 {
                support.apply(&mut lam_x_next, padded, g * per_group, |bufs| {
                    tc.grad_support(&ctx_term, &mu, mode.lambda * inv_g, bufs)
                })?;
            }
        }
        let w = w_pen[n_steps - 1][g];
        if w > 0.0 {
            if let Some(cons) = &spec.constraint {
                support.apply(&mut lam_x_next, padded, g * per_group, |bufs| {
                    cons.grad_support(&ctx_term, &mu, w * inv_g, bufs)
                })?;
            }
        }
    }

    let n_blocks = layout.n_blocks();
    let mut scratches: Vec<NetScratch> = (0..n_blocks)
        .map(|_| NetScratch::new(&stack.alpha[0]))
        .collect();
    let alpha_in_dim = stack.alpha[0].input_dim();
    let mut d_a_buf = vec![0.0; dims.control * padded];
    let mut d_x_buf = vec![0.0; dims.state * padded];
    let mut lam_stats = vec![0.0; dims.stats * groups];
    let mut input: Vec<Lane> = Vec::with_capacity(alpha_in_dim);
    let mut beta_scratch = stack.beta.as_ref().map(|nets| NetScratch::new(&nets[0]));

    for i in (0..n_steps).rev() {
        let t = i as f64 * dt;
        let cur = &record.states[i];
        let z_cur = &record.z[i];
        let w0_cur = &record.w0[i];
        let net = &stack.alpha[i];
        d_a_buf.fill(0.0);
        d_x_buf.fill(0.0);
        lam_stats.fill(0.0);
        lam_z_cur.copy_from_slice(&lam_z_next);

        // Recompute controls; activations stay recorded per block.
        for (b, scratch) in scratches.iter_mut().enumerate() {
            let start = b * LANES;
            let (_, gid) = layout.block_info(b);
            input.clear();
            for c in 0..dims.state {
                input.push(
                    cur[c * padded + start..c * padded + start + LANES]
                        .try_into()
                        .expect("lane"),
                );
            }
            let mut zl = ZERO_LANE;
            for l in 0..LANES {
                zl[l] = z_cur[gid[l]];
            }
            input.push(zl);
            for c in 0..dims.common {
                let mut wl = ZERO_LANE;
                for l in 0..LANES {
                    wl[l] = w0_cur[c * groups + gid[l]];
                }
                input.push(wl);
            }
            net.forward_block(&input, scratch);
        }

        // Pass 1: dynamics and running-cost adjoints per particle.
        for (b, scratch) in scratches.iter().enumerate() {
            let start = b * LANES;
            let (mask, gid) = layout.block_info(b);
            let xb = lanes_at(cur, dims.state, padded, start);
            let ab: Vec<Lane> = scratch.output().to_vec();
            let sb = gather_stats(&record.stats[i], dims.stats, groups, &gid);
            let dwb = noise_lanes(plan, i, dims.idio, start);
            let dw0b = common_lanes(plan, i, dims.common, &gid);
            let ctx = StepCtx {
                step: i,
                t,
                dt,
                x: &xb,
                a: &ab,
                stats: &sb,
                dw: &dwb,
                dw0: &dw0b,
            };
            let lam: Vec<Lane> = lanes_at(&lam_x_next, dims.state, padded, start);
            let mut d_x = vec![ZERO_LANE; dims.state];
            let mut d_a = vec![ZERO_LANE; dims.control];
            let mut d_st = vec![ZERO_LANE; dims.stats];
            model.step_vjp(&ctx, &lam, &mut d_x, &mut d_a, &mut d_st);
            if model.has_running_cost() {
                let mut wf = ZERO_LANE;
                for l in 0..LANES {
                    wf[l] = -dt * inv_n * lam_z_next[gid[l]];
                }
                model.running_cost_vjp(&ctx, &wf, &mut d_x, &mut d_a, &mut d_st);
            }
            for c in 0..dims.state {
                for l in 0..LANES {
                    d_x_buf[c * padded + start + l] = d_x[c][l] * mask[l];
                }
            }
            for c in 0..dims.control {
                for l in 0..LANES {
                    d_a_buf[c * padded + start + l] = d_a[c][l] * mask[l];
                }
            }
            for k in 0..dims.stats {
                for l in 0..LANES {
                    lam_stats[k * groups + gid[l]] += d_st[k][l] * mask[l];
                }
            }
        }

        // Pass 2: distribute the statistics channel, then pull everything
        // through the control networks.
        let goff = offsets[i];
        let gslice_len = net.num_params();
        for (b, scratch) in scratches.iter().enumerate() {
            let start = b * LANES;
            let (mask, gid) = layout.block_info(b);
            let mut d_x = lanes_at(&d_x_buf, dims.state, padded, start);
            let mut d_a = lanes_at(&d_a_buf, dims.control, padded, start);
            if dims.stats > 0 {
                let xb = lanes_at(cur, dims.state, padded, start);
                let ab: Vec<Lane> = scratch.output().to_vec();
                let mut w = vec![ZERO_LANE; dims.stats];
                for k in 0..dims.stats {
                    for l in 0..LANES {
                        w[k][l] = lam_stats[k * groups + gid[l]] * inv_n * mask[l];
                    }
                }
                model.stat_basis_vjp(t, &xb, &ab, &w, &mut d_x, &mut d_a);
            }
            let mut d_input = vec![ZERO_LANE; alpha_in_dim];
            net.backward_block(
                scratch,
                &d_a,
                &mut grads[goff..goff + gslice_len],
                &mut d_input,
            );
            for c in 0..dims.state {
                let dst = &mut lam_x_cur[c * padded + start..c * padded + start + LANES];
                for l in 0..LANES {
                    dst[l] += d_x[c][l] + d_input[c][l];
                }
            }
            for l in 0..LANES {
                lam_z_cur[gid[l]] += d_input[dims.state][l];
            }
        }

        // Martingale-control networks: Z' = Z - fbar dt + beta(Z, W0) . dW0.
        if let (Some(beta_nets), Some(bscr)) = (stack.beta.as_ref(), beta_scratch.as_mut()) {
            let bnet = &beta_nets[i];
            let boff = offsets[n_alpha + i];
            let blen = bnet.num_params();
            for gb in 0..layout.group_blocks() {
                let start = gb * LANES;
                let mut binput: Vec<Lane> = Vec::with_capacity(1 + dims.common);
                let mut zl = ZERO_LANE;
                for l in 0..LANES {
                    zl[l] = z_cur[(start + l).min(groups - 1)];
                }
                binput.push(zl);
                for c in 0..dims.common {
                    let mut wl = ZERO_LANE;
                    for l in 0..LANES {
                        wl[l] = w0_cur[c * groups + (start + l).min(groups - 1)];
                    }
                    binput.push(wl);
                }
                bnet.forward_block(&binput, bscr);
                let mut d_out = vec![ZERO_LANE; dims.common];
                for c in 0..dims.common {
                    let inc = plan.common(i, c);
                    for l in 0..LANES {
                        let g = start + l;
                        if g < groups {
                            d_out[c][l] = lam_z_next[g] * inc[g];
                        }
                    }
                }
                let mut d_input = vec![ZERO_LANE; 1 + dims.common];
                bnet.backward_block(bscr, &d_out, &mut grads[boff..boff + blen], &mut d_input);
                for l in 0..LANES {
                    let g = start + l;
                    if g < groups {
                        lam_z_cur[g] += d_input[0][l];
                    }
                }
            }
        }

        // Direct running-penalty gradient at level i (for i >= 1).
        if i >= 1 {
            if let Some(cons) = &spec.constraint {
                let ctx = EvalCtx {
                    step: i,
                    n_steps,
                    t,
                    dt,
                };
                for g in 0..groups {
                    let w = w_pen[i - 1][g];
                    if w > 0.0 {
                        let mu = record.measure_at(i, g)?;
                        support.apply(&mut lam_x_cur, padded, g * per_group, |bufs| {
                            cons.grad_support(&ctx, &mu, w * inv_g, bufs)
                        })?;
                    }
                }
            }
        }

        std::mem::swap(&mut lam_x_next, &mut lam_x_cur);
        lam_x_cur.fill(0.0);
        std::mem::swap(&mut lam_z_next, &mut lam_z_cur);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr_scale: f64,
}

pub struct TrainOutcome {
    pub stack: PolicyStack,
    pub curve: LevelSetCurve,
    pub log: Vec<TrainLogRow>,
    pub final_loss: f64,
    pub wall_secs: f64,
}

/// Build a freshly initialized policy stack for the problem.
pub fn build_stack(problem: &SolverProblem, cfg: &TrainConfig) -> Result<PolicyStack> {
    let dims = problem.train_dims();
    let horizon = problem.spec.horizon;
    let internal = problem.internal_grid(&cfg.grid);
    let z_center = 0.5 * (internal[0] + internal[internal.len() - 1]);
    let z_half = (0.5 * (internal[internal.len() - 1] - internal[0])).max(1e-12);
    let w0_scale = 1.0 / horizon.sqrt().max(1e-12);

    let mut shift = problem.state_scaling.shift.clone();
    let mut scale = problem.state_scaling.scale.clone();
    if shift.len() != dims.state {
        return Err(Error::Dimension {
            expected: dims.state,
            got: shift.len(),
        });
    }
    shift.push(z_center);
    scale.push(1.0 / z_half);
    for _ in 0..dims.common {
        shift.push(0.0);
        scale.push(w0_scale);
    }
    let alpha_scaling = InputScaling { shift, scale };

    let transform = match &problem.spec.control_bounds {
        Some((lo, hi)) => OutputTransform::Box {
            lo: lo.clone(),
            hi: hi.clone(),
        },
        None => OutputTransform::Identity,
    };
    let input_dim = dims.state + 1 + dims.common;
    let mut alpha = Vec::with_capacity(cfg.n_steps);
    for i in 0..cfg.n_steps {
        let mut net = PolicyNetwork::new(
            input_dim,
            &cfg.hidden,
            dims.control,
            Activation::Tanh,
            transform.clone(),
        )?
        .with_input_scaling(alpha_scaling.clone())?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(
            cfg.seed,
            "init-alpha",
            i as u64,
        ));
        net.init_uniform(&mut rng);
        alpha.push(net);
    }
    let beta = if problem.beta_enabled {
        let mut shift = vec![z_center];
        let mut scale = vec![1.0 / z_half];
        for _ in 0..dims.common {
            shift.push(0.0);
            scale.push(w0_scale);
        }
        let beta_scaling = InputScaling { shift, scale };
        let mut nets = Vec::with_capacity(cfg.n_steps);
        for i in 0..cfg.n_steps {
            let mut net = PolicyNetwork::new(
                1 + dims.common,
                &cfg.hidden,
                dims.common,
                Activation::Tanh,
                OutputTransform::Identity,
            )?
            .with_input_scaling(beta_scaling.clone())?;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(
                cfg.seed,
                "init-beta",
                i as u64,
            ));
            net.init_uniform(&mut rng);
            // Start with the martingale control switched off: zero output
            // layer, so beta == 0 at iteration 0.
            let (inp, out) = *net.layer_dims().last().unwrap();
            let n = net.num_params();
            net.params_mut()[n - inp * out - out..].fill(0.0);
            nets.push(net);
        }
        Some(nets)
    } else {
        None
    };
    Ok(PolicyStack { alpha, beta })
}

/// Sum of per-grid-point losses and its gradient for one minibatch; grid
/// points share the noise plan and initial sample (common random numbers)
/// and evaluate in parallel.
fn grid_loss_and_grad(
    problem: &SolverProblem,
    stack: &PolicyStack,
    internal_grid: &[f64],
    plan: &NoisePlan,
    initial: &[f64],
    mode: PenaltyMode,
) -> Result<(f64, Vec<f64>)> {
    let n_params = stack.num_params();
    let results: Vec<Result<(f64, Vec<f64>)>> = internal_grid
        .par_iter()
        .map(|&z0| {
            let policies = Policies {
                alpha: &stack.alpha,
                beta: stack.beta.as_deref(),
            };
            let record = forward_pass(
                &problem.spec,
                &policies,
                z0,
                plan,
                initial,
                &ForwardOptions::default(),
            )?;
            let loss = loss_from_record(&problem.spec, mode, &record)?;
            let mut grads = vec![0.0; n_params];
            backward_pass(&problem.spec, stack, &record, plan, mode, &loss, &mut grads)?;
            Ok((loss.total, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = vec![0.0; n_params];
    for r in results {
        let (l, g) = r?;
        total += l;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok((total, grads))
}

/// Train the policy stack on the summed grid loss, then evaluate the curve
/// with independent noise and the (larger) evaluation batch.
pub fn train(problem: &SolverProblem, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(problem)?;
    let start = Instant::now();
    let mode = cfg.penalty_mode()?;
    let dims = problem.train_dims();
    let internal = problem.internal_grid(&cfg.grid);
    let mut stack = build_stack(problem, cfg)?;
    let mut adam = AdamState::new(stack.num_params(), cfg.adam);
    let layout = Layout::new(cfg.groups, cfg.batch)?;
    let dt = cfg.dt(problem.spec.horizon);
    let mut log = Vec::new();
    let mut last_loss = f64::NAN;

    for it in 0..cfg.iterations {
        let plan = NoisePlan::generate(
            layout,
            &dims,
            cfg.n_steps,
            dt,
            derive_seed(cfg.seed, "train-noise", it as u64),
        );
        let initial = problem
            .spec
            .initial
            .sample(&layout, derive_seed(cfg.seed, "train-init", it as u64));
        let (loss, grads) = grid_loss_and_grad(problem, &stack, &internal, &plan, &initial, mode)
            .map_err(|e| match e {
                Error::NonFiniteState { step, particle } => Error::Divergence {
                    iteration: it,
                    detail: format!("non-finite state at step {step}, particle {particle}"),
                },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("loss = {loss}"),
            });
        }
        let lr_scale = match cfg.lr_decay {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine { floor } => {
                let frac = it as f64 / cfg.iterations.max(1) as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        };
        stack.apply_adam(&grads, &mut adam, lr_scale);
        last_loss = loss;
        if it % cfg.log_every.max(1) == 0 || it + 1 == cfg.iterations {
            let gnorm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            log.push(TrainLogRow {
                iteration: it,
                loss,
                grad_norm: gnorm,
                lr_scale,
            });
        }
    }

    let curve = evaluate_curve(
        problem,
        &stack,
        cfg,
        cfg.eval_batch,
        cfg.eval_groups,
        cfg.eval_replications,
        derive_seed(cfg.seed, "eval", 0),
    )?;
    Ok(TrainOutcome {
        stack,
        curve,
        log,
        final_loss: last_loss,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Evaluate the auxiliary-loss curve under common random numbers across the
/// grid: each replication draws one noise plan and one initial sample shared
/// by all grid points; error bars are standard errors across replications.
pub fn evaluate_curve(
    problem: &SolverProblem,
    stack: &PolicyStack,
    cfg: &TrainConfig,
    batch: usize,
    groups: usize,
    replications: usize,
    seed: u64,
) -> Result<LevelSetCurve> {
    let mode = cfg.penalty_mode()?;
    let dims = problem.train_dims();
    let internal = problem.internal_grid(&cfg.grid);
    let layout = Layout::new(groups, batch)?;
    let dt = cfg.dt(problem.spec.horizon);
    let reps = replications.max(1);
    let rows: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let plan = NoisePlan::generate(
                layout,
                &dims,
                cfg.n_steps,
                dt,
                derive_seed(seed, "eval-noise", r as u64),
            );
            let initial = problem
                .spec
                .initial
                .sample(&layout, derive_seed(seed, "eval-init", r as u64));
            let policies = Policies {
                alpha: &stack.alpha,
                beta: stack.beta.as_deref(),
            };
            internal
                .iter()
                .map(|&z0| {
                    auxiliary_loss(&problem.spec, &policies, z0, &plan, &initial, mode)
                        .map(|(l, _)| l.total)
                })
                .collect()
        })
        .collect();
    let mut table = Vec::with_capacity(reps);
    for row in rows {
        table.push(row?);
    }
    let m = internal.len();
    let mut w = vec![0.0; m];
    let mut se = vec![0.0; m];
    for j in 0..m {
        let vals: Vec<f64> = table.iter().map(|row| row[j]).collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        w[j] = mean;
        if reps > 1 {
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
            se[j] = (var / reps as f64).sqrt();
        }
    }
    LevelSetCurve::new(internal, w, se, cfg.epsilon, problem.negated)
}

/// A feedback control family read off the trained stack at the extracted
/// value: the auxiliary coordinate is pinned to the level path started at
/// the value (deterministic path without common noise; per-path with).
pub struct RecoveredControl {
    pub stack: PolicyStack,
    /// Extracted value on the internal (minimization) scale.
    pub v0_internal: f64,
    /// Frozen level path (no common noise); `None` with common noise.
    pub z_path: Option<Vec<f64>>,
}

impl RecoveredControl {
    /// Per-step state-feedback map (no-common-noise problems).
    pub fn feedback(&self, step: usize, x: &[f64]) -> Result<Vec<f64>> {
        let path = self
            .z_path
            .as_ref()
            .ok_or_else(|| Error::Config("feedback maps need a frozen level path".into()))?;
        let net = &self.stack.alpha[step];
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(path[step]);
        net.forward(&input)
    }
}

/// Fix the auxiliary coordinate at `v0_internal` and return the feedback
/// family. Without common noise the level path is computed once on a large
/// batch and frozen.
pub fn recover_control(
    problem: &SolverProblem,
    stack: &PolicyStack,
    v0_internal: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RecoveredControl> {
    let dims = problem.train_dims();
    let z_path = if dims.common == 0 {
        let layout = Layout::new(1, cfg.eval_batch)?;
        let dt = cfg.dt(problem.spec.horizon);
        let plan = NoisePlan::generate(
            layout,
            &dims,
            cfg.n_steps,
            dt,
            derive_seed(seed, "recover-noise", 0),
        );
        let initial = problem
            .spec
            .initial
            .sample(&layout, derive_seed(seed, "recover-init", 0));
        let policies = Policies {
            alpha: &stack.alpha,
            beta: None,
        };
        let record = forward_pass(
            &problem.spec,
            &policies,
            v0_internal,
            &plan,
            &initial,
            &ForwardOptions::default(),
        )?;
        Some(record.z.iter().map(|zs| zs[0]).collect())
    } else {
        None
    };
    Ok(RecoveredControl {
        stack: stack.clone(),
        v0_internal,
        z_path,
    })
}

/// Re-simulation audit of a recovered control.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    /// Achieved objective in the problem's own orientation.
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// Pooled terminal mean/variance per state coordinate.
    pub terminal_mean: Vec<f64>,
    pub terminal_variance: Vec<f64>,
    /// Per-step running-constraint value (worst group, averaged over
    /// replications); `None` where the constraint does not apply.
    pub psi_per_step: Vec<Option<f64>>,
    pub psi_max: f64,
    /// Terminal-constraint value (worst group, averaged over replications).
    pub phi: Option<f64>,
    /// Terminal samples of the last replication, coordinate-major.
    #[serde(skip)]
    pub terminal_samples: Vec<Vec<f64>>,
}

/// Re-simulate the recovered control on fresh noise and report achieved
/// cost, constraint values and terminal statistics. When the problem has a
/// separate audit spec (control-variate training objectives), the cost is
/// re-evaluated under the raw model from the recorded states and controls.
pub fn audit_control(
    problem: &SolverProblem,
    rc: &RecoveredControl,
    cfg: &TrainConfig,
    batch: usize,
    groups: usize,
    replications: usize,
    seed: u64,
) -> Result<AuditReport> {
    let dims = problem.train_dims();
    let layout = Layout::new(groups, batch)?;
    let dt = cfg.dt(problem.spec.horizon);
    let needs_controls = problem.audit_spec.is_some();
    let reps = replications.max(1);
    let mut costs = Vec::with_capacity(reps);
    let mut psi_acc: Vec<Option<f64>> = vec![None; cfg.n_steps];
    let mut phi_acc: Option<f64> = None;
    let mut terminal_samples: Vec<Vec<f64>> = Vec::new();
    let mut term_mean = vec![0.0; dims.state];
    let mut term_var = vec![0.0; dims.state];

    for r in 0..reps {
        let plan = NoisePlan::generate(
            layout,
            &dims,
            cfg.n_steps,
            dt,
            derive_seed(seed, "audit-noise", r as u64),
        );
        let initial = problem
            .spec
            .initial
            .sample(&layout, derive_seed(seed, "audit-init", r as u64));
        let policies = Policies {
            alpha: &rc.stack.alpha,
            beta: rc.stack.beta.as_deref(),
        };
        let opts = ForwardOptions {
            keep_controls: needs_controls,
            frozen_z: rc.z_path.clone(),
        };
        let record = forward_pass(
            &problem.spec,
            &policies,
            rc.v0_internal,
            &plan,
            &initial,
            &opts,
        )?;
        let cost_spec = problem.audit_spec.as_ref().unwrap_or(&problem.spec);
        let mut cost = cost_from_record(cost_spec, &record)?;
        if problem.negated {
            cost = -cost;
        }
        costs.push(cost);
        for i in 0..cfg.n_steps {
            let worst = record.psi[i]
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            if worst > f64::NEG_INFINITY {
                let slot = &mut psi_acc[i];
                *slot = Some(slot.unwrap_or(0.0) + worst / reps as f64);
            }
        }
        if let Some(tc) = &problem.spec.terminal_constraint {
            let ctx = EvalCtx {
                step: cfg.n_steps,
                n_steps: cfg.n_steps,
                t: problem.spec.horizon,
                dt,
            };
            let mut worst = f64::NEG_INFINITY;
            for g in 0..groups {
                if let Some(v) = tc.evaluate(&ctx, &record.measure_at(cfg.n_steps, g)?)? {
                    worst = worst.max(v);
                }
            }
            if worst > f64::NEG_INFINITY {
                phi_acc = Some(phi_acc.unwrap_or(0.0) + worst / reps as f64);
            }
        }
        if r + 1 == reps {
            let padded = layout.padded();
            let total = layout.total();
            let term = &record.states[cfg.n_steps];
            for c in 0..dims.state {
                let xs = &term[c * padded..c * padded + total];
                let mean = xs.iter().sum::<f64>() / total as f64;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / total as f64;
                term_mean[c] = mean;
                term_var[c] = var;
                terminal_samples.push(xs.to_vec());
            }
        }
    }
    let mean = costs.iter().sum::<f64>() / reps as f64;
    let stderr = if reps > 1 {
        (costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (reps as f64 - 1.0)
            / reps as f64)
            .sqrt()
    } else {
        0.0
    };
    let psi_max = psi_acc
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(AuditReport {
        cost_mean: mean,
        cost_stderr: stderr,
        terminal_mean: term_mean,
        terminal_variance: term_var,
        psi_per_step: psi_acc,
        psi_max,
        phi: phi_acc,
        terminal_samples,
    })
}

/// Achieved objective of a recorded simulation under the given cost spec:
/// `sum_i mean_g fbar_i dt + mean_g gbar` (the original problem's cost).
pub fn cost_from_record(spec: &ProblemSpec, record: &SimRecord) -> Result<f64> {
    let dims = record.dims;
    let layout = record.layout;
    let padded = layout.padded();
    let groups = layout.groups;
    let inv_n = 1.0 / layout.per_group as f64;
    let inv_g = 1.0 / groups as f64;
    let model = spec.model.as_ref();
    let mut running = 0.0;
    if model.has_running_cost() {
        for i in 0..record.n_steps {
            let t = i as f64 * record.dt;
            let controls = match record.controls.as_ref() {
                Some(c) => &c[i],
                // Same model as the training spec: the recorded averages
                // are already the right running cost.
                None => {
                    running += record.fbar[i].iter().sum::<f64>() * inv_g * record.dt;
                    continue;
                }
            };
            let mut fbar = vec![0.0; groups];
            for b in 0..layout.n_blocks() {
                let start = b * LANES;
                let (mask, gid) = layout.block_info(b);
                let xb = lanes_at(&record.states[i], dims.state, padded, start);
                let ab = lanes_at(controls, dims.control, padded, start);
                let sb = gather_stats(&record.stats[i], dims.stats, groups, &gid);
                let ctx = StepCtx {
                    step: i,
                    t,
                    dt: record.dt,
                    x: &xb,
                    a: &ab,
                    stats: &sb,
                    dw: &[],
                    dw0: &[],
                };
                let mut f = ZERO_LANE;
                model.running_cost(&ctx, &mut f);
                for l in 0..LANES {
                    fbar[gid[l]] += f[l] * mask[l];
                }
            }
            running += fbar.iter().sum::<f64>() * inv_n * inv_g * record.dt;
        }
    }
    let mut terminal = 0.0;
    for g in 0..groups {
        terminal += spec
            .terminal_cost
            .value(&record.measure_at(record.n_steps, g)?);
    }
    Ok(running + terminal * inv_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintSpec;
    use crate::dynamics::{InitialLaw, LinearModel, MeanVarianceTerminal, QuadraticCost, ZeroTerminal};
    use std::sync::Arc;

    /// Linear-interaction instance with every gradient channel active:
    /// state/control/mean coefficients in drift and diffusion, a running cost
    /// with a measure cross term, a running band constraint that is violated,
    /// and a terminal variance cap that binds.
    fn synthetic_model(common: bool) -> LinearModel {
        let mut m = LinearModel::zeros(2, 2);
        m.drift_const = vec![0.01, -0.02];
        m.drift_x = vec![0.10, -0.05, 0.02, 0.08];
        m.drift_a = vec![0.30, 0.10, 0.00, 0.25];
        m.drift_mean_x = vec![0.05, 0.00, -0.04, 0.10];
        m.drift_mean_a = vec![0.02, 0.03, 0.01, 0.00];
        m.diff_const = vec![0.15, 0.20];
        m.diff_x = vec![0.05, 0.00, 0.02, -0.03];
        m.diff_a = vec![0.10, -0.02, 0.05, 0.08];
        m.diff_mean_x = vec![0.01, 0.02, 0.00, 0.03];
        m.diff_mean_a = vec![0.02, 0.00, 0.01, 0.02];
        if common {
            m.common_dim = 1;
            m.diff_common = vec![0.10, 0.07];
        }
        m.cost = Some(QuadraticCost {
            qx: vec![0.20, 0.10],
            qa: vec![0.30, 0.15],
            lx: vec![0.05, -0.02],
            la: vec![0.01, 0.02],
            l_stats: vec![0.02, -0.01, 0.03, 0.01],
            cross: Some((2, 0.04)),
        });
        m
    }

    fn synthetic_problem(common: bool) -> SolverProblem {
        let spec = ProblemSpec {
            model: Arc::new(synthetic_model(common)),
            terminal_cost: Arc::new(MeanVarianceTerminal { lambda: 0.7 }),
            constraint: Some(ConstraintSpec::SquaredExcursion { lo: -0.8, hi: 0.9 }),
            terminal_constraint: Some(ConstraintSpec::VarianceCap { cap: 0.01 }),
            initial: InitialLaw::NormalIid {
                mean: vec![1.0, 0.0],
                std: vec![0.3, 0.2],
            },
            horizon: 1.0,
            control_bounds: Some((vec![-1.0, -1.0], vec![1.0, 1.0])),
        };
        SolverProblem {
            name: "synthetic".into(),
            spec,
            audit_spec: None,
            state_scaling: InputScaling::identity(2),
            beta_enabled: common,
            negated: false,
        }
    }

    fn small_config(grid: Vec<f64>, groups: usize, batch: usize, penalty: &str) -> TrainConfig {
        TrainConfig {
            batch,
            groups,
            n_steps: 3,
            grid,
            lambda: 2.0,
            penalty: penalty.into(),
            epsilon: 1e-8,
            iterations: 1,
            hidden: vec![6],
            adam: AdamParams::default(),
            lr_decay: LrDecay::Constant,
            seed: 77,
            eval_batch: batch,
            eval_groups: groups,
            eval_replications: 2,
            log_every: 1,
        }
    }

    fn fd_check(problem: &SolverProblem, cfg: &TrainConfig, z0: f64, probes: usize) {
        let mode = cfg.penalty_mode().unwrap();
        let dims = problem.spec.model.dims();
        let layout = Layout::new(cfg.groups, cfg.batch).unwrap();
        let dt = cfg.dt(problem.spec.horizon);
        let plan = NoisePlan::generate(layout, &dims, cfg.n_steps, dt, 5150);
        let initial = problem.spec.initial.sample(&layout, 999);
        let mut stack = build_stack(problem, cfg).unwrap();

        let eval = |stack: &PolicyStack| -> f64 {
            let policies = Policies {
                alpha: &stack.alpha,
                beta: stack.beta.as_deref(),
            };
            auxiliary_loss(&problem.spec, &policies, z0, &plan, &initial, mode)
                .unwrap()
                .0
                .total
        };
        let policies = Policies {
            alpha: &stack.alpha,
            beta: stack.beta.as_deref(),
        };
        let (loss, record) =
            auxiliary_loss(&problem.spec, &policies, z0, &plan, &initial, mode).unwrap();
        assert!(loss.shortfall > 0.0, "probe setup must keep the target gate open");
        assert!(loss.penalty > 0.0, "probe setup must keep penalties active");
        let mut grads = vec![0.0; stack.num_params()];
        backward_pass(&problem.spec, &stack, &record, &plan, mode, &loss, &mut grads).unwrap();

        let n = stack.num_params();
        let stride = (n / probes).max(1);
        let mut checked = 0;
        let mut max_rel: f64 = 0.0;
        for k in (0..n).step_by(stride) {
            let orig = stack.get_param(k);
            let h = 1e-6 * orig.abs().max(1.0);
            stack.set_param(k, orig + h);
            let lp = eval(&stack);
            stack.set_param(k, orig - h);
            let lm = eval(&stack);
            stack.set_param(k, orig);
            let fd = (lp - lm) / (2.0 * h);
            let ad = grads[k];
            // Central differences cannot resolve derivatives below the
            // cancellation floor ~eps*|loss|/h; only compare above it.
            let floor = 64.0 * f64::EPSILON * lp.abs().max(lm.abs()).max(1.0) / (2.0 * h);
            let err = (ad - fd).abs();
            if err > floor {
                let rel = err / ad.abs().max(fd.abs());
                max_rel = max_rel.max(rel);
                assert!(rel < 1e-6, "param {k}: ad={ad:e} fd={fd:e} rel={rel:e}");
            }
            if fd.abs() > floor {
                checked += 1;
            }
        }
        assert!(checked >= probes / 2, "only {checked} informative probes");
        eprintln!("fd_check: {checked} probes, max rel err {max_rel:.3e}");
    }

    #[test]
    fn gradients_match_fd_without_common_noise() {
        // N = 5 exercises the padding masks.
        let problem = synthetic_problem(false);
        let cfg = small_config(vec![-1.0, 0.5], 1, 5, "integral");
        fd_check(&problem, &cfg, -1.0, 40);
    }

    #[test]
    fn gradients_match_fd_with_common_noise_and_beta() {
        // 3 groups x 4 particles: blocks straddle group boundaries.
        let problem = synthetic_problem(true);
        let cfg = small_config(vec![-1.0, 0.5], 3, 4, "integral");
        fd_check(&problem, &cfg, -1.0, 40);
    }

    #[test]
    fn gradients_match_fd_supremum_mode() {
        let problem = synthetic_problem(false);
        let cfg = small_config(vec![-1.0, 0.5], 1, 8, "supremum");
        fd_check(&problem, &cfg, -1.0, 30);
    }

    fn trivial_problem() -> SolverProblem {
        SolverProblem {
            name: "trivial".into(),
            spec: ProblemSpec {
                model: Arc::new(LinearModel::zeros(1, 1)),
                terminal_cost: Arc::new(ZeroTerminal),
                constraint: Some(ConstraintSpec::Constant { value: -1.0 }),
                terminal_constraint: None,
                initial: InitialLaw::PointMass(vec![0.0]),
                horizon: 1.0,
                control_bounds: None,
            },
            audit_spec: None,
            state_scaling: InputScaling::identity(1),
            beta_enabled: false,
            negated: false,
        }
    }

    /// Null spec: no dynamics dependence, so the auxiliary loss is exactly
    /// the hinge {-z}_+ with zero Monte Carlo error.
    #[test]
    fn trivial_spec_loss_is_exact_hinge() {
        let problem = trivial_problem();
        let cfg = small_config(vec![-0.5, -0.25, 0.0, 0.25, 0.5], 1, 16, "integral");
        let stack = build_stack(&problem, &cfg).unwrap();
        let curve = evaluate_curve(&problem, &stack, &cfg, 16, 1, 3, 1234).unwrap();
        for (i, &z) in curve.internal_grid().iter().enumerate() {
            assert_eq!(curve.w[i], (-z).max(0.0), "w({z})");
            assert_eq!(curve.stderr[i], 0.0);
        }
        assert_eq!(curve.value(), Some(0.0));
    }

    /// With policies independent of the grid input the loss is the positive
    /// part of a z-free quantity minus z: nonincreasing in z on shared noise.
    #[test]
    fn loss_monotone_in_candidate_on_shared_noise() {
        let problem = synthetic_problem(false);
        let cfg = small_config(vec![-1.0, 1.0], 1, 16, "integral");
        let mode = cfg.penalty_mode().unwrap();
        let dims = problem.spec.model.dims();
        let layout = Layout::new(1, 16).unwrap();
        let plan = NoisePlan::generate(layout, &dims, 3, cfg.dt(1.0), 5);
        let initial = problem.spec.initial.sample(&layout, 6);
        let mut stack = build_stack(&problem, &cfg).unwrap();
        // The monotonicity statement needs policies that ignore the level
        // input: zero the first-layer column reading it.
        let d = problem.spec.model.dims().state;
        for net in &mut stack.alpha {
            let (inp, out) = net.layer_dims()[0];
            for o in 0..out {
                net.params_mut()[o * inp + d] = 0.0;
            }
        }
        let policies = Policies {
            alpha: &stack.alpha,
            beta: None,
        };
        let mut prev = f64::INFINITY;
        for z in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let (l, _) =
                auxiliary_loss(&problem.spec, &policies, z, &plan, &initial, mode).unwrap();
            assert!(l.total <= prev + 1e-12, "w({z}) = {} > {prev}", l.total);
            prev = l.total;
        }
    }

    /// Common-noise pipeline with zero common loadings and switched-off
    /// martingale nets reproduces the plain pipeline bit for bit on shared
    /// noise.
    #[test]
    fn common_noise_degenerates_bit_exactly() {
        let plain = synthetic_problem(false);
        let mut degen = synthetic_problem(true);
        // Same coefficients, but the common-noise loadings are exactly zero.
        let mut m = synthetic_model(false);
        m.common_dim = 1;
        m.diff_common = vec![0.0, 0.0];
        degen.spec.model = Arc::new(m);

        let cfg_plain = small_config(vec![-1.0, 0.5], 1, 16, "integral");
        let cfg_degen = small_config(vec![-1.0, 0.5], 1, 16, "integral");
        let stack_plain = build_stack(&plain, &cfg_plain).unwrap();
        let mut stack_degen = build_stack(&degen, &cfg_degen).unwrap();

        // Copy the plain alpha weights into the wider nets, zeroing the
        // extra first-layer columns that read the common-noise input.
        for (wide, narrow) in stack_degen.alpha.iter_mut().zip(&stack_plain.alpha) {
            let (in_w, _) = wide.layer_dims()[0];
            let (in_n, out0) = narrow.layer_dims()[0];
            assert_eq!(in_w, in_n + 1);
            let wide_l0 = in_w * out0 + out0;
            let narrow_l0 = in_n * out0 + out0;
            let mut params = vec![0.0; wide.num_params()];
            for o in 0..out0 {
                for i in 0..in_n {
                    params[o * in_w + i] = narrow.params()[o * in_n + i];
                }
                params[o * in_w + in_n] = 0.0;
            }
            params[in_w * out0..wide_l0]
                .copy_from_slice(&narrow.params()[in_n * out0..narrow_l0]);
            params[wide_l0..].copy_from_slice(&narrow.params()[narrow_l0..]);
            wide.params_mut().copy_from_slice(&params);
        }
        // Martingale nets fully zero: beta == 0 exactly.
        if let Some(beta) = stack_degen.beta.as_mut() {
            for net in beta {
                net.params_mut().fill(0.0);
            }
        }

        let mode = cfg_plain.penalty_mode().unwrap();
        let layout = Layout::new(1, 16).unwrap();
        let plan_deg =
            NoisePlan::generate(layout, &degen.spec.model.dims(), 3, cfg_plain.dt(1.0), 321);
        let plan_plain =
            NoisePlan::generate(layout, &plain.spec.model.dims(), 3, cfg_plain.dt(1.0), 321);
        let initial = plain.spec.initial.sample(&layout, 11);
        for z in [-1.3, -0.2, 0.7] {
            let (lp, _) = auxiliary_loss(
                &plain.spec,
                &Policies {
                    alpha: &stack_plain.alpha,
                    beta: None,
                },
                z,
                &plan_plain,
                &initial,
                mode,
            )
            .unwrap();
            let (ld, _) = auxiliary_loss(
                &degen.spec,
                &Policies {
                    alpha: &stack_degen.alpha,
                    beta: stack_degen.beta.as_deref(),
                },
                z,
                &plan_deg,
                &initial,
                mode,
            )
            .unwrap();
            assert_eq!(
                lp.total.to_bits(),
                ld.total.to_bits(),
                "z={z}: {} vs {}",
                lp.total,
                ld.total
            );
        }
    }

    /// Training on the null spec needs no learning: the curve is the exact
    /// hinge and extraction returns the first nonnegative grid point.
    #[test]
    fn train_trivial_spec_extracts_first_nonnegative_point() {
        let problem = trivial_problem();
        let mut cfg = small_config(vec![-0.4, -0.2, 0.0, 0.2, 0.4], 1, 8, "integral");
        cfg.iterations = 2;
        let out = train(&problem, &cfg).unwrap();
        assert_eq!(out.curve.value(), Some(0.0));
        let violations = out.curve.property_violations(true);
        assert!(violations.is_empty(), "{violations:?}");
    }
}
