//! Particle approximation of controlled McKean-Vlasov dynamics.
//!
//! States are stored structure-of-arrays: each coordinate is one contiguous
//! slice of length `Layout::padded()`, holding `groups * per_group` live
//! particles (group-major) plus zero-weight padding up to a multiple of
//! [`LANES`]. Interaction happens through per-group empirical statistics; a
//! "group" is the set of particles sharing one common-noise path, so without
//! common noise there is a single group and the statistics are plain
//! empirical averages.
//!
//! All randomness is pre-generated into a [`NoisePlan`] so that repeated
//! evaluations (loss and gradient, curve points, property tests under common
//! random numbers) see bit-identical increments.

pub mod model;

pub use model::{
    ConstantTerminal, LinearModel, MeanVarianceTerminal, Model, ModelDims,
    NegativeMeanTerminal, QuadraticCost, StepCtx, TerminalCost, ZeroTerminal,
};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::{ConstraintSpec, EvalCtx};
use crate::measures::EmpiricalMeasure;
use crate::nn::{Lane, NetScratch, PolicyNetwork, LANES, ZERO_LANE};
use crate::{Error, Result};

/// Deterministic sub-stream seeds: every consumer of randomness derives its
/// own seed from the master seed, a role label and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1));
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Batch geometry: `groups` common-noise groups of `per_group` particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub groups: usize,
    pub per_group: usize,
}

impl Layout {
    pub fn new(groups: usize, per_group: usize) -> Result<Self> {
        if groups == 0 || per_group == 0 {
            return Err(Error::Config("batch layout must be non-empty".into()));
        }
        Ok(Self { groups, per_group })
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::new(1, n)
    }

    pub fn total(&self) -> usize {
        self.groups * self.per_group
    }

    pub fn padded(&self) -> usize {
        self.total().div_ceil(LANES) * LANES
    }

    pub fn n_blocks(&self) -> usize {
        self.padded() / LANES
    }

    #[inline(always)]
    pub fn group_of(&self, particle: usize) -> usize {
        (particle.min(self.total() - 1)) / self.per_group
    }

    /// Active-lane mask (1.0 live, 0.0 padding) and group ids for one block.
    #[inline(always)]
    pub fn block_info(&self, block: usize) -> (Lane, [usize; LANES]) {
        let start = block * LANES;
        let mut mask = ZERO_LANE;
        let mut gid = [0usize; LANES];
        for l in 0..LANES {
            let j = start + l;
            if j < self.total() {
                mask[l] = 1.0;
            }
            gid[l] = self.group_of(j);
        }
        (mask, gid)
    }

    /// Blocks over the group axis (used for the martingale-control networks).
    pub fn group_blocks(&self) -> usize {
        self.groups.div_ceil(LANES)
    }
}

/// Initial law of the state, sampled i.i.d. across particles.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Deterministic start: all particles at `point`.
    PointMass(Vec<f64>),
    /// Independent Gaussian coordinates.
    NormalIid { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            Self::PointMass(p) => p.len(),
            Self::NormalIid { mean, .. } => mean.len(),
        }
    }

    /// Coordinate-major sample; padding lanes replicate the first live value
    /// of their coordinate so padded states stay finite through any model.
    pub fn sample(&self, layout: &Layout, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let padded = layout.padded();
        let total = layout.total();
        let mut out = vec![0.0; d * padded];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        match self {
            Self::PointMass(p) => {
                for (c, &v) in p.iter().enumerate() {
                    out[c * padded..(c + 1) * padded].fill(v);
                }
            }
            Self::NormalIid { mean, std } => {
                for j in 0..total {
                    for c in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        out[c * padded + j] = mean[c] + std[c] * z;
                    }
                }
                for c in 0..d {
                    let fill = out[c * padded];
                    for j in total..padded {
                        out[c * padded + j] = fill;
                    }
                }
            }
        }
        out
    }
}

/// Pre-generated Brownian increments (variance `dt` per coordinate), exactly
/// regeneratable from `(seed, shape)`.
#[derive(Debug, Clone)]
pub struct NoisePlan {
    pub dt: f64,
    pub n_steps: usize,
    pub layout: Layout,
    idio_dim: usize,
    common_dim: usize,
    /// `[step][k][padded]`, padding entries zero.
    idio: Vec<f64>,
    /// `[step][c][groups]`.
    common: Vec<f64>,
    pub seed: u64,
}

impl NoisePlan {
    pub fn generate(
        layout: Layout,
        dims: &ModelDims,
        n_steps: usize,
        dt: f64,
        seed: u64,
    ) -> Self {
        let padded = layout.padded();
        let total = layout.total();
        let sqrt_dt = dt.sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut idio = vec![0.0; n_steps * dims.idio * padded];
        for step in 0..n_steps {
            for k in 0..dims.idio {
                let base = (step * dims.idio + k) * padded;
                for j in 0..total {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    idio[base + j] = sqrt_dt * z;
                }
            }
        }
        let mut common = vec![0.0; n_steps * dims.common * layout.groups];
        for step in 0..n_steps {
            for c in 0..dims.common {
                let base = (step * dims.common + c) * layout.groups;
                for g in 0..layout.groups {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    common[base + g] = sqrt_dt * z;
                }
            }
        }
        Self {
            dt,
            n_steps,
            layout,
            idio_dim: dims.idio,
            common_dim: dims.common,
            idio,
            common,
            seed,
        }
    }

    /// Idiosyncratic increments of coordinate `k` at `step`, padded slice.
    #[inline]
    pub fn idio(&self, step: usize, k: usize) -> &[f64] {
        let padded = self.layout.padded();
        let base = (step * self.idio_dim + k) * padded;
        &self.idio[base..base + padded]
    }

    /// Common increments of coordinate `c` at `step`, one entry per group.
    #[inline]
    pub fn common(&self, step: usize, c: usize) -> &[f64] {
        let base = (step * self.common_dim + c) * self.layout.groups;
        &self.common[base..base + self.layout.groups]
    }
}

/// Full problem description consumed by the solver.
pub struct ProblemSpec {
    pub model: Arc<dyn Model>,
    pub terminal_cost: Arc<dyn TerminalCost>,
    /// Running constraint in law (checked after every step).
    pub constraint: Option<ConstraintSpec>,
    /// Terminal constraint in law, penalized as `Lambda {phi}_+`.
    pub terminal_constraint: Option<ConstraintSpec>,
    pub initial: InitialLaw,
    pub horizon: f64,
    /// Hard control box, if any (enforced through the policy architecture).
    pub control_bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = self.model.dims();
        if self.initial.dim() != dims.state {
            return Err(Error::Dimension {
                expected: dims.state,
                got: self.initial.dim(),
            });
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if let Some((lo, hi)) = &self.control_bounds {
            if lo.len() != dims.control || hi.len() != dims.control {
                return Err(Error::Dimension {
                    expected: dims.control,
                    got: lo.len(),
                });
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(Error::Config("empty control box".into()));
            }
        }
        Ok(())
    }

    /// Expected policy input dimension: state, auxiliary level, and the
    /// current common-noise values when the model carries common noise.
    pub fn policy_input_dim(&self) -> usize {
        let dims = self.model.dims();
        dims.state + 1 + if dims.common > 0 { dims.common } else { 0 }
    }
}

/// Feedback policies: one control network per step, and optionally one
/// martingale-control network per step for the common-noise formulation.
pub struct Policies<'a> {
    pub alpha: &'a [PolicyNetwork],
    pub beta: Option<&'a [PolicyNetwork]>,
}

/// Everything recorded along one simulated batch at a fixed candidate value.
///
/// Indexing: `states[i]` is the state before step `i` (so `states[n_steps]`
/// is terminal); `stats[i]`, `fbar[i]` belong to step `i`; `psi[i]` is the
/// running-constraint value after step `i+1`; `z[i]` and `w0[i]` are the
/// auxiliary level and cumulated common noise at time `t_i`.
pub struct SimRecord {
    pub layout: Layout,
    pub dims: ModelDims,
    pub dt: f64,
    pub n_steps: usize,
    pub z0: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Option<Vec<Vec<f64>>>,
    pub z: Vec<Vec<f64>>,
    pub w0: Vec<Vec<f64>>,
    pub stats: Vec<Vec<f64>>,
    pub fbar: Vec<Vec<f64>>,
    pub psi: Vec<Vec<Option<f64>>>,
}

impl SimRecord {
    /// Empirical measure of the states of group `g` at level `i`.
    pub fn measure_at(&self, i: usize, g: usize) -> Result<EmpiricalMeasure<'_>> {
        let padded = self.layout.padded();
        let offset = g * self.layout.per_group;
        EmpiricalMeasure::new(
            &self.states[i][offset..],
            self.layout.per_group,
            self.dims.state,
            padded,
        )
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| i as f64 * self.dt).collect()
    }

    /// First non-finite (step, particle), if any.
    pub fn locate_nonfinite(&self) -> Option<(usize, usize)> {
        let padded = self.layout.padded();
        for (i, states) in self.states.iter().enumerate() {
            for c in 0..self.dims.state {
                for j in 0..self.layout.total() {
                    if !states[c * padded + j].is_finite() {
                        return Some((i, j));
                    }
                }
            }
        }
        None
    }
}

#[derive(Default)]
pub struct ForwardOptions {
    pub keep_controls: bool,
    /// Recovered-control audits fix the policies' auxiliary input to a
    /// pre-computed path (one value per step) instead of the live level.
    pub frozen_z: Option<Vec<f64>>,
}

#[inline(always)]
fn gather_group(values: &[f64], gid: &[usize; LANES]) -> Lane {
    let mut out = ZERO_LANE;
    for l in 0..LANES {
        out[l] = values[gid[l]];
    }
    out
}

/// Evaluate the per-step control networks on one block and write the controls.
#[allow(clippy::too_many_arguments)]
#[inline]
fn eval_alpha_block(
    net: &PolicyNetwork,
    dims: &ModelDims,
    states: &[f64],
    z_cur: &[f64],
    w0_cur: &[f64],
    layout: &Layout,
    block: usize,
    input: &mut Vec<Lane>,
    scratch: &mut NetScratch,
    ctrl: &mut [f64],
) {
    let padded = layout.padded();
    let start = block * LANES;
    let (_, gid) = layout.block_info(block);
    input.clear();
    for c in 0..dims.state {
        let src = &states[c * padded + start..c * padded + start + LANES];
        input.push(src.try_into().expect("lane slice"));
    }
    input.push(gather_group(z_cur, &gid));
    if dims.common > 0 {
        for c in 0..dims.common {
            input.push(gather_group(&w0_cur[c * layout.groups..], &gid));
        }
    }
    net.forward_block(input, scratch);
    let out = scratch.output();
    for (q, lane) in out.iter().enumerate() {
        ctrl[q * padded + start..q * padded + start + LANES].copy_from_slice(lane);
    }
}

/// Evaluate the martingale-control networks over groups; returns `[p][G]`.
fn eval_beta(
    net: &PolicyNetwork,
    dims: &ModelDims,
    z_cur: &[f64],
    w0_cur: &[f64],
    layout: &Layout,
) -> Vec<f64> {
    let groups = layout.groups;
    let p = dims.common;
    let mut out = vec![0.0; p * groups];
    let mut scratch = NetScratch::new(net);
    let mut input: Vec<Lane> = Vec::with_capacity(1 + p);
    for gb in 0..layout.group_blocks() {
        let start = gb * LANES;
        input.clear();
        let mut zl = ZERO_LANE;
        for l in 0..LANES {
            zl[l] = z_cur[(start + l).min(groups - 1)];
        }
        input.push(zl);
        for c in 0..p {
            let mut wl = ZERO_LANE;
            for l in 0..LANES {
                wl[l] = w0_cur[c * groups + (start + l).min(groups - 1)];
            }
            input.push(wl);
        }
        net.forward_block(&input, &mut scratch);
        let o = scratch.output();
        for c in 0..p {
            for l in 0..LANES {
                if start + l < groups {
                    out[c * groups + start + l] = o[c][l];
                }
            }
        }
    }
    out
}

/// Simulate one batch at candidate value `z0` under the given policies,
/// recording everything backpropagation or inspection needs.
///
/// Bit-reproducible given `(plan, initial, policies, spec)`: the step loop is
/// sequential and reductions run in fixed block order.
pub fn forward_pass(
    spec: &ProblemSpec,
    policies: &Policies,
    z0: f64,
    plan: &NoisePlan,
    initial: &[f64],
    opts: &ForwardOptions,
) -> Result<SimRecord> {
    let dims = spec.model.dims();
    let layout = plan.layout;
    let padded = layout.padded();
    let groups = layout.groups;
    let n_steps = plan.n_steps;
    let dt = plan.dt;
    let model = spec.model.as_ref();

    if policies.alpha.len() != n_steps {
        return Err(Error::Config(format!(
            "need one control network per step: {} nets for {} steps",
            policies.alpha.len(),
            n_steps
        )));
    }
    if let Some(beta) = policies.beta {
        if beta.len() != n_steps {
            return Err(Error::Config("need one beta network per step".into()));
        }
        if dims.common == 0 {
            return Err(Error::Config(
                "beta networks require a model with common noise".into(),
            ));
        }
    }
    if initial.len() != dims.state * padded {
        return Err(Error::Dimension {
            expected: dims.state * padded,
            got: initial.len(),
        });
    }

    let mut states: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 1);
    states.push(initial.to_vec());
    let mut controls: Option<Vec<Vec<f64>>> = opts.keep_controls.then(Vec::new);
    let mut z = vec![vec![z0; groups]];
    let mut w0 = vec![vec![0.0; dims.common * groups]];
    let mut stats_hist: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut fbar_hist: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut psi_hist: Vec<Vec<Option<f64>>> = Vec::with_capacity(n_steps);

    let mut ctrl = vec![0.0; dims.control * padded];
    let mut scratch = NetScratch::new(&policies.alpha[0]);
    let mut input: Vec<Lane> = Vec::with_capacity(dims.state + 1 + dims.common);
    let inv_n = 1.0 / layout.per_group as f64;
    // Block-loop scratch, reused across steps.
    let mut xb = vec![ZERO_LANE; dims.state];
    let mut ab = vec![ZERO_LANE; dims.control];
    let mut sb = vec![ZERO_LANE; dims.stats];
    let mut dwb = vec![ZERO_LANE; dims.idio];
    let mut dw0b = vec![ZERO_LANE; dims.common];
    let mut outb = vec![ZERO_LANE; dims.state];
    let mut basis = vec![ZERO_LANE; dims.stats];
    let mut z_input = vec![0.0; groups];

    for i in 0..n_steps {
        let t = i as f64 * dt;
        let cur = &states[i];
        let z_cur = &z[i];
        let w0_cur = &w0[i];
        // Policy inputs see either the live level or a frozen path.
        match &opts.frozen_z {
            Some(path) => z_input.fill(path[i]),
            None => z_input.copy_from_slice(z_cur),
        }

        // Controls for every particle, accumulating the statistic basis.
        let mut stats = vec![0.0; dims.stats * groups];
        for b in 0..layout.n_blocks() {
            eval_alpha_block(
                &policies.alpha[i],
                &dims,
                cur,
                &z_input,
                w0_cur,
                &layout,
                b,
                &mut input,
                &mut scratch,
                &mut ctrl,
            );
            if dims.stats > 0 {
                let start = b * LANES;
                let (mask, gid) = layout.block_info(b);
                load_lanes(cur, padded, start, &mut xb);
                zero_lanes(&mut basis);
                model.stat_basis(t, &xb, scratch.output(), &mut basis);
                for k in 0..dims.stats {
                    for l in 0..LANES {
                        stats[k * groups + gid[l]] += basis[k][l] * mask[l];
                    }
                }
            }
        }
        for v in stats.iter_mut() {
            *v *= inv_n;
        }

        // Running cost and Euler step share one sweep.
        let mut fbar = vec![0.0; groups];
        let mut next = vec![0.0; dims.state * padded];
        let has_cost = model.has_running_cost();
        for b in 0..layout.n_blocks() {
            let start = b * LANES;
            let (mask, gid) = layout.block_info(b);
            load_lanes(cur, padded, start, &mut xb);
            load_lanes(&ctrl, padded, start, &mut ab);
            gather_rows(&stats, groups, &gid, &mut sb);
            load_noise(plan, i, start, &mut dwb);
            gather_common(plan, i, &gid, &mut dw0b);
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
            if has_cost {
                let mut f = ZERO_LANE;
                model.running_cost(&ctx, &mut f);
                for l in 0..LANES {
                    fbar[gid[l]] += f[l] * mask[l];
                }
            }
            zero_lanes(&mut outb);
            model.step_block(&ctx, &mut outb);
            for c in 0..dims.state {
                next[c * padded + start..c * padded + start + LANES].copy_from_slice(&outb[c]);
            }
        }
        if has_cost {
            for v in fbar.iter_mut() {
                *v *= inv_n;
            }
        }

        // Auxiliary level: Z' = Z - fbar dt (+ beta . dW0).
        let mut z_next = vec![0.0; groups];
        let beta_out = policies
            .beta
            .map(|nets| eval_beta(&nets[i], &dims, z_cur, w0_cur, &layout));
        for g in 0..groups {
            let mut v = z_cur[g];
            if model.has_running_cost() {
                v -= fbar[g] * dt;
            }
            if let Some(beta) = &beta_out {
                for c in 0..dims.common {
                    v += beta[c * groups + g] * plan.common(i, c)[g];
                }
            }
            z_next[g] = v;
        }

        // Cumulated common noise for the next step's inputs.
        let mut w0_next = w0_cur.clone();
        for c in 0..dims.common {
            let inc = plan.common(i, c);
            for g in 0..groups {
                w0_next[c * groups + g] += inc[g];
            }
        }

        if let Some(ctrls) = controls.as_mut() {
            ctrls.push(ctrl.clone());
        }
        states.push(next);
        stats_hist.push(stats);
        fbar_hist.push(fbar);
        z.push(z_next);
        w0.push(w0_next);

        // Running constraint after the step.
        let mut psi_row = vec![None; groups];
        if let Some(cons) = &spec.constraint {
            let ctx = EvalCtx {
                step: i + 1,
                n_steps,
                t: (i + 1) as f64 * dt,
                dt,
            };
            for (g, slot) in psi_row.iter_mut().enumerate() {
                let mu = EmpiricalMeasure::new(
                    &states[i + 1][g * layout.per_group..],
                    layout.per_group,
                    dims.state,
                    padded,
                )?;
                *slot = cons.evaluate(&ctx, &mu)?;
            }
        }
        psi_hist.push(psi_row);

        // Cheap divergence sentinel: group-level quantities must stay finite.
        if z[i + 1].iter().any(|v| !v.is_finite()) {
            let record = SimRecord {
                layout,
                dims,
                dt,
                n_steps,
                z0,
                states,
                controls: None,
                z,
                w0,
                stats: stats_hist,
                fbar: fbar_hist,
                psi: psi_hist,
            };
            let (step, particle) = record.locate_nonfinite().unwrap_or((i + 1, 0));
            return Err(Error::NonFiniteState { step, particle });
        }
    }

    Ok(SimRecord {
        layout,
        dims,
        dt,
        n_steps,
        z0,
        states,
        controls,
        z,
        w0,
        stats: stats_hist,
        fbar: fbar_hist,
        psi: psi_hist,
    })
}

/// Copy `dst.len()` coordinate lanes starting at particle `start` out of
/// coordinate-major storage. Allocation-free; the block loops reuse buffers.
#[inline(always)]
pub(crate) fn load_lanes(storage: &[f64], padded: usize, start: usize, dst: &mut [Lane]) {
    for (c, d) in dst.iter_mut().enumerate() {
        d.copy_from_slice(&storage[c * padded + start..c * padded + start + LANES]);
    }
}

/// Gather per-group values into lanes through the block's group ids.
#[inline(always)]
pub(crate) fn gather_rows(rows: &[f64], groups: usize, gid: &[usize; LANES], dst: &mut [Lane]) {
    for (k, d) in dst.iter_mut().enumerate() {
        let row = &rows[k * groups..(k + 1) * groups];
        for l in 0..LANES {
            d[l] = row[gid[l]];
        }
    }
}

#[inline(always)]
pub(crate) fn load_noise(plan: &NoisePlan, step: usize, start: usize, dst: &mut [Lane]) {
    for (k, d) in dst.iter_mut().enumerate() {
        d.copy_from_slice(&plan.idio(step, k)[start..start + LANES]);
    }
}

#[inline(always)]
pub(crate) fn gather_common(
    plan: &NoisePlan,
    step: usize,
    gid: &[usize; LANES],
    dst: &mut [Lane],
) {
    for (c, d) in dst.iter_mut().enumerate() {
        let row = plan.common(step, c);
        for l in 0..LANES {
            d[l] = row[gid[l]];
        }
    }
}

#[inline(always)]
pub(crate) fn zero_lanes(dst: &mut [Lane]) {
    for d in dst.iter_mut() {
        *d = ZERO_LANE;
    }
}

/// N particles sharing one empirical law, advanced step by step. This is the
/// direct (no-grid) simulation surface; training uses [`forward_pass`].
pub struct ParticleEnsemble {
    pub layout: Layout,
    pub dims: ModelDims,
    pub states: Vec<f64>,
    pub step: usize,
    pub dt: f64,
}

/// Auxiliary level process: starts at the candidate value and absorbs the
/// averaged running cost (and, with common noise, the martingale control).
#[derive(Debug, Clone)]
pub struct AuxiliaryState {
    pub z0: f64,
    pub path: Vec<f64>,
}

impl AuxiliaryState {
    pub fn new(z0: f64) -> Self {
        Self { z0, path: vec![z0] }
    }

    pub fn current(&self) -> f64 {
        *self.path.last().expect("non-empty path")
    }
}

/// Draw `n` i.i.d. initial states from the problem's initial law.
pub fn sample_initial(spec: &ProblemSpec, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    let layout = Layout::single(n)?;
    let dims = spec.model.dims();
    let states = spec.initial.sample(&layout, seed);
    Ok(ParticleEnsemble {
        layout,
        dims,
        states,
        step: 0,
        dt: 0.0,
    })
}

/// Advance the ensemble one Euler step under the given policy network,
/// updating the auxiliary level with the empirical running-cost average.
/// Returns the controls applied (`[q][padded]`, group-major).
pub fn euler_step(
    ens: &mut ParticleEnsemble,
    aux: &mut AuxiliaryState,
    policy: &PolicyNetwork,
    plan: &NoisePlan,
    spec: &ProblemSpec,
) -> Result<Vec<f64>> {
    let dims = spec.model.dims();
    let layout = ens.layout;
    let padded = layout.padded();
    let i = ens.step;
    if i >= plan.n_steps {
        return Err(Error::Config("noise plan exhausted".into()));
    }
    let t = i as f64 * plan.dt;
    let model = spec.model.as_ref();
    let groups = layout.groups;
    let z_cur = vec![aux.current(); groups];
    let w0_cur = vec![0.0; dims.common * groups];
    let mut ctrl = vec![0.0; dims.control * padded];
    let mut scratch = NetScratch::new(policy);
    let mut input = Vec::with_capacity(dims.state + 1 + dims.common);
    for b in 0..layout.n_blocks() {
        eval_alpha_block(
            policy, &dims, &ens.states, &z_cur, &w0_cur, &layout, b, &mut input, &mut scratch,
            &mut ctrl,
        );
    }
    let inv_n = 1.0 / layout.per_group as f64;
    let mut xb = vec![ZERO_LANE; dims.state];
    let mut ab = vec![ZERO_LANE; dims.control];
    let mut sb = vec![ZERO_LANE; dims.stats];
    let mut dwb = vec![ZERO_LANE; dims.idio];
    let mut dw0b = vec![ZERO_LANE; dims.common];
    let mut outb = vec![ZERO_LANE; dims.state];
    let mut stats = vec![0.0; dims.stats * groups];
    if dims.stats > 0 {
        let mut basis = vec![ZERO_LANE; dims.stats];
        for b in 0..layout.n_blocks() {
            let start = b * LANES;
            let (mask, gid) = layout.block_info(b);
            load_lanes(&ens.states, padded, start, &mut xb);
            load_lanes(&ctrl, padded, start, &mut ab);
            zero_lanes(&mut basis);
            model.stat_basis(t, &xb, &ab, &mut basis);
            for k in 0..dims.stats {
                for l in 0..LANES {
                    stats[k * groups + gid[l]] += basis[k][l] * mask[l];
                }
            }
        }
        for v in stats.iter_mut() {
            *v *= inv_n;
        }
    }
    let mut fbar = 0.0;
    let mut next = vec![0.0; dims.state * padded];
    for b in 0..layout.n_blocks() {
        let start = b * LANES;
        let (mask, gid) = layout.block_info(b);
        load_lanes(&ens.states, padded, start, &mut xb);
        load_lanes(&ctrl, padded, start, &mut ab);
        gather_rows(&stats, groups, &gid, &mut sb);
        load_noise(plan, i, start, &mut dwb);
        gather_common(plan, i, &gid, &mut dw0b);
        let ctx = StepCtx {
            step: i,
            t,
            dt: plan.dt,
            x: &xb,
            a: &ab,
            stats: &sb,
            dw: &dwb,
            dw0: &dw0b,
        };
        if model.has_running_cost() {
            let mut f = ZERO_LANE;
            model.running_cost(&ctx, &mut f);
            for l in 0..LANES {
                fbar += f[l] * mask[l];
            }
        }
        zero_lanes(&mut outb);
        model.step_block(&ctx, &mut outb);
        for c in 0..dims.state {
            next[c * padded + start..c * padded + start + LANES].copy_from_slice(&outb[c]);
        }
    }
    fbar *= inv_n;
    for j in 0..layout.total() {
        for c in 0..dims.state {
            if !next[c * padded + j].is_finite() {
                return Err(Error::NonFiniteState {
                    step: i + 1,
                    particle: j,
                });
            }
        }
    }
    ens.states = next;
    ens.step += 1;
    ens.dt = plan.dt;
    aux.path.push(aux.current() - fbar * plan.dt);
    Ok(ctrl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, OutputTransform};

    fn zero_policy(input_dim: usize, q: usize) -> PolicyNetwork {
        PolicyNetwork::new(input_dim, &[4], q, Activation::Tanh, OutputTransform::Identity)
            .unwrap()
    }

    fn trivial_spec(model: LinearModel) -> ProblemSpec {
        let d = model.d;
        ProblemSpec {
            model: Arc::new(model),
            terminal_cost: Arc::new(ZeroTerminal),
            constraint: None,
            terminal_constraint: None,
            initial: InitialLaw::PointMass(vec![1.0; d]),
            horizon: 1.0,
            control_bounds: None,
        }
    }

    #[test]
    fn point_mass_sampling() {
        let spec = trivial_spec(LinearModel::zeros(1, 1));
        let ens = sample_initial(&spec, 3, 7).unwrap();
        assert_eq!(&ens.states[..3], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn normal_sampling_clt_bound() {
        let n = 100_000;
        let layout = Layout::single(n).unwrap();
        let law = InitialLaw::NormalIid {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let states = law.sample(&layout, 99);
        let mean = states[..n].iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let layout = Layout::single(64).unwrap();
        let law = InitialLaw::NormalIid {
            mean: vec![1.0, -1.0],
            std: vec![0.5, 2.0],
        };
        assert_eq!(law.sample(&layout, 5), law.sample(&layout, 5));
        assert_ne!(law.sample(&layout, 5), law.sample(&layout, 6));
    }

    #[test]
    fn frozen_dynamics_keep_constant_paths() {
        let spec = trivial_spec(LinearModel::zeros(1, 1));
        let dims = spec.model.dims();
        let layout = Layout::single(16).unwrap();
        let plan = NoisePlan::generate(layout, &dims, 5, 0.1, 3);
        let initial = spec.initial.sample(&layout, 11);
        let nets: Vec<_> = (0..5).map(|_| zero_policy(2, 1)).collect();
        let policies = Policies {
            alpha: &nets,
            beta: None,
        };
        let rec = forward_pass(
            &spec,
            &policies,
            0.25,
            &plan,
            &initial,
            &ForwardOptions::default(),
        )
        .unwrap();
        for i in 0..=5 {
            assert_eq!(&rec.states[i][..16], &initial[..16]);
            assert_eq!(rec.z[i][0], 0.25); // f == 0: level never moves
        }
    }

    #[test]
    fn euler_step_matches_forward_pass() {
        let mut model = LinearModel::zeros(1, 1);
        model.drift_x = vec![1.0];
        model.diff_const = vec![0.3];
        let spec = trivial_spec(model);
        let dims = spec.model.dims();
        let layout = Layout::single(8).unwrap();
        let plan = NoisePlan::generate(layout, &dims, 1, 0.1, 17);
        let initial = spec.initial.sample(&layout, 1);
        let mut net = zero_policy(2, 1);
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        net.init_uniform(&mut rng);

        let nets = vec![net.clone()];
        let rec = forward_pass(
            &spec,
            &Policies {
                alpha: &nets,
                beta: None,
            },
            0.0,
            &plan,
            &initial,
            &ForwardOptions::default(),
        )
        .unwrap();

        let mut ens = sample_initial(&spec, 8, 1).unwrap();
        let mut aux = AuxiliaryState::new(0.0);
        euler_step(&mut ens, &mut aux, &net, &plan, &spec).unwrap();
        assert_eq!(ens.states, rec.states[1]);
        assert_eq!(aux.current(), rec.z[1][0]);
    }

    #[test]
    fn noise_plan_regenerates_bit_exactly() {
        let layout = Layout::new(2, 8).unwrap();
        let dims = ModelDims {
            state: 2,
            control: 1,
            idio: 2,
            common: 1,
            stats: 0,
        };
        let a = NoisePlan::generate(layout, &dims, 3, 0.25, 42);
        let b = NoisePlan::generate(layout, &dims, 3, 0.25, 42);
        assert_eq!(a.idio, b.idio);
        assert_eq!(a.common, b.common);
        // Variance sanity: increments scale like dt.
        let var = a.idio.iter().map(|v| v * v).sum::<f64>()
            / a.idio.iter().filter(|&&v| v != 0.0).count() as f64;
        assert!((var - 0.25).abs() < 0.08, "sample variance {var}");
    }

    #[test]
    fn layout_masks_padding() {
        let layout = Layout::new(1, 11).unwrap();
        assert_eq!(layout.padded(), 16);
        let (mask, _) = layout.block_info(1);
        assert_eq!(&mask[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&mask[3..], &[0.0; 5]);
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(7, "train", 0);
        let b = derive_seed(7, "train", 1);
        let c = derive_seed(7, "eval", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "train", 0));
    }
}
