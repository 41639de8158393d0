//! Full-order solvers and the shared operator-splitting time loop.
//!
//! One step applies, in order: macro transport, micro transport (both
//! explicit), macro friction, micro friction (both implicit). The macro
//! sub-steps are the same code path for every solver; backends differ only in
//! how the micro block is represented and evolved, which is what the
//! [`MicroBackend`] trait captures. The reduction backends in [`crate::pod`]
//! and [`crate::dlra`] plug into the identical loop, so mass conservation and
//! the SWE limit are structural rather than per-solver properties.

use crate::error::SolverError;
use crate::friction::{macro_friction_step, micro_friction_step, FrictionSolveCache};
use crate::model::{
    build_friction_operators, initial_condition, FrictionOperators, Grid, MacroState, MicroState,
    ModelParams, TestCase,
};
use crate::transport::{macro_transport_step, max_wave_speed, micro_transport_step, MicroCoupling};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Everything needed to reproduce one run. Deterministic by construction:
/// there is no random state anywhere in the solvers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    pub params: ModelParams,
    pub grid: Grid,
    pub case: TestCase,
    pub t_end: f64,
    /// Record every `snapshot_stride`-th step (plus the initial and final
    /// frames). 0 disables intermediate frames.
    pub snapshot_stride: usize,
    /// Optional times the stepper must land on exactly (the CFL step is
    /// clipped against the next one). Used when series from different
    /// solvers have to be compared at common times.
    #[serde(default)]
    pub sample_times: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        self.params.validate()?;
        self.grid.validate()?;
        if !(self.t_end > 0.0) {
            return Err(SolverError::InvalidParams(format!(
                "t_end = {} must be > 0",
                self.t_end
            )));
        }
        if let Some(samples) = &self.sample_times {
            let mut prev = 0.0;
            for &s in samples {
                if !(s > prev && s <= self.t_end) {
                    return Err(SolverError::InvalidParams(
                        "sample_times must be strictly increasing in (0, t_end]".into(),
                    ));
                }
                prev = s;
            }
        }
        Ok(())
    }
}

/// One recorded state.
#[derive(Debug, Clone)]
pub struct Frame {
    pub macro_state: MacroState,
    pub micro_state: MicroState,
}

/// Recorded run: sample times plus (macro, micro) frames. Reduced backends
/// store the lifted micro state in their frames.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: SimConfig,
    pub times: Vec<f64>,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn final_frame(&self) -> &Frame {
        self.frames.last().expect("trajectory has at least one frame")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one time")
    }
}

/// Wall-clock split of one run. `total_s` wraps the stepping loop;
/// `recording_s` is the in-loop snapshot/conservation bookkeeping, so
/// `total_s - recording_s` is the pure solver time (no file I/O happens
/// inside the loop at all).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub transport_s: f64,
    pub friction_s: f64,
    pub recording_s: f64,
    pub total_s: f64,
}

impl PhaseTimings {
    pub fn solver_s(&self) -> f64 {
        self.total_s - self.recording_s
    }
}

/// Conserved-quantity series sampled at the recorded times: total mass
/// (sum h dx), total momentum (sum h u_m dx) and, when N >= 4, the total
/// fourth moment (sum h alpha_4 dx).
#[derive(Debug, Clone, Default)]
pub struct ConservationSeries {
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    pub momentum: Vec<f64>,
    pub moment4: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub steps: usize,
    pub timings: PhaseTimings,
    pub conservation: ConservationSeries,
}

/// Micro-block representation plugged into the shared loop.
pub trait MicroBackend {
    fn n_moments(&self) -> usize;

    /// Per-cell alpha_1 / h alpha_1 / sum alpha view for the macro steps and
    /// the CFL bound, paired with the given macro state's heights.
    fn coupling(&self, u: &MacroState) -> MicroCoupling;

    /// Micro transport sub-step (explicit). `u_tilde` is the post-macro
    /// state, `u_old` the pre-step state whose heights pair with the stored
    /// micro representation.
    fn transport(
        &mut self,
        u_tilde: &MacroState,
        u_old: &MacroState,
        dt: f64,
        grid: &Grid,
        params: &ModelParams,
    ) -> Result<(), SolverError>;

    /// Micro friction sub-step (implicit), after the macro friction update.
    fn friction(
        &mut self,
        u_new: &MacroState,
        dt: f64,
        params: &ModelParams,
    ) -> Result<(), SolverError>;

    /// Materialize the micro state (for recording/diagnostics only).
    fn lift(&self) -> MicroState;
}

/// Full micro block: the reference (unreduced) backend.
pub struct FullMicro {
    v: MicroState,
    ops: Option<FrictionOperators>,
    cache: FrictionSolveCache,
}

impl FullMicro {
    pub fn new(v: MicroState, params: &ModelParams) -> Result<Self, SolverError> {
        let ops = if v.n_moments() > 0 {
            Some(build_friction_operators(params)?)
        } else {
            None
        };
        Ok(Self {
            v,
            ops,
            cache: FrictionSolveCache::new(),
        })
    }

    pub fn state(&self) -> &MicroState {
        &self.v
    }
}

impl MicroBackend for FullMicro {
    fn n_moments(&self) -> usize {
        self.v.n_moments()
    }

    fn coupling(&self, u: &MacroState) -> MicroCoupling {
        MicroCoupling::from_full(u, &self.v)
    }

    fn transport(
        &mut self,
        u_tilde: &MacroState,
        u_old: &MacroState,
        dt: f64,
        grid: &Grid,
        params: &ModelParams,
    ) -> Result<(), SolverError> {
        self.v = micro_transport_step(u_tilde, u_old, &self.v, dt, grid, params)?;
        self.v.check_finite("micro_transport_step")
    }

    fn friction(
        &mut self,
        u_new: &MacroState,
        dt: f64,
        _params: &ModelParams,
    ) -> Result<(), SolverError> {
        if let Some(ops) = &self.ops {
            self.v = micro_friction_step(u_new, &self.v, dt, ops, &mut self.cache)?;
        }
        Ok(())
    }

    fn lift(&self) -> MicroState {
        self.v.clone()
    }
}

/// No micro block: the shallow water equations.
pub struct EmptyMicro {
    n_cells: usize,
}

impl EmptyMicro {
    pub fn new(n_cells: usize) -> Self {
        Self { n_cells }
    }
}

impl MicroBackend for EmptyMicro {
    fn n_moments(&self) -> usize {
        0
    }

    fn coupling(&self, _u: &MacroState) -> MicroCoupling {
        MicroCoupling::empty(self.n_cells)
    }

    fn transport(
        &mut self,
        _u_tilde: &MacroState,
        _u_old: &MacroState,
        _dt: f64,
        _grid: &Grid,
        _params: &ModelParams,
    ) -> Result<(), SolverError> {
        Ok(())
    }

    fn friction(
        &mut self,
        _u_new: &MacroState,
        _dt: f64,
        _params: &ModelParams,
    ) -> Result<(), SolverError> {
        Ok(())
    }

    fn lift(&self) -> MicroState {
        MicroState::zeros(self.n_cells, 0)
    }
}

/// The shared splitting loop: macro transport, micro transport, macro
/// friction, micro friction per step, with the CFL step clipped to land on
/// sample times and the final time exactly. Recorded frames are passed to
/// `sink` (lifted micro state included) instead of being stored, so large
/// offline-training runs can consume snapshots without holding them.
pub fn run_loop_streaming(
    cfg: &SimConfig,
    u0: MacroState,
    backend: &mut dyn MicroBackend,
    sink: &mut dyn FnMut(f64, &MacroState, &MicroState),
) -> Result<RunReport, SolverError> {
    cfg.validate()?;
    u0.check_positive_height("initial state")?;
    let grid = &cfg.grid;
    let params = &cfg.params;
    let dx = grid.dx();
    let samples = cfg.sample_times.clone().unwrap_or_default();

    let mut u = u0;
    let mut t = 0.0_f64;
    let mut step = 0usize;
    let mut next_sample = 0usize;

    let mut conservation = ConservationSeries {
        moment4: if backend.n_moments() >= 4 {
            Some(Vec::new())
        } else {
            None
        },
        ..Default::default()
    };
    let mut timings = PhaseTimings::default();

    let loop_start = Instant::now();
    {
        let rec = Instant::now();
        record(&mut conservation, t, &u, backend, dx, sink);
        timings.recording_s += rec.elapsed().as_secs_f64();
    }

    while t < cfg.t_end {
        let transport_start = Instant::now();
        let coupling = backend
            .coupling(&u)
            .pipe_check()
            .map_err(|e| e.at_step(step, t))?;
        let lambda = max_wave_speed(&u, &coupling.alpha1, params.g).map_err(|e| e.at_step(step, t))?;
        let dt_raw = params.cfl * dx / lambda;
        // Next mandatory stop: the next sample time, else the final time.
        let target = if next_sample < samples.len() {
            samples[next_sample]
        } else {
            cfg.t_end
        };
        let (dt, t_next) = if t + dt_raw >= target {
            (target - t, target)
        } else {
            (dt_raw, t + dt_raw)
        };

        let u_tilde =
            macro_transport_step(&u, &coupling, dt, grid, params).map_err(|e| e.at_step(step, t))?;
        backend
            .transport(&u_tilde, &u, dt, grid, params)
            .map_err(|e| e.at_step(step, t))?;
        timings.transport_s += transport_start.elapsed().as_secs_f64();

        let friction_start = Instant::now();
        let sum_alpha = backend.coupling(&u_tilde).sum_alpha;
        let u_new =
            macro_friction_step(&u_tilde, &sum_alpha, dt, params).map_err(|e| e.at_step(step, t))?;
        backend
            .friction(&u_new, dt, params)
            .map_err(|e| e.at_step(step, t))?;
        timings.friction_s += friction_start.elapsed().as_secs_f64();

        u = u_new;
        t = t_next;
        step += 1;
        if next_sample < samples.len() && t == samples[next_sample] {
            next_sample += 1;
        }

        let due_by_stride = cfg.snapshot_stride > 0 && step % cfg.snapshot_stride == 0;
        let is_final = t >= cfg.t_end;
        if due_by_stride || is_final {
            let rec = Instant::now();
            record(&mut conservation, t, &u, backend, dx, sink);
            timings.recording_s += rec.elapsed().as_secs_f64();
        }
    }
    timings.total_s = loop_start.elapsed().as_secs_f64();

    Ok(RunReport {
        steps: step,
        timings,
        conservation,
    })
}

/// Frame-storing variant of [`run_loop_streaming`].
pub fn run_loop(
    cfg: &SimConfig,
    u0: MacroState,
    backend: &mut dyn MicroBackend,
) -> Result<(Trajectory, RunReport), SolverError> {
    let mut frames = Vec::new();
    let mut sink = |_t: f64, u: &MacroState, v: &MicroState| {
        frames.push(Frame {
            macro_state: u.clone(),
            micro_state: v.clone(),
        });
    };
    let report = run_loop_streaming(cfg, u0, backend, &mut sink)?;
    Ok((
        Trajectory {
            config: cfg.clone(),
            times: report.conservation.times.clone(),
            frames,
        },
        report,
    ))
}

// Small extension so coupling construction slots into the ?-chain above.
trait PipeCheck: Sized {
    fn pipe_check(self) -> Result<Self, SolverError>;
}

impl PipeCheck for MicroCoupling {
    fn pipe_check(self) -> Result<Self, SolverError> {
        for (j, a) in self.alpha1.iter().enumerate() {
            if !a.is_finite() {
                return Err(SolverError::NonFinite {
                    context: "micro coupling",
                    cell: j,
                });
            }
        }
        Ok(self)
    }
}

fn record(
    conservation: &mut ConservationSeries,
    t: f64,
    u: &MacroState,
    backend: &dyn MicroBackend,
    dx: f64,
    sink: &mut dyn FnMut(f64, &MacroState, &MicroState),
) {
    let lifted = backend.lift();
    conservation.times.push(t);
    conservation.mass.push(u.h().iter().sum::<f64>() * dx);
    conservation
        .momentum
        .push(u.hu().iter().sum::<f64>() * dx);
    if let Some(m4) = &mut conservation.moment4 {
        let total: f64 = (0..u.n_cells()).map(|j| lifted.row(j)[3]).sum();
        m4.push(total * dx);
    }
    sink(t, u, &lifted);
}

/// Full-order HSWME run for one of the benchmark cases.
pub fn run_hswme(cfg: &SimConfig) -> Result<(Trajectory, RunReport), SolverError> {
    let (u0, v0) = initial_condition(cfg.case, &cfg.grid, &cfg.params)?;
    let mut backend = FullMicro::new(v0, &cfg.params)?;
    run_loop(cfg, u0, &mut backend)
}

/// Shallow-water run: the N = 0 degenerate case of the same splitting.
pub fn run_swe(cfg: &SimConfig) -> Result<(Trajectory, RunReport), SolverError> {
    let mut swe_cfg = cfg.clone();
    swe_cfg.params.n_moments = 0;
    let (u0, _) = initial_condition(swe_cfg.case, &swe_cfg.grid, &swe_cfg.params)?;
    let mut backend = EmptyMicro::new(swe_cfg.grid.n_cells);
    run_loop(&swe_cfg, u0, &mut backend)
}

/// Relative L2 error of (h, hu) at the final time, with `b` as the reference:
/// sqrt(sum_j [(h_a - h_b)^2 + (hu_a - hu_b)^2]) / sqrt(sum_j [h_b^2 + hu_b^2]).
pub fn relative_l2_error(a: &Trajectory, b: &Trajectory) -> Result<f64, SolverError> {
    if a.config.grid != b.config.grid {
        return Err(SolverError::GridMismatch(format!(
            "{:?} vs {:?}",
            a.config.grid, b.config.grid
        )));
    }
    let ta = a.final_time();
    let tb = b.final_time();
    if (ta - tb).abs() > 1e-12 * tb.abs().max(1.0) {
        return Err(SolverError::GridMismatch(format!(
            "final times differ: {ta} vs {tb}"
        )));
    }
    let fa = a.final_frame();
    let fb = b.final_frame();
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..fa.macro_state.n_cells() {
        let dh = fa.macro_state.h()[j] - fb.macro_state.h()[j];
        let dhu = fa.macro_state.hu()[j] - fb.macro_state.hu()[j];
        num += dh * dh + dhu * dhu;
        let hb = fb.macro_state.h()[j];
        let hub = fb.macro_state.hu()[j];
        den += hb * hb + hub * hub;
    }
    Ok((num / den).sqrt())
}

/// Largest relative deviation of the conserved quantity from its initial
/// value over the recorded series.
pub fn max_relative_drift(series: &[f64]) -> f64 {
    let initial = series.first().copied().unwrap_or(0.0);
    let scale = initial.abs().max(f64::MIN_POSITIVE);
    series
        .iter()
        .map(|v| ((v - initial) / scale).abs())
        .fold(0.0, f64::max)
}
