//! POD-Galerkin reduction of the micro block: offline snapshot-to-basis
//! pipeline and the online reduced solver.
//!
//! The reduction acts in the moment direction only. Snapshots of the micro
//! state are stacked into an (N_x * N_t) x N matrix; the top right singular
//! vectors form the N x r basis W, and the micro operators are projected once
//! offline:
//!
//! ```text
//!   A_hat = W^T A W,   M1_hat = W^T M1 W,   M2_hat = W^T M2 W,  b_hat = W^T b.
//! ```
//!
//! Online, the macro steps are the unreduced ones; the only micro data they
//! need (alpha_1, the interface differences of h alpha_1, and sum_j alpha_j)
//! is reconstructed through the first row and the column sums of W, keeping
//! the per-cell coupling cost O(r). Friction operators are stored in
//! viscosity-independent form, so a basis trained at one set of friction
//! parameters can run at another.

use crate::error::SolverError;
use crate::fom::{run_loop, MicroBackend, RunReport, SimConfig, Trajectory};
use crate::linalg::{dot, jacobi_eigh, DenseMatrix, LuFactors};
use crate::model::{
    initial_condition, FrictionOperators, Grid, MacroState, MicroState, ModelParams, OffdiagA,
};
use crate::transport::MicroCoupling;

/// Reduced micro coefficients: one r-vector per cell (the moment block
/// expressed in the basis W, so the lifted state is V_j = W v_hat_j).
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedMicroState {
    n_cells: usize,
    r: usize,
    data: Vec<f64>,
}

impl ReducedMicroState {
    pub fn zeros(n_cells: usize, r: usize) -> Self {
        Self {
            n_cells,
            r,
            data: vec![0.0; n_cells * r],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.r..(j + 1) * self.r]
    }

    #[inline]
    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.r..(j + 1) * self.r]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Orthonormal moment-space basis with training provenance.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    w: DenseMatrix,
    singular_values: Vec<f64>,
    provenance: Vec<String>,
}

impl ReducedBasis {
    pub fn new(
        w: DenseMatrix,
        singular_values: Vec<f64>,
        provenance: Vec<String>,
    ) -> Result<Self, SolverError> {
        let defect = w
            .transpose()
            .matmul(&w)
            .max_abs_diff(&DenseMatrix::identity(w.cols()));
        if defect > 1e-12 {
            return Err(SolverError::InvalidParams(format!(
                "basis columns are not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self {
            w,
            singular_values,
            provenance,
        })
    }

    /// The identity basis (r = N): the reduced model reproduces the full one.
    pub fn identity(n: usize) -> Self {
        Self {
            w: DenseMatrix::identity(n),
            singular_values: Vec::new(),
            provenance: vec!["identity".into()],
        }
    }

    pub fn n_moments(&self) -> usize {
        self.w.rows()
    }

    pub fn rank(&self) -> usize {
        self.w.cols()
    }

    pub fn w(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    /// v_hat_j = W^T v_j per cell.
    pub fn project(&self, v: &MicroState) -> ReducedMicroState {
        let r = self.rank();
        let n = self.n_moments();
        let mut out = ReducedMicroState::zeros(v.n_cells(), r);
        for j in 0..v.n_cells() {
            let row = v.row(j);
            let dst = out.row_mut(j);
            for k in 0..r {
                let mut s = 0.0;
                for i in 0..n {
                    s += self.w[(i, k)] * row[i];
                }
                dst[k] = s;
            }
        }
        out
    }

    /// V_j = W v_hat_j per cell.
    pub fn lift(&self, v_hat: &ReducedMicroState) -> MicroState {
        let r = self.rank();
        let n = self.n_moments();
        let mut out = MicroState::zeros(v_hat.n_cells(), n);
        for j in 0..v_hat.n_cells() {
            let src = v_hat.row(j);
            let dst = out.row_mut(j);
            for i in 0..n {
                let mut s = 0.0;
                for k in 0..r {
                    s += self.w[(i, k)] * src[k];
                }
                dst[i] = s;
            }
        }
        out
    }
}

/// Operators of the reduced micro system, precomputed offline. Friction
/// parts are stored viscosity-independently (M1_hat/nu, b_hat*lambda/nu) and
/// rescaled by the run's (nu, lambda) when applied.
#[derive(Debug, Clone)]
pub struct ReducedOperators {
    n: usize,
    r: usize,
    a_hat: DenseMatrix,
    m1_hat_unit: DenseMatrix,
    b_hat_unit: Vec<f64>,
    w_row1: Vec<f64>,
    w_row2: Vec<f64>,
    w_colsum: Vec<f64>,
}

impl ReducedOperators {
    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn n_moments(&self) -> usize {
        self.n
    }

    /// W^T A W.
    pub fn a_hat(&self) -> &DenseMatrix {
        &self.a_hat
    }

    pub fn m1_hat_unit(&self) -> &DenseMatrix {
        &self.m1_hat_unit
    }

    pub fn b_hat_unit(&self) -> &[f64] {
        &self.b_hat_unit
    }

    /// First row of W: reconstructs h alpha_1 from reduced coefficients.
    pub fn w_row1(&self) -> &[f64] {
        &self.w_row1
    }

    /// Second row of W: carries the quadratic entry of A_vu.
    pub fn w_row2(&self) -> &[f64] {
        &self.w_row2
    }

    /// Column sums of W: reconstruct sum_j alpha_j for the friction closure.
    pub fn w_colsum(&self) -> &[f64] {
        &self.w_colsum
    }
}

/// Project the micro operators onto the basis.
pub fn build_reduced_operators(basis: &ReducedBasis) -> Result<ReducedOperators, SolverError> {
    let n = basis.n_moments();
    let r = basis.rank();
    if n == 0 {
        return Err(SolverError::EmptyMicroBlock);
    }
    let w = basis.w();
    let offdiag = OffdiagA::new(n);
    let a_hat = w.transpose().matmul(&offdiag.apply_left(w));
    let unit_ops = FrictionOperators::new(n, 1.0, 1.0)?;
    let m1_hat_unit = w.transpose().matmul(&unit_ops.m1_unit().matmul(w));
    let b_unit = unit_ops.b_unit();
    let b_hat_unit: Vec<f64> = (0..r)
        .map(|k| (0..n).map(|i| w[(i, k)] * b_unit[i]).sum())
        .collect();
    let w_row1: Vec<f64> = (0..r).map(|k| w[(0, k)]).collect();
    let w_row2: Vec<f64> = (0..r)
        .map(|k| if n >= 2 { w[(1, k)] } else { 0.0 })
        .collect();
    let w_colsum: Vec<f64> = (0..r).map(|k| (0..n).map(|i| w[(i, k)]).sum()).collect();
    Ok(ReducedOperators {
        n,
        r,
        a_hat,
        m1_hat_unit,
        b_hat_unit,
        w_row1,
        w_row2,
        w_colsum,
    })
}

impl MicroCoupling {
    /// Macro coupling from reduced coefficients: O(r) per cell through the
    /// first row and the column sums of W; the full state is never lifted.
    pub fn from_reduced(u: &MacroState, v_hat: &ReducedMicroState, ops: &ReducedOperators) -> Self {
        let n_cells = u.n_cells();
        let mut alpha1 = vec![0.0; n_cells];
        let mut h_alpha1 = vec![0.0; n_cells];
        let mut sum_alpha = vec![0.0; n_cells];
        for j in 0..n_cells {
            let row = v_hat.row(j);
            let ha1 = dot(&ops.w_row1, row);
            h_alpha1[j] = ha1;
            alpha1[j] = ha1 / u.h()[j];
            sum_alpha[j] = dot(&ops.w_colsum, row) / u.h()[j];
        }
        Self {
            alpha1,
            h_alpha1,
            sum_alpha,
        }
    }
}

/// Vertical stack of the micro-state frames of the given trajectories, in
/// time order, runs concatenated: shape (sum of frames * N_x) x N.
pub fn build_snapshot_matrix(trajectories: &[&Trajectory]) -> Result<DenseMatrix, SolverError> {
    if trajectories.is_empty() {
        return Err(SolverError::InvalidParams("no trajectories given".into()));
    }
    let n = trajectories[0].config.params.n_moments;
    for t in trajectories {
        if t.config.params.n_moments != n {
            return Err(SolverError::ShapeMismatch {
                context: "build_snapshot_matrix",
                detail: format!(
                    "moment counts differ: {} vs {n}",
                    t.config.params.n_moments
                ),
            });
        }
    }
    let total_rows: usize = trajectories
        .iter()
        .map(|t| t.frames.len() * t.config.grid.n_cells)
        .sum();
    let mut out = DenseMatrix::zeros(total_rows, n);
    let mut row = 0;
    for t in trajectories {
        for frame in &t.frames {
            for j in 0..frame.micro_state.n_cells() {
                out.row_mut(row).copy_from_slice(frame.micro_state.row(j));
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Streaming Gram accumulator: G += V^T V per frame. Avoids materializing
/// the stacked snapshot matrix for long training runs.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    n: usize,
    gram: DenseMatrix,
    rows_seen: usize,
}

impl GramAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            gram: DenseMatrix::zeros(n, n),
            rows_seen: 0,
        }
    }

    pub fn rows_seen(&self) -> usize {
        self.rows_seen
    }

    pub fn add_frame(&mut self, v: &MicroState) -> Result<(), SolverError> {
        if v.n_moments() != self.n {
            return Err(SolverError::ShapeMismatch {
                context: "GramAccumulator::add_frame",
                detail: format!("frame has N = {}, accumulator N = {}", v.n_moments(), self.n),
            });
        }
        for j in 0..v.n_cells() {
            let row = v.row(j);
            for p in 0..self.n {
                let rp = row[p];
                if rp == 0.0 {
                    continue;
                }
                for q in 0..self.n {
                    self.gram[(p, q)] += rp * row[q];
                }
            }
        }
        self.rows_seen += v.n_cells();
        Ok(())
    }

    /// Top-r right singular directions of the (virtual) stacked matrix and
    /// the corresponding singular values.
    pub fn basis(&self, r: usize, provenance: Vec<String>) -> Result<ReducedBasis, SolverError> {
        if self.rows_seen == 0 {
            return Err(SolverError::InvalidParams(
                "no snapshot rows accumulated".into(),
            ));
        }
        if r < 1 || r > self.n {
            return Err(SolverError::RankOutOfRange { r, max: self.n });
        }
        let (eigvals, eigvecs) = jacobi_eigh(&self.gram);
        let mut w = DenseMatrix::zeros(self.n, r);
        let mut singular_values = Vec::with_capacity(r);
        for k in 0..r {
            let mut col = eigvecs.col(k);
            // Deterministic sign: largest-magnitude component positive.
            let mut idx = 0;
            for (t, val) in col.iter().enumerate() {
                if val.abs() > col[idx].abs() {
                    idx = t;
                }
            }
            if col[idx] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            for i in 0..self.n {
                w[(i, k)] = col[i];
            }
            singular_values.push(eigvals[k].max(0.0).sqrt());
        }
        ReducedBasis::new(w, singular_values, provenance)
    }
}

/// Offline phase: snapshot Gram matrix -> truncated right singular basis ->
/// projected operators. The singular-value spectrum is kept on the basis for
/// diagnostics.
pub fn pod_offline(
    trajectories: &[&Trajectory],
    r: usize,
) -> Result<(ReducedBasis, ReducedOperators), SolverError> {
    if trajectories.is_empty() {
        return Err(SolverError::InvalidParams("no trajectories given".into()));
    }
    let n = trajectories[0].config.params.n_moments;
    let mut acc = GramAccumulator::new(n);
    let mut provenance = Vec::new();
    for t in trajectories {
        if t.config.params.n_moments != n {
            return Err(SolverError::ShapeMismatch {
                context: "pod_offline",
                detail: format!("moment counts differ: {} vs {n}", t.config.params.n_moments),
            });
        }
        provenance.push(format!(
            "{} nu={} lambda={} frames={}",
            t.config.case.name(),
            t.config.params.nu,
            t.config.params.lambda,
            t.frames.len()
        ));
        for frame in &t.frames {
            acc.add_frame(&frame.micro_state)?;
        }
    }
    let basis = acc.basis(r, provenance)?;
    let ops = build_reduced_operators(&basis)?;
    Ok((basis, ops))
}

/// Reduced micro transport step, mirroring the full one in the subspace:
/// A_hat_vv = mean(u_m) I_r + mean(alpha_1) A_hat per interface, and the
/// A_vu coupling enters through the first two rows of W only.
pub fn pod_micro_transport_step(
    u_tilde: &MacroState,
    u_old: &MacroState,
    v_hat: &ReducedMicroState,
    ops: &ReducedOperators,
    dt: f64,
    grid: &Grid,
) -> Result<ReducedMicroState, SolverError> {
    let n_cells = v_hat.n_cells();
    let r = v_hat.rank();
    if u_tilde.n_cells() != n_cells || u_old.n_cells() != n_cells || ops.rank() != r {
        return Err(SolverError::ShapeMismatch {
            context: "pod_micro_transport_step",
            detail: format!(
                "cells {}/{} vs {n_cells}, rank {} vs {r}",
                u_tilde.n_cells(),
                u_old.n_cells(),
                ops.rank()
            ),
        });
    }
    let dx = grid.dx();
    let c = dt / (2.0 * dx);
    let h_t = u_tilde.h();
    let hu_t = u_tilde.hu();
    let um: Vec<f64> = (0..n_cells).map(|j| hu_t[j] / h_t[j]).collect();
    let a1: Vec<f64> = (0..n_cells)
        .map(|j| dot(&ops.w_row1, v_hat.row(j)) / u_old.h()[j])
        .collect();
    let a_hat = &ops.a_hat;

    let mut out = ReducedMicroState::zeros(n_cells, r);
    let mut dv = vec![0.0; r];
    for j in 0..n_cells {
        let jm = grid.ghost_index(j as isize - 1);
        let jp = grid.ghost_index(j as isize + 1);

        let dh_p = h_t[jp] - h_t[j];
        let dh_m = h_t[j] - h_t[jm];
        let dhu_p = hu_t[jp] - hu_t[j];
        let dhu_m = hu_t[j] - hu_t[jm];

        let ub_r = 0.5 * (um[j] + um[jp]);
        let ab_r = 0.5 * (a1[j] + a1[jp]);
        let ub_l = 0.5 * (um[jm] + um[j]);
        let ab_l = 0.5 * (a1[jm] + a1[j]);

        let row_j = v_hat.row(j);
        let row_jp = v_hat.row(jp);
        let row_jm = v_hat.row(jm);
        let row_out = out.row_mut(j);

        for k in 0..r {
            row_out[k] = 0.5 * (row_jp[k] + row_jm[k]);
        }
        // Right interface: A_hat_vv dv and the projected A_vu U-differences.
        for k in 0..r {
            dv[k] = row_jp[k] - row_j[k];
        }
        let p_r = -2.0 * ub_r * ab_r * dh_p + 2.0 * ab_r * dhu_p;
        let q_r = -(2.0 / 3.0) * ab_r * ab_r * dh_p;
        for k in 0..r {
            row_out[k] -= c * (ub_r * dv[k]
                + ab_r * dot(a_hat.row(k), &dv)
                + p_r * ops.w_row1[k]
                + q_r * ops.w_row2[k]);
        }
        // Left interface.
        for k in 0..r {
            dv[k] = row_j[k] - row_jm[k];
        }
        let p_l = -2.0 * ub_l * ab_l * dh_m + 2.0 * ab_l * dhu_m;
        let q_l = -(2.0 / 3.0) * ab_l * ab_l * dh_m;
        for k in 0..r {
            row_out[k] -= c * (ub_l * dv[k]
                + ab_l * dot(a_hat.row(k), &dv)
                + p_l * ops.w_row1[k]
                + q_l * ops.w_row2[k]);
        }
    }
    Ok(out)
}

/// Reduced micro friction step: per-cell r x r implicit solve
/// (I - (dt/h^2) M1_hat - (dt/h) M2_hat) v_hat' = v_hat + dt u_m' b_hat,
/// with the 1/h factor on M2_hat matching the full operator.
pub fn pod_micro_friction_step(
    u_new: &MacroState,
    v_hat: &ReducedMicroState,
    ops: &ReducedOperators,
    dt: f64,
    params: &ModelParams,
) -> Result<ReducedMicroState, SolverError> {
    let n_cells = v_hat.n_cells();
    let r = v_hat.rank();
    if u_new.n_cells() != n_cells || ops.rank() != r {
        return Err(SolverError::ShapeMismatch {
            context: "pod_micro_friction_step",
            detail: format!(
                "cells {} vs {n_cells}, rank {} vs {r}",
                u_new.n_cells(),
                ops.rank()
            ),
        });
    }
    if params.nu == 0.0 {
        return Ok(v_hat.clone());
    }
    let nu = params.nu;
    let nu_over_lambda = nu / params.lambda;
    let mut out = ReducedMicroState::zeros(n_cells, r);
    let mut d = vec![0.0; r * r];
    let mut rhs = vec![0.0; r];
    for j in 0..n_cells {
        let h = u_new.h()[j];
        let um = u_new.hu()[j] / h;
        let s = dt * nu / (h * h);
        let t = dt * nu_over_lambda / h;
        for row in 0..r {
            let m1_row = ops.m1_hat_unit.row(row);
            let tb = t * ops.b_hat_unit[row];
            let dst = &mut d[row * r..(row + 1) * r];
            for col in 0..r {
                dst[col] = -s * m1_row[col] - tb * ops.w_colsum[col];
            }
            dst[row] += 1.0;
        }
        for k in 0..r {
            rhs[k] = v_hat.row(j)[k] + dt * um * nu_over_lambda * ops.b_hat_unit[k];
        }
        LuFactors::from_raw(&d, r, "pod_micro_friction_step")
            .map_err(|_| SolverError::SingularSystem {
                context: "pod_micro_friction_step",
                cell: j,
            })?
            .solve_vec(&mut rhs);
        out.row_mut(j).copy_from_slice(&rhs);
    }
    Ok(out)
}

/// Reduced micro backend for the shared splitting loop.
pub struct ReducedMicro {
    v_hat: ReducedMicroState,
    basis: ReducedBasis,
    ops: ReducedOperators,
}

impl ReducedMicro {
    pub fn new(
        v0: &MicroState,
        basis: ReducedBasis,
        ops: ReducedOperators,
    ) -> Result<Self, SolverError> {
        if basis.n_moments() != v0.n_moments() {
            return Err(SolverError::ShapeMismatch {
                context: "ReducedMicro",
                detail: format!(
                    "basis trained for N = {}, state has N = {}",
                    basis.n_moments(),
                    v0.n_moments()
                ),
            });
        }
        let v_hat = basis.project(v0);
        Ok(Self { v_hat, basis, ops })
    }

    pub fn coefficients(&self) -> &ReducedMicroState {
        &self.v_hat
    }
}

impl MicroBackend for ReducedMicro {
    fn n_moments(&self) -> usize {
        self.basis.n_moments()
    }

    fn coupling(&self, u: &MacroState) -> MicroCoupling {
        MicroCoupling::from_reduced(u, &self.v_hat, &self.ops)
    }

    fn transport(
        &mut self,
        u_tilde: &MacroState,
        u_old: &MacroState,
        dt: f64,
        grid: &Grid,
        _params: &ModelParams,
    ) -> Result<(), SolverError> {
        self.v_hat = pod_micro_transport_step(u_tilde, u_old, &self.v_hat, &self.ops, dt, grid)?;
        Ok(())
    }

    fn friction(
        &mut self,
        u_new: &MacroState,
        dt: f64,
        params: &ModelParams,
    ) -> Result<(), SolverError> {
        self.v_hat = pod_micro_friction_step(u_new, &self.v_hat, &self.ops, dt, params)?;
        Ok(())
    }

    fn lift(&self) -> MicroState {
        self.basis.lift(&self.v_hat)
    }
}

/// Online phase: the full splitting loop with reduced micro steps. Frames
/// store the lifted micro state for diagnostics.
pub fn pod_rom_run(
    cfg: &SimConfig,
    basis: &ReducedBasis,
    ops: &ReducedOperators,
) -> Result<(Trajectory, RunReport), SolverError> {
    if basis.n_moments() != cfg.params.n_moments {
        return Err(SolverError::ShapeMismatch {
            context: "pod_rom_run",
            detail: format!(
                "basis trained for N = {}, config has N = {}",
                basis.n_moments(),
                cfg.params.n_moments
            ),
        });
    }
    let (u0, v0) = initial_condition(cfg.case, &cfg.grid, &cfg.params)?;
    let mut backend = ReducedMicro::new(&v0, basis.clone(), ops.clone())?;
    run_loop(cfg, u0, &mut backend)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{run_hswme, Frame};
    use crate::friction::{micro_friction_step, FrictionSolveCache};
    use crate::model::{build_friction_operators, BoundaryKind, TestCase};
    use crate::transport::micro_transport_step;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn params(n: usize) -> ModelParams {
        ModelParams {
            g: 9.81,
            nu: 1.0,
            lambda: 0.5,
            n_moments: n,
            cfl: 0.25,
        }
    }

    fn grid(n_cells: usize, bc: BoundaryKind) -> Grid {
        Grid {
            n_cells,
            x_min: -1.0,
            x_max: 1.0,
            bc,
        }
    }

    fn random_basis(rng: &mut StdRng, n: usize, r: usize) -> ReducedBasis {
        let a = DenseMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let q = crate::linalg::qr(&a).unwrap().q;
        ReducedBasis::new(q, vec![], vec!["random".into()]).unwrap()
    }

    fn random_state(rng: &mut StdRng, n_cells: usize, n: usize) -> (MacroState, MicroState) {
        let h: Vec<f64> = (0..n_cells).map(|_| rng.random_range(0.4..2.0)).collect();
        let hu: Vec<f64> = (0..n_cells).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut v = MicroState::zeros(n_cells, n);
        for j in 0..n_cells {
            for k in 0..n {
                v.row_mut(j)[k] = rng.random_range(-0.3..0.3);
            }
        }
        (MacroState::new(h, hu), v)
    }

    #[test]
    fn snapshot_matrix_shape_and_order() {
        let cfg = SimConfig {
            params: params(4),
            grid: grid(3, BoundaryKind::Periodic),
            case: TestCase::SmoothWave,
            t_end: 1.0,
            snapshot_stride: 1,
            sample_times: None,
        };
        let mut frames = Vec::new();
        for f in 0..2 {
            let mut v = MicroState::zeros(3, 4);
            for j in 0..3 {
                for k in 0..4 {
                    v.row_mut(j)[k] = (f * 100 + j * 10 + k) as f64;
                }
            }
            frames.push(Frame {
                macro_state: MacroState::new(vec![1.0; 3], vec![0.0; 3]),
                micro_state: v,
            });
        }
        let traj = Trajectory {
            config: cfg,
            times: vec![0.0, 1.0],
            frames,
        };
        let snap = build_snapshot_matrix(&[&traj]).unwrap();
        assert_eq!((snap.rows(), snap.cols()), (6, 4));
        // Frame order: frame 0 cells 0..3, then frame 1.
        assert_eq!(snap[(0, 0)], 0.0);
        assert_eq!(snap[(1, 0)], 10.0);
        assert_eq!(snap[(3, 0)], 100.0);
        assert_eq!(snap[(5, 3)], 123.0);
    }

    #[test]
    fn pod_offline_projection_exactness_on_low_rank_snapshots() {
        // Snapshots spanning exactly a 2-D moment subspace.
        let mut rng = StdRng::seed_from_u64(41);
        let n = 6;
        let dir1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n_cells = 5;
        let mut frames = Vec::new();
        for f in 0..4 {
            let mut v = MicroState::zeros(n_cells, n);
            for j in 0..n_cells {
                let (c1, c2) = ((f + j) as f64 * 0.3 - 1.0, (f * j) as f64 * 0.2 + 0.1);
                for k in 0..n {
                    v.row_mut(j)[k] = c1 * dir1[k] + c2 * dir2[k];
                }
            }
            frames.push(Frame {
                macro_state: MacroState::new(vec![1.0; n_cells], vec![0.0; n_cells]),
                micro_state: v,
            });
        }
        let traj = Trajectory {
            config: SimConfig {
                params: params(n),
                grid: grid(n_cells, BoundaryKind::Periodic),
                case: TestCase::SmoothWave,
                t_end: 1.0,
                snapshot_stride: 1,
                sample_times: None,
            },
            times: (0..4).map(|i| i as f64).collect(),
            frames,
        };
        let (basis, _) = pod_offline(&[&traj], 2).unwrap();
        // Lift-project reproduces every snapshot row.
        for frame in &traj.frames {
            let v_hat = basis.project(&frame.micro_state);
            let back = basis.lift(&v_hat);
            for j in 0..n_cells {
                for k in 0..n {
                    assert!(
                        (back.row(j)[k] - frame.micro_state.row(j)[k]).abs() <= 1e-10,
                        "projection must be exact on a 2-D snapshot family"
                    );
                }
            }
        }
        assert!(basis.singular_values()[1] > 0.0);
    }

    #[test]
    fn identity_basis_operators_match_full_ones() {
        let n = 5;
        let basis = ReducedBasis::identity(n);
        let ops = build_reduced_operators(&basis).unwrap();
        let dense_a = OffdiagA::new(n).to_dense();
        assert!(ops.a_hat().max_abs_diff(&dense_a) == 0.0);
        let full = FrictionOperators::new(n, 1.0, 1.0).unwrap();
        assert!(ops.m1_hat_unit().max_abs_diff(full.m1_unit()) == 0.0);
        assert_eq!(ops.b_hat_unit(), full.b_unit());
        // r = N: W W^T = I.
        let w = basis.w();
        let wwt = w.matmul(&w.transpose());
        assert!(wwt.max_abs_diff(&DenseMatrix::identity(n)) == 0.0);
    }

    #[test]
    fn reduced_transport_matches_full_under_identity_basis() {
        let mut rng = StdRng::seed_from_u64(42);
        let n = 4;
        let n_cells = 12;
        let g = grid(n_cells, BoundaryKind::Periodic);
        let p = params(n);
        let (u_old, v) = random_state(&mut rng, n_cells, n);
        let (u_tilde, _) = random_state(&mut rng, n_cells, n);
        let basis = ReducedBasis::identity(n);
        let ops = build_reduced_operators(&basis).unwrap();
        let v_hat = basis.project(&v);
        let dt = 4e-4;
        let reduced = pod_micro_transport_step(&u_tilde, &u_old, &v_hat, &ops, dt, &g).unwrap();
        let full = micro_transport_step(&u_tilde, &u_old, &v, dt, &g, &p).unwrap();
        let lifted = basis.lift(&reduced);
        for j in 0..n_cells {
            for k in 0..n {
                assert!((lifted.row(j)[k] - full.row(j)[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reduced_transport_is_galerkin_projection_of_full_step() {
        // W^T o (full step) o (W lift) equals the reduced step: the transport
        // update is linear in the micro state once alpha_1 is fixed, and the
        // reduced alpha_1 equals the lifted state's alpha_1 by construction.
        let mut rng = StdRng::seed_from_u64(43);
        for trial in 0..20 {
            let n = rng.random_range(2..=6usize);
            let r = rng.random_range(1..=n.min(4));
            let n_cells = rng.random_range(6..=16);
            let bc = if trial % 2 == 0 {
                BoundaryKind::Periodic
            } else {
                BoundaryKind::Outflow
            };
            let g = grid(n_cells, bc);
            let p = params(n);
            let basis = random_basis(&mut rng, n, r);
            let ops = build_reduced_operators(&basis).unwrap();
            let (u_old, _) = random_state(&mut rng, n_cells, n);
            let (u_tilde, _) = random_state(&mut rng, n_cells, n);
            let mut v_hat = ReducedMicroState::zeros(n_cells, r);
            for j in 0..n_cells {
                for k in 0..r {
                    v_hat.row_mut(j)[k] = rng.random_range(-0.4..0.4);
                }
            }
            let dt = 3e-4;
            let reduced =
                pod_micro_transport_step(&u_tilde, &u_old, &v_hat, &ops, dt, &g).unwrap();
            let lifted = basis.lift(&v_hat);
            let full = micro_transport_step(&u_tilde, &u_old, &lifted, dt, &g, &p).unwrap();
            let projected = basis.project(&full);
            for j in 0..n_cells {
                for k in 0..r {
                    assert!(
                        (reduced.row(j)[k] - projected.row(j)[k]).abs() <= 1e-12,
                        "trial {trial}: Galerkin commutation violated"
                    );
                }
            }
        }
    }

    #[test]
    fn reduced_friction_identity_basis_matches_full() {
        let mut rng = StdRng::seed_from_u64(44);
        let n = 5;
        let n_cells = 8;
        let p = params(n);
        let ops_full = build_friction_operators(&p).unwrap();
        let basis = ReducedBasis::identity(n);
        let ops = build_reduced_operators(&basis).unwrap();
        let (u, v) = random_state(&mut rng, n_cells, n);
        let v_hat = basis.project(&v);
        let dt = 2e-3;
        let reduced = pod_micro_friction_step(&u, &v_hat, &ops, dt, &p).unwrap();
        let mut cache = FrictionSolveCache::new();
        let full = micro_friction_step(&u, &v, dt, &ops_full, &mut cache).unwrap();
        let lifted = basis.lift(&reduced);
        for j in 0..n_cells {
            for k in 0..n {
                assert!((lifted.row(j)[k] - full.row(j)[k]).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn reduced_friction_nu_zero_is_identity() {
        let mut rng = StdRng::seed_from_u64(45);
        let n = 4;
        let basis = random_basis(&mut rng, n, 2);
        let ops = build_reduced_operators(&basis).unwrap();
        let mut p = params(n);
        p.nu = 0.0;
        let u = MacroState::new(vec![1.0; 3], vec![0.2; 3]);
        let mut v_hat = ReducedMicroState::zeros(3, 2);
        for j in 0..3 {
            v_hat.row_mut(j).copy_from_slice(&[0.1, -0.2]);
        }
        let out = pod_micro_friction_step(&u, &v_hat, &ops, 1e-2, &p).unwrap();
        assert_eq!(out, v_hat);
    }

    /// Dense-Galerkin oracle: project M1, M2, b densely with external matrix
    /// products and run backward Euler in the subspace with an external LU.
    /// Same mathematics as the production step, independent assembly and
    /// solve route.
    #[test]
    fn reduced_friction_matches_dense_galerkin_oracle() {
        let mut rng = StdRng::seed_from_u64(46);
        for trial in 0..20 {
            let n = rng.random_range(2..=6usize);
            let r = rng.random_range(1..=n.min(4));
            let p = ModelParams {
                g: 9.81,
                nu: rng.random_range(0.05..3.0),
                lambda: rng.random_range(0.1..1.5),
                n_moments: n,
                cfl: 0.25,
            };
            let basis = random_basis(&mut rng, n, r);
            let ops = build_reduced_operators(&basis).unwrap();
            let h: f64 = rng.random_range(0.3..2.0);
            let hu: f64 = rng.random_range(-0.8..0.8);
            let u = MacroState::new(vec![h], vec![hu]);
            let mut v_hat = ReducedMicroState::zeros(1, r);
            for k in 0..r {
                v_hat.row_mut(0)[k] = rng.random_range(-0.5..0.5);
            }
            let dt: f64 = rng.random_range(1e-4..5e-3);
            let got = pod_micro_friction_step(&u, &v_hat, &ops, dt, &p).unwrap();

            let full = build_friction_operators(&p).unwrap();
            let nm = nalgebra::DMatrix::<f64>::from_fn(n, n, |i, j| full.m1_dense()[(i, j)]);
            let m2 = nalgebra::DMatrix::<f64>::from_fn(n, n, |i, j| full.m2_dense()[(i, j)]);
            let bvec = nalgebra::DVector::<f64>::from_vec(full.b_vec());
            let w = nalgebra::DMatrix::<f64>::from_fn(n, r, |i, j| basis.w()[(i, j)]);
            let m1_hat = w.transpose() * &nm * &w;
            let m2_hat = w.transpose() * &m2 * &w;
            let b_hat = w.transpose() * &bvec;
            let um = hu / h;
            let lhs = nalgebra::DMatrix::<f64>::identity(r, r)
                - dt / (h * h) * &m1_hat
                - dt / h * &m2_hat;
            let mut rhs = nalgebra::DVector::<f64>::zeros(r);
            for k in 0..r {
                rhs[k] = v_hat.row(0)[k] + dt * um * b_hat[k];
            }
            let want = lhs.lu().solve(&rhs).unwrap();
            for k in 0..r {
                assert!(
                    (got.row(0)[k] - want[k]).abs() <= 1e-12,
                    "trial {trial}: reduced friction mismatch"
                );
            }
        }
    }

    #[test]
    fn identity_basis_rom_reproduces_fom() {
        let cfg = SimConfig {
            params: params(6),
            grid: Grid {
                n_cells: 60,
                x_min: -1.0,
                x_max: 1.0,
                bc: BoundaryKind::Outflow,
            },
            case: TestCase::DamBreak,
            t_end: 0.05,
            snapshot_stride: 0,
            sample_times: None,
        };
        let (fom_traj, _) = run_hswme(&cfg).unwrap();
        let basis = ReducedBasis::identity(6);
        let ops = build_reduced_operators(&basis).unwrap();
        let (rom_traj, _) = pod_rom_run(&cfg, &basis, &ops).unwrap();
        let err = crate::fom::relative_l2_error(&rom_traj, &fom_traj).unwrap();
        assert!(err <= 1e-12, "identity-basis ROM error {err}");
    }

    #[test]
    fn rom_smooth_wave_conserves_mass() {
        let cfg = SimConfig {
            params: ModelParams {
                nu: 0.1,
                lambda: 0.1,
                ..params(6)
            },
            grid: grid(80, BoundaryKind::Periodic),
            case: TestCase::SmoothWave,
            t_end: 0.05,
            snapshot_stride: 1,
            sample_times: None,
        };
        // Train on the FOM itself at two viscosities.
        let mut train_a = cfg.clone();
        train_a.params.nu = 0.01;
        let mut train_b = cfg.clone();
        train_b.params.nu = 1.0;
        let (ta, _) = run_hswme(&train_a).unwrap();
        let (tb, _) = run_hswme(&train_b).unwrap();
        let (basis, ops) = pod_offline(&[&ta, &tb], 3).unwrap();
        let (_, report) = pod_rom_run(&cfg, &basis, &ops).unwrap();
        let drift = crate::fom::max_relative_drift(&report.conservation.mass);
        assert!(drift <= 1e-12, "ROM mass drift {drift}");
    }

    #[test]
    fn macro_coupling_same_code_path_as_full() {
        // Identical lifted inputs produce bit-identical macro couplings.
        let mut rng = StdRng::seed_from_u64(47);
        let n = 5;
        let r = 3;
        let n_cells = 10;
        let basis = random_basis(&mut rng, n, r);
        let ops = build_reduced_operators(&basis).unwrap();
        let (u, _) = random_state(&mut rng, n_cells, n);
        let mut v_hat = ReducedMicroState::zeros(n_cells, r);
        for j in 0..n_cells {
            for k in 0..r {
                v_hat.row_mut(j)[k] = rng.random_range(-0.4..0.4);
            }
        }
        let lifted = basis.lift(&v_hat);
        let from_reduced = MicroCoupling::from_reduced(&u, &v_hat, &ops);
        let from_full = MicroCoupling::from_full(&u, &lifted);
        for j in 0..n_cells {
            assert!((from_reduced.h_alpha1[j] - from_full.h_alpha1[j]).abs() <= 1e-14);
            assert!((from_reduced.alpha1[j] - from_full.alpha1[j]).abs() <= 1e-14);
            assert!((from_reduced.sum_alpha[j] - from_full.sum_alpha[j]).abs() <= 1e-13);
        }
    }
}
