//! Implicit (backward-Euler) friction step, split into the macro closed form
//! and a per-cell linear solve for the moment block.
//!
//! During a friction step the height is constant, so the micro ODE is linear
//! with frozen coefficients:
//!
//! ```text
//!   d(V_j)/dt = (1/h_j^2) M1 V_j + (1/h_j) M2 V_j + u_m b,
//! ```
//!
//! and backward Euler amounts to solving `D_j V^{n+1} = V^n + dt u_m^{n+1} b`
//! with `D_j = I - (dt/h_j^2) M1 - (dt/h_j) M2`. The macro step runs first:
//! implicit Euler on the momentum equation with the moments frozen at time n
//! has the closed form
//!
//! ```text
//!   u_m^{n+1} = (h u_m^n - dt (nu/lambda) sum_j alpha_j^n) / (h + dt nu/lambda).
//! ```
//!
//! Backward Euler is unconditionally stable for this dissipative system, so
//! no sub-stepping is applied; the split is first order like the transport.

use crate::error::SolverError;
use crate::linalg::LuFactors;
use crate::model::{FrictionOperators, MacroState, MicroState, ModelParams};
use std::collections::HashMap;

/// Direct per-cell solves up to this moment count; cached factorizations above.
const CACHE_MIN_MOMENTS: usize = 32;
const CACHE_CAPACITY: usize = 64;

/// Cache of D_j factorizations keyed by the exact bit patterns of (dt, h).
/// Bit-exact keys are stricter than the 1e-15-relative reuse bound this type
/// promises, so a hit always reproduces a fresh solve. Entries from older
/// time steps are dropped whenever dt changes.
#[derive(Debug, Default)]
pub struct FrictionSolveCache {
    dt_bits: u64,
    map: HashMap<u64, LuFactors>,
}

impl FrictionSolveCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn roll(&mut self, dt: f64) {
        let bits = dt.to_bits();
        if bits != self.dt_bits {
            self.dt_bits = bits;
            self.map.clear();
        }
    }
}

/// Macro friction step: h unchanged, momentum by implicit Euler with the
/// moment sum frozen at time n. A zero-viscosity run is the identity.
pub fn macro_friction_step(
    u: &MacroState,
    sum_alpha: &[f64],
    dt: f64,
    params: &ModelParams,
) -> Result<MacroState, SolverError> {
    let n_cells = u.n_cells();
    if sum_alpha.len() != n_cells {
        return Err(SolverError::ShapeMismatch {
            context: "macro_friction_step",
            detail: format!("sum_alpha has {} cells, state has {n_cells}", sum_alpha.len()),
        });
    }
    if params.nu == 0.0 {
        return Ok(u.clone());
    }
    u.check_positive_height("macro_friction_step")?;
    let k = params.nu / params.lambda;
    let mut hu_new = vec![0.0; n_cells];
    for j in 0..n_cells {
        let h = u.h()[j];
        let u_next = (u.hu()[j] - dt * k * sum_alpha[j]) / (h + dt * k);
        hu_new[j] = h * u_next;
    }
    Ok(MacroState::new(u.h().to_vec(), hu_new))
}

/// D = I - s M1' - t b' 1^T into a row-major scratch buffer, where
/// s = dt nu / h^2 and t = dt nu / (lambda h) absorb the viscosity scaling of
/// the unit operators.
fn assemble_d(d: &mut [f64], n: usize, s: f64, t: f64, ops: &FrictionOperators) {
    let m1_unit = ops.m1_unit();
    let b_unit = ops.b_unit();
    for row in 0..n {
        let m1_row = m1_unit.row(row);
        let tb = t * b_unit[row];
        let dst = &mut d[row * n..(row + 1) * n];
        for col in 0..n {
            dst[col] = -s * m1_row[col] - tb;
        }
        dst[row] += 1.0;
    }
}

/// Micro friction step: per-cell implicit solve against the post-macro
/// velocities. `u_new` must be the output of [`macro_friction_step`].
pub fn micro_friction_step(
    u_new: &MacroState,
    v: &MicroState,
    dt: f64,
    ops: &FrictionOperators,
    cache: &mut FrictionSolveCache,
) -> Result<MicroState, SolverError> {
    let n_cells = v.n_cells();
    let n = v.n_moments();
    if u_new.n_cells() != n_cells {
        return Err(SolverError::ShapeMismatch {
            context: "micro_friction_step",
            detail: format!(
                "macro state has {} cells, micro has {n_cells}",
                u_new.n_cells()
            ),
        });
    }
    if n == 0 || ops.nu() == 0.0 {
        return Ok(v.clone());
    }
    if ops.n() != n {
        return Err(SolverError::ShapeMismatch {
            context: "micro_friction_step",
            detail: format!("operators built for N = {}, state has N = {n}", ops.n()),
        });
    }
    u_new.check_positive_height("micro_friction_step")?;
    cache.roll(dt);
    let use_cache = n > CACHE_MIN_MOMENTS;

    let nu = ops.nu();
    let nu_over_lambda = nu / ops.lambda();
    let b_unit = ops.b_unit();

    let mut out = MicroState::zeros(n_cells, n);
    let mut d = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for j in 0..n_cells {
        let h = u_new.h()[j];
        let um = u_new.hu()[j] / h;
        let s = dt * nu / (h * h);
        let t = dt * nu_over_lambda / h;
        for k in 0..n {
            rhs[k] = v.row(j)[k] + dt * um * nu_over_lambda * b_unit[k];
        }
        let singular = |_e| SolverError::SingularSystem {
            context: "micro_friction_step",
            cell: j,
        };
        if use_cache {
            let key = h.to_bits();
            if !cache.map.contains_key(&key) && cache.map.len() < CACHE_CAPACITY {
                assemble_d(&mut d, n, s, t, ops);
                let lu = LuFactors::from_raw(&d, n, "micro_friction_step").map_err(singular)?;
                cache.map.insert(key, lu);
            }
            match cache.map.get(&key) {
                Some(lu) => lu.solve_vec(&mut rhs),
                None => {
                    assemble_d(&mut d, n, s, t, ops);
                    LuFactors::from_raw(&d, n, "micro_friction_step")
                        .map_err(singular)?
                        .solve_vec(&mut rhs);
                }
            }
        } else {
            assemble_d(&mut d, n, s, t, ops);
            LuFactors::from_raw(&d, n, "micro_friction_step")
                .map_err(singular)?
                .solve_vec(&mut rhs);
        }
        out.row_mut(j).copy_from_slice(&rhs);
    }
    Ok(out)
}
