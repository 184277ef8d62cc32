//! GEM gradient projection via its small dual QP.
//!
//! Given the current flat gradient g and one memory gradient per past
//! task (rows of M), solve
//!
//!   minimize_v  ½ vᵀ(MMᵀ + εI)v + (Mg)ᵀv   s.t.  v ≥ γ
//!
//! and return g̃ = Mᵀv* + g. With γ = 0 and no violated constraint the
//! input is returned unchanged.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CglError, Result};

const MAX_SWEEPS: usize = 200_000;
const KKT_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project `g` so no memory-gradient dot product falls below the margin.
pub fn gem_project(g: &[f64], memories: &[Vec<f64>], margin: f64) -> Result<Vec<f64>> {
    if memories.is_empty() {
        return Ok(g.to_vec());
    }
    let t = memories.len();
    for m in memories {
        if m.len() != g.len() {
            return Err(CglError::ShapeMismatch {
                op: "gem_project",
                lhs: vec![g.len()],
                rhs: vec![m.len()],
            });
        }
    }
    let mg: Vec<f64> = memories.iter().map(|m| dot(m, g)).collect();
    if margin == 0.0 && mg.iter().all(|&v| v >= 0.0) {
        // bit-exact pass-through
        return Ok(g.to_vec());
    }

    // A = M Mᵀ + εI
    let mut a = vec![0.0; t * t];
    let mut diag_max = 0.0f64;
    for i in 0..t {
        for j in i..t {
            let v = dot(&memories[i], &memories[j]);
            a[i * t + j] = v;
            a[j * t + i] = v;
        }
        diag_max = diag_max.max(a[i * t + i]);
    }
    let eps = 1e-12 * diag_max.max(1.0);
    for i in 0..t {
        a[i * t + i] += eps;
    }

    // projected cyclic coordinate descent on v >= margin
    let mut v = vec![margin.max(0.0); t];
    let scale = diag_max.max(mg.iter().fold(0.0f64, |m, x| m.max(x.abs()))).max(1.0);
    let tol = KKT_TOL * scale;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        for i in 0..t {
            let gi = dot(&a[i * t..(i + 1) * t], &v) + mg[i];
            let cand = v[i] - gi / a[i * t + i];
            v[i] = if cand > margin { cand } else { margin };
        }
        residual = 0.0;
        for i in 0..t {
            let gi = dot(&a[i * t..(i + 1) * t], &v) + mg[i];
            let r = if v[i] > margin + tol { gi.abs() } else { (-gi).max(0.0) };
            residual = residual.max(r);
        }
        if residual <= tol {
            let mut out = g.to_vec();
            for (vi, m) in v.iter().zip(memories) {
                for (o, mi) in out.iter_mut().zip(m) {
                    *o += vi * mi;
                }
            }
            return Ok(out);
        }
    }
    Err(CglError::QpNoConvergence { residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_violation_is_bitexact_passthrough() {
        let g = vec![1.0, 0.0];
        let m = vec![vec![1.0, 1.0]];
        let out = gem_project(&g, &m, 0.0).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn single_constraint_projection_closed_form() {
        // g = [-1,0], m = [1,0]: projection onto {x·m >= 0} is [0,0]
        let g = vec![-1.0, 0.0];
        let m = vec![vec![1.0, 0.0]];
        let out = gem_project(&g, &m, 0.0).unwrap();
        assert!((out[0]).abs() < 1e-9);
        assert!((out[1]).abs() < 1e-9);
    }

    #[test]
    fn projection_satisfies_constraints() {
        let g = vec![-1.0, -2.0, 0.5];
        let mems = vec![vec![1.0, 0.0, 0.0], vec![0.5, 1.0, -0.5]];
        let out = gem_project(&g, &mems, 0.0).unwrap();
        let norm_out: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        for m in &mems {
            let norm_m: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot(&out, m) >= -1e-6 * norm_out * norm_m);
        }
    }

    #[test]
    fn margin_lifts_dual_variables() {
        // with a strictly positive margin even a non-violating gradient
        // gets pulled toward the memories
        let g = vec![1.0, 0.0];
        let m = vec![vec![1.0, 1.0]];
        let out = gem_project(&g, &m, 0.5).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-9);
        assert!((out[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(gem_project(&[1.0, 2.0], &[vec![1.0]], 0.0).is_err());
    }
}
