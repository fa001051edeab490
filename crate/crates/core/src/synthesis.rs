//! Optimal gain schedule and closed-form optimal cost.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dims, ValidatedModel};
use crate::riccati::CreSolution;
use crate::serde_matrix::{matrices, matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainStep {
    pub k: usize,
    /// Remote gain: `Û_k = Khat_k X̂_k`.
    #[serde(rename = "Khat", with = "matrix")]
    pub khat: DMatrix<f64>,
    /// Local error gains: `ũⁱ_k = Ktildeⁱ_k x̃ⁱ_k`.
    #[serde(rename = "Ktilde", with = "matrices")]
    pub ktilde: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub horizon: usize,
    pub state_dims: Vec<usize>,
    /// `[m0, m1, .., mL]`.
    pub input_dims: Vec<usize>,
    pub steps: Vec<GainStep>,
}

/// Rows `input_range(j)` of the M_L identity: extracts input block j from U.
pub fn selector(input_dims: &[usize], j: usize) -> DMatrix<f64> {
    let ml: usize = input_dims.iter().sum();
    let off: usize = input_dims[..j].iter().sum();
    let mut s = DMatrix::zeros(input_dims[j], ml);
    for r in 0..input_dims[j] {
        s[(r, off + r)] = 1.0;
    }
    s
}

impl GainSchedule {
    pub fn zeros(dims: &Dims, horizon: usize) -> Self {
        let steps = (0..=horizon)
            .map(|k| GainStep {
                k,
                khat: DMatrix::zeros(dims.ml, dims.nl),
                ktilde: (0..dims.subsystems())
                    .map(|i| DMatrix::zeros(dims.input_dims[i + 1], dims.state_dims[i]))
                    .collect(),
            })
            .collect();
        GainSchedule {
            horizon,
            state_dims: dims.state_dims.clone(),
            input_dims: dims.input_dims.clone(),
            steps,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn selector(&self, j: usize) -> DMatrix<f64> {
        selector(&self.input_dims, j)
    }

    pub fn nl(&self) -> usize {
        self.state_dims.iter().sum()
    }

    pub fn ml(&self) -> usize {
        self.input_dims.iter().sum()
    }

    /// M_L×N_L matrix placing Ktildeⁱ_k at (input block i, state block i).
    pub fn local_block(&self, k: usize) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ml(), self.nl());
        let mut r = self.input_dims[0];
        let mut c = 0;
        for (i, kt) in self.steps[k].ktilde.iter().enumerate() {
            linalg::set_block(&mut g, r, c, kt);
            r += self.input_dims[i + 1];
            c += self.state_dims[i];
        }
        g
    }

    /// Keeps steps 0..=horizon.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon > self.horizon {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: self.horizon,
            });
        }
        let mut out = self.clone();
        out.horizon = horizon;
        out.steps.truncate(horizon + 1);
        Ok(out)
    }

    /// Verifies that the schedule covers `horizon` and matches the model dimensions.
    pub fn check_against(&self, dims: &Dims, horizon: usize) -> Result<()> {
        if self.horizon != horizon || self.steps.len() != horizon + 1 {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: self.horizon,
            });
        }
        if self.state_dims != dims.state_dims || self.input_dims != dims.input_dims {
            return Err(Error::DimensionMismatch {
                field: "gain schedule dimensions".into(),
                expected: (dims.ml, dims.nl),
                found: (self.ml(), self.nl()),
            });
        }
        for st in &self.steps {
            let bad = |field: String, m: &DMatrix<f64>, e: (usize, usize)| {
                if m.shape() != e {
                    Err(Error::DimensionMismatch {
                        field,
                        expected: e,
                        found: m.shape(),
                    })
                } else if m.iter().any(|v| !v.is_finite()) {
                    Err(Error::NonFinite { field })
                } else {
                    Ok(())
                }
            };
            bad(
                format!("Khat at k = {}", st.k),
                &st.khat,
                (dims.ml, dims.nl),
            )?;
            if st.ktilde.len() != dims.subsystems() {
                return Err(Error::DimensionMismatch {
                    field: format!("Ktilde count at k = {}", st.k),
                    expected: (dims.subsystems(), 1),
                    found: (st.ktilde.len(), 1),
                });
            }
            for (i, kt) in st.ktilde.iter().enumerate() {
                let e = (dims.input_dims[i + 1], dims.state_dims[i]);
                bad(format!("Ktilde {} at k = {}", i + 1, st.k), kt, e)?;
            }
        }
        Ok(())
    }

    /// Number of scalar gain entries over all steps.
    pub fn entry_count(&self) -> usize {
        let per_step = self.ml() * self.nl()
            + self
                .state_dims
                .iter()
                .zip(&self.input_dims[1..])
                .map(|(n, m)| n * m)
                .sum::<usize>();
        per_step * (self.horizon + 1)
    }

    /// Position of entry `idx` as `(k, block, row, col)`, where block `None` is
    /// Khat and `Some(i)` is Ktildeⁱ (0-based). Per k, Khat comes first, then
    /// each Ktildeⁱ, all row-major.
    pub fn position(&self, idx: usize) -> (usize, Option<usize>, usize, usize) {
        let per_k = self.entry_count() / (self.horizon + 1);
        let k = idx / per_k;
        let mut rest = idx % per_k;
        let nl = self.nl();
        if rest < self.ml() * nl {
            return (k, None, rest / nl, rest % nl);
        }
        rest -= self.ml() * nl;
        for (i, (&m, &n)) in self.input_dims[1..]
            .iter()
            .zip(&self.state_dims)
            .enumerate()
        {
            if rest < m * n {
                return (k, Some(i), rest / n, rest % n);
            }
            rest -= m * n;
        }
        unreachable!("entry index out of range")
    }

    pub fn entry(&self, idx: usize) -> f64 {
        let (k, b, r, c) = self.position(idx);
        match b {
            None => self.steps[k].khat[(r, c)],
            Some(i) => self.steps[k].ktilde[i][(r, c)],
        }
    }

    pub fn set_entry(&mut self, idx: usize, value: f64) {
        let (k, b, r, c) = self.position(idx);
        match b {
            None => self.steps[k].khat[(r, c)] = value,
            Some(i) => self.steps[k].ktilde[i][(r, c)] = value,
        }
    }
}

fn input_dims_of(sol: &CreSolution) -> Vec<usize> {
    let c = sol.coefficients(0);
    let locals: Vec<usize> = c.subsystems.iter().map(|s| s.pi.nrows()).collect();
    let m0 = c.lambda.nrows() - locals.iter().sum::<usize>();
    std::iter::once(m0).chain(locals).collect()
}

/// `Khat_k = −Λ_k⁻¹Ψ_k` and `Ktildeⁱ_k = −(Π̃ⁱ_k)⁻¹Ω̃ⁱ_k` for k = 0..N.
pub fn gains(sol: &CreSolution) -> Result<GainSchedule> {
    let state_dims = sol.step(0).subsystems.iter().map(|s| s.p.nrows()).collect();
    let input_dims = input_dims_of(sol);
    let mut steps = Vec::with_capacity(sol.horizon + 1);
    for k in 0..=sol.horizon {
        let c = sol.coefficients(k);
        let khat = -linalg::solve(&c.lambda, &c.psi)
            .map_err(|rcond| Error::SingularLambda { k, rcond })?;
        // checked for completeness: the remote gain does not use it but solvability does
        linalg::solve(&c.lambda_tilde, &c.psi_tilde)
            .map_err(|rcond| Error::SingularLambdaTilde { k, rcond })?;
        let mut ktilde = Vec::new();
        for i in 0..c.subsystems.len() {
            ktilde.push(local_gain_tilde(sol, k, i)?);
        }
        steps.push(GainStep { k, khat, ktilde });
    }
    Ok(GainSchedule {
        horizon: sol.horizon,
        state_dims,
        input_dims,
        steps,
    })
}

/// `gⁱ_k = −(Πⁱ_k)⁻¹Ωⁱ_k` (diagnostic; `i` is 0-based).
pub fn local_gain_full(sol: &CreSolution, k: usize, i: usize) -> Result<DMatrix<f64>> {
    let sc = &sol.coefficients(k).subsystems[i];
    linalg::solve(&sc.pi, &sc.omega)
        .map(|x| -x)
        .map_err(|rcond| Error::SingularPi {
            k,
            subsystem: i + 1,
            which: "Pi",
            rcond,
        })
}

/// `g̃ⁱ_k = −(Π̃ⁱ_k)⁻¹Ω̃ⁱ_k` (`i` is 0-based).
pub fn local_gain_tilde(sol: &CreSolution, k: usize, i: usize) -> Result<DMatrix<f64>> {
    let sc = &sol.coefficients(k).subsystems[i];
    linalg::solve(&sc.pi_tilde, &sc.omega_tilde)
        .map(|x| -x)
        .map_err(|rcond| Error::SingularPi {
            k,
            subsystem: i + 1,
            which: "PiTilde",
            rcond,
        })
}

const COST_ASYMMETRY: f64 = 1e-9;

/// Closed-form optimal cost
/// `μᵀP_0μ + Σᵢ [pⁱ Tr(Σ_x0ⁱ Pⁱ_0) + (1−pⁱ) Tr(Σ_x0ⁱ Hⁱ_0)] + Σᵢ Σ_k Tr(Σ_vⁱ Lⁱ_{k+1})`.
///
/// The mean term uses the stacked `P_0` because the weights couple subsystems.
pub fn optimal_cost(sol: &CreSolution, model: &ValidatedModel) -> Result<f64> {
    let st = sol.step(0);
    let asym = linalg::asymmetry(&st.p);
    if asym > COST_ASYMMETRY {
        return Err(Error::SolverConsistency {
            what: "P_0 is not symmetric".into(),
            asymmetry: asym,
        });
    }
    let mu = crate::model::stack(model).mu;
    let mut total = linalg::quad(&mu, &linalg::symmetrize(&st.p));
    for (i, sub) in model.model().subsystems.iter().enumerate() {
        let ss = &st.subsystems[i];
        total += sub.p * linalg::trace_mul(&sub.sigma_x0, &ss.p);
        total += (1.0 - sub.p) * linalg::trace_mul(&sub.sigma_x0, &ss.h);
        for k in 0..=sol.horizon {
            total += linalg::trace_mul(&sub.sigma_v, &sol.step(k + 1).subsystems[i].l);
        }
    }
    Ok(total)
}

/// The cost expression read literally: per-subsystem mean terms and a
/// `(1−pⁱ) Tr[Σ_x0ⁱ (Pⁱ_0 + Hⁱ_0)]` initial-covariance term. Diagnostic only.
pub fn literal_cost(sol: &CreSolution, model: &ValidatedModel) -> f64 {
    let st = sol.step(0);
    let mut total = 0.0;
    for (i, sub) in model.model().subsystems.iter().enumerate() {
        let ss = &st.subsystems[i];
        total += linalg::quad(&sub.mu, &ss.p) + linalg::trace_mul(&sub.sigma_x0, &ss.p);
        total += (1.0 - sub.p) * linalg::trace_mul(&sub.sigma_x0, &(&ss.p + &ss.h));
        for k in 0..=sol.horizon {
            total += linalg::trace_mul(&sub.sigma_v, &sol.step(k + 1).subsystems[i].l);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_instance, scalar_instance, stack, validate, Mode};
    use crate::riccati::{solve_cre, Coupling};

    #[test]
    fn selectors_partition_identity() {
        let dims = [2, 1, 3];
        let sels: Vec<_> = (0..3).map(|j| selector(&dims, j)).collect();
        assert_eq!(&sels[0] * sels[0].transpose(), DMatrix::identity(2, 2));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(
                        &sels[i] * sels[j].transpose(),
                        DMatrix::zeros(dims[i], dims[j])
                    );
                }
            }
        }
        let mut stacked = DMatrix::zeros(6, 6);
        let mut r = 0;
        for s in &sels {
            linalg::set_block(&mut stacked, r, 0, s);
            r += s.nrows();
        }
        assert_eq!(stacked, DMatrix::identity(6, 6));
    }

    #[test]
    fn scalar_gains_by_hand() {
        let v = validate(scalar_instance(), Mode::Definite).unwrap();
        let sol = solve_cre(&v, &stack(&v), Coupling::Consistent).unwrap();
        let g = gains(&sol).unwrap();
        let k0 = -1.75 / 2.75;
        let want = [(k0, k0), (-0.5, -0.5)];
        for (k, &(kh, kt)) in want.iter().enumerate() {
            assert_eq!(g.steps[k].khat[(0, 0)], 0.0);
            assert!((g.steps[k].khat[(1, 0)] - kh).abs() <= 1e-12);
            assert!((g.steps[k].ktilde[0][(0, 0)] - kt).abs() <= 1e-12);
        }
        let c = optimal_cost(&sol, &v).unwrap();
        let p0 = 1.0 + 1.75 + 0.4375 - 1.75 * 1.75 / 2.75;
        assert!((c - (2.0 * p0 + 1.75 + 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn zero_noise_zero_cost() {
        let mut m = reference_instance().unwrap().with_horizon(5);
        for s in &mut m.subsystems {
            s.sigma_v.fill(0.0);
            s.sigma_x0.fill(0.0);
            s.mu.fill(0.0);
        }
        let v = validate(m, Mode::Indefinite).unwrap();
        let sol = solve_cre(&v, &stack(&v), Coupling::Consistent).unwrap();
        assert_eq!(optimal_cost(&sol, &v).unwrap(), 0.0);
    }

    #[test]
    fn zero_coupling_zero_gains() {
        let mut m = scalar_instance();
        m.subsystems[0].a.fill(0.0);
        m.subsystems[0].a_bar.fill(0.0);
        let v = validate(m, Mode::Definite).unwrap();
        let g = gains(&solve_cre(&v, &stack(&v), Coupling::Literal).unwrap()).unwrap();
        for st in &g.steps {
            assert!(st.khat.iter().chain(st.ktilde[0].iter()).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn weight_scaling_keeps_gains() {
        let base = reference_instance().unwrap().with_horizon(5);
        let c = 3.7;
        let run = |m: crate::model::NetworkModel| {
            let v = validate(m, Mode::Indefinite).unwrap();
            let sol = solve_cre(&v, &stack(&v), Coupling::Consistent).unwrap();
            (gains(&sol).unwrap(), optimal_cost(&sol, &v).unwrap())
        };
        let (g1, j1) = run(base.clone());
        let (g2, j2) = run(base.scaled_weights(c));
        for (a, b) in g1.steps.iter().zip(&g2.steps) {
            assert!(linalg::rel_diff(&a.khat, &b.khat) <= 1e-12);
            for (x, y) in a.ktilde.iter().zip(&b.ktilde) {
                assert!(linalg::rel_diff(x, y) <= 1e-12);
            }
        }
        assert!((j2 - c * j1).abs() <= 1e-12 * j2.abs());
    }

    #[test]
    fn entry_indexing_covers_schedule() {
        let v = validate(
            reference_instance().unwrap().with_horizon(2),
            Mode::Indefinite,
        )
        .unwrap();
        let mut g = GainSchedule::zeros(v.dims(), 2);
        assert_eq!(g.entry_count(), 3 * (8 * 6 + 3 * 4));
        for idx in 0..g.entry_count() {
            g.set_entry(idx, idx as f64);
        }
        assert_eq!(g.steps[0].khat[(0, 1)], 1.0);
        assert_eq!(g.steps[0].ktilde[0][(0, 0)], 48.0);
        assert_eq!(g.steps[1].khat[(0, 0)], 60.0);
        assert_eq!(g.position(59), (0, Some(2), 1, 1));
        let local = g.local_block(0);
        assert_eq!(local[(2, 0)], 48.0);
        assert_eq!(local[(7, 5)], 59.0);
        assert_eq!(local[(0, 0)], 0.0);
        let back = GainSchedule::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(g.check_against(v.dims(), 2).is_ok());
        assert!(matches!(
            g.check_against(v.dims(), 3),
            Err(Error::HorizonMismatch { .. })
        ));
        assert_eq!(g.truncated(1).unwrap().steps.len(), 2);
    }
}
