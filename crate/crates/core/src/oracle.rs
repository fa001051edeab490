//! Exact expected cost of linear strategies by second-moment propagation of
//! `z = (X̂, X̃)`, plus stationarity and costate checks built on it.
//!
//! One step of the closed loop is
//! `X̂⁺ = (A + B Khat) X̂ + Γ e`, `X̃⁺ = (I − Γ) e`, with
//! `e = (A + B G) X̃ + Σᵢ wᵢ Eᵢ z + V` and `G` the block-diagonal local gain.
//! Because `Γ` is independent of `e` and diagonal with Bernoulli blocks,
//! `E[Γ M Γ]` weights block (i, j) by `pⁱ pʲ` off the diagonal and by `pⁱ` on it.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{self, trace_mul};
use crate::model::{StackedModel, ValidatedModel};
use crate::riccati::CreSolution;
use crate::synthesis::GainSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub k: usize,
    /// E[X̂ X̂ᵀ]
    pub s: DMatrix<f64>,
    /// E[X̂ X̃ᵀ]
    pub c: DMatrix<f64>,
    /// E[X̃ X̃ᵀ]
    pub t: DMatrix<f64>,
    pub mean_hat: DVector<f64>,
    pub mean_tilde: DVector<f64>,
}

impl MomentState {
    /// E[X Xᵀ] with X = X̂ + X̃.
    pub fn state_second_moment(&self) -> DMatrix<f64> {
        &self.s + &self.c + self.c.transpose() + &self.t
    }

    /// The joint moment matrix [[S, C], [Cᵀ, T]].
    pub fn joint(&self) -> DMatrix<f64> {
        let n = self.s.nrows();
        let mut z = DMatrix::zeros(2 * n, 2 * n);
        linalg::set_block(&mut z, 0, 0, &self.s);
        linalg::set_block(&mut z, 0, n, &self.c);
        linalg::set_block(&mut z, n, 0, &self.c.transpose());
        linalg::set_block(&mut z, n, n, &self.t);
        z
    }
}

/// Block-Hadamard weights for E[ΓMΓ], E[ΓM(I−Γ)], E[(I−Γ)M(I−Γ)].
struct BernoulliWeights {
    both: DMatrix<f64>,
    cross: DMatrix<f64>,
    neither: DMatrix<f64>,
}

impl BernoulliWeights {
    fn new(s: &StackedModel) -> Self {
        let d = &s.dims;
        let owner: Vec<usize> = (0..d.subsystems())
            .flat_map(|i| d.state_range(i).map(move |_| i))
            .collect();
        let p = s.p_state();
        let n = d.nl;
        let mut both = DMatrix::zeros(n, n);
        let mut cross = DMatrix::zeros(n, n);
        let mut neither = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                if owner[r] == owner[c] {
                    both[(r, c)] = p[r];
                    neither[(r, c)] = 1.0 - p[r];
                } else {
                    both[(r, c)] = p[r] * p[c];
                    cross[(r, c)] = p[r] * (1.0 - p[c]);
                    neither[(r, c)] = (1.0 - p[r]) * (1.0 - p[c]);
                }
            }
        }
        BernoulliWeights {
            both,
            cross,
            neither,
        }
    }
}

/// Moments and expected costs of one strategy.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// k = 0..=N+1.
    pub moments: Vec<MomentState>,
    /// E[XᵀQX + UᵀRU] for k = 0..=N.
    pub stage: Vec<f64>,
    pub terminal: f64,
    pub total: f64,
}

impl Evaluation {
    /// E‖xⁱ_k‖² indexed `[k][i]`.
    pub fn state_energy(&self, s: &StackedModel) -> Vec<Vec<f64>> {
        self.moments
            .iter()
            .map(|m| {
                let x = m.state_second_moment();
                (0..s.subsystems())
                    .map(|i| s.dims.state_range(i).map(|j| x[(j, j)]).sum())
                    .collect()
            })
            .collect()
    }
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    linalg::set_block(&mut out, 0, 0, a);
    linalg::set_block(&mut out, 0, a.ncols(), b);
    out
}

pub fn evaluate(
    model: &ValidatedModel,
    s: &StackedModel,
    gains: &GainSchedule,
) -> Result<Evaluation> {
    let n = model.horizon();
    gains.check_against(model.dims(), n)?;
    let m = model.model();
    let nl = s.dims.nl;
    let w = BernoulliWeights::new(s);
    let pd = &s.p_diag;
    let qd = DMatrix::identity(nl, nl) - pd;
    let zero = DMatrix::zeros(nl, nl);

    let mut cur = MomentState {
        k: 0,
        s: &s.mu * s.mu.transpose() + w.both.component_mul(&s.sigma_x0),
        c: w.cross.component_mul(&s.sigma_x0),
        t: w.neither.component_mul(&s.sigma_x0),
        mean_hat: s.mu.clone(),
        mean_tilde: DVector::zeros(nl),
    };
    let mut moments = Vec::with_capacity(n + 2);
    let mut stage = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let kh = &gains.steps[k].khat;
        let g = gains.local_block(k);
        let z = cur.joint();
        let xm = cur.state_second_moment();
        let um = kh * &cur.s * kh.transpose()
            + kh * &cur.c * g.transpose()
            + &g * cur.c.transpose() * kh.transpose()
            + &g * &cur.t * g.transpose();
        stage.push(trace_mul(&m.q, &xm) + trace_mul(&m.r, &um));

        let mmap = hstack(&(&s.a + &s.b * kh), &zero);
        let dmap = hstack(&zero, &(&s.a + &s.b * &g));
        let mut ee = &dmap * &z * dmap.transpose() + &s.sigma_v;
        for i in 0..s.subsystems() {
            if s.sigma_w[i] != 0.0 {
                let e = hstack(
                    &(&s.a_bold[i] + &s.b_bold[i] * kh),
                    &(&s.a_bold[i] + &s.b_bold[i] * &g),
                );
                ee += (&e * &z * e.transpose()) * s.sigma_w[i];
            }
        }
        let me = &mmap * &z * dmap.transpose();
        let zbar = DVector::from_iterator(
            2 * nl,
            cur.mean_hat.iter().chain(cur.mean_tilde.iter()).copied(),
        );
        let dbar = &dmap * &zbar;
        let next = MomentState {
            k: k + 1,
            s: &mmap * &z * mmap.transpose()
                + &me * pd
                + pd * me.transpose()
                + w.both.component_mul(&ee),
            c: &me * &qd + w.cross.component_mul(&ee),
            t: w.neither.component_mul(&ee),
            mean_hat: &mmap * &zbar + pd * &dbar,
            mean_tilde: &qd * &dbar,
        };
        moments.push(std::mem::replace(&mut cur, next));
    }
    let terminal = trace_mul(&m.p_terminal, &cur.state_second_moment());
    moments.push(cur);
    let mut acc = linalg::Neumaier::default();
    stage.iter().for_each(|&v| acc.add(v));
    acc.add(terminal);
    Ok(Evaluation {
        moments,
        stage,
        terminal,
        total: acc.value(),
    })
}

/// Total expected cost including the terminal term.
pub fn exact_cost(model: &ValidatedModel, s: &StackedModel, gains: &GainSchedule) -> Result<f64> {
    Ok(evaluate(model, s, gains)?.total)
}

/// Finite-difference probe of the exact cost around a gain schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostateCheck {
    pub cost: f64,
    /// `1e-6 · (1 + |cost|)`.
    pub tolerance: f64,
    pub probed: usize,
    pub exhaustive: bool,
    pub max_abs_derivative: f64,
    pub worst_entry: usize,
    /// Norm of the probed gradient entries belonging to step k, for k = 0..=N.
    pub step_gradient_norm: Vec<f64>,
    /// Smallest `J(K+εe) − 2J(K) + J(K−εe)` over probed axes, divided by ε².
    pub min_second_difference: f64,
    pub convex_along_axes: bool,
}

impl CostateCheck {
    pub fn stationary(&self) -> bool {
        self.max_abs_derivative <= self.tolerance
    }
}

pub const STATIONARITY_SAMPLE: usize = 500;

/// Central differences with `ε = base · (1 + |entry|)` on every gain entry, or on
/// 500 entries drawn without replacement with `seed` when there are more.
pub fn stationarity_check(
    model: &ValidatedModel,
    s: &StackedModel,
    gains: &GainSchedule,
    base: f64,
    seed: u64,
) -> Result<CostateCheck> {
    let cost = exact_cost(model, s, gains)?;
    let total = gains.entry_count();
    let exhaustive = total <= STATIONARITY_SAMPLE;
    let mut entries: Vec<usize> = if exhaustive {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, total, STATIONARITY_SAMPLE).into_vec()
    };
    entries.sort_unstable();
    let probes: Vec<Result<(usize, f64, f64)>> = entries
        .par_iter()
        .map(|&idx| {
            let v = gains.entry(idx);
            let eps = base * (1.0 + v.abs());
            let mut g = gains.clone();
            g.set_entry(idx, v + eps);
            let up = exact_cost(model, s, &g)?;
            g.set_entry(idx, v - eps);
            let down = exact_cost(model, s, &g)?;
            Ok((
                idx,
                (up - down) / (2.0 * eps),
                (up - 2.0 * cost + down) / (eps * eps),
            ))
        })
        .collect();
    let mut step_sq = vec![0.0; gains.horizon + 1];
    let mut max_abs = 0.0f64;
    let mut worst = entries.first().copied().unwrap_or(0);
    let mut min_sd = f64::INFINITY;
    let mut convex = true;
    for p in probes {
        let (idx, d, sd) = p?;
        let (k, ..) = gains.position(idx);
        step_sq[k] += d * d;
        if d.abs() > max_abs {
            max_abs = d.abs();
            worst = idx;
        }
        min_sd = min_sd.min(sd);
        let eps = base * (1.0 + gains.entry(idx).abs());
        // rounding in the numerator is a few ulps of the cost
        if sd * eps * eps < -64.0 * f64::EPSILON * (1.0 + cost.abs()) {
            convex = false;
        }
    }
    Ok(CostateCheck {
        cost,
        tolerance: 1e-6 * (1.0 + cost.abs()),
        probed: entries.len(),
        exhaustive,
        max_abs_derivative: max_abs,
        worst_entry: worst,
        step_gradient_norm: step_sq.into_iter().map(f64::sqrt).collect(),
        min_second_difference: min_sd,
        convex_along_axes: convex,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub cost: f64,
    pub trials: usize,
    /// Perturbations whose exact cost is below `cost`.
    pub lower: usize,
    /// Smallest `(J(perturbed) − J) / (1 + |J|)`.
    pub min_relative_increase: f64,
}

/// Random spot-check: perturbs every entry by `scale · (1 + |entry|) · N(0, 1)`,
/// perturbation t using stream t of `seed`.
pub fn perturbation_check(
    model: &ValidatedModel,
    s: &StackedModel,
    gains: &GainSchedule,
    trials: usize,
    scale: f64,
    seed: u64,
) -> Result<PerturbationReport> {
    let cost = exact_cost(model, s, gains)?;
    let costs: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut g = gains.clone();
            for idx in 0..g.entry_count() {
                let v = g.entry(idx);
                let z: f64 = StandardNormal.sample(&mut rng);
                g.set_entry(idx, v + scale * (1.0 + v.abs()) * z);
            }
            exact_cost(model, s, &g)
        })
        .collect();
    let mut lower = 0;
    let mut min_inc = f64::INFINITY;
    for c in costs {
        let c = c?;
        if c < cost {
            lower += 1;
        }
        min_inc = min_inc.min((c - cost) / (1.0 + cost.abs()));
    }
    Ok(PerturbationReport {
        cost,
        trials,
        lower,
        min_relative_increase: min_inc,
    })
}

/// Costate values `costate_value[k] = E[X_kᵀ(P_k X̂_k + H_k X̃_k)]` and the
/// per-step identity `costate_value[k] − costate_value[k+1] = stage[k] − noise[k]`,
/// where `noise[k] = Tr(L_{k+1} Σ_V)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostateMoments {
    pub costate_value: Vec<f64>,
    pub stage: Vec<f64>,
    pub noise: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_residual: f64,
    /// `costate_value[0] + Σ noise`, which equals the expected cost at the optimum.
    pub cost_from_costate: f64,
    pub exact_cost: f64,
}

impl CostateMoments {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_residual <= tol
    }
}

pub fn costate_moments(
    model: &ValidatedModel,
    s: &StackedModel,
    gains: &GainSchedule,
    sol: &CreSolution,
) -> Result<CostateMoments> {
    let ev = evaluate(model, s, gains)?;
    let n = model.horizon();
    let costate_value: Vec<f64> = ev
        .moments
        .iter()
        .map(|mo| {
            let st = sol.step(mo.k);
            trace_mul(&st.p, &mo.s)
                + trace_mul(&st.p, &mo.c)
                + trace_mul(&st.h, &mo.c.transpose())
                + trace_mul(&st.h, &mo.t)
        })
        .collect();
    let noise: Vec<f64> = (0..=n)
        .map(|k| trace_mul(&sol.step(k + 1).l, &s.sigma_v))
        .collect();
    let residual: Vec<f64> = (0..=n)
        .map(|k| {
            let lhs = costate_value[k] - costate_value[k + 1];
            let rhs = ev.stage[k] - noise[k];
            let scale = costate_value[k]
                .abs()
                .max(costate_value[k + 1].abs())
                .max(ev.stage[k].abs())
                .max(noise[k].abs());
            if scale == 0.0 {
                0.0
            } else {
                (lhs - rhs).abs() / scale
            }
        })
        .collect();
    let mut acc = linalg::Neumaier::default();
    acc.add(costate_value[0]);
    noise.iter().for_each(|&v| acc.add(v));
    Ok(CostateMoments {
        max_residual: residual.iter().fold(0.0, |a, &b| a.max(b)),
        costate_value,
        stage: ev.stage,
        noise,
        residual,
        cost_from_costate: acc.value(),
        exact_cost: ev.total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_instance, scalar_instance, stack, validate, Mode, NetworkModel};
    use crate::riccati::{solve_cre, Coupling};
    use crate::synthesis::{gains, optimal_cost};

    fn optimal(m: NetworkModel) -> (ValidatedModel, StackedModel, GainSchedule, CreSolution) {
        let v = validate(m, Mode::Indefinite).unwrap();
        let s = stack(&v);
        let sol = solve_cre(&v, &s, Coupling::Consistent).unwrap();
        let g = gains(&sol).unwrap();
        (v, s, g, sol)
    }

    #[test]
    fn deterministic_hand_case() {
        let mut m = scalar_instance();
        m.horizon = 0;
        let sub = &mut m.subsystems[0];
        sub.a[(0, 0)] = 2.0;
        sub.a_bar[(0, 0)] = 0.0;
        sub.sigma_w = 0.0;
        sub.sigma_v[(0, 0)] = 0.0;
        sub.sigma_x0[(0, 0)] = 0.0;
        let v = validate(m, Mode::Definite).unwrap();
        let s = stack(&v);
        let g = GainSchedule::zeros(v.dims(), 0);
        assert_eq!(exact_cost(&v, &s, &g).unwrap(), 5.0);
    }

    #[test]
    fn optimum_matches_closed_form() {
        for m in [
            scalar_instance(),
            reference_instance().unwrap().with_horizon(5),
        ] {
            let (v, s, g, sol) = optimal(m);
            let exact = exact_cost(&v, &s, &g).unwrap();
            let closed = optimal_cost(&sol, &v).unwrap();
            assert!(
                (exact - closed).abs() <= 1e-8 * exact.abs(),
                "{exact} vs {closed}"
            );
        }
    }

    #[test]
    fn quadratic_in_initial_mean() {
        let (v, _, g, _) = optimal(reference_instance().unwrap().with_horizon(4));
        let cost_at = |c: f64| {
            let mut m = v.model().clone();
            for s in &mut m.subsystems {
                s.mu *= c;
            }
            let v = validate(m, Mode::Indefinite).unwrap();
            exact_cost(&v, &stack(&v), &g).unwrap()
        };
        let base = cost_at(0.0);
        let one = cost_at(1.0) - base;
        for c in [2.0, 3.0] {
            let d = cost_at(c) - base;
            assert!((d - c * c * one).abs() <= 1e-9 * d.abs());
        }
    }

    #[test]
    fn moments_stay_psd() {
        let (v, s, mut g, _) = optimal(reference_instance().unwrap().with_horizon(5));
        for idx in (0..g.entry_count()).step_by(7) {
            let x = g.entry(idx);
            g.set_entry(idx, x + 0.05);
        }
        let ev = evaluate(&v, &s, &g).unwrap();
        assert_eq!(ev.moments[0].mean_tilde, DVector::zeros(6));
        for mo in &ev.moments {
            assert!(linalg::is_psd(&mo.joint()));
            assert!(linalg::asymmetry(&mo.s) <= 1e-9 && linalg::asymmetry(&mo.t) <= 1e-9);
        }
    }

    #[test]
    fn stationarity_scalar() {
        let (v, s, g, _) = optimal(scalar_instance());
        let chk = stationarity_check(&v, &s, &g, 1e-5, 0).unwrap();
        assert!(chk.exhaustive && chk.stationary() && chk.convex_along_axes);
        assert_eq!(chk.probed, g.entry_count());

        let mut bumped = g.clone();
        let idx = 1; // Khat_0 entry acting on u¹
        bumped.set_entry(idx, g.entry(idx) + 0.1);
        let chk = stationarity_check(&v, &s, &bumped, 1e-5, 0).unwrap();
        assert_eq!(chk.worst_entry, idx);
        assert!(chk.max_abs_derivative >= 1e-3 * (1.0 + chk.cost));
    }

    #[test]
    fn zero_problem_has_zero_derivative() {
        let mut m = scalar_instance();
        let sub = &mut m.subsystems[0];
        for mat in [&mut sub.a, &mut sub.a_bar, &mut sub.b, &mut sub.b0] {
            mat.fill(0.0);
        }
        let (v, s, g, _) = optimal(m);
        assert!(g.steps.iter().all(|st| st.khat.iter().all(|&x| x == 0.0)));
        assert_eq!(
            stationarity_check(&v, &s, &g, 1e-5, 0)
                .unwrap()
                .max_abs_derivative,
            0.0
        );
    }

    #[test]
    fn costate_identity_noise_free() {
        let mut m = reference_instance().unwrap().with_horizon(3);
        for s in &mut m.subsystems {
            s.sigma_v.fill(0.0);
            s.sigma_x0.fill(0.0);
        }
        let (v, s, g, sol) = optimal(m);
        let cm = costate_moments(&v, &s, &g, &sol).unwrap();
        assert!(cm.noise.iter().all(|&x| x == 0.0));
        assert!(cm.holds(1e-10));
        assert!((cm.cost_from_costate - cm.exact_cost).abs() <= 1e-10 * cm.exact_cost.abs());
    }

    #[test]
    fn costate_identity_scalar() {
        let (v, s, g, sol) = optimal(scalar_instance());
        let cm = costate_moments(&v, &s, &g, &sol).unwrap();
        assert!(cm.holds(1e-8));
        assert_eq!(cm.costate_value.len(), 3);
    }

    #[test]
    fn rejects_short_schedule() {
        let (v, s, g, _) = optimal(scalar_instance());
        let short = g.truncated(0).unwrap();
        assert!(matches!(
            exact_cost(&v, &s, &short),
            Err(crate::Error::HorizonMismatch { .. })
        ));
    }
}
