//! Backward coupled Riccati recursions and their reductions.
//!
//! Two couplings between the stacked and the per-subsystem recursions are
//! available. [`Coupling::Literal`] evaluates every update exactly as written:
//! `Pⁱ` runs its own recursion and the stacked `P`, `H` are kept unsymmetrized.
//! [`Coupling::Consistent`] ties the two levels together with
//! `Pⁱ_k = [P_k]_ii` and `H_k = blockdiag(Hⁱ_k)`, which is what makes the
//! synthesized gains stationary for the exact closed-loop cost. It also
//! symmetrizes `P_k` after measuring its asymmetry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, block};
use crate::model::{StackedModel, ValidatedModel};
use crate::serde_matrix::matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Literal,
    #[default]
    Consistent,
}

impl std::str::FromStr for Coupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Coupling::Literal),
            "consistent" => Ok(Coupling::Consistent),
            other => Err(Error::InvalidArgument(format!(
                "unknown coupling {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemStep {
    #[serde(rename = "P", with = "matrix")]
    pub p: DMatrix<f64>,
    #[serde(rename = "H", with = "matrix")]
    pub h: DMatrix<f64>,
    #[serde(rename = "L", with = "matrix")]
    pub l: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemCoefficients {
    #[serde(rename = "Pi", with = "matrix")]
    pub pi: DMatrix<f64>,
    #[serde(rename = "Omega", with = "matrix")]
    pub omega: DMatrix<f64>,
    #[serde(rename = "PiTilde", with = "matrix")]
    pub pi_tilde: DMatrix<f64>,
    #[serde(rename = "OmegaTilde", with = "matrix")]
    pub omega_tilde: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCoefficients {
    #[serde(rename = "Lambda", with = "matrix")]
    pub lambda: DMatrix<f64>,
    #[serde(rename = "Psi", with = "matrix")]
    pub psi: DMatrix<f64>,
    #[serde(rename = "LambdaTilde", with = "matrix")]
    pub lambda_tilde: DMatrix<f64>,
    #[serde(rename = "PsiTilde", with = "matrix")]
    pub psi_tilde: DMatrix<f64>,
    pub subsystems: Vec<SubsystemCoefficients>,
}

/// Relative asymmetry of the freshly computed matrices, before any symmetrization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAsymmetry {
    pub p: f64,
    pub h: f64,
    pub subsystems: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreStep {
    pub k: usize,
    #[serde(rename = "P", with = "matrix")]
    pub p: DMatrix<f64>,
    #[serde(rename = "H", with = "matrix")]
    pub h: DMatrix<f64>,
    #[serde(rename = "L", with = "matrix")]
    pub l: DMatrix<f64>,
    pub subsystems: Vec<SubsystemStep>,
    /// Coefficients used to produce this step from step k+1; absent at k = N+1.
    pub coefficients: Option<StepCoefficients>,
    pub asymmetry: StepAsymmetry,
}

/// `steps[k]` for k = 0..=N+1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreSolution {
    pub coupling: Coupling,
    pub horizon: usize,
    pub steps: Vec<CreStep>,
}

impl CreSolution {
    pub fn step(&self, k: usize) -> &CreStep {
        &self.steps[k]
    }

    pub fn coefficients(&self, k: usize) -> &StepCoefficients {
        self.steps[k]
            .coefficients
            .as_ref()
            .expect("no coefficients at the terminal step")
    }

    /// Largest asymmetry of the stacked P and H over all steps.
    pub fn max_asymmetry(&self) -> f64 {
        self.steps
            .iter()
            .fold(0.0, |a, s| a.max(s.asymmetry.p).max(s.asymmetry.h))
    }
}

fn weight_blocks(model: &ValidatedModel, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = model.dims();
    let m = model.model();
    let sr = d.state_range(i);
    let ir = d.input_range(i + 1);
    (
        block(&m.q, sr.start, sr.start, sr.len(), sr.len()),
        block(&m.r, ir.start, ir.start, ir.len(), ir.len()),
    )
}

fn terminal(model: &ValidatedModel) -> CreStep {
    let pt = model.model().p_terminal.clone();
    let d = model.dims();
    let subsystems = (0..d.subsystems())
        .map(|i| {
            let r = d.state_range(i);
            let b = block(&pt, r.start, r.start, r.len(), r.len());
            SubsystemStep {
                p: b.clone(),
                h: b.clone(),
                l: b,
            }
        })
        .collect();
    CreStep {
        k: model.horizon() + 1,
        p: pt.clone(),
        h: pt.clone(),
        l: pt,
        subsystems,
        coefficients: None,
        asymmetry: StepAsymmetry::default(),
    }
}

/// Coefficient matrices built from the step k+1 quantities in `next`.
pub fn coefficients_from(
    model: &ValidatedModel,
    s: &StackedModel,
    next: &CreStep,
) -> StepCoefficients {
    let m = model.model();
    let bt = s.b.transpose();
    let lambda = &m.r + &bt * &next.p * &s.b + s.noise_sum(&s.b_bold, &next.l, &s.b_bold);
    let psi = &bt * &next.p * &s.a + s.noise_sum(&s.b_bold, &next.l, &s.a_bold);
    let lambda_tilde = &m.r + &bt * &next.l * &s.b + s.noise_sum(&s.b_bold, &next.l, &s.b_bold);
    let psi_tilde = &bt * &next.l * &s.a + s.noise_sum(&s.b_bold, &next.l, &s.a_bold);
    let subsystems = m
        .subsystems
        .iter()
        .enumerate()
        .map(|(i, sub)| {
            let (_, rii) = weight_blocks(model, i);
            let nx = &next.subsystems[i];
            let bt = sub.b.transpose();
            let bbt = sub.b_bar.transpose();
            let sw = sub.sigma_w;
            SubsystemCoefficients {
                pi: &rii + &bt * &nx.p * &sub.b + (&bbt * &nx.l * &sub.b_bar) * sw,
                omega: &bt * &nx.p * &sub.a + (&bbt * &nx.l * &sub.a_bar) * sw,
                pi_tilde: &rii + &bt * &nx.l * &sub.b + (&bbt * &nx.l * &sub.b_bar) * sw,
                omega_tilde: &bt * &nx.l * &sub.a + (&bbt * &nx.l * &sub.a_bar) * sw,
            }
        })
        .collect();
    StepCoefficients {
        lambda,
        psi,
        lambda_tilde,
        psi_tilde,
        subsystems,
    }
}

/// Recomputes the coefficients of step `k` from the stored step k+1.
pub fn coefficients_at(
    model: &ValidatedModel,
    s: &StackedModel,
    sol: &CreSolution,
    k: usize,
) -> StepCoefficients {
    coefficients_from(model, s, sol.step(k + 1))
}

/// `Yᵀ X⁻¹ Y` via a checked solve.
fn quad_inv(x: &DMatrix<f64>, y: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, f64> {
    Ok(y.transpose() * linalg::solve(x, y)?)
}

fn blend(p: &DMatrix<f64>, h: &DMatrix<f64>, pd: &DMatrix<f64>) -> DMatrix<f64> {
    // written as a correction to P so that H = P gives L = P exactly
    let eye = DMatrix::identity(pd.nrows(), pd.ncols());
    p + (h - p) * (eye - pd)
}

fn sub_blend(p: &DMatrix<f64>, h: &DMatrix<f64>, prob: f64) -> DMatrix<f64> {
    p + (h - p) * (1.0 - prob)
}

fn check_pi(c: &StepCoefficients, k: usize) -> Result<()> {
    for (i, sc) in c.subsystems.iter().enumerate() {
        for (which, m) in [("Pi", &sc.pi), ("PiTilde", &sc.pi_tilde)] {
            let rc = linalg::rcond(m);
            if !(rc >= linalg::RCOND_MIN) {
                return Err(Error::SingularPi {
                    k,
                    subsystem: i + 1,
                    which,
                    rcond: rc,
                });
            }
        }
    }
    Ok(())
}

/// General coupled recursion, k = N..0.
pub fn solve_cre(
    model: &ValidatedModel,
    s: &StackedModel,
    coupling: Coupling,
) -> Result<CreSolution> {
    let m = model.model();
    let d = model.dims();
    let n = model.horizon();
    let mut steps = vec![terminal(model)];
    let at = s.a.transpose();
    // Under the literal coupling P, H are symmetric in exact arithmetic unless
    // multiplicative noise meets unequal arrival probabilities. Rounding
    // asymmetry grows under an unstable A, so symmetrize whenever it holds.
    let exact_symmetric = m.subsystems.iter().all(|x| x.sigma_w == 0.0)
        || m.subsystems.windows(2).all(|w| w[0].p == w[1].p);
    for k in (0..=n).rev() {
        let next = steps.last().unwrap();
        let c = coefficients_from(model, s, next);
        let pp = quad_inv(&c.lambda, &c.psi).map_err(|rcond| Error::SingularLambda { k, rcond })?;
        let ph = quad_inv(&c.lambda_tilde, &c.psi_tilde)
            .map_err(|rcond| Error::SingularLambdaTilde { k, rcond })?;
        check_pi(&c, k)?;
        let noise_a = s.noise_sum(&s.a_bold, &next.l, &s.a_bold);
        let mut p = &m.q + &at * &next.p * &s.a + &noise_a - pp;
        let mut h = &m.q + &at * &next.l * &s.a + &noise_a - ph;
        let mut asym = StepAsymmetry {
            p: linalg::asymmetry(&p),
            h: linalg::asymmetry(&h),
            subsystems: 0.0,
        };

        let mut subs = Vec::with_capacity(d.subsystems());
        for (i, sub) in m.subsystems.iter().enumerate() {
            let (qii, _) = weight_blocks(model, i);
            let nx = &next.subsystems[i];
            let sc = &c.subsystems[i];
            let at = sub.a.transpose();
            let noise = (sub.a_bar.transpose() * &nx.l * &sub.a_bar) * sub.sigma_w;
            // rcond already checked
            let pi_term = quad_inv(&sc.pi, &sc.omega).unwrap();
            let pit_term = quad_inv(&sc.pi_tilde, &sc.omega_tilde).unwrap();
            let pi = &qii + &at * &nx.p * &sub.a + &noise - pi_term;
            let hi = &qii + &at * &nx.l * &sub.a + &noise - pit_term;
            asym.subsystems = asym
                .subsystems
                .max(linalg::asymmetry(&pi))
                .max(linalg::asymmetry(&hi));
            subs.push((linalg::symmetrize(&pi), linalg::symmetrize(&hi)));
        }

        if exact_symmetric {
            p = linalg::symmetrize(&p);
            h = linalg::symmetrize(&h);
        }
        if coupling == Coupling::Consistent {
            p = linalg::symmetrize(&p);
            h = DMatrix::zeros(d.nl, d.nl);
            for (i, (pi, hi)) in subs.iter_mut().enumerate() {
                let r = d.state_range(i);
                *pi = block(&p, r.start, r.start, r.len(), r.len());
                linalg::set_block(&mut h, r.start, r.start, hi);
            }
            asym.h = 0.0;
        }

        let l = blend(&p, &h, &s.p_diag);
        let subsystems = subs
            .into_iter()
            .zip(&m.subsystems)
            .map(|((pi, hi), sub)| SubsystemStep {
                l: sub_blend(&pi, &hi, sub.p),
                p: pi,
                h: hi,
            })
            .collect();
        steps.push(CreStep {
            k,
            p,
            h,
            l,
            subsystems,
            coefficients: Some(c),
            asymmetry: asym,
        });
    }
    steps.reverse();
    Ok(CreSolution {
        coupling,
        horizon: n,
        steps,
    })
}

/// Reduced recursion for σ_w = 0 on every subsystem: the stacked quantities
/// collapse to a single symmetric `P_k` with `H_k = L_k = P_k`.
pub fn solve_cre_additive(model: &ValidatedModel, s: &StackedModel) -> Result<CreSolution> {
    if let Some((i, sub)) = model
        .model()
        .subsystems
        .iter()
        .enumerate()
        .find(|(_, x)| x.sigma_w != 0.0)
    {
        return Err(Error::NotAdditive {
            subsystem: i + 1,
            sigma_w: sub.sigma_w,
        });
    }
    let m = model.model();
    let n = model.horizon();
    let bt = s.b.transpose();
    let at = s.a.transpose();
    let mut steps = vec![terminal(model)];
    for k in (0..=n).rev() {
        let next = steps.last().unwrap();
        let lambda = &m.r + &bt * &next.p * &s.b;
        let psi = &bt * &next.p * &s.a;
        let pp = quad_inv(&lambda, &psi).map_err(|rcond| Error::SingularLambda { k, rcond })?;
        let p = &m.q + &at * &next.p * &s.a - pp;
        let mut asym = StepAsymmetry {
            p: linalg::asymmetry(&p),
            h: 0.0,
            subsystems: 0.0,
        };
        let p = linalg::symmetrize(&p);
        let mut sub_coef = Vec::new();
        let mut subsystems = Vec::new();
        for (i, sub) in m.subsystems.iter().enumerate() {
            let (qii, rii) = weight_blocks(model, i);
            let nx = &next.subsystems[i];
            let bt = sub.b.transpose();
            let at = sub.a.transpose();
            let sc = SubsystemCoefficients {
                pi: &rii + &bt * &nx.p * &sub.b,
                omega: &bt * &nx.p * &sub.a,
                pi_tilde: &rii + &bt * &nx.l * &sub.b,
                omega_tilde: &bt * &nx.l * &sub.a,
            };
            let fail = |which| {
                move |rcond| Error::SingularPi {
                    k,
                    subsystem: i + 1,
                    which,
                    rcond,
                }
            };
            let pi =
                &qii + &at * &nx.p * &sub.a - quad_inv(&sc.pi, &sc.omega).map_err(fail("Pi"))?;
            let hi = &qii + &at * &nx.l * &sub.a
                - quad_inv(&sc.pi_tilde, &sc.omega_tilde).map_err(fail("PiTilde"))?;
            asym.subsystems = asym
                .subsystems
                .max(linalg::asymmetry(&pi))
                .max(linalg::asymmetry(&hi));
            let (pi, hi) = (linalg::symmetrize(&pi), linalg::symmetrize(&hi));
            subsystems.push(SubsystemStep {
                l: sub_blend(&pi, &hi, sub.p),
                p: pi,
                h: hi,
            });
            sub_coef.push(sc);
        }
        let c = StepCoefficients {
            lambda_tilde: lambda.clone(),
            psi_tilde: psi.clone(),
            lambda,
            psi,
            subsystems: sub_coef,
        };
        steps.push(CreStep {
            k,
            h: p.clone(),
            l: p.clone(),
            p,
            subsystems,
            coefficients: Some(c),
            asymmetry: asym,
        });
    }
    steps.reverse();
    Ok(CreSolution {
        coupling: Coupling::Literal,
        horizon: n,
        steps,
    })
}

/// Two-matrix recursion for one subsystem. The subsystem-level fields mirror
/// the stacked ones (`P¹ = P`, `H¹ = H`, `L¹ = L`).
pub fn solve_cre_single(model: &ValidatedModel, s: &StackedModel) -> Result<CreSolution> {
    let count = model.dims().subsystems();
    if count != 1 {
        return Err(Error::NotSingle { subsystems: count });
    }
    let m = model.model();
    let sub = &m.subsystems[0];
    let n = model.horizon();
    let sw = sub.sigma_w;
    let (bb, ab) = (&s.b_bold[0], &s.a_bold[0]);
    let (bt, at, bbt, abt) = (
        s.b.transpose(),
        s.a.transpose(),
        bb.transpose(),
        ab.transpose(),
    );
    let mut steps = vec![terminal(model)];
    for k in (0..=n).rev() {
        let next = steps.last().unwrap();
        let (p1, l1) = (&next.p, &next.l);
        let lambda = &m.r + &bt * p1 * &s.b + (&bbt * l1 * bb) * sw;
        let psi = &bt * p1 * &s.a + (&bbt * l1 * ab) * sw;
        let lambda_tilde = &m.r + &bt * l1 * &s.b + (&bbt * l1 * bb) * sw;
        let psi_tilde = &bt * l1 * &s.a + (&bbt * l1 * ab) * sw;
        let pp = quad_inv(&lambda, &psi).map_err(|rcond| Error::SingularLambda { k, rcond })?;
        let ph = quad_inv(&lambda_tilde, &psi_tilde)
            .map_err(|rcond| Error::SingularLambdaTilde { k, rcond })?;
        let noise = (&abt * l1 * ab) * sw;
        let p = &m.q + &at * p1 * &s.a + &noise - pp;
        let h = &m.q + &at * l1 * &s.a + &noise - ph;
        let asym = StepAsymmetry {
            p: linalg::asymmetry(&p),
            h: linalg::asymmetry(&h),
            subsystems: 0.0,
        };
        for (what, a) in [
            ("single-subsystem P", asym.p),
            ("single-subsystem H", asym.h),
        ] {
            if a > 1e-9 {
                return Err(Error::SolverConsistency {
                    what: format!("{what} at k = {k}"),
                    asymmetry: a,
                });
            }
        }
        let (p, h) = (linalg::symmetrize(&p), linalg::symmetrize(&h));
        let l = sub_blend(&p, &h, sub.p);
        // subsystem fields of `next` mirror the stacked ones
        let c = StepCoefficients {
            lambda,
            psi,
            lambda_tilde,
            psi_tilde,
            subsystems: coefficients_from(model, s, next).subsystems,
        };
        check_pi(&c, k)?;
        let subsystems = vec![SubsystemStep {
            p: p.clone(),
            h: h.clone(),
            l: l.clone(),
        }];
        steps.push(CreStep {
            k,
            p,
            h,
            l,
            subsystems,
            coefficients: Some(c),
            asymmetry: asym,
        });
    }
    steps.reverse();
    Ok(CreSolution {
        coupling: Coupling::Literal,
        horizon: n,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedStep {
    pub k: usize,
    #[serde(rename = "Upsilon", with = "matrix")]
    pub upsilon: DMatrix<f64>,
    #[serde(rename = "M", with = "matrix")]
    pub m: DMatrix<f64>,
    pub upsilon_min_eigenvalue: f64,
    pub upsilon_psd: bool,
}

/// `delta[k]` for k = 0..=N+1, `steps[k]` for k = 0..=N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedCreSolution {
    pub horizon: usize,
    #[serde(rename = "Delta", with = "crate::serde_matrix::matrices")]
    pub delta: Vec<DMatrix<f64>>,
    pub steps: Vec<GeneralizedStep>,
    /// Largest relative asymmetry of Δ before symmetrization.
    pub max_asymmetry: f64,
}

impl GeneralizedCreSolution {
    pub fn all_psd(&self) -> bool {
        self.steps.iter().all(|s| s.upsilon_psd)
    }
}

/// Single symmetric recursion with a Moore-Penrose inverse; valid for indefinite weights.
pub fn solve_generalized(model: &ValidatedModel, s: &StackedModel) -> GeneralizedCreSolution {
    let m = model.model();
    let n = model.horizon();
    let (bt, at) = (s.b.transpose(), s.a.transpose());
    let mut delta = vec![m.p_terminal.clone()];
    let mut steps = Vec::new();
    let mut max_asymmetry = 0.0f64;
    for k in (0..=n).rev() {
        let dn = delta.last().unwrap();
        let upsilon = &m.r + &bt * dn * &s.b + s.noise_sum(&s.b_bold, dn, &s.b_bold);
        let mk = &bt * dn * &s.a + s.noise_sum(&s.b_bold, dn, &s.a_bold);
        let dk = &m.q + &at * dn * &s.a + s.noise_sum(&s.a_bold, dn, &s.a_bold)
            - mk.transpose() * linalg::pinv(&upsilon) * &mk;
        max_asymmetry = max_asymmetry.max(linalg::asymmetry(&dk));
        let (min, tol) = linalg::min_eigenvalue(&upsilon);
        steps.push(GeneralizedStep {
            k,
            upsilon,
            m: mk,
            upsilon_min_eigenvalue: min,
            upsilon_psd: min >= -tol,
        });
        delta.push(linalg::symmetrize(&dk));
    }
    delta.reverse();
    steps.reverse();
    GeneralizedCreSolution {
        horizon: n,
        delta,
        steps,
        max_asymmetry,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub k: usize,
    /// 1-based subsystem index.
    pub subsystem: usize,
    pub matrix: String,
    pub eigenvalue: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefinitenessReport {
    pub violations: Vec<Violation>,
    /// Largest relative gap between stored Pⁱ, Hⁱ and their completed-square forms.
    pub max_closed_form_residual: f64,
}

impl DefinitenessReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }

    /// Violations restricted to the Π, Π̃ matrices.
    pub fn pi_violations(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.matrix.starts_with("Pi"))
    }
}

/// Checks Πⁱ, Π̃ⁱ ≻ 0 and Pⁱ, Hⁱ ⪰ 0 directly and through the completed-square forms.
pub fn check_definiteness(
    model: &ValidatedModel,
    s: &StackedModel,
    sol: &CreSolution,
) -> DefinitenessReport {
    let m = model.model();
    let d = model.dims();
    let mut report = DefinitenessReport::default();
    let flag = |k: usize,
                i: usize,
                name: &str,
                mat: &DMatrix<f64>,
                strict: bool,
                rep: &mut DefinitenessReport| {
        let (min, tol) = linalg::min_eigenvalue(mat);
        let ok = if strict { min > tol } else { min >= -tol };
        if !ok {
            rep.violations.push(Violation {
                k,
                subsystem: i + 1,
                matrix: name.to_string(),
                eigenvalue: min,
            });
        }
    };
    for k in 0..=sol.horizon {
        let st = sol.step(k);
        let nx = sol.step(k + 1);
        let c = sol.coefficients(k);
        let stacked_closed = if sol.coupling == Coupling::Consistent {
            linalg::solve(&c.lambda, &c.psi).ok().map(|x| {
                let gain = -x;
                let acl = &s.a + &s.b * &gain;
                let mut out =
                    &m.q + gain.transpose() * &m.r * &gain + acl.transpose() * &nx.p * &acl;
                for i in 0..d.subsystems() {
                    let e = &s.a_bold[i] + &s.b_bold[i] * &gain;
                    out += (e.transpose() * &nx.l * &e) * s.sigma_w[i];
                }
                out
            })
        } else {
            None
        };
        for (i, sub) in m.subsystems.iter().enumerate() {
            let sc = &c.subsystems[i];
            let ss = &st.subsystems[i];
            let ns = &nx.subsystems[i];
            flag(k, i, "Pi", &sc.pi, true, &mut report);
            flag(k, i, "PiTilde", &sc.pi_tilde, true, &mut report);
            flag(k, i, "P", &ss.p, false, &mut report);
            flag(k, i, "H", &ss.h, false, &mut report);
            let (qii, rii) = weight_blocks(model, i);
            let complete = |g: &DMatrix<f64>, outer: &DMatrix<f64>| {
                let acl = &sub.a + &sub.b * g;
                let e = &sub.a_bar + &sub.b_bar * g;
                &qii + g.transpose() * &rii * g
                    + acl.transpose() * outer * &acl
                    + (e.transpose() * &ns.l * &e) * sub.sigma_w
            };
            let p_closed = match &stacked_closed {
                Some(full) => {
                    let r = d.state_range(i);
                    Some(block(full, r.start, r.start, r.len(), r.len()))
                }
                None => linalg::solve(&sc.pi, &sc.omega)
                    .ok()
                    .map(|x| complete(&-x, &ns.p)),
            };
            let h_closed = linalg::solve(&sc.pi_tilde, &sc.omega_tilde)
                .ok()
                .map(|x| complete(&-x, &ns.l));
            for (name, closed, stored) in [
                ("P closed form", p_closed, &ss.p),
                ("H closed form", h_closed, &ss.h),
            ] {
                if let Some(cf) = closed {
                    report.max_closed_form_residual = report
                        .max_closed_form_residual
                        .max(linalg::rel_diff(&cf, stored));
                    flag(k, i, name, &cf, false, &mut report);
                }
            }
        }
    }
    report
}
