//! Problem instance, validation and block stacking.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, INPUT_ASYMMETRY};
use crate::serde_matrix::{matrix, vector};

const REFERENCE_JSON: &str = include_str!("../examples/reference.json");

/// One subsystem `x⁺ = (A + wĀ)x + (B + wB̄)uⁱ + (B0 + wB̄0)u⁰ + v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemModel {
    #[serde(rename = "A", with = "matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "Abar", with = "matrix")]
    pub a_bar: DMatrix<f64>,
    #[serde(rename = "B", with = "matrix")]
    pub b: DMatrix<f64>,
    #[serde(rename = "Bbar", with = "matrix")]
    pub b_bar: DMatrix<f64>,
    #[serde(rename = "B0", with = "matrix")]
    pub b0: DMatrix<f64>,
    #[serde(rename = "Bbar0", with = "matrix")]
    pub b0_bar: DMatrix<f64>,
    /// Variance of the scalar multiplicative noise w.
    pub sigma_w: f64,
    #[serde(rename = "Sigma_v", with = "matrix")]
    pub sigma_v: DMatrix<f64>,
    #[serde(with = "vector")]
    pub mu: DVector<f64>,
    #[serde(rename = "Sigma_x0", with = "matrix")]
    pub sigma_x0: DMatrix<f64>,
    /// Probability that the uplink packet arrives.
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub m0: usize,
    /// Number of controlled steps N; cost runs over k = 0..N plus the terminal term.
    pub horizon: usize,
    pub subsystems: Vec<SubsystemModel>,
    #[serde(rename = "Q", with = "matrix")]
    pub q: DMatrix<f64>,
    #[serde(rename = "R", with = "matrix")]
    pub r: DMatrix<f64>,
    #[serde(rename = "P_terminal", with = "matrix")]
    pub p_terminal: DMatrix<f64>,
}

impl NetworkModel {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    /// Sets every subsystem's success probability to `p`.
    pub fn with_uniform_p(mut self, p: f64) -> Self {
        for s in &mut self.subsystems {
            s.p = p;
        }
        self
    }

    pub fn with_sigma_w(mut self, sigma_w: f64) -> Self {
        for s in &mut self.subsystems {
            s.sigma_w = sigma_w;
        }
        self
    }

    /// Scales Q, R and the terminal weight by `c`.
    pub fn scaled_weights(mut self, c: f64) -> Self {
        self.q *= c;
        self.r *= c;
        self.p_terminal *= c;
        self
    }
}

/// The three-subsystem instance with horizon 60 shipped in `examples/reference.json`.
/// Its weights are indefinite, so it validates only in [`Mode::Indefinite`].
pub fn reference_instance() -> Result<NetworkModel> {
    NetworkModel::from_json(REFERENCE_JSON)
}

/// One scalar subsystem with a scalar remote input:
/// `A = 1, B = 1, B0 = 0, Ā = 0.5, B̄ = B̄0 = 0, σ_w = 1, p = 0.5`,
/// `Q = 1, R = I₂, P_terminal = 1, N = 1`, `μ = Σ_x0 = Σ_v = 1`.
pub fn scalar_instance() -> NetworkModel {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    NetworkModel {
        m0: 1,
        horizon: 1,
        subsystems: vec![SubsystemModel {
            a: s(1.0),
            a_bar: s(0.5),
            b: s(1.0),
            b_bar: s(0.0),
            b0: s(0.0),
            b0_bar: s(0.0),
            sigma_w: 1.0,
            sigma_v: s(1.0),
            mu: DVector::from_element(1, 1.0),
            sigma_x0: s(1.0),
            p: 0.5,
        }],
        q: s(1.0),
        r: DMatrix::identity(2, 2),
        p_terminal: s(1.0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Q ⪰ 0, R ≻ 0, P_terminal ⪰ 0 are enforced.
    #[default]
    Definite,
    /// Only symmetry is enforced.
    Indefinite,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "definite" => Ok(Mode::Definite),
            "indefinite" => Ok(Mode::Indefinite),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

/// Dimension table. `input_dims[0]` is m0, `input_dims[i]` is mᵢ for subsystem i (1-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state_dims: Vec<usize>,
    pub input_dims: Vec<usize>,
    pub state_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
    pub nl: usize,
    pub ml: usize,
}

impl Dims {
    pub fn subsystems(&self) -> usize {
        self.state_dims.len()
    }

    /// Row range of subsystem `i` (0-based) in the stacked state.
    pub fn state_range(&self, i: usize) -> std::ops::Range<usize> {
        self.state_offsets[i]..self.state_offsets[i] + self.state_dims[i]
    }

    /// Range of input block `j` (0 = remote, 1..=L local) in the stacked input.
    pub fn input_range(&self, j: usize) -> std::ops::Range<usize> {
        self.input_offsets[j]..self.input_offsets[j] + self.input_dims[j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedModel {
    model: NetworkModel,
    mode: Mode,
    dims: Dims,
}

impl ValidatedModel {
    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    pub fn subsystem(&self, i: usize) -> &SubsystemModel {
        &self.model.subsystems[i]
    }

    pub fn into_inner(self) -> NetworkModel {
        self.model
    }
}

fn check_shape(field: String, m: &DMatrix<f64>, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::DimensionMismatch {
            field,
            expected,
            found: m.shape(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { field });
    }
    Ok(())
}

fn symmetric_input(field: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = linalg::asymmetry(m);
    if asym > INPUT_ASYMMETRY {
        return Err(Error::Asymmetric {
            matrix: field.to_string(),
            asymmetry: asym,
        });
    }
    Ok(linalg::symmetrize(m))
}

fn require(field: &str, m: &DMatrix<f64>, strict: bool) -> Result<()> {
    let (min, tol) = linalg::min_eigenvalue(m);
    let ok = if strict { min > tol } else { min >= -tol };
    if ok {
        Ok(())
    } else {
        Err(Error::DefinitenessViolation {
            matrix: field.to_string(),
            eigenvalue: min,
        })
    }
}

/// Checks dimensions, ranges and symmetry; in definite mode also Q ⪰ 0, R ≻ 0,
/// P_terminal ⪰ 0. Symmetric inputs with rounding-level asymmetry are symmetrized.
pub fn validate(model: NetworkModel, mode: Mode) -> Result<ValidatedModel> {
    let mut model = model;
    if model.subsystems.is_empty() {
        return Err(Error::Empty);
    }
    let m0 = model.m0;
    let mut state_dims = Vec::new();
    let mut input_dims = vec![m0];
    for (idx, s) in model.subsystems.iter_mut().enumerate() {
        let i = idx + 1;
        let n = s.a.nrows();
        let m = s.b.ncols();
        let f = |name: &str| format!("subsystem {i} {name}");
        check_shape(f("A"), &s.a, (n, n))?;
        check_shape(f("Abar"), &s.a_bar, (n, n))?;
        check_shape(f("B"), &s.b, (n, m))?;
        check_shape(f("Bbar"), &s.b_bar, (n, m))?;
        check_shape(f("B0"), &s.b0, (n, m0))?;
        check_shape(f("Bbar0"), &s.b0_bar, (n, m0))?;
        check_shape(f("Sigma_v"), &s.sigma_v, (n, n))?;
        check_shape(f("Sigma_x0"), &s.sigma_x0, (n, n))?;
        if s.mu.len() != n {
            return Err(Error::DimensionMismatch {
                field: f("mu"),
                expected: (n, 1),
                found: (s.mu.len(), 1),
            });
        }
        if s.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: f("mu") });
        }
        if !(0.0..=1.0).contains(&s.p) {
            return Err(Error::ProbabilityOutOfRange {
                subsystem: i,
                value: s.p,
            });
        }
        if !(s.sigma_w >= 0.0) || !s.sigma_w.is_finite() {
            return Err(Error::NegativeVariance {
                subsystem: i,
                value: s.sigma_w,
            });
        }
        s.sigma_v = symmetric_input(&f("Sigma_v"), &s.sigma_v)?;
        s.sigma_x0 = symmetric_input(&f("Sigma_x0"), &s.sigma_x0)?;
        require(&f("Sigma_v"), &s.sigma_v, false)?;
        require(&f("Sigma_x0"), &s.sigma_x0, false)?;
        state_dims.push(n);
        input_dims.push(m);
    }
    let offsets = |d: &[usize]| {
        d.iter()
            .scan(0, |acc, &v| {
                let o = *acc;
                *acc += v;
                Some(o)
            })
            .collect::<Vec<_>>()
    };
    let dims = Dims {
        state_offsets: offsets(&state_dims),
        input_offsets: offsets(&input_dims),
        nl: state_dims.iter().sum(),
        ml: input_dims.iter().sum(),
        state_dims,
        input_dims,
    };
    check_shape("Q".into(), &model.q, (dims.nl, dims.nl))?;
    check_shape("R".into(), &model.r, (dims.ml, dims.ml))?;
    check_shape("P_terminal".into(), &model.p_terminal, (dims.nl, dims.nl))?;
    model.q = symmetric_input("Q", &model.q)?;
    model.r = symmetric_input("R", &model.r)?;
    model.p_terminal = symmetric_input("P_terminal", &model.p_terminal)?;
    if mode == Mode::Definite {
        require("Q", &model.q, false)?;
        require("R", &model.r, true)?;
        require("P_terminal", &model.p_terminal, false)?;
    }
    Ok(ValidatedModel { model, mode, dims })
}

/// Block-assembled global matrices. `b` has the remote input columns first;
/// `b_bold[i]` carries B̄0ⁱ at block (i, 0) and B̄ⁱ at block (i, i) only.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a_bold: Vec<DMatrix<f64>>,
    pub b_bold: Vec<DMatrix<f64>>,
    pub p_diag: DMatrix<f64>,
    pub sigma_w: Vec<f64>,
    pub sigma_v: DMatrix<f64>,
    pub sigma_x0: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub dims: Dims,
}

impl StackedModel {
    pub fn subsystems(&self) -> usize {
        self.a_bold.len()
    }

    /// Success probability of the subsystem owning each stacked state coordinate.
    pub fn p_state(&self) -> Vec<f64> {
        self.p_diag.diagonal().iter().copied().collect()
    }

    /// `Σ σᵢ Ā_boldᵢᵀ M Ā_boldᵢ`-style sum: `Σ σᵢ Xᵢᵀ M Yᵢ`.
    pub fn noise_sum(
        &self,
        left: &[DMatrix<f64>],
        m: &DMatrix<f64>,
        right: &[DMatrix<f64>],
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(left[0].ncols(), right[0].ncols());
        for i in 0..self.subsystems() {
            if self.sigma_w[i] != 0.0 {
                out += (left[i].transpose() * m * &right[i]) * self.sigma_w[i];
            }
        }
        out
    }
}

pub fn stack(model: &ValidatedModel) -> StackedModel {
    let d = model.dims().clone();
    let (nl, ml) = (d.nl, d.ml);
    let mut a = DMatrix::zeros(nl, nl);
    let mut b = DMatrix::zeros(nl, ml);
    let mut a_bold = Vec::new();
    let mut b_bold = Vec::new();
    let mut p_diag = DMatrix::zeros(nl, nl);
    let mut sigma_v = DMatrix::zeros(nl, nl);
    let mut sigma_x0 = DMatrix::zeros(nl, nl);
    let mut mu = DVector::zeros(nl);
    let mut sigma_w = Vec::new();
    for (i, s) in model.model().subsystems.iter().enumerate() {
        let r = d.state_offsets[i];
        let c = d.input_offsets[i + 1];
        linalg::set_block(&mut a, r, r, &s.a);
        linalg::set_block(&mut b, r, 0, &s.b0);
        linalg::set_block(&mut b, r, c, &s.b);
        let mut ab = DMatrix::zeros(nl, nl);
        linalg::set_block(&mut ab, r, r, &s.a_bar);
        a_bold.push(ab);
        let mut bb = DMatrix::zeros(nl, ml);
        linalg::set_block(&mut bb, r, 0, &s.b0_bar);
        linalg::set_block(&mut bb, r, c, &s.b_bar);
        b_bold.push(bb);
        for j in d.state_range(i) {
            p_diag[(j, j)] = s.p;
        }
        linalg::set_block(&mut sigma_v, r, r, &s.sigma_v);
        linalg::set_block(&mut sigma_x0, r, r, &s.sigma_x0);
        mu.rows_mut(r, s.mu.len()).copy_from(&s.mu);
        sigma_w.push(s.sigma_w);
    }
    StackedModel {
        a,
        b,
        a_bold,
        b_bold,
        p_diag,
        sigma_w,
        sigma_v,
        sigma_x0,
        mu,
        dims: d,
    }
}
