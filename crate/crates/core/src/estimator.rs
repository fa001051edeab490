//! Remote estimator under Bernoulli packet arrival.
//!
//! The initial estimate is the state itself when the first packet arrives and
//! the prior mean otherwise (`X̂_0 = (I − Γ_0)μ + Γ_0 X_0`).

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{SubsystemModel, ValidatedModel};
use crate::simulator::SimulationTrace;
use crate::synthesis::GainSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub k: usize,
    /// Per-subsystem estimates x̂ⁱ_k.
    pub xhat: Vec<DVector<f64>>,
}

impl EstimatorState {
    pub fn initial(received: &[bool], x0: &[DVector<f64>], mu: &[DVector<f64>]) -> Self {
        let xhat = received
            .iter()
            .zip(x0.iter().zip(mu))
            .map(|(&g, (x, m))| init_estimate(g, x, m))
            .collect();
        EstimatorState { k: 0, xhat }
    }

    /// Stacked estimate X̂_k.
    pub fn stacked(&self) -> DVector<f64> {
        let n: usize = self.xhat.iter().map(|v| v.len()).sum();
        DVector::from_iterator(n, self.xhat.iter().flat_map(|v| v.iter().copied()))
    }
}

pub fn init_estimate(received: bool, x0: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    if received {
        x0.clone()
    } else {
        mu.clone()
    }
}

/// Open-loop prediction `A x̂ + B û + B0 u⁰`.
pub fn predict(
    sub: &SubsystemModel,
    xhat: &DVector<f64>,
    uhat: &DVector<f64>,
    u0: &DVector<f64>,
) -> DVector<f64> {
    &sub.a * xhat + &sub.b * uhat + &sub.b0 * u0
}

/// `x̂⁺ = γ x⁺ + (1 − γ)(A x̂ + B û + B0 u⁰)`.
pub fn update_estimate(
    sub: &SubsystemModel,
    xhat: &DVector<f64>,
    uhat: &DVector<f64>,
    u0: &DVector<f64>,
    received: bool,
    x_next: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = sub.a.nrows();
    let check = |field: &str, len: usize, want: usize| {
        if len == want {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                field: field.into(),
                expected: (want, 1),
                found: (len, 1),
            })
        }
    };
    check("xhat", xhat.len(), n)?;
    check("x_next", x_next.len(), n)?;
    check("uhat", uhat.len(), sub.b.ncols())?;
    check("u0", u0.len(), sub.b0.ncols())?;
    if received {
        Ok(x_next.clone())
    } else {
        Ok(predict(sub, xhat, uhat, u0))
    }
}

/// Error recursion
/// `x̃⁺ = (1 − γ⁺)[A x̃ + B ũ + w(Ā x + B̄ uⁱ + B̄0 u⁰) + v]`
/// with `uⁱ = ûⁱ + ũⁱ`.
#[allow(clippy::too_many_arguments)]
pub fn error_step(
    sub: &SubsystemModel,
    xtilde: &DVector<f64>,
    utilde: &DVector<f64>,
    x: &DVector<f64>,
    u_local: &DVector<f64>,
    u0: &DVector<f64>,
    w: f64,
    v: &DVector<f64>,
    received_next: bool,
) -> DVector<f64> {
    if received_next {
        return DVector::zeros(xtilde.len());
    }
    &sub.a * xtilde
        + &sub.b * utilde
        + (&sub.a_bar * x + &sub.b_bar * u_local + &sub.b0_bar * u0) * w
        + v
}

/// Replays a retained trace through [`update_estimate`] and [`error_step`] with
/// its realized arrivals and noises. Returns the largest discrepancy against
/// the trace's own `x − x̂` and `x̂`, relative to the magnitude of the operands.
pub fn pathwise_residual(
    model: &ValidatedModel,
    gains: &GainSchedule,
    trace: &SimulationTrace,
) -> Result<f64> {
    let d = model.dims();
    let n = model.horizon();
    if trace.x.len() != n + 2 || trace.w.len() != n + 1 {
        return Err(Error::HorizonMismatch {
            expected: n,
            found: trace.w.len().saturating_sub(1),
        });
    }
    let col = |v: &[f64], r: std::ops::Range<usize>| DVector::from_column_slice(&v[r]);
    let mut worst = 0.0f64;
    for k in 0..=n {
        let u0 = col(&trace.u[k], d.input_range(0));
        let uhat = &gains.steps[k].khat * DVector::from_column_slice(&trace.xhat[k]);
        for (i, sub) in model.model().subsystems.iter().enumerate() {
            let (sr, ir) = (d.state_range(i), d.input_range(i + 1));
            let x = col(&trace.x[k], sr.clone());
            let xhat = col(&trace.xhat[k], sr.clone());
            let x_next = col(&trace.x[k + 1], sr.clone());
            let xhat_next = col(&trace.xhat[k + 1], sr.clone());
            let xtilde = &x - &xhat;
            let utilde = &gains.steps[k].ktilde[i] * &xtilde;
            let u_local = col(&trace.u[k], ir.clone());
            let uhat_i = uhat.rows(ir.start, ir.len()).into_owned();
            let received = trace.gamma[k + 1][i];
            let v = col(&trace.v[k], sr);
            let replayed = error_step(
                sub,
                &xtilde,
                &utilde,
                &x,
                &u_local,
                &u0,
                trace.w[k][i],
                &v,
                received,
            );
            let direct = &x_next - &xhat_next;
            let estimate = update_estimate(sub, &xhat, &uhat_i, &u0, received, &x_next)?;
            let scale = x_next.amax().max(xhat_next.amax()).max(f64::MIN_POSITIVE);
            worst = worst
                .max((replayed - direct).amax() / scale)
                .max((estimate - xhat_next).amax() / scale);
        }
    }
    Ok(worst)
}
