//! Seeded Monte Carlo rollout of the closed loop and dropout-rate sweeps.
//!
//! Trial `t` draws from `ChaCha8Rng::seed_from_u64(seed)` switched to stream `t`,
//! so `(seed, t)` fixes every draw regardless of scheduling. Within a trial the
//! draw order is: for each subsystem the n standard normals of `x_0`, then each
//! subsystem's arrival bit `γ_0`; then for every step k and subsystem i: one
//! normal for `w`, n normals for `v`, one uniform for `γ_{k+1}`. Gaussians use the
//! ziggurat transform of `rand_distr::StandardNormal`; an arrival is a uniform
//! in [0, 1) below `pⁱ`.
//!
//! Trials are grouped in fixed chunks of [`CHUNK`] and chunk results are merged
//! in chunk order, so the aggregate is bit-identical for any thread count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Neumaier};
use crate::model::{self, Mode, NetworkModel, StackedModel, ValidatedModel};
use crate::synthesis::GainSchedule;

pub const CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    pub trials: usize,
    pub seed: u64,
    pub retain_traces: bool,
    /// Worker count; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl SimOptions {
    pub fn new(trials: usize, seed: u64) -> Self {
        SimOptions {
            trials,
            seed,
            retain_traces: false,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub seed: u64,
    pub trial: usize,
    /// k = 0..=N+1.
    pub x: Vec<Vec<f64>>,
    pub xhat: Vec<Vec<f64>>,
    /// k = 0..=N.
    pub u: Vec<Vec<f64>>,
    /// k = 0..=N+1, one bit per subsystem.
    pub gamma: Vec<Vec<bool>>,
    /// k = 0..=N.
    pub stage_cost: Vec<f64>,
    /// Realized multiplicative noise w_k per subsystem, k = 0..N.
    pub w: Vec<Vec<f64>>,
    /// Realized stacked additive noise V_k, k = 0..N.
    pub v: Vec<Vec<f64>>,
    pub terminal_cost: f64,
    pub total_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonFinite {
    pub trial: usize,
    /// First step whose state is not finite.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    /// Trials that stayed finite and enter the statistics below.
    pub valid_trials: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub cost_std_error: f64,
    /// Mean ‖xⁱ_k‖², indexed `[k][i]` for k = 0..=N+1.
    pub state_energy: Vec<Vec<f64>>,
    /// Fraction of arrivals per subsystem over all valid trials and steps.
    pub arrival_frequency: Vec<f64>,
    pub non_finite: Vec<NonFinite>,
}

impl SimulationSummary {
    /// Mean ‖xⁱ_k‖² trajectory of subsystem `i` (0-based).
    pub fn energy_of(&self, i: usize) -> Vec<f64> {
        self.state_energy.iter().map(|row| row[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    pub summary: SimulationSummary,
    pub traces: Vec<SimulationTrace>,
}

struct Sub {
    n: usize,
    m: usize,
    xo: usize,
    uo: usize,
    a: Vec<f64>,
    ab: Vec<f64>,
    b: Vec<f64>,
    bb: Vec<f64>,
    b0: Vec<f64>,
    b0b: Vec<f64>,
    sw: f64,
    lv: Vec<f64>,
    lx0: Vec<f64>,
    mu: Vec<f64>,
    p: f64,
}

struct Compiled {
    subs: Vec<Sub>,
    nl: usize,
    ml: usize,
    m0: usize,
    horizon: usize,
    q: Vec<f64>,
    r: Vec<f64>,
    pt: Vec<f64>,
    khat: Vec<Vec<f64>>,
    ktilde: Vec<Vec<Vec<f64>>>,
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Compiled {
    fn new(model: &ValidatedModel, gains: &GainSchedule) -> Self {
        let d = model.dims();
        let subs = model
            .model()
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| Sub {
                n: d.state_dims[i],
                m: d.input_dims[i + 1],
                xo: d.state_offsets[i],
                uo: d.input_offsets[i + 1],
                a: flat(&s.a),
                ab: flat(&s.a_bar),
                b: flat(&s.b),
                bb: flat(&s.b_bar),
                b0: flat(&s.b0),
                b0b: flat(&s.b0_bar),
                sw: s.sigma_w.sqrt(),
                lv: flat(&linalg::covariance_factor(&s.sigma_v)),
                lx0: flat(&linalg::covariance_factor(&s.sigma_x0)),
                mu: s.mu.as_slice().to_vec(),
                p: s.p,
            })
            .collect();
        let m = model.model();
        Compiled {
            subs,
            nl: d.nl,
            ml: d.ml,
            m0: d.input_dims[0],
            horizon: model.horizon(),
            q: flat(&m.q),
            r: flat(&m.r),
            pt: flat(&m.p_terminal),
            khat: gains.steps.iter().map(|s| flat(&s.khat)).collect(),
            ktilde: gains
                .steps
                .iter()
                .map(|s| s.ktilde.iter().map(flat).collect())
                .collect(),
        }
    }
}

/// `out += M x` for row-major `M` with `out.len()` rows.
#[inline]
fn gemv_add(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *o += s;
    }
}

#[inline]
fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for r in 0..n {
        let row = &m[r * n..(r + 1) * n];
        let mut t = 0.0;
        for (a, b) in row.iter().zip(x) {
            t += a * b;
        }
        s += x[r] * t;
    }
    s
}

#[derive(Default)]
struct Chunk {
    n: u64,
    mean: f64,
    m2: f64,
    energy: Vec<Neumaier>,
    arrivals: Vec<u64>,
    non_finite: Vec<NonFinite>,
    traces: Vec<SimulationTrace>,
}

impl Chunk {
    fn push_cost(&mut self, j: f64) {
        self.n += 1;
        let delta = j - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (j - self.mean);
    }

    fn merge(&mut self, o: Chunk) {
        if o.n > 0 {
            let n = self.n + o.n;
            let delta = o.mean - self.mean;
            self.mean += delta * o.n as f64 / n as f64;
            self.m2 += o.m2 + delta * delta * (self.n as f64) * (o.n as f64) / n as f64;
            self.n = n;
        }
        if self.energy.is_empty() {
            self.energy = o.energy;
            self.arrivals = o.arrivals;
        } else {
            for (a, b) in self.energy.iter_mut().zip(&o.energy) {
                a.merge(b);
            }
            for (a, b) in self.arrivals.iter_mut().zip(&o.arrivals) {
                *a += b;
            }
        }
        self.non_finite.extend(o.non_finite);
        self.traces.extend(o.traces);
    }
}

struct Buffers {
    x: Vec<f64>,
    xhat: Vec<f64>,
    xn: Vec<f64>,
    xhatn: Vec<f64>,
    uhat: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
    xt: Vec<f64>,
    gamma: Vec<bool>,
    energy: Vec<f64>,
    arrivals: Vec<u64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Runs one trial; returns the realized cost or the first non-finite step.
fn run_trial(
    c: &Compiled,
    seed: u64,
    trial: usize,
    buf: &mut Buffers,
    mut trace: Option<&mut SimulationTrace>,
) -> std::result::Result<f64, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let l = c.subs.len();
    for s in &c.subs {
        for v in buf.z[..s.n].iter_mut() {
            *v = normal(&mut rng);
        }
        let x = &mut buf.x[s.xo..s.xo + s.n];
        x.copy_from_slice(&s.mu);
        gemv_add(x, &s.lx0, &buf.z[..s.n]);
    }
    for (i, s) in c.subs.iter().enumerate() {
        let g = rng.random::<f64>() < s.p;
        buf.gamma[i] = g;
        buf.arrivals[i] += g as u64;
        let src = if g {
            &buf.x[s.xo..s.xo + s.n]
        } else {
            &s.mu[..]
        };
        buf.xhat[s.xo..s.xo + s.n].copy_from_slice(src);
    }
    let mut cost = Neumaier::default();
    let record_energy = |buf: &mut Buffers, k: usize| {
        for (i, s) in c.subs.iter().enumerate() {
            buf.energy[k * l + i] = buf.x[s.xo..s.xo + s.n].iter().map(|v| v * v).sum();
        }
    };
    record_energy(buf, 0);
    for k in 0..=c.horizon {
        if let Some(t) = trace.as_deref_mut() {
            t.x.push(buf.x.clone());
            t.xhat.push(buf.xhat.clone());
            t.gamma.push(buf.gamma.clone());
        }
        buf.uhat.iter_mut().for_each(|v| *v = 0.0);
        gemv_add(&mut buf.uhat, &c.khat[k], &buf.xhat);
        buf.u.copy_from_slice(&buf.uhat);
        for (i, s) in c.subs.iter().enumerate() {
            for j in 0..s.n {
                buf.xt[j] = buf.x[s.xo + j] - buf.xhat[s.xo + j];
            }
            gemv_add(
                &mut buf.u[s.uo..s.uo + s.m],
                &c.ktilde[k][i],
                &buf.xt[..s.n],
            );
        }
        let stage = quad_form(&c.q, &buf.x) + quad_form(&c.r, &buf.u);
        cost.add(stage);
        if let Some(t) = trace.as_deref_mut() {
            t.u.push(buf.u.clone());
            t.stage_cost.push(stage);
        }
        let u0 = &buf.u[..c.m0];
        let uhat0 = &buf.uhat[..c.m0];
        if let Some(t) = trace.as_deref_mut() {
            t.w.push(vec![0.0; l]);
            t.v.push(vec![0.0; c.nl]);
        }
        for (i, s) in c.subs.iter().enumerate() {
            let w = s.sw * normal(&mut rng);
            for v in buf.z[..s.n].iter_mut() {
                *v = normal(&mut rng);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.w[k][i] = w;
                gemv_add(&mut t.v[k][s.xo..s.xo + s.n], &s.lv, &buf.z[..s.n]);
            }
            let x = &buf.x[s.xo..s.xo + s.n];
            let ui = &buf.u[s.uo..s.uo + s.m];
            let xn = &mut buf.xn[s.xo..s.xo + s.n];
            xn.iter_mut().for_each(|v| *v = 0.0);
            gemv_add(xn, &s.a, x);
            gemv_add(xn, &s.b, ui);
            gemv_add(xn, &s.b0, u0);
            // multiplicative part, scaled by w afterwards
            let mult = &mut buf.xt[..s.n];
            mult.iter_mut().for_each(|v| *v = 0.0);
            gemv_add(mult, &s.ab, x);
            gemv_add(mult, &s.bb, ui);
            gemv_add(mult, &s.b0b, u0);
            for (o, m) in xn.iter_mut().zip(mult.iter()) {
                *o += w * m;
            }
            gemv_add(xn, &s.lv, &buf.z[..s.n]);

            let g = rng.random::<f64>() < s.p;
            buf.gamma[i] = g;
            buf.arrivals[i] += g as u64;
            let xhn = &mut buf.xhatn[s.xo..s.xo + s.n];
            if g {
                xhn.copy_from_slice(xn);
            } else {
                xhn.iter_mut().for_each(|v| *v = 0.0);
                gemv_add(xhn, &s.a, &buf.xhat[s.xo..s.xo + s.n]);
                gemv_add(xhn, &s.b, &buf.uhat[s.uo..s.uo + s.m]);
                gemv_add(xhn, &s.b0, uhat0);
            }
        }
        std::mem::swap(&mut buf.x, &mut buf.xn);
        std::mem::swap(&mut buf.xhat, &mut buf.xhatn);
        if buf.x.iter().any(|v| !v.is_finite()) {
            return Err(k + 1);
        }
        record_energy(buf, k + 1);
    }
    let terminal = quad_form(&c.pt, &buf.x);
    cost.add(terminal);
    if let Some(t) = trace {
        t.x.push(buf.x.clone());
        t.xhat.push(buf.xhat.clone());
        t.gamma.push(buf.gamma.clone());
        t.terminal_cost = terminal;
        t.total_cost = cost.value();
    }
    let total = cost.value();
    if total.is_finite() {
        Ok(total)
    } else {
        Err(c.horizon + 1)
    }
}

fn run_chunk(c: &Compiled, opts: &SimOptions, chunk: usize) -> Chunk {
    let l = c.subs.len();
    let steps = c.horizon + 2;
    let maxn = c.subs.iter().map(|s| s.n).max().unwrap_or(0);
    let mut buf = Buffers {
        x: vec![0.0; c.nl],
        xhat: vec![0.0; c.nl],
        xn: vec![0.0; c.nl],
        xhatn: vec![0.0; c.nl],
        uhat: vec![0.0; c.ml],
        u: vec![0.0; c.ml],
        z: vec![0.0; maxn],
        xt: vec![0.0; maxn],
        gamma: vec![false; l],
        energy: vec![0.0; steps * l],
        arrivals: vec![0; l],
    };
    let mut out = Chunk {
        energy: vec![Neumaier::default(); steps * l],
        arrivals: vec![0; l],
        ..Chunk::default()
    };
    let start = chunk * CHUNK;
    let end = (start + CHUNK).min(opts.trials);
    for trial in start..end {
        buf.arrivals.iter_mut().for_each(|a| *a = 0);
        let mut trace = opts.retain_traces.then(|| SimulationTrace {
            seed: opts.seed,
            trial,
            x: Vec::new(),
            xhat: Vec::new(),
            u: Vec::new(),
            gamma: Vec::new(),
            stage_cost: Vec::new(),
            w: Vec::new(),
            v: Vec::new(),
            terminal_cost: 0.0,
            total_cost: 0.0,
        });
        match run_trial(c, opts.seed, trial, &mut buf, trace.as_mut()) {
            Ok(j) => {
                out.push_cost(j);
                for (acc, &e) in out.energy.iter_mut().zip(&buf.energy) {
                    acc.add(e);
                }
                for (a, &b) in out.arrivals.iter_mut().zip(&buf.arrivals) {
                    *a += b;
                }
                out.traces.extend(trace);
            }
            Err(step) => out.non_finite.push(NonFinite { trial, step }),
        }
    }
    out
}

/// Closed-loop Monte Carlo under an arbitrary gain schedule covering k = 0..N.
pub fn simulate(
    model: &ValidatedModel,
    gains: &GainSchedule,
    opts: &SimOptions,
) -> Result<SimulationOutput> {
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("trials ≥ 1".into()));
    }
    gains.check_against(model.dims(), model.horizon())?;
    let c = Compiled::new(model, gains);
    let chunks = opts.trials.div_ceil(CHUNK);
    let work = || {
        (0..chunks)
            .into_par_iter()
            .map(|i| run_chunk(&c, opts, i))
            .collect::<Vec<_>>()
    };
    let parts = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut total = Chunk::default();
    for p in parts {
        total.merge(p);
    }
    let l = c.subs.len();
    let n = total.n as usize;
    let denom = n.max(1) as f64;
    let state_energy = (0..c.horizon + 2)
        .map(|k| {
            (0..l)
                .map(|i| total.energy[k * l + i].value() / denom)
                .collect()
        })
        .collect();
    let draws = (n * (c.horizon + 2)).max(1) as f64;
    let cost_std = if n > 1 {
        (total.m2 / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let summary = SimulationSummary {
        seed: opts.seed,
        trials: opts.trials,
        horizon: c.horizon,
        valid_trials: n,
        cost_mean: if n > 0 { total.mean } else { f64::NAN },
        cost_std,
        cost_std_error: cost_std / denom.sqrt(),
        state_energy,
        arrival_frequency: total.arrivals.iter().map(|&a| a as f64 / draws).collect(),
        non_finite: total.non_finite,
    };
    Ok(SimulationOutput {
        summary,
        traces: total.traces,
    })
}

/// First k at which `energy[k] < 0.1 · energy[0]`.
pub fn decay_time(energy: &[f64]) -> Option<usize> {
    let first = *energy.first()?;
    energy.iter().position(|&e| e < 0.1 * first)
}

/// Mean of `energy[k]` over the inclusive window `lo..=hi`.
pub fn window_mean(energy: &[f64], lo: usize, hi: usize) -> f64 {
    let w = &energy[lo..=hi];
    w.iter().sum::<f64>() / w.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub p: f64,
    pub cost_mean: Option<f64>,
    pub cost_std_error: Option<f64>,
    /// Mean ‖x¹_k‖² for k = 0..=N+1.
    pub energy_x1: Vec<f64>,
    /// First k at which mean ‖x¹_k‖² falls below 10% of its initial value.
    pub decay_time: Option<usize>,
    pub non_finite_trials: usize,
    pub error: Option<String>,
}

/// For each p, sets every subsystem's success probability to p, re-synthesizes
/// gains through `resolve` and simulates. Solver errors are recorded per entry.
pub fn sweep_dropout<F>(
    base: &NetworkModel,
    mode: Mode,
    p_values: &[f64],
    opts: &SimOptions,
    resolve: F,
) -> Result<Vec<SweepEntry>>
where
    F: Fn(&ValidatedModel, &StackedModel) -> Result<GainSchedule>,
{
    if p_values.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one p value is required".into(),
        ));
    }
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::ProbabilityOutOfRange {
            subsystem: 0,
            value: p,
        });
    }
    let mut out = Vec::new();
    for &p in p_values {
        let v = model::validate(base.clone().with_uniform_p(p), mode)?;
        let s = model::stack(&v);
        let entry = match resolve(&v, &s).and_then(|g| simulate(&v, &g, opts)) {
            Ok(res) => {
                let e = res.summary.energy_of(0);
                SweepEntry {
                    p,
                    cost_mean: Some(res.summary.cost_mean),
                    cost_std_error: Some(res.summary.cost_std_error),
                    decay_time: decay_time(&e),
                    energy_x1: e,
                    non_finite_trials: res.summary.non_finite.len(),
                    error: None,
                }
            }
            Err(e) if e.is_solvability() => SweepEntry {
                p,
                cost_mean: None,
                cost_std_error: None,
                energy_x1: Vec::new(),
                decay_time: None,
                non_finite_trials: 0,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        out.push(entry);
    }
    Ok(out)
}
