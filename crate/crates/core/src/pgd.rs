//! Proximal gradient descent for `min ½‖Ax − y‖² + λ‖DCT x‖₁`.

use crate::error::{check_len, CsError, Result};
use crate::image::{norm2, Image};
use crate::operator::{power_iteration, LinearOperator};
use crate::transforms::Dct2d;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_ITERATIONS: usize = 20;
pub const POWER_ITERATIONS: usize = 100;
const STEP_SAFETY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// `0.99/L²` with `L` the power-iteration estimate of `‖A‖₂`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxKind {
    DctSoftThreshold,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub step: StepSize,
    pub lambda: f64,
    pub iterations: usize,
    pub prox: ProxKind,
    /// Clamp to [0, 1] after each proximal step.
    pub clamp: bool,
    /// Stop once the relative objective change drops below this; 0 disables.
    pub tolerance: f64,
    pub power_seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            step: StepSize::Auto,
            lambda: DEFAULT_LAMBDA,
            iterations: DEFAULT_ITERATIONS,
            prox: ProxKind::DctSoftThreshold,
            clamp: false,
            tolerance: 0.0,
            power_seed: 0,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsError::InvalidConfig(m));
        if let StepSize::Fixed(eta) = self.step {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("step size {eta} must be positive and finite"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.iterations == 0 {
            return bad("iteration count must be at least 1".into());
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance {} must be non-negative", self.tolerance));
        }
        Ok(())
    }

    /// Resolves the step size for `op`.
    pub fn step_for(&self, op: &dyn LinearOperator) -> Result<f64> {
        match self.step {
            StepSize::Fixed(eta) => Ok(eta),
            StepSize::Auto => {
                let l = power_iteration(op, POWER_ITERATIONS, self.power_seed)?;
                Ok(if l > 0.0 { STEP_SAFETY / (l * l) } else { 1.0 })
            }
        }
    }
}

/// Per-iteration record of a solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveTrace {
    /// `F(x⁽⁰⁾)` for the initialization.
    pub initial_objective: f64,
    /// `F(x⁽ᵏ⁾)` after iteration `k`.
    pub objective: Vec<f64>,
    /// `‖Ax⁽ᵏ⁾ − y‖₂` after iteration `k`.
    pub residual_norm: Vec<f64>,
    pub step: f64,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.objective.len()
    }

    /// Largest increase `F(x⁽ᵏ⁺¹⁾) − F(x⁽ᵏ⁾)` over the run, including the
    /// first step from the initialization. Non-positive for a monotone run.
    pub fn max_increase(&self) -> f64 {
        let mut prev = self.initial_objective;
        let mut worst = f64::NEG_INFINITY;
        for &f in &self.objective {
            worst = worst.max(f - prev);
            prev = f;
        }
        worst
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "iteration,objective,residual_norm")?;
        for (k, (f, r)) in self.objective.iter().zip(&self.residual_norm).enumerate() {
            writeln!(w, "{},{f:e},{r:e}", k + 1)?;
        }
        Ok(())
    }
}

/// `st(v, t) = sign(v)·max(|v| − t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `x − η·Aᵀ(Ax − y)`.
pub fn gradient_step(x: &Image, op: &dyn LinearOperator, y: &[f64], eta: f64) -> Result<Image> {
    let ax = op.apply(x.as_slice())?;
    check_len(ax.len(), y.len(), "measurement")?;
    let r: Vec<f64> = ax.iter().zip(y).map(|(a, b)| a - b).collect();
    let g = op.apply_adjoint(&r)?;
    Image::new(
        x.height(),
        x.width(),
        x.as_slice().iter().zip(&g).map(|(a, b)| a - eta * b).collect(),
    )
}

/// Soft-thresholds the orthonormal DCT coefficients of `z` by `t`.
pub fn prox_dct_soft_threshold(z: &Image, t: f64) -> Result<Image> {
    if !(t >= 0.0) {
        return Err(CsError::InvalidArgument(format!(
            "threshold {t} must be non-negative"
        )));
    }
    let dct = Dct2d::new(z.height(), z.width())?;
    let mut v = z.as_slice().to_vec();
    prox_in_place(&dct, &mut v, t);
    Image::new(z.height(), z.width(), v)
}

fn prox_in_place(dct: &Dct2d, v: &mut [f64], t: f64) {
    if t == 0.0 {
        return;
    }
    dct.forward_in_place(v);
    for c in v.iter_mut() {
        *c = soft_threshold(*c, t);
    }
    dct.inverse_in_place(v);
}

fn l1_dct(dct: &Dct2d, x: &[f64]) -> f64 {
    let mut c = x.to_vec();
    dct.forward_in_place(&mut c);
    c.iter().map(|v| v.abs()).sum()
}

/// Runs PGD from `init`. Returns the final iterate and the trace; any
/// non-finite intermediate aborts with [`CsError::NonFinite`].
pub fn pgd_solve(
    y: &[f64],
    op: &dyn LinearOperator,
    init: &Image,
    cfg: &PgdConfig,
) -> Result<(Image, SolveTrace)> {
    cfg.validate()?;
    check_len(op.output_dim(), y.len(), "measurement")?;
    check_len(op.input_dim(), init.len(), "initialization")?;
    let (h, w) = (init.height(), init.width());
    let dct = Dct2d::new(h, w)?;
    let eta = cfg.step_for(op)?;
    let reg = cfg.prox == ProxKind::DctSoftThreshold && cfg.lambda > 0.0;
    let t = cfg.lambda * eta;

    let objective = |x: &[f64], r: &[f64]| {
        let data = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        if reg {
            data + cfg.lambda * l1_dct(&dct, x)
        } else {
            data
        }
    };

    let mut x = init.as_slice().to_vec();
    let mut r = op.apply(&x)?;
    for (a, b) in r.iter_mut().zip(y) {
        *a -= b;
    }
    let mut trace = SolveTrace {
        initial_objective: objective(&x, &r),
        step: eta,
        ..Default::default()
    };
    if !trace.initial_objective.is_finite() {
        return Err(CsError::NonFinite(
            "objective at the initialization is not finite".into(),
        ));
    }
    let mut grad = vec![0.0; x.len()];
    let mut prev = trace.initial_objective;
    for k in 1..=cfg.iterations {
        op.adjoint_into(&r, &mut grad);
        for (a, g) in x.iter_mut().zip(&grad) {
            *a -= eta * g;
        }
        if reg {
            prox_in_place(&dct, &mut x, t);
        }
        if cfg.clamp {
            for a in x.iter_mut() {
                *a = a.clamp(0.0, 1.0);
            }
        }
        op.forward_into(&x, &mut r);
        for (a, b) in r.iter_mut().zip(y) {
            *a -= b;
        }
        let f = objective(&x, &r);
        if !f.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(CsError::NonFinite(format!(
                "iteration {k}: objective {f} (step {eta:e}, lambda {})",
                cfg.lambda
            )));
        }
        trace.objective.push(f);
        trace.residual_norm.push(norm2(&r));
        if cfg.tolerance > 0.0 && (prev - f).abs() <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            log::debug!(
                "stopping after {k} iterations: relative change below {}",
                cfg.tolerance
            );
            break;
        }
        prev = f;
    }
    Ok((Image::new(h, w, x)?, trace))
}
