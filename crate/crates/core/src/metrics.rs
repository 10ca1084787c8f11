//! Differentiable distances between two sampled feature distributions.
//!
//! Four interchangeable metrics compare the hypercolumn samples of the
//! iterate against the reference's:
//!
//! * `FS`  — first/second feature statistics: `||mu_x - mu_r|| + ||sigma_x - sigma_r||`.
//! * `CX`  — contextual similarity: per-row normalized cosine distances turned
//!   into softmax affinities; the loss is `-log` of the mean column-max.
//! * `CMD` — central moment discrepancy up to order `k` on jointly min-max
//!   normalized coordinates.
//! * `rEMD` — relaxed earth mover's distance: with one transport marginal
//!   dropped, the optimum is each point's nearest-neighbour cost; the final
//!   value is the max over both directions.
//!
//! All four build on the autodiff tape, so they are differentiable with
//! respect to the iterate's feature matrix.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{Tape, Var};
use crate::tensor::{sc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Fs,
    Cx,
    Cmd,
    Remd,
}

impl MetricKind {
    /// Loss weight paired with each metric by default.
    pub fn default_fda_weight(self) -> f64 {
        match self {
            MetricKind::Fs => 2.0,
            MetricKind::Cx => 6.0,
            MetricKind::Cmd => 0.5,
            MetricKind::Remd => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Fs => "fs",
            MetricKind::Cx => "cx",
            MetricKind::Cmd => "cmd",
            MetricKind::Remd => "remd",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(MetricKind::Fs),
            "cx" => Ok(MetricKind::Cx),
            "cmd" => Ok(MetricKind::Cmd),
            "remd" => Ok(MetricKind::Remd),
            other => Err(Error::invalid_argument(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub kind: MetricKind,
    /// CX band-width `h`.
    pub bandwidth: f64,
    /// CMD moment order `k`.
    pub moment_order: usize,
    /// CMD per-order weights; must have `moment_order` entries.
    pub alphas: Vec<f64>,
    /// Numerical stabilizer.
    pub eps: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig::for_kind(MetricKind::Cx)
    }
}

impl MetricConfig {
    pub fn for_kind(kind: MetricKind) -> Self {
        MetricConfig {
            kind,
            bandwidth: 0.5,
            moment_order: 5,
            alphas: vec![1.0; 5],
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid_argument("bandwidth must be positive"));
        }
        if self.moment_order < 1 {
            return Err(Error::invalid_argument("moment order must be >= 1"));
        }
        if self.alphas.len() != self.moment_order {
            return Err(Error::invalid_argument(format!(
                "need {} moment weights, got {}",
                self.moment_order,
                self.alphas.len()
            )));
        }
        if self.alphas.iter().any(|a| *a < 0.0 || !a.is_finite()) {
            return Err(Error::invalid_argument("moment weights must be >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid_argument("eps must be positive"));
        }
        Ok(())
    }
}

fn dims<T: Scalar>(tape: &Tape<T>, v: Var) -> (usize, usize) {
    let s = tape.value(v).shape();
    assert_eq!(s.len(), 2, "feature matrices are 2-d");
    (s[0], s[1])
}

fn check_pair<T: Scalar>(
    tape: &Tape<T>,
    fx: Var,
    fr: Var,
    min_rows: usize,
) -> Result<((usize, usize), (usize, usize))> {
    let (dx, dr) = (dims(tape, fx), dims(tape, fr));
    if dx.1 != dr.1 {
        return Err(Error::invalid_argument(format!(
            "feature dimensions differ: {} vs {}",
            dx.1, dr.1
        )));
    }
    if dx.0 < min_rows || dr.0 < min_rows {
        return Err(Error::invalid_argument(format!(
            "need at least {min_rows} sample rows"
        )));
    }
    Ok((dx, dr))
}

/// `sqrt(sum(v^2))`; the subgradient at exactly zero is zero.
fn l2norm<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Var {
    let sq = tape.powi(v, 2);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

/// Rows scaled to (eps-stabilized) unit norm.
fn normalize_rows<T: Scalar>(tape: &mut Tape<T>, m: Var, eps: T) -> Var {
    let sq = tape.mul(m, m);
    let sumsq = tape.sum_axis1(sq);
    let stabilized = tape.add_scalar(sumsq, eps * eps);
    let norms = tape.sqrt(stabilized);
    tape.div_colvec(m, norms)
}

/// Pairwise cosine-distance matrix between the rows of `fx` and `fr`.
fn cosine_distance_matrix<T: Scalar>(tape: &mut Tape<T>, fx: Var, fr: Var, eps: T) -> Var {
    let xn = normalize_rows(tape, fx, eps);
    let rn = normalize_rows(tape, fr, eps);
    let rt = tape.transpose2(rn);
    let cos = tape.matmul(xn, rt);
    let neg = tape.scale(cos, -T::one());
    tape.add_scalar(neg, T::one())
}

/// Feature-statistics distance (means and standard deviations).
pub fn fs_on_tape<T: Scalar>(tape: &mut Tape<T>, fx: Var, fr: Var, cfg: &MetricConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape, fx, fr, 1)?;
    let eps = sc::<T>(cfg.eps);
    let stat = |tape: &mut Tape<T>, f: Var| {
        let mu = tape.mean_axis0(f);
        let centered = tape.sub_rowvec(f, mu);
        let sq = tape.powi(centered, 2);
        let var = tape.mean_axis0(sq);
        let var_eps = tape.add_scalar(var, eps);
        let sigma = tape.sqrt(var_eps);
        (mu, sigma)
    };
    let (mu_x, sig_x) = stat(tape, fx);
    let (mu_r, sig_r) = stat(tape, fr);
    let dmu = tape.sub(mu_x, mu_r);
    let dsig = tape.sub(sig_x, sig_r);
    let nmu = l2norm(tape, dmu);
    let nsig = l2norm(tape, dsig);
    Ok(tape.add(nmu, nsig))
}

/// Contextual loss: `-log(CX)` where CX is the mean over reference points of
/// the best affinity, and affinities are per-row softmaxes of
/// `(1 - d_ij / (min_k d_ik + eps)) / h`.
pub fn cx_on_tape<T: Scalar>(tape: &mut Tape<T>, fx: Var, fr: Var, cfg: &MetricConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape, fx, fr, 2)?;
    let eps = sc::<T>(cfg.eps);
    let d = cosine_distance_matrix(tape, fx, fr, eps);
    let row_min = tape.min_axis1(d);
    let row_min_eps = tape.add_scalar(row_min, eps);
    let d_tilde = tape.div_colvec(d, row_min_eps);
    let neg = tape.scale(d_tilde, -T::one());
    let one_minus = tape.add_scalar(neg, T::one());
    let logits = tape.scale(one_minus, T::one() / sc::<T>(cfg.bandwidth));
    let affinity = tape.softmax_rows(logits);
    let best = tape.max_axis0(affinity);
    let cx = tape.mean_all(best);
    let log_cx = tape.log(cx);
    Ok(tape.scale(log_cx, -T::one()))
}

/// Central moment discrepancy of order `k` on jointly min-max normalized
/// coordinates. Coordinates that are constant across both matrices are
/// neutralized (they contribute zero).
pub fn cmd_on_tape<T: Scalar>(tape: &mut Tape<T>, fx: Var, fr: Var, cfg: &MetricConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape, fx, fr, 2)?;
    let min_x = tape.min_axis0(fx);
    let min_r = tape.min_axis0(fr);
    let lo = tape.min2(min_x, min_r);
    let max_x = tape.max_axis0(fx);
    let max_r = tape.max_axis0(fr);
    let hi = tape.max2(max_x, max_r);
    let range = tape.sub(hi, lo);
    let inv = tape.recip_or_zero(range);
    let norm = |tape: &mut Tape<T>, f: Var| {
        let shifted = tape.sub_rowvec(f, lo);
        tape.mul_rowvec(shifted, inv)
    };
    let nx = norm(tape, fx);
    let nr = norm(tape, fr);

    let mu_x = tape.mean_axis0(nx);
    let mu_r = tape.mean_axis0(nr);
    let dmu = tape.sub(mu_x, mu_r);
    let first = l2norm(tape, dmu);
    let mut total = tape.scale(first, sc::<T>(cfg.alphas[0]));

    if cfg.moment_order >= 2 {
        let cen_x = tape.sub_rowvec(nx, mu_x);
        let cen_r = tape.sub_rowvec(nr, mu_r);
        for order in 2..=cfg.moment_order {
            let px = tape.powi(cen_x, order as i32);
            let pr = tape.powi(cen_r, order as i32);
            let cx = tape.mean_axis0(px);
            let cr = tape.mean_axis0(pr);
            let diff = tape.sub(cx, cr);
            let norm_d = l2norm(tape, diff);
            let weighted = tape.scale(norm_d, sc::<T>(cfg.alphas[order - 1]));
            total = tape.add(total, weighted);
        }
    }
    Ok(total)
}

/// Relaxed earth mover's distance with uniform empirical weights: dropping
/// one marginal makes the optimal plan send every point to its cheapest
/// partner, so each direction is a mean nearest-neighbour cosine cost; the
/// result is the max of the two directions.
pub fn remd_on_tape<T: Scalar>(tape: &mut Tape<T>, fx: Var, fr: Var, cfg: &MetricConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape, fx, fr, 1)?;
    let eps = sc::<T>(cfg.eps);
    let m = cosine_distance_matrix(tape, fx, fr, eps);
    let col_min = tape.min_axis0(m);
    let to_ref = tape.mean_all(col_min);
    let row_min = tape.min_axis1(m);
    let to_x = tape.mean_all(row_min);
    Ok(tape.max2(to_ref, to_x))
}

/// Dispatch on the configured metric.
pub fn metric_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    fx: Var,
    fr: Var,
    cfg: &MetricConfig,
) -> Result<Var> {
    match cfg.kind {
        MetricKind::Fs => fs_on_tape(tape, fx, fr, cfg),
        MetricKind::Cx => cx_on_tape(tape, fx, fr, cfg),
        MetricKind::Cmd => cmd_on_tape(tape, fx, fr, cfg),
        MetricKind::Remd => remd_on_tape(tape, fx, fr, cfg),
    }
}

/// Evaluate a metric on plain feature matrices (no gradients).
pub fn distance<T: Scalar>(
    fx: &FeatureMatrix<T>,
    fr: &FeatureMatrix<T>,
    cfg: &MetricConfig,
) -> Result<T> {
    let mut tape = Tape::<T>::new();
    let x = tape.constant(fx.vectors.clone().into_dyn());
    let r = tape.constant(fr.vectors.clone().into_dyn());
    let out = metric_on_tape(&mut tape, x, r, cfg)?;
    Ok(tape.scalar(out))
}

/// Evaluate a metric and its gradient with respect to `fx`.
pub fn distance_with_grad<T: Scalar>(
    fx: &FeatureMatrix<T>,
    fr: &FeatureMatrix<T>,
    cfg: &MetricConfig,
) -> Result<(T, Array2<T>)> {
    let mut tape = Tape::<T>::new();
    let x = tape.leaf_grad(fx.vectors.clone().into_dyn());
    let r = tape.constant(fr.vectors.clone().into_dyn());
    let out = metric_on_tape(&mut tape, x, r, cfg)?;
    let grads = tape.backward(out);
    let g = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| ndarray::ArrayD::zeros(fx.vectors.shape()))
        .into_dimensionality()
        .expect("gradient matches input shape");
    Ok((tape.scalar(out), g))
}

pub fn fs_distance<T: Scalar>(fx: &FeatureMatrix<T>, fr: &FeatureMatrix<T>, cfg: &MetricConfig) -> Result<T> {
    distance(fx, fr, &MetricConfig { kind: MetricKind::Fs, ..cfg.clone() })
}

pub fn cx_distance<T: Scalar>(fx: &FeatureMatrix<T>, fr: &FeatureMatrix<T>, cfg: &MetricConfig) -> Result<T> {
    distance(fx, fr, &MetricConfig { kind: MetricKind::Cx, ..cfg.clone() })
}

pub fn cmd_distance<T: Scalar>(fx: &FeatureMatrix<T>, fr: &FeatureMatrix<T>, cfg: &MetricConfig) -> Result<T> {
    distance(fx, fr, &MetricConfig { kind: MetricKind::Cmd, ..cfg.clone() })
}

pub fn remd_distance<T: Scalar>(fx: &FeatureMatrix<T>, fr: &FeatureMatrix<T>, cfg: &MetricConfig) -> Result<T> {
    distance(fx, fr, &MetricConfig { kind: MetricKind::Remd, ..cfg.clone() })
}
