//! Central finite-difference verification of analytic gradients.

use std::hash::Hasher;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{NetError, Tensor};

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding do not blow the ratio up.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Default number of entries checked per tensor when it is larger.
pub const DEFAULT_SAMPLES_PER_TENSOR: usize = 200;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// Probes dropped because `x ± eps` fell on a different side of a
    /// kink than `x`.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradient check (eps = {:e})", self.epsilon)?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<40} n={:<5} skipped={:<3} max_rel={:.3e} max_abs={:.3e}",
                e.name, e.checked, e.skipped, e.max_rel_err, e.max_abs_err
            )?;
        }
        write!(f, "  overall max relative error: {:.3e}", self.max_rel_err())
    }
}

fn check_eps(eps: f64) -> Result<(), NetError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NetError::Config(format!(
            "finite-difference epsilon {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

fn pick(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks the gradient that `f` reports for each tensor in `vars` against
/// central differences. At most `max_per_tensor` entries per tensor are
/// probed; the subset is drawn from `seed`.
pub fn check_gradients<F>(
    mut f: F,
    vars: &mut [Tensor],
    names: &[String],
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, NetError>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>), NetError>,
{
    check_eps(eps)?;
    let (_, analytic) = f(vars)?;
    if analytic.len() != vars.len() {
        return Err(NetError::Shape(format!(
            "{} gradients for {} variables",
            analytic.len(),
            vars.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(vars.len());
    for i in 0..vars.len() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let idx = pick(vars[i].len(), max_per_tensor, &mut rng);
        for &j in &idx {
            let orig = vars[i].data()[j];
            vars[i].data_mut()[j] = orig + eps;
            let lp = f(vars)?.0;
            vars[i].data_mut()[j] = orig - eps;
            let lm = f(vars)?.0;
            vars[i].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name: names.get(i).cloned().unwrap_or_else(|| format!("var{i}")),
            checked: idx.len(),
            skipped: 0,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport { epsilon: eps, entries })
}

/// A model with named parameters and a scalar training loss.
pub trait Differentiable {
    type Input;

    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Loss and gradients in [`Differentiable::params`] order.
    fn loss_and_grads(&self, input: &Self::Input) -> Result<(f64, Vec<Tensor>), NetError>;

    fn loss(&self, input: &Self::Input) -> Result<f64, NetError> {
        Ok(self.loss_and_grads(input)?.0)
    }

    /// Fingerprint of every piecewise choice the loss makes (active relu
    /// units, pooling winners, loss branches). Finite differences are only
    /// meaningful between points with equal fingerprints.
    fn kink_signature(&self, _input: &Self::Input) -> Result<u64, NetError> {
        Ok(0)
    }
}

/// Feeds the sign pattern of `values` (positive or not) into `h`.
pub fn hash_active(values: &[f64], h: &mut impl Hasher) {
    for chunk in values.chunks(64) {
        let mut word = 0u64;
        for (i, v) in chunk.iter().enumerate() {
            if *v > 0.0 {
                word |= 1 << i;
            }
        }
        h.write_u64(word);
    }
}

/// Finite-difference check over every parameter tensor of `model`, probing
/// up to [`DEFAULT_SAMPLES_PER_TENSOR`] entries each.
pub fn finite_diff_check<M: Differentiable>(
    model: &mut M,
    input: &M::Input,
    eps: f64,
) -> Result<GradCheckReport, NetError> {
    finite_diff_check_sampled(model, input, eps, DEFAULT_SAMPLES_PER_TENSOR, 0x5eed)
}

pub fn finite_diff_check_sampled<M: Differentiable>(
    model: &mut M,
    input: &M::Input,
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, NetError> {
    check_eps(eps)?;
    let (_, analytic) = model.loss_and_grads(input)?;
    let base = model.kink_signature(input)?;
    let names = model.param_names();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(sizes.len());
    for (i, &len) in sizes.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut skipped = 0;
        let idx = pick(len, max_per_tensor, &mut rng);
        for &j in &idx {
            let orig = model.params()[i].data()[j];
            model.params_mut()[i].data_mut()[j] = orig + eps;
            let lp = model.loss(input)?;
            let sp = model.kink_signature(input)?;
            model.params_mut()[i].data_mut()[j] = orig - eps;
            let lm = model.loss(input)?;
            let sm = model.kink_signature(input)?;
            model.params_mut()[i].data_mut()[j] = orig;
            if sp != base || sm != base {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name: names[i].clone(),
            checked: idx.len() - skipped,
            skipped,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport { epsilon: eps, entries })
}
