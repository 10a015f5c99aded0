//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Relative error used by the checks: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval(
    inputs: &[Tensor],
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NotScalar(v.dims().to_vec()));
    }
    Ok((v.item(), tape.kink_pattern()))
}

fn analytic(
    inputs: &[Tensor],
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(Vec<Tensor>, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.dims().to_vec()))
        })
        .collect();
    Ok((grads, tape.kink_pattern()))
}

/// Central difference at one element, or `None` when the probe moves some
/// relu-family input across its kink.
fn numeric_at(
    inputs: &[Tensor],
    which: usize,
    j: usize,
    eps: f64,
    base: &[bool],
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Option<f64>> {
    let mut probe = inputs.to_vec();
    let x0 = probe[which].data()[j];
    probe[which].data_mut()[j] = x0 + eps;
    let (plus, p_plus) = eval(&probe, f)?;
    probe[which].data_mut()[j] = x0 - eps;
    let (minus, p_minus) = eval(&probe, f)?;
    if p_plus != base || p_minus != base {
        return Ok(None);
    }
    Ok(Some((plus - minus) / (2.0 * eps)))
}

/// Maximum relative error between the tape's gradient and central
/// differences, over every element of every input.
///
/// `f` must be deterministic: it is re-run twice per element. Elements
/// whose probe crosses a relu kink are skipped.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (grads, base) = analytic(inputs, &f)?;
    let mut worst: f64 = 0.0;
    for (which, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            if let Some(n) = numeric_at(inputs, which, j, eps, &base, &f)? {
                worst = worst.max(relative_error(g.data()[j], n));
            }
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but probes at most `per_input` randomly chosen
/// elements of each input. Elements near a kink are replaced by further
/// random draws. Used for whole models.
pub fn grad_check_sampled<F>(
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    rng: &mut impl Rng,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (grads, base) = analytic(inputs, &f)?;
    let mut worst: f64 = 0.0;
    for (which, g) in grads.iter().enumerate() {
        let mut checked = 0;
        for j in sample(rng, g.len(), g.len()) {
            if checked == per_input {
                break;
            }
            if let Some(n) = numeric_at(inputs, which, j, eps, &base, &f)? {
                worst = worst.max(relative_error(g.data()[j], n));
                checked += 1;
            }
        }
    }
    Ok(worst)
}

/// `sum(x * r)` for a fixed pseudo-random `r` derived from `seed`; turns any
/// tensor into a scalar whose gradient exercises every element.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9e1ed);
    let dims = tape.try_value(x)?.dims().to_vec();
    let r = tape.constant(Tensor::uniform(dims, -1.0, 1.0, &mut rng));
    let p = tape.mul(x, r)?;
    tape.try_sum(p)
}
