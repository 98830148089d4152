use crate::error::{NcvError, Result};
use crate::tensor::{Tape, Var};

fn check_labels(tape: &Tape, logits: Var, y: &[usize]) -> Result<usize> {
    let outputs = *tape.shape(logits).last().unwrap_or(&0);
    if outputs < 2 {
        return Err(NcvError::contract("verifier needs at least one class plus reject"));
    }
    let k = outputs - 1;
    if let Some(&bad) = y.iter().find(|&&t| t >= k) {
        return Err(NcvError::contract(format!(
            "label {bad} is not a data class (K = {k}; index {k} is reject)"
        )));
    }
    Ok(k)
}

/// Cross-entropy of the `(K+1)`-way posterior against `y`. Rejecting costs
/// like any wrong class.
pub fn merlin_loss(tape: &mut Tape, arthur_logits: Var, y: &[usize]) -> Result<Var> {
    check_labels(tape, arthur_logits, y)?;
    tape.cross_entropy(arthur_logits, y)
}

/// `-log(p_y + p_reject)`, zero iff every unit of mass is safe.
pub fn morgana_safe_loss(tape: &mut Tape, arthur_logits: Var, y: &[usize]) -> Result<Var> {
    let k = check_labels(tape, arthur_logits, y)?;
    tape.safe_mass_nll(arthur_logits, y, k)
}

/// `(1 - γ) L_M + γ L_M̂`; the endpoints return one term unchanged.
pub fn arthur_loss(l_merlin: f64, l_morgana: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        l_merlin
    } else if gamma == 1.0 {
        l_morgana
    } else {
        (1.0 - gamma) * l_merlin + gamma * l_morgana
    }
}

/// Tape form of [`arthur_loss`].
pub fn arthur_loss_var(tape: &mut Tape, l_merlin: Var, l_morgana: Var, gamma: f64) -> Result<Var> {
    if gamma == 0.0 {
        Ok(l_merlin)
    } else if gamma == 1.0 {
        Ok(l_morgana)
    } else {
        let a = tape.scale(l_merlin, 1.0 - gamma);
        let b = tape.scale(l_morgana, gamma);
        tape.add(a, b)
    }
}

/// Row-wise softmax of raw logits.
pub fn posterior(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Argmax with ties toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
