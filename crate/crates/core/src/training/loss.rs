use crate::numerics::{NumericsError, Tape, Tensor, Var};

const PROB_FLOOR: f64 = 1e-7;

/// Binary cross-entropy with the prediction clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

pub fn total_loss(cls: f64, align: f64, lambda: f64) -> f64 {
    cls + lambda * align
}

/// Mean BCE of `probs` (`n x 1`) against `labels`.
pub fn bce_on_tape(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var, NumericsError> {
    let n = labels.len();
    let p = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let y = tape.constant(Tensor::new(vec![n, 1], labels.to_vec())?);
    let not_y = tape.constant(Tensor::new(vec![n, 1], labels.iter().map(|v| 1.0 - v).collect())?);
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}
