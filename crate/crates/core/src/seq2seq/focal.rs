use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Probabilities below this are clamped before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalValue {
    pub loss: f64,
    /// Number of probabilities raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// `−Σ_t (1 − p_t)^γ log p_t` over gold-token probabilities; `γ = 0` is
/// the summed cross-entropy.
pub fn focal_loss(probs: &[f64], gamma: f64) -> Result<FocalValue> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be a finite value >= 0, got {gamma}")));
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Data(format!("probability {p} outside [0, 1]")));
        }
        let q = if p < PROB_FLOOR {
            clamped += 1;
            PROB_FLOOR
        } else {
            p
        };
        let factor = if gamma == 0.0 { 1.0 } else { (1.0 - q).powf(gamma) };
        loss -= factor * q.ln();
    }
    Ok(FocalValue { loss, clamped })
}

/// Per-row focal terms `−(1 − p)^γ log p` for an `r × 1` column of gold
/// probabilities. Clamp events are counted on the tape.
pub fn focal_terms<S: Scalar>(g: &mut Graph<'_, S>, p: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be a finite value >= 0, got {gamma}")));
    }
    let low = g.value(p).data().iter().filter(|&&v| v.f64() < PROB_FLOOR).count();
    g.note_clamps(low);
    let pc = g.clamp_min(p, PROB_FLOOR)?;
    let logp = g.log(pc)?;
    let miss = g.affine(pc, -1.0, 1.0)?;
    let miss = g.clamp_min(miss, 0.0)?;
    let factor = g.powf(miss, gamma)?;
    let weighted = g.mul(factor, logp)?;
    g.affine(weighted, -1.0, 0.0)
}
