//! Training objective: `L = L_triple + L_pro + L_label`.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Tape, Tensor, Var};

/// Which loss terms contribute to `l_total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub label: bool,
    pub pro: bool,
    pub triple: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            label: true,
            pro: true,
            triple: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_label: f64,
    pub l_pro: f64,
    pub l_triple: f64,
    pub l_total: f64,
    pub flags: LossFlags,
}

/// Sum of the enabled terms. Disabled terms are still reported.
pub fn total_loss(l_label: f64, l_pro: f64, l_triple: f64, flags: LossFlags) -> LossBreakdown {
    let mut total = 0.0;
    if flags.label {
        total += l_label;
    }
    if flags.pro {
        total += l_pro;
    }
    if flags.triple {
        total += l_triple;
    }
    LossBreakdown {
        l_label,
        l_pro,
        l_triple,
        l_total: total,
        flags,
    }
}

fn check_target(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Label(format!("target {t} outside [0, 1]")));
    }
    Ok(())
}

/// Binary cross entropy on raw scores, in the stable `softplus(y) − t·y` form.
pub fn label_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let mut s = 0.0;
    for (&y, &t) in scores.iter().zip(targets) {
        check_target(t)?;
        s += softplus(y) - t * y;
    }
    Ok(s)
}

/// Per video: `max(negative sims) − min(positive sims)`, summed. With a margin
/// each term becomes `max(0, term + margin)`.
pub fn triplet_loss(pos: &[Vec<f64>], neg: &[Vec<f64>], margin: Option<f64>) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::shape(format!(
            "{} positive sets vs {} negative sets",
            pos.len(),
            neg.len()
        )));
    }
    let mut s = 0.0;
    for (v, (p, n)) in pos.iter().zip(neg).enumerate() {
        if p.is_empty() || n.is_empty() {
            return Err(Error::Mining(format!(
                "video {v} has an empty positive or negative set"
            )));
        }
        let hi = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let term = hi - lo;
        s += match margin {
            Some(m) => (term + m).max(0.0),
            None => term,
        };
    }
    Ok(s)
}

/// Tape version of [`label_loss`].
pub fn label_loss_on_tape(tape: &mut Tape, scores: &[Var], targets: &[f64]) -> Result<Var> {
    if scores.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let terms = scores
        .iter()
        .zip(targets)
        .map(|(&y, &t)| tape.bce_logits(y, t))
        .collect::<Result<Vec<_>>>()?;
    tape.add_n(&terms)
}

fn pick(tape: &Tape, vars: &[Var], better: impl Fn(f64, f64) -> bool) -> Var {
    let mut best = vars[0];
    for &v in &vars[1..] {
        if better(tape.scalar(v), tape.scalar(best)) {
            best = v;
        }
    }
    best
}

/// Tape version of [`triplet_loss`]. The gradient flows through the selected
/// hardest negative and easiest-to-lose positive only.
pub fn triplet_loss_on_tape(tape: &mut Tape, pos: &[Vec<Var>], neg: &[Vec<Var>], margin: Option<f64>) -> Result<Var> {
    if pos.len() != neg.len() {
        return Err(Error::shape(format!(
            "{} positive sets vs {} negative sets",
            pos.len(),
            neg.len()
        )));
    }
    if pos.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(pos.len());
    for (v, (p, n)) in pos.iter().zip(neg).enumerate() {
        if p.is_empty() || n.is_empty() {
            return Err(Error::Mining(format!(
                "video {v} has an empty positive or negative set"
            )));
        }
        let hi = pick(tape, n, |a, b| a > b);
        let lo = pick(tape, p, |a, b| a < b);
        let mut term = tape.sub(hi, lo)?;
        if let Some(m) = margin {
            let c = tape.constant(Tensor::scalar(m));
            let shifted = tape.add(term, c)?;
            term = tape.relu(shifted);
        }
        terms.push(term);
    }
    tape.add_n(&terms)
}

/// Probability view of a raw score, for reporting.
pub fn score_probability(y: f64) -> f64 {
    sigmoid(y)
}
