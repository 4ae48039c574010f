use std::rc::Rc;

use crate::error::{Error, Result};
use crate::patching::MASK_LOGIT;
use crate::tensor::{ops, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.1;
/// Allowed deviation of a row norm from 1 at the loss input.
pub const NORM_TOL: f64 = 1e-6;

/// Denominator used by [`nt_xent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NtXentMode {
    /// All `2B - 1` non-self rows, positive included.
    #[default]
    Standard,
    /// Only the opposite-parity rows of other pairs, positive excluded. Can
    /// go negative; kept for comparison, not for training.
    AsWritten,
}

impl NtXentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "as-written" => Ok(Self::AsWritten),
            _ => Err(Error::Config(format!("unknown nt_xent mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::AsWritten => "as-written",
        }
    }
}

/// Per-anchor losses `[2B]` for unit rows `z[2B, d]`, where rows `2k` and
/// `2k + 1` form a positive pair. Their mean is the batch loss.
pub fn nt_xent_terms(z: &Var, tau: f64, mode: NtXentMode) -> Result<Var> {
    let s = z.shape();
    if s.len() != 2 || s[0] == 0 || !s[0].is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "nt_xent needs an even, nonzero number of rows, got shape {s:?}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let (n, d) = (s[0], s[1]);
    if mode == NtXentMode::AsWritten && n < 4 {
        return Err(Error::Invalid(
            "as-written nt_xent has an empty denominator for a single pair".into(),
        ));
    }
    for (i, row) in z.value().data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Invalid(format!(
                "nt_xent row {i} has norm {norm}, expected unit rows"
            )));
        }
    }
    let sim = ops::scale(&ops::matmul_t(z, z)?, 1.0 / tau)?;
    let mut mask = vec![MASK_LOGIT; n * n];
    for a in 0..n {
        for j in 0..n {
            let keep = match mode {
                NtXentMode::Standard => j != a,
                NtXentMode::AsWritten => j % 2 != a % 2 && j / 2 != a / 2,
            };
            if keep {
                mask[a * n + j] = 0.0;
            }
        }
    }
    let mask = Rc::new(Tensor::new(vec![n, n], mask)?);
    let lse = ops::log_sum_exp(&sim, Some(&mask))?;
    let pos_index: Vec<u32> = (0..n).map(|a| (a * n + (a ^ 1)) as u32).collect();
    let pos = ops::gather(&sim, Rc::new(pos_index), &[n])?;
    ops::sub(&lse, &pos)
}

/// Symmetrized contrastive loss over all positive pairs.
pub fn nt_xent(z: &Var, tau: f64, mode: NtXentMode) -> Result<Var> {
    ops::mean(&nt_xent_terms(z, tau, mode)?)
}

/// Mean softmax cross-entropy of `logits[B, K]` against class indices.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::Invalid(format!(
            "cross_entropy: logits {s:?} for {} labels",
            labels.len()
        )));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let lse = ops::log_sum_exp(logits, None)?;
    let idx: Vec<u32> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (i * k + l) as u32)
        .collect();
    let picked = ops::gather(logits, Rc::new(idx), &[labels.len()])?;
    ops::mean(&ops::sub(&lse, &picked)?)
}
