//! Central finite-difference gradient checking.
//!
//! The oracle only ever evaluates the loss; it never touches the reverse
//! pass, so it is an independent check of [`Graph::backward`].
//!
//! Attention key biases have an identically zero gradient (softmax is
//! invariant to a per-query constant shift of its scores). A relative error
//! against a finite difference that is pure rounding noise is meaningless, so
//! those components are reported separately: their analytic gradient must be
//! negligible and their finite difference must sit at the noise floor.
//!
//! A listwise softmax over a cross-encoder's candidate scores is likewise
//! blind to anything that shifts every score by the same amount: the score
//! head bias and the bias of the last layer norm. [`cross_listwise_zero`]
//! names those.
//!
//! `log(1 + relu)` and max pooling make SPLADE losses piecewise smooth. A
//! stencil that straddles a kink measures neither one-sided derivative, so
//! [`check_gradients_smooth`] takes the model's activation pattern (see
//! [`splade_pattern`]) and re-checks any component whose stencil changes it
//! at successively smaller steps, down to `step / 1000`.
//!
//! [`Graph::backward`]: crate::autograd::Graph::backward

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderModel;
use crate::error::Result;
use crate::tensor::Matrix;
use crate::tokenizer::TokenId;

/// Denominator guard of the relative error `|a - fd| / (|fd| + GUARD)`.
pub const REL_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub enum Selection {
    /// Every component of every tensor.
    All,
    /// Up to `per_tensor` components per tensor, drawn without replacement:
    /// half among components with a nonzero analytic gradient (so sparse
    /// embedding tables are exercised where it matters), half uniformly.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, component, analytic, finite difference)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Largest `|analytic|` among structurally zero components.
    pub zero_grad_max_analytic: f64,
    /// Largest `|finite difference|` among structurally zero components.
    pub zero_grad_max_fd: f64,
    /// Components whose stencil at `step` crossed a kink.
    pub kinks: usize,
    /// Largest relative error of kinked components at the smaller step.
    pub refined_max_rel_error: f64,
    /// Kinked components still crossing a kink at `step / 1000`.
    pub unresolved: usize,
}

pub fn is_structurally_zero(name: &str) -> bool {
    name.ends_with("attn.key.bias")
}

/// Structurally zero components of a listwise cross-encoder loss on a
/// model with `num_layers` layers.
pub fn cross_listwise_zero(num_layers: usize) -> impl Fn(&str) -> bool {
    let last_ln = format!("layers.{}.ffn.ln.bias", num_layers.saturating_sub(1));
    move |name| is_structurally_zero(name) || name == "cross.bias" || name == last_ln
}

/// Compares `analytic` with central differences of `loss` at step `step`.
pub fn check_gradients(
    model: &EncoderModel<f64>,
    analytic: &[Matrix<f64>],
    loss: impl Fn(&EncoderModel<f64>) -> f64,
    step: f64,
    selection: Selection,
) -> GradCheckReport {
    check_gradients_with(model, analytic, loss, step, selection, is_structurally_zero)
}

/// [`check_gradients`] with a custom predicate for structurally zero tensors.
pub fn check_gradients_with(
    model: &EncoderModel<f64>,
    analytic: &[Matrix<f64>],
    loss: impl Fn(&EncoderModel<f64>) -> f64,
    step: f64,
    selection: Selection,
    structurally_zero: impl Fn(&str) -> bool,
) -> GradCheckReport {
    check(model, analytic, &loss, step, selection, &structurally_zero, None)
}

/// [`check_gradients_with`] for piecewise smooth losses. `pattern` must
/// change whenever the loss crosses a kink.
pub fn check_gradients_smooth(
    model: &EncoderModel<f64>,
    analytic: &[Matrix<f64>],
    loss: impl Fn(&EncoderModel<f64>) -> f64,
    step: f64,
    selection: Selection,
    structurally_zero: impl Fn(&str) -> bool,
    pattern: impl Fn(&EncoderModel<f64>) -> Vec<u32>,
) -> GradCheckReport {
    check(model, analytic, &loss, step, selection, &structurally_zero, Some(&pattern))
}

/// Activation pattern of the SPLADE head over `seqs`: the sign of every MLM
/// logit at an attended position and, per vocabulary column, the attended
/// row holding the maximum.
pub fn splade_pattern(model: &EncoderModel<f64>, seqs: &[Vec<TokenId>], masks: &[Vec<bool>]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (ids, mask) in seqs.iter().zip(masks) {
        let logits = model.mlm_logits(&model.forward(ids, mask)?);
        let rows: Vec<usize> = (0..logits.rows()).filter(|&r| mask[r]).collect();
        out.extend(rows.iter().flat_map(|&r| logits.row(r).iter().map(|&x| u32::from(x > 0.0))));
        for c in 0..logits.cols() {
            let arg = rows.iter().copied().max_by(|&a, &b| logits.row(a)[c].total_cmp(&logits.row(b)[c]).then(b.cmp(&a)));
            out.push(arg.map_or(u32::MAX, |r| r as u32));
        }
    }
    Ok(out)
}

fn rel_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / (fd.abs() + REL_GUARD)
}

#[allow(clippy::too_many_arguments)]
fn check(
    model: &EncoderModel<f64>,
    analytic: &[Matrix<f64>],
    loss: &dyn Fn(&EncoderModel<f64>) -> f64,
    step: f64,
    selection: Selection,
    structurally_zero: &dyn Fn(&str) -> bool,
    pattern: Option<&dyn Fn(&EncoderModel<f64>) -> Vec<u32>>,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let base = pattern.map(|f| f(model));
    let mut probe = model.clone();
    for (p, tensor) in model.params().iter().enumerate() {
        let components: Vec<usize> = match selection {
            Selection::All => (0..tensor.len()).collect(),
            Selection::Sample { per_tensor, seed } => {
                if tensor.len() <= per_tensor {
                    (0..tensor.len()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let active: Vec<usize> =
                        (0..tensor.len()).filter(|&e| analytic[p].as_slice()[e] != 0.0).collect();
                    let half = (per_tensor / 2).min(active.len());
                    let mut picks: Vec<usize> =
                        sample(&mut rng, active.len(), half).into_iter().map(|i| active[i]).collect();
                    picks.extend(sample(&mut rng, tensor.len(), per_tensor - half));
                    picks.sort_unstable();
                    picks.dedup();
                    picks
                }
            }
        };
        let name = &model.names()[p];
        for e in components {
            let orig = tensor.as_slice()[e];
            // central difference at `h`, and whether the stencil stayed on one piece
            let mut central = |h: f64| {
                let mut smooth = true;
                let mut eval = |x: f64| {
                    probe.params_mut()[p].as_mut_slice()[e] = x;
                    if let (Some(f), Some(b)) = (pattern, &base) {
                        smooth &= f(&probe) == *b;
                    }
                    loss(&probe)
                };
                let (up, down) = (eval(orig + h), eval(orig - h));
                probe.params_mut()[p].as_mut_slice()[e] = orig;
                ((up - down) / (2.0 * h), smooth)
            };
            let (fd, smooth) = central(step);
            let a = analytic[p].as_slice()[e];
            if structurally_zero(name) {
                report.zero_grad_max_analytic = report.zero_grad_max_analytic.max(a.abs());
                report.zero_grad_max_fd = report.zero_grad_max_fd.max(fd.abs());
                continue;
            }
            if !smooth {
                report.kinks += 1;
                match [10.0, 100.0, 1000.0].iter().map(|d| central(step / d)).find(|r| r.1) {
                    Some((fd, _)) => report.refined_max_rel_error = report.refined_max_rel_error.max(rel_error(a, fd)),
                    None => report.unresolved += 1,
                }
                continue;
            }
            report.checked += 1;
            let rel = rel_error(a, fd);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), e, a, fd));
            }
        }
    }
    report
}

impl GradCheckReport {
    /// True when every checked component, kinked ones at their smaller step,
    /// is within `tol` and the structurally zero components are at rounding
    /// level.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
            && self.refined_max_rel_error < tol
            && self.unresolved == 0
            && self.zero_grad_max_analytic < 1e-12
            && self.zero_grad_max_fd < 1e-9
    }
}
