use rand::Rng;

use crate::error::{MitosError, Result};
use crate::proposal::{AnchorLabel, BoxDelta};
use crate::tensor::{Tape, Tensor, Var};

/// Default balance weight between the classification and regression terms.
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// One evaluation of the two-term loss
/// `(1/N_cls)·Σ L_cls + λ·(1/N_reg)·Σ p*·L_reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls_term: f64,
    /// Regression term before weighting by `lambda`.
    pub reg_term: f64,
    pub n_cls: usize,
    pub n_reg: usize,
    pub lambda: f64,
}

/// Records the loss on `tape`.
///
/// `probs: [R, K]` class probabilities, `labels[r] ∈ 0..K` (0 = background),
/// `deltas: [R, 4]` predicted offsets and `targets[r]` their ground truth.
/// Only rows with a non-zero label contribute regression. When no row does,
/// the regression term is the constant 0 and the total is the classification
/// term itself.
#[allow(clippy::too_many_arguments)]
pub fn multitask_loss_tape(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    deltas: Var,
    targets: &[BoxDelta],
    n_cls: usize,
    n_reg: usize,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let rows = labels.len();
    if targets.len() != rows || tape.value(deltas).shape() != [rows, 4] {
        return Err(MitosError::shape(
            "multitask_loss",
            format!("{} delta rows and targets", rows),
            format!("deltas {:?}, {} targets", tape.value(deltas).shape(), targets.len()),
        ));
    }
    if n_cls == 0 || n_reg == 0 {
        return Err(MitosError::invalid("multitask_loss: N_cls and N_reg must be positive"));
    }
    if !(lambda >= 0.0) {
        return Err(MitosError::invalid(format!("multitask_loss: lambda {} must be non-negative", lambda)));
    }
    let ce = tape.cross_entropy(probs, labels)?;
    let ce_sum = tape.sum(ce);
    let cls = tape.scale(ce_sum, 1.0 / n_cls as f64);
    let cls_term = tape.value(cls).item();
    let positives: Vec<usize> = (0..rows).filter(|&r| labels[r] != 0).collect();
    if positives.is_empty() {
        let b = LossBreakdown {
            total: cls_term,
            cls_term,
            reg_term: 0.0,
            n_cls,
            n_reg,
            lambda,
        };
        return Ok((cls, b));
    }
    let idx = positives.iter().flat_map(|&r| (0..4).map(move |j| r * 4 + j)).collect();
    let picked = tape.gather(deltas, idx, &[positives.len(), 4])?;
    let t: Vec<f64> = positives.iter().flat_map(|&r| targets[r].to_array()).collect();
    let t = tape.constant(Tensor::new(vec![positives.len(), 4], t)?);
    let diff = tape.sub(picked, t)?;
    let sl1 = tape.smooth_l1(diff);
    let reg_sum = tape.sum(sl1);
    let reg = tape.scale(reg_sum, 1.0 / n_reg as f64);
    let weighted = tape.scale(reg, lambda);
    let total = tape.add(cls, weighted)?;
    let b = LossBreakdown {
        total: tape.value(total).item(),
        cls_term,
        reg_term: tape.value(reg).item(),
        n_cls,
        n_reg,
        lambda,
    };
    Ok((total, b))
}

/// Value-level form of [`multitask_loss_tape`]; `probs[r]` is one
/// probability row and `gt[r]` its true class.
pub fn multitask_loss(
    probs: &[Vec<f64>],
    gt: &[usize],
    pred_deltas: &[BoxDelta],
    gt_deltas: &[BoxDelta],
    n_cls: usize,
    n_reg: usize,
    lambda: f64,
) -> Result<LossBreakdown> {
    let rows = probs.len();
    if gt.len() != rows || pred_deltas.len() != rows || gt_deltas.len() != rows {
        return Err(MitosError::shape(
            "multitask_loss",
            format!("{} rows everywhere", rows),
            format!("{} labels, {} predicted, {} targets", gt.len(), pred_deltas.len(), gt_deltas.len()),
        ));
    }
    if rows == 0 {
        return Err(MitosError::invalid("multitask_loss: no rows"));
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(MitosError::invalid("multitask_loss: probability rows differ in length"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![rows, k], probs.concat())?);
    let d = tape.constant(Tensor::new(
        vec![rows, 4],
        pred_deltas.iter().flat_map(|d| d.to_array()).collect(),
    )?);
    let (_, b) = multitask_loss_tape(&mut tape, p, gt, d, gt_deltas, n_cls, n_reg, lambda)?;
    Ok(b)
}

/// Samples up to `size` labelled references aiming at a 1:1 positive:negative
/// split; when positives run short the remainder is filled with negatives.
/// Returns positives then negatives, each in ascending index order.
pub fn sample_minibatch<R: Rng + ?Sized>(labels: &[AnchorLabel], size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(MitosError::invalid("sample_minibatch: size must be positive"));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let n_pos = pos.len().min(size / 2);
    let n_neg = neg.len().min(size - n_pos);
    let mut out = pick(&pos, n_pos, rng);
    out.extend(pick(&neg, n_neg, rng));
    Ok(out)
}

fn pick<R: Rng + ?Sized>(from: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, from.len(), n).into_iter().map(|i| from[i]).collect();
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_example() {
        let b = multitask_loss(
            &[vec![0.5, 0.5]],
            &[1],
            &[BoxDelta { tx: 0.5, ..Default::default() }],
            &[BoxDelta::default()],
            1,
            1,
            DEFAULT_LAMBDA,
        )
        .unwrap();
        assert!((b.total - (2f64.ln() + 1.25)).abs() < 1e-12);
        assert!((b.total - 1.9431).abs() < 5e-5);
        assert_eq!(b.total, b.cls_term + b.lambda * b.reg_term);
    }

    #[test]
    fn perfect_and_no_positive() {
        let d = BoxDelta { tx: 0.2, ty: -0.1, tw: 0.3, th: 0.0 };
        let b = multitask_loss(&[vec![0.0, 1.0]], &[1], &[d], &[d], 1, 1, 10.0).unwrap();
        assert_eq!(b.total, 0.0);
        let b = multitask_loss(&[vec![0.7, 0.3]], &[0], &[d], &[BoxDelta::default()], 1, 1, 10.0).unwrap();
        assert_eq!(b.reg_term, 0.0);
        assert_eq!(b.total, b.cls_term);
    }

    #[test]
    fn lambda_zero_and_mismatch() {
        let d = BoxDelta { tx: 1.0, ..Default::default() };
        let b = multitask_loss(&[vec![0.4, 0.6]], &[1], &[d], &[BoxDelta::default()], 1, 1, 0.0).unwrap();
        assert_eq!(b.total, b.cls_term);
        assert!(multitask_loss(&[vec![0.4, 0.6]], &[1, 0], &[d], &[d], 1, 1, 10.0).is_err());
    }

    #[test]
    fn sampling_rules() {
        let mut labels = vec![AnchorLabel::Negative; 1010];
        for l in labels.iter_mut().take(10) {
            *l = AnchorLabel::Positive(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_minibatch(&labels, 256, &mut rng).unwrap();
        assert_eq!(s.len(), 256);
        assert_eq!(s.iter().filter(|&&i| labels[i].is_positive()).count(), 10);

        let mut labels = vec![AnchorLabel::Positive(0); 200];
        labels.extend(vec![AnchorLabel::Negative; 200]);
        labels.push(AnchorLabel::Ignore);
        let s = sample_minibatch(&labels, 256, &mut rng).unwrap();
        assert_eq!(s.iter().filter(|&&i| labels[i].is_positive()).count(), 128);
        assert_eq!(s.len(), 256);
        assert!(!s.contains(&400));

        let a = sample_minibatch(&labels, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_minibatch(&labels, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_minibatch(&labels, 0, &mut rng).is_err());
    }
}
