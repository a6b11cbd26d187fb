//! Next-item and soft-label objectives, as plain functions over scores and
//! as graph builders for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_sigmoid_scalar, sigmoid_scalar, Tensor};

/// How a client matches server soft labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftLabelLoss {
    /// Binary cross-entropy between `σ(pred)` and `σ(label)`.
    #[default]
    Bce,
    /// Squared error on raw scores.
    Mse,
}

/// `−Σ_t [log σ(pos_t) + Σ_k log(1 − σ(neg_{t,k}))]`.
pub fn rec_loss(pos_scores: &[f64], neg_scores: &[Vec<f64>]) -> Result<f64> {
    if pos_scores.is_empty() {
        return Err(Error::Input("rec_loss over an empty sequence".into()));
    }
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::Input(format!(
            "{} positive steps but {} negative lists",
            pos_scores.len(),
            neg_scores.len()
        )));
    }
    let total: f64 = pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(&p, negs)| {
            // log(1 − σ(x)) = log σ(−x)
            log_sigmoid_scalar(p) + negs.iter().map(|&n| log_sigmoid_scalar(-n)).sum::<f64>()
        })
        .sum();
    Ok(-total)
}

pub fn soft_label_loss(pred: &[f64], labels: &[f64], kind: SoftLabelLoss) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} soft labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(labels)
        .map(|(&p, &l)| match kind {
            SoftLabelLoss::Bce => {
                let q = sigmoid_scalar(l);
                -(q * log_sigmoid_scalar(p) + (1.0 - q) * log_sigmoid_scalar(-p))
            }
            SoftLabelLoss::Mse => (p - l).powi(2),
        })
        .sum())
}

/// Graph form of [`rec_loss`]: `pos` is `[T]`, each entry of `negs` is the
/// `[T]` score vector of one negative slot.
pub fn rec_loss_graph(g: &mut Graph, pos: Var, negs: &[Var]) -> Result<Var> {
    let lp = g.log_sigmoid(pos)?;
    let mut total = g.sum(lp)?;
    for &n in negs {
        let flipped = g.neg(n)?;
        let ln = g.log_sigmoid(flipped)?;
        let s = g.sum(ln)?;
        total = g.add(total, s)?;
    }
    g.neg(total)
}

/// Graph form of [`soft_label_loss`] with constant labels.
pub fn soft_label_loss_graph(
    g: &mut Graph,
    pred: Var,
    labels: &[f64],
    kind: SoftLabelLoss,
) -> Result<Var> {
    if g.value(pred).len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} soft labels",
            g.value(pred).len(),
            labels.len()
        )));
    }
    let shape = g.value(pred).shape().to_vec();
    match kind {
        SoftLabelLoss::Bce => {
            let q: Vec<f64> = labels.iter().map(|&l| sigmoid_scalar(l)).collect();
            let one_minus: Vec<f64> = q.iter().map(|v| 1.0 - v).collect();
            let q = g.constant(Tensor::new(shape.clone(), q)?);
            let one_minus = g.constant(Tensor::new(shape, one_minus)?);
            let lp = g.log_sigmoid(pred)?;
            let flipped = g.neg(pred)?;
            let ln = g.log_sigmoid(flipped)?;
            let a = g.mul(q, lp)?;
            let b = g.mul(one_minus, ln)?;
            let both = g.add(a, b)?;
            let s = g.sum(both)?;
            g.neg(s)
        }
        SoftLabelLoss::Mse => {
            let target = g.constant(Tensor::new(shape, labels.to_vec())?);
            let diff = g.sub(pred, target)?;
            let sq = g.mul(diff, diff)?;
            g.sum(sq)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rec_loss_examples() {
        let l = rec_loss(&[0.0], &[vec![0.0]]).unwrap();
        assert!((l - 1.3862944).abs() < 1e-7);

        let l = rec_loss(&[1e6], &[vec![-1e6, -1e6]]).unwrap();
        assert!(l.abs() < 1e-12);

        // −(log σ(1) + log(1−σ(−1)) + log(1−σ(0))), evaluated by hand
        let oracle = -((1.0 / (1.0 + (-1.0f64).exp())).ln()
            + (1.0 - 1.0 / (1.0 + 1.0f64.exp())).ln()
            + 0.5f64.ln());
        let l = rec_loss(&[1.0], &[vec![-1.0, 0.0]]).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 1.319670556).abs() < 1e-9);

        assert!(matches!(rec_loss(&[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn soft_label_examples() {
        let bce = |p: f64, q: f64| -(q * p.ln() + (1.0 - q) * (1.0 - p).ln());
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());

        // minimiser: pred == labels gives the entropy of σ(labels)
        let labels = [0.7, -1.2, 2.0];
        let at_min = soft_label_loss(&labels, &labels, SoftLabelLoss::Bce).unwrap();
        let entropy: f64 = labels.iter().map(|&l| bce(s(l), s(l))).sum();
        assert!((at_min - entropy).abs() < 1e-12);

        let l = soft_label_loss(&[0.0], &[1e9], SoftLabelLoss::Bce).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let oracle = bce(s(1.0), s(2.0)) + bce(s(-1.0), s(-2.0));
        let l = soft_label_loss(&[1.0, -1.0], &[2.0, -2.0], SoftLabelLoss::Bce).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.864929219).abs() < 1e-8);

        assert!(soft_label_loss(&[1.0], &[1.0, 2.0], SoftLabelLoss::Bce).is_err());
        assert_eq!(
            soft_label_loss(&[1.0, 2.0], &[0.0, 0.0], SoftLabelLoss::Mse).unwrap(),
            5.0
        );
    }

    #[test]
    fn graph_forms_agree_and_minimiser_has_zero_grad() {
        let pred = [0.4, -0.3, 1.7];
        let labels = [0.4, -0.3, 1.7];
        for kind in [SoftLabelLoss::Bce, SoftLabelLoss::Mse] {
            let mut g = Graph::new();
            let p = g.leaf(Tensor::vector(pred.to_vec()));
            let l = soft_label_loss_graph(&mut g, p, &labels, kind).unwrap();
            assert!((g.scalar(l) - soft_label_loss(&pred, &labels, kind).unwrap()).abs() < 1e-12);
            g.backward(l).unwrap();
            assert!(g.grad(p).unwrap().iter().all(|d| d.abs() < 1e-12));
        }

        let mut g = Graph::new();
        let pos = g.leaf(Tensor::vector(vec![1.0, 0.2]));
        let n1 = g.leaf(Tensor::vector(vec![-1.0, 0.3]));
        let n2 = g.leaf(Tensor::vector(vec![0.0, -0.4]));
        let l = rec_loss_graph(&mut g, pos, &[n1, n2]).unwrap();
        let direct = rec_loss(&[1.0, 0.2], &[vec![-1.0, 0.0], vec![0.3, -0.4]]).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-12);
    }
}
