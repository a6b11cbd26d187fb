//! The two contrastive denoising terms, over plain vectors and as graph
//! builders. Similarities are cosines divided by a temperature.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, logsumexp_raw};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `−log(e^{s⁺} / (e^{s⁺} + Σ e^{s⁻}))` with `s⁺ = sim(prev, cur)` and
/// `s⁻ = sim(cur, n)` for each negative `n`.
pub fn preference_consistency(
    prev: &[f64],
    cur: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let pos = cosine_sim(prev, cur)? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(cosine_sim(cur, n)? / tau);
    }
    Ok(logsumexp_raw(&logits) - pos)
}

/// `−log(Σ_pos e^{s} / (Σ_pos e^{s} + Σ_neg e^{s}))`, similarities taken
/// against `anchor`. Zero without positives.
pub fn intention_similarity(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Ok(0.0);
    }
    let pos = positives
        .iter()
        .map(|p| Ok(cosine_sim(anchor, p)? / tau))
        .collect::<Result<Vec<_>>>()?;
    let mut all = pos.clone();
    for n in negatives {
        all.push(cosine_sim(anchor, n)? / tau);
    }
    Ok(logsumexp_raw(&all) - logsumexp_raw(&pos))
}

fn sims(g: &mut Graph, anchor: Var, others: &[Var], tau: f64) -> Result<Vec<Var>> {
    others
        .iter()
        .map(|&o| {
            let c = g.cosine(anchor, o)?;
            g.affine(c, 1.0 / tau, 0.0)
        })
        .collect()
}

pub fn preference_consistency_graph(
    g: &mut Graph,
    prev: Var,
    cur: Var,
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let pos = sims(g, cur, &[prev], tau)?[0];
    let mut logits = vec![pos];
    logits.extend(sims(g, cur, negatives, tau)?);
    let all = g.concat(&logits)?;
    let lse = g.logsumexp(all)?;
    g.sub(lse, pos)
}

/// `None` when there are no positives.
pub fn intention_similarity_graph(
    g: &mut Graph,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
) -> Result<Option<Var>> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Ok(None);
    }
    let pos = sims(g, anchor, positives, tau)?;
    let mut all = pos.clone();
    all.extend(sims(g, anchor, negatives, tau)?);
    let pos = g.concat(&pos)?;
    let all = g.concat(&all)?;
    let num = g.logsumexp(pos)?;
    let den = g.logsumexp(all)?;
    g.sub(den, num).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    const E1: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
    const E2: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
    const E3: [f64; 4] = [0.0, 0.0, 1.0, 0.0];

    #[test]
    fn closed_forms() {
        let e = std::f64::consts::E;
        let pc = preference_consistency(&E1, &E1, &[&E2, &E3], 1.0).unwrap();
        assert!((pc - -(e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((pc - 0.5514).abs() < 1e-4);
        let is = intention_similarity(&E1, &[&E1], &[&E2], 1.0).unwrap();
        assert!((is - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((is - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn degenerate_cases() {
        assert!(preference_consistency(&E1, &E2, &[], 1.0).unwrap().abs() < 1e-15);
        assert_eq!(intention_similarity(&E1, &[], &[&E2], 1.0).unwrap(), 0.0);
        assert!(
            intention_similarity(&E1, &[&E2, &E3], &[], 1.0)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!(preference_consistency(&E1, &E1, &[], 0.0).is_err());
    }

    #[test]
    fn graph_forms_agree() {
        let mut g = Graph::new();
        let v = |g: &mut Graph, x: &[f64]| g.leaf(Tensor::vector(x.to_vec()));
        let (a, b, c) = (
            v(&mut g, &[0.3, -0.2, 0.9, 0.1]),
            v(&mut g, &E2),
            v(&mut g, &[0.5, 0.5, -0.1, 0.7]),
        );
        let pc = preference_consistency_graph(&mut g, b, a, &[c], 0.7).unwrap();
        let want =
            preference_consistency(&E2, &[0.3, -0.2, 0.9, 0.1], &[&[0.5, 0.5, -0.1, 0.7]], 0.7)
                .unwrap();
        assert!((g.scalar(pc) - want).abs() < 1e-12);
        let is = intention_similarity_graph(&mut g, a, &[b], &[c], 0.7)
            .unwrap()
            .unwrap();
        let want = intention_similarity(
            &[0.3, -0.2, 0.9, 0.1],
            &[&E2],
            &[&[0.5, 0.5, -0.1, 0.7]],
            0.7,
        )
        .unwrap();
        assert!((g.scalar(is) - want).abs() < 1e-12);
        assert!(intention_similarity_graph(&mut g, a, &[], &[c], 1.0)
            .unwrap()
            .is_none());
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), n)
    }

    proptest! {
        #[test]
        fn nonnegative_and_order_free(anchor in vecs(2), negs in vecs(4), pos in vecs(2)) {
            let n: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let mut r = n.clone();
            r.reverse();
            let p: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
            let pc = preference_consistency(&anchor[0], &anchor[1], &n, 1.0).unwrap();
            prop_assert!(pc >= -1e-12);
            let pc_r = preference_consistency(&anchor[0], &anchor[1], &r, 1.0).unwrap();
            prop_assert!((pc - pc_r).abs() < 1e-12);
            let is = intention_similarity(&anchor[0], &p, &n, 1.0).unwrap();
            prop_assert!(is >= -1e-12);
            let is_r = intention_similarity(&anchor[0], &p, &r, 1.0).unwrap();
            prop_assert!((is - is_r).abs() < 1e-12);
        }

        #[test]
        fn closer_positive_lowers_is_loss(t in 0.05f64..0.95) {
            // rotate the positive from E2 toward the anchor E1
            let far = [1.0 - t - 0.04, t + 0.04, 0.0, 0.0];
            let near = [1.0 - t, t, 0.0, 0.0];
            let lf = intention_similarity(&E1, &[&far[..]], &[&E3[..]], 1.0).unwrap();
            let ln = intention_similarity(&E1, &[&near[..]], &[&E3[..]], 1.0).unwrap();
            prop_assert!(ln < lf);
        }
    }
}
