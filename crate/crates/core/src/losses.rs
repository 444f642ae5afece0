//! Training objectives over per-pixel probability maps.
//!
//! Each loss averages over all `H * W` pixels and returns its value along
//! with the gradient with respect to the probability map, which the model
//! then chains through its softmax and layers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{clamp_prob, LabelMap, Tensor, PROB_EPS};

pub const MIN_CLASS_WEIGHT: f64 = 0.1;
pub const MAX_CLASS_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    /// Weights used verbatim after clamping into `[0.1, 10]`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("class weights must be finite"));
        }
        Ok(Self(
            weights
                .into_iter()
                .map(|w| w.clamp(MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT))
                .collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Median-frequency balancing: `w_c = clamp(median(f) / max(f_c, 1e-8), 0.1, 10)`.
pub fn class_weights(freqs: &[f64]) -> Result<ClassWeights> {
    if freqs.is_empty() {
        return Err(invalid("class frequencies are empty"));
    }
    if let Some(c) = freqs.iter().position(|f| !f.is_finite() || *f < 0.0) {
        return Err(invalid(format!(
            "frequency of class {c} is {} (must be non-negative)",
            freqs[c]
        )));
    }
    let total: f64 = freqs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("class frequencies sum to {total}, expected 1")));
    }
    let mut sorted = freqs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    ClassWeights::new(freqs.iter().map(|&f| median / f.max(1e-8)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_probs: Tensor,
}

fn map_dims(probs: &Tensor) -> Result<(usize, usize, usize)> {
    match probs.shape() {
        [h, w, c] if *c >= 2 && h * w > 0 => Ok((*h, *w, *c)),
        other => Err(invalid(format!(
            "expected a nonempty [H, W, C] probability map with C >= 2, got {other:?}"
        ))),
    }
}

fn check_labels(labels: &LabelMap, h: usize, w: usize, c: usize) -> Result<()> {
    if labels.shape() != [h, w] {
        return Err(Error::Shape {
            expected: vec![h, w],
            found: labels.shape().to_vec(),
        });
    }
    labels.check_range(c)
}

#[inline]
fn ce_pixel(p: f64) -> (f64, f64) {
    let q = clamp_prob(p);
    (-q.ln(), -1.0 / q)
}

#[inline]
fn nl_pixel(p: f64) -> (f64, f64) {
    let q = clamp_prob(p);
    (-(1.0 - q).ln(), 1.0 / (1.0 - q))
}

/// `mean(-w_y log p_y)`; shared body of CE and CBCE.
fn weighted_ce(probs: &Tensor, labels: &LabelMap, weights: Option<&ClassWeights>) -> Result<LossOutput> {
    let (h, w, c) = map_dims(probs)?;
    check_labels(labels, h, w, c)?;
    if let Some(ws) = weights {
        if ws.len() != c {
            return Err(invalid(format!("{} class weights for {c} classes", ws.len())));
        }
    }
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(vec![h, w, c]);
    let mut total = 0.0;
    for ((row, g), &y) in probs
        .data()
        .chunks_exact(c)
        .zip(grad.data_mut().chunks_exact_mut(c))
        .zip(labels.data())
    {
        let y = y as usize;
        let wy = weights.map_or(1.0, |ws| ws.as_slice()[y]);
        let (l, d) = ce_pixel(row[y]);
        total += wy * l;
        g[y] = wy * d / n;
    }
    Ok(LossOutput {
        value: total / n,
        grad_probs: grad,
    })
}

/// Positive-learning cross-entropy against hard labels.
pub fn pl_ce_loss(probs: &Tensor, labels: &LabelMap) -> Result<LossOutput> {
    weighted_ce(probs, labels, None)
}

/// Class-balanced cross-entropy.
pub fn cbce_loss(probs: &Tensor, labels: &LabelMap, weights: &ClassWeights) -> Result<LossOutput> {
    weighted_ce(probs, labels, Some(weights))
}

/// Negative learning: `mean(-log(1 - p_comp))`.
pub fn nl_loss(probs: &Tensor, comp_labels: &LabelMap) -> Result<LossOutput> {
    let (h, w, c) = map_dims(probs)?;
    check_labels(comp_labels, h, w, c)?;
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(vec![h, w, c]);
    let mut total = 0.0;
    for ((row, g), &y) in probs
        .data()
        .chunks_exact(c)
        .zip(grad.data_mut().chunks_exact_mut(c))
        .zip(comp_labels.data())
    {
        let y = y as usize;
        let (l, d) = nl_pixel(row[y]);
        total += l;
        g[y] = d / n;
    }
    Ok(LossOutput {
        value: total / n,
        grad_probs: grad,
    })
}

/// Maximum squares loss: `mean(-1/2 sum_c p_c^2)`.
pub fn msl_loss(probs: &Tensor) -> Result<LossOutput> {
    let (h, w, _) = map_dims(probs)?;
    let n = (h * w) as f64;
    let value = -0.5 * probs.data().iter().map(|p| p * p).sum::<f64>() / n;
    Ok(LossOutput {
        value,
        grad_probs: probs.map(|p| -p / n),
    })
}

/// Shannon entropy normalized by `ln C`, averaged over pixels.
pub fn entropy_loss(probs: &Tensor) -> Result<LossOutput> {
    let (h, w, c) = map_dims(probs)?;
    let n = (h * w) as f64;
    let norm = (c as f64).ln();
    let mut total = 0.0;
    let grad = probs.map(|p| {
        let q = clamp_prob(p);
        total -= p * q.ln();
        // d/dp of -p ln(clamp(p)); the clamp is flat outside (eps, 1 - eps)
        let interior = p > PROB_EPS && p < 1.0 - PROB_EPS;
        let d = if interior { -(q.ln() + 1.0) } else { -q.ln() };
        d / (n * norm)
    });
    Ok(LossOutput {
        value: total / (n * norm),
        grad_probs: grad,
    })
}

/// Masked combination of positive and negative learning:
/// `mean((1 - M) * CE(y) + lambda * M * NL(y_bar))` over all pixels.
pub fn plnl_loss(
    probs: &Tensor,
    pseudo_labels: &LabelMap,
    comp_labels: &LabelMap,
    invalid_mask: &Tensor,
    lambda_nl: f64,
) -> Result<LossOutput> {
    masked_loss(probs, pseudo_labels, Some((comp_labels, lambda_nl)), invalid_mask)
}

/// Cross-entropy on valid pixels only, still averaged over all pixels.
pub fn masked_pl_loss(probs: &Tensor, pseudo_labels: &LabelMap, invalid_mask: &Tensor) -> Result<LossOutput> {
    masked_loss(probs, pseudo_labels, None, invalid_mask)
}

fn masked_loss(
    probs: &Tensor,
    pseudo_labels: &LabelMap,
    negative: Option<(&LabelMap, f64)>,
    invalid_mask: &Tensor,
) -> Result<LossOutput> {
    let (h, w, c) = map_dims(probs)?;
    check_labels(pseudo_labels, h, w, c)?;
    if let Some((comp, lambda_nl)) = negative {
        check_labels(comp, h, w, c)?;
        if !(lambda_nl >= 0.0 && lambda_nl.is_finite()) {
            return Err(invalid(format!("lambda_nl must be non-negative, got {lambda_nl}")));
        }
    }
    invalid_mask.expect_shape(&[h, w])?;
    if let Some(pixel) = invalid_mask.data().iter().position(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Mask {
            value: invalid_mask.data()[pixel],
            pixel,
        });
    }
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(vec![h, w, c]);
    let mut pl_total = 0.0;
    let mut nl_total = 0.0;
    for (i, ((row, g), (&y, &m))) in probs
        .data()
        .chunks_exact(c)
        .zip(grad.data_mut().chunks_exact_mut(c))
        .zip(pseudo_labels.data().iter().zip(invalid_mask.data()))
        .enumerate()
    {
        if m == 0.0 {
            let (l, d) = ce_pixel(row[y as usize]);
            pl_total += l;
            g[y as usize] = d / n;
        } else if let Some((comp, lambda_nl)) = negative {
            let yb = comp.data()[i] as usize;
            let (l, d) = nl_pixel(row[yb]);
            nl_total += l;
            g[yb] = lambda_nl * d / n;
        }
    }
    let lambda_nl = negative.map_or(0.0, |(_, l)| l);
    Ok(LossOutput {
        value: pl_total / n + lambda_nl * (nl_total / n),
        grad_probs: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error, softmax, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn probs(h: usize, w: usize, rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(vec![h, w, c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    fn labels(h: usize, w: usize, v: &[u32]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    fn uniform(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::full(vec![h, w, c], 1.0 / c as f64)
    }

    #[test]
    fn class_weight_rule() {
        let w = class_weights(&[0.25; 4]).unwrap();
        assert_eq!(w.as_slice(), &[1.0; 4]);
        let w = class_weights(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 1.0, 1.0]);
        let w = class_weights(&[0.999, 0.001, 0.0]).unwrap();
        assert_eq!(w.as_slice()[2], 10.0);
        assert!((w.as_slice()[1] - 1.0).abs() < 1e-12);
        assert!((w.as_slice()[0] - 0.1).abs() < 1e-12);
        assert!(matches!(class_weights(&[1.2, -0.2]), Err(Error::InvalidInput(_))));
        assert!(class_weights(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn pl_analytic_values() {
        let one_hot = probs(1, 2, &[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert!(pl_ce_loss(&one_hot, &labels(1, 2, &[1, 0])).unwrap().value.abs() < 1e-6);
        let half = probs(1, 1, &[&[0.5, 0.5]]);
        assert!((pl_ce_loss(&half, &labels(1, 1, &[0])).unwrap().value - LN_2).abs() < 1e-6);
        for y in 0..4 {
            let v = pl_ce_loss(&uniform(2, 3, 4), &LabelMap::filled(2, 3, y)).unwrap().value;
            assert!((v - 4f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn pl_gradient_shape() {
        let p = probs(1, 2, &[&[0.2, 0.8], &[0.6, 0.4]]);
        let out = pl_ce_loss(&p, &labels(1, 2, &[1, 0])).unwrap();
        let g = out.grad_probs.data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] + 1.0 / (2.0 * 0.8)).abs() < 1e-12);
        assert!((g[2] + 1.0 / (2.0 * 0.6)).abs() < 1e-12);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let err = pl_ce_loss(&uniform(1, 2, 3), &labels(1, 2, &[0, 3])).unwrap_err();
        assert!(matches!(err, Error::Label { label: 3, pixel: 1, .. }));
        assert!(nl_loss(&uniform(1, 1, 3), &labels(1, 1, &[5])).is_err());
        assert!(matches!(
            pl_ce_loss(&uniform(1, 2, 3), &labels(2, 1, &[0, 0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cbce_values() {
        let half = probs(1, 1, &[&[0.5, 0.5]]);
        let w = ClassWeights::new(vec![2.0, 1.0]).unwrap();
        assert!((cbce_loss(&half, &labels(1, 1, &[0]), &w).unwrap().value - 2.0 * LN_2).abs() < 1e-6);
        let one_hot = probs(1, 1, &[&[0.0, 1.0]]);
        assert!(cbce_loss(&one_hot, &labels(1, 1, &[1]), &w).unwrap().value.abs() < 1e-6);
    }

    #[test]
    fn nl_values() {
        let p = probs(1, 1, &[&[0.0, 1.0]]);
        assert!(nl_loss(&p, &labels(1, 1, &[0])).unwrap().value.abs() < 1e-6);
        let v = nl_loss(&p, &labels(1, 1, &[1])).unwrap().value;
        assert!((v + PROB_EPS.ln()).abs() < 1e-6 && v.is_finite());
        let u = nl_loss(&uniform(2, 2, 4), &LabelMap::filled(2, 2, 2)).unwrap().value;
        assert!((u + 0.75f64.ln()).abs() < 1e-6);
        assert!((u - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn msl_values() {
        let one_hot = probs(1, 2, &[&[0.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]]);
        assert!((msl_loss(&one_hot).unwrap().value + 0.5).abs() < 1e-12);
        assert!((msl_loss(&uniform(3, 3, 4)).unwrap().value + 0.125).abs() < 1e-12);
    }

    #[test]
    fn msl_extremes_on_two_class_simplex() {
        let mut best = (f64::INFINITY, 0.0);
        let mut worst = (f64::NEG_INFINITY, 0.0);
        for i in 0..=1000 {
            let q = i as f64 / 1000.0;
            let v = msl_loss(&probs(1, 1, &[&[q, 1.0 - q]])).unwrap().value;
            if v < best.0 {
                best = (v, q);
            }
            if v > worst.0 {
                worst = (v, q);
            }
        }
        assert!(best.1 == 0.0 || best.1 == 1.0);
        assert_eq!(worst.1, 0.5);
    }

    #[test]
    fn entropy_values() {
        let one_hot = probs(1, 2, &[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!(entropy_loss(&one_hot).unwrap().value.abs() < 2e-6);
        assert!((entropy_loss(&uniform(2, 2, 5)).unwrap().value - 1.0).abs() < 1e-6);
        let v = entropy_loss(&probs(1, 1, &[&[0.8, 0.2]])).unwrap().value;
        let expected = -(0.8 * 0.8f64.log2() + 0.2 * 0.2f64.log2());
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 0.72193).abs() < 1e-5);
    }

    #[test]
    fn plnl_reductions_and_composite() {
        let p = probs(1, 2, &[&[0.5, 0.5], &[0.5, 0.5]]);
        let y = labels(1, 2, &[0, 0]);
        let yb = labels(1, 2, &[1, 1]);
        let mask = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = plnl_loss(&p, &y, &yb, &mask, 0.5).unwrap().value;
        assert!((v - (LN_2 + 0.5 * LN_2) / 2.0).abs() < 1e-12);
        assert!((v - 0.51986).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_probs(&mut rng, 2, 3, 4);
        let y = random_labels(&mut rng, 2, 3, 4);
        let yb = random_labels(&mut rng, 2, 3, 4);
        let pl = pl_ce_loss(&p, &y).unwrap();
        let pl_only = plnl_loss(&p, &y, &yb, &Tensor::zeros(vec![2, 3]), 0.7).unwrap();
        assert_eq!(pl.value, pl_only.value);
        assert_eq!(pl.grad_probs, pl_only.grad_probs);
        let nl = nl_loss(&p, &yb).unwrap();
        let nl_only = plnl_loss(&p, &y, &yb, &Tensor::full(vec![2, 3], 1.0), 1.0).unwrap();
        assert_eq!(nl.value, nl_only.value);
        assert_eq!(nl.grad_probs, nl_only.grad_probs);
    }

    #[test]
    fn plnl_rejects_non_binary_mask() {
        let p = uniform(1, 2, 2);
        let y = labels(1, 2, &[0, 1]);
        let mask = Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap();
        assert!(matches!(
            plnl_loss(&p, &y, &y, &mask, 1.0),
            Err(Error::Mask { pixel: 1, .. })
        ));
    }

    fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        let logits = Tensor::new(
            vec![h, w, c],
            (0..h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        softmax(&logits).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u32)).collect()).unwrap()
    }

    fn check_grad(p: &Tensor, loss: impl Fn(&Tensor) -> LossOutput) {
        let analytic = loss(p).grad_probs;
        let shape = p.shape().to_vec();
        let numeric = finite_diff_gradient(
            |x| loss(&Tensor::new(shape.clone(), x.to_vec()).unwrap()).value,
            p.data(),
            FD_STEP,
        )
        .unwrap();
        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            assert!(relative_error(*a, *n) < 1e-4, "coord {i}: {a} vs {n}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..12 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 2 + (seed as usize % 4);
            let p = random_probs(&mut rng, 2, 3, c);
            let y = random_labels(&mut rng, 2, 3, c);
            let yb = random_labels(&mut rng, 2, 3, c);
            let weights = ClassWeights::new((0..c).map(|_| rng.random_range(0.1..10.0)).collect()).unwrap();
            let mask = Tensor::new(
                vec![2, 3],
                (0..6).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect(),
            )
            .unwrap();
            let lambda = rng.random_range(0.0..2.0);
            check_grad(&p, |q| pl_ce_loss(q, &y).unwrap());
            check_grad(&p, |q| cbce_loss(q, &y, &weights).unwrap());
            check_grad(&p, |q| nl_loss(q, &yb).unwrap());
            check_grad(&p, |q| msl_loss(q).unwrap());
            check_grad(&p, |q| entropy_loss(q).unwrap());
            check_grad(&p, |q| plnl_loss(q, &y, &yb, &mask, lambda).unwrap());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn instance() -> impl Strategy<Value = (Tensor, LabelMap, LabelMap, Tensor)> {
            (2usize..6, 1usize..4, 1usize..4, any::<u64>()).prop_map(|(c, h, w, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_probs(&mut rng, h, w, c);
                let y = random_labels(&mut rng, h, w, c);
                let yb = random_labels(&mut rng, h, w, c);
                let m = Tensor::new(
                    vec![h, w],
                    (0..h * w).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect(),
                )
                .unwrap();
                (p, y, yb, m)
            })
        }

        proptest! {
            #[test]
            fn loss_ranges((p, y, yb, _m) in instance()) {
                let c = p.last_dim() as f64;
                prop_assert!(pl_ce_loss(&p, &y).unwrap().value >= 0.0);
                let w = class_weights(&vec![1.0 / c; c as usize]).unwrap();
                prop_assert!(cbce_loss(&p, &y, &w).unwrap().value >= 0.0);
                prop_assert!(nl_loss(&p, &yb).unwrap().value >= 0.0);
                let e = entropy_loss(&p).unwrap().value;
                prop_assert!((0.0..=1.0 + 2e-6).contains(&e));
                let m = msl_loss(&p).unwrap().value;
                prop_assert!(m >= -0.5 - 1e-12 && m <= -1.0 / (2.0 * c) + 1e-12);
            }

            #[test]
            fn unit_weight_cbce_is_bitwise_ce((p, y, _yb, _m) in instance()) {
                let c = p.last_dim();
                let a = pl_ce_loss(&p, &y).unwrap();
                let b = cbce_loss(&p, &y, &ClassWeights::uniform(c)).unwrap();
                prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
                prop_assert_eq!(a.grad_probs, b.grad_probs);
            }

            #[test]
            fn plnl_is_linear_in_lambda((p, y, yb, m) in instance(), lambda in 0.0f64..5.0) {
                let v0 = plnl_loss(&p, &y, &yb, &m, 0.0).unwrap().value;
                let v1 = plnl_loss(&p, &y, &yb, &m, 1.0).unwrap().value;
                let vl = plnl_loss(&p, &y, &yb, &m, lambda).unwrap().value;
                prop_assert!((vl - (v0 + lambda * (v1 - v0))).abs() <= 1e-12);
            }
        }
    }
}
