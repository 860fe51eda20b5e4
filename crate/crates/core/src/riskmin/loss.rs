/// Logistic loss `ln(1 + exp(-z))` for margin `z = label * score`.
pub fn logistic_loss(margin: f64) -> f64 {
    if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

/// Derivative of [`logistic_loss`] with respect to the margin.
pub fn logistic_loss_grad(margin: f64) -> f64 {
    -sigmoid(-margin)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `l(score, +1)`.
pub(crate) fn loss_pos(score: f64) -> f64 {
    logistic_loss(score)
}

/// `l(score, -1)`.
pub(crate) fn loss_neg(score: f64) -> f64 {
    logistic_loss(-score)
}

pub(crate) fn dloss_pos(score: f64) -> f64 {
    logistic_loss_grad(score)
}

pub(crate) fn dloss_neg(score: f64) -> f64 {
    -logistic_loss_grad(-score)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert!((logistic_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((logistic_loss(5.0) - 0.006715348489117967).abs() < 1e-15);
        let far = logistic_loss(-50.0);
        assert!(far.is_finite() && (far - 50.0).abs() < 1e-12);
        assert!(logistic_loss(-1000.0).is_finite());
        assert!(logistic_loss(1000.0) >= 0.0);
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        for z in [-30.0, -2.0, -0.1, 0.0, 0.7, 4.0, 25.0] {
            let h = 1e-6;
            let fd = (logistic_loss(z + h) - logistic_loss(z - h)) / (2.0 * h);
            assert!((fd - logistic_loss_grad(z)).abs() < 1e-8, "z={z}");
            let fd = (loss_neg(z + h) - loss_neg(z - h)) / (2.0 * h);
            assert!((fd - dloss_neg(z)).abs() < 1e-8, "z={z}");
        }
    }
}
