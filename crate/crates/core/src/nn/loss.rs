use ndarray::{Array2, ArrayView2, Zip};

/// Gaussian negative log-likelihood (without the constant) and its adjoints.
#[derive(Clone, Debug)]
pub struct NllTerms {
    pub loss: f64,
    pub d_mu: Array2<f64>,
    pub d_log_sigma: Array2<f64>,
}

/// Sum over all entries of `½((y−μ)/σ)² + log σ`.
pub fn gaussian_nll(y: ArrayView2<f64>, mu: ArrayView2<f64>, log_sigma: ArrayView2<f64>) -> NllTerms {
    let mut d_mu = Array2::zeros(mu.dim());
    let mut d_log_sigma = Array2::zeros(mu.dim());
    let mut loss = 0.0;
    Zip::from(&mut d_mu)
        .and(&mut d_log_sigma)
        .and(&y)
        .and(&mu)
        .and(&log_sigma)
        .for_each(|dm, dl, &y, &m, &ls| {
            let inv_var = (-2.0 * ls).exp();
            let e = m - y;
            loss += 0.5 * e * e * inv_var + ls;
            *dm = e * inv_var;
            *dl = 1.0 - e * e * inv_var;
        });
    NllTerms { loss, d_mu, d_log_sigma }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_mean_unit_scale_is_zero() {
        let y = array![[0.3, -1.2]];
        let t = gaussian_nll(y.view(), y.view(), Array2::zeros((1, 2)).view());
        assert_eq!(t.loss, 0.0);
        assert_eq!(t.d_log_sigma, array![[1.0, 1.0]]);
    }

    #[test]
    fn adjoints_match_symbolic_form() {
        let (y, m, ls) = (0.4, -0.1, 0.3f64);
        let s2 = (2.0 * ls).exp();
        let t = gaussian_nll(array![[y]].view(), array![[m]].view(), array![[ls]].view());
        assert!((t.loss - (0.5 * (y - m) * (y - m) / s2 + ls)).abs() < 1e-15);
        assert!((t.d_mu[[0, 0]] - (m - y) / s2).abs() < 1e-15);
        assert!((t.d_log_sigma[[0, 0]] - (1.0 - (m - y) * (m - y) / s2)).abs() < 1e-15);
    }
}
