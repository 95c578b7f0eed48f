use hierassim::geomodel::{CovarianceModel, FieldGenerator, GridSpec, HyperParams};

const N: usize = 2000;

fn setup() -> (GridSpec, HyperParams, Vec<Vec<f64>>) {
    let grid = GridSpec::new(16, 16, 4, 100.0, 100.0, 10.0).unwrap();
    let h = HyperParams {
        mu_logk: 3.5,
        sigma_logk: 1.0,
        log10_ar: -1.0,
        corr_len_h: 5.0,
        porosity: 0.2,
    };
    let g = FieldGenerator::new(grid, CovarianceModel::default()).unwrap();
    let fields = (0..N as u64).map(|s| g.generate(&h, s).unwrap().log_k).collect();
    (grid, h, fields)
}

fn model_cov(grid: &GridSpec, h: &HyperParams, a: usize, b: usize) -> f64 {
    let (ai, aj, ak) = grid.coords(a);
    let (bi, bj, bk) = grid.coords(b);
    let dx = ai as f64 - bi as f64;
    let dy = aj as f64 - bj as f64;
    // Vertical lags are stretched by corr_len_h over the unit vertical length.
    let dz = (ak as f64 - bk as f64) * h.corr_len_h;
    let lag = (dx * dx + dy * dy + dz * dz).sqrt();
    h.sigma_logk.powi(2) * (-3.0 * lag / h.corr_len_h).exp()
}

#[test]
fn spatial_mean_is_unbiased() {
    let (grid, h, fields) = setup();
    let n = grid.n_cells();
    let means: Vec<f64> = fields.iter().map(|f| f.iter().sum::<f64>() / n as f64).collect();
    let avg = means.iter().sum::<f64>() / N as f64;
    // Exact variance of the spatial mean under the model covariance.
    let mut var = 0.0;
    for a in 0..n {
        for b in 0..n {
            var += model_cov(&grid, &h, a, b);
        }
    }
    var /= (n * n) as f64;
    let se = (var / N as f64).sqrt();
    assert!((avg - h.mu_logk).abs() < 3.0 * se, "mean {avg}, se {se}");
    let sample_var = means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (N - 1) as f64;
    assert!((sample_var / var - 1.0).abs() < 0.15, "{sample_var} vs {var}");
}

#[test]
fn lagged_covariance_matches_model() {
    let (grid, h, fields) = setup();
    for lag in 1..=3 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for f in &fields {
            for k in 0..grid.nz {
                for j in 0..grid.ny {
                    for i in 0..grid.nx - lag {
                        let a = grid.index(i, j, k);
                        let b = grid.index(i + lag, j, k);
                        sum += (f[a] - h.mu_logk) * (f[b] - h.mu_logk);
                        count += 1;
                    }
                }
            }
        }
        let est = sum / count as f64;
        let model = model_cov(&grid, &h, grid.index(0, 0, 0), grid.index(lag, 0, 0));
        assert!((est / model - 1.0).abs() < 0.10, "lag {lag}: {est} vs {model}");
    }
    // One vertical pair as well.
    let (a, b) = (grid.index(3, 3, 0), grid.index(3, 3, 1));
    let est = fields.iter().map(|f| (f[a] - 3.5) * (f[b] - 3.5)).sum::<f64>() / N as f64;
    let model = model_cov(&grid, &h, a, b);
    assert!((est - model).abs() < 4.0 * (1.0 / N as f64).sqrt(), "vertical {est} vs {model}");
}

#[test]
fn cell_marginals_look_gaussian() {
    let (grid, h, fields) = setup();
    let n = N as f64;
    for c in [0, grid.index(8, 8, 2), grid.index(15, 3, 1), grid.n_cells() - 1] {
        let z: Vec<f64> = fields.iter().map(|f| (f[c] - h.mu_logk) / h.sigma_logk).collect();
        let m = z.iter().sum::<f64>() / n;
        let m2 = z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let m3 = z.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
        let m4 = z.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2) - 3.0;
        assert!(m.abs() < 3.0 / n.sqrt(), "cell {c}: mean {m}");
        assert!((m2 - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "cell {c}: variance {m2}");
        assert!(skew.abs() < 3.0 * (6.0 / n).sqrt(), "cell {c}: skewness {skew}");
        assert!(kurt.abs() < 3.0 * (24.0 / n).sqrt(), "cell {c}: excess kurtosis {kurt}");
    }
}

#[test]
fn same_seed_same_field() {
    let grid = GridSpec::new(6, 5, 3, 1.0, 1.0, 1.0).unwrap();
    let h = HyperParams {
        mu_logk: 2.0,
        sigma_logk: 1.5,
        log10_ar: 0.0,
        corr_len_h: 8.0,
        porosity: 0.2,
    };
    let a = FieldGenerator::new(grid, CovarianceModel::default()).unwrap();
    let b = FieldGenerator::new(grid, CovarianceModel::default()).unwrap();
    let x = a.generate(&h, 42).unwrap();
    assert_eq!(x.log_k, b.generate(&h, 42).unwrap().log_k);
    assert_ne!(x.log_k, a.generate(&h, 43).unwrap().log_k);
}
