use nalgebra::DMatrix;

/// Principal components of a row-major `n × dim` matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    /// Column means of the input.
    pub mean: Vec<f64>,
    /// `dim × out_dim`, orthonormal columns ordered by decreasing variance.
    pub basis: DMatrix<f64>,
    /// Variances captured by each basis column.
    pub variances: Vec<f64>,
    /// Row-major `n × out_dim` projection of the centered input. Components
    /// with no variance are zero.
    pub projected: Vec<f64>,
    /// Set when the input has fewer than `out_dim` directions of variance.
    pub rank_deficient: Option<usize>,
}

impl Pca {
    pub fn out_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Projects `features` onto their top `out_dim` principal directions.
///
/// Uses the sample covariance (divided by n − 1). Each basis column is signed
/// so that its largest-magnitude entry is positive, which makes the output
/// deterministic.
pub fn pca_reduce(features: &[f64], n: usize, dim: usize, out_dim: usize) -> Pca {
    assert_eq!(features.len(), n * dim);
    let mut mean = vec![0.0; dim];
    for row in features.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);

    let centered = DMatrix::from_fn(n, dim, |r, c| features[r * dim + c] - mean[c]);
    let denom = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut basis = DMatrix::zeros(dim, out_dim);
    let mut variances = vec![0.0; out_dim];
    let mut rank = 0;
    for (k, &idx) in order.iter().take(out_dim).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        let pivot = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col = -col;
        }
        basis.set_column(k, &col);
        let var = eig.eigenvalues[idx].max(0.0);
        if var > tol {
            variances[k] = var;
            rank += 1;
        }
    }
    let rank_deficient = (rank < out_dim).then_some(rank);
    if let Some(r) = rank_deficient {
        log::warn!("pca: input has rank {r} < {out_dim}; padding with zero components");
    }

    let proj = &centered * &basis;
    let mut projected = vec![0.0; n * out_dim];
    for r in 0..n {
        for k in 0..out_dim {
            if variances[k] > 0.0 {
                projected[r * out_dim + k] = proj[(r, k)];
            }
        }
    }
    Pca {
        mean,
        basis,
        variances,
        projected,
        rank_deficient,
    }
}
