//! Reference implementations used only by tests. Each one is written
//! without the crate's own numerics so it can catch their mistakes.

#![allow(dead_code)]

use ktied_core::model::{LayerNoise, PosteriorFamily, VariationalMlp};
use ktied_core::DenseMatrix;

/// Number of eigenvalues of the symmetric `g` strictly below `x`, by the
/// signs of the pivots of `g - xI` (Sylvester's law of inertia).
fn count_below(g: &[Vec<f64>], x: f64) -> usize {
    let n = g.len();
    let mut a: Vec<Vec<f64>> = g.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] -= x;
    }
    let scale = g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut negatives = 0;
    for k in 0..n {
        let mut pivot = a[k][k];
        if pivot == 0.0 {
            pivot = -1e-300 * scale;
        }
        if pivot < 0.0 {
            negatives += 1;
        }
        for i in k + 1..n {
            let f = a[i][k] / pivot;
            for j in k + 1..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    negatives
}

/// Eigenvalues of a symmetric matrix, descending, by bisection on the
/// inertia count.
pub fn symmetric_eigenvalues(g: &[Vec<f64>]) -> Vec<f64> {
    let n = g.len();
    let bound: f64 = g
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        // k-th largest = the value where count_below crosses n - k
        let target = n - k;
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if count_below(g, mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    out
}

/// Singular values of `a` as square roots of the Gram matrix eigenvalues.
pub fn singular_values_via_gram(a: &DenseMatrix) -> Vec<f64> {
    let (m, n) = a.shape();
    let small = m.min(n);
    let mut g = vec![vec![0.0; small]; small];
    for i in 0..small {
        for j in 0..small {
            let mut s = 0.0;
            if n <= m {
                for r in 0..m {
                    s += a.get(r, i) * a.get(r, j);
                }
            } else {
                for c in 0..n {
                    s += a.get(i, c) * a.get(j, c);
                }
            }
            g[i][j] = s;
        }
    }
    symmetric_eigenvalues(&g)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Weighted Monte Carlo estimate of `KL(N(mu, sigma^2) || N(0, sigma_p^2))`
/// summed over entries, with its standard error.
pub fn monte_carlo_kl(
    mu: &[f64],
    sigma: &[f64],
    sigma_p: f64,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = SplitMix(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for (&m, &s) in mu.iter().zip(sigma) {
            let z = rng.normal();
            let w = m + s * z;
            let log_q = -0.5 * z * z - s.ln();
            let log_p = -0.5 * (w / sigma_p) * (w / sigma_p) - sigma_p.ln();
            log_ratio += log_q - log_p;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// SplitMix64 with a polar-method normal, independent of the crate's RNG.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        loop {
            let x = 2.0 * self.uniform() - 1.0;
            let y = 2.0 * self.uniform() - 1.0;
            let r = x * x + y * y;
            if r > 0.0 && r < 1.0 {
                return x * (-2.0 * r.ln() / r).sqrt();
            }
        }
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| scale * self.normal()).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    pub fn positive_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| 0.1 + self.uniform()).collect()
    }
}

/// Scalar-loop MLP forward pass on plain nested vectors.
pub fn naive_forward(kernels: &[Vec<Vec<f64>>], biases: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut h: Vec<Vec<f64>> = x.to_vec();
    for (l, (w, b)) in kernels.iter().zip(biases).enumerate() {
        let last = l + 1 == kernels.len();
        h = h
            .iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| {
                        let mut a = b[j];
                        for (i, &xi) in row.iter().enumerate() {
                            a += xi * w[i][j];
                        }
                        if last || a > 0.0 {
                            a
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
    }
    h
}

pub fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Truncate a 2x2 matrix to rank 1 using the closed-form eigenvectors of
/// `A^T A`, then clip at `floor`. Returns the matrix and the clip count.
pub fn truncate_and_clip_2x2(a: [[f64; 2]; 2], floor: f64) -> ([[f64; 2]; 2], usize) {
    let g00 = a[0][0] * a[0][0] + a[1][0] * a[1][0];
    let g01 = a[0][0] * a[0][1] + a[1][0] * a[1][1];
    let g11 = a[0][1] * a[0][1] + a[1][1] * a[1][1];
    let tr = g00 + g11;
    let det = g00 * g11 - g01 * g01;
    let lambda = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
    // eigenvector of G for lambda
    let (mut v0, mut v1) = if g01.abs() > 1e-300 {
        (g01, lambda - g00)
    } else if g00 >= g11 {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (v0 * v0 + v1 * v1).sqrt();
    v0 /= norm;
    v1 /= norm;
    let mut out = [[0.0; 2]; 2];
    let mut clipped = 0;
    for r in 0..2 {
        let av = a[r][0] * v0 + a[r][1] * v1;
        for (c, v) in [v0, v1].into_iter().enumerate() {
            let x = av * v;
            out[r][c] = if x < floor {
                clipped += 1;
                floor
            } else {
                x
            };
        }
    }
    (out, clipped)
}

/// Relative Frobenius residual of the best rank-1 fit `q p^T`, by
/// alternating least squares.
pub fn rank_one_ls_residual(b: &DenseMatrix) -> f64 {
    let (m, n) = b.shape();
    let mut q: Vec<f64> = (0..m).map(|i| b.row(i).iter().sum::<f64>()).collect();
    let mut p = vec![0.0; n];
    for _ in 0..2000 {
        let qq: f64 = q.iter().map(|x| x * x).sum();
        for j in 0..n {
            p[j] = (0..m).map(|i| b.get(i, j) * q[i]).sum::<f64>() / qq;
        }
        let pp: f64 = p.iter().map(|x| x * x).sum();
        for i in 0..m {
            q[i] = (0..n).map(|j| b.get(i, j) * p[j]).sum::<f64>() / pp;
        }
    }
    let mut res = 0.0;
    let mut tot = 0.0;
    for i in 0..m {
        for j in 0..n {
            let d = b.get(i, j) - q[i] * p[j];
            res += d * d;
            tot += b.get(i, j) * b.get(i, j);
        }
    }
    (res / tot).sqrt()
}

/// Perturb every trainable array so gradients are generic: means of order
/// one, standard deviations between roughly 0.05 and 0.6.
pub fn randomize_params(model: &mut VariationalMlp, seed: u64) {
    let mut rng = SplitMix(seed);
    let tied = matches!(model.layers()[0].family(), PosteriorFamily::KTied { .. });
    for layer in model.layers_mut() {
        let arrays = layer.arrays_mut();
        let count = arrays.len();
        for (a, arr) in arrays.into_iter().enumerate() {
            let is_mean = a == 0 || a == count - 2;
            for x in arr.iter_mut() {
                *x = if is_mean {
                    0.7 * rng.normal()
                } else if tied && (a == 1 || a == 2) {
                    // sigma = sum of k products, keep each factor modest
                    0.5 * (0.2f64).ln() + 0.3 * rng.normal()
                } else {
                    (0.2f64).ln() + 0.4 * rng.normal()
                };
            }
        }
    }
}

pub fn noise_sets(model: &VariationalMlp, samples: usize, seed: u64) -> Vec<Vec<LayerNoise>> {
    let mut rng = ktied_core::SeededRng::new(seed);
    (0..samples).map(|_| model.draw_noise(&mut rng)).collect()
}

/// Central finite difference of `f` at every entry of every array of
/// `model`, in the same order as `VariationalMlp::arrays`.
pub fn finite_difference_gradients(
    model: &VariationalMlp,
    h: f64,
    f: impl Fn(&VariationalMlp) -> f64,
) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = model.arrays().iter().map(|a| a.len()).collect();
    let mut out = Vec::new();
    for (a, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.arrays_mut()[a][i] += h;
            let mut minus = model.clone();
            minus.arrays_mut()[a][i] -= h;
            *gi = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Worst relative error between analytic and numeric gradients, with a
/// small absolute floor in the denominator for entries that are ~0.
pub fn max_relative_error(analytic: &[&[f64]], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (&x, &y) in a.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Mean softmax cross-entropy of a point network, by scalar loops.
pub fn naive_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += (max + z.ln()) - row[y];
    }
    total / labels.len() as f64
}

/// Gradients of [`naive_cross_entropy`] through a ReLU MLP, by scalar loops.
pub fn naive_backprop(
    kernels: &[Vec<Vec<f64>>],
    biases: &[Vec<f64>],
    x: &[Vec<f64>],
    labels: &[usize],
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let layers = kernels.len();
    let batch = x.len() as f64;
    // forward, keeping inputs and pre-activations
    let mut inputs = vec![x.to_vec()];
    let mut pre = Vec::new();
    for l in 0..layers {
        let a: Vec<Vec<f64>> = inputs[l]
            .iter()
            .map(|row| {
                (0..biases[l].len())
                    .map(|j| biases[l][j] + row.iter().enumerate().map(|(i, v)| v * kernels[l][i][j]).sum::<f64>())
                    .collect()
            })
            .collect();
        let h: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()).collect();
        pre.push(a);
        inputs.push(h);
    }
    let mut delta: Vec<Vec<f64>> = pre[layers - 1]
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.iter()
                .enumerate()
                .map(|(c, v)| ((v - max).exp() / z - if c == y { 1.0 } else { 0.0 }) / batch)
                .collect()
        })
        .collect();
    let mut d_kernels = vec![Vec::new(); layers];
    let mut d_biases = vec![Vec::new(); layers];
    for l in (0..layers).rev() {
        let (m, n) = (kernels[l].len(), biases[l].len());
        let mut dw = vec![vec![0.0; n]; m];
        let mut db = vec![0.0; n];
        for (b, row) in delta.iter().enumerate() {
            for j in 0..n {
                db[j] += row[j];
                for i in 0..m {
                    dw[i][j] += inputs[l][b][i] * row[j];
                }
            }
        }
        if l > 0 {
            delta = delta
                .iter()
                .enumerate()
                .map(|(b, row)| {
                    (0..m)
                        .map(|i| {
                            if pre[l - 1][b][i] > 0.0 {
                                (0..n).map(|j| row[j] * kernels[l][i][j]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
        }
        d_kernels[l] = dw;
        d_biases[l] = db;
    }
    (d_kernels, d_biases)
}

/// Closed-form KL of independent Gaussians to `N(0, sigma_p^2)`, written out
/// from the density formula.
pub fn naive_kl(mu: &[f64], sigma: &[f64], sigma_p: f64) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| (sigma_p / s).ln() + (s * s + m * m) / (2.0 * sigma_p * sigma_p) - 0.5)
        .sum()
}
