mod common;

use common::SplitMix;
use ktied_core::analysis::{
    analyze_model, compress_model, compress_sigma, kronecker_diag_factorize, spectrum, truncate_rank,
};
use ktied_core::model::{MlpArchitecture, PosteriorFamily, PriorSpec, VariationalMlp};
use ktied_core::variational::tied_sigma;
use ktied_core::{DenseMatrix, Error, SeededRng};

#[test]
fn tied_sigma_has_rank_two_spectrum() {
    let mut g = SplitMix(4);
    let log_u = g.matrix(7, 2, 0.5);
    let log_v = g.matrix(5, 2, 0.5);
    let r = spectrum(&tied_sigma(&log_u, &log_v).unwrap()).unwrap();
    assert!(r.cumulative_fractions[1] >= 1.0 - 1e-10);
}

#[test]
fn two_by_two_clamp_count_matches_brute_force() {
    let cases = [
        [[0.3, 0.01], [0.01, 0.3]],
        [[0.5, 0.02], [0.03, 0.4]],
        [[0.2, 0.2], [0.2, 0.2]],
        [[1.0, 0.001], [0.002, 0.9]],
    ];
    for a in cases {
        let m = DenseMatrix::from_rows(&a).unwrap();
        for floor in [0.0, 0.05] {
            let ours = compress_sigma(&m, 1, floor).unwrap();
            let (oracle, clipped) = common::truncate_and_clip_2x2(a, floor);
            assert_eq!(ours.clamped_count, clipped, "{a:?} floor {floor}");
            for r in 0..2 {
                for c in 0..2 {
                    assert!((ours.matrix.get(r, c) - oracle[r][c]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn eckart_young_before_clamping() {
    let mut g = SplitMix(8);
    for _ in 0..10 {
        let a = g.matrix(8, 6, 1.0).map(|x| x.abs() + 0.01);
        let gamma = common::singular_values_via_gram(&a);
        for k in 1..6 {
            let err = a.sub(&truncate_rank(&a, k).unwrap()).unwrap().frobenius_norm();
            let tail = gamma[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((err - tail).abs() <= 1e-8 * tail);
        }
    }
}

#[test]
fn compress_rank_bounds() {
    let a = DenseMatrix::filled(3, 4, 0.1);
    assert_eq!(compress_sigma(&a, 0, 0.0).unwrap_err(), Error::InvalidRank { rank: 0, max: 3 });
    let full = compress_sigma(&a.map(|x| x + 0.01), 3, 0.0).unwrap();
    assert_eq!(full.clamped_count, 0);
}

#[test]
fn kronecker_random_rank_one_and_rank_two() {
    let mut g = SplitMix(12);
    for _ in 0..100 {
        let (m, n) = (2 + (g.next_u64() % 5) as usize, 2 + (g.next_u64() % 5) as usize);
        let b = DenseMatrix::outer(&g.positive_vec(m), &g.positive_vec(n));
        let f = kronecker_diag_factorize(&b, 1e-6).unwrap().unwrap();
        let q_norm: f64 = f.q.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((q_norm - 1.0).abs() < 1e-12);
        assert!(b.sub(&DenseMatrix::outer(&f.q, &f.p)).unwrap().frobenius_norm() < 1e-10 * b.frobenius_norm());

        let c = b
            .zip_map(&DenseMatrix::outer(&g.positive_vec(m), &g.positive_vec(n)), |x, y| x + y)
            .unwrap();
        let gamma = common::singular_values_via_gram(&c);
        if gamma[1] >= 0.05 * gamma[0] {
            assert!(kronecker_diag_factorize(&c, 1e-6).unwrap().is_none());
            assert!(common::rank_one_ls_residual(&c) > 1e-6);
        }
    }
}

fn arch() -> MlpArchitecture {
    MlpArchitecture::new(vec![10, 8, 6, 3]).unwrap()
}

#[test]
fn tied_model_sigma_spectra_are_rank_two() {
    let m = VariationalMlp::init(arch(), PosteriorFamily::KTied { k: 2 }, PriorSpec::default(), &mut SeededRng::new(2)).unwrap();
    for s in analyze_model(&m).unwrap() {
        assert!(s.sigmas.cumulative_at(2) >= 1.0 - 1e-10);
    }
}

#[test]
fn fresh_mean_field_sigma_is_nearly_rank_one() {
    let m = VariationalMlp::init(arch(), PosteriorFamily::MeanField, PriorSpec::default(), &mut SeededRng::new(2)).unwrap();
    for s in analyze_model(&m).unwrap() {
        assert!(s.sigmas.variance_fractions[0] > 0.98, "{:?}", s.sigmas.variance_fractions);
        assert!(s.means.variance_fractions[0] < s.sigmas.variance_fractions[0]);
    }
}

#[test]
fn compress_model_full_rank_is_identity_and_tied_is_rejected() {
    let square = MlpArchitecture::new(vec![3, 4, 3]).unwrap();
    let m = VariationalMlp::init(square, PosteriorFamily::MeanField, PriorSpec::default(), &mut SeededRng::new(3)).unwrap();
    let (c, clamped) = compress_model(&m, 3, 0.0).unwrap();
    assert_eq!(clamped, 0);
    for (a, b) in m.layers().iter().zip(c.layers()) {
        assert!(a.kernel_sigma().max_abs_diff(&b.kernel_sigma()).unwrap() < 1e-10);
    }
    assert_eq!(compress_model(&m, 4, 0.0).unwrap_err(), Error::InvalidRank { rank: 4, max: 3 });
    assert_eq!(compress_model(&m, 0, 0.0).unwrap_err(), Error::InvalidRank { rank: 0, max: 3 });
    let t = VariationalMlp::init(arch(), PosteriorFamily::KTied { k: 1 }, PriorSpec::default(), &mut SeededRng::new(3)).unwrap();
    assert!(matches!(compress_model(&t, 1, 0.0), Err(Error::InvalidInput(_))));
}

#[test]
fn compress_model_caps_rank_per_layer() {
    let m = VariationalMlp::init(arch(), PosteriorFamily::MeanField, PriorSpec::default(), &mut SeededRng::new(5)).unwrap();
    let mins: Vec<usize> = m.layers().iter().map(|l| l.shape().0.min(l.shape().1)).collect();
    let k = mins[mins.len() - 1];
    let (c, _) = compress_model(&m, k, 0.0).unwrap();
    for ((a, b), &min) in m.layers().iter().zip(c.layers()).zip(&mins) {
        let expected = truncate_rank(&a.kernel_sigma(), k.min(min)).unwrap();
        assert!(b.kernel_sigma().max_abs_diff(&expected).unwrap() < 1e-10);
        if min <= k {
            assert!(b.kernel_sigma().max_abs_diff(&a.kernel_sigma()).unwrap() < 1e-10);
        }
    }
    let widest = *mins.iter().max().unwrap();
    assert!(compress_model(&m, widest, 0.0).is_ok());
    assert!(compress_model(&m, widest + 1, 0.0).is_err());
}
