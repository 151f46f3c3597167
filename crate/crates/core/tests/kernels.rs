use proptest::prelude::*;
use rand::Rng;
use rvafm::ops::{self, Conv2dGeometry};
use rvafm::{rng, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * ph - kh) / sh + 1;
    let wo = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            let ix = (ox * sw + dx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(iy as usize * w + ix as usize) * cin + ci];
                            acc += xv * k[((co * cin + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    (out, ho, wo)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng::stream(1, "matmul-oracle");
    for _ in 0..200 {
        let (m, k, n) = (r.gen_range(1..8), r.gen_range(1..8), r.gen_range(1..8));
        let a = Tensor::<f64>::uniform(vec![m, k], -2.0, 2.0, &mut r).unwrap();
        let b = Tensor::<f64>::uniform(vec![k, n], -2.0, 2.0, &mut r).unwrap();
        let got = ops::matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[m, n]);
        assert!(close(got.data(), &naive_matmul(a.data(), b.data(), m, k, n), 1e-12));
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng::stream(2, "conv2d-oracle");
    for case in 0..200 {
        let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
        let (ph, pw) = (r.gen_range(0..kh), r.gen_range(0..kw));
        let (sh, sw) = (r.gen_range(1..3), r.gen_range(1..3));
        let h = r.gen_range(kh.max(1)..8);
        let w = r.gen_range(kw.max(1)..8);
        let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = Tensor::<f64>::uniform(vec![h, w, cin], -1.0, 1.0, &mut r).unwrap();
        let k = Tensor::<f64>::uniform(vec![cout, cin, kh, kw], -1.0, 1.0, &mut r).unwrap();
        let b = Tensor::<f64>::uniform(vec![cout], -1.0, 1.0, &mut r).unwrap();
        let geom = Conv2dGeometry { stride: (sh, sw), padding: (ph, pw) };
        let got = ops::conv2d(&x, &k, &b, geom).unwrap();
        let (want, ho, wo) =
            naive_conv2d(x.data(), (h, w, cin), k.data(), (cout, kh, kw), b.data(), (sh, sw), (ph, pw));
        assert_eq!(got.shape(), &[ho, wo, cout], "case {case}");
        assert!(close(got.data(), &want, 1e-12), "case {case}");
    }
}

#[test]
fn conv1d_matches_direct_loops() {
    let mut r = rng::stream(3, "conv1d-oracle");
    for case in 0..200 {
        let ks = r.gen_range(1..6);
        let pad = r.gen_range(0..=ks / 2);
        let stride = r.gen_range(1..3);
        let l = r.gen_range(ks..12);
        let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = Tensor::<f64>::uniform(vec![l, cin], -1.0, 1.0, &mut r).unwrap();
        let k = Tensor::<f64>::uniform(vec![cout, cin, ks], -1.0, 1.0, &mut r).unwrap();
        let b = Tensor::<f64>::uniform(vec![cout], -1.0, 1.0, &mut r).unwrap();
        let got = ops::conv1d(&x, &k, &b, stride, pad).unwrap();
        let (want, _, wo) =
            naive_conv2d(x.data(), (1, l, cin), k.data(), (cout, 1, ks), b.data(), (1, stride), (0, pad));
        assert_eq!(got.shape(), &[wo, cout], "case {case}");
        assert!(close(got.data(), &want, 1e-12), "case {case}");
    }
}

#[test]
fn adaptive_pool_matches_brute_force() {
    let mut r = rng::stream(4, "pool-oracle");
    for _ in 0..200 {
        let (h, w, c) = (r.gen_range(1..4), r.gen_range(1..12), r.gen_range(1..3));
        let target = r.gen_range(1..=w);
        let x = Tensor::<f64>::uniform(vec![h, w, c], -1.0, 1.0, &mut r).unwrap();
        let (got, _) = ops::adaptive_max_pool_width(&x, target).unwrap();
        for row in 0..h {
            for bin in 0..target {
                let start = (bin as f64 * w as f64 / target as f64).floor() as usize;
                let end = ((bin + 1) as f64 * w as f64 / target as f64).ceil() as usize;
                for ch in 0..c {
                    let want = (start..end).map(|col| x.data()[(row * w + col) * c + ch]).fold(f64::MIN, f64::max);
                    assert_eq!(got.data()[(row * target + bin) * c + ch], want);
                }
            }
        }
    }
}

#[test]
fn pool_bins_cover_every_column() {
    for w in 1..20 {
        for t in 1..=w {
            let mut seen = vec![false; w];
            for i in 0..t {
                let (s, e) = ops::pool_bin(i, w, t);
                assert!(s < e && e <= w);
                seen[s..e].iter_mut().for_each(|v| *v = true);
            }
            assert!(seen.iter().all(|&v| v), "w={w} t={t}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
        let rows = vals.len().div_ceil(cols);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let p = ops::softmax(&x).unwrap();
        let lp = ops::log_softmax(&x).unwrap();
        for r in 0..rows {
            let row = &p.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let lrow = &lp.data()[r * cols..(r + 1) * cols];
            for (l, v) in lrow.iter().zip(row) {
                prop_assert!((l.exp() - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(vals in prop::collection::vec(-10.0f64..10.0, 1..8), shift in -100.0f64..100.0) {
        let n = vals.len();
        let a = Tensor::new(vec![n], vals.clone()).unwrap();
        let b = Tensor::new(vec![n], vals.iter().map(|v| v + shift).collect()).unwrap();
        let (pa, pb) = (ops::softmax(&a).unwrap(), ops::softmax(&b).unwrap());
        prop_assert!(pa.max_abs_diff(&pb).unwrap() < 1e-12);
    }
}
