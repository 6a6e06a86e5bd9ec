use pfda_core::adaptation::{median_bandwidths, mmd2_median_with_grad, mmd2_unbiased, KernelBandwidths};
use pfda_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
        .collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}

fn oracle_kernel(a: &[f64], b: &[f64], sigmas: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for k in 0..a.len() {
        d2 += (a[k] - b[k]).powi(2);
    }
    let mut s = 0.0;
    for sigma in sigmas {
        s += (-d2 / (2.0 * sigma * sigma)).exp();
    }
    s
}

/// Straight double loops over ordered pairs, self-pairs skipped.
fn oracle_mmd2(fs: &[Vec<f64>], ft: &[Vec<f64>], sigmas: &[f64]) -> f64 {
    let (ns, nt) = (fs.len() as f64, ft.len() as f64);
    let mut ss = 0.0;
    for i in 0..fs.len() {
        for j in 0..fs.len() {
            if i != j {
                ss += oracle_kernel(&fs[i], &fs[j], sigmas);
            }
        }
    }
    let mut tt = 0.0;
    for i in 0..ft.len() {
        for j in 0..ft.len() {
            if i != j {
                tt += oracle_kernel(&ft[i], &ft[j], sigmas);
            }
        }
    }
    let mut st = 0.0;
    for a in fs {
        for b in ft {
            st += oracle_kernel(a, b, sigmas);
        }
    }
    ss / (ns * (ns - 1.0)) + tt / (nt * (nt - 1.0)) - 2.0 * st / (ns * nt)
}

fn oracle_sigmas(fs: &[Vec<f64>], ft: &[Vec<f64>]) -> Vec<f64> {
    let all: Vec<&Vec<f64>> = fs.iter().chain(ft).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in 0..i {
            let s: f64 = all[i].iter().zip(all[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { (d[m / 2 - 1] + d[m / 2]) / 2.0 };
    let base = if med == 0.0 { 1.0 } else { med };
    [0.25, 1.0 / 2f64.sqrt(), 1.0, 2f64.sqrt(), 2.0].iter().map(|m| m * base).collect()
}

#[test]
fn estimator_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let ns = rng.gen_range(2..=64);
        let nt = rng.gen_range(2..=64);
        let dim = rng.gen_range(1..=128);
        let shift = if trial % 2 == 0 { 0.0 } else { rng.gen_range(0.1..2.0) };
        let fs = gaussian_set(&mut rng, ns, dim, 0.0);
        let ft = gaussian_set(&mut rng, nt, dim, shift);
        let sigmas = oracle_sigmas(&fs, &ft);
        let expected = oracle_mmd2(&fs, &ft, &sigmas);
        let scale = expected.abs().max(1e-6);

        let bw = median_bandwidths(&[refs(&fs), refs(&ft)].concat()).unwrap();
        for (a, b) in bw.sigmas.iter().zip(&sigmas) {
            assert!((a - b).abs() <= 1e-12 * b, "sigma {a} vs {b}");
        }
        let fixed = mmd2_unbiased(&refs(&fs), &refs(&ft), &sigmas).unwrap();
        let median = mmd2_median_with_grad(&refs(&fs), &refs(&ft)).unwrap().value;

        let mut g = Graph::new();
        let flat: Vec<f64> = fs.iter().chain(&ft).flatten().copied().collect();
        let x = g.constant(Tensor::from_vec(&[ns + nt, dim], flat).unwrap());
        let src: Vec<usize> = (0..ns).collect();
        let tgt: Vec<usize> = (ns..ns + nt).collect();
        let (m, _) = g.mmd2(x, &src, &tgt).unwrap();
        let op = g.value(m).item();

        for (label, got) in [("fixed", fixed), ("median", median), ("graph", op)] {
            let rel = (got - expected).abs() / scale;
            assert!(rel < 1e-9, "trial {trial} {label}: {got} vs {expected} (rel {rel:e})");
            worst = worst.max(rel);
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn hand_example() {
    let fs: Vec<&[f64]> = vec![&[0.0], &[0.0]];
    let ft: Vec<&[f64]> = vec![&[1.0], &[1.0]];
    let v = mmd2_unbiased(&fs, &ft, &[1.0]).unwrap();
    assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-10);
    assert!((v - 0.78694).abs() < 1e-5);
}

#[test]
fn unbiased_under_equal_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 1000;
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let pool = gaussian_set(&mut rng, 16, 4, 0.0);
            mmd2_median_with_grad(&refs(&pool[..8]), &refs(&pool[8..])).unwrap().value
        })
        .collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    eprintln!("mean {mean:e}, standard error {se:e}");
    assert!(mean.abs() <= 3.0 * se, "mean {mean} outside 3 SE ({se})");
}

#[test]
fn grows_with_mean_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 100;
    let mut ordered = 0;
    for _ in 0..trials {
        let est: Vec<f64> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&delta| {
                let fs = gaussian_set(&mut rng, 256, 1, 0.0);
                let ft = gaussian_set(&mut rng, 256, 1, delta);
                mmd2_median_with_grad(&refs(&fs), &refs(&ft)).unwrap().value
            })
            .collect();
        if est[0] < est[1] && est[1] < est[2] {
            ordered += 1;
        }
    }
    assert!(ordered * 100 >= 95 * trials, "{ordered}/{trials} trials increasing");
}

#[test]
fn bandwidths_from_one_pair() {
    let bw = median_bandwidths(&[&[0.0], &[2.0]]).unwrap();
    assert_eq!(bw, KernelBandwidths::from_base(2.0));
}
