use ndarray::Array3;
use pfda_core::metrics::{overlap_metrics, surface_distances, surface_metrics, SurfaceMetrics};
use pfda_core::volume::{MaskVolume, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), spacing: Spacing) -> MaskVolume {
    let mut data = Array3::<u8>::zeros(shape);
    let boxes = rng.gen_range(0..3);
    for _ in 0..boxes {
        let lo: Vec<usize> = [shape.0, shape.1, shape.2].iter().map(|&n| rng.gen_range(0..n)).collect();
        let hi: Vec<usize> = [shape.0, shape.1, shape.2]
            .iter()
            .zip(&lo)
            .map(|(&n, &l)| rng.gen_range(l + 1..=n))
            .collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    data[[z, y, x]] = 1;
                }
            }
        }
    }
    let density = rng.gen_range(0.0..0.3);
    for v in data.iter_mut() {
        if rng.gen_bool(density) {
            *v = 1;
        }
    }
    let idx = (rng.gen_range(0..shape.0), rng.gen_range(0..shape.1), rng.gen_range(0..shape.2));
    data[[idx.0, idx.1, idx.2]] = 1;
    MaskVolume::new(data, spacing).unwrap()
}

fn oracle_boundary(m: &MaskVolume) -> Vec<[usize; 3]> {
    let d = m.data();
    let (nz, ny, nx) = d.dim();
    let fg = |z: i64, y: i64, x: i64| {
        z >= 0 && y >= 0 && x >= 0 && (z as usize) < nz && (y as usize) < ny && (x as usize) < nx && d[[z as usize, y as usize, x as usize]] == 1
    };
    let mut out = Vec::new();
    for ((z, y, x), &v) in d.indexed_iter() {
        if v == 0 {
            continue;
        }
        let (z, y, x) = (z as i64, y as i64, x as i64);
        let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if n6.iter().any(|(a, b, c)| !fg(z + a, y + b, x + c)) {
            out.push([z as usize, y as usize, x as usize]);
        }
    }
    out
}

fn oracle_directed(a: &[[usize; 3]], b: &[[usize; 3]], sp: Spacing) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let dz = (p[0] as f64 - q[0] as f64) * sp[0];
                    let dy = (p[1] as f64 - q[1] as f64) * sp[1];
                    let dx = (p[2] as f64 - q[2] as f64) * sp[2];
                    (dz * dz + dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_metrics(a: &MaskVolume, b: &MaskVolume) -> SurfaceMetrics {
    let sp = a.spacing();
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let mut all = oracle_directed(&ba, &bb, sp);
    all.extend(oracle_directed(&bb, &ba, sp));
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = all.len();
    let pos = 0.95 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let hd95 = all[lo] + (all[hi] - all[lo]) * (pos - lo as f64);
    SurfaceMetrics {
        hd: all[n - 1],
        hd95,
        asd: all.iter().sum::<f64>() / n as f64,
    }
}

fn pairs(seed: u64, count: usize) -> Vec<(MaskVolume, MaskVolume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let shape = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16));
            let sp = [rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0)];
            (random_mask(&mut rng, shape, sp), random_mask(&mut rng, shape, sp))
        })
        .collect()
}

#[test]
fn surface_metrics_match_all_pairs_oracle() {
    for (i, (a, b)) in pairs(17, 200).iter().enumerate() {
        let got = surface_metrics(a, b).unwrap();
        let want = oracle_metrics(a, b);
        assert_eq!(got.hd, want.hd, "case {i}: hd");
        assert!((got.hd95 - want.hd95).abs() <= 1e-12 * want.hd95.max(1.0), "case {i}: hd95 {} vs {}", got.hd95, want.hd95);
        assert!((got.asd - want.asd).abs() <= 1e-12 * want.asd.max(1.0), "case {i}: asd {} vs {}", got.asd, want.asd);
        assert!(got.asd <= got.hd95 + 1e-12 && got.hd95 <= got.hd, "case {i}: ordering {got:?}");

        let (ab, ba) = surface_distances(a, b).unwrap();
        assert_eq!(ab.len(), oracle_boundary(a).len());
        assert_eq!(ba.len(), oracle_boundary(b).len());
    }
}

#[test]
fn surface_metrics_are_symmetric() {
    for (a, b) in pairs(3, 50) {
        let (x, y) = (surface_metrics(&a, &b).unwrap(), surface_metrics(&b, &a).unwrap());
        assert_eq!(x.hd, y.hd);
        assert_eq!(x.hd95, y.hd95);
        assert!((x.asd - y.asd).abs() <= 1e-12 * x.asd.max(1.0));
    }
}

#[test]
fn spacing_scale_equivariance() {
    let c = 2.7;
    for (a, b) in pairs(8, 50) {
        let sp = a.spacing();
        let scaled = [sp[0] * c, sp[1] * c, sp[2] * c];
        let rescale = |m: &MaskVolume| MaskVolume::new(m.data().clone(), scaled).unwrap();
        let (sa, sb) = (rescale(&a), rescale(&b));
        let (x, y) = (surface_metrics(&a, &b).unwrap(), surface_metrics(&sa, &sb).unwrap());
        for (u, v) in [(x.hd, y.hd), (x.hd95, y.hd95), (x.asd, y.asd)] {
            assert!((c * u - v).abs() <= 1e-12 * v.max(1.0), "{u} * {c} vs {v}");
        }
        let (o1, o2) = (overlap_metrics(&a, &b).unwrap(), overlap_metrics(&sa, &sb).unwrap());
        assert_eq!(o1.dice.to_bits(), o2.dice.to_bits());
        assert_eq!(o1.precision.to_bits(), o2.precision.to_bits());
        assert_eq!(o1.recall.to_bits(), o2.recall.to_bits());
    }
}
