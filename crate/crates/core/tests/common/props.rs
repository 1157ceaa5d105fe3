//! Invariants run as proptest properties through an explicit runner, so the
//! acceptance target can report each one.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use hpm::hpp::{bin_rows, pool_bin, slice_bins, Pooling};
use hpm::metrics::{average_precision, cmc_curve, first_hit};
use hpm::nn::softmax_cross_entropy;
use hpm::retrieval::{distance_matrix, normalize, rank};
use hpm::trainer::flip_horizontal;
use hpm::{Rng, Tensor};

pub const CASES: u32 = 256;

#[derive(Debug, Clone)]
pub struct PropCheck {
    pub name: &'static str,
    pub cases: u32,
    pub result: Result<(), String>,
}

impl PropCheck {
    pub fn passed(&self) -> bool {
        self.cases >= 200 && self.result.is_ok()
    }
}

fn run<S: Strategy>(
    name: &'static str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> PropCheck {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    PropCheck {
        name,
        cases: CASES,
        result: runner.run(&strategy, test).map_err(|e| e.to_string()),
    }
}

fn tensor(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::uniform(&mut Rng::new(seed), shape, -1.0, 1.0).unwrap()
}

fn vectors(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..d).map(|_| rng.uniform_f32(-1.0, 1.0)).collect()).collect()
}

/// Stacking the bins of any scale back together gives the map again, and
/// the bin row ranges tile `[0, H)`.
pub fn bin_partition() -> PropCheck {
    let strategy = (1usize..=3, 1usize..=4, prop::sample::select(vec![1usize, 2, 4, 8]), 1usize..=3, 1usize..=4, any::<u64>());
    run("bin partition reconstruction", strategy, |(n, c, s, rows, w, seed)| {
        let h = s * rows;
        let f = tensor(seed, &[n, c, h, w]);
        let bins = slice_bins(&f, s).unwrap();
        prop_assert_eq!(bins.len(), s);
        let mut rebuilt = vec![0.0f32; f.len()];
        for (j, bin) in bins.iter().enumerate() {
            let (r0, r1) = bin_rows(h, s, j);
            prop_assert_eq!(r1 - r0, rows);
            prop_assert_eq!(r0, j * rows);
            for (plane, src) in rebuilt.chunks_mut(h * w).zip(bin.data().chunks(rows * w)) {
                plane[r0 * w..r1 * w].copy_from_slice(src);
            }
        }
        prop_assert_eq!(&rebuilt[..], f.data());
        Ok(())
    })
}

/// Rescaling raw descriptors by positive factors before normalisation does
/// not reorder the gallery (beyond distances closer than 1e-5).
pub fn ranking_scale_invariance() -> PropCheck {
    let strategy = (1usize..=8, 2usize..=10, any::<u64>(), prop::collection::vec(0.01f32..100.0, 11));
    run("descriptor scale invariance of ranking", strategy, |(d, g, seed, factors)| {
        let raw = vectors(seed, g + 1, d);
        if raw.iter().any(|v| v.iter().all(|&x| x.abs() < 1e-3)) {
            return Ok(());
        }
        let unit: Vec<Vec<f32>> = raw.iter().map(|v| normalize(v).unwrap()).collect();
        let scaled: Vec<Vec<f32>> = raw
            .iter()
            .zip(&factors)
            .map(|(v, &c)| normalize(&v.iter().map(|x| x * c).collect::<Vec<_>>()).unwrap())
            .collect();
        let d0 = distance_matrix(&unit[..1], &unit[1..]).unwrap();
        let d1 = distance_matrix(&scaled[..1], &scaled[1..]).unwrap();
        let valid = vec![true; g];
        let order = rank(d1.data(), &valid).unwrap();
        let mut pos = vec![0; g];
        for (p, &i) in order.iter().enumerate() {
            pos[i] = p;
        }
        for i in 0..g {
            for j in 0..g {
                if d0.data()[i] + 1e-5 < d0.data()[j] {
                    prop_assert!(pos[i] < pos[j], "items {} and {} swapped", i, j);
                }
            }
        }
        Ok(())
    })
}

fn relevance_lists() -> impl Strategy<Value = (Vec<Vec<bool>>, usize)> {
    (prop::collection::vec(prop::collection::vec(any::<bool>(), 1..12), 1..8), 1usize..12)
}

pub fn cmc_monotone() -> PropCheck {
    run("CMC monotonicity", relevance_lists(), |(lists, k)| {
        let cmc = cmc_curve(&lists, k);
        prop_assert_eq!(cmc.len(), k);
        for w in cmc.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(cmc.iter().all(|&v| (0.0..=1.0).contains(&v)));
        Ok(())
    })
}

pub fn ap_in_unit_interval() -> PropCheck {
    run("AP in [0, 1]", prop::collection::vec(any::<bool>(), 0..20), |flags| {
        match average_precision(&flags) {
            Some(ap) => {
                prop_assert!((0.0..=1.0).contains(&ap));
                // the first hit alone bounds AP from below
                let r = first_hit(&flags).unwrap() + 1;
                let hits = flags.iter().filter(|&&f| f).count();
                prop_assert!(ap >= 1.0 / (r as f64 * hits as f64) - 1e-12);
            }
            None => prop_assert!(!flags.contains(&true)),
        }
        Ok(())
    })
}

pub fn flip_involution() -> PropCheck {
    run("flip involution", (1usize..=3, 1usize..=6, 1usize..=7, any::<u64>()), |(c, h, w, seed)| {
        let img = tensor(seed, &[c, h, w]);
        let once = flip_horizontal(&img).unwrap();
        prop_assert_eq!(&flip_horizontal(&once).unwrap(), &img);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let a = img.data()[(ch * h + y) * w + x];
                    let b = once.data()[(ch * h + y) * w + (w - 1 - x)];
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        Ok(())
    })
}

pub fn index_round_trip() -> PropCheck {
    run("flat index round trip", (prop::collection::vec(1usize..=5, 4), any::<u64>()), |(shape, seed)| {
        let t = Tensor::zeros(&shape).unwrap();
        let mut rng = Rng::new(seed);
        let offset = rng.index(t.len());
        let idx = t.unflatten_index(offset).unwrap();
        prop_assert_eq!(t.flatten_index(idx).unwrap(), offset);
        Ok(())
    })
}

pub fn add_commutes() -> PropCheck {
    run("add commutativity", (prop::collection::vec(1usize..=4, 1..=4), any::<u64>()), |(shape, seed)| {
        let a = tensor(seed, &shape);
        let b = tensor(seed ^ 0x9e37, &shape);
        prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        Ok(())
    })
}

pub fn pooling_dominance() -> PropCheck {
    run("max pooling dominates average", (1usize..=3, 1usize..=4, 1usize..=4, 1usize..=4, any::<u64>()), |(n, c, h, w, seed)| {
        let bin = tensor(seed, &[n, c, h, w]);
        let avg = pool_bin(&bin, Pooling::Avg).unwrap();
        let max = pool_bin(&bin, Pooling::Max).unwrap();
        let both = pool_bin(&bin, Pooling::AvgPlusMax).unwrap();
        for ((&a, &m), &s) in avg.data().iter().zip(max.data()).zip(both.data()) {
            prop_assert!(m >= a - 1e-6);
            prop_assert!((s - (a + m)).abs() <= 1e-6);
        }
        Ok(())
    })
}

pub fn distance_symmetry() -> PropCheck {
    run("distance symmetry", (1usize..=6, 1usize..=10, any::<u64>()), |(n, d, seed)| {
        let v = vectors(seed, n, d);
        let m = distance_matrix(&v, &v).unwrap();
        for i in 0..n {
            prop_assert_eq!(m.data()[i * n + i], 0.0);
            for j in 0..n {
                prop_assert!(m.data()[i * n + j] >= 0.0);
                prop_assert_eq!(m.data()[i * n + j], m.data()[j * n + i]);
            }
        }
        Ok(())
    })
}

/// On unit vectors squared Euclidean distance is `2 - 2 cos`, so the
/// ranking equals the cosine ranking.
pub fn cosine_ranking_equivalence() -> PropCheck {
    run("euclidean and cosine rankings agree", (1usize..=8, 2usize..=10, any::<u64>()), |(d, g, seed)| {
        let v = vectors(seed, g + 1, d);
        if v.iter().any(|x| x.iter().all(|&e| e.abs() < 1e-3)) {
            return Ok(());
        }
        let unit: Vec<Vec<f32>> = v.iter().map(|x| normalize(x).unwrap()).collect();
        let dist = distance_matrix(&unit[..1], &unit[1..]).unwrap();
        let cos: Vec<f64> = unit[1..]
            .iter()
            .map(|x| x.iter().zip(&unit[0]).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum())
            .collect();
        let order = rank(dist.data(), &vec![true; g]).unwrap();
        for w in order.windows(2) {
            prop_assert!(cos[w[0]] + 1e-6 >= cos[w[1]]);
        }
        Ok(())
    })
}

pub fn normalize_unit_norm() -> PropCheck {
    run("normalised descriptors have unit norm", (1usize..=64, any::<u64>()), |(d, seed)| {
        let v = &vectors(seed, 1, d)[0];
        if v.iter().all(|&x| x.abs() < 1e-3) {
            return Ok(());
        }
        let u = normalize(v).unwrap();
        let norm = u.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-5);
        Ok(())
    })
}

pub fn cross_entropy_shape() -> PropCheck {
    run("cross entropy is non-negative with zero-sum gradient", (prop::collection::vec(-20.0f32..20.0, 2..10), any::<prop::sample::Index>()), |(logits, label)| {
        let y = label.index(logits.len());
        let (loss, grad) = softmax_cross_entropy(&logits, y).unwrap();
        prop_assert!(loss >= 0.0);
        let s: f64 = grad.iter().map(|&g| f64::from(g)).sum();
        prop_assert!(s.abs() <= 1e-6);
        Ok(())
    })
}

pub fn serialization_round_trip() -> PropCheck {
    run("tensor serialization round trip", (prop::collection::vec(1usize..=4, 1..=4), any::<u64>()), |(shape, seed)| {
        let t = tensor(seed, &shape);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        prop_assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
        Ok(())
    })
}

/// The invariants the acceptance suite gates on.
pub fn gated_suite() -> Vec<PropCheck> {
    vec![
        bin_partition(),
        ranking_scale_invariance(),
        cmc_monotone(),
        ap_in_unit_interval(),
        flip_involution(),
    ]
}
