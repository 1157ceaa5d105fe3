//! Randomised comparisons of crate kernels against the naive reference.

use hpm::hpp::{hpm_loss, pool_bin, Pooling};
use hpm::metrics::evaluate;
use hpm::nn::Conv2d;
use hpm::retrieval::{distance_matrix, Descriptor};
use hpm::{Rng, Tensor};

use super::reference::{self as r64, A64};

pub const INSTANCES: usize = 128;
pub const TOL_POOL_AVG: f64 = 1e-6;
pub const TOL_MATMUL_REL: f64 = 1e-6;
pub const TOL_CONV: f64 = 1e-5;
pub const TOL_DISTANCE: f64 = 1e-5;
pub const TOL_LOSS_REL: f64 = 1e-5;
pub const TOL_LOSS_GRAD: f64 = 1e-6;
pub const TOL_EVAL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    /// Largest error divided by its tolerance; `<= 1` passes.
    pub worst: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.instances >= 100 && self.worst <= 1.0
    }
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(rng, shape, lo, hi).unwrap()
}

fn ratio(err: f64, tol: f64) -> f64 {
    if tol == 0.0 {
        if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        err / tol
    }
}

pub fn pool_oracle() -> OracleCheck {
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let shape = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 1, 5)];
        let bin = uniform(&mut rng, &shape, -1.0, 1.0);
        let b6 = A64::from_tensor(&bin);
        for pooling in Pooling::ALL {
            let got = pool_bin(&bin, pooling).unwrap();
            let (want, _) = r64::pool(&b6, 0, shape[2], pooling);
            // max selects an input value, so it must agree exactly
            let tol = if pooling == Pooling::Max { 0.0 } else { TOL_POOL_AVG };
            for (&g, &w) in got.data().iter().zip(&want.data) {
                worst = worst.max(ratio((f64::from(g) - w).abs(), tol));
            }
        }
    }
    OracleCheck {
        name: "pool_bin",
        instances: INSTANCES,
        worst,
    }
}

pub fn matmul_oracle() -> OracleCheck {
    let mut rng = Rng::new(102);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (m, k, n) = (dim(&mut rng, 1, 9), dim(&mut rng, 1, 9), dim(&mut rng, 1, 9));
        let a = uniform(&mut rng, &[m, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[k, n], -1.0, 1.0);
        let got = a.matmul(&b).unwrap();
        let (a6, b6) = (A64::from_tensor(&a), A64::from_tensor(&b));
        let want = r64::matmul(&a6, &b6);
        let abs = r64::matmul(
            &A64::new(&[m, k], a6.data.iter().map(|v| v.abs()).collect()),
            &A64::new(&[k, n], b6.data.iter().map(|v| v.abs()).collect()),
        );
        for ((&g, &w), &s) in got.data().iter().zip(&want.data).zip(&abs.data) {
            // relative to the magnitude of the summed terms
            worst = worst.max(ratio((f64::from(g) - w).abs(), TOL_MATMUL_REL * s.max(f64::MIN_POSITIVE)));
        }
    }
    OracleCheck {
        name: "matmul",
        instances: INSTANCES,
        worst,
    }
}

pub fn conv_oracle() -> OracleCheck {
    let mut rng = Rng::new(103);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let k = [1, 3][rng.index(2)];
        let stride = dim(&mut rng, 1, 2);
        let pad = if k == 1 { 0 } else { rng.index(2) };
        let (n, ci, co) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 4));
        let (h, w) = (dim(&mut rng, k, 8), dim(&mut rng, k, 8));
        let x = uniform(&mut rng, &[n, ci, h, w], -1.0, 1.0);
        let weight = uniform(&mut rng, &[co, ci, k, k], -1.0, 1.0);
        let bias = uniform(&mut rng, &[co], -1.0, 1.0);
        let layer = Conv2d::new(weight.clone(), bias.clone(), stride, pad).unwrap();
        let got = layer.forward(&x).unwrap();
        let want = r64::conv(
            &A64::from_tensor(&x),
            &A64::from_tensor(&weight),
            &A64::from_tensor(&bias).data,
            stride,
            pad,
        );
        assert_eq!(got.shape(), &want.shape[..]);
        for (&g, &w) in got.data().iter().zip(&want.data) {
            worst = worst.max(ratio((f64::from(g) - w).abs(), TOL_CONV));
        }
    }
    OracleCheck {
        name: "conv2d_forward",
        instances: INSTANCES,
        worst,
    }
}

pub fn distance_oracle() -> OracleCheck {
    let mut rng = Rng::new(104);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (q, g, d) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 6), dim(&mut rng, 1, 16));
        let qs: Vec<Vec<f32>> = (0..q).map(|_| (0..d).map(|_| rng.uniform_f32(-1.0, 1.0)).collect()).collect();
        let gs: Vec<Vec<f32>> = (0..g).map(|_| (0..d).map(|_| rng.uniform_f32(-1.0, 1.0)).collect()).collect();
        let got = distance_matrix(&qs, &gs).unwrap();
        for i in 0..q {
            for j in 0..g {
                let a: Vec<f64> = qs[i].iter().map(|&v| f64::from(v)).collect();
                let b: Vec<f64> = gs[j].iter().map(|&v| f64::from(v)).collect();
                let want = r64::sq_dist(&a, &b);
                worst = worst.max(ratio((f64::from(got.data()[i * g + j]) - want).abs(), TOL_DISTANCE));
            }
        }
    }
    OracleCheck {
        name: "distance_matrix",
        instances: INSTANCES,
        worst,
    }
}

pub fn hpm_loss_oracle() -> OracleCheck {
    let mut rng = Rng::new(105);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (bins, n, p) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 4), dim(&mut rng, 2, 6));
        let logits: Vec<Tensor> = (0..bins).map(|_| uniform(&mut rng, &[n, p], -5.0, 5.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.index(p)).collect();
        let (loss, grads) = hpm_loss(&logits, &labels).unwrap();
        let l6: Vec<A64> = logits.iter().map(A64::from_tensor).collect();
        let want = r64::hpm_loss(&l6, &labels);
        worst = worst.max(ratio((f64::from(loss) - want).abs(), TOL_LOSS_REL * want.abs().max(1.0)));
        // d/dz of the summed loss: softmax minus the one-hot label
        for (l, g) in l6.iter().zip(&grads) {
            for (i, &y) in labels.iter().enumerate() {
                let row = &l.data[i * p..(i + 1) * p];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for c in 0..p {
                    let want = (row[c] - m).exp() / z - f64::from(u8::from(c == y));
                    let got = f64::from(g.data()[i * p + c]);
                    worst = worst.max(ratio((got - want).abs(), TOL_LOSS_GRAD));
                }
            }
        }
    }
    OracleCheck {
        name: "hpm_loss",
        instances: INSTANCES,
        worst,
    }
}

/// Scores computed with explicit double loops: the rank of each relevant
/// item is one plus the number of valid items strictly ahead of it.
pub struct OracleScores {
    pub ap: Vec<Option<f64>>,
    pub first_hit: Vec<Option<usize>>,
}

pub fn oracle_scores(queries: &[Descriptor], gallery: &[Descriptor]) -> OracleScores {
    let mut ap = Vec::new();
    let mut first_hit = Vec::new();
    for q in queries {
        let qv: Vec<f64> = q.vector.iter().map(|&v| f64::from(v)).collect();
        let dist: Vec<f64> = gallery
            .iter()
            .map(|g| r64::sq_dist(&qv, &g.vector.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
            .collect();
        let valid: Vec<bool> = gallery
            .iter()
            .map(|g| g.person_id >= 0 && !(g.person_id == q.person_id && g.camera_id == q.camera_id))
            .collect();
        let mut ranks = Vec::new();
        for (i, g) in gallery.iter().enumerate() {
            if !valid[i] || g.person_id != q.person_id || q.person_id < 0 {
                continue;
            }
            let mut ahead = 0;
            for j in 0..gallery.len() {
                if valid[j] && (dist[j] < dist[i] || (dist[j] == dist[i] && j < i)) {
                    ahead += 1;
                }
            }
            ranks.push(ahead + 1);
        }
        ranks.sort_unstable();
        if ranks.is_empty() {
            ap.push(None);
            first_hit.push(None);
        } else {
            let sum: f64 = ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum();
            ap.push(Some(sum / ranks.len() as f64));
            first_hit.push(Some(ranks[0] - 1));
        }
    }
    OracleScores { ap, first_hit }
}

/// Components are multiples of 1/16, so f32 and f64 distances agree
/// exactly and ties are real ties.
fn quantised(rng: &mut Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.range_inclusive(-8, 8) as f32 / 16.0).collect()
}

pub fn evaluate_oracle() -> OracleCheck {
    let mut rng = Rng::new(106);
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < INSTANCES {
        let d = dim(&mut rng, 1, 4);
        let ids = dim(&mut rng, 2, 6) as i64;
        let queries: Vec<Descriptor> = (0..dim(&mut rng, 1, 8))
            .map(|_| Descriptor::new(quantised(&mut rng, d), rng.range_inclusive(-1, ids), 1 + rng.index(3) as u32, true))
            .collect();
        let gallery: Vec<Descriptor> = (0..dim(&mut rng, 1, 12))
            .map(|_| Descriptor::new(quantised(&mut rng, d), rng.range_inclusive(-1, ids), 1 + rng.index(3) as u32, false))
            .collect();
        let k = dim(&mut rng, 1, 6);
        let oracle = oracle_scores(&queries, &gallery);
        let firsts: Vec<usize> = oracle.first_hit.iter().flatten().copied().collect();
        let got = evaluate(&queries, &gallery, k);
        if firsts.is_empty() {
            // no query has a valid match: the crate must refuse
            worst = worst.max(if got.is_err() { 0.0 } else { f64::INFINITY });
            continue;
        }
        instances += 1;
        let report = got.unwrap();
        for (g, w) in report.per_query_ap.iter().zip(&oracle.ap) {
            let err = match (g, w) {
                (Some(a), Some(b)) => ratio((a - b).abs(), TOL_EVAL),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(err);
        }
        let aps: Vec<f64> = oracle.ap.iter().flatten().copied().collect();
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        worst = worst.max(ratio((report.map - map).abs(), TOL_EVAL));
        for r in 0..k {
            let want = firsts.iter().filter(|&&f| f <= r).count() as f64 / firsts.len() as f64;
            worst = worst.max(ratio((report.cmc[r] - want).abs(), TOL_EVAL));
        }
    }
    OracleCheck {
        name: "evaluate",
        instances,
        worst,
    }
}

pub fn oracle_suite() -> Vec<OracleCheck> {
    vec![
        pool_oracle(),
        matmul_oracle(),
        conv_oracle(),
        distance_oracle(),
        hpm_loss_oracle(),
        evaluate_oracle(),
    ]
}
