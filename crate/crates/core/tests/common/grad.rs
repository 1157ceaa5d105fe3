//! Central finite-difference checks of every hand-written backward pass.
//!
//! The analytic gradients come from the crate (f32). The objective is
//! evaluated by the naive f64 reference in [`super::reference`], so the
//! numeric derivative is not swamped by f32 round-off at the fixed step.
//!
//! Perturbations that move a ReLU input across zero or change a max-pool
//! argmax are skipped: each objective returns a kink signature, and a
//! component is compared only when both perturbed signatures equal the
//! unperturbed one.

use hpm::backbone::{Backbone, BackboneConfig};
use hpm::hpp::{hpm_loss, Pooling, PyramidConfig, PyramidHead};
use hpm::model::HpmModel;
use hpm::nn::{relu_backward, softmax_cross_entropy, Conv2d, Init, Linear};
use hpm::{Rng, Tensor};

use super::reference::{self as r64, A64, ModelRef};

pub const FD_STEP: f64 = 1e-3;
pub const REL_LAYER: f64 = 1e-3;
pub const REL_COMPOSITE: f64 = 1e-2;
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Largest `|analytic - numeric| / (tol * max(|analytic|, |numeric|) + floor)`.
    pub worst: f64,
    pub worst_at: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= 1.0
    }
}

/// Compares `analytic` with central differences of `eval` at `x0` over
/// `indices`. `eval` returns the objective and a kink signature.
pub fn fd_check(
    name: &str,
    x0: &[f64],
    analytic: &[f32],
    tol: f64,
    indices: impl IntoIterator<Item = usize>,
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<u32>),
) -> GradCheck {
    assert_eq!(x0.len(), analytic.len(), "{name}: gradient length");
    let (_, sig0) = eval(x0);
    let mut x = x0.to_vec();
    let mut out = GradCheck {
        name: name.to_string(),
        tolerance: tol,
        checked: 0,
        skipped: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for i in indices {
        x[i] = x0[i] + FD_STEP;
        let (lp, sp) = eval(&x);
        x[i] = x0[i] - FD_STEP;
        let (lm, sm) = eval(&x);
        x[i] = x0[i];
        if sp != sig0 || sm != sig0 {
            out.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let a = f64::from(analytic[i]);
        let ratio = (a - numeric).abs() / (tol * a.abs().max(numeric.abs()) + ABS_FLOOR);
        out.checked += 1;
        if ratio > out.worst {
            out.worst = ratio;
            out.worst_at = format!("index {i}: analytic {a:e}, numeric {numeric:e}");
        }
    }
    out
}

pub fn all(n: usize) -> std::ops::Range<usize> {
    0..n
}

/// Evenly spaced indices, at most about `max` of them.
pub fn spread(n: usize, max: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(n.div_ceil(max).max(1))
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(rng, shape, lo, hi).unwrap()
}

fn a64(t: &Tensor) -> A64 {
    A64::from_tensor(t)
}

fn with(t: &A64, data: &[f64]) -> A64 {
    A64::new(&t.shape, data.to_vec())
}

/// `sum(out * r)`.
pub fn weighted_sum(out: &A64, r: &Tensor) -> f64 {
    assert_eq!(out.shape, r.shape());
    out.data.iter().zip(r.data()).map(|(&a, &b)| a * f64::from(b)).sum()
}

pub fn conv_checks() -> Vec<GradCheck> {
    // (in, out, kernel, stride, padding, height, width)
    let cases = [
        (2, 3, 3, 1, 1, 5, 4),
        (2, 2, 3, 2, 1, 6, 5),
        (3, 2, 1, 1, 0, 3, 3),
        (1, 2, 3, 2, 0, 7, 6),
    ];
    let mut rng = Rng::new(11);
    let mut out = Vec::new();
    for (ci, co, k, s, p, h, w) in cases {
        let tag = format!("conv {ci}->{co} k{k} s{s} p{p}");
        let x = uniform(&mut rng, &[2, ci, h, w], -1.0, 1.0);
        let weight = uniform(&mut rng, &[co, ci, k, k], -0.5, 0.5);
        let bias = uniform(&mut rng, &[co], -0.5, 0.5);
        let layer = Conv2d::new(weight.clone(), bias.clone(), s, p).unwrap();
        let y = layer.forward(&x).unwrap();
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let (gx, g) = layer.backward(&x, &r).unwrap();
        let (x6, w6, b6) = (a64(&x), a64(&weight), a64(&bias));

        out.push(fd_check(&format!("{tag} input"), &x6.data, gx.data(), REL_LAYER, all(x.len()), |v| {
            (weighted_sum(&r64::conv(&with(&x6, v), &w6, &b6.data, s, p), &r), vec![])
        }));
        out.push(fd_check(&format!("{tag} weight"), &w6.data, g.weight.data(), REL_LAYER, all(weight.len()), |v| {
            (weighted_sum(&r64::conv(&x6, &with(&w6, v), &b6.data, s, p), &r), vec![])
        }));
        out.push(fd_check(&format!("{tag} bias"), &b6.data, g.bias.data(), REL_LAYER, all(bias.len()), |v| {
            (weighted_sum(&r64::conv(&x6, &w6, v, s, p), &r), vec![])
        }));
    }
    out
}

pub fn relu_check() -> GradCheck {
    let mut rng = Rng::new(12);
    let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let g = relu_backward(&x, &r).unwrap();
    let x6 = a64(&x);
    fd_check("relu", &x6.data, g.data(), REL_LAYER, all(x.len()), |v| {
        let sig = v.iter().map(|&e| u32::from(e > 0.0)).collect();
        (weighted_sum(&r64::relu(&with(&x6, v)), &r), sig)
    })
}

pub fn linear_checks() -> Vec<GradCheck> {
    let mut rng = Rng::new(13);
    let w = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let layer = Linear::new(w.clone()).unwrap();
    let h = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let r = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let (gh, gw) = layer.backward_batch(&h, &r).unwrap();
    let (h6, w6) = (a64(&h), a64(&w));

    let h1 = Tensor::from_vec(&[1, 5], h.data()[..5].to_vec()).unwrap();
    let r1 = Tensor::from_vec(&[1, 4], r.data()[..4].to_vec()).unwrap();
    let (gh1, gw1) = layer.backward(h1.data(), r1.data()).unwrap();
    let h16 = a64(&h1);
    vec![
        fd_check("linear input", &h6.data, gh.data(), REL_LAYER, all(h.len()), |v| {
            (weighted_sum(&r64::linear(&with(&h6, v), &w6), &r), vec![])
        }),
        fd_check("linear weight", &w6.data, gw.data(), REL_LAYER, all(w.len()), |v| {
            (weighted_sum(&r64::linear(&h6, &with(&w6, v)), &r), vec![])
        }),
        fd_check("linear single input", &h16.data, &gh1, REL_LAYER, all(5), |v| {
            (weighted_sum(&r64::linear(&with(&h16, v), &w6), &r1), vec![])
        }),
        fd_check("linear single weight", &w6.data, gw1.data(), REL_LAYER, all(w.len()), |v| {
            (weighted_sum(&r64::linear(&h16, &with(&w6, v)), &r1), vec![])
        }),
    ]
}

pub fn cross_entropy_check() -> GradCheck {
    let mut rng = Rng::new(14);
    let logits: Vec<f32> = (0..6).map(|_| rng.uniform_f32(-3.0, 3.0)).collect();
    let (_, g) = softmax_cross_entropy(&logits, 2).unwrap();
    let l6: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
    fd_check("softmax cross entropy", &l6, &g, REL_LAYER, all(6), |v| {
        (r64::cross_entropy(v, 2), vec![])
    })
}

pub fn hpm_loss_check() -> GradCheck {
    let mut rng = Rng::new(15);
    let logits: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 4], -2.0, 2.0)).collect();
    let labels = [1, 3];
    let (_, grads) = hpm_loss(&logits, &labels).unwrap();
    let flat: Vec<f64> = logits.iter().flat_map(|t| a64(t).data).collect();
    let gflat: Vec<f32> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
    fd_check("hpm loss", &flat, &gflat, REL_LAYER, all(flat.len()), |v| {
        let bins: Vec<A64> = v.chunks(8).map(|c| A64::new(&[2, 4], c.to_vec())).collect();
        (r64::hpm_loss(&bins, &labels), vec![])
    })
}

fn head_params(head: &PyramidHead) -> Vec<A64> {
    let mut p = Vec::new();
    for l in &head.reduce {
        p.push(a64(&l.weight));
        p.push(a64(&l.bias));
    }
    p.extend(head.classifiers.iter().map(|l| a64(&l.weight)));
    p
}

/// The default head (scales 1,2,4,8, reduced_dim 32) on a (2, 64, 8, 4)
/// map, for each pooling mode.
pub fn head_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for (t, pooling) in Pooling::ALL.into_iter().enumerate() {
        let mut rng = Rng::new(20 + t as u64);
        let cfg = PyramidConfig::new(vec![1, 2, 4, 8], 32, pooling, 5).unwrap();
        let scales = cfg.scales.clone();
        let bins = cfg.total_bins();
        let head = PyramidHead::init_with(cfg, 64, Init::Scaled, &mut rng).unwrap();
        let f = uniform(&mut rng, &[2, 64, 8, 4], 0.0, 1.0);
        let fwd = head.forward(&f).unwrap();
        let r: Vec<Tensor> = fwd.logits.iter().map(|l| uniform(&mut rng, l.shape(), -1.0, 1.0)).collect();
        let (gf, grads) = head.backward(&f, &r).unwrap();
        let f6 = a64(&f);
        let p6 = head_params(&head);
        let objective = |f: &A64, p: &[A64]| -> (f64, Vec<u32>) {
            let (logits, sig) = r64::head(f, p, &scales, pooling);
            (logits.iter().zip(&r).map(|(l, r)| weighted_sum(l, r)).sum(), sig)
        };
        let tag = format!("head ({pooling})");
        out.push(fd_check(&format!("{tag} input map"), &f6.data, gf.data(), REL_LAYER, spread(f.len(), 600), |v| {
            objective(&with(&f6, v), &p6)
        }));
        for b in [0, 3, 14] {
            let targets = [
                (2 * b, format!("reduce {b} weight"), grads.reduce[b].weight.data()),
                (2 * b + 1, format!("reduce {b} bias"), grads.reduce[b].bias.data()),
                (2 * bins + b, format!("classifier {b}"), grads.classifiers[b].data()),
            ];
            for (pi, what, g) in targets {
                let base = p6[pi].clone();
                out.push(fd_check(&format!("{tag} {what}"), &base.data, g, REL_LAYER, spread(base.data.len(), 200), |v| {
                    let mut p = p6.clone();
                    p[pi] = with(&base, v);
                    objective(&f6, &p)
                }));
            }
        }
    }
    out
}

fn default_backbone_32x16() -> BackboneConfig {
    BackboneConfig {
        input_height: 32,
        input_width: 16,
        ..BackboneConfig::default()
    }
}

/// The default backbone on a (1, 3, 32, 16) input.
pub fn backbone_checks() -> Vec<GradCheck> {
    let mut rng = Rng::new(30);
    let bb = Backbone::build_with(&default_backbone_32x16(), Init::Scaled, &mut rng).unwrap();
    let x = uniform(&mut rng, &[1, 3, 32, 16], -1.0, 1.0);
    let cache = bb.forward_cached(&x).unwrap();
    let r = uniform(&mut rng, cache.output().shape(), -1.0, 1.0);
    let grads = bb.backward(&x, &r).unwrap();
    let input_grad = backbone_input_grad(&bb, &x, &r);

    // The backbone alone, as a ModelRef with an empty head.
    let reference = ModelRef {
        params: bb.layers.iter().flat_map(|l| [a64(&l.weight), a64(&l.bias)]).collect(),
        strides: bb.layers.iter().map(|l| l.stride).collect(),
        paddings: bb.layers.iter().map(|l| l.padding).collect(),
        scales: vec![],
        pooling: Pooling::Avg,
    };
    let x6 = a64(&x);
    let objective = |m: &ModelRef, x: &A64| {
        let (f, sig) = m.backbone(x);
        (weighted_sum(&f, &r), sig)
    };
    let mut out = vec![fd_check("backbone input", &x6.data, input_grad.data(), REL_COMPOSITE, spread(x.len(), 400), |v| {
        objective(&reference, &with(&x6, v))
    })];
    for (k, g) in grads.iter().enumerate() {
        for (pi, what, grad) in [(2 * k, "weight", g.weight.data()), (2 * k + 1, "bias", g.bias.data())] {
            let base = reference.params[pi].clone();
            out.push(fd_check(&format!("backbone conv_{k} {what}"), &base.data, grad, REL_COMPOSITE, spread(base.data.len(), 120), |v| {
                let mut m = reference.clone();
                m.params[pi] = with(&base, v);
                objective(&m, &x6)
            }));
        }
    }
    out
}

/// Input gradient of the backbone, chaining the per-layer backward passes.
fn backbone_input_grad(bb: &Backbone, x: &Tensor, grad_out: &Tensor) -> Tensor {
    let cache = bb.forward_cached(x).unwrap();
    let mut g = grad_out.clone();
    for (k, layer) in bb.layers.iter().enumerate().rev() {
        let input = &cache.activations[k];
        let pre = layer.forward(input).unwrap();
        g = relu_backward(&pre, &g).unwrap();
        g = layer.backward(input, &g).unwrap().0;
    }
    g
}

/// Default backbone with a scales {1,2} head and the summed cross entropy on
/// a (2, 3, 32, 16) batch.
pub fn composite_checks() -> Vec<GradCheck> {
    let pcfg = PyramidConfig::new(vec![1, 2], 8, Pooling::AvgPlusMax, 4).unwrap();
    let model = HpmModel::new_with(default_backbone_32x16(), pcfg, Init::Scaled, &Rng::new(40)).unwrap();
    let x = uniform(&mut Rng::new(41), &[2, 3, 32, 16], 0.0, 1.0);
    let labels = [0, 3];
    let state = model.forward_train(&x).unwrap();
    let (_, gl) = hpm_loss(&state.bins.logits, &labels).unwrap();
    let grads = model.backward(&state, &gl).unwrap();
    let reference = ModelRef::of(&model);
    let x6 = a64(&x);
    let objective = |m: &ModelRef| {
        let (logits, sig) = m.forward(&x6);
        (r64::hpm_loss(&logits, &labels), sig)
    };
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (i, (name, g)) in names.iter().zip(grads.tensors()).enumerate() {
        let base = reference.params[i].clone();
        out.push(fd_check(&format!("composite {name}"), &base.data, g.data(), REL_COMPOSITE, spread(base.data.len(), 60), |v| {
            let mut m = reference.clone();
            m.params[i] = with(&base, v);
            objective(&m)
        }));
    }
    out
}

pub fn gradient_suite() -> Vec<GradCheck> {
    let mut out = conv_checks();
    out.push(relu_check());
    out.extend(linear_checks());
    out.push(cross_entropy_check());
    out.push(hpm_loss_check());
    out.extend(head_checks());
    out.extend(backbone_checks());
    out.extend(composite_checks());
    out
}
