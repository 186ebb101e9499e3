//! Finite-difference verification of every differentiable block.
//!
//! Each check compares analytic gradients against central differences of a
//! random linear projection of the block's output, reporting the largest
//! relative error per block.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    cbn, cbn_backward, check_module_params, check_module_params_smooth, for_each_param, grad_check, group_max_pool, group_max_pool_backward,
    l2_normalize, l2_normalize_backward, linear, linear_backward, relu, relu_backward, softmax_cross_entropy,
    BatchNorm, GradReport, Mode, Module, Tensor,
};
use crate::config::Config;
use crate::consistency::ConsInput;
use crate::data::{gen_synthetic, ShapeClass};
use crate::encoder::{CloudGeometry, LayerId, Mlp};
use crate::error::Result;
use crate::loss::{batch_backward, batch_loss, build_groups, LayerChoice, PointDisc};
use crate::train::build_model;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub block: &'static str,
    pub report: GradReport,
}

fn dot(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn as_matrix(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).expect("shape preserved")
}

fn check_linear(rng: &mut ChaCha8Rng) -> GradReport {
    let x = Tensor::uniform(&[5, 4], 1.0, rng);
    let w = Tensor::uniform(&[4, 3], 1.0, rng);
    let b = Tensor::uniform(&[3], 1.0, rng);
    let proj = Tensor::uniform(&[5, 3], 1.0, rng);
    let g = linear_backward(&x, &w, &proj);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&linear(x, w, b).expect("shapes"), &proj);
    grad_check(|v| f(&as_matrix(x.shape(), v), &w, &b), x.data(), g.input.data(), None, TOLERANCE)
        .merge(grad_check(|v| f(&x, &as_matrix(w.shape(), v), &b), w.data(), g.weight.data(), None, TOLERANCE))
        .merge(grad_check(|v| f(&x, &w, &as_matrix(b.shape(), v)), b.data(), g.bias.data(), None, TOLERANCE))
}

fn check_relu(rng: &mut ChaCha8Rng) -> GradReport {
    let mut x = Tensor::uniform(&[6, 4], 1.0, rng);
    // stay clear of the kink
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    let proj = Tensor::uniform(&[6, 4], 1.0, rng);
    let g = relu_backward(&x, &proj);
    grad_check(|v| dot(&relu(&as_matrix(x.shape(), v)), &proj), x.data(), g.data(), None, TOLERANCE)
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = Tensor::uniform(&[7, 3], 2.0, rng);
    let mut bn = BatchNorm::new(3);
    for_each_param(&mut bn, |_, p| p.value = Tensor::uniform(p.value.shape(), 1.0, &mut *rng));
    let proj = Tensor::uniform(&[7, 3], 1.0, rng);
    let mut report: Option<GradReport> = None;
    for mode in [Mode::Train, Mode::Eval] {
        let (_, tape) = bn.forward(&x, mode)?;
        bn.zero_grad();
        let gx = bn.backward(&tape, &proj);
        let f = |v: &[f64]| dot(&bn.forward(&as_matrix(x.shape(), v), mode).expect("shapes").0, &proj);
        let r = grad_check(f, x.data(), gx.data(), None, TOLERANCE).merge(check_module_params(
            &mut bn,
            |m| dot(&m.forward(&x, mode).expect("shapes").0, &proj),
            usize::MAX,
            rng,
            TOLERANCE,
        ));
        report = Some(match report {
            Some(prev) => prev.merge(r),
            None => r,
        });
    }
    Ok(report.expect("two modes"))
}

fn check_cbn(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let shape = [6, 3];
    let x = Tensor::uniform(&shape, 1.5, rng);
    let gamma = Tensor::uniform(&shape, 2.0, rng);
    let beta = Tensor::uniform(&shape, 1.0, rng);
    let proj = Tensor::uniform(&shape, 1.0, rng);
    let plain = BatchNorm::without_affine(3);
    let (_, tape) = cbn(&plain, &x, &gamma, &beta, Mode::Train)?;
    let g = cbn_backward(&tape, &gamma, &proj);
    let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| dot(&cbn(&plain, x, gm, bt, Mode::Train).expect("shapes").0, &proj);
    Ok(grad_check(|v| f(&as_matrix(&shape, v), &gamma, &beta), x.data(), g.input.data(), None, TOLERANCE)
        .merge(grad_check(|v| f(&x, &as_matrix(&shape, v), &beta), gamma.data(), g.gamma.data(), None, TOLERANCE))
        .merge(grad_check(|v| f(&x, &gamma, &as_matrix(&shape, v)), beta.data(), g.beta.data(), None, TOLERANCE)))
}

fn check_l2_normalize(rng: &mut ChaCha8Rng) -> GradReport {
    let x = Tensor::uniform(&[4, 5], 1.0, rng);
    let proj = Tensor::uniform(&[4, 5], 1.0, rng);
    let (y, norms) = l2_normalize(&x);
    let g = l2_normalize_backward(&y, &norms, &proj);
    grad_check(|v| dot(&l2_normalize(&as_matrix(x.shape(), v)).0, &proj), x.data(), g.data(), None, TOLERANCE)
}

fn check_max_pool(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = Tensor::uniform(&[12, 3], 1.0, rng);
    let proj = Tensor::uniform(&[3, 3], 1.0, rng);
    let (_, arg) = group_max_pool(&x, 4)?;
    let g = group_max_pool_backward(&arg, 4, &proj);
    let f = |v: &[f64]| dot(&group_max_pool(&as_matrix(x.shape(), v), 4).expect("shapes").0, &proj);
    Ok(grad_check(f, x.data(), g.data(), None, TOLERANCE))
}

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let logits: Vec<f64> = (0..11).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, g) = softmax_cross_entropy(&logits, 0)?;
    Ok(grad_check(
        |v| softmax_cross_entropy(v, 0).expect("finite").0,
        &logits,
        &g,
        None,
        TOLERANCE,
    ))
}

/// One adaptation head followed by row normalization, over inputs and parameters.
fn check_adaptation(mlp: &mut Mlp, rng: &mut ChaCha8Rng, samples: usize) -> Result<GradReport> {
    let x = Tensor::uniform(&[6, mlp.in_dim()], 1.0, rng);
    let proj = Tensor::uniform(&[6, mlp.out_dim()], 1.0, rng);
    let value = |m: &Mlp, x: &Tensor| {
        let (h, _) = m.forward(x, Mode::Train).expect("shapes");
        dot(&l2_normalize(&h).0, &proj)
    };
    let (h, tape) = mlp.forward(&x, Mode::Train)?;
    let (y, norms) = l2_normalize(&h);
    mlp.zero_grad();
    let gx = mlp
        .backward(&tape, &l2_normalize_backward(&y, &norms, &proj), true)
        .expect("input gradient requested");
    let coords = sample_coords(x.len(), samples * 4, rng);
    Ok(
        grad_check(|v| value(mlp, &as_matrix(x.shape(), v)), x.data(), gx.data(), Some(&coords), TOLERANCE)
            .merge(check_module_params(mlp, |m| value(m, &x), samples, rng, TOLERANCE)),
    )
}

fn sample_coords(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, count).into_vec()
    }
}

/// Encoder parameters through every layer's adapted output.
fn check_encoder(model: &mut PointDisc, geoms: &[CloudGeometry], rng: &mut ChaCha8Rng, samples: usize) -> Result<GradReport> {
    let (out, tape) = model.encoder.forward(geoms, Mode::Train)?;
    let proj: Vec<Tensor> = out.layers.iter().map(|l| Tensor::uniform(l.adapted.shape(), 1.0, rng)).collect();
    model.encoder.zero_grad();
    model.encoder.backward(&tape, &proj.iter().cloned().map(Some).collect::<Vec<_>>());
    Ok(check_module_params_smooth(
        &mut model.encoder,
        |e| {
            let (out, tape) = e.forward(geoms, Mode::Train).expect("shapes");
            (out.layers.iter().zip(&proj).map(|(l, p)| dot(&l.adapted, p)).sum(), tape.pattern())
        },
        samples,
        rng,
        TOLERANCE,
    ))
}

/// The consistency network of one layer over z, p and all parameters.
fn check_consistency(model: &mut PointDisc, rng: &mut ChaCha8Rng, samples: usize) -> Result<GradReport> {
    let d = model.encoder.spec.adapt_dim;
    let z = l2_normalize(&Tensor::uniform(&[3, d], 1.0, rng)).0;
    let p = Tensor::uniform(&[9, 3], 1.0, rng);
    let input = ConsInput::grouped(z, p, vec![0, 0, 0, 1, 1, 1, 2, 2, 2])?;
    let idx = model.cons.index(LayerId::L2);
    let net = &mut model.cons.nets[idx];
    let proj = Tensor::uniform(&[input.rows(), 1], 1.0, rng);
    let (_, tape) = net.forward(&input, Mode::Train)?;
    net.zero_grad();
    let (dz, dp) = net.backward(&input, &tape, &proj);
    let net = &*net;
    let value = |i: &ConsInput| dot(&net.forward(i, Mode::Train).expect("shapes").0, &proj);
    let with_z = |v: &[f64]| {
        let mut i = input.clone();
        i.z = as_matrix(input.z.shape(), v);
        value(&i)
    };
    let with_p = |v: &[f64]| {
        let mut i = input.clone();
        i.p = as_matrix(input.p.shape(), v);
        value(&i)
    };
    let zc = sample_coords(input.z.len(), samples * 8, rng);
    let report = grad_check(with_z, input.z.data(), dz.data(), Some(&zc), TOLERANCE)
        .merge(grad_check(with_p, input.p.data(), dp.data(), None, TOLERANCE));
    let net = &mut model.cons.nets[idx];
    Ok(report.merge(check_module_params_smooth(
        net,
        |n| {
            let (s, tape) = n.forward(&input, Mode::Train).expect("shapes");
            (dot(&s, &proj), tape.pattern())
        },
        samples,
        rng,
        TOLERANCE,
    )))
}

/// Full discrimination loss over all model parameters on a two-cloud
/// micro-batch with four groups per cloud.
fn check_batch_loss(model: &mut PointDisc, geoms: &[CloudGeometry], config: &Config, rng: &mut ChaCha8Rng, samples: usize) -> Result<GradReport> {
    let mut cfg = config.loss_config()?;
    cfg.groups_per_cloud = 4;
    cfg.layer_choice = LayerChoice::Quota;
    let mut groups = Vec::new();
    for (c, g) in geoms.iter().enumerate() {
        groups.extend(build_groups(&model.encoder.spec, g, c, &cfg, rng)?.0);
    }
    let (_, tape) = batch_loss(model, geoms, &groups, &cfg, Mode::Train)?;
    model.zero_grad();
    batch_backward(model, &tape);
    Ok(check_module_params_smooth(
        model,
        |m| {
            let (value, tape) = batch_loss(m, geoms, &groups, &cfg, Mode::Train).expect("finite loss");
            (value.loss, tape.pattern())
        },
        samples,
        rng,
        TOLERANCE,
    ))
}

/// Size keys replaced by [`micro_config`]. At full width, a step of 1e-5
/// moves enough ReLU and max-pool units across their kinks to swamp the
/// finite-difference estimate, so model-level checks run at this scale.
const MICRO: &[(&str, &str)] = &[
    ("data.n_points", "64"),
    ("encoder.l1.centroids", "16"),
    ("encoder.l1.radius", "0.4"),
    ("encoder.l1.max_neighbors", "8"),
    ("encoder.l1.mlp", "8,8"),
    ("encoder.l2.centroids", "8"),
    ("encoder.l2.radius", "0.8"),
    ("encoder.l2.max_neighbors", "8"),
    ("encoder.l2.mlp", "8,12"),
    ("encoder.l3.centroids", "4"),
    ("encoder.l3.radius", "1.2"),
    ("encoder.l3.max_neighbors", "4"),
    ("encoder.l3.mlp", "12,16"),
    ("encoder.global.mlp", "16,16"),
    ("encoder.adapt.hidden", "12"),
    ("encoder.adapt.dim", "8"),
    ("consistency.hidden", "10"),
];

/// `config` with every size key shrunk; normalization, conditioner, sharing
/// and loss settings are kept.
pub fn micro_config(config: &Config) -> Config {
    let mut c = config.clone();
    for (k, v) in MICRO {
        c.set(k, v).expect("valid micro setting");
    }
    c
}

/// Runs every check, the model-level ones on [`micro_config`] of `config`
/// with `samples` entries drawn per parameter tensor.
pub fn run_suite(config: &Config, seed: u64, samples: usize) -> Result<Vec<BlockCheck>> {
    let config = &micro_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        BlockCheck { block: "linear", report: check_linear(&mut rng) },
        BlockCheck { block: "relu", report: check_relu(&mut rng) },
        BlockCheck { block: "batchnorm", report: check_batchnorm(&mut rng)? },
        BlockCheck { block: "cbn", report: check_cbn(&mut rng)? },
        BlockCheck { block: "l2_normalize", report: check_l2_normalize(&mut rng) },
        BlockCheck { block: "group_max_pool", report: check_max_pool(&mut rng)? },
        BlockCheck { block: "softmax_cross_entropy", report: check_softmax_ce(&mut rng)? },
    ];

    let mut model = build_model(config)?;
    // move off the identity conditioner so every path carries gradient
    for_each_param(&mut model.cons, |_, p| {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    });
    let n = model.encoder.spec.n_points;
    let geoms = [ShapeClass::Sphere, ShapeClass::Torus]
        .into_iter()
        .enumerate()
        .map(|(i, class)| model.encoder.geometry(&gen_synthetic(class, n, seed.wrapping_add(i as u64))?.points))
        .collect::<Result<Vec<_>>>()?;

    let mut adapter = model.encoder.adapters[LayerId::L2.index()].clone();
    out.push(BlockCheck { block: "adaptation_mlp", report: check_adaptation(&mut adapter, &mut rng, samples)? });
    out.push(BlockCheck { block: "encoder", report: check_encoder(&mut model, &geoms, &mut rng, samples)? });
    out.push(BlockCheck { block: "consistency_net", report: check_consistency(&mut model, &mut rng, samples)? });
    out.push(BlockCheck { block: "batch_loss", report: check_batch_loss(&mut model, &geoms, config, &mut rng, samples)? });
    Ok(out)
}

pub fn render_table(checks: &[BlockCheck]) -> String {
    let mut out = format!("{:<24} {:>8} {:>8} {:>12}  status\n", "block", "checked", "skipped", "max_rel_err");
    for c in checks {
        writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>12.3e}  {}",
            c.block,
            c.report.checked,
            c.report.skipped,
            c.report.max_rel_err,
            if c.report.pass { "ok" } else { "FAIL" }
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_each_variant() {
        for overrides in [&[][..], &["consistency.norm=bn", "consistency.shared=true"], &["consistency.conditioner=stacked"]] {
            let mut c = Config::default();
            for kv in overrides {
                c.apply_override(kv).unwrap();
            }
            let checks = run_suite(&c, 5, 4).unwrap();
            assert_eq!(checks.len(), 11);
            for ch in &checks {
                assert!(ch.report.pass, "{overrides:?} {}: {:?}", ch.block, ch.report);
                assert!(ch.report.checked > 0);
            }
            assert_eq!(render_table(&checks).lines().count(), 12);
        }
    }
}
