//! Built-in verification suites: a finite-difference check for every
//! registered differentiable op, module-level gradient checks up to the full
//! model, and the structural invariants. The `selftest` CLI subcommand runs
//! everything and fails loudly; the acceptance tests reuse the same entry
//! points.

use std::rc::Rc;

use rand::{Rng as _, SeedableRng};

use crate::attention::AttentionEncoderParams;
use crate::encoder::spatial_mean_pool;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{conv3d, cross_entropy_loss, mae_loss, BatchNormLayer, MlpBlock, Mode};
use crate::regressor::RegressorParams;
use crate::sampling::sample_train_clip;
use crate::synth::{generate_video, GeneratorParams};
use crate::tensor::{finite_difference_check, set_numeric_mode, NumericMode, Param, Tensor, Var};
use crate::Rng;

pub const OP_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    fn from_report(name: &str, report: &crate::tensor::GradCheckReport) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tol: report.tol,
            passed: report.passed(),
        }
    }
}

fn random_param(rng: &mut Rng, name: &str, shape: &[usize], lo: f64, hi: f64) -> Rc<Param> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Param::new(name, Tensor::new(shape.to_vec(), data).unwrap(), true)
}

/// Random values bounded away from a non-differentiable point at 0.
fn random_param_excluding_zero(rng: &mut Rng, name: &str, shape: &[usize]) -> Rc<Param> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.5);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Param::new(name, Tensor::new(shape.to_vec(), data).unwrap(), true)
}

fn probe(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted-sum reduction so output gradients are non-uniform.
fn reduce(v: &Var, probe: &Tensor) -> Result<Var> {
    v.mul_const(probe)?.sum_all()
}

/// Finite-difference check of every registered differentiable op on
/// randomized shapes, at the op-level tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    set_numeric_mode(NumericMode::Verify64);
    let mut rng = Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // Elementwise binary ops.
    {
        let a = random_param(&mut rng, "a", &[3, 4], -1.5, 1.5);
        let b = random_param(&mut rng, "b", &[3, 4], -1.5, 1.5);
        let pr = probe(&mut rng, &[3, 4]);
        for (name, f) in [
            ("add", (|x: &Var, y: &Var| x.add(y)) as fn(&Var, &Var) -> Result<Var>),
            ("sub", |x, y| x.sub(y)),
            ("mul", |x, y| x.mul(y)),
        ] {
            let report = finite_difference_check(
                || reduce(&f(&Var::param(&a), &Var::param(&b))?, &pr),
                &[Rc::clone(&a), Rc::clone(&b)],
                FD_EPS,
                OP_TOL,
            )?;
            results.push(CheckResult::from_report(name, &report));
        }
    }

    // Elementwise unary ops on generic points.
    {
        let x = random_param(&mut rng, "x", &[2, 5], -1.2, 1.2);
        let pr = probe(&mut rng, &[2, 5]);
        let checks: Vec<(&str, fn(&Var) -> Result<Var>)> = vec![
            ("add_scalar", |v| v.add_scalar(0.7)),
            ("mul_scalar", |v| v.mul_scalar(-1.3)),
            ("neg", |v| v.neg()),
            ("exp", |v| v.exp()),
            ("sigmoid", |v| v.sigmoid()),
        ];
        for (name, f) in checks {
            let report = finite_difference_check(
                || reduce(&f(&Var::param(&x))?, &pr),
                &[Rc::clone(&x)],
                FD_EPS,
                OP_TOL,
            )?;
            results.push(CheckResult::from_report(name, &report));
        }
    }

    // Unary ops with restricted domains.
    {
        let pos = random_param(&mut rng, "pos", &[2, 4], 0.2, 2.0);
        let pr = probe(&mut rng, &[2, 4]);
        for (name, f) in [
            ("log", (|v: &Var| v.ln()) as fn(&Var) -> Result<Var>),
            ("power(1.5)", |v| v.powf(1.5)),
            ("power(-0.5)", |v| v.powf(-0.5)),
        ] {
            let report = finite_difference_check(
                || reduce(&f(&Var::param(&pos))?, &pr),
                &[Rc::clone(&pos)],
                FD_EPS,
                OP_TOL,
            )?;
            results.push(CheckResult::from_report(name, &report));
        }

        let away = random_param_excluding_zero(&mut rng, "away_from_zero", &[3, 3]);
        let pr = probe(&mut rng, &[3, 3]);
        for (name, f) in [
            ("elu", (|v: &Var| v.elu(1.0)) as fn(&Var) -> Result<Var>),
            ("abs", |v| v.abs()),
        ] {
            let report = finite_difference_check(
                || reduce(&f(&Var::param(&away))?, &pr),
                &[Rc::clone(&away)],
                FD_EPS,
                OP_TOL,
            )?;
            results.push(CheckResult::from_report(name, &report));
        }
    }

    // Pinned one-sided conventions at the kinks.
    {
        let x = Param::new("kink", Tensor::new(vec![1], vec![0.0]).unwrap(), true);
        let loss = Var::param(&x).elu(1.0).unwrap().sum_all().unwrap();
        x.zero_grad();
        loss.backward()?;
        let elu_at_zero = x.grad().data()[0];
        results.push(CheckResult {
            name: "elu'(0) == 1 (pinned)".to_string(),
            max_rel_error: (elu_at_zero - 1.0).abs(),
            tol: 0.0,
            passed: elu_at_zero == 1.0,
        });
        let loss = Var::param(&x).abs().unwrap().sum_all().unwrap();
        x.zero_grad();
        loss.backward()?;
        let abs_at_zero = x.grad().data()[0];
        results.push(CheckResult {
            name: "abs'(0) == 0 (pinned subgradient)".to_string(),
            max_rel_error: abs_at_zero.abs(),
            tol: 0.0,
            passed: abs_at_zero == 0.0,
        });
    }

    // Constant-operand ops.
    {
        let x = random_param(&mut rng, "x", &[3, 3], -1.0, 1.0);
        let c = probe(&mut rng, &[3, 3]);
        let pr = probe(&mut rng, &[3, 3]);
        for (name, f) in [
            (
                "add_const",
                (|v: &Var, c: &Tensor| v.add_const(c)) as fn(&Var, &Tensor) -> Result<Var>,
            ),
            ("mul_const", |v, c| v.mul_const(c)),
        ] {
            let report = finite_difference_check(
                || reduce(&f(&Var::param(&x), &c)?, &pr),
                &[Rc::clone(&x)],
                FD_EPS,
                OP_TOL,
            )?;
            results.push(CheckResult::from_report(name, &report));
        }
    }

    // Linear algebra.
    {
        let a = random_param(&mut rng, "a", &[3, 4], -1.0, 1.0);
        let b = random_param(&mut rng, "b", &[4, 2], -1.0, 1.0);
        let pr = probe(&mut rng, &[3, 2]);
        let report = finite_difference_check(
            || reduce(&Var::param(&a).matmul(&Var::param(&b))?, &pr),
            &[Rc::clone(&a), Rc::clone(&b)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("matmul", &report));

        let bt = random_param(&mut rng, "bt", &[2, 4], -1.0, 1.0);
        let report = finite_difference_check(
            || reduce(&Var::param(&a).matmul_nt(&Var::param(&bt))?, &pr),
            &[Rc::clone(&a), Rc::clone(&bt)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("matmul_nt", &report));

        let prt = probe(&mut rng, &[4, 3]);
        let report = finite_difference_check(
            || reduce(&Var::param(&a).transpose()?, &prt),
            &[Rc::clone(&a)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("transpose", &report));

        let u = random_param(&mut rng, "u", &[3, 1], -1.0, 1.0);
        let v = random_param(&mut rng, "v", &[4, 1], -1.0, 1.0);
        let pro = probe(&mut rng, &[3, 4]);
        let report = finite_difference_check(
            || reduce(&Var::param(&u).outer(&Var::param(&v))?, &pro),
            &[Rc::clone(&u), Rc::clone(&v)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("outer", &report));
    }

    // Structure ops.
    {
        let a = random_param(&mut rng, "a", &[4, 2], -1.0, 1.0);
        let b = random_param(&mut rng, "b", &[4, 3], -1.0, 1.0);
        let pr_cat = probe(&mut rng, &[4, 5]);
        let report = finite_difference_check(
            || reduce(&Var::concat_cols(&[Var::param(&a), Var::param(&b)])?, &pr_cat),
            &[Rc::clone(&a), Rc::clone(&b)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("concat(cols)", &report));

        let c = random_param(&mut rng, "c", &[2, 2], -1.0, 1.0);
        let d = random_param(&mut rng, "d", &[3, 2], -1.0, 1.0);
        let pr_rows = probe(&mut rng, &[5, 2]);
        let report = finite_difference_check(
            || reduce(&Var::concat_rows(&[Var::param(&c), Var::param(&d)])?, &pr_rows),
            &[Rc::clone(&c), Rc::clone(&d)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("concat(rows)", &report));

        let x = random_param(&mut rng, "x", &[5, 3], -1.0, 1.0);
        let pr_slice = probe(&mut rng, &[2, 3]);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).slice_rows(1, 3)?, &pr_slice),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("slice", &report));

        let idx = Rc::new(vec![4usize, 0, 2, 2]);
        let pr_sel = probe(&mut rng, &[4, 3]);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).index_select_rows(&idx)?, &pr_sel),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("index_select_rows", &report));

        let seg = Rc::new(vec![1usize, 0, 1, 1, 0]);
        let pr_seg = probe(&mut rng, &[2, 3]);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).segment_sum_rows(&seg, 2)?, &pr_seg),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("segment_sum_rows", &report));

        let pr_row = probe(&mut rng, &[5, 1]);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).row_sum()?, &pr_row),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("row_sum", &report));

        let report = finite_difference_check(
            || Var::param(&x).sum_all(),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("sum", &report));

        let report = finite_difference_check(
            || Var::param(&x).mean_all(),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("mean", &report));

        let pr_flat = probe(&mut rng, &[15]);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).reshape(vec![15])?, &pr_flat),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("reshape", &report));

        let den = random_param(&mut rng, "den", &[], 0.5, 2.0);
        let pr_div = probe(&mut rng, &[5, 3]);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).div_scalar_node(&Var::param(&den))?, &pr_div),
            &[Rc::clone(&x), Rc::clone(&den)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("div_scalar_node", &report));

        let bias = random_param(&mut rng, "bias", &[3], -0.5, 0.5);
        let report = finite_difference_check(
            || reduce(&Var::param(&x).add_row(&Var::param(&bias))?, &pr_div),
            &[Rc::clone(&x), Rc::clone(&bias)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("add_row", &report));

        let edges = random_param(&mut rng, "edges", &[6, 1], -1.0, 1.0);
        let (from, to) = crate::attention::edge_lists(3);
        let pr_dense = probe(&mut rng, &[3, 3]);
        let report = finite_difference_check(
            || reduce(&Var::param(&edges).edges_to_dense(&from, &to, 3)?, &pr_dense),
            &[Rc::clone(&edges)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("edges_to_dense", &report));
    }

    // Convolution, pooling, batch norm, losses.
    {
        let x = random_param(&mut rng, "x", &[2, 2, 3, 3, 3], -1.0, 1.0);
        let w = random_param(&mut rng, "w", &[2, 2, 3, 2, 2], -0.5, 0.5);
        let b = random_param(&mut rng, "b", &[2], -0.5, 0.5);
        let pr_conv = probe(&mut rng, &[2, 2, 3, 2, 2]);
        let report = finite_difference_check(
            || {
                reduce(
                    &conv3d(
                        &Var::param(&x),
                        &Var::param(&w),
                        &Var::param(&b),
                        (1, 1, 1),
                        (1, 0, 0),
                    )?,
                    &pr_conv,
                )
            },
            &[Rc::clone(&x), Rc::clone(&w), Rc::clone(&b)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("conv3d", &report));

        let pr_pool = probe(&mut rng, &[6, 2]);
        let report = finite_difference_check(
            || reduce(&spatial_mean_pool(&Var::param(&x))?, &pr_pool),
            &[Rc::clone(&x)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("spatial_mean_pool", &report));

        results.extend(batchnorm_suite(&mut rng)?);

        let pred = random_param(&mut rng, "pred", &[5], -1.0, 1.0);
        let target = probe(&mut rng, &[5]);
        let report = finite_difference_check(
            || mae_loss(&Var::param(&pred), &target),
            &[Rc::clone(&pred)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("mae_loss", &report));

        let logits = random_param(&mut rng, "logits", &[4, 4], -2.0, 2.0);
        let report = finite_difference_check(
            || cross_entropy_loss(&Var::param(&logits), &[0, 2, 3, 1]),
            &[Rc::clone(&logits)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report("cross_entropy_loss", &report));
    }

    Ok(results)
}

/// Batch-norm train/eval checks (helper so the loss breaks the
/// normalization symmetry).
fn batchnorm_suite(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let x = random_param(rng, "x", &[6, 3], -1.5, 1.5);
    let bn = BatchNormLayer::new("bn", 3);
    bn.gamma.set_value(probe(rng, &[3]));
    bn.beta.set_value(probe(rng, &[3]));
    let pr = probe(rng, &[6, 3]);
    for mode in [Mode::Train, Mode::Eval] {
        let report = finite_difference_check(
            || reduce(&bn.forward(&Var::param(&x), mode)?, &pr),
            &[Rc::clone(&x), Rc::clone(&bn.gamma), Rc::clone(&bn.beta)],
            FD_EPS,
            OP_TOL,
        )?;
        results.push(CheckResult::from_report(
            &format!("batchnorm({mode:?})"),
            &report,
        ));
    }
    Ok(results)
}

/// Synthetic clip for the model-level checks, matching the micro profile.
fn micro_clip(seed: u64) -> Result<crate::sampling::Clip> {
    let params = GeneratorParams {
        base_area: 14.0,
        pulsation_depth: 0.5,
        period: 6.0,
        phase: -std::f64::consts::FRAC_PI_2,
        noise_std: 0.02,
        zoomed: false,
        heart_center: (4.0, 4.0),
        aspect: 1.1,
        t_total: 12,
        height: 8,
        width: 8,
    };
    let video = generate_video(&params, seed)?;
    let mut rng = Rng::seed_from_u64(seed);
    Ok(sample_train_clip(&video, 0, 6, &mut rng))
}

/// Module-level checks: every component's parameter set through the full
/// combined loss, at the model-level tolerance.
pub fn model_gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    set_numeric_mode(NumericMode::Verify64);
    let mut rng = Rng::seed_from_u64(seed ^ 0xF00D);
    let mut results = Vec::new();

    // MLP block on its own.
    {
        let mlp = MlpBlock::new(&mut rng, "mlp", 3, 4, 2);
        let x = random_param(&mut rng, "x", &[5, 3], -1.0, 1.0);
        let pr = probe(&mut rng, &[5, 2]);
        let mut params = vec![Rc::clone(&x)];
        mlp.collect_params(&mut params);
        let trainable: Vec<_> = params.into_iter().filter(|p| p.trainable()).collect();
        let report = finite_difference_check(
            || reduce(&mlp.forward(&Var::param(&x), Mode::Train)?, &pr),
            &trainable,
            FD_EPS,
            MODEL_TOL,
        )?;
        results.push(CheckResult::from_report("module:mlp_block", &report));
    }

    // Attention encoder parameter set.
    {
        let attn = AttentionEncoderParams::new(&mut rng, 3, 4);
        let h0 = random_param(&mut rng, "h0", &[5, 3], -1.0, 1.0);
        let pr_w = probe(&mut rng, &[5, 1]);
        let pr_a = probe(&mut rng, &[5, 5]);
        let mut params = vec![Rc::clone(&h0)];
        attn.collect_params(&mut params);
        let trainable: Vec<_> = params.into_iter().filter(|p| p.trainable()).collect();
        let report = finite_difference_check(
            || {
                let (a, w) = attn.forward(&Var::param(&h0), Mode::Train)?;
                reduce(&a, &pr_a)?.add(&reduce(&w, &pr_w)?)
            },
            &trainable,
            FD_EPS,
            MODEL_TOL,
        )?;
        results.push(CheckResult::from_report("module:attention_encoder", &report));
    }

    // Regressor parameter set.
    {
        let reg = RegressorParams::new(&mut rng, 3, &[3, 2], 2)?;
        let h0 = random_param(&mut rng, "h0", &[4, 3], -1.0, 1.0);
        let mut adj = probe(&mut rng, &[4, 4]);
        {
            let d = adj.data_mut();
            for v in d.iter_mut() {
                *v = (*v).abs().clamp(0.05, 0.95);
            }
            for i in 0..4 {
                d[i * 4 + i] = 0.0;
            }
        }
        let w_nodes = Tensor::new(vec![4, 1], vec![0.3, 0.8, 0.5, 0.6])?;
        let mut params = vec![Rc::clone(&h0)];
        reg.collect_params(&mut params);
        let trainable: Vec<_> = params.into_iter().filter(|p| p.trainable()).collect();
        let report = finite_difference_check(
            || {
                let hg = reg.graph_embedding(
                    &Var::constant(adj.clone()),
                    &Var::param(&h0),
                    &Var::constant(w_nodes.clone()),
                    Mode::Eval,
                )?;
                let ef = reg.ef_head.forward(&hg, Mode::Eval)?;
                let ce = cross_entropy_loss(&reg.class_head.forward(&hg, Mode::Eval)?, &[1])?;
                mae_loss(&ef, &Tensor::new(vec![1, 1], vec![0.62])?)?.add(&ce)
            },
            &trainable,
            FD_EPS,
            MODEL_TOL,
        )?;
        results.push(CheckResult::from_report("module:graph_regressor", &report));
    }

    // Full model, one synthetic clip, eval-mode statistics (the loss is the
    // training objective MAE + CE).
    {
        let model = Model::new(ModelConfig::micro(), seed)?;
        let clip = micro_clip(seed)?;
        let trainable: Vec<_> = model
            .params()
            .into_iter()
            .filter(|p| p.trainable())
            .collect();
        let target = Tensor::new(vec![1, 1], vec![0.55])?;
        let report = finite_difference_check(
            || {
                let out = model.forward_batch(std::slice::from_ref(&clip), Mode::Eval)?;
                let mae = mae_loss(&out.ef_norm, &target)?;
                let ce = cross_entropy_loss(&out.logits, &[2])?;
                mae.add(&ce)
            },
            &trainable,
            FD_EPS,
            MODEL_TOL,
        )?;
        results.push(CheckResult::from_report(
            "module:full_model(one clip, eval stats)",
            &report,
        ));
    }

    // Full model with train-mode statistics over a two-clip batch.
    {
        let model = Model::new(ModelConfig::micro(), seed ^ 1)?;
        let clips = vec![micro_clip(seed ^ 2)?, micro_clip(seed ^ 3)?];
        let trainable: Vec<_> = model
            .params()
            .into_iter()
            .filter(|p| p.trainable())
            .collect();
        let target = Tensor::new(vec![2, 1], vec![0.55, 0.31])?;
        let report = finite_difference_check(
            || {
                let out = model.forward_batch(&clips, Mode::Train)?;
                let mae = mae_loss(&out.ef_norm, &target)?;
                let ce = cross_entropy_loss(&out.logits, &[2, 1])?;
                mae.add(&ce)
            },
            &trainable,
            FD_EPS,
            MODEL_TOL,
        )?;
        results.push(CheckResult::from_report(
            "module:full_model(batch of 2, train stats)",
            &report,
        ));
    }

    Ok(results)
}

/// Runs both suites, printing one line per check. Returns true when every
/// check passed.
pub fn run_all(seed: u64) -> Result<bool> {
    let mut ok = true;
    for r in gradient_suite(seed)?.iter().chain(model_gradient_suite(seed)?.iter()) {
        println!(
            "{} {:<45} max_rel_err={:.3e} tol={:.1e}",
            if r.passed { "ok " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tol
        );
        ok &= r.passed;
    }
    Ok(ok)
}
