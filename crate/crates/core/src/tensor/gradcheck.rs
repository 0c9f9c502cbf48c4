//! Central finite-difference oracle for the backward pass.
//!
//! For each parameter coordinate the loss is rebuilt at `p + eps` and
//! `p - eps`; the central difference is compared against the analytic
//! gradient. Coordinates whose relu/clamp activation pattern flips
//! between the two perturbed evaluations sit within `eps` of a kink and
//! are skipped rather than failed.

use std::collections::BTreeMap;
use std::fmt;

use super::autograd::{backward, topo_order};
use super::{GradFn, Tensor};
use crate::error::{Error, Result};

/// Named `f64` leaves to perturb. Keys are parameter names.
pub type CheckParams = BTreeMap<String, Tensor<f64>>;

/// Outcome of [`finite_difference_check`].
#[derive(Debug)]
pub struct CheckReport {
    pub tol: f64,
    pub eps: f64,
    /// Maximum relative error per parameter over non-skipped coordinates.
    pub per_param: BTreeMap<String, f64>,
    /// (parameter, coordinate) pairs skipped for sitting on a kink.
    pub skipped: Vec<(String, usize)>,
    /// (parameter, coordinate, reason) hard failures (non-finite loss).
    pub failures: Vec<(String, usize, String)>,
    pub pass: bool,
}

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().fold(0.0, |m, &v| m.max(v))
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check (eps={:.1e}, tol={:.1e})", self.eps, self.tol)?;
        for (name, err) in &self.per_param {
            let status = if *err <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "  {name:<48} max_rel_err={err:.3e}  {status}")?;
        }
        if !self.skipped.is_empty() {
            writeln!(f, "  skipped {} coordinate(s) near kinks", self.skipped.len())?;
        }
        for (name, coord, reason) in &self.failures {
            writeln!(f, "  FAILURE {name}[{coord}]: {reason}")?;
        }
        write!(f, "result: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Activation-sign signature of every kinked primitive in the graph,
/// collected in deterministic topological order.
fn kink_signature(loss: &Tensor<f64>) -> Vec<bool> {
    let mut sig = Vec::new();
    for t in topo_order(loss) {
        let node = t.node();
        match node.grad_fn {
            Some(GradFn::Relu) => {
                sig.extend(node.parents[0].data().iter().map(|&v| v > 0.0));
            }
            Some(GradFn::Clamp { lo, hi }) => {
                sig.extend(node.parents[0].data().iter().map(|&v| v > lo && v < hi));
            }
            _ => {}
        }
    }
    sig
}

fn eval<F>(build: &F, params: &CheckParams) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&CheckParams) -> Result<Tensor<f64>>,
{
    let loss = build(params)?;
    let v = loss.scalar_value()?;
    Ok((v, kink_signature(&loss)))
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must be a pure function of the given parameters producing a
/// scalar loss. The relative error metric is
/// `|fd - ad| / max(1, |fd|, |ad|)`.
pub fn finite_difference_check<F>(
    build: F,
    params: &CheckParams,
    eps: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: Fn(&CheckParams) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let loss = build(params)?;
    let analytic = backward(&loss)?;

    let mut per_param = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut failures = Vec::new();

    for (name, tensor) in params {
        let base = tensor.data().to_vec();
        let shape = tensor.shape().to_vec();
        let grad = analytic.get(name);
        let mut max_err = 0.0f64;
        for i in 0..base.len() {
            let probe = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut data = base.clone();
                data[i] += delta;
                let mut perturbed = params.clone();
                perturbed.insert(name.clone(), Tensor::parameter(name, data, &shape)?);
                eval(&build, &perturbed)
            };
            let (lp, sig_p) = probe(eps)?;
            let (lm, sig_m) = probe(-eps)?;
            if !lp.is_finite() || !lm.is_finite() {
                failures.push((name.clone(), i, format!("non-finite loss ({lp}, {lm})")));
                continue;
            }
            if sig_p != sig_m {
                skipped.push((name.clone(), i));
                continue;
            }
            let fd = (lp - lm) / (2.0 * eps);
            let ad = grad.map_or(0.0, |g| g.data[i]);
            let err = (fd - ad).abs() / 1.0f64.max(fd.abs()).max(ad.abs());
            max_err = max_err.max(err);
        }
        per_param.insert(name.clone(), max_err);
    }

    let pass = failures.is_empty() && per_param.values().all(|&e| e <= tol);
    Ok(CheckReport { tol, eps, per_param, skipped, failures, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(name: &str, data: Vec<f64>, shape: &[usize]) -> CheckParams {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::parameter(name, data, shape).unwrap());
        m
    }

    fn rand_params(spec: &[(&str, &[usize])], seed: u64) -> CheckParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BTreeMap::new();
        for (name, shape) in spec {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.insert(name.to_string(), Tensor::parameter(name, data, shape).unwrap());
        }
        m
    }

    fn assert_passes<F>(build: F, params: &CheckParams)
    where
        F: Fn(&CheckParams) -> Result<Tensor<f64>>,
    {
        let report = finite_difference_check(build, params, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn quadratic_is_exact() {
        let params = single("p", vec![0.3, -1.2, 2.0], &[3]);
        let report = finite_difference_check(
            |p| p["p"].mul(&p["p"])?.reduce_sum(None),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
        assert!(report.max_error() < 1e-8, "max err {}", report.max_error());
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn relu_kink_is_skipped_not_failed() {
        let params = single("p", vec![0.0], &[1]);
        let report = finite_difference_check(
            |p| p["p"].relu()?.reduce_sum(None),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.skipped, vec![("p".to_string(), 0)]);
    }

    #[test]
    fn non_finite_loss_is_a_failure() {
        let params = single("p", vec![0.0], &[1]);
        let report = finite_difference_check(
            |p| p["p"].log()?.reduce_sum(None),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.failures.len(), 1);
    }

    // One finite-difference test per differentiable primitive.

    #[test]
    fn fd_matmul_batched_and_broadcast() {
        let params = rand_params(&[("a", &[2, 3, 4]), ("b", &[2, 4, 2]), ("w", &[2, 5])], 11);
        assert_passes(
            |p| p["a"].matmul(&p["b"])?.matmul(&p["w"])?.reduce_sum(None),
            &params,
        );
    }

    #[test]
    fn fd_elementwise_arithmetic_with_broadcast() {
        let params = rand_params(&[("a", &[3, 4]), ("b", &[4]), ("c", &[3, 1])], 12);
        assert_passes(
            |p| {
                let t = p["a"].add(&p["b"])?.mul(&p["c"])?.sub(&p["b"])?;
                // Keep divisors away from zero.
                let d = p["b"].mul(&p["b"])?.affine(1.0, 1.5)?;
                t.div(&d)?.reduce_sum(None)
            },
            &params,
        );
    }

    #[test]
    fn fd_relu_sigmoid_log_clamp_affine() {
        let params = rand_params(&[("x", &[4, 3])], 13);
        assert_passes(
            |p| {
                let a = p["x"].relu()?.affine(2.0, 0.3)?.log()?;
                let b = p["x"].sigmoid()?.clamp(0.05, 0.95)?;
                a.mul(&b)?.reduce_sum(None)
            },
            &params,
        );
    }

    #[test]
    fn fd_softmax_all_axes() {
        let params = rand_params(&[("x", &[2, 3, 4]), ("w", &[2, 3, 4])], 14);
        for axis in 0..3 {
            assert_passes(
                |p| p["x"].softmax(axis)?.mul(&p["w"])?.reduce_sum(None),
                &params,
            );
        }
    }

    #[test]
    fn fd_layer_norm() {
        let params = rand_params(&[("x", &[3, 5]), ("w", &[3, 5])], 15);
        assert_passes(
            |p| p["x"].layer_norm(1e-5)?.mul(&p["w"])?.reduce_sum(None),
            &params,
        );
    }

    #[test]
    fn fd_dropout_training_mode_fixed_seed() {
        let params = rand_params(&[("x", &[6, 4])], 16);
        assert_passes(
            |p| p["x"].dropout(0.4, true, 99)?.reduce_sum(None),
            &params,
        );
    }

    #[test]
    fn fd_embedding_lookup() {
        let params = rand_params(&[("table", &[7, 3])], 17);
        assert_passes(
            |p| {
                let e = crate::tensor::apply_primitive(
                    crate::tensor::Primitive::EmbeddingLookup {
                        ids: vec![1, 4, 4, 6, 0],
                        ids_shape: vec![5],
                    },
                    &[&p["table"]],
                )?;
                e.mul(&e)?.reduce_sum(None)
            },
            &params,
        );
    }

    #[test]
    fn fd_concat_reshape_transpose() {
        let params = rand_params(&[("a", &[2, 3]), ("b", &[2, 2])], 18);
        assert_passes(
            |p| {
                let c = Tensor::concat(&[&p["a"], &p["b"]], 1)?; // (2,5)
                let t = c.transpose(&[1, 0])?; // (5,2)
                let r = t.reshape(&[2, 5])?;
                r.mul(&r)?.reduce_sum(None)
            },
            &params,
        );
    }

    #[test]
    fn fd_reductions() {
        let params = rand_params(&[("x", &[3, 4, 2])], 19);
        assert_passes(
            |p| {
                let s0 = p["x"].reduce_sum(Some(1))?; // (3,2)
                let m = s0.reduce_mean(Some(0))?; // (2)
                let total = p["x"].reduce_mean(None)?;
                m.reduce_sum(None)?.add(&total)
            },
            &params,
        );
    }

    #[test]
    fn fd_conv2d_zero_and_reflect_padding() {
        let params = rand_params(&[("x", &[2, 2, 5, 5]), ("w", &[3, 2, 3, 3])], 20);
        for reflect in [false, true] {
            assert_passes(
                |p| {
                    let y = p["x"].conv2d(&p["w"], 2, 1, reflect)?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &params,
            );
        }
    }

    #[test]
    fn fd_batch_norm_training_and_eval() {
        let params = rand_params(&[("x", &[2, 3, 4, 4]), ("g", &[3]), ("b", &[3])], 21);
        assert_passes(
            |p| {
                let y = crate::tensor::apply_primitive(
                    crate::tensor::Primitive::BatchNorm { eps: 1e-5, training: true },
                    &[&p["x"], &p["g"], &p["b"]],
                )?;
                y.mul(&y)?.reduce_sum(None)
            },
            &params,
        );
        let rm = Tensor::new(vec![0.1, -0.2, 0.3], &[3]).unwrap();
        let rv = Tensor::new(vec![1.1, 0.9, 1.3], &[3]).unwrap();
        assert_passes(
            |p| {
                let y = crate::tensor::apply_primitive(
                    crate::tensor::Primitive::BatchNorm { eps: 1e-5, training: false },
                    &[&p["x"], &p["g"], &p["b"], &rm, &rv],
                )?;
                y.mul(&y)?.reduce_sum(None)
            },
            &params,
        );
    }

    #[test]
    fn fd_masked_fill() {
        let params = rand_params(&[("x", &[2, 4])], 22);
        let mask = vec![false, true, false, true];
        assert_passes(
            |p| {
                let y = p["x"].masked_fill(&mask, &[4], -2.0)?;
                y.mul(&y)?.reduce_sum(None)
            },
            &params,
        );
    }
}
