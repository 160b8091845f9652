//! Numerical gradient verification.
//!
//! Every differentiable op on the tape is checked against central finite
//! differences. Multi-output ops are reduced to a scalar through a fixed
//! random linear functional, so the comparison covers the full Jacobian
//! action rather than a single component.

use rand::Rng;

use crate::autograd::conv_kernel;
use crate::autograd::tape::{Tape, ValId};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{domains, substream};

/// Step size for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Maximum tolerated relative error between analytic and numeric gradients.
pub const DEFAULT_TOL: f64 = 1e-4;

const BN_EPS: f64 = 1e-5;

/// Relative error with an absolute floor, so gradients near zero do not
/// blow the ratio up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / scale
}

/// Largest elementwise relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of [`run_battery`].
#[derive(Debug)]
pub struct BatteryReport {
    /// Number of op instances checked.
    pub cases: usize,
    /// Number of input gradients compared (each case checks every input).
    pub checks: usize,
    /// Worst relative error seen across all comparisons.
    pub max_rel_err: f64,
    /// Human-readable descriptions of any comparisons that exceeded
    /// [`DEFAULT_TOL`]; empty on a clean pass.
    pub failures: Vec<String>,
}

type BuildFn = Box<dyn Fn(&mut Tape, &[ValId]) -> Result<ValId>>;

struct Case {
    name: String,
    inputs: Vec<Tensor>,
    build: BuildFn,
}

/// Runs the full gradient-check battery: every tape op over a spread of
/// randomly drawn small shapes, analytic gradients against central
/// differences. Returns a report; `failures` is empty when all gradients
/// agree within [`DEFAULT_TOL`].
pub fn run_battery(seed: u64) -> Result<BatteryReport> {
    let cases = build_cases(seed)?;
    let mut report = BatteryReport {
        cases: cases.len(),
        checks: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    for (case_idx, case) in cases.iter().enumerate() {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(case.inputs.len());
        for t in &case.inputs {
            ids.push(tape.leaf(t.clone())?);
        }
        let out = (case.build)(&mut tape, &ids)?;

        let mut coeff_rng = substream(seed, domains::GRADCHECK_COEFFS, case_idx as u64);
        let coeffs: Vec<f64> = (0..tape.value(out).numel())
            .map(|_| coeff_rng.gen_range(-1.0..1.0))
            .collect();
        let seed_t = Tensor::from_vec(tape.value(out).shape(), coeffs.clone())?;
        tape.backward_seeded(out, &seed_t)?;

        for (j, input) in case.inputs.iter().enumerate() {
            let analytic = match tape.grad(ids[j]) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; input.numel()],
            };
            let numeric = central_diff(
                |probe| eval_proxy(case, j, probe, &coeffs),
                input.data(),
                DEFAULT_STEP,
            )?;
            let err = max_rel_err(&analytic, &numeric);
            report.checks += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err > DEFAULT_TOL {
                report.failures.push(format!(
                    "{} input {j}: max rel err {err:.3e} (tol {DEFAULT_TOL:.0e})",
                    case.name
                ));
            }
        }
    }
    Ok(report)
}

/// Forward pass of one case with input `probe_idx` replaced by `probe`,
/// reduced to a scalar via `coeffs`.
fn eval_proxy(case: &Case, probe_idx: usize, probe: &[f64], coeffs: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(case.inputs.len());
    for (j, t) in case.inputs.iter().enumerate() {
        let val = if j == probe_idx {
            Tensor::from_vec(t.shape(), probe.to_vec())?
        } else {
            t.clone()
        };
        ids.push(tape.leaf(val)?);
    }
    let out = (case.build)(&mut tape, &ids)?;
    Ok(conv_kernel::dot(tape.value(out).data(), coeffs))
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform magnitudes in `[0.1, 1.1]` with random sign, so a finite
/// difference step can never cross the relu kink.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.1);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn one_hot_targets(rng: &mut impl Rng, b: usize, k: usize) -> Tensor {
    let mut data = vec![0.0; b * k];
    for row in 0..b {
        data[row * k + rng.gen_range(0..k)] = 1.0;
    }
    Tensor::from_vec(&[b, k], data).expect("one-hot shape is consistent")
}

fn build_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = substream(seed, domains::GRADCHECK_DATA, 0);
    let mut cases: Vec<Case> = Vec::new();

    // Convolution across the kernel widths that matter: 1 (projection
    // shortcuts), even widths (asymmetric padding), and a kernel longer
    // than the sequence.
    for k in [1usize, 2, 3, 5, 7] {
        let b = rng.gen_range(1..=2);
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let n = if k == 7 { 4 } else { rng.gen_range(1..=8) };
        let x = Tensor::from_vec(&[b, c_in, n], uniform(&mut rng, b * c_in * n, -1.0, 1.0))?;
        let w = Tensor::from_vec(
            &[c_out, c_in, k],
            uniform(&mut rng, c_out * c_in * k, -1.0, 1.0),
        )?;
        let bias = Tensor::from_vec(&[c_out], uniform(&mut rng, c_out, -1.0, 1.0))?;
        cases.push(Case {
            name: format!("conv1d[{b},{c_in},{n}]xK{k}->{c_out}"),
            inputs: vec![x, w, bias],
            build: Box::new(|t, ids| t.conv1d(ids[0], ids[1], ids[2])),
        });
    }

    // Batch norm in training mode differentiates through the batch
    // statistics themselves.
    for i in 0..3 {
        let b = rng.gen_range(2..=4);
        let c = rng.gen_range(1..=3);
        let n = rng.gen_range(2..=5);
        let x = Tensor::from_vec(&[b, c, n], uniform(&mut rng, b * c * n, -2.0, 2.0))?;
        let gamma = Tensor::from_vec(&[c], uniform(&mut rng, c, 0.5, 1.5))?;
        let beta = Tensor::from_vec(&[c], uniform(&mut rng, c, -0.5, 0.5))?;
        cases.push(Case {
            name: format!("batchnorm_train#{i}[{b},{c},{n}]"),
            inputs: vec![x, gamma, beta],
            build: Box::new(|t, ids| {
                t.batchnorm_train(ids[0], ids[1], ids[2], BN_EPS).map(|(y, _, _)| y)
            }),
        });
    }

    // Batch norm in inference mode: fixed running stats, so the gradient
    // is a plain affine map.
    for i in 0..2 {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=5);
        let x = Tensor::from_vec(&[b, c, n], uniform(&mut rng, b * c * n, -2.0, 2.0))?;
        let gamma = Tensor::from_vec(&[c], uniform(&mut rng, c, 0.5, 1.5))?;
        let beta = Tensor::from_vec(&[c], uniform(&mut rng, c, -0.5, 0.5))?;
        let mean = uniform(&mut rng, c, -0.5, 0.5);
        let var = uniform(&mut rng, c, 0.5, 2.0);
        cases.push(Case {
            name: format!("batchnorm_eval#{i}[{b},{c},{n}]"),
            inputs: vec![x, gamma, beta],
            build: Box::new(move |t, ids| {
                t.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, BN_EPS)
            }),
        });
    }

    // Relu over both layouts it sees in the network.
    for (i, shape) in [vec![2, 6], vec![2, 3, 4]].into_iter().enumerate() {
        let numel = shape.iter().product();
        let x = Tensor::from_vec(&shape, away_from_zero(&mut rng, numel))?;
        cases.push(Case {
            name: format!("relu#{i}{shape:?}"),
            inputs: vec![x],
            build: Box::new(|t, ids| t.relu(ids[0])),
        });
    }

    // Residual addition.
    for i in 0..2 {
        let b = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=6);
        let a = Tensor::from_vec(&[b, c, n], uniform(&mut rng, b * c * n, -1.0, 1.0))?;
        let bt = Tensor::from_vec(&[b, c, n], uniform(&mut rng, b * c * n, -1.0, 1.0))?;
        cases.push(Case {
            name: format!("add#{i}[{b},{c},{n}]"),
            inputs: vec![a, bt],
            build: Box::new(|t, ids| t.add(ids[0], ids[1])),
        });
    }

    // Global average pooling, including the degenerate length-1 case.
    for (i, n) in [1usize, 5].into_iter().enumerate() {
        let b = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let x = Tensor::from_vec(&[b, c, n], uniform(&mut rng, b * c * n, -1.0, 1.0))?;
        cases.push(Case {
            name: format!("global_avg_pool#{i}[{b},{c},{n}]"),
            inputs: vec![x],
            build: Box::new(|t, ids| t.global_avg_pool(ids[0])),
        });
    }

    // Fully connected layers.
    for i in 0..3 {
        let b = rng.gen_range(1..=3);
        let d = rng.gen_range(1..=5);
        let o = rng.gen_range(1..=4);
        let x = Tensor::from_vec(&[b, d], uniform(&mut rng, b * d, -1.0, 1.0))?;
        let w = Tensor::from_vec(&[o, d], uniform(&mut rng, o * d, -1.0, 1.0))?;
        let bias = Tensor::from_vec(&[o], uniform(&mut rng, o, -1.0, 1.0))?;
        cases.push(Case {
            name: format!("affine#{i}[{b},{d}]->{o}"),
            inputs: vec![x, w, bias],
            build: Box::new(|t, ids| t.affine(ids[0], ids[1], ids[2])),
        });
    }

    // Softmax rows.
    for i in 0..2 {
        let b = rng.gen_range(1..=3);
        let k = rng.gen_range(2..=5);
        let x = Tensor::from_vec(&[b, k], uniform(&mut rng, b * k, -2.0, 2.0))?;
        cases.push(Case {
            name: format!("softmax#{i}[{b},{k}]"),
            inputs: vec![x],
            build: Box::new(|t, ids| t.softmax(ids[0])),
        });
    }

    // Cross entropy against probabilities kept well inside (0, 1) so the
    // clamp at CE_EPS stays inactive.
    for i in 0..2 {
        let b = rng.gen_range(1..=3);
        let k = rng.gen_range(2..=4);
        let y = Tensor::from_vec(&[b, k], uniform(&mut rng, b * k, 0.2, 0.8))?;
        let targets = one_hot_targets(&mut rng, b, k);
        cases.push(Case {
            name: format!("cross_entropy#{i}[{b},{k}]"),
            inputs: vec![y],
            build: Box::new(move |t, ids| t.cross_entropy(ids[0], &targets)),
        });
    }

    // Softmax feeding cross entropy, the exact pairing the training loss
    // uses, to exercise the chained backward.
    {
        let b = rng.gen_range(2..=3);
        let k = 2;
        let x = Tensor::from_vec(&[b, k], uniform(&mut rng, b * k, -2.0, 2.0))?;
        let targets = one_hot_targets(&mut rng, b, k);
        cases.push(Case {
            name: format!("softmax+cross_entropy[{b},{k}]"),
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let y = t.softmax(ids[0])?;
                t.cross_entropy(y, &targets)
            }),
        });
    }

    if cases.len() < 20 {
        return Err(Error::Config(format!(
            "gradcheck battery needs at least 20 cases, built {}",
            cases.len()
        )));
    }
    Ok(cases)
}
