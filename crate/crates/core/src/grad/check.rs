//! Finite-difference verification of the autodiff engine.
//!
//! [`finite_difference`] compares the tape's analytic gradients against
//! central differences in `f64` for an arbitrary scalar-headed builder.
//! [`run_op_checks`] applies it to a curated scenario per operation in
//! [`OP_NAMES`](crate::grad::OP_NAMES) — inputs are seeded and kept away
//! from non-differentiable points (ReLU and clamp corners, log floors,
//! empty spectra) so the comparison is meaningful — plus one composite
//! chain that mirrors the controller's op sequence.
//!
//! The whole suite can be run with the tanh-backward corruption hook
//! enabled; a sound checker must then fail exactly the scenarios that
//! differentiate through `tanh`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GaborConvContext, NodeId, Tape};
use std::sync::Arc;

/// Relative tolerance for the per-op scenarios (analytic vs. f64 central
/// differences; clean ops land near 1e-9).
pub const OP_TOL: f64 = 1e-6;

/// Outcome of one finite-difference scenario.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl OpCheck {
    pub fn from_err(op: &str, max_rel_err: f64, tol: f64) -> Self {
        Self { op: op.to_string(), max_rel_err, tol, pass: max_rel_err <= tol }
    }
}

/// A full gradient-check run: one entry per scenario.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&OpCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Compares the tape's gradients of `build`'s scalar head against central
/// finite differences over every element of every input, returning the
/// worst relative error (`|fd - analytic| / max(|fd|, |analytic|, 1e-3)`).
///
/// `inputs` are `(values, rows, cols)` tuples; each becomes a
/// gradient-requiring leaf, in order, and is perturbed elementwise with
/// step `1e-5 * max(1, |x|)`. Inputs the head does not depend on must
/// produce zero both ways. `corrupt_tanh` arms the fault-injection hook on
/// the analytic pass only (finite differences never run backward).
pub fn finite_difference<F>(
    inputs: &[(Vec<f64>, usize, usize)],
    corrupt_tanh: bool,
    build: F,
) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::<f64>::new();
    tape.set_corrupt_tanh_backward(corrupt_tanh);
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(v, rows, cols)| tape.leaf(v, *rows, *cols, true))
        .collect();
    let head = build(&mut tape, &ids);
    assert_eq!(tape.shape(head), (1, 1), "finite_difference needs a scalar head");
    tape.backward(head);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (v, _, _))| {
            tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.len()])
        })
        .collect();
    drop(tape);

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, rows, cols))| t.leaf(v, *rows, *cols, false))
            .collect();
        let h = build(&mut t, &ids);
        t.value(h)[0]
    };

    let mut work: Vec<Vec<f64>> = inputs.iter().map(|(v, _, _)| v.clone()).collect();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for e in 0..inputs[k].0.len() {
            let x0 = inputs[k].0[e];
            let h = 1e-5 * x0.abs().max(1.0);
            work[k][e] = x0 + h;
            let fp = eval(&work);
            work[k][e] = x0 - h;
            let fm = eval(&work);
            work[k][e] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[k][e];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Reduces a node to a scalar with fixed pseudo-random positive weights so
/// every output element influences the head with a distinct coefficient.
fn spread(t: &mut Tape<f64>, y: NodeId, seed: u64) -> NodeId {
    let (rows, cols) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wl = t.leaf(&w, rows, cols, false);
    let p = t.mul(y, wl);
    t.mean_all(p)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with magnitude at least `margin` (both signs), for ops with a
/// kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId>;

fn scenarios() -> Vec<(&'static str, Vec<(Vec<f64>, usize, usize)>, Builder)> {
    let mut out: Vec<(&'static str, Vec<(Vec<f64>, usize, usize)>, Builder)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);

    let pair = |rng: &mut ChaCha8Rng| {
        vec![(uniform(rng, 6, -1.5, 1.5), 3, 2), (uniform(rng, 6, -1.5, 1.5), 3, 2)]
    };

    out.push((
        "add",
        pair(&mut rng),
        Box::new(|t, ids| {
            let y = t.add(ids[0], ids[1]);
            spread(t, y, 1)
        }),
    ));
    out.push((
        "sub",
        pair(&mut rng),
        Box::new(|t, ids| {
            let y = t.sub(ids[0], ids[1]);
            spread(t, y, 2)
        }),
    ));
    out.push((
        "mul",
        pair(&mut rng),
        Box::new(|t, ids| {
            let y = t.mul(ids[0], ids[1]);
            spread(t, y, 3)
        }),
    ));
    out.push((
        "affine",
        vec![(uniform(&mut rng, 8, -2.0, 2.0), 2, 4)],
        Box::new(|t, ids| {
            let y = t.affine(ids[0], 1.7, -0.3);
            spread(t, y, 4)
        }),
    ));
    out.push((
        "matmul",
        vec![(uniform(&mut rng, 12, -1.0, 1.0), 3, 4), (uniform(&mut rng, 8, -1.0, 1.0), 4, 2)],
        Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            spread(t, y, 5)
        }),
    ));
    out.push((
        "relu",
        vec![(away_from_zero(&mut rng, 9, 0.2, 2.0), 3, 3)],
        Box::new(|t, ids| {
            let y = t.relu(ids[0]);
            spread(t, y, 6)
        }),
    ));
    out.push((
        "tanh",
        vec![(uniform(&mut rng, 5, -1.5, 1.5), 5, 1)],
        Box::new(|t, ids| {
            let y = t.tanh(ids[0]);
            spread(t, y, 7)
        }),
    ));
    out.push((
        "batch_norm",
        vec![
            (uniform(&mut rng, 5, -1.0, 1.0), 5, 1),
            (uniform(&mut rng, 5, 0.5, 1.5), 5, 1),
            (uniform(&mut rng, 5, -0.5, 0.5), 5, 1),
        ],
        Box::new(|t, ids| {
            let mean = [0.1, -0.2, 0.3, 0.0, -0.1];
            let var = [0.5, 1.0, 0.25, 0.8, 1.3];
            let y = t.batch_norm(ids[0], ids[1], ids[2], &mean, &var, 1e-9);
            spread(t, y, 8)
        }),
    ));
    out.push((
        "softmax_cross_entropy",
        vec![(uniform(&mut rng, 7, -2.0, 2.0), 7, 1)],
        Box::new(|t, ids| t.softmax_cross_entropy(ids[0], 3)),
    ));
    {
        // Mixture of interior and saturated values, all at least 0.1 away
        // from the clamp corners at +/-0.5.
        let mut vals = uniform(&mut rng, 3, -0.4, 0.4);
        vals.extend(uniform(&mut rng, 2, 0.6, 1.2));
        vals.extend(uniform(&mut rng, 1, -1.2, -0.6));
        out.push((
            "clamp_st",
            vec![(vals, 6, 1)],
            Box::new(|t, ids| {
                let y = t.clamp_st(ids[0], -0.5, 0.5);
                spread(t, y, 9)
            }),
        ));
    }
    out.push((
        "mean_all",
        vec![(uniform(&mut rng, 12, -2.0, 2.0), 4, 3)],
        Box::new(|t, ids| t.mean_all(ids[0])),
    ));
    out.push((
        "row_mean",
        vec![(uniform(&mut rng, 12, -2.0, 2.0), 3, 4)],
        Box::new(|t, ids| {
            let y = t.row_mean(ids[0]);
            spread(t, y, 10)
        }),
    ));
    out.push((
        "square",
        vec![(uniform(&mut rng, 6, -2.0, 2.0), 2, 3)],
        Box::new(|t, ids| {
            let y = t.square(ids[0]);
            spread(t, y, 11)
        }),
    ));
    out.push((
        "log_floor",
        vec![(uniform(&mut rng, 6, 0.05, 2.0), 6, 1)],
        Box::new(|t, ids| {
            let y = t.log_floor(ids[0], 1e-3);
            spread(t, y, 12)
        }),
    ));
    out.push((
        "concat_rows",
        vec![(uniform(&mut rng, 3, -1.0, 1.0), 3, 1), (uniform(&mut rng, 2, -1.0, 1.0), 2, 1)],
        Box::new(|t, ids| {
            let y = t.concat_rows(ids[0], ids[1]);
            spread(t, y, 13)
        }),
    ));
    out.push((
        "reshape",
        vec![(uniform(&mut rng, 12, -1.0, 1.0), 3, 4)],
        Box::new(|t, ids| {
            let y = t.reshape(ids[0], 6, 2);
            spread(t, y, 14)
        }),
    ));
    out.push((
        "row_diff",
        vec![(uniform(&mut rng, 12, -1.0, 1.0), 4, 3)],
        Box::new(|t, ids| {
            let y = t.row_diff(ids[0]);
            spread(t, y, 15)
        }),
    ));
    {
        let channels = 3;
        let (taps, frame) = (9usize, 24usize);
        let q0 = uniform(&mut rng, channels, 1.2, 3.0);
        let x0 = uniform(&mut rng, channels * frame, -1.0, 1.0);
        out.push((
            "gabor_conv",
            vec![(q0, channels, 1), (x0, channels, frame)],
            Box::new(move |t, ids| {
                let ctx = Arc::new(
                    GaborConvContext::<f64>::new(&[800.0, 1800.0, 3200.0], 16_000.0, taps, frame)
                        .unwrap(),
                );
                let y = t.gabor_conv(ids[0], ids[1], &ctx);
                spread(t, y, 16)
            }),
        ));
    }
    {
        // Keep every exposed DFT bin comfortably away from zero magnitude,
        // where the gradient of |X| is undefined.
        let (rows, cols, nfft) = (2usize, 24usize, 32usize);
        let vals = loop {
            let v = uniform(&mut rng, rows * cols, -1.0, 1.0);
            let mut min_mag = f64::INFINITY;
            for row in 0..rows {
                for k in 0..=nfft / 2 {
                    let (mut re, mut im) = (0.0f64, 0.0f64);
                    for n in 0..cols {
                        let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / nfft as f64;
                        re += v[row * cols + n] * ang.cos();
                        im += v[row * cols + n] * ang.sin();
                    }
                    min_mag = min_mag.min(re.hypot(im));
                }
            }
            if min_mag > 0.1 {
                break v;
            }
        };
        out.push((
            "spectrum_mag",
            vec![(vals, rows, cols)],
            Box::new(move |t, ids| {
                let y = t.spectrum_mag(ids[0], nfft);
                spread(t, y, 17)
            }),
        ));
    }
    out.push((
        "smooth3",
        vec![(uniform(&mut rng, 14, -1.0, 1.0), 2, 7)],
        Box::new(|t, ids| {
            let y = t.smooth3(ids[0]);
            spread(t, y, 18)
        }),
    ));
    out.push((
        "centroid_dev",
        vec![(uniform(&mut rng, 3 * 17, 0.1, 1.0), 3, 17)],
        Box::new(|t, ids| {
            let y = t.centroid_dev(ids[0], &[1000.0, 2000.0, 4000.0], 16_000.0, 32);
            spread(t, y, 19)
        }),
    ));
    {
        // Composite mirroring the controller's op sequence: normalize,
        // dense layer, tanh, diagonal scaling, affine into a positive range,
        // log. Exercises gradient flow through a realistic chain.
        let inputs = vec![
            (uniform(&mut rng, 6, -1.0, 1.0), 6, 1),  // x
            (uniform(&mut rng, 6, 0.5, 1.5), 6, 1),   // gamma
            (uniform(&mut rng, 6, -0.5, 0.5), 6, 1),  // beta
            (uniform(&mut rng, 24, -0.7, 0.7), 4, 6), // W1
            (uniform(&mut rng, 4, -0.3, 0.3), 4, 1),  // b1
            (uniform(&mut rng, 4, 0.3, 0.9), 4, 1),   // d
        ];
        out.push((
            "composite_chain",
            inputs,
            Box::new(|t, ids| {
                let mean = [0.05, -0.1, 0.2, 0.0, -0.05, 0.15];
                let var = [0.9, 1.1, 0.6, 1.4, 0.8, 1.0];
                let xn = t.batch_norm(ids[0], ids[1], ids[2], &mean, &var, 1e-9);
                let h = t.matmul(ids[3], xn);
                let h = t.add(h, ids[4]);
                let h = t.tanh(h);
                let h = t.mul(h, ids[5]);
                let h = t.affine(h, 1.875, 2.5);
                let h = t.log_floor(h, 1e-6);
                spread(t, h, 20)
            }),
        ));
    }
    out
}

/// Runs the per-op finite-difference suite (plus the composite chain).
/// With `corrupt_tanh` set, the analytic side of every scenario runs with
/// the tanh fault injected — a sound comparison must then fail the
/// tanh-dependent entries.
pub fn run_op_checks(corrupt_tanh: bool) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (name, inputs, build) in scenarios() {
        let err = finite_difference(&inputs, corrupt_tanh, build);
        report.checks.push(OpCheck::from_err(name, err, OP_TOL));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::OP_NAMES;
    use std::collections::HashSet;

    #[test]
    fn every_registered_op_is_checked_exactly_once() {
        let report = run_op_checks(false);
        let mut counts: std::collections::HashMap<&str, usize> = Default::default();
        for c in &report.checks {
            *counts.entry(c.op.as_str()).or_default() += 1;
        }
        for name in OP_NAMES {
            assert_eq!(counts.get(name).copied().unwrap_or(0), 1, "op {name} coverage");
        }
        // Exactly the registered ops plus the composite scenario.
        assert_eq!(report.checks.len(), OP_NAMES.len() + 1);
        let names: HashSet<&str> = report.checks.iter().map(|c| c.op.as_str()).collect();
        assert!(names.contains("composite_chain"));
    }

    #[test]
    fn all_ops_pass_finite_difference() {
        let report = run_op_checks(false);
        for c in &report.checks {
            assert!(
                c.pass,
                "op {} failed finite-difference: max rel err {:.3e} > {:.0e}",
                c.op, c.max_rel_err, c.tol
            );
        }
        assert!(report.all_pass());
    }

    #[test]
    fn corrupted_tanh_backward_is_caught() {
        let report = run_op_checks(true);
        let failed: HashSet<String> = report.failed().iter().map(|c| c.op.clone()).collect();
        assert!(failed.contains("tanh"), "corruption must fail the tanh check");
        assert!(
            failed.contains("composite_chain"),
            "corruption must fail the composite chain"
        );
        for c in &report.checks {
            if c.op != "tanh" && c.op != "composite_chain" {
                assert!(c.pass, "op {} must be unaffected by the tanh fault", c.op);
            }
        }
    }

    #[test]
    fn disconnected_input_yields_zero_both_ways() {
        // Second input never used: analytic grad is reported zero and FD
        // agrees, so the scenario passes rather than erroring.
        let inputs = vec![(vec![0.5, -0.25], 2, 1), (vec![1.0], 1, 1)];
        let err = finite_difference(&inputs, false, |t, ids| t.mean_all(ids[0]));
        assert!(err <= OP_TOL);
    }
}
