//! Central finite-difference checks of tape gradients.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use crate::array::Array;
use crate::error::Result;
use crate::rng::{derive_seed, rng, Rng};

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Default tolerance on the maximum relative error.
pub const RTOL: f64 = 1e-4;
/// Pre-activations closer than this to a ReLU kink make a configuration
/// unsuitable for finite differences; suites resample instead.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.rtol
    }

    /// Folds another report in, keeping the worst coordinate.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.coords_checked += other.coords_checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares reverse-mode gradients of `f` against `(f(θ+h) − f(θ−h)) / 2h`
/// for every coordinate of every trainable parameter.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`
/// with `floor = 1e-6 · max(1, |f(θ)|)`, which bounds the contribution of
/// floating-point cancellation in the difference quotient.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    rtol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    check_coords(f, params, step, rtol, None)
}

/// Like [`finite_diff_check`], but probes at most `per_param` coordinates of
/// each parameter tensor, chosen uniformly without replacement. Tensors no
/// larger than `per_param` are checked exhaustively.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    rtol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    check_coords(f, params, step, rtol, Some((per_param, seed)))
}

fn check_coords<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    rtol: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let f0 = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let floor = 1e-6 * f0.abs().max(1.0);

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, ps)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        rtol,
    };
    let mut probe = params.clone();
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let coords: Vec<usize> = match sample {
            Some((k, seed)) if k < n => {
                let mut r = rng(derive_seed(seed, &[id.0 as u64]));
                let mut picked = rand::seq::index::sample(&mut r, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(report)
}

pub(crate) fn normal_array(rng: &mut Rng, shape: &[usize], scale: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn random_mask(rng: &mut Rng, t: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.7)).collect();
    let keep = rng.random_range(0..t);
    mask[keep] = true;
    mask
}

/// The ops exercised by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "conv1d",
    "dense",
    "relu",
    "sigmoid",
    "softmax",
    "gap_time",
    "mask_rows",
    "avg_pool_channels",
    "scale_channels",
    "stack_rows",
    "cross_entropy",
    "softmax_cross_entropy",
    "neg_sq_dist",
    "class_means",
    "add_mul_scale",
];

/// Builds one random instance of `op` reduced to a scalar by a random
/// weighted sum. Returns the parameters and the loss builder.
#[allow(clippy::type_complexity)]
fn op_case(
    op: &str,
    rng: &mut Rng,
) -> (
    ParamSet,
    Box<dyn Fn(&mut Tape, &ParamSet) -> Result<Var> + Send + Sync>,
) {
    let t = rng.random_range(1..=12usize);
    let c = rng.random_range(1..=4usize);
    let mut ps = ParamSet::new();
    let x = ps.push("x", normal_array(rng, &[t, c], 1.0)).unwrap();

    // Random upstream weighting so every output coordinate matters.
    fn weighted(tape: &mut Tape, out: Var, w: &Array) -> Result<Var> {
        let wv = tape.constant(w.clone());
        let m = tape.mul(out, wv)?;
        Ok(tape.sum(m))
    }

    match op {
        "conv1d" => {
            let c_out = rng.random_range(1..=4usize);
            let k = [1usize, 3, 5][rng.random_range(0..3)];
            let dil = rng.random_range(1..=2usize);
            let kid = ps
                .push("k", normal_array(rng, &[c_out, c, k], 0.5))
                .unwrap();
            let w = normal_array(rng, &[t, c_out], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let kv = tape.param(ps, kid);
                    let y = tape.conv1d(xv, kv, dil)?;
                    weighted(tape, y, &w)
                }),
            )
        }
        "dense" => {
            let d_out = rng.random_range(1..=5usize);
            let wid = ps.push("w", normal_array(rng, &[d_out, c], 0.5)).unwrap();
            let bid = ps.push("b", normal_array(rng, &[d_out], 0.5)).unwrap();
            let up = normal_array(rng, &[t, d_out], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let (w, b) = (tape.param(ps, wid), tape.param(ps, bid));
                    let y = tape.dense(xv, w, b)?;
                    weighted(tape, y, &up)
                }),
            )
        }
        "relu" | "sigmoid" | "softmax" | "add_mul_scale" => {
            let up = normal_array(rng, &[t, c], 1.0);
            let other = ps.push("y", normal_array(rng, &[t, c], 1.0)).unwrap();
            let op = op.to_string();
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let y = match op.as_str() {
                        "relu" => {
                            let yv = tape.param(ps, other);
                            let s = tape.add(xv, yv)?;
                            tape.relu(s)
                        }
                        "sigmoid" => tape.sigmoid(xv),
                        "softmax" => tape.softmax(xv)?,
                        _ => {
                            let yv = tape.param(ps, other);
                            let p = tape.mul(xv, yv)?;
                            let s = tape.scale(p, -1.7);
                            tape.add(s, xv)?
                        }
                    };
                    weighted(tape, y, &up)
                }),
            )
        }
        "gap_time" | "mask_rows" => {
            let mask = random_mask(rng, t);
            let is_gap = op == "gap_time";
            let up_shape = if is_gap { vec![c] } else { vec![t, c] };
            let up = normal_array(rng, &up_shape, 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let y = if is_gap {
                        tape.gap_time(xv, &mask)?
                    } else {
                        tape.mask_rows(xv, &mask)?
                    };
                    weighted(tape, y, &up)
                }),
            )
        }
        "avg_pool_channels" => {
            let target = [1usize, 2, 4][rng.random_range(0..3)];
            let d = target * rng.random_range(1..=3usize);
            let z = ps.push("z", normal_array(rng, &[t, d], 1.0)).unwrap();
            let up = normal_array(rng, &[t, target], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let _ = tape.param(ps, x);
                    let zv = tape.param(ps, z);
                    let y = tape.avg_pool_channels(zv, target)?;
                    weighted(tape, y, &up)
                }),
            )
        }
        "scale_channels" => {
            let gid = ps.push("gate", normal_array(rng, &[c], 1.0)).unwrap();
            let up = normal_array(rng, &[t, c], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let g = tape.param(ps, gid);
                    let y = tape.scale_channels(xv, g)?;
                    weighted(tape, y, &up)
                }),
            )
        }
        "stack_rows" => {
            let ids: Vec<ParamId> = (0..rng.random_range(1..=4))
                .map(|i| {
                    ps.push(format!("r{i}"), normal_array(rng, &[c], 1.0))
                        .unwrap()
                })
                .collect();
            let up = normal_array(rng, &[ids.len(), c], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let _ = tape.param(ps, x);
                    let rows: Vec<Var> = ids.iter().map(|&id| tape.param(ps, id)).collect();
                    let y = tape.stack_rows(&rows)?;
                    weighted(tape, y, &up)
                }),
            )
        }
        "cross_entropy" | "softmax_cross_entropy" => {
            let classes = c.max(2);
            let z = ps.push("z", normal_array(rng, &[t, classes], 1.0)).unwrap();
            let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..classes)).collect();
            let fused = op == "softmax_cross_entropy";
            (
                ps,
                Box::new(move |tape, ps| {
                    let _ = tape.param(ps, x);
                    let zv = tape.param(ps, z);
                    if fused {
                        tape.softmax_cross_entropy(zv, &labels)
                    } else {
                        let p = tape.softmax(zv)?;
                        tape.cross_entropy(p, &labels)
                    }
                }),
            )
        }
        "neg_sq_dist" => {
            let n_protos = rng.random_range(1..=4usize);
            let pid = ps
                .push("protos", normal_array(rng, &[n_protos, c], 1.0))
                .unwrap();
            let up = normal_array(rng, &[t, n_protos], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let pv = tape.param(ps, pid);
                    let y = tape.neg_sq_dist(xv, pv)?;
                    weighted(tape, y, &up)
                }),
            )
        }
        "class_means" => {
            let classes = rng.random_range(1..=t.min(3));
            // every class gets at least one row
            let labels: Vec<usize> = (0..t)
                .map(|i| {
                    if i < classes {
                        i
                    } else {
                        rng.random_range(0..classes)
                    }
                })
                .collect();
            let up = normal_array(rng, &[classes, c], 1.0);
            (
                ps,
                Box::new(move |tape, ps| {
                    let xv = tape.param(ps, x);
                    let y = tape.class_means(xv, &labels, classes)?;
                    weighted(tape, y, &up)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

/// Checks each op in [`SUITE_OPS`] over `configs` random instances.
pub fn op_suite(configs: usize, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (oi, op) in SUITE_OPS.iter().enumerate() {
        let mut agg = GradCheckReport {
            max_rel_err: 0.0,
            worst: None,
            coords_checked: 0,
            rtol: RTOL,
        };
        let mut done = 0u64;
        let mut attempt = 0u64;
        while done < configs as u64 {
            attempt += 1;
            let mut r = rng(derive_seed(seed, &[oi as u64, attempt]));
            let (ps, f) = op_case(op, &mut r);
            let mut probe = Tape::new();
            f(&mut probe, &ps)?;
            if probe.relu_margin() < KINK_MARGIN {
                continue;
            }
            agg.merge(finite_diff_check(&f, &ps, STEP, RTOL)?);
            done += 1;
        }
        out.push((op.to_string(), agg));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fn_is_exact() {
        let mut ps = ParamSet::new();
        let id = ps.push("w", Array::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let c = Array::vector(vec![1.5, 2.0, -0.25]);
        let r = finite_diff_check(
            |tape, ps| {
                let w = tape.param(ps, id);
                let cv = tape.constant(c.clone());
                let m = tape.mul(w, cv)?;
                Ok(tape.sum(m))
            },
            &ps,
            STEP,
            RTOL,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn quadratic_fn_is_exact_to_h2() {
        let mut ps = ParamSet::new();
        let id = ps.push("w", Array::vector(vec![0.7, -3.0])).unwrap();
        let r = finite_diff_check(
            |tape, ps| {
                let w = tape.param(ps, id);
                let sq = tape.mul(w, w)?;
                Ok(tape.sum(sq))
            },
            &ps,
            STEP,
            RTOL,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has subgradient 0 but a one-sided slope; the
        // check must notice the mismatch.
        let mut ps = ParamSet::new();
        let id = ps.push("w", Array::scalar(0.0)).unwrap();
        let r = finite_diff_check(
            |tape, ps| {
                let w = tape.param(ps, id);
                Ok(tape.relu(w))
            },
            &ps,
            STEP,
            RTOL,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn every_op_passes_on_a_few_configs() {
        for (op, r) in op_suite(5, 11).unwrap() {
            assert!(r.passed(), "{op}: {r:?}");
        }
    }
}
