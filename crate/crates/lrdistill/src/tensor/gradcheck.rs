//! Finite-difference verification of backward rules.
//!
//! Checks run in `f64`. Inputs for kinked ops (relu, abs, min, max-pool) are
//! sampled away from the kink: any coordinate that would land within 1e-3 of
//! a non-differentiable point is pushed out before the check.

use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Max over elements of |analytic - central difference| / max(1, |analytic|, |numeric|).
pub fn finite_diff_gradcheck(
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> f64 {
    assert!(eps > 0.0, "gradcheck: eps must be positive");
    let leaf = Tensor::param(x.data().to_vec(), x.shape());
    let y = f(&leaf);
    assert_eq!(y.numel(), 1, "gradcheck: objective must be scalar");
    y.backward().expect("gradcheck backward");
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let mut max_err = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(plus, x.shape())).item();
        let fm = f(&Tensor::from_vec(minus, x.shape())).item();
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}

/// Result of one operation's gradient check.
#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OpGradReport {
    fn new(name: &str, err: f64, tol: f64) -> Self {
        OpGradReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
            pass: err < tol,
        }
    }
}

pub const GRADCHECK_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values with |v| >= margin so relu/abs kinks are avoided.
fn kink_free(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = margin + rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Scalar objective: weighted sum of an op's output with fixed random weights,
/// so every output element influences the check.
fn weighted_sum(y: &Tensor<f64>, weights: &Tensor<f64>) -> Tensor<f64> {
    sum_all(&mul(y, weights))
}

fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = numel_of(shape);
    Tensor::from_vec(uniform(rng, n, -1.0, 1.0), shape)
}

/// Gradient checks for every differentiable tensor op, one seed.
pub fn op_suite(seed: u64) -> Vec<OpGradReport> {
    let mut out = Vec::new();
    let mut rng = rng_for(seed);
    let tol = GRADCHECK_TOL;

    // add / sub / mul — both operands
    {
        let shape = [2, 3, 4];
        let a = Tensor::from_vec(uniform(&mut rng, 24, -2.0, 2.0), &shape);
        let b = Tensor::from_vec(uniform(&mut rng, 24, -2.0, 2.0), &shape);
        let w = probe(&mut rng, &shape);
        let wb = w.clone();
        let bb = b.clone();
        let e = finite_diff_gradcheck(move |x| weighted_sum(&add(x, &bb), &wb), &a, EPS);
        out.push(OpGradReport::new("add", e, tol));
        let (wb, bb) = (w.clone(), b.clone());
        let e = finite_diff_gradcheck(move |x| weighted_sum(&sub(x, &bb), &wb), &a, EPS);
        out.push(OpGradReport::new("sub", e, tol));
        let (wb, bb) = (w.clone(), b.clone());
        let e1 = finite_diff_gradcheck(move |x| weighted_sum(&mul(x, &bb), &wb), &a, EPS);
        let (wb, ab) = (w.clone(), a.clone());
        let e2 = finite_diff_gradcheck(move |x| weighted_sum(&mul(&ab, x), &wb), &b, EPS);
        out.push(OpGradReport::new("mul", e1.max(e2), tol));
        let wb = w.clone();
        let e = finite_diff_gradcheck(
            move |x| weighted_sum(&affine(x, 1.7, -0.3), &wb),
            &a,
            EPS,
        );
        out.push(OpGradReport::new("affine_scale", e, tol));
    }

    // minimum — keep |a-b| away from the kink
    {
        let shape = [3, 5];
        let a = Tensor::from_vec(uniform(&mut rng, 15, -2.0, 2.0), &shape);
        let gap = kink_free(&mut rng, 15, 1e-2);
        let bdat: Vec<f64> = a.data().iter().zip(gap.iter()).map(|(&x, &g)| x + g).collect();
        let b = Tensor::from_vec(bdat, &shape);
        let w = probe(&mut rng, &shape);
        let (wb, bb) = (w.clone(), b.clone());
        let e1 = finite_diff_gradcheck(move |x| weighted_sum(&minimum(x, &bb), &wb), &a, EPS);
        let (wb, ab) = (w.clone(), a.clone());
        let e2 = finite_diff_gradcheck(move |x| weighted_sum(&minimum(&ab, x), &wb), &b, EPS);
        out.push(OpGradReport::new("minimum", e1.max(e2), tol));
    }

    // unary ops
    {
        let shape = [4, 6];
        let x_kink = Tensor::from_vec(kink_free(&mut rng, 24, 1e-3), &shape);
        let x_smooth = Tensor::from_vec(uniform(&mut rng, 24, -2.0, 2.0), &shape);
        let x_pos = Tensor::from_vec(uniform(&mut rng, 24, 0.3, 3.0), &shape);
        let w = probe(&mut rng, &shape);

        let wb = w.clone();
        let e = finite_diff_gradcheck(move |x| weighted_sum(&relu(x), &wb), &x_kink, EPS);
        out.push(OpGradReport::new("relu", e, tol));
        let wb = w.clone();
        let e = finite_diff_gradcheck(move |x| weighted_sum(&abs(x), &wb), &x_kink, EPS);
        out.push(OpGradReport::new("abs", e, tol));
        let wb = w.clone();
        let e = finite_diff_gradcheck(move |x| weighted_sum(&sigmoid(x), &wb), &x_smooth, EPS);
        out.push(OpGradReport::new("sigmoid", e, tol));
        let wb = w.clone();
        let e =
            finite_diff_gradcheck(move |x| weighted_sum(&log_sigmoid(x), &wb), &x_smooth, EPS);
        out.push(OpGradReport::new("log_sigmoid", e, tol));
        let wb = w.clone();
        let e = finite_diff_gradcheck(move |x| weighted_sum(&ln(x), &wb), &x_pos, EPS);
        out.push(OpGradReport::new("ln", e, tol));
        let wb = w.clone();
        let e = finite_diff_gradcheck(move |x| weighted_sum(&exp(x), &wb), &x_smooth, EPS);
        out.push(OpGradReport::new("exp", e, tol));
        let e = finite_diff_gradcheck(|x| sum_all(x), &x_smooth, EPS);
        out.push(OpGradReport::new("sum", e, tol));
        let e = finite_diff_gradcheck(|x| mean_all(x), &x_smooth, EPS);
        out.push(OpGradReport::new("mean", e, tol));
    }

    // softmax
    {
        let shape = [3, 4];
        let x = Tensor::from_vec(uniform(&mut rng, 12, -3.0, 3.0), &shape);
        let w = probe(&mut rng, &shape);
        let e = finite_diff_gradcheck(move |x| weighted_sum(&softmax(x), &w), &x, EPS);
        out.push(OpGradReport::new("softmax", e, tol));
    }

    // concat / slice
    {
        let shape = [2, 3, 2, 2];
        let a = Tensor::from_vec(uniform(&mut rng, 24, -2.0, 2.0), &shape);
        let b = Tensor::from_vec(uniform(&mut rng, 24, -2.0, 2.0), &shape);
        let w = probe(&mut rng, &[2, 6, 2, 2]);
        let (wb, bb) = (w.clone(), b.clone());
        let e1 = finite_diff_gradcheck(
            move |x| weighted_sum(&concat_channels(&[x.clone(), bb.clone()]), &wb),
            &a,
            EPS,
        );
        let (wb, ab) = (w.clone(), a.clone());
        let e2 = finite_diff_gradcheck(
            move |x| weighted_sum(&concat_channels(&[ab.clone(), x.clone()]), &wb),
            &b,
            EPS,
        );
        out.push(OpGradReport::new("concat_channels", e1.max(e2), tol));
        let ws = probe(&mut rng, &[2, 2, 2, 2]);
        let e = finite_diff_gradcheck(
            move |x| weighted_sum(&slice_channels(x, 1, 3), &ws),
            &a,
            EPS,
        );
        out.push(OpGradReport::new("slice_channels", e, tol));
    }

    // linear — input, weight, bias
    {
        let x = Tensor::from_vec(uniform(&mut rng, 3 * 5, -1.0, 1.0), &[3, 5]);
        let wt = Tensor::from_vec(uniform(&mut rng, 4 * 5, -1.0, 1.0), &[4, 5]);
        let bias = Tensor::from_vec(uniform(&mut rng, 4, -1.0, 1.0), &[4]);
        let w = probe(&mut rng, &[3, 4]);
        let (wb, wtb, bb) = (w.clone(), wt.clone(), bias.clone());
        let e1 = finite_diff_gradcheck(
            move |v| weighted_sum(&linear(v, &wtb, &bb), &wb),
            &x,
            EPS,
        );
        let (wb, xb, bb) = (w.clone(), x.clone(), bias.clone());
        let e2 = finite_diff_gradcheck(
            move |v| weighted_sum(&linear(&xb, v, &bb), &wb),
            &wt,
            EPS,
        );
        let (wb, xb, wtb) = (w.clone(), x.clone(), wt.clone());
        let e3 = finite_diff_gradcheck(
            move |v| weighted_sum(&linear(&xb, &wtb, v), &wb),
            &bias,
            EPS,
        );
        out.push(OpGradReport::new("linear", e1.max(e2).max(e3), tol));
    }

    // conv2d — input, weight, bias
    {
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 5 * 5, -1.0, 1.0), &[2, 3, 5, 5]);
        let wt = Tensor::from_vec(uniform(&mut rng, 4 * 3 * 3 * 3, -1.0, 1.0), &[4, 3, 3, 3]);
        let bias = Tensor::from_vec(uniform(&mut rng, 4, -1.0, 1.0), &[4]);
        let w = probe(&mut rng, &[2, 4, 3, 3]);
        let (wb, wtb, bb) = (w.clone(), wt.clone(), bias.clone());
        let e1 = finite_diff_gradcheck(
            move |v| weighted_sum(&conv2d(v, &wtb, &bb, 2, 1).unwrap(), &wb),
            &x,
            EPS,
        );
        let (wb, xb, bb) = (w.clone(), x.clone(), bias.clone());
        let e2 = finite_diff_gradcheck(
            move |v| weighted_sum(&conv2d(&xb, v, &bb, 2, 1).unwrap(), &wb),
            &wt,
            EPS,
        );
        let (wb, xb, wtb) = (w.clone(), x.clone(), wt.clone());
        let e3 = finite_diff_gradcheck(
            move |v| weighted_sum(&conv2d(&xb, &wtb, v, 2, 1).unwrap(), &wb),
            &bias,
            EPS,
        );
        out.push(OpGradReport::new("conv2d", e1.max(e2).max(e3), tol));
    }

    // global average pool
    {
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 4 * 4, -2.0, 2.0), &[2, 3, 4, 4]);
        let w = probe(&mut rng, &[2, 3]);
        let e = finite_diff_gradcheck(
            move |v| weighted_sum(&global_average_pool(v), &w),
            &x,
            EPS,
        );
        out.push(OpGradReport::new("global_average_pool", e, tol));
    }

    // upsample
    {
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 2 * 3 * 3, -2.0, 2.0), &[2, 2, 3, 3]);
        let w = probe(&mut rng, &[2, 2, 6, 6]);
        let e = finite_diff_gradcheck(
            move |v| weighted_sum(&upsample_nearest_2x(v), &w),
            &x,
            EPS,
        );
        out.push(OpGradReport::new("upsample_nearest_2x", e, tol));
    }

    // max pool — regenerate until every window's top-2 gap clears the kink margin
    {
        let shape = [1, 2, 6, 6];
        let x = loop {
            let cand = uniform(&mut rng, 72, -2.0, 2.0);
            if maxpool_windows_separated(&cand, 2, 6, 6, 2, 2) {
                break Tensor::from_vec(cand, &shape);
            }
        };
        let w = probe(&mut rng, &[1, 2, 3, 3]);
        let e = finite_diff_gradcheck(
            move |v| weighted_sum(&max_pool2d(v, 2, 2), &w),
            &x,
            EPS,
        );
        out.push(OpGradReport::new("max_pool2d", e, tol));
    }

    // broadcast multiplies
    {
        let x = Tensor::from_vec(uniform(&mut rng, 3 * 2 * 2, -2.0, 2.0), &[3, 2, 2]);
        let s = Tensor::from_vec(vec![rng.gen_range(0.5..1.5)], &[1]);
        let w = probe(&mut rng, &[3, 2, 2]);
        let (wb, sb) = (w.clone(), s.clone());
        let e1 = finite_diff_gradcheck(move |v| weighted_sum(&scale_by(v, &sb), &wb), &x, EPS);
        let (wb, xb) = (w.clone(), x.clone());
        let e2 = finite_diff_gradcheck(move |v| weighted_sum(&scale_by(&xb, v), &wb), &s, EPS);
        out.push(OpGradReport::new("scale_by", e1.max(e2), tol));

        let pw = Tensor::from_vec(uniform(&mut rng, 3, 0.2, 1.8), &[3]);
        let (wb, pwb) = (w.clone(), pw.clone());
        let e1 =
            finite_diff_gradcheck(move |v| weighted_sum(&mul_per_sample(v, &pwb), &wb), &x, EPS);
        let (wb, xb) = (w.clone(), x.clone());
        let e2 =
            finite_diff_gradcheck(move |v| weighted_sum(&mul_per_sample(&xb, v), &wb), &pw, EPS);
        out.push(OpGradReport::new("mul_per_sample", e1.max(e2), tol));

        let cw = Tensor::from_vec(uniform(&mut rng, 6, 0.2, 1.8), &[3, 2]);
        let (wb, cwb) = (w.clone(), cw.clone());
        let e1 =
            finite_diff_gradcheck(move |v| weighted_sum(&mul_per_channel(v, &cwb), &wb), &x, EPS);
        let (wb, xb) = (w.clone(), x.clone());
        let e2 =
            finite_diff_gradcheck(move |v| weighted_sum(&mul_per_channel(&xb, v), &wb), &cw, EPS);
        out.push(OpGradReport::new("mul_per_channel", e1.max(e2), tol));
    }

    out
}

fn maxpool_windows_separated(
    data: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> bool {
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut vals = Vec::with_capacity(kernel * kernel);
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        vals.push(plane[(oy * stride + ki) * w + ox * stride + kj]);
                    }
                }
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] - vals[1] < 1e-3 {
                    return false;
                }
            }
        }
    }
    true
}

/// Worst error per op across the given seeds.
pub fn op_suite_multi(seeds: std::ops::Range<u64>) -> Vec<OpGradReport> {
    let mut agg: Vec<OpGradReport> = Vec::new();
    for seed in seeds {
        let reports = op_suite(seed);
        if agg.is_empty() {
            agg = reports;
        } else {
            for (a, r) in agg.iter_mut().zip(reports) {
                if r.max_rel_err > a.max_rel_err {
                    a.max_rel_err = r.max_rel_err;
                    a.pass = r.pass;
                }
            }
        }
    }
    agg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_vec(vec![0.4, -1.2, 2.5, 0.01], &[4]);
        let err = finite_diff_gradcheck(|v| sum_all(v), &x, 1e-5);
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn l1_away_from_kinks_passes() {
        let x = Tensor::from_vec(vec![1.0, -0.7, 2.3, 0.4], &[4]);
        let t = Tensor::from_vec(vec![0.2, 0.5, -1.0, -0.4], &[4]);
        let err = finite_diff_gradcheck(move |v| sum_all(&abs(&sub(v, &t))), &x, 1e-5);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn relu_away_from_boundary_passes() {
        let x = Tensor::from_vec(vec![0.8, -0.9, 1.4, -2.0, 0.3, -0.25], &[6]);
        let err = finite_diff_gradcheck(|v| sum_all(&relu(v)), &x, 1e-5);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn composed_network_graph_passes() {
        // conv2d -> relu -> GAP -> linear -> softmax -> weighted loss
        let mut rng = rng_for(42);
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 2 * 6 * 6, -1.0, 1.0), &[2, 2, 6, 6]);
        let cw = Tensor::from_vec(uniform(&mut rng, 3 * 2 * 3 * 3, -0.6, 0.6), &[3, 2, 3, 3]);
        let cb = Tensor::from_vec(uniform(&mut rng, 3, -0.2, 0.2), &[3]);
        let lw = Tensor::from_vec(uniform(&mut rng, 4 * 3, -0.6, 0.6), &[4, 3]);
        let lb = Tensor::from_vec(uniform(&mut rng, 4, -0.2, 0.2), &[4]);
        let probe_w = probe(&mut rng, &[2, 4]);

        let forward = |cw: &Tensor<f64>| {
            let h = relu(&conv2d(&x, cw, &cb, 1, 1).unwrap());
            let pooled = global_average_pool(&h);
            let logits = linear(&pooled, &lw, &lb);
            weighted_sum(&softmax(&logits), &probe_w)
        };
        let err = finite_diff_gradcheck(forward, &cw, 1e-5);
        assert!(err < 1e-3, "composed graph err = {err}");
    }

    #[test]
    fn full_op_suite_passes_ten_seeds() {
        for r in op_suite_multi(0..10) {
            assert!(
                r.pass,
                "op {} failed gradcheck: {} >= {}",
                r.name, r.max_rel_err, r.tolerance
            );
        }
    }

    #[test]
    fn sabotaged_op_is_caught_and_named() {
        // Wrong backward rule (gradient scaled by 2) must be reported.
        let broken_double = |x: &Tensor<f64>| {
            Tensor::custom_op(
                x.data().iter().map(|&v| 2.0 * v).collect(),
                x.shape(),
                vec![x.clone()],
                |ctx| vec![Some(ctx.grad_out.iter().map(|&g| 4.0 * g).collect())],
            )
        };
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3]);
        let err = finite_diff_gradcheck(move |v| sum_all(&broken_double(v)), &x, 1e-5);
        let report = OpGradReport::new("sabotaged_double", err, GRADCHECK_TOL);
        assert!(!report.pass);
        assert_eq!(report.name, "sabotaged_double");
        assert!(report.max_rel_err > 0.4);
    }
}
