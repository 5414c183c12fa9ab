//! Finite-difference oracles for the autodiff engine.
//!
//! Every gradient assertion here is checked against central differences
//! computed by re-running the forward pass, never against the engine's own
//! backward path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uamp_core::autodiff::{Graph, NodeId, Tensor};

const FD_H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// Denominator floor sits above central-difference noise (~1e-11 for O(1)
// losses at h = 1e-5) so exact zeros do not read as spurious error.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check d(scalar build(params))/d(params) against central differences.
fn gradcheck<F>(params: &[Tensor], build: F, tol: f64)
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };

    // analytic
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.grad_values(out, &ids).unwrap();

    // finite differences
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += FD_H;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let an = grads[pi].data()[ei];
            assert!(
                rel_err(an, fd) < tol,
                "param {} elem {}: analytic {} vs fd {} (rel {})",
                pi,
                ei,
                an,
                fd,
                rel_err(an, fd)
            );
        }
    }
}

#[test]
fn gradcheck_matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    gradcheck(&[a, b], |g, p| {
        let c = g.matmul(p[0], p[1]).unwrap();
        let s = g.square(c);
        g.mean(s)
    }, REL_TOL);
}

#[test]
fn gradcheck_add_sub_mul_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 3], &mut rng);
    gradcheck(&[a, b], |g, p| {
        // 1.7 * mean((a+b) * (a-b))
        let s = g.add(p[0], p[1]).unwrap();
        let d = g.sub(p[0], p[1]).unwrap();
        let m = g.mul(s, d).unwrap();
        let sc = g.scale(m, 1.7);
        g.mean(sc)
    }, REL_TOL);
}

#[test]
fn gradcheck_bias_and_row_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 3], &mut rng);
    let b = rand_tensor(&[1, 3], &mut rng);
    gradcheck(&[x, b], |g, p| {
        let h = g.add_bias(p[0], p[1]).unwrap();
        let r = g.sum_rows(h).unwrap();
        let br = g.broadcast_rows(r, 4).unwrap();
        let sq = g.square(br);
        g.mean(sq)
    }, REL_TOL);
}

#[test]
fn gradcheck_relu_tanh_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // keep relu inputs away from the kink
    let mut x = rand_tensor(&[3, 3], &mut rng);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    gradcheck(&[x], |g, p| {
        let r = g.relu(p[0]);
        let t = g.tanh(r);
        let s = g.square(t);
        g.mean(s)
    }, REL_TOL);
}

#[test]
fn gradcheck_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[1, 6], &mut rng);
    let w = rand_tensor(&[1, 6], &mut rng);
    gradcheck(&[x, w], |g, p| {
        let s = g.softmax(p[0]).unwrap();
        let d = g.dot(s, p[1]).unwrap();
        g.square(d)
    }, REL_TOL);
}

#[test]
fn gradcheck_concat_slice_pad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 2], &mut rng);
    gradcheck(&[a, b], |g, p| {
        let c = g.concat_cols(&[p[0], p[1]]).unwrap();
        let s = g.slice_cols(c, 1, 3).unwrap();
        let padded = g.pad_cols(s, 2, 6).unwrap();
        let sq = g.square(padded);
        g.mean(sq)
    }, REL_TOL);
}

#[test]
fn gradcheck_transpose_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&[3, 2], &mut rng);
    gradcheck(&[a], |g, p| {
        let t = g.transpose(p[0]).unwrap();
        let s = g.sum_all(t);
        let b = g.broadcast_to(s, &[2, 2]).unwrap();
        let sq = g.square(b);
        g.mean(sq)
    }, REL_TOL);
}

/// MLP loss gradient vs central finite differences on a 4 -> 8 -> 2 net.
#[test]
fn gradcheck_mlp_4_8_2() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[5, 4], &mut rng);
    let y = rand_tensor(&[5, 2], &mut rng);
    let w1 = Tensor::kaiming_uniform(4, 8, &mut rng);
    let b1 = rand_tensor(&[1, 8], &mut rng);
    let w2 = Tensor::kaiming_uniform(8, 2, &mut rng);
    let b2 = rand_tensor(&[1, 2], &mut rng);

    gradcheck(&[w1, b1, w2, b2], move |g, p| {
        let xn = g.constant(x.clone());
        let yn = g.constant(y.clone());
        let h = g.matmul(xn, p[0]).unwrap();
        let h = g.add_bias(h, p[1]).unwrap();
        let h = g.relu(h);
        let o = g.matmul(h, p[2]).unwrap();
        let o = g.add_bias(o, p[3]).unwrap();
        let e = g.sub(o, yn).unwrap();
        let sq = g.square(e);
        g.mean(sq)
    }, REL_TOL);
}

/// Second-order check: for f(p) = L(p - a*grad L(p)) with quadratic
/// L(p) = sum(w * (p - c)^2), the meta-gradient is (1 - 2aw) * 2w * (p' - c)
/// evaluated at the adapted point p'. The engine's create-graph gradient
/// must match to 1e-8.
#[test]
fn second_order_quadratic_matches_analytic_meta_gradient() {
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p0 = rand_tensor(&[1, n], &mut rng);
    let w = Tensor::new(vec![1, n], (0..n).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
    let c = rand_tensor(&[1, n], &mut rng);
    let alpha = 0.1;

    let mut g = Graph::new();
    let p = g.leaf(p0.clone());
    let wn = g.constant(w.clone());
    let cn = g.constant(c.clone());

    let quadratic = |g: &mut Graph, p: NodeId, wn: NodeId, cn: NodeId| -> NodeId {
        let d = g.sub(p, cn).unwrap();
        let d2 = g.square(d);
        let wd2 = g.mul(wn, d2).unwrap();
        g.sum_all(wd2)
    };

    let loss = quadratic(&mut g, p, wn, cn);
    let grad = g.backward(loss, &[p], true).unwrap()[0];
    let step = g.scale(grad, alpha);
    let adapted = g.sub(p, step).unwrap();
    let meta = quadratic(&mut g, adapted, wn, cn);
    let engine = g.grad_values(meta, &[p]).unwrap()[0].clone();

    // analytic: grad L(p) = 2w(p-c); p' = p - 2aw(p-c);
    // d meta/dp = (1 - 2aw) * 2w(p' - c)
    for i in 0..n {
        let wi = w.data()[i];
        let gi = 2.0 * wi * (p0.data()[i] - c.data()[i]);
        let adapted_i = p0.data()[i] - alpha * gi;
        let analytic = (1.0 - 2.0 * alpha * wi) * 2.0 * wi * (adapted_i - c.data()[i]);
        assert!(
            (engine.data()[i] - analytic).abs() < 1e-8,
            "coord {}: engine {} vs analytic {}",
            i,
            engine.data()[i],
            analytic
        );
    }
}

/// First-order mode drops the curvature term: gradient of L(p - a*detached
/// grad) w.r.t. p is plain grad L evaluated at the adapted point.
#[test]
fn first_order_mode_gives_gradient_at_adapted_point() {
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p0 = rand_tensor(&[1, n], &mut rng);
    let alpha = 0.05;

    let mut g = Graph::new();
    let p = g.leaf(p0.clone());
    let loss = g.norm_sq(p);
    let grad = g.backward(loss, &[p], false).unwrap()[0];
    let step = g.scale(grad, alpha);
    let adapted = g.sub(p, step).unwrap();
    let meta = g.norm_sq(adapted);
    let engine = g.grad_values(meta, &[p]).unwrap()[0].clone();

    for i in 0..n {
        let adapted_i = p0.data()[i] * (1.0 - 2.0 * alpha);
        let analytic = 2.0 * adapted_i; // d||p'||^2 / dp with p' treated as p - const
        assert!((engine.data()[i] - analytic).abs() < 1e-12);
    }
}

#[test]
fn identical_seeds_give_bit_identical_runs() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_tensor(&[4, 4], &mut rng);
        let w = rand_tensor(&[4, 4], &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let wn = g.leaf(w);
        let h = g.matmul(xn, wn).unwrap();
        let t = g.tanh(h);
        let l = g.mean(t);
        let grads = g.grad_values(l, &[wn]).unwrap();
        grads[0].data().to_vec()
    };
    assert_eq!(run(), run());
}
