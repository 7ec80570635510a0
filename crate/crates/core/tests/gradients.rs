use lksde::gradcheck::{network_cases, op_cases};
use lksde::graph::Graph;
use lksde::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..SEEDS {
        for (name, r) in op_cases(seed).unwrap() {
            assert!(r.max_rel_error < 1e-4, "seed {seed} {name}: {r:?}");
            assert!(r.checked > 0, "seed {seed} {name}");
        }
    }
}

#[test]
fn every_network_matches_finite_differences() {
    for seed in 0..SEEDS {
        for (name, r) in network_cases(seed).unwrap() {
            assert!(r.max_rel_error < 1e-4, "seed {seed} {name}: {r:?}");
            assert!(r.nonzero > 0, "seed {seed} {name}");
        }
    }
}

fn sum_ab(a: &[f64], b: &[f64]) -> f64 {
    // A is 3x4, B is 4x2.
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                s += a[i * 4 + k] * b[k * 2 + j];
            }
        }
    }
    s
}

#[test]
fn matmul_sum_gradient_against_hand_rolled_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let va = g.param(Tensor::new(vec![3, 4], a.clone()).unwrap());
    let vb = g.constant(Tensor::new(vec![4, 2], b.clone()).unwrap());
    let ab = g.matmul(va, vb).unwrap();
    let root = g.sum(ab);
    g.backward(root).unwrap();
    let grad = g.grad(va);

    let h = 1e-5;
    for i in 0..12 {
        let mut up = a.clone();
        let mut dn = a.clone();
        up[i] += h;
        dn[i] -= h;
        let fd = (sum_ab(&up, &b) - sum_ab(&dn, &b)) / (2.0 * h);
        let an = grad.data()[i];
        assert!(
            (an - fd).abs() / an.abs().max(fd.abs()) < 1e-6,
            "{i}: {an} vs {fd}"
        );
    }
}
