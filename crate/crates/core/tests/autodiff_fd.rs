//! Every primitive against central finite differences in 64-bit.

use fomo_core::autodiff::{Graph, Var};
use fomo_core::gradcheck::{grad_check_graph, GradCheckConfig, Stencil};
use fomo_core::params::ParamStore;
use fomo_core::tensor::Tensor;
use fomo_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Checks `build` with every input as a parameter. Non-scalar outputs are
/// reduced against a fixed random weighting so the upstream gradient is not uniform.
fn check<F>(shapes: &[Vec<usize>], seed: u64, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("x{i}"), random(s, &mut rng)).unwrap();
    }
    let probe_seed: u64 = rng.gen();
    let ids: Vec<_> = store.ids().collect();
    let report = grad_check_graph(
        &store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id, s)).collect();
            let out = build(g, &vars)?;
            let shape = g.value(out).shape().to_vec();
            if shape.iter().product::<usize>() == 1 {
                return g.sum(out);
            }
            let w = random(&shape, &mut ChaCha8Rng::seed_from_u64(probe_seed));
            let w = g.input(w)?;
            let prod = g.mul(out, w)?;
            g.sum(prod)
        },
        GradCheckConfig {
            eps: 1e-5,
            tol: TOL,
            max_per_param: None,
            stencil: Stencil::TwoPoint,
        },
    )
    .unwrap();
    assert!(
        report.passed,
        "shapes {shapes:?}: max rel err {} at {}[{}]",
        report.max_rel_err, report.worst_param, report.worst_index
    );
}

const MATRICES: [(usize, usize); 3] = [(1, 1), (3, 4), (5, 7)];

#[test]
fn matmul_three_shapes() {
    for (i, (m, k, n)) in [(1, 1, 1), (3, 4, 2), (6, 5, 7)].into_iter().enumerate() {
        check(&[vec![m, k], vec![k, n]], i as u64, |g, v| g.matmul(v[0], v[1]));
    }
}

#[test]
fn elementwise_binary_ops() {
    for (i, (r, c)) in MATRICES.into_iter().enumerate() {
        let s = vec![r, c];
        check(&[s.clone(), s.clone()], 10 + i as u64, |g, v| g.add(v[0], v[1]));
        check(&[s.clone(), s.clone()], 20 + i as u64, |g, v| g.mul(v[0], v[1]));
        check(&[s.clone(), vec![c]], 30 + i as u64, |g, v| g.add_row(v[0], v[1]));
        check(&[s.clone()], 40 + i as u64, |g, v| g.scale(v[0], -1.7));
    }
}

#[test]
fn gelu_softmax_layer_norm() {
    for (i, (r, c)) in MATRICES.into_iter().enumerate() {
        check(&[vec![r, c]], 50 + i as u64, |g, v| g.gelu(v[0]));
        check(&[vec![r, c]], 60 + i as u64, |g, v| g.softmax(v[0]));
    }
    for (i, (r, c)) in [(2, 8), (3, 4), (5, 8)].into_iter().enumerate() {
        check(&[vec![r, c], vec![c], vec![c]], 70 + i as u64, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6)
        });
    }
}

#[test]
fn shape_and_indexing_ops() {
    for (i, (r, c)) in MATRICES.into_iter().enumerate() {
        check(&[vec![r, c]], 80 + i as u64, |g, v| g.transpose(v[0]));
        check(&[vec![r, c]], 90 + i as u64, |g, v| g.reshape(v[0], &[c, r]));
        check(&[vec![r, c]], 100 + i as u64, |g, v| g.mean(v[0]));
        let gather: Vec<usize> = (0..r + 2).map(|j| (j * 7) % r).collect();
        check(&[vec![r, c]], 110 + i as u64, move |g, v| g.gather_rows(v[0], &gather));
        let scatter: Vec<usize> = (0..r).map(|j| (j * 3) % (r + 1)).collect();
        check(&[vec![r, c]], 120 + i as u64, move |g, v| g.scatter_rows(v[0], &scatter, r + 1));
    }
}

#[test]
fn linear_layer() {
    for (i, (m, k, n)) in [(1, 2, 1), (4, 3, 5), (7, 6, 2)].into_iter().enumerate() {
        check(&[vec![m, k], vec![k, n], vec![n]], 130 + i as u64, |g, v| g.linear(v[0], v[1], v[2]));
    }
}

#[test]
fn segmented_attention() {
    let cases = [(4, 2, vec![0..4]), (6, 3, vec![0..2, 2..6]), (9, 2, vec![0..1, 1..5, 5..9])];
    for (i, (t, heads, segs)) in cases.into_iter().enumerate() {
        let d = 2 * heads;
        check(&[vec![t, 3 * d]], 140 + i as u64, move |g, v| g.attention(v[0], heads, &segs));
    }
}

#[test]
fn losses() {
    for (i, (r, c)) in [(1, 2), (3, 4), (6, 5)].into_iter().enumerate() {
        let labels: Vec<usize> = (0..r).map(|j| (j * 5 + 1) % c).collect();
        check(&[vec![r, c]], 150 + i as u64, move |g, v| g.softmax_cross_entropy(v[0], &labels));
        let targets = Tensor::new(vec![r, c], (0..r * c).map(|j| (j % 3 == 0) as u8 as f64).collect()).unwrap();
        check(&[vec![r, c]], 160 + i as u64, move |g, v| g.sigmoid_bce(v[0], &targets));
    }
}

#[test]
fn composite_block_shares_leaves() {
    // x used twice: leaf gradients must accumulate.
    check(&[vec![3, 4], vec![4, 4]], 170, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.gelu(h)?;
        let s = g.add(h, v[0])?;
        g.softmax(s)
    });
}
