//! Reverse-mode differentiation over dense rank-2 arrays.
//!
//! A [`Graph`] records primitive operations; `forward` evaluates them and
//! `backward` propagates the gradient of a scalar root to every upstream
//! node. Everything trainable in the crate is expressed on top of this.

mod array;
mod check;
mod graph;
mod optim;

pub use array::DenseArray;
pub use check::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, LeafKind, NodeId, Op};
pub use optim::{BoundParams, ParamGrads, ParamId, ParamStore, Sgd};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op} (node {node}): {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward root must be a single value, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("backward called before forward evaluated the root")]
    ForwardNotRun,
    #[error("leaf {0} has no bound value")]
    UnboundLeaf(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("graph is empty")]
    EmptyGraph,
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
    #[error("learning rate {0} must be non-negative")]
    InvalidLearningRate(f64),
    #[error("non-finite gradient; step refused")]
    NonFiniteGradient,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> DenseArray<f64> {
        DenseArray::scalar(v)
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.input(s(3.0));
        let y = g.mul(x, x);
        assert_eq!(g.forward().unwrap().item(), Some(9.0));
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.input(s(0.0));
        let y = g.tanh(x);
        g.forward().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), Some(1.0));
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.input(DenseArray::zeros(3, 1));
        g.softmax(x);
        let out = g.forward().unwrap();
        for &v in out.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(DenseArray::zeros(2, 1));
        let b = g.input(DenseArray::zeros(3, 1));
        g.add(a, b);
        match g.forward() {
            Err(AutodiffError::ShapeMismatch { op, left, right, .. }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2, 1]);
                assert_eq!(right, vec![3, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::new();
        let a = g.input(s(f64::MAX));
        g.add(a, a);
        assert!(matches!(g.forward(), Err(AutodiffError::NonFinite { node: 1, .. })));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input(DenseArray::zeros(2, 1));
        let t = g.tanh(a);
        assert_eq!(g.backward(t).err(), Some(AutodiffError::ForwardNotRun));
        g.forward().unwrap();
        assert!(matches!(g.backward(t), Err(AutodiffError::RootNotScalar(_))));
    }

    #[test]
    fn unbound_placeholder() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.placeholder();
        g.tanh(p);
        assert_eq!(g.forward().err(), Some(AutodiffError::UnboundLeaf(0)));
        let out = g.forward_with(&[(p, s(0.0))]).unwrap();
        assert_eq!(out.item(), Some(0.0));
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // y = tanh(x) * sigmoid(x); dy/dx = (1 - t²) σ + t σ (1 - σ)
        let x0: f64 = 0.7;
        let mut g = Graph::new();
        let x = g.input(s(x0));
        let t = g.tanh(x);
        let sg = g.sigmoid(x);
        let y = g.mul(t, sg);
        g.forward().unwrap();
        let got = g.backward(y).unwrap().get(x).unwrap().item().unwrap();
        let (tv, sv) = (x0.tanh(), 1.0 / (1.0 + (-x0).exp()));
        let path_a = (1.0 - tv * tv) * sv;
        let path_b = tv * sv * (1.0 - sv);
        assert!((got - (path_a + path_b)).abs() < 1e-15);
    }

    #[test]
    fn rebinding_reevaluates() {
        let mut g = Graph::new();
        let x = g.input(s(1.0));
        let y = g.mul(x, x);
        g.forward().unwrap();
        g.bind(x, s(4.0)).unwrap();
        g.forward().unwrap();
        assert_eq!(g.v(y).item(), Some(16.0));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.input(DenseArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.input(DenseArray::matrix(2, 1, vec![5.0, 6.0]));
        let c = g.concat(&[a, b], 1);
        let r = g.slice(c, 1, 1, 3);
        let rows = g.concat(&[a, a], 0);
        g.forward().unwrap();
        assert_eq!(g.v(c).values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(g.v(r).values(), &[2.0, 5.0, 4.0, 6.0]);
        assert_eq!(g.v(rows).shape(), &[4, 2]);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let w = g.parameter(DenseArray::matrix(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let x = g.input(DenseArray::column((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let y = g.matmul(w, x);
        let rep = grad_check(&mut g, y, &[w, x], 1e-5).unwrap();
        assert!(rep.max_relative_error < 1e-9, "{rep:?}");
    }

    #[test]
    fn grad_check_abs_away_from_kink() {
        let mut g = Graph::new();
        let x = g.input(s(1.0));
        let y = g.abs(x);
        let rep = grad_check(&mut g, y, &[x], 1e-5).unwrap();
        assert!(rep.max_relative_error < 1e-9);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let mut g = Graph::new();
        let x = g.input(s(1.0));
        let y = g.abs(x);
        assert!(grad_check(&mut g, y, &[x], 0.5).is_err());
        assert!(grad_check(&mut g, y, &[x], 0.0).is_err());
    }

    #[test]
    fn abs_subgradient_at_kink_is_zero() {
        let mut g = Graph::new();
        let x = g.input(s(0.0));
        let y = g.abs(x);
        g.forward().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), Some(0.0));
    }

    fn single(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", s(v));
        (store, id)
    }

    #[test]
    fn sgd_definition() {
        let (mut store, id) = single(1.0);
        let mut grads = store.zero_grads();
        grads.0[0] = s(0.5);
        Sgd::new(0.1).step(&mut [(&mut store, &mut grads)]).unwrap();
        assert!((store.get(id).item().unwrap() - 0.95).abs() < 1e-15);
        assert_eq!(grads.get(id).item(), Some(0.0));
    }

    #[test]
    fn sgd_global_norm_clip() {
        let mut store = ParamStore::new();
        let a = store.add("a", s(0.0));
        let b = store.add("b", s(0.0));
        let mut grads = store.zero_grads();
        grads.0[0] = s(6.0);
        grads.0[1] = s(8.0);
        let norm = Sgd::new(1.0)
            .with_clip(Some(1.0))
            .step(&mut [(&mut store, &mut grads)])
            .unwrap();
        assert_eq!(norm, 10.0);
        assert!((store.get(a).item().unwrap() + 0.6).abs() < 1e-15);
        assert!((store.get(b).item().unwrap() + 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_refuses_non_finite() {
        let (mut store, id) = single(1.0);
        let mut grads = store.zero_grads();
        grads.0[0] = s(f64::NAN);
        let err = Sgd::new(0.1).step(&mut [(&mut store, &mut grads)]);
        assert_eq!(err, Err(AutodiffError::NonFiniteGradient));
        assert_eq!(store.get(id).item(), Some(1.0));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p - 2)², gradient 2(p - 2); error shrinks by 0.8 per step.
        let (mut store, id) = single(0.0);
        let sgd = Sgd::new(0.1);
        for _ in 0..100 {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let p = bound[id];
            let d = {
                let two = g.constant(s(-2.0));
                g.add(p, two)
            };
            let f = g.mul(d, d);
            g.forward().unwrap();
            let mut grads = bound.collect(&store, &g.backward(f).unwrap());
            sgd.step(&mut [(&mut store, &mut grads)]).unwrap();
        }
        let p = store.get(id).item().unwrap();
        assert!((p - 2.0).abs() < 1e-3, "{p}");
        // Closed form: 2 (1 - 0.8^100)
        assert!((p - 2.0 * (1.0 - 0.8f64.powi(100))).abs() < 1e-12);
    }

    #[test]
    fn generic_over_f32() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(DenseArray::scalar(3.0f32));
        let y = g.mul(x, x);
        g.forward().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), Some(6.0f32));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn softmax(v: &[f64]) -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let x = g.input(DenseArray::matrix(1, v.len(), v.to_vec()));
            g.softmax(x);
            g.forward().unwrap().values().to_vec()
        }

        proptest! {
            #[test]
            fn softmax_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..64), c in -100.0f64..100.0) {
                let a = softmax(&v);
                let b = softmax(&v.iter().map(|x| x + c).collect::<Vec<_>>());
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!(*x >= 0.0);
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }

            #[test]
            fn log_softmax_exponentiates_to_softmax(v in prop::collection::vec(-30.0f64..30.0, 1..20)) {
                let mut g = Graph::<f64>::new();
                let x = g.input(DenseArray::column(v.clone()));
                g.log_softmax(x);
                let l = g.forward().unwrap().values().to_vec();
                let s = softmax(&v);
                for (a, b) in l.iter().zip(&s) {
                    prop_assert!((a.exp() - b).abs() <= 1e-12);
                }
            }
        }
    }
}
