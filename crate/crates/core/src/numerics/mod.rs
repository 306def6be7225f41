//! Differentiable-computation substrate: tensors, a reverse-mode tape, AdamW,
//! the warmup-cosine schedule, gradient verification and checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod schedule;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
};
pub use gradcheck::{
    analytic_gradients, check_gradients, compare_with_finite_differences, relative_error, GradCheckConfig,
    GradCheckReport,
};
pub use graph::{logistic, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bindings, ParamId, ParamStore};
pub use scalar::Scalar;
pub use schedule::cosine_schedule;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("unsupported tensor rank {0}")]
    Rank(usize),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("{0} over an empty axis")]
    EmptyAxis(&'static str),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("invalid initialization scale {0}")]
    InvalidInit(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Gradient check of `build`, which receives the bound inputs and must
    /// return a tensor that is reduced to a scalar through a fixed random
    /// weighting (so every output coordinate matters).
    fn check_op(
        inputs: Vec<Tensor<f64>>,
        seed: u64,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
    ) -> f64 {
        let mut store = ParamStore::new();
        for (i, t) in inputs.into_iter().enumerate() {
            store.insert(format!("x{i}"), t).unwrap();
        }
        let weights = std::cell::RefCell::new(None::<Tensor<f64>>);
        let f = |g: &mut Graph<f64>, b: &Bindings| -> Result<Var, NumericsError> {
            let y = build(g, b.vars())?;
            let shape = g.value(y).shape().to_vec();
            let w = weights
                .borrow_mut()
                .get_or_insert_with(|| random(&mut ChaCha8Rng::seed_from_u64(seed), &shape))
                .clone();
            let w = g.constant(w);
            let prod = g.mul(y, w)?;
            Ok(g.sum(prod))
        };
        check_gradients(f, &store, GradCheckConfig::default()).unwrap().max_rel_error
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![0], vec![]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(NumericsError::EmptyAxis(_))));
    }

    #[test]
    fn l2_normalize_345() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let mut g = Graph::<f64>::new();
        let av = g.param(a);
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let da = grads.get(av).unwrap();
        // (ones(3x2) * B^T)[i][k] = sum_j B[k][j]
        for i in 0..3 {
            for k in 0..4 {
                let expected: f64 = (0..2).map(|j| b.get2(k, j)).sum();
                assert!((da.get2(i, k) - expected).abs() < 1e-12);
            }
        }
        // finite-difference oracle agrees as well
        let err = check_op(vec![random(&mut rng, &[3, 4]), b], 0, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum(c))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn quadratic_gradcheck() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let f = |g: &mut Graph<f64>, b: &Bindings| -> Result<Var, NumericsError> {
            let x = b.var(ParamId(0));
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let (_, grads) = analytic_gradients(&f, &store).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        let report = check_gradients(f, &store, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let f = |g: &mut Graph<f64>, b: &Bindings| -> Result<Var, NumericsError> {
            let x = b.var(ParamId(0));
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let (_, mut grads) = analytic_gradients(&f, &store).unwrap();
        grads[0].data_mut()[1] *= 1.1;
        let report = compare_with_finite_differences(&f, &store, &grads, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
        assert_eq!(report.worst_coord, 1);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 7]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[7], 1.0));
        let beta = g.constant(Tensor::zeros(&[7]));
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        let y = g.value(y);
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn bce_and_cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![2.0, -2.0]));
        let l = g.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        let softplus_m2 = (1.0 + (-2.0f64).exp()).ln();
        assert!((g.value(l).data()[0] - softplus_m2).abs() < 1e-15);

        let z = g.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let ce = g.cross_entropy_rows(z, &[0, 1]).unwrap();
        assert!((g.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gather_rows_only_touches_selected_rows() {
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap());
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        let s = g.sum(rows);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
        (1usize..=8, 1usize..=8, 1usize..=8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_passes_gradcheck((r, c, k) in dims(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tol = 1e-6;
            let cases: Vec<(&str, f64)> = vec![
                ("matmul", check_op(vec![random(&mut rng, &[r, k]), random(&mut rng, &[k, c])], seed, |g, v| g.matmul(v[0], v[1]))),
                ("matmul_nt", check_op(vec![random(&mut rng, &[r, k]), random(&mut rng, &[c, k])], seed, |g, v| g.matmul_nt(v[0], v[1]))),
                ("add", check_op(vec![random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], seed, |g, v| g.add(v[0], v[1]))),
                ("add_row", check_op(vec![random(&mut rng, &[r, c]), random(&mut rng, &[c])], seed, |g, v| g.add_row(v[0], v[1]))),
                ("mul", check_op(vec![random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], seed, |g, v| g.mul(v[0], v[1]))),
                ("scale", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| Ok(g.scale(v[0], -1.7)))),
                ("transpose", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.transpose(v[0]))),
                // Two-column rows normalize to (-1, 1) whatever the input, leaving a
                // gradient at the finite-difference noise level; start at three.
                ("layer_norm", check_op(vec![random(&mut rng, &[r, c + 2]), random(&mut rng, &[c + 2]), random(&mut rng, &[c + 2])], seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
                ("gelu", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| Ok(g.gelu(v[0])))),
                ("softmax1", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.softmax(v[0], 1))),
                ("softmax0", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.softmax(v[0], 0))),
                ("mean_pool0", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.mean_pool(v[0], 0))),
                ("mean_pool1", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.mean_pool(v[0], 1))),
                ("concat0", check_op(vec![random(&mut rng, &[r, c]), random(&mut rng, &[k, c])], seed, |g, v| g.concat(&[v[0], v[1]], 0))),
                ("concat1", check_op(vec![random(&mut rng, &[r, c]), random(&mut rng, &[r, k])], seed, |g, v| g.concat(&[v[0], v[1]], 1))),
                ("gather", check_op(vec![random(&mut rng, &[r, c])], seed, move |g, v| g.gather_rows(v[0], &[r - 1, 0, r / 2, r - 1]))),
                ("slice", check_op(vec![random(&mut rng, &[r, c + k])], seed, move |g, v| g.slice_cols(v[0], k / 2, c))),
                ("l2_normalize1", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.l2_normalize(v[0], 1))),
                ("l2_normalize0", check_op(vec![random(&mut rng, &[r, c])], seed, |g, v| g.l2_normalize(v[0], 0))),
                ("cross_entropy", check_op(vec![random(&mut rng, &[r, c])], seed, move |g, v| {
                    let t: Vec<usize> = (0..r).map(|i| (i * 7 + 3) % c).collect();
                    g.cross_entropy_rows(v[0], &t)
                })),
                ("bce", check_op(vec![random(&mut rng, &[r, c])], seed, move |g, v| {
                    let y: Vec<f64> = (0..r * c).map(|i| (i % 2) as f64).collect();
                    g.bce_with_logits(v[0], &y)
                })),
            ];
            for (name, err) in cases {
                prop_assert!(err < tol, "{} rel err {}", name, err);
            }
        }

        #[test]
        fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..9, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            let x = g.constant(random(&mut rng, &[r, c]));
            let x = g.scale(x, 20.0);
            let y = g.softmax(x, 1).unwrap();
            let y = g.value(y);
            for row in 0..r {
                prop_assert!(y.row(row).iter().all(|&v| v >= 0.0));
                prop_assert!((y.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
