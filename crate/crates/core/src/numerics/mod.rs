//! Flat tensors and a replayable reverse-mode tape.
//!
//! - [`Tensor`]: shape + row-major `f32` storage behind an `Arc`; immutable
//!   once built, cheap to clone.
//! - [`Tape`]: records primitive applications (matmul, add, mul, scale,
//!   softmax_rows, sigmoid, gelu, layer_norm, gather_rows, scatter_rows,
//!   sum, mean, square, concat, slice, transpose, broadcast) so
//!   `reverse_accumulate` can walk them backward exactly once. Kernel
//!   arithmetic runs in `f64` and rounds to `f32` at tensor boundaries.
//! - [`ComputationRecord`]: the finished program; supports backward passes,
//!   op inspection for cost counting, and full-`f64` replay.
//! - [`finite_difference_check`]: central-difference gradient verification
//!   against the replayed program.

mod fdcheck;
mod kernels;
mod serialize;
mod tape;
mod tensor;

pub use fdcheck::{finite_difference_check, FdReport, FD_DENOMINATOR_FLOOR};
pub use kernels::BroadcastAxis;
pub use serialize::{read_tensor_record, write_tensor_record};
pub use tape::{
    AttrValue, Attrs, ComputationRecord, GradientMap, Primitive, RecordMode, RecordedOp, Tape,
};
pub use tensor::{max_abs_diff, max_rel_diff, Tensor};

pub(crate) use serialize::{read_f64, read_u32, read_u64};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Independent oracle: naive i-j-k triple loop in f64 (the kernel runs
    /// i-k-j with a scratch accumulator, so agreement is not tautological).
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = vec![0.0f64; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] as f64 * b.data()[kk * m + j] as f64;
                }
                out[i * m + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, k, m) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (16, 16, 16), (1, 9, 2)] {
            let a = randn(&mut rng, &[n, k]);
            let b = randn(&mut rng, &[k, m]);
            let tape = Tape::off();
            let c = tape.matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (got, want) in c.data().iter().zip(&want) {
                assert!(
                    (*got as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()),
                    "matmul {n}x{k}x{m}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn one_by_one_matmul_is_a_product() {
        let tape = Tape::off();
        let a = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![-2.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[-6.0]);
    }

    #[test]
    fn mismatched_shapes_name_the_primitive_and_both_shapes() {
        let tape = Tape::off();
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 5]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("matmul"), "{text}");
        assert!(text.contains("[2, 3]") && text.contains("[4, 5]"), "{text}");
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        let tape = Tape::off();
        let a = Tensor::zeros(&[2]).unwrap();
        let err = tape
            .apply_primitive("conv2d", &[&a], &Attrs::new())
            .unwrap_err();
        assert!(matches!(err, crate::DyError::UnknownPrimitive(ref n) if n == "conv2d"));
    }

    #[test]
    fn apply_primitive_surface_matches_typed_helpers() {
        let tape = Tape::off();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut attrs = Attrs::new();
        attrs.insert("factor".into(), AttrValue::Float(0.5));
        let by_name = tape.apply_primitive("scale", &[&a], &attrs).unwrap();
        let typed = tape.scale(&a, 0.5).unwrap();
        assert_eq!(by_name.data(), typed.data());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_constant_rows_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::off();
        let x = randn(&mut rng, &[5, 7]);
        let y = tape.softmax_rows(&x).unwrap();
        for r in 0..5 {
            let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
        let c = Tensor::full(&[2, 4], 3.25).unwrap();
        let u = tape.softmax_rows(&c).unwrap();
        for &v in u.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn pointwise_fixed_values() {
        let tape = Tape::off();
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let s = tape.sigmoid(&x).unwrap();
        assert_eq!(s.data()[0], 0.5);
        let g = tape.gelu(&x).unwrap();
        assert_eq!(g.data()[0], 0.0);
        // 0.5 * (1 + erf(1/sqrt(2))) = Phi(1)
        assert!((g.data()[1] as f64 - 0.841344746).abs() < 1e-6);
        assert!((g.data()[2] as f64 + 0.158655254).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::off();
        let x = randn(&mut rng, &[4, 16]);
        let y = tape.layer_norm(&x, 1e-6).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = y.data()[r * 16..(r + 1) * 16]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gather_scatter_roundtrip_and_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::off();
        let x = randn(&mut rng, &[6, 3]);
        let fill = randn(&mut rng, &[6, 3]);
        let mask = [true, false, true, true, false, false];
        let g = tape.gather_rows(&x, &mask).unwrap();
        assert_eq!(g.shape(), &[3, 3]);
        let s = tape.scatter_rows(&g, &fill, &mask).unwrap();
        for r in 0..6 {
            let want = if mask[r] { &x } else { &fill };
            assert_eq!(
                &s.data()[r * 3..(r + 1) * 3],
                &want.data()[r * 3..(r + 1) * 3],
                "row {r}"
            );
        }
        // All-false: empty selection, scatter reproduces the fill.
        let none = [false; 6];
        let empty = tape.gather_rows(&x, &none).unwrap();
        assert_eq!(empty.shape(), &[0, 3]);
        let back = tape.scatter_rows(&empty, &fill, &none).unwrap();
        assert_eq!(back.data(), fill.data());
    }

    #[test]
    fn concat_slice_transpose_shapes() {
        let tape = Tape::off();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let cat = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(&cat, 1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
        let t = tape.transpose(&a).unwrap();
        let tt = tape.transpose(&t).unwrap();
        assert_eq!(tt.data(), a.data());
        // Scalars stack into a vector.
        let s = tape
            .concat(&[&Tensor::scalar(1.0), &Tensor::scalar(2.0)], 0)
            .unwrap();
        assert_eq!(s.shape(), &[2]);
    }

    #[test]
    fn broadcast_orientations() {
        let tape = Tape::off();
        let v = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let rows = tape.broadcast(&v, 2, 3, BroadcastAxis::Rows).unwrap();
        assert_eq!(rows.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let cols = tape.broadcast(&v, 3, 2, BroadcastAxis::Cols).unwrap();
        assert_eq!(cols.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = tape
            .broadcast(&Tensor::scalar(7.0), 2, 2, BroadcastAxis::Rows)
            .unwrap();
        assert_eq!(s.data(), &[7.0; 4]);
    }

    #[test]
    fn identical_inputs_produce_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(&mut rng, &[8, 8]);
        let b = randn(&mut rng, &[8, 8]);
        let run = || {
            let tape = Tape::off();
            let c = tape.matmul(&a, &b).unwrap();
            let d = tape.softmax_rows(&c).unwrap();
            let e = tape.layer_norm(&d, 1e-6).unwrap();
            tape.sum(&e).unwrap().item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn simple_reverse_matches_hand_gradient() {
        // loss = mean(square(x)) => dloss/dx = 2x/n
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_requires_grad(true);
        let tape = Tape::grad();
        let sq = tape.square(&x).unwrap();
        let loss = tape.mean(&sq).unwrap();
        let grads = tape.reverse_accumulate(&loss).unwrap();
        let g = grads.get(&x).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi / 4.0).abs() < 1e-7);
        }
    }

    #[test]
    fn reused_leaf_accumulates_both_paths() {
        // loss = sum(x * x) => dloss/dx = 2x via two uses of the same leaf
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -1.5])
            .unwrap()
            .with_requires_grad(true);
        let tape = Tape::grad();
        let prod = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.reverse_accumulate(&loss).unwrap();
        let g = grads.get(&x).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn detached_handles_block_gradient_flow() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -1.5])
            .unwrap()
            .with_requires_grad(true);
        let tape = Tape::grad();
        let frozen = x.detach();
        let prod = tape.mul(&x, &frozen).unwrap(); // d/dx = frozen = x values
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.reverse_accumulate(&loss).unwrap();
        let g = grads.get(&x).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - xi).abs() < 1e-6, "detach must contribute no gradient");
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::zeros(&[2]).unwrap().with_requires_grad(true);
        let tape = Tape::grad();
        let y = tape.square(&x).unwrap();
        let err = tape.reverse_accumulate(&y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn spec_style_composite_gradcheck() {
        // loss = mean(sigmoid(x . w)), checked against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = randn(&mut rng, &[4, 6]);
        let w = randn(&mut rng, &[6, 2]);
        let report = finite_difference_check(
            |tape, p| {
                let z = tape.matmul(&x, p)?;
                let s = tape.sigmoid(&z)?;
                tape.mean(&s)
            },
            &w,
            1e-3,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-3,
            "rel err {} at coord {}",
            report.max_rel_err,
            report.worst_coord
        );
    }

    /// Central differences for every differentiable primitive, ten seeded
    /// instances each. Each loss is a weighted sum so gradients are dense.
    #[test]
    fn per_primitive_gradcheck() {
        #[allow(clippy::type_complexity)]
        let cases: Vec<(
            &str,
            Box<dyn Fn(&Tape, &Tensor, &mut ChaCha8Rng) -> crate::Result<Tensor>>,
        )> = vec![
            ("matmul_lhs", Box::new(|t, p, rng| {
                let b = randn_for(rng, &[p.shape()[1], 3]);
                t.matmul(p, &b)
            })),
            ("matmul_rhs", Box::new(|t, p, rng| {
                let a = randn_for(rng, &[3, p.shape()[0]]);
                t.matmul(&a, p)
            })),
            ("add", Box::new(|t, p, rng| {
                let b = randn_for(rng, p.shape());
                t.add(p, &b)
            })),
            ("mul", Box::new(|t, p, rng| {
                let b = randn_for(rng, p.shape());
                t.mul(p, &b)
            })),
            ("scale", Box::new(|t, p, _| t.scale(p, -1.7))),
            ("softmax_rows", Box::new(|t, p, _| t.softmax_rows(p))),
            ("sigmoid", Box::new(|t, p, _| t.sigmoid(p))),
            ("gelu", Box::new(|t, p, _| t.gelu(p))),
            ("layer_norm", Box::new(|t, p, _| t.layer_norm(p, 1e-6))),
            ("square", Box::new(|t, p, _| t.square(p))),
            ("transpose", Box::new(|t, p, _| t.transpose(p))),
            ("gather_rows", Box::new(|t, p, _| {
                t.gather_rows(p, &[true, false, true, true])
            })),
            ("scatter_src", Box::new(|t, p, rng| {
                let fill = randn_for(rng, &[4, p.shape()[1]]);
                let mask = [true, false, true, true];
                let src = t.slice(p, 0, 0, 3)?;
                t.scatter_rows(&src, &fill, &mask)
            })),
            ("scatter_fill", Box::new(|t, p, rng| {
                let src = randn_for(rng, &[2, p.shape()[1]]);
                t.scatter_rows(&src, p, &[true, false, false, true])
            })),
            ("slice_cols", Box::new(|t, p, _| t.slice(p, 1, 1, 4))),
            ("concat", Box::new(|t, p, rng| {
                let b = randn_for(rng, p.shape());
                t.concat(&[p, &b], 1)
            })),
            ("broadcast_rows", Box::new(|t, p, _| {
                let col = t.slice(p, 1, 0, 1)?;
                t.broadcast(&col, p.shape()[0], 5, BroadcastAxis::Rows)
            })),
            ("sum", Box::new(|t, p, _| t.sum(p))),
            ("mean", Box::new(|t, p, _| t.mean(p))),
        ];
        for (name, build_out) in &cases {
            for instance in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
                let point = randn(&mut rng, &[4, 5]);
                let report = finite_difference_check(
                    |tape, p| {
                        let out = build_out(tape, p, &mut rng.clone())?;
                        let w = randn_for(&mut rng.clone(), out.shape());
                        let weighted = tape.mul(&out, &w)?;
                        tape.sum(&weighted)
                    },
                    &point,
                    1e-3,
                )
                .unwrap();
                assert!(
                    report.max_rel_err <= 1e-3,
                    "{name} instance {instance}: rel err {} at coord {}",
                    report.max_rel_err,
                    report.worst_coord
                );
            }
        }
    }

    fn randn_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        randn(rng, shape)
    }

    #[test]
    fn replay_reproduces_the_forward_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[3, 3]).with_requires_grad(true);
        let tape = Tape::grad();
        let y = tape.softmax_rows(&x).unwrap();
        let n = tape.layer_norm(&y, 1e-6).unwrap();
        let loss = tape.mean(&n).unwrap();
        let recorded = loss.item().unwrap() as f64;
        let record = tape.finish();
        let idx = record.node_of(&loss).unwrap();
        let replayed = record.replay_f64(idx, None).unwrap()[0];
        assert!((recorded - replayed).abs() < 1e-6);
    }

    #[test]
    fn trace_mode_records_gradient_free_programs() {
        let tape = Tape::trace();
        let a = Tensor::zeros(&[2, 2]).unwrap();
        let b = Tensor::zeros(&[2, 2]).unwrap();
        let _ = tape.matmul(&a, &b).unwrap();
        let record = tape.finish();
        let ops: Vec<_> = record.ops().collect();
        assert_eq!(ops.len(), 1);
        assert_eq!(ops[0].name, "matmul");
        assert_eq!(ops[0].input_shapes, vec![&[2usize, 2][..], &[2, 2][..]]);
    }

    #[test]
    fn grad_mode_records_nothing_without_parameters() {
        let tape = Tape::grad();
        let a = Tensor::zeros(&[2, 2]).unwrap();
        let b = Tensor::zeros(&[2, 2]).unwrap();
        let _ = tape.matmul(&a, &b).unwrap();
        assert_eq!(tape.node_count(), 0);
    }
}
