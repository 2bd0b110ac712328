//! Reverse-mode automatic differentiation over small dense f64 tensors.
//!
//! Built for reproducibility over speed: plain `Vec<f64>` storage, fixed
//! accumulation order in every kernel, no threading. A [`Graph`] records ops
//! as they execute; [`Graph::backward`] pushes the loss gradient back through
//! the record and accumulates into [`ParamArena`] slots. Sparse parameters
//! (embedding tables) track which rows were touched so optimizers can skip
//! the rest.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, FdReport, WorstCoord};
pub use params::{ParamArena, ParamId, Parameter};
pub use tape::{DiffError, Graph, NodeId, BCE_CLAMP};
pub use tensor::Tensor;

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn small_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Central differences agree with the tape on a composite expression
        // exercising matmul, bias broadcast, relu, sigmoid, and mse.
        #[test]
        fn fd_agrees_on_small_mlp(
            xs in small_vals(6),
            ws in small_vals(6),
            bs in small_vals(3),
            ys in small_vals(9),
        ) {
            let mut arena = ParamArena::new();
            let x = arena.add_dense("x", Tensor::new(3, 2, xs));
            let w = arena.add_dense("w", Tensor::new(2, 3, ws));
            let b = arena.add_dense("b", Tensor::row_vector(bs));
            let report = finite_difference_check(&mut arena, 1e-6, |g, a| {
                let xn = g.param(a, x);
                let wn = g.param(a, w);
                let bn = g.param(a, b);
                let h = g.matmul(xn, wn)?;
                let hb = g.add_row(h, bn)?;
                let s = g.sigmoid(hb);
                let y = g.constant(Tensor::new(3, 3, ys.clone()));
                g.mse(s, y)
            }).unwrap();
            prop_assert!(report.max_rel_err < 1e-5, "worst {:?}", report.worst);
        }

        // Softmax outputs are a probability distribution per row.
        #[test]
        fn softmax_rows_are_distributions(vals in small_vals(12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(4, 3, vals));
            let y = g.softmax(x);
            for r in 0..4 {
                let row = g.value(y).row(r);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }

        // detach is value-transparent and gradient-opaque.
        #[test]
        fn detach_value_equals_input(vals in small_vals(4)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(2, 2, vals));
            let d = g.detach(x);
            prop_assert_eq!(g.value(x).data(), g.value(d).data());
        }
    }
}
