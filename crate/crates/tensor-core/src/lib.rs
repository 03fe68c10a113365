//! Dense f64 tensors with reverse-mode automatic differentiation, a named
//! tensor container format, and finite-difference gradient checking.

mod error;
mod graph;
pub mod hvt;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, NodeId, OpKind};
pub use hvt::{HvtError, HvtReader};
pub use params::{finite_diff_check, FdEntry, FdReport, ParamSet};
pub use tensor::TensorData;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> TensorData {
        TensorData::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = g.constant(t(&[3, 1], &[1.0, 1.0, 1.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{}", msg);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_ones() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0; 4])).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 4.0);
    }

    #[test]
    fn softmax_symmetry_and_value() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let expect = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((g.value(y).data()[0] - expect).abs() < 1e-4);
        assert!((g.value(y).data()[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(y).data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn logsumexp_stability() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1000.0, 1000.0])).unwrap();
        let y = g.logsumexp(x, 0).unwrap();
        assert!((g.value(y).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.l2_normalize(x, 0, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 0.6).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.8).abs() < 1e-12);

        let z = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.l2_normalize(z, 0, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_grads_empty() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let c = g.scalar(5.0).unwrap();
        g.backward(c).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(
            g.backward(w),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_twice_after_reset_is_identical() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.3, -1.2, 2.0]), true).unwrap();
        let h = g.tanh(w).unwrap();
        let s = g.mul(h, h).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        let first = g.grad(w).unwrap().to_vec();
        g.reset_grads();
        g.backward(loss).unwrap();
        assert_eq!(first, g.grad(w).unwrap());
    }

    #[test]
    fn broadcast_bias_add() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let b = g.leaf(t(&[2], &[10.0, 20.0]), true).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(t(&[1], &[f64::NAN])),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn hvt_round_trip() {
        let dir = std::env::temp_dir().join("hvt_round_trip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.hvt");
        let mut ps = ParamSet::new();
        ps.insert("w", t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]));
        ps.insert("b", t(&[3], &[0.1, 0.2, 0.3]));
        ps.save(&path).unwrap();
        let back = ParamSet::load(&path).unwrap();
        assert_eq!(ps, back);

        let mut r = HvtReader::open(&path).unwrap();
        assert!(r.contains("w"));
        assert_eq!(r.read("b").unwrap().data(), &[0.1, 0.2, 0.3]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn finite_diff_simple_quadratic() {
        // f(w) = w^2 at w = 3: analytic gradient 6.
        let mut ps = ParamSet::new();
        ps.insert("w", TensorData::scalar(3.0));
        let mut analytic = std::collections::BTreeMap::new();
        analytic.insert("w".to_string(), vec![6.0]);
        let report = finite_diff_check(
            &ps,
            &analytic,
            |p| Ok(p.get("w").unwrap().data()[0].powi(2)),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err < 1e-6);
    }
}
