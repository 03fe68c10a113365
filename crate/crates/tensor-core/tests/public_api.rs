//! Integration checks of the public surface: building a small expression,
//! differentiating it, verifying against finite differences, and saving a
//! parameter set through the container format.

use std::collections::BTreeMap;

use tensor_core::{finite_diff_check, Graph, ParamSet, TensorData};

fn expression_loss(params: &ParamSet) -> tensor_core::Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let w = g.leaf(params.get("w").unwrap().clone(), true)?;
    let x = g.leaf(
        TensorData::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4])?,
        false,
    )?;
    let h = g.matmul(x, w)?;
    let a = g.relu(h)?;
    let s = g.add_scalar(a, 0.5)?;
    let loss = g.sum(s)?;
    g.backward(loss)?;
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), g.grad(w).unwrap().to_vec());
    Ok((g.value(loss).data()[0], grads))
}

#[test]
fn expression_gradient_matches_finite_differences() {
    let mut params = ParamSet::new();
    params.insert(
        "w",
        TensorData::new(vec![3, 2], vec![0.6, -0.2, 0.1, 0.8, -0.5, 0.3]).unwrap(),
    );
    let (_, grads) = expression_loss(&params).unwrap();
    let report = finite_diff_check(
        &params,
        &grads,
        |p| expression_loss(p).map(|(v, _)| v),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(
        report.failures.is_empty(),
        "max rel err {}",
        report.max_rel_err
    );
}

#[test]
fn param_set_round_trips_through_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.hvt");
    let mut params = ParamSet::new();
    params.insert("a", TensorData::new(vec![2, 2], vec![1.0, -2.5, 0.0, 4.25]).unwrap());
    params.insert("b", TensorData::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    params.save(&path).unwrap();
    let loaded = ParamSet::load(&path).unwrap();
    for (name, t) in params.iter() {
        let l = loaded.get(name).unwrap();
        assert_eq!(l.shape(), t.shape());
        assert_eq!(l.data(), t.data());
    }
    // Saving the loaded set again is byte-identical.
    let path2 = dir.path().join("params2.hvt");
    loaded.save(&path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}
