use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let k = g.input(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, k, None, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_full_sum_valid() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let k = g.input(Tensor::ones(vec![1, 1, 2, 2]));
    let y = g.conv2d(x, k, None, 1, Padding::Valid).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);
}

#[test]
fn conv_same_padding_stride_two_shape() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(vec![2, 3, 7, 8]));
    let k = g.input(Tensor::ones(vec![4, 3, 3, 3]));
    let y = g.conv2d(x, k, None, 2, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 4]);
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(vec![2, 5, 5]));
    let k = g.input(Tensor::ones(vec![1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, Padding::Valid).unwrap_err().to_string();
    assert!(err.contains("[2, 5, 5]") && err.contains("[1, 3, 3, 3]"), "{err}");

    let k = g.input(Tensor::ones(vec![1, 2, 6, 6]));
    assert!(g.conv2d(x, k, None, 1, Padding::Valid).is_err());
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::scalar(0.0), true);
    let y = g.sigmoid(z);
    assert_eq!(g.value(y).data(), &[0.5]);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(z).unwrap().data(), &[0.25]);
}

#[test]
fn sigmoid_stays_open_interval_for_moderate_inputs() {
    let mut g = Graph::<f64>::new();
    let z = g.input(t(&[4], &[-30.0, -1.0, 1.0, 30.0]));
    let y = g.sigmoid(z);
    assert!(g.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(vec![3]), true);
    let y = g.relu(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn untouched_parameters_get_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let a = g.param("a", Tensor::full(vec![2], 3.0), true).unwrap();
    let _b = g.param("b", Tensor::full(vec![3], 1.0), true).unwrap();
    let frozen = g.param("c", Tensor::full(vec![2], 1.0), false).unwrap();
    let prod = g.mul(a, frozen).unwrap();
    let s = g.sum(prod);
    let grads = g.backward(s).unwrap();
    let named = grads.named();
    assert_eq!(named["a"].data(), &[1.0, 1.0]);
    assert_eq!(named["b"].data(), &[0.0; 3]);
    assert!(!named.contains_key("c"));
}

#[test]
fn duplicate_parameter_name_rejected() {
    let mut g = Graph::<f64>::new();
    g.param("w", Tensor::ones(vec![1]), true).unwrap();
    assert!(g.param("w", Tensor::ones(vec![1]), true).is_err());
}

#[test]
fn log_clamp_is_finite_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[0.0, 1.0]), true);
    let y = g.log_clamped(x, 1e-12);
    assert!(g.value(y).all_finite());
    assert!((g.value(y).data()[0] - 1e-12f64.ln()).abs() < 1e-12);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn concat_and_reduce_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::ones(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 1]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    assert_eq!(g.value(c).data(), &[1., 1., 1., 0., 1., 1., 1., 0.]);
    let m = g.mean_trailing(c, 1).unwrap();
    assert_eq!(g.value(m).data(), &[0.75, 0.75]);
    let bad = g.input(Tensor::ones(vec![3, 1]));
    assert!(g.concat(&[a, bad], 1).is_err());
}

#[test]
fn pool_and_upsample_round_trip_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 1, 2, 4], &[1., 5., 2., 0., 3., 4., 8., 7.]));
    let p = g.max_pool2d(x, 2).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 8.0]);
    let u = g.upsample_nearest2d(p, 2).unwrap();
    assert_eq!(g.value(u).data(), &[5., 5., 8., 8., 5., 5., 8., 8.]);
    let odd = g.input(Tensor::ones(vec![1, 3, 3]));
    assert!(g.max_pool2d(odd, 2).is_err());
}

#[test]
fn dense_forward() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let w = g.input(t(&[2, 3], &[1., 0., 0., 0., 1., 1.]));
    let b = g.input(t(&[2], &[0.5, -0.5]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 4.5, 4.5, 10.5]);
}
