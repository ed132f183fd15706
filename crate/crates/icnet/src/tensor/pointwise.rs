use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Elementwise `max(0, x)`.
pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
    out
}

/// Gradient of [`relu`]: upstream passes where the input was strictly
/// positive; the subgradient at 0 is 0.
pub fn relu_grad<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("relu_grad: shape mismatch"));
    }
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= E::zero() {
            *g = E::zero();
        }
    }
    Ok(dx)
}

/// Elementwise sum of two tensors of identical dims.
pub fn add<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "add: shape mismatch {} vs {}",
            x.shape(),
            y.shape()
        )));
    }
    let mut out = x.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(y.data()) {
        *o = *o + v;
    }
    Ok(out)
}

/// Gradient of [`add`]: upstream flows unchanged to both inputs.
pub fn add_grad<E: Element>(dy: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
    (dy.clone(), dy.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn relu_basic() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_grad_gates_on_positive_input() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        let dy = Tensor::filled(Shape::new(1, 1, 1, 3), 5.0);
        assert_eq!(relu_grad(&x, &dy).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f32, -2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert_eq!(add(&x, &z).unwrap().data(), x.data());
        assert!(add(&x, &Tensor::zeros(Shape::new(1, 1, 2, 3))).is_err());
    }
}
