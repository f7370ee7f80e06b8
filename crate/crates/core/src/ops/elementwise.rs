use rand::Rng;

use crate::tensor::Tensor4;

/// NaN inputs stay NaN so non-finite losses surface downstream.
pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
}

/// Passes gradient where the forward output was positive; zero at the kink.
pub fn relu_backward(output: &Tensor4, upstream: &Tensor4) -> Tensor4 {
    let mut g = upstream.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Inverted-dropout mask: entries are `0` or `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: crate::tensor::Shape4, p: f64, rng: &mut R) -> Tensor4 {
    let keep = 1.0 / (1.0 - p);
    let mut m = Tensor4::zeros(shape);
    for v in m.data_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn relu_values_and_mask() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&y, &Tensor4::full(x.shape(), 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_mask_scaling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask(Shape4::new(1, 1, 100, 100), 0.1, &mut rng);
        let keep = 1.0 / 0.9;
        assert!(m.data().iter().all(|&v| v == 0.0 || v == keep));
        let dropped = m.data().iter().filter(|&&v| v == 0.0).count();
        assert!((800..1200).contains(&dropped), "{dropped}");
    }
}
