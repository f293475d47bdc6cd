use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Heavy-ball SGD with L2 decay: `v <- mu * v + g + wd * p`, `p <- p - lr * v`.
pub fn sgd_momentum<T: Real>(
    params: Vec<&mut Tensor<T>>,
    velocity: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "optimizer got {} params, {} velocities, {} gradients",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    for ((p, v), g) in params.into_iter().zip(velocity.iter_mut()).zip(grads) {
        if p.shape() != v.shape() || p.shape() != g.shape() {
            return Err(Error::shape("sgd_momentum", &[p.shape(), v.shape(), g.shape()]));
        }
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. A non-positive `max_norm` leaves them untouched.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .fold(T::zero(), |acc, &x| acc + x * x)
        .sqrt();
    if max_norm > T::zero() && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// Zero velocity buffers matching `params`.
pub fn zero_velocity<T: Real>(params: &[&Tensor<T>]) -> Vec<Tensor<T>> {
    params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_by_hand() {
        let mut p = Tensor::<f64>::from_f64(vec![2], &[1.0, -1.0]).unwrap();
        let mut v = vec![Tensor::zeros(vec![2])];
        let g = vec![Tensor::from_f64(vec![2], &[0.5, 2.0]).unwrap()];
        sgd_momentum(vec![&mut p], &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -1.0 - 0.2]);
        sgd_momentum(vec![&mut p], &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert!((v[0].data()[0] - 0.95).abs() < 1e-15);
        assert!((p.data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn decay_pulls_towards_zero() {
        let mut p = Tensor::<f64>::from_f64(vec![1], &[2.0]).unwrap();
        let mut v = vec![Tensor::zeros(vec![1])];
        let g = vec![Tensor::zeros(vec![1])];
        sgd_momentum(vec![&mut p], &mut v, &g, 0.5, 0.0, 0.1).unwrap();
        assert_eq!(p.data(), &[1.9]);
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut g = vec![
            Tensor::<f64>::from_f64(vec![2], &[3.0, 0.0]).unwrap(),
            Tensor::from_f64(vec![1], &[4.0]).unwrap(),
        ];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 0.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut z = g.clone();
        clip_global_norm(&mut z, 0.0);
        assert_eq!(z, g);
    }

    #[test]
    fn zero_rate_leaves_params() {
        let mut p = Tensor::<f32>::full(vec![3], 2.0);
        let mut v = vec![Tensor::zeros(vec![3])];
        let g = vec![Tensor::full(vec![3], 7.0)];
        sgd_momentum(vec![&mut p], &mut v, &g, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[2.0; 3]);
    }
}
