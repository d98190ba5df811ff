use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn batch_of(z_t: &Tensor, z_a: &Tensor) -> Result<usize> {
    if !z_t.same_shape(z_a) || z_t.ndim() == 0 {
        return Err(Error::shape(format!(
            "teacher {:?} vs student {:?}",
            z_t.shape(),
            z_a.shape()
        )));
    }
    Ok(z_t.shape()[0])
}

/// Sum of squared logit differences over the whole batch.
pub fn squared_error(z_t: &Tensor, z_a: &Tensor) -> Result<f64> {
    batch_of(z_t, z_a)?;
    Ok(z_t.data().iter().zip(z_a.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Label-free distillation loss `sqrt(sum((z_T - z_A)^2) / N)` with `N`
/// the batch size.
pub fn distillation_loss(z_t: &Tensor, z_a: &Tensor) -> Result<f64> {
    let n = batch_of(z_t, z_a)?;
    Ok((squared_error(z_t, z_a)? / n as f64).sqrt())
}

/// Loss and its gradient with respect to the student logits. The gradient
/// is taken as zero where the loss is zero.
pub fn distillation_loss_grad(z_t: &Tensor, z_a: &Tensor) -> Result<(f64, Tensor)> {
    let n = batch_of(z_t, z_a)? as f64;
    let h = distillation_loss(z_t, z_a)?;
    let g = if h > 0.0 {
        let data = z_t
            .data()
            .iter()
            .zip(z_a.data())
            .map(|(t, a)| (a - t) / (n * h))
            .collect();
        Tensor::new(z_a.shape().to_vec(), data)?
    } else {
        Tensor::zeros_like(z_a)
    };
    Ok((h, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn identical_outputs_have_zero_loss() {
        let z = t(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        assert_eq!(distillation_loss(&z, &z).unwrap(), 0.0);
        let (_, g) = distillation_loss_grad(&z, &z).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_loss() {
        let z_t = t(&[2, 1], vec![1.0, 2.0]);
        let z_a = t(&[2, 1], vec![0.0, 0.0]);
        assert!((distillation_loss(&z_t, &z_a).unwrap() - 1.5811388300841898).abs() < 1e-15);
    }

    #[test]
    fn permutation_invariant() {
        let z_t = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z_a = t(&[3, 2], vec![0.5, 2.5, 3.0, 3.0, 7.0, 6.5]);
        let p = [2, 0, 1];
        let a = distillation_loss(&z_t, &z_a).unwrap();
        let b = distillation_loss(&z_t.select_batch(&p).unwrap(), &z_a.select_batch(&p).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let z_t = t(&[2, 2], vec![1.0, -1.0, 0.3, 2.0]);
        let z_a = t(&[2, 2], vec![0.2, 0.1, -0.4, 1.0]);
        let (_, g) = distillation_loss_grad(&z_t, &z_a).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = z_a.clone();
            p.data_mut()[i] += h;
            let mut m = z_a.clone();
            m.data_mut()[i] -= h;
            let fd = (distillation_loss(&z_t, &p).unwrap() - distillation_loss(&z_t, &m).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(distillation_loss(&t(&[1, 2], vec![0.0; 2]), &t(&[2, 1], vec![0.0; 2])).is_err());
    }
}
