use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor4};
use super::NetError;

/// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng>(dims: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor4<T> {
    normal_init(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal_init<T: Real, R: Rng>(dims: [usize; 4], std: f64, rng: &mut R) -> Tensor4<T> {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Tensor4::from_fn(dims, |_| T::lit(dist.sample(rng)))
}

/// Turn an RGB first-layer kernel `[out, 3, k, k]` into `[out, target, k, k]`
/// by averaging over the colour channels and replicating the mean.
pub fn cross_modality_init<T: Real>(rgb: &Tensor4<T>, target_channels: usize) -> Result<Tensor4<T>, NetError> {
    let [out, cin, kh, kw] = rgb.dims();
    if cin != 3 {
        return Err(NetError::Shape {
            layer: "cross_modality_init".into(),
            detail: format!("source kernel has {cin} input channels, expected 3"),
        });
    }
    if target_channels == 0 {
        return Err(NetError::Shape {
            layer: "cross_modality_init".into(),
            detail: "target channel count must be positive".into(),
        });
    }
    let taps = kh * kw;
    let mut data = Vec::with_capacity(out * target_channels * taps);
    for o in 0..out {
        let src = rgb.item(o);
        let mean: Vec<T> = (0..taps)
            .map(|t| T::lit((src[t].as_f64() + src[taps + t].as_f64() + src[2 * taps + t].as_f64()) / 3.0))
            .collect();
        for _ in 0..target_channels {
            data.extend_from_slice(&mean);
        }
    }
    Ok(Tensor4::from_vec([out, target_channels, kh, kw], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_of_one_two_three() {
        let rgb = Tensor4::from_vec([1, 3, 1, 1], vec![1.0f32, 2.0, 3.0]);
        let w = cross_modality_init(&rgb, 20).unwrap();
        assert_eq!(w.dims(), [1, 20, 1, 1]);
        assert!(w.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_kernel_stays_zero() {
        let w = cross_modality_init(&Tensor4::<f64>::zeros([4, 3, 7, 7]), 20).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count() {
        assert!(cross_modality_init(&Tensor4::<f32>::zeros([4, 2, 3, 3]), 20).is_err());
    }

    #[test]
    fn he_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor4<f64> = he_normal([64, 16, 3, 3], 144, &mut rng);
        let n = w.len() as f64;
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 2.0 / 144.0).abs() < 0.1 * 2.0 / 144.0);
    }
}
