use super::{Mask, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Z-scores `v` with the mean and population standard deviation of the
/// voxels inside `mask`. Voxels outside the mask go through the same affine map.
pub fn normalize_intensity<T: Scalar>(v: &Volume<T>, mask: &Mask) -> Result<Volume<T>> {
    v.check_shape(mask, "normalize_intensity mask")?;
    let (mut n, mut sum) = (0usize, 0.0f64);
    for (&x, &m) in v.data().iter().zip(mask.data()) {
        if m != 0 {
            n += 1;
            sum += x.as_f64();
        }
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("mask holds {n} voxel(s), need at least 2")));
    }
    let mean = sum / n as f64;
    let var = v
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0)
        .map(|(&x, _)| (x.as_f64() - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("zero intensity spread inside mask".into()));
    }
    Ok(v.map(|x| T::lit((x.as_f64() - mean) / sd)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn masked_stats(v: &Volume<f64>, m: &Mask) -> (f64, f64) {
        let xs: Vec<f64> = v.data().iter().zip(m.data()).filter(|(_, &k)| k == 1).map(|(&x, _)| x).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn hand_arithmetic_population_sd() {
        let v = Volume::from_vec([1, 1, 3], [1.0; 3], vec![2.0f64, 4.0, 6.0]).unwrap();
        let m = Mask::filled([1, 1, 3], [1.0; 3], 1).unwrap();
        let out = normalize_intensity(&v, &m).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_plus_noise_gives_unit_stats_and_is_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 8 * 8).map(|_| 100.0 + rng.random_range(-1.0..1.0)).collect();
        let v = Volume::from_vec([4, 8, 8], [1.0; 3], data).unwrap();
        let mask = v.map(|_| 0u8).with_data((0..256).map(|i| u8::from(i % 3 != 0)).collect()).unwrap();
        let out = normalize_intensity(&v, &mask).unwrap();
        let (mean, sd) = masked_stats(&out, &mask);
        assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        let again = normalize_intensity(&out, &mask).unwrap();
        for (a, b) in again.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_spread_is_degenerate() {
        let v = Volume::<f32>::filled([1, 2, 2], [1.0; 3], 5.0).unwrap();
        let m = Mask::filled([1, 2, 2], [1.0; 3], 1).unwrap();
        assert!(matches!(normalize_intensity(&v, &m), Err(Error::Degenerate(_))));
        let one = m.with_data(vec![1, 0, 0, 0]).unwrap();
        assert!(matches!(normalize_intensity(&v, &one), Err(Error::Degenerate(_))));
    }

    proptest::proptest! {
        #[test]
        fn invariant_under_positive_affine_rescaling(
            seed in 0u64..1000, a in 0.1f64..20.0, b in -50.0f64..50.0
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..27).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = Volume::from_vec([3, 3, 3], [1.0; 3], data).unwrap();
            let m = v.map(|x| u8::from(x > -2.0));
            proptest::prop_assume!(m.count() >= 2);
            let scaled = v.map(|x| a * x + b);
            let n1 = normalize_intensity(&v, &m).unwrap();
            let n2 = normalize_intensity(&scaled, &m).unwrap();
            for (x, y) in n1.data().iter().zip(n2.data()) {
                proptest::prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
