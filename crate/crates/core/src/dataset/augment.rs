//! Label-preserving geometric augmentation on square images.

use super::{MultiTaskSample, CHANNELS};
use crate::error::{Error, Result};
use rand::Rng;

fn remap(image: &[f32], size: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Vec<f32> {
    let mut out = vec![0.0f32; image.len()];
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = f(x, y);
            let src = (sy * size + sx) * CHANNELS;
            let dst = (y * size + x) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&image[src..src + CHANNELS]);
        }
    }
    out
}

/// Rotate 90 degrees clockwise.
pub fn rot90(image: &[f32], size: usize) -> Vec<f32> {
    remap(image, size, |x, y| (y, size - 1 - x))
}

/// Mirror left-right.
pub fn flip_h(image: &[f32], size: usize) -> Vec<f32> {
    remap(image, size, |x, y| (size - 1 - x, y))
}

/// Mirror top-bottom.
pub fn flip_v(image: &[f32], size: usize) -> Vec<f32> {
    remap(image, size, |x, y| (x, size - 1 - y))
}

/// Element `k` of the dihedral group D4 in a fixed order: rotations by
/// `90k` degrees for `k < 4`, the same rotations composed with a
/// horizontal flip for `k >= 4`. `k = 0` is the identity.
pub fn dihedral(image: &[f32], size: usize, k: usize) -> Vec<f32> {
    assert!(k < 8, "dihedral element index {k} out of range");
    let mut out = image.to_vec();
    for _ in 0..(k % 4) {
        out = rot90(&out, size);
    }
    if k >= 4 {
        out = flip_h(&out, size);
    }
    out
}

/// The full 8-element orbit of one sample, labels copied unchanged.
/// Always emits 8 samples even when the image is symmetric.
pub fn augment_8fold(
    s: &MultiTaskSample,
    height: usize,
    width: usize,
) -> Result<Vec<MultiTaskSample>> {
    if height != width {
        return Err(Error::input(format!(
            "8-fold augmentation needs a square image, got {height}x{width}"
        )));
    }
    if s.image.len() != height * width * CHANNELS {
        return Err(Error::input(format!(
            "image has {} values, expected {}",
            s.image.len(),
            height * width * CHANNELS
        )));
    }
    Ok((0..8)
        .map(|k| MultiTaskSample {
            image: dihedral(&s.image, height, k),
            labels: s.labels,
            severity: s.severity,
        })
        .collect())
}

/// Independent horizontal and vertical flips, each with probability
/// one half; labels unchanged.
pub fn random_flip<R: Rng + ?Sized>(
    s: &MultiTaskSample,
    size: usize,
    rng: &mut R,
) -> MultiTaskSample {
    let mut image = s.image.clone();
    if rng.gen::<f64>() < 0.5 {
        image = flip_h(&image, size);
    }
    if rng.gen::<f64>() < 0.5 {
        image = flip_v(&image, size);
    }
    MultiTaskSample {
        image,
        labels: s.labels,
        severity: s.severity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Labels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(size: usize) -> MultiTaskSample {
        // generic (asymmetric) image: distinct value per pixel/channel
        let image = (0..size * size * CHANNELS)
            .map(|i| i as f32 * 0.001)
            .collect();
        MultiTaskSample {
            image,
            labels: Labels::new(2, 1, 3).unwrap(),
            severity: 0.7,
        }
    }

    #[test]
    fn four_rotations_are_identity() {
        let s = sample(6);
        let mut img = s.image.clone();
        for _ in 0..4 {
            img = rot90(&img, 6);
        }
        assert_eq!(img, s.image);
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample(5);
        assert_eq!(flip_h(&flip_h(&s.image, 5), 5), s.image);
        assert_eq!(flip_v(&flip_v(&s.image, 5), 5), s.image);
    }

    #[test]
    fn orbit_has_eight_distinct_elements_for_generic_image() {
        let s = sample(6);
        let orbit = augment_8fold(&s, 6, 6).unwrap();
        assert_eq!(orbit.len(), 8);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(
                    orbit[i].image, orbit[j].image,
                    "elements {i} and {j} collide"
                );
            }
            assert_eq!(orbit[i].labels, s.labels);
            assert_eq!(orbit[i].severity, s.severity);
        }
        assert_eq!(orbit[0].image, s.image, "element 0 is the identity");
    }

    #[test]
    fn orbit_is_closed_under_the_group() {
        // applying every element to every orbit member and deduplicating
        // still yields exactly the 8 orbit images
        let s = sample(4);
        let orbit = augment_8fold(&s, 4, 4).unwrap();
        let mut seen: Vec<Vec<f32>> = Vec::new();
        for member in &orbit {
            for k in 0..8 {
                let img = dihedral(&member.image, 4, k);
                if !seen.contains(&img) {
                    seen.push(img);
                }
            }
        }
        assert_eq!(seen.len(), 8);
        for img in &seen {
            assert!(orbit.iter().any(|m| &m.image == img));
        }
    }

    #[test]
    fn symmetric_image_still_emits_eight_samples() {
        let size = 4;
        let s = MultiTaskSample {
            image: vec![0.5; size * size * CHANNELS],
            labels: Labels::new(0, 0, 0).unwrap(),
            severity: 0.0,
        };
        let orbit = augment_8fold(&s, size, size).unwrap();
        assert_eq!(orbit.len(), 8);
        for m in &orbit {
            assert_eq!(m.image, s.image); // all pixel-identical, no dedup
        }
    }

    #[test]
    fn pixel_mass_is_preserved() {
        // sum in f64: the permutation reorders an f32 reduction
        let s = sample(6);
        let mass: f64 = s.image.iter().map(|&v| v as f64).sum();
        for k in 0..8 {
            let img = dihedral(&s.image, 6, k);
            let m: f64 = img.iter().map(|&v| v as f64).sum();
            assert!(
                (m - mass).abs() < 1e-9,
                "element {k} changed pixel mass: {m} vs {mass}"
            );
        }
    }

    #[test]
    fn non_square_is_rejected() {
        let s = sample(4);
        assert!(augment_8fold(&s, 4, 8).is_err());
    }

    #[test]
    fn random_flip_preserves_labels_and_composes_from_flips() {
        let s = sample(6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = random_flip(&s, 6, &mut rng);
            assert_eq!(f.labels, s.labels);
            let candidates = [
                s.image.clone(),
                flip_h(&s.image, 6),
                flip_v(&s.image, 6),
                flip_v(&flip_h(&s.image, 6), 6),
            ];
            assert!(candidates.contains(&f.image));
        }
    }

    #[test]
    fn random_flip_is_identity_under_probability_zero_stream() {
        struct AlwaysHigh;
        impl rand::RngCore for AlwaysHigh {
            fn next_u32(&mut self) -> u32 {
                u32::MAX
            }
            fn next_u64(&mut self) -> u64 {
                u64::MAX
            }
            fn fill_bytes(&mut self, dest: &mut [u8]) {
                dest.fill(0xff);
            }
            fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
                dest.fill(0xff);
                Ok(())
            }
        }
        let s = sample(5);
        // gen::<f64>() from an all-ones stream is ~1.0, never < 0.5
        let f = random_flip(&s, 5, &mut AlwaysHigh);
        assert_eq!(f.image, s.image);
    }
}
