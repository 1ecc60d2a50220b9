//! Training-set augmentation, class weights, and fold splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::load_image;
use super::labeling::{Label, LabeledSample, Partition};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest rotation applied by augmentation, in degrees.
pub const MAX_ROTATION_DEG: f64 = 5.0;

/// Value given to pixels that a rotation pulls in from outside the frame:
/// mid-gray, zero field in the 8-bit encoding.
pub const NEUTRAL_GRAY: f64 = 128.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    VerticalFlip,
    HorizontalFlip,
    /// Counter-clockwise rotation about the image center, in degrees.
    Rotation(f64),
}

impl Augmentation {
    /// Applies the transform to a `1 x H x W` image.
    pub fn apply(self, image: &Tensor) -> Tensor {
        let [_, h, w] = image.shape()[..] else {
            panic!(
                "augmentation expects a 1 x H x W image, got {:?}",
                image.shape()
            )
        };
        let src = image.data();
        let data = match self {
            Augmentation::VerticalFlip => (0..h)
                .rev()
                .flat_map(|y| src[y * w..(y + 1) * w].iter().copied())
                .collect(),
            Augmentation::HorizontalFlip => (0..h)
                .flat_map(|y| src[y * w..(y + 1) * w].iter().rev().copied())
                .collect(),
            Augmentation::Rotation(deg) => rotate(src, h, w, deg),
        };
        Tensor::new(image.shape().to_vec(), data).expect("same shape")
    }
}

/// Bilinear rotation; neighbours outside the frame read as neutral gray.
fn rotate(src: &[f64], h: usize, w: usize, deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            NEUTRAL_GRAY
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output coordinate back by -deg
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// One model input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `1 x H x W` image scaled to `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
    /// Index of the originating sample.
    pub origin: usize,
    pub augmentation: Option<Augmentation>,
}

pub fn load_examples(samples: &[LabeledSample], size: usize) -> Result<Vec<Example>> {
    samples
        .iter()
        .enumerate()
        .map(|(origin, s)| {
            Ok(Example {
                image: load_image(&s.image_path, size)?,
                label: s.label,
                origin,
                augmentation: None,
            })
        })
        .collect()
}

/// Adds three copies of every FL example (vertical flip, horizontal flip,
/// and a rotation drawn uniformly from +-5 degrees) and one copy of every NF
/// example using one of the three techniques chosen uniformly. Each
/// original is followed by its copies.
pub fn augment(examples: &[Example], split: Split, seed: u64) -> Result<Vec<Example>> {
    if split == Split::Test {
        return Err(Error::Leakage("test"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        if ex.augmentation.is_some() {
            return Err(Error::Data(format!(
                "example from sample {} is already augmented",
                ex.origin
            )));
        }
        out.push(ex.clone());
        let techniques = match ex.label {
            Label::FL => vec![
                Augmentation::VerticalFlip,
                Augmentation::HorizontalFlip,
                Augmentation::Rotation(rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
            ],
            Label::NF => vec![match rng.random_range(0..3) {
                0 => Augmentation::VerticalFlip,
                1 => Augmentation::HorizontalFlip,
                _ => Augmentation::Rotation(rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
            }],
        };
        for t in techniques {
            out.push(Example {
                image: t.apply(&ex.image),
                label: ex.label,
                origin: ex.origin,
                augmentation: Some(t),
            });
        }
    }
    Ok(out)
}

pub fn label_counts(examples: &[Example]) -> [usize; 2] {
    let mut counts = [0; 2];
    for e in examples {
        counts[e.label.index()] += 1;
    }
    counts
}

/// Mean-normalized inverse-frequency weights `N / (2 N_c)`, indexed by
/// class.
pub fn class_weights(counts: [usize; 2]) -> Result<[f64; 2]> {
    if counts.contains(&0) {
        return Err(Error::Data(format!(
            "class weights need both classes present, got counts {counts:?}"
        )));
    }
    let total = (counts[0] + counts[1]) as f64;
    Ok(counts.map(|c| total / (2.0 * c as f64)))
}

/// Indices of training and test samples when `test` is the held-out
/// partition.
pub fn fold_split(samples: &[LabeledSample], test: Partition) -> (Vec<usize>, Vec<usize>) {
    (0..samples.len()).partition(|&i| samples[i].partition != test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![1, side, side],
            (0..side * side).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    fn examples(fl: usize, nf: usize) -> Vec<Example> {
        (0..fl + nf)
            .map(|i| Example {
                image: image(i as u64, 6),
                label: if i < fl { Label::FL } else { Label::NF },
                origin: i,
                augmentation: None,
            })
            .collect()
    }

    #[test]
    fn copy_counts() {
        let out = augment(&examples(10, 60), Split::Train, 1).unwrap();
        assert_eq!(label_counts(&out), [120, 40]);
        let fl_copies: Vec<_> = out
            .iter()
            .filter(|e| e.origin == 0)
            .map(|e| e.augmentation)
            .collect();
        assert_eq!(fl_copies.len(), 4);
        assert_eq!(fl_copies[1], Some(Augmentation::VerticalFlip));
        assert_eq!(fl_copies[2], Some(Augmentation::HorizontalFlip));
        match fl_copies[3] {
            Some(Augmentation::Rotation(a)) => assert!(a.abs() <= MAX_ROTATION_DEG),
            other => panic!("expected rotation, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let ex = examples(5, 30);
        assert_eq!(
            augment(&ex, Split::Train, 9).unwrap(),
            augment(&ex, Split::Train, 9).unwrap()
        );
        assert_ne!(
            augment(&ex, Split::Train, 9).unwrap(),
            augment(&ex, Split::Train, 10).unwrap()
        );
    }

    #[test]
    fn test_split_is_refused() {
        assert!(matches!(
            augment(&examples(1, 1), Split::Test, 0),
            Err(Error::Leakage(_))
        ));
    }

    #[test]
    fn nf_techniques_are_all_used() {
        let out = augment(&examples(0, 300), Split::Train, 4).unwrap();
        let mut seen = [0; 3];
        for a in out.iter().filter_map(|e| e.augmentation) {
            seen[match a {
                Augmentation::VerticalFlip => 0,
                Augmentation::HorizontalFlip => 1,
                Augmentation::Rotation(_) => 2,
            }] += 1;
        }
        // 100 expected each; 5 sigma is about 41
        assert!(seen.iter().all(|&n| (59..=141).contains(&n)), "{seen:?}");
    }

    #[test]
    fn flips_move_pixels() {
        let img = Tensor::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(
            Augmentation::VerticalFlip.apply(&img).data(),
            &[4., 5., 6., 1., 2., 3.]
        );
        assert_eq!(
            Augmentation::HorizontalFlip.apply(&img).data(),
            &[3., 2., 1., 6., 5., 4.]
        );
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = image(3, 9);
        assert_eq!(Augmentation::Rotation(0.0).apply(&img), img);
    }

    #[test]
    fn rotation_fills_corners_with_gray() {
        let img = Tensor::full(&[1, 21, 21], 0.0);
        let r = Augmentation::Rotation(5.0).apply(&img);
        assert!((r.data()[0] - NEUTRAL_GRAY).abs() < 0.5 && r.data()[0] > 0.0);
        assert_eq!(r.data()[10 * 21 + 10], 0.0);
        // a constant gray image is unchanged anywhere
        let g = Tensor::full(&[1, 21, 21], NEUTRAL_GRAY);
        let rg = Augmentation::Rotation(-4.0).apply(&g);
        assert!(rg.data().iter().all(|v| (v - NEUTRAL_GRAY).abs() < 1e-15));
    }

    #[test]
    fn rotation_moves_a_point_counter_clockwise() {
        // a point right of center moves up (towards smaller row) under a
        // counter-clockwise rotation in image coordinates with y down
        let side = 41;
        let mut img = Tensor::full(&[1, side, side], 0.0);
        img.data_mut()[20 * side + 35] = 1.0;
        let r = Augmentation::Rotation(5.0).apply(&img);
        let (mut best, mut at) = (0.0, 0);
        for (i, &v) in r.data().iter().enumerate() {
            if v > best {
                best = v;
                at = i;
            }
        }
        assert!(at / side < 20, "row {}", at / side);
    }

    #[test]
    fn weights_examples() {
        assert_eq!(class_weights([100, 50]).unwrap(), [0.75, 1.5]);
        assert_eq!(class_weights([50, 50]).unwrap(), [1.0, 1.0]);
        let w = class_weights([109_298, 36_000]).unwrap();
        assert!((w[1] / w[0] - 3.036).abs() < 5e-4, "{}", w[1] / w[0]);
        assert!(class_weights([0, 3]).is_err());
    }

    proptest! {
        #[test]
        fn flips_are_involutions(seed in 0u64..1000, side in 1usize..9) {
            let img = image(seed, side);
            for t in [Augmentation::VerticalFlip, Augmentation::HorizontalFlip] {
                prop_assert_eq!(t.apply(&t.apply(&img)), img.clone());
            }
        }

        #[test]
        fn weights_are_mean_normalized(a in 1usize..10_000, b in 1usize..10_000) {
            let w = class_weights([a, b]).unwrap();
            let mean = (w[0] * a as f64 + w[1] * b as f64) / (a + b) as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
        }
    }
}
