//! Identity-structured datasets: splits, cross-camera pair generation for
//! training, translation augmentation and bilinear resizing.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The two camera views every dataset provides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Camera {
    A,
    B,
}

impl Camera {
    pub fn parse(s: &str) -> Option<Camera> {
        match s {
            "A" => Some(Camera::A),
            "B" => Some(Camera::B),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Camera::A => 'A',
            Camera::B => 'B',
        }
    }
}

/// One image of one identity under one camera. Images are `(1, 3, h, w)`
/// tensors with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct IdentityImage {
    pub camera: Camera,
    pub image: Tensor,
    pub path: String,
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub id: String,
    pub images: Vec<IdentityImage>,
}

impl Identity {
    /// Indices (into `images`) of this identity's images under `camera`.
    pub fn camera_images(&self, camera: Camera) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, img)| img.camera == camera)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Identities with their per-camera images; immutable once built.
#[derive(Clone, Debug)]
pub struct IdentityDataset {
    pub source: String,
    pub identities: Vec<Identity>,
}

impl IdentityDataset {
    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }

    /// Returns a copy with every image bilinearly resized.
    pub fn resized(&self, out_h: usize, out_w: usize) -> IdentityDataset {
        IdentityDataset {
            source: self.source.clone(),
            identities: self
                .identities
                .iter()
                .map(|ident| Identity {
                    id: ident.id.clone(),
                    images: ident
                        .images
                        .iter()
                        .map(|img| IdentityImage {
                            camera: img.camera,
                            image: resize_bilinear(&img.image, out_h, out_w),
                            path: img.path.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Disjoint identity-level split: a seeded shuffle selects `n_train`
/// training and `n_test` test identities (each side keeps dataset order).
pub fn split_identities(
    dataset: &IdentityDataset,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(IdentityDataset, IdentityDataset)> {
    let available = dataset.identity_count();
    if n_train + n_test > available {
        return Err(Error::InsufficientIdentities {
            needed: n_train + n_test,
            available,
        });
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..n_train + n_test].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| IdentityDataset {
        source: dataset.source.clone(),
        identities: idx.iter().map(|&i| dataset.identities[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

/// A training pair by reference: `(identity index, image index)` for each
/// side. Side `a` is always a camera-A image and side `b` camera-B.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub label: bool,
}

/// A materialized training pair; the label is true iff the identities match.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub label: bool,
    pub identity_a: String,
    pub identity_b: String,
}

/// Enumerates all positive cross-camera pairs and samples
/// `negative_ratio` times as many negatives (distinct identities, camera A
/// against camera B), then shuffles. Negatives are drawn uniformly with
/// replacement; callers re-invoke per epoch to resample them.
pub fn generate_pair_indices(
    dataset: &IdentityDataset,
    negative_ratio: usize,
    seed: u64,
) -> Result<Vec<PairIndex>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_identity: Vec<(Vec<usize>, Vec<usize>)> = dataset
        .identities
        .iter()
        .map(|ident| (ident.camera_images(Camera::A), ident.camera_images(Camera::B)))
        .collect();

    let mut pairs = Vec::new();
    for (i, (a_imgs, b_imgs)) in per_identity.iter().enumerate() {
        for &ia in a_imgs {
            for &ib in b_imgs {
                pairs.push(PairIndex {
                    a: (i, ia),
                    b: (i, ib),
                    label: true,
                });
            }
        }
    }
    let positives = pairs.len();
    if positives == 0 {
        return Err(Error::NoPositivePairs);
    }

    let needed = negative_ratio * positives;
    if needed > 0 {
        let eligible_a: Vec<usize> = (0..per_identity.len())
            .filter(|&i| !per_identity[i].0.is_empty())
            .collect();
        let eligible_b: Vec<usize> = (0..per_identity.len())
            .filter(|&i| !per_identity[i].1.is_empty())
            .collect();
        let impossible = eligible_a.is_empty()
            || eligible_b.is_empty()
            || (eligible_a.len() == 1 && eligible_b.len() == 1 && eligible_a[0] == eligible_b[0]);
        if impossible {
            return Err(Error::NoNegativePairs);
        }
        for _ in 0..needed {
            let (ai, bi) = loop {
                let ai = eligible_a[rng.gen_range(0..eligible_a.len())];
                let bi = eligible_b[rng.gen_range(0..eligible_b.len())];
                if ai != bi {
                    break (ai, bi);
                }
            };
            let a_imgs = &per_identity[ai].0;
            let b_imgs = &per_identity[bi].1;
            pairs.push(PairIndex {
                a: (ai, a_imgs[rng.gen_range(0..a_imgs.len())]),
                b: (bi, b_imgs[rng.gen_range(0..b_imgs.len())]),
                label: false,
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

pub fn materialize_pair(dataset: &IdentityDataset, pair: &PairIndex) -> PairSample {
    let ident_a = &dataset.identities[pair.a.0];
    let ident_b = &dataset.identities[pair.b.0];
    PairSample {
        image_a: ident_a.images[pair.a.1].image.clone(),
        image_b: ident_b.images[pair.b.1].image.clone(),
        label: pair.label,
        identity_a: ident_a.id.clone(),
        identity_b: ident_b.id.clone(),
    }
}

/// [`generate_pair_indices`] with the tensors copied out.
pub fn generate_pairs(
    dataset: &IdentityDataset,
    negative_ratio: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    Ok(generate_pair_indices(dataset, negative_ratio, seed)?
        .iter()
        .map(|p| materialize_pair(dataset, p))
        .collect())
}

/// Translates an image by whole pixels, zero-filling vacated ones:
/// `out[y][x] = in[y + dy][x + dx]`, so a positive `dy` zeroes the bottom
/// `dy` rows.
pub fn shift_image(image: &Tensor, dy: i32, dx: i32) -> Tensor {
    let (n, c, h, w) = image.dims();
    let mut out = Tensor::zeros(image.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let sy = y as i32 + dy;
                if sy < 0 || sy >= h as i32 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i32 + dx;
                    if sx >= 0 && sx < w as i32 {
                        out.set(ni, ci, y, x, image.at(ni, ci, sy as usize, sx as usize));
                    }
                }
            }
        }
    }
    out
}

/// Translation draw ranges at the canonical 160x80 crop size: 8 rows by
/// 4 columns, matching the 2:1 aspect of the person crops.
pub const AUGMENT_RANGE_Y: i32 = 8;
pub const AUGMENT_RANGE_X: i32 = 4;
pub const AUGMENT_BASE_H: usize = 160;
pub const AUGMENT_BASE_W: usize = 80;

/// Offset bounds for an `h x w` image: the canonical `[-8, 8] x [-4, 4]`
/// ranges scaled with the image so smaller inputs keep the same 5%
/// translation severity (a 160x80 image gets the full ranges).
pub fn augment_ranges(h: usize, w: usize) -> (i32, i32) {
    let scale = |range: i32, extent: usize, base: usize| -> i32 {
        let scaled = range as f32 * extent as f32 / base as f32;
        (crate::mathf::round(scaled) as i32).max(1)
    };
    (
        scale(AUGMENT_RANGE_Y, h, AUGMENT_BASE_H),
        scale(AUGMENT_RANGE_X, w, AUGMENT_BASE_W),
    )
}

/// Samples five translated copies around the image center with zero fill,
/// offsets drawn uniformly from the image's [`augment_ranges`].
pub fn augment_translations(image: &Tensor, rng: &mut impl Rng) -> Vec<Tensor> {
    let (_, _, h, w) = image.dims();
    let (ry, rx) = augment_ranges(h, w);
    (0..5)
        .map(|_| {
            let dy = rng.gen_range(-ry..=ry);
            let dx = rng.gen_range(-rx..=rx);
            shift_image(image, dy, dx)
        })
        .collect()
}

/// Bilinear resize with half-pixel sample centers. Equal extents are a
/// bitwise pass-through; the interpolation uses the lerp form, so constant
/// images stay exactly constant.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = image.dims();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let scale_y = h as f32 / out_h as f32;
    let scale_x = w as f32 / out_w as f32;
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..out_h {
                let sy = ((oy as f32 + 0.5) * scale_y - 0.5).max(0.0);
                let y0 = crate::mathf::floor(sy) as usize;
                let y0 = y0.min(h - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fy = sy - y0 as f32;
                for ox in 0..out_w {
                    let sx = ((ox as f32 + 0.5) * scale_x - 0.5).max(0.0);
                    let x0 = crate::mathf::floor(sx) as usize;
                    let x0 = x0.min(w - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = sx - x0 as f32;
                    let v00 = image.at(ni, ci, y0, x0);
                    let v01 = image.at(ni, ci, y0, x1);
                    let v10 = image.at(ni, ci, y1, x0);
                    let v11 = image.at(ni, ci, y1, x1);
                    let top = v00 + fx * (v01 - v00);
                    let bottom = v10 + fx * (v11 - v10);
                    out.set(ni, ci, oy, ox, top + fy * (bottom - top));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn tiny_image(value: f32) -> Tensor {
        Tensor::full([1, 3, 8, 4], value)
    }

    fn toy_dataset(ids: usize, per_camera: usize) -> IdentityDataset {
        let identities = (0..ids)
            .map(|i| Identity {
                id: format!("{i:03}"),
                images: (0..2 * per_camera)
                    .map(|k| IdentityImage {
                        camera: if k < per_camera { Camera::A } else { Camera::B },
                        image: tiny_image(i as f32 / ids as f32),
                        path: format!("{i:03}/{k}"),
                    })
                    .collect(),
            })
            .collect();
        IdentityDataset {
            source: "toy".to_string(),
            identities,
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let ds = toy_dataset(12, 2);
        let (tr1, te1) = split_identities(&ds, 8, 4, 42).unwrap();
        let (tr2, te2) = split_identities(&ds, 8, 4, 42).unwrap();
        assert_eq!(tr1.identity_count(), 8);
        assert_eq!(te1.identity_count(), 4);
        let ids = |d: &IdentityDataset| d.identities.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&te1), ids(&te2));
        for id in ids(&te1) {
            assert!(!ids(&tr1).contains(&id));
        }
        let (tr3, _) = split_identities(&ds, 8, 4, 43).unwrap();
        assert_ne!(ids(&tr1), ids(&tr3));
    }

    #[test]
    fn split_accepts_published_cuhk03_setting() {
        // 1360 identities split into 1160 train and 100 test IDs.
        let identities = (0..1360)
            .map(|i| Identity {
                id: format!("{i:04}"),
                images: vec![],
            })
            .collect();
        let ds = IdentityDataset {
            source: "cuhk03-shape".to_string(),
            identities,
        };
        let (train, test) = split_identities(&ds, 1160, 100, 1).unwrap();
        assert_eq!(train.identity_count(), 1160);
        assert_eq!(test.identity_count(), 100);
    }

    #[test]
    fn split_rejects_oversized_request() {
        let ds = toy_dataset(5, 1);
        assert!(matches!(
            split_identities(&ds, 4, 2, 0),
            Err(Error::InsufficientIdentities { .. })
        ));
    }

    #[test]
    fn pair_generation_respects_negative_ratio() {
        let ds = toy_dataset(6, 2);
        let pairs = generate_pair_indices(&ds, 3, 7).unwrap();
        let positives = pairs.iter().filter(|p| p.label).count();
        let negatives = pairs.len() - positives;
        assert_eq!(positives, 6 * 2 * 2);
        assert_eq!(negatives, 3 * positives);
    }

    #[test]
    fn zero_ratio_gives_positives_only() {
        let ds = toy_dataset(3, 1);
        let pairs = generate_pair_indices(&ds, 0, 7).unwrap();
        assert!(pairs.iter().all(|p| p.label));
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn labels_match_identity_equality_and_cameras_are_crossed() {
        let ds = toy_dataset(5, 2);
        for pair in generate_pair_indices(&ds, 3, 11).unwrap() {
            assert_eq!(pair.label, pair.a.0 == pair.b.0);
            assert_eq!(ds.identities[pair.a.0].images[pair.a.1].camera, Camera::A);
            assert_eq!(ds.identities[pair.b.0].images[pair.b.1].camera, Camera::B);
            // Never the same physical file on both sides.
            let path_a = &ds.identities[pair.a.0].images[pair.a.1].path;
            let path_b = &ds.identities[pair.b.0].images[pair.b.1].path;
            assert_ne!(path_a, path_b);
        }
    }

    #[test]
    fn single_identity_has_no_negatives() {
        let ds = toy_dataset(1, 2);
        assert!(matches!(
            generate_pair_indices(&ds, 3, 0),
            Err(Error::NoNegativePairs)
        ));
        assert!(generate_pair_indices(&ds, 0, 0).is_ok());
    }

    #[test]
    fn materialized_pairs_carry_identity_ids() {
        let ds = toy_dataset(4, 1);
        for sample in generate_pairs(&ds, 1, 3).unwrap() {
            assert_eq!(sample.label, sample.identity_a == sample.identity_b);
        }
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = Tensor::from_fn([1, 3, 8, 4], |_, c, h, w| (c * 100 + h * 10 + w) as f32);
        assert_eq!(shift_image(&img, 0, 0), img);
    }

    #[test]
    fn positive_shift_zeroes_bottom_right() {
        let img = Tensor::full([1, 3, 16, 8], 1.0);
        let shifted = shift_image(&img, 8, 4);
        for y in 0..16 {
            for x in 0..8 {
                let expect = if y < 8 && x < 4 { 1.0 } else { 0.0 };
                assert_eq!(shifted.at(0, 0, y, x), expect, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::uniform([1, 3, 32, 16], 0.0, 1.0, &mut rng);
        let variants = augment_translations(&img, &mut rng);
        assert_eq!(variants.len(), 5);
        for v in &variants {
            assert_eq!(v.shape(), img.shape());
            assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn augmentation_offsets_stay_in_range() {
        // Audit the draw ranges over many samples via a delta image.
        let mut probe = Tensor::zeros([1, 3, 64, 32]);
        probe.set(0, 0, 32, 16, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2000 {
            for v in augment_translations(&probe, &mut rng) {
                let hit = v.data().iter().position(|&x| x == 1.0).expect("marker survives");
                let y = (hit / 32) % 64;
                let x = hit % 32;
                let dy = 32i32 - y as i32;
                let dx = 16i32 - x as i32;
                assert!((-8..=8).contains(&dy), "dy {dy}");
                assert!((-4..=4).contains(&dx), "dx {dx}");
            }
        }
    }

    #[test]
    fn resize_same_size_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform([1, 3, 10, 6], 0.0, 1.0, &mut rng);
        assert_eq!(resize_bilinear(&img, 10, 6), img);
    }

    #[test]
    fn resize_keeps_solid_colors_exact() {
        let img = Tensor::full([1, 3, 160, 80], 0.3125);
        let small = resize_bilinear(&img, 32, 16);
        assert_eq!(small.shape(), [1, 3, 32, 16]);
        assert!(small.data().iter().all(|&v| v == 0.3125));
    }

    #[test]
    fn resize_interpolates_between_rows() {
        let img = Tensor::from_fn([1, 1, 4, 1], |_, _, h, _| h as f32);
        let up = resize_bilinear(&img, 8, 1);
        // Monotone along the axis and within the endpoint range.
        for y in 1..8 {
            assert!(up.at(0, 0, y, 0) >= up.at(0, 0, y - 1, 0));
        }
        assert!(up.at(0, 0, 0, 0) >= 0.0 && up.at(0, 0, 7, 0) <= 3.0);
    }
}
