//! Synthetic desk-scale re-identification dataset.
//!
//! Each identity is a deterministic composition of colored geometric
//! components (torso block, head disc, pants, optional shoulder bag) on a
//! 160x80 canvas. Camera A renders the components with small jitter; camera
//! B mirrors the whole frame horizontally, jitters positions up to 12
//! pixels and shifts brightness — so the bag lands on the opposite side and
//! component locations stop lining up between views, which is exactly the
//! misalignment the matching pyramid exists to absorb.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Camera, Identity, IdentityDataset, IdentityImage};
use crate::error::Result;
use crate::mix_seed;
use crate::tensor::Tensor;

pub const SYNTH_HEIGHT: usize = 160;
pub const SYNTH_WIDTH: usize = 80;

const BACKGROUND: [f32; 3] = [0.16, 0.16, 0.20];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BagAppearance {
    pub rgb: [f32; 3],
    pub half_size: usize,
    pub on_left: bool,
}

/// The identity-specific component attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityAppearance {
    pub torso_rgb: [f32; 3],
    pub torso_half_width: usize,
    pub torso_height: usize,
    pub head_rgb: [f32; 3],
    pub head_radius: usize,
    pub pants_rgb: [f32; 3],
    pub bag: Option<BagAppearance>,
}

fn fract(x: f32) -> f32 {
    x - crate::mathf::floor(x)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = fract(h) * 6.0;
    let sector = crate::mathf::floor(h6) as i32 % 6;
    let f = h6 - crate::mathf::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic attributes for identity `index` of `n_ids`. Torso hues
/// are spaced equally around the hue circle, so no two identities share a
/// torso color and the closest pair is as separable as the population
/// allows.
pub fn identity_appearance(index: usize, n_ids: usize, seed: u64) -> IdentityAppearance {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA77 + index as u64));
    let base = fract(mix_seed(seed, 0x5EED) as f32 / u64::MAX as f32);
    let torso_hue = fract(base + index as f32 / n_ids.max(1) as f32);
    let torso_sat = 0.65 + 0.35 * rng.gen_range(0.0..1.0f32);
    // Component values stay at or below 0.85 so the camera-B brightness
    // scale never clamps at 1.0, which would distort the color ratios the
    // matcher relies on.
    let torso_val = 0.60 + 0.25 * rng.gen_range(0.0..1.0f32);
    // Pants hues follow an independent golden-ratio sequence, so
    // identities adjacent on the torso hue circle still differ strongly.
    let pants_hue = fract(base + 0.37 + index as f32 * 0.618_034);
    let head_tone = rng.gen_range(0.55..0.85f32);
    let has_bag = rng.gen_range(0.0..1.0f32) < 0.6;
    IdentityAppearance {
        torso_rgb: hsv_to_rgb(torso_hue, torso_sat, torso_val),
        torso_half_width: rng.gen_range(12..=18),
        torso_height: rng.gen_range(48..=64),
        head_rgb: [head_tone, head_tone * 0.82, head_tone * 0.66],
        head_radius: rng.gen_range(8..=12),
        pants_rgb: hsv_to_rgb(pants_hue, 0.75, 0.55),
        bag: has_bag.then(|| BagAppearance {
            rgb: hsv_to_rgb(fract(torso_hue + 0.5), 0.9, 0.8),
            half_size: rng.gen_range(6..=9),
            on_left: rng.gen_range(0.0..1.0f32) < 0.5,
        }),
    }
}

fn fill_rect(canvas: &mut Tensor, y0: i32, y1: i32, x0: i32, x1: i32, rgb: [f32; 3]) {
    let (_, _, h, w) = canvas.dims();
    for y in y0.max(0)..y1.min(h as i32) {
        for x in x0.max(0)..x1.min(w as i32) {
            for (c, &v) in rgb.iter().enumerate() {
                canvas.set(0, c, y as usize, x as usize, v);
            }
        }
    }
}

fn fill_disc(canvas: &mut Tensor, cy: i32, cx: i32, radius: i32, rgb: [f32; 3]) {
    let (_, _, h, w) = canvas.dims();
    for y in (cy - radius).max(0)..(cy + radius + 1).min(h as i32) {
        for x in (cx - radius).max(0)..(cx + radius + 1).min(w as i32) {
            let dy = y - cy;
            let dx = x - cx;
            if dy * dy + dx * dx <= radius * radius {
                for (c, &v) in rgb.iter().enumerate() {
                    canvas.set(0, c, y as usize, x as usize, v);
                }
            }
        }
    }
}

/// Draws the components at a jittered position, optionally mirrors the
/// frame horizontally, then applies a clamped brightness scale.
pub fn render_canonical(
    appearance: &IdentityAppearance,
    jitter: (i32, i32),
    mirror: bool,
    brightness: f32,
) -> Tensor {
    let (dy, dx) = jitter;
    let mut canvas = Tensor::from_fn([1, 3, SYNTH_HEIGHT, SYNTH_WIDTH], |_, c, _, _| BACKGROUND[c]);
    let cx = SYNTH_WIDTH as i32 / 2 + dx;
    let head_cy = 28 + dy;
    let torso_top = 44 + dy;
    let torso_bottom = torso_top + appearance.torso_height as i32;
    let half_w = appearance.torso_half_width as i32;

    fill_rect(
        &mut canvas,
        torso_bottom,
        (torso_bottom + 44).min(SYNTH_HEIGHT as i32 - 6),
        cx - half_w + 3,
        cx + half_w - 3,
        appearance.pants_rgb,
    );
    fill_rect(
        &mut canvas,
        torso_top,
        torso_bottom,
        cx - half_w,
        cx + half_w,
        appearance.torso_rgb,
    );
    fill_disc(&mut canvas, head_cy, cx, appearance.head_radius as i32, appearance.head_rgb);
    if let Some(bag) = &appearance.bag {
        let half = bag.half_size as i32;
        let offset = half_w + half + 3;
        let bag_cx = if bag.on_left { cx - offset } else { cx + offset };
        let bag_cy = torso_top + 26;
        fill_rect(
            &mut canvas,
            bag_cy - half,
            bag_cy + half,
            bag_cx - half,
            bag_cx + half,
            bag.rgb,
        );
    }

    if mirror {
        let (_, c, h, w) = canvas.dims();
        let mut flipped = Tensor::zeros(canvas.shape());
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    flipped.set(0, ci, y, x, canvas.at(0, ci, y, w - 1 - x));
                }
            }
        }
        canvas = flipped;
    }

    if brightness != 1.0 {
        for v in canvas.data_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
    }
    canvas
}

/// Renders one image: camera A jitters up to 4 pixels, camera B mirrors,
/// jitters up to 12 pixels and shifts brightness by up to 15 percent.
/// Bitwise deterministic in `(identity index, camera, image index, seed)`.
pub fn render_image(
    appearance: &IdentityAppearance,
    index: usize,
    camera: Camera,
    image_index: usize,
    seed: u64,
) -> Tensor {
    let cam_tag = match camera {
        Camera::A => 1u64,
        Camera::B => 2u64,
    };
    let stream = mix_seed(mix_seed(mix_seed(seed, 0x1D + index as u64), cam_tag), image_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    match camera {
        Camera::A => {
            let jitter = (rng.gen_range(-4..=4), rng.gen_range(-2..=2));
            let brightness = rng.gen_range(0.95..1.05f32);
            render_canonical(appearance, jitter, false, brightness)
        }
        Camera::B => {
            let jitter = (rng.gen_range(-12..=12), rng.gen_range(-6..=6));
            let brightness = rng.gen_range(0.85..1.15f32);
            render_canonical(appearance, jitter, true, brightness)
        }
    }
}

/// Generates `n_ids` identities with `per_camera` images under each camera,
/// at the canonical 160x80 size.
pub fn synth_dataset(n_ids: usize, per_camera: usize, seed: u64) -> Result<IdentityDataset> {
    if n_ids < 2 {
        return Err(crate::error::Error::InsufficientIdentities {
            needed: 2,
            available: n_ids,
        });
    }
    let mut identities = Vec::with_capacity(n_ids);
    for index in 0..n_ids {
        let appearance = identity_appearance(index, n_ids, seed);
        let id = format!("{index:03}");
        let mut images = Vec::with_capacity(2 * per_camera);
        for camera in [Camera::A, Camera::B] {
            for k in 0..per_camera {
                images.push(IdentityImage {
                    camera,
                    image: render_image(&appearance, index, camera, k, seed),
                    path: format!("{id}/{}/{k:02}.ppm", camera.as_char()),
                });
            }
        }
        identities.push(Identity { id, images });
    }
    Ok(IdentityDataset {
        source: "synth".to_string(),
        identities,
    })
}
