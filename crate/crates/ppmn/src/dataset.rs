//! Dataset directory layout: `<root>/<identity_id>/<camera_id>/<name>.ppm`
//! with binary P6 images. Loading resizes every image to the model input
//! size; entries are visited in sorted order so datasets load
//! deterministically.

use std::fs;
use std::path::Path;

use ppmn_core::data::{Camera, Identity, IdentityDataset, IdentityImage};
use ppmn_core::data::resize_bilinear;

use crate::error::{CliError, Result};
use crate::netpbm::{decode_ppm, encode_ppm, image_to_tensor, tensor_to_rgb8};

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries: Vec<fs::DirEntry> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .collect::<std::io::Result<_>>()
        .map_err(CliError::io(dir))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Loads every identity from `root`, decoding and bilinearly resizing to
/// `input_h x input_w`. Unknown camera directories, malformed images and
/// identities without any image are rejected with the offending path.
pub fn load_dataset(root: &Path, input_h: usize, input_w: usize) -> Result<IdentityDataset> {
    let mut identities = Vec::new();
    for ident_entry in sorted_entries(root)? {
        let ident_path = ident_entry.path();
        if !ident_path.is_dir() {
            continue; // resolved configs and notes may sit next to the data
        }
        let id = ident_entry.file_name().to_string_lossy().into_owned();
        let mut images = Vec::new();
        for cam_entry in sorted_entries(&ident_path)? {
            let cam_path = cam_entry.path();
            if !cam_path.is_dir() {
                continue;
            }
            let cam_name = cam_entry.file_name().to_string_lossy().into_owned();
            let camera = Camera::parse(&cam_name).ok_or_else(|| CliError::Format {
                path: cam_path.clone(),
                reason: format!("unknown camera id {cam_name:?} (expected A or B)"),
            })?;
            for file in sorted_entries(&cam_path)? {
                let file_path = file.path();
                if file_path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                    continue;
                }
                let bytes = fs::read(&file_path).map_err(CliError::io(&file_path))?;
                let decoded = decode_ppm(&bytes, &file_path)?;
                let image = resize_bilinear(&image_to_tensor(&decoded), input_h, input_w);
                images.push(IdentityImage {
                    camera,
                    image,
                    path: file_path.to_string_lossy().into_owned(),
                });
            }
        }
        if images.is_empty() {
            return Err(CliError::Format {
                path: ident_path,
                reason: "identity has no images".into(),
            });
        }
        identities.push(Identity { id, images });
    }
    if identities.is_empty() {
        return Err(CliError::Format {
            path: root.to_path_buf(),
            reason: "dataset has no identities".into(),
        });
    }
    Ok(IdentityDataset {
        source: root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.to_string_lossy().into_owned()),
        identities,
    })
}

/// Writes a dataset in the canonical layout, one P6 file per image at the
/// image's own resolution.
pub fn save_dataset(dataset: &IdentityDataset, root: &Path) -> Result<()> {
    for identity in &dataset.identities {
        let mut counters = [0usize; 2];
        for image in &identity.images {
            let cam_dir = root
                .join(&identity.id)
                .join(image.camera.as_char().to_string());
            fs::create_dir_all(&cam_dir).map_err(CliError::io(&cam_dir))?;
            let slot = match image.camera {
                Camera::A => &mut counters[0],
                Camera::B => &mut counters[1],
            };
            let file = cam_dir.join(format!("{:02}.ppm", *slot));
            *slot += 1;
            let (w, h, rgb) = tensor_to_rgb8(&image.image);
            fs::write(&file, encode_ppm(w, h, &rgb)).map_err(CliError::io(&file))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppmn_core::synth::synth_dataset;
    use tempfile::TempDir;

    #[test]
    fn save_then_load_round_trips_file_bytes() {
        let dir = TempDir::new().unwrap();
        let ds = synth_dataset(3, 2, 5).unwrap();
        save_dataset(&ds, dir.path()).unwrap();

        // Reload at the native size and re-save: bytes must be identical.
        let reloaded = load_dataset(dir.path(), 160, 80).unwrap();
        assert_eq!(reloaded.identity_count(), 3);
        assert_eq!(reloaded.image_count(), 12);
        let second = TempDir::new().unwrap();
        save_dataset(&reloaded, second.path()).unwrap();
        for identity in &ds.identities {
            for cam in ["A", "B"] {
                for k in 0..2 {
                    let rel = format!("{}/{}/{:02}.ppm", identity.id, cam, k);
                    let a = std::fs::read(dir.path().join(&rel)).unwrap();
                    let b = std::fs::read(second.path().join(&rel)).unwrap();
                    assert_eq!(a, b, "bytes differ for {rel}");
                }
            }
        }
    }

    #[test]
    fn loader_resizes_to_requested_input() {
        let dir = TempDir::new().unwrap();
        let ds = synth_dataset(2, 1, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let small = load_dataset(dir.path(), 32, 16).unwrap();
        // 2 identities x 2 cameras x 1 image
        assert_eq!(small.image_count(), 4);
        for identity in &small.identities {
            for img in &identity.images {
                assert_eq!(img.image.shape(), [1, 3, 32, 16]);
            }
        }
    }

    #[test]
    fn unknown_camera_directory_is_rejected() {
        let dir = TempDir::new().unwrap();
        let bad = dir.path().join("001").join("C");
        std::fs::create_dir_all(&bad).unwrap();
        std::fs::write(bad.join("00.ppm"), encode_ppm(1, 1, &[0, 0, 0])).unwrap();
        let err = load_dataset(dir.path(), 32, 16).unwrap_err();
        assert!(format!("{err}").contains("unknown camera id"));
    }

    #[test]
    fn malformed_image_names_the_file() {
        let dir = TempDir::new().unwrap();
        let cam = dir.path().join("001").join("A");
        std::fs::create_dir_all(&cam).unwrap();
        std::fs::write(cam.join("00.ppm"), b"not a ppm").unwrap();
        let err = load_dataset(dir.path(), 32, 16).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("00.ppm") && msg.contains("P6"), "{msg}");
    }

    #[test]
    fn empty_identity_is_rejected() {
        let dir = TempDir::new().unwrap();
        std::fs::create_dir_all(dir.path().join("007").join("A")).unwrap();
        let err = load_dataset(dir.path(), 32, 16).unwrap_err();
        assert!(format!("{err}").contains("no images"));
    }
}
