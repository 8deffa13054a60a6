use caidd::checkpoint;
use caidd::dataset;
use caidd::images::{load_image_folder, load_png, save_png};
use caidd::Error;
use caidd_core::denoiser::DenoiserConfig;
use caidd_core::synthfaces::make_dataset;
use caidd_core::trainer::{Checkpoint, TrainConfig, Trainer};
use caidd_core::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

fn tiny() -> TrainConfig {
    TrainConfig {
        steps: 4,
        batch_size: 2,
        warmup_steps: Some(1),
        denoiser: DenoiserConfig {
            image_size: 16,
            base_channels: 8,
            time_embed_dim: 16,
            n_heads: 2,
            d_head: 4,
            res_blocks: 1,
            norm_groups: 4,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn trained(steps: usize) -> (Trainer, Vec<Tensor>) {
    let data = make_dataset(3, 3, 1, 16).unwrap().images();
    let mut t = Trainer::new(tiny(), &data).unwrap();
    for _ in 0..steps {
        t.step().unwrap();
    }
    (t, data)
}

#[test]
fn checkpoint_round_trip_is_exact_and_stable() {
    let (t, _) = trained(2);
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    checkpoint::save(&ckpt, &p).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(back, ckpt);
    for (a, b) in back.params.tensors().iter().zip(ckpt.params.tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(checkpoint::encode(&back), std::fs::read(&p).unwrap());
}

#[test]
fn reloaded_checkpoint_continues_identically() {
    let (mut t, data) = trained(2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.ckpt");
    checkpoint::save(&t.checkpoint(), &p).unwrap();
    let mut r = Trainer::resume(&checkpoint::load(&p).unwrap(), &data).unwrap();
    for _ in 0..2 {
        assert_eq!(t.step().unwrap(), r.step().unwrap());
    }
}

#[test]
fn corrupted_checkpoint_fails_the_digest() {
    let (t, _) = trained(0);
    let mut bytes = checkpoint::encode(&t.checkpoint());
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    let err = checkpoint::decode(&bytes, Path::new("x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn version_mismatch_is_reported() {
    let (t, _) = trained(0);
    let ckpt = Checkpoint {
        format_version: 99,
        ..t.checkpoint()
    };
    let err = checkpoint::decode(&checkpoint::encode(&ckpt), Path::new("x.ckpt")).unwrap_err();
    assert!(err.to_string().contains("version 99"), "{err}");
}

#[test]
fn non_checkpoint_is_a_format_error() {
    let err = checkpoint::decode(b"hello world, not a checkpoint at all, just text....", Path::new("x")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
}

#[test]
fn white_png_maps_to_plus_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("white.png");
    image::RgbImage::from_pixel(8, 8, image::Rgb([255, 255, 255])).save(&p).unwrap();
    let t = load_png(&p, 8).unwrap();
    assert!(t.data().iter().all(|v| (v - 1.0).abs() <= 1.0 / 127.5));
}

#[test]
fn rendered_face_survives_png_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let face = make_dataset(1, 1, 3, 32).unwrap().faces.remove(0).image;
    let p = dir.path().join("f.png");
    save_png(&face, &p).unwrap();
    let back = load_png(&p, 32).unwrap();
    assert!(back.max_abs_diff(&face) <= 1.0 / 127.5 + 1e-12);
}

#[test]
fn folder_loading_resizes_and_reports_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_image_folder(dir.path(), 16).unwrap().images.is_empty());
    let face = make_dataset(1, 1, 3, 32).unwrap().faces.remove(0).image;
    save_png(&face, &dir.path().join("b.png")).unwrap();
    std::fs::write(dir.path().join("a.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let loaded = load_image_folder(dir.path(), 16).unwrap();
    assert_eq!(loaded.images.len(), 1);
    assert_eq!(loaded.images[0].1.shape(), &[1, 3, 16, 16]);
    assert_eq!(loaded.errors.len(), 1);
    assert!(loaded.errors[0].0.ends_with("a.png"));
    assert!(loaded.summary().contains("1 loaded, 1 failed"));
}

fn dir_digest(dir: &Path) -> Vec<u8> {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().to_vec()
}

#[test]
fn dataset_export_round_trips_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ds = make_dataset(5, 2, 8, 32).unwrap();
    let entries = dataset::export(&ds, a.path()).unwrap();
    dataset::export(&make_dataset(5, 2, 8, 32).unwrap(), b.path()).unwrap();
    assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
    dataset::validate_manifest(&entries, 1e-6).unwrap();
    let (read, images) = dataset::import(a.path(), 32).unwrap();
    assert_eq!(read, entries);
    assert_eq!(read.iter().map(|e| e.identity).collect::<Vec<_>>(), ds.identities);
    for (img, face) in images.iter().zip(&ds.faces) {
        assert!(img.max_abs_diff(&face.image) <= 1.0 / 127.5 + 1e-12);
    }
}

#[test]
fn manifest_with_a_non_unit_gaze_is_rejected() {
    let e = dataset::ManifestEntry {
        filename: "x.png".into(),
        identity: 0,
        pose_yaw: 0.0,
        gaze: [0.0, 0.0, 0.9],
        lighting: 1.0,
    };
    assert!(dataset::validate_manifest(&[e], 1e-6).is_err());
}

#[test]
fn shipped_desk_config_matches_the_builtin_preset() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let cfg = caidd::config::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, TrainConfig::desk());
}
