use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array3;
use triplet_texture::material::{load_material, save_material, saved_manifest, MaterialManifest};
use triplet_texture::{ChannelLayout, Error, MaterialStack};

fn sample_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/sample_material/manifest.toml")
}

fn manifest(dir: &Path, maps: &str) -> MaterialManifest {
    MaterialManifest::from_toml_str(&format!("[maps]\n{maps}"), dir).unwrap()
}

#[test]
fn eight_bit_values_scale_by_255() {
    let dir = tempfile::tempdir().unwrap();
    let img = GrayImage::from_raw(2, 1, vec![255, 128]).unwrap();
    img.save(dir.path().join("r.png")).unwrap();
    let stack = load_material(&manifest(dir.path(), "r = { path = \"r.png\", channels = 1 }")).unwrap();
    assert_eq!(stack.data()[[0, 0, 0]], 1.0);
    assert_eq!(stack.data()[[0, 0, 1]], 128.0 / 255.0);
}

#[test]
fn sixteen_bit_values_scale_by_65535() {
    let dir = tempfile::tempdir().unwrap();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![65535, 1000]).unwrap();
    img.save(dir.path().join("h.png")).unwrap();
    let stack = load_material(&manifest(dir.path(), "h = { path = \"h.png\", channels = 1 }")).unwrap();
    assert_eq!(stack.data()[[0, 0, 0]], 1.0);
    assert_eq!(stack.data()[[0, 0, 1]], 1000.0 / 65535.0);
}

#[test]
fn quantized_stacks_round_trip_exactly() {
    for (depth, levels) in [(8u8, 255.0), (16u8, 65535.0)] {
        let dir = tempfile::tempdir().unwrap();
        let layout = ChannelLayout::new([("albedo", 3), ("rough", 1)]).unwrap();
        let data = Array3::from_shape_fn((4, 5, 7), |(c, i, j)| {
            ((c * 37 + i * 11 + j * 5) % 256) as f64 * 257.0 / 65535.0
        });
        let data = data.mapv(|v: f64| (v * levels).round() / levels);
        let stack = MaterialStack::new(data, layout.clone()).unwrap();
        let out = MaterialManifest::for_output(&layout, dir.path(), depth);
        let written = save_material(&stack, &out).unwrap();
        assert_eq!(written.len(), 2);
        let back = load_material(&saved_manifest(&out)).unwrap();
        assert_eq!(back, stack, "{depth}-bit round trip");
    }
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_material(&manifest(dir.path(), "ao = { path = \"ao.png\", channels = 1 }")).unwrap_err();
    match &err {
        Error::MissingFile(p) => assert!(p.ends_with("ao.png")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("ao.png"));
}

#[test]
fn mismatched_sizes_need_a_target_size() {
    let dir = tempfile::tempdir().unwrap();
    GrayImage::from_pixel(8, 8, Luma([10]))
        .save(dir.path().join("a.png"))
        .unwrap();
    GrayImage::from_pixel(4, 4, Luma([200]))
        .save(dir.path().join("b.png"))
        .unwrap();
    let maps = "a = { path = \"a.png\", channels = 1 }\nb = { path = \"b.png\", channels = 1 }";
    assert!(matches!(
        load_material(&manifest(dir.path(), maps)),
        Err(Error::SizeMismatch { .. })
    ));

    let resized = MaterialManifest::from_toml_str(&format!("size = [6, 6]\n[maps]\n{maps}"), dir.path()).unwrap();
    let stack = load_material(&resized).unwrap();
    assert_eq!(stack.data().dim(), (2, 6, 6));
    // constant planes stay constant under bilinear resampling
    assert!(stack.plane(1).iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-12));
}

#[test]
fn rgb_file_for_single_channel_role_keeps_first_plane() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(3, 3, Rgb([51, 102, 153]))
        .save(dir.path().join("m.png"))
        .unwrap();
    let stack = load_material(&manifest(dir.path(), "m = { path = \"m.png\", channels = 1 }")).unwrap();
    assert_eq!(stack.channels(), 1);
    assert!(stack.data().iter().all(|&v| v == 0.2));
}

#[test]
fn bundled_material_has_nine_channels_in_role_order() {
    let m = MaterialManifest::from_file(&sample_manifest()).unwrap();
    let stack = load_material(&m).unwrap();
    assert_eq!(stack.layout(), &ChannelLayout::pbr());
    assert_eq!(stack.channels(), 9);
    assert_eq!(stack.layout().role_range("ao"), Some((8, 1)));
    assert!(stack.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
