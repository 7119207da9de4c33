use std::fs;
use std::path::PathBuf;

use serde_json::Value;
use tofalign::dataset::{
    decode_pfm, encode_pfm, read_flow, read_kernels, read_manifest, read_pfm, read_sample,
    write_flow, write_kernels, write_pfm, write_sample,
};
use tofalign::geometry::{augment_sample, CalibDelta, WeakCalibParams};
use tofalign::kpn::KernelField;
use tofalign::tof_sim::{synthesize_sample, Scene, SynthConfig};
use tofalign::{Error, FlowField, ImageBuffer, Mask};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn expected(key: &str) -> (usize, usize, Vec<f64>) {
    let text = fs::read_to_string(fixture("expected.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    let e = &v[key];
    let data = e["data"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    (
        e["width"].as_u64().unwrap() as usize,
        e["height"].as_u64().unwrap() as usize,
        data,
    )
}

#[test]
fn golden_little_and_big_endian_gray() {
    let (w, h, data) = expected("gray");
    let want = ImageBuffer::new(w, h, 1, data).unwrap();
    assert_eq!(read_pfm(fixture("gray_le.pfm")).unwrap(), want);
    assert_eq!(read_pfm(fixture("gray_be.pfm")).unwrap(), want);
}

#[test]
fn golden_big_endian_color() {
    let (w, h, data) = expected("color");
    let want = ImageBuffer::new(w, h, 3, data).unwrap();
    assert_eq!(read_pfm(fixture("color_be.pfm")).unwrap(), want);
}

#[test]
fn golden_flow_and_writer_matches_independent_bytes() {
    let (w, h, data) = expected("flow");
    let flow = read_flow(fixture("flow_le.pfm")).unwrap();
    let img = ImageBuffer::new(w, h, 3, data).unwrap();
    assert_eq!(flow, FlowField::from_image(img.clone()).unwrap());
    // Our writer reproduces the independent little-endian file byte for byte.
    assert_eq!(
        encode_pfm(flow.as_image()).unwrap(),
        fs::read(fixture("flow_le.pfm")).unwrap()
    );
    assert_eq!(
        encode_pfm(&img).unwrap(),
        fs::read(fixture("flow_le.pfm")).unwrap()
    );
}

#[test]
fn round_trip_is_f32_rounding() {
    let img = ImageBuffer::from_fn(7, 5, 3, |x, y, c| {
        (x as f64 * 0.37 - y as f64 * 1.1) * (c + 1) as f64 + 1e-9
    });
    let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert_eq!(*b, *a as f32 as f64);
    }
    // Values already representable in f32 survive exactly.
    let exact = back.clone();
    assert_eq!(decode_pfm(&encode_pfm(&exact).unwrap()).unwrap(), exact);
}

#[test]
fn flow_round_trip_is_lossless_for_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let flow = FlowField::from_fn(6, 4, |x, y| (x as f64 * 0.5 - 1.0, -(y as f64) * 0.25));
    let path = dir.path().join("flow.pfm");
    write_flow(&path, &flow).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"PF\n"));
    assert_eq!(read_flow(&path).unwrap(), flow);
}

#[test]
fn masks_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mask = Mask::from_fn(9, 7, |x, y| (x * 3 + y * 5) % 4 != 0);
    let path = dir.path().join("mask.pfm");
    write_pfm(&path, &mask.to_image()).unwrap();
    assert_eq!(Mask::from_image(&read_pfm(&path).unwrap()).unwrap(), mask);
}

fn small_sample() -> tofalign::geometry::DataSample {
    let params = WeakCalibParams::new(40.0, 40.0).unwrap();
    let cfg = SynthConfig {
        width: 24,
        height: 18,
        mpi: true,
        bounce_samples: 4,
        ..SynthConfig::default()
    };
    synthesize_sample(&Scene::random(21), &params, &cfg).unwrap()
}

#[test]
fn sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sample = small_sample();
    let manifest = write_sample(dir.path(), "s0", &sample).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    let (m, back) = read_sample(dir.path()).unwrap();
    assert_eq!(m.id, "s0");
    assert_eq!(back.mask, sample.mask);
    assert_eq!(back.calib, sample.calib);
    assert_eq!(back.aligned, sample.aligned);
    assert_eq!(back.seed, sample.seed);
    let n = sample.mask.count() as f64;
    let mae: f64 = sample
        .mask
        .iter_valid()
        .map(|(x, y)| (back.tof_depth.get(x, y) - sample.tof_depth.get(x, y)).abs())
        .sum::<f64>()
        / n;
    assert!(mae < 1e-6);

    let meta: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    for key in [
        "format", "f_x", "f_y", "t_x", "t_y", "c_x", "c_y", "width", "height", "seed", "aligned",
    ] {
        assert!(meta.get(key).is_some(), "{key}");
    }
    assert_eq!(meta["format"], 1);
}

#[test]
fn augmented_sample_round_trip_keeps_flow_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let sample = small_sample();
    let delta = CalibDelta {
        t_x: 0.01,
        t_y: -0.005,
        c_x: 0.4,
        c_y: -0.3,
    };
    let aug = augment_sample(&sample, delta).unwrap();
    write_sample(dir.path(), "a", &aug).unwrap();
    let (m, back) = read_sample(dir.path()).unwrap();
    assert!(!m.aligned && !back.aligned);
    assert_eq!(back.calib, aug.calib);
    let (f, g) = (back.gt_flow.unwrap(), aug.gt_flow.unwrap());
    for (a, b) in f.as_image().data().iter().zip(g.as_image().data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn missing_file_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_sample(dir.path(), "s", &small_sample()).unwrap();
    fs::remove_file(dir.path().join("gt_depth.pfm")).unwrap();
    match read_sample(dir.path()) {
        Err(Error::Manifest { field, .. }) => assert_eq!(field, "gt_depth"),
        other => panic!("expected manifest error, got {other:?}"),
    }
}

#[test]
fn size_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_sample(dir.path(), "s", &small_sample()).unwrap();
    write_pfm(
        dir.path().join("amplitude.pfm"),
        &ImageBuffer::zeros(3, 3, 1),
    )
    .unwrap();
    match read_sample(dir.path()) {
        Err(Error::Manifest { field, .. }) => assert_eq!(field, "amplitude"),
        other => panic!("expected manifest error, got {other:?}"),
    }
    fs::write(dir.path().join("meta.json"), "{\"format\": 2}").unwrap();
    assert!(matches!(
        read_sample(dir.path()),
        Err(Error::Manifest { .. })
    ));
}

#[test]
fn kernel_field_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h, k) = (5, 4, 3);
    let weights = (0..w * h * k * k)
        .map(|i| (i as f64 * 0.125) - 3.0)
        .collect();
    let bias = ImageBuffer::from_fn(w, h, 1, |x, y, _| x as f64 - 0.5 * y as f64);
    let kf = KernelField::new(w, h, k, weights, bias).unwrap();
    let path = dir.path().join("kernels.pfm");
    write_kernels(&path, &kf).unwrap();
    assert!(dir.path().join("kernels.json").is_file());
    assert_eq!(read_kernels(&path).unwrap(), kf);
}
