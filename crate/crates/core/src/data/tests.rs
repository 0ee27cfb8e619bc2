use super::*;
use crate::model::{sgd_step, Classifier, OptimState};
use crate::rng::{substream, Stream};
use approx::assert_abs_diff_eq;
use ndarray::ArrayD;
use sha2::Digest;
use std::fs;

#[test]
fn two_gaussians_is_deterministic() {
    let a = make_synthetic(SynthKind::TwoGaussians, 4, 7).unwrap();
    let b = make_synthetic(SynthKind::TwoGaussians, 4, 7).unwrap();
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.labels, b.labels);
    let c = make_synthetic(SynthKind::TwoGaussians, 4, 8).unwrap();
    assert_ne!(a.inputs, c.inputs);
}

#[test]
fn spirals_are_class_balanced() {
    let data = make_synthetic(SynthKind::Spirals, 1000, 3).unwrap();
    let ones = data.labels.iter().filter(|&&l| l == 1).count();
    assert_eq!(ones, 500);
    assert_eq!(data.len(), 1000);
}

#[test]
fn tiny_datasets_are_rejected() {
    assert!(matches!(
        make_synthetic(SynthKind::TwoGaussians, 1, 0),
        Err(MatError::Config(_))
    ));
}

// Closed-form LDA oracle: project onto the center difference and threshold at
// the midpoint. With the centers several sigma apart the blobs are linearly
// separable to better than 99%.
#[test]
fn well_separated_gaussians_are_linearly_separable() {
    let geom = TwoGaussians {
        center_a: (0.3, 0.3),
        center_b: (0.7, 0.7),
        sigma: {
            let gap = (2.0f64 * 0.4 * 0.4).sqrt();
            gap / 8.0
        },
    };
    let data = two_gaussians(2000, 11, geom).unwrap();
    let w = [
        geom.center_b.0 - geom.center_a.0,
        geom.center_b.1 - geom.center_a.1,
    ];
    let mid = [
        0.5 * (geom.center_a.0 + geom.center_b.0),
        0.5 * (geom.center_a.1 + geom.center_b.1),
    ];
    let mut hits = 0usize;
    for (row, &label) in data.inputs.rows().into_iter().zip(&data.labels) {
        let score = w[0] * (row[0] - mid[0]) + w[1] * (row[1] - mid[1]);
        let pred = usize::from(score > 0.0);
        hits += usize::from(pred == label);
    }
    let acc = hits as f64 / data.len() as f64;
    assert!(acc >= 0.99, "LDA accuracy {acc}");
}

#[test]
fn class_gap_matches_geometry() {
    let data = make_synthetic(SynthKind::TwoGaussians, 4000, 5).unwrap();
    let expected = (2.0f64 * 0.4 * 0.4).sqrt();
    let gap = data.class_gap().unwrap();
    assert!((gap - expected).abs() < 0.02, "gap {gap} vs {expected}");
}

#[test]
fn splits_are_disjoint_and_cover() {
    let data = make_synthetic(SynthKind::TwoGaussians, 101, 9).unwrap();
    let parts = data.split_fractions(&[0.6, 0.2, 0.2], 13).unwrap();
    assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 101);
    assert_eq!(parts[0].split, SplitTag::Train);
    assert_eq!(parts[1].split, SplitTag::Val);
    assert_eq!(parts[2].split, SplitTag::Test);
    // Reconstruct multiset of rows and compare against the original.
    let mut seen: Vec<Vec<u64>> = Vec::new();
    for part in &parts {
        for row in part.inputs.rows() {
            seen.push(row.iter().map(|v| v.to_bits()).collect());
        }
    }
    let mut original: Vec<Vec<u64>> = data
        .inputs
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v.to_bits()).collect())
        .collect();
    seen.sort();
    original.sort();
    assert_eq!(seen, original);
}

fn image_batch(records: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<u8> {
    let mut rng = substream(seed, Stream::Data, &[3]);
    let mut raw = Vec::new();
    for _ in 0..records {
        raw.push(rng.random_range(0..4u8));
        for _ in 0..c * h * w {
            raw.push(rng.random_range(0..=255u8));
        }
    }
    raw
}

fn write_image_dir(dir: &std::path::Path, raw: &[u8], records: usize, c: usize, h: usize, w: usize) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("batch_0.bin"), raw).unwrap();
    let digest = super::image::hex(&sha2::Sha256::digest(raw));
    let manifest = format!(
        "classes = 4\nheight = {h}\nwidth = {w}\nchannels = {c}\nrecords = {records}\ndigest = \"{digest}\"\n"
    );
    fs::write(dir.join("manifest.toml"), manifest).unwrap();
}

#[test]
fn image_loader_reads_handcrafted_records() {
    let dir = tempfile::tempdir().unwrap();
    // Two records of a 1x2x2 image: label byte then 4 pixel bytes.
    let raw: Vec<u8> = vec![2, 0, 51, 102, 255, 3, 255, 204, 153, 0];
    write_image_dir(dir.path(), &raw, 2, 1, 2, 2);
    let data = load_image_batches(dir.path()).unwrap();
    assert_eq!(data.labels, vec![2, 3]);
    assert_abs_diff_eq!(data.inputs[[0, 0]], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(data.inputs[[0, 1]], 51.0 / 255.0, epsilon = 1e-12);
    assert_abs_diff_eq!(data.inputs[[1, 0]], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(data.inputs[[1, 3]], 0.0, epsilon = 1e-12);
}

#[test]
fn image_loader_rejects_truncated_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = image_batch(10, 1, 4, 4, 21);
    write_image_dir(dir.path(), &raw, 10, 1, 4, 4);
    raw.pop();
    fs::write(dir.path().join("batch_0.bin"), &raw).unwrap();
    assert!(matches!(
        load_image_batches(dir.path()),
        Err(MatError::CorruptData(_))
    ));
}

#[test]
fn image_loader_rejects_digest_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = image_batch(10, 1, 4, 4, 22);
    write_image_dir(dir.path(), &raw, 10, 1, 4, 4);
    raw[1] ^= 0xff;
    fs::write(dir.path().join("batch_0.bin"), &raw).unwrap();
    assert!(matches!(
        load_image_batches(dir.path()),
        Err(MatError::CorruptData(_))
    ));
}

#[test]
fn image_subset_mean_pixel_is_sane() {
    let dir = tempfile::tempdir().unwrap();
    let raw = image_batch(1000, 3, 4, 4, 23);
    write_image_dir(dir.path(), &raw, 1000, 3, 4, 4);
    let data = load_image_batches(dir.path()).unwrap();
    assert_eq!(data.len(), 1000);
    let mean = data.inputs.sum() / data.inputs.len() as f64;
    assert!((0.3..=0.6).contains(&mean), "mean pixel {mean}");
}

fn image_batch_f64(seed: u64) -> (ndarray::Array2<f64>, InputShape) {
    let shape = InputShape::image(1, 6, 6);
    let mut rng = substream(seed, Stream::Data, &[4]);
    let x = ndarray::Array2::from_shape_simple_fn((3, shape.dim()), || rng.random_range(0.0..1.0));
    (x, shape)
}

#[test]
fn augment_noop_settings_are_identity() {
    let (x, shape) = image_batch_f64(31);
    let mut rng = substream(31, Stream::Augment, &[0]);
    let out = augment(&x, shape, AugmentOps { flip_prob: 0.0, pad: 0 }, &mut rng).unwrap();
    assert_eq!(out, x);
}

#[test]
fn augment_flip_is_an_involution() {
    let (x, shape) = image_batch_f64(32);
    let ops = AugmentOps { flip_prob: 1.0, pad: 0 };
    let mut rng1 = substream(32, Stream::Augment, &[0]);
    let once = augment(&x, shape, ops, &mut rng1).unwrap();
    let mut rng2 = substream(32, Stream::Augment, &[0]);
    let twice = augment(&once, shape, ops, &mut rng2).unwrap();
    assert_eq!(twice, x);
}

#[test]
fn augment_constant_image_stays_constant() {
    let shape = InputShape::image(1, 6, 6);
    let x = ndarray::Array2::from_elem((2, shape.dim()), 0.42);
    let mut rng = substream(33, Stream::Augment, &[0]);
    let out = augment(&x, shape, AugmentOps::default(), &mut rng).unwrap();
    assert_eq!(out, x);
}

#[test]
fn augment_rejects_crop_on_flat_data() {
    let x = ndarray::Array2::zeros((2, 5));
    let mut rng = substream(34, Stream::Augment, &[0]);
    assert!(matches!(
        augment(&x, InputShape::flat(5), AugmentOps::default(), &mut rng),
        Err(MatError::Config(_))
    ));
}

#[test]
fn augment_stays_in_range_and_shape() {
    let (x, shape) = image_batch_f64(35);
    let mut rng = substream(35, Stream::Augment, &[0]);
    let out = augment(&x, shape, AugmentOps::default(), &mut rng).unwrap();
    assert_eq!(out.dim(), x.dim());
    assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn small_model(seed: u64) -> (Classifier, OptimState) {
    let mut rng = substream(seed, Stream::Init, &[0]);
    let model = Classifier::new("mlp:1x6", InputShape::flat(3), 2, &mut rng).unwrap();
    let optim = OptimState::new(0.05, 0.9, 1e-4)
        .unwrap()
        .with_milestones(vec![10], 0.1)
        .unwrap();
    (model, optim)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (mut model, mut optim) = small_model(41);
    // Take one step so momentum buffers exist.
    let grads: Vec<ArrayD<f64>> = model
        .param_arrays()
        .iter()
        .map(|p| ArrayD::from_elem(p.raw_dim(), 0.01))
        .collect();
    sgd_step(&mut model, &mut optim, &grads, 1).unwrap();

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &optim, 3, 77, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.epoch, 3);
    assert_eq!(loaded.seed, 77);
    let (restored, roptim, epoch) = loaded.restore().unwrap();
    assert_eq!(epoch, 3);
    assert_eq!(restored.param_arrays(), model.param_arrays());
    assert_eq!(roptim.velocity(), optim.velocity());

    // save -> load -> save is byte identical.
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&restored, &roptim, epoch, loaded.seed, &path2).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let (model, optim) = small_model(42);
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &optim, 1, 7, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(MatError::CorruptData(_))
    ));
}

#[test]
fn checkpoint_rejects_unknown_version() {
    let dir = tempfile::tempdir().unwrap();
    let (model, optim) = small_model(43);
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &optim, 1, 7, &path).unwrap();

    // Rewrite the header with a bumped version and a fresh digest.
    let bytes = fs::read(&path).unwrap();
    let body = &bytes[..bytes.len() - 32];
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&body[12..12 + header_len]).unwrap();
    header["version"] = serde_json::json!(99);
    let header_json = serde_json::to_vec(&header).unwrap();
    let mut rebuilt = Vec::new();
    rebuilt.extend_from_slice(&body[..8]);
    rebuilt.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    rebuilt.extend_from_slice(&header_json);
    rebuilt.extend_from_slice(&body[12 + header_len..]);
    let digest = sha2::Sha256::digest(&rebuilt);
    rebuilt.extend_from_slice(&digest);
    fs::write(&path, &rebuilt).unwrap();

    assert!(matches!(
        load_checkpoint(&path),
        Err(MatError::FormatVersion { found: 99, .. })
    ));
}
