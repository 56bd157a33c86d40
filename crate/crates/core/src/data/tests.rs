use super::*;
use proptest::prelude::*;

fn idx_images(n: usize, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    b.extend((n as u32).to_be_bytes());
    b.extend(rows.to_be_bytes());
    b.extend(cols.to_be_bytes());
    b.extend((0..n * (rows * cols) as usize).map(fill));
    b
}

#[test]
fn idx_parsing() {
    let bytes = idx_images(10, 28, 28, |i| (i % 256) as u8);
    let (n, px) = parse_idx_images(&bytes).unwrap();
    assert_eq!(n, 10);
    assert_eq!(px.len(), 10 * 784);
    assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(px[255], 1.0);
    assert_eq!(px[0], 0.0);
}

#[test]
fn idx_errors_are_distinct() {
    let mut bad = idx_images(1, 28, 28, |_| 0);
    bad[3] = 0x01;
    assert!(matches!(parse_idx_images(&bad), Err(DataError::BadMagic { found: 0x801, .. })));
    let full = idx_images(2, 28, 28, |_| 0);
    assert!(matches!(
        parse_idx_images(&full[..full.len() - 1]),
        Err(DataError::Truncated { .. })
    ));
    assert!(matches!(parse_idx_images(&full[..6]), Err(DataError::Truncated { .. })));
    assert!(matches!(
        parse_idx_images(&idx_images(1, 32, 28, |_| 0)),
        Err(DataError::DimMismatch { .. })
    ));
    let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    labels.extend(3u32.to_be_bytes());
    labels.extend([1, 2, 3]);
    assert_eq!(parse_idx_labels(&labels).unwrap(), vec![1, 2, 3]);
    assert!(matches!(parse_idx_labels(&full), Err(DataError::BadMagic { .. })));
}

#[test]
fn idx_files_plain_and_gzip() {
    use flate2::write::GzEncoder;
    let dir = tempfile::tempdir().unwrap();
    let bytes = idx_images(3, 28, 28, |i| (i * 7 % 256) as u8);
    let plain = dir.path().join("imgs");
    fs::write(&plain, &bytes).unwrap();
    let gz = dir.path().join("imgs.gz");
    let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
    enc.write_all(&bytes).unwrap();
    fs::write(&gz, enc.finish().unwrap()).unwrap();
    let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    labels.extend(3u32.to_be_bytes());
    labels.extend([7, 8, 9]);
    let lpath = dir.path().join("labels");
    fs::write(&lpath, &labels).unwrap();

    let a = load_mnist_idx(&plain, Some(&lpath)).unwrap();
    let b = load_mnist_idx(&gz, None).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a.clean().unwrap(), b.clean().unwrap());
    assert_eq!(a.labels().unwrap(), &[7, 8, 9]);
    assert!(matches!(
        load_mnist_idx(&dir.path().join("missing"), None),
        Err(DataError::Io { .. })
    ));
}

#[test]
fn bundled_mnist_subset_loads() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let ds = load_mnist_idx(
        &root.join("mnist5k-images-idx3-ubyte.gz"),
        Some(&root.join("mnist5k-labels-idx1-ubyte.gz")),
    )
    .unwrap();
    assert_eq!(ds.len(), 5000);
    assert_eq!(ds.shape(), ImageShape::gray(28, 28));
}

#[test]
fn synthetic_families() {
    let mut rng = NoiseRng::new(1, Stream::Synthetic);
    let checker = generate_synthetic(3, (64, 64), SyntheticKind::Checker, &mut rng).unwrap();
    assert!(checker.clean().unwrap().iter().all(|&v| v == 0.2 || v == 0.8));
    let a = generate_synthetic(4, (40, 40), SyntheticKind::Strokes, &mut NoiseRng::new(9, Stream::Synthetic)).unwrap();
    let b = generate_synthetic(4, (40, 40), SyntheticKind::Strokes, &mut NoiseRng::new(9, Stream::Synthetic)).unwrap();
    assert_eq!(a, b);
    for i in 0..a.len() {
        let img = a.clean_image(i).unwrap();
        let d = img.data();
        let energy: f64 = (0..40)
            .flat_map(|r| (0..39).map(move |c| (r, c)))
            .map(|(r, c)| (d[r * 40 + c + 1] - d[r * 40 + c]).powi(2))
            .sum();
        assert!(energy > 0.0);
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let g = generate_synthetic(2, (32, 32), SyntheticKind::Gradients, &mut rng).unwrap();
    assert!(g.clean().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn patches_crop_clean_and_noisy_together() {
    let mut rng = NoiseRng::new(2, Stream::Synthetic);
    let ds = generate_synthetic(5, (32, 24), SyntheticKind::Gradients, &mut rng)
        .unwrap()
        .corrupt(&NoiseSpec::GaussianRange { lo: 0.0, hi: 0.2 }, 3, 0)
        .unwrap();
    let full = extract_patches(&ds, (32, 24), 4, &mut NoiseRng::new(4, Stream::Patches)).unwrap();
    for i in 0..full.len() {
        let img = full.clean_image(i).unwrap();
        let src = (0..ds.len()).find(|&j| ds.clean_image(j).unwrap().data() == img.data());
        let j = src.expect("full-size crop is a whole image");
        assert_eq!(full.noisy_image(i).unwrap().data(), ds.noisy_image(j).unwrap().data());
        assert_eq!(full.sigma().unwrap()[i], ds.sigma().unwrap()[j]);
    }
    let p = extract_patches(&ds, (8, 8), 50, &mut NoiseRng::new(5, Stream::Patches)).unwrap();
    assert_eq!(p.len(), 50);
    assert_eq!(p.shape(), ImageShape::gray(8, 8));
    // Noise residual of every crop equals clean minus noisy of the same crop.
    let diff: Vec<f64> = p.noisy().unwrap().iter().zip(p.clean().unwrap()).map(|(a, b)| a - b).collect();
    assert!(diff.iter().any(|v| *v != 0.0));
    assert!(matches!(
        extract_patches(&ds, (33, 8), 1, &mut NoiseRng::new(5, Stream::Patches)),
        Err(DataError::PatchTooLarge { .. })
    ));
}

#[test]
fn patch_count_at_reduced_scale() {
    let mut rng = NoiseRng::new(6, Stream::Synthetic);
    let ds = generate_synthetic(40, (48, 48), SyntheticKind::Strokes, &mut rng).unwrap();
    let count = 1772 * 128 / 10 / 10;
    let p = extract_patches(&ds, (40, 40), count, &mut NoiseRng::new(7, Stream::Patches)).unwrap();
    assert_eq!(p.len(), count);
    assert_eq!(p.clean().unwrap().len(), count * 1600);
}

#[test]
fn batches_cover_each_index_once() {
    let a = epoch_batches(23, 5, 1, 0).unwrap();
    let b = epoch_batches(23, 5, 1, 1).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a.last().unwrap().len(), 3);
    let mut all: Vec<usize> = a.concat();
    all.sort();
    assert_eq!(all, (0..23).collect::<Vec<_>>());
    assert_ne!(a, b);
    assert_eq!(a, epoch_batches(23, 5, 1, 0).unwrap());
    assert!(epoch_batches(3, 4, 1, 0).is_err());
    assert!(epoch_batches(3, 0, 1, 0).is_err());
}

#[test]
fn ground_truth_free_dataset() {
    let mut rng = NoiseRng::new(1, Stream::Synthetic);
    let ds = generate_synthetic(4, (8, 8), SyntheticKind::Checker, &mut rng)
        .unwrap()
        .corrupt(&NoiseSpec::Gaussian { sigma: 0.1 }, 1, 0)
        .unwrap();
    let blind = ds.without_clean();
    assert!(matches!(blind.clean(), Err(DataError::NoGroundTruth(_))));
    let batch = blind.batch(&[0, 2], 0, 0).unwrap();
    assert!(batch.x.is_none());
    assert_eq!(batch.y.shape(), &[2, 1, 8, 8]);
    assert_eq!(batch.sigma, vec![0.1, 0.1]);
    assert!(matches!(blind.corrupt(&NoiseSpec::Gaussian { sigma: 0.1 }, 1, 0), Err(DataError::NoGroundTruth(_))));
}

#[test]
fn corruption_is_regenerable_per_round() {
    let mut rng = NoiseRng::new(1, Stream::Synthetic);
    let ds = generate_synthetic(6, (8, 8), SyntheticKind::Gradients, &mut rng).unwrap();
    let spec = NoiseSpec::Gaussian { sigma: 0.1 };
    assert_eq!(ds.corrupt(&spec, 3, 0).unwrap(), ds.corrupt(&spec, 3, 0).unwrap());
    assert_ne!(ds.corrupt(&spec, 3, 0).unwrap().noisy().unwrap(), ds.corrupt(&spec, 3, 1).unwrap().noisy().unwrap());
    // Subsets see the same noise only when corrupted before subsetting.
    let sub = ds.corrupt(&spec, 3, 0).unwrap().subset(&[4, 1]);
    assert_eq!(sub.noisy_image(0).unwrap().data(), ds.corrupt(&spec, 3, 0).unwrap().noisy_image(4).unwrap().data());
    let poisson = ds.corrupt(&NoiseSpec::Poisson { zeta: 0.1 }, 3, 0).unwrap();
    assert!(poisson.sigma().is_none());
    let negative = Dataset::from_clean("neg", ImageShape::gray(1, 2), vec![0.5, -0.1]).unwrap();
    assert!(matches!(
        negative.corrupt(&NoiseSpec::Poisson { zeta: 0.1 }, 0, 0),
        Err(DataError::Noise(NoiseError::NegativePixel { index: 1, .. }))
    ));
}

#[test]
fn psnr_examples() {
    let a = Tensor::zeros(&[1, 10, 10]);
    let b = Tensor::full(&[1, 10, 10], 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let c = Tensor::full(&[1, 10, 10], 1e-3f64.sqrt());
    assert!((psnr(&a, &c, 1.0).unwrap() - 30.0).abs() < 1e-9);
    assert!(psnr(&a, &Tensor::zeros(&[1, 5, 5]), 1.0).is_err());
    let batch_a = Tensor::new([a.data(), a.data()].concat(), &[2, 1, 10, 10]).unwrap();
    let batch_b = Tensor::new([b.data(), c.data()].concat(), &[2, 1, 10, 10]).unwrap();
    assert!((mean_psnr(&batch_a, &batch_b, 1.0).unwrap() - 25.0).abs() < 1e-9);
}

#[test]
fn pgm_examples() {
    let mut bytes = b"P5\n28 28\n255\n".to_vec();
    bytes.extend((0..784).map(|i| (i % 256) as u8));
    let img = decode_pgm(&bytes).unwrap();
    assert_eq!(img.shape(), &[1, 28, 28]);
    assert_eq!(encode_pgm(&img).unwrap(), bytes);
    assert_eq!(quantize(0.5), 128);
    assert_eq!(quantize(-3.0), 0);
    assert_eq!(quantize(2.0), 255);
    let commented = b"P5 # comment\n2 1\n255\n\x00\xff".to_vec();
    assert_eq!(decode_pgm(&commented).unwrap().data(), &[0.0, 1.0]);
    assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(DataError::BadHeader(_))));
    assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n00"), Err(DataError::UnsupportedMaxval(65535))));
    assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00"), Err(DataError::Truncated { .. })));
    assert!(matches!(decode_pgm(b"P5\n2"), Err(DataError::BadHeader(_))));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = NoiseRng::new(1, Stream::Synthetic);
    let ds = generate_synthetic(3, (6, 5), SyntheticKind::Checker, &mut rng)
        .unwrap()
        .corrupt(&NoiseSpec::GaussianRange { lo: 0.0, hi: 55.0 / 255.0 }, 2, 0)
        .unwrap();
    let mut entries = Vec::new();
    for i in 0..3 {
        let noisy = format!("noisy_{i}.pgm");
        let clean = format!("clean_{i}.pgm");
        write_pgm(&dir.path().join(&noisy), &ds.noisy_image(i).unwrap()).unwrap();
        write_pgm(&dir.path().join(&clean), &ds.clean_image(i).unwrap()).unwrap();
        entries.push(ManifestEntry {
            noisy,
            clean: Some(clean),
            sigma: Some(ds.sigma().unwrap()[i]),
            zeta: None,
        });
    }
    let m = Manifest {
        seed: 2,
        noise: NoiseSpec::GaussianRange { lo: 0.0, hi: 55.0 / 255.0 },
        source: "checker".into(),
        entries,
    };
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back, m);
    let with = back.load_dataset(dir.path(), true).unwrap();
    let without = back.load_dataset(dir.path(), false).unwrap();
    assert!(with.has_clean() && !without.has_clean());
    assert_eq!(with.noisy().unwrap(), without.noisy().unwrap());
    assert_eq!(with.sigma(), ds.sigma());
    let q: Vec<f64> = ds.noisy().unwrap().iter().map(|&v| quantize(v) as f64 / 255.0).collect();
    assert_eq!(with.noisy().unwrap(), q.as_slice());
    assert!(serde_json::from_str::<Manifest>(r#"{"seed":1,"noise":{"kind":"poisson","zeta":0.1},"source":"x","entries":[],"extra":1}"#).is_err());
}

proptest! {
    #[test]
    fn pgm_round_trip_is_quantization(vals in prop::collection::vec(-0.5f64..1.5, 12)) {
        let img = Tensor::new(vals.clone(), &[1, 3, 4]).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        let q: Vec<f64> = vals.iter().map(|&v| quantize(v) as f64 / 255.0).collect();
        prop_assert_eq!(back.data(), q.as_slice());
        // A second trip is the identity.
        let again = decode_pgm(&encode_pgm(&back).unwrap()).unwrap();
        prop_assert_eq!(again.data(), back.data());
    }

    #[test]
    fn psnr_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16)) {
        let ta = Tensor::new(a, &[1, 4, 4]).unwrap();
        let tb = Tensor::new(b, &[1, 4, 4]).unwrap();
        prop_assert_eq!(psnr(&ta, &tb, 1.0).unwrap(), psnr(&tb, &ta, 1.0).unwrap());
    }

    #[test]
    fn epoch_coverage(len in 1usize..60, m in 1usize..60, seed in 0u64..1000, epoch in 0usize..50) {
        prop_assume!(m <= len);
        let mut all = epoch_batches(len, m, seed, epoch).unwrap().concat();
        all.sort();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }
}
