use plutonet::data::{
    self, apply_hflip, apply_rotation, augment, generate_synthetic, load_corpus, load_pairs, preprocess_images,
    sample_rng, split_corpus, AugmentationConfig, SplitSpec,
};

#[test]
fn synthetic_corpus_flows_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(30, 11, tmp.path(), 120).unwrap();
    assert_eq!(manifest.n, 30);
    let samples = load_corpus(tmp.path(), true).unwrap();
    assert_eq!(samples.len(), 30);
    let split = split_corpus(&samples, &SplitSpec::default()).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (24, 3, 3));

    let pairs = load_pairs(&split.val).unwrap();
    for p in &pairs {
        assert_eq!(p.image.len(), 3 * 224 * 224);
        let fg = p.mask.iter().sum::<f32>() / p.mask.len() as f32;
        assert!((0.005..=0.55).contains(&fg), "foreground fraction {fg}");
        // preprocessing its own output is a no-op
        let (img, mask) = p.to_images();
        assert_eq!(&preprocess_images(&p.id, img, mask).unwrap(), p);
    }

    let refs: Vec<_> = pairs.iter().collect();
    let (images, masks) = data::to_batch(&refs, candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
    assert_eq!(images.tensor().dims(), &[3, 3, 224, 224]);
    assert_eq!(masks.tensor().dims(), &[3, 1, 224, 224]);
}

#[test]
fn augmentation_keeps_image_and_mask_aligned() {
    let tmp = tempfile::tempdir().unwrap();
    generate_synthetic(2, 4, tmp.path(), 224).unwrap();
    let pairs = load_pairs(&load_corpus(tmp.path(), true).unwrap()).unwrap();
    let p = &pairs[0];
    // polyp pixels are brighter in green than tissue; the bright region must follow the mask
    let green_inside = |q: &data::Pair| {
        let plane = 224 * 224;
        let (mut inside, mut outside, mut ni, mut no) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..plane {
            if q.mask[i] == 1.0 {
                inside += q.image[plane + i];
                ni += 1.0;
            } else {
                outside += q.image[plane + i];
                no += 1.0;
            }
        }
        inside / ni - outside / no
    };
    let base = green_inside(p);
    assert!(base > 0.1);
    for q in [apply_hflip(p), apply_rotation(p, 25.0), apply_rotation(p, -30.0)] {
        assert!(green_inside(&q) > 0.8 * base);
    }
    let cfg = AugmentationConfig::default();
    for epoch in 0..4 {
        let q = augment(p, &cfg, &mut sample_rng(9, epoch, &p.id));
        assert!(green_inside(&q) > 0.8 * base);
    }
}

#[test]
fn repeated_generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_synthetic(3, 2, &a, 64).unwrap();
    generate_synthetic(3, 2, &b, 64).unwrap();
    for sub in ["images", "masks"] {
        for entry in std::fs::read_dir(a.join(sub)).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                std::fs::read(a.join(sub).join(&name)).unwrap(),
                std::fs::read(b.join(sub).join(&name)).unwrap()
            );
        }
    }
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
}
