use earloc_core::cascade::{Cascade, CascadeConfig, Detector, ModelDetector};
use earloc_core::data::{generate, hflip, load_dataset, split, write_dataset, AnnotatedImage, AugmentPolicy, SceneSpec};
use earloc_core::eval::{curve, IouRule, ImageRecord};
use earloc_core::net::{load_model, save_model, Model, ModelKind};
use earloc_core::train::{train, RunConfig};

fn scenes(n: u64, size: u32) -> Vec<AnnotatedImage> {
    let spec = SceneSpec {
        width: size,
        height: size,
        ..Default::default()
    };
    (0..n).map(|i| generate(&spec, i).unwrap()).collect()
}

fn tiny(kind: ModelKind) -> RunConfig {
    let mut c = RunConfig::for_kind(kind);
    c.net.input_size = if kind == ModelKind::SsdStage { 144 } else { 64 };
    c.net.widths = [4, 4, 8, 8, 8];
    c.net.reduce_width = 4;
    c.net.context_width = 4;
    c.net.ssd_widths = [8, 8, 8, 8, 8];
    c.net.m1_scales = vec![12.0, 20.0];
    c.net.m2_scales = vec![24.0, 36.0];
    c.epochs = 1;
    c.batch_size = 4;
    c.augment = AugmentPolicy::none();
    c
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let samples = scenes(6, 96);
    let manifest = write_dataset(d.path(), "all.csv", &samples).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.len(), 6);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.mask, b.mask);
    }
    let (train_half, test_half) = split(&back, 0.5, 42).unwrap();
    assert_eq!(train_half.len() + test_half.len(), 6);
    assert!(train_half.iter().all(|s| !test_half.iter().any(|t| t.source_id == s.source_id)));
}

#[test]
fn saved_model_detects_identically() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::UesegNet1);
    let data = scenes(8, 96);
    let mut m = Model::<f32>::new(cfg.net.clone(), 3).unwrap();
    train(&cfg, &mut m, &data, |_, _| Ok(())).unwrap();
    let path = d.path().join("m.uesg");
    save_model(&m, &path).unwrap();
    let (a, b) = (ModelDetector::new(m, 0.0, 0.7), ModelDetector::new(load_model(&path).unwrap(), 0.0, 0.7));
    for s in &data {
        assert_eq!(a.detect(&s.image).unwrap(), b.detect(&s.image).unwrap());
    }
}

#[test]
fn cascade_output_lies_inside_the_image() {
    let data = scenes(4, 200);
    let s1 = ModelDetector::new(Model::new(tiny(ModelKind::SsdStage).net, 1).unwrap(), 0.0, 0.7);
    let s2 = ModelDetector::new(Model::new(tiny(ModelKind::SsdStage).net, 2).unwrap(), 0.0, 0.7);
    let c = Cascade::new(s1, s2, CascadeConfig::default()).unwrap();
    let recs: Vec<ImageRecord> = data
        .iter()
        .map(|s| {
            let dets = c.detect(&s.image).unwrap();
            for d in &dets {
                let b = d.bbox;
                assert!(b.x_min >= -1e-9 && b.y_min >= -1e-9 && b.x_max <= 200.0 + 1e-9 && b.y_max <= 200.0 + 1e-9);
                assert!((0.0..=1.0).contains(&d.score));
            }
            ImageRecord::new(&s.source_id, s.gt, &dets)
        })
        .collect();
    let c = curve(&recs, &[0.1, 0.5, 0.9], IouRule::Strict).unwrap();
    assert_eq!(c.rows.len(), 3);
}

#[test]
fn flipped_sample_keeps_its_box_size() {
    for s in scenes(10, 128) {
        let f = hflip(&s);
        assert_eq!(f.gt.width(), s.gt.width());
        assert_eq!(f.gt.height(), s.gt.height());
        assert_eq!(f.gt.x_min, 128.0 - s.gt.x_max);
    }
}
