use super::*;
use crate::geom::CenterBox;
use crate::match_loss::Predictions;

fn zero_input(cfg: &NetConfig, n: usize) -> Tensor<f32> {
    Tensor::zeros(&[n, 3, cfg.input_size, cfg.input_size])
}

fn head_shapes(model: &Model<f32>, input: &Tensor<f32>) -> Vec<(Vec<usize>, Vec<usize>, (usize, usize))> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let f = model.forward(&mut g, x).unwrap();
    f.heads
        .iter()
        .map(|h| (g.value(h.cls).shape().to_vec(), g.value(h.reg).shape().to_vec(), h.grid))
        .collect()
}

#[test]
fn uesegnet1_grids_at_320() {
    let cfg = NetConfig::uesegnet1_default();
    let model = Model::<f32>::zeroed(cfg.clone()).unwrap();
    let shapes = head_shapes(&model, &zero_input(&cfg, 1));
    assert_eq!(shapes[0].2, (40, 40));
    assert_eq!(shapes[1].2, (20, 20));
    for ((cls, reg, grid), anchors) in shapes.iter().zip(model.anchors()) {
        let k = 2;
        assert_eq!(cls, &vec![1, 2 * k, grid.0, grid.1]);
        assert_eq!(reg, &vec![1, 4 * k, grid.0, grid.1]);
        assert_eq!(anchors.len(), grid.0 * grid.1 * k);
    }
}

#[test]
fn zero_model_scores_one_half_and_detects_nothing() {
    let cfg = NetConfig {
        input_size: 64,
        widths: [2, 2, 4, 4, 4],
        reduce_width: 4,
        context_width: 2,
        ..NetConfig::uesegnet1_default()
    };
    let model = Model::<f32>::zeroed(cfg.clone()).unwrap();
    let input = zero_input(&cfg, 1);
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let f = model.forward(&mut g, x).unwrap();
    for level in &f.predictions(&g)[0] {
        assert!(level.logits.iter().all(|l| ear_probability(l) == 0.5));
    }
    assert!(model.infer(&input, 0.6, 0.7).unwrap()[0].is_empty());
}

#[test]
fn uesegnet1_param_count_closed_form() {
    let cfg = NetConfig::uesegnet1_default();
    let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let w = cfg.widths;
    let base = conv(3, w[0], 3)
        + conv(w[0], w[0], 3)
        + conv(w[0], w[1], 3)
        + conv(w[1], w[1], 3)
        + conv(w[1], w[2], 3)
        + 2 * conv(w[2], w[2], 3)
        + conv(w[2], w[3], 3)
        + 2 * conv(w[3], w[3], 3)
        + 3 * conv(w[3], w[4], 3);
    let (r, c) = (cfg.reduce_width, cfg.context_width);
    let ctx = |i: usize| 3 * conv(i, c, 3) + 3 * conv(c, c, 3);
    let heads = 2 * (conv(3 * c, 4, 1) + conv(3 * c, 8, 1));
    let m1 = conv(w[3], r, 1) + conv(w[4], r, 1) + conv(r, r, 3) + ctx(r);
    let m2 = ctx(w[4]);
    assert_eq!(model.param_count(), base + m1 + m2 + heads);
}

#[test]
fn ssd_stage_grids_and_channels() {
    let cfg = NetConfig::ssd_stage_default();
    assert_eq!(cfg.ssd_grids(), [10, 5, 3, 2, 1]);
    let model = Model::<f32>::zeroed(cfg.clone()).unwrap();
    let shapes = head_shapes(&model, &zero_input(&cfg, 2));
    let grids: Vec<usize> = shapes.iter().map(|s| s.2 .0).collect();
    assert_eq!(grids, vec![10, 5, 3, 2, 1]);
    for ((cls, reg, grid), anchors) in shapes.iter().zip(model.anchors()) {
        let k = cfg.levels()[0].anchors_per_cell();
        assert_eq!(cls, reg);
        assert_eq!(cls, &vec![2, k * (NUM_CLASSES + 4), grid.0, grid.1]);
        assert_eq!(anchors.len(), grid.0 * grid.1 * k);
    }
    let three = NetConfig {
        ssd_ratios: vec![1.0, 0.5, 2.0],
        ..cfg.clone()
    };
    let specs = layer_specs(&three);
    let head = specs.iter().find(|s| s.name == "set1.head").unwrap();
    // 2 scales x 3 ratios = 6 anchors, 6 x (2 + 4) channels
    assert_eq!(head.out_c, 36);
    let one_scale = NetConfig {
        ssd_ratios: vec![1.0],
        ..cfg
    };
    assert_eq!(one_scale.levels()[0].anchors_per_cell() * (NUM_CLASSES + 4), 12);
}

#[test]
fn ssd_anchor_sizes_span_min_to_max() {
    let cfg = NetConfig::ssd_stage_default();
    let levels = cfg.levels();
    assert!((levels[0].scales[0] - 16.0).abs() < 1e-9);
    assert!((levels[4].scales[0] - 144.0).abs() < 1e-9);
    for w in levels.windows(2) {
        assert!(w[1].scales[0] > w[0].scales[0]);
    }
}

#[test]
fn ssd_underflow_rejected() {
    let cfg = NetConfig {
        input_size: 128,
        ..NetConfig::ssd_stage_default()
    };
    assert!(Model::<f32>::zeroed(cfg).is_err());
    let odd = NetConfig {
        input_size: 100,
        ..NetConfig::uesegnet1_default()
    };
    assert!(odd.validate().is_err());
}

#[test]
fn forward_rejects_wrong_input_size() {
    let cfg = NetConfig::ssd_stage_default();
    let model = Model::<f32>::zeroed(cfg).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 64, 64]));
    assert!(model.forward(&mut g, x).is_err());
    assert!(model.infer(&Tensor::zeros(&[1, 3, 64, 64]), 0.5, 0.7).is_err());
}

fn tiny_ssd() -> Model<f32> {
    let cfg = NetConfig {
        input_size: 160,
        widths: [2, 2, 2, 4, 4],
        ssd_widths: [4, 4, 4, 4, 4],
        ..NetConfig::ssd_stage_default()
    };
    Model::new(cfg, 3).unwrap()
}

#[test]
fn confident_anchor_decodes_to_one_detection() {
    let model = tiny_ssd();
    let mut levels: Vec<Predictions> = model.anchors().iter().map(|a| Predictions::zeros(a.len())).collect();
    for l in &mut levels {
        l.logits.iter_mut().for_each(|z| *z = [5.0, -5.0]);
    }
    let anchor = model.anchors()[1][7].bbox;
    let offsets = [0.1, -0.2, 0.3, 0.05];
    levels[1].logits[7] = [-4.0, 4.0];
    levels[1].offsets[7] = offsets;
    let dets = model.decode_detections(&levels, 0.5, 0.7);
    assert_eq!(dets.len(), 1);
    let expected = geom::decode(&offsets, &anchor).unwrap().clamp(160.0, 160.0).unwrap();
    assert_eq!(dets[0].bbox, expected);
    assert!((dets[0].score - 1.0 / (1.0 + (-8f64).exp())).abs() < 1e-12);
    assert_eq!(dets[0].source_level, LevelId::ssd_set(1));
}

#[test]
fn adjacent_duplicates_collapse_under_nms() {
    let cfg = NetConfig::uesegnet1_default();
    let model = Model::<f32>::zeroed(cfg).unwrap();
    let mut levels: Vec<Predictions> = model.anchors().iter().map(|a| Predictions::zeros(a.len())).collect();
    for l in &mut levels {
        l.logits.iter_mut().for_each(|z| *z = [5.0, -5.0]);
    }
    // slot 1 (48px) at cells (10, 10) and (10, 11): 8px apart, IOU = 40/56 * ... > 0.7
    let k = 2;
    let a = (10 * 40 + 10) * k + 1;
    let b = (10 * 40 + 11) * k + 1;
    let (ba, bb) = (model.anchors()[0][a].bbox, model.anchors()[0][b].bbox);
    assert!(ba.iou(&bb) > 0.7);
    levels[0].logits[a] = [-3.0, 3.0];
    levels[0].logits[b] = [-2.0, 2.0];
    let dets = model.decode_detections(&levels, 0.5, 0.7);
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].bbox, ba);
}

#[test]
fn infer_is_invariant_to_batch_padding() {
    let model = tiny_ssd();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = vec![0f32; 2 * 3 * 160 * 160];
    data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let batch = Tensor::new(vec![2, 3, 160, 160], data.clone()).unwrap();
    let single = Tensor::new(vec![1, 3, 160, 160], data[3 * 160 * 160..].to_vec()).unwrap();
    let both = model.infer(&batch, 0.0, 0.7).unwrap();
    let alone = model.infer(&single, 0.0, 0.7).unwrap();
    assert!(!alone[0].is_empty());
    assert_eq!(both[1], alone[0]);
}

#[test]
fn serialization_round_trip() {
    let model = tiny_ssd();
    let mut buf = Vec::new();
    write_model(&model, &mut buf).unwrap();
    assert_eq!(&buf[..4], MAGIC);
    assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), FORMAT_VERSION);
    let back: Model<f32> = read_model(buf.as_slice()).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params(), model.params());

    let mut bad = buf.clone();
    bad[4] = 9;
    assert!(matches!(read_model::<f32, _>(bad.as_slice()), Err(Error::ModelFormat(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_model::<f32, _>(bad.as_slice()).is_err());
    assert!(read_model::<f32, _>(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn descriptor_table_layout() {
    let model = tiny_ssd();
    let mut buf = Vec::new();
    write_model(&model, &mut buf).unwrap();
    let cfg_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let mut p = 10 + cfg_len;
    let layers = u32::from_le_bytes(buf[p..p + 4].try_into().unwrap()) as usize;
    assert_eq!(layers, model.specs().len());
    p += 4;
    let first = &model.specs()[0];
    assert_eq!(buf[p], 1);
    assert_eq!(buf[p + 1], 4);
    let dims: Vec<u32> = (0..4)
        .map(|i| u32::from_le_bytes(buf[p + 2 + 4 * i..p + 6 + 4 * i].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![first.out_c as u32, 3, 3, 3]);
    let total_data = 4 * model.param_count();
    assert_eq!(buf.len() - total_data, p + layers * (1 + 2 + 16 + 4));
}

#[test]
fn images_become_replicated_channels() {
    let img = GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
    let t: Tensor<f32> = images_to_tensor(&[&img]).unwrap();
    assert_eq!(t.shape(), &[1, 3, 1, 2]);
    assert_eq!(t.data(), &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    let other = GrayImage::new(3, 1);
    assert!(images_to_tensor::<f32>(&[&img, &other]).is_err());
}

#[test]
fn anchors_center_inside_input() {
    for cfg in [NetConfig::uesegnet1_default(), NetConfig::ssd_stage_default()] {
        let model = Model::<f32>::zeroed(cfg.clone()).unwrap();
        let s = cfg.input_size as f64;
        for a in model.anchors().iter().flatten() {
            let c: CenterBox = a.bbox.to_center();
            assert!(c.cx > 0.0 && c.cx < s && c.cy > 0.0 && c.cy < s);
        }
    }
}
