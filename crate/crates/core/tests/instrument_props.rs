
use dsfpn::dataset::{read_pgm, synth_generate};
use dsfpn::instrument::{export_feature_maps, grad_probe, learning_curve, normalize_u8};
use dsfpn::params::Binder;
use dsfpn::training::{RoiSampling, TrainConfig};
use dsfpn::{pyramid, Graph, Model, ModelConfig};

const SAMPLING: RoiSampling = RoiSampling {
    roi_batch: 16,
    fg_fraction: 0.25,
};

#[test]
fn grad_probe_is_deterministic_and_read_only() {
    let data = synth_generate(10, 64, 3, 1).unwrap();
    let model = Model::new(
        ModelConfig {
            ds_enabled: true,
            ..ModelConfig::default()
        },
        2,
    )
    .unwrap();
    let before = model.params.checksum();
    let a = grad_probe(&model, &data, 3, 2, &SAMPLING, 5, "ds_on").unwrap();
    let b = grad_probe(&model, &data, 3, 2, &SAMPLING, 5, "ds_on").unwrap();
    assert_eq!(model.params.checksum(), before);
    assert_eq!(a, b);
    assert_eq!(a.batches, 3);
    assert!(a.layers.values().all(|&v| v >= 0.0));
    assert!(a.get("backbone.0.conv1").unwrap() > 0.0);
}

#[test]
fn frozen_layer_reports_zero() {
    let data = synth_generate(6, 64, 3, 1).unwrap();
    let mut model = Model::new(ModelConfig::default(), 2).unwrap();
    model.params.set_trainable("backbone.0.conv1", false);
    let r = grad_probe(&model, &data, 2, 2, &SAMPLING, 0, "frozen").unwrap();
    assert_eq!(r.get("backbone.0.conv1").unwrap_or(0.0), 0.0);
    assert!(r.get("backbone.0.conv2").unwrap() > 0.0);
}

#[test]
fn exported_maps_match_a_channel_sum_recomputation() {
    let data = synth_generate(1, 64, 3, 3).unwrap();
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let image = &data.samples[0].image;
    let dir = tempfile::tempdir().unwrap();
    let files = export_feature_maps(&model, image, &dir.path().join("img")).unwrap();
    let m = model.config.pyramid.num_levels();
    assert_eq!(files.len(), 2 * m);

    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let x = g.constant(image.clone().reshape(vec![1, 3, 64, 64]).unwrap());
    let pyr = pyramid::build_pyramid(&mut g, &mut b, x, &model.config.pyramid, false).unwrap();
    let maps: Vec<_> = pyr.bottom_up.iter().chain(&pyr.top_down).collect();
    for (path, &v) in files.iter().zip(maps) {
        let t = g.value(v);
        let s = t.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut sum = vec![0.0; h * w];
        for (p, acc) in sum.iter_mut().enumerate() {
            for ch in 0..c {
                *acc += t.data()[ch * h * w + p];
            }
        }
        let lo = sum.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want: Vec<u8> = sum.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect();
        let (pw, ph, pixels) = read_pgm(path).unwrap();
        assert_eq!((pw, ph), (w, h));
        assert_eq!(pixels, want, "{}", path.display());
    }
    // pure function of weights and image
    let again = export_feature_maps(&model, image, &dir.path().join("again")).unwrap();
    for (a, b) in files.iter().zip(&again) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

#[test]
fn zero_weights_export_black_images() {
    let data = synth_generate(1, 64, 3, 3).unwrap();
    let mut model = Model::new(ModelConfig::default(), 1).unwrap();
    for (_, p) in model.params.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let dir = tempfile::tempdir().unwrap();
    for f in export_feature_maps(&model, &data.samples[0].image, &dir.path().join("z")).unwrap() {
        assert!(read_pgm(&f).unwrap().2.iter().all(|&p| p == 0));
    }
    assert_eq!(normalize_u8(&[0.0; 4]), vec![0; 4]);
}

#[test]
fn learning_curve_grid() {
    let train_data = synth_generate(12, 64, 3, 1).unwrap();
    let val = synth_generate(4, 64, 3, 2).unwrap();
    let tc = TrainConfig {
        iterations: 6,
        lr_steps: vec![],
        ..TrainConfig::default()
    };
    let mut m = Model::new(ModelConfig::default(), 0).unwrap();
    let one = learning_curve(&mut m, &tc, &train_data, &val, 6, None).unwrap();
    assert_eq!(one.points.len(), 1);
    assert_eq!(one.points[0].iteration, 6);

    let mut a = Model::new(ModelConfig::default(), 0).unwrap();
    let mut b = Model::new(
        ModelConfig {
            ds_enabled: true,
            dc_enabled: true,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let ca = learning_curve(&mut a, &tc, &train_data, &val, 3, None).unwrap();
    let cb = learning_curve(&mut b, &tc, &train_data, &val, 3, None).unwrap();
    let grid = |c: &dsfpn::instrument::LearningCurve| c.points.iter().map(|p| p.iteration).collect::<Vec<_>>();
    assert_eq!(grid(&ca), vec![3, 6]);
    assert_eq!(grid(&ca), grid(&cb));
    assert!(learning_curve(&mut a, &tc, &train_data, &val, 4, None).is_err());
}
