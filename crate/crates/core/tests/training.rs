use unetmer::backbone::{BackboneConfig, Variant};
use unetmer::bottleneck::TransformerConfig;
use unetmer::dataset::{Sample, SyntheticSpec};
use unetmer::model::{UNetmer, UNetmerConfig};
use unetmer::nn::{Graph, ParamKind};
use unetmer::patchify::Scale;
use unetmer::training::{train, train_with, TrainConfig};
use unetmer::{Error, Tensor};

fn scales(v: &[usize]) -> Vec<Scale> {
    v.iter().map(|&s| Scale::new(s).unwrap()).collect()
}

fn tiny(variant: Variant) -> UNetmerConfig {
    UNetmerConfig {
        backbone: BackboneConfig { variant, base_channels: 2, n_pool: 2, ..Default::default() },
        transformer: TransformerConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2.0 },
        scales: scales(&[1, 2, 4]),
        input_size: (64, 64),
        use_transformer: true,
    }
}

fn samples(n: usize) -> Vec<Sample<f32>> {
    SyntheticSpec::default().generate(3, n).unwrap()
}

fn quick(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size, lr0: 1e-3, scales: scales(&[1, 2]), ..TrainConfig::default() }
}

#[test]
fn one_epoch_takes_ceil_n_over_b_steps() {
    let data = samples(4);
    let mut model = UNetmer::<f32>::new(tiny(Variant::Unet), 0).unwrap();
    let history = train(&mut model, &data, &data[..1], &quick(1, 2)).unwrap();
    assert_eq!(history.records.len(), 1);
    assert_eq!(history.total_steps(), 2);
    assert_eq!(history.records[0].scale_steps, vec![1, 1]);
    assert!(history.records[0].val_dice_s1.is_some());
    let mut model = UNetmer::<f32>::new(tiny(Variant::Unet), 0).unwrap();
    let history = train(&mut model, &data[..3], &[], &quick(1, 2)).unwrap();
    assert_eq!(history.total_steps(), 2);
    assert!(history.records[0].val_dice_s1.is_none());
    assert!(history.to_text().lines().nth(1).unwrap().ends_with(" -"));
}

#[test]
fn same_seed_same_weights() {
    let data = samples(4);
    let run = || {
        let mut model = UNetmer::<f32>::new(tiny(Variant::AttentionUnet), 11).unwrap();
        let history = train(&mut model, &data, &[], &quick(2, 2)).unwrap();
        (model, history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    for id in a.params().ids() {
        assert_eq!(a.params().get(id), b.params().get(id), "{}", a.params().path(id));
    }
}

#[test]
fn training_changes_every_trainable_and_buffer() {
    let data = samples(2);
    for variant in Variant::ALL {
        let mut model = UNetmer::<f32>::new(tiny(variant), 1).unwrap();
        let before = model.params().clone();
        train(&mut model, &data, &[], &quick(1, 2)).unwrap();
        for id in before.ids() {
            assert_ne!(before.get(id), model.params().get(id), "{variant}: {} unchanged", before.path(id));
        }
    }
}

#[test]
fn gradient_reaches_every_trainable_parameter() {
    let data = samples(2);
    for variant in Variant::ALL {
        let model = UNetmer::<f32>::new(tiny(variant), 2).unwrap();
        for s in scales(&[1, 2, 4]) {
            let x = Tensor::stack(&[data[0].image.clone(), data[1].image.clone()]).unwrap();
            let labels: Vec<u8> = data.iter().flat_map(|d| d.mask.data().to_vec()).collect();
            let mut g = Graph::new(model.params(), true);
            let xv = g.input(x);
            let logits = model.forward_graph(&mut g, xv, s).unwrap();
            let l = g.cross_entropy(logits, &labels).unwrap();
            let grads = g.backward(l);
            for id in model.params().trainable_ids() {
                let grad = grads.param(id);
                let norm: f64 = grad.map_or(0.0, |t| t.data().iter().map(|v| (*v as f64).abs()).sum());
                assert!(norm > 0.0, "{variant} s={s}: no gradient for {}", model.params().path(id));
            }
            let positions = model.params().ids().filter(|&id| model.params().path(id).ends_with("position"));
            assert_eq!(positions.count(), 1);
            assert!(model.params().ids().any(|id| model.params().kind(id) == ParamKind::Buffer));
        }
    }
}

#[test]
fn hook_sees_each_epoch_and_can_abort() {
    let data = samples(2);
    let mut model = UNetmer::<f32>::new(tiny(Variant::Unet), 0).unwrap();
    let mut seen = Vec::new();
    let history = train_with(&mut model, &data, &data, &quick(3, 2), |ev| {
        seen.push((ev.record.epoch, ev.is_best));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0].1);
    assert_eq!(history.records.len(), 3);
    let err = train_with(&mut model, &data, &[], &quick(3, 2), |_| Err(Error::Validation("stop".into()))).unwrap_err();
    assert!(err.to_string().contains("stop"));
}

#[test]
fn rejects_invalid_inputs() {
    let data = samples(2);
    let mut model = UNetmer::<f32>::new(tiny(Variant::Unet), 0).unwrap();
    assert!(train(&mut model, &[], &[], &quick(1, 2)).is_err());
    let mut bad = quick(1, 2);
    bad.batch_size = 0;
    assert!(train(&mut model, &data, &[], &bad).is_err());
    let mut small = data[0].clone();
    small.image = unetmer::dataset::resize_bilinear(&small.image, (32, 32));
    small.mask = unetmer::LabelMap::new(&[32, 32], vec![0; 1024]).unwrap();
    assert!(train(&mut model, &[small], &[], &quick(1, 2)).is_err());
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = samples(2);
    let mut model = UNetmer::<f32>::new(tiny(Variant::Unet), 0).unwrap();
    let mut cfg = quick(20, 2);
    cfg.lr0 = 1e30;
    match train(&mut model, &data, &[], &cfg) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
