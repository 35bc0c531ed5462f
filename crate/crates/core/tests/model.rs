use candle_core::{DType, Device, Tensor};
use implant_locator::embedding::{EmbeddingProvider, StubEmbeddings};
use implant_locator::model::{Components, Decoder, ModelConfig, TextPlane, TripletNet};
use implant_locator::synthdata::{SliceTriplet, TargetParams};
use implant_locator::volume::Slice;

fn tiny(components: Components) -> ModelConfig {
    ModelConfig {
        input_height: 32,
        input_width: 32,
        encoder_widths: vec![4, 8, 8, 8],
        decoder_channels: 8,
        head_channels: 4,
        embed_dim: 16,
        components,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn random_input(b: usize) -> Tensor {
    Tensor::rand(0f32, 1.0, (b, 3, 32, 32), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.sub(b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
}

#[test]
fn shapes_follow_the_configuration() {
    let net = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let x = random_input(2);
    let (m1, m2, m3) = net.encode_triplet(&x).unwrap();
    assert_eq!(m1.dims(), &[2, 8, 4, 4]);
    assert_eq!(m2.dims(), m3.dims());
    let text = Tensor::zeros((2, 16), DType::F32, &Device::Cpu).unwrap();
    let out = net.forward(&x, &text).unwrap();
    assert_eq!(out.heatmap.dims(), &[2, 1, 8, 8]);
    assert_eq!(out.offsets.dims(), &[2, 2, 8, 8]);
    assert_eq!(out.pooled.dims(), &[2, 16]);
}

#[test]
fn decoder_upsamples_twice_per_stride_two_stage() {
    let d = Decoder::new(6, 5, [2, 2, 2], 0).unwrap();
    let x = Tensor::rand(0f32, 1.0, (1, 6, 8, 8), &Device::Cpu).unwrap();
    assert_eq!(d.forward(&x).unwrap().dims(), &[1, 5, 64, 64]);
}

#[test]
fn encoder_weights_are_shared() {
    let net = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let s = Tensor::rand(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap();
    let x = Tensor::cat(&[&s, &s, &s], 1).unwrap();
    let (m1, m2, m3) = net.encode_triplet(&x).unwrap();
    assert_eq!(max_abs_diff(&m1, &m2), 0.0);
    assert_eq!(max_abs_diff(&m3, &m2), 0.0);
    // One encoder: 4 stages of (3·3·cin·cout + cout).
    assert_eq!(net.encoder_param_count(), (9 * 4 + 4) + (9 * 4 * 8 + 8) + 2 * (9 * 8 * 8 + 8));
}

#[test]
fn swapping_outer_slices_swaps_their_features() {
    let net = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let x = random_input(1);
    let swapped = Tensor::cat(&[x.narrow(1, 2, 1).unwrap(), x.narrow(1, 1, 1).unwrap(), x.narrow(1, 0, 1).unwrap()], 1).unwrap();
    let (a1, _, a3) = net.encode_triplet(&x).unwrap();
    let (b1, _, b3) = net.encode_triplet(&swapped).unwrap();
    assert_eq!(max_abs_diff(&a1, &b3), 0.0);
    assert_eq!(max_abs_diff(&a3, &b1), 0.0);
}

#[test]
fn forward_is_deterministic_and_finite_on_zeros() {
    let a = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let b = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let text = Tensor::ones((1, 16), DType::F32, &Device::Cpu).unwrap();
    let oa = a.forward(&x, &text).unwrap();
    let ob = b.forward(&x, &text).unwrap();
    let va: Vec<f32> = oa.heatmap.flatten_all().unwrap().to_vec1().unwrap();
    let vb: Vec<f32> = ob.heatmap.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(va, vb);
    assert!(va.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    let again: Vec<f32> = a.forward(&x, &text).unwrap().heatmap.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(va, again);
}

#[test]
fn text_plane_adds_one_channel_and_depends_on_the_word() {
    let provider = StubEmbeddings::new(16, 3).unwrap();
    for mode in [TextPlane::Linear, TextPlane::Tile] {
        let net = TripletNet::new(ModelConfig {
            text_plane: mode,
            ..tiny(Components::ALL_ON)
        })
        .unwrap();
        let emb = |w: &str| Tensor::from_vec(provider.embed_text(w).unwrap(), (1, 16), &Device::Cpu).unwrap();
        let dec = Tensor::zeros((1, 8, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let cond = net.ctg_condition(&dec, &emb("left")).unwrap();
        assert_eq!(cond.dims(), &[1, 9, 8, 8]);
        let l1 = net.text_plane(&emb("left")).unwrap();
        let l2 = net.text_plane(&emb("left")).unwrap();
        let r = net.text_plane(&emb("right")).unwrap();
        assert_eq!(max_abs_diff(&l1, &l2), 0.0);
        assert!(max_abs_diff(&l1, &r) > 0.0);
    }
}

#[test]
fn pooling_constant_maps_is_size_independent() {
    let net = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let v = Tensor::rand(0f32, 1.0, (1, 16, 1, 1), &Device::Cpu).unwrap();
    let small = net.attention_pool(&v.broadcast_as((1, 16, 2, 2)).unwrap().contiguous().unwrap()).unwrap();
    let large = net.attention_pool(&v.broadcast_as((1, 16, 5, 7)).unwrap().contiguous().unwrap()).unwrap();
    assert_eq!(small.dims(), &[1, 16]);
    assert!(max_abs_diff(&small, &large) < 1e-5);
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    for comps in [Components::ALL_ON, Components { tvp: false, ctg: false, sal: false }] {
        let net = TripletNet::new(tiny(comps)).unwrap();
        let text = Tensor::rand(0f32, 1.0, (2, 16), &Device::Cpu).unwrap();
        let out = net.forward(&random_input(2), &text).unwrap();
        let obj = out
            .heatmap
            .sum_all()
            .unwrap()
            .add(&out.offsets.sum_all().unwrap())
            .unwrap()
            .add(&out.pooled.sum_all().unwrap())
            .unwrap();
        let grads = obj.backward().unwrap();
        for (name, var) in net.params().iter() {
            let g = grads.get(var).unwrap_or_else(|| panic!("{name} has no gradient"));
            let v: Vec<f32> = g.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()), "{name}");
            if name.starts_with("encoder.") {
                assert!(v.iter().any(|x| *x != 0.0), "{name} gradient is all zero");
            }
        }
    }
}

#[test]
fn ablated_fusion_reduces_concatenated_channels() {
    let net = TripletNet::new(tiny(Components { tvp: false, ..Components::ALL_ON })).unwrap();
    let (m1, m2, m3) = net.encode_triplet(&random_input(1)).unwrap();
    assert_eq!(net.fuse(&m1, &m2, &m3).unwrap().dims(), &[1, 16, 4, 4]);
    assert!(net.params().names().iter().any(|n| n == "fusion.reduce.weight"));
}

#[test]
fn unknown_condition_word_is_rejected() {
    let net = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let provider = StubEmbeddings::new(16, 3).unwrap();
    let s = Slice::zeros(32, 32);
    let t = SliceTriplet::new(
        [s.clone(), s.clone(), s],
        9,
        7,
        "p".into(),
        implant_locator::embedding::Condition::Left,
        vec![(10.0, 10.0)],
        vec![0.1],
        TargetParams::default(),
    )
    .unwrap();
    assert!(net.forward_one(&t, "upper", &provider).is_err());
    assert!(net.forward_one(&t, "right", &provider).is_ok());
}

#[test]
fn invalid_configurations_are_rejected() {
    let base = tiny(Components::ALL_ON);
    for bad in [
        ModelConfig { g: 2, ..base.clone() },
        ModelConfig { k: 0, ..base.clone() },
        ModelConfig { embed_dim: 0, ..base.clone() },
        ModelConfig { decoder_strides: [2, 2, 1], ..base.clone() },
        ModelConfig { input_height: 36, ..base.clone() },
    ] {
        assert!(TripletNet::new(bad).is_err());
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let net = TripletNet::new(tiny(Components::ALL_ON)).unwrap();
    let bytes = net.to_checkpoint_bytes().unwrap();
    let back = TripletNet::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.config(), net.config());
    let x = random_input(1);
    let text = Tensor::ones((1, 16), DType::F32, &Device::Cpu).unwrap();
    let a = net.forward(&x, &text).unwrap().heatmap;
    let b = back.forward(&x, &text).unwrap().heatmap;
    assert_eq!(max_abs_diff(&a, &b), 0.0);

    // Same tensors under a different config must not load.
    let other = TripletNet::new(ModelConfig {
        components: Components { tvp: false, ..Components::ALL_ON },
        ..tiny(Components::ALL_ON)
    })
    .unwrap();
    let mut mixed = other.to_checkpoint_bytes().unwrap();
    assert!(TripletNet::from_checkpoint_bytes(&mixed[..mixed.len() / 2]).is_err());
    mixed.truncate(8);
    assert!(TripletNet::from_checkpoint_bytes(&mixed).is_err());
    assert!(TripletNet::from_checkpoint_bytes(b"not a checkpoint").is_err());
}
