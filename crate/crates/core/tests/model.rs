use unmix_core::infer::mask_codes;
use unmix_core::losses::{decoder_partitions, model_pathway_separation, AlphaScheme};
use unmix_core::model::{concat_encodings, Model, ModelConfig, ModelError};
use unmix_core::nn::{ConvLayer, Mode};
use unmix_core::optim::{Adam, AdamConfig};
use unmix_core::tensor::Tensor;

fn small(n: usize) -> ModelConfig {
    ModelConfig {
        num_encoders: n,
        input_size: [16, 16],
        encoder_channels: vec![4, 6],
        encoding_channels: 2,
        decoder_channels: vec![2 * n, 4 * n],
        ..Default::default()
    }
}

fn input(b: usize, salt: usize) -> Tensor<f64> {
    Tensor::from_vec([1, b, 16, 16], (0..b * 256).map(|i| ((i * 31 + salt * 17) % 97) as f64 / 96.0).collect())
}

#[test]
fn default_architecture_gives_a_4x4_code() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.encoding_size(), [4, 4]);
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(m.code_shape(), [48, 4, 4]);
    let x = Tensor::<f32>::zeros([1, 2, 64, 64]);
    let (codes, out) = m.forward(&x).unwrap();
    assert_eq!(codes.len(), 3);
    assert!(codes.iter().all(|z| z.shape() == [16, 2, 4, 4]));
    assert_eq!(out.shape(), [1, 2, 64, 64]);
}

#[test]
fn encodings_share_shape_and_batch() {
    let m = Model::<f64>::build(&small(3), 1).unwrap();
    let codes = m.encode_all(&input(5, 0)).unwrap();
    assert!(codes.iter().all(|z| z.shape() == [2, 5, 2, 2]));
}

#[test]
fn identical_encoder_parameters_give_identical_codes() {
    let mut m = Model::<f64>::build(&small(2), 2).unwrap();
    m.encoders[1] = m.encoders[0].clone();
    let codes = m.encode_all(&input(2, 1)).unwrap();
    assert_eq!(codes[0], codes[1]);
}

#[test]
fn concat_preserves_encoder_order() {
    let a = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]);
    let b = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]);
    assert_eq!(concat_encodings(&[a.clone(), b.clone()]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(concat_encodings(&[b, a.clone()]).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
    assert_eq!(concat_encodings(&[a.clone()]).unwrap(), a);
    let wide = Tensor::<f64>::zeros([16, 2, 4, 4]);
    assert_eq!(concat_encodings(&[wide.clone(), wide.clone(), wide]).unwrap().shape(), [48, 2, 4, 4]);
}

#[test]
fn concat_rejects_mismatched_codes() {
    let a = Tensor::<f64>::zeros([2, 1, 4, 4]);
    let b = Tensor::<f64>::zeros([2, 1, 2, 2]);
    assert!(concat_encodings(&[a, b]).is_err());
}

#[test]
fn decode_composes_with_encode() {
    let m = Model::<f64>::build(&small(3), 3).unwrap();
    let x = input(2, 2);
    let (codes, out) = m.forward(&x).unwrap();
    assert_eq!(m.decode(&concat_encodings(&codes).unwrap()).unwrap(), out);
    assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zero_decoder_outputs_one_half() {
    let mut m = Model::<f64>::build(&small(2), 4).unwrap();
    m.visit_mut(&mut |name, _, p| {
        if name.starts_with("decoder.") && (name.ends_with(".bias") || name.ends_with(".weight_g")) {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let out = m.decode(&Tensor::from_vec([4, 1, 2, 2], vec![0.7; 16])).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12), "{:?}", &out.data()[..4]);
}

#[test]
fn wrong_shapes_are_rejected() {
    let m = Model::<f64>::build(&small(2), 0).unwrap();
    assert!(matches!(m.encode_all(&Tensor::zeros([1, 1, 8, 8])), Err(ModelError::Shape { .. })));
    assert!(matches!(m.decode(&Tensor::zeros([3, 1, 4, 4])), Err(ModelError::Shape { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let odd = ModelConfig { decoder_channels: vec![5, 6], ..small(2) };
    assert!(matches!(Model::<f32>::build(&odd, 0), Err(ModelError::Config(_))));
    let size = ModelConfig { input_size: [20, 20], ..small(2) };
    assert!(Model::<f32>::build(&size, 0).is_err());
    let zero = ModelConfig { num_encoders: 0, ..small(2) };
    assert!(Model::<f32>::build(&zero, 0).is_err());
}

/// Zero every off-diagonal block of the decoder hidden weights.
fn make_block_diagonal(m: &mut Model<f64>) {
    let parts = decoder_partitions(m).unwrap();
    for ((param, ..), p) in m.decoder_hidden_weights_mut().into_iter().zip(parts) {
        for i in 0..p.n {
            for j in (0..p.n).filter(|&j| j != i) {
                for k in p.indices(i, j) {
                    param.value[k] = 0.0;
                }
            }
        }
    }
}

#[test]
fn group_norm_keeps_pathways_apart_before_the_output_layer() {
    let mut m = Model::<f64>::build(&small(3), 5).unwrap();
    make_block_diagonal(&mut m);
    assert_eq!(model_pathway_separation(&m, AlphaScheme::Uniform).unwrap(), 0.0);
    let codes = m.encode_all(&input(2, 3)).unwrap();
    let mut changed = codes.clone();
    changed[2] = codes[2].map(|v| 3.0 * v - 1.0);
    let hidden = |z: &[Tensor<f64>]| {
        let trace = m.decoder.trace(concat_encodings(z).unwrap(), Mode::Eval);
        let last = m.decoder.blocks.len() - 1;
        trace.acts[last].clone()
    };
    let (a, b) = (hidden(&codes), hidden(&changed));
    let c = a.channels();
    let per = c / 3;
    for ch in 0..c {
        let same = a.channel(ch) == b.channel(ch);
        assert_eq!(same, ch < 2 * per, "channel {ch}");
    }
}

#[test]
fn block_diagonal_decoder_adds_pathway_contributions_in_logit_space() {
    let mut m = Model::<f64>::build(&small(3), 6).unwrap();
    make_block_diagonal(&mut m);
    let codes = m.encode_all(&input(2, 4)).unwrap();
    let full = m.decode_logits(&concat_encodings(&codes).unwrap()).unwrap();
    let zero = m.decode_logits(&mask_codes(&codes, None).unwrap()).unwrap();
    let single: Vec<Tensor<f64>> = (0..3).map(|n| m.decode_logits(&mask_codes(&codes, Some(n)).unwrap()).unwrap()).collect();
    for i in 0..full.len() {
        let parts: f64 = single.iter().map(|s| s.data()[i] - zero.data()[i]).sum();
        assert!((full.data()[i] - zero.data()[i] - parts).abs() < 1e-10);
    }
}

fn output_layer_check(m: &Model<f64>) {
    let last = m.decoder.blocks.len() - 1;
    let ConvLayer::Up(out) = &m.decoder.blocks[last].conv else { panic!("output layer is transposed") };
    let gain = &out.gain.as_ref().expect("weight-normalized output").value;
    let eff = out.effective_weight().effective;
    let taps = out.geometry.taps();
    for co in 0..out.out_channels {
        let mut sq = 0.0;
        for ci in 0..out.in_channels {
            let base = (ci * out.out_channels + co) * taps;
            sq += eff[base..base + taps].iter().map(|v| v * v).sum::<f64>();
        }
        assert!((sq.sqrt() - gain[co].abs()).abs() < 1e-12);
    }
}

#[test]
fn weight_norm_holds_after_optimizer_steps() {
    let mut m = Model::<f64>::build(&small(2), 7).unwrap();
    output_layer_check(&m);
    let mut opt = Adam::new(AdamConfig::default());
    let x = input(3, 5);
    for _ in 0..3 {
        m.zero_grad();
        let pass = m.forward_pass(&x, Mode::Train).unwrap();
        let logits = pass.logits().clone();
        m.backward_pass(&pass, Some(logits.map(|v| v.sin())), None);
        opt.step(&mut m, 1e-2);
        output_layer_check(&m);
    }
}

#[test]
fn eval_mode_is_batch_independent() {
    let mut m = Model::<f64>::build(&small(2), 8).unwrap();
    for salt in 0..3 {
        m.forward_pass(&input(4, salt), Mode::Train).unwrap();
    }
    let x = input(4, 9);
    let (_, batched) = m.forward(&x).unwrap();
    for b in 0..4 {
        let (_, one) = m.forward(&x.batch_slice(b, 1)).unwrap();
        let want = batched.sample(b);
        assert!(one.data().iter().zip(&want).all(|(a, w)| (a - w).abs() < 1e-12));
    }
}

#[test]
fn cast_round_trip_preserves_outputs() {
    let m = Model::<f64>::build(&small(2), 9).unwrap();
    let back: Model<f64> = m.cast::<f32>().cast();
    let x = input(1, 6);
    let (_, a) = m.forward(&x).unwrap();
    let (_, b) = back.forward(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-5));
}

#[test]
fn one_dimensional_models_build() {
    let cfg = ModelConfig { input_size: [1, 64], ..small(2) };
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    let (codes, out) = m.forward(&Tensor::zeros([1, 2, 1, 64])).unwrap();
    assert_eq!(codes[0].shape(), [2, 2, 1, 8]);
    assert_eq!(out.shape(), [1, 2, 1, 64]);
}
