mod common;

use common::{rng, uniform};
use kdseg::loss::FeatureMap;
use kdseg::models::{
    count_parameters, Decoder, DecoderSpec, Encoder, EncoderSpec, HasParams, PerceptualExtractor, PerceptualSpec,
    Prompt, PromptSet,
};
use kdseg::nn::Conv2d;
use kdseg::{Error, Tensor};

/// Weights plus bias of a `k×k` convolution.
fn conv(c_in: usize, c_out: usize, k: usize) -> u64 {
    (c_in * c_out * k * k + c_out) as u64
}

/// Bottleneck block with projection shortcut, all layers biased.
fn bottleneck(c_in: usize, width: usize, expansion: usize) -> u64 {
    let out = width * expansion;
    conv(c_in, width, 1) + conv(width, width, 3) + conv(width, out, 1) + conv(c_in, out, 1)
}

#[test]
fn single_pointwise_convolution_counts_sixteen() {
    assert_eq!(Conv2d::new("c", 3, 4, 1).param_count(), 16);
}

#[test]
fn toy_teacher_count_matches_layer_sum() {
    let enc = Encoder::<f32>::build(&EncoderSpec::toy_teacher(64, 16), 0).unwrap();
    let expect = conv(3, 16, 3) + conv(16, 32, 3) + conv(32, 16, 1);
    assert_eq!(expect, 5616);
    assert_eq!(count_parameters(&enc), expect);
}

#[test]
fn toy_student_count_matches_layer_sum() {
    let enc = Encoder::<f32>::build(&EncoderSpec::toy_student(64, 16), 0).unwrap();
    let expect = conv(3, 16, 3)            // stem
        + bottleneck(16, 8, 4)             // 16 → 32
        + bottleneck(32, 16, 4)            // 32 → 64
        + conv(64, 16, 1)                  // projection
        + 2 * conv(16, 16, 3); // refinement
    assert_eq!(count_parameters(&enc), expect);
}

#[test]
fn toy_decoder_count_matches_layer_sum() {
    let dec = Decoder::<f32>::build(&DecoderSpec::toy(64, 16), 0).unwrap();
    // 16 embedding channels + point and box maps
    let expect = conv(18, 32, 3) + conv(32, 32, 3) + conv(32, 16, 2) + conv(16, 1, 2);
    assert_eq!(count_parameters(&dec), expect);
}

#[test]
fn paper_student_is_about_26_4_million() {
    let enc = Encoder::<f32>::build(&EncoderSpec::paper_student(), 0).unwrap();
    let n = count_parameters(&enc) as f64;
    assert!((n / 26.4e6 - 1.0).abs() <= 0.05, "{n}");
}

#[test]
fn frozen_models_still_report_their_parameters() {
    let mut enc = Encoder::<f32>::build(&EncoderSpec::toy_teacher(32, 8), 0).unwrap();
    let before = count_parameters(&enc);
    enc.params_mut().freeze();
    assert_eq!(count_parameters(&enc), before);
    assert_eq!(enc.params().trainable_count(), 0);
}

#[test]
fn student_matches_teacher_shape_at_several_resolutions() {
    for size in [32, 48, 64] {
        let t = Encoder::<f64>::build(&EncoderSpec::toy_teacher(size, 8), 1).unwrap();
        let s = Encoder::<f64>::build(&EncoderSpec::toy_student(size, 8), 2).unwrap();
        let x = uniform(&mut rng(size as u64), &[2, 3, size, size], -1.0, 1.0);
        assert_eq!(t.forward(&x).unwrap().shape(), s.forward(&x).unwrap().shape());
    }
}

#[test]
fn encoder_rejects_wrong_input_size() {
    let s = Encoder::<f64>::build(&EncoderSpec::toy_student(32, 8), 2).unwrap();
    let x = Tensor::zeros(&[1, 3, 40, 32]);
    assert!(matches!(s.forward(&x), Err(Error::Shape(_))));
}

#[test]
fn external_weights_that_are_missing_are_an_error() {
    let mut spec = EncoderSpec::toy_student(32, 8);
    spec.weights = kdseg::models::WeightsSource::ExternalFile("/nonexistent/student.safetensors".into());
    assert!(Encoder::<f32>::build(&spec, 0).is_err());
    assert!(matches!(
        Encoder::<f32>::build(&EncoderSpec::paper_teacher(), 0),
        Err(Error::Weights(_))
    ));
}

#[test]
fn forwards_are_bit_reproducible() {
    let s = Encoder::<f32>::build(&EncoderSpec::toy_student(32, 8), 5).unwrap();
    let x: Tensor<f32> = uniform(&mut rng(9), &[2, 3, 32, 32], -1.0, 1.0).cast();
    let a = s.forward(&x).unwrap();
    let b = Encoder::<f32>::build(&EncoderSpec::toy_student(32, 8), 5)
        .unwrap()
        .forward(&x)
        .unwrap();
    assert_eq!(a.values().to_le_bytes(), b.values().to_le_bytes());

    let dec = Decoder::<f32>::build(&DecoderSpec::toy(32, 8), 3).unwrap();
    let p = vec![PromptSet::single(Prompt::Point { x: 10.5, y: 7.5 }); 2];
    let m1 = dec.forward(&a, &p).unwrap();
    let m2 = dec.forward(&a, &p).unwrap();
    assert_eq!(m1.values().to_le_bytes(), m2.values().to_le_bytes());
    assert!(m1.values().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn decoder_with_constant_weights_yields_closed_form_sigmoid() {
    // Zero every weight, then set biases so each stage emits a known constant:
    // mix1 → 1, mix2 → 0.5, up1 → 0.25 on 16 channels; up2 has every weight
    // 0.1 and bias −0.1, so each output logit is 16 · 0.25 · 0.1 − 0.1 = 0.3.
    let mut dec = Decoder::<f64>::build(&DecoderSpec::toy(32, 8), 0).unwrap();
    let names: Vec<String> = dec.params().names().map(str::to_string).collect();
    for n in &names {
        let shape = dec.params().get(n).unwrap().shape().to_vec();
        let v = match n.as_str() {
            "mix1.bias" => 1.0,
            "mix2.bias" => 0.5,
            "up1.bias" => 0.25,
            "up2.weight" => 0.1,
            "up2.bias" => -0.1,
            _ => 0.0,
        };
        dec.params_mut().set(n, Tensor::full(&shape, v)).unwrap();
    }
    let emb = FeatureMap::new(Tensor::full(&[1, 8, 8, 8], 0.7)).unwrap();
    let m = dec
        .forward(&emb, &[PromptSet::single(Prompt::Point { x: 3.5, y: 3.5 })])
        .unwrap();
    let expect = 1.0 / (1.0 + (-0.3f64).exp());
    for &v in m.values().data() {
        assert!((v - expect).abs() <= 1e-12, "{v} vs {expect}");
    }
}

#[test]
fn perceptual_taps_follow_layer_ids() {
    let ex = PerceptualExtractor::<f64>::build(&PerceptualSpec::toy(), 8, 1).unwrap();
    let x = uniform(&mut rng(3), &[1, 8, 8, 8], -1.0, 1.0);
    let f = ex.features(&x).unwrap();
    assert_eq!(f.len(), ex.layer_ids().len());
    // conv8 · relu · conv8 · relu · pool · conv16 · relu
    assert_eq!(f[0].shape(), &[1, 8, 8, 8]);
    assert_eq!(f[1].shape(), &[1, 8, 8, 8]);
    assert_eq!(f[2].shape(), &[1, 16, 4, 4]);
}
