use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacoxfer::gradcore::{grad_check_at, Bound, Tape, Tensor};
use tacoxfer::model::{init_params, ModelConfig, TacoModel, PHONEME_TABLE, SPEAKER_TABLE};

fn toy() -> ModelConfig {
    ModelConfig {
        phoneme_dim: 8,
        encoder_conv_layers: 1,
        encoder_channels: 8,
        encoder_hidden: 16,
        speaker_dim: 3,
        prenet_dims: vec![6],
        decoder_hidden: 8,
        attention_dim: 5,
        mel_channels: 8,
        postnet_layers: 2,
        postnet_channels: 4,
        phoneme_capacity: 12,
        speaker_capacity: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn end_to_end_loss_gradient_matches_finite_differences() {
    let cfg = toy();
    let params = init_params(&cfg, 11).unwrap().cast::<f64>();
    let model = TacoModel::new(cfg.clone()).unwrap();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // jitter everything so zero biases on a zero go-frame don't sit on a relu kink
    let inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|p| {
            let data = p.value.data().iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
            Tensor::new(p.value.shape().to_vec(), data).unwrap()
        })
        .collect();

    let target = Tensor::new(
        vec![5, cfg.mel_channels],
        (0..5 * cfg.mel_channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let phonemes = [2usize, 7, 3];

    // a handful of coordinates from every tensor, plus the rows in use
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len();
        for _ in 0..4 {
            coords.push((i, rng.random_range(0..n)));
        }
        if names[i] == PHONEME_TABLE {
            for &ph in &phonemes {
                coords.push((i, ph * cfg.phoneme_dim + 1));
            }
        }
        if names[i] == SPEAKER_TABLE {
            coords.push((i, cfg.speaker_dim + 2));
        }
    }

    let report = grad_check_at(&inputs, &coords, 1e-6, |_, vars| {
        let bound = Bound::from_vars(&names, vars.to_vec());
        let (terms, _) = model.utterance_loss(&bound, &phonemes, 1, &target, None)?;
        Ok(terms.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?} at {}", names[report.worst.unwrap().0]);
}

#[test]
fn unused_embedding_rows_receive_exactly_zero_gradient() {
    let cfg = toy();
    let params = init_params(&cfg, 12).unwrap();
    let model = TacoModel::new(cfg.clone()).unwrap();
    let target = Tensor::filled(&[6, cfg.mel_channels], 0.3f32);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (terms, _) = model.utterance_loss(&bound, &[1, 4, 1], 2, &target, None).unwrap();
    let grads = bound.gradients(&params, &tape.backward(terms.total).unwrap());

    let gp = grads.get(PHONEME_TABLE).unwrap();
    for r in 0..cfg.phoneme_capacity {
        let used = r == 1 || r == 4;
        let nz = gp.row_slice(r).iter().any(|&g| g != 0.0);
        assert_eq!(used, nz, "row {r}");
    }
    let gs = grads.get(SPEAKER_TABLE).unwrap();
    for r in 0..cfg.speaker_capacity {
        assert_eq!(r == 2, gs.row_slice(r).iter().any(|&g| g != 0.0), "speaker row {r}");
    }
}
