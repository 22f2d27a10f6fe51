use otter_core::evalgen::{perplexity, sequence_nll};
use otter_core::model::{ModelConfig, OtterModel, EMBED_INIT_STD, TRAINABLE_PREFIXES};
use otter_core::seqformat::tokenizer::{PAD, VOCAB_SIZE};
use otter_core::seqformat::{collate, collate_tight, SuperviseMode, TokenizedSample};
use otter_core::tensor::{Graph, Scalar};
use otter_core::verify::{gate_zero_identity, toy_samples};

fn tiny(seed: u64) -> (OtterModel<f64>, Vec<TokenizedSample>) {
    let cfg = ModelConfig::tiny();
    let model = OtterModel::<f64>::new(cfg.clone(), seed).unwrap();
    (model, toy_samples(&cfg, 6, 1).unwrap())
}

fn open_gates(model: &mut OtterModel<f64>, v: f64) {
    for id in model.gate_ids() {
        model.params_mut().get_mut(id).tensor.data_mut()[0] = v;
    }
}

fn loss<T: Scalar>(model: &OtterModel<T>, batch: &otter_core::seqformat::Batch) -> f64 {
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, batch).unwrap();
    g.data(l)[0].as_f64()
}

#[test]
fn padded_batch_loss_is_the_token_weighted_mean_of_samples() {
    let (mut model, data) = tiny(3);
    open_gates(&mut model, 0.7);
    let refs: Vec<&TokenizedSample> = data.iter().collect();
    let tight = collate_tight(&refs).unwrap();
    let padded = collate(&refs, tight.max_len() + 9, PAD).unwrap();
    let (mut nll, mut n) = (0.0, 0);
    for s in &data {
        let (a, b) = sequence_nll(&model, s, &s.supervision_mask).unwrap();
        nll += a;
        n += b;
    }
    let want = nll / n as f64;
    assert!((loss(&model, &tight) - want).abs() < 1e-10);
    assert!((loss(&model, &padded) - want).abs() < 1e-10);
}

#[test]
fn uniform_logits_give_perplexity_equal_to_vocab() {
    let (mut model, data) = tiny(0);
    for name in ["out_proj.weight", "out_proj.bias"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().get_mut(id).tensor.data_mut().fill(0.0);
    }
    for mode in [SuperviseMode::QueryOnly, SuperviseMode::AllAnswers] {
        let ppl = perplexity(&model, &data, mode).unwrap();
        assert!((ppl - VOCAB_SIZE as f64).abs() < 1e-9, "{ppl}");
    }
}

#[test]
fn perplexity_matches_manual_softmax() {
    let (model, data) = tiny(1);
    let s = &data[0];
    let logits = model.logits(&s.ids, Some((&s.media, &s.media_locations))).unwrap();
    let v = model.config().vocab_size;
    let (mut nll, mut n) = (0.0, 0.0);
    for t in 0..s.len() - 1 {
        if !s.supervision_mask[t + 1] {
            continue;
        }
        let row = &logits.data()[t * v..(t + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        nll -= (row[s.ids[t + 1] as usize].exp() / z).ln();
        n += 1.0;
    }
    let ppl = perplexity(&model, &data[..1], SuperviseMode::QueryOnly).unwrap();
    assert!((ppl - (nll / n).exp()).abs() < 1e-9);
}

#[test]
fn resized_rows_follow_the_init_distribution() {
    let mut model = OtterModel::<f64>::new(ModelConfig::tiny(), 5).unwrap();
    let d = model.config().d_model;
    let old_embed = model.params().by_name("tok_embed").unwrap().tensor.data().to_vec();
    let old_w = model.params().by_name("out_proj.weight").unwrap().tensor.data().to_vec();
    let extra = 2000;
    model.resize_token_embeddings(VOCAB_SIZE + extra).unwrap();
    let v = VOCAB_SIZE + extra;
    let embed = model.params().by_name("tok_embed").unwrap().tensor.data();
    assert_eq!(&embed[..old_embed.len()], &old_embed[..]);
    let w = model.params().by_name("out_proj.weight").unwrap().tensor.data();
    for r in 0..d {
        assert_eq!(&w[r * v..r * v + VOCAB_SIZE], &old_w[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE]);
    }
    let bias = model.params().by_name("out_proj.bias").unwrap().tensor.data();
    assert!(bias[VOCAB_SIZE..].iter().all(|&b| b == 0.0));

    let fresh: Vec<f64> = embed[old_embed.len()..]
        .iter()
        .copied()
        .chain((0..d).flat_map(|r| w[r * v + VOCAB_SIZE..(r + 1) * v].iter().copied()))
        .collect();
    let n = fresh.len() as f64;
    let mean = fresh.iter().sum::<f64>() / n;
    let std = (fresh.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 4.0 * EMBED_INIT_STD / n.sqrt(), "mean {mean}");
    assert!((std / EMBED_INIT_STD - 1.0).abs() < 0.03, "std {std}");

    // the grown model still runs
    let (_, data) = tiny(5);
    let s = &data[0];
    let logits = model.logits(&s.ids, Some((&s.media, &s.media_locations))).unwrap();
    assert_eq!(logits.shape(), &[s.len(), v]);
}

fn grads_by_prefix(model: &OtterModel<f64>, data: &[TokenizedSample]) -> Vec<(String, f64)> {
    let mut model = model.clone();
    let refs: Vec<&TokenizedSample> = data.iter().collect();
    let batch = collate_tight(&refs).unwrap();
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, &batch).unwrap();
    g.backward(l).unwrap();
    model.params_mut().accumulate_grads(&g);
    model
        .params()
        .iter()
        .map(|(_, p)| {
            let norm = p.tensor.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
            (p.name.clone(), norm)
        })
        .collect()
}

#[test]
fn gradients_reach_every_trainable_group() {
    for seed in 0..3 {
        let (mut model, data) = tiny(seed);
        let frozen = |n: &str| !TRAINABLE_PREFIXES.iter().any(|p| n.starts_with(p));

        // closed gates: only the gates themselves and the text path learn
        let grads = grads_by_prefix(&model, &data);
        for (name, norm) in &grads {
            let expect_live = name.ends_with("_gate") || name.starts_with("tok_embed") || name.starts_with("out_proj.");
            if frozen(name) || !expect_live {
                assert_eq!(*norm, 0.0, "seed {seed}: {name} should get no gradient yet");
            } else {
                assert!(*norm > 0.0, "seed {seed}: {name}");
            }
        }

        // once open, every trainable tensor receives gradient
        open_gates(&mut model, 0.5);
        for (name, norm) in grads_by_prefix(&model, &data) {
            if frozen(&name) {
                assert_eq!(norm, 0.0, "seed {seed}: frozen {name}");
            } else {
                assert!(norm > 0.0 && norm.is_finite(), "seed {seed}: {name} has norm {norm}");
            }
        }
    }
}

#[test]
fn gate_zero_identity_holds_across_seeds() {
    for seed in 0..3 {
        let v = gate_zero_identity(seed).unwrap();
        assert!(v.is_ok(), "{v:?}");
    }
}

#[test]
fn f32_and_f64_models_agree() {
    let (m64, data) = tiny(2);
    let m32: OtterModel<f32> = m64.cast();
    let refs: Vec<&TokenizedSample> = data.iter().collect();
    let batch = collate_tight(&refs).unwrap();
    assert!((loss(&m64, &batch) - loss(&m32, &batch)).abs() < 1e-4);
}
