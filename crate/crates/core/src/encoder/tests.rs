use super::*;
use crate::gradcheck::{check_gradients, Selection};
use crate::tokenizer::{CLS, PAD, SEP};

fn tiny(seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 8,
        ffn_dim: 32,
        vocab_size: 20,
        max_positions: 16,
        tie_mlm_head: true,
        mlm_transform_init: TransformInit::default(),
        seed,
    }
}

fn max_rel_error(
    model: &EncoderModel<f64>,
    analytic: &[Matrix<f64>],
    loss: impl Fn(&EncoderModel<f64>) -> f64,
) -> f64 {
    let report = check_gradients(model, analytic, loss, 1e-4, Selection::All);
    assert!(report.passes(1.0), "structurally zero gradients not at noise level: {report:?}");
    report.max_rel_error
}

/// Moves every parameter off its initial value so the check also covers
/// nonzero biases and non-unit gains.
fn jitter(model: &mut EncoderModel<f64>, std: f64, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for x in p.as_mut_slice() {
            *x += std * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
        }
    }
}

fn sum_logits(model: &EncoderModel<f64>, ids: &[TokenId]) -> (f64, Vec<Matrix<f64>>) {
    let mask = vec![true; ids.len()];
    let mut s = model.session();
    let h = s.encode(ids, None, &mask).unwrap();
    let l = s.mlm_logits(h);
    let total = s.graph_mut().sum(l);
    let value = s.value(total).item();
    let mut grads = model.zero_grads();
    s.accumulate_grads(&[(total, Matrix::scalar(1.0))], &mut grads);
    (value, grads)
}

#[test]
fn sum_of_logits_gradient_matches_finite_differences() {
    let mut model = EncoderModel::<f64>::new(tiny(3)).unwrap();
    jitter(&mut model, 0.1, 1);
    let ids = [CLS, 7, 12, 9, SEP];
    let (_, grads) = sum_logits(&model, &ids);
    let err = max_rel_error(&model, &grads, |m| sum_logits(m, &ids).0);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn untied_head_gradient_matches_finite_differences() {
    let mut cfg = tiny(4);
    cfg.tie_mlm_head = false;
    let mut model = EncoderModel::<f64>::new(cfg).unwrap();
    jitter(&mut model, 0.1, 2);
    let ids = [CLS, 5, 6, SEP];
    let (_, grads) = sum_logits(&model, &ids);
    let err = max_rel_error(&model, &grads, |m| sum_logits(m, &ids).0);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn zero_transform_tied_head_still_reaches_embeddings() {
    let mut model = EncoderModel::<f64>::new(tiny(5)).unwrap();
    jitter(&mut model, 0.1, 3);
    let w = model.param_index("mlm.transform.weight").unwrap();
    model.params_mut()[w].fill(0.0);
    let ids = [CLS, 8, 11, SEP];
    let (_, grads) = sum_logits(&model, &ids);
    let tok = model.param_index("embeddings.token").unwrap();
    // Through the tied decoder every vocabulary row receives gradient.
    for r in 0..model.config().vocab_size {
        assert!(grads[tok].row(r).iter().any(|&g| g != 0.0), "row {r} has no gradient");
    }
    let err = max_rel_error(&model, &grads, |m| sum_logits(m, &ids).0);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn unused_parameters_get_exact_zero_gradient() {
    let model = EncoderModel::<f64>::new(tiny(6)).unwrap();
    let (_, grads) = sum_logits(&model, &[CLS, 9, SEP]);
    for name in ["cross.weight", "cross.bias"] {
        let i = model.param_index(name).unwrap();
        assert!(grads[i].as_slice().iter().all(|&g| g == 0.0));
    }
    // positions 3.. are never used for a 3-token input
    let pos = model.param_index("embeddings.position").unwrap();
    assert!(grads[pos].row(5).iter().all(|&g| g == 0.0));
}

#[test]
fn cross_score_gradient_matches_finite_differences() {
    let mut model = EncoderModel::<f64>::new(tiny(7)).unwrap();
    jitter(&mut model, 0.1, 4);
    let (ids, seg) = wrap_pair(&[6, 7], &[8, 9, 10], 16);
    let score = |m: &EncoderModel<f64>| -> (f64, Vec<Matrix<f64>>) {
        let mask = vec![true; ids.len()];
        let mut s = m.session();
        let h = s.encode(&ids, Some(&seg), &mask).unwrap();
        let c = s.cross_score(h);
        let sq = s.graph_mut().sum_squares(c);
        let mut g = m.zero_grads();
        s.accumulate_grads(&[(sq, Matrix::scalar(1.0))], &mut g);
        (s.value(sq).item(), g)
    };
    let (_, grads) = score(&model);
    let err = max_rel_error(&model, &grads, |m| score(m).0);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn padding_does_not_change_unpadded_states() {
    let model = EncoderModel::<f32>::new(tiny(8)).unwrap();
    let ids = [CLS, 7, 8, 9, SEP];
    let base = model.forward(&ids, &[true; 5]).unwrap();
    let padded_ids = [CLS, 7, 8, 9, SEP, PAD, PAD, PAD];
    let mask = [true, true, true, true, true, false, false, false];
    let padded = model.forward(&padded_ids, &mask).unwrap();
    for r in 0..5 {
        for (a, b) in base.row(r).iter().zip(padded.row(r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let logits = model.mlm_logits(&base);
    let plogits = model.mlm_logits(&padded);
    let a = splade_pool(&logits, &[true; 5]).unwrap();
    let b = splade_pool(&plogits, &mask).unwrap();
    assert_eq!(a.terms().collect::<Vec<_>>(), b.terms().collect::<Vec<_>>());
    for (x, y) in a.entries().iter().zip(b.entries()) {
        assert!((x.1 - y.1).abs() < 1e-6);
    }
    assert_eq!(cls_pool(&base).unwrap(), cls_pool(&padded).unwrap());
}

#[test]
fn shapes_and_seed_dependence() {
    let a = EncoderModel::<f32>::new(tiny(1)).unwrap();
    let b = EncoderModel::<f32>::new(tiny(2)).unwrap();
    let h = a.forward(&[CLS], &[true]).unwrap();
    assert_eq!(h.shape(), (1, 8));
    assert_ne!(h, b.forward(&[CLS], &[true]).unwrap());
    let ids = [CLS, 5, 6, 7, 8, 9, SEP];
    let hidden = a.forward(&ids, &[true; 7]).unwrap();
    let logits = a.mlm_logits(&hidden);
    assert_eq!(logits.shape(), (7, 20));
    assert!(logits.is_finite());
    assert_eq!(cls_pool(&hidden).unwrap().len(), 8);
}

#[test]
fn forward_errors() {
    let m = EncoderModel::<f32>::new(tiny(1)).unwrap();
    let long = vec![CLS; 17];
    assert!(matches!(m.forward(&long, &[true; 17]), Err(Error::SequenceTooLong { len: 17, max: 16 })));
    assert!(matches!(m.forward(&[CLS, 25], &[true; 2]), Err(Error::IdOutOfRange { .. })));
    let mut bad = tiny(1);
    bad.hidden_dim = 9;
    assert!(EncoderModel::<f32>::new(bad).is_err());
}

#[test]
fn splade_pool_examples() {
    let e = std::f64::consts::E;
    // all logits <= 0
    let l = Matrix::from_vec(2, 8, vec![-1.0; 16]);
    assert!(splade_pool(&l, &[true, true]).unwrap().is_empty());
    // log(1 + (e - 1)) = 1
    let mut l = Matrix::<f64>::zeros(1, 8);
    l.set(0, 6, e - 1.0);
    let v = splade_pool(&l, &[true]).unwrap();
    assert_eq!(v.len(), 1);
    assert!((v.entries()[0].1 - 1.0).abs() < 1e-6);
    // max(0.5, 1.5) -> log(2.5)
    let mut l = Matrix::<f64>::zeros(2, 8);
    l.set(0, 7, 0.5);
    l.set(1, 7, 1.5);
    let v = splade_pool(&l, &[true, true]).unwrap();
    assert!((v.entries()[0].1 as f64 - 0.916_290_7).abs() < 1e-6);
    // special dimensions dropped
    let l = Matrix::from_vec(1, 8, vec![3.0; 8]);
    assert!(splade_pool(&l, &[true]).unwrap().terms().all(|t| t >= 5));
    assert!(matches!(splade_pool(&l, &[false]), Err(Error::AllPositionsMasked)));
}

#[test]
fn parameter_counts_are_a_function_of_config() {
    // hand-expanded: emb V*H + P*H + 2H + 2H; per layer 4(H^2+H) + H*F + F + F*H + H + 4H;
    // MLM head H^2 + 3H + V; cross head H + 1
    assert_eq!(tiny(0).parameter_count(), 2181);
    let mut untied = tiny(0);
    untied.tie_mlm_head = false;
    assert_eq!(untied.parameter_count(), 2341);
    let desk = EncoderConfig { hidden_dim: 64, ffn_dim: 256, num_heads: 4, ..EncoderConfig::desk(2, 1, 200, 0) };
    assert_eq!(desk.parameter_count(), 133_961);
    assert_eq!(EncoderConfig::six_layer(32_000, 0).parameter_count(), 68_124_417);
    assert_eq!(EncoderConfig::twelve_layer(32_000, 0).parameter_count(), 110_651_649);
    let m = EncoderModel::<f32>::new(tiny(9)).unwrap();
    assert_eq!(m.parameter_count(), tiny(9).parameter_count());
}

#[test]
fn initialization_statistics() {
    let m = EncoderModel::<f64>::new(EncoderConfig::desk(1, 1, 100, 11)).unwrap();
    let tok = &m.params()[m.param_index("embeddings.token").unwrap()];
    let xs = tok.as_slice();
    assert!(xs.iter().all(|x| x.abs() <= 0.04 + 1e-12));
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean.abs() < 2e-3);
    let ln = &m.params()[m.param_index("layers.0.attn.ln.gain").unwrap()];
    assert!(ln.as_slice().iter().all(|&g| g == 1.0));
    let b = &m.params()[m.param_index("layers.0.ffn.in.bias").unwrap()];
    assert!(b.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = EncoderModel::<f32>::new(tiny(12)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.names(), m.names());
    for (a, b) in back.params().iter().zip(m.params()) {
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn cross_score_is_deterministic_and_finite() {
    let m = EncoderModel::<f32>::new(tiny(13)).unwrap();
    let a = m.cross_score(&[5, 6], &[7, 8, 9], 16).unwrap();
    assert!(a.is_finite());
    assert_eq!(a, m.cross_score(&[5, 6], &[7, 8, 9], 16).unwrap());
    // long pairs are truncated rather than rejected
    assert!(m.cross_score(&[5; 30], &[7; 30], 64).is_ok());
}

#[test]
fn splade_weights_monotone_in_logits() {
    let mut l = Matrix::<f64>::zeros(3, 10);
    for (i, v) in [0.2, -0.3, 0.7, 1.1, 0.05, 0.9, 0.4, -2.0, 0.6, 0.3].iter().enumerate() {
        l.set(i % 3, i, *v);
    }
    let mask = [true; 3];
    let base = splade_pool(&l, &mask).unwrap().to_dense(10);
    for r in 0..3 {
        for c in 0..10 {
            let mut bumped = l.clone();
            bumped.set(r, c, l.get(r, c) + 0.25);
            let b = splade_pool(&bumped, &mask).unwrap().to_dense(10);
            for j in 0..10 {
                assert!(b[j] >= base[j]);
            }
        }
    }
}
