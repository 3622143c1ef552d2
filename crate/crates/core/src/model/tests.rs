use super::*;
use crate::rng::Rng;

fn tiny(split: usize) -> SplitModel {
    SplitModel::init(ModelConfig {
        vocab_size: 16,
        hidden_dim: 8,
        num_blocks: 3,
        split_point: split,
        num_heads: 2,
        ffn_dim: 12,
        max_seq_len: 6,
        seed: 3,
    })
    .unwrap()
}

fn zero_block(b: &mut Block) {
    for t in [&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o, &mut b.w_up, &mut b.w_gate, &mut b.w_down] {
        *t = Tensor::zeros(t.shape());
    }
}

fn random_hidden(rng: &mut Rng, l: usize, d: usize) -> Tensor {
    Tensor::matrix(l, d, rng.normals(l * d)).unwrap()
}

/// Norm-wise relative error between two gradients.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    assert!(c.validate().is_ok());
    c.split_point = c.num_blocks;
    assert!(c.validate().is_err());
    let c = ModelConfig {
        num_heads: 5,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
    let c = ModelConfig {
        vocab_size: 1,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn layer_ref_parses() {
    let r: LayerRef = "block2.gate-proj".parse().unwrap();
    assert_eq!(r, LayerRef::new(2, LayerKind::GateProj));
    assert_eq!(r.to_string(), "block2.gate-proj");
    assert!("block2.nothing".parse::<LayerRef>().is_err());
    assert!("2.gate-proj".parse::<LayerRef>().is_err());
}

#[test]
fn embed_selects_rows() {
    let m = tiny(1);
    let h = m.embed(&[0]).unwrap();
    assert_eq!(h.row(0), m.embedding.row(0));
    let h = m.embed(&[2, 2]).unwrap();
    assert_eq!(h.row(0), h.row(1));
    let ids = [5, 1, 15, 0, 7];
    let h = m.embed(&ids).unwrap();
    for (j, &id) in ids.iter().enumerate() {
        assert_eq!(h.row(j), m.embedding.row(id));
    }
    assert!(matches!(m.embed(&[16]), Err(Error::TokenOutOfRange { id: 16, .. })));
    assert!(matches!(m.embed(&[0; 7]), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn empty_client_is_identity() {
    let m = tiny(0);
    let mut rng = Rng::new(1);
    let h = random_hidden(&mut rng, 4, 8);
    assert_eq!(m.client_forward(&h).unwrap(), h);
}

#[test]
fn zero_weight_block_is_identity() {
    let mut m = tiny(1);
    zero_block(&mut m.blocks[0]);
    m.positions = Tensor::zeros(m.positions.shape());
    let mut rng = Rng::new(2);
    let h = random_hidden(&mut rng, 5, 8);
    assert_eq!(m.client_forward(&h).unwrap(), h);
}

#[test]
fn client_gradient_matches_finite_differences() {
    let m = tiny(2);
    let mut rng = Rng::new(4);
    let h = random_hidden(&mut rng, 4, 8);
    let mut tape = GradTape::new();
    let x = tape.leaf(h.clone());
    let y = m.client_forward_on(&mut tape, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().get(x).unwrap().clone();

    let f = |t: &Tensor| m.client_forward(t).unwrap().sum();
    let step = 1e-5;
    let fd: Vec<f64> = (0..h.len())
        .map(|i| {
            let mut p = h.clone();
            p.data_mut()[i] += step;
            let mut q = h.clone();
            q.data_mut()[i] -= step;
            (f(&p) - f(&q)) / (2.0 * step)
        })
        .collect();
    let err = rel_err(g.data(), &fd);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn server_projection_hand_trace() {
    // Q1 = Q − 1, zero-weight server block, positions irrelevant server-side,
    // unembed = [I | 0] so logits are the hidden rows padded with zeros.
    let mut m = tiny(2);
    zero_block(&mut m.blocks[2]);
    let mut e2 = Tensor::zeros(&[8, 16]);
    for i in 0..8 {
        e2.set(i, i, 1.0);
    }
    m.unembed = e2;
    let mut rng = Rng::new(5);
    let h = random_hidden(&mut rng, 3, 8);
    let logits = m.server_forward(&h).unwrap();
    assert_eq!(logits.shape(), &[3, 16]);
    for r in 0..3 {
        assert_eq!(&logits.row(r)[..8], h.row(r));
        assert!(logits.row(r)[8..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn split_is_associative_bitwise() {
    let base = tiny(0);
    let ids = [3, 9, 1, 14, 0];
    let full = base.forward(&ids).unwrap();
    for q1 in 0..3 {
        let m = base.with_split(q1).unwrap();
        let h = m.client_forward(&m.embed(&ids).unwrap()).unwrap();
        let logits = m.server_forward(&h).unwrap();
        assert_eq!(logits, full, "split point {q1}");
    }
    assert_eq!(greedy_next(&full), argmax(full.row(4)));
}

#[test]
fn causal_prefix_is_unchanged() {
    let m = tiny(2);
    let a = [3, 9, 1, 14, 0];
    let mut b = a;
    b[3] = 7;
    let ta = m.trace(&a).unwrap();
    let tb = m.trace(&b).unwrap();
    for (x, y) in ta.iter().zip(&tb) {
        for ((_, ia, oa), (_, ib, ob)) in x.entries.iter().zip(&y.entries) {
            for r in 0..3 {
                assert_eq!(ia.row(r), ib.row(r));
                assert_eq!(oa.row(r), ob.row(r));
            }
        }
    }
    let la = m.forward(&a).unwrap();
    let lb = m.forward(&b).unwrap();
    assert_eq!(&la.data()[..3 * 16], &lb.data()[..3 * 16]);
}

#[test]
fn unit_gain_rms_norm_has_unit_rms() {
    let m = tiny(1);
    let mut rng = Rng::new(6);
    let z = random_hidden(&mut rng, 4, 8).scale(37.0);
    let y = m.layer_forward(LayerRef::new(0, LayerKind::RmsNorm1), &z).unwrap();
    for r in 0..4 {
        let rms = (y.row(r).iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-10);
    }
}

#[test]
fn layer_forward_matches_block_trace() {
    let m = tiny(2);
    let traces = m.trace(&[4, 8, 15, 2]).unwrap();
    for (b, t) in traces.iter().enumerate() {
        for kind in LayerKind::ALL {
            let (inp, out) = (t.input(kind).unwrap(), t.output(kind).unwrap());
            let y = m.layer_forward(LayerRef::new(b, kind), inp).unwrap();
            assert_eq!(&y, out, "block {b} {kind}");
        }
    }
}

#[test]
fn layer_forward_special_cases() {
    let mut m = tiny(1);
    let z = Tensor::zeros(&[2, 12]);
    let y = m.layer_forward(LayerRef::new(0, LayerKind::Activation), &z).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
    m.blocks[0].w_q = Tensor::eye(8);
    let mut rng = Rng::new(7);
    let z = random_hidden(&mut rng, 3, 8);
    assert_eq!(m.layer_forward(LayerRef::new(0, LayerKind::QueryProj), &z).unwrap(), z);
    assert!(m.layer_forward(LayerRef::new(9, LayerKind::QueryProj), &z).is_err());
    assert!(m.layer_forward(LayerRef::new(0, LayerKind::DownProj), &z).is_err());
}

#[test]
fn bypass_behaviour() {
    let m = tiny(2);
    let l = LayerRef::new(0, LayerKind::RmsNorm1);
    let b = m.bypass(l).unwrap();
    assert!(b.blocks[0].is_bypassed(LayerKind::RmsNorm1));
    assert_eq!(b.bypass(l).unwrap(), b);
    // Only the bypassed block differs.
    assert_eq!(b.blocks[1], m.blocks[1]);
    assert_eq!(b.embedding, m.embedding);

    // Pre-normalized input (unit RMS rows) sees no change from bypassing a unit-gain RMSNorm.
    let mut rng = Rng::new(8);
    let z = random_hidden(&mut rng, 3, 8);
    let zn = m.layer_forward(l, &z).unwrap();
    assert!(b.layer_forward(l, &zn).unwrap().sub(&m.layer_forward(l, &zn).unwrap()).unwrap().max_abs() < 1e-12);

    let h = random_hidden(&mut rng, 4, 8);
    let act = m.bypass(LayerRef::new(1, LayerKind::Activation)).unwrap();
    assert_ne!(act.client_forward(&h).unwrap(), m.client_forward(&h).unwrap());

    assert!(m.bypass(LayerRef::new(2, LayerKind::QueryProj)).is_err());
    let ffn = m.bypass(LayerRef::new(0, LayerKind::UpProj)).unwrap();
    let t = ffn.trace_hidden(&h, 1).unwrap();
    assert!(t[0].input(LayerKind::DownProj).is_none());
}

#[test]
fn init_is_deterministic() {
    assert_eq!(tiny(1), tiny(1));
    let mut other = tiny(1).config().clone();
    other.seed = 4;
    assert_ne!(SplitModel::init(other).unwrap(), tiny(1));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(1).bypass(LayerRef::new(0, LayerKind::KeyProj)).unwrap();
    let path = dir.path().join("m.splk");
    save_checkpoint(&m, &path, Precision::F64).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, m);
    let ids = [1, 2, 3];
    assert_eq!(loaded.forward(&ids).unwrap(), m.forward(&ids).unwrap());

    let compact = dir.path().join("c.splk");
    save_checkpoint(&m, &compact, Precision::F32).unwrap();
    let c = load_checkpoint(&compact).unwrap();
    let (a, b) = (m.forward(&ids).unwrap(), c.forward(&ids).unwrap());
    let rel = a.sub(&b).unwrap().norm() / a.norm();
    assert!(rel < 1e-5, "relative deviation {rel}");
}

#[test]
fn corrupt_checkpoints_error() {
    let m = tiny(1);
    let bytes = checkpoint::encode_checkpoint(&m, Precision::F64);
    for cut in [0, 3, 7, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode_checkpoint(&bad).is_err());
    let mut v2 = bytes;
    v2[4] = 2;
    assert!(matches!(
        checkpoint::decode_checkpoint(&v2),
        Err(Error::CheckpointVersion { found: 2, .. })
    ));
}

#[test]
fn training_reduces_loss() {
    let mut m = SplitModel::init(ModelConfig {
        vocab_size: 16,
        max_seq_len: 8,
        hidden_dim: 16,
        ffn_dim: 32,
        num_blocks: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let corpus = vec![vec![2, 3, 4, 5, 6], vec![7, 3, 8, 9], vec![2, 10, 11, 12, 13, 3]];
    let cfg = TrainConfig {
        steps: 200,
        batch: 2,
        ..TrainConfig::default()
    };
    let report = toy_train(&mut m, &corpus, &cfg).unwrap();
    assert!(report.losses.last().unwrap() < &report.losses[0]);
    assert!(report.final_smoothed < report.initial_smoothed);
    assert!(matches!(toy_train(&mut m, &[], &cfg), Err(Error::Empty(_))));
}

#[test]
fn memorizes_single_sequence() {
    let mut m = SplitModel::init(ModelConfig {
        vocab_size: 16,
        max_seq_len: 8,
        hidden_dim: 16,
        ffn_dim: 32,
        num_blocks: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let corpus = vec![vec![2, 5, 3, 9, 4, 11, 7]];
    let cfg = TrainConfig {
        steps: 2000,
        batch: 1,
        ..TrainConfig::default()
    };
    let report = toy_train(&mut m, &corpus, &cfg).unwrap();
    assert!(report.final_smoothed < 0.01, "loss {}", report.final_smoothed);
}
