use proptest::prelude::*;

use super::*;
use crate::numerics::layers::ParamBuilder;
use crate::numerics::{ParamStore, Tape};

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        d_model: 8,
        speaker_dim: 6,
        dialect_dim: 4,
        fusion_out_dim: 8,
        dsdr_ffn_dim: 12,
        heads: 2,
        n_dsdr_blocks: 1,
        t_crop: 5,
        ref_encoder_hidden: 8,
        duration_hidden: 8,
        decoder_hidden: 8,
        decoder_blocks: 1,
        time_embedding_dim: 4,
        cfm_steps: 4,
        ..ModelConfig::default()
    }
}

fn frames(rows: usize, channels: usize, seed: u64) -> FrameMatrix {
    let mut rng = RngStream::new(seed, 3);
    FrameMatrix::new(rows, channels, (0..rows * channels).map(|_| rng.uniform() as f32 + 0.1).collect()).unwrap()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn crop_examples() {
    let f = frames(4, 3, 1);
    let mut rng = RngStream::new(0, 0);
    assert_eq!(crop_reference(&f, 4, &mut rng), f);
    let f = frames(10, 3, 2);
    for _ in 0..50 {
        let c = crop_reference(&f, 4, &mut rng);
        assert_eq!(c.frames(), 4);
        let start = (0..=6).find(|&s| f.row(s) == c.row(0)).expect("window starts in 0..=6");
        for r in 0..4 {
            assert_eq!(c.row(r), f.row(start + r));
        }
    }
    let short = crop_reference(&frames(2, 3, 3), 5, &mut rng);
    assert_eq!(short.frames(), 5);
    assert!(short.data()[6..].iter().all(|&v| v == 0.0));
}

#[test]
fn duration_plan_rounding() {
    let p = DurationPlan::from_log(vec![0.0, 4f64.ln(), -3.0, 1.2]);
    assert_eq!(p.counts, vec![1, 4, 1, 3]);
    assert_eq!(p.total_frames(), 9);
}

#[test]
fn upsample_examples() {
    let enc = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(upsample(&enc, &[1, 1]).unwrap(), enc);
    let up = upsample(&enc, &[2, 3]).unwrap();
    assert_eq!(up.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    assert!(upsample(&enc, &[1]).is_err());
}

proptest! {
    #[test]
    fn upsample_conserves_frames(counts in proptest::collection::vec(1usize..8, 1..20)) {
        let enc = Tensor::<f32>::full(&[counts.len(), 3], 1.0);
        prop_assert_eq!(upsample(&enc, &counts).unwrap().rows(), counts.iter().sum::<usize>());
    }
}

#[test]
fn speaker_embedding_contract() {
    let cfg = tiny_config();
    let m = Model::new(&cfg, Ablation::FULL, 1).unwrap();
    for s in 0..20 {
        let h = m.encode_speaker(&frames(cfg.t_crop, cfg.channels, s)).unwrap();
        assert_eq!(h.len(), cfg.speaker_dim);
        assert!((norm(&h) - 1.0).abs() < 1e-6);
    }
    assert!(matches!(m.encode_speaker(&FrameMatrix::zeros(cfg.t_crop, cfg.channels)), Err(Error::ZeroNorm)));
    assert!(m.encode_speaker(&frames(cfg.t_crop + 1, cfg.channels, 0)).is_err());
}

#[test]
fn dialect_embedding_contract() {
    let cfg = tiny_config();
    let m = Model::new(&cfg, Ablation::FULL, 1).unwrap();
    let rows: Vec<Vec<f32>> = (0..3).map(|d| m.embed_dialect(d).unwrap()).collect();
    for r in &rows {
        assert!((norm(r) - 1.0).abs() < 1e-6);
    }
    assert_ne!(rows[0], rows[1]);
    assert_ne!(rows[1], rows[2]);
    assert_eq!(Model::new(&cfg, Ablation::FULL, 1).unwrap().embed_dialect(0).unwrap(), rows[0]);
    assert!(matches!(m.embed_dialect(3), Err(Error::DialectOutOfRange { id: 3, .. })));
    let ablated = Model::new(&cfg, Ablation::NO_DIALECT_ID, 1).unwrap();
    assert!(ablated.embed_dialect(2).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn fusion_zero_linear_is_identity_and_time_invariant() {
    let cfg = tiny_config();
    let mut m = Model::new(&cfg, Ablation::FULL, 1).unwrap();
    let mut tape = Tape::new();
    let spk = tape.constant(Tensor::row(vec![0.6f32, 0.8, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let did = tape.constant(Tensor::row(vec![0.0f32, 1.0, 0.0, 0.0]).unwrap()).unwrap();
    let mut rng = RngStream::new(5, 0);
    let h = crate::model::flow::gaussian::<f32>(&[7, cfg.d_model], &mut rng);
    let hv = tape.constant(h.clone()).unwrap();

    let style = m.arch.style(&mut tape, &m.params, spk, did).unwrap();
    let fused = m.arch.fuse(&mut tape, hv, style).unwrap();
    let fused = tape.value(fused).clone();
    // The same style row is added at every position.
    let expect: Vec<f32> = tape.value(style).data().to_vec();
    for t in 0..7 {
        for (j, &e) in expect.iter().enumerate() {
            assert_eq!(fused.row_slice(t)[j], h.row_slice(t)[j] + e);
        }
    }

    for id in m.arch.text.fusion.params() {
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let spk = tape.constant(Tensor::row(vec![0.6f32, 0.8, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let did = tape.constant(Tensor::row(vec![0.0f32, 1.0, 0.0, 0.0]).unwrap()).unwrap();
    let hv = tape.constant(h.clone()).unwrap();
    let style = m.arch.style(&mut tape, &m.params, spk, did).unwrap();
    let fused = m.arch.fuse(&mut tape, hv, style).unwrap();
    assert_eq!(tape.value(fused), &h);
}

#[test]
fn fusion_hand_set_case() {
    // speaker_dim 1, dialect_dim 1, d_model 2; a 1x2 text row.
    let cfg = ModelConfig {
        speaker_dim: 1,
        dialect_dim: 1,
        d_model: 2,
        fusion_out_dim: 2,
        heads: 1,
        ..tiny_config()
    };
    let mut m = Model::new(&cfg, Ablation::FULL, 0).unwrap();
    let w = [[0.5f32, -1.0], [2.0, 0.25]];
    let b = [0.1f32, -0.2];
    m.params.get_mut(m.arch.text.fusion.w).data_mut().copy_from_slice(&[w[0][0], w[0][1], w[1][0], w[1][1]]);
    m.params.get_mut(m.arch.text.fusion.b.unwrap()).data_mut().copy_from_slice(&b);
    let (spk, did, text) = (1.0f32, -1.0f32, [3.0f32, 4.0]);
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::row(vec![spk]).unwrap()).unwrap();
    let d = tape.constant(Tensor::row(vec![did]).unwrap()).unwrap();
    let h = tape.constant(Tensor::row(text.to_vec()).unwrap()).unwrap();
    let style = m.arch.style(&mut tape, &m.params, s, d).unwrap();
    let out = m.arch.fuse(&mut tape, h, style).unwrap();
    let expect: Vec<f32> = (0..2).map(|j| text[j] + spk * w[0][j] + did * w[1][j] + b[j]).collect();
    assert_eq!(tape.value(out).data(), expect.as_slice());
}

fn block_store(private: usize, seed: u64) -> (ParamStore<f32>, DsdrBlock, ModelConfig) {
    let cfg = ModelConfig { d_model: 4, heads: 2, dsdr_ffn_dim: 3, fusion_out_dim: 4, ..tiny_config() };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, 0);
    let block = DsdrBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, private).unwrap();
    (store, block, cfg)
}

fn run_block(store: &ParamStore<f64>, block: &DsdrBlock, h: &Tensor<f64>, dialect: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone()).unwrap();
    let y = block.forward(&mut tape, store, x, dialect).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_private_ffns_match_public_only_block() {
    let (mut store, block, _) = block_store(3, 4);
    for ffn in &block.private {
        for id in ffn.params() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let public_only = DsdrBlock { private: Vec::new(), ..block.clone() };
    let h = crate::model::flow::gaussian::<f32>(&[5, 4], &mut RngStream::new(2, 2));
    for d in 0..3 {
        let mut t1 = Tape::new();
        let x = t1.constant(h.clone()).unwrap();
        let a = block.forward(&mut t1, &store, x, d).unwrap();
        let mut t2 = Tape::new();
        let x = t2.constant(h.clone()).unwrap();
        let b = public_only.forward(&mut t2, &store, x, d).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
    }
}

#[test]
fn unselected_private_ffns_get_exactly_zero_gradient() {
    let (store, block, _) = block_store(3, 5);
    let store = store.convert::<f64>();
    for d in 0..3 {
        let mut tape = Tape::new();
        let h = crate::model::flow::gaussian::<f64>(&[3, 4], &mut RngStream::new(9, d as u64));
        let x = tape.constant(h).unwrap();
        let y = block.forward(&mut tape, &store, x, d).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        for (k, ffn) in block.private.iter().enumerate() {
            for id in ffn.params() {
                match g.param(id) {
                    None => assert_ne!(k, d),
                    Some(t) => {
                        assert_eq!(k, d);
                        assert!(t.data().iter().any(|&v| v != 0.0));
                    }
                }
            }
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::full(&[2, 4], 0.5)).unwrap();
    assert!(matches!(block.forward(&mut tape, &store, x, 3), Err(Error::DialectOutOfRange { .. })));
}

/// Straight-line reference for one block: plain loops over `f64` values.
fn reference_block(store: &ParamStore<f64>, block: &DsdrBlock, h: &[Vec<f64>], dialect: usize) -> Vec<Vec<f64>> {
    let p = |id: crate::numerics::ParamId| store.get(id).data().to_vec();
    let layer_norm = |x: &[f64], ln: &crate::numerics::layers::LayerNorm| -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let (g, b) = (p(ln.gamma), p(ln.beta));
        x.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
    };
    let linear = |x: &[f64], l: &crate::numerics::layers::Linear| -> Vec<f64> {
        let w = p(l.w);
        let b = l.b.map(p).unwrap_or_else(|| vec![0.0; l.fan_out]);
        (0..l.fan_out).map(|j| b[j] + (0..l.fan_in).map(|i| x[i] * w[i * l.fan_out + j]).sum::<f64>()).collect()
    };
    let ffn = |x: &[f64], f: &crate::numerics::layers::Ffn| -> Vec<f64> {
        let u: Vec<f64> = linear(x, &f.up).iter().map(|&z| z / (1.0 + (-z).exp())).collect();
        linear(&u, &f.down)
    };
    let t = h.len();
    let n1: Vec<Vec<f64>> = h.iter().map(|r| layer_norm(r, &block.ln_attn)).collect();
    let q: Vec<Vec<f64>> = n1.iter().map(|r| linear(r, &block.attn.q)).collect();
    let k: Vec<Vec<f64>> = n1.iter().map(|r| linear(r, &block.attn.k)).collect();
    let v: Vec<Vec<f64>> = n1.iter().map(|r| linear(r, &block.attn.v)).collect();
    let d = h[0].len();
    let hd = d / block.attn.heads;
    let mut concat = vec![vec![0.0; d]; t];
    for head in 0..block.attn.heads {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    (0..t)
        .map(|i| {
            let a = linear(&concat[i], &block.attn.out);
            let h1: Vec<f64> = h[i].iter().zip(&a).map(|(x, y)| x + y).collect();
            let n2 = layer_norm(&h1, &block.ln_ffn);
            let fp = ffn(&n2, &block.public);
            let fq = ffn(&n2, &block.private[dialect]);
            (0..d).map(|c| h1[c] + fp[c] + fq[c]).collect()
        })
        .collect()
}

#[test]
fn block_matches_straight_line_reference() {
    let (store, block, _) = block_store(3, 6);
    let mut store = store.convert::<f64>();
    // Hand-set values: perturb the layer-norm affine terms away from identity.
    let g = block.ln_attn.gamma;
    store.get_mut(g).data_mut().copy_from_slice(&[1.5, 0.5, -1.0, 2.0]);
    store.get_mut(block.ln_ffn.beta).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
    let h = vec![vec![0.3, -1.2, 0.8, 2.0], vec![-0.7, 0.4, 1.1, -0.3]];
    for d in 0..3 {
        let got = run_block(&store, &block, &Tensor::from_rows(&h).unwrap(), d);
        let want = reference_block(&store, &block, &h, d);
        for (i, row) in want.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                assert!((got.get2(i, c) - w).abs() < 1e-12, "dialect {d} [{i},{c}]");
            }
        }
    }
}

fn encode(m: &Model, tokens: &[usize], dialect: usize) -> Tensor<f32> {
    let mut tape = Tape::new();
    let spk = tape.constant(Tensor::row(vec![1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let did = m.arch.dialect_embedding(&mut tape, &m.params, dialect).unwrap();
    let style = m.arch.style(&mut tape, &m.params, spk, did).unwrap();
    let e = m.arch.encode_text(&mut tape, &m.params, tokens, style, dialect).unwrap();
    tape.value(e).clone()
}

#[test]
fn text_encoder_contract() {
    let m = Model::new(&tiny_config(), Ablation::NO_DIALECT_ID, 3).unwrap();
    let tokens = [5, 17, 9, 200];
    let a = encode(&m, &tokens, 0);
    assert_eq!(a.rows(), tokens.len());
    assert_ne!(a, encode(&m, &tokens, 1), "routing must change the output");
    let swapped = encode(&m, &[17, 5, 9, 200], 0);
    assert_ne!(a.row_slice(0), swapped.row_slice(1));
    assert_ne!(a.row_slice(1), swapped.row_slice(0));
    let mut tape = Tape::<f32>::new();
    let s = tape.constant(Tensor::zeros(&[1, 8])).unwrap();
    assert!(matches!(m.arch.encode_text(&mut tape, &m.params, &[216], s, 0), Err(Error::UnknownToken(216))));
    assert!(m.arch.encode_text(&mut tape, &m.params, &[], s, 0).is_err());
}

#[test]
fn reference_cosine_examples() {
    use arch::reference_cosine;
    let lit = RefLossMode::Literal;
    assert!((reference_cosine(&[0.6f64, 0.8], &[0.6, 0.8], lit).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(reference_cosine(&[1.0f64, 0.0], &[0.0, 1.0], lit).unwrap(), 0.0);
    assert!((reference_cosine(&[1.0f64, 0.0], &[-1.0, 0.0], lit).unwrap() + 1.0).abs() < 1e-15);
    assert!((reference_cosine(&[1.0f64, 0.0], &[-1.0, 0.0], RefLossMode::CosSquared).unwrap() - 1.0).abs() < 1e-15);
    assert!(reference_cosine(&[1.0f64, 0.0, 0.0], &[1.0, 0.0], lit).is_err());
}

#[test]
fn reference_loss_on_tape_uses_projection_and_vanishes_without_dialect_id() {
    let cfg = tiny_config();
    let m = Model::new(&cfg, Ablation::FULL, 2).unwrap();
    let spk = frames(cfg.t_crop, cfg.channels, 8);
    let mut tape = Tape::new();
    let x = tape.constant(m.reference_input(&spk).unwrap()).unwrap();
    let h_spk = m.arch.speaker_embedding(&mut tape, &m.params, x).unwrap();
    let h_did = m.arch.dialect_embedding(&mut tape, &m.params, 1).unwrap();
    let l = m.arch.reference_loss(&mut tape, &m.params, h_spk, h_did).unwrap();
    let v = tape.scalar(l);
    assert!((0.0..=1.0).contains(&v));
    let ablated = Model::new(&cfg, Ablation::NO_DIALECT_ID, 2).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(ablated.reference_input(&spk).unwrap()).unwrap();
    let h_spk = ablated.arch.speaker_embedding(&mut tape, &ablated.params, x).unwrap();
    let h_did = ablated.arch.dialect_embedding(&mut tape, &ablated.params, 1).unwrap();
    let l = ablated.arch.reference_loss(&mut tape, &ablated.params, h_spk, h_did).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
}

#[test]
fn single_euler_step_is_x0_plus_velocity() {
    let cfg = tiny_config();
    let m = Model::new(&cfg, Ablation::FULL, 2).unwrap();
    let cond = crate::model::flow::gaussian::<f32>(&[6, cfg.d_model], &mut RngStream::new(1, 1));
    let style = crate::model::flow::gaussian::<f32>(&[1, cfg.d_model], &mut RngStream::new(1, 2));
    let out = decode_flow(&m.arch, &m.params, &cond, &style, 1, 1, &mut RngStream::new(4, 4)).unwrap();
    let x0 = crate::model::flow::gaussian::<f32>(&[6, cfg.channels], &mut RngStream::new(4, 4));
    let mut tape = Tape::new();
    let (xv, c, s) = (tape.constant(x0.clone()).unwrap(), tape.constant(cond).unwrap(), tape.constant(style).unwrap());
    let v = m.arch.velocity(&mut tape, &m.params, xv, 0.0, c, s, 1).unwrap();
    let expect: Vec<f32> = x0.data().iter().zip(tape.value(v).data()).map(|(a, b)| a + 1.0 * b).collect();
    assert_eq!(out.data(), expect.as_slice());
    assert!(decode_flow(&m.arch, &m.params, &tape.value(c).clone(), &tape.value(s).clone(), 1, 0, &mut RngStream::new(0, 0)).is_err());
}

#[test]
fn synthesis_is_deterministic_and_conserves_frames() {
    let cfg = tiny_config();
    let m = Model::new(&cfg, Ablation::FULL, 2).unwrap();
    let reference = frames(9, cfg.channels, 1);
    let a = m.synthesize(&[3, 4, 5], &reference, 2, 3, &mut RngStream::new(7, 7)).unwrap();
    let b = m.synthesize(&[3, 4, 5], &reference, 2, 3, &mut RngStream::new(7, 7)).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.frames.frames(), a.plan.total_frames());
    assert!(a.frames.data().iter().all(|&v| v >= 0.0));
    assert!(matches!(m.synthesize_text("\u{0F40}", &reference, "xx", 2, &mut RngStream::new(0, 0)), Err(Error::UnknownDialect(_))));
}

#[test]
fn checkpoint_round_trip_gives_identical_forward() {
    let cfg = tiny_config();
    for (_, ablation) in Ablation::ALL {
        let m = Model::new(&cfg, ablation, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path, &cfg).unwrap();
        assert_eq!(back.ablation(), ablation);
        let reference = frames(9, cfg.channels, 1);
        let a = m.synthesize(&[3, 4], &reference, 0, 2, &mut RngStream::new(1, 1)).unwrap();
        let b = back.synthesize(&[3, 4], &reference, 0, 2, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(a.frames, b.frames);
    }
}

#[test]
fn no_dsdr_has_no_private_parameters() {
    let m = Model::new(&tiny_config(), Ablation::NO_DSDR, 0).unwrap();
    assert!(m.params.iter().all(|(n, _)| !n.contains("private")));
    let full = Model::new(&tiny_config(), Ablation::FULL, 0).unwrap();
    assert!(full.params.iter().any(|(n, _)| n.contains("private2")));
}
