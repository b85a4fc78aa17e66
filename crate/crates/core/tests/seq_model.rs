use multisum::autograd::Graph;
use multisum::corpus::vocab::Vocab;
use multisum::corpus::{Field, FieldValue, TableData};
use multisum::image::RasterImage;
use multisum::params::{normal_init, ParamMask};
use multisum::seq_model::{checkpoint, Ctx, ModalInputs, Model, ModelConfig};
use multisum::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_vocab() -> Vocab {
    Vocab::build(["good", "food", "tacos"], ["thai", "bars"], 100)
}

fn micro_model(seed: u64) -> (Model, Vocab) {
    let v = micro_vocab();
    let cfg = ModelConfig::micro(v.len(), v.num_categories());
    (Model::new(&cfg, &v, seed).unwrap(), v)
}

fn set(model: &mut Model, name: &str, m: Matrix) {
    let id = model.store.id(name).unwrap_or_else(|| panic!("no tensor {name}"));
    assert_eq!(model.store.get(id).shape(), m.shape(), "{name}");
    *model.store.get_mut(id) = m;
}

fn randomize(model: &mut Model, name: &str, rng: &mut ChaCha8Rng, std: f64) {
    let id = model.store.id(name).unwrap();
    let (r, c) = model.store.get(id).shape();
    *model.store.get_mut(id) = normal_init(rng, r, c, std);
}

fn image(rng: &mut ChaCha8Rng) -> RasterImage {
    RasterImage::new(3, 4, 4, (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn table(v: &Vocab) -> TableData {
    TableData {
        fields: vec![
            Field { name: v.encode("food"), value: FieldValue::Numeric(12.5) },
            Field { name: v.encode("good"), value: FieldValue::Categorical(vec![0, 1]) },
            Field { name: v.encode("tacos"), value: FieldValue::Binary(false) },
            Field { name: v.encode("food"), value: FieldValue::Hours { open: 9.0, close: 17.5 } },
            Field { name: v.encode("good"), value: FieldValue::Ordinal { level: Some(2), label: v.encode("good tacos") } },
        ],
    }
}

#[test]
fn decoder_inputs_sd_behaviour() {
    let (model, _) = micro_model(1);
    let tokens = [1, 8, 9];
    let mut g = Graph::inference(&model.store);
    let x0 = model.embed_decoder_inputs(&mut g, &tokens, 0.0).unwrap();
    let x1 = model.embed_decoder_inputs(&mut g, &tokens, 1.0).unwrap();
    let x2 = model.embed_decoder_inputs(&mut g, &tokens, 2.0).unwrap();
    let tok = model.store.get(model.params.tok);
    let pos = model.store.get(model.params.dec_pos);
    let dev = model.store.get(model.params.dev);
    for (t, &id) in tokens.iter().enumerate() {
        for j in 0..4 {
            assert_eq!(g.value(x0).get(t, j), tok.get(id as usize, j) + pos.get(t, j));
            let diff = g.value(x2).get(t, j) - g.value(x1).get(t, j);
            assert!((diff - dev.get(0, j)).abs() < 1e-12);
        }
    }
    let too_long = vec![5; 13];
    assert!(model.embed_decoder_inputs(&mut g, &too_long, 0.0).is_err());
}

#[test]
fn decoder_inputs_hand_sum() {
    let v = Vocab::from_parts(vec!["a".into(), "b".into(), "c".into()], vec![]);
    let cfg = ModelConfig { d_model: 2, heads: 1, ..ModelConfig::micro(3, 0) };
    let mut m = Model::new(&cfg, &v, 0).unwrap();
    set(&mut m, "emb.tok", Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 2.0]]));
    let mut pos = Matrix::zeros(12, 2);
    pos.row_mut(0).copy_from_slice(&[0.5, -0.5]);
    set(&mut m, "dec.pos", pos);
    set(&mut m, "dec.dev", Matrix::row_vector(vec![2.0, 4.0]));
    let mut g = Graph::inference(&m.store);
    let x = m.embed_decoder_inputs(&mut g, &[2], -1.5).unwrap();
    // (1, 2) - 1.5 (2, 4) + (0.5, -0.5)
    assert_eq!(g.value(x).row(0), &[-1.5, -4.5]);
}

#[test]
fn sources_are_encoded_independently() {
    let (model, _) = micro_model(2);
    let (a, b): (&[u32], &[u32]) = (&[8, 9, 10], &[10, 8]);
    let mut g = Graph::inference(&model.store);
    let mut ctx = Ctx::eval();
    let ab = model.encode_sources(&mut g, &mut ctx, &[a, b]).unwrap();
    let ba = model.encode_sources(&mut g, &mut ctx, &[b, a]).unwrap();
    assert_eq!(g.value(ab[0]), g.value(ba[1]));
    assert_eq!(g.value(ab[1]), g.value(ba[0]));
    let one = model.encode_sources(&mut g, &mut ctx, &[a]).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(g.value(one[0]).shape(), (3, 4));
    assert!(model.encode_sources(&mut g, &mut ctx, &[]).is_err());
}

#[test]
fn multi_source_attention_averages_blocks() {
    let (model, _) = micro_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::inference(&model.store);
    let q = g.input(normal_init(&mut rng, 2, 4, 1.0));
    let k = g.input(normal_init(&mut rng, 3, 4, 1.0));
    let v = g.input(normal_init(&mut rng, 3, 4, 1.0));
    let kv = multisum::seq_model::Kv { k, v };
    let wo = model.params.dec[0].cross.wo;
    let single = model.multi_source_attention(&mut g, q, &[kv], wo);
    let plain = {
        let a = g.attention(q, k, v, 1, false);
        let w = g.param(wo);
        g.matmul(a, w)
    };
    assert_eq!(g.value(single), g.value(plain));
    let triple = model.multi_source_attention(&mut g, q, &[kv, kv, kv], wo);
    assert!(g.value(triple).max_abs_diff(g.value(single)) < 1e-12);
}

#[test]
fn multi_source_attention_hand_oracle() {
    // e_D = 1, one query, two one-token blocks: softmax over a single key is
    // 1, so each block contributes its value; the mean is then projected.
    let v = Vocab::from_parts(vec!["a".into(), "b".into(), "c".into()], vec![]);
    let cfg = ModelConfig { d_model: 1, heads: 1, ..ModelConfig::micro(3, 0) };
    let mut m = Model::new(&cfg, &v, 0).unwrap();
    set(&mut m, "dec.0.cross.wo", Matrix::from_vec(1, 1, vec![3.0]));
    let mut g = Graph::inference(&m.store);
    let q = g.input(Matrix::from_vec(1, 1, vec![0.7]));
    let block = |g: &mut Graph, k: f64, val: f64| multisum::seq_model::Kv {
        k: g.input(Matrix::from_vec(1, 1, vec![k])),
        v: g.input(Matrix::from_vec(1, 1, vec![val])),
    };
    let b1 = block(&mut g, 0.2, 2.0);
    let b2 = block(&mut g, -1.0, -0.5);
    let out = m.multi_source_attention(&mut g, q, &[b1, b2], m.params.dec[0].cross.wo);
    assert!((g.value(out).get(0, 0) - 3.0 * (2.0 - 0.5) / 2.0).abs() < 1e-15);
}

#[test]
fn fusion_gate_formula() {
    let v = Vocab::from_parts(vec!["a".into(), "b".into(), "c".into()], vec![]);
    let cfg = ModelConfig { d_model: 2, heads: 1, ..ModelConfig::micro(3, 0) };
    let mut m = Model::new(&cfg, &v, 0).unwrap();
    // [ma_text; ma_img] = (1, -1, 2, 0); choose W_α so the pre-activation is (0.5, -3).
    set(&mut m, "gate.w_alpha", Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 3.0], vec![0.0, 0.0], vec![0.0, 0.0]]));
    let mut g = Graph::inference(&m.store);
    let t = g.input(Matrix::row_vector(vec![1.0, -1.0]));
    let i = g.input(Matrix::row_vector(vec![2.0, 0.0]));
    let (fused, alpha, beta) = m.fuse_modalities(&mut g, t, Some(i), None);
    assert!(beta.is_none());
    let a = g.value(alpha.unwrap()).row(0).to_vec();
    assert!((a[0] - 0.5f64.tanh()).abs() < 1e-15 && a[1] == 0.0);
    assert!((g.value(fused).get(0, 0) - (1.0 + 2.0 * 0.5f64.tanh())).abs() < 1e-15);
    assert!((g.value(fused).get(0, 0) - 1.9242).abs() < 1e-4);
    assert_eq!(g.value(fused).get(0, 1), -1.0);

    set(&mut m, "gate.w_alpha", Matrix::zeros(4, 2));
    set(&mut m, "gate.w_beta", Matrix::zeros(4, 2));
    let mut g = Graph::inference(&m.store);
    let t = g.input(Matrix::row_vector(vec![1.0, -1.0]));
    let i = g.input(Matrix::row_vector(vec![2.0, -7.0]));
    let tb = g.input(Matrix::row_vector(vec![-3.0, 5.0]));
    let (fused, _, _) = m.fuse_modalities(&mut g, t, Some(i), Some(tb));
    assert_eq!(g.value(fused).row(0), &[1.0, -1.0]);
    let (fused, a, b) = m.fuse_modalities(&mut g, t, None, None);
    assert_eq!(g.value(fused).row(0), &[1.0, -1.0]);
    assert!(a.is_none() && b.is_none());
}

#[test]
fn log_probs_normalized_and_causal() {
    let (model, v) = micro_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs = vec![image(&mut rng)];
    let t = table(&v);
    let srcs: Vec<&[u32]> = vec![&[8, 9], &[10, 8, 8]];
    let inputs = ModalInputs { text: srcs, images: &imgs, table: Some(&t) };
    let a = model.forward_log_probs(&inputs, &[1, 8, 9, 10], 0.5).unwrap();
    let b = model.forward_log_probs(&inputs, &[1, 8, 10, 10], 0.5).unwrap();
    for r in 0..4 {
        let z: f64 = a.row(r).iter().map(|x| x.exp()).sum();
        assert!((z - 1.0).abs() < 1e-6);
    }
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn no_modality_is_an_error() {
    let (model, _) = micro_model(5);
    assert!(model.forward_log_probs(&ModalInputs::default(), &[1], 0.0).is_err());
}

#[test]
fn source_order_invariance() {
    let (model, v) = micro_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let imgs = vec![image(&mut rng), image(&mut rng)];
    let t = table(&v);
    let s: Vec<Vec<u32>> = vec![vec![8, 9], vec![10], vec![9, 9, 8, 10]];
    let fwd = |order: &[usize], img_order: &[usize]| {
        let text: Vec<&[u32]> = order.iter().map(|&i| s[i].as_slice()).collect();
        let images: Vec<RasterImage> = img_order.iter().map(|&i| imgs[i].clone()).collect();
        model.forward_log_probs(&ModalInputs { text, images: &images, table: Some(&t) }, &[1, 10, 8], -0.5).unwrap()
    };
    let a = fwd(&[0, 1, 2], &[0, 1]);
    let b = fwd(&[2, 0, 1], &[1, 0]);
    assert!(a.max_abs_diff(&b) < 1e-8);
}

#[test]
fn gate_zero_equivalence_is_bit_exact() {
    let (mut model, v) = micro_model(7);
    set(&mut model, "gate.w_alpha", Matrix::zeros(8, 4));
    set(&mut model, "gate.w_beta", Matrix::zeros(8, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let imgs = vec![image(&mut rng)];
    let t = table(&v);
    let srcs: Vec<&[u32]> = vec![&[8, 9], &[10]];
    let multi = model.forward_log_probs(&ModalInputs { text: srcs.clone(), images: &imgs, table: Some(&t) }, &[1, 8], 1.0).unwrap();
    let text = model.forward_log_probs(&ModalInputs { text: srcs, images: &[], table: None }, &[1, 8], 1.0).unwrap();
    assert_eq!(multi, text);
}

#[test]
fn gates_lie_in_unit_interval() {
    let (mut model, v) = micro_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    randomize(&mut model, "gate.w_alpha", &mut rng, 2.0);
    randomize(&mut model, "gate.w_beta", &mut rng, 2.0);
    let imgs = vec![image(&mut rng)];
    let t = table(&v);
    let mut g = Graph::inference(&model.store);
    let mut ctx = Ctx::eval();
    let srcs: Vec<&[u32]> = vec![&[8, 9], &[10]];
    let blocks = model.encode_inputs(&mut g, &mut ctx, &ModalInputs { text: srcs, images: &imgs, table: Some(&t) }).unwrap();
    let mem = model.project_memory(&mut g, &blocks);
    let out = model.decode(&mut g, &mut ctx, &mem, &[1, 8, 9, 10], 0.0, false).unwrap();
    let mut positive = 0;
    for node in out.alpha.iter().chain(&out.beta) {
        for &x in g.value(node.unwrap()).data() {
            assert!((0.0..1.0).contains(&x));
            positive += (x > 0.0) as usize;
        }
    }
    assert!(positive > 0);
}

#[test]
fn stage_two_modes_require_one_modality() {
    let (model, v) = micro_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let imgs = vec![image(&mut rng)];
    let t = table(&v);
    let only_img = ModalInputs { text: vec![], images: &imgs, table: None };
    let only_tab = ModalInputs { text: vec![], images: &[], table: Some(&t) };
    let both = ModalInputs { text: vec![], images: &imgs, table: Some(&t) };
    assert!(model.forward_log_probs(&only_img, &[1, 8], 0.0).is_ok());
    assert!(model.forward_log_probs(&only_tab, &[1, 8], 0.0).is_ok());
    assert!(model.forward_log_probs(&both, &[1, 8], 0.0).is_err());
}

#[test]
fn full_gradient_check_micro_config() {
    let (mut model, v) = micro_model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    randomize(&mut model, "gate.w_alpha", &mut rng, 0.7);
    randomize(&mut model, "gate.w_beta", &mut rng, 0.7);
    for name in ["table.b_f", "img.block1.bias", "img.block2.bias", "img.block3.bias"] {
        let id = model.store.id(name).unwrap();
        let (r, c) = model.store.get(id).shape();
        *model.store.get_mut(id) = Matrix::filled(r, c, 0.05);
    }
    let imgs = vec![image(&mut rng)];
    let t = table(&v);
    let srcs: Vec<&[u32]> = vec![&[8, 9, 10], &[10, 8]];
    let net = model.net.clone();
    let mask = ParamMask::all(&model.store);
    let checks = multisum::gradcheck::check_gradients(&mut model.store, &mask, 1e-5, |g| {
        let m = &net;
        let mut ctx = Ctx::eval();
        let blocks = m.encode_inputs(g, &mut ctx, &ModalInputs { text: srcs.clone(), images: &imgs, table: Some(&t) }).unwrap();
        let mem = m.project_memory(g, &blocks);
        let out = m.decode(g, &mut ctx, &mem, &[1, 8, 9], 0.8, false).unwrap();
        g.smoothed_nll(out.logits, &[8, 9, 2], None, 0.1)
    });
    let mut worst = 0.0f64;
    for c in &checks {
        if c.name == "img.block4.kernel" || c.name == "img.block4.bias" {
            assert_eq!(c.analytic_norm, 0.0);
            continue;
        }
        assert!(c.analytic_norm > 0.0, "{} has no gradient", c.name);
        worst = worst.max(c.rel_error);
        assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
    }
    assert!(worst < 1e-4);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let (model, v) = micro_model(11);
    let bytes = checkpoint::encode(model.config(), &model.store);
    let back = Model::from_checkpoint_bytes(&bytes, &v).unwrap();
    assert_eq!(checkpoint::encode(back.config(), &back.store), bytes);
    let (other, _) = micro_model(11);
    assert_eq!(checkpoint::encode(other.config(), &other.store), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = Model::load(&path, &v).unwrap();
    assert_eq!(loaded.store.hash_where(|_| true), model.store.hash_where(|_| true));
    assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 1], &v).is_err());
}

// ---------------------------------------------------------------------------
// Straight-line reimplementation of the text + fused forward pass.

type Rows = Vec<Vec<f64>>;

fn get(m: &Model, name: &str) -> Rows {
    let x = m.store.get(m.store.id(name).unwrap());
    (0..x.rows()).map(|r| x.row(r).to_vec()).collect()
}

fn mm(a: &Rows, b: &Rows) -> Rows {
    a.iter().map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect()).collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &Rows, b: &[f64]) -> Rows {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

fn norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn attend(q: &Rows, k: &Rows, v: &Rows, causal: bool) -> Rows {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let n = if causal { i + 1 } else { k.len() };
            let s: Vec<f64> = (0..n).map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ffn(m: &Model, p: &str, x: &Rows) -> Rows {
    let h = add_bias(&mm(x, &get(m, &format!("{p}.w1"))), &get(m, &format!("{p}.b1"))[0]);
    let h: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add_bias(&mm(&h, &get(m, &format!("{p}.w2"))), &get(m, &format!("{p}.b2"))[0])
}

fn ln_p(m: &Model, p: &str, x: &Rows) -> Rows {
    norm(x, &get(m, &format!("{p}.g"))[0], &get(m, &format!("{p}.b"))[0])
}

fn naive_encode(m: &Model, tokens: &[u32]) -> Rows {
    let tok = get(m, "emb.tok");
    let pos = get(m, "enc.pos");
    let mut x: Rows = tokens.iter().enumerate().map(|(t, &id)| tok[id as usize].iter().zip(&pos[t]).map(|(a, b)| a + b).collect()).collect();
    let h = ln_p(m, "enc.0.ln1", &x);
    let a = attend(&mm(&h, &get(m, "enc.0.attn.wq")), &mm(&h, &get(m, "enc.0.attn.wk")), &mm(&h, &get(m, "enc.0.attn.wv")), false);
    x = add(&x, &mm(&a, &get(m, "enc.0.attn.wo")));
    let h = ln_p(m, "enc.0.ln2", &x);
    x = add(&x, &ffn(m, "enc.0.ffn", &h));
    ln_p(m, "enc.ln", &x)
}

fn naive_decode(m: &Model, text: &[Rows], img: &[Rows], table: &[Rows], tokens: &[u32], sd: f64) -> Rows {
    let tok = get(m, "emb.tok");
    let pos = get(m, "dec.pos");
    let dev = get(m, "dec.dev");
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..tok[0].len()).map(|j| tok[id as usize][j] + sd * dev[0][j] + pos[t][j]).collect())
        .collect();
    let h = ln_p(m, "dec.0.ln1", &x);
    let a = attend(&mm(&h, &get(m, "dec.0.self.wq")), &mm(&h, &get(m, "dec.0.self.wk")), &mm(&h, &get(m, "dec.0.self.wv")), true);
    x = add(&x, &mm(&a, &get(m, "dec.0.self.wo")));
    let h = ln_p(m, "dec.0.ln2", &x);
    let q = mm(&h, &get(m, "dec.0.cross.wq"));
    let ma = |blocks: &[Rows]| -> Rows {
        let outs: Vec<Rows> =
            blocks.iter().map(|b| attend(&q, &mm(b, &get(m, "dec.0.cross.wk")), &mm(b, &get(m, "dec.0.cross.wv")), false)).collect();
        let mut avg = outs[0].clone();
        for o in &outs[1..] {
            avg = add(&avg, o);
        }
        let avg: Rows = avg.iter().map(|r| r.iter().map(|v| v / outs.len() as f64).collect()).collect();
        mm(&avg, &get(m, "dec.0.cross.wo"))
    };
    let t = ma(text);
    let mut fused = t.clone();
    for (blocks, w) in [(img, "gate.w_alpha"), (table, "gate.w_beta")] {
        if blocks.is_empty() {
            continue;
        }
        let o = ma(blocks);
        let cat: Rows = t.iter().zip(&o).map(|(a, b)| a.iter().chain(b).cloned().collect()).collect();
        let gate: Rows = mm(&cat, &get(m, w)).iter().map(|r| r.iter().map(|v| v.tanh().max(0.0)).collect()).collect();
        for i in 0..fused.len() {
            for j in 0..fused[0].len() {
                fused[i][j] += gate[i][j] * o[i][j];
            }
        }
    }
    x = add(&x, &fused);
    let h = ln_p(m, "dec.0.ln3", &x);
    x = add(&x, &ffn(m, "dec.0.ffn", &h));
    let x = ln_p(m, "dec.ln", &x);
    let logits: Rows = x.iter().map(|r| tok.iter().map(|e| r.iter().zip(e).map(|(a, b)| a * b).sum()).collect()).collect();
    logits
        .iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            r.iter().map(|v| v - lse).collect()
        })
        .collect()
}

#[test]
fn straight_line_oracle_matches_micro_model() {
    let v = Vocab::from_parts(vec!["a".into(), "b".into(), "c".into()], vec![]);
    let cfg = ModelConfig { d_model: 2, heads: 1, ..ModelConfig::micro(3, 0) };
    let mut m = Model::new(&cfg, &v, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for name in ["gate.w_alpha", "gate.w_beta", "dec.0.ln2.g", "enc.0.ffn.b1", "dec.0.ffn.b2"] {
        randomize(&mut m, name, &mut rng, 1.0);
    }
    let srcs: [&[u32]; 2] = [&[0, 2, 1], &[2, 2]];
    let mut g = Graph::inference(&m.store);
    let mut ctx = Ctx::eval();
    let imgs = vec![image(&mut rng)];
    let img_blocks = m.encode_images(&mut g, &imgs).unwrap();
    let tab = g.input(normal_init(&mut rng, 2, 2, 1.0));
    let text_blocks = m.encode_sources(&mut g, &mut ctx, &srcs).unwrap();
    for (b, s) in text_blocks.iter().zip(srcs) {
        let naive = naive_encode(&m, s);
        for (r, row) in naive.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                assert!((g.value(*b).get(r, j) - x).abs() < 1e-10);
            }
        }
    }
    let blocks = multisum::seq_model::EncodedBlocks { text: text_blocks.clone(), image: img_blocks.clone(), table: Some(tab) };
    let mem = m.project_memory(&mut g, &blocks);
    let tokens = [1, 0, 2, 2];
    let out = m.decode(&mut g, &mut ctx, &mem, &tokens, -1.25, false).unwrap();
    let lp = multisum::tensor::log_softmax_rows(g.value(out.logits));
    let rows = |n| {
        let v: &Matrix = g.value(n);
        (0..v.rows()).map(|r| v.row(r).to_vec()).collect::<Rows>()
    };
    let text: Vec<Rows> = text_blocks.iter().map(|&b| rows(b)).collect();
    let img: Vec<Rows> = img_blocks.iter().map(|&b| rows(b)).collect();
    let naive = naive_decode(&m, &text, &img, &[rows(tab)], &tokens, -1.25);
    for (r, row) in naive.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            assert!((lp.get(r, j) - x).abs() < 1e-10, "row {r} col {j}: {} vs {x}", lp.get(r, j));
        }
    }
}
