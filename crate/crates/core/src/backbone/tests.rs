use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{check_gradients, AdamW};
use crate::geometry::{gen_shape, group, FpsStart, ShapeKind};

struct Tiny {
    store: ParamStore,
    embed: PatchEmbedder,
    enc: Encoder,
    head: Linear,
}

fn tiny(c: usize, depth: usize, heads: usize, mode: PosMode, seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let embed = PatchEmbedder::new(&mut store, "m.embed", c, &mut rng).unwrap();
    let stack = TransformerStack::new(&mut store, "m.stack", StackConfig::new(c, depth, heads), &mut rng).unwrap();
    let enc = Encoder::new(&mut store, "m", stack, mode, &mut rng).unwrap();
    let head = Linear::new(&mut store, "m.head", c, c, Init::FanIn, &mut rng).unwrap();
    Tiny {
        store,
        embed,
        enc,
        head,
    }
}

fn rand_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn encode_tokens(m: &Tiny, tokens: &Tensor<f32>, cents: &Tensor<f32>, batch: usize, prompts: Option<&PromptBank>) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let t = g.constant(tokens.clone());
    let (h, _) = m.enc.encode(&mut g, &m.store, t, cents, batch, prompts, &mut Pass::Eval).unwrap();
    g.value(h).data().to_vec()
}

#[test]
fn patch_embedding_ignores_point_order() {
    let m = tiny(8, 1, 2, PosMode::Xyz, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let neigh: Tensor<f32> = rand_tensor(&mut rng, &[2 * 5, 3]);
    let run = |t: &Tensor<f32>| {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t.clone());
        let y = m.embed.forward(&mut g, &m.store, x, 5).unwrap();
        g.value(y).data().to_vec()
    };
    let base = run(&neigh);
    let order = [3, 0, 4, 1, 2, 5, 6, 7, 8, 9];
    let shuffled: Vec<f32> = order.iter().flat_map(|&r| neigh.row(r).to_vec()).collect();
    assert_eq!(run(&Tensor::new([10, 3], shuffled).unwrap()), base);

    // duplicated neighborhoods give duplicated tokens
    let dup: Vec<f32> = (0..5).chain(0..5).flat_map(|r| neigh.row(r).to_vec()).collect();
    let d = run(&Tensor::new([10, 3], dup).unwrap());
    assert_eq!(d[..8], d[8..]);
    assert_eq!(d[..8], base[..8]);
}

#[test]
fn single_point_patch_is_the_mlp_of_that_point() {
    let m = tiny(8, 1, 2, PosMode::Xyz, 1);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([1, 3], vec![0.1, -0.2, 0.3]).unwrap());
    let pooled = m.embed.forward(&mut g, &m.store, x, 1).unwrap();
    let direct = m.embed.mlp.forward(&mut g, &m.store, x).unwrap();
    assert_eq!(g.value(pooled).data(), g.value(direct).data());
}

#[test]
fn zero_residual_branches_pass_input_through() {
    let mut m = tiny(8, 2, 2, PosMode::Xyz, 3);
    for b in &m.enc.stack.blocks {
        for lin in [&b.proj, &b.fc2] {
            for suffix in ["w", "b"] {
                let p = m.store.get_mut(&format!("{}.{suffix}", lin.name)).unwrap();
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens: Tensor<f32> = rand_tensor(&mut rng, &[3, 8]);
    let cents: Tensor<f32> = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::<f32>::new();
    let t = g.constant(tokens.clone());
    let (h, pos) = m.enc.encode(&mut g, &m.store, t, &cents, 1, None, &mut Pass::Eval).unwrap();
    let cls = m.store.get(&m.enc.cls_token).unwrap().data.clone();
    let mut expected = Vec::new();
    for r in 0..4 {
        let src = if r == 0 { &cls[..] } else { tokens.row(r - 1) };
        expected.extend(src.iter().zip(g.value(pos).row(r)).map(|(a, b)| a + b));
    }
    assert_eq!(g.value(h).data(), &expected[..]);
}

#[test]
fn permuting_tokens_permutes_outputs() {
    let m = tiny(8, 2, 2, PosMode::Xyz, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens: Tensor<f32> = rand_tensor(&mut rng, &[4, 8]);
    let cents: Tensor<f32> = rand_tensor(&mut rng, &[4, 3]);
    let perm = [2, 0, 3, 1];
    let pt: Vec<f32> = perm.iter().flat_map(|&r| tokens.row(r).to_vec()).collect();
    let pc: Vec<f32> = perm.iter().flat_map(|&r| cents.row(r).to_vec()).collect();
    let a = encode_tokens(&m, &tokens, &cents, 1, None);
    let b = encode_tokens(&m, &Tensor::new([4, 8], pt).unwrap(), &Tensor::new([4, 3], pc).unwrap(), 1, None);
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..8 {
            assert!((b[(i + 1) * 8 + k] - a[(p + 1) * 8 + k]).abs() < 1e-5);
        }
    }
    for k in 0..8 {
        assert!((b[k] - a[k]).abs() < 1e-5, "class token changed");
    }
}

#[test]
fn empty_prompt_bank_is_the_plain_path() {
    let mut m = tiny(8, 2, 2, PosMode::Xyz, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bank = PromptBank::new(&mut m.store, "m.prompts", PromptKind::Deep, 0, 8, 2, &mut rng).unwrap();
    let tokens: Tensor<f32> = rand_tensor(&mut rng, &[6, 8]);
    let cents: Tensor<f32> = rand_tensor(&mut rng, &[6, 3]);
    assert_eq!(
        encode_tokens(&m, &tokens, &cents, 2, Some(&bank)),
        encode_tokens(&m, &tokens, &cents, 2, None)
    );
}

#[test]
fn shallow_prompts_are_returned_deep_prompts_dropped() {
    let mut m = tiny(8, 2, 2, PosMode::Xyz, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let deep = PromptBank::new(&mut m.store, "m.deep", PromptKind::Deep, 3, 8, 2, &mut rng).unwrap();
    let shallow = PromptBank::new(&mut m.store, "m.shallow", PromptKind::Shallow, 3, 8, 2, &mut rng).unwrap();
    assert_eq!(deep.names.len(), 2);
    assert_eq!(shallow.names.len(), 1);
    let tokens: Tensor<f32> = rand_tensor(&mut rng, &[4, 8]);
    let cents: Tensor<f32> = rand_tensor(&mut rng, &[4, 3]);
    let plain = encode_tokens(&m, &tokens, &cents, 2, None);
    let d = encode_tokens(&m, &tokens, &cents, 2, Some(&deep));
    let s = encode_tokens(&m, &tokens, &cents, 2, Some(&shallow));
    assert_eq!(d.len(), plain.len());
    assert_ne!(d, plain);
    assert_eq!(s.len(), 2 * (3 + 3) * 8);
}

#[test]
fn translation_invariance_depends_on_positional_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens: Tensor<f32> = rand_tensor(&mut rng, &[4, 8]);
    let cents: Tensor<f32> = rand_tensor(&mut rng, &[4, 3]);
    let shifted = Tensor::new([4, 3], cents.data().iter().map(|v| v + 0.5).collect()).unwrap();
    let none = tiny(8, 2, 2, PosMode::None, 10);
    assert_eq!(
        encode_tokens(&none, &tokens, &cents, 1, None),
        encode_tokens(&none, &tokens, &shifted, 1, None)
    );
    let xyz = tiny(8, 2, 2, PosMode::Xyz, 10);
    assert_ne!(
        encode_tokens(&xyz, &tokens, &cents, 1, None),
        encode_tokens(&xyz, &tokens, &shifted, 1, None)
    );
    // 2d-xy ignores a pure z shift
    let xy = tiny(8, 2, 2, PosMode::Xy, 10);
    let zshift = Tensor::new([4, 3], cents.data().chunks(3).flat_map(|p| [p[0], p[1], p[2] + 1.0]).collect()).unwrap();
    assert_eq!(
        encode_tokens(&xy, &tokens, &cents, 1, None),
        encode_tokens(&xy, &tokens, &zshift, 1, None)
    );
}

fn patch_batch(seed: u64) -> Vec<crate::geometry::PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [ShapeKind::Torus, ShapeKind::Cone]
        .iter()
        .map(|&k| {
            let pc = gen_shape(k, 64, &mut rng).unwrap();
            group(&pc, 4, 8, FpsStart::FirstIndex).unwrap()
        })
        .collect()
}

fn prompted_loss<T: Real>(m: &Tiny, bank: &PromptBank, g: &mut Graph<T>, patches: &[&crate::geometry::PatchSet]) -> Var {
    let (neigh, cents) = patch_tensors::<T>(patches).unwrap();
    let n = g.constant(neigh);
    let tok = m.embed.forward(g, &m.store, n, 8).unwrap();
    let (h, _) = m.enc.encode(g, &m.store, tok, &cents, patches.len(), Some(bank), &mut Pass::Eval).unwrap();
    let h = m.enc.stack.final_norm(g, &m.store, h).unwrap();
    let y = m.head.forward(g, &m.store, h).unwrap();
    let y2 = g.mul(y, y).unwrap();
    g.mean(y2)
}

#[test]
fn frozen_stack_routes_gradients_to_prompts_and_adapters_only() {
    let mut m = tiny(8, 2, 2, PosMode::Xyz, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bank = PromptBank::new(&mut m.store, "m.prompts", PromptKind::Deep, 2, 8, 2, &mut rng).unwrap();
    m.store.freeze(&m.enc.stack.selector()).unwrap();
    let ps = patch_batch(13);
    let refs: Vec<_> = ps.iter().collect();
    let mut g = Graph::<f32>::new();
    let l = prompted_loss(&m, &bank, &mut g, &refs);
    g.backward(l).unwrap();
    let with_grad: Vec<String> = g.param_grads().into_iter().map(|(n, _)| n).collect();
    for (name, p) in m.store.iter() {
        let has = with_grad.iter().any(|n| n == name);
        assert_eq!(has, !p.frozen, "{name}");
        if name.starts_with("m.stack") {
            assert!(p.frozen && !has, "{name}");
        }
    }
    for want in ["m.prompts.0", "m.prompts.1", "m.pos.fc1.w", "m.embed.fc1.w", "m.head.w", "m.cls_token"] {
        assert!(with_grad.iter().any(|n| n == want), "{want}");
    }
}

#[test]
fn tiny_stack_matches_finite_differences() {
    let mut m = tiny(16, 2, 2, PosMode::Xyz, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let bank = PromptBank::new(&mut m.store, "m.prompts", PromptKind::Deep, 2, 16, 2, &mut rng).unwrap();
    let cents: Tensor<f64> = rand_tensor(&mut rng, &[4, 3]);
    let tokens: Tensor<f64> = rand_tensor(&mut rng, &[4, 16]);
    let loss = |g: &mut Graph<f64>, store: &ParamStore, t: Var| -> crate::Result<Var> {
        let (h, _) = m.enc.encode(g, store, t, &cents, 1, Some(&bank), &mut Pass::Eval)?;
        let h = m.enc.stack.final_norm(g, store, h)?;
        let y = m.head.forward(g, store, h)?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    };
    let r = check_gradients(&[tokens.clone()], 1e-4, |g, v| loss(g, &m.store, v[0])).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");

    // parameter gradients, differencing the actual stored f32 perturbation
    let mut g = Graph::<f64>::new();
    let t = g.constant(tokens.clone());
    let l = loss(&mut g, &m.store, t).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads();
    let eval = |store: &ParamStore| {
        let mut g = Graph::<f64>::new();
        let t = g.constant(tokens.clone());
        let l = loss(&mut g, store, t).unwrap();
        g.value(l).item()
    };
    for name in ["m.stack.blocks.0.attn.qkv.w", "m.stack.blocks.1.mlp.fc1.w", "m.prompts.1", "m.pos.fc2.w", "m.stack.norm.gain"] {
        let analytic = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        for idx in [0, 5, 13] {
            let orig = m.store.get(name).unwrap().data[idx];
            let h = 1e-3f32;
            m.store.get_mut(name).unwrap().data[idx] = orig + h;
            let up = m.store.get(name).unwrap().data[idx] as f64;
            let fu = eval(&m.store);
            m.store.get_mut(name).unwrap().data[idx] = orig - h;
            let dn = m.store.get(name).unwrap().data[idx] as f64;
            let fd = eval(&m.store);
            m.store.get_mut(name).unwrap().data[idx] = orig;
            let numeric = (fu - fd) / (up - dn);
            let a = analytic[idx] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-3, "{name}[{idx}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn freeze_contract_over_training() {
    let mut m = tiny(8, 2, 2, PosMode::Xyz, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let bank = PromptBank::new(&mut m.store, "m.prompts", PromptKind::Deep, 2, 8, 2, &mut rng).unwrap();
    m.store.freeze("m.stack.blocks.*").unwrap();
    let before: Vec<_> = m.store.iter().filter(|(n, _)| n.starts_with("m.stack.blocks")).map(|(n, p)| (n.to_string(), p.data.clone())).collect();
    let ps = patch_batch(18);
    let refs: Vec<_> = ps.iter().collect();
    let mut opt = AdamW::new(0.05);
    for _ in 0..100 {
        let mut g = Graph::<f32>::new();
        let l = prompted_loss(&m, &bank, &mut g, &refs);
        g.backward(l).unwrap();
        opt.step(&mut m.store, &g.param_grads(), 1e-3).unwrap();
    }
    for (n, data) in &before {
        assert_eq!(&m.store.get(n).unwrap().data, data, "{n}");
    }
    assert!(m.store.get("m.stack.blocks.0.ln1.gain").unwrap().frozen);
    m.store.thaw("m.stack.blocks.*").unwrap();
    assert!(!m.store.get("m.stack.blocks.0.ln1.gain").unwrap().frozen);
    assert!(m.store.freeze("m.stak.*").is_err());

    // everything frozen: the loss never moves
    m.store.freeze("*").unwrap();
    let mut losses = Vec::new();
    for _ in 0..3 {
        let mut g = Graph::<f32>::new();
        let l = prompted_loss(&m, &bank, &mut g, &refs);
        losses.push(g.value(l).item());
        g.backward(l).unwrap();
        opt.step(&mut m.store, &g.param_grads(), 1e-3).unwrap();
    }
    assert!(losses.iter().all(|&l| l == losses[0]));
}

#[test]
fn drop_path_only_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    let cfg = StackConfig {
        drop_path: 0.5,
        ..StackConfig::new(8, 3, 2)
    };
    let stack = TransformerStack::new(&mut store, "s", cfg, &mut rng).unwrap();
    assert_eq!(stack.blocks[0].drop_path, 0.0);
    assert_eq!(stack.blocks[2].drop_path, 0.5);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[6, 8]);
    let run = |pass: &mut Pass| {
        let mut g = Graph::<f32>::new();
        let h = g.constant(x.clone());
        let p = g.constant(Tensor::zeros([6, 8]).unwrap());
        let y = stack.forward(&mut g, &store, h, p, 2, None, pass).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(&mut Pass::Eval), run(&mut Pass::Eval));
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let trained: Vec<Vec<f32>> = (0..4).map(|_| run(&mut Pass::Train(&mut r))).collect();
    assert!(trained.iter().any(|t| *t != run(&mut Pass::Eval)));
}

#[test]
fn surrogate_foundation_is_deterministic_and_learns() {
    let cfg = FoundationConfig {
        stack: StackConfig::new(16, 2, 2),
        steps: 60,
        batch: 8,
        lr: 2e-3,
        seed: 3,
    };
    let a = make_surrogate_foundation(&cfg).unwrap();
    let b = make_surrogate_foundation(&cfg).unwrap();
    assert_eq!(a.store, b.store);
    assert!(a.final_loss < a.initial_loss, "{} -> {}", a.initial_loss, a.final_loss);
    assert!(a.store.names().all(|n| n.starts_with("blocks.") || n.starts_with("norm.")));
    assert_eq!(a.stack.renamed("x.g2d").blocks[1].qkv.name, "x.g2d.blocks.1.attn.qkv");
}

#[test]
fn textures_stay_in_unit_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for kind in [Texture::Checker, Texture::Stripes, Texture::Blobs] {
        let img = render_texture(kind, &mut rng);
        assert_eq!(img.len(), 256);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn token_neighbors_include_self_first() {
    let cs = [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
    let nb = token_neighbors(&[&cs[..], &cs[..]], 2);
    assert_eq!(nb, vec![0, 1, 1, 0, 2, 1, 3, 4, 4, 3, 5, 4]);
}
