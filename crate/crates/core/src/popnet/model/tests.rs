use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::standard_normal;
use crate::popnet::attention::{masked_attention, space_augment};

const MUSIC_W: usize = 6;

fn rand(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols)
}

fn tiny() -> AttentionConfig {
    AttentionConfig::tiny(MUSIC_W)
}

fn live(cfg: AttentionConfig) -> PopDg {
    PopDg::new(AttentionConfig { zero_init_heads: false, ..cfg }, 11).unwrap()
}

fn param(m: &PopDg, name: &str) -> Array2<f64> {
    m.params().get(m.params().find(name).unwrap()).clone()
}

fn softmax_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    a
}

/// Two-loop multi-head attention with an optional hook on each head's map.
fn oracle(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    mask: Option<&Array2<f64>>,
    hook: &dyn Fn(Array2<f64>) -> Array2<f64>,
) -> Array2<f64> {
    let c = q.ncols();
    let d = c / heads;
    let mut out = Array2::zeros((q.nrows(), c));
    for h in 0..heads {
        let mut scores = Array2::zeros((q.nrows(), k.nrows()));
        for i in 0..q.nrows() {
            for j in 0..k.nrows() {
                let mut dot = 0.0;
                for x in h * d..(h + 1) * d {
                    dot += q[[i, x]] * k[[j, x]];
                }
                if let Some(m) = mask {
                    dot += m[[i, j]];
                }
                scores[[i, j]] = dot / (d as f64).sqrt();
            }
        }
        let p = hook(softmax_rows(scores));
        for i in 0..q.nrows() {
            for j in 0..k.nrows() {
                for x in h * d..(h + 1) * d {
                    out[[i, x]] += p[[i, j]] * v[[j, x]];
                }
            }
        }
    }
    out
}

fn linear(m: &PopDg, name: &str, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&param(m, &format!("{name}.w"))) + param(m, &format!("{name}.b"))
}

fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
    assert_eq!(a.dim(), b.dim());
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn run<F: FnOnce(&mut Graph) -> Var>(m: &PopDg, f: F) -> Array2<f64> {
    let mut g = Graph::new(m.params());
    let v = f(&mut g);
    g.tape.value(v).clone()
}

#[test]
fn output_shapes() {
    for per_frame in [false, true] {
        let m = live(AttentionConfig { v_per_frame: per_frame, ..tiny() });
        for n in [8, 150] {
            let out = m.predict(rand(n, POSE_DIM, 1).view(), 5, rand(n, MUSIC_W, 2).view()).unwrap();
            assert_eq!(out.x_hat.dim(), (n, POSE_DIM));
            assert_eq!(out.v.dim(), (n, if per_frame { 1 } else { POSE_DIM }));
            assert!(out.v.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn zero_initialized_heads() {
    let m = PopDg::new(tiny(), 0).unwrap();
    let out = m.predict(rand(8, POSE_DIM, 1).view(), 30, rand(8, MUSIC_W, 2).view()).unwrap();
    assert!(out.x_hat.iter().all(|&x| x == 0.0));
    assert!(out.v.iter().all(|&v| v == 0.5));
}

#[test]
fn music_conditioning_is_live() {
    let m = live(tiny());
    let z = rand(8, POSE_DIM, 1);
    let music = rand(8, MUSIC_W, 2);
    let mut permuted = music.clone();
    for i in 0..8 {
        permuted.row_mut(i).assign(&music.row((i + 3) % 8));
    }
    let a = m.predict(z.view(), 10, music.view()).unwrap();
    let b = m.predict(z.view(), 10, permuted.view()).unwrap();
    let diff = (&a.x_hat - &b.x_hat).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
    assert!(diff > 1e-6, "max-abs difference {diff}");
}

#[test]
fn forward_errors_name_the_stage() {
    let m = live(tiny());
    let err = m.predict(rand(8, 150, 1).view(), 1, rand(8, MUSIC_W, 2).view()).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "input"));
    let err = m.predict(rand(8, POSE_DIM, 1).view(), 1, rand(7, MUSIC_W, 2).view()).unwrap_err();
    assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::Alignment { .. })));
    let err = m.predict(rand(8, POSE_DIM, 1).view(), 1, rand(8, MUSIC_W + 1, 2).view()).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "music encoder"));
}

#[test]
fn training_mask_is_seeded_and_only_active_in_training() {
    let z = rand(10, POSE_DIM, 1);
    let music = rand(10, MUSIC_W, 2);
    let m = live(AttentionConfig { mask_ratio: 0.3, ..tiny() });
    let eval = m.forward(z.view(), 4, music.view(), Mode::Eval).unwrap();
    let a = m.forward(z.view(), 4, music.view(), Mode::Train { mask_seed: 7 }).unwrap();
    let b = m.forward(z.view(), 4, music.view(), Mode::Train { mask_seed: 7 }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, eval);
    assert_eq!(m.predict(z.view(), 4, music.view()).unwrap(), eval);

    let m0 = live(AttentionConfig { mask_ratio: 0.0, ..tiny() });
    let eval = m0.forward(z.view(), 4, music.view(), Mode::Eval).unwrap();
    let train = m0.forward(z.view(), 4, music.view(), Mode::Train { mask_seed: 7 }).unwrap();
    assert_eq!(eval, train);
}

#[test]
fn frame_mask_counts() {
    assert!(frame_mask(10, 0.0, 1).is_none());
    assert!(frame_mask(1, 0.9, 1).is_none());
    let m = frame_mask(10, 0.3, 1).unwrap();
    let masked: Vec<usize> = (0..10).filter(|&j| m[[0, j]] == MASK_NEG).collect();
    assert_eq!(masked.len(), 3);
    for j in 0..10 {
        let col = m.column(j);
        assert!(col.iter().all(|&x| x == col[0]));
    }
    // never hides every frame
    let m = frame_mask(4, 0.95, 3).unwrap();
    assert_eq!((0..4).filter(|&j| m[[0, j]] == MASK_NEG).count(), 3);
}

#[test]
fn tokenize_layout() {
    let m = live(tiny());
    let c = m.config().token_width;
    let z = rand(3, POSE_DIM, 4);
    let tokens = run(&m, |g| {
        let v = g.tape.leaf(z.clone());
        m.tokenize(g, v)
    });
    assert_eq!(tokens.dim(), (3, NUM_TOKENS * c));
    let pos = param(&m, "tokens.position");
    // joint j is token j + 1 and only sees its own six channels
    let j = 7;
    let rot = z.slice(s![.., ROT_OFFSET + 6 * j..ROT_OFFSET + 6 * j + 6]).to_owned();
    let want = linear(&m, "tokens.joint", &rot) + pos.slice(s![.., (j + 1) * c..(j + 2) * c]);
    assert_close(&tokens.slice(s![.., (j + 1) * c..(j + 2) * c]).to_owned(), &want, 1e-12);
    let contacts = z.slice(s![.., CONTACT_OFFSET..]).to_owned();
    let want = linear(&m, "tokens.contact", &contacts) + pos.slice(s![.., 25 * c..]);
    assert_close(&tokens.slice(s![.., 25 * c..]).to_owned(), &want, 1e-12);
}

#[test]
fn ds_attention_shapes() {
    let m = live(tiny());
    let c = m.config().token_width;
    for n in [1, 8, 150] {
        let x = rand(n * NUM_TOKENS, c, n as u64);
        let out = run(&m, |g| {
            let v = g.tape.leaf(x.clone());
            m.ds_attention(g, 0, v)
        });
        assert_eq!(out.dim(), x.dim());
    }
}

fn stub_identity_projections(m: &mut PopDg, prefix: &str, width: usize) {
    for p in ["q", "k", "v", "o"] {
        m.set_param(&format!("{prefix}.{p}.w"), Array2::eye(width));
        m.set_param(&format!("{prefix}.{p}.b"), Array2::zeros((1, width)));
    }
}

#[test]
fn ds_attention_matches_augmented_oracle() {
    for halve in [true, false] {
        let mut m = live(AttentionConfig { halve_after_enhance: halve, ..tiny() });
        let c = m.config().token_width;
        stub_identity_projections(&mut m, "dance.0.ds", c);
        let x = rand(NUM_TOKENS, c, 5);
        let got = run(&m, |g| {
            let v = g.tape.leaf(x.clone());
            m.ds_attention(g, 0, v)
        });
        let hook = |p: Array2<f64>| {
            let mut p = p;
            let joints = p.slice(s![1..25, 1..25]).to_owned();
            p.slice_mut(s![1..25, 1..25]).assign(&space_augment(&joints, halve).unwrap());
            if !halve {
                for mut row in p.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|x| x / s);
                }
            }
            p
        };
        let want = oracle(&x, &x, &x, m.config().heads, None, &hook);
        assert_close(&got, &want, 1e-9);
    }
}

#[test]
fn ds_attention_without_augmentation_is_plain_attention() {
    let m = live(AttentionConfig { space_augment: false, ..tiny() });
    let c = m.config().token_width;
    let x = rand(2 * NUM_TOKENS, c, 6);
    let got = run(&m, |g| {
        let v = g.tape.leaf(x.clone());
        m.ds_attention(g, 0, v)
    });
    // projection biases start at zero, so the bias-free helper applies
    let w = |p: &str| param(&m, &format!("dance.0.ds.{p}.w"));
    for f in 0..2 {
        let frame = x.slice(s![f * NUM_TOKENS..(f + 1) * NUM_TOKENS, ..]).to_owned();
        let want = masked_attention(&frame, &frame, &w("q"), &w("k"), &w("v"), &w("o"), m.config().heads, None).unwrap();
        let got_f = got.slice(s![f * NUM_TOKENS..(f + 1) * NUM_TOKENS, ..]).to_owned();
        assert_close(&got_f, &want, 1e-12);
    }
}

fn pe(n: usize, h: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, h), |(i, c)| {
        let k = c / 2;
        let a = i as f64 / 10000f64.powf(2.0 * k as f64 / h as f64);
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[test]
fn dt_attention_matches_oracle() {
    let m = live(tiny());
    let h = m.config().hidden;
    for n in [1, 8, 150] {
        let x = rand(n, h, 8);
        let got = run(&m, |g| {
            let v = g.tape.leaf(x.clone());
            m.dt_attention(g, 0, v, None)
        });
        assert_eq!(got.dim(), (n, h));
        if n <= 8 {
            let qk = &x + &pe(n, h);
            let q = linear(&m, "dance.0.dt.q", &qk);
            let k = linear(&m, "dance.0.dt.k", &qk);
            let v = linear(&m, "dance.0.dt.v", &x);
            let ctx = oracle(&q, &k, &v, m.config().heads, None, &|p| p);
            assert_close(&got, &linear(&m, "dance.0.dt.o", &ctx), 1e-9);
        }
    }
    // explicit mask
    let n = 6;
    let x = rand(n, h, 9);
    let mask = frame_mask(n, 0.5, 2).unwrap();
    let got = run(&m, |g| {
        let v = g.tape.leaf(x.clone());
        m.dt_attention(g, 0, v, Some(mask.clone()))
    });
    let qk = &x + &pe(n, h);
    let ctx = oracle(
        &linear(&m, "dance.0.dt.q", &qk),
        &linear(&m, "dance.0.dt.k", &qk),
        &linear(&m, "dance.0.dt.v", &x),
        m.config().heads,
        Some(&mask),
        &|p| p,
    );
    assert_close(&got, &linear(&m, "dance.0.dt.o", &ctx), 1e-9);
}

#[test]
fn music_attention_matches_oracles() {
    let m = live(tiny());
    let cfg = m.config().clone();
    let (h, f, cf) = (cfg.hidden, cfg.music_tokens, cfg.music_token_width);
    for n in [1, 5] {
        let x = rand(n, h, 10);
        let mt = run(&m, |g| {
            let v = g.tape.leaf(x.clone());
            m.mt_attention(g, 0, v)
        });
        let qk = &x + &pe(n, h);
        let ctx = oracle(
            &linear(&m, "music.0.mt.q", &qk),
            &linear(&m, "music.0.mt.k", &qk),
            &linear(&m, "music.0.mt.v", &x),
            cfg.heads,
            None,
            &|p| p,
        );
        assert_close(&mt, &linear(&m, "music.0.mt.o", &ctx), 1e-9);

        let mf = run(&m, |g| {
            let v = g.tape.leaf(x.clone());
            m.mf_attention(g, 0, v)
        });
        assert_eq!(mf.dim(), (n, h));
        for i in 0..n {
            let tokens = x.row(i).to_owned().into_shape_with_order((f, cf)).unwrap();
            let ctx = oracle(
                &linear(&m, "music.0.mf.q", &tokens),
                &linear(&m, "music.0.mf.k", &tokens),
                &linear(&m, "music.0.mf.v", &tokens),
                cfg.heads,
                None,
                &|p| p,
            );
            let want = linear(&m, "music.0.mf.o", &ctx).into_shape_with_order((1, h)).unwrap();
            assert_close(&mf.slice(s![i..i + 1, ..]).to_owned(), &want, 1e-9);
        }
    }
    let bad = AttentionConfig { music_tokens: 3, ..tiny() };
    assert!(matches!(PopDg::new(bad, 0), Err(Error::Config { .. })));
}

fn film_stub(m: &mut PopDg, gamma: f64, beta: f64) {
    let h = m.config().hidden;
    let mlp = m.config().mlp;
    m.set_param("dance.0.align.film.w", Array2::zeros((mlp, 2 * h)));
    let mut b = Array2::from_elem((1, 2 * h), beta);
    b.slice_mut(s![.., ..h]).fill(gamma);
    m.set_param("dance.0.align.film.b", b);
}

fn align(m: &PopDg, dance: &Array2<f64>, music: &Array2<f64>, t: usize) -> Array2<f64> {
    run(m, |g| {
        let d = g.tape.leaf(dance.clone());
        let mu = g.tape.leaf(music.clone());
        m.alignment_module(g, 0, d, mu, t).unwrap()
    })
}

#[test]
fn alignment_identity_and_saturation() {
    let mut m = live(tiny());
    let h = m.config().hidden;
    let (dance, music) = (rand(7, h, 1), rand(7, h, 2));
    film_stub(&mut m, 1.0, 0.0);
    assert_eq!(align(&m, &dance, &music, 3), dance);

    film_stub(&mut m, 0.0, 0.7);
    let a = align(&m, &dance, &music, 3);
    let b = align(&m, &rand(7, h, 99), &music, 3);
    assert_eq!(a, b);
    assert!(a.iter().all(|&x| x == 0.7));

    let mut g = Graph::new(m.params());
    let d = g.tape.leaf(rand(7, h, 1));
    let mu = g.tape.leaf(rand(6, h, 2));
    assert!(matches!(m.alignment_module(&mut g, 0, d, mu, 3), Err(Error::Alignment { .. })));
}

#[test]
fn alignment_gradient_wrt_gamma_is_dance() {
    let m = live(tiny());
    let h = m.config().hidden;
    let (dance, music) = (rand(5, h, 3), rand(5, h, 4));
    let name = "dance.0.align.film.b";
    let eps = 1e-6;
    for c in [0, 5, h - 1] {
        let bumped = |d: f64| {
            let mut mm = m.clone();
            let mut b = param(&m, name);
            b[[0, c]] += d;
            mm.set_param(name, b);
            align(&mm, &dance, &music, 9)
        };
        let fd = (bumped(eps) - bumped(-eps)) / (2.0 * eps);
        for i in 0..5 {
            assert!((fd[[i, c]] - dance[[i, c]]).abs() < 1e-7);
        }
    }
    // the tape agrees: d sum(out) / d gamma_bias[c] = sum_i dance[i, c]
    let mut g = Graph::new(m.params());
    let d = g.tape.leaf(dance.clone());
    let mu = g.tape.leaf(music.clone());
    let out = m.alignment_module(&mut g, 0, d, mu, 9).unwrap();
    let loss = g.tape.mean(out);
    let grads = g.tape.backward(loss);
    let id = m.params().find(name).unwrap();
    let gb = &g.param_grads(&grads)[id.0];
    for c in 0..h {
        let want = dance.column(c).sum() / (5 * h) as f64;
        assert!((gb[[0, c]] - want).abs() < 1e-12);
    }
}

#[test]
fn sinusoidal_embedding_values() {
    let e = sinusoidal_embedding(0.0, 6);
    assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let e = sinusoidal_embedding(2.0, 4);
    assert!((e[0] - 2f64.sin()).abs() < 1e-15);
    assert!((e[3] - (2.0 / 100.0f64).cos()).abs() < 1e-15);
}

#[test]
fn block_order_changes_the_function() {
    let z = rand(6, POSE_DIM, 1);
    let music = rand(6, MUSIC_W, 2);
    let a = live(tiny()).predict(z.view(), 3, music.view()).unwrap();
    let b = live(AttentionConfig { block_order: BlockOrder::TemporalFirst, ..tiny() })
        .predict(z.view(), 3, music.view())
        .unwrap();
    assert_ne!(a.x_hat, b.x_hat);
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let m = live(tiny());
    let n = 8;
    let z = rand(n, POSE_DIM, 1);
    let music = rand(n, MUSIC_W, 2);
    let wx = rand(n, POSE_DIM, 3);
    let wv = rand(n, POSE_DIM, 4);
    let objective = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let (x, v) = m.forward_graph(&mut g, z.view(), 17, music.view(), Mode::Train { mask_seed: 5 }).unwrap();
        let a = g.tape.leaf(wx.clone());
        let b = g.tape.leaf(wv.clone());
        let xa = g.tape.mul(x, a);
        let vb = g.tape.mul(v, b);
        let sum = g.tape.add(xa, vb);
        let loss = g.tape.mean(sum);
        let val = g.tape.scalar(loss);
        (val, g.param_grads(&g.tape.backward(loss)))
    };
    let (_, grads) = objective(m.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    for id in m.params().ids() {
        let len = m.params().get(id).len();
        // a few entries per tensor keep this a unit test; the acceptance
        // suite sweeps every scalar
        for _ in 0..3.min(len) {
            let k = rand::Rng::gen_range(&mut rng, 0..len);
            let mut p = m.params().clone();
            let base = p.get(id).as_slice().unwrap()[k];
            p.get_mut(id).as_slice_mut().unwrap()[k] = base + h;
            let up = objective(&p).0;
            p.get_mut(id).as_slice_mut().unwrap()[k] = base - h;
            let down = objective(&p).0;
            let fd = (up - down) / (2.0 * h);
            let an = grads[id.0].as_slice().unwrap()[k];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() <= 1e-4 * scale, "{}[{k}]: {an} vs {fd}", m.params().name(id));
        }
    }
}
