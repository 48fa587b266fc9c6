//! Behavioural contract for the token transformer: sequence assembly,
//! residual structure, attention normalization, the token-0 head, and
//! end-to-end gradients.

use corvit::backbone::BoundParams;
use corvit::gradcheck::{check_gradients, DEFAULT_STEP};
use corvit::params::ParamSet;
use corvit::rng::RngStream;
use corvit::tensor::tape::Tape;
use corvit::tensor::Tensor;
use corvit::transformer::{
    assemble, encoder_layer, init_transformer_params, project, transformer_forward,
    TransformerConfig,
};
use corvit::Error;

/// Small config: 16-wide tokens, 2 layers, 2 heads, over a 2x2 grid of
/// 8-channel corpus cells.
fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
    }
}

const TINY_CHANNELS: usize = 8;
const TINY_GRID: usize = 2; // 2x2 -> 4 spatial tokens

fn init(cfg: &TransformerConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    init_transformer_params(cfg, TINY_CHANNELS, TINY_GRID * TINY_GRID, seed, &mut params).unwrap();
    params
}

fn rand_features(rng: &mut RngStream, n: usize) -> Tensor {
    let numel = n * TINY_CHANNELS * TINY_GRID * TINY_GRID;
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Tensor::from_vec(vec![n, TINY_CHANNELS, TINY_GRID, TINY_GRID], data).unwrap()
}

/// Add noise to every parameter so no tensor sits at its ceremonial init
/// value (zero biases, unit gains) when a test wants generic weights.
fn jitter(params: &mut ParamSet, rng: &mut RngStream, scale: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.uniform_in(-scale, scale);
        }
    }
}

#[test]
fn config_arithmetic_and_validation() {
    let desk = TransformerConfig::desk();
    assert_eq!(desk.dim, 256);
    assert_eq!(desk.hidden_dim(), 1024);
    assert_eq!(desk.head_dim(), 32);
    desk.validate().unwrap();

    let mut bad = desk.clone();
    bad.heads = 7; // 256 % 7 != 0
    assert!(bad.validate().is_err());
    let mut bad = desk;
    bad.layers = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn identity_projection_flattens_row_major() {
    // with dim == channels and an identity projection, token (y*W + x) must
    // carry exactly the feature column at cell (y, x)
    let cfg = TransformerConfig {
        dim: TINY_CHANNELS,
        layers: 1,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: 2,
    };
    let mut params = init(&cfg, 21);
    {
        let w = params.get_mut("vit.proj.w").unwrap();
        let d = TINY_CHANNELS;
        let data = w.data_mut();
        data.fill(0.0);
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
    }
    let mut feat = vec![0.0; 2 * TINY_CHANNELS * 4];
    for n in 0..2 {
        for c in 0..TINY_CHANNELS {
            for y in 0..2 {
                for x in 0..2 {
                    feat[((n * TINY_CHANNELS + c) * 2 + y) * 2 + x] =
                        (n * 1000 + c * 100 + y * 10 + x) as f64;
                }
            }
        }
    }
    let features = Tensor::from_vec(vec![2, TINY_CHANNELS, 2, 2], feat.clone()).unwrap();

    let mut tape = Tape::new(false);
    let bound = BoundParams::bind_all(&mut tape, &params);
    let f = tape.constant(&features);
    let tokens = project(&mut tape, &bound, f).unwrap();
    assert_eq!(tape.shape(tokens), &[2, 4, TINY_CHANNELS]);
    let out = tape.data(tokens);
    for n in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                let t = y * 2 + x;
                for c in 0..TINY_CHANNELS {
                    let want = feat[((n * TINY_CHANNELS + c) * 2 + y) * 2 + x];
                    let got = out[(n * 4 + t) * TINY_CHANNELS + c];
                    assert_eq!(got, want, "token {t} channel {c} of batch {n}");
                }
            }
        }
    }
}

#[test]
fn assembled_sequence_is_class_token_plus_grid_plus_position() {
    let cfg = tiny_config();
    let d = cfg.dim;
    let mut params = init(&cfg, 22);
    let mut rng = RngStream::new(23, "transformer-test", 0);

    // fresh init keeps the positional table at zero: z0 = [cls; tokens]
    let tokens_t = Tensor::from_vec(
        vec![1, 4, d],
        (0..4 * d).map(|i| i as f64 * 0.01).collect(),
    )
    .unwrap();
    {
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind_all(&mut tape, &params);
        let tokens = tape.constant(&tokens_t);
        let z0 = assemble(&mut tape, &bound, tokens).unwrap();
        assert_eq!(tape.shape(z0), &[1, 5, d]);
        let z = tape.data(z0);
        let cls = params.get("vit.cls_token").unwrap().data();
        assert_eq!(&z[..d], cls);
        assert_eq!(&z[d..], tokens_t.data());
    }

    // zero tokens and zero class token: z0 is exactly the positional table
    for v in params.get_mut("vit.pos_embed").unwrap().data_mut() {
        *v = rng.uniform_in(-1.0, 1.0);
    }
    params.get_mut("vit.cls_token").unwrap().data_mut().fill(0.0);
    {
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind_all(&mut tape, &params);
        let zeros = tape.constant(&Tensor::zeros(vec![1, 4, d]));
        let z0 = assemble(&mut tape, &bound, zeros).unwrap();
        assert_eq!(tape.data(z0), params.get("vit.pos_embed").unwrap().data());
    }
}

#[test]
fn positional_table_sized_for_a_different_grid_is_rejected() {
    let cfg = tiny_config();
    let params = init(&cfg, 24); // positions cover 2x2 + class token
    let mut rng = RngStream::new(25, "transformer-test", 0);
    let numel = TINY_CHANNELS * 3 * 3;
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform()).collect();
    let wrong = Tensor::from_vec(vec![1, TINY_CHANNELS, 3, 3], data).unwrap();

    let mut tape = Tape::new(false);
    let bound = BoundParams::bind_all(&mut tape, &params);
    let f = tape.constant(&wrong);
    match transformer_forward(&mut tape, &bound, &cfg, f) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "assemble"),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
}

#[test]
fn zeroed_residual_branches_make_the_encoder_an_identity() {
    let cfg = tiny_config();
    let mut params = init(&cfg, 26);
    let mut rng = RngStream::new(27, "transformer-test", 0);
    jitter(&mut params, &mut rng, 0.3);
    // the last linear map of each branch is zero, so every layer contributes
    // exactly +0 to the residual stream
    for l in 0..cfg.layers {
        for name in [
            format!("vit.layer{l}.attn.proj.w"),
            format!("vit.layer{l}.attn.proj.b"),
            format!("vit.layer{l}.mlp.fc2.w"),
            format!("vit.layer{l}.mlp.fc2.b"),
        ] {
            params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }

    let mut tape = Tape::new(false);
    let bound = BoundParams::bind_all(&mut tape, &params);
    let z0_t = Tensor::from_vec(
        vec![2, 5, cfg.dim],
        (0..2 * 5 * cfg.dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    )
    .unwrap();
    let mut z = tape.constant(&z0_t);
    for l in 0..cfg.layers {
        let (next, attention) = encoder_layer(&mut tape, &bound, &cfg, l, z).unwrap();
        assert_eq!(tape.shape(attention), &[2, cfg.heads, 5, 5]);
        z = next;
    }
    assert_eq!(tape.data(z), z0_t.data(), "identity must hold bit for bit");
}

#[test]
fn classification_head_reads_token_zero_only() {
    // with identity encoder layers (previous test's construction), changing
    // the grid features cannot move the logits: only the class token reaches
    // the head
    let cfg = tiny_config();
    let mut params = init(&cfg, 28);
    let mut rng = RngStream::new(29, "transformer-test", 0);
    jitter(&mut params, &mut rng, 0.3);
    for l in 0..cfg.layers {
        params.get_mut(&format!("vit.layer{l}.attn.proj.w")).unwrap().data_mut().fill(0.0);
        params.get_mut(&format!("vit.layer{l}.attn.proj.b")).unwrap().data_mut().fill(0.0);
        params.get_mut(&format!("vit.layer{l}.mlp.fc2.w")).unwrap().data_mut().fill(0.0);
        params.get_mut(&format!("vit.layer{l}.mlp.fc2.b")).unwrap().data_mut().fill(0.0);
    }

    let run = |params: &ParamSet, features: &Tensor| -> Vec<f64> {
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind_all(&mut tape, params);
        let f = tape.constant(features);
        let (logits, _) = transformer_forward(&mut tape, &bound, &cfg, f).unwrap();
        tape.data(logits).to_vec()
    };
    let a = run(&params, &rand_features(&mut rng, 1));
    let b = run(&params, &rand_features(&mut rng, 1));
    assert_eq!(a, b, "logits must ignore everything but token 0");

    // and with zeroed head weights the logits collapse to the head bias
    params.get_mut("vit.head.w").unwrap().data_mut().fill(0.0);
    let bias: Vec<f64> = params.get("vit.head.b").unwrap().data().to_vec();
    let c = run(&params, &rand_features(&mut rng, 1));
    assert_eq!(c, bias);
}

#[test]
fn token_order_matters_only_through_the_positional_table() {
    let cfg = tiny_config();
    let mut params = init(&cfg, 30);
    let mut rng = RngStream::new(31, "transformer-test", 0);
    jitter(&mut params, &mut rng, 0.2);
    // keep positions at zero for the first half of the test
    params.get_mut("vit.pos_embed").unwrap().data_mut().fill(0.0);

    let features = rand_features(&mut rng, 1);
    // swap the two leftmost grid cells (token 0 and 1 of the 2x2 grid)
    let mut swapped = features.clone();
    {
        let data = swapped.data_mut();
        for c in 0..TINY_CHANNELS {
            let base = c * 4;
            data.swap(base, base + 1);
        }
    }

    let run = |params: &ParamSet, f_t: &Tensor| -> Vec<f64> {
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind_all(&mut tape, params);
        let f = tape.constant(f_t);
        let (logits, _) = transformer_forward(&mut tape, &bound, &cfg, f).unwrap();
        tape.data(logits).to_vec()
    };

    // self-attention is permutation-equivariant and the head reads the class
    // token, so without positional information the swap is invisible
    let plain = run(&params, &features);
    let perm = run(&params, &swapped);
    for (a, b) in plain.iter().zip(&perm) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b} without positions");
    }

    // a nonzero positional table breaks the symmetry
    for v in params.get_mut("vit.pos_embed").unwrap().data_mut() {
        *v = rng.uniform_in(-0.5, 0.5);
    }
    let plain = run(&params, &features);
    let perm = run(&params, &swapped);
    let diff: f64 = plain.iter().zip(&perm).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "positional encoding should make order matter, diff {diff}");
}

#[test]
fn attention_rows_are_distributions_across_random_configs() {
    let mut rng = RngStream::new(32, "transformer-test-attn", 0);
    for trial in 0..100 {
        let heads = 1 + rng.range(4);
        let head_dim = 2 + rng.range(5);
        let cfg = TransformerConfig {
            dim: heads * head_dim,
            layers: 1,
            heads,
            mlp_ratio: 1.5,
            num_classes: 2,
        };
        let grid_tokens = 1 + rng.range(6);
        let n = 1 + rng.range(2);
        let mut params = ParamSet::new();
        init_transformer_params(&cfg, 4, grid_tokens, 33 + trial, &mut params).unwrap();
        jitter(&mut params, &mut rng, 0.5);

        let t = grid_tokens + 1;
        let z_t = Tensor::from_vec(
            vec![n, t, cfg.dim],
            (0..n * t * cfg.dim).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new(false);
        let bound = BoundParams::bind_all(&mut tape, &params);
        let z = tape.constant(&z_t);
        let (_, attention) = encoder_layer(&mut tape, &bound, &cfg, 0, z).unwrap();
        assert_eq!(tape.shape(attention), &[n, heads, t, t]);
        let a = tape.data(attention);
        assert!(a.iter().all(|&p| p >= 0.0), "trial {trial}: negative attention");
        for row in a.chunks(t) {
            let sum: f64 = row.iter().sum();
            assert!(
                (sum - 1.0).abs() < 1e-12,
                "trial {trial}: attention row sums to {sum}"
            );
        }
    }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut params = init(&cfg, 34);
    let mut rng = RngStream::new(35, "transformer-test-grad", 0);
    jitter(&mut params, &mut rng, 0.1); // move positions/biases off zero

    let mut leaves: Vec<Tensor> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (name, t) in params.iter() {
        names.push(name.to_string());
        leaves.push(t.clone().with_requires_grad());
    }
    leaves.push(rand_features(&mut rng, 2).with_requires_grad());
    let classes = vec![2usize, 0];
    let cfg2 = cfg.clone();
    let report = check_gradients(
        &leaves,
        &move |tape, vars| {
            let mut bound = BoundParams::bind(tape, &ParamSet::new(), |_| false);
            for (i, name) in names.iter().enumerate() {
                bound.set(name, vars[i]);
            }
            let (logits, _) = transformer_forward(tape, &bound, &cfg2, vars[names.len()])?;
            tape.cross_entropy(logits, &classes, None)
        },
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "transformer gradients off: {} at leaf {} index {} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst_leaf,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric
    );
}

#[test]
fn forward_collects_one_attention_map_per_layer() {
    let cfg = tiny_config();
    let params = init(&cfg, 36);
    let mut rng = RngStream::new(37, "transformer-test", 0);
    let features = rand_features(&mut rng, 2);

    let mut tape = Tape::new(true);
    let bound = BoundParams::bind_all(&mut tape, &params);
    let f = tape.constant(&features);
    let (logits, trace) = transformer_forward(&mut tape, &bound, &cfg, f).unwrap();
    assert_eq!(tape.shape(logits), &[2, cfg.num_classes]);
    assert_eq!(trace.logits, logits);
    assert_eq!(trace.tokens, 5);
    assert_eq!(trace.grid_h, 2);
    assert_eq!(trace.grid_w, 2);
    assert_eq!(trace.attention.len(), cfg.layers);
    for &a in &trace.attention {
        assert_eq!(tape.shape(a), &[2, cfg.heads, 5, 5]);
    }
}

#[test]
fn initialization_is_seed_deterministic() {
    let cfg = tiny_config();
    let p1 = init(&cfg, 40);
    let p2 = init(&cfg, 40);
    let p3 = init(&cfg, 41);
    for ((n1, t1), (n2, t2)) in p1.iter().zip(p2.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data(), "{n1} differs across identical seeds");
    }
    let same = p1
        .iter()
        .zip(p3.iter())
        .all(|((_, t1), (_, t2))| t1.data() == t2.data());
    assert!(!same, "different seeds must give different weights");
    // the position table starts at zero and the class token does not
    assert!(p1.get("vit.pos_embed").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p1.get("vit.cls_token").unwrap().data().iter().any(|&v| v != 0.0));
}
