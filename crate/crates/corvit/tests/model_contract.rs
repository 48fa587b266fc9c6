//! Contract for the assembled two-stage model: construction, the image ->
//! logits path, and checkpoint round-tripping with validation.

use corvit::backbone::{BackboneConfig, NormKind};
use corvit::model::{select_logit, sha256_hex, ModelState};
use corvit::preprocess::{Image, PreprocessConfig};
use corvit::rng::RngStream;
use corvit::tensor::tape::Tape;
use corvit::tensor::Tensor;
use corvit::transformer::TransformerConfig;
use corvit::Error;

/// Desk-size stages shrunk further so a forward pass costs milliseconds:
/// 64x64 input, 16-channel corpus, 2 encoder layers of width 32.
fn tiny_model(seed: u64) -> ModelState {
    let backbone = BackboneConfig {
        growth_rate: 8,
        block_layers: [1, 1, 1, 1],
        stem_channels: 8,
        bottleneck: false,
        norm: NormKind::Group { groups: 8 },
        num_findings: 4,
        input_size: 64,
    };
    let vit = TransformerConfig {
        dim: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2.0,
        num_classes: 3,
    };
    ModelState::init(backbone, vit, PreprocessConfig::default(), seed).unwrap()
}

fn rand_image(rng: &mut RngStream, h: usize, w: usize) -> Image {
    let data: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
    Image::new(h, w, data).unwrap()
}

#[test]
fn init_collects_both_stages_and_ties_preprocessing_to_the_input_size() {
    let m = tiny_model(50);
    assert_eq!(m.prep.out_size, 64, "preprocess target must follow the backbone");
    assert!(m.params.get("backbone.stem.conv").is_some());
    assert!(m.params.get("pcam.score.w").is_some());
    assert!(m.params.get("vit.pos_embed").is_some());
    // position table sized for the 2x2 grid plus the class token
    assert_eq!(
        m.params.get("vit.pos_embed").unwrap().shape(),
        &[1, 5, 32]
    );
    assert!(m.buffers.is_empty(), "group norm keeps no running statistics");
}

#[test]
fn forward_produces_logits_attention_and_trace() {
    let mut m = tiny_model(51);
    let mut rng = RngStream::new(52, "model-test", 0);
    let x_data: Vec<f64> = (0..2 * 64 * 64).map(|_| rng.uniform()).collect();
    let x = Tensor::from_vec(vec![2, 1, 64, 64], x_data).unwrap();
    let (tape, _, trace) = m.forward(&x, false, false).unwrap();
    assert_eq!(tape.shape(trace.logits), &[2, 3]);
    assert_eq!(trace.attention.len(), 2);
    assert_eq!(trace.grid_h, 2);
    assert_eq!(trace.grid_w, 2);
    assert!(tape.data(trace.logits).iter().all(|v| v.is_finite()));
}

#[test]
fn classify_image_resizes_arbitrary_inputs() {
    let mut m = tiny_model(53);
    let mut rng = RngStream::new(54, "model-test", 0);
    let img = rand_image(&mut rng, 97, 113); // not the model's input size
    let logits = m.classify_image(&img).unwrap();
    assert_eq!(logits.len(), 3);
    assert!(logits.iter().all(|v| v.is_finite()));

    // same image, same model: identical logits
    let again = m.classify_image(&img).unwrap();
    assert_eq!(logits, again);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = tiny_model(55);
    m.save(&path).unwrap();
    let loaded = ModelState::load(&path).unwrap();

    assert_eq!(loaded.backbone, m.backbone);
    assert_eq!(loaded.vit, m.vit);
    assert_eq!(loaded.prep, m.prep);
    assert_eq!(loaded.params.len(), m.params.len());
    for ((n1, t1), (n2, t2)) in m.params.iter().zip(loaded.params.iter()) {
        assert_eq!(n1, n2, "parameter order must survive the roundtrip");
        assert_eq!(t1.shape(), t2.shape());
        assert_eq!(t1.data(), t2.data(), "{n1} changed across save/load");
        assert!(t2.requires_grad(), "{n1} must come back trainable");
    }

    // and the two models agree on a prediction
    let mut rng = RngStream::new(56, "model-test", 0);
    let img = rand_image(&mut rng, 64, 64);
    let mut m = m;
    let mut loaded = loaded;
    assert_eq!(m.classify_image(&img).unwrap(), loaded.classify_image(&img).unwrap());
}

#[test]
fn checkpoint_saves_are_byte_identical_for_identical_states() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    tiny_model(57).save(&a).unwrap();
    tiny_model(57).save(&b).unwrap();
    assert_eq!(sha256_hex(&a).unwrap(), sha256_hex(&b).unwrap());

    let c = dir.path().join("c.ckpt");
    tiny_model(58).save(&c).unwrap();
    assert_ne!(sha256_hex(&a).unwrap(), sha256_hex(&c).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    tiny_model(59).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // wrong magic
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let p = dir.path().join("magic.ckpt");
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(ModelState::load(&p), Err(Error::CheckpointFormat { .. })));

    // truncated payload
    let p = dir.path().join("trunc.ckpt");
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(ModelState::load(&p).is_err());

    // header promising a different architecture than the tensors provide:
    // bump vit.dim in the text header without touching the payload
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
    let tampered = header.replace("vit.dim 32", "vit.dim 64");
    assert_ne!(header, tampered);
    let mut bad = Vec::new();
    bad.extend_from_slice(&bytes[..8]);
    bad.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
    bad.extend_from_slice(tampered.as_bytes());
    bad.extend_from_slice(&bytes[16 + header_len..]);
    let p = dir.path().join("tamper.ckpt");
    std::fs::write(&p, &bad).unwrap();
    match ModelState::load(&p) {
        Err(Error::CheckpointFormat { msg, .. }) => {
            assert!(msg.contains("shape"), "expected a shape complaint, got: {msg}")
        }
        other => panic!("expected checkpoint rejection, got {other:?}"),
    }
}

#[test]
fn select_logit_isolates_one_class_column() {
    let mut tape = Tape::new(true);
    let logits_t = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap()
        .with_requires_grad();
    let logits = tape.leaf(&logits_t);
    let s = select_logit(&mut tape, logits, 1).unwrap();
    assert_eq!(tape.data(s), &[7.0]); // 2 + 5

    let grads = tape.backward(s).unwrap();
    let g = grads.get(logits).unwrap();
    assert_eq!(g, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);

    let mut tape = Tape::new(false);
    let logits = tape.constant(&logits_t);
    assert!(matches!(
        select_logit(&mut tape, logits, 9),
        Err(Error::ClassOutOfRange { class: 9, num_classes: 3 })
    ));
}
