//! Complete model state (configs + parameters + buffers), the end-to-end
//! forward pass, and checkpoint serialization.
//!
//! Checkpoint layout (all integers little-endian u64):
//! magic `CVCKPT01`, header length + UTF-8 header of `key value` lines,
//! parameter count then per parameter (name length, name bytes, tensor in the
//! crate binary format), buffer count then buffers in the same encoding.

use std::io::{Read, Write};
use std::path::Path;

use sha2::Digest;

use crate::backbone::{
    backbone_forward, init_backbone_params, BackboneConfig, BoundParams, NormContext, NormKind,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::preprocess::{Image, PreprocessConfig, StageOrder};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{io as tio, Tensor};
use crate::transformer::{init_transformer_params, transformer_forward, ForwardTrace, TransformerConfig};

const MAGIC: &[u8; 8] = b"CVCKPT01";

/// Everything needed to run or train the two-stage model.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub backbone: BackboneConfig,
    pub vit: TransformerConfig,
    pub prep: PreprocessConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

impl ModelState {
    /// Fresh model with seeded initialization. The preprocessing target size
    /// is tied to the backbone input size.
    pub fn init(
        backbone: BackboneConfig,
        vit: TransformerConfig,
        mut prep: PreprocessConfig,
        seed: u64,
    ) -> Result<Self> {
        backbone.validate()?;
        vit.validate()?;
        prep.out_size = backbone.input_size;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        init_backbone_params(&backbone, seed, &mut params, &mut buffers)?;
        let grid = backbone.grid_size()?;
        init_transformer_params(&vit, backbone.feature_channels(), grid * grid, seed, &mut params)?;
        Ok(ModelState {
            backbone,
            vit,
            prep,
            params,
            buffers,
        })
    }

    /// Run preprocessing on a raw image, yielding the model input tensor.
    pub fn preprocess(&self, img: &Image) -> Result<Tensor> {
        crate::preprocess::run_pipeline(img, &self.prep)
    }

    /// Forward pass on an already-preprocessed batch (N, 1, S, S).
    ///
    /// `grad` enables gradient tracking (and disables activation release);
    /// `train_norm` switches batch norm to batch statistics. Returns the tape
    /// (holding all values), the bound parameters, and the forward trace.
    pub fn forward(
        &mut self,
        x: &Tensor,
        grad: bool,
        train_norm: bool,
    ) -> Result<(Tape, BoundParams, ForwardTrace)> {
        let mut tape = Tape::new(grad);
        let bound = BoundParams::bind_all(&mut tape, &self.params);
        let input = tape.constant(x);
        let mut norm = NormContext {
            kind: self.backbone.norm,
            train: train_norm,
            buffers: &mut self.buffers,
        };
        let features = backbone_forward(
            &mut tape,
            &bound,
            &self.backbone,
            &mut norm,
            input,
            !grad,
        )?;
        let (_, trace) = transformer_forward(&mut tape, &bound, &self.vit, features)?;
        Ok((tape, bound, trace))
    }

    /// Preprocess one image and return its class logits.
    pub fn classify_image(&mut self, img: &Image) -> Result<Vec<f64>> {
        let x = self.preprocess(img)?;
        let (tape, _, trace) = self.forward(&x, false, false)?;
        Ok(tape.data(trace.logits).to_vec())
    }

    fn header_text(&self) -> String {
        let b = &self.backbone;
        let v = &self.vit;
        let p = &self.prep;
        let blocks = b
            .block_layers
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        for (k, val) in [
            ("backbone.growth_rate", b.growth_rate.to_string()),
            ("backbone.block_layers", blocks),
            ("backbone.stem_channels", b.stem_channels.to_string()),
            ("backbone.bottleneck", (b.bottleneck as u8).to_string()),
            ("backbone.norm", b.norm.as_str()),
            ("backbone.num_findings", b.num_findings.to_string()),
            ("backbone.input_size", b.input_size.to_string()),
            ("vit.dim", v.dim.to_string()),
            ("vit.layers", v.layers.to_string()),
            ("vit.heads", v.heads.to_string()),
            ("vit.mlp_ratio", v.mlp_ratio.to_string()),
            ("vit.num_classes", v.num_classes.to_string()),
            ("prep.bins", p.bins.to_string()),
            ("prep.order", p.order.as_str().to_string()),
            ("prep.out_size", p.out_size.to_string()),
            ("prep.mean", p.mean.to_string()),
            ("prep.std", p.std.to_string()),
        ] {
            s.push_str(k);
            s.push(' ');
            s.push_str(&val);
            s.push('\n');
        }
        s
    }

    /// Write the checkpoint to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(f);
        let io_err = |e| Error::io(format!("write {}", path.display()), e);
        w.write_all(MAGIC).map_err(io_err)?;
        let header = self.header_text();
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(header.as_bytes()).map_err(io_err)?;
        for set in [&self.params, &self.buffers] {
            w.write_all(&(set.len() as u64).to_le_bytes()).map_err(io_err)?;
            for (name, t) in set.iter() {
                w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
                w.write_all(name.as_bytes()).map_err(io_err)?;
                tio::write_tensor(&mut w, t).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Load and validate a checkpoint. Every parameter the configuration
    /// calls for must be present with the right shape (and vice versa);
    /// loaded parameters are marked trainable.
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut r = std::io::BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic — not a checkpoint file"));
        }
        let header_len = read_u64(&mut r, path)? as usize;
        if header_len > 1 << 20 {
            return Err(bad("implausible header length"));
        }
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
        let mut kv = std::collections::HashMap::new();
        for line in header.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k).ok_or_else(|| Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("missing header key {k}"),
            })
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("header key {k} is not an integer"),
            })
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("header key {k} is not a number"),
            })
        };
        let blocks_str = get("backbone.block_layers")?;
        let blocks_vec: Vec<usize> = blocks_str
            .split(',')
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("backbone.block_layers is not a comma-separated list"))?;
        let block_layers: [usize; 4] = blocks_vec
            .try_into()
            .map_err(|_| bad("backbone.block_layers must have exactly 4 entries"))?;
        let backbone = BackboneConfig {
            growth_rate: parse_usize("backbone.growth_rate")?,
            block_layers,
            stem_channels: parse_usize("backbone.stem_channels")?,
            bottleneck: parse_usize("backbone.bottleneck")? != 0,
            norm: NormKind::parse(get("backbone.norm")?).ok_or_else(|| bad("unknown backbone.norm"))?,
            num_findings: parse_usize("backbone.num_findings")?,
            input_size: parse_usize("backbone.input_size")?,
        };
        let vit = TransformerConfig {
            dim: parse_usize("vit.dim")?,
            layers: parse_usize("vit.layers")?,
            heads: parse_usize("vit.heads")?,
            mlp_ratio: parse_f64("vit.mlp_ratio")?,
            num_classes: parse_usize("vit.num_classes")?,
        };
        let prep = PreprocessConfig {
            bins: parse_usize("prep.bins")?,
            order: StageOrder::parse(get("prep.order")?).ok_or_else(|| bad("unknown prep.order"))?,
            out_size: parse_usize("prep.out_size")?,
            mean: parse_f64("prep.mean")?,
            std: parse_f64("prep.std")?,
        };

        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for (set, trainable) in [(&mut params, true), (&mut buffers, false)] {
            let count = read_u64(&mut r, path)? as usize;
            if count > 1 << 20 {
                return Err(bad("implausible tensor count"));
            }
            for _ in 0..count {
                let name_len = read_u64(&mut r, path)? as usize;
                if name_len > 4096 {
                    return Err(bad("implausible name length"));
                }
                let mut name = vec![0u8; name_len];
                r.read_exact(&mut name)
                    .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
                let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
                let mut t = tio::read_tensor(&mut r)?;
                t.set_requires_grad(trainable);
                set.insert(name, t)?;
            }
        }

        let state = ModelState {
            backbone,
            vit,
            prep,
            params,
            buffers,
        };
        state.validate_against_fresh_init(path)?;
        Ok(state)
    }

    /// Compare loaded parameter names/shapes against a fresh initialization
    /// of the same configuration; any mismatch is a load error (this is what
    /// catches positional embeddings sized for a different token grid).
    fn validate_against_fresh_init(&self, path: &Path) -> Result<()> {
        let reference = ModelState::init(
            self.backbone.clone(),
            self.vit.clone(),
            self.prep.clone(),
            0,
        )?;
        for (expected, actual, what) in [
            (&reference.params, &self.params, "parameter"),
            (&reference.buffers, &self.buffers, "buffer"),
        ] {
            for (name, t) in expected.iter() {
                match actual.get(name) {
                    None => {
                        return Err(Error::CheckpointFormat {
                            path: path.to_path_buf(),
                            msg: format!("missing {what} {name}"),
                        })
                    }
                    Some(got) if got.shape() != t.shape() => {
                        return Err(Error::CheckpointFormat {
                            path: path.to_path_buf(),
                            msg: format!(
                                "{what} {name} has shape {:?}, config implies {:?}",
                                got.shape(),
                                t.shape()
                            ),
                        })
                    }
                    Some(_) => {}
                }
            }
            for (name, _) in actual.iter() {
                if expected.get(name).is_none() {
                    return Err(Error::CheckpointFormat {
                        path: path.to_path_buf(),
                        msg: format!("unexpected {what} {name}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(u64::from_le_bytes(buf))
}

/// Hex SHA-256 of a file's bytes (recorded in run manifests next to every
/// checkpoint path).
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut hasher = sha2::Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| Error::io(format!("hash {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Helper for relevance and training: scalar loss selecting one logit from a
/// (N, C) logit matrix (summed over the batch).
pub fn select_logit(tape: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    let c = tape.shape(logits)[1];
    if class >= c {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: c,
        });
    }
    let col = tape.narrow(logits, 1, class, 1)?;
    tape.sum_all(col)
}
