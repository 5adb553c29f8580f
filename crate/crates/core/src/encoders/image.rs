use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{normal_tensor, Block, Linear, Norm, ParamSet};
use super::{AttentionTrace, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One image of a batch: `P×d_patch` patches plus an optional keep-set of patch indices.
#[derive(Clone, Copy, Debug)]
pub struct ImageInput<'a> {
    pub patches: &'a Tensor,
    pub keep: Option<&'a [usize]>,
}

#[derive(Debug)]
pub struct ImageBatchOutput {
    /// `B×d_joint` global (CLS) features.
    pub features: Var,
    /// One trace per image, empty unless requested.
    pub traces: Vec<AttentionTrace>,
}

/// Patch-token vision transformer with a learned CLS token.
///
/// Masked patches are removed from the sequence together with their positional
/// embeddings, so attention is computed only over surviving tokens.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
    params: ParamSet,
    patch: Linear,
    cls: usize,
    pos: usize,
    blocks: Vec<Block>,
    ln_final: Norm,
    proj: usize,
}

struct Sequence {
    rows: Vec<f64>,
    positions: Vec<usize>,
}

impl ImageEncoder {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let patch = Linear::init(&mut params, &mut rng, "image.patch", config.patch_dim, d);
        let cls = params.push("image.cls", normal_tensor(&mut rng, &[1, d], 0.5));
        let pos = params.push(
            "image.pos",
            normal_tensor(&mut rng, &[1 + config.num_patches, d], 0.5),
        );
        let blocks = (0..config.image_layers)
            .map(|l| Block::init(&mut params, &mut rng, &format!("image.block{l}"), d, config.ff_hidden))
            .collect();
        let ln_final = Norm::init(&mut params, "image.ln_final", d);
        let proj = params.push(
            "image.proj",
            normal_tensor(&mut rng, &[d, config.d_joint], 1.0 / (d as f64).sqrt()),
        );
        Ok(Self {
            config: config.clone(),
            params,
            patch,
            cls,
            pos,
            blocks,
            ln_final,
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn sequence(&self, input: &ImageInput<'_>) -> Result<Sequence> {
        let p = self.config.num_patches;
        let d_patch = self.config.patch_dim;
        if input.patches.shape() != [p, d_patch] {
            return Err(Error::Shape {
                op: "encode_image",
                lhs: input.patches.shape().to_vec(),
                rhs: vec![p, d_patch],
            });
        }
        let positions: Vec<usize> = match input.keep {
            None => (0..p).collect(),
            Some(keep) => {
                validate_keep(keep, p)?;
                keep.to_vec()
            }
        };
        let mut rows = Vec::with_capacity(positions.len() * d_patch);
        for &k in &positions {
            rows.extend_from_slice(input.patches.row(k));
        }
        Ok(Sequence { rows, positions })
    }

    /// Encodes a batch of images on `tape` using parameters bound as `vars`.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[ImageInput<'_>],
        with_traces: bool,
    ) -> Result<ImageBatchOutput> {
        let seqs = inputs
            .iter()
            .map(|i| self.sequence(i))
            .collect::<Result<Vec<_>>>()?;
        self.encode_sequences(tape, vars, &seqs, with_traces)
    }

    /// Encodes patch rows given explicitly with their original positions.
    ///
    /// This is the physically truncated path: `rows` holds only the surviving patches.
    pub fn encode_truncated(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        rows: &Tensor,
        positions: &[usize],
    ) -> Result<ImageBatchOutput> {
        validate_keep(positions, self.config.num_patches)?;
        if rows.shape() != [positions.len(), self.config.patch_dim] {
            return Err(Error::Shape {
                op: "encode_truncated",
                lhs: rows.shape().to_vec(),
                rhs: vec![positions.len(), self.config.patch_dim],
            });
        }
        let seq = Sequence {
            rows: rows.data().to_vec(),
            positions: positions.to_vec(),
        };
        self.encode_sequences(tape, vars, &[seq], true)
    }

    fn encode_sequences(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seqs: &[Sequence],
        with_traces: bool,
    ) -> Result<ImageBatchOutput> {
        if seqs.is_empty() {
            return Err(Error::Batch("empty image batch".into()));
        }
        let d_patch = self.config.patch_dim;
        let total_patches: usize = seqs.iter().map(|s| s.positions.len()).sum();
        let mut flat = Vec::with_capacity(total_patches * d_patch);
        seqs.iter().for_each(|s| flat.extend_from_slice(&s.rows));
        let patch_rows = tape.constant(Tensor::new(vec![total_patches, d_patch], flat)?);
        let projected = self.patch.forward(tape, vars, patch_rows)?;

        // row 0 of `pool` is the CLS embedding, patch tokens follow
        let pool = tape.concat_rows(&[vars[self.cls], projected])?;
        let mut order = Vec::with_capacity(total_patches + seqs.len());
        let mut pos_index = Vec::with_capacity(order.capacity());
        let mut segments = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for s in seqs {
            segments.push((order.len(), 1 + s.positions.len()));
            order.push(0);
            pos_index.push(0);
            for (i, &p) in s.positions.iter().enumerate() {
                order.push(1 + offset + i);
                pos_index.push(1 + p);
            }
            offset += s.positions.len();
        }
        let tokens = tape.gather_rows(pool, &order)?;
        let pos = tape.gather_rows(vars[self.pos], &pos_index)?;
        let mut x = tape.add(tokens, pos)?;

        let mut attn_nodes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, attn) = block.forward(tape, vars, x, &segments, self.config.heads)?;
            x = y;
            attn_nodes.push(attn);
        }
        let starts: Vec<usize> = segments.iter().map(|&(s, _)| s).collect();
        let cls_out = tape.gather_rows(x, &starts)?;
        let cls_out = self.ln_final.forward(tape, vars, cls_out)?;
        let features = tape.matmul(cls_out, vars[self.proj])?;

        let traces = if with_traces {
            let per_layer: Vec<_> = attn_nodes
                .iter()
                .map(|&a| tape.first_token_attention(a).expect("attention node"))
                .collect();
            seqs.iter()
                .enumerate()
                .map(|(b, s)| AttentionTrace {
                    weights: per_layer.iter().map(|layer| layer[b].clone()).collect(),
                    num_patches: self.config.num_patches,
                    kept: s.positions.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(ImageBatchOutput { features, traces })
    }

    /// Stand-alone, gradient-free encoding of a single image.
    pub fn encode_image(&self, patches: &Tensor, keep: Option<&[usize]>) -> Result<(Tensor, AttentionTrace)> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let out = self.encode_batch(&mut tape, &vars, &[ImageInput { patches, keep }], true)?;
        let feature = tape.value(out.features).clone().reshape(vec![self.config.d_joint])?;
        let trace = out.traces.into_iter().next().expect("one trace");
        Ok((feature, trace))
    }
}

fn validate_keep(keep: &[usize], num_patches: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::Mask("keep-set is empty; at least one patch must survive".into()));
    }
    let mut seen = vec![false; num_patches];
    for &k in keep {
        if k >= num_patches {
            return Err(Error::Mask(format!("patch index {k} outside 0..{num_patches}")));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Mask(format!("patch index {k} repeated in keep-set")));
        }
    }
    Ok(())
}
