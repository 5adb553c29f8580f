use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{normal_tensor, Block, Norm, ParamSet};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Token transformer pooled at the final position of each sequence.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: EncoderConfig,
    params: ParamSet,
    embed: usize,
    pos: usize,
    blocks: Vec<Block>,
    ln_final: Norm,
    proj: usize,
}

impl TextEncoder {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let embed = params.push("text.embed", normal_tensor(&mut rng, &[config.vocab, d], 0.5));
        let pos = params.push("text.pos", normal_tensor(&mut rng, &[config.max_len, d], 0.5));
        let blocks = (0..config.text_layers)
            .map(|l| Block::init(&mut params, &mut rng, &format!("text.block{l}"), d, config.ff_hidden))
            .collect();
        let ln_final = Norm::init(&mut params, "text.ln_final", d);
        let proj = params.push(
            "text.proj",
            normal_tensor(&mut rng, &[d, config.d_joint], 1.0 / (d as f64).sqrt()),
        );
        Ok(Self {
            config: config.clone(),
            params,
            embed,
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

    fn validate(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::Range(format!(
                "caption length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Encodes a batch of token sequences into a `B×d_joint` feature matrix.
    pub fn encode_batch(&self, tape: &mut Tape, vars: &[Var], captions: &[&[usize]]) -> Result<Var> {
        if captions.is_empty() {
            return Err(Error::Batch("empty caption batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(captions.len());
        for c in captions {
            self.validate(c)?;
            segments.push((ids.len(), c.len()));
            ids.extend_from_slice(c);
            positions.extend(0..c.len());
        }
        let tok = tape.gather_rows(vars[self.embed], &ids)?;
        let pos = tape.gather_rows(vars[self.pos], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, vars, x, &segments, self.config.heads)?.0;
        }
        let last: Vec<usize> = segments.iter().map(|&(s, l)| s + l - 1).collect();
        let pooled = tape.gather_rows(x, &last)?;
        let pooled = self.ln_final.forward(tape, vars, pooled)?;
        tape.matmul(pooled, vars[self.proj])
    }

    /// Stand-alone, gradient-free encoding of one caption.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let f = self.encode_batch(&mut tape, &vars, &[tokens])?;
        tape.value(f).clone().reshape(vec![self.config.d_joint])
    }
}
