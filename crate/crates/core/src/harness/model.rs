use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::encoders::{read_checkpoint, write_checkpoint, EmaState, ImageEncoder, ImageInput, MlpHead, ParamSet, TextEncoder};
use crate::error::{Error, Result};
use crate::metrics::{rank_and_score, RetrievalResult};
use crate::seed::derive_seed;
use crate::synthdata::{Split, SyntheticDataset, EOS_TOKEN};
use crate::tensor::{Tape, Tensor};

const EMA_PREFIX: &str = "ema.";
const ENCODE_CHUNK: usize = 64;

/// Live networks, identity classifier and EMA teacher of one run.
#[derive(Clone, Debug)]
pub struct Model {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub projector: MlpHead,
    pub predictor: MlpHead,
    /// Single `d_joint × classes` tensor named `id.classifier`.
    pub classifier: ParamSet,
    pub ema: EmaState,
}

impl Model {
    pub fn new(config: &RunConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_config();
        let image = ImageEncoder::new(&enc, derive_seed(config.seed, "init.image", &[]))?;
        let text = TextEncoder::new(&enc, derive_seed(config.seed, "init.text", &[]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init.heads", &[]));
        let (d, h) = (enc.d_joint, config.projector_hidden);
        let projector = MlpHead::new(&mut rng, "projector", d, h, d);
        let predictor = MlpHead::new(&mut rng, "predictor", d, h, d);
        let mut classifier = ParamSet::new();
        let std = 1.0 / (d as f64).sqrt();
        let data = {
            use rand_distr::{Distribution, Normal};
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..d * classes.max(1)).map(|_| dist.sample(&mut rng)).collect()
        };
        classifier.push("id.classifier", Tensor::new(vec![d, classes.max(1)], data)?);
        let ema = EmaState::new(image.params(), projector.params());
        Ok(Self {
            image,
            text,
            projector,
            predictor,
            classifier,
            ema,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for set in [
            self.image.params(),
            self.text.params(),
            self.projector.params(),
            self.predictor.params(),
            &self.classifier,
        ] {
            out.extend(set.iter().map(|(n, t)| (n.to_string(), t)));
        }
        for set in [&self.ema.image, &self.ema.projector] {
            out.extend(set.iter().map(|(n, t)| (format!("{EMA_PREFIX}{n}"), t)));
        }
        out
    }

    /// Writes every live and teacher tensor to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let named = self.named();
        write_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Rebuilds the architecture from `config` and fills it from `path`.
    pub fn load(config: &RunConfig, path: &Path) -> Result<Self> {
        let records = read_checkpoint(path)?;
        let classes = records
            .iter()
            .find(|(n, _)| n == "id.classifier")
            .map(|(_, t)| t.shape().get(1).copied().unwrap_or(1))
            .ok_or_else(|| Error::Format("checkpoint lacks id.classifier".into()))?;
        let mut model = Self::new(config, classes)?;
        let mut lookup: std::collections::HashMap<String, Tensor> = records.into_iter().collect();
        let mut fill = |set: &mut ParamSet, prefix: &str| -> Result<()> {
            let names: Vec<String> = set.names().to_vec();
            for (k, name) in names.iter().enumerate() {
                let key = format!("{prefix}{name}");
                let t = lookup
                    .remove(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
                if t.shape() != set.get(k).shape() {
                    return Err(Error::Shape {
                        op: "load_checkpoint",
                        lhs: set.get(k).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                set.tensors_mut()[k] = t;
            }
            Ok(())
        };
        fill(model.image.params_mut(), "")?;
        fill(model.text.params_mut(), "")?;
        fill(model.projector.params_mut(), "")?;
        fill(model.predictor.params_mut(), "")?;
        fill(&mut model.classifier, "")?;
        fill(&mut model.ema.image, EMA_PREFIX)?;
        fill(&mut model.ema.projector, EMA_PREFIX)?;
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::Format(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(model)
    }

    /// L2-normalised image features of `indices`, unmasked, from the given encoder weights.
    pub fn image_features(&self, params: &ParamSet, ds: &SyntheticDataset, indices: &[usize]) -> Result<Tensor> {
        let d = self.image.config().d_joint;
        let mut rows = Vec::with_capacity(indices.len() * d);
        for chunk in indices.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let vars = params.bind_frozen(&mut tape);
            let inputs: Vec<ImageInput<'_>> = chunk
                .iter()
                .map(|&i| ImageInput {
                    patches: &ds.samples[i].image.patches,
                    keep: None,
                })
                .collect();
            let out = self.image.encode_batch(&mut tape, &vars, &inputs, false)?;
            let f = tape.l2_normalize_rows(out.features)?;
            rows.extend_from_slice(tape.value(f).data());
        }
        Tensor::new(vec![indices.len(), d], rows)
    }

    /// L2-normalised caption features of `indices`, each caption terminated by the end marker.
    pub fn text_features(&self, ds: &SyntheticDataset, indices: &[usize]) -> Result<Tensor> {
        let d = self.text.config().d_joint;
        let mut rows = Vec::with_capacity(indices.len() * d);
        for chunk in indices.chunks(ENCODE_CHUNK) {
            let captions: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| {
                    let mut c = ds.samples[i].caption.clone();
                    c.push(EOS_TOKEN);
                    c
                })
                .collect();
            let refs: Vec<&[usize]> = captions.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let vars = self.text.params().bind_frozen(&mut tape);
            let f = self.text.encode_batch(&mut tape, &vars, &refs)?;
            let f = tape.l2_normalize_rows(f)?;
            rows.extend_from_slice(tape.value(f).data());
        }
        Tensor::new(vec![indices.len(), d], rows)
    }

    /// Text-to-image retrieval on `split`: captions query the split's images, and an
    /// image is relevant when it carries the query's identity label.
    pub fn evaluate(&self, ds: &SyntheticDataset, split: Split) -> Result<RetrievalResult> {
        let indices = ds.split_indices(split);
        if indices.is_empty() {
            return Err(Error::Protocol(format!("split `{}` is empty", split.as_str())));
        }
        let queries = self.text_features(ds, &indices)?;
        let gallery = self.image_features(self.image.params(), ds, &indices)?;
        let labels: Vec<usize> = indices.iter().map(|&i| ds.samples[i].image.identity).collect();
        let relevance: Vec<Vec<bool>> = labels
            .iter()
            .map(|&q| labels.iter().map(|&g| g == q).collect())
            .collect();
        rank_and_score(&queries, &gallery, &relevance)
    }
}
