use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{CorruptionRecord, Identity, Sample, Split, SynthConfig, SyntheticDataset, SyntheticImage};
use crate::encoders::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.txt";
const PATCHES: &str = "patches.bin";
const SAMPLES: &str = "samples.csv";
const IDENTITIES: &str = "identities.csv";
const CORRUPTION: &str = "corruption.csv";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad list entry `{t}`"))))
        .collect()
}

fn manifest_text(ds: &SyntheticDataset) -> String {
    let c = &ds.config;
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    put("format", "amns-synthetic-v1".into());
    put("seed", ds.seed.to_string());
    put("n_identities", c.n_identities.to_string());
    put("samples_per_id", c.samples_per_id.to_string());
    put("num_patches", c.num_patches.to_string());
    put("patch_dim", c.patch_dim.to_string());
    put("d_sig", c.d_sig.to_string());
    put("signal_patches", c.signal_patches.to_string());
    put("sigma", c.sigma.to_string());
    put("sigma_background", c.sigma_background.to_string());
    put("signal_gain", c.signal_gain.to_string());
    put("foreground_offset", c.foreground_offset.to_string());
    put("attribute_slots", c.attribute_slots.to_string());
    put("attribute_values", c.attribute_values.to_string());
    put("filler_per_caption", c.filler_per_caption.to_string());
    put("vocab", c.vocab.to_string());
    put("train_fraction", c.train_fraction.to_string());
    put("val_fraction", c.val_fraction.to_string());
    if let Some(r) = &ds.corruption {
        put("noise_rate", r.noise_rate.to_string());
    }
    s
}

/// Writes `ds` into `dir` (created if missing).
pub fn write_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), manifest_text(ds))?;

    let names: Vec<String> = (0..ds.len()).map(|i| format!("sample{i}")).collect();
    write_checkpoint(
        &dir.join(PATCHES),
        names.iter().map(String::as_str).zip(ds.samples.iter().map(|s| &s.image.patches)),
    )?;

    let mut w = csv::Writer::from_path(dir.join(SAMPLES))?;
    w.write_record(["index", "identity", "caption_identity", "split", "signal_mask", "caption"])?;
    for (i, s) in ds.samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.image.identity.to_string(),
            s.caption_identity.to_string(),
            s.split.as_str().to_string(),
            join(&s.image.signal_mask),
            join(&s.caption),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(IDENTITIES))?;
    w.write_record(["id", "attributes", "prototype"])?;
    for id in &ds.identities {
        w.write_record([id.id.to_string(), join(&id.attributes), join(&id.prototype)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(CORRUPTION))?;
    w.write_record(["index", "source"])?;
    if let Some(r) = &ds.corruption {
        for (i, s) in r.indices.iter().zip(&r.sources) {
            w.write_record([i.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line `{line}` lacks `=`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if map.get("format").map(String::as_str) != Some("amns-synthetic-v1") {
        return Err(Error::Format("not a synthetic dataset manifest".into()));
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::Format(format!("manifest value for `{key}` is malformed")))
}

/// Reads a dataset previously stored by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let m = read_manifest(dir)?;
    let config = SynthConfig {
        n_identities: field(&m, "n_identities")?,
        samples_per_id: field(&m, "samples_per_id")?,
        num_patches: field(&m, "num_patches")?,
        patch_dim: field(&m, "patch_dim")?,
        d_sig: field(&m, "d_sig")?,
        signal_patches: field(&m, "signal_patches")?,
        sigma: field(&m, "sigma")?,
        sigma_background: field(&m, "sigma_background")?,
        signal_gain: field(&m, "signal_gain")?,
        foreground_offset: field(&m, "foreground_offset")?,
        attribute_slots: field(&m, "attribute_slots")?,
        attribute_values: field(&m, "attribute_values")?,
        filler_per_caption: field(&m, "filler_per_caption")?,
        vocab: field(&m, "vocab")?,
        train_fraction: field(&m, "train_fraction")?,
        val_fraction: field(&m, "val_fraction")?,
    };
    config.validate()?;
    let seed = field(&m, "seed")?;

    let patches = read_checkpoint(&dir.join(PATCHES))?;
    let mut samples = Vec::with_capacity(patches.len());
    let mut r = csv::Reader::from_path(dir.join(SAMPLES))?;
    for (row, (name, tensor)) in r.records().zip(patches) {
        let row = row?;
        let get = |k: usize| row.get(k).ok_or_else(|| Error::Format("short sample row".into()));
        let index: usize = get(0)?.parse().map_err(|_| Error::Format("bad sample index".into()))?;
        if name != format!("sample{index}") || index != samples.len() {
            return Err(Error::Format(format!("sample {index} does not match patch record `{name}`")));
        }
        let identity = get(1)?.parse().map_err(|_| Error::Format("bad identity".into()))?;
        samples.push(Sample {
            image: SyntheticImage {
                patches: tensor,
                signal_mask: parse_list(get(4)?)?,
                identity,
            },
            caption: parse_list(get(5)?)?,
            caption_identity: get(2)?.parse().map_err(|_| Error::Format("bad caption identity".into()))?,
            split: Split::parse(get(3)?).map_err(|e| Error::Format(e.to_string()))?,
        });
    }
    if samples.len() != config.n_identities * config.samples_per_id {
        return Err(Error::Format(format!(
            "expected {} samples, found {}",
            config.n_identities * config.samples_per_id,
            samples.len()
        )));
    }

    let mut identities = Vec::with_capacity(config.n_identities);
    let mut r = csv::Reader::from_path(dir.join(IDENTITIES))?;
    for row in r.records() {
        let row = row?;
        let get = |k: usize| row.get(k).ok_or_else(|| Error::Format("short identity row".into()));
        identities.push(Identity {
            id: get(0)?.parse().map_err(|_| Error::Format("bad identity id".into()))?,
            attributes: parse_list(get(1)?)?,
            prototype: parse_list(get(2)?)?,
        });
    }

    let corruption = match m.get("noise_rate") {
        None => None,
        Some(_) => {
            let mut indices = Vec::new();
            let mut sources = Vec::new();
            let mut r = csv::Reader::from_path(dir.join(CORRUPTION))?;
            for row in r.records() {
                let row = row?;
                let parsed: Vec<usize> = row
                    .iter()
                    .map(|v| v.parse().map_err(|_| Error::Format("bad corruption entry".into())))
                    .collect::<Result<_>>()?;
                if parsed.len() != 2 {
                    return Err(Error::Format("corruption rows need two fields".into()));
                }
                indices.push(parsed[0]);
                sources.push(parsed[1]);
            }
            let is_noisy = samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.split == Split::Train)
                .map(|(i, _)| indices.binary_search(&i).is_ok())
                .collect();
            Some(CorruptionRecord {
                noise_rate: field(&m, "noise_rate")?,
                indices,
                sources,
                is_noisy,
            })
        }
    };

    Ok(SyntheticDataset {
        config,
        seed,
        identities,
        samples,
        corruption,
    })
}
