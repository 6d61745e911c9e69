//! Checkpoint file: a text manifest terminated by an `end` line, followed by
//! the catalogued tensors as contiguous little-endian f64 arrays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{AdamState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
const HEADER: &str = "olvae-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub epochs_done: usize,
}

fn join(sizes: &[usize]) -> String {
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split(text: &str) -> Option<Vec<usize>> {
    if text.is_empty() {
        return Some(Vec::new());
    }
    text.split(',').map(|s| s.parse().ok()).collect()
}

impl Checkpoint {
    fn catalog(&self) -> Vec<(String, &Tensor)> {
        let named = self.model.named();
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(3 * named.len());
        for (n, t) in &named {
            out.push((n.clone(), *t));
        }
        for (slot, moments) in [("first", &self.adam.first), ("second", &self.adam.second)] {
            for ((n, _), t) in named.iter().zip(moments) {
                out.push((format!("adam.{slot}.{n}"), t));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mc = &self.model.config;
        let mut m = String::new();
        writeln!(m, "{HEADER}").unwrap();
        writeln!(m, "version={FORMAT_VERSION}").unwrap();
        m.push_str(&self.config.model_echo());
        writeln!(m, "data_dim={}", mc.data_dim).unwrap();
        writeln!(m, "encoder_hidden={}", join(&mc.encoder_hidden)).unwrap();
        writeln!(m, "decoder_hidden={}", join(&mc.decoder_hidden)).unwrap();
        writeln!(m, "epochs_done={}", self.epochs_done).unwrap();
        writeln!(m, "adam_step={}", self.adam.step).unwrap();
        let catalog = self.catalog();
        for (name, t) in &catalog {
            writeln!(m, "tensor {name} {}", join(t.shape())).unwrap();
        }
        writeln!(m, "end").unwrap();
        let mut out = m.into_bytes();
        for (_, t) in &catalog {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        let mut offset = 0;
        let mut next_line = |what: &str| -> Result<(usize, &str)> {
            let start = offset;
            let rest = &bytes[start..];
            let len = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fail(start, format!("unterminated manifest while reading {what}")))?;
            offset = start + len + 1;
            let line = std::str::from_utf8(&rest[..len]).map_err(|_| fail(start, "manifest is not UTF-8".into()))?;
            Ok((start, line))
        };

        let (at, line) = next_line("header")?;
        if line != HEADER {
            return Err(fail(at, format!("expected {HEADER:?}")));
        }
        let (at, line) = next_line("version")?;
        if line != format!("version={FORMAT_VERSION}") {
            return Err(fail(at, format!("unsupported version line {line:?}")));
        }

        let mut config = TrainConfig::default();
        let mut data_dim = None;
        let mut encoder_hidden = None;
        let mut decoder_hidden = None;
        let mut epochs_done = None;
        let mut adam_step = None;
        let mut catalog: Vec<(usize, String, Vec<usize>)> = Vec::new();
        loop {
            let (at, line) = next_line("manifest body")?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, shape) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| fail(at, format!("malformed tensor line {line:?}")))?;
                let shape = split(shape).ok_or_else(|| fail(at, format!("bad shape in {line:?}")))?;
                catalog.push((at, name.to_string(), shape));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(at, format!("malformed manifest line {line:?}")))?;
            let number = |v: &str| v.parse::<usize>().map_err(|_| fail(at, format!("bad value in {line:?}")));
            let sizes = |v: &str| split(v).ok_or_else(|| fail(at, format!("bad sizes in {line:?}")));
            match key {
                "data_dim" => data_dim = Some(number(value)?),
                "encoder_hidden" => encoder_hidden = Some(sizes(value)?),
                "decoder_hidden" => decoder_hidden = Some(sizes(value)?),
                "epochs_done" => epochs_done = Some(number(value)?),
                "adam_step" => adam_step = Some(number(value)? as u64),
                _ => config.set(key, value).map_err(|e| fail(at, e.to_string()))?,
            }
        }
        let body_start = offset;
        let missing = |what: &str| fail(body_start, format!("manifest lacks {what}"));
        let model_config = ModelConfig {
            data_dim: data_dim.ok_or_else(|| missing("data_dim"))?,
            content_dim: config.content_dim,
            style_dim: config.style_dim,
            k: config.k,
            prior_mode: config.prior_mode,
            encoder_hidden: encoder_hidden.ok_or_else(|| missing("encoder_hidden"))?,
            decoder_hidden: decoder_hidden.ok_or_else(|| missing("decoder_hidden"))?,
        };
        let mut model = Model::zeros(model_config).map_err(|e| fail(body_start, e.to_string()))?;
        let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
        let mut adam = AdamState::new(model.named().into_iter().map(|(_, t)| t));
        adam.step = adam_step.ok_or_else(|| missing("adam_step"))?;

        let mut targets: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in names.iter().zip(model.tensors_mut()) {
            targets.push((n.clone(), t));
        }
        for (slot, moments) in [("first", &mut adam.first), ("second", &mut adam.second)] {
            for (n, t) in names.iter().zip(moments.iter_mut()) {
                targets.push((format!("adam.{slot}.{n}"), t));
            }
        }
        if catalog.len() != targets.len() {
            return Err(fail(
                body_start,
                format!("catalog lists {} tensors, model needs {}", catalog.len(), targets.len()),
            ));
        }
        let mut cursor = body_start;
        for ((at, name, shape), (want, tensor)) in catalog.iter().zip(targets) {
            if *name != want || shape.as_slice() != tensor.shape() {
                return Err(fail(
                    *at,
                    format!("catalog entry {name} {shape:?} does not match {want} {:?}", tensor.shape()),
                ));
            }
            let len = tensor.len() * 8;
            let chunk = bytes
                .get(cursor..cursor + len)
                .ok_or_else(|| fail(cursor, format!("truncated data for {name}")))?;
            for (v, b) in tensor.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            cursor += len;
        }
        if cursor != bytes.len() {
            return Err(fail(cursor, "trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            config,
            model,
            adam,
            epochs_done: epochs_done.ok_or_else(|| missing("epochs_done"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ckpt = Checkpoint::decode(&bytes)?;
        ckpt.config.checkpoint_path = path.to_path_buf();
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::PriorMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(mode: PriorMode) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = TrainConfig {
            k: 4,
            content_dim: 2,
            style_dim: 3,
            prior_mode: mode,
            ..TrainConfig::default()
        };
        let mut mc = ModelConfig::new(16, 2, 3, 4, mode);
        mc.encoder_hidden = vec![8, 4];
        mc.decoder_hidden = vec![5];
        let mut model = Model::new(mc, &mut rng).unwrap();
        for t in model.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-1e-3..1e-3);
            }
        }
        let mut adam = AdamState::new(model.named().into_iter().map(|(_, t)| t));
        adam.step = 17;
        for t in adam.first.iter_mut().chain(adam.second.iter_mut()) {
            for v in t.data_mut() {
                *v = rng.random::<f64>() * 1e-7;
            }
        }
        Checkpoint {
            config,
            model,
            adam,
            epochs_done: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [PriorMode::Ordinal, PriorMode::Iid] {
            let ckpt = sample(mode);
            let bytes = ckpt.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back.encode(), bytes);
            assert_eq!(back.model, ckpt.model);
            assert_eq!(back.adam, ckpt.adam);
            assert_eq!(back.epochs_done, 5);
        }
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let bytes = sample(PriorMode::Ordinal).encode();
        assert!(matches!(Checkpoint::decode(b"garbage\n"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        match Checkpoint::decode(&extra) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len()),
            other => panic!("{other:?}"),
        }
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("tensor decoder.0.bias").unwrap();
        let mut renamed = bytes.clone();
        renamed[at + 7] = b'X';
        match Checkpoint::decode(&renamed) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, at),
            other => panic!("{other:?}"),
        }
    }
}
