//! Named-tensor checkpoint files and model directories.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "QGKCKPT1"
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   group    u8       0 = qg_core, 1 = knowledge
//!   dtype    u8       0 = float64
//!   ndim     u32      always 2 (rows, cols)
//!   dims     ndim × u64
//!   payload  rows·cols × f64, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{TagVocabs, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Group, Mat, ParameterSet};

pub const MAGIC: &[u8; 8] = b"QGKCKPT1";
const DTYPE_F64: u8 = 0;

pub const PARAMS_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TAGS_FILE: &str = "tags.json";
pub const CONFIG_FILE: &str = "config.txt";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_params<W: Write>(mut w: W, params: &ParameterSet) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.group.as_u8(), DTYPE_F64])?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParameterSet> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let [g, dtype] = take::<2, _>(&mut r)?;
        let group = Group::from_u8(g).ok_or_else(|| bad(format!("{name}: unknown group {g}")))?;
        if dtype != DTYPE_F64 {
            return Err(bad(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = u32::from_le_bytes(take(&mut r)?);
        if ndim != 2 {
            return Err(bad(format!("{name}: expected 2 dims, found {ndim}")));
        }
        let rows = u64::from_le_bytes(take(&mut r)?) as usize;
        let cols = u64::from_le_bytes(take(&mut r)?) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut r)?));
        }
        params.add(name, group, Mat::from_vec(rows, cols, data))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParameterSet) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(std::io::BufWriter::new(f), params).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(std::io::BufReader::new(f))
}

/// Copies every value of `src` into `dst` by name, requiring identical layouts.
pub fn assign(dst: &mut ParameterSet, src: &ParameterSet) -> Result<()> {
    if !dst.same_layout(src) {
        return Err(bad("checkpoint layout does not match the model"));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.get(id).name.clone();
        dst.get_mut(id).value = src.by_name(&name).expect("same layout").value.clone();
    }
    Ok(())
}

/// Elementwise running mean `m_k = m_{k-1} + (x_k − m_{k-1}) / k`, which
/// returns identical inputs unchanged.
pub fn average(checkpoints: &[&ParameterSet]) -> Result<ParameterSet> {
    let first = checkpoints.first().ok_or_else(|| bad("nothing to average"))?;
    if checkpoints.iter().any(|c| !first.same_layout(c)) {
        return Err(bad("checkpoints differ in names or shapes"));
    }
    let mut out = (*first).clone();
    let ids: Vec<_> = out.ids().collect();
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        let kf = (k + 1) as f64;
        for &id in &ids {
            let x = c.value(id).data().to_vec();
            for (m, v) in out.get_mut(id).value.data_mut().iter_mut().zip(x) {
                *m += (v - *m) / kf;
            }
        }
    }
    Ok(out)
}

pub fn model_config(cfg: &Config, vocab: &Vocabulary, tags: &TagVocabs) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        pos_size: tags.pos.len(),
        ner_size: tags.ner.len(),
        word_dim: cfg.word_dim,
        bio_dim: cfg.bio_dim,
        pos_dim: cfg.pos_dim,
        ner_dim: cfg.ner_dim,
        hidden: cfg.hidden_size,
        layers: cfg.layers,
        dropout: cfg.dropout,
    }
}

/// Fresh model whose parameters are drawn from a generator seeded with
/// `cfg.seed`.
pub fn init_model(cfg: &Config, vocab: &Vocabulary, tags: &TagVocabs) -> Result<(Model, ParameterSet)> {
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(model_config(cfg, vocab, tags), &mut params, &mut rng)?;
    Ok((model, params))
}

/// A trained model with everything needed to run it.
pub struct ModelDir {
    pub config: Config,
    pub vocab: Vocabulary,
    pub tags: TagVocabs,
    pub model: Model,
    pub params: ParameterSet,
}

pub fn save_model_dir(
    dir: impl AsRef<Path>,
    config: &Config,
    vocab: &Vocabulary,
    tags: &TagVocabs,
    params: &ParameterSet,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(VOCAB_FILE, vocab.to_json()?)?;
    write(TAGS_FILE, serde_json::to_string(tags)?)?;
    write(CONFIG_FILE, config.to_kv_string())?;
    save_params(dir.join(PARAMS_FILE), params)
}

pub fn load_model_dir(dir: impl AsRef<Path>) -> Result<ModelDir> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let config = Config::parse_str(&read(CONFIG_FILE)?)?;
    let vocab = Vocabulary::from_json(&read(VOCAB_FILE)?)?;
    let tags: TagVocabs = serde_json::from_str(&read(TAGS_FILE)?)?;
    let saved = load_params(dir.join(PARAMS_FILE))?;
    let mut params = ParameterSet::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let model = Model::new(model_config(&config, &vocab, &tags), &mut params, &mut rng)?;
    assign(&mut params, &saved)?;
    Ok(ModelDir {
        config,
        vocab,
        tags,
        model,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.add("a", Group::QgCore, Mat::from_vec(1, 2, vec![1.5, -2.0])).unwrap();
        p.add("k", Group::Knowledge, Mat::from_vec(2, 1, vec![0.25, 1e-300]))
            .unwrap();
        p
    }

    #[test]
    fn byte_roundtrip_and_layout() {
        let mut buf = Vec::new();
        write_params(&mut buf, &toy()).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(buf[16], b'a');
        let back = read_params(&buf[..]).unwrap();
        assert!(back.same_layout(&toy()));
        assert_eq!(back.by_name("k").unwrap().value, toy().by_name("k").unwrap().value);
        assert_eq!(back.by_name("k").unwrap().group, Group::Knowledge);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut buf = Vec::new();
        write_params(&mut buf, &toy()).unwrap();
        assert!(read_params(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_params(&extra[..]).is_err());
        let mut magic = buf;
        magic[0] = b'X';
        assert!(read_params(&magic[..]).is_err());
    }

    #[test]
    fn average_of_two_scalars() {
        let mk = |v| {
            let mut p = ParameterSet::new();
            p.add("x", Group::QgCore, Mat::scalar(v)).unwrap();
            p
        };
        let (a, b) = (mk(1.0), mk(4.0));
        assert_eq!(average(&[&a, &b]).unwrap().by_name("x").unwrap().value.item(), 2.5);
        let mut c = ParameterSet::new();
        c.add("y", Group::QgCore, Mat::scalar(0.0)).unwrap();
        assert!(average(&[&a, &c]).is_err());
    }
}
