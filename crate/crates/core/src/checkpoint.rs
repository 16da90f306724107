//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header
//! (component tag, model config, tau config + lambda, vocabulary, loss
//! history, tensor directory), then raw little-endian `f64` tensor data in
//! directory order. Tensors are sorted by name on save, so identical state
//! always serializes to identical bytes, and a save/load round trip is
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tau::TauConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CSUMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    component: String,
    model_config: serde_json::Value,
    tau: Option<TauConfig>,
    lambda: Option<f64>,
    vocab: Vec<String>,
    loss_history: Vec<f64>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Which model this holds, e.g. `summarizer` or `discriminator`.
    pub component: String,
    pub model_config: serde_json::Value,
    pub tau: Option<TauConfig>,
    pub lambda: Option<f64>,
    /// Non-reserved vocabulary tokens in id order.
    pub vocab: Vec<String>,
    pub loss_history: Vec<f64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<C: Serialize>(
        component: &str,
        model_config: &C,
        tau: Option<TauConfig>,
        lambda: Option<f64>,
        vocab: &Vocab,
        loss_history: Vec<f64>,
        params: &Parameters,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = params
            .ids()
            .map(|id| (params.name(id).to_string(), params.value(id).clone()))
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            component: component.to_string(),
            model_config: serde_json::to_value(model_config).expect("serializable config"),
            tau,
            lambda,
            vocab: vocab.real_tokens().to_vec(),
            loss_history,
            tensors,
        }
    }

    /// Copy stored tensors into an already-registered parameter set.
    /// Every parameter must be present with a matching shape.
    pub fn restore_params(&self, params: &mut Parameters) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let stored = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format {
                    path: "checkpoint".into(),
                    reason: format!("missing tensor `{name}`"),
                })?;
            if stored.1.shape() != params.value(id).shape() {
                return Err(Error::Format {
                    path: "checkpoint".into(),
                    reason: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        stored.1.shape(),
                        params.value(id).shape()
                    ),
                });
            }
            *params.value_mut(id) = stored.1.clone();
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(self.vocab.clone())
    }

    pub fn typed_config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.model_config.clone()).map_err(|e| Error::Format {
            path: "checkpoint".into(),
            reason: format!("model config: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            component: self.component.clone(),
            model_config: self.model_config.clone(),
            tau: self.tau.clone(),
            lambda: self.lambda,
            vocab: self.vocab.clone(),
            loss_history: self.loss_history.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorMeta { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let err = |reason: String| Error::Format { path: path.display().to_string(), reason };
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let mut long = [0u8; 8];
        f.read_exact(&mut long)?;
        let header_len = u64::from_le_bytes(long) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| err(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let n: usize = meta.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            f.read_exact(&mut raw)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::from_vec(&meta.shape, data)
                .map_err(|e| err(format!("tensor `{}`: {e}", meta.name)))?;
            tensors.push((meta.name.clone(), tensor));
        }
        Ok(Checkpoint {
            component: header.component,
            model_config: header.model_config,
            tau: header.tau,
            lambda: header.lambda,
            vocab: header.vocab,
            loss_history: header.loss_history,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RawRecord;
    use crate::params::normal_init;
    use crate::rng::{stream_rng, Stream};

    fn sample_checkpoint() -> Checkpoint {
        let mut params = Parameters::new();
        let mut rng = stream_rng(3, Stream::ParamInit);
        params.register("zeta", normal_init(&mut rng, &[3, 4], 0.5));
        params.register("alpha", normal_init(&mut rng, &[2], 0.5));
        let records = vec![RawRecord {
            id: "r".into(),
            document: "beta alpha beta".into(),
            summary: None,
        }];
        let vocab = Vocab::build(&records, 16).unwrap();
        Checkpoint::from_params(
            "summarizer",
            &serde_json::json!({"d_model": 8}),
            Some(TauConfig::default()),
            Some(0.5),
            &vocab,
            vec![2.5, 1.25],
            &params,
        )
    }

    #[test]
    fn tensors_are_sorted_by_name() {
        let ckpt = sample_checkpoint();
        assert_eq!(ckpt.tensors[0].0, "alpha");
        assert_eq!(ckpt.tensors[1].0, "zeta");
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.component, ckpt.component);
        assert_eq!(loaded.lambda, ckpt.lambda);
        assert_eq!(loaded.tau, ckpt.tau);
        assert_eq!(loaded.vocab, ckpt.vocab);
        assert_eq!(loaded.loss_history, ckpt.loss_history);
        for ((n1, t1), (n2, t2)) in ckpt.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
        // a second save of the loaded checkpoint is byte-identical
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn restore_requires_matching_names_and_shapes() {
        let ckpt = sample_checkpoint();
        let mut params = Parameters::new();
        params.register("alpha", Tensor::zeros(&[2]));
        params.register("zeta", Tensor::zeros(&[3, 4]));
        ckpt.restore_params(&mut params).unwrap();
        assert_eq!(params.value(params.id("zeta").unwrap()), &ckpt.tensors[1].1);

        let mut missing = Parameters::new();
        missing.register("other", Tensor::zeros(&[1]));
        assert!(ckpt.restore_params(&mut missing).is_err());

        let mut wrong_shape = Parameters::new();
        wrong_shape.register("alpha", Tensor::zeros(&[3]));
        assert!(ckpt.restore_params(&mut wrong_shape).is_err());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn vocab_reconstruction_preserves_ids() {
        let ckpt = sample_checkpoint();
        let vocab = ckpt.vocab();
        assert_eq!(vocab.token(6), "beta"); // most frequent real token
        assert_eq!(vocab.token(7), "alpha");
    }
}
