//! Run manifests and checkpoint directories. Every artifact-producing run
//! records its full configuration, data hashes, and a self-hash so results
//! can be traced back to exact inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::{self, BagParams, Model};
use crate::sentrep::{Ablation, RelationHead};
use crate::structinput::SubwordTokenizer;
use crate::train::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "tokenizer.vocab";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub encoder: EncoderConfig,
    /// Variant flag, see [`Ablation`].
    pub ablation: String,
    /// Relation labels in classifier-index order.
    pub relations: Vec<String>,
    /// Task-specific tokens appended to the base vocabulary, in id order.
    pub added_tokens: Vec<String>,
    pub max_seq_length: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Input-file digests keyed by a short role name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub data_hashes: BTreeMap<String, String>,
    /// Digest over every field above, filled by [`Manifest::seal`].
    #[serde(default)]
    pub config_hash: String,
}

impl Manifest {
    pub fn new(
        encoder: EncoderConfig,
        ablation: Ablation,
        relations: Vec<String>,
        added_tokens: Vec<String>,
        max_seq_length: usize,
        seed: u64,
    ) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            encoder,
            ablation: ablation.flag().to_string(),
            relations,
            added_tokens,
            max_seq_length,
            seed,
            train: None,
            data_hashes: BTreeMap::new(),
            config_hash: String::new(),
        }
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::from_str(&self.ablation)
            .map_err(|_| Error::Checkpoint(format!("unknown ablation flag {:?}", self.ablation)))
    }

    pub fn compute_hash(&self) -> String {
        let mut unsealed = self.clone();
        unsealed.config_hash = String::new();
        let bytes = serde_json::to_vec(&unsealed).expect("manifest serializes");
        sha256_bytes(&bytes)
    }

    pub fn seal(&mut self) {
        self.config_hash = self.compute_hash();
    }

    pub fn is_sealed(&self) -> bool {
        !self.config_hash.is_empty() && self.config_hash == self.compute_hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("parsing {}: {e}", path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        if !manifest.is_sealed() {
            return Err(Error::Checkpoint(format!(
                "manifest {} failed its self-hash; edited or truncated",
                path.display()
            )));
        }
        Ok(manifest)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex(&hasher.finalize()))
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes tensors, vocabulary, and sealed manifest into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    tokenizer: &SubwordTokenizer,
    manifest: &mut Manifest,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model::save_tensors(model, dir)?;
    tokenizer.write_vocab_file(&dir.join(VOCAB_FILE))?;
    manifest.seal();
    manifest.save(&dir.join(MANIFEST_FILE))
}

/// Restores a checkpoint directory. Shape and inventory mismatches surface
/// as checkpoint errors naming the offending tensor.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, SubwordTokenizer, Manifest)> {
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let ablation = manifest.ablation()?;
    if manifest.relations.is_empty() {
        return Err(Error::Checkpoint("manifest lists no relations".into()));
    }
    if manifest.encoder.added_tokens != manifest.added_tokens.len() {
        return Err(Error::Checkpoint(format!(
            "encoder reserves {} added rows but manifest lists {} tokens",
            manifest.encoder.added_tokens,
            manifest.added_tokens.len()
        )));
    }
    manifest.encoder.validate()?;

    let d = manifest.encoder.hidden_dim;
    let mut model = Model {
        encoder: EncoderParams::zeros(&manifest.encoder),
        relhead: RelationHead::zeros(d),
        bag: BagParams::zeros(ablation.repr_dim(d), manifest.relations.len()),
        ablation,
        num_relations: manifest.relations.len(),
    };
    model::load_tensors(&mut model, dir)?;

    let mut tokenizer = SubwordTokenizer::from_vocab_file(&dir.join(VOCAB_FILE))?;
    tokenizer.mark_atomic(&manifest.added_tokens)?;
    if tokenizer.len() != manifest.encoder.total_vocab() {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, encoder expects {}",
            tokenizer.len(),
            manifest.encoder.total_vocab()
        )));
    }
    Ok((model, tokenizer, manifest))
}
