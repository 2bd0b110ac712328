//! Versioned binary model snapshot: little-endian named f64 tensors plus
//! string metadata describing the field layout and architecture, so a saved
//! model can be rebuilt and evaluated without the original config.
//!
//! Layout: 8-byte magic, u32 version, metadata pairs, tensor records. All
//! integers are u64 LE unless noted; strings are length-prefixed UTF-8;
//! tensor data is row-major f64 LE.

use crate::backbone::{NetArch, Network, SegmentScheme};
use crate::diffcore::{ParamArena, Tensor};
use crate::encoding::FieldSchema;
use crate::trainer::TrainedModel;
use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"ADSNCKPT";
const VERSION: u32 = 1;

const THRESHOLDS_TENSOR: &str = "scheme.thresholds";
const MEANS_TENSOR: &str = "scheme.means";

// === raw container ===

/// Checkpoint contents before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// name -> (values, is_sparse)
    pub tensors: BTreeMap<String, (Tensor, bool)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(
                "truncated checkpoint: wanted {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        if len > self.bytes.len() {
            bail!("corrupt checkpoint: {what} claims length {len}");
        }
        String::from_utf8(self.take(len, what)?.to_vec())
            .with_context(|| format!("{what} is not valid UTF-8"))
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.u64(ckpt.meta.len() as u64);
    for (k, v) in &ckpt.meta {
        w.str(k);
        w.str(v);
    }
    w.u64(ckpt.tensors.len() as u64);
    for (name, (t, sparse)) in &ckpt.tensors {
        w.str(name);
        w.u64(t.rows() as u64);
        w.u64(t.cols() as u64);
        w.buf.push(u8::from(*sparse));
        for &v in t.data() {
            w.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &w.buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(8, "magic")? != MAGIC {
        bail!("{}: not a checkpoint file (bad magic)", path.display());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        bail!("{}: unsupported checkpoint version {version}, expected {VERSION}", path.display());
    }

    let mut meta = BTreeMap::new();
    let n_meta = r.u64("meta count")?;
    for _ in 0..n_meta {
        let k = r.str("meta key")?;
        let v = r.str("meta value")?;
        meta.insert(k, v);
    }

    let mut tensors = BTreeMap::new();
    let n_tensors = r.u64("tensor count")?;
    for _ in 0..n_tensors {
        let name = r.str("tensor name")?;
        let rows = r.u64("tensor rows")? as usize;
        let cols = r.u64("tensor cols")? as usize;
        let sparse = r.take(1, "sparse flag")?[0] != 0;
        let n = rows
            .checked_mul(cols)
            .with_context(|| format!("tensor {name}: shape overflow"))?;
        let raw = r.take(8 * n, &format!("tensor {name} data"))?;
        let mut t = Tensor::zeros(rows, cols);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            t.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        tensors.insert(name, (t, sparse));
    }
    if r.pos != bytes.len() {
        bail!("{}: {} trailing bytes after checkpoint payload", path.display(), bytes.len() - r.pos);
    }
    Ok(Checkpoint { meta, tensors })
}

// === model-level save/load ===

fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .with_context(|| format!("checkpoint metadata missing `{key}`"))
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    meta_get(meta, key)?
        .parse()
        .with_context(|| format!("checkpoint metadata `{key}` is not an integer"))
}

/// Saves the evaluation network, the segment scheme, and enough layout
/// metadata to rebuild both.
pub fn save_model(path: &Path, model: &TrainedModel, schema: &FieldSchema) -> Result<()> {
    let net = model.eval_network();
    let mut tensors = BTreeMap::new();
    for &id in net.param_ids() {
        let p = model.arena.get(id);
        tensors.insert(p.name().to_string(), (p.value.clone(), p.is_sparse()));
    }
    tensors.insert(
        THRESHOLDS_TENSOR.to_string(),
        (Tensor::row_vector(model.scheme.thresholds().to_vec()), false),
    );
    tensors.insert(
        MEANS_TENSOR.to_string(),
        (Tensor::row_vector(model.scheme.means().to_vec()), false),
    );

    let mut meta = BTreeMap::new();
    meta.insert("eval_prefix".into(), model.eval_prefix().to_string());
    meta.insert("embedding_dim".into(), schema.embedding_dim().to_string());
    meta.insert("n_experts".into(), model.arch.n_experts.to_string());
    meta.insert(
        "expert_hidden".into(),
        model
            .arch
            .expert_hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    meta.insert("adapter_hidden".into(), model.arch.adapter_hidden.to_string());
    meta.insert("n_ordinal".into(), model.arch.n_ordinal.to_string());
    let fields: Vec<String> = (0..schema.num_fields())
        .map(|f| format!("{}:{}", schema.field_name(f), schema.vocab_size(f)))
        .collect();
    meta.insert("fields".into(), fields.join(";"));

    save(path, &Checkpoint { meta, tensors })
}

/// A checkpoint rebuilt into a runnable network.
pub struct LoadedModel {
    pub arena: ParamArena,
    pub network: Network,
    pub scheme: SegmentScheme,
    pub schema: FieldSchema,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = load(path)?;
    let meta = &ckpt.meta;

    let mut fields = Vec::new();
    for part in meta_get(meta, "fields")?.split(';') {
        let Some((name, vocab)) = part.split_once(':') else {
            bail!("checkpoint metadata `fields` entry `{part}` is not name:vocab");
        };
        let vocab: usize = vocab
            .parse()
            .with_context(|| format!("field `{name}` has non-integer vocabulary `{vocab}`"))?;
        fields.push((name.to_string(), vocab));
    }
    let schema = FieldSchema::new(fields, meta_usize(meta, "embedding_dim")?)?;

    let expert_hidden: Vec<usize> = meta_get(meta, "expert_hidden")?
        .split(',')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .context("checkpoint metadata `expert_hidden` is not a list of integers")?;
    let arch = NetArch {
        n_experts: meta_usize(meta, "n_experts")?,
        expert_hidden,
        adapter_hidden: meta_usize(meta, "adapter_hidden")?,
        n_ordinal: meta_usize(meta, "n_ordinal")?,
    };

    let (thresholds, _) = ckpt
        .tensors
        .get(THRESHOLDS_TENSOR)
        .with_context(|| format!("checkpoint missing tensor `{THRESHOLDS_TENSOR}`"))?;
    let (means, _) = ckpt
        .tensors
        .get(MEANS_TENSOR)
        .with_context(|| format!("checkpoint missing tensor `{MEANS_TENSOR}`"))?;
    let scheme =
        SegmentScheme::from_parts(thresholds.data().to_vec(), means.data().to_vec())?;
    if scheme.num_heads() != arch.n_ordinal {
        bail!(
            "checkpoint scheme has {} heads but architecture declares {}",
            scheme.num_heads(),
            arch.n_ordinal
        );
    }

    // rebuild the network shell, then overwrite every parameter
    let prefix = meta_get(meta, "eval_prefix")?.to_string();
    let mut arena = ParamArena::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let network = Network::new(&mut arena, &mut rng, &prefix, &schema, &arch);

    let mut used = 2usize; // the two scheme tensors
    for &id in network.param_ids() {
        let (name, rows, cols, sparse) = {
            let p = arena.get(id);
            (p.name().to_string(), p.value.rows(), p.value.cols(), p.is_sparse())
        };
        let Some((t, stored_sparse)) = ckpt.tensors.get(&name) else {
            bail!("checkpoint missing tensor `{name}`");
        };
        if t.shape() != (rows, cols) {
            bail!(
                "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                (rows, cols)
            );
        }
        if *stored_sparse != sparse {
            bail!("checkpoint tensor `{name}` sparse flag mismatch");
        }
        arena.get_mut(id).value = t.clone();
        used += 1;
    }
    if used != ckpt.tensors.len() {
        let known: Vec<&String> = ckpt
            .tensors
            .keys()
            .filter(|k| {
                k.as_str() != THRESHOLDS_TENSOR
                    && k.as_str() != MEANS_TENSOR
                    && !network
                        .param_ids()
                        .iter()
                        .any(|&id| arena.get(id).name() == k.as_str())
            })
            .collect();
        bail!("checkpoint has unexpected tensors: {known:?}");
    }

    Ok(LoadedModel { arena, network, scheme, schema })
}
