//! Model checkpoints: a text header followed by little-endian `f32`
//! parameters.
//!
//! ```text
//! ADVSHIELD-CKPT 1
//! kind=classifier
//! topology=conv(1>16,k3,s1,p1)-gelu-...
//! topology_hash=9f2c...
//! seed=1
//! params=216170
//! meta.epochs=5
//!
//! <params * 4 bytes>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::classifier::{classifier_topology, Classifier, TrainMeta};
use crate::defense::Autoencoder;
use crate::error::{Error, Result};
use crate::nn::{parse_topology, topology_descriptor, topology_hash, Layer, Network};

pub const MAGIC: &str = "ADVSHIELD-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub params: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!(
            "{MAGIC} {VERSION}\nkind={}\ntopology={}\ntopology_hash={}\nseed={}\nparams={}\n",
            self.kind,
            topology_descriptor(&self.layers),
            topology_hash(&self.layers),
            self.seed,
            self.params.len()
        );
        for (k, v) in &self.meta {
            head.push_str(&format!("meta.{}={}\n", k.replace(['\n', '='], "_"), v.replace('\n', " ")));
        }
        head.push('\n');
        let mut out = head.into_bytes();
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let split = bytes.windows(2).position(|w| w == b"\n\n").ok_or_else(|| bad("header not terminated".into()))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let body = &bytes[split + 2..];
        let mut lines = head.lines();
        let first = lines.next().unwrap_or_default();
        if first != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("unsupported format line {first:?}")));
        }
        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            match k.strip_prefix("meta.") {
                Some(m) => meta.insert(m.to_string(), v.to_string()),
                None => fields.insert(k.to_string(), v.to_string()),
            };
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing header field {k}")));
        let layers = parse_topology(field("topology")?)?;
        let stored = field("topology_hash")?;
        if *stored != topology_hash(&layers) {
            return Err(Error::TopologyMismatch { expected: topology_hash(&layers), found: stored.clone() });
        }
        let count: usize = field("params")?.parse().map_err(|_| bad("params is not a count".into()))?;
        if body.len() != count * 4 {
            return Err(bad(format!("expected {} parameter bytes, found {}", count * 4, body.len())));
        }
        let params = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self {
            kind: field("kind")?.clone(),
            layers,
            seed: field("seed")?.parse().map_err(|_| bad("seed is not an integer".into()))?,
            params,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless the checkpoint is of `kind` with exactly `layers`.
    fn expect(&self, kind: &str, layers: &[Layer]) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        if self.layers != layers {
            return Err(Error::TopologyMismatch {
                expected: topology_hash(layers),
                found: topology_hash(&self.layers),
            });
        }
        Ok(())
    }
}

pub fn classifier_checkpoint(model: &Classifier<f32>, extra: &BTreeMap<String, String>) -> Checkpoint {
    let mut meta = extra.clone();
    meta.insert("epochs".into(), model.meta.epochs.to_string());
    if let Some(acc) = model.meta.clean_accuracy {
        meta.insert("clean_accuracy".into(), format!("{acc:.6}"));
    }
    Checkpoint {
        kind: "classifier".into(),
        layers: model.network().layers().to_vec(),
        seed: model.meta.seed,
        params: model.network().flat_params(),
        meta,
    }
}

pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<Classifier<f32>> {
    ck.expect("classifier", &classifier_topology())?;
    let meta = TrainMeta {
        epochs: ck.meta.get("epochs").and_then(|v| v.parse().ok()).unwrap_or(0),
        seed: ck.seed,
        clean_accuracy: ck.meta.get("clean_accuracy").and_then(|v| v.parse().ok()),
    };
    Classifier::from_network(Network::from_flat(ck.layers.clone(), &ck.params)?, meta)
}

pub fn autoencoder_checkpoint(ae: &Autoencoder<f32>, seed: u64, extra: &BTreeMap<String, String>) -> Checkpoint {
    let mut meta: BTreeMap<String, String> = ae.meta.iter().cloned().collect();
    meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    meta.insert("bottleneck".into(), ae.bottleneck().to_string());
    Checkpoint {
        kind: "autoencoder".into(),
        layers: ae.network().layers().to_vec(),
        seed,
        params: ae.network().flat_params(),
        meta,
    }
}

pub fn autoencoder_from_checkpoint(ck: &Checkpoint) -> Result<Autoencoder<f32>> {
    let bottleneck = ck.meta.get("bottleneck").and_then(|v| v.parse().ok()).unwrap_or(0);
    ck.expect("autoencoder", &crate::defense::autoencoder_topology(bottleneck))?;
    let mut ae = Autoencoder::from_network(Network::from_flat(ck.layers.clone(), &ck.params)?)?;
    ae.meta = ck.meta.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    Ok(ae)
}

pub fn save_classifier(
    path: impl AsRef<Path>,
    model: &Classifier<f32>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    classifier_checkpoint(model, extra).save(path)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<Classifier<f32>> {
    classifier_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_autoencoder(
    path: impl AsRef<Path>,
    ae: &Autoencoder<f32>,
    seed: u64,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    autoencoder_checkpoint(ae, seed, extra).save(path)
}

pub fn load_autoencoder(path: impl AsRef<Path>) -> Result<Autoencoder<f32>> {
    autoencoder_from_checkpoint(&Checkpoint::load(path)?)
}
