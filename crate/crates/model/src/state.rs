use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, BOX_CODE_LEN};
use crate::tensor::Tensor;
use crate::ModelError;

/// Initial class-logit bias: sigmoid of it is the 0.01 foreground prior.
const CLS_PRIOR_BIAS: f64 = -4.595_119_850_134_59;

/// Every learnable parameter, keyed by a dotted path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    He(usize),
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier(usize, usize),
    Normal(f64),
    Const(f64),
    /// Logit of a uniform draw in `(0.05, 0.95)`.
    Logit,
}

struct Builder {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::He(fan_in) => {
                let a = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
            Init::Xavier(fi, fo) => {
                let a = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
            Init::Normal(s) => (0..n).map(|_| s * self.rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Logit => (0..n)
                .map(|_| {
                    let u: f64 = self.rng.random_range(0.05..0.95);
                    (u / (1.0 - u)).ln()
                })
                .collect(),
        };
        let prev = self.params.insert(name.clone(), Tensor::new(shape, data));
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.add(format!("{name}.w"), vec![cout, cin, k, k], Init::He(cin * k * k));
        self.add(format!("{name}.b"), vec![cout], Init::Const(0.0));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.add(format!("{name}.w"), vec![din, dout], Init::Xavier(din, dout));
        self.add(format!("{name}.b"), vec![dout], Init::Const(0.0));
    }

    fn res_unit(&mut self, name: &str, c: usize) {
        self.conv(&format!("{name}.c1"), c, c, 3);
        self.conv(&format!("{name}.c2"), c, c, 3);
    }

    fn layer_norm(&mut self, name: &str, d: usize) {
        self.add(format!("{name}.g"), vec![d], Init::Const(1.0));
        self.add(format!("{name}.b"), vec![d], Init::Const(0.0));
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }
}

impl ModelState {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        };
        let [c0, c1, c] = config.backbone_channels;
        let d = config.embed_dim;
        b.conv("backbone.stem", c0, 3, 4);
        b.conv("backbone.stage2", c1, c0, 3);
        b.conv("backbone.stage3", c, c1, 3);
        b.conv("backbone.f5", c, c, 3);

        b.res_unit("seg.ru", c);
        b.conv("seg.proj", config.semantic_channels, c, 1);
        for ru in ["dep.ru1", "dep.ru2", "dep.ru3"] {
            b.res_unit(ru, c);
        }
        b.conv("dep.dcl1", c, c, 3);
        b.conv("dep.dcl2", c, c, 3);
        b.conv("dep.proj", config.depth_bins, c, 1);

        b.add("pqb.sw".into(), vec![config.semantic_channels], Init::Const(1.0));
        if config.task.has_detection() {
            b.add("query.det".into(), vec![config.num_det_queries, d], Init::Normal(1.0));
            b.add("query.ref".into(), vec![config.num_det_queries, 2], Init::Logit);
            b.linear("query.pos1", 2, d);
            b.linear("query.pos2", d, d);
        }
        if config.task.has_bev() {
            b.add("query.bev".into(), vec![config.num_bev_queries, d], Init::Normal(1.0));
        }

        let (fh, fw) = config.feature_size();
        b.linear("dec.input", c, d);
        b.add("dec.view_embed".into(), vec![config.num_views, d], Init::Normal(0.1));
        b.add("dec.pos_embed".into(), vec![fh * fw, d], Init::Normal(0.1));
        for l in 0..config.decoder_layers {
            b.attention(&format!("dec.{l}.self"), d);
            b.attention(&format!("dec.{l}.cross"), d);
            b.linear(&format!("dec.{l}.ffn1"), d, config.ffn_dim);
            b.linear(&format!("dec.{l}.ffn2"), config.ffn_dim, d);
            for ln in ["ln1", "ln2", "ln3"] {
                b.layer_norm(&format!("dec.{l}.{ln}"), d);
            }
        }

        if config.task.has_detection() {
            b.linear("det.cls", d, config.num_classes);
            b.params
                .get_mut("det.cls.b")
                .expect("just added")
                .data
                .fill(CLS_PRIOR_BIAS);
            b.linear("det.reg1", d, d);
            b.linear("det.reg2", d, BOX_CODE_LEN);
            b.linear("det.attr", d, config.num_attributes);
        }
        if config.task.has_bev() {
            let p = config.bev_patch;
            b.linear("bev.fc1", d, d);
            b.linear("bev.fc2", d, config.bev_channels * p * p);
        }
        Ok(Self {
            config: config.clone(),
            params: b.params,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Registers every parameter as a learnable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Writes a JSON header followed by little-endian `f64` blobs.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.num_scalars() * 8);
        for (name, t) in &self.params {
            entries.push(BlobEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset: payload.len(),
                nbytes: t.len() * 8,
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            meta: meta.clone(),
            params: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        fs::write(path, out).map_err(|e| ModelError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta), ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
        let corrupt = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(corrupt("missing header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(corrupt(&format!("unknown format {}", header.format)));
        }
        let payload = &bytes[8 + hlen..];
        let mut params = BTreeMap::new();
        for e in header.params {
            let raw = payload
                .get(e.offset..e.offset + e.nbytes)
                .ok_or_else(|| corrupt(&format!("blob {} out of bounds", e.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(corrupt(&format!("blob {} has wrong size", e.name)));
            }
            params.insert(e.name, Tensor::new(e.shape, data));
        }
        let expected = Self::init(&header.config, 0)?;
        if expected.params.len() != params.len()
            || expected
                .params
                .iter()
                .any(|(k, t)| params.get(k).map(|p| &p.shape) != Some(&t.shape))
        {
            return Err(corrupt("parameter set does not match the stored config"));
        }
        Ok((
            Self {
                config: header.config,
                params,
            },
            header.meta,
        ))
    }
}

const CHECKPOINT_FORMAT: &str = "sdtr-checkpoint-v1";

/// Run metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: Value,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<BlobEntry>,
}

/// Graph handles for the parameters of one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Parameter gradients after `Graph::backward`; parameters the loss
    /// does not reach get zeros.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (k.clone(), grad)
            })
            .collect()
    }
}
