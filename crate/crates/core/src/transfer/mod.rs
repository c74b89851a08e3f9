//! Checkpoint files and the transplant of pretrained comprehension layers
//! into a seq2seq model.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::{McConfig, McModel};
use crate::params::{Param, ParamStore};
use crate::seq2seq::{MacnetMode, Seq2SeqModel, TransplantDims};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Manifest, ModelKind, TensorEntry, FORMAT_VERSION, MAGIC,
};

/// Metadata key holding a model's serialized config.
pub const CONFIG_KEY: &str = "model_config";
const FREEZE_KEY: &str = "freeze";

/// Whether each transplanted layer is held fixed during seq2seq training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub encoder: bool,
    pub modeling: bool,
}

/// The pretrained encoder and modeling layer with the config they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferBundle {
    pub source: McConfig,
    /// Exactly the encoder and modeling tensors, under their original names.
    pub params: ParamStore,
    pub freeze: FreezePolicy,
}

/// What [`attach`] added to a parameter store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttachReport {
    pub transplanted: Vec<String>,
    /// Newly initialized task-side layers: adapters, integration LSTM, `W_q`.
    pub bridges: Vec<String>,
    pub added_elements: usize,
}

impl TransferBundle {
    pub fn dims(&self) -> TransplantDims {
        TransplantDims::from_mc(&self.source)
    }

    fn layers(&self) -> Result<McModel> {
        McModel::new(self.source.clone())
    }

    pub fn encoder_names(&self) -> Result<Vec<String>> {
        Ok(self.layers()?.encoder.param_names())
    }

    pub fn modeling_names(&self) -> Result<Vec<String>> {
        Ok(self.layers()?.modeling.param_names())
    }

    /// Serializes the bundle as a self-describing checkpoint.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Bundle, self.params.clone())
            .with_meta(CONFIG_KEY, &self.source)?
            .with_meta(FREEZE_KEY, self.freeze)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Bundle)?;
        let bundle = TransferBundle {
            source: ckpt.meta(CONFIG_KEY)?,
            params: ckpt.params.clone(),
            freeze: ckpt.meta(FREEZE_KEY).unwrap_or_default(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks the tensor set and every shape against the source config.
    pub fn validate(&self) -> Result<()> {
        let reference = reference_layers(&self.source, 0)?;
        if self.params.len() != reference.len() {
            return Err(Error::Extraction(format!(
                "bundle holds {} tensors, config implies {}",
                self.params.len(),
                reference.len()
            )));
        }
        for (name, p) in reference.iter() {
            let got = self
                .params
                .get(name)
                .ok_or_else(|| Error::Extraction(format!("missing tensor {name}")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Extraction(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Freshly initialized encoder and modeling layers for `config`.
fn reference_layers(config: &McConfig, seed: u64) -> Result<ParamStore> {
    let model = McModel::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    model.encoder.init(&mut ps, &mut rng)?;
    model.modeling.init(&mut ps, &mut rng)?;
    Ok(ps)
}

/// Pulls the encoder and modeling layer out of a comprehension checkpoint.
pub fn extract_bundle(ckpt: &Checkpoint, freeze: FreezePolicy) -> Result<TransferBundle> {
    ckpt.expect_kind(ModelKind::Mc)?;
    let source: McConfig = ckpt
        .meta(CONFIG_KEY)
        .map_err(|e| Error::Extraction(format!("comprehension config: {e}")))?;
    let model = McModel::new(source.clone())?;
    let mut params = ParamStore::new();
    for name in model
        .encoder
        .param_names()
        .into_iter()
        .chain(model.modeling.param_names())
    {
        let p = ckpt
            .params
            .get(&name)
            .ok_or_else(|| Error::Extraction(format!("checkpoint lacks {name}")))?;
        params.insert_param(name, Param::new(p.value.clone()))?;
    }
    let bundle = TransferBundle { source, params, freeze };
    bundle.validate()?;
    Ok(bundle)
}

/// Same structure, values re-drawn from the standard initializers.
pub fn randomize_bundle(bundle: &TransferBundle, seed: u64) -> Result<TransferBundle> {
    Ok(TransferBundle {
        source: bundle.source.clone(),
        params: reference_layers(&bundle.source, seed ^ 0x7a4d_90e1)?,
        freeze: bundle.freeze,
    })
}

/// Wires the bundle into `ps` for `model`'s mode: transplanted tensors are
/// copied in (re-drawn for random-init), task-side bridges are initialized
/// from `seed`. Existing entries are never modified.
pub fn attach(bundle: &TransferBundle, model: &Seq2SeqModel, ps: &mut ParamStore, seed: u64) -> Result<AttachReport> {
    let mode = model.config.macnet;
    if mode == MacnetMode::Off {
        return Ok(AttachReport::default());
    }
    match model.config.transplant {
        Some(d) if d == bundle.dims() => {}
        other => {
            return Err(Error::Wiring(format!(
                "model expects transplant dims {other:?}, bundle provides {:?}",
                bundle.dims()
            )))
        }
    }
    let randomized;
    let source = if mode == MacnetMode::RandomInit {
        randomized = randomize_bundle(bundle, seed)?;
        &randomized
    } else {
        bundle
    };

    let count_before = ps.num_elements();
    let mut report = AttachReport::default();
    let mut take = |names: Vec<String>, frozen: bool, ps: &mut ParamStore| -> Result<()> {
        for name in names {
            let p = source
                .params
                .get(&name)
                .ok_or_else(|| Error::Wiring(format!("bundle lacks {name}")))?;
            ps.insert_param(
                name.clone(),
                Param {
                    value: p.value.clone(),
                    frozen,
                    pad_row: false,
                },
            )
            .map_err(|_| Error::Wiring(format!("{name} already present")))?;
            report.transplanted.push(name);
        }
        Ok(())
    };
    if mode.uses_encoding() {
        take(source.encoder_names()?, source.freeze.encoder, ps)?;
    }
    if mode.uses_modeling() {
        take(source.modeling_names()?, source.freeze.modeling, ps)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let have: Vec<String> = ps.names().map(str::to_string).collect();
    model.init_bridges(ps, &mut rng)?;
    report.bridges = ps
        .names()
        .filter(|n| !have.contains(&n.to_string()))
        .map(str::to_string)
        .collect();
    report.added_elements = ps.num_elements() - count_before;
    Ok(report)
}

/// Parameters for `model`: native layers from `seed`, plus the bundle when
/// the mode needs one.
pub fn build_params(model: &Seq2SeqModel, bundle: Option<&TransferBundle>, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    model.init_native(&mut ps, &mut rng)?;
    match (model.config.macnet.needs_bundle(), bundle) {
        (false, _) => {}
        (true, Some(b)) => {
            attach(b, model, &mut ps, seed.wrapping_add(1))?;
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "macnet mode {} needs a pretrained comprehension checkpoint",
                model.config.macnet
            )))
        }
    }
    Ok(ps)
}
