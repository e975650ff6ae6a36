//! Model profiles and the on-disk registry.
//!
//! A registry directory holds one JSON document per artifact plus a
//! `manifest.json` naming them:
//!
//! ```text
//! manifest.json
//! space.json
//! predictor.json            (optional)
//! anchors/<n>-<id>.json
//! profiles/<n>-<id>.json
//! ```
//!
//! [`RegistryHandle`] gives readers lock-free immutable snapshots while a
//! single writer builds the next version and swaps it in atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::estimators::{
    calibrate_latency, calibrate_verbosity, complexity_score, AnchorMeasurement, LatencyMeasurement, LatencyProfile,
    LengthRecord, ModelPricing, VerbosityTable,
};
use crate::irt::{profile_new_model, CalibratedSpace, CalibrationConfig, LatentAbility, ProfilingObservation};
use crate::predictor::PredictorModel;

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "latent-router-registry";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    /// RFC 3339 timestamp or any caller-chosen label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onboarded_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_set_id: Option<String>,
}

/// Everything the router needs to know about one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub ability: LatentAbility,
    pub pricing: ModelPricing,
    /// Filled in by estimator calibration; required for routing.
    #[serde(default)]
    pub verbosity: Option<VerbosityTable>,
    /// Filled in by estimator calibration; required for routing.
    #[serde(default)]
    pub latency: Option<LatencyProfile>,
    pub tokenizer_id: String,
    #[serde(default)]
    pub metadata: ProfileMetadata,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(Error::invalid("empty model id"));
        }
        if self.ability.model_id != self.model_id {
            return Err(Error::invalid(format!(
                "profile `{}` carries the ability of `{}`",
                self.model_id, self.ability.model_id
            )));
        }
        self.ability.validate()?;
        self.pricing.validate()?;
        if let Some(v) = &self.verbosity {
            v.validate()?;
        }
        if let Some(l) = &self.latency {
            l.validate()?;
        }
        Ok(())
    }

    pub fn is_routable(&self) -> bool {
        self.verbosity.is_some() && self.latency.is_some()
    }
}

/// Inputs for building a profile from anchor runs.
#[derive(Clone, Debug)]
pub struct Onboarding<'a> {
    pub model_id: &'a str,
    pub measurements: &'a [AnchorMeasurement],
    pub pricing: ModelPricing,
    pub tokenizer_id: &'a str,
    pub anchor_set_id: Option<&'a str>,
    /// Requested verbosity bins; capped at the number of measurements.
    pub verbosity_bins: usize,
}

/// Profiles ability, verbosity and latency from anchor measurements alone.
/// Nothing in `space` is refit.
pub fn onboard_model(space: &CalibratedSpace, input: &Onboarding<'_>, config: &CalibrationConfig) -> Result<ModelProfile> {
    let obs: Vec<ProfilingObservation> = input
        .measurements
        .iter()
        .map(|m| ProfilingObservation::new(m.item_id.clone(), m.score))
        .collect();
    let ability = profile_new_model(input.model_id, &obs, space, config)?;
    let lengths = input
        .measurements
        .iter()
        .map(|m| {
            Ok(LengthRecord {
                item_id: m.item_id.clone(),
                score: complexity_score(space.item(&m.item_id)?)?,
                output_tokens: m.output_tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bins = input.verbosity_bins.min(lengths.len()).max(1);
    let verbosity = calibrate_verbosity(input.model_id, &lengths, bins)?;
    let timings: Vec<LatencyMeasurement> = input
        .measurements
        .iter()
        .map(|m| LatencyMeasurement {
            output_tokens: m.output_tokens,
            seconds: m.latency_seconds,
        })
        .collect();
    let latency = calibrate_latency(&timings)?;
    let profile = ModelProfile {
        model_id: input.model_id.to_string(),
        ability,
        pricing: input.pricing,
        verbosity: Some(verbosity),
        latency: Some(latency),
        tokenizer_id: input.tokenizer_id.to_string(),
        metadata: ProfileMetadata {
            display_name: None,
            onboarded_at: None,
            anchor_set_id: input.anchor_set_id.map(str::to_string),
        },
    };
    profile.validate()?;
    Ok(profile)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registry {
    pub space: CalibratedSpace,
    pub anchor_sets: BTreeMap<String, AnchorSet>,
    pub profiles: BTreeMap<String, ModelProfile>,
    pub predictor: Option<PredictorModel>,
    /// Incremented on every mutation.
    pub version: u64,
}

impl Registry {
    pub fn new(space: CalibratedSpace) -> Result<Self> {
        space.validate()?;
        Ok(Self {
            space,
            anchor_sets: BTreeMap::new(),
            profiles: BTreeMap::new(),
            predictor: None,
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    fn check_profile(&self, p: &ModelProfile) -> Result<()> {
        p.validate()?;
        if p.ability.dim() != self.space.dim {
            return Err(Error::invalid(format!(
                "profile `{}` has dimension {} but the registry space has dimension {}",
                p.model_id,
                p.ability.dim(),
                self.space.dim
            )));
        }
        if let Some(id) = &p.metadata.anchor_set_id {
            if !self.anchor_sets.contains_key(id) {
                return Err(Error::UnknownId {
                    kind: "anchor set",
                    id: id.clone(),
                });
            }
        }
        Ok(())
    }

    fn check_anchor_set(&self, id: &str, set: &AnchorSet) -> Result<()> {
        if set.dim != self.space.dim {
            return Err(Error::invalid(format!(
                "anchor set `{id}` has dimension {} but the registry space has dimension {}",
                set.dim, self.space.dim
            )));
        }
        for item in &set.item_ids {
            self.space.item(item)?;
        }
        Ok(())
    }

    fn check_predictor(&self, p: &PredictorModel) -> Result<()> {
        p.validate()?;
        if p.dim != self.space.dim {
            return Err(Error::invalid(format!(
                "predictor has dimension {} but the registry space has dimension {}",
                p.dim, self.space.dim
            )));
        }
        Ok(())
    }

    /// Full referential-integrity check.
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        for (id, set) in &self.anchor_sets {
            self.check_anchor_set(id, set)?;
        }
        for (id, p) in &self.profiles {
            if *id != p.model_id {
                return Err(Error::Registry(format!("profile key `{id}` != model id `{}`", p.model_id)));
            }
            self.check_profile(p)?;
        }
        if let Some(p) = &self.predictor {
            self.check_predictor(p)?;
        }
        Ok(())
    }

    /// Adds or replaces a model profile and returns the new version.
    pub fn register_model(&mut self, profile: ModelProfile, overwrite: bool) -> Result<u64> {
        self.check_profile(&profile)?;
        if !overwrite && self.profiles.contains_key(&profile.model_id) {
            return Err(Error::Duplicate {
                kind: "model",
                id: profile.model_id,
            });
        }
        self.profiles.insert(profile.model_id.clone(), profile);
        self.version += 1;
        Ok(self.version)
    }

    pub fn remove_model(&mut self, model_id: &str) -> Result<ModelProfile> {
        let p = self.profiles.remove(model_id).ok_or_else(|| Error::UnknownId {
            kind: "model",
            id: model_id.to_string(),
        })?;
        self.version += 1;
        Ok(p)
    }

    pub fn add_anchor_set(&mut self, id: &str, set: AnchorSet, overwrite: bool) -> Result<u64> {
        self.check_anchor_set(id, &set)?;
        if !overwrite && self.anchor_sets.contains_key(id) {
            return Err(Error::Duplicate {
                kind: "anchor set",
                id: id.to_string(),
            });
        }
        self.anchor_sets.insert(id.to_string(), set);
        self.version += 1;
        Ok(self.version)
    }

    pub fn set_predictor(&mut self, predictor: PredictorModel) -> Result<u64> {
        self.check_predictor(&predictor)?;
        self.predictor = Some(predictor);
        self.version += 1;
        Ok(self.version)
    }

    /// Profiles with complete estimators, ordered by model id.
    pub fn routable_profiles(&self) -> Vec<&ModelProfile> {
        self.profiles.values().filter(|p| p.is_routable()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for sub in ["anchors", "profiles"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        write_json(&dir.join("space.json"), &self.space)?;
        let mut manifest = Manifest {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            version: self.version,
            dim: self.space.dim,
            space: "space.json".into(),
            predictor: None,
            anchor_sets: BTreeMap::new(),
            profiles: BTreeMap::new(),
        };
        for (i, (id, set)) in self.anchor_sets.iter().enumerate() {
            let rel = format!("anchors/{}", file_name(i, id));
            write_json(&dir.join(&rel), set)?;
            manifest.anchor_sets.insert(id.clone(), rel);
        }
        for (i, (id, p)) in self.profiles.iter().enumerate() {
            let rel = format!("profiles/{}", file_name(i, id));
            write_json(&dir.join(&rel), p)?;
            manifest.profiles.insert(id.clone(), rel);
        }
        if let Some(p) = &self.predictor {
            write_json(&dir.join("predictor.json"), p)?;
            manifest.predictor = Some("predictor.json".into());
        }
        // the manifest goes last so a crash never leaves it pointing at
        // missing documents
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
            return Err(Error::Registry(format!(
                "unsupported registry format {} v{}",
                manifest.format, manifest.format_version
            )));
        }
        let space: CalibratedSpace = read_json(&dir.join(&manifest.space))?;
        let mut anchor_sets = BTreeMap::new();
        for (id, rel) in &manifest.anchor_sets {
            anchor_sets.insert(id.clone(), read_json(&dir.join(rel))?);
        }
        let mut profiles = BTreeMap::new();
        for (id, rel) in &manifest.profiles {
            profiles.insert(id.clone(), read_json(&dir.join(rel))?);
        }
        let predictor = manifest
            .predictor
            .as_ref()
            .map(|rel| read_json(&dir.join(rel)))
            .transpose()?;
        let reg = Self {
            space,
            anchor_sets,
            profiles,
            predictor,
            version: manifest.version,
        };
        if reg.space.dim != manifest.dim {
            return Err(Error::Registry(format!(
                "manifest dimension {} disagrees with space dimension {}",
                manifest.dim, reg.space.dim
            )));
        }
        reg.validate()?;
        Ok(reg)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    version: u64,
    #[serde(rename = "D")]
    dim: usize,
    space: String,
    #[serde(default)]
    predictor: Option<String>,
    anchor_sets: BTreeMap<String, String>,
    profiles: BTreeMap<String, String>,
}

/// Ids may contain characters that are unsafe in paths; the ordinal keeps
/// sanitized names unique.
fn file_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{index:05}-{safe}.json")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec_pretty(value)?;
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&body)?)
}

/// Shared registry with snapshot reads and serialized writes. When a
/// directory is attached, every successful update is persisted before it
/// becomes visible.
pub struct RegistryHandle {
    current: ArcSwap<Registry>,
    writer: Mutex<()>,
    dir: Option<PathBuf>,
}

impl RegistryHandle {
    pub fn new(registry: Registry) -> Self {
        Self {
            current: ArcSwap::from_pointee(registry),
            writer: Mutex::new(()),
            dir: None,
        }
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let reg = Registry::load(&dir)?;
        Ok(Self {
            current: ArcSwap::from_pointee(reg),
            writer: Mutex::new(()),
            dir: Some(dir),
        })
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.current.load_full()
    }

    /// Applies `f` to a copy of the current registry and publishes the
    /// result. Nothing is published if `f` or persistence fails.
    pub fn update<T>(&self, f: impl FnOnce(&mut Registry) -> Result<T>) -> Result<T> {
        let _guard = self.writer.lock().map_err(|_| Error::Registry("writer lock poisoned".into()))?;
        let mut next = (*self.current.load_full()).clone();
        let out = f(&mut next)?;
        next.validate()?;
        if let Some(dir) = &self.dir {
            next.save(dir)?;
        }
        self.current.store(Arc::new(next));
        Ok(out)
    }

    pub fn register_model(&self, profile: ModelProfile, overwrite: bool) -> Result<u64> {
        self.update(|r| r.register_model(profile, overwrite))
    }
}
