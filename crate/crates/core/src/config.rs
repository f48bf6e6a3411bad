//! Training configuration: two named profiles, loaded from flat JSON objects
//! whose dotted keys address nested fields (`"encoder.dim": 128`).

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::encoder::VitConfig;
use crate::error::{Result, SpaError};
use crate::losses::{LossToggles, LossWeights};
use crate::model::{ModelConfig, RenderSettings, VolumeSettings};

/// Key holding per-key provenance labels in printed configs; ignored on load.
pub const SOURCES_KEY: &str = "_sources";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycle {
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub steps: usize,
    pub pixels_per_view: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub onecycle: OneCycle,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Backpropagate each loss term separately to log its gradient norm.
    pub term_grad_norms: bool,
    pub losses: LossWeights,
    pub toggles: LossToggles,
    pub encoder: VitConfig,
    pub volume: VolumeSettings,
    pub render: RenderSettings,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            profile: Profile::Desk,
            steps: 300,
            pixels_per_view: 256,
            mask_ratio: 0.5,
            lr: 1e-3,
            weight_decay: 0.04,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            grad_clip: 1.0,
            ema_decay: 0.99,
            onecycle: OneCycle {
                pct_start: 0.05,
                div: 100.0,
                final_div: 1000.0,
            },
            seed: 0,
            checkpoint_every: 0,
            term_grad_norms: false,
            losses: LossWeights::default(),
            toggles: LossToggles::default(),
            encoder: VitConfig {
                image_size: 64,
                patch: 4,
                dim: 128,
                depth: 4,
                heads: 4,
                mlp_ratio: 4,
            },
            volume: VolumeSettings {
                dims: [32, 32, 16],
                channels: 64,
                points: 4,
                offset_scale: 8.0,
                max_views: 8,
            },
            render: RenderSettings {
                l_max: 1,
                semantic_dim: 16,
                decoder_hidden: 32,
                n_coarse: 48,
                n_fine: 16,
            },
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            profile: Profile::Paper,
            steps: 100_000,
            pixels_per_view: 512,
            lr: 8e-4,
            ema_decay: 0.999,
            encoder: VitConfig {
                image_size: 224,
                patch: 16,
                dim: 1024,
                depth: 24,
                heads: 16,
                mlp_ratio: 4,
            },
            volume: VolumeSettings {
                dims: [128, 128, 32],
                channels: 128,
                ..TrainConfig::desk().volume
            },
            render: RenderSettings {
                l_max: 2,
                decoder_hidden: 128,
                n_coarse: 72,
                n_fine: 24,
                ..TrainConfig::desk().render
            },
            ..TrainConfig::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            volume: self.volume.clone(),
            render: self.render.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(SpaError::Config { key: key.into(), reason });
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", format!("{} is outside [0, 1)", self.mask_ratio));
        }
        if self.steps == 0 {
            return bad("steps", "must be positive".into());
        }
        if self.pixels_per_view == 0 {
            return bad("pixels_per_view", "must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return bad(&format!("betas[{i}]"), format!("{b} is outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay", format!("{} is outside [0, 1]", self.ema_decay));
        }
        let oc = &self.onecycle;
        if !(0.0..1.0).contains(&oc.pct_start) {
            return bad("onecycle.pct_start", "must be in [0, 1)".into());
        }
        if !(oc.div > 0.0) || !(oc.final_div > 0.0) {
            return bad("onecycle.div", "divide factors must be positive".into());
        }
        let w = &self.losses;
        let ws = [
            ("losses.color", w.color),
            ("losses.depth", w.depth),
            ("losses.semantic", w.semantic),
            ("losses.eikonal", w.eikonal),
            ("losses.sdf", w.sdf),
            ("losses.free", w.free),
            ("losses.near_threshold", w.near_threshold),
            ("losses.free_alpha", w.free_alpha),
        ];
        for (k, v) in ws {
            if !(v >= 0.0) {
                return bad(k, "must be non-negative".into());
            }
        }
        let tg = &self.toggles;
        if !(tg.color || tg.depth || tg.semantic) {
            return bad("toggles", "at least one rendering loss must stay enabled".into());
        }
        self.encoder
            .validate()
            .map_err(|e| SpaError::Config { key: "encoder".into(), reason: e.to_string() })?;
        self.model()
            .volume_config()
            .validate()
            .map_err(|e| SpaError::Config { key: "volume".into(), reason: e.to_string() })?;
        if self.render.l_max > crate::renderer::MAX_SH_DEGREE {
            return bad("render.l_max", "at most 2 is supported".into());
        }
        if self.render.n_coarse == 0 {
            return bad("render.n_coarse", "must be positive".into());
        }
        if self.render.decoder_hidden == 0 || self.render.semantic_dim == 0 {
            return bad("render", "decoder width and semantic dim must be positive".into());
        }
        Ok(())
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Nested serde value to a flat dotted-key object.
pub fn flatten(v: &Value) -> Map<String, Value> {
    let mut out = Map::new();
    flatten_into("", v, &mut out);
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut node = &mut root;
        let mut parts = k.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never shadow leaves");
            }
        }
    }
    Value::Object(root)
}

fn to_flat(cfg: &TrainConfig) -> Map<String, Value> {
    flatten(&serde_json::to_value(cfg).expect("config serialises"))
}

/// Parses a flat JSON config: defaults come from its `profile` (desk when
/// absent) and every other key overrides one default.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| SpaError::Config { key: "<root>".into(), reason: e.to_string() })?;
    let Value::Object(user) = v else {
        return Err(SpaError::Config { key: "<root>".into(), reason: "expected a JSON object".into() });
    };
    let profile = match user.get("profile") {
        None => Profile::Desk,
        Some(p) => serde_json::from_value(p.clone()).map_err(|_| SpaError::Config {
            key: "profile".into(),
            reason: format!("unknown profile {p}"),
        })?,
    };
    let base = to_flat(&TrainConfig::for_profile(profile));
    let mut merged = base.clone();
    for (k, v) in &user {
        if k == SOURCES_KEY {
            continue;
        }
        if !base.contains_key(k) {
            return Err(SpaError::Config { key: k.clone(), reason: "unknown key".into() });
        }
        merged.insert(k.clone(), v.clone());
    }
    let cfg: TrainConfig = match serde_json::from_value(unflatten(&merged)) {
        Ok(c) => c,
        Err(e) => {
            // Attribute the failure to the first key that breaks on its own.
            for (k, v) in &user {
                let mut one = base.clone();
                if let Some(slot) = one.get_mut(k) {
                    *slot = v.clone();
                }
                if let Err(e) = serde_json::from_value::<TrainConfig>(unflatten(&one)) {
                    return Err(SpaError::Config { key: k.clone(), reason: e.to_string() });
                }
            }
            return Err(SpaError::Config { key: "<root>".into(), reason: e.to_string() });
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(SpaError::io(path))?;
    parse_config(&text)
}

const RECIPE_KEYS: [&str; 14] = [
    "mask_ratio",
    "weight_decay",
    "grad_clip",
    "onecycle.pct_start",
    "onecycle.div",
    "onecycle.final_div",
    "losses.color",
    "losses.depth",
    "losses.semantic",
    "losses.eikonal",
    "losses.sdf",
    "losses.free",
    "losses.near_threshold",
    "losses.free_alpha",
];

/// Values that differ between the desk and paper profiles.
const SCALED_KEYS: [&str; 14] = [
    "steps",
    "pixels_per_view",
    "lr",
    "ema_decay",
    "encoder.image_size",
    "encoder.patch",
    "encoder.dim",
    "encoder.depth",
    "encoder.heads",
    "volume.dims",
    "volume.channels",
    "render.l_max",
    "render.n_coarse",
    "render.n_fine",
];

/// Provenance label for a config key under a profile.
pub fn source_of(profile: Profile, key: &str) -> &'static str {
    if RECIPE_KEYS.contains(&key) {
        return "reference-recipe";
    }
    let recipe_in_paper = [
        "pixels_per_view",
        "lr",
        "ema_decay",
        "encoder.image_size",
        "encoder.patch",
        "volume.dims",
        "render.n_coarse",
        "render.n_fine",
    ];
    match profile {
        Profile::Paper if recipe_in_paper.contains(&key) => "reference-recipe",
        Profile::Desk if SCALED_KEYS.contains(&key) => "desk-scaled",
        _ => "implementation-default",
    }
}

/// Flat JSON rendering of a config with a `_sources` annotation per key.
pub fn print_config(cfg: &TrainConfig) -> String {
    let mut flat = to_flat(cfg);
    let sources: Map<String, Value> = flat
        .keys()
        .map(|k| (k.clone(), Value::String(source_of(cfg.profile, k).into())))
        .collect();
    flat.insert(SOURCES_KEY.into(), Value::Object(sources));
    serde_json::to_string_pretty(&Value::Object(flat)).expect("config serialises")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_desk_default() {
        assert_eq!(parse_config("{}").unwrap(), TrainConfig::desk());
        assert_eq!(
            parse_config(r#"{"profile": "paper"}"#).unwrap(),
            TrainConfig::paper()
        );
    }

    #[test]
    fn rejects_bad_values_with_key() {
        match parse_config(r#"{"mask_ratio": 1.5}"#) {
            Err(SpaError::Config { key, .. }) => assert_eq!(key, "mask_ratio"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"encoder.dims": 3}"#) {
            Err(SpaError::Config { key, .. }) => assert_eq!(key, "encoder.dims"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"lr": "fast"}"#) {
            Err(SpaError::Config { key, .. }) => assert_eq!(key, "lr"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn print_roundtrip() {
        let mut c = TrainConfig::desk();
        c.encoder.dim = 64;
        c.seed = 7;
        let text = print_config(&c);
        assert_eq!(parse_config(&text).unwrap(), c);
        assert!(text.contains("\"losses.near_threshold\": 0.05"));
        assert!(text.contains("\"losses.free_alpha\": 5.0"));
    }
}
