use crate::evidence::BoundingBox;
use crate::extraction::normalize_name;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

fn default_poll() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    #[serde(default = "default_poll")]
    pub poll_conf: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneNoise {
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinedMode {
    /// Re-emit the refined text as written.
    Verbatim,
    /// Strip `<obj:..>` markers the refine prompt reports as not existing.
    #[default]
    EvidenceAware,
}

/// Canned reasoner output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerScript {
    pub initial: String,
    /// Falls back to `initial` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<String>,
    #[serde(default)]
    pub refined_mode: RefinedMode,
}

/// Ground truth for one image: what exists, where, and how confidently the
/// mock poller and grounder report it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub absent_default_poll: f64,
    #[serde(default)]
    pub noise: SceneNoise,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ReasonerScript>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for obj in &self.objects {
            for label in std::iter::once(&obj.name).chain(&obj.synonyms) {
                let key = normalize_name(label);
                if key.is_empty() {
                    return Err(format!("{}: empty object name", self.image_id));
                }
                if !seen.insert(key.clone()) {
                    return Err(format!("{}: duplicate name {key:?}", self.image_id));
                }
            }
            if !(0.0..=1.0).contains(&obj.poll_conf) {
                return Err(format!(
                    "{}: poll_conf of {} outside [0,1]",
                    self.image_id, obj.name
                ));
            }
            for b in &obj.boxes {
                b.validate()
                    .map_err(|e| format!("{}: {}: {e}", self.image_id, obj.name))?;
            }
        }
        if !(0.0..=1.0).contains(&self.absent_default_poll) {
            return Err(format!(
                "{}: absent_default_poll outside [0,1]",
                self.image_id
            ));
        }
        if !(0.0..=0.5).contains(&self.noise.amplitude) {
            return Err(format!(
                "{}: noise amplitude outside [0,0.5]",
                self.image_id
            ));
        }
        Ok(())
    }

    /// Finds the object whose name or synonym normalizes to `name`.
    pub fn lookup(&self, name: &str) -> Option<&SceneObject> {
        let key = normalize_name(name);
        self.objects.iter().find(|o| {
            normalize_name(&o.name) == key || o.synonyms.iter().any(|s| normalize_name(s) == key)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        serde_json::from_str(
            r#"{"image_id":"s1","objects":[{"name":"Car","synonyms":["Automobile"," motor car "]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let s = scene();
        assert_eq!(s.objects[0].poll_conf, 1.0);
        assert_eq!(s.absent_default_poll, 0.0);
        assert_eq!(s.noise.amplitude, 0.0);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn synonym_lookup_is_normalized() {
        let s = scene();
        for q in ["car", "CAR", "automobile", "motor   car"] {
            assert_eq!(s.lookup(q).unwrap().name, "Car", "{q}");
        }
        assert!(s.lookup("unicorn").is_none());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scene();
        s.objects.push(SceneObject {
            name: "automobile".into(),
            synonyms: vec![],
            boxes: vec![],
            poll_conf: 1.0,
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn out_of_range_values_rejected() {
        let mut s = scene();
        s.noise.amplitude = 0.6;
        assert!(s.validate().is_err());
        let mut s = scene();
        s.objects[0].poll_conf = 1.5;
        assert!(s.validate().is_err());
    }
}
