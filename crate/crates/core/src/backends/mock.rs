use super::scene::RefinedMode;
use super::{Backend, BackendError, Exchange, ImageRef, Request, Response, Scene};
use crate::evidence::BoundingBox;
use crate::extraction::normalize_name;
use crate::planner::{abstained_in_prompt, is_refine_prompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

fn marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<obj:([^>]+)>").unwrap())
}

/// Noise seed derived from the call's identity, so values do not depend on
/// call order or worker scheduling.
fn noise_seed(run_seed: u64, scene: &Scene, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(scene.noise.seed.to_le_bytes());
    h.update(scene.image_id.as_bytes());
    h.update([0]);
    h.update(normalize_name(name).as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn mock_poll(scene: &Scene, name: &str, run_seed: u64) -> f64 {
    let base = scene
        .lookup(name)
        .map_or(scene.absent_default_poll, |o| o.poll_conf);
    let amp = scene.noise.amplitude;
    if amp == 0.0 {
        return base;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(run_seed, scene, name));
    (base + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0)
}

pub fn mock_ground(scene: &Scene, name: &str, box_threshold: f64) -> Vec<BoundingBox> {
    scene
        .lookup(name)
        .map(|o| {
            o.boxes
                .iter()
                .filter(|b| b.score >= box_threshold)
                .copied()
                .collect()
        })
        .unwrap_or_default()
}

/// Lists the `<obj:name>` markers of a mock reasoning step as an extractor
/// reply would.
pub fn mock_extract(step_text: &str) -> String {
    let names: Vec<&str> = marker()
        .captures_iter(step_text)
        .map(|c| c.get(1).unwrap().as_str().trim())
        .collect();
    serde_json::to_string(&names).unwrap()
}

fn strip_markers(text: &str, drop: &[String]) -> String {
    let stripped = marker().replace_all(text, |c: &regex::Captures| {
        if drop.contains(&normalize_name(&c[1])) {
            String::new()
        } else {
            c[0].to_string()
        }
    });
    // collapse the gaps left behind, keeping line structure
    stripped
        .lines()
        .map(|l| {
            l.split(' ')
                .filter(|w| !w.is_empty())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Scene-scripted backend. Every answer is a pure function of the scene, the
/// request and the run seed.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    scenes: BTreeMap<String, Scene>,
    run_seed: u64,
}

impl MockBackend {
    pub fn new(scenes: impl IntoIterator<Item = Scene>, run_seed: u64) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for scene in scenes {
            scene.validate()?;
            if let Some(prev) = map.insert(scene.image_id.clone(), scene) {
                return Err(format!("duplicate scene {}", prev.image_id));
            }
        }
        Ok(Self {
            scenes: map,
            run_seed,
        })
    }

    /// Loads every `*.json` scene document in `dir`.
    pub fn from_dir(dir: &Path, run_seed: u64) -> Result<Self, String> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| format!("{}: {e}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut scenes = Vec::with_capacity(paths.len());
        for path in paths {
            let text =
                std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let scene: Scene =
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            scenes.push(scene);
        }
        Self::new(scenes, run_seed)
    }

    pub fn scene(&self, image_id: &str) -> Option<&Scene> {
        self.scenes.get(image_id)
    }

    fn scene_for(&self, image: &ImageRef) -> Result<&Scene, BackendError> {
        let id = image
            .image_id()
            .ok_or_else(|| BackendError::UnknownImage("<inline image>".into()))?;
        self.scenes
            .get(id)
            .ok_or_else(|| BackendError::UnknownImage(id.to_string()))
    }

    fn reason(&self, scene: &Scene, prompt: &str) -> Result<String, BackendError> {
        let script = scene
            .script
            .as_ref()
            .ok_or_else(|| BackendError::MissingScript(scene.image_id.clone()))?;
        if !is_refine_prompt(prompt) {
            return Ok(script.initial.clone());
        }
        let template = script.refined.as_deref().unwrap_or(&script.initial);
        Ok(match script.refined_mode {
            RefinedMode::Verbatim => template.to_string(),
            RefinedMode::EvidenceAware => strip_markers(template, &abstained_in_prompt(prompt)),
        })
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &Request) -> Result<Exchange, BackendError> {
        let response = match request {
            Request::Poll { image, object } => Response::Poll {
                confidence: mock_poll(self.scene_for(image)?, object, self.run_seed),
            },
            Request::Ground {
                image,
                object,
                box_threshold,
                ..
            } => Response::Ground {
                boxes: mock_ground(self.scene_for(image)?, object, *box_threshold),
            },
            Request::Extract { text, .. } => Response::Extract {
                reply: mock_extract(text),
            },
            Request::Reason { image, prompt, .. } => Response::Reason {
                text: self.reason(self.scene_for(image)?, prompt)?,
            },
        };
        Ok(Exchange {
            response,
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ReasonerScript, SceneNoise, SceneObject};
    use crate::extraction::parse_object_list;

    fn bx(score: f64) -> BoundingBox {
        BoundingBox::new(0.1, 0.1, 0.5, 0.5, score).unwrap()
    }

    fn scene(amplitude: f64) -> Scene {
        Scene {
            image_id: "street".into(),
            objects: vec![SceneObject {
                name: "car".into(),
                synonyms: vec!["automobile".into()],
                boxes: vec![bx(0.9), bx(0.6), bx(0.2)],
                poll_conf: 1.0,
            }],
            absent_default_poll: 0.0,
            noise: SceneNoise { amplitude, seed: 7 },
            script: Some(ReasonerScript {
                initial: "1. A <obj:car> and a <obj:dog>.".into(),
                refined: None,
                refined_mode: RefinedMode::EvidenceAware,
            }),
        }
    }

    #[test]
    fn poll_scripted_values() {
        let s = scene(0.0);
        assert_eq!(mock_poll(&s, "car", 0), 1.0);
        assert_eq!(mock_poll(&s, "unicorn", 0), 0.0);
    }

    #[test]
    fn poll_noise_is_reproducible_and_bounded() {
        let s = scene(0.05);
        let a = mock_poll(&s, "car", 0);
        let b = mock_poll(&s, "car", 0);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((0.95..=1.0).contains(&a), "{a}");
        let absent = mock_poll(&s, "unicorn", 0);
        assert!((0.0..=0.05).contains(&absent));
    }

    #[test]
    fn ground_filters_at_threshold() {
        let s = scene(0.0);
        assert_eq!(mock_ground(&s, "car", 0.35).len(), 2);
        assert!(mock_ground(&s, "unicorn", 0.35).is_empty());
        assert_eq!(
            mock_ground(&s, "automobile", 0.35),
            mock_ground(&s, "car", 0.35)
        );
        assert_eq!(mock_ground(&s, "car", 0.6).len(), 2);
    }

    #[test]
    fn extract_markers() {
        assert_eq!(mock_extract("There are two <obj:car>s."), r#"["car"]"#);
        assert_eq!(mock_extract("nothing here"), "[]");
        let reply = mock_extract("<obj:coastal area>, <obj:beach>, <obj:city>");
        assert_eq!(reply, r#"["coastal area","beach","city"]"#);
        assert_eq!(
            parse_object_list(&reply).unwrap(),
            vec!["coastal area", "beach", "city"]
        );
    }

    #[test]
    fn strip_only_abstained() {
        let out = strip_markers(
            "1. A <obj:car> and a <obj:Dog> here.\n\n2. ok",
            &["dog".into()],
        );
        assert_eq!(out, "1. A <obj:car> and a here.\n\n2. ok");
    }

    #[test]
    fn unknown_image_is_an_error() {
        let mock = MockBackend::new([scene(0.0)], 0).unwrap();
        let req = Request::Poll {
            image: ImageRef::Path("nope.jpg".into()),
            object: "car".into(),
        };
        assert_eq!(
            mock.call(&req),
            Err(BackendError::UnknownImage("nope".into()))
        );
    }
}
