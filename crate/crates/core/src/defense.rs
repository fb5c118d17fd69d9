//! Input-processing defenses selectable by name.
//!
//! Adversarial training changes the model rather than the input, so it is
//! not a [`Defense`]; it is evaluated by swapping the encoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::audio::Waveform;
use crate::detector::Detector;
use crate::diffusion::Purifier;
use crate::error::{input_err, CoreError, Result};

pub trait Defense: Send + Sync {
    fn name(&self) -> &str;

    /// Processes one input; `seed` drives any randomness.
    fn process(&self, x: &Waveform, seed: u64) -> Result<Waveform>;
}

/// Passes audio through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> &str {
        "none"
    }

    fn process(&self, x: &Waveform, _seed: u64) -> Result<Waveform> {
        Ok(x.clone())
    }
}

/// Purifies every input at a fixed strength.
#[derive(Clone, Debug)]
pub struct Purification {
    pub purifier: Arc<Purifier>,
    pub t_star: usize,
}

impl Defense for Purification {
    fn name(&self) -> &str {
        "purification"
    }

    fn process(&self, x: &Waveform, seed: u64) -> Result<Waveform> {
        self.purifier.purify(x, self.t_star, seed)
    }
}

/// Purifies only inputs the detector flags as adversarial; everything else
/// is returned untouched.
#[derive(Clone, Debug)]
pub struct GatedPurification {
    pub detector: Arc<Detector>,
    pub purifier: Arc<Purifier>,
    pub t_star: usize,
}

impl Defense for GatedPurification {
    fn name(&self) -> &str {
        "gated-purification"
    }

    fn process(&self, x: &Waveform, seed: u64) -> Result<Waveform> {
        if self.detector.detect(x)?.adversarial {
            self.purifier.purify(x, self.t_star, seed)
        } else {
            Ok(x.clone())
        }
    }
}

/// Trained components a defense may need.
#[derive(Clone, Debug, Default)]
pub struct DefenseParts {
    pub purifier: Option<Arc<Purifier>>,
    pub detector: Option<Arc<Detector>>,
    pub t_star: usize,
}

impl DefenseParts {
    fn purifier(&self) -> Result<Arc<Purifier>> {
        self.purifier.clone().ok_or_else(|| input_err("defense requires a trained purifier"))
    }

    fn detector(&self) -> Result<Arc<Detector>> {
        self.detector.clone().ok_or_else(|| input_err("defense requires a trained detector"))
    }
}

type Factory = Box<dyn Fn(&DefenseParts) -> Result<Arc<dyn Defense>> + Send + Sync>;

/// Defense constructors keyed by name.
#[derive(Default)]
pub struct DefenseRegistry {
    factories: BTreeMap<String, Factory>,
}

impl DefenseRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register("none", |_| Ok(Arc::new(NoDefense)));
        r.register("purification", |p| {
            Ok(Arc::new(Purification {
                purifier: p.purifier()?,
                t_star: p.t_star,
            }))
        });
        r.register("gated-purification", |p| {
            Ok(Arc::new(GatedPurification {
                detector: p.detector()?,
                purifier: p.purifier()?,
                t_star: p.t_star,
            }))
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&DefenseParts) -> Result<Arc<dyn Defense>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, name: &str, parts: &DefenseParts) -> Result<Arc<dyn Defense>> {
        let f = self.factories.get(name).ok_or_else(|| CoreError::UnknownStrategy {
            kind: "defense",
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        f(parts)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_is_identity_and_registry_reports_missing_parts() {
        let r = DefenseRegistry::with_defaults();
        assert_eq!(r.names(), vec!["gated-purification", "none", "purification"]);
        let w = Waveform::new(vec![0.25, -0.5], 8000);
        let d = r.build("none", &DefenseParts::default()).unwrap();
        assert_eq!(d.process(&w, 0).unwrap(), w);
        assert!(r.build("purification", &DefenseParts::default()).is_err());
        assert!(matches!(
            r.build("smoothing", &DefenseParts::default()),
            Err(CoreError::UnknownStrategy { .. })
        ));
    }
}
