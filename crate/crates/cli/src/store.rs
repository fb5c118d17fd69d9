//! Content-addressed stage directories with JSON run manifests.
//!
//! A stage lives in `<out>/<name>/<key>` where `key` hashes the stage name,
//! its configuration and the keys of its upstream stages. A directory whose
//! manifest lists output hashes that still match the files is complete and
//! is reused as is.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of `blob <len>\0<bytes>`, the object-id layout git uses.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub key: String,
    /// Hash of the upstream manifest file.
    pub manifest_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, InputRef>,
    pub outputs: BTreeMap<String, String>,
}

/// A finished stage directory.
#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub key: String,
    pub dir: PathBuf,
    /// False when an existing result was reused.
    pub built: bool,
}

impl Stage {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn input_ref(&self) -> Result<InputRef> {
        Ok(InputRef {
            key: self.key.clone(),
            manifest_hash: blob_hash(&fs::read(self.path(MANIFEST))?),
        })
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let text = fs::read_to_string(self.path(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything that identifies a stage run.
pub struct StageSpec<'a> {
    pub name: &'a str,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<(&'a str, &'a Stage)>,
}

impl StageSpec<'_> {
    pub fn key(&self) -> Result<String> {
        let inputs: BTreeMap<&str, &str> = self.inputs.iter().map(|(n, s)| (*n, s.key.as_str())).collect();
        let ident = serde_json::json!({
            "stage": self.name,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": inputs,
        });
        Ok(sha256_hex(&serde_json::to_vec(&ident)?)[..16].to_string())
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.push(rel);
            }
        }
    }
    Ok(())
}

fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|f| {
            let h = blob_hash(&fs::read(dir.join(&f))?);
            Ok((f, h))
        })
        .collect()
}

fn is_complete(dir: &Path) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) else {
        return false;
    };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
        return false;
    };
    matches!(hash_outputs(dir), Ok(h) if h == m.outputs)
}

/// Root of all stage directories.
#[derive(Clone, Debug)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Returns the stage directory, running `build` into a scratch directory
    /// first unless a complete result with the same key already exists.
    pub fn run(&self, spec: StageSpec<'_>, build: impl FnOnce(&Path) -> Result<()>) -> Result<Stage> {
        let key = spec.key()?;
        let parent = self.root.join(spec.name);
        let dir = parent.join(&key);
        let stage = |built| Stage {
            name: spec.name.to_string(),
            key: key.clone(),
            dir: dir.clone(),
            built,
        };
        if is_complete(&dir) {
            log::debug!("{} {key}: up to date", spec.name);
            return Ok(stage(false));
        }
        log::info!("{} {key}: running", spec.name);
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{key}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        build(&tmp).with_context(|| format!("stage {} failed", spec.name))?;

        let inputs = spec
            .inputs
            .iter()
            .map(|(n, s)| Ok((n.to_string(), s.input_ref()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let manifest = Manifest {
            stage: spec.name.to_string(),
            key: key.clone(),
            config_hash: sha256_hex(&serde_json::to_vec(&spec.config)?),
            config: spec.config.clone(),
            seeds: spec.seeds.clone(),
            inputs,
            outputs: hash_outputs(&tmp)?,
        };
        fs::write(tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
        if !is_complete(&dir) {
            bail!("stage {} {key}: outputs changed while finalizing", spec.name);
        }
        Ok(stage(true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(value: u64) -> StageSpec<'static> {
        StageSpec {
            name: "demo",
            config: serde_json::json!({ "value": value }),
            seeds: BTreeMap::from([("seed".to_string(), 1)]),
            inputs: vec![],
        }
    }

    #[test]
    fn blob_hash_matches_git_layout() {
        // sha256 object id of an empty blob
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn reruns_are_noops_and_tampering_rebuilds() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::new(tmp.path());
        let write = |d: &Path| Ok(fs::write(d.join("out.txt"), "hello")?);
        let a = store.run(spec(1), write).unwrap();
        assert!(a.built);
        let b = store.run(spec(1), |_| panic!("must not rebuild")).unwrap();
        assert!(!b.built);
        assert_eq!(a.dir, b.dir);
        assert_ne!(store.run(spec(2), write).unwrap().key, a.key);

        fs::write(a.path("out.txt"), "tampered").unwrap();
        let c = store.run(spec(1), write).unwrap();
        assert!(c.built);
        assert_eq!(fs::read_to_string(c.path("out.txt")).unwrap(), "hello");
        let m = c.manifest().unwrap();
        assert_eq!(m.outputs["out.txt"], blob_hash(b"hello"));
    }

    #[test]
    fn failed_build_leaves_no_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::new(tmp.path());
        assert!(store.run(spec(3), |_| bail!("boom")).is_err());
        let key = spec(3).key().unwrap();
        assert!(!tmp.path().join("demo").join(key).exists());
    }
}
