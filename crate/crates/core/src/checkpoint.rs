//! Checkpoint bundles: `{root}/{component}/{step}/` holding parameter
//! blobs, optimizer state, a snapshot of the run config and a provenance
//! file. Bundles are written to a temporary sibling and renamed into
//! place, so a crash never leaves a half-written step behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sfe_tensor::{Adam, DType, ParamStore, Scalar};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.txt";

/// Identity and lineage of a bundle. `id` hashes the parameters and the
/// config snapshot; `parents` lists the ids of the bundles it was trained
/// against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub id: String,
    pub component: String,
    pub step: usize,
    pub seed: u64,
    pub optimizer: String,
    /// Element type the checksums were taken in.
    pub dtype: String,
    pub parents: Vec<String>,
    pub checksums: BTreeMap<String, String>,
}

impl Provenance {
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "id {}", self.id).unwrap();
        writeln!(s, "component {}", self.component).unwrap();
        writeln!(s, "step {}", self.step).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "optimizer {}", self.optimizer).unwrap();
        writeln!(s, "dtype {}", self.dtype).unwrap();
        for p in &self.parents {
            writeln!(s, "parent {p}").unwrap();
        }
        for (k, v) in &self.checksums {
            writeln!(s, "checksum {k} {v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Provenance {
            id: String::new(),
            component: String::new(),
            step: 0,
            seed: 0,
            optimizer: String::new(),
            dtype: String::new(),
            parents: Vec::new(),
            checksums: BTreeMap::new(),
        };
        let bad = |l: &str| CoreError::Format(format!("bad provenance line `{l}`"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            match key {
                "id" => p.id = rest.to_string(),
                "component" => p.component = rest.to_string(),
                "step" => p.step = rest.parse().map_err(|_| bad(line))?,
                "seed" => p.seed = rest.parse().map_err(|_| bad(line))?,
                "optimizer" => p.optimizer = rest.to_string(),
                "dtype" => p.dtype = rest.to_string(),
                "parent" => p.parents.push(rest.to_string()),
                "checksum" => {
                    let (n, v) = rest.split_once(' ').ok_or_else(|| bad(line))?;
                    p.checksums.insert(n.to_string(), v.to_string());
                }
                _ => return Err(bad(line)),
            }
        }
        if p.id.is_empty() || p.component.is_empty() {
            return Err(CoreError::Format("provenance lacks id or component".into()));
        }
        Ok(p)
    }
}

/// What goes into one bundle.
pub struct BundleSpec<'a, T: Scalar> {
    pub component: &'a str,
    pub step: usize,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub parents: Vec<String>,
    pub stores: Vec<(&'a str, &'a ParamStore<T>)>,
    pub optimizers: Vec<(&'a str, &'a Adam<T>)>,
}

pub fn step_dir(root: &Path, component: &str, step: usize) -> PathBuf {
    root.join(component).join(format!("{step:08}"))
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CoreError::io(path, e))
}

pub fn write_bundle<T: Scalar>(root: &Path, spec: &BundleSpec<'_, T>) -> Result<Provenance> {
    let dir = step_dir(root, spec.component, spec.step);
    let parent = dir.parent().expect("step dir has a parent");
    io(parent, std::fs::create_dir_all(parent))?;
    let tmp = parent.join(format!(".tmp-{:08}", spec.step));
    if tmp.exists() {
        io(&tmp, std::fs::remove_dir_all(&tmp))?;
    }
    io(&tmp, std::fs::create_dir_all(&tmp))?;
    let config = spec.config.to_toml();
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    let mut checksums = BTreeMap::new();
    for (name, store) in &spec.stores {
        let sum = store.checksum();
        h.update(name.as_bytes());
        h.update(sum.as_bytes());
        checksums.insert(name.to_string(), sum);
        store.save(&tmp.join(format!("{name}.safetensors")))?;
    }
    for (name, opt) in &spec.optimizers {
        opt.save(&tmp, &format!("opt_{name}"))?;
    }
    io(&tmp, std::fs::write(tmp.join(CONFIG_FILE), &config))?;
    let prov = Provenance {
        id: hex_prefix(&h.finalize()),
        component: spec.component.to_string(),
        step: spec.step,
        seed: spec.seed,
        optimizer: if spec.optimizers.is_empty() { "none".into() } else { "Adam".into() },
        dtype: dtype_name::<T>().into(),
        parents: spec.parents.clone(),
        checksums,
    };
    io(&tmp, std::fs::write(tmp.join(PROVENANCE_FILE), prov.render()))?;
    if dir.exists() {
        io(&dir, std::fs::remove_dir_all(&dir))?;
    }
    io(&dir, std::fs::rename(&tmp, &dir))?;
    Ok(prov)
}

fn dtype_name<T: Scalar>() -> &'static str {
    match T::DTYPE {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// A bundle on disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub provenance: Provenance,
}

impl Bundle {
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join(PROVENANCE_FILE);
        if !p.exists() {
            return Err(CoreError::MissingCheckpoint(dir.to_path_buf()));
        }
        let text = io(&p, std::fs::read_to_string(&p))?;
        Ok(Self { dir: dir.to_path_buf(), provenance: Provenance::parse(&text)? })
    }

    pub fn step(&self) -> usize {
        self.provenance.step
    }

    pub fn id(&self) -> &str {
        &self.provenance.id
    }

    /// Loads a parameter store and checks it against its recorded checksum.
    pub fn store<T: Scalar>(&self, name: &str) -> Result<ParamStore<T>> {
        let path = self.dir.join(format!("{name}.safetensors"));
        if !path.exists() {
            return Err(CoreError::MissingCheckpoint(path));
        }
        let store = ParamStore::<T>::load(&path)?;
        if let Some(want) = self.provenance.checksums.get(name) {
            // Checksums are dtype-specific; only compare like with like.
            if self.provenance.dtype == dtype_name::<T>() && store.checksum() != *want {
                return Err(CoreError::Incompatible(format!("{} fails its checksum", path.display())));
            }
        }
        Ok(store)
    }

    /// Loads a store and checks its names and shapes against `reference`.
    pub fn store_like<T: Scalar>(&self, name: &str, reference: &ParamStore<T>) -> Result<ParamStore<T>> {
        let s = self.store(name)?;
        s.check_layout(reference)
            .map_err(|e| CoreError::Incompatible(format!("{name} in {}: {e}", self.dir.display())))?;
        Ok(s)
    }

    pub fn optimizer<T: Scalar>(&self, name: &str) -> Result<Adam<T>> {
        Ok(Adam::load(&self.dir, &format!("opt_{name}"))?)
    }

    pub fn config(&self) -> Result<RunConfig> {
        let p = self.dir.join(CONFIG_FILE);
        let s = io(&p, std::fs::read_to_string(&p))?;
        RunConfig::from_toml(&s)
    }
}

/// Completed steps of `component`, ascending.
pub fn steps(root: &Path, component: &str) -> Result<Vec<usize>> {
    let dir = root.join(component);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<usize> = io(&dir, std::fs::read_dir(&dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(PROVENANCE_FILE).exists())
        .filter_map(|e| e.file_name().to_str().and_then(|s| s.parse().ok()))
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn latest(root: &Path, component: &str) -> Result<Option<Bundle>> {
    match steps(root, component)?.last() {
        Some(&s) => Bundle::open(&step_dir(root, component, s)).map(Some),
        None => Ok(None),
    }
}

/// Latest bundle, or a missing-checkpoint error naming where it was expected.
pub fn require(root: &Path, component: &str) -> Result<Bundle> {
    latest(root, component)?.ok_or_else(|| CoreError::MissingCheckpoint(root.join(component)))
}

/// Fails unless `section` of the stored config equals the current one.
pub fn check_section<S: PartialEq + std::fmt::Debug>(bundle: &Bundle, what: &str, stored: &S, current: &S) -> Result<()> {
    if stored != current {
        return Err(CoreError::Incompatible(format!(
            "{} was trained with a different {what} config",
            bundle.dir.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfe_tensor::{AdamConfig, Tensor};

    #[test]
    fn bundle_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::from_vec(&[2], vec![1.0, -2.5]).unwrap());
        let opt = Adam::<f32>::new(AdamConfig::new(1e-3));
        let cfg = RunConfig::default();
        let spec = BundleSpec {
            component: "inverter",
            step: 40,
            seed: 7,
            config: &cfg,
            parents: vec!["abc".into()],
            stores: vec![("inverter", &store)],
            optimizers: vec![("inverter", &opt)],
        };
        let prov = write_bundle(tmp.path(), &spec).unwrap();
        write_bundle(tmp.path(), &BundleSpec { step: 80, ..spec }).unwrap();
        assert_eq!(steps(tmp.path(), "inverter").unwrap(), vec![40, 80]);
        let b = Bundle::open(&step_dir(tmp.path(), "inverter", 40)).unwrap();
        assert_eq!(b.provenance, prov);
        assert_eq!(b.provenance.optimizer, "Adam");
        assert_eq!(b.store::<f32>("inverter").unwrap(), store);
        assert_eq!(b.store::<f64>("inverter").unwrap().get("a").unwrap().data(), &[1.0, -2.5]);
        assert_eq!(b.config().unwrap(), cfg);
        assert_eq!(b.optimizer::<f32>("inverter").unwrap().steps_taken(), 0);
        assert_eq!(latest(tmp.path(), "inverter").unwrap().unwrap().step(), 80);
        assert!(matches!(require(tmp.path(), "editor"), Err(CoreError::MissingCheckpoint(_))));
        let mut other = store.clone();
        other.insert("b", Tensor::zeros(&[1]));
        assert!(matches!(b.store_like("inverter", &other), Err(CoreError::Incompatible(_))));
        // Tampered blobs fail their checksum.
        let mut bad = store.clone();
        bad.insert("a", Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap());
        bad.save(&b.dir.join("inverter.safetensors")).unwrap();
        assert!(matches!(b.store::<f32>("inverter"), Err(CoreError::Incompatible(_))));
    }

    #[test]
    fn provenance_parse_rejects_garbage() {
        assert!(Provenance::parse("id x\ncomponent y\nstep z\n").is_err());
        assert!(Provenance::parse("step 1\n").is_err());
    }
}
