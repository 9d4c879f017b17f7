//! Deterministic deployment bundles.
//!
//! A bundle is an uncompressed ustar archive holding exactly two regular
//! files, in this order:
//!
//! * `manifest.json`: canonical JSON (sorted keys, no whitespace)
//! * `model.bin`: the `MFLM` model artifact
//!
//! Every header carries mode `0644`, uid/gid `0`, mtime `0` and empty owner
//! names. The manifest's `manifest_digest` is the SHA-256 of the canonical
//! manifest serialised with `manifest_digest` set to the empty string.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::LinearModel;
use crate::store::{sha256_hex, BlobRef};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_PATH: &str = "manifest.json";
pub const MODEL_PATH: &str = "model.bin";
pub const MODEL_FORMAT_TAG: &str = "MFLM/1";
pub const DEFAULT_RUNTIME_REQUIREMENT: &str = ">=1.0.0,<2.0.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub checksums: BTreeMap<String, String>,
    pub created_at: String,
    pub format_version: u32,
    pub gate: GateSummary,
    pub input_schema: InputSchema,
    pub manifest_digest: String,
    pub model: ManifestModel,
    pub monitoring: MonitoringOverrides,
    pub runtime: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSummary {
    pub mode: String,
    pub passed: bool,
    pub reason: String,
    /// Candidate RMSE per evaluated snapshot.
    pub rmse: BTreeMap<String, f64>,
    pub verdict_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSchema {
    pub features: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModel {
    pub artifact: BlobRef,
    pub format: String,
    pub id: String,
    pub name: String,
    pub version: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitoringOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// Serialises any value as canonical JSON: object keys sorted, no insignificant whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_vec(&v).expect("serializable value")
}

impl BundleManifest {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }

    pub fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.manifest_digest.clear();
        sha256_hex(&copy.canonical_bytes())
    }
}

/// `>=a.b.c,<d.0.0`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionRange {
    pub min: Version,
    pub below_major: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl FromStr for Version {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let bad = || Error::validation(format!("invalid version {s:?}: expected MAJOR.MINOR.PATCH"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut nums = [0u64; 3];
        for (slot, p) in nums.iter_mut().zip(&parts) {
            let canonical = !p.is_empty()
                && p.bytes().all(|b| b.is_ascii_digit())
                && (p.len() == 1 || !p.starts_with('0'));
            if !canonical {
                return Err(bad());
            }
            *slot = p.parse().map_err(|_| bad())?;
        }
        Ok(Version {
            major: nums[0],
            minor: nums[1],
            patch: nums[2],
        })
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl FromStr for VersionRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::validation(format!("invalid runtime range {s:?}: {why}"));
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| bad("expected \">=a.b.c,<d.0.0\""))?;
        let lo = lo.strip_prefix(">=").ok_or_else(|| bad("lower bound must start with >="))?;
        let hi = hi.strip_prefix('<').ok_or_else(|| bad("upper bound must start with <"))?;
        let min: Version = lo.parse()?;
        let upper: Version = hi.parse()?;
        if upper.minor != 0 || upper.patch != 0 {
            return Err(bad("upper bound must be a major version d.0.0"));
        }
        if upper <= min {
            return Err(bad("range is empty"));
        }
        Ok(VersionRange {
            min,
            below_major: upper.major,
        })
    }
}

impl fmt::Display for VersionRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, ">={},<{}.0.0", self.min, self.below_major)
    }
}

impl VersionRange {
    pub fn contains(&self, v: &Version) -> bool {
        *v >= self.min && v.major < self.below_major
    }
}

/// Everything a bundle is a pure function of.
#[derive(Debug, Clone)]
pub struct BundleInput {
    pub model_id: String,
    pub model_name: String,
    pub model_version: u32,
    pub created_at: String,
    pub model_bytes: Vec<u8>,
    pub gate: GateSummary,
    pub monitoring: MonitoringOverrides,
    pub runtime: String,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub bytes: Vec<u8>,
}

pub fn build_bundle(input: &BundleInput) -> Result<Bundle> {
    let model = LinearModel::from_bytes(&input.model_bytes)?;
    input.runtime.parse::<VersionRange>()?;
    let artifact = BlobRef::of(&input.model_bytes);
    let mut manifest = BundleManifest {
        checksums: BTreeMap::from([(MODEL_PATH.to_string(), artifact.hash.clone())]),
        created_at: input.created_at.clone(),
        format_version: BUNDLE_FORMAT_VERSION,
        gate: input.gate.clone(),
        input_schema: InputSchema {
            features: model.features.clone(),
            target: model.target.clone(),
        },
        manifest_digest: String::new(),
        model: ManifestModel {
            artifact,
            format: MODEL_FORMAT_TAG.to_string(),
            id: input.model_id.clone(),
            name: input.model_name.clone(),
            version: input.model_version,
        },
        monitoring: input.monitoring.clone(),
        runtime: input.runtime.clone(),
    };
    manifest.manifest_digest = manifest.compute_digest();
    let bytes = write_archive(&manifest.canonical_bytes(), &input.model_bytes)?;
    Ok(Bundle { manifest, bytes })
}

fn write_archive(manifest: &[u8], model: &[u8]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (path, data) in [(MANIFEST_PATH, manifest), (MODEL_PATH, model)] {
        let mut header = tar::Header::new_ustar();
        header.set_path(path)?;
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_uid(0);
        header.set_gid(0);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        header.set_cksum();
        builder.append(&header, data)?;
    }
    Ok(builder.into_inner()?)
}

fn read_archive(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let broken = |e: std::io::Error| Error::corruption(format!("unreadable bundle archive: {e}"));
    let mut archive = tar::Archive::new(bytes);
    let mut files = Vec::new();
    for entry in archive.entries().map_err(broken)? {
        let mut entry = entry.map_err(broken)?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            return Err(Error::corruption("bundle contains a non-regular entry"));
        }
        let path = entry
            .path()
            .map_err(broken)?
            .to_str()
            .ok_or_else(|| Error::corruption("bundle path is not UTF-8"))?
            .to_string();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(broken)?;
        if files.iter().any(|(p, _)| p == &path) {
            return Err(Error::corrupt_path(path, "duplicate entry in bundle"));
        }
        files.push((path, data));
    }
    Ok(files)
}

/// Checks a bundle end to end and returns its manifest.
///
/// Checks run in order: archive structure, manifest format version,
/// canonical form and digest, file checksums, unlisted files, runtime
/// range, model/schema agreement, and finally byte equality with a fresh
/// rebuild (which catches tampering in headers and padding).
pub fn verify_bundle(bytes: &[u8]) -> Result<BundleManifest> {
    let files = read_archive(bytes)?;
    let file = |p: &str| files.iter().find(|(path, _)| path == p).map(|(_, d)| d);
    let raw = file(MANIFEST_PATH).ok_or_else(|| Error::IncompleteBundle {
        path: MANIFEST_PATH.into(),
    })?;
    let bad_manifest = |why: String| Error::corrupt_path(MANIFEST_PATH, why);
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| bad_manifest(format!("manifest is not JSON: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(BUNDLE_FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Unsupported(format!("bundle format_version {v}"))),
        None => return Err(bad_manifest("manifest lacks format_version".into())),
    }
    let manifest: BundleManifest = serde_json::from_value(value)
        .map_err(|e| bad_manifest(format!("manifest does not match the schema: {e}")))?;
    if manifest.canonical_bytes() != *raw {
        return Err(bad_manifest("manifest is not in canonical form".into()));
    }
    if manifest.compute_digest() != manifest.manifest_digest {
        return Err(bad_manifest("manifest digest mismatch".into()));
    }
    for (path, expected) in &manifest.checksums {
        let data = file(path).ok_or_else(|| Error::IncompleteBundle { path: path.clone() })?;
        if sha256_hex(data) != *expected {
            return Err(Error::corrupt_path(path, format!("checksum mismatch for {path}")));
        }
    }
    for (path, _) in &files {
        if path != MANIFEST_PATH && !manifest.checksums.contains_key(path) {
            return Err(Error::corrupt_path(path, format!("{path} is not listed in the manifest")));
        }
    }
    if manifest.runtime.is_empty() {
        return Err(bad_manifest("runtime requirement is empty".into()));
    }
    manifest.runtime.parse::<VersionRange>().map_err(|e| bad_manifest(e.to_string()))?;
    let model_bytes = file(MODEL_PATH).ok_or_else(|| Error::IncompleteBundle {
        path: MODEL_PATH.into(),
    })?;
    if manifest.model.format != MODEL_FORMAT_TAG {
        return Err(Error::Unsupported(format!("model format {}", manifest.model.format)));
    }
    let model = LinearModel::from_bytes(model_bytes).map_err(|e| Error::corrupt_path(MODEL_PATH, e.to_string()))?;
    if model.features != manifest.input_schema.features
        || model.target != manifest.input_schema.target
        || BlobRef::of(model_bytes) != manifest.model.artifact
    {
        return Err(bad_manifest("manifest does not describe model.bin".into()));
    }
    if write_archive(raw, model_bytes)? != bytes {
        return Err(Error::corruption("archive layout is not canonical"));
    }
    Ok(manifest)
}

/// Returns the manifest and decoded model of a verified bundle.
pub fn open_bundle(bytes: &[u8]) -> Result<(BundleManifest, LinearModel)> {
    let manifest = verify_bundle(bytes)?;
    let files = read_archive(bytes)?;
    let model_bytes = &files
        .iter()
        .find(|(p, _)| p == MODEL_PATH)
        .expect("verified bundle has a model")
        .1;
    Ok((manifest, LinearModel::from_bytes(model_bytes)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> BundleInput {
        let model = LinearModel {
            target: "y".into(),
            features: vec!["x1".into(), "x2".into()],
            coefficients: vec![2.0, -1.0],
            intercept: 1.0,
            train_residual_std: 0.1,
        };
        BundleInput {
            model_id: "model-000001".into(),
            model_name: "plant-A".into(),
            model_version: 1,
            created_at: "2026-01-01T00:00:00.000000Z".into(),
            model_bytes: model.to_bytes(),
            gate: GateSummary {
                mode: "absolute".into(),
                passed: true,
                reason: "ok".into(),
                rmse: BTreeMap::from([("snap-000001".into(), 0.1)]),
                verdict_id: "gate-000001".into(),
            },
            monitoring: MonitoringOverrides::default(),
            runtime: DEFAULT_RUNTIME_REQUIREMENT.into(),
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let a = build_bundle(&input()).unwrap();
        let b = build_bundle(&input()).unwrap();
        assert_eq!(a.bytes, b.bytes);
        let m = verify_bundle(&a.bytes).unwrap();
        assert_eq!(m, a.manifest);
        assert_eq!(m.checksums[MODEL_PATH], sha256_hex(&input().model_bytes));
        assert!(!m.checksums.contains_key(MANIFEST_PATH));
    }

    #[test]
    fn model_byte_flip_names_model_path() {
        let b = build_bundle(&input()).unwrap();
        let bytes = b.bytes;
        let files = read_archive(&bytes).unwrap();
        let model = &files[1].1;
        // locate the model payload inside the archive
        let pos = bytes.windows(model.len()).position(|w| w == &model[..]).unwrap();
        let mut t = bytes.clone();
        t[pos + model.len() - 1] ^= 0x01;
        match verify_bundle(&t).unwrap_err() {
            Error::Corruption { path, .. } => assert_eq!(path.as_deref(), Some(MODEL_PATH)),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn missing_file_is_incomplete() {
        let b = build_bundle(&input()).unwrap();
        let only_manifest = write_single(MANIFEST_PATH, &b.manifest.canonical_bytes());
        assert!(matches!(
            verify_bundle(&only_manifest),
            Err(Error::IncompleteBundle { ref path }) if path == MODEL_PATH
        ));
    }

    fn write_single(path: &str, data: &[u8]) -> Vec<u8> {
        let mut builder = tar::Builder::new(Vec::new());
        let mut h = tar::Header::new_ustar();
        h.set_path(path).unwrap();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_cksum();
        builder.append(&h, data).unwrap();
        builder.into_inner().unwrap()
    }

    #[test]
    fn unknown_format_version() {
        let b = build_bundle(&input()).unwrap();
        let mut m = b.manifest.clone();
        m.format_version = 2;
        m.manifest_digest = m.compute_digest();
        let bytes = write_archive(&m.canonical_bytes(), &input().model_bytes).unwrap();
        assert!(matches!(verify_bundle(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn garbage_is_corruption() {
        assert!(matches!(verify_bundle(b"not a tar"), Err(Error::Corruption { .. }) | Err(Error::IncompleteBundle { .. })));
        assert!(verify_bundle(&[]).is_err());
    }

    #[test]
    fn version_ranges() {
        let r: VersionRange = ">=1.0.0,<2.0.0".parse().unwrap();
        assert!(r.contains(&"1.0.0".parse().unwrap()));
        assert!(r.contains(&"1.9.3".parse().unwrap()));
        assert!(!r.contains(&"2.0.0".parse().unwrap()));
        assert!(!r.contains(&"0.9.9".parse().unwrap()));
        assert_eq!(r.to_string(), ">=1.0.0,<2.0.0");
        for bad in ["", ">=1.0.0", "1.0.0,<2.0.0", ">=1.0,<2.0.0", ">=1.0.0,<2.1.0", ">=2.0.0,<2.0.0", ">=01.0.0,<2.0.0", ">= 1.0.0,<2.0.0", "^1.0.0"] {
            assert!(bad.parse::<VersionRange>().is_err(), "{bad}");
        }
        let mut i = input();
        i.runtime = "~1".into();
        assert!(build_bundle(&i).is_err());
    }
}
