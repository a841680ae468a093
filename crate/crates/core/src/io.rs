//! On-disk formats.
//!
//! * Bundle (`.vsbn`): little-endian binary. 24-byte header (magic `VSBN`,
//!   `u32` version, `u64` N, `u32` D, `u32` K), then N·D descriptor `f32`s and
//!   N·K probability `f32`s, both row-major. Encoded feature sets reuse the
//!   layout with K = 0.
//! * Codebook: JSON document (see [`SemanticCodebook`]).
//! * Manifest: one image per line, `id<TAB>start<TAB>end<TAB>label|-`.
//! * Selection: one original class index per line.
//!
//! Every writer goes through a temp file in the destination directory and a rename.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::codebook::SemanticCodebook;
use crate::data::{DescriptorMatrix, EncodedVector, PatchManifest, ProbabilityMatrix};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: [u8; 4] = *b"VSBN";
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_HEADER_LEN: u64 = 24;

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Serializes a bundle to bytes.
pub fn encode_bundle(desc: &DescriptorMatrix, prob: &ProbabilityMatrix) -> Result<Vec<u8>> {
    let n = desc.n_patches();
    if prob.n_patches() != n {
        return Err(Error::MismatchedRows {
            what: format!("{n} descriptors vs {} probability rows", prob.n_patches()),
        });
    }
    let values = desc.as_slice().iter().chain(prob.as_slice());
    let mut out = Vec::with_capacity(24 + 4 * (desc.as_slice().len() + prob.as_slice().len()));
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&u32::try_from(desc.dim()).map_err(|_| dim_overflow())?.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(prob.n_classes())
            .map_err(|_| dim_overflow())?
            .to_le_bytes(),
    );
    for &v in values {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::non_finite("bundle value (after f32 narrowing)"));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn dim_overflow() -> Error {
    Error::InconsistentDim("dimension does not fit in u32".into())
}

pub fn write_bundle(desc: &DescriptorMatrix, prob: &ProbabilityMatrix, path: &Path) -> Result<()> {
    let bytes = encode_bundle(desc, prob)?;
    write_atomic(path, &bytes)
}

/// Parses bundle bytes. Probabilities come back raw (see [`crate::validate_bundle`]).
pub fn decode_bundle(bytes: &[u8], path: &Path) -> Result<(DescriptorMatrix, ProbabilityMatrix)> {
    let truncated = |expected: u64| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len() as u64,
    };
    if bytes.len() < BUNDLE_HEADER_LEN as usize {
        if bytes.len() >= 4 && bytes[..4] != BUNDLE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(truncated(BUNDLE_HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != BUNDLE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32_at(16) as u64;
    let k = u32_at(20) as u64;
    let expected = n
        .checked_mul(d + k)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(BUNDLE_HEADER_LEN))
        .ok_or_else(|| Error::Parse("bundle header sizes overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(truncated(expected));
    }
    let (n, d, k) = (n as usize, d as usize, k as usize);
    let floats = |start: usize, count: usize| -> Vec<f64> {
        bytes[start..start + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    let header = BUNDLE_HEADER_LEN as usize;
    let desc = DescriptorMatrix::new(floats(header, n * d), n, d)?;
    let prob = ProbabilityMatrix::from_raw(floats(header + 4 * n * d, n * k), n, k)?;
    Ok((desc, prob))
}

pub fn read_bundle(path: &Path) -> Result<(DescriptorMatrix, ProbabilityMatrix)> {
    decode_bundle(&read_all(path)?, path)
}

/// Writes image-level vectors as a K = 0 bundle, one row per image.
pub fn write_features(vectors: &[EncodedVector], path: &Path) -> Result<()> {
    let dim = vectors.first().map_or(1, EncodedVector::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InconsistentDim("feature vectors differ in length".into()));
    }
    let data: Vec<f64> = vectors.iter().flat_map(|v| v.data.iter().copied()).collect();
    let desc = DescriptorMatrix::new(data, vectors.len(), dim)?;
    let prob = ProbabilityMatrix::from_raw(Vec::new(), vectors.len(), 0)?;
    write_bundle(&desc, &prob, path)
}

/// Reads a feature bundle written by [`write_features`].
pub fn read_features(path: &Path) -> Result<DescriptorMatrix> {
    let (desc, prob) = read_bundle(path)?;
    if prob.n_classes() != 0 {
        return Err(Error::Parse(format!(
            "{} is a patch bundle (K = {}), not a feature file",
            path.display(),
            prob.n_classes()
        )));
    }
    Ok(desc)
}

pub fn codebook_to_string(cb: &SemanticCodebook) -> Result<String> {
    cb.check_invariants()?;
    let mut s = serde_json::to_string_pretty(&CodebookDoc::from(cb))
        .map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn codebook_from_str(s: &str) -> Result<SemanticCodebook> {
    let doc: CodebookDoc = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
    let cb = doc.into_codebook()?;
    cb.check_invariants()?;
    Ok(cb)
}

pub fn write_codebook(cb: &SemanticCodebook, path: &Path) -> Result<()> {
    write_atomic(path, codebook_to_string(cb)?.as_bytes())
}

pub fn read_codebook(path: &Path) -> Result<SemanticCodebook> {
    codebook_from_str(&read_text(path)?)
}

/// File shape of a codebook: nested `K×D` arrays are easier to audit than flat ones.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
struct CodebookDoc {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    pi: Vec<f64>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    mass: Vec<f64>,
    active: Vec<bool>,
    total_mass: f64,
    variance_floor: f64,
    #[serde(default)]
    provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selected_ids: Option<Vec<usize>>,
}

impl From<&SemanticCodebook> for CodebookDoc {
    fn from(cb: &SemanticCodebook) -> Self {
        let rows = |v: &[f64]| v.chunks(cb.d.max(1)).map(<[f64]>::to_vec).collect();
        CodebookDoc {
            k: cb.k,
            d: cb.d,
            pi: cb.pi.clone(),
            mu: rows(&cb.mu),
            sigma: rows(&cb.sigma),
            mass: cb.mass.clone(),
            active: cb.active.clone(),
            total_mass: cb.total_mass,
            variance_floor: cb.variance_floor,
            provenance: cb.provenance.clone(),
            selected_ids: cb.selected_ids.clone(),
        }
    }
}

impl CodebookDoc {
    fn into_codebook(self) -> Result<SemanticCodebook> {
        let flat = |rows: Vec<Vec<f64>>, what: &str| -> Result<Vec<f64>> {
            if rows.len() != self.k || rows.iter().any(|r| r.len() != self.d) {
                return Err(Error::InvariantViolation(format!(
                    "{what} is not {}x{}",
                    self.k, self.d
                )));
            }
            Ok(rows.concat())
        };
        Ok(SemanticCodebook {
            k: self.k,
            d: self.d,
            mu: flat(self.mu, "mu")?,
            sigma: flat(self.sigma, "sigma")?,
            pi: self.pi,
            mass: self.mass,
            active: self.active,
            total_mass: self.total_mass,
            variance_floor: self.variance_floor,
            provenance: self.provenance,
            selected_ids: self.selected_ids,
        })
    }
}

pub fn manifest_to_string(m: &PatchManifest) -> Result<String> {
    let mut out = String::new();
    for ((id, r), label) in m.image_ids().iter().zip(m.ranges()).zip(m.labels()) {
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidManifest(format!(
                "image id {id:?} is empty or contains a tab/newline"
            )));
        }
        let label = label.map_or_else(|| "-".to_string(), |l| l.to_string());
        out.push_str(&format!("{id}\t{}\t{}\t{label}\n", r.start, r.end));
    }
    Ok(out)
}

pub fn manifest_from_str(s: &str) -> Result<PatchManifest> {
    let mut ids = Vec::new();
    let mut ranges = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::InvalidManifest(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, start, end, label] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let start: usize = start.parse().map_err(|_| bad("bad start"))?;
        let end: usize = end.parse().map_err(|_| bad("bad end"))?;
        let label = match label {
            "-" => None,
            l => Some(l.parse().map_err(|_| bad("bad label"))?),
        };
        ids.push(id.to_string());
        ranges.push(start..end);
        labels.push(label);
    }
    PatchManifest::new(ids, ranges, labels)
}

pub fn write_manifest(m: &PatchManifest, path: &Path) -> Result<()> {
    write_atomic(path, manifest_to_string(m)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<PatchManifest> {
    manifest_from_str(&read_text(path)?)
}

pub fn write_selection(selected: &[usize], path: &Path) -> Result<()> {
    let body: String = selected.iter().map(|i| format!("{i}\n")).collect();
    write_atomic(path, body.as_bytes())
}

pub fn read_selection(path: &Path) -> Result<Vec<usize>> {
    read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse()
                .map_err(|_| Error::Parse(format!("bad class index `{l}` in {}", path.display())))
        })
        .collect()
}

/// JSON for the auxiliary model files (k-means, GMM, PCA, SVM).
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{build_codebook, CodebookOptions};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn bundle_round_trip_and_length() {
        let dir = tmp();
        let path = dir.path().join("b.vsbn");
        let desc = DescriptorMatrix::new(vec![0.1, -2.5, 3.0, 4.25, 1e-3, 7.0], 3, 2).unwrap();
        let prob = ProbabilityMatrix::new(
            vec![
                0.25, 0.25, 0.25, 0.25, 1.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4,
            ],
            3,
            4,
        )
        .unwrap();
        write_bundle(&desc, &prob, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 24 + 4 * 3 * (2 + 4));
        let (d2, p2) = read_bundle(&path).unwrap();
        for (a, b) in desc.as_slice().iter().zip(d2.as_slice()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        for (a, b) in prob.as_slice().iter().zip(p2.as_slice()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn minimal_and_empty_bundles() {
        let dir = tmp();
        let path = dir.path().join("one.vsbn");
        let desc = DescriptorMatrix::new(vec![1.0], 1, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![1.0], 1, 1).unwrap();
        write_bundle(&desc, &prob, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32);

        let empty = dir.path().join("empty.vsbn");
        let desc = DescriptorMatrix::new(vec![], 0, 3).unwrap();
        let prob = ProbabilityMatrix::new(vec![], 0, 2).unwrap();
        write_bundle(&desc, &prob, &empty).unwrap();
        assert_eq!(fs::metadata(&empty).unwrap().len(), 24);
        let (d, p) = read_bundle(&empty).unwrap();
        assert_eq!((d.n_patches(), d.dim(), p.n_classes()), (0, 3, 2));
    }

    #[test]
    fn bundle_corruption_is_detected() {
        let dir = tmp();
        let path = dir.path().join("b.vsbn");
        let desc = DescriptorMatrix::new(vec![1.0, 2.0], 2, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![1.0, 1.0], 2, 1).unwrap();
        let bytes = encode_bundle(&desc, &prob).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::BadMagic { .. })));

        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::TruncatedFile { .. })));

        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &v2).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(
            read_bundle(&dir.path().join("missing.vsbn")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn narrowing_overflow_is_rejected_before_write() {
        let dir = tmp();
        let path = dir.path().join("b.vsbn");
        let desc = DescriptorMatrix::new(vec![1e300], 1, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![1.0], 1, 1).unwrap();
        assert!(matches!(
            write_bundle(&desc, &prob, &path),
            Err(Error::NonFinite { .. })
        ));
        assert!(!path.exists());
    }

    #[test]
    fn bundle_bytes_are_deterministic() {
        let desc = DescriptorMatrix::new(vec![0.3, 0.7], 1, 2).unwrap();
        let prob = ProbabilityMatrix::new(vec![0.5, 0.5], 1, 2).unwrap();
        assert_eq!(encode_bundle(&desc, &prob).unwrap(), encode_bundle(&desc, &prob).unwrap());
    }

    fn worked_codebook() -> SemanticCodebook {
        let desc = DescriptorMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let prob =
            ProbabilityMatrix::new(vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0], 3, 2).unwrap();
        build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap()
    }

    #[test]
    fn codebook_round_trip() {
        let cb = worked_codebook();
        let back = codebook_from_str(&codebook_to_string(&cb).unwrap()).unwrap();
        assert_eq!(back, cb);
        for (a, b) in cb.sigma.iter().zip(&back.sigma) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn codebook_invariants_checked_on_read() {
        let mut cb = worked_codebook();
        cb.pi = vec![0.7, 0.7];
        let text = serde_json::to_string(&CodebookDoc::from(&cb)).unwrap();
        assert!(matches!(codebook_from_str(&text), Err(Error::InvariantViolation(_))));

        let mut cb = worked_codebook();
        cb.variance_floor = 1e-5;
        cb.sigma[0] = 0.0;
        let text = serde_json::to_string(&CodebookDoc::from(&cb)).unwrap();
        assert!(matches!(codebook_from_str(&text), Err(Error::InvariantViolation(_))));

        assert!(matches!(codebook_from_str("{ not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let m = PatchManifest::new(
            vec!["img a".into(), "b".into()],
            vec![0..3, 3..5],
            vec![Some(2), None],
        )
        .unwrap();
        let text = manifest_to_string(&m).unwrap();
        assert_eq!(text, "img a\t0\t3\t2\nb\t3\t5\t-\n");
        assert_eq!(manifest_from_str(&text).unwrap(), m);
        assert!(manifest_from_str("a\t0\t1\n").is_err());
        assert!(manifest_from_str("a\t0\t1\tx\n").is_err());
        assert!(manifest_from_str("a\t1\t2\t0\n").is_err());
    }

    #[test]
    fn selection_round_trip() {
        let dir = tmp();
        let path = dir.path().join("sel.txt");
        write_selection(&[0, 3, 17], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "0\n3\n17\n");
        assert_eq!(read_selection(&path).unwrap(), vec![0, 3, 17]);
    }
}
