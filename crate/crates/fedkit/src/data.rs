//! Locating, fetching and loading the MNIST IDX files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use fedkit_core::idx::{parse_idx_images, parse_idx_labels, IdxError};
use fedkit_core::{ContractViolation, Dataset};
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "FEDKIT_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// SHA-256 of each file's decompressed IDX payload. Checked after gunzip so
/// a mirror that recompresses the files still verifies.
pub const CHECKSUMS: [(&str, &str); 4] = [
    (
        TRAIN_IMAGES,
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        TRAIN_LABELS,
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        TEST_IMAGES,
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        TEST_LABELS,
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// Per-label sample counts of the official files.
pub const TRAIN_LABEL_COUNTS: [usize; 10] =
    [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
pub const TEST_LABEL_COUNTS: [usize; 10] = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx { path: PathBuf, source: IdxError },
    #[error("no {stem} (or {stem}.gz) in {dir}; run `fedkit fetch-data` or set {DATA_DIR_ENV}")]
    Missing { dir: PathBuf, stem: String },
    #[error("{0}")]
    Contract(#[from] ContractViolation),
    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("downloading {url}: {message}")]
    Download { url: String, message: String },
}

/// Training and test sets.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

/// Explicit path, else `$FEDKIT_DATA_DIR`, else `data/mnist`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// Reads `dir/stem`, falling back to `dir/stem.gz` (gunzipped on the fly).
pub fn read_idx_file(dir: &Path, stem: &str) -> Result<Vec<u8>, DataError> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    let path = if plain.is_file() {
        plain
    } else if gz.is_file() {
        gz
    } else {
        return Err(DataError::Missing {
            dir: dir.to_path_buf(),
            stem: stem.to_string(),
        });
    };
    let raw = fs::read(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        gunzip(&raw).map_err(|source| DataError::Io { path, source })
    } else {
        Ok(raw)
    }
}

fn gunzip(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

pub fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset, DataError> {
    let image_bytes = read_idx_file(dir, images)?;
    let raw = parse_idx_images(&image_bytes).map_err(|source| DataError::Idx {
        path: dir.join(images),
        source,
    })?;
    let label_bytes = read_idx_file(dir, labels)?;
    let labels_vec = parse_idx_labels(&label_bytes).map_err(|source| DataError::Idx {
        path: dir.join(labels),
        source,
    })?;
    Ok(Dataset::normalize(&raw, labels_vec)?)
}

pub fn load_mnist(dir: &Path) -> Result<Mnist, DataError> {
    Ok(Mnist {
        train: load_split(dir, TRAIN_IMAGES, TRAIN_LABELS)?,
        test: load_split(dir, TEST_IMAGES, TEST_LABELS)?,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn verify(stem: &str, bytes: &[u8]) -> Result<(), DataError> {
    let expected = CHECKSUMS
        .iter()
        .find(|(s, _)| *s == stem)
        .map(|(_, h)| *h)
        .unwrap_or_default();
    let actual = sha256_hex(bytes);
    if actual != expected {
        return Err(DataError::Checksum {
            file: stem.to_string(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

/// Checks every file already present in `dir` against [`CHECKSUMS`].
pub fn verify_dir(dir: &Path) -> Result<(), DataError> {
    for (stem, _) in CHECKSUMS {
        verify(stem, &read_idx_file(dir, stem)?)?;
    }
    Ok(())
}

/// Downloads `<mirror>/<stem>.gz` for each of the four files, verifies the
/// decompressed payload and writes it to `dir/<stem>`. Files already present
/// and valid are left alone.
pub fn fetch(dir: &Path, mirror: &str) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (stem, _) in CHECKSUMS {
        if let Ok(existing) = read_idx_file(dir, stem) {
            if verify(stem, &existing).is_ok() {
                log::info!("{stem}: present and verified");
                continue;
            }
        }
        let url = format!("{}/{stem}.gz", mirror.trim_end_matches('/'));
        log::info!("downloading {url}");
        let download_err = |message: String| DataError::Download {
            url: url.clone(),
            message,
        };
        let mut body = ureq::get(&url)
            .call()
            .map_err(|e| download_err(e.to_string()))?
            .into_body();
        let compressed = body
            .with_config()
            .limit(64 << 20)
            .read_to_vec()
            .map_err(|e| download_err(e.to_string()))?;
        let raw = gunzip(&compressed).map_err(|e| download_err(e.to_string()))?;
        verify(stem, &raw)?;
        let path = dir.join(stem);
        let mut file = fs::File::create(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        file.write_all(&raw)
            .map_err(|source| DataError::Io { path, source })?;
    }
    Ok(())
}
