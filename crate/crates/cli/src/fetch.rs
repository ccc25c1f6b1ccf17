//! Download MNIST and verify checksums before anything is written.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

/// An npm mirror of the four original IDX files, uncompressed.
pub const MNIST_URL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";
pub const MNIST_ARCHIVE_SHA256: &str = "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed";

/// Expected file name and SHA-256 of each IDX file.
pub const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("download failed: {0}")]
    Http(String),
    #[error("checksum mismatch for {what}: expected {expected}, got {actual}")]
    Checksum { what: String, expected: String, actual: String },
    #[error("archive is missing {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check(what: &str, bytes: &[u8], expected: &str) -> Result<(), FetchError> {
    let actual = sha256_hex(bytes);
    if actual != expected {
        return Err(FetchError::Checksum { what: what.into(), expected: expected.into(), actual });
    }
    Ok(())
}

/// True when every file is present in `dest` with the expected digest.
pub fn mnist_present(dest: &Path) -> bool {
    MNIST_FILES.iter().all(|(name, sum)| std::fs::read(dest.join(name)).is_ok_and(|b| sha256_hex(&b) == *sum))
}

/// Extract and verify the IDX files from the gzipped tarball `archive`.
pub fn unpack_mnist(archive: &[u8], dest: &Path) -> Result<(), FetchError> {
    check("archive", archive, MNIST_ARCHIVE_SHA256)?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(archive));
    for entry in tar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else { continue };
        if let Some((_, sum)) = MNIST_FILES.iter().find(|(n, _)| *n == name) {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            check(&name, &buf, sum)?;
            files.push((name, buf));
        }
    }
    for (name, _) in MNIST_FILES {
        if !files.iter().any(|(n, _)| n == name) {
            return Err(FetchError::Missing(name.into()));
        }
    }
    std::fs::create_dir_all(dest)?;
    for (name, bytes) in files {
        let tmp = dest.join(format!("{name}.partial"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, dest.join(name))?;
    }
    Ok(())
}

/// Download into `dest` unless verified copies are already there.
pub fn fetch_mnist(dest: &Path, url: &str) -> Result<bool, FetchError> {
    if mnist_present(dest) {
        return Ok(false);
    }
    let mut resp = ureq::get(url).call().map_err(|e| FetchError::Http(e.to_string()))?;
    let bytes = resp
        .body_mut()
        .with_config()
        .limit(200 * 1024 * 1024)
        .read_to_vec()
        .map_err(|e| FetchError::Http(e.to_string()))?;
    unpack_mnist(&bytes, dest)?;
    Ok(true)
}
