//! `fetch-data`: downloads the canonical dataset archives, verifies them,
//! and installs decompressed files into the data directory.
//!
//! MNIST-family payloads are pinned by the SHA-256 of their decompressed
//! bytes, which is mirror-independent. The CIFAR-10 tarball has no pinned
//! digest here; it gets structural verification (record layout, counts,
//! label range) plus an optional user-supplied digest. `--from-dir` reads
//! the same archive files from a local directory instead of the network.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use featherlite_core::dataio::{self, DatasetName};
use sha2::{Digest, Sha256};

struct IdxArchive {
    /// Compressed file name as published.
    archive: &'static str,
    /// Installed (decompressed) file name.
    target: &'static str,
    /// SHA-256 of the decompressed payload.
    sha256: &'static str,
}

const MNIST_BASE: &str = "https://storage.googleapis.com/cvdf-datasets/mnist";
const FASHION_BASE: &str =
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com";
const CIFAR_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";

const MNIST_FILES: [IdxArchive; 4] = [
    IdxArchive {
        archive: "train-images-idx3-ubyte.gz",
        target: "train-images-idx3-ubyte",
        sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    },
    IdxArchive {
        archive: "train-labels-idx1-ubyte.gz",
        target: "train-labels-idx1-ubyte",
        sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    },
    IdxArchive {
        archive: "t10k-images-idx3-ubyte.gz",
        target: "t10k-images-idx3-ubyte",
        sha256: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    },
    IdxArchive {
        archive: "t10k-labels-idx1-ubyte.gz",
        target: "t10k-labels-idx1-ubyte",
        sha256: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    },
];

const FASHION_FILES: [IdxArchive; 4] = [
    IdxArchive {
        archive: "train-images-idx3-ubyte.gz",
        target: "train-images-idx3-ubyte",
        sha256: "c59f468a2f672dc815687fe0f83887768d799fd8a3f3276145d20f83aa44d888",
    },
    IdxArchive {
        archive: "train-labels-idx1-ubyte.gz",
        target: "train-labels-idx1-ubyte",
        sha256: "bad3541b69d912435c50bb6ba87bec294ff4f6a2e1246121d8633921760443d9",
    },
    IdxArchive {
        archive: "t10k-images-idx3-ubyte.gz",
        target: "t10k-images-idx3-ubyte",
        sha256: "5b4141f0afbad91edebe8549f8fcffe087ea10ca49f1dbef5c9a5cd8815ce37b",
    },
    IdxArchive {
        archive: "t10k-labels-idx1-ubyte.gz",
        target: "t10k-labels-idx1-ubyte",
        sha256: "0402a96d92fd2663957122ceb108a494c5af83dab82d92729df917d7dec38c34",
    },
];

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn obtain(url: &str, archive_name: &str, from_dir: Option<&Path>) -> Result<Vec<u8>> {
    match from_dir {
        Some(dir) => {
            let path = dir.join(archive_name);
            std::fs::read(&path).with_context(|| format!("reading {}", path.display()))
        }
        None => {
            eprintln!("downloading {url}");
            let resp = reqwest::blocking::get(url)
                .with_context(|| format!("fetching {url}"))?
                .error_for_status()
                .with_context(|| format!("fetching {url}"))?;
            Ok(resp.bytes()?.to_vec())
        }
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .context("decompressing gzip archive")?;
    Ok(out)
}

fn fetch_idx_family(
    base_url: &str,
    files: &[IdxArchive],
    dest: &Path,
    from_dir: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(dest)?;
    for file in files {
        let raw = obtain(
            &format!("{base_url}/{}", file.archive),
            file.archive,
            from_dir,
        )?;
        let payload = gunzip(&raw)?;
        let digest = sha256_hex(&payload);
        if digest != file.sha256 {
            bail!(featherlite_core::Error::Checksum {
                path: file.target.to_string(),
                expected: file.sha256.to_string(),
                computed: digest,
            });
        }
        std::fs::write(dest.join(file.target), payload)?;
        eprintln!("installed {} (sha256 verified)", file.target);
    }
    Ok(())
}

fn fetch_cifar(dest: &Path, from_dir: Option<&Path>, sha256: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dest)?;
    let raw = obtain(CIFAR_URL, "cifar-10-binary.tar.gz", from_dir)?;
    match sha256 {
        Some(expected) => {
            let digest = sha256_hex(&raw);
            if digest != expected {
                bail!(featherlite_core::Error::Checksum {
                    path: "cifar-10-binary.tar.gz".to_string(),
                    expected: expected.to_string(),
                    computed: digest,
                });
            }
            eprintln!("archive sha256 verified");
        }
        None => eprintln!(
            "note: no digest pinned for cifar-10-binary.tar.gz; applying structural \
             verification (pass --sha256 to enforce one)"
        ),
    }
    let tar_bytes = gunzip(&raw)?;
    let mut archive = tar::Archive::new(&tar_bytes[..]);
    let wanted: Vec<&str> = dataio::CIFAR_TRAIN_FILES
        .iter()
        .chain(dataio::CIFAR_TEST_FILES.iter())
        .copied()
        .collect();
    let mut installed = 0;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_path_buf();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        if wanted.contains(&name.as_str()) {
            let mut bytes = Vec::new();
            entry.read_to_end(&mut bytes)?;
            std::fs::write(dest.join(&name), bytes)?;
            eprintln!("installed {name}");
            installed += 1;
        }
    }
    if installed != wanted.len() {
        bail!("archive held {installed} of {} expected batch files", wanted.len());
    }
    Ok(())
}

/// Fetches and installs one dataset, then loads it once as an end-to-end
/// structural check (magic numbers, counts, label ranges).
pub fn fetch_dataset(
    name: DatasetName,
    data_dir: &Path,
    from_dir: Option<&Path>,
    cifar_sha256: Option<&str>,
) -> Result<()> {
    let dest: PathBuf = data_dir.join(name.dir_name());
    match name {
        DatasetName::Mnist => fetch_idx_family(MNIST_BASE, &MNIST_FILES, &dest, from_dir)?,
        DatasetName::Fashion => fetch_idx_family(FASHION_BASE, &FASHION_FILES, &dest, from_dir)?,
        DatasetName::Cifar10 => fetch_cifar(&dest, from_dir, cifar_sha256)?,
    }
    let pair = dataio::load_dataset(name, data_dir)
        .context("verifying installed dataset structure")?;
    eprintln!(
        "verified {name}: {} train / {} test samples of shape {:?}",
        pair.train.len(),
        pair.test.len(),
        pair.train.sample_shape()
    );
    Ok(())
}
