//! IDX dataset loading, the staircase label-skew partition and per-client
//! rank assignment.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::debug;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_PIXELS: usize = 28 * 28;

/// Images flattened to rows of 784 values in `[0, 1]`, with class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of classes, taken as `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into an `N × rows·cols` matrix scaled to `[0,1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    check_header(path, bytes, IMAGE_MAGIC, 16)?;
    let count = read_u32(bytes, 4) as usize;
    let pixels = read_u32(bytes, 8) as usize * read_u32(bytes, 12) as usize;
    let expected = 16 + count * pixels;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if count == 0 || pixels == 0 {
        return Err(Error::Empty("idx images"));
    }
    let data = bytes[16..expected].iter().map(|&p| p as f64 / 255.0).collect();
    Matrix::new(count, pixels, data)
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    check_header(path, bytes, LABEL_MAGIC, 8)?;
    let count = read_u32(bytes, 4) as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&l| l as usize).collect())
}

/// Loads an image/label IDX pair (uncompressed, as distributed for
/// MNIST/FMNIST after gunzip).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    if images.cols() != IMAGE_PIXELS {
        return Err(Error::shape("load_idx pixels", images.shape(), (images.rows(), IMAGE_PIXELS)));
    }
    debug!("loaded {} samples from {}", labels.len(), images_path.display());
    Dataset::new(images, labels)
}

/// One client's share of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    /// 1-based.
    pub client_id: usize,
    /// Sorted ascending.
    pub sample_indices: Vec<usize>,
    pub label_set: BTreeSet<usize>,
    pub rank_ratio: f64,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Staircase label skew: client `i` (1-based) holds labels `0..i`. Each
/// label's samples are shuffled and split evenly among the clients allowed
/// to hold it (`i > label`), remainders going to the highest ids. Client
/// `i` gets rank ratio `i / n_clients`, i.e. +0.1 per label with ten
/// clients.
pub fn staircase_partition(
    ds: &Dataset,
    n_clients: usize,
    rng: &mut SeededRng,
) -> Result<Vec<ClientPartition>> {
    if n_clients == 0 {
        return Err(Error::Empty("staircase_partition"));
    }
    let present: BTreeSet<usize> = ds.labels.iter().copied().collect();
    if (0..n_clients).any(|l| !present.contains(&l)) {
        return Err(Error::TooFewClasses {
            needed: n_clients,
            available: present.len(),
        });
    }

    let mut shares: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for label in 0..n_clients {
        let mut pool: Vec<usize> = ds
            .labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut pool);
        // eligible client ids label+1..=n_clients, as 0-based slots label..n
        let eligible = n_clients - label;
        let base = pool.len() / eligible;
        let extra = pool.len() % eligible;
        let mut start = 0;
        for k in 0..eligible {
            let take = base + usize::from(k >= eligible - extra);
            shares[label + k].extend_from_slice(&pool[start..start + take]);
            start += take;
        }
    }

    Ok(shares
        .into_iter()
        .enumerate()
        .map(|(slot, mut indices)| {
            indices.sort_unstable();
            let client_id = slot + 1;
            ClientPartition {
                client_id,
                sample_indices: indices,
                label_set: (0..client_id).collect(),
                rank_ratio: client_id as f64 / n_clients as f64,
            }
        })
        .collect())
}

/// `max(1, round_half_up(ratio · min(m, n)))`.
pub fn rank_for(ratio: f64, (m, n): (usize, usize)) -> usize {
    let full = m.min(n);
    let r = (ratio * full as f64 + 0.5).floor() as usize;
    r.clamp(1, full)
}

/// Per-client, per-layer adapter ranks.
pub fn assign_ranks(partitions: &[ClientPartition], layer_shapes: &[(usize, usize)]) -> Vec<Vec<usize>> {
    partitions
        .iter()
        .map(|p| layer_shapes.iter().map(|&s| rank_for(p.rank_ratio, s)).collect())
        .collect()
}
