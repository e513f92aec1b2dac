//! Discrete visual codebook over patches: k-means with k-means++ seeding
//! learns the vocabulary, and nearest-centroid lookup maps each patch to a
//! token id.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::raster::{PatchGrid, RasterImage};
use crate::util::{mix_seed, par_map, rng_from};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{0}")]
    Argument(String),
    #[error("patch dimension {got} does not match codebook dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("codebook file error on {path}: {msg}")]
    File { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Learned patch vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vocab_size: usize,
    pub patch_dim: usize,
    /// Row-major vocab_size x patch_dim.
    pub centroids: Vec<f64>,
    pub trained_on: String,
    pub seed: u64,
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

/// Per-patch token ids in the patch grid's row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Squared Euclidean distance with a fixed four-lane reduction tree.
fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for i in 0..4 {
            let d = ca[i] - cb[i];
            acc[i] += d * d;
        }
    }
    let mut rest = 0.0;
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        let d = x - y;
        rest += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

fn nearest_centroid(patch: &[f64], cb: &Codebook) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for c in 0..cb.vocab_size {
        let d = sqdist(patch, cb.centroid(c));
        if d < best_d {
            best_d = d;
            best = c as u32;
        }
    }
    (best, best_d)
}

/// k-means training statistics; the error trace is measured once per Lloyd
/// iteration after the centroid update.
#[derive(Debug, Clone)]
pub struct KmeansReport {
    pub iterations: usize,
    pub sse_trace: Vec<f64>,
}

/// Uniformly samples up to `max_n` patch vectors (seeded, without
/// replacement) from the images' patch grids; returns a flat matrix.
pub fn sample_patches(
    images: &[RasterImage],
    patch_size: usize,
    max_n: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize), TokenizerError> {
    let per_image: Vec<PatchGrid> = images
        .iter()
        .map(|img| {
            crate::raster::to_patches(img, patch_size)
                .map_err(|e| TokenizerError::Argument(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let counts: Vec<usize> = per_image.iter().map(|g| g.n_patches()).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TokenizerError::Argument("no patches to sample".into()));
    }
    let patch_dim = per_image[0].patch_dim();

    let mut indices: Vec<usize> = if total <= max_n {
        (0..total).collect()
    } else {
        let mut rng = rng_from(mix_seed(seed, "patch-sample"));
        let mut picks = rand::seq::index::sample(&mut rng, total, max_n).into_vec();
        picks.sort_unstable();
        picks
    };
    indices.dedup();

    let mut flat = Vec::with_capacity(indices.len() * patch_dim);
    let mut image_start = vec![0usize; per_image.len()];
    let mut acc = 0;
    for (i, c) in counts.iter().enumerate() {
        image_start[i] = acc;
        acc += c;
    }
    for idx in indices {
        let img_i = match image_start.binary_search(&idx) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let patch = &per_image[img_i].patches[idx - image_start[img_i]];
        flat.extend(patch.iter().map(|&p| p as f64));
    }
    let n = flat.len() / patch_dim;
    Ok((flat, n))
}

/// k-means with k-means++ seeding under the given seed; empty clusters are
/// re-seeded from the point farthest from its assigned centroid; terminates
/// when the largest centroid movement drops below 1e-6 or at `max_iters`.
pub fn train_codebook(
    patches: &[f64],
    patch_dim: usize,
    vocab_size: usize,
    seed: u64,
    max_iters: usize,
    trained_on: &str,
) -> Result<(Codebook, KmeansReport), TokenizerError> {
    if patch_dim == 0 || patches.len() % patch_dim != 0 {
        return Err(TokenizerError::Argument(format!(
            "patch buffer length {} not a multiple of patch_dim {patch_dim}",
            patches.len()
        )));
    }
    let n = patches.len() / patch_dim;
    if vocab_size < 2 {
        return Err(TokenizerError::Argument("vocab_size must be >= 2".into()));
    }
    if n < vocab_size {
        return Err(TokenizerError::Argument(format!(
            "need at least {vocab_size} patches, got {n}"
        )));
    }
    let point = |i: usize| &patches[i * patch_dim..(i + 1) * patch_dim];
    let mut rng = rng_from(mix_seed(seed, "kmeans"));

    // k-means++ seeding.
    let mut centroids = vec![0.0f64; vocab_size * patch_dim];
    let first = rng.random_range(0..n);
    centroids[..patch_dim].copy_from_slice(point(first));
    let mut min_d2 = vec![f64::INFINITY; n];
    for c in 1..vocab_size {
        let prev = &centroids[(c - 1) * patch_dim..c * patch_dim];
        let updates = par_map(&(0..n).collect::<Vec<_>>(), |_, &i| {
            sqdist(point(i), prev).min(min_d2[i])
        });
        min_d2 = updates;
        let total: f64 = min_d2.iter().sum();
        let chosen = if total > 0.0 {
            let r = rng.random_range(0.0..1.0) * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                acc += w;
                if acc > r {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let dst = c * patch_dim;
        centroids[dst..dst + patch_dim].copy_from_slice(point(chosen));
    }

    let mut cb = Codebook {
        vocab_size,
        patch_dim,
        centroids,
        trained_on: trained_on.to_string(),
        seed,
    };

    let mut report = KmeansReport {
        iterations: 0,
        sse_trace: Vec::new(),
    };
    for _iter in 0..max_iters {
        // Assignment (parallel over points; result independent of threading).
        let assigned: Vec<(u32, f64)> =
            par_map(&(0..n).collect::<Vec<_>>(), |_, &i| nearest_centroid(point(i), &cb));

        // Centroid update.
        let mut sums = vec![0.0f64; vocab_size * patch_dim];
        let mut counts = vec![0usize; vocab_size];
        for (i, &(a, _)) in assigned.iter().enumerate() {
            counts[a as usize] += 1;
            let dst = a as usize * patch_dim;
            for (s, &v) in sums[dst..dst + patch_dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut new_centroids = cb.centroids.clone();
        for c in 0..vocab_size {
            if counts[c] > 0 {
                let dst = c * patch_dim;
                for (out, &s) in new_centroids[dst..dst + patch_dim].iter_mut().zip(&sums[dst..]) {
                    *out = s / counts[c] as f64;
                }
            }
        }

        // Re-seed empty clusters from the farthest points.
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..vocab_size {
            if counts[c] == 0 {
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken.push(far);
                let dst = c * patch_dim;
                new_centroids[dst..dst + patch_dim].copy_from_slice(point(far));
            }
        }

        let movement = (0..vocab_size)
            .map(|c| {
                let dst = c * patch_dim;
                sqdist(
                    &cb.centroids[dst..dst + patch_dim],
                    &new_centroids[dst..dst + patch_dim],
                )
                .sqrt()
            })
            .fold(0.0f64, f64::max);
        cb.centroids = new_centroids;
        report.iterations += 1;

        let sse: f64 = par_map(&(0..n).collect::<Vec<_>>(), |_, &i| {
            nearest_centroid(point(i), &cb).1
        })
        .iter()
        .sum();
        report.sse_trace.push(sse);

        if movement < 1e-6 {
            break;
        }
    }
    Ok((cb, report))
}

/// Maps each patch to the index of its nearest centroid in squared Euclidean
/// distance; ties break toward the lowest index.
pub fn encode(grid: &PatchGrid, cb: &Codebook) -> Result<TokenGrid, TokenizerError> {
    if grid.patch_dim() != cb.patch_dim {
        return Err(TokenizerError::DimensionMismatch {
            got: grid.patch_dim(),
            expected: cb.patch_dim,
        });
    }
    let tokens: Vec<u32> = par_map(&grid.patches, |_, patch| {
        let v: Vec<f64> = patch.iter().map(|&p| p as f64).collect();
        nearest_centroid(&v, cb).0
    });
    Ok(TokenGrid {
        rows: grid.rows,
        cols: grid.cols,
        tokens,
    })
}

const CODEBOOK_MAGIC: &[u8; 4] = b"HBCB";
const CODEBOOK_VERSION: u8 = 1;

/// Writes the codebook container: magic, version, producing config hash,
/// vocab_size, patch_dim, seed, corpus tag, then the centroid matrix as
/// little-endian f32.
pub fn save_codebook(cb: &Codebook, path: &Path, config_hash: &[u8; 32]) -> Result<(), TokenizerError> {
    let io = |source: std::io::Error| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let io = |source: std::io::Error| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    };
    w.write_all(CODEBOOK_MAGIC).map_err(io)?;
    w.write_all(&[CODEBOOK_VERSION]).map_err(io)?;
    w.write_all(config_hash).map_err(io)?;
    w.write_all(&(cb.vocab_size as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(cb.patch_dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&cb.seed.to_le_bytes()).map_err(io)?;
    let tag = cb.trained_on.as_bytes();
    w.write_all(&(tag.len() as u16).to_le_bytes()).map_err(io)?;
    w.write_all(tag).map_err(io)?;
    for &c in &cb.centroids {
        w.write_all(&(c as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<([u8; 32], Codebook), TokenizerError> {
    let file_err = |msg: String| TokenizerError::File {
        path: path.display().to_string(),
        msg,
    };
    let bytes = std::fs::read(path).map_err(|source| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|e| file_err(e.to_string()))?;
    if &magic != CODEBOOK_MAGIC {
        return Err(file_err("bad magic; not a codebook".into()));
    }
    let mut version = [0u8; 1];
    cur.read_exact(&mut version).map_err(|e| file_err(e.to_string()))?;
    if version[0] != CODEBOOK_VERSION {
        return Err(file_err(format!("unsupported version {}", version[0])));
    }
    let mut hash = [0u8; 32];
    cur.read_exact(&mut hash).map_err(|e| file_err(e.to_string()))?;
    let mut b4 = [0u8; 4];
    cur.read_exact(&mut b4).map_err(|e| file_err(e.to_string()))?;
    let vocab_size = u32::from_le_bytes(b4) as usize;
    cur.read_exact(&mut b4).map_err(|e| file_err(e.to_string()))?;
    let patch_dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    cur.read_exact(&mut b8).map_err(|e| file_err(e.to_string()))?;
    let seed = u64::from_le_bytes(b8);
    let mut b2 = [0u8; 2];
    cur.read_exact(&mut b2).map_err(|e| file_err(e.to_string()))?;
    let mut tag = vec![0u8; u16::from_le_bytes(b2) as usize];
    cur.read_exact(&mut tag).map_err(|e| file_err(e.to_string()))?;
    let mut raw = vec![0u8; vocab_size * patch_dim * 4];
    cur.read_exact(&mut raw).map_err(|e| file_err(e.to_string()))?;
    let centroids = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((
        hash,
        Codebook {
            vocab_size,
            patch_dim,
            centroids,
            trained_on: String::from_utf8(tag).map_err(|e| file_err(e.to_string()))?,
            seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid_from(patches: Vec<Vec<f32>>, dim: usize) -> PatchGrid {
        let side = (dim as f64).sqrt() as usize;
        PatchGrid {
            patch_size: side,
            rows: patches.len(),
            cols: 1,
            patches,
            source_record_id: "t".into(),
        }
    }

    #[test]
    fn kmeans_with_k_equal_n_recovers_points() {
        let dim = 4;
        let pts: Vec<f64> = (0..8 * dim).map(|i| i as f64).collect();
        let (cb, report) = train_codebook(&pts, dim, 8, 3, 50, "test").unwrap();
        assert!(report.sse_trace.last().unwrap() < &1e-18);
        let mut found: Vec<Vec<u64>> = (0..8)
            .map(|c| cb.centroid(c).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut expected: Vec<Vec<u64>> = (0..8)
            .map(|i| pts[i * dim..(i + 1) * dim].iter().map(|v| v.to_bits()).collect())
            .collect();
        found.sort();
        expected.sort();
        assert_eq!(found, expected);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = crate::util::rng_from(11);
        let dim = 6;
        let sigma = 0.05;
        let n_per = 400;
        let mean_a = vec![0.0; dim];
        let mean_b = vec![5.0; dim];
        let mut pts = Vec::new();
        for means in [&mean_a, &mean_b] {
            for _ in 0..n_per {
                for &m in means.iter() {
                    pts.push(m + rng.random_range(-sigma..sigma));
                }
            }
        }
        let (cb, _) = train_codebook(&pts, dim, 2, 5, 100, "blobs").unwrap();
        // Compare against the in-sample blob means.
        let sample_mean = |lo: usize| -> Vec<f64> {
            let mut m = vec![0.0; dim];
            for i in lo..lo + n_per {
                for d in 0..dim {
                    m[d] += pts[i * dim + d];
                }
            }
            m.iter().map(|v| v / n_per as f64).collect()
        };
        let (ma, mb) = (sample_mean(0), sample_mean(n_per));
        let tol = 3.0 * sigma / (n_per as f64).sqrt();
        let close = |c: &[f64], m: &[f64]| {
            c.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < tol * 3.0
        };
        let c0 = cb.centroid(0);
        let c1 = cb.centroid(1);
        assert!(
            (close(c0, &ma) && close(c1, &mb)) || (close(c0, &mb) && close(c1, &ma)),
            "centroids missed the blob means"
        );
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = crate::util::rng_from(4);
        let pts: Vec<f64> = (0..500 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
        let (a, _) = train_codebook(&pts, 8, 16, 42, 30, "d").unwrap();
        let (b, _) = train_codebook(&pts, 8, 16, 42, 30, "d").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_sse_is_non_increasing() {
        let mut rng = crate::util::rng_from(9);
        let pts: Vec<f64> = (0..600 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, report) = train_codebook(&pts, 4, 10, 1, 40, "sse").unwrap();
        for w in report.sse_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kmeans_rejects_too_few_patches() {
        let pts = vec![0.0; 3 * 4];
        assert!(matches!(
            train_codebook(&pts, 4, 8, 0, 10, "x"),
            Err(TokenizerError::Argument(_))
        ));
    }

    fn toy_codebook() -> Codebook {
        // Centroids at 0, 10, 20, ... along the first coordinate.
        let dim = 4;
        let vocab = 8;
        let mut centroids = vec![0.0; vocab * dim];
        for c in 0..vocab {
            centroids[c * dim] = 10.0 * c as f64;
        }
        Codebook {
            vocab_size: vocab,
            patch_dim: dim,
            centroids,
            trained_on: "toy".into(),
            seed: 0,
        }
    }

    #[test]
    fn encode_exact_centroid_hit() {
        let cb = toy_codebook();
        let patch = vec![70.0f32, 0.0, 0.0, 0.0];
        let grid = grid_from(vec![patch], 4);
        let tokens = encode(&grid, &cb).unwrap();
        assert_eq!(tokens.tokens, vec![7]);
    }

    #[test]
    fn encode_tie_breaks_to_lowest_index() {
        // Centroids 2 and 5 sit symmetrically around the patch; the rest are
        // far away. The tie must resolve to index 2.
        let dim = 4;
        let mut centroids = vec![100.0; 8 * dim];
        centroids[2 * dim] = 1.0;
        centroids[2 * dim + 1] = 0.0;
        centroids[2 * dim + 2] = 0.0;
        centroids[2 * dim + 3] = 0.0;
        centroids[5 * dim] = -1.0;
        centroids[5 * dim + 1] = 0.0;
        centroids[5 * dim + 2] = 0.0;
        centroids[5 * dim + 3] = 0.0;
        let cb = Codebook {
            vocab_size: 8,
            patch_dim: dim,
            centroids,
            trained_on: "tie".into(),
            seed: 0,
        };
        let grid = grid_from(vec![vec![0.0; dim]], dim);
        let tokens = encode(&grid, &cb).unwrap();
        assert_eq!(tokens.tokens, vec![2]);
    }

    #[test]
    fn encode_matches_exhaustive_oracle() {
        let mut rng = crate::util::rng_from(17);
        let dim = 16;
        let pts: Vec<f64> = (0..200 * dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let (cb, _) = train_codebook(&pts, dim, 12, 5, 20, "o").unwrap();
        let patches: Vec<Vec<f32>> = (0..64)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0f32)).collect())
            .collect();
        let grid = grid_from(patches.clone(), dim);
        let got = encode(&grid, &cb).unwrap();

        // Independent exhaustive scan with naive sequential accumulation.
        for (pi, patch) in patches.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::MAX;
            for c in 0..cb.vocab_size {
                let mut d = 0.0f64;
                for (j, &p) in patch.iter().enumerate() {
                    let diff = p as f64 - cb.centroid(c)[j];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(got.tokens[pi], best as u32, "patch {pi}");
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let mut rng = crate::util::rng_from(23);
        let dim = 4;
        let cb = toy_codebook();
        let patches: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..80.0f32)).collect())
            .collect();
        let grid = grid_from(patches.clone(), dim);
        let base = encode(&grid, &cb).unwrap();

        let perm: Vec<usize> = (0..20).rev().collect();
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| patches[i].clone()).collect();
        let grid_p = grid_from(permuted, dim);
        let got = encode(&grid_p, &cb).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(got.tokens[j], base.tokens[i]);
        }
    }

    #[test]
    fn encode_ignores_duplicate_centroid_beyond_tie_index() {
        let cb = toy_codebook();
        let mut extended = cb.clone();
        extended.vocab_size += 1;
        extended.centroids.extend_from_slice(cb.centroid(2));
        let grid = grid_from(vec![vec![19.0, 0.0, 0.0, 0.0]], 4);
        assert_eq!(encode(&grid, &cb).unwrap().tokens, vec![2]);
        assert_eq!(encode(&grid, &extended).unwrap().tokens, vec![2]);
    }

    #[test]
    fn encode_rejects_dimension_mismatch() {
        let cb = toy_codebook();
        let grid = grid_from(vec![vec![0.0; 9]], 9);
        assert!(matches!(
            encode(&grid, &cb),
            Err(TokenizerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn codebook_file_round_trip_is_byte_identical() {
        let mut rng = crate::util::rng_from(2);
        let pts: Vec<f64> = (0..300 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let (cb, _) = train_codebook(&pts, 4, 8, 1, 20, "rt").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.hbcb");
        let hash = [3u8; 32];
        save_codebook(&cb, &path, &hash).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let (h, loaded) = load_codebook(&path).unwrap();
        assert_eq!(h, hash);
        save_codebook(&loaded, &path, &hash).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn sample_patches_is_deterministic_and_bounded() {
        let images: Vec<RasterImage> = (0..3)
            .map(|i| {
                let mut img = RasterImage::blank(32, 32, &format!("r{i}"));
                img.pixels[i] = 0.0;
                img
            })
            .collect();
        let (a, n_a) = sample_patches(&images, 16, 7, 42).unwrap();
        let (b, n_b) = sample_patches(&images, 16, 7, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(n_a, 7);
        assert_eq!(n_b, 7);
        let (all, n_all) = sample_patches(&images, 16, 1000, 42).unwrap();
        assert_eq!(n_all, 12);
        assert_eq!(all.len(), 12 * 256);
    }
}
