use std::io::{Read, Write};

use rayon::prelude::*;

use super::kmeans::{fit_flat, nearest_centroid};
use super::squared_l2;
use crate::corpus::EmbeddingMatrix;
use crate::error::{Error, Result};

const TRAIN_ITERS: usize = 25;

/// Product-quantization codebooks: `m` sub-quantizers of `2^nbits` centroids
/// over consecutive `dim / m` chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    m: usize,
    nbits: u32,
    dim: usize,
    sub_centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nbits(&self) -> u32 {
        self.nbits
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    /// Centroids per sub-quantizer.
    pub fn ksub(&self) -> usize {
        1 << self.nbits
    }

    pub fn sub_centroid(&self, chunk: usize, code: usize) -> &[f32] {
        let sd = self.sub_dim();
        let start = (chunk * self.ksub() + code) * sd;
        &self.sub_centroids[start..start + sd]
    }

    fn chunk_table(&self, chunk: usize) -> &[f32] {
        let len = self.ksub() * self.sub_dim();
        &self.sub_centroids[chunk * len..(chunk + 1) * len]
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    fn check_codes(&self, codes: &[u16]) -> Result<()> {
        if codes.len() != self.m {
            return Err(Error::InvalidArgument(format!("expected {} codes, got {}", self.m, codes.len())));
        }
        if let Some(c) = codes.iter().find(|&&c| c as usize >= self.ksub()) {
            return Err(Error::InvalidArgument(format!("code {c} out of range 0..{}", self.ksub())));
        }
        Ok(())
    }

    /// Per-chunk nearest sub-centroid; ties go to the lowest code.
    pub fn encode(&self, v: &[f32]) -> Result<Vec<u16>> {
        self.check_dim(v)?;
        Ok(self.encode_unchecked(v))
    }

    pub(crate) fn encode_unchecked(&self, v: &[f32]) -> Vec<u16> {
        let sd = self.sub_dim();
        v.chunks_exact(sd)
            .enumerate()
            .map(|(j, chunk)| nearest_centroid(self.chunk_table(j), sd, chunk).0 as u16)
            .collect()
    }

    pub fn decode(&self, codes: &[u16]) -> Result<Vec<f32>> {
        self.check_codes(codes)?;
        let mut out = Vec::with_capacity(self.dim);
        for (j, &c) in codes.iter().enumerate() {
            out.extend_from_slice(self.sub_centroid(j, c as usize));
        }
        Ok(out)
    }

    /// Squared distances from each query chunk to every sub-centroid.
    pub fn adc_table(&self, query: &[f32]) -> Result<AdcTable> {
        self.check_dim(query)?;
        let sd = self.sub_dim();
        let ksub = self.ksub();
        let mut table = Vec::with_capacity(self.m * ksub);
        for (j, q) in query.chunks_exact(sd).enumerate() {
            table.extend(self.chunk_table(j).chunks_exact(sd).map(|c| squared_l2(q, c)));
        }
        Ok(AdcTable { ksub, table })
    }

    /// Header (`m`, `nbits`, `dim` as little-endian `u32`) followed by the
    /// sub-centroids as little-endian `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in [self.m as u32, self.nbits, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.sub_centroids {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let m = read_u32(r)? as usize;
        let nbits = read_u32(r)?;
        let dim = read_u32(r)? as usize;
        if m == 0 || dim % m != 0 || !(1..=16).contains(&nbits) {
            return Err(Error::Data(format!("bad codebook header m={m} nbits={nbits} dim={dim}")));
        }
        let len = (1usize << nbits) * dim;
        let sub_centroids = read_f32s(r, len)?;
        Ok(PqCodebook {
            m,
            nbits,
            dim,
            sub_centroids,
        })
    }
}

/// Query-specific lookup table for asymmetric distance computation.
#[derive(Clone, Debug)]
pub struct AdcTable {
    ksub: usize,
    table: Vec<f32>,
}

impl AdcTable {
    pub fn squared_distance(&self, codes: &[u16]) -> f32 {
        codes
            .iter()
            .enumerate()
            .map(|(j, &c)| self.table[j * self.ksub + c as usize])
            .sum()
    }

    pub fn distance(&self, codes: &[u16]) -> f32 {
        self.squared_distance(codes).sqrt()
    }
}

/// Trains one k-means codebook per chunk. Chunk `j` uses seed `seed + j`.
pub fn pq_train(x: &EmbeddingMatrix, m: usize, nbits: u32, seed: u64) -> Result<PqCodebook> {
    let dim = x.dim();
    if m == 0 || dim % m != 0 {
        return Err(Error::InvalidArgument(format!("dim {dim} is not divisible by m = {m}")));
    }
    if !(1..=16).contains(&nbits) {
        return Err(Error::InvalidArgument(format!("nbits = {nbits} must be in 1..=16")));
    }
    let ksub = 1usize << nbits;
    if x.len() < ksub {
        return Err(Error::InvalidArgument(format!(
            "{} training points cannot fill {ksub} sub-centroids",
            x.len()
        )));
    }
    let sd = dim / m;
    let tables: Vec<Result<Vec<f32>>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let chunk: Vec<f32> = x.rows().flat_map(|r| r[j * sd..(j + 1) * sd].iter().copied()).collect();
            let model = fit_flat(&chunk, sd, ksub, TRAIN_ITERS, seed.wrapping_add(j as u64))?;
            Ok(model.centroids().to_vec())
        })
        .collect();
    let mut sub_centroids = Vec::with_capacity(m * ksub * sd);
    for t in tables {
        sub_centroids.extend(t?);
    }
    Ok(PqCodebook {
        m,
        nbits,
        dim,
        sub_centroids,
    })
}

pub fn pq_encode(codebook: &PqCodebook, v: &[f32]) -> Result<Vec<u16>> {
    codebook.encode(v)
}

pub fn pq_decode(codebook: &PqCodebook, codes: &[u16]) -> Result<Vec<f32>> {
    codebook.decode(codes)
}

/// `‖query − decode(codes)‖` via per-chunk lookup tables.
pub fn adc_distance(query: &[f32], codes: &[u16], codebook: &PqCodebook) -> Result<f32> {
    codebook.check_codes(codes)?;
    Ok(codebook.adc_table(query)?.distance(codes))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Data(format!("truncated input: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::Data(format!("truncated input: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
