use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmin, sq_dist};

/// `levels x codes x dim` learnable code vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    levels: usize,
    codes: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Output of greedy residual quantization for one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub codes: Vec<u32>,
    /// Sum of the selected code vectors.
    pub quantized: Vec<f64>,
    /// `levels + 1` residuals; the first is the input itself.
    pub residuals: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn zeros(levels: usize, codes: usize, dim: usize) -> Result<Self> {
        if levels == 0 || codes < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "codebook needs levels >= 1, codes >= 2, dim >= 1 (got {levels}, {codes}, {dim})"
            )));
        }
        Ok(Self {
            levels,
            codes,
            dim,
            data: vec![0.0; levels * codes * dim],
        })
    }

    pub fn from_data(levels: usize, codes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let mut cb = Self::zeros(levels, codes, dim)?;
        if data.len() != cb.data.len() {
            return Err(Error::Schema(format!(
                "codebook {levels}x{codes}x{dim} needs {} values, got {}",
                cb.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema("codebook contains a non-finite value".into()));
        }
        cb.data = data;
        Ok(cb)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn offset(&self, level: usize, code: usize) -> usize {
        (level * self.codes + code) * self.dim
    }

    pub fn vector(&self, level: usize, code: usize) -> &[f64] {
        let off = self.offset(level, code);
        &self.data[off..off + self.dim]
    }

    pub fn vector_mut(&mut self, level: usize, code: usize) -> &mut [f64] {
        let off = self.offset(level, code);
        &mut self.data[off..off + self.dim]
    }

    /// All code vectors of one level, `codes x dim` row-major.
    pub fn level(&self, level: usize) -> &[f64] {
        let off = self.offset(level, 0);
        &self.data[off..off + self.codes * self.dim]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let off = self.offset(level, 0);
        let len = self.codes * self.dim;
        &mut self.data[off..off + len]
    }

    /// Nearest code at `level` in squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, level: usize, r: &[f64]) -> u32 {
        argmin((0..self.codes).map(|k| sq_dist(r, self.vector(level, k)))) as u32
    }

    /// Greedy coarse-to-fine residual quantization of a latent vector.
    pub fn quantize(&self, z: &[f64]) -> QuantizeResult {
        assert_eq!(z.len(), self.dim, "quantize: latent has wrong dimension");
        let mut codes = Vec::with_capacity(self.levels);
        let mut residuals = Vec::with_capacity(self.levels + 1);
        residuals.push(z.to_vec());
        for level in 0..self.levels {
            let r = residuals.last().unwrap();
            let c = self.nearest(level, r);
            let v = self.vector(level, c as usize);
            let next = r.iter().zip(v).map(|(a, b)| a - b).collect();
            codes.push(c);
            residuals.push(next);
        }
        let quantized = self.reconstruct(&codes);
        QuantizeResult {
            codes,
            quantized,
            residuals,
        }
    }

    /// Sum of the code vectors named by `codes`, one per level.
    pub fn reconstruct(&self, codes: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (level, &c) in codes.iter().enumerate() {
            out.iter_mut()
                .zip(self.vector(level, c as usize))
                .for_each(|(o, v)| *o += v);
        }
        out
    }
}

/// Codes, residuals and reconstructions for a batch of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchQuantization {
    pub n: usize,
    pub levels: usize,
    pub dim: usize,
    /// `n x levels` row-major.
    pub codes: Vec<u32>,
    /// `levels + 1` buffers of `n x dim`; the first is the input batch.
    pub residuals: Vec<Vec<f64>>,
    /// `n x dim` sums of the selected code vectors.
    pub quantized: Vec<f64>,
}

impl BatchQuantization {
    pub fn item_codes(&self, i: usize) -> &[u32] {
        &self.codes[i * self.levels..(i + 1) * self.levels]
    }

    pub fn residual(&self, level: usize, i: usize) -> &[f64] {
        &self.residuals[level][i * self.dim..(i + 1) * self.dim]
    }
}

impl Codebook {
    /// Greedy quantization of `n` row-major latents.
    pub fn quantize_batch(&self, z: &[f64], n: usize) -> BatchQuantization {
        self.quantize_batch_with(z, n, |cb, level, r| {
            Ok(r.chunks_exact(cb.dim).map(|row| cb.nearest(level, row)).collect())
        })
        .expect("greedy assignment is infallible")
    }

    /// Residual quantization where the final level is assigned by `last`, which
    /// receives the codebook, the level and the `n x dim` residual buffer.
    pub fn quantize_batch_with(
        &self,
        z: &[f64],
        n: usize,
        last: impl FnOnce(&Codebook, usize, &[f64]) -> Result<Vec<u32>>,
    ) -> Result<BatchQuantization> {
        assert_eq!(z.len(), n * self.dim, "quantize_batch: latent batch has wrong size");
        let mut codes = vec![0u32; n * self.levels];
        let mut residuals = Vec::with_capacity(self.levels + 1);
        residuals.push(z.to_vec());
        let mut last = Some(last);
        for level in 0..self.levels {
            let r = residuals.last().unwrap();
            let level_codes: Vec<u32> = if level + 1 == self.levels {
                (last.take().unwrap())(self, level, r)?
            } else {
                r.chunks_exact(self.dim).map(|row| self.nearest(level, row)).collect()
            };
            if level_codes.len() != n {
                return Err(Error::Schema(format!(
                    "last-level assignment returned {} codes for {n} items",
                    level_codes.len()
                )));
            }
            let mut next = r.clone();
            for (i, &c) in level_codes.iter().enumerate() {
                codes[i * self.levels + level] = c;
                let v = self.vector(level, c as usize);
                next[i * self.dim..(i + 1) * self.dim]
                    .iter_mut()
                    .zip(v)
                    .for_each(|(x, vk)| *x -= vk);
            }
            residuals.push(next);
        }
        let mut quantized = Vec::with_capacity(n * self.dim);
        for i in 0..n {
            quantized.extend(self.reconstruct(&codes[i * self.levels..(i + 1) * self.levels]));
        }
        Ok(BatchQuantization {
            n,
            levels: self.levels,
            dim: self.dim,
            codes,
            residuals,
            quantized,
        })
    }
}
