//! Top-k sparse autoencoder over encoder activations.
//!
//! ```text
//! z        = x·W_encᵀ + b
//! z_sparse = topk(z)
//! x̂        = z_sparse·W_dec + b_dec
//! loss     = mean ‖x − x̂‖² + λ·‖z_sparse‖₁
//! ```
//!
//! Two top-k variants are available. [`TopkMode::Shifted`] is
//! `max(0, z − τ)` with `τ` the k-th largest entry of `z`: the k-th entry
//! itself maps to zero and the survivors are shifted down by `τ`.
//! [`TopkMode::Masked`] keeps the k largest entries unchanged where positive.
//!
//! Gradients are computed by hand on the selected support. In shifted mode the
//! threshold entry receives minus the sum of the survivors' gradients, which
//! is the exact derivative of `max(0, z − τ)` for a fixed ordering.

mod train;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Container, SeedTree, Tensor};

pub use train::{
    evaluate, grid_search, train_sae, ActivationMatrix, GridRow, GridSpec, SaeMetrics, SaeReport, TrainedSae,
};

pub const CHECKPOINT_KIND: &str = "tsp-sae";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopkMode {
    #[default]
    Shifted,
    Masked,
}

impl TopkMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TopkMode::Shifted => "shifted",
            TopkMode::Masked => "masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    /// Input width; must equal the policy's `d_model`.
    pub d: usize,
    /// Latent width is `expansion · d`.
    pub expansion: usize,
    /// `k = max(1, round(k_ratio · latent))`.
    pub k_ratio: f64,
    /// ℓ1 coefficient on `z_sparse`.
    pub l1: f64,
    pub topk: TopkMode,
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of instances held out for evaluation (taken from the end).
    pub holdout_fraction: f64,
    pub eval_every: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            d: 128,
            expansion: 4,
            k_ratio: 0.1,
            l1: 1e-3,
            topk: TopkMode::Shifted,
            batch_size: 1024,
            steps: 3000,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            seed: 0,
            holdout_fraction: 0.1,
            eval_every: 500,
        }
    }
}

impl SaeConfig {
    pub fn latent(&self) -> usize {
        self.expansion * self.d
    }

    pub fn k(&self) -> usize {
        ((self.k_ratio * self.latent() as f64).round() as usize).clamp(1, self.latent().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.expansion == 0 {
            return Err(Error::Config("SAE needs d >= 1 and expansion >= 1".into()));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::Config(format!("k_ratio must lie in (0, 1], got {}", self.k_ratio)));
        }
        if !(self.l1 >= 0.0) || !self.l1.is_finite() {
            return Err(Error::Config(format!("l1 must be a finite non-negative number, got {}", self.l1)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Non-zero entries of a sparsified latent plus the threshold position.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode {
    /// `(feature, value)` with `value > 0`, ascending by feature.
    pub entries: Vec<(usize, f64)>,
    /// Index of the k-th largest entry (the threshold in shifted mode).
    pub tau_index: usize,
}

impl SparseCode {
    pub fn l0(&self) -> usize {
        self.entries.len()
    }

    pub fn l1(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

/// Descending by value, ties to the lower index.
fn rank_order(z: &[f64], a: usize, b: usize) -> Ordering {
    z[b].total_cmp(&z[a]).then(a.cmp(&b))
}

pub fn topk_code(z: &[f64], k: usize, mode: TopkMode) -> Result<SparseCode> {
    let n = z.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} outside 1..={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(z, a, b));
    let tau_index = idx[k - 1];
    let mut entries: Vec<(usize, f64)> = match mode {
        TopkMode::Shifted => {
            let tau = z[tau_index];
            z.iter().enumerate().filter(|&(_, &v)| v > tau).map(|(i, &v)| (i, v - tau)).collect()
        }
        TopkMode::Masked => idx[..k].iter().filter(|&&i| z[i] > 0.0).map(|&i| (i, z[i])).collect(),
    };
    entries.sort_unstable_by_key(|e| e.0);
    Ok(SparseCode { entries, tau_index })
}

/// Dense top-k: at most `k` non-zeros, all non-negative.
pub fn topk_sparsify(z: &[f64], k: usize, mode: TopkMode) -> Result<Vec<f64>> {
    Ok(topk_code(z, k, mode)?.to_dense(z.len()))
}

/// Autoencoder parameters. Encoder and decoder are both stored `latent × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    pub config: SaeConfig,
    pub w_enc: Tensor,
    pub b_enc: Tensor,
    pub w_dec: Tensor,
    pub b_dec: Tensor,
}

impl SaeModel {
    /// Unit-norm random decoder rows, encoder tied to the decoder at init,
    /// zero encoder bias and `b_dec = mean`.
    pub fn init(config: &SaeConfig, mean: &[f64]) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.d, config.latent());
        if mean.len() != d {
            return Err(Error::Dimension(format!("mean has {} entries, d = {d}", mean.len())));
        }
        let mut w_dec = Tensor::randn(&[n, d], 1.0, &mut SeedTree::new(config.seed).named("sae-init").rng());
        normalize_rows(&mut w_dec);
        Ok(SaeModel {
            config: config.clone(),
            w_enc: w_dec.clone(),
            b_enc: Tensor::zeros(&[n]),
            w_dec,
            b_dec: Tensor::new(vec![d], mean.to_vec())?,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn latent(&self) -> usize {
        self.config.latent()
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::Dimension(format!("input has {} entries, SAE expects {}", x.len(), self.d())));
        }
        Ok(())
    }

    /// Dense pre-activation `z = x·W_encᵀ + b`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let d = self.d();
        Ok(self
            .w_enc
            .data()
            .chunks_exact(d)
            .zip(self.b_enc.data())
            .map(|(row, b)| crate::numerics::tensor::dot(row, x) + b)
            .collect())
    }

    /// Sparse code of `x` under the configured top-k.
    pub fn encode_sparse(&self, x: &[f64]) -> Result<SparseCode> {
        topk_code(&self.encode(x)?, self.k(), self.config.topk)
    }

    /// `x̂ = z_sparse·W_dec + b_dec`.
    pub fn decode(&self, z_sparse: &[f64]) -> Result<Vec<f64>> {
        if z_sparse.len() != self.latent() {
            return Err(Error::Dimension(format!(
                "latent has {} entries, SAE expects {}",
                z_sparse.len(),
                self.latent()
            )));
        }
        let entries: Vec<(usize, f64)> =
            z_sparse.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)).collect();
        Ok(self.decode_entries(&entries))
    }

    pub(crate) fn decode_entries(&self, entries: &[(usize, f64)]) -> Vec<f64> {
        let d = self.d();
        let mut out = self.b_dec.data().to_vec();
        for &(i, v) in entries {
            for (o, w) in out.iter_mut().zip(&self.w_dec.data()[i * d..(i + 1) * d]) {
                *o += v * w;
            }
        }
        out
    }

    /// `mean ‖x − x̂‖² + λ·‖z_sparse‖₁` over the rows of `batch` (`rows × d`).
    pub fn loss(&self, batch: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(batch, false)?.0)
    }

    /// Loss and, if requested, gradients in [`SaeModel::params`] order.
    pub(crate) fn loss_and_grad(&self, batch: &[f64], with_grad: bool) -> Result<(f64, Option<[Vec<f64>; 4]>)> {
        let d = self.d();
        if batch.is_empty() || batch.len() % d != 0 {
            return Err(Error::Dimension(format!("batch of {} values is not a multiple of d = {d}", batch.len())));
        }
        let rows = batch.len() / d;
        let inv = 1.0 / rows as f64;
        let lambda = self.config.l1;
        let n = self.latent();
        let mut grads = with_grad.then(|| [vec![0.0; n * d], vec![0.0; n], vec![0.0; n * d], vec![0.0; d]]);
        let mut total = 0.0;
        let mut dz: Vec<(usize, f64)> = Vec::new();
        for x in batch.chunks_exact(d) {
            let code = self.encode_sparse(x)?;
            let xhat = self.decode_entries(&code.entries);
            let r: Vec<f64> = xhat.iter().zip(x).map(|(a, b)| a - b).collect();
            total += r.iter().map(|v| v * v).sum::<f64>() + lambda * code.l1();
            let Some([g_enc, g_b, g_dec, g_bdec]) = grads.as_mut() else { continue };
            // dL/dx̂ = 2r / rows
            let gr: Vec<f64> = r.iter().map(|v| 2.0 * v * inv).collect();
            g_bdec.iter_mut().zip(&gr).for_each(|(g, v)| *g += v);
            dz.clear();
            let mut tau_grad = 0.0;
            for &(i, v) in &code.entries {
                let row = &self.w_dec.data()[i * d..(i + 1) * d];
                for (g, r) in g_dec[i * d..(i + 1) * d].iter_mut().zip(&gr) {
                    *g += v * r;
                }
                let g = crate::numerics::tensor::dot(row, &gr) + lambda * inv;
                dz.push((i, g));
                tau_grad -= g;
            }
            if self.config.topk == TopkMode::Shifted && !code.entries.is_empty() {
                dz.push((code.tau_index, tau_grad));
            }
            for &(i, g) in &dz {
                g_b[i] += g;
                for (w, xv) in g_enc[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *w += g * xv;
                }
            }
        }
        Ok((total * inv, grads))
    }

    /// Rescales every decoder row to unit length.
    pub fn normalize_decoder(&mut self) {
        normalize_rows(&mut self.w_dec);
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "config": self.config, "k": self.k(), "latent": self.latent() });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        for (name, t) in ["w_enc", "b_enc", "w_dec", "b_dec"].into_iter().zip(self.params()) {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &mut Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", c.kind)));
        }
        let config: SaeConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("SAE config in checkpoint: {e}")))?;
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let (d, n) = (config.d, config.latent());
        let model = SaeModel {
            w_enc: c.take("w_enc", &[n, d])?,
            b_enc: c.take("b_enc", &[n])?,
            w_dec: c.take("w_dec", &[n, d])?,
            b_dec: c.take("b_dec", &[d])?,
            config,
        };
        if !model.is_finite() {
            return Err(Error::Format("SAE checkpoint contains non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SaeModel::from_container(&mut Container::load(path)?)
    }
}

fn normalize_rows(t: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

#[cfg(test)]
mod tests;
