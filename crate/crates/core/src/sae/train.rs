use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use super::{SaeConfig, SaeModel};
use crate::capture::ActivationDataset;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, SeedTree, Tensor};

// Rows per parallel work unit. Fixed so sums do not depend on thread count.
const CHUNK_ROWS: usize = 128;

/// In-memory activation rows, `len × d`, grouped into instances of `group`
/// consecutive rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    d: usize,
    group: usize,
    rows: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(d: usize, group: usize, rows: Vec<f32>) -> Result<Self> {
        if d == 0 || group == 0 || rows.len() % (d * group) != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not form whole groups of {group} rows × d = {d}",
                rows.len()
            )));
        }
        Ok(ActivationMatrix { d, group, rows })
    }

    pub fn from_dataset(ds: &mut ActivationDataset) -> Result<Self> {
        let (d, group) = (ds.d_model(), ds.header().nodes_per_instance as usize);
        ActivationMatrix::new(d, group, ds.read_all()?)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    fn rows_f64(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        self.rows[range.start * self.d..range.end * self.d].iter().map(|&v| f64::from(v)).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for row in self.rows.chunks_exact(self.d) {
            m.iter_mut().zip(row).for_each(|(a, &v)| *a += f64::from(v));
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Splits off the last `fraction` of instances (at least one, at least
    /// one kept) as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> Result<(ActivationMatrix, ActivationMatrix)> {
        let groups = self.len() / self.group;
        if groups < 2 {
            return Err(Error::Parameter("need at least two instances to hold one out".into()));
        }
        let held = ((groups as f64 * fraction).round() as usize).clamp(1, groups - 1);
        let cut = (groups - held) * self.group * self.d;
        let make = |rows: &[f32]| ActivationMatrix { d: self.d, group: self.group, rows: rows.to_vec() };
        Ok((make(&self.rows[..cut]), make(&self.rows[cut..])))
    }
}

/// Held-out quality of an SAE.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaeMetrics {
    pub step: u64,
    /// Training loss of the last batch (0 before training).
    pub loss: f64,
    /// `1 − explained variance` on the evaluation rows.
    pub nmse: f64,
    pub mean_l0: f64,
    pub max_l0: usize,
    pub mean_l1: f64,
    /// Features that never fired on the evaluation rows.
    pub dead_features: usize,
}

#[derive(Default)]
struct EvalAcc {
    sq_err: f64,
    l0: usize,
    max_l0: usize,
    l1: f64,
    fired: Vec<u64>,
}

/// Metrics and per-feature firing frequencies on `data`.
pub fn evaluate(model: &SaeModel, data: &ActivationMatrix) -> Result<(SaeMetrics, Vec<f64>)> {
    if data.d() != model.d() {
        return Err(Error::Format(format!("activations have d = {}, SAE expects {}", data.d(), model.d())));
    }
    if data.is_empty() {
        return Err(Error::Parameter("no evaluation rows".into()));
    }
    let n = model.latent();
    let mean = data.mean();
    let chunks: Vec<EvalAcc> = (0..data.len().div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(data.len());
            let mut acc = EvalAcc { fired: vec![0; n], ..EvalAcc::default() };
            for x in data.rows_f64(range).chunks_exact(data.d()) {
                let code = model.encode_sparse(x)?;
                let xhat = model.decode_entries(&code.entries);
                acc.sq_err += xhat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                acc.l0 += code.l0();
                acc.max_l0 = acc.max_l0.max(code.l0());
                acc.l1 += code.l1();
                for &(i, _) in &code.entries {
                    acc.fired[i] += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = EvalAcc { fired: vec![0; n], ..EvalAcc::default() };
    for c in chunks {
        total.sq_err += c.sq_err;
        total.l0 += c.l0;
        total.max_l0 = total.max_l0.max(c.max_l0);
        total.l1 += c.l1;
        total.fired.iter_mut().zip(&c.fired).for_each(|(a, b)| *a += b);
    }
    let mut var = 0.0;
    for i in 0..data.len() {
        var += data.row(i).iter().zip(&mean).map(|(&v, m)| (f64::from(v) - m).powi(2)).sum::<f64>();
    }
    let rows = data.len() as f64;
    let freq: Vec<f64> = total.fired.iter().map(|&f| f as f64 / rows).collect();
    let metrics = SaeMetrics {
        step: 0,
        loss: 0.0,
        nmse: if var > 0.0 { total.sq_err / var } else { total.sq_err },
        mean_l0: total.l0 as f64 / rows,
        max_l0: total.max_l0,
        mean_l1: total.l1 / rows,
        dead_features: total.fired.iter().filter(|&&f| f == 0).count(),
    };
    Ok((metrics, freq))
}

#[derive(Clone, Debug)]
pub struct TrainedSae {
    pub model: SaeModel,
    /// Evaluation records, one per `eval_every` steps plus the final step.
    pub history: Vec<SaeMetrics>,
    /// Firing frequency of each feature on the held-out rows.
    pub firing_frequency: Vec<f64>,
}

impl TrainedSae {
    pub fn final_metrics(&self) -> &SaeMetrics {
        self.history.last().expect("at least the final record")
    }
}

/// Summary written next to a trained SAE.
#[derive(Clone, Debug, Serialize)]
pub struct SaeReport {
    pub config: SaeConfig,
    pub k: usize,
    pub latent: usize,
    pub metrics: SaeMetrics,
}

/// Adam training with decoder rows renormalised after every step. The last
/// `holdout_fraction` of instances is held out for the metrics.
pub fn train_sae(
    config: &SaeConfig,
    data: &ActivationMatrix,
    on_metrics: &mut dyn FnMut(&SaeMetrics),
) -> Result<TrainedSae> {
    config.validate()?;
    if data.d() != config.d {
        return Err(Error::Format(format!("activations have d = {}, SAE config expects {}", data.d(), config.d)));
    }
    let (train, held) = data.split_holdout(config.holdout_fraction)?;
    let mut model = SaeModel::init(config, &train.mean())?;
    let mut adam = {
        let ps: Vec<Tensor> = model.params().iter().map(|t| (*t).clone()).collect();
        AdamState::new(config.adam, &ps)
    };
    let batch_seeds = SeedTree::new(config.seed).named("sae-batch");
    let mut history = Vec::new();
    let mut firing = Vec::new();
    let b = config.batch_size;
    for step in 1..=config.steps {
        let mut rng = batch_seeds.child(step).rng();
        let mut batch = Vec::with_capacity(b * config.d);
        for _ in 0..b {
            let i = rng.random_range(0..train.len());
            batch.extend(train.row(i).iter().map(|&v| f64::from(v)));
        }
        let parts: Vec<(f64, [Vec<f64>; 4], usize)> = batch
            .par_chunks(CHUNK_ROWS * config.d)
            .map(|chunk| {
                let (loss, grads) = model.loss_and_grad(chunk, true)?;
                Ok((loss, grads.expect("requested"), chunk.len() / config.d))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (l, g, rows) in parts {
            let w = rows as f64 / b as f64;
            loss += w * l;
            for (acc, part) in grads.iter_mut().zip(g) {
                acc.data_mut().iter_mut().zip(part).for_each(|(a, v)| *a += w * v);
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite SAE loss {loss} at step {step}")));
        }
        let mut ps = take_params(&mut model);
        adam.update(&mut ps, &grads)?;
        put_params(&mut model, ps);
        model.normalize_decoder();

        if step % config.eval_every == 0 || step == config.steps {
            let (mut m, f) = evaluate(&model, &held)?;
            m.step = step;
            m.loss = loss;
            on_metrics(&m);
            history.push(m);
            firing = f;
        }
    }
    if history.is_empty() {
        let (m, f) = evaluate(&model, &held)?;
        on_metrics(&m);
        history.push(m);
        firing = f;
    }
    Ok(TrainedSae { model, history, firing_frequency: firing })
}

fn take_params(m: &mut SaeModel) -> Vec<Tensor> {
    let empty = || Tensor::zeros(&[0]);
    vec![
        std::mem::replace(&mut m.w_enc, empty()),
        std::mem::replace(&mut m.b_enc, empty()),
        std::mem::replace(&mut m.w_dec, empty()),
        std::mem::replace(&mut m.b_dec, empty()),
    ]
}

fn put_params(m: &mut SaeModel, ps: Vec<Tensor>) {
    let [w_enc, b_enc, w_dec, b_dec]: [Tensor; 4] = ps.try_into().expect("four SAE tensors");
    m.w_enc = w_enc;
    m.b_enc = b_enc;
    m.w_dec = w_dec;
    m.b_dec = b_dec;
}

/// Hyperparameter axes; every combination is trained.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub expansions: Vec<usize>,
    pub k_ratios: Vec<f64>,
    pub l1: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { expansions: vec![1, 4, 16], k_ratios: vec![0.01, 0.1], l1: vec![1e-4, 1e-3, 1e-2, 1e-1] }
    }
}

impl GridSpec {
    pub fn configs(&self, base: &SaeConfig) -> Vec<SaeConfig> {
        let mut out = Vec::new();
        for &expansion in &self.expansions {
            for &k_ratio in &self.k_ratios {
                for &l1 in &self.l1 {
                    out.push(SaeConfig { expansion, k_ratio, l1, ..base.clone() });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub expansion: usize,
    pub k_ratio: f64,
    pub l1: f64,
    pub k: usize,
    pub latent: usize,
    pub nmse: Option<f64>,
    pub mean_l0: Option<f64>,
    pub mean_l1: Option<f64>,
    pub dead_features: Option<usize>,
    pub model_path: Option<PathBuf>,
    pub error: Option<String>,
}

/// Trains one SAE per grid point. A failing point is recorded in its row
/// and the search continues. Rows are sorted by `k_ratio`, then by
/// reconstruction error. With `out_dir`, models plus `grid.csv` and
/// `grid.json` are written there.
pub fn grid_search(
    base: &SaeConfig,
    grid: &GridSpec,
    data: &ActivationMatrix,
    out_dir: Option<&Path>,
    on_row: &mut dyn FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::Config("empty SAE grid".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut row = GridRow {
            expansion: cfg.expansion,
            k_ratio: cfg.k_ratio,
            l1: cfg.l1,
            k: cfg.k(),
            latent: cfg.latent(),
            nmse: None,
            mean_l0: None,
            mean_l1: None,
            dead_features: None,
            model_path: None,
            error: None,
        };
        let outcome = train_sae(&cfg, data, &mut |_| {}).and_then(|t| {
            let path = match out_dir {
                Some(dir) => {
                    let p = dir.join(format!("sae_e{}_k{}_l{}.sae", cfg.expansion, cfg.k_ratio, cfg.l1));
                    t.model.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            Ok((t, path))
        });
        match outcome {
            Ok((t, path)) => {
                let m = t.final_metrics();
                row.nmse = Some(m.nmse);
                row.mean_l0 = Some(m.mean_l0);
                row.mean_l1 = Some(m.mean_l1);
                row.dead_features = Some(m.dead_features);
                row.model_path = path;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        on_row(&row);
        rows.push(row);
    }
    rows.sort_by(|a, b| {
        a.k_ratio
            .total_cmp(&b.k_ratio)
            .then(a.nmse.unwrap_or(f64::INFINITY).total_cmp(&b.nmse.unwrap_or(f64::INFINITY)))
            .then(a.expansion.cmp(&b.expansion))
            .then(a.l1.total_cmp(&b.l1))
    });
    if let Some(dir) = out_dir {
        write_table(dir, &rows)?;
    }
    Ok(rows)
}

fn write_table(dir: &Path, rows: &[GridRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("expansion,k_ratio,l1,k,latent,nmse,mean_l0,mean_l1,dead_features,model_path,error\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.expansion,
            r.k_ratio,
            r.l1,
            r.k,
            r.latent,
            opt(r.nmse),
            opt(r.mean_l0),
            opt(r.mean_l1),
            r.dead_features.map(|v| v.to_string()).unwrap_or_default(),
            r.model_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ));
    }
    let csv_path = dir.join("grid.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("grid.json");
    let mut f = std::fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::to_writer_pretty(&mut f, rows).map_err(|e| Error::json(&json_path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(&json_path, e))
}
