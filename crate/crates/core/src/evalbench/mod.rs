//! Metrics and efficiency measurement: PSNR, token accuracy, a Gaussian
//! Fréchet distance on flattened latents, throughput and memory.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{HwmError, Result};
use crate::flow_hwm::{euler_sample, FlowNet, FlowObjective, FlowRunner};
use crate::latentworld::{gen_episode, TokenGrid, WorldConfig};
use crate::masked_hwm::{decode_batch, DecodeJob, MaskedNet, MaskedRunner};
use crate::numcore::ParamStore;
use crate::rng;

pub const PSNR_CAP: f64 = 100.0;

/// Covariance shrinkage toward the diagonal used by [`frechet_proxy`].
pub const FRECHET_SHRINKAGE: f64 = 0.1;

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f64], truth: &[f64], peak: f64) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(HwmError::dim("psnr", format!("{} vs {} values", pred.len(), truth.len())));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(HwmError::Config(format!("psnr peak {peak} must be positive")));
    }
    let mse = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Max minus min of a reference set, the peak used for latent PSNR.
pub fn data_range(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Fraction of equal ids.
pub fn token_accuracy(pred: &TokenGrid, truth: &TokenGrid) -> Result<f64> {
    if pred.frames != truth.frames || pred.grid != truth.grid || pred.tokens.len() != truth.tokens.len() {
        return Err(HwmError::dim(
            "token_accuracy",
            format!("{}x{}² vs {}x{}²", pred.frames, pred.grid, truth.frames, truth.grid),
        ));
    }
    if truth.tokens.is_empty() {
        return Err(HwmError::dim("token_accuracy", "empty grids"));
    }
    let same = pred.tokens.iter().zip(&truth.tokens).filter(|(a, b)| a == b).count();
    Ok(same as f64 / truth.tokens.len() as f64)
}

/// Mean accuracy over several clips, weighting every token equally.
pub fn mean_token_accuracy(pairs: &[(TokenGrid, TokenGrid)]) -> Result<f64> {
    let (mut same, mut total) = (0.0, 0usize);
    for (p, t) in pairs {
        same += token_accuracy(p, t)? * t.tokens.len() as f64;
        total += t.tokens.len();
    }
    if total == 0 {
        return Err(HwmError::dim("token_accuracy", "no clips"));
    }
    Ok(same / total as f64)
}

/// Mean and covariance of a sample set, off-diagonals scaled by `1 - shrink`.
pub fn gaussian_fit(samples: &[Vec<f64>], shrink: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(HwmError::dim("frechet", "need at least two samples per set"));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(HwmError::dim("frechet", "samples must share a positive dimension"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                cov[(i, j)] *= 1.0 - shrink;
            }
        }
    }
    Ok((mu, cov))
}

/// Fréchet distance between two Gaussians.
pub fn frechet_gaussian(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(HwmError::dim("frechet", "mean and covariance shapes disagree"));
    }
    // tr (A B)^1/2 = tr (A^1/2 B A^1/2)^1/2, and the inner matrix is symmetric.
    let root_a = psd_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fits Gaussians to two sets of flattened latents and returns their
/// Fréchet distance.
pub fn frechet_proxy(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(set_a, FRECHET_SHRINKAGE)?;
    let (mu_b, cov_b) = gaussian_fit(set_b, FRECHET_SHRINKAGE)?;
    frechet_gaussian(&mu_a, &cov_a, &mu_b, &cov_b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup: 1, repetitions: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Median over repetitions.
    pub samples_per_second: f64,
    pub per_repetition: Vec<f64>,
    pub param_bytes: usize,
    pub peak_activation_bytes: usize,
}

impl BenchReport {
    pub fn peak_bytes(&self) -> usize {
        self.param_bytes + self.peak_activation_bytes
    }
}

/// Times `run`, which produces `samples` samples per call and returns the
/// peak activation bytes it saw. Warmup calls are not timed.
pub fn bench<F>(samples: usize, param_bytes: usize, opts: &BenchOptions, mut run: F) -> Result<BenchReport>
where
    F: FnMut() -> Result<usize>,
{
    if opts.repetitions == 0 || samples == 0 {
        return Err(HwmError::Config("bench needs at least one repetition and one sample".into()));
    }
    let mut peak = 0;
    for _ in 0..opts.warmup {
        peak = peak.max(run()?);
    }
    let mut rates = Vec::with_capacity(opts.repetitions);
    for _ in 0..opts.repetitions {
        let t0 = Instant::now();
        peak = peak.max(run()?);
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        rates.push(samples as f64 / secs);
    }
    Ok(BenchReport { samples_per_second: median(&rates), per_repetition: rates, param_bytes, peak_activation_bytes: peak })
}

/// Decoding throughput of a masked model: `batch` clips decoded in lockstep
/// per call.
pub fn bench_masked(
    net: &MaskedNet,
    world: &WorldConfig,
    store: &ParamStore<f32>,
    batch: usize,
    seed: u64,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let episodes = (0..batch as u64)
        .map(|i| gen_episode(rng::derive_seed(seed, "bench-episode", i), world))
        .collect::<Result<Vec<_>>>()?;
    let actions: Vec<_> = episodes.iter().map(|e| (e.past_latent_actions(world), e.future_latent_actions(world))).collect();
    let jobs: Vec<DecodeJob<'_>> = episodes
        .iter()
        .zip(&actions)
        .map(|(e, (ap, af))| DecodeJob { past: &e.past_tokens, past_actions: ap, future_actions: af })
        .collect();
    let runner = MaskedRunner::new(net, store)?;
    let mut call = 0;
    bench(batch, store.bytes(), opts, || {
        call += 1;
        decode_batch(&runner, &jobs, &net.cfg.decode, &mut rng::stream(seed, "bench-decode", call))?;
        Ok(runner.peak_activation_bytes())
    })
}

/// Sampling throughput of a flow model with its configured Euler steps and
/// guidance.
pub fn bench_flow(net: &FlowNet, store: &ParamStore<f32>, batch: usize, seed: u64, opts: &BenchOptions) -> Result<BenchReport> {
    let obj = FlowObjective::new(net.clone())?;
    let conds = (0..batch as u64)
        .map(|i| obj.episode(rng::derive_seed(seed, "bench-episode", i)).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = conds.iter().collect();
    let runner = FlowRunner::new(net, store)?;
    let shape = (net.future_frames(), net.world.channels, net.world.grid);
    let mut call = 0;
    bench(batch, store.bytes(), opts, || {
        call += 1;
        euler_sample(&runner, &refs, shape, net.cfg.sample_steps, &net.cfg.guidance, rng::derive_seed(seed, "bench-noise", call))?;
        Ok(runner.peak_activation_bytes())
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One evaluated model. `None` marks a metric that was skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub params_billions: Option<f64>,
    /// Four bytes per stored parameter.
    pub peak_param_bytes: Option<usize>,
    pub peak_activation_bytes: Option<usize>,
    pub samples_per_second: Option<f64>,
    pub frechet_proxy: Option<f64>,
    pub psnr_db: Option<f64>,
    pub token_accuracy: Option<f64>,
    /// Held-out conditional velocity error (flow only).
    pub velocity_mse: Option<f64>,
    /// Error of predicting zero velocity on the same draws.
    pub velocity_baseline: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reports as rows of an aligned table, one column per model.
pub struct ReportTable<'a>(pub &'a [EvalReport]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<String>| v.unwrap_or_else(|| "skipped".into());
        type Row = (&'static str, fn(&EvalReport) -> Option<String>);
        let rows: [Row; 9] = [
            ("Model Size (Billion)", |r| r.params_billions.map(|v| format!("{v:.4}"))),
            ("Parameter Memory (GB)", |r| r.peak_param_bytes.map(|v| format!("{:.4}", v as f64 / 1e9))),
            ("Peak Activations (MB)", |r| r.peak_activation_bytes.map(|v| format!("{:.2}", v as f64 / 1e6))),
            ("Samples per second", |r| r.samples_per_second.map(|v| format!("{v:.2}"))),
            ("Frechet proxy", |r| r.frechet_proxy.map(|v| format!("{v:.4}"))),
            ("PSNR (dB)", |r| r.psnr_db.map(|v| format!("{v:.2}"))),
            ("Token accuracy", |r| r.token_accuracy.map(|v| format!("{v:.4}"))),
            ("Velocity MSE", |r| r.velocity_mse.map(|v| format!("{v:.4}"))),
            ("Zero-velocity MSE", |r| r.velocity_baseline.map(|v| format!("{v:.4}"))),
        ];
        let head: Vec<String> = self.0.iter().map(|r| r.name.clone()).collect();
        let body: Vec<Vec<String>> = rows.iter().map(|(_, g)| self.0.iter().map(|r| cell(g(r))).collect()).collect();
        let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        let widths: Vec<usize> = (0..head.len())
            .map(|c| body.iter().map(|row| row[c].len()).chain([head[c].len()]).max().unwrap_or(0))
            .collect();
        write!(f, "{:label_w$}", "")?;
        for (h, w) in head.iter().zip(&widths) {
            write!(f, "  {h:>w$}")?;
        }
        writeln!(f)?;
        for ((label, _), row) in rows.iter().zip(&body) {
            write!(f, "{label:label_w$}")?;
            for (v, w) in row.iter().zip(&widths) {
                write!(f, "  {v:>w$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
