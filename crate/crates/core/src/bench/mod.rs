//! Scaling benchmark for the attention variants: counted FLOPs and accounted
//! peak bytes from one instrumented forward, wall time from repeated
//! uninstrumented forwards, and log-log slope fits over token counts.
//!
//! FLOP convention: a matmul costs `2·m·k·n`, softmax `5` per element,
//! scaling `1` per element, adaptive pooling one per input element plus one
//! per output element (per channel), a head mix `2·H²` per map entry. Layout
//! changes (split, merge, reshape) cost nothing.

use std::path::Path;
use std::time::Instant;

use crate::attention::{
    decomposed_forward, imhsa_forward, mhsa_forward, mhsa_interactive_forward, square_side, AttentionKind,
    AttnConfig, HeadMixWeights, QkvWeights, DEFAULT_LANDMARK_GRID,
};
use crate::data::{write_csv, Rng};
use crate::error::{Error, Result};
use crate::tensor::{Meter, Tensor};

/// Token counts of the default scaling grid: 14², 28², 56², 112².
pub const DEFAULT_TOKENS: [usize; 4] = [196, 784, 3136, 12544];

pub const BENCH_HEADER: [&str; 10] =
    ["method", "N", "H", "d", "L", "flops", "peak_bytes", "wall_ms_mean", "wall_ms_std", "reps"];

/// Benchmark settings. Defaults mirror a ViT-S attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub landmark_grid: (usize, usize),
    pub reps: usize,
    pub seed: u64,
    /// Largest N run for plain MHSA.
    pub mhsa_cap: usize,
    /// Largest N run for MHSA with interaction.
    pub mhsa_ix_cap: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            heads: 6,
            head_dim: 64,
            landmark_grid: DEFAULT_LANDMARK_GRID,
            reps: 5,
            seed: 0,
            mhsa_cap: 16384,
            mhsa_ix_cap: 4096,
        }
    }
}

impl BenchConfig {
    fn cap(&self, kind: AttentionKind) -> Option<usize> {
        match kind {
            AttentionKind::Mhsa => Some(self.mhsa_cap),
            AttentionKind::MhsaInteractive => Some(self.mhsa_ix_cap),
            _ => None,
        }
    }

    /// Attention shape at `n` tokens on a square grid.
    pub fn attn_config(&self, n: usize) -> Result<AttnConfig> {
        let side = square_side(n).ok_or_else(|| Error::invalid("bench", format!("N = {n} is not a perfect square")))?;
        AttnConfig::clamped(self.heads, self.head_dim, (side, side), self.landmark_grid)
    }
}

/// One benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: AttentionKind,
    pub n: usize,
    pub h: usize,
    pub d: usize,
    pub l: usize,
    pub flops: u64,
    pub peak_bytes: u64,
    /// Largest single tensor materialised during the forward.
    pub largest_alloc: u64,
    pub wall_ms_mean: f64,
    pub wall_ms_std: f64,
    pub wall_ms_median: f64,
    pub reps: usize,
}

/// Result of a scaling run; capped cells are listed, not measured.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchRun {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<(AttentionKind, usize)>,
}

/// Closed-form FLOPs of one forward of `kind` under the module convention.
pub fn closed_form_flops(kind: AttentionKind, cfg: &AttnConfig) -> u64 {
    let (n, l) = (cfg.num_tokens() as u64, cfg.num_landmarks() as u64);
    let (h, d, c) = (cfg.num_heads() as u64, cfg.head_dim() as u64, cfg.channels() as u64);
    let projections = 6 * n * c * c;
    match kind {
        AttentionKind::Mhsa => projections + 4 * h * n * n * d + 6 * h * n * n,
        AttentionKind::MhsaInteractive => projections + 4 * h * n * n * d + 6 * h * n * n + 4 * h * h * n * n,
        AttentionKind::Decomposed => projections + 2 * (n + l) * c + 8 * h * n * l * d + 12 * h * n * l,
        AttentionKind::Interactive => {
            projections + 2 * (n + l) * c + 8 * h * n * l * d + 12 * h * n * l + 8 * h * h * n * l
        }
    }
}

/// Seeded inputs for one cell: tokens `[N, c]`, weights with std `c^-1/2`
/// and near-identity mixes.
pub fn bench_inputs(cfg: &AttnConfig, seed: u64) -> Result<(Tensor<f32>, QkvWeights<f32>, HeadMixWeights<f32>)> {
    let mut rng = Rng::stream(seed, cfg.num_tokens() as u64);
    let c = cfg.channels();
    let z = Tensor::from_fn([cfg.num_tokens(), c], |_| rng.gaussian() as f32)?;
    let w = QkvWeights::random(c, (c as f64).powf(-0.5), &mut rng)?;
    let mix = HeadMixWeights::near_identity(cfg.num_heads(), 0.01, &mut rng)?;
    Ok((z, w, mix))
}

/// Runs one forward of `kind`.
pub fn run_forward(
    kind: AttentionKind,
    z: &Tensor<f32>,
    w: &QkvWeights<f32>,
    mix: &HeadMixWeights<f32>,
    cfg: &AttnConfig,
    meter: Option<&mut Meter>,
) -> Result<Tensor<f32>> {
    match kind {
        AttentionKind::Mhsa => mhsa_forward(z, w, cfg, meter),
        AttentionKind::MhsaInteractive => mhsa_interactive_forward(z, w, mix, cfg, meter),
        AttentionKind::Decomposed => decomposed_forward(z, w, cfg, meter),
        AttentionKind::Interactive => imhsa_forward(z, w, mix, cfg, meter),
    }
}

/// Instrumented forward: the meter after one pass.
pub fn measure(kind: AttentionKind, cfg: &AttnConfig, seed: u64) -> Result<Meter> {
    let (z, w, mix) = bench_inputs(cfg, seed)?;
    let mut meter = Meter::new();
    // the input and weights are live for the whole pass
    meter.alloc(z.size_bytes() + 3 * w.w_q.size_bytes());
    run_forward(kind, &z, &w, &mix, cfg, Some(&mut meter))?;
    Ok(meter)
}

/// Benchmarks every `(method, N)` cell in order. Quadratic methods above
/// their cap are recorded in [`BenchRun::skipped`] and reported on stderr.
pub fn run_scaling_bench(methods: &[AttentionKind], tokens: &[usize], bench: &BenchConfig) -> Result<BenchRun> {
    if bench.reps < 3 {
        return Err(Error::invalid("bench", format!("reps must be at least 3, got {}", bench.reps)));
    }
    let mut run = BenchRun::default();
    for &kind in methods {
        for &n in tokens {
            let cfg = bench.attn_config(n)?;
            if bench.cap(kind).is_some_and(|cap| n > cap) {
                eprintln!("{kind} N={n}: skipped: cap");
                run.skipped.push((kind, n));
                continue;
            }
            run.records.push(bench_cell(kind, &cfg, bench)?);
        }
    }
    Ok(run)
}

fn bench_cell(kind: AttentionKind, cfg: &AttnConfig, bench: &BenchConfig) -> Result<BenchRecord> {
    let meter = measure(kind, cfg, bench.seed)?;
    let (z, w, mix) = bench_inputs(cfg, bench.seed)?;
    run_forward(kind, &z, &w, &mix, cfg, None)?;
    let mut times = Vec::with_capacity(bench.reps);
    for _ in 0..bench.reps {
        let start = Instant::now();
        let out = run_forward(kind, &z, &w, &mix, cfg, None)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    let (mean, std, median) = summarize(&times);
    Ok(BenchRecord {
        method: kind,
        n: cfg.num_tokens(),
        h: cfg.num_heads(),
        d: cfg.head_dim(),
        l: cfg.num_landmarks(),
        flops: meter.flops(),
        peak_bytes: meter.peak_bytes(),
        largest_alloc: meter.largest_alloc(),
        wall_ms_mean: mean,
        wall_ms_std: std,
        wall_ms_median: median,
        reps: bench.reps,
    })
}

/// Mean, sample standard deviation and median.
pub fn summarize(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    (mean, std, median)
}

/// Least-squares line through `(ln N, ln t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Fits `ln t = slope·ln N + intercept` over at least four `(N, t)` points.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    const OP: &str = "fit_loglog_slope";
    if points.len() < 4 {
        return Err(Error::invalid(OP, format!("need at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|&(n, t)| !(n > 0.0) || !(t > 0.0)) {
        return Err(Error::invalid(OP, "N and t must be positive"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid(OP, "all N are equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(SlopeFit { slope, intercept: my - slope * mx, r2, points: points.len() })
}

/// Slope of median wall time against N for one method's records.
pub fn fit_method(records: &[BenchRecord], method: AttentionKind) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> =
        records.iter().filter(|r| r.method == method).map(|r| (r.n as f64, r.wall_ms_median)).collect();
    fit_loglog_slope(&pts)
}

/// CSV rows in [`BENCH_HEADER`] order. Everything except the wall-time
/// columns is a pure function of the inputs.
pub fn bench_rows(records: &[BenchRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.n.to_string(),
                r.h.to_string(),
                r.d.to_string(),
                r.l.to_string(),
                r.flops.to_string(),
                r.peak_bytes.to_string(),
                format!("{:.4}", r.wall_ms_mean),
                format!("{:.4}", r.wall_ms_std),
                r.reps.to_string(),
            ]
        })
        .collect()
}

pub fn write_bench_csv(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    write_csv(path, &BENCH_HEADER, &bench_rows(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        for p in [1.0, 2.0, 0.5] {
            let pts: Vec<_> = [196.0, 784.0, 3136.0, 12544.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(p))).collect();
            let fit = fit_loglog_slope(&pts).unwrap();
            assert!((fit.slope - p).abs() < 1e-6);
            assert!((fit.r2 - 1.0).abs() < 1e-12);
        }
        assert!(fit_loglog_slope(&[(1.0, 1.0); 3]).is_err());
        assert!(fit_loglog_slope(&[(5.0, 1.0), (5.0, 2.0), (5.0, 3.0), (5.0, 4.0)]).is_err());
    }

    #[test]
    fn counted_flops_match_closed_form() {
        let bench = BenchConfig { heads: 2, head_dim: 4, landmark_grid: (2, 3), ..Default::default() };
        for n in [16, 36, 49] {
            let cfg = bench.attn_config(n).unwrap();
            for kind in AttentionKind::ALL {
                assert_eq!(measure(kind, &cfg, 1).unwrap().flops(), closed_form_flops(kind, &cfg), "{kind} N={n}");
            }
        }
    }

    #[test]
    fn quadratic_term_quadruples() {
        let bench = BenchConfig::default();
        let (a, b) = (bench.attn_config(196).unwrap(), bench.attn_config(784).unwrap());
        let quad = |cfg: &AttnConfig| {
            closed_form_flops(AttentionKind::Mhsa, cfg) - 6 * (cfg.num_tokens() * cfg.channels().pow(2)) as u64
        };
        assert_eq!(quad(&b), 16 * quad(&a));
    }

    #[test]
    fn memory_accounting_at_784_tokens() {
        let bench = BenchConfig::default();
        let cfg = bench.attn_config(784).unwrap();
        let (h, n, l) = (cfg.num_heads() as u64, cfg.num_tokens() as u64, cfg.num_landmarks() as u64);
        let mhsa = measure(AttentionKind::Mhsa, &cfg, 0).unwrap().peak_bytes();
        assert!(mhsa >= h * n * n * 4);
        let imhsa = measure(AttentionKind::Interactive, &cfg, 0).unwrap().peak_bytes();
        // C = 16: at this size the input, the c×c weights and Q, K, V
        // outweigh the two [H, N, L] factors (measured ratio about 11.7)
        assert!(imhsa < h * n * l * 4 * 16);
    }

    #[test]
    fn caps_and_validation() {
        let bench = BenchConfig { heads: 1, head_dim: 2, mhsa_ix_cap: 16, reps: 3, ..Default::default() };
        let run = run_scaling_bench(&[AttentionKind::MhsaInteractive], &[16, 25], &bench).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.skipped, vec![(AttentionKind::MhsaInteractive, 25)]);
        assert!(run_scaling_bench(&[AttentionKind::Mhsa], &[15], &bench).is_err());
        let few = BenchConfig { reps: 2, ..bench };
        assert!(run_scaling_bench(&[AttentionKind::Mhsa], &[16], &few).is_err());
    }

    #[test]
    fn summary_statistics() {
        let (mean, std, median) = summarize(&[1.0, 2.0, 6.0]);
        assert_eq!((mean, median), (3.0, 2.0));
        assert!((std - 7f64.sqrt()).abs() < 1e-12);
    }
}
