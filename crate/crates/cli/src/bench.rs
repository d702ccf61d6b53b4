//! RBF versus B-spline KANLinear throughput sweep.

use std::time::{Duration, Instant};

use medkan_core::kan::{Basis, BSplineGrid, KanLinear, KanOptions, RbfGrid};
use medkan_core::tensor::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::exit::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub ks: Vec<usize>,
    pub widths: Vec<usize>,
    pub batches: Vec<usize>,
    /// Thread counts to measure; the sweep always reports a single-thread
    /// and a max-thread row per case.
    pub max_threads: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            ks: vec![4, 8, 16],
            widths: vec![64, 256],
            batches: vec![64, 1024],
            max_threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            warmup: 5,
            iters: 30,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> CliResult<()> {
        if self.iters < 30 || self.warmup < 5 {
            return Err(CliError::config(format!(
                "bench needs at least 5 warmup and 30 measured iterations, got {} and {}",
                self.warmup, self.iters
            )));
        }
        if self.ks.is_empty() || self.widths.is_empty() || self.batches.is_empty() {
            return Err(CliError::config("bench sweep lists must not be empty"));
        }
        if self.ks.iter().any(|&k| k < 4) {
            return Err(CliError::config("degree-3 B-splines need K ≥ 4"));
        }
        if self.widths.contains(&0) || self.batches.contains(&0) || self.max_threads == 0 {
            return Err(CliError::config("bench sizes must be positive"));
        }
        Ok(())
    }
}

/// One row of the report: median microseconds per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub basis: &'static str,
    pub k: usize,
    pub width: usize,
    pub batch: usize,
    pub thread_mode: &'static str,
    pub threads: usize,
    pub forward_us: f64,
    pub forward_backward_us: f64,
    /// RBF forward ÷ B-spline forward for the same case.
    pub forward_ratio: f64,
    /// RBF forward+backward ÷ B-spline forward+backward.
    pub forward_backward_ratio: f64,
}

pub const CSV_HEADER: &str =
    "basis,k,width,batch,thread_mode,threads,forward_us,forward_backward_us,forward_ratio,forward_backward_ratio";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.2},{:.2},{:.4},{:.4}",
            self.basis,
            self.k,
            self.width,
            self.batch,
            self.thread_mode,
            self.threads,
            self.forward_us,
            self.forward_backward_us,
            self.forward_ratio,
            self.forward_backward_ratio
        )
    }
}

pub fn median(samples: &mut [Duration]) -> Duration {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

/// Times `a` and `b` in alternating order so both see the same machine
/// load; returns the two median durations in microseconds.
fn time_pair(warmup: usize, iters: usize, mut a: impl FnMut(), mut b: impl FnMut()) -> (f64, f64) {
    for _ in 0..warmup {
        a();
        b();
    }
    let mut ta = Vec::with_capacity(iters);
    let mut tb = Vec::with_capacity(iters);
    let timed = |f: &mut dyn FnMut(), out: &mut Vec<Duration>| {
        let t = Instant::now();
        f();
        out.push(t.elapsed());
    };
    for i in 0..iters {
        if i % 2 == 0 {
            timed(&mut a, &mut ta);
            timed(&mut b, &mut tb);
        } else {
            timed(&mut b, &mut tb);
            timed(&mut a, &mut ta);
        }
    }
    (median(&mut ta).as_secs_f64() * 1e6, median(&mut tb).as_secs_f64() * 1e6)
}

struct Case {
    store: ParamStore<f32>,
    layer: KanLinear,
}

impl Case {
    fn new(basis: Basis, width: usize) -> Self {
        let mut store = ParamStore::<f32>::new(0);
        let layer = KanLinear::new(&mut store, "bench", width, width, basis, KanOptions { base: true, bias: true });
        Self { store, layer }
    }

    fn forward(&self, x: &Tensor<f32>) {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let y = self.layer.forward(&mut g, xv).expect("bench forward");
        std::hint::black_box(g.value(y));
    }

    fn forward_backward(&self, x: &Tensor<f32>) {
        let mut g = Graph::with_params(&self.store);
        let xv = g.input(x.clone());
        let y = self.layer.forward(&mut g, xv).expect("bench forward");
        let s = g.sum(y);
        let grads = g.backward(s).expect("bench backward");
        std::hint::black_box(grads.wrt(xv));
    }
}

/// Median `[forward, forward+backward]` times of one `width → width`
/// KANLinear layer per basis, as `(rbf, bspline)`.
fn measure(rbf: &Basis, spline: &Basis, width: usize, batch: usize, opts: &BenchOptions) -> ([f64; 2], [f64; 2]) {
    let r = Case::new(rbf.clone(), width);
    let s = Case::new(spline.clone(), width);
    let x = Tensor::<f32>::randn(&[batch, width], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (rf, sf) = time_pair(opts.warmup, opts.iters, || r.forward(&x), || s.forward(&x));
    let (rb, sb) = time_pair(opts.warmup, opts.iters, || r.forward_backward(&x), || s.forward_backward(&x));
    ([rf, rb], [sf, sb])
}

/// Runs the whole sweep; `progress` sees each finished pair of rows.
pub fn run_bench(opts: &BenchOptions, progress: &mut dyn FnMut(&[BenchRow])) -> CliResult<Vec<BenchRow>> {
    opts.validate()?;
    let mut rows = Vec::new();
    for &k in &opts.ks {
        let rbf = Basis::Rbf(RbfGrid::uniform(k, -2.0, 2.0, None)?);
        let spline = Basis::BSpline(BSplineGrid::new(k, 3, -2.0, 2.0)?);
        for &width in &opts.widths {
            for &batch in &opts.batches {
                let mut single = None;
                for (mode, threads) in [("single", 1), ("max", opts.max_threads)] {
                    // With one hardware thread the "max" case is the single-thread case.
                    let ([rf, rb], [sf, sb]) = match single {
                        Some(m) if threads == 1 => m,
                        _ => {
                            let pool = rayon::ThreadPoolBuilder::new()
                                .num_threads(threads)
                                .build()
                                .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
                            pool.install(|| measure(&rbf, &spline, width, batch, opts))
                        }
                    };
                    single.get_or_insert(([rf, rb], [sf, sb]));
                    let pair = [("rbf", rf, rb), ("bspline", sf, sb)].map(|(basis, f, b)| BenchRow {
                        basis,
                        k,
                        width,
                        batch,
                        thread_mode: mode,
                        threads,
                        forward_us: f,
                        forward_backward_us: b,
                        forward_ratio: rf / sf,
                        forward_backward_ratio: rb / sb,
                    });
                    progress(&pair);
                    rows.extend(pair);
                }
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}
