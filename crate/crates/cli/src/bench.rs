//! Attention benchmarks: exact multiply counts and median wall-times for the
//! non-local baseline against SCA over a grid of shapes and grouping factors.

use std::time::Instant;

use anyhow::{bail, Context};
use csca_core::attention::{FlopLedger, NonLocalBlock, ScaBlock, ScaConfig};
use csca_core::rng::indexed_substream;
use csca_core::Tensor;

/// `(C, H, W)` points used when `--grid` is not given. The last point has
/// `H·W = 60`, which G = 8 and G = 16 do not divide, so those rows are skipped.
pub const DEFAULT_GRID: &str = "8x8x8,16x16x16,32x32x32,8x6x10";
pub const DEFAULT_GROUPS: &str = "1,2,4,8,16";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPoint {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Parses `CxHxW[,CxHxW...]`.
pub fn parse_grid(s: &str) -> anyhow::Result<Vec<GridPoint>> {
    s.split(',')
        .map(|p| {
            let dims: Vec<usize> = p
                .trim()
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .with_context(|| format!("bad grid point {p:?}, expected CxHxW"))?;
            match dims[..] {
                [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(GridPoint { c, h, w }),
                _ => bail!("bad grid point {p:?}, expected three positive extents CxHxW"),
            }
        })
        .collect()
}

pub fn parse_list(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse::<usize>().with_context(|| format!("bad number {x:?}")))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: &'static str,
    pub point: GridPoint,
    pub groups: usize,
    pub ledger: Option<FlopLedger>,
    /// median over repeats; `None` when timing is off or the row is skipped
    pub wall_ms: Option<f64>,
    /// baseline median over this row's median
    pub speedup: Option<f64>,
    /// reason the point was skipped
    pub skipped: Option<String>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub grid: Vec<GridPoint>,
    pub groups: Vec<usize>,
    /// 0 disables timing and only fills the ledgers
    pub repeats: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            grid: parse_grid(DEFAULT_GRID).expect("default grid"),
            groups: parse_list(DEFAULT_GROUPS).expect("default groups"),
            repeats: 5,
            threads: 1,
            seed: 0,
        }
    }
}

fn median_ms(repeats: usize, mut f: impl FnMut() -> anyhow::Result<()>) -> anyhow::Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

fn bench_point(p: GridPoint, opts: &BenchOptions, index: u64) -> anyhow::Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    if p.c % 2 != 0 {
        rows.push(BenchRow {
            kind: "nonlocal",
            point: p,
            groups: 1,
            ledger: None,
            wall_ms: None,
            speedup: None,
            skipped: Some(format!("odd channel count {}", p.c)),
        });
        return Ok(rows);
    }
    let mut rng = indexed_substream(opts.seed, "bench", index);
    let shape = [p.c, p.h, p.w];
    let xa: Tensor<f32> = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let xb: Tensor<f32> = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    let nonlocal = NonLocalBlock::<f32>::new(p.c, true, &mut rng)?;
    let (_, base_ledger) = nonlocal.forward_tensor(&xa)?;
    let base_ms = if opts.repeats > 0 {
        Some(median_ms(opts.repeats, || {
            nonlocal.forward_tensor(&xa)?;
            Ok(())
        })?)
    } else {
        None
    };
    rows.push(BenchRow {
        kind: "nonlocal",
        point: p,
        groups: 1,
        ledger: Some(base_ledger),
        wall_ms: base_ms,
        speedup: base_ms.map(|_| 1.0),
        skipped: None,
    });
    for &g in &opts.groups {
        let n = p.h * p.w;
        if g == 0 || n % g != 0 {
            log::warn!("skipping C={} H={} W={} G={g}: H·W = {n} not divisible", p.c, p.h, p.w);
            rows.push(BenchRow {
                kind: "sca",
                point: p,
                groups: g,
                ledger: None,
                wall_ms: None,
                speedup: None,
                skipped: Some(format!("H·W = {n} not divisible by G = {g}")),
            });
            continue;
        }
        let sca = ScaBlock::<f32>::new(p.c, ScaConfig::with_groups(g), &mut rng)?;
        let (_, _, ledger) = sca.forward_tensors(&xa, &xb)?;
        if base_ledger.attention_mults != ledger.attention_mults * g as u64 {
            bail!(
                "FLOP ratio violated at C={} H={} W={} G={g}: {} vs {}",
                p.c,
                p.h,
                p.w,
                base_ledger.attention_mults,
                ledger.attention_mults
            );
        }
        let ms = if opts.repeats > 0 {
            Some(median_ms(opts.repeats, || {
                sca.forward_tensors(&xa, &xb)?;
                Ok(())
            })?)
        } else {
            None
        };
        rows.push(BenchRow {
            kind: "sca",
            point: p,
            groups: g,
            ledger: Some(ledger),
            wall_ms: ms,
            speedup: base_ms.zip(ms).map(|(b, s)| b / s),
            skipped: None,
        });
    }
    Ok(rows)
}

/// Runs every grid point inside a rayon pool of `opts.threads` threads.
/// Fails if any valid point breaks the exact `baseline = G × SCA` ratio.
pub fn run_bench(opts: &BenchOptions) -> anyhow::Result<BenchReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .context("building the benchmark thread pool")?;
    let rows = pool.install(|| -> anyhow::Result<Vec<BenchRow>> {
        let mut rows = Vec::new();
        for (i, &p) in opts.grid.iter().enumerate() {
            rows.extend(bench_point(p, opts, i as u64)?);
        }
        Ok(rows)
    })?;
    Ok(BenchReport {
        rows,
        threads: opts.threads.max(1),
        repeats: opts.repeats,
    })
}

impl BenchReport {
    /// `attention_mults` is per attention direction, so the baseline/SCA
    /// ratio in that column is exactly G; `total_mults` covers all directions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,C,H,W,G,attention_mults,total_mults,wall_ms,speedup,threads,repeats,note\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            let (att, tot) = r
                .ledger
                .map(|l| (l.attention_mults, l.total()))
                .map(|(a, t)| (a.to_string(), t.to_string()))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.kind,
                r.point.c,
                r.point.h,
                r.point.w,
                r.groups,
                att,
                tot,
                opt(r.wall_ms),
                opt(r.speedup),
                self.threads,
                self.repeats,
                r.skipped.as_deref().map(|s| format!("skipped: {s}")).unwrap_or_default()
            ));
        }
        out
    }

    /// SCA rows at one grid point, in the order of the groups list.
    pub fn sca_rows(&self, p: GridPoint) -> Vec<&BenchRow> {
        self.rows
            .iter()
            .filter(|r| r.kind == "sca" && r.point == p && r.skipped.is_none())
            .collect()
    }
}
