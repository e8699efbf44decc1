//! Command-line front end.
//!
//! One thin binary exposes the library: `quantize`, `gaussian-rate`,
//! `omega`, `bound`, `eval`, `em`, `sort-demo`, and `selfcheck`. Every CSV
//! output begins with comment lines echoing the fully resolved
//! configuration, so a run can be reproduced bit-for-bit by replaying the
//! echoed command. Exit codes: 0 success, 1 usage error, 2 numerical or
//! validation failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::engine::{self, EvalOptions};
use crate::gaussian;
use crate::graph::{theorem1_bound, crude_bound, BoundConstant, CompGraph};
use crate::measure::{wasserstein1, DiscreteMeasure};
use crate::plot::{Panel, Series};
use crate::quantize::{
    cell_coupling_error, compress, quantization_error, quantize_discrete, quantize_source,
    SourceSpec,
};
use crate::sde::{em_error_experiment, SdeSpec};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dcg",
    version,
    about = "Deterministic propagation of quantized distributions through computational graphs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Cap on simultaneously tracked joint atoms.
    #[arg(long, global = true)]
    atom_cap: Option<u64>,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConstantArg {
    Loose,
    Tight,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Exact,
    Cq,
    Mc,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Cq => "cq",
            Self::Mc => "mc",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize a source distribution to at most 2^n atoms; write atom/weight CSV.
    Quantize {
        /// Source spec: gaussian:MEAN,STD | uniform:LO,HI | discrete:FILE.csv | quantile:FILE.csv
        #[arg(long)]
        source: String,
        /// Quantization level (cells = 2^n).
        #[arg(long)]
        n: u32,
        #[arg(long)]
        out: PathBuf,
        /// Also write the cell tree as JSON.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Exact standard-normal quantization error for levels 0..=n-max.
    GaussianRate {
        #[arg(long, default_value_t = 13)]
        n_max: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterated tail conditional means of the standard normal.
    Omega {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagation error bound for a graph at level n.
    Bound {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        n: u32,
        /// Compression constant: loose (3/2^n, the default) or tight (3/2^(n+1)).
        #[arg(long, value_enum, default_value = "loose")]
        constant: ConstantArg,
        /// Optional CSV with the per-source breakdown.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a graph: exact joint law, compressed-and-quantized, or Monte Carlo.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Quantization level (required for cq; optional source pre-quantization for exact).
        #[arg(long)]
        n: Option<u32>,
        /// Sample count (mc mode).
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Emit this node's marginal instead of the terminal law.
        #[arg(long)]
        node: Option<String>,
    },
    /// Euler-Maruyama quantization/compression error study (GBM).
    Em {
        #[arg(long, default_value_t = 0.05)]
        mu: f64,
        #[arg(long, default_value_t = 0.4)]
        sigma: f64,
        #[arg(long, default_value_t = 100.0)]
        y0: f64,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        /// Step counts N, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,100,200,300,400,500")]
        steps: Vec<usize>,
        /// Quantization levels n, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10")]
        n: Vec<u32>,
        #[arg(long, default_value_t = 100_000)]
        ref_samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional SVG with the two standard views of the error surface.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Order statistics of iid sources through the bubble-sort network.
    SortDemo {
        /// Number of iid sources.
        #[arg(long, default_value_t = 3)]
        sources: usize,
        /// Order statistic index (1 = minimum).
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Source spec shared by all inputs.
        #[arg(long, default_value = "uniform:0,1")]
        dist: String,
        #[arg(long, value_enum, default_value = "exact")]
        mode: ModeArg,
        #[arg(long)]
        n: Option<u32>,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast subset of the invariant suites.
    Selfcheck,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        // Ignore "already initialized": tests may run several commands in
        // one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let atom_cap = cli.atom_cap.unwrap_or(engine::DEFAULT_ATOM_CAP);
    let out_dir = cli.out_dir.clone();
    let resolve = |p: &Path| -> PathBuf {
        match (&out_dir, p.is_relative()) {
            (Some(dir), true) => dir.join(p),
            _ => p.to_path_buf(),
        }
    };
    let globals = |mut echo: Vec<String>| -> Vec<String> {
        if let Some(t) = cli.threads {
            echo.push(format!("--threads {t}"));
        }
        if let Some(c) = cli.atom_cap {
            echo.push(format!("--atom-cap {c}"));
        }
        if let Some(d) = &cli.out_dir {
            echo.push(format!("--out-dir {}", d.display()));
        }
        echo
    };

    match cli.cmd {
        Cmd::Quantize { source, n, out, tree } => {
            let spec = parse_source(&source)?;
            let (m, cells) = quantize_source(&spec, n)?;
            let mut echo = vec![
                "dcg quantize".into(),
                format!("--source {source}"),
                format!("--n {n}"),
                format!("--out {}", out.display()),
            ];
            if let Some(t) = &tree {
                echo.push(format!("--tree {}", t.display()));
            }
            let echo = globals(echo);
            std::fs::write(resolve(&out), m.to_csv(&[echo.join(" ")]))?;
            if let Some(tp) = tree {
                std::fs::write(resolve(&tp), cells.to_json())?;
            }
            println!(
                "quantized {source} at n={n}: {} atoms, mean {:.12}, error {:.6e}",
                m.len(),
                m.mean(),
                quantization_error(&spec, n)?
            );
            Ok(())
        }
        Cmd::GaussianRate { n_max, out } => {
            let table = gaussian::gaussian_rate_table(n_max)?;
            let echo = globals(vec![
                "dcg gaussian-rate".into(),
                format!("--n-max {n_max}"),
                format!("--out {}", out.display()),
            ]);
            let mut text = format!("# {}\n", echo.join(" "));
            text.push_str("n,w1,ratio\n");
            for (i, (n, err)) in table.iter().enumerate() {
                let ratio = if i == 0 {
                    String::new()
                } else {
                    format!("{:.12}", table[i - 1].1 / err)
                };
                writeln!(text, "{n},{err:.16e},{ratio}").unwrap();
            }
            std::fs::write(resolve(&out), text)?;
            println!("rate table up to n={n_max}: last ratio {:.4}", {
                let k = table.len() - 1;
                table[k - 1].1 / table[k].1
            });
            Ok(())
        }
        Cmd::Omega { steps, out } => {
            let om = gaussian::omega_sequence(steps)?;
            let echo = globals(vec![
                "dcg omega".into(),
                format!("--steps {steps}"),
                format!("--out {}", out.display()),
            ]);
            let mut text = format!("# {}\n", echo.join(" "));
            text.push_str("j,omega\n");
            for (j, w) in om.values().iter().enumerate() {
                writeln!(text, "{j},{w:.16e}").unwrap();
            }
            std::fs::write(resolve(&out), text)?;
            let j = om.steps();
            println!(
                "omega_{j} = {:.6}, omega_{j}/sqrt(2*{j}) = {:.6}",
                om.get(j),
                om.get(j) / (2.0 * j as f64).sqrt()
            );
            Ok(())
        }
        Cmd::Bound { graph, n, constant, out } => {
            let g = CompGraph::from_json(&std::fs::read_to_string(resolve(&graph))?)?;
            let bc = match constant {
                ConstantArg::Loose => BoundConstant::Loose,
                ConstantArg::Tight => BoundConstant::Tight,
            };
            let report = theorem1_bound(&g, n, bc)?;
            let crude = crude_bound(&g, n, bc)?;
            println!(
                "bound at n={n} ({}): {:.12e}",
                if bc == BoundConstant::Loose { "loose 3/2^n" } else { "tight 3/2^(n+1)" },
                report.total
            );
            println!("crude (max-aggregated): {crude:.12e}");
            for t in &report.per_source {
                println!(
                    "  source {:<12} quant_error {:.6e}  diam(q) {:.6e}  path_sum {:.6e}  term {:.6e}",
                    t.id, t.quantization_error, t.quantized_diameter, t.path_sum, t.term
                );
            }
            if let Some(out) = out {
                let echo = globals(vec![
                    "dcg bound".into(),
                    format!("--graph {}", graph.display()),
                    format!("--n {n}"),
                    format!(
                        "--constant {}",
                        if bc == BoundConstant::Loose { "loose" } else { "tight" }
                    ),
                    format!("--out {}", out.display()),
                ]);
                let mut text = format!("# {}\n", echo.join(" "));
                writeln!(text, "# total,{:.16e}", report.total).unwrap();
                writeln!(text, "# crude,{crude:.16e}").unwrap();
                text.push_str("source,quant_error,quantized_diam,path_sum,term\n");
                for t in &report.per_source {
                    writeln!(
                        text,
                        "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                        t.id, t.quantization_error, t.quantized_diameter, t.path_sum, t.term
                    )
                    .unwrap();
                }
                std::fs::write(resolve(&out), text)?;
            }
            Ok(())
        }
        Cmd::Eval { graph, mode, n, samples, seed, out, node } => {
            let g = CompGraph::from_json(&std::fs::read_to_string(resolve(&graph))?)?;
            let mut opts = EvalOptions { joint_atom_cap: atom_cap, marginals: Vec::new() };
            if let Some(id) = &node {
                opts.marginals.push(id.clone());
            }
            let result = match mode {
                ModeArg::Exact => engine::eval_exact_joint(&g, n, &opts)?,
                ModeArg::Cq => {
                    let n = n.ok_or_else(|| Error::Eval("cq mode needs --n".into()))?;
                    engine::eval_cq(&g, n, &opts)?
                }
                ModeArg::Mc => engine::eval_mc(&g, samples, seed, &opts)?,
            };
            let measure = match &node {
                Some(id) => result
                    .marginals
                    .get(id)
                    .ok_or_else(|| Error::Eval(format!("no marginal recorded for '{id}'")))?,
                None => &result.terminal,
            };
            let mut echo = vec![
                "dcg eval".into(),
                format!("--graph {}", graph.display()),
                format!("--mode {}", mode.name()),
            ];
            if let Some(n) = n {
                echo.push(format!("--n {n}"));
            }
            if mode == ModeArg::Mc {
                echo.push(format!("--samples {samples}"));
                echo.push(format!("--seed {seed}"));
            }
            if let Some(id) = &node {
                echo.push(format!("--node {id}"));
            }
            echo.push(format!("--out {}", out.display()));
            let echo = globals(echo);
            let mut comments = vec![echo.join(" ")];
            for s in &result.node_stats {
                comments.push(format!(
                    "node {}: support {} -> {}",
                    s.id, s.support_before, s.support_after
                ));
            }
            comments.push(format!("wall_ms: {:.3}", result.wall.as_secs_f64() * 1e3));
            std::fs::write(resolve(&out), measure.to_csv(&comments))?;
            println!(
                "{} atoms, mean {:.12}, wall {:.1} ms",
                measure.len(),
                measure.mean(),
                result.wall.as_secs_f64() * 1e3
            );
            Ok(())
        }
        Cmd::Em { mu, sigma, y0, horizon, steps, n, ref_samples, seed, out, svg } => {
            let spec = SdeSpec::gbm(mu, sigma, y0, horizon, 1)?;
            let exp = em_error_experiment(&spec, &n, &steps, ref_samples, seed)?;
            let steps_echo =
                steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
            let n_echo = n.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
            let mut echo = vec![
                "dcg em".into(),
                format!("--mu {mu}"),
                format!("--sigma {sigma}"),
                format!("--y0 {y0}"),
                format!("--T {horizon}"),
                format!("--steps {steps_echo}"),
                format!("--n {n_echo}"),
                format!("--ref-samples {ref_samples}"),
                format!("--seed {seed}"),
                format!("--out {}", out.display()),
            ];
            if let Some(s) = &svg {
                echo.push(format!("--svg {}", s.display()));
            }
            let echo = globals(echo);
            let mut text = format!("# {}\n", echo.join(" "));
            writeln!(text, "# fitted bound: c={:.6e} c_prime={:.6e}", exp.c, exp.c_prime).unwrap();
            text.push_str("N,n,w1,bound_fit,diam,support,runtime_ms\n");
            for r in &exp.records {
                writeln!(
                    text,
                    "{},{},{:.16e},{:.16e},{:.16e},{},{:.3}",
                    r.steps, r.level, r.w1, r.bound_fit, r.diam, r.support, r.runtime_ms
                )
                .unwrap();
            }
            std::fs::write(resolve(&out), &text)?;
            if let Some(svg_path) = svg {
                let panels = em_panels(&exp.records);
                std::fs::write(resolve(&svg_path), crate::plot::render(&panels))?;
            }
            println!(
                "{} grid cells; fitted c = {:.4e}, c' = {:.4e}",
                exp.records.len(),
                exp.c,
                exp.c_prime
            );
            Ok(())
        }
        Cmd::SortDemo { sources, k, dist, mode, n, samples, seed, out } => {
            let spec = parse_source(&dist)?;
            let src: Vec<SourceSpec> = (0..sources).map(|_| spec.clone()).collect();
            let g = engine::build_bubble_sort_graph(&src, k)?;
            let opts = EvalOptions { joint_atom_cap: atom_cap, marginals: Vec::new() };
            let result = match mode {
                ModeArg::Exact => engine::eval_exact_joint(&g, n, &opts)?,
                ModeArg::Cq => {
                    let n = n.ok_or_else(|| Error::Eval("cq mode needs --n".into()))?;
                    engine::eval_cq(&g, n, &opts)?
                }
                ModeArg::Mc => engine::eval_mc(&g, samples, seed, &opts)?,
            };
            let mut echo = vec![
                "dcg sort-demo".into(),
                format!("--sources {sources}"),
                format!("--k {k}"),
                format!("--dist {dist}"),
                format!("--mode {}", mode.name()),
            ];
            if let Some(n) = n {
                echo.push(format!("--n {n}"));
            }
            if mode == ModeArg::Mc {
                echo.push(format!("--samples {samples}"));
                echo.push(format!("--seed {seed}"));
            }
            echo.push(format!("--out {}", out.display()));
            let echo = globals(echo);
            std::fs::write(resolve(&out), result.terminal.to_csv(&[echo.join(" ")]))?;
            println!(
                "order statistic {k} of {sources} iid {dist}: {} atoms, mean {:.9}",
                result.terminal.len(),
                result.terminal.mean()
            );
            Ok(())
        }
        Cmd::Selfcheck => selfcheck(),
    }
}

fn em_panels(records: &[crate::sde::ExperimentRecord]) -> Vec<Panel> {
    let mut levels: Vec<u32> = records.iter().map(|r| r.level).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut steps: Vec<usize> = records.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();

    let by_level = levels
        .iter()
        .map(|&n| Series {
            label: format!("n={n}"),
            points: records
                .iter()
                .filter(|r| r.level == n)
                .map(|r| (r.steps as f64, r.w1))
                .collect(),
        })
        .collect();
    let by_steps = steps
        .iter()
        .map(|&ns| Series {
            label: format!("N={ns}"),
            points: records
                .iter()
                .filter(|r| r.steps == ns)
                .map(|r| (r.level as f64, r.w1))
                .collect(),
        })
        .collect();
    vec![
        Panel {
            title: "W1 vs N (fixed n)".into(),
            x_label: "N".into(),
            y_label: "W1".into(),
            log_y: true,
            series: by_level,
        },
        Panel {
            title: "W1 vs n (fixed N)".into(),
            x_label: "n".into(),
            y_label: "W1".into(),
            log_y: true,
            series: by_steps,
        },
    ]
}

/// Parses `gaussian:M,S`, `uniform:LO,HI`, `discrete:FILE.csv`, or
/// `quantile:FILE.csv` (two-column `u,x` table).
pub fn parse_source(text: &str) -> Result<SourceSpec> {
    let (kind, rest) = text
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("source '{text}': expected kind:params")))?;
    let two = |rest: &str| -> Result<(f64, f64)> {
        let (a, b) = rest
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("source '{text}': expected two parameters")))?;
        Ok((
            a.trim().parse().map_err(|e| Error::Parse(format!("source '{text}': {e}")))?,
            b.trim().parse().map_err(|e| Error::Parse(format!("source '{text}': {e}")))?,
        ))
    };
    match kind {
        "gaussian" => {
            let (m, s) = two(rest)?;
            SourceSpec::gaussian(m, s)
        }
        "uniform" => {
            let (lo, hi) = two(rest)?;
            SourceSpec::uniform(lo, hi)
        }
        "discrete" => {
            let m = DiscreteMeasure::from_csv(&std::fs::read_to_string(rest)?)?;
            Ok(SourceSpec::discrete(m))
        }
        "quantile" => {
            let mut knots = Vec::new();
            for line in std::fs::read_to_string(rest)?.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with("u,") {
                    continue;
                }
                let (u, x) = line
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("quantile table: bad line '{line}'")))?;
                knots.push((
                    u.trim().parse().map_err(|e| Error::Parse(format!("{e}")))?,
                    x.trim().parse().map_err(|e| Error::Parse(format!("{e}")))?,
                ));
            }
            SourceSpec::quantile_table(knots)
        }
        other => Err(Error::Parse(format!("unknown source kind '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Selfcheck
// ---------------------------------------------------------------------------

fn selfcheck() -> Result<()> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let mut failures = 0usize;
    let mut report = |name: &str, ok: bool, detail: String| {
        if ok {
            println!("ok    {name}");
        } else {
            println!("FAIL  {name}: {detail}");
            failures += 1;
        }
    };

    // Dyadic ladder identity: error 2^(m-n)/4 for n < m, zero beyond.
    {
        let mut ok = true;
        let mut detail = String::new();
        for m in 1..=8u32 {
            let atoms: Vec<f64> = (1..=(1u32 << m)).map(f64::from).collect();
            let mu = DiscreteMeasure::uniform_on(&atoms).unwrap();
            for n in 0..=m + 1 {
                let got = wasserstein1(&mu, &quantize_discrete(&mu, n));
                let expect = if n < m { (1u64 << (m - n)) as f64 / 4.0 } else { 0.0 };
                if (got - expect).abs() > 1e-12 {
                    ok = false;
                    detail = format!("m={m} n={n}: {got} vs {expect}");
                }
            }
        }
        report("dyadic ladder identity", ok, detail);
    }

    // Discrete quantization bound: diam/2^(n+1), seeded random measures.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ok = true;
        let mut detail = String::new();
        for _ in 0..200 {
            let k = rng.random_range(2..128);
            let pairs: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(-100.0..100.0), rng.random_range(0.01..1.0)))
                .collect();
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let m = DiscreteMeasure::from_pairs(
                pairs.into_iter().map(|(x, w)| (x, w / total)).collect(),
            )
            .unwrap();
            let max_n = (m.len() as f64).log2().floor() as u32;
            for n in 1..=max_n.min(7) {
                let err = wasserstein1(&m, &quantize_discrete(&m, n));
                let bound = m.diameter() / (1u64 << (n + 1)) as f64;
                if err > bound * (1.0 + 1e-9) + 1e-12 {
                    ok = false;
                    detail = format!("err {err} > bound {bound} at n={n}");
                }
            }
        }
        report("discrete quantization bound", ok, detail);
    }

    // Gaussian cell symmetry and dyadic rate.
    {
        let (m, _) = quantize_source(&SourceSpec::gaussian(0.0, 1.0)?, 8)?;
        let mut ok = m.len() == 256;
        let mut detail = String::new();
        for i in 0..m.len() / 2 {
            let a = m.atoms()[i];
            let b = m.atoms()[m.len() - 1 - i];
            if (a + b).abs() > 1e-10 {
                ok = false;
                detail = format!("atoms {a} and {b} not mirrored");
            }
        }
        let table = gaussian::gaussian_rate_table(8)?;
        for w in table.windows(2).skip(5) {
            let ratio = w[0].1 / w[1].1;
            if !(1.7..=2.3).contains(&ratio) {
                ok = false;
                detail = format!("ratio {ratio} at n={}", w[0].0);
            }
        }
        report("gaussian symmetry and rate", ok, detail);
    }

    // Omega sequence asymptotics.
    {
        let om = gaussian::omega_sequence(2000)?;
        let ratio = om.get(2000) / (2.0 * 2000.0f64).sqrt();
        report(
            "omega sequence growth",
            (0.97..=1.03).contains(&ratio),
            format!("omega_2000/sqrt(4000) = {ratio}"),
        );
    }

    // Mean preservation through quantize and compress.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ok = true;
        let mut detail = String::new();
        for _ in 0..100 {
            let k = rng.random_range(2..200);
            let pairs: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(-50.0..50.0), rng.random_range(0.01..1.0)))
                .collect();
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let m = DiscreteMeasure::from_pairs(
                pairs.into_iter().map(|(x, w)| (x, w / total)).collect(),
            )
            .unwrap();
            let n = rng.random_range(0..8);
            for q in [quantize_discrete(&m, n), compress(&m, n)] {
                if (q.mean() - m.mean()).abs() > 1e-10 {
                    ok = false;
                    detail = format!("mean drifted by {}", (q.mean() - m.mean()).abs());
                }
            }
            let cc = cell_coupling_error(&m, n);
            let direct = wasserstein1(&m, &quantize_discrete(&m, n));
            if (cc - direct).abs() > 1e-10 {
                ok = false;
                detail = format!("coupling error {cc} vs direct {direct}");
            }
        }
        report("mean preservation and coupling identity", ok, detail);
    }

    // Order statistics against brute force.
    {
        let u4 = SourceSpec::discrete(
            DiscreteMeasure::uniform_on(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let mut ok = true;
        let mut detail = String::new();
        for k in 1..=3usize {
            let g = engine::build_bubble_sort_graph(&[u4.clone(), u4.clone(), u4.clone()], k)?;
            let r = engine::eval_exact_joint(&g, None, &EvalOptions::default())?;
            let mut weights = std::collections::HashMap::new();
            for a in 1..=4u32 {
                for b in 1..=4u32 {
                    for c in 1..=4u32 {
                        let mut v = [a, b, c];
                        v.sort_unstable();
                        *weights.entry(v[k - 1]).or_insert(0u32) += 1;
                    }
                }
            }
            for (atom, w) in r.terminal.atoms().iter().zip(r.terminal.weights()) {
                let expect = weights[&(*atom as u32)] as f64 / 64.0;
                if (w - expect).abs() > 1e-12 {
                    ok = false;
                    detail = format!("k={k} atom {atom}: {w} vs {expect}");
                }
            }
        }
        report("bubble-sort order statistics", ok, detail);
    }

    // Monte Carlo determinism.
    {
        let g = engine::build_bubble_sort_graph(
            &[SourceSpec::uniform(0.0, 1.0)?, SourceSpec::uniform(0.0, 1.0)?],
            2,
        )?;
        let a = engine::eval_mc(&g, 10_000, 7, &EvalOptions::default())?;
        let b = engine::eval_mc(&g, 10_000, 7, &EvalOptions::default())?;
        report(
            "seeded Monte Carlo determinism",
            a.samples == b.samples,
            "same seed produced different samples".into(),
        );
    }

    if failures > 0 {
        Err(Error::Eval(format!("{failures} selfcheck propert(y/ies) failed")))
    } else {
        println!("all selfchecks passed");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_spec_parsing() {
        assert!(matches!(parse_source("gaussian:0,1"), Ok(SourceSpec::Gaussian { .. })));
        assert!(matches!(parse_source("uniform:-1,2.5"), Ok(SourceSpec::Uniform { .. })));
        assert!(parse_source("gaussian:0").is_err());
        assert!(parse_source("nonsense:1,2").is_err());
        assert!(parse_source("uniform:2,1").is_err());
    }

    #[test]
    fn help_is_usage_ok() {
        assert_eq!(run_from(["dcg", "--help"]), 0);
        assert_eq!(run_from(["dcg", "quantize", "--no-such-flag"]), 1);
    }
}
