//! `doublep` command line: generate workloads, cluster them, run and sweep
//! methods, and recompute the analysis tables.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use doublep::clustering::{ClusterCountPolicy, DEFAULT_MAX_ITERS};
use doublep::engine::{Preset, DEFAULT_SINK, DEFAULT_WINDOW};
use doublep::experiment::{self, Format, Input, Method, Prepared, RunConfig, TokenBudget};
use doublep::kvcache;
use doublep::workload::{self, TailProfile, WorkloadSpec};

#[derive(Parser)]
#[command(name = "doublep", version, about = "Hierarchical top-p sparse attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload and write it as a DPKV dump.
    Gen {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long)]
        sink: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a workload and print per-head statistics as JSON.
    Cluster {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate one method on every (layer, head, step).
    Run {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Evaluate a grid of method parameters and aggregate each point.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Recompute one of the analysis tables (2, 4, 6 or 7).
    Figs {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        fig: Fig,
        #[command(flatten)]
        grid: GridArgs,
        /// Fixed budgets as fractions of the context (table 4).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25])]
        budget_ratio: Vec<f64>,
        /// Number of cluster ranks to report (table 6).
        #[arg(long, default_value_t = 16)]
        ranks: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fig {
    /// Violation rate of fixed token budgets against the adaptive budget.
    #[value(name = "2", alias = "budgets")]
    Two,
    /// Mass recovered by a fixed candidate budget, per head.
    #[value(name = "4", alias = "budget-mass")]
    Four,
    /// Centroid-approximation error by cluster rank.
    #[value(name = "6", alias = "rank-error")]
    Six,
    /// Exact clusters chosen against the fewest reaching the same error.
    #[value(name = "7", alias = "exact-clusters")]
    Seven,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MethodName {
    Full,
    Doublep,
    TokenTopk,
    ClusterTopk,
    TokenToppFixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    LlamaDefault,
    QwenDefault,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::LlamaDefault => Preset::LlamaDefault,
            PresetArg::QwenDefault => Preset::QwenDefault,
        }
    }
}

#[derive(Args)]
struct WorkloadArgs {
    /// Context length N.
    #[arg(long, default_value_t = WorkloadSpec::default().context_len)]
    context_len: usize,
    #[arg(long, default_value_t = WorkloadSpec::default().head_dim)]
    head_dim: usize,
    #[arg(long, default_value_t = WorkloadSpec::default().num_blobs)]
    num_blobs: usize,
    #[arg(long, default_value_t = WorkloadSpec::default().blob_spread)]
    blob_spread: f64,
    #[arg(long, default_value_t = WorkloadSpec::default().blob_separation)]
    blob_separation: f64,
    /// peaked, heavy, uniform or mixed.
    #[arg(long, default_value = "peaked")]
    profile: String,
    #[arg(long, default_value_t = WorkloadSpec::default().query_strength)]
    query_strength: f64,
    #[arg(long, default_value_t = WorkloadSpec::default().layers)]
    layers: usize,
    #[arg(long, default_value_t = WorkloadSpec::default().kv_heads)]
    kv_heads: usize,
    #[arg(long, default_value_t = WorkloadSpec::default().gqa_group)]
    gqa_group: usize,
    #[arg(long, default_value_t = WorkloadSpec::default().steps)]
    steps: usize,
}

impl WorkloadArgs {
    fn spec(&self, seed: u64, sink: usize, window: usize) -> Result<WorkloadSpec> {
        let Some(tail_profile) = TailProfile::parse(&self.profile) else {
            bail!("unknown profile '{}'", self.profile);
        };
        Ok(WorkloadSpec {
            context_len: self.context_len,
            head_dim: self.head_dim,
            num_blobs: self.num_blobs,
            blob_spread: self.blob_spread,
            blob_separation: self.blob_separation,
            tail_profile,
            query_strength: self.query_strength,
            seed,
            layers: self.layers,
            kv_heads: self.kv_heads,
            gqa_group: self.gqa_group,
            steps: self.steps,
            sink,
            window,
        })
    }
}

#[derive(Args)]
struct CommonArgs {
    /// DPKV dump to read; without it a workload is generated from the
    /// workload flags.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Explicit cluster count per head.
    #[arg(long, conflicts_with = "tokens_per_cluster")]
    clusters: Option<usize>,
    #[arg(long)]
    tokens_per_cluster: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SINK)]
    sink: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Seed for workload generation and clustering.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Mass the exact tokens must recover for a step not to count as a violation.
    #[arg(long, default_value_t = 0.95)]
    target: f64,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn config(&self, method: Method) -> Result<RunConfig> {
        let input = match &self.input {
            Some(path) => Input::Dump(path.clone()),
            None => Input::Workload(self.workload.spec(self.seed, self.sink, self.window)?),
        };
        let clusters = match (self.clusters, self.tokens_per_cluster) {
            (Some(0), _) => bail!("--clusters must be positive"),
            (_, Some(0)) => bail!("--tokens-per-cluster must be positive"),
            (Some(k), _) => ClusterCountPolicy::Explicit(k),
            (None, Some(t)) => ClusterCountPolicy::TokensPerCluster(t),
            (None, None) => ClusterCountPolicy::default(),
        };
        Ok(RunConfig {
            input,
            method,
            target_p: self.target,
            clusters,
            sink: self.sink,
            window: self.window,
            seed: self.seed,
            max_iters: self.max_iters,
        })
    }

    fn emit(&self, bytes: &[u8]) -> Result<()> {
        experiment::emit(bytes, self.out.as_deref()).context("writing output")
    }
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, value_enum, default_value = "doublep")]
    method: MethodName,
    /// Named (p1, p2) pair; --p1/--p2 override it.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long)]
    p2: Option<f64>,
    /// Token budget for token_topk; omit for the per-step adaptive budget.
    #[arg(long)]
    k: Option<usize>,
    /// Exact cluster count for cluster_topk.
    #[arg(long)]
    m: Option<usize>,
    /// Candidate budget for token_topp_fixed.
    #[arg(long)]
    budget: Option<usize>,
    /// Mass threshold for token_topp_fixed.
    #[arg(long, default_value_t = 0.95)]
    p: f64,
}

fn thresholds(preset: Option<PresetArg>, p1: Option<f64>, p2: Option<f64>) -> (f64, f64) {
    let (d1, d2) = Preset::from(preset.unwrap_or(PresetArg::LlamaDefault)).thresholds();
    (p1.unwrap_or(d1), p2.unwrap_or(d2))
}

impl MethodArgs {
    fn method(&self) -> Result<Method> {
        Ok(match self.method {
            MethodName::Full => Method::Full,
            MethodName::Doublep => {
                let (p1, p2) = thresholds(self.preset, self.p1, self.p2);
                Method::Doublep { p1, p2 }
            }
            MethodName::TokenTopk => Method::TokenTopk {
                k: self.k.map_or(TokenBudget::Adaptive, TokenBudget::Fixed),
            },
            MethodName::ClusterTopk => Method::ClusterTopk {
                m: self.m.context("cluster_topk needs --m")?,
            },
            MethodName::TokenToppFixed => Method::TokenToppFixed {
                budget: self.budget.context("token_topp_fixed needs --budget")?,
                p: self.p,
            },
        })
    }
}

/// Comma-separated parameter lists; the sweep takes their product.
#[derive(Args)]
struct GridArgs {
    #[arg(long, value_enum, default_value = "doublep")]
    method: MethodName,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_delimiter = ',')]
    p1: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    p2: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Include the adaptive budget among token_topk points.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    budget: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.95])]
    p: Vec<f64>,
}

impl GridArgs {
    fn preset_pair(&self) -> (Vec<f64>, Vec<f64>) {
        let (d1, d2) = thresholds(self.preset, None, None);
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        (or(&self.p1, d1), or(&self.p2, d2))
    }

    fn methods(&self) -> Result<Vec<Method>> {
        let methods: Vec<Method> = match self.method {
            MethodName::Full => vec![Method::Full],
            MethodName::Doublep => {
                let (p1s, p2s) = self.preset_pair();
                p1s.iter()
                    .flat_map(|&p1| p2s.iter().map(move |&p2| Method::Doublep { p1, p2 }))
                    .collect()
            }
            MethodName::TokenTopk => {
                let mut v: Vec<Method> = self
                    .k
                    .iter()
                    .map(|&k| Method::TokenTopk { k: TokenBudget::Fixed(k) })
                    .collect();
                if self.adaptive || v.is_empty() {
                    v.push(Method::TokenTopk { k: TokenBudget::Adaptive });
                }
                v
            }
            MethodName::ClusterTopk => self.m.iter().map(|&m| Method::ClusterTopk { m }).collect(),
            MethodName::TokenToppFixed => self
                .budget
                .iter()
                .flat_map(|&budget| self.p.iter().map(move |&p| Method::TokenToppFixed { budget, p }))
                .collect(),
        };
        if methods.is_empty() {
            bail!("empty sweep: give at least one value for the method's parameter");
        }
        Ok(methods)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            workload,
            sink,
            window,
            seed,
            out,
        } => {
            let spec = workload.spec(seed.unwrap_or(0), sink.unwrap_or(DEFAULT_SINK), window.unwrap_or(DEFAULT_WINDOW))?;
            let (cache, trace) = workload::generate(&spec)?;
            kvcache::write_dump(&cache, &trace, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Cluster { common } => {
            let prep = Prepared::load(&common.config(Method::Full)?)?;
            let report = experiment::cluster_report(&prep)?;
            let mut bytes = serde_json::to_vec_pretty(&report)?;
            bytes.push(b'\n');
            common.emit(&bytes)?;
        }
        Command::Run { common, method } => {
            let config = common.config(method.method()?)?;
            let records = experiment::run(&config)?;
            common.emit(&experiment::render(&records, common.format.into())?)?;
        }
        Command::Sweep { common, grid } => {
            let configs = grid
                .methods()?
                .into_iter()
                .map(|m| common.config(m))
                .collect::<Result<Vec<_>>>()?;
            let report = experiment::sweep(&configs)?;
            common.emit(&experiment::render(&report.rows, common.format.into())?)?;
        }
        Command::Figs {
            common,
            fig,
            grid,
            budget_ratio,
            ranks,
        } => {
            let base = common.config(Method::Full)?;
            let prep = Prepared::load(&base)?;
            let format = common.format.into();
            let bytes = match fig {
                Fig::Two => {
                    let ks = if grid.k.is_empty() { vec![64, 256, 1024] } else { grid.k.clone() };
                    experiment::render(&experiment::budget_table(&prep, &base, &ks)?, format)?
                }
                Fig::Four => {
                    let p = grid.p.first().copied().unwrap_or(0.95);
                    experiment::render(&experiment::fixed_budget_mass(&prep, &base, &budget_ratio, p)?, format)?
                }
                Fig::Six => experiment::render(&experiment::rank_error(&prep, ranks)?, format)?,
                Fig::Seven => {
                    let (p1s, p2s) = grid.preset_pair();
                    let mut rows = Vec::new();
                    for &p1 in &p1s {
                        for &p2 in &p2s {
                            rows.extend(experiment::exact_cluster_tracking(&prep, &base, p1, p2)?);
                        }
                    }
                    experiment::render(&rows, format)?
                }
            };
            common.emit(&bytes)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("doublep: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
