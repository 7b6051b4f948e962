use anyhow::{bail, Context, Result};
use bdtree::branching::expected_leaf_counts;
use bdtree::density::log_tree_density_terms;
use bdtree::factor::{noise_baseline_log_density, predictive_log_density, sample_data, split_heldout, Dataset};
use bdtree::geweke::{run_geweke_suite, GewekeConfig, GewekeKernel, PriorRedraw};
use bdtree::mcmc::{
    run_chain, stream_rng, AddRemoveSchedule, ChainState, HeuristicMode, Mutation, Sampler, SamplerConfig,
};
use bdtree::prior::{sample_locations, simulate_tree};
use bdtree::tree::TreeDocument;
use bdtree::{BdtError, HyperPrior, Hyperparams, NodeKind, Tree};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bdtree",
    version,
    about = "Beta diffusion trees: simulation, densities, fitting and sampler validation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a tree from the prior and write it with its feature matrix
    Simulate(SimulateArgs),
    /// Log-density terms of a tree
    Density(DensityArgs),
    /// Expected leaf counts from the branching-process generator
    ExpectedLeaves(ExpectedArgs),
    /// Run the sampler on a data matrix
    Fit(FitArgs),
    /// Joint-distribution test of the sampler
    Geweke(GewekeArgs),
}

#[derive(Args, Clone, Copy)]
struct HpArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda_s: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_r: f64,
    #[arg(long, default_value_t = 1.0)]
    theta_s: f64,
    #[arg(long, default_value_t = 1.0)]
    theta_r: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_x: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_y: f64,
}

impl HpArgs {
    fn hp(&self) -> Hyperparams {
        Hyperparams {
            lambda_s: self.lambda_s,
            lambda_r: self.lambda_r,
            theta_s: self.theta_s,
            theta_r: self.theta_r,
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of objects
    #[arg(long)]
    n: usize,
    #[command(flatten)]
    hp: HpArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also write Brownian node locations in this many dimensions
    #[arg(long)]
    locations: Option<usize>,
    /// Also write a data matrix with this many columns from the factor model
    #[arg(long)]
    data: Option<usize>,
    /// Number of independent trees; more than one switches to summary mode
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// Print leaf-count statistics against the expected count instead of writing files
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    hp: HpArgs,
}

#[derive(Args)]
struct ExpectedArgs {
    #[arg(long)]
    n_max: usize,
    /// Comma-separated replicate rates; defaults to --lambda-r
    #[arg(long, value_delimiter = ',')]
    lambda_r_grid: Vec<f64>,
    #[command(flatten)]
    hp: HpArgs,
    /// One row per (rate, N, j) instead of one per (rate, N)
    #[arg(long)]
    long: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeuristicArg {
    Off,
    BurnIn,
    Always,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    AlwaysAccept,
    DropSubtreeNormalizer,
    DropTimeProposalDensity,
    OffByOneBetaArgument,
    DisplayedFormulas,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    thinning: usize,
    #[arg(long, value_enum, default_value_t = HeuristicArg::Off)]
    heuristics: HeuristicArg,
    #[arg(long, default_value_t = 5)]
    heuristic_period: usize,
    /// Particles moved together at most; default ⌈N/10⌉
    #[arg(long)]
    multiple_cap: Option<usize>,
    /// Add/remove proposals per kind: "adaptive", "quarter" or a number
    #[arg(long, default_value = "adaptive")]
    schedule: String,
    #[arg(long, default_value_t = 1.0)]
    prior_shape: f64,
    #[arg(long, default_value_t = 1.0)]
    prior_rate: f64,
    #[arg(long, value_enum)]
    mutation: Option<MutationArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self, burn_in: usize) -> Result<SamplerConfig> {
        let add_remove = match self.schedule.as_str() {
            "adaptive" => AddRemoveSchedule::Adaptive,
            "quarter" => AddRemoveSchedule::QuarterInternal,
            s => AddRemoveSchedule::Fixed(
                s.parse()
                    .map_err(|_| BdtError::InvalidArgument(format!("unknown schedule {s:?}")))?,
            ),
        };
        let (a, b) = (self.prior_shape, self.prior_rate);
        Ok(SamplerConfig {
            iterations: self.iterations,
            burn_in,
            thinning: self.thinning,
            heuristic_period: self.heuristic_period,
            heuristics: match self.heuristics {
                HeuristicArg::Off => HeuristicMode::Off,
                HeuristicArg::BurnIn => HeuristicMode::BurnIn,
                HeuristicArg::Always => HeuristicMode::Always,
            },
            multiple_cap: self.multiple_cap,
            seed: self.seed,
            prior: HyperPrior {
                rate_shape: a,
                rate_rate: b,
                concentration_shape: a,
                concentration_rate: b,
                precision_shape: a,
                precision_rate: b,
            },
            add_remove,
            mutation: self.mutation.map(|m| match m {
                MutationArg::AlwaysAccept => Mutation::AlwaysAccept,
                MutationArg::DropSubtreeNormalizer => Mutation::DropSubtreeNormalizer,
                MutationArg::DropTimeProposalDensity => Mutation::DropTimeProposalDensity,
                MutationArg::OffByOneBetaArgument => Mutation::OffByOneBetaArgument,
                MutationArg::DisplayedFormulas => Mutation::DisplayedFormulas,
            }),
            ..SamplerConfig::default()
        })
    }
}

#[derive(Args)]
struct FitArgs {
    /// Data CSV, one row per object; empty fields are missing
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    /// Fraction of observed entries held out for a test log-likelihood
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Independent chains, run on separate threads
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum KernelArg {
    Sampler,
    PriorRedraw,
}

#[derive(Args)]
struct GewekeArgs {
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Recorded successive-chain iterations; thinning is iters / samples
    #[arg(long, default_value_t = 200_000)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = KernelArg::Sampler)]
    kernel: KernelArg,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Discarded successive-chain iterations, over which the add/remove count adapts
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    /// Significance level per statistic
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Statistics allowed below alpha for a pass
    #[arg(long, default_value_t = 1)]
    allowed: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn out_or_stdout(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

#[derive(Serialize)]
struct LeafSummary {
    n_objects: usize,
    replicates: usize,
    mean_leaves: f64,
    std_error: f64,
    expected_leaves: f64,
    within_3se: bool,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let hp = a.hp.hp();
    hp.validate()?;
    let mut rng = stream_rng(a.seed, 0);
    if a.summary || a.replicates > 1 {
        let counts: Vec<f64> = (0..a.replicates.max(1))
            .map(|_| simulate_tree(a.n, &hp, &mut rng).map(|t| t.count_kind(NodeKind::Leaf) as f64))
            .collect::<bdtree::Result<_>>()?;
        let r = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / r;
        let var = counts.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
        let se = (var / r).sqrt();
        let expected = expected_leaf_counts(a.n, &hp)?.total;
        let s = LeafSummary {
            n_objects: a.n,
            replicates: counts.len(),
            mean_leaves: mean,
            std_error: se,
            expected_leaves: expected,
            within_3se: (mean - expected).abs() <= 3.0 * se,
        };
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(());
    }
    fs::create_dir_all(&a.out_dir)?;
    let tree = simulate_tree(a.n, &hp, &mut rng)?;
    fs::write(a.out_dir.join("tree.json"), tree.to_json()?)?;
    let fm = tree.feature_matrix();
    let mut w = create(&a.out_dir.join("features.csv"))?;
    let header: Vec<String> = fm.leaf_order.iter().map(|l| format!(",leaf{}", l.0)).collect();
    writeln!(w, "object{}", header.concat())?;
    for i in 0..fm.z.nrows() {
        let row: Vec<String> = (0..fm.z.ncols()).map(|k| format!(",{}", fm.z[(i, k)] as u8)).collect();
        writeln!(w, "{i}{}", row.concat())?;
    }
    w.flush()?;
    if let Some(dim) = a.locations {
        let locs = sample_locations(&tree, hp.sigma_x, dim, &mut rng)?;
        let mut w = create(&a.out_dir.join("locations.csv"))?;
        let header: Vec<String> = (0..dim).map(|d| format!("x{d}")).collect();
        writeln!(w, "node,{}", header.join(","))?;
        for (id, x) in &locs {
            let vals: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{},{}", id.0, vals.join(","))?;
        }
        w.flush()?;
    }
    if let Some(d) = a.data {
        let (data, _) = sample_data(&tree, &hp, d, &mut rng)?;
        data.to_csv(create(&a.out_dir.join("data.csv"))?)?;
    }
    println!(
        "objects={} leaves={} replicate_nodes={} stop_nodes={} nnz={}",
        a.n,
        fm.n_features(),
        tree.count_kind(NodeKind::Replicate),
        tree.count_kind(NodeKind::Stop),
        fm.nnz()
    );
    Ok(())
}

fn density(a: DensityArgs) -> Result<()> {
    let text = fs::read_to_string(&a.tree).with_context(|| format!("cannot read {}", a.tree.display()))?;
    let tree = Tree::from_json(&text)?;
    let terms = log_tree_density_terms(&tree, &a.hp.hp())?;
    println!("{}", serde_json::to_string_pretty(&terms)?);
    Ok(())
}

fn expected_leaves(a: ExpectedArgs) -> Result<()> {
    if a.n_max == 0 {
        return Err(BdtError::InvalidArgument("--n-max must be at least 1".into()).into());
    }
    let grid = if a.lambda_r_grid.is_empty() {
        vec![a.hp.lambda_r]
    } else {
        a.lambda_r_grid.clone()
    };
    let mut w = out_or_stdout(&a.out)?;
    if a.long {
        writeln!(w, "lambda_r,n,j,expected_j,expected_total")?;
    } else {
        writeln!(w, "lambda_r,n,expected_total,by_size")?;
    }
    for &lr in &grid {
        let hp = Hyperparams {
            lambda_r: lr,
            ..a.hp.hp()
        };
        hp.validate_tree()?;
        for n in 1..=a.n_max {
            let k = expected_leaf_counts(n, &hp)?;
            if a.long {
                for (j, e) in k.by_size.iter().enumerate() {
                    writeln!(w, "{lr},{n},{},{e:?},{:?}", j + 1, k.total)?;
                }
            } else {
                let sizes: Vec<String> = k.by_size.iter().map(|e| format!("{e:?}")).collect();
                writeln!(w, "{lr},{n},{:?},{}", k.total, sizes.join(";"))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ArchiveLine<'a> {
    chain: usize,
    iteration: usize,
    log_lik: f64,
    hp: &'a Hyperparams,
    tree: TreeDocument,
}

#[derive(Serialize)]
struct HeldoutReport {
    holdout: f64,
    split_seed: u64,
    heldout_entries: usize,
    samples: usize,
    test_log_density: f64,
    noise_baseline: f64,
}

fn fit(a: FitArgs) -> Result<()> {
    let file = File::open(&a.data).with_context(|| format!("cannot read {}", a.data.display()))?;
    let data = Dataset::from_csv(file)?;
    let config = a.sampler.config(a.burn_in)?;
    config.validate()?;
    if a.chains == 0 {
        return Err(BdtError::InvalidArgument("--chains must be at least 1".into()).into());
    }
    let (train, heldout) = split_heldout(&data, a.holdout, &mut stream_rng(a.split_seed, 0))?;
    fs::create_dir_all(&a.out_dir)?;
    let results: Vec<Result<Vec<ChainState>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..a.chains)
            .map(|c| {
                let cfg = SamplerConfig {
                    seed: config.seed.wrapping_add(c as u64),
                    ..config.clone()
                };
                let train = &train;
                let dir = &a.out_dir;
                s.spawn(move || -> Result<Vec<ChainState>> {
                    let mut w = create(&dir.join(format!("chain{c}.jsonl")))?;
                    let mut kept = Vec::new();
                    for state in run_chain(train, train.n(), cfg)? {
                        let state = state?;
                        let line = ArchiveLine {
                            chain: c,
                            iteration: state.iteration,
                            log_lik: state.log_lik,
                            hp: &state.hp,
                            tree: TreeDocument::from(&state.tree),
                        };
                        serde_json::to_writer(&mut w, &line)?;
                        writeln!(w)?;
                        kept.push(state);
                    }
                    w.flush()?;
                    Ok(kept)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    let mut samples = Vec::new();
    let mut summary = create(&a.out_dir.join("summary.csv"))?;
    writeln!(
        summary,
        "chain,iteration,leaves,log_lik,lambda_s,lambda_r,theta_s,theta_r,sigma_x,sigma_y"
    )?;
    for (c, r) in results.into_iter().enumerate() {
        for s in r? {
            let h = &s.hp;
            writeln!(
                summary,
                "{c},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                s.iteration,
                s.tree.count_kind(NodeKind::Leaf),
                s.log_lik,
                h.lambda_s,
                h.lambda_r,
                h.theta_s,
                h.theta_r,
                h.sigma_x,
                h.sigma_y
            )?;
            samples.push((s.tree, s.hp));
        }
    }
    summary.flush()?;
    println!("samples={}", samples.len());
    let n_held = heldout.iter().filter(|&&h| h).count();
    if n_held > 0 {
        if samples.is_empty() {
            bail!("no post-burn-in samples to evaluate the held-out entries");
        }
        let report = HeldoutReport {
            holdout: a.holdout,
            split_seed: a.split_seed,
            heldout_entries: n_held,
            samples: samples.len(),
            test_log_density: predictive_log_density(&train, &heldout, &samples)?,
            noise_baseline: noise_baseline_log_density(&train, &heldout)?,
        };
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(a.out_dir.join("heldout.json"), &json)?;
        println!("{json}");
    }
    Ok(())
}

fn geweke(a: GewekeArgs) -> Result<bool> {
    if a.samples == 0 || a.iters < a.samples {
        return Err(BdtError::InvalidArgument("need --iters >= --samples >= 1".into()).into());
    }
    let sc = a.sampler.config(a.burn_in)?;
    let config = GewekeConfig {
        n_objects: a.n,
        dim: a.dim,
        samples: a.samples,
        thinning: a.iters / a.samples,
        burn_in: a.burn_in,
        prior: sc.prior,
        seed: a.sampler.seed,
    };
    let mut kernel: Box<dyn GewekeKernel> = match a.kernel {
        KernelArg::PriorRedraw => Box::new(PriorRedraw { prior: config.prior }),
        KernelArg::Sampler => {
            let mut cfg = config.sampler_config();
            cfg.heuristics = sc.heuristics;
            cfg.heuristic_period = sc.heuristic_period;
            cfg.multiple_cap = sc.multiple_cap;
            cfg.mutation = sc.mutation;
            if a.sampler.schedule != "adaptive" {
                cfg.add_remove = sc.add_remove;
            }
            Box::new(Sampler::new(cfg)?)
        }
    };
    let report = run_geweke_suite(&config, kernel.as_mut())?;
    report.write_csv(out_or_stdout(&a.out)?)?;
    let below = report.count_below(a.alpha);
    let pass = below <= a.allowed;
    eprintln!(
        "verdict={} below_alpha={below} min_p={:.3e}",
        if pass { "pass" } else { "fail" },
        report.min_p()
    );
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(a) => simulate(a).map(|_| true),
        Cmd::Density(a) => density(a).map(|_| true),
        Cmd::ExpectedLeaves(a) => expected_leaves(a).map(|_| true),
        Cmd::Fit(a) => fit(a).map(|_| true),
        Cmd::Geweke(a) => geweke(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<BdtError>(),
                Some(BdtError::InvalidArgument(_) | BdtError::InvalidHyperparameter { .. })
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
