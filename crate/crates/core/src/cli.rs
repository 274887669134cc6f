//! The `fedprune` command line.
//!
//! Settings are layered: defaults, then `--config` (or `--manifest`), then the
//! named flags, then `--set key=value` in the order given. The effective
//! configuration is written as `manifest.txt` in the output directory and can
//! be passed back with `--manifest` to replay the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapters::{checkpoint_file_name, load_checkpoint};
use crate::data::partition_csv;
use crate::error::{Error, Result};
use crate::federation::{MaskRegistry, RunConfig, Simulation};
use crate::metrics::{
    final_eval_csv, mean_perplexity, masks_from_str, similarity_matrix, write_text, SiteSelector,
};

#[derive(Parser, Debug)]
#[command(
    name = "fedprune",
    version,
    about = "Federated LoRA tuning with per-client mask search and personalized aggregation",
    after_help = "Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 numeric, 6 io, 7 protocol/logic."
)]
struct Cli {
    /// Worker threads for per-client work; never changes outputs
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Partition the corpus and write partition.csv
    Partition(RunArgs),
    /// Run the per-client mask search and write masks and their similarity
    Search(RunArgs),
    /// Search, then run the federated rounds
    Train(RunArgs),
    /// Re-evaluate the adapters saved by a finished run
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Output CSV (default: <run>/eval.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity matrix from the mask files of a run
    Masks {
        #[arg(long)]
        run: PathBuf,
        /// `all` or a site such as `l0q`
        #[arg(long, default_value = "all")]
        site: String,
        /// Output CSV (default: <run>/similarity.csv, or similarity_<site>.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat `key = value` config file
    #[arg(long, visible_alias = "manifest")]
    config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// first | second | mixed
    #[arg(long)]
    metric: Option<String>,
    /// pathological | dirichlet
    #[arg(long)]
    partition: Option<String>,
    /// literal | overlap
    #[arg(long)]
    aggregation: Option<String>,
    /// Small,Medium,Large level ranks, e.g. 8,12,16
    #[arg(long)]
    hetero_ranks: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text)?;
        }
        let flags: [(&str, Option<String>); 9] = [
            ("clients", self.clients.map(|v| v.to_string())),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("rank", self.rank.map(|v| v.to_string())),
            ("sparsity", self.sparsity.map(|v| v.to_string())),
            ("metric", self.metric.clone()),
            ("partition", self.partition.clone()),
            ("aggregation", self.aggregation.clone()),
            ("hetero_ranks", self.hetero_ranks.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got '{o}'")))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn cmd_partition(args: &RunArgs, workers: usize) -> Result<()> {
    let sim = Simulation::new(args.config()?, workers)?;
    write_text(&args.out.join("manifest.txt"), &sim.config().to_manifest())?;
    write_text(&args.out.join("partition.csv"), &partition_csv(sim.partition()))?;
    for c in sim.clients() {
        println!("client {:>4}: {} train, {} eval", c.id, c.train.len(), c.eval.len());
    }
    println!("wrote {}", args.out.join("partition.csv").display());
    Ok(())
}

fn cmd_search(args: &RunArgs, workers: usize) -> Result<()> {
    let mut sim = Simulation::new(args.config()?, workers)?;
    let searches = sim.search()?;
    sim.write_setup(&args.out)?;
    for s in &searches {
        if let Some(last) = s.kept.last() {
            let kept: usize = last.values().map(|(a, b)| a + b).sum();
            println!("client {:>4}: {kept} entries kept", s.client);
        } else {
            println!("client {:>4}: dense, no search", s.client);
        }
    }
    println!("wrote masks to {}", args.out.join("masks").display());
    Ok(())
}

fn cmd_train(args: &RunArgs, workers: usize) -> Result<()> {
    let mut sim = Simulation::new(args.config()?, workers)?;
    let outcome = sim.run()?;
    sim.write_outputs(&outcome, &args.out)?;
    if let Some(p) = outcome.final_mean_perplexity() {
        println!("final mean eval perplexity {p:.4}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(run: &Path, out: Option<PathBuf>, workers: usize) -> Result<()> {
    let manifest = run.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let config = RunConfig::from_text(&text)?;
    let rounds = config.rounds;
    let mut sim = Simulation::new(config, workers)?;
    let adir = run.join("adapters");
    for client in sim.clients_mut() {
        for (site, pair) in client.adapters.iter_mut() {
            let loaded = load_checkpoint(&adir.join(checkpoint_file_name(client.id, *site)))?;
            if loaded.a.shape() != pair.a.shape() || loaded.site != *site {
                return Err(Error::data(format!(
                    "checkpoint for client {} site {site} does not match the manifest",
                    client.id
                )));
            }
            *pair = loaded;
        }
    }
    let reports = sim.evaluate_all(rounds)?;
    let out = out.unwrap_or_else(|| run.join("eval.csv"));
    write_text(&out, &final_eval_csv(&reports))?;
    if let Some(p) = mean_perplexity(&reports) {
        println!("mean eval perplexity {p:.4} over {} clients", reports.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn read_registry(run: &Path) -> Result<MaskRegistry> {
    let dir = run.join("masks");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "masks"))
        .collect();
    paths.sort();
    let mut registry = MaskRegistry::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let (client, masks) = masks_from_str(&text)?;
        if registry.insert(client, masks).is_some() {
            return Err(Error::data(format!("client {client} has two mask files")));
        }
    }
    Ok(registry)
}

fn cmd_masks(run: &Path, site: &str, out: Option<PathBuf>) -> Result<()> {
    let selector = SiteSelector::parse(site)?;
    let registry = read_registry(run)?;
    let ids: Vec<usize> = registry.keys().copied().collect();
    let sim = similarity_matrix(&registry, &ids, selector)?;
    let default_name = match selector {
        SiteSelector::All => "similarity.csv".to_string(),
        SiteSelector::One(s) => format!("similarity_{s}.csv"),
    };
    let out = out.unwrap_or_else(|| run.join(default_name));
    write_text(&out, &sim.to_csv())?;
    println!(
        "{} clients, off-diagonal std {:.4}; wrote {}",
        ids.len(),
        sim.off_diagonal_std(),
        out.display()
    );
    Ok(())
}

/// Parses `argv` (including the program name), runs the subcommand, and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let workers = cli.workers;
    let result = match &cli.command {
        Command::Partition(a) => cmd_partition(a, workers),
        Command::Search(a) => cmd_search(a, workers),
        Command::Train(a) => cmd_train(a, workers),
        Command::Eval { run, out } => cmd_eval(run, out.clone(), workers),
        Command::Masks { run, site, out } => cmd_masks(run, site, out.clone()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fedprune: {e}");
            e.exit_code()
        }
    }
}
