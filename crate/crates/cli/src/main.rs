use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ptfsr_core::client::{upload_budget, ClientState};
use ptfsr_core::data::{self, cache, synth_corpus, Corpus, CsvSchema, PreprocessConfig};
use ptfsr_core::eval::{self, ablation_grid, write_metrics_csv, Axis, EvalResult, Split};
use ptfsr_core::protocol::{
    self, comm_summary, evaluate_private, write_reports, Mode, ProtocolConfig, RoundReport,
};
use ptfsr_core::seqmodels::checkpoint;

#[derive(Parser)]
#[command(
    name = "ptfsr",
    version,
    about = "Parameter-transmission-free federated sequential recommendation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write report.ndjson, comm.csv, metrics.csv and a checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Corpus cache or interaction CSV; defaults to a synthetic corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 50)]
        items: usize,
    },
    /// Score a model checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train each client once and print its perturbed upload (one JSON line per user).
    Perturb {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus (`.csv` writes raw interactions, anything else a cache).
    Synth {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one knob of the protocol and write the table as CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 50)]
        items: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(cache::MAGIC) {
        return Ok(cache::decode(&bytes)?);
    }
    let raw = data::load_csv(path, &CsvSchema::default())?;
    Ok(data::preprocess(&raw, PreprocessConfig::default())?)
}

fn corpus_or_synth(path: Option<&Path>, users: usize, items: usize, seed: u64) -> Result<Corpus> {
    match path {
        Some(p) => load_corpus(p),
        None => Ok(synth_corpus(users, items, seed)?.corpus),
    }
}

fn read_config(path: &Path) -> Result<ProtocolConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ProtocolConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_outputs(
    out: &Path,
    reports: &[RoundReport],
    ledger: &protocol::CommLedger,
    extra: &[EvalResult],
) -> Result<()> {
    write_reports(create(&out.join("report.ndjson"))?, reports)?;
    ledger.write_csv(create(&out.join("comm.csv"))?)?;
    let last = reports.last().map_or(0, |r| r.round);
    let mut rows: Vec<(u32, &EvalResult)> = reports
        .iter()
        .filter_map(|r| r.eval.as_ref().map(|e| (r.round, e)))
        .collect();
    rows.extend(extra.iter().map(|e| (last, e)));
    write_metrics_csv(create(&out.join("metrics.csv"))?, &rows, true)?;
    Ok(())
}

fn run(
    config: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    out: &Path,
    corpus: Option<&Path>,
    users: usize,
    items: usize,
) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let corpus = corpus_or_synth(corpus, users, items, cfg.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log::info!(
        "{} users, {} items, mode {}, {} rounds",
        corpus.num_users(),
        corpus.num_items,
        cfg.mode,
        cfg.global_rounds
    );
    match cfg.mode {
        Mode::Ptf => {
            let o = protocol::run_ptf(&corpus, &cfg)?;
            let private = evaluate_private(&o.server, &corpus, cfg.eval_k, Split::Test)?;
            write_outputs(out, &o.reports, &o.ledger, &[private])?;
            checkpoint::save(o.server.model(), out.join("checkpoint.ptfm"))?;
            print_summary(&o.ledger, o.reports.last())?;
        }
        Mode::Fedavg => {
            let o = protocol::run_fedavg_baseline(&corpus, &cfg)?;
            write_outputs(out, &o.reports, &o.ledger, &[])?;
            checkpoint::save(&o.model, out.join("checkpoint.ptfm"))?;
            print_summary(&o.ledger, o.reports.last())?;
        }
        Mode::Local => {
            let o = protocol::local_only_baseline(&corpus, &cfg)?;
            write_outputs(
                out,
                &o.reports,
                &protocol::CommLedger::new(Mode::Local),
                &[],
            )?;
            log::warn!("local mode keeps one model per client; no checkpoint written");
            println!("{}", serde_json::to_string(&o.result)?);
        }
    }
    Ok(())
}

fn print_summary(ledger: &protocol::CommLedger, last: Option<&RoundReport>) -> Result<()> {
    println!("{}", serde_json::to_string(&comm_summary(ledger))?);
    if let Some(e) = last.and_then(|r| r.eval.as_ref()) {
        println!("{}", serde_json::to_string(e)?);
    }
    Ok(())
}

fn perturb(corpus: &Path, beta: f64, eps: f64, seed: u64, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let cfg = ProtocolConfig {
        beta,
        epsilon: eps,
        seed,
        ..ProtocolConfig::default()
    };
    cfg.validate()?;
    let ccfg = cfg.client_config();
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for seq in &corpus.sequences {
        let mut c = ClientState::new(seq.clone(), cfg.client_model_config(corpus.num_items), seed)?;
        c.client_train(0, &ccfg)?;
        let up = c.build_upload(0, &ccfg)?;
        let line = serde_json::json!({
            "user": corpus.user_name(up.user),
            "items": up.items.iter().map(|&i| corpus.item_name(i)).collect::<Vec<_>>(),
            "bytes": up.encoded_len(),
            "epsilon_total": upload_budget(up.items.len(), beta, eps),
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn synth(users: usize, items: usize, seed: u64, out: &Path) -> Result<()> {
    let corpus = synth_corpus(users, items, seed)?.corpus;
    if out.extension().is_some_and(|e| e == "csv") {
        data::write_csv(out, &CsvSchema::default(), &corpus.to_raw())?;
    } else {
        cache::save(&corpus, out)?;
    }
    eprintln!(
        "{} users, {} items, mean train length {:.2} → {}",
        corpus.num_users(),
        corpus.num_items,
        corpus.mean_train_len(),
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        // A closed stdout (e.g. piped into `head`) is not a failure.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            Ok(())
        }
        r => r,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            mode,
            seed,
            out,
            corpus,
            users,
            items,
        } => run(&config, mode, seed, &out, corpus.as_deref(), users, items),
        Command::Eval {
            checkpoint: path,
            corpus,
            k,
            split,
        } => {
            let model =
                checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let corpus = load_corpus(&corpus)?;
            if model.num_items() != corpus.num_items {
                bail!(
                    "checkpoint scores {} items but the corpus has {}",
                    model.num_items(),
                    corpus.num_items
                );
            }
            let mut r = eval::evaluate(&model, &corpus, k, split)?;
            r.mode = "checkpoint".into();
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
        Command::Perturb {
            corpus,
            beta,
            eps,
            seed,
            out,
        } => perturb(&corpus, beta, eps, seed, out.as_deref()),
        Command::Synth {
            users,
            items,
            seed,
            out,
        } => synth(users, items, seed, &out),
        Command::Ablate {
            config,
            axis,
            values,
            corpus,
            users,
            items,
            out,
        } => {
            let cfg = read_config(&config)?;
            let corpus = corpus_or_synth(corpus.as_deref(), users, items, cfg.seed)?;
            let table = ablation_grid(&corpus, &cfg, axis, &values)?;
            match out {
                Some(p) => table.write_csv(create(&p)?)?,
                None => table.write_csv(std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}
