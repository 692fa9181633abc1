use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coldrec::data::{load_data_dir, save_data_dir, synth_generate, SynthSpec, LATENTS_FILE};
use coldrec::embeddings::{
    pixel_encode, read_pgm, save_embedding_file, tfidf_encode, EmbeddingStore, EntityKind,
    Modality, ModalityEmbedding,
};
use coldrec::experiments::{
    gradcheck_suite, run_ablation_grid, write_report, AblationConfig, ExperimentConfig,
    GridOptions, Recommender, SuiteModule,
};
use coldrec::{Error, Result};

const DEFAULT_SEED: u64 = 42;
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "coldrec",
    version,
    about = "Multimodal cold-start recommendation toolkit"
)]
struct Cli {
    /// Seed for all randomness (default 42).
    #[arg(long, global = true, env = "COLDREC_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration on every interaction of a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Score a data directory with a trained model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Also write the full metric report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write the report.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Encode text with tf-idf and PGM images by pixel pooling.
    EncodeFallback {
        /// CSV with header `entity_id,text`.
        #[arg(long)]
        text: Option<PathBuf>,
        /// Directory of `<entity_id>.pgm` files.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "item")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        vocab_size: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let generated = synth_generate(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    save_data_dir(out, &generated.dataset, &generated.embeddings)?;
    let latents = out.join(LATENTS_FILE);
    std::fs::write(&latents, serde_json::to_string(&generated.latents)? + "\n").map_err(|e| {
        Error::Io {
            path: latents.clone(),
            source: e,
        }
    })?;
    println!(
        "wrote {} users, {} items, {} interactions to {}",
        generated.dataset.num_users(),
        generated.dataset.num_items(),
        generated.dataset.interactions.len(),
        out.display()
    );
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, model_out: &Path, seed: Option<u64>) -> Result<()> {
    let config: AblationConfig = match config {
        Some(p) => read_json(p)?,
        None => AblationConfig::default(),
    };
    config.validate()?;
    let seed = seed.unwrap_or(config.seeds[0]);
    let mut bundle = load_data_dir(data)?;
    let (users_before, items_before) = (bundle.dataset.num_users(), bundle.dataset.num_items());
    bundle.dataset.include_store_entities(&bundle.embeddings);
    let cold_users: Vec<usize> = (users_before..bundle.dataset.num_users()).collect();
    let cold_items: Vec<usize> = (items_before..bundle.dataset.num_items()).collect();
    let rec = Recommender::fit(
        &config,
        &bundle.dataset,
        &bundle.embeddings,
        &bundle.dataset.interactions,
        &cold_users,
        &cold_items,
        seed,
    )?;
    rec.save(model_out)?;
    println!(
        "trained `{}` on {} interactions ({} cold users, {} cold items) -> {}",
        config.label(),
        bundle.dataset.interactions.len(),
        cold_users.len(),
        cold_items.len(),
        model_out.display()
    );
    Ok(())
}

fn evaluate(
    model: &Path,
    data: &Path,
    k: Option<usize>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let rec = Recommender::load(model)?;
    let bundle = load_data_dir(data)?;
    let k = k.unwrap_or(rec.config.k);
    if k == 0 {
        return Err(Error::Usage("--k must be at least 1".into()));
    }
    let report = rec.evaluate_bundle(&bundle, k, seed.unwrap_or(DEFAULT_SEED))?;
    println!("Models,MSE,Precision@K,NDCG");
    println!("{}", report.csv_row(&rec.config.label()));
    println!(
        "k={} users evaluated={} excluded={} pairs={}",
        report.k, report.users_evaluated, report.users_excluded, report.n
    );
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })?;
    }
    Ok(())
}

fn ablate(config: &Path, out: Option<&Path>, jobs: usize, seed: Option<u64>) -> Result<()> {
    let mut experiment = ExperimentConfig::load(config)?;
    let out = out
        .map(Path::to_path_buf)
        .or(experiment.output.clone())
        .ok_or_else(|| {
            Error::Usage("no output path: pass --out or set `output` in the config".into())
        })?;
    if jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    if let Some(s) = seed {
        for cell in &mut experiment.grid {
            cell.seeds = vec![s];
        }
    }
    let data = experiment.data.load()?;
    let rows = run_ablation_grid(&experiment.grid, &data, GridOptions { jobs })?;
    let (sidecar, timing) = write_report(&rows, &out)?;
    for r in &rows {
        if let Some(e) = &r.error {
            eprintln!("cell `{}` failed: {e}", r.label);
        }
    }
    println!(
        "wrote {} rows to {} ({}, {})",
        rows.len(),
        out.display(),
        sidecar.display(),
        timing.display()
    );
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(module: &str, seed: Option<u64>) -> Result<bool> {
    let module: SuiteModule = module.parse()?;
    let results = gradcheck_suite(module, seed.unwrap_or(DEFAULT_SEED))?;
    let mut ok = true;
    let modules: BTreeSet<&str> = results.iter().map(|r| r.module.as_str()).collect();
    for r in &results {
        let pass = r.report.max_relative_error < GRAD_TOLERANCE;
        ok &= pass;
        println!(
            "{:<9} {:<40} coords={:<5} max_rel_err={:.3e} {}",
            r.module.as_str(),
            r.check,
            r.report.coordinates,
            r.report.max_relative_error,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    for m in modules {
        let worst = results
            .iter()
            .filter(|r| r.module.as_str() == m)
            .map(|r| r.report.max_relative_error)
            .fold(0.0, f64::max);
        println!("module {m}: max relative error {worst:.3e}");
    }
    Ok(ok)
}

fn encode_fallback(
    text: Option<&Path>,
    images: Option<&Path>,
    out: &Path,
    kind: &str,
    vocab: usize,
) -> Result<()> {
    let kind = match kind {
        "user" => EntityKind::User,
        "item" => EntityKind::Item,
        other => {
            return Err(Error::Usage(format!(
                "--kind must be user or item, got `{other}`"
            )))
        }
    };
    if text.is_none() && images.is_none() {
        return Err(Error::Usage("pass --text, --images, or both".into()));
    }
    let mut store = EmbeddingStore::new();
    if let Some(path) = text {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["entity_id", "text"] {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header `entity_id,text`, found `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut corpus = Vec::new();
        for record in reader.records() {
            let record = record?;
            corpus.push((record[0].to_string(), record[1].to_string()));
        }
        for (id, v) in tfidf_encode(&corpus, vocab)? {
            store.insert(ModalityEmbedding::new(id, kind, Modality::Text, v))?;
        }
    }
    if let Some(dir) = images {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let v = pixel_encode(&read_pgm(&p)?)?;
            store.insert(ModalityEmbedding::new(id, kind, Modality::Image, v))?;
        }
    }
    save_embedding_file(&store, out)?;
    println!("wrote {} embeddings to {}", store.len(), out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match &cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), out, seed).map(|_| true),
        Command::Train {
            data,
            config,
            model_out,
        } => train(data, config.as_deref(), model_out, seed).map(|_| true),
        Command::Evaluate {
            model,
            data,
            k,
            out,
        } => evaluate(model, data, *k, out.as_deref(), seed).map(|_| true),
        Command::Ablate { config, out, jobs } => {
            ablate(config, out.as_deref(), *jobs, seed).map(|_| true)
        }
        Command::Gradcheck { module } => gradcheck(module, seed),
        Command::EncodeFallback {
            text,
            images,
            out,
            kind,
            vocab_size,
        } => encode_fallback(text.as_deref(), images.as_deref(), out, kind, *vocab_size)
            .map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                eprintln!("usage: coldrec [--seed N] <synth|train|evaluate|ablate|gradcheck|encode-fallback> [flags]");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
