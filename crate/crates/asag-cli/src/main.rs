//! Single executable for the whole workflow: synthetic data generation,
//! training, evaluation, one-off grading, and gradient self-checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! error, 3 numeric failure.

mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use asag_core::checks::run_gradient_checks;
use asag_core::data::{
    build_vocab, generate_synthetic_dataset, load_embeddings, pad_truncate, read_dataset,
    split_dataset, tokenize, write_dataset, SyntheticSpec, UNK_TOKEN,
};
use asag_core::eval::evaluate_model;
use asag_core::model::{forward_pair, init_params, ModelParams};
use asag_core::train::{
    fit_with_progress, load_checkpoint, load_vocab_sidecar, save_checkpoint, set_global_seed,
    write_vocab_sidecar,
};
use asag_core::{Error, Result};
use run_config::{parse_set_flag, RunConfig};

#[derive(Parser)]
#[command(
    name = "asag",
    about = "Grade short student answers against reference answers with a multiway-attention network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic answer-pair corpus and split it into
    /// train/validation/test files
    GenData {
        /// Output directory for train.tsv, validation.tsv, test.tsv
        #[arg(long)]
        out: PathBuf,
        /// Total number of pairs; must split evenly into balanced halves
        /// per reference
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Fraction of ambiguous, hard-to-classify answers
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Number of distinct reference answers
        #[arg(long, default_value_t = 20)]
        references: usize,
        /// Keywords per reference answer
        #[arg(long, default_value_t = 5)]
        keywords: usize,
        /// Token pool size
        #[arg(long, default_value_t = 240)]
        vocab_size: usize,
        /// Percentage split, e.g. 70,10,20
        #[arg(long, default_value = "70,10,20")]
        split: String,
    },
    /// Train on a generated or hand-written dataset directory
    Train {
        /// Directory holding train.tsv and validation.tsv
        #[arg(long)]
        data_dir: PathBuf,
        /// Output directory for checkpoints, vocabulary, and metrics
        #[arg(long)]
        out_dir: PathBuf,
        /// Flat key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override of any config key, repeatable
        #[arg(long = "set", value_parser = parse_set_flag_clap)]
        set: Vec<(String, String)>,
        /// Shorthand for --set epochs=N (wins over the file)
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for --set seed=N (wins over the file)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Grade one student answer against one reference answer
    Grade {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        student: String,
        #[arg(long)]
        reference: String,
    },
    /// Run the finite-difference gradient checks at the tiny verification
    /// configuration
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Optional config file; only validated and used for its seed
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_set_flag_clap(raw: &str) -> std::result::Result<(String, String), String> {
    parse_set_flag(raw).map_err(|e| e.to_string())
}

fn exit_class(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidLabel(_) => 1,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::EmptyInput(_)
        | Error::TokenIdOutOfRange { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version requests are successes, anything else is a
            // usage error
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_class(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            pairs,
            seed,
            noise,
            references,
            keywords,
            vocab_size,
            split,
        } => cmd_gen_data(out, pairs, seed, noise, references, keywords, vocab_size, &split),
        Command::Train {
            data_dir,
            out_dir,
            config,
            set,
            epochs,
            seed,
        } => cmd_train(data_dir, out_dir, config, set, epochs, seed),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Grade {
            checkpoint,
            student,
            reference,
        } => cmd_grade(&checkpoint, &student, &reference),
        Command::Gradcheck { seed, config } => cmd_gradcheck(seed, config),
    }
}

fn parse_split(raw: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad split component {p:?}")))
        })
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] if a + b + c == 100 => Ok([a, b, c]),
        _ => Err(Error::Config(format!(
            "--split must be three percentages summing to 100, got {raw:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    out: PathBuf,
    pairs: usize,
    seed: u64,
    noise: f64,
    references: usize,
    keywords: usize,
    vocab_size: usize,
    split: &str,
) -> Result<()> {
    let split = parse_split(split)?;
    if references == 0 || pairs % references != 0 || (pairs / references) % 2 != 0 {
        return Err(Error::Config(format!(
            "--pairs {pairs} must be an even multiple of --references {references} \
             so labels balance exactly"
        )));
    }
    let spec = SyntheticSpec {
        vocab_size,
        references,
        keywords,
        pairs_per_reference: pairs / references,
        noise_rate: noise,
    };
    let streams = set_global_seed(seed);
    let pairs = generate_synthetic_dataset(&spec, &mut streams.stream("generator"))?;
    let [train, validation, test] =
        split_dataset(pairs, split, &mut streams.stream("split-shuffle"));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        context: format!("creating {}", out.display()),
        source: e,
    })?;
    for (name, subset) in [
        ("train.tsv", &train),
        ("validation.tsv", &validation),
        ("test.tsv", &test),
    ] {
        let path = out.join(name);
        write_dataset(subset, &path)?;
        println!("wrote {} pairs to {}", subset.len(), path.display());
    }
    Ok(())
}

fn cmd_train(
    data_dir: PathBuf,
    out_dir: PathBuf,
    config_file: Option<PathBuf>,
    mut overrides: Vec<(String, String)>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(e) = epochs {
        overrides.push(("epochs".into(), e.to_string()));
    }
    if let Some(s) = seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let run = RunConfig::load(config_file.as_deref(), &overrides)?;

    let train_pairs = read_dataset(&data_dir.join("train.tsv"))?;
    let val_pairs = read_dataset(&data_dir.join("validation.tsv"))?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} holds an empty train or validation split",
            data_dir.display()
        )));
    }
    let vocab = build_vocab(&train_pairs, run.min_count);

    let mut model_config = run.model.clone();
    model_config.vocab_size = vocab.len();
    let streams = set_global_seed(model_config.seed);
    let params: ModelParams = init_params(&model_config, &mut streams.stream("init"))?;
    if let Some(embeddings) = &run.embeddings {
        let (table, coverage) =
            load_embeddings::<f64>(embeddings, &vocab, &mut streams.stream("embeddings"))?;
        if table.shape()[1] != model_config.d_emb {
            return Err(Error::Config(format!(
                "embedding file dimension {} does not match d_emb {}",
                table.shape()[1],
                model_config.d_emb
            )));
        }
        params.embedding.set_data(table.to_vec())?;
        println!("embeddings: coverage {:.1}% of vocabulary", coverage * 100.0);
    }

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        context: format!("creating {}", out_dir.display()),
        source: e,
    })?;
    println!(
        "training on {} pairs (validation {}), vocabulary {} tokens",
        train_pairs.len(),
        val_pairs.len(),
        vocab.len()
    );
    let (report, best) = fit_with_progress(
        &run.train,
        &params,
        &vocab,
        &train_pairs,
        &val_pairs,
        &mut |record| {
            println!("{}", record.console_line());
            std::ops::ControlFlow::Continue(())
        },
    )?;

    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(&params, &final_path)?;
    best.restore(&params)?;
    let best_path = out_dir.join("best.ckpt");
    save_checkpoint(&params, &best_path)?;
    write_vocab_sidecar(&vocab, &best_path)?;
    let metrics_path = out_dir.join("metrics.tsv");
    std::fs::write(&metrics_path, report.metrics_file()).map_err(|e| Error::Io {
        context: format!("writing {}", metrics_path.display()),
        source: e,
    })?;
    match report.best_epoch {
        Some(epoch) => println!(
            "best validation AUC {:.4} at epoch {epoch}; wrote {} and {}",
            best.val_auc,
            best_path.display(),
            final_path.display()
        ),
        None => println!(
            "no training epochs ran; wrote initialized {} and {}",
            best_path.display(),
            final_path.display()
        ),
    }
    Ok(())
}

fn cmd_eval(checkpoint: &std::path::Path, data: &std::path::Path) -> Result<()> {
    let metrics = evaluate_model(checkpoint, data)?;
    println!(
        "n {}  accuracy {:.6}  auc {:.6}  positives {:.1}%",
        metrics.n,
        metrics.accuracy,
        metrics.auc,
        metrics.positive_fraction * 100.0
    );
    println!("{}", metrics.machine_line(&data.display().to_string()));
    Ok(())
}

fn cmd_grade(
    checkpoint: &std::path::Path,
    student: &str,
    reference: &str,
) -> Result<()> {
    let params: ModelParams = load_checkpoint(checkpoint)?;
    let vocab = load_vocab_sidecar(checkpoint)?;
    let max_len = params.config.max_len;
    // an empty text grades as a single UNK token, never as a fully
    // masked sequence
    let encode = |text: &str| {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(UNK_TOKEN.to_string());
        }
        pad_truncate(&tokens, &vocab, max_len)
    };
    let (student_ids, student_mask) = encode(student);
    let (reference_ids, reference_mask) = encode(reference);
    let probs = forward_pair(
        &params,
        &student_ids,
        &student_mask,
        &reference_ids,
        &reference_mask,
        None,
    )?;
    let p_right = probs.data()[1];
    let verdict = if p_right >= 0.5 { "right" } else { "wrong" };
    println!("p_right={p_right:.6}\tverdict={verdict}");
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>, config_file: Option<PathBuf>) -> Result<()> {
    let seed = match (seed, &config_file) {
        (Some(s), _) => s,
        (None, Some(path)) => RunConfig::load(Some(path), &[])?.model.seed,
        (None, None) => 0,
    };
    let start = Instant::now();
    let results = run_gradient_checks(seed)?;
    let mut all_passed = true;
    for result in &results {
        println!("{}", result.line());
        all_passed &= result.passed();
    }
    println!(
        "{} checks in {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if all_passed {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "gradient checks exceeded tolerance".into(),
        })
    }
}
