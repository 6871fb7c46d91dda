use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relex::corpus::{load_dataset, DatasetStats, Instance, RelationVocab, Split};
use relex::error::{Error, Result};
use relex::eval::inspect_attention;
use relex::manifest::{load_checkpoint, save_checkpoint, sha256_file};
use relex::pipeline::{
    annotated_record, evaluate_instances, run_ablation, train_from_instances, Profile,
    RunSettings,
};
use relex::report::{
    attention_table, read_pr_csv, write_attention_svg, write_pr_csv, write_pr_svg, MetricsReport,
};
use relex::sentrep::Ablation;
use relex::structinput::structured_input;
use relex::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "relex", version, about = "Distantly-supervised relation extraction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw records and annotate them with dependency path indices.
    Prepare {
        /// Line-delimited record file to read.
        #[arg(long)]
        input: PathBuf,
        /// Annotated record file to write.
        #[arg(long)]
        output: PathBuf,
        /// Split the records belong to (affects bagging statistics).
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Train a model and save a checkpoint directory.
    Train {
        /// Prepared training records.
        #[arg(long)]
        train_data: PathBuf,
        /// Checkpoint directory to create.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Score a test split against a checkpoint and write metrics files.
    Eval {
        /// Checkpoint directory from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared test records.
        #[arg(long)]
        test_data: PathBuf,
        /// Directory for metrics.json and pr_curve.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Overlay precision-recall curves from one or more eval runs.
    Plot {
        /// pr_curve.csv files to overlay.
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        /// Legend label per curve, in order; defaults to the file stem.
        #[arg(long)]
        label: Vec<String>,
        #[arg(long, default_value = "pr_curves.svg")]
        output: PathBuf,
    },
    /// Print relation-attention weights for one instance.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record file containing the instance.
        #[arg(long)]
        data: PathBuf,
        /// Instance id to inspect.
        #[arg(long)]
        instance: String,
        /// Also render the weights as an SVG heat map.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train and evaluate every model variant; emit the comparison table.
    Ablate {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// Directory for ablation.json.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Generate a pattern-planted corpus with controllable label noise.
    MakeSynthetic {
        /// Directory for train.jsonl and test.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        relations: Option<usize>,
        #[arg(long)]
        train_bags: Option<usize>,
        #[arg(long)]
        test_bags: Option<usize>,
        /// Fraction of train bags whose label is resampled.
        #[arg(long)]
        noise: Option<f64>,
        /// Fraction of bags labeled NA.
        #[arg(long)]
        na_fraction: Option<f64>,
        #[arg(long)]
        min_sentences: Option<usize>,
        #[arg(long)]
        max_sentences: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Run settings resolve in three layers: built-in defaults, then the TOML
/// config file, then these flags.
#[derive(Args)]
struct SettingsArgs {
    /// TOML settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder size: tiny | bert-base.
    #[arg(long)]
    profile: Option<Profile>,
    /// Variant: full | no_rel_emb | no_entity_types | no_rel_attn | sdp_input.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Fine-tune only the last k encoder layers.
    #[arg(long)]
    fine_tune_last_k: Option<usize>,
    #[arg(long)]
    max_seq_length: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Bags per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SettingsArgs {
    fn resolve(&self) -> Result<RunSettings> {
        let mut s = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunSettings::default(),
        };
        if let Some(v) = self.profile {
            s.profile = v;
        }
        if let Some(v) = self.ablation {
            s.ablation = v;
        }
        if self.fine_tune_last_k.is_some() {
            s.fine_tune_last_k = self.fine_tune_last_k;
        }
        if let Some(v) = self.max_seq_length {
            s.max_seq_length = v;
        }
        if let Some(v) = self.epochs {
            s.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            s.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            s.train.learning_rate = v;
        }
        if let Some(v) = self.dropout {
            s.train.dropout = v;
        }
        if let Some(v) = self.weight_decay {
            s.train.weight_decay = v;
        }
        if let Some(v) = self.seed {
            s.train.seed = v;
        }
        s.train.validate()?;
        Ok(s)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Prepare { input, output, split } => cmd_prepare(&input, &output, split),
        Command::Train { train_data, out_dir, settings } => {
            cmd_train(&train_data, &out_dir, &settings.resolve()?)
        }
        Command::Eval { checkpoint, test_data, out_dir } => {
            cmd_eval(&checkpoint, &test_data, &out_dir)
        }
        Command::Plot { curves, label, output } => cmd_plot(&curves, &label, &output),
        Command::InspectAttention { checkpoint, data, instance, svg } => {
            cmd_inspect(&checkpoint, &data, &instance, svg.as_deref())
        }
        Command::Ablate { train_data, test_data, out_dir, settings } => {
            cmd_ablate(&train_data, &test_data, &out_dir, &settings.resolve()?)
        }
        Command::MakeSynthetic {
            out_dir,
            relations,
            train_bags,
            test_bags,
            noise,
            na_fraction,
            min_sentences,
            max_sentences,
            seed,
        } => {
            let mut config = SynthConfig::default();
            if let Some(v) = relations {
                config.num_relations = v;
            }
            if let Some(v) = train_bags {
                config.train_bags = v;
            }
            if let Some(v) = test_bags {
                config.test_bags = v;
            }
            if let Some(v) = noise {
                config.noise = v;
            }
            if let Some(v) = na_fraction {
                config.na_fraction = v;
            }
            if let Some(v) = min_sentences {
                config.min_sentences = v;
            }
            if let Some(v) = max_sentences {
                config.max_sentences = v;
            }
            if let Some(v) = seed {
                config.seed = v;
            }
            cmd_make_synthetic(&out_dir, &config)
        }
    }
}

/// Loads, validates, and re-emits records with stp/sdp annotations attached.
/// Malformed records are reported and skipped; their count decides the exit.
fn cmd_prepare(input: &Path, output: &Path, split: Split) -> Result<u8> {
    let dataset = load_dataset(input, split)?;
    for err in &dataset.report.errors {
        eprintln!("line {}: {}", err.line, err.reason);
    }

    let file = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = BufWriter::new(file);
    let mut kept: Vec<Instance> = Vec::with_capacity(dataset.instances.len());
    let mut annotate_failures = 0usize;
    for inst in dataset.instances {
        match annotated_record(&inst) {
            Ok(rec) => {
                let line = serde_json::to_string(&rec)
                    .map_err(|e| Error::Record { line: 0, reason: e.to_string() })?;
                writeln!(w, "{line}").map_err(|e| Error::io(output, e))?;
                kept.push(inst);
            }
            Err(e) => {
                eprintln!("instance {}: {e}", inst.id);
                annotate_failures += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(output, e))?;

    let rejected = dataset.report.rejected() + annotate_failures;
    let stats = DatasetStats::compute(&kept, split, rejected);
    println!("split: {}", stats.split);
    println!("sentences: {}", stats.sentences);
    println!("entity pairs: {}", stats.entity_pairs);
    println!("relation mentions: {}", stats.relation_mentions);
    println!("rejected records: {}", stats.rejected_records);
    Ok(if rejected == 0 { 0 } else { 3 })
}

/// Fails when the file held malformed records: training data must be clean,
/// so run `prepare` first.
fn load_clean(path: &Path, split: Split) -> Result<Vec<Instance>> {
    let dataset = load_dataset(path, split)?;
    if !dataset.report.errors.is_empty() {
        for err in &dataset.report.errors {
            eprintln!("line {}: {}", err.line, err.reason);
        }
        return Err(Error::Input(format!(
            "{}: {} malformed records; run prepare first",
            path.display(),
            dataset.report.errors.len()
        )));
    }
    Ok(dataset.instances)
}

fn cmd_train(train_data: &Path, out_dir: &Path, settings: &RunSettings) -> Result<u8> {
    let instances = load_clean(train_data, Split::Train)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let run = train_from_instances(&instances, settings, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let mut manifest = run.manifest();
    manifest
        .data_hashes
        .insert("train".to_string(), sha256_file(train_data)?);
    save_checkpoint(out_dir, &run.model, &run.tokenizer, &mut manifest)?;

    let final_loss = run.report.logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps ({} warmup), final loss {final_loss:.6}",
        run.report.total_steps, run.report.warmup_steps
    );
    println!("checkpoint: {}", out_dir.display());
    println!("config hash: {}", manifest.config_hash);
    Ok(0)
}

fn cmd_eval(checkpoint: &Path, test_data: &Path, out_dir: &Path) -> Result<u8> {
    let (model, tokenizer, manifest) = load_checkpoint(checkpoint)?;
    let vocab = RelationVocab::from_ordered(manifest.relations.clone())?;
    let instances = load_clean(test_data, Split::Test)?;
    let outcome =
        evaluate_instances(&model, &tokenizer, &vocab, &instances, manifest.max_seq_length)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = MetricsReport::new(&outcome.metrics, &outcome.distribution, &manifest.config_hash);
    report
        .data_hashes
        .insert("test".to_string(), sha256_file(test_data)?);
    report.save(&out_dir.join("metrics.json"))?;
    write_pr_csv(&out_dir.join("pr_curve.csv"), &outcome.curve)?;

    println!("auc: {:.4}", outcome.metrics.auc);
    println!("positives: {}", outcome.metrics.total_positives);
    println!("predictions: {}", outcome.metrics.predictions);
    for (n, p) in &outcome.metrics.p_at {
        println!("p@{n}: {p:.4}");
    }
    println!("top relations:");
    for (label, count) in &outcome.distribution {
        println!("  {label}: {count}");
    }
    println!("metrics: {}", out_dir.join("metrics.json").display());
    Ok(0)
}

fn cmd_plot(curves: &[PathBuf], labels: &[String], output: &Path) -> Result<u8> {
    if !labels.is_empty() && labels.len() != curves.len() {
        return Err(Error::Config(format!(
            "{} labels for {} curves",
            labels.len(),
            curves.len()
        )));
    }
    let mut named = Vec::with_capacity(curves.len());
    for (i, path) in curves.iter().enumerate() {
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("curve {i}"))
        });
        named.push((label, read_pr_csv(path)?));
    }
    write_pr_svg(output, &named)?;
    println!("plot: {}", output.display());
    Ok(0)
}

fn cmd_inspect(
    checkpoint: &Path,
    data: &Path,
    instance_id: &str,
    svg: Option<&Path>,
) -> Result<u8> {
    let (model, tokenizer, manifest) = load_checkpoint(checkpoint)?;
    let instances = load_clean(data, Split::Test)?;
    let inst = instances
        .iter()
        .find(|i| i.id == instance_id)
        .ok_or_else(|| Error::Input(format!("no instance {instance_id:?} in {}", data.display())))?;
    let ablation = manifest.ablation()?;
    let input = structured_input(
        inst,
        &tokenizer,
        ablation.path_mode(),
        ablation.use_entity_types(),
        manifest.max_seq_length,
    )?;
    let rows = inspect_attention(&model, &tokenizer, &input)?;
    print!("{}", attention_table(&rows));
    if let Some(path) = svg {
        write_attention_svg(path, &rows)?;
        println!("heat map: {}", path.display());
    }
    Ok(0)
}

fn cmd_ablate(
    train_data: &Path,
    test_data: &Path,
    out_dir: &Path,
    settings: &RunSettings,
) -> Result<u8> {
    let train_insts = load_clean(train_data, Split::Train)?;
    let test_insts = load_clean(test_data, Split::Test)?;
    let mut progress = std::io::stderr();
    let rows = run_ablation(&train_insts, &test_insts, settings, Some(&mut progress))?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join("ablation.json");
    let mut text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    println!("{:<16} {:>8}  p@n", "variant", "auc");
    for row in &rows {
        let p_at: String = row
            .p_at
            .iter()
            .map(|(n, p)| format!("p@{n}={p:.3}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{:<16} {:>8.4}  {}", row.flag, row.auc, p_at);
    }
    println!("table: {}", json_path.display());
    Ok(0)
}

fn cmd_make_synthetic(out_dir: &Path, config: &SynthConfig) -> Result<u8> {
    let corpus = synth::generate(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_path = out_dir.join("train.jsonl");
    let test_path = out_dir.join("test.jsonl");
    let train: Vec<Instance> = corpus.train.iter().map(|r| r.clone().into_instance()).collect();
    let test: Vec<Instance> = corpus.test.iter().map(|r| r.clone().into_instance()).collect();
    relex::pipeline::write_annotated(&train_path, &train)?;
    relex::pipeline::write_annotated(&test_path, &test)?;
    println!(
        "train: {} sentences in {} bags -> {}",
        train.len(),
        config.train_bags,
        train_path.display()
    );
    println!(
        "test: {} sentences in {} bags -> {}",
        test.len(),
        config.test_bags,
        test_path.display()
    );
    println!("relations: {}", corpus.relations.join(" "));
    Ok(0)
}
