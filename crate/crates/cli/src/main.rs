use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use tacoxfer::adapt::{
    adapt, load_checkpoint, pretrain, save_checkpoint, AdaptKind, AdaptScenario, Checkpoint,
};
use tacoxfer::data::{generate_corpus, read_corpus, write_corpus, write_mel, Corpus, SyntheticSpec};
use tacoxfer::inventory::{LanguageDef, PhonemeInventory};
use tacoxfer::metrics::{evaluate_scenario, EvalReport};
use tacoxfer::model::{PHONEME_TABLE, SPEAKER_TABLE};
use tacoxfer::synth::{run_request, SynthesisRequest};
use tacoxfer::{Error, Result};

mod config;

use config::{read_toml, AdaptConfig, CorpusSpecFile, NewSpeakersFile, PretrainConfig};

const VERSION: &str = concat!("tacoxfer ", env!("CARGO_PKG_VERSION"));
pub const ORACLE_SPEC_FILE: &str = "oracle_spec.json";
const RUN_FILE_SUFFIX: &str = ".run.json";

#[derive(Parser)]
#[command(name = "tacoxfer", version, about = "Multilingual TTS training, speaker adaptation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Mono,
    Cross,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Table {
    Phoneme,
    Speaker,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on a corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Add new speakers to a checkpoint and fine-tune under a freeze plan.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long = "new-speakers")]
        new_speakers: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Mix the corpora of earlier stages into the adaptation data.
        #[arg(long = "mix-old-data")]
        mix_old_data: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage label for the scenario name; defaults to the new languages.
        #[arg(long)]
        label: Option<String>,
    },
    /// Synthesize a mel spectrogram from IPA text.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ipa: String,
        #[arg(long)]
        speaker: usize,
        #[arg(long)]
        expert: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "dump-alignment")]
        dump_alignment: Option<PathBuf>,
        /// Frame budget; defaults to 16 frames per phoneme.
        #[arg(long = "max-frames")]
        max_frames: Option<usize>,
    },
    /// Score a checkpoint on a probe corpus with the oracle transcriber.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long = "oracle-spec")]
        oracle_spec: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write an embedding table as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        table: Table,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus and its oracle spec.
    GenCorpus {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category().as_str());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, corpus, out, steps, seed } => cmd_pretrain(config, corpus, &out, steps, seed),
        Command::Adapt { ckpt, corpus, mode, new_speakers, steps, out, mix_old_data, config, seed, label } => {
            cmd_adapt(AdaptArgs { ckpt, corpus, mode, new_speakers, steps, out, mix_old_data, config, seed, label })
        }
        Command::Synth { ckpt, ipa, speaker, expert, out, dump_alignment, max_frames } => {
            cmd_synth(&ckpt, ipa, speaker, expert, &out, dump_alignment.as_deref(), max_frames)
        }
        Command::Eval { ckpt, probe, oracle_spec, report } => cmd_eval(&ckpt, &probe, &oracle_spec, &report),
        Command::ExportEmbeddings { ckpt, table, out } => cmd_export_embeddings(&ckpt, table, &out),
        Command::GenCorpus { spec, out, seed } => cmd_gen_corpus(&spec, &out, seed),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_record(command: &str, config: serde_json::Value) -> serde_json::Value {
    json!({ "version": VERSION, "command": command, "config": config })
}

/// Artifacts with a fixed binary or CSV layout carry their run record in a
/// sidecar `<file>.run.json`.
fn write_sidecar(artifact: &Path, record: &serde_json::Value) -> Result<()> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(RUN_FILE_SUFFIX);
    write_text(Path::new(&name), &serde_json::to_string_pretty(record)?)
}

/// Upper-cased language ids in first-seen order, e.g. `ENES`.
fn language_label<'a>(langs: impl Iterator<Item = &'a str>) -> String {
    let mut out: Vec<String> = Vec::new();
    for l in langs {
        let l = l.to_uppercase();
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out.concat()
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn cmd_pretrain(
    config: Option<PathBuf>,
    corpus: Option<PathBuf>,
    out: &Path,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: PretrainConfig = match &config {
        Some(p) => read_toml(p)?,
        None => PretrainConfig::default(),
    };
    // flags win over the file
    cfg.corpus = corpus.or(cfg.corpus);
    cfg.steps = steps.or(cfg.steps);
    cfg.seed = seed.or(cfg.seed);
    let corpus_path = cfg
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus given (--corpus or `corpus` in the config)".into()))?;
    let steps = cfg.steps.ok_or_else(|| Error::Config("no step count given (--steps or `steps`)".into()))?;
    let seed = cfg.seed.ok_or_else(|| Error::Config("no seed given (--seed or `seed`)".into()))?;
    cfg.train.validate()?;

    let data = read_corpus(&corpus_path)?;
    let label = cfg
        .label
        .get_or_insert_with(|| language_label(data.speakers.iter().map(|(_, l)| l.as_str())))
        .clone();
    let mut ckpt = pretrain(&data, &cfg.model, &cfg.train, seed, steps, &label)?;
    if let Some(stage) = ckpt.stages.last_mut() {
        stage.corpus = Some(path_string(&corpus_path));
    }
    ckpt.run_config = Some(run_record("pretrain", serde_json::to_value(&cfg)?));
    save_checkpoint(&ckpt, out)?;
    report_training(&ckpt);
    Ok(())
}

struct AdaptArgs {
    ckpt: PathBuf,
    corpus: PathBuf,
    mode: Mode,
    new_speakers: PathBuf,
    steps: Option<u64>,
    out: PathBuf,
    mix_old_data: bool,
    config: Option<PathBuf>,
    seed: Option<u64>,
    label: Option<String>,
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let mut cfg: AdaptConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => AdaptConfig::default(),
    };
    cfg.steps = a.steps.or(cfg.steps);
    cfg.seed = a.seed.or(cfg.seed);
    cfg.label = a.label.or(cfg.label);
    let steps = cfg.steps.ok_or_else(|| Error::Config("no step count given (--steps or `steps`)".into()))?;
    let seed = cfg.seed.unwrap_or(0);
    let hyper = cfg.hyper()?;

    let base = load_checkpoint(&a.ckpt)?;
    let corpus = read_corpus(&a.corpus)?;
    let speakers: NewSpeakersFile = read_toml(&a.new_speakers)?;
    if speakers.speakers.is_empty() {
        return Err(Error::Validation("new-speakers file lists no speakers".into()));
    }
    let label = cfg
        .label
        .clone()
        .unwrap_or_else(|| language_label(speakers.speakers.iter().map(|s| s.language_id.as_str())));
    let old_data = if a.mix_old_data { Some(old_stage_data(&base)?) } else { None };

    let scenario = AdaptScenario {
        kind: match a.mode {
            Mode::Mono => AdaptKind::Mono,
            Mode::Cross => AdaptKind::Cross,
        },
        new_speakers: speakers.speakers.clone(),
        steps,
        hyper: hyper.clone(),
        label: label.clone(),
        old_data,
        corpus_source: Some(path_string(&a.corpus)),
    };
    let mut ckpt = adapt(&base, &corpus, &scenario, seed)?;
    let resolved = json!({
        "base_checkpoint": path_string(&a.ckpt),
        "corpus": path_string(&a.corpus),
        "mode": a.mode,
        "new_speakers": speakers.speakers,
        "mix_old_data": a.mix_old_data,
        "label": label,
        "steps": steps,
        "seed": seed,
        "train": hyper,
    });
    let mut history = match base.run_config.clone() {
        Some(serde_json::Value::Array(v)) => v,
        Some(v) => vec![v],
        None => Vec::new(),
    };
    history.push(run_record("adapt", resolved));
    ckpt.run_config = Some(serde_json::Value::Array(history));
    save_checkpoint(&ckpt, &a.out)?;
    report_training(&ckpt);
    Ok(())
}

/// Utterances of the corpora recorded by earlier stages, restricted to the
/// speakers already in the checkpoint.
fn old_stage_data(base: &Checkpoint) -> Result<Corpus> {
    let mut merged: Option<Corpus> = None;
    for stage in &base.stages {
        let Some(src) = &stage.corpus else {
            return Err(Error::Validation(format!(
                "stage {} has no recorded corpus; cannot mix old data",
                stage.label
            )));
        };
        let c = read_corpus(Path::new(src))?;
        merged = Some(match merged {
            None => c,
            Some(mut m) => {
                m.utterances.extend(c.utterances);
                for s in c.speakers {
                    if !m.speakers.contains(&s) {
                        m.speakers.push(s);
                    }
                }
                m
            }
        });
    }
    let mut m = merged.ok_or_else(|| Error::Validation("checkpoint has no training stages".into()))?;
    let n_old = base.registry.len();
    m.utterances.retain(|u| u.speaker_id < n_old);
    Ok(m)
}

fn report_training(ckpt: &Checkpoint) {
    let stage = ckpt.stages.len() - 1;
    let entries: Vec<_> = ckpt.log.iter().filter(|e| e.stage == stage).collect();
    if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
        println!(
            "{}: {} steps, loss {:.5} -> {:.5}",
            ckpt.scenario_label(),
            ckpt.stages[stage].steps,
            first.loss,
            last.loss
        );
    }
}

fn cmd_synth(
    ckpt_path: &Path,
    ipa: String,
    speaker: usize,
    expert: Option<usize>,
    out: &Path,
    dump_alignment: Option<&Path>,
    max_frames: Option<usize>,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let n = ckpt.inventory.encode(&ipa)?.len();
    let req = SynthesisRequest {
        ipa_text: ipa,
        speaker_id: speaker,
        expert_speaker_id: expert,
        max_frames: max_frames.unwrap_or(16 * n),
    };
    let syn = run_request(&ckpt, &req)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_mel(&syn.mel, out)?;
    let record = run_record(
        "synth",
        json!({ "checkpoint": path_string(ckpt_path), "request": req, "stopped": syn.stopped }),
    );
    write_sidecar(out, &record)?;
    if let Some(p) = dump_alignment {
        write_text(p, &syn.alignment.to_csv())?;
    }
    println!(
        "{} frames, {} decoder steps, {}",
        syn.mel.rows(),
        syn.alignment.decoder_steps(),
        if syn.stopped { "stopped" } else { "hit the frame limit" }
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, probe: &Path, oracle_spec: &Path, report: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let probes = read_corpus(probe)?;
    let text = fs::read_to_string(oracle_spec).map_err(|e| Error::io(oracle_spec, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    let rep = evaluate_scenario(&ckpt, &probes.utterances, &spec)?;
    write_text(report, &EvalReport::to_csv(std::slice::from_ref(&rep)))?;
    write_sidecar(
        report,
        &run_record(
            "eval",
            json!({
                "checkpoint": path_string(ckpt_path),
                "probe": path_string(probe),
                "oracle_spec": path_string(oracle_spec),
                "mcd": "teacher-forced, no time warping",
            }),
        ),
    )?;
    print!("{}", rep.summary());
    Ok(())
}

fn cmd_export_embeddings(ckpt_path: &Path, table: Table, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (name, labels): (&str, Vec<String>) = match table {
        Table::Phoneme => (PHONEME_TABLE, ckpt.inventory.symbols().to_vec()),
        Table::Speaker => (
            SPEAKER_TABLE,
            ckpt.registry
                .entries()
                .iter()
                .map(|e| format!("{}:{}", e.speaker_id, e.language_id))
                .collect(),
        ),
    };
    let w = ckpt.params.get(name)?;
    let mut text = String::from("label");
    for d in 0..w.cols() {
        text.push_str(&format!(",d{d}"));
    }
    text.push('\n');
    for (row, label) in labels.iter().enumerate() {
        text.push_str(label);
        for v in w.row_slice(row) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    write_text(out, &text)?;
    write_sidecar(
        out,
        &run_record("export-embeddings", json!({ "checkpoint": path_string(ckpt_path), "table": table })),
    )
}

fn cmd_gen_corpus(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let file: CorpusSpecFile = read_toml(spec_path)?;
    let inventory = PhonemeInventory::new(&file.symbols, file.capacity)?;
    let languages = file
        .languages
        .iter()
        .map(|l| LanguageDef::from_symbols(&l.id, &l.symbols, &inventory))
        .collect::<Result<Vec<_>>>()?;
    let spec = SyntheticSpec::random(languages, &file.speakers, &file.recipe, seed)?;
    let speakers: Vec<usize> = match &file.corpus_speakers {
        Some(s) => s.clone(),
        None => file.speakers.iter().map(|v| v.speaker_id).collect(),
    };
    let utts = generate_corpus(&spec, &speakers, file.utterances_per_speaker, (file.min_len, file.max_len))?;
    let mut corpus = Corpus::from_synthetic(&inventory, &spec, utts)?;
    let used: Vec<String> = corpus.speakers.iter().map(|(_, l)| l.clone()).collect();
    corpus.languages.retain(|l| used.contains(&l.language_id));
    write_corpus(&corpus, out)?;
    write_text(&out.join(ORACLE_SPEC_FILE), &serde_json::to_string_pretty(&spec)?)?;
    write_text(
        &out.join("run.json"),
        &serde_json::to_string_pretty(&run_record("gen-corpus", json!({ "spec": file, "seed": seed })))?,
    )?;
    println!("{} utterances for speakers {speakers:?} in {}", corpus.utterances.len(), out.display());
    Ok(())
}
