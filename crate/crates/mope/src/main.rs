use clap::{Parser, Subcommand};
use mope::backbone::{init_backbone, load_backbone, save_backbone, BackboneConfig, BackboneParams};
use mope::corpus::{corpus_vocab, lexicon_dialogues, load_corpus, save_corpus, Corpus, SchemaSpec, Vocab};
use mope::error::{Error, Result};
use mope::eval::{
    acs_report, evaluate_domain, heatmap_svg, matrix_csv, similarity_matrix, sweep_clusters,
    sweep_csv, taxonomy_bars_svg, train_pool, EvalReport, Routing, TrainSettings,
};
use mope::experts::{load_pool, save_pool};
use mope::routing::{cluster_slots, featurize, ClusterModel, FeatureMode, SlotFeature};
use mope::train::pretrain;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "mope", version, about = "Mixture of prefix experts for zero-shot dialogue state tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain corpus
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        dialogues: usize,
    },
    /// Language-model pretraining of the backbone
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON file overriding the model configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = mope::train::PRETRAIN_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = mope::train::PRETRAIN_LR)]
        lr: f32,
        #[arg(long, default_value_t = mope::train::BATCH_SIZE)]
        batch: usize,
        /// How many dialogues also contribute question-answer text
        #[arg(long, default_value_t = mope::train::QA_DIALOGUES)]
        qa_dialogues: usize,
    },
    /// Cluster training slots by feature
    Cluster {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        feature: String,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one prefix expert per cluster
    TrainExperts {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = mope::train::EXPERT_LR)]
        lr: f32,
        #[arg(long, default_value_t = mope::train::BATCH_SIZE)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a domain with a trained pool
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        experts: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        routing: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// In-context-learning baseline without experts
    Icl {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Analyses over fitted artifacts
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Cluster-count sweep: (K, train_ACS, test_ACS, JGA) per feature mode
    Sweep {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// comma-separated cluster counts, e.g. 1,2,3
        #[arg(long)]
        ks: String,
        /// hidden, embedding, or both
        #[arg(long, default_value = "both")]
        feature: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = mope::train::EXPERT_LR)]
        lr: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// ACS table plus Spearman correlation of test ACS vs JGA
    Acs {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ks: String,
        #[arg(long, default_value = "hidden")]
        feature: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = mope::train::EXPERT_LR)]
        lr: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error-taxonomy bar chart from an eval report
    Errors {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise slot-feature similarity heatmap (CSV + SVG)
    Heatmap {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "hidden")]
        feature: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_split(dir: &Path) -> Result<(Corpus, Corpus)> {
    let train = load_corpus(&dir.join("train.json"))?;
    let test = load_corpus(&dir.join("test.json"))?;
    Ok((train, test))
}

/// The domain that appears in test dialogues but never in training.
fn held_out_domain(train: &Corpus, test: &Corpus) -> Result<String> {
    let mut candidates: Vec<String> = test
        .dialogues
        .iter()
        .flat_map(|d| d.domains.iter().cloned())
        .filter(|dom| {
            !train
                .dialogues
                .iter()
                .any(|d| d.domains.iter().any(|x| x == dom))
        })
        .collect();
    candidates.sort();
    candidates.dedup();
    match candidates.len() {
        1 => Ok(candidates.remove(0)),
        0 => Err(Error::contract("no held-out domain in the test split")),
        _ => Err(Error::contract(format!(
            "multiple held-out domains: {candidates:?}"
        ))),
    }
}

fn write_run_config(path: &Path, config: serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(&config)?)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn load_backbone_with_vocab(path: &Path) -> Result<(BackboneParams, Vocab)> {
    load_backbone(path)
}

fn all_slot_features(
    params: &BackboneParams,
    vocab: &Vocab,
    corpus: &Corpus,
    mode: FeatureMode,
) -> Result<Vec<SlotFeature>> {
    corpus
        .schema
        .all_slots()
        .iter()
        .map(|s| featurize(params, vocab, s, mode))
        .collect()
}

fn parse_ks(ks: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = ks
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::validation(format!("bad cluster count {s:?}")))
        })
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(Error::validation("cluster counts must be positive"));
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenCorpus {
            seed,
            out,
            dialogues,
        } => {
            if dialogues == 0 {
                return Err(Error::contract("--dialogues must be positive"));
            }
            let spec = SchemaSpec::default_spec();
            let (schema, train, test) = mope::corpus::generate_synthetic(seed, dialogues, &spec)?;
            std::fs::create_dir_all(&out)?;
            let train = Corpus {
                schema: schema.clone(),
                dialogues: train,
            };
            let test = Corpus {
                schema,
                dialogues: test,
            };
            train.validate()?;
            test.validate()?;
            save_corpus(&train, &out.join("train.json"))?;
            save_corpus(&test, &out.join("test.json"))?;
            write_run_config(
                &out.join("run-config.json"),
                json!({"command": "gen-corpus", "seed": seed, "dialogues": dialogues}),
            )?;
            let s = train.stats();
            println!(
                "wrote {} train dialogues, {} test dialogues, {} slots",
                s.dialogues,
                test.dialogues.len(),
                s.slots
            );
            Ok(())
        }
        Cmd::Pretrain {
            corpus,
            seed,
            out,
            config,
            epochs,
            lr,
            batch,
            qa_dialogues,
        } => {
            let (train, test) = load_split(&corpus)?;
            train.validate()?;
            let held_out = held_out_domain(&train, &test)?;
            let vocab = corpus_vocab(&train)?;
            let model_config = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let mut c: BackboneConfig = serde_json::from_str(&text)
                        .map_err(|e| Error::format(format!("model config: {e}")))?;
                    c.vocab_size = vocab.len();
                    c
                }
                None => BackboneConfig::with_vocab(vocab.len()),
            };
            let mut params = init_backbone(&model_config, seed)?;
            let slots = train.schema.train_slots(&held_out);
            let mut dialogues = train.dialogues.clone();
            dialogues.extend(lexicon_dialogues(&train.schema));
            let report = pretrain(&mut params, &vocab, &dialogues, &slots, qa_dialogues, seed, epochs, lr, batch)?;
            save_backbone(&params, &vocab, &out)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in report.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            write_text(&out.with_extension("loss.csv"), &csv)?;
            write_run_config(
                &out.with_extension("run.json"),
                json!({
                    "command": "pretrain", "corpus": corpus, "seed": seed,
                    "config": model_config, "epochs": epochs, "lr": lr, "batch": batch,
                    "qa_dialogues": qa_dialogues,
                }),
            )?;
            println!(
                "pretrained {} params, loss {:.4} -> {:.4}",
                params.param_count(),
                report.epoch_losses.first().unwrap_or(&f32::NAN),
                report.epoch_losses.last().unwrap_or(&f32::NAN)
            );
            Ok(())
        }
        Cmd::Cluster {
            backbone,
            corpus,
            feature,
            k,
            seed,
            out,
        } => {
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, test) = load_split(&corpus)?;
            let held_out = held_out_domain(&train, &test)?;
            let mode = FeatureMode::from_str(&feature)?;
            let model = cluster_slots(&params, &vocab, &train.schema, &held_out, mode, k, seed)?;
            model.save(&out)?;
            write_run_config(
                &out.with_extension("run.json"),
                json!({
                    "command": "cluster", "backbone": backbone, "corpus": corpus,
                    "feature": mode, "k": k, "seed": seed, "held_out": held_out,
                }),
            )?;
            println!("clustered {} slots into {k} clusters", model.assignments.len());
            Ok(())
        }
        Cmd::TrainExperts {
            backbone,
            clusters,
            corpus,
            seed,
            fraction,
            epochs,
            lr,
            batch,
            out,
        } => {
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, test) = load_split(&corpus)?;
            let held_out = held_out_domain(&train, &test)?;
            let model = ClusterModel::load(&clusters)?;
            let settings = TrainSettings {
                epochs,
                lr,
                batch,
                fraction,
            };
            let pool = train_pool(&params, &vocab, &train, &model, &held_out, seed, &settings)?;
            std::fs::create_dir_all(&out)?;
            save_pool(&pool, &out.join("experts"))?;
            let mut csv = String::from("expert,epoch,loss\n");
            for (k, losses) in pool.losses.iter().enumerate() {
                for (i, l) in losses.iter().enumerate() {
                    csv.push_str(&format!("{k},{i},{l:.6}\n"));
                }
            }
            write_text(&out.join("loss.csv"), &csv)?;
            write_run_config(
                &out.join("run-config.json"),
                json!({
                    "command": "train-experts", "backbone": backbone, "clusters": clusters,
                    "corpus": corpus, "seed": seed, "fraction": fraction,
                    "epochs": epochs, "lr": lr, "batch": batch, "held_out": held_out,
                }),
            )?;
            for (k, losses) in pool.losses.iter().enumerate() {
                println!(
                    "expert {k}: loss {:.4} -> {:.4}",
                    losses.first().unwrap_or(&f32::NAN),
                    losses.last().unwrap_or(&f32::NAN)
                );
            }
            println!("trained {} experts", pool.experts.len());
            Ok(())
        }
        Cmd::Eval {
            backbone,
            clusters,
            experts,
            corpus,
            domain,
            routing,
            report,
        } => {
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, test) = load_split(&corpus)?;
            let model = ClusterModel::load(&clusters)?;
            let pool = load_pool(&experts.join("experts"))?;
            let routing = Routing::from_str(&routing)?;
            let (eval_report, preds) = evaluate_domain(
                &params,
                &vocab,
                Some(&pool),
                Some(&model),
                routing,
                &test.dialogues,
                &domain,
                &train,
            )?;
            write_text(&report, &serde_json::to_string_pretty(&eval_report)?)?;
            let mut jsonl = String::new();
            for p in &preds {
                jsonl.push_str(&serde_json::to_string(p)?);
                jsonl.push('\n');
            }
            write_text(&report.with_extension("predictions.jsonl"), &jsonl)?;
            write_run_config(
                &report.with_extension("run.json"),
                json!({
                    "command": "eval", "backbone": backbone, "clusters": clusters,
                    "experts": experts, "corpus": corpus, "domain": domain, "routing": routing,
                }),
            )?;
            let m = &eval_report.per_domain[&domain];
            println!(
                "{domain}: JGA {:.4} SA {:.4} SA\\none {:.4}",
                m.jga, m.sa_with_none, m.sa_without_none
            );
            Ok(())
        }
        Cmd::Icl {
            backbone,
            corpus,
            domain,
            shots,
            seed,
            report,
        } => {
            if ![0, 1, 3, 5].contains(&shots) {
                return Err(Error::validation(format!(
                    "--shots must be one of 0, 1, 3, 5 (got {shots})"
                )));
            }
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, test) = load_split(&corpus)?;
            let exemplars =
                mope::decode::sample_exemplars(&vocab, &train.dialogues, shots, seed)?;
            let slots = train.schema.slots_of(&domain)?;
            let mut preds = Vec::new();
            for d in test
                .dialogues
                .iter()
                .filter(|d| d.domains.iter().any(|x| x == &domain))
            {
                for t in 0..d.turns.len() {
                    for slot in &slots {
                        preds.push(mope::decode::predict_slot_icl(
                            &params, &vocab, &exemplars, d, t, slot,
                        )?);
                    }
                }
            }
            let mut grid = std::collections::BTreeMap::new();
            grid.insert(
                domain.clone(),
                slots.iter().map(|s| s.slot.clone()).collect(),
            );
            let eval_report = mope::eval::evaluate(&preds, &grid)?;
            write_text(&report, &serde_json::to_string_pretty(&eval_report)?)?;
            write_run_config(
                &report.with_extension("run.json"),
                json!({
                    "command": "icl", "backbone": backbone, "corpus": corpus,
                    "domain": domain, "shots": shots, "seed": seed,
                }),
            )?;
            let m = &eval_report.per_domain[&domain];
            println!(
                "{domain} {shots}-shot: JGA {:.4} SA\\none {:.4}",
                m.jga, m.sa_without_none
            );
            Ok(())
        }
        Cmd::Analyze { what } => analyze(what),
    }
}

fn analyze(what: Analyze) -> Result<()> {
    match what {
        Analyze::Sweep {
            backbone,
            corpus,
            ks,
            feature,
            seed,
            fraction,
            epochs,
            lr,
            out,
        } => {
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, test) = load_split(&corpus)?;
            let held_out = held_out_domain(&train, &test)?;
            let ks = parse_ks(&ks)?;
            let modes: Vec<FeatureMode> = match feature.as_str() {
                "both" => vec![FeatureMode::Hidden, FeatureMode::Embedding],
                other => vec![FeatureMode::from_str(other)?],
            };
            let settings = TrainSettings {
                epochs,
                fraction,
                lr,
                ..TrainSettings::default()
            };
            let mut rows = Vec::new();
            for mode in modes {
                rows.extend(sweep_clusters(
                    &params,
                    &vocab,
                    &train,
                    &test.dialogues,
                    &held_out,
                    &ks,
                    mode,
                    seed,
                    &settings,
                )?);
            }
            write_text(&out, &sweep_csv(&rows))?;
            write_run_config(
                &out.with_extension("run.json"),
                json!({
                    "command": "analyze sweep", "backbone": backbone, "corpus": corpus,
                    "ks": ks, "feature": feature, "seed": seed,
                    "fraction": fraction, "epochs": epochs, "lr": lr, "held_out": held_out,
                }),
            )?;
            println!("wrote {} sweep rows", rows.len());
            Ok(())
        }
        Analyze::Acs {
            backbone,
            corpus,
            ks,
            feature,
            seed,
            fraction,
            epochs,
            lr,
            out,
        } => {
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, test) = load_split(&corpus)?;
            let held_out = held_out_domain(&train, &test)?;
            let ks = parse_ks(&ks)?;
            let mode = FeatureMode::from_str(&feature)?;
            let settings = TrainSettings {
                epochs,
                fraction,
                lr,
                ..TrainSettings::default()
            };
            let rows = sweep_clusters(
                &params,
                &vocab,
                &train,
                &test.dialogues,
                &held_out,
                &ks,
                mode,
                seed,
                &settings,
            )?;
            let report = acs_report(&rows);
            write_text(&out, &serde_json::to_string_pretty(&report)?)?;
            write_text(&out.with_extension("csv"), &sweep_csv(&rows))?;
            write_run_config(
                &out.with_extension("run.json"),
                json!({
                    "command": "analyze acs", "backbone": backbone, "corpus": corpus,
                    "ks": ks, "feature": mode, "seed": seed,
                    "fraction": fraction, "epochs": epochs, "lr": lr, "held_out": held_out,
                }),
            )?;
            match report.spearman_test_acs_jga {
                Some(r) => println!("spearman(test ACS, JGA) = {r:.4}"),
                None => println!("spearman(test ACS, JGA) undefined"),
            }
            Ok(())
        }
        Analyze::Errors { report, out } => {
            let text = std::fs::read_to_string(&report)?;
            let eval_report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("eval report: {e}")))?;
            write_text(&out, &taxonomy_bars_svg(&eval_report.overall.errors))?;
            println!(
                "taxonomy: partial {} over {} other {}",
                eval_report.overall.errors.partial,
                eval_report.overall.errors.over,
                eval_report.overall.errors.other
            );
            Ok(())
        }
        Analyze::Heatmap {
            backbone,
            corpus,
            feature,
            out,
        } => {
            let (params, vocab) = load_backbone_with_vocab(&backbone)?;
            let (train, _) = load_split(&corpus)?;
            let mode = FeatureMode::from_str(&feature)?;
            let features = all_slot_features(&params, &vocab, &train, mode)?;
            let (names, matrix, flagged) = similarity_matrix(&features)?;
            write_text(&out.with_extension("csv"), &matrix_csv(&names, &matrix))?;
            write_text(&out.with_extension("svg"), &heatmap_svg(&names, &matrix))?;
            if flagged {
                eprintln!("warning: zero-norm feature encountered; cosine pinned to 0");
            }
            println!("wrote {}x{} similarity matrix", names.len(), names.len());
            Ok(())
        }
    }
}
