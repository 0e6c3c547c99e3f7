use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use poigen::datagen::{dataset_stats, gen_logs, gen_pois, read_logs, split_by_user, write_logs, GenConfig};
use poigen::decode::DecodeConfig;
use poigen::embed::{read_poi_db, write_poi_db, PoiRecord};
use poigen::eval::{write_report, write_results, AblationFlags};
use poigen::geocode::{haversine_distance, GeoPoint};
use poigen::pid::{collision_rate, read_pid_map, read_trie_snapshot, write_pid_map, write_trie_snapshot, PidTrie, SharedTrie};
use poigen::pipeline::{
    build_vocab, eval_queries, fit_stage_anchors, make_samples, read_bundle, train_pipeline, train_stage_model,
    train_stage_proximity, train_stage_rq, training_records, write_bundle, Engine, ModelBundle, PipelineConfig, PoiTokenizer,
};
use poigen::seqmodel::{read_checkpoint, write_checkpoint, Checkpoint, SearchContext};
use poigen::{Error, Result};

const ROOT_ENV: &str = "POIGEN_ROOT";

#[derive(Parser)]
#[command(name = "poigen", version, about = "Generative POI retrieval pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Compact,
}

#[derive(Args)]
struct Common {
    /// Artifact directory (falls back to $POIGEN_ROOT, then ./artifacts).
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value = "compact")]
    preset: Preset,
    /// JSON pipeline configuration replacing the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    gid_len: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    beam_width: Option<usize>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args, Clone, Copy)]
struct Flags {
    /// Drop explicit geographic identifiers from PIDs.
    #[arg(long, global = true)]
    no_egi: bool,
    /// Skip geographic rotation of semantic embeddings.
    #[arg(long, global = true)]
    no_geope: bool,
    /// Decode without trie constraints.
    #[arg(long, global = true)]
    no_tcg: bool,
    /// Decode without proximity-aware prefix forcing.
    #[arg(long, global = true)]
    no_ssp: bool,
    /// Ignore interaction history.
    #[arg(long, global = true)]
    no_history: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic POI database and search logs.
    GenData {
        #[arg(long)]
        pois: Option<usize>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        cities: Option<usize>,
    },
    /// Fit GeoPE anchor points.
    FitAnchors,
    /// Train the residual quantizer.
    TrainRq,
    /// Assign PIDs to every POI.
    Tokenize,
    /// Build the PID trie snapshot.
    BuildTrie,
    /// Train the sequence model.
    TrainModel,
    /// Train the proximity estimator.
    TrainProximity,
    /// Retrieve POIs for one query.
    Search {
        #[arg(long)]
        query: String,
        #[arg(long, allow_negative_numbers = true)]
        lat: f64,
        #[arg(long, allow_negative_numbers = true)]
        lon: f64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Print the predicted proximity level of a query.
    PredictLambda {
        #[arg(long)]
        query: String,
    },
    /// Train on the logs and report retrieval metrics on held-out users.
    Evaluate {
        #[arg(long)]
        max_queries: Option<usize>,
    },
    /// Summarise the generated dataset.
    Stats,
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
    fn pois(&self) -> PathBuf {
        self.file("pois.jsonl")
    }
    fn logs(&self) -> PathBuf {
        self.file("logs.jsonl")
    }
    fn bundle(&self) -> PathBuf {
        self.file("bundle.json")
    }
    fn pidmap(&self) -> PathBuf {
        self.file("pidmap.jsonl")
    }
    fn trie(&self) -> PathBuf {
        self.file("trie.jsonl")
    }
    fn checkpoint(&self) -> PathBuf {
        self.file("checkpoint.json")
    }
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p.clone()),
                _ => Error::Io {
                    path: p.clone(),
                    source: e,
                },
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => match c.preset {
            Preset::Default => PipelineConfig::default(),
            Preset::Compact => PipelineConfig::compact(),
        },
    };
    cfg.seed = c.seed;
    if let Some(v) = c.gid_len {
        cfg.gid_len = v;
    }
    if let Some(v) = c.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = c.gamma {
        cfg.decode.gamma = v;
    }
    if let Some(v) = c.tau {
        cfg.decode.tau = v;
    }
    if c.beam_width.is_some() {
        cfg.decode.beam_width = c.beam_width;
    }
    let f = c.flags;
    cfg.flags = AblationFlags {
        no_egi: f.no_egi,
        no_geope: f.no_geope,
        no_tcg: f.no_tcg,
        no_ssp: f.no_ssp,
        no_history: f.no_history,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn bundle_or_default(path: &Path) -> Result<ModelBundle> {
    if path.exists() {
        read_bundle(path)
    } else {
        Ok(ModelBundle::default())
    }
}

fn missing(what: &str, path: &Path) -> Error {
    Error::MissingArtifact(path.join(what))
}

fn tokenizer(paths: &Paths, cfg: &PipelineConfig) -> Result<PoiTokenizer> {
    let bundle = read_bundle(&paths.bundle())?;
    let rq = bundle.rq.ok_or_else(|| missing("rq", &paths.bundle()))?;
    let anchors = if cfg.flags.no_geope {
        None
    } else {
        Some(bundle.anchors.ok_or_else(|| missing("anchors", &paths.bundle()))?)
    };
    PoiTokenizer::new(cfg, anchors, rq)
}

fn run(cli: Cli) -> Result<()> {
    let root = cli
        .common
        .root
        .clone()
        .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("artifacts"));
    let paths = Paths { root };
    let cfg = config(&cli.common)?;
    fs::create_dir_all(&paths.root).map_err(|e| Error::Io {
        path: paths.root.clone(),
        source: e,
    })?;

    match cli.command {
        Command::GenData { pois, sequences, cities } => {
            let mut g = GenConfig {
                seed: cfg.stage_seed("datagen"),
                ..GenConfig::default()
            };
            if let Some(v) = pois {
                g.n_pois = v;
            }
            if let Some(v) = sequences {
                g.n_sequences = v;
            }
            if let Some(v) = cities {
                g.n_cities = v;
            }
            g.validate()?;
            let p = gen_pois(&g)?;
            let logs = gen_logs(&g, &p)?;
            write_poi_db(&paths.pois(), &p, &g)?;
            write_logs(&paths.logs(), &logs, &g)?;
            println!(
                "wrote {} POIs and {} sequences ({} skipped) to {}",
                p.len(),
                logs.records.len(),
                logs.skipped,
                paths.root.display()
            );
        }
        Command::FitAnchors => {
            let pois = read_poi_db(&paths.pois())?;
            let mut bundle = bundle_or_default(&paths.bundle())?;
            bundle.anchors = fit_stage_anchors(&pois, &cfg)?;
            write_bundle(&paths.bundle(), &bundle, &cfg)?;
            println!("fitted {} anchors", bundle.anchors.as_ref().map_or(0, |a| a.omega()));
        }
        Command::TrainRq => {
            let pois = read_poi_db(&paths.pois())?;
            let mut bundle = bundle_or_default(&paths.bundle())?;
            let anchors = if cfg.flags.no_geope {
                None
            } else {
                Some(bundle.anchors.clone().ok_or_else(|| missing("anchors", &paths.bundle()))?)
            };
            let (rq, report) = train_stage_rq(&pois, anchors.as_ref(), &cfg)?;
            bundle.rq = Some(rq);
            write_bundle(&paths.bundle(), &bundle, &cfg)?;
            for (e, l) in report.loss.iter().enumerate() {
                println!("epoch {e:>3} loss {l:.6}");
            }
        }
        Command::Tokenize => {
            let pois = read_poi_db(&paths.pois())?;
            let tok = tokenizer(&paths, &cfg)?;
            let pids = tok.pids(&pois)?;
            write_pid_map(&paths.pidmap(), &tok.layout, &pids)?;
            println!("{} PIDs, collision rate {:.4}", pids.len(), collision_rate(&pids));
        }
        Command::BuildTrie => {
            let (layout, pids) = read_pid_map(&paths.pidmap())?;
            let trie = PidTrie::build(&layout, &pids)?;
            write_trie_snapshot(&paths.trie(), &layout, &trie)?;
            println!("trie with {} leaves, depth {}", trie.len(), trie.depth());
        }
        Command::TrainModel => {
            let pois = read_poi_db(&paths.pois())?;
            let logs = read_logs(&paths.logs())?;
            let (layout, pids) = read_pid_map(&paths.pidmap())?;
            if layout != cfg.layout() {
                return Err(Error::Config("PID map layout differs from the configuration".into()));
            }
            let splits = split_by_user(&logs.records, cfg.valid_frac, cfg.test_frac, cfg.stage_seed("split"));
            let vocab = build_vocab(&pois, &logs.records, &cfg)?;
            let hist = !cfg.flags.no_history;
            let train = make_samples(&training_records(&splits.train, &cfg), &pids, &vocab, cfg.model.context, hist)?;
            let valid = make_samples(&splits.valid, &pids, &vocab, cfg.model.context, hist)?;
            let (model, report) = train_stage_model(&vocab, &train, &valid, &cfg)?;
            for (e, (l, a)) in report.epoch_loss.iter().zip(&report.heldout_accuracy).enumerate() {
                println!("epoch {e:>3} loss {l:.4} held-out accuracy {a:.4}");
            }
            let ckpt = Checkpoint {
                vocab,
                model: model.config,
                train: cfg.train.clone(),
                report: Some(report),
                params: model.params().to_vec(),
            };
            write_checkpoint(&paths.checkpoint(), &ckpt, &cfg)?;
        }
        Command::TrainProximity => {
            let pois = read_poi_db(&paths.pois())?;
            let logs = read_logs(&paths.logs())?;
            let splits = split_by_user(&logs.records, cfg.valid_frac, cfg.test_frac, cfg.stage_seed("split"));
            let by_id: BTreeMap<String, PoiRecord> = pois.into_iter().map(|p| (p.poi_id.clone(), p)).collect();
            let (model, report) = train_stage_proximity(&training_records(&splits.train, &cfg), &by_id, &cfg)?;
            let mut bundle = bundle_or_default(&paths.bundle())?;
            bundle.proximity = Some(model);
            write_bundle(&paths.bundle(), &bundle, &cfg)?;
            println!(
                "held-out accuracy {:.4} (majority baseline {:.4}, n={})",
                report.heldout_accuracy, report.majority_baseline, report.heldout_size
            );
        }
        Command::Search { query, lat, lon, k } => {
            let location = GeoPoint::new(lat, lon)?;
            let pois = read_poi_db(&paths.pois())?;
            let ckpt = read_checkpoint(&paths.checkpoint())?;
            let (layout, trie) = read_trie_snapshot(&paths.trie())?;
            let (_, pids) = read_pid_map(&paths.pidmap())?;
            if layout != ckpt.vocab.layout {
                return Err(Error::Config("trie and checkpoint disagree on the PID layout".into()));
            }
            let bundle = bundle_or_default(&paths.bundle())?;
            let engine = Engine {
                model: ckpt.transformer()?,
                vocab: ckpt.vocab,
                trie: SharedTrie::new(trie),
                proximity: bundle.proximity,
                pois: pois.into_iter().map(|p| (p.poi_id.clone(), p)).collect(),
                pids,
                tokenizer: None,
            };
            let dc = DecodeConfig {
                k,
                tcg_enabled: !cfg.flags.no_tcg,
                ssp_enabled: !cfg.flags.no_ssp,
                ..cfg.decode.clone()
            };
            let ctx = SearchContext {
                history: Vec::new(),
                query,
                location,
            };
            let res = engine.search(&ctx, &dc)?;
            let d = &res.diagnostics;
            println!(
                "lambda {:?}, forced prefix {}, decode steps {}, {:.2} ms",
                d.lambda,
                d.forced_prefix_len,
                d.decode_steps,
                d.wall_time_us as f64 / 1000.0
            );
            println!("{:>4}  {:<10} {:<36} {:>12} {:>10}", "rank", "poi_id", "name", "distance_m", "log_prob");
            for (i, h) in res.hits.iter().enumerate() {
                let poi = h.poi_id.as_ref().and_then(|id| engine.pois.get(id));
                let (id, name, dist) = match poi {
                    Some(p) => (p.poi_id.as_str(), p.name.as_str(), haversine_distance(location, p.location)),
                    None => ("<invalid>", "", f64::NAN),
                };
                println!("{:>4}  {:<10} {:<36} {:>12.1} {:>10.4}", i + 1, id, name, dist, h.log_prob);
            }
        }
        Command::PredictLambda { query } => {
            let bundle = read_bundle(&paths.bundle())?;
            let model = bundle
                .proximity
                .ok_or_else(|| missing("proximity", &paths.bundle()))?;
            println!("{}", model.predict_lambda(&query));
        }
        Command::Evaluate { max_queries } => {
            let pois = read_poi_db(&paths.pois())?;
            let logs = read_logs(&paths.logs())?;
            let cfg = PipelineConfig {
                max_eval_queries: max_queries.or(cfg.max_eval_queries),
                ..cfg
            };
            let run = train_pipeline(&pois, &logs.records, &cfg)?;
            let (by_k, report) = run.engine.evaluate(eval_queries(&run, &cfg), &cfg)?;
            let records: Vec<_> = by_k.into_values().flatten().collect();
            write_results(&paths.file("results.jsonl"), &records, &cfg)?;
            write_report(&paths.file("report.json"), &report, &cfg)?;
            let text = report.to_string();
            fs::write(paths.file("report.txt"), &text).map_err(|e| Error::Io {
                path: paths.file("report.txt"),
                source: e,
            })?;
            print!("{text}");
        }
        Command::Stats => {
            let pois = read_poi_db(&paths.pois())?;
            let logs = read_logs(&paths.logs())?;
            let s = dataset_stats(&pois, &logs);
            println!("POIs                {}", s.pois);
            println!("cities              {}", s.cities);
            println!("sequences           {}", s.sequences);
            println!("interactions        {}", s.interactions);
            println!("avg history length  {:.2}", s.avg_history_len);
            for (t, n) in &s.templates {
                println!("template {t:?}: {n}");
            }
            if paths.pidmap().exists() {
                let (_, pids) = read_pid_map(&paths.pidmap())?;
                println!("PID collision rate  {:.4}", collision_rate(&pids));
            }
        }
    }
    Ok(())
}

/// One exit status per failure class; 2 is left to argument parsing.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Decode(_) => 1,
        Error::MissingArtifact(_) => 3,
        Error::Config(_) => 4,
        Error::Format { .. } => 5,
        Error::TrainingFailure { .. } => 6,
        Error::Capacity { .. } | Error::Conflict(_) => 7,
        Error::Io { .. } => 8,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
