//! Command-line front end. Every subcommand reads a JSON config (unknown
//! keys rejected), resolves the seed and writes the resolved config next to
//! its outputs.
//!
//! Seed precedence: `--seed` flag, then `MACNET_SEED`, then the config file.

use crate::error::{Error, Result};
use crate::eval::{
    cluster_separation, decode_traits, distribution_match, nshot_eval, AnnealConfig, NShotConfig,
};
use crate::net::{load_checkpoint, predict_map, save_checkpoint, MacNetwork, MapTarget, NetworkConfig};
use crate::percept::{
    build_distance_matrix, solve_category_attribute_matrix, CategoryAttributeMatrix, PerceptualDistanceMatrix,
    SimilarityJudgments, SolverConfig,
};
use crate::synth::{gen_corpus, load_corpus, CorpusConfig};
use crate::train::{evaluate, EvalMetrics, TrainConfig, TrainLog, TrainState, Trainer};
use crate::{io, rng};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "MACNET_SEED";

#[derive(Parser, Debug)]
#[command(name = "macnet", version, about = "Material attribute-category network toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; see the key list below
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides MACNET_SEED and the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (or file, for `distances` and `embed`)
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 1 is the deterministic reference mode
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic corpus with simulated similarity judgments
    #[command(after_help = key_help::<CorpusConfig>())]
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Turn similarity judgments into a perceptual distance matrix (CSV)
    #[command(after_help = key_help::<DistancesConfig>())]
    Distances {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        judgments: PathBuf,
    },
    /// Embed a distance matrix as a category-attribute matrix (CSV)
    #[command(after_help = key_help::<SolverConfig>())]
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        distances: PathBuf,
        /// Number of attributes M
        #[arg(long)]
        attributes: usize,
    },
    /// Train a network on a corpus directory
    #[command(after_help = key_help::<TrainRunConfig>())]
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Category-attribute matrix; required when attribute heads are on
        #[arg(long)]
        attr_matrix: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the test split
    #[command(after_help = key_help::<EvalRunConfig>())]
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        attr_matrix: Option<PathBuf>,
    },
    /// Per-pixel attribute and category maps of an image
    #[command(after_help = key_help::<MapsRunConfig>())]
    Maps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Recall of a held-out category from N images
    #[command(after_help = key_help::<NShotRunConfig>())]
    Nshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        attr_matrix: PathBuf,
        /// Category name to hold out
        #[arg(long)]
        held_out: String,
        /// Network already trained without the held-out category
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode semantic traits from binarized attributes
    #[command(after_help = key_help::<TraitsRunConfig>())]
    Traits {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Distances { common, .. }
            | Command::Embed { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Maps { common, .. }
            | Command::Nshot { common, .. }
            | Command::Traits { common, .. } => common,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistancesConfig {
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRunConfig {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapsRunConfig {
    pub seed: u64,
    pub stride: usize,
}

impl Default for MapsRunConfig {
    fn default() -> Self {
        MapsRunConfig { seed: 0, stride: 16 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NShotRunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub nshot: NShotConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraitsRunConfig {
    pub seed: u64,
    pub anneal: AnnealConfig,
}

/// Configs whose seed the command line may override.
pub trait Seeded {
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! seeded {
    ($($t:ty => $($f:ident).+;)*) => {
        $(impl Seeded for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.$($f).+
            }
        })*
    };
}

seeded! {
    CorpusConfig => seed;
    DistancesConfig => seed;
    SolverConfig => seed;
    TrainRunConfig => train.seed;
    EvalRunConfig => seed;
    MapsRunConfig => seed;
    NShotRunConfig => train.seed;
    TraitsRunConfig => seed;
}

/// Dotted paths of every key in the default config, e.g. `train.seed`.
pub fn config_keys<T: Default + Serialize>() -> Vec<String> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        if let serde_json::Value::Object(map) = v {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(key.clone());
                walk(&key, child, out);
            }
        }
    }
    let mut keys = Vec::new();
    walk("", &serde_json::to_value(T::default()).expect("configs serialize"), &mut keys);
    keys
}

fn key_help<T: Default + Serialize>() -> String {
    let mut s = String::from("Config keys (JSON, all optional):\n");
    for k in config_keys::<T>() {
        s.push_str("  ");
        s.push_str(&k);
        s.push('\n');
    }
    s
}

fn parse_seed(raw: &str) -> Result<u64> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))
}

/// Reads the config (or defaults) and applies the seed precedence.
pub fn resolve_config<T: Default + DeserializeOwned + Seeded>(common: &Common, env_seed: Option<&str>) -> Result<T> {
    let mut cfg: T = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => T::default(),
    };
    if let Some(s) = common.seed {
        *cfg.seed_mut() = s;
    } else if let Some(raw) = env_seed {
        *cfg.seed_mut() = parse_seed(raw)?;
    }
    Ok(cfg)
}

fn prepare_dir<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    io::create_dir(out)?;
    io::write_json(&out.join("config.json"), cfg)
}

/// For single-file outputs the config lands beside the file as `<stem>.config.json`.
fn prepare_file<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        io::create_dir(parent)?;
    }
    io::write_json(&out.with_extension("config.json"), cfg)
}

fn read_attr_matrix(path: Option<&PathBuf>) -> Result<Option<CategoryAttributeMatrix>> {
    path.map(|p| CategoryAttributeMatrix::read_csv(p)).transpose()
}

#[derive(Serialize)]
struct EmbedReport {
    objective: f64,
    stress: f64,
    rmse: f64,
    restart: usize,
}

#[derive(Serialize)]
struct EvalReport {
    test: EvalMetrics,
    silhouette_attributes: Option<f64>,
    silhouette_pixels: f64,
    distribution_kl: Option<f64>,
}

fn run_train(
    out: &Path,
    cfg: &TrainRunConfig,
    corpus: &Path,
    attr: Option<&PathBuf>,
    resume: bool,
) -> Result<()> {
    let (_, data) = load_corpus(corpus)?;
    let a = read_attr_matrix(attr)?;
    let mut ncfg = cfg.network.clone();
    ncfg.categories = data.num_categories();
    if let Some(a) = &a {
        ncfg.attributes = a.m();
    }
    let last = out.join("last.ckpt");
    let best_path = out.join("best.ckpt");
    let metrics = out.join("metrics.jsonl");
    let trainer = if resume {
        let current = load_checkpoint(&last)?;
        let best = load_checkpoint(&best_path)?;
        let state: TrainState = serde_json::from_value(
            current.state.ok_or_else(|| Error::Data(format!("{}: no training state", last.display())))?,
        )?;
        let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
        let log = TrainLog::from_jsonl(&text)?;
        Trainer::resume(current.network, best.network, state, log, &data, a.as_ref(), &cfg.train)?
    } else {
        prepare_dir(out, cfg)?;
        let net = MacNetwork::build(&ncfg, cfg.train.seed)?;
        Trainer::new(net, &data, a.as_ref(), &cfg.train)?
    };
    let (best, log) = trainer.run(|t| {
        let r = t.log().records.last().expect("record per epoch");
        println!(
            "epoch={} lr={:e} loss={:.6} val_accuracy={:.4}",
            r.epoch, r.learning_rate, r.train.total, r.val_accuracy
        );
        save_checkpoint(&best_path, t.best(), None)?;
        save_checkpoint(&last, t.network(), Some(&t.state_json()?))?;
        t.log().write_jsonl(&metrics)
    })?;
    save_checkpoint(&best_path, &best, None)?;
    log.write_jsonl(&metrics)
}

fn run_nshot(
    out: &Path,
    cfg: &NShotRunConfig,
    corpus: &Path,
    attr: &Path,
    held_out: &str,
    checkpoint: Option<&PathBuf>,
) -> Result<()> {
    let (_, data) = load_corpus(corpus)?;
    let idx = data
        .categories
        .iter()
        .position(|c| c.name == held_out)
        .ok_or_else(|| Error::Config(format!("no category named {held_out:?} in the corpus")))?;
    prepare_dir(out, cfg)?;
    let seen_data = data.without_category(idx)?;
    let net = match checkpoint {
        Some(p) => load_checkpoint(p)?.network,
        None => {
            let a = CategoryAttributeMatrix::read_csv(attr)?.without_row(idx)?;
            let mut ncfg = cfg.network.clone();
            ncfg.categories = seen_data.num_categories();
            ncfg.attributes = a.m();
            let net = MacNetwork::build(&ncfg, cfg.train.seed)?;
            let (best, log) = Trainer::new(net, &seen_data, Some(&a), &cfg.train)?.run(|_| Ok(()))?;
            save_checkpoint(&out.join("model.ckpt"), &best, None)?;
            log.write_jsonl(&out.join("metrics.jsonl"))?;
            best
        }
    };
    let report = nshot_eval(&net, &data.categories[idx], &seen_data.categories, &cfg.nshot, rng::mix(cfg.train.seed, 1))?;
    io::write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("curve.csv"), report.to_csv()).map_err(|e| Error::io(out.join("curve.csv"), e))
}

/// Runs one parsed command.
pub fn execute(cli: &Cli, env_seed: Option<&str>) -> Result<()> {
    let common = cli.command.common();
    let out = common.out.as_path();
    match &cli.command {
        Command::Synth { .. } => {
            let cfg: CorpusConfig = resolve_config(common, env_seed)?;
            cfg.validate()?;
            prepare_dir(out, &cfg)?;
            let m = gen_corpus(&cfg, out)?;
            println!("patches={}", m.len());
        }
        Command::Distances { judgments, .. } => {
            let cfg: DistancesConfig = resolve_config(common, env_seed)?;
            let j = SimilarityJudgments::read_json(judgments)?;
            prepare_file(out, &cfg)?;
            build_distance_matrix(&j)?.write_csv(out)?;
        }
        Command::Embed { distances, attributes, .. } => {
            let cfg: SolverConfig = resolve_config(common, env_seed)?;
            let d = PerceptualDistanceMatrix::read_csv(distances)?;
            prepare_file(out, &cfg)?;
            let r = solve_category_attribute_matrix(&d, *attributes, &cfg)?;
            r.matrix.write_csv(out)?;
            let report = EmbedReport {
                objective: r.objective,
                stress: r.stress,
                rmse: r.rmse,
                restart: r.restart,
            };
            io::write_json(&out.with_extension("report.json"), &report)?;
            println!("objective={:e} rmse={:e}", r.objective, r.rmse);
        }
        Command::Train { corpus, attr_matrix, resume, .. } => {
            let cfg: TrainRunConfig = resolve_config(common, env_seed)?;
            run_train(out, &cfg, corpus, attr_matrix.as_ref(), *resume)?;
        }
        Command::Eval { checkpoint, corpus, attr_matrix, .. } => {
            let cfg: EvalRunConfig = resolve_config(common, env_seed)?;
            let net = load_checkpoint(checkpoint)?.network;
            let (_, data) = load_corpus(corpus)?;
            let a = read_attr_matrix(attr_matrix.as_ref())?;
            prepare_dir(out, &cfg)?;
            let labels: Vec<usize> = data.test.iter().map(|s| s.label).collect();
            let pixels: Vec<Vec<f64>> = data.test.iter().map(|s| s.patch.data().to_vec()).collect();
            let (sil, kl) = if net.num_aux_heads() > 0 {
                let attrs = crate::eval::attribute_vectors(&net, &data.test)?;
                let flat: Vec<f64> = attrs.iter().flatten().copied().collect();
                let nc = net.config();
                (
                    Some(cluster_separation(&attrs, &labels)?),
                    Some(distribution_match(&flat, nc.beta, &nc.grid, nc.bandwidth)?),
                )
            } else {
                (None, None)
            };
            let report = EvalReport {
                test: evaluate(&net, &data.test, a.as_ref())?,
                silhouette_attributes: sil,
                silhouette_pixels: cluster_separation(&pixels, &labels)?,
                distribution_kl: kl,
            };
            println!("accuracy={:.4}", report.test.accuracy);
            io::write_json(&out.join("report.json"), &report)?;
        }
        Command::Maps { checkpoint, image, .. } => {
            let cfg: MapsRunConfig = resolve_config(common, env_seed)?;
            let net = load_checkpoint(checkpoint)?.network;
            let img = io::read_rgb_png(image)?;
            prepare_dir(out, &cfg)?;
            let mut targets = vec![(MapTarget::Categories, "category")];
            if net.num_aux_heads() > 0 {
                targets.push((MapTarget::Attributes, "attribute"));
            }
            for (target, prefix) in targets {
                let maps = predict_map(&net, &img, cfg.stride, target)?;
                for c in 0..maps.channels {
                    let stem = out.join(format!("{prefix}_{c:02}"));
                    io::write_heatmap_png(&stem.with_extension("png"), maps.channel(c), maps.height, maps.width)?;
                    io::write_map_csv(&stem.with_extension("csv"), maps.channel(c), maps.height, maps.width)?;
                }
            }
        }
        Command::Nshot { corpus, attr_matrix, held_out, checkpoint, .. } => {
            let cfg: NShotRunConfig = resolve_config(common, env_seed)?;
            cfg.nshot.validate()?;
            run_nshot(out, &cfg, corpus, attr_matrix, held_out, checkpoint.as_ref())?;
        }
        Command::Traits { checkpoint, corpus, .. } => {
            let cfg: TraitsRunConfig = resolve_config(common, env_seed)?;
            let net = load_checkpoint(checkpoint)?.network;
            let (_, data) = load_corpus(corpus)?;
            prepare_dir(out, &cfg)?;
            let report = decode_traits(&net, &data.train, &data.test, &cfg.anneal, cfg.seed)?;
            println!("mean_test_accuracy={:.4}", report.mean_test_accuracy);
            io::write_json(&out.join("traits.json"), &report)?;
        }
    }
    Ok(())
}

/// Exit code for an error: 2 for configuration problems, 3 for data.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        2
    } else {
        3
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Diagnostics go to stderr as a single line.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.command.common().threads {
        if n == 0 {
            eprintln!("macnet: config error: --threads must be positive");
            return 2;
        }
        // fails only if a pool was already installed in this process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    match execute(&cli, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("macnet: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(config: Option<PathBuf>, seed: Option<u64>) -> Common {
        Common {
            config,
            seed,
            out: PathBuf::from("unused"),
            threads: None,
        }
    }

    #[test]
    fn seed_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 7}"#).unwrap();
        let c = |seed| common(Some(path.clone()), seed);
        let cfg: EvalRunConfig = resolve_config(&c(None), None).unwrap();
        assert_eq!(cfg.seed, 7);
        let cfg: EvalRunConfig = resolve_config(&c(None), Some("11")).unwrap();
        assert_eq!(cfg.seed, 11);
        let cfg: EvalRunConfig = resolve_config(&c(Some(3)), Some("11")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(matches!(
            resolve_config::<EvalRunConfig>(&c(None), Some("x")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"batch_size": 64, "bogus": 1}}"#).unwrap();
        let e = resolve_config::<TrainRunConfig>(&common(Some(path), None), None).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn nested_seed_override() {
        let cfg: NShotRunConfig = resolve_config(&common(None, Some(9)), None).unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn key_list_is_dotted() {
        let keys = config_keys::<TrainRunConfig>();
        assert!(keys.contains(&"train.batch_size".to_string()));
        assert!(keys.contains(&"network.lambda_dist".to_string()));
        assert!(keys.contains(&"network.beta.a".to_string()));
    }

    #[test]
    fn help_lists_every_key() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        let sub = cmd.find_subcommand_mut("train").unwrap();
        let help = sub.render_help().to_string();
        for k in config_keys::<TrainRunConfig>() {
            assert!(help.contains(&k), "{k} missing from help");
        }
    }

    #[test]
    fn missing_input_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with_args(
            [
                "macnet",
                "distances",
                "--judgments",
                dir.path().join("nope.json").to_str().unwrap(),
                "--out",
                dir.path().join("D.csv").to_str().unwrap(),
            ]
            .map(String::from),
        );
        assert_eq!(code, 3);
    }
}
