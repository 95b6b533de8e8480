//! Command-line pipeline: prepare, train, train-siamese, translate, assess.
//!
//! Every command resolves one [`RunConfig`] from `--config`, `--overrides`
//! and `--seed`, checks that its inputs exist before doing any work, and
//! records a provenance block (seed, config hash, checkpoint hashes) next to
//! what it writes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};

use sar2eo::config::RunConfig;
use sar2eo::dataio::{load_manifest, load_tile, save_tile, ManifestEntry};
use sar2eo::discriminator::Discriminator;
use sar2eo::generator::Generator;
use sar2eo::interpretability::{assess, translate_image, write_report, SiameseEmbedder};
use sar2eo::nn::file_digest;
use sar2eo::preprocess::{assemble_triplet, ensure_rgb};
use sar2eo::training::{train, train_siamese};
use sar2eo::{Error, ImageTile, Result, ValueRange};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_MISSING_ASSET: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sar2eo", version, about = "SAR-to-optical translation with confidence reporting")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Configuration override, `key=value`; repeat for several.
    #[arg(long = "overrides", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Seed for every random draw (same as `--overrides seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize network inputs for every manifest entry.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume training) the generator and discriminator.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the SAR/EO embedder used for confidence scores.
    TrainSiamese {
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a SAR image of any size, tile by tile.
    Translate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Tile side; must equal the generator's input size.
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap in pixels (default: `translate.overlap`).
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Translate and write the heatmap, consistency graph and confidence report.
    Assess {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        discriminator: PathBuf,
        #[arg(long)]
        siamese: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingAsset(_) => EXIT_MISSING_ASSET,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingAsset(format!("{what} not found at {}", path.display())))
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    if let Some(p) = &cli.config {
        require(p, "config file")?;
    }
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

/// Seed, configuration hash and the SHA-256 of every named file.
pub fn provenance(cfg: &RunConfig, command: &str, files: &[(&str, &Path)]) -> Result<Value> {
    let mut hashes = Map::new();
    for (name, path) in files {
        hashes.insert(name.to_string(), Value::String(file_digest(path)?));
    }
    Ok(json!({
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.hash()?,
        "checkpoints": hashes,
        "version": env!("CARGO_PKG_VERSION"),
    }))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `<file>.provenance.json` beside an output file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare { manifest, out } => {
            require(manifest, "manifest")?;
            let cfg = resolve_config(cli)?;
            cmd_prepare(&cfg, manifest, out)
        }
        Command::Train { manifest, out } => {
            require(manifest, "manifest")?;
            let cfg = resolve_config(cli)?;
            cmd_train(&cfg, manifest, out)
        }
        Command::TrainSiamese { manifest, out } => {
            require(manifest, "manifest")?;
            let cfg = resolve_config(cli)?;
            train_siamese(manifest, &cfg.siamese_config(), out)?;
            write_json(&sidecar(out), &provenance(&cfg, "train-siamese", &[("siamese", out)])?)
        }
        Command::Translate {
            generator,
            input,
            output,
            tile,
            overlap,
        } => {
            require(generator, "generator checkpoint")?;
            require(input, "input image")?;
            let cfg = resolve_config(cli)?;
            cmd_translate(&cfg, generator, input, output, *tile, overlap.unwrap_or(cfg.translate.overlap))
        }
        Command::Assess {
            generator,
            discriminator,
            siamese,
            input,
            out,
        } => {
            require(generator, "generator checkpoint")?;
            require(discriminator, "discriminator checkpoint")?;
            require(siamese, "siamese checkpoint")?;
            require(input, "input image")?;
            let cfg = resolve_config(cli)?;
            cmd_assess(&cfg, generator, discriminator, siamese, input, out)
        }
    }
}

/// Asset names written per manifest entry, in index order.
pub const PREPARED_ASSETS: [&str; 4] = ["edge", "gray", "rgb", "target"];

fn prepare_entry(cfg: &RunConfig, e: &ManifestEntry, id: usize, out: &Path) -> Result<Value> {
    let sar = ensure_rgb(&load_tile(&e.sar_path, ValueRange::SIGNED_UNIT)?)?;
    let eo = ensure_rgb(&load_tile(&e.eo_path, ValueRange::SIGNED_UNIT)?)?;
    let t = assemble_triplet(&sar, Some(&eo), &cfg.preprocess)?;
    let tiles: [ImageTile; 4] = [t.edge(), t.gray(), t.texture.clone(), eo];
    let mut assets = Map::new();
    let mut hashes = Map::new();
    for (name, tile) in PREPARED_ASSETS.iter().zip(&tiles) {
        let file = format!("{id:06}_{name}.png");
        let path = out.join(&file);
        save_tile(tile, &path)?;
        assets.insert(name.to_string(), Value::String(file));
        hashes.insert(name.to_string(), Value::String(file_digest(&path)?));
    }
    Ok(json!({
        "id": id,
        "split": e.split,
        "sar_path": e.sar_path,
        "eo_path": e.eo_path,
        "assets": assets,
        "sha256": hashes,
    }))
}

/// Writes `index.jsonl` (one row per entry) and the per-entry PNG assets.
/// Failed entries are reported and make the command fail after the index
/// of the remaining ones is written.
pub fn cmd_prepare(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut failures = m.rejections.len();
    for r in &m.rejections {
        eprintln!("manifest line {}: {}", r.line, r.reason);
    }
    let mut index = String::new();
    for (id, e) in m.entries.iter().enumerate() {
        match prepare_entry(cfg, e, id, out) {
            Ok(row) => {
                index.push_str(&serde_json::to_string(&row)?);
                index.push('\n');
            }
            Err(err) => {
                failures += 1;
                eprintln!("entry {id} ({}): {err}", e.sar_path.display());
            }
        }
    }
    let ip = out.join("index.jsonl");
    fs::write(&ip, index).map_err(|e| Error::Io { path: ip, source: e })?;
    write_json(
        &out.join("provenance.json"),
        &provenance(cfg, "prepare", &[("manifest", manifest)])?,
    )?;
    if failures > 0 {
        return Err(Error::InvalidArgument(format!("{failures} manifest entries failed")));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let summary = train(manifest, &cfg.train_config(), out)?;
    let dir = &summary.final_checkpoint;
    let g = dir.join(sar2eo::training::GENERATOR_FILE);
    let d = dir.join(sar2eo::training::DISCRIMINATOR_FILE);
    let mut p = provenance(cfg, "train", &[("generator", &g), ("discriminator", &d)])?;
    p["final_checkpoint"] = Value::String(dir.display().to_string());
    write_json(&out.join("provenance.json"), &p)?;
    println!("{}", dir.display());
    Ok(())
}

fn load_generator(cfg: &RunConfig, path: &Path) -> Result<Generator> {
    Generator::load_expecting(path, &cfg.generator)
}

pub fn cmd_translate(
    cfg: &RunConfig,
    generator: &Path,
    input: &Path,
    output: &Path,
    tile: Option<usize>,
    overlap: usize,
) -> Result<()> {
    let g = load_generator(cfg, generator)?;
    if let Some(t) = tile {
        if t != g.config().input_size {
            return Err(Error::InvalidArgument(format!(
                "tile {t} does not match the generator input size {}",
                g.config().input_size
            )));
        }
    }
    let sar = load_tile(input, ValueRange::SIGNED_UNIT)?;
    let (_, mosaic) = translate_image(&sar, &g, &cfg.preprocess, overlap)?;
    save_tile(&mosaic, output)?;
    write_json(&sidecar(output), &provenance(cfg, "translate", &[("generator", generator)])?)
}

pub fn cmd_assess(
    cfg: &RunConfig,
    generator: &Path,
    discriminator: &Path,
    siamese: &Path,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let g = load_generator(cfg, generator)?;
    let d = Discriminator::load(discriminator)?;
    if d.config() != &cfg.discriminator {
        return Err(Error::Checkpoint(format!(
            "{} holds a discriminator for {:?}, configuration expects {:?}",
            discriminator.display(),
            d.config(),
            cfg.discriminator
        )));
    }
    let s = SiameseEmbedder::load(siamese)?;
    if s.config().input_size != cfg.siamese.input_size {
        return Err(Error::Checkpoint(format!(
            "{} holds an embedder for {} px inputs, configuration expects {}",
            siamese.display(),
            s.config().input_size,
            cfg.siamese.input_size
        )));
    }
    let sar = load_tile(input, ValueRange::SIGNED_UNIT)?;
    let report = assess(&sar, &g, &d, &s, &cfg.assess_config())?;
    let p = provenance(
        cfg,
        "assess",
        &[("generator", generator), ("discriminator", discriminator), ("siamese", siamese)],
    )?;
    write_report(&report, out, p)?;
    println!("confidence {:.2}%", report.confidence_percent);
    Ok(())
}
