use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use guideseg::airc::{shared, QTable};
use guideseg::geometry::{BinaryMask, ImageRef};
use guideseg::guidelines::{build_index, ingest, GuidelineIndex, HashEmbedder, IndexFile};
use guideseg::io::{write_atomic, write_json_atomic};
use guideseg::metrics::{evaluate, ledger_summary, ImagePair, LedgerEntry};
use guideseg::pipeline::{run_image, BackendConfig, Backends, RunConfig, RunTrace};
use guideseg::sim::{
    ablate_policies, builtin_guidelines, generate_scene_with, train_controller, Density, EpisodeRecord, SimConfig,
    SimulatedBackend, SyntheticScene,
};

#[derive(Parser)]
#[command(name = "guideseg", version, about = "Guideline-consistent segmentation refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a guideline corpus and save the index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image or every image in a directory.
    Run {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Controller table; a fresh one is used when the file does not exist.
        #[arg(long)]
        qtable: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Simulate(SimCommand),
    /// Score predicted masks against ground truth (matched by file name).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report; a CSV with the same stem is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn run and training traces into plot-ready CSV and JSON.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Train the iteration controller on simulated scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the episode count in the config.
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        qtable: PathBuf,
        /// Per-episode JSON-lines trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare the learned policy with a fixed number of passes.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        qtable: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write synthetic scenes and their ground-truth masks.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "medium")]
        density: DensityArg,
        /// Simulation config whose error model plants the Worker defects.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DensityArg {
    Few,
    Medium,
    Crowd,
}

impl From<DensityArg> for Density {
    fn from(d: DensityArg) -> Self {
        match d {
            DensityArg::Few => Density::Few,
            DensityArg::Medium => Density::Medium,
            DensityArg::Crowd => Density::Crowd,
        }
    }
}

/// Exit 1 for bad input or configuration, 2 for failures while running.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<guideseg::Error> for Failure {
    fn from(e: guideseg::Error) -> Self {
        if e.is_validation() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    Ok(write_json_atomic(path, value)?)
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> CliResult {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(guideseg::Error::from)?);
        text.push('\n');
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(write_atomic(path, &bytes)?)
}

/// Files of a directory (or the single file), sorted by name.
fn list_files(path: &Path, ext: Option<&str>) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries =
        fs::read_dir(path).map_err(|e| Failure::Config(format!("cannot list {}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| ext.is_none_or(|x| p.extension().is_some_and(|e| e == x)))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_index(corpus: &Path, out: &Path) -> CliResult {
    let guidelines = ingest(&read_text(corpus)?)?;
    let index = build_index(&guidelines, &HashEmbedder::default())?;
    write_json(out, &index.to_file())?;
    println!("indexed {} guidelines into {}", index.len(), out.display());
    Ok(())
}

fn load_table(path: Option<&Path>) -> CliResult<QTable> {
    match path {
        Some(p) if p.exists() => Ok(QTable::load(p)?),
        _ => Ok(QTable::default()),
    }
}

fn cmd_run(image: &Path, config_path: &Path, qtable: Option<&Path>, out: &Path) -> CliResult {
    let config: RunConfig = read_json(config_path)?;
    config.validate()?;
    let roles = config.roles()?;
    let guidelines = match &config.corpus {
        Some(p) => ingest(&read_text(p)?)?,
        None => builtin_guidelines(),
    };
    let files = list_files(image, None)?;
    if files.is_empty() {
        return Err(Failure::Config(format!("no images in {}", image.display())));
    }

    let mut images = Vec::new();
    let backends = match &config.backend {
        BackendConfig::Simulated { error_model, seed } => {
            let mut backend = SimulatedBackend::new(*error_model, *seed);
            for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "json")) {
                let scene: SyntheticScene = read_json(f)?;
                images.push((stem(f), scene.image()));
                backend.add_scene(scene);
            }
            if images.is_empty() {
                return Err(Failure::Config("the simulated backend reads scene .json files".into()));
            }
            Backends::simulated(backend)
        }
        BackendConfig::Remote(endpoints) => {
            for f in &files {
                let size = imagesize::size(f)
                    .map_err(|e| Failure::Config(format!("{}: not a readable image: {e}", f.display())))?;
                images.push((
                    stem(f),
                    ImageRef::new(f.display().to_string(), size.width as u32, size.height as u32),
                ));
            }
            Backends::remote(endpoints)
        }
    };
    let index = match &config.index {
        Some(p) => {
            let file: IndexFile = read_json(p)?;
            let index = GuidelineIndex::from_file(file, &guidelines)?;
            if index.embedder_tag() != backends.embedder.tag() {
                return Err(Failure::Config(format!(
                    "index was built with {} but the run embeds with {}",
                    index.embedder_tag(),
                    backends.embedder.tag()
                )));
            }
            index
        }
        None => build_index(&guidelines, backends.embedder.as_ref()).map_err(|e| match e {
            guideseg::Error::Embedding { .. } => Failure::Runtime(e.to_string()),
            other => other.into(),
        })?,
    };
    let table = shared(load_table(qtable)?);

    let mut traces: Vec<RunTrace> = Vec::new();
    for (name, img) in &images {
        let run = run_image(img, &config, &roles, &backends, &index, &table)?;
        write_json(&out.join("masks").join(format!("{name}.json")), &run.mask)?;
        let failed = run.trace.crops.iter().filter(|c| c.error.is_some()).count();
        println!(
            "{name}: {} subjects, {} crop(s), {} failed, ${:.4}",
            run.trace.subjects.len(),
            run.trace.crops.len(),
            failed,
            run.trace.summary.cost_usd
        );
        traces.push(run.trace);
    }
    write_lines(&out.join("traces.jsonl"), &traces)?;
    let calls: Vec<LedgerEntry> = traces.iter().flat_map(|t| t.calls.clone()).collect();
    let per_image: BTreeMap<&str, f64> = images
        .iter()
        .zip(&traces)
        .map(|((n, _), t)| (n.as_str(), t.summary.cost_usd))
        .collect();
    write_json(
        &out.join("cost_summary.json"),
        &json!({
            "images": images.len(),
            "total": ledger_summary(&calls, &config.prices),
            "per_image_usd": per_image,
        }),
    )?;
    if let Some(p) = qtable {
        if config.controller_mode == guideseg::airc::ControllerMode::Train {
            guideseg::airc::lock(&table).save(p)?;
        }
    }
    Ok(())
}

fn load_sim_config(path: &Path) -> CliResult<SimConfig> {
    let config: SimConfig = read_json(path)?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(config: &Path, episodes: Option<u64>, qtable: &Path, trace: Option<&Path>) -> CliResult {
    let config = load_sim_config(config)?;
    let episodes = episodes.unwrap_or(config.episodes);
    let run = train_controller(episodes, &config.env(), &config.density_mix, config.seed, None)?;
    run.table.save(qtable)?;
    if let Some(t) = trace {
        write_lines::<EpisodeRecord>(t, &run.episodes)?;
    }
    let last = run.episodes.last().map_or(0.0, |e| e.cumulative_reward);
    println!(
        "trained {episodes} episodes: cumulative reward {last:.2}, mean passes {:.3}",
        run.mean_passes
    );
    Ok(())
}

fn cmd_ablate(config: &Path, qtable: &Path, out: &Path) -> CliResult {
    let config = load_sim_config(config)?;
    let table = QTable::load(qtable).map_err(|e| match e {
        guideseg::Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", qtable.display())),
        other => other.into(),
    })?;
    let report = ablate_policies(
        &config.env(),
        &table,
        config.ablation_scenes,
        config.ablation_seed,
        &config.density_mix,
        config.fixed_passes,
    )?;
    write_json(&out.join("ablation.json"), &report)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(&out.join("ablation.csv"), &buf)?;
    println!(
        "adaptive {:.3} vs fixed {:.3} issues per crop (ratio {:.2}); extra passes on {:.0}% of crops",
        report.adaptive.issues_resolved_per_crop,
        report.fixed.issues_resolved_per_crop,
        report.ratio,
        report.adaptive.extra_pass_fraction * 100.0
    );
    Ok(())
}

fn cmd_fixture(out: &Path, count: u64, seed: u64, density: Density, config: Option<&Path>) -> CliResult {
    let model = match config {
        Some(p) => load_sim_config(p)?.error_model,
        None => guideseg::sim::ErrorModel::perfect(),
    };
    for i in 0..count {
        let scene = generate_scene_with(seed + i, density, &model);
        write_json(&out.join("gt").join(format!("{}.json", scene.name)), &scene.gt_mask())?;
        write_json(&out.join("scenes").join(format!("{}.json", scene.name)), &scene)?;
    }
    println!("wrote {count} scene(s) to {}", out.display());
    Ok(())
}

fn read_mask(path: &Path) -> CliResult<BinaryMask> {
    read_json(path)
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> CliResult {
    let gt_files = list_files(gt, Some("json"))?;
    let mut masks = Vec::new();
    for g in &gt_files {
        let name = g.file_name().expect("listed file").to_owned();
        let p = pred.join(&name);
        if !p.exists() {
            return Err(Failure::Config(format!("no prediction for {}", name.to_string_lossy())));
        }
        masks.push((stem(g), read_mask(&p)?, read_mask(g)?));
    }
    let pairs: Vec<ImagePair<'_>> = masks
        .iter()
        .map(|(n, p, g)| ImagePair {
            name: n.clone(),
            pred: p,
            gt: g,
        })
        .collect();
    let report = evaluate(&pairs)?;
    write_json(out, &report)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(&out.with_extension("csv"), &buf)?;
    println!(
        "gIoU {:.4} cIoU {:.4} mPr {:.4} mRec {:.4} mDice {:.4} over {} image(s)",
        report.giou,
        report.ciou,
        report.mpr,
        report.mrec,
        report.mdice,
        pairs.len()
    );
    Ok(())
}

/// Upper edges of the per-image cost histogram, in USD.
const COST_BINS: [f64; 8] = [0.004, 0.006, 0.008, 0.010, 0.012, 0.014, 0.020, f64::INFINITY];

fn cmd_report(traces: &Path, out: &Path) -> CliResult {
    let mut runs: Vec<RunTrace> = Vec::new();
    let mut episodes: Vec<EpisodeRecord> = Vec::new();
    for f in list_files(traces, Some("jsonl"))? {
        for (n, line) in read_text(&f)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Failure::Config(format!("{}:{}: {e}", f.display(), n + 1)))?;
            let bad = |e: serde_json::Error| Failure::Config(format!("{}:{}: {e}", f.display(), n + 1));
            if value.get("crops").is_some() {
                runs.push(serde_json::from_value(value).map_err(bad)?);
            } else if value.get("episode").is_some() {
                episodes.push(serde_json::from_value(value).map_err(bad)?);
            } else {
                return Err(Failure::Config(format!("{}:{}: unrecognised trace line", f.display(), n + 1)));
            }
        }
    }
    if runs.is_empty() && episodes.is_empty() {
        return Err(Failure::Config(format!("no traces in {}", traces.display())));
    }

    let mut summary = serde_json::Map::new();
    if !episodes.is_empty() {
        let rows: Vec<Vec<String>> = episodes
            .iter()
            .map(|e| vec![e.episode.to_string(), e.reward.to_string(), e.cumulative_reward.to_string()])
            .collect();
        write_csv(&out.join("cumulative_reward.csv"), &["episode", "reward", "cumulative_reward"], &rows)?;
        let mut by_density: BTreeMap<Density, (usize, f64, f64)> = BTreeMap::new();
        for e in &episodes {
            let slot = by_density.entry(e.density).or_default();
            slot.0 += 1;
            slot.1 += e.issues_resolved;
            slot.2 += e.passes as f64;
        }
        let rows: Vec<Vec<String>> = by_density
            .iter()
            .map(|(d, (n, r, p))| {
                vec![
                    d.as_str().to_string(),
                    n.to_string(),
                    (r / *n as f64).to_string(),
                    (p / *n as f64).to_string(),
                ]
            })
            .collect();
        write_csv(
            &out.join("issues_by_density.csv"),
            &["density", "episodes", "issues_resolved_mean", "passes_mean"],
            &rows,
        )?;
        let min_after_200 = episodes
            .iter()
            .skip(200)
            .map(|e| e.cumulative_reward)
            .fold(f64::INFINITY, f64::min);
        summary.insert(
            "training".into(),
            json!({
                "episodes": episodes.len(),
                "final_cumulative_reward": episodes.last().map(|e| e.cumulative_reward),
                "min_cumulative_reward_after_200": min_after_200.is_finite().then_some(min_after_200),
            }),
        );
    }
    if !runs.is_empty() {
        let mut counts = vec![0usize; COST_BINS.len()];
        for r in &runs {
            let bin = COST_BINS.iter().position(|&e| r.summary.cost_usd <= e).expect("last bin is open");
            counts[bin] += 1;
        }
        let rows: Vec<Vec<String>> = COST_BINS
            .iter()
            .zip(&counts)
            .map(|(e, c)| vec![if e.is_finite() { e.to_string() } else { "inf".into() }, c.to_string()])
            .collect();
        write_csv(&out.join("cost_histogram.csv"), &["cost_usd_upper", "images"], &rows)?;
        let mut passes: BTreeMap<u32, usize> = BTreeMap::new();
        for c in runs.iter().flat_map(|r| &r.crops) {
            *passes.entry(c.passes()).or_default() += 1;
        }
        let rows: Vec<Vec<String>> = passes.iter().map(|(p, n)| vec![p.to_string(), n.to_string()]).collect();
        write_csv(&out.join("passes_histogram.csv"), &["passes", "crops"], &rows)?;
        let crops: Vec<_> = runs.iter().flat_map(|r| &r.crops).collect();
        let calls: Vec<LedgerEntry> = runs.iter().flat_map(|r| r.calls.clone()).collect();
        let cost: f64 = runs.iter().map(|r| r.summary.cost_usd).sum();
        summary.insert(
            "runs".into(),
            json!({
                "images": runs.len(),
                "crops": crops.len(),
                "mean_passes": crops.iter().map(|c| c.passes() as f64).sum::<f64>() / crops.len().max(1) as f64,
                "mean_issues_resolved_per_crop":
                    crops.iter().map(|c| c.issues_resolved).sum::<f64>() / crops.len().max(1) as f64,
                "calls": calls.len(),
                "failed_calls": calls.iter().filter(|c| !c.ok).count(),
                "total_cost_usd": cost,
                "mean_cost_usd": cost / runs.len() as f64,
            }),
        );
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!("wrote report for {} run(s) and {} episode(s) to {}", runs.len(), episodes.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Index { corpus, out } => cmd_index(&corpus, &out),
        Command::Run {
            image,
            config,
            qtable,
            out,
        } => cmd_run(&image, &config, qtable.as_deref(), &out),
        Command::Simulate(SimCommand::Train {
            config,
            episodes,
            qtable,
            trace,
        }) => cmd_train(&config, episodes, &qtable, trace.as_deref()),
        Command::Simulate(SimCommand::Ablate { config, qtable, out }) => cmd_ablate(&config, &qtable, &out),
        Command::Simulate(SimCommand::Fixture {
            out,
            count,
            seed,
            density,
            config,
        }) => cmd_fixture(&out, count, seed, density.into(), config.as_deref()),
        Command::Eval { pred, gt, out } => cmd_eval(&pred, &gt, &out),
        Command::Report { traces, out } => cmd_report(&traces, &out),
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", 1, e.to_string().trim_end()),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => fail("config", 1, &m),
        Err(Failure::Runtime(m)) => fail("runtime", 2, &m),
    }
}
