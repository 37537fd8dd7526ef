use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dd_core::attention::OptConfig;
use dd_core::compose::run_scene_compositing;
use dd_core::harness::{
    ablation_grid, attention_heatmap, capture_maps_at, contact_sheet, gradient_norm_csv, run_ssk, BatchMode, RunStore,
};
use dd_core::harness::diag::HEATMAP_UPSCALE;
use dd_core::placement::{run_placement_finetune, PlacementRequest, DEFAULT_PF_STEPS, DEFAULT_THRESHOLD_FRACTION};
use dd_core::{
    open_backend, run_directed_diffusion, Backend, BackendKind, BackendSelection, BoundingBox, DenoiseConfig,
    RegionDirective, RunRecord,
};
use dd_service::api::{AblateRequest, ComposeRequest};
use dd_service::{Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "dd", version, about = "Box-directed object placement for latent diffusion")]
struct Cli {
    /// Run store root.
    #[arg(long, global = true, env = "DD_STORE", default_value = "dd-store")]
    store: PathBuf,

    #[arg(long, global = true, default_value = "toy")]
    backend: BackendKind,

    /// Checkpoint for the pretrained backend.
    #[arg(long, global = true)]
    model_id: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One directed run.
    Generate {
        #[command(flatten)]
        job: JobArgs,
        /// Also write the decoded image here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k runs over consecutive seeds.
    Ssk {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long, default_value_t = 12)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed0: u64,
        /// Parallel workers, each with its own backend.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Scene compositing from a JSON spec file.
    Compose { spec: PathBuf },
    /// Move a directed object of a stored run.
    Pf {
        #[arg(long)]
        run: String,
        #[arg(long, allow_hyphen_values = true)]
        dx: i64,
        #[arg(long, allow_hyphen_values = true)]
        dy: i64,
        /// Directive label; defaults to the run's first directive.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value_t = DEFAULT_PF_STEPS)]
        edit_steps: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_FRACTION)]
        threshold: f32,
    },
    /// Direct-injection ablation grid from a JSON spec file.
    Ablate {
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Gradient-norm CSV, contact sheets and attention heatmaps.
    Diag {
        /// Runs to include; the first one drives the CSV and heatmap.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        sheet: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        columns: usize,
        /// 1-based token whose map is rendered to --heatmap.
        #[arg(long, requires = "heatmap")]
        token: Option<usize>,
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Replay the unedited maps at this step instead of the final ones.
        #[arg(long)]
        step: Option<usize>,
    },
    /// HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Print the backend's tokens for a prompt with their 1-based indices.
    Tokenize { prompt: String },
}

#[derive(Args)]
struct JobArgs {
    prompt: String,
    /// Box as left,right,top,bottom fractions; repeat for several directives.
    #[arg(long = "box", allow_hyphen_values = true)]
    boxes: Vec<String>,
    /// Comma-separated 1-based token indices, one per --box.
    #[arg(long)]
    tokens: Vec<String>,
    /// Directive labels, one per --box (default: the first bound token).
    #[arg(long)]
    label: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = dd_core::pipeline::DEFAULT_TOTAL_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = dd_core::pipeline::DEFAULT_EDIT_STEPS)]
    edit_steps: usize,
    #[arg(long, default_value_t = dd_core::pipeline::DEFAULT_GUIDANCE_SCALE)]
    guidance: f64,
    #[arg(long, default_value_t = OptConfig::default().iterations)]
    iterations: usize,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{what} {p:?}: {e}")))
        .collect()
}

impl JobArgs {
    fn directives(&self, backend: &dyn Backend) -> Result<Vec<RegionDirective>> {
        if self.boxes.len() != self.tokens.len() {
            bail!("{} --box values but {} --tokens values", self.boxes.len(), self.tokens.len());
        }
        let tokens = backend.tokenize(&self.prompt)?;
        let mut out = Vec::new();
        for (i, (b, t)) in self.boxes.iter().zip(&self.tokens).enumerate() {
            let v: Vec<f64> = parse_list(b, "box coordinate")?;
            let [l, r, top, bottom] = v[..] else {
                bail!("--box takes four values left,right,top,bottom, got {b:?}");
            };
            let indices: Vec<usize> = parse_list(t, "token index")?;
            let label = match self.label.get(i) {
                Some(l) => l.clone(),
                None => indices
                    .first()
                    .and_then(|&k| tokens.get(k.wrapping_sub(1)))
                    .cloned()
                    .unwrap_or_default(),
            };
            out.push(RegionDirective::new(BoundingBox::new(l, r, top, bottom)?, indices, label)?);
        }
        Ok(out)
    }

    fn config(&self) -> DenoiseConfig {
        DenoiseConfig {
            total_steps: self.steps,
            edit_steps: self.edit_steps,
            guidance_scale: self.guidance,
            seed: self.seed,
            opt: OptConfig {
                iterations: self.iterations,
                ..OptConfig::default()
            },
            ..DenoiseConfig::default()
        }
    }
}

fn mode(workers: usize) -> BatchMode {
    if workers > 1 {
        BatchMode::Parallel { workers }
    } else {
        BatchMode::Sequential
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report(record: &RunRecord) {
    match &record.status {
        dd_core::RunStatus::Complete => println!("{}", record.run_id),
        dd_core::RunStatus::Failed { step, message } => {
            println!("{}\tfailed at step {step}: {message}", record.run_id)
        }
    }
}

fn report_cells<K: std::fmt::Debug>(cells: &[dd_core::harness::Cell<K>]) {
    for c in cells {
        match &c.outcome {
            Ok(rec) => {
                print!("{:?}\t", c.key);
                report(rec);
            }
            Err(e) => println!("{:?}\terror: {e}", c.key),
        }
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut selection = BackendSelection {
        backend: cli.backend,
        ..BackendSelection::default()
    };
    if let Some(id) = &cli.model_id {
        selection.model_id = id.clone();
    }
    let factory = || open_backend(&selection);

    match &cli.command {
        Command::Serve { addr, cors_origin } => {
            let service = Service::start(ServiceConfig {
                store_root: cli.store.clone(),
                backend: selection.clone(),
                cors_origin: cors_origin.clone(),
            })?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                service.serve(listener).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::Tokenize { prompt } => {
            let backend = factory()?;
            for (i, t) in backend.tokenize(prompt)?.iter().enumerate() {
                println!("{}\t{t}", i + 1);
            }
        }
        Command::Generate { job, out } => {
            let backend = factory()?;
            let store = RunStore::open(&cli.store)?;
            let rec = run_directed_diffusion(backend.as_ref(), &job.prompt, &job.directives(backend.as_ref())?, &job.config())?;
            store.save(&rec)?;
            if let (Some(path), Some(img)) = (out, &rec.image) {
                std::fs::write(path, img.to_png()?).with_context(|| format!("writing {}", path.display()))?;
            }
            report(&rec);
        }
        Command::Ssk { job, k, seed0, workers } => {
            let store = RunStore::open(&cli.store)?;
            let directives = job.directives(factory()?.as_ref())?;
            let cells = run_ssk(&factory, mode(*workers), &job.prompt, &directives, &job.config(), *seed0, *k, Some(&store))?;
            report_cells(&cells);
        }
        Command::Compose { spec } => {
            let req: ComposeRequest = read_json(spec)?;
            let backend = factory()?;
            let store = RunStore::open(&cli.store)?;
            let sources = req
                .sources
                .iter()
                .map(|s| store.load(&s.run_id))
                .collect::<dd_core::Result<Vec<_>>>()?;
            let refs: Vec<&RunRecord> = sources.iter().collect();
            let rec = run_scene_compositing(backend.as_ref(), &req.spec(), &refs, &req.config)?;
            store.save(&rec)?;
            report(&rec);
        }
        Command::Pf { run, dx, dy, label, edit_steps, threshold } => {
            let backend = factory()?;
            let store = RunStore::open(&cli.store)?;
            let source = store.load(run)?;
            let directive_label = match label {
                Some(l) => l.clone(),
                None => match source.directives.first() {
                    Some(d) => d.label.clone(),
                    None => bail!("run {run} has no directives to move"),
                },
            };
            let req = PlacementRequest {
                source_run_id: run.clone(),
                directive_label,
                dx: *dx,
                dy: *dy,
                edit_steps: *edit_steps,
                threshold_fraction: *threshold,
            };
            let rec = run_placement_finetune(backend.as_ref(), &source, &req)?;
            store.save(&rec)?;
            report(&rec);
        }
        Command::Ablate { spec, workers } => {
            let req: AblateRequest = read_json(spec)?;
            let store = RunStore::open(&cli.store)?;
            let cells = ablation_grid(&factory, mode(*workers), &req.prompt, &req.directives, &req.config, &req.grid(), Some(&store))?;
            report_cells(&cells);
        }
        Command::Diag { runs, csv, sheet, columns, token, heatmap, step } => {
            let store = RunStore::open(&cli.store)?;
            let records = runs.iter().map(|id| store.load(id)).collect::<dd_core::Result<Vec<_>>>()?;
            let first = &records[0];
            let table = gradient_norm_csv(first)?;
            match csv {
                Some(path) => std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?,
                None if sheet.is_none() && heatmap.is_none() => print!("{table}"),
                None => {}
            }
            if let Some(path) = sheet {
                let images: Vec<_> = records
                    .iter()
                    .map(|r| r.image.clone().with_context(|| format!("run {} has no image", r.run_id)))
                    .collect::<Result<_>>()?;
                let png = contact_sheet(&images, *columns)?.to_png()?;
                std::fs::write(path, png).with_context(|| format!("writing {}", path.display()))?;
            }
            if let (Some(path), Some(token)) = (heatmap, token) {
                let maps = match step {
                    Some(k) => capture_maps_at(factory()?.as_ref(), first, *k)?,
                    None => first
                        .final_attention
                        .clone()
                        .with_context(|| format!("run {} has no attention maps", first.run_id))?,
                };
                let png = attention_heatmap(&maps, *token, HEATMAP_UPSCALE)?.to_png()?;
                std::fs::write(path, png).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}
