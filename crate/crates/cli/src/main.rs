//! `defield` command-line front end.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print one JSON
//! error record on stderr and exit with a code specific to the error kind.
//! File arguments are resolved against `--out` (absolute paths pass through).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use defield_core::cohort::{
    self, analyze_cohort, parse_fixture, read_manifest, region_statistics, reproduce_paper,
    tables_csv,
};
use defield_core::defanalysis::{collect_samples, jacobian_map, partition_regions, pool};
use defield_core::io::{read_field, read_mask, read_volume};
use defield_core::phantom::{write_cohort, GrowthMode, PhantomSpec};
use defield_core::registration::{register, SymmetricTransform};
use defield_core::volume::{warp_mask, VectorField};
use defield_core::{Error, JacobianMap, PipelineConfig, RegionSamples, Result};

const THREADS_ENV: &str = "DEFIELD_THREADS";

#[derive(Parser)]
#[command(
    name = "defield",
    version,
    about = "Deformation-field response analysis"
)]
struct Cli {
    /// Config file with `key = value` lines, read relative to the working
    /// directory.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// One flag per config key; a given flag replaces the file value.
#[derive(Args)]
struct Overrides {
    #[arg(
        long = "pyramid_levels",
        global = true,
        allow_hyphen_values = true,
        value_name = "N"
    )]
    pyramid_levels: Option<String>,
    #[arg(
        long = "iterations_per_level",
        global = true,
        allow_hyphen_values = true,
        value_name = "N"
    )]
    iterations_per_level: Option<String>,
    #[arg(
        long = "lcc_sigma",
        global = true,
        allow_hyphen_values = true,
        value_name = "VOXELS"
    )]
    lcc_sigma: Option<String>,
    #[arg(
        long = "fluid_sigma",
        global = true,
        allow_hyphen_values = true,
        value_name = "VOXELS"
    )]
    fluid_sigma: Option<String>,
    #[arg(
        long = "diffusion_sigma",
        global = true,
        allow_hyphen_values = true,
        value_name = "VOXELS"
    )]
    diffusion_sigma: Option<String>,
    #[arg(
        long = "exp_steps",
        global = true,
        allow_hyphen_values = true,
        value_name = "N|auto"
    )]
    exp_steps: Option<String>,
    #[arg(
        long = "step_scale",
        global = true,
        allow_hyphen_values = true,
        value_name = "X"
    )]
    step_scale: Option<String>,
    #[arg(
        long = "convergence_tol",
        global = true,
        allow_hyphen_values = true,
        value_name = "X"
    )]
    convergence_tol: Option<String>,
    #[arg(
        long = "bootstrap_resamples",
        global = true,
        allow_hyphen_values = true,
        value_name = "N"
    )]
    bootstrap_resamples: Option<String>,
    #[arg(
        long = "bootstrap_seed",
        global = true,
        allow_hyphen_values = true,
        value_name = "SEED"
    )]
    bootstrap_seed: Option<String>,
    #[arg(
        long = "week_limit",
        global = true,
        allow_hyphen_values = true,
        value_name = "all|N"
    )]
    week_limit: Option<String>,
    #[arg(
        long = "population_ids",
        global = true,
        allow_hyphen_values = true,
        value_name = "ID,..."
    )]
    population_ids: Option<String>,
    #[arg(
        long = "test_ids",
        global = true,
        allow_hyphen_values = true,
        value_name = "ID,..."
    )]
    test_ids: Option<String>,
    #[arg(
        long = "out",
        global = true,
        allow_hyphen_values = true,
        value_name = "DIR"
    )]
    out: Option<String>,
    #[arg(
        long = "confidence_level",
        global = true,
        allow_hyphen_values = true,
        value_name = "X"
    )]
    confidence_level: Option<String>,
    #[arg(
        long = "workers",
        global = true,
        allow_hyphen_values = true,
        value_name = "N|auto"
    )]
    workers: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 16] {
        [
            ("pyramid_levels", &self.pyramid_levels),
            ("iterations_per_level", &self.iterations_per_level),
            ("lcc_sigma", &self.lcc_sigma),
            ("fluid_sigma", &self.fluid_sigma),
            ("diffusion_sigma", &self.diffusion_sigma),
            ("exp_steps", &self.exp_steps),
            ("step_scale", &self.step_scale),
            ("convergence_tol", &self.convergence_tol),
            ("bootstrap_resamples", &self.bootstrap_resamples),
            ("bootstrap_seed", &self.bootstrap_seed),
            ("week_limit", &self.week_limit),
            ("population_ids", &self.population_ids),
            ("test_ids", &self.test_ids),
            ("out", &self.out),
            ("confidence_level", &self.confidence_level),
            ("workers", &self.workers),
        ]
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Forward,
    Backward,
}

/// Where a displacement comes from: a transform directory or a bare field.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct FieldSource {
    /// Transform directory written by `register`.
    #[arg(long)]
    transform: Option<PathBuf>,
    /// Displacement field file, e.g. a phantom ground truth.
    #[arg(long)]
    field: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Register a source scan onto a target scan.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Output directory for the transform.
        #[arg(long)]
        transform: PathBuf,
    },
    /// Jacobian determinant map of a displacement.
    Jacobian {
        #[command(flatten)]
        from: FieldSource,
        #[arg(long, value_enum, default_value = "forward")]
        direction: Direction,
        #[arg(long)]
        output: PathBuf,
    },
    /// Region partition and Jacobian samples for one week pair.
    Regions {
        #[arg(long)]
        mask_prev: PathBuf,
        #[arg(long)]
        mask_next: PathBuf,
        #[command(flatten)]
        from: FieldSource,
        #[arg(long, default_value_t = 0)]
        week_index: usize,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Confidence intervals, t matrix and box-plot data from sample CSVs.
    Stats {
        #[arg(long = "samples", required = true, num_args = 1..)]
        samples: Vec<PathBuf>,
        /// Report name; writes NAME.json, NAME.csv and NAME_boxplot.csv.
        #[arg(long)]
        report: PathBuf,
    },
    /// Register and classify every patient in a cohort manifest.
    Classify {
        #[arg(long)]
        manifest: PathBuf,
        /// Report name; writes NAME.json, NAME_patients.csv and NAME_tables.csv.
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a synthetic cohort with ground-truth fields.
    Phantom {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        patients: usize,
        /// JSON phantom spec; missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        mode: Option<GrowthMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        weeks: Option<usize>,
        /// Cubic grid edge in voxels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Rebuild the response tables from the appendix fixture.
    ReproducePaper {
        /// Fixture CSV; the built-in transcription when absent.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Report name; writes NAME.json and NAME_tables.csv.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn exit_code(code: &str) -> u8 {
    match code {
        "invalid_parameter" => 3,
        "invalid_geometry" => 4,
        "geometry_mismatch" => 5,
        "length_mismatch" => 6,
        "non_finite" => 7,
        "degenerate_input" => 8,
        "empty_input" => 9,
        "malformed_file" => 10,
        "missing_file" => 11,
        "io_error" => 12,
        "json_error" => 13,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    for (key, value) in cli.overrides.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_count(cfg: &PipelineConfig) -> Result<usize> {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut n = cfg.workers.unwrap_or(avail);
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let cap: usize = v.trim().parse().ok().filter(|&c| c > 0).ok_or_else(|| {
            Error::InvalidParameter(format!("{THREADS_ENV}='{v}' is not a positive integer"))
        })?;
        n = n.min(cap);
    }
    Ok(n)
}

struct Ctx {
    cfg: PipelineConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.out.join(p)
    }

    fn with_suffix(&self, name: &Path, suffix: &str) -> PathBuf {
        let mut s = self.path(name).into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    fn field(&self, from: &FieldSource, dir: Direction) -> Result<VectorField> {
        match (&from.transform, &from.field) {
            (Some(t), _) => {
                let (t, _, _) = SymmetricTransform::read_dir(self.path(t))?;
                Ok(match dir {
                    Direction::Forward => t.forward,
                    Direction::Backward => t.backward,
                })
            }
            (None, Some(f)) => read_field(self.path(f)),
            (None, None) => Err(Error::InvalidParameter(
                "need --transform or --field".into(),
            )),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn jacobian_summary(j: &JacobianMap) -> Value {
    let nonpositive = j.data().iter().filter(|&&v| v <= 0.0).count();
    json!({
        "mean": j.mean(),
        "min": j.data().iter().copied().fold(f64::INFINITY, f64::min),
        "max": j.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "interior_min": j.interior_min(1),
        "nonpositive_voxels": nonpositive,
    })
}

fn run(cmd: &Command, ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    match cmd {
        Command::Register {
            source,
            target,
            transform,
        } => {
            let s = read_volume(ctx.path(source))?;
            let t = read_volume(ctx.path(target))?;
            let (tr, trace) = register(&s, &t, &cfg.registration)?;
            let dir = ctx.path(transform);
            tr.write_dir(&dir, &cfg.registration, &trace)?;
            let (mean_res, max_res) = tr.inverse_residual()?;
            Ok(json!({
                "transform": show(&dir),
                "iterations": trace.len(),
                "final_similarity": trace.final_energy(),
                "forward_mean_norm": tr.forward.mean_norm(),
                "forward_max_norm": tr.forward.max_norm(),
                "inverse_residual_mean": mean_res,
                "inverse_residual_max": max_res,
            }))
        }
        Command::Jacobian {
            from,
            direction,
            output,
        } => {
            let j = jacobian_map(&ctx.field(from, *direction)?)?;
            let out = ctx.path(output);
            j.write(&out)?;
            let mut v = jacobian_summary(&j);
            v["output"] = json!(show(&out));
            Ok(v)
        }
        Command::Regions {
            mask_prev,
            mask_next,
            from,
            week_index,
            partition,
            samples,
        } => {
            let prev = read_mask(ctx.path(mask_prev))?;
            let next = read_mask(ctx.path(mask_next))?;
            let forward = ctx.field(from, Direction::Forward)?;
            let mut part = partition_regions(&warp_mask(&prev, &forward)?, &next)?;
            part.week_index = *week_index;
            let s = collect_samples(&jacobian_map(&forward)?, &part)?;
            let (pp, sp) = (ctx.path(partition), ctx.path(samples));
            part.write(&pp)?;
            s.write_csv(&sp)?;
            let counts: serde_json::Map<String, Value> = defield_core::RegionLabel::ALL
                .iter()
                .map(|&l| {
                    (
                        l.to_string(),
                        json!({"voxels": part.count(l), "samples": s.count(l), "mean": s.mean(l)}),
                    )
                })
                .collect();
            Ok(json!({
                "partition": show(&pp),
                "samples": show(&sp),
                "week_index": week_index,
                "regions": counts,
            }))
        }
        Command::Stats { samples, report } => {
            let sets = samples
                .iter()
                .map(|p| RegionSamples::read_csv(ctx.path(p)))
                .collect::<Result<Vec<_>>>()?;
            let pooled = pool(&sets)?;
            let st = region_statistics(
                &pooled,
                cfg.confidence_level,
                cfg.bootstrap_resamples,
                cfg.bootstrap_seed,
            )?;
            let files = [
                (ctx.with_suffix(report, ".json"), pretty(&st)?),
                (ctx.with_suffix(report, ".csv"), st.summaries_csv()),
                (ctx.with_suffix(report, "_boxplot.csv"), st.boxplot_csv()),
            ];
            for (p, text) in &files {
                ctx.write(p, text)?;
            }
            Ok(json!({
                "files": files.iter().map(|(p, _)| show(p)).collect::<Vec<_>>(),
                "empty_regions": st.empty_regions,
                "ordering_matches": st.ordering.as_ref().map(|o| o.matches_expected()),
            }))
        }
        Command::Classify { manifest, report } => {
            let records = read_manifest(ctx.path(manifest))?;
            let rep = analyze_cohort(&records, &cfg.registration, cfg.week_limit, &cfg.split())?;
            let tables: Vec<&cohort::TableSummary> =
                rep.full.iter().chain(rep.three_week.iter()).collect();
            let files = [
                (ctx.with_suffix(report, ".json"), pretty(&rep)?),
                (ctx.with_suffix(report, "_patients.csv"), rep.patients_csv()),
                (ctx.with_suffix(report, "_tables.csv"), tables_csv(&tables)),
            ];
            for (p, text) in &files {
                ctx.write(p, text)?;
            }
            for w in &rep.warnings {
                eprintln!("{}", json!({ "warning": w }));
            }
            Ok(json!({
                "files": files.iter().map(|(p, _)| show(p)).collect::<Vec<_>>(),
                "patients": rep.patients.len(),
                "pr_full": rep.pr_count(true),
                "pr_limited": rep.pr_count(false),
                "week_limit": cfg.week_limit.to_string(),
                "ordering_matches": rep.ordering.as_ref().map(|o| o.matches_expected()),
                "warnings": rep.warnings.len(),
            }))
        }
        Command::Phantom {
            dir,
            patients,
            spec,
            mode,
            seed,
            weeks,
            size,
            radius,
            amplitude,
            noise_sd,
        } => {
            let mut s = match spec {
                Some(p) => {
                    let p = ctx.path(p);
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    serde_json::from_str::<PhantomSpec>(&text).map_err(|e| Error::Malformed {
                        path: p.clone(),
                        message: e.to_string(),
                    })?
                }
                None => PhantomSpec::default(),
            };
            if let Some(m) = mode {
                s.mode = *m;
            }
            if let Some(v) = seed {
                s.seed = *v;
            }
            if let Some(v) = weeks {
                s.weeks = *v;
            }
            if let Some(v) = size {
                s.dims = [*v; 3];
            }
            if let Some(v) = radius {
                s.tumor_radius = *v;
            }
            if let Some(v) = amplitude {
                s.amplitude = *v;
            }
            if let Some(v) = noise_sd {
                s.noise_sd = *v;
            }
            let dir = ctx.path(dir);
            let manifest = write_cohort(&s, *patients, &dir)?;
            Ok(json!({ "manifest": show(&manifest), "patients": patients, "spec": s }))
        }
        Command::ReproducePaper { fixture, report } => {
            let rows = match fixture {
                Some(p) => {
                    let p = ctx.path(p);
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    parse_fixture(&text, &p)?
                }
                None => cohort::appendix_fixture(),
            };
            let rep = reproduce_paper(&rows)?;
            let mut files = Vec::new();
            if let Some(name) = report {
                let pj = ctx.with_suffix(name, ".json");
                let pt = ctx.with_suffix(name, "_tables.csv");
                ctx.write(&pj, &pretty(&rep)?)?;
                ctx.write(&pt, &tables_csv(&[&rep.full, &rep.three_week]))?;
                files = vec![show(&pj), show(&pt)];
            }
            let mut v = serde_json::to_value(&rep)?;
            v["files"] = json!(files);
            Ok(v)
        }
        Command::Config => Ok(json!({ "config": cfg.to_text() })),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| {
        let threads = thread_count(&cfg)?;
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
        if let Command::Config = cli.command {
            let _ = write!(std::io::stdout(), "{}", cfg.to_text());
            return Ok(None);
        }
        run(&cli.command, &Ctx { cfg }).map(Some)
    });
    match result {
        Ok(Some(v)) => {
            // A closed pipe on stdout is not a failure of the command.
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&v).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.code();
            let status = exit_code(code);
            eprintln!(
                "{}",
                json!({ "error": { "code": code, "message": e.to_string(), "exit_code": status } })
            );
            ExitCode::from(status)
        }
    }
}
