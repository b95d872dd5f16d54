use clap::{Args, Parser, Subcommand, ValueEnum};
use scenectx::context::AxisSet;
use scenectx::ergonomics::{optimize_poses, GradientMode, OptimizerConfig, RotationDofs};
use scenectx::io::{layout_to_json, load_bundle, load_cloud, load_mesh_dir, parse_portrait, save_bundle};
use scenectx::layout::{plan_layout, IcpParams};
use scenectx::navigation::{describe, plan_between, PathQuery};
use scenectx::projection::export_canonical_views;
use scenectx::protocol::{
    apply_edits, parse_edit_commands, parse_hypergraph, rebase_paths, run_session, serialize_readout, AgentEndpoint,
    HttpAgent, ScriptedAgent, ViewOptions,
};
use scenectx::{InstanceId, SpatialContext};
use serde_json::json;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "scenectx", version, about = "Build, inspect and edit spatial context bundles")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a bundle from a cloud, a hypergraph and a portrait.
    Init {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        portrait: PathBuf,
        /// Directory of `<id>.obj` meshes to attach (optional).
        #[arg(long)]
        meshes: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        unit_scale: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check bundle invariants.
    Validate { dir: PathBuf },
    /// Render point maps of the scene.
    Project {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Views::Canonical)]
        views: Views,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        splat: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write the text readout of a bundle.
    Readout {
        dir: PathBuf,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also render views into this directory and reference them.
        #[arg(long)]
        views_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
    },
    /// Align meshes to their instance segments.
    PlanLayout {
        dir: PathBuf,
        #[arg(long)]
        meshes: PathBuf,
        #[command(flatten)]
        icp: IcpFlags,
        #[command(flatten)]
        target: Target,
    },
    /// Jointly optimize instance poses against the hypergraph relations.
    Adjust {
        dir: PathBuf,
        #[command(flatten)]
        opt: OptimizerFlags,
        /// Write the per-iteration trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
    },
    /// Apply an edit command file.
    Edit {
        dir: PathBuf,
        #[arg(long)]
        commands: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Run a readout/update session against a scripted or remote agent.
    Session {
        dir: PathBuf,
        /// Script of agent responses, one block per turn closed by `end`.
        #[arg(long, required_unless_present = "agent_url", conflicts_with = "agent_url")]
        script: Option<PathBuf>,
        /// Remote agent endpoint.
        #[arg(long)]
        agent_url: Option<String>,
        #[arg(long, default_value_t = 60)]
        timeout_secs: u64,
        /// Transcript file; stdout when absent.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        views_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[command(flatten)]
        target: Target,
    },
    /// Plan a top-down path between two instances.
    Path {
        dir: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = scenectx::navigation::DEFAULT_RESOLUTION)]
        resolution: f64,
        #[arg(long, default_value_t = scenectx::navigation::DEFAULT_INFLATE)]
        inflate: f64,
        /// Absolute height band `LO,HI`; defaults to a fraction of the scene height.
        #[arg(long, value_parser = parse_band)]
        band: Option<(f64, f64)>,
        /// Dump the occupancy grid as PGM.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Write the path as JSON.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write the bundle's poses as layout JSON.
    ExportLayout {
        dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Views {
    Canonical,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rotation {
    Locked,
    Yaw,
    Full,
}

/// Where a modified bundle goes.
#[derive(Args)]
struct Target {
    /// Write the result to this bundle directory instead of in place.
    #[arg(long = "save-to")]
    save_to: Option<PathBuf>,
}

impl Target {
    fn dir<'a>(&'a self, input: &'a Path) -> &'a Path {
        self.save_to.as_deref().unwrap_or(input)
    }
}

#[derive(Args)]
struct IcpFlags {
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    rel_tolerance: f64,
    #[arg(long, default_value_t = 2048)]
    subsample_mesh: usize,
    #[arg(long, default_value_t = 2048)]
    subsample_target: usize,
    /// Fit rigid transforms only.
    #[arg(long)]
    no_scale: bool,
    #[arg(long)]
    resample_each_iteration: bool,
    #[arg(long, default_value_t = 0.0)]
    trim_fraction: f64,
    #[arg(long)]
    full_orientation_search: bool,
}

#[derive(Args)]
struct OptimizerFlags {
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,
    #[arg(long, default_value_t = 1e-6)]
    grad_tolerance: f64,
    #[arg(long, value_enum, default_value_t = Rotation::Yaw)]
    rotation: Rotation,
    /// Free translation axes, e.g. `xz`.
    #[arg(long, default_value = "xyz", value_parser = parse_axes)]
    translation_axes: AxisSet,
    /// Instance ids held fixed.
    #[arg(long, value_delimiter = ',')]
    fix: Vec<InstanceId>,
    #[arg(long, default_value_t = 512)]
    contact_samples: usize,
    /// Soft-min temperature for contact distances.
    #[arg(long)]
    contact_temperature: Option<f64>,
    /// Use closed-form gradients instead of central differences.
    #[arg(long)]
    analytic: bool,
}

fn parse_axes(s: &str) -> Result<AxisSet, String> {
    AxisSet::parse(s).ok_or_else(|| format!("expected a subset of xyz, got {s:?}"))
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

type CliResult = Result<(), String>;

fn err<E: Display>(e: E) -> String {
    e.to_string()
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("IoError: {}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| format!("IoError: {}: {e}", parent.display()))?;
    }
    std::fs::write(path, bytes).map_err(|e| format!("IoError: {}: {e}", path.display()))
}

fn base_of(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Writes to stdout, ignoring a closed pipe.
fn stdout(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn emit(json: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json {
        stdout(&format!("{}\n", serde_json::to_string_pretty(&value).expect("json value serializes")));
    } else {
        let t = text();
        if !t.is_empty() {
            stdout(&format!("{t}\n"));
        }
    }
}

fn save_checked(ctx: &SpatialContext, dir: &Path) -> CliResult {
    let report = ctx.validate();
    if !report.is_ok() {
        return Err(format!("ValidationFailed:\n{report}"));
    }
    save_bundle(ctx, dir).map_err(err)
}

fn run(cli: Cli) -> CliResult {
    let json = cli.json;
    match cli.command {
        Command::Init { cloud, graph, portrait, meshes, unit_scale, out } => {
            let mut cloud = load_cloud(&cloud).map_err(err)?;
            cloud.unit_scale = unit_scale;
            let graph = parse_hypergraph(&read(&graph)?).map_err(err)?;
            let portrait = parse_portrait(&read(&portrait)?);
            let mut ctx = SpatialContext::new(portrait, cloud, graph);
            if let Some(dir) = meshes {
                ctx.meshes = load_mesh_dir(&dir).map_err(err)?;
            }
            save_checked(&ctx, &out)?;
            emit(json, json!({ "bundle": out, "points": ctx.cloud.len(), "nodes": ctx.graph.nodes.len() }), || {
                format!("wrote {} ({} points, {} nodes)", out.display(), ctx.cloud.len(), ctx.graph.nodes.len())
            });
        }
        Command::Validate { dir } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let report = ctx.validate();
            let findings: Vec<String> = report.findings.iter().map(|f| f.to_string()).collect();
            if json {
                emit(true, json!({ "ok": report.is_ok(), "findings": findings }), String::new);
            } else if report.is_ok() {
                stdout("OK\n");
            }
            if !report.is_ok() {
                return Err(report.to_string());
            }
        }
        Command::Project { dir, views: Views::Canonical, resolution, splat, out } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let written = export_canonical_views(&ctx.cloud, &out, resolution, resolution, splat).map_err(err)?;
            emit(json, json!({ "files": written }), || {
                written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n")
            });
        }
        Command::Readout { dir, out, views_dir, resolution } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let views = views_dir.map(|d| ViewOptions { resolution, ..ViewOptions::new(d) });
            let text = serialize_readout(&ctx, views.as_ref()).map_err(err)?.to_text();
            match out {
                Some(path) => {
                    write(&path, &text)?;
                    emit(json, json!({ "readout": path }), || format!("wrote {}", path.display()));
                }
                None if json => emit(true, json!({ "readout_text": text }), String::new),
                None => stdout(&text),
            }
        }
        Command::PlanLayout { dir, meshes, icp, target } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let meshes = load_mesh_dir(&meshes).map_err(err)?;
            let params = IcpParams {
                max_iterations: icp.max_iterations,
                rel_tolerance: icp.rel_tolerance,
                subsample_mesh: icp.subsample_mesh,
                subsample_target: icp.subsample_target,
                with_scale: !icp.no_scale,
                seed: cli.seed,
                resample_each_iteration: icp.resample_each_iteration,
                trim_fraction: icp.trim_fraction,
                full_orientation_search: icp.full_orientation_search,
                ..IcpParams::default()
            };
            let (out, report) = plan_layout(&ctx, &meshes, &params).map_err(err)?;
            save_checked(&out, target.dir(&dir))?;
            let rows: Vec<_> = report
                .results
                .iter()
                .map(|(id, r)| json!({ "id": id, "objective": r.objective, "iterations": r.iterations, "converged": r.converged }))
                .collect();
            let failures: Vec<_> = report.failures.iter().map(|(id, e)| json!({ "id": id, "error": e.to_string() })).collect();
            emit(json, json!({ "aligned": rows, "failed": failures }), || {
                report
                    .results
                    .iter()
                    .map(|(id, r)| {
                        format!("{id}: objective {:.6e} after {} iterations{}", r.objective, r.iterations, if r.converged { "" } else { " (not converged)" })
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
            if !report.failures.is_empty() {
                let lines: Vec<String> = report.failures.iter().map(|(id, e)| format!("instance {id}: {e}")).collect();
                return Err(lines.join("\n"));
            }
        }
        Command::Adjust { dir, opt, trace, target } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let config = OptimizerConfig {
                rotation_dofs: match opt.rotation {
                    Rotation::Locked => RotationDofs::Locked,
                    Rotation::Yaw => RotationDofs::Yaw,
                    Rotation::Full => RotationDofs::Full,
                },
                translation_axes: opt.translation_axes,
                fixed: opt.fix.into_iter().collect::<BTreeSet<_>>(),
                max_iterations: opt.max_iterations,
                step_size: opt.step_size,
                grad_tolerance: opt.grad_tolerance,
                contact_samples: opt.contact_samples,
                contact_temperature: opt.contact_temperature,
                gradient: if opt.analytic { GradientMode::Analytic } else { GradientMode::CentralDifference },
                seed: cli.seed,
                ..OptimizerConfig::default()
            };
            let (out, t) = optimize_poses(&ctx, &config).map_err(err)?;
            if let Some(path) = trace {
                write(&path, t.to_csv())?;
            }
            save_checked(&out, target.dir(&dir))?;
            let initial = t.rows.first().map_or(0.0, |r| r.total_energy);
            emit(
                json,
                json!({ "iterations": t.iterations, "initial_energy": initial, "final_energy": t.final_energy(), "stop": format!("{:?}", t.stop) }),
                || format!("energy {initial:.6e} -> {:.6e} in {} iterations ({:?})", t.final_energy(), t.iterations, t.stop),
            );
        }
        Command::Edit { dir, commands, target } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let mut cmds = parse_edit_commands(&read(&commands)?).map_err(err)?;
            rebase_paths(&mut cmds, base_of(&commands));
            let out = apply_edits(&ctx, &cmds).map_err(err)?;
            save_bundle(&out, target.dir(&dir)).map_err(err)?;
            emit(json, json!({ "applied": cmds.len() }), || format!("applied {} edit(s)", cmds.len()));
        }
        Command::Session { dir, script, agent_url, timeout_secs, transcript, views_dir, resolution, target } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let (mut agent, base) = match (script, agent_url) {
                (Some(path), _) => {
                    let agent = ScriptedAgent::parse_script(&read(&path)?).map_err(err)?;
                    (AgentEndpoint::Scripted(agent), base_of(&path).to_path_buf())
                }
                (None, Some(url)) => (AgentEndpoint::Http(HttpAgent::from_env(url, Duration::from_secs(timeout_secs))), dir.clone()),
                (None, None) => unreachable!("clap requires one agent source"),
            };
            let views = views_dir.map(|d| ViewOptions { resolution, ..ViewOptions::new(d) });
            let outcome = run_session(&mut agent, &ctx, views.as_ref(), Some(&base));
            let (result, log) = match outcome {
                Ok((out, log)) => (Ok(out), log),
                Err(e) => (Err(e.error.to_string()), e.transcript),
            };
            let text = log.to_text();
            match &transcript {
                Some(path) => write(path, &text)?,
                None if !json => stdout(&text),
                None => {}
            }
            let out = result?;
            save_bundle(&out, target.dir(&dir)).map_err(err)?;
            if json {
                let mut v = json!({ "readouts": log.readouts(), "responses": log.responses() });
                if transcript.is_none() {
                    v["transcript"] = json!(text);
                }
                emit(true, v, String::new);
            }
        }
        Command::Path { dir, from, to, resolution, inflate, band, grid, out } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            let query = PathQuery { resolution, inflate, band };
            let (occupancy, path) = match plan_between(&ctx, &from, &to, &query) {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(grid_path), Ok(band)) = (&grid, band.map_or_else(|| scenectx::navigation::default_band(&ctx), Ok)) {
                        if let Ok(g) = scenectx::navigation::build_occupancy(&ctx, resolution, band, inflate) {
                            write(grid_path, g.to_pgm())?;
                        }
                    }
                    return Err(err(e));
                }
            };
            if let Some(g) = &grid {
                write(g, occupancy.to_pgm())?;
            }
            if let Some(o) = &out {
                write(o, path.to_json())?;
            }
            emit(json, serde_json::to_value(&path).expect("path serializes"), || describe(&path));
        }
        Command::ExportLayout { dir, out } => {
            let ctx = load_bundle(&dir).map_err(err)?;
            write(&out, layout_to_json(&ctx.poses))?;
            emit(json, json!({ "layout": out, "poses": ctx.poses.len() }), || {
                format!("wrote {} poses to {}", ctx.poses.len(), out.display())
            });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("{message}");
            ExitCode::from(1)
        }
    }
}
