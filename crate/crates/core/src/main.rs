use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rhplan_core::planner::{BudgetMode, PlannerMode};
use rhplan_core::sim::{generate_bugtrap, generate_forest, run_mission, SimConfig, World};
use rhplan_core::{DynamicLimits, PlannerConfig};

#[derive(Parser)]
#[command(name = "rhplan", version, about = "Receding-horizon planning in unknown voxel worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly one closed-loop mission and write its logs.
    Run(RunArgs),
    /// Write a generated world as JSON.
    World(WorldArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldKind {
    Forest,
    Bugtrap,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Faster,
    Conservative,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    Virtual,
    Wallclock,
}

#[derive(clap::Args)]
struct WorldSpec {
    #[arg(long, value_enum, default_value = "forest")]
    world: WorldKind,
    /// JSON world description, required with `--world file`.
    #[arg(long)]
    world_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the square forest in meters.
    #[arg(long, default_value_t = 20.0)]
    extent: f64,
    /// Trees per square meter.
    #[arg(long, default_value_t = 0.1)]
    density: f64,
    /// Width of the bugtrap opening in meters.
    #[arg(long, default_value_t = 2.0)]
    opening: f64,
    /// Inner size of the bugtrap in meters.
    #[arg(long, default_value_t = 8.0)]
    trap_size: f64,
}

impl WorldSpec {
    fn build(&self) -> Result<World, String> {
        match self.world {
            WorldKind::Forest => generate_forest(self.extent, self.density, self.seed).map_err(|e| e.to_string()),
            WorldKind::Bugtrap => generate_bugtrap(self.opening, self.trap_size).map_err(|e| e.to_string()),
            WorldKind::File => {
                let path = self.world_file.as_ref().ok_or("--world file needs --world-file")?;
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                World::from_json(&text).map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    world: WorldSpec,
    #[arg(long, default_value_t = 5.0)]
    vmax: f64,
    #[arg(long, default_value_t = 5.0)]
    amax: f64,
    #[arg(long, default_value_t = 8.0)]
    jmax: f64,
    #[arg(long, default_value_t = 10)]
    n_whole: usize,
    #[arg(long, default_value_t = 7)]
    n_safe: usize,
    /// Polyhedra per trajectory corridor.
    #[arg(long, default_value_t = 2)]
    pmax: usize,
    /// Radius of the planning sphere around A in meters.
    #[arg(long, default_value_t = 4.0)]
    sphere_radius: f64,
    /// Longest corridor segment in meters.
    #[arg(long, default_value_t = 2.0)]
    lmax: f64,
    #[arg(long, default_value_t = 1.25)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, value_enum, default_value = "faster")]
    mode: ModeArg,
    /// Replan duration used for the commit deadline.
    #[arg(long, value_enum, default_value = "virtual")]
    budget: BudgetArg,
    /// Seconds charged per replan with `--budget virtual`.
    #[arg(long, default_value_t = 0.05)]
    virtual_budget: f64,
    /// Mission time limit in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    #[arg(long, default_value_t = 1500)]
    rays: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct WorldArgs {
    #[command(flatten)]
    world: WorldSpec,
    #[arg(long)]
    out: PathBuf,
}

fn run(args: &RunArgs) -> Result<bool, String> {
    let world = args.world.build()?;
    let limits = DynamicLimits::new(args.vmax, args.amax, args.jmax).map_err(|e| e.to_string())?;
    let mut cfg = PlannerConfig::new(world.goal_point(), limits);
    cfg.n_whole = args.n_whole;
    cfg.n_safe = args.n_safe;
    cfg.p_max = args.pmax;
    cfg.sphere_radius = args.sphere_radius;
    cfg.l_max = args.lmax;
    cfg.alpha = args.alpha;
    cfg.beta = args.beta;
    cfg.mode = match args.mode {
        ModeArg::Faster => PlannerMode::Faster,
        ModeArg::Conservative => PlannerMode::Conservative,
    };
    cfg.budget = match args.budget {
        BudgetArg::Virtual => BudgetMode::Virtual(args.virtual_budget),
        BudgetArg::Wallclock => BudgetMode::WallClock,
    };
    let sim = SimConfig { timeout: args.timeout, rays: args.rays, ..SimConfig::default() };
    let out = run_mission(&world, &cfg, &sim).map_err(|e| e.to_string())?;
    out.write_all(&world, &args.out).map_err(|e| e.to_string())?;
    let m = &out.metrics;
    println!(
        "{:?}: time {:.2} s, distance {:.2} m, {} replans, {} commits, {} collisions",
        m.termination, m.total_time, m.total_distance, m.replan_count, m.commit_count, m.collisions
    );
    Ok(m.success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::World(args) => args
            .world
            .build()
            .and_then(|w| std::fs::write(&args.out, w.to_json() + "\n").map_err(|e| e.to_string()))
            .map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
