mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use scancontext::descriptor::DescriptorKind;
use scancontext::eval::{self, GroundTruthFrame};
use scancontext::pointcloud::{self, PointCloud};
use scancontext::{Error, PlaceDatabase, SemiMetricPose};

use config::Overrides;

/// Structural place recognition for range scans.
#[derive(Parser, Debug)]
#[command(name = "scancontext", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Polar,
    Cart,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Switch {
    Off,
    On,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Frame {
    Camera,
    Lidar,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// key=value file; flags given on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Descriptor type
    #[arg(long, global = true)]
    kind: Option<Kind>,

    /// Store augmented viewpoints (root shifts for polar, double flip for cart)
    #[arg(long, global = true)]
    augment: Option<Switch>,

    /// Acceptance threshold on the descriptor distance
    #[arg(long, global = true)]
    tau: Option<f64>,

    /// Candidates taken from the retrieval-key tree
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Shifts searched on each side of the pre-aligned shift
    #[arg(long, global = true)]
    half_width: Option<usize>,

    /// Equidistant sampling step in meters
    #[arg(long, global = true)]
    spacing: Option<f64>,

    /// Correctness radius in meters
    #[arg(long, global = true)]
    radius: Option<f64>,

    /// Exclusion window in places
    #[arg(long, global = true)]
    exclude: Option<u64>,

    /// Voxel size in meters, or "none"
    #[arg(long, global = true)]
    leaf: Option<String>,

    /// Rebuild the index after this many insertions
    #[arg(long, global = true)]
    rebuild_every: Option<usize>,

    /// Lowest threshold of the sweep
    #[arg(long, global = true)]
    tau_min: Option<f64>,

    /// Highest threshold of the sweep
    #[arg(long, global = true)]
    tau_max: Option<f64>,

    /// Number of thresholds in the sweep
    #[arg(long, global = true)]
    tau_steps: Option<usize>,

    /// Axis convention of pose files
    #[arg(long, global = true)]
    frame: Option<Frame>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a descriptor and its keys for one scan
    Describe {
        scan: PathBuf,
        /// Output prefix; writes PREFIX.csv, PREFIX.scd, PREFIX_retrieval_key.csv, PREFIX_aligning_key.csv
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Build a place database from a directory of scans
    Index {
        scan_dir: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Look up one scan in a database and print the match as JSON
    Query {
        db: PathBuf,
        scan: PathBuf,
        /// Place id of the query, for the exclusion window
        #[arg(long)]
        id: Option<u64>,
    },
    /// Run the loop-closure benchmark and write CSV/JSON reports
    Eval {
        scan_dir: PathBuf,
        poses: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Map session scans; SCAN_DIR and POSES then hold the query session
        #[arg(long, requires = "map_poses")]
        map_scans: Option<PathBuf>,
        #[arg(long, requires = "map_scans")]
        map_poses: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::IoPath { .. } | Error::Format(_) | Error::Parse { .. } | Error::Version(_) => 2,
            Error::Alignment { .. } => 4,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl Failure {
    fn at(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
        move |e| {
            let mut f = Failure::from(e);
            if !f.message.contains(&*path.to_string_lossy()) {
                f.message = format!("{}: {}", path.display(), f.message);
            }
            f
        }
    }
}

type CliResult<T> = Result<T, Failure>;

impl GlobalArgs {
    fn overrides(&self) -> CliResult<Overrides> {
        let file = match &self.config {
            Some(path) => Overrides::load(path)?,
            None => Overrides::default(),
        };
        let mut flags = Overrides {
            kind: self.kind.map(|k| match k {
                Kind::Polar => DescriptorKind::Polar,
                Kind::Cart => DescriptorKind::Cartesian,
            }),
            augment: self.augment.map(|s| matches!(s, Switch::On)),
            tau: self.tau,
            k: self.k,
            half_width: self.half_width,
            spacing: self.spacing,
            radius: self.radius,
            exclude: self.exclude,
            rebuild_every: self.rebuild_every,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            tau_steps: self.tau_steps,
            frame: self.frame.map(|f| match f {
                Frame::Camera => GroundTruthFrame::Camera,
                Frame::Lidar => GroundTruthFrame::Lidar,
            }),
            ..Default::default()
        };
        if let Some(leaf) = &self.leaf {
            flags.set("leaf", leaf)?;
        }
        Ok(file.merge(&flags))
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("SC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::from(Error::InvalidParam(format!("SC_THREADS must be a positive integer, got {value:?}"))))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::from(Error::InvalidParam(e.to_string())))
}

fn load(path: &Path) -> CliResult<PointCloud> {
    pointcloud::load_scan(path).map_err(Failure::at(path))
}

fn scan_list(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let scans = eval::list_scans(dir).map_err(Failure::at(dir))?;
    if scans.is_empty() {
        return Err(Error::InvalidParam(format!("{}: no scans found", dir.display())).into());
    }
    Ok(scans)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, body).map_err(|e| Error::IoPath { path: path.into(), source: e }.into())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn key_csv(values: &[f64]) -> String {
    let mut s = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn describe(o: &Overrides, scan: &Path, out: &Path) -> CliResult<()> {
    let db = PlaceDatabase::new(o.database()?)?;
    let q = db.describe(&load(scan)?)?;
    let d = &q.descriptor;
    write(&with_suffix(out, ".csv"), d.to_csv())?;
    let mut record = Vec::new();
    d.write_record(&mut record)?;
    write(&with_suffix(out, ".scd"), record)?;
    write(&with_suffix(out, "_retrieval_key.csv"), key_csv(q.retrieval_key.values()))?;
    write(&with_suffix(out, "_aligning_key.csv"), key_csv(q.aligning_key.values()))?;
    println!("{} {}x{}", d.kind(), d.rows(), d.cols());
    Ok(())
}

fn index(o: &Overrides, dir: &Path, out: &Path) -> CliResult<()> {
    let scans = scan_list(dir)?;
    let mut db = PlaceDatabase::new(o.database()?)?;
    let prepared: Vec<_> = {
        let db = &db;
        scans
            .par_iter()
            .map(|p| db.prepare(&load(p)?).map_err(Failure::at(p)))
            .collect::<CliResult<_>>()?
    };
    for (i, place) in prepared.into_iter().enumerate() {
        db.insert_prepared(place, i as u64)?;
    }
    db.rebuild_index();
    db.save(out)?;
    println!(
        "{} places: {} entries ({} original, {} augmented)",
        scans.len(),
        db.len(),
        db.original_count(),
        db.augmented_count()
    );
    Ok(())
}

fn query(o: &Overrides, db_path: &Path, scan: &Path, id: Option<u64>) -> CliResult<()> {
    let mut db = PlaceDatabase::load(db_path).map_err(Failure::at(db_path))?;
    let mut c = db.config().clone();
    o.apply_query(&mut c);
    db.set_query_options(c.k, c.tau, c.half_width)?;
    if let Some(e) = o.exclude {
        db.set_exclusion_window(e);
    }
    let outcome = db.query(&load(scan)?, id)?;
    let best = outcome.best();
    let mut v = json!({
        "matched": outcome.matched().is_some(),
        "place_id": best.map(|m| m.place_id),
        "distance": best.map(|m| m.distance),
        "shift": best.map(|m| m.shift),
    });
    let pose_key = match db.config().params.kind {
        DescriptorKind::Polar => "pose_deg",
        DescriptorKind::Cartesian => "pose_m",
    };
    v[pose_key] = json!(best.map(|m| match m.pose {
        SemiMetricPose::Yaw(x) | SemiMetricPose::Lateral(x) => x,
    }));
    v["augmentation"] = json!(best.map(|m| m.augmentation.to_string()));
    println!("{v}");
    Ok(())
}

fn evaluate(o: &Overrides, dir: &Path, poses: &Path, out: &Path, map: Option<(&Path, &Path)>) -> CliResult<()> {
    let config = o.benchmark()?;
    let scans = scan_list(dir)?;
    let query_poses = eval::load_kitti_poses(poses).map_err(Failure::at(poses))?;
    if scans.len() != query_poses.len() {
        return Err(Error::Alignment { scans: scans.len(), poses: query_poses.len() }.into());
    }
    let load_query = |i: usize| pointcloud::load_scan(&scans[i]);
    let report = match map {
        None => eval::run_online(load_query, &query_poses, &config),
        Some((map_dir, map_pose_file)) => {
            let map_scans = scan_list(map_dir)?;
            let map_poses = eval::load_kitti_poses(map_pose_file).map_err(Failure::at(map_pose_file))?;
            if map_scans.len() != map_poses.len() {
                return Err(Error::Alignment { scans: map_scans.len(), poses: map_poses.len() }.into());
            }
            eval::run_split(|i| pointcloud::load_scan(&map_scans[i]), &map_poses, load_query, &query_poses, &config)
        }
    }?;
    report.write(out)?;
    let best = report.max_f1();
    println!(
        "{} queries, auc {:.4}, max F1 {:.4} at tau {:.4}",
        report.matches.len(),
        report.auc,
        best.map_or(0.0, |r| r.f1),
        best.map_or(0.0, |r| r.tau)
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let o = cli.global.overrides()?;
    match &cli.command {
        Command::Describe { scan, out } => describe(&o, scan, out),
        Command::Index { scan_dir, out } => index(&o, scan_dir, out),
        Command::Query { db, scan, id } => query(&o, db, scan, *id),
        Command::Eval { scan_dir, poses, out, map_scans, map_poses } => {
            let map = map_scans.as_deref().zip(map_poses.as_deref());
            evaluate(&o, scan_dir, poses, out, map)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
