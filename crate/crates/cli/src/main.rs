use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use gsslam::eval::{ate_rmse, psnr, ssim, Alignment};
use gsslam::geometry::{SE3Pose, Vec3};
use gsslam::io::{
    generate_fixture, load_color, open_dataset, read_map, read_trajectory, write_color,
    write_depth, write_labels, write_loss_log, write_map, write_mask, write_trajectory,
    Calibration, FixtureParams,
};
use gsslam::pipeline::{PipelineConfig, SlamState};
use gsslam::raster::LabelMap;

#[derive(Parser)]
#[command(
    name = "gsslam",
    version,
    about = "LiDAR-visual Gaussian splatting SLAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run tracking and mapping over a dataset.
    Run(RunArgs),
    /// Score a trajectory (and optionally renders) against ground truth.
    Eval(EvalArgs),
    /// Render a saved map at a pose.
    Render(RenderArgs),
    /// Write the synthetic tunnel dataset.
    MakeFixture(FixtureArgs),
    /// Export Gaussian centres as an ASCII point cloud.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dynamic_masking: bool,
    #[arg(long)]
    no_hier_losses: bool,
    /// Process only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, requires = "gt_images")]
    renders: Option<PathBuf>,
    #[arg(long, requires = "renders")]
    gt_images: Option<PathBuf>,
    /// Compare positions without alignment.
    #[arg(long, conflicts_with = "with_scale")]
    no_align: bool,
    /// Allow a global scale in the alignment.
    #[arg(long)]
    with_scale: bool,
    /// Append a JSON record to this file.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// PLY map; its `.lvdg` sidecar must sit next to it.
    #[arg(long)]
    map: PathBuf,
    /// "tx ty tz qx qy qz qw", camera to world.
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    /// Calibration file providing K and the image size.
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth_out: Option<PathBuf>,
    #[arg(long)]
    semantic_out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long)]
    dynamic: bool,
    /// Drive straight at 1 m per frame.
    #[arg(long)]
    straight: bool,
    /// Add static pillars along the walls.
    #[arg(long)]
    pillars: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

type CliResult<T> = Result<T, String>;

fn parse_pose(s: &str) -> CliResult<SE3Pose> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| format!("bad pose value {t:?}"))
        })
        .collect::<CliResult<_>>()?;
    if v.len() != 7 || v.iter().any(|x| !x.is_finite()) {
        return Err(format!(
            "pose needs 7 finite numbers \"tx ty tz qx qy qz qw\", got {s:?}"
        ));
    }
    let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
    if qn < 1e-9 {
        return Err("pose quaternion is zero".into());
    }
    Ok(SE3Pose::from_wxyz(
        v[6],
        v[3],
        v[4],
        v[5],
        Vec3::new(v[0], v[1], v[2]),
    ))
}

fn mkdir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| format!("cannot create {}: {e}", p.display()))
}

fn run(a: RunArgs) -> CliResult<()> {
    let mut config = match &a.config {
        Some(p) => PipelineConfig::from_file(p).map_err(|e| e.to_string())?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if a.no_dynamic_masking {
        config.dynamic_masking = false;
    }
    if a.no_hier_losses {
        config.hier_losses = false;
    }
    let ds = open_dataset(&a.dataset).map_err(|e| e.to_string())?;
    let calib = ds.calibration.clone();
    let mut slam =
        SlamState::new(config, calib.camera, calib.t_cam_lidar).map_err(|e| e.to_string())?;
    mkdir(&a.out.join("masks"))?;
    let n = a.frames.map_or(ds.len(), |f| f.min(ds.len()));
    for i in 0..n {
        let frame = ds.load_frame(i).map_err(|e| e.to_string())?;
        let result = slam
            .process_frame(frame)
            .map_err(|e| format!("frame {i}: {e}"))?;
        write_mask(
            &a.out.join(format!("masks/{i:06}.png")),
            result.masks.refined(),
        )
        .map_err(|e| e.to_string())?;
        info!(
            "frame {i}: keyframe {} icp {}",
            result.keyframe, result.icp_ok
        );
    }

    write_trajectory(
        slam.trajectory(),
        slam.timestamps(),
        &a.out.join("trajectory.txt"),
    )
    .map_err(|e| e.to_string())?;
    write_loss_log(&a.out.join("loss_log.txt"), slam.loss_log()).map_err(|e| e.to_string())?;
    let (l, nd) = (calib.num_classes(), calib.feature_dim);
    write_map(&a.out.join("map.ply"), &slam.world.all_gaussians(), l, nd)
        .map_err(|e| e.to_string())?;
    mkdir(&a.out.join("renders"))?;
    for (i, pose) in slam.trajectory().iter().enumerate() {
        let out = slam.render(pose, l, nd);
        write_color(&a.out.join(format!("renders/{i:06}.png")), &out.color)
            .map_err(|e| e.to_string())?;
    }

    println!(
        "processed {n} frames, {} Gaussians",
        slam.world.gaussian_count()
    );
    if let Some(gt) = ds.ground_truth() {
        if n >= 2 {
            let ate = ate_rmse(slam.trajectory(), &gt[..n], Alignment::Rigid)
                .map_err(|e| e.to_string())?;
            println!("ATE-RMSE: {:.3} m", ate.rmse);
        }
    }
    Ok(())
}

fn image_scores(renders: &Path, gt_images: &Path) -> CliResult<(f64, f64, usize)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(renders)
        .map_err(|e| format!("cannot read {}: {e}", renders.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    let (mut p, mut s, mut n) = (0.0, 0.0, 0);
    for r in names {
        let g = gt_images.join(r.file_name().expect("file name"));
        if !g.exists() {
            continue;
        }
        let a = load_color(&r).map_err(|e| e.to_string())?;
        let b = load_color(&g).map_err(|e| e.to_string())?;
        p += psnr(&a, &b).map_err(|e| format!("{}: {e}", r.display()))?;
        s += ssim(&a, &b).map_err(|e| format!("{}: {e}", r.display()))?;
        n += 1;
    }
    if n == 0 {
        return Err("no matching image pairs".into());
    }
    Ok((p / n as f64, s / n as f64, n))
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (est, _) = read_trajectory(&a.traj).map_err(|e| e.to_string())?;
    let (gt, _) = read_trajectory(&a.gt).map_err(|e| e.to_string())?;
    let alignment = if a.no_align {
        Alignment::None
    } else if a.with_scale {
        Alignment::Similarity
    } else {
        Alignment::Rigid
    };
    let ate = ate_rmse(&est, &gt, alignment).map_err(|e| e.to_string())?;
    println!("metric     value");
    println!("ATE-RMSE   {:.3}", ate.rmse);
    let mut record = json!({
        "sequence": a.traj.display().to_string(),
        "frames": est.len(),
        "ate_rmse": ate.rmse,
        "scale": ate.scale,
    });
    if let (Some(r), Some(g)) = (&a.renders, &a.gt_images) {
        let (p, s, n) = image_scores(r, g)?;
        println!("PSNR       {p:.3}");
        println!("SSIM       {s:.3}");
        record["psnr"] = json!(p);
        record["ssim"] = json!(s);
        record["images"] = json!(n);
    }
    if let Some(path) = &a.record {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| format!("cannot open {}: {e}", path.display()))?;
        writeln!(f, "{record}").map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> CliResult<()> {
    let pose = parse_pose(&a.pose)?;
    let calib = Calibration::load(&a.intrinsics).map_err(|e| e.to_string())?;
    let (gs, l, nd) = read_map(&a.map).map_err(|e| e.to_string())?;
    let out = gsslam::rasterizer::render_with(
        &gs,
        &pose,
        &calib.camera,
        &Default::default(),
        l.max(1),
        nd,
    );
    write_color(&a.out, &out.color).map_err(|e| e.to_string())?;
    if let Some(p) = &a.depth_out {
        write_depth(p, &out.depth).map_err(|e| e.to_string())?;
    }
    if let Some(p) = &a.semantic_out {
        let labels = LabelMap::from_vec(out.width(), out.height(), out.semantic_argmax())
            .map_err(|e| e.to_string())?;
        write_labels(p, &labels).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> CliResult<()> {
    use std::fmt::Write;
    let (gs, _, _) = read_map(&a.map).map_err(|e| e.to_string())?;
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        gs.len()
    );
    for g in &gs {
        let c = g.color.map(gsslam::io::color_to_u8);
        writeln!(
            s,
            "{} {} {} {} {} {}",
            g.position.x, g.position.y, g.position.z, c.x, c.y, c.z
        )
        .expect("string write");
    }
    std::fs::write(&a.out, s).map_err(|e| format!("cannot write {}: {e}", a.out.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render_cmd(a),
        Command::MakeFixture(a) => {
            let params = FixtureParams {
                frames: a.frames,
                dynamic: a.dynamic,
                straight: a.straight,
                pillars: a.pillars,
                seed: a.seed,
                ..Default::default()
            };
            generate_fixture(&a.out, &params).map_err(|e| e.to_string())
        }
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_strings() {
        let p = parse_pose("1 2 3 0 0 0 1").unwrap();
        assert_eq!(*p.translation(), Vec3::new(1.0, 2.0, 3.0));
        assert!(parse_pose("1 2 3").is_err());
        assert!(parse_pose("1 2 3 0 0 0 x").is_err());
        assert!(parse_pose("1 2 3 0 0 0 0").is_err());
    }

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
