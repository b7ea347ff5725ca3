//! `riga` command line: synthesize pairs, register clouds, train the toy
//! model, evaluate metrics and check rotation invariance.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 registration
//! failure. `invariance` exits 1 when the deviation gate fails.

use clap::{Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use riga::config::RunConfig;
use riga::data::{
    load_checkpoint, load_manifest, load_ply, load_xyz, save_checkpoint, save_manifest, save_ply,
    synth_pair, Checkpoint, ManifestEntry, PlyEncoding, SynthConfig,
};
use riga::diffcore::ParamStore;
use riga::encoders::{check_shapes, init_params};
use riga::geom::{apply_transform, estimate_normals, PointCloud, RigidTransform};
use riga::matcher::{CorrespondenceSet, Level};
use riga::metrics::{fmr, inlier_ratio, rmse1, rr, rre, rte, Rmse1Mode};
use riga::pipeline::{
    describe_pair, match_descriptors, match_pair, prepare_with, register_pair, StageOutputs,
};
use riga::solver::ransac_register;
use riga::train::{prepare_pair, train};
use riga::{Error, Result};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "riga", version, about = "Rotation-invariant point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic partial-view pairs plus a ground-truth manifest.
    Synth {
        /// key=value configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of pairs to generate.
        #[arg(long)]
        pairs: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Match two clouds and estimate the rigid motion source -> target.
    Register {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained checkpoint; omitted means seeded random weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Output transform file (4 lines x 4 numbers, row-major).
        #[arg(long)]
        out: PathBuf,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train on a manifest of pairs with ground truth.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest whose entries all carry a ground-truth transform.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate IR/FMR/RR/RRE/RTE over a manifest with ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        /// Keep only the top-confidence correspondences per pair.
        #[arg(long, default_value_t = 5000)]
        num_corr: usize,
        /// Replace matching with perfect ground-truth correspondences.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure descriptor deviation under random rotations.
    Invariance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of synthetic clouds to test (10 rotations each).
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Describe with raw absolute coordinates instead of PPFs; the
        /// rotation-variant negative control.
        #[arg(long)]
        use_raw_xyz: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::RegistrationFailed { .. } | Error::InsufficientCorrespondences { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            config,
            out_dir,
            pairs,
            seed,
        } => cmd_synth(config.as_deref(), &out_dir, pairs, seed),
        Command::Register {
            config,
            checkpoint,
            seed,
            src,
            tgt,
            out,
            report,
        } => cmd_register(
            config.as_deref(),
            checkpoint.as_deref(),
            seed,
            &src,
            &tgt,
            &out,
            report.as_deref(),
        ),
        Command::Train {
            config,
            data,
            steps,
            out,
            seed,
        } => cmd_train(config.as_deref(), &data, steps, &out, seed),
        Command::Eval {
            config,
            checkpoint,
            seed,
            data,
            num_corr,
            oracle,
            report,
        } => cmd_eval(
            config.as_deref(),
            checkpoint.as_deref(),
            seed,
            &data,
            num_corr,
            oracle,
            report.as_deref(),
        ),
        Command::Invariance {
            config,
            seed,
            trials,
            use_raw_xyz,
            report,
        } => cmd_invariance(config.as_deref(), seed, trials, use_raw_xyz, report.as_deref()),
    }
}

/// Prefixes I/O errors with the file they came from.
fn with_path<T>(res: Result<T>, path: &Path) -> Result<T> {
    res.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => with_path(RunConfig::from_file(p), p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => with_path(load_ply(path), path),
        Some("xyz") => with_path(load_xyz(path), path),
        other => Err(Error::InvalidInput(format!(
            "unsupported cloud extension {other:?} for {} (expected .ply or .xyz)",
            path.display()
        ))),
    }
}

/// Checkpoint weights when a path is given (verified against the model
/// dims), seeded random weights otherwise.
fn load_weights(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ParamStore> {
    let dims = cfg.model_dims();
    match checkpoint {
        Some(path) => {
            let ckpt = with_path(load_checkpoint(path), path)?;
            check_shapes(&ckpt.params, &dims)?;
            Ok(ckpt.params)
        }
        None => init_params(&dims, cfg.seed),
    }
}

fn report_header(cfg: &RunConfig) -> Vec<String> {
    let mut lines = cfg.to_kv_lines();
    lines.push(format!("config_hash={:016x}", cfg.hash()));
    lines
}

fn emit_report(lines: &[String], path: Option<&Path>) -> Result<()> {
    let text = format!("{}\n", lines.join("\n"));
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Manifest paths are relative to the manifest's own directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn cmd_synth(config: Option<&Path>, out_dir: &Path, pairs: usize, seed: Option<u64>) -> Result<i32> {
    if pairs == 0 {
        return Err(Error::InvalidInput("--pairs must be at least 1".into()));
    }
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let sc = SynthConfig::from_run(&cfg, cfg.seed.wrapping_add(i as u64));
        let pair = synth_pair(&sc)?;
        let src = format!("pair{i:04}_src.ply");
        let tgt = format!("pair{i:04}_tgt.ply");
        save_ply(out_dir.join(&src), &pair.source, PlyEncoding::BinaryLittleEndian)?;
        save_ply(out_dir.join(&tgt), &pair.target, PlyEncoding::BinaryLittleEndian)?;
        entries.push(ManifestEntry {
            source: src.into(),
            target: tgt.into(),
            gt: Some(pair.gt_source_to_target()),
        });
    }
    save_manifest(out_dir.join("manifest.txt"), &entries)?;
    println!("wrote {pairs} pairs and manifest.txt to {}", out_dir.display());
    Ok(0)
}

fn transform_to_string(t: &RigidTransform) -> String {
    t.to_matrix4()
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

#[allow(clippy::too_many_arguments)]
fn cmd_register(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
    src: &Path,
    tgt: &Path,
    out: &Path,
    report: Option<&Path>,
) -> Result<i32> {
    let cfg = load_config(config, seed)?;
    let store = load_weights(&cfg, checkpoint)?;
    let source = load_cloud(src)?;
    let target = load_cloud(tgt)?;
    let started = Instant::now();
    let (result, matched) = register_pair(&store, &cfg, &source, &target)?;
    let runtime = started.elapsed().as_secs_f64();
    std::fs::write(out, transform_to_string(&result.transform))?;

    let mut lines = report_header(&cfg);
    lines.push(format!("src={}", src.display()));
    lines.push(format!("tgt={}", tgt.display()));
    lines.push(format!("fine_count={}", matched.fine.pairs.len()));
    lines.push(format!("coarse_used={}", matched.coarse_used));
    lines.push(format!("skipped_groups={}", matched.skipped_groups));
    lines.push(format!("inlier_count={}", result.inlier_count));
    lines.push(format!("runtime_s={runtime:.3}"));
    emit_report(&lines, report)?;
    Ok(0)
}

fn load_pairs_with_gt(
    manifest: &Path,
) -> Result<Vec<(PointCloud, PointCloud, RigidTransform)>> {
    let entries = with_path(load_manifest(manifest), manifest)?;
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "manifest {} has no entries",
            manifest.display()
        )));
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let gt = e.gt.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "manifest entry {} -> {} has no ground-truth transform",
                    e.source.display(),
                    e.target.display()
                ))
            })?;
            let source = load_cloud(&resolve(base, &e.source))?;
            let target = load_cloud(&resolve(base, &e.target))?;
            Ok((source, target, gt))
        })
        .collect()
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    steps: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<i32> {
    let cfg = load_config(config, seed)?;
    let raw_pairs = load_pairs_with_gt(data)?;
    let mut pairs = Vec::with_capacity(raw_pairs.len());
    for (source, target, gt) in &raw_pairs {
        pairs.push(prepare_pair(&cfg, source, target, gt)?);
    }
    let mut store = init_params(&cfg.model_dims(), cfg.seed)?;
    let log = train(&mut store, &cfg, &pairs, steps, |e| {
        println!(
            "step={} epoch={} loss={} coarse={} fine={} lr={}",
            e.step, e.epoch, e.loss, e.coarse, e.fine, e.lr
        );
    })?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("initial_loss={}", first.loss);
        println!("final_loss={}", last.loss);
    }
    save_checkpoint(
        out,
        &Checkpoint {
            seed: cfg.seed,
            steps: steps as u64,
            config_hash: cfg.hash(),
            params: store,
        },
    )?;
    println!("saved checkpoint to {}", out.display());
    Ok(0)
}

/// Perfect correspondences from the ground truth: every source point whose
/// nearest target neighbor (after applying gt) lies within tau1.
fn oracle_correspondences(
    source: &PointCloud,
    target: &PointCloud,
    gt: &RigidTransform,
    tau1: f64,
) -> CorrespondenceSet {
    let tree = riga::geom::KdTree::build(&target.points);
    let mut pairs = Vec::new();
    for (i, p) in source.points.iter().enumerate() {
        let moved = gt.apply_point(p);
        let (d2, j) = tree.nearest_k(&moved, 1)[0];
        let d = d2.sqrt();
        if d < tau1 {
            pairs.push((i, j, 1.0 / (1.0 + d)));
        }
    }
    CorrespondenceSet {
        pairs,
        level: Level::Fine,
    }
}

/// Top-confidence subsample, ties broken by (i, j) for determinism.
fn top_confidence(mut set: CorrespondenceSet, num_corr: usize) -> CorrespondenceSet {
    set.pairs.sort_unstable_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    set.pairs.truncate(num_corr);
    set
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
    data: &Path,
    num_corr: usize,
    oracle: bool,
    report: Option<&Path>,
) -> Result<i32> {
    if num_corr == 0 {
        return Err(Error::InvalidInput("--num-corr must be at least 1".into()));
    }
    let cfg = load_config(config, seed)?;
    let store = load_weights(&cfg, checkpoint)?;
    let pairs = load_pairs_with_gt(data)?;
    let mode = if cfg.rmse1_conventional {
        Rmse1Mode::Conventional
    } else {
        Rmse1Mode::AsPrinted
    };

    let mut lines = report_header(&cfg);
    lines.push(format!("num_corr={num_corr}"));
    lines.push(format!("oracle={oracle}"));
    lines.push(format!("pairs={}", pairs.len()));

    let mut irs = Vec::with_capacity(pairs.len());
    let mut rmses = Vec::with_capacity(pairs.len());
    let mut rres = Vec::new();
    let mut rtes = Vec::new();
    let mut failures = 0usize;

    for (k, (source, target, gt)) in pairs.iter().enumerate() {
        let full = if oracle {
            oracle_correspondences(source, target, gt, cfg.tau1)
        } else {
            match_pair(&store, &cfg, source, target)?.fine
        };
        let corr = top_confidence(full, num_corr);
        let ir = if corr.pairs.is_empty() {
            0.0
        } else {
            inlier_ratio(&corr, source, target, gt, cfg.tau1)?
        };
        irs.push(ir);
        lines.push(format!("pair{k}.num_corr={}", corr.pairs.len()));
        lines.push(format!("pair{k}.ir={ir}"));

        match ransac_register(&corr, source, target, &cfg.ransac()) {
            Ok(res) => {
                let e_r = rre(&res.transform, gt);
                let e_t = rte(&res.transform, gt);
                let rm = rmse1(source, &res.transform, gt, mode)?;
                lines.push(format!("pair{k}.rre_deg={e_r}"));
                lines.push(format!("pair{k}.rte={e_t}"));
                lines.push(format!("pair{k}.rmse={rm}"));
                rres.push(e_r);
                rtes.push(e_t);
                rmses.push(rm);
            }
            Err(Error::RegistrationFailed { .. })
            | Err(Error::InsufficientCorrespondences { .. }) => {
                failures += 1;
                lines.push(format!("pair{k}.registration=failed"));
                rmses.push(f64::INFINITY);
            }
            Err(other) => return Err(other),
        }
    }

    lines.push(format!("ir={}", mean(&irs)));
    lines.push(format!("fmr={}", fmr(&irs, cfg.tau2)?));
    lines.push(format!("rr={}", rr(&rmses, cfg.tau3)?));
    lines.push(format!("mean_rre_deg={}", mean(&rres)));
    lines.push(format!("mean_rte={}", mean(&rtes)));
    lines.push(format!("median_rre_deg={}", median(&rres)));
    lines.push(format!("median_rte={}", median(&rtes)));
    lines.push(format!("failures={failures}"));
    emit_report(&lines, report)?;
    Ok(0)
}

/// Uniform random rotation from three uniforms (Shoemake's method).
fn random_rotation(rng: &mut ChaCha20Rng) -> Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    );
    *nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

fn stage_deviations(a: &StageOutputs, b: &StageOutputs) -> [(&'static str, f64); 6] {
    let dev = |x: &riga::diffcore::Tensor, y: &riga::diffcore::Tensor| -> f64 {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    [
        ("g", dev(&a.g, &b.g)),
        ("s", dev(&a.s, &b.s)),
        ("d0", dev(&a.d0, &b.d0)),
        ("dt", dev(&a.dt, &b.dt)),
        ("node_hat", dev(&a.node_hat, &b.node_hat)),
        ("point_hat", dev(&a.point_hat, &b.point_hat)),
    ]
}

fn cmd_invariance(
    config: Option<&Path>,
    seed: Option<u64>,
    trials: usize,
    use_raw_xyz: bool,
    report: Option<&Path>,
) -> Result<i32> {
    const ROTATIONS: usize = 10;
    if trials == 0 {
        return Err(Error::InvalidInput("--trials must be at least 1".into()));
    }
    let cfg = load_config(config, seed)?;
    let store = init_params(&cfg.model_dims(), cfg.seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let started = Instant::now();

    let mut worst = [("g", 0.0f64), ("s", 0.0), ("d0", 0.0), ("dt", 0.0), ("node_hat", 0.0), ("point_hat", 0.0)];
    let mut index_diffs = 0usize;

    for trial in 0..trials {
        let sp = synth_pair(&SynthConfig::from_run(&cfg, cfg.seed.wrapping_add(trial as u64)))?;
        // Normals are estimated once and rotate with the cloud afterwards;
        // the invariance claim is over rigid motion of a fixed surface frame.
        let x = estimate_normals(&sp.source, cfg.normals_k, cfg.orientation)?;
        let y = estimate_normals(&sp.target, cfg.normals_k, cfg.orientation)?;
        let px = prepare_with(&x, &cfg, use_raw_xyz)?;
        let py = prepare_with(&y, &cfg, use_raw_xyz)?;
        let (dx, dy) = describe_pair(&store, &cfg, &px, &py)?;
        let base = match_descriptors(&store, &cfg, &px, &py, &dx, &dy)?;
        let base_idx: Vec<(usize, usize)> =
            base.fine.pairs.iter().map(|&(i, j, _)| (i, j)).collect();

        for _ in 0..ROTATIONS {
            let t = RigidTransform::new(random_rotation(&mut rng), Vector3::zeros())?;
            let xr = apply_transform(&x, &t);
            let pxr = prepare_with(&xr, &cfg, use_raw_xyz)?;
            let (dxr, dyr) = describe_pair(&store, &cfg, &pxr, &py)?;
            for (slot, (_, d)) in worst.iter_mut().zip(stage_deviations(&dx, &dxr).iter()) {
                slot.1 = slot.1.max(*d);
            }
            for (slot, (_, d)) in worst.iter_mut().zip(stage_deviations(&dy, &dyr).iter()) {
                slot.1 = slot.1.max(*d);
            }
            let rot = match_descriptors(&store, &cfg, &pxr, &py, &dxr, &dyr)?;
            let rot_idx: Vec<(usize, usize)> =
                rot.fine.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
            if rot_idx != base_idx {
                let a: std::collections::BTreeSet<_> = base_idx.iter().collect();
                let b: std::collections::BTreeSet<_> = rot_idx.iter().collect();
                index_diffs += a.symmetric_difference(&b).count().max(1);
            }
        }
    }

    let max_deviation = worst.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    let pass = max_deviation <= 1e-6 && index_diffs == 0;
    let mut lines = report_header(&cfg);
    lines.push(format!("mode={}", if use_raw_xyz { "raw_xyz" } else { "ppf" }));
    lines.push(format!("trials={trials}"));
    lines.push(format!("rotations_per_trial={ROTATIONS}"));
    for (name, d) in &worst {
        lines.push(format!("max_deviation_{name}={d:e}"));
    }
    lines.push(format!("max_deviation={max_deviation:e}"));
    lines.push(format!("fine_index_diffs={index_diffs}"));
    lines.push(format!("pass={pass}"));
    lines.push(format!("runtime_s={:.3}", started.elapsed().as_secs_f64()));
    emit_report(&lines, report)?;
    Ok(if pass { 0 } else { 1 })
}
