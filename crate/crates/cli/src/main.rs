use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evrecon::events::{read_event_file, CfaPattern, EventStream};
use evrecon::image::Image;
use evrecon::metrics::{evaluate_sequence, EvalOptions, EvalReport};
use evrecon::nn::gradcheck::{gradient_check, network_check, GradCheckOp};
use evrecon::nn::{read_checkpoint, write_checkpoint, AdamState, ModelWeights, NetworkConfig};
use evrecon::pipeline::{
    benchmark, color_reconstruct, deflicker, hfr_synthesize, read_frames, write_color_frames,
    write_frames, Reconstructor, WindowPolicy,
};
use evrecon::simulator::{read_dataset, read_sequence, simulate_sequence, write_dataset, SimConfig};
use evrecon::trainer::{
    apply_config_text, apply_setting, config_manifest, prepare_dataset, split_dataset, sweep,
    sweep_csv, sweep_grid, train, TrainConfig, TrainStatus,
};
use evrecon::Error;

/// Event-camera simulation, training and video reconstruction.
#[derive(Parser, Debug)]
#[command(name = "evrecon", version)]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Print progress and the resolved configuration.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of moving textures with events, frames and flow.
    Simulate(SimulateArgs),
    /// Train the recurrent network on a simulated dataset.
    Train(TrainArgs),
    /// Reconstruct frames from an event file.
    Reconstruct(ReconstructArgs),
    /// Score reconstructed frames against ground truth.
    Eval(EvalArgs),
    /// Train and time every architecture in the grid.
    Sweep(SweepArgs),
    /// Per-stage timing on fixed-count windows.
    Bench(BenchArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Sequence length in seconds.
    #[arg(long, default_value_t = 0.5)]
    duration: f64,
    /// Square sensor side; overridden by --width/--height.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, default_value_t = 50.0)]
    f_gt: f64,
    #[arg(long, default_value_t = 1000.0)]
    f_sim: f64,
    #[arg(long, default_value_t = 1.0)]
    motion_scale: f64,
    /// Sequence `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PGM texture instead of procedural scenes.
    #[arg(long)]
    texture: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NetTrainOverrides {
    /// Flat key=value file of network and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    lambda_tc: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    l0: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Reset the recurrent state before every window.
    #[arg(long)]
    no_recurrent: bool,
    #[arg(long)]
    no_augment: bool,
}

impl NetTrainOverrides {
    fn resolve(&self, net: &mut NetworkConfig, tc: &mut TrainConfig) -> Result<(), Error> {
        if let Some(p) = &self.config {
            apply_config_text(net, tc, &fs::read_to_string(p)?)?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected KEY=VALUE, got `{kv}`")))?;
            apply_setting(net, tc, k.trim(), v.trim())?;
        }
        let named: [(&str, Option<String>); 10] = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("crop", self.crop.map(|v| v.to_string())),
            ("unroll", self.unroll.map(|v| v.to_string())),
            ("lambda_tc", self.lambda_tc.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("l0", self.l0.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("max_steps", self.max_steps.map(|v| v.to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                apply_setting(net, tc, k, &v)?;
            }
        }
        if self.no_recurrent {
            tc.recurrent = false;
        }
        if self.no_augment {
            tc.augment = false;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.e2v, curves.csv and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint (weights and optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fraction of sequences used for training.
    #[arg(long, default_value_t = 0.95)]
    split: f64,
    #[command(flatten)]
    overrides: NetTrainOverrides,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    /// Event file (EVB1 or text).
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "window_duration_ms")]
    window_count: Option<usize>,
    #[arg(long)]
    window_duration_ms: Option<f64>,
    /// Start of the first duration window in seconds; defaults to the first event.
    #[arg(long, requires = "window_duration_ms")]
    window_origin_s: Option<f64>,
    /// High-framerate mode: shift between parallel reconstructions, in events.
    #[arg(long)]
    hfr_shift: Option<usize>,
    /// Exponential smoothing strength in [0, 1).
    #[arg(long)]
    deflicker: Option<f64>,
    /// Treat the stream as a color-filter-array sensor.
    #[arg(long)]
    color: bool,
    #[arg(long, default_value = "RGGB")]
    cfa: String,
    /// Skip robust min/max normalization.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Frames directory (or a root of per-sequence frame directories).
    #[arg(long)]
    frames: PathBuf,
    /// Sequence directory (or dataset root) holding the ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    tolerance_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    skip_head_s: f64,
    #[arg(long, default_value_t = 0.0)]
    skip_tail_s: f64,
    #[arg(long, default_value_t = 50.0)]
    alpha: f64,
    /// Score without local histogram equalization.
    #[arg(long)]
    no_equalize: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Only the first N grid entries.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    overrides: NetTrainOverrides,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Event file; a random stream is generated when omitted.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Checkpoint; freshly initialized weights of --config when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    window_count: usize,
    #[arg(long, default_value_t = 20)]
    windows: usize,
    #[arg(long, default_value_t = 240)]
    width: usize,
    #[arg(long, default_value_t = 180)]
    height: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Operation name or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long, default_value_t = 1e-3)]
    network_threshold: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cli),
        Command::Train(a) => cmd_train(a, &cli),
        Command::Reconstruct(a) => cmd_reconstruct(a, &cli),
        Command::Eval(a) => cmd_eval(a, &cli),
        Command::Sweep(a) => cmd_sweep(a, &cli),
        Command::Bench(a) => cmd_bench(a, &cli),
        Command::Gradcheck(a) => cmd_gradcheck(a, &cli),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_manifest(dir: &Path, cli: &Cli, body: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "threads={}", cli.threads);
    s.push_str(body);
    if cli.verbose {
        eprint!("{s}");
    }
    fs::write(dir.join("manifest.txt"), s)?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, cli: &Cli) -> Result<u8, Error> {
    let (w, h) = (a.width.unwrap_or(a.size), a.height.unwrap_or(a.size));
    if w == 0 || h == 0 || a.count == 0 {
        return Err(Error::invalid("size and count must be positive"));
    }
    let texture = match &a.texture {
        Some(p) => Some(Image::read_pgm(std::io::BufReader::new(fs::File::open(p)?))?),
        None => None,
    };
    let base = SimConfig {
        width: w,
        height: h,
        duration: a.duration,
        f_gt: a.f_gt,
        f_sim: a.f_sim,
        seed: a.seed,
        motion_scale: a.motion_scale,
        texture,
    };
    base.validate()?;
    let mut seqs = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let cfg = SimConfig { seed: a.seed + i as u64, ..base.clone() };
        let s = simulate_sequence(&cfg)?;
        if cli.verbose {
            eprintln!("sequence {i}: {} events", s.events.len());
        }
        seqs.push(s);
    }
    let dirs = write_dataset(&seqs, &a.out)?;
    write_manifest(
        &a.out,
        cli,
        &format!(
            "command=simulate\ncount={}\nwidth={w}\nheight={h}\nduration={}\nf_gt={}\nf_sim={}\nmotion_scale={}\nseed={}\ntexture={}\n",
            a.count,
            a.duration,
            a.f_gt,
            a.f_sim,
            a.motion_scale,
            a.seed,
            a.texture.as_ref().map_or("procedural".into(), |p| p.display().to_string())
        ),
    )?;
    println!("wrote {} sequences to {}", dirs.len(), a.out.display());
    Ok(0)
}

fn cmd_train(a: &TrainArgs, cli: &Cli) -> Result<u8, Error> {
    let mut net = NetworkConfig::default();
    let mut tc = TrainConfig::default();
    let resumed = match &a.resume {
        Some(p) => {
            let ck = read_checkpoint(p, None)?;
            net = ck.config;
            let state = p.with_file_name("train_state.txt");
            if let Ok(text) = fs::read_to_string(&state) {
                for (k, v) in evrecon::simulator::parse_key_values(&text)? {
                    if k == "next_epoch" {
                        tc.start_epoch = v.parse().map_err(|_| Error::format(format!("bad next_epoch `{v}`")))?;
                    }
                }
            }
            Some(ck)
        }
        None => None,
    };
    let arch_before = net;
    a.overrides.resolve(&mut net, &mut tc)?;
    if resumed.is_some()
        && (net.num_encoders, net.num_residual, net.base_channels, net.skip, net.input_bins)
            != (arch_before.num_encoders, arch_before.num_residual, arch_before.base_channels, arch_before.skip, arch_before.input_bins)
    {
        return Err(Error::invalid("architecture settings cannot change on resume"));
    }
    tc.validate(&net)?;
    let seqs = read_dataset(&a.data)?;
    let (train_seqs, val_seqs) = if seqs.len() >= 2 {
        split_dataset(&seqs, a.split, tc.seed)?
    } else {
        (seqs.clone(), Vec::new())
    };
    let train_set = prepare_dataset(&train_seqs, net.input_bins)?;
    let val_set = prepare_dataset(&val_seqs, net.input_bins)?;
    let (mut weights, mut adam) = match resumed {
        Some(ck) => (ck.weights, ck.optimizer.unwrap_or_default()),
        None => (ModelWeights::init(&net, tc.seed)?, AdamState::default()),
    };
    write_manifest(
        &a.out,
        cli,
        &format!(
            "command=train\ndata={}\nsplit={}\ntrain_sequences={}\nval_sequences={}\nresume={}\n{}",
            a.data.display(),
            a.split,
            train_set.len(),
            val_set.len(),
            a.resume.as_ref().map_or("none".into(), |p| p.display().to_string()),
            config_manifest(&net, &tc)
        ),
    )?;
    let verbose = cli.verbose;
    let report = train(&mut weights, &mut adam, &net, &train_set, &val_set, &tc, |e| {
        if verbose {
            eprintln!(
                "epoch {} loss {:.5} recon {:.5} temporal {:.5}{}",
                e.epoch,
                e.train_loss,
                e.train_recon,
                e.train_temporal,
                e.val.as_ref().map_or(String::new(), |v| format!(" val {:.5} ssim {:.4}", v.recon_loss, v.ssim))
            );
        }
    })?;
    let model = a.out.join("model.e2v");
    write_checkpoint(&model, &weights, &net, Some(&adam))?;
    fs::write(a.out.join("curves.csv"), report.curves_csv())?;
    let next_epoch = report.epochs.last().map_or(tc.start_epoch, |e| e.epoch + 1);
    fs::write(a.out.join("train_state.txt"), format!("next_epoch={next_epoch}\nsteps={}\n", adam.step))?;
    match report.status {
        TrainStatus::Completed => {
            println!("trained {} steps; checkpoint {}", report.optimizer_steps, model.display());
            Ok(0)
        }
        TrainStatus::Diverged { epoch, step, message } => {
            eprintln!("error: training diverged at epoch {epoch} step {step}: {message}; last finite weights saved to {}", model.display());
            Ok(3)
        }
    }
}

fn cmd_reconstruct(a: &ReconstructArgs, cli: &Cli) -> Result<u8, Error> {
    let ck = read_checkpoint(&a.model, None)?;
    let stream = read_event_file(&a.events)?;
    let policy = match (a.window_count, a.window_duration_ms) {
        (_, Some(ms)) => WindowPolicy::Duration(ms * 1e-3),
        (Some(n), None) => WindowPolicy::Count(n),
        (None, None) => WindowPolicy::Count(2000),
    };
    write_manifest(
        &a.out,
        cli,
        &format!(
            "command=reconstruct\nmodel={}\nevents={}\npolicy={policy:?}\nwindow_origin_s={:?}\nhfr_shift={:?}\ndeflicker={:?}\ncolor={}\ncfa={}\nraw={}\n{}",
            a.model.display(),
            a.events.display(),
            a.window_origin_s,
            a.hfr_shift,
            a.deflicker,
            a.color,
            a.cfa,
            a.raw,
            config_manifest(&ck.config, &TrainConfig::default())
                .lines()
                .take(6)
                .map(|l| format!("{l}\n"))
                .collect::<String>()
        ),
    )?;
    if a.color {
        if a.hfr_shift.is_some() {
            return Err(Error::invalid("--hfr-shift and --color cannot be combined"));
        }
        let pattern: CfaPattern = a.cfa.parse()?;
        let channel_policy = match policy {
            WindowPolicy::Count(n) => WindowPolicy::Count((n / 4).max(1)),
            d => d,
        };
        let frames = color_reconstruct(&stream, pattern, &ck.weights, &ck.config, policy, channel_policy)?;
        write_color_frames(&a.out, &frames)?;
        println!("wrote {} color frames to {}", frames.len(), a.out.display());
        return Ok(0);
    }
    let mut frames = match a.hfr_shift {
        Some(d) => {
            let WindowPolicy::Count(n) = policy else {
                return Err(Error::invalid("--hfr-shift needs count windows"));
            };
            hfr_synthesize(&stream, &ck.weights, &ck.config, n, d, !a.raw)?
        }
        None => {
            let mut r = Reconstructor::new(&ck.weights, &ck.config, policy)?.with_postprocess(!a.raw);
            if let Some(t0) = a.window_origin_s {
                r = r.with_origin(t0);
            }
            r.run(&stream)?
        }
    };
    if let Some(s) = a.deflicker {
        frames = deflicker(&frames, s)?;
    }
    write_frames(&a.out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(0)
}

fn is_dataset_root(dir: &Path) -> bool {
    !dir.join("meta.txt").exists() && dir.join("seq_0000").is_dir()
}

fn cmd_eval(a: &EvalArgs, cli: &Cli) -> Result<u8, Error> {
    let opts = EvalOptions {
        tolerance: a.tolerance_ms * 1e-3,
        skip_head: a.skip_head_s,
        skip_tail: a.skip_tail_s,
        alpha: a.alpha,
        equalize: !a.no_equalize,
    };
    let pairs: Vec<(String, PathBuf, PathBuf)> = if is_dataset_root(&a.gt) {
        let mut names: Vec<String> = fs::read_dir(&a.gt)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("seq_"))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), a.frames.join(&n), a.gt.join(&n)))
            .collect()
    } else {
        let name = a.gt.file_name().map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
        vec![(name, a.frames.clone(), a.gt.clone())]
    };
    let mut report = EvalReport::default();
    for (name, frames_dir, gt_dir) in pairs {
        let frames = read_frames(&frames_dir)?;
        let seq = read_sequence(&gt_dir)?;
        let times: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
        let images: Vec<Image> = frames.into_iter().map(|f| f.image).collect();
        report.sequences.push(evaluate_sequence(&name, &times, &images, &seq.gt_times, &seq.gt_frames, &seq.gt_flows, &opts)?);
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            write_manifest(
                parent,
                cli,
                &format!(
                    "command=eval\nframes={}\ngt={}\ntolerance_ms={}\nskip_head_s={}\nskip_tail_s={}\nalpha={}\nequalize={}\n",
                    a.frames.display(),
                    a.gt.display(),
                    a.tolerance_ms,
                    a.skip_head_s,
                    a.skip_tail_s,
                    a.alpha,
                    !a.no_equalize
                ),
            )?;
        }
        fs::write(out, report.to_csv())?;
    }
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs, cli: &Cli) -> Result<u8, Error> {
    let mut net = NetworkConfig::default();
    let mut tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
    a.overrides.resolve(&mut net, &mut tc)?;
    let seqs = read_dataset(&a.data)?;
    let (train_seqs, val_seqs) = split_dataset(&seqs, a.split, tc.seed)?;
    let train_set = prepare_dataset(&train_seqs, net.input_bins)?;
    let val_set = prepare_dataset(&val_seqs, net.input_bins)?;
    let mut grid = sweep_grid(&net);
    if let Some(n) = a.limit {
        grid.truncate(n);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_manifest(
            parent,
            cli,
            &format!("command=sweep\ndata={}\nconfigs={}\n{}", a.data.display(), grid.len(), config_manifest(&net, &tc)),
        )?;
    }
    let verbose = cli.verbose;
    let rows = sweep(&grid, &train_set, &val_set, &tc, |r| {
        if verbose {
            eprintln!(
                "N_E={} N_R={} skip={} N_b={}: val {:.5}, {:.3} ms",
                r.config.num_encoders,
                r.config.num_residual,
                r.config.skip.as_str(),
                r.config.base_channels,
                r.val_loss,
                r.ms_per_window
            );
        }
    })?;
    fs::write(&a.out, sweep_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(0)
}

fn random_stream(width: usize, height: usize, n: usize) -> Result<EventStream, Error> {
    use evrecon::events::Event;
    let mut s: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        s
    };
    let events = (0..n)
        .map(|i| {
            let r = next();
            Event::new(
                i as f64 * 1e-6,
                (r % width as u64) as u16,
                ((r >> 20) % height as u64) as u16,
                if r >> 63 == 0 { 1 } else { -1 },
            )
        })
        .collect();
    EventStream::new(width, height, events)
}

fn cmd_bench(a: &BenchArgs, cli: &Cli) -> Result<u8, Error> {
    let (weights, net) = match &a.model {
        Some(p) => {
            let ck = read_checkpoint(p, None)?;
            (ck.weights, ck.config)
        }
        None => {
            let mut net = NetworkConfig::default();
            let mut tc = TrainConfig::default();
            if let Some(p) = &a.config {
                apply_config_text(&mut net, &mut tc, &fs::read_to_string(p)?)?;
            }
            (ModelWeights::init(&net, 0)?, net)
        }
    };
    let stream = match &a.events {
        Some(p) => read_event_file(p)?,
        None => random_stream(a.width, a.height, a.window_count * a.windows)?,
    };
    if cli.verbose {
        eprintln!(
            "bench: {}x{} sensor, {} events, config {:?}",
            stream.width(),
            stream.height(),
            stream.len(),
            net
        );
    }
    let r = benchmark(&stream, &weights, &net, a.window_count, a.windows)?;
    print!("{}", r.to_text());
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs, _cli: &Cli) -> Result<u8, Error> {
    let ops: Vec<GradCheckOp> = if a.op == "all" {
        GradCheckOp::ALL.to_vec()
    } else {
        vec![a.op.parse()?]
    };
    let mut failed = false;
    for op in ops {
        let (report, limit) = if op == GradCheckOp::Network {
            let net = NetworkConfig {
                num_encoders: 2,
                num_residual: 1,
                base_channels: 2,
                input_bins: 2,
                unroll: 2,
                ..NetworkConfig::default()
            };
            (network_check(&net, [1, net.input_bins, 16, 16], a.seed, 12)?, a.network_threshold)
        } else {
            (gradient_check(op, op.default_shape(), a.seed)?, a.threshold)
        };
        let ok = report.max_rel_err < limit;
        failed |= !ok;
        println!(
            "{:<16} max_rel_err={:.3e} worst={} analytic={:.6e} numeric={:.6e} checked={} {}",
            op.name(),
            report.max_rel_err,
            report.worst,
            report.analytic,
            report.numeric,
            report.checked,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if failed { 3 } else { 0 })
}
