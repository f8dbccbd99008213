use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bvc_core::bd_rate::{bd_rate, RdPoint};
use bvc_core::config::{device_from_env, CodecConfig};
use bvc_core::gop::{dump_plan, plan_sequence};
use bvc_core::metrics::{ms_ssim, psnr};
use bvc_core::model::Model;
use bvc_core::pipeline::{decode_sequence, encode_sequence};
use bvc_core::report;
use bvc_core::synthetic::{Scene, SceneParams};
use bvc_core::training::{default_schedule, dump_schedule, parse_schedule, ClipSource, Trainer};
use bvc_core::video_io::{read_video, sidecar_path, write_video, Video};
use bvc_tensor::Tensor;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "codec", version, about = "Bi-directional learned video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gop: Option<usize>,
    #[arg(long = "intra-period")]
    intra_period: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the coding plan: `coding_order display_index layer type fwd bwd w`.
    Plan {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Encode a PNG directory or raw video into a bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "rate-idx", default_value_t = 0.0)]
        rate_idx: f64,
        /// Encode only the first N frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Write the stats stream here for `eval --stats`.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a bitstream to a PNG directory (no extension), `.rgb` or `.yuv`.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train a model on synthetic scenes or on the videos under `--input`.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Training log CSV; defaults to `<output>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Schedule file `frames target loss lr epochs`; overrides the config.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Print the schedule that would run and exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Encode, decode and report at every rate point.
    Eval {
        /// Video or directory of videos; synthetic scenes when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Anchor model for BD-rate.
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// Comma separated rate indices.
        #[arg(long = "rate-idx", default_value = "0,1,2,3", value_delimiter = ',')]
        rate_idx: Vec<f64>,
        #[arg(long, default_value_t = 33)]
        frames: usize,
        /// Synthetic sequences to generate when `--input` is absent.
        #[arg(long, default_value_t = 3)]
        sequences: usize,
        /// Regenerate the report from saved stats files instead of encoding.
        #[arg(long, num_args = 1..)]
        stats: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<CodecConfig> {
    let mut cfg = match &c.config {
        Some(p) => CodecConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => CodecConfig::default(),
    };
    if let Some(g) = c.gop {
        cfg.gop.gop_size = g;
    }
    if let Some(p) = c.intra_period {
        cfg.gop.intra_period = p;
    }
    cfg.gop.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let device = device_from_env()?;
    match cli.cmd {
        Cmd::Plan { frames, output, common } => {
            let cfg = load_config(&common)?;
            let text = dump_plan(&plan_sequence(frames, &cfg.gop)?);
            match output {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Encode {
            input,
            output,
            model,
            rate_idx,
            frames,
            stats,
            common,
        } => {
            let cfg = load_config(&common)?;
            let model = load_model(&model)?;
            let mut video = read_video(&input)?;
            if let Some(n) = frames {
                video.frames.truncate(n);
            }
            let t0 = Instant::now();
            let out = encode_sequence(&model, &video.frames, &cfg.gop, rate_idx)?;
            fs::write(&output, &out.bitstream)?;
            if let Some(p) = stats {
                fs::write(p, report::stats_to_string(&out.stats))?;
            }
            eprintln!(
                "{} frames on {device}: {} bytes, {:.4} bpp, {:.2} dB, {:.1}s",
                video.frames.len(),
                out.bitstream.len(),
                out.stats.bpp(),
                out.stats.mean_psnr(),
                t0.elapsed().as_secs_f64()
            );
        }
        Cmd::Decode { input, output, model } => {
            let model = load_model(&model)?;
            let data = fs::read(&input)?;
            let out = decode_sequence(&model, &data)?;
            write_video(&output, &Video { frames: out.frames, fps: 30.0 })?;
        }
        Cmd::Train {
            input,
            output,
            log,
            schedule,
            dry_run,
            common,
        } => train(input, output, log, schedule, dry_run, &common)?,
        Cmd::Eval {
            input,
            output,
            model,
            anchor,
            rate_idx,
            frames,
            sequences,
            stats,
            common,
        } => {
            fs::create_dir_all(&output)?;
            if !stats.is_empty() {
                return report_from_stats(&stats, &output);
            }
            let model = model.context("--model is required unless --stats is given")?;
            let cfg = load_config(&common)?;
            let seqs = eval_sequences(input.as_deref(), frames, sequences, common.seed, &cfg)?;
            let test = eval_model(&load_model(&model)?, &seqs, &rate_idx, &cfg, &output.join("test"))?;
            let mut curves = vec![("test".to_string(), test.clone())];
            if let Some(a) = anchor {
                let anchor = eval_model(&load_model(&a)?, &seqs, &rate_idx, &cfg, &output.join("anchor"))?;
                match bd_rate(&anchor, &test) {
                    Ok(bd) => {
                        println!("BD-rate (PSNR) test vs anchor: {:+.2}%", bd.percent);
                        fs::write(output.join("bd_rate.txt"), format!("{:.6}\n", bd.percent))?;
                    }
                    Err(e) => eprintln!("BD-rate undefined: {e}"),
                }
                curves.push(("anchor".to_string(), anchor));
            }
            fs::write(output.join("rd.svg"), report::rd_plot_svg(&curves, "PSNR (dB)")?)?;
        }
    }
    Ok(())
}

fn train(
    input: Option<PathBuf>,
    output: PathBuf,
    log: Option<PathBuf>,
    schedule: Option<PathBuf>,
    dry_run: bool,
    common: &Common,
) -> Result<()> {
    let cfg = load_config(common)?;
    let stages = match schedule.or(cfg.schedule.as_ref().map(PathBuf::from)) {
        Some(p) => parse_schedule(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
        None => default_schedule(),
    };
    if dry_run {
        print!("{}", dump_schedule(&stages));
        return Ok(());
    }
    let data = match input {
        None => ClipSource::Synthetic(SceneParams::default()),
        Some(p) => ClipSource::Sequences(load_videos(&p)?.into_iter().map(|v| v.frames).collect()),
    };
    let mut model = Model::new(cfg.model.clone(), common.seed);
    let log = log.unwrap_or_else(|| {
        let mut s = output.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let t0 = Instant::now();
    {
        let w = std::io::BufWriter::new(fs::File::create(&log)?);
        let mut tr = Trainer::new(&mut model, cfg.train.clone(), cfg.gop.clone(), data, common.seed)?.with_log(w)?;
        tr.run_schedule(&stages)?;
    }
    model.save(&output)?;
    eprintln!("trained in {:.0}s, model {}", t0.elapsed().as_secs_f64(), output.display());
    Ok(())
}

/// A single video, or every video (PNG directory or raw file with a
/// sidecar) directly inside a directory of videos.
fn load_videos(path: &Path) -> Result<Vec<Video>> {
    if path.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() || sidecar_path(p).exists())
            .collect();
        subs.sort();
        if !subs.is_empty() {
            return subs.iter().map(|p| read_video(p).with_context(|| p.display().to_string())).collect();
        }
    }
    Ok(vec![read_video(path)?])
}

fn eval_sequences(input: Option<&Path>, frames: usize, n: usize, seed: u64, cfg: &CodecConfig) -> Result<Vec<Vec<Tensor>>> {
    match input {
        Some(p) => Ok(load_videos(p)?
            .into_iter()
            .map(|mut v| {
                v.frames.truncate(frames);
                v.frames
            })
            .collect()),
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let (h, w) = (cfg.train.height, cfg.train.width);
            Ok((0..n)
                .map(|_| Scene::random(&mut rng, h, w, &SceneParams::slow()).clip(frames, 1))
                .collect())
        }
    }
}

fn eval_model(model: &Model, seqs: &[Vec<Tensor>], rates: &[f64], cfg: &CodecConfig, dir: &Path) -> Result<Vec<RdPoint>> {
    fs::create_dir_all(dir)?;
    let mut rd = fs::File::create(dir.join("rd.csv"))?;
    writeln!(rd, "rate_idx,bpp,psnr,ms_ssim,motion_share")?;
    let mut points = Vec::new();
    for &r in rates {
        let (mut bits, mut pixels, mut ps, mut ss, mut ms, mut n) = (0u64, 0usize, 0.0, 0.0, 0.0, 0usize);
        for (i, seq) in seqs.iter().enumerate() {
            let enc = encode_sequence(model, seq, &cfg.gop, r)?;
            let dec = decode_sequence(model, &enc.bitstream)?;
            if dec.frames.iter().zip(&enc.recon).any(|(a, b)| !a.bit_eq(b)) {
                bail!("decoder reconstruction differs from encoder on sequence {i} at rate {r}");
            }
            let sub = dir.join(format!("seq{i:02}_r{r}"));
            fs::write(dir.join(format!("seq{i:02}_r{r}.stats")), report::stats_to_string(&enc.stats))?;
            report::write_sequence_report(&sub, &enc.stats)?;
            bits += enc.stats.total_bits;
            pixels += seq.len() * enc.stats.width * enc.stats.height;
            for (x, y) in seq.iter().zip(&dec.frames) {
                ps += psnr(x, y)?;
                ss += ms_ssim(x, y)?;
                n += 1;
            }
            ms += report::motion_share(&enc.stats);
        }
        let p = RdPoint {
            bpp: bits as f64 / pixels as f64,
            quality: ps / n as f64,
            rate_idx: r,
            tag: "psnr".into(),
        };
        writeln!(rd, "{},{:.6},{:.4},{:.6},{:.3}", r, p.bpp, p.quality, ss / n as f64, ms / seqs.len() as f64)?;
        eprintln!("rate {r}: {:.4} bpp, {:.2} dB, MV share {:.1}%", p.bpp, p.quality, ms / seqs.len() as f64);
        points.push(p);
    }
    Ok(points)
}

fn report_from_stats(files: &[PathBuf], out: &Path) -> Result<()> {
    let mut pts = Vec::new();
    for f in files {
        let s = report::stats_from_str(&fs::read_to_string(f)?).with_context(|| f.display().to_string())?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        report::write_sequence_report(&out.join(&stem), &s)?;
        pts.push(report::rd_point(&s, &stem));
    }
    fs::write(out.join("rd.svg"), report::rd_plot_svg(&[("stats".into(), pts)], "PSNR (dB)")?)?;
    Ok(())
}
