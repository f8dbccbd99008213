//! Step-by-step training with hierarchical quality coefficients.
//!
//! Every B-frame of a training clip is its own optimisation step; losses
//! are never averaged over the frames of a clip. References handed to later
//! frames are the values reconstructed earlier in the same clip, detached
//! from the graph.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use bvc_tensor::{Adam, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GopConfig, TrainConfig};
use crate::error::{invalid, CodecError, Result};
use crate::gop::{plan_training_clip, reference_case, FramePlan, FrameType};
use crate::metrics::{psnr_from_mse, MS_SSIM_WEIGHTS};
use crate::model::{BFrameSpec, BTrainOptions, Model, RefView, INTER_PREFIXES, INTRA_PREFIX, RECON_PREFIXES};
use crate::motion_codec::MotionDiffContext;
use crate::nn::Fwd;
use crate::pipeline::ReferenceEntry;
use crate::quant::QuantMode;
use crate::synthetic::{Scene, SceneParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Inter,
    Recon,
    All,
}

impl Target {
    /// Whether the parameter called `name` is updated when training this
    /// group. The I-frame codec is never part of a group.
    pub fn trains(self, name: &str) -> bool {
        let any = |ps: &[&str]| ps.iter().any(|p| name.starts_with(p));
        match self {
            Target::Inter => any(&INTER_PREFIXES),
            Target::Recon => any(&RECON_PREFIXES),
            Target::All => !name.starts_with(INTRA_PREFIX),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Target {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Inter" => Ok(Target::Inter),
            "Recon" => Ok(Target::Recon),
            "All" => Ok(Target::All),
            _ => Err(invalid(format!("unknown training target {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    MeD,
    MeRD,
    RecD,
    RecRD,
    All,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::MeD, LossKind::MeRD, LossKind::RecD, LossKind::RecRD, LossKind::All];

    pub fn target(self) -> Target {
        match self {
            LossKind::MeD | LossKind::MeRD => Target::Inter,
            LossKind::RecD | LossKind::RecRD => Target::Recon,
            LossKind::All => Target::All,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::MeD => "meD",
            LossKind::MeRD => "meRD",
            LossKind::RecD => "recD",
            LossKind::RecRD => "recRD",
            LossKind::All => "all",
        })
    }
}

impl FromStr for LossKind {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| invalid(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub d_m: f64,
    pub d_y: f64,
    /// Bits per pixel.
    pub r_m: f64,
    pub r_y: f64,
    pub w_t: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn compute_loss(kind: LossKind, d_m: f64, d_y: f64, r_m: f64, r_y: f64, w_t: f64, lambda: f64) -> Result<LossBreakdown> {
    if [d_m, d_y, r_m, r_y].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid("distortions and rates must be finite and non-negative"));
    }
    if !(w_t > 0.0 && lambda > 0.0) {
        return Err(invalid("w_t and lambda must be positive"));
    }
    let wl = w_t * lambda;
    let total = match kind {
        LossKind::MeD => wl * d_m,
        LossKind::MeRD => wl * d_m + r_m,
        LossKind::RecD => wl * d_y,
        LossKind::RecRD => wl * d_y + r_y,
        LossKind::All => wl * d_y + r_m + r_y,
    };
    Ok(LossBreakdown {
        d_m,
        d_y,
        r_m,
        r_y,
        w_t,
        lambda,
        total,
    })
}

/// Graph version of [`compute_loss`]; `wl = w_t · λ`.
fn loss_var<'a>(kind: LossKind, d_m: Var<'a>, d_y: Var<'a>, r_m: Var<'a>, r_y: Var<'a>, wl: f32) -> Var<'a> {
    match kind {
        LossKind::MeD => d_m.scale(wl),
        LossKind::MeRD => d_m.scale(wl) + r_m,
        LossKind::RecD => d_y.scale(wl),
        LossKind::RecRD => d_y.scale(wl) + r_y,
        LossKind::All => d_y.scale(wl) + r_m + r_y,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    /// `1 - MS-SSIM`, with λ divided by 17.
    MsSsim,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStage {
    pub num_frames: usize,
    pub target: Target,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub distortion: Distortion,
}

impl TrainStage {
    pub fn new(num_frames: usize, target: Target, loss: LossKind, learning_rate: f64, epochs: usize) -> Result<Self> {
        let s = TrainStage {
            num_frames,
            target,
            loss,
            learning_rate,
            epochs,
            distortion: Distortion::Mse,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if ![3, 5, 7, 17].contains(&self.num_frames) {
            return Err(invalid(format!("stage frames must be 3, 5, 7 or 17, got {}", self.num_frames)));
        }
        if self.loss.target() != self.target {
            return Err(invalid(format!("loss {} does not train {}", self.loss, self.target)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.epochs == 0 {
            return Err(invalid("stage needs a positive learning rate and epoch count"));
        }
        Ok(())
    }

    /// Original-frame spacing of the clip: the 17-frame stage samples 33
    /// consecutive frames at stride 2.
    pub fn stride(&self) -> usize {
        if self.num_frames == 17 {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {:e} {}", self.num_frames, self.target, self.loss, self.learning_rate, self.epochs)?;
        if self.distortion == Distortion::MsSsim {
            write!(f, " msssim")?;
        }
        Ok(())
    }
}

impl FromStr for TrainStage {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 5 && f.len() != 6 {
            return Err(invalid(format!("schedule line needs `frames target loss lr epochs`: {s:?}")));
        }
        let bad = |x: &str| invalid(format!("bad schedule field {x:?}"));
        let mut st = TrainStage::new(
            f[0].parse().map_err(|_| bad(f[0]))?,
            f[1].parse()?,
            f[2].parse()?,
            f[3].parse().map_err(|_| bad(f[3]))?,
            f[4].parse().map_err(|_| bad(f[4]))?,
        )?;
        if let Some(&m) = f.get(5) {
            if m != "msssim" {
                return Err(bad(m));
            }
            st.distortion = Distortion::MsSsim;
        }
        Ok(st)
    }
}

/// The 13-stage schedule.
pub fn default_schedule() -> Vec<TrainStage> {
    use LossKind::*;
    use Target as T;
    let rows: [(usize, Target, LossKind, f64, usize); 13] = [
        (3, T::Inter, MeD, 1e-4, 2),
        (3, T::Recon, RecD, 1e-4, 1),
        (5, T::Recon, RecD, 1e-4, 1),
        (7, T::Recon, RecD, 1e-4, 1),
        (7, T::Inter, MeD, 1e-4, 2),
        (7, T::Inter, MeRD, 1e-4, 6),
        (7, T::Recon, RecD, 1e-4, 2),
        (7, T::Recon, RecRD, 1e-4, 6),
        (7, T::All, All, 1e-4, 4),
        (7, T::All, All, 5e-5, 3),
        (7, T::All, All, 1e-5, 2),
        (7, T::All, All, 5e-6, 2),
        (17, T::All, All, 5e-6, 2),
    ];
    rows.iter()
        .map(|&(n, t, l, lr, e)| TrainStage::new(n, t, l, lr, e).expect("built-in schedule is valid"))
        .collect()
}

/// Optional fine-tuning suffix for MS-SSIM models.
pub fn msssim_suffix() -> TrainStage {
    TrainStage {
        distortion: Distortion::MsSsim,
        ..TrainStage::new(7, Target::All, LossKind::All, 5e-6, 2).expect("valid")
    }
}

/// Parses a schedule file; blank lines and `#` comments are skipped.
pub fn parse_schedule(text: &str) -> Result<Vec<TrainStage>> {
    let stages: Vec<TrainStage> = text
        .lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if stages.is_empty() {
        return Err(invalid("schedule has no stages"));
    }
    Ok(stages)
}

pub fn dump_schedule(stages: &[TrainStage]) -> String {
    stages.iter().map(|s| format!("{s}\n")).collect()
}

/// Mask-merged prediction of two motion-compensated frames (inference).
pub fn merge_prediction(model: &Model, xf: &Tensor, xb: &Tensor) -> Result<Tensor> {
    if xf.shape() != xb.shape() {
        return Err(invalid("merge_prediction: predictions differ in shape"));
    }
    let tape = Tape::inference();
    let f = Fwd::new(&tape, &model.store);
    Ok(model.mask.merge(&f, f.c(xf.clone()), f.c(xb.clone())).value())
}

fn gaussian_weight(c: usize, k: usize) -> Tensor {
    let sigma = 1.5f64;
    let m = (k / 2) as f64;
    let g: Vec<f64> = (0..k).map(|i| (-(i as f64 - m).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = vec![0.0f32; c * c * k * k];
    for ch in 0..c {
        for y in 0..k {
            for x in 0..k {
                w[((ch * c + ch) * k + y) * k + x] = (g[y] * g[x] / (s * s)) as f32;
            }
        }
    }
    Tensor::new(&[c, c, k, k], w)
}

/// Differentiable five-scale MS-SSIM matching [`crate::metrics::ms_ssim`].
pub fn ms_ssim_var<'a>(a: Var<'a>, b: Var<'a>) -> Var<'a> {
    let tape = a.tape();
    let (c, ..) = a.dims3();
    let pool = tape.constant(Tensor::from_fn(&[c, c, 2, 2], |i| if i / 4 % (c + 1) == 0 { 0.25 } else { 0.0 }));
    let (c1, c2) = (1e-4f32, 9e-4f32);
    let (mut a, mut b) = (a, b);
    let mut acc: Option<Var<'a>> = None;
    for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (_, h, w) = a.dims3();
        let mut k = 11.min(h).min(w);
        if k % 2 == 0 {
            k -= 1;
        }
        let g = tape.constant(gaussian_weight(c, k));
        let filt = |x: Var<'a>| x.conv2d(g, None, 1, 0);
        let (ma, mb) = (filt(a), filt(b));
        let va = filt(a * a) - ma * ma;
        let vb = filt(b * b) - mb * mb;
        let cov = filt(a * b) - ma * mb;
        let cs = (cov.scale(2.0).add_scalar(c2)).div((va + vb).add_scalar(c2));
        let term = if s + 1 == MS_SSIM_WEIGHTS.len() {
            let l = (ma * mb).scale(2.0).add_scalar(c1).div((ma * ma + mb * mb).add_scalar(c1));
            l * cs
        } else {
            cs
        };
        // Per-channel means, then the weighted power.
        let (_, ho, wo) = term.dims3();
        let per_ch = term.reshape(&[c, 1, ho * wo]).bmm(tape.constant(Tensor::full(&[c, ho * wo, 1], 1.0 / (ho * wo) as f32)));
        let p = per_ch.lower_bound(1e-6).ln().scale(wt as f32);
        acc = Some(match acc {
            None => p,
            Some(v) => v + p,
        });
        if s + 1 < MS_SSIM_WEIGHTS.len() {
            a = a.conv2d(pool, None, 2, 0);
            b = b.conv2d(pool, None, 2, 0);
        }
    }
    acc.unwrap().exp().mean()
}

/// Where training clips come from.
#[derive(Clone, Debug)]
pub enum ClipSource {
    Synthetic(SceneParams),
    /// Decoded user sequences, randomly windowed and cropped.
    Sequences(Vec<Vec<Tensor>>),
}

impl ClipSource {
    /// `n` frames `stride` apart, cropped to `h × w`.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize, stride: usize, h: usize, w: usize) -> Result<Vec<Tensor>> {
        match self {
            ClipSource::Synthetic(p) => Ok(Scene::random(rng, h, w, p).clip(n, stride)),
            ClipSource::Sequences(seqs) => {
                let span = (n - 1) * stride + 1;
                let ok: Vec<&Vec<Tensor>> = seqs
                    .iter()
                    .filter(|s| {
                        s.len() >= span && s.first().is_some_and(|f| f.rank() == 3 && f.shape()[1] >= h && f.shape()[2] >= w)
                    })
                    .collect();
                if ok.is_empty() {
                    return Err(CodecError::Data(format!("no sequence has {span} frames of at least {w}x{h}")));
                }
                let seq = ok[rng.gen_range(0..ok.len())];
                let start = rng.gen_range(0..=seq.len() - span);
                let (_, sh, sw) = seq[0].dims3();
                let (y0, x0) = (rng.gen_range(0..=sh - h), rng.gen_range(0..=sw - w));
                Ok((0..n).map(|i| crop_at(&seq[start + i * stride], y0, x0, h, w)).collect())
            }
        }
    }
}

fn crop_at(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = t.dims3();
    debug_assert!(y0 + h <= th && x0 + w <= tw);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        t.data()[ch * th * tw + (y0 + p / w) * tw + x0 + p % w]
    })
}

/// One optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub step: usize,
    pub rate_idx: usize,
    pub layer: usize,
    pub loss: f64,
    pub d_m: f64,
    pub d_y: f64,
    pub r_m: f64,
    pub r_y: f64,
    pub psnr: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "stage,step,rate_idx,layer,loss,d_m,d_y,r_m,r_y,bpp,psnr";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6e},{:.6e},{:.6},{:.6},{:.6},{:.4}",
            self.stage,
            self.step,
            self.rate_idx,
            self.layer,
            self.loss,
            self.d_m,
            self.d_y,
            self.r_m,
            self.r_y,
            self.r_m + self.r_y,
            self.psnr
        )
    }
}

pub const INTRA_WARMUP_FRACTION: f64 = 0.375;
pub const INTRA_WARMUP_GAIN: f64 = 16.0;

pub struct Trainer<'m> {
    pub model: &'m mut Model,
    pub cfg: TrainConfig,
    pub gop: GopConfig,
    pub data: ClipSource,
    pub rng: ChaCha8Rng,
    pub rows: Vec<LogRow>,
    log: Option<Box<dyn Write + 'm>>,
    step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, cfg: TrainConfig, gop: GopConfig, data: ClipSource, seed: u64) -> Result<Self> {
        gop.validate()?;
        if cfg.width % 16 != 0 || cfg.height % 16 != 0 || cfg.width == 0 || cfg.height == 0 {
            return Err(CodecError::Config("training crops must be positive multiples of 16".into()));
        }
        Ok(Trainer {
            model,
            cfg,
            gop,
            data,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rows: Vec::new(),
            log: None,
            step: 0,
        })
    }

    /// Streams every log row as CSV to `w`, starting with the header.
    pub fn with_log(mut self, mut w: impl Write + 'm) -> Result<Self> {
        writeln!(w, "{}", LogRow::CSV_HEADER)?;
        self.log = Some(Box::new(w));
        Ok(self)
    }

    fn record(&mut self, row: LogRow) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{}", row.csv())?;
        }
        self.rows.push(row);
        self.step += 1;
        Ok(())
    }

    fn scaled_lr(&self, lr: f64) -> f32 {
        (lr * self.cfg.lr_scale) as f32
    }

    /// Supervised flow pretraining on synthetic ground truth. Pretraining
    /// learning rates are absolute; `lr_scale` applies to stages only.
    pub fn pretrain_flow(&mut self, steps: usize, lr: f64) -> Result<()> {
        self.model.store.set_trainable_where(|n| n.starts_with("flow."));
        let mut opt = Adam::new();
        let (h, w) = (self.cfg.height, self.cfg.width);
        let params = match &self.data {
            ClipSource::Synthetic(p) => p.clone(),
            ClipSource::Sequences(_) => SceneParams::default(),
        };
        for _ in 0..steps {
            let scene = Scene::random(&mut self.rng, h, w, &params);
            let d = self.rng.gen_range(1..=4) as f32;
            let (ta, tb) = if self.rng.gen_bool(0.5) { (0.0, d) } else { (d, 0.0) };
            let (a, b, gt) = (scene.render(ta), scene.render(tb), scene.flow(ta, tb));
            let tape = Tape::new();
            let f = Fwd::new(&tape, &self.model.store);
            let v = self.model.flow.estimate(&f, f.c(a), f.c(b))?;
            let loss = (v - f.c(gt)).abs().mean();
            let lv = loss.item() as f64;
            let g = tape.backward(loss);
            opt.step(&mut self.model.store, &g, lr as f32);
            self.record(LogRow {
                stage: "flow".into(),
                step: self.step,
                rate_idx: 0,
                layer: 0,
                loss: lv,
                d_m: lv,
                d_y: 0.0,
                r_m: 0.0,
                r_y: 0.0,
                psnr: 0.0,
            })?;
        }
        Ok(())
    }

    /// Rate-distortion training of the I-frame codec on single frames. The
    /// first [`INTRA_WARMUP_FRACTION`] of the steps use `λ·INTRA_WARMUP_GAIN`;
    /// without it the codec sits for thousands of steps on a blurry
    /// low-rate solution.
    pub fn pretrain_intra(&mut self, steps: usize, lr: f64) -> Result<()> {
        self.model.store.set_trainable_where(|n| n.starts_with(INTRA_PREFIX));
        let mut opt = Adam::new();
        let (h, w) = (self.cfg.height, self.cfg.width);
        let pixels = (h * w) as f64;
        for i in 0..steps {
            let x = self.data.sample(&mut self.rng, 1, 1, h, w)?.remove(0);
            let r = self.rng.gen_range(0..4usize);
            let warm = (i as f64) < steps as f64 * INTRA_WARMUP_FRACTION;
            let lambda = self.cfg.lambdas[r] * if warm { INTRA_WARMUP_GAIN } else { 1.0 };
            let tape = Tape::new();
            let f = Fwd::new(&tape, &self.model.store);
            let mut noise = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let out = self.model.intra_forward(&f, f.c(x), r as f64, QuantMode::Train, &mut noise)?;
            let rate = out.bits.scale(1.0 / pixels as f32);
            let loss = out.d.scale(lambda as f32) + rate;
            let (d, rv, lv) = (out.d.item() as f64, rate.item() as f64, loss.item() as f64);
            let g = tape.backward(loss);
            opt.step(&mut self.model.store, &g, lr as f32);
            self.record(LogRow {
                stage: "intra".into(),
                step: self.step,
                rate_idx: r,
                layer: 0,
                loss: lv,
                d_m: 0.0,
                d_y: d,
                r_m: 0.0,
                r_y: rv,
                psnr: psnr_from_mse(d),
            })?;
        }
        Ok(())
    }

    /// Number of clips a stage visits.
    pub fn clips_for(&self, stage: &TrainStage) -> usize {
        ((stage.epochs * self.cfg.clips_per_epoch) as f64 * self.cfg.epoch_scale).ceil().max(1.0) as usize
    }

    pub fn run_stage(&mut self, index: usize, stage: &TrainStage) -> Result<()> {
        stage.validate()?;
        let target = stage.target;
        self.model.store.set_trainable_where(|n| target.trains(n));
        let mut opt = Adam::new();
        let name = format!("s{}-{}-{}", index + 1, stage.num_frames, stage.loss);
        for _ in 0..self.clips_for(stage) {
            let r = self.rng.gen_range(0..4usize);
            let frames = self.data.sample(&mut self.rng, stage.num_frames, stage.stride(), self.cfg.height, self.cfg.width)?;
            self.train_clip(&name, stage, &frames, r, &mut opt)?;
        }
        Ok(())
    }

    /// One pass over a clip: one optimiser step per B-frame.
    pub fn train_clip(&mut self, name: &str, stage: &TrainStage, frames: &[Tensor], rate_idx: usize, opt: &mut Adam) -> Result<()> {
        let plan = plan_training_clip(frames.len(), stage.stride(), &self.gop)?;
        let (_, h, w) = frames[0].dims3();
        let pixels = (h * w) as f32;
        let mut lambda = self.cfg.lambdas[rate_idx];
        if stage.distortion == Distortion::MsSsim {
            lambda /= 17.0;
        }
        let mut refs: Vec<Option<ReferenceEntry>> = vec![None; frames.len()];
        for p in &plan {
            let t = p.display_index;
            if p.is_intra() {
                let x_hat = self.model.intra_reconstruct(&frames[t], rate_idx as f64)?;
                refs[t] = Some(ReferenceEntry {
                    display_index: t,
                    frame_type: FrameType::I,
                    x_hat,
                    f_hat: Tensor::zeros(&[1]),
                    motion_ctx: None,
                    y_hat: None,
                });
                continue;
            }
            let spec = spec_of(p, &plan, rate_idx as f64)?;
            let mut noise = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let tape = Tape::new();
            let f = Fwd::new(&tape, &self.model.store);
            let view = |e: &ReferenceEntry| -> RefView<'_> {
                if e.frame_type == FrameType::I {
                    let x_hat = f.c(e.x_hat.clone());
                    RefView {
                        x_hat,
                        feature: self.model.ctx.lift_iframe(&f, x_hat),
                        motion_ctx: None,
                        y_sym: None,
                    }
                } else {
                    e.view(&f)
                }
            };
            let fv = view(refs[p.fwd_ref.unwrap()].as_ref().expect("planned before use"));
            let bv = view(refs[p.bwd_ref.unwrap()].as_ref().expect("planned before use"));
            let x = f.c(frames[t].clone());
            let opts = BTrainOptions {
                zero_motion_contexts: false,
                detach_motion: stage.target == Target::Recon,
            };
            let out = self.model.b_forward(&f, x, &fv, &bv, &spec, QuantMode::Train, opts, &mut noise)?;
            let (d_m, d_y) = match stage.distortion {
                Distortion::Mse => (out.d_m, out.d_y),
                Distortion::MsSsim => {
                    (out.d_m, ms_ssim_var(out.x_hat, x).neg().add_scalar(1.0))
                }
            };
            let r_m = out.bits_m.scale(1.0 / pixels);
            let r_y = out.bits_y.scale(1.0 / pixels);
            let wl = (p.quality_coeff * lambda) as f32;
            let loss = loss_var(stage.loss, d_m, d_y, r_m, r_y, wl);
            let row = LogRow {
                stage: name.to_string(),
                step: self.step,
                rate_idx,
                layer: p.layer,
                loss: loss.item() as f64,
                d_m: d_m.item() as f64,
                d_y: d_y.item() as f64,
                r_m: r_m.item() as f64,
                r_y: r_y.item() as f64,
                psnr: psnr_from_mse(out.d_y.item() as f64),
            };
            let entry = ReferenceEntry {
                display_index: t,
                frame_type: FrameType::B,
                x_hat: out.x_hat.value(),
                f_hat: out.f_hat.value(),
                motion_ctx: Some(MotionDiffContext {
                    m_f: out.m_f.value(),
                    m_b: out.m_b.value(),
                }),
                y_hat: Some(out.y_sym.value()),
            };
            let g = tape.backward(loss);
            let lr = self.scaled_lr(stage.learning_rate);
            opt.step(&mut self.model.store, &g, lr);
            refs[t] = Some(entry);
            self.record(row)?;
        }
        Ok(())
    }

    /// Pretraining followed by every stage, plus the MS-SSIM suffix when
    /// enabled.
    pub fn run_schedule(&mut self, stages: &[TrainStage]) -> Result<()> {
        if self.cfg.flow_pretrain_steps > 0 {
            self.pretrain_flow(self.cfg.flow_pretrain_steps, 1e-3)?;
        }
        if self.cfg.intra_pretrain_steps > 0 {
            self.pretrain_intra(self.cfg.intra_pretrain_steps, 1e-3)?;
        }
        for (i, s) in stages.iter().enumerate() {
            self.run_stage(i, s)?;
        }
        if self.cfg.msssim_suffix {
            self.run_stage(stages.len(), &msssim_suffix())?;
        }
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

fn spec_of(p: &FramePlan, plan: &[FramePlan], rate_idx: f64) -> Result<BFrameSpec> {
    let (d_f, d_b) = p.distances().ok_or_else(|| invalid("B-frame without references"))?;
    Ok(BFrameSpec {
        d_f,
        d_b,
        layer: p.layer,
        case: reference_case(p, plan)?,
        rate_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let l = compute_loss(LossKind::All, 0.0, 0.01, 0.02, 0.1, 1.4, 85.0).unwrap();
        assert!((l.total - 1.31).abs() < 1e-12);
        assert_eq!(compute_loss(LossKind::MeD, 0.0, 0.3, 0.1, 0.1, 1.0, 85.0).unwrap().total, 0.0);
        assert!(compute_loss(LossKind::All, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(compute_loss(LossKind::All, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!("bogus".parse::<LossKind>().is_err());
    }

    #[test]
    fn schedule_roundtrip() {
        let s = default_schedule();
        assert_eq!(s.len(), 13);
        assert_eq!(parse_schedule(&dump_schedule(&s)).unwrap(), s);
        let t = dump_schedule(&[msssim_suffix()]);
        assert_eq!(parse_schedule(&t).unwrap(), vec![msssim_suffix()]);
        assert!(parse_schedule("7 Inter recD 1e-4 2").is_err());
        assert!(parse_schedule("9 All all 1e-4 2").is_err());
    }

    #[test]
    fn target_groups() {
        assert!(Target::Inter.trains("mv.enc.c0.weight"));
        assert!(!Target::Inter.trains("y.prior.out0.weight"));
        assert!(Target::Recon.trains("ctx.fe0.weight"));
        assert!(Target::All.trains("mask.b1.proj.weight"));
        assert!(!Target::All.trains("intra.enc.c0.weight"));
    }

    #[test]
    fn differentiable_ms_ssim_matches_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(&[3, 48, 48], 0.0, 1.0, &mut rng);
        let b = a.map(|v| (v + 0.1 * (v * 37.0).sin()).clamp(0.0, 1.0));
        let tape = Tape::inference();
        let v = ms_ssim_var(tape.constant(a.clone()), tape.constant(b.clone())).item() as f64;
        let r = crate::metrics::ms_ssim(&a, &b).unwrap();
        assert!((v - r).abs() < 1e-4, "{v} vs {r}");
    }
}
