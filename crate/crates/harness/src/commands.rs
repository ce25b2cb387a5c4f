//! The work behind each subcommand, callable without the CLI.

use kdqat_core::batch::{kd_batch, supervised_batch, Example};
use kdqat_core::diagnostics::{diagnose_pair, hessian_spectrum, DiagnosticsReport, EigenEstimate};
use kdqat_core::encoder::forward;
use kdqat_core::gradcheck::Floor;
use kdqat_core::kd::{gamma_grid, Term, UnifiedMode};
use kdqat_core::{gradsuite, EncoderModel, Exec, KdConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{ExperimentConfig, HessianObjective};
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{DevMetrics, GradcheckLine, Record};
use crate::task::{generate, Dataset};
use crate::train::{fit, Objective, RunCtx};

/// Largest relative error a gradient check may report.
pub const GRADCHECK_TOLERANCE: f64 = 1e-2;

/// The τ settings of the temperature sweep; `None` is the MSE endpoint,
/// which distills raw attention scores instead of softened maps.
pub const TAU_SETTINGS: [(&str, Option<f32>); 5] = [
    ("tau=1", Some(1.0)),
    ("tau=5", Some(5.0)),
    ("tau=10", Some(10.0)),
    ("tau=20", Some(20.0)),
    ("mse", None),
];

/// Writes the fully resolved configuration into the run directory.
pub fn echo_config(ctx: &RunCtx, cfg: &ExperimentConfig) -> Result<()> {
    if let Some(path) = ctx.path("config.toml") {
        std::fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<EncoderModel> {
    Ok(EncoderModel::init(cfg.model, cfg.init_std, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?)
}

pub fn train_teacher_on(cfg: &ExperimentConfig, ctx: &mut RunCtx, data: &Dataset) -> Result<(EncoderModel, DevMetrics)> {
    let (model, dev) = fit(ctx, "teacher", cfg.seed, &cfg.teacher, init_model(cfg)?, data, Objective::Supervised)?;
    if let Some(path) = ctx.path("teacher.ckpt") {
        checkpoint::save_model(&path, &model)?;
    }
    Ok((model, dev))
}

pub fn train_teacher(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<(EncoderModel, DevMetrics)> {
    let data = generate(&cfg.task)?;
    train_teacher_on(cfg, ctx, &data)
}

/// The configured teacher checkpoint, a finished teacher in the run
/// directory when resuming, or a freshly trained one.
pub fn obtain_teacher(cfg: &ExperimentConfig, ctx: &mut RunCtx, data: &Dataset) -> Result<EncoderModel> {
    if let Some(p) = &cfg.paths.teacher {
        return checkpoint::load_model(p, cfg.model);
    }
    if let (true, Some(p)) = (ctx.resume, ctx.path("teacher.ckpt")) {
        if p.exists() {
            return checkpoint::load_model(&p, cfg.model);
        }
    }
    Ok(train_teacher_on(cfg, ctx, data)?.0)
}

/// Quantization-aware training of a student initialized from `teacher`.
pub fn qat_from(
    cfg: &ExperimentConfig,
    ctx: &mut RunCtx,
    teacher: &EncoderModel,
    data: &Dataset,
) -> Result<(EncoderModel, DevMetrics)> {
    if teacher.config != cfg.model {
        return Err(HarnessError::Config("teacher architecture differs from the configured student".into()));
    }
    let objective = Objective::Distill {
        teacher,
        quant: &cfg.quant,
        kd: &cfg.kd,
    };
    let subset;
    let data = match cfg.qat_examples {
        0 => data,
        n => {
            subset = Dataset {
                train: data.train[..n.min(data.train.len())].to_vec(),
                dev: data.dev.clone(),
            };
            &subset
        }
    };
    let (student, dev) = fit(ctx, "qat", cfg.seed, &cfg.qat, teacher.clone(), data, objective)?;
    if let Some(path) = ctx.path("student.ckpt") {
        checkpoint::save_model(&path, &student)?;
    }
    Ok((student, dev))
}

pub fn qat(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<(EncoderModel, DevMetrics)> {
    let data = generate(&cfg.task)?;
    let teacher = obtain_teacher(cfg, ctx, &data)?;
    qat_from(cfg, ctx, &teacher, &data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseSummary {
    pub examples: usize,
    pub median_ranking_loss: f64,
    pub median_cover_length_ratio: f64,
    pub mean_gen_dist: f64,
    pub mean_prop_dist: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Attention diagnostics of the quantized `student` against the
/// full-precision `teacher`, averaged over `examples`.
pub fn diagnose_models(
    cfg: &ExperimentConfig,
    teacher: &EncoderModel,
    student: &EncoderModel,
    examples: &[Example],
    ctx: &mut RunCtx,
) -> Result<(DiagnosticsReport, DiagnoseSummary)> {
    if teacher.config != student.config {
        return Err(HarnessError::Config("teacher and student architectures differ".into()));
    }
    let view = student.quantized_view(&cfg.quant)?;
    let reports = ctx.exec.try_map(examples, |ex| -> Result<DiagnosticsReport> {
        let (_, t) = forward(teacher, &ex.tokens, true, None)?;
        let (_, s) = view.forward(&ex.tokens, true)?;
        Ok(diagnose_pair(&t.expect("captured"), &s.expect("captured"), &cfg.diagnose.metrics)?)
    })?;
    let report = DiagnosticsReport::mean(&reports)?;
    if cfg.diagnose.emit_maps {
        if let Some(ex) = examples.first() {
            let (_, t) = forward(teacher, &ex.tokens, true, None)?;
            let (_, s) = view.forward(&ex.tokens, true)?;
            for (name, trace) in [("teacher", t), ("student", s)] {
                for (l, layer) in trace.expect("captured").layers.iter().enumerate() {
                    for (h, m) in layer.maps.iter().enumerate() {
                        let rows = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
                        ctx.metrics.emit(Record::Map { model: name.into(), layer: l, head: h, rows })?;
                    }
                }
            }
        }
    }
    for h in &report.heads {
        ctx.metrics.emit(Record::Head(h.clone()))?;
    }
    for r in &report.ranges {
        ctx.metrics.emit(Record::Range(r.clone()))?;
    }
    for d in &report.distances {
        ctx.metrics.emit(Record::Distance(d.clone()))?;
    }
    let summary = DiagnoseSummary {
        examples: examples.len(),
        median_ranking_loss: median(report.heads.iter().map(|h| h.ranking_loss).collect()),
        median_cover_length_ratio: median(report.heads.iter().map(|h| h.cover_length_ratio).collect()),
        mean_gen_dist: mean(report.distances.iter().map(|d| d.gen_dist)),
        mean_prop_dist: mean(report.distances.iter().map(|d| d.prop_dist)),
    };
    ctx.metrics.emit(Record::Summary {
        examples: summary.examples,
        median_ranking_loss: summary.median_ranking_loss,
        median_cover_length_ratio: summary.median_cover_length_ratio,
        mean_gen_dist: summary.mean_gen_dist,
        mean_prop_dist: summary.mean_prop_dist,
    })?;
    Ok((report, summary))
}

fn required_teacher(cfg: &ExperimentConfig, ctx: &RunCtx) -> Result<EncoderModel> {
    let path = cfg
        .paths
        .teacher
        .clone()
        .or_else(|| ctx.path("teacher.ckpt").filter(|p| p.exists()))
        .ok_or_else(|| HarnessError::Config("no teacher checkpoint: set [paths] teacher".into()))?;
    checkpoint::load_model(&path, cfg.model)
}

/// Without a student checkpoint the student is the quantized teacher,
/// before any quantization-aware training.
fn student_or_teacher(cfg: &ExperimentConfig, teacher: &EncoderModel) -> Result<EncoderModel> {
    match &cfg.paths.student {
        Some(p) => checkpoint::load_model(p, cfg.model),
        None => Ok(teacher.clone()),
    }
}

pub fn diagnose(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<DiagnoseSummary> {
    let teacher = required_teacher(cfg, ctx)?;
    let student = student_or_teacher(cfg, &teacher)?;
    let data = generate(&cfg.task)?;
    let n = cfg.diagnose.examples.min(data.dev.len());
    Ok(diagnose_models(cfg, &teacher, &student, &data.dev[..n], ctx)?.1)
}

pub fn hessian(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<Vec<EigenEstimate>> {
    let teacher = required_teacher(cfg, ctx)?;
    let model = match cfg.hessian.objective {
        HessianObjective::Teacher => teacher.clone(),
        HessianObjective::Student => student_or_teacher(cfg, &teacher)?,
    };
    let data = generate(&cfg.task)?;
    let batch = &data.train[..cfg.hessian.examples.clamp(1, data.train.len())];
    let theta: Vec<f64> = model.flatten().iter().map(|&v| v as f64).collect();
    let grad = |t: &[f64]| -> kdqat_core::Result<Vec<f64>> {
        let mut m = model.clone();
        m.load_flat(&t.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
        let g = match cfg.hessian.objective {
            HessianObjective::Teacher => supervised_batch(&m, batch, Exec::Sequential)?.0,
            HessianObjective::Student => {
                let view = m.quantized_view(&cfg.quant)?;
                kd_batch(&teacher, &view, &cfg.kd, batch, Exec::Sequential)?.0
            }
        };
        Ok(g.into_iter().flatten().map(|v| v as f64).collect())
    };
    let m = &cfg.diagnose.metrics;
    let estimates = hessian_spectrum(&grad, &theta, &cfg.hessian.seeds, m.power_steps, m.power_tol, ctx.exec)?;
    for (&seed, e) in cfg.hessian.seeds.iter().zip(&estimates) {
        ctx.metrics.emit(Record::Eigen { seed, estimate: *e })?;
    }
    Ok(estimates)
}

/// Every op and every composite loss against the f64 reference. Composite
/// families are also reported under the unscaled 1e-8 floor, for the record.
pub fn gradcheck(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<Vec<GradcheckLine>> {
    let seeds = cfg.gradcheck.seeds;
    let mut lines: Vec<GradcheckLine> = gradsuite::run(seeds, None, ctx.exec)?.into_iter().map(Into::into).collect();
    let literal = gradsuite::run(seeds, Some(Floor::Absolute(1e-8)), ctx.exec)?;
    lines.extend(literal.into_iter().filter(|r| r.kind == "composite").map(Into::into));
    for l in &lines {
        ctx.metrics.emit(Record::Gradcheck(l.clone()))?;
    }
    Ok(lines)
}

/// Lines of [`gradcheck`] that decide pass or fail.
pub fn gradcheck_failures(lines: &[GradcheckLine]) -> Vec<&GradcheckLine> {
    let gated = |l: &&GradcheckLine| l.kind == "op" || l.floor == format!("{:?}", gradsuite::COMPOSITE_FLOOR);
    lines.iter().filter(gated).filter(|l| !(l.worst_rel < GRADCHECK_TOLERANCE)).collect()
}

/// One sweep run: settings applied to `cfg`, teacher per seed.
struct SweepRun {
    setting: String,
    mode: Option<UnifiedMode>,
    gamma: Option<f32>,
    tau: Option<f32>,
    kd: KdConfig,
}

fn attention_free(kd: &KdConfig) -> KdConfig {
    let mut kd = kd.clone();
    kd.terms.retain(|t| !matches!(t, Term::Score | Term::Map | Term::Output | Term::MhaOnly));
    kd.unified = UnifiedMode::Off;
    kd
}

fn run_sweep(cfg: &ExperimentConfig, ctx: &mut RunCtx, sweep: &str, runs: Vec<SweepRun>) -> Result<Vec<Record>> {
    let data = generate(&cfg.task)?;
    let mut out = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let mut scfg = cfg.clone();
        scfg.seed = seed;
        let teacher = match &cfg.paths.teacher {
            Some(p) => checkpoint::load_model(p, cfg.model)?,
            None => {
                let mut tctx = ctx.child(&format!("teacher-seed{seed}"))?;
                obtain_teacher(&scfg, &mut tctx, &data)?
            }
        };
        for run in &runs {
            let name = format!("{}-seed{seed}", run.setting.replace('=', ""));
            let mut rcfg = scfg.clone();
            rcfg.kd = run.kd.clone();
            let mut rctx = ctx.child(&name)?;
            echo_config(&rctx, &rcfg)?;
            let (_, dev) = qat_from(&rcfg, &mut rctx, &teacher, &data)?;
            let final_loss = rctx
                .metrics
                .records()
                .iter()
                .rev()
                .find_map(|r| match r {
                    Record::Epoch { train, .. } => Some(train.total),
                    _ => None,
                })
                .unwrap_or(f64::NAN);
            let record = Record::Sweep {
                sweep: sweep.into(),
                setting: run.setting.clone(),
                mode: run.mode.map(|m| format!("{m:?}").to_lowercase()),
                gamma: run.gamma,
                tau: run.tau,
                seed,
                dev,
                final_loss,
                run_dir: name,
            };
            ctx.metrics.emit(record.clone())?;
            out.push(record);
        }
    }
    Ok(out)
}

/// Every γ on the grid, for every configured unified mode and seed.
pub fn sweep_gamma(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<Vec<Record>> {
    let base = attention_free(&cfg.kd);
    let mut runs = Vec::new();
    for &mode in &cfg.sweep.modes {
        if mode == UnifiedMode::Off {
            return Err(HarnessError::Config("sweep modes must be sm1 or sm2".into()));
        }
        for gamma in gamma_grid() {
            let mut kd = base.clone();
            kd.unified = mode;
            kd.gamma = gamma;
            runs.push(SweepRun {
                setting: format!("{}-gamma={gamma}", format!("{mode:?}").to_lowercase()),
                mode: Some(mode),
                gamma: Some(gamma),
                tau: None,
                kd,
            });
        }
    }
    run_sweep(cfg, ctx, "gamma", runs)
}

/// The map loss at τ ∈ {1, 5, 10, 20} and the score-MSE endpoint.
pub fn sweep_tau(cfg: &ExperimentConfig, ctx: &mut RunCtx) -> Result<Vec<Record>> {
    let base = attention_free(&cfg.kd);
    let runs = TAU_SETTINGS
        .iter()
        .map(|&(name, tau)| {
            let mut kd = base.clone();
            match tau {
                Some(t) => {
                    kd.terms.push(Term::Map);
                    kd.tau = t;
                }
                None => kd.terms.push(Term::Score),
            }
            SweepRun {
                setting: name.into(),
                mode: None,
                gamma: None,
                tau,
                kd,
            }
        })
        .collect();
    run_sweep(cfg, ctx, "tau", runs)
}
