//! Subcommand bodies.

use anyhow::{bail, Context};
use serde::Serialize;

use tpm_core::episode::{
    episode_record, scene_record, score, segment as run_segment, support_prototypes, Estimators,
    Method, PriorSource, ProtoMode, QueryInfo,
};
use tpm_core::format::{read_feature_grid, read_mask, write_feature_grid, write_mask};
use tpm_core::grid::{distance_map_to, downsample_mask};
use tpm_core::metrics::{cross_entropy, dice};
use tpm_core::report::{curve_csv, emit_report, fmt_float, to_csv, to_json, Report, ReportFormat};
use tpm_core::synth::{gen_scene, PairGenerator};
use tpm_core::threshold::{avg_est, lin_est_fit, linspace, prior_sweep, threshold_sweep, LinEstModel};
use tpm_core::{GridMask, PrototypeSet};

use crate::files;
use crate::{
    EvalArgs, FitLinestArgs, Mode, PriorArg, ProtosArgs, RecordsArgs, SegmentArgs, SweepArgs, SweepKind,
    SynthArgs,
};

#[derive(Serialize)]
struct SceneFile<'a> {
    config: &'a tpm_core::synth::SceneConfig,
    prototypes: &'a [Vec<f64>],
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let scene = gen_scene(&args.scene.config())?;
    write_feature_grid(&scene.features, &args.out_features)?;
    write_mask(&scene.truth, &args.out_mask)?;
    if let Some(path) = &args.out_protos {
        files::write_json(
            path,
            &SceneFile {
                config: &scene.meta,
                prototypes: &scene.prototypes_true,
            },
        )?;
    }
    Ok(())
}

pub fn protos(args: ProtosArgs) -> anyhow::Result<()> {
    if args.k == 0 {
        bail!("--k must be at least 1");
    }
    let params = args.model.params()?;
    let features = read_feature_grid(&args.features)?;
    let mask = read_mask(&args.mask)?;
    let mode = if args.k > 1 { ProtoMode::Mp(args.k) } else { ProtoMode::Sp };
    let set = support_prototypes(&features, &mask, mode, &params, args.seed)?;
    files::write_prototypes(&args.out, &set)
}

fn proto_mode(mode: Mode, k: usize, mask: &GridMask) -> anyhow::Result<ProtoMode> {
    let binary = mask.classes() == 1;
    match mode {
        Mode::Sp | Mode::Mp if !binary => {
            bail!("support mask has {} classes; use --mode mc", mask.classes())
        }
        Mode::Mp if k == 0 => bail!("--k must be at least 1"),
        Mode::Mp => Ok(ProtoMode::Mp(k)),
        Mode::Sp | Mode::Mc => Ok(ProtoMode::Sp),
    }
}

#[derive(Serialize)]
struct SegmentSummary {
    method: String,
    prior_fg: f64,
    boundary: Option<f64>,
    predicted_fg: usize,
}

pub fn segment(args: SegmentArgs) -> anyhow::Result<()> {
    let params = args.model.params()?;
    let support_features = read_feature_grid(&args.support_features)?;
    let support_mask = read_mask(&args.support_mask)?;
    let query = read_feature_grid(&args.query_features)?;
    let truth = args.query_mask.as_ref().map(read_mask).transpose()?;

    let protos = proto_mode(args.mode, args.k, &support_mask)?;
    let mut estimators = Estimators::default();
    let prior = match args.prior_source {
        PriorArg::Fixed => PriorSource::AdnetFixed,
        PriorArg::Avgest => {
            let path = args.records.as_ref().context("--prior-source avgest needs --records")?;
            estimators.avg = Some(avg_est(&files::read_records(path)?)?);
            PriorSource::AvgEst
        }
        PriorArg::Linest => {
            let path = args.linest.as_ref().context("--prior-source linest needs --linest")?;
            let model: LinEstModel = serde_json::from_str(&files::read_text(path)?)
                .with_context(|| format!("malformed model in {}", path.display()))?;
            let fields = [model.intercept, model.coef_fg_count, model.coef_slice_loc];
            if fields.iter().any(|v| !v.is_finite()) || !(model.clamp_eps > 0.0 && model.clamp_eps < 0.5) {
                bail!("invalid model in {}", path.display());
            }
            estimators.linest = Some(model);
            PriorSource::LinEst
        }
        PriorArg::Ocp => {
            if truth.is_none() {
                bail!("--prior-source ocp needs --query-mask");
            }
            PriorSource::Ocp
        }
    };
    if !(0.0..=1.0).contains(&args.slice_loc) {
        bail!("--slice-loc must lie in [0, 1]");
    }
    let method = Method::new(prior, protos);
    let seg = run_segment(
        &support_features,
        &support_mask,
        &query,
        QueryInfo {
            slice_loc: args.slice_loc,
            truth: truth.as_ref(),
        },
        method,
        &params,
        &estimators,
        args.seed,
    )?;

    write_mask(&seg.mask, &args.out_mask)?;
    if let Some(path) = &args.out_prob {
        files::write_prob_csv(path, &seg.fg_prob)?;
    }
    if let Some(path) = &args.out_report {
        match &truth {
            Some(t) => files::write_json(path, &score(&seg, t, &method.label())?)?,
            None => files::write_json(
                path,
                &SegmentSummary {
                    method: method.label(),
                    prior_fg: seg.prior_fg,
                    boundary: seg.boundary,
                    predicted_fg: seg.mask.foreground_count(),
                },
            )?,
        }
    }
    Ok(())
}

pub fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let params = args.model.params()?;
    let features = read_feature_grid(&args.features)?;
    let mut mask = read_mask(&args.mask)?;
    if mask.height() != features.height() || mask.width() != features.width() {
        mask = downsample_mask(&mask, features.height(), features.width())?;
    }
    let set: PrototypeSet = match &args.protos {
        Some(path) => files::read_prototypes(path)?,
        None => support_prototypes(&features, &mask, ProtoMode::Sp, &params, 0)?,
    };
    let distances = distance_map_to(&features, set.vectors())?;
    let (lo, hi, x_name) = match args.kind {
        SweepKind::Threshold => (args.lo.unwrap_or(0.0), args.hi.unwrap_or(2.0), "threshold"),
        SweepKind::Prior => (args.lo.unwrap_or(0.005), args.hi.unwrap_or(0.995), "prior"),
    };
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        bail!("sweep range must satisfy lo <= hi");
    }
    let grid = linspace(lo, hi, args.steps);
    let result = match args.kind {
        SweepKind::Threshold => threshold_sweep(&distances, &mask, &params, &grid)?,
        SweepKind::Prior => prior_sweep(&distances, &mask, &params, &grid)?,
    };
    emit_report(&result, args.format.into(), &args.out)?;
    if let Some(path) = &args.ce_curve {
        files::write_text(path, &curve_csv(x_name, "ce", result.points.iter().map(|p| (p.x, p.ce))))?;
    }
    if let Some(path) = &args.dice_curve {
        files::write_text(path, &curve_csv(x_name, "dice", result.points.iter().map(|p| (p.x, p.dice))))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    dice: Vec<f64>,
    mean_dice: f64,
    ce: Option<f64>,
    predicted_fg: usize,
    true_fg: usize,
}

impl Report for EvalReport {
    fn csv_header(&self) -> Vec<String> {
        ["class", "dice", "ce"].map(String::from).to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let ce = self.ce.map(fmt_float).unwrap_or_default();
        self.dice
            .iter()
            .enumerate()
            .map(|(i, &d)| vec![(i + 1).to_string(), fmt_float(d), ce.clone()])
            .collect()
    }
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let pred = read_mask(&args.pred)?;
    let truth = read_mask(&args.truth)?;
    let classes = pred.classes().max(truth.classes());
    let dice = (1..=classes)
        .map(|c| dice(&pred, &truth, c))
        .collect::<Result<Vec<_>, _>>()?;
    let ce = match &args.prob {
        Some(path) => Some(cross_entropy(&files::read_prob_csv(path)?, &truth)?),
        None => None,
    };
    let report = EvalReport {
        mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
        dice,
        ce,
        predicted_fg: pred.foreground_count(),
        true_fg: truth.foreground_count(),
    };
    let format: ReportFormat = args.format.into();
    match &args.out {
        Some(path) => emit_report(&report, format, path)?,
        None => print!(
            "{}",
            match format {
                ReportFormat::Json => to_json(&report)?,
                ReportFormat::Csv => to_csv(&report)?,
            }
        ),
    }
    Ok(())
}

pub fn records(args: RecordsArgs) -> anyhow::Result<()> {
    let params = args.model.params()?;
    let records = if let Some(n) = args.synthetic {
        let mode = match args.mode {
            Mode::Mp if args.k == 0 => bail!("--k must be at least 1"),
            Mode::Mp => ProtoMode::Mp(args.k),
            Mode::Sp | Mode::Mc => ProtoMode::Sp,
        };
        let generator = PairGenerator::new(args.scene.config());
        (0..n)
            .map(|i| {
                let (support, query) = generator.pair(i)?;
                scene_record(&support, &query, mode, &params)
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let manifest = args.manifest.as_ref().context("--manifest or --synthetic is required")?;
        let mut out = Vec::new();
        for (i, e) in files::read_manifest(manifest)?.iter().enumerate() {
            let support_features = read_feature_grid(&e.support_features)?;
            let support_mask = read_mask(&e.support_mask)?;
            let query = read_feature_grid(&e.query_features)?;
            let query_mask = read_mask(&e.query_mask)?;
            let mode = proto_mode(args.mode, args.k, &support_mask)?;
            let record = episode_record(
                &support_features,
                &support_mask,
                &query,
                &query_mask,
                e.slice_loc,
                mode,
                &params,
                0,
            )
            .with_context(|| format!("manifest entry {i}"))?;
            out.push(record);
        }
        out
    };
    emit_report(&records, args.format.into(), &args.out)?;
    Ok(())
}

pub fn fit_linest(args: FitLinestArgs) -> anyhow::Result<()> {
    if !(args.clamp_eps > 0.0 && args.clamp_eps < 0.5) {
        bail!("--clamp-eps must lie in (0, 0.5)");
    }
    let records = files::read_records(&args.records)?;
    let mut model = lin_est_fit(&records)?;
    model.clamp_eps = args.clamp_eps;
    files::write_json(&args.out, &model)?;
    println!("avg_icp={}", fmt_float(avg_est(&records)?));
    Ok(())
}
