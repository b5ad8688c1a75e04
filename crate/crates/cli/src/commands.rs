use std::fs;
use std::path::Path;

use layoutforge::exchange::ExchangeTensor;
use layoutforge::gradcheck::run_gradcheck;
use layoutforge::guidance::restore_moments;
use layoutforge::layout::{initial_masks, LayoutPlan, LATENT_SCALE};
use layoutforge::manifest::RunManifest;
use layoutforge::toy::sample_latent;
use layoutforge::{
    loss_phase1, loss_phase3, migrate_latent, plan_layout, run_guidance, AttentionMaps, Error,
    Grid, LatentGrid, MaskSet, SubjectSet, ToyAttentionModel,
};

use crate::report::Report;
use crate::{Common, Failure};

type Outcome = Result<Report, Failure>;

/// Offset between the toy model seed and the synthetic latent seed.
const LATENT_SEED_OFFSET: u64 = 1;

struct Context {
    manifest: RunManifest,
    subjects: SubjectSet,
}

fn load(c: &Common) -> Result<Context, Failure> {
    let mut manifest = RunManifest::load(&c.manifest)?;
    if let Some(seed) = c.seed {
        manifest.seed = seed;
    }
    let subjects = manifest.subject_set()?;
    fs::create_dir_all(&c.out).map_err(|e| Error::Io {
        path: c.out.display().to_string(),
        source: e,
    })?;
    Ok(Context { manifest, subjects })
}

fn attention(ctx: &Context) -> Result<AttentionMaps, Failure> {
    let path = ctx.manifest.input("attention")?;
    let maps = ExchangeTensor::read_file(&path)?.to_attention()?;
    ctx.manifest.check_grid(maps.side(), maps.tokens())?;
    Ok(maps.preprocess(ctx.manifest.preprocess))
}

fn latent_for(ctx: &Context, side: usize) -> Result<LatentGrid, Failure> {
    let path = ctx.manifest.input("latent")?;
    let z = ExchangeTensor::read_file(&path)?.to_latent()?;
    check_latent(&z, side)?;
    Ok(z)
}

fn check_latent(z: &LatentGrid, side: usize) -> Result<(), Error> {
    let size = side * LATENT_SCALE;
    if z.height() != size || z.width() != size {
        return Err(Error::Dimension(format!(
            "latent is {}x{} but attention side {side} needs {size}x{size}",
            z.height(),
            z.width()
        )));
    }
    Ok(())
}

fn write(path: &Path, t: &ExchangeTensor) -> Result<(), Failure> {
    t.write_file(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_grad(c: &Common, name: &str, grad: Vec<Grid>) -> Result<(), Failure> {
    write(&c.out.join(name), &ExchangeTensor::from_token_grids(&grad))
}

fn write_masks(c: &Common, prefix: &str, masks: &[layoutforge::BinaryGrid]) -> Result<(), Failure> {
    for (i, m) in masks.iter().enumerate() {
        write(&c.out.join(format!("{prefix}_{i}.xamt")), &ExchangeTensor::from_mask(m))?;
    }
    Ok(())
}

fn header(r: &mut Report, ctx: &Context, side: usize, tokens: usize) {
    r.put("side", side)
        .put("tokens", tokens)
        .list("subjects", ctx.subjects.tokens())
        .put(
            "background",
            ctx.subjects
                .background()
                .map_or_else(|| "none".to_string(), |b| b.to_string()),
        );
}

pub fn loss1(c: &Common) -> Outcome {
    let ctx = load(c)?;
    let maps = attention(&ctx)?;
    let weights = ctx.manifest.flags.apply(&ctx.manifest.weights);
    let (loss, grad) = loss_phase1(&maps, &ctx.subjects, &weights)?;
    let mut r = Report::new("loss1");
    header(&mut r, &ctx, maps.side(), maps.tokens());
    r.float("loss_be", loss.be)
        .float("loss_ol_total", loss.overlap.total)
        .floats("loss_ol_per_subject", &loss.overlap.per_subject)
        .floats("loss_norm_per_subject", &loss.norm)
        .float("loss_total", loss.total)
        .floats(
            "max_attention_per_subject",
            &ctx.subjects.tokens().iter().map(|&s| maps.token(s).max()).collect::<Vec<_>>(),
        );
    if c.emit_grad {
        write_grad(c, "grad_loss1.xamt", grad)?;
        r.put("grad", "grad_loss1.xamt");
    }
    Ok(r)
}

pub fn masks(c: &Common) -> Outcome {
    let ctx = load(c)?;
    let maps = attention(&ctx)?;
    let (gammas, masks) = initial_masks(&maps, &ctx.subjects, &ctx.manifest.gamma)?;
    write_masks(c, "mask_initial", &masks)?;
    let mut r = Report::new("masks");
    header(&mut r, &ctx, maps.side(), maps.tokens());
    r.floats("gamma_per_subject", &gammas)
        .list("area_per_subject", masks.iter().map(|m| m.area()))
        .put("overlap", layoutforge::layout::total_pairwise_overlap(&masks));
    Ok(r)
}

fn plan_report(r: &mut Report, plan: &LayoutPlan) {
    r.floats("gamma_per_subject", &plan.gammas)
        .list("area_per_subject", plan.initial_masks.iter().map(|m| m.area()))
        .put("movers", plan.movers.len());
    for (i, m) in plan.movers.iter().enumerate() {
        r.put(&format!("mover_{i}_token"), m.token)
            .float(&format!("mover_{i}_ratio"), m.ratio)
            .put(&format!("mover_{i}_dy"), m.shift.dy)
            .put(&format!("mover_{i}_dx"), m.shift.dx);
    }
    r.put("overlap_before", plan.overlap_before)
        .put("overlap_after", plan.overlap_after);
}

pub fn rearrange(c: &Common) -> Outcome {
    let ctx = load(c)?;
    let maps = attention(&ctx)?;
    let z = latent_for(&ctx, maps.side())?;
    let plan = plan_layout(&maps, &ctx.subjects, &ctx.manifest.gamma)?;
    let flags = &ctx.manifest.flags;
    let icfg = ctx.manifest.imputation_config();
    let mut r = Report::new("rearrange");
    header(&mut r, &ctx, maps.side(), maps.tokens());
    plan_report(&mut r, &plan);

    let migrated = if flags.enable_pixel_realloc {
        let moments = z.channel_moments();
        let (mut out, map) = migrate_latent(&z, &plan, &maps, &ctx.subjects, &icfg)?;
        if flags.enable_restart {
            restore_moments(&mut out, &moments);
        }
        r.put("imputation", mode_name(map.mode))
            .put("vacated_cells", map.vacated.area());
        out
    } else {
        r.put("imputation", "off").put("vacated_cells", 0);
        z
    };
    write_masks(c, "mask_initial", &plan.initial_masks)?;
    write_masks(c, "mask_final", &plan.final_masks)?;
    write(&c.out.join("latent_migrated.xamt"), &ExchangeTensor::from_latent(&migrated))?;
    Ok(r)
}

fn mode_name(mode: layoutforge::ImputationMode) -> &'static str {
    match mode {
        layoutforge::ImputationMode::RandomNormal => "random-normal",
        layoutforge::ImputationMode::BackgroundCopy => "background-copy",
    }
}

pub fn loss3(c: &Common) -> Outcome {
    let ctx = load(c)?;
    let maps = attention(&ctx)?;
    let paths = ctx
        .manifest
        .inputs
        .masks
        .as_ref()
        .ok_or_else(|| Error::Manifest("inputs.masks is required".into()))?;
    let masks = paths
        .iter()
        .map(|p| ExchangeTensor::read_file(&ctx.manifest.resolve(p))?.to_mask())
        .collect::<Result<Vec<_>, Error>>()?;
    let masks = MaskSet::new(masks)?;
    let weights = ctx.manifest.flags.apply(&ctx.manifest.weights);
    let (loss, grad) = loss_phase3(&maps, &ctx.subjects, &masks, &weights)?;
    let mut r = Report::new("loss3");
    header(&mut r, &ctx, maps.side(), maps.tokens());
    r.float("loss_inside", loss.inside)
        .float("loss_fill", loss.fill)
        .float("loss_total", loss.total);
    if c.emit_grad {
        write_grad(c, "grad_loss3.xamt", grad)?;
        r.put("grad", "grad_loss3.xamt");
    }
    Ok(r)
}

pub fn guide(c: &Common) -> Outcome {
    let ctx = load(c)?;
    let m = &ctx.manifest;
    let toy = &m.toy;
    ctx.subjects.check_tokens(toy.tokens).map_err(|e| Error::Manifest(e.to_string()))?;
    let model = ToyAttentionModel::seeded(toy.tokens, toy.channels, toy.key_scale, m.seed)?;
    let z = if m.inputs.latent.is_some() {
        let z = latent_for(&ctx, toy.side)?;
        if z.channels() != toy.channels {
            return Err(Error::Dimension(format!(
                "latent has {} channels, toy model {}",
                z.channels(),
                toy.channels
            ))
            .into());
        }
        z
    } else {
        sample_latent(toy.channels, toy.side * LATENT_SCALE, m.seed.wrapping_add(LATENT_SEED_OFFSET))
    };
    let trace = run_guidance(&z, &model, &ctx.subjects, &m.guidance_config())?;

    let trace_path = c.out.join("trace.jsonl");
    fs::write(&trace_path, trace.to_jsonl()).map_err(|e| Error::Io {
        path: trace_path.display().to_string(),
        source: e,
    })?;
    write(&c.out.join("latent_final.xamt"), &ExchangeTensor::from_latent(&trace.final_latent))?;
    if let Some(masks) = trace.final_masks() {
        write_masks(c, "mask_final", masks)?;
    }

    let mut r = Report::new("guide");
    header(&mut r, &ctx, toy.side, toy.tokens);
    r.put("seed", m.seed)
        .put("steps", trace.records.len())
        .put("rearrange_step", m.schedule.rearrange_step());
    if let Some(plan) = &trace.plan {
        plan_report(&mut r, plan);
    }
    if let Some(l) = &trace.post_rearrange {
        r.float("loss3_post_rearrange", l.total);
    }
    if let Some(l) = &trace.final_follow {
        r.float("loss3_final", l.total);
    }
    r.put("trace", "trace.jsonl").put("latent", "latent_final.xamt");
    Ok(r)
}

pub fn gradcheck(c: &Common) -> Outcome {
    let ctx = load(c)?;
    let settings = ctx.manifest.gradcheck_settings();
    ctx.subjects
        .check_tokens(settings.tokens)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let report = run_gradcheck(&ctx.subjects, &ctx.manifest.weights, &settings)?;
    let mut r = Report::new("gradcheck");
    header(&mut r, &ctx, settings.side, settings.tokens);
    r.put("seed", settings.seed)
        .put("instances", report.instances)
        .put("rejected_instances", report.rejected)
        .put("skipped_probes", report.skipped_probes)
        .float("loss1_max_rel", report.loss1_max_rel)
        .float("loss3_max_rel", report.loss3_max_rel)
        .float("composite_max_rel", report.composite_max_rel)
        .put("pass", report.passed());
    if report.passed() {
        Ok(r)
    } else {
        Err(Failure::GradCheck(r.to_string()))
    }
}
