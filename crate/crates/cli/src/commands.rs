use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use image::RgbImage;
use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde_json::{json, Value};

use stexpr::eval::{self, CvSettings};
use stexpr::filter::{filter_genes, filter_spots, fit_transform_targets, select_gene_panel};
use stexpr::fixture::{self, FixtureConfig};
use stexpr::ingest::{
    self, read_archive, write_archive, ArchiveMeta, GeneAxis, Manifest, SpotArchive, UnmappedPolicy,
};
use stexpr::model::gradcheck::{gradient_check, tiny_config};
use stexpr::model::{
    compound_scale, predict, train, Checkpoint, CheckpointConfig, LossConfig, ScalingConfig,
    TrainConfig, TrainingSet, TrunkConfig,
};
use stexpr::patches::{
    compute_channel_stats, extract_patches, reject_background, to_tensor, ChannelStats, PatchStore,
};
use stexpr::stain::{self, StainParams};
use stexpr::viz::{self, HeatmapSpec};
use stexpr::{Split, TargetTable};

use crate::io::{read_json, sha256_dir, sha256_file, sibling, write_bytes, write_json, Evaluation};
use crate::Command;
use crate::{
    CompareArgs, CvArgs, EvaluateArgs, ExtractArgs, FilterArgs, GradCheckArgs, IngestArgs,
    OptimArgs, RenderArgs, StainArgs, SynthArgs, TrainArgs, TrunkArgs,
};

pub fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::SynthFixture(_) => "synth-fixture",
        Command::Ingest(_) => "ingest",
        Command::StainNormalize(_) => "stain-normalize",
        Command::Filter(_) => "filter",
        Command::ExtractPatches(_) => "extract-patches",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::CrossValidate(_) => "cross-validate",
        Command::Render(_) => "render",
        Command::GradientCheck(_) => "gradient-check",
        Command::Compare(_) => "compare",
    }
}

pub fn run(c: Command, seed: u64) -> Result<Value> {
    match c {
        Command::SynthFixture(a) => synth_fixture(a, seed),
        Command::Ingest(a) => ingest(a),
        Command::StainNormalize(a) => stain_normalize(a, seed),
        Command::Filter(a) => filter(a),
        Command::ExtractPatches(a) => extract(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Evaluate(a) => evaluate(a),
        Command::CrossValidate(a) => cross_validate(a, seed),
        Command::Render(a) => render(a),
        Command::GradientCheck(a) => grad_check(a, seed),
        Command::Compare(a) => compare(a),
    }
}

fn synth_fixture(a: SynthArgs, seed: u64) -> Result<Value> {
    let cfg = FixtureConfig {
        spots: a.spots,
        main_genes: a.genes,
        aux_genes: a.aux_genes,
        patients: a.patients,
        sections_per_patient: a.sections,
        noise: a.noise,
        patch_size: a.patch_size,
        spacing: a.patch_size + a.patch_size / 8,
        seed,
        ..Default::default()
    };
    let fx = fixture::generate(&cfg)?;
    let manifest = fx.write(&a.out)?;
    Ok(json!({
        "manifest": manifest,
        "sections": fx.sections.len(),
        "spots": fx.sections.iter().map(|s| s.spots.len()).sum::<usize>(),
        "main_genes": fx.main_symbols,
        "aux_genes": fx.aux_symbols.len(),
        "outputs": { "manifest.json": sha256_file(&manifest)? },
    }))
}

fn ingest(a: IngestArgs) -> Result<Value> {
    let axis: GeneAxis = a.genes_as.parse()?;
    let policy = if a.keep_unmapped {
        UnmappedPolicy::Keep
    } else {
        UnmappedPolicy::Drop
    };
    let manifest = Manifest::load(&a.manifest)?;
    let asm = ingest::assemble(&manifest, axis, policy)?;
    let mut meta = ArchiveMeta::new();
    meta.insert("manifest_sha256".into(), sha256_file(&a.manifest)?);
    meta.insert("genes_as".into(), a.genes_as.clone());
    meta.insert("dropped_spots".into(), asm.dropped_spots.len().to_string());
    let archive = SpotArchive::from_dataset(&asm.dataset, meta);
    write_archive(&archive, &a.out)?;
    Ok(json!({
        "archive": a.out,
        "spots": asm.dataset.n_spots(),
        "genes": asm.dataset.n_genes(),
        "patients": asm.dataset.patients(),
        "dropped_spots": asm.dropped_spots,
        "inputs": { "manifest": sha256_file(&a.manifest)? },
        "outputs": { "archive": sha256_file(&a.out)? },
    }))
}

fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .to_rgb8())
}

fn stain_normalize(a: StainArgs, seed: u64) -> Result<Value> {
    let params = StainParams {
        od_threshold: a.beta,
        sparsity: a.lambda,
        seed,
        ..Default::default()
    };
    params.validate()?;
    let prepare = |img: RgbImage| {
        if a.no_luminosity {
            img
        } else {
            stain::standardize_luminosity(&img, 95.0)
        }
    };
    let target = prepare(load_png(&a.target)?);
    let target_profile =
        stain::estimate_stain_profile(&stain::rgb_to_od(&target, stain::DEFAULT_I0), &params)
            .context("estimating the target stain profile")?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("listing {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        bail!("no PNG images in {}", a.input.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let results: Vec<Result<(String, stain::StainProfile, String)>> = inputs
        .par_iter()
        .map(|p| {
            let name = p
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let img = prepare(load_png(p)?);
            let prof =
                stain::estimate_stain_profile(&stain::rgb_to_od(&img, stain::DEFAULT_I0), &params)
                    .with_context(|| format!("estimating the stain profile of {name}"))?;
            let out = stain::normalize_to_target(&img, &prof, &target_profile, &params)?;
            let dest = a.out.join(&name);
            viz::write_png(&out, &dest)?;
            Ok((name, prof, sha256_file(&dest)?))
        })
        .collect();
    let mut profiles = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for r in results {
        let (name, prof, hash) = r?;
        profiles.insert(name.clone(), prof);
        outputs.insert(name, hash);
    }
    write_json(
        &a.out.join("profiles.json"),
        &json!({ "target": target_profile, "sources": profiles, "params": params }),
    )?;
    Ok(json!({
        "target_profile": target_profile,
        "images": outputs.len(),
        "inputs": { "target": sha256_file(&a.target)?, "images": sha256_dir(&a.input)? },
        "outputs": outputs,
    }))
}

fn filter(a: FilterArgs) -> Result<Value> {
    let src = read_archive(&a.archive)?;
    let d = src.to_dataset()?;
    let (g0, s0) = (d.n_genes(), d.n_spots());
    let d = filter_spots(&filter_genes(&d)?, a.min_spot_counts)?;
    let train_rows: Vec<usize> = (0..d.n_spots())
        .filter(|&i| a.heldout.as_deref() != Some(d.spots[i].patient_id.as_str()))
        .collect();
    if let Some(h) = &a.heldout {
        if train_rows.len() == d.n_spots() {
            bail!(stexpr::Error::Argument(format!(
                "held-out patient `{h}` has no spots"
            )));
        }
    }
    let panel = select_gene_panel(&d, a.top_genes, &train_rows)?;
    let targets = fit_transform_targets(&d, &panel, &train_rows)?;
    let mut meta = src.meta.clone();
    meta.insert("source_sha256".into(), sha256_file(&a.archive)?);
    meta.insert("min_spot_counts".into(), a.min_spot_counts.to_string());
    meta.insert("top_genes".into(), a.top_genes.to_string());
    if let Some(h) = &a.heldout {
        meta.insert("heldout".into(), h.clone());
    }
    write_archive(&SpotArchive::from_dataset(&d, meta), &a.out)?;
    let panel_path = a.panel.unwrap_or_else(|| sibling(&a.out, "panel.json"));
    let targets_path = a.targets.unwrap_or_else(|| sibling(&a.out, "targets.json"));
    write_json(&panel_path, &panel)?;
    write_json(&targets_path, &targets)?;
    Ok(json!({
        "genes": { "before": g0, "after": d.n_genes() },
        "spots": { "before": s0, "after": d.n_spots() },
        "main_genes": panel.main_genes.len(),
        "aux_genes": panel.aux_genes.len(),
        "train_spots": train_rows.len(),
        "targets_fingerprint": targets.fingerprint(),
        "inputs": { "archive": sha256_file(&a.archive)? },
        "outputs": {
            "archive": sha256_file(&a.out)?,
            "panel": sha256_file(&panel_path)?,
            "targets": sha256_file(&targets_path)?,
        },
    }))
}

fn extract(a: ExtractArgs) -> Result<Value> {
    let cfg = stexpr::PatchConfig {
        m: a.size,
        n: a.size,
        white_channel_min: a.white_threshold,
        white_fraction_max: a.white_fraction,
    };
    cfg.validate()?;
    let d = read_archive(&a.archive)?.to_dataset()?;
    let mut sections: Vec<&str> = Vec::new();
    for s in &d.spots {
        if !sections.contains(&s.section_id.as_str()) {
            sections.push(&s.section_id);
        }
    }
    // Per section: kept patches, white count, out-of-bounds count, image hash.
    type SectionPatches = (Vec<stexpr::Patch>, usize, usize, String);
    let per_section: Vec<Result<SectionPatches>> = sections
        .par_iter()
        .map(|&sec| {
            let path = a.images.join(format!("{sec}.png"));
            let img = load_png(&path)?;
            let spots: Vec<_> = d
                .spots
                .iter()
                .filter(|s| s.section_id == sec)
                .cloned()
                .collect();
            let e = extract_patches(&img, &spots, &cfg);
            let (kept, rejected) = reject_background(e.patches, &cfg);
            Ok((
                kept,
                rejected.len(),
                e.out_of_bounds.len(),
                sha256_file(&path)?,
            ))
        })
        .collect();
    let (mut patches, mut white, mut oob) = (Vec::new(), 0, 0);
    let mut image_hashes = BTreeMap::new();
    for (sec, r) in sections.iter().zip(per_section) {
        let (kept, w, o, h) = r?;
        patches.extend(kept);
        white += w;
        oob += o;
        image_hashes.insert(sec.to_string(), h);
    }
    let store = PatchStore::from_patches(cfg, patches, white, oob);
    store.write(&a.out)?;
    Ok(json!({
        "spots": d.n_spots(),
        "accepted": store.len(),
        "white_rejected": white,
        "out_of_bounds": oob,
        "inputs": { "archive": sha256_file(&a.archive)?, "images": image_hashes },
        "outputs": { "store": sha256_dir(&a.out)? },
    }))
}

fn trunk_config(t: &TrunkArgs) -> Result<TrunkConfig> {
    let mut c = TrunkConfig::default_for(t.trunk);
    if let Some(phi) = t.phi {
        let (d, w, r) = compound_scale(&ScalingConfig {
            alpha: t.alpha,
            beta: t.beta_scale,
            gamma: t.gamma,
            phi,
            base: (c.depth, c.width, c.resolution),
        })?;
        c.depth = d;
        c.width = w;
        c.resolution = r;
    }
    c.depth = t.depth.unwrap_or(c.depth);
    c.width = t.width.unwrap_or(c.width);
    c.resolution = t.resolution.unwrap_or(c.resolution);
    c.residual = t.residual;
    c.validate()?;
    Ok(c)
}

fn loss_and_train(o: &OptimArgs, seed: u64) -> Result<(LossConfig, TrainConfig)> {
    let lc = LossConfig {
        lambda: o.lambda,
        head_loss: o.head_loss,
    };
    lc.validate()?;
    let tc = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch,
        lr: o.lr,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        seed,
        augment: !o.no_augment,
    };
    Ok((lc, tc))
}

/// Target rows of `split` that have a stored patch, paired with the patch
/// index, in target-table order.
fn rows_with_patches(
    targets: &TargetTable,
    store: &PatchStore,
    split: Split,
) -> Vec<(usize, usize)> {
    let pos: HashMap<(&str, &str), usize> = store
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.section_id.as_str(), e.spot_id.as_str()), i))
        .collect();
    targets
        .rows_in(split)
        .into_iter()
        .filter_map(|r| {
            pos.get(&(
                targets.section_ids[r].as_str(),
                targets.spot_ids[r].as_str(),
            ))
            .map(|&p| (r, p))
        })
        .collect()
}

fn tensors(store: &PatchStore, idx: &[usize], stats: &ChannelStats) -> Result<Vec<Array3<f64>>> {
    idx.par_iter()
        .map(|&i| Ok(to_tensor(&store.images[i], stats)?.values))
        .collect()
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<Value> {
    let cfg = trunk_config(&a.trunk)?;
    let (lc, tc) = loss_and_train(&a.optim, seed)?;
    let store = PatchStore::read(&a.patches)?;
    let targets: TargetTable = read_json(&a.targets)?;
    let pairs = rows_with_patches(&targets, &store, Split::Train);
    if pairs.is_empty() {
        bail!(stexpr::Error::EmptyDataset(
            "no training spots have a patch".into()
        ));
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let stats = compute_channel_stats(idx.iter().map(|&i| &store.images[i]))?;
    let set = TrainingSet {
        inputs: tensors(&store, &idx, &stats)?,
        keys: rows
            .iter()
            .map(|&r| format!("{}/{}", targets.section_ids[r], targets.spot_ids[r]))
            .collect(),
        main: targets.main.select(Axis(0), &rows),
        aux: targets.aux.select(Axis(0), &rows),
    };
    let (state, history) = train(&set, &cfg, &lc, &tc)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("patches".to_owned(), sha256_dir(&a.patches)?);
    inputs.insert("targets".to_owned(), sha256_file(&a.targets)?);
    let first = history.epochs.first().map(|l| l.total);
    let last = history.epochs.last().map(|l| l.total);
    let ckpt = Checkpoint {
        config: CheckpointConfig {
            format: String::new(),
            trunk: cfg,
            k_main: state.k_main,
            k_aux: state.k_aux,
            seed,
            loss: lc,
            train: tc,
            main_genes: targets.main_genes.clone(),
            aux_genes: targets.aux_genes.clone(),
            main_transform: targets.main_transform.clone(),
            aux_transform: targets.aux_transform.clone(),
            targets_fingerprint: targets.fingerprint(),
            channel_stats: stats,
            segments: Vec::new(),
            params_sha256: String::new(),
            inputs: inputs.clone(),
            history,
        },
        state,
    };
    ckpt.write(&a.out)?;
    Ok(json!({
        "checkpoint": a.out,
        "trunk": cfg,
        "parameters": ckpt.state.n_params(),
        "train_spots": rows.len(),
        "loss": { "first_epoch": first, "last_epoch": last },
        "inputs": inputs,
        "outputs": { "checkpoint": sha256_dir(&a.out)? },
    }))
}

fn evaluate(a: EvaluateArgs) -> Result<Value> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let store = PatchStore::read(&a.patches)?;
    let targets: TargetTable = read_json(&a.targets)?;
    if ckpt.config.targets_fingerprint != targets.fingerprint() {
        bail!(stexpr::Error::Contract(format!(
            "checkpoint was trained against targets {} but {} has {}",
            ckpt.config.targets_fingerprint,
            a.targets.display(),
            targets.fingerprint()
        )));
    }
    let pairs = rows_with_patches(&targets, &store, a.split);
    if pairs.is_empty() {
        bail!(stexpr::Error::EmptyDataset(format!(
            "no {} spots have a patch",
            a.split
        )));
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let inputs = tensors(&store, &idx, &ckpt.config.channel_stats)?;
    let (pred, aux) = predict(&ckpt.state, &inputs)?;
    let truth = targets.main.select(Axis(0), &rows);
    let sections: Vec<String> = rows
        .iter()
        .map(|&r| targets.section_ids[r].clone())
        .collect();
    let tag = a.tag.clone().unwrap_or_else(|| {
        a.ckpt
            .file_name()
            .map_or_else(|| "model".to_owned(), |n| n.to_string_lossy().into_owned())
    });
    let report =
        eval::per_gene_report(&pred, &truth, &targets.main_genes, &sections, a.split, &tag)?;
    let csv_path = a.out.with_extension("csv");
    write_bytes(&csv_path, eval::report_csv(&report)?.as_bytes())?;
    let out = Evaluation {
        split: a.split,
        checkpoint_sha256: sha256_dir(&a.ckpt)?,
        targets_fingerprint: targets.fingerprint(),
        spots: rows
            .iter()
            .map(|&r| (targets.section_ids[r].clone(), targets.spot_ids[r].clone()))
            .collect(),
        main_genes: targets.main_genes.clone(),
        predictions: pred,
        aux_genes: a.emit_aux.then(|| targets.aux_genes.clone()),
        aux_predictions: a.emit_aux.then_some(aux),
        report,
    };
    write_json(&a.out, &out)?;
    let r = &out.report;
    Ok(json!({
        "model": r.model_tag,
        "split": a.split,
        "spots": rows.len(),
        "a_mae": r.a_mae,
        "a_rmse": r.a_rmse,
        "counts": r.counts,
        "top": r.top(5).iter().map(|g| json!([g.gene, g.median_pcc])).collect::<Vec<_>>(),
        "inputs": {
            "checkpoint": out.checkpoint_sha256,
            "patches": sha256_dir(&a.patches)?,
            "targets": sha256_file(&a.targets)?,
        },
        "outputs": { "report": sha256_file(&a.out)?, "csv": sha256_file(&csv_path)? },
    }))
}

fn cross_validate(a: CvArgs, seed: u64) -> Result<Value> {
    let cfg = trunk_config(&a.trunk)?;
    let (lc, tc) = loss_and_train(&a.optim, seed)?;
    let d = read_archive(&a.archive)?.to_dataset()?;
    let store = PatchStore::read(&a.patches)?;
    let patches: Vec<Option<RgbImage>> = d
        .spots
        .iter()
        .map(|s| {
            store
                .position(&s.section_id, &s.spot_id)
                .map(|i| store.images[i].clone())
        })
        .collect();
    let plan = eval::plan_folds(&d.patients(), &a.heldout, a.k, seed)?;
    let tag = a.tag.clone().unwrap_or_else(|| cfg.variant.to_string());
    let settings = CvSettings {
        panel_size: a.top_genes,
        trunk: cfg,
        loss: lc,
        train: tc,
    };
    let (folds, summary) = eval::run_cross_validation(&d, &patches, &plan, &settings, &tag)?;
    write_json(&a.out.join("plan.json"), &plan)?;
    write_json(&a.out.join("folds.json"), &folds)?;
    write_bytes(
        &a.out.join("cv_summary.csv"),
        eval::summary_csv(std::slice::from_ref(&summary))?.as_bytes(),
    )?;
    if summary.completed_folds == 0 {
        bail!(
            "every fold failed: {:?}",
            folds
                .iter()
                .filter_map(|f| f.error.as_deref())
                .collect::<Vec<_>>()
        );
    }
    Ok(json!({
        "folds": plan.fold_sizes(),
        "summary": summary,
        "inputs": { "archive": sha256_file(&a.archive)?, "patches": sha256_dir(&a.patches)? },
        "outputs": { "dir": sha256_dir(&a.out)? },
    }))
}

fn render(a: RenderArgs) -> Result<Value> {
    let ev: Evaluation = read_json(&a.report)?;
    let (values, source) = if let Some(j) = ev.main_genes.iter().position(|g| *g == a.gene) {
        (ev.predictions.column(j).to_owned(), "main")
    } else if let Some(j) = ev
        .aux_genes
        .as_ref()
        .and_then(|gs| gs.iter().position(|g| *g == a.gene))
    {
        let aux = ev
            .aux_predictions
            .as_ref()
            .ok_or_else(|| anyhow!("report lists aux genes without predictions"))?;
        (aux.column(j).to_owned(), "aux")
    } else {
        bail!(stexpr::Error::Argument(format!(
            "gene `{}` is not in the report",
            a.gene
        )));
    };
    let section = match &a.section {
        Some(s) => s.clone(),
        None => a
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("cannot infer the section from {}", a.image.display()))?,
    };
    let archive = read_archive(&a.spots)?;
    let d = archive.to_dataset()?;
    let coords: HashMap<&str, (f64, f64)> = d
        .spots
        .iter()
        .filter(|s| s.section_id == section)
        .map(|s| (s.spot_id.as_str(), (s.pixel_x as f64, s.pixel_y as f64)))
        .collect();
    let mut vals = Vec::new();
    let mut pts = Vec::new();
    for (i, (sec, spot)) in ev.spots.iter().enumerate() {
        if *sec == section {
            let c = coords
                .get(spot.as_str())
                .ok_or_else(|| anyhow!("spot {sec}/{spot} is not in {}", a.spots.display()))?;
            vals.push(values[i]);
            pts.push(*c);
        }
    }
    if vals.is_empty() {
        bail!(stexpr::Error::Argument(format!(
            "the report has no spots from section `{section}`"
        )));
    }
    let tissue = load_png(&a.image)?;
    let mut spec = HeatmapSpec::new(&a.gene, vals, pts);
    if let Some(r) = a.radius {
        spec.radius = r;
    }
    let heat = viz::render_heatmap(&spec, tissue.width(), tissue.height())?;
    let over = viz::overlay(&heat, &tissue, a.alpha)?;
    viz::write_png(&over, &a.out)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("overlay".to_owned(), sha256_file(&a.out)?);
    if let Some(h) = &a.heatmap {
        viz::write_png(&heat.image, h)?;
        outputs.insert("heatmap".to_owned(), sha256_file(h)?);
    }
    Ok(json!({
        "gene": a.gene,
        "head": source,
        "section": section,
        "spots": spec.values.len(),
        "radius": spec.radius,
        "inputs": {
            "report": sha256_file(&a.report)?,
            "image": sha256_file(&a.image)?,
            "spots": sha256_file(&a.spots)?,
        },
        "outputs": outputs,
    }))
}

fn grad_check(a: GradCheckArgs, seed: u64) -> Result<Value> {
    let cfg = tiny_config(a.trunk, a.residual);
    let lc = LossConfig {
        lambda: a.lambda,
        head_loss: a.head_loss,
    };
    let r = gradient_check(&cfg, a.main_genes, a.aux_genes, &lc, seed)?;
    // Also fails on NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let failed = !(r.max_rel_error < a.tolerance);
    if failed {
        bail!(stexpr::Error::Validation(format!(
            "max relative error {:.3e} at {} exceeds {:.1e}",
            r.max_rel_error, r.worst_param, a.tolerance
        )));
    }
    Ok(serde_json::to_value(r)?)
}

fn compare(a: CompareArgs) -> Result<Value> {
    let load =
        |ps: &[PathBuf]| -> Result<Vec<Evaluation>> { ps.iter().map(|p| read_json(p)).collect() };
    let test = load(&a.reports)?;
    let reports: Vec<_> = test.iter().map(|e| e.report.clone()).collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut outputs = BTreeMap::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = a.out.join(&name);
        write_bytes(&p, body.as_bytes())?;
        outputs.insert(name, sha256_file(&p)?);
        Ok(())
    };
    put("comparison.csv".into(), viz::comparison_csv(&reports)?)?;
    put(
        "top_genes.csv".into(),
        eval::top_genes_table(&reports, a.top)?,
    )?;
    for r in &reports {
        put(
            format!("histogram_{}.csv", r.model_tag),
            viz::histogram_csv(&viz::histogram(r, a.bins)?)?,
        )?;
    }
    if !a.train_reports.is_empty() {
        let train = load(&a.train_reports)?;
        if train.len() != test.len() {
            bail!(stexpr::Error::Argument(format!(
                "{} train reports for {} test reports",
                train.len(),
                test.len()
            )));
        }
        let pairs: Vec<_> = train
            .iter()
            .zip(&test)
            .map(|(t, s)| (&t.report, &s.report))
            .collect();
        put("errors.csv".into(), eval::error_table(&pairs)?)?;
    }
    Ok(json!({
        "models": reports.iter().map(|r| json!({"model": r.model_tag, "counts": r.counts})).collect::<Vec<_>>(),
        "outputs": outputs,
    }))
}
