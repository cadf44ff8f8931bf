//! Subcommand bodies. Each returns a JSON summary that `main` prints to stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ganlocal_core::editor::{
    edit, evaluate_locality, mean_locality, plan_pairs, sweep, EditMode, EditParams, EditRequest, QueryVector,
    StyleSource, SweepRow, DEFAULT_RHO_RATIO,
};
use ganlocal_core::metrics::{diff_map, frechet_between, PooledPixels};
use ganlocal_core::minigen::{build_generator, GeneratorConfig};
use ganlocal_core::ndio::{write_archive, write_array_file, Array};
use ganlocal_core::semantics::{save_catalog, KMeansOptions, Provenance, SemanticCatalog};
use ganlocal_core::RgbImage;
use serde::Serialize;
use serde_json::{json, Value};

use crate::project::{Project, ProjectConfig};
use crate::UsageError;

/// Render seeds `0..N`, cluster the base layer and attribute every layer.
pub fn build_catalog(cfg: &ProjectConfig, kmeans_seed: u64, singleton_parts: bool) -> Result<SemanticCatalog> {
    cfg.validate()?;
    let generator = build_generator(GeneratorConfig::new(cfg.generator_seed));
    let layers: BTreeSet<usize> = (0..generator.num_layers()).collect();
    let seeds: Vec<u64> = (0..cfg.sample_count as u64).collect();
    let (_, captures) = generator.render_batch(&seeds, &layers);
    let catalog = SemanticCatalog::build(
        &captures,
        cfg.base_layer_id,
        KMeansOptions::new(cfg.k, kmeans_seed),
        Provenance {
            seed: kmeans_seed,
            sample_count: cfg.sample_count,
            generator_seed: cfg.generator_seed,
        },
    )?;
    Ok(if singleton_parts {
        catalog.with_singleton_parts()
    } else {
        catalog
    })
}

pub fn cluster(cfg: &ProjectConfig, kmeans_seed: u64, singleton_parts: bool) -> Result<Value> {
    let catalog = build_catalog(cfg, kmeans_seed, singleton_parts)?;
    let digest = save_catalog(&catalog, &cfg.catalog_path)?;
    Ok(json!({
        "catalog": cfg.catalog_path,
        "k": catalog.k,
        "base_layer_id": catalog.base_layer_id,
        "parts": catalog.parts.len(),
        "manifest_sha256": digest,
    }))
}

pub struct GenArgs {
    pub count: usize,
    pub first_seed: u64,
    pub generator_seed: u64,
    pub layers: Vec<usize>,
    pub out: PathBuf,
}

/// Render samples; write PNGs, one style archive per seed, and stacked captures.
pub fn gen(args: &GenArgs) -> Result<Value> {
    let generator = build_generator(GeneratorConfig::new(args.generator_seed));
    if let Some(&bad) = args.layers.iter().find(|&&l| l >= generator.num_layers()) {
        bail!(UsageError(format!("layer {bad} out of range")));
    }
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.count as u64).collect();
    let layers: BTreeSet<usize> = args.layers.iter().copied().collect();
    let (images, captures) = generator.render_batch(&seeds, &layers);

    fs::create_dir_all(args.out.join("images"))?;
    fs::create_dir_all(args.out.join("styles"))?;
    for (seed, img) in seeds.iter().zip(&images) {
        fs::write(args.out.join("images").join(format!("{seed:06}.png")), img.to_png())?;
        let styles = generator.styles_for_seed(*seed);
        fs::write(
            args.out.join("styles").join(format!("{seed:06}.npz")),
            write_archive(&styles.to_arrays()),
        )?;
    }
    let arrays: BTreeMap<String, Array> = captures
        .into_iter()
        .map(|(l, a)| (format!("l{l}"), a.tensor.into()))
        .collect();
    fs::write(args.out.join("captures.npz"), write_archive(&arrays))?;
    Ok(json!({ "out": args.out, "seeds": seeds.len(), "captured_layers": args.layers }))
}

/// Export the attribution matrices as array files.
pub fn attribute(project: &Project, out: &Path) -> Result<Value> {
    let catalog = project.load_catalog()?;
    fs::create_dir_all(out)?;
    let mut layers = Vec::new();
    for (&l, m) in &catalog.attributions {
        fs::write(out.join(format!("clusters_l{l}.npy")), write_array_file(&m.to_array()))?;
        if !catalog.parts.is_empty() {
            let pm = catalog.part_attributions(l)?;
            fs::write(out.join(format!("parts_l{l}.npy")), write_array_file(&pm.to_array()))?;
        }
        let deviation = (0..m.c).map(|c| (m.column_sum(c) - 1.0).abs()).fold(0.0, f64::max);
        layers.push(json!({ "layer": l, "k": m.k, "channels": m.c, "max_column_sum_deviation": deviation }));
    }
    Ok(json!({ "out": out, "layers": layers }))
}

/// Per-layer digest of a query vector.
#[derive(Debug, Clone, Serialize)]
pub struct LayerQuerySummary {
    pub layer: usize,
    pub support_size: usize,
    pub q_sum: f64,
    pub q_max: f64,
    pub budget_used: f64,
}

pub fn q_summary(
    catalog: &SemanticCatalog,
    part_id: usize,
    queries: &BTreeMap<usize, QueryVector>,
) -> Result<Vec<LayerQuerySummary>> {
    queries
        .values()
        .map(|q| {
            let m = catalog.part_attribution(part_id, q.layer_id)?;
            Ok(LayerQuerySummary {
                layer: q.layer_id,
                support_size: q.support().len(),
                q_sum: q.q.iter().sum(),
                q_max: q.q.iter().copied().fold(0.0, f64::max),
                budget_used: q.budget_used(&m),
            })
        })
        .collect()
}

/// Assemble edit parameters from optional CLI or JSON fields.
pub fn edit_params(
    mode: EditMode,
    lambda: Option<f64>,
    epsilon: Option<f64>,
    rho_ratio: Option<f64>,
) -> std::result::Result<EditParams, (&'static str, String)> {
    let params = match mode {
        EditMode::Global | EditMode::Simultaneous => {
            let lambda = lambda.ok_or(("lambda", format!("required for mode {mode}")))?;
            if mode == EditMode::Global {
                EditParams::Global { lambda }
            } else {
                EditParams::Simultaneous { lambda }
            }
        }
        EditMode::Sequential => EditParams::Sequential {
            epsilon: epsilon.unwrap_or(ganlocal_core::editor::DEFAULT_EPSILON),
            rho_ratio: rho_ratio.unwrap_or(DEFAULT_RHO_RATIO),
        },
    };
    params.validate().map_err(|e| match e {
        ganlocal_core::editor::EditError::InvalidParams { field, message } => (field, message),
        other => ("params", other.to_string()),
    })?;
    Ok(params)
}

pub struct EditArgs {
    pub target_seed: u64,
    pub reference_seed: u64,
    pub part: String,
    pub params: EditParams,
    pub layers: Option<BTreeSet<usize>>,
    pub out: Option<PathBuf>,
}

pub fn edit_cmd(project: &Project, args: &EditArgs) -> Result<Value> {
    let (catalog, generator) = project.load()?;
    let part_id = catalog.find_part(&args.part)?.id;
    let request = EditRequest {
        target: StyleSource::Seed(args.target_seed),
        reference: StyleSource::Seed(args.reference_seed),
        part_id,
        params: args.params,
        layers: args.layers.clone(),
    };
    let outcome = edit(&request, &catalog, &generator)?;
    let (mask, locality) = evaluate_locality(&outcome, &catalog, part_id)?;
    let diff = diff_map(&outcome.target.image, &outcome.edited.image)?;
    let (diff_png, diff_max) = diff.to_png();

    let out = args.out.clone().unwrap_or_else(|| {
        project.root.join("edits").join(format!(
            "{}_{}_p{}_{}_{}",
            args.target_seed,
            args.reference_seed,
            part_id,
            args.params.mode(),
            args.params.strength()
        ))
    });
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("target.png"), outcome.target.image.to_png())?;
    fs::write(out.join("reference.png"), outcome.reference.image.to_png())?;
    fs::write(out.join("edited.png"), outcome.edited.image.to_png())?;
    fs::write(out.join("diff.png"), diff_png)?;
    fs::write(
        out.join("diff.json"),
        serde_json::to_vec_pretty(&json!({ "max": diff_max }))?,
    )?;
    let roi = RgbImage::new(
        mask.h,
        mask.w,
        [0, 1, 2]
            .iter()
            .flat_map(|_| mask.mask.iter().map(|&m| m as u8 as f32))
            .collect(),
    )?;
    fs::write(out.join("roi.png"), roi.to_png())?;

    let report = json!({
        "target_seed": args.target_seed,
        "reference_seed": args.reference_seed,
        "part_id": part_id,
        "mode": args.params.mode(),
        "strength": args.params.strength(),
        "in_mse": locality.in_mse,
        "out_mse": locality.out_mse,
        "roi_fraction": locality.roi_fraction,
        "diff_max": diff_max,
        "q_summary": q_summary(&catalog, part_id, &outcome.queries)?,
        "out": out,
    });
    fs::write(out.join("locality.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

pub struct SweepArgs {
    pub settings: Vec<EditParams>,
    pub pairs: usize,
    pub first_seed: u64,
    pub part: Option<String>,
    pub out: PathBuf,
}

/// Path of the query dump written next to a sweep CSV.
pub fn q_dump_path(csv: &Path) -> PathBuf {
    csv.with_extension("q.jsonl")
}

pub fn sweep_cmd(project: &Project, args: &SweepArgs) -> Result<Value> {
    let (catalog, generator) = project.load()?;
    let mut pairs = plan_pairs(&catalog, &generator, args.pairs, args.first_seed)?;
    if let Some(key) = &args.part {
        let id = catalog.find_part(key)?.id;
        pairs.iter_mut().for_each(|p| p.part_id = id);
    }
    let rows = sweep(&catalog, &generator, &pairs, &args.settings)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_sweep_csv(&args.out, &rows)?;
    let dump: String = rows
        .iter()
        .map(|r| {
            let layers: Vec<Value> = r
                .queries
                .values()
                .map(|q| json!({ "layer": q.layer_id, "q": q.q }))
                .collect();
            let line = json!({
                "mode": r.mode,
                "epsilon_or_lambda": r.strength,
                "pair_id": r.pair_id,
                "part_id": r.part_id,
                "layers": layers,
            });
            format!("{line}\n")
        })
        .collect();
    let dump_path = q_dump_path(&args.out);
    fs::write(&dump_path, dump)?;

    let summary: Vec<Value> = rows
        .chunks(pairs.len().max(1))
        .map(|chunk| {
            let means = mean_locality(chunk);
            json!({
                "mode": chunk[0].mode,
                "epsilon_or_lambda": chunk[0].strength,
                "mean_in_mse": means.map(|m| m.0),
                "mean_out_mse": means.map(|m| m.1),
            })
        })
        .collect();
    Ok(json!({ "csv": args.out, "q_dump": dump_path, "pairs": pairs.len(), "settings": summary }))
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "epsilon_or_lambda", "pair_id", "part_id", "in_mse", "out_mse"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.strength.to_string(),
            r.pair_id.to_string(),
            r.part_id.to_string(),
            cell(r.report.in_mse),
            cell(r.report.out_mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_png_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            RgbImage::from_png(&bytes).with_context(|| format!("decoding {}", p.display()))
        })
        .collect()
}

pub fn frechet(a: &Path, b: &Path, grid: usize) -> Result<Value> {
    if grid == 0 {
        bail!(UsageError("grid must be at least 1".into()));
    }
    let (ia, ib) = (read_png_dir(a)?, read_png_dir(b)?);
    let d = frechet_between(&ia, &ib, &PooledPixels { grid })?;
    Ok(json!({ "frechet": d, "a": ia.len(), "b": ib.len(), "feature_dim": 3 * grid * grid }))
}
