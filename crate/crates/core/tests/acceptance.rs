//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Criteria 1-5, 7 and 8 are hard: any failure makes the binary exit nonzero.
//! Criterion 6 (locality trade-off) is reported, with its CSV and plot, but
//! does not fail the run.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ganlocal_core::editor::{
    edit, mean_locality, plan_pairs, query_sequential, sweep, EditParams, EditRequest, QueryVector, StyleSource,
    SweepRow,
};
use ganlocal_core::metrics::{frechet_distance, srgb_pixel_to_lab, GaussianStats};
use ganlocal_core::minigen::{build_generator, Generator, GeneratorConfig, DEFAULT_BASE_LAYER};
use ganlocal_core::ndio::{
    read_archive, read_array_file, resample_membership, standardize, write_archive, write_array_file, Array, NdioError,
};
use ganlocal_core::semantics::{
    channel_attribution, load_catalog, save_catalog, spherical_kmeans_rows, KMeansOptions, Provenance, SemanticCatalog,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f32>, f64) {
    let m: Vec<f32> = (0..16).map(|_| rng.random::<f32>()).collect();
    (m, rng.random_range(0.0..4.0))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances: Vec<_> = (0..1000).map(|_| random_instance(&mut rng)).collect();
    let start = Instant::now();
    let solved: Vec<Vec<f64>> = instances.iter().map(|(m, e)| query_sequential(m, *e, 0.1)).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for ((m, e), q) in instances.iter().zip(&solved) {
        let lp = common::lp_query(m, *e, 0.1);
        for (a, b) in q.iter().zip(&lp) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-9 && elapsed < 5.0,
        format!("1000 instances, max |q - q_lp| = {worst:.2e}, {elapsed:.3} s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut nesting_violations = 0;
    for _ in 0..1000 {
        let (m, _) = random_instance(&mut rng);
        let mut eps: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..4.0)).collect();
        eps.push(0.0);
        eps.sort_by(f64::total_cmp);
        let qs: Vec<QueryVector> = eps
            .iter()
            .map(|&e| QueryVector {
                layer_id: 0,
                q: query_sequential(&m, e, 0.1),
            })
            .collect();
        for (q, &e) in qs.iter().zip(&eps) {
            worst_excess = worst_excess.max(q.budget_used(&m) - e);
        }
        for i in 0..qs.len() {
            for j in i..qs.len() {
                let big = qs[j].support();
                if qs[i].support().iter().any(|c| !big.contains(c)) {
                    nesting_violations += 1;
                }
            }
        }
    }
    outcome(
        worst_excess <= 1e-9 && nesting_violations == 0,
        format!("max budget excess {worst_excess:.2e}, {nesting_violations} nesting violations"),
    )
}

struct Fixture {
    generator: Generator,
    catalog: SemanticCatalog,
    captures: BTreeMap<usize, ganlocal_core::ndio::ActivationTensor>,
    build_seconds: f64,
}

fn build_fixture() -> Fixture {
    let start = Instant::now();
    let generator = build_generator(GeneratorConfig::new(0));
    let layers: BTreeSet<usize> = (0..generator.num_layers()).collect();
    let seeds: Vec<u64> = (0..200).collect();
    let (_, captures) = generator.render_batch(&seeds, &layers);
    let catalog = SemanticCatalog::build(
        &captures,
        DEFAULT_BASE_LAYER,
        KMeansOptions::new(15, 0),
        Provenance {
            seed: 0,
            sample_count: 200,
            generator_seed: 0,
        },
    )
    .expect("catalog")
    .with_singleton_parts();
    Fixture {
        generator,
        catalog,
        captures,
        build_seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_3(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut dead = 0;
    let mut check = |m: &ganlocal_core::semantics::AttributionMatrix, dead_channels: &[usize]| {
        for c in 0..m.c {
            if dead_channels.contains(&c) {
                dead += 1;
                continue;
            }
            worst = worst.max((m.column_sum(c) - 1.0).abs());
        }
    };
    // stored attributions: hard at the base layer, resampled-soft elsewhere
    for (l, m) in &fx.catalog.attributions {
        let a = standardize(&fx.captures[l]);
        check(m, &a.dead_channels);
    }
    // soft memberships at the base layer too: down to 16x16 and back up
    let base = standardize(&fx.captures[&DEFAULT_BASE_LAYER]);
    let soft = resample_membership(&resample_membership(&fx.catalog.membership, 16, 16), 32, 32);
    let m = channel_attribution(&base, &soft).expect("attribution");
    check(&m, &base.dead_channels);
    let total = fx.build_seconds + start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && total < 60.0,
        format!(
            "{} layers, max |sum_k M - 1| = {worst:.2e}, {dead} dead channels skipped, {total:.1} s",
            fx.catalog.attributions.len()
        ),
    )
}

fn criterion_4(fx: &Fixture) -> Outcome {
    let mut identity_ok = 0;
    let mut transfer_ok = 0;
    let mut skipped = 0;
    let mut total = 0;
    for i in 0..10u64 {
        let part_id = fx.catalog.parts[i as usize % fx.catalog.parts.len()].id;
        let has_unit =
            (0..fx.generator.num_layers()).any(|l| fx.catalog.part_attribution(part_id, l).unwrap().contains(&1.0));
        let base = EditRequest {
            target: StyleSource::Seed(500 + i),
            reference: StyleSource::Seed(900 + i),
            part_id,
            params: EditParams::sequential(0.0),
            layers: None,
        };
        total += 1;
        if has_unit {
            skipped += 1;
        } else {
            let o = edit(&base, &fx.catalog, &fx.generator).expect("edit");
            identity_ok += (o.edited.image == o.target.image) as usize;
        }
        let full = EditRequest {
            params: EditParams::Global { lambda: 1.0 },
            ..base
        };
        let o = edit(&full, &fx.catalog, &fx.generator).expect("edit");
        transfer_ok += (o.edited.image == o.reference.image) as usize;
    }
    outcome(
        identity_ok + skipped == total && transfer_ok == total && skipped < total,
        format!(
            "epsilon=0 identical {identity_ok}/{} ({skipped} skipped for M=1 channels), q=1 identical {transfer_ok}/{total}",
            total - skipped
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut decreases = 0;
    for inst in 0..100u64 {
        let n = rng.random_range(30..300);
        let dim = rng.random_range(2..10);
        let k = rng.random_range(1..8);
        let rows: Vec<f32> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit = spherical_kmeans_rows(&rows, dim, KMeansOptions::new(k, inst)).expect("fit");
        decreases += fit
            .objective_trace
            .windows(2)
            .filter(|w| w[1] < w[0] - 1e-10 * w[0].abs())
            .count();
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        let label = i % 3;
        for d in 0..5 {
            let noise: f32 = StandardNormal.sample(&mut rng);
            rows.push(if d == label { 1.0 } else { 0.0 } + 0.05 * noise);
        }
        labels.push(label);
    }
    let fit = spherical_kmeans_rows(&rows, 5, KMeansOptions::new(3, 7)).expect("fit");
    let ari = common::adjusted_rand_index(&fit.assignments, &labels);

    let big: Vec<f32> = (0..12_000 * 6).map(|_| StandardNormal.sample(&mut rng)).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| spherical_kmeans_rows(&big, 6, KMeansOptions::new(8, 3)).expect("fit"))
    };
    let reference = run(1);
    let deterministic = [run(1), run(2), run(4)]
        .iter()
        .all(|r| r.assignments == reference.assignments && r.centroids == reference.centroids);

    outcome(
        decreases == 0 && ari == 1.0 && deterministic,
        format!("{decreases} objective decreases over 100 runs, ARI {ari}, deterministic across 1/2/4 threads: {deterministic}"),
    )
}

/// Bracket `target` on the simultaneous grid, then bisect λ until the mean
/// In-MSE lies within 5% of it.
fn match_lambda(
    fx: &Fixture,
    pairs: &[ganlocal_core::editor::EditPair],
    target: f64,
    grid: &[(f64, f64, f64)],
    evaluated: &mut Vec<SweepRow>,
) -> Option<(f64, f64, f64)> {
    let mut lo = 0.0;
    let mut hi = None;
    for &(lambda, mean_in, _) in grid {
        if mean_in < target {
            lo = lambda;
        } else {
            hi = Some(lambda);
            break;
        }
    }
    let mut hi = hi?;
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        let rows = sweep(
            &fx.catalog,
            &fx.generator,
            pairs,
            &[EditParams::Simultaneous { lambda: mid }],
        )
        .ok()?;
        let (mean_in, mean_out) = mean_locality(&rows)?;
        evaluated.extend(rows);
        if (mean_in - target).abs() <= 0.05 * target {
            return Some((mid, mean_in, mean_out));
        }
        if mean_in < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    None
}

fn criterion_6(fx: &Fixture, out_dir: &Path) -> Outcome {
    let pairs = plan_pairs(&fx.catalog, &fx.generator, 100, 10_000).expect("pairs");
    let epsilons = [0.5, 1.0, 2.0, 4.0];
    let lambdas = [0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 20.0];

    let mut settings: Vec<EditParams> = epsilons.iter().map(|&e| EditParams::sequential(e)).collect();
    settings.extend(lambdas.iter().map(|&l| EditParams::Simultaneous { lambda: l }));
    let mut rows = sweep(&fx.catalog, &fx.generator, &pairs, &settings).expect("sweep");
    let curve = |rows: &[SweepRow], n: usize| -> Vec<(f64, f64, f64)> {
        rows.chunks(n)
            .filter_map(|c| mean_locality(c).map(|(i, o)| (c[0].strength, i, o)))
            .collect()
    };
    let seq_curve = curve(&rows[..epsilons.len() * pairs.len()], pairs.len());
    let sim_curve = curve(&rows[epsilons.len() * pairs.len()..], pairs.len());

    let mut matched = Vec::new();
    let mut evaluated = Vec::new();
    for &(eps, seq_in, seq_out) in &seq_curve {
        match match_lambda(fx, &pairs, seq_in, &sim_curve, &mut evaluated) {
            Some((lambda, sim_in, sim_out)) => matched.push((eps, seq_in, seq_out, lambda, sim_in, sim_out)),
            None => matched.push((eps, seq_in, seq_out, f64::NAN, f64::NAN, f64::NAN)),
        }
    }
    rows.extend(evaluated);

    std::fs::create_dir_all(out_dir).expect("output dir");
    let mut csv = String::from("mode,epsilon_or_lambda,pair_id,part_id,in_mse,out_mse\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.mode,
            r.strength,
            r.pair_id,
            r.part_id,
            fmt(r.report.in_mse),
            fmt(r.report.out_mse)
        );
    }
    let csv_path = out_dir.join("locality_tradeoff.csv");
    std::fs::write(&csv_path, csv).expect("write csv");
    let mut sim_points: Vec<(f64, f64)> = sim_curve.iter().map(|&(_, i, o)| (i, o)).collect();
    sim_points.extend(matched.iter().filter(|m| m.4.is_finite()).map(|m| (m.4, m.5)));
    sim_points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let seq_points: Vec<(f64, f64)> = seq_curve.iter().map(|&(_, i, o)| (i, o)).collect();
    let svg_path = out_dir.join("locality_tradeoff.svg");
    std::fs::write(&svg_path, tradeoff_svg(&seq_points, &sim_points)).expect("write svg");

    let all_matched = matched.iter().all(|m| m.3.is_finite());
    let better = matched.iter().filter(|m| m.3.is_finite() && m.2 <= m.5).count();
    let summary: Vec<String> = matched
        .iter()
        .map(|m| {
            format!(
                "eps {} in {:.1} out {:.1} vs lambda {:.3} in {:.1} out {:.1}",
                m.0, m.1, m.2, m.3, m.4, m.5
            )
        })
        .collect();
    outcome(
        all_matched && better == matched.len(),
        format!(
            "{} pairs, sequential Out-MSE <= simultaneous at {better}/{} matched settings [{}]; wrote {} and {}",
            pairs.len(),
            matched.len(),
            summary.join("; "),
            csv_path.display(),
            svg_path.display()
        ),
    )
}

fn tradeoff_svg(seq: &[(f64, f64)], sim: &[(f64, f64)]) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let max_x = seq.iter().chain(sim).map(|p| p.0).fold(1.0, f64::max);
    let max_y = seq.iter().chain(sim).map(|p| p.1).fold(1.0, f64::max);
    let px = |x: f64| pad + x / max_x * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y / max_y * (h - 2.0 * pad);
    let line = |pts: &[(f64, f64)], color: &str| {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let dots: String = pts
            .iter()
            .map(|&(x, y)| {
                format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                    px(x),
                    py(y)
                )
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>{dots}",
            coords.join(" ")
        )
    };
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\
<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\
<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\
<text x=\"{cx}\" y=\"{tb}\" text-anchor=\"middle\" font-size=\"12\">mean In-MSE (max {max_x:.0})</text>\
<text x=\"14\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">mean Out-MSE (max {max_y:.0})</text>\
{seq_line}{sim_line}\
<text x=\"{lx}\" y=\"{ly1}\" font-size=\"12\" fill=\"#c0392b\">sequential</text>\
<text x=\"{lx}\" y=\"{ly2}\" font-size=\"12\" fill=\"#2c7fb8\">simultaneous</text></svg>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        tb = h - 12.0,
        cy = h / 2.0,
        seq_line = line(seq, "#c0392b"),
        sim_line = line(sim, "#2c7fb8"),
        lx = pad + 10.0,
        ly1 = pad + 4.0,
        ly2 = pad + 20.0,
    )
}

fn criterion_7() -> Outcome {
    let white = srgb_pixel_to_lab([1.0; 3]);
    let black = srgb_pixel_to_lab([0.0; 3]);
    let colors_ok = (white[0] - 100.0).abs() <= 0.01
        && white[1].abs() <= 0.01
        && white[2].abs() <= 0.01
        && black.iter().all(|v| v.abs() <= 0.01);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spd = |rng: &mut ChaCha8Rng| {
        let a = DMatrix::<f64>::from_fn(6, 6, |_, _| StandardNormal.sample(rng));
        &a * a.transpose() + DMatrix::identity(6, 6) * 0.1
    };
    let mu = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| StandardNormal.sample(rng)).collect() };
    let s1 = GaussianStats::new(mu(&mut rng), spd(&mut rng)).unwrap();
    let s2 = GaussianStats::new(mu(&mut rng), spd(&mut rng)).unwrap();
    let self_d = frechet_distance(&s1, &s1).unwrap();
    let ab = frechet_distance(&s1, &s2).unwrap();
    let ba = frechet_distance(&s2, &s1).unwrap();
    let shift_a = GaussianStats::new(vec![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
    let shift_b = GaussianStats {
        mu: DVector::from_vec(vec![3.0, 4.0]),
        cov: DMatrix::identity(2, 2),
    };
    let shift = frechet_distance(&shift_a, &shift_b).unwrap();
    let pass = colors_ok && self_d <= 1e-8 && (shift - 25.0).abs() <= 1e-6 && (ab - ba).abs() <= 1e-6;
    outcome(
        pass,
        format!(
            "white {white:.4?}, black {black:.4?}, d(s,s) {self_d:.1e}, shift {shift:.9}, |d(a,b)-d(b,a)| {:.1e}",
            (ab - ba).abs()
        ),
    )
}

fn criterion_8(fx: &Fixture, scratch: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut arrays = BTreeMap::new();
    let mut arrays_ok = true;
    for (i, shape) in [vec![], vec![7], vec![3, 5], vec![2, 3, 4], vec![2, 1, 3, 2]]
        .into_iter()
        .enumerate()
    {
        let len = shape.iter().product::<usize>();
        let data: Vec<f32> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = Array::new(shape, data).unwrap();
        let back = read_array_file(&write_array_file(&a)).unwrap();
        let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        arrays_ok &= back.shape() == a.shape() && bits(&back) == bits(&a);
        arrays.insert(format!("a{i}"), a);
    }
    let archive_ok = read_archive(&write_archive(&arrays)).unwrap() == arrays;
    let fortran_rejected = matches!(
        read_array_file(&common::fixture("fortran.npy")),
        Err(NdioError::UnsupportedLayout)
    );
    let dir = scratch.join("catalog");
    let _ = std::fs::remove_dir_all(&dir);
    let catalog = fx
        .catalog
        .set_label(0, "region-a")
        .and_then(|c| c.set_label(3, "region-b"))
        .expect("labels");
    save_catalog(&catalog, &dir).expect("save");
    let catalog_ok = load_catalog(&dir).map(|c| c == catalog).unwrap_or(false);
    outcome(
        arrays_ok && archive_ok && fortran_rejected && catalog_ok,
        format!(
            "array files {arrays_ok}, archive {archive_ok}, column-major rejected {fortran_rejected}, catalog field-equal {catalog_ok}"
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");

    let mut hard_failures = 0;
    let mut report = |n: usize, soft: bool, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let kind = if soft { " (soft)" } else { "" };
        println!("criterion {n}{kind}: {status}: {}", o.detail);
        if !o.pass && !soft {
            hard_failures += 1;
        }
    };

    report(1, false, criterion_1());
    report(2, false, criterion_2());
    let fx = build_fixture();
    report(3, false, criterion_3(&fx));
    report(4, false, criterion_4(&fx));
    report(5, false, criterion_5());
    report(6, true, criterion_6(&fx, &out_dir));
    report(7, false, criterion_7());
    report(8, false, criterion_8(&fx, &out_dir));

    if hard_failures > 0 {
        println!("acceptance: {hard_failures} hard criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    }
}
