//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use anyhow::{ensure, Result};
use coso::analysis::{load_corpus, measurement_power, psnr, rip_constant, support_extent};
use coso::channel::quantize;
use coso::coso::{build_coso, combine_init, CosoConfig, CosoOperator, Variant};
use coso::extraction::{extract, ExtractOptions};
use coso::filter::{
    filter_forward, init_weights, merge_kernels, FilterNet, FilterOperator, ModulationHead, RatioPair,
};
use coso::operator::{adjoint_probe, linearity_probe, DenseMatrix, LinearOperator, PermutationOp};
use coso::pgd::{pgd_solve, PgdConfig, StepSize};
use coso::rng::SeededRng;
use coso::transforms::{gaussian_matrix, random_permutation};
use coso::Image;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/natural64")
}

fn corpus(n: usize) -> Result<Vec<Image>> {
    let all = load_corpus(corpus_dir(), 64, 64)?;
    Ok(all.into_iter().take(n).map(|(_, img)| img).collect())
}

fn net(seed: u64) -> Result<FilterNet> {
    Ok(init_weights(coso::filter::DEFAULT_CHANNELS, seed)?)
}

fn operator(
    h: usize,
    w: usize,
    block: usize,
    gamma: f64,
    v: Variant,
    net: Option<&FilterNet>,
) -> Result<CosoOperator> {
    let cfg = CosoConfig::new(h, w, gamma, v).with_block(block);
    Ok(build_coso(&cfg, net)?)
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = SeededRng::new(seed);
    Image::from_fn(h, w, |_, _| rng.uniform())
}

fn extraction_fidelity() -> Result<(bool, String)> {
    let weights = net(11)?;
    let mut worst: f64 = 0.0;
    let mut slowest = (0.0f64, 0.0f64);
    for (h, b) in [(32, 16), (64, 32)] {
        for v in Variant::ALL {
            let op = operator(h, h, b, 0.25, v, v.uses_filter().then_some(&weights))?;
            let t = Instant::now();
            let serial = extract(&op, h, h, ExtractOptions { parallel: false })?;
            let ts = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let parallel = extract(&op, h, h, ExtractOptions { parallel: true })?;
            let tp = t.elapsed().as_secs_f64();
            ensure!(
                serial.phi() == parallel.phi(),
                "{v} {h}x{h}: serial and parallel matrices differ"
            );
            worst = worst.max(serial.max_relative_error(&op, 100, 5)?);
            slowest = (slowest.0.max(ts), slowest.1.max(tp));
        }
    }
    let pass = worst <= 1e-9 && slowest.0 <= 60.0 && slowest.1 <= 10.0;
    Ok((
        pass,
        format!(
            "max relative error {worst:.2e}, slowest extraction {:.2} s serial / {:.2} s parallel ({} threads)",
            slowest.0,
            slowest.1,
            rayon::current_num_threads()
        ),
    ))
}

fn adjoint_linearity() -> Result<(bool, String)> {
    let weights = net(12)?;
    let mut ops: Vec<Box<dyn LinearOperator>> = Vec::new();
    for (h, b) in [(32, 16), (64, 32)] {
        for v in Variant::ALL {
            ops.push(Box::new(operator(
                h,
                h,
                b,
                0.3,
                v,
                v.uses_filter().then_some(&weights),
            )?));
        }
        let mut shared = CosoConfig::new(h, h, 0.3, Variant::FullCoso).with_block(b);
        shared.shared_filter = true;
        ops.push(Box::new(build_coso(&shared, Some(&weights))?));
        ops.push(Box::new(FilterOperator::new(
            &weights,
            RatioPair::new(0.12, 0.18),
            h,
            h,
            false,
        )?));
        ops.push(Box::new(PermutationOp::new(random_permutation(h * h, 3))));
    }
    let g = gaussian_matrix(100, 256, 4, true)?;
    ops.push(Box::new(DenseMatrix::new(100, 256, g.as_slice().to_vec())?));
    let (mut adj, mut lin): (f64, f64) = (0.0, 0.0);
    let mut failed = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        let a = adjoint_probe(op.as_ref(), 50, 100 + i as u64, 1e-10);
        let l = linearity_probe(op.as_ref(), 20, 200 + i as u64, 1e-10);
        adj = adj.max(a.max_residual);
        lin = lin.max(l.max_residual);
        if !a.passed() || !l.passed() {
            failed.push(op.kind());
        }
    }
    Ok((
        failed.is_empty(),
        format!(
            "{} operators, worst adjoint {adj:.2e}, worst linearity {lin:.2e}{}",
            ops.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {failed:?}")
            }
        ),
    ))
}

fn rip_trend(images: &[Image]) -> Result<(bool, String)> {
    let t = Instant::now();
    let mut d = Vec::new();
    for v in [
        Variant::GBranchScrambled,
        Variant::BlockGaussian,
        Variant::DctOnly,
    ] {
        d.push(rip_constant(&operator(64, 64, 32, 0.1, v, None)?, images)?.delta);
    }
    let secs = t.elapsed().as_secs_f64();
    let (scr, blk, dct) = (d[0], d[1], d[2]);
    let pass = images.len() >= 20 && scr < blk && dct <= scr && dct <= blk && secs <= 30.0;
    Ok((
        pass,
        format!(
            "{} images: delta scrambled {scr:.6}, block {blk:.6}, dct {dct:.6} in {secs:.2} s",
            images.len()
        ),
    ))
}

fn power_trend(images: &[Image]) -> Result<(bool, String)> {
    let dct = measurement_power(&operator(64, 64, 32, 0.1, Variant::DctOnly, None)?, images)?;
    let gauss = measurement_power(&operator(64, 64, 32, 0.1, Variant::BlockGaussian, None)?, images)?;
    let p90 = ((dct.len() - 1) as f64 * 0.9).round() as usize;
    let dc = dct.values[0];
    let hi = dct.values[p90];
    let spread = gauss.std_dev(0..gauss.len());
    let range = dct.range(0..dct.len());
    let pass = dc > hi && spread < 0.5 * range;
    Ok((
        pass,
        format!("DC {dc:.3} vs row {p90} {hi:.3}; gaussian std {spread:.3} vs dct range {range:.3}"),
    ))
}

fn kernel_merge() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let margin = coso::filter::MERGED_SIZE / 2;
    for seed in 0..10u64 {
        let mut n = net(1000 + seed)?;
        let mut rng = SeededRng::new(seed);
        for head in n.heads_mut() {
            let c = head.channels();
            let w = (0..2 * c).map(|_| rng.normal()).collect();
            let b = (0..c).map(|_| 1.0 + 0.5 * rng.normal()).collect();
            *head = ModulationHead::new(w, b)?;
        }
        let img = random_image(40, 40, seed);
        for z in [
            RatioPair::new(0.04, 0.06),
            RatioPair::new(0.1, 0.2),
            RatioPair::new(0.5, 0.5),
        ] {
            let (xd, xg) = filter_forward(&n, &img, z)?;
            let (kd, kg) = merge_kernels(&n, z)?;
            for (seq, merged) in [(xd, kd.apply(&img)), (xg, kg.apply(&img))] {
                for r in margin..40 - margin {
                    for c in margin..40 - margin {
                        worst = worst.max((seq.get(r, c) - merged.get(r, c)).abs());
                    }
                }
            }
        }
    }
    Ok((
        worst <= 1e-9,
        format!("10 nets x 3 ratio pairs, max interior deviation {worst:.2e}"),
    ))
}

fn pgd_monotone() -> Result<(bool, String)> {
    let weights = net(13)?;
    let mut worst: f64 = f64::NEG_INFINITY;
    for v in Variant::ALL {
        let op = operator(32, 32, 16, 0.3, v, v.uses_filter().then_some(&weights))?;
        let auto = PgdConfig::default();
        let eta = auto.step_for(&op)?;
        for k in 0..5u64 {
            let x = random_image(32, 32, 10 * k + 1);
            let mut y = op.apply(x.as_slice())?;
            let mut rng = SeededRng::new(10 * k + 2);
            y.iter_mut().for_each(|v| *v += 0.01 * rng.normal());
            let init = random_image(32, 32, 10 * k + 3);
            let cfg = PgdConfig {
                step: StepSize::Fixed(eta),
                lambda: [0.0, 1e-3, 1e-2, 5e-2, 0.1][k as usize],
                iterations: 100,
                ..auto.clone()
            };
            let (_, trace) = pgd_solve(&y, &op, &init, &cfg)?;
            worst = worst.max(trace.max_increase());
        }
    }
    // complete basis: orthonormal DCT sampling at gamma = 1
    let op = operator(32, 32, 16, 1.0, Variant::DctOnly, None)?;
    let x = random_image(32, 32, 99);
    let y = op.apply(x.as_slice())?;
    let cfg = PgdConfig {
        lambda: 0.0,
        iterations: 5,
        ..PgdConfig::default()
    };
    let (xhat, _) = pgd_solve(&y, &op, &Image::zeros(32, 32), &cfg)?;
    let err = xhat
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok((
        worst <= 1e-12 && err <= 1e-8,
        format!(
            "worst objective increase {worst:.2e} (30 runs x 100 iterations); complete-basis error {err:.2e}"
        ),
    ))
}

fn reconstruct(op: &CosoOperator, y: &[f64], iters: usize) -> Result<(Image, Image)> {
    let init = combine_init(&op.branch_init(y)?)?;
    let cfg = PgdConfig {
        iterations: iters,
        ..PgdConfig::default()
    };
    let (x, _) = pgd_solve(y, op, &init, &cfg)?;
    Ok((init, x))
}

fn reconstruction_sanity(images: &[Image]) -> Result<(bool, String)> {
    let op = operator(64, 64, 32, 0.3, Variant::DualNoFilter, None)?;
    let mut gains = Vec::new();
    for x in images {
        let (init, out) = reconstruct(&op, &op.apply(x.as_slice())?, 100)?;
        gains.push(psnr(x, &out)? - psnr(x, &init)?);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((
        gains.len() == 10 && min >= 0.0 && mean > 0.5,
        format!(
            "{} images, mean gain {mean:.2} dB, smallest gain {min:.2} dB",
            gains.len()
        ),
    ))
}

fn channel_structure(images: &[Image]) -> Result<(bool, String)> {
    let op = operator(64, 64, 32, 0.3, Variant::DualNoFilter, None)?;
    let mut exact = true;
    let mut mean = [0.0; 3];
    for x in images {
        let y = op.apply(x.as_slice())?;
        let pass = quantize(&y, 32)?.values;
        exact &= pass.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits());
        for (i, q) in [32u8, 8, 1].into_iter().enumerate() {
            let yq = quantize(&y, q)?.values;
            mean[i] += psnr(x, &reconstruct(&op, &yq, 100)?.1)? / images.len() as f64;
        }
    }
    Ok((
        exact && mean[0] >= mean[1] && mean[1] >= mean[2],
        format!(
            "q=32 bit-exact: {exact}; mean PSNR q=32 {:.2}, q=8 {:.2}, q=1 {:.2} dB",
            mean[0], mean[1], mean[2]
        ),
    ))
}

fn erf_structure() -> Result<(bool, String)> {
    let (h, b) = (64, 32);
    let weights = net(14)?;
    let mut summary = Vec::new();
    let mut pass = true;

    let op = operator(h, h, b, 0.1, Variant::BlockGaussian, None)?;
    let sys = extract(&op, h, h, ExtractOptions::default())?;
    let mut confined = 0;
    for i in 0..sys.rows() {
        let mut blocks = std::collections::BTreeSet::new();
        for (p, &v) in sys.phi().row(i).iter().enumerate() {
            if v != 0.0 {
                blocks.insert(((p / h) / b, (p % h) / b));
            }
        }
        confined += (blocks.len() == 1) as usize;
    }
    pass &= confined == sys.rows();
    summary.push(format!(
        "block_gaussian {confined}/{} rows in one block",
        sys.rows()
    ));

    for v in [Variant::GBranchScrambled, Variant::FullCoso] {
        let op = operator(h, h, b, 0.1, v, v.uses_filter().then_some(&weights))?;
        let sys = extract(&op, h, h, ExtractOptions::default())?;
        let mut narrowest = h;
        for i in 0..sys.rows() {
            let img = coso::analysis::erf_row(&sys, i, h, h)?;
            let peak = img.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let (r, c) = support_extent(&img, 1e-12 * peak);
            narrowest = narrowest.min(r.min(c));
        }
        pass &= narrowest as f64 >= 0.9 * h as f64;
        summary.push(format!("{v} narrowest span {narrowest}/{h}"));
    }
    Ok((pass, summary.join("; ")))
}

fn run_pipeline(dir: &Path) -> Result<()> {
    let bin = env!("CARGO_BIN_EXE_coso");
    let camera = corpus_dir().join("camera_256.pgm");
    let corpus = corpus_dir();
    let steps: Vec<Vec<&str>> = vec![
        vec!["init-weights", "--out", "w.bin", "--seed", "3"],
        vec![
            "sample",
            camera.to_str().unwrap(),
            "--variant",
            "full_coso",
            "--weights",
            "w.bin",
            "--gamma",
            "0.2",
            "--out",
            "m.csmv",
        ],
        vec![
            "channel", "m.csmv", "--sigma", "1", "--qbits", "8", "--seed", "4", "--out", "q.csmv",
        ],
        vec![
            "reconstruct",
            "q.csmv",
            "--weights",
            "w.bin",
            "--iters",
            "10",
            "--out",
            "r.png",
        ],
        vec![
            "extract",
            "--height",
            "32",
            "--width",
            "32",
            "--block",
            "16",
            "--gamma",
            "0.3",
            "--variant",
            "full_coso",
            "--weights",
            "w.bin",
            "--out",
            "f.csmx",
            "--dmd",
            "pat",
        ],
        vec![
            "analyze",
            corpus.to_str().unwrap(),
            "--compare",
            "--rows",
            "0",
            "--out",
            "an",
        ],
    ];
    for args in steps {
        let out = Command::new(bin)
            .current_dir(dir)
            .arg("--serial")
            .args(&args)
            .output()?;
        ensure!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(())
}

fn files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            out.extend(files(&p)?);
        } else if !p.to_string_lossy().ends_with("manifest.json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<(bool, String)> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let fa = files(a.path())?;
    let fb = files(b.path())?;
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter()
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect()
    };
    ensure!(
        rel(a.path(), &fa) == rel(b.path(), &fb),
        "runs produced different file sets"
    );
    let mut differing = Vec::new();
    for (x, y) in fa.iter().zip(&fb) {
        if std::fs::read(x)? != std::fs::read(y)? {
            differing.push(x.strip_prefix(a.path())?.display().to_string());
        }
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} output files identical across two --serial runs", fa.len())
        } else {
            format!("differing: {differing:?}")
        },
    ))
}

type Check<'a> = Box<dyn Fn() -> Result<(bool, String)> + 'a>;

fn main() {
    let images = match corpus(usize::MAX) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot load corpus: {e:#}");
            std::process::exit(1);
        }
    };
    let ten: Vec<Image> = images.iter().take(10).cloned().collect();
    let criteria: Vec<(&str, Check)> = vec![
        ("extraction fidelity", Box::new(extraction_fidelity)),
        ("adjoint and linearity probes", Box::new(adjoint_linearity)),
        ("RIP trend", Box::new(|| rip_trend(&images))),
        ("measurement-power trend", Box::new(|| power_trend(&images))),
        ("kernel merge", Box::new(kernel_merge)),
        ("PGD monotonicity", Box::new(pgd_monotone)),
        ("reconstruction sanity", Box::new(|| reconstruction_sanity(&ten))),
        ("quantized channel", Box::new(|| channel_structure(&ten))),
        ("ERF structure", Box::new(erf_structure)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        failures += !pass as usize;
        println!(
            "criterion {:>2} {:<30} {}  {detail} [{:.1} s]",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
