use crate::manifest::{manifest_path_for, sibling, RunManifest};
use crate::sampling::{load_network, SamplingArgs};
use anyhow::{bail, Context};
use clap::Args;
use coso::analysis::{load_corpus, measurement_power, rip_constant, save_symmetric};
use coso::channel::{ChannelConfig, MeasurementFile};
use coso::coso::{build_coso, build_unmasked, combine_init, CosoConfig, CosoOperator, Variant};
use coso::extraction::{
    self, export_dmd as to_patterns, merge_masked, verify_linearity, ExtractOptions, ExtractedSystem,
};
use coso::operator::LinearOperator;
use coso::pgd::{pgd_solve, PgdConfig, ProxKind, StepSize};
use coso::Image;
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

const LINEARITY_TRIALS: usize = 20;
const LINEARITY_TOL: f64 = 1e-10;
const VERIFY_PROBES: usize = 100;
const COMPARE_VARIANTS: [Variant; 3] = [
    Variant::BlockGaussian,
    Variant::GBranchScrambled,
    Variant::DctOnly,
];

fn build(cfg: &CosoConfig) -> anyhow::Result<CosoOperator> {
    let net = load_network(cfg)?;
    Ok(build_coso(cfg, net.as_ref())?)
}

fn config_seeds(m: &mut RunManifest, cfg: &CosoConfig) {
    m.config(cfg);
    m.seed("perm_seed", cfg.perm_seed);
    m.seed("gauss_seed", cfg.gauss_seed);
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Grayscale image (PGM/PNG; color is converted to luma).
    pub image: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Measurement file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sample(a: SampleArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("sample", argv);
    let img = Image::load(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let cfg = a.sampling.resolve(Some((img.height(), img.width())))?;
    config_seeds(&mut m, &cfg);
    let op = m.time("build", || build(&cfg))?;
    let y = m.time("sample", || op.apply(img.as_slice()))?;
    if y.is_empty() {
        log::warn!("the configured ratio yields an empty measurement");
    }
    let l = op.layout();
    MeasurementFile::new(&op, y)?.save(&a.out)?;
    println!(
        "{} measurements (m_D = {}, m_G = {} x {} blocks) -> {}",
        l.total(),
        l.m_d,
        l.m_g,
        l.num_blocks,
        a.out.display()
    );
    m.input(&a.image);
    m.output(&a.out);
    m.result("measurements", l.total());
    m.write(&manifest_path_for(&a.out))
}

fn parse_step(s: &str) -> Result<StepSize, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(StepSize::Auto);
    }
    s.parse::<f64>()
        .map(StepSize::Fixed)
        .map_err(|_| format!("expected 'auto' or a number, got '{s}'"))
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Measurement file written by `sample` or `channel`.
    pub measurement: PathBuf,
    /// Output image (8-bit); a `.f64` sidecar and `.trace.csv` go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional configuration to check against the measurement header.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Filtering network weights (full_coso measurements).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// PGD iterations K.
    #[arg(long, default_value_t = coso::pgd::DEFAULT_ITERATIONS)]
    pub iters: usize,
    /// Regularization weight λ.
    #[arg(long, default_value_t = coso::pgd::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Step size η: `auto` or a positive number.
    #[arg(long, default_value = "auto", value_parser = parse_step)]
    pub step: StepSize,
    /// Clamp iterates to [0, 1].
    #[arg(long)]
    pub clamp: bool,
    /// Relative objective change at which to stop early (0 = run all K).
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    /// Start from zero instead of the two-branch initialization.
    #[arg(long)]
    pub zero_init: bool,
    /// Ground-truth image for PSNR/SSIM.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

pub fn reconstruct(a: ReconstructArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("reconstruct", argv);
    let file = MeasurementFile::load(&a.measurement)
        .with_context(|| format!("loading {}", a.measurement.display()))?;
    let mut cfg = match &a.config {
        Some(path) => SamplingArgs {
            config: Some(path.clone()),
            ..Default::default()
        }
        .resolve(None)?,
        None => file.header.coso_config(),
    };
    if let Some(w) = &a.weights {
        cfg.weights_path = Some(w.clone());
    }
    config_seeds(&mut m, &cfg);
    let op = m.time("build", || build(&cfg))?;
    file.check_operator(&op)?;

    let (h, w) = (cfg.height, cfg.width);
    let init = if a.zero_init {
        Image::zeros(h, w)
    } else {
        combine_init(&op.branch_init(&file.payload)?)?
    };
    let pgd = PgdConfig {
        step: a.step,
        lambda: a.lambda,
        iterations: a.iters,
        prox: ProxKind::DctSoftThreshold,
        clamp: a.clamp,
        tolerance: a.tol,
        power_seed: 0,
    };
    let (x, trace) = m.time("pgd", || pgd_solve(&file.payload, &op, &init, &pgd))?;

    x.save(&a.out)?;
    let sidecar = sibling(&a.out, ".f64");
    let mut raw = Vec::with_capacity(8 * x.len());
    for v in x.as_slice() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&sidecar, raw)?;
    let trace_path = sibling(&a.out, ".trace.csv");
    let mut tf = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    trace.write_csv(&mut tf)?;
    tf.flush()?;

    println!(
        "{} iterations, step {:.6e}, final objective {:.6e} -> {}",
        trace.iterations(),
        trace.step,
        trace.objective.last().copied().unwrap_or(trace.initial_objective),
        a.out.display()
    );
    m.config(&json!({ "sampling": cfg, "pgd": pgd }));
    m.result("iterations", trace.iterations());
    m.result("step", trace.step);
    if let Some(tp) = &a.truth {
        let truth = Image::load(tp).with_context(|| format!("loading {}", tp.display()))?;
        if !truth.same_shape(&x) {
            bail!(
                "ground truth is {}x{}, reconstruction is {h}x{w}",
                truth.height(),
                truth.width()
            );
        }
        let scores = json!({
            "psnr_init": coso::analysis::psnr(&truth, &init)?,
            "ssim_init": coso::analysis::ssim(&truth, &init)?,
            "psnr": coso::analysis::psnr(&truth, &x)?,
            "ssim": coso::analysis::ssim(&truth, &x)?,
        });
        println!(
            "init: PSNR {:.3} dB, SSIM {:.4}",
            scores["psnr_init"].as_f64().unwrap_or(f64::INFINITY),
            scores["ssim_init"]
        );
        println!(
            "pgd:  PSNR {:.3} dB, SSIM {:.4}",
            scores["psnr"].as_f64().unwrap_or(f64::INFINITY),
            scores["ssim"]
        );
        m.input(tp);
        m.result("metrics", scores);
    }
    m.input(&a.measurement);
    m.output(&a.out);
    m.output(&sidecar);
    m.output(&trace_path);
    m.write(&manifest_path_for(&a.out))
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Matrix file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-row modulation patterns to this directory.
    #[arg(long)]
    pub dmd: Option<PathBuf>,
    /// Also write the matrix as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Probe the unmasked pipeline and merge with the row mask afterwards.
    #[arg(long)]
    pub premask: bool,
    /// Relative tolerance of the extraction check.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

pub fn extract(a: ExtractArgs, serial: bool, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("extract", argv);
    let cfg = a.sampling.resolve(None)?;
    config_seeds(&mut m, &cfg);
    let net = load_network(&cfg)?;
    let op = build_coso(&cfg, net.as_ref())?;
    let (h, w) = (cfg.height, cfg.width);
    let opts = ExtractOptions { parallel: !serial };

    let report = m.time("linearity", || {
        verify_linearity(&op, LINEARITY_TRIALS, 0, LINEARITY_TOL)
    })?;
    if !report.passed() {
        bail!(
            "linearity check failed: residual {:.3e} > {:.1e} over {} trials",
            report.max_residual,
            report.tolerance,
            report.trials
        );
    }
    let sys = m.time("extract", || -> anyhow::Result<ExtractedSystem> {
        if a.premask {
            let (full, mask) = build_unmasked(&cfg, net.as_ref())?;
            Ok(merge_masked(&extraction::extract(&full, h, w, opts)?, &mask)?)
        } else {
            let sys = extraction::extract(&op, h, w, opts)?;
            let keep = vec![true; sys.rows()];
            Ok(merge_masked(&sys, &keep)?)
        }
    })?;
    let err = m.time("verify", || sys.max_relative_error(&op, VERIFY_PROBES, 1))?;
    if err > a.tol {
        bail!(
            "extracted matrix deviates from the operator by {err:.3e} (tolerance {:.1e})",
            a.tol
        );
    }
    sys.save(&a.out)?;
    m.output(&a.out);
    println!(
        "{}x{} matrix, linearity residual {:.2e}, max relative error {:.2e} -> {}",
        sys.rows(),
        sys.cols(),
        report.max_residual,
        err,
        a.out.display()
    );
    if let Some(p) = &a.csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
        sys.write_csv(&mut f)?;
        f.flush()?;
        m.output(p);
    }
    if let Some(dir) = &a.dmd {
        for p in write_patterns(&sys, h, w, dir)? {
            m.output(&p);
        }
    }
    m.result("rows", sys.rows());
    m.result("linearity_residual", report.max_residual);
    m.result("max_relative_error", err);
    m.write(&manifest_path_for(&a.out))
}

fn write_patterns(sys: &ExtractedSystem, h: usize, w: usize, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let stack = to_patterns(sys, h, w)?;
    let mut outputs = Vec::with_capacity(stack.len() + 2);
    let stack_path = dir.join("patterns.csdp");
    stack.save(&stack_path)?;
    outputs.push(stack_path);
    let mut scales = Vec::with_capacity(stack.len());
    for (i, p) in stack.patterns().iter().enumerate() {
        let path = dir.join(format!("pattern_{i:05}.pgm"));
        scales.push(save_symmetric(p, &path)?);
        outputs.push(path);
    }
    let meta = dir.join("patterns.json");
    let doc = json!({
        "count": stack.len(),
        "height": h,
        "width": w,
        "normalization": "pixel = 255 * (v / scale + 1) / 2",
        "scales": scales,
        "bias": stack.bias(),
    });
    std::fs::write(&meta, serde_json::to_string_pretty(&doc)? + "\n")?;
    outputs.push(meta);
    println!("{} patterns -> {}", stack.len(), dir.display());
    Ok(outputs)
}

#[derive(Args, Debug)]
pub struct ExportDmdArgs {
    /// Matrix file written by `extract`.
    pub matrix: PathBuf,
    /// Pattern height (defaults to √N).
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_dmd(a: ExportDmdArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("export-dmd", argv);
    let sys = ExtractedSystem::load(&a.matrix).with_context(|| format!("loading {}", a.matrix.display()))?;
    let n = sys.cols();
    let (h, w) = match (a.height, a.width) {
        (Some(h), Some(w)) => (h, w),
        (Some(h), None) if h > 0 && n % h == 0 => (h, n / h),
        (None, Some(w)) if w > 0 && n % w == 0 => (n / w, w),
        (None, None) => {
            let s = (n as f64).sqrt().round() as usize;
            if s * s != n {
                bail!("N = {n} is not square; pass --height and --width");
            }
            (s, s)
        }
        _ => bail!("pattern size does not divide N = {n}"),
    };
    let sys = sys.with_shape(h, w)?;
    m.input(&a.matrix);
    for p in write_patterns(&sys, h, w, &a.out)? {
        m.output(&p);
    }
    m.write(&a.out.join("manifest.json"))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Directory of grayscale images; each is center-cropped to the operator size.
    pub corpus: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Output directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Compare block_gaussian, g_branch_scrambled and dct_only.
    #[arg(long)]
    pub compare: bool,
    /// Explicit comma-separated variant list.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<Variant>>,
    /// Comma-separated measurement rows whose receptive fields are exported.
    #[arg(long, value_delimiter = ',')]
    pub rows: Option<Vec<usize>>,
    /// Fail unless δ(g_branch_scrambled) < δ(block_gaussian).
    #[arg(long)]
    pub assert_trend: bool,
}

/// Configuration for `v` derived from the base: the total ratio is kept, and
/// the branch split only when both branches exist.
fn variant_config(base: &CosoConfig, v: Variant) -> anyhow::Result<CosoConfig> {
    let mut cfg = base.clone();
    if v != base.variant {
        let l = base.layout()?;
        cfg.variant = v;
        cfg.gamma = Some(l.gamma);
        if !(v.uses_d_branch()
            && v.uses_g_branch()
            && base.variant.uses_d_branch()
            && base.variant.uses_g_branch())
        {
            cfg.gamma_d = None;
            cfg.gamma_g = None;
        }
    }
    cfg.layout()?;
    Ok(cfg)
}

pub fn analyze(a: AnalyzeArgs, serial: bool, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("analyze", argv);
    let s = &a.sampling;
    let mut sampling = s.clone();
    if s.config.is_none() && s.height.is_none() && s.width.is_none() {
        sampling.height = Some(64);
        sampling.width = Some(64);
    }
    if s.config.is_none() && s.gamma.is_none() && s.gamma_d.is_none() && s.gamma_g.is_none() {
        sampling.gamma = Some(0.1);
    }
    let base = sampling.resolve(None)?;
    config_seeds(&mut m, &base);
    let (h, w) = (base.height, base.width);

    let mut variants = if a.compare {
        COMPARE_VARIANTS.to_vec()
    } else {
        a.variants.clone().unwrap_or_else(|| vec![base.variant])
    };
    if a.assert_trend {
        for v in [Variant::BlockGaussian, Variant::GBranchScrambled] {
            if !variants.contains(&v) {
                variants.push(v);
            }
        }
    }

    let corpus: Vec<Image> = m
        .time("load_corpus", || load_corpus(&a.corpus, h, w))?
        .into_iter()
        .map(|(p, img)| {
            m.input(&p);
            img
        })
        .collect();
    std::fs::create_dir_all(&a.out)?;

    let rip_path = a.out.join("rip.csv");
    let mut rip_csv = String::from("variant,table_row,gamma,measurements,delta,corpus_size,skipped\n");
    let mut report = serde_json::Map::new();
    let mut deltas = std::collections::BTreeMap::new();
    for v in &variants {
        let cfg = variant_config(&base, *v)?;
        let op = build(&cfg)?;
        let l = *op.layout();
        let rip = m.time(&format!("rip_{v}"), || rip_constant(&op, &corpus))?;
        let power = m.time(&format!("power_{v}"), || measurement_power(&op, &corpus))?;
        rip_csv.push_str(&format!(
            "{v},{},{},{},{:.12e},{},{}\n",
            v.table_row(),
            l.gamma,
            l.total(),
            rip.delta,
            rip.corpus_size,
            rip.skipped
        ));
        let power_path = a.out.join(format!("power_{v}.csv"));
        let mut pf = std::io::BufWriter::new(std::fs::File::create(&power_path)?);
        power.write_csv(&mut pf)?;
        pf.flush()?;
        m.output(&power_path);

        let mut erf_meta = Vec::new();
        if let Some(rows) = &a.rows {
            let sys = extraction::extract(&op, h, w, ExtractOptions { parallel: !serial })?;
            for &i in rows {
                let img = coso::analysis::erf_row(&sys, i, h, w)?;
                let path = a.out.join(format!("erf_{v}_row{i:05}.pgm"));
                let scale = save_symmetric(&img, &path)?;
                let (rs, cs) = coso::analysis::support_extent(&img, 0.0);
                erf_meta.push(
                    json!({ "row": i, "file": path, "scale": scale, "rows_spanned": rs, "cols_spanned": cs }),
                );
                m.output(&path);
            }
        }
        println!("{v:<20} M = {:<6} delta = {:.6}", l.total(), rip.delta);
        deltas.insert(v.name(), rip.delta);
        report.insert(
            v.name().to_string(),
            json!({ "config": cfg, "rip": rip, "power_csv": power_path, "erf": erf_meta }),
        );
    }
    std::fs::write(&rip_path, rip_csv)?;
    m.output(&rip_path);
    let report_path = a.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    m.output(&report_path);
    m.result("delta", &deltas);

    let mut trend_ok = true;
    if a.assert_trend {
        let scr = deltas[Variant::GBranchScrambled.name()];
        let blk = deltas[Variant::BlockGaussian.name()];
        trend_ok = scr < blk;
        m.result("trend_holds", trend_ok);
        println!(
            "trend delta(scrambled) < delta(block): {} ({scr:.6} vs {blk:.6})",
            if trend_ok { "holds" } else { "violated" }
        );
    }
    m.write(&a.out.join("manifest.json"))?;
    if !trend_ok {
        bail!("RIP trend violated on this corpus");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ChannelArgs {
    /// Measurement file to degrade.
    pub measurement: PathBuf,
    /// Noise level σ on the 0–255 scale.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Quantizer bits q (32 = full precision).
    #[arg(long, default_value_t = coso::channel::FULL_PRECISION_BITS)]
    pub qbits: u8,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn channel(a: ChannelArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("channel", argv);
    let file = MeasurementFile::load(&a.measurement)
        .with_context(|| format!("loading {}", a.measurement.display()))?;
    let cfg = ChannelConfig {
        sigma: a.sigma,
        qbits: a.qbits,
        seed: a.seed,
    };
    let out = m.time("channel", || file.degrade(&cfg))?;
    out.save(&a.out)?;
    println!(
        "sigma {} / q {} bits, range [{:.6e}, {:.6e}] -> {}",
        cfg.sigma,
        cfg.qbits,
        out.header.q_range.0,
        out.header.q_range.1,
        a.out.display()
    );
    m.config(&cfg);
    m.seed("noise_seed", cfg.seed);
    m.input(&a.measurement);
    m.output(&a.out);
    m.write(&manifest_path_for(&a.out))
}

#[derive(Args, Debug)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Channel width C.
    #[arg(long, default_value_t = coso::filter::DEFAULT_CHANNELS)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn init_weights(a: InitWeightsArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut m = RunManifest::new("init-weights", argv);
    let net = coso::filter::init_weights(a.channels, a.seed)?;
    net.save(&a.out)?;
    println!("C = {} network -> {}", a.channels, a.out.display());
    m.seed("weights_seed", a.seed);
    m.output(&a.out);
    m.write(&manifest_path_for(&a.out))
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Manifest written by a previous run.
    pub manifest: PathBuf,
}

pub fn replay(a: ReplayArgs) -> anyhow::Result<()> {
    use clap::Parser;
    let man = RunManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    std::env::set_current_dir(&man.cwd).with_context(|| format!("entering {}", man.cwd.display()))?;
    let argv = std::iter::once("coso".to_string()).chain(man.args.iter().cloned());
    let cli = crate::Cli::try_parse_from(argv)?;
    if matches!(cli.command, crate::Command::Replay(_)) {
        bail!("a manifest cannot replay another replay");
    }
    crate::run(cli, man.args.clone())
}
