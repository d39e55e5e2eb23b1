use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use pda_core::classifier::{
    conformance_check, read_lsw, train_linear_softmax, write_lsw, ClassDistribution, Classifier,
    ConstantClassifier, ExternalClassifier, ExternalOptions, LinearSoftmax, TrainConfig,
};
use pda_core::dataset::{
    load_metadata, stratified_split, synth_planted_dataset, write_split_manifest, ClassCatalog,
    LabeledDataset, PlantedSpec, Quadrant, SplitSpec,
};
use pda_core::engine::{analyze, read_wem, write_wem, AnalysisReport, ExecOptions, WindowConfig};
use pda_core::heatmap::{render, write_render_sidecar, Background, Normalization, RenderSpec};
use pda_core::imaging::{read_image, write_image, Image, Rect};
use pda_core::patch_stats::{
    fit_patch_gaussian, read_pgs, write_pgs, DiscreteSampler, PatchGaussian, Sampler,
};

use crate::config::sibling;
use crate::{
    AnalyzeArgs, Cmd, EngineArgs, EvalArgs, FitStatsArgs, RenderArgs, ServeCheckArgs, SweepArgs,
    SynthArgs, TrainArgs,
};

pub fn run(cmd: Cmd, resolved: &str) -> Result<ExitCode> {
    match cmd {
        Cmd::FitStats(a) => fit_stats(a, resolved),
        Cmd::Analyze(a) => analyze_cmd(a, resolved),
        Cmd::Render(a) => render_cmd(a, resolved),
        Cmd::Synth(a) => synth(a, resolved),
        Cmd::TrainBaseline(a) => train(a, resolved),
        Cmd::EvalLocalization(a) => eval_localization(a),
        Cmd::Sweep(a) => sweep(a, resolved),
        Cmd::ServeCheck(a) => serve_check(a),
    }
    .map(|ok| if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_config(out: &Path, resolved: &str) -> Result<()> {
    let path = sibling(out, "config.txt");
    fs::write(&path, resolved).with_context(|| format!("writing {}", path.display()))
}

const IMAGE_EXTS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no images in {}", dir.display());
    Ok(files)
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths
        .iter()
        .map(|p| read_image(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

/// Rows of a CSV as header-name maps.
fn read_table(path: &Path) -> Result<Vec<HashMap<String, String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    reader
        .records()
        .map(|row| {
            let row = row?;
            Ok(headers.iter().map(str::to_owned).zip(row.iter().map(str::to_owned)).collect())
        })
        .collect()
}

fn default_catalog(k: usize) -> Result<ClassCatalog> {
    if k == 7 {
        Ok(ClassCatalog::isic())
    } else {
        Ok(ClassCatalog::numbered(k)?)
    }
}

fn catalog_for(k: usize, names: Option<&[String]>, sidecar: Option<&Path>) -> Result<ClassCatalog> {
    if let Some(names) = names {
        ensure!(names.len() == k, "--classes lists {} names, classifier has {k}", names.len());
        return Ok(ClassCatalog::new(names.iter().cloned())?);
    }
    if let Some(path) = sidecar.filter(|p| p.is_file()) {
        let text = fs::read_to_string(path)?;
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        ensure!(names.len() == k, "{} lists {} classes, weights have {k}", path.display(), names.len());
        return Ok(ClassCatalog::new(names)?);
    }
    default_catalog(k)
}

fn parse_reals(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect()
}

/// Builds a classifier from `constant:..`, `lsw:..` or `external:..`.
fn load_classifier(spec: &str, classes: Option<&[String]>, dims: (usize, usize, usize)) -> Result<Box<dyn Classifier>> {
    let (kind, rest) = spec
        .split_once(':')
        .with_context(|| format!("classifier spec {spec:?} needs a kind prefix"))?;
    Ok(match kind {
        "constant" => {
            let dist = ClassDistribution::new(parse_reals(rest)?)?;
            let catalog = catalog_for(dist.len(), classes, None)?;
            Box::new(ConstantClassifier::new(catalog, dist)?)
        }
        "lsw" => {
            let path = Path::new(rest);
            let weights = read_lsw(open(path)?).with_context(|| format!("reading {rest}"))?;
            let catalog = catalog_for(weights.classes, classes, Some(&sibling(path, "classes")))?;
            Box::new(LinearSoftmax::new(catalog, weights, dims)?)
        }
        "external" => {
            let catalog = classes.map(|n| ClassCatalog::new(n.iter().cloned())).transpose()?;
            Box::new(ExternalClassifier::open(rest, catalog.as_ref(), Some(dims), ExternalOptions::default())?)
        }
        other => bail!("unknown classifier kind {other:?}"),
    })
}

fn resolve_class(catalog: &ClassCatalog, class: &str) -> Result<usize> {
    if let Some(i) = catalog.index_of(class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < catalog.len() => Ok(i),
        _ => bail!("unknown class {class:?} (classes: {})", catalog.names().join(",")),
    }
}

/// Sampler from its spec; `stats` backs `gaussian` and the `mean` level.
fn build_sampler(spec: &str, stats: Option<PatchGaussian>, image: &Image) -> Result<Sampler> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    Ok(match kind {
        "gaussian" => Sampler::gaussian(stats.context("the gaussian sampler needs a patch model (--stats or --corpus)")?),
        "mean" => {
            let level = match &stats {
                Some(pg) => pg.mean().iter().sum::<f64>() / pg.mean().len() as f64,
                None => image.mean(),
            };
            Sampler::constant(level)?
        }
        "constant" => Sampler::constant(rest.parse().with_context(|| format!("bad level {rest:?}"))?)?,
        "discrete" | "exhaustive" => Sampler::Discrete {
            sampler: DiscreteSampler::uniform(parse_reals(rest)?)?,
            exhaustive: kind == "exhaustive",
        },
        other => bail!("unknown sampler {other:?}"),
    })
}

fn window_config(e: &EngineArgs, win: usize, k: usize) -> WindowConfig {
    WindowConfig {
        win_size: win,
        pad_size: e.pad,
        stride: e.stride,
        samples_per_roi: e.samples,
        laplace_n: e.laplace_n,
        laplace_k: k,
        seed: e.seed,
    }
}

fn exec_options(e: &EngineArgs) -> ExecOptions {
    ExecOptions {
        workers: e.workers,
        batch_size: e.batch_size,
    }
}

fn write_analysis(out: &Path, report: &AnalysisReport, catalog: &ClassCatalog) -> Result<()> {
    let mut w = create(out)?;
    write_wem(&mut w, &report.map)?;
    w.flush()?;
    let mut text = report.summary();
    text.push_str(&format!("class {}\n", catalog.name(report.map.class_index)));
    for (name, p) in catalog.names().iter().zip(report.original.probs()) {
        text.push_str(&format!("p[{name}] {p:.17}\n"));
    }
    fs::write(sibling(out, "report.txt"), text)?;
    Ok(())
}

fn fit_stats(a: FitStatsArgs, resolved: &str) -> Result<bool> {
    let mut files = image_files(&a.images)?;
    if let Some(manifest) = &a.manifest {
        let keep: Vec<String> = read_table(manifest)?
            .into_iter()
            .filter(|r| a.label.as_ref().is_none_or(|l| r.get("label") == Some(l)))
            .filter_map(|r| r.get("image_id").cloned())
            .collect();
        files.retain(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| keep.iter().any(|k| k == s))
        });
        ensure!(!files.is_empty(), "no images match the manifest filter");
    }
    let corpus = load_images(&files)?;
    let pg = fit_patch_gaussian(&corpus, a.patch_edge, a.max_patches, a.epsilon, a.seed)?;
    let mut w = create(&a.out)?;
    write_pgs(&mut w, &pg)?;
    w.flush()?;
    write_config(&a.out, resolved)?;
    eprintln!(
        "fitted {}-dim patch model from {} patches of {} images",
        pg.dim(),
        pg.sample_count(),
        corpus.len()
    );
    Ok(true)
}

fn analyze_cmd(a: AnalyzeArgs, resolved: &str) -> Result<bool> {
    let image = read_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let clf = load_classifier(&a.engine.classifier, a.engine.classes.as_deref(), image.dims())?;
    let target = resolve_class(clf.catalog(), &a.engine.class)?;
    let stats = a.stats.as_deref().map(|p| read_pgs(open(p)?).with_context(|| format!("reading {}", p.display()))).transpose()?;
    let sampler = build_sampler(&a.engine.sampler, stats, &image)?;
    let cfg = window_config(&a.engine, a.win, clf.catalog().len());
    let report = analyze(clf.as_ref(), &image, target, &cfg, &sampler, &exec_options(&a.engine))?;
    write_analysis(&a.out, &report, clf.catalog())?;
    write_config(&a.out, resolved)?;
    eprintln!(
        "{} windows, {} classifier calls, {:.2?}",
        report.rois.len(),
        report.classifier_calls,
        report.elapsed
    );
    Ok(true)
}

fn render_cmd(a: RenderArgs, resolved: &str) -> Result<bool> {
    let map = read_wem(open(&a.map)?).with_context(|| format!("reading {}", a.map.display()))?;
    let original = a.overlay.as_deref().map(read_image).transpose()?;
    let spec = RenderSpec {
        normalization: Normalization::parse(&a.normalize)?,
        alpha: a.alpha,
        background: if original.is_some() { Background::Original } else { Background::White },
    };
    let (img, norm) = render(&map, &spec, original.as_ref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_image(&a.out, &img)?;
    let mut side = create(&sibling(&a.out, "norm.txt"))?;
    write_render_sidecar(&mut side, &spec, &norm)?;
    side.flush()?;
    write_config(&a.out, resolved)?;
    Ok(true)
}

fn synth(a: SynthArgs, resolved: &str) -> Result<bool> {
    let quadrant = Quadrant::parse(&a.quadrant).with_context(|| format!("unknown quadrant {:?}", a.quadrant))?;
    let ds = synth_planted_dataset(&PlantedSpec {
        n_per_class: a.n,
        image_edge: a.edge,
        patch_edge: a.patch,
        quadrant,
        noise_level: a.noise,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out)?;
    let manifest = a.out.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["image_id", "label", "quadrant", "x", "y", "w", "h"])?;
    for r in ds.records() {
        write_image(&a.out.join(format!("{}.png", r.id)), &r.load()?)?;
        let label = ds.catalog().name(r.label);
        match r.ground_truth {
            Some(g) => w.write_record([
                r.id.as_str(),
                label,
                quadrant.code(),
                &g.x.to_string(),
                &g.y.to_string(),
                &g.w.to_string(),
                &g.h.to_string(),
            ])?,
            None => w.write_record([r.id.as_str(), label, "", "", "", "", ""])?,
        }
    }
    w.flush()?;
    write_config(&manifest, resolved)?;
    eprintln!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(true)
}

fn train(a: TrainArgs, resolved: &str) -> Result<bool> {
    let manifest = a.manifest.clone().unwrap_or_else(|| a.data.join("manifest.csv"));
    let catalog = match &a.classes {
        Some(names) => ClassCatalog::new(names.iter().cloned())?,
        None => {
            let mut names: Vec<String> = Vec::new();
            for row in read_table(&manifest)? {
                let label = row.get("label").context("manifest has no label column")?;
                if !names.contains(label) {
                    names.push(label.clone());
                }
            }
            ClassCatalog::new(names)?
        }
    };
    let bytes = fs::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let ds = load_metadata(&bytes, &a.data, &catalog)?;
    ensure!(a.split.len() == 3, "--split needs three fractions");
    let split = SplitSpec::new(a.split[0], a.split[1], a.split[2], a.seed)?;
    let (tr, va, te) = stratified_split(&ds, &split);
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        l2: a.l2,
        seed: a.seed,
        batch_size: a.batch_size,
    };
    let outcome = train_linear_softmax(&tr, &cfg)?;
    let dims = tr.records().first().context("empty training split")?.load()?.dims();
    let model = LinearSoftmax::new(catalog.clone(), outcome.weights.clone(), dims)?;

    let mut w = create(&a.out)?;
    write_lsw(&mut w, &outcome.weights)?;
    w.flush()?;
    fs::write(sibling(&a.out, "classes"), catalog.names().join("\n") + "\n")?;
    let loss: String = outcome.loss_history.iter().map(|l| format!("{l:.16e}\n")).collect();
    fs::write(sibling(&a.out, "loss.txt"), loss)?;
    let mut split_out = create(&sibling(&a.out, "split.csv"))?;
    write_split_manifest(&mut split_out, [&tr, &va, &te])?;
    split_out.flush()?;
    write_config(&a.out, resolved)?;

    for (name, part) in [("validation", &va), ("test", &te)] {
        if let Some(acc) = accuracy(&model, part)? {
            println!("{name}_accuracy {acc:.4} ({} images)", part.len());
        }
    }
    println!("final_loss {:.6}", outcome.loss_history.last().copied().unwrap_or(f64::NAN));
    Ok(true)
}

fn accuracy(model: &LinearSoftmax, ds: &LabeledDataset) -> Result<Option<f64>> {
    if ds.is_empty() {
        return Ok(None);
    }
    let mut correct = 0;
    for r in ds.records() {
        if model.classify(&r.load()?)?.argmax() == r.label {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / ds.len() as f64))
}

fn eval_localization(a: EvalArgs) -> Result<bool> {
    let mut scored = 0;
    let mut localized = 0;
    println!("image_id,positive_mass_fraction,localized");
    for row in read_table(&a.manifest)? {
        let field = |k: &str| row.get(k).map(String::as_str).unwrap_or("");
        let coords: Option<Vec<usize>> = ["x", "y", "w", "h"].iter().map(|k| field(k).parse().ok()).collect();
        let Some(c) = coords else { continue };
        let id = field("image_id");
        let path = a.maps.join(format!("{id}.wem"));
        if !path.is_file() {
            continue;
        }
        let map = read_wem(open(&path)?).with_context(|| format!("reading {}", path.display()))?;
        let region = match Quadrant::parse(field("quadrant")) {
            Some(q) => q.rect(map.width, map.height),
            None => Rect::new(c[0], c[1], c[2], c[3]),
        };
        let frac = map.positive_mass_fraction(region);
        let hit = frac > a.threshold;
        scored += 1;
        localized += usize::from(hit);
        println!("{id},{frac:.6},{hit}");
    }
    ensure!(scored > 0, "no maps in {} match manifest rows with regions", a.maps.display());
    println!("localized {localized}/{scored} (threshold {})", a.threshold);
    Ok(true)
}

fn sweep(a: SweepArgs, resolved: &str) -> Result<bool> {
    let image = read_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let clf = load_classifier(&a.engine.classifier, a.engine.classes.as_deref(), image.dims())?;
    let target = resolve_class(clf.catalog(), &a.engine.class)?;
    let corpus = a.corpus.as_deref().map(|d| load_images(&image_files(d)?)).transpose()?;
    fs::create_dir_all(&a.out_dir)?;
    for &win in &a.wins {
        let cfg = window_config(&a.engine, win, clf.catalog().len());
        let stats = match &corpus {
            Some(c) if a.engine.sampler.starts_with("gaussian") || a.engine.sampler == "mean" => {
                Some(fit_patch_gaussian(c, cfg.patch_edge(), a.max_patches, a.epsilon, a.seed_for(win))?)
            }
            _ => None,
        };
        let sampler = build_sampler(&a.engine.sampler, stats, &image)?;
        let report = analyze(clf.as_ref(), &image, target, &cfg, &sampler, &exec_options(&a.engine))
            .with_context(|| format!("window {win}"))?;
        let out = a.out_dir.join(format!("win{win:02}.wem"));
        write_analysis(&out, &report, clf.catalog())?;
        eprintln!("win {win}: {} windows, {:.2?}", report.rois.len(), report.elapsed);
    }
    fs::write(a.out_dir.join("sweep.config.txt"), resolved)?;
    Ok(true)
}

impl SweepArgs {
    fn seed_for(&self, win: usize) -> u64 {
        pda_core::rng::derive_seed(self.engine.seed, &format!("stats-win{win}"))
    }
}

fn serve_check(a: ServeCheckArgs) -> Result<bool> {
    let timeout = Duration::from_secs(a.timeout);
    let opts = ExternalOptions {
        handshake_timeout: timeout,
        request_timeout: timeout,
        shutdown_timeout: timeout,
    };
    let report = conformance_check(&a.command, a.rounds, a.seed, opts)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let ok = report.passed();
    println!("{}", if ok { "conformant" } else { "not conformant" });
    Ok(ok)
}
