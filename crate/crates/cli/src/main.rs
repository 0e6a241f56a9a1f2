use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use xres_core::alignment::{fit_quadratic, load_pairs, write_map};
use xres_core::analytics::{
    icc_from_ratings, inter_rater_srcc, label_shift_report, sos_fit_table, IccResult, InterRater, LabelShiftReport,
    SosFit,
};
use xres_core::dataset::{compute_mos, load_ratings, Catalog, MosTable, TierName, TierSet};
use xres_core::imaging::{crop_to_4_3, lanczos_resample, Raster};
use xres_core::sampler::{self, AttributeSpace};
use xres_core::store;
use xres_harness::data::write_synth;
use xres_harness::{
    compare_models, evaluate, load_examples, read_labels, run_crossres, synth_crossres, write_labels, CrossResConfig,
    EvalReport, Example, ModelKind,
};
use xres_model::{init_params, predict, train_two_stage, ColumnRole, ModelConfig, ModelParams, Real, TrainConfig};

#[derive(Parser)]
#[command(name = "xres", version, about = "Cross-resolution image quality study toolkit")]
struct Cli {
    /// Log filter, e.g. `info` or `xres_service=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stratified sample from a catalog.
    Sample(SampleArgs),
    /// Crop to 4:3 and write the resolution pyramid of every catalog image.
    Prepare(PrepareArgs),
    /// Reliability statistics and label-shift report from study ratings.
    Analyze(AnalyzeArgs),
    /// Fit a quadratic map from legacy scores to one tier.
    Remap(RemapArgs),
    /// Two-stage training; writes a checkpoint.
    Train(TrainArgs),
    /// Score one image at one tier.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a labelled set.
    Eval(EvalArgs),
    /// Rank evaluation reports by joint RMSE and SRCC.
    Compare(CompareArgs),
    /// Run the study server.
    Serve(ServeArgs),
    /// Write a synthetic cross-resolution dataset.
    Synth(SynthArgs),
    /// Two-column vs single-column experiment on synthetic data.
    Crossres(CrossresArgs),
}

fn parse_geometry(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s}"))?;
    Ok((w.parse().map_err(|e| format!("{w}: {e}"))?, h.parse().map_err(|e| format!("{h}: {e}"))?))
}

fn parse_tier(s: &str) -> Result<TierName, String> {
    s.parse()
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = 210)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_geometry, default_value = "2048x1536")]
    min_size: (u32, u32),
    /// Bins for the derived legacy-MOS and favorites attributes.
    #[arg(long, default_value_t = sampler::DEFAULT_BINS)]
    bins: usize,
    /// Restrict stratification to these attributes (default: all).
    #[arg(long, value_delimiter = ',')]
    attributes: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Directory the catalog `path` column is relative to (default: the
    /// catalog's directory).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Smallest tier; the others are x2 and x4.
    #[arg(long, value_parser = parse_geometry, default_value = "512x384")]
    tier_base: (u32, u32),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write plot-ready CSVs here.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_geometry, default_value = "512x384")]
    tier_base: (u32, u32),
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum co-rated images for an inter-rater pair.
    #[arg(long, default_value_t = 10)]
    min_common: usize,
}

#[derive(Args)]
struct RemapArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_parser = parse_tier)]
    tier: Option<TierName>,
    #[arg(long, default_value_t = 70)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// JSON training spec; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the training history as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Tier to score at; other geometries are cropped to 4:3 and resampled.
    #[arg(long, value_parser = parse_tier)]
    tier: TierName,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model name in the report (default: the checkpoint file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 2.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Overrides KONX_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Overrides KONX_BIND_ADDR.
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 750)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Image counts for train.csv, val.csv and test.csv, in image order.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
}

#[derive(Args)]
struct CrossresArgs {
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Contents of `train --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainSpec {
    /// `2c`, `1c-low` or `1c-high`.
    model: String,
    stages: Vec<usize>,
    base: (u32, u32),
    bottleneck: usize,
    head: Vec<usize>,
    init_seed: u64,
    train: TrainConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            model: "2c".into(),
            stages: xres_model::params::DEFAULT_STAGES.to_vec(),
            base: (64, 48),
            bottleneck: xres_model::params::DEFAULT_BOTTLENECK,
            head: xres_model::params::DEFAULT_HEAD.to_vec(),
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl TrainSpec {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut c = match self.model.as_str() {
            "2c" => ModelConfig::two_column(&self.stages, self.base),
            "1c-low" => ModelConfig::single_column(ColumnRole::Low, &self.stages, self.base),
            "1c-high" => ModelConfig::single_column(ColumnRole::High, &self.stages, self.base),
            other => bail!("unknown model `{other}` (expected 2c, 1c-low or 1c-high)"),
        };
        c.bottleneck = self.bottleneck;
        c.head = self.head.clone();
        c.validate()?;
        Ok(c)
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            serde_json::from_reader(f).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn examples<T: Real>(labels: &Path, tiers: &TierSet) -> Result<Vec<Example<T>>> {
    let rows = read_labels(labels).with_context(|| format!("reading {}", labels.display()))?;
    Ok(load_examples(&rows, &parent_of(labels), tiers)?)
}

fn sample(a: SampleArgs) -> Result<()> {
    let catalog = Catalog::load(&a.catalog).with_context(|| format!("reading {}", a.catalog.display()))?;
    let pool: Vec<_> = catalog
        .records
        .iter()
        .filter(|r| sampler::admissible(r, a.min_size.0, a.min_size.1))
        .cloned()
        .collect();
    tracing::info!(catalog = catalog.len(), admissible = pool.len(), "pool");
    let derived = sampler::with_derived_attributes(&pool, a.bins)?;
    let space = match &a.attributes {
        Some(names) => AttributeSpace::from_pool(&derived, names),
        None => AttributeSpace::infer(&derived),
    };
    let ids = sampler::stratified_sample(&derived, &space, a.n, a.seed)?;
    let chosen = ids
        .iter()
        .map(|id| catalog.get(id).cloned().expect("sampled from the catalog"))
        .collect();
    catalog.with_records(chosen)?.store(&a.out)?;
    println!("sampled {} of {} admissible images -> {}", ids.len(), pool.len(), a.out.display());
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let catalog = Catalog::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let tiers = TierSet::from_base(a.tier_base.0, a.tier_base.1)?;
    let base = a.base.unwrap_or_else(|| parent_of(&a.input));
    let entries = store::prepare_catalog(&catalog, &base, &a.out_dir, &tiers)?;
    println!("wrote {} tier images -> {}", entries.len(), a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TierStats {
    tier: TierName,
    sos: Option<SosFit<f64>>,
    icc: Option<IccResult<f64>>,
    inter_rater: Option<InterRater>,
}

#[derive(Serialize)]
struct AnalysisReport {
    ratings: usize,
    participants: usize,
    sos_all: Option<SosFit<f64>>,
    tiers: Vec<TierStats>,
    label_shift: Option<LabelShiftReport>,
    mos: MosTable,
}

fn ok_or_warn<T, E: std::fmt::Display>(what: &str, r: std::result::Result<T, E>) -> Option<T> {
    r.map_err(|e| tracing::warn!("{what}: {e}")).ok()
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let tiers = TierSet::from_base(a.tier_base.0, a.tier_base.1)?;
    let ratings = load_ratings(&a.ratings, &tiers).with_context(|| format!("reading {}", a.ratings.display()))?;
    let mos = compute_mos(&ratings)?;
    let participants: std::collections::BTreeSet<&str> = ratings.iter().map(|r| r.participant_id.as_str()).collect();
    let tier_stats = mos
        .tiers()
        .into_iter()
        .map(|t| TierStats {
            tier: t,
            sos: ok_or_warn(&format!("SOS {t}"), sos_fit_table(&mos, Some(t), a.bootstrap, a.seed)),
            icc: ok_or_warn(&format!("ICC {t}"), icc_from_ratings(&ratings, t)),
            inter_rater: ok_or_warn(&format!("inter-rater {t}"), inter_rater_srcc(&ratings, t, a.min_common)),
        })
        .collect();
    let report = AnalysisReport {
        ratings: ratings.len(),
        participants: participants.len(),
        sos_all: ok_or_warn("SOS", sos_fit_table(&mos, None, a.bootstrap, a.seed)),
        tiers: tier_stats,
        label_shift: ok_or_warn("label shift", label_shift_report(&mos)),
        mos,
    };
    write_json(&a.out, &report)?;
    if let Some(dir) = &a.csv_dir {
        write_plot_csvs(dir, &report)?;
    }
    println!("{} ratings from {} participants -> {}", report.ratings, report.participants, a.out.display());
    Ok(())
}

fn write_plot_csvs(dir: &Path, r: &AnalysisReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("mos_variance.csv"))?;
    w.write_record(["image_id", "tier", "n", "mos", "var"])?;
    for row in &r.mos.rows {
        w.write_record([&row.image_id, row.tier.as_str(), &row.n.to_string(), &row.mos.to_string(), &row.var.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("inter_rater_srcc.csv"))?;
    w.write_record(["tier", "a", "b", "common", "srcc"])?;
    for t in &r.tiers {
        for p in t.inter_rater.iter().flat_map(|ir| &ir.pairs) {
            w.write_record([t.tier.as_str(), &p.a, &p.b, &p.common.to_string(), &p.srcc.to_string()])?;
        }
    }
    w.flush()?;
    if let Some(ls) = &r.label_shift {
        let mut w = csv::Writer::from_path(dir.join("tier_scatter.csv"))?;
        w.write_record(["a", "b", "image_id", "mos_a", "mos_b"])?;
        for p in &ls.pairs {
            for s in &p.scatter {
                w.write_record([p.a.as_str(), p.b.as_str(), &s.image_id, &s.mos_a.to_string(), &s.mos_b.to_string()])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("histograms.csv"))?;
        w.write_record(["tier", "edge", "count"])?;
        for h in &ls.histograms {
            for (e, c) in h.edges.iter().zip(&h.counts) {
                w.write_record([h.tier.as_str(), &e.to_string(), &c.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn remap(a: RemapArgs) -> Result<()> {
    let pairs = load_pairs(&a.pairs)?;
    let xy: Vec<(f64, f64)> = pairs.iter().map(|p| (p.legacy_mos, p.target_mos)).collect();
    let map = fit_quadratic(&xy, a.holdout, a.seed, a.tier)?;
    write_map(BufWriter::new(File::create(&a.out)?), &map)?;
    println!(
        "m(s) = {:.6} + {:.6} s + {:.8} s^2; holdout MAE gain {:.1}%, MSE gain {:.1}%",
        map.c0,
        map.c1,
        map.c2,
        100.0 * map.holdout_mae_gain,
        100.0 * map.holdout_mse_gain
    );
    Ok(())
}

fn train<T: Real>(a: &TrainArgs) -> Result<()> {
    let spec: TrainSpec = read_json(a.config.as_deref())?;
    let config = spec.model_config()?;
    let tiers = config.tiers()?;
    let train_set: Vec<_> = examples::<T>(&a.data, &tiers)?.iter().map(Example::train_item).collect();
    let val_set: Vec<_> = examples::<T>(&a.val, &tiers)?.iter().map(Example::train_item).collect();
    tracing::info!(train = train_set.len(), val = val_set.len(), params = xres_model::param_count(&config), "training");
    let p0 = init_params::<T>(&config, spec.init_seed)?;
    let (p, history) = train_two_stage(&p0, &train_set, &val_set, &spec.train)?;
    xres_model::save(&p, &a.out)?;
    if let Some(h) = &a.history {
        write_json(h, &history)?;
    }
    let last = history.stage2.as_ref().unwrap_or(&history.stage1);
    println!("best validation MSE {:.4} -> {}", last.best_val_mse, a.out.display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let p: ModelParams<f64> = xres_model::load(&a.model)?;
    let tiers = p.config.tiers()?;
    let (w, h) = tiers.get(a.tier).geometry();
    let img = Raster::<f64>::load(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = if img.geometry() == (w as usize, h as usize) {
        img
    } else {
        lanczos_resample(&crop_to_4_3(&img)?, w as usize, h as usize)?
    };
    println!("{:.4}", predict(&p, &img)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let p: ModelParams<f64> = xres_model::load(&a.model)?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let ex = examples::<f64>(&a.data, &p.config.tiers()?)?;
    let report = evaluate(&name, &p, &ex, a.parallel)?;
    report.store(&a.out)?;
    println!("{}: joint RMSE {:.4}, SRCC {:?}", report.model, report.joint.rmse, report.joint.srcc.value());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a.reports.iter().map(EvalReport::load).collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_models(&reports)?;
    cmp.write_csv(&a.out)?;
    for r in &cmp.rows {
        println!("{:>3} {:<20} RMSE {:8.4}  SRCC {:?}", r.rank_rmse, r.model, r.joint_rmse, r.joint_srcc);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = match (&a.data_dir, xres_service::ServeConfig::from_env()) {
        (_, Ok(c)) => c,
        (Some(dir), Err(_)) => xres_service::ServeConfig {
            data_dir: dir.clone(),
            bind: xres_service::DEFAULT_BIND_ADDR.parse()?,
        },
        (None, Err(e)) => return Err(e.into()),
    };
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(xres_service::serve(cfg))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let data = synth_crossres::<f64>(a.n, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let rows = write_synth(&data, &a.out_dir)?;
    write_labels(a.out_dir.join("labels.csv"), &rows)?;
    if let Some(split) = a.split {
        let ids: Vec<&str> = data.images.iter().map(|i| i.id.as_str()).collect();
        if split.len() != 3 {
            bail!("--split takes three counts, got {split:?}");
        }
        if split.iter().sum::<usize>() > ids.len() {
            bail!("split {split:?} needs more than {} images", ids.len());
        }
        let mut start = 0;
        for (name, n) in ["train.csv", "val.csv", "test.csv"].iter().zip(split) {
            let part: std::collections::HashSet<&str> = ids[start..start + n].iter().copied().collect();
            start += n;
            let sub: Vec<_> = rows.iter().filter(|r| part.contains(r.image_id.as_str())).cloned().collect();
            write_labels(a.out_dir.join(name), &sub)?;
        }
    }
    println!("{} images x {} tiers -> {}", data.images.len(), TierName::ALL.len(), a.out_dir.display());
    Ok(())
}

fn crossres(a: CrossresArgs) -> Result<()> {
    let cfg: CrossResConfig = read_json(a.config.as_deref())?;
    let data = synth_crossres::<f32>(cfg.n_train + cfg.n_test, a.data_seed)?;
    let ex = data.examples();
    drop(data);
    let mut runs = Vec::new();
    for &seed in &a.seeds {
        let run = run_crossres(&ex, &cfg, seed)?;
        let r = |k| run.rmse(k).unwrap_or(f64::NAN);
        println!(
            "seed {seed}: 2c {:.3}  1c-low {:.3}  1c-high {:.3}  ensemble {:.3}",
            r(ModelKind::TwoColumn),
            r(ModelKind::SingleLow),
            r(ModelKind::SingleHigh),
            r(ModelKind::Ensemble)
        );
        runs.push(run);
    }
    let wins = runs.iter().filter(|r| r.two_column_wins()).count();
    println!("two-column lowest joint RMSE in {wins} of {} seeds", runs.len());
    if let Some(out) = &a.out {
        write_json(out, &runs)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log)?)
        .with_writer(std::io::stderr)
        .init();
    match cli.cmd {
        Cmd::Sample(a) => sample(a),
        Cmd::Prepare(a) => prepare(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Remap(a) => remap(a),
        Cmd::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(&a),
            Precision::F64 => train::<f64>(&a),
        },
        Cmd::Predict(a) => predict_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Compare(a) => compare(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Crossres(a) => crossres(a),
    }
}
