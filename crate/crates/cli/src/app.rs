use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use mmalign::config::KvConfig;
use mmalign::screening::{
    best_of_n_sweep, build_index, export_embeddings, project_2d, sha256_hex, write_projection_csv,
    write_screening_csv, EmbeddingTable, ScreeningResult, PAPER_EXPORT_SAMPLE,
};
use mmalign::synthdata::io::{read_dataset, read_dos_json, write_dataset};
use mmalign::synthdata::{
    generate_dataset, intersect_datasets, split_dataset, Dataset, DosCurve, GeneratorSpec, ModalitySet, SplitSpec,
};
use mmalign::trainer::{
    finetune, init_threads_from_env, pretrain_with, write_metrics_csv, Checkpoint, FinetuneConfig, TrainConfig,
};
use mmalign::evalkit::RetrievalReport;
use mmalign::{CrystalEncoder, CrystalEncoderConfig, Encoder};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<mmalign::Error> for CliError {
    fn from(e: mmalign::Error) -> Self {
        use mmalign::Error as E;
        let code = match e {
            E::Io(_) | E::Format(_) | E::Json(_) | E::Csv(_) => 3,
            E::NonFiniteLoss { .. } | E::NonFinite(_) | E::ZeroNorm | E::DegenerateColumn(_) => 4,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: 3, msg: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mmalign", version, about = "Multimodal material alignment: generate, pretrain, evaluate, screen")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic coupled-modality dataset.
    Gen(GenArgs),
    /// Contrastive pre-training; writes a checkpoint and metric log.
    Pretrain(PretrainArgs),
    /// Cross-modal top-k retrieval on a data split.
    Eval(EvalArgs),
    /// Nearest-neighbour screening of target DOS curves against a crystal library.
    Screen(ScreenArgs),
    /// Fine-tune the crystal encoder on a scalar property.
    Finetune(FinetuneArgs),
    /// Export crystal embeddings with property columns.
    Export(ExportArgs),
    /// Linear 2D projection of an exported embedding table.
    Project(ProjectArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Starting hyperparameters: desk, paper-pretrain or paper-retrieval.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Comma-separated k values.
    #[arg(long)]
    pub k: Option<String>,
    #[command(flatten)]
    pub splits: SplitArgs,
}

#[derive(Args, Debug)]
pub struct ScreenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset whose crystals form the candidate library.
    #[arg(long)]
    pub library: PathBuf,
    /// Split of the library dataset to index.
    #[arg(long)]
    pub library_split: Option<String>,
    /// Target DOS JSON file; repeatable.
    #[arg(long = "target-dos")]
    pub target_dos: Vec<PathBuf>,
    /// Dataset supplying target DOS curves.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub target_split: Option<String>,
    /// Comma-separated neighbour counts.
    #[arg(long)]
    pub n: Option<String>,
    /// Also write the index file here.
    #[arg(long)]
    pub save_index: Option<PathBuf>,
    #[command(flatten)]
    pub splits: SplitArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretrained checkpoint; omit with --from-scratch.
    #[arg(long, conflicts_with = "from_scratch")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub property: Option<String>,
    /// Comma-separated peak learning rates.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Use only the first N labeled records.
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch")]
    pub batch_size: Option<usize>,
    /// Embedding width of a from-scratch encoder.
    #[arg(long)]
    pub d: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of materials, `all`, or `paper`.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub table: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads_from_env()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Screen(a) => cmd_screen(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Export(a) => cmd_export(a),
        Command::Project(a) => cmd_project(a),
    }
}

/// Defaults, then the config file, then `--set`, then explicit flags.
/// Keys outside `defaults` are rejected.
fn resolve(common: &Common, defaults: Vec<(&str, String)>, flags: Vec<(&str, Option<String>)>) -> Result<KvConfig> {
    let mut cfg = KvConfig::new();
    for (k, v) in &defaults {
        cfg.set(k, v);
    }
    let known = |k: &str| defaults.iter().any(|(d, _)| *d == k);
    let mut user = KvConfig::new();
    if let Some(p) = &common.config {
        user.layer_text(&fs::read_to_string(p)?)?;
    }
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        user.set(k.trim(), v.trim());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            user.set(k, v);
        }
    }
    for (k, v) in user.iter() {
        if !known(k) {
            return Err(CliError::config(format!("unknown config key `{k}`")));
        }
        cfg.set(k, v);
    }
    Ok(cfg)
}

fn req<V: std::str::FromStr>(cfg: &KvConfig, key: &str) -> Result<V> {
    cfg.parsed(key)?
        .ok_or_else(|| CliError::config(format!("missing `{key}`")))
}

fn parse_list<V: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<V>> {
    let v: Vec<V> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| CliError::config(format!("cannot parse `{x}` in `{key}`")))
        })
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(CliError::config(format!("`{key}` is empty")));
    }
    Ok(v)
}

fn split_defaults() -> Vec<(&'static str, String)> {
    vec![
        ("split.val_frac", "0.1".into()),
        ("split.test_frac", "0.1".into()),
        ("split.seed", "0".into()),
    ]
}

fn split_flags(s: &SplitArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("split.val_frac", s.val_frac.map(|v| v.to_string())),
        ("split.test_frac", s.test_frac.map(|v| v.to_string())),
        ("split.seed", s.split_seed.map(|v| v.to_string())),
    ]
}

/// `train`, `val`, `test` under the configured split, or `all`.
fn select_split(data: &Dataset, cfg: &KvConfig, which: &str) -> Result<Dataset> {
    if which == "all" {
        return Ok(data.clone());
    }
    let val: f64 = req(cfg, "split.val_frac")?;
    let test: f64 = req(cfg, "split.test_frac")?;
    let spec = SplitSpec::new(1.0 - val - test, val, test, req(cfg, "split.seed")?)?;
    let (tr, va, te) = split_dataset(data, &spec)?;
    match which {
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        other => Err(CliError::config(format!("unknown split `{other}` (train, val, test, all)"))),
    }
}

struct Manifest<'a> {
    command: &'a str,
    common: &'a Common,
    seed: Option<u64>,
    cfg: &'a KvConfig,
}

impl Manifest<'_> {
    /// Creates the output directory and writes the manifest into it.
    fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.common.out)?;
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!(
            "config_path = {}\n",
            self.common.config.as_ref().map_or("none".into(), |p| p.display().to_string())
        ));
        s.push_str(&format!("output = {}\n", self.common.out.display()));
        s.push_str(&format!("seed = {}\n", self.seed.map_or("none".into(), |v| v.to_string())));
        s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("created_unix = {created}\n"));
        s.push_str("\n# resolved config\n");
        s.push_str(&self.cfg.to_text());
        fs::write(self.common.out.join(MANIFEST_FILE), s)?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut defaults = vec![("n", "2000".to_string()), ("seed", "0".to_string())];
    let spec_defaults = GeneratorSpec::default().to_kv();
    let spec_pairs = mmalign::config::parse_kv(&spec_defaults)?;
    let spec_keys: Vec<String> = spec_pairs.iter().map(|(k, _)| format!("spec.{k}")).collect();
    for ((_, v), k) in spec_pairs.iter().zip(&spec_keys) {
        defaults.push((k.as_str(), v.clone()));
    }
    let cfg = resolve(
        &a.common,
        defaults,
        vec![("n", a.n.map(|v| v.to_string())), ("seed", a.seed.map(|v| v.to_string()))],
    )?;
    let n: usize = req(&cfg, "n")?;
    let seed: u64 = req(&cfg, "seed")?;
    if n == 0 {
        return Err(CliError::config("n must be positive"));
    }
    let mut spec = GeneratorSpec::default();
    for (k, v) in cfg.iter() {
        if let Some(key) = k.strip_prefix("spec.") {
            spec.set(key, v)?;
        }
    }
    spec.validate()?;
    Manifest { command: "gen", common: &a.common, seed: Some(seed), cfg: &cfg }.write()?;
    let data = generate_dataset(n, seed, &spec)?;
    write_dataset(&a.common.out, &data)?;
    println!("wrote {} records to {}", data.len(), a.common.out.display());
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<(Checkpoint<f64>, String)> {
    let bytes = fs::read(path)?;
    Ok((Checkpoint::from_bytes(&bytes)?, sha256_hex(&bytes)))
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    // The preset may come from the config file, so resolve it first.
    let mut pre_defaults = vec![("preset", "desk".to_string())];
    pre_defaults.extend(TrainConfig::default().pairs());
    pre_defaults.extend(split_defaults());
    let probe = resolve(&a.common, pre_defaults.clone(), vec![("preset", a.preset.clone())])?;
    let preset: String = req(&probe, "preset")?;
    let base = TrainConfig::preset(&preset)?;
    let mut defaults = vec![("preset", preset.clone())];
    defaults.extend(base.pairs());
    defaults.extend(split_defaults());
    let mut flags = vec![
        ("preset", a.preset.clone()),
        ("loss", a.loss.clone()),
        ("d", a.d.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("warmup_epochs", a.warmup.map(|v| v.to_string())),
        ("peak_lr", a.lr.map(|v| v.to_string())),
        ("weight_decay", a.wd.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("lambda", a.lambda.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    flags.extend(split_flags(&a.split));
    let cfg = resolve(&a.common, defaults, flags)?;
    let mut tc = base;
    for (k, v) in cfg.iter() {
        if k != "preset" && !k.starts_with("split.") {
            tc.set(k, v)?;
        }
    }
    tc.validate()?;
    Manifest { command: "pretrain", common: &a.common, seed: Some(tc.seed), cfg: &cfg }.write()?;

    let data = read_dataset(&a.data)?;
    let usable = intersect_datasets(&data.records, ModalitySet::of(tc.loss.modalities()));
    let train = select_split(&usable, &cfg, "train")?;
    eprintln!(
        "pretraining {} on {} of {} records ({} epochs, batch {})",
        tc.loss,
        train.len(),
        data.len(),
        tc.epochs,
        tc.batch_size
    );
    let ckpt = pretrain_with::<f64>(&tc, &train, |m| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  lr {:.3e}  top1 {:.4}",
            m.epoch, m.loss, m.lr, m.top1_retrieval
        );
    })?;
    ckpt.save(&a.common.out.join("checkpoint.mmck"))?;
    let mut w = create(&a.common.out.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &ckpt.history)?;
    w.flush()?;
    match (ckpt.history.first(), ckpt.history.last()) {
        (Some(f), Some(l)) => println!("initial loss {:.6}\nfinal loss {:.6}", f.loss, l.loss),
        _ => println!("no epochs run"),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut defaults = vec![("split", "test".to_string()), ("k", "1,5,10".to_string())];
    defaults.extend(split_defaults());
    let mut flags = vec![("split", a.split.clone()), ("k", a.k.clone())];
    flags.extend(split_flags(&a.splits));
    let cfg = resolve(&a.common, defaults, flags)?;
    let ks: Vec<usize> = parse_list("k", &req::<String>(&cfg, "k")?)?;
    let which: String = req(&cfg, "split")?;
    Manifest { command: "eval", common: &a.common, seed: None, cfg: &cfg }.write()?;

    let (ckpt, _) = load_ckpt(&a.ckpt)?;
    let mods = ckpt.model.modalities();
    let data = read_dataset(&a.data)?;
    let usable = intersect_datasets(&data.records, ModalitySet::of(&mods));
    let split = select_split(&usable, &cfg, &which)?;
    let recs: Vec<_> = split.records.iter().collect();
    let batches = mods
        .iter()
        .map(|&m| Ok((m, ckpt.model.embed(m, &recs)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = batches.iter().map(|(m, b)| (*m, b)).collect();
    let report = RetrievalReport::build(&refs, &ks)?;
    let mut w = create(&a.common.out.join("retrieval.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    fs::write(a.common.out.join("retrieval_columns.txt"), report.to_columns())?;
    println!("gallery size {}", report.gallery_size);
    print!("{}", report.to_columns());
    Ok(())
}

fn cmd_screen(a: ScreenArgs) -> Result<()> {
    let mut defaults = vec![
        ("library_split", "train".to_string()),
        ("target_split", "test".to_string()),
        ("n", "1,5,10,50".to_string()),
    ];
    defaults.extend(split_defaults());
    let mut flags = vec![
        ("library_split", a.library_split.clone()),
        ("target_split", a.target_split.clone()),
        ("n", a.n.clone()),
    ];
    flags.extend(split_flags(&a.splits));
    let cfg = resolve(&a.common, defaults, flags)?;
    let ns: Vec<usize> = parse_list("n", &req::<String>(&cfg, "n")?)?;
    if a.target_dos.is_empty() && a.targets.is_none() {
        return Err(CliError::config("give --target-dos and/or --targets"));
    }
    Manifest { command: "screen", common: &a.common, seed: None, cfg: &cfg }.write()?;

    let (ckpt, hash) = load_ckpt(&a.ckpt)?;
    let dos_enc = ckpt
        .model
        .dos
        .as_ref()
        .ok_or_else(|| CliError::config("checkpoint has no DOS encoder"))?;
    let lib_all = read_dataset(&a.library)?;
    let lib_usable = intersect_datasets(
        &lib_all.records,
        ModalitySet::of(&[mmalign::synthdata::Modality::Crystal, mmalign::synthdata::Modality::Dos]),
    );
    let library = select_split(&lib_usable, &cfg, &req::<String>(&cfg, "library_split")?)?;
    let idx = build_index(&library, &ckpt.model.crystal, &hash)?;
    if let Some(p) = &a.save_index {
        idx.save(p)?;
    }

    let mut targets: Vec<(String, DosCurve)> = Vec::new();
    for p in &a.target_dos {
        let id = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        targets.push((id, read_dos_json(p)?));
    }
    if let Some(dir) = &a.targets {
        let t_all = read_dataset(dir)?;
        let t_usable = intersect_datasets(&t_all.records, ModalitySet::of(&[mmalign::synthdata::Modality::Dos]));
        let t = select_split(&t_usable, &cfg, &req::<String>(&cfg, "target_split")?)?;
        targets.extend(t.records.into_iter().map(|r| (r.id, r.dos.expect("filtered"))));
    }

    let lookup = |id: &str| library.get(id).and_then(|r| r.dos.as_ref());
    let mut rows: Vec<(usize, ScreeningResult)> = Vec::new();
    let mut sums = vec![0.0; ns.len()];
    for (id, dos) in &targets {
        let sweep = best_of_n_sweep(&idx, id, dos, lookup, dos_enc, &ns)?;
        for (s, (_, r)) in sums.iter_mut().zip(&sweep) {
            *s += r.best_mae;
        }
        rows.extend(sweep);
    }
    let mut w = create(&a.common.out.join("screening.csv"))?;
    write_screening_csv(&mut w, &rows)?;
    w.flush()?;
    let mut summary = String::from("n,mean_best_mae\n");
    for (n, s) in ns.iter().zip(&sums) {
        summary.push_str(&format!("{n},{}\n", s / targets.len() as f64));
    }
    fs::write(a.common.out.join("screening_summary.csv"), &summary)?;
    println!("{} targets against {} candidates", targets.len(), idx.len());
    print!("{summary}");
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let fd = FinetuneConfig::default();
    let defaults = vec![
        ("property", "gap".to_string()),
        ("sweep", fd.sweep.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        ("labeled", "all".to_string()),
        ("seed", fd.seed.to_string()),
        ("epochs", fd.epochs.to_string()),
        ("warmup_epochs", fd.warmup_epochs.to_string()),
        ("batch_size", fd.batch_size.to_string()),
        ("weight_decay", fd.weight_decay.to_string()),
        ("clip_norm", fd.clip_norm.to_string()),
        ("d", "32".to_string()),
    ];
    let flags = vec![
        ("property", a.property.clone()),
        ("sweep", a.sweep.clone()),
        ("labeled", a.labeled.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("d", a.d.map(|v| v.to_string())),
    ];
    let cfg = resolve(&a.common, defaults, flags)?;
    let ft = FinetuneConfig {
        sweep: parse_list("sweep", &req::<String>(&cfg, "sweep")?)?,
        batch_size: req(&cfg, "batch_size")?,
        epochs: req(&cfg, "epochs")?,
        warmup_epochs: req(&cfg, "warmup_epochs")?,
        weight_decay: req(&cfg, "weight_decay")?,
        clip_norm: req(&cfg, "clip_norm")?,
        seed: req(&cfg, "seed")?,
    };
    ft.validate()?;
    let property: String = req(&cfg, "property")?;
    let labeled_cap: Option<usize> = match req::<String>(&cfg, "labeled")?.as_str() {
        "all" => None,
        s => Some(s.parse().map_err(|_| CliError::config(format!("bad labeled count `{s}`")))?),
    };
    if a.ckpt.is_none() && !a.from_scratch {
        return Err(CliError::config("give --ckpt or --from-scratch"));
    }
    Manifest { command: "finetune", common: &a.common, seed: Some(ft.seed), cfg: &cfg }.write()?;

    let data = read_dataset(&a.data)?;
    let mut labeled: Vec<_> = data
        .records
        .into_iter()
        .filter(|r| r.crystal.is_some() && r.properties.contains_key(&property))
        .collect();
    if let Some(cap) = labeled_cap {
        if cap > labeled.len() {
            return Err(CliError::config(format!(
                "{cap} labeled records requested, {} available",
                labeled.len()
            )));
        }
        labeled.truncate(cap);
    }
    let labeled = Dataset::new(labeled);
    let (encoder, init) = match &a.ckpt {
        Some(p) => (load_ckpt(p)?.0.model.crystal, "pretrained"),
        None => {
            let node_dim = labeled
                .records
                .first()
                .and_then(|r| r.crystal.as_ref())
                .map(|c| c.feature_dim())
                .ok_or(mmalign::Error::EmptyDataset)?;
            let enc = CrystalEncoder::<f64>::new(CrystalEncoderConfig::new(node_dim, req(&cfg, "d")?), ft.seed)?;
            (enc, "scratch")
        }
    };
    eprintln!(
        "fine-tuning {init} encoder (d = {}) on {} labeled records",
        encoder.embed_dim(),
        labeled.len()
    );
    let report = finetune(&encoder, &labeled, &property, &ft)?;
    let mut s = String::from("property,init,seed,best_lr,best_epoch,best_val_mae,test_mae\n");
    s.push_str(&format!(
        "{},{init},{},{},{},{},{}\n",
        report.property, ft.seed, report.best_lr, report.best_epoch, report.best_val_mae, report.test_mae
    ));
    fs::write(a.common.out.join("finetune.csv"), &s)?;
    let mut h = String::from("lr,epoch,val_mae\n");
    for (lr, hist) in &report.val_history {
        for (i, v) in hist.iter().enumerate() {
            h.push_str(&format!("{lr},{},{v}\n", i + 1));
        }
    }
    fs::write(a.common.out.join("val_history.csv"), h)?;
    println!(
        "best lr {} epoch {}: val MAE {:.6}, test MAE {:.6}",
        report.best_lr, report.best_epoch, report.best_val_mae, report.test_mae
    );
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let cfg = resolve(
        &a.common,
        vec![("sample", "all".to_string()), ("seed", "0".to_string())],
        vec![("sample", a.sample.clone()), ("seed", a.seed.map(|v| v.to_string()))],
    )?;
    let sample = match req::<String>(&cfg, "sample")?.as_str() {
        "all" => None,
        "paper" => Some(PAPER_EXPORT_SAMPLE),
        s => Some(s.parse().map_err(|_| CliError::config(format!("bad sample `{s}`")))?),
    };
    let seed: u64 = req(&cfg, "seed")?;
    Manifest { command: "export", common: &a.common, seed: Some(seed), cfg: &cfg }.write()?;
    let (ckpt, _) = load_ckpt(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let table = export_embeddings(&ckpt.model.crystal, &data, sample, seed)?;
    let mut w = create(&a.common.out.join("embeddings.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    println!("exported {} embeddings", table.ids.len());
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let cfg = resolve(&a.common, vec![], vec![])?;
    Manifest { command: "project", common: &a.common, seed: None, cfg: &cfg }.write()?;
    let table = EmbeddingTable::read_csv(fs::File::open(&a.table)?)?;
    let p = project_2d(&table.embeddings)?;
    let mut w = create(&a.common.out.join("projection.csv"))?;
    write_projection_csv(&mut w, &table.ids, &p.coords)?;
    w.flush()?;
    println!(
        "projected {} rows; leading eigenvalues {:.6} {:.6}",
        table.ids.len(),
        p.eigenvalues[0],
        p.eigenvalues[1]
    );
    Ok(())
}
