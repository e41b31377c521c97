use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brandrank::dataset::{
    encode_all, filter_sparse, parse_action_log, read_instances, write_instances, build_dataset,
    DatasetOptions, WindowMode, DEFAULT_MIN_BRAND_ACTIONS, DEFAULT_MIN_USER_ACTIONS,
};
use brandrank::eval::{evaluate, write_reports, EvalReport, DEFAULT_THRESHOLD};
use brandrank::features::{
    brands_of, build_brand_feature_vectors, read_events, read_features, read_items, write_features,
    FeatureOptions, FEATURE_DIM,
};
use brandrank::gradcheck::{check_gradients, modification_grid};
use brandrank::models::{BrandRepr, ModelConfig, Variant};
use brandrank::synth::{generate, write_output, SynthConfig};
use brandrank::train::{load_checkpoint, save_checkpoint, train, EpochStats, TrainConfig};
use brandrank::{BrandTable, EncodedInstance, Error, Vocabulary};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "brandrank", version, about = "Brand-level ranking with an Attention-GRU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted preferences.
    #[command(after_help = "\
Outputs (in --out):
  items.csv          item_id,brand_id,category_id,price
  events.csv         user_id,item_id,event_type,timestamp,amount
                     event_type is one of search, impression, click, add_to_cart, purchase
  actions.csv        user_id,brand_id,action_type,timestamp   (action_type: click | purchase)
  truth.csv          user_id,brand_id,score   (static preference utility)
  synth_config.json  generator settings")]
    Synth(SynthArgs),
    /// Build the 56-wide brand feature vectors.
    #[command(after_help = "\
Inputs:
  --items   item_id,brand_id,category_id,price
  --events  user_id,item_id,event_type,timestamp,amount
  --vocab   optional brand_id,index; restricts and orders the output brands
Output:
  --out     brand_id,L1_ctr,L1_cvr,L1_gmv,L1_atip,L1_search,L1_click,L1_cart,L1_txn,...,L7_txn")]
    Featurize(FeaturizeArgs),
    /// Filter, window and split an action log into training instances.
    #[command(after_help = "\
Input:
  --actions  user_id,brand_id,action_type,timestamp
Outputs (in --out):
  train.jsonl, test.jsonl  one instance per line:
      {\"user_id\", \"history\": [[brand_id, action_type, delta_t], x10], \"query_brand\", \"query_time\", \"label\"}
  vocab.csv                brand_id,index")]
    Prepare(PrepareArgs),
    /// Train one model and write its checkpoint.
    #[command(after_help = "\
Inputs (in --data): train.jsonl, vocab.csv, features.csv (see `prepare` and `featurize`)
Outputs:
  --out    JSON checkpoint: version, configs, vocabulary hash, parameters, optimizer state
  --trace  optional CSV epoch,mean_loss,auc")]
    Train(TrainArgs),
    /// Score a test set with a checkpoint.
    #[command(after_help = "\
Inputs: --checkpoint from `train`; --data holding test.jsonl, vocab.csv, features.csv
Output: --out CSV variant,auc,f1,n,n_pos,threshold,config_hash (also printed to stdout)")]
    Eval(EvalArgs),
    /// Train and evaluate the full model, its three ablations and both baselines.
    #[command(after_help = "\
Inputs (in --data): train.jsonl, test.jsonl, vocab.csv, features.csv
Output: --out CSV variant,auc,f1,n,n_pos,threshold,config_hash, one row per variant in the order
  Attention-GRU-3M, No Modification 1, No Modification 2, No Modification 3, GRU, Attention-GRU")]
    Ablate(AblateArgs),
    /// Compare analytic gradients with central differences for every variant.
    #[command(after_help = "\
Output (stdout): one line per architecture: name, max relative error, worst parameter, PASS/FAIL.
Exit status 2 when any error exceeds --tolerance.")]
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    brands: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    TimeDecay,
    Action,
    ColdBrand,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Put every item of a category with fewer than 7 items into level 1.
    #[arg(long)]
    allow_small_categories: bool,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    actions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_USER_ACTIONS)]
    min_user_actions: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_BRAND_ACTIONS)]
    min_brand_actions: usize,
    #[arg(long, value_enum, default_value_t = Window::Disjoint)]
    window: Window,
    #[arg(long, default_value_t = 1)]
    negatives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Window {
    Disjoint,
    Sliding,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModelKind {
    Gru,
    Attn,
    Attn3m,
}

#[derive(Clone, Copy, ValueEnum)]
enum Repr {
    Features,
    Onehot,
    Combined,
}

#[derive(Args)]
struct TrainingFlags {
    /// Directory with train.jsonl, test.jsonl, vocab.csv and features.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Weight of the negative-instance loss.
    #[arg(long, default_value_t = 0.5)]
    w: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long)]
    learn_initial_state: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainingFlags,
    #[arg(long, value_enum, default_value_t = ModelKind::Attn3m)]
    model: ModelKind,
    /// Modifications to enable on an attention model, e.g. `1,3`; `none` for
    /// none. Defaults to all three for attn3m and none for attn.
    #[arg(long)]
    mods: Option<String>,
    /// Brand representation; overrides what --mods implies.
    #[arg(long, value_enum)]
    repr: Option<Repr>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Report label; defaults to the variant the checkpoint's config matches.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainingFlags,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one checkpoint per variant.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Width of the brand representation.
    #[arg(long, default_value_t = 6)]
    input: usize,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    instances: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Synth(a) => synth(a)?,
        Command::Featurize(a) => featurize(a)?,
        Command::Prepare(a) => prepare(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let mut config = match a.preset {
        Preset::Default => SynthConfig::default(),
        Preset::TimeDecay => SynthConfig::time_decay_amplified(),
        Preset::Action => SynthConfig::action_amplified(),
        Preset::ColdBrand => SynthConfig::cold_brand_heavy(),
    }
    .with_seed(a.seed);
    if let Some(u) = a.users {
        config.users = u;
    }
    if let Some(b) = a.brands {
        config.brands = b;
    }
    let out = generate(&config)?;
    write_output(&a.out, &out)?;
    log::info!(
        "wrote {} users, {} items, {} events to {}",
        out.actions.len(),
        out.items.len(),
        out.events.len(),
        a.out.display()
    );
    Ok(())
}

fn featurize(a: FeaturizeArgs) -> Result<(), Error> {
    let items = read_items(&a.items)?;
    let events = read_events(&a.events)?;
    let brands = match &a.vocab {
        Some(p) => Vocabulary::read(p)?.ids().to_vec(),
        None => brands_of(&items),
    };
    let options = FeatureOptions {
        allow_small_categories: a.allow_small_categories,
    };
    let features = build_brand_feature_vectors(&events, &items, &brands, options)?;
    write_features(&a.out, &features.vectors)?;
    log::info!("wrote {} brand vectors to {}", features.vectors.len(), a.out.display());
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<(), Error> {
    let log = parse_action_log(&a.actions)?;
    let filtered = filter_sparse(&log, a.min_user_actions, a.min_brand_actions)?;
    let options = DatasetOptions {
        window: match a.window {
            Window::Disjoint => WindowMode::Disjoint,
            Window::Sliding => WindowMode::Sliding,
        },
        negatives_per_positive: a.negatives,
        seed: a.seed,
    };
    let ds = build_dataset(&filtered, options)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Invalid(format!("{}: {e}", a.out.display())))?;
    write_instances(&a.out.join("train.jsonl"), &ds.train)?;
    write_instances(&a.out.join("test.jsonl"), &ds.test)?;
    ds.vocab.write(&a.out.join("vocab.csv"))?;
    log::info!(
        "{} users, {} brands: {} train and {} test instances",
        filtered.len(),
        ds.vocab.len(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

fn load_table(dir: &Path) -> Result<BrandTable, Error> {
    let vocab = Vocabulary::read(&dir.join("vocab.csv"))?;
    let features = read_features(&dir.join("features.csv"))?;
    BrandTable::new(vocab, &features, FEATURE_DIM)
}

fn load_split(dir: &Path, name: &str, table: &BrandTable) -> Result<Vec<EncodedInstance>, Error> {
    encode_all(&read_instances(&dir.join(name))?, &table.vocab)
}

fn parse_mods(spec: &str) -> Result<[bool; 3], Error> {
    let mut mods = [false; 3];
    if spec.trim() == "none" || spec.trim().is_empty() {
        return Ok(mods);
    }
    for part in spec.split(',') {
        match part.trim() {
            "1" => mods[0] = true,
            "2" => mods[1] = true,
            "3" => mods[2] = true,
            other => return Err(Error::Contract(format!("unknown modification {other:?}, expected 1, 2 or 3"))),
        }
    }
    Ok(mods)
}

fn model_config(a: &TrainArgs, brands: usize) -> Result<ModelConfig, Error> {
    let hidden = a.flags.hidden;
    let mut config = match a.model {
        ModelKind::Gru => {
            if a.mods.is_some() {
                return Err(Error::Contract("--mods applies to attention models only".into()));
            }
            Variant::Gru.config(brands, FEATURE_DIM, hidden)
        }
        ModelKind::Attn | ModelKind::Attn3m => {
            let default = if a.model == ModelKind::Attn3m { "1,2,3" } else { "none" };
            let [m1, m2, m3] = parse_mods(a.mods.as_deref().unwrap_or(default))?;
            let mut c = Variant::AttentionGru.config(brands, FEATURE_DIM, hidden);
            c.brand_repr = if m1 { BrandRepr::Combined } else { BrandRepr::Features };
            if a.model == ModelKind::Attn3m && !m1 {
                c.brand_repr = BrandRepr::OneHot;
            }
            c.use_action_matrices = m2;
            c.use_time_gate = m3;
            c
        }
    };
    if let Some(r) = a.repr {
        config.brand_repr = match r {
            Repr::Features => BrandRepr::Features,
            Repr::Onehot => BrandRepr::OneHot,
            Repr::Combined => BrandRepr::Combined,
        };
    }
    config.learn_initial_state = a.flags.learn_initial_state;
    Ok(config)
}

fn train_config(f: &TrainingFlags) -> TrainConfig {
    TrainConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        learning_rate: f.lr,
        negative_weight: f.w,
        clip_norm: f.clip_norm,
        seed: f.seed,
        threads: f.threads,
        ..TrainConfig::default()
    }
}

fn variant_label(config: &ModelConfig) -> String {
    match Variant::identify(config) {
        Some(v) => v.name().to_string(),
        None => {
            let mut s = String::from("Attention-GRU");
            if config.brand_repr != BrandRepr::Features {
                s.push_str(&format!("[{:?}]", config.brand_repr));
            }
            if config.use_action_matrices {
                s.push_str("+M2");
            }
            if config.use_time_gate {
                s.push_str("+M3");
            }
            s
        }
    }
}

fn write_trace(path: &Path, trace: &[EpochStats]) -> Result<(), Error> {
    let mut text = String::from("epoch,mean_loss,auc\n");
    for e in trace {
        let auc = e.auc.map_or(String::new(), |a| a.to_string());
        text.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, auc));
    }
    std::fs::write(path, text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn train_cmd(a: TrainArgs) -> Result<(), Error> {
    let table = load_table(&a.flags.data)?;
    let train_set = load_split(&a.flags.data, "train.jsonl", &table)?;
    let config = model_config(&a, table.vocab.len())?;
    log::info!("training {} on {} instances", variant_label(&config), train_set.len());
    let out = train(&train_set, &table, config, train_config(&a.flags))?;
    save_checkpoint(&out.checkpoint, &a.out)?;
    if let Some(p) = &a.trace {
        write_trace(p, &out.trace)?;
    }
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    println!("variant,auc,f1,n,n_pos,threshold,config_hash");
    for r in reports {
        println!(
            "{},{},{},{},{},{},{}",
            r.variant, r.auc, r.f1, r.n, r.n_pos, r.threshold, r.config_hash
        );
    }
}

fn eval_cmd(a: EvalArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let table = load_table(&a.data)?;
    let test = load_split(&a.data, "test.jsonl", &table)?;
    let label = a.variant.unwrap_or_else(|| variant_label(&ckpt.model_config));
    let report = evaluate(&label, &ckpt, &test, &table, a.threshold, a.threads)?;
    write_reports(&a.out, std::slice::from_ref(&report))?;
    print_reports(&[report]);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Error> {
    let table = load_table(&a.flags.data)?;
    let train_set = load_split(&a.flags.data, "train.jsonl", &table)?;
    let test = load_split(&a.flags.data, "test.jsonl", &table)?;
    if let Some(dir) = &a.checkpoints {
        std::fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?;
    }
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let mut config = v.config(table.vocab.len(), FEATURE_DIM, a.flags.hidden);
        config.learn_initial_state = a.flags.learn_initial_state;
        log::info!("training {}", v.name());
        let out = train(&train_set, &table, config, train_config(&a.flags))?;
        if let Some(dir) = &a.checkpoints {
            let file = format!("{}.json", format!("{v:?}").to_lowercase());
            save_checkpoint(&out.checkpoint, &dir.join(file))?;
        }
        reports.push(evaluate(v.name(), &out.checkpoint, &test, &table, a.threshold, a.flags.threads)?);
    }
    write_reports(&a.out, &reports)?;
    print_reports(&reports);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode, Error> {
    let brands = 5;
    let mut all_pass = true;
    println!("{:<26} {:>14}  {:<24} result", "architecture", "max_rel_error", "worst_parameter");
    for (name, config) in modification_grid(brands, a.input, a.hidden) {
        let mut worst = (0.0, String::new());
        for i in 0..a.instances {
            let seed = a.seed.wrapping_mul(1_000).wrapping_add(i);
            let r = check_gradients(config, a.steps, seed, a.step, 0.5)?;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{}[{}]", r.worst_tensor, r.worst_index));
            }
        }
        let pass = worst.0 <= a.tolerance;
        all_pass &= pass;
        println!(
            "{:<26} {:>14.3e}  {:<24} {}",
            name,
            worst.0,
            worst.1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
