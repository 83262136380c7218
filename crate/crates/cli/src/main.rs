use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gpam::data::{
    generate_synthetic, hash_embed_instance, load_embeddings, write_embeddings, Dataset,
    DatasetManifest, Split, SyntheticSpec, TokenSpan,
};
use gpam::eval::NOT_APPLICABLE;
use gpam::training::{train_with, TRACE_HEADER};
use gpam::{
    evaluate, grad_check, run_ablation, sweep_nota, BandPolicy, DistanceForm, EvalConfig,
    Execution, GpamError, GradCheckConfig, ModelParams, Result, TrainConfig, Variant,
};

#[derive(Parser)]
#[command(
    name = "gpam",
    version,
    about = "Gaussian-prototype open-set few-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view embedding file.
    GenSynthetic(GenArgs),
    /// Hash-embed tab-separated sentences into an embedding file.
    EmbedText(EmbedArgs),
    /// Train a model and write a checkpoint and a loss trace.
    Train(TrainCmd),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalCmd),
    /// Evaluate a checkpoint at several NOTA rates.
    Sweep(SweepCmd),
    /// Train and evaluate the full model and ablation variants over seeds.
    Ablate(AblateCmd),
    /// Compare reverse-mode gradients against central finite differences.
    GradCheck(GradCheckCmd),
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum Format {
    #[default]
    Csv,
    JsonLines,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Variance,
    InverseVariance,
    Euclidean,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandArg {
    Reject,
    Accept,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic spec; individual flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Four comma-separated multipliers (main,head,tail,context).
    #[arg(long, value_delimiter = ',', num_args = 4)]
    informativeness: Option<Vec<f64>>,
    #[arg(long)]
    instances: Option<usize>,
    /// Minimum distance between centres, in units of sigma.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    validation_relations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Lines of `id<TAB>relation<TAB>head<TAB>tail<TAB>sentence`, spans as `start:end` token ranges.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Hold out the last N relations (first-seen order) as the validation split.
    #[arg(long, default_value_t = 0)]
    validation_relations: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    q_known: Option<usize>,
    #[arg(long)]
    nota_rate: Option<f64>,
    #[arg(long)]
    pns_ratio: Option<f64>,
    #[arg(long)]
    pns_noise_scale: Option<f64>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    /// Keep tau1 and tau2 at their initial values.
    #[arg(long)]
    fixed_quantiles: bool,
    /// Treat the margin as a constant inside the loss.
    #[arg(long)]
    detach_margin: bool,
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, value_enum)]
    distance: Option<DistanceArg>,
    #[arg(long, value_enum)]
    band: Option<BandArg>,
    #[arg(long)]
    euclidean_distance: bool,
    #[arg(long)]
    fixed_margin: Option<f64>,
    #[arg(long)]
    no_margin: bool,
    #[arg(long)]
    no_pns: bool,
    #[arg(long)]
    equal_weights: bool,
    #[arg(long)]
    no_self_attention: bool,
    #[arg(long)]
    single_view: bool,
    #[arg(long)]
    shared_prompt: bool,
    #[arg(long)]
    pool_all: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

macro_rules! override_fields {
    ($src:expr, $dst:expr, $($f:ident),*) => {
        $( if let Some(v) = $src.$f { $dst.$f = v; } )*
    };
}

impl TrainArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        override_fields!(
            self,
            c,
            lambda,
            alpha,
            beta,
            lr,
            weight_decay,
            episodes,
            batch,
            ways,
            shots,
            q_known,
            nota_rate,
            pns_ratio,
            pns_noise_scale,
            prompt_len,
            heads,
            tau1,
            tau2,
            seed
        );
        if self.fixed_quantiles {
            c.learn_quantiles = false;
        }
        if self.detach_margin {
            c.margin_gradient = false;
        }
        if self.no_early_stop {
            c.early_stop = false;
        }
        if let Some(d) = self.distance {
            c.distance = match d {
                DistanceArg::Variance => DistanceForm::Variance,
                DistanceArg::InverseVariance => DistanceForm::InverseVariance,
                DistanceArg::Euclidean => DistanceForm::Euclidean,
            };
        }
        if let Some(b) = self.band {
            c.band = match b {
                BandArg::Reject => BandPolicy::Reject,
                BandArg::Accept => BandPolicy::Accept,
            };
        }
        let a = &mut c.ablations;
        a.euclidean_distance |= self.euclidean_distance;
        a.no_margin |= self.no_margin;
        a.no_pns |= self.no_pns;
        a.equal_weights |= self.equal_weights;
        a.no_self_attention |= self.no_self_attention;
        a.single_view |= self.single_view;
        a.shared_prompt |= self.shared_prompt;
        a.pool_all |= self.pool_all;
        if self.fixed_margin.is_some() {
            a.fixed_margin = self.fixed_margin;
        }
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV (`episode,loss,R_mean,M_mean`).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Start from an existing checkpoint instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    split: SplitArg,
    #[arg(long, default_value_t = 200)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Model switches (distance form, band policy, ablations) must match training.
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.15,0.3,0.5")]
    rates: Vec<f64>,
    /// Also write the plot-ready CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variants, e.g. `no-margin,euclidean-distance,fixed-margin=0.5`.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 200)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct GradCheckCmd {
    /// Embedding file; a small synthetic pool is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    check_seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    train: TrainArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::EmbedText(a) => embed_text(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    override_fields!(
        a,
        spec,
        relations,
        dim,
        center_scale,
        sigma,
        validation_relations,
        seed
    );
    if let Some(n) = a.instances {
        spec.instances_per_relation = n;
    }
    if let Some(s) = a.spacing {
        spec.min_center_spacing = s;
    }
    if let Some(m) = a.informativeness {
        spec.informativeness = m
            .try_into()
            .map_err(|_| GpamError::Config("informativeness needs four values".into()))?;
    }
    let generated = generate_synthetic(&spec)?;
    write_embeddings(&a.out, &generated.dataset)?;
    eprintln!(
        "wrote {} instances of {} relations to {}",
        generated.dataset.instances.len(),
        spec.relations,
        a.out.display()
    );
    Ok(())
}

fn parse_span(s: &str, line: usize) -> Result<TokenSpan> {
    let bad = || GpamError::Parse {
        record: line,
        message: format!("bad span {s:?}, expected start:end"),
    };
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok(a.trim().parse().map_err(|_| bad())?..b.trim().parse().map_err(|_| bad())?)
}

fn embed_text(a: EmbedArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input)?;
    let mut instances = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let record = i + 1;
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() != 5 {
            return Err(GpamError::Parse {
                record,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = parse_span(fields[2], record)?;
        let tail = parse_span(fields[3], record)?;
        instances.push(hash_embed_instance(
            fields[0], fields[1], fields[4], head, tail, a.dim,
        )?);
    }
    let mut dataset = Dataset {
        manifest: DatasetManifest::from_instances(a.dim, &instances),
        instances,
    };
    dataset.assign_validation_tail(a.validation_relations)?;
    write_embeddings(&a.out, &dataset)?;
    eprintln!(
        "embedded {} sentences into {}",
        dataset.instances.len(),
        a.out.display()
    );
    Ok(())
}

fn load_pool(path: &Path, split: Split) -> Result<(gpam::InstancePool, usize)> {
    let ds = load_embeddings(path)?;
    let pool = ds.pool(split);
    if pool.is_empty() {
        return Err(GpamError::Config(format!(
            "{} has no {split:?} relations",
            path.display()
        )));
    }
    Ok((pool, ds.manifest.dim))
}

fn train_cmd(a: TrainCmd) -> Result<()> {
    let config = a.train.build()?;
    let (pool, dim) = load_pool(&a.data, Split::Train)?;
    let params = match &a.init {
        Some(p) => ModelParams::load(p)?,
        None => config.init_params(dim)?,
    };
    let mut trace = match &a.trace {
        Some(p) => {
            let mut f = std::io::BufWriter::new(fs::File::create(p)?);
            writeln!(f, "{TRACE_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut io_error = None;
    let result = train_with(&pool, params, &config, |row| {
        if let Some(f) = trace.as_mut() {
            if let Err(e) = writeln!(f, "{}", row.csv()) {
                io_error.get_or_insert(e);
            }
        }
    });
    if let Some(f) = trace.as_mut() {
        f.flush()?;
    }
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = result?;
    outcome.params.save(&a.out)?;
    let last = outcome.trace.last();
    eprintln!(
        "trained {} episodes (final loss {}), pseudo-negatives skipped in {} episodes{}",
        outcome.trace.len(),
        last.map(|r| r.loss.to_string())
            .unwrap_or_else(|| NOT_APPLICABLE.into()),
        outcome.pns_skipped,
        outcome
            .stopped_early
            .map(|e| format!(", early stop after {e}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn eval_setup(a: &EvalArgs) -> Result<(gpam::InstancePool, ModelParams, EvalConfig)> {
    let config = a.train.build()?;
    let (pool, dim) = load_pool(&a.data, a.split.into())?;
    let params = ModelParams::load(&a.checkpoint)?;
    if params.dim() != dim {
        return Err(GpamError::Schema(format!(
            "checkpoint has dim {}, data has dim {dim}",
            params.dim()
        )));
    }
    Ok((
        pool,
        params,
        EvalConfig::matching(&config, a.eval_episodes, a.eval_seed),
    ))
}

fn emit_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn eval_cmd(a: EvalCmd) -> Result<()> {
    let (pool, params, cfg) = eval_setup(&a.eval)?;
    let report = evaluate(&pool, &params, &cfg)?;
    match a.eval.format {
        Format::Csv => println!("{}\n{}", gpam::EvalReport::CSV_HEADER, report.csv_row()),
        Format::JsonLines => emit_json(&report)?,
    }
    Ok(())
}

fn sweep_cmd(a: SweepCmd) -> Result<()> {
    let (pool, params, cfg) = eval_setup(&a.eval)?;
    let sweep = sweep_nota(&pool, &params, &a.rates, &cfg)?;
    let csv = sweep.to_csv();
    if let Some(p) = &a.out {
        fs::write(p, &csv)?;
    }
    match a.eval.format {
        Format::Csv => print!("{csv}"),
        Format::JsonLines => {
            for (rate, report) in &sweep.points {
                emit_json(&serde_json::json!({ "nota_rate": rate, "report": report }))?;
            }
        }
    }
    Ok(())
}

fn ablate_cmd(a: AblateCmd) -> Result<()> {
    let config = a.train.build()?;
    let ds = load_embeddings(&a.data)?;
    let (train_pool, eval_pool) = (ds.pool(Split::Train), ds.pool(Split::Validation));
    if eval_pool.is_empty() {
        return Err(GpamError::Config(
            "ablation needs validation relations in the data".into(),
        ));
    }
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..a.seeds).map(|s| config.seed.wrapping_add(s)).collect();
    let eval = EvalConfig::matching(&config, a.eval_episodes, a.eval_seed);
    let table = run_ablation(&train_pool, &eval_pool, &config, &eval, &variants, &seeds)?;
    eprint!("{}", table.render());
    match a.format {
        Format::Csv => print!("{}", table.to_csv()),
        Format::JsonLines => {
            for row in &table.rows {
                emit_json(row)?;
            }
        }
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckCmd) -> Result<()> {
    let config = a.train.build()?;
    let check = GradCheckConfig {
        trials: a.trials,
        probes_per_block: a.probes,
        epsilon: a.epsilon,
        seed: a.check_seed,
        ..GradCheckConfig::default()
    };
    let (pool, dim) = match &a.data {
        Some(p) => load_pool(p, Split::Train)?,
        None => {
            let spec = SyntheticSpec {
                relations: 8,
                dim: a.dim,
                instances_per_relation: 20,
                validation_relations: 0,
                seed: a.check_seed,
                ..SyntheticSpec::default()
            };
            (generate_synthetic(&spec)?.dataset.pool(Split::Train), a.dim)
        }
    };
    let params = config.init_params(dim)?;
    let report = grad_check(&pool, &params, &config, &check)?;
    match a.format {
        Format::Csv => {
            println!("block,max_relative_error,probes");
            for b in &report.blocks {
                println!("{},{:e},{}", b.block, b.max_relative_error, b.probes);
            }
        }
        Format::JsonLines => {
            for b in &report.blocks {
                emit_json(b)?;
            }
        }
    }
    Ok(())
}
