use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use poolkit::attnmap::{largest_component_bbox, mass_threshold, reshape_attention, write_mask_pgm, write_pgm};
use poolkit::gradcheck::{run_simpool_check, SimPoolCheck};
use poolkit::methods::run_method;
use poolkit::tensor_io::{load_config, read_npy, read_npy_header, write_npy, write_npy_vector, Family, RunConfig};
use poolkit::tournament::{run_tournament, TournamentConfig};
use poolkit::{Error, Mat, Method, Result};

#[derive(Parser)]
#[command(name = "poolkit", version, about = "Pooling as iterative cross-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool a feature file with one method.
    Pool(PoolArgs),
    /// Threshold an attention vector and locate its main region.
    Attnmap(AttnArgs),
    /// Compare analytic and numerical gradients.
    Gradcheck(GradArgs),
    /// Run every method on synthetic clustered features.
    Tournament(TournamentArgs),
    /// Print the header of an NPY file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct PoolArgs {
    /// Features, `d x p` or `d x H x W`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// JSON run configuration; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Log-sum-exp scale.
    #[arg(long)]
    r: Option<f64>,
    /// SE/CBAM bottleneck ratio.
    #[arg(long)]
    reduction: Option<usize>,
    /// Nystrom kernel width for sinkhorn-otk.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// Disable LayerNorm in simpool and slot.
    #[arg(long)]
    no_layernorm: bool,
    /// Full rather than simplified slot, CBAM and ViT blocks.
    #[arg(long)]
    full: bool,
    /// Weight file for a role, e.g. `w_q=wq.npy`; repeatable.
    #[arg(long = "weight", value_parser = parse_weight)]
    weights: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    attn_out: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args)]
struct AttnArgs {
    /// Attention vector of length `W * H`.
    #[arg(long)]
    attn: PathBuf,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Attention column to use when the file holds several.
    #[arg(long, default_value_t = 0)]
    column: usize,
    #[arg(long, default_value_t = poolkit::tensor_io::DEFAULT_MASS)]
    mass: f64,
    /// Grey-level image of the attention.
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Binary image of the thresholded mask.
    #[arg(long)]
    mask_pgm: Option<PathBuf>,
    /// Print the box of the largest region as `x_min y_min x_max y_max`.
    #[arg(long)]
    bbox: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value = "simpool")]
    method: Method,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 12)]
    p: usize,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TournamentArgs {
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    k_clusters: usize,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated method names; all methods when absent.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// TSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add a wall-time column.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    match s {
        "convolutional" => Ok(Family::Convolutional),
        "transformer" => Ok(Family::Transformer),
        _ => Err(format!("unknown family '{s}', expected convolutional or transformer")),
    }
}

fn parse_weight(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (role, path) = s.split_once('=').ok_or_else(|| format!("expected ROLE=PATH, got '{s}'"))?;
    Ok((role.to_string(), PathBuf::from(path)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_pooled(m: &Mat, path: &Path) -> Result<()> {
    if m.cols() == 1 {
        write_npy_vector(m.data(), path)
    } else {
        write_npy(m, path)
    }
}

fn build_config(args: &PoolArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = args.method {
        cfg.method = m;
    } else if args.config.is_none() {
        return Err(Error::Contract("--method is required without --config".into()));
    }
    if args.gamma.is_some() {
        cfg.gamma = args.gamma;
    }
    if args.k.is_some() {
        cfg.k = args.k;
    }
    if args.iters.is_some() {
        cfg.iters = args.iters;
    }
    if args.sigma.is_some() {
        cfg.sigma = args.sigma;
    }
    if args.width.is_some() {
        cfg.width = args.width;
    }
    if args.height.is_some() {
        cfg.height = args.height;
    }
    cfg.heads = args.heads.unwrap_or(cfg.heads);
    cfg.epsilon = args.epsilon.unwrap_or(cfg.epsilon);
    cfg.r = args.r.unwrap_or(cfg.r);
    cfg.reduction = args.reduction.unwrap_or(cfg.reduction);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.family = args.family.unwrap_or(cfg.family);
    cfg.layernorm &= !args.no_layernorm;
    cfg.simplified &= !args.full;
    for (role, path) in &args.weights {
        cfg.weights.insert(role.clone(), path.clone());
    }
    if let Some(p) = &args.input {
        cfg.input = Some(p.clone());
    }
    if let Some(p) = &args.out {
        cfg.output = Some(p.clone());
    }
    if let Some(p) = &args.attn_out {
        cfg.attn_output = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_pool(args: &PoolArgs) -> Result<()> {
    let cfg = build_config(args)?;
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::Contract("no input file given (--input or config \"input\")".into()))?;
    let fm = read_npy(input)?.to_feature_map(cfg.width, cfg.height)?;
    let weights: BTreeMap<String, Mat> = cfg.load_weights()?;
    let out = run_method(&cfg, &fm, weights)?;
    println!("method {} input {}x{} pooled {}x{}", cfg.method, fm.d(), fm.p(), out.u.rows(), out.u.cols());
    if let Some(path) = &cfg.output {
        write_pooled(&out.u, path)?;
    }
    if let Some(path) = &cfg.attn_output {
        let att = out
            .attention
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("method {} produces no attention", cfg.method)))?;
        write_pooled(&att.a, path)?;
        println!("attention {}x{}", att.a.rows(), att.a.cols());
    }
    Ok(())
}

fn cmd_attnmap(args: &AttnArgs) -> Result<()> {
    let m = read_npy(&args.attn)?.to_mat()?;
    if args.column >= m.cols() {
        return Err(Error::Contract(format!("column {} of an attention with {} columns", args.column, m.cols())));
    }
    let a = m.col(args.column);
    let p = a.len();
    let (w, h) = match (args.width, args.height) {
        (Some(w), Some(h)) => (w, h),
        (Some(w), None) if w > 0 => (w, p / w),
        (None, Some(h)) if h > 0 => (p / h, h),
        _ => (p, 1),
    };
    let grid = reshape_attention(&a, w, h)?;
    let mask = mass_threshold(&grid, args.mass)?;
    if let Some(path) = &args.pgm {
        write_pgm(&grid, path)?;
    }
    if let Some(path) = &args.mask_pgm {
        write_mask_pgm(&mask, path)?;
    }
    if args.bbox {
        println!("{}", largest_component_bbox(&mask)?);
    } else {
        println!("kept {} of {} cells", mask.count(), p);
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradArgs) -> Result<()> {
    if args.method != Method::SimPool {
        return Err(Error::Contract(format!("gradients are implemented for simpool only, not {}", args.method)));
    }
    let cfg = SimPoolCheck {
        d: args.d,
        p: args.p,
        gamma: args.gamma,
        h: args.h,
        trials: args.trials,
        seed: args.seed,
    };
    let reports = run_simpool_check(&cfg)?;
    println!("trial\tparam\tmax_rel\tmean_rel\tworst\tstatus");
    let mut failed = 0;
    for (i, r) in reports.iter().enumerate() {
        let ok = r.passes(args.tol);
        failed += usize::from(!ok);
        println!("{}\t{r}\t{}", i / 3, if ok { "ok" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(Error::GradCheck(format!(
            "{failed} of {} comparisons above tolerance {:e}",
            reports.len(),
            args.tol
        )));
    }
    Ok(())
}

fn cmd_tournament(args: &TournamentArgs) -> Result<()> {
    let cfg = TournamentConfig {
        d: args.d,
        p: args.p,
        k_clusters: args.k_clusters,
        trials: args.trials,
        seed: args.seed,
        methods: if args.methods.is_empty() {
            Method::ALL.to_vec()
        } else {
            args.methods.clone()
        },
    };
    let tsv = run_tournament(&cfg)?.to_tsv(args.timing);
    match &args.out {
        Some(path) => write_text(path, &tsv),
        None => {
            print!("{tsv}");
            Ok(())
        }
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let h = read_npy_header(&args.file)?;
    let shape: Vec<String> = h.shape.iter().map(usize::to_string).collect();
    println!("dtype {}", h.dtype.descr());
    println!("fortran_order {}", h.fortran_order);
    let trailing = if shape.len() == 1 { "," } else { "" };
    println!("shape ({}{trailing})", shape.join(", "));
    println!("header_len {}", h.header_len);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Pool(a) => cmd_pool(a),
        Command::Attnmap(a) => cmd_attnmap(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Tournament(a) => cmd_tournament(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
