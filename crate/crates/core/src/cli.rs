//! Command-line front end. Every command writes a JSON record
//! (`<command>.json`) plus CSV tables into `--out`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::cv::{
    frozen_features, learning_curve, paired_deltas, portability, run_cv, ConstantPredictor, Problem, RuleGating,
    RunRecord,
};
use crate::data::{Dataset, Schema};
use crate::diagnostics::{
    ablate, comparative_statics, completeness, concentration, crossfit_topk, restrictiveness, Covariate, Selection,
};
use crate::error::{Error, Result};
use crate::features::{write_feature_dump, Encoding, FeatureSet, GATE_FEATURE_NAMES};
use crate::gate::{random_params, responsibilities, train, Batch, GateParams};
use crate::identification::{coverage, ident_report, jacobian_local_rank};
use crate::rules::{build_rule_matrix, placebo_permute, RuleId, RuleMatrix};
use crate::synth::{generate_synthetic, FeatureMode, SynthConfig};
use crate::two_step::fit_two_step;

#[derive(Debug, Parser)]
#[command(name = "rulegate", version, about = "Gated rule mixtures for binary risky choice")]
pub struct Cli {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Versioned TOML configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Input {
    #[arg(long)]
    pub input: PathBuf,
    /// canonical, choices13k or cpc18
    #[arg(long, default_value = "canonical")]
    pub schema: Schema,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a dataset and write canonical menus, features and rule indicators.
    Ingest(Input),
    /// Train the gate on every menu.
    Fit {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Two-pass cross-validation of the gate.
    Cv {
        #[command(flatten)]
        input: Input,
        /// Also sweep training-set fractions at the selected rate.
        #[arg(long)]
        learning_curve: bool,
    },
    /// Cellwise weights, affine second stage and J-tests.
    TwoStep {
        #[command(flatten)]
        input: Input,
        /// Gate fitted by `fit`, for the weight comparison column.
        #[arg(long)]
        mse_params: Option<PathBuf>,
    },
    /// Identification report; with `--params` also the local Jacobian rank.
    Diagnose {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Refit without each rule and compare out of sample.
    Ablate {
        #[command(flatten)]
        input: Input,
        /// Comma-separated rules; defaults to every non-attention rule.
        #[arg(long, value_delimiter = ',')]
        rules: Vec<RuleId>,
    },
    /// Cross-fitted top-k library restriction.
    Crossfit {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        lr: Option<f64>,
        /// Select whole rule families instead of single rules.
        #[arg(long)]
        families: bool,
    },
    /// Mean weights across quantile bins of a complexity covariate.
    Statics {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        params: PathBuf,
        /// tc or risk_asym
        #[arg(long, default_value = "tc")]
        covariate: Covariate,
    },
    /// Fit to permuted targets relative to the constant predictor.
    Restrictiveness {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate frozen parameters on another dataset with trial records.
    Portability {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        params: PathBuf,
    },
    /// Write a synthetic dataset and its generating gate.
    Synth {
        /// Generating gate; a random one is drawn when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 13)]
        cells: usize,
        #[arg(long, default_value_t = 20)]
        menus_per_cell: usize,
        /// Binomial trials per menu; exact probabilities when absent.
        #[arg(long)]
        trials: Option<u32>,
        /// Spread of the random gate's coefficients.
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
    },
    /// Cross-validate against a library whose indicators are shuffled within strata.
    Placebo(Input),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Fit { .. } => "fit",
            Command::Cv { .. } => "cv",
            Command::TwoStep { .. } => "two-step",
            Command::Diagnose { .. } => "diagnose",
            Command::Ablate { .. } => "ablate",
            Command::Crossfit { .. } => "crossfit",
            Command::Statics { .. } => "statics",
            Command::Restrictiveness { .. } => "restrictiveness",
            Command::Portability { .. } => "portability",
            Command::Synth { .. } => "synth",
            Command::Placebo(_) => "placebo",
        }
    }
}

#[derive(Serialize)]
struct CommandRecord<'a, T: Serialize> {
    version: u32,
    command: &'a str,
    config: &'a Config,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<String>,
    result: T,
}

struct Ctx {
    config: Config,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Ctx {
    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let f = self.file(name)?;
        serde_json::to_writer_pretty(f, value)?;
        Ok(())
    }
}

struct Loaded {
    dataset: Dataset,
    features: FeatureSet,
    matrix: RuleMatrix,
    targets: Vec<f64>,
    trials: Option<Vec<f64>>,
}

impl Loaded {
    fn problem(&self) -> Result<Problem<'_>> {
        Problem::new(&self.features, &self.matrix, &self.targets, self.trials.as_deref())
    }
}

fn load(input: &Input, config: &Config) -> Result<Loaded> {
    let dataset = Dataset::load(&input.input, input.schema)?;
    let features = FeatureSet::compute(&dataset.menus, dataset.rescale_factor, Encoding::Gate);
    let matrix = build_rule_matrix(&dataset.menus, config.activity());
    let targets = dataset.targets()?;
    let trials = dataset.trial_counts();
    Ok(Loaded {
        dataset,
        features,
        matrix,
        targets,
        trials,
    })
}

fn rule_weights_csv(ctx: &mut Ctx, name: &str, w: &[f64; crate::rules::N_RULES]) -> Result<()> {
    let mut out = csv::Writer::from_writer(ctx.file(name)?);
    out.write_record(["rule", "w"])?;
    for r in RuleId::ALL {
        out.write_record([r.to_string(), w[r.index()].to_string()])?;
    }
    out.flush()?;
    Ok(())
}

fn with_config(mut record: RunRecord, config: &Config) -> Result<RunRecord> {
    record.config = serde_json::to_value(config)?;
    Ok(record)
}

fn execute(command: &Command, ctx: &mut Ctx) -> Result<serde_json::Value> {
    let config = ctx.config.clone();
    let gating = RuleGating::new(&config.library, config.train_config());
    let plan = config.split_plan();
    let lr_grid = config.train.lr_grid.clone();
    let value = match command {
        Command::Ingest(input) => {
            let d = load(input, &config)?;
            d.dataset.write_canonical(ctx.file("menus.csv")?)?;
            write_feature_dump(&d.dataset.menus, d.dataset.rescale_factor, ctx.file("features.csv")?)?;
            d.matrix.write_csv(ctx.file("rule_matrix.csv")?)?;
            serde_json::json!({
                "name": d.dataset.name,
                "n_menus": d.dataset.len(),
                "n_trial_records": d.dataset.trials.as_ref().map(|t| t.len()),
                "rescale_factor": d.dataset.rescale_factor,
                "provenance": d.dataset.provenance,
                "coverage": coverage(&d.matrix, &config.library),
            })
        }
        Command::Fit { input, lr } => {
            let d = load(input, &config)?;
            let rows: Vec<usize> = (0..d.dataset.len()).collect();
            let batch = Batch {
                features: &d.features,
                matrix: &d.matrix,
                rows: &rows,
                targets: &d.targets,
            };
            let mut tc = config.train_config();
            if let Some(lr) = lr {
                tc.learning_rate = *lr;
            }
            let fit = train(&config.library, &batch, &tc)?;
            fit.params.save(&ctx.out.join("params.json"))?;
            ctx.outputs.push("params.json".into());
            let resp = responsibilities(&fit.params, &d.features, &d.matrix);
            rule_weights_csv(ctx, "responsibilities.csv", &resp.w)?;
            serde_json::json!({
                "learning_rate": tc.learning_rate,
                "train_mse": fit.trace.last(),
                "guard_excluded": resp.guard_excluded,
                "concentration": concentration(&resp.w)?,
            })
        }
        Command::Cv {
            input,
            learning_curve: curve,
        } => {
            let d = load(input, &config)?;
            let p = d.problem()?;
            let run = run_cv(&p, &gating, &plan, &lr_grid)?;
            let record = with_config(run.record, &config)?;
            record.write_csv(ctx.file("folds.csv")?)?;
            ctx.json("run_record.json", &record)?;
            let constant = run_cv(&p, &ConstantPredictor, &plan, &lr_grid)?.record;
            let mut curve_points = None;
            if *curve {
                let pts = learning_curve(&p, &gating, &plan, &config.cv.curve_fractions, record.selected_lr)?;
                let mut w = csv::Writer::from_writer(ctx.file("learning_curve.csv")?);
                w.write_record(["fraction", "mean_test_mse", "sd_test_mse", "n_fit"])?;
                for c in &pts {
                    w.write_record([
                        c.fraction.to_string(),
                        c.mean_test_mse.to_string(),
                        c.sd_test_mse.to_string(),
                        c.n_fit.to_string(),
                    ])?;
                }
                w.flush()?;
                curve_points = Some(pts);
            }
            serde_json::json!({
                "selected_lr": record.selected_lr,
                "mean_test_mse": record.mean_test_mse,
                "sd_test_mse": record.sd_test_mse,
                "mean_test_mse_w": record.mean_test_mse_w,
                "constant_mean_test_mse": constant.mean_test_mse,
                "completeness": completeness(record.mean_test_mse, &config.diagnostics.benchmarks).ok(),
                "paired_delta_vs_constant": paired_deltas(&constant, &record)?,
                "learning_curve": curve_points,
            })
        }
        Command::TwoStep { input, mse_params } => {
            let d = load(input, &config)?;
            let fit = fit_two_step(&d.dataset.menus, &d.matrix, &d.features, &config.two_step_config())?;
            let mse_w = match mse_params {
                Some(path) => Some(responsibilities(&GateParams::load(path)?, &d.features, &d.matrix).w),
                None => None,
            };
            fit.write_csv(mse_w.as_ref(), ctx.file("two_step.csv")?)?;
            serde_json::to_value(&fit)?
        }
        Command::Diagnose { input, params } => {
            let d = load(input, &config)?;
            let (report, _) = ident_report(&d.dataset.menus, &d.matrix, &d.features, &config.ident_config())?;
            std::fs::write(ctx.out.join("ident.txt"), report.to_text())?;
            ctx.outputs.push("ident.txt".into());
            let mut w = csv::Writer::from_writer(ctx.file("coverage.csv")?);
            for c in &report.coverage {
                w.serialize(c)?;
            }
            w.flush()?;
            let jacobian = match params {
                Some(path) => Some(jacobian_local_rank(
                    &GateParams::load(path)?,
                    &d.features,
                    &d.matrix,
                    config.two_step.baseline,
                )?),
                None => None,
            };
            serde_json::json!({ "report": report, "jacobian": jacobian })
        }
        Command::Ablate { input, rules } => {
            let d = load(input, &config)?;
            let drop: Vec<RuleId> = if rules.is_empty() {
                config.library.iter().copied().filter(|r| !r.is_attention()).collect()
            } else {
                rules.clone()
            };
            let report = ablate(&d.problem()?, &gating, &drop, &plan, &lr_grid)?;
            report.write_csv(ctx.file("ablation.csv")?)?;
            serde_json::to_value(&report)?
        }
        Command::Crossfit { input, lr, families } => {
            let d = load(input, &config)?;
            let (selection, ks) = if *families {
                (Selection::Families, config.diagnostics.family_k.clone())
            } else {
                (Selection::Rules, config.diagnostics.crossfit_k.clone())
            };
            let lr = lr.unwrap_or(config.train.learning_rate);
            let report = crossfit_topk(&d.problem()?, &gating, &plan, lr, &ks, selection)?;
            report.write_csv(ctx.file("crossfit.csv")?)?;
            serde_json::to_value(&report)?
        }
        Command::Statics {
            input,
            params,
            covariate,
        } => {
            let d = load(input, &config)?;
            let params = GateParams::load(params)?;
            if params.rescale_factor != d.features.rescale_factor {
                return Err(Error::RescaleMismatch {
                    model: params.rescale_factor,
                    features: d.features.rescale_factor,
                });
            }
            let report = comparative_statics(
                &params,
                &d.dataset.menus,
                &d.features,
                &d.matrix,
                *covariate,
                config.diagnostics.bins,
            )?;
            report.write_csv(ctx.file("statics.csv")?)?;
            serde_json::json!({
                "covariate": report.covariate,
                "n_bins": report.n_bins,
                "degenerate": report.degenerate,
                "guard_excluded": report.guard_excluded,
            })
        }
        Command::Restrictiveness { input, lr } => {
            let d = load(input, &config)?;
            let p = d.problem()?;
            let lr = lr.unwrap_or(config.train.learning_rate);
            let perms = config.diagnostics.permutations;
            let model = restrictiveness(&p, &gating, &plan, perms, lr, config.seed)?;
            let constant = restrictiveness(&p, &ConstantPredictor, &plan, perms, lr, config.seed)?;
            let mut w = csv::Writer::from_writer(ctx.file("restrictiveness.csv")?);
            for f in &model.fits {
                w.serialize(f)?;
            }
            w.flush()?;
            serde_json::json!({
                "learning_rate": lr,
                "ratio": model.ratio,
                "constant_ratio": constant.ratio,
            })
        }
        Command::Portability { input, params } => {
            let dataset = Dataset::load(&input.input, input.schema)?;
            let params = GateParams::load(params)?;
            let features = frozen_features(&params, &dataset);
            serde_json::to_value(portability(&params, &dataset, &features, config.activity())?)?
        }
        Command::Synth {
            params,
            cells,
            menus_per_cell,
            trials,
            scale,
        } => {
            let names: Vec<String> = GATE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
            let truth = match params {
                Some(path) => GateParams::load(path)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    random_params(&mut rng, &config.library, &names, *scale)
                }
            };
            let s = generate_synthetic(
                &truth,
                &SynthConfig {
                    n_cells: *cells,
                    menus_per_cell: *menus_per_cell,
                    n_trials: *trials,
                    feature_mode: FeatureMode::Computed,
                    activity: config.activity(),
                    seed: config.seed,
                    ..Default::default()
                },
            )?;
            s.dataset.write_canonical(ctx.file("menus.csv")?)?;
            s.params.save(&ctx.out.join("truth.json"))?;
            ctx.outputs.push("truth.json".into());
            serde_json::json!({ "n_menus": s.dataset.len(), "rescale_factor": s.dataset.rescale_factor })
        }
        Command::Placebo(input) => {
            let d = load(input, &config)?;
            let placebo = placebo_permute(
                &d.matrix,
                &d.dataset.menus,
                config.diagnostics.placebo_strata,
                config.seed,
            )?;
            placebo.write_csv(ctx.file("placebo_rule_matrix.csv")?)?;
            let real = run_cv(&d.problem()?, &gating, &plan, &lr_grid)?.record;
            let fake_problem = Problem::new(&d.features, &placebo, &d.targets, d.trials.as_deref())?;
            let fake = run_cv(&fake_problem, &gating, &plan, &lr_grid)?.record;
            let deltas = paired_deltas(&real, &fake)?;
            serde_json::json!({
                "real_mean_test_mse": real.mean_test_mse,
                "placebo_mean_test_mse": fake.mean_test_mse,
                "mean_paired_delta": crate::linalg::mean(&deltas),
                "paired_deltas": deltas,
            })
        }
    };
    Ok(value)
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    let started_unix = crate::cv::unix_now();
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(t) = cli.threads {
        config.threads = Some(t);
    }
    config.validate()?;
    if let Some(t) = config.threads {
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    std::fs::create_dir_all(&cli.out)?;
    let mut ctx = Ctx {
        config,
        out: cli.out.clone(),
        outputs: Vec::new(),
    };
    let result = execute(&cli.command, &mut ctx)?;
    let name = cli.command.name();
    let record_name = format!("{name}.json");
    let mut outputs = ctx.outputs.clone();
    outputs.push(record_name.clone());
    let record = CommandRecord {
        version: crate::cv::RUN_RECORD_VERSION,
        command: name,
        config: &ctx.config,
        started_unix,
        finished_unix: crate::cv::unix_now(),
        outputs,
        result,
    };
    let f = BufWriter::new(File::create(ctx.out.join(&record_name))?);
    serde_json::to_writer_pretty(f, &record)?;
    Ok(())
}

/// Exit code for an outcome: 0 on success, 2 on validation failure, 1 otherwise.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}

/// Path helper for callers that want the record of a finished command.
pub fn record_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.json"))
}
