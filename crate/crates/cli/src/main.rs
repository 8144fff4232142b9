use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microfp::cluster::{fit_kmeans, Dictionary};
use microfp::dataset::{load_image, stratified_folds};
use microfp::error::{Error, Result};
use microfp::featureio::{build_population, read_features, reduce_population, write_features};
use microfp::features::FeatureSet;
use microfp::fingerprint::FingerprintStack;
use microfp::pipeline::{
    align_labels, cross_validate, evaluate, fingerprint_image, load_manifest_stage, read_dictionary, read_model,
    read_stack, sweep, train_model, write_dictionary, write_evaluation, write_model, write_stack, Prepared,
    RunConfig,
};
use microfp::synth::{write_synth_dataset, SynthParams};

#[derive(Parser)]
#[command(name = "microfp", version, about = "Moment fingerprints of micrographs and their evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic stripes/blobs dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 128)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Extract base features, one MFP1 file per image.
    Extract {
        #[arg(long, value_parser = ["sift", "surf", "patch"])]
        method: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ignore_scale: bool,
        #[arg(long)]
        ignore_orientation: bool,
        #[arg(long, default_value_t = 16)]
        patch_side: usize,
        #[arg(long, default_value_t = 16)]
        stride: usize,
    },
    /// Learn a k-means dictionary from a directory of feature files.
    Cluster {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Reduce each image to at most d features before clustering.
        #[arg(long)]
        population_reduce: bool,
    },
    /// Build the fingerprint stack of a directory of feature files.
    Fingerprint {
        /// Dictionary file; repeat for a multiscale fingerprint.
        #[arg(long)]
        dict: Vec<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
        order: u8,
        #[arg(long)]
        vlad: bool,
        #[arg(long)]
        diag: bool,
        /// Build [H0, H1] instead of a single moment.
        #[arg(long)]
        combine: bool,
        /// Fit dictionaries of these sizes on the features instead of --dict.
        #[arg(long, value_delimiter = ',')]
        multiscale: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Order the rows as in this manifest (default: by file name).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate a classifier on a fingerprint stack.
    Classify {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on all rows and dump the model here (svm, rf).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Apply a dumped model to the stack instead of cross-validating.
        #[arg(long, conflicts_with = "model")]
        apply: Option<PathBuf>,
        #[command(flatten)]
        opts: ClassifyOpts,
    },
    /// Run the configured pipeline end to end and write results.csv.
    Evaluate(ConfigRun),
    /// Label-rate sweep; writes sweep.csv.
    Sweep(ConfigRun),
}

#[derive(Args)]
struct ClassifyOpts {
    #[arg(long, default_value = "svm", value_parser = ["svm", "rf", "kmeans", "spectral", "laplace", "poisson"])]
    method: String,
    #[arg(long, default_value = "chi2", value_parser = ["linear", "chi2"])]
    kernel: String,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    trees: usize,
    #[arg(long, default_value_t = 10)]
    max_depth: usize,
    #[arg(long, default_value_t = 10)]
    knn: usize,
    #[arg(long, default_value_t = 0.05)]
    label_rate: f64,
    #[arg(long, default_value = "holdout", value_parser = ["holdout", "all-unlabelled"])]
    ssl_score: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    pca_per_fold: bool,
}

#[derive(Args)]
struct ConfigRun {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    dict_per_fold: bool,
    #[arg(long)]
    pca_per_fold: bool,
    #[arg(long, value_parser = ["holdout", "all-unlabelled"])]
    ssl_score: Option<String>,
}

impl ConfigRun {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(m) = &self.manifest {
            set("manifest", m.display().to_string())?;
        }
        if let Some(o) = &self.out {
            set("out", o.display().to_string())?;
        }
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(f) = self.folds {
            set("folds", f.to_string())?;
        }
        if self.dict_per_fold {
            set("dict_per_fold", "true".into())?;
        }
        if self.pca_per_fold {
            set("pca_per_fold", "true".into())?;
        }
        if let Some(s) = &self.ssl_score {
            set("ssl_score", s.clone())?;
        }
        Ok(cfg)
    }
}

/// Feature files of a directory in file-name order.
fn read_feature_dir(dir: &Path) -> Result<Vec<FeatureSet>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mfp1"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no .mfp1 feature files", dir.display())));
    }
    paths.iter().map(|p| read_features(p)).collect()
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            out,
            per_class,
            side,
            seed,
            noise,
        } => {
            let m = stage("synth", write_synth_dataset(&out, &SynthParams { per_class, side, seed, noise }))?;
            println!("wrote {} images and {}", m.len(), out.join("manifest.csv").display());
        }
        Cmd::Extract {
            method,
            manifest,
            out,
            ignore_scale,
            ignore_orientation,
            patch_side,
            stride,
        } => {
            let cfg = RunConfig {
                descriptor: method,
                manifest: Some(manifest),
                ignore_scale,
                ignore_orientation,
                patch_side,
                patch_stride: stride,
                ..RunConfig::default()
            };
            let manifest = load_manifest_stage(&cfg)?;
            let extractor = cfg.extractor()?.expect("descriptor restricted by clap");
            stage("extract", fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e }))?;
            let mut total = 0;
            for e in &manifest.entries {
                let id = e.id();
                let mut fs = stage("extract", load_image(&e.path).and_then(|img| extractor.extract(&img)))?;
                fs.image_id = id.clone();
                total += fs.len();
                stage("extract", write_features(&out.join(format!("{id}.mfp1")), &fs))?;
            }
            println!("extracted {total} features from {} images", manifest.len());
        }
        Cmd::Cluster {
            features,
            k,
            seed,
            out,
            population_reduce,
        } => {
            let sets = stage("cluster", read_feature_dir(&features))?;
            let sets = if population_reduce {
                stage("cluster", sets.iter().map(|s| reduce_population(s).map(|(r, _)| r)).collect::<Result<Vec<_>>>())?
            } else {
                sets
            };
            let pop = stage("cluster", build_population(&sets))?;
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let dict = stage("cluster", fit_kmeans(&pop, &cfg.kmeans_params(k)))?;
            stage("cluster", write_dictionary(&out, &dict))?;
            println!("K = {k} dictionary from {} features, inertia {:.6e}", pop.len(), dict.inertia);
        }
        Cmd::Fingerprint {
            dict,
            features,
            order,
            vlad,
            diag,
            combine,
            multiscale,
            seed,
            manifest,
            out,
        } => {
            let mut sets = stage("fingerprint", read_feature_dir(&features))?;
            if let Some(m) = manifest {
                let cfg = RunConfig {
                    manifest: Some(m),
                    ..RunConfig::default()
                };
                let man = load_manifest_stage(&cfg)?;
                let mut ordered = Vec::with_capacity(man.len());
                for id in man.ids() {
                    let at = sets
                        .iter()
                        .position(|s| s.image_id == id)
                        .ok_or_else(|| Error::Manifest(format!("no feature file for {id}")).in_stage("fingerprint"))?;
                    ordered.push(sets.swap_remove(at));
                }
                sets = ordered;
            }
            let cfg = RunConfig {
                order,
                vlad,
                diag,
                combine,
                seed,
                ..RunConfig::default()
            };
            let dicts: Vec<Dictionary> = if !multiscale.is_empty() {
                let pop = stage("cluster", build_population(&sets))?;
                stage(
                    "cluster",
                    multiscale.iter().map(|&k| fit_kmeans(&pop, &cfg.kmeans_params(k))).collect::<Result<Vec<_>>>(),
                )?
            } else if !dict.is_empty() {
                stage("fingerprint", dict.iter().map(|p| read_dictionary(p)).collect::<Result<Vec<_>>>())?
            } else {
                return Err(Error::Config("fingerprint needs --dict or --multiscale".into()));
            };
            let fps = stage(
                "fingerprint",
                sets.iter().map(|s| fingerprint_image(&cfg, s, &dicts)).collect::<Result<Vec<_>>>(),
            )?;
            let stack = stage("fingerprint", FingerprintStack::from_fingerprints(fps))?;
            stage("fingerprint", write_stack(&out, &stack))?;
            println!("{} fingerprints of length {} ({})", stack.rows(), stack.n, stack.recipe);
        }
        Cmd::Classify {
            stack,
            manifest,
            out,
            model,
            apply,
            opts,
        } => {
            let mut cfg = RunConfig {
                manifest: Some(manifest),
                out,
                seed: opts.seed,
                folds: opts.folds,
                methods: vec![opts.method.clone()],
                kernel: opts.kernel,
                c: opts.c,
                gamma: opts.gamma,
                trees: opts.trees,
                max_depth: opts.max_depth,
                knn: opts.knn,
                label_rate: opts.label_rate,
                pca: opts.pca,
                pca_per_fold: opts.pca_per_fold,
                ..RunConfig::default()
            };
            cfg.set("ssl_score", &opts.ssl_score)?;
            let manifest = load_manifest_stage(&cfg)?;
            let stack = stage("classify", read_stack(&stack))?;
            if let Some(path) = apply {
                let dump = stage("classify", read_model(&path))?;
                let pred = stage("classify", dump.predict(&stack))?;
                let mut csv = String::from("id,class\n");
                for (id, p) in stack.ids.iter().zip(&pred) {
                    csv.push_str(&format!("{id},{}\n", dump.class_names[*p]));
                }
                fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
                let p = cfg.out.join("predictions.csv");
                fs::write(&p, csv).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                println!("wrote {}", p.display());
                return Ok(());
            }
            let labels = stage("classify", align_labels(&stack, &manifest))?;
            let folds = stage("classify", stratified_folds(&labels, cfg.folds, cfg.seed))?;
            let prep = Prepared {
                labels,
                folds,
                stacks: vec![stack],
                manifest,
            };
            let results = cross_validate(&cfg, &prep)?;
            stage("write", write_evaluation(&cfg, &results))?;
            for r in &results {
                println!("{} {}: {:.4} ± {:.4}", r.recipe, r.method, r.mean, r.std);
            }
            if let Some(path) = model {
                let method = cfg.method(&opts.method)?;
                let dump = stage(
                    "classify",
                    train_model(&cfg, &method, &prep.stacks[0], &prep.labels, &prep.manifest.class_names),
                )?;
                stage("classify", write_model(&path, &dump))?;
                println!("model written to {}", path.display());
            }
        }
        Cmd::Evaluate(c) => {
            let cfg = c.resolve()?;
            eprint!("{}", cfg.echo());
            for r in evaluate(&cfg)? {
                println!("{} {}: {:.4} ± {:.4}", r.recipe, r.method, r.mean, r.std);
            }
        }
        Cmd::Sweep(c) => {
            let cfg = c.resolve()?;
            eprint!("{}", cfg.echo());
            for r in sweep(&cfg)? {
                if r.valid {
                    println!("p = {} {}: {:.4} ± {:.4}", r.p, r.method, r.mean, r.std);
                } else {
                    println!("p = {} {}: invalid (too few labels)", r.p, r.method);
                }
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MICROFP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MICROFP_THREADS = {v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|_| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
