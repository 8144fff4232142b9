//! Run configuration, cached pipeline stages and on-disk artifacts.
//!
//! Stages run in order `extract → cluster → fingerprint → evaluate`. Every
//! intermediate artifact lives under `<out>/cache/<stage>/<sha256>.mfp1`,
//! where the hash covers the stage inputs (image bytes, upstream keys and
//! the parameters of the stage), so reruns reuse earlier work and no
//! artifact is ever rewritten.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{fit_kmeans, Dictionary, KMeansParams};
use crate::dataset::{load_image, load_manifest, stratified_folds, Manifest};
use crate::error::{Error, Result};
use crate::eval::{
    label_rate_sweep, run_cv, run_cv_per_fold, write_results_csv, write_sweep_csv, CvOptions, CvResult, Method,
    Protocol, SslScore, SweepRow, DEFAULT_LABEL_RATES,
};
use crate::featureio::{build_population, read_file, reduce_population, FeatureFile};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};
use crate::fingerprint::{cnn_flatten, cnn_maxpool, combine, moment_fingerprint, multiscale, FingerprintStack, Moment, Recipe};
use crate::graph::DEFAULT_KNN;
use crate::keypoints::{Extractor, PatchGridSpec, SiftParams, SurfParams};
use crate::reduce::{fit_pca, transform, PcaModel};
use crate::supervised::{ecoc_train, forest_train, EcocModel, ForestModel, ForestParams, Kernel};

/// How precomputed CNN tensors become fingerprints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CnnMode {
    /// Flatten the whole `(d1, d2, d)` tensor.
    Flatten,
    /// Channel-wise spatial maximum.
    Maxpool,
    /// Treat the `d1·d2` spatial slices as base features for the moments.
    Features,
}

/// Every tunable of a run. Parsed from `key = value` lines; unknown keys are
/// rejected. [`RunConfig::echo`] prints the complete resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub folds: usize,

    /// `sift`, `surf`, `patch`, or `files` for precomputed feature files.
    pub descriptor: String,
    /// Directory of `<image id>.mfp1` files when `descriptor = files`.
    pub features: Option<PathBuf>,
    pub cnn: Option<CnnMode>,
    pub ignore_scale: bool,
    pub ignore_orientation: bool,
    pub sift_contrast: f32,
    pub sift_edge: f32,
    pub sift_double: bool,
    pub surf_threshold: f32,
    pub patch_side: usize,
    pub patch_stride: usize,

    /// Dictionary sizes; more than one gives a multiscale fingerprint.
    pub k: Vec<usize>,
    pub kmeans_n_init: usize,
    pub kmeans_max_iter: usize,
    pub population_reduce: bool,
    pub dict_per_fold: bool,

    pub order: u8,
    pub vlad: bool,
    pub diag: bool,
    /// Build `[H0, H1]` instead of a single moment.
    pub combine: bool,

    pub pca: Option<usize>,
    pub pca_per_fold: bool,

    pub methods: Vec<String>,
    pub kernel: String,
    pub c: f64,
    pub gamma: Option<f64>,
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mtry: Option<usize>,
    pub knn: usize,
    pub label_rate: f64,
    pub ssl_score: SslScore,

    pub rates: Vec<f64>,
    pub reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sift = SiftParams::default();
        let forest = ForestParams::default();
        Self {
            manifest: None,
            out: PathBuf::from("out"),
            seed: 0,
            folds: 10,
            descriptor: "sift".into(),
            features: None,
            cnn: None,
            ignore_scale: false,
            ignore_orientation: false,
            sift_contrast: sift.contrast_threshold,
            sift_edge: sift.edge_threshold,
            sift_double: sift.double_image,
            surf_threshold: SurfParams::default().threshold,
            patch_side: PatchGridSpec::default().patch_side,
            patch_stride: PatchGridSpec::default().stride,
            k: vec![10],
            kmeans_n_init: 10,
            kmeans_max_iter: 300,
            population_reduce: false,
            dict_per_fold: false,
            order: 0,
            vlad: false,
            diag: false,
            combine: false,
            pca: None,
            pca_per_fold: false,
            methods: vec!["svm".into()],
            kernel: "chi2".into(),
            c: crate::supervised::svm::DEFAULT_C,
            gamma: None,
            trees: forest.n_trees,
            max_depth: forest.max_depth,
            min_leaf: forest.min_leaf,
            mtry: None,
            knn: DEFAULT_KNN,
            label_rate: 0.05,
            ssl_score: SslScore::Holdout,
            rates: DEFAULT_LABEL_RATES.to_vec(),
            reps: 3,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {what}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, what))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, v, "a boolean")),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        parse_num(key, v, what).map(Some)
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Vec<T>> {
    let out = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s, what))
        .collect::<Result<Vec<T>>>()?;
    if out.is_empty() {
        return Err(bad(key, v, what));
    }
    Ok(out)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(T::to_string).unwrap_or_else(|| "none".into())
}

impl RunConfig {
    /// Parse `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, found {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("configuration: "))))?;
        }
        Ok(cfg)
    }

    /// Read a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.manifest.as_mut() {
            anchor(m);
        }
        if let Some(f) = cfg.features.as_mut() {
            anchor(f);
        }
        if text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("out")) {
            anchor(&mut cfg.out);
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = parse_num(key, v, "a non-negative integer")?,
            "folds" => self.folds = parse_num(key, v, "an integer")?,
            "descriptor" => match v {
                "sift" | "surf" | "patch" | "files" => self.descriptor = v.into(),
                _ => return Err(bad(key, v, "sift, surf, patch or files")),
            },
            "features" => self.features = (!v.is_empty()).then(|| PathBuf::from(v)),
            "cnn" => {
                self.cnn = match v {
                    "" | "none" => None,
                    "flatten" => Some(CnnMode::Flatten),
                    "maxpool" => Some(CnnMode::Maxpool),
                    "features" => Some(CnnMode::Features),
                    _ => return Err(bad(key, v, "flatten, maxpool, features or none")),
                }
            }
            "ignore_scale" => self.ignore_scale = parse_bool(key, v)?,
            "ignore_orientation" => self.ignore_orientation = parse_bool(key, v)?,
            "sift_contrast" => self.sift_contrast = parse_num(key, v, "a number")?,
            "sift_edge" => self.sift_edge = parse_num(key, v, "a number")?,
            "sift_double" => self.sift_double = parse_bool(key, v)?,
            "surf_threshold" => self.surf_threshold = parse_num(key, v, "a number")?,
            "patch_side" => self.patch_side = parse_num(key, v, "an integer")?,
            "patch_stride" => self.patch_stride = parse_num(key, v, "an integer")?,
            "k" => self.k = parse_list(key, v, "comma-separated cluster counts")?,
            "kmeans_n_init" => self.kmeans_n_init = parse_num(key, v, "an integer")?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse_num(key, v, "an integer")?,
            "population_reduce" => self.population_reduce = parse_bool(key, v)?,
            "dict_per_fold" => self.dict_per_fold = parse_bool(key, v)?,
            "order" => match v {
                "0" | "1" | "2" => self.order = v.parse().expect("digit"),
                _ => return Err(bad(key, v, "0, 1 or 2")),
            },
            "vlad" => self.vlad = parse_bool(key, v)?,
            "diag" => self.diag = parse_bool(key, v)?,
            "combine" => self.combine = parse_bool(key, v)?,
            "pca" => self.pca = parse_opt(key, v, "an integer or none")?,
            "pca_per_fold" => self.pca_per_fold = parse_bool(key, v)?,
            "methods" | "method" => {
                let ms: Vec<String> = parse_list(key, v, "comma-separated method names")?;
                for m in &ms {
                    if !["svm", "rf", "kmeans", "spectral", "laplace", "poisson"].contains(&m.as_str()) {
                        return Err(bad(key, m, "svm, rf, kmeans, spectral, laplace or poisson"));
                    }
                }
                self.methods = ms;
            }
            "kernel" => match v {
                "linear" | "chi2" => self.kernel = v.into(),
                _ => return Err(bad(key, v, "linear or chi2")),
            },
            "c" => self.c = parse_num(key, v, "a number")?,
            "gamma" => self.gamma = parse_opt(key, v, "a number or none")?,
            "trees" => self.trees = parse_num(key, v, "an integer")?,
            "max_depth" => self.max_depth = parse_num(key, v, "an integer")?,
            "min_leaf" => self.min_leaf = parse_num(key, v, "an integer")?,
            "mtry" => self.mtry = parse_opt(key, v, "an integer or none")?,
            "knn" => self.knn = parse_num(key, v, "an integer")?,
            "label_rate" => self.label_rate = parse_num(key, v, "a number")?,
            "ssl_score" => self.ssl_score = v.parse()?,
            "rates" => self.rates = parse_list(key, v, "comma-separated label rates")?,
            "reps" => self.reps = parse_num(key, v, "an integer")?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The full configuration as `key = value` lines, parseable by
    /// [`RunConfig::parse`].
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let cnn = match self.cnn {
            None => "none",
            Some(CnnMode::Flatten) => "flatten",
            Some(CnnMode::Maxpool) => "maxpool",
            Some(CnnMode::Features) => "features",
        };
        let lines = [
            ("manifest", path(&self.manifest)),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("folds", self.folds.to_string()),
            ("descriptor", self.descriptor.clone()),
            ("features", path(&self.features)),
            ("cnn", cnn.into()),
            ("ignore_scale", self.ignore_scale.to_string()),
            ("ignore_orientation", self.ignore_orientation.to_string()),
            ("sift_contrast", self.sift_contrast.to_string()),
            ("sift_edge", self.sift_edge.to_string()),
            ("sift_double", self.sift_double.to_string()),
            ("surf_threshold", self.surf_threshold.to_string()),
            ("patch_side", self.patch_side.to_string()),
            ("patch_stride", self.patch_stride.to_string()),
            ("k", join(&self.k)),
            ("kmeans_n_init", self.kmeans_n_init.to_string()),
            ("kmeans_max_iter", self.kmeans_max_iter.to_string()),
            ("population_reduce", self.population_reduce.to_string()),
            ("dict_per_fold", self.dict_per_fold.to_string()),
            ("order", self.order.to_string()),
            ("vlad", self.vlad.to_string()),
            ("diag", self.diag.to_string()),
            ("combine", self.combine.to_string()),
            ("pca", opt(&self.pca)),
            ("pca_per_fold", self.pca_per_fold.to_string()),
            ("methods", self.methods.join(",")),
            ("kernel", self.kernel.clone()),
            ("c", self.c.to_string()),
            ("gamma", opt(&self.gamma)),
            ("trees", self.trees.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("min_leaf", self.min_leaf.to_string()),
            ("mtry", opt(&self.mtry)),
            ("knn", self.knn.to_string()),
            ("label_rate", self.label_rate.to_string()),
            ("ssl_score", self.ssl_score.to_string()),
            ("rates", join(&self.rates)),
            ("reps", self.reps.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn extractor(&self) -> Result<Option<Extractor>> {
        Ok(match self.descriptor.as_str() {
            "sift" => Some(Extractor::Sift(SiftParams {
                contrast_threshold: self.sift_contrast,
                edge_threshold: self.sift_edge,
                double_image: self.sift_double,
                ignore_scale: self.ignore_scale,
                ignore_orientation: self.ignore_orientation,
                ..SiftParams::default()
            })),
            "surf" => Some(Extractor::Surf(SurfParams {
                threshold: self.surf_threshold,
                ignore_scale: self.ignore_scale,
                ignore_orientation: self.ignore_orientation,
                ..SurfParams::default()
            })),
            "patch" => Some(Extractor::Patch(PatchGridSpec {
                patch_side: self.patch_side,
                stride: self.patch_stride,
            })),
            "files" => None,
            other => return Err(Error::Config(format!("unknown descriptor {other:?}"))),
        })
    }

    pub fn moment(&self) -> Moment {
        match self.order {
            0 => Moment::H0,
            1 => Moment::H1 { vlad: self.vlad },
            _ => Moment::H2 {
                vlad: self.vlad,
                diagonal: self.diag,
            },
        }
    }

    pub fn kmeans_params(&self, k: usize) -> KMeansParams {
        KMeansParams {
            n_init: self.kmeans_n_init,
            max_iter: self.kmeans_max_iter,
            ..KMeansParams::new(k, self.seed)
        }
    }

    /// Resolve one method name into its parameterised form.
    pub fn method(&self, name: &str) -> Result<Method> {
        let kernel = match self.kernel.as_str() {
            "linear" => Kernel::Linear,
            _ => Kernel::Chi2 { gamma: self.gamma },
        };
        Ok(match name {
            "svm" => Method::Svm { kernel, c: self.c },
            "rf" => Method::Rf(ForestParams {
                n_trees: self.trees,
                max_depth: self.max_depth,
                min_leaf: self.min_leaf,
                mtry: self.mtry,
                bootstrap: true,
                seed: self.seed,
            }),
            "kmeans" => Method::Kmeans,
            "spectral" => Method::Spectral { knn: self.knn },
            "laplace" => Method::Laplace { knn: self.knn },
            "poisson" => Method::Poisson { knn: self.knn },
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| self.method(m)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.manifest.is_none() {
            return Err(Error::Config("no manifest given".into()));
        }
        if self.descriptor == "files" && self.features.is_none() {
            return Err(Error::Config("descriptor = files needs a features directory".into()));
        }
        if self.cnn.is_some() && self.descriptor != "files" {
            return Err(Error::Config("cnn modes need descriptor = files".into()));
        }
        if self.k.contains(&0) {
            return Err(Error::Config("cluster counts must be positive".into()));
        }
        if self.pca_per_fold && self.pca.is_none() {
            return Err(Error::Config("pca_per_fold needs pca = <rank>".into()));
        }
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            return Err(Error::Config(format!("label_rate {} outside (0, 1]", self.label_rate)));
        }
        Ok(())
    }
}

/// Hex SHA-256 over length-prefixed parts.
pub fn content_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Write `bytes` to `path` unless it already exists. The file appears
/// atomically through a rename.
fn write_once(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// artifacts

pub fn write_dictionary(path: &Path, dict: &Dictionary) -> Result<()> {
    let f = FeatureFile::matrix(format!("centres:{}", dict.kind.tag()), &dict.to_matrix());
    write_new(path, &f.encode()?)
}

pub fn read_dictionary(path: &Path) -> Result<Dictionary> {
    let f = read_file(path)?;
    let tag = f
        .kind
        .strip_prefix("centres:")
        .ok_or_else(|| Error::Format(format!("{}: kind {:?} is not a dictionary", path.display(), f.kind)))?;
    let kind: DescriptorKind = tag.parse()?;
    let m = f.into_matrix()?;
    Dictionary::new(m.as_slice().iter().map(|&v| v as f64).collect(), m.rows(), m.cols(), kind)
}

#[derive(Debug, Serialize, Deserialize)]
struct StackSidecar {
    ids: Vec<String>,
    recipe: Recipe,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write an `N × n` stack as f32 MFP1 with a `<path>.json` sidecar holding
/// ids and recipe.
pub fn write_stack(path: &Path, stack: &FingerprintStack) -> Result<()> {
    write_new(path, &stack_file(stack)?.encode()?)?;
    write_new(&sidecar_path(path), &stack_sidecar(stack)?)
}

fn stack_file(stack: &FingerprintStack) -> Result<FeatureFile> {
    let m = FeatureMatrix::new(stack.rows(), stack.n, stack.values.iter().map(|&v| v as f32).collect())?;
    Ok(FeatureFile::matrix(format!("stack:{}", stack.recipe.descriptor), &m))
}

fn stack_sidecar(stack: &FingerprintStack) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(&StackSidecar {
        ids: stack.ids.clone(),
        recipe: stack.recipe.clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn read_stack(path: &Path) -> Result<FingerprintStack> {
    let f = read_file(path)?;
    if !f.kind.starts_with("stack:") {
        return Err(Error::Format(format!("{}: kind {:?} is not a stack", path.display(), f.kind)));
    }
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: StackSidecar =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let m = f.into_matrix()?;
    FingerprintStack::from_rows(meta.ids, m.cols(), m.as_slice().iter().map(|&v| v as f64).collect(), meta.recipe)
}

/// A trained supervised classifier with everything needed to apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub class_names: Vec<String>,
    pub recipe: Recipe,
    pub pca: Option<PcaModel>,
    pub classifier: Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Classifier {
    Svm(EcocModel),
    Rf(ForestModel),
}

impl Classifier {
    fn type_name(&self) -> &'static str {
        match self {
            Classifier::Svm(_) => "svm",
            Classifier::Rf(_) => "rf",
        }
    }
}

impl ModelDump {
    /// Predict class indices for the rows of a stack with the dump's recipe.
    pub fn predict(&self, stack: &FingerprintStack) -> Result<Vec<usize>> {
        let base = match &self.pca {
            Some(m) if stack.n == m.n => transform(m, stack)?,
            _ => stack.clone(),
        };
        match &self.classifier {
            Classifier::Svm(m) => m.predict_rows(&base.values, base.n),
            Classifier::Rf(m) => m.predict_rows(&base.values),
        }
    }
}

/// Model dump: JSON packed as an MFP1 byte blob of kind `model:<type>`.
pub fn write_model(path: &Path, model: &ModelDump) -> Result<()> {
    let json = serde_json::to_vec(model).map_err(|e| Error::Format(e.to_string()))?;
    let f = FeatureFile::blob(format!("model:{}", model.classifier.type_name()), &json);
    write_new(path, &f.encode()?)
}

pub fn read_model(path: &Path) -> Result<ModelDump> {
    let f = read_file(path)?;
    if !f.kind.starts_with("model:") || f.shape.len() != 1 {
        return Err(Error::Format(format!("{}: kind {:?} is not a model dump", path.display(), f.kind)));
    }
    let bytes = f.blob_bytes();
    let end = bytes.iter().rposition(|&b| b != b' ').map_or(0, |i| i + 1);
    serde_json::from_slice(&bytes[..end]).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Train a supervised method on every row of `stack`.
pub fn train_model(
    cfg: &RunConfig,
    method: &Method,
    stack: &FingerprintStack,
    labels: &[usize],
    class_names: &[String],
) -> Result<ModelDump> {
    let pca = match cfg.pca {
        Some(r) => Some(fit_pca(stack, r)?),
        None => None,
    };
    let base = match &pca {
        Some(m) => transform(m, stack)?,
        None => stack.clone(),
    };
    let n_classes = class_names.len();
    let classifier = match method {
        Method::Svm { kernel, c } => Classifier::Svm(ecoc_train(&base.values, base.n, labels, n_classes, *kernel, *c)?),
        Method::Rf(p) => Classifier::Rf(forest_train(&base.values, base.n, labels, n_classes, p)?),
        other => return Err(Error::invalid(format!("{} produces no reusable model", other.name()))),
    };
    Ok(ModelDump {
        class_names: class_names.to_vec(),
        recipe: stack.recipe.clone(),
        pca,
        classifier,
    })
}

// ---------------------------------------------------------------------------
// stages

/// Base features of every manifest entry, in manifest order, with the cache
/// key of each.
pub struct ExtractedFeatures {
    pub sets: Vec<FeatureSet>,
    pub keys: Vec<String>,
}

fn cache_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out.join("cache").join(stage)
}

fn load_or_extract(path: &Path, id: &str, extractor: &Extractor, params: &[u8], cache: &Path) -> Result<(FeatureSet, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let key = content_key(&[b"extract", &bytes, params]);
    let file = cache.join(format!("{key}.mfp1"));
    if file.exists() {
        return Ok((read_file(&file)?.into_feature_set(id)?, key));
    }
    let img = load_image(path)?;
    let mut fs = extractor.extract(&img)?;
    fs.image_id = id.to_string();
    if fs.is_empty() {
        return Err(Error::invalid(format!("{id}: the extractor found no features")));
    }
    write_once(&file, &FeatureFile::matrix(fs.kind.tag(), &fs.features).encode()?)?;
    // reload so cached and fresh runs see identical f32 values
    Ok((read_file(&file)?.into_feature_set(id)?, key))
}

pub fn extract_stage(cfg: &RunConfig, manifest: &Manifest) -> Result<ExtractedFeatures> {
    let run = || -> Result<ExtractedFeatures> {
        let Some(extractor) = cfg.extractor()? else {
            let dir = cfg.features.as_ref().ok_or_else(|| Error::Config("no features directory".into()))?;
            let loaded = manifest
                .entries
                .par_iter()
                .map(|e| {
                    let id = e.id();
                    let path = dir.join(format!("{id}.mfp1"));
                    let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
                    let set = FeatureFile::decode(&bytes)?.into_feature_set(id)?;
                    Ok((set, content_key(&[b"files", &bytes])))
                })
                .collect::<Result<Vec<_>>>()?;
            let (sets, keys) = loaded.into_iter().unzip();
            return Ok(ExtractedFeatures { sets, keys });
        };
        let params = serde_json::to_vec(&extractor).map_err(|e| Error::Format(e.to_string()))?;
        let cache = cache_dir(cfg, "features");
        let done = manifest
            .entries
            .par_iter()
            .map(|e| load_or_extract(&e.path, &e.id(), &extractor, &params, &cache))
            .collect::<Result<Vec<_>>>()?;
        let (sets, keys) = done.into_iter().unzip();
        Ok(ExtractedFeatures { sets, keys })
    };
    run().map_err(|e| e.in_stage("extract"))
}

/// Fit (or load from cache) a dictionary of size `k` on the features of the
/// images in `subset`.
pub fn cluster_stage(cfg: &RunConfig, feats: &ExtractedFeatures, subset: &[usize], k: usize) -> Result<(Dictionary, String)> {
    let run = || -> Result<(Dictionary, String)> {
        let params = cfg.kmeans_params(k);
        let mut parts: Vec<Vec<u8>> = vec![
            b"cluster".to_vec(),
            serde_json::to_vec(&params).map_err(|e| Error::Format(e.to_string()))?,
            vec![u8::from(cfg.population_reduce)],
        ];
        parts.extend(subset.iter().map(|&i| feats.keys[i].as_bytes().to_vec()));
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        let key = content_key(&refs);
        let file = cache_dir(cfg, "dict").join(format!("{key}.mfp1"));
        if !file.exists() {
            let chosen: Vec<FeatureSet> = subset
                .par_iter()
                .map(|&i| {
                    let s = &feats.sets[i];
                    if cfg.population_reduce {
                        reduce_population(s).map(|(r, _)| r)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let pop = build_population(&chosen)?;
            log::info!("clustering {} features of {} images into K = {k}", pop.len(), subset.len());
            let dict = fit_kmeans(&pop, &params)?;
            let f = FeatureFile::matrix(format!("centres:{}", dict.kind.tag()), &dict.to_matrix());
            write_once(&file, &f.encode()?)?;
        }
        Ok((read_dictionary(&file)?, key))
    };
    run().map_err(|e| e.in_stage("cluster"))
}

/// Fingerprint of one image from its features and the dictionaries (one per
/// cluster count).
pub fn fingerprint_image(cfg: &RunConfig, fs: &FeatureSet, dicts: &[Dictionary]) -> Result<crate::fingerprint::Fingerprint> {
    let per_k = |moment: Moment| -> Result<crate::fingerprint::Fingerprint> {
        let fps = dicts
            .iter()
            .map(|d| moment_fingerprint(fs, d, moment))
            .collect::<Result<Vec<_>>>()?;
        if fps.len() == 1 {
            Ok(fps.into_iter().next().expect("one"))
        } else {
            multiscale(&fps)
        }
    };
    if cfg.combine {
        combine(&per_k(Moment::H0)?, &per_k(Moment::H1 { vlad: cfg.vlad })?)
    } else {
        per_k(cfg.moment())
    }
}

fn fingerprint_options(cfg: &RunConfig) -> String {
    format!("order={} vlad={} diag={} combine={}", cfg.order, cfg.vlad, cfg.diag, cfg.combine)
}

/// Build (or load) the fingerprint stack of every image. The returned stack
/// is always the one read back from disk.
pub fn fingerprint_stage(cfg: &RunConfig, feats: &ExtractedFeatures, dicts: &[(Dictionary, String)]) -> Result<FingerprintStack> {
    let run = || -> Result<FingerprintStack> {
        let opts = fingerprint_options(cfg);
        let mut parts: Vec<&[u8]> = vec![b"fingerprint", opts.as_bytes()];
        parts.extend(dicts.iter().map(|(_, k)| k.as_bytes()));
        parts.extend(feats.keys.iter().map(String::as_bytes));
        let key = content_key(&parts);
        let file = cache_dir(cfg, "stack").join(format!("{key}.mfp1"));
        if !file.exists() || !sidecar_path(&file).exists() {
            let ds: Vec<Dictionary> = dicts.iter().map(|(d, _)| d.clone()).collect();
            let fps = feats
                .sets
                .par_iter()
                .map(|s| fingerprint_image(cfg, s, &ds))
                .collect::<Result<Vec<_>>>()?;
            let stack = FingerprintStack::from_fingerprints(fps)?;
            write_once(&sidecar_path(&file), &stack_sidecar(&stack)?)?;
            write_once(&file, &stack_file(&stack)?.encode()?)?;
        }
        read_stack(&file)
    };
    run().map_err(|e| e.in_stage("fingerprint"))
}

fn cnn_stack(cfg: &RunConfig, manifest: &Manifest, mode: CnnMode) -> Result<FingerprintStack> {
    let dir = cfg.features.as_ref().ok_or_else(|| Error::Config("no features directory".into()))?;
    let fps = manifest
        .entries
        .par_iter()
        .map(|e| {
            let id = e.id();
            let f = read_file(&dir.join(format!("{id}.mfp1")))?;
            let source = f.kind.strip_prefix("cnn:").unwrap_or(&f.kind).to_string();
            let t = f.into_tensor()?;
            Ok(match mode {
                CnnMode::Maxpool => cnn_maxpool(&id, &source, &t),
                _ => cnn_flatten(&id, &source, &t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FingerprintStack::from_fingerprints(fps)
}

/// Labels of `stack` rows looked up by image id in the manifest.
pub fn align_labels(stack: &FingerprintStack, manifest: &Manifest) -> Result<Vec<usize>> {
    let by_id: HashMap<String, usize> = manifest.entries.iter().map(|e| (e.id(), e.label)).collect();
    stack
        .ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Manifest(format!("stack row {id:?} is not in the manifest")))
        })
        .collect()
}

/// Everything the evaluation needs: the stacks (one, or one per fold), the
/// labels and the fold plan.
pub struct Prepared {
    pub manifest: Manifest,
    pub labels: Vec<usize>,
    pub folds: crate::dataset::FoldPlan,
    pub stacks: Vec<FingerprintStack>,
}

pub fn load_manifest_stage(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.manifest.as_ref().ok_or_else(|| Error::Config("no manifest given".into()).in_stage("manifest"))?;
    load_manifest(path).map_err(|e| e.in_stage("manifest"))
}

/// Run extraction, clustering and fingerprinting.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let manifest = load_manifest_stage(cfg)?;
    let labels = manifest.labels();
    let folds = stratified_folds(&labels, cfg.folds, cfg.seed).map_err(|e| e.in_stage("folds"))?;
    let stacks = match cfg.cnn {
        Some(CnnMode::Flatten) | Some(CnnMode::Maxpool) => {
            vec![cnn_stack(cfg, &manifest, cfg.cnn.expect("matched")).map_err(|e| e.in_stage("fingerprint"))?]
        }
        _ => {
            let feats = extract_stage(cfg, &manifest)?;
            let all: Vec<usize> = (0..manifest.len()).collect();
            let subsets: Vec<Vec<usize>> = if cfg.dict_per_fold {
                (0..folds.n_folds).map(|f| folds.train_indices(f)).collect()
            } else {
                vec![all]
            };
            subsets
                .iter()
                .map(|sub| {
                    let dicts = cfg
                        .k
                        .iter()
                        .map(|&k| cluster_stage(cfg, &feats, sub, k))
                        .collect::<Result<Vec<_>>>()?;
                    fingerprint_stage(cfg, &feats, &dicts)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(Prepared {
        manifest,
        labels,
        folds,
        stacks,
    })
}

/// Apply whole-stack PCA when configured (not per fold).
fn reduce_stacks(cfg: &RunConfig, stacks: Vec<FingerprintStack>) -> Result<Vec<FingerprintStack>> {
    match cfg.pca {
        Some(r) if !cfg.pca_per_fold => stacks
            .iter()
            .map(|s| transform(&fit_pca(s, r)?, s))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("pca")),
        _ => Ok(stacks),
    }
}

/// Cross-validate every configured method on prepared stacks.
pub fn cross_validate(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<CvResult>> {
    let stacks = reduce_stacks(cfg, prep.stacks.clone())?;
    let opts = CvOptions {
        seed: cfg.seed,
        label_rate: cfg.label_rate,
        ssl_score: cfg.ssl_score,
        pca_per_fold: if cfg.pca_per_fold { cfg.pca } else { None },
    };
    let n_classes = prep.manifest.n_classes();
    cfg.methods()?
        .iter()
        .map(|m| {
            let r = if stacks.len() == 1 {
                run_cv(&stacks[0], &prep.labels, n_classes, m, &prep.folds, &opts)
            } else {
                run_cv_per_fold(&stacks, &prep.labels, n_classes, m, &prep.folds, &opts)
            };
            r.map_err(|e| e.in_stage("evaluate"))
        })
        .collect()
}

/// Write `results.csv`, the confusion matrices and the config echo.
pub fn write_evaluation(cfg: &RunConfig, results: &[CvResult]) -> Result<()> {
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_new(&out.join("config.txt"), cfg.echo().as_bytes())?;
    write_results_csv(results, cfg.seed, &out.join("results.csv"))?;
    for r in results {
        let dir = if results.len() == 1 { out.clone() } else { out.join(&r.method) };
        for (f, c) in r.confusions.iter().enumerate() {
            write_new(&dir.join(format!("confusion_{f}.csv")), c.to_csv().as_bytes())?;
        }
    }
    Ok(())
}

/// The full `evaluate` pipeline.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<CvResult>> {
    log::info!("run configuration:\n{}", cfg.echo());
    let prep = prepare(cfg)?;
    let results = cross_validate(cfg, &prep)?;
    write_evaluation(cfg, &results).map_err(|e| e.in_stage("write"))?;
    Ok(results)
}

/// The label-rate sweep on the whole-dataset stack; writes `sweep.csv`.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    log::info!("run configuration:\n{}", cfg.echo());
    if cfg.dict_per_fold || cfg.pca_per_fold {
        return Err(Error::Config("the sweep uses one stack; per-fold fitting does not apply".into()));
    }
    let prep = prepare(cfg)?;
    let stack = reduce_stacks(cfg, prep.stacks)?.remove(0);
    let methods = cfg.methods()?;
    if let Some(m) = methods.iter().find(|m| m.protocol() == Protocol::Unsupervised) {
        return Err(Error::Config(format!("{} uses no labels and cannot be swept", m.name())));
    }
    let rows = label_rate_sweep(&stack, &prep.labels, prep.manifest.n_classes(), &cfg.rates, &methods, cfg.reps, cfg.seed)
        .map_err(|e| e.in_stage("sweep"))?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_new(&cfg.out.join("config.txt"), cfg.echo().as_bytes())?;
    write_sweep_csv(&rows, &cfg.out.join("sweep.csv"))?;
    Ok(rows)
}
