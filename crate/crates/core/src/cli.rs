//! Experiment driver: one subcommand per pipeline, a TOML config with one
//! section per subcommand, and tabular outputs in the `--out` directory.
//!
//! Every run writes `manifest.txt` (resolved config, input digests, summary;
//! the timestamp is alone on the last line), `results.csv`, and
//! `measure.json` when the pipeline produces a measure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calpoly::{self, CaloricPolynomial, Orientation, TraceResolution};
use crate::capacity::{self, CapacityInstance, CdcDirection, GridOptions, KernelSpec};
use crate::error::{LabError, Result};
use crate::measures::{self, Cone, ConeOptions, DiscreteMeasure};
use crate::pargeo::{self, Cylinder, FlatnessFamily, FlatnessOptions, ParaPoint, PointCloudSet};
use crate::stochastic::{self, BourgainOptions, DomainSpec, FocusOptions, TwoPhaseOptions, WalkConfig};
use crate::transport::{self, TransportInstance};

#[derive(Debug, Parser)]
#[command(name = "caloric-lab", version, about = "Parabolic potential theory experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config with a section named after the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key of the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Caloric measure of a caloric polynomial by nodal tracing.
    PolyMeasure,
    /// F_r of a measure at several radii.
    Fr,
    /// Distance of a measure to a cone of tangent measures.
    ConeDist,
    /// Blow-up of a measure at a point.
    Blowup,
    /// Log-log dimension fit of a measure at a point.
    Dimension,
    /// Thermal capacity LP.
    Capacity,
    /// Capacity density ratios at a boundary point.
    Cdc,
    /// Monte Carlo caloric measure.
    CaloricMc,
    /// Monte Carlo Green function.
    Green,
    /// Bourgain-type hitting estimate.
    Bourgain,
    /// Kantorovich-Rubinstein norm of a signed spatial measure.
    Kr,
    /// Boundary transport distance between the Jordan parts.
    Wb1,
    /// Two-phase blow-up experiment.
    TwoPhase,
    /// Bilateral flatness of a point cloud.
    Flatness,
    /// Geometric-mean ratio of a density.
    Vmo,
}

impl Command {
    fn section(self) -> &'static str {
        match self {
            Command::PolyMeasure => "poly-measure",
            Command::Fr => "fr",
            Command::ConeDist => "cone-dist",
            Command::Blowup => "blowup",
            Command::Dimension => "dimension",
            Command::Capacity => "capacity",
            Command::Cdc => "cdc",
            Command::CaloricMc => "caloric-mc",
            Command::Green => "green",
            Command::Bourgain => "bourgain",
            Command::Kr => "kr",
            Command::Wb1 => "wb1",
            Command::TwoPhase => "two-phase",
            Command::Flatness => "flatness",
            Command::Vmo => "vmo",
        }
    }
}

/// Whole config file. Unknown keys and sections are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(rename = "poly-measure")]
    pub poly_measure: Option<PolyMeasureConfig>,
    pub fr: Option<FrConfig>,
    #[serde(rename = "cone-dist")]
    pub cone_dist: Option<ConeDistConfig>,
    pub blowup: Option<BlowupConfig>,
    pub dimension: Option<DimensionConfig>,
    pub capacity: Option<CapacityConfig>,
    pub cdc: Option<CdcConfig>,
    #[serde(rename = "caloric-mc")]
    pub caloric_mc: Option<CaloricMcConfig>,
    pub green: Option<GreenConfig>,
    pub bourgain: Option<BourgainConfig>,
    pub kr: Option<KrConfig>,
    pub wb1: Option<Wb1Config>,
    #[serde(rename = "two-phase")]
    pub two_phase: Option<TwoPhaseConfig>,
    pub flatness: Option<FlatnessConfig>,
    pub vmo: Option<VmoConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub alpha: Vec<u32>,
    #[serde(default)]
    pub ell: u32,
    pub c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolySpec {
    pub n: usize,
    #[serde(default = "caloric")]
    pub orientation: Orientation,
    pub terms: Vec<TermSpec>,
}

fn caloric() -> Orientation {
    Orientation::Caloric
}

impl PolySpec {
    fn build(&self) -> Result<CaloricPolynomial> {
        let terms: Vec<(Vec<u32>, u32, f64)> = self.terms.iter().map(|t| (t.alpha.clone(), t.ell, t.c)).collect();
        let h = CaloricPolynomial::from_terms(self.n, self.orientation, &terms)?;
        if !h.is_caloric() {
            return Err(LabError::invalid("polynomial does not solve the heat equation for its orientation"));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkSpec {
    pub n_walks: usize,
    pub dt: f64,
    pub max_time_depth: f64,
    pub boundary_tol: f64,
}

impl Default for WalkSpec {
    fn default() -> Self {
        let w = WalkConfig::default();
        WalkSpec { n_walks: w.n_walks, dt: w.dt, max_time_depth: w.max_time_depth, boundary_tol: w.boundary_tol }
    }
}

impl WalkSpec {
    fn with_seed(&self, seed: u64) -> WalkConfig {
        WalkConfig { n_walks: self.n_walks, dt: self.dt, seed, max_time_depth: self.max_time_depth, boundary_tol: self.boundary_tol }
    }
}

fn default_slices() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyMeasureConfig {
    pub polynomial: PolySpec,
    pub center: Option<ParaPoint>,
    pub r: f64,
    #[serde(default = "default_slices")]
    pub slices: usize,
    #[serde(default = "default_slices")]
    pub grid: usize,
    /// Dyadic levels below `r`; zero traces a single cylinder.
    #[serde(default)]
    pub levels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrConfig {
    pub measure: PathBuf,
    pub radii: Vec<f64>,
}

fn default_seeds() -> usize {
    ConeOptions::default().seeds
}

fn default_cone_trace() -> usize {
    ConeOptions::default().trace.grid
}

fn flat_cone() -> Cone {
    Cone::Flat
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeDistConfig {
    pub measure: PathBuf,
    pub r: f64,
    #[serde(default = "flat_cone")]
    pub cone: Cone,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Slices and grid cells of the cone elements on `C_1`.
    #[serde(default = "default_cone_trace")]
    pub trace: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlowupConfig {
    pub measure: PathBuf,
    pub center: ParaPoint,
    pub r: f64,
    /// Normalization; defaults to `1 / μ(C_r(center))`.
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionConfig {
    pub measure: PathBuf,
    pub center: ParaPoint,
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridShape {
    /// `B(x, r) × [t - (a r)^2, t - (b r)^2]`.
    Truncated,
    /// The closed cylinder `C_r`.
    Cylinder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub shape: GridShape,
    pub center: ParaPoint,
    pub r: f64,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "half")]
    pub b: f64,
    #[serde(default = "default_cells")]
    pub cells: usize,
    #[serde(default)]
    pub refine: u32,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn default_cells() -> usize {
    GridOptions::default().cells
}

fn gamma_kernel() -> KernelSpec {
    KernelSpec::Gamma
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    /// JSON capacity instance; exclusive with `grid`.
    pub instance: Option<PathBuf>,
    pub grid: Option<GridSpec>,
    #[serde(default = "gamma_kernel")]
    pub kernel: KernelSpec,
}

fn backward() -> CdcDirection {
    CdcDirection::Backward
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdcConfig {
    pub domain: DomainSpec,
    pub xi: ParaPoint,
    pub radii: Vec<f64>,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "backward")]
    pub direction: CdcDirection,
    #[serde(default = "default_cells")]
    pub cells: usize,
    #[serde(default)]
    pub refine: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaloricMcConfig {
    pub domain: DomainSpec,
    pub pole: ParaPoint,
    #[serde(default)]
    pub walk: WalkSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenConfig {
    pub domain: DomainSpec,
    pub pole: ParaPoint,
    pub queries: Vec<ParaPoint>,
    #[serde(default)]
    pub walk: WalkSpec,
}

fn default_big_m() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BourgainConfig {
    pub domain: DomainSpec,
    pub xi: ParaPoint,
    pub radii: Vec<f64>,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "default_big_m")]
    pub big_m: f64,
    #[serde(default)]
    pub walk: WalkSpec,
    #[serde(default)]
    pub options: BourgainOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrConfig {
    /// JSON transport instance (domain and signed atoms).
    pub instance: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wb1Config {
    /// JSON transport instance; the positive and negative parts are compared.
    pub instance: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoPhasePreset {
    /// `{±x_1 > 0}` in two space dimensions with poles `(±1, 0, 1)`.
    HalfSpace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoPhaseConfig {
    pub preset: Option<TwoPhasePreset>,
    pub plus: Option<DomainSpec>,
    pub minus: Option<DomainSpec>,
    pub pole_plus: Option<ParaPoint>,
    pub pole_minus: Option<ParaPoint>,
    pub xi: Option<ParaPoint>,
    pub radii: Option<Vec<f64>>,
    pub walk: Option<WalkSpec>,
    pub focus: Option<FocusOptions>,
}

fn planes() -> FlatnessFamily {
    FlatnessFamily::Planes
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessConfig {
    /// JSON point cloud; exclusive with `polynomial`.
    pub points: Option<PathBuf>,
    /// Samples the nodal set of this polynomial on `C_{max radius}`.
    pub polynomial: Option<PolySpec>,
    pub center: ParaPoint,
    pub radii: Vec<f64>,
    #[serde(default = "planes")]
    pub family: FlatnessFamily,
    #[serde(default = "default_slices")]
    pub trace: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmoConfig {
    pub measure: PathBuf,
    /// One value per atom of the measure.
    pub values: Vec<f64>,
    pub center: ParaPoint,
    pub radii: Vec<f64>,
}

/// What a pipeline hands back to the driver.
#[derive(Debug, Default)]
pub struct Outputs {
    pub results: String,
    pub measure: Option<DiscreteMeasure>,
    pub summary: Vec<(String, String)>,
    pub resolved: String,
    pub inputs: Vec<PathBuf>,
}

/// Parses `argv`, runs, and maps the outcome to an exit code: 0 success,
/// 1 invalid input, 2 numerical failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(outs) => {
            for (k, v) in &outs.summary {
                println!("{k} = {v}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> LabError {
    LabError::Io { path: path.display().to_string(), source }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))
}

/// Runs the pipeline and writes all output files.
pub fn execute(cli: &Cli) -> Result<Outputs> {
    let path = cli.config.as_deref().ok_or_else(|| LabError::invalid("--config PATH is required"))?;
    let cfg = load_config(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let outs = match cli.workers {
        Some(0) => return Err(LabError::invalid("--workers must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| LabError::invalid(format!("thread pool: {e}")))?
            .install(|| dispatch(cli.command, &cfg, &base, seed))?,
        None => dispatch(cli.command, &cfg, &base, seed)?,
    };
    write_outputs(cli, path, seed, &outs)?;
    Ok(outs)
}

fn write_outputs(cli: &Cli, config: &Path, seed: u64, outs: &Outputs) -> Result<()> {
    let dir = &cli.out;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, body: &str| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| io_err(&p, e))
    };
    write("results.csv", &outs.results)?;
    if let Some(m) = &outs.measure {
        write("measure.json", &m.to_json()?)?;
    }
    let mut man = String::new();
    let _ = writeln!(man, "# caloric-lab run manifest");
    let _ = writeln!(man, "version = \"{}\"", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(man, "subcommand = \"{}\"", cli.command.section());
    let _ = writeln!(man, "seed = {seed}");
    match cli.workers {
        Some(n) => {
            let _ = writeln!(man, "workers = {n}");
        }
        None => {
            let _ = writeln!(man, "workers = \"default\"");
        }
    }
    let _ = writeln!(man, "config = \"{}\"", config.display());
    let _ = writeln!(man, "config_sha256 = \"{}\"", digest_file(config)?);
    for p in &outs.inputs {
        let _ = writeln!(man, "input = {{ path = \"{}\", sha256 = \"{}\" }}", p.display(), digest_file(p)?);
    }
    let _ = writeln!(man, "\n[{}]", cli.command.section());
    man.push_str(&outs.resolved);
    if !outs.summary.is_empty() {
        let _ = writeln!(man, "\n[summary]");
        for (k, v) in &outs.summary {
            let _ = writeln!(man, "{k} = {v}");
        }
    }
    let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let _ = writeln!(man, "\ntimestamp_unix = {now}");
    write("manifest.txt", &man)
}

fn digest_file(p: &Path) -> Result<String> {
    let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| LabError::invalid(format!("config has no [{name}] section")))
}

fn resolved<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| LabError::Parse(e.to_string()))
}

fn read_measure(base: &Path, p: &Path, inputs: &mut Vec<PathBuf>) -> Result<DiscreteMeasure> {
    let full = base.join(p);
    let text = std::fs::read_to_string(&full).map_err(|e| io_err(&full, e))?;
    inputs.push(full);
    DiscreteMeasure::from_json(&text)
}

fn read_instance(base: &Path, p: &Path, inputs: &mut Vec<PathBuf>) -> Result<TransportInstance> {
    let full = base.join(p);
    let text = std::fs::read_to_string(&full).map_err(|e| io_err(&full, e))?;
    inputs.push(full);
    TransportInstance::from_json(&text)
}

fn measure_csv(m: &DiscreteMeasure) -> Result<String> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf).map_err(|e| io_err(Path::new("results.csv"), e))?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

fn point_cols(p: &ParaPoint) -> String {
    p.x.iter().map(|v| format!("{v}")).chain(std::iter::once(format!("{}", p.t))).collect::<Vec<_>>().join(",")
}

fn point_header(n: usize) -> String {
    (1..=n).map(|i| format!("x{i}")).chain(std::iter::once("t".to_string())).collect::<Vec<_>>().join(",")
}

fn kv(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn dispatch(cmd: Command, cfg: &RunConfig, base: &Path, seed: u64) -> Result<Outputs> {
    let mut o = Outputs::default();
    match cmd {
        Command::PolyMeasure => {
            let c = section(&cfg.poly_measure, "poly-measure")?;
            let h = c.polynomial.build()?;
            let center = c.center.clone().unwrap_or_else(|| ParaPoint::origin(h.n()));
            let res = TraceResolution { slices: c.slices, grid: c.grid };
            let mu = if c.levels > 0 {
                calpoly::caloric_measure_multiscale(&h, &center, c.r, c.levels, &res)?
            } else {
                calpoly::caloric_measure_poly(&h, &Cylinder::new(center, c.r)?, &res)?
            };
            o.summary = vec![kv("atoms", mu.len()), kv("total_mass", mu.total_mass())];
            o.results = measure_csv(&mu)?;
            o.measure = Some(mu);
            o.resolved = resolved(c)?;
        }
        Command::Fr => {
            let c = section(&cfg.fr, "fr")?;
            let mu = read_measure(base, &c.measure, &mut o.inputs)?;
            let mut s = String::from("r,f_r\n");
            for &r in &c.radii {
                let _ = writeln!(s, "{r},{}", measures::f_r(&mu, r)?);
            }
            o.results = s;
            o.resolved = resolved(c)?;
        }
        Command::ConeDist => {
            let c = section(&cfg.cone_dist, "cone-dist")?;
            let mu = read_measure(base, &c.measure, &mut o.inputs)?;
            let opts = ConeOptions { seeds: c.seeds, trace: TraceResolution { slices: c.trace, grid: c.trace }, ..Default::default() };
            let d = measures::cone_distance(&mu, c.r, c.cone, &opts)?;
            let coef = d.coef.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            o.results = format!("r,value,f_r,evaluations,coef\n{},{},{},{},{}\n", c.r, d.value, d.f_r, d.evaluations, coef);
            o.summary = vec![kv("value", d.value)];
            o.resolved = resolved(c)?;
        }
        Command::Blowup => {
            let c = section(&cfg.blowup, "blowup")?;
            let mu = read_measure(base, &c.measure, &mut o.inputs)?;
            let scale = match c.c {
                Some(v) => v,
                None => {
                    let m = mu.mass_in(&c.center, c.r);
                    if !(m > 0.0) {
                        return Err(LabError::ZeroMass(format!("μ(C_{}(center)) = 0", c.r)));
                    }
                    1.0 / m
                }
            };
            let b = measures::blow_up(&mu, &c.center, c.r, scale)?;
            o.summary = vec![kv("atoms", b.len()), kv("c", scale), kv("f_1", measures::f_r(&b, 1.0)?)];
            o.results = measure_csv(&b)?;
            o.measure = Some(b);
            o.resolved = resolved(c)?;
        }
        Command::Dimension => {
            let c = section(&cfg.dimension, "dimension")?;
            let mu = read_measure(base, &c.measure, &mut o.inputs)?;
            let fit = measures::pointwise_dimension(&mu, &c.center, &c.radii)?;
            let mut s = String::from("r,mass\n");
            for &r in &c.radii {
                let _ = writeln!(s, "{r},{}", mu.mass_in(&c.center, r));
            }
            o.results = s;
            o.summary = vec![kv("slope", fit.slope), kv("intercept", fit.intercept), kv("residual", fit.residual)];
            o.resolved = resolved(c)?;
        }
        Command::Capacity => {
            let c = section(&cfg.capacity, "capacity")?;
            let inst = match (&c.instance, &c.grid) {
                (Some(p), None) => {
                    let full = base.join(p);
                    let text = std::fs::read_to_string(&full).map_err(|e| io_err(&full, e))?;
                    o.inputs.push(full);
                    let mut inst: CapacityInstance = serde_json::from_str(&text)?;
                    inst.kernel = c.kernel.clone();
                    inst.validate()?;
                    inst
                }
                (None, Some(g)) => {
                    let opts = GridOptions { cells: g.cells, refine: g.refine };
                    let set = match g.shape {
                        GridShape::Truncated => capacity::truncated_grids(&g.center, g.r, g.a, g.b, &opts)?,
                        GridShape::Cylinder => capacity::cylinder_grids(&g.center, g.r, &opts)?,
                    };
                    CapacityInstance::new(set.atoms, set.constraints, c.kernel.clone())?
                }
                _ => return Err(LabError::invalid("[capacity] needs exactly one of `instance` and `grid`")),
            };
            let res = capacity::thermal_capacity(&inst)?;
            let (lo, hi) = res.bracket.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
            o.results = format!(
                "value,pivots,atoms,constraints,kernel,bracket_lo,bracket_hi\n{},{},{},{},{},{lo},{hi}\n",
                res.value,
                res.pivots,
                inst.atoms.len(),
                inst.constraints.len(),
                inst.kernel.tag()
            );
            let atoms = inst.atoms.iter().zip(&res.weights).map(|(p, &w)| measures::Atom::new(&p.x, p.t, w)).collect();
            o.measure = Some(DiscreteMeasure::new(atoms)?);
            o.summary = vec![kv("value", res.value)];
            o.resolved = resolved(c)?;
        }
        Command::Cdc => {
            let c = section(&cfg.cdc, "cdc")?;
            let rows = capacity::cdc_ratios(&c.domain, &c.xi, &c.radii, c.a, c.direction, &GridOptions { cells: c.cells, refine: c.refine })?;
            let mut s = String::from("r,numerator,denominator,ratio,atoms_numerator,atoms_denominator,constraints,kernel,empty_complement\n");
            for q in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    q.r, q.numerator, q.denominator, q.ratio, q.atoms_numerator, q.atoms_denominator, q.constraints, q.kernel, q.empty_complement
                );
            }
            let min = rows.iter().map(|q| q.ratio).fold(f64::INFINITY, f64::min);
            o.results = s;
            o.summary = vec![kv("min_ratio", min)];
            o.resolved = resolved(c)?;
        }
        Command::CaloricMc => {
            let c = section(&cfg.caloric_mc, "caloric-mc")?;
            let sim = stochastic::simulate_caloric_measure(&c.domain, &c.pole, &c.walk.with_seed(seed))?;
            o.results = format!(
                "walks,exits,truncated,total_mass\n{},{},{},{}\n",
                sim.walks,
                sim.exits,
                sim.truncated,
                sim.measure.total_mass()
            );
            o.summary = vec![kv("exits", sim.exits), kv("truncated", sim.truncated)];
            o.measure = Some(sim.measure);
            o.resolved = resolved(c)?;
        }
        Command::Green => {
            let c = section(&cfg.green, "green")?;
            let est = stochastic::estimate_green(&c.domain, &c.pole, &c.queries, &c.walk.with_seed(seed))?;
            let n = c.pole.dim();
            let mut s = format!("{},value,std_err\n", point_header(n));
            for (q, g) in c.queries.iter().zip(&est) {
                let _ = writeln!(s, "{},{},{}", point_cols(q), g.value, g.std_err);
            }
            o.results = s;
            o.resolved = resolved(c)?;
        }
        Command::Bourgain => {
            let c = section(&cfg.bourgain, "bourgain")?;
            let walk = c.walk.with_seed(seed);
            let mut s = String::from("r,min_hit_prob,cap_ratio,quotient,vacuous,grid_points\n");
            for &r in &c.radii {
                let b = stochastic::bourgain_check(&c.domain, &c.xi, r, c.a, c.big_m, &walk, &c.options)?;
                let _ = writeln!(s, "{},{},{},{},{},{}", b.r, b.min_hit_prob, b.cap_ratio, b.quotient, b.vacuous, b.grid_points);
            }
            o.results = s;
            o.resolved = resolved(c)?;
        }
        Command::Kr => {
            let c = section(&cfg.kr, "kr")?;
            let inst = read_instance(base, &c.instance, &mut o.inputs)?;
            let res = transport::kr_norm_dual(&inst)?;
            let mut s = String::from("quantity,value\n");
            let _ = writeln!(s, "value,{}", res.value);
            for (i, phi) in res.phi.iter().enumerate() {
                let _ = writeln!(s, "phi_{i},{phi}");
            }
            o.results = s;
            o.summary = vec![kv("value", res.value)];
            o.resolved = resolved(c)?;
        }
        Command::Wb1 => {
            let c = section(&cfg.wb1, "wb1")?;
            let inst = read_instance(base, &c.instance, &mut o.inputs)?;
            let (p, q) = inst.jordan();
            let res = transport::wb1_primal(&p, &q, &inst.domain)?;
            let mut buf = Vec::new();
            res.write_plan_csv(&mut buf).map_err(|e| io_err(Path::new("results.csv"), e))?;
            o.results = String::from_utf8_lossy(&buf).into_owned();
            o.summary = vec![kv("value", res.value)];
            o.resolved = resolved(c)?;
        }
        Command::TwoPhase => {
            let c = section(&cfg.two_phase, "two-phase")?;
            let resolved_cfg = resolve_two_phase(c)?;
            let walk = resolved_cfg.walk.unwrap_or_default().with_seed(seed);
            let opts = TwoPhaseOptions { focus: resolved_cfg.focus.unwrap_or_default(), ..Default::default() };
            let recs = stochastic::two_phase_blowup_experiment(
                resolved_cfg.plus.as_ref().unwrap(),
                resolved_cfg.minus.as_ref().unwrap(),
                resolved_cfg.pole_plus.as_ref().unwrap(),
                resolved_cfg.pole_minus.as_ref().unwrap(),
                resolved_cfg.xi.as_ref().unwrap(),
                resolved_cfg.radii.as_ref().unwrap(),
                &walk,
                &opts,
            )?;
            let mut s = String::from("r,mass_plus,mass_minus,mass_ratio,f1,cone_distance,theta,dim_slope,atoms_plus\n");
            for q in &recs {
                let slope = q.dim_slope.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{slope},{}",
                    q.r, q.mass_plus, q.mass_minus, q.mass_ratio, q.f1, q.cone_distance, q.theta, q.atoms_plus
                );
            }
            o.results = s;
            o.resolved = resolved(&resolved_cfg)?;
        }
        Command::Flatness => {
            let c = section(&cfg.flatness, "flatness")?;
            if c.radii.is_empty() {
                return Err(LabError::invalid("[flatness] needs at least one radius"));
            }
            let cloud = match (&c.points, &c.polynomial) {
                (Some(p), None) => {
                    let full = base.join(p);
                    let text = std::fs::read_to_string(&full).map_err(|e| io_err(&full, e))?;
                    o.inputs.push(full);
                    PointCloudSet::from_json(&text)?
                }
                (None, Some(poly)) => {
                    let h = poly.build()?;
                    let res = TraceResolution { slices: c.trace, grid: c.trace };
                    let mut pts = Vec::new();
                    for &r in &c.radii {
                        let set = calpoly::nodal_trace(&h, &Cylinder::new(c.center.clone(), r)?, &res)?;
                        pts.extend(set.points.into_iter().map(|p| p.point));
                    }
                    PointCloudSet::new(pts)
                }
                _ => return Err(LabError::invalid("[flatness] needs exactly one of `points` and `polynomial`")),
            };
            let opts = FlatnessOptions::default();
            let mut s = String::from("r,theta,argmin\n");
            for &r in &c.radii {
                let f = pargeo::theta_flatness(&cloud, &c.center, r, &c.family, &opts)?;
                let arg = f.argmin.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
                let _ = writeln!(s, "{r},{},{arg}", f.theta);
            }
            o.results = s;
            o.resolved = resolved(c)?;
        }
        Command::Vmo => {
            let c = section(&cfg.vmo, "vmo")?;
            let mu = read_measure(base, &c.measure, &mut o.inputs)?;
            let mut s = String::from("r,ratio\n");
            for &r in &c.radii {
                let _ = writeln!(s, "{r},{}", measures::vmo_ratio(&c.values, &mu, &c.center, r)?);
            }
            o.results = s;
            o.resolved = resolved(c)?;
        }
    }
    Ok(o)
}

/// Fills a two-phase section from its preset; explicit keys win.
fn resolve_two_phase(c: &TwoPhaseConfig) -> Result<TwoPhaseConfig> {
    let mut out = c.clone();
    if c.preset == Some(TwoPhasePreset::HalfSpace) {
        let fill = |slot: &mut Option<DomainSpec>, normal: f64| -> Result<()> {
            if slot.is_none() {
                *slot = Some(DomainSpec::half_space(&[normal, 0.0], 0.0)?);
            }
            Ok(())
        };
        fill(&mut out.plus, 1.0)?;
        fill(&mut out.minus, -1.0)?;
        out.pole_plus.get_or_insert_with(|| ParaPoint::new(&[1.0, 0.0], 1.0));
        out.pole_minus.get_or_insert_with(|| ParaPoint::new(&[-1.0, 0.0], 1.0));
        out.xi.get_or_insert_with(|| ParaPoint::origin(2));
        out.radii.get_or_insert_with(|| vec![0.1, 0.03, 0.01, 0.003, 0.001]);
        out.walk.get_or_insert_with(|| WalkSpec { max_time_depth: 10.0, ..Default::default() });
    }
    let missing: Vec<&str> = [
        ("plus", out.plus.is_none()),
        ("minus", out.minus.is_none()),
        ("pole_plus", out.pole_plus.is_none()),
        ("pole_minus", out.pole_minus.is_none()),
        ("xi", out.xi.is_none()),
        ("radii", out.radii.is_none()),
    ]
    .iter()
    .filter(|(_, m)| *m)
    .map(|(k, _)| *k)
    .collect();
    if !missing.is_empty() {
        return Err(LabError::invalid(format!("[two-phase] is missing {}", missing.join(", "))));
    }
    Ok(out)
}

/// Keys of every section, for documentation and tests.
pub fn sections() -> BTreeMap<&'static str, Command> {
    [
        Command::PolyMeasure,
        Command::Fr,
        Command::ConeDist,
        Command::Blowup,
        Command::Dimension,
        Command::Capacity,
        Command::Cdc,
        Command::CaloricMc,
        Command::Green,
        Command::Bourgain,
        Command::Kr,
        Command::Wb1,
        Command::TwoPhase,
        Command::Flatness,
        Command::Vmo,
    ]
    .into_iter()
    .map(|c| (c.section(), c))
    .collect()
}
