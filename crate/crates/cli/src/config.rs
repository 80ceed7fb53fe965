//! Layered configuration: built-in defaults, then an optional TOML file,
//! then NATIVERES_<SECTION>_<KEY> environment variables. Unknown file keys
//! and unknown NATIVERES_ variables are validation errors; so are values the
//! library configs reject.

use std::path::{Path, PathBuf};

use nativeres::{
    BudgetConfig, EncoderConfig, PackPolicy, RowOrder, ScoringConfig, Sigma, UnitLexicon,
};
use serde::Deserialize;

use crate::CliError;

/// Fully resolved settings handed to the subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub budget: BudgetConfig,
    pub capacity: usize,
    pub policy: PackPolicy,
    pub encoder: EncoderConfig,
    pub scoring: ScoringConfig,
    pub sigma: Sigma,
    pub row_order: RowOrder,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    budget: BudgetSection,
    packer: PackerSection,
    encoder: EncoderSection,
    scoring: ScoringSection,
    report: ReportSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BudgetSection {
    patch_size: u32,
    merge: u32,
    min_tokens: u64,
    max_tokens: u64,
    max_res: Option<u32>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        let d = BudgetConfig::default();
        Self {
            patch_size: d.patch_size,
            merge: d.merge,
            min_tokens: d.min_tokens,
            max_tokens: d.max_tokens,
            max_res: d.max_res,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PackerSection {
    capacity: usize,
    policy: String,
}

impl Default for PackerSection {
    fn default() -> Self {
        Self {
            capacity: 4096,
            policy: PackPolicy::default().to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EncoderSection {
    embed_dim: usize,
    heads: usize,
    layers: usize,
    mlp_hidden: usize,
    out_dim: usize,
    rope_base: f64,
    seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            embed_dim: d.embed_dim,
            heads: d.heads,
            layers: d.layers,
            mlp_hidden: d.mlp_hidden,
            out_dim: d.out_dim,
            rope_base: d.rope_base,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScoringSection {
    tau: f64,
    sentence_tokens: usize,
    /// Path to a unit-lexicon file, one token per line, replacing the
    /// built-in list.
    unit_lexicon: Option<PathBuf>,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let d = ScoringConfig::default();
        Self {
            tau: d.tau,
            sentence_tokens: d.sentence_tokens,
            unit_lexicon: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportSection {
    sigma: String,
    row_order: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            sigma: "population".into(),
            row_order: "bw_first".into(),
        }
    }
}

/// Name of the configuration file picked up from the working directory when
/// `--config` is not given.
pub const DEFAULT_FILE: &str = "nativeres.toml";

/// Load, overlay environment variables, and resolve. An explicit `--config`
/// path must exist; the default path may be absent.
pub fn load(explicit: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut file = match explicit {
        Some(path) => parse_file(path, true)?,
        None => parse_file(Path::new(DEFAULT_FILE), false)?,
    };
    apply_env(&mut file, std::env::vars())?;
    resolve(file)
}

fn parse_file(path: &Path, must_exist: bool) -> Result<FileConfig, CliError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && !must_exist => {
            return Ok(FileConfig::default());
        }
        Err(e) => {
            return Err(CliError::Io(format!(
                "cannot read config '{}': {e}",
                path.display()
            )));
        }
    };
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("config '{}': {e}", path.display())))
}

/// Overlay NATIVERES_<SECTION>_<KEY> variables onto the file config. The
/// section is the first underscore-delimited chunk; the rest is the key.
fn apply_env(
    cfg: &mut FileConfig,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<(), CliError> {
    let mut vars: Vec<(String, String)> = vars
        .filter(|(k, _)| k.starts_with("NATIVERES_"))
        .collect();
    vars.sort(); // deterministic application and error order
    for (name, value) in vars {
        let rest = &name["NATIVERES_".len()..];
        let (section, key) = rest.split_once('_').ok_or_else(|| {
            CliError::Validation(format!("malformed override '{name}': missing key"))
        })?;
        let bad = |what: &str| {
            CliError::Validation(format!("override {name}={value}: {what}"))
        };
        match (section, key.to_ascii_lowercase().as_str()) {
            ("BUDGET", "patch_size") => cfg.budget.patch_size = int(&value).map_err(|e| bad(&e))?,
            ("BUDGET", "merge") => cfg.budget.merge = int(&value).map_err(|e| bad(&e))?,
            ("BUDGET", "min_tokens") => cfg.budget.min_tokens = int(&value).map_err(|e| bad(&e))?,
            ("BUDGET", "max_tokens") => cfg.budget.max_tokens = int(&value).map_err(|e| bad(&e))?,
            ("BUDGET", "max_res") => {
                cfg.budget.max_res = match value.as_str() {
                    "none" | "" => None,
                    v => Some(int(v).map_err(|e| bad(&e))?),
                }
            }
            ("PACKER", "capacity") => cfg.packer.capacity = int(&value).map_err(|e| bad(&e))?,
            ("PACKER", "policy") => cfg.packer.policy = value.clone(),
            ("ENCODER", "embed_dim") => cfg.encoder.embed_dim = int(&value).map_err(|e| bad(&e))?,
            ("ENCODER", "heads") => cfg.encoder.heads = int(&value).map_err(|e| bad(&e))?,
            ("ENCODER", "layers") => cfg.encoder.layers = int(&value).map_err(|e| bad(&e))?,
            ("ENCODER", "mlp_hidden") => {
                cfg.encoder.mlp_hidden = int(&value).map_err(|e| bad(&e))?
            }
            ("ENCODER", "out_dim") => cfg.encoder.out_dim = int(&value).map_err(|e| bad(&e))?,
            ("ENCODER", "rope_base") => cfg.encoder.rope_base = float(&value).map_err(|e| bad(&e))?,
            ("ENCODER", "seed") => cfg.encoder.seed = int(&value).map_err(|e| bad(&e))?,
            ("SCORING", "tau") => cfg.scoring.tau = float(&value).map_err(|e| bad(&e))?,
            ("SCORING", "sentence_tokens") => {
                cfg.scoring.sentence_tokens = int(&value).map_err(|e| bad(&e))?
            }
            ("SCORING", "unit_lexicon") => cfg.scoring.unit_lexicon = Some(PathBuf::from(&value)),
            ("REPORT", "sigma") => cfg.report.sigma = value.clone(),
            ("REPORT", "row_order") => cfg.report.row_order = value.clone(),
            _ => {
                return Err(CliError::Validation(format!(
                    "unknown configuration override '{name}'"
                )));
            }
        }
    }
    Ok(())
}

fn int<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("not an integer: {e}"))
}

fn float(v: &str) -> Result<f64, String> {
    v.parse().map_err(|e| format!("not a number: {e}"))
}

fn resolve(file: FileConfig) -> Result<RunConfig, CliError> {
    let budget = BudgetConfig {
        patch_size: file.budget.patch_size,
        merge: file.budget.merge,
        min_tokens: file.budget.min_tokens,
        max_tokens: file.budget.max_tokens,
        max_res: file.budget.max_res,
    };
    budget
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let policy: PackPolicy = file
        .packer
        .policy
        .parse()
        .map_err(CliError::Validation)?;
    if file.packer.capacity == 0 {
        return Err(CliError::Validation("packer capacity must be positive".into()));
    }

    let encoder = EncoderConfig {
        patch_size: budget.patch_size,
        in_dim: 3 * (budget.patch_size as usize).pow(2),
        embed_dim: file.encoder.embed_dim,
        heads: file.encoder.heads,
        layers: file.encoder.layers,
        mlp_hidden: file.encoder.mlp_hidden,
        out_dim: file.encoder.out_dim,
        rope_base: file.encoder.rope_base,
        seed: file.encoder.seed,
    };
    encoder
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let lexicon = match &file.scoring.unit_lexicon {
        None => UnitLexicon::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Io(format!("cannot read unit lexicon '{}': {e}", path.display()))
            })?;
            let tokens: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect();
            if tokens.is_empty() {
                return Err(CliError::Validation(format!(
                    "unit lexicon '{}' has no tokens",
                    path.display()
                )));
            }
            UnitLexicon::from_tokens(tokens)
        }
    };
    if !(0.0..=1.0).contains(&file.scoring.tau) {
        return Err(CliError::Validation(format!(
            "scoring tau must be in [0, 1], got {}",
            file.scoring.tau
        )));
    }
    let scoring = ScoringConfig {
        tau: file.scoring.tau,
        sentence_tokens: file.scoring.sentence_tokens,
        lexicon,
    };

    let sigma: Sigma = file.report.sigma.parse().map_err(CliError::Validation)?;
    let row_order: RowOrder = file
        .report
        .row_order
        .parse()
        .map_err(CliError::Validation)?;

    Ok(RunConfig {
        budget,
        capacity: file.packer.capacity,
        policy,
        encoder,
        scoring,
        sigma,
        row_order,
    })
}
