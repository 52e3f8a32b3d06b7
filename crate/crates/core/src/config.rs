//! Plain-text run configuration.
//!
//! One `key = value` pair per line, keys named after [`TrainConfig`] fields.
//! `[section]` headers group keys for readability and carry no meaning.
//! `#` and `;` start comments. Omitted keys keep their defaults.
//!
//! ```text
//! [optimizer]
//! lr = 0.03
//! [strategy]
//! strategy = fixmatch(tau=0.9)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::model::InitMode;
use crate::strategy::StrategySpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

const KEYS: &[&str] = &[
    "lr",
    "momentum",
    "weight_decay",
    "batch_b",
    "mu",
    "epochs",
    "steps_per_epoch",
    "zeta",
    "alpha_base",
    "lambda",
    "gamma",
    "tau",
    "strategy",
    "lambda_d",
    "m_ema",
    "seed",
    "eval_every",
    "weak_noise_sd",
    "strong_noise_sd",
    "strong_drop_frac",
    "init",
    "init_scale",
    "adapter",
    "pace_mode",
    "pace_window",
    "pace_ema_decay",
    "normalize",
];

const DEFAULT_PACE_EMA: f64 = 0.999;
const DEFAULT_GAUSSIAN_SD: f64 = 0.01;
const DEFAULT_PROTOTYPE_SCALE: f64 = 1.0;

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| cfg_err(line, format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(line, format!("invalid value '{v}' for {key}, expected true or false"))),
    }
}

/// Splits `name(k=v,...)` into the name and its parameter pairs.
fn parse_strategy_value(v: &str, line: usize) -> Result<(String, Vec<(String, String)>)> {
    let Some(open) = v.find('(') else {
        return Ok((v.to_string(), Vec::new()));
    };
    let inner = v[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| cfg_err(line, format!("unbalanced parentheses in strategy '{v}'")))?;
    let mut params = Vec::new();
    for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, val) = part
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("strategy parameter '{part}' is not key=value")))?;
        params.push((k.trim().to_string(), val.trim().to_string()));
    }
    Ok((v[..open].trim().to_string(), params))
}

/// Parses configuration text on top of the defaults and validates it.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut strategy_name = cfg.strategy.name().to_string();
    let mut strategy_line = 0;
    let mut inline: Vec<(String, String)> = Vec::new();
    let mut init_name = "zeros".to_string();
    let mut init_scale: Option<f64> = None;
    let mut pace_mode = "window".to_string();
    let mut pace_ema = DEFAULT_PACE_EMA;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split(['#', ';']).next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if !content.ends_with(']') || content.len() < 3 {
                return Err(cfg_err(line, format!("malformed section header '{content}'")));
            }
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected key = value, got '{content}'")))?;
        let (key, v) = (key.trim(), value.trim());
        let Some(&key) = KEYS.iter().find(|&&k| k == key) else {
            return Err(Error::Config(format!("unknown config key '{key}' (line {line})")));
        };
        if seen.contains(&key) {
            return Err(cfg_err(line, format!("duplicate key '{key}'")));
        }
        seen.push(key);
        match key {
            "lr" => cfg.lr = parse_num(key, v, line)?,
            "momentum" => cfg.momentum = parse_num(key, v, line)?,
            "weight_decay" => cfg.weight_decay = parse_num(key, v, line)?,
            "batch_b" => cfg.batch_b = parse_num(key, v, line)?,
            "mu" => cfg.mu = parse_num(key, v, line)?,
            "epochs" => cfg.epochs = parse_num(key, v, line)?,
            "steps_per_epoch" => cfg.steps_per_epoch = parse_num(key, v, line)?,
            "zeta" => cfg.zeta = parse_num(key, v, line)?,
            "alpha_base" => cfg.alpha_base = parse_num(key, v, line)?,
            "lambda" => cfg.lambda = parse_num(key, v, line)?,
            "gamma" => cfg.gamma = parse_num(key, v, line)?,
            "tau" => cfg.tau = parse_num(key, v, line)?,
            "lambda_d" => cfg.lambda_d = parse_num(key, v, line)?,
            "m_ema" => cfg.m_ema = parse_num(key, v, line)?,
            "seed" => cfg.seed = parse_num(key, v, line)?,
            "eval_every" => cfg.eval_every = parse_num(key, v, line)?,
            "weak_noise_sd" => cfg.augment.weak_noise_sd = parse_num(key, v, line)?,
            "strong_noise_sd" => cfg.augment.strong_noise_sd = parse_num(key, v, line)?,
            "strong_drop_frac" => cfg.augment.strong_drop_frac = parse_num(key, v, line)?,
            "adapter" => cfg.adapter = parse_bool(key, v, line)?,
            "normalize" => cfg.normalize = parse_bool(key, v, line)?,
            "init" => init_name = v.to_string(),
            "init_scale" => init_scale = Some(parse_num(key, v, line)?),
            "pace_mode" => pace_mode = v.to_string(),
            "pace_window" => {
                cfg.pace_window = if v == "epoch" {
                    None
                } else {
                    Some(parse_num(key, v, line)?)
                }
            }
            "pace_ema_decay" => pace_ema = parse_num(key, v, line)?,
            "strategy" => {
                let (name, params) = parse_strategy_value(v, line)?;
                strategy_name = name;
                inline = params;
                strategy_line = line;
            }
            _ => unreachable!("key list and match arms agree"),
        }
    }

    for (k, v) in &inline {
        match k.as_str() {
            "tau" => cfg.tau = parse_num(k, v, strategy_line)?,
            "lambda_d" => cfg.lambda_d = parse_num(k, v, strategy_line)?,
            "m_ema" => cfg.m_ema = parse_num(k, v, strategy_line)?,
            other => return Err(cfg_err(strategy_line, format!("unknown strategy parameter '{other}'"))),
        }
    }
    cfg.strategy = StrategySpec::from_name(&strategy_name, cfg.tau, cfg.lambda_d, cfg.m_ema)?;
    cfg.init = match init_name.as_str() {
        "zeros" => InitMode::Zeros,
        "gaussian" => InitMode::Gaussian {
            sd: init_scale.unwrap_or(DEFAULT_GAUSSIAN_SD),
        },
        "prototypes" => InitMode::Prototypes {
            scale: init_scale.unwrap_or(DEFAULT_PROTOTYPE_SCALE),
        },
        other => return Err(Error::Config(format!("unknown init '{other}', expected zeros, gaussian or prototypes"))),
    };
    cfg.pace_ema = match pace_mode.as_str() {
        "window" => None,
        "ema" => Some(pace_ema),
        other => return Err(Error::Config(format!("unknown pace_mode '{other}', expected window or ema"))),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Serializes every field, so the text reproduces `cfg` when parsed.
pub fn config_snapshot(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let (init, scale) = match cfg.init {
        InitMode::Zeros => ("zeros", None),
        InitMode::Gaussian { sd } => ("gaussian", Some(sd)),
        InitMode::Prototypes { scale } => ("prototypes", Some(scale)),
    };
    let _ = writeln!(s, "[optimizer]");
    let _ = writeln!(s, "lr = {}", cfg.lr);
    let _ = writeln!(s, "momentum = {}", cfg.momentum);
    let _ = writeln!(s, "weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(s, "\n[schedule]");
    let _ = writeln!(s, "batch_b = {}", cfg.batch_b);
    let _ = writeln!(s, "mu = {}", cfg.mu);
    let _ = writeln!(s, "epochs = {}", cfg.epochs);
    let _ = writeln!(s, "steps_per_epoch = {}", cfg.steps_per_epoch);
    let _ = writeln!(s, "eval_every = {}", cfg.eval_every);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "\n[strategy]");
    let _ = writeln!(s, "strategy = {}", cfg.strategy.name());
    let _ = writeln!(s, "tau = {}", cfg.tau);
    let _ = writeln!(s, "lambda_d = {}", cfg.lambda_d);
    let _ = writeln!(s, "m_ema = {}", cfg.m_ema);
    let _ = writeln!(s, "zeta = {}", cfg.zeta);
    let _ = writeln!(s, "alpha_base = {}", cfg.alpha_base);
    let _ = writeln!(s, "lambda = {}", cfg.lambda);
    let _ = writeln!(s, "gamma = {}", cfg.gamma);
    let _ = writeln!(s, "\n[pace]");
    let _ = writeln!(s, "pace_mode = {}", if cfg.pace_ema.is_some() { "ema" } else { "window" });
    match cfg.pace_window {
        Some(w) => {
            let _ = writeln!(s, "pace_window = {w}");
        }
        None => {
            let _ = writeln!(s, "pace_window = epoch");
        }
    }
    let _ = writeln!(s, "pace_ema_decay = {}", cfg.pace_ema.unwrap_or(DEFAULT_PACE_EMA));
    let _ = writeln!(s, "\n[augment]");
    let _ = writeln!(s, "weak_noise_sd = {}", cfg.augment.weak_noise_sd);
    let _ = writeln!(s, "strong_noise_sd = {}", cfg.augment.strong_noise_sd);
    let _ = writeln!(s, "strong_drop_frac = {}", cfg.augment.strong_drop_frac);
    let _ = writeln!(s, "\n[model]");
    let _ = writeln!(s, "init = {init}");
    if let Some(v) = scale {
        let _ = writeln!(s, "init_scale = {v}");
    }
    let _ = writeln!(s, "adapter = {}", cfg.adapter);
    let _ = writeln!(s, "normalize = {}", cfg.normalize);
    s
}
