//! Flat `key=value` experiment configuration.
//!
//! Keys carry section prefixes (`distill.alpha=0.5`). A `#` starts a comment.
//! Overrides may spell the full key or any unambiguous trailing segment
//! (`gate=nabla` resolves to `distill.gate`); unknown or ambiguous keys are
//! rejected with the offending key named. `render_config` echoes a resolved
//! config in a form that parses back to the identical configuration.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::orchestrator::{DataConfig, ExperimentConfig};

/// Every accepted configuration key.
pub const CONFIG_KEYS: &[&str] = &[
    "data.kind",
    "data.classes",
    "data.dim",
    "data.per_class",
    "data.test_per_class",
    "data.spread",
    "data.images",
    "data.labels",
    "data.test_images",
    "data.test_labels",
    "fed.clients",
    "fed.active",
    "fed.rounds",
    "fed.omega",
    "fed.sigma",
    "fed.rho",
    "fed.scheme",
    "model.hidden",
    "client.lr",
    "client.steps",
    "client.batch",
    "client.replacement",
    "gen.hidden",
    "gen.noise_dim",
    "gen.merge",
    "distill.method",
    "distill.mode",
    "distill.reinit",
    "distill.gate",
    "distill.weighting",
    "distill.ema",
    "distill.lambda",
    "distill.alpha",
    "distill.beta_tran",
    "distill.beta_div",
    "distill.iters",
    "distill.gen_iters",
    "distill.model_iters",
    "distill.gen_lr",
    "distill.b1",
    "distill.b2",
    "distill.model_lr",
    "distill.textbook_adam",
    "distill.dump_synthetic",
    "output.checkpoint",
    "output.partition",
    "run.seed",
];

/// Maps a user-supplied key to its canonical form.
pub fn resolve_key(input: &str) -> Result<&'static str> {
    if let Some(&exact) = CONFIG_KEYS.iter().find(|&&k| k == input) {
        return Ok(exact);
    }
    let suffix = format!(".{input}");
    let matches: Vec<&'static str> =
        CONFIG_KEYS.iter().copied().filter(|k| k.ends_with(&suffix)).collect();
    match matches.as_slice() {
        [only] => Ok(only),
        [] => Err(Error::config(input, "unknown configuration key")),
        many => Err(Error::config(
            input,
            format!("ambiguous key; candidates: {}", many.join(", ")),
        )),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::config(key, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got `{value}`"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    let widths: Result<Vec<usize>> = value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(key, format!("bad width `{part}`")))
        })
        .collect();
    let widths = widths?;
    if widths.is_empty() || widths.iter().any(|&w| w == 0) {
        return Err(Error::config(key, "widths must be positive"));
    }
    Ok(widths)
}

/// In-flight configuration while keys are applied.
#[derive(Debug, Clone)]
pub struct ConfigDraft {
    base: ExperimentConfig,
    kind: String,
    classes: usize,
    dim: usize,
    per_class: usize,
    test_per_class: usize,
    spread: f64,
    images: String,
    labels: String,
    test_images: String,
    test_labels: String,
}

impl Default for ConfigDraft {
    fn default() -> Self {
        ConfigDraft::from_config(&ExperimentConfig::default())
    }
}

impl ConfigDraft {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let mut draft = ConfigDraft {
            base: cfg.clone(),
            kind: "blobs".to_string(),
            classes: 8,
            dim: 16,
            per_class: 400,
            test_per_class: 50,
            spread: 0.22,
            images: String::new(),
            labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
        };
        match &cfg.data {
            DataConfig::Blobs { classes, dim, per_class, test_per_class, spread } => {
                draft.kind = "blobs".to_string();
                draft.classes = *classes;
                draft.dim = *dim;
                draft.per_class = *per_class;
                draft.test_per_class = *test_per_class;
                draft.spread = *spread;
            }
            DataConfig::Idx { images, labels, test_images, test_labels } => {
                draft.kind = "idx".to_string();
                draft.images = images.clone();
                draft.labels = labels.clone();
                draft.test_images = test_images.clone();
                draft.test_labels = test_labels.clone();
            }
        }
        draft
    }

    /// Applies one `key=value` assignment (key may be a unique suffix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let canonical = resolve_key(key)?;
        let v = value.trim();
        match canonical {
            "data.kind" => match v {
                "blobs" | "idx" => self.kind = v.to_string(),
                _ => return Err(Error::config(canonical, format!("expected blobs/idx, got `{v}`"))),
            },
            "data.classes" => self.classes = parse_num(canonical, v, "a positive integer")?,
            "data.dim" => self.dim = parse_num(canonical, v, "a positive integer")?,
            "data.per_class" => self.per_class = parse_num(canonical, v, "a positive integer")?,
            "data.test_per_class" => {
                self.test_per_class = parse_num(canonical, v, "a positive integer")?
            }
            "data.spread" => self.spread = parse_num(canonical, v, "a real number")?,
            "data.images" => self.images = v.to_string(),
            "data.labels" => self.labels = v.to_string(),
            "data.test_images" => self.test_images = v.to_string(),
            "data.test_labels" => self.test_labels = v.to_string(),
            "fed.clients" => self.base.num_clients = parse_num(canonical, v, "a positive integer")?,
            "fed.active" => self.base.active_per_round = parse_num(canonical, v, "a positive integer")?,
            "fed.rounds" => self.base.rounds = parse_num(canonical, v, "a positive integer")?,
            "fed.omega" => self.base.omega = parse_num(canonical, v, "a real number")?,
            "fed.sigma" => self.base.sigma = parse_num(canonical, v, "a positive integer")?,
            "fed.rho" => self.base.rho = parse_num(canonical, v, "a positive integer")?,
            "fed.scheme" => self.base.scheme = v.parse()?,
            "model.hidden" => self.base.hidden_widths = parse_widths(canonical, v)?,
            "client.lr" => self.base.client_lr = parse_num(canonical, v, "a real number")?,
            "client.steps" => self.base.client_steps = parse_num(canonical, v, "an integer")?,
            "client.batch" => self.base.batch_size = parse_num(canonical, v, "a positive integer")?,
            "client.replacement" => self.base.with_replacement = parse_bool(canonical, v)?,
            "gen.hidden" => self.base.gen_hidden = parse_widths(canonical, v)?,
            "gen.noise_dim" => self.base.noise_dim = parse_num(canonical, v, "a positive integer")?,
            "gen.merge" => self.base.merge = v.parse()?,
            "distill.method" => self.base.distiller = v.parse()?,
            "distill.mode" => self.base.mode = v.parse()?,
            "distill.reinit" => self.base.reinit = v.parse()?,
            "distill.gate" => self.base.gate = v.parse()?,
            "distill.weighting" => self.base.weighting = v.parse()?,
            "distill.ema" => self.base.ema_enabled = parse_bool(canonical, v)?,
            "distill.lambda" => self.base.lambda = parse_num(canonical, v, "a real number")?,
            "distill.alpha" => self.base.alpha = parse_num(canonical, v, "a real number")?,
            "distill.beta_tran" => self.base.beta_tran = parse_num(canonical, v, "a real number")?,
            "distill.beta_div" => self.base.beta_div = parse_num(canonical, v, "a real number")?,
            "distill.iters" => self.base.iters = parse_num(canonical, v, "an integer")?,
            "distill.gen_iters" => self.base.gen_iters = parse_num(canonical, v, "an integer")?,
            "distill.model_iters" => self.base.model_iters = parse_num(canonical, v, "an integer")?,
            "distill.gen_lr" => self.base.gen_lr = parse_num(canonical, v, "a real number")?,
            "distill.b1" => self.base.b1 = parse_num(canonical, v, "a real number")?,
            "distill.b2" => self.base.b2 = parse_num(canonical, v, "a real number")?,
            "distill.model_lr" => self.base.model_lr = parse_num(canonical, v, "a real number")?,
            "distill.textbook_adam" => self.base.textbook_adam = parse_bool(canonical, v)?,
            "distill.dump_synthetic" => self.base.dump_synthetic = parse_bool(canonical, v)?,
            "output.checkpoint" => self.base.save_checkpoint = parse_bool(canonical, v)?,
            "output.partition" => self.base.save_partition = parse_bool(canonical, v)?,
            "run.seed" => self.base.seed = parse_num(canonical, v, "an integer")?,
            _ => unreachable!("resolve_key returned an unhandled canonical key"),
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<ExperimentConfig> {
        self.base.data = match self.kind.as_str() {
            "blobs" => DataConfig::Blobs {
                classes: self.classes,
                dim: self.dim,
                per_class: self.per_class,
                test_per_class: self.test_per_class,
                spread: self.spread,
            },
            "idx" => DataConfig::Idx {
                images: self.images,
                labels: self.labels,
                test_images: self.test_images,
                test_labels: self.test_labels,
            },
            other => return Err(Error::config("data.kind", format!("unknown kind `{other}`"))),
        };
        self.base.validate()?;
        Ok(self.base)
    }
}

/// Splits one `key=value` assignment.
pub fn split_assignment(raw: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(raw, "expected key=value")),
    }
}

/// Parses config text, applying assignments over the built-in defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut draft = ConfigDraft::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = split_assignment(line)
            .map_err(|_| Error::config(format!("line {}", lineno + 1), format!("not key=value: `{line}`")))?;
        draft.set(&key, &value)?;
    }
    draft.finish()
}

/// Applies `key=value` overrides on top of a parsed config.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut draft = ConfigDraft::from_config(cfg);
    for (key, value) in overrides {
        draft.set(key, value)?;
    }
    draft.finish()
}

fn widths_to_string(widths: &[usize]) -> String {
    widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical textual form of a resolved config: parsing it back yields the
/// identical configuration.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let draft = ConfigDraft::from_config(cfg);
    let mut out = String::new();
    let mut push = |key: &str, value: String| {
        out.push_str(key);
        out.push('=');
        out.push_str(&value);
        out.push('\n');
    };
    push("data.kind", draft.kind.clone());
    push("data.classes", draft.classes.to_string());
    push("data.dim", draft.dim.to_string());
    push("data.per_class", draft.per_class.to_string());
    push("data.test_per_class", draft.test_per_class.to_string());
    push("data.spread", format!("{}", draft.spread));
    push("data.images", draft.images.clone());
    push("data.labels", draft.labels.clone());
    push("data.test_images", draft.test_images.clone());
    push("data.test_labels", draft.test_labels.clone());
    push("fed.clients", cfg.num_clients.to_string());
    push("fed.active", cfg.active_per_round.to_string());
    push("fed.rounds", cfg.rounds.to_string());
    push("fed.omega", format!("{}", cfg.omega));
    push("fed.sigma", cfg.sigma.to_string());
    push("fed.rho", cfg.rho.to_string());
    push("fed.scheme", cfg.scheme.as_str().to_string());
    push("model.hidden", widths_to_string(&cfg.hidden_widths));
    push("client.lr", format!("{}", cfg.client_lr));
    push("client.steps", cfg.client_steps.to_string());
    push("client.batch", cfg.batch_size.to_string());
    push("client.replacement", cfg.with_replacement.to_string());
    push("gen.hidden", widths_to_string(&cfg.gen_hidden));
    push("gen.noise_dim", cfg.noise_dim.to_string());
    push("gen.merge", cfg.merge.as_str().to_string());
    push("distill.method", cfg.distiller.as_str().to_string());
    push("distill.mode", cfg.mode.as_str().to_string());
    push("distill.reinit", cfg.reinit.as_str().to_string());
    push("distill.gate", cfg.gate.as_str().to_string());
    push("distill.weighting", cfg.weighting.as_str().to_string());
    push("distill.ema", cfg.ema_enabled.to_string());
    push("distill.lambda", format!("{}", cfg.lambda));
    push("distill.alpha", format!("{}", cfg.alpha));
    push("distill.beta_tran", format!("{}", cfg.beta_tran));
    push("distill.beta_div", format!("{}", cfg.beta_div));
    push("distill.iters", cfg.iters.to_string());
    push("distill.gen_iters", cfg.gen_iters.to_string());
    push("distill.model_iters", cfg.model_iters.to_string());
    push("distill.gen_lr", format!("{}", cfg.gen_lr));
    push("distill.b1", format!("{}", cfg.b1));
    push("distill.b2", format!("{}", cfg.b2));
    push("distill.model_lr", format!("{}", cfg.model_lr));
    push("distill.textbook_adam", cfg.textbook_adam.to_string());
    push("distill.dump_synthetic", cfg.dump_synthetic.to_string());
    push("output.checkpoint", cfg.save_checkpoint.to_string());
    push("output.partition", cfg.save_partition.to_string());
    push("run.seed", cfg.seed.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::GateVariant;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let rendered = render_config(&cfg);
        let back = parse_config(&rendered).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = parse_config("fed.bogus=3\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("fed.bogus"), "{text}");
    }

    #[test]
    fn suffix_resolution_and_ambiguity() {
        let cfg = parse_config("gate=nabla\n").unwrap();
        assert_eq!(cfg.gate, GateVariant::Nabla);
        let err = parse_config("hidden=4\n").unwrap_err();
        assert!(err.to_string().contains("ambiguous"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("# full config\n\nfed.rounds=3 # short run\n").unwrap();
        assert_eq!(cfg.rounds, 3);
    }

    #[test]
    fn overrides_apply_on_top() {
        let base = parse_config("fed.rounds=3\n").unwrap();
        let over =
            apply_overrides(&base, &[("merge".to_string(), "cat".to_string())]).unwrap();
        assert_eq!(over.rounds, 3);
        assert_eq!(over.merge, crate::models::MergeOp::Cat);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = parse_config("fed.rounds=abc\n").unwrap_err();
        assert!(err.to_string().contains("fed.rounds"));
        let err = parse_config("distill.ema=yes\n").unwrap_err();
        assert!(err.to_string().contains("distill.ema"));
    }

    #[test]
    fn idx_kind_round_trips() {
        let text = "data.kind=idx\ndata.images=a.idx\ndata.labels=b.idx\ndata.test_images=c.idx\ndata.test_labels=d.idx\n";
        let cfg = parse_config(text).unwrap();
        match &cfg.data {
            crate::orchestrator::DataConfig::Idx { images, .. } => assert_eq!(images, "a.idx"),
            _ => panic!("expected idx"),
        }
        let back = parse_config(&render_config(&cfg)).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn semantic_validation_runs_at_finish() {
        let err = parse_config("fed.active=20\n").unwrap_err();
        assert!(err.to_string().contains("active"));
    }
}
