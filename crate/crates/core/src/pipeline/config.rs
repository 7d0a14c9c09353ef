//! Flat `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::PipelineError;
use crate::graph_encoder::EncoderVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalQuery {
    VisionGrid,
    QFormer,
}

impl fmt::Display for RetrievalQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalQuery::VisionGrid => "vision_grid",
            RetrievalQuery::QFormer => "qformer",
        })
    }
}

impl FromStr for RetrievalQuery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vision_grid" => Ok(RetrievalQuery::VisionGrid),
            "qformer" => Ok(RetrievalQuery::QFormer),
            _ => Err(format!("unknown retrieval_query `{s}` (expected vision_grid or qformer)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedderKind {
    Hashed,
    External,
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedderKind::Hashed => "hashed",
            EmbedderKind::External => "external",
        })
    }
}

impl FromStr for EmbedderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hashed" => Ok(EmbedderKind::Hashed),
            "external" => Ok(EmbedderKind::External),
            _ => Err(format!("unknown embedder `{s}` (expected hashed or external)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub d: usize,
    pub d_dec: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub patch: usize,
    pub scale_budgets: Vec<usize>,
    pub final_scale_index: usize,
    pub n_visual: usize,
    pub tau: f64,
    pub retrieval_query: RetrievalQuery,
    pub use_graph: bool,
    pub use_rgcn_variant: EncoderVariant,
    pub use_multiscale: bool,
    pub use_dvg: bool,
    pub tie_projections: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub max_len: usize,
    pub embedder: EmbedderKind,
    /// Program and arguments of the external embedder, whitespace separated.
    pub embedder_command: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            d: 64,
            d_dec: 64,
            heads: 4,
            decoder_layers: 2,
            patch: 8,
            scale_budgets: vec![60, 120, 180, 240, 300],
            final_scale_index: 4,
            n_visual: 500,
            tau: 0.5,
            retrieval_query: RetrievalQuery::VisionGrid,
            use_graph: true,
            use_rgcn_variant: EncoderVariant::Rgcn,
            use_multiscale: true,
            use_dvg: true,
            tie_projections: false,
            lr: 9e-5,
            steps: 2000,
            batch: 8,
            max_len: 64,
            embedder: EmbedderKind::Hashed,
            embedder_command: String::new(),
        }
    }
}

const KEYS: [&str; 22] = [
    "seed",
    "d",
    "d_dec",
    "heads",
    "decoder_layers",
    "patch",
    "scale_budgets",
    "final_scale_index",
    "n_visual",
    "tau",
    "retrieval_query",
    "use_graph",
    "use_rgcn_variant",
    "use_multiscale",
    "use_dvg",
    "tie_projections",
    "lr",
    "steps",
    "batch",
    "max_len",
    "embedder",
    "embedder_command",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

impl PipelineConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let v = v.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(v);
        match key {
            "seed" => self.seed = parse_num(v)?,
            "d" => self.d = parse_num(v)?,
            "d_dec" => self.d_dec = parse_num(v)?,
            "heads" => self.heads = parse_num(v)?,
            "decoder_layers" => self.decoder_layers = parse_num(v)?,
            "patch" => self.patch = parse_num(v)?,
            "scale_budgets" => {
                self.scale_budgets = v
                    .split(',')
                    .map(|b| parse_num::<usize>(b.trim()))
                    .collect::<Result<_, _>>()?
            }
            "final_scale_index" => self.final_scale_index = parse_num(v)?,
            "n_visual" => self.n_visual = parse_num(v)?,
            "tau" => self.tau = parse_num(v)?,
            "retrieval_query" => self.retrieval_query = v.parse()?,
            "use_graph" => self.use_graph = parse_bool(v)?,
            "use_rgcn_variant" => self.use_rgcn_variant = v.parse().map_err(|e| format!("{e}"))?,
            "use_multiscale" => self.use_multiscale = parse_bool(v)?,
            "use_dvg" => self.use_dvg = parse_bool(v)?,
            "tie_projections" => self.tie_projections = parse_bool(v)?,
            "lr" => self.lr = parse_num(v)?,
            "steps" => self.steps = parse_num(v)?,
            "batch" => self.batch = parse_num(v)?,
            "max_len" => self.max_len = parse_num(v)?,
            "embedder" => self.embedder = v.parse()?,
            "embedder_command" => self.embedder_command = v.to_string(),
            _ => return Err(format!("unknown key `{key}` (known keys: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Parses config text. Missing keys keep their defaults; when
    /// `scale_budgets` is given without `final_scale_index` the last scale
    /// is selected.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::default();
        let mut saw_final = false;
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PipelineError::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if seen.contains(&k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            seen.push(k.to_string());
            cfg.set(k, v).map_err(err)?;
            saw_final |= k == "final_scale_index";
        }
        if !saw_final {
            cfg.final_scale_index = cfg.scale_budgets.len().saturating_sub(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            PipelineError::Config { line, message } => PipelineError::Config {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn render(&self) -> String {
        let budgets: Vec<String> = self.scale_budgets.iter().map(|b| b.to_string()).collect();
        let values: [String; 22] = [
            self.seed.to_string(),
            self.d.to_string(),
            self.d_dec.to_string(),
            self.heads.to_string(),
            self.decoder_layers.to_string(),
            self.patch.to_string(),
            budgets.join(","),
            self.final_scale_index.to_string(),
            self.n_visual.to_string(),
            self.tau.to_string(),
            self.retrieval_query.to_string(),
            self.use_graph.to_string(),
            self.use_rgcn_variant.to_string(),
            self.use_multiscale.to_string(),
            self.use_dvg.to_string(),
            self.tie_projections.to_string(),
            self.lr.to_string(),
            self.steps.to_string(),
            self.batch.to_string(),
            self.max_len.to_string(),
            self.embedder.to_string(),
            self.embedder_command.clone(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| if v.is_empty() { format!("{k} =\n") } else { format!("{k} = {v}\n") })
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::BadParams(m));
        for (name, v) in [
            ("d", self.d),
            ("d_dec", self.d_dec),
            ("heads", self.heads),
            ("patch", self.patch),
            ("batch", self.batch),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d % self.heads != 0 || self.d_dec % self.heads != 0 {
            return bad(format!("d = {} and d_dec = {} must be divisible by heads = {}", self.d, self.d_dec, self.heads));
        }
        if self.scale_budgets.is_empty() || self.scale_budgets.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("scale_budgets must be strictly increasing, got {:?}", self.scale_budgets));
        }
        if self.final_scale_index >= self.scale_budgets.len() {
            return bad(format!(
                "final_scale_index {} out of range for {} budgets",
                self.final_scale_index,
                self.scale_budgets.len()
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.use_dvg && self.n_visual == 0 {
            return bad("n_visual must be positive when use_dvg is on".into());
        }
        if self.embedder == EmbedderKind::External && self.embedder_command.split_whitespace().next().is_none() {
            return bad("embedder = external needs embedder_command".into());
        }
        Ok(())
    }

    /// Budget of the selected scale.
    pub fn final_budget(&self) -> usize {
        self.scale_budgets[self.final_scale_index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = PipelineConfig::parse("# run\n\nsteps = 10 # short\nuse_dvg=false\nscale_budgets = 5, 9\n").unwrap();
        assert_eq!(c.steps, 10);
        assert!(!c.use_dvg);
        assert_eq!(c.scale_budgets, vec![5, 9]);
        assert_eq!(c.final_scale_index, 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = PipelineConfig::parse("steps = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = PipelineConfig::parse("\nsteps = x\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = PipelineConfig::parse("steps\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = PipelineConfig::parse("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
        assert!(PipelineConfig::parse("scale_budgets = 5,5\n").is_err());
        assert!(PipelineConfig::parse("heads = 3\n").is_err());
        assert!(PipelineConfig::parse("tau = 0\n").is_err());
        assert!(PipelineConfig::parse("use_rgcn_variant = gin\n").is_err());
        assert!(PipelineConfig::parse("embedder = external\n").is_err());
        let c = PipelineConfig::parse("embedder = \"external\"\nembedder_command = ./emb --fast\n").unwrap();
        assert_eq!(PipelineConfig::parse(&c.render()).unwrap(), c);
    }
}
