//! Sectioned key-value run configuration (TOML). Unknown keys are rejected
//! and all stage inputs are validated before a stage runs.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::evaluation::SplitFractions;
use crate::expansion::ScoreMode;
use crate::kg::LoyaltyRules;
use crate::synthgen::GenConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result, ViewKind};

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base RNG seed for every stage; `--seed` overrides.
    pub seed: u64,
    pub paths: PathsSection,
    pub gen: GenConfig,
    pub train: TrainSection,
    pub loyalty: LoyaltySection,
    pub fusion: FusionSection,
    pub expansion: ExpansionSection,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: PathsSection::default(),
            gen: GenConfig::default(),
            train: TrainSection::default(),
            loyalty: LoyaltySection::default(),
            fusion: FusionSection::default(),
            expansion: ExpansionSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Stage outputs land here; `--out` overrides.
    pub out_dir: String,
    /// Input data directory; empty means `<out_dir>/data` (where `gen`
    /// writes).
    pub data_dir: String,
    pub ichiba_triples: String,
    pub travel_triples: String,
    pub family_triples: String,
    pub attributes: String,
    pub entity_types: String,
    pub groups: String,
    /// Optional file whose first tab-separated column lists the campaign
    /// universe (seed and candidate users). Required by the family view;
    /// when set, view exports are restricted to these users.
    pub universe: Option<String>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out_dir: "out".into(),
            data_dir: String::new(),
            ichiba_triples: "ichiba_triples.tsv".into(),
            travel_triples: "travel_triples.tsv".into(),
            family_triples: "family_triples.tsv".into(),
            attributes: "attributes.tsv".into(),
            entity_types: "entity_types.tsv".into(),
            groups: "groups.tsv".into(),
            universe: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverride {
    pub dim: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub ngram_order: Option<usize>,
    pub negatives_per_positive: Option<usize>,
    pub val_fraction: Option<f64>,
    pub cnn_filters: Option<usize>,
    pub cnn_width: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dim: usize,
    pub lr: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub ngram_order: usize,
    pub negatives_per_positive: usize,
    pub val_fraction: f64,
    pub cnn_filters: usize,
    pub cnn_width: usize,
    pub demography: TrainOverride,
    pub loyalty: TrainOverride,
    pub ichiba: TrainOverride,
    pub travel: TrainOverride,
    pub family: TrainOverride,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            dim: d.dim,
            lr: d.lr,
            gamma: d.gamma,
            alpha: d.alpha,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            ngram_order: d.ngram_order,
            negatives_per_positive: d.negatives_per_positive,
            val_fraction: d.val_fraction,
            cnn_filters: d.cnn_filters,
            cnn_width: d.cnn_width,
            demography: TrainOverride::default(),
            loyalty: TrainOverride::default(),
            ichiba: TrainOverride::default(),
            travel: TrainOverride::default(),
            family: TrainOverride::default(),
        }
    }
}

impl TrainSection {
    fn override_for(&self, view: ViewKind) -> &TrainOverride {
        match view {
            ViewKind::Demography => &self.demography,
            ViewKind::Loyalty => &self.loyalty,
            ViewKind::Ichiba => &self.ichiba,
            ViewKind::Travel => &self.travel,
            ViewKind::Family => &self.family,
        }
    }

    /// Base settings merged with the view's override table.
    pub fn config_for(&self, view: ViewKind, seed: u64) -> TrainConfig {
        let o = self.override_for(view);
        TrainConfig {
            dim: o.dim.unwrap_or(self.dim),
            lr: o.lr.unwrap_or(self.lr),
            gamma: o.gamma.unwrap_or(self.gamma),
            alpha: o.alpha.unwrap_or(self.alpha),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            max_epochs: o.max_epochs.unwrap_or(self.max_epochs),
            patience: o.patience.unwrap_or(self.patience),
            ngram_order: o.ngram_order.unwrap_or(self.ngram_order),
            negatives_per_positive: o
                .negatives_per_positive
                .unwrap_or(self.negatives_per_positive),
            val_fraction: o.val_fraction.unwrap_or(self.val_fraction),
            cnn_filters: o.cnn_filters.unwrap_or(self.cnn_filters),
            cnn_width: o.cnn_width.unwrap_or(self.cnn_width),
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LoyaltySection {
    pub interaction_relations: Vec<String>,
    pub value_link_relations: Vec<String>,
    pub direct_value_types: Vec<String>,
    pub min_repeat: usize,
}

impl Default for LoyaltySection {
    fn default() -> Self {
        let r = LoyaltyRules::default();
        LoyaltySection {
            interaction_relations: r.interaction_relations,
            value_link_relations: r.value_link_relations,
            direct_value_types: r.direct_value_types,
            min_repeat: r.min_repeat,
        }
    }
}

impl LoyaltySection {
    pub fn rules(&self) -> LoyaltyRules {
        LoyaltyRules {
            interaction_relations: self.interaction_relations.clone(),
            value_link_relations: self.value_link_relations.clone(),
            direct_value_types: self.direct_value_types.clone(),
            min_repeat: self.min_repeat,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Weight-reference iterations; 1 means weights against the plain mean.
    pub iters: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { iters: 1 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSection {
    /// `centroid` or `max-sim`.
    pub mode: String,
    pub threshold: Option<f64>,
    pub top_n: Option<usize>,
    pub use_index: bool,
    /// Partitions probed by index queries; 0 means ceil(K/4).
    pub index_probe: usize,
}

impl Default for ExpansionSection {
    fn default() -> Self {
        ExpansionSection {
            mode: "centroid".into(),
            threshold: None,
            top_n: None,
            use_index: false,
            index_probe: 0,
        }
    }
}

impl ExpansionSection {
    pub fn score_mode(&self) -> Result<ScoreMode> {
        ScoreMode::parse(&self.mode)
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub target_group: usize,
    pub seed_fraction: f64,
    pub split_train: f64,
    pub split_validation: f64,
    pub split_test: f64,
    pub lr_l2: f64,
    pub lr_rate: f64,
    pub lr_iters: usize,
    /// Also run plain logistic regression on raw demographic features.
    pub raw_baseline: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let f = SplitFractions::default();
        let lr = crate::evaluation::LrParams::default();
        EvaluationSection {
            target_group: 0,
            seed_fraction: 0.2,
            split_train: f.train,
            split_validation: f.validation,
            split_test: f.test,
            lr_l2: lr.l2,
            lr_rate: lr.lr,
            lr_iters: lr.max_iters,
            raw_baseline: true,
        }
    }
}

impl EvaluationSection {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.split_train,
            validation: self.split_validation,
            test: self.split_test,
        }
    }

    pub fn lr_params(&self) -> crate::evaluation::LrParams {
        crate::evaluation::LrParams {
            l2: self.lr_l2,
            lr: self.lr_rate,
            max_iters: self.lr_iters,
        }
    }
}

impl RunConfig {
    pub fn parse(content: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(content).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let content = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Config(format!("{}: not valid UTF-8", path.display())))?;
        let cfg = Self::parse(content)?;
        Ok((cfg, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.expansion.score_mode()?;
        if let Some(t) = self.expansion.threshold {
            crate::expansion::validate_threshold(t)?;
        }
        if self.expansion.top_n == Some(0) {
            return Err(Error::Config("expansion top_n must be >= 1".into()));
        }
        self.evaluation.fractions().validate()?;
        if !(0.0 < self.evaluation.seed_fraction && self.evaluation.seed_fraction < 1.0) {
            return Err(Error::Config("evaluation seed_fraction must be in (0, 1)".into()));
        }
        // Train settings are validated per view so overrides are covered.
        for view in ViewKind::ALL {
            self.train.config_for(view, self.seed).validate()?;
        }
        Ok(())
    }
}

/// Path helpers shared by the CLI stages.
#[derive(Debug, Clone)]
pub struct ResolvedPaths {
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub ichiba_triples: PathBuf,
    pub travel_triples: PathBuf,
    pub family_triples: PathBuf,
    pub attributes: PathBuf,
    pub entity_types: PathBuf,
    pub groups: PathBuf,
    pub universe: Option<PathBuf>,
}

impl PathsSection {
    /// Resolve everything relative to the config file's directory; the
    /// `--out` override replaces `out_dir`.
    pub fn resolve(&self, config_dir: &Path, out_override: Option<&Path>) -> ResolvedPaths {
        let out_dir = match out_override {
            Some(p) => p.to_path_buf(),
            None => config_dir.join(&self.out_dir),
        };
        let data_dir = if self.data_dir.is_empty() {
            out_dir.join("data")
        } else {
            config_dir.join(&self.data_dir)
        };
        let in_data = |name: &str| data_dir.join(name);
        ResolvedPaths {
            ichiba_triples: in_data(&self.ichiba_triples),
            travel_triples: in_data(&self.travel_triples),
            family_triples: in_data(&self.family_triples),
            attributes: in_data(&self.attributes),
            entity_types: in_data(&self.entity_types),
            groups: in_data(&self.groups),
            universe: self.universe.as_deref().map(in_data),
            out_dir,
            data_dir,
        }
    }
}

/// Parse a `--views` selector like `d,l,i,t,f` or `dli` into a slot-ordered,
/// deduplicated list.
pub fn parse_views(s: &str) -> Result<Vec<ViewKind>> {
    let mut selected = [false; 5];
    for c in s.chars() {
        if c == ',' || c.is_whitespace() {
            continue;
        }
        match ViewKind::from_code(c) {
            Some(v) => selected[v.slot()] = true,
            None => {
                return Err(Error::Config(format!(
                    "unknown view code `{c}` (expected d, l, i, t, f)"
                )))
            }
        }
    }
    let views: Vec<ViewKind> = ViewKind::ALL
        .into_iter()
        .filter(|v| selected[v.slot()])
        .collect();
    if views.is_empty() {
        return Err(Error::Config("no views selected".into()));
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.dim, 50);
        assert_eq!(cfg.fusion.iters, 1);
        assert_eq!(cfg.expansion.mode, "centroid");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("bogus_key = 1\n").is_err());
        assert!(RunConfig::parse("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[paths]\nnope = \"x\"\n").is_err());
    }

    #[test]
    fn per_view_overrides_merge_over_base() {
        let cfg = RunConfig::parse(
            "[train]\nlr = 0.05\ndim = 16\n[train.demography]\nlr = 0.5\n",
        )
        .unwrap();
        let base = cfg.train.config_for(ViewKind::Ichiba, 1);
        assert_eq!(base.lr, 0.05);
        assert_eq!(base.dim, 16);
        let demo = cfg.train.config_for(ViewKind::Demography, 1);
        assert_eq!(demo.lr, 0.5);
        assert_eq!(demo.dim, 16);
        assert_eq!(demo.seed, 1);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[expansion]\nmode = \"nearest\"\n").is_err());
        assert!(RunConfig::parse("[expansion]\nthreshold = 1.5\n").is_err());
        assert!(RunConfig::parse("[expansion]\ntop_n = 0\n").is_err());
        assert!(RunConfig::parse("[evaluation]\nsplit_train = 0.9\n").is_err());
        assert!(RunConfig::parse("[train]\ngamma = -1.0\n").is_err());
        assert!(RunConfig::parse("[gen]\nn_groups = 1\n").is_err());
    }

    #[test]
    fn views_selector_parses_both_spellings() {
        let a = parse_views("d,l,i,t,f").unwrap();
        let b = parse_views("fdlit").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let sub = parse_views("d,t").unwrap();
        assert_eq!(sub, vec![ViewKind::Demography, ViewKind::Travel]);
        assert!(parse_views("x").is_err());
        assert!(parse_views("").is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let paths = PathsSection::default();
        let r = paths.resolve(Path::new("/cfg"), None);
        assert_eq!(r.out_dir, Path::new("/cfg/out"));
        assert_eq!(r.data_dir, Path::new("/cfg/out/data"));
        assert_eq!(r.groups, Path::new("/cfg/out/data/groups.tsv"));
        let r = paths.resolve(Path::new("/cfg"), Some(Path::new("/elsewhere")));
        assert_eq!(r.out_dir, Path::new("/elsewhere"));
        assert_eq!(r.data_dir, Path::new("/elsewhere/data"));
    }
}
