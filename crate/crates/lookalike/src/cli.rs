//! Operator surface: gen / train / fuse / expand / eval / gridsearch
//! subcommands over a shared TOML config, with a JSON manifest per stage.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{parse_views, ResolvedPaths, RunConfig};
use crate::embed_file::{load_embeddings, write_embeddings, EmbeddingSet};
use crate::evaluation::{
    build_pool, demographic_raw_features, export_features, run_experiment, write_report_csv,
    ExperimentInputs, PoolSplits,
};
use crate::expansion::{
    brute_force_query, expand_threshold, expand_top_n, load_seed_list, score_candidates,
    validate_threshold, write_expansion_csv, ExpansionResult, PartitionIndex, ScoreMode, SeedList,
};
use crate::fusion::{fuse_sets, write_weight_sidecar};
use crate::kg::{family_subgraph, loyalty_graph, EntityId, GraphSource, KnowledgeGraph};
use crate::manifest::{config_hash, write_manifest, RunManifest};
use crate::synthgen::{generate, load_groups, make_campaign};
use crate::trainer::{train_view, write_loss_history, TrainedView};
use crate::{Error, Result, ViewKind};

#[derive(Debug, Parser)]
#[command(name = "lookalike", version, about = "Multi-view user embeddings and audience expansion")]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "lookalike.toml")]
    pub config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// View selection, e.g. `d,l,i,t,f` or `di`.
    #[arg(long, global = true, default_value = "d,l,i,t,f")]
    pub views: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset with planted groups.
    Gen,
    /// Train the selected views and export their user embeddings.
    Train {
        /// Train independent views on separate threads.
        #[arg(long)]
        parallel_views: bool,
    },
    /// Combine trained view embeddings into fused user vectors.
    Fuse {
        /// Weight-reference iterations (default from config).
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Rank candidate users against a seed list.
    Expand {
        /// Seed list file, one user label per line.
        #[arg(long)]
        seeds: PathBuf,
        /// Optional candidate list (first tab-separated column); defaults to
        /// every fused user.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        top_n: Option<usize>,
        /// `centroid` or `max-sim` (default from config).
        #[arg(long)]
        mode: Option<String>,
        /// Rank through the partition index instead of brute force
        /// (centroid mode with --top-n only).
        #[arg(long)]
        use_index: bool,
    },
    /// Build a campaign from the ground-truth groups and compare methods.
    Eval,
    /// Sweep dim x lr x gamma and report the best validation PR-AUC.
    Gridsearch {
        /// Comma-separated dimensions (default 50,75,100).
        #[arg(long)]
        dims: Option<String>,
        /// Comma-separated learning rates (default 0.001,0.01,0.1).
        #[arg(long)]
        lrs: Option<String>,
        /// Comma-separated margins (default 1,5,10).
        #[arg(long)]
        gammas: Option<String>,
        /// Cap epochs for every grid cell.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub config_bytes: Vec<u8>,
    pub paths: ResolvedPaths,
    pub seed: u64,
    pub views: Vec<ViewKind>,
}

impl Ctx {
    pub fn new(cli: &Cli) -> Result<Ctx> {
        let (cfg, config_bytes) = RunConfig::load(&cli.config)?;
        let config_dir = cli
            .config
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let paths = cfg.paths.resolve(&config_dir, cli.out.as_deref());
        let seed = cli.seed.unwrap_or(cfg.seed);
        let views = parse_views(&cli.views)?;
        Ok(Ctx {
            cfg,
            config_bytes,
            paths,
            seed,
            views,
        })
    }

    fn manifest(&self, stage: &str, wall_ms: u128, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let m = RunManifest {
            stage: stage.to_string(),
            config_sha256: config_hash(&self.config_bytes),
            seed: self.seed,
            views: self.views.iter().map(|v| v.name().to_string()).collect(),
            wall_ms,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        write_manifest(&self.paths.out_dir, &m)?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    std::fs::create_dir_all(&ctx.paths.out_dir)
        .map_err(|e| Error::io(ctx.paths.out_dir.display().to_string(), e))?;
    match &cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Train { parallel_views } => cmd_train(&ctx, *parallel_views),
        Command::Fuse { iters } => cmd_fuse(&ctx, *iters),
        Command::Expand {
            seeds,
            candidates,
            threshold,
            top_n,
            mode,
            use_index,
        } => cmd_expand(
            &ctx,
            seeds,
            candidates.as_deref(),
            *threshold,
            *top_n,
            mode.as_deref(),
            *use_index,
        ),
        Command::Eval => cmd_eval(&ctx),
        Command::Gridsearch {
            dims,
            lrs,
            gammas,
            max_epochs,
        } => cmd_gridsearch(&ctx, dims.as_deref(), lrs.as_deref(), gammas.as_deref(), *max_epochs),
    }
}

// ---------------------------------------------------------------------------
// Stage output locations
// ---------------------------------------------------------------------------

pub fn view_embedding_path(out_dir: &Path, view: ViewKind) -> PathBuf {
    out_dir.join(format!("emb_{}.tsv", view.name()))
}

pub fn view_loss_path(out_dir: &Path, view: ViewKind) -> PathBuf {
    out_dir.join(format!("loss_{}.csv", view.name()))
}

pub fn fused_embedding_path(out_dir: &Path) -> PathBuf {
    out_dir.join("emb_fused.tsv")
}

pub fn fused_weights_path(out_dir: &Path) -> PathBuf {
    out_dir.join("fused_weights.tsv")
}

pub fn expand_csv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("expand.csv")
}

pub fn report_csv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("report.csv")
}

pub fn features_path(out_dir: &Path) -> PathBuf {
    out_dir.join("features.tsv")
}

pub fn campaign_seeds_path(out_dir: &Path) -> PathBuf {
    out_dir.join("campaign_seeds.txt")
}

pub fn gridsearch_csv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("gridsearch.csv")
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            file: path.display().to_string(),
            producer: producer.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let mut gcfg = ctx.cfg.gen.clone();
    gcfg.seed = ctx.seed; // the global seed drives every stage
    let files = generate(&gcfg, &ctx.paths.data_dir)?;
    println!(
        "gen: {} users, {} groups -> {}",
        gcfg.n_users,
        gcfg.n_groups,
        ctx.paths.data_dir.display()
    );
    let outputs = [
        files.ichiba_triples.as_path(),
        files.travel_triples.as_path(),
        files.attributes.as_path(),
        files.family_triples.as_path(),
        files.entity_types.as_path(),
        files.groups.as_path(),
    ];
    ctx.manifest("gen", start.elapsed().as_millis(), &[], &outputs)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Read the first tab-separated column of a user list file.
fn load_user_column(path: &Path) -> Result<Vec<String>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut users = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let first = line.split('\t').next().unwrap_or("");
        if first.is_empty() {
            return Err(Error::parse(
                &path.display().to_string(),
                i + 1,
                "empty user field",
            ));
        }
        users.push(first.to_string());
    }
    if users.is_empty() {
        return Err(Error::Invalid(format!("{}: empty user list", path.display())));
    }
    Ok(users)
}

struct SourceGraphs {
    ichiba: Option<KnowledgeGraph>,
    travel: Option<KnowledgeGraph>,
    demography: Option<KnowledgeGraph>,
    family: Option<KnowledgeGraph>,
    universe: Option<Vec<String>>,
}

fn load_sources(ctx: &Ctx, views: &[ViewKind]) -> Result<SourceGraphs> {
    let has = |v: ViewKind| views.contains(&v);
    let need_ichiba = has(ViewKind::Ichiba) || has(ViewKind::Loyalty) || has(ViewKind::Family);
    let need_travel = has(ViewKind::Travel) || has(ViewKind::Loyalty);
    let p = &ctx.paths;

    if need_ichiba {
        require(&p.ichiba_triples, "gen")?;
    }
    if need_travel {
        require(&p.travel_triples, "gen")?;
    }
    if has(ViewKind::Demography) {
        require(&p.attributes, "gen")?;
    }
    if has(ViewKind::Family) {
        require(&p.family_triples, "gen")?;
    }
    require(&p.entity_types, "gen")?;

    let universe = match &p.universe {
        Some(path) => {
            require(path, "gen")?;
            Some(load_user_column(path)?)
        }
        None => None,
    };

    let ichiba = if need_ichiba {
        Some(
            GraphSource {
                view: Some(ViewKind::Ichiba),
                triple_files: vec![p.ichiba_triples.clone()],
                entity_types_file: Some(p.entity_types.clone()),
                ..Default::default()
            }
            .load()?,
        )
    } else {
        None
    };
    let travel = if need_travel {
        Some(
            GraphSource {
                view: Some(ViewKind::Travel),
                triple_files: vec![p.travel_triples.clone()],
                entity_types_file: Some(p.entity_types.clone()),
                ..Default::default()
            }
            .load()?,
        )
    } else {
        None
    };
    let demography = if has(ViewKind::Demography) {
        Some(
            GraphSource {
                view: Some(ViewKind::Demography),
                attribute_files: vec![p.attributes.clone()],
                entity_types_file: Some(p.entity_types.clone()),
                add_missing_subjects: true,
                ..Default::default()
            }
            .load()?,
        )
    } else {
        None
    };
    let family = if has(ViewKind::Family) {
        let universe = universe.as_ref().ok_or_else(|| {
            Error::Config("the family view needs [paths] universe (seed and candidate users)".into())
        })?;
        let merged = GraphSource {
            view: Some(ViewKind::Family),
            triple_files: vec![p.family_triples.clone(), p.ichiba_triples.clone()],
            entity_types_file: Some(p.entity_types.clone()),
            ..Default::default()
        }
        .load()?;
        let ids: HashSet<EntityId> = universe
            .iter()
            .filter_map(|u| merged.entity_id(u))
            .collect();
        Some(family_subgraph(&merged, &ids))
    } else {
        None
    };

    Ok(SourceGraphs {
        ichiba,
        travel,
        demography,
        family,
        universe,
    })
}

fn view_graph<'a>(view: ViewKind, sources: &'a SourceGraphs, ctx: &Ctx) -> Result<std::borrow::Cow<'a, KnowledgeGraph>> {
    use std::borrow::Cow;
    Ok(match view {
        ViewKind::Demography => Cow::Borrowed(sources.demography.as_ref().expect("loaded")),
        ViewKind::Ichiba => Cow::Borrowed(sources.ichiba.as_ref().expect("loaded")),
        ViewKind::Travel => Cow::Borrowed(sources.travel.as_ref().expect("loaded")),
        ViewKind::Family => Cow::Borrowed(sources.family.as_ref().expect("loaded")),
        ViewKind::Loyalty => {
            let mut srcs: Vec<&KnowledgeGraph> = Vec::new();
            if let Some(g) = &sources.ichiba {
                srcs.push(g);
            }
            if let Some(g) = &sources.travel {
                srcs.push(g);
            }
            Cow::Owned(loyalty_graph(&srcs, &ctx.cfg.loyalty.rules()))
        }
    })
}

fn export_view(
    ctx: &Ctx,
    trained: &TrainedView,
    kg: &KnowledgeGraph,
    universe: Option<&HashSet<String>>,
) -> Result<(PathBuf, PathBuf)> {
    let set = trained.user_embeddings(kg);
    let filtered = match universe {
        Some(allowed) => {
            let mut out = EmbeddingSet::new(set.dim());
            for (label, v) in set.iter() {
                if allowed.contains(label) {
                    out.push(label.to_string(), v.to_vec())?;
                }
            }
            out
        }
        None => set,
    };
    let emb = view_embedding_path(&ctx.paths.out_dir, trained.view);
    write_embeddings(&emb, &filtered)?;
    let loss = view_loss_path(&ctx.paths.out_dir, trained.view);
    write_loss_history(&loss, &trained.history)?;
    println!(
        "train[{}]: {} users, {} epochs (final val loss {:.4})",
        trained.view,
        filtered.len(),
        trained.history.len(),
        trained.history.last().map(|e| e.val_loss).unwrap_or(0.0)
    );
    Ok((emb, loss))
}

fn cmd_train(ctx: &Ctx, parallel: bool) -> Result<()> {
    let start = Instant::now();
    let sources = load_sources(ctx, &ctx.views)?;
    let universe_set: Option<HashSet<String>> = sources
        .universe
        .as_ref()
        .map(|u| u.iter().cloned().collect());

    let jobs: Vec<(ViewKind, std::borrow::Cow<KnowledgeGraph>)> = ctx
        .views
        .iter()
        .map(|&view| Ok((view, view_graph(view, &sources, ctx)?)))
        .collect::<Result<_>>()?;

    let mut results: Vec<(ViewKind, TrainedView)> = Vec::new();
    if parallel {
        let trained: Vec<Result<(ViewKind, TrainedView)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|(view, kg)| {
                    let cfg = ctx.cfg.train.config_for(*view, ctx.seed);
                    let view = *view;
                    scope.spawn(move || Ok((view, train_view(kg, view, &cfg)?)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("no panics")).collect()
        });
        for r in trained {
            results.push(r?);
        }
    } else {
        for (view, kg) in &jobs {
            let cfg = ctx.cfg.train.config_for(*view, ctx.seed);
            results.push((*view, train_view(kg, *view, &cfg)?));
        }
    }

    let mut outputs = Vec::new();
    for ((view, trained), (_, kg)) in results.iter().zip(&jobs) {
        debug_assert_eq!(*view, trained.view);
        let (emb, loss) = export_view(ctx, trained, kg, universe_set.as_ref())?;
        outputs.push(emb);
        outputs.push(loss);
    }
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    let inputs = [
        ctx.paths.ichiba_triples.as_path(),
        ctx.paths.travel_triples.as_path(),
        ctx.paths.attributes.as_path(),
        ctx.paths.entity_types.as_path(),
    ];
    ctx.manifest("train", start.elapsed().as_millis(), &inputs, &output_refs)
}

// ---------------------------------------------------------------------------
// fuse
// ---------------------------------------------------------------------------

fn cmd_fuse(ctx: &Ctx, iters: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let mut loaded: Vec<(ViewKind, EmbeddingSet)> = Vec::new();
    for &view in &ctx.views {
        let path = view_embedding_path(&ctx.paths.out_dir, view);
        require(&path, "train")?;
        loaded.push((view, load_embeddings(&path)?));
    }
    let mut per_view: [Option<&EmbeddingSet>; 5] = Default::default();
    for (view, set) in &loaded {
        per_view[view.slot()] = Some(set);
    }
    let iters = iters.unwrap_or(ctx.cfg.fusion.iters);
    let (fused_set, fused) = fuse_sets(&per_view, iters)?;

    let emb = fused_embedding_path(&ctx.paths.out_dir);
    write_embeddings(&emb, &fused_set)?;
    let sidecar = fused_weights_path(&ctx.paths.out_dir);
    write_weight_sidecar(&sidecar, &fused)?;
    let fallbacks = fused.iter().filter(|f| f.uniform_fallback).count();
    println!(
        "fuse: {} users from {} views ({} uniform fallbacks)",
        fused_set.len(),
        loaded.len(),
        fallbacks
    );
    let inputs: Vec<PathBuf> = ctx
        .views
        .iter()
        .map(|&v| view_embedding_path(&ctx.paths.out_dir, v))
        .collect();
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    ctx.manifest(
        "fuse",
        start.elapsed().as_millis(),
        &input_refs,
        &[emb.as_path(), sidecar.as_path()],
    )
}

// ---------------------------------------------------------------------------
// expand
// ---------------------------------------------------------------------------

fn cmd_expand(
    ctx: &Ctx,
    seeds_path: &Path,
    candidates_path: Option<&Path>,
    threshold: Option<f64>,
    top_n: Option<usize>,
    mode: Option<&str>,
    use_index: bool,
) -> Result<()> {
    let start = Instant::now();
    let fused_path = fused_embedding_path(&ctx.paths.out_dir);
    require(&fused_path, "fuse")?;
    require(seeds_path, "a seed-list writer")?;
    let fused = load_embeddings(&fused_path)?;
    let seeds = load_seed_list(seeds_path)?;

    let mode = match mode {
        Some(m) => ScoreMode::parse(m)?,
        None => ctx.cfg.expansion.score_mode()?,
    };
    let threshold = threshold.or(ctx.cfg.expansion.threshold);
    let top_n = top_n.or(ctx.cfg.expansion.top_n);
    if threshold.is_some() && top_n.is_some() {
        return Err(Error::Config(
            "set either a threshold or top_n for expansion, not both".into(),
        ));
    }
    if let Some(t) = threshold {
        validate_threshold(t)?;
    }

    let candidates: Vec<String> = match candidates_path {
        Some(p) => {
            require(p, "a candidate-list writer")?;
            load_user_column(p)?
        }
        None => fused.labels().to_vec(),
    };

    let result: ExpansionResult = if use_index {
        let n = match top_n {
            Some(n) => n,
            None => {
                return Err(Error::Config(
                    "--use-index requires --top-n (threshold filtering stays exhaustive)".into(),
                ))
            }
        };
        if mode != ScoreMode::Centroid {
            return Err(Error::Config("--use-index supports centroid mode only".into()));
        }
        let seed_set: HashSet<&str> = seeds.users.iter().map(|s| s.as_str()).collect();
        let mut centroid = vec![0.0; fused.dim()];
        for u in &seeds.users {
            let v = fused
                .get(u)
                .ok_or_else(|| Error::Invalid(format!("seed user `{u}` has no embedding")))?;
            crate::linalg::axpy(&mut centroid, 1.0, v);
        }
        for x in &mut centroid {
            *x /= seeds.users.len() as f64;
        }
        let mut candidate_set = EmbeddingSet::new(fused.dim());
        for user in &candidates {
            if seed_set.contains(user.as_str()) {
                continue;
            }
            if let Some(v) = fused.get(user) {
                candidate_set.push(user.clone(), v.to_vec())?;
            }
        }
        let index = PartitionIndex::build(&candidate_set, ctx.seed)?;
        let probe = if ctx.cfg.expansion.index_probe == 0 {
            index.default_probe()
        } else {
            ctx.cfg.expansion.index_probe
        };
        let ranked = index.query(&centroid, n, probe);
        ExpansionResult {
            ranked,
            params: crate::expansion::ExpandParams::TopN(n),
            mode,
        }
    } else {
        let scored = score_candidates(&fused, &seeds, &candidates, mode)?;
        if scored.is_empty() {
            println!("expand: warning: no candidates left after removing seeds");
        }
        match (threshold, top_n) {
            (Some(t), None) => expand_threshold(&scored, t, mode)?,
            (None, Some(n)) => expand_top_n(&scored, n, mode)?,
            (None, None) => {
                return Err(Error::Config(
                    "set expansion.threshold or expansion.top_n (or pass --threshold/--top-n)".into(),
                ))
            }
            (Some(_), Some(_)) => unreachable!("rejected above"),
        }
    };

    let csv = expand_csv_path(&ctx.paths.out_dir);
    write_expansion_csv(&csv, &result)?;
    println!(
        "expand[{}]: {} seeds -> {} ranked candidates",
        result.mode.name(),
        seeds.users.len(),
        result.ranked.len()
    );
    ctx.manifest(
        "expand",
        start.elapsed().as_millis(),
        &[fused_path.as_path(), seeds_path],
        &[csv.as_path()],
    )
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn campaign_salt(seed: u64) -> u64 {
    seed ^ 0xCA3E_11AA
}

fn pool_salt(seed: u64) -> u64 {
    seed ^ 0x9001_57AF
}

/// Campaign, pool, and seed list shared by eval and gridsearch.
struct EvalSetup {
    seeds: SeedList,
    splits: PoolSplits,
    dropped_seeds: usize,
}

fn eval_setup(ctx: &Ctx, fused: &EmbeddingSet) -> Result<EvalSetup> {
    require(&ctx.paths.groups, "gen")?;
    let groups = load_groups(&ctx.paths.groups)?;
    let e = &ctx.cfg.evaluation;
    let campaign = make_campaign(&groups, e.target_group, e.seed_fraction, campaign_salt(ctx.seed))?;

    // Negatives come from outside the target group.
    let mut universe: Vec<String> = groups
        .iter()
        .filter(|(_, &g)| g != e.target_group)
        .map(|(u, _)| u.clone())
        .collect();
    universe.extend(campaign.holdout_positives.iter().cloned());
    let splits = build_pool(
        &campaign.holdout_positives,
        &universe,
        e.fractions(),
        pool_salt(ctx.seed),
    )?;

    // Seeds must resolve in the fused set; with view subsets some may not.
    let resolvable: Vec<String> = campaign
        .seeds
        .iter()
        .filter(|u| fused.get(u).is_some())
        .cloned()
        .collect();
    let dropped = campaign.seeds.len() - resolvable.len();
    if resolvable.is_empty() {
        return Err(Error::Invalid("no campaign seed has a fused embedding".into()));
    }
    Ok(EvalSetup {
        seeds: SeedList {
            users: resolvable,
            campaign: format!("group{}", e.target_group),
        },
        splits,
        dropped_seeds: dropped,
    })
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let fused_path = fused_embedding_path(&ctx.paths.out_dir);
    require(&fused_path, "fuse")?;
    let fused = load_embeddings(&fused_path)?;
    let setup = eval_setup(ctx, &fused)?;
    if setup.dropped_seeds > 0 {
        println!("eval: warning: {} seeds have no fused embedding", setup.dropped_seeds);
    }

    let raw_features = if ctx.cfg.evaluation.raw_baseline {
        require(&ctx.paths.attributes, "gen")?;
        let demo = GraphSource {
            view: Some(ViewKind::Demography),
            attribute_files: vec![ctx.paths.attributes.clone()],
            add_missing_subjects: true,
            ..Default::default()
        }
        .load()?;
        let mut features = demographic_raw_features(&demo);
        let width = features.values().next().map(|v| v.len()).unwrap_or(0);
        for (user, _) in setup.splits.all() {
            features.entry(user.clone()).or_insert_with(|| vec![0.0; width]);
        }
        Some(features)
    } else {
        None
    };

    let outcomes = run_experiment(&ExperimentInputs {
        fused: &fused,
        seeds: &setup.seeds,
        splits: &setup.splits,
        raw_features: raw_features.as_ref(),
        mode: ctx.cfg.expansion.score_mode()?,
        lr_params: ctx.cfg.evaluation.lr_params(),
    })?;

    let report = report_csv_path(&ctx.paths.out_dir);
    write_report_csv(&report, &outcomes)?;
    let features_file = features_path(&ctx.paths.out_dir);
    let pool_all: Vec<(String, bool)> = setup.splits.all().cloned().collect();
    export_features(&features_file, &fused, &pool_all)?;
    let seeds_file = campaign_seeds_path(&ctx.paths.out_dir);
    std::fs::write(&seeds_file, setup.seeds.users.join("\n") + "\n")
        .map_err(|e| Error::io(seeds_file.display().to_string(), e))?;

    for o in &outcomes {
        println!(
            "eval[{}]: precision {:.3} pr_auc {:.3} accuracy {:.3} (threshold {:.3})",
            o.method, o.report.precision, o.report.pr_auc, o.report.accuracy, o.report.threshold
        );
    }
    ctx.manifest(
        "eval",
        start.elapsed().as_millis(),
        &[fused_path.as_path(), ctx.paths.groups.as_path()],
        &[report.as_path(), features_file.as_path(), seeds_file.as_path()],
    )
}

// ---------------------------------------------------------------------------
// gridsearch
// ---------------------------------------------------------------------------

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry `{x}`")))
        })
        .collect()
}

fn cmd_gridsearch(
    ctx: &Ctx,
    dims: Option<&str>,
    lrs: Option<&str>,
    gammas: Option<&str>,
    max_epochs: Option<usize>,
) -> Result<()> {
    let start = Instant::now();
    let dims: Vec<usize> = match dims {
        Some(s) => parse_list(s, "dimension")?,
        None => crate::trainer::DIM_GRID.to_vec(),
    };
    let lrs: Vec<f64> = match lrs {
        Some(s) => parse_list(s, "learning rate")?,
        None => crate::trainer::LR_GRID.to_vec(),
    };
    let gammas: Vec<f64> = match gammas {
        Some(s) => parse_list(s, "gamma")?,
        None => crate::trainer::GAMMA_GRID.to_vec(),
    };

    let sources = load_sources(ctx, &ctx.views)?;
    let jobs: Vec<(ViewKind, std::borrow::Cow<KnowledgeGraph>)> = ctx
        .views
        .iter()
        .map(|&view| Ok((view, view_graph(view, &sources, ctx)?)))
        .collect::<Result<_>>()?;

    require(&ctx.paths.groups, "gen")?;
    let mode = ctx.cfg.expansion.score_mode()?;

    let mut rows: Vec<(usize, f64, f64, f64)> = Vec::new();
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for &dim in &dims {
        for &lr in &lrs {
            for &gamma in &gammas {
                let mut per_view_sets: Vec<(ViewKind, EmbeddingSet)> = Vec::new();
                for (view, kg) in &jobs {
                    let mut cfg = ctx.cfg.train.config_for(*view, ctx.seed);
                    cfg.dim = dim;
                    cfg.lr = lr;
                    cfg.gamma = gamma;
                    if let Some(cap) = max_epochs {
                        cfg.max_epochs = cap;
                    }
                    let trained = train_view(kg, *view, &cfg)?;
                    per_view_sets.push((*view, trained.user_embeddings(kg)));
                }
                let mut per_view: [Option<&EmbeddingSet>; 5] = Default::default();
                for (view, set) in &per_view_sets {
                    per_view[view.slot()] = Some(set);
                }
                let (fused, _) = fuse_sets(&per_view, ctx.cfg.fusion.iters)?;
                let setup = eval_setup(ctx, &fused)?;
                let users: Vec<String> = setup
                    .splits
                    .validation
                    .iter()
                    .map(|(u, _)| u.clone())
                    .collect();
                let scored = score_candidates(&fused, &setup.seeds, &users, mode)?;
                let by_user: BTreeMap<&str, f64> =
                    scored.iter().map(|s| (s.user.as_str(), s.score)).collect();
                let scores: Vec<f64> = setup
                    .splits
                    .validation
                    .iter()
                    .map(|(u, _)| by_user.get(u.as_str()).copied().unwrap_or(0.0))
                    .collect();
                let labels: Vec<bool> =
                    setup.splits.validation.iter().map(|(_, l)| *l).collect();
                let val_pr_auc = crate::evaluation::pr_auc(&scores, &labels)?;
                println!("gridsearch: d={dim} lr={lr} gamma={gamma} -> val pr_auc {val_pr_auc:.4}");
                rows.push((dim, lr, gamma, val_pr_auc));
                if best.map(|b| val_pr_auc > b.3).unwrap_or(true) {
                    best = Some((dim, lr, gamma, val_pr_auc));
                }
            }
        }
    }

    let mut out = String::from("dim,lr,gamma,val_pr_auc\n");
    for (d, l, g, auc) in &rows {
        out.push_str(&format!("{d},{l},{g},{auc:.6}\n"));
    }
    let csv = gridsearch_csv_path(&ctx.paths.out_dir);
    std::fs::write(&csv, out).map_err(|e| Error::io(csv.display().to_string(), e))?;
    let (d, l, g, auc) = best.expect("grid is non-empty");
    println!("gridsearch: best d={d} lr={l} gamma={g} (val pr_auc {auc:.4})");
    ctx.manifest(
        "gridsearch",
        start.elapsed().as_millis(),
        &[ctx.paths.groups.as_path()],
        &[csv.as_path()],
    )
}

/// Brute-force ranking helper kept alongside the CLI so scripts can verify
/// index results the same way the tests do.
pub fn verify_index_against_brute_force(
    set: &EmbeddingSet,
    query: &[f64],
    k: usize,
    seed: u64,
) -> Result<bool> {
    let index = PartitionIndex::build(set, seed)?;
    let full = index.query(query, k, index.partitions());
    let brute = brute_force_query(set, query, k);
    Ok(full.len() == brute.len()
        && full
            .iter()
            .zip(&brute)
            .all(|(a, b)| a.user == b.user && a.score.to_bits() == b.score.to_bits()))
}
