//! The `focus` command-line tool.

pub mod config;
pub mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use focus_core::inference_plan::{execute_plan, ExecuteError, InferencePlan};
use focus_core::metrics::{
    efficiency_ratio, plot_svg, render_table, summarize, Curve, EvalRecord, OverlapMode,
};
use focus_core::pipeline::{build_maps, search_with_maps, SearchOutcome};
use focus_core::ranking::{ExistenceOracle, StdioOracle};
use focus_core::relevance_map::{map_from_tensor, map_to_tensor, render_pgm, RelevanceMap};
use focus_core::roi_proposal::{propose, RoiProposal};
use focus_core::synthetic::{
    generate_dump, random_map, random_scene, GeometricOracle, SceneParams, SyntheticScene,
};
use focus_core::tensor_io::{
    pack_dump, relevance_tensor_name, Dump, DumpError, DumpHeader, QuestionType, TensorRole,
    TokenDump,
};
use rayon::prelude::*;
use serde::Serialize;
use toml::Table;

use config::{parse_layers, resolve, set, Resolved};
use output::{output_path, write_atomic, write_json, write_jsonl, Classify, CmdResult, Failure};

#[derive(Debug, Parser)]
#[command(
    name = "focus",
    version,
    about = "Training-free visual search over cached token features"
)]
pub struct Cli {
    /// Worker threads for commands that take several input files; each file
    /// is still processed by a single thread.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic token dumps plus scene manifests.
    Gen(GenArgs),
    /// Build relevance maps; writes `<stem>.map.fkv` and one PGM per target.
    BuildMap(InputsArgs),
    /// Render the maps of a `.map.fkv` file as 16-bit PGM images.
    RenderMap(RenderArgs),
    /// Propose ROIs without any oracle; writes `<stem>.rois.jsonl`.
    Propose(InputsArgs),
    /// Rank proposals with an existence oracle and plan the final inference.
    Search(SearchArgs),
    /// Apply a `.plan.json` to an image and write the resulting PNG views.
    PlanExec(PlanExecArgs),
    /// Summarize `.eval.jsonl` records, or compare two accuracy-vs-FP curves.
    Eval(EvalArgs),
    /// Draw accuracy-vs-FP curves as SVG.
    Plot(PlotArgs),
}

/// Configuration layers shared by the pipeline commands. Flags override the
/// config file, which overrides the preset, which overrides built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named hyperparameter preset (llava-1.5, llava-1.5-hr, llava-ov, llava-ov-vstar).
    #[arg(long)]
    pub preset: Option<String>,
    /// Inclusive layer range `l:L` used for map construction.
    #[arg(long, value_name = "L:L")]
    pub layers: Option<String>,
    /// Feature set to use: value or key_no_rope.
    #[arg(long)]
    pub feature_kind: Option<String>,
    /// Gaussian sigma (grid cells) for global-local maps.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Downsampling block size for global-local maps.
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Rollout residual term: identity or none.
    #[arg(long)]
    pub residual: Option<String>,
    /// Number of anchors.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub s_min: Option<usize>,
    #[arg(long)]
    pub s_max: Option<usize>,
    #[arg(long)]
    pub s_dist: Option<f64>,
    #[arg(long)]
    pub expansion_threshold: Option<f64>,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// Oracle queries per target before selection.
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// Keep querying past n_steps until a positive answer (bare flag = true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub overrun: Option<bool>,
    /// Shorthand for `--overrun false`.
    #[arg(long, conflicts_with = "overrun")]
    pub no_overrun: bool,
    #[arg(long)]
    pub t_type2: Option<f64>,
    /// Pixel distance up to which several targets share one crop.
    #[arg(long)]
    pub t_obj_dist: Option<f64>,
    /// Output directory (default: next to each input).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn flag_table(&self) -> anyhow::Result<Table> {
        let mut t = Table::new();
        if let Some(p) = &self.preset {
            set(&mut t, "preset", p.as_str());
        }
        if let Some(l) = &self.layers {
            let (start, end) = parse_layers(l)?;
            set(&mut t, "relevance.layer_range.start", start as i64);
            set(&mut t, "relevance.layer_range.end", end as i64);
        }
        let strings = [
            ("relevance.feature_kind", &self.feature_kind),
            ("relevance.residual", &self.residual),
        ];
        for (key, v) in strings {
            if let Some(v) = v {
                set(&mut t, key, v.as_str());
            }
        }
        let ints = [
            ("relevance.downsample_factor", self.downsample),
            ("proposal.k", self.k),
            ("proposal.s_min", self.s_min),
            ("proposal.s_max", self.s_max),
            ("ranking.n_steps", self.n_steps),
        ];
        for (key, v) in ints {
            if let Some(v) = v {
                set(&mut t, key, i64::try_from(v)?);
            }
        }
        let floats = [
            ("relevance.sigma", self.sigma),
            ("proposal.s_dist", self.s_dist),
            ("proposal.expansion_threshold", self.expansion_threshold),
            ("proposal.nms_iou_threshold", self.nms_threshold),
            ("ranking.t_type2", self.t_type2),
            ("plan.t_obj_dist", self.t_obj_dist),
        ];
        for (key, v) in floats {
            if let Some(v) = v {
                set(&mut t, key, v);
            }
        }
        if let Some(o) = self.overrun {
            set(&mut t, "ranking.overrun", o);
        } else if self.no_overrun {
            set(&mut t, "ranking.overrun", false);
        }
        if let Some(d) = &self.out_dir {
            set(&mut t, "paths.out_dir", d.to_string_lossy().into_owned());
        }
        Ok(t)
    }

    pub fn resolve(&self) -> CmdResult<Resolved> {
        let flags = self.flag_table().usage()?;
        let resolved = resolve(self.config.as_deref(), &flags).usage()?;
        for (key, source) in &resolved.provenance {
            log::info!("config {key} <- {source}");
        }
        Ok(resolved)
    }
}

#[derive(Debug, Args)]
pub struct InputsArgs {
    /// Token dumps (`.fkv`); `propose` also accepts `.map.fkv` files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Token dumps or map files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// `synthetic:<scene.json>`, `synthetic` (uses `<stem>.scene.json` next to
    /// each input) or `stdio:<command>`.
    #[arg(long)]
    pub oracle: String,
    /// Replace every relevance map by seeded noise (ablation).
    #[arg(long, value_name = "SEED")]
    pub random_map: Option<u64>,
    /// Answer flip probability of the synthetic oracle.
    #[arg(long, default_value_t = 0.0)]
    pub flip: f64,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// First seed; scenes use `seed..seed+count`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// TOML file with scene parameters; flags below override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub boxes: Option<usize>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Inclusive layer indices `a:b` stored in the dump.
    #[arg(long, value_name = "A:B")]
    pub layers: Option<String>,
    /// Counting question (type 2) instead of a single-instance one.
    #[arg(long)]
    pub type2: bool,
    /// Global-local dump with this many local crops.
    #[arg(long)]
    pub local_crops: Option<usize>,
    /// Also write key features.
    #[arg(long)]
    pub include_keys: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub map: PathBuf,
    /// Only this target.
    #[arg(long)]
    pub target: Option<u32>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanExecArgs {
    pub plan: PathBuf,
    pub image: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OverlapArg {
    GtArea,
    Iou,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Glob patterns of `.eval.jsonl` files.
    pub records: Vec<String>,
    #[arg(long, value_enum, default_value = "gt-area")]
    pub overlap_mode: OverlapArg,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Curve JSON (`{"label", "points": [{"accuracy", "fp"}]}`) of the method under test.
    #[arg(long, requires = "reference")]
    pub ours: Option<PathBuf>,
    /// Curve JSON of the baseline.
    #[arg(long, requires = "ours")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Curve JSON files.
    #[arg(required = true)]
    pub curves: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CmdResult {
    let jobs = usize::from(cli.jobs);
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, jobs),
        Command::BuildMap(a) => {
            let resolved = a.config.resolve()?;
            for_each_input(&a.inputs, jobs, |p| cmd_build_map(p, &resolved))
        }
        Command::RenderMap(a) => cmd_render_map(&a),
        Command::Propose(a) => {
            let resolved = a.config.resolve()?;
            for_each_input(&a.inputs, jobs, |p| cmd_propose(p, &resolved))
        }
        Command::Search(a) => {
            let resolved = a.config.resolve()?;
            let spec = OracleSpec::parse(&a.oracle)?;
            for_each_input(&a.inputs, jobs, |p| cmd_search(p, &spec, &a, &resolved))
        }
        Command::PlanExec(a) => cmd_plan_exec(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

/// Runs `f` over the inputs on up to `jobs` threads, printing each summary
/// line in input order. Fails with the most severe failure after all inputs
/// have been tried.
fn for_each_input<F>(inputs: &[PathBuf], jobs: usize, f: F) -> CmdResult
where
    F: Fn(&Path) -> CmdResult<String> + Sync,
{
    for_each(inputs, |p| p.display().to_string(), jobs, |p| f(p))
}

fn for_each<T: Sync>(
    items: &[T],
    label: impl Fn(&T) -> String,
    jobs: usize,
    f: impl Fn(&T) -> CmdResult<String> + Sync,
) -> CmdResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .usage()?;
    let results: Vec<CmdResult<String>> = pool.install(|| items.par_iter().map(&f).collect());
    let mut worst: Option<Failure> = None;
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                if items.len() > 1 {
                    eprintln!("error: {}: {}", label(item), e.message());
                }
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    match (worst, items.len()) {
        (None, _) => Ok(()),
        (Some(e), 1) => Err(e),
        (Some(e), n) => {
            let err = anyhow!("{n} inputs, at least one failed");
            Err(match e {
                Failure::Usage(_) => Failure::Usage(err),
                Failure::Pipeline(_) => Failure::Pipeline(err),
            })
        }
    }
}

fn run_record(resolved: &Resolved) -> serde_json::Value {
    serde_json::to_value(resolved).expect("config serializes")
}

fn out_dir(resolved: &Resolved) -> Option<&Path> {
    resolved.config.paths.out_dir.as_deref()
}

// ------------------------------------------------------------------ inputs

enum Features {
    Tokens(Box<TokenDump>),
    Maps(BTreeMap<u32, RelevanceMap>),
}

struct Input {
    header: DumpHeader,
    features: Features,
}

fn open_dump(path: &Path) -> CmdResult<Dump> {
    match Dump::open(path) {
        Ok(d) => Ok(d),
        Err(DumpError::Io(e)) => Err(Failure::Usage(
            anyhow!(e).context(format!("cannot read {}", path.display())),
        )),
        Err(e) => Err(Failure::Usage(
            anyhow!(e).context(format!("invalid dump {}", path.display())),
        )),
    }
}

fn read_maps(dump: &Dump) -> anyhow::Result<BTreeMap<u32, RelevanceMap>> {
    let mut maps = BTreeMap::new();
    for name in dump.tensor_names() {
        if let TensorRole::RelevanceMap { target_id } = TensorRole::parse(name) {
            maps.insert(target_id, map_from_tensor(&dump.tensor(name)?)?);
        }
    }
    Ok(maps)
}

fn load_input(path: &Path) -> CmdResult<Input> {
    let dump = open_dump(path)?;
    let header = dump.header.clone();
    let has_features = dump.tensor_names().any(|n| {
        matches!(
            TensorRole::parse(n),
            TensorRole::Visual { .. } | TensorRole::Target { .. }
        )
    });
    let features = if has_features {
        Features::Tokens(Box::new(TokenDump::from_dump(&dump).map_err(|e| {
            Failure::Usage(anyhow!(e).context(format!("{}", path.display())))
        })?))
    } else {
        let maps = read_maps(&dump).usage()?;
        if let Some(t) = header
            .targets
            .iter()
            .find(|t| !maps.contains_key(&t.target_id))
        {
            return Err(Failure::Usage(anyhow!(
                "{} holds neither token features nor a map for target {}",
                path.display(),
                t.target_id
            )));
        }
        Features::Maps(maps)
    };
    Ok(Input { header, features })
}

fn maps_of(input: &Input, resolved: &Resolved) -> CmdResult<BTreeMap<u32, RelevanceMap>> {
    match &input.features {
        Features::Tokens(dump) => build_maps(dump, &resolved.config.relevance).pipeline(),
        Features::Maps(m) => Ok(m.clone()),
    }
}

fn annotation(header: &DumpHeader, key: &str) -> Option<String> {
    header
        .annotations
        .get(key)
        .and_then(|v| v.as_str())
        .map(str::to_string)
}

// ------------------------------------------------------------------ gen

fn cmd_gen(a: &GenArgs, jobs: usize) -> CmdResult {
    let mut params = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))
                .usage()?;
            toml::from_str::<SceneParams>(&text)
                .with_context(|| format!("invalid scene parameters in {}", p.display()))
                .usage()?
        }
        None => SceneParams::default(),
    };
    if let Some(v) = a.noise {
        params.noise_level = v;
    }
    if let Some(v) = a.grid {
        params.grid = v;
    }
    if let Some(v) = a.targets {
        params.targets = v;
    }
    if let Some(v) = a.boxes {
        params.boxes_per_target = v;
    }
    if let Some(v) = a.distractors {
        params.distractors_per_target = v;
    }
    if let Some(v) = a.hidden_dim {
        params.hidden_dim = v;
    }
    if let Some(l) = &a.layers {
        let (s, e) = parse_layers(l).usage()?;
        if s > e {
            return Err(Failure::Usage(anyhow!("empty layer range {l}")));
        }
        params.layers = (s..=e).collect();
    }
    if a.type2 {
        params.question_type = QuestionType::Type2;
    }
    if a.local_crops.is_some() {
        params.local_crops = a.local_crops;
    }
    if a.include_keys {
        params.include_keys = true;
    }
    validate_scene_params(&params).usage()?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.count).collect();
    let params = &params;
    for_each(
        &seeds,
        |s| format!("seed {s}"),
        jobs,
        |&seed| {
            let path = a.out_dir.join(format!("scene-{seed}.fkv"));
            let scene = random_scene(params, seed);
            let bytes = generate_dump(&scene).to_bytes().pipeline()?;
            write_atomic(&path, &bytes).usage()?;
            let manifest = a.out_dir.join(format!("scene-{seed}.scene.json"));
            write_json(&manifest, &scene).usage()?;
            Ok(format!("{} ({})", path.display(), manifest.display()))
        },
    )
}

fn validate_scene_params(p: &SceneParams) -> anyhow::Result<()> {
    if p.grid < 4 || p.hidden_dim == 0 || p.layers.is_empty() || p.token_count == 0 {
        bail!("scene needs grid >= 4, hidden_dim >= 1, token_count >= 1 and at least one layer");
    }
    if p.targets == 0 || p.boxes_per_target == 0 {
        bail!("scene needs at least one target with one box");
    }
    let (lo, hi) = p.box_cells;
    if lo == 0 || lo > hi || hi + 2 > p.grid {
        bail!("box_cells {lo}..{hi} does not fit a {} grid", p.grid);
    }
    if !(0.0..=10.0).contains(&p.noise_level) {
        bail!("noise level must lie in [0, 10]");
    }
    let boxes = p.targets * (p.boxes_per_target + p.distractors_per_target);
    let room = (p.grid / (hi + 1)).pow(2);
    if boxes > room {
        bail!("{boxes} boxes do not fit a {} grid", p.grid);
    }
    Ok(())
}

// ------------------------------------------------------------------ maps

fn cmd_build_map(path: &Path, resolved: &Resolved) -> CmdResult<String> {
    let input = load_input(path)?;
    if matches!(input.features, Features::Maps(_)) {
        return Err(Failure::Usage(anyhow!(
            "{} already holds maps, not token features",
            path.display()
        )));
    }
    let maps = maps_of(&input, resolved)?;
    let mut header = input.header.clone();
    header.tensor_index.clear();
    header
        .annotations
        .insert("run_config".into(), run_record(resolved));
    let tensors: Vec<(String, _)> = maps
        .iter()
        .map(|(id, m)| (relevance_tensor_name(*id), map_to_tensor(m)))
        .collect();
    let bytes = pack_dump(header, &tensors).pipeline()?;
    let dir = out_dir(resolved);
    let map_path = output_path(path, dir, ".map.fkv");
    write_atomic(&map_path, &bytes).usage()?;
    for (id, m) in &maps {
        write_atomic(
            &output_path(path, dir, &format!(".map-{id}.pgm")),
            &render_pgm(m),
        )
        .usage()?;
    }
    write_json(&output_path(path, dir, ".run.json"), resolved).usage()?;
    let peaks: Vec<String> = maps
        .iter()
        .map(|(id, m)| {
            let (r, c) = m.argmax();
            let d = m.dims();
            format!("target {id}: {}x{} peak ({r}, {c})", d.rows, d.cols)
        })
        .collect();
    Ok(format!("{} [{}]", map_path.display(), peaks.join("; ")))
}

fn cmd_render_map(a: &RenderArgs) -> CmdResult {
    let dump = open_dump(&a.map)?;
    let maps = read_maps(&dump).usage()?;
    if maps.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "{} holds no relevance maps; run build-map first",
            a.map.display()
        )));
    }
    let selected: Vec<(&u32, &RelevanceMap)> = match a.target {
        Some(t) => vec![maps
            .get_key_value(&t)
            .ok_or_else(|| anyhow!("no map for target {t}"))
            .usage()?],
        None => maps.iter().collect(),
    };
    for (id, m) in selected {
        let out = output_path(&a.map, a.out_dir.as_deref(), &format!(".map-{id}.pgm"));
        write_atomic(&out, &render_pgm(m)).usage()?;
        println!("{}", out.display());
    }
    Ok(())
}

// ------------------------------------------------------------------ proposals

#[derive(Serialize)]
struct RoiRow<'a> {
    target_id: u32,
    surface_text: &'a str,
    rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    queried: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected: Option<bool>,
    #[serde(flatten)]
    proposal: &'a RoiProposal,
}

fn cmd_propose(path: &Path, resolved: &Resolved) -> CmdResult<String> {
    let input = load_input(path)?;
    let maps = maps_of(&input, resolved)?;
    let mut rows_owned = Vec::new();
    for t in &input.header.targets {
        let ps = propose(
            &maps[&t.target_id],
            &resolved.config.proposal,
            input.header.image_size,
        )
        .pipeline()?;
        rows_owned.push((t, ps));
    }
    let rows: Vec<RoiRow<'_>> = rows_owned
        .iter()
        .flat_map(|(t, ps)| {
            ps.iter().enumerate().map(|(rank, p)| RoiRow {
                target_id: t.target_id,
                surface_text: &t.surface_text,
                rank,
                queried: None,
                selected: None,
                proposal: p,
            })
        })
        .collect();
    let dir = out_dir(resolved);
    let out = output_path(path, dir, ".rois.jsonl");
    write_jsonl(&out, &rows).usage()?;
    write_json(&output_path(path, dir, ".run.json"), resolved).usage()?;
    Ok(format!("{}: {} proposals", out.display(), rows.len()))
}

// ------------------------------------------------------------------ search

#[derive(Debug, Clone)]
enum OracleSpec {
    Synthetic(Option<PathBuf>),
    Stdio(String),
}

impl OracleSpec {
    fn parse(s: &str) -> CmdResult<Self> {
        if s == "synthetic" {
            return Ok(OracleSpec::Synthetic(None));
        }
        if let Some(p) = s.strip_prefix("synthetic:") {
            return Ok(OracleSpec::Synthetic(Some(PathBuf::from(p))));
        }
        match s.strip_prefix("stdio:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(OracleSpec::Stdio(cmd.to_string())),
            _ => Err(Failure::Usage(anyhow!(
                "oracle must be `synthetic`, `synthetic:<scene.json>` or `stdio:<command>`, got `{s}`"
            ))),
        }
    }
}

fn load_scene(path: &Path) -> CmdResult<SyntheticScene> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read scene {}", path.display()))
        .usage()?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid scene manifest {}", path.display()))
        .usage()
}

fn cmd_search(
    path: &Path,
    spec: &OracleSpec,
    args: &SearchArgs,
    resolved: &Resolved,
) -> CmdResult<String> {
    let input = load_input(path)?;
    let mut maps = maps_of(&input, resolved)?;
    if let Some(seed) = args.random_map {
        for (id, m) in maps.iter_mut() {
            *m = random_map(m.dims(), seed ^ u64::from(*id).wrapping_mul(0x9e37_79b9));
        }
    }
    let mut oracle: Box<dyn ExistenceOracle> = match spec {
        OracleSpec::Synthetic(scene_path) => {
            let scene_path = scene_path
                .clone()
                .unwrap_or_else(|| output_path(path, None, ".scene.json"));
            let scene = load_scene(&scene_path)?;
            Box::new(GeometricOracle::new(&scene).with_flip_probability(args.flip))
        }
        OracleSpec::Stdio(cmd) => {
            let image_ref = annotation(&input.header, "image_ref")
                .unwrap_or_else(|| path.display().to_string());
            Box::new(StdioOracle::spawn(cmd, image_ref).pipeline()?)
        }
    };
    let cfg = resolved.config.search_config();
    let outcome = search_with_maps(&input.header, &maps, oracle.as_mut(), &cfg).pipeline()?;
    drop(oracle);

    let dir = out_dir(resolved);
    let question_id =
        annotation(&input.header, "question_id").unwrap_or_else(|| output::stem(path));
    write_jsonl(
        &output_path(path, dir, ".rois.jsonl"),
        &search_rows(&outcome),
    )
    .usage()?;
    let plan_path = output_path(path, dir, ".plan.json");
    write_json(&plan_path, &outcome.plan).usage()?;
    write_jsonl(
        &output_path(path, dir, ".eval.jsonl"),
        &[outcome.eval_record(&question_id, &input.header)],
    )
    .usage()?;
    write_json(&output_path(path, dir, ".run.json"), resolved).usage()?;
    let fp = outcome.fp;
    Ok(format!(
        "{question_id}: fp_total {} ({} map + {} queries), plan {} -> {}",
        fp.total,
        fp.map_construction,
        fp.existence_queries,
        serde_json::to_value(outcome.plan.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        plan_path.display()
    ))
}

fn search_rows(outcome: &SearchOutcome) -> Vec<RoiRow<'_>> {
    let mut rows = Vec::new();
    for t in &outcome.targets {
        for (rank, p) in t.proposals.iter().enumerate() {
            let queried = rank < t.scored.len();
            let proposal = if queried { &t.scored[rank] } else { p };
            let selected = match outcome.question_type {
                QuestionType::Type2 => t.merged.iter().any(|m| m.members.contains(&rank)),
                _ => t.selected.as_ref().is_some_and(|s| s == proposal),
            };
            rows.push(RoiRow {
                target_id: t.target_id,
                surface_text: &t.surface_text,
                rank,
                queried: Some(queried),
                selected: Some(selected),
                proposal,
            });
        }
    }
    rows
}

// ------------------------------------------------------------------ plan-exec

fn cmd_plan_exec(a: &PlanExecArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.plan)
        .with_context(|| format!("cannot read {}", a.plan.display()))
        .usage()?;
    let plan: InferencePlan = serde_json::from_str(&text)
        .with_context(|| format!("invalid plan {}", a.plan.display()))
        .usage()?;
    let image = std::fs::read(&a.image)
        .with_context(|| format!("cannot read {}", a.image.display()))
        .usage()?;
    let views = execute_plan(&plan, &image).map_err(|e| match e {
        ExecuteError::Decode(_) => Failure::Usage(e.into()),
        _ => Failure::Pipeline(e.into()),
    })?;
    for (i, png) in views.iter().enumerate() {
        let out = output_path(&a.plan, a.out_dir.as_deref(), &format!(".view-{i}.png"));
        write_atomic(&out, png).usage()?;
        println!("{}", out.display());
    }
    Ok(())
}

// ------------------------------------------------------------------ eval / plot

#[derive(Serialize)]
struct EvalOutput {
    files: usize,
    skipped_lines: usize,
    #[serde(flatten)]
    report: focus_core::metrics::MetricsReport,
}

/// Reads every record file matched by the globs. Malformed lines are skipped
/// and counted.
fn read_records(patterns: &[String]) -> CmdResult<(Vec<EvalRecord>, usize, usize)> {
    let mut files = Vec::new();
    for pat in patterns {
        for entry in glob::glob(pat)
            .with_context(|| format!("bad glob `{pat}`"))
            .usage()?
        {
            files.push(entry.usage()?);
        }
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "no record files match {}",
            patterns.join(" ")
        )));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for f in &files {
        let text = std::fs::read_to_string(f)
            .with_context(|| format!("cannot read {}", f.display()))
            .usage()?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<EvalRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) => {
                    log::warn!("{}:{}: skipping malformed record: {e}", f.display(), n + 1);
                    skipped += 1;
                }
            }
        }
    }
    Ok((records, files.len(), skipped))
}

fn load_curve(path: &Path) -> CmdResult<Curve> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .usage()?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid curve {}", path.display()))
        .usage()
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if a.records.is_empty() && a.ours.is_none() {
        return Err(Failure::Usage(anyhow!(
            "give record globs, or --ours and --reference curves"
        )));
    }
    if let (Some(ours), Some(reference)) = (&a.ours, &a.reference) {
        let (o, r) = (load_curve(ours)?, load_curve(reference)?);
        let ratio = efficiency_ratio(&o.points, &r.points).pipeline()?;
        println!("efficiency_ratio ({} vs {})  {ratio:.4}", o.label, r.label);
    }
    if a.records.is_empty() {
        return Ok(());
    }
    let (records, files, skipped) = read_records(&a.records)?;
    let mode = match a.overlap_mode {
        OverlapArg::GtArea => OverlapMode::GtArea,
        OverlapArg::Iou => OverlapMode::Iou,
    };
    let report = summarize(&records, mode).pipeline()?;
    print!("{}", render_table(&report));
    println!("skipped_lines  {skipped}");
    if let Some(p) = &a.json {
        write_json(
            p,
            &EvalOutput {
                files,
                skipped_lines: skipped,
                report,
            },
        )
        .usage()?;
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> CmdResult {
    let curves = a
        .curves
        .iter()
        .map(|p| load_curve(p))
        .collect::<CmdResult<Vec<_>>>()?;
    write_atomic(&a.out, plot_svg(&curves).as_bytes()).usage()?;
    println!("{}", a.out.display());
    Ok(())
}
