use std::io::Read;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use rlsparse_core::checkpoint::{CheckpointIndex, RoleTable, TensorFilter};
use rlsparse_core::diff::{checkpoint_sparsity, layer_breakdown, DiffOptions, Tolerances};
use rlsparse_core::dynamics::{classify_params, series_sparsity, DynamicsOptions};
use rlsparse_core::mask::{
    extract_mask, mask_ops, overlap, overlap_by_layer, random_mask, read_mask, write_mask, ExtractOptions,
    MaskOp, MaskTensorSchema, SubnetMask, MASK_MAGIC,
};
use rlsparse_core::parallel::with_threads;
use rlsparse_core::rank::{rank_report, RankOptions, SvdStrategy};
use rlsparse_core::toy::{self, Objective, ToyConfig};

use crate::manifest::{hex, now, ManifestBuilder};
use crate::output::{emit, render, Output, Table};
use crate::{
    Cli, CliError, CombineArgs, CombineOp, Command, DiffArgs, ExtractArgs, MaskCommand, OverlapArgs,
    RandomArgs, RankArgs, SeqArgs, StreamArgs, ToyArgs, ToyCommand, ToyMultiArgs, ToyRunArgs, ToySweepArgs,
};

type R<T> = Result<T, CliError>;

struct Ctx {
    manifest: ManifestBuilder,
    quiet: bool,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn open(&mut self, path: &Path, roles: &RoleTable) -> R<CheckpointIndex> {
        let idx = CheckpointIndex::open_with_roles(path, roles)?;
        self.manifest.input(path);
        for shard in idx.shard_paths() {
            self.manifest.input(shard);
        }
        self.progress(format!(
            "opened {} ({} tensors, {} parameters)",
            path.display(),
            idx.tensors.len(),
            idx.total_params
        ));
        Ok(idx)
    }

    fn read_mask(&mut self, path: &Path) -> R<SubnetMask> {
        let m = read_mask(path)?;
        self.manifest.input(path);
        Ok(m)
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Sparsity(_) => "sparsity",
        Command::Layers(_) => "layers",
        Command::Mask(MaskCommand::Extract(_)) => "mask extract",
        Command::Mask(MaskCommand::Overlap(_)) => "mask overlap",
        Command::Mask(MaskCommand::Intersect(_)) => "mask intersect",
        Command::Mask(MaskCommand::Random(_)) => "mask random",
        Command::Rank(_) => "rank",
        Command::Dynamics(_) => "dynamics",
        Command::Classify(_) => "classify",
        Command::Toy(ToyCommand::Run(_)) => "toy run",
        Command::Toy(ToyCommand::Replay(_)) => "toy replay",
        Command::Toy(ToyCommand::Sweep(_)) => "toy sweep",
    }
}

pub fn run(cli: &Cli) -> R<()> {
    let started = now();
    let mut ctx = Ctx {
        manifest: ManifestBuilder::default(),
        quiet: cli.quiet,
    };
    if let Some(t) = cli.threads {
        ctx.manifest.param("threads", t);
    }
    let out = with_threads(cli.threads, || dispatch(&cli.command, &mut ctx))??;
    let manifest = ctx.manifest.finish(command_name(&cli.command), started)?;
    emit(&render(&out, &manifest, cli.format), cli.out.as_deref())
}

fn dispatch(cmd: &Command, ctx: &mut Ctx) -> R<Output> {
    match cmd {
        Command::Sparsity(a) => sparsity(a, ctx),
        Command::Layers(a) => layers(a, ctx),
        Command::Mask(MaskCommand::Extract(a)) => mask_extract(a, ctx),
        Command::Mask(MaskCommand::Overlap(a)) => mask_overlap(a, ctx),
        Command::Mask(MaskCommand::Intersect(a)) => mask_combine(a, ctx),
        Command::Mask(MaskCommand::Random(a)) => mask_random(a, ctx),
        Command::Rank(a) => rank(a, ctx),
        Command::Dynamics(a) => dynamics(a, ctx),
        Command::Classify(a) => classify(a, ctx),
        Command::Toy(ToyCommand::Run(a)) => toy_run(a, ctx),
        Command::Toy(ToyCommand::Replay(a)) => toy_replay(a, ctx),
        Command::Toy(ToyCommand::Sweep(a)) => toy_sweep(a, ctx),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn role_table(path: Option<&Path>, ctx: &mut Ctx) -> R<RoleTable> {
    match path {
        Some(p) => {
            ctx.manifest.input(p);
            Ok(RoleTable::from_file(p)?)
        }
        None => Ok(RoleTable::builtin()),
    }
}

fn stream_params(s: &StreamArgs, ctx: &mut Ctx) -> R<(TensorFilter, RoleTable)> {
    if s.chunk_elems == 0 {
        return Err(CliError::Usage("--chunk-elems must be at least 1".into()));
    }
    ctx.manifest.param("chunk_elems", s.chunk_elems);
    if !s.exclude.is_empty() {
        ctx.manifest.param("exclude", s.exclude.join(" "));
    }
    Ok((TensorFilter::new(&s.exclude)?, role_table(s.roles.as_deref(), ctx)?))
}

fn diff_report(a: &DiffArgs, ctx: &mut Ctx) -> R<rlsparse_core::diff::SparsityReport> {
    let (filter, roles) = stream_params(&a.stream, ctx)?;
    let tolerances = Tolerances::new(a.tol.clone())?;
    ctx.manifest.param("tolerances", join(tolerances.as_slice()));
    let init = ctx.open(&a.pair.init, &roles)?;
    let tuned = ctx.open(&a.pair.tuned, &roles)?;
    let opts = DiffOptions {
        tolerances,
        chunk_elems: a.stream.chunk_elems,
        filter,
    };
    Ok(checkpoint_sparsity(&init, &tuned, &opts)?)
}

fn sparsity(a: &DiffArgs, ctx: &mut Ctx) -> R<Output> {
    let report = diff_report(a, ctx)?;
    let mut t = Table::new(&["scope", "name", "tolerance", "changed", "total", "sparsity"]);
    let mut add = |scope: &str, name: String, stats: &[rlsparse_core::diff::DeltaStats]| {
        for s in stats {
            t.push([scope.to_string(), name.clone(), s.tolerance.to_string(), s.changed.to_string(), s.total.to_string(), s.sparsity.to_string()]);
        }
    };
    add("global", String::new(), &report.global);
    for (l, s) in &report.per_layer {
        add("layer", l.to_string(), s);
    }
    for (k, s) in &report.per_role {
        add("role", k.as_str().to_string(), s);
    }
    for (n, s) in &report.per_tensor {
        add("tensor", n.clone(), s);
    }
    Ok(Output::new(&report, t))
}

fn layers(a: &DiffArgs, ctx: &mut Ctx) -> R<Output> {
    let report = diff_report(a, ctx)?;
    let rows = layer_breakdown(&report);
    let mut t = Table::new(&["layer_index", "kind", "tolerance", "changed", "total", "sparsity"]);
    for r in &rows {
        t.push([
            r.layer_index.map(|l| l.to_string()).unwrap_or_default(),
            r.kind.to_string(),
            r.tolerance.to_string(),
            r.changed.to_string(),
            r.total.to_string(),
            r.sparsity.to_string(),
        ]);
    }
    Ok(Output::new(&json!({ "tolerances": report.tolerances, "rows": rows }), t))
}

#[derive(Serialize)]
struct MaskTensorSummary {
    name: String,
    shape: Vec<usize>,
    updated: u64,
    total: u64,
}

#[derive(Serialize)]
struct MaskSummary {
    path: String,
    sha256: String,
    source: String,
    tolerance: f64,
    updated: u64,
    total: u64,
    density: f64,
    tensors: Vec<MaskTensorSummary>,
}

fn write_and_summarize(mask: &SubnetMask, path: &Path) -> R<Output> {
    let digest = write_mask(mask, path)?;
    let tensors: Vec<MaskTensorSummary> = mask
        .tensors
        .iter()
        .map(|t| MaskTensorSummary {
            name: t.name.clone(),
            shape: t.shape.clone(),
            updated: t.bits.count_ones(),
            total: t.bits.len() as u64,
        })
        .collect();
    let mut table = Table::new(&["name", "updated", "total", "density"]);
    for t in &tensors {
        let d = if t.total == 0 { 0.0 } else { t.updated as f64 / t.total as f64 };
        table.push([t.name.clone(), t.updated.to_string(), t.total.to_string(), d.to_string()]);
    }
    let summary = MaskSummary {
        path: path.display().to_string(),
        sha256: hex(&digest),
        source: mask.source.clone(),
        tolerance: mask.tolerance,
        updated: mask.updated(),
        total: mask.total(),
        density: mask.density(),
        tensors,
    };
    Ok(Output::new(&summary, table))
}

fn mask_extract(a: &ExtractArgs, ctx: &mut Ctx) -> R<Output> {
    let (filter, roles) = stream_params(&a.stream, ctx)?;
    ctx.manifest.param("tolerance", a.tol);
    let init = ctx.open(&a.pair.init, &roles)?;
    let tuned = ctx.open(&a.pair.tuned, &roles)?;
    let opts = ExtractOptions {
        chunk_elems: a.stream.chunk_elems,
        filter,
    };
    let mask = extract_mask(&init, &tuned, a.tol, &opts)?;
    write_and_summarize(&mask, &a.mask_out)
}

fn mask_overlap(a: &OverlapArgs, ctx: &mut Ctx) -> R<Output> {
    let m1 = ctx.read_mask(&a.a)?;
    let m2 = ctx.read_mask(&a.b)?;
    ctx.manifest.param("by_layer", a.by_layer);
    let report = if a.by_layer {
        let roles = role_table(a.roles.as_deref(), ctx)?;
        overlap_by_layer(&m1, &m2, &roles)?
    } else {
        overlap(&m1, &m2)?
    };
    let mut t = Table::new(&[
        "scope", "layer_index", "common", "updated1", "updated2", "total", "o1", "o2", "o1_random", "o2_random",
    ]);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    t.push([
        "global".to_string(),
        String::new(),
        report.common.to_string(),
        report.updated1.to_string(),
        report.updated2.to_string(),
        report.total.to_string(),
        report.o1.to_string(),
        report.o2.to_string(),
        report.o1_random.to_string(),
        report.o2_random.to_string(),
    ]);
    for l in report.per_layer.iter().flatten() {
        t.push([
            "layer".to_string(),
            l.layer_index.map(|i| i.to_string()).unwrap_or_default(),
            l.common.to_string(),
            l.updated1.to_string(),
            l.updated2.to_string(),
            l.total.to_string(),
            opt(l.o1),
            opt(l.o2),
            l.o1_random.to_string(),
            l.o2_random.to_string(),
        ]);
    }
    Ok(Output::new(&report, t))
}

fn mask_combine(a: &CombineArgs, ctx: &mut Ctx) -> R<Output> {
    let m1 = ctx.read_mask(&a.a)?;
    let m2 = ctx.read_mask(&a.b)?;
    let op = match a.op {
        CombineOp::Intersect => MaskOp::Intersect,
        CombineOp::Union => MaskOp::Union,
        CombineOp::Difference => MaskOp::Difference,
    };
    ctx.manifest.param("op", format!("{op:?}").to_lowercase());
    write_and_summarize(&mask_ops(&m1, &m2, op)?, &a.mask_out)
}

fn is_mask_file(path: &Path) -> R<bool> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut magic = [0u8; 4];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == MASK_MAGIC),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn mask_random(a: &RandomArgs, ctx: &mut Ctx) -> R<Output> {
    ctx.manifest.param("density", a.density);
    ctx.manifest.param("seed", a.seed);
    let schema: Vec<MaskTensorSchema> = if is_mask_file(&a.like)? {
        ctx.read_mask(&a.like)?.schema()
    } else {
        let filter = TensorFilter::new(&a.exclude)?;
        let idx = ctx.open(&a.like, &RoleTable::builtin())?;
        idx.tensors
            .values()
            .filter(|m| filter.includes(&m.name))
            .map(|m| MaskTensorSchema::new(m.name.clone(), m.shape.clone()))
            .collect()
    };
    write_and_summarize(&random_mask(&schema, a.density, a.seed)?, &a.mask_out)
}

fn rank(a: &RankArgs, ctx: &mut Ctx) -> R<Output> {
    ctx.manifest.param("policy", a.policy);
    ctx.manifest.param("min_dim", a.min_dim);
    ctx.manifest.param("quantize_bf16", a.quantize_bf16);
    ctx.manifest.param("svd_seed", a.svd_seed);
    if !a.exclude.is_empty() {
        ctx.manifest.param("exclude", a.exclude.join(" "));
    }
    let roles = RoleTable::builtin();
    let init = ctx.open(&a.pair.init, &roles)?;
    let tuned = ctx.open(&a.pair.tuned, &roles)?;
    let opts = RankOptions {
        policy: a.policy,
        min_dim: a.min_dim,
        filter: TensorFilter::new(&a.exclude)?,
        quantize_bf16: a.quantize_bf16,
        strategy: SvdStrategy {
            seed: a.svd_seed,
            ..SvdStrategy::default()
        },
    };
    let report = rank_report(&init, &tuned, &opts)?;
    let mut t = Table::new(&[
        "name", "rows", "cols", "rank", "max_rank", "rank_pct", "sigma_max", "threshold", "method",
    ]);
    for m in &report.per_matrix {
        let method = serde_json::to_value(m.method).expect("method serializes")["method"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        t.push([
            m.name.clone(),
            m.rows.to_string(),
            m.cols.to_string(),
            m.rank.to_string(),
            m.max_rank.to_string(),
            m.rank_pct.to_string(),
            m.sigma_max.to_string(),
            m.threshold.to_string(),
            method,
        ]);
    }
    Ok(Output::new(&report, t))
}

fn open_sequence(a: &SeqArgs, ctx: &mut Ctx) -> R<(CheckpointIndex, Vec<CheckpointIndex>, DynamicsOptions)> {
    let (filter, roles) = stream_params(&a.stream, ctx)?;
    ctx.manifest.param("tolerance", a.tol);
    let init = ctx.open(&a.init, &roles)?;
    let mut seq = Vec::new();
    for p in a.ckpts.iter().chain(&a.final_ckpt) {
        seq.push(ctx.open(p, &roles)?);
    }
    let opts = DynamicsOptions {
        chunk_elems: a.stream.chunk_elems,
        filter,
    };
    Ok((init, seq, opts))
}

fn dynamics(a: &SeqArgs, ctx: &mut Ctx) -> R<Output> {
    let (init, seq, opts) = open_sequence(a, ctx)?;
    let refs: Vec<&CheckpointIndex> = seq.iter().collect();
    let series = series_sparsity(&init, &refs, a.tol, &opts)?;
    let mut t = Table::new(&[
        "index",
        "checkpoint",
        "sparsity_vs_init",
        "sparsity_consecutive",
        "outside_final_frac",
        "cumulative_outside_final_frac",
    ]);
    for (i, name) in series.checkpoints.iter().enumerate() {
        t.push([
            i.to_string(),
            name.clone(),
            series.sparsity_vs_init[i].to_string(),
            i.checked_sub(1)
                .map(|j| series.sparsity_consecutive[j].to_string())
                .unwrap_or_default(),
            series.outside_final_frac[i].to_string(),
            series.cumulative_outside_final_frac[i].to_string(),
        ]);
    }
    Ok(Output::new(&series, t))
}

fn classify(a: &SeqArgs, ctx: &mut Ctx) -> R<Output> {
    let (init, seq, opts) = open_sequence(a, ctx)?;
    let refs: Vec<&CheckpointIndex> = seq.iter().collect();
    let p = classify_params(&init, &refs, None, a.tol, &opts)?;
    let mut t = Table::new(&["category", "count", "fraction"]);
    t.push(["untouched".to_string(), p.untouched.to_string(), p.untouched_frac.to_string()]);
    t.push(["canceled".to_string(), p.canceled.to_string(), p.canceled_frac.to_string()]);
    t.push(["subnetwork".to_string(), p.subnetwork.to_string(), p.subnetwork_frac.to_string()]);
    Ok(Output::new(&p, t))
}

fn toy_config(a: &ToyArgs, ctx: &mut Ctx) -> R<ToyConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            ctx.manifest.input(p);
            ToyConfig::load(p)?
        }
        None => ToyConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(input_dim, hidden_dim, num_actions, steps, batch, lr, beta, teacher_temperature);
    if let Some(o) = &a.objective {
        cfg.objective = o.parse()?;
    }
    if let Some(s) = &a.storage {
        cfg.param_storage = s.parse()?;
    }
    if let Some(o) = &a.optimizer {
        cfg.optimizer = o.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn record_config(cfg: &ToyConfig, ctx: &mut Ctx) {
    let v = serde_json::to_value(cfg).expect("config serializes");
    for (k, val) in v.as_object().expect("config is an object") {
        let s = match val {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        ctx.manifest.param(k, s);
    }
}

fn toy_run(a: &ToyRunArgs, ctx: &mut Ctx) -> R<Output> {
    let mut cfg = toy_config(&a.toy, ctx)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.snapshot_every {
        cfg.snapshot_every = n;
    }
    record_config(&cfg, ctx);
    ctx.progress(format!("training {} for {} steps (seed {})", cfg.objective, cfg.steps, cfg.seed));
    let run = toy::train(&cfg, cfg.seed, None)?;
    if let Some(dir) = &a.run_dir {
        run.save(dir)?;
        ctx.progress(format!("run saved to {}", dir.display()));
    }
    let report = json!({
        "config": run.config,
        "total_params": run.init_params.len(),
        "final_sparsity": run.final_sparsity(),
        "final_train_loss": run.final_train_loss(),
        "mask_updated": run.final_mask.updated(),
        "mask_density": run.final_mask.density(),
        "run_dir": a.run_dir.as_ref().map(|d| d.display().to_string()),
        "loss_curve": run.loss_curve,
        "step_sparsity": run.step_sparsity,
    });
    let mut t = Table::new(&["step", "loss", "sparsity"]);
    for (i, (l, s)) in run.loss_curve.iter().zip(&run.step_sparsity).enumerate() {
        t.push([(i + 1).to_string(), l.to_string(), s.to_string()]);
    }
    Ok(Output::new(&report, t))
}

#[derive(Serialize)]
struct ReplayRow {
    seed: u64,
    agreement_1e4: f64,
    agreement_1e5: f64,
    full_final_sparsity: f64,
    full_final_train_loss: f64,
    masked_final_train_loss: f64,
}

fn toy_replay(a: &ToyMultiArgs, ctx: &mut Ctx) -> R<Output> {
    use rayon::prelude::*;
    let cfg = toy_config(&a.toy, ctx)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    record_config(&cfg, ctx);
    ctx.manifest.param("seeds", join(&seeds));
    ctx.progress(format!("replaying {} seed(s)", seeds.len()));
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let r = toy::conjecture_replay(&cfg, seed)?;
            Ok(ReplayRow {
                seed,
                agreement_1e4: r.agreement_1e4,
                agreement_1e5: r.agreement_1e5,
                full_final_sparsity: r.full.final_sparsity(),
                full_final_train_loss: r.full.final_train_loss(),
                masked_final_train_loss: r.masked.final_train_loss(),
            })
        })
        .collect::<R<Vec<_>>>()?;
    let mean = |f: fn(&ReplayRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let report = json!({
        "config": cfg,
        "mean_agreement_1e4": mean(|r| r.agreement_1e4),
        "mean_agreement_1e5": mean(|r| r.agreement_1e5),
        "min_agreement_1e4": rows.iter().map(|r| r.agreement_1e4).fold(f64::INFINITY, f64::min),
        "runs": rows,
    });
    let mut t = Table::new(&[
        "seed",
        "agreement_1e4",
        "agreement_1e5",
        "full_final_sparsity",
        "full_final_train_loss",
        "masked_final_train_loss",
    ]);
    for r in &rows {
        t.push([
            r.seed.to_string(),
            r.agreement_1e4.to_string(),
            r.agreement_1e5.to_string(),
            r.full_final_sparsity.to_string(),
            r.full_final_train_loss.to_string(),
            r.masked_final_train_loss.to_string(),
        ]);
    }
    Ok(Output::new(&report, t))
}

fn toy_sweep(a: &ToySweepArgs, ctx: &mut Ctx) -> R<Output> {
    let cfg = toy_config(&a.toy, ctx)?;
    let objectives = a
        .objectives
        .iter()
        .map(|s| s.parse::<Objective>())
        .collect::<Result<Vec<_>, _>>()?;
    record_config(&cfg, ctx);
    ctx.manifest.param("seeds", join(&a.seeds));
    ctx.manifest.param("objectives", join(&objectives));
    ctx.progress(format!("sweeping {} run(s)", objectives.len() * a.seeds.len()));
    let entries = toy::sweep(&cfg, &a.seeds, &objectives)?;
    let means: serde_json::Map<String, serde_json::Value> = objectives
        .iter()
        .filter_map(|&o| toy::mean_final_sparsity(&entries, o).map(|m| (o.to_string(), json!(m))))
        .collect();
    let gap = toy::mean_final_sparsity(&entries, Objective::DpoInd)
        .zip(toy::mean_final_sparsity(&entries, Objective::SftOod))
        .map(|(d, s)| d - s);
    let report = json!({
        "config": cfg,
        "entries": entries,
        "mean_final_sparsity": means,
        "sparsity_gap_dpo_minus_sft": gap,
    });
    let mut t = Table::new(&["objective", "seed", "final_sparsity", "final_loss"]);
    for e in &entries {
        t.push([e.objective.to_string(), e.seed.to_string(), e.final_sparsity.to_string(), e.final_loss.to_string()]);
    }
    Ok(Output::new(&report, t))
}
