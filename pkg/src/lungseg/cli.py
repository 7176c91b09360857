"""Command line pipeline: ingest, folds, gan-train, augment, train, infer, eval, report.

Every command works inside one run directory.  ``ingest`` creates a fresh
timestamped directory under ``paths.output_dir`` unless ``--run`` names one;
the other commands default to the newest run there.  Each command writes a
manifest under ``<run>/manifests/`` that records the resolved config, the
command line and the sha256 of every input and output file.

Run layout::

    config.json                     resolved config of the run
    slices.slpk                     ingested real slices
    folds.json                      fold plan
    fold-K/generator.ckpt           per-fold GAN (plus discriminator.ckpt, gan_history.csv)
    fold-K/train_augmented.slpk     training slices plus synthetic copies
    fold-K/run-R/segnet.ckpt        best-validation weights (plus segnet_last.ckpt, history.csv)
    fold-K/run-R/eval.json          test metrics and per-slice table
    fold-K/eval.json                all runs of the fold, their mean and the best-validation run
    report/                         metrics.csv, metrics_best.csv, report.json, overlays/
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import numpy as np

from . import __version__
from .config import CONFIG_ENV, RunConfig, load_config
from .core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core.rng import make_rng
from .core.threads import set_threads
from .data.folds import FoldPlan, make_folds
from .data.nifti import NiftiError, read_nifti
from .data.slicepack import SlicePackError, read_slicepack, write_slicepack
from .data.slices import Origin, SliceSample, volume_to_slices
from .evaluation import Metrics, area_stats, evaluate, per_slice_average, postprocess
from .evaluation.report import emit_report, write_metrics_csv
from .ganaug import GanConfig, GanTrainConfig, Generator, augment_dataset, make_pair, train_cgan
from .segnet import SegNet, SegNetConfig, TrainConfig, infer, train_segnet, write_history

log = logging.getLogger("lungseg")

CT_DIRS = ("ct", "COVID-19-CT-Seg_20cases")
LUNG_DIRS = ("lung", "Lung_Mask")
INFECTION_DIRS = ("infection", "Infection_Mask")
NIFTI_SUFFIXES = (".nii", ".nii.gz")

PACK = "slices.slpk"
FOLDS = "folds.json"
AUGMENTED = "train_augmented.slpk"


class PipelineError(click.ClickException):
    pass


# --------------------------------------------------------------------------
# shared plumbing


class Context:
    def __init__(self, cfg: RunConfig, run: Path, invocation: dict):
        self.cfg = cfg
        self.run = run
        self.invocation = invocation

    @property
    def dtype(self):
        return np.float64 if self.cfg.precision == "float64" else np.float32

    def fold_dir(self, fold: int) -> Path:
        return self.run / f"fold-{fold}"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise PipelineError(f"missing {self.rel(path)} in run {self.run}; produce it with `lungseg {producer}`")
        return path

    def rel(self, path: Path) -> str:
        try:
            return str(Path(path).resolve().relative_to(self.run.resolve()))
        except ValueError:
            return str(path)

    def manifest(self, name: str, inputs: Sequence[Path], outputs: Sequence[Path], **extra) -> Path:
        doc = {
            "command": name,
            "invocation": self.invocation,
            "version": __version__,
            "config": self.cfg.to_dict(),
            "inputs": {self.rel(p): sha256(p) for p in inputs},
            "outputs": {self.rel(p): sha256(p) for p in outputs},
            **extra,
        }
        path = self.run / "manifests" / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, doc)
        return path


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def derive_seed(seed: int, name: str) -> int:
    return int(make_rng(seed, name).integers(0, 2**63 - 1))


def latest_run(root: Path) -> Optional[Path]:
    if not root.is_dir():
        return None
    runs = sorted(p for p in root.iterdir() if (p / "config.json").is_file())
    return runs[-1] if runs else None


def fresh_run(root: Path) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path, n = root / stamp, 1
    while path.exists():
        path, n = root / f"{stamp}-{n}", n + 1
    return path


def pipeline_command(fn):
    """Translate library errors into a one-line diagnostic and exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, OSError, NiftiError, SlicePackError, CheckpointError) as e:
            raise PipelineError(str(e)) from e

    return wrapper


def make_context(obj: dict, create: bool) -> Context:
    """Resolve the run directory and the config.

    An explicit ``--config`` wins; otherwise a run's own config.json is the
    base, and $LUNGSEG_CONFIG only seeds brand-new runs.  ``--set`` overrides
    always apply last.
    """
    overrides = list(obj["overrides"])
    cfg = load_config(obj["config"], overrides)
    if obj["run"] is not None:
        run = Path(obj["run"])
    elif create:
        run = fresh_run(Path(cfg.paths.output_dir))
    else:
        run = latest_run(Path(cfg.paths.output_dir))
        if run is None:
            raise PipelineError(f"no run directory under {cfg.paths.output_dir}; start one with `lungseg ingest`")
    stored = run / "config.json"
    if obj["config"] is None and stored.is_file():
        cfg = load_config(stored, overrides, env={})
    run.mkdir(parents=True, exist_ok=True)
    if not stored.is_file():
        write_json(stored, cfg.to_dict())
    set_threads(cfg.threads)
    click_ctx = click.get_current_context()
    invocation = {"global": click_ctx.parent.params if click_ctx.parent else {},
                  "command": click_ctx.info_name, "options": click_ctx.params}
    return Context(cfg, run, invocation)


def load_pack(ctx: Context) -> List[SliceSample]:
    return read_slicepack(ctx.require(ctx.run / PACK, "ingest"))


def load_plan(ctx: Context) -> FoldPlan:
    plan = FoldPlan.load(ctx.require(ctx.run / FOLDS, "folds"))
    if plan.k != ctx.cfg.data.k:
        raise PipelineError(f"fold plan has k={plan.k} but the config asks for k={ctx.cfg.data.k}; rerun `lungseg folds`")
    return plan


def split(samples: Sequence[SliceSample], plan: FoldPlan, fold: int) -> Dict[str, List[SliceSample]]:
    f = plan.folds[fold]
    out: Dict[str, List[SliceSample]] = {"train": [], "validation": [], "test": []}
    for s in samples:
        out[f.role(s.volume_id, s.slice_index)].append(s)
    return out


def resolve_fold(ctx: Context, fold: Optional[int]) -> int:
    f = ctx.cfg.fold if fold is None else fold
    if not 0 <= f < ctx.cfg.data.k:
        raise PipelineError(f"fold {f} outside 0..{ctx.cfg.data.k - 1}")
    return f


def run_indices(ctx: Context, run_index: Optional[int]) -> List[int]:
    n = ctx.cfg.train.runs_per_fold
    if run_index is None:
        return list(range(n))
    if not 0 <= run_index < n:
        raise PipelineError(f"run index {run_index} outside 0..{n - 1}")
    return [run_index]


def seg_config(cfg: RunConfig, image_size: int) -> SegNetConfig:
    m = cfg.model
    return SegNetConfig(image_size, tuple(m.widths), m.bottleneck, m.ratio, m.filters, m.spatial_kernel)


def gan_config(cfg: RunConfig, image_size: int) -> GanConfig:
    g = cfg.gan
    return GanConfig(image_size, g.depth, g.base_width, g.disc_width, g.disc_layers)


def build_segnet(ctx: Context, image_size: int, seed: int) -> SegNet:
    return SegNet(seg_config(ctx.cfg, image_size), make_rng(seed, "segnet-init")).astype(ctx.dtype)


def load_segnet(ctx: Context, fold: int, r: int, image_size: int) -> SegNet:
    path = ctx.require(ctx.fold_dir(fold) / f"run-{r}" / "segnet.ckpt", f"train --fold {fold}")
    model = build_segnet(ctx, image_size, 0)
    model.load_state_dict(load_checkpoint(path))
    return model


def load_generator(ctx: Context, fold: int, image_size: int) -> Generator:
    path = ctx.require(ctx.fold_dir(fold) / "generator.ckpt", f"gan-train --fold {fold}")
    G = Generator(gan_config(ctx.cfg, image_size), make_rng(0, "gan-generator")).astype(ctx.dtype)
    G.load_state_dict(load_checkpoint(path))
    return G


# --------------------------------------------------------------------------
# commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help=f"JSON run config (default: the run's config.json, else ${CONFIG_ENV}).")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config field, e.g. --set train.lr=0.0005 (repeatable).")
@click.option("--run", "run_dir", type=click.Path(file_okay=False),
              help="Run directory (default: a new timestamped one for ingest, else the newest).")
@click.option("--seed", type=int, help="Shortcut for --set seed=N.")
@click.option("--threads", type=int, help="BLAS threads; 1 gives bitwise-reproducible runs.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(__version__)
@click.pass_context
def main(click_ctx, config_path, overrides, run_dir, seed, threads, verbose):
    """Lung-CT infection segmentation pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    if threads is not None:
        overrides.append(f"threads={threads}")
    click_ctx.obj = {"config": config_path, "overrides": overrides, "run": run_dir}


@main.command()
@click.option("--input", "input_dir", type=click.Path(file_okay=False),
              help="NIfTI root (default: paths.raw) with CT, lung and infection folders.")
@click.option("--out", "out_pack", type=click.Path(dir_okay=False), help=f"Slice pack path (default: <run>/{PACK}).")
@click.pass_obj
@pipeline_command
def ingest(obj, input_dir, out_pack):
    """Read NIfTI volumes into a slice pack and print dataset statistics."""
    ctx = make_context(obj, create=True)
    root = Path(input_dir or ctx.cfg.paths.raw)
    if not root.is_dir():
        raise PipelineError(f"input directory {root} does not exist")
    ct_dir, lung_dir, inf_dir = (_find_dir(root, names) for names in (CT_DIRS, LUNG_DIRS, INFECTION_DIRS))
    cts = sorted(p for p in ct_dir.iterdir() if p.name.endswith(NIFTI_SUFFIXES))
    if not cts:
        raise PipelineError(f"no .nii or .nii.gz files in {ct_dir}")
    samples, inputs, volumes = [], [], []
    for vid, ct_path in enumerate(cts):
        lung_path, inf_path = lung_dir / ct_path.name, inf_dir / ct_path.name
        for kind, p in (("lung", lung_path), ("infection", inf_path)):
            if not p.is_file():
                raise PipelineError(f"missing {kind} label for {ct_path.name}: expected {p}")
        ct, lung, inf = read_nifti(ct_path), read_nifti(lung_path), read_nifti(inf_path)
        samples.extend(volume_to_slices(ct, lung, inf, vid, window=tuple(ctx.cfg.data.hu_window)))
        inputs += [ct_path, lung_path, inf_path]
        volumes.append({"volume_id": vid, "file": ct_path.name, "dims": list(ct.dims)})
    pack = Path(out_pack) if out_pack else ctx.run / PACK
    write_slicepack(pack, samples)
    if out_pack and pack.resolve() != (ctx.run / PACK).resolve():
        write_slicepack(ctx.run / PACK, samples)
    stats = area_stats(samples)
    summary = {
        "volumes": len(cts),
        "slices": len(samples),
        "infected_slices": stats.infected_slices,
        "infected_fraction": stats.infected_fraction,
        "area_above_threshold_fraction": stats.fraction_above,
    }
    ctx.manifest("ingest", inputs, [pack], volumes=volumes, stats=summary)
    click.echo(f"run: {ctx.run}")
    click.echo(f"volumes: {len(cts)}  slices: {len(samples)}  infected: {stats.infected_slices} "
               f"({_pct(stats.infected_fraction)})  area>{stats.threshold}px: {_pct(stats.fraction_above)}")
    click.echo(f"pack: {pack}")


def _find_dir(root: Path, names: Sequence[str]) -> Path:
    for n in names:
        if (root / n).is_dir():
            return root / n
    raise PipelineError(f"{root} has none of the folders {', '.join(names)}")


def _pct(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}%"


@main.command()
@click.pass_obj
@pipeline_command
def folds(obj):
    """Plan the k folds: test volumes per fold and validation slices."""
    ctx = make_context(obj, create=False)
    samples = load_pack(ctx)
    real = [s for s in samples if s.origin == Origin.REAL]
    ids = sorted({s.volume_id for s in real})
    plan = make_folds(ids, ctx.cfg.seed, ctx.cfg.data.k, [(s.volume_id, s.slice_index) for s in real],
                      ctx.cfg.data.val_fraction)
    out = ctx.run / FOLDS
    plan.save(out)
    ctx.manifest("folds", [ctx.run / PACK], [out])
    for f in plan.folds:
        click.echo(f"fold {f.index}: test volumes {f.test_volumes}, {len(f.val_slices)} validation slices")


@main.command("gan-train")
@click.option("--fold", type=int, help="Fold index (default: config fold).")
@click.pass_obj
@pipeline_command
def gan_train(obj, fold):
    """Train the mask-to-texture GAN on one fold's training slices."""
    ctx = make_context(obj, create=False)
    fold = resolve_fold(ctx, fold)
    parts = split(load_pack(ctx), load_plan(ctx), fold)
    train = [s for s in parts["train"] if s.origin == Origin.REAL]
    if not any(s.infected for s in train):
        raise PipelineError(f"fold {fold} has no infected training slice to learn texture from")
    g = ctx.cfg.gan
    tcfg = GanTrainConfig(g.lr, g.beta1, g.beta2, g.lambda_l1, g.batch_size, g.epochs, g.max_steps,
                          derive_seed(ctx.cfg.seed, f"gan-fold-{fold}"))
    result = train_cgan([make_pair(s) for s in train], tcfg, gan_config(ctx.cfg, train[0].image.shape[-1]))
    d = ctx.fold_dir(fold)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "generator.ckpt", result.generator.state_dict())
    save_checkpoint(d / "discriminator.ckpt", result.discriminator.state_dict())
    with open(d / "gan_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "d_loss", "g_adv", "g_l1"])
        for i, r in enumerate(result.steps):
            w.writerow([i, repr(r.d_loss), repr(r.g_adv), repr(r.g_l1)])
    outs = [d / "generator.ckpt", d / "discriminator.ckpt", d / "gan_history.csv"]
    ctx.manifest(f"gan-train-fold-{fold}", [ctx.run / PACK, ctx.run / FOLDS], outs,
                 fold=fold, seed=tcfg.seed, steps=len(result.steps))
    last = result.steps[-1] if result.steps else None
    click.echo(f"fold {fold}: {len(result.steps)} GAN steps"
               + (f", final L1 {last.g_l1:.4f}" if last else ""))


@main.command()
@click.option("--fold", type=int, help="Fold index (default: config fold).")
@click.pass_obj
@pipeline_command
def augment(obj, fold):
    """Add mirrored and GAN-synthesized copies of infected training slices."""
    ctx = make_context(obj, create=False)
    fold = resolve_fold(ctx, fold)
    parts = split(load_pack(ctx), load_plan(ctx), fold)
    train = parts["train"]
    if not train:
        raise PipelineError(f"fold {fold} has no training slices")
    a = ctx.cfg.augment
    inputs = [ctx.run / PACK, ctx.run / FOLDS]
    generate = None
    if a.n_gan > 0:
        G = load_generator(ctx, fold, train[0].image.shape[-1])
        generate = G.generate
        inputs.append(ctx.fold_dir(fold) / "generator.ckpt")
    seed = derive_seed(ctx.cfg.seed, f"augment-fold-{fold}")
    out = augment_dataset(train, generate, a.n_classic, a.n_gan, seed)
    path = ctx.fold_dir(fold) / AUGMENTED
    path.parent.mkdir(parents=True, exist_ok=True)
    write_slicepack(path, out)
    counts = {o.name.lower(): sum(1 for s in out if s.origin == o) for o in Origin}
    ctx.manifest(f"augment-fold-{fold}", inputs, [path], fold=fold, seed=seed, counts=counts)
    click.echo(f"fold {fold}: {counts['real']} real + {counts['classical']} classical + {counts['gan']} GAN slices")


@main.command()
@click.option("--fold", type=int, help="Fold index (default: config fold).")
@click.option("--run-index", type=int, help="Train only this repeat (default: all train.runs_per_fold).")
@click.option("--no-augment", is_flag=True, help="Train on the real training slices only.")
@click.pass_obj
@pipeline_command
def train(obj, fold, run_index, no_augment):
    """Train the segmentation network on one fold (each configured repeat)."""
    ctx = make_context(obj, create=False)
    fold = resolve_fold(ctx, fold)
    parts = split(load_pack(ctx), load_plan(ctx), fold)
    inputs = [ctx.run / PACK, ctx.run / FOLDS]
    if no_augment:
        train_set = parts["train"]
    else:
        aug = ctx.require(ctx.fold_dir(fold) / AUGMENTED, f"augment --fold {fold}")
        train_set = read_slicepack(aug)
        inputs.append(aug)
    if not train_set:
        raise PipelineError(f"fold {fold} has no training slices")
    t = ctx.cfg.train
    size = train_set[0].image.shape[-1]
    for r in run_indices(ctx, run_index):
        seed = derive_seed(ctx.cfg.seed, f"train-fold-{fold}-run-{r}")
        model = build_segnet(ctx, size, seed)
        tcfg = TrainConfig(t.lr, t.batch_size, t.epochs, t.patience, t.max_steps, t.lambda_lung,
                           ctx.cfg.postprocess.bin_thresh, ctx.cfg.postprocess.area_thresh, seed)
        result = train_segnet(model, train_set, parts["validation"], tcfg)
        d = ctx.fold_dir(fold) / f"run-{r}"
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(d / "segnet.ckpt", result.best_state)
        save_checkpoint(d / "segnet_last.ckpt", result.last_state)
        write_history(d / "history.csv", result.history)
        best = result.history[result.best_epoch]["val_dice_infection"] if result.history else None
        best = None if best is None or np.isnan(best) else best
        ctx.manifest(f"train-fold-{fold}-run-{r}", inputs,
                     [d / "segnet.ckpt", d / "segnet_last.ckpt", d / "history.csv"],
                     fold=fold, run=r, seed=seed, steps=result.steps, best_epoch=result.best_epoch,
                     best_val_dice=best, augmented=not no_augment)
        click.echo(f"fold {fold} run {r}: {result.steps} steps, best epoch {result.best_epoch}, "
                   f"validation Dice {'n/a' if best is None else f'{best:.4f}'}")


@main.command("infer")
@click.option("--fold", type=int, help="Fold index (default: config fold).")
@click.option("--run-index", type=int, default=0, show_default=True, help="Which trained repeat to use.")
@click.option("--input", "input_pack", type=click.Path(dir_okay=False),
              help="Slice pack to segment (default: the fold's test slices).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              help="Output directory (default: <run>/fold-K/run-R/infer).")
@click.pass_obj
@pipeline_command
def infer_cmd(obj, fold, run_index, input_pack, out_dir):
    """Write infection and lung probability maps and post-processed masks."""
    ctx = make_context(obj, create=False)
    fold = resolve_fold(ctx, fold)
    r = run_indices(ctx, run_index)[0]
    if input_pack:
        samples, inputs = read_slicepack(input_pack), [Path(input_pack)]
    else:
        samples = split(load_pack(ctx), load_plan(ctx), fold)["test"]
        inputs = [ctx.run / PACK, ctx.run / FOLDS]
    if not samples:
        raise PipelineError("nothing to segment: the slice set is empty")
    model = load_segnet(ctx, fold, r, samples[0].image.shape[-1])
    inputs.append(ctx.fold_dir(fold) / f"run-{r}" / "segnet.ckpt")
    images = np.stack([s.image for s in samples])
    inf, lung = infer(model, images)
    p = ctx.cfg.postprocess
    masks = np.stack([postprocess(x, p.bin_thresh, p.area_thresh, p.per_component) for x in inf])
    out = Path(out_dir) if out_dir else ctx.fold_dir(fold) / f"run-{r}" / "infer"
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "infection_prob.npy", inf.astype(np.float32))
    np.save(out / "lung_prob.npy", lung.astype(np.float32))
    np.save(out / "infection_mask.npy", masks)
    write_json(out / "slices.json", [list(s.key()) for s in samples])
    outs = [out / n for n in ("infection_prob.npy", "lung_prob.npy", "infection_mask.npy", "slices.json")]
    ctx.manifest(f"infer-fold-{fold}-run-{r}", inputs, outs, fold=fold, run=r)
    click.echo(f"segmented {len(samples)} slices into {out}")


def _eval_suffix(no_postprocess: bool) -> str:
    return "-nopost" if no_postprocess else ""


@main.command("eval")
@click.option("--fold", type=int, help="Fold index (default: config fold).")
@click.option("--no-postprocess", is_flag=True, help="Skip the small-area rule (plain 0.5 threshold).")
@click.pass_obj
@pipeline_command
def eval_cmd(obj, fold, no_postprocess):
    """Score every trained repeat of a fold on its test volumes."""
    ctx = make_context(obj, create=False)
    fold = resolve_fold(ctx, fold)
    test = split(load_pack(ctx), load_plan(ctx), fold)["test"]
    if not test:
        raise PipelineError(f"fold {fold} has no test slices")
    p = ctx.cfg.postprocess
    sfx = _eval_suffix(no_postprocess)
    runs, outputs = [], []
    for r in run_indices(ctx, None):
        d = ctx.fold_dir(fold) / f"run-{r}"
        manifest = ctx.require(ctx.run / "manifests" / f"train-fold-{fold}-run-{r}.json", f"train --fold {fold}")
        model = load_segnet(ctx, fold, r, test[0].image.shape[-1])
        res = evaluate(model, test, not no_postprocess, p.bin_thresh, p.area_thresh, p.per_component)
        np.save(d / f"pred{sfx}.npy", res.predictions)
        doc = {"fold": fold, "run": r, "postprocess": not no_postprocess, "metrics": res.metrics.as_dict(),
               "counts": vars(res.counts), "per_slice_average": per_slice_average(res.per_slice),
               "per_slice": res.per_slice, "best_val_dice": read_json(manifest)["best_val_dice"]}
        write_json(d / f"eval{sfx}.json", doc)
        outputs += [d / f"pred{sfx}.npy", d / f"eval{sfx}.json"]
        runs.append(doc)
        click.echo(f"fold {fold} run {r}: " + "  ".join(f"{k} {v:.4f}" for k, v in doc["metrics"].items()))
    mean = {k: float(np.mean([d["metrics"][k] for d in runs])) for k in runs[0]["metrics"]}
    best = max(runs, key=lambda d: _nan_low(d["best_val_dice"]))
    summary = {"fold": fold, "postprocess": not no_postprocess, "mean": mean, "best_run": best["run"],
               "best": best["metrics"], "runs": [{k: d[k] for k in ("run", "metrics", "counts", "best_val_dice")}
                                                for d in runs]}
    path = ctx.fold_dir(fold) / f"eval{sfx}.json"
    write_json(path, summary)
    inputs = [ctx.run / PACK, ctx.run / FOLDS] + [ctx.fold_dir(fold) / f"run-{d['run']}" / "segnet.ckpt"
                                                  for d in runs]
    ctx.manifest(f"eval{sfx}-fold-{fold}", inputs, outputs + [path], fold=fold)


def _nan_low(x) -> float:
    return -np.inf if x is None else x


@main.command()
@click.option("--no-postprocess", is_flag=True, help="Report the evaluation made without the small-area rule.")
@click.option("--overlays", "n_overlays", type=int, default=8, show_default=True,
              help="Overlay images per fold (test slices with the predicted mask).")
@click.pass_obj
@pipeline_command
def report(obj, no_postprocess, n_overlays):
    """Collect the evaluated folds into metrics.csv, report.json and overlay images."""
    ctx = make_context(obj, create=False)
    sfx = _eval_suffix(no_postprocess)
    plan = load_plan(ctx)
    folds_done = [f for f in range(plan.k) if (ctx.fold_dir(f) / f"eval{sfx}.json").is_file()]
    if not folds_done:
        raise PipelineError(f"no evaluated fold in {ctx.run}; produce one with `lungseg eval"
                            + (" --no-postprocess`" if no_postprocess else "`"))
    if len(folds_done) < plan.k:
        log.warning("reporting %d of %d folds: %s", len(folds_done), plan.k, folds_done)
    summaries = [read_json(ctx.fold_dir(f) / f"eval{sfx}.json") for f in folds_done]
    mean_rows = [Metrics(**s["mean"]) for s in summaries]
    best_rows = [Metrics(**s["best"]) for s in summaries]

    samples = None
    overlays = []
    if n_overlays > 0:
        samples = load_pack(ctx)
        for f in folds_done:
            test = split(samples, plan, f)["test"]
            r = summaries[folds_done.index(f)]["best_run"]
            pred = np.load(ctx.fold_dir(f) / f"run-{r}" / f"pred{sfx}.npy")
            for s, m in list(zip(test, pred))[:n_overlays]:
                overlays.append((f"fold{f}_vol{s.volume_id}_slice{s.slice_index}", s.image, m))

    out = ctx.run / "report"
    manifest = {"config": ctx.cfg.to_dict(), "seed": ctx.cfg.seed, "fold_plan": json.loads(plan.to_json()),
                "folds": folds_done, "postprocess": not no_postprocess,
                "aggregation": "csv columns are the mean over a fold's runs; metrics_best.csv uses the run "
                               "with the best validation Dice",
                "per_fold_runs": summaries}
    paths = emit_report(out, mean_rows, manifest, overlays)
    write_metrics_csv(out / "metrics_best.csv", best_rows)
    inputs = [ctx.run / FOLDS] + [ctx.fold_dir(f) / f"eval{sfx}.json" for f in folds_done]
    ctx.manifest(f"report{sfx}", inputs, [paths["csv"], paths["json"], out / "metrics_best.csv"])
    click.echo(Path(paths["csv"]).read_text(encoding="utf-8").rstrip())
    click.echo(f"report: {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
