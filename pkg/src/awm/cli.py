"""Command-line entry point (``awm``).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from awm import data as D
from awm.config import ExperimentConfig
from awm.networks import NetworkConfig, build, count_parameters
from awm.trainer import NumericalError, evaluate, read_history, train

log = logging.getLogger("awm")

VARIANT = {"cifar10": "c10", "cifar100": "c100", "synthetic": "c10"}


def _data_dir(cfg: ExperimentConfig) -> str:
    root = cfg.data_dir or os.environ.get("AWM_DATA_DIR")
    if not root:
        raise click.UsageError("no CIFAR directory: pass --data-dir or set AWM_DATA_DIR")
    return root


def load_split(cfg: ExperimentConfig, split: str) -> D.Dataset:
    if cfg.dataset == "synthetic":
        seed = cfg.subset_seed if split == "train" else cfg.subset_seed + 1
        return D.synthetic_cifar(cfg.synthetic_per_class, seed)
    ds = D.load_split(_data_dir(cfg), VARIANT[cfg.dataset], split)
    if split == "train" and cfg.subset_per_class:
        ds = D.subset(ds, cfg.subset_per_class, cfg.subset_seed)
    return ds


def _write_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return path
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def _resolve(config_path, seed, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
    net, tr = cfg.network, cfg.train
    if seed is not None:
        tr.seed = seed
    mapping = {
        "arch": (net, "kind"), "depth": (net, "depth"), "classes": (net, "num_classes"),
        "e": (net, "e"), "shortcut": (net, "shortcut"), "t": (tr, "t"),
        "batch_size": (tr, "batch_size"), "lr": (tr, "lr0"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key in mapping:
            obj, attr = mapping[key]
            setattr(obj, attr, value)
        elif key == "epochs":
            if tr.total_epochs != value:
                ms = [int(round(m * value / tr.total_epochs)) for m in tr.lr_decay_epochs]
                tr.lr_decay_epochs = [m for m in ms if 0 < m < value]
            tr.total_epochs = value
        elif key == "milestones":
            tr.lr_decay_epochs = [int(v) for v in value.split(",") if v.strip()]
        else:
            setattr(cfg, key, value)
    if cfg.dataset == "cifar100" and overrides.get("classes") is None:
        net.num_classes = 100
    try:
        cfg.validate()
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    return cfg


common = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                 help="JSON experiment config; flags override it."),
    click.option("--seed", type=int, default=None, help="Training seed."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


def data_options(f):
    f = click.option("--data-dir", default=None, help="Unpacked CIFAR binary directory.")(f)
    f = click.option("--dataset", type=click.Choice(["cifar10", "cifar100", "synthetic"]),
                     default=None)(f)
    return f


def train_options(f):
    for opt in reversed([
        click.option("--arch", type=click.Choice(["resnet_awm", "resnet_plain", "densenet_awm",
                                                   "densenet_plain"]), default=None),
        click.option("--depth", type=int, default=None),
        click.option("--t", "t", type=int, default=None, help="Alternation period in epochs."),
        click.option("--epochs", type=int, default=None, help="Total epochs; milestones rescale."),
        click.option("--milestones", default=None, help="Comma-separated LR decay epochs."),
        click.option("--batch-size", type=int, default=None),
        click.option("--lr", type=float, default=None),
        click.option("--subset-per-class", type=int, default=None),
        click.option("--subset-seed", type=int, default=None),
        click.option("--synthetic-per-class", type=int, default=None),
    ]):
        f = opt(f)
    return data_options(f)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def cli(verbose):
    """Active weighted mapping for residual networks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")


def _run_training(cfg: ExperimentConfig, out: Path, resume: bool = False):
    from awm.checkpoint import load_checkpoint

    train_ds = load_split(cfg, "train")
    test_ds = load_split(cfg, "test")
    out.mkdir(parents=True, exist_ok=True)
    cfg.out_dir = str(out)
    cfg.save(out / "config.json")
    (out / "provenance.json").write_text(json.dumps(
        {"train": train_ds.provenance, "test": test_ds.provenance, "n_train": len(train_ds),
         "n_test": len(test_ds)}, indent=2))
    state, norm = None, None
    ckpt = out / "checkpoint.npz"
    if resume and ckpt.exists():
        net, norm, state, _ = load_checkpoint(ckpt)
    else:
        if (out / "history.jsonl").exists():
            (out / "history.jsonl").unlink()
        net = build(cfg.network, cfg.train.seed)
    history, _ = train(net, train_ds, cfg.train, test_ds, state=state, norm=norm, out_dir=out)
    return history


@cli.command("train")
@with_common
@train_options
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--resume", is_flag=True, help="Continue from OUT/checkpoint.npz if present.")
def train_cmd(config_path, seed, out, resume, **kw):
    """Train a network, writing checkpoint.npz and history.jsonl into OUT."""
    cfg = _resolve(config_path, seed, **kw)
    out = Path(out or cfg.out_dir)
    history = _run_training(cfg, out, resume)
    last = history[-1] if history else {}
    click.echo(f"epochs={len(history)} final_train_loss={last.get('train_loss')} "
               f"final_test_err={last.get('test_err')}")


def _checkpoint_data(checkpoint, dataset, data_dir, split, cfg_path=None, seed=None):
    from awm.checkpoint import load_checkpoint

    net, norm, _, _ = load_checkpoint(checkpoint)
    sibling = Path(checkpoint).with_name("config.json")
    if cfg_path is None and sibling.exists():
        cfg_path = sibling
    cfg = _resolve(cfg_path, seed, dataset=dataset, data_dir=data_dir)
    return net, norm, load_split(cfg, split)


@cli.command("eval")
@with_common
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@data_options
@click.option("--split", type=click.Choice(["train", "test"]), default="test")
def eval_cmd(config_path, seed, checkpoint, dataset, data_dir, split):
    """Print the top-1 error of a checkpoint."""
    net, norm, ds = _checkpoint_data(checkpoint, dataset, data_dir, split, config_path, seed)
    err = evaluate(net, ds, norm)
    click.echo(f"top1_error={err:.6f} n={len(ds)}")


@cli.command("trace")
@with_common
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@data_options
@click.option("--split", type=click.Choice(["train", "test"]), default="test")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def trace_cmd(config_path, seed, checkpoint, dataset, data_dir, split, out):
    """Write the per-image λ₁ trace CSV."""
    from awm.traces import extract_traces, write_traces

    net, norm, ds = _checkpoint_data(checkpoint, dataset, data_dir, split, config_path, seed)
    if not net.awm_units():
        raise click.UsageError("checkpoint holds a plain network without AWM units")
    records = extract_traces(net, ds, norm)
    write_traces(out, records, net.config.kind, net.config.depth)
    click.echo(f"wrote {len(records)} traces of length {len(records[0].lambda1)} to {out}")


@cli.command("analyze-lda")
@with_common
@click.option("--traces", type=click.Path(exists=True, dir_okay=False),
              help="Trace CSV used for fitting (training images).")
@click.option("--test-traces", type=click.Path(exists=True, dir_okay=False),
              help="Trace CSV to evaluate; defaults to a seeded half of --traces.")
@click.option("--dim", type=int, default=30, show_default=True)
@click.option("--pca-dim", type=int, default=None)
@click.option("--pixels", is_flag=True, help="Run the raw-pixel baseline instead.")
@data_options
@click.option("--subset-per-class", type=int, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def analyze_lda_cmd(config_path, seed, traces, test_traces, dim, pca_dim, pixels, dataset,
                    data_dir, subset_per_class, out):
    """Fit PCA + LDA and write the rank-k accuracy curve (plus a PNG next to it)."""
    import warnings

    from awm import traces as TR
    from awm.plotting import plot_cmc

    if pixels:
        cfg = _resolve(config_path, seed, dataset=dataset, data_dir=data_dir,
                       subset_per_class=subset_per_class)
        train_ds, test_ds = load_split(cfg, "train"), load_split(cfg, "test")
        norm = D.channel_stats(train_ds)
        Xtr, ytr = TR.pixel_features(train_ds, norm), train_ds.labels
        Xte, yte = TR.pixel_features(test_ds, norm), test_ds.labels
        name = "pixel-based"
    else:
        if not traces:
            raise click.UsageError("--traces is required unless --pixels is given")
        _, recs = TR.read_traces(traces)
        Xtr, ytr, _ = TR.trace_matrix(recs)
        if test_traces:
            _, trecs = TR.read_traces(test_traces)
            Xte, yte, _ = TR.trace_matrix(trecs)
        else:
            rng = np.random.default_rng(seed or 0)
            mask = rng.random(len(ytr)) < 0.5
            Xtr, ytr, Xte, yte = Xtr[mask], ytr[mask], Xtr[~mask], ytr[~mask]
        name = "weight-based"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            model = TR.fit_pipeline(Xtr, ytr, p=pca_dim, d=dim)
        except ValueError as exc:
            raise D.DataFormatError(f"cannot fit PCA + LDA: {exc}") from exc
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    curve = TR.cmc_curve(model, Xte, yte)
    TR.write_curve(out, curve)
    plot_cmc({name: curve}, Path(out).with_suffix(".png"), max_rank=min(len(curve), 10))
    click.echo(f"{name} rank1={curve[0]:.4f} rank5={curve[min(4, len(curve) - 1)]:.4f} -> {out}")


@cli.command("count-params")
@with_common
@click.option("--arch", type=click.Choice(["resnet_awm", "resnet_plain", "densenet_awm",
                                           "densenet_plain"]), default=None)
@click.option("--depth", type=int, default=None)
@click.option("--classes", type=int, default=None)
@click.option("--e", "e", type=int, default=None)
@click.option("--shortcut", type=click.Choice(["projection", "padded"]), default=None)
def count_params_cmd(config_path, seed, **kw):
    """Print the backbone / AWM / total parameter census."""
    cfg = _resolve(config_path, seed, **kw)
    counts = count_parameters(build(cfg.network, cfg.train.seed))
    units = len(build(cfg.network, 0).awm_units())
    click.echo(f"backbone={counts['backbone']} awm={counts['awm']} total={counts['total']} "
               f"awm_units={units}")


@cli.command("sweep-t")
@with_common
@train_options
@click.option("--values", default="0,1,3,5,7,9", show_default=True)
@click.option("--seeds", default=None, help="Comma-separated seeds (default: --seed or 0).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def sweep_t_cmd(config_path, seed, values, seeds, out, **kw):
    """Train once per (t, seed) with a fixed epoch budget; write sweep.csv."""
    from awm.plotting import plot_t_sweep

    out = Path(out)
    ts = [int(v) for v in values.split(",")]
    seed_list = [int(s) for s in seeds.split(",")] if seeds else [seed or 0]
    rows = []
    for s in seed_list:
        for t in ts:
            cfg = _resolve(config_path, s, **{**kw, "t": t})
            history = _run_training(cfg, out / f"t{t}_s{s}")
            rows.append({"t": t, "seed": s, "final_test_err": history[-1]["test_err"],
                         "final_train_loss": history[-1]["train_loss"]})
            click.echo(f"t={t} seed={s} final_test_err={rows[-1]['final_test_err']}")
            _write_csv(out / "sweep.csv", rows)
    plot_t_sweep(rows, out / "sweep.png")


@cli.command("plot-data")
@with_common
@click.option("--history", "history_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--traces", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: the history directory).")
@data_options
@click.option("--n-images", type=int, default=8, show_default=True)
def plot_data_cmd(config_path, seed, history_dir, traces, out, dataset, data_dir, n_images):
    """Emit tidy CSVs and figures: per-epoch error, t sweep, per-unit λ statistics."""
    from awm import plotting
    from awm import traces as TR

    hdir = Path(history_dir)
    out = Path(out) if out else hdir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (hdir / "history.jsonl").exists():
        records = read_history(hdir)
        written.append(_write_csv(out / "epochs.csv", records))
        written.append(plotting.plot_history(records, out / "epochs.png"))
    if (hdir / "sweep.csv").exists():
        with open(hdir / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        written.append(plotting.plot_t_sweep(rows, out / "sweep.png"))
        runs = []
        for r in rows:
            run_dir = hdir / f"t{r['t']}_s{r['seed']}"
            if (run_dir / "history.jsonl").exists():
                runs += [{"t": r["t"], "seed": r["seed"], **rec} for rec in read_history(run_dir)]
        if runs:
            written.append(_write_csv(out / "sweep_epochs.csv", runs))
    if traces:
        meta, recs = TR.read_traces(traces)
        stats = TR.unit_statistics(recs)
        written.append(_write_csv(out / "unit_stats.csv", stats))
        written.append(plotting.plot_unit_weights(stats, out / "unit_weights.png"))
        asc = TR.sort_by_weight_sum(recs, "ascending")
        sums = {t.image_id: float(t.lambda1.sum()) for t in recs}
        labels = {t.image_id: t.label for t in recs}
        written.append(_write_csv(out / "weight_sum_order.csv", [
            {"rank": i, "image_id": iid, "label": labels[iid], "weight_sum": sums[iid]}
            for i, iid in enumerate(asc)]))
        if dataset:
            cfg = _resolve(config_path, seed, dataset=dataset, data_dir=data_dir)
            ds = load_split(cfg, "test")
            lo, hi = asc[:n_images], asc[::-1][:n_images]
            written.append(plotting.plot_image_strip(ds.images[lo], out / "lowest_weight_sum.png",
                                                     "lowest Σλ₁"))
            written.append(plotting.plot_image_strip(ds.images[hi], out / "highest_weight_sum.png",
                                                     "highest Σλ₁"))
    if not written:
        raise click.UsageError(f"nothing to plot in {hdir}")
    for path in written:
        click.echo(str(path))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="awm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (D.DataFormatError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
