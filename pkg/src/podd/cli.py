"""Command-line entry point.

Every command takes the run-config JSON as its first argument and is a
pure function of (config, input artifacts, seed): rerunning reproduces
the outputs bit for bit apart from wall-clock fields.  Exit codes:
0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import json
import os
import sys
import time
from typing import Any

import click
import numpy as np
import torch

from . import io
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_datasets,
    make_run_dir,
    parse_config,
    resolved_geometry,
)
from .data import LabeledDataset, class_mean_embeddings
from .distillation import DistillConfig, DistillState, distill, expand
from .evaluation import (
    EvalProtocol,
    baseline_noise_poster,
    baseline_random_coreset,
    coreset_budget,
    evaluate_poster,
    evaluate_real_images,
)
from .geometry import extraction_spec
from .ordering import ClassOrder, cosine_distance_matrix, greedy_place, ordering_score
from .seeding import derive_seed

LOG_COLUMNS = ("step", "t_end", "outer_loss", "poster_grad_norm", "label_grad_norm", "wall_ms")

POSTER_FILE = "poster.podd"
LABELS_FILE = "labels.podl"
ORDER_FILE = "order.json"
CHECKPOINT_FILE = "checkpoint.pt"


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str, overrides: tuple[str, ...]) -> tuple[RunConfig, str]:
    try:
        raw = io.read_json(path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    raw = apply_overrides(raw, overrides)
    cfg = parse_config(raw)
    return cfg, io.config_hash(raw)


def _embeddings(cfg: RunConfig, train: LabeledDataset):
    if cfg.embeddings_path is not None:
        try:
            _, table = io.read_embeddings(cfg.embeddings_path)
            return io.embedding_set_for(cfg.meta.class_names, table)
        except (OSError, ValueError) as e:
            raise ConfigError(str(e)) from None
    return class_mean_embeddings(train)


def _compute_order(cfg: RunConfig, train: LabeledDataset, first_class: int = 0):
    emb = _embeddings(cfg, train)
    distances = cosine_distance_matrix(emb)
    order = greedy_place(distances, cfg.distill.class_rows, cfg.distill.class_cols, first_class)
    return order, distances


def _resolve_order(cfg: RunConfig, train: LabeledDataset, order_path: str | None) -> ClassOrder:
    if order_path is not None:
        order = io.read_class_order(order_path)
        if (order.rows, order.cols) != (cfg.distill.class_rows, cfg.distill.class_cols):
            raise ConfigError(
                f"{order_path}: grid {order.rows}x{order.cols} does not match config "
                f"{cfg.distill.class_rows}x{cfg.distill.class_cols}"
            )
        return order
    order, _ = _compute_order(cfg, train)
    return order


def _spec_for(cfg: RunConfig):
    geo = resolved_geometry(cfg.meta, cfg.distill)
    return extraction_spec(
        geo["poster_h"],
        geo["poster_w"],
        patch_h=cfg.meta.image_h,
        patch_w=cfg.meta.image_w,
        grid_rows=cfg.distill.patch_rows,
        grid_cols=cfg.distill.patch_cols,
    )


config_argument = click.argument("config_path", metavar="CONFIG", type=click.Path(exists=False))
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override a config key, e.g. --set distill.epochs=5.",
)
out_option = click.option(
    "--out",
    "out_dir",
    default=None,
    type=click.Path(),
    help="Output directory (defaults to a hash+timestamp dir under the run root).",
)


@click.group()
def main() -> None:
    """Distill a labeled image dataset into one shared poster plus soft labels."""


@main.command("order")
@config_argument
@set_option
@out_option
@click.option("--first-class", default=0, show_default=True, help="Class index placed first.")
@click.option("--random-orders", default=0, show_default=True, help="Also score R random placements.")
def cmd_order(config_path: str, overrides: tuple[str, ...], out_dir: str | None, first_class: int, random_orders: int) -> None:
    """Compute the class placement and write it as JSON with its score."""
    try:
        cfg, digest = _load_config(config_path, overrides)
        train, _ = load_datasets(cfg)
        order, distances = _compute_order(cfg, train, first_class)
        score = ordering_score(order, distances)
        extras: dict[str, Any] = {"config_hash": digest}
        if random_orders > 0:
            rng = np.random.default_rng(derive_seed(cfg.distill.seed, "random-orders"))
            scored = []
            for _ in range(random_orders):
                grid = rng.permutation(cfg.meta.n_classes).reshape(
                    cfg.distill.class_rows, cfg.distill.class_cols
                )
                rand = ClassOrder(grid=grid.astype(np.int64))
                scored.append({"grid": rand.grid.tolist(), "score": ordering_score(rand, distances)})
            extras["random_orders"] = scored
        run_dir = make_run_dir(digest, out_dir or cfg.output_dir)
        path = os.path.join(run_dir, ORDER_FILE)
        io.write_class_order(order, score, path, extras)
    except ConfigError as e:
        _fail(2, str(e))
    except (OSError, ValueError) as e:
        _fail(3, str(e))
    click.echo(f"order score {score:.6f} -> {path}")


@main.command("distill")
@config_argument
@set_option
@out_option
@click.option("--order", "order_path", default=None, type=click.Path(), help="Class-order JSON from `podd order`.")
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in --out.")
def cmd_distill(config_path: str, overrides: tuple[str, ...], out_dir: str | None, order_path: str | None, resume: bool) -> None:
    """Run the optimization and write poster, labels, log and preview."""
    try:
        cfg, digest = _load_config(config_path, overrides)
        if resume and out_dir is None:
            raise ConfigError("--resume needs --out pointing at the run directory")
        train, _ = load_datasets(cfg)
        order = _resolve_order(cfg, train, order_path)
        run_dir = make_run_dir(digest, out_dir or cfg.output_dir)
        io.write_json({"digest": digest, "config": cfg.raw}, os.path.join(run_dir, "config.json"))

        state = None
        optimizer_state = None
        checkpoint_path = os.path.join(run_dir, CHECKPOINT_FILE)
        if resume:
            if not os.path.exists(checkpoint_path):
                raise ConfigError(f"no checkpoint at {checkpoint_path}")
            saved = io.load_checkpoint(checkpoint_path)
            if saved["digest"] != digest:
                raise ConfigError("checkpoint was produced by a different config")
            state = DistillState(
                poster=saved["poster"].requires_grad_(True),
                label_tensor=saved["label_tensor"].requires_grad_(True),
                step=saved["step"],
                plan_rng=saved["plan_rng"],
                loss_history=saved["loss_history"],
            )
            optimizer_state = saved["optimizer"]

        logger = io.CsvLogger(os.path.join(run_dir, "log.csv"), LOG_COLUMNS)
        last_time = time.perf_counter()

        def log_fn(record: dict[str, float]) -> None:
            nonlocal last_time
            now = time.perf_counter()
            record = dict(record, wall_ms=round((now - last_time) * 1000.0, 3))
            last_time = now
            logger.append(record)

        def checkpoint_fn(s: DistillState, optimizer: torch.optim.Optimizer) -> None:
            io.save_checkpoint(
                checkpoint_path,
                {
                    "digest": digest,
                    "step": s.step,
                    "poster": s.poster.detach().clone(),
                    "label_tensor": s.label_tensor.detach().clone(),
                    "plan_rng": s.plan_rng,
                    "loss_history": list(s.loss_history),
                    "optimizer": optimizer.state_dict(),
                },
            )

        poster, label_tensor = distill(
            train,
            order,
            cfg.distill,
            log_fn=log_fn,
            checkpoint_fn=checkpoint_fn,
            state=state,
            optimizer_state=optimizer_state,
        )
        io.write_poster(poster, os.path.join(run_dir, POSTER_FILE))
        io.write_label_tensor(label_tensor, os.path.join(run_dir, LABELS_FILE))
        io.export_png(poster, os.path.join(run_dir, "poster.png"))
        io.write_class_order(order, 0.0, os.path.join(run_dir, ORDER_FILE), {"config_hash": digest})
    except ConfigError as e:
        _fail(2, str(e))
    except (OSError, ValueError, RuntimeError) as e:
        _fail(3, str(e))
    click.echo(f"poster {poster.height}x{poster.width}x{poster.channels} -> {run_dir}")


@main.command("eval")
@config_argument
@set_option
@out_option
@click.option("--run", "run_dir_in", default=None, type=click.Path(), help="Run directory holding poster and labels files.")
@click.option("--poster", "poster_path", default=None, type=click.Path(), help="Poster file (overrides --run).")
@click.option("--labels", "labels_path", default=None, type=click.Path(), help="Labels file (overrides --run).")
@click.option("--models", "n_models", default=None, type=int, help="Override the number of evaluation models.")
@click.option(
    "--baseline",
    "baselines",
    multiple=True,
    type=click.Choice(["noise", "coreset", "full"]),
    help="Baseline rows to add (repeatable).",
)
def cmd_eval(
    config_path: str,
    overrides: tuple[str, ...],
    out_dir: str | None,
    run_dir_in: str | None,
    poster_path: str | None,
    labels_path: str | None,
    n_models: int | None,
    baselines: tuple[str, ...],
) -> None:
    """Train fresh models on the expanded poster and report test accuracy."""
    try:
        cfg, digest = _load_config(config_path, overrides)
        if poster_path is None or labels_path is None:
            if run_dir_in is None:
                raise ConfigError("pass --run DIR or both --poster and --labels")
            poster_path = poster_path or os.path.join(run_dir_in, POSTER_FILE)
            labels_path = labels_path or os.path.join(run_dir_in, LABELS_FILE)
            stored = os.path.join(run_dir_in, "config.json")
            if os.path.exists(stored) and io.read_json(stored).get("digest") != digest:
                click.echo("warning: artifacts were produced by a different config", err=True)

        poster = io.read_poster(poster_path)
        label_tensor = io.read_label_tensor(labels_path)
        spec = _spec_for(cfg)
        if (poster.height, poster.width) != (spec.poster_h, spec.poster_w):
            raise ConfigError(
                f"poster is {poster.height}x{poster.width}, config resolves to "
                f"{spec.poster_h}x{spec.poster_w}"
            )
        protocol = cfg.protocol
        if n_models is not None:
            protocol = EvalProtocol(
                n_models=n_models,
                train_budget=protocol.train_budget,
                learning_rate=protocol.learning_rate,
                batch_size=protocol.batch_size,
                depth=protocol.depth,
                width=protocol.width,
                seed=protocol.seed,
                plateau_patience=protocol.plateau_patience,
            )

        train, test = load_datasets(cfg)
        result = evaluate_poster(poster, label_tensor, spec, cfg.distill.label_mode, test, protocol)
        report: dict[str, Any] = {
            "mean": result.mean,
            "std": result.std,
            "per_model": list(result.per_model),
            "config_hash": digest,
            "protocol": {
                "n_models": protocol.n_models,
                "train_budget": protocol.train_budget,
                "learning_rate": protocol.learning_rate,
                "depth": protocol.depth,
                "width": protocol.width,
            },
            "baselines": {},
        }
        for name in baselines:
            if name == "noise":
                noise_poster, noise_labels = baseline_noise_poster(
                    cfg.meta,
                    cfg.distill.ipc,
                    (cfg.distill.class_rows, cfg.distill.class_cols),
                    cfg.distill.seed,
                )
                r = evaluate_poster(noise_poster, noise_labels, spec, "fixed", test, protocol)
            elif name == "coreset":
                subset = baseline_random_coreset(
                    train,
                    coreset_budget(cfg.meta, cfg.distill.ipc),
                    derive_seed(cfg.distill.seed, "coreset"),
                )
                r = evaluate_real_images(subset, test, protocol)
            else:
                r = evaluate_real_images(train, test, protocol)
            report["baselines"][name] = {
                "mean": r.mean,
                "std": r.std,
                "per_model": list(r.per_model),
            }
        run_dir = make_run_dir(digest, out_dir or run_dir_in or cfg.output_dir)
        report_path = os.path.join(run_dir, "report.json")
        io.write_json(report, report_path)
    except ConfigError as e:
        _fail(2, str(e))
    except (OSError, ValueError, RuntimeError) as e:
        _fail(3, str(e))
    rows = [f"distilled {result.mean:.4f} ± {result.std:.4f}"]
    rows += [f"{k} {v['mean']:.4f} ± {v['std']:.4f}" for k, v in report["baselines"].items()]
    click.echo("; ".join(rows) + f" -> {report_path}")


def _parse_grids(text: str) -> list[tuple[int, int]]:
    grids = []
    for part in text.split(","):
        part = part.strip().lower()
        try:
            rows, cols = part.split("x")
            grids.append((int(rows), int(cols)))
        except ValueError:
            raise ConfigError(f"bad grid {part!r}, expected ROWSxCOLS") from None
    return grids


@main.command("sweep-patches")
@config_argument
@set_option
@out_option
@click.option("--grids", required=True, metavar="4x2,2x2,...", help="Patch grids to sweep.")
def cmd_sweep_patches(config_path: str, overrides: tuple[str, ...], out_dir: str | None, grids: str) -> None:
    """Distill and evaluate once per patch grid; write the accuracy table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        cfg, digest = _load_config(config_path, overrides)
        requested = _parse_grids(grids)
        train, test = load_datasets(cfg)
        order = _resolve_order(cfg, train, None)
        run_dir = make_run_dir(digest, out_dir or cfg.output_dir)

        rows: list[dict[str, Any]] = []
        for g_rows, g_cols in requested:
            raw = apply_overrides(
                cfg.raw,
                (f"distill.patch_rows={g_rows}", f"distill.patch_cols={g_cols}"),
            )
            raw["distill"]["distilled_batch_size"] = min(
                cfg.distill.distilled_batch_size, g_rows * g_cols
            )
            try:
                sub_cfg = parse_config(raw)
            except ConfigError as e:
                click.echo(f"warning: skipping grid {g_rows}x{g_cols}: {e}", err=True)
                continue
            sub_dir = os.path.join(run_dir, f"grid_{g_rows}x{g_cols}")
            os.makedirs(sub_dir, exist_ok=True)
            poster, label_tensor = distill(train, order, sub_cfg.distill)
            io.write_poster(poster, os.path.join(sub_dir, POSTER_FILE))
            io.write_label_tensor(label_tensor, os.path.join(sub_dir, LABELS_FILE))
            spec = _spec_for(sub_cfg)
            result = evaluate_poster(
                poster, label_tensor, spec, sub_cfg.distill.label_mode, test, sub_cfg.protocol
            )
            rows.append(
                {
                    "p": spec.n_patches,
                    "grid": f"{g_rows}x{g_cols}",
                    "accuracy_mean": result.mean,
                    "accuracy_std": result.std,
                }
            )
        if not rows:
            raise ConfigError("no valid grids to sweep")

        csv_path = os.path.join(run_dir, "sweep.csv")
        logger = io.CsvLogger(csv_path, ("p", "grid", "accuracy_mean", "accuracy_std"))
        for row in rows:
            logger.append(row)
        ordered = sorted(rows, key=lambda r: r["p"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.errorbar(
            [r["p"] for r in ordered],
            [100 * r["accuracy_mean"] for r in ordered],
            yerr=[100 * r["accuracy_std"] for r in ordered],
            marker="o",
        )
        ax.set_xlabel("patches")
        ax.set_ylabel("accuracy (%)")
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, "sweep.png"), dpi=120)
        plt.close(fig)
    except ConfigError as e:
        _fail(2, str(e))
    except (OSError, ValueError, RuntimeError) as e:
        _fail(3, str(e))
    click.echo(f"{len(rows)} grids -> {csv_path}")


@main.command("export-png")
@config_argument
@set_option
@click.option("--poster", "poster_path", required=True, type=click.Path(), help="Poster file to render.")
@click.option("--labels", "labels_path", default=None, type=click.Path(), help="Labels file for the patch-label dump.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output PNG path.")
def cmd_export_png(config_path: str, overrides: tuple[str, ...], poster_path: str, labels_path: str | None, out_path: str) -> None:
    """Render a poster file to PNG; optionally dump resolved patch labels."""
    try:
        cfg, _ = _load_config(config_path, overrides)
        poster = io.read_poster(poster_path)
        io.export_png(poster, out_path)
        if labels_path is not None:
            label_tensor = io.read_label_tensor(labels_path)
            spec = _spec_for(cfg)
            _, labels = expand(poster, label_tensor, spec, cfg.distill.label_mode)
            io.write_json(
                {
                    "positions": [list(pos) for pos in spec.positions],
                    "labels": labels.numpy().tolist(),
                },
                f"{os.path.splitext(out_path)[0]}_patch_labels.json",
            )
    except ConfigError as e:
        _fail(2, str(e))
    except (OSError, ValueError, RuntimeError) as e:
        _fail(3, str(e))
    click.echo(f"png -> {out_path}")


@main.command("info")
@config_argument
@set_option
def cmd_info(config_path: str, overrides: tuple[str, ...]) -> None:
    """Validate the config and print the geometry it resolves to."""
    try:
        cfg, digest = _load_config(config_path, overrides)
        geo = resolved_geometry(cfg.meta, cfg.distill)
        payload: dict[str, Any] = {
            "config_hash": digest,
            "dataset": {
                "kind": cfg.dataset_kind,
                "n_classes": cfg.meta.n_classes,
                "image": f"{cfg.meta.image_h}x{cfg.meta.image_w}x{cfg.meta.channels}",
            },
            "geometry": geo,
            "label_mode": cfg.distill.label_mode,
        }
        if cfg.dataset_kind == "synthetic":
            m = cfg.synthetic.n_classes * cfg.synthetic.per_class
            steps = -(-m // cfg.distill.data_batch_size)
            payload["outer_steps"] = {
                "per_epoch": steps,
                "total": steps * cfg.distill.epochs,
            }
    except ConfigError as e:
        _fail(2, str(e))
    except (OSError, ValueError) as e:
        _fail(3, str(e))
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
