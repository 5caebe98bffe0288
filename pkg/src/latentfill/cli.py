"""Command-line interface: finetune, inpaint, sweep, serve.

Defaults mirror the reference configuration (100 finetune iterations at
learning rate 1e-5; 50 sampling steps at guidance scale 8), so bare
invocations reproduce it. Every command prints a machine-readable JSON
manifest on success. Exit codes: 0 success, 1 runtime failure, 2 usage or
validation error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from . import codec
from .backbone import PRESETS, build_params
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidInput, LatentFillError
from .finetune import ExemplarBundle, FinetuneConfig, hole_bbox, run_finetune
from .guidance import (
    GuidanceSpec,
    ToyJointEmbedder,
    auto_subject_token,
    stroke_from_rgba,
    validate_spec,
)
from .metrics import MetricReport, known_region_error, stroke_rmse
from .sampler import SamplerConfig, inpaint
from .schedule import make_schedule

DEFAULT_T = 1000


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentfill", description="Multimodal diffusion inpainting toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ft = sub.add_parser("finetune", help="finetune the denoiser on one image")
    ft.add_argument("--image", required=True)
    ft.add_argument("--mask", required=True)
    ft.add_argument("--exemplar")
    ft.add_argument("--iters", type=int, default=100)
    ft.add_argument("--lr", type=float, default=1e-5)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--backbone-seed", type=int, default=0)
    ft.add_argument("--preset", choices=sorted(PRESETS), default="small")
    ft.add_argument("--out", required=True, help="checkpoint output path")
    ft.set_defaults(func=cmd_finetune)

    ip = sub.add_parser("inpaint", help="run guided inpainting from a checkpoint")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--image", required=True)
    ip.add_argument("--mask", required=True)
    ip.add_argument("--text")
    ip.add_argument("--exemplar-token", type=int)
    ip.add_argument("--stroke", help="RGBA raster; alpha > 0 marks stroke pixels")
    ip.add_argument("--tau", type=float)
    ip.add_argument("--scale", type=float, default=8.0)
    ip.add_argument("--steps", type=int, default=50)
    ip.add_argument("--seed", type=int, default=0)
    ip.add_argument("--n", type=int, default=1, help="number of outputs")
    ip.add_argument("--attn-mask", choices=["on", "off"], default="on")
    ip.add_argument("--outdir", required=True)
    ip.set_defaults(func=cmd_inpaint)

    sw = sub.add_parser("sweep", help="cartesian parameter sweep over inpaint runs")
    sw.add_argument("--config", required=True, help="sweep config JSON")
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--config")
    sv.add_argument("--host")
    sv.add_argument("--port", type=int)
    sv.set_defaults(func=cmd_serve)
    return parser


def _load_inputs(image_path: str, mask_path: str, factor: int = codec.DEFAULT_FACTOR):
    image = codec.load_image(_existing(image_path))
    mask = codec.load_mask(_existing(mask_path))
    if mask.shape != image.shape[-2:]:
        raise InvalidInput("mask dims do not match image")
    x_in = codec.encode(image * mask.to(image.dtype), factor)
    m_lat = codec.downsample_mask(mask, factor)
    return image, mask, x_in, m_lat


def _existing(path: str) -> str:
    if not Path(path).exists():
        raise InvalidInput(f"file not found: {path}")
    return path


def cmd_finetune(args) -> int:
    image, mask, x_in, m_lat = _load_inputs(args.image, args.mask)
    sched = make_schedule(DEFAULT_T)
    params = build_params(PRESETS[args.preset], seed=args.backbone_seed)

    bundle = None
    subject_token = None
    if args.exemplar:
        exemplar = codec.load_image(_existing(args.exemplar))
        subject_token = auto_subject_token(exemplar, ToyJointEmbedder(seed=args.backbone_seed))
        bundle = ExemplarBundle(
            x_ref=codec.encode(exemplar),
            subject_token=subject_token,
            hole_bbox=hole_bbox(m_lat),
        )

    cfg = FinetuneConfig(total_iters=args.iters, learning_rate=args.lr, seed=args.seed)
    loss_log = Path(args.out).with_suffix(".losses.jsonl")
    records: list[dict] = []

    def on_progress(rec: dict) -> None:
        records.append(rec)
        if rec["iteration"] % 10 == 0 or rec["iteration"] == cfg.total_iters - 1:
            print(
                f"iter {rec['iteration'] + 1}/{cfg.total_iters} "
                f"bg={rec['bg_loss']:.4f} ref={rec['ref_loss']:.4f}",
                file=sys.stderr,
            )

    run_finetune(params, x_in, m_lat, bundle, cfg, sched, on_progress=on_progress)
    save_checkpoint(params, args.out)
    loss_log.write_text("".join(json.dumps(r) + "\n" for r in records))

    print(
        json.dumps(
            {
                "command": "finetune",
                "checkpoint": str(args.out),
                "loss_log": str(loss_log),
                "iterations": cfg.total_iters,
                "learning_rate": cfg.learning_rate,
                "seed": cfg.seed,
                "subject_token": subject_token,
                "final_bg_loss": records[-1]["bg_loss"] if records else None,
            }
        )
    )
    return 0


def _run_inpaint_job(args) -> dict:
    image, mask, x_in, m_lat = _load_inputs(args.image, args.mask)
    params = load_checkpoint(_existing(args.checkpoint))
    sched = make_schedule(DEFAULT_T)

    stroke = None
    stroke_rgba = None
    if args.stroke:
        stroke_rgba = codec.load_rgba(_existing(args.stroke))
        stroke = stroke_from_rgba(stroke_rgba, mask)
    spec = GuidanceSpec(
        prompt=args.text,
        subject_token=args.exemplar_token,
        stroke=stroke,
        tau=args.tau,
        scale=args.scale,
        seed=args.seed,
        num_outputs=args.n,
        num_steps=args.steps,
        attn_mask=args.attn_mask == "on",
    )
    spec = validate_spec(spec, m_lat)

    outputs = inpaint(
        params,
        x_in,
        m_lat,
        spec,
        SamplerConfig(num_steps=spec.num_steps, attn_mask_enabled=spec.attn_mask),
        sched,
        image=image,
        image_mask=mask,
    )

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, out in enumerate(outputs):
        p = outdir / f"out_{i:03d}.png"
        codec.save_image(out, p)
        paths.append(str(p))

    reports = [
        MetricReport(
            metric="known_region_error",
            values=[known_region_error(out, image, mask) for out in outputs],
            mask_provenance="session mask, image resolution",
        )
    ]
    if stroke_rgba is not None:
        sel = (stroke_rgba[3] > 0).to(torch.float64)
        reports.append(
            MetricReport(
                metric="stroke_rmse",
                values=[stroke_rmse(out, stroke_rgba[:3], sel) for out in outputs],
                mask_provenance="stroke alpha > 0, image resolution",
            )
        )
    report_txt = outdir / "report.txt"
    report_txt.write_text(
        "".join(line + "\n" for r in reports for line in r.to_lines())
    )
    report_json = outdir / "report.json"
    report_json.write_text(json.dumps([r.to_dict() for r in reports], indent=2))

    return {
        "command": "inpaint",
        "outputs": paths,
        "report_text": str(report_txt),
        "report_json": str(report_json),
        "spec": {
            "prompt": spec.prompt,
            "subject_token": spec.subject_token,
            "stroke": args.stroke,
            "tau": spec.tau,
            "scale": spec.scale,
            "seed": spec.seed,
            "num_outputs": spec.num_outputs,
            "num_steps": spec.num_steps,
            "attn_mask": spec.attn_mask,
        },
        "metrics": {r.metric: r.to_dict() for r in reports},
    }


def cmd_inpaint(args) -> int:
    print(json.dumps(_run_inpaint_job(args)))
    return 0


_SWEEP_AXES = {"tau", "scale", "seed", "steps", "text", "attn_mask", "n"}


def cmd_sweep(args) -> int:
    with open(_existing(args.config)) as f:
        config = json.load(f)
    unknown = set(config) - {"base", "axes", "outdir"}
    if unknown:
        raise InvalidInput(f"unknown sweep config keys: {sorted(unknown)}")
    base = config.get("base", {})
    axes = config.get("axes", {})
    outdir = Path(config.get("outdir", "sweep_out"))
    bad_axes = set(axes) - _SWEEP_AXES
    if bad_axes:
        raise InvalidInput(f"invalid sweep axes: {sorted(bad_axes)}; allowed {sorted(_SWEEP_AXES)}")

    names = sorted(axes)
    cells = list(itertools.product(*(axes[n] for n in names))) or [()]
    outdir.mkdir(parents=True, exist_ok=True)

    def run_cell(index_values):
        index, values = index_values
        label = "__".join(f"{n}={v}" for n, v in zip(names, values)) or "single"
        cell_dir = outdir / f"cell_{index:03d}_{label}"
        manifest_path = cell_dir / "manifest.json"
        if manifest_path.exists():
            return {"cell": label, "skipped": True, "manifest": str(manifest_path)}
        cell_args = dict(base)
        cell_args.update(dict(zip(names, values)))
        ns = argparse.Namespace(
            checkpoint=cell_args.get("checkpoint"),
            image=cell_args.get("image"),
            mask=cell_args.get("mask"),
            text=cell_args.get("text"),
            exemplar_token=cell_args.get("exemplar_token"),
            stroke=cell_args.get("stroke"),
            tau=cell_args.get("tau"),
            scale=float(cell_args.get("scale", 8.0)),
            steps=int(cell_args.get("steps", 50)),
            seed=int(cell_args.get("seed", 0)),
            n=int(cell_args.get("n", 1)),
            attn_mask=str(cell_args.get("attn_mask", "on")),
            outdir=str(cell_dir),
        )
        for key in ("checkpoint", "image", "mask"):
            if getattr(ns, key) is None:
                raise InvalidInput(f"sweep base must provide {key!r}")
        manifest = _run_inpaint_job(ns)
        manifest["cell"] = label
        manifest_path.write_text(json.dumps(manifest, indent=2))
        return {"cell": label, "skipped": False, "manifest": str(manifest_path)}

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_cell, enumerate(cells)))
    else:
        results = [run_cell(iv) for iv in enumerate(cells)]

    rows = []
    for res in results:
        manifest = json.loads(Path(res["manifest"]).read_text())
        row = {"cell": manifest.get("cell", res["cell"])}
        for name in names:
            row[name] = manifest["spec"].get(
                {"steps": "num_steps", "text": "prompt", "n": "num_outputs"}.get(name, name)
            )
        for metric, rep in manifest.get("metrics", {}).items():
            row[metric] = rep["mean"]
        rows.append(row)

    aggregate_json = outdir / "aggregate.json"
    aggregate_json.write_text(json.dumps(rows, indent=2))
    aggregate_txt = outdir / "aggregate.txt"
    if rows:
        cols = list(rows[0])
        widths = {c: max(len(c), *(len(str(r.get(c))) for r in rows)) for c in cols}
        lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
        lines += ["  ".join(str(r.get(c)).ljust(widths[c]) for c in cols) for r in rows]
        aggregate_txt.write_text("\n".join(lines) + "\n")
    else:
        aggregate_txt.write_text("")

    print(
        json.dumps(
            {
                "command": "sweep",
                "cells": len(cells),
                "ran": sum(1 for r in results if not r["skipped"]),
                "skipped": sum(1 for r in results if r["skipped"]),
                "aggregate_json": str(aggregate_json),
                "aggregate_table": str(aggregate_txt),
            }
        )
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app, load_config

    cfg = load_config(args.config)
    if args.host or args.port:
        from dataclasses import replace

        cfg = replace(
            cfg, host=args.host or cfg.host, port=args.port or cfg.port
        )
    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LatentFillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
