"""Command-line orchestration.

Subcommands: ``dataset | train | generate | ablate | eval | defaults``.
A TOML config file supplies values, ``--set section.key=value`` flags
override it, and every command writes a manifest sufficient to re-run
it bit-identically.  Exit codes: 0 success, 1 validation, 2 runtime,
3 partial-sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, scenes
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .config import (RunConfig, apply_overrides, config_hash, dump_toml,
                     load_config)
from .datasets import SceneDataset
from .errors import (FileFormatError, LocalDiffError, ParameterError,
                     ShapeError, TrainingError, UsageError, ValidationError,
                     VocabularyError)
from .evaluation import (TABLE_TOGGLE_ROWS, evaluate_run, run_ablation,
                         two_object_scenario, write_raw_csv,
                         write_report_csv, write_report_json)
from .guidance import ControlMask, GuidanceConfig
from .model import Denoiser, ModelConfig
from .sampler import (GuidanceToggles, NoiseSchedule, TrainHyperparams,
                      sample, train_control_branch, train_denoiser)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _command_manifest(out_dir: Path, command: str, cfg: RunConfig,
                      extra=None) -> None:
    payload = {"command": command, "config_hash": config_hash(cfg),
               "seed": cfg.seed, "version": __version__,
               "config": dataclasses.asdict(cfg)}
    payload.update(extra or {})
    _write_json(out_dir / f"{command}_manifest.json", payload)


def _build_schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(cfg.schedule.train_steps,
                                cfg.schedule.beta_start,
                                cfg.schedule.beta_end)


def _guidance_config(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(**dataclasses.asdict(cfg.guidance))


def cmd_dataset(cfg: RunConfig, out_dir: Path) -> int:
    previews = []
    for i in range(cfg.data.count):
        spec = scenes.scene_for_index(cfg.data.seed, i)
        image, caption, _ = scenes.generate_scene(spec)
        name = f"scene_{i:04d}.png"
        scenes.save_png(out_dir / name, image)
        previews.append({"index": i, "file": name, "caption": caption})
    scenes.write_dataset_manifest(
        out_dir / "scene_index.json", seed=cfg.data.seed,
        count=cfg.data.count,
        params={"dilation": cfg.data.dilation,
                "previews": previews})
    _command_manifest(out_dir, "dataset", cfg)
    return 0


def train_pipeline(cfg: RunConfig, out_dir: Path, resume=None,
                   log=lambda msg: None):
    """Two-phase training (base, then control branch) with snapshots.

    ``train.steps`` and ``train.control_steps`` are totals: resuming a
    checkpoint trains only the remaining steps, so resume(k)+train is
    bit-identical to an unbroken run.
    """
    schedule = _build_schedule(cfg)
    ds = SceneDataset(cfg.train.dataset_seed, cfg.train.dataset_size)
    ckpt_path = out_dir / "checkpoint.ldc"
    opt_base, opt_ctrl = None, None
    if resume is not None:
        model, opt_tensors, _ = load_checkpoint(resume)
        opt_base = {k[5:]: v for k, v in opt_tensors.items()
                    if k.startswith("base/")}
        opt_ctrl = {k[5:]: v for k, v in opt_tensors.items()
                    if k.startswith("ctrl/")}
    else:
        model = Denoiser(ModelConfig(channels=tuple(cfg.model.channels)),
                         dtype=_DTYPES[cfg.model.dtype])
        model.init_weights(cfg.model.init_seed)

    loss_rows = []

    def snapshot():
        extra = {}
        for prefix, state in (("base", opt_base), ("ctrl", opt_ctrl)):
            for k, v in (state or {}).items():
                extra[f"{prefix}/{k}"] = v
        save_checkpoint(ckpt_path, model, extra_tensors=extra,
                        extra_meta={"schedule": dataclasses.asdict(cfg.schedule),
                                    "config_hash": config_hash(cfg)})

    def run_phase(phase, trained, total, step_fn):
        nonlocal opt_base, opt_ctrl
        while trained < total:
            chunk = min(cfg.train.checkpoint_every, total - trained)
            try:
                losses, opt_state = step_fn(chunk)
            except TrainingError as e:
                snapshot()
                raise TrainingError(str(e), last_checkpoint=str(ckpt_path))
            for i, lv in enumerate(losses):
                loss_rows.append((phase, trained + i, lv))
            trained += chunk
            if phase == "base":
                opt_base = opt_state
            else:
                opt_ctrl = opt_state
            snapshot()
            log(f"{phase}: {trained}/{total} steps, loss {losses[-1]:.4f}")

    hp = TrainHyperparams(batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                          seed=cfg.train.seed,
                          dataset_size=cfg.train.dataset_size)

    def base_step(chunk):
        hp2 = dataclasses.replace(hp, steps=chunk)
        return train_denoiser(model, schedule, hp2, ds,
                              optimizer_state=opt_base)

    def ctrl_step(chunk):
        hp2 = dataclasses.replace(hp, steps=chunk)
        return train_control_branch(model, schedule, hp2, ds, ds.condition,
                                    optimizer_state=opt_ctrl)

    run_phase("base", model.train_steps, cfg.train.steps, base_step)
    if cfg.train.control_steps > 0 and cfg.train.steps > 0:
        run_phase("control", model.control_train_steps,
                  cfg.train.control_steps, ctrl_step)
    snapshot()
    with open(out_dir / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "step", "loss"])
        w.writerows(loss_rows)
    return model, ckpt_path


def cmd_train(cfg: RunConfig, out_dir: Path, resume=None) -> int:
    _, ckpt_path = train_pipeline(cfg, out_dir, resume=resume,
                                  log=lambda m: print(m, file=sys.stderr))
    _command_manifest(out_dir, "train", cfg,
                      extra={"checkpoint_hash": checkpoint_hash(ckpt_path)})
    return 0


def _load_condition(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".png":
        arr = scenes.load_png(p)
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 255))):
            raise ValidationError(
                "condition PNG is not binary (0/255); threshold it first")
        return arr == 255
    return scenes.load_mask(p)


def _load_model(cfg: RunConfig):
    path = cfg.sample.checkpoint
    if not path:
        raise ValidationError("sample.checkpoint is required")
    model, _, extra = load_checkpoint(path)
    sched_meta = extra.get("schedule") or dataclasses.asdict(cfg.schedule)
    schedule = NoiseSchedule.linear(sched_meta["train_steps"],
                                    sched_meta["beta_start"],
                                    sched_meta["beta_end"])
    return model, schedule.strided(cfg.schedule.inference_steps), \
        checkpoint_hash(path)


def _diag_csv(path, diagnostics) -> None:
    fields = ["t", "tau", "mode", "c_control", "c_control_token",
              "history_step", "l", "l_token", "l_after", "l_margin",
              "spatial_margin", "grad_norm", "update_norm", "alpha_t"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for d in diagnostics:
            w.writerow(d)


def cmd_generate(cfg: RunConfig, out_dir: Path) -> int:
    model, schedule, ckpt_hash = _load_model(cfg)
    if not cfg.sample.condition:
        raise ValidationError("sample.condition (PNG/PGM path) is required")
    edges = _load_condition(cfg.sample.condition)
    if edges.shape != (model.config.canvas, model.config.canvas):
        raise ValidationError(
            f"condition resolution {edges.shape} does not match the model "
            f"canvas {model.config.canvas}")
    condition = torch.from_numpy(edges.astype(np.float64))
    mask = None
    if cfg.sample.mask:
        m = scenes.load_mask(cfg.sample.mask)
        if m.shape != edges.shape:
            raise ValidationError("mask resolution does not match condition")
        mask = ControlMask.from_image(m.astype(np.uint8))
    gcfg = _guidance_config(cfg)
    prompt = model.embed_prompt(cfg.sample.prompt)
    for seed in cfg.sample.seeds:
        result = sample(model, schedule, prompt, condition, mask, gcfg,
                        mode=cfg.sample.mode, seed=seed,
                        checkpoint_hash=ckpt_hash)
        stem = f"sample_{cfg.sample.mode}_{seed}"
        scenes.save_png(out_dir / f"{stem}.png", result.image)
        _write_json(out_dir / f"{stem}.json", result.manifest)
        _diag_csv(out_dir / f"{stem}_diagnostics.csv", result.diagnostics)
    _command_manifest(out_dir, "generate", cfg,
                      extra={"checkpoint_hash": ckpt_hash})
    return 0


def _parse_toggle_label(label: str) -> GuidanceToggles:
    if label == "none":
        return GuidanceToggles()
    parts = set(label.split("+"))
    unknown = parts - {"rdloss", "ftr", "fmc"}
    if unknown:
        raise ValidationError(f"unknown toggle(s) {sorted(unknown)} in {label!r}")
    return GuidanceToggles(rdloss="rdloss" in parts, ftr="ftr" in parts,
                           fmc="fmc" in parts)


def _scenarios(cfg: RunConfig):
    return [two_object_scenario(cfg.eval.scenario_seed + i,
                                dilation=cfg.data.dilation)
            for i in range(cfg.eval.n_scenarios)]


def cmd_ablate(cfg: RunConfig, out_dir: Path) -> int:
    if not cfg.eval.toggles:
        raise ValidationError("nothing to run: empty toggle list")
    rows = [_parse_toggle_label(lbl) for lbl in cfg.eval.toggles]
    model, schedule, ckpt_hash = _load_model(cfg)
    report = run_ablation(model, schedule, _scenarios(cfg),
                          seeds=cfg.eval.seeds, toggle_rows=rows,
                          config=_guidance_config(cfg),
                          checkpoint_hash=ckpt_hash, jobs=cfg.jobs)
    write_report_csv(out_dir / "ablation.csv", report)
    write_raw_csv(out_dir / "ablation_raw.csv", report)
    write_report_json(out_dir / "ablation.json", report)
    _command_manifest(out_dir, "ablate", cfg,
                      extra={"checkpoint_hash": ckpt_hash})
    return 3 if report.failures else 0


def cmd_eval(cfg: RunConfig, out_dir: Path) -> int:
    model, schedule, ckpt_hash = _load_model(cfg)
    gcfg = _guidance_config(cfg)
    rows, failed = [], False
    for mode in cfg.eval.modes:
        for scenario in _scenarios(cfg):
            for seed in cfg.eval.seeds:
                row = {"mode": mode, "scenario": scenario.name, "seed": seed}
                try:
                    prompt = model.embed_prompt(scenario.prompt_tokens)
                    cond = torch.from_numpy(
                        scenario.condition.edges.astype(np.float64))
                    result = sample(model, schedule, prompt, cond,
                                    scenario.mask, gcfg, mode=mode,
                                    seed=seed, checkpoint_hash=ckpt_hash)
                    row.update(evaluate_run(result, scenario))
                except LocalDiffError as e:
                    row["error"] = f"{type(e).__name__}: {e}"
                    failed = True
                rows.append(row)
    fields = ["mode", "scenario", "seed", "iou", "dual_object",
              "edge_agreement", "runtime_s", "error"]
    with open(out_dir / "eval_metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    _command_manifest(out_dir, "eval", cfg,
                      extra={"checkpoint_hash": ckpt_hash})
    return 3 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localdiff",
        description="Miniature local-control diffusion engine")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in (
            ("dataset", "render a seeded scene dataset"),
            ("train", "train the base denoiser and the control branch"),
            ("generate", "sample images under a local-control condition"),
            ("ablate", "run the guidance toggle sweep"),
            ("eval", "evaluate baseline modes on scenario sets"),
            ("defaults", "print the default config as TOML")):
        p = sub.add_parser(name, help=descr)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=None,
                       help="cap on parallel sweep workers")
        if name == "train":
            p.add_argument("--resume", default=None,
                           help="checkpoint to resume from")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.command == "defaults":
            sys.stdout.write(dump_toml(cfg))
            return 0
        out_dir = Path(args.output or cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "dataset":
            return cmd_dataset(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir, resume=args.resume)
        if args.command == "generate":
            return cmd_generate(cfg, out_dir)
        if args.command == "ablate":
            return cmd_ablate(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir)
        raise UsageError(f"unknown command {args.command}")
    except (ValidationError, ParameterError, UsageError, VocabularyError,
            ShapeError, FileFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (LocalDiffError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
