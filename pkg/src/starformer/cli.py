"""Command-line entry point: gen-data, train, eval, ablate, viz-attn, inspect."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from starformer import plotting
from starformer.config import (
    ConfigError,
    env_config,
    load_config,
    model_config,
    train_config,
    with_model,
    write_snapshot,
)
from starformer.envs import (
    EnvConfig,
    evaluate,
    expert_mean_return,
    generate_offline_dataset,
    make_env,
    manifest_path,
    rollout,
)
from starformer.model import (
    CheckpointError,
    StARformer,
    StepEmbed,
    build_variant,
    extract_attention,
    load_checkpoint,
)
from starformer.training import TrainingDivergedError, seed_everything, train
from starformer.trajectory import DatasetError, RewardMode, dataset_read, read_header

log = logging.getLogger("starformer")

DATASET_NAME = "dataset.bin"
USER_ERRORS = (ConfigError, DatasetError, CheckpointError, TrainingDivergedError, FileNotFoundError, ValueError)


class UsageError(Exception):
    pass


def emit(title: str, fields: Mapping[str, Any]) -> None:
    """Print one delimited report block."""
    print(f"==== {title} ====")
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key}: {value}")
    print(f"==== end {title} ====")


def _json_dump(obj: Any, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# shared pipeline pieces


def load_dataset(path: str | Path | None, env: EnvConfig):
    if path is None:
        raise UsageError("no dataset given; pass --data PATH (see `starformer gen-data`)")
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_NAME
    header = read_header(path)
    if header.env_id and header.env_id != env.env_id:
        raise ConfigError(
            f"dataset {path} was generated for {header.env_id} but the config describes {env.env_id}; "
            "set env.kind / env.frame_stack / env.frame_skip to match"
        )
    manifest = None
    if manifest_path(path).exists():
        manifest = json.loads(manifest_path(path).read_text())
    return dataset_read(path), manifest


def resolve_target_rtg(tree: Mapping[str, Any], env: EnvConfig, manifest: Mapping | None) -> float:
    if tree["eval"]["target_rtg"] is not None:
        return float(tree["eval"]["target_rtg"])
    if manifest is not None and manifest.get("target_rtg") is not None:
        return float(manifest["target_rtg"])
    return expert_mean_return(env)


def train_run(tree: Mapping[str, Any], trajectories, manifest, out_dir: Path):
    env = env_config(tree)
    mcfg = model_config(tree, env)
    tcfg = train_config(tree)
    seed_everything(tcfg.seed)
    model = build_variant(mcfg)
    extra = {"env": env.to_dict(), "target_rtg": resolve_target_rtg(tree, env, manifest)}
    result = train(model, trajectories, tcfg, out_dir, checkpoint_extra=extra)
    return model, result, extra


def eval_run(model, tree: Mapping[str, Any], env: EnvConfig, target_rtg: float) -> dict[str, Any]:
    section = tree["eval"]
    mode = model.cfg.reward_mode
    return evaluate(
        model,
        env,
        int(section["episodes"]),
        [int(s) for s in section["seeds"]],
        reward_mode=mode,
        target_rtg=target_rtg if mode is RewardMode.RTG else None,
    )


def _checkpoint_env(extra: Mapping[str, Any], tree: Mapping[str, Any]) -> EnvConfig:
    if "env" in extra:
        return EnvConfig(**extra["env"])
    return env_config(tree)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(tree, args) -> int:
    out = Path(args.out)
    write_snapshot(tree, out)
    env = env_config(tree)
    data = tree["data"]
    path = out / DATASET_NAME
    manifest = generate_offline_dataset(env, float(data["epsilon"]), int(data["episodes"]), int(data["seed"]), path)
    emit("gen-data", {
        "path": path,
        "env": manifest["env_id"],
        "episodes": manifest["n_episodes"],
        "epsilon": manifest["epsilon"],
        "seed": manifest["seed"],
        "mean_return": manifest["mean_return"],
        "target_rtg": manifest["target_rtg"],
    })
    return 0


def cmd_train(tree, args) -> int:
    out = Path(args.out)
    write_snapshot(tree, out)
    env = env_config(tree)
    trajectories, manifest = load_dataset(tree["data"]["path"], env)
    model, result, _ = train_run(tree, trajectories, manifest, out)
    plotting.save_training_curve(result.metrics, out / "training_curve.png")
    last = result.metrics[-1]
    emit("train", {
        "variant": model.cfg.variant,
        "reward_mode": model.cfg.reward_mode.value,
        "T": model.cfg.seq_len,
        "parameters": model.num_parameters(),
        "steps": result.steps,
        "tokens": result.tokens,
        "final_loss": last["loss"],
        "checkpoint": result.checkpoint,
        "metrics": out / "metrics.jsonl",
    })
    return 0


def cmd_eval(tree, args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    model, extra = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    write_snapshot(tree, out)
    env = _checkpoint_env(extra, tree)
    target = tree["eval"]["target_rtg"]
    target = float(target) if target is not None else extra.get("target_rtg") or expert_mean_return(env)
    report = eval_run(model, tree, env, target)
    _json_dump(report, out / "eval.json")
    emit("eval", {k: report[k] for k in ("env", "variant", "reward_mode", "T", "seeds", "per_seed_mean", "mean", "std")})
    return 0


def ablation_grid(tree: Mapping[str, Any]) -> list[dict[str, Any]]:
    section = tree["ablate"]
    variants = list(section["variants"])
    if section["include_dt"] and "dt" not in variants:
        variants.append("dt")
    cells = []
    for variant in variants:
        for mode in section["reward_modes"]:
            for seq_len in section["seq_lens"]:
                for seed in section["seeds"]:
                    cells.append({
                        "variant": str(variant),
                        "reward_mode": RewardMode(mode).value,
                        "T": int(seq_len),
                        "seed": int(seed),
                    })
    for cell in cells:
        cell["key"] = f"{cell['variant']}|{cell['reward_mode']}|T{cell['T']}|s{cell['seed']}"
    return cells


def summarise_ablation(records: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Pool per-seed runs into one row per (variant, reward mode, T)."""
    rows: dict[tuple, dict[str, Any]] = {}
    for rec in records:
        key = (rec["variant"], rec["reward_mode"], rec["T"])
        row = rows.setdefault(key, {"variant": key[0], "reward_mode": key[1], "T": key[2], "seeds": [], "returns": []})
        row["seeds"].append(rec["seed"])
        row["returns"].extend(r for rs in rec["per_seed_returns"] for r in rs)
    out = []
    for row in rows.values():
        returns = np.asarray(row.pop("returns"), dtype=np.float64)
        row["mean"] = float(returns.mean())
        row["std"] = float(returns.std())
        row["label"] = f"{row['variant']} / {row['reward_mode']} / T={row['T']}"
        out.append(row)
    return out


def cmd_ablate(tree, args) -> int:
    out = Path(args.out)
    write_snapshot(tree, out)
    env = env_config(tree)
    trajectories, manifest = load_dataset(tree["data"]["path"], env)
    cells = ablation_grid(tree)
    for cell in cells:  # fail fast on unknown variant keys
        model_config(with_model(tree, variant=cell["variant"]), env)

    results_path = out / "results.jsonl"
    done: dict[str, dict[str, Any]] = {}
    if results_path.exists():
        for line in results_path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                done[rec["key"]] = rec
    for cell in cells:
        if cell["key"] in done:
            log.info("skipping finished cell %s", cell["key"])
            continue
        cell_tree = with_model(tree, variant=cell["variant"], reward_mode=cell["reward_mode"], seq_len=cell["T"])
        cell_tree["train"]["seed"] = cell["seed"]
        cell_dir = out / "cells" / cell["key"].replace("|", "_").replace(":", "-").replace("+", "p")
        write_snapshot(cell_tree, cell_dir)
        model, _, extra = train_run(cell_tree, trajectories, manifest, cell_dir)
        report = eval_run(model, cell_tree, env, extra["target_rtg"])
        rec = {**cell, **{k: report[k] for k in ("per_seed_returns", "per_seed_mean", "mean", "std")}}
        with open(results_path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        done[cell["key"]] = rec

    rows = summarise_ablation([done[c["key"]] for c in cells])
    with open(out / "results.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "reward_mode", "T", "seeds", "mean", "std"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (" ".join(map(str, row[k])) if k == "seeds" else row[k]) for k in writer.fieldnames})
    ranked = sorted(rows, key=lambda r: -r["mean"])
    lines = ["| rank | variant | reward mode | T | mean | std |", "|---|---|---|---|---|---|"]
    lines += [
        f"| {i} | {r['variant']} | {r['reward_mode']} | {r['T']} | {r['mean']:.3f} | {r['std']:.3f} |"
        for i, r in enumerate(ranked, 1)
    ]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    plotting.save_ablation_figure(rows, out / "ablation.png", title=env.env_id)
    print("==== ablate ====")
    print("\n".join(lines))
    print("==== end ablate ====")
    return 0


def object_patches(frame: np.ndarray, patch_size: int) -> np.ndarray:
    """Boolean (grid, grid) mask of patches holding any lit pixel."""
    g = frame.shape[0] // patch_size
    return frame.reshape(g, patch_size, g, patch_size).max(axis=(1, 3)) > 0


def cmd_viz_attn(tree, args) -> int:
    if not args.checkpoint:
        raise UsageError("viz-attn needs --checkpoint PATH")
    model, extra = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    if not isinstance(model, StARformer) or cfg.step_embed_mode is not StepEmbed.PATCH:
        raise ConfigError(
            f"viz-attn needs a Step Transformer with patch tokens (P+* variants); checkpoint is {cfg.variant}"
        )
    out = Path(args.out)
    write_snapshot(tree, out)
    env_cfg = _checkpoint_env(extra, tree)
    section = tree["viz"]
    layers = [int(x) for x in section["layers"]]
    heads = [int(x) for x in section["heads"]]
    target = extra.get("target_rtg") if cfg.reward_mode is RewardMode.RTG else None
    seed = int(args.seed) if args.seed is not None else 0

    maps, frames, labels, names = [], [], [], []
    hits: dict[str, list[bool]] = {}
    for episode in range(int(section["episodes"])):
        env = make_env(env_cfg, seed + episode)
        res = rollout(model, env, target_rtg=target, keep_windows=True)
        for t, window in enumerate(res.windows[: int(section["timesteps"])]):
            frame = window.states[-1][..., -1]
            lit = object_patches(frame, cfg.patch_size)
            for layer in layers:
                for head in heads:
                    amap = extract_attention(model, window, layer, head)[-1]
                    name = f"ep{episode:02d}_t{t:03d}_l{layer}_h{head}"
                    plotting.save_heatmap(frame, amap, out / f"{name}.png", title=name)
                    maps.append(amap)
                    frames.append(frame)
                    labels.append(name)
                    names.append(name)
                    top = np.unravel_index(int(np.argmax(amap)), amap.shape)
                    hits.setdefault(f"l{layer}_h{head}", []).append(bool(lit[top]))
    if not maps:
        raise UsageError("nothing to draw; raise viz.episodes or viz.timesteps")
    plotting.save_contact_sheet(frames, maps, labels, out / "contact_sheet.png")
    np.savez(out / "maps.npz", names=np.array(names), maps=np.stack(maps), frames=np.stack(frames))
    rates = {k: float(np.mean(v)) for k, v in hits.items()}
    _json_dump({"top_patch_on_object": rates}, out / "viz_summary.json")
    emit("viz-attn", {
        "variant": cfg.variant,
        "heatmaps": len(maps),
        "contact_sheet": out / "contact_sheet.png",
        **{f"top_patch_on_object[{k}]": v for k, v in rates.items()},
    })
    return 0


def cmd_inspect(tree, args) -> int:
    path = args.data or tree["data"]["path"]
    if path is None:
        raise UsageError("inspect needs --data PATH")
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_NAME
    header = read_header(path)
    trajectories = dataset_read(path)
    returns = np.array([t.episode_return for t in trajectories])
    lengths = np.array([len(t) for t in trajectories])
    fields: dict[str, Any] = {
        "path": path,
        "format_version": header.version,
        "env": header.env_id,
        "action_space": f"{header.action_space.kind.value}({header.action_space.dim})",
        "frame_stack": header.frame_stack,
        "frame_size": f"{header.height}x{header.width}",
        "episodes": header.count,
        "steps": int(lengths.sum()),
        "episode_length": f"min {lengths.min()} mean {lengths.mean():.2f} max {lengths.max()}",
        "return_mean": float(returns.mean()),
        "return_std": float(returns.std()),
    }
    counts, edges = np.histogram(returns, bins=min(10, max(1, len(np.unique(returns)))))
    for c, lo, hi in zip(counts, edges, edges[1:]):
        fields[f"return[{lo:.3g}, {hi:.3g}]"] = f"{c:6d} {'#' * int(round(40 * c / counts.max()))}"
    actions = np.concatenate([t.actions for t in trajectories])
    if header.action_space.discrete:
        for a, c in enumerate(np.bincount(actions.astype(np.int64), minlength=header.action_space.dim)):
            fields[f"action[{a}]"] = f"{c} ({c / len(actions):.3f})"
    else:
        for k in range(header.action_space.dim):
            fields[f"action[{k}]"] = f"mean {actions[:, k].mean():.3f} std {actions[:, k].std():.3f}"
    emit("inspect", fields)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz-attn": cmd_viz_attn,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", help="P+C, P+P, P+__, C+C, C+P, C+__, fusion[:X+Y], stack[:X+Y], dt, dt-vit")
        p.add_argument("--reward-mode", choices=[m.value for m in RewardMode])
        p.add_argument("--seq-len", type=int)
        p.add_argument("--episodes", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="dataset file or gen-data output directory")
    return parser


def flag_overrides(args: argparse.Namespace) -> list[str]:
    """Translate dedicated flags into dotted overrides (applied after --set)."""
    out = []
    if args.variant is not None:
        out.append(f"model.variant={args.variant}")
    if args.reward_mode is not None:
        out.append(f"model.reward_mode={args.reward_mode}")
    if args.seq_len is not None:
        out.append(f"model.seq_len={args.seq_len}")
    if args.data is not None:
        out.append(f"data.path={args.data}")
    if args.seed is not None:
        key = {"gen-data": "data.seed", "train": "train.seed", "eval": "eval.seeds", "ablate": "ablate.seeds"}
        if args.command in key:
            value = f"[{args.seed}]" if key[args.command].endswith("seeds") else str(args.seed)
            out.append(f"{key[args.command]}={value}")
    if args.episodes is not None:
        key = {"gen-data": "data.episodes", "eval": "eval.episodes", "ablate": "eval.episodes", "viz-attn": "viz.episodes"}
        if args.command in key:
            out.append(f"{key[args.command]}={args.episodes}")
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        tree = load_config(args.config, [*args.set, *flag_overrides(args)])
        return COMMANDS[args.command](tree, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
