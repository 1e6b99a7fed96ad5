"""Batch experiment runner: reproducible named experiments with file outputs.

Configs are flat ``key = value`` text files (or a previously emitted
``manifest.json``), optionally overridden by ``--key value`` pairs on the
command line.  Every run writes ``metrics.csv``, ``metrics.json``,
``samples.jsonl`` and ``manifest.json`` into the output directory; for a
fixed seed the outputs are byte-identical across reruns, and a manifest
can itself be re-fed as the config to reproduce them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .evaluation import CSV_HEADER
from .experiments import EXPERIMENTS, run_named_experiment

MANIFEST_FORMAT = "arcnp-manifest-v1"

COMMON_KEYS = ("experiment", "seed", "out", "threads", "model", "checkpoint")


class ConfigError(ValueError):
    pass


def _parse_scalar(raw: str):
    raw = raw.strip()
    for caster in (int, float):
        try:
            return caster(raw)
        except ValueError:
            continue
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def load_config(path: str | Path) -> dict:
    """Read a flat key=value config file, or the config block of a manifest."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        payload = json.loads(text)
        config = payload.get("config", payload)
        if not isinstance(config, dict):
            raise ConfigError(f"{path}: JSON config must be an object")
        return dict(config)
    config: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        config[key.strip()] = _parse_scalar(value)
    return config


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    if len(overrides) % 2 != 0:
        raise ConfigError(f"dangling override {overrides[-1]!r}: expected --key value pairs")
    out = dict(config)
    for flag, value in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"override key {flag!r} must start with '--'")
        out[flag[2:]] = _parse_scalar(value)
    return out


def validate_config(config: dict) -> dict:
    name = config.get("experiment")
    if name not in EXPERIMENTS:
        known = ", ".join(sorted(EXPERIMENTS))
        raise ConfigError(f"unknown experiment {name!r}; choose one of: {known}")
    if config.get("model", "") == "load-checkpoint":
        ckpt = config.get("checkpoint")
        if not ckpt or not Path(str(ckpt)).exists():
            raise ConfigError(f"model = load-checkpoint but checkpoint {ckpt!r} does not exist")
    return config


def _json_bytes(payload) -> bytes:
    return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _write_manifest(out_dir: Path, config: dict, status: str, phase: str | None,
                    error: str | None = None) -> None:
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "experiment": config.get("experiment"),
        "seed": int(config.get("seed", 0)),
        "config": config,
        "status": status,
        "phase": phase,
    }
    if error is not None:
        manifest["error"] = error
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_bytes(_json_bytes(manifest))


def _load_model_for(config: dict):
    """Resolve the model source; only checkpoint loading happens here."""
    if config.get("model", "") == "load-checkpoint":
        from .neural import load_checkpoint

        model, _ = load_checkpoint(str(config["checkpoint"]))
        return {"model": model}
    return {}


def run_experiment(config: dict, out_dir: str | Path | None = None) -> int:
    """Execute a validated experiment config; returns the process exit status.

    Emits metrics.csv, metrics.json, samples.jsonl and manifest.json in the
    output directory; the manifest is written even when a phase fails, with
    the failing phase recorded.
    """
    out = Path(out_dir) if out_dir is not None else Path(str(config.get("out", "runs")))
    phase = "validate"
    try:
        validate_config(config)
        name = str(config["experiment"])
        seed = int(config.get("seed", 0))
        threads = int(config.get("threads", 1))
        phase = "prepare-model"
        extra = {} if name not in ("sawtooth-loglik", "predprey", "ordering-spread") \
            else _load_model_for(config)
        phase = "compute"
        output = run_named_experiment(name, config, seed, threads=threads, **extra)
        phase = "emit"
        out.mkdir(parents=True, exist_ok=True)
        csv_lines = [CSV_HEADER] + [r.to_csv_row() for r in output.reports]
        (out / "metrics.csv").write_bytes(("\n".join(csv_lines) + "\n").encode("utf-8"))
        (out / "metrics.json").write_bytes(_json_bytes(
            {"experiment": name, "rows": [r.row() for r in output.reports]}))
        sample_lines = [json.dumps(s, sort_keys=True) for s in output.samples]
        (out / "samples.jsonl").write_bytes(
            (("\n".join(sample_lines) + "\n") if sample_lines else "").encode("utf-8"))
        _write_manifest(out, config, "ok", None)
        return 0
    except Exception as err:  # manifest records the failing phase
        _write_manifest(out, config, "failed", phase, error=str(err))
        raise


def describe(config: dict) -> str:
    """Human-readable plan for a config, without computing anything."""
    validate_config(config)
    name = str(config["experiment"])
    seed = int(config.get("seed", 0))
    lines = [
        f"experiment: {name}",
        f"seed: {seed} (default 0{', overridden' if 'seed' in config else ''})",
        f"threads: {int(config.get('threads', 1))}",
        f"output directory: {config.get('out', 'runs')}",
        f"model source: {config.get('model', 'experiment default')}",
        "phases: validate -> prepare-model -> compute -> emit",
        "emits: metrics.csv, metrics.json, samples.jsonl, manifest.json",
        "settings:",
    ]
    for key in sorted(config):
        if key not in COMMON_KEYS:
            lines.append(f"  {key} = {config[key]}")
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arcnp",
        description="Run or describe named autoregressive-prediction experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in ("run", "describe"):
        p = sub.add_parser(command)
        p.add_argument("config", help="path to a key=value config file or a manifest.json")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        config = load_config(args.config)
        config = apply_overrides(config, extra)
        for key in ("threads", "out", "seed"):
            value = getattr(args, key)
            if value is not None:
                config[key] = value
        if args.command == "describe":
            print(describe(config))
            return 0
        return run_experiment(config)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        print("usage: arcnp {run,describe} <config> [--key value ...]", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
