"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, sweep-alpha, report. Every
command resolves one effective config (defaults <- --config file <- --set
overrides <- --seed/--data flags) and writes it next to its outputs.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import engine, report
from .config import (
    ConfigError,
    RunConfig,
    apply_override,
    config_hash,
    from_dict,
    save_config,
    to_dict,
)
from .synthdata import DatasetError, SyntheticDataset, generate_dataset

DATA_ROOT_ENV = "CNSG_DATA_ROOT"


class CliError(RuntimeError):
    pass


def _effective_config(args) -> RunConfig:
    payload = to_dict(RunConfig())
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(
                f"config parse error in {path} at line {err.lineno}: {err.msg}") from err
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root in {path} must be a JSON object")
        try:
            from_dict(loaded)  # validate keys/values in file isolation first
        except ConfigError as err:
            raise ConfigError(f"{path}: {err}") from err
        _deep_merge(payload, loaded)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects dotted.key=value, got '{item}'")
        key, _, value = item.partition("=")
        apply_override(payload, key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    if getattr(args, "data", None):
        payload["data"]["root"] = str(args.data)
    return from_dict(payload)


def _deep_merge(base: dict, extra: dict):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value


def _resolve_data_root(config: RunConfig) -> Path:
    root = config.data.root or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise CliError(
            f"no dataset root: pass --data, set data.root in the config, "
            f"or export {DATA_ROOT_ENV}")
    return Path(root)


def _open_dataset(config: RunConfig) -> SyntheticDataset:
    return SyntheticDataset(_resolve_data_root(config))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(msg: str):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _effective_config(args)
    out = _out_dir(args)
    generate_dataset(
        out,
        num_seeds=config.data.num_seeds,
        size=config.data.resolution,
        num_objects=config.data.num_objects,
        num_classes=config.data.num_classes,
        seed_offset=config.seed,
    )
    save_config(config, out / "generation_config.json")
    print(f"wrote dataset to {out} "
          f"({config.data.num_seeds} seeds x 4 domains at "
          f"{config.data.resolution}x{config.data.resolution})")
    return 0


def cmd_train(args) -> int:
    config = _effective_config(args)
    dataset = _open_dataset(config)
    out = _out_dir(args)
    result = engine.train(config, dataset, out_dir=out,
                          resume_from=args.resume,
                          log_hook=_log_every(args.log_every))
    last = result.log[-1] if result.log else {}
    print(f"trained {config.iterations} iterations "
          f"(config {config_hash(config)}), checkpoint {result.checkpoint_path}")
    if last:
        print(f"final: L_s {last['L_s']:.4f} L_cls {last['L_cls']:.4f} "
              f"L_sca {last['L_sca']:.4f}")
    return 0


def _log_every(n):
    if not n:
        return None

    def hook(record):
        if record["iter"] % n == 0:
            print(f"iter {record['iter']}: L_s {record['L_s']:.4f} "
                  f"L_cls {record['L_cls']:.4f} L_sca {record['L_sca']:.4f} "
                  f"lr {record['lr']:.5f}", flush=True)
    return hook


def cmd_eval(args) -> int:
    payload = engine.load_checkpoint(args.checkpoint)
    model, config = engine.model_from_checkpoint(payload)
    if args.data:
        config = from_dict({**to_dict(config),
                            "data": {**to_dict(config)["data"], "root": str(args.data)}})
    dataset = _open_dataset(config)
    domains = args.domains.split(",") if args.domains else None
    rep = engine.evaluate(model, dataset, config, domains=domains,
                          max_seeds=args.max_seeds)
    out = _out_dir(args)
    metrics = {"config_hash": payload["config_hash"], "report": rep.to_dict()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    rows = [{"domain": d, "miou": f"{r.miou:.6f}"} for d, r in sorted(rep.per_domain.items())]
    rows.append({"domain": "avg", "miou": f"{rep.miou:.6f}"})
    report.write_csv(out / "metrics.csv", rows, ["domain", "miou"])
    save_config(config, out / "config.json")
    for row in rows:
        print(f"{row['domain']}: {100 * float(row['miou']):.2f}")
    return 0


def cmd_ablate(args) -> int:
    config = _effective_config(args)
    dataset = _open_dataset(config)
    out = _out_dir(args)
    result = engine.ablate(config, dataset, eval_max_seeds=args.eval_max_seeds,
                           progress=_progress)
    (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    save_config(config, out / "config.json")
    report.render_run_report(out)
    print((out / "ablation_table.txt").read_text())
    return 0


def cmd_sweep_alpha(args) -> int:
    config = _effective_config(args)
    dataset = _open_dataset(config)
    out = _out_dir(args)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError as err:
        raise CliError(f"bad --alphas '{args.alphas}': {err}") from err
    if not alphas:
        raise CliError("--alphas must list at least one value")
    result = engine.alpha_sweep(config, alphas, dataset,
                                eval_max_seeds=args.eval_max_seeds,
                                progress=_progress)
    (out / "sweep.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    save_config(config, out / "config.json")
    report.render_run_report(out)
    print((out / "sweep_table.txt").read_text())
    return 0


def cmd_report(args) -> int:
    written = report.render_run_report(_out_dir(args))
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cnsg",
        description="Video semantic segmentation with class-wise non-salient "
                    "feature reasoning: synthetic data, training, evaluation, "
                    "and studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value by dotted path "
                            "(repeatable), e.g. --set optimizer.lr=0.02")
        p.add_argument("--seed", type=int, help="override config.seed")
        p.add_argument("--data", help=f"dataset root (or ${DATA_ROOT_ENV})")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic video dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the source domain")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0,
                   help="print a progress line every N iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help=f"dataset root (or ${DATA_ROOT_ENV})")
    p.add_argument("--domains", help="comma-separated domain subset")
    p.add_argument("--max-seeds", type=int, help="evaluate at most N seeds per domain")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the four framework variants")
    common(p)
    p.add_argument("--eval-max-seeds", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-alpha", help="train one model per alpha and plot")
    common(p)
    p.add_argument("--alphas", default="0,0.3,0.9",
                   help="comma-separated alpha values (default 0,0.3,0.9)")
    p.add_argument("--eval-max-seeds", type=int)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("report", help="render tables and figures for a run directory")
    p.add_argument("--out", required=True, help="directory holding run artifacts")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CliError, report.ReportError,
            engine.TrainingDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
