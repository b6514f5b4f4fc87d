"""``afnet`` command line.

Config files are JSON with the sections ``dataset``, ``split``, ``model``,
``train`` and ``paths``. Precedence, lowest first: built-in defaults, the
config file (``--config`` path or a bundled name such as ``desk``), then
``--set section.key=value`` overrides, then dedicated flags (``--out``,
``--threads``). Relative paths resolve against the output root: ``--out``,
else ``$AFNET_OUT``, else ``./afnet_runs``.

Every artifact-producing subcommand writes ``resolved_<subcommand>.json``
into the output root; passing that file back as ``--config`` reproduces the
run.

Exit codes: 0 ok, 2 usage, 3 bad config, 4 missing input, 5 invalid data,
6 selftest failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

from . import model as M
from . import report as R
from . import signals as S
from . import training as T

log = logging.getLogger("afnet")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_SELFTEST = 0, 1, 2, 3, 4, 5, 6
OUT_ENV = "AFNET_OUT"

DEFAULT_PATHS = {
    "dataset": "dataset.amc",
    "stage1": "stage1.afn",
    "stage2": "stage2.afn",
    "weights": "weights.csv",
    "history1": "history_stage1.csv",
    "history2": "history_stage2.csv",
    "checkpoint": None,
    "report_json": "report.json",
    "report_dir": "report",
}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "dataset": S.DatasetManifest().to_dict(),
        "split": {"ratio": 0.8, "seed": 0},
        "model": M.ModelConfig().to_dict(),
        "train": T.TrainConfig().to_dict(),
        "paths": dict(DEFAULT_PATHS),
    }


def bundled_config(name: str) -> dict:
    text = resources.files("afnet_amc").joinpath("configs", f"{name}.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(source: str | None, overrides=()) -> dict:
    cfg = default_config()
    if source:
        path = Path(source)
        try:
            if path.suffix == ".json" or path.exists():
                loaded = json.loads(path.read_text())
            else:
                loaded = bundled_config(source)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"config {source!r} is neither a file nor a bundled config") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse config {source}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {source} must be a JSON object")
        unknown = set(loaded) - set(cfg) - {"root"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        keys, value = _parse_override(item)
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"override {item!r}: no section {k!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"override {item!r}: unknown key {keys[-1]!r}")
        node[keys[-1]] = value
    return cfg


class Run:
    """A resolved configuration plus typed views of its sections."""

    def __init__(self, cfg: dict, root: Path):
        self.cfg = cfg
        self.root = root
        try:
            self.manifest = S.DatasetManifest.from_dict(cfg["dataset"])
            model = dict(cfg["model"])
            model["frame_length"] = self.manifest.frame_length
            self.cfg["model"] = model
            self.model = M.ModelConfig(**model)
            self.train = T.TrainConfig(**cfg["train"])
            self.split_ratio = float(cfg["split"]["ratio"])
            self.split_seed = int(cfg["split"]["seed"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        labels = [int(S.Modulation.parse(s)) for s in self.manifest.schemes]
        if max(labels) >= self.model.num_classes:
            raise ConfigError(
                f"model has {self.model.num_classes} classes but the dataset uses label {max(labels)}"
            )

    def path(self, key: str) -> Path:
        value = self.cfg["paths"].get(key)
        if value is None:
            raise ConfigError(f"paths.{key} is not set")
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def snapshot(self, command: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        snap = dict(self.cfg)
        snap["root"] = str(self.root)
        (self.root / f"resolved_{command}.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")

    def load_splits(self):
        path = self.path("dataset")
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} not found; run 'afnet gen' first")
        frames, _ = S.read_dataset(path)
        return S.split_dataset(frames, self.split_ratio, self.split_seed)

    def checkpoint(self, default_key: str) -> Path:
        ckpt = self.cfg["paths"].get("checkpoint")
        path = self.path("checkpoint") if ckpt else self.path(default_key)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(run: Run, args) -> int:
    t0 = time.time()
    frames = S.generate_dataset(run.manifest, threads=args.threads or 1)
    path = run.path("dataset")
    path.parent.mkdir(parents=True, exist_ok=True)
    S.write_dataset(path, frames, run.manifest)
    run.snapshot("gen")
    log.info("wrote %d frames to %s in %.1fs", len(frames), path, time.time() - t0)
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    train, _ = run.load_splits()
    params, hist = T.train_stage(M.init_params(run.model, run.train.init_seed), run.model, train, run.train)
    run.root.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(run.path("stage1"), params, run.model)
    run.path("history1").write_text(hist.to_csv())
    run.snapshot("train")
    log.info("best epoch %d, val acc %.4f", hist.best_epoch, hist.val_acc[hist.best_epoch])
    return EXIT_OK


def cmd_weigh(run: Run, args) -> int:
    train, _ = run.load_splits()
    params, cfg = M.load_checkpoint(run.checkpoint("stage1"))
    table = T.compute_instance_weights(params, cfg, train, run.train.k)
    table.save(run.path("weights"))
    run.snapshot("weigh")
    log.info("mean confidence weight %.4f over %d frames", table.weights.mean(), len(table))
    return EXIT_OK


def cmd_train2(run: Run, args) -> int:
    train, _ = run.load_splits()
    res = T.two_stage_train(train, run.model, run.train)
    run.root.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for key, writer in (
            ("stage1", lambda p: M.save_checkpoint(p, res.stage1, run.model)),
            ("history1", lambda p: p.write_text(res.history1.to_csv())),
            ("weights", res.weights.save),
            ("stage2", lambda p: M.save_checkpoint(p, res.stage2, run.model)),
            ("history2", lambda p: p.write_text(res.history2.to_csv())),
        ):
            writer(run.path(key))
            written.append(run.path(key))
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    run.snapshot("train2")
    return EXIT_OK


def cmd_eval(run: Run, args) -> int:
    _, test = run.load_splits()
    path = run.checkpoint("stage2")
    params, cfg = M.load_checkpoint(path)
    rep = R.evaluate(params, cfg, test, run.train.k)
    out = run.path("report_json")
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    run.snapshot("eval")
    log.info(
        "%s: overall %.4f, average %.4f, max %.4f", path.name, rep.overall_accuracy, rep.average_accuracy, rep.max_accuracy
    )
    return EXIT_OK


def cmd_report(run: Run, args) -> int:
    src = run.path("report_json")
    if not src.exists():
        raise FileNotFoundError(f"evaluation report {src} not found; run 'afnet eval' first")
    rep = R.EvalReport.load(src)
    R.export_report(rep, run.path("report_dir"))
    run.snapshot("report")
    return EXIT_OK


def cmd_selftest(run: Run | None, args) -> int:
    from .selftest import run_all

    ok = True
    for name, passed, detail in run_all():
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_SELFTEST


COMMANDS = {
    "gen": (cmd_gen, "generate the synthetic dataset"),
    "train": (cmd_train, "train one cross-entropy stage"),
    "weigh": (cmd_weigh, "compute confidence weights from a checkpoint"),
    "train2": (cmd_train2, "run the two-stage confidence-weighted pipeline"),
    "eval": (cmd_eval, "evaluate a checkpoint on the test split"),
    "report": (cmd_report, "export CSV/SVG files from an evaluation"),
    "selftest": (cmd_selftest, "gradient checks and invariant suite"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afnet", description="AFNet modulation classification pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="config JSON file or bundled config name (desk, small)")
        p.add_argument("-o", "--out", help=f"output root (default ${OUT_ENV} or ./afnet_runs)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--checkpoint", help="checkpoint to use for weigh/eval")
        p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    func = COMMANDS[args.command][0]
    try:
        overrides = list(args.set)
        if args.threads is not None:
            overrides.append(f"train.threads={args.threads}")
        if args.checkpoint:
            overrides.append(f"paths.checkpoint={json.dumps(args.checkpoint)}")
        cfg = load_config(args.config, overrides)
        root = Path(args.out or cfg.get("root") or os.environ.get(OUT_ENV) or "afnet_runs")
        if args.command == "selftest":
            return func(None, args)
        return func(Run(cfg, root), args)
    except ConfigError as exc:
        print(f"afnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"afnet: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (S.DatasetFormatError, M.CheckpointError, ValueError) as exc:
        print(f"afnet: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"afnet: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
